//! Synthetic benchmark clouds and destination-cloud perturbations.
//!
//! Every random draw goes through ChaCha8 seeded from a `u64`, so the same
//! seed produces the same cloud on every platform.

use nalgebra::Vector3;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{principal_axes, Point3, PointCloud};

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("input cloud is empty")]
    EmptyCloud,
    #[error("crop removed every point")]
    CroppedToNothing,
}

/// Portable seeded RNG; `stream` separates independent uses of one seed.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Parameters of the valve-like shell: the surface
/// `z = a·x² − b·y² + c·x³` over the ellipse `(x/R)² + (y/(aspect·R))² ≤ 1`,
/// sampled on two layers offset by ±thickness/2 along the surface normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValveShellParams {
    pub radial_extent: f64,
    pub aspect: f64,
    pub thickness: f64,
    pub curvature_a: f64,
    pub curvature_b: f64,
    /// Cubic term; breaks the half-turn symmetry of the plain saddle.
    pub skew_c: f64,
    pub points_target: usize,
    pub seed: u64,
}

impl Default for ValveShellParams {
    fn default() -> Self {
        Self {
            radial_extent: 50.0,
            aspect: 0.7,
            thickness: 2.0,
            curvature_a: 0.01,
            curvature_b: 0.006,
            skew_c: 1e-4,
            points_target: 5000,
            seed: 1,
        }
    }
}

impl ValveShellParams {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::InvalidParams(m.to_string()));
        if self.points_target < 100 {
            return bad("points_target must be at least 100");
        }
        if !(self.radial_extent > 0.0 && self.radial_extent.is_finite()) {
            return bad("radial_extent must be positive");
        }
        if !(self.thickness > 0.0 && self.thickness.is_finite()) {
            return bad("thickness must be positive");
        }
        if !(self.aspect > 0.0 && self.aspect <= 1.0) {
            return bad("aspect must be in (0, 1]");
        }
        if ![self.curvature_a, self.curvature_b, self.skew_c].iter().all(|v| v.is_finite()) {
            return bad("curvature coefficients must be finite");
        }
        Ok(())
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.curvature_a * x * x - self.curvature_b * y * y + self.skew_c * x * x * x
    }

    fn gradient(&self, x: f64, y: f64) -> (f64, f64) {
        (2.0 * self.curvature_a * x + 3.0 * self.skew_c * x * x, -2.0 * self.curvature_b * y)
    }
}

/// Samples the valve-like shell with area-uniform density.
/// Produces exactly `points_target` points.
pub fn gen_valve_shell(params: &ValveShellParams) -> Result<PointCloud, GenError> {
    params.validate()?;
    let mut rng = seeded_rng(params.seed, 0);
    let r = params.radial_extent;
    let ry = params.aspect * r;

    // Bound on the area element over the domain for rejection sampling.
    let (gx, _) = params.gradient(r, 0.0);
    let (gx2, _) = params.gradient(-r, 0.0);
    let gy = 2.0 * params.curvature_b * ry;
    let max_area = (1.0 + gx.abs().max(gx2.abs()).powi(2) + gy * gy).sqrt();

    let mut points = Vec::with_capacity(params.points_target);
    while points.len() < params.points_target {
        let x = rng.random_range(-r..=r);
        let y = rng.random_range(-ry..=ry);
        let u: f64 = rng.random();
        if (x / r).powi(2) + (y / ry).powi(2) > 1.0 {
            continue;
        }
        let (dx, dy) = params.gradient(x, y);
        let area = (1.0 + dx * dx + dy * dy).sqrt();
        if u * max_area > area {
            continue;
        }
        let normal = Vector3::new(-dx, -dy, 1.0) / area;
        let side = if points.len() % 2 == 0 { 0.5 } else { -0.5 };
        let surface = Point3::new(x, y, params.height(x, y));
        points.push(surface + normal * (side * params.thickness));
    }
    Ok(PointCloud::from_trusted(points))
}

/// Sphere shell of the given radius, uniform on the surface.
pub fn gen_sphere(radius: f64, count: usize, seed: u64) -> Result<PointCloud, GenError> {
    if !(radius > 0.0) || count == 0 {
        return Err(GenError::InvalidParams("sphere needs radius > 0 and count > 0".into()));
    }
    let mut rng = seeded_rng(seed, 0);
    let points = (0..count)
        .map(|_| {
            let v = loop {
                let v = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                );
                if v.norm() > 1e-9 {
                    break v;
                }
            };
            Point3::from(v.normalize() * radius)
        })
        .collect();
    Ok(PointCloud::from_trusted(points))
}

/// Flat disc in the xy plane, uniform by area.
pub fn gen_disc(radius: f64, count: usize, seed: u64) -> Result<PointCloud, GenError> {
    if !(radius > 0.0) || count == 0 {
        return Err(GenError::InvalidParams("disc needs radius > 0 and count > 0".into()));
    }
    let mut rng = seeded_rng(seed, 0);
    let points = (0..count)
        .map(|_| {
            let rho = radius * rng.random::<f64>().sqrt();
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            Point3::new(rho * theta.cos(), rho * theta.sin(), 0.0)
        })
        .collect();
    Ok(PointCloud::from_trusted(points))
}

/// Uniformly random subset of `round(keep_fraction·n)` points without
/// replacement, in original order.
pub fn subsample(cloud: &PointCloud, keep_fraction: f64, seed: u64) -> Result<PointCloud, GenError> {
    if cloud.is_empty() {
        return Err(GenError::EmptyCloud);
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(GenError::InvalidParams(format!("keep_fraction must be in (0, 1], got {keep_fraction}")));
    }
    let n = cloud.len();
    let k = ((keep_fraction * n as f64).round() as usize).clamp(1, n);
    let mut rng = seeded_rng(seed, 1);
    let mut keep = index::sample(&mut rng, n, k).into_vec();
    keep.sort_unstable();
    Ok(cloud.select(&keep))
}

/// Oriented plane `{p : (p − origin)·normal = 0}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub origin: Point3,
    pub normal: Vector3<f64>,
}

impl Plane {
    pub fn signed_distance(&self, p: &Point3) -> f64 {
        (p - self.origin).dot(&self.normal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CropPlane {
    /// Through the coordinate-wise median, normal along the longest principal
    /// axis.
    Median,
    Explicit(Plane),
}

/// The canonical cropping plane of a cloud. The normal's sign is fixed so its
/// largest-magnitude component is positive.
pub fn median_plane(cloud: &PointCloud) -> Result<Plane, GenError> {
    if cloud.is_empty() {
        return Err(GenError::EmptyCloud);
    }
    let median = |f: fn(&Point3) -> f64| {
        let mut v: Vec<f64> = cloud.iter().map(f).collect();
        let mid = v.len() / 2;
        *v.select_nth_unstable_by(mid, f64::total_cmp).1
    };
    let origin = Point3::new(median(|p| p.x), median(|p| p.y), median(|p| p.z));
    let (_, axes) = principal_axes(cloud.points()).ok_or(GenError::EmptyCloud)?;
    let mut normal: Vector3<f64> = axes.column(0).into_owned();
    let imax = normal.iamax();
    if normal[imax] < 0.0 {
        normal = -normal;
    }
    Ok(Plane { origin, normal })
}

/// Keeps the points on the non-negative side of the plane.
pub fn crop_half(cloud: &PointCloud, plane: CropPlane) -> Result<PointCloud, GenError> {
    let plane = match plane {
        CropPlane::Median => median_plane(cloud)?,
        CropPlane::Explicit(p) => {
            let norm = p.normal.norm();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(GenError::InvalidParams("crop plane normal must be non-zero".into()));
            }
            Plane { origin: p.origin, normal: p.normal / norm }
        }
    };
    let kept: Vec<Point3> = cloud.iter().filter(|p| plane.signed_distance(p) >= 0.0).copied().collect();
    if kept.is_empty() {
        return Err(GenError::CroppedToNothing);
    }
    Ok(PointCloud::from_trusted(kept))
}

/// Independent isotropic Gaussian displacement of each point.
pub fn add_noise(cloud: &PointCloud, sigma: f64, seed: u64) -> Result<PointCloud, GenError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(GenError::InvalidParams(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let mut rng = seeded_rng(seed, 2);
    let normal = rand_distr::Normal::new(0.0, sigma).map_err(|e| GenError::InvalidParams(e.to_string()))?;
    let points = cloud
        .iter()
        .map(|p| p + Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)))
        .collect();
    Ok(PointCloud::from_trusted(points))
}

/// Destination-cloud perturbation applied after the ground-truth transform.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSpec {
    pub keep_fraction: f64,
    pub crop: Option<CropPlane>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self { keep_fraction: 1.0, crop: None, noise_sigma: 0.0, seed: 0 }
    }
}

/// Resample, then crop, then add noise.
pub fn perturb(cloud: &PointCloud, spec: &PerturbationSpec) -> Result<PointCloud, GenError> {
    let mut out = if spec.keep_fraction < 1.0 {
        subsample(cloud, spec.keep_fraction, spec.seed)?
    } else {
        if cloud.is_empty() {
            return Err(GenError::EmptyCloud);
        }
        cloud.clone()
    };
    if let Some(plane) = spec.crop {
        out = crop_half(&out, plane)?;
    }
    add_noise(&out, spec.noise_sigma, spec.seed)
}
