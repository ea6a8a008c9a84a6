//! Rigid fitting: closed-form least squares, RANSAC over correspondences and
//! trimmed point-to-point ICP.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloudgen::seeded_rng;
use crate::geometry::{Point3, PointCloud, RigidTransform};
use crate::spatial::SpatialIndex;

/// Relative singular-value threshold below which the cross-covariance is
/// treated as rank deficient.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("need at least {needed} correspondences, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("source has {src} points but destination has {dst}")]
    CountMismatch { src: usize, dst: usize },
    #[error("unstable fit: point configuration is degenerate (rank < 2)")]
    UnstableFit,
    #[error("no consensus: best hypothesis has {best} inliers, need {needed}")]
    NoConsensus { best: usize, needed: usize },
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// Paired source and destination points; pair `i` is `(src[i], dst[i])`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrespondenceSet {
    src: Vec<Point3>,
    dst: Vec<Point3>,
}

impl CorrespondenceSet {
    pub fn new(src: Vec<Point3>, dst: Vec<Point3>) -> Result<Self, AlignError> {
        if src.len() != dst.len() {
            return Err(AlignError::CountMismatch { src: src.len(), dst: dst.len() });
        }
        Ok(Self { src, dst })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Point3, Point3)>) -> Self {
        let (src, dst) = pairs.into_iter().unzip();
        Self { src, dst }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn src(&self) -> &[Point3] {
        &self.src
    }

    pub fn dst(&self) -> &[Point3] {
        &self.dst
    }

    pub fn subset(&self, indices: &[usize]) -> CorrespondenceSet {
        CorrespondenceSet {
            src: indices.iter().map(|&i| self.src[i]).collect(),
            dst: indices.iter().map(|&i| self.dst[i]).collect(),
        }
    }

    /// `‖t(src_i) − dst_i‖` for every pair.
    pub fn residuals(&self, t: &RigidTransform) -> Vec<f64> {
        self.src.iter().zip(&self.dst).map(|(p, q)| (t.apply(p) - q).norm()).collect()
    }
}

/// Least-squares proper rigid transform mapping `src` onto `dst`.
///
/// Centres both sets, takes the SVD of the cross-covariance
/// `H = Σ (p − p̄)(q − q̄)ᵀ = UΣVᵀ` and sets `R = V·diag(1, 1, det(VUᵀ))·Uᵀ`,
/// `t = q̄ − R·p̄`. The sign correction acts on the smallest singular value.
pub fn estimate_rigid_schonemann(src: &[Point3], dst: &[Point3]) -> Result<RigidTransform, AlignError> {
    if src.len() != dst.len() {
        return Err(AlignError::CountMismatch { src: src.len(), dst: dst.len() });
    }
    if src.len() < 3 {
        return Err(AlignError::TooFew { needed: 3, got: src.len() });
    }
    let n = src.len() as f64;
    let ps = src.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let qs = dst.iter().fold(Vector3::zeros(), |a, q| a + q.coords) / n;
    let mut h = Matrix3::zeros();
    for (p, q) in src.iter().zip(dst) {
        h += (p.coords - ps) * (q.coords - qs).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    if !(sv[order[0]] > 0.0) || sv[order[1]] <= RANK_TOL * sv[order[0]] {
        return Err(AlignError::UnstableFit);
    }
    let v = v_t.transpose();
    let mut d = Matrix3::identity();
    d[(order[2], order[2])] = (v * u.transpose()).determinant().signum();
    let rotation = v * d * u.transpose();
    let translation = qs - rotation * ps;
    Ok(RigidTransform::from_parts_trusted(rotation, translation))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RansacParams {
    pub iterations: usize,
    pub inlier_radius: f64,
    pub min_inliers: usize,
    pub seed: u64,
    /// Stop early once this confidence of having drawn an all-inlier sample
    /// is reached. `None` disables the early exit.
    pub confidence: Option<f64>,
}

impl RansacParams {
    pub fn new(inlier_radius: f64) -> Self {
        Self { iterations: 2000, inlier_radius, min_inliers: 3, seed: 0, confidence: Some(0.999) }
    }

    pub fn validate(&self) -> Result<(), AlignError> {
        if self.iterations == 0 {
            return Err(AlignError::InvalidParams("iterations must be >= 1".into()));
        }
        if !(self.inlier_radius > 0.0) || !self.inlier_radius.is_finite() {
            return Err(AlignError::InvalidParams("inlier_radius must be positive".into()));
        }
        if self.min_inliers < 3 {
            return Err(AlignError::InvalidParams("min_inliers must be >= 3".into()));
        }
        if let Some(c) = self.confidence {
            if !(c > 0.0 && c < 1.0) {
                return Err(AlignError::InvalidParams("confidence must be in (0, 1)".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacOutcome {
    /// Indices into the input correspondence set, ascending.
    pub inliers: Vec<usize>,
    pub transform: RigidTransform,
    pub iterations: usize,
}

impl RansacOutcome {
    pub fn inlier_set(&self, c: &CorrespondenceSet) -> CorrespondenceSet {
        c.subset(&self.inliers)
    }
}

struct Consensus {
    inliers: Vec<usize>,
    residual: f64,
}

fn consensus(c: &CorrespondenceSet, t: &RigidTransform, radius: f64) -> Consensus {
    let mut inliers = Vec::new();
    let mut residual = 0.0;
    for (i, r) in c.residuals(t).into_iter().enumerate() {
        if r <= radius {
            inliers.push(i);
            residual += r;
        }
    }
    Consensus { inliers, residual }
}

fn fit_subset(c: &CorrespondenceSet, idx: &[usize]) -> Result<RigidTransform, AlignError> {
    let s = c.subset(idx);
    estimate_rigid_schonemann(&s.src, &s.dst)
}

/// Samples needed to draw one all-inlier triple with probability `confidence`.
fn required_iterations(inlier_ratio: f64, confidence: f64) -> f64 {
    let w3 = inlier_ratio.powi(3);
    if w3 >= 1.0 {
        return 0.0;
    }
    if w3 <= 0.0 {
        return f64::INFINITY;
    }
    (1.0 - confidence).ln() / (1.0 - w3).ln()
}

/// Largest subset of `c` consistent with one rigid transform.
///
/// Hypotheses come from random triples; the best one maximises the inlier
/// count, then minimises the summed inlier residual, then the earliest
/// iteration wins. The winner is refit on its inliers until the inlier set
/// stops changing. Every returned inlier is within `inlier_radius` under the
/// returned transform.
pub fn ransac_filter(c: &CorrespondenceSet, params: &RansacParams) -> Result<RansacOutcome, AlignError> {
    params.validate()?;
    let n = c.len();
    if n < 3 {
        return Err(AlignError::TooFew { needed: 3, got: n });
    }
    let mut rng = seeded_rng(params.seed, 5);
    let mut best: Option<Consensus> = None;
    let mut iterations = 0;
    while iterations < params.iterations {
        iterations += 1;
        let mut sample = index::sample(&mut rng, n, 3).into_vec();
        sample.sort_unstable();
        let Ok(t) = fit_subset(c, &sample) else { continue };
        let cand = consensus(c, &t, params.inlier_radius);
        let better = match &best {
            None => true,
            Some(b) => {
                cand.inliers.len() > b.inliers.len()
                    || (cand.inliers.len() == b.inliers.len() && cand.residual < b.residual)
            }
        };
        if better {
            best = Some(cand);
        }
        if let (Some(conf), Some(b)) = (params.confidence, &best) {
            let needed = required_iterations(b.inliers.len() as f64 / n as f64, conf);
            if (iterations as f64) >= needed {
                break;
            }
        }
    }
    let best_count = best.as_ref().map_or(0, |b| b.inliers.len());
    if best_count < params.min_inliers {
        return Err(AlignError::NoConsensus { best: best_count, needed: params.min_inliers });
    }
    let mut inliers = best.expect("checked above").inliers;
    let mut transform = fit_subset(c, &inliers)?;
    for _ in 0..50 {
        let next = consensus(c, &transform, params.inlier_radius).inliers;
        if next == inliers {
            break;
        }
        if next.len() < params.min_inliers {
            break;
        }
        match fit_subset(c, &next) {
            Ok(t) => {
                inliers = next;
                transform = t;
            }
            Err(_) => break,
        }
    }
    // Report exactly the pairs within the radius of the returned transform.
    let inliers = consensus(c, &transform, params.inlier_radius).inliers;
    if inliers.len() < params.min_inliers {
        return Err(AlignError::NoConsensus { best: inliers.len(), needed: params.min_inliers });
    }
    Ok(RansacOutcome { inliers, transform, iterations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpParams {
    pub max_iters: usize,
    /// Mean source-point displacement between successive estimates (µm)
    /// below which the iteration stops.
    pub convergence_eps: f64,
    /// Fraction of nearest-neighbour pairs kept, closest first.
    pub correspondence_rejection: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self { max_iters: 100, convergence_eps: 1e-4, correspondence_rejection: 0.8 }
    }
}

impl IcpParams {
    pub fn validate(&self) -> Result<(), AlignError> {
        if self.max_iters == 0 || !(self.convergence_eps > 0.0) {
            return Err(AlignError::InvalidParams("max_iters and convergence_eps must be positive".into()));
        }
        if !(self.correspondence_rejection > 0.0 && self.correspondence_rejection <= 1.0) {
            return Err(AlignError::InvalidParams("correspondence_rejection must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub iterations: usize,
    pub converged: bool,
    /// Trimmed RMS nearest-neighbour distance under the initial estimate and
    /// after every refit.
    pub residuals: Vec<f64>,
}

struct Trimmed {
    src: Vec<Point3>,
    dst: Vec<Point3>,
    rms: f64,
}

fn trimmed_pairs(src: &[Point3], t: &RigidTransform, dst: &[Point3], index: &SpatialIndex, keep: usize) -> Trimmed {
    let mut pairs: Vec<(f64, usize, usize)> = src
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (j, d) = index.nearest(&t.apply(p)).expect("destination is non-empty");
            (d, i, j)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    pairs.truncate(keep);
    let rms = (pairs.iter().map(|p| p.0 * p.0).sum::<f64>() / keep as f64).sqrt();
    Trimmed { src: pairs.iter().map(|p| src[p.1]).collect(), dst: pairs.iter().map(|p| dst[p.2]).collect(), rms }
}

fn mean_displacement(points: &[Point3], a: &RigidTransform, b: &RigidTransform) -> f64 {
    points.iter().map(|p| (a.apply(p) - b.apply(p)).norm()).sum::<f64>() / points.len() as f64
}

/// Trimmed point-to-point ICP from `init`.
///
/// The trimmed RMS residual cannot increase from one iteration to the next:
/// the refit minimises the squared distances of the kept pairs, and the next
/// nearest-neighbour search can only shorten them.
pub fn icp(
    src: &PointCloud,
    dst: &PointCloud,
    init: &RigidTransform,
    params: &IcpParams,
) -> Result<IcpResult, AlignError> {
    params.validate()?;
    if src.is_empty() || dst.is_empty() {
        return Err(AlignError::EmptyCloud);
    }
    let index = SpatialIndex::new(dst.points());
    let keep = ((params.correspondence_rejection * src.len() as f64).ceil() as usize).clamp(1, src.len());
    let mut t = *init;
    let mut current = trimmed_pairs(src.points(), &t, dst.points(), &index, keep);
    let mut residuals = vec![current.rms];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < params.max_iters {
        let Ok(next) = estimate_rigid_schonemann(&current.src, &current.dst) else { break };
        iterations += 1;
        let step = mean_displacement(src.points(), &t, &next);
        t = next;
        current = trimmed_pairs(src.points(), &t, dst.points(), &index, keep);
        residuals.push(current.rms);
        if step < params.convergence_eps {
            converged = true;
            break;
        }
    }
    Ok(IcpResult { transform: t, iterations, converged, residuals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloudgen::{gen_valve_shell, ValveShellParams};
    use crate::geometry::{apply_transform, rotation_xy};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = seeded_rng(seed, 0);
        (0..n)
            .map(|_| {
                Point3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0))
            })
            .collect()
    }

    fn random_transform(seed: u64) -> RigidTransform {
        let mut rng = seeded_rng(seed, 9);
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let rot = RigidTransform::from_axis_angle(&axis, rng.random_range(0.0..std::f64::consts::PI));
        let shift =
            Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        RigidTransform::from_translation(shift).compose(&rot)
    }

    fn sum_sq(t: &RigidTransform, src: &[Point3], dst: &[Point3]) -> f64 {
        src.iter().zip(dst).map(|(p, q)| (t.apply(p) - q).norm_squared()).sum()
    }

    #[test]
    fn identity_and_quarter_turn() {
        let src = random_points(10, 1);
        let t = estimate_rigid_schonemann(&src, &src).unwrap();
        assert!(t.distance(&RigidTransform::identity()) < 1e-9);
        let rot = rotation_xy(std::f64::consts::FRAC_PI_2);
        let dst: Vec<Point3> = src.iter().map(|p| rot.apply(p)).collect();
        let t = estimate_rigid_schonemann(&src, &dst).unwrap();
        assert!(t.distance(&rot) < 1e-9);
    }

    #[test]
    fn reflection_gives_proper_rotation() {
        let src = random_points(8, 2);
        let dst: Vec<Point3> = src.iter().map(|p| Point3::new(-p.x, p.y, p.z)).collect();
        let t = estimate_rigid_schonemann(&src, &dst).unwrap();
        assert!((t.rotation().determinant() - 1.0).abs() < 1e-12);
        assert!(sum_sq(&t, &src, &dst) > 1e-3);
    }

    #[test]
    fn degenerate_inputs() {
        let line: Vec<Point3> = (0..5).map(|i| Point3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert_eq!(estimate_rigid_schonemann(&line, &line), Err(AlignError::UnstableFit));
        let same = vec![Point3::new(1.0, 1.0, 1.0); 4];
        assert_eq!(estimate_rigid_schonemann(&same, &same), Err(AlignError::UnstableFit));
        let two = random_points(2, 3);
        assert!(matches!(estimate_rigid_schonemann(&two, &two), Err(AlignError::TooFew { .. })));
        let three = random_points(3, 3);
        assert!(matches!(estimate_rigid_schonemann(&three, &two), Err(AlignError::CountMismatch { .. })));
    }

    #[test]
    fn planar_points_are_fine() {
        let src: Vec<Point3> = random_points(6, 4).into_iter().map(|p| Point3::new(p.x, p.y, 0.0)).collect();
        let truth = random_transform(4);
        let dst: Vec<Point3> = src.iter().map(|p| truth.apply(p)).collect();
        assert!(estimate_rigid_schonemann(&src, &dst).unwrap().distance(&truth) < 1e-9);
    }

    #[test]
    fn minimiser_beats_random_rotations() {
        for seed in 0..5 {
            let n = 3 + seed as usize % 3;
            let src = random_points(n, 10 + seed);
            let dst = random_points(n, 20 + seed);
            let t = estimate_rigid_schonemann(&src, &dst).unwrap();
            let best = sum_sq(&t, &src, &dst);
            let qbar = dst.iter().fold(Vector3::zeros(), |a, q| a + q.coords) / n as f64;
            let pbar = src.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n as f64;
            for k in 0..1000 {
                let rot = random_transform(1000 * seed + k);
                // Optimal translation for a fixed rotation.
                let shift = qbar - rot.rotation() * pbar;
                let cand = RigidTransform::new(*rot.rotation(), shift).unwrap();
                assert!(sum_sq(&cand, &src, &dst) >= best - 1e-9);
            }
        }
    }

    fn planted(n_in: usize, n_out: usize, seed: u64) -> (CorrespondenceSet, RigidTransform) {
        let truth = random_transform(seed);
        let mut rng = seeded_rng(seed, 7);
        let mut pairs = Vec::new();
        for _ in 0..n_in {
            let p = Point3::new(
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
            );
            pairs.push((p, truth.apply(&p)));
        }
        for _ in 0..n_out {
            let p = Point3::new(
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
            );
            let q = Point3::new(
                rng.random_range(-150.0..150.0),
                rng.random_range(-150.0..150.0),
                rng.random_range(-150.0..150.0),
            );
            pairs.push((p, q));
        }
        (CorrespondenceSet::from_pairs(pairs), truth)
    }

    #[test]
    fn ransac_all_consistent() {
        let (c, truth) = planted(12, 0, 1);
        let out = ransac_filter(&c, &RansacParams::new(1.0)).unwrap();
        assert_eq!(out.inliers, (0..12).collect::<Vec<_>>());
        assert!(out.transform.distance(&truth) < 1e-6);
    }

    #[test]
    fn ransac_recovers_planted_inliers() {
        for seed in 0..20 {
            let (c, truth) = planted(7, 3, seed);
            let params = RansacParams { seed, ..RansacParams::new(1.0) };
            let out = ransac_filter(&c, &params).unwrap();
            assert_eq!(out.inliers, (0..7).collect::<Vec<_>>(), "seed {seed}");
            assert!(out.transform.distance(&truth) < 1e-6);
        }
    }

    #[test]
    fn ransac_errors() {
        let (c, _) = planted(2, 0, 1);
        assert!(matches!(ransac_filter(&c, &RansacParams::new(1.0)), Err(AlignError::TooFew { .. })));
        let (c, _) = planted(0, 10, 2);
        let params = RansacParams { min_inliers: 5, ..RansacParams::new(1e-3) };
        assert!(matches!(ransac_filter(&c, &params), Err(AlignError::NoConsensus { .. })));
        assert!(ransac_filter(&c, &RansacParams::new(-1.0)).is_err());
        assert!(ransac_filter(&c, &RansacParams { min_inliers: 2, ..RansacParams::new(1.0) }).is_err());
    }

    #[test]
    fn ransac_is_deterministic() {
        let (c, _) = planted(10, 5, 3);
        let params = RansacParams { seed: 4, confidence: None, ..RansacParams::new(1.0) };
        assert_eq!(ransac_filter(&c, &params).unwrap(), ransac_filter(&c, &params).unwrap());
    }

    proptest! {
        #[test]
        fn ransac_inliers_within_radius(seed in 0u64..500, n_out in 0usize..8, radius in 0.5f64..40.0) {
            let (c, _) = planted(6, n_out, seed);
            let params = RansacParams { seed, ..RansacParams::new(radius) };
            if let Ok(out) = ransac_filter(&c, &params) {
                let r = c.residuals(&out.transform);
                for &i in &out.inliers {
                    prop_assert!(r[i] <= radius);
                }
            }
        }

        #[test]
        fn schonemann_recovers_random_motion(seed in any::<u64>(), n in 3usize..50) {
            let src = random_points(n, seed);
            let truth = random_transform(seed);
            let dst: Vec<Point3> = src.iter().map(|p| truth.apply(p)).collect();
            let t = estimate_rigid_schonemann(&src, &dst).unwrap();
            prop_assert!((t.rotation() - truth.rotation()).norm() < 1e-9);
            prop_assert!((t.translation() - truth.translation()).norm() < 1e-9);
        }
    }

    fn valve() -> PointCloud {
        gen_valve_shell(&ValveShellParams { points_target: 1500, ..Default::default() }).unwrap()
    }

    #[test]
    fn icp_on_identical_clouds() {
        let cloud = valve();
        let out = icp(&cloud, &cloud, &RigidTransform::identity(), &IcpParams::default()).unwrap();
        assert!(out.transform.distance(&RigidTransform::identity()) < 1e-6);
        assert!(out.iterations <= 2);
        assert!(out.converged);
    }

    #[test]
    fn icp_recovers_small_rotation() {
        let cloud = valve();
        let truth = RigidTransform::from_axis_angle(&Vector3::z(), 5f64.to_radians());
        let dst = apply_transform(&cloud, &truth);
        let out = icp(&cloud, &dst, &RigidTransform::identity(), &IcpParams::default()).unwrap();
        let err = out.transform.compose(&truth.inverse()).angle();
        assert!(err < 1e-3, "angle error {err}");
    }

    #[test]
    fn icp_residual_non_increasing() {
        let cloud = valve();
        for (k, angle) in [0.1, 0.5, std::f64::consts::FRAC_PI_2].into_iter().enumerate() {
            let truth = RigidTransform::from_translation(Vector3::new(3.0, -2.0, 1.0)).compose(&rotation_xy(angle));
            let dst = apply_transform(&cloud.select(&(k..cloud.len()).step_by(2).collect::<Vec<_>>()), &truth);
            let out = icp(&cloud, &dst, &RigidTransform::identity(), &IcpParams::default()).unwrap();
            for w in out.residuals.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", out.residuals);
            }
        }
    }

    #[test]
    fn icp_errors() {
        let cloud = valve();
        let empty = PointCloud::default();
        let p = IcpParams::default();
        assert_eq!(icp(&empty, &cloud, &RigidTransform::identity(), &p), Err(AlignError::EmptyCloud));
        assert_eq!(icp(&cloud, &empty, &RigidTransform::identity(), &p), Err(AlignError::EmptyCloud));
        let bad = IcpParams { correspondence_rejection: 0.0, ..p };
        assert!(icp(&cloud, &cloud, &RigidTransform::identity(), &bad).is_err());
    }
}
