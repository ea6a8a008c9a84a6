//! Vertex and edge features, and the factored similarity matrix of the
//! graph-matching objective.
//!
//! Vertex features are Ensemble-of-Shape-Functions histograms computed per
//! cluster. Edge features are centroid distances.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::cloudgen::seeded_rng;
use crate::geometry::{centroid, principal_axes, Point3, PointCloud};
use crate::graph::ClusterGraph;

pub const ESF_BINS: usize = 64;
pub const ESF_HISTOGRAMS: usize = 10;
pub const ESF_LEN: usize = ESF_BINS * ESF_HISTOGRAMS;
pub const ESF_GRID: usize = 64;
pub const ESF_MIN_POINTS: usize = 4;
pub const ESF_MIN_SAMPLES: usize = 1000;
pub const ESF_DEFAULT_SAMPLES: usize = 20_000;

/// Sub-histogram slots, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EsfHistogram {
    A3In = 0,
    A3Out,
    A3Mixed,
    D2In,
    D2Out,
    D2Mixed,
    D2Ratio,
    D3In,
    D3Out,
    D3Mixed,
}

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("ESF needs at least {ESF_MIN_POINTS} points, got {0}")]
    TooFewPoints(usize),
    #[error("ESF sample count must be at least {ESF_MIN_SAMPLES}, got {0}")]
    TooFewSamples(usize),
    #[error("surface radius must be finite and non-negative, got {0}")]
    InvalidRadius(f64),
    #[error("vertex {0} is not synthetic but has no descriptor")]
    MissingDescriptor(usize),
    #[error("descriptor count {descriptors} does not match vertex count {vertices}")]
    CountMismatch { descriptors: usize, vertices: usize },
}

/// 640-value ESF descriptor: ten 64-bin histograms, each normalised to unit
/// sum unless it received no samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EsfDescriptor {
    values: Box<[f64; ESF_LEN]>,
    empty: [bool; ESF_HISTOGRAMS],
}

impl EsfDescriptor {
    pub fn values(&self) -> &[f64] {
        &self.values[..]
    }

    pub fn histogram(&self, h: usize) -> &[f64] {
        &self.values[h * ESF_BINS..(h + 1) * ESF_BINS]
    }

    pub fn is_empty_histogram(&self, h: usize) -> bool {
        self.empty[h]
    }

    /// Builds a descriptor from raw counts, normalising each sub-histogram.
    pub fn from_counts(counts: &[f64]) -> Self {
        assert_eq!(counts.len(), ESF_LEN);
        let mut values = Box::new([0.0; ESF_LEN]);
        let mut empty = [false; ESF_HISTOGRAMS];
        for (h, is_empty) in empty.iter_mut().enumerate() {
            let range = h * ESF_BINS..(h + 1) * ESF_BINS;
            let total: f64 = counts[range.clone()].iter().sum();
            if total > 0.0 {
                for i in range {
                    values[i] = counts[i] / total;
                }
            } else {
                *is_empty = true;
            }
        }
        Self { values, empty }
    }

    /// Sum of |a − b| over all 640 values.
    pub fn l1_distance(&self, other: &EsfDescriptor) -> f64 {
        self.values.iter().zip(other.values.iter()).map(|(a, b)| (a - b).abs()).sum()
    }
}

/// Occupancy of a 64³ grid laid out in the point set's principal-axis frame,
/// centred on its centroid. The frame makes classification independent of the
/// cloud's pose.
struct Occupancy {
    centre: Point3,
    axes_t: Matrix3<f64>,
    half: f64,
    cell: f64,
    bits: Vec<u64>,
}

impl Occupancy {
    /// Marks the voxel of every point and, with `surface_radius > 0`, every
    /// voxel whose centre lies within that distance of a point, so that the
    /// grid approximates the sampled surface rather than the samples.
    fn new(points: &[Point3], surface_radius: f64) -> Self {
        let centre = centroid(points).expect("non-empty");
        let (_, axes) = principal_axes(points).expect("non-empty");
        let axes_t = axes.transpose();
        let half = points.iter().map(|p| (axes_t * (p - centre)).amax()).fold(0.0, f64::max).max(f64::MIN_POSITIVE)
            * (1.0 + 1e-9);
        let cell = 2.0 * half / ESF_GRID as f64;
        let mut occ = Self { centre, axes_t, half, cell, bits: vec![0; ESF_GRID.pow(3) / 64] };
        let reach = (surface_radius / cell).ceil() as i64;
        let r2 = surface_radius * surface_radius;
        for p in points {
            let local = occ.local(p);
            occ.set(occ.index(&local));
            if reach == 0 {
                continue;
            }
            let home = occ.cell_of(&local);
            for dx in -reach..=reach {
                for dy in -reach..=reach {
                    for dz in -reach..=reach {
                        let c = [home[0] + dx, home[1] + dy, home[2] + dz];
                        if c.iter().any(|&v| v < 0 || v >= ESF_GRID as i64) {
                            continue;
                        }
                        let centre =
                            Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64).map(|v| (v + 0.5) * cell - half);
                        if (centre - local).norm_squared() <= r2 {
                            occ.set(((c[0] as usize * ESF_GRID) + c[1] as usize) * ESF_GRID + c[2] as usize);
                        }
                    }
                }
            }
        }
        occ
    }

    fn set(&mut self, idx: usize) {
        self.bits[idx / 64] |= 1 << (idx % 64);
    }

    fn cell_of(&self, local: &Vector3<f64>) -> [i64; 3] {
        let c = |v: f64| (((v + self.half) / self.cell).floor().max(0.0) as i64).min(ESF_GRID as i64 - 1);
        [c(local.x), c(local.y), c(local.z)]
    }

    fn local(&self, p: &Point3) -> Vector3<f64> {
        self.axes_t * (p - self.centre)
    }

    fn index(&self, local: &Vector3<f64>) -> usize {
        let c = |v: f64| (((v + self.half) / self.cell).floor().max(0.0) as usize).min(ESF_GRID - 1);
        (c(local.x) * ESF_GRID + c(local.y)) * ESF_GRID + c(local.z)
    }

    fn occupied(&self, local: &Vector3<f64>) -> bool {
        let idx = self.index(local);
        self.bits[idx / 64] & (1 << (idx % 64)) != 0
    }

    /// Fraction of interior half-voxel samples along a → b that fall in
    /// occupied voxels. Segments too short to have interior samples count as
    /// fully inside.
    fn in_ratio(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
        let len = (b - a).norm();
        let steps = (len / (0.5 * self.cell)).ceil() as usize;
        if steps < 2 {
            return 1.0;
        }
        let inside = (1..steps)
            .filter(|&k| {
                let t = k as f64 / steps as f64;
                self.occupied(&(a + (b - a) * t))
            })
            .count();
        inside as f64 / (steps - 1) as f64
    }
}

fn bin(value: f64, max: f64) -> usize {
    if !(max > 0.0) {
        return 0;
    }
    ((value / max * ESF_BINS as f64).floor().max(0.0) as usize).min(ESF_BINS - 1)
}

/// 0 = IN, 1 = OUT, 2 = MIXED.
fn class_of(ratio: f64) -> usize {
    if ratio >= 1.0 {
        0
    } else if ratio <= 0.0 {
        1
    } else {
        2
    }
}

/// Index triplets drawn for a point set of size `n`; depends only on
/// `(n, sample_count, seed)`.
pub fn esf_sample_triplets(n: usize, sample_count: usize, seed: u64) -> Vec<[usize; 3]> {
    let mut rng = seeded_rng(seed, 3);
    (0..sample_count)
        .map(|_| {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let mut c = rng.random_range(0..n - 2);
            for lo in [a.min(b), a.max(b)] {
                if c >= lo {
                    c += 1;
                }
            }
            [a, b, c]
        })
        .collect()
}

/// ESF descriptor of `points`, built from `sample_count` random triplets,
/// with occupancy taken from the points alone.
pub fn compute_esf(points: &[Point3], sample_count: usize, seed: u64) -> Result<EsfDescriptor, FeatureError> {
    compute_esf_with(points, &EsfParams { sample_count, seed, surface_radius: 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EsfParams {
    pub sample_count: usize,
    pub seed: u64,
    /// Occupancy dilation radius (µm); 0 marks only the voxels holding points.
    pub surface_radius: f64,
}

/// ESF descriptor with explicit occupancy settings.
///
/// Per triplet: the angle at the first point (A3, classified by the opposite
/// segment), the three pairwise distances (D2, each classified by its own
/// segment, plus the in-ratio of each segment), and the square root of the
/// triangle area (D3, IN/OUT only if all three segments agree). Distances
/// and areas are scaled by the diagonal of the principal-frame bounding box.
pub fn compute_esf_with(points: &[Point3], params: &EsfParams) -> Result<EsfDescriptor, FeatureError> {
    let EsfParams { sample_count, seed, surface_radius } = *params;
    if points.len() < ESF_MIN_POINTS {
        return Err(FeatureError::TooFewPoints(points.len()));
    }
    if sample_count < ESF_MIN_SAMPLES {
        return Err(FeatureError::TooFewSamples(sample_count));
    }
    if !(surface_radius >= 0.0 && surface_radius.is_finite()) {
        return Err(FeatureError::InvalidRadius(surface_radius));
    }
    let occ = Occupancy::new(points, surface_radius);
    let local: Vec<Vector3<f64>> = points.iter().map(|p| occ.local(p)).collect();
    let (lo, hi) =
        local.iter().fold((Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY)), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        });
    let diag = (hi - lo).norm();
    // Largest possible √area for a triangle with sides ≤ diag.
    let d3_max = diag * (3f64.sqrt() / 4.0).sqrt();

    // Triplets revisit the same point pairs, so each segment is traced once.
    let mut traced: HashMap<(usize, usize), f64> = HashMap::new();
    let mut ratio_of = |i: usize, j: usize| {
        let key = (i.min(j), i.max(j));
        *traced.entry(key).or_insert_with(|| occ.in_ratio(&local[key.0], &local[key.1]))
    };
    let mut counts = vec![0.0; ESF_LEN];
    let mut add = |h: usize, b: usize| counts[h * ESF_BINS + b] += 1.0;
    for [i, j, k] in esf_sample_triplets(points.len(), sample_count, seed) {
        let (p0, p1, p2) = (&local[i], &local[j], &local[k]);
        let segments = [(i, j), (j, k), (k, i)];
        let mut classes = [0usize; 3];
        for (s, &(a, b)) in segments.iter().enumerate() {
            let ratio = ratio_of(a, b);
            let (a, b) = (&local[a], &local[b]);
            classes[s] = class_of(ratio);
            add(EsfHistogram::D2In as usize + classes[s], bin((*b - *a).norm(), diag));
            add(EsfHistogram::D2Ratio as usize, bin(ratio, 1.0));
        }

        let u = p1 - p0;
        let v = p2 - p0;
        let denom = u.norm() * v.norm();
        if denom > 0.0 {
            let angle = (u.dot(&v) / denom).clamp(-1.0, 1.0).acos();
            add(EsfHistogram::A3In as usize + classes[1], bin(angle, PI));
        }

        let area = 0.5 * u.cross(&v).norm();
        let d3_class = if classes.iter().all(|&c| c == 0) {
            0
        } else if classes.iter().all(|&c| c == 1) {
            1
        } else {
            2
        };
        add(EsfHistogram::D3In as usize + d3_class, bin(area.sqrt(), d3_max));
    }
    Ok(EsfDescriptor::from_counts(&counts))
}

/// `1 − ‖a − b‖₁ / 20`: 1 for identical descriptors, 0 when every
/// sub-histogram is disjoint.
pub fn vertex_similarity(a: &EsfDescriptor, b: &EsfDescriptor) -> f64 {
    (1.0 - 0.5 * a.l1_distance(b) / ESF_HISTOGRAMS as f64).clamp(0.0, 1.0)
}

/// Gaussian kernel on the difference of two edge lengths.
pub fn edge_similarity(len_g: f64, len_h: f64, sigma: f64) -> f64 {
    let d = len_g - len_h;
    (-(d * d) / (2.0 * sigma * sigma)).exp()
}

/// ESF descriptor for every vertex of `graph`; `None` for synthetic vertices.
/// Vertex `i` samples with seed `params.seed + i`, so results do not depend on
/// evaluation order.
pub fn describe_vertices(
    graph: &ClusterGraph,
    cloud: &PointCloud,
    params: &EsfParams,
) -> Result<Vec<Option<EsfDescriptor>>, FeatureError> {
    graph
        .vertices
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            if v.synthetic {
                return Ok(None);
            }
            let pts: Vec<Point3> = v.members.iter().map(|&m| cloud.points()[m]).collect();
            let params = EsfParams { seed: params.seed.wrapping_add(i as u64), ..*params };
            compute_esf_with(&pts, &params).map(Some)
        })
        .collect()
}

/// One stored quadratic term `x[g1][h1] · value · x[g2][h2]`. The transposed
/// term is implied, so each entry contributes twice to `XᵀDX`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgePairTerm {
    pub g1: usize,
    pub h1: usize,
    pub g2: usize,
    pub h2: usize,
    pub value: f64,
}

/// The matrix D in factored form: the diagonal as a dense n×m matrix of vertex
/// similarities, and the off-diagonal edge-pair entries as a sparse list.
/// Every other entry is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub vertex_sim: DMatrix<f64>,
    pub edge_sim: Vec<EdgePairTerm>,
}

impl SimilarityMatrix {
    pub fn new(vertex_sim: DMatrix<f64>, edge_sim: Vec<EdgePairTerm>) -> Self {
        Self { vertex_sim, edge_sim }
    }

    pub fn n(&self) -> usize {
        self.vertex_sim.nrows()
    }

    pub fn m(&self) -> usize {
        self.vertex_sim.ncols()
    }

    /// Entry `d^{g1,h1}_{g2,h2}` of the full symmetric matrix.
    pub fn entry(&self, g1: usize, h1: usize, g2: usize, h2: usize) -> f64 {
        if (g1, h1) == (g2, h2) {
            return self.vertex_sim[(g1, h1)];
        }
        self.edge_sim
            .iter()
            .filter(|t| (t.g1, t.h1, t.g2, t.h2) == (g1, h1, g2, h2) || (t.g2, t.h2, t.g1, t.h1) == (g1, h1, g2, h2))
            .map(|t| t.value)
            .sum()
    }
}

pub struct DescribedGraph<'a> {
    pub graph: &'a ClusterGraph,
    pub descriptors: &'a [Option<EsfDescriptor>],
}

fn check_descriptors(g: &DescribedGraph<'_>) -> Result<(), FeatureError> {
    if g.descriptors.len() != g.graph.vertices.len() {
        return Err(FeatureError::CountMismatch { descriptors: g.descriptors.len(), vertices: g.graph.vertices.len() });
    }
    for (i, (v, d)) in g.graph.vertices.iter().zip(g.descriptors).enumerate() {
        if !v.synthetic && d.is_none() {
            return Err(FeatureError::MissingDescriptor(i));
        }
    }
    Ok(())
}

/// Assembles D for graphs G and H. For each edge (a, b) of G and (c, d) of H
/// two terms are stored, one per way of aligning the endpoints:
/// `x[a][c]·s·x[b][d]` and `x[a][d]·s·x[b][c]`.
pub fn build_similarity(
    g: &DescribedGraph<'_>,
    h: &DescribedGraph<'_>,
    sigma_edge: f64,
    vertex_weight: f64,
) -> Result<SimilarityMatrix, FeatureError> {
    check_descriptors(g)?;
    check_descriptors(h)?;
    let n = g.graph.vertices.len();
    let m = h.graph.vertices.len();
    let vertex_sim = DMatrix::from_fn(n, m, |i, j| match (&g.descriptors[i], &h.descriptors[j]) {
        (Some(a), Some(b)) if !g.graph.vertices[i].synthetic && !h.graph.vertices[j].synthetic => {
            vertex_weight * vertex_similarity(a, b)
        }
        _ => 0.0,
    });
    let mut edge_sim = Vec::with_capacity(2 * g.graph.edges.len() * h.graph.edges.len());
    for eg in &g.graph.edges {
        for eh in &h.graph.edges {
            let value = edge_similarity(eg.length, eh.length, sigma_edge);
            edge_sim.push(EdgePairTerm { g1: eg.a, h1: eh.a, g2: eg.b, h2: eh.b, value });
            edge_sim.push(EdgePairTerm { g1: eg.a, h1: eh.b, g2: eg.b, h2: eh.a, value });
        }
    }
    Ok(SimilarityMatrix { vertex_sim, edge_sim })
}
