//! End-to-end registration, the evaluation metric and the benchmark grid.

mod bench;
mod config;
mod plot;

use std::fmt;

use serde::Serialize;
use thiserror::Error;

pub use bench::{
    benchmark_grid, read_results_csv, run_benchmark, write_results_csv, BenchmarkResult, BenchmarkScenario, Method,
    CSV_HEADER,
};
pub use config::{
    AutoTag, AutoValue, BenchConfig, ClusterConfig, FeatureConfig, MatchConfig, PipelineConfig, RansacConfig,
    ResolvedParams, SEED_PITCH_FACTOR,
};
pub use plot::{render_results, render_svg};

use crate::align::{estimate_rigid_schonemann, icp, ransac_filter, AlignError, CorrespondenceSet, IcpResult};
use crate::features::{
    build_similarity, describe_vertices, vertex_similarity, DescribedGraph, EsfDescriptor, EsfParams,
};
use crate::graph::{build_adjacency, connect_components, supervoxel_cluster, ClusterGraph};
use crate::io::IoError;
use crate::matcher::{extract_permutation, solve_frank_wolfe, SolverReport};
use crate::{PointCloud, RigidTransform};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Generation,
    Clustering,
    Features,
    Matching,
    Ransac,
    Fit,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Generation => "generation",
            Stage::Clustering => "clustering",
            Stage::Features => "features",
            Stage::Matching => "matching",
            Stage::Ransac => "ransac",
            Stage::Fit => "fit",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage} stage: {message}")]
    Stage { stage: Stage, message: String },
    #[error("registration failed: {0}")]
    RegistrationFailed(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("no benchmark scenarios given")]
    NoScenarios,
    #[error("empty source cloud")]
    EmptySource,
}

impl PipelineError {
    fn stage(stage: Stage, e: impl fmt::Display) -> Self {
        PipelineError::Stage { stage, message: e.to_string() }
    }

    pub fn stage_name(&self) -> Option<Stage> {
        match self {
            PipelineError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

/// Diagnostics of one graph-method registration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegistrationReport {
    pub params: ResolvedParams,
    pub n_vertices_src: usize,
    pub n_vertices_dst: usize,
    pub n_synthetic_src: usize,
    pub n_synthetic_dst: usize,
    pub n_matched: usize,
    pub n_inliers: usize,
    pub objective: f64,
    pub integrality: f64,
    pub solver: SolverReport,
}

/// Clusters, connects and describes one cloud.
fn build_graph(
    cloud: &PointCloud,
    params: &ResolvedParams,
    cfg: &PipelineConfig,
) -> Result<(ClusterGraph, Vec<Option<EsfDescriptor>>), PipelineError> {
    let clustering =
        supervoxel_cluster(cloud, &params.cluster).map_err(|e| PipelineError::stage(Stage::Clustering, e))?;
    let graph = connect_components(&build_adjacency(&clustering, cloud, params.adjacency_radius));
    let esf = EsfParams {
        sample_count: cfg.features.esf_sample_count,
        seed: cfg.esf_seed,
        surface_radius: params.surface_radius,
    };
    let descriptors = describe_vertices(&graph, cloud, &esf).map_err(|e| PipelineError::stage(Stage::Features, e))?;
    Ok((graph, descriptors))
}

/// Described graphs of a source/destination pair, shared by both methods.
#[derive(Debug, Clone)]
pub struct GraphPair {
    pub params: ResolvedParams,
    pub g: ClusterGraph,
    pub g_desc: Vec<Option<EsfDescriptor>>,
    pub h: ClusterGraph,
    pub h_desc: Vec<Option<EsfDescriptor>>,
}

/// Steps up to and including the vertex descriptors.
pub fn prepare_graphs(src: &PointCloud, dst: &PointCloud, cfg: &PipelineConfig) -> Result<GraphPair, PipelineError> {
    if src.is_empty() {
        return Err(PipelineError::stage(Stage::Generation, "source cloud is empty"));
    }
    if dst.is_empty() {
        return Err(PipelineError::stage(Stage::Generation, "destination cloud is empty"));
    }
    let params = cfg.resolve(src, dst);
    log::debug!("resolved parameters: {params:?}");
    let (g, g_desc) = build_graph(src, &params, cfg)?;
    let (h, h_desc) = build_graph(dst, &params, cfg)?;
    log::debug!(
        "graphs: {} / {} vertices, {} / {} edges",
        g.n_vertices(),
        h.n_vertices(),
        g.edges.len(),
        h.edges.len()
    );
    Ok(GraphPair { params, g, g_desc, h, h_desc })
}

fn ransac_error(e: AlignError) -> PipelineError {
    match e {
        AlignError::TooFew { .. } | AlignError::NoConsensus { .. } => PipelineError::RegistrationFailed(e.to_string()),
        other => PipelineError::stage(Stage::Ransac, other),
    }
}

/// Registers `src` onto `dst` with the graph-matching pipeline: supervoxel
/// graphs, ESF similarities, Frank-Wolfe matching, RANSAC over the matched
/// centroids and a final least-squares fit on the inliers.
pub fn register_graph_method(
    src: &PointCloud,
    dst: &PointCloud,
    cfg: &PipelineConfig,
) -> Result<(RigidTransform, RegistrationReport), PipelineError> {
    let pair = prepare_graphs(src, dst, cfg)?;
    register_prepared(&pair, cfg)
}

/// The matching half of [`register_graph_method`].
pub fn register_prepared(
    pair: &GraphPair,
    cfg: &PipelineConfig,
) -> Result<(RigidTransform, RegistrationReport), PipelineError> {
    let GraphPair { params, g, g_desc, h, h_desc } = pair;
    let d = build_similarity(
        &DescribedGraph { graph: g, descriptors: g_desc },
        &DescribedGraph { graph: h, descriptors: h_desc },
        params.sigma_edge,
        cfg.features.vertex_weight,
    )
    .map_err(|e| PipelineError::stage(Stage::Features, e))?;
    let outcome = solve_frank_wolfe(&d, &cfg.solver.params()).map_err(|e| PipelineError::stage(Stage::Matching, e))?;
    let matching = extract_permutation(&outcome.x, cfg.solver.accept_threshold);

    let pairs = matching
        .pairs
        .iter()
        .filter(|p| !g.vertices[p.g].synthetic && !h.vertices[p.h].synthetic)
        .map(|p| (g.vertices[p.g].centroid, h.vertices[p.h].centroid));
    let correspondences = CorrespondenceSet::from_pairs(pairs);
    let n_matched = correspondences.len();
    let ransac = ransac_filter(&correspondences, &params.ransac).map_err(ransac_error)?;
    let inliers = ransac.inlier_set(&correspondences);
    let transform = estimate_rigid_schonemann(inliers.src(), inliers.dst()).map_err(|e| match e {
        AlignError::UnstableFit => PipelineError::RegistrationFailed(e.to_string()),
        other => PipelineError::stage(Stage::Fit, other),
    })?;

    let report = RegistrationReport {
        n_vertices_src: g.n_vertices(),
        n_vertices_dst: h.n_vertices(),
        n_synthetic_src: g.n_synthetic(),
        n_synthetic_dst: h.n_synthetic(),
        n_matched,
        n_inliers: inliers.len(),
        objective: outcome.objective,
        integrality: outcome.x.integrality(),
        solver: outcome.report,
        params: params.clone(),
    };
    Ok((transform, report))
}

/// Each real source vertex paired with its most similar real destination
/// vertex by descriptor alone (lowest index on ties).
pub fn descriptor_correspondences(pair: &GraphPair) -> CorrespondenceSet {
    let targets: Vec<(usize, &EsfDescriptor)> =
        pair.h_desc.iter().enumerate().filter_map(|(j, d)| d.as_ref().map(|d| (j, d))).collect();
    let pairs = pair.g_desc.iter().enumerate().filter_map(|(i, d)| {
        let d = d.as_ref()?;
        let mut best: Option<(usize, f64)> = None;
        for &(j, e) in &targets {
            let s = vertex_similarity(d, e);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((j, s));
            }
        }
        best.map(|(j, _)| (pair.g.vertices[i].centroid, pair.h.vertices[j].centroid))
    });
    CorrespondenceSet::from_pairs(pairs)
}

/// RANSAC over descriptor correspondences; identity when no consensus.
pub fn baseline_prealignment(pair: &GraphPair) -> RigidTransform {
    let c = descriptor_correspondences(pair);
    match ransac_filter(&c, &pair.params.ransac) {
        Ok(r) => r.transform,
        Err(e) => {
            log::debug!("baseline prealignment fell back to identity: {e}");
            RigidTransform::identity()
        }
    }
}

/// Baseline: trimmed ICP from `init`.
pub fn icp_from(
    src: &PointCloud,
    dst: &PointCloud,
    init: &RigidTransform,
    cfg: &PipelineConfig,
) -> Result<IcpResult, PipelineError> {
    icp(src, dst, init, &cfg.icp).map_err(|e| match e {
        AlignError::EmptyCloud => PipelineError::stage(Stage::Generation, e),
        other => PipelineError::RegistrationFailed(other.to_string()),
    })
}

/// Baseline: trimmed ICP, prealigned by descriptor RANSAC when
/// `cfg.icp_prealign` is set and from the identity otherwise.
pub fn register_icp(src: &PointCloud, dst: &PointCloud, cfg: &PipelineConfig) -> Result<IcpResult, PipelineError> {
    let init = if cfg.icp_prealign {
        baseline_prealignment(&prepare_graphs(src, dst, cfg)?)
    } else {
        RigidTransform::identity()
    };
    icp_from(src, dst, &init, cfg)
}

/// `(1/n)·Σ ‖t_hat(x) − t_true(x)‖` over the source points (µm).
pub fn mean_registration_error(
    src: &PointCloud,
    t_hat: &RigidTransform,
    t_true: &RigidTransform,
) -> Result<f64, PipelineError> {
    if src.is_empty() {
        return Err(PipelineError::EmptySource);
    }
    let total: f64 = src.iter().map(|p| (t_hat.apply(p) - t_true.apply(p)).norm()).sum();
    Ok(total / src.len() as f64)
}
