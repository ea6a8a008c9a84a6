use std::fmt;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use super::{
    baseline_prealignment, icp_from, mean_registration_error, prepare_graphs, register_prepared, PipelineConfig,
    PipelineError,
};
use crate::cloudgen::{gen_valve_shell, perturb, CropPlane, PerturbationSpec};
use crate::geometry::{apply_transform, rotation_xy};
use crate::io::IoError;
use crate::{PointCloud, RigidTransform};

pub const CSV_HEADER: [&str; 10] = [
    "scenario",
    "method",
    "mean_error_um",
    "runtime_s",
    "n_vertices_src",
    "n_vertices_dst",
    "n_matched",
    "n_inliers",
    "objective",
    "integrality",
];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkScenario {
    pub name: String,
    pub ground_truth: RigidTransform,
    /// Keep only `keep_fraction` of the destination points.
    pub resample: bool,
    /// Drop the half of the destination beyond its median plane.
    pub crop: bool,
}

impl BenchmarkScenario {
    pub fn new(base: &str, ground_truth: RigidTransform, resample: bool, crop: bool) -> Self {
        let mut name = base.to_string();
        if resample {
            name.push_str("+S");
        }
        if crop {
            name.push_str("+C");
        }
        Self { name, ground_truth, resample, crop }
    }
}

/// {identity, quarter turn in xy} × {plain, S, C, S+C}.
pub fn benchmark_grid() -> Vec<BenchmarkScenario> {
    let mut out = Vec::new();
    for (base, t) in [("identity", RigidTransform::identity()), ("rot90", rotation_xy(std::f64::consts::FRAC_PI_2))] {
        for (s, c) in [(false, false), (true, false), (false, true), (true, true)] {
            out.push(BenchmarkScenario::new(base, t, s, c));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Graph,
    Icp,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Graph => "graph",
            Method::Icp => "icp",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "graph" => Ok(Method::Graph),
            "icp" => Ok(Method::Icp),
            other => Err(format!("unknown method {other:?}")),
        }
    }
}

/// One CSV row. `mean_error` is NaN for a failed registration; the graph
/// diagnostics are `None` for the baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkResult {
    pub scenario: String,
    pub method: Method,
    pub mean_error: f64,
    pub runtime_s: Option<f64>,
    pub n_vertices_src: Option<usize>,
    pub n_vertices_dst: Option<usize>,
    pub n_matched: Option<usize>,
    pub n_inliers: Option<usize>,
    pub objective: Option<f64>,
    pub integrality: Option<f64>,
}

impl BenchmarkResult {
    fn failed(scenario: &str, method: Method, runtime_s: Option<f64>) -> Self {
        Self {
            scenario: scenario.to_string(),
            method,
            mean_error: f64::NAN,
            runtime_s,
            n_vertices_src: None,
            n_vertices_dst: None,
            n_matched: None,
            n_inliers: None,
            objective: None,
            integrality: None,
        }
    }

    pub fn is_failure(&self) -> bool {
        self.mean_error.is_nan()
    }

    fn record(&self) -> Vec<String> {
        fn opt<T: ToString>(v: &Option<T>) -> String {
            v.as_ref().map_or_else(|| "NA".to_string(), T::to_string)
        }
        vec![
            self.scenario.clone(),
            self.method.to_string(),
            if self.is_failure() { "NaN".to_string() } else { self.mean_error.to_string() },
            opt(&self.runtime_s),
            opt(&self.n_vertices_src),
            opt(&self.n_vertices_dst),
            opt(&self.n_matched),
            opt(&self.n_inliers),
            opt(&self.objective),
            opt(&self.integrality),
        ]
    }
}

fn destination(src: &PointCloud, s: &BenchmarkScenario, cfg: &PipelineConfig) -> Result<PointCloud, PipelineError> {
    let moved = apply_transform(src, &s.ground_truth);
    let spec = PerturbationSpec {
        keep_fraction: if s.resample { cfg.bench.keep_fraction } else { 1.0 },
        crop: s.crop.then_some(CropPlane::Median),
        noise_sigma: cfg.bench.noise_sigma,
        seed: cfg.bench.perturb_seed,
    };
    perturb(&moved, &spec).map_err(|e| PipelineError::Stage { stage: super::Stage::Generation, message: e.to_string() })
}

fn run_scenario(src: &PointCloud, s: &BenchmarkScenario, cfg: &PipelineConfig) -> [BenchmarkResult; 2] {
    let runtime = |t: Instant| cfg.bench.report_runtime.then(|| t.elapsed().as_secs_f64());
    let dst = match destination(src, s, cfg) {
        Ok(d) => d,
        Err(e) => {
            log::warn!("{}: {e}", s.name);
            return [
                BenchmarkResult::failed(&s.name, Method::Graph, None),
                BenchmarkResult::failed(&s.name, Method::Icp, None),
            ];
        }
    };

    let start = Instant::now();
    let prepared = prepare_graphs(src, &dst, cfg);
    let prep_time = start.elapsed();
    let registered = match &prepared {
        Ok(p) => register_prepared(p, cfg),
        Err(e) => Err(PipelineError::RegistrationFailed(e.to_string())),
    };
    let graph = match registered {
        Ok((t, report)) => {
            let err = mean_registration_error(src, &t, &s.ground_truth).unwrap_or(f64::NAN);
            BenchmarkResult {
                scenario: s.name.clone(),
                method: Method::Graph,
                mean_error: err,
                runtime_s: runtime(start),
                n_vertices_src: Some(report.n_vertices_src),
                n_vertices_dst: Some(report.n_vertices_dst),
                n_matched: Some(report.n_matched),
                n_inliers: Some(report.n_inliers),
                objective: Some(report.objective),
                integrality: Some(report.integrality),
            }
        }
        Err(e) => {
            log::warn!("{} graph: {e}", s.name);
            BenchmarkResult::failed(&s.name, Method::Graph, runtime(start))
        }
    };
    log::info!("{} graph: error {} in {:.2}s", s.name, graph.mean_error, start.elapsed().as_secs_f64());

    // The baseline is charged for the shared graph construction when it uses it.
    let start = Instant::now();
    let init = match (&prepared, cfg.icp_prealign) {
        (Ok(p), true) => baseline_prealignment(p),
        _ => RigidTransform::identity(),
    };
    let runtime_icp = |t: Instant| {
        cfg.bench
            .report_runtime
            .then(|| (t.elapsed() + if cfg.icp_prealign { prep_time } else { Default::default() }).as_secs_f64())
    };
    let icp = match icp_from(src, &dst, &init, cfg) {
        Ok(r) => BenchmarkResult {
            mean_error: mean_registration_error(src, &r.transform, &s.ground_truth).unwrap_or(f64::NAN),
            runtime_s: runtime_icp(start),
            ..BenchmarkResult::failed(&s.name, Method::Icp, None)
        },
        Err(e) => {
            log::warn!("{} icp: {e}", s.name);
            BenchmarkResult::failed(&s.name, Method::Icp, runtime_icp(start))
        }
    };
    log::info!("{} icp: error {} in {:.2}s", s.name, icp.mean_error, start.elapsed().as_secs_f64());
    [graph, icp]
}

/// Runs both methods on every scenario against the configured valve shell.
/// Rows come back (and are written) in scenario order, graph before icp.
/// Failed registrations become NaN rows; only IO errors abort.
pub fn run_benchmark(
    cfg: &PipelineConfig,
    scenarios: &[BenchmarkScenario],
    out_path: Option<&Path>,
) -> Result<Vec<BenchmarkResult>, PipelineError> {
    if scenarios.is_empty() {
        return Err(PipelineError::NoScenarios);
    }
    cfg.validate()?;
    let src = gen_valve_shell(&cfg.source).map_err(|e| PipelineError::Config(e.to_string()))?;
    let rows: Vec<BenchmarkResult> =
        scenarios.par_iter().map(|s| run_scenario(&src, s, cfg)).collect::<Vec<_>>().into_iter().flatten().collect();
    if let Some(path) = out_path {
        write_results_csv(path, &rows)?;
    }
    Ok(rows)
}

pub fn write_results_csv(path: &Path, rows: &[BenchmarkResult]) -> Result<(), PipelineError> {
    let io = |e: csv::Error| IoError::Io { path: path.to_path_buf(), source: e.into() };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in rows {
        w.write_record(r.record()).map_err(io)?;
    }
    w.flush().map_err(|source| IoError::Io { path: path.to_path_buf(), source })?;
    Ok(())
}

/// Parses a results file written by [`write_results_csv`].
pub fn read_results_csv(path: &Path) -> Result<Vec<BenchmarkResult>, PipelineError> {
    let malformed = |line: usize, message: String| IoError::Malformed { path: path.to_path_buf(), line, message };
    let mut r = csv::Reader::from_path(path).map_err(|e| IoError::Io { path: path.to_path_buf(), source: e.into() })?;
    let header = r.headers().map_err(|e| malformed(1, e.to_string()))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(malformed(1, "unexpected header".into()).into());
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| malformed(line, e.to_string()))?;
        fn opt<T: std::str::FromStr>(s: &str) -> Result<Option<T>, String> {
            if s == "NA" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| format!("bad value {s:?}"))
            }
        }
        let parse = || -> Result<BenchmarkResult, String> {
            Ok(BenchmarkResult {
                scenario: rec[0].to_string(),
                method: rec[1].parse()?,
                mean_error: rec[2].parse().map_err(|_| format!("bad error value {:?}", &rec[2]))?,
                runtime_s: opt(&rec[3])?,
                n_vertices_src: opt(&rec[4])?,
                n_vertices_dst: opt(&rec[5])?,
                n_matched: opt(&rec[6])?,
                n_inliers: opt(&rec[7])?,
                objective: opt(&rec[8])?,
                integrality: opt(&rec[9])?,
            })
        };
        rows.push(parse().map_err(|m| malformed(line, m))?);
    }
    Ok(rows)
}
