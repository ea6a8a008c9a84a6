use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ptgraphreg::cloudgen::{gen_disc, gen_sphere, gen_valve_shell, perturb, CropPlane, GenError, PerturbationSpec};
use ptgraphreg::geometry::{apply_transform, rotation_xy};
use ptgraphreg::graph::{build_adjacency, connect_components, supervoxel_cluster};
use ptgraphreg::io::{load_cloud_auto, save_cloud_auto, save_transform, IoError};
use ptgraphreg::pipeline::{
    benchmark_grid, register_graph_method, register_icp, render_results, run_benchmark, Method, PipelineConfig,
    PipelineError,
};

#[derive(Parser)]
#[command(name = "ptgraphreg", version, about = "Rigid point-cloud registration by graph matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Shape {
    Valve,
    Sphere,
    Disc,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cloud (.xyz or .ply by extension).
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "valve")]
        shape: Shape,
        /// Valve parameters come from the [source] table of this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Radius for sphere and disc.
        #[arg(long, default_value_t = 50.0)]
        radius: f64,
    },
    /// Apply a rotation in xy, then resample, crop and add noise.
    Perturb {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        rotate_xy_deg: f64,
        #[arg(long, default_value_t = 1.0)]
        keep: f64,
        /// Drop the half beyond the median plane.
        #[arg(long)]
        crop: bool,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cluster a cloud and write its connected adjacency graph.
    Graph {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Estimate the transform mapping --src onto --dst.
    Register {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        dst: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "graph")]
        method: Method,
        /// JSON diagnostics of the graph method.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the scenario grid and write the results CSV.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a results CSV as a grouped bar chart.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Config(String),
    Registration(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Registration(_) => 3,
            Failure::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Registration(m) | Failure::Io(m) => m,
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<GenError> for Failure {
    fn from(e: GenError) -> Self {
        match e {
            GenError::InvalidParams(_) => Failure::Config(e.to_string()),
            _ => Failure::Registration(e.to_string()),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) | PipelineError::NoScenarios => Failure::Config(e.to_string()),
            PipelineError::Io(_) => Failure::Io(e.to_string()),
            _ => Failure::Registration(e.to_string()),
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, Failure> {
    match path {
        Some(p) => Ok(PipelineConfig::load(p)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|source| IoError::Io { path: path.to_path_buf(), source }.into())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen { out, shape, config, points, seed, radius } => {
            let cfg = load_config(config.as_deref())?;
            let cloud = match shape {
                Shape::Valve => {
                    let mut p = cfg.source.clone();
                    p.points_target = points.unwrap_or(p.points_target);
                    p.seed = seed.unwrap_or(p.seed);
                    gen_valve_shell(&p)?
                }
                Shape::Sphere => gen_sphere(radius, points.unwrap_or(5000), seed.unwrap_or(1))?,
                Shape::Disc => gen_disc(radius, points.unwrap_or(5000), seed.unwrap_or(1))?,
            };
            save_cloud_auto(&cloud, &out)?;
            log::info!("wrote {} points to {}", cloud.len(), out.display());
        }
        Command::Perturb { input, out, rotate_xy_deg, keep, crop, noise, seed } => {
            let cloud = apply_transform(&load_cloud_auto(&input)?, &rotation_xy(rotate_xy_deg.to_radians()));
            let spec = PerturbationSpec {
                keep_fraction: keep,
                crop: crop.then_some(CropPlane::Median),
                noise_sigma: noise,
                seed,
            };
            if !(keep > 0.0 && keep <= 1.0) {
                return Err(Failure::Config(format!("--keep must be in (0, 1], got {keep}")));
            }
            save_cloud_auto(&perturb(&cloud, &spec)?, &out)?;
        }
        Command::Graph { input, out, config } => {
            let cfg = load_config(config.as_deref())?;
            let cloud = load_cloud_auto(&input)?;
            let params = cfg.resolve(&cloud, &cloud);
            let clustering =
                supervoxel_cluster(&cloud, &params.cluster).map_err(|e| Failure::Registration(e.to_string()))?;
            let graph = connect_components(&build_adjacency(&clustering, &cloud, params.adjacency_radius));
            write_text(&out, &graph.to_text())?;
            log::info!("{} vertices, {} edges", graph.n_vertices(), graph.edges.len());
        }
        Command::Register { src, dst, config, out, method, report } => {
            let cfg = load_config(config.as_deref())?;
            let src = load_cloud_auto(&src)?;
            let dst = load_cloud_auto(&dst)?;
            let t = match method {
                Method::Graph => {
                    let (t, r) = register_graph_method(&src, &dst, &cfg)?;
                    log::info!(
                        "{} / {} vertices, {} matched, {} inliers, objective {}, integrality {}",
                        r.n_vertices_src,
                        r.n_vertices_dst,
                        r.n_matched,
                        r.n_inliers,
                        r.objective,
                        r.integrality
                    );
                    if let Some(path) = report {
                        write_text(&path, &serde_json::to_string_pretty(&r).expect("report serialises"))?;
                    }
                    t
                }
                Method::Icp => register_icp(&src, &dst, &cfg)?.transform,
            };
            save_transform(&t, &out)?;
        }
        Command::Bench { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let rows = run_benchmark(&cfg, &benchmark_grid(), Some(&out))?;
            let failed = rows.iter().filter(|r| r.is_failure()).count();
            log::info!("{} rows written to {}, {failed} failed", rows.len(), out.display());
        }
        Command::Plot { input, out } => render_results(&input, &out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
