//! TOML run configuration. Scale-dependent settings accept `"auto"` and are
//! resolved from the sampling pitch of the clouds being registered.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::{IcpParams, RansacParams};
use crate::cloudgen::ValveShellParams;
use crate::features::ESF_DEFAULT_SAMPLES;
use crate::graph::ClusterParams;
use crate::io::IoError;
use crate::matcher::SolverParams;
use crate::spatial::median_nn_distance;
use crate::PointCloud;

use super::PipelineError;

/// Seed resolution as a multiple of the sampling pitch when set to auto.
pub const SEED_PITCH_FACTOR: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

/// A length that is either given explicitly (µm) or derived at run time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AutoValue {
    Value(f64),
    Auto(AutoTag),
}

impl AutoValue {
    pub const AUTO: AutoValue = AutoValue::Auto(AutoTag::Auto);

    pub fn resolve(self, auto: f64) -> f64 {
        match self {
            AutoValue::Value(v) => v,
            AutoValue::Auto(_) => auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// Default: the sampling pitch (median nearest-neighbour distance).
    pub voxel_resolution: AutoValue,
    /// Default: 8 × the sampling pitch.
    pub seed_resolution: AutoValue,
    pub max_iters: usize,
    pub normal_weight: f64,
    pub min_cluster_size: usize,
    /// Default: 2 × voxel_resolution.
    pub adjacency_radius: AutoValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub esf_sample_count: usize,
    pub vertex_weight: f64,
    /// Default: a quarter of the seed resolution.
    pub sigma_edge: AutoValue,
    /// Occupancy dilation of the ESF grid. Default: the sampling pitch.
    pub surface_radius: AutoValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub max_iters: usize,
    pub fw_gap_tol: f64,
    pub restarts: usize,
    pub seed: u64,
    /// Matched pairs with a relaxed value below this are dropped.
    pub accept_threshold: f64,
}

impl MatchConfig {
    pub fn params(&self) -> SolverParams {
        SolverParams {
            max_iters: self.max_iters,
            fw_gap_tol: self.fw_gap_tol,
            restarts: self.restarts,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Default: 2 × seed_resolution.
    pub inlier_radius: AutoValue,
    pub min_inliers: usize,
    pub seed: u64,
    /// 1.0 disables the early exit.
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Fraction of destination points kept in resampled scenarios.
    pub keep_fraction: f64,
    /// Gaussian noise added to every destination (0 disables).
    pub noise_sigma: f64,
    pub perturb_seed: u64,
    /// Write wall-clock seconds into the CSV. Off by default so repeated
    /// runs produce identical files.
    pub report_runtime: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed for per-vertex ESF sampling.
    pub esf_seed: u64,
    /// Start the ICP baseline from a RANSAC fit on descriptor matches.
    pub icp_prealign: bool,
    pub cluster: ClusterConfig,
    pub features: FeatureConfig,
    pub solver: MatchConfig,
    pub ransac: RansacConfig,
    pub icp: IcpParams,
    pub source: ValveShellParams,
    pub bench: BenchConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            esf_seed: 0,
            icp_prealign: true,
            cluster: ClusterConfig {
                voxel_resolution: AutoValue::AUTO,
                seed_resolution: AutoValue::AUTO,
                max_iters: 10,
                normal_weight: 0.0,
                min_cluster_size: 4,
                adjacency_radius: AutoValue::AUTO,
            },
            features: FeatureConfig {
                esf_sample_count: ESF_DEFAULT_SAMPLES,
                vertex_weight: 1.0,
                sigma_edge: AutoValue::AUTO,
                surface_radius: AutoValue::AUTO,
            },
            solver: {
                let p = SolverParams::default();
                MatchConfig {
                    max_iters: p.max_iters,
                    fw_gap_tol: p.fw_gap_tol,
                    restarts: p.restarts,
                    seed: p.seed,
                    accept_threshold: 0.5,
                }
            },
            ransac: RansacConfig {
                iterations: 2000,
                inlier_radius: AutoValue::AUTO,
                min_inliers: 3,
                seed: 0,
                confidence: Some(0.999),
            },
            icp: IcpParams::default(),
            source: ValveShellParams::default(),
            bench: BenchConfig { keep_fraction: 1.0 / 3.0, noise_sigma: 0.0, perturb_seed: 7, report_runtime: false },
        }
    }
}

macro_rules! section_default {
    ($($ty:ty => $field:ident),* $(,)?) => {
        $(impl Default for $ty {
            fn default() -> Self {
                PipelineConfig::default().$field
            }
        })*
    };
}

section_default!(
    ClusterConfig => cluster,
    FeatureConfig => features,
    MatchConfig => solver,
    RansacConfig => ransac,
    BenchConfig => bench,
);

/// Concrete lengths for one registration run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedParams {
    pub pitch: f64,
    pub cluster: ClusterParams,
    pub adjacency_radius: f64,
    pub sigma_edge: f64,
    pub surface_radius: f64,
    pub ransac: RansacParams,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| IoError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        for (name, v) in [
            ("cluster.voxel_resolution", self.cluster.voxel_resolution),
            ("cluster.seed_resolution", self.cluster.seed_resolution),
            ("cluster.adjacency_radius", self.cluster.adjacency_radius),
            ("features.sigma_edge", self.features.sigma_edge),
            ("features.surface_radius", self.features.surface_radius),
            ("ransac.inlier_radius", self.ransac.inlier_radius),
        ] {
            if let AutoValue::Value(x) = v {
                if !(x > 0.0 && x.is_finite()) {
                    return Err(PipelineError::Config(format!("{name} must be positive or \"auto\"")));
                }
            }
        }
        if self.features.esf_sample_count < crate::features::ESF_MIN_SAMPLES {
            return bad("features.esf_sample_count must be at least 1000");
        }
        if !(self.features.vertex_weight >= 0.0 && self.features.vertex_weight.is_finite()) {
            return bad("features.vertex_weight must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.solver.accept_threshold) {
            return bad("solver.accept_threshold must be in [0, 1]");
        }
        if !(self.bench.keep_fraction > 0.0 && self.bench.keep_fraction <= 1.0) {
            return bad("bench.keep_fraction must be in (0, 1]");
        }
        if !(self.bench.noise_sigma >= 0.0 && self.bench.noise_sigma.is_finite()) {
            return bad("bench.noise_sigma must be non-negative");
        }
        self.solver.params().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.icp.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.source.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        let probe = self.resolve_with_pitch(1.0);
        probe.cluster.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        probe.ransac.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    /// Resolves auto values from the coarser sampling pitch of the two clouds
    /// so both graphs are built at the same scale.
    pub fn resolve(&self, src: &PointCloud, dst: &PointCloud) -> ResolvedParams {
        let pitch = median_nn_distance(src.points()).max(median_nn_distance(dst.points()));
        self.resolve_with_pitch(pitch)
    }

    pub fn resolve_with_pitch(&self, pitch: f64) -> ResolvedParams {
        // A cloud of coincident points has zero pitch; any positive scale works.
        let pitch = if pitch > 0.0 { pitch } else { 1.0 };
        let c = &self.cluster;
        let voxel = c.voxel_resolution.resolve(pitch);
        let seed = c.seed_resolution.resolve(SEED_PITCH_FACTOR * pitch);
        let cluster = ClusterParams {
            voxel_resolution: voxel,
            seed_resolution: seed,
            max_iters: c.max_iters,
            normal_weight: c.normal_weight,
            min_cluster_size: c.min_cluster_size,
        };
        let r = &self.ransac;
        ResolvedParams {
            pitch,
            adjacency_radius: c.adjacency_radius.resolve(2.0 * voxel),
            sigma_edge: self.features.sigma_edge.resolve(0.25 * seed),
            surface_radius: self.features.surface_radius.resolve(pitch),
            ransac: RansacParams {
                iterations: r.iterations,
                inlier_radius: r.inlier_radius.resolve(2.0 * seed),
                min_inliers: r.min_inliers,
                seed: r.seed,
                confidence: r.confidence.filter(|&c| c != 1.0),
            },
            cluster,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml();
        assert!(text.contains("seed_resolution = \"auto\""));
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn shipped_default_config_matches_defaults() {
        let text = include_str!("../../config/default.toml");
        assert_eq!(PipelineConfig::from_toml(text).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn explicit_values_and_errors() {
        let mut cfg = PipelineConfig::default();
        cfg.cluster.seed_resolution = AutoValue::Value(12.0);
        let text = cfg.to_toml();
        assert!(text.contains("seed_resolution = 12.0"));
        let back = PipelineConfig::from_toml(&text).unwrap();
        assert_eq!(back.resolve_with_pitch(1.0).cluster.seed_resolution, 12.0);
        assert_eq!(back.resolve_with_pitch(1.0).ransac.inlier_radius, 24.0);

        let bad = text.replace("seed_resolution = 12.0", "seed_resolution = \"big\"");
        assert!(matches!(PipelineConfig::from_toml(&bad), Err(PipelineError::Config(_))));
        let bad = text.replace("seed_resolution = 12.0", "seed_resolution = -1.0");
        assert!(matches!(PipelineConfig::from_toml(&bad), Err(PipelineError::Config(_))));
        assert!(PipelineConfig::from_toml("esf_seed = 1\nbogus = 2\n").is_err());
    }

    #[test]
    fn auto_resolution_follows_pitch() {
        let r = PipelineConfig::default().resolve_with_pitch(1.5);
        assert_eq!(r.cluster.voxel_resolution, 1.5);
        assert_eq!(r.cluster.seed_resolution, 12.0);
        assert_eq!(r.adjacency_radius, 3.0);
        assert_eq!(r.sigma_edge, 3.0);
        assert_eq!(r.ransac.inlier_radius, 24.0);
        assert_eq!(r.surface_radius, 1.5);
    }

    #[test]
    fn missing_keys_take_defaults() {
        let cfg = PipelineConfig::from_toml("[solver]\nrestarts = 3\n\n[source]\npoints_target = 800\n").unwrap();
        let mut expected = PipelineConfig::default();
        expected.solver.restarts = 3;
        expected.source.points_target = 800;
        assert_eq!(cfg, expected);
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
        assert!(PipelineConfig::from_toml("[solver]\nrestart = 3\n").is_err());
    }

    #[test]
    fn unit_confidence_disables_early_exit() {
        let cfg = PipelineConfig::from_toml("[ransac]\nconfidence = 1.0\n").unwrap();
        assert_eq!(cfg.resolve_with_pitch(1.0).ransac.confidence, None);
        assert!(PipelineConfig::from_toml("[ransac]\nconfidence = 1.5\n").is_err());
    }
}
