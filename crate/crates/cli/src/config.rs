use std::path::{Path, PathBuf};

use mmv_core::approximator::FitConfig;
use mmv_core::cones::ConeSpec;
use mmv_core::fio::{KMode, SolverOptions};
use mmv_core::market::{LinearFactorModel, MarkovChainModel, RiskFree, State};
use mmv_core::policy::PolicyMode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Where the market model comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    Markov(MarkovChainModel),
    Factor(LinearFactorModel),
    /// A model JSON file as written by `calibrate`.
    File(PathBuf),
    /// Dated CSV files, calibrated on load.
    Calibration(CalibrationInput),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationInput {
    pub returns: PathBuf,
    pub factors: PathBuf,
    #[serde(default)]
    pub demean_factors: bool,
    pub risk_free: RiskFree,
}

/// State grid for factor models.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GridSpec {
    /// Every row of a dated factor CSV.
    Historical(PathBuf),
    /// States visited by a simulated factor path after a burn-in.
    Random { size: usize },
    Points(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Costs {
    pub alpha0: f64,
    pub alpha1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSpec {
    pub paths: usize,
    /// Replays non-overlapping windows of dated data instead of simulating.
    pub historical: Option<HistoricalSpec>,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            paths: 10_000,
            historical: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoricalSpec {
    pub returns: PathBuf,
    pub factors: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontierSpec {
    /// Explicit expected terminal wealths; overrides `points`/`max_mean`.
    pub means: Option<Vec<f64>>,
    pub points: usize,
    /// Largest expected terminal wealth; defaults to twice the excess target.
    pub max_mean: Option<f64>,
}

impl Default for FrontierSpec {
    fn default() -> Self {
        Self {
            means: None,
            points: 21,
            max_mean: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VssmSpec {
    pub paths: usize,
}

impl Default for VssmSpec {
    fn default() -> Self {
        Self { paths: 10_000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub cardinalities: Vec<usize>,
    pub paths: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoefficientSpec {
    /// Index of the factor that is varied; the others are pinned at the 5th,
    /// 50th and 95th percentile of the grid.
    pub factor: usize,
    pub points: usize,
    pub t: usize,
}

impl Default for CoefficientSpec {
    fn default() -> Self {
        Self {
            factor: 0,
            points: 41,
            t: 0,
        }
    }
}

fn one() -> f64 {
    1.0
}

fn default_samples() -> usize {
    10_000
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSource,
    #[serde(default)]
    pub cone: ConeSpec,
    pub horizon: usize,
    #[serde(default = "one")]
    pub x0: f64,
    /// `{"target": x_tg}` or `{"lambda": λ}`.
    pub mode: PolicyMode,
    /// Scenarios per state node.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to regime 0 or the zero factor vector.
    #[serde(default)]
    pub initial_state: Option<State>,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub k_mode: KMode,
    #[serde(default)]
    pub costs: Option<Costs>,
    #[serde(default)]
    pub simulation: SimulationSpec,
    #[serde(default)]
    pub vssm: VssmSpec,
    #[serde(default)]
    pub frontier: FrontierSpec,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub coefficients: CoefficientSpec,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

/// A parsed configuration with the hash of its file contents.
pub struct LoadedConfig {
    pub config: RunConfig,
    pub sha256: String,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::validation(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(LoadedConfig {
            config,
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.model {
            ModelSource::File(p) => fix(p),
            ModelSource::Calibration(c) => {
                fix(&mut c.returns);
                fix(&mut c.factors);
            }
            _ => {}
        }
        if let Some(GridSpec::Historical(p)) = &mut self.grid {
            fix(p);
        }
        if let Some(h) = &mut self.simulation.historical {
            fix(&mut h.returns);
            fix(&mut h.factors);
        }
        fix(&mut self.output_dir);
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::validation(msg));
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if !(self.x0.is_finite() && self.x0 > 0.0) {
            return bad(format!("x0 must be positive, got {}", self.x0));
        }
        if self.samples == 0 || self.simulation.paths == 0 || self.vssm.paths == 0 {
            return bad("samples and path counts must be positive".into());
        }
        let mut files: Vec<&Path> = Vec::new();
        match &self.model {
            ModelSource::File(p) => files.push(p),
            ModelSource::Calibration(c) => files.extend([c.returns.as_path(), c.factors.as_path()]),
            _ => {}
        }
        if let Some(GridSpec::Historical(p)) = &self.grid {
            files.push(p);
        }
        if let Some(h) = &self.simulation.historical {
            files.extend([h.returns.as_path(), h.factors.as_path()]);
        }
        if let Some(missing) = files.iter().find(|p| !p.is_file()) {
            return bad(format!("referenced file {} does not exist", missing.display()));
        }
        if let Some(GridSpec::Random { size }) = &self.grid {
            if *size < 2 {
                return bad("a random grid needs at least two points".into());
            }
        }
        if let Some(c) = &self.costs {
            if !(c.alpha0 >= 0.0 && c.alpha1 >= 0.0) {
                return bad("cost rates must be nonnegative".into());
            }
        }
        if let Some(s) = &self.sweep {
            if s.cardinalities.is_empty() {
                return bad("the sweep needs at least one cardinality".into());
            }
        }
        Ok(())
    }
}
