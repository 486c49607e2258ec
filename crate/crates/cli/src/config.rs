//! Run configuration: one strict TOML document drives every subcommand.
//! Unknown keys are rejected so a typo fails before any compute starts.

use qvcbi_core::bounds::LatentWeighting;
use qvcbi_core::graph::{HazardKind, NetworkSpec};
use qvcbi_core::inference::{FitConfig, Preconditioner, XiMode};
use qvcbi_core::priors::{FragilityCurve, PagerStubConfig, PriorMode};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("referenced file does not exist: {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkSection,
    pub priors: PriorsSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub pruning: PruningSection,
    pub fit: FitSection,
    pub output: OutputSection,
    #[serde(default)]
    pub synth: Option<SynthSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub bd_states: usize,
    #[serde(default = "one")]
    pub ls_states: usize,
    #[serde(default = "one")]
    pub lf_states: usize,
    #[serde(default = "yes")]
    pub xor_enabled: bool,
    #[serde(default = "default_sigma_xor")]
    pub sigma_xor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorsSection {
    /// `hazus`, `pager`, or `combined`.
    pub mode: String,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub curve_file: Option<PathBuf>,
    #[serde(default)]
    pub ls_grid: Option<PathBuf>,
    #[serde(default)]
    pub lf_grid: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub dpm: Option<PathBuf>,
    #[serde(default)]
    pub pga: Option<PathBuf>,
    /// ShakeMap-style XML alternative to `pga`.
    #[serde(default)]
    pub shakemap: Option<PathBuf>,
    #[serde(default)]
    pub footprint: Option<PathBuf>,
    #[serde(default)]
    pub ground_truth_bd: Option<PathBuf>,
    #[serde(default)]
    pub ground_truth_ls: Option<PathBuf>,
    #[serde(default)]
    pub ground_truth_lf: Option<PathBuf>,
    #[serde(default = "default_y_floor")]
    pub y_floor: f64,
    #[serde(default)]
    pub allow_nearest_resample: bool,
}

impl Default for DataSection {
    fn default() -> DataSection {
        DataSection {
            dpm: None,
            pga: None,
            shakemap: None,
            footprint: None,
            ground_truth_bd: None,
            ground_truth_ls: None,
            ground_truth_lf: None,
            y_floor: default_y_floor(),
            allow_nearest_resample: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningSection {
    /// `none`, `strict`, or `compensated`.
    #[serde(default = "default_prune_mode")]
    pub mode: String,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

impl Default for PruningSection {
    fn default() -> PruningSection {
        PruningSection { mode: default_prune_mode(), tau: default_tau() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub max_epochs: usize,
    #[serde(default = "two")]
    pub e_step_sweeps: usize,
    #[serde(default = "default_l1")]
    pub lambda1: f64,
    #[serde(default = "default_l1")]
    pub lambda2: f64,
    #[serde(default = "default_lambda_leak")]
    pub lambda_leak: f64,
    #[serde(default = "yes")]
    pub nonnegative_influence: bool,
    pub seed: u64,
    #[serde(default = "default_tol")]
    pub convergence_tol: f64,
    #[serde(default = "five")]
    pub convergence_patience: usize,
    /// `fixedpoint` or `gradient`.
    #[serde(default = "default_xi_mode")]
    pub xi_mode: String,
    #[serde(default)]
    pub full_batch: bool,
    #[serde(default)]
    pub e_step_only: bool,
    /// `identity` or `adaptive`.
    #[serde(default = "default_precond")]
    pub preconditioner: String,
    #[serde(default = "ten")]
    pub checkpoint_every: usize,
    #[serde(default = "default_audit")]
    pub audit_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    #[serde(default = "yes")]
    pub write_roc: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub preset: String,
    #[serde(default)]
    pub rows: Option<usize>,
    #[serde(default)]
    pub cols: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn five() -> usize {
    5
}
fn ten() -> usize {
    10
}
fn yes() -> bool {
    true
}
fn default_sigma_xor() -> f64 {
    0.1
}
fn default_gamma() -> f64 {
    0.5
}
fn default_y_floor() -> f64 {
    1e-4
}
fn default_prune_mode() -> String {
    "none".into()
}
fn default_tau() -> f64 {
    0.2
}
fn default_lr() -> f64 {
    0.05
}
fn default_batch() -> usize {
    256
}
fn default_l1() -> f64 {
    0.001
}
fn default_lambda_leak() -> f64 {
    2.0
}
fn default_tol() -> f64 {
    1e-5
}
fn default_xi_mode() -> String {
    "fixedpoint".into()
}
fn default_precond() -> String {
    "adaptive".into()
}
fn default_audit() -> usize {
    1024
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.to_path_buf(), source: e })?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| ConfigError::Parse { path: path.to_path_buf(), msg: e.to_string() })?;
        cfg.validate_values()?;
        Ok(cfg)
    }

    /// Canonical serialized form (the manifest echo).
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate_values(&self) -> Result<(), ConfigError> {
        if self.network.bd_states < 1 || self.network.ls_states < 1 || self.network.lf_states < 1 {
            return Err(ConfigError::Invalid("cardinalities must be at least 1".into()));
        }
        self.prior_mode()?;
        self.prune_mode()?;
        self.xi_mode()?;
        self.preconditioner_mode()?;
        if !(self.fit.learning_rate > 0.0) {
            return Err(ConfigError::Invalid("fit.learning_rate must be positive".into()));
        }
        if self.fit.batch_size < 1 {
            return Err(ConfigError::Invalid("fit.batch_size must be at least 1".into()));
        }
        if !(self.data.y_floor > 0.0) {
            return Err(ConfigError::Invalid("data.y_floor must be positive".into()));
        }
        Ok(())
    }

    /// Existence checks for every referenced input file, run before any
    /// compute by the commands that read data.
    pub fn validate_files(&self, need_scene: bool) -> Result<(), ConfigError> {
        let check = |p: &Option<PathBuf>| -> Result<(), ConfigError> {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(ConfigError::MissingFile(p.clone()));
                }
            }
            Ok(())
        };
        if need_scene {
            if self.data.dpm.is_none() {
                return Err(ConfigError::Invalid("data.dpm is required".into()));
            }
            if self.data.footprint.is_none() {
                return Err(ConfigError::Invalid("data.footprint is required".into()));
            }
            if self.data.pga.is_none() && self.data.shakemap.is_none() {
                return Err(ConfigError::Invalid("data.pga or data.shakemap is required".into()));
            }
            if self.priors.ls_grid.is_none() || self.priors.lf_grid.is_none() {
                return Err(ConfigError::Invalid(
                    "priors.ls_grid and priors.lf_grid are required".into(),
                ));
            }
            let needs_curve =
                matches!(self.prior_mode()?, PriorMode::Hazus | PriorMode::Combined(_));
            if needs_curve && self.priors.curve_file.is_none() {
                return Err(ConfigError::Invalid(
                    "priors.curve_file is required for hazus or combined priors".into(),
                ));
            }
        }
        check(&self.data.dpm)?;
        check(&self.data.pga)?;
        check(&self.data.shakemap)?;
        check(&self.data.footprint)?;
        check(&self.data.ground_truth_bd)?;
        check(&self.data.ground_truth_ls)?;
        check(&self.data.ground_truth_lf)?;
        check(&self.priors.ls_grid)?;
        check(&self.priors.lf_grid)?;
        check(&self.priors.curve_file)?;
        Ok(())
    }

    pub fn network_spec(&self) -> NetworkSpec {
        let mut spec = NetworkSpec::standard(self.network.bd_states);
        spec.cardinality =
            vec![self.network.ls_states, self.network.lf_states, self.network.bd_states];
        if !self.network.xor_enabled {
            spec.xor_parents.clear();
        }
        spec
    }

    pub fn prior_mode(&self) -> Result<PriorMode, ConfigError> {
        match self.priors.mode.as_str() {
            "hazus" => Ok(PriorMode::Hazus),
            "pager" => Ok(PriorMode::Pager),
            "combined" => {
                if !(0.0..=1.0).contains(&self.priors.gamma) {
                    return Err(ConfigError::Invalid("priors.gamma must lie in [0,1]".into()));
                }
                Ok(PriorMode::Combined(self.priors.gamma))
            }
            other => Err(ConfigError::Invalid(format!(
                "priors.mode must be hazus, pager, or combined, got '{other}'"
            ))),
        }
    }

    pub fn prune_mode(&self) -> Result<qvcbi_core::scene::PruneMode, ConfigError> {
        use qvcbi_core::scene::PruneMode;
        match self.pruning.mode.as_str() {
            "none" => Ok(PruneMode::None),
            "strict" => Ok(PruneMode::Strict),
            "compensated" => Ok(PruneMode::Compensated(self.pruning.tau)),
            other => Err(ConfigError::Invalid(format!(
                "pruning.mode must be none, strict, or compensated, got '{other}'"
            ))),
        }
    }

    fn xi_mode(&self) -> Result<XiMode, ConfigError> {
        match self.fit.xi_mode.as_str() {
            "fixedpoint" => Ok(XiMode::FixedPoint),
            "gradient" => Ok(XiMode::Gradient),
            other => Err(ConfigError::Invalid(format!(
                "fit.xi_mode must be fixedpoint or gradient, got '{other}'"
            ))),
        }
    }

    fn preconditioner_mode(&self) -> Result<Preconditioner, ConfigError> {
        match self.fit.preconditioner.as_str() {
            "identity" => Ok(Preconditioner::Identity),
            "adaptive" => Ok(Preconditioner::Adaptive),
            other => Err(ConfigError::Invalid(format!(
                "fit.preconditioner must be identity or adaptive, got '{other}'"
            ))),
        }
    }

    pub fn fit_config(
        &self,
        seed_override: Option<u64>,
        workers: usize,
    ) -> Result<FitConfig, ConfigError> {
        Ok(FitConfig {
            learning_rate: self.fit.learning_rate,
            batch_size: self.fit.batch_size,
            max_epochs: self.fit.max_epochs,
            e_step_sweeps: self.fit.e_step_sweeps,
            lambda1: self.fit.lambda1,
            lambda2: self.fit.lambda2,
            lambda_leak: self.fit.lambda_leak,
            nonnegative_influence: self.fit.nonnegative_influence,
            sigma_xor: self.network.sigma_xor,
            seed: seed_override.unwrap_or(self.fit.seed),
            convergence_tol: self.fit.convergence_tol,
            convergence_patience: self.fit.convergence_patience,
            xi_mode: self.xi_mode()?,
            full_batch: self.fit.full_batch,
            e_step_only: self.fit.e_step_only,
            preconditioner: self.preconditioner_mode()?,
            weighting: LatentWeighting::Probability,
            workers,
            audit_size: self.fit.audit_size,
        })
    }

    pub fn pager_stub(&self) -> PagerStubConfig {
        PagerStubConfig::weak_default(self.network.bd_states)
    }

    pub fn truth_path(&self, kind: HazardKind) -> Option<&PathBuf> {
        match kind {
            HazardKind::BuildingDamage => self.data.ground_truth_bd.as_ref(),
            HazardKind::Landslide => self.data.ground_truth_ls.as_ref(),
            HazardKind::Liquefaction => self.data.ground_truth_lf.as_ref(),
        }
    }
}

/// Fragility curve file: `medians = [...]`, `betas = [...]`, in g.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveFile {
    pub medians: Vec<f64>,
    pub betas: Vec<f64>,
}

pub fn load_curve(path: impl AsRef<Path>) -> Result<FragilityCurve, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.to_path_buf(), source: e })?;
    let file: CurveFile = toml::from_str(&text)
        .map_err(|e| ConfigError::Parse { path: path.to_path_buf(), msg: e.to_string() })?;
    FragilityCurve::new(file.medians, file.betas)
        .map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))
}

pub fn write_curve(path: impl AsRef<Path>, curve: &FragilityCurve) -> Result<(), ConfigError> {
    let path = path.as_ref();
    let file = CurveFile { medians: curve.medians.clone(), betas: curve.betas.clone() };
    std::fs::write(path, toml::to_string(&file).expect("curve serializes"))
        .map_err(|e| ConfigError::Io { path: path.to_path_buf(), source: e })
}
