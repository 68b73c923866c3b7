//! Versioned JSON run configuration.

use std::path::{Path, PathBuf};

use gridgsp::forecast::{Ar1Params, DatasetConfig, TrainConfig};
use gridgsp::grid::{fixtures, load_case, GridCase};
use gridgsp::gso::MatrixFormat;
use gridgsp::nn::{Architecture, Head, ModelConfig};
use gridgsp::voltvar::{EnvConfig, PpoConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;
/// Prefix selecting a case bundled with the library instead of a file.
pub const BUNDLED_PREFIX: &str = "bundled:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Case file path, or `bundled:<name>`.
    pub case: String,
    /// Required by every stochastic subcommand.
    pub seed: Option<u64>,
    pub data: DataSection,
    pub placement: PlacementSection,
    pub estimation: EstimationSection,
    pub gso: GsoSection,
    pub forecast: ForecastSection,
    pub drl: DrlSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            case: format!("{BUNDLED_PREFIX}four_bus_3ph"),
            seed: None,
            data: DataSection::default(),
            placement: PlacementSection::default(),
            estimation: EstimationSection::default(),
            gso: GsoSection::default(),
            forecast: ForecastSection::default(),
            drl: DrlSection::default(),
        }
    }
}

/// Synthetic load series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub steps: usize,
    pub rho: f64,
    pub sigma: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            steps: 600,
            rho: 0.5,
            sigma: 0.13,
        }
    }
}

impl DataSection {
    pub fn process(&self) -> Ar1Params {
        Ar1Params {
            rho: self.rho,
            sigma: self.sigma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementSection {
    /// Number of low graph frequencies to preserve; defaults to `m`.
    pub k: Option<usize>,
    pub m: usize,
}

impl Default for PlacementSection {
    fn default() -> Self {
        Self { k: None, m: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationSection {
    pub mu1: f64,
    pub noise_sigma: f64,
    /// Measured node labels (`bus.phase`); defaults to the greedy placement.
    pub observed: Option<Vec<String>>,
}

impl Default for EstimationSection {
    fn default() -> Self {
        Self {
            mu1: gridgsp::estimation::DEFAULT_MU1,
            noise_sigma: gridgsp::estimation::DEFAULT_NOISE_SIGMA,
            observed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GsoSection {
    pub format: MatrixFormat,
    /// Node labels for an additional Kron-reduced export.
    pub retained: Option<Vec<String>>,
}

impl Default for GsoSection {
    fn default() -> Self {
        Self {
            format: MatrixFormat::Dense,
            retained: None,
        }
    }
}

/// Graph network hyperparameters shared by both model uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: Architecture,
    pub order: usize,
    pub channels: usize,
    pub features: usize,
    pub hidden: usize,
    /// Rescale the shift operator to `2S/λ_max − I`.
    pub rescale: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            architecture: Architecture::Gcn,
            order: 2,
            channels: 10,
            features: 10,
            hidden: 512,
            rescale: true,
        }
    }
}

impl ModelSection {
    /// Model configuration with placeholder dimensions filled in later.
    pub fn model_config(&self, window: usize, signal_dim: usize, head: Head) -> ModelConfig {
        ModelConfig {
            architecture: self.architecture,
            order: self.order,
            window,
            channels: self.channels,
            features: self.features,
            hidden: self.hidden,
            signal_dim,
            head,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSection {
    pub model: ModelSection,
    pub window: usize,
    pub horizon: usize,
    pub mu2: f64,
    pub epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    /// Train and validation fractions; the test split takes the rest.
    pub split: [f64; 2],
    /// Checkpoint read by `forecast-eval`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ForecastSection {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            model: ModelSection::default(),
            window: 10,
            horizon: 1,
            mu2: train.mu2,
            epochs: train.epochs,
            patience: train.patience,
            learning_rate: train.learning_rate,
            split: [0.7, 0.15],
            checkpoint: None,
        }
    }
}

impl ForecastSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            patience: self.patience,
            learning_rate: self.learning_rate,
            mu2: self.mu2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrlSection {
    pub model: ModelSection,
    pub episodes: usize,
    pub ppo: PpoConfig,
    pub env: EnvConfig,
    /// Measured node labels; `None` observes the full state.
    pub observed: Option<Vec<String>>,
    /// Evaluation episodes (fixed scenario seeds derived from the run seed).
    pub eval_episodes: usize,
    /// Checkpoint read by `drl-eval`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for DrlSection {
    fn default() -> Self {
        Self {
            model: ModelSection {
                architecture: Architecture::Grn,
                ..ModelSection::default()
            },
            episodes: 300,
            ppo: PpoConfig::default(),
            env: EnvConfig::default(),
            observed: None,
            eval_episodes: 10,
            checkpoint: None,
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn check_nonneg(name: &str, v: f64) -> Result<(), CliError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be finite and nonnegative, got {v}")))
    }
}

impl RunConfig {
    /// Parses a config document, or the config echoed inside a manifest.
    pub fn from_json(text: &str, context: &str) -> Result<Self, CliError> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| invalid(format!("{context}: {e}")))?;
        let doc = if value.get("format").and_then(|f| f.as_str()) == Some(crate::manifest::MANIFEST_FORMAT) {
            value
                .get("config")
                .cloned()
                .ok_or_else(|| invalid(format!("{context}: manifest has no config")))?
        } else {
            value
        };
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| invalid(format!("{context}: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(invalid(format!(
                "{context}: unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| invalid("this subcommand is stochastic and needs an explicit --seed or config seed"))
    }

    /// Loads the configured case.
    pub fn load_case(&self) -> Result<GridCase, CliError> {
        match self.case.strip_prefix(BUNDLED_PREFIX) {
            Some(name) => fixtures::bundled(name).map_err(|e| invalid(e.to_string())),
            None => {
                let path = Path::new(&self.case);
                if !path.exists() {
                    return Err(invalid(format!("case file {} does not exist", path.display())));
                }
                load_case(path).map_err(|e| invalid(e.to_string()))
            }
        }
    }

    /// Numeric ranges of every section; run before any compute.
    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.data;
        if d.steps == 0 {
            return Err(invalid("data.steps must be positive"));
        }
        d.process().validate().map_err(|e| invalid(e.to_string()))?;
        if self.placement.m == 0 || self.placement.k == Some(0) {
            return Err(invalid("placement.k and placement.m must be positive"));
        }
        check_nonneg("estimation.mu1", self.estimation.mu1)?;
        check_nonneg("estimation.noise_sigma", self.estimation.noise_sigma)?;
        let f = &self.forecast;
        DatasetConfig {
            window: f.window,
            horizon: f.horizon,
            mu1: self.estimation.mu1,
            noise_sigma: self.estimation.noise_sigma,
        }
        .validate()
        .map_err(|e| invalid(e.to_string()))?;
        f.train_config().validate().map_err(|e| invalid(e.to_string()))?;
        let [a, b] = f.split;
        if !(a > 0.0 && b >= 0.0 && a + b < 1.0) {
            return Err(invalid(format!("forecast.split {:?} must be positive and sum below 1", f.split)));
        }
        for (name, m) in [("forecast.model", &f.model), ("drl.model", &self.drl.model)] {
            if m.channels == 0 || m.features == 0 || m.hidden == 0 {
                return Err(invalid(format!("{name}: channels, features and hidden must be positive")));
            }
        }
        let r = &self.drl;
        r.ppo.validate().map_err(|e| invalid(e.to_string()))?;
        r.env.validate().map_err(|e| invalid(e.to_string()))?;
        if r.eval_episodes == 0 {
            return Err(invalid("drl.eval_episodes must be positive"));
        }
        for path in [&f.checkpoint, &r.checkpoint].into_iter().flatten() {
            if !path.exists() {
                return Err(invalid(format!("checkpoint {} does not exist", path.display())));
            }
        }
        Ok(())
    }
}

/// Resolves `bus.phase` labels to node positions.
pub fn resolve_labels(case: &GridCase, labels: &[String]) -> Result<Vec<usize>, CliError> {
    labels
        .iter()
        .map(|l| {
            case.node_by_label(l)
                .ok_or_else(|| invalid(format!("unknown node label `{l}` in case {}", case.name)))
        })
        .collect()
}
