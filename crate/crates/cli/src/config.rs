//! TOML run configuration.
//!
//! ```toml
//! seed = 0
//! out_dir = "out"
//!
//! [family]
//! family = "nnls"          # nnls | random_qp | osc_masses | portfolio
//! seed = 0                 # fixed problem data
//!
//! [generate]
//! n_train = 1000
//! n_test = 200
//!
//! [train]
//! k = [15]                 # one model per entry
//! epochs = 200
//!
//! [evaluate]
//! tolerances = [1e-2, 1e-3, 1e-4]
//!
//! [bounds]
//! delta = 0.05
//! trials = 20
//!
//! [diagnose]
//! k_grid = [5, 10, 20, 40]
//! ```
//!
//! Every section except `[family]` may be omitted.

use std::path::{Path, PathBuf};

use drws::bounds::BoundKind;
use drws::predictor::TrainConfig;
use drws::FamilySpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Sampling and model-initialization seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_out_dir")]
    pub out_dir: PathBuf,
    pub family: FamilySpec,
    #[serde(default)]
    pub generate: GenerateConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
    #[serde(default)]
    pub bounds: BoundsConfig,
    #[serde(default)]
    pub diagnose: DiagnoseConfig,
}

fn d_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Cache high-accuracy fixed points next to each training θ.
    pub targets: bool,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            n_train: 1000,
            n_test: 200,
            targets: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub k: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub hidden: Vec<usize>,
    pub normalize: bool,
    pub bias: bool,
    pub pretrain: bool,
    pub pretrain_epochs: usize,
    /// Leading test problems used for the held-out loss curve.
    pub holdout: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            k: vec![t.k],
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            hidden: t.hidden,
            normalize: t.normalize,
            bias: t.bias,
            pretrain: t.pretrain,
            pretrain_epochs: t.pretrain_epochs,
            holdout: 50,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, k: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            k,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            seed,
            hidden: self.hidden.clone(),
            normalize: self.normalize,
            bias: self.bias,
            pretrain: self.pretrain,
            pretrain_epochs: self.pretrain_epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub tolerances: Vec<f64>,
    pub max_iters: usize,
    pub nearest_neighbor: bool,
    /// Trained k values to evaluate; defaults to `train.k`.
    pub k: Option<Vec<usize>>,
    /// Leading test problems whose individual residual curves are written.
    pub curve_problems: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            tolerances: vec![1e-2, 1e-3, 1e-4],
            max_iters: 20_000,
            nearest_neighbor: true,
            k: None,
            curve_problems: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundModel {
    /// A bias-free linear map `θ ↦ Wθ` trained per run.
    Linear,
    /// The model trained by `train` for the same k.
    Trained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsConfig {
    pub kinds: Vec<BoundKind>,
    pub model: BoundModel,
    pub k: usize,
    pub delta: f64,
    pub nu: f64,
    /// User-supplied Rademacher estimate for the theorem and averaged kinds.
    pub rad: Option<f64>,
    /// Problems used to estimate β̂ and B̂.
    pub estimate_samples: usize,
    /// Resampling trials; 0 skips them.
    pub trials: usize,
    pub trial_n_train: usize,
    pub trial_n_test: usize,
    /// Training epochs for the linear class.
    pub linear_epochs: usize,
    pub linear_learning_rate: f64,
    pub linear_batch_size: usize,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            kinds: vec![BoundKind::LinearCorollary],
            model: BoundModel::Linear,
            k: 15,
            delta: 0.05,
            nu: 0.5,
            rad: None,
            estimate_samples: 10,
            trials: 0,
            trial_n_train: 100,
            trial_n_test: 100,
            linear_epochs: 50,
            linear_learning_rate: 1e-3,
            linear_batch_size: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub k_grid: Vec<usize>,
    pub instances: usize,
    pub lemma_k: Vec<usize>,
    /// Random probe points per instance for the contraction check (the cold start is always included).
    pub lemma_probes: usize,
    pub lemma_slack: f64,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            k_grid: vec![5, 10, 20, 40],
            instances: 20,
            lemma_k: vec![1, 5, 15, 50],
            lemma_probes: 2,
            lemma_slack: 1.05,
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Config = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.family
            .validate()
            .map_err(|e| config_err(format!("family: {e}")))?;
        let g = &self.generate;
        if g.n_train == 0 || g.n_test == 0 {
            return Err(config_err(
                "generate.n_train and generate.n_test must be positive",
            ));
        }
        let t = &self.train;
        if t.k.is_empty() || t.k.contains(&0) {
            return Err(config_err(
                "train.k must be a nonempty list of positive integers",
            ));
        }
        for &k in &t.k {
            t.train_config(k, self.seed)
                .validate()
                .map_err(|e| config_err(format!("train: {e}")))?;
        }
        let e = &self.evaluate;
        if e.tolerances.is_empty() || e.tolerances.iter().any(|x| !(*x > 0.0)) {
            return Err(config_err(
                "evaluate.tolerances must be a nonempty list of positive numbers",
            ));
        }
        if e.max_iters == 0 {
            return Err(config_err("evaluate.max_iters must be positive"));
        }
        if let Some(ks) = &e.k {
            if let Some(bad) = ks.iter().find(|k| !t.k.contains(k)) {
                return Err(config_err(format!(
                    "evaluate.k contains {bad}, which is not in train.k"
                )));
            }
        }
        let b = &self.bounds;
        if !(b.delta > 0.0 && b.delta < 1.0) {
            return Err(config_err(format!(
                "bounds.delta = {} must lie in (0, 1)",
                b.delta
            )));
        }
        if !(b.nu > 0.0 && b.nu < 1.0) {
            return Err(config_err(format!(
                "bounds.nu = {} must lie in (0, 1)",
                b.nu
            )));
        }
        if b.k == 0 || b.estimate_samples == 0 {
            return Err(config_err(
                "bounds.k and bounds.estimate_samples must be positive",
            ));
        }
        if b.kinds.is_empty() {
            return Err(config_err("bounds.kinds must not be empty"));
        }
        let needs_rad = b.kinds.iter().any(|k| *k != BoundKind::LinearCorollary);
        if needs_rad && b.rad.is_none() {
            return Err(config_err(
                "bounds.rad is required for the theorem1 and averaged kinds",
            ));
        }
        if b.model == BoundModel::Trained && !t.k.contains(&b.k) {
            return Err(config_err(format!(
                "bounds.k = {} has no trained model in train.k",
                b.k
            )));
        }
        if b.trials > 0 && (b.trial_n_train == 0 || b.trial_n_test == 0) {
            return Err(config_err(
                "bounds.trial_n_train and bounds.trial_n_test must be positive",
            ));
        }
        let d = &self.diagnose;
        if d.k_grid.is_empty() || d.k_grid.contains(&0) || d.lemma_k.contains(&0) {
            return Err(config_err(
                "diagnose.k_grid must be nonempty and all k positive",
            ));
        }
        if d.instances == 0 {
            return Err(config_err("diagnose.instances must be positive"));
        }
        if !(d.lemma_slack >= 1.0) {
            return Err(config_err("diagnose.lemma_slack must be at least 1"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the effective configuration, embedded in every output.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&canonical)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn eval_ks(&self) -> Vec<usize> {
        self.evaluate
            .k
            .clone()
            .unwrap_or_else(|| self.train.k.clone())
    }
}
