//! Typed run configuration: TOML with one section per module, unknown keys
//! rejected, range validation with field-named messages.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autoencoder::{AeTrainConfig, ReconstructionLoss};
use crate::data::{AugmentSpec, SyntheticSpec, TaskData};
use crate::error::{Error, Result};
use crate::lifelong::{SequenceSettings, Strategy};
use crate::model::ArchSpec;
use crate::optim::{AdaDeltaConfig, SgdConfig};
use crate::seeds::{self, tag};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub lifelong: LifelongConfig,
    #[serde(default)]
    pub autoencoder: AeConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub augment: AugmentSpec,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

fn default_strategy() -> Strategy {
    Strategy::Ebll
}

fn default_out_dir() -> String {
    "runs".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_feature_widths")]
    pub feature_widths: Vec<usize>,
    #[serde(default = "default_shared_widths")]
    pub shared_widths: Vec<usize>,
    #[serde(default)]
    pub head_hidden: Vec<usize>,
}

fn default_feature_widths() -> Vec<usize> {
    vec![64, 64]
}

fn default_shared_widths() -> Vec<usize> {
    vec![32]
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_widths: default_feature_widths(),
            shared_widths: default_shared_widths(),
            head_hidden: vec![],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_lr_drop_epoch")]
    pub lr_drop_epoch: Option<usize>,
    #[serde(default = "default_lr_drop_factor")]
    pub lr_drop_factor: f64,
    #[serde(default = "default_rho")]
    pub adadelta_rho: f64,
    #[serde(default = "default_eps")]
    pub adadelta_epsilon: f64,
}

fn default_lr() -> f64 {
    0.05
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_lr_drop_epoch() -> Option<usize> {
    Some(30)
}
fn default_lr_drop_factor() -> f64 {
    0.1
}
fn default_rho() -> f64 {
    0.95
}
fn default_eps() -> f64 {
    1e-6
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            lr_drop_epoch: default_lr_drop_epoch(),
            lr_drop_factor: default_lr_drop_factor(),
            adadelta_rho: default_rho(),
            adadelta_epsilon: default_eps(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_epochs")]
    pub epochs_per_task: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_epochs() -> usize {
    40
}
fn default_batch() -> usize {
    32
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs_per_task: default_epochs(),
            batch_size: default_batch(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LifelongConfig {
    /// Preservation strength per past task; the last value broadcasts.
    #[serde(default = "default_alpha")]
    pub alpha: Vec<f64>,
    /// Distillation temperature.
    #[serde(default = "default_theta")]
    pub theta: f64,
}

fn default_alpha() -> Vec<f64> {
    vec![1e-2]
}
fn default_theta() -> f64 {
    2.0
}

impl Default for LifelongConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            theta: default_theta(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeConfig {
    /// Code dimension; when absent, a quarter of the feature dimension.
    #[serde(default)]
    pub code_dim: Option<usize>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_stop_window")]
    pub stop_window: usize,
    #[serde(default = "default_stop_tolerance")]
    pub stop_tolerance: f64,
    #[serde(default = "default_ae_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_reconstruction")]
    pub reconstruction: ReconstructionLoss,
}

fn default_lambda() -> f64 {
    1e-6
}
fn default_stop_window() -> usize {
    5
}
fn default_stop_tolerance() -> f64 {
    1e-3
}
fn default_ae_max_epochs() -> usize {
    150
}
fn default_reconstruction() -> ReconstructionLoss {
    ReconstructionLoss::HalfSquared
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            code_dim: None,
            lambda: default_lambda(),
            stop_window: default_stop_window(),
            stop_tolerance: default_stop_tolerance(),
            max_epochs: default_ae_max_epochs(),
            reconstruction: default_reconstruction(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxTaskPaths {
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_source")]
    pub source: DataSource,
    #[serde(default = "default_tasks")]
    pub tasks: usize,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_classes")]
    pub class_count: usize,
    #[serde(default = "default_train_pc")]
    pub train_per_class: usize,
    #[serde(default = "default_test_pc")]
    pub test_per_class: usize,
    #[serde(default = "default_spread")]
    pub cluster_spread: f64,
    #[serde(default = "default_relatedness")]
    pub relatedness: f64,
    #[serde(default)]
    pub idx_tasks: Vec<IdxTaskPaths>,
}

fn default_source() -> DataSource {
    DataSource::Synthetic
}
fn default_tasks() -> usize {
    3
}
fn default_input_dim() -> usize {
    16
}
fn default_classes() -> usize {
    8
}
fn default_train_pc() -> usize {
    200
}
fn default_test_pc() -> usize {
    100
}
fn default_spread() -> f64 {
    1.0
}
fn default_relatedness() -> f64 {
    0.6
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: default_source(),
            tasks: default_tasks(),
            input_dim: default_input_dim(),
            class_count: default_classes(),
            train_per_class: default_train_pc(),
            test_per_class: default_test_pc(),
            cluster_spread: default_spread(),
            relatedness: default_relatedness(),
            idx_tasks: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_trials")]
    pub contractiveness_trials: usize,
    #[serde(default = "default_samples_per_trial")]
    pub samples_per_trial: usize,
    #[serde(default = "default_drift_reference")]
    pub drift_reference_size: usize,
}

fn default_trials() -> usize {
    100
}
fn default_samples_per_trial() -> usize {
    50
}
fn default_drift_reference() -> usize {
    200
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            contractiveness_trials: default_trials(),
            samples_per_trial: default_samples_per_trial(),
            drift_reference_size: default_drift_reference(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let field = |section: &str, err: Error| Error::Config(format!("[{section}] {err}"));
        if self.name.is_empty() {
            return Err(Error::Config("name must not be empty".into()));
        }
        self.arch_spec().validate().map_err(|e| field("model", e))?;
        self.sgd_config().validate().map_err(|e| field("optim", e))?;
        self.adadelta_config()
            .validate()
            .map_err(|e| field("optim", e))?;
        if self.training.epochs_per_task == 0 {
            return Err(Error::Config("[training] epochs_per_task must be at least 1".into()));
        }
        if self.training.batch_size == 0 {
            return Err(Error::Config("[training] batch_size must be at least 1".into()));
        }
        if !(self.optim.lr_drop_factor > 0.0) {
            return Err(Error::Config("[optim] lr_drop_factor must be positive".into()));
        }
        if self.lifelong.alpha.is_empty() {
            return Err(Error::Config("[lifelong] alpha must not be empty".into()));
        }
        if self.lifelong.alpha.iter().any(|a| *a < 0.0 || !a.is_finite()) {
            return Err(Error::Config(
                "[lifelong] alpha entries must be finite and non-negative".into(),
            ));
        }
        if !(self.lifelong.theta > 0.0) {
            return Err(Error::Config("[lifelong] theta must be positive".into()));
        }
        self.ae_config().validate().map_err(|e| field("autoencoder", e))?;
        match self.data.source {
            DataSource::Synthetic => {
                if self.data.tasks == 0 {
                    return Err(Error::Config("[data] tasks must be at least 1".into()));
                }
                if !(0.0..=1.0).contains(&self.data.relatedness) {
                    return Err(Error::Config("[data] relatedness must lie in [0, 1]".into()));
                }
                if self.data.train_per_class == 0 || self.data.test_per_class == 0 {
                    return Err(Error::Config(
                        "[data] train_per_class and test_per_class must be at least 1".into(),
                    ));
                }
                if self.data.class_count < 2 {
                    return Err(Error::Config("[data] class_count must be at least 2".into()));
                }
                if !(self.data.cluster_spread >= 0.0) {
                    return Err(Error::Config("[data] cluster_spread must be non-negative".into()));
                }
            }
            DataSource::Idx => {
                if self.data.idx_tasks.is_empty() {
                    return Err(Error::Config(
                        "[data] idx source requires at least one [[data.idx_tasks]] entry".into(),
                    ));
                }
                if cfg!(not(feature = "idx")) {
                    return Err(Error::Config(
                        "[data] idx source requires the 'idx' build feature".into(),
                    ));
                }
            }
        }
        if self.augment.factor == 0 {
            return Err(Error::Config("[augment] factor must be at least 1".into()));
        }
        if !(self.augment.jitter_magnitude >= 0.0) {
            return Err(Error::Config("[augment] jitter_magnitude must be non-negative".into()));
        }
        if self.analysis.contractiveness_trials < 2 {
            return Err(Error::Config(
                "[analysis] contractiveness_trials must be at least 2".into(),
            ));
        }
        if self.analysis.samples_per_trial == 0 {
            return Err(Error::Config("[analysis] samples_per_trial must be at least 1".into()));
        }
        Ok(())
    }

    pub fn arch_spec(&self) -> ArchSpec {
        ArchSpec {
            input_dim: self.data.input_dim,
            feature_widths: self.model.feature_widths.clone(),
            shared_widths: self.model.shared_widths.clone(),
            head_hidden: self.model.head_hidden.clone(),
        }
    }

    pub fn sgd_config(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.optim.learning_rate,
            weight_decay: self.optim.weight_decay,
            momentum: self.optim.momentum,
        }
    }

    pub fn adadelta_config(&self) -> AdaDeltaConfig {
        AdaDeltaConfig {
            rho: self.optim.adadelta_rho,
            epsilon: self.optim.adadelta_epsilon,
        }
    }

    pub fn ae_config(&self) -> AeTrainConfig {
        let feature_dim = *self
            .model
            .feature_widths
            .last()
            .expect("validated feature widths");
        AeTrainConfig {
            code_dim: self.autoencoder.code_dim.unwrap_or((feature_dim / 4).max(1)),
            lambda: self.autoencoder.lambda,
            stop_window: self.autoencoder.stop_window,
            stop_tolerance: self.autoencoder.stop_tolerance,
            max_epochs: self.autoencoder.max_epochs,
            batch_size: self.training.batch_size,
            adadelta: self.adadelta_config(),
            reconstruction: self.autoencoder.reconstruction,
        }
    }

    /// Settings for one sequence run under the given seed (the config's own
    /// seed unless a sweep overrides it).
    pub fn sequence_settings(&self, seed: u64) -> SequenceSettings {
        SequenceSettings {
            arch: self.arch_spec(),
            sgd: self.sgd_config(),
            epochs_per_task: self.training.epochs_per_task,
            batch_size: self.training.batch_size,
            lr_drop_epoch: self.optim.lr_drop_epoch,
            lr_drop_factor: self.optim.lr_drop_factor,
            theta: self.lifelong.theta,
            alphas: self.lifelong.alpha.clone(),
            ae: self.ae_config(),
            augment: self.augment.clone(),
            drift_reference_size: self.analysis.drift_reference_size,
            seed,
        }
    }

    /// Synthetic task specs under the given seed; data seeds derive from the
    /// run seed per task, so every strategy sees identical data at one seed.
    pub fn synthetic_specs(&self, seed: u64) -> Vec<SyntheticSpec> {
        (0..self.data.tasks)
            .map(|i| SyntheticSpec {
                input_dim: self.data.input_dim,
                class_count: self.data.class_count,
                train_per_class: self.data.train_per_class,
                test_per_class: self.data.test_per_class,
                cluster_spread: self.data.cluster_spread,
                relatedness: if i == 0 { 1.0 } else { self.data.relatedness },
                rng_seed: seeds::derive(seed, &[tag::DATA_SAMPLES, 0xC0DE, i as u64]),
            })
            .collect()
    }

    pub fn build_tasks(&self, seed: u64) -> Result<Vec<TaskData>> {
        match self.data.source {
            DataSource::Synthetic => {
                crate::data::gen_synthetic_sequence(&self.synthetic_specs(seed))
            }
            DataSource::Idx => self.build_idx_tasks(),
        }
    }

    #[cfg(feature = "idx")]
    fn build_idx_tasks(&self) -> Result<Vec<TaskData>> {
        use crate::data::{Split, TaskId};
        let mut tasks = Vec::with_capacity(self.data.idx_tasks.len());
        for (i, paths) in self.data.idx_tasks.iter().enumerate() {
            let task = TaskId(i as u32);
            let train = crate::data::idx::load_idx(
                Path::new(&paths.train_images),
                Path::new(&paths.train_labels),
                task,
                Split::Train,
            )?;
            let test = crate::data::idx::load_idx(
                Path::new(&paths.test_images),
                Path::new(&paths.test_labels),
                task,
                Split::Test,
            )?;
            let class_count = train.class_count.max(test.class_count);
            let mut train = train;
            let mut test = test;
            train.class_count = class_count;
            test.class_count = class_count;
            tasks.push(TaskData {
                task,
                class_count,
                input_dim: train.input_dim,
                train,
                test,
            });
        }
        Ok(tasks)
    }

    #[cfg(not(feature = "idx"))]
    fn build_idx_tasks(&self) -> Result<Vec<TaskData>> {
        Err(Error::Config(
            "[data] idx source requires the 'idx' build feature".into(),
        ))
    }

    /// The desk-scale synthetic benchmark: 16-dimensional inputs, 8 classes,
    /// 200/100 train/test per class, related consecutive tasks. The
    /// autoencoder trade-off and code size are calibrated for this scale.
    pub fn benchmark(name: &str, tasks: usize, seed: u64) -> Self {
        let mut cfg = RunConfig {
            name: name.to_string(),
            seed,
            strategy: Strategy::Ebll,
            out_dir: "runs".into(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            training: TrainingConfig::default(),
            lifelong: LifelongConfig::default(),
            autoencoder: AeConfig::default(),
            data: DataConfig::default(),
            augment: AugmentSpec {
                factor: 2,
                ..AugmentSpec::default()
            },
            analysis: AnalysisConfig::default(),
        };
        cfg.data.tasks = tasks;
        // Wide clusters and unrelated task manifolds so that sequential
        // training exhibits measurable forgetting at this scale.
        cfg.data.cluster_spread = 3.0;
        cfg.data.relatedness = 0.0;
        // Stronger decay than the library default: at desk scale this is
        // what makes the trained feature map contract off-manifold inputs.
        cfg.optim.weight_decay = 3.5e-3;
        // Strong enough code anchoring to matter against the task loss.
        cfg.lifelong.alpha = vec![6.0];
        // A single-dimension code keeps one autoencoder well under 5% of the
        // model's parameters and its off-manifold reconstructions tight.
        cfg.autoencoder.code_dim = Some(1);
        cfg.autoencoder.lambda = 1.0;
        cfg
    }
}
