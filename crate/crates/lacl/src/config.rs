//! Run configuration: a sectioned TOML file in which every field has a
//! default, so a minimal config is a handful of lines and an empty file is a
//! complete desk-scale run.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelDims;

/// Which training arm to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Class-partitioned queues with KL-filtered admission.
    Lacl,
    /// Class-partitioned queues, every key admitted.
    LaclNoQrs,
    /// One undifferentiated queue, every key admitted.
    MocoBaseline,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Lacl, Mode::LaclNoQrs, Mode::MocoBaseline];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Lacl => "lacl",
            Mode::LaclNoQrs => "lacl-no-qrs",
            Mode::MocoBaseline => "moco-baseline",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lacl" => Ok(Mode::Lacl),
            "lacl-no-qrs" => Ok(Mode::LaclNoQrs),
            "moco-baseline" => Ok(Mode::MocoBaseline),
            other => Err(Error::InvalidConfig(format!(
                "unknown mode '{other}' (expected lacl, lacl-no-qrs, or moco-baseline)"
            ))),
        }
    }
}

/// How queues start out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueueInitMode {
    /// Filled with seeded random unit vectors; training starts immediately.
    RandomUnit,
    /// Empty; a warm-up phase populates the queues before training starts.
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    Mean,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub mode: Mode,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 42,
            mode: Mode::Lacl,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub backbone_dim: usize,
    pub proj_hidden_dim: usize,
    pub contrast_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelDims::default();
        ModelSection {
            input_dim: d.input_dim,
            hidden_dim: d.hidden_dim,
            backbone_dim: d.backbone_dim,
            proj_hidden_dim: d.proj_hidden_dim,
            contrast_dim: d.contrast_dim,
        }
    }
}

impl ModelSection {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            backbone_dim: self.backbone_dim,
            proj_hidden_dim: self.proj_hidden_dim,
            contrast_dim: self.contrast_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub num_classes: usize,
    pub slides_per_class: usize,
    pub patches_per_slide: usize,
    pub lesion_fraction: f64,
    /// Minimum pairwise distance between class lesion centers.
    pub class_separation: f64,
    pub noise_scale: f64,
    /// Background components shared across all classes.
    pub background_centers: usize,
    pub split_ratios: [u32; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            num_classes: 3,
            slides_per_class: 12,
            patches_per_slide: 50,
            lesion_fraction: 0.6,
            class_separation: 0.8,
            noise_scale: 0.45,
            background_centers: 4,
            split_ratios: [6, 1, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub gaussian_sigma: f64,
    pub mask_probability: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            gaussian_sigma: 0.3,
            mask_probability: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    /// EMA coefficient on the query branch: theta_k <- m theta_q + (1-m) theta_k.
    pub ema_m: f64,
    /// Total key slots, split evenly across classes (or one queue in
    /// moco-baseline mode).
    pub queue_capacity: usize,
    pub include_positive_in_denominator: bool,
    pub queue_init: QueueInitMode,
    /// Steps that only populate the queues before training begins. Omitted
    /// means one epoch for empty-init queues and zero for random-unit init.
    pub warmup_steps: Option<u64>,
    /// Checkpoint cadence in epochs.
    pub checkpoint_every: u32,
    pub lr_schedule: LrSchedule,
    /// Temperature for the admission filter's similarity softmax; 1.0 keeps
    /// raw dot products.
    pub qrs_temperature: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
            temperature: 0.2,
            ema_m: 0.001,
            queue_capacity: 1536,
            include_positive_in_denominator: true,
            queue_init: QueueInitMode::RandomUnit,
            warmup_steps: None,
            checkpoint_every: 10,
            lr_schedule: LrSchedule::Constant,
            qrs_temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub probe_learning_rate: f64,
    pub probe_epochs: u32,
    pub knn_k: usize,
    pub pooling: Pooling,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            probe_learning_rate: 0.5,
            probe_epochs: 200,
            knn_k: 5,
            pooling: Pooling::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub model: ModelSection,
    pub data: DataSection,
    pub augment: AugmentSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config = Self::parse(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: Config = toml::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        // serialization of a config that parsed cannot fail
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Stable 64-bit FNV-1a hash of the effective config, used to stamp logs
    /// and reports so runs under different settings are never conflated.
    pub fn fingerprint(&self) -> String {
        let mut hash: u64 = 0xcbf29ce484222325;
        for byte in self.to_toml_string().bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        format!("{hash:016x}")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.dims().validate()?;

        let d = &self.data;
        if d.num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_classes = {} but contrast needs at least 2",
                d.num_classes
            )));
        }
        if d.slides_per_class == 0 || d.patches_per_slide == 0 {
            return Err(Error::InvalidConfig(
                "slides_per_class and patches_per_slide must be > 0".into(),
            ));
        }
        if !(d.lesion_fraction > 0.0 && d.lesion_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "lesion_fraction = {} outside (0, 1]",
                d.lesion_fraction
            )));
        }
        if !(d.class_separation.is_finite() && d.class_separation > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "class_separation = {} must be finite and > 0",
                d.class_separation
            )));
        }
        if !(d.noise_scale.is_finite() && d.noise_scale >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise_scale = {} must be finite and >= 0",
                d.noise_scale
            )));
        }
        if d.background_centers == 0 {
            return Err(Error::InvalidConfig(
                "background_centers must be > 0".into(),
            ));
        }
        if d.split_ratios.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "split_ratios {:?} must all be > 0",
                d.split_ratios
            )));
        }

        let a = &self.augment;
        if !(a.gaussian_sigma.is_finite() && a.gaussian_sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gaussian_sigma = {} must be finite and >= 0",
                a.gaussian_sigma
            )));
        }
        if !(0.0..1.0).contains(&a.mask_probability) {
            return Err(Error::InvalidConfig(format!(
                "mask_probability = {} outside [0, 1)",
                a.mask_probability
            )));
        }

        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be > 0".into()));
        }
        // epochs = 0 is legal: it emits the initial checkpoint and stops
        if !(t.learning_rate.is_finite() && t.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate = {} must be finite and >= 0",
                t.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum = {} outside [0, 1)",
                t.momentum
            )));
        }
        if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "weight_decay = {} must be finite and >= 0",
                t.weight_decay
            )));
        }
        if !(t.temperature.is_finite() && t.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature = {} must be finite and > 0",
                t.temperature
            )));
        }
        if !(0.0..1.0).contains(&t.ema_m) {
            return Err(Error::InvalidConfig(format!(
                "ema_m = {} outside [0, 1)",
                t.ema_m
            )));
        }
        if t.queue_capacity < d.num_classes {
            return Err(Error::InvalidConfig(format!(
                "queue_capacity = {} leaves no slots for {} classes",
                t.queue_capacity, d.num_classes
            )));
        }
        if t.checkpoint_every == 0 {
            return Err(Error::InvalidConfig("checkpoint_every must be > 0".into()));
        }
        if !(t.qrs_temperature.is_finite() && t.qrs_temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "qrs_temperature = {} must be finite and > 0",
                t.qrs_temperature
            )));
        }

        let e = &self.eval;
        if !(e.probe_learning_rate.is_finite() && e.probe_learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "probe_learning_rate = {} must be finite and > 0",
                e.probe_learning_rate
            )));
        }
        if e.probe_epochs == 0 {
            return Err(Error::InvalidConfig("probe_epochs must be > 0".into()));
        }
        if e.knn_k == 0 {
            return Err(Error::InvalidConfig("knn_k must be > 0".into()));
        }
        Ok(())
    }
}
