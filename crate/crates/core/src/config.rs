//! Run configuration: world, model hyperparameters, training and evaluation.
//!
//! Every field is required when parsing from JSON so a config file fully
//! describes a run. [`RunConfig::default`] is the toy configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::OptimizerConfig;
use crate::world::WorldConfig;

pub const SCALES: usize = 5;
/// Zero-based index of the fourth scale, the one the indicators operate on.
pub const DETAIL_SCALE: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel count per scale, finest first.
    pub scale_channels: [usize; SCALES],
    /// Spatial side length per scale; strictly decreasing.
    pub scale_sizes: [usize; SCALES],
    pub d_top: usize,
    pub d_z: usize,
    pub d_model: usize,
    pub query_tokens: usize,
    pub extractor_blocks: usize,
    pub slots: usize,
    pub d_c: usize,
    pub heads: usize,
    pub xi: f64,
    pub address_temperature: f64,
    pub train_uses_recall: bool,
    pub gen_hidden: usize,
    pub disc_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scale_channels: [2, 2, 4, 32, 8],
            scale_sizes: [5, 4, 3, 2, 1],
            d_top: 32,
            d_z: 16,
            d_model: 32,
            query_tokens: 8,
            extractor_blocks: 2,
            slots: 64,
            d_c: 32,
            heads: 4,
            xi: 0.1,
            address_temperature: 0.1,
            train_uses_recall: true,
            gen_hidden: 96,
            disc_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn detail_channels(&self) -> usize {
        self.scale_channels[DETAIL_SCALE]
    }

    pub fn detail_size(&self) -> usize {
        self.scale_sizes[DETAIL_SCALE]
    }

    pub fn scale_len(&self, k: usize) -> usize {
        self.scale_channels[k] * self.scale_sizes[k] * self.scale_sizes[k]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: &str| {
            Err(Error::Config {
                path: format!("model.{path}"),
                message: message.into(),
            })
        };
        for (k, (&c, &s)) in self
            .scale_channels
            .iter()
            .zip(&self.scale_sizes)
            .enumerate()
        {
            if c == 0 {
                return bad(&format!("scale_channels[{k}]"), "must be positive");
            }
            if s == 0 {
                return bad(&format!("scale_sizes[{k}]"), "must be positive");
            }
        }
        if self.scale_sizes.windows(2).any(|w| w[0] <= w[1]) {
            return bad("scale_sizes", "spatial sizes must be strictly decreasing");
        }
        for (path, v) in [
            ("d_top", self.d_top),
            ("d_z", self.d_z),
            ("d_model", self.d_model),
            ("query_tokens", self.query_tokens),
            ("extractor_blocks", self.extractor_blocks),
            ("slots", self.slots),
            ("d_c", self.d_c),
            ("heads", self.heads),
            ("gen_hidden", self.gen_hidden),
            ("disc_hidden", self.disc_hidden),
        ] {
            if v == 0 {
                return bad(path, "must be positive");
            }
        }
        if self.detail_channels() % self.heads != 0 {
            return bad("heads", "head count must divide the scale-4 channel count");
        }
        if !(self.xi.is_finite() && (-1.0..=1.0).contains(&self.xi)) {
            return bad("xi", "must lie in [-1, 1]");
        }
        if !(self.address_temperature > 0.0 && self.address_temperature.is_finite()) {
            return bad("address_temperature", "must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub rec: f64,
    pub adv: f64,
    pub dis: f64,
    pub dmem: f64,
    pub align: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rec: 1.0,
            adv: 0.1,
            dis: 1.0,
            dmem: 1.0,
            align: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub emi_on: bool,
    pub edi_on: bool,
    pub ldis_on: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        emi_on: true,
        edi_on: true,
        ldis_on: true,
    };
    pub const BASELINE: Ablation = Ablation {
        emi_on: false,
        edi_on: false,
        ldis_on: false,
    };
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub flags: Ablation,
    /// Held-out alignment is measured every this many steps.
    pub eval_every: usize,
    pub heldout_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            steps: 5000,
            batch_size: 16,
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            flags: Ablation::FULL,
            eval_every: 25,
            heldout_pairs: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        for (path, v) in [
            ("train.weights.rec", w.rec),
            ("train.weights.adv", w.adv),
            ("train.weights.dis", w.dis),
            ("train.weights.dmem", w.dmem),
            ("train.weights.align", w.align),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config {
                    path: path.into(),
                    message: format!("loss weight {v} must be finite and >= 0"),
                });
            }
        }
        let o = &self.optimizer;
        if !(o.learning_rate >= 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::Config {
                path: "train.optimizer.learning_rate".into(),
                message: "must be finite and >= 0".into(),
            });
        }
        if !(0.0..1.0).contains(&o.beta) {
            return Err(Error::Config {
                path: "train.optimizer.beta".into(),
                message: "must lie in [0, 1)".into(),
            });
        }
        if !(o.epsilon > 0.0) {
            return Err(Error::Config {
                path: "train.optimizer.epsilon".into(),
                message: "must be positive".into(),
            });
        }
        for (path, v) in [
            ("train.batch_size", self.batch_size),
            ("train.eval_every", self.eval_every),
            ("train.heldout_pairs", self.heldout_pairs),
        ] {
            if v == 0 {
                return Err(Error::Config {
                    path: path.into(),
                    message: "must be positive".into(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    /// Samples for each identity probe fit.
    pub probe_samples: usize,
    /// Pairs per evaluation sweep.
    pub pairs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 2024,
            probe_samples: 2000,
            pairs: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.slots < 1 {
            return Err(Error::Config {
                path: "model.slots".into(),
                message: "must be positive".into(),
            });
        }
        if self.eval.pairs == 0 || self.eval.probe_samples == 0 {
            return Err(Error::Config {
                path: "eval".into(),
                message: "sample counts must be positive".into(),
            });
        }
        let widest = self.world.d_img.max(self.model.d_z);
        let needed = crate::probe::SAMPLES_PER_DIM * widest;
        if self.eval.probe_samples < needed {
            return Err(Error::Config {
                path: "eval.probe_samples".into(),
                message: format!("identity probes on width {widest} need at least {needed} samples"),
            });
        }
        Ok(())
    }

    /// Parses and validates a JSON config; errors carry the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let message = inner.to_string();
            // a missing field is reported against its parent; name it fully
            let path = match missing_field(&message) {
                Some(field) if path == "." => field.to_string(),
                Some(field) => format!("{path}.{field}"),
                None => path,
            };
            Error::Config { path, message }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn missing_field(message: &str) -> Option<&str> {
    let rest = message.strip_prefix("missing field `")?;
    rest.split('`').next()
}
