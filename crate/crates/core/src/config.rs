//! Run configuration: a TOML file with sections, validated field by field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cascade::{StageSettings, DEFAULT_PER_STAGE, DEFAULT_POOL_CAP, DEFAULT_THRESHOLD_BATCH};
use crate::data::DatasetSpec;
use crate::error::{Result, WinnError};
use crate::nn::alt_init::AltInitializer;
use crate::nn::{ArchitectureSpec, Preset};
use crate::seeds::{derive_seed, stream};
use crate::supervised::{IntrospectionSettings, SupervisedSettings};
use crate::synthesis::{Ascent, Canvas, EpsSchedule, InitMode, SynthesisConfig};
use crate::train::{AdamConfig, ClassificationSettings, LossMode, DEFAULT_HALF_BATCH, DEFAULT_INNER_STEPS, DEFAULT_LAMBDA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub synthesis: SynthesisSection,
    #[serde(default)]
    pub texture: TextureConfig,
    #[serde(default)]
    pub supervised: SupervisedConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// A preset name such as `mlp2d(64)` or `appendixC_scaled(8,64)`.
    pub preset: String,
    #[serde(default)]
    pub dropout: f64,
    /// Dropout follows this many of the topmost weighted layers.
    #[serde(default = "one")]
    pub dropout_layers: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossMode,
    pub stages: usize,
    pub cascades: usize,
    pub inner_steps: usize,
    pub lambda: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub half_batch: usize,
    pub per_stage: usize,
    pub pool_cap: usize,
    pub threshold_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamConfig::CLASSIFIER;
        TrainConfig {
            loss: LossMode::Wasserstein,
            stages: 1,
            cascades: 1,
            inner_steps: DEFAULT_INNER_STEPS,
            lambda: DEFAULT_LAMBDA,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            adam_eps: a.eps,
            half_batch: DEFAULT_HALF_BATCH,
            per_stage: DEFAULT_PER_STAGE,
            pool_cap: DEFAULT_POOL_CAP,
            threshold_batch: DEFAULT_THRESHOLD_BATCH,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Gaussian,
    AltInitializer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    /// Gaussian noise added after each Adam ascent step.
    AdamNoise,
    /// The plain Langevin update.
    Langevin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisSection {
    pub init: InitKind,
    pub sigma: f64,
    /// Channel divisor of the frozen initializer network.
    pub init_channel_div: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub max_steps: usize,
    pub noise: NoiseKind,
    pub eps: f64,
    pub eps_decay: f64,
    pub dropout: bool,
}

impl Default for SynthesisSection {
    fn default() -> Self {
        let a = AdamConfig::SYNTHESIS;
        SynthesisSection {
            init: InitKind::Gaussian,
            sigma: 0.3,
            init_channel_div: 1,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            max_steps: 200,
            noise: NoiseKind::None,
            eps: 0.0,
            eps_decay: 1.0,
            dropout: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextureConfig {
    pub working: usize,
    pub center: usize,
    pub patches: usize,
    pub iters: usize,
    pub init_sigma: f64,
}

impl Default for TextureConfig {
    fn default() -> Self {
        TextureConfig {
            working: Canvas::DEFAULT.working,
            center: Canvas::DEFAULT.center,
            patches: 200,
            iters: 100,
            init_sigma: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    /// Train with the critic term and pseudo-negatives (false: plain
    /// cross-entropy baseline).
    pub introspective: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight: f64,
    pub per_epoch: usize,
    pub epsilon: f64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            introspective: true,
            epochs: 10,
            batch_size: 100,
            weight: crate::train::DEFAULT_SUPERVISED_WEIGHT,
            per_epoch: 100,
            epsilon: 0.125,
        }
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn bad(field: &str, why: impl std::fmt::Display) -> WinnError {
    WinnError::config(format!("{field}: {why}"))
}

fn at_least_one(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(bad(field, "must be at least 1"));
    }
    Ok(())
}

fn positive(field: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(bad(field, format!("must be positive, got {v}")));
    }
    Ok(())
}

fn non_negative(field: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(bad(field, format!("must be non-negative, got {v}")));
    }
    Ok(())
}

fn beta(field: &str, v: f64) -> Result<()> {
    if !(0.0..1.0).contains(&v) {
        return Err(bad(field, format!("must be in [0, 1), got {v}")));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| WinnError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with(path, &[])
    }

    /// Loads `path` and applies `section.key=value` overrides first; values
    /// are TOML literals, bare words are taken as strings.
    pub fn load_with(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| WinnError::Usage(format!("{}: {e}", path.display())))?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Self::from_toml(text);
        }
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| WinnError::config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| WinnError::usage(format!("override {o:?} is not key=value")))?;
            let value = parse_literal(raw.trim());
            let mut path: Vec<&str> = key.trim().split('.').collect();
            let leaf = path.pop().filter(|l| !l.is_empty()).ok_or_else(|| bad(key, "empty key"))?;
            let mut t = &mut table;
            for part in path {
                t = t
                    .entry(part)
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| bad(key, format!("{part} is not a section")))?;
            }
            t.insert(leaf.to_string(), value);
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| WinnError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    pub fn preset(&self) -> Result<Preset> {
        self.model
            .preset
            .parse()
            .map_err(|e: WinnError| bad("model.preset", e))
    }

    pub fn architecture(&self) -> Result<ArchitectureSpec> {
        self.preset()?
            .spec()
            .map_err(|e| bad("model.preset", e))?
            .with_dropout(self.model.dropout, self.model.dropout_layers)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(bad("name", "must not be empty"));
        }
        if self.seed > i64::MAX as u64 {
            return Err(bad("seed", "must be at most 2^63 - 1"));
        }
        self.validate_dataset()?;
        let spec = self.architecture()?;
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(bad("model.dropout", "must be in [0, 1)"));
        }
        let t = &self.train;
        at_least_one("train.stages", t.stages)?;
        at_least_one("train.cascades", t.cascades)?;
        at_least_one("train.inner_steps", t.inner_steps)?;
        non_negative("train.lambda", t.lambda)?;
        positive("train.lr", t.lr)?;
        beta("train.beta1", t.beta1)?;
        beta("train.beta2", t.beta2)?;
        positive("train.adam_eps", t.adam_eps)?;
        at_least_one("train.half_batch", t.half_batch)?;
        at_least_one("train.per_stage", t.per_stage)?;
        at_least_one("train.pool_cap", t.pool_cap)?;
        at_least_one("train.threshold_batch", t.threshold_batch)?;
        let s = &self.synthesis;
        positive("synthesis.sigma", s.sigma)?;
        at_least_one("synthesis.init_channel_div", s.init_channel_div)?;
        positive("synthesis.lr", s.lr)?;
        beta("synthesis.beta1", s.beta1)?;
        beta("synthesis.beta2", s.beta2)?;
        at_least_one("synthesis.max_steps", s.max_steps)?;
        non_negative("synthesis.eps", s.eps)?;
        positive("synthesis.eps_decay", s.eps_decay)?;
        if s.noise == NoiseKind::Langevin && s.eps == 0.0 {
            return Err(bad("synthesis.eps", "langevin mode needs a positive step size"));
        }
        if s.init == InitKind::AltInitializer {
            let size = spec.input.get(1).copied().unwrap_or(0);
            if spec.input.len() != 3 || spec.input[0] != 3 || size != spec.input[2] || size % 16 != 0 {
                return Err(bad(
                    "synthesis.init",
                    format!("alt_initializer produces RGB images with a side divisible by 16, model input is {:?}", spec.input),
                ));
            }
            AltInitializer::scaled(s.init_channel_div, size, 0).map_err(|e| bad("synthesis.init_channel_div", e))?;
        }
        let x = &self.texture;
        at_least_one("texture.patches", x.patches)?;
        positive("texture.init_sigma", x.init_sigma)?;
        if x.center > x.working || (x.working - x.center) % 2 != 0 {
            return Err(bad("texture.center", "must not exceed texture.working and leave an even margin"));
        }
        let v = &self.supervised;
        at_least_one("supervised.epochs", v.epochs)?;
        at_least_one("supervised.batch_size", v.batch_size)?;
        non_negative("supervised.weight", v.weight)?;
        at_least_one("supervised.per_epoch", v.per_epoch)?;
        non_negative("supervised.epsilon", v.epsilon)?;
        Ok(())
    }

    fn validate_dataset(&self) -> Result<()> {
        match &self.dataset {
            DatasetSpec::Mixture { count, modes, std, radius } => {
                at_least_one("dataset.count", *count)?;
                at_least_one("dataset.modes", *modes)?;
                non_negative("dataset.std", *std)?;
                positive("dataset.radius", *radius)?;
            }
            DatasetSpec::Ring { count, radius, std } => {
                at_least_one("dataset.count", *count)?;
                positive("dataset.radius", *radius)?;
                non_negative("dataset.std", *std)?;
            }
            DatasetSpec::Texture { size, crop, .. } => {
                at_least_one("dataset.crop", *crop)?;
                if size < crop {
                    return Err(bad("dataset.size", "must be at least dataset.crop"));
                }
            }
            DatasetSpec::TextureFile { crop, .. } => at_least_one("dataset.crop", *crop)?,
            DatasetSpec::ImageFolder { size, .. } => at_least_one("dataset.size", *size)?,
            DatasetSpec::Digits { train, test, size } => {
                at_least_one("dataset.train", *train)?;
                at_least_one("dataset.test", *test)?;
                if *size == 0 || crate::data::DIGIT_CANVAS % size != 0 {
                    return Err(bad("dataset.size", format!("must divide {}", crate::data::DIGIT_CANVAS)));
                }
            }
        }
        Ok(())
    }

    pub fn classifier_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: self.train.adam_eps,
        }
    }

    /// The synthesis settings for cascade 1.
    pub fn synthesis_config(&self) -> Result<SynthesisConfig> {
        let s = &self.synthesis;
        let spec = self.architecture()?;
        let init = match s.init {
            InitKind::Gaussian => InitMode::Gaussian { sigma: s.sigma },
            InitKind::AltInitializer => InitMode::AltInitializer(AltInitializer::scaled(
                s.init_channel_div,
                spec.input[1],
                derive_seed(self.seed, stream::ALT_INIT, 0),
            )?),
        };
        let adam = AdamConfig {
            lr: s.lr,
            beta1: s.beta1,
            beta2: s.beta2,
            eps: 1e-8,
        };
        let sched = EpsSchedule {
            eps: s.eps,
            decay: s.eps_decay,
        };
        let ascent = match s.noise {
            NoiseKind::None => Ascent::Adam { adam, noise: None },
            NoiseKind::AdamNoise => Ascent::Adam {
                adam,
                noise: Some(sched),
            },
            NoiseKind::Langevin => Ascent::Langevin(sched),
        };
        Ok(SynthesisConfig {
            init,
            ascent,
            max_steps: s.max_steps,
            dropout: s.dropout,
        })
    }

    pub fn stage_settings(&self) -> Result<StageSettings> {
        let t = &self.train;
        Ok(StageSettings {
            stages: t.stages,
            per_stage: t.per_stage,
            pool_cap: t.pool_cap,
            threshold_batch: t.threshold_batch,
            classification: ClassificationSettings {
                inner_steps: t.inner_steps,
                half_batch: t.half_batch,
                lambda: t.lambda,
                loss: t.loss,
                dropout: self.model.dropout > 0.0,
            },
            adam: self.classifier_adam(),
            synthesis: self.synthesis_config()?,
        })
    }

    pub fn canvas(&self, patch: usize) -> Canvas {
        Canvas {
            working: self.texture.working,
            center: self.texture.center,
            patch,
        }
    }

    pub fn supervised_settings(&self) -> Result<SupervisedSettings> {
        let v = &self.supervised;
        let introspection = if v.introspective {
            Some(IntrospectionSettings {
                weight: v.weight,
                lambda: self.train.lambda,
                per_epoch: v.per_epoch,
                threshold_batch: self.train.threshold_batch,
                synthesis: self.synthesis_config()?,
            })
        } else {
            None
        };
        Ok(SupervisedSettings {
            epochs: v.epochs,
            batch_size: v.batch_size,
            adam: self.classifier_adam(),
            introspection,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"
name = "toy"
seed = 7

[dataset]
kind = "mixture"
count = 1000
modes = 4
radius = 0.85
std = 0.05

[model]
preset = "mlp2d(32)"

[train]
stages = 3
lr = 0.001
"#;

    #[test]
    fn parse_and_round_trip() {
        let a = RunConfig::from_toml(TOY).unwrap();
        assert_eq!(a.train.stages, 3);
        assert_eq!(a.train.inner_steps, 3);
        assert_eq!(a.train.lambda, 10.0);
        let b = RunConfig::from_toml(&a.to_toml()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_field_is_named() {
        let err = RunConfig::from_toml(&TOY.replace("lr = 0.001", "learning_rate = 0.001")).unwrap_err();
        assert!(err.is_usage());
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn overrides() {
        let a = RunConfig::from_toml_with(TOY, &["train.stages=5".into(), "synthesis.noise=langevin".into(), "synthesis.eps=0.01".into()])
            .unwrap();
        assert_eq!(a.train.stages, 5);
        assert_eq!(a.synthesis.noise, NoiseKind::Langevin);
        let err = RunConfig::from_toml_with(TOY, &["train.stage=5".into()]).unwrap_err();
        assert!(err.to_string().contains("stage"), "{err}");
        assert!(RunConfig::from_toml_with(TOY, &["seed".into()]).unwrap_err().is_usage());
    }

    #[test]
    fn invalid_ranges_name_the_field() {
        let err = RunConfig::from_toml(&TOY.replace("stages = 3", "stages = 0")).unwrap_err();
        assert!(err.to_string().contains("train.stages"), "{err}");
        let err = RunConfig::from_toml(&TOY.replace("mlp2d(32)", "mlp3d(32)")).unwrap_err();
        assert!(err.to_string().contains("model.preset"), "{err}");
    }
}
