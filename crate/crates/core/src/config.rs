//! Experiment configuration: one TOML document with dotted sections.
//!
//! Every section has defaults, so a file only needs the keys it changes.
//! Unknown keys anywhere are errors. Overrides use `section.key=value`
//! where the value is parsed as a TOML value, falling back to a bare string.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agc::AmbiguityReduction;
use crate::error::{contract, Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelShape;
use crate::optim::{default_contrast_start, AdamWConfig, TrainSchedule};
use crate::rng::derive_seed;
use crate::similarity::SimilarityKind;
use crate::synthdata::WorldSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source_images: usize,
    pub target_images: usize,
    pub eval_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source_images: 24,
            target_images: 24,
            eval_images: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub proj_hidden: usize,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            proj_hidden: 32,
            embed_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_t: f64,
    pub lambda_c: f64,
    pub lambda_kl: f64,
    pub tau: f64,
    /// Pseudo-label confidence threshold.
    pub alpha: f64,
    pub similarity: SimilarityKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_t: 1.0,
            lambda_c: 1.0,
            lambda_kl: 1e-6,
            tau: 0.1,
            alpha: 0.968,
            similarity: SimilarityKind::Elk,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_t: self.lambda_t,
            lambda_c: self.lambda_c,
            lambda_kl: self.lambda_kl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentumConfig {
    pub momentum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropStrategy {
    Random,
    Agc,
    /// Rare-class weighting: fixed class weights proportional to inverse
    /// source frequency, scored like AGC.
    Rcs,
    Cbc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropConfig {
    pub size: usize,
    pub strategy: CropStrategy,
    /// Candidate crops per selection.
    pub count: usize,
    pub top_k: usize,
    pub tau: f64,
    pub ambiguity: AmbiguityReduction,
    /// Largest class share accepted by class-balanced cropping.
    pub cbc_threshold: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            size: 32,
            strategy: CropStrategy::Agc,
            count: 10,
            top_k: 4,
            tau: 1.0,
            ambiguity: AmbiguityReduction::Mean,
            cbc_threshold: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub total_iters: usize,
    pub warmup_iters: usize,
    /// Defaults to 3/40 of `total_iters`, rounded down.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contrast_start_iter: Option<usize>,
    pub lr: f64,
    pub head_lr_multiplier: f64,
    pub poly_power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            total_iters: 2000,
            warmup_iters: 75,
            contrast_start_iter: None,
            lr: 1e-3,
            head_lr_multiplier: 10.0,
            poly_power: 1.0,
            beta1: adam.beta1,
            beta2: adam.beta2,
            weight_decay: adam.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalModel {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Steps between evaluations; the final step is always evaluated.
    pub interval: usize,
    pub model: EvalModel,
    /// Random target crops for the norm/variance statistics.
    pub crops: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            interval: 500,
            model: EvalModel::Teacher,
            crops: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldSpec,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub prototypes: MomentumConfig,
    pub teacher: MomentumConfig,
    pub crop: CropConfig,
    pub schedule: ScheduleConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            world: WorldSpec::benchmark(0),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            prototypes: MomentumConfig { momentum: 0.999 },
            teacher: MomentumConfig { momentum: 0.99 },
            crop: CropConfig::default(),
            schedule: ScheduleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Default for MomentumConfig {
    fn default() -> Self {
        Self { momentum: 0.999 }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl ExperimentConfig {
    /// Parses TOML text, applies `key=value` overrides and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(config_err)?;
        // Layer the document over the serialized defaults so partially
        // specified nested sections inherit the remaining defaults.
        let mut doc = toml::Table::try_from(Self::default()).map_err(config_err)?;
        merge(&mut doc, user);
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = toml::Value::Table(doc).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Canonical serialization; identical configs give identical text.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    /// Hex SHA-256 of the canonical TOML.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn classes(&self) -> usize {
        self.world.classes
    }

    /// The world with its seed derived from the run seed.
    pub fn world_spec(&self) -> WorldSpec {
        let bytes = derive_seed(self.seed, "data/world");
        let mut w = self.world.clone();
        w.seed = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        w
    }

    pub fn model_shape(&self) -> ModelShape {
        ModelShape {
            hidden: self.model.hidden,
            proj_hidden: self.model.proj_hidden,
            embed_dim: self.model.embed_dim,
            classes: self.world.classes,
        }
    }

    pub fn schedule(&self) -> TrainSchedule {
        let s = &self.schedule;
        TrainSchedule {
            total_iters: s.total_iters,
            // Short runs keep the default warmup without tripping validation.
            warmup_iters: s.warmup_iters.min(s.total_iters),
            contrast_start_iter: s
                .contrast_start_iter
                .unwrap_or_else(|| default_contrast_start(s.total_iters)),
            lr_base: s.lr,
            lr_head_multiplier: s.head_lr_multiplier,
            poly_power: s.poly_power,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.schedule.beta1,
            beta2: self.schedule.beta2,
            weight_decay: self.schedule.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |ok: bool, name: &str, msg: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{name}: {msg}")))
            }
        };
        self.world
            .validate()
            .map_err(|e| Error::Config(format!("world: {e}")))?;
        let k = self.world.classes;
        field(k < UNKNOWN_LABEL_LIMIT, "world.classes", "must be below 255")?;
        let d = &self.data;
        field(
            d.source_images >= 1 && d.target_images >= 1 && d.eval_images >= 1,
            "data",
            "image counts must be at least 1",
        )?;
        self.model_shape()
            .validate()
            .map_err(|e| Error::Config(format!("model: {e}")))?;
        let l = &self.loss;
        self.loss
            .weights()
            .validate()
            .map_err(|e| Error::Config(format!("loss: {e}")))?;
        field(l.tau > 0.0 && l.tau.is_finite(), "loss.tau", "must be positive")?;
        field((0.0..1.0).contains(&l.alpha), "loss.alpha", "must lie in [0, 1)")?;
        l.similarity
            .validate()
            .map_err(|e| Error::Config(format!("loss.similarity: {e}")))?;
        for (name, m) in [
            ("prototypes.momentum", self.prototypes.momentum),
            ("teacher.momentum", self.teacher.momentum),
        ] {
            field((0.0..=1.0).contains(&m), name, "must lie in [0, 1]")?;
        }
        let c = &self.crop;
        field(
            c.size >= 1 && c.size <= self.world.height && c.size <= self.world.width,
            "crop.size",
            "must fit inside the grid",
        )?;
        field(c.count >= 1, "crop.count", "must be at least 1")?;
        field(c.top_k >= 1 && c.top_k <= k, "crop.top_k", "must lie in 1..=classes")?;
        field(c.tau > 0.0 && c.tau.is_finite(), "crop.tau", "must be positive")?;
        field(
            c.cbc_threshold > 0.0 && c.cbc_threshold <= 1.0,
            "crop.cbc_threshold",
            "must lie in (0, 1]",
        )?;
        self.schedule()
            .validate()
            .map_err(|e| Error::Config(format!("schedule: {e}")))?;
        let s = &self.schedule;
        field(
            (0.0..1.0).contains(&s.beta1) && (0.0..1.0).contains(&s.beta2),
            "schedule.beta1/beta2",
            "must lie in [0, 1)",
        )?;
        field(s.weight_decay >= 0.0, "schedule.weight_decay", "must be non-negative")?;
        field(self.eval.interval >= 1, "eval.interval", "must be at least 1")?;
        field(self.eval.crops >= 3, "eval.crops", "must be at least 3")?;
        Ok(())
    }
}

const UNKNOWN_LABEL_LIMIT: usize = crate::agc::UNKNOWN as usize;

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets `a.b.c = value` in `doc`, creating intermediate tables.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let path = path.trim();
    contract!(!path.is_empty(), "override `{assignment}` has an empty key");
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    let mut table = doc;
    for key in &keys[..keys.len() - 1] {
        let entry = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{path}`: `{key}` is not a section")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        assert_eq!(cfg.schedule().contrast_start_iter, 150);
    }

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "sed = 3",
            "[loss]\nlambda_x = 1.0",
            "[world]\nseed = 4",
            "[nope]\na = 1",
        ] {
            let err = ExperimentConfig::from_toml(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
    }

    #[test]
    fn overrides_apply_dotted_paths() {
        let cfg = ExperimentConfig::from_toml_with_overrides(
            "seed = 3",
            &[
                "loss.lambda_c=0.5".into(),
                "loss.similarity=bk".into(),
                "crop.strategy=\"random\"".into(),
                "schedule.total_iters = 40".into(),
                "world.shift.hue_rotation=0.0".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.loss.lambda_c, 0.5);
        assert_eq!(cfg.loss.similarity, SimilarityKind::Bk);
        assert_eq!(cfg.crop.strategy, CropStrategy::Random);
        assert_eq!(cfg.schedule.total_iters, 40);
        assert_eq!(cfg.schedule().contrast_start_iter, 3);
        assert_eq!(cfg.world.shift.hue_rotation, 0.0);
        assert_eq!(cfg.world.shift.contrast, 0.8);
        assert!(ExperimentConfig::from_toml_with_overrides("", &["loss.bogus=1".into()]).is_err());
        assert!(ExperimentConfig::from_toml_with_overrides("", &["novalue".into()]).is_err());
        assert!(ExperimentConfig::from_toml_with_overrides("", &["seed.x=1".into()]).is_err());
    }

    #[test]
    fn range_errors_name_the_field() {
        let err = ExperimentConfig::from_toml("[crop]\ntop_k = 9")
            .unwrap_err()
            .to_string();
        assert!(err.contains("crop.top_k"), "{err}");
        let err = ExperimentConfig::from_toml("[loss]\nalpha = 1.0")
            .unwrap_err()
            .to_string();
        assert!(err.contains("loss.alpha"), "{err}");
        let err = ExperimentConfig::from_toml("[loss]\nsimilarity = \"ppk:-1\"")
            .unwrap_err()
            .to_string();
        assert!(err.contains("similarity"), "{err}");
    }

    #[test]
    fn world_seed_follows_the_run_seed() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { seed: 2, ..a.clone() };
        assert_ne!(a.world_spec().seed, b.world_spec().seed);
        assert_eq!(a.world_spec(), a.world_spec());
    }
}
