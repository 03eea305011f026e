//! Flat `key = value` run configuration.
//!
//! Every run resolves to the same canonical text: keys sorted, one per
//! line, floats printed in shortest round-trip form. Unknown keys are
//! rejected with the full valid-key list so typos fail loudly instead of
//! silently training with defaults.

use std::fmt;

use t2md_core::diffusion::NoiseSchedule;
use t2md_core::distill::dataset::DatasetSpec;
use t2md_core::model::ModelConfig;
use t2md_core::nn::PosEncVariant;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    pub data_seed: u64,
    pub data_two_shape_percent: u8,

    pub model_groups: usize,
    pub model_mambas_per_group: usize,
    pub model_d: usize,
    pub model_heads: usize,
    pub model_patch: usize,
    pub model_n_state: usize,
    pub model_expand: usize,
    pub model_channels: usize,
    pub model_latent_h: usize,
    pub model_latent_w: usize,
    pub model_text_vocab: usize,
    pub model_text_dim: usize,

    pub schedule_steps: usize,
    pub schedule_beta_min: f64,
    pub schedule_beta_max: f64,

    pub teacher_steps: usize,
    pub teacher_batch: usize,
    pub teacher_lr: f64,

    pub force_steps: usize,
    pub force_batch: usize,
    pub force_lr: f64,

    pub kd_steps: usize,
    pub kd_batch: usize,
    pub kd_lr: f64,
    pub kd_lambda_pseudo: f64,
    pub kd_lambda_mixer: f64,

    pub adapt_steps: usize,
    pub adapt_batch: usize,
    pub adapt_lr: f64,

    pub finetune_mixed_steps: usize,
    pub finetune_high_steps: usize,
    pub finetune_batch: usize,
    pub finetune_lr: f64,
    pub finetune_mixed_share: f64,

    pub ema_decay: f64,
    pub val_every: usize,
    pub val_count: usize,

    pub sample_count: usize,
    pub bench_reps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            data_seed: 1,
            data_two_shape_percent: 25,
            model_groups: 2,
            model_mambas_per_group: 3,
            model_d: 128,
            model_heads: 4,
            model_patch: 2,
            model_n_state: 32,
            model_expand: 2,
            model_channels: 4,
            model_latent_h: 16,
            model_latent_w: 16,
            model_text_vocab: 10,
            model_text_dim: 32,
            schedule_steps: 100,
            schedule_beta_min: 1e-4,
            schedule_beta_max: 0.2,
            teacher_steps: 2000,
            teacher_batch: 4,
            teacher_lr: 3e-4,
            force_steps: 200,
            force_batch: 2,
            force_lr: 3e-4,
            kd_steps: 300,
            kd_batch: 2,
            kd_lr: 1e-4,
            kd_lambda_pseudo: 0.5,
            kd_lambda_mixer: 0.2,
            adapt_steps: 150,
            adapt_batch: 4,
            adapt_lr: 1e-4,
            finetune_mixed_steps: 60,
            finetune_high_steps: 40,
            finetune_batch: 2,
            finetune_lr: 5e-5,
            finetune_mixed_share: 0.5,
            ema_decay: 0.999,
            val_every: 50,
            val_count: 16,
            sample_count: 16,
            bench_reps: 5,
        }
    }
}

#[derive(Debug)]
pub enum ConfigError {
    UnknownKey { key: String },
    DuplicateKey { key: String },
    BadValue { key: String, value: String, expected: &'static str },
    BadLine { line: usize, content: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::UnknownKey { key } => {
                write!(
                    f,
                    "unknown config key `{key}`; valid keys: {}",
                    RunConfig::valid_keys().join(", ")
                )
            }
            ConfigError::DuplicateKey { key } => {
                write!(f, "config key `{key}` given more than once")
            }
            ConfigError::BadValue { key, value, expected } => {
                write!(f, "config key `{key}`: cannot parse `{value}` as {expected}")
            }
            ConfigError::BadLine { line, content } => {
                write!(f, "config line {line} is not `key = value`: `{content}`")
            }
        }
    }
}

impl std::error::Error for ConfigError {}

struct Key {
    name: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> Result<(), ConfigError>,
}

fn p_usize(key: &'static str, v: &str) -> Result<usize, ConfigError> {
    v.trim().parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        value: v.into(),
        expected: "a non-negative integer",
    })
}

fn p_u64(key: &'static str, v: &str) -> Result<u64, ConfigError> {
    v.trim().parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        value: v.into(),
        expected: "a non-negative integer",
    })
}

fn p_u8(key: &'static str, v: &str) -> Result<u8, ConfigError> {
    v.trim().parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        value: v.into(),
        expected: "an integer in 0..=255",
    })
}

fn p_f64(key: &'static str, v: &str) -> Result<f64, ConfigError> {
    let x: f64 = v.trim().parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        value: v.into(),
        expected: "a finite number",
    })?;
    if !x.is_finite() {
        return Err(ConfigError::BadValue {
            key: key.into(),
            value: v.into(),
            expected: "a finite number",
        });
    }
    Ok(x)
}

macro_rules! key {
    ($name:literal, $field:ident, usize) => {
        Key {
            name: $name,
            get: |c| c.$field.to_string(),
            set: |c, v| {
                c.$field = p_usize($name, v)?;
                Ok(())
            },
        }
    };
    ($name:literal, $field:ident, u64) => {
        Key {
            name: $name,
            get: |c| c.$field.to_string(),
            set: |c, v| {
                c.$field = p_u64($name, v)?;
                Ok(())
            },
        }
    };
    ($name:literal, $field:ident, u8) => {
        Key {
            name: $name,
            get: |c| c.$field.to_string(),
            set: |c, v| {
                c.$field = p_u8($name, v)?;
                Ok(())
            },
        }
    };
    ($name:literal, $field:ident, f64) => {
        Key {
            name: $name,
            get: |c| c.$field.to_string(),
            set: |c, v| {
                c.$field = p_f64($name, v)?;
                Ok(())
            },
        }
    };
}

/// Canonical key order; must stay sorted (asserted by tests).
const KEYS: &[Key] = &[
    key!("adapt.batch", adapt_batch, usize),
    key!("adapt.lr", adapt_lr, f64),
    key!("adapt.steps", adapt_steps, usize),
    key!("bench.reps", bench_reps, usize),
    key!("data.seed", data_seed, u64),
    key!("data.two_shape_percent", data_two_shape_percent, u8),
    key!("ema.decay", ema_decay, f64),
    key!("finetune.batch", finetune_batch, usize),
    key!("finetune.high_steps", finetune_high_steps, usize),
    key!("finetune.lr", finetune_lr, f64),
    key!("finetune.mixed_share", finetune_mixed_share, f64),
    key!("finetune.mixed_steps", finetune_mixed_steps, usize),
    key!("force.batch", force_batch, usize),
    key!("force.lr", force_lr, f64),
    key!("force.steps", force_steps, usize),
    key!("kd.batch", kd_batch, usize),
    key!("kd.lambda_mixer", kd_lambda_mixer, f64),
    key!("kd.lambda_pseudo", kd_lambda_pseudo, f64),
    key!("kd.lr", kd_lr, f64),
    key!("kd.steps", kd_steps, usize),
    key!("model.channels", model_channels, usize),
    key!("model.d", model_d, usize),
    key!("model.expand", model_expand, usize),
    key!("model.groups", model_groups, usize),
    key!("model.heads", model_heads, usize),
    key!("model.latent_h", model_latent_h, usize),
    key!("model.latent_w", model_latent_w, usize),
    key!("model.mambas_per_group", model_mambas_per_group, usize),
    key!("model.n_state", model_n_state, usize),
    key!("model.patch", model_patch, usize),
    key!("model.text_dim", model_text_dim, usize),
    key!("model.text_vocab", model_text_vocab, usize),
    key!("sample.count", sample_count, usize),
    key!("schedule.beta_max", schedule_beta_max, f64),
    key!("schedule.beta_min", schedule_beta_min, f64),
    key!("schedule.steps", schedule_steps, usize),
    key!("seed", seed, u64),
    key!("teacher.batch", teacher_batch, usize),
    key!("teacher.lr", teacher_lr, f64),
    key!("teacher.steps", teacher_steps, usize),
    key!("val.count", val_count, usize),
    key!("val.every", val_every, usize),
];

impl RunConfig {
    pub fn valid_keys() -> Vec<&'static str> {
        KEYS.iter().map(|k| k.name).collect()
    }

    /// Sets one key, rejecting names outside the schema.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match KEYS.iter().find(|k| k.name == key) {
            Some(k) => (k.set)(self, value),
            None => Err(ConfigError::UnknownKey { key: key.into() }),
        }
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment
    /// line; duplicate keys are rejected.
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
                line: i + 1,
                content: line.to_string(),
            })?;
            let key = key.trim();
            if seen.iter().any(|s| s == key) {
                return Err(ConfigError::DuplicateKey { key: key.into() });
            }
            seen.push(key.to_string());
            cfg.apply(key, value.trim())?;
        }
        Ok(cfg)
    }

    /// Canonical text form: every key, sorted, one per line.
    pub fn to_canonical_string(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            out.push_str(k.name);
            out.push_str(" = ");
            out.push_str(&(k.get)(self));
            out.push('\n');
        }
        out
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            groups: self.model_groups,
            mambas_per_group: self.model_mambas_per_group,
            d: self.model_d,
            heads: self.model_heads,
            patch: self.model_patch,
            n_state: self.model_n_state,
            expand: self.model_expand,
            channels: self.model_channels,
            latent_h: self.model_latent_h,
            latent_w: self.model_latent_w,
            text_vocab: self.model_text_vocab,
            text_dim: self.model_text_dim,
            pe: PosEncVariant::Standard,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, String> {
        NoiseSchedule::build(self.schedule_steps, self.schedule_beta_min, self.schedule_beta_max)
            .map_err(|e| e.to_string())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            channels: self.model_channels,
            h: self.model_latent_h,
            w: self.model_latent_w,
            seed: self.data_seed,
            two_shape_percent: self.data_two_shape_percent,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_sorted_and_unique() {
        let names = RunConfig::valid_keys();
        for w in names.windows(2) {
            assert!(w[0] < w[1], "keys out of order: {} vs {}", w[0], w[1]);
        }
    }

    #[test]
    fn canonical_text_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_canonical_string();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(back.to_canonical_string(), text);
    }

    #[test]
    fn every_key_is_settable() {
        let mut cfg = RunConfig::default();
        for name in RunConfig::valid_keys() {
            cfg.apply(name, "1").unwrap();
        }
        assert_eq!(cfg.model_d, 1);
        assert_eq!(cfg.kd_lambda_mixer, 1.0);
    }

    #[test]
    fn unknown_keys_list_the_schema() {
        let err = RunConfig::parse("model.dd = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unknown config key `model.dd`"));
        assert!(msg.contains("model.d"), "message should list valid keys");
    }

    #[test]
    fn duplicates_bad_lines_and_bad_values_are_rejected() {
        assert!(matches!(
            RunConfig::parse("seed = 1\nseed = 2\n"),
            Err(ConfigError::DuplicateKey { .. })
        ));
        assert!(matches!(
            RunConfig::parse("just some words\n"),
            Err(ConfigError::BadLine { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::parse("teacher.lr = fast\n"),
            Err(ConfigError::BadValue { .. })
        ));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse("# a comment\n\nseed = 7\n").unwrap();
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn bridges_match_the_flat_fields() {
        let mut cfg = RunConfig::default();
        cfg.apply("model.latent_h", "32").unwrap();
        cfg.apply("data.seed", "9").unwrap();
        let mc = cfg.model_config();
        assert_eq!(mc.latent_h, 32);
        assert_eq!(mc.pe, PosEncVariant::Standard);
        let ds = cfg.dataset_spec();
        assert_eq!((ds.h, ds.seed), (32, 9));
        assert_eq!(cfg.schedule().unwrap().steps(), 100);
    }
}
