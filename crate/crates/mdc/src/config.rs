//! Flat `key = value` training configuration.

use std::fmt::Write as _;

use anyhow::{anyhow, bail, Context, Result};
use mdc_core::model::ModelConfig;
use mdc_core::train::{Objective, Precision, TrainConfig};
use sha2::{Digest, Sha256};

/// Model size presets selectable from a config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelPreset {
    Standard,
    Compact,
}

impl ModelPreset {
    pub fn name(self) -> &'static str {
        match self {
            ModelPreset::Standard => "standard",
            ModelPreset::Compact => "compact",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(ModelPreset::Standard),
            "compact" => Ok(ModelPreset::Compact),
            _ => bail!("unknown model preset {s:?}; valid: standard | compact"),
        }
    }

    pub fn build(self, vocab: usize, objective: Objective) -> ModelConfig {
        match self {
            ModelPreset::Standard => ModelConfig::standard(vocab, objective.mode()),
            ModelPreset::Compact => ModelConfig::compact(vocab, objective.mode()),
        }
    }
}

/// Everything a training run reads from its config file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub preset: ModelPreset,
}

pub const KEYS: &[&str] = &[
    "objective",
    "model",
    "window_lower",
    "window_upper",
    "batch_size",
    "steps",
    "lr",
    "warmup",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "grad_clip",
    "seed",
    "checkpoint_every",
    "precision",
];

impl RunConfig {
    pub fn new(objective: Objective, preset: ModelPreset, vocab: usize) -> Self {
        RunConfig {
            train: TrainConfig::new(objective, preset.build(vocab, objective)),
            preset,
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown or
    /// repeated keys are errors. `vocab` sizes the model.
    pub fn parse(text: &str, vocab: usize) -> Result<Self> {
        let mut pairs: Vec<(&str, &str, usize)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value, got {raw:?}", lineno + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                bail!("line {}: unknown key {k:?}; valid keys: {}", lineno + 1, KEYS.join(", "));
            }
            if pairs.iter().any(|p| p.0 == k) {
                bail!("line {}: key {k:?} given twice", lineno + 1);
            }
            pairs.push((k, v, lineno + 1));
        }
        let get = |k: &str| pairs.iter().find(|p| p.0 == k).map(|p| (p.1, p.2));
        let objective = match get("objective") {
            Some((v, _)) => Objective::parse(v)?,
            None => Objective::Mdc,
        };
        let preset = match get("model") {
            Some((v, _)) => ModelPreset::parse(v)?,
            None => ModelPreset::Standard,
        };
        let mut cfg = RunConfig::new(objective, preset, vocab);
        for &(k, v, line) in &pairs {
            let t = &mut cfg.train;
            let ctx = || format!("line {line}: bad value {v:?} for {k}");
            match k {
                "objective" | "model" => {}
                "window_lower" => t.window_lower = v.parse().with_context(ctx)?,
                "window_upper" => t.window_upper = v.parse().with_context(ctx)?,
                "batch_size" => t.batch_size = v.parse().with_context(ctx)?,
                "steps" => t.steps = v.parse().with_context(ctx)?,
                "lr" => t.lr = v.parse().with_context(ctx)?,
                "warmup" => t.warmup = v.parse().with_context(ctx)?,
                "weight_decay" => t.weight_decay = v.parse().with_context(ctx)?,
                "beta1" => t.beta1 = v.parse().with_context(ctx)?,
                "beta2" => t.beta2 = v.parse().with_context(ctx)?,
                "adam_eps" => t.adam_eps = v.parse().with_context(ctx)?,
                "grad_clip" => {
                    t.grad_clip = match v {
                        "none" | "off" => None,
                        _ => Some(v.parse().with_context(ctx)?),
                    }
                }
                "seed" => t.seed = v.parse().with_context(ctx)?,
                "checkpoint_every" => t.checkpoint_every = v.parse().with_context(ctx)?,
                "precision" => {
                    t.precision = match v {
                        "f32" => Precision::F32,
                        "f64" => Precision::F64,
                        _ => bail!("line {line}: precision must be f32 or f64"),
                    }
                }
                _ => unreachable!("key list checked above"),
            }
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Canonical text form: every key, fixed order, round-trip floats.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        put("objective", t.objective.label());
        put("model", self.preset.name().into());
        put("window_lower", fmt_f64(t.window_lower));
        put("window_upper", fmt_f64(t.window_upper));
        put("batch_size", t.batch_size.to_string());
        put("steps", t.steps.to_string());
        put("lr", fmt_f64(t.lr));
        put("warmup", t.warmup.to_string());
        put("weight_decay", fmt_f64(t.weight_decay));
        put("beta1", fmt_f64(t.beta1));
        put("beta2", fmt_f64(t.beta2));
        put("adam_eps", fmt_f64(t.adam_eps));
        put("grad_clip", t.grad_clip.map_or("none".into(), fmt_f64));
        put("seed", t.seed.to_string());
        put("checkpoint_every", t.checkpoint_every.to_string());
        put("precision", t.precision.name().into());
        s
    }

    /// Hex SHA-256 of the canonical text, truncated to 16 characters.
    pub fn hash(&self) -> String {
        short_hash(self.to_text().as_bytes())
    }
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
