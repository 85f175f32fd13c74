//! Objectives, optimizer, learning-rate schedule and the training loop.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Tensor};
use crate::diffusion::{corrupt, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{AttentionMode, DecodeOptions, Image, ModelConfig, ModelParams};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::vocab::{content_len, TokenId, EOS, MASK, PAD};
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Masked diffusion: `t` per example, `1/t`-weighted masked cross-entropy.
    Mdc,
    /// Autoregressive teacher forcing with causal self-attention.
    Arc,
    /// Fixed masking ratio, unweighted.
    Bert(f64),
    /// Every token masked, unweighted.
    Parallel,
    /// Masked diffusion corruption without the `1/t` weight.
    Cmlm,
}

impl Objective {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || {
            Error::invalid(format!(
                "unknown objective {s:?}; valid forms: mdc | arc | bert:<ratio in (0,1]> | parallel | cmlm"
            ))
        };
        Ok(match s {
            "mdc" => Objective::Mdc,
            "arc" => Objective::Arc,
            "parallel" => Objective::Parallel,
            "cmlm" => Objective::Cmlm,
            _ => {
                let ratio: f64 = s.strip_prefix("bert:").ok_or_else(bad)?.parse().map_err(|_| bad())?;
                if !(ratio > 0.0 && ratio <= 1.0) {
                    return Err(bad());
                }
                Objective::Bert(ratio)
            }
        })
    }

    pub fn label(&self) -> String {
        match self {
            Objective::Mdc => "mdc".into(),
            Objective::Arc => "arc".into(),
            Objective::Bert(r) => format!("bert:{r}"),
            Objective::Parallel => "parallel".into(),
            Objective::Cmlm => "cmlm".into(),
        }
    }

    pub fn mode(&self) -> AttentionMode {
        match self {
            Objective::Arc => AttentionMode::Causal,
            _ => AttentionMode::Bidirectional,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub window_lower: f64,
    pub window_upper: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub warmup: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub precision: Precision,
    pub model: ModelConfig,
}

impl TrainConfig {
    /// Batch 32, 5k steps, lr 3e-4 with 200 warmup steps, weight decay 0.1,
    /// betas (0.9, 0.98), window [0.5, 1].
    pub fn new(objective: Objective, model: ModelConfig) -> Self {
        TrainConfig {
            objective,
            window_lower: 0.5,
            window_upper: 1.0,
            batch_size: 32,
            steps: 5000,
            lr: 3e-4,
            warmup: 200,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            grad_clip: None,
            seed: 0,
            checkpoint_every: 0,
            precision: Precision::F32,
            model,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.window_lower, self.window_upper)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.model.validate()?;
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::invalid("batch_size and steps must be positive"));
        }
        if self.warmup > self.steps {
            return Err(Error::invalid("warmup exceeds steps"));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::invalid("lr must be positive and weight_decay non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        if self.objective.mode() != self.model.decoder.mode {
            return Err(Error::invalid(format!(
                "objective {} needs {} self-attention",
                self.objective.label(),
                self.objective.mode().name()
            )));
        }
        Ok(())
    }
}

/// Linear warmup to `lr`, then half-cosine decay to zero at `steps`.
pub fn cosine_lr(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup {
        return cfg.lr * step as f64 / cfg.warmup as f64;
    }
    let span = (cfg.steps - cfg.warmup).max(1) as f64;
    let progress = ((step - cfg.warmup) as f64 / span).min(1.0);
    cfg.lr * 0.5 * (1.0 + (core::f64::consts::PI * progress).cos())
}

/// Round-half-up of `ratio * len`.
pub fn bert_mask_count(ratio: f64, len: usize) -> usize {
    ((ratio * len as f64 + 0.5).floor() as usize).min(len)
}

/// Decoder inputs, per-row targets and loss weights for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub inputs: Vec<TokenId>,
    pub targets: Vec<Option<u32>>,
    pub weights: Vec<f64>,
    /// Corruption time per example (1 for ratio-based objectives, NaN for
    /// autoregressive).
    pub times: Vec<f64>,
    pub batch: usize,
    pub seq_len: usize,
}

impl PreparedBatch {
    pub fn supervised_rows(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Corrupts (or shifts) `captions` for `objective` and assigns row weights
/// so that the weighted cross-entropy equals the mean over examples of each
/// example's per-token mean loss, times its objective weight.
pub fn prepare_batch<R: Rng + ?Sized>(
    objective: Objective,
    sched: &NoiseSchedule,
    captions: &[&[TokenId]],
    rng: &mut R,
) -> Result<PreparedBatch> {
    let batch = captions.len();
    if batch == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let seq_len = captions[0].len();
    if captions.iter().any(|c| c.len() != seq_len) {
        return Err(Error::invalid("captions in a batch must share one padded length"));
    }
    let inv_b = 1.0 / batch as f64;
    let mut out = PreparedBatch {
        inputs: Vec::with_capacity(batch * seq_len),
        targets: Vec::with_capacity(batch * seq_len),
        weights: Vec::with_capacity(batch * seq_len),
        times: Vec::with_capacity(batch),
        batch,
        seq_len,
    };
    for cap in captions {
        let len = content_len(cap);
        if cap[len..].iter().any(|&t| t != PAD) {
            return Err(Error::invalid("captions must be content followed by padding"));
        }
        let (masked, weight, t): (Vec<bool>, f64, f64) = match objective {
            Objective::Mdc | Objective::Cmlm => {
                let t = sched.sample_time(rng);
                let mc = corrupt(cap, t, rng)?;
                let w = match objective {
                    Objective::Mdc => sched.clamped_loss_weight(t),
                    _ => 1.0,
                };
                (mc.masked, w, t)
            }
            Objective::Bert(ratio) => {
                let count = bert_mask_count(ratio, len);
                let mut order: Vec<usize> = (0..len).collect();
                for i in 0..count {
                    let j = i + rng.gen_range(0u32..(len - i) as u32) as usize;
                    order.swap(i, j);
                }
                let mut m = vec![false; seq_len];
                order[..count].iter().for_each(|&i| m[i] = true);
                (m, 1.0, ratio)
            }
            Objective::Parallel => ((0..seq_len).map(|i| i < len).collect(), 1.0, 1.0),
            Objective::Arc => {
                if len + 1 > seq_len {
                    return Err(Error::invalid("no room for the end-of-sequence token"));
                }
                let n = (len + 1) as f64;
                for i in 0..seq_len {
                    let tok = if i < len { cap[i] } else if i == len { EOS } else { PAD };
                    out.inputs.push(tok);
                    out.targets.push((i <= len).then_some(tok));
                    out.weights.push(if i <= len { inv_b / n } else { 0.0 });
                }
                out.times.push(f64::NAN);
                continue;
            }
        };
        let n = masked.iter().filter(|&&m| m).count();
        for i in 0..seq_len {
            if masked[i] {
                out.inputs.push(MASK);
                out.targets.push(Some(cap[i]));
                out.weights.push(weight * inv_b / n as f64);
            } else {
                out.inputs.push(cap[i]);
                out.targets.push(None);
                out.weights.push(0.0);
            }
        }
        out.times.push(t);
    }
    Ok(out)
}

/// Weighted batch loss on a fresh graph; returns the loss and, when
/// `with_grads`, one gradient buffer per parameter tensor.
pub fn batch_loss<T: Scalar>(
    params: &ModelParams<T>,
    images: &[&Image],
    prepared: &PreparedBatch,
    mode: AttentionMode,
    with_grads: bool,
) -> Result<(f64, Option<Vec<Vec<T>>>)> {
    if images.len() != prepared.batch {
        return Err(Error::shape("batch_loss", &[images.len()], &[prepared.batch]));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g, with_grads);
    let v = bound.encode(&mut g, images)?;
    let logits = bound.decode(&mut g, &prepared.inputs, prepared.batch, v, DecodeOptions::new(mode))?;
    let weights: Vec<T> = prepared.weights.iter().map(|&w| T::of(w)).collect();
    let loss = g.cross_entropy(logits, &prepared.targets, &weights)?;
    let value = g.value(loss).item().as_f64();
    if !with_grads {
        return Ok((value, None));
    }
    let mut grads = g.backward(loss)?;
    let out = bound
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| vec![T::zero(); t.numel()]))
        .collect();
    Ok((value, Some(out)))
}

/// Parameters plus AdamW moments and the step counter. Randomness is
/// derived from `(seed, step)`, so this is the complete resumable state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub params: ModelParams<T>,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: ModelParams<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        TrainState {
            params,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
        }
    }

    /// Fresh state with parameters initialised from the config's seed.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = stream_rng(cfg.seed, Stream::Init, 0);
        Ok(Self::new(ModelParams::init(&cfg.model, &mut rng)?))
    }
}

/// Decoupled-weight-decay Adam. Weight decay applies to matrices only.
pub fn adamw_update<T: Scalar>(state: &mut TrainState<T>, grads: &[Vec<T>], lr: f64, cfg: &TrainConfig) {
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let step_size = T::of(lr / bc1);
    let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
    let eps = T::of(cfg.adam_eps);
    let params = state.params.tensors_mut();
    for (i, p) in params.iter_mut().enumerate() {
        let decay = if p.shape().len() >= 2 {
            T::one() - T::of(lr * cfg.weight_decay)
        } else {
            T::one()
        };
        let g = &grads[i];
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
            *w = *w * decay - step_size * m[j] / (v[j].sqrt() * inv_sqrt_bc2 + eps);
        }
    }
    state.step += 1;
}

fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| {
            let x = g.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Image-caption training pairs. Captions share one padded length.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub captions: Vec<Vec<TokenId>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }
    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Batch indices drawn for `step` (uniform, with replacement).
pub fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut rng = stream_rng(seed, Stream::Batch, step);
    (0..batch).map(|_| rng.gen_range(0u32..n as u32) as usize).collect()
}

/// Builds the prepared batch for `step` exactly as [`train_step`] does.
pub fn step_batch<'d>(cfg: &TrainConfig, data: &'d Dataset, step: u64) -> Result<(Vec<&'d Image>, PreparedBatch)> {
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let sched = cfg.schedule()?;
    let idx = batch_indices(cfg.seed, step, cfg.batch_size, data.len());
    let images: Vec<&Image> = idx.iter().map(|&i| &data.images[i]).collect();
    let caps: Vec<&[TokenId]> = idx.iter().map(|&i| data.captions[i].as_slice()).collect();
    let mut rng = stream_rng(cfg.seed, Stream::Corruption, step);
    let prepared = prepare_batch(cfg.objective, &sched, &caps, &mut rng)?;
    Ok((images, prepared))
}

/// One optimizer step. The reported loss is measured before the update.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, cfg: &TrainConfig, data: &Dataset) -> Result<StepRecord> {
    let step = state.step;
    let lr = cosine_lr(step, cfg);
    let (images, prepared) = step_batch(cfg, data, step)?;
    let (loss, grads) = batch_loss(&state.params, &images, &prepared, cfg.objective.mode(), true)?;
    let mut grads = grads.expect("gradients requested");
    if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("loss {loss} at step {step}; config: {cfg:?}")));
    }
    if let Some(max_norm) = cfg.grad_clip {
        clip_global_norm(&mut grads, max_norm);
    }
    adamw_update(state, &grads, lr, cfg);
    if let Some(name) = state.params.first_non_finite() {
        return Err(Error::NonFinite(format!("parameter {name} after step {step}; config: {cfg:?}")));
    }
    Ok(StepRecord { step, lr, loss })
}

/// Runs steps until `cfg.steps`, calling `on_step` after each one (for
/// logging and checkpointing). Stops early if the callback errors.
pub fn train<T: Scalar>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    data: &Dataset,
    mut on_step: impl FnMut(&TrainState<T>, &StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let mut log = Vec::with_capacity(cfg.steps.saturating_sub(state.step) as usize);
    while state.step < cfg.steps {
        let rec = train_step(state, cfg, data)?;
        on_step(state, &rec)?;
        log.push(rec);
    }
    Ok(log)
}

/// Exponential moving average of a loss curve.
pub fn smooth(losses: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(losses.len());
    let mut acc = None;
    for &l in losses {
        let v = match acc {
            None => l,
            Some(a) => alpha * l + (1.0 - alpha) * a,
        };
        acc = Some(v);
        out.push(v);
    }
    out
}

/// Population variance of the last `window` values.
pub fn tail_variance(values: &[f64], window: usize) -> f64 {
    let tail = &values[values.len().saturating_sub(window)..];
    let n = tail.len().max(1) as f64;
    let mean = tail.iter().sum::<f64>() / n;
    tail.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

impl core::fmt::Display for Objective {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(&self.label())
    }
}

impl core::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Objective::parse(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig::new(Objective::Mdc, ModelConfig::compact(18, AttentionMode::Bidirectional))
    }

    #[test]
    fn objective_strings() {
        assert_eq!(Objective::parse("bert:0.15").unwrap(), Objective::Bert(0.15));
        assert_eq!(Objective::parse("bert:0.15").unwrap().label(), "bert:0.15");
        for bad in ["bert:0", "bert:1.5", "bert:x", "diffusion", ""] {
            let err = Objective::parse(bad).unwrap_err().to_string();
            assert!(err.contains("mdc | arc"), "{err}");
        }
        assert_eq!(Objective::parse("cmlm").unwrap().to_string(), "cmlm");
    }

    #[test]
    fn lr_schedule_endpoints() {
        let c = cfg();
        assert_eq!(cosine_lr(0, &c), 0.0);
        assert!((cosine_lr(c.warmup, &c) - c.lr).abs() < 1e-15);
        assert!(cosine_lr(c.steps - 1, &c) < 0.01 * c.lr);
        assert!(cosine_lr(c.warmup / 2, &c) < c.lr);
        let mut prev = f64::INFINITY;
        for s in c.warmup..c.steps {
            let lr = cosine_lr(s, &c);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn bert_rounding() {
        assert_eq!(bert_mask_count(0.15, 12), 2);
        assert_eq!(bert_mask_count(1.0, 12), 12);
        assert_eq!(bert_mask_count(0.125, 4), 1);
        assert_eq!(bert_mask_count(0.1, 4), 0);
    }

    #[test]
    fn adamw_descends_on_a_quadratic() {
        let mcfg = ModelConfig::compact(18, AttentionMode::Bidirectional);
        let mut params = ModelParams::<f64>::init(&mcfg, &mut crate::rng::seeded(0)).unwrap();
        params.tensors_mut()[0].data_mut()[0] = 1.0;
        let mut st = TrainState::new(params);
        let mut c = cfg();
        c.weight_decay = 0.0;
        let grads: Vec<Vec<f64>> = st
            .params
            .tensors()
            .iter()
            .map(|t| t.data().iter().map(|x| 2.0 * x).collect())
            .collect();
        adamw_update(&mut st, &grads, 0.1, &c);
        let x = st.params.tensors()[0].data()[0];
        assert!(x < 1.0 && x > 0.0, "{x}");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        assert!(c.validate().is_ok());
        c.warmup = c.steps + 1;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.objective = Objective::Arc;
        assert!(c.validate().is_err());
    }
}
