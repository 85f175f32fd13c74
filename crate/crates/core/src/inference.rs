//! Confidence-ordered caption generation and caption scoring.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::diffusion::{corrupt, log_softmax};
use crate::error::{Error, Result};
use crate::model::{AttentionMode, Bound, DecodeOptions, Image, ModelParams};
use crate::scalar::Scalar;
use crate::vocab::{content_len, TokenId, MASK, PAD};
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Anything that maps token rows to per-position log-probabilities.
pub trait Denoiser {
    fn vocab_size(&self) -> usize;
    fn max_len(&self) -> usize;
    /// `batch` rows of equal length `n`, flattened; returns `batch * n * K`
    /// log-probabilities.
    fn log_probs(&mut self, rows: &[TokenId], batch: usize) -> Result<Vec<f64>>;
}

/// A trained model conditioned on one image. The image is encoded once;
/// each query reuses the encoder part of the tape.
pub struct ModelDenoiser<'a, T: Scalar> {
    bound: Bound<'a, T>,
    graph: Graph<T>,
    memory: Var,
    base: usize,
    opts: DecodeOptions,
    passes: usize,
}

impl<'a, T: Scalar> ModelDenoiser<'a, T> {
    pub fn new(params: &'a ModelParams<T>, image: &Image) -> Result<Self> {
        let mode = params.config().decoder.mode;
        Self::with_options(params, image, DecodeOptions::new(mode))
    }

    pub fn with_options(params: &'a ModelParams<T>, image: &Image, opts: DecodeOptions) -> Result<Self> {
        let mut graph = Graph::new();
        let bound = params.bind(&mut graph, false);
        let memory = bound.encode(&mut graph, &[image])?;
        let base = graph.len();
        Ok(ModelDenoiser {
            bound,
            graph,
            memory,
            base,
            opts,
            passes: 0,
        })
    }

    pub fn mode(&self) -> AttentionMode {
        self.opts.mode
    }

    /// Decoder invocations so far (one per `log_probs` call).
    pub fn passes(&self) -> usize {
        self.passes
    }
}

impl<T: Scalar> Denoiser for ModelDenoiser<'_, T> {
    fn vocab_size(&self) -> usize {
        self.bound.config().decoder.vocab
    }

    fn max_len(&self) -> usize {
        self.bound.config().decoder.max_len
    }

    fn log_probs(&mut self, rows: &[TokenId], batch: usize) -> Result<Vec<f64>> {
        self.graph.truncate(self.base);
        self.passes += 1;
        let logits = self.bound.decode(&mut self.graph, rows, batch, self.memory, self.opts)?;
        let k = self.vocab_size();
        let mut out = Vec::with_capacity(rows.len() * k);
        let mut row = vec![0.0f64; k];
        for chunk in self.graph.value(logits).data().chunks(k) {
            row.iter_mut().zip(chunk).for_each(|(r, &c)| *r = c.as_f64());
            out.extend(log_softmax(&row));
        }
        Ok(out)
    }
}

/// Snapshot of greedy decoding after `step` reveals.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    pub tokens: Vec<TokenId>,
    pub revealed: Vec<bool>,
    pub step: usize,
    /// Max softmax probability at still-masked positions from the last
    /// decoder pass; `None` at revealed positions.
    pub confidence: Vec<Option<f64>>,
}

/// Most confident masked position (lowest index on ties) with its argmax
/// token and probability. `lp` holds `n * K` log-probabilities.
fn most_confident(lp: &[f64], k: usize, candidates: impl Iterator<Item = usize>) -> Option<(usize, TokenId, f64)> {
    let mut best: Option<(usize, TokenId, f64)> = None;
    for i in candidates {
        let (tok, p) = argmax(&lp[i * k..(i + 1) * k]);
        if best.is_none_or(|(_, _, bp)| p > bp) {
            best = Some((i, tok, p));
        }
    }
    best
}

/// Largest entry (lowest index on ties) as `(index, exp(value))`. The
/// mask token is never a prediction.
fn argmax(row: &[f64]) -> (TokenId, f64) {
    let mut bi = if MASK == 0 { 1 } else { 0 };
    for (j, &v) in row.iter().enumerate() {
        if j != MASK as usize && v > row[bi] {
            bi = j;
        }
    }
    (bi as TokenId, row[bi].exp())
}

/// Greedy confidence-ordered unmasking to a caption of exactly `length`
/// tokens. `observe` sees the state after every reveal.
pub fn generate_with<D: Denoiser + ?Sized>(
    model: &mut D,
    length: usize,
    mut observe: impl FnMut(&DecodeState),
) -> Result<Vec<TokenId>> {
    if length > model.max_len() {
        return Err(Error::invalid(format!(
            "target length {length} exceeds the maximum caption length {}",
            model.max_len()
        )));
    }
    let k = model.vocab_size();
    let mut st = DecodeState {
        tokens: vec![MASK; length],
        revealed: vec![false; length],
        step: 0,
        confidence: vec![None; length],
    };
    while st.step < length {
        let lp = model.log_probs(&st.tokens, 1)?;
        for i in 0..length {
            st.confidence[i] = (!st.revealed[i]).then(|| argmax(&lp[i * k..(i + 1) * k]).1);
        }
        let masked = (0..length).filter(|&i| !st.revealed[i]);
        let (pos, tok, _) = most_confident(&lp, k, masked).expect("a masked position remains");
        st.tokens[pos] = tok;
        st.revealed[pos] = true;
        st.confidence[pos] = None;
        st.step += 1;
        observe(&st);
    }
    Ok(st.tokens)
}

pub fn generate<D: Denoiser + ?Sized>(model: &mut D, length: usize) -> Result<Vec<TokenId>> {
    generate_with(model, length, |_| {})
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScoreMethod {
    Arc,
    ElboMc,
    ElboExact,
    Heuristic,
}

impl ScoreMethod {
    pub const ALL: [ScoreMethod; 4] = [ScoreMethod::Arc, ScoreMethod::ElboMc, ScoreMethod::ElboExact, ScoreMethod::Heuristic];

    pub fn name(self) -> &'static str {
        match self {
            ScoreMethod::Arc => "arc",
            ScoreMethod::ElboMc => "elbo_mc",
            ScoreMethod::ElboExact => "elbo_exact",
            ScoreMethod::Heuristic => "heuristic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}; valid: arc | elbo_mc | elbo_exact | heuristic")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub method: ScoreMethod,
    pub value: f64,
    /// Accepted Monte-Carlo samples (0 for deterministic methods).
    pub samples: usize,
    /// Monte-Carlo standard error (0 for deterministic methods).
    pub std_error: f64,
    /// Per-position terms; they sum to `value`.
    pub contributions: Vec<f64>,
}

pub const MAX_EXACT_LEN: usize = 10;
pub const DEFAULT_MC_SAMPLES: usize = 1024;
const MC_CHUNK: usize = 256;

fn content(caption: &[TokenId]) -> Result<&[TokenId]> {
    let n = content_len(caption);
    if caption[n..].iter().any(|&t| t != PAD) {
        return Err(Error::invalid("caption must be content followed by padding"));
    }
    if caption[..n].contains(&MASK) {
        return Err(Error::invalid("caption to score contains the mask token"));
    }
    Ok(&caption[..n])
}

/// Autoregressive log-likelihood: sum over caption tokens of
/// `log p(c_i | c_<i, image)`. Needs a causal model.
pub fn arc_loglik<D: Denoiser + ?Sized>(model: &mut D, caption: &[TokenId]) -> Result<ScoreReport> {
    let c = content(caption)?;
    let k = model.vocab_size();
    let contributions: Vec<f64> = if c.is_empty() {
        Vec::new()
    } else {
        let lp = model.log_probs(c, 1)?;
        c.iter().enumerate().map(|(i, &tok)| lp[i * k + tok as usize]).collect()
    };
    Ok(ScoreReport {
        method: ScoreMethod::Arc,
        value: contributions.iter().sum(),
        samples: 0,
        std_error: 0.0,
        contributions,
    })
}

/// Sum over masked positions of the log-probability of the true token.
fn masked_terms(lp: &[f64], k: usize, caption: &[TokenId], masked: &[bool], out: &mut [f64], scale: f64) {
    for (i, (&m, &tok)) in masked.iter().zip(caption).enumerate() {
        if m {
            out[i] += scale * lp[i * k + tok as usize];
        }
    }
}

/// Monte-Carlo estimate of the masked-diffusion lower bound.
///
/// Each sample draws `t ~ U(0, 1)`, masks positions independently with
/// probability `t` and is rejected when nothing is masked; the realised
/// count `n` is then uniform on `1..=N` and the subset uniform given `n`,
/// so `N / n * sum(masked log p)` is an unbiased estimate of
/// `sum_n mean_{|C| = n} (1/n) sum_{i in C} log p(c_i | C)`.
pub fn elbo_mc<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &mut D,
    caption: &[TokenId],
    samples: usize,
    rng: &mut R,
) -> Result<ScoreReport> {
    if samples == 0 {
        return Err(Error::invalid("elbo_mc needs at least one sample"));
    }
    let c = content(caption)?;
    let n_tok = c.len();
    if n_tok == 0 {
        return Err(Error::invalid("cannot score an empty caption"));
    }
    let k = model.vocab_size();
    let mut values = Vec::with_capacity(samples);
    let mut contributions = vec![0.0; n_tok];
    let mut per_pos = vec![0.0; n_tok];
    while values.len() < samples {
        let chunk = (samples - values.len()).min(MC_CHUNK);
        let mut rows = Vec::with_capacity(chunk * n_tok);
        let mut masks = Vec::with_capacity(chunk);
        while masks.len() < chunk {
            let t: f64 = rng.gen();
            let mc = corrupt(c, t, rng)?;
            if mc.num_masked() == 0 {
                continue;
            }
            rows.extend_from_slice(&mc.tokens);
            masks.push(mc.masked);
        }
        let lp = model.log_probs(&rows, chunk)?;
        for (b, masked) in masks.iter().enumerate() {
            let n = masked.iter().filter(|&&m| m).count();
            per_pos.iter_mut().for_each(|v| *v = 0.0);
            let scale = n_tok as f64 / n as f64;
            masked_terms(&lp[b * n_tok * k..(b + 1) * n_tok * k], k, c, masked, &mut per_pos, scale);
            values.push(per_pos.iter().sum::<f64>());
            contributions.iter_mut().zip(&per_pos).for_each(|(a, p)| *a += p);
        }
    }
    let s = samples as f64;
    contributions.iter_mut().for_each(|a| *a /= s);
    // Mean about the first sample, so identical samples average exactly.
    let x0 = values[0];
    let value = x0 + values.iter().map(|v| v - x0).sum::<f64>() / s;
    let std_error = if samples > 1 {
        let var = values.iter().map(|v| (v - value) * (v - value)).sum::<f64>() / (s - 1.0);
        (var / s).sqrt()
    } else {
        0.0
    };
    Ok(ScoreReport {
        method: ScoreMethod::ElboMc,
        value,
        samples,
        std_error,
        contributions,
    })
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Exact bound by enumerating all `2^N - 1` non-empty masking subsets.
/// Refuses captions longer than [`MAX_EXACT_LEN`].
pub fn elbo_exact<D: Denoiser + ?Sized>(model: &mut D, caption: &[TokenId]) -> Result<ScoreReport> {
    let c = content(caption)?;
    let n_tok = c.len();
    if n_tok == 0 {
        return Err(Error::invalid("cannot score an empty caption"));
    }
    if n_tok > MAX_EXACT_LEN {
        return Err(Error::Refused(format!(
            "elbo_exact enumerates 2^N subsets and is capped at N <= {MAX_EXACT_LEN}; caption has N = {n_tok}"
        )));
    }
    let k = model.vocab_size();
    let subsets: Vec<u32> = (1u32..1 << n_tok).collect();
    let mut contributions = vec![0.0; n_tok];
    for chunk in subsets.chunks(MC_CHUNK) {
        let mut rows = Vec::with_capacity(chunk.len() * n_tok);
        for &s in chunk {
            rows.extend((0..n_tok).map(|i| if s >> i & 1 == 1 { MASK } else { c[i] }));
        }
        let lp = model.log_probs(&rows, chunk.len())?;
        for (b, &s) in chunk.iter().enumerate() {
            let n = s.count_ones() as usize;
            let masked: Vec<bool> = (0..n_tok).map(|i| s >> i & 1 == 1).collect();
            let scale = 1.0 / (n as f64 * binomial(n_tok, n));
            masked_terms(&lp[b * n_tok * k..(b + 1) * n_tok * k], k, c, &masked, &mut contributions, scale);
        }
    }
    Ok(ScoreReport {
        method: ScoreMethod::ElboExact,
        value: contributions.iter().sum(),
        samples: 0,
        std_error: 0.0,
        contributions,
    })
}

/// `N` confidence-ordered steps from the fully masked caption, recording
/// the ground-truth log-probability at each chosen position and then
/// revealing the ground truth there.
pub fn heuristic_score<D: Denoiser + ?Sized>(model: &mut D, caption: &[TokenId]) -> Result<ScoreReport> {
    let c = content(caption)?;
    let n_tok = c.len();
    let k = model.vocab_size();
    let mut tokens = vec![MASK; n_tok];
    let mut contributions = vec![0.0; n_tok];
    for _ in 0..n_tok {
        let lp = model.log_probs(&tokens, 1)?;
        let masked = (0..n_tok).filter(|&i| tokens[i] == MASK);
        let (pos, _, _) = most_confident(&lp, k, masked).expect("a masked position remains");
        contributions[pos] = lp[pos * k + c[pos] as usize];
        tokens[pos] = c[pos];
    }
    Ok(ScoreReport {
        method: ScoreMethod::Heuristic,
        value: contributions.iter().sum(),
        samples: 0,
        std_error: 0.0,
        contributions,
    })
}

/// Scores one caption with `method`; `samples` and `rng` are used by the
/// Monte-Carlo method only.
pub fn score<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &mut D,
    caption: &[TokenId],
    method: ScoreMethod,
    samples: usize,
    rng: &mut R,
) -> Result<ScoreReport> {
    match method {
        ScoreMethod::Arc => arc_loglik(model, caption),
        ScoreMethod::ElboMc => elbo_mc(model, caption, samples, rng),
        ScoreMethod::ElboExact => elbo_exact(model, caption),
        ScoreMethod::Heuristic => heuristic_score(model, caption),
    }
}

/// Index of the highest score, lowest index on ties.
pub fn best_index(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::invalid("no candidates to match"));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("candidate {i} scored NaN")));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Picks the candidate caption the model finds most likely for its image.
pub fn match_captions<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &mut D,
    candidates: &[&[TokenId]],
    method: ScoreMethod,
    samples: usize,
    rng: &mut R,
) -> Result<(usize, Vec<f64>)> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidates to match"));
    }
    let scores = candidates
        .iter()
        .map(|c| score(model, c, method, samples, rng).map(|r| r.value))
        .collect::<Result<Vec<_>>>()?;
    Ok((best_index(&scores)?, scores))
}
