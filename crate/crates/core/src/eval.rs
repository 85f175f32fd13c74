//! Linear probing, masked-token accuracy, caption matching and caption
//! metrics.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autodiff::Graph;
use crate::diffusion::corrupt;
use crate::error::{Error, Result};
use crate::inference::{match_captions, ModelDenoiser, ScoreMethod};
use crate::model::{DecodeOptions, Image, ModelParams};
use crate::rng::{seeded, stream_rng, Stream};
use crate::scalar::Scalar;
use crate::synth::{split_indices, NegativeKind, Record};
use crate::vocab::{content_len, TokenId, MASK};
#[cfg(not(feature = "std"))]
use num_traits::Float;

const EVAL_CHUNK: usize = 64;

/// Globally average-pooled encoder features, one row per image.
pub fn gap_features<T: Scalar>(params: &ModelParams<T>, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
    let m = params.config().encoder.num_patches();
    let d = params.config().encoder.dim;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let v = bound.encode(&mut g, chunk)?;
        for feats in g.value(v).data().chunks(m * d) {
            let mut pooled = vec![0.0; d];
            for row in feats.chunks(d) {
                pooled.iter_mut().zip(row).for_each(|(p, &x)| *p += x.as_f64());
            }
            pooled.iter_mut().for_each(|p| *p /= m as f64);
            out.push(pooled);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub train_fraction: f64,
    pub seed: u64,
    /// Z-score features with training-split statistics before fitting.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 10,
            batch_size: 64,
            lr: 0.1,
            train_fraction: 0.8,
            seed: 0,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub train_size: usize,
    pub test_size: usize,
}

/// Softmax regression trained by minibatch SGD on a seeded split; reports
/// held-out accuracy.
pub fn linear_probe(features: &[Vec<f64>], labels: &[u32], num_classes: usize, cfg: &ProbeConfig) -> Result<ProbeResult> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::invalid("features and labels must be non-empty and aligned"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= num_classes) {
        return Err(Error::invalid(format!("label {l} >= number of classes {num_classes}")));
    }
    let (train, test) = split_indices(features.len(), cfg.train_fraction, cfg.seed);
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("probe split leaves an empty side"));
    }
    let first = labels[train[0]];
    if train.iter().all(|&i| labels[i] == first) {
        return Err(Error::invalid("probe training split contains a single class"));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::invalid("ragged feature rows"));
    }
    let (mut mean, mut scale) = (vec![0.0; d], vec![1.0; d]);
    if cfg.standardize {
        let n = train.len() as f64;
        for &i in &train {
            mean.iter_mut().zip(&features[i]).for_each(|(m, x)| *m += x / n);
        }
        let mut var = vec![0.0; d];
        for &i in &train {
            for j in 0..d {
                var[j] += (features[i][j] - mean[j]).powi(2) / n;
            }
        }
        scale = var.iter().map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 }).collect();
    }
    let x = |i: usize| -> Vec<f64> { (0..d).map(|j| (features[i][j] - mean[j]) * scale[j]).collect() };
    let xs: Vec<Vec<f64>> = (0..features.len()).map(x).collect();

    let k = num_classes;
    let mut w = vec![0.0; d * k];
    let mut b = vec![0.0; k];
    let mut rng = stream_rng(cfg.seed, Stream::Probe, 0);
    let mut order = train.clone();
    let mut logits = vec![0.0; k];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut gw = vec![0.0; d * k];
            let mut gb = vec![0.0; k];
            for &i in batch {
                forward(&w, &b, &xs[i], &mut logits);
                softmax_in_place(&mut logits);
                logits[labels[i] as usize] -= 1.0;
                for (c, &gl) in logits.iter().enumerate() {
                    gb[c] += gl;
                    for j in 0..d {
                        gw[j * k + c] += xs[i][j] * gl;
                    }
                }
            }
            let step = cfg.lr / batch.len() as f64;
            w.iter_mut().zip(&gw).for_each(|(p, g)| *p -= step * g);
            b.iter_mut().zip(&gb).for_each(|(p, g)| *p -= step * g);
        }
    }
    let accuracy = |idx: &[usize]| {
        let mut logits = vec![0.0; k];
        let hits = idx
            .iter()
            .filter(|&&i| {
                forward(&w, &b, &xs[i], &mut logits);
                argmax(&logits) == labels[i] as usize
            })
            .count();
        hits as f64 / idx.len() as f64
    };
    Ok(ProbeResult {
        train_accuracy: accuracy(&train),
        test_accuracy: accuracy(&test),
        train_size: train.len(),
        test_size: test.len(),
    })
}

fn forward(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let k = b.len();
    out.copy_from_slice(b);
    for (j, &xj) in x.iter().enumerate() {
        for c in 0..k {
            out[c] += xj * w[j * k + c];
        }
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    v.iter_mut().for_each(|x| {
        *x = (*x - max).exp();
        sum += *x;
    });
    v.iter_mut().for_each(|x| *x /= sum);
}

fn argmax(v: &[f64]) -> usize {
    let mut bi = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[bi] {
            bi = i;
        }
    }
    bi
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedAccuracy {
    pub t: f64,
    pub visual: bool,
    pub correct: usize,
    pub total: usize,
}

impl MaskedAccuracy {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Argmax accuracy at masked positions after corrupting each caption at
/// every `t` in the grid. With `visual` false the decoder runs without
/// cross-attention (the text-only shortcut probe).
pub fn masked_accuracy<T: Scalar>(
    params: &ModelParams<T>,
    images: &[&Image],
    captions: &[&[TokenId]],
    t_grid: &[f64],
    visual: bool,
    seed: u64,
) -> Result<Vec<MaskedAccuracy>> {
    if images.len() != captions.len() {
        return Err(Error::shape("masked_accuracy", &[images.len()], &[captions.len()]));
    }
    let k = params.config().decoder.vocab;
    let opts = DecodeOptions {
        mode: params.config().decoder.mode,
        visual,
    };
    let mut out = Vec::with_capacity(t_grid.len());
    for (ti, &t) in t_grid.iter().enumerate() {
        let mut rng = stream_rng(seed, Stream::Corruption, ti as u64);
        let mut acc = MaskedAccuracy {
            t,
            visual,
            correct: 0,
            total: 0,
        };
        for (imgs, caps) in images.chunks(EVAL_CHUNK).zip(captions.chunks(EVAL_CHUNK)) {
            let n = caps[0].len();
            let mut rows = Vec::with_capacity(caps.len() * n);
            let mut targets = Vec::new();
            for (b, cap) in caps.iter().enumerate() {
                if cap.len() != n {
                    return Err(Error::invalid("captions must share one padded length"));
                }
                let mc = corrupt(cap, t, &mut rng)?;
                targets.extend(mc.targets().map(|(i, tok)| (b * n + i, tok)));
                rows.extend_from_slice(&mc.tokens);
            }
            if targets.is_empty() {
                continue;
            }
            let mut g = Graph::new();
            let bound = params.bind(&mut g, false);
            let mem = bound.encode(&mut g, imgs)?;
            let logits = bound.decode(&mut g, &rows, caps.len(), mem, opts)?;
            let data = g.value(logits).data();
            for (row, tok) in targets {
                let r: Vec<f64> = data[row * k..(row + 1) * k].iter().map(|v| v.as_f64()).collect();
                acc.total += 1;
                acc.correct += usize::from(argmax(&r) == tok as usize);
            }
        }
        out.push(acc);
    }
    Ok(out)
}

/// Accuracy on `test` content positions of the best predictor that sees
/// only the caption length and the position (majority token per
/// `(length, position)` in `train`, falling back to the overall majority).
/// This is what a model can reach with every content token masked and no
/// image.
pub fn length_position_baseline(train: &[&[TokenId]], test: &[&[TokenId]]) -> f64 {
    let mut counts: BTreeMap<(usize, usize, TokenId), usize> = BTreeMap::new();
    let mut overall: BTreeMap<TokenId, usize> = BTreeMap::new();
    for cap in train {
        let len = content_len(cap);
        for (i, &tok) in cap[..len].iter().enumerate() {
            *counts.entry((len, i, tok)).or_default() += 1;
            *overall.entry(tok).or_default() += 1;
        }
    }
    let fallback = overall.iter().max_by_key(|(tok, c)| (**c, core::cmp::Reverse(**tok))).map(|(t, _)| *t);
    let mut majority: BTreeMap<(usize, usize), (usize, TokenId)> = BTreeMap::new();
    for (&(len, i, tok), &c) in &counts {
        let e = majority.entry((len, i)).or_insert((c, tok));
        if c > e.0 {
            *e = (c, tok);
        }
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for cap in test {
        let len = content_len(cap);
        for (i, &tok) in cap[..len].iter().enumerate() {
            let guess = majority.get(&(len, i)).map(|e| e.1).or(fallback);
            hits += usize::from(guess == Some(tok));
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// One true-versus-negative decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchDecision {
    pub record: usize,
    pub kind: NegativeKind,
    pub true_score: f64,
    pub negative_score: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositionReport {
    pub method: ScoreMethod,
    pub decisions: Vec<MatchDecision>,
}

impl CompositionReport {
    /// `(correct, total)` per negative type.
    pub fn per_kind(&self) -> BTreeMap<NegativeKind, (usize, usize)> {
        let mut m = BTreeMap::new();
        for d in &self.decisions {
            let e: &mut (usize, usize) = m.entry(d.kind).or_default();
            e.0 += usize::from(d.correct);
            e.1 += 1;
        }
        m
    }

    pub fn accuracy(&self, kind: NegativeKind) -> Option<f64> {
        self.per_kind().get(&kind).map(|&(c, n)| c as f64 / n as f64)
    }
}

/// Runs `match_captions(image, [true, negative])` for every record and each
/// requested negative type it has. The true caption wins ties.
pub fn compositionality_eval<T: Scalar>(
    params: &ModelParams<T>,
    records: &[Record],
    kinds: &[NegativeKind],
    method: ScoreMethod,
    samples: usize,
    seed: u64,
) -> Result<CompositionReport> {
    let mut decisions = Vec::new();
    for (ri, rec) in records.iter().enumerate() {
        let image = rec.image()?;
        let mut model = ModelDenoiser::new(params, &image)?;
        for &kind in kinds {
            let Some(neg) = rec.negatives.get(&kind) else { continue };
            let mut rng = stream_rng(seed, Stream::MonteCarlo, (ri * NegativeKind::ALL.len() + kind as usize) as u64);
            let (best, scores) = match_captions(&mut model, &[&rec.caption, neg], method, samples, &mut rng)?;
            decisions.push(MatchDecision {
                record: ri,
                kind,
                true_score: scores[0],
                negative_score: scores[1],
                correct: best == 0,
            });
        }
    }
    Ok(CompositionReport { method, decisions })
}

/// Fraction of paired decisions on which two reports agree.
pub fn decision_agreement(a: &CompositionReport, b: &CompositionReport) -> Result<f64> {
    if a.decisions.len() != b.decisions.len() || a.decisions.is_empty() {
        return Err(Error::invalid("reports cover different decision sets"));
    }
    let mut same = 0;
    for (x, y) in a.decisions.iter().zip(&b.decisions) {
        if (x.record, x.kind) != (y.record, y.kind) {
            return Err(Error::invalid("reports cover different decision sets"));
        }
        same += usize::from(x.correct == y.correct);
    }
    Ok(same as f64 / a.decisions.len() as f64)
}

/// Baseline matcher that ignores the model: a fair coin per decision.
pub fn random_match_accuracy(decisions: usize, seed: u64) -> f64 {
    use rand::Rng;
    let mut rng = seeded(seed);
    let hits = (0..decisions).filter(|_| rng.gen_bool(0.5)).count();
    hits as f64 / decisions.max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaptionMetrics {
    pub exact: bool,
    pub token_f1: f64,
}

/// Exact sequence match and bag-of-tokens F1 on unpadded sequences.
pub fn caption_metrics(predicted: &[TokenId], reference: &[TokenId]) -> Result<CaptionMetrics> {
    if reference.is_empty() {
        return Err(Error::invalid("empty reference caption"));
    }
    if predicted.contains(&MASK) {
        return Err(Error::invalid("predicted caption still contains masks"));
    }
    let mut bag: BTreeMap<TokenId, usize> = BTreeMap::new();
    reference.iter().for_each(|&t| *bag.entry(t).or_default() += 1);
    let mut overlap = 0;
    for t in predicted {
        if let Some(c) = bag.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    let token_f1 = if overlap == 0 {
        0.0
    } else {
        let p = overlap as f64 / predicted.len() as f64;
        let r = overlap as f64 / reference.len() as f64;
        2.0 * p * r / (p + r)
    };
    Ok(CaptionMetrics {
        exact: predicted == reference,
        token_f1,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub probe: Option<ProbeResult>,
    pub masked: Vec<MaskedAccuracy>,
    /// `(method, negative type) -> accuracy`.
    pub matching: BTreeMap<(ScoreMethod, NegativeKind), f64>,
    pub caption_exact: Option<f64>,
    pub caption_f1: Option<f64>,
}

impl EvalReport {
    pub fn accuracies_in_unit_interval(&self) -> bool {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        self.probe.is_none_or(|p| ok(p.test_accuracy) && ok(p.train_accuracy))
            && self.masked.iter().all(|m| ok(m.accuracy()))
            && self.matching.values().all(|&v| ok(v))
            && self.caption_exact.is_none_or(ok)
            && self.caption_f1.is_none_or(ok)
    }
}

/// Held-out probe on records, using the records' probe labels.
pub fn probe_records<T: Scalar>(params: &ModelParams<T>, records: &[Record], cfg: &ProbeConfig) -> Result<ProbeResult> {
    let images = records.iter().map(|r| r.image()).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Image> = images.iter().collect();
    let feats = gap_features(params, &refs)?;
    let labels: Vec<u32> = records.iter().map(|r| r.label).collect();
    linear_probe(&feats, &labels, crate::synth::NUM_CLASSES, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_arithmetic() {
        let m = caption_metrics(&[4, 5, 6, 7], &[4, 5, 6, 7]).unwrap();
        assert!(m.exact && m.token_f1 == 1.0);
        assert_eq!(caption_metrics(&[4, 5], &[6, 7]).unwrap().token_f1, 0.0);
        let m = caption_metrics(&[4, 5, 6, 8], &[4, 5, 6, 7]).unwrap();
        assert!(!m.exact && (m.token_f1 - 0.75).abs() < 1e-15);
        assert!(caption_metrics(&[4], &[]).is_err());
    }

    #[test]
    fn one_hot_features_probe_perfectly() {
        let labels: Vec<u32> = (0..800).map(|i| (i * 7 % 16) as u32).collect();
        let feats: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..16).map(|j| if j == l as usize { 1.0 } else { 0.0 }).collect())
            .collect();
        let r = linear_probe(&feats, &labels, 16, &ProbeConfig::default()).unwrap();
        assert_eq!(r.test_accuracy, 1.0);
        let again = linear_probe(&feats, &labels, 16, &ProbeConfig::default()).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn single_class_probe_is_an_error() {
        let feats = vec![vec![1.0, 2.0]; 50];
        assert!(linear_probe(&feats, &[3; 50], 16, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn baseline_uses_length_and_position() {
        let a: &[TokenId] = &[4, 5, 6, 7, 0];
        let b: &[TokenId] = &[4, 5, 8, 7, 0];
        let acc = length_position_baseline(&[a, a, b], &[b]);
        assert!((acc - 0.75).abs() < 1e-15);
    }

    #[test]
    fn coin_flip_matcher_is_near_half() {
        let acc = random_match_accuracy(500, 3);
        let sigma = (0.25f64 / 500.0).sqrt();
        assert!((acc - 0.5).abs() < 3.0 * sigma, "{acc}");
    }
}
