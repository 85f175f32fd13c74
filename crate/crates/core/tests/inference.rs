use mdc_core::error::{Error, Result};
use mdc_core::gradsuite::tiny_config;
use mdc_core::inference::{
    arc_loglik, best_index, elbo_exact, elbo_mc, generate, generate_with, heuristic_score, match_captions, Denoiser,
    ModelDenoiser, ScoreMethod, MAX_EXACT_LEN,
};
use mdc_core::model::{AttentionMode, Image};
use mdc_core::rng::{seeded, splitmix64};
use mdc_core::train::{train, Dataset, Objective, Precision, TrainConfig, TrainState};
use mdc_core::vocab::{TokenId, MASK, PAD};
use rand::Rng;

/// Context-dependent toy denoiser: each position's distribution depends on
/// its neighbours and on how many positions are masked.
struct Toy {
    k: usize,
    max_len: usize,
    calls: usize,
}

impl Toy {
    fn new() -> Self {
        Toy { k: 9, max_len: 16, calls: 0 }
    }
}

impl Denoiser for Toy {
    fn vocab_size(&self) -> usize {
        self.k
    }
    fn max_len(&self) -> usize {
        self.max_len
    }
    fn log_probs(&mut self, rows: &[TokenId], batch: usize) -> Result<Vec<f64>> {
        self.calls += 1;
        let n = rows.len() / batch;
        let mut out = Vec::with_capacity(rows.len() * self.k);
        for row in rows.chunks(n) {
            let masked = row.iter().filter(|&&t| t == MASK).count() as u64;
            for i in 0..n {
                let left = if i > 0 { row[i - 1] as u64 } else { 99 };
                let right = if i + 1 < n { row[i + 1] as u64 } else { 99 };
                let key = splitmix64((i as u64) << 32 ^ left << 16 ^ right << 8 ^ masked);
                let logits: Vec<f64> = (0..self.k as u64).map(|j| (splitmix64(key ^ j) % 1000) as f64 / 250.0).collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
                out.extend(logits.iter().map(|l| l - lse));
            }
        }
        Ok(out)
    }
}

/// Input-independent distributions.
struct Fixed(Vec<Vec<f64>>);

impl Denoiser for Fixed {
    fn vocab_size(&self) -> usize {
        self.0[0].len()
    }
    fn max_len(&self) -> usize {
        self.0.len()
    }
    fn log_probs(&mut self, rows: &[TokenId], batch: usize) -> Result<Vec<f64>> {
        let n = rows.len() / batch;
        Ok((0..batch).flat_map(|_| self.0[..n].iter().flatten().copied()).collect())
    }
}

/// Gauss-Legendre nodes and weights on [0, 1].
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    (1..=n)
        .map(|i| {
            let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                x -= p1 / dp;
            }
            ((1.0 - x) / 2.0, 1.0 / ((1.0 - x * x) * dp * dp))
        })
        .collect()
}

/// Continuous-time bound by quadrature over t:
/// integral of (1/t) * sum over subsets of t^n (1-t)^(N-n) * sum_masked log p.
fn quadrature_bound(model: &mut dyn Denoiser, caption: &[TokenId]) -> f64 {
    let n_tok = caption.len();
    let k = model.vocab_size();
    let mut by_subset = Vec::new();
    for s in 1u32..1 << n_tok {
        let row: Vec<TokenId> = (0..n_tok).map(|i| if s >> i & 1 == 1 { MASK } else { caption[i] }).collect();
        let lp = model.log_probs(&row, 1).unwrap();
        let sum: f64 = (0..n_tok).filter(|&i| s >> i & 1 == 1).map(|i| lp[i * k + caption[i] as usize]).sum();
        by_subset.push((s.count_ones() as i32, sum));
    }
    gauss_legendre(12)
        .iter()
        .map(|&(t, w)| {
            w * by_subset
                .iter()
                .map(|&(m, v)| t.powi(m - 1) * (1.0 - t).powi(n_tok as i32 - m) * v)
                .sum::<f64>()
        })
        .sum()
}

fn random_caption(len: usize, seed: u64) -> Vec<TokenId> {
    let mut rng = seeded(seed);
    (0..len).map(|_| rng.gen_range(4..9)).collect()
}

#[test]
fn exact_bound_matches_quadrature_oracle() {
    for (len, seed) in [(1, 0), (2, 1), (4, 2), (7, 3), (MAX_EXACT_LEN, 4)] {
        let cap = random_caption(len, seed);
        let exact = elbo_exact(&mut Toy::new(), &cap).unwrap();
        let oracle = quadrature_bound(&mut Toy::new(), &cap);
        assert!((exact.value - oracle).abs() < 1e-10 * oracle.abs(), "N={len}: {} vs {oracle}", exact.value);
        let total: f64 = exact.contributions.iter().sum();
        assert!((total - exact.value).abs() < 1e-12);
    }
}

#[test]
fn input_independent_model_makes_all_scores_agree() {
    let mut rng = seeded(3);
    let table: Vec<Vec<f64>> = (0..5)
        .map(|_| {
            let p: Vec<f64> = (0..7).map(|_| rng.gen::<f64>() + 0.05).collect();
            let z: f64 = p.iter().sum();
            p.iter().map(|x| (x / z).ln()).collect()
        })
        .collect();
    let cap: Vec<TokenId> = vec![4, 6, 5, 4, 6];
    let direct: f64 = cap.iter().enumerate().map(|(i, &c)| table[i][c as usize]).sum();
    let mut m = Fixed(table);
    for v in [
        elbo_exact(&mut m, &cap).unwrap().value,
        heuristic_score(&mut m, &cap).unwrap().value,
        arc_loglik(&mut m, &cap).unwrap().value,
    ] {
        assert!((v - direct).abs() < 1e-10, "{v} vs {direct}");
    }
    // Per-sample values still vary with the number masked; only the mean agrees.
    let mc = elbo_mc(&mut m, &cap, 2000, &mut seeded(1)).unwrap();
    assert!((mc.value - direct).abs() <= 4.0 * mc.std_error);
}

#[test]
fn monte_carlo_agrees_with_exact_within_standard_errors() {
    for seed in 0..10 {
        let cap = random_caption(3 + seed as usize % 6, seed);
        let exact = elbo_exact(&mut Toy::new(), &cap).unwrap().value;
        let mc = elbo_mc(&mut Toy::new(), &cap, 2048, &mut seeded(100 + seed)).unwrap();
        assert!(mc.std_error > 0.0);
        assert!((mc.value - exact).abs() <= 4.0 * mc.std_error, "seed {seed}: {} +- {} vs {exact}", mc.value, mc.std_error);
    }
}

#[test]
fn monte_carlo_is_unbiased_over_replications() {
    let cap = random_caption(6, 42);
    let exact = elbo_exact(&mut Toy::new(), &cap).unwrap().value;
    let reps = 200;
    let est: Vec<f64> = (0..reps)
        .map(|r| elbo_mc(&mut Toy::new(), &cap, 64, &mut seeded(1000 + r)).unwrap().value)
        .collect();
    let mean = est.iter().sum::<f64>() / reps as f64;
    let sd = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
    let se = sd / (reps as f64).sqrt();
    assert!((mean - exact).abs() <= 4.0 * se, "{mean} +- {se} vs {exact}");
}

#[test]
fn standard_error_shrinks_like_inverse_root_samples() {
    let cap = random_caption(8, 7);
    let small = elbo_mc(&mut Toy::new(), &cap, 256, &mut seeded(1)).unwrap().std_error;
    let large = elbo_mc(&mut Toy::new(), &cap, 4096, &mut seeded(2)).unwrap().std_error;
    let ratio = small / large;
    assert!((3.2..4.8).contains(&ratio), "ratio {ratio}, expected about 4");
}

#[test]
fn single_token_scores_coincide_exactly() {
    for tok in 4..9 {
        let cap = [tok];
        let exact = elbo_exact(&mut Toy::new(), &cap).unwrap().value;
        let heur = heuristic_score(&mut Toy::new(), &cap).unwrap().value;
        let mc = elbo_mc(&mut Toy::new(), &cap, 37, &mut seeded(tok as u64)).unwrap();
        assert_eq!(exact.to_bits(), heur.to_bits());
        assert_eq!(exact.to_bits(), mc.value.to_bits());
        assert_eq!(mc.std_error, 0.0);
    }
}

#[test]
fn heuristic_and_decoding_use_one_pass_per_token() {
    for len in [1, 4, 9] {
        let cap = random_caption(len, len as u64);
        let mut m = Toy::new();
        heuristic_score(&mut m, &cap).unwrap();
        assert_eq!(m.calls, len);
        let mut m = Toy::new();
        let mut steps = Vec::new();
        let out = generate_with(&mut m, len, |s| steps.push(s.step)).unwrap();
        assert_eq!(m.calls, len);
        assert_eq!(steps, (1..=len).collect::<Vec<_>>());
        assert!(!out.contains(&MASK));
    }
}

#[test]
fn decoding_edge_cases() {
    assert!(generate(&mut Toy::new(), 0).unwrap().is_empty());
    assert!(generate(&mut Toy::new(), 17).is_err());
    let a = generate(&mut Toy::new(), 12).unwrap();
    assert_eq!(a, generate(&mut Toy::new(), 12).unwrap());
}

#[test]
fn scorer_input_contracts() {
    let long = random_caption(MAX_EXACT_LEN + 1, 0);
    assert!(matches!(elbo_exact(&mut Toy::new(), &long), Err(Error::Refused(_))));
    assert!(elbo_exact(&mut Toy::new(), &[4, MASK]).is_err());
    assert!(elbo_mc(&mut Toy::new(), &[4, 5], 0, &mut seeded(0)).is_err());
    assert!(elbo_mc(&mut Toy::new(), &[PAD, PAD], 8, &mut seeded(0)).is_err());
    assert!(heuristic_score(&mut Toy::new(), &[4, PAD, 5]).is_err());
    // Trailing padding is stripped.
    let a = elbo_exact(&mut Toy::new(), &[4, 5, 6]).unwrap().value;
    let b = elbo_exact(&mut Toy::new(), &[4, 5, 6, PAD, PAD]).unwrap().value;
    assert_eq!(a, b);
}

#[test]
fn best_index_prefers_lowest_on_ties_and_rejects_nan() {
    assert_eq!(best_index(&[1.0, 3.0, 3.0]).unwrap(), 1);
    assert_eq!(best_index(&[-2.0]).unwrap(), 0);
    assert!(best_index(&[]).is_err());
    assert!(best_index(&[0.0, f64::NAN]).is_err());
}

#[test]
fn trained_model_prefers_memorised_captions() {
    let mut rng = seeded(5);
    let images: Vec<Image> = (0..2)
        .map(|_| Image::new(8, 8, (0..8 * 8 * 3).map(|_| rng.gen::<f32>()).collect()).unwrap())
        .collect();
    let captions: Vec<Vec<TokenId>> = vec![vec![4, 5, 6, 7, PAD, PAD], vec![7, 6, 5, 4, PAD, PAD]];
    let data = Dataset { images, captions };
    for objective in [Objective::Mdc, Objective::Arc] {
        let mut cfg = TrainConfig::new(objective, tiny_config(objective.mode()));
        cfg.batch_size = 4;
        cfg.steps = 1000;
        cfg.warmup = 20;
        cfg.lr = 1e-2;
        cfg.weight_decay = 0.0;
        cfg.precision = Precision::F64;
        let mut st = TrainState::<f64>::init(&cfg).unwrap();
        train(&mut st, &cfg, &data, |_, _| Ok(())).unwrap();
        let cands: Vec<&[TokenId]> = data.captions.iter().map(|c| c.as_slice()).collect();
        let methods: &[ScoreMethod] = match objective {
            Objective::Arc => &[ScoreMethod::Arc],
            _ => &[ScoreMethod::ElboExact, ScoreMethod::ElboMc, ScoreMethod::Heuristic],
        };
        for (i, img) in data.images.iter().enumerate() {
            let mut m = ModelDenoiser::new(&st.params, img).unwrap();
            assert_eq!(m.mode(), objective.mode());
            for &method in methods {
                let (best, scores) = match_captions(&mut m, &cands, method, 256, &mut seeded(9)).unwrap();
                assert_eq!(best, i, "{objective} {}: {scores:?}", method.name());
            }
            if objective == Objective::Mdc {
                assert_eq!(generate(&mut m, 4).unwrap(), data.captions[i][..4]);
            }
        }
    }
}

#[test]
fn model_denoiser_counts_passes_and_ignores_batching() {
    let cfg = tiny_config(AttentionMode::Bidirectional);
    let params = mdc_core::model::ModelParams::<f64>::init(&cfg, &mut seeded(1)).unwrap();
    let img = Image::zeros(8, 8);
    let mut m = ModelDenoiser::new(&params, &img).unwrap();
    let rows: Vec<TokenId> = vec![4, MASK, 6, MASK, MASK, 5];
    let both = m.log_probs(&rows, 2).unwrap();
    let first = m.log_probs(&rows[..3], 1).unwrap();
    let second = m.log_probs(&rows[3..], 1).unwrap();
    assert_eq!(m.passes(), 3);
    let k = cfg.decoder.vocab;
    for (a, b) in both.iter().zip(first.iter().chain(&second)) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(both.len(), 6 * k);
}
