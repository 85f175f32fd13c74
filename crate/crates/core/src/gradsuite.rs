//! The finite-difference suite behind the `gradcheck` command: every
//! primitive on randomized shapes, plus the end-to-end batch loss of a
//! small model with respect to a random subset of its parameters.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{check_coordinates, gradcheck, AttentionSpec, Graph, Tensor, Var};
use crate::diffusion::NoiseSchedule;
use crate::error::Result;
use crate::model::{AttentionMode, DecoderConfig, EncoderConfig, Image, ModelConfig, ModelParams};
use crate::rng::{normal, seeded};
use crate::train::{batch_loss, prepare_batch, Objective};
use crate::vocab::{MASK, PAD};

pub const EPSILON: f64 = 1e-6;
/// Larger step for the full loss: its value is O(1) while some parameter
/// gradients are O(1e-6), so roundoff dominates at 1e-6.
pub const LOSS_EPSILON: f64 = 1e-5;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seeded(seed);
    Tensor::from_fn(shape, |_| normal(&mut rng))
}

fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let c = g.constant(randn(g.shape(out), seed ^ 0xC0FFEE));
    let p = g.mul(out, c)?;
    Ok(g.sum(p))
}

fn dims(seed: u64) -> (usize, usize, usize) {
    let mut rng = seeded(seed + 1000);
    (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6))
}

type Check = fn(u64) -> Result<f64>;

fn unary(s: u64, shape: &[usize], f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) -> Result<f64> {
    gradcheck(
        |g, x| {
            let y = f(g, x)?;
            project(g, y, s)
        },
        &randn(shape, s),
        EPSILON,
    )
}

fn attention_case(s: u64, which: usize, causal: bool, shared: bool) -> Result<f64> {
    let mut rng = seeded(s + 77);
    let batch = rng.gen_range(1..3);
    let heads = rng.gen_range(1..3);
    let q_len = rng.gen_range(2..5);
    let k_len = if causal { q_len } else { rng.gen_range(2..5) };
    let dim = heads * rng.gen_range(1..4);
    let key_rows = if shared { k_len } else { batch * k_len };
    let key_mask = (!causal).then(|| (0..key_rows).map(|i| i % k_len == 0 || rng.gen_bool(0.7)).collect());
    let spec = AttentionSpec {
        batch,
        heads,
        q_len,
        k_len,
        causal,
        key_mask,
        shared_kv: shared,
    };
    let ins = [
        randn(&[batch * q_len, dim], s + 10),
        randn(&[key_rows, dim], s + 11),
        randn(&[key_rows, dim], s + 12),
    ];
    gradcheck(
        |g, x| {
            let mut v = [0, 1, 2].map(|i| g.constant(ins[i].clone()));
            v[which] = x;
            let y = g.attention(v[0], v[1], v[2], spec.clone())?;
            project(g, y, s)
        },
        &ins[which],
        EPSILON,
    )
}

/// Named checks, each run per seed.
pub fn primitive_checks() -> Vec<(&'static str, Check)> {
    vec![
        ("matmul", |s| {
            let (n, k, m) = dims(s);
            let b = randn(&[k, m], s + 1);
            unary(s, &[2, n, k], |g, a| {
                let b = g.constant(b.clone());
                g.matmul(a, b)
            })
        }),
        ("matmul_rhs", |s| {
            let (n, k, m) = dims(s);
            let a = randn(&[n, k], s + 1);
            unary(s, &[k, m], |g, b| {
                let a = g.constant(a.clone());
                g.matmul(a, b)
            })
        }),
        ("add", |s| {
            let (n, m, _) = dims(s);
            let o = randn(&[n, m], s + 7);
            unary(s, &[n, m], |g, x| {
                let o = g.constant(o.clone());
                let y = g.add(x, o)?;
                g.mul(y, y)
            })
        }),
        ("add_row", |s| {
            let (n, m, _) = dims(s);
            let x0 = randn(&[n, m], s + 7);
            unary(s, &[m], |g, b| {
                let x = g.constant(x0.clone());
                g.add_row(x, b)
            })
        }),
        ("mul", |s| {
            let (n, m, _) = dims(s);
            let o = randn(&[n, m], s + 7);
            unary(s, &[n, m], |g, x| {
                let o = g.constant(o.clone());
                g.mul(x, o)
            })
        }),
        ("scale", |s| unary(s, &[5], |g, x| Ok(g.scale(x, -0.37)))),
        ("gelu", |s| {
            let (n, m, _) = dims(s);
            unary(s, &[n, m], |g, x| Ok(g.gelu(x)))
        }),
        ("softmax", |s| {
            let (n, m, _) = dims(s);
            unary(s, &[n, m + 1], |g, x| Ok(g.softmax(x)))
        }),
        ("mask_fill", |s| {
            let (n, m, _) = dims(s);
            let cols = m + 1;
            let keep: Vec<bool> = (0..n * cols).map(|i| i % cols == 0 || (i * 7 + s as usize) % 3 != 0).collect();
            unary(s, &[n, cols], |g, x| {
                let y = g.mask_fill(x, keep.clone())?;
                Ok(g.softmax(y))
            })
        }),
        ("layer_norm", |s| {
            let (n, m, _) = dims(s);
            let cols = m + 1;
            let (ga, b) = (randn(&[cols], s + 3), randn(&[cols], s + 4));
            unary(s, &[n, cols], |g, x| {
                let (ga, b) = (g.constant(ga.clone()), g.constant(b.clone()));
                g.layer_norm(x, ga, b)
            })
        }),
        ("layer_norm_affine", |s| {
            let (n, m, _) = dims(s);
            let x0 = randn(&[n, m + 1], s + 3);
            unary(s, &[m + 1], |g, p| {
                let x = g.constant(x0.clone());
                g.layer_norm(x, p, p)
            })
        }),
        ("gather", |s| {
            let (v, d, n) = dims(s);
            let mut rng = seeded(s);
            let ids: Vec<u32> = (0..n + 2).map(|_| rng.gen_range(0..v as u32)).collect();
            unary(s, &[v, d], |g, t| g.gather(t, &ids))
        }),
        ("cross_entropy", |s| {
            let (n, k, _) = dims(s);
            let k = k + 1;
            let mut rng = seeded(s);
            let targets: Vec<Option<u32>> = (0..n + 1).map(|i| (i % 3 != 2).then(|| rng.gen_range(0..k as u32))).collect();
            let weights: Vec<f64> = (0..n + 1).map(|i| 0.5 + i as f64).collect();
            gradcheck(|g, x| g.cross_entropy(x, &targets, &weights), &randn(&[n + 1, k], s), EPSILON)
        }),
        ("reshape_transpose", |s| {
            let (n, m, _) = dims(s);
            unary(s, &[n, m], |g, x| {
                let y = g.reshape(x, &[m, n])?;
                g.transpose(y)
            })
        }),
        ("sum_mean", |s| {
            let (n, m, _) = dims(s);
            gradcheck(
                |g, x| {
                    let y = g.mul(x, x)?;
                    let a = g.mean(y);
                    let b = g.sum(x);
                    g.add(a, b)
                },
                &randn(&[n, m], s),
                EPSILON,
            )
        }),
        ("attention_q", |s| attention_case(s, 0, false, false)),
        ("attention_k", |s| attention_case(s, 1, false, false)),
        ("attention_v", |s| attention_case(s, 2, false, false)),
        ("attention_causal", |s| attention_case(s, (s % 3) as usize, true, false)),
        ("attention_shared_memory", |s| attention_case(s, (s % 3) as usize, false, true)),
    ]
}

/// A model small enough that full finite differences stay cheap.
pub fn tiny_config(mode: AttentionMode) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_height: 8,
            image_width: 8,
            patch: 4,
            dim: 8,
            layers: 1,
            heads: 2,
        },
        decoder: DecoderConfig {
            vocab: 9,
            max_len: 6,
            dim: 8,
            layers: 1,
            heads: 2,
            mode,
        },
        mlp_ratio: 2,
    }
}

/// Worst relative error of the end-to-end weighted masked-diffusion batch
/// loss against central differences, over `coords` random parameter
/// coordinates of a randomly initialised tiny model.
pub fn mdc_loss_check(seed: u64, coords: usize) -> Result<f64> {
    let cfg = tiny_config(AttentionMode::Bidirectional);
    let mut rng = seeded(seed);
    let mut params = ModelParams::<f64>::init(&cfg, &mut rng)?;
    // Larger weights than the 0.02 init so the check is not dominated by
    // near-zero gradients.
    for t in params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 0.3 * normal(&mut rng));
    }
    let images: Vec<Image> = (0..2)
        .map(|_| Image::new(8, 8, (0..8 * 8 * 3).map(|_| rng.gen::<f32>()).collect()))
        .collect::<Result<_>>()?;
    let caps: Vec<Vec<u32>> = vec![vec![4, 5, 6, 7, 8, PAD], vec![8, 4, 4, 6, PAD, PAD]];
    let cap_refs: Vec<&[u32]> = caps.iter().map(|c| c.as_slice()).collect();
    let sched = NoiseSchedule::linear(0.5, 1.0)?;
    let prepared = loop {
        let p = prepare_batch(Objective::Mdc, &sched, &cap_refs, &mut rng)?;
        if p.inputs.chunks(6).all(|row| row.contains(&MASK)) {
            break p;
        }
    };
    let img_refs: Vec<&Image> = images.iter().collect();
    let (_, grads) = batch_loss(&params, &img_refs, &prepared, AttentionMode::Bidirectional, true)?;
    let analytic: Vec<f64> = grads.expect("requested").into_iter().flatten().collect();
    let point: Vec<f64> = params.tensors().iter().flat_map(|t| t.data().iter().copied()).collect();
    // Key biases shift every attention score of a query equally, so their
    // true gradient is exactly zero and finite differences see only
    // roundoff. Assert the zero directly and sample the rest.
    let mut eligible = Vec::new();
    let mut off = 0;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        let range = off..off + t.numel();
        if name.ends_with(".bk") {
            if let Some(g) = analytic[range.clone()].iter().find(|g| g.abs() > 1e-12) {
                return Err(crate::Error::NonFinite(alloc::format!("{name} has gradient {g:e}, expected 0")));
            }
        } else {
            eligible.extend(range);
        }
        off += t.numel();
    }
    let indices: Vec<usize> = (0..coords).map(|_| eligible[rng.gen_range(0..eligible.len())]).collect();
    let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape().to_vec()).collect();
    check_coordinates(&analytic, &point, &indices, LOSS_EPSILON, |x| {
        let mut off = 0;
        let tensors = shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                off += n;
                Tensor::new(s, x[off - n..off].to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        let p = ModelParams::from_tensors(cfg.clone(), tensors)?;
        Ok(batch_loss(&p, &img_refs, &prepared, AttentionMode::Bidirectional, false)?.0)
    })
}

/// `(name, worst error over seeds)` for every check, including the
/// end-to-end loss on 100 coordinates.
pub fn run_suite(seeds: u64) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (name, f) in primitive_checks() {
        let mut worst = 0.0f64;
        for s in 0..seeds {
            worst = worst.max(f(s)?);
        }
        out.push((name.into(), worst));
    }
    let mut worst = 0.0f64;
    for s in 0..seeds {
        worst = worst.max(mdc_loss_check(s, 100)?);
    }
    out.push(("mdc_loss_end_to_end".into(), worst));
    Ok(out)
}
