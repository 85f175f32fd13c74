use mdc_core::autodiff::{gradcheck, AttentionSpec, Graph, Tensor, Var};
use mdc_core::rng::{normal, seeded};
use mdc_core::{Error, Result};
use proptest::prelude::*;
use rand::Rng;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;
const SEEDS: u64 = 20;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seeded(seed);
    Tensor::from_fn(shape, |_| normal(&mut rng))
}

/// Projects `out` onto a fixed random direction so every output entry
/// influences the scalar.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let c = g.constant(randn(g.shape(out), seed ^ 0xC0FFEE));
    let p = g.mul(out, c)?;
    Ok(g.sum(p))
}

fn dims(seed: u64) -> (usize, usize, usize) {
    let mut rng = seeded(seed + 1000);
    (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6))
}

fn check(name: &str, f: impl Fn(u64) -> Result<f64>) {
    for seed in 0..SEEDS {
        let err = f(seed).unwrap();
        assert!(err < TOL, "{name} seed {seed}: relative error {err:e}");
    }
}

#[test]
fn matmul_identity_and_grad_of_sum() {
    let x = randn(&[4, 3], 1);
    let mut g = Graph::new();
    let i = g.constant(Tensor::identity(4));
    let xv = g.leaf(x.clone(), true);
    let xt = g.transpose(xv).unwrap();
    let y = g.matmul(xt, i).unwrap();
    let y = g.transpose(y).unwrap();
    assert_eq!(g.value(y), &x);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(xv).unwrap().iter().all(|&v| v == 1.0));
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[8], 3.5));
    let y = g.softmax(x);
    assert!(g.value(y).data().iter().all(|&p| (p - 0.125).abs() < 1e-15));
}

#[test]
fn cross_entropy_of_zero_logits_is_ln_k() {
    for k in [2usize, 17, 40] {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, k]));
        let l = g.cross_entropy(x, &[Some((k - 1) as u32)], &[1.0]).unwrap();
        assert!((g.value(l).item() - (k as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn gradcheck_square_sum() {
    let x = randn(&[7], 3);
    let err = gradcheck(
        |g, x| {
            let y = g.mul(x, x)?;
            Ok(g.sum(y))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err:e}");
}

#[test]
fn gradcheck_matmul_both_operands() {
    check("matmul lhs", |s| {
        let (n, k, m) = dims(s);
        let b = randn(&[k, m], s + 1);
        gradcheck(
            |g, a| {
                let b = g.constant(b.clone());
                let y = g.matmul(a, b)?;
                project(g, y, s)
            },
            &randn(&[n, k], s),
            EPS,
        )
    });
    check("matmul rhs", |s| {
        let (n, k, m) = dims(s);
        let a = randn(&[2, n, k], s + 1);
        gradcheck(
            |g, b| {
                let a = g.constant(a.clone());
                let y = g.matmul(a, b)?;
                project(g, y, s)
            },
            &randn(&[k, m], s),
            EPS,
        )
    });
}

#[test]
fn gradcheck_elementwise() {
    check("add", |s| {
        let (n, m, _) = dims(s);
        let other = randn(&[n, m], s + 7);
        gradcheck(
            |g, x| {
                let o = g.constant(other.clone());
                let y = g.add(x, o)?;
                let y = g.mul(y, y)?;
                project(g, y, s)
            },
            &randn(&[n, m], s),
            EPS,
        )
    });
    check("add_row", |s| {
        let (n, m, _) = dims(s);
        let x0 = randn(&[n, m], s + 7);
        gradcheck(
            |g, b| {
                let x = g.constant(x0.clone());
                let y = g.add_row(x, b)?;
                let y = g.gelu(y);
                project(g, y, s)
            },
            &randn(&[m], s),
            EPS,
        )
    });
    check("mul", |s| {
        let (n, m, _) = dims(s);
        let other = randn(&[n, m], s + 7);
        gradcheck(
            |g, x| {
                let o = g.constant(other.clone());
                let y = g.mul(x, o)?;
                project(g, y, s)
            },
            &randn(&[n, m], s),
            EPS,
        )
    });
    check("scale", |s| {
        gradcheck(
            |g, x| {
                let y = g.scale(x, -0.37);
                project(g, y, s)
            },
            &randn(&[5], s),
            EPS,
        )
    });
    check("gelu", |s| {
        let (n, m, _) = dims(s);
        gradcheck(
            |g, x| {
                let y = g.gelu(x);
                project(g, y, s)
            },
            &randn(&[n, m], s),
            EPS,
        )
    });
}

#[test]
fn gradcheck_normalizers() {
    check("softmax", |s| {
        let (n, m, _) = dims(s);
        gradcheck(
            |g, x| {
                let y = g.softmax(x);
                project(g, y, s)
            },
            &randn(&[n, m + 1], s),
            EPS,
        )
    });
    check("mask_fill+softmax", |s| {
        let (n, m, _) = dims(s);
        let cols = m + 1;
        let keep: Vec<bool> = (0..n * cols).map(|i| i % cols == 0 || (i * 7 + s as usize) % 3 != 0).collect();
        gradcheck(
            |g, x| {
                let y = g.mask_fill(x, keep.clone())?;
                let y = g.softmax(y);
                project(g, y, s)
            },
            &randn(&[n, cols], s),
            EPS,
        )
    });
    check("layer_norm x", |s| {
        let (n, m, _) = dims(s);
        let cols = m + 1;
        let (gain, bias) = (randn(&[cols], s + 3), randn(&[cols], s + 4));
        gradcheck(
            |g, x| {
                let (ga, b) = (g.constant(gain.clone()), g.constant(bias.clone()));
                let y = g.layer_norm(x, ga, b)?;
                project(g, y, s)
            },
            &randn(&[n, cols], s),
            EPS,
        )
    });
    check("layer_norm gain/bias", |s| {
        let (n, m, _) = dims(s);
        let cols = m + 1;
        let x0 = randn(&[n, cols], s + 3);
        gradcheck(
            |g, p| {
                let x = g.constant(x0.clone());
                let y = g.layer_norm(x, p, p)?;
                project(g, y, s)
            },
            &randn(&[cols], s),
            EPS,
        )
    });
}

#[test]
fn gradcheck_indexing_and_losses() {
    check("gather", |s| {
        let (v, d, n) = dims(s);
        let mut rng = seeded(s);
        let ids: Vec<u32> = (0..n + 2).map(|_| rng.gen_range(0..v as u32)).collect();
        gradcheck(
            |g, table| {
                let y = g.gather(table, &ids)?;
                project(g, y, s)
            },
            &randn(&[v, d], s),
            EPS,
        )
    });
    check("cross_entropy", |s| {
        let (n, k, _) = dims(s);
        let k = k + 1;
        let mut rng = seeded(s);
        let targets: Vec<Option<u32>> = (0..n + 1)
            .map(|i| (i % 3 != 2).then(|| rng.gen_range(0..k as u32)))
            .collect();
        let weights: Vec<f64> = (0..n + 1).map(|i| 0.5 + i as f64).collect();
        gradcheck(
            |g, x| g.cross_entropy(x, &targets, &weights),
            &randn(&[n + 1, k], s),
            EPS,
        )
    });
    check("reshape+transpose", |s| {
        let (n, m, _) = dims(s);
        gradcheck(
            |g, x| {
                let y = g.reshape(x, &[m, n])?;
                let y = g.transpose(y)?;
                project(g, y, s)
            },
            &randn(&[n, m], s),
            EPS,
        )
    });
    check("mean", |s| {
        let (n, m, _) = dims(s);
        gradcheck(
            |g, x| {
                let y = g.mul(x, x)?;
                Ok(g.mean(y))
            },
            &randn(&[n, m], s),
            EPS,
        )
    });
}

fn attention_spec(s: u64, causal: bool) -> (AttentionSpec, usize) {
    let mut rng = seeded(s + 77);
    let batch = rng.gen_range(1..3);
    let heads = rng.gen_range(1..3);
    let len = rng.gen_range(2..5);
    let key_mask = (!causal).then(|| (0..batch * len).map(|i| i % len == 0 || rng.gen_bool(0.7)).collect());
    let dim = heads * rng.gen_range(1..4);
    (
        AttentionSpec {
            batch,
            heads,
            q_len: len,
            k_len: len,
            causal,
            key_mask,
            shared_kv: false,
        },
        dim,
    )
}

#[test]
fn gradcheck_attention_shared_memory() {
    for which in 0..3 {
        check("attention(shared)", |s| {
            let (mut spec, dim) = attention_spec(s, false);
            spec.shared_kv = true;
            spec.key_mask = spec.key_mask.map(|m| m[..spec.k_len].to_vec());
            let qshape = [spec.batch * spec.q_len, dim];
            let kshape = [spec.k_len, dim];
            let q0 = randn(&qshape, s + 10);
            let k0 = randn(&kshape, s + 11);
            let v0 = randn(&kshape, s + 12);
            let point = [&q0, &k0, &v0][which].clone();
            gradcheck(
                |g, x| {
                    let mut ins = [q0.clone(), k0.clone(), v0.clone()].map(|t| g.constant(t));
                    ins[which] = x;
                    let y = g.attention(ins[0], ins[1], ins[2], spec.clone())?;
                    project(g, y, s)
                },
                &point,
                EPS,
            )
        });
    }
}

#[test]
fn shared_memory_equals_replicated_memory() {
    let (q0, k0, v0) = (randn(&[6, 4], 1), randn(&[5, 4], 2), randn(&[5, 4], 3));
    let run = |shared: bool| {
        let mut g = Graph::new();
        let q = g.constant(q0.clone());
        let rep = |t: &Tensor<f64>| if shared { t.clone() } else {
            let mut d = t.data().to_vec();
            d.extend_from_slice(t.data());
            d.extend_from_slice(t.data());
            Tensor::new(&[15, 4], d).unwrap()
        };
        let k = g.constant(rep(&k0));
        let v = g.constant(rep(&v0));
        let spec = AttentionSpec { batch: 3, heads: 2, q_len: 2, k_len: 5, causal: false, key_mask: None, shared_kv: shared };
        let y = g.attention(q, k, v, spec).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(true), run(false));
}

#[test]
fn gradcheck_attention_each_input() {
    for causal in [false, true] {
        for which in 0..3 {
            check("attention", |s| {
                let (spec, dim) = attention_spec(s, causal);
                let shape = [spec.batch * spec.q_len, dim];
                let others = [randn(&shape, s + 10), randn(&shape, s + 11)];
                gradcheck(
                    |g, x| {
                        let a = g.constant(others[0].clone());
                        let b = g.constant(others[1].clone());
                        let (q, k, v) = match which {
                            0 => (x, a, b),
                            1 => (a, x, b),
                            _ => (a, b, x),
                        };
                        let y = g.attention(q, k, v, spec.clone())?;
                        project(g, y, s)
                    },
                    &randn(&shape, s),
                    EPS,
                )
            });
        }
    }
}

/// A pre-norm attention block on a random 4x8 input, differentiated with
/// respect to the input.
#[test]
fn gradcheck_attention_block() {
    let d = 8;
    let w: Vec<Tensor<f64>> = (0..4).map(|i| randn(&[d, d], 50 + i).cast()).collect();
    let err = gradcheck(
        |g, x| {
            let gain = g.constant(Tensor::full(&[d], 1.0));
            let bias = g.constant(Tensor::zeros(&[d]));
            let h = g.layer_norm(x, gain, bias)?;
            let ws: Vec<Var> = w.iter().map(|t| g.constant(t.clone())).collect();
            let q = g.matmul(h, ws[0])?;
            let k = g.matmul(h, ws[1])?;
            let v = g.matmul(h, ws[2])?;
            let spec = AttentionSpec {
                batch: 1,
                heads: 2,
                q_len: 4,
                k_len: 4,
                causal: false,
                key_mask: None,
            shared_kv: false,
            };
            let a = g.attention(q, k, v, spec)?;
            let o = g.matmul(a, ws[3])?;
            let y = g.add(x, o)?;
            project(g, y, 9)
        },
        &randn(&[4, d], 8),
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "{err:e}");
}

/// The fused kernel and the primitive composition
/// `softmax(mask(q k^T / sqrt(d))) v` agree in value and gradient.
#[test]
fn fused_attention_matches_primitive_composition() {
    for s in 0..SEEDS {
        let n = 2 + (s as usize % 4);
        let d = 3;
        let (q0, k0, v0) = (randn(&[n, d], s), randn(&[n, d], s + 1), randn(&[n, d], s + 2));
        let keep: Vec<bool> = (0..n).map(|j| j == 0 || (j + s as usize) % 3 != 0).collect();
        let run = |fused: bool| {
            let mut g = Graph::new();
            let (q, k, v) = (g.leaf(q0.clone(), true), g.leaf(k0.clone(), true), g.leaf(v0.clone(), true));
            let out = if fused {
                let spec = AttentionSpec {
                    batch: 1,
                    heads: 1,
                    q_len: n,
                    k_len: n,
                    causal: true,
                    key_mask: Some(keep.clone()),
                    shared_kv: false,
                };
                g.attention(q, k, v, spec).unwrap()
            } else {
                let kt = g.transpose(k).unwrap();
                let sc = g.matmul(q, kt).unwrap();
                let sc = g.scale(sc, 1.0 / (d as f64).sqrt());
                let allowed: Vec<bool> = (0..n * n).map(|ij| ij % n <= ij / n && keep[ij % n]).collect();
                let sc = g.mask_fill(sc, allowed).unwrap();
                let p = g.softmax(sc);
                g.matmul(p, v).unwrap()
            };
            let l = project(&mut g, out, s).unwrap();
            let grads = g.backward(l).unwrap();
            let gv: Vec<Vec<f64>> = [q, k, v].iter().map(|&x| grads.get(x).unwrap().to_vec()).collect();
            (g.value(out).clone(), gv)
        };
        let (a, ga) = run(true);
        let (b, gb) = run(false);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in ga.iter().flatten().zip(gb.iter().flatten()) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }
}

/// Reverse topological order found by Kahn's algorithm, always taking the
/// lowest-index ready node (the default order takes the highest).
fn alternate_order(g: &Graph<f64>, loss: Var) -> Vec<Var> {
    let n = loss.index() + 1;
    let mut consumers = vec![0usize; n];
    for i in 0..n {
        for inp in g.inputs(var_at(g, i)) {
            consumers[inp.index()] += 1;
        }
    }
    let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&i| consumers[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(&i) = ready.iter().next() {
        ready.remove(&i);
        let v = var_at(g, i);
        order.push(v);
        for inp in g.inputs(v) {
            consumers[inp.index()] -= 1;
            if consumers[inp.index()] == 0 {
                ready.insert(inp.index());
            }
        }
    }
    order
}

fn var_at(g: &Graph<f64>, i: usize) -> Var {
    g.var(i).unwrap()
}

#[test]
fn gradient_accumulation_is_order_independent() {
    for s in 0..5 {
        let mut g = Graph::new();
        let x = g.leaf(randn(&[3, 4], s), true);
        let w = g.leaf(randn(&[4, 4], s + 1), true);
        let h = g.matmul(x, w).unwrap();
        let a = g.gelu(h);
        let b = g.softmax(h);
        let c = g.add(a, b).unwrap();
        let d = g.mul(c, h).unwrap();
        let spec = AttentionSpec {
            batch: 1,
            heads: 2,
            q_len: 3,
            k_len: 3,
            causal: false,
            key_mask: None,
            shared_kv: false,
        };
        let e = g.attention(d, h, c, spec).unwrap();
        let loss = project(&mut g, e, s).unwrap();
        let order = alternate_order(&g, loss);
        let default_order: Vec<Var> = (0..=loss.index()).rev().map(|i| var_at(&g, i)).collect();
        assert_ne!(order, default_order);
        let g1 = g.backward(loss).unwrap();
        let g2 = g.backward_in_order(loss, &order).unwrap();
        for v in [x, w] {
            for (p, q) in g1.get(v).unwrap().iter().zip(g2.get(v).unwrap()) {
                assert!((p - q).abs() < 1e-10);
            }
        }
        let mut bad = order.clone();
        bad.reverse();
        assert!(g.backward_in_order(loss, &bad).is_err());
    }
}

#[test]
fn shape_errors_name_the_op_and_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 5]));
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        Error::Shape {
            op: "matmul",
            left: vec![2, 3],
            right: vec![4, 5]
        }
    );
    assert!(err.to_string().contains("matmul"));
    assert!(matches!(g.add(a, b), Err(Error::Shape { op: "add", .. })));
    let row = g.constant(Tensor::zeros(&[2]));
    assert!(g.add_row(a, row).is_err());
}

#[test]
fn gradients_are_not_recorded_for_constants() {
    let mut g = Graph::new();
    let x = g.constant(randn(&[2, 2], 1));
    let w = g.leaf(randn(&[2, 2], 2), true);
    let y = g.matmul(x, w).unwrap();
    let l = g.sum(y);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(x).is_none());
    assert!(grads.get(w).is_some());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..12, seed in 0u64..1000, spread in 0.1f64..50.0) {
        let mut rng = seeded(seed);
        let x = Tensor::from_fn(&[rows, cols], |_| spread * normal(&mut rng));
        let mut g = Graph::new();
        let v = g.constant(x);
        let y = g.softmax(v);
        for r in 0..rows {
            let s: f64 = g.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
