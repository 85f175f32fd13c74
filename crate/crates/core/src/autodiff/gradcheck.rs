use alloc::vec::Vec;


use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative error with a small absolute floor in the denominator, so that
/// components whose true gradient is ~0 are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-7);
    (analytic - numeric).abs() / denom
}

/// Compares the reverse-mode gradient of the scalar `f(point)` with central
/// finite differences and returns the worst component-wise relative error.
pub fn gradcheck<F>(f: F, point: &Tensor<f64>, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true);
    let y = f(&mut g, x)?;
    check_finite(g.value(y).item())?;
    let grads = g.backward(y)?;
    let analytic = grads.get_or_zeros(x, point.numel());

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(point.shape(), data)?, false);
        let y = f(&mut g, x)?;
        check_finite(g.value(y).item())
    };
    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.data().to_vec();
        let mut minus = point.data().to_vec();
        plus[i] += epsilon;
        minus[i] -= epsilon;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(alloc::format!("gradcheck objective evaluated to {v}")))
    }
}

/// Finite-difference check of selected coordinates of an arbitrary
/// objective, given its analytic gradient at `point`.
pub fn check_coordinates(
    analytic: &[f64],
    point: &[f64],
    indices: &[usize],
    epsilon: f64,
    mut eval: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut x = point.to_vec();
    for &i in indices {
        let orig = x[i];
        x[i] = orig + epsilon;
        let fp = check_finite(eval(&x)?)?;
        x[i] = orig - epsilon;
        let fm = check_finite(eval(&x)?)?;
        x[i] = orig;
        worst = worst.max(relative_error(analytic[i], (fp - fm) / (2.0 * epsilon)));
    }
    Ok(worst)
}
