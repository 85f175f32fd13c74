//! Closed-form absorbing-state diffusion over caption tokens.

use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::vocab::{TokenId, MASK, PAD};

/// Smallest time used when forming the `1/t` loss weight. Windows reaching
/// below it are clamped rather than rejected.
pub const WEIGHT_T_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleFamily {
    Linear,
}

/// Survival function `alpha(t)` together with the training window from
/// which `t` is drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    omega_lower: f64,
    omega_upper: f64,
    family: ScheduleFamily,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            omega_lower: 0.5,
            omega_upper: 1.0,
            family: ScheduleFamily::Linear,
        }
    }
}

fn check_time(what: &'static str, t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain {
            what,
            value: t,
            domain: "[0, 1]",
        })
    }
}

impl NoiseSchedule {
    /// Linear schedule on `[lower, upper]`. A point window (`lower == upper`)
    /// is accepted and pins `t`.
    pub fn linear(lower: f64, upper: f64) -> Result<Self> {
        check_time("omega_lower", lower)?;
        check_time("omega_upper", upper)?;
        if upper <= 0.0 || lower > upper {
            return Err(Error::invalid(alloc::format!(
                "schedule window [{lower}, {upper}] is empty or ends at 0"
            )));
        }
        Ok(NoiseSchedule {
            omega_lower: lower,
            omega_upper: upper,
            family: ScheduleFamily::Linear,
        })
    }

    pub fn omega_lower(&self) -> f64 {
        self.omega_lower
    }
    pub fn omega_upper(&self) -> f64 {
        self.omega_upper
    }
    pub fn family(&self) -> ScheduleFamily {
        self.family
    }

    /// Probability that a token is still unmasked at time `t`.
    pub fn alpha(&self, t: f64) -> Result<f64> {
        check_time("t", t)?;
        Ok(match self.family {
            ScheduleFamily::Linear => 1.0 - t,
        })
    }

    /// Magnitude of `alpha'(t) / (1 - alpha(t))`.
    pub fn loss_weight(&self, t: f64) -> Result<f64> {
        check_time("t", t)?;
        if t == 0.0 {
            return Err(Error::Domain {
                what: "t",
                value: t,
                domain: "(0, 1]",
            });
        }
        Ok(match self.family {
            ScheduleFamily::Linear => 1.0 / t,
        })
    }

    /// `loss_weight` with `t` clamped to [`WEIGHT_T_FLOOR`].
    pub fn clamped_loss_weight(&self, t: f64) -> f64 {
        match self.family {
            ScheduleFamily::Linear => 1.0 / t.max(WEIGHT_T_FLOOR),
        }
    }

    pub fn sample_time<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        self.omega_lower + (self.omega_upper - self.omega_lower) * u
    }
}

/// A caption after forward corruption at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedCaption {
    pub tokens: Vec<TokenId>,
    pub masked: Vec<bool>,
    pub t: f64,
    /// The uncorrupted caption; entries at masked positions are the targets.
    pub original: Vec<TokenId>,
}

impl MaskedCaption {
    pub fn num_masked(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// `(position, original token)` for every masked position.
    pub fn targets(&self) -> impl Iterator<Item = (usize, TokenId)> + '_ {
        self.masked
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| (i, self.original[i]))
    }
}

/// Masks each non-pad position independently with probability `t`.
///
/// One uniform draw is consumed per position, pads included, so the random
/// stream does not depend on caption content.
pub fn corrupt<R: Rng + ?Sized>(caption: &[TokenId], t: f64, rng: &mut R) -> Result<MaskedCaption> {
    check_time("t", t)?;
    if caption.contains(&MASK) {
        return Err(Error::invalid("caption already contains the mask token"));
    }
    let mut tokens = caption.to_vec();
    let mut masked = alloc::vec![false; caption.len()];
    for (i, tok) in tokens.iter_mut().enumerate() {
        let p: f64 = rng.gen();
        if p < t && *tok != PAD {
            *tok = MASK;
            masked[i] = true;
        }
    }
    Ok(MaskedCaption {
        tokens,
        masked,
        t,
        original: caption.to_vec(),
    })
}

/// A position's state in the forward chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenState {
    Token(TokenId),
    Mask,
}

/// Distribution over `{keep, mask}` for one forward transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeepOrMask {
    pub keep: f64,
    pub mask: f64,
}

fn check_order(r: f64, t: f64) -> Result<()> {
    check_time("r", r)?;
    check_time("t", t)?;
    if r >= t {
        return Err(Error::Domain {
            what: "r",
            value: r,
            domain: "[0, t)",
        });
    }
    Ok(())
}

/// `q(x_t | x_r)` for `r < t`.
pub fn forward_kernel(state: TokenState, r: f64, t: f64, sched: &NoiseSchedule) -> Result<KeepOrMask> {
    check_order(r, t)?;
    Ok(match state {
        TokenState::Mask => KeepOrMask { keep: 0.0, mask: 1.0 },
        TokenState::Token(_) => {
            let keep = sched.alpha(t)? / sched.alpha(r)?;
            KeepOrMask {
                keep,
                mask: 1.0 - keep,
            }
        }
    })
}

/// Posterior `q(x_r | x_t, x_0)`: probability of each outcome for `x_r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    /// Probability mass on a concrete token.
    pub token: Option<(TokenId, f64)>,
    pub mask: f64,
}

impl Posterior {
    pub fn total(&self) -> f64 {
        self.token.map_or(0.0, |(_, p)| p) + self.mask
    }
}

pub fn posterior(x_t: TokenState, x_0: TokenId, r: f64, t: f64, sched: &NoiseSchedule) -> Result<Posterior> {
    check_order(r, t)?;
    Ok(match x_t {
        TokenState::Token(id) => Posterior {
            token: Some((id, 1.0)),
            mask: 0.0,
        },
        TokenState::Mask => {
            let (ar, at) = (sched.alpha(r)?, sched.alpha(t)?);
            Posterior {
                token: Some((x_0, (ar - at) / (1.0 - at))),
                mask: (1.0 - ar) / (1.0 - at),
            }
        }
    })
}

/// Log-softmax of one row of logits.
pub fn log_softmax<T: Float>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let lse = logits.iter().map(|&x| (x - max).exp()).fold(T::zero(), |a, b| a + b).ln() + max;
    logits.iter().map(|&x| x - lse).collect()
}

/// Weighted masked-token cross-entropy for one example.
///
/// `logits[j]` is the distribution predicted at the `j`-th masked position
/// and `targets[j]` its original token. Returns `loss_weight(t)` times the
/// mean negative log-likelihood; an example with no masked positions
/// contributes zero.
pub fn mdc_loss(logits: &[Vec<f64>], targets: &[TokenId], t: f64, sched: &NoiseSchedule) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(Error::shape("mdc_loss", &[logits.len()], &[targets.len()]));
    }
    if logits.is_empty() {
        return Ok(0.0);
    }
    let weight = sched.loss_weight(t)?;
    let mut nll = 0.0;
    for (row, &target) in logits.iter().zip(targets) {
        let lp = log_softmax(row);
        let p = lp
            .get(target as usize)
            .ok_or_else(|| Error::invalid(alloc::format!("target {target} out of range")))?;
        nll -= p;
    }
    Ok(weight * nll / logits.len() as f64)
}
