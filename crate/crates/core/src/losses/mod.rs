//! Change-point labels, the boundary-enhanced focal loss, permutation-invariant
//! BCE, and their weighted sum.
//!
//! Batches are slices of per-recording items, so sequences of different
//! lengths need no padding: every mean runs over real frames only.

mod labels;
mod pit;

pub use labels::{derive_change_labels, positive_ratio, ChangeLabels, DiarLabels, DEFAULT_POSITIVE_RATIO};
pub use pit::{bce_value, permutations, pit_bce_loss, pit_bce_values, MAX_PIT_SPEAKERS};

use crate::error::{Error, Result};
use crate::numcore::{CustomOp, Tape, Tensor, Var};
use crate::scalar::{log_sigmoid, sigmoid, Scalar};

/// Lower clamp applied to probabilities inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight λ of the boundary loss.
    pub lambda: f64,
    /// Focusing exponent γ.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            gamma: 2.0,
        }
    }
}

/// Per-element focal term and its derivative with respect to the logit.
fn focal<S: Scalar>(o: S, positive: bool, alpha: S, gamma: S) -> (S, S) {
    let s = if positive { S::one() } else { -S::one() };
    let z = s * o;
    let p = sigmoid(z);
    let q = sigmoid(-z); // 1 - p without cancellation
    let floor = S::of(LOG_FLOOR.ln());
    let raw = log_sigmoid(z);
    let (logp, clamped) = if raw < floor { (floor, true) } else { (raw, false) };
    let qg = if gamma == S::zero() { S::one() } else { q.powf(gamma) };
    let loss = -alpha * qg * logp;
    let mut d = -gamma * p * qg * logp;
    if !clamped {
        d = d + qg * q;
    }
    (loss, -alpha * s * d)
}

/// Mean focal loss over a flat list of logits and 0/1 labels.
pub fn bet_loss_value<S: Scalar>(logits: &[S], labels: &[u8], alpha: S, gamma: S) -> Result<S> {
    if logits.len() != labels.len() {
        return Err(Error::shape("bet_loss", &[logits.len()], &[labels.len()]));
    }
    if logits.is_empty() {
        return Err(Error::Contract("bet_loss needs at least one transition".into()));
    }
    let sum = logits
        .iter()
        .zip(labels)
        .fold(S::zero(), |acc, (&o, &c)| acc + focal(o, c == 1, alpha, gamma).0);
    Ok(sum / S::of(logits.len() as f64))
}

struct BetOp<S> {
    dlogits: Vec<Vec<S>>,
}

impl<S: Scalar> CustomOp<S> for BetOp<S> {
    fn name(&self) -> &'static str {
        "bet_loss"
    }

    fn backward(&self, _inputs: &[&Tensor<S>], _output: &Tensor<S>, g: &[S]) -> Vec<Vec<S>> {
        self.dlogits
            .iter()
            .map(|d| d.iter().map(|&v| v * g[0]).collect())
            .collect()
    }
}

fn check_alpha_gamma(alpha: f64, gamma: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("focal alpha {alpha} outside (0, 1]")));
    }
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("focal gamma {gamma} must be >= 0")));
    }
    Ok(())
}

/// Boundary-enhanced transition loss over a batch.
///
/// `logits[b]` has one entry per frame; entry `t` scores the transition
/// `t → t+1`, so the final frame's logit is ignored.
pub fn bet_loss<S: Scalar>(
    tape: &mut Tape<S>,
    logits: &[Var],
    labels: &[ChangeLabels],
    alpha: f64,
    gamma: f64,
) -> Result<Var> {
    check_alpha_gamma(alpha, gamma)?;
    if logits.len() != labels.len() {
        return Err(Error::shape("bet_loss", &[logits.len()], &[labels.len()]));
    }
    let (a, g) = (S::of(alpha), S::of(gamma));
    let n: usize = labels.iter().map(|c| c.len()).sum();
    if n == 0 {
        return Err(Error::Contract("bet_loss needs at least one transition".into()));
    }
    let inv_n = S::of(1.0 / n as f64);
    let mut total = S::zero();
    let mut dlogits = Vec::with_capacity(logits.len());
    for (&o, c) in logits.iter().zip(labels) {
        let vals = tape.value(o).data();
        if vals.len() != c.len() + 1 {
            return Err(Error::shape("bet_loss", &[vals.len()], &[c.len() + 1]));
        }
        let mut d = vec![S::zero(); vals.len()];
        for (t, &lab) in c.values().iter().enumerate() {
            let (l, dl) = focal(vals[t], lab == 1, a, g);
            total = total + l;
            d[t] = dl * inv_n;
        }
        dlogits.push(d);
    }
    let out = Tensor::scalar(total * inv_n);
    Ok(tape.custom(logits, out, Box::new(BetOp { dlogits })))
}

/// Handles for the three loss terms of one batch.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: Var,
    pub pit: Var,
    pub bet: Var,
    /// Focal α actually used (the batch positive ratio).
    pub alpha: f64,
    pub permutations: Vec<Vec<usize>>,
}

/// `L_PIT + λ·L_BET` with `α` set to the batch's positive change ratio.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    probs: &[Var],
    logits: &[Var],
    labels: &[DiarLabels],
    weights: LossWeights,
) -> Result<TotalLoss> {
    if !(weights.lambda >= 0.0) {
        return Err(Error::Config(format!("lambda {} must be >= 0", weights.lambda)));
    }
    let changes = labels
        .iter()
        .map(derive_change_labels)
        .collect::<Result<Vec<_>>>()?;
    let alpha = positive_ratio(&changes);
    let (pit, permutations) = pit_bce_loss(tape, probs, labels)?;
    let bet = bet_loss(tape, logits, &changes, alpha, weights.gamma)?;
    let weighted = tape.scale(bet, S::of(weights.lambda));
    let total = tape.add(pit, weighted)?;
    Ok(TotalLoss {
        total,
        pit,
        bet,
        alpha,
        permutations,
    })
}

#[cfg(test)]
mod tests;
