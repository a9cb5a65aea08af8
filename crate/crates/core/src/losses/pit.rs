use super::labels::DiarLabels;
use super::LOG_FLOOR;
use crate::error::{Error, Result};
use crate::numcore::{CustomOp, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Largest speaker count accepted by the exhaustive permutation search.
pub const MAX_PIT_SPEAKERS: usize = 6;

/// All permutations of `0..k` in lexicographic order.
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    let mut p: Vec<usize> = (0..k).collect();
    let mut out = vec![p.clone()];
    loop {
        let Some(i) = (1..k).rev().find(|&i| p[i - 1] < p[i]) else {
            return out;
        };
        let j = (i..k).rev().find(|&j| p[j] > p[i - 1]).expect("successor exists");
        p.swap(i - 1, j);
        p[i..].reverse();
        out.push(p.clone());
    }
}

/// Clamped binary cross-entropy of probability `p` against label `y`.
pub fn bce_value<S: Scalar>(p: S, y: u8) -> S {
    let floor = S::of(LOG_FLOOR);
    if y == 1 {
        -p.max(floor).ln()
    } else {
        -(S::one() - p).max(floor).ln()
    }
}

fn bce_grad<S: Scalar>(p: S, y: u8) -> S {
    let floor = S::of(LOG_FLOOR);
    if y == 1 {
        if p > floor {
            -S::one() / p
        } else {
            S::zero()
        }
    } else {
        let q = S::one() - p;
        if q > floor {
            S::one() / q
        } else {
            S::zero()
        }
    }
}

fn check_pair<S: Scalar>(p: &Tensor<S>, y: &DiarLabels) -> Result<()> {
    let want = [y.frames(), y.speakers()];
    if p.shape() != want {
        return Err(Error::shape("pit_bce_loss", p.shape(), &want));
    }
    if y.speakers() > MAX_PIT_SPEAKERS {
        return Err(Error::Config(format!(
            "{} speakers exceed the exhaustive PIT limit of {MAX_PIT_SPEAKERS}",
            y.speakers()
        )));
    }
    if y.frames() == 0 {
        return Err(Error::Contract("pit_bce_loss needs at least one frame".into()));
    }
    Ok(())
}

fn mean_bce<S: Scalar>(p: &[S], y: &DiarLabels, perm: &[usize]) -> S {
    let k = y.speakers();
    let mut sum = S::zero();
    for t in 0..y.frames() {
        for (j, &src) in perm.iter().enumerate() {
            sum = sum + bce_value(p[t * k + j], y.get(t, src));
        }
    }
    sum / S::of((y.frames() * k) as f64)
}

/// Minimal mean BCE of one item and the lexicographically smallest minimiser.
fn best_permutation<S: Scalar>(p: &Tensor<S>, y: &DiarLabels) -> Result<(S, Vec<usize>)> {
    check_pair(p, y)?;
    let mut best: Option<(S, Vec<usize>)> = None;
    for perm in permutations(y.speakers()) {
        let v = mean_bce(p.data(), y, &perm);
        if best.as_ref().map_or(true, |(b, _)| v < *b) {
            best = Some((v, perm));
        }
    }
    Ok(best.expect("at least one permutation"))
}

/// Plain-value PIT loss: batch mean of per-item minimal BCE, plus the argmins.
pub fn pit_bce_values<S: Scalar>(probs: &[Tensor<S>], labels: &[DiarLabels]) -> Result<(S, Vec<Vec<usize>>)> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::shape("pit_bce_loss", &[probs.len()], &[labels.len()]));
    }
    let mut sum = S::zero();
    let mut perms = Vec::with_capacity(probs.len());
    for (p, y) in probs.iter().zip(labels) {
        let (v, perm) = best_permutation(p, y)?;
        sum = sum + v;
        perms.push(perm);
    }
    Ok((sum / S::of(probs.len() as f64), perms))
}

struct PitOp<S> {
    dprobs: Vec<Vec<S>>,
}

impl<S: Scalar> CustomOp<S> for PitOp<S> {
    fn name(&self) -> &'static str {
        "pit_bce_loss"
    }

    fn backward(&self, _inputs: &[&Tensor<S>], _output: &Tensor<S>, g: &[S]) -> Vec<Vec<S>> {
        self.dprobs
            .iter()
            .map(|d| d.iter().map(|&v| v * g[0]).collect())
            .collect()
    }
}

/// Permutation-invariant BCE on the tape; the permutation is held fixed in backward.
pub fn pit_bce_loss<S: Scalar>(
    tape: &mut Tape<S>,
    probs: &[Var],
    labels: &[DiarLabels],
) -> Result<(Var, Vec<Vec<usize>>)> {
    let values: Vec<Tensor<S>> = probs.iter().map(|&p| tape.value(p).clone()).collect();
    let (loss, perms) = pit_bce_values(&values, labels)?;
    let inv_b = S::of(1.0 / probs.len() as f64);
    let dprobs = values
        .iter()
        .zip(labels)
        .zip(&perms)
        .map(|((p, y), perm)| {
            let k = y.speakers();
            let scale = inv_b / S::of((y.frames() * k) as f64);
            let mut d = vec![S::zero(); p.len()];
            for t in 0..y.frames() {
                for (j, &src) in perm.iter().enumerate() {
                    let i = t * k + j;
                    d[i] = bce_grad(p.data()[i], y.get(t, src)) * scale;
                }
            }
            d
        })
        .collect();
    Ok((tape.custom(probs, Tensor::scalar(loss), Box::new(PitOp { dprobs })), perms))
}
