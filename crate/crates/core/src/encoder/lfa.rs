//! Masked layer-wise feature aggregation.
//!
//! `α̃ = α` on selected layers and `-inf` elsewhere, `w = softmax(α̃)`,
//! output `= Dropout(LayerNorm(Σ_l w_l · h_l))`.

use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, Norm};
use crate::numcore::{softmax_values, ParamId, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Lfa {
    pub alpha: ParamId,
    pub mask: Vec<bool>,
    pub norm: Norm,
}

impl Lfa {
    pub fn build<S: Scalar>(b: &mut Builder<'_, S>, mask: &[bool], d: usize) -> Result<Self> {
        Ok(Self {
            alpha: b.zeros("alpha", &[mask.len()])?,
            mask: mask.to_vec(),
            norm: b.norm("norm", d)?,
        })
    }

    /// Softmax layer weights on the tape.
    pub fn weights<S: Scalar>(&self, ctx: &mut Ctx<S>) -> Result<Var> {
        let masked = ctx.tape.mask_fill_neg_inf(ctx.p(self.alpha), &self.mask)?;
        ctx.tape.softmax(masked)
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, layers: &[Var]) -> Result<Var> {
        if layers.len() != self.mask.len() {
            return Err(Error::shape("lfa_aggregate", &[layers.len()], &[self.mask.len()]));
        }
        let w = self.weights(ctx)?;
        let h = ctx.tape.weighted_sum(w, layers)?;
        let h = self.norm.forward(ctx, h)?;
        ctx.dropout(h)
    }
}

/// Layer weights for plain values of `alpha` and a 0/1 mask.
pub fn lfa_weights<S: Scalar>(alpha: &[S], mask: &[bool]) -> Result<Vec<S>> {
    if alpha.len() != mask.len() {
        return Err(Error::shape("lfa_weights", &[alpha.len()], &[mask.len()]));
    }
    let masked: Vec<S> = alpha
        .iter()
        .zip(mask)
        .map(|(&a, &m)| if m { a } else { S::neg_infinity() })
        .collect();
    softmax_values(&masked)
}
