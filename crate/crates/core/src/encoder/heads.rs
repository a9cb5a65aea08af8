use crate::error::Result;
use crate::nn::{Builder, Ctx, Linear};
use crate::numcore::Var;
use crate::scalar::Scalar;

/// Per-frame multi-label speaker activity: Linear(d, K) → sigmoid.
#[derive(Debug, Clone)]
pub struct DiarHead {
    pub proj: Linear,
}

impl DiarHead {
    pub fn build<S: Scalar>(b: &mut Builder<'_, S>, d: usize, speakers: usize) -> Result<Self> {
        Ok(Self {
            proj: b.linear("diar_head", d, speakers, true)?,
        })
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, h: Var) -> Result<Var> {
        let z = self.proj.forward(ctx, h)?;
        Ok(ctx.tape.sigmoid(z))
    }
}

/// Speaker-change logits `o_t = W₂·ReLU(W₁·h_t + b₁) + b₂`, one per frame.
///
/// The logit of frame `t` scores the transition between frames `t` and `t+1`,
/// so only the first `T-1` entries meet a label.
#[derive(Debug, Clone)]
pub struct ChangeHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ChangeHead {
    pub fn build<S: Scalar>(b: &mut Builder<'_, S>, d: usize, hidden: usize) -> Result<Self> {
        let mut s = b.scope("change_head");
        Ok(Self {
            fc1: s.linear("fc1", d, hidden, true)?,
            fc2: s.linear("fc2", hidden, 1, true)?,
        })
    }

    /// Returns a length-`T` vector of raw logits.
    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, h: Var) -> Result<Var> {
        let z = self.fc1.forward(ctx, h)?;
        let z = ctx.tape.relu(z);
        let o = self.fc2.forward(ctx, z)?;
        let t = ctx.tape.shape(o)[0];
        ctx.tape.reshape(o, &[t])
    }
}
