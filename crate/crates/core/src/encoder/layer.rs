use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, Linear, Norm};
use crate::numcore::{ParamId, Var};
use crate::scalar::Scalar;
use crate::ssm::{ExtBiMamba, MambaConfig};

/// Pre-norm feed-forward block: LN → Linear(d, m·d) → SiLU → dropout → Linear(m·d, d) → dropout.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub norm: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn build<S: Scalar>(b: &mut Builder<'_, S>, d: usize, mult: usize) -> Result<Self> {
        Ok(Self {
            norm: b.norm("norm", d)?,
            fc1: b.linear("fc1", d, mult * d, true)?,
            fc2: b.linear("fc2", mult * d, d, true)?,
        })
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let h = self.norm.forward(ctx, x)?;
        let h = self.fc1.forward(ctx, h)?;
        let h = ctx.tape.silu(h);
        let h = ctx.dropout(h)?;
        let h = self.fc2.forward(ctx, h)?;
        ctx.dropout(h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DepthwiseBranch {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub width: usize,
}

/// Multi-branch convolution module: LN → pointwise(d, 2d) → GLU →
/// mean of depthwise branches → LN → SiLU → pointwise(d, d) → dropout.
#[derive(Debug, Clone)]
pub struct ConvModule {
    pub norm: Norm,
    pub pw_in: Linear,
    pub branches: Vec<DepthwiseBranch>,
    pub branch_norm: Norm,
    pub pw_out: Linear,
}

impl ConvModule {
    pub fn build<S: Scalar>(b: &mut Builder<'_, S>, d: usize, kernels: &[usize]) -> Result<Self> {
        if let Some(k) = kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Config(format!("depthwise kernel width {k} must be odd")));
        }
        let norm = b.norm("norm", d)?;
        let pw_in = b.linear("pw_in", d, 2 * d, true)?;
        let mut branches = Vec::with_capacity(kernels.len());
        for (i, &k) in kernels.iter().enumerate() {
            let mut s = b.scope(format!("dw.{i}"));
            let bound = 1.0 / (k as f64).sqrt();
            branches.push(DepthwiseBranch {
                kernel: s.uniform("w", &[k, d], bound)?,
                bias: s.zeros("b", &[d])?,
                width: k,
            });
        }
        Ok(Self {
            norm,
            pw_in,
            branches,
            branch_norm: b.norm("dw_norm", d)?,
            pw_out: b.linear("pw_out", d, d, true)?,
        })
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let h = self.norm.forward(ctx, x)?;
        let h = self.pw_in.forward(ctx, h)?;
        let h = ctx.tape.glu(h)?;
        let mut sum: Option<Var> = None;
        for br in &self.branches {
            let y = ctx.tape.depthwise_conv1d(h, ctx.p(br.kernel), (br.width - 1) / 2)?;
            let y = ctx.tape.add_row(y, ctx.p(br.bias))?;
            sum = Some(match sum {
                None => y,
                Some(s) => ctx.tape.add(s, y)?,
            });
        }
        let h = sum.ok_or_else(|| Error::Config("conv module needs at least one branch".into()))?;
        let h = ctx.tape.scale(h, S::of(1.0 / self.branches.len() as f64));
        let h = self.branch_norm.forward(ctx, h)?;
        let h = ctx.tape.silu(h);
        let h = self.pw_out.forward(ctx, h)?;
        ctx.dropout(h)
    }
}

/// Conformer layer with self-attention replaced by [`ExtBiMamba`]:
/// ½·FFN → ExtBiMamba → conv module → ½·FFN → LN, each with a residual.
#[derive(Debug, Clone)]
pub struct ConBiMambaLayer {
    pub ffn1: FeedForward,
    pub mamba_norm: Norm,
    pub mamba: ExtBiMamba,
    pub conv: ConvModule,
    pub ffn2: FeedForward,
    pub final_norm: Norm,
    pub ffn_scale: f64,
    d_model: usize,
}

impl ConBiMambaLayer {
    pub fn build<S: Scalar>(
        b: &mut Builder<'_, S>,
        d_model: usize,
        ffn_mult: usize,
        kernels: &[usize],
        mamba: &MambaConfig,
        ffn_scale: f64,
    ) -> Result<Self> {
        Ok(Self {
            ffn1: FeedForward::build(&mut b.scope("ffn1"), d_model, ffn_mult)?,
            mamba_norm: b.norm("mamba_norm", d_model)?,
            mamba: ExtBiMamba::build(&mut b.scope("bimamba"), d_model, mamba)?,
            conv: ConvModule::build(&mut b.scope("conv"), d_model, kernels)?,
            ffn2: FeedForward::build(&mut b.scope("ffn2"), d_model, ffn_mult)?,
            final_norm: b.norm("final_norm", d_model)?,
            ffn_scale,
            d_model,
        })
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x);
        if shape.len() != 2 || shape[1] != self.d_model {
            return Err(Error::shape("conbimamba_layer", shape, &[self.d_model]));
        }
        let half = S::of(self.ffn_scale);

        let f = self.ffn1.forward(ctx, x)?;
        let f = ctx.tape.scale(f, half);
        let x = ctx.tape.add(x, f)?;

        let m = self.mamba_norm.forward(ctx, x)?;
        let m = self.mamba.forward(ctx, m)?;
        let m = ctx.dropout(m)?;
        let x = ctx.tape.add(x, m)?;

        let c = self.conv.forward(ctx, x)?;
        let x = ctx.tape.add(x, c)?;

        let f = self.ffn2.forward(ctx, x)?;
        let f = ctx.tape.scale(f, half);
        let x = ctx.tape.add(x, f)?;

        self.final_norm.forward(ctx, x)
    }
}
