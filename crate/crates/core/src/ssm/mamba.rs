use serde::{Deserialize, Serialize};

use super::scan::selective_scan_op;
use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, Linear};
use crate::numcore::{ParamId, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// Whether the two directions of [`ExtBiMamba`] share their input/output projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projections {
    Shared,
    Separate,
}

/// How the two directional inner streams are combined before the output projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Add,
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MambaConfig {
    pub d_state: usize,
    pub expand: usize,
    pub d_conv: usize,
    /// `None` selects `ceil(d_model / 16)`.
    pub dt_rank: Option<usize>,
    pub dt_min: f64,
    pub dt_max: f64,
    pub projections: Projections,
    pub fusion: Fusion,
}

impl Default for MambaConfig {
    fn default() -> Self {
        Self {
            d_state: 16,
            expand: 2,
            d_conv: 4,
            dt_rank: None,
            dt_min: 1e-3,
            dt_max: 1e-1,
            projections: Projections::Shared,
            fusion: Fusion::Add,
        }
    }
}

impl MambaConfig {
    pub fn d_inner(&self, d_model: usize) -> usize {
        self.expand * d_model
    }

    pub fn dt_rank(&self, d_model: usize) -> usize {
        self.dt_rank.unwrap_or_else(|| d_model.div_ceil(16))
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_state == 0 || self.expand == 0 || self.d_conv == 0 {
            return Err(Error::Config("mamba sizes must be positive".into()));
        }
        if !(self.dt_min > 0.0 && self.dt_min <= self.dt_max) {
            return Err(Error::Config("need 0 < dt_min <= dt_max".into()));
        }
        Ok(())
    }
}

fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Direction-specific part of a Mamba block: causal conv, input-dependent
/// (Δ, B, C) projections and the selective scan.
#[derive(Debug, Clone)]
pub struct SsmCore {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    d_state: usize,
    dt_rank: usize,
}

impl SsmCore {
    pub fn build<S: Scalar>(b: &mut Builder<'_, S>, d_model: usize, cfg: &MambaConfig) -> Result<Self> {
        use rand::Rng;
        let d_inner = cfg.d_inner(d_model);
        let dt_rank = cfg.dt_rank(d_model);
        let n = cfg.d_state;
        let conv_bound = 1.0 / (cfg.d_conv as f64).sqrt();
        let conv_w = b.uniform("conv.w", &[cfg.d_conv, d_inner], conv_bound)?;
        let conv_b = b.uniform("conv.b", &[d_inner], conv_bound)?;
        let x_proj = b.linear("x_proj", d_inner, dt_rank + 2 * n, false)?;
        let dt_w = b.uniform("dt_proj.w", &[dt_rank, d_inner], 1.0 / (dt_rank as f64).sqrt())?;
        let (lo, hi) = (cfg.dt_min.ln(), cfg.dt_max.ln());
        let dt_bias: Vec<S> = (0..d_inner)
            .map(|_| {
                let dt = b.rng().gen_range(lo..=hi).exp().max(1e-4);
                S::of(inv_softplus(dt))
            })
            .collect();
        let dt_b = b.param("dt_proj.b", Tensor::new(&[d_inner], dt_bias)?)?;
        let a_log: Vec<S> = (0..d_inner)
            .flat_map(|_| (1..=n).map(|k| S::of((k as f64).ln())))
            .collect();
        let a_log = b.param("a_log", Tensor::new(&[d_inner, n], a_log)?)?;
        let d_skip = b.ones("d_skip", &[d_inner])?;
        Ok(Self {
            conv_w,
            conv_b,
            x_proj,
            dt_proj: Linear {
                w: dt_w,
                b: Some(dt_b),
            },
            a_log,
            d_skip,
            d_state: n,
            dt_rank,
        })
    }

    /// `stream[T × d_inner] → y[T × d_inner]` in forward time order.
    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, stream: Var) -> Result<Var> {
        let k = ctx.tape.value(ctx.p(self.conv_w)).rows();
        let xc = ctx.tape.depthwise_conv1d(stream, ctx.p(self.conv_w), k - 1)?;
        let xc = ctx.tape.add_row(xc, ctx.p(self.conv_b))?;
        let xc = ctx.tape.silu(xc);
        let proj = self.x_proj.forward(ctx, xc)?;
        let (r, n) = (self.dt_rank, self.d_state);
        let dt_raw = ctx.tape.slice_cols(proj, 0, r)?;
        let b = ctx.tape.slice_cols(proj, r, n)?;
        let c = ctx.tape.slice_cols(proj, r + n, n)?;
        let dt = self.dt_proj.forward(ctx, dt_raw)?;
        let delta = ctx.tape.softplus(dt);
        let a = ctx.tape.exp(ctx.p(self.a_log));
        let a = ctx.tape.neg(a);
        let d_skip = ctx.p(self.d_skip);
        selective_scan_op(&mut ctx.tape, xc, delta, a, b, c, d_skip)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.conv_w, self.conv_b];
        v.extend(self.x_proj.ids());
        v.extend(self.dt_proj.ids());
        v.extend([self.a_log, self.d_skip]);
        v
    }
}

fn check_width<S: Scalar>(ctx: &Ctx<S>, x: Var, d_model: usize, op: &'static str) -> Result<()> {
    let shape = ctx.tape.shape(x);
    if shape.len() != 2 || shape[1] != d_model {
        return Err(Error::shape(op, shape, &[d_model]));
    }
    Ok(())
}

/// Unidirectional Mamba block: in_proj → (stream, gate) → conv/SiLU →
/// selective scan → ⊙ SiLU(gate) → out_proj.
#[derive(Debug, Clone)]
pub struct MambaBlock {
    pub in_proj: Linear,
    pub core: SsmCore,
    pub out_proj: Linear,
    d_model: usize,
    d_inner: usize,
}

impl MambaBlock {
    pub fn build<S: Scalar>(b: &mut Builder<'_, S>, d_model: usize, cfg: &MambaConfig) -> Result<Self> {
        cfg.validate()?;
        let d_inner = cfg.d_inner(d_model);
        let in_proj = b.linear("in_proj", d_model, 2 * d_inner, false)?;
        let core = SsmCore::build(&mut b.scope("core"), d_model, cfg)?;
        let out_proj = b.linear("out_proj", d_inner, d_model, false)?;
        Ok(Self {
            in_proj,
            core,
            out_proj,
            d_model,
            d_inner,
        })
    }

    pub fn from_parts(in_proj: Linear, core: SsmCore, out_proj: Linear, d_model: usize, d_inner: usize) -> Self {
        Self {
            in_proj,
            core,
            out_proj,
            d_model,
            d_inner,
        }
    }

    /// `backward` runs the block on the time-reversed input and reverses the result.
    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var, dir: Direction) -> Result<Var> {
        check_width(ctx, x, self.d_model, "mamba_forward")?;
        let x = match dir {
            Direction::Forward => x,
            Direction::Backward => ctx.tape.reverse_rows(x),
        };
        let xz = self.in_proj.forward(ctx, x)?;
        let stream = ctx.tape.slice_cols(xz, 0, self.d_inner)?;
        let gate = ctx.tape.slice_cols(xz, self.d_inner, self.d_inner)?;
        let y = self.core.forward(ctx, stream)?;
        let g = ctx.tape.silu(gate);
        let y = ctx.tape.mul(y, g)?;
        let out = self.out_proj.forward(ctx, y)?;
        Ok(match dir {
            Direction::Forward => out,
            Direction::Backward => ctx.tape.reverse_rows(out),
        })
    }
}

/// External bidirectional Mamba: a forward-time and a reversed-time core
/// whose inner streams are fused before the output projection.
#[derive(Debug, Clone)]
pub struct ExtBiMamba {
    pub in_proj: Vec<Linear>,
    pub out_proj: Vec<Linear>,
    pub fwd: SsmCore,
    pub bwd: SsmCore,
    pub projections: Projections,
    pub fusion: Fusion,
    d_model: usize,
    d_inner: usize,
}

impl ExtBiMamba {
    pub fn build<S: Scalar>(b: &mut Builder<'_, S>, d_model: usize, cfg: &MambaConfig) -> Result<Self> {
        cfg.validate()?;
        let d_inner = cfg.d_inner(d_model);
        let (in_proj, fwd, bwd);
        match cfg.projections {
            Projections::Shared => {
                in_proj = vec![b.linear("in_proj", d_model, 2 * d_inner, false)?];
                fwd = SsmCore::build(&mut b.scope("fwd"), d_model, cfg)?;
                bwd = SsmCore::build(&mut b.scope("bwd"), d_model, cfg)?;
            }
            Projections::Separate => {
                let f_in = b.linear("fwd.in_proj", d_model, 2 * d_inner, false)?;
                fwd = SsmCore::build(&mut b.scope("fwd"), d_model, cfg)?;
                let b_in = b.linear("bwd.in_proj", d_model, 2 * d_inner, false)?;
                bwd = SsmCore::build(&mut b.scope("bwd"), d_model, cfg)?;
                in_proj = vec![f_in, b_in];
            }
        }
        let out_proj = match (cfg.fusion, cfg.projections) {
            (Fusion::Concat, _) => vec![b.linear("out_proj", 2 * d_inner, d_model, false)?],
            (Fusion::Add, Projections::Shared) => vec![b.linear("out_proj", d_inner, d_model, false)?],
            (Fusion::Add, Projections::Separate) => vec![
                b.linear("fwd.out_proj", d_inner, d_model, false)?,
                b.linear("bwd.out_proj", d_inner, d_model, false)?,
            ],
        };
        Ok(Self {
            in_proj,
            out_proj,
            fwd,
            bwd,
            projections: cfg.projections,
            fusion: cfg.fusion,
            d_model,
            d_inner,
        })
    }

    /// Same parameters with the forward and backward cores exchanged.
    pub fn swapped(&self) -> Self {
        let mut s = self.clone();
        std::mem::swap(&mut s.fwd, &mut s.bwd);
        if s.in_proj.len() == 2 {
            s.in_proj.swap(0, 1);
        }
        if s.out_proj.len() == 2 {
            s.out_proj.swap(0, 1);
        }
        s
    }

    fn gated_stream<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var, proj: usize, dir: Direction) -> Result<Var> {
        let xz = self.in_proj[proj].forward(ctx, x)?;
        let stream = ctx.tape.slice_cols(xz, 0, self.d_inner)?;
        let gate = ctx.tape.slice_cols(xz, self.d_inner, self.d_inner)?;
        let y = match dir {
            Direction::Forward => self.fwd.forward(ctx, stream)?,
            Direction::Backward => {
                let r = ctx.tape.reverse_rows(stream);
                let y = self.bwd.forward(ctx, r)?;
                ctx.tape.reverse_rows(y)
            }
        };
        let g = ctx.tape.silu(gate);
        ctx.tape.mul(y, g)
    }

    /// Single-direction path through this block's projections.
    pub fn forward_direction<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var, dir: Direction) -> Result<Var> {
        check_width(ctx, x, self.d_model, "ext_bimamba_forward")?;
        let idx = usize::from(dir == Direction::Backward && self.in_proj.len() == 2);
        let y = self.gated_stream(ctx, x, idx, dir)?;
        let out_idx = usize::from(dir == Direction::Backward && self.out_proj.len() == 2);
        match self.fusion {
            Fusion::Add => self.out_proj[out_idx].forward(ctx, y),
            Fusion::Concat => Err(Error::Config(
                "single-direction evaluation needs additive fusion".into(),
            )),
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        check_width(ctx, x, self.d_model, "ext_bimamba_forward")?;
        let b_idx = self.in_proj.len() - 1;
        let yf = self.gated_stream(ctx, x, 0, Direction::Forward)?;
        let yb = self.gated_stream(ctx, x, b_idx, Direction::Backward)?;
        match (self.fusion, self.out_proj.len()) {
            (Fusion::Add, 1) => {
                let y = ctx.tape.add(yf, yb)?;
                self.out_proj[0].forward(ctx, y)
            }
            (Fusion::Add, _) => {
                let of = self.out_proj[0].forward(ctx, yf)?;
                let ob = self.out_proj[1].forward(ctx, yb)?;
                ctx.tape.add(of, ob)
            }
            (Fusion::Concat, _) => {
                let y = ctx.tape.concat_cols(&[yf, yb])?;
                self.out_proj[0].forward(ctx, y)
            }
        }
    }
}
