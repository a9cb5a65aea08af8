//! Parameter construction and the forward-pass context shared by all blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numcore::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Tape plus parameter bindings for one forward/backward pass.
pub struct Ctx<S> {
    pub tape: Tape<S>,
    bound: Bound,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<S: Scalar> Ctx<S> {
    /// Inference context: dropout disabled.
    pub fn new(store: &ParamStore<S>) -> Self {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        Self {
            tape,
            bound,
            dropout: None,
        }
    }

    /// Training context; dropout masks are drawn from a stream seeded by `seed`.
    pub fn training(store: &ParamStore<S>, dropout: f64, seed: u64) -> Self {
        let mut ctx = Self::new(store);
        if dropout > 0.0 {
            ctx.dropout = Some((dropout, ChaCha8Rng::seed_from_u64(seed)));
        }
        ctx
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    pub fn bound(&self) -> &Bound {
        &self.bound
    }

    pub fn into_parts(self) -> (Tape<S>, Bound) {
        (self.tape, self.bound)
    }

    /// Inverted dropout; identity outside training.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - *rate;
        let scale = S::of(1.0 / keep);
        let n = self.tape.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { scale } else { S::zero() })
            .collect();
        self.tape.mul_const(x, mask)
    }
}

/// Creates named parameters under a dotted prefix.
pub struct Builder<'a, S> {
    store: &'a mut ParamStore<S>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, S: Scalar> Builder<'a, S> {
    pub fn new(store: &'a mut ParamStore<S>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: impl std::fmt::Display) -> Builder<'_, S> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn param(&mut self, name: &str, t: Tensor<S>) -> Result<ParamId> {
        let path = self.path(name);
        self.store.add(path, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::of(self.rng.gen_range(-bound..=bound)))
            .collect();
        self.param(name, Tensor::new(shape, data)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.param(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.param(name, Tensor::ones(shape))
    }

    /// Linear map with weights uniform in ±1/√fan_in.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Linear> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut s = self.scope(name);
        let w = s.uniform("w", &[fan_in, fan_out], bound)?;
        let b = if bias { Some(s.zeros("b", &[fan_out])?) } else { None };
        Ok(Linear { w, b })
    }

    pub fn norm(&mut self, name: &str, dim: usize) -> Result<Norm> {
        let mut s = self.scope(name);
        Ok(Norm {
            gain: s.ones("gain", &[dim])?,
            bias: s.zeros("bias", &[dim])?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let y = ctx.tape.matmul(x, ctx.p(self.w))?;
        match self.b {
            Some(b) => ctx.tape.add_row(y, ctx.p(b)),
            None => Ok(y),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gain), ctx.p(self.bias));
        ctx.tape.layer_norm(x, g, b, S::of(LN_EPS))
    }
}

/// Finite-difference check of `d f / d θ` for every parameter of `store`,
/// probing at most `per_param` entries per tensor.
pub fn gradcheck_params<F>(
    store: &ParamStore<f64>,
    step: f64,
    per_param: usize,
    f: F,
) -> Result<crate::numcore::gradcheck::GradCheck>
where
    F: Fn(&mut Ctx<f64>) -> Result<Var>,
{
    use crate::numcore::gradcheck::{rel_err, GradCheck};

    let mut ctx = Ctx::new(store);
    let loss = f(&mut ctx)?;
    let (tape, bound) = ctx.into_parts();
    let grads = tape.backward(loss)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut ctx = Ctx::new(s);
        let out = f(&mut ctx)?;
        Ok(ctx.tape.value(out).item())
    };
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = store.clone();
    for (pi, id) in store.ids().enumerate() {
        let n = store.get(id).len();
        let stride = if per_param >= n { 1 } else { n.div_ceil(per_param) };
        for j in (0..n).step_by(stride) {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.get(bound.var(id)).map(|g| g[j]).unwrap_or(0.0);
            let e = rel_err(analytic, numeric);
            report.checked += 1;
            if e >= report.max_rel_err {
                report = GradCheck {
                    max_rel_err: e,
                    worst_input: pi,
                    worst_index: j,
                    analytic,
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}
