//! Selective state-space scan.
//!
//! For every inner channel `i` and state index `n`:
//!
//! ```text
//! h_t[i,n] = exp(Δ_t[i]·A[i,n]) · h_{t-1}[i,n] + Δ_t[i]·B_t[n]·u_t[i],   h_0 = 0
//! y_t[i]   = Σ_n C_t[n]·h_t[i,n] + D[i]·u_t[i]
//! ```
//!
//! `A` is discretized with a zero-order hold and `B` with an Euler step.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numcore::{CustomOp, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Borrowed, shape-checked scan operands.
#[derive(Debug, Clone, Copy)]
pub struct ScanInputs<'a, S> {
    /// `[T × d_inner]`
    pub u: &'a [S],
    /// `[T × d_inner]`, strictly positive.
    pub delta: &'a [S],
    /// `[d_inner × d_state]`
    pub a: &'a [S],
    /// `[T × d_state]`
    pub b: &'a [S],
    /// `[T × d_state]`
    pub c: &'a [S],
    /// `[d_inner]`
    pub d_skip: &'a [S],
    pub len: usize,
    pub d_inner: usize,
    pub d_state: usize,
}

impl<'a, S: Scalar> ScanInputs<'a, S> {
    pub fn from_tensors(
        u: &'a Tensor<S>,
        delta: &'a Tensor<S>,
        a: &'a Tensor<S>,
        b: &'a Tensor<S>,
        c: &'a Tensor<S>,
        d_skip: &'a Tensor<S>,
    ) -> Result<Self> {
        let (len, d_inner) = u.as_matrix_dims();
        let d_state = a.cols();
        if delta.shape() != u.shape() {
            return Err(Error::shape("selective_scan(delta)", u.shape(), delta.shape()));
        }
        if a.len() != d_inner * d_state {
            return Err(Error::shape("selective_scan(A)", u.shape(), a.shape()));
        }
        if b.len() != len * d_state || b.cols() != d_state {
            return Err(Error::shape("selective_scan(B)", a.shape(), b.shape()));
        }
        if c.shape() != b.shape() {
            return Err(Error::shape("selective_scan(C)", b.shape(), c.shape()));
        }
        if d_skip.len() != d_inner {
            return Err(Error::shape("selective_scan(D)", u.shape(), d_skip.shape()));
        }
        if let Some(bad) = delta.data().iter().find(|&&v| !(v > S::zero())) {
            return Err(Error::Contract(format!(
                "selective scan step sizes must be positive, found {bad}"
            )));
        }
        Ok(Self {
            u: u.data(),
            delta: delta.data(),
            a: a.data(),
            b: b.data(),
            c: c.data(),
            d_skip: d_skip.data(),
            len,
            d_inner,
            d_state,
        })
    }

    /// Runs frames `start..end` from state `h` (updated in place), writing
    /// outputs for those frames into `y` and optionally every state into `states`.
    fn run(&self, start: usize, end: usize, h: &mut [S], y: &mut [S], mut states: Option<&mut [S]>) {
        let (d, n) = (self.d_inner, self.d_state);
        for t in start..end {
            let bt = &self.b[t * n..(t + 1) * n];
            let ct = &self.c[t * n..(t + 1) * n];
            for i in 0..d {
                let dt = self.delta[t * d + i];
                let ut = self.u[t * d + i];
                let du = dt * ut;
                let hi = &mut h[i * n..(i + 1) * n];
                let ai = &self.a[i * n..(i + 1) * n];
                let mut acc = S::zero();
                for k in 0..n {
                    hi[k] = (dt * ai[k]).exp() * hi[k] + du * bt[k];
                    acc = acc + ct[k] * hi[k];
                }
                y[(t - start) * d + i] = acc + self.d_skip[i] * ut;
            }
            if let Some(st) = states.as_deref_mut() {
                st[(t - start) * d * n..(t - start + 1) * d * n].copy_from_slice(h);
            }
        }
    }
}

/// Sequential scan; returns `y[T × d_inner]`.
pub fn selective_scan<S: Scalar>(
    u: &Tensor<S>,
    delta: &Tensor<S>,
    a: &Tensor<S>,
    b: &Tensor<S>,
    c: &Tensor<S>,
    d_skip: &Tensor<S>,
) -> Result<Tensor<S>> {
    let inp = ScanInputs::from_tensors(u, delta, a, b, c, d_skip)?;
    let mut h = vec![S::zero(); inp.d_inner * inp.d_state];
    let mut y = vec![S::zero(); inp.len * inp.d_inner];
    inp.run(0, inp.len, &mut h, &mut y, None);
    Tensor::new(&[inp.len, inp.d_inner], y)
}

/// Chunked scan exploiting associativity of the affine state map.
///
/// Each chunk first computes, in parallel, its zero-initialized end state and
/// its cumulative decay. A short sequential pass composes those into the true
/// state entering each chunk, after which chunks are re-scanned in parallel.
pub fn selective_scan_chunked<S: Scalar>(
    u: &Tensor<S>,
    delta: &Tensor<S>,
    a: &Tensor<S>,
    b: &Tensor<S>,
    c: &Tensor<S>,
    d_skip: &Tensor<S>,
    chunk: usize,
) -> Result<Tensor<S>> {
    if chunk == 0 {
        return Err(Error::Config("scan chunk size must be positive".into()));
    }
    let inp = ScanInputs::from_tensors(u, delta, a, b, c, d_skip)?;
    let (d, n, len) = (inp.d_inner, inp.d_state, inp.len);
    let bounds: Vec<(usize, usize)> = (0..len)
        .step_by(chunk)
        .map(|s| (s, (s + chunk).min(len)))
        .collect();

    // (end state from zero, cumulative decay) per chunk
    let summaries: Vec<(Vec<S>, Vec<S>)> = bounds
        .par_iter()
        .map(|&(s, e)| {
            let mut h = vec![S::zero(); d * n];
            let mut decay = vec![S::one(); d * n];
            for t in s..e {
                let bt = &inp.b[t * n..(t + 1) * n];
                for i in 0..d {
                    let dt = inp.delta[t * d + i];
                    let du = dt * inp.u[t * d + i];
                    for k in 0..n {
                        let ak = (dt * inp.a[i * n + k]).exp();
                        h[i * n + k] = ak * h[i * n + k] + du * bt[k];
                        decay[i * n + k] = decay[i * n + k] * ak;
                    }
                }
            }
            (h, decay)
        })
        .collect();

    let mut carries = Vec::with_capacity(bounds.len());
    let mut state = vec![S::zero(); d * n];
    for (h_end, decay) in &summaries {
        carries.push(state.clone());
        for j in 0..d * n {
            state[j] = h_end[j] + decay[j] * state[j];
        }
    }

    let pieces: Vec<Vec<S>> = bounds
        .par_iter()
        .zip(carries.into_par_iter())
        .map(|(&(s, e), mut h)| {
            let mut y = vec![S::zero(); (e - s) * d];
            inp.run(s, e, &mut h, &mut y, None);
            y
        })
        .collect();
    Tensor::new(&[len, d], pieces.concat())
}

struct ScanOp<S> {
    states: Vec<S>,
    len: usize,
    d_inner: usize,
    d_state: usize,
}

impl<S: Scalar> CustomOp<S> for ScanOp<S> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor<S>], _output: &Tensor<S>, gy: &[S]) -> Vec<Vec<S>> {
        let (len, d, n) = (self.len, self.d_inner, self.d_state);
        let (u, delta, a, b, c, dskip) = (
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
            inputs[4].data(),
            inputs[5].data(),
        );
        let mut gu = vec![S::zero(); len * d];
        let mut gdelta = vec![S::zero(); len * d];
        let mut ga = vec![S::zero(); d * n];
        let mut gb = vec![S::zero(); len * n];
        let mut gc = vec![S::zero(); len * n];
        let mut gd = vec![S::zero(); d];
        // gradient flowing into h_t from later frames
        let mut carry = vec![S::zero(); d * n];
        let zeros = vec![S::zero(); d * n];
        for t in (0..len).rev() {
            let h_t = &self.states[t * d * n..(t + 1) * d * n];
            let h_prev = if t == 0 {
                &zeros[..]
            } else {
                &self.states[(t - 1) * d * n..t * d * n]
            };
            let bt = &b[t * n..(t + 1) * n];
            let ct = &c[t * n..(t + 1) * n];
            for i in 0..d {
                let g = gy[t * d + i];
                let ut = u[t * d + i];
                let dt = delta[t * d + i];
                gd[i] = gd[i] + g * ut;
                gu[t * d + i] = gu[t * d + i] + g * dskip[i];
                let mut g_delta = S::zero();
                let mut g_u = S::zero();
                for k in 0..n {
                    let j = i * n + k;
                    gc[t * n + k] = gc[t * n + k] + g * h_t[j];
                    let dh = carry[j] + g * ct[k];
                    let decay = (dt * a[j]).exp();
                    let g_decay = dh * h_prev[j] * decay;
                    g_delta = g_delta + g_decay * a[j] + dh * bt[k] * ut;
                    ga[j] = ga[j] + g_decay * dt;
                    gb[t * n + k] = gb[t * n + k] + dh * dt * ut;
                    g_u = g_u + dh * dt * bt[k];
                    carry[j] = dh * decay;
                }
                gdelta[t * d + i] = gdelta[t * d + i] + g_delta;
                gu[t * d + i] = gu[t * d + i] + g_u;
            }
        }
        vec![gu, gdelta, ga, gb, gc, gd]
    }
}

/// Differentiable sequential scan recorded on a tape.
pub fn selective_scan_op<S: Scalar>(
    tape: &mut Tape<S>,
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    d_skip: Var,
) -> Result<Var> {
    let (y, op) = {
        let inp = ScanInputs::from_tensors(
            tape.value(u),
            tape.value(delta),
            tape.value(a),
            tape.value(b),
            tape.value(c),
            tape.value(d_skip),
        )?;
        let (len, d, n) = (inp.len, inp.d_inner, inp.d_state);
        let mut h = vec![S::zero(); d * n];
        let mut y = vec![S::zero(); len * d];
        let mut states = vec![S::zero(); len * d * n];
        inp.run(0, len, &mut h, &mut y, Some(&mut states));
        (
            Tensor::new(&[len, d], y)?,
            ScanOp {
                states,
                len,
                d_inner: d,
                d_state: n,
            },
        )
    };
    Ok(tape.custom(&[u, delta, a, b, c, d_skip], y, Box::new(op)))
}
