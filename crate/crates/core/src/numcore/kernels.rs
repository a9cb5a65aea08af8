//! Plain slice kernels shared by the tape ops.

use crate::scalar::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`.
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`.
pub fn matmul_a_bt_acc<S: Scalar>(g: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = S::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                s = s + x * y;
            }
            out[i * k + p] = out[i * k + p] + s;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`.
pub fn matmul_at_b_acc<S: Scalar>(a: &[S], g: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + aip * gv;
            }
        }
    }
}

/// Depthwise 1-D convolution over time of `x[t×d]` with `kernel[k×d]`;
/// `pad_left` zeros precede the sequence and the output keeps length `t`.
pub fn depthwise_conv<S: Scalar>(
    x: &[S],
    kernel: &[S],
    t: usize,
    d: usize,
    k: usize,
    pad_left: usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); t * d];
    for (ti, orow) in out.chunks_mut(d).enumerate() {
        for j in 0..k {
            let src = ti + j;
            if src < pad_left || src - pad_left >= t {
                continue;
            }
            let xrow = &x[(src - pad_left) * d..(src - pad_left + 1) * d];
            let krow = &kernel[j * d..(j + 1) * d];
            for c in 0..d {
                orow[c] = orow[c] + krow[c] * xrow[c];
            }
        }
    }
    out
}
