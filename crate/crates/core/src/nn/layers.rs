//! Slice-level kernels. Activations are `[h][w][c]` row-major with the channel
//! fastest; convolution weights are `[kh][kw][cin][cout]`.

use super::Tensor;
use crate::error::{Error, Result};

/// Zero-padded, stride-1 cross-correlation with a square odd kernel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[f64],
    bias: &[f64],
    k: usize,
    cout: usize,
    out: &mut [f64],
) {
    let r = (k / 2) as isize;
    for y in 0..h {
        for x in 0..w {
            let o = &mut out[(y * w + x) * cout..(y * w + x + 1) * cout];
            o.copy_from_slice(bias);
            for ky in 0..k {
                let yy = y as isize + ky as isize - r;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let xx = x as isize + kx as isize - r;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let base = (yy as usize * w + xx as usize) * cin;
                    for ci in 0..cin {
                        let v = input[base + ci];
                        let wrow = &weight[((ky * k + kx) * cin + ci) * cout..][..cout];
                        for (oc, wc) in o.iter_mut().zip(wrow) {
                            *oc += v * wc;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight, bias and (optionally) input gradients of `conv_forward`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[f64],
    k: usize,
    cout: usize,
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    mut grad_input: Option<&mut [f64]>,
) {
    let r = (k / 2) as isize;
    for y in 0..h {
        for x in 0..w {
            let g = &grad_out[(y * w + x) * cout..(y * w + x + 1) * cout];
            for (gb, gv) in grad_bias.iter_mut().zip(g) {
                *gb += gv;
            }
            for ky in 0..k {
                let yy = y as isize + ky as isize - r;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let xx = x as isize + kx as isize - r;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let base = (yy as usize * w + xx as usize) * cin;
                    for ci in 0..cin {
                        let off = ((ky * k + kx) * cin + ci) * cout;
                        let v = input[base + ci];
                        for (gw, gv) in grad_weight[off..off + cout].iter_mut().zip(g) {
                            *gw += v * gv;
                        }
                        if let Some(gi) = grad_input.as_deref_mut() {
                            gi[base + ci] += weight[off..off + cout]
                                .iter()
                                .zip(g)
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn pooled(n: usize) -> usize {
    n.div_ceil(2)
}

/// 2x2 max-pool, stride 2, partial windows at the far edge kept.
/// Records the flat input index of each maximum (first wins on ties).
pub(crate) fn maxpool_forward(
    input: &[f64],
    h: usize,
    w: usize,
    c: usize,
    out: &mut [f64],
    argmax: &mut [usize],
) {
    let (oh, ow) = (pooled(h), pooled(w));
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for x in 2 * ox..(2 * ox + 2).min(w) {
                        let idx = (y * w + x) * c + ch;
                        if input[idx] > best {
                            best = input[idx];
                            at = idx;
                        }
                    }
                }
                let o = (oy * ow + ox) * c + ch;
                out[o] = best;
                argmax[o] = at;
            }
        }
    }
}

/// `out = weight * input + bias`, weight `[n_out][n_in]`.
pub(crate) fn dense_forward(input: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let n_in = input.len();
    for (j, o) in out.iter_mut().enumerate() {
        *o = bias[j]
            + weight[j * n_in..(j + 1) * n_in]
                .iter()
                .zip(input)
                .map(|(a, b)| a * b)
                .sum::<f64>();
    }
}

pub(crate) fn dense_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    grad_input: Option<&mut [f64]>,
) {
    let n_in = input.len();
    for (j, &g) in grad_out.iter().enumerate() {
        grad_bias[j] += g;
        if g == 0.0 {
            continue;
        }
        for (gw, x) in grad_weight[j * n_in..(j + 1) * n_in].iter_mut().zip(input) {
            *gw += g * x;
        }
    }
    if let Some(gi) = grad_input {
        gi.iter_mut().for_each(|v| *v = 0.0);
        for (j, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (v, wv) in gi.iter_mut().zip(&weight[j * n_in..(j + 1) * n_in]) {
                *v += g * wv;
            }
        }
    }
}

#[inline]
pub(crate) fn relu_inplace(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Cross-correlation of an `[h, w, cin]` input with `[k, k, cin, cout]`
/// kernels, zero padding `k / 2`, stride 1.
pub fn conv2d_forward(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [h, w, cin] = input.shape[..] else {
        return Err(Error::ShapeMismatch(format!(
            "conv input must be [h, w, c], got {:?}",
            input.shape
        )));
    };
    let [kh, kw, kc, cout] = kernels.shape[..] else {
        return Err(Error::ShapeMismatch(format!(
            "kernels must be [k, k, cin, cout], got {:?}",
            kernels.shape
        )));
    };
    if kh != kw || kh % 2 == 0 || kc != cin {
        return Err(Error::ShapeMismatch(format!(
            "kernel {:?} incompatible with input {:?}",
            kernels.shape, input.shape
        )));
    }
    if bias.shape != [cout] {
        return Err(Error::ShapeMismatch(format!(
            "bias {:?} does not match {cout} output channels",
            bias.shape
        )));
    }
    let mut out = Tensor::zeros(&[h, w, cout]);
    conv_forward(
        &input.data,
        h,
        w,
        cin,
        &kernels.data,
        &bias.data,
        kh,
        cout,
        &mut out.data,
    );
    Ok(out)
}
