//! Forward/backward kernels for the non-convolution operators.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolGeometry {
    /// Non-overlapping 2×2 downsampling.
    pub const DOWN2: Self = Self { kernel: 2, stride: 2, padding: 0 };
    /// Same-size 3×3 neighbourhood maximum.
    pub const NEIGHBORHOOD3: Self = Self { kernel: 3, stride: 1, padding: 1 };
}

pub(crate) struct Pooled {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub argmax: Vec<usize>,
}

pub(crate) fn max_pool(input: &Tensor, geom: PoolGeometry) -> Result<Pooled> {
    let [n, c, h, w] = input.dims4("max_pool2d")?;
    if geom.kernel == 0 || geom.padding >= geom.kernel {
        return Err(Error::shape("max_pool2d", "padding must be smaller than a non-empty kernel"));
    }
    let ho = super::conv::output_len(h, geom.kernel, geom.stride, geom.padding);
    let wo = super::conv::output_len(w, geom.kernel, geom.stride, geom.padding);
    let (ho, wo) = match (ho, wo) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::shape("max_pool2d", format!("{h}x{w} input too small for {geom:?}"))),
    };
    let src = input.data();
    let mut data = vec![0.0; n * c * ho * wo];
    let mut argmax = vec![0usize; data.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..geom.kernel {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..geom.kernel {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if src[idx] > best || best_idx == usize::MAX {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = plane * ho * wo + oy * wo + ox;
                data[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok(Pooled { shape: vec![n, c, ho, wo], data, argmax })
}

/// Max pooling outside of any tape, e.g. for peak finding on score maps.
pub fn max_pool2d_forward(input: &Tensor, geom: PoolGeometry) -> Result<Tensor> {
    let pooled = max_pool(input, geom)?;
    Ok(Tensor::from_parts(pooled.shape, pooled.data))
}

/// Source taps for ×2 bilinear upsampling along one axis (half-pixel centers,
/// edge-clamped): output `o` reads `(1-t)·in[i0] + t·in[i1]`.
fn upsample_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample2x(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4("upsample2x")?;
    if h == 0 || w == 0 {
        return Err(Error::shape("upsample2x", "empty spatial dims"));
    }
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (h2, w2) = (2 * h, 2 * w);
    let src = input.data();
    let mut out = vec![0.0; n * c * h2 * w2];
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = s[y0 * w + x0] * (1.0 - fx) + s[y0 * w + x1] * fx;
                let bot = s[y1 * w + x0] * (1.0 - fx) + s[y1 * w + x1] * fx;
                d[oy * w2 + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h2, w2], out))
}

pub(crate) fn upsample2x_backward(shape: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (h2, w2) = (2 * h, 2 * w);
    let mut g = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let go = &grad_out[plane * h2 * w2..(plane + 1) * h2 * w2];
        let gi = &mut g[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = go[oy * w2 + ox];
                gi[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                gi[y0 * w + x1] += v * (1.0 - fy) * fx;
                gi[y1 * w + x0] += v * fy * (1.0 - fx);
                gi[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    g
}

/// (outer, channels, inner) extents for an operation over dimension 1.
pub(crate) fn channel_layout(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("expected at least 2 dims, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

pub(crate) fn softmax_channels(input: &Tensor, log: bool) -> Result<Vec<f64>> {
    let (outer, ch, inner) = channel_layout(input.shape(), "softmax")?;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |c: usize| (o * ch + c) * inner + i;
            let max = (0..ch).map(|c| x[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..ch).map(|c| (x[at(c)] - max).exp()).sum();
            let log_sum = sum.ln();
            for c in 0..ch {
                let z = x[at(c)] - max;
                out[at(c)] = if log { z - log_sum } else { z.exp() / sum };
            }
        }
    }
    Ok(out)
}

/// Backward of softmax (`log == false`, `out` = probabilities) or
/// log-softmax (`log == true`, `out` = log-probabilities).
pub(crate) fn softmax_channels_backward(shape: &[usize], out: &[f64], grad_out: &[f64], log: bool) -> Vec<f64> {
    let (outer, ch, inner) = channel_layout(shape, "softmax").expect("validated on forward");
    let mut g = vec![0.0; out.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |c: usize| (o * ch + c) * inner + i;
            if log {
                let total: f64 = (0..ch).map(|c| grad_out[at(c)]).sum();
                for c in 0..ch {
                    g[at(c)] = grad_out[at(c)] - out[at(c)].exp() * total;
                }
            } else {
                let dot: f64 = (0..ch).map(|c| grad_out[at(c)] * out[at(c)]).sum();
                for c in 0..ch {
                    g[at(c)] = out[at(c)] * (grad_out[at(c)] - dot);
                }
            }
        }
    }
    g
}
