//! 2-D convolution lowered to im2col + GEMM.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    /// (vertical, horizontal)
    pub stride: (usize, usize),
    /// (vertical, horizontal) zero padding
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn square(stride: usize, padding: usize) -> Self {
        Self { stride: (stride, stride), padding: (padding, padding) }
    }
}

pub(crate) fn output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Row-major C[m×n] = alpha·A·B + beta·C with arbitrary strides on A and B.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let max_index = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
        (rows.saturating_sub(1)) as isize * rs + (cols.saturating_sub(1)) as isize * cs
    };
    assert!(k == 0 || (max_index(m, k, a_strides) as usize) < a.len());
    assert!(k == 0 || (max_index(k, n, b_strides) as usize) < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every element dgemm reads from a/b and
    // writes to c; all strides are non-negative.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub geom: ConvGeometry,
}

impl ConvDims {
    pub fn resolve(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, geom: ConvGeometry) -> Result<Self> {
        let [n, c, h, w] = input.dims4("conv2d input")?;
        let [o, ci, kh, kw] = weight.dims4("conv2d weight")?;
        if ci != c {
            return Err(Error::shape("conv2d", format!("input has {c} channels but weight expects {ci}")));
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(Error::shape("conv2d", format!("bias shape {:?} does not match {o} outputs", b.shape())));
            }
        }
        let (sh, sw) = geom.stride;
        let (ph, pw) = geom.padding;
        let ho = output_len(h, kh, sh, ph);
        let wo = output_len(w, kw, sw, pw);
        match (ho, wo) {
            (Some(ho), Some(wo)) => Ok(Self { n, c, h, w, o, kh, kw, ho, wo, geom }),
            _ => Err(Error::shape(
                "conv2d",
                format!("{h}x{w} input with padding {ph},{pw} is smaller than the {kh}x{kw} kernel (or stride is 0)"),
            )),
        }
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geom.stride == (1, 1) && self.geom.padding == (0, 0)
    }
}

/// Output columns `ox` whose input column `ox·stride + k - pad` lies in `[0, w)`.
fn valid_cols(wo: usize, w: usize, k: usize, stride: usize, pad: usize) -> std::ops::Range<usize> {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    // ox·stride + k - pad ≤ w - 1
    let hi = if w + pad > k { ((w + pad - k - 1) / stride + 1).min(wo) } else { 0 };
    lo..hi.max(lo)
}

fn im2col(d: &ConvDims, image: &[f64], cols: &mut [f64]) {
    let (sh, sw) = d.geom.stride;
    let (ph, pw) = d.geom.padding;
    let plane = d.out_plane();
    for ch in 0..d.c {
        let src = &image[ch * d.h * d.w..(ch + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ch * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let valid = valid_cols(d.wo, d.w, kx, sw, pw);
                for oy in 0..d.ho {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    let out_row = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy as usize >= d.h || valid.is_empty() {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * d.w..(iy as usize + 1) * d.w];
                    out_row[..valid.start].fill(0.0);
                    out_row[valid.end..].fill(0.0);
                    let first = valid.start * sw + kx - pw;
                    if sw == 1 {
                        out_row[valid.clone()].copy_from_slice(&src_row[first..first + valid.len()]);
                    } else {
                        for (j, v) in out_row[valid.clone()].iter_mut().enumerate() {
                            *v = src_row[first + j * sw];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(d: &ConvDims, cols: &[f64], image: &mut [f64]) {
    let (sh, sw) = d.geom.stride;
    let (ph, pw) = d.geom.padding;
    let plane = d.out_plane();
    for ch in 0..d.c {
        let dst = &mut image[ch * d.h * d.w..(ch + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ch * d.kh + ky) * d.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let valid = valid_cols(d.wo, d.w, kx, sw, pw);
                if valid.is_empty() {
                    continue;
                }
                let first = valid.start * sw + kx - pw;
                for oy in 0..d.ho {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let src_row = &src[oy * d.wo + valid.start..oy * d.wo + valid.end];
                    for (j, v) in src_row.iter().enumerate() {
                        dst_row[first + j * sw] += v;
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(d: &ConvDims, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let patch = d.patch();
    let plane = d.out_plane();
    let mut out = vec![0.0; d.n * d.o * plane];
    let mut cols = if d.is_pointwise() { Vec::new() } else { vec![0.0; patch * plane] };
    for n in 0..d.n {
        let image = &input[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w];
        let out_n = &mut out[n * d.o * plane..(n + 1) * d.o * plane];
        if let Some(b) = bias {
            for (o, chunk) in out_n.chunks_mut(plane).enumerate() {
                chunk.fill(b[o]);
            }
        }
        let b_mat: &[f64] = if d.is_pointwise() {
            image
        } else {
            im2col(d, image, &mut cols);
            &cols
        };
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(d.o, patch, plane, 1.0, weight, (patch as isize, 1), b_mat, (plane as isize, 1), beta, out_n);
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn backward(
    d: &ConvDims,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads {
    let patch = d.patch();
    let plane = d.out_plane();
    let mut g_input = need_input.then(|| vec![0.0; input.len()]);
    let mut g_weight = need_weight.then(|| vec![0.0; weight.len()]);
    let g_bias = need_bias.then(|| {
        let mut gb = vec![0.0; d.o];
        for n in 0..d.n {
            for (o, acc) in gb.iter_mut().enumerate() {
                let start = (n * d.o + o) * plane;
                *acc += grad_out[start..start + plane].iter().sum::<f64>();
            }
        }
        gb
    });
    let pointwise = d.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; patch * plane] };
    for n in 0..d.n {
        let image = &input[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w];
        let g_out_n = &grad_out[n * d.o * plane..(n + 1) * d.o * plane];
        if let Some(gw) = g_weight.as_mut() {
            let b_mat: &[f64] = if pointwise {
                image
            } else {
                im2col(d, image, &mut cols);
                &cols
            };
            // dW += dY · colsᵀ
            gemm(d.o, plane, patch, 1.0, g_out_n, (plane as isize, 1), b_mat, (1, plane as isize), 1.0, gw);
        }
        if let Some(gi) = g_input.as_mut() {
            let gi_n = &mut gi[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w];
            if pointwise {
                gemm(patch, d.o, plane, 1.0, weight, (1, patch as isize), g_out_n, (plane as isize, 1), 1.0, gi_n);
            } else {
                // dcols = Wᵀ · dY
                gemm(patch, d.o, plane, 1.0, weight, (1, patch as isize), g_out_n, (plane as isize, 1), 0.0, &mut cols);
                col2im(d, &cols, gi_n);
            }
        }
    }
    ConvGrads { input: g_input, weight: g_weight, bias: g_bias }
}
