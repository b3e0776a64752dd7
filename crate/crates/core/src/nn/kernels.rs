//! Raw forward/backward kernels. Shapes are validated by the tape before these run.

use super::Tensor;
use crate::error::{Error, Result};

/// `c = a * b + beta * c` with optional transposes; all operands row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above; strides describe exactly those extents.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (n, cin, h, w) = x.dims4()?;
        let (cout, wcin, kh, kw) = weight.dims4()?;
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv input has {cin} channels, kernel expects {wcin}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Shape(format!("conv kernel must be square and odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::Shape("conv stride must be positive".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!("conv kernel {kh}x{kw} larger than padded input")));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom { n, cin, h, w, cout, k: kh, stride, pad, ho, wo })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let p = g.out_len();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * p;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let p = g.out_len();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * p;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: &ConvGeom) -> Tensor {
    let (kl, p) = (g.patch_len(), g.out_len());
    let mut out = Tensor::zeros([g.n, g.cout, g.ho, g.wo]);
    let mut cols = vec![0.0f32; kl * p];
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * p;
    for b in 0..g.n {
        im2col(&x.data()[b * in_stride..(b + 1) * in_stride], g, &mut cols);
        let dst = &mut out.data_mut()[b * out_stride..(b + 1) * out_stride];
        gemm(g.cout, kl, p, weight.data(), false, &cols, false, 0.0, dst);
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_exact_mut(p).enumerate() {
                let bv = bias.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Option<Tensor>,
    pub db: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    go: &Tensor,
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads {
    let (kl, p) = (g.patch_len(), g.out_len());
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * p;
    let mut dx = need.0.then(|| Tensor::zeros(x.shape().to_vec()));
    let mut dw = need.1.then(|| Tensor::zeros(weight.shape().to_vec()));
    let mut db = need.2.then(|| Tensor::zeros([g.cout]));
    let mut cols = vec![0.0f32; kl * p];
    for b in 0..g.n {
        let gout = &go.data()[b * out_stride..(b + 1) * out_stride];
        if let Some(dw) = dw.as_mut() {
            im2col(&x.data()[b * in_stride..(b + 1) * in_stride], g, &mut cols);
            gemm(g.cout, p, kl, gout, false, &cols, true, 1.0, dw.data_mut());
        }
        if let Some(db) = db.as_mut() {
            for (co, chunk) in gout.chunks_exact(p).enumerate() {
                db.data_mut()[co] += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
        }
        if let Some(dx) = dx.as_mut() {
            gemm(kl, g.cout, p, weight.data(), true, gout, false, 0.0, &mut cols);
            col2im(&cols, g, &mut dx.data_mut()[b * in_stride..(b + 1) * in_stride]);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Triangular soft binning over 256 bins centered at `(k + 0.5) / 256`.
///
/// Inputs are clamped to `[c_0, c_255]`, so every sample carries unit mass.
/// Returns `(lower_bin, upper_weight, active)` where the sample contributes
/// `1 - upper_weight` to `lower_bin` and `upper_weight` to `lower_bin + 1`.
#[inline]
pub(crate) fn soft_bin(v: f32) -> (usize, f64, bool) {
    const BINS: f64 = 256.0;
    let lo = 0.5 / BINS;
    let hi = 255.5 / BINS;
    let v = v as f64;
    let active = v > lo && v < hi;
    let t = v.clamp(lo, hi) * BINS - 0.5;
    let k = (t.floor() as usize).min(254);
    (k, t - k as f64, active)
}

pub(crate) const SOFT_BINS: usize = 256;
