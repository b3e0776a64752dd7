//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so walking the node list backwards
//! from the loss visits every node after all of its consumers.

use std::cell::{Ref, RefCell};

use super::kernels::{self, ConvGeom, SOFT_BINS};
use super::Tensor;
use crate::error::{Error, Result};
use crate::imaging::{srgb_oetf, SRGB_KNEE};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Luminance guard shared with the imaging recolorization.
pub const RECOLOR_EPS: f32 = 1e-6;
/// Dot products this close to +-1 get a zero arccos derivative.
pub const ACOS_GUARD: f64 = 1e-7;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    LeakyRelu(Var, f32),
    Sigmoid(Var),
    Softplus(Var),
    SrgbEncode(Var),
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2(Var),
    GlobalAvgPool(Var),
    ScaleChannels { x: Var, s: Var },
    AddSpatial { x: Var, v: Var },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Concat(Var, Var),
    Channel { x: Var, c: usize },
    WhiteBalance { x: Var, illum: Var },
    ColorMatrix { x: Var, matrices: Vec<[[f32; 3]; 3]> },
    Recolorize { x: Var, luma: usize, pred: Var },
    L2Normalize(Var),
    SoftHistogram(Var),
    AbsDiffSum { a: Var, b: Var, scale: f64 },
    Angular { pred: Var, truth: Var },
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients indexed by node; `None` where nothing flowed.
#[derive(Debug)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn map(x: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

#[inline]
fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(v: f32) -> f32 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf with explicit gradient tracking, for gradient checks on inputs.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = {
            let (xv, wv) = (self.value(x), self.value(w));
            let g = ConvGeom::new(&xv, &wv, stride, pad)?;
            let bv = b.map(|b| self.value(b));
            if let Some(bv) = bv.as_deref() {
                if bv.shape() != [g.cout] {
                    return Err(Error::Shape(format!(
                        "conv bias {:?} does not match {} output channels",
                        bv.shape(),
                        g.cout
                    )));
                }
            }
            kernels::conv2d_forward(&xv, &wv, bv.as_deref(), &g)
        };
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    /// `x (N, in) -> x * w^T + b` with `w (out, in)`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = {
            let (xv, wv) = (self.value(x), self.value(w));
            let (n, fin) = xv.dims2()?;
            let (fout, wfin) = wv.dims2()?;
            if wfin != fin {
                return Err(Error::Shape(format!("linear input width {fin}, weight expects {wfin}")));
            }
            let mut out = Tensor::zeros([n, fout]);
            kernels::gemm(n, fin, fout, xv.data(), false, wv.data(), true, 0.0, out.data_mut());
            if let Some(b) = b {
                let bv = self.value(b);
                if bv.shape() != [fout] {
                    return Err(Error::Shape(format!("linear bias {:?} vs {fout}", bv.shape())));
                }
                for row in out.data_mut().chunks_exact_mut(fout) {
                    row.iter_mut().zip(bv.data()).for_each(|(o, b)| *o += b);
                }
            }
            out
        };
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn relu(&self, x: Var) -> Var {
        let out = map(&self.value(x), |v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Leaky rectifier with a fixed negative slope.
    pub fn leaky_relu(&self, x: Var, slope: f32) -> Var {
        let out = map(&self.value(x), |v| if v >= 0.0 { v } else { slope * v });
        let rg = self.rg(&[x]);
        self.push(out, Op::LeakyRelu(x, slope), rg)
    }

    /// Rectifier with the 0.2 negative slope used throughout the network.
    pub fn prelu(&self, x: Var) -> Var {
        self.leaky_relu(x, 0.2)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = map(&self.value(x), sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn softplus(&self, x: Var) -> Var {
        let out = map(&self.value(x), softplus);
        let rg = self.rg(&[x]);
        self.push(out, Op::Softplus(x), rg)
    }

    /// sRGB transfer curve on values clipped to `[0, 1]`.
    pub fn srgb_encode(&self, x: Var) -> Var {
        let out = map(&self.value(x), |v| srgb_oetf(v.clamp(0.0, 1.0) as f64) as f32);
        let rg = self.rg(&[x]);
        self.push(out, Op::SrgbEncode(x), rg)
    }

    /// 2x2 max pooling, stride 2.
    pub fn max_pool2(&self, x: Var) -> Result<Var> {
        let (out, argmax) = {
            let xv = self.value(x);
            let (n, c, h, w) = xv.dims4()?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::Shape(format!("max_pool2 needs even spatial dims, got {h}x{w}")));
            }
            let (ho, wo) = (h / 2, w / 2);
            let mut out = Tensor::zeros([n, c, ho, wo]);
            let mut argmax = vec![0u32; n * c * ho * wo];
            let src = xv.data();
            for plane in 0..n * c {
                let base = plane * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let cands = [
                            base + 2 * oy * w + 2 * ox,
                            base + 2 * oy * w + 2 * ox + 1,
                            base + (2 * oy + 1) * w + 2 * ox,
                            base + (2 * oy + 1) * w + 2 * ox + 1,
                        ];
                        let mut best = cands[0];
                        for &i in &cands[1..] {
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                        let o = plane * ho * wo + oy * wo + ox;
                        out.data_mut()[o] = src[best];
                        argmax[o] = best as u32;
                    }
                }
            }
            (out, argmax)
        };
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Nearest-neighbor x2 upsampling.
    pub fn upsample2(&self, x: Var) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let (n, c, h, w) = xv.dims4()?;
            let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
            let src = xv.data();
            let dst = out.data_mut();
            for plane in 0..n * c {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        dst[plane * 4 * h * w + y * 2 * w + x] = src[plane * h * w + (y / 2) * w + x / 2];
                    }
                }
            }
            out
        };
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Upsample2(x), rg))
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let (n, c, h, w) = xv.dims4()?;
            let hw = h * w;
            let data = xv
                .data()
                .chunks_exact(hw)
                .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
                .collect();
            Tensor::new([n, c], data)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    /// Multiplies each `(n, c)` feature plane by `s[n, c]`.
    pub fn scale_channels(&self, x: Var, s: Var) -> Result<Var> {
        let out = {
            let (xv, sv) = (self.value(x), self.value(s));
            let (n, c, h, w) = xv.dims4()?;
            if sv.shape() != [n, c] {
                return Err(Error::Shape(format!(
                    "channel weights {:?} do not match features {:?}",
                    sv.shape(),
                    xv.shape()
                )));
            }
            let hw = h * w;
            let mut out = xv.clone();
            for (plane, chunk) in out.data_mut().chunks_exact_mut(hw).enumerate() {
                let k = sv.data()[plane];
                chunk.iter_mut().for_each(|v| *v *= k);
            }
            out
        };
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::ScaleChannels { x, s }, rg))
    }

    /// Broadcast-adds `v (N, C)` over every spatial position of `x (N, C, H, W)`.
    pub fn add_spatial(&self, x: Var, v: Var) -> Result<Var> {
        let out = {
            let (xv, vv) = (self.value(x), self.value(v));
            let (n, c, h, w) = xv.dims4()?;
            if vv.shape() != [n, c] {
                return Err(Error::Shape(format!(
                    "broadcast vector {:?} does not match features {:?}",
                    vv.shape(),
                    xv.shape()
                )));
            }
            let mut out = xv.clone();
            for (plane, chunk) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
                let a = vv.data()[plane];
                chunk.iter_mut().for_each(|x| *x += a);
            }
            out
        };
        let rg = self.rg(&[x, v]);
        Ok(self.push(out, Op::AddSpatial { x, v }, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            same_shape(&av, &bv, "add")?;
            let mut out = av.clone();
            out.add_assign(&bv);
            out
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            same_shape(&av, &bv, "mul")?;
            let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
            Tensor::new(av.shape().to_vec(), data)?
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&self, x: Var, k: f32) -> Var {
        let out = map(&self.value(x), |v| v * k);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, k), rg)
    }

    /// Channel concatenation of two `(N, *, H, W)` tensors.
    pub fn concat(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            let (n, ca, h, w) = av.dims4()?;
            let (nb, cb, hb, wb) = bv.dims4()?;
            if (n, h, w) != (nb, hb, wb) {
                return Err(Error::Shape(format!(
                    "concat: {:?} vs {:?}",
                    av.shape(),
                    bv.shape()
                )));
            }
            let (sa, sb) = (ca * h * w, cb * h * w);
            let mut data = Vec::with_capacity(n * (sa + sb));
            for i in 0..n {
                data.extend_from_slice(&av.data()[i * sa..(i + 1) * sa]);
                data.extend_from_slice(&bv.data()[i * sb..(i + 1) * sb]);
            }
            Tensor::new([n, ca + cb, h, w], data)?
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    /// Selects channel `c` as a `(N, 1, H, W)` tensor.
    pub fn channel(&self, x: Var, c: usize) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let (n, ch, h, w) = xv.dims4()?;
            if c >= ch {
                return Err(Error::Shape(format!("channel {c} out of range for {ch} channels")));
            }
            let hw = h * w;
            let mut data = Vec::with_capacity(n * hw);
            for i in 0..n {
                data.extend_from_slice(&xv.data()[(i * ch + c) * hw..(i * ch + c + 1) * hw]);
            }
            Tensor::new([n, 1, h, w], data)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Channel { x, c }, rg))
    }

    /// Green-anchored white balance: channel `c` times `illum_g / illum_c`, clipped to `[0, 1]`.
    pub fn white_balance(&self, x: Var, illum: Var) -> Result<Var> {
        let out = {
            let (xv, iv) = (self.value(x), self.value(illum));
            let (n, c, h, w) = xv.dims4()?;
            if c != 3 || iv.shape() != [n, 3] {
                return Err(Error::Shape(format!(
                    "white balance needs (N,3,H,W) and (N,3), got {:?} and {:?}",
                    xv.shape(),
                    iv.shape()
                )));
            }
            let hw = h * w;
            let mut out = xv.clone();
            for i in 0..n {
                let il = &iv.data()[i * 3..i * 3 + 3];
                if il.iter().any(|&v| v <= 0.0) {
                    return Err(Error::DegenerateInput("illuminant must be positive".into()));
                }
                for ch in 0..3 {
                    let k = il[1] / il[ch];
                    let plane = &mut out.data_mut()[(i * 3 + ch) * hw..(i * 3 + ch + 1) * hw];
                    plane.iter_mut().for_each(|v| *v = (*v * k).clamp(0.0, 1.0));
                }
            }
            out
        };
        let rg = self.rg(&[x, illum]);
        Ok(self.push(out, Op::WhiteBalance { x, illum }, rg))
    }

    /// Per-sample 3x3 color matrix, negatives clipped to zero.
    pub fn color_matrix(&self, x: Var, matrices: Vec<[[f32; 3]; 3]>) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let (n, c, h, w) = xv.dims4()?;
            if c != 3 || matrices.len() != n {
                return Err(Error::Shape(format!(
                    "color matrix needs (N,3,H,W) and N matrices, got {:?} and {}",
                    xv.shape(),
                    matrices.len()
                )));
            }
            let hw = h * w;
            let mut out = Tensor::zeros(xv.shape().to_vec());
            for (i, m) in matrices.iter().enumerate() {
                let src = &xv.data()[i * 3 * hw..(i + 1) * 3 * hw];
                let dst = &mut out.data_mut()[i * 3 * hw..(i + 1) * 3 * hw];
                for p in 0..hw {
                    let v = [src[p], src[hw + p], src[2 * hw + p]];
                    for (r, row) in m.iter().enumerate() {
                        dst[r * hw + p] = (row[0] * v[0] + row[1] * v[1] + row[2] * v[2]).max(0.0);
                    }
                }
            }
            out
        };
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::ColorMatrix { x, matrices }, rg))
    }

    /// `x * pred / (x[luma] + eps)` per pixel; `pred` is `(N, 1, H, W)`.
    pub fn recolorize(&self, x: Var, luma: usize, pred: Var) -> Result<Var> {
        let out = {
            let (xv, pv) = (self.value(x), self.value(pred));
            let (n, c, h, w) = xv.dims4()?;
            if luma >= c || pv.shape() != [n, 1, h, w] {
                return Err(Error::Shape(format!(
                    "recolorize: image {:?}, luma channel {luma}, brightness {:?}",
                    xv.shape(),
                    pv.shape()
                )));
            }
            let hw = h * w;
            let mut out = xv.clone();
            for i in 0..n {
                for p in 0..hw {
                    let y = xv.data()[(i * c + luma) * hw + p];
                    let r = pv.data()[i * hw + p] / (y + RECOLOR_EPS);
                    for ch in 0..c {
                        out.data_mut()[(i * c + ch) * hw + p] *= r;
                    }
                }
            }
            out
        };
        let rg = self.rg(&[x, pred]);
        Ok(self.push(out, Op::Recolorize { x, luma, pred }, rg))
    }

    /// Row-wise L2 normalization of `(N, D)`.
    pub fn l2_normalize(&self, x: Var) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let (n, d) = xv.dims2()?;
            let mut out = xv.clone();
            for row in out.data_mut().chunks_exact_mut(d) {
                let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::DegenerateInput("cannot normalize a zero vector".into()));
                }
                row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
            }
            let _ = n;
            out
        };
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::L2Normalize(x), rg))
    }

    /// Per-sample 256-bin triangular-kernel histogram, `(N, ...) -> (N, 256)`.
    pub fn soft_histogram(&self, x: Var) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let n = *xv.shape().first().unwrap_or(&0);
            if n == 0 || xv.numel() == 0 {
                return Err(Error::DegenerateInput("soft histogram of an empty tensor".into()));
            }
            let per = xv.numel() / n;
            let mut out = vec![0.0f32; n * SOFT_BINS];
            for i in 0..n {
                let mut acc = [0.0f64; SOFT_BINS];
                for &v in &xv.data()[i * per..(i + 1) * per] {
                    let (k, frac, _) = kernels::soft_bin(v);
                    acc[k] += 1.0 - frac;
                    acc[k + 1] += frac;
                }
                for (o, a) in out[i * SOFT_BINS..(i + 1) * SOFT_BINS].iter_mut().zip(acc) {
                    *o = (a / per as f64) as f32;
                }
            }
            Tensor::new([n, SOFT_BINS], out)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SoftHistogram(x), rg))
    }

    /// `scale * sum |a - b|` as a scalar.
    pub fn abs_diff_sum(&self, a: Var, b: Var, scale: f64) -> Result<Var> {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            same_shape(&av, &bv, "abs diff")?;
            let s: f64 = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| (*x as f64 - *y as f64).abs())
                .sum();
            Tensor::scalar((s * scale) as f32)
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::AbsDiffSum { a, b, scale }, rg))
    }

    /// Mean absolute difference.
    pub fn l1_loss(&self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::DegenerateInput("L1 loss of empty tensors".into()));
        }
        self.abs_diff_sum(a, b, 1.0 / n as f64)
    }

    /// L1 distance between soft histograms (summed over bins, averaged over the batch).
    pub fn hist_loss(&self, a: Var, b: Var) -> Result<Var> {
        {
            let (av, bv) = (self.value(a), self.value(b));
            same_shape(&av, &bv, "hist loss")?;
        }
        let ha = self.soft_histogram(a)?;
        let hb = self.soft_histogram(b)?;
        let n = self.shape(a)[0];
        self.abs_diff_sum(ha, hb, 1.0 / n as f64)
    }

    /// Mean angle in degrees between rows of `pred` and `truth`, both `(N, 3)`.
    /// Rows are normalized internally, so any positive scaling is allowed.
    pub fn angular_loss(&self, pred: Var, truth: Var) -> Result<Var> {
        let out = {
            let (pv, tv) = (self.value(pred), self.value(truth));
            same_shape(&pv, &tv, "angular loss")?;
            let (n, d) = pv.dims2()?;
            let mut total = 0.0f64;
            for i in 0..n {
                let (p, t) = (&pv.data()[i * d..(i + 1) * d], &tv.data()[i * d..(i + 1) * d]);
                total += angle_row(p, t)?.0;
            }
            Tensor::scalar((total / n as f64) as f32)
        };
        let rg = self.rg(&[pred, truth]);
        Ok(self.push(out, Op::Angular { pred, truth }, rg))
    }

    /// Sum of scalars.
    pub fn sum(&self, terms: &[Var]) -> Result<Var> {
        let out = {
            let mut s = 0.0f32;
            for &t in terms {
                let v = self.value(t);
                if v.numel() != 1 {
                    return Err(Error::Shape(format!("sum expects scalars, got {:?}", v.shape())));
                }
                s += v.item();
            }
            Tensor::scalar(s)
        };
        let rg = self.rg(terms);
        Ok(self.push(out, Op::Sum(terms.to_vec()), rg))
    }

    /// Backpropagates from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar, got {shape:?}")));
        }
        self.backward_from(loss, Tensor::new(shape, vec![1.0])?)
    }

    /// Backpropagates an explicit output gradient `seed` from `out`.
    pub fn backward_from(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        same_shape(&nodes[out.0].value, &seed, "backward seed")?;
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(go) = grads[idx].take() else { continue };
            let contribs = backward_node(&nodes, node, &go)?;
            // Keep the node's own gradient available to callers.
            grads[idx] = Some(go);
            for (v, g) in contribs {
                if !nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients(grads))
    }
}

/// Angle in degrees and d(angle)/d(dot), plus norms, for one row pair.
fn angle_row(p: &[f32], t: &[f32]) -> Result<(f64, f64, f64, f64, f64)> {
    let np = p.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    let nt = t.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    if np == 0.0 || nt == 0.0 {
        return Err(Error::DegenerateInput("angular loss of a zero vector".into()));
    }
    let dot = p.iter().zip(t).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / (np * nt);
    let dot = dot.clamp(-1.0, 1.0);
    // 2 atan2(|p^ - t^|, |p^ + t^|) equals acos(dot) but stays exact for
    // (anti)parallel rows, where acos loses half the digits
    let (mut dn, mut sn) = (0.0f64, 0.0f64);
    for (&a, &b) in p.iter().zip(t) {
        let (a, b) = (a as f64 / np, b as f64 / nt);
        dn += (a - b) * (a - b);
        sn += (a + b) * (a + b);
    }
    let deg = (2.0 * dn.sqrt().atan2(sn.sqrt())).to_degrees();
    let ddot = if dot.abs() < 1.0 - ACOS_GUARD {
        -(180.0 / std::f64::consts::PI) / (1.0 - dot * dot).sqrt()
    } else {
        0.0
    };
    Ok((deg, ddot, dot, np, nt))
}

fn val<'a>(nodes: &'a [Node], v: Var) -> &'a Tensor {
    &nodes[v.0].value
}

fn needs(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backward_node(nodes: &[Node], node: &Node, go: &Tensor) -> Result<Vec<(Var, Tensor)>> {
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, stride, pad } => {
            let (xv, wv) = (val(nodes, *x), val(nodes, *w));
            let g = ConvGeom::new(xv, wv, *stride, *pad)?;
            let need_b = b.is_some_and(|b| needs(nodes, b));
            let grads = kernels::conv2d_backward(xv, wv, go, &g, (needs(nodes, *x), needs(nodes, *w), need_b));
            out.extend(grads.dx.map(|d| (*x, d)));
            out.extend(grads.dw.map(|d| (*w, d)));
            if let (Some(b), Some(db)) = (b, grads.db) {
                out.push((*b, db));
            }
        }
        Op::Linear { x, w, b } => {
            let (xv, wv) = (val(nodes, *x), val(nodes, *w));
            let (n, fin) = xv.dims2()?;
            let (fout, _) = wv.dims2()?;
            if needs(nodes, *x) {
                let mut dx = Tensor::zeros([n, fin]);
                kernels::gemm(n, fout, fin, go.data(), false, wv.data(), false, 0.0, dx.data_mut());
                out.push((*x, dx));
            }
            if needs(nodes, *w) {
                let mut dw = Tensor::zeros([fout, fin]);
                kernels::gemm(fout, n, fin, go.data(), true, xv.data(), false, 0.0, dw.data_mut());
                out.push((*w, dw));
            }
            if let Some(b) = b.filter(|b| needs(nodes, *b)) {
                let mut db = Tensor::zeros([fout]);
                for row in go.data().chunks_exact(fout) {
                    db.data_mut().iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
                out.push((b, db));
            }
        }
        Op::Relu(x) => {
            let xv = val(nodes, *x);
            out.push((*x, zip_map(xv, go, |v, g| if v > 0.0 { g } else { 0.0 })));
        }
        Op::LeakyRelu(x, slope) => {
            let xv = val(nodes, *x);
            out.push((*x, zip_map(xv, go, |v, g| if v >= 0.0 { g } else { slope * g })));
        }
        Op::Sigmoid(x) => {
            let y = &node.value;
            out.push((*x, zip_map(y, go, |s, g| g * s * (1.0 - s))));
        }
        Op::Softplus(x) => {
            let xv = val(nodes, *x);
            out.push((*x, zip_map(xv, go, |v, g| g * sigmoid(v))));
        }
        Op::SrgbEncode(x) => {
            let xv = val(nodes, *x);
            out.push((*x, zip_map(xv, go, |v, g| g * srgb_oetf_slope(v as f64) as f32)));
        }
        Op::MaxPool2 { x, argmax } => {
            let mut dx = Tensor::zeros(val(nodes, *x).shape().to_vec());
            for (o, &src) in argmax.iter().enumerate() {
                dx.data_mut()[src as usize] += go.data()[o];
            }
            out.push((*x, dx));
        }
        Op::Upsample2(x) => {
            let xv = val(nodes, *x);
            let (n, c, h, w) = xv.dims4()?;
            let mut dx = Tensor::zeros(xv.shape().to_vec());
            for plane in 0..n * c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dx.data_mut()[plane * h * w + (y / 2) * w + xx / 2] +=
                            go.data()[plane * 4 * h * w + y * 2 * w + xx];
                    }
                }
            }
            out.push((*x, dx));
        }
        Op::GlobalAvgPool(x) => {
            let xv = val(nodes, *x);
            let (_, _, h, w) = xv.dims4()?;
            let hw = h * w;
            let mut dx = Tensor::zeros(xv.shape().to_vec());
            for (plane, chunk) in dx.data_mut().chunks_exact_mut(hw).enumerate() {
                let g = go.data()[plane] / hw as f32;
                chunk.fill(g);
            }
            out.push((*x, dx));
        }
        Op::ScaleChannels { x, s } => {
            let (xv, sv) = (val(nodes, *x), val(nodes, *s));
            let (_, _, h, w) = xv.dims4()?;
            let hw = h * w;
            if needs(nodes, *x) {
                let mut dx = go.clone();
                for (plane, chunk) in dx.data_mut().chunks_exact_mut(hw).enumerate() {
                    let k = sv.data()[plane];
                    chunk.iter_mut().for_each(|g| *g *= k);
                }
                out.push((*x, dx));
            }
            if needs(nodes, *s) {
                let data = xv
                    .data()
                    .chunks_exact(hw)
                    .zip(go.data().chunks_exact(hw))
                    .map(|(xs, gs)| xs.iter().zip(gs).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>() as f32)
                    .collect();
                out.push((*s, Tensor::new(sv.shape().to_vec(), data)?));
            }
        }
        Op::AddSpatial { x, v } => {
            let (_, _, h, w) = val(nodes, *x).dims4()?;
            out.push((*x, go.clone()));
            if needs(nodes, *v) {
                let data = go
                    .data()
                    .chunks_exact(h * w)
                    .map(|gs| gs.iter().map(|&g| g as f64).sum::<f64>() as f32)
                    .collect();
                out.push((*v, Tensor::new(val(nodes, *v).shape().to_vec(), data)?));
            }
        }
        Op::Add(a, b) => {
            out.push((*a, go.clone()));
            out.push((*b, go.clone()));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(nodes, *a), val(nodes, *b));
            out.push((*a, zip_map(bv, go, |y, g| y * g)));
            out.push((*b, zip_map(av, go, |x, g| x * g)));
        }
        Op::Scale(x, k) => {
            out.push((*x, map(go, |g| g * k)));
        }
        Op::Concat(a, b) => {
            let (n, ca, h, w) = val(nodes, *a).dims4()?;
            let (_, cb, _, _) = val(nodes, *b).dims4()?;
            let (sa, sb) = (ca * h * w, cb * h * w);
            let mut da = Vec::with_capacity(n * sa);
            let mut db = Vec::with_capacity(n * sb);
            for i in 0..n {
                let chunk = &go.data()[i * (sa + sb)..(i + 1) * (sa + sb)];
                da.extend_from_slice(&chunk[..sa]);
                db.extend_from_slice(&chunk[sa..]);
            }
            out.push((*a, Tensor::new([n, ca, h, w], da)?));
            out.push((*b, Tensor::new([n, cb, h, w], db)?));
        }
        Op::Channel { x, c } => {
            let xv = val(nodes, *x);
            let (n, ch, h, w) = xv.dims4()?;
            let hw = h * w;
            let mut dx = Tensor::zeros(xv.shape().to_vec());
            for i in 0..n {
                dx.data_mut()[(i * ch + c) * hw..(i * ch + c + 1) * hw]
                    .copy_from_slice(&go.data()[i * hw..(i + 1) * hw]);
            }
            out.push((*x, dx));
        }
        Op::WhiteBalance { x, illum } => {
            let (xv, iv) = (val(nodes, *x), val(nodes, *illum));
            let (n, _, h, w) = xv.dims4()?;
            let hw = h * w;
            let mut dx = Tensor::zeros(xv.shape().to_vec());
            let mut di = Tensor::zeros([n, 3]);
            for i in 0..n {
                let il = &iv.data()[i * 3..i * 3 + 3];
                let mut dk = [0.0f64; 3];
                for ch in 0..3 {
                    let k = il[1] / il[ch];
                    let base = (i * 3 + ch) * hw;
                    for p in base..base + hw {
                        let xin = xv.data()[p];
                        let y = xin * k;
                        if (0.0..=1.0).contains(&y) {
                            dx.data_mut()[p] = go.data()[p] * k;
                            dk[ch] += go.data()[p] as f64 * xin as f64;
                        }
                    }
                }
                let (r, g, b) = (il[0] as f64, il[1] as f64, il[2] as f64);
                // k_r = g / r, k_g = 1, k_b = g / b
                let d = &mut di.data_mut()[i * 3..i * 3 + 3];
                d[0] = (-dk[0] * g / (r * r)) as f32;
                d[1] = (dk[0] / r + dk[2] / b) as f32;
                d[2] = (-dk[2] * g / (b * b)) as f32;
            }
            out.push((*x, dx));
            out.push((*illum, di));
        }
        Op::ColorMatrix { x, matrices } => {
            let xv = val(nodes, *x);
            let (_, _, h, w) = xv.dims4()?;
            let hw = h * w;
            let y = &node.value;
            let mut dx = Tensor::zeros(xv.shape().to_vec());
            for (i, m) in matrices.iter().enumerate() {
                let base = i * 3 * hw;
                for p in 0..hw {
                    for (r, row) in m.iter().enumerate() {
                        if y.data()[base + r * hw + p] <= 0.0 {
                            continue;
                        }
                        let g = go.data()[base + r * hw + p];
                        for (j, &mij) in row.iter().enumerate() {
                            dx.data_mut()[base + j * hw + p] += mij * g;
                        }
                    }
                }
            }
            out.push((*x, dx));
        }
        Op::Recolorize { x, luma, pred } => {
            let (xv, pv) = (val(nodes, *x), val(nodes, *pred));
            let (n, c, h, w) = xv.dims4()?;
            let hw = h * w;
            let mut dx = Tensor::zeros(xv.shape().to_vec());
            let mut dp = Tensor::zeros(pv.shape().to_vec());
            for i in 0..n {
                for p in 0..hw {
                    let yi = (i * c + luma) * hw + p;
                    let den = (xv.data()[yi] + RECOLOR_EPS) as f64;
                    let pr = pv.data()[i * hw + p] as f64;
                    let r = pr / den;
                    // sum_c go_c * x_c
                    let mut gx = 0.0f64;
                    for ch in 0..c {
                        let k = (i * c + ch) * hw + p;
                        gx += go.data()[k] as f64 * xv.data()[k] as f64;
                        dx.data_mut()[k] = (go.data()[k] as f64 * r) as f32;
                    }
                    dx.data_mut()[yi] += (-gx * pr / (den * den)) as f32;
                    dp.data_mut()[i * hw + p] = (gx / den) as f32;
                }
            }
            out.push((*x, dx));
            out.push((*pred, dp));
        }
        Op::L2Normalize(x) => {
            let xv = val(nodes, *x);
            let (_, d) = xv.dims2()?;
            let y = &node.value;
            let mut dx = Tensor::zeros(xv.shape().to_vec());
            for ((xr, yr), (gr, dr)) in xv
                .data()
                .chunks_exact(d)
                .zip(y.data().chunks_exact(d))
                .zip(go.data().chunks_exact(d).zip(dx.data_mut().chunks_exact_mut(d)))
            {
                let norm = xr.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                let yg: f64 = yr.iter().zip(gr).map(|(a, b)| *a as f64 * *b as f64).sum();
                for k in 0..d {
                    dr[k] = ((gr[k] as f64 - yr[k] as f64 * yg) / norm) as f32;
                }
            }
            out.push((*x, dx));
        }
        Op::SoftHistogram(x) => {
            let xv = val(nodes, *x);
            let n = xv.shape()[0];
            let per = xv.numel() / n;
            let mut dx = Tensor::zeros(xv.shape().to_vec());
            for i in 0..n {
                let gh = &go.data()[i * SOFT_BINS..(i + 1) * SOFT_BINS];
                for p in i * per..(i + 1) * per {
                    let (k, _, active) = kernels::soft_bin(xv.data()[p]);
                    if active {
                        // d(frac)/dv = 256: lower bin loses, upper bin gains.
                        let g = (gh[k + 1] as f64 - gh[k] as f64) * SOFT_BINS as f64 / per as f64;
                        dx.data_mut()[p] = g as f32;
                    }
                }
            }
            out.push((*x, dx));
        }
        Op::AbsDiffSum { a, b, scale } => {
            let (av, bv) = (val(nodes, *a), val(nodes, *b));
            let g0 = go.item() as f64 * scale;
            let sign: Vec<f32> = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| {
                    if x > y {
                        g0 as f32
                    } else if x < y {
                        -g0 as f32
                    } else {
                        0.0
                    }
                })
                .collect();
            if needs(nodes, *b) {
                out.push((*b, Tensor::new(bv.shape().to_vec(), sign.iter().map(|s| -s).collect())?));
            }
            out.push((*a, Tensor::new(av.shape().to_vec(), sign)?));
        }
        Op::Angular { pred, truth } => {
            let (pv, tv) = (val(nodes, *pred), val(nodes, *truth));
            let (n, d) = pv.dims2()?;
            let scale = go.item() as f64 / n as f64;
            let mut dp = Tensor::zeros(pv.shape().to_vec());
            let mut dt = Tensor::zeros(tv.shape().to_vec());
            for i in 0..n {
                let (p, t) = (&pv.data()[i * d..(i + 1) * d], &tv.data()[i * d..(i + 1) * d]);
                let (_, ddot, dot, np, nt) = angle_row(p, t)?;
                if ddot == 0.0 {
                    continue;
                }
                for k in 0..d {
                    let (ph, th) = (p[k] as f64 / np, t[k] as f64 / nt);
                    dp.data_mut()[i * d + k] = (scale * ddot * (th - dot * ph) / np) as f32;
                    dt.data_mut()[i * d + k] = (scale * ddot * (ph - dot * th) / nt) as f32;
                }
            }
            out.push((*pred, dp));
            out.push((*truth, dt));
        }
        Op::Sum(terms) => {
            for &t in terms {
                out.push((t, go.clone()));
            }
        }
    }
    Ok(out)
}

fn srgb_oetf_slope(v: f64) -> f64 {
    if v <= 0.0 || v >= 1.0 {
        0.0
    } else if v <= SRGB_KNEE {
        12.92
    } else {
        1.055 / 2.4 * v.powf(1.0 / 2.4 - 1.0)
    }
}

fn zip_map(a: &Tensor, go: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(go.data()).map(|(&v, &g)| f(v, g)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}
