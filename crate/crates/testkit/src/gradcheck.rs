//! Central finite-difference checks of reverse-mode gradients.
//!
//! The analytic f32 gradient of each engine op is compared against central
//! differences of an independent f64 forward definition ([`crate::refops`]).
//! Differencing the f32 forward itself at h = 1e-3 is dominated by rounding
//! (about 1e-4 absolute on these sizes), so the f64 definition is the oracle
//! and the f32 forward is separately checked against it.
//!
//! Outputs are contracted with a fixed random cotangent so every output
//! element contributes.

use nisp_core::nn::{Tape, Tensor, Var};
use nisp_core::Result;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::refops::{self, Arr};

pub const H: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
/// Denominator floor of the relative error.
pub const FLOOR: f64 = 1e-2;
/// Forward agreement of the f32 engine with the f64 definition, relative to `max(|ref|, 1)`.
pub const FWD_TOL: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub max_rel: f64,
    pub forward_err: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn pass(&self) -> bool {
        self.checked > 0 && self.max_rel < REL_TOL && self.forward_err < FWD_TOL
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

type Build<'a> = &'a dyn Fn(&Tape, &[Var]) -> Result<Var>;
type Reference<'a> = &'a dyn Fn(&[Arr]) -> Arr;

fn to_arr(t: &Tensor) -> Arr {
    Arr::new(t.shape(), t.data().iter().map(|&v| v as f64).collect())
}

fn contract(out: &Arr, seed: &Tensor) -> f64 {
    out.data.iter().zip(seed.data()).map(|(&o, &s)| o * s as f64).sum()
}

/// Checks every element of every input flagged `true`.
pub fn check(
    name: &str,
    inputs: Vec<(Tensor, bool)>,
    ours: Build,
    reference: Reference,
    seed_rng: &mut impl Rng,
) -> GradReport {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(t, g)| tape.leaf(t.clone(), *g)).collect();
    let out = ours(&tape, &vars).expect("forward");
    let shape = tape.shape(out);
    let n: usize = shape.iter().product();
    let seed = if n == 1 {
        Tensor::new(shape.clone(), vec![1.0]).unwrap()
    } else {
        Tensor::new(shape.clone(), (0..n).map(|_| seed_rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    };
    let grads = tape.backward_from(out, seed.clone()).expect("backward");

    let base: Vec<Arr> = inputs.iter().map(|(t, _)| to_arr(t)).collect();
    let want = reference(&base);
    assert_eq!(want.data.len(), n, "{name}: reference output size");
    let forward_err = {
        let got = tape.value(out);
        got.data()
            .iter()
            .zip(&want.data)
            .map(|(&g, &w)| (g as f64 - w).abs() / w.abs().max(1.0))
            .fold(0.0, f64::max)
    };

    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for (i, (t, wrt)) in inputs.iter().enumerate() {
        if !*wrt {
            continue;
        }
        let analytic: Vec<f32> = grads.get(vars[i]).map_or(vec![0.0; t.numel()], |g| g.data().to_vec());
        for j in 0..t.numel() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[i].data[j] += H;
            minus[i].data[j] -= H;
            let fd = (contract(&reference(&plus), &seed) - contract(&reference(&minus), &seed)) / (2.0 * H);
            let e = rel_err(analytic[j] as f64, fd);
            if e > REL_TOL && std::env::var_os("GRAD_DEBUG").is_some() {
                eprintln!("{name} input {i} elem {j}: analytic {} fd {fd}", analytic[j]);
            }
            max_rel = max_rel.max(e);
            checked += 1;
        }
    }
    GradReport { name: name.to_string(), max_rel, forward_err, checked }
}

pub fn tensor(rng: &mut impl Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values with `|v|` in `[min, max]` and random sign, away from a kink at 0.
pub fn signed_away_from_zero(rng: &mut impl Rng, shape: &[usize], min: f32, max: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(min..max);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values at least `gap` apart, shuffled.
pub fn distinct(rng: &mut impl Rng, shape: &[usize], gap: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * gap).collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values in `[lo, hi]` at least 0.4 bin widths away from every soft-histogram
/// bin center, where the triangular kernels have their kinks.
pub fn between_bin_centers(rng: &mut impl Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let k = rng.random_range(lo * 256.0..hi * 256.0 - 1.0).floor();
            (k + 0.5 + rng.random_range(0.4f32..0.6)) / 256.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Pairs `(a, b)` whose soft histograms overlap with a margin: every `a`
/// pixel sits between centers `2m` and `2m + 1`, its `b` partner exactly on
/// center `2m`. Bin `2m` then has more `b` mass and bin `2m + 1` more `a`
/// mass, so the histogram-loss gradient is nonzero and no `|Ha - Hb|` kink is
/// within a finite-difference step.
pub fn overlapping_hist_pair(rng: &mut impl Rng, shape: &[usize], lo: f32, hi: f32) -> (Tensor, Tensor) {
    let n: usize = shape.iter().product();
    let (mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let m = rng.random_range((lo * 128.0) as usize..(hi * 128.0) as usize);
        let k = 2 * m;
        a.push((k as f32 + 0.5 + rng.random_range(0.4f32..0.6)) / 256.0);
        b.push((k as f32 + 0.5) / 256.0);
    }
    (Tensor::new(shape.to_vec(), a).unwrap(), Tensor::new(shape.to_vec(), b).unwrap())
}

const CCM_A: [[f64; 3]; 3] = [[0.9, 0.2, -0.05], [0.1, 1.1, 0.1], [-0.05, 0.15, 0.8]];
const CCM_B: [[f64; 3]; 3] = [[0.5, 0.3, 0.2], [0.2, 0.7, 0.1], [0.0, 0.1, 0.9]];

fn f32m(m: &[[f64; 3]; 3]) -> [[f32; 3]; 3] {
    m.map(|r| r.map(|v| v as f32))
}

/// Runs the finite-difference check over every differentiable op.
pub fn suite(seed: u64) -> Vec<GradReport> {
    let mut r = crate::rng(seed);
    let rng = &mut r;
    let mut seeds = crate::rng(seed ^ 0x5eed);
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<(Tensor, bool)>, f: Build, r: Reference| {
        out.push(check(name, inputs, f, r, &mut seeds));
    };

    run(
        "conv2d 1x1x4x4 3x3",
        vec![
            (tensor(rng, &[1, 1, 4, 4], -1.0, 1.0), true),
            (tensor(rng, &[1, 1, 3, 3], -1.0, 1.0), true),
            (tensor(rng, &[1], -1.0, 1.0), true),
        ],
        &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        &|a| refops::conv2d(&a[0], &a[1], Some(&a[2]), 1, 1),
    );
    run(
        "conv2d 2x3x4x4 -> 4, stride 2",
        vec![
            (tensor(rng, &[2, 3, 4, 4], -1.0, 1.0), true),
            (tensor(rng, &[4, 3, 3, 3], -1.0, 1.0), true),
            (tensor(rng, &[4], -1.0, 1.0), true),
        ],
        &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1),
        &|a| refops::conv2d(&a[0], &a[1], Some(&a[2]), 2, 1),
    );
    run(
        "fully connected",
        vec![
            (tensor(rng, &[2, 5], -1.0, 1.0), true),
            (tensor(rng, &[3, 5], -1.0, 1.0), true),
            (tensor(rng, &[3], -1.0, 1.0), true),
        ],
        &|t, v| t.linear(v[0], v[1], Some(v[2])),
        &|a| refops::linear(&a[0], &a[1], Some(&a[2])),
    );
    run(
        "prelu",
        vec![(signed_away_from_zero(rng, &[2, 3, 4, 4], 0.05, 1.0), true)],
        &|t, v| Ok(t.prelu(v[0])),
        &|a| refops::prelu(&a[0]),
    );
    run(
        "relu",
        vec![(signed_away_from_zero(rng, &[2, 3, 4, 4], 0.05, 1.0), true)],
        &|t, v| Ok(t.relu(v[0])),
        &|a| refops::relu(&a[0]),
    );
    run(
        "sigmoid",
        vec![(tensor(rng, &[2, 3, 4, 4], -3.0, 3.0), true)],
        &|t, v| Ok(t.sigmoid(v[0])),
        &|a| refops::sigmoid(&a[0]),
    );
    run(
        "softplus",
        vec![(tensor(rng, &[2, 3, 4, 4], -3.0, 3.0), true)],
        &|t, v| Ok(t.softplus(v[0])),
        &|a| refops::softplus(&a[0]),
    );
    run(
        "max_pool2",
        vec![(distinct(rng, &[2, 3, 4, 4], 0.01), true)],
        &|t, v| t.max_pool2(v[0]),
        &|a| refops::max_pool2(&a[0]),
    );
    run(
        "upsample2",
        vec![(tensor(rng, &[2, 3, 2, 2], -1.0, 1.0), true)],
        &|t, v| t.upsample2(v[0]),
        &|a| refops::upsample2(&a[0]),
    );
    run(
        "global_avg_pool",
        vec![(tensor(rng, &[2, 3, 4, 4], -1.0, 1.0), true)],
        &|t, v| t.global_avg_pool(v[0]),
        &|a| refops::global_avg_pool(&a[0]),
    );
    run(
        "channel attention block",
        vec![
            (tensor(rng, &[2, 8, 4, 4], 0.0, 1.0), true),
            (tensor(rng, &[2, 8], -1.0, 1.0), true),
            (Tensor::new([2], vec![0.6, -0.6]).unwrap(), true),
            (tensor(rng, &[8, 2], -1.0, 1.0), true),
            (tensor(rng, &[8], -1.0, 1.0), true),
        ],
        &|t, v| {
            let g = t.global_avg_pool(v[0])?;
            let h = t.relu(t.linear(g, v[1], Some(v[2]))?);
            let s = t.sigmoid(t.linear(h, v[3], Some(v[4]))?);
            t.scale_channels(v[0], s)
        },
        &|a| refops::channel_attention(&a[0], &a[1], &a[2], &a[3], &a[4]),
    );
    run(
        "soft_histogram",
        vec![(between_bin_centers(rng, &[2, 1, 4, 4], 0.0, 1.0), true)],
        &|t, v| t.soft_histogram(v[0]),
        &|a| refops::soft_histogram(&a[0]),
    );
    run(
        "angular_loss",
        vec![(tensor(rng, &[3, 3], 0.1, 1.0), true), (tensor(rng, &[3, 3], 0.1, 1.0), true)],
        &|t, v| t.angular_loss(v[0], v[1]),
        &|a| refops::angular(&a[0], &a[1]),
    );
    {
        let a = tensor(rng, &[2, 1, 4, 4], 0.0, 1.0);
        let d = signed_away_from_zero(rng, &[2, 1, 4, 4], 0.01, 0.3);
        let b = Tensor::new(a.shape().to_vec(), a.data().iter().zip(d.data()).map(|(x, y)| x + y).collect()).unwrap();
        run("l1_loss", vec![(a, true), (b, true)], &|t, v| t.l1_loss(v[0], v[1]), &|a| refops::l1(&a[0], &a[1]));
    }
    {
        let (a, b) = overlapping_hist_pair(rng, &[2, 1, 4, 4], 0.1, 0.9);
        run("hist_loss", vec![(a, true), (b, false)], &|t, v| t.hist_loss(v[0], v[1]), &|a| {
            refops::hist_loss(&a[0], &a[1])
        });
    }
    {
        let ill = tensor(rng, &[2, 3], 0.1, 1.0);
        let gt = tensor(rng, &[2, 3], 0.1, 1.0);
        let (a, b) = overlapping_hist_pair(rng, &[2, 1, 4, 4], 0.1, 0.9);
        run(
            "total_loss",
            vec![(ill, true), (gt, false), (a, true), (b, false)],
            &|t, v| {
                let ang = t.angular_loss(v[0], v[1])?;
                let l1 = t.l1_loss(v[2], v[3])?;
                let h = t.hist_loss(v[2], v[3])?;
                nisp_core::nn::total_loss(t, &[ang, l1, h])
            },
            &|a| {
                let s = refops::angular(&a[0], &a[1]).data[0]
                    + refops::l1(&a[2], &a[3]).data[0]
                    + refops::hist_loss(&a[2], &a[3]).data[0];
                Arr::scalar(s)
            },
        );
    }
    run(
        "white_balance",
        vec![(tensor(rng, &[2, 3, 4, 4], 0.05, 0.3), true), (tensor(rng, &[2, 3], 0.7, 1.3), true)],
        &|t, v| t.white_balance(v[0], v[1]),
        &|a| refops::white_balance(&a[0], &a[1]),
    );
    run(
        "color_matrix",
        vec![(tensor(rng, &[2, 3, 4, 4], 0.05, 1.0), true)],
        &|t, v| t.color_matrix(v[0], vec![f32m(&CCM_A), f32m(&CCM_B)]),
        &|a| refops::color_matrix(&a[0], &[CCM_A, CCM_B]),
    );
    run(
        "recolorize",
        vec![(tensor(rng, &[2, 3, 4, 4], 0.1, 1.0), true), (tensor(rng, &[2, 1, 4, 4], 0.1, 1.0), true)],
        &|t, v| t.recolorize(v[0], 1, v[1]),
        &|a| refops::recolorize(&a[0], 1, &a[1]),
    );
    run(
        "l2_normalize",
        vec![(tensor(rng, &[3, 4], -1.0, 1.0), true)],
        &|t, v| t.l2_normalize(v[0]),
        &|a| refops::l2_normalize(&a[0]),
    );
    run(
        "concat",
        vec![(tensor(rng, &[2, 2, 3, 3], -1.0, 1.0), true), (tensor(rng, &[2, 3, 3, 3], -1.0, 1.0), true)],
        &|t, v| t.concat(v[0], v[1]),
        &|a| refops::concat(&a[0], &a[1]),
    );
    run(
        "add_spatial",
        vec![(tensor(rng, &[2, 3, 2, 2], -1.0, 1.0), true), (tensor(rng, &[2, 3], -1.0, 1.0), true)],
        &|t, v| t.add_spatial(v[0], v[1]),
        &|a| refops::add_spatial(&a[0], &a[1]),
    );
    run(
        "mul",
        vec![(tensor(rng, &[2, 3, 2, 2], -1.0, 1.0), true), (tensor(rng, &[2, 3, 2, 2], -1.0, 1.0), true)],
        &|t, v| t.mul(v[0], v[1]),
        &|a| refops::mul(&a[0], &a[1]),
    );
    run(
        "channel",
        vec![(tensor(rng, &[2, 3, 2, 2], -1.0, 1.0), true)],
        &|t, v| t.channel(v[0], 2),
        &|a| refops::channel(&a[0], 2),
    );
    run(
        "srgb_encode",
        vec![(tensor(rng, &[2, 1, 4, 4], 0.01, 0.95), true)],
        &|t, v| Ok(t.srgb_encode(v[0])),
        &|a| refops::srgb_encode(&a[0]),
    );
    out
}
