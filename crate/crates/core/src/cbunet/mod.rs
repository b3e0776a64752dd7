//! The two-stage network: stage 1 estimates the illuminant and corrects color,
//! stage 2 predicts a brightness map from luminance plus its histogram.

mod config;
mod unet;

use std::collections::HashSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{CBUnetConfig, Preset};
pub use unet::{attention_hidden, LayerCost, HIST_HIDDEN};

use crate::error::{Error, Result};
use crate::imaging::{
    self, apply_ccm, apply_white_balance, demosaic_bilinear, grayscale, histogram_256, srgb_encode,
    srgb_encode_u16, xyz_to_linear_srgb, BayerImage, ColorMatrix, EncodedImage, GrayImage,
    HistogramVector, Illuminant, LinearRgbImage, XyzImage,
};
use crate::nn::{weights, Bound, ParamStore, Tape, Tensor, Var};
use unet::Unet;

pub use imaging::recolorize;

/// Stage 1: `f(.)`, camera RGB to a unit illuminant direction.
#[derive(Debug, Clone)]
pub struct Stage1Net {
    pub params: ParamStore,
    unet: Unet,
}

/// Stage 2: `g(.)`, luminance (plus histogram) to a nonnegative brightness map.
#[derive(Debug, Clone)]
pub struct Stage2Net {
    pub params: ParamStore,
    unet: Unet,
}

/// Single-stage baseline: camera RGB straight to linear sRGB.
#[derive(Debug, Clone)]
pub struct DirectNet {
    pub params: ParamStore,
    unet: Unet,
}

fn build(prefix: &str, in_ch: usize, out_ch: usize, cfg: CBUnetConfig, hist: bool, seed: u64) -> Result<(Unet, ParamStore)> {
    cfg.validate()?;
    let unet = Unet { prefix: prefix.into(), in_ch, out_ch, cfg, hist_branch: hist };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unet.init(&mut store, &mut rng)?;
    Ok((unet, store))
}

impl Stage1Net {
    pub fn new(cfg: CBUnetConfig, seed: u64) -> Result<Self> {
        let (unet, params) = build("stage1", 3, 3, cfg, false, seed)?;
        Ok(Stage1Net { params, unet })
    }

    pub fn config(&self) -> &CBUnetConfig {
        &self.unet.cfg
    }

    /// `(N, 3, H, W)` camera RGB to `(N, 3)` unit illuminants.
    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var> {
        let head = self.unet.forward(tape, p, x, None)?;
        let pooled = tape.global_avg_pool(head)?;
        tape.l2_normalize(tape.softplus(pooled))
    }

    pub fn costs(&self, width: usize, height: usize) -> Vec<LayerCost> {
        let mut rows = self.unet.costs(width, height);
        let n = width * height;
        for (name, kind, count, spatial) in [
            ("stage1.out.pool", "global_avg_pool", 3 * n, true),
            ("stage1.out.softplus", "softplus", 3, false),
            ("stage1.out.normalize", "l2_normalize", 3, false),
        ] {
            rows.push(LayerCost { name: name.into(), kind, params: 0, flops: count as u64, spatial });
        }
        rows
    }
}

impl Stage2Net {
    pub fn new(cfg: CBUnetConfig, seed: u64) -> Result<Self> {
        let (unet, params) = build("stage2", 1, 1, cfg, cfg.histogram_branch_enabled, seed)?;
        Ok(Stage2Net { params, unet })
    }

    pub fn config(&self) -> &CBUnetConfig {
        &self.unet.cfg
    }

    /// `(N, 1, H, W)` luminance and `(N, 256)` histogram to `(N, 1, H, W)` brightness.
    pub fn forward(&self, tape: &Tape, p: &Bound, y: Var, hist: Var) -> Result<Var> {
        let head = self.unet.forward(tape, p, y, Some(hist))?;
        Ok(tape.softplus(head))
    }

    pub fn costs(&self, width: usize, height: usize) -> Vec<LayerCost> {
        let mut rows = self.unet.costs(width, height);
        rows.push(LayerCost {
            name: "stage2.out.softplus".into(),
            kind: "softplus",
            params: 0,
            flops: (width * height) as u64,
            spatial: true,
        });
        rows
    }
}

impl DirectNet {
    pub fn new(cfg: CBUnetConfig, seed: u64) -> Result<Self> {
        let (unet, params) = build("direct", 3, 3, cfg, false, seed)?;
        Ok(DirectNet { params, unet })
    }

    pub fn config(&self) -> &CBUnetConfig {
        &self.unet.cfg
    }

    /// `(N, 3, H, W)` camera RGB to nonnegative linear sRGB.
    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.softplus(self.unet.forward(tape, p, x, None)?))
    }

    pub fn costs(&self, width: usize, height: usize) -> Vec<LayerCost> {
        let mut rows = self.unet.costs(width, height);
        rows.push(LayerCost {
            name: "direct.out.softplus".into(),
            kind: "softplus",
            params: 0,
            flops: (3 * width * height) as u64,
            spatial: true,
        });
        rows
    }
}

/// Both stages with a shared config.
#[derive(Debug, Clone)]
pub struct CBUnet {
    pub config: CBUnetConfig,
    pub stage1: Stage1Net,
    pub stage2: Stage2Net,
}

impl CBUnet {
    /// Fresh network; stage 2 is seeded from `seed + 1`.
    pub fn new(config: CBUnetConfig, seed: u64) -> Result<Self> {
        Ok(CBUnet {
            config,
            stage1: Stage1Net::new(config, seed)?,
            stage2: Stage2Net::new(config, seed.wrapping_add(1))?,
        })
    }

    pub fn costs(&self, width: usize, height: usize) -> Vec<LayerCost> {
        let mut rows = self.stage1.costs(width, height);
        rows.extend(self.stage2.costs(width, height));
        rows
    }
}

// ---------- image <-> tensor ----------

pub fn rgb_to_tensor(img: &LinearRgbImage) -> Tensor {
    let mut data = Vec::with_capacity(3 * img.len());
    for p in &img.planes {
        data.extend(p.iter().map(|&v| v as f32));
    }
    Tensor::new([1, 3, img.height, img.width], data).expect("plane sizes")
}

pub fn gray_to_tensor(img: &GrayImage) -> Tensor {
    Tensor::new([1, 1, img.height, img.width], img.data.iter().map(|&v| v as f32).collect())
        .expect("plane size")
}

pub fn hist_to_tensor(h: &HistogramVector) -> Tensor {
    Tensor::new([1, 256], h.bins().iter().map(|&v| v as f32).collect()).expect("256 bins")
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

fn pad_plane(src: &[f64], w: usize, h: usize, pw: usize, ph: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(pw * ph);
    for y in 0..ph {
        let sy = reflect(y, h);
        for x in 0..pw {
            out.push(src[sy * w + reflect(x, w)]);
        }
    }
    out
}

/// Size after padding up to a multiple of `m`.
pub fn padded_dims(width: usize, height: usize, m: usize) -> (usize, usize) {
    (width.div_ceil(m) * m, height.div_ceil(m) * m)
}

/// Reflect-pads on the right and bottom edges.
pub fn pad_rgb(img: &LinearRgbImage, m: usize) -> LinearRgbImage {
    let (pw, ph) = padded_dims(img.width, img.height, m);
    if (pw, ph) == (img.width, img.height) {
        return img.clone();
    }
    let planes = [0, 1, 2].map(|c| pad_plane(&img.planes[c], img.width, img.height, pw, ph));
    LinearRgbImage::new(pw, ph, planes).expect("padded planes")
}

pub fn pad_gray(img: &GrayImage, m: usize) -> GrayImage {
    let (pw, ph) = padded_dims(img.width, img.height, m);
    if (pw, ph) == (img.width, img.height) {
        return img.clone();
    }
    GrayImage::new(pw, ph, pad_plane(&img.data, img.width, img.height, pw, ph)).expect("padded plane")
}

// ---------- stage operations ----------

/// Stage-1 forward on one image whose dims are multiples of `2^depth`.
pub fn stage1_estimate(img: &LinearRgbImage, net: &Stage1Net) -> Result<Illuminant> {
    net.config().check_dims(img.width, img.height)?;
    let tape = Tape::new();
    let p = net.params.bind(&tape, false);
    let x = tape.constant(rgb_to_tensor(img));
    let out = net.forward(&tape, &p, x)?;
    let v = tape.value(out);
    let d = v.data();
    Illuminant::new(d[0] as f64, d[1] as f64, d[2] as f64)
}

/// White balance by `illum`, then `ccm` into XYZ.
pub fn stage1_apply(img: &LinearRgbImage, illum: &Illuminant, ccm: &ColorMatrix) -> Result<XyzImage> {
    Ok(apply_ccm(&apply_white_balance(img, illum)?, ccm))
}

/// Stage-2 forward on one luminance image whose dims are multiples of `2^depth`.
pub fn stage2_brightness(gray: &GrayImage, hist: &HistogramVector, net: &Stage2Net) -> Result<GrayImage> {
    net.config().check_dims(gray.width, gray.height)?;
    let tape = Tape::new();
    let p = net.params.bind(&tape, false);
    let y = tape.constant(gray_to_tensor(gray));
    let h = tape.constant(hist_to_tensor(hist));
    let out = net.forward(&tape, &p, y, h)?;
    let v = tape.value(out);
    GrayImage::new(gray.width, gray.height, v.data().iter().map(|&x| x as f64).collect())
}

/// Illuminant estimation for arbitrary image sizes.
pub trait ColorStage {
    fn estimate(&self, rgb: &LinearRgbImage) -> Result<Illuminant>;
}

/// Brightness prediction for arbitrary image sizes.
pub trait BrightnessStage {
    fn brightness(&self, gray: &GrayImage, hist: &HistogramVector) -> Result<GrayImage>;
}

impl ColorStage for Stage1Net {
    fn estimate(&self, rgb: &LinearRgbImage) -> Result<Illuminant> {
        stage1_estimate(&pad_rgb(rgb, self.config().multiple()), self)
    }
}

impl BrightnessStage for Stage2Net {
    fn brightness(&self, gray: &GrayImage, hist: &HistogramVector) -> Result<GrayImage> {
        let padded = pad_gray(gray, self.config().multiple());
        stage2_brightness(&padded, hist, self)?.crop(0, 0, gray.width, gray.height)
    }
}

/// Always reports a neutral illuminant.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeutralColor;

impl ColorStage for NeutralColor {
    fn estimate(&self, _: &LinearRgbImage) -> Result<Illuminant> {
        Ok(Illuminant::neutral())
    }
}

/// Returns the input luminance unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityBrightness;

impl BrightnessStage for IdentityBrightness {
    fn brightness(&self, gray: &GrayImage, _: &HistogramVector) -> Result<GrayImage> {
        Ok(gray.clone())
    }
}

#[derive(Debug, Clone)]
pub struct Rendered {
    pub image: EncodedImage,
    /// sRGB-encoded 16-bit samples, interleaved RGB.
    pub intermediate16: Vec<u16>,
    pub illuminant: Illuminant,
}

pub fn render_with(raw: &BayerImage, color: &dyn ColorStage, bright: &dyn BrightnessStage) -> Result<Rendered> {
    let rgb = demosaic_bilinear(raw)?;
    let illum = color.estimate(&rgb)?;
    let xyz = stage1_apply(&rgb, &illum, &raw.meta.ccm)?;
    let gray = grayscale(&xyz);
    let hist = histogram_256(&gray)?;
    let predicted = bright.brightness(&gray, &hist)?;
    let out = recolorize(&xyz, &predicted)?;
    let lin = xyz_to_linear_srgb(&out);
    Ok(Rendered { image: srgb_encode(&lin), intermediate16: srgb_encode_u16(&lin), illuminant: illum })
}

pub fn render(raw: &BayerImage, model: &CBUnet) -> Result<Rendered> {
    render_with(raw, &model.stage1, &model.stage2)
}

// ---------- weight files ----------

pub fn encode_weights(model: &CBUnet) -> Result<Vec<u8>> {
    let tensors = model
        .stage1
        .params
        .iter()
        .chain(model.stage2.params.iter())
        .map(|(k, p)| (k.to_string(), p.value.clone()))
        .collect();
    weights::encode(&weights::WeightFile { header: model.config.to_json(), tensors })
}

pub fn decode_weights(bytes: &[u8]) -> Result<CBUnet> {
    let file = weights::decode(bytes)?;
    let config = CBUnetConfig::from_json(&file.header)
        .map_err(|e| Error::Format(format!("weight file header: {e}")))?;
    let mut model = CBUnet::new(config, 0)?;
    let mut seen = HashSet::new();
    for (name, t) in file.tensors {
        let store = if name.starts_with("stage1.") {
            &mut model.stage1.params
        } else if name.starts_with("stage2.") {
            &mut model.stage2.params
        } else {
            return Err(Error::Format(format!("unexpected tensor `{name}`")));
        };
        let slot = store
            .value_mut(&name)
            .map_err(|_| Error::Format(format!("tensor `{name}` does not exist in this config")))?;
        if slot.shape() != t.shape() {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {:?}, config expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("tensor `{name}` appears twice")));
        }
        *slot = t;
    }
    let expected = model.stage1.params.len() + model.stage2.params.len();
    if seen.len() != expected {
        let missing = model
            .stage1
            .params
            .names()
            .chain(model.stage2.params.names())
            .find(|n| !seen.contains(*n))
            .unwrap_or_default()
            .to_string();
        return Err(Error::Format(format!(
            "weight file has {} of {expected} tensors (missing `{missing}`)",
            seen.len()
        )));
    }
    Ok(model)
}

pub fn save_weights(model: &CBUnet, path: &Path) -> Result<()> {
    imaging::io::write_file_atomic(path, &encode_weights(model)?)
}

pub fn load_weights(path: &Path) -> Result<CBUnet> {
    decode_weights(&imaging::io::read_file(path)?).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Loads weights and requires their config to equal `expected`.
pub fn load_weights_for(path: &Path, expected: &CBUnetConfig) -> Result<CBUnet> {
    let model = load_weights(path)?;
    if model.config != *expected {
        return Err(Error::Config(format!(
            "{}: weights were trained with {}, requested {}",
            path.display(),
            model.config.to_json(),
            expected.to_json()
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_rgb(w: usize, h: usize) -> LinearRgbImage {
        let planes = [0, 1, 2].map(|c| (0..w * h).map(|i| ((i * 7 + c * 13) % 17) as f64 / 17.0 + 0.02).collect());
        LinearRgbImage::new(w, h, planes).unwrap()
    }

    #[test]
    fn zero_network_with_unit_head_bias_is_neutral() {
        let mut net = Stage1Net::new(CBUnetConfig::tiny(), 3).unwrap();
        let names: Vec<String> = net.params.names().map(String::from).collect();
        for n in &names {
            net.params.value_mut(n).unwrap().data_mut().fill(0.0);
        }
        net.params.value_mut("stage1.head.b").unwrap().data_mut().fill(1.0);
        let il = stage1_estimate(&small_rgb(8, 8), &net).unwrap();
        let s = 1.0 / 3f64.sqrt();
        for v in il.rgb() {
            assert!((v - s).abs() < 1e-6);
        }
    }

    #[test]
    fn estimate_is_deterministic() {
        let a = Stage1Net::new(CBUnetConfig::tiny(), 11).unwrap();
        let b = Stage1Net::new(CBUnetConfig::tiny(), 11).unwrap();
        let img = small_rgb(8, 12);
        let (ia, ib) = (stage1_estimate(&img, &a).unwrap(), stage1_estimate(&img, &b).unwrap());
        assert_eq!(ia.rgb().map(f64::to_bits), ib.rgb().map(f64::to_bits));
    }

    #[test]
    fn bad_dims_are_dimension_errors() {
        let net = Stage1Net::new(CBUnetConfig::tiny(), 0).unwrap();
        assert!(matches!(stage1_estimate(&small_rgb(6, 8), &net), Err(Error::Dimension(_))));
        // trait path pads instead
        net.estimate(&small_rgb(6, 5)).unwrap();
    }

    #[test]
    fn stage1_apply_examples() {
        let img = LinearRgbImage::filled(2, 2, [0.2, 0.4, 0.6]);
        let same = stage1_apply(&img, &Illuminant::neutral(), &ColorMatrix::IDENTITY).unwrap();
        assert_eq!(same.planes, img.planes);
        let il = Illuminant::new(0.5, 1.0, 1.5).unwrap();
        let out = stage1_apply(&img, &il, &ColorMatrix::IDENTITY).unwrap();
        for c in 0..3 {
            assert!((out.planes[c][0] - 0.4).abs() < 1e-12);
        }
        let manual = apply_ccm(&apply_white_balance(&img, &il).unwrap(), &ColorMatrix::SRGB_TO_XYZ);
        assert_eq!(stage1_apply(&img, &il, &ColorMatrix::SRGB_TO_XYZ).unwrap().planes, manual.planes);
    }

    #[test]
    fn disabled_branch_matches_zero_branch() {
        let mut on = CBUnetConfig::tiny();
        on.histogram_branch_enabled = true;
        let mut off = on;
        off.histogram_branch_enabled = false;
        let mut a = Stage2Net::new(on, 5).unwrap();
        let b = Stage2Net::new(off, 5).unwrap();
        for n in ["stage2.hist.fc1.w", "stage2.hist.fc1.b", "stage2.hist.fc2.w", "stage2.hist.fc2.b"] {
            a.params.value_mut(n).unwrap().data_mut().fill(0.0);
        }
        let gray = GrayImage::new(8, 8, (0..64).map(|i| i as f64 / 64.0).collect()).unwrap();
        let hist = histogram_256(&gray).unwrap();
        let (ya, yb) = (stage2_brightness(&gray, &hist, &a).unwrap(), stage2_brightness(&gray, &hist, &b).unwrap());
        assert_eq!(ya.data, yb.data);
        assert!(ya.data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn reflect_padding() {
        assert_eq!((0..7).map(|i| reflect(i, 4)).collect::<Vec<_>>(), vec![0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect(5, 1), 0);
        let g = GrayImage::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(pad_gray(&g, 4).data[..4], [1.0, 2.0, 3.0, 2.0]);
    }

    #[test]
    fn weights_round_trip_and_errors() {
        let m = CBUnet::new(CBUnetConfig::tiny(), 9).unwrap();
        let bytes = encode_weights(&m).unwrap();
        let back = decode_weights(&bytes).unwrap();
        assert_eq!(back.stage1.params, m.stage1.params);
        assert_eq!(back.stage2.params, m.stage2.params);
        assert!(matches!(decode_weights(&bytes[..bytes.len() / 2]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_weights(&bad), Err(Error::Format(m)) if m.contains("magic")));
    }
}
