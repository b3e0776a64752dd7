//! Staged training: stage 1 on angular loss, stage 2 on L1 + histogram with
//! stage 1 frozen, then joint fine-tuning on the summed loss.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::SamplePair;
use crate::cbunet::{
    gray_to_tensor, rgb_to_tensor, stage1_apply, CBUnet, CBUnetConfig, ColorStage, DirectNet, Preset,
    Stage1Net, Stage2Net,
};
use crate::error::{Error, Result};
use crate::imaging::{
    demosaic_bilinear, histogram_256, linear_srgb_to_xyz, srgb_decode, ColorMatrix, GrayImage, LinearRgbImage,
};
use crate::nn::{Tape, Tensor, Var};

/// Which loss terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSpec {
    pub l1: bool,
    pub angular: bool,
    pub hist: bool,
}

impl LossSpec {
    pub const ALL: LossSpec = LossSpec { l1: true, angular: true, hist: true };

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.l1 {
            parts.push("L1");
        }
        if self.angular {
            parts.push("Angular");
        }
        if self.hist {
            parts.push("Hist");
        }
        parts.join("+")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Fine-tuning rate; `None` reuses `lr`.
    #[serde(default)]
    pub joint_lr: Option<f64>,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub joint_epochs: usize,
    /// Square training crop side; clipped to the image and rounded down to a multiple of `2^depth`.
    pub crop: usize,
    pub seed: u64,
    pub preset: Preset,
    /// Samples used for training (sorted ids, first N); `None` trains on all.
    #[serde(default)]
    pub train_count: Option<usize>,
}

impl TrainConfig {
    /// Published schedule for the full dataset.
    pub fn published() -> Self {
        TrainConfig {
            lr: 5e-5,
            joint_lr: None,
            batch_size: 16,
            stage1_epochs: 300,
            stage2_epochs: 300,
            joint_epochs: 10,
            crop: 256,
            seed: 0,
            preset: Preset::Full,
            train_count: Some(120),
        }
    }

    /// Tiny preset sized for a few minutes of CPU on the synthetic pairs.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 2e-3,
            joint_lr: Some(2e-4),
            batch_size: 2,
            stage1_epochs: 250,
            stage2_epochs: 500,
            joint_epochs: 10,
            crop: 64,
            seed: 0,
            preset: Preset::Tiny,
            train_count: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and nonnegative, got {}", self.lr)));
        }
        if let Some(j) = self.joint_lr {
            if !(j >= 0.0 && j.is_finite()) {
                return Err(Error::Config(format!("joint_lr must be finite and nonnegative, got {j}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.crop == 0 {
            return Err(Error::Config("crop must be positive".into()));
        }
        Ok(())
    }

    pub fn net_config(&self) -> CBUnetConfig {
        CBUnetConfig::from_preset(self.preset)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub angular: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hist: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub epochs: Vec<EpochLoss>,
    /// Total loss of every optimizer step, before the update.
    pub steps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config: TrainConfig,
    pub stage1: StageLog,
    pub stage2: StageLog,
    pub joint: StageLog,
}

/// A sample decoded into training tensors' source images.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    /// Demosaiced linear camera RGB.
    pub rgb: LinearRgbImage,
    pub illuminant: Option<[f64; 3]>,
    pub ccm: ColorMatrix,
    /// Target decoded to linear sRGB.
    pub target_lin: LinearRgbImage,
    /// Luminance of the linear target.
    pub target_y: GrayImage,
}

pub fn prepare(pairs: &[SamplePair]) -> Result<Vec<Prepared>> {
    pairs
        .iter()
        .map(|p| {
            let rgb = demosaic_bilinear(&p.raw)?;
            let target_lin = srgb_decode(&p.target);
            let xyz = linear_srgb_to_xyz(&target_lin);
            let target_y = GrayImage::new(xyz.width, xyz.height, xyz.planes[1].clone())?;
            let illuminant = match &p.annotation {
                Some(a) => Some(a.illuminant()?.rgb()),
                None => None,
            };
            Ok(Prepared { id: p.id.clone(), rgb, illuminant, ccm: p.raw.meta.ccm, target_lin, target_y })
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct CropBox {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

fn ccm_f32(m: &ColorMatrix) -> [[f32; 3]; 3] {
    m.rows().map(|r| r.map(|v| v as f32))
}

#[derive(Default)]
struct Acc {
    n: usize,
    total: f64,
    angular: Option<f64>,
    l1: Option<f64>,
    hist: Option<f64>,
}

impl Acc {
    fn add(slot: &mut Option<f64>, v: Option<f64>) {
        if let Some(v) = v {
            *slot = Some(slot.unwrap_or(0.0) + v);
        }
    }

    fn push(&mut self, total: f64, angular: Option<f64>, l1: Option<f64>, hist: Option<f64>) {
        self.n += 1;
        self.total += total;
        Self::add(&mut self.angular, angular);
        Self::add(&mut self.l1, l1);
        Self::add(&mut self.hist, hist);
    }

    fn finish(self, epoch: usize) -> EpochLoss {
        let n = self.n.max(1) as f64;
        EpochLoss {
            epoch,
            total: self.total / n,
            angular: self.angular.map(|v| v / n),
            l1: self.l1.map(|v| v / n),
            hist: self.hist.map(|v| v / n),
        }
    }
}

struct Terms {
    total: Var,
    angular: Option<Var>,
    l1: Option<Var>,
    hist: Option<Var>,
}

impl Terms {
    fn build(tape: &Tape, angular: Option<Var>, l1: Option<Var>, hist: Option<Var>) -> Result<Self> {
        let parts: Vec<Var> = [angular, l1, hist].into_iter().flatten().collect();
        if parts.is_empty() {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        Ok(Terms { total: tape.sum(&parts)?, angular, l1, hist })
    }

    fn record(&self, tape: &Tape, acc: &mut Acc) -> f64 {
        let get = |v: Option<Var>| v.map(|v| tape.value(v).item() as f64);
        let total = tape.value(self.total).item() as f64;
        acc.push(total, get(self.angular), get(self.l1), get(self.hist));
        total
    }
}

/// Owns the run's random stream (shuffling and crop placement).
pub struct Trainer {
    pub cfg: TrainConfig,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer { cfg, rng })
    }

    fn batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn crops(&mut self, data: &[Prepared], batch: &[usize], m: usize) -> Result<Vec<CropBox>> {
        let w = batch.iter().map(|&i| data[i].rgb.width).min().unwrap_or(0).min(self.cfg.crop) / m * m;
        let h = batch.iter().map(|&i| data[i].rgb.height).min().unwrap_or(0).min(self.cfg.crop) / m * m;
        if w == 0 || h == 0 {
            return Err(Error::Dimension(format!("images are smaller than the network's {m}-pixel grid")));
        }
        Ok(batch
            .iter()
            .map(|&i| {
                let (iw, ih) = (data[i].rgb.width, data[i].rgb.height);
                let x = self.rng.random_range(0..=iw - w);
                let y = self.rng.random_range(0..=ih - h);
                CropBox { x, y, w, h }
            })
            .collect())
    }

    fn require_illuminants(data: &[Prepared]) -> Result<()> {
        if let Some(p) = data.iter().find(|p| p.illuminant.is_none()) {
            return Err(Error::Data(format!("sample `{}` has no annotation", p.id)));
        }
        Ok(())
    }

    fn rgb_batch(data: &[Prepared], batch: &[usize], boxes: &[CropBox], target: bool) -> Result<Tensor> {
        let ts = batch
            .iter()
            .zip(boxes)
            .map(|(&i, b)| {
                let src = if target { &data[i].target_lin } else { &data[i].rgb };
                Ok(rgb_to_tensor(&src.crop(b.x, b.y, b.w, b.h)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&ts)
    }

    fn illum_batch(data: &[Prepared], batch: &[usize]) -> Result<Tensor> {
        let mut v = Vec::with_capacity(3 * batch.len());
        for &i in batch {
            let il = data[i].illuminant.ok_or_else(|| Error::Data(format!("sample `{}` has no annotation", data[i].id)))?;
            v.extend(il.map(|x| x as f32));
        }
        Tensor::new([batch.len(), 3], v)
    }

    pub fn train_stage1(&mut self, data: &[Prepared], net: &mut Stage1Net) -> Result<StageLog> {
        Self::require_illuminants(data)?;
        let m = net.config().multiple();
        let mut log = StageLog::default();
        for epoch in 0..self.cfg.stage1_epochs {
            let mut acc = Acc::default();
            for batch in self.batches(data.len()) {
                let boxes = self.crops(data, &batch, m)?;
                let tape = Tape::new();
                let p = net.params.bind(&tape, true);
                let x = tape.constant(Self::rgb_batch(data, &batch, &boxes, false)?);
                let gt = tape.constant(Self::illum_batch(data, &batch)?);
                let pred = net.forward(&tape, &p, x)?;
                let terms = Terms::build(&tape, Some(tape.angular_loss(pred, gt)?), None, None)?;
                log.steps.push(terms.record(&tape, &mut acc));
                let mut grads = tape.backward(terms.total)?;
                net.params.collect_grads(&p, &mut grads)?;
                net.params.adam_step(self.cfg.lr)?;
            }
            log.epochs.push(acc.finish(epoch));
        }
        Ok(log)
    }

    /// Trains stage 2 on the luminance produced by a frozen stage 1.
    pub fn train_stage2(
        &mut self,
        data: &[Prepared],
        stage1: Option<&Stage1Net>,
        net: &mut Stage2Net,
        losses: LossSpec,
    ) -> Result<StageLog> {
        let stage1 = stage1.ok_or_else(|| Error::State("stage 2 training needs stage-1 weights".into()))?;
        if !losses.l1 && !losses.hist {
            return Err(Error::Config("stage 2 needs the L1 or histogram loss".into()));
        }
        let m = net.config().multiple();
        let lum: Vec<GrayImage> = data
            .iter()
            .map(|p| {
                let il = stage1.estimate(&p.rgb)?;
                let xyz = stage1_apply(&p.rgb, &il, &p.ccm)?;
                GrayImage::new(xyz.width, xyz.height, xyz.planes[1].clone())
            })
            .collect::<Result<_>>()?;
        let mut log = StageLog::default();
        for epoch in 0..self.cfg.stage2_epochs {
            let mut acc = Acc::default();
            for batch in self.batches(data.len()) {
                let boxes = self.crops(data, &batch, m)?;
                let mut ys = Vec::new();
                let mut ts = Vec::new();
                let mut hs = Vec::new();
                for (&i, b) in batch.iter().zip(&boxes) {
                    let y = lum[i].crop(b.x, b.y, b.w, b.h)?;
                    hs.push(crate::cbunet::hist_to_tensor(&histogram_256(&y)?));
                    ys.push(gray_to_tensor(&y));
                    ts.push(gray_to_tensor(&data[i].target_y.crop(b.x, b.y, b.w, b.h)?));
                }
                let tape = Tape::new();
                let p = net.params.bind(&tape, true);
                let y = tape.constant(Tensor::stack(&ys)?);
                let t = tape.constant(Tensor::stack(&ts)?);
                let h = tape.constant(Tensor::stack(&hs)?);
                let pred = net.forward(&tape, &p, y, h)?;
                // luminance of the recolorized output
                let g = tape.recolorize(y, 0, pred)?;
                let l1 = losses.l1.then(|| tape.l1_loss(g, t)).transpose()?;
                let hist = losses.hist.then(|| display_hist_loss(&tape, g, t)).transpose()?;
                let terms = Terms::build(&tape, None, l1, hist)?;
                log.steps.push(terms.record(&tape, &mut acc));
                let mut grads = tape.backward(terms.total)?;
                net.params.collect_grads(&p, &mut grads)?;
                net.params.adam_step(self.cfg.lr)?;
            }
            log.epochs.push(acc.finish(epoch));
        }
        Ok(log)
    }

    /// End-to-end fine-tuning of both stages on the selected loss terms.
    pub fn joint_finetune(&mut self, data: &[Prepared], model: &mut CBUnet, losses: LossSpec) -> Result<StageLog> {
        if losses.angular {
            Self::require_illuminants(data)?;
        }
        let m = model.config.multiple();
        let mut log = StageLog::default();
        for epoch in 0..self.cfg.joint_epochs {
            let mut acc = Acc::default();
            for batch in self.batches(data.len()) {
                let boxes = self.crops(data, &batch, m)?;
                let tape = Tape::new();
                let p1 = model.stage1.params.bind(&tape, true);
                let p2 = model.stage2.params.bind(&tape, true);
                let terms = joint_loss(&tape, model, (&p1, &p2), data, &batch, &boxes, losses)?;
                log.steps.push(terms.record(&tape, &mut acc));
                let mut grads = tape.backward(terms.total)?;
                model.stage1.params.collect_grads(&p1, &mut grads)?;
                model.stage2.params.collect_grads(&p2, &mut grads)?;
                let lr = self.cfg.joint_lr.unwrap_or(self.cfg.lr);
                model.stage1.params.adam_step(lr)?;
                model.stage2.params.adam_step(lr)?;
            }
            log.epochs.push(acc.finish(epoch));
        }
        Ok(log)
    }

    /// Mean joint loss over the data with full-size crops, without updating.
    pub fn joint_eval(&mut self, data: &[Prepared], model: &CBUnet, losses: LossSpec) -> Result<f64> {
        let m = model.config.multiple();
        let mut total = 0.0;
        for i in 0..data.len() {
            let boxes = self.crops(data, &[i], m)?;
            let tape = Tape::new();
            let p1 = model.stage1.params.bind(&tape, false);
            let p2 = model.stage2.params.bind(&tape, false);
            let terms = joint_loss(&tape, model, (&p1, &p2), data, &[i], &boxes, losses)?;
            total += tape.value(terms.total).item() as f64;
        }
        Ok(total / data.len().max(1) as f64)
    }

    /// Single-stage baseline trained for `stage2_epochs + joint_epochs`.
    pub fn train_direct(&mut self, data: &[Prepared], net: &mut DirectNet, losses: LossSpec) -> Result<StageLog> {
        if !losses.l1 && !losses.hist {
            return Err(Error::Config("the single-stage network needs the L1 or histogram loss".into()));
        }
        let m = net.config().multiple();
        let mut log = StageLog::default();
        for epoch in 0..self.cfg.stage2_epochs + self.cfg.joint_epochs {
            let mut acc = Acc::default();
            for batch in self.batches(data.len()) {
                let boxes = self.crops(data, &batch, m)?;
                let tape = Tape::new();
                let p = net.params.bind(&tape, true);
                let x = tape.constant(Self::rgb_batch(data, &batch, &boxes, false)?);
                let t = tape.constant(Self::rgb_batch(data, &batch, &boxes, true)?);
                let out = net.forward(&tape, &p, x)?;
                let l1 = losses.l1.then(|| tape.l1_loss(out, t)).transpose()?;
                let hist = losses.hist.then(|| display_hist_loss(&tape, out, t)).transpose()?;
                let terms = Terms::build(&tape, None, l1, hist)?;
                log.steps.push(terms.record(&tape, &mut acc));
                let mut grads = tape.backward(terms.total)?;
                net.params.collect_grads(&p, &mut grads)?;
                net.params.adam_step(self.cfg.lr)?;
            }
            log.epochs.push(acc.finish(epoch));
        }
        Ok(log)
    }
}

/// Histogram loss on sRGB-encoded values, the domain the 8-bit targets live in.
/// Decoded 8-bit levels are spaced wider than a bin near white, which makes
/// linear-domain target histograms comb-shaped.
fn display_hist_loss(tape: &Tape, pred: Var, target: Var) -> Result<Var> {
    tape.hist_loss(tape.srgb_encode(pred), tape.srgb_encode(target))
}

#[allow(clippy::too_many_arguments)]
fn joint_loss(
    tape: &Tape,
    model: &CBUnet,
    (p1, p2): (&crate::nn::Bound, &crate::nn::Bound),
    data: &[Prepared],
    batch: &[usize],
    boxes: &[CropBox],
    losses: LossSpec,
) -> Result<Terms> {
    let x = tape.constant(Trainer::rgb_batch(data, batch, boxes, false)?);
    let target = tape.constant(Trainer::rgb_batch(data, batch, boxes, true)?);
    let illum = model.stage1.forward(tape, p1, x)?;
    let wb = tape.white_balance(x, illum)?;
    let xyz = tape.color_matrix(wb, batch.iter().map(|&i| ccm_f32(&data[i].ccm)).collect())?;
    let y = tape.channel(xyz, 1)?;
    let hist = {
        let yv = tape.value(y);
        let (n, _, h, w) = yv.dims4()?;
        let mut hs = Vec::with_capacity(n);
        for chunk in yv.data().chunks_exact(h * w) {
            let g = GrayImage::new(w, h, chunk.iter().map(|&v| v as f64).collect())?;
            hs.push(crate::cbunet::hist_to_tensor(&histogram_256(&g)?));
        }
        Tensor::stack(&hs)?
    };
    let hist = tape.constant(hist);
    let pred = model.stage2.forward(tape, p2, y, hist)?;
    let out = tape.recolorize(xyz, 1, pred)?;
    let to_srgb = ccm_f32(&ColorMatrix::XYZ_TO_SRGB);
    let rgb = tape.color_matrix(out, vec![to_srgb; batch.len()])?;
    let angular = if losses.angular {
        Some(tape.angular_loss(illum, tape.constant(Trainer::illum_batch(data, batch)?))?)
    } else {
        None
    };
    let l1 = losses.l1.then(|| tape.l1_loss(rgb, target)).transpose()?;
    let hist = losses.hist.then(|| display_hist_loss(tape, rgb, target)).transpose()?;
    Terms::build(tape, angular, l1, hist)
}

/// Full schedule: stage 1 (when the angular loss is on), stage 2 with stage 1
/// frozen, then joint fine-tuning.
pub fn train_all(pairs: &[SamplePair], cfg: &TrainConfig, losses: LossSpec) -> Result<(CBUnet, RunLog)> {
    train_all_with(pairs, cfg, losses, &mut |_, _| {})
}

/// [`train_all`] calling `progress(stage, fraction_done)` before each stage
/// and once more with `("done", 1.0)`.
pub fn train_all_with(
    pairs: &[SamplePair],
    cfg: &TrainConfig,
    losses: LossSpec,
    progress: &mut dyn FnMut(&str, f64),
) -> Result<(CBUnet, RunLog)> {
    let mut sorted: Vec<&SamplePair> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let n = cfg.train_count.unwrap_or(sorted.len()).min(sorted.len());
    let owned: Vec<SamplePair> = sorted[..n].iter().map(|p| (*p).clone()).collect();
    let data = prepare(&owned)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut model = CBUnet::new(cfg.net_config(), cfg.seed)?;
    let s1 = if losses.angular { cfg.stage1_epochs } else { 0 };
    let all = (s1 + cfg.stage2_epochs + cfg.joint_epochs).max(1) as f64;
    progress("stage1", 0.0);
    let stage1 = if losses.angular { trainer.train_stage1(&data, &mut model.stage1)? } else { StageLog::default() };
    progress("stage2", s1 as f64 / all);
    let stage2 = trainer.train_stage2(&data, Some(&model.stage1.clone()), &mut model.stage2, losses)?;
    progress("joint", (s1 + cfg.stage2_epochs) as f64 / all);
    let joint = trainer.joint_finetune(&data, &mut model, losses)?;
    progress("done", 1.0);
    Ok((model, RunLog { config: cfg.clone(), stage1, stage2, joint }))
}
