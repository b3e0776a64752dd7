use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::dataset::SamplePair;
use super::metrics::{count_flops, count_params, psnr};
use super::trainer::{prepare, LossSpec, TrainConfig, Trainer};
use crate::cbunet::{pad_rgb, render, rgb_to_tensor, CBUnet, DirectNet};
use crate::error::{Error, Result};
use crate::imaging::{demosaic_bilinear, srgb_encode, EncodedImage, LinearRgbImage};
use crate::nn::Tape;

/// Architecture flags of one ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub channel_attention: bool,
    pub two_stage: bool,
    pub histogram_branch: bool,
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.histogram_branch && !self.two_stage {
            return Err(Error::Config("the histogram branch requires the two-stage network".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        if self.two_stage && self.channel_attention && self.histogram_branch {
            return "CBUnet".into();
        }
        let mut s = String::from("Unet");
        if self.channel_attention {
            s.push_str("+CA");
        }
        if self.two_stage {
            s.push_str("+TwoStage");
        }
        if self.histogram_branch {
            s.push_str("+Hist");
        }
        s
    }
}

/// Architecture rows, simplest first.
pub fn architecture_variants() -> Vec<AblationSpec> {
    let s = |channel_attention, two_stage, histogram_branch| AblationSpec { channel_attention, two_stage, histogram_branch };
    vec![s(false, false, false), s(true, false, false), s(true, true, false), s(true, true, true)]
}

/// Loss rows on the full network.
pub fn loss_variants() -> Vec<LossSpec> {
    vec![
        LossSpec { l1: true, angular: false, hist: false },
        LossSpec { l1: true, angular: true, hist: false },
        LossSpec::ALL,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub psnr_db: f64,
    pub params: u64,
    pub flops: u64,
}

/// Flops are reported at this input size.
pub const FLOPS_SIZE: usize = 1024;

/// Per-sample PSNR of full renders against the targets.
pub fn evaluate(model: &CBUnet, pairs: &[SamplePair]) -> Result<Vec<(String, f64)>> {
    pairs
        .iter()
        .map(|p| Ok((p.id.clone(), psnr(&render(&p.raw, model)?.image, &p.target)?)))
        .collect()
}

fn render_direct(net: &DirectNet, rgb: &LinearRgbImage) -> Result<EncodedImage> {
    let padded = pad_rgb(rgb, net.config().multiple());
    let tape = Tape::new();
    let p = net.params.bind(&tape, false);
    let x = tape.constant(rgb_to_tensor(&padded));
    let out = net.forward(&tape, &p, x)?;
    let v = tape.value(out);
    let hw = padded.width * padded.height;
    let planes = [0, 1, 2].map(|c| v.data()[c * hw..(c + 1) * hw].iter().map(|&x| x as f64).collect());
    let lin = LinearRgbImage::new(padded.width, padded.height, planes)?.crop(0, 0, rgb.width, rgb.height)?;
    Ok(srgb_encode(&lin))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Trains one variant on `train` and reports mean PSNR on `test`.
pub fn run_ablation(
    spec: AblationSpec,
    losses: LossSpec,
    train: &[SamplePair],
    test: &[SamplePair],
    cfg: &TrainConfig,
) -> Result<AblationRow> {
    spec.validate()?;
    let mut net_cfg = cfg.net_config();
    net_cfg.attention_enabled = spec.channel_attention;
    net_cfg.histogram_branch_enabled = spec.histogram_branch;
    let data = prepare(train)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let variant = if losses == LossSpec::ALL { spec.label() } else { format!("{}[{}]", spec.label(), losses.label()) };
    if spec.two_stage {
        let mut model = CBUnet::new(net_cfg, cfg.seed)?;
        if losses.angular {
            trainer.train_stage1(&data, &mut model.stage1)?;
        }
        let frozen = model.stage1.clone();
        trainer.train_stage2(&data, Some(&frozen), &mut model.stage2, losses)?;
        trainer.joint_finetune(&data, &mut model, losses)?;
        let scores: Vec<f64> = evaluate(&model, test)?.into_iter().map(|(_, s)| s).collect();
        Ok(AblationRow {
            variant,
            psnr_db: mean(&scores),
            params: count_params(&model),
            flops: count_flops(&model, FLOPS_SIZE, FLOPS_SIZE)?,
        })
    } else {
        let mut net = DirectNet::new(net_cfg, cfg.seed)?;
        trainer.train_direct(&data, &mut net, losses)?;
        let scores = test
            .iter()
            .map(|p| psnr(&render_direct(&net, &demosaic_bilinear(&p.raw)?)?, &p.target))
            .collect::<Result<Vec<f64>>>()?;
        Ok(AblationRow {
            variant,
            psnr_db: mean(&scores),
            params: net.params.numel() as u64,
            flops: net.costs(FLOPS_SIZE, FLOPS_SIZE).iter().map(|r| r.flops).sum(),
        })
    }
}

/// Every architecture row (with all losses) then every loss row on the full network.
pub fn run_all_ablations(train: &[SamplePair], test: &[SamplePair], cfg: &TrainConfig) -> Result<Vec<AblationRow>> {
    let full = AblationSpec { channel_attention: true, two_stage: true, histogram_branch: true };
    let arch = architecture_variants().into_iter().map(|s| (s, LossSpec::ALL));
    let loss = loss_variants().into_iter().map(|l| (full, l));
    arch.chain(loss).map(|(s, l)| run_ablation(s, l, train, test, cfg)).collect()
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,psnr_db,params,flops\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.variant, fmt_db(r.psnr_db), r.params, r.flops);
    }
    s
}
