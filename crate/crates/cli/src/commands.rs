//! Subcommand implementations. Each returns a [`CliError`] carrying the exit code.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nisp_core::cbunet::{self, CBUnetConfig, Preset};
use nisp_core::imaging::io::{self, RawFrame};
use nisp_core::imaging::{
    estimate_illuminant_whitepatch, render_baseline, render_preview, srgb_encode, srgb_encode_u16, BaselineParams,
    Illuminant, PatchRect, PREVIEW_PIPELINE_VERSION,
};
use nisp_core::train::synth::{synth_dataset, SynthConfig};
use nisp_core::train::{
    self, ablation_csv, count_flops, count_params, load_dataset, run_all_ablations, split_dataset, train_all_with,
    valid_id, write_sample, DatasetPaths, LossSpec, SamplePair, TrainConfig,
};

use crate::error::{CliError, CliResult};
use crate::job::{JobState, JobStatus};

/// PNG tEXt key carrying the preview pipeline version.
pub const PREVIEW_TEXT_KEY: &str = "nisp:preview-pipeline";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Pipeline {
    Baseline,
    Cbunet,
}

/// Parses `x,y,w,h`.
pub fn parse_rect(s: &str) -> Result<PatchRect, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(format!("expected x,y,w,h, got `{s}`"));
    }
    let mut v = [0usize; 4];
    for (slot, (p, name)) in v.iter_mut().zip(parts.iter().zip(["x", "y", "w", "h"])) {
        *slot = p.parse().map_err(|_| format!("{name} must be a nonnegative integer, got `{p}`"))?;
    }
    Ok(PatchRect { x: v[0], y: v[1], w: v[2], h: v[3] })
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::new(crate::error::exit::IO, format!("{}: {e}", dir.display())))?;
    }
    Ok(())
}

fn write_out(path: &Path, bytes: &[u8]) -> CliResult<()> {
    ensure_parent(path)?;
    Ok(io::write_file_atomic(path, bytes)?)
}

pub struct RenderArgs {
    pub input: PathBuf,
    pub meta: Option<PathBuf>,
    pub pipeline: Pipeline,
    pub weights: Option<PathBuf>,
    /// When set, the weight file's config must match this preset.
    pub preset: Option<Preset>,
    pub output: PathBuf,
    pub output16: Option<PathBuf>,
}

pub fn render(a: &RenderArgs) -> CliResult<()> {
    let raw = io::load_raw(&a.input, a.meta.as_deref())?;
    let (img, wide) = match a.pipeline {
        Pipeline::Baseline => {
            let lin = render_baseline(&raw, &BaselineParams::default())?;
            (srgb_encode(&lin), srgb_encode_u16(&lin))
        }
        Pipeline::Cbunet => {
            let w = a
                .weights
                .as_deref()
                .ok_or_else(|| CliError::config("--pipeline cbunet needs --weights"))?;
            let model = match a.preset {
                Some(p) => cbunet::load_weights_for(w, &CBUnetConfig::from_preset(p))?,
                None => cbunet::load_weights(w)?,
            };
            let r = cbunet::render(&raw, &model)?;
            (r.image, r.intermediate16)
        }
    };
    write_out(&a.output, &io::encode_png8(&img, &[])?)?;
    if let Some(p) = &a.output16 {
        write_out(p, &io::encode_png16(img.width, img.height, &wide)?)?;
    }
    Ok(())
}

/// Writes the annotation preview; with a rect, returns the white-patch
/// illuminant measured on the linear demosaiced image.
pub fn preview(input: &Path, meta: Option<&Path>, output: &Path, rect: Option<PatchRect>) -> CliResult<Option<Illuminant>> {
    let raw = io::load_raw(input, meta)?;
    let (linear, display) = render_preview(&raw)?;
    let illum = rect.map(|r| estimate_illuminant_whitepatch(&linear, r)).transpose()?;
    write_out(output, &io::encode_png8(&display, &[(PREVIEW_TEXT_KEY, PREVIEW_PIPELINE_VERSION)])?)?;
    Ok(illum)
}

/// Reads a JSON [`TrainConfig`]; without a file the desk schedule is used.
pub fn load_train_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            let bytes = io::read_file(p)?;
            serde_json::from_slice::<TrainConfig>(&bytes)
                .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::desk(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub struct TrainArgs {
    pub dataset: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub output: PathBuf,
    /// Defaults to `<output>.log.json`.
    pub log: Option<PathBuf>,
}

pub fn log_path(a: &TrainArgs) -> PathBuf {
    a.log.clone().unwrap_or_else(|| {
        let mut s = a.output.clone().into_os_string();
        s.push(".log.json");
        PathBuf::from(s)
    })
}

/// Runs the staged schedule, reporting through `report` after every state change.
pub fn train(a: &TrainArgs, report: &mut dyn FnMut(&JobStatus)) -> CliResult<()> {
    let mut job = JobStatus::new(format!("train:{}", a.output.display()));
    report(&job);
    let result = train_inner(a, &mut job, report);
    if let Err(e) = &result {
        if !job.state.is_terminal() {
            let p = job.progress;
            job.advance(JobState::Failed, p, e.message.clone()).expect("failing a live job");
            report(&job);
        }
    }
    result
}

fn train_inner(a: &TrainArgs, job: &mut JobStatus, report: &mut dyn FnMut(&JobStatus)) -> CliResult<()> {
    let cfg = load_train_config(a.config.as_deref(), a.seed)?;
    let pairs = load_dataset(&a.dataset, true)?;
    let mut on_stage = |stage: &str, frac: f64| {
        if job.advance(JobState::Running, frac, stage).is_ok() {
            report(job);
        }
    };
    let (model, log) = train_all_with(&pairs, &cfg, LossSpec::ALL, &mut on_stage)?;
    ensure_parent(&a.output)?;
    cbunet::save_weights(&model, &a.output)?;
    let mut log_bytes = serde_json::to_vec_pretty(&log).expect("run log serializes");
    log_bytes.push(b'\n');
    write_out(&log_path(a), &log_bytes)?;
    job.advance(JobState::Done, 1.0, "weights written").expect("finishing a running job");
    report(job);
    Ok(())
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

/// Per-image PSNR of cbunet renders against the dataset targets, then a mean
/// row. Infinite PSNR (identical images) is written as `inf`.
pub fn eval_csv(model: &cbunet::CBUnet, pairs: &[SamplePair]) -> CliResult<String> {
    let scores = train::evaluate(model, pairs)?;
    let params = count_params(model);
    let mut csv = String::from("image_id,width,height,psnr_db,params,flops\n");
    let mut flops_sum = 0u64;
    for ((id, db), p) in scores.iter().zip(pairs) {
        let flops = count_flops(model, p.raw.width, p.raw.height)?;
        flops_sum += flops;
        let _ = writeln!(csv, "{id},{},{},{},{params},{flops}", p.raw.width, p.raw.height, fmt_db(*db));
    }
    let n = scores.len().max(1) as f64;
    let mean = scores.iter().map(|(_, d)| d).sum::<f64>() / n;
    let _ = writeln!(csv, "mean,,,{},{params},{}", fmt_db(mean), (flops_sum as f64 / n).round() as u64);
    Ok(csv)
}

pub fn eval(dataset: &Path, weights: &Path, output: &Path) -> CliResult<String> {
    let model = cbunet::load_weights(weights)?;
    let pairs = load_dataset(dataset, false)?;
    let csv = eval_csv(&model, &pairs)?;
    write_out(output, csv.as_bytes())?;
    Ok(csv)
}

pub struct ConvertArgs {
    pub input: PathBuf,
    pub meta: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub dataset: PathBuf,
    /// Defaults to the input file stem.
    pub id: Option<String>,
}

/// Validates one mosaic (plus optional target PNG) and writes it into
/// dataset layout in canonical form. Returns the sample id.
pub fn convert(a: &ConvertArgs) -> CliResult<String> {
    let id = match &a.id {
        Some(id) => id.clone(),
        None => a.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
    };
    if !valid_id(&id) {
        return Err(CliError::config(format!("`{id}` is not a valid sample id (use [A-Za-z0-9_-])")));
    }
    let frame: RawFrame = io::read_pgm(&a.input)?;
    let meta_path = a.meta.clone().unwrap_or_else(|| io::sidecar_path(&a.input));
    let meta = io::read_meta(&meta_path)?;
    let raw = frame.to_bayer(&meta)?;
    let paths = DatasetPaths::new(&a.dataset);
    if let Some(t) = &a.target {
        let target = io::read_png(t)?;
        if (target.width, target.height) != (raw.width, raw.height) {
            return Err(nisp_core::Error::Format(format!(
                "{}: target is {}x{}, raw is {}x{}",
                t.display(),
                target.width,
                target.height,
                raw.width,
                raw.height
            ))
            .into());
        }
        write_out(&paths.target(&id), &io::encode_png8(&target, &[])?)?;
    }
    write_out(&paths.raw(&id), &io::encode_pgm(&frame))?;
    write_out(&paths.meta(&id), &io::encode_meta(&meta))?;
    Ok(id)
}

/// Writes `count` synthetic samples (with annotations) into dataset layout.
pub fn synth(dataset: &Path, count: usize, size: usize, seed: u64) -> CliResult<Vec<String>> {
    let samples = synth_dataset(&SynthConfig { count, width: size, height: size, seed })?;
    let mut ids = Vec::new();
    for s in &samples {
        write_sample(dataset, &s.frame, &s.pair)?;
        ids.push(s.pair.id.clone());
    }
    Ok(ids)
}

/// Trains every ablation row on the first `train_count` ids and scores the rest.
pub fn ablation(dataset: &Path, config: Option<&Path>, seed: Option<u64>, train_count: usize, output: &Path) -> CliResult<String> {
    let cfg = load_train_config(config, seed)?;
    let pairs = load_dataset(dataset, true)?;
    let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
    let split = split_dataset(&ids, train_count).map_err(|e| CliError::config(e.to_string()))?;
    let pick = |set: &[String]| -> Vec<SamplePair> { pairs.iter().filter(|p| set.contains(&p.id)).cloned().collect() };
    let rows = run_all_ablations(&pick(&split.train), &pick(&split.test), &cfg)?;
    let csv = ablation_csv(&rows);
    write_out(output, csv.as_bytes())?;
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_parsing() {
        assert_eq!(parse_rect("1, 2,30,40").unwrap(), PatchRect { x: 1, y: 2, w: 30, h: 40 });
        assert!(parse_rect("1,2,3").is_err());
        assert!(parse_rect("1,2,-3,4").unwrap_err().contains('w'));
    }

    #[test]
    fn default_config_is_desk_with_seed_override() {
        let cfg = load_train_config(None, Some(9)).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.stage2_epochs, TrainConfig::desk().stage2_epochs);
    }
}
