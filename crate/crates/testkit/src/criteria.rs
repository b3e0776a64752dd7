//! Acceptance checks shared by the core integration tests and the CLI
//! acceptance target. Each returns measured values next to its bound.

use std::time::Instant;

use nisp_core::cbunet::{encode_weights, decode_weights, CBUnet, CBUnetConfig, ColorStage};
use nisp_core::imaging::io::{encode_meta, encode_pgm, parse_meta, parse_pgm, RawFrame};
use nisp_core::imaging::{apply_ccm, demosaic_bilinear, denoise_bilateral, recolorize, GrayImage, Illuminant};
use nisp_core::nn::{total_loss, ParamStore, Tape, Tensor};
use nisp_core::train::{
    ablation_csv, count_flops, count_params, flop_split, layer_table, prepare, psnr, run_ablation, run_all_ablations,
    split_dataset, architecture_variants, train_all, LossSpec, SamplePair, TrainConfig, Trainer,
};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::{gen, gradcheck, oracles, Outcome};

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn planes_err(a: &[Vec<f64>; 3], b: &[Vec<f64>; 3]) -> f64 {
    (0..3).map(|c| max_abs(&a[c], &b[c])).fold(0.0, f64::max)
}

/// Demosaic, bilateral, CCM and PSNR against the nested-loop references on
/// `cases` random inputs each.
pub fn oracle_equivalence(seed: u64, cases: usize) -> Vec<Outcome> {
    let start = Instant::now();
    let mut rng = crate::rng(seed);
    let (mut dm, mut bl, mut cc, mut ps) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cases {
        let raw = gen::bayer(&mut rng, 16);
        let ours = demosaic_bilinear(&raw).expect("demosaic");
        dm = dm.max(planes_err(&ours.planes, &oracles::demosaic(&raw).planes));

        let (w, h) = (rng.random_range(1..=10), rng.random_range(1..=10));
        let img = gen::rgb(&mut rng, w, h);
        let (ss, sr) = (rng.random_range(0.3..2.5), rng.random_range(0.01..1.0));
        let ours = denoise_bilateral(&img, ss, sr).expect("bilateral");
        bl = bl.max(planes_err(&ours.planes, &oracles::bilateral(&img, ss, sr).planes));

        let m = gen::color_matrix(&mut rng);
        cc = cc.max(planes_err(&apply_ccm(&img, &m).planes, &oracles::ccm(&img, &m).planes));

        let (a, mut b) = (gen::encoded(&mut rng, w, h), gen::encoded(&mut rng, w, h));
        if rng.random_bool(0.1) {
            b = a.clone();
        }
        let (p, q) = (psnr(&a, &b).expect("psnr"), oracles::psnr(&a, &b));
        let e = if p.is_infinite() && q.is_infinite() { 0.0 } else { (p - q).abs() };
        ps = ps.max(if e.is_nan() { f64::INFINITY } else { e });
    }
    let secs = start.elapsed().as_secs_f64();
    vec![
        Outcome::new("oracle: demosaic", dm <= 1e-12, format!("max abs err {dm:.1e} over {cases} mosaics (bound 1e-12)")),
        Outcome::new("oracle: ccm", cc <= 1e-12, format!("max abs err {cc:.1e} over {cases} images (bound 1e-12)")),
        Outcome::new("oracle: bilateral", bl <= 1e-9, format!("max abs err {bl:.1e} over {cases} images (bound 1e-9)")),
        Outcome::new("oracle: psnr", ps <= 1e-9, format!("max abs err {ps:.1e} dB over {cases} pairs (bound 1e-9)")),
        Outcome::new("oracle: runtime", secs < 10.0, format!("{:.1} ms (bound 10 s)", secs * 1e3)),
    ]
}

fn scalar_of(tape: &Tape, v: nisp_core::nn::Var) -> f32 {
    tape.value(v).item()
}

/// Closed-form loss values, histogram identities and the unit-weight sum.
pub fn loss_analytics(seed: u64) -> Vec<Outcome> {
    let mut rng = crate::rng(seed);
    let tape = Tape::new();
    let row = |v: [f64; 3]| tape.constant(Tensor::new([1, 3], v.map(|x| x as f32).to_vec()).unwrap());
    let s3 = 1.0 / 3f64.sqrt();
    let cases = [
        ([0.6, 0.0, 0.8], [0.6, 0.0, 0.8], 0.0),
        ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], 90.0),
        ([s3, s3, s3], [1.0, 0.0, 0.0], s3.acos().to_degrees()),
    ];
    let mut ang_err = 0.0f64;
    for (a, b, want) in cases {
        let got = scalar_of(&tape, tape.angular_loss(row(a), row(b)).unwrap()) as f64;
        ang_err = ang_err.max((got - want).abs());
    }

    let shape = [2usize, 1, 8, 8];
    let a: Vec<f32> = (0..128).map(|_| rng.random_range(0.0f32..1.0)).collect();
    let mut perm = a.clone();
    for s in perm.chunks_mut(64) {
        s.shuffle(&mut rng);
    }
    let av = tape.constant(Tensor::new(shape, a.clone()).unwrap());
    let pv = tape.constant(Tensor::new(shape, perm).unwrap());
    let self_loss = scalar_of(&tape, tape.hist_loss(av, av).unwrap());
    let perm_loss = scalar_of(&tape, tape.hist_loss(av, pv).unwrap());

    let b: Vec<f32> = (0..128).map(|_| rng.random_range(0.0f32..1.0)).collect();
    let bv = tape.constant(Tensor::new(shape, b).unwrap());
    let illum_a = row([0.3, 0.5, 0.8]);
    let illum_b = row([0.5, 0.6, 0.4]);
    let parts = [
        tape.angular_loss(illum_a, illum_b).unwrap(),
        tape.l1_loss(av, bv).unwrap(),
        tape.hist_loss(av, bv).unwrap(),
    ];
    let total = scalar_of(&tape, total_loss(&tape, &parts).unwrap());
    let by_hand = parts.iter().fold(0.0f32, |s, &p| s + scalar_of(&tape, p));

    vec![
        Outcome::new("loss: angular cases", ang_err <= 1e-6, format!("0/90/54.7356 deg, max err {ang_err:.1e} (bound 1e-6)")),
        Outcome::new("loss: hist(a, a) = 0", self_loss == 0.0, format!("{self_loss}")),
        Outcome::new("loss: hist permutation", perm_loss == 0.0, format!("hist(a, permute(a)) = {perm_loss}")),
        Outcome::new(
            "loss: total = sum",
            total.to_bits() == by_hand.to_bits(),
            format!("total {total} vs component sum {by_hand}"),
        ),
    ]
}

pub fn gradient_suite(seed: u64) -> Outcome {
    let start = Instant::now();
    let reports = gradcheck::suite(seed);
    let secs = start.elapsed().as_secs_f64();
    let worst = reports.iter().max_by(|a, b| a.max_rel.total_cmp(&b.max_rel)).expect("non-empty suite");
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass()).map(|r| r.name.as_str()).collect();
    let pass = failed.is_empty() && secs < 60.0;
    Outcome::new(
        "gradient suite",
        pass,
        format!(
            "{} ops, worst rel err {:.1e} ({}), failing {:?}, {:.1} ms (bounds 1e-3, 60 s)",
            reports.len(),
            worst.max_rel,
            worst.name,
            failed,
            secs * 1e3
        ),
    )
}

/// X/Y and Z/Y survive recolorization wherever Y > 0.01.
pub fn chromaticity(seed: u64, images: usize) -> Outcome {
    let mut rng = crate::rng(seed);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for _ in 0..images {
        let (w, h) = (rng.random_range(4..=16), rng.random_range(4..=16));
        let xyz = gen::xyz(&mut rng, w, h);
        let pred = GrayImage::new(w, h, crate::uniform(&mut rng, w * h, 0.0, 2.0)).unwrap();
        let out = recolorize(&xyz, &pred).unwrap();
        for i in 0..w * h {
            let (yi, yo) = (xyz.planes[1][i], out.planes[1][i]);
            if yi > 0.01 && yo > 0.01 {
                for c in [0, 2] {
                    let (ri, ro) = (xyz.planes[c][i] / yi, out.planes[c][i] / yo);
                    worst = worst.max((ri - ro).abs() / ri.abs().max(1.0));
                }
                checked += 1;
            }
        }
    }
    Outcome::new(
        "chromaticity preserved",
        worst <= 1e-4,
        format!("{images} images, {checked} pixels, max ratio err {worst:.1e} (bound 1e-4)"),
    )
}

/// Every parameter's bit pattern, in store order.
pub fn fingerprint(store: &ParamStore) -> Vec<(String, Vec<u32>)> {
    store.iter().map(|(n, p)| (n.to_string(), p.value.data().iter().map(|v| v.to_bits()).collect())).collect()
}

pub fn frozen_stage1(pairs: &[SamplePair]) -> Outcome {
    let mut cfg = TrainConfig::desk();
    cfg.stage2_epochs = 3;
    let data = prepare(pairs).unwrap();
    let mut model = CBUnet::new(cfg.net_config(), cfg.seed).unwrap();
    let before = fingerprint(&model.stage1.params);
    let before2 = fingerprint(&model.stage2.params);
    let mut trainer = Trainer::new(cfg).unwrap();
    let log = trainer.train_stage2(&data, Some(&model.stage1), &mut model.stage2, LossSpec::ALL).unwrap();
    let same = before == fingerprint(&model.stage1.params);
    let moved = before2 != fingerprint(&model.stage2.params);
    Outcome::new(
        "frozen stage 1",
        same && moved,
        format!("{} stage-2 steps; stage-1 bitwise equal: {same}; stage 2 updated: {moved}", log.steps.len()),
    )
}

/// Mean angle between the trained stage 1 and each annotation, full images.
fn stage1_error(model: &CBUnet, pairs: &[SamplePair]) -> f64 {
    let errs: Vec<f64> = pairs
        .iter()
        .map(|p| {
            let est = model.stage1.estimate(&demosaic_bilinear(&p.raw).unwrap()).unwrap();
            est.angle_deg(&p.annotation.as_ref().unwrap().illuminant().unwrap())
        })
        .collect();
    errs.iter().sum::<f64>() / errs.len() as f64
}

/// Desk schedule on the bundled pairs, run twice for determinism.
pub fn desk_overfit(pairs: &[SamplePair]) -> Vec<Outcome> {
    let cfg = TrainConfig::desk();
    let start = Instant::now();
    let (m1, log1) = train_all(pairs, &cfg, LossSpec::ALL).unwrap();
    let (m2, log2) = train_all(pairs, &cfg, LossSpec::ALL).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let s1_steps = log1.stage1.steps.len();
    let s2_steps = log1.stage2.steps.len();
    let s1_log = log1.stage1.epochs.last().and_then(|e| e.angular).unwrap_or(f64::NAN);
    let s2_l1 = log1.stage2.epochs.last().and_then(|e| e.l1).unwrap_or(f64::NAN);
    let s1_full = stage1_error(&m1, pairs);
    let same = encode_weights(&m1).unwrap() == encode_weights(&m2).unwrap() && log1 == log2;
    vec![
        Outcome::new(
            "desk overfit: stage 1 angular",
            s1_log < 2.0 && s1_steps <= 500,
            format!("last-epoch train mean {s1_log:.3} deg after {s1_steps} steps; full-image mean {s1_full:.3} deg (bound 2 deg within 500 steps)"),
        ),
        Outcome::new(
            "desk overfit: stage 2 L1",
            s2_l1 < 0.02 && s2_steps <= 1000,
            format!("last-epoch train L1 {s2_l1:.4} after {s2_steps} steps (bound 0.02 within 1000 steps)"),
        ),
        Outcome::new("desk overfit: deterministic", same, format!("two seeded runs give identical weights and logs: {same}")),
        Outcome::new("desk overfit: time", secs < 300.0, format!("{secs:.1} s for two full runs (bound 300 s)")),
    ]
}

/// One `| name | kind | params | flops |` row of the shipped table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocRow {
    pub name: String,
    pub kind: String,
    pub params: u64,
    pub flops: u64,
}

/// Layer rows and the `(params, flops)` total row.
pub fn parse_count_table(md: &str) -> (Vec<DocRow>, Option<(u64, u64)>) {
    let mut rows = Vec::new();
    let mut total = None;
    for line in md.lines() {
        let cells: Vec<&str> = line.trim().trim_matches('|').split('|').map(str::trim).collect();
        if cells.len() != 4 {
            continue;
        }
        let (Ok(p), Ok(f)) = (cells[2].parse::<u64>(), cells[3].parse::<u64>()) else { continue };
        if cells[0] == "**total**" {
            total = Some((p, f));
        } else {
            rows.push(DocRow { name: cells[0].into(), kind: cells[1].into(), params: p, flops: f });
        }
    }
    (rows, total)
}

/// Compares the tiny preset against the hand-derived table in `md`.
pub fn counting(md: &str) -> Vec<Outcome> {
    let model = CBUnet::new(CBUnetConfig::tiny(), 0).unwrap();
    let ours: Vec<DocRow> = layer_table(&model, 64, 64)
        .unwrap()
        .into_iter()
        .map(|r| DocRow { name: r.name, kind: r.kind.to_string(), params: r.params, flops: r.flops })
        .collect();
    let (doc, total) = parse_count_table(md);
    let first_diff = ours.iter().zip(&doc).position(|(a, b)| a != b);
    let rows_match = ours.len() == doc.len() && first_diff.is_none();
    let params = count_params(&model);
    let flops = count_flops(&model, 64, 64).unwrap();
    let totals_match = total == Some((params, flops));

    let (s1, f1) = flop_split(&model, 64, 64).unwrap();
    let (s2, f2) = flop_split(&model, 128, 128).unwrap();
    let f128 = count_flops(&model, 128, 128).unwrap();
    let scales = s2 == 4 * s1 && f1 == f2;
    vec![
        Outcome::new(
            "counting: per-layer table",
            rows_match,
            format!("{} rows ours, {} in docs, first mismatch at {:?}", ours.len(), doc.len(), first_diff),
        ),
        Outcome::new(
            "counting: totals",
            totals_match,
            format!("params {params}, flops {flops} vs docs {total:?}"),
        ),
        Outcome::new(
            "counting: x4 on doubled dims",
            scales,
            format!(
                "area terms {s1} -> {s2} (x{:.4}), per-image terms {f1} -> {f2}; total x{:.5}",
                s2 as f64 / s1 as f64,
                f128 as f64 / flops as f64
            ),
        ),
    ]
}

/// Weight file and PGM + sidecar byte round-trips.
pub fn format_roundtrips(seed: u64) -> Vec<Outcome> {
    let mut rng = crate::rng(seed);
    let mut model = CBUnet::new(CBUnetConfig::tiny(), seed).unwrap();
    // perturb so biases are not all zero
    for store in [&mut model.stage1.params, &mut model.stage2.params] {
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            for v in store.value_mut(&n).unwrap().data_mut() {
                *v += rng.random_range(-1.0f32..1.0);
            }
        }
    }
    let bytes = encode_weights(&model).unwrap();
    let back = decode_weights(&bytes).unwrap();
    let weights_ok = fingerprint(&model.stage1.params) == fingerprint(&back.stage1.params)
        && fingerprint(&model.stage2.params) == fingerprint(&back.stage2.params)
        && encode_weights(&back).unwrap() == bytes;

    let mut pgm_ok = true;
    for _ in 0..20 {
        let (w, h) = (2 * rng.random_range(1..=16), 2 * rng.random_range(1..=16));
        let maxval = if rng.random_bool(0.5) { 65535 } else { 255 };
        let samples = (0..w * h).map(|_| rng.random_range(0..=maxval)).collect();
        let frame = RawFrame { width: w, height: h, maxval, samples };
        let bytes = encode_pgm(&frame);
        let parsed = parse_pgm(&bytes).unwrap();
        let meta = gen::meta(&mut rng);
        let mbytes = encode_meta(&meta);
        let mparsed = parse_meta(&mbytes).unwrap();
        pgm_ok &= parsed == frame && encode_pgm(&parsed) == bytes && mparsed == meta && encode_meta(&mparsed) == mbytes;
    }
    vec![
        Outcome::new("format: weights bitwise", weights_ok, format!("{} bytes, every tensor bit-identical", bytes.len())),
        Outcome::new("format: pgm + sidecar byte-stable", pgm_ok, "20 random frames and sidecars re-emit identical bytes"),
    ]
}

/// Shortened schedule for the seven ablation rows.
pub fn ablation_config() -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.stage1_epochs = 100;
    cfg.stage2_epochs = 100;
    cfg.joint_epochs = 5;
    cfg
}

/// Every architecture and loss ablation row; returns the outcome and the CSV text.
pub fn ablation(pairs: &[SamplePair], train_count: usize) -> (Outcome, String) {
    let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
    let split = split_dataset(&ids, train_count).unwrap();
    let pick = |set: &[String]| -> Vec<SamplePair> { pairs.iter().filter(|p| set.contains(&p.id)).cloned().collect() };
    let (train, test) = (pick(&split.train), pick(&split.test));
    let cfg = ablation_config();
    let rows = run_all_ablations(&train, &test, &cfg).unwrap();
    let csv = ablation_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    let shaped = lines.first() == Some(&"variant,psnr_db,params,flops") && lines.len() == 8;
    let finite = rows.iter().all(|r| r.psnr_db.is_finite() && r.params > 0 && r.flops > 0);
    let again = run_ablation(architecture_variants()[0], LossSpec::ALL, &train, &test, &cfg).unwrap();
    let deterministic = again == rows[0];
    (
        Outcome::new(
            "ablation harness",
            shaped && finite && deterministic,
            format!("{} rows (4 architecture, 3 loss), csv shaped: {shaped}, finite: {finite}, repeat identical: {deterministic}", rows.len()),
        ),
        csv,
    )
}

/// Illuminant of a patch with mean (0.1, 0.2, 0.2), for cross-checks.
pub fn known_patch_illuminant() -> Illuminant {
    Illuminant::new(1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0).unwrap()
}
