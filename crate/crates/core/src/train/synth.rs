//! Deterministic synthetic RAW/target pairs for desk-scale training and tests.
//!
//! Scenes are reflectance maps in camera RGB (which equals linear sRGB here)
//! with a neutral gray patch. The raw frame sees the scene under a colored
//! illuminant; the target is the neutral scene with a global tone curve.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{AnnotationRecord, SamplePair};
use crate::error::{Error, Result};
use crate::imaging::io::RawFrame;
use crate::imaging::{
    demosaic_bilinear, estimate_illuminant_whitepatch, linear_srgb_to_xyz, mosaic, recolorize,
    srgb_encode, xyz_to_linear_srgb, CameraMeta, CfaPattern, ColorMatrix, GrayImage, LinearRgbImage,
    PatchRect,
};

pub const BLACK_LEVEL: u32 = 512;
pub const WHITE_LEVEL: u32 = 16383;
/// Side of the neutral patch; the annotation is inset by 2 px.
pub const GRAY_PATCH: usize = 12;
pub const GRAY_VALUE: f64 = 0.5;

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { count: 4, width: 64, height: 64, seed: 7 }
    }
}

/// Brightening curve applied to target luminance.
pub fn target_tone(y: f64) -> f64 {
    (1.6 * y / (1.0 + y)).min(1.0)
}

pub struct SynthSample {
    pub pair: SamplePair,
    pub frame: RawFrame,
    /// Illuminant used to render the raw frame, camera RGB, unit length.
    pub true_illuminant: [f64; 3],
}

fn scene(rng: &mut ChaCha8Rng, w: usize, h: usize, patch: (usize, usize)) -> LinearRgbImage {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.5));
    let mut img = LinearRgbImage::filled(w, h, base);
    // smooth shading so luminance varies across the frame
    let (gx, gy) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    for y in 0..h {
        for x in 0..w {
            let s = 1.0 + gx * (x as f64 / w as f64 - 0.5) + gy * (y as f64 / h as f64 - 0.5);
            let p = img.pixel(x, y).map(|v| v * s);
            img.set_pixel(x, y, p);
        }
    }
    for _ in 0..6 {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.9));
        let (cx, cy) = (rng.random_range(0..w) as f64, rng.random_range(0..h) as f64);
        let r = rng.random_range(4.0..(w.min(h) as f64 / 3.0));
        for y in 0..h {
            for x in 0..w {
                if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) < r * r {
                    img.set_pixel(x, y, color);
                }
            }
        }
    }
    // fine texture: flat regions would give spiky target histograms. The gray card stays flat.
    for y in 0..h {
        for x in 0..w {
            let t = 1.0 + rng.random_range(-0.15..0.15);
            let p = img.pixel(x, y).map(|v| (v * t).clamp(0.05, 0.9));
            img.set_pixel(x, y, p);
        }
    }
    for y in patch.1..patch.1 + GRAY_PATCH {
        for x in patch.0..patch.0 + GRAY_PATCH {
            img.set_pixel(x, y, [GRAY_VALUE; 3]);
        }
    }
    img
}

/// Builds one sample; `index` selects the id and the CFA layout.
pub fn synth_sample(rng: &mut ChaCha8Rng, index: usize, w: usize, h: usize) -> Result<SynthSample> {
    let min = GRAY_PATCH + 6;
    if w < min || h < min || w % 2 != 0 || h % 2 != 0 {
        return Err(Error::Dimension(format!("synthetic frames must be even and at least {min}x{min}, got {w}x{h}")));
    }
    let id = format!("synth_{index:03}");
    let cfa = [CfaPattern::Rggb, CfaPattern::Bggr, CfaPattern::Grbg, CfaPattern::Gbrg][index % 4];
    let meta = CameraMeta { cfa, black_level: BLACK_LEVEL, white_level: WHITE_LEVEL, ccm: ColorMatrix::SRGB_TO_XYZ };

    let patch = (rng.random_range(2..w - GRAY_PATCH - 2), rng.random_range(2..h - GRAY_PATCH - 2));
    let refl = scene(rng, w, h, patch);
    // night lighting: mostly warm, sometimes cool
    let illum = [rng.random_range(0.45..1.25), 1.0, rng.random_range(0.3..1.1)];
    let exposure = rng.random_range(0.35..0.6);

    let mut cam = refl.clone();
    for (c, plane) in cam.planes.iter_mut().enumerate() {
        plane.iter_mut().for_each(|v| *v = (*v * exposure * illum[c] / illum[1]).clamp(0.0, 1.0));
    }
    let span = (WHITE_LEVEL - BLACK_LEVEL) as f64;
    let samples: Vec<u16> = mosaic(&cam, cfa)
        .into_iter()
        .map(|v| (BLACK_LEVEL as f64 + v * span).round() as u16)
        .collect();
    let frame = RawFrame { width: w, height: h, maxval: WHITE_LEVEL as u16, samples };
    let raw = frame.to_bayer(&meta)?;

    let rect = PatchRect { x: patch.0 + 2, y: patch.1 + 2, w: GRAY_PATCH - 4, h: GRAY_PATCH - 4 };
    let measured = estimate_illuminant_whitepatch(&demosaic_bilinear(&raw)?, rect)?;
    let annotation = AnnotationRecord {
        image_id: id.clone(),
        rect,
        illuminant: measured.rgb(),
        annotator: "synthetic".into(),
        timestamp: 0,
        version: 1,
    };

    let xyz = linear_srgb_to_xyz(&refl.scaled(exposure));
    let toned = GrayImage::new(w, h, xyz.planes[1].iter().map(|&y| target_tone(y)).collect())?;
    let target = srgb_encode(&xyz_to_linear_srgb(&recolorize(&xyz, &toned)?));

    let n = (illum[0].powi(2) + illum[1].powi(2) + illum[2].powi(2)).sqrt();
    Ok(SynthSample {
        pair: SamplePair { id, raw, target, annotation: Some(annotation) },
        frame,
        true_illuminant: illum.map(|v| v / n),
    })
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.count).map(|i| synth_sample(&mut rng, i, cfg.width, cfg.height)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_consistent() {
        let a = synth_dataset(&SynthConfig::default()).unwrap();
        let b = synth_dataset(&SynthConfig::default()).unwrap();
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.frame, y.frame);
            assert_eq!(x.pair.target, y.pair.target);
            let ann = x.pair.annotation.as_ref().unwrap();
            let il = ann.illuminant().unwrap();
            let truth = crate::imaging::Illuminant::new(
                x.true_illuminant[0],
                x.true_illuminant[1],
                x.true_illuminant[2],
            )
            .unwrap();
            // quantization and demosaic leave the patch estimate close to the truth
            assert!(il.angle_deg(&truth) < 0.2, "{}", il.angle_deg(&truth));
        }
    }
}
