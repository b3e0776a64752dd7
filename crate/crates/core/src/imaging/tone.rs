//! Luminance-driven tone operators that keep chromaticity fixed.

use super::types::{GrayImage, XyzImage};
use crate::error::{Error, Result};

/// Guard added to luminance denominators.
pub const LUMA_EPS: f64 = 1e-6;

/// Scales each XYZ pixel by `predicted / (Y + eps)`.
pub fn recolorize(xyz: &XyzImage, predicted: &GrayImage) -> Result<XyzImage> {
    if predicted.width != xyz.width || predicted.height != xyz.height {
        return Err(Error::Dimension(format!(
            "brightness map {}x{} does not match image {}x{}",
            predicted.width, predicted.height, xyz.width, xyz.height
        )));
    }
    let mut out = xyz.clone();
    for i in 0..xyz.len() {
        let ratio = predicted.data[i] / (xyz.planes[1][i] + LUMA_EPS);
        for plane in out.planes.iter_mut() {
            plane[i] *= ratio;
        }
    }
    Ok(out)
}

/// Global gamma on luminance: `Y' = Y^(1/gamma)`, X and Z follow the same ratio.
///
/// Stand-in for the challenge baseline's tone mapper.
pub fn tone_baseline_global(img: &XyzImage, gamma: f64) -> Result<XyzImage> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Parameter(format!("gamma must be positive, got {gamma}")));
    }
    let mut out = img.clone();
    for i in 0..img.len() {
        let y = img.planes[1][i];
        let mapped = y.max(0.0).powf(1.0 / gamma);
        let ratio = mapped / y.max(LUMA_EPS);
        for plane in out.planes.iter_mut() {
            plane[i] *= ratio;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_one_is_identity() {
        let img = XyzImage::new(3, 1, [vec![0.1, 0.4, 0.0], vec![0.2, 0.9, 0.0], vec![0.3, 0.05, 0.0]])
            .unwrap();
        assert_eq!(tone_baseline_global(&img, 1.0).unwrap(), img);
    }

    #[test]
    fn gamma_two_on_quarter() {
        let img = XyzImage::filled(1, 1, [0.2, 0.25, 0.3]);
        let out = tone_baseline_global(&img, 2.0).unwrap();
        assert_eq!(out.pixel(0, 0), [0.4, 0.5, 0.6]);
        let zero = tone_baseline_global(&XyzImage::zeros(2, 2), 2.0).unwrap();
        assert!(zero.planes.iter().flatten().all(|&v| v == 0.0));
        assert!(tone_baseline_global(&img, 0.0).is_err());
    }

    #[test]
    fn recolorize_doubles() {
        let img = XyzImage::filled(2, 1, [0.1, 0.2, 0.3]);
        let pred = GrayImage::new(2, 1, vec![0.4, 0.4]).unwrap();
        let out = recolorize(&img, &pred).unwrap();
        for (a, b) in img.planes.iter().flatten().zip(out.planes.iter().flatten()) {
            assert!((b / a - 2.0).abs() < 1e-4);
        }
    }

    #[test]
    fn recolorize_zero_luma_is_finite() {
        let img = XyzImage::zeros(1, 1);
        let pred = GrayImage::new(1, 1, vec![0.5]).unwrap();
        let out = recolorize(&img, &pred).unwrap();
        assert!(out.planes.iter().flatten().all(|v| v.is_finite()));
    }
}
