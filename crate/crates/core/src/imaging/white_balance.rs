//! Illuminant estimation (gray-world, white-patch) and green-anchored white balance.

use super::types::{Illuminant, LinearRgbImage, PatchRect};
use crate::error::{Error, Result};

fn channel_means(img: &LinearRgbImage, rect: PatchRect) -> [f64; 3] {
    let n = (rect.w * rect.h) as f64;
    let mut means = [0.0; 3];
    for (c, m) in means.iter_mut().enumerate() {
        let plane = &img.planes[c];
        let mut sum = 0.0;
        for y in rect.y..rect.y + rect.h {
            let row = &plane[y * img.width + rect.x..y * img.width + rect.x + rect.w];
            sum += row.iter().sum::<f64>();
        }
        *m = sum / n;
    }
    means
}

fn illuminant_from_means(means: [f64; 3], what: &str) -> Result<Illuminant> {
    if means.iter().any(|m| *m <= 0.0 || !m.is_finite()) {
        return Err(Error::DegenerateInput(format!(
            "{what} channel means ({}, {}, {}) include a zero",
            means[0], means[1], means[2]
        )));
    }
    Illuminant::new(means[0], means[1], means[2])
}

/// Gray-world estimate: per-channel image means, L2-normalized.
pub fn estimate_illuminant_grayworld(img: &LinearRgbImage) -> Result<Illuminant> {
    if img.is_empty() {
        return Err(Error::DegenerateInput("empty image".into()));
    }
    let full = PatchRect { x: 0, y: 0, w: img.width, h: img.height };
    illuminant_from_means(channel_means(img, full), "gray-world")
}

/// White-patch estimate: mean RGB over `rect`, L2-normalized.
pub fn estimate_illuminant_whitepatch(img: &LinearRgbImage, rect: PatchRect) -> Result<Illuminant> {
    rect.validate(img.width, img.height)?;
    illuminant_from_means(channel_means(img, rect), "white patch")
}

/// Scales channel `c` by `illum.g / illum.c` and clips to `[0, 1]`.
pub fn apply_white_balance(img: &LinearRgbImage, illum: &Illuminant) -> Result<LinearRgbImage> {
    if illum.rgb().iter().any(|v| *v <= 0.0) {
        return Err(Error::Parameter("illuminant components must be positive".into()));
    }
    let gains = illum.gains();
    let mut out = img.clone();
    for (plane, k) in out.planes.iter_mut().zip(gains) {
        for v in plane.iter_mut() {
            *v = (*v * k).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn gray_image_is_neutral() {
        let img = LinearRgbImage::filled(4, 4, [0.3; 3]);
        let il = estimate_illuminant_grayworld(&img).unwrap();
        let c = 1.0 / 3f64.sqrt();
        assert!(close(il.rgb(), [c, c, c], 1e-12));
    }

    #[test]
    fn grayworld_normalizes_means() {
        let mut img = LinearRgbImage::filled(2, 2, [0.2, 0.4, 0.4]);
        // Same means with spatial variation.
        img.planes[0] = vec![0.1, 0.3, 0.2, 0.2];
        let il = estimate_illuminant_grayworld(&img).unwrap();
        assert!(close(il.rgb(), [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0], 1e-12));
    }

    #[test]
    fn zero_image_is_degenerate() {
        let img = LinearRgbImage::zeros(4, 4);
        assert!(matches!(estimate_illuminant_grayworld(&img), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn whitepatch_examples() {
        let mut img = LinearRgbImage::filled(8, 8, [0.9, 0.1, 0.3]);
        for y in 2..6 {
            for x in 2..6 {
                img.set_pixel(x, y, [0.1, 0.2, 0.2]);
            }
        }
        let rect = PatchRect { x: 2, y: 2, w: 4, h: 4 };
        let il = estimate_illuminant_whitepatch(&img, rect).unwrap();
        assert!(close(il.rgb(), [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0], 1e-12));

        let gray = LinearRgbImage::filled(8, 8, [0.5; 3]);
        let c = 1.0 / 3f64.sqrt();
        let il = estimate_illuminant_whitepatch(&gray, rect).unwrap();
        assert!(close(il.rgb(), [c, c, c], 1e-12));

        let outside = PatchRect { x: 6, y: 0, w: 4, h: 4 };
        assert!(matches!(estimate_illuminant_whitepatch(&img, outside), Err(Error::Bounds(_))));
    }

    #[test]
    fn white_balance_gains() {
        let img = LinearRgbImage::filled(1, 1, [0.2, 0.4, 0.6]);
        let il = Illuminant::new(0.5, 1.0, 1.5).unwrap();
        let out = apply_white_balance(&img, &il).unwrap();
        assert!(close(out.pixel(0, 0), [0.4, 0.4, 0.4], 1e-12));

        let same = apply_white_balance(&img, &Illuminant::neutral()).unwrap();
        assert!(close(same.pixel(0, 0), img.pixel(0, 0), 1e-15));
    }

    #[test]
    fn grayworld_corrected_image_is_neutral() {
        let mut img = LinearRgbImage::zeros(5, 3);
        for i in 0..15 {
            let t = i as f64 / 15.0;
            img.planes[0][i] = 0.05 + 0.1 * t;
            img.planes[1][i] = 0.1 + 0.2 * (1.0 - t);
            img.planes[2][i] = 0.08 + 0.05 * t * t;
        }
        let il = estimate_illuminant_grayworld(&img).unwrap();
        let wb = apply_white_balance(&img, &il).unwrap();
        let again = estimate_illuminant_grayworld(&wb).unwrap();
        let c = 1.0 / 3f64.sqrt();
        assert!(close(again.rgb(), [c, c, c], 1e-6));
    }
}
