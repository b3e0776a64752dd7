use super::types::{BayerImage, LinearRgbImage};
use crate::error::{Error, Result};

/// Bilinear demosaic over the 3x3 neighborhood.
///
/// The native sample is kept as-is; each missing channel is the mean of the
/// in-bounds same-channel samples in the window. No border padding.
pub fn demosaic_bilinear(img: &BayerImage) -> Result<LinearRgbImage> {
    let (w, h) = (img.width, img.height);
    if w % 2 != 0 || h % 2 != 0 || w == 0 || h == 0 {
        return Err(Error::Dimension(format!(
            "mosaic dimensions must be nonzero and even, got {w}x{h}"
        )));
    }
    let mut out = LinearRgbImage::zeros(w, h);
    for y in 0..h {
        let y_lo = y.saturating_sub(1);
        let y_hi = (y + 1).min(h - 1);
        for x in 0..w {
            let x_lo = x.saturating_sub(1);
            let x_hi = (x + 1).min(w - 1);
            let mut sum = [0.0f64; 3];
            let mut count = [0u32; 3];
            for yy in y_lo..=y_hi {
                for xx in x_lo..=x_hi {
                    let c = img.cfa.channel_at(xx, yy);
                    sum[c] += img.get(xx, yy);
                    count[c] += 1;
                }
            }
            let native = img.cfa.channel_at(x, y);
            let i = y * w + x;
            for c in 0..3 {
                out.planes[c][i] = if c == native {
                    img.get(x, y)
                } else {
                    sum[c] / count[c] as f64
                };
            }
        }
    }
    Ok(out)
}

/// Inverse of demosaicing for synthetic data: keeps only the CFA sample per pixel.
pub fn mosaic(img: &LinearRgbImage, cfa: super::CfaPattern) -> Vec<f64> {
    let mut out = Vec::with_capacity(img.len());
    for y in 0..img.height {
        for x in 0..img.width {
            out.push(img.planes[cfa.channel_at(x, y)][y * img.width + x]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{CameraMeta, CfaPattern, ColorMatrix};

    fn meta(cfa: CfaPattern) -> CameraMeta {
        CameraMeta { cfa, black_level: 0, white_level: 65535, ccm: ColorMatrix::IDENTITY }
    }

    #[test]
    fn constant_mosaic_is_fixed_point() {
        for cfa in [CfaPattern::Rggb, CfaPattern::Bggr, CfaPattern::Grbg, CfaPattern::Gbrg] {
            let img = BayerImage::new(6, 4, vec![0.5; 24], meta(cfa)).unwrap();
            let rgb = demosaic_bilinear(&img).unwrap();
            assert!(rgb.planes.iter().flatten().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn red_sites_only() {
        // RGGB: R at even x, even y.
        let data: Vec<f64> = (0..16)
            .map(|i| if (i % 4) % 2 == 0 && (i / 4) % 2 == 0 { 1.0 } else { 0.0 })
            .collect();
        let img = BayerImage::new(4, 4, data, meta(CfaPattern::Rggb)).unwrap();
        let rgb = demosaic_bilinear(&img).unwrap();
        // Green site (1, 0): R neighbors (0, 0) and (2, 0), both 1.
        assert_eq!(rgb.pixel(1, 0)[0], 1.0);
        // Green site (3, 0): only in-bounds R neighbor is (2, 0).
        assert_eq!(rgb.pixel(3, 0)[0], 1.0);
        // Blue site (1, 1): four diagonal R neighbors.
        assert_eq!(rgb.pixel(1, 1)[0], 1.0);
        // Green site (0, 1): R neighbors above and below.
        assert_eq!(rgb.pixel(0, 1)[0], 1.0);
        assert!(rgb.planes[1].iter().all(|&v| v == 0.0));
        assert!(rgb.planes[2].iter().all(|&v| v == 0.0));
        // Native red preserved.
        assert_eq!(rgb.pixel(2, 2)[0], 1.0);
    }

    #[test]
    fn mosaic_then_demosaic_keeps_native_samples() {
        let rgb = LinearRgbImage::new(
            4,
            2,
            [
                (0..8).map(|i| i as f64 / 10.0).collect(),
                (0..8).map(|i| i as f64 / 20.0).collect(),
                (0..8).map(|i| i as f64 / 30.0).collect(),
            ],
        )
        .unwrap();
        let m = mosaic(&rgb, CfaPattern::Gbrg);
        let img = BayerImage::new(4, 2, m.clone(), meta(CfaPattern::Gbrg)).unwrap();
        let out = demosaic_bilinear(&img).unwrap();
        for y in 0..2 {
            for x in 0..4 {
                let c = CfaPattern::Gbrg.channel_at(x, y);
                assert_eq!(out.pixel(x, y)[c], m[y * 4 + x]);
            }
        }
    }
}
