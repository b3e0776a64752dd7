use super::types::LinearRgbImage;
use crate::error::{Error, Result};

/// Per-plane bilateral filter.
///
/// Spatial Gaussian truncated at radius `ceil(3 * sigma_spatial)`, Gaussian
/// range kernel on intensity differences, in-bounds neighbors only.
pub fn denoise_bilateral(
    img: &LinearRgbImage,
    sigma_spatial: f64,
    sigma_range: f64,
) -> Result<LinearRgbImage> {
    if !(sigma_spatial > 0.0 && sigma_spatial.is_finite()) {
        return Err(Error::Parameter(format!("sigma_spatial must be positive, got {sigma_spatial}")));
    }
    if !(sigma_range > 0.0) {
        return Err(Error::Parameter(format!("sigma_range must be positive, got {sigma_range}")));
    }
    let radius = (3.0 * sigma_spatial).ceil() as isize;
    let side = (2 * radius + 1) as usize;
    let inv_2ss = 1.0 / (2.0 * sigma_spatial * sigma_spatial);
    let inv_2sr = 1.0 / (2.0 * sigma_range * sigma_range);
    let mut spatial = vec![0.0; side * side];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            spatial[((dy + radius) as usize) * side + (dx + radius) as usize] =
                (-((dx * dx + dy * dy) as f64) * inv_2ss).exp();
        }
    }

    let (w, h) = (img.width as isize, img.height as isize);
    let mut out = LinearRgbImage::zeros(img.width, img.height);
    for (src, dst) in img.planes.iter().zip(out.planes.iter_mut()) {
        for y in 0..h {
            for x in 0..w {
                let center = src[(y * w + x) as usize];
                let mut num = 0.0;
                let mut den = 0.0;
                for dy in -radius..=radius {
                    let yy = y + dy;
                    if yy < 0 || yy >= h {
                        continue;
                    }
                    for dx in -radius..=radius {
                        let xx = x + dx;
                        if xx < 0 || xx >= w {
                            continue;
                        }
                        let v = src[(yy * w + xx) as usize];
                        let d = v - center;
                        let wgt = spatial[((dy + radius) as usize) * side + (dx + radius) as usize]
                            * (-d * d * inv_2sr).exp();
                        num += wgt * v;
                        den += wgt;
                    }
                }
                dst[(y * w + x) as usize] = (num / den).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_unchanged() {
        let img = LinearRgbImage::filled(7, 5, [0.3, 0.6, 0.9]);
        let out = denoise_bilateral(&img, 1.5, 0.1).unwrap();
        for (a, b) in img.planes.iter().flatten().zip(out.planes.iter().flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_sigmas() {
        let img = LinearRgbImage::filled(2, 2, [0.5; 3]);
        assert!(matches!(denoise_bilateral(&img, 0.0, 0.1), Err(Error::Parameter(_))));
        assert!(matches!(denoise_bilateral(&img, 1.0, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn huge_range_sigma_is_gaussian_blur() {
        let (w, h) = (9usize, 9usize);
        let mut img = LinearRgbImage::zeros(w, h);
        img.planes[1][4 * w + 4] = 1.0;
        let sigma = 1.0;
        let out = denoise_bilateral(&img, sigma, 1e6).unwrap();
        // Normalized Gaussian blur of the impulse, evaluated directly.
        let r = 3isize;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut den = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        if (0..h as isize).contains(&yy) && (0..w as isize).contains(&xx) {
                            den += (-((dx * dx + dy * dy) as f64) / 2.0).exp();
                        }
                    }
                }
                let (dx, dy) = (4 - x, 4 - y);
                let num = if dx.abs() <= r && dy.abs() <= r {
                    (-((dx * dx + dy * dy) as f64) / 2.0).exp()
                } else {
                    0.0
                };
                let got = out.planes[1][(y as usize) * w + x as usize];
                assert!((got - num / den).abs() < 1e-9, "({x},{y}) {got} vs {}", num / den);
            }
        }
    }
}
