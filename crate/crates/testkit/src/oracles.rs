//! Nested-loop references.

use nisp_core::imaging::{BayerImage, ColorMatrix, EncodedImage, LinearRgbImage, XyzImage};

fn cfa_channel(pattern: &str, x: usize, y: usize) -> usize {
    let letter = pattern.as_bytes()[(y % 2) * 2 + x % 2];
    match letter {
        b'R' => 0,
        b'G' => 1,
        _ => 2,
    }
}

/// Bilinear demosaic: native sample kept, missing channels averaged over the
/// in-bounds 3x3 same-channel neighbors.
pub fn demosaic(img: &BayerImage) -> LinearRgbImage {
    let (w, h) = (img.width as i64, img.height as i64);
    let pattern = img.cfa.as_str();
    let mut out = LinearRgbImage::zeros(img.width, img.height);
    for y in 0..h {
        for x in 0..w {
            let native = cfa_channel(pattern, x as usize, y as usize);
            for c in 0..3 {
                let v = if c == native {
                    img.data[(y * w + x) as usize]
                } else {
                    let mut sum = 0.0;
                    let mut n = 0.0;
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            let (xx, yy) = (x + dx, y + dy);
                            if xx < 0 || yy < 0 || xx >= w || yy >= h {
                                continue;
                            }
                            if cfa_channel(pattern, xx as usize, yy as usize) == c {
                                sum += img.data[(yy * w + xx) as usize];
                                n += 1.0;
                            }
                        }
                    }
                    sum / n
                };
                out.planes[c][(y * w + x) as usize] = v;
            }
        }
    }
    out
}

/// Bilateral filter evaluated directly from the kernel definition.
pub fn bilateral(img: &LinearRgbImage, sigma_s: f64, sigma_r: f64) -> LinearRgbImage {
    let r = (3.0 * sigma_s).ceil() as i64;
    let (w, h) = (img.width as i64, img.height as i64);
    let mut out = LinearRgbImage::zeros(img.width, img.height);
    for c in 0..3 {
        let p = &img.planes[c];
        for y in 0..h {
            for x in 0..w {
                let center = p[(y * w + x) as usize];
                let (mut num, mut den) = (0.0, 0.0);
                for yy in (y - r).max(0)..=(y + r).min(h - 1) {
                    for xx in (x - r).max(0)..=(x + r).min(w - 1) {
                        let v = p[(yy * w + xx) as usize];
                        let d2 = ((xx - x).pow(2) + (yy - y).pow(2)) as f64;
                        let wgt = (-d2 / (2.0 * sigma_s * sigma_s)).exp()
                            * (-(v - center).powi(2) / (2.0 * sigma_r * sigma_r)).exp();
                        num += wgt * v;
                        den += wgt;
                    }
                }
                out.planes[c][(y * w + x) as usize] = (num / den).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Gaussian blur with radius `ceil(3 sigma)`, in-bounds normalization.
pub fn gaussian_blur(img: &LinearRgbImage, sigma_s: f64) -> LinearRgbImage {
    bilateral(img, sigma_s, f64::INFINITY)
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    let mut o = [0.0; 3];
    for r in 0..3 {
        for k in 0..3 {
            o[r] += m[r][k] * v[k];
        }
    }
    o
}

/// Per-pixel matrix product, negatives clipped to zero.
pub fn ccm(img: &LinearRgbImage, m: &ColorMatrix) -> XyzImage {
    let mut out = XyzImage::zeros(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            let v = mat_vec(m.rows(), img.pixel(x, y));
            out.set_pixel(x, y, v.map(|c| c.max(0.0)));
        }
    }
    out
}

/// D65 XYZ to linear sRGB, clipped to [0, 1].
pub fn xyz_to_srgb(img: &XyzImage) -> LinearRgbImage {
    let m = [
        [3.2404542, -1.5371385, -0.4985314],
        [-0.9692660, 1.8760108, 0.0415560],
        [0.0556434, -0.2040259, 1.0572252],
    ];
    let mut out = LinearRgbImage::zeros(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            out.set_pixel(x, y, mat_vec(&m, img.pixel(x, y)).map(|c| c.clamp(0.0, 1.0)));
        }
    }
    out
}

/// PSNR with peak 1 on 8-bit samples scaled by 1/255.
pub fn psnr(a: &EncodedImage, b: &EncodedImage) -> f64 {
    let mut sse = 0.0;
    let mut n = 0.0;
    for c in 0..3 {
        for y in 0..a.height {
            for x in 0..a.width {
                let i = y * a.width + x;
                let d = a.planes[c][i] as f64 / 255.0 - b.planes[c][i] as f64 / 255.0;
                sse += d * d;
                n += 1.0;
            }
        }
    }
    if sse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / (sse / n)).log10()
    }
}

/// Zero-padded cross-correlation, NCHW input and OIHW weights, in f64.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f32],
    (n, cin, h, w): (usize, usize, usize, usize),
    wt: &[f32],
    (cout, k): (usize, usize),
    bias: Option<&[f32]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = bias.map_or(0.0, |bb| bb[o] as f64);
                    for i in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                let xv = x[((b * cin + i) * h + iy as usize) * w + ix as usize] as f64;
                                let wv = wt[((o * cin + i) * k + ky) * k + kx] as f64;
                                s += xv * wv;
                            }
                        }
                    }
                    out[((b * cout + o) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    (out, ho, wo)
}

/// Mean absolute difference in f64.
pub fn l1(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / a.len() as f64
}
