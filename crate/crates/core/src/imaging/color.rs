//! Color-space stages: CCM, XYZ to display RGB, luminance and the sRGB transfer.

use super::types::{ColorMatrix, EncodedImage, GrayImage, LinearRgbImage, XyzImage};

/// Per-pixel `ccm * rgb`, negatives clipped to zero.
pub fn apply_ccm(img: &LinearRgbImage, ccm: &ColorMatrix) -> XyzImage {
    let mut out = XyzImage::zeros(img.width, img.height);
    let m = ccm.rows();
    for i in 0..img.len() {
        let v = [img.planes[0][i], img.planes[1][i], img.planes[2][i]];
        for (r, row) in m.iter().enumerate() {
            out.planes[r][i] = (row[0] * v[0] + row[1] * v[1] + row[2] * v[2]).max(0.0);
        }
    }
    out
}

/// D65 XYZ to linear sRGB, clipped to `[0, 1]`.
pub fn xyz_to_linear_srgb(img: &XyzImage) -> LinearRgbImage {
    let mut out = LinearRgbImage::zeros(img.width, img.height);
    let m = ColorMatrix::XYZ_TO_SRGB;
    for i in 0..img.len() {
        let v = [img.planes[0][i], img.planes[1][i], img.planes[2][i]];
        for (r, row) in m.rows().iter().enumerate() {
            out.planes[r][i] = (row[0] * v[0] + row[1] * v[1] + row[2] * v[2]).clamp(0.0, 1.0);
        }
    }
    out
}

/// Linear sRGB to XYZ (no clipping).
pub fn linear_srgb_to_xyz(img: &LinearRgbImage) -> XyzImage {
    let mut out = XyzImage::zeros(img.width, img.height);
    let m = ColorMatrix::SRGB_TO_XYZ;
    for i in 0..img.len() {
        let v = m.apply([img.planes[0][i], img.planes[1][i], img.planes[2][i]]);
        for c in 0..3 {
            out.planes[c][i] = v[c];
        }
    }
    out
}

/// Grayscale is the luminance (Y) plane.
pub fn grayscale(img: &XyzImage) -> GrayImage {
    GrayImage {
        width: img.width,
        height: img.height,
        data: img.planes[1].clone(),
    }
}

pub const SRGB_KNEE: f64 = 0.0031308;

#[inline]
pub fn srgb_oetf(v: f64) -> f64 {
    if v <= SRGB_KNEE {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

#[inline]
pub fn srgb_eotf(e: f64) -> f64 {
    if e <= 0.04045 {
        e / 12.92
    } else {
        ((e + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
pub fn quantize_u8(e: f64) -> u8 {
    (e.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

#[inline]
pub fn quantize_u16(e: f64) -> u16 {
    (e.clamp(0.0, 1.0) * 65535.0 + 0.5).floor() as u16
}

/// sRGB transfer then round-half-up to 8 bits.
pub fn srgb_encode(img: &LinearRgbImage) -> EncodedImage {
    EncodedImage {
        width: img.width,
        height: img.height,
        planes: img
            .planes
            .each_ref()
            .map(|p| p.iter().map(|&v| quantize_u8(srgb_oetf(v.clamp(0.0, 1.0)))).collect()),
    }
}

/// sRGB transfer quantized to 16 bits, interleaved row-major.
pub fn srgb_encode_u16(img: &LinearRgbImage) -> Vec<u16> {
    let mut out = Vec::with_capacity(img.len() * 3);
    for i in 0..img.len() {
        for c in 0..3 {
            out.push(quantize_u16(srgb_oetf(img.planes[c][i].clamp(0.0, 1.0))));
        }
    }
    out
}

/// Inverse of [`srgb_encode`] up to quantization.
pub fn srgb_decode(img: &EncodedImage) -> LinearRgbImage {
    LinearRgbImage {
        width: img.width,
        height: img.height,
        planes: img
            .planes
            .each_ref()
            .map(|p| p.iter().map(|&b| srgb_eotf(b as f64 / 255.0)).collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ccm_identity_and_white() {
        let img = LinearRgbImage::filled(2, 2, [0.1, 0.5, 0.9]);
        let out = apply_ccm(&img, &ColorMatrix::IDENTITY);
        assert_eq!(out.planes, img.planes);

        let m = ColorMatrix::new([[0.5, 0.25, 0.25], [0.1, 0.8, 0.1], [-0.2, 0.2, 1.0]]).unwrap();
        let white = LinearRgbImage::filled(1, 1, [1.0; 3]);
        let out = apply_ccm(&white, &m);
        for c in 0..3 {
            assert!((out.planes[c][0] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn ccm_clips_negatives() {
        let m = ColorMatrix::new([[1.0, -2.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let out = apply_ccm(&LinearRgbImage::filled(1, 1, [0.1, 0.5, 0.2]), &m);
        assert_eq!(out.planes[0][0], 0.0);
    }

    #[test]
    fn d65_white_maps_to_one() {
        let xyz = XyzImage::filled(1, 1, [0.9505, 1.0, 1.0890]);
        let rgb = xyz_to_linear_srgb(&xyz);
        for c in 0..3 {
            assert!((rgb.planes[c][0] - 1.0).abs() < 1e-3, "{:?}", rgb.pixel(0, 0));
        }
        let zero = xyz_to_linear_srgb(&XyzImage::zeros(3, 3));
        assert!(zero.planes.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn grayscale_is_y() {
        let xyz = XyzImage::filled(1, 1, [0.3, 0.5, 0.2]);
        assert_eq!(grayscale(&xyz).data, vec![0.5]);
        let s = 1.7;
        let scaled = grayscale(&xyz.scaled(s));
        assert_eq!(scaled.data[0], 0.5 * s);
    }

    #[test]
    fn srgb_endpoints_and_knee() {
        let img = LinearRgbImage::new(3, 1, [vec![0.0, 1.0, SRGB_KNEE], vec![0.0; 3], vec![0.0; 3]])
            .unwrap();
        let enc = srgb_encode(&img);
        assert_eq!(enc.planes[0], vec![0, 255, 10]);
    }

    #[test]
    fn srgb_roundtrip_grid() {
        let vals: Vec<f64> = (0..1024).map(|i| i as f64 / 1023.0).collect();
        let img = LinearRgbImage::new(1024, 1, [vals.clone(), vals.clone(), vals.clone()]).unwrap();
        let back = srgb_decode(&srgb_encode(&img));
        // measured in the encoded domain; linear error near white exceeds one code step
        for (v, b) in vals.iter().zip(&back.planes[0]) {
            assert!((srgb_oetf(*v) - srgb_oetf(*b)).abs() <= 1.0 / 255.0, "{v} -> {b}");
        }
    }
}
