//! Image containers shared by every pipeline stage.
//!
//! All floating-point images are planar `f64`. The network side converts to
//! `f32` tensors at its boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 2x2 color filter layout, named by the top-left row then the second row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CfaPattern {
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

impl CfaPattern {
    /// Channel index (0 = R, 1 = G, 2 = B) sampled at `(x, y)`.
    #[inline]
    pub fn channel_at(self, x: usize, y: usize) -> usize {
        let tile = match self {
            CfaPattern::Rggb => [0, 1, 1, 2],
            CfaPattern::Bggr => [2, 1, 1, 0],
            CfaPattern::Grbg => [1, 0, 2, 1],
            CfaPattern::Gbrg => [1, 2, 0, 1],
        };
        tile[((y & 1) << 1) | (x & 1)]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CfaPattern::Rggb => "RGGB",
            CfaPattern::Bggr => "BGGR",
            CfaPattern::Grbg => "GRBG",
            CfaPattern::Gbrg => "GBRG",
        }
    }
}

impl std::str::FromStr for CfaPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RGGB" => Ok(CfaPattern::Rggb),
            "BGGR" => Ok(CfaPattern::Bggr),
            "GRBG" => Ok(CfaPattern::Grbg),
            "GBRG" => Ok(CfaPattern::Gbrg),
            other => Err(Error::Format(format!("unknown CFA pattern {other:?}"))),
        }
    }
}

/// Row-major 3x3 matrix applied as `out = M * in` per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct ColorMatrix([[f64; 3]; 3]);

impl ColorMatrix {
    pub const IDENTITY: ColorMatrix =
        ColorMatrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// Linear sRGB (D65) to CIE-XYZ.
    pub const SRGB_TO_XYZ: ColorMatrix = ColorMatrix([
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]);

    /// CIE-XYZ to linear sRGB (D65).
    pub const XYZ_TO_SRGB: ColorMatrix = ColorMatrix([
        [3.2404542, -1.5371385, -0.4985314],
        [-0.9692660, 1.8760108, 0.0415560],
        [0.0556434, -0.2040259, 1.0572252],
    ]);

    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("color matrix has non-finite entries".into()));
        }
        let det = det3(&m);
        if det.abs() <= 1e-9 {
            return Err(Error::Parameter(format!(
                "color matrix is not invertible (det = {det:e})"
            )));
        }
        Ok(ColorMatrix(m))
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.0
    }

    pub fn determinant(&self) -> f64 {
        det3(&self.0)
    }

    pub fn inverse(&self) -> ColorMatrix {
        let m = &self.0;
        let d = det3(m);
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| {
            m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
        };
        ColorMatrix([
            [cof(1, 2, 1, 2) / d, -cof(0, 2, 1, 2) / d, cof(0, 1, 1, 2) / d],
            [-cof(1, 2, 0, 2) / d, cof(0, 2, 0, 2) / d, -cof(0, 1, 0, 2) / d],
            [cof(1, 2, 0, 1) / d, -cof(0, 2, 0, 1) / d, cof(0, 1, 0, 1) / d],
        ])
    }

    pub fn mul(&self, other: &ColorMatrix) -> ColorMatrix {
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[r][k] * other.0[k][c]).sum();
            }
        }
        ColorMatrix(out)
    }

    #[inline]
    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }
}

impl TryFrom<[[f64; 3]; 3]> for ColorMatrix {
    type Error = Error;
    fn try_from(m: [[f64; 3]; 3]) -> Result<Self> {
        ColorMatrix::new(m)
    }
}

impl From<ColorMatrix> for [[f64; 3]; 3] {
    fn from(m: ColorMatrix) -> Self {
        m.0
    }
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Sensor metadata carried in the `<name>.meta.json` sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraMeta {
    pub cfa: CfaPattern,
    pub black_level: u32,
    pub white_level: u32,
    /// Camera RGB to CIE-XYZ.
    pub ccm: ColorMatrix,
}

impl CameraMeta {
    pub fn validate(&self) -> Result<()> {
        if self.white_level <= self.black_level {
            return Err(Error::Parameter(format!(
                "white_level {} must exceed black_level {}",
                self.white_level, self.black_level
            )));
        }
        Ok(())
    }

    /// Maps a raw ADC sample into `[0, 1]`.
    #[inline]
    pub fn normalize(&self, raw: u16) -> f64 {
        let span = (self.white_level - self.black_level) as f64;
        ((raw as f64 - self.black_level as f64) / span).clamp(0.0, 1.0)
    }
}

/// Single-channel mosaic after black/white level normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BayerImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    pub cfa: CfaPattern,
    pub meta: CameraMeta,
}

impl BayerImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>, meta: CameraMeta) -> Result<Self> {
        if width == 0 || height == 0 || width % 2 != 0 || height % 2 != 0 {
            return Err(Error::Dimension(format!(
                "mosaic dimensions must be nonzero and even, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "mosaic has {} samples, expected {}",
                data.len(),
                width * height
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Parameter(format!("mosaic sample {v} outside [0, 1]")));
        }
        meta.validate()?;
        Ok(BayerImage {
            width,
            height,
            data,
            cfa: meta.cfa,
            meta,
        })
    }

    /// Normalizes raw ADC samples with the sidecar levels.
    pub fn from_raw(width: usize, height: usize, raw: &[u16], meta: CameraMeta) -> Result<Self> {
        meta.validate()?;
        let data = raw.iter().map(|&v| meta.normalize(v)).collect();
        BayerImage::new(width, height, data, meta)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

macro_rules! three_plane_image {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            pub width: usize,
            pub height: usize,
            pub planes: [Vec<f64>; 3],
        }

        impl $name {
            pub fn new(width: usize, height: usize, planes: [Vec<f64>; 3]) -> Result<Self> {
                let n = width * height;
                if planes.iter().any(|p| p.len() != n) {
                    return Err(Error::Dimension(format!(
                        "plane lengths must equal {width}x{height}"
                    )));
                }
                Ok(Self { width, height, planes })
            }

            pub fn zeros(width: usize, height: usize) -> Self {
                let n = width * height;
                Self { width, height, planes: [vec![0.0; n], vec![0.0; n], vec![0.0; n]] }
            }

            pub fn filled(width: usize, height: usize, value: [f64; 3]) -> Self {
                let n = width * height;
                Self {
                    width,
                    height,
                    planes: [vec![value[0]; n], vec![value[1]; n], vec![value[2]; n]],
                }
            }

            pub fn len(&self) -> usize {
                self.width * self.height
            }

            pub fn is_empty(&self) -> bool {
                self.len() == 0
            }

            #[inline]
            pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
                let i = y * self.width + x;
                [self.planes[0][i], self.planes[1][i], self.planes[2][i]]
            }

            #[inline]
            pub fn set_pixel(&mut self, x: usize, y: usize, v: [f64; 3]) {
                let i = y * self.width + x;
                self.planes[0][i] = v[0];
                self.planes[1][i] = v[1];
                self.planes[2][i] = v[2];
            }

            /// Multiplies every sample by `s`.
            pub fn scaled(&self, s: f64) -> Self {
                let planes = self.planes.clone().map(|p| p.into_iter().map(|v| v * s).collect());
                Self { width: self.width, height: self.height, planes }
            }

            pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
                if x0 + w > self.width || y0 + h > self.height {
                    return Err(Error::Bounds(format!(
                        "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
                        self.width, self.height
                    )));
                }
                let planes = self.planes.each_ref().map(|p| {
                    (y0..y0 + h)
                        .flat_map(|y| p[y * self.width + x0..y * self.width + x0 + w].iter().copied())
                        .collect()
                });
                Ok(Self { width: w, height: h, planes })
            }
        }
    };
}

three_plane_image!(
    /// Linear RGB, either camera-native or sRGB primaries depending on the stage.
    LinearRgbImage
);
three_plane_image!(
    /// Linear CIE-XYZ.
    XyzImage
);

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "gray image has {} samples, expected {}",
                data.len(),
                width * height
            )));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Bounds(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let data = (y0..y0 + h)
            .flat_map(|y| self.data[y * self.width + x0..y * self.width + x0 + w].iter().copied())
            .collect();
        Ok(GrayImage { width: w, height: h, data })
    }
}

/// Unit-norm RGB direction of the scene light.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Illuminant {
    r: f64,
    g: f64,
    b: f64,
}

impl Illuminant {
    /// Normalizes `(r, g, b)`; every component must be finite and positive.
    pub fn new(r: f64, g: f64, b: f64) -> Result<Self> {
        if ![r, g, b].iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::DegenerateInput(format!(
                "illuminant components must be positive, got ({r}, {g}, {b})"
            )));
        }
        let n = (r * r + g * g + b * b).sqrt();
        Ok(Illuminant {
            r: r / n,
            g: g / n,
            b: b / n,
        })
    }

    pub fn neutral() -> Self {
        let c = 1.0 / 3f64.sqrt();
        Illuminant { r: c, g: c, b: c }
    }

    pub fn rgb(&self) -> [f64; 3] {
        [self.r, self.g, self.b]
    }

    /// Green-anchored white balance gains `(g/r, 1, g/b)`.
    pub fn gains(&self) -> [f64; 3] {
        [self.g / self.r, 1.0, self.g / self.b]
    }

    /// Angle to `other` in degrees.
    pub fn angle_deg(&self, other: &Illuminant) -> f64 {
        let dot = (self.r * other.r + self.g * other.g + self.b * other.b).clamp(-1.0, 1.0);
        dot.acos().to_degrees()
    }
}

/// Hard 256-bin luminance histogram with unit mass.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramVector(pub [f64; 256]);

impl HistogramVector {
    pub fn bins(&self) -> &[f64; 256] {
        &self.0
    }
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl PatchRect {
    pub const MIN_SIDE: usize = 4;

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.w < Self::MIN_SIDE || self.h < Self::MIN_SIDE {
            return Err(Error::Bounds(format!(
                "patch {}x{} smaller than the {m}x{m} minimum",
                self.w,
                self.h,
                m = Self::MIN_SIDE
            )));
        }
        if self.x.saturating_add(self.w) > width || self.y.saturating_add(self.h) > height {
            return Err(Error::Bounds(format!(
                "patch {}x{}+{}+{} extends past the {width}x{height} image",
                self.w, self.h, self.x, self.y
            )));
        }
        Ok(())
    }
}

/// Display-referred 8-bit planar RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedImage {
    pub width: usize,
    pub height: usize,
    pub planes: [Vec<u8>; 3],
}

impl EncodedImage {
    pub fn new(width: usize, height: usize, planes: [Vec<u8>; 3]) -> Result<Self> {
        if planes.iter().any(|p| p.len() != width * height) {
            return Err(Error::Dimension(format!(
                "plane lengths must equal {width}x{height}"
            )));
        }
        Ok(EncodedImage { width, height, planes })
    }

    /// Interleaved RGB bytes, row-major.
    pub fn interleaved(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(n * 3);
        for i in 0..n {
            out.extend_from_slice(&[self.planes[0][i], self.planes[1][i], self.planes[2][i]]);
        }
        out
    }

    pub fn from_interleaved(width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "expected {} interleaved bytes, got {}",
                width * height * 3,
                rgb.len()
            )));
        }
        let mut planes = [
            Vec::with_capacity(width * height),
            Vec::with_capacity(width * height),
            Vec::with_capacity(width * height),
        ];
        for px in rgb.chunks_exact(3) {
            for c in 0..3 {
                planes[c].push(px[c]);
            }
        }
        Ok(EncodedImage { width, height, planes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cfa_tiles() {
        assert_eq!(CfaPattern::Rggb.channel_at(0, 0), 0);
        assert_eq!(CfaPattern::Rggb.channel_at(1, 0), 1);
        assert_eq!(CfaPattern::Rggb.channel_at(0, 1), 1);
        assert_eq!(CfaPattern::Rggb.channel_at(1, 1), 2);
        assert_eq!(CfaPattern::Grbg.channel_at(1, 0), 0);
        assert_eq!(CfaPattern::Gbrg.channel_at(0, 1), 0);
        assert_eq!(CfaPattern::Bggr.channel_at(1, 1), 0);
        for p in [CfaPattern::Rggb, CfaPattern::Bggr, CfaPattern::Grbg, CfaPattern::Gbrg] {
            assert_eq!(p.as_str().parse::<CfaPattern>().unwrap(), p);
        }
    }

    #[test]
    fn matrix_inverse_roundtrip() {
        let m = ColorMatrix::XYZ_TO_SRGB.mul(&ColorMatrix::XYZ_TO_SRGB.inverse());
        for r in 0..3 {
            for c in 0..3 {
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((m.rows()[r][c] - want).abs() < 1e-12);
            }
        }
        assert!(ColorMatrix::new([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]]).is_err());
    }

    #[test]
    fn odd_mosaic_rejected() {
        let meta = CameraMeta {
            cfa: CfaPattern::Rggb,
            black_level: 0,
            white_level: 1023,
            ccm: ColorMatrix::IDENTITY,
        };
        assert!(matches!(
            BayerImage::new(3, 2, vec![0.0; 6], meta.clone()),
            Err(Error::Dimension(_))
        ));
        assert!(BayerImage::new(2, 2, vec![0.0; 4], meta).is_ok());
    }

    #[test]
    fn raw_normalization_clips() {
        let meta = CameraMeta {
            cfa: CfaPattern::Rggb,
            black_level: 100,
            white_level: 1100,
            ccm: ColorMatrix::IDENTITY,
        };
        assert_eq!(meta.normalize(50), 0.0);
        assert_eq!(meta.normalize(600), 0.5);
        assert_eq!(meta.normalize(4000), 1.0);
    }

    #[test]
    fn illuminant_is_unit_norm() {
        let il = Illuminant::new(0.2, 0.4, 0.4).unwrap();
        let [r, g, b] = il.rgb();
        assert!((r * r + g * g + b * b - 1.0).abs() < 1e-12);
        assert!((r - 1.0 / 3.0).abs() < 1e-12);
        assert!(Illuminant::new(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn patch_rect_bounds() {
        let r = PatchRect { x: 4, y: 4, w: 4, h: 4 };
        assert!(r.validate(8, 8).is_ok());
        assert!(r.validate(7, 8).is_err());
        assert!(PatchRect { x: 0, y: 0, w: 3, h: 8 }.validate(8, 8).is_err());
    }
}
