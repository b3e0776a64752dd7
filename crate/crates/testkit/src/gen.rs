//! Seeded random inputs.

use nisp_core::imaging::io::{write_meta, write_pgm, RawFrame};
use nisp_core::imaging::{
    BayerImage, CameraMeta, CfaPattern, ColorMatrix, EncodedImage, LinearRgbImage, PatchRect, XyzImage,
};
use rand::Rng;

pub const CFAS: [CfaPattern; 4] = [CfaPattern::Rggb, CfaPattern::Bggr, CfaPattern::Grbg, CfaPattern::Gbrg];

/// Invertible matrix with entries in [-0.5, 1.5].
pub fn color_matrix(rng: &mut impl Rng) -> ColorMatrix {
    loop {
        let m: [[f64; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-0.5..1.5)));
        if let Ok(cm) = ColorMatrix::new(m) {
            if cm.determinant().abs() > 1e-3 {
                return cm;
            }
        }
    }
}

pub fn meta(rng: &mut impl Rng) -> CameraMeta {
    CameraMeta {
        cfa: CFAS[rng.random_range(0..4)],
        black_level: 0,
        white_level: 65535,
        ccm: color_matrix(rng),
    }
}

/// Mosaic with even dims in `[2, max]`.
pub fn bayer(rng: &mut impl Rng, max: usize) -> BayerImage {
    let w = 2 * rng.random_range(1..=max / 2);
    let h = 2 * rng.random_range(1..=max / 2);
    let data = crate::uniform(rng, w * h, 0.0, 1.0);
    BayerImage::new(w, h, data, meta(rng)).expect("valid mosaic")
}

pub fn rgb(rng: &mut impl Rng, w: usize, h: usize) -> LinearRgbImage {
    let planes = std::array::from_fn(|_| crate::uniform(rng, w * h, 0.0, 1.0));
    LinearRgbImage::new(w, h, planes).expect("plane sizes")
}

pub fn xyz(rng: &mut impl Rng, w: usize, h: usize) -> XyzImage {
    let planes = std::array::from_fn(|_| crate::uniform(rng, w * h, 0.0, 1.0));
    XyzImage::new(w, h, planes).expect("plane sizes")
}

pub fn encoded(rng: &mut impl Rng, w: usize, h: usize) -> EncodedImage {
    let planes = std::array::from_fn(|_| (0..w * h).map(|_| rng.random::<u8>()).collect());
    EncodedImage::new(w, h, planes).expect("plane sizes")
}

/// 32x24 RGGB mosaic (black 0, white 1000, camera RGB = linear sRGB) whose
/// demosaiced pixels are exactly (0.1, 0.2, 0.2) inside the returned rect and
/// (0.5, 0.3, 0.1) away from it.
pub fn known_patch_frame() -> (RawFrame, CameraMeta, PatchRect) {
    let (w, h) = (32, 24);
    let meta = CameraMeta { cfa: CfaPattern::Rggb, black_level: 0, white_level: 1000, ccm: ColorMatrix::SRGB_TO_XYZ };
    let mut samples = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let inside = (8..24).contains(&x) && (8..16).contains(&y);
            let rgb: [u16; 3] = if inside { [100, 200, 200] } else { [500, 300, 100] };
            samples.push(rgb[meta.cfa.channel_at(x, y)]);
        }
    }
    // one pixel of margin so no demosaic neighborhood crosses the color edge
    let rect = PatchRect { x: 9, y: 9, w: 14, h: 6 };
    (RawFrame { width: w, height: h, maxval: 1000, samples }, meta, rect)
}

/// Writes [`known_patch_frame`] as `raw/<id>.pgm` + sidecar under `root`.
pub fn write_known_patch(root: &std::path::Path, id: &str) -> PatchRect {
    let (frame, meta, rect) = known_patch_frame();
    std::fs::create_dir_all(root.join("raw")).unwrap();
    write_pgm(&root.join("raw").join(format!("{id}.pgm")), &frame).unwrap();
    write_meta(&root.join("raw").join(format!("{id}.meta.json")), &meta).unwrap();
    rect
}
