//! Classical (non-learned) ISP stages and the image types they operate on.

mod color;
mod demosaic;
mod denoise;
mod histogram;
pub mod io;
mod tone;
mod types;
mod white_balance;

pub use color::{
    apply_ccm, grayscale, linear_srgb_to_xyz, quantize_u16, quantize_u8, srgb_decode, srgb_encode,
    srgb_encode_u16, srgb_eotf, srgb_oetf, xyz_to_linear_srgb, SRGB_KNEE,
};
pub use demosaic::{demosaic_bilinear, mosaic};
pub use denoise::denoise_bilateral;
pub use histogram::{bin_index, histogram_256, HIST_BINS};
pub use tone::{recolorize, tone_baseline_global, LUMA_EPS};
pub use types::{
    BayerImage, CameraMeta, CfaPattern, ColorMatrix, EncodedImage, GrayImage, HistogramVector,
    Illuminant, LinearRgbImage, PatchRect, XyzImage,
};
pub use white_balance::{
    apply_white_balance, estimate_illuminant_grayworld, estimate_illuminant_whitepatch,
};

/// Challenge-style baseline: demosaic, bilateral denoise, gray-world AWB, CCM,
/// global tone curve, XYZ to sRGB.
#[derive(Debug, Clone, Copy)]
pub struct BaselineParams {
    pub sigma_spatial: f64,
    pub sigma_range: f64,
    pub gamma: f64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        BaselineParams {
            sigma_spatial: 1.0,
            sigma_range: 0.05,
            gamma: 2.2,
        }
    }
}

pub fn render_baseline(raw: &BayerImage, params: &BaselineParams) -> error::Result<LinearRgbImage> {
    let rgb = demosaic_bilinear(raw)?;
    let rgb = denoise_bilateral(&rgb, params.sigma_spatial, params.sigma_range)?;
    let illum = estimate_illuminant_grayworld(&rgb)?;
    let balanced = apply_white_balance(&rgb, &illum)?;
    let xyz = apply_ccm(&balanced, &raw.meta.ccm);
    let toned = tone_baseline_global(&xyz, params.gamma)?;
    Ok(xyz_to_linear_srgb(&toned))
}

/// Version tag written into preview PNG metadata.
pub const PREVIEW_PIPELINE_VERSION: &str = "preview-v1: bilinear demosaic, gray-world WB, CCM, sRGB gamma";

/// The simple annotation preview ISP: demosaic, gray-world AWB, CCM, sRGB.
///
/// Returns the linear camera RGB alongside the display image; illuminants
/// for annotation are always computed on the linear image.
pub fn render_preview(raw: &BayerImage) -> error::Result<(LinearRgbImage, EncodedImage)> {
    let rgb = demosaic_bilinear(raw)?;
    let illum = estimate_illuminant_grayworld(&rgb)?;
    let display = render_with_illuminant(&rgb, &illum, &raw.meta.ccm)?;
    Ok((rgb, display))
}

/// White balances linear camera RGB with `illum`, then CCM and sRGB encoding.
pub fn render_with_illuminant(
    rgb: &LinearRgbImage,
    illum: &Illuminant,
    ccm: &ColorMatrix,
) -> error::Result<EncodedImage> {
    let balanced = apply_white_balance(rgb, illum)?;
    let xyz = apply_ccm(&balanced, ccm);
    Ok(srgb_encode(&xyz_to_linear_srgb(&xyz)))
}

use crate::error;
