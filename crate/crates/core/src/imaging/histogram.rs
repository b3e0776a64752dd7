use super::types::{GrayImage, HistogramVector};
use crate::error::{Error, Result};

pub const HIST_BINS: usize = 256;

/// Bin index for `v` after clipping to `[0, 1]`; 1.0 lands in the last bin.
#[inline]
pub fn bin_index(v: f64) -> usize {
    let v = v.clamp(0.0, 1.0);
    ((v * HIST_BINS as f64).floor() as usize).min(HIST_BINS - 1)
}

/// Hard 256-bin histogram normalized to unit mass.
pub fn histogram_256(img: &GrayImage) -> Result<HistogramVector> {
    if img.is_empty() {
        return Err(Error::DegenerateInput("histogram of an empty image".into()));
    }
    let mut counts = [0u64; HIST_BINS];
    for &v in &img.data {
        counts[bin_index(v)] += 1;
    }
    let n = img.len() as f64;
    Ok(HistogramVector(counts.map(|c| c as f64 / n)))
}
