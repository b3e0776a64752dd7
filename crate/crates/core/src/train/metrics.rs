use crate::cbunet::{CBUnet, LayerCost};
use crate::error::{Error, Result};
use crate::imaging::EncodedImage;

/// PSNR in dB on `[0, 1]`-scaled 8-bit samples; identical images give `+inf`.
pub fn psnr(a: &EncodedImage, b: &EncodedImage) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Shape(format!(
            "cannot compare {}x{} with {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let n = 3 * a.width * a.height;
    if n == 0 {
        return Err(Error::DegenerateInput("PSNR of empty images".into()));
    }
    let mut sse = 0.0f64;
    for (pa, pb) in a.planes.iter().zip(&b.planes) {
        for (&x, &y) in pa.iter().zip(pb) {
            let d = (x as f64 - y as f64) / 255.0;
            sse += d * d;
        }
    }
    Ok(psnr_from_mse(sse / n as f64))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Total scalar parameter count over both stages.
pub fn count_params(model: &CBUnet) -> u64 {
    (model.stage1.params.numel() + model.stage2.params.numel()) as u64
}

/// Per-layer FLOP and parameter table for a `width x height` input.
pub fn layer_table(model: &CBUnet, width: usize, height: usize) -> Result<Vec<LayerCost>> {
    model.config.check_dims(width, height)?;
    Ok(model.costs(width, height))
}

/// Analytic FLOPs of one forward pass through both stages.
pub fn count_flops(model: &CBUnet, width: usize, height: usize) -> Result<u64> {
    Ok(layer_table(model, width, height)?.iter().map(|r| r.flops).sum())
}

/// `(area-proportional, per-image constant)` FLOP split.
pub fn flop_split(model: &CBUnet, width: usize, height: usize) -> Result<(u64, u64)> {
    let rows = layer_table(model, width, height)?;
    let spatial = rows.iter().filter(|r| r.spatial).map(|r| r.flops).sum();
    let fixed = rows.iter().filter(|r| !r.spatial).map(|r| r.flops).sum();
    Ok((spatial, fixed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cbunet::CBUnetConfig;

    fn img(v: u8) -> EncodedImage {
        EncodedImage::new(2, 2, [vec![v; 4], vec![v; 4], vec![v; 4]]).unwrap()
    }

    #[test]
    fn psnr_examples() {
        assert_eq!(psnr(&img(10), &img(10)).unwrap(), f64::INFINITY);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        // a uniform 0.1 offset is not representable in 8 bits; 51/255 = 0.2 is
        let d = psnr(&img(0), &img(51)).unwrap();
        assert!((d - 10.0 * (1.0 / 0.04f64).log10()).abs() < 1e-9);
        assert!(psnr(&img(0), &EncodedImage::new(1, 1, [vec![0], vec![0], vec![0]]).unwrap()).is_err());
    }

    #[test]
    fn counts_follow_structure() {
        let m = CBUnet::new(CBUnetConfig::tiny(), 0).unwrap();
        let rows = layer_table(&m, 64, 64).unwrap();
        assert_eq!(rows.iter().map(|r| r.params).sum::<u64>(), count_params(&m));
        assert!(matches!(count_flops(&m, 30, 64), Err(Error::Dimension(_))));
    }
}
