use std::time::Instant;

use nisp_core::cbunet::{render, render_with, CBUnet, CBUnetConfig, IdentityBrightness, NeutralColor};
use nisp_core::imaging::{
    apply_ccm, demosaic_bilinear, srgb_encode, xyz_to_linear_srgb, BayerImage, CameraMeta, CfaPattern, ColorMatrix,
};
use nisp_testkit::gen;

fn mosaic(rng: &mut impl rand::Rng, w: usize, h: usize) -> BayerImage {
    let data = nisp_testkit::uniform(rng, w * h, 0.0, 0.8);
    let meta = CameraMeta { cfa: CfaPattern::Grbg, black_level: 0, white_level: 1023, ccm: ColorMatrix::SRGB_TO_XYZ };
    BayerImage::new(w, h, data, meta).unwrap()
}

#[test]
fn identity_stages_equal_classical_pipeline() {
    let mut rng = nisp_testkit::rng(1);
    for _ in 0..5 {
        let mut raw = gen::bayer(&mut rng, 24);
        raw.meta.ccm = gen::color_matrix(&mut rng);
        let out = render_with(&raw, &NeutralColor, &IdentityBrightness).unwrap();
        let classical = srgb_encode(&xyz_to_linear_srgb(&apply_ccm(&demosaic_bilinear(&raw).unwrap(), &raw.meta.ccm)));
        for c in 0..3 {
            for (a, b) in out.image.planes[c].iter().zip(&classical.planes[c]) {
                assert!((*a as i32 - *b as i32).abs() <= 1, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn render_is_deterministic_and_presets_agree_on_shape() {
    let mut rng = nisp_testkit::rng(2);
    let raw = mosaic(&mut rng, 38, 22);
    let tiny = CBUnet::new(CBUnetConfig::tiny(), 0).unwrap();
    let full = CBUnet::new(CBUnetConfig::full(), 0).unwrap();
    let a = render(&raw, &tiny).unwrap();
    let b = render(&raw, &tiny).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.intermediate16, b.intermediate16);
    let f = render(&raw, &full).unwrap();
    assert_eq!((a.image.width, a.image.height), (38, 22));
    assert_eq!((f.image.width, f.image.height), (38, 22));
    assert_eq!(a.intermediate16.len(), 3 * 38 * 22);
}

#[test]
fn tiny_render_of_256_square_is_fast() {
    let mut rng = nisp_testkit::rng(3);
    let raw = mosaic(&mut rng, 256, 256);
    let model = CBUnet::new(CBUnetConfig::tiny(), 0).unwrap();
    let start = Instant::now();
    render(&raw, &model).unwrap();
    let secs = start.elapsed().as_secs_f64();
    println!("256x256 tiny render {secs:.3} s");
    assert!(secs < 10.0);
}
