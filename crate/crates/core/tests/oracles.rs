use nisp_core::imaging::{denoise_bilateral, xyz_to_linear_srgb, LinearRgbImage};
use nisp_core::nn::{Tape, Tensor};
use nisp_testkit::{criteria, gen, oracles};
use rand::Rng;

#[test]
fn classical_stages_match_nested_loops() {
    for o in criteria::oracle_equivalence(3, 100) {
        println!("{}", o.line());
        assert!(o.pass, "{}", o.line());
    }
}

#[test]
fn impulse_with_huge_range_sigma_is_gaussian_blur() {
    let mut img = LinearRgbImage::zeros(9, 9);
    img.set_pixel(4, 4, [1.0, 0.5, 0.25]);
    let ours = denoise_bilateral(&img, 1.2, 1e9).unwrap();
    let blur = oracles::gaussian_blur(&img, 1.2);
    for c in 0..3 {
        for (a, b) in ours.planes[c].iter().zip(&blur.planes[c]) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn xyz_to_srgb_matches_loop() {
    let mut rng = nisp_testkit::rng(5);
    for _ in 0..20 {
        let img = gen::xyz(&mut rng, 5, 3);
        let (a, b) = (xyz_to_linear_srgb(&img), oracles::xyz_to_srgb(&img));
        for c in 0..3 {
            for (x, y) in a.planes[c].iter().zip(&b.planes[c]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv_forward_matches_loop() {
    let mut rng = nisp_testkit::rng(9);
    for (n, cin, h, w, cout, stride, pad) in [(1, 1, 4, 4, 1, 1, 1), (2, 3, 5, 6, 4, 1, 1), (2, 2, 6, 6, 3, 2, 1), (1, 2, 5, 5, 2, 1, 0)] {
        let x: Vec<f32> = (0..n * cin * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let wt: Vec<f32> = (0..cout * cin * 9).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let b: Vec<f32> = (0..cout).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let tape = Tape::new();
        let xv = tape.constant(Tensor::new([n, cin, h, w], x.clone()).unwrap());
        let wv = tape.constant(Tensor::new([cout, cin, 3, 3], wt.clone()).unwrap());
        let bv = tape.constant(Tensor::new([cout], b.clone()).unwrap());
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let (want, ho, wo) = oracles::conv2d(&x, (n, cin, h, w), &wt, (cout, 3), Some(&b), stride, pad);
        assert_eq!(tape.value(y).shape(), &[n, cout, ho, wo]);
        for (a, e) in tape.value(y).data().iter().zip(&want) {
            assert!((*a as f64 - e).abs() < 1e-6, "{a} vs {e}");
        }
    }
}

#[test]
fn l1_matches_loop() {
    let mut rng = nisp_testkit::rng(10);
    let a: Vec<f32> = (0..96).map(|_| rng.random_range(0.0f32..1.0)).collect();
    let b: Vec<f32> = (0..96).map(|_| rng.random_range(0.0f32..1.0)).collect();
    let tape = Tape::new();
    let av = tape.constant(Tensor::new([2, 3, 4, 4], a.clone()).unwrap());
    let bv = tape.constant(Tensor::new([2, 3, 4, 4], b.clone()).unwrap());
    let got = tape.value(tape.l1_loss(av, bv).unwrap()).item() as f64;
    assert!((got - oracles::l1(&a, &b)).abs() < 1e-7);
}
