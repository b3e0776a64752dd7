use nisp_core::nn::{total_loss, Tape, Tensor};
use nisp_testkit::criteria;
use rand::Rng;

#[test]
fn loss_analytics() {
    for o in criteria::loss_analytics(4) {
        println!("{}", o.line());
        assert!(o.pass, "{}", o.line());
    }
}

#[test]
fn gradient_of_sum_is_sum_of_gradients() {
    let mut rng = nisp_testkit::rng(21);
    let mut r = |n: usize, lo: f32, hi: f32| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f32>>();
    let (ill, gt, a, b) = (r(6, 0.1, 1.0), r(6, 0.1, 1.0), r(32, 0.05, 0.95), r(32, 0.05, 0.95));

    let grads = |which: &[usize]| {
        let tape = Tape::new();
        let iv = tape.param(Tensor::new([2, 3], ill.clone()).unwrap());
        let gv = tape.constant(Tensor::new([2, 3], gt.clone()).unwrap());
        let av = tape.param(Tensor::new([2, 1, 4, 4], a.clone()).unwrap());
        let bv = tape.constant(Tensor::new([2, 1, 4, 4], b.clone()).unwrap());
        let all = [
            tape.angular_loss(iv, gv).unwrap(),
            tape.l1_loss(av, bv).unwrap(),
            tape.hist_loss(av, bv).unwrap(),
        ];
        let parts: Vec<_> = which.iter().map(|&i| all[i]).collect();
        let g = tape.backward(total_loss(&tape, &parts).unwrap()).unwrap();
        let gi = g.get(iv).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; 6]);
        let ga = g.get(av).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; 32]);
        (gi, ga)
    };
    let (ti, ta) = grads(&[0, 1, 2]);
    let terms: Vec<_> = (0..3).map(|i| grads(&[i])).collect();
    for (k, v) in ti.iter().enumerate() {
        let s: f32 = terms.iter().map(|t| t.0[k]).sum();
        assert!((v - s).abs() <= 1e-6 * v.abs().max(1.0), "illum {k}: {v} vs {s}");
    }
    for (k, v) in ta.iter().enumerate() {
        let s: f32 = terms.iter().map(|t| t.1[k]).sum();
        assert!((v - s).abs() <= 1e-6 * v.abs().max(1.0), "pixel {k}: {v} vs {s}");
    }
}

fn attention(x: &Tensor, fc2_b: f32) -> Vec<f32> {
    let tape = Tape::new();
    let (_, c, _, _) = x.dims4().unwrap();
    let r = (c / 4).max(1);
    let xv = tape.constant(x.clone());
    let w1 = tape.constant(Tensor::filled([r, c], 0.3));
    let b1 = tape.constant(Tensor::zeros([r]));
    let w2 = tape.constant(Tensor::zeros([c, r]));
    let b2 = tape.constant(Tensor::filled([c], fc2_b));
    let g = tape.global_avg_pool(xv).unwrap();
    let h = tape.relu(tape.linear(g, w1, Some(b1)).unwrap());
    let s = tape.sigmoid(tape.linear(h, w2, Some(b2)).unwrap());
    let out = tape.scale_channels(xv, s).unwrap();
    let v = tape.value(out).data().to_vec();
    v
}

#[test]
fn channel_attention_limits() {
    let mut rng = nisp_testkit::rng(2);
    let data: Vec<f32> = (0..2 * 8 * 16).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let x = Tensor::new([2, 8, 4, 4], data.clone()).unwrap();
    for (o, v) in attention(&x, 0.0).iter().zip(&data) {
        assert_eq!(*o, 0.5 * v);
    }
    for (o, v) in attention(&x, 100.0).iter().zip(&data) {
        assert!((o - v).abs() < 1e-6);
    }
}
