mod common;

use common::{conv2d_naive, op_gradient_suite, rand_tensor, rng};
use medmoe::ndtensor::{Graph, Tensor};
use medmoe::Error;
use proptest::prelude::*;
use rand::Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let eye = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let m = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let p = g.matmul(eye, m).unwrap();
    assert_eq!(g.data(p), &[1.0, 2.0, 3.0, 4.0]);

    let d = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 2.0])).unwrap();
    let col = g.leaf(t(&[2, 1], &[3.0, 5.0])).unwrap();
    let p = g.matmul(d, col).unwrap();
    assert_eq!(g.data(p), &[3.0, 10.0]);

    let a = g.leaf(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.leaf(Tensor::zeros(&[2, 3])).unwrap();
    match g.matmul(a, b) {
        Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected ShapeMismatch, got {other:?}"),
    }
}

#[test]
fn conv2d_identity_and_constant_field() {
    let mut r = rng(1);
    let x = rand_tensor(&mut r, &[2, 1, 5, 6]);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone()).unwrap();
    let k = g.leaf(t(&[1, 1, 1, 1], &[1.0])).unwrap();
    let y = g.conv2d(xv, k, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), x.data());

    let c = 0.37;
    let xv = g.leaf(Tensor::full(&[1, 1, 6, 6], c)).unwrap();
    let k = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
    let y = g.conv2d(xv, k, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 4, 4]);
    for v in g.data(y) {
        assert!((v - 9.0 * c).abs() < 1e-12);
    }
}

#[test]
fn conv2d_matches_sliding_window_oracle_bit_exactly() {
    let mut r = rng(2);
    let x = rand_tensor(&mut r, &[1, 2, 5, 5]);
    let k = rand_tensor(&mut r, &[3, 2, 3, 3]);
    let mut g = Graph::new();
    let (xv, kv) = (g.leaf(x.clone()).unwrap(), g.leaf(k.clone()).unwrap());
    let y = g.conv2d(xv, kv, 1, 0).unwrap();
    assert_eq!(g.value(y), &conv2d_naive(&x, &k, 1, 0));

    for case in 0..30 {
        let b = r.gen_range(1..4);
        let c = r.gen_range(1..5);
        let o = r.gen_range(1..6);
        let kh = r.gen_range(1..4);
        let stride = r.gen_range(1..4);
        let pad = r.gen_range(0..3);
        let h = r.gen_range(kh.max(2)..9);
        let x = rand_tensor(&mut r, &[b, c, h, h + 1]);
        let k = rand_tensor(&mut r, &[o, c, kh, kh]);
        let mut g = Graph::new();
        let (xv, kv) = (g.leaf(x.clone()).unwrap(), g.leaf(k.clone()).unwrap());
        let y = g.conv2d(xv, kv, stride, pad).unwrap();
        assert_eq!(g.value(y), &conv2d_naive(&x, &k, stride, pad), "case {case}");
    }
}

#[test]
fn conv2d_rejects_bad_hyperparameters() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[1, 1, 4, 4])).unwrap();
    let k = g.leaf(Tensor::zeros(&[1, 1, 3, 3])).unwrap();
    assert!(matches!(g.conv2d(x, k, 0, 0), Err(Error::InvalidHyperparameter(_))));
    let big = g.leaf(Tensor::zeros(&[1, 1, 7, 7])).unwrap();
    assert!(matches!(g.conv2d(x, big, 1, 1), Err(Error::ShapeMismatch { .. })));
    let wrong_c = g.leaf(Tensor::zeros(&[1, 2, 3, 3])).unwrap();
    assert!(matches!(g.conv2d(x, wrong_c, 1, 0), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[3])).unwrap();
    let s = g.softmax(x, 0).unwrap();
    for v in g.data(s) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.leaf(t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()])).unwrap();
    let s = g.softmax(x, 0).unwrap();
    for (v, want) in g.data(s).iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((v - want).abs() < 1e-15);
    }
    assert!(matches!(g.softmax(x, 1), Err(Error::InvalidAxis { axis: 1, rank: 1 })));
}

#[test]
fn bilinear_examples() {
    let mut r = rng(3);
    let x = rand_tensor(&mut r, &[2, 3, 4, 5]);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone()).unwrap();
    let y = g.bilinear_resize(xv, 4, 5).unwrap();
    assert_eq!(g.value(y).data(), x.data());

    let c = g.leaf(Tensor::full(&[1, 2, 3, 7], -0.4)).unwrap();
    for &(h, w) in &[(1, 1), (6, 14), (2, 3), (9, 5)] {
        let y = g.bilinear_resize(c, h, w).unwrap();
        assert!(g.data(y).iter().all(|v| (v + 0.4).abs() < 1e-15));
    }

    let one = g.leaf(t(&[1, 1, 1, 1], &[2.5])).unwrap();
    let y = g.bilinear_resize(one, 2, 2).unwrap();
    assert_eq!(g.data(y), &[2.5; 4]);

    assert!(matches!(g.bilinear_resize(one, 0, 2), Err(Error::InvalidHyperparameter(_))));
}

#[test]
fn bilinear_half_pixel_downsample_averages_pairs() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 1, 1, 4], &[0.0, 1.0, 2.0, 3.0])).unwrap();
    let y = g.bilinear_resize(x, 1, 2).unwrap();
    assert_eq!(g.data(y), &[0.5, 2.5]);
}

#[test]
fn backward_closed_forms() {
    let mut r = rng(4);
    let a = rand_tensor(&mut r, &[3, 4]);
    let b = rand_tensor(&mut r, &[3, 4]);
    let mut g = Graph::new();
    let av = g.leaf(a.clone().with_requires_grad(true)).unwrap();
    let bv = g.leaf(b.clone()).unwrap();
    let p = g.mul(av, bv).unwrap();
    let loss = g.sum(p).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(av).unwrap(), b.data());
    assert!(g.grad(bv).is_none());

    // cross-entropy after softmax against a one-hot target
    let logits = rand_tensor(&mut r, &[1, 5]);
    let target = 2;
    let mut g = Graph::new();
    let lv = g.leaf(logits.clone().with_requires_grad(true)).unwrap();
    let p = g.softmax(lv, 1).unwrap();
    let logp = g.log(p).unwrap();
    let mut onehot = vec![0.0; 5];
    onehot[target] = -1.0;
    let oh = g.constant(&[1, 5], onehot).unwrap();
    let picked = g.mul(logp, oh).unwrap();
    let loss = g.sum(picked).unwrap();
    g.backward(loss).unwrap();
    let probs = g.data(p).to_vec();
    for (j, gj) in g.grad(lv).unwrap().iter().enumerate() {
        let want = probs[j] - if j == target { 1.0 } else { 0.0 };
        assert!((gj - want).abs() < 1e-12);
    }

    // fused op gives the same gradient
    let mut g2 = Graph::new();
    let lv2 = g2.leaf(logits.with_requires_grad(true)).unwrap();
    let loss2 = g2.softmax_cross_entropy(lv2, &[target], &[1.0], None).unwrap();
    assert!((g2.data(loss2)[0] - g.data(loss)[0]).abs() < 1e-12);
    g2.backward(loss2).unwrap();
    for (x, y) in g2.grad(lv2).unwrap().iter().zip(g.grad(lv).unwrap()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn backward_error_paths() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::full(&[2], 1.0).with_requires_grad(true)).unwrap();
    let s = g.scale(a, 2.0).unwrap();
    assert!(matches!(g.backward(s), Err(Error::NonScalarLoss(_))));
    let l = g.sum(s).unwrap();
    g.backward(l).unwrap();
    assert!(matches!(g.backward(l), Err(Error::GraphConsumed)));
}

#[test]
fn gradients_accumulate_across_consumers() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[1.5, -2.0]).with_requires_grad(true)).unwrap();
    let sq = g.mul(x, x).unwrap();
    let tw = g.scale(x, 3.0).unwrap();
    let s = g.add(sq, tw).unwrap();
    let l = g.sum(s).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0 * 1.5 + 3.0, 2.0 * -2.0 + 3.0]);
}

#[test]
fn non_finite_inputs_are_rejected() {
    let mut g = Graph::new();
    let bad = Tensor::new(vec![2], vec![0.0, f64::NAN]);
    assert!(matches!(bad, Err(Error::NonFiniteInput { .. })));
    let x = g.leaf(t(&[1], &[800.0])).unwrap();
    assert!(matches!(g.exp(x), Err(Error::NonFiniteOutput { op: "exp" })));
    let z = g.leaf(t(&[1], &[0.0])).unwrap();
    assert!(matches!(g.log(z), Err(Error::NonFiniteOutput { .. })));
}

#[test]
fn batch_norm_modes() {
    let mut r = rng(5);
    let gamma = Tensor::full(&[3], 1.3);
    let beta = Tensor::full(&[3], -0.2);
    let rm = t(&[3], &[0.1, -0.3, 0.5]);
    let rv = t(&[3], &[0.9, 1.2, 0.4]);

    // eval mode is a per-channel affine map independent of the batch
    let x = rand_tensor(&mut r, &[4, 3, 2, 2]);
    let y_full = {
        let mut g = Graph::new();
        let (xv, gv, bv) = (g.leaf(x.clone()).unwrap(), g.leaf(gamma.clone()).unwrap(), g.leaf(beta.clone()).unwrap());
        let (y, stats) = g.batch_norm2d(xv, gv, bv, &rm, &rv, false).unwrap();
        assert!(stats.is_none());
        g.value(y).clone()
    };
    let first = Tensor::new(vec![1, 3, 2, 2], x.data()[..12].to_vec()).unwrap();
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.leaf(first).unwrap(), g.leaf(gamma.clone()).unwrap(), g.leaf(beta.clone()).unwrap());
    let (y, _) = g.batch_norm2d(xv, gv, bv, &rm, &rv, false).unwrap();
    assert_eq!(g.data(y), &y_full.data()[..12]);
    let want = 1.3 * (x.data()[0] - 0.1) / (0.9f64 + 1e-5).sqrt() - 0.2;
    assert!((y_full.data()[0] - want).abs() < 1e-14);

    // training mode normalises and reports unbiased batch variance
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.leaf(x.clone()).unwrap(), g.leaf(Tensor::full(&[3], 1.0)).unwrap(), g.leaf(Tensor::zeros(&[3])).unwrap());
    let (y, stats) = g.batch_norm2d(xv, gv, bv, &rm, &rv, true).unwrap();
    let stats = stats.unwrap();
    let ch0: Vec<f64> = (0..4).flat_map(|b| x.data()[b * 12..b * 12 + 4].to_vec()).collect();
    let mu = ch0.iter().sum::<f64>() / 16.0;
    let var = ch0.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 15.0;
    assert!((stats.mean[0] - mu).abs() < 1e-14);
    assert!((stats.var[0] - var).abs() < 1e-14);
    let ych0: Vec<f64> = (0..4).flat_map(|b| g.data(y)[b * 12..b * 12 + 4].to_vec()).collect();
    assert!(ych0.iter().sum::<f64>().abs() < 1e-12);

    let mut m = rm.clone();
    let mut v = rv.clone();
    stats.fold_into(&mut m, &mut v);
    assert!((m.data()[0] - (0.9 * 0.1 + 0.1 * mu)).abs() < 1e-15);

    // a single value per channel cannot be normalised
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.leaf(Tensor::zeros(&[1, 3, 1, 1])).unwrap(), g.leaf(gamma).unwrap(), g.leaf(beta).unwrap());
    assert!(matches!(g.batch_norm2d(xv, gv, bv, &rm, &rv, true), Err(Error::DegenerateBatch)));
}

#[test]
fn concat_slice_gather_permute_shapes() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::from_fn(&[2, 2, 3], |i| i as f64).unwrap()).unwrap();
    let b = g.leaf(Tensor::from_fn(&[2, 1, 3], |i| 100.0 + i as f64).unwrap()).unwrap();
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.shape(c), &[2, 3, 3]);
    assert_eq!(&g.data(c)[6..9], &[100.0, 101.0, 102.0]);
    let s = g.slice(c, 1, 2, 1).unwrap();
    assert_eq!(g.data(s), g.data(b));
    let gth = g.gather(a, &[1, 1, 0]).unwrap();
    assert_eq!(g.shape(gth), &[3, 2, 3]);
    assert_eq!(g.data(gth)[0], 6.0);
    assert!(matches!(g.gather(a, &[2]), Err(Error::IndexOutOfRange { index: 2, len: 2 })));
    let p = g.permute(a, &[2, 0, 1]).unwrap();
    assert_eq!(g.shape(p), &[3, 2, 2]);
    assert_eq!(g.value(p).at(&[2, 1, 0]), g.value(a).at(&[1, 0, 2]));
    assert!(g.permute(a, &[0, 0, 1]).is_err());
}

/// Finite-difference agreement of every differentiable op over 5 seeds.
#[test]
fn every_op_passes_finite_differences() {
    for seed in 0..5u64 {
        for (name, err) in op_gradient_suite(seed) {
            assert!(err < 1e-4, "{name} seed {seed}: rel err {err}");
        }
    }
}

proptest! {
    #[test]
    fn softmax_slices_sum_to_one(vals in proptest::collection::vec(-15.0f64..15.0, 12), axis in 0usize..3, shift in -50.0f64..50.0) {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 3, 2], vals.clone()).unwrap()).unwrap();
        let s = g.softmax(x, axis).unwrap();
        let sums = g.sum_axis(s, axis).unwrap();
        for v in g.data(sums) {
            prop_assert!((v - 1.0).abs() < 1e-9);
        }
        prop_assert!(g.data(s).iter().all(|&p| p > 0.0 && p < 1.0));
        let shifted = g.add_scalar(x, shift).unwrap();
        let s2 = g.softmax(shifted, axis).unwrap();
        for (a, b) in g.data(s).iter().zip(g.data(s2)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mmt_roundtrip_is_f32_rounding(vals in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
        let n = vals.len();
        let t = Tensor::new(vec![n], vals).unwrap();
        let bytes = medmoe::ndtensor::mmt::to_bytes(&t);
        let (back, used) = medmoe::ndtensor::mmt::decode(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        let mut want = t.clone();
        want.round_to_f32();
        prop_assert_eq!(&back, &want);
        prop_assert_eq!(medmoe::ndtensor::mmt::to_bytes(&back), bytes);
    }
}
