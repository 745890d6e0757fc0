mod common;

use common::*;
use layerprobe::{Tape, Tensor};
use proptest::prelude::*;

const TOL: f64 = 1e-4;

#[test]
fn every_layer_type_matches_finite_differences() {
    for (name, r) in layer_checks(30) {
        println!("{name}: {r:?}");
        assert!(r.max_rel_err < TOL, "{name}: max relative error {}", r.max_rel_err);
    }
}

#[test]
fn maxpool_gradient_goes_only_to_argmax() {
    let x = Tensor::new(vec![1, 1, 2, 4], vec![0.1, 0.9, -0.3, 0.2, 0.5, 0.4, 0.8, 0.7]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(x, true);
    let y = tape.max_pool2d(xv, 2, 2).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(xv).unwrap(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let mut g = rng(21);
    let logits = uniform(&[4, 5], -3.0, 3.0, &mut g);
    let labels = [2usize, 0, 4, 1];
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.softmax_cross_entropy(l, &labels).unwrap();
    // Direct evaluation without max subtraction; safe for logits in [-3, 3].
    let mut expected = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * 5..(i + 1) * 5];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        expected += -(row[y].exp() / z).ln();
    }
    expected /= 4.0;
    assert!((tape.value(loss).data()[0] - expected).abs() < 1e-10);
}

#[test]
fn conv2d_matches_direct_oracle_reference_case() {
    let mut g = rng(31);
    let x = uniform(&[2, 3, 5, 5], -1.0, 1.0, &mut g);
    let w = uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut g);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv2d(xv, wv, None, 2, 1).unwrap();
    let expected = direct_conv(&x, &w, None, 2, 1);
    assert!(tape.value(y).max_abs_diff(&expected).unwrap() < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_matches_direct_oracle(
        n in 1usize..=4, c in 1usize..=8, h in 1usize..=9, w in 1usize..=9,
        o in 1usize..=4, k in 1usize..=3, stride in 1usize..=3, pad in 0usize..=1,
        with_bias: bool, seed: u64,
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut g = rng(seed);
        let x = uniform(&[n, c, h, w], -1.0, 1.0, &mut g);
        let wt = uniform(&[o, c, k, k], -1.0, 1.0, &mut g);
        let b = uniform(&[o], -1.0, 1.0, &mut g);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(wt.clone());
        let bv = with_bias.then(|| tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
        let expected = direct_conv(&x, &wt, with_bias.then_some(&b), stride, pad);
        prop_assert!(tape.value(y).max_abs_diff(&expected).unwrap() < 1e-10);
    }
}

#[test]
fn mini_resnet_parameter_gradients() {
    let r = mini_resnet_probe(10, 41);
    println!("mini_resnet: {r:?}");
    assert!(r.max_rel_err < TOL, "{r:?}");
}
