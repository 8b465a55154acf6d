//! Finite-difference and closed-form oracles for the autodiff engine.

use gilab_core::autodiff::grad;
use gilab_core::imaging::{r_mean, r_tv, ChannelMeans};
use gilab_core::selftest::{
    corrupted_case, matching_cases, op_cases, run_cases, OpCase, Tolerance,
};
use gilab_core::victim::{VictimConfig, VictimNet};
use gilab_core::{Array, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn assert_all_pass(group: &'static str, cases: &[OpCase]) {
    let out = run_cases(group, cases, Tolerance::default());
    let bad: Vec<_> = out.iter().filter(|c| !c.passed).collect();
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn every_op_matches_central_differences() {
    let mut total = 0;
    for seed in 0..3 {
        let cases = op_cases(seed, 2).unwrap();
        total += cases.len();
        assert_all_pass("gradient", &cases);
    }
    assert!(total >= 100, "only {total} randomized cases");
}

#[test]
fn every_op_has_correct_second_derivatives() {
    let cases = op_cases(11, 2).unwrap();
    let second: Vec<OpCase> = cases
        .iter()
        .enumerate()
        .map(|(i, c)| c.second_order(100 + i as u64))
        .collect();
    assert_all_pass("second order", &second);
}

#[test]
fn matching_losses_pass_double_backward_checks() {
    assert!(VictimConfig::tiny().param_count() <= 1000);
    for seed in [1, 2] {
        assert_all_pass("double backward", &matching_cases(seed).unwrap());
    }
}

#[test]
fn corrupted_gradient_is_reported_by_name() {
    let out = run_cases("gradient", &[corrupted_case(4)], Tolerance::default());
    assert!(!out[0].passed);
    assert!(out[0].name.contains("detached"));
}

#[test]
fn regularizer_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = Array::from_fn(&[3, 5, 6], |_| rng.random::<f64>());
    let means = ChannelMeans::new(vec![0.2, 0.5, 0.7]).unwrap();
    let cases = [
        OpCase::new("r_tv", vec![img.clone()], |t| r_tv(&t[0])),
        OpCase::new("r_mean", vec![img], move |t| r_mean(&t[0], &means)),
    ];
    assert_all_pass("regularizers", &cases);
}

/// One-layer linear regression `l = (w.x - y)^2 / 2`, so `grad_w l = r x`
/// with `r = w.x - y`. For `L(x) = 1 - cos(r x, c)` the sign of `r` cancels
/// the magnitude: `L = 1 - s (x.c) / (|x| |c|)` with `s = sign(r)`, and
/// `dL/dx = -s / |c| * (c / |x| - (x.c) x / |x|^3)`.
#[test]
fn linear_model_matches_hand_derivation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let d = rng.random_range(2..7);
        let xs: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ws: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cs: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = rng.random_range(-1.0..1.0);

        let x = Tensor::param(Array::new(vec![d], xs.clone()).unwrap());
        let w = Tensor::param(Array::new(vec![d], ws.clone()).unwrap());
        let c = Tensor::constant(Array::new(vec![d], cs.clone()).unwrap());
        let r = x.dot(&w).unwrap().add_scalar(-y).unwrap();
        let loss = r.square().unwrap().scale(0.5).unwrap();
        let gw = grad(&loss, &[w], true).unwrap().remove(0);
        let cn: f64 = cs.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cos = gw
            .dot(&c)
            .unwrap()
            .div(&gw.norm().unwrap())
            .unwrap()
            .scale(1.0 / cn)
            .unwrap();
        let l = cos.neg().unwrap().add_scalar(1.0).unwrap();
        let dx = grad(&l, &[x], false).unwrap().remove(0);

        let rv: f64 = xs.iter().zip(&ws).map(|(a, b)| a * b).sum::<f64>() - y;
        let s = rv.signum();
        let xn: f64 = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
        let xc: f64 = xs.iter().zip(&cs).map(|(a, b)| a * b).sum();
        for i in 0..d {
            let expect = -s / cn * (cs[i] / xn - xc * xs[i] / xn.powi(3));
            assert!(
                (dx.data()[i] - expect).abs() < 1e-10,
                "entry {i}: {} vs {expect}",
                dx.data()[i]
            );
        }
    }
}

#[test]
fn create_graph_does_not_change_first_order_gradients() {
    let net = VictimNet::random(VictimConfig::tiny(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let [c, h, w] = net.config().image_shape();
    let x = Tensor::constant(Array::from_fn(&[2, c, h, w], |_| rng.random::<f64>()));
    let plain = {
        let wt = net.weights(true);
        let loss = net
            .forward_with(&wt, &x)
            .unwrap()
            .cross_entropy(&[1, 4])
            .unwrap();
        grad(&loss, &wt.tensors, false).unwrap()
    };
    let graphed = {
        let wt = net.weights(true);
        let loss = net
            .forward_with(&wt, &x)
            .unwrap()
            .cross_entropy(&[1, 4])
            .unwrap();
        grad(&loss, &wt.tensors, true).unwrap()
    };
    for (a, b) in plain.iter().zip(&graphed) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn identical_op_sequences_are_bit_identical() {
    let run = || {
        let cases = op_cases(21, 1).unwrap();
        cases
            .iter()
            .map(|c| c.check(Tolerance::default()).unwrap().worst_analytic)
            .collect::<Vec<f64>>()
    };
    let (a, b) = (run(), run());
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn golden_op_values() {
    let m = Tensor::constant(Array::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let v = Tensor::constant(Array::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
    assert_eq!(m.matmul(&v).unwrap().data(), &[3.0, 4.0]);
    let r = Tensor::constant(Array::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    assert_eq!(r.relu().unwrap().data(), &[0.0, 0.0, 2.0]);
    let logits = Tensor::constant(Array::zeros(&[1, 3]));
    let ce = logits.cross_entropy(&[1]).unwrap().item();
    assert!((ce - 3f64.ln()).abs() < 1e-15);
    let x = Tensor::param(Array::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let g = grad(&x.square().unwrap().sum().unwrap(), &[x], false).unwrap();
    assert_eq!(g[0].data(), &[2.0, 4.0, 6.0]);
}
