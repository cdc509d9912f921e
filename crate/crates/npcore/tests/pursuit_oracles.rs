// SPDX-License-Identifier: Apache-2.0

use npcore::pursuit::*;
use npcore::tasks::*;
use npcore::{rng, Activation, AscentConfig, Dataset, Mat, Net};

#[test]
fn omp_on_the_fixed_instance() {
    let (x, b) = diag_instance();
    let r = omp_reference(&x, &b, 2).unwrap();
    assert_eq!(r.history[0].support, vec![2]);
    assert!((r.history[0].coefs[2] - 1.772).abs() < 5e-4);
    assert_eq!(r.support, vec![2, 0]);
    assert!((r.coefs[0] - 1.1875).abs() < 1e-10);
    assert!((r.coefs[2] - 1.875).abs() < 1e-10);
    assert!(r.history[1].residual_norm < 1e-12);
    assert_eq!(x[(1, 2)], 1.0 + 0.2 / 3.0);
}

#[test]
fn omp_zero_labels() {
    let (x, _) = diag_instance();
    let r = omp_reference(&x, &[0.0, 0.0], 2).unwrap();
    assert!(r.support.is_empty());
    assert_eq!(r.coefs, vec![0.0; 3]);
}

#[test]
fn np_on_diagonal_network_matches_omp() {
    let data = diag_dataset();
    let (net, log) = run(&data, &NPConfig::diagonal(), None).unwrap();
    let picks: Vec<_> = log.records.iter().map(|r| r.coord.unwrap()).collect();
    assert_eq!(picks, vec![2, 0], "{log:?}");
    let z = diagonal_products(&net, &log.coords);
    for (got, want) in z.iter().zip([1.1875, 0.0, 1.875]) {
        assert!((got - want).abs() < 1e-2, "{z:?}");
    }
    assert_eq!(log.outcome, Some(Outcome::Converged));
}

#[test]
fn zero_labels_abort_first_stage() {
    let data = Dataset::new(Mat::from_fn(3, 5, |i, j| (i + j) as f64), Mat::zeros(1, 5)).unwrap();
    let cfg = NPConfig { ascent: AscentConfig { restarts: 2, steps: 50, ..Default::default() }, ..Default::default() };
    assert!(matches!(np_init_stage(&data, &cfg), Err(npcore::Error::NoPositiveKkt { .. })));
}

#[test]
fn one_neuron_least_squares() {
    // linear 1-neuron net: GD converges to the least-squares coefficient
    let x = Mat::from_rows(&[&[1.0, 2.0, -1.0, 0.5]]);
    let y = Mat::from_rows(&[&[2.1, 3.9, -2.2, 1.0]]);
    let data = Dataset::new(x.clone(), y.clone()).unwrap();
    let beta = x.frob_dot(&y) / x.norm_sq();
    let net = Net::new(vec![Mat::from_rows(&[&[0.1]]), Mat::from_rows(&[&[0.1]])], Activation::linear()).unwrap();
    let (out, rep) = gd_minimize(&net, &data, &GdConfig { lr: 0.01, iters: 100_000, halving: None, grad_tol: Some(1e-13) }, None).unwrap();
    assert!(!rep.restored);
    assert!((out.layers[0][(0, 0)] * out.layers[1][(0, 0)] - beta).abs() < 1e-6);
}

#[test]
fn rebalance_preserves_output_on_deep_net() {
    let mut r = rng::rng(3);
    for act in [Activation::relu(), Activation::leaky(0.2), Activation::square(), Activation { p: 3, alpha: 0.5 }] {
        let mut net = Net::random(&[4, 5, 6, 3, 2], act, 1.0, &mut r).unwrap();
        // make it badly unbalanced
        net.layers[1].scale(7.0);
        net.layers[2].scale(0.1);
        let (b, rep) = rebalance(&net);
        assert!(rep.max_imbalance < 1e-8, "{act:?} {rep:?}");
        let x = Mat::from_fn(4, 100, |i, j| ((i * 100 + j) as f64 * 0.61).sin());
        let (h0, h1) = (net.forward_batch(&x).unwrap(), b.forward_batch(&x).unwrap());
        assert!(h0.sub(&h1).max_abs() <= 1e-10 * (1.0 + h0.max_abs()), "{act:?}");
    }
}
