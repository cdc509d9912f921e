// SPDX-License-Identifier: Apache-2.0

use npcore::decomp::*;
use npcore::ncf::NcfObjective;
use npcore::{rng, Activation, Mat, Net};

fn rand_net(widths: &[usize], act: Activation, seed: u64) -> Net {
    let mut r = rng::rng(seed);
    Net::random(widths, act, 0.8, &mut r).unwrap()
}

fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::rng(seed);
    rng::normal_vec(&mut r, n)
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

// Direct expansion for the 3-layer square network, scalar output.
fn square_h1_oracle(sw: &SplitWeights, x: &[f64]) -> f64 {
    let sq = |v: Vec<f64>| v.into_iter().map(|t| t * t).collect::<Vec<_>>();
    let [l1, l2, l3] = [&sw.layers[0], &sw.layers[1], &sw.layers[2]];
    let n1x2 = sq(l1.n.matvec(x));
    let u = l2.n.matvec(&n1x2);
    let v = l2.b.matvec(&sq(l1.a.matvec(x)));
    let had: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a * b).collect();
    let t1 = 2.0 * l3.n.matvec(&had)[0];
    let t2 = l3.b.matvec(&sq(l2.a.matvec(&n1x2)))[0];
    t1 + t2
}

#[test]
fn square_three_layer_matches_expansion() {
    for seed in 0..5 {
        let net = rand_net(&[4, 5, 6, 1], Activation::square(), seed);
        let sw = split(&net, &Partition::new(vec![2, 3])).unwrap();
        for k in 0..4 {
            let x = rand_vec(4, 100 + k);
            let got = h1_full(&sw, &x)[0];
            assert!(close(got, square_h1_oracle(&sw, &x), 1e-12), "seed {seed}");
        }
    }
}

#[test]
fn separable_into_single_neuron_terms() {
    for (seed, act) in [(1, Activation::square()), (2, Activation::relu()), (3, Activation { p: 3, alpha: 0.5 })] {
        let net = rand_net(&[3, 5, 4, 6, 2], act, seed);
        let part = Partition::new(vec![2, 1, 3]);
        let sw = split(&net, &part).unwrap();
        let x = rand_vec(3, seed + 10);
        let mut sum = vec![0.0; 2];
        for l in 1..4 {
            let a_blk = &sw.layers[l - 1].a;
            let b_blk = &sw.layers[l].b;
            for j in 0..a_blk.rows() {
                let t = h1_layer(&sw, &x, l, a_blk.row(j), &b_blk.col(j)).unwrap();
                sum[0] += t[0];
                sum[1] += t[1];
            }
        }
        let full = h1_full(&sw, &x);
        for k in 0..2 {
            assert!(close(full[k], sum[k], 1e-12), "{act:?}");
        }
    }
}

#[test]
fn homogeneous_of_degree_p_plus_one_in_wz() {
    for act in [Activation::square(), Activation::leaky(0.5), Activation { p: 3, alpha: 0.0 }] {
        let net = rand_net(&[3, 4, 4, 1], act, 7);
        let sw = split(&net, &Partition::new(vec![2, 2])).unwrap();
        let x = rand_vec(3, 8);
        let base = h1_full(&sw, &x)[0];
        for c in [0.5, 2.0, 10.0] {
            let got = h1_full(&sw.scale_wz(c), &x)[0];
            assert!(close(got, c.powi(act.p as i32 + 1) * base, 1e-10));
        }
    }
}

#[test]
fn c_blocks_do_not_enter() {
    let net = rand_net(&[3, 4, 5, 2], Activation::square(), 9);
    let mut sw = split(&net, &Partition::new(vec![2, 2])).unwrap();
    let x = rand_vec(3, 1);
    let before = h1_full(&sw, &x);
    sw.layers[1].c = Mat::from_fn(3, 2, |i, j| (i as f64 + 1.0) * 17.0 - j as f64);
    assert_eq!(h1_full(&sw, &x), before);
}

#[test]
fn zero_wz_gives_zero() {
    let net = rand_net(&[3, 4, 5, 2], Activation::square(), 11);
    let part = Partition::new(vec![2, 2]);
    let z = wz_set(&net, &part, &vec![0.0; part.wz_len(&net)]);
    assert_eq!(h1_full(&split(&z, &part).unwrap(), &[1.0, 2.0, 3.0]), vec![0.0, 0.0]);
}

#[test]
fn g_features_match_truncated_forward() {
    let net = rand_net(&[3, 4, 5, 6, 1], Activation::leaky(0.2), 12);
    let sw = split(&net, &Partition::new(vec![2, 3, 2])).unwrap();
    let narrow = sw.narrow();
    let x = rand_vec(3, 13);
    assert_eq!(g_features(&sw, &x, 0), x);
    let tr = narrow.trace(&Mat::column(&x)).unwrap();
    for l in 1..4 {
        assert_eq!(g_features(&sw, &x, l), tr.post[l - 1].col(0));
    }
}

#[test]
fn tail_jacobian_matches_finite_differences() {
    let net = rand_net(&[3, 4, 5, 6, 2], Activation { p: 2, alpha: 0.4 }, 14);
    let sw = split(&net, &Partition::new(vec![3, 4, 2])).unwrap();
    for l in 1..=2 {
        let p = sw.layers[l].n.rows();
        let s = rand_vec(p, 20 + l as u64);
        let j = tail_grad(&sw, &s, l);
        let f = |s: &[f64]| {
            let mut h: Vec<f64> = s.iter().map(|v| sw.act.apply(*v)).collect();
            for k in l + 2..=4 {
                let z = sw.layers[k - 1].n.matvec(&h);
                h = if k == 4 { z } else { z.iter().map(|v| sw.act.apply(*v)).collect() };
            }
            h
        };
        let h = 1e-5;
        for c in 0..p {
            let (mut sp, mut sm) = (s.clone(), s.clone());
            sp[c] += h;
            sm[c] -= h;
            let (fp, fm) = (f(&sp), f(&sm));
            for r in 0..2 {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                assert!((fd - j[(r, c)]).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }
}

#[test]
fn tail_jacobian_zero_when_blocks_vanish() {
    let mut net = rand_net(&[3, 4, 5, 1], Activation::square(), 15);
    net.layers[2] = Mat::zeros(1, 5);
    let sw = split(&net, &Partition::new(vec![2, 2])).unwrap();
    assert_eq!(tail_grad(&sw, &[0.3, -0.2], 1).max_abs(), 0.0);
}

#[test]
fn layer_ncf_matches_tail_formula() {
    for act in [Activation::square(), Activation::leaky(0.5), Activation { p: 3, alpha: 1.0 }] {
        let net = rand_net(&[3, 4, 3, 2], act, 16);
        let x = Mat::from_fn(3, 6, |i, j| ((i * 6 + j) as f64 * 0.7).sin());
        let y = Mat::from_fn(2, 6, |i, j| ((i + 2 * j) as f64).cos());
        let full = split(&net, &Partition::new(vec![4, 3])).unwrap();
        for l in 1..3 {
            let obj = LayerNcf::from_net(&net, &x, &y, l).unwrap();
            let u = rand_vec(obj.dim(), 40 + l as u64);
            let (a, b) = obj.split_u(&u);
            let mut want = 0.0;
            for i in 0..6 {
                let h = h1_layer(&full, &x.col(i), l, a, b).unwrap();
                want += h[0] * y[(0, i)] + h[1] * y[(1, i)];
            }
            assert!(close(obj.value(&u), want, 1e-11), "{act:?} l={l}");
        }
    }
}

fn check_grad(obj: &dyn NcfObjective, u: &[f64]) {
    let g = obj.grad(u);
    let h = 1e-5;
    for k in 0..u.len() {
        let (mut up, mut um) = (u.to_vec(), u.to_vec());
        up[k] += h;
        um[k] -= h;
        let fd = (obj.value(&up) - obj.value(&um)) / (2.0 * h);
        assert!((fd - g[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "coordinate {k}: {fd} vs {}", g[k]);
    }
}

#[test]
fn ncf_gradients_match_finite_differences() {
    let net = rand_net(&[3, 4, 5, 2], Activation::square(), 17);
    let x = Mat::from_fn(3, 5, |i, j| ((i * 5 + j) as f64 * 1.3).sin());
    let y = Mat::from_fn(2, 5, |i, j| ((3 * i + j) as f64).cos());
    for l in 1..3 {
        let obj = LayerNcf::from_net(&net, &x, &y, l).unwrap();
        check_grad(&obj, &rand_vec(obj.dim(), 50));
    }
    let part = Partition::new(vec![2, 3]);
    let wz = WzNcf::new(&net, &part, &x, &y).unwrap();
    check_grad(&wz, &rand_vec(wz.dim(), 51));
}

#[test]
fn wz_ncf_is_inner_product_with_h1() {
    let net = rand_net(&[3, 4, 5, 2], Activation::leaky(0.3), 18);
    let part = Partition::new(vec![1, 2]);
    let x = Mat::from_fn(3, 4, |i, j| ((i * 4 + j) as f64 * 0.9).cos());
    let y = Mat::from_fn(2, 4, |i, j| (i as f64 - j as f64) * 0.25);
    let obj = WzNcf::new(&net, &part, &x, &y).unwrap();
    let u = rand_vec(obj.dim(), 52);
    let sw = split(&wz_set(&net, &part, &u), &part).unwrap();
    let want = h1_full_batch(&sw, &x).frob_dot(&y);
    assert!(close(obj.value(&u), want, 1e-12));
    let g = obj.grad(&u);
    // C_2 entries (rows >= 2, cols >= 1 of W_2) carry no gradient
    for (f, (l, i, j)) in part.wz_indices(&net).into_iter().enumerate() {
        if l == 1 && i >= 2 && j >= 1 {
            assert_eq!(g[f], 0.0);
        }
    }
}

#[test]
fn remainder_scaling_square() {
    let net = rand_net(&[4, 6, 6, 1], Activation::square(), 19);
    let part = Partition::new(vec![1, 1]);
    let dir = rand_vec(part.wz_len(&net), 53);
    let probe = Mat::from_fn(4, 8, |i, j| ((i * 8 + j) as f64 * 0.37).sin());
    let deltas = [1e-3, 3e-3, 1e-2, 3e-2, 1e-1];
    let fit = residual_scaling(&net, &part, &dir, &deltas, &probe).unwrap();
    assert!(fit.slope >= 4.7, "slope {}", fit.slope);
}

#[test]
fn remainder_scaling_linear() {
    let net = rand_net(&[4, 6, 6, 1], Activation::linear(), 20);
    let part = Partition::new(vec![1, 1]);
    let dir = rand_vec(part.wz_len(&net), 54);
    let probe = Mat::from_fn(4, 8, |i, j| ((i * 8 + j) as f64 * 0.37).sin());
    match residual_scaling(&net, &part, &dir, &[1e-3, 1e-2, 1e-1, 1.0], &probe) {
        Ok(fit) => assert!(fit.slope > 2.0, "slope {}", fit.slope),
        Err(e) => assert_eq!(e, npcore::Error::RemainderZero),
    }
    assert!(residual_scaling(&net, &part, &vec![0.0; dir.len()], &[1e-3, 1e-2, 1e-1, 1.0], &probe).is_err());
}

#[test]
fn probe_of_zero_objective() {
    let obj = LayerNcf::new(Mat::zeros(3, 4), Mat::zeros(2, 4), Activation::relu()).unwrap();
    assert_eq!(zero_ncf_probe(&obj, 20, 1), 0.0);
}
