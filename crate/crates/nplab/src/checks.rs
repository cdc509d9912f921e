// SPDX-License-Identifier: Apache-2.0

//! Seeded numerical check suites shared by the `grad check` and
//! `decomp check` subcommands and the acceptance runner.

use npcore::decomp::{residual_scaling, LayerNcf, Partition, ScalingFit};
use npcore::ncf::{ncf_flow, pga_maximize, NetNcf};
use npcore::net::min_abs_preactivation;
use npcore::pursuit::{max_imbalance, rebalance};
use npcore::{mat, rng, Activation, AscentConfig, Dataset, Mat, Net, NcfObjective};
use rand::Rng;
use serde::Serialize;

pub const FD_STEP: f64 = 1e-5;

/// Random net as used by the gradient and Euler suites: depth 2..=4, widths
/// 1..=8, `p` in 1..=3, `alpha` in {0, 0.5, 1}, entries `N(0, 1/fan_in)`.
pub fn random_case(r: &mut impl Rng) -> (Net, Dataset) {
    let depth = r.random_range(2..=4usize);
    let p = r.random_range(1..=3u32);
    let alpha = [0.0, 0.5, 1.0][r.random_range(0..3usize)];
    let widths: Vec<usize> = (0..=depth).map(|_| r.random_range(1..=8usize)).collect();
    let act = Activation::new(p, alpha).expect("valid activation");
    let mut net = Net::zeros(&widths, act).expect("depth >= 2");
    for w in &mut net.layers {
        let s = 1.0 / (w.cols() as f64).sqrt();
        for v in w.as_mut_slice() {
            *v = s * rng::normal(r);
        }
    }
    let n = 4;
    let data = Dataset::new(
        Mat::from_fn(widths[0], n, |_, _| rng::normal(r)),
        Mat::from_fn(widths[depth], n, |_, _| rng::normal(r)),
    )
    .expect("shapes agree");
    (net, data)
}

/// Resample inputs until every hidden pre-activation is at least `margin`
/// away from the kink; returns `None` after 100 tries. For `p >= 2` the kink
/// sits in a higher derivative but still costs central differences an
/// `O(h)` error within `h` of it.
fn kink_conditioned(net: &Net, data: Dataset, margin: f64, r: &mut impl Rng) -> Option<Dataset> {
    if net.act.alpha == 1.0 {
        return Some(data);
    }
    let mut data = data;
    for _ in 0..100 {
        if min_abs_preactivation(net, &data.x).ok()? >= margin {
            return Some(data);
        }
        let x = Mat::from_fn(data.d(), data.n(), |_, _| rng::normal(r));
        data = Dataset::new(x, data.y.clone()).ok()?;
    }
    None
}

#[derive(Clone, Debug, Serialize)]
pub struct GradSuite {
    pub nets: usize,
    pub skipped: usize,
    /// `max_k |g_k - fd_k| / max_k |g_k|`, maximized over nets.
    pub max_rel_err: f64,
}

/// Central differences of the loss against backprop on `count` random nets.
pub fn grad_suite(seed: u64, count: usize) -> GradSuite {
    let mut r = rng::rng(seed);
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    let mut done = 0;
    while done < count {
        let (net, data) = random_case(&mut r);
        let Some(data) = kink_conditioned(&net, data, 1e-3, &mut r) else {
            skipped += 1;
            continue;
        };
        done += 1;
        let g = net.grad_loss(&data).expect("shapes agree").flatten();
        let w = net.flatten();
        let mut probe = net.clone();
        let mut out = |wk: &[f64]| {
            probe.set_flat(wk);
            probe.forward_batch(&data.x).expect("shapes agree")
        };
        let mut err: f64 = 0.0;
        for k in 0..w.len() {
            let mut wk = w.clone();
            wk[k] = w[k] + FD_STEP;
            let up = out(&wk);
            wk[k] = w[k] - FD_STEP;
            let dn = out(&wk);
            // loss(up) - loss(dn) = <H+ - H-, (H+ + H-)/2 - Y>, which avoids
            // cancelling the label energy when the outputs are small.
            let diff: f64 = (0..up.as_slice().len())
                .map(|i| {
                    let (a, b, y) = (up.as_slice()[i], dn.as_slice()[i], data.y.as_slice()[i]);
                    (a - b) * (0.5 * (a + b) - y)
                })
                .sum();
            err = err.max((diff / (2.0 * FD_STEP) - g[k]).abs());
        }
        let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(if scale > 0.0 { err / scale } else { err });
    }
    GradSuite { nets: done, skipped, max_rel_err: worst }
}

#[derive(Clone, Debug, Serialize)]
pub struct EulerSuite {
    pub nets: usize,
    /// `|<w, grad H_k> - D H_k| / (D |H_k|)`, worst case.
    pub max_euler_rel: f64,
    /// `|H(cw) - c^D H(w)| / |c^D H(w)|` for `c` in {0.5, 1.7}, worst case.
    pub max_scaling_rel: f64,
}

/// Euler identity and homogeneity on the same nets as [`grad_suite`].
pub fn euler_suite(seed: u64, count: usize) -> EulerSuite {
    let mut r = rng::rng(seed);
    let mut eu: f64 = 0.0;
    let mut sc: f64 = 0.0;
    for _ in 0..count {
        let (net, data) = random_case(&mut r);
        let d = net.degree() as f64;
        for j in 0..data.n() {
            let x = data.x.col(j);
            let h = net.forward(&x).expect("shapes agree");
            let hmax = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if hmax == 0.0 {
                continue;
            }
            eu = eu.max(net.euler_check(&x).expect("shapes agree") / (d * hmax));
            for c in [0.5, 1.7] {
                let hc = net.scaled(c).forward(&x).expect("shapes agree");
                let f = c.powi(net.degree() as i32);
                let e = hc.iter().zip(&h).map(|(a, b)| (a - f * b).abs()).fold(0.0, f64::max);
                sc = sc.max(e / (f * hmax));
            }
        }
    }
    EulerSuite { nets: count, max_euler_rel: eu, max_scaling_rel: sc }
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingCase {
    pub degree: u32,
    pub delta: f64,
    pub max_rel: f64,
}

/// Explicit Euler on a degree-`L` NCF: iterates from `delta u0` with step
/// `eta` against `delta` times iterates from `u0` with step
/// `eta delta^{L-2}`, over `steps` steps.
pub fn trajectory_scaling(seed: u64, degree: u32, delta: f64, steps: usize) -> ScalingCase {
    let mut r = rng::stream(seed, degree as u64);
    let (widths, act) = match degree {
        2 => (vec![5, 4, 2], Activation::linear()),
        4 => (vec![5, 4, 3, 3, 2], Activation::leaky(0.5)),
        _ => panic!("degree must be 2 or 4"),
    };
    let template = Net::zeros(&widths, act).expect("valid widths");
    let x = Mat::from_fn(5, 6, |_, _| rng::normal(&mut r));
    let z = Mat::from_fn(2, 6, |_, _| rng::normal(&mut r));
    let obj = NetNcf::new(&template, &x, &z);
    let u0 = rng::unit_sphere(&mut r, obj.dim());
    let base_dt = 0.02;
    let small: Vec<f64> = u0.iter().map(|v| delta * v).collect();
    let eta = base_dt / delta.powi(degree as i32 - 2);
    let a = ncf_flow(&obj, &small, eta, steps, f64::INFINITY).expect("valid flow");
    let b = ncf_flow(&obj, &u0, base_dt, steps, f64::INFINITY).expect("valid flow");
    let mut worst: f64 = 0.0;
    for (sa, sb) in a.states.iter().zip(&b.states) {
        let nb = mat::norm(sb) * delta;
        let e = sa.iter().zip(sb).map(|(p, q)| (p - delta * q).abs()).fold(0.0, f64::max);
        worst = worst.max(e / nb);
    }
    assert_eq!(a.states.len(), steps + 1);
    ScalingCase { degree, delta, max_rel: worst }
}

#[derive(Clone, Debug, Serialize)]
pub struct BalanceSuite {
    pub problems: usize,
    /// Candidates with residual at most the tolerance and positive value.
    pub checked: usize,
    /// Worst `|a^2 - p b^2| / (a^2 + p b^2)` among them.
    pub max_gap: f64,
}

/// Per-layer NCF problems from random three-layer nets and random targets;
/// every converged positive candidate is tested for balancedness.
pub fn balance_suite(seed: u64, problems: usize, residual_tol: f64) -> BalanceSuite {
    let mut r = rng::rng(seed);
    let mut checked = 0;
    let mut max_gap: f64 = 0.0;
    for k in 0..problems {
        let act = [Activation::relu(), Activation::leaky(0.5), Activation::square(), Activation::new(2, 0.0).unwrap()][k % 4];
        let net = Net::random(&[6, 5, 4, 1], act, 0.6, &mut r).expect("valid widths");
        let x = Mat::from_fn(6, 12, |_, _| rng::normal(&mut r));
        let target = Mat::from_fn(1, 12, |_, _| rng::normal(&mut r));
        let l = 1 + k % 2;
        let obj = LayerNcf::from_net(&net, &x, &target, l).expect("valid layer");
        let cfg = AscentConfig { seed: seed.wrapping_add(k as u64), ..AscentConfig::default() };
        let p = act.p as f64;
        for c in pga_maximize(&obj, &cfg).expect("valid config") {
            if c.kkt_residual > residual_tol || !(c.value > 0.0) {
                continue;
            }
            let (a, b) = obj.split_u(&c.u);
            let (a2, b2) = (mat::dot(a, a), mat::dot(b, b));
            max_gap = max_gap.max((a2 - p * b2).abs() / (a2 + p * b2));
            checked += 1;
        }
    }
    BalanceSuite { problems, checked, max_gap }
}

#[derive(Clone, Debug, Serialize)]
pub struct RebalanceSuite {
    pub nets: usize,
    /// `||H' - H|| / ||H||` on probe batches, worst case.
    pub max_output_rel: f64,
    pub max_imbalance: f64,
}

pub fn rebalance_suite(seed: u64, count: usize) -> RebalanceSuite {
    let mut r = rng::rng(seed);
    let mut out: f64 = 0.0;
    let mut imb: f64 = 0.0;
    for _ in 0..count {
        let (mut net, data) = random_case(&mut r);
        // Unbalance on purpose.
        for w in &mut net.layers {
            let c = rng::uniform(&mut r, 0.2, 3.0);
            for row in 0..w.rows() {
                let s = rng::uniform(&mut r, 0.3, 3.0);
                w.row_mut(row).iter_mut().for_each(|v| *v *= c * s);
            }
        }
        let (bal, _) = rebalance(&net);
        let h = net.forward_batch(&data.x).expect("shapes agree");
        let hb = bal.forward_batch(&data.x).expect("shapes agree");
        out = out.max(hb.sub(&h).norm() / h.norm().max(f64::MIN_POSITIVE));
        imb = imb.max(max_imbalance(&bal));
    }
    RebalanceSuite { nets: count, max_output_rel: out, max_imbalance: imb }
}

/// The three-layer square-activation construction with one active neuron per
/// layer and `k` neurons in total; `w_z` is random with unit norm.
pub fn square_construction(seed: u64, k: usize) -> (Net, Partition, Vec<f64>, Mat) {
    let mut r = rng::rng(seed);
    let d = 4;
    let net = Net::random(&[d, k, k, 1], Activation::square(), 0.8, &mut r).expect("valid widths");
    let part = Partition::uniform(&net, 1);
    let net = npcore::decomp::wz_set(&net, &part, &vec![0.0; part.wz_len(&net)]);
    let dir = rng::unit_sphere(&mut r, part.wz_len(&net));
    let probe = Mat::from_fn(d, 8, |_, _| rng::normal(&mut r));
    (net, part, dir, probe)
}

/// Remainder slope for the square construction and for its linear twin.
pub fn scaling_fits(seed: u64) -> (npcore::Result<ScalingFit>, npcore::Result<ScalingFit>) {
    let deltas = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3];
    let (net, part, dir, probe) = square_construction(seed, 6);
    let sq = residual_scaling(&net, &part, &dir, &deltas, &probe);
    let mut lin = net.clone();
    lin.act = Activation::linear();
    let li = residual_scaling(&lin, &part, &dir, &deltas, &probe);
    (sq, li)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        assert!(grad_suite(3, 5).max_rel_err < 1e-6);
        let e = euler_suite(3, 5);
        assert!(e.max_euler_rel < 1e-9 && e.max_scaling_rel < 1e-9, "{e:?}");
        assert!(rebalance_suite(3, 3).max_imbalance < 1e-8);
    }
}
