// SPDX-License-Identifier: Apache-2.0

//! Acceptance runner: one PASS/FAIL line per criterion, each with its
//! measured values and wall time against its budget. Exits non-zero if any
//! criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use npcore::pursuit::{diagonal_products, run as np_run, GdConfig, LaterDelta, NPConfig, NPLog, StopRule};
use npcore::saddle::{homog_sum_flow, HomogBlockSpec, SumFlowConfig};
use npcore::tasks::{diag_dataset, gen_task, metrics, MetricKind, TaskId, TaskSpec};
use npcore::{Activation, AscentConfig, Mat};
use nplab::checks;
use nplab::experiments::{run_saddle, SaddleRunSummary, SimConfig};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

struct Runner {
    failed: Vec<String>,
}

impl Runner {
    fn check(&mut self, id: &str, budget: Duration, f: impl FnOnce() -> Verdict) {
        let t = Instant::now();
        let v = f();
        self.report(id, budget, t.elapsed(), v);
    }

    fn report(&mut self, id: &str, budget: Duration, took: Duration, v: Verdict) {
        let in_time = took <= budget;
        let pass = v.pass && in_time;
        println!(
            "criterion {id:>3}: {} {} [{:.2}s of {}s]",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
        if !pass {
            self.failed.push(id.to_string());
        }
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

const SEED: u64 = 0;

fn gradients() -> Verdict {
    let g = checks::grad_suite(SEED, 50);
    verdict(g.nets == 50 && g.max_rel_err < 1e-6, format!("nets={} skipped={} max_rel_err={:.3e}", g.nets, g.skipped, g.max_rel_err))
}

fn euler() -> Verdict {
    let e = checks::euler_suite(SEED, 50);
    verdict(
        e.max_euler_rel < 1e-9 && e.max_scaling_rel < 1e-9,
        format!("nets={} euler_rel={:.3e} scaling_rel={:.3e}", e.nets, e.max_euler_rel, e.max_scaling_rel),
    )
}

fn trajectory_scaling() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for degree in [2, 4] {
        for delta in [0.1, 0.01] {
            let c = checks::trajectory_scaling(SEED, degree, delta, 100);
            worst = worst.max(c.max_rel);
            parts.push(format!("L{degree}/d{delta}={:.1e}", c.max_rel));
        }
    }
    verdict(worst <= 1e-12, parts.join(" "))
}

fn decomposition_scaling() -> Verdict {
    let (sq, li) = checks::scaling_fits(SEED);
    let sq_slope = sq.as_ref().map(|f| f.slope).unwrap_or(f64::NAN);
    let (li_ok, li_txt) = match &li {
        Err(npcore::Error::RemainderZero) => (true, "remainder numerically zero".to_string()),
        Ok(f) => (f.slope > 2.0, format!("slope {:.3}", f.slope)),
        Err(e) => (false, e.to_string()),
    };
    verdict(sq_slope >= 4.7 && li_ok, format!("square slope={sq_slope:.3} linear: {li_txt}"))
}

fn balancedness() -> Verdict {
    let b = checks::balance_suite(SEED, 20, 1e-6);
    verdict(
        b.checked > 0 && b.max_gap <= 1e-4,
        format!("problems={} candidates={} max_gap={:.2e}", b.problems, b.checked, b.max_gap),
    )
}

fn saddle_window(s: &SaddleRunSummary, delta: f64) -> Verdict {
    let align = s.window_end_alignment.unwrap_or(f64::NAN);
    let pass = s.window.is_some() && !s.diverged && s.window_max_loss_dev <= 0.01 && s.window_max_dist <= 10.0 * delta && align >= 0.99;
    verdict(
        pass,
        format!(
            "window={:?} loss_dev={:.2e} max_dist={:.4} (limit {:.2}) alignment={align:.4}",
            s.window,
            s.window_max_loss_dev,
            s.window_max_dist,
            10.0 * delta
        ),
    )
}

fn beyond_saddle(s: &SaddleRunSummary) -> Verdict {
    let ratio = s.plateau_loss_ratio.unwrap_or(f64::NAN);
    let preserved = s.sparsity.as_ref().is_some_and(|r| r.preserved);
    let inactive = s.sparsity.as_ref().map_or(0, |r| r.before.iter().flatten().filter(|a| !**a).count());
    verdict(
        s.plateau_iter.is_some() && ratio <= 0.1 && preserved,
        format!(
            "escape={:?} plateau={:?} plateau_loss_ratio={ratio:.2e} inactive_before={inactive} preserved={preserved}",
            s.escape_iter, s.plateau_iter
        ),
    )
}

/// Closed form for `w' = 2 A w` with diagonal `A`: `w(t) = exp(2 A t) w0`.
fn diag_flow_norm(a: &[f64], w0: &[f64], t: f64) -> f64 {
    a.iter().zip(w0).map(|(l, w)| (w * (2.0 * l * t).exp()).powi(2)).sum::<f64>().sqrt()
}

fn sum_flow_quadratic() -> Verdict {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let (a1, a2) = ([3.0, 0.5], [1.0, 0.2]);
    let block = |a: [f64; 2]| HomogBlockSpec { degree: 2, a: Mat::from_fn(2, 2, |i, j| if i == j { a[i] } else { 0.0 }), w0: vec![s, s] };
    let cfg = SumFlowConfig { dt: 1e-3, norm_cap: f64::INFINITY, t_max: 5.0, ..Default::default() };
    let rep = match homog_sum_flow(&[block(a1), block(a2)], &cfg) {
        Ok(r) => r,
        Err(e) => return verdict(false, e.to_string()),
    };
    let (n1, n2) = (diag_flow_norm(&a1, &[s, s], 5.0), diag_flow_norm(&a2, &[s, s], 5.0));
    let exact = n2 / (n1 * n1 + n2 * n2).sqrt();
    let rel = (rep.shares[1] - exact).abs() / exact;
    verdict(
        rep.shares[1] <= 1e-3 && rel < 1e-6 && (rep.stop_time - 5.0).abs() < 1e-12,
        format!("t={} share={:.4e} closed_form={exact:.4e}", rep.stop_time, rep.shares[1]),
    )
}

fn sum_flow_quartic() -> Verdict {
    let dt = 1e-3;
    let blocks = vec![
        HomogBlockSpec { degree: 4, a: Mat::from_fn(2, 2, |i, j| [[2.0, 0.3], [0.3, 1.0]][i][j]), w0: vec![0.6, 0.8] },
        HomogBlockSpec { degree: 4, a: Mat::from_fn(3, 3, |i, j| if i == j { [1.0, 0.5, 0.25][i] } else { 0.0 }), w0: vec![0.2, 0.5, 0.4] },
        HomogBlockSpec { degree: 4, a: Mat::identity(2), w0: vec![0.3, -0.4] },
    ];
    let cfg = SumFlowConfig { dt, norm_cap: 1e6, t_max: 50.0, ..Default::default() };
    let rep = match homog_sum_flow(&blocks, &cfg) {
        Ok(r) => r,
        Err(e) => return verdict(false, e.to_string()),
    };
    // Every block runs to the cap, so the report holds each blow-up time.
    let mut pass = rep.sphere_value_monotone;
    let mut parts = Vec::new();
    for (b, t) in blocks.iter().zip(&rep.blowup) {
        let (lo, hi) = b.blowup_bracket().expect("quartic block with G(w0) > 0");
        let ok = t.is_some_and(|t| t >= lo - 3.0 * dt && t <= hi + 3.0 * dt);
        pass &= ok;
        parts.push(format!("T={:.4} in [{lo:.4}, {hi:.4}]", t.unwrap_or(f64::NAN)));
    }
    verdict(pass, parts.join("; "))
}

/// Step sizes and budgets for the sparse-function runs at `d = 20`.
fn f1_config() -> NPConfig {
    NPConfig { gd: GdConfig { lr: 0.005 / 2000.0, iters: 20_000, halving: None, grad_tol: Some(1e-6) }, ..Default::default() }
}

fn descent(log: &NPLog) -> Verdict {
    let bad = log.records.iter().filter(|r| !(r.loss_after < r.loss_before && r.loss_probe < r.loss_before)).count();
    verdict(bad == 0 && !log.records.is_empty(), format!("iterations={} non-decreasing={bad}", log.records.len()))
}

fn f1_learned(log: &NPLog, train: f64, test: f64) -> Verdict {
    let iters = log.records.len();
    verdict(
        iters <= 31 && train < 0.005 && test < 0.05,
        format!("iterations={iters} train_rel={train:.3e} test_rel={test:.3e} outcome={:?}", log.outcome),
    )
}

fn omp_equivalence() -> Verdict {
    let (net, log) = match np_run(&diag_dataset(), &NPConfig::diagonal(), None) {
        Ok(v) => v,
        Err(e) => return verdict(false, e.to_string()),
    };
    let z = diagonal_products(&net, &log.coords);
    let expected = [1.1875, 0.0, 1.875];
    let err = z.iter().zip(expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let min_l1 = [1.0, 2.0, 0.0];
    let dist_l1 = z.iter().zip(min_l1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let support: Vec<usize> = log.records.iter().filter_map(|r| r.coord).collect();
    verdict(
        support == [2, 0] && err < 1e-2 && dist_l1 > 1e-2,
        format!("support={support:?} products={z:.4?} max_err={err:.2e} dist_to_min_l1={dist_l1:.3}"),
    )
}

fn rebalancing() -> Verdict {
    let r = checks::rebalance_suite(SEED, 50);
    verdict(
        r.max_output_rel <= 1e-10 && r.max_imbalance <= 1e-8,
        format!("nets={} output_rel={:.2e} imbalance={:.2e}", r.nets, r.max_output_rel, r.max_imbalance),
    )
}

fn modadd_config(n: usize) -> NPConfig {
    NPConfig {
        depth: 2,
        act: Activation::square(),
        later_delta: LaterDelta::Relative(0.05),
        ascent: AscentConfig { restarts: 10, steps: 1000, step_size: 2.0, ..Default::default() },
        gd: GdConfig { lr: 1.0 / n as f64, iters: 20_000, halving: None, grad_tol: Some(1e-8) },
        stop: StopRule::ClassError(0.0),
        max_iters: 60,
        ..Default::default()
    }
}

fn modular_addition() -> Verdict {
    let spec = TaskSpec { task: TaskId::ModAdd, modulus: 13, n_train: 120, ..Default::default() };
    let (train, test) = match gen_task(&spec) {
        Ok(v) => v,
        Err(e) => return verdict(false, e.to_string()),
    };
    let (net, log) = match np_run(&train, &modadd_config(train.n()), None) {
        Ok(v) => v,
        Err(e) => return verdict(false, e.to_string()),
    };
    let class = |d: &npcore::Dataset| net.forward_batch(&d.x).and_then(|h| metrics(&h, &d.y, MetricKind::Classification));
    match (class(&train), class(&test)) {
        (Ok(tr), Ok(te)) => verdict(
            tr == 0.0,
            format!("iterations={} width={} train_class_err={tr:.4} test_class_err={te:.4}", log.records.len(), net.widths()[1]),
        ),
        (Err(e), _) | (_, Err(e)) => verdict(false, e.to_string()),
    }
}

fn main() -> ExitCode {
    let mut r = Runner { failed: Vec::new() };
    r.check("1", secs(10), gradients);
    r.check("2", secs(5), euler);
    r.check("3", secs(1), trajectory_scaling);
    r.check("4", secs(10), decomposition_scaling);
    r.check("5", secs(30), balancedness);

    let t = Instant::now();
    let cfg = SimConfig::default();
    let run = run_saddle(&cfg);
    let took = t.elapsed();
    match &run {
        Ok((_, s)) => {
            r.report("6", secs(300), took, saddle_window(s, cfg.delta));
            r.report("7", secs(600), took, beyond_saddle(s));
        }
        Err(e) => {
            r.report("6", secs(300), took, verdict(false, e.to_string()));
            r.report("7", secs(600), took, verdict(false, e.to_string()));
        }
    }

    r.check("8a", secs(60), sum_flow_quadratic);
    r.check("8b", secs(60), sum_flow_quartic);

    let t = Instant::now();
    let f1 = gen_task(&TaskSpec::default()).and_then(|(train, test)| {
        let (net, log) = np_run(&train, &f1_config(), None)?;
        let tr = metrics(&net.forward_batch(&train.x)?, &train.y, MetricKind::Relative)?;
        let te = metrics(&net.forward_batch(&test.x)?, &test.y, MetricKind::Relative)?;
        Ok((log, tr, te))
    });
    let took = t.elapsed();
    match &f1 {
        Ok((log, tr, te)) => {
            r.report("9", secs(1800), took, descent(log));
            r.report("10", secs(1800), took, f1_learned(log, *tr, *te));
        }
        Err(e) => {
            r.report("9", secs(1800), took, verdict(false, e.to_string()));
            r.report("10", secs(1800), took, verdict(false, e.to_string()));
        }
    }

    r.check("11", secs(60), omp_equivalence);
    r.check("12", secs(5), rebalancing);
    r.check("13", secs(1800), modular_addition);

    if r.failed.is_empty() {
        println!("all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", r.failed.join(", "));
        ExitCode::FAILURE
    }
}
