// SPDX-License-Identifier: Apache-2.0

//! Subcommand implementations. Each returns the one-line verdict printed on
//! success; errors carry their exit code.

mod bench;
mod np;
mod saddle;

use std::path::{Path, PathBuf};
use std::time::Instant;

use npcore::decomp::LayerNcf;
use npcore::ncf::pga_maximize;
use npcore::pursuit::{diagonal_products, run as np_run, NPConfig};
use npcore::tasks::{diag_dataset, diag_instance, omp_reference};
use npcore::AscentConfig;
use serde::{Deserialize, Serialize};

use crate::cli::{BenchCmd, CheckCmd, Global, GradCmd, Group, NcfCmd, NpCmd, OmpCmd, SaddleCmd};
use crate::io::{self, write_json};
use crate::{checks, CliError};

pub struct Ctx {
    pub global: Global,
    started: Instant,
}

impl Ctx {
    pub fn new(global: Global) -> Self {
        Ctx { global, started: Instant::now() }
    }

    pub fn out(&self) -> Option<&Path> {
        self.global.out.as_deref()
    }

    pub fn require_out(&self) -> Result<&Path, CliError> {
        self.out().ok_or_else(|| CliError::Usage("this subcommand needs --out <dir>".into()))
    }

    /// Echo the raw config, write `summary.json`, and put timing in
    /// `meta.json` so that summaries stay byte-identical across reruns.
    pub fn finish<T: Serialize>(&self, raw_config: &str, summary: &T) -> Result<(), CliError> {
        let Some(dir) = self.out() else {
            if !self.global.quiet {
                println!("{}", serde_json::to_string_pretty(summary).expect("summary serializes"));
            }
            return Ok(());
        };
        io::write_atomic(&dir.join("config.json"), raw_config)?;
        write_json(&dir.join("summary.json"), summary)?;
        let meta = serde_json::json!({
            "nplab_version": env!("CARGO_PKG_VERSION"),
            "elapsed_secs": self.started.elapsed().as_secs_f64(),
            "seed_override": self.global.seed,
        });
        write_json(&dir.join("meta.json"), &meta)
    }

    pub fn path(&self, name: &str) -> Option<PathBuf> {
        self.out().map(|d| d.join(name))
    }
}

pub fn dispatch(cmd: Group, ctx: &Ctx) -> Result<String, CliError> {
    match cmd {
        Group::Np(NpCmd::Run) => np::run(ctx),
        Group::Np(NpCmd::Eval { net, data, metric }) => np::eval(ctx, &net, &data, &metric),
        Group::Ncf(NcfCmd::Maximize) => ncf_maximize(ctx),
        Group::Saddle(SaddleCmd::Simulate) => saddle::simulate(ctx),
        Group::Saddle(SaddleCmd::Sumflow) => saddle::sumflow(ctx),
        Group::Decomp(CheckCmd::Check) => decomp_check(ctx),
        Group::Grad(GradCmd::Check { count }) => grad_check(ctx, count),
        Group::Omp(OmpCmd::Compare) => omp_compare(ctx),
        Group::Bench(BenchCmd::Gen) => bench::gen(ctx),
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct NcfConfig {
    net: Option<PathBuf>,
    data: Option<PathBuf>,
    /// Hidden layer that would receive the neuron, `1..L-1`.
    layer: usize,
    ascent: AscentConfig,
}

#[derive(Serialize)]
struct NcfSummary {
    layer: usize,
    best_value: f64,
    best_kkt_residual: f64,
    best_balance_gap: f64,
    candidates: Vec<npcore::KktCandidate>,
}

fn required<'a>(p: &'a Option<PathBuf>, field: &str) -> Result<&'a Path, CliError> {
    p.as_deref().ok_or_else(|| CliError::Config(format!("field `{field}` is required")))
}

fn ncf_maximize(ctx: &Ctx) -> Result<String, CliError> {
    let (mut cfg, raw) = io::load_config::<NcfConfig>(ctx.global.config.as_deref())?;
    if let Some(s) = ctx.global.seed {
        cfg.ascent.seed = s;
    }
    let net = io::read_net(required(&cfg.net, "net")?)?;
    let data = io::read_dataset(required(&cfg.data, "data")?)?;
    let residual = net.residual(&data)?;
    let obj = LayerNcf::from_net(&net, &data.x, &residual, cfg.layer)?;
    let cands = pga_maximize(&obj, &cfg.ascent)?;
    let best = cands.first().ok_or_else(|| CliError::Numerical("ascent produced no candidates".into()))?;
    let (a, b) = obj.split_u(&best.u);
    let (a2, b2) = (npcore::mat::dot(a, a), net.act.p as f64 * npcore::mat::dot(b, b));
    let summary = NcfSummary {
        layer: cfg.layer,
        best_value: best.value,
        best_kkt_residual: best.kkt_residual,
        best_balance_gap: (a2 - b2).abs() / (a2 + b2).max(f64::MIN_POSITIVE),
        candidates: cands.clone(),
    };
    ctx.finish(&raw, &summary)?;
    if !(summary.best_value > 0.0) {
        return Err(CliError::Stall(format!("no positive KKT point (best value {:e})", summary.best_value)));
    }
    Ok(format!(
        "OK value={:.6e} kkt_residual={:.2e} balance_gap={:.2e}",
        summary.best_value, summary.best_kkt_residual, summary.best_balance_gap
    ))
}

#[derive(Serialize)]
struct DecompSummary {
    square_slope: Option<f64>,
    linear_slope: Option<f64>,
    linear_remainder_zero: bool,
    pass: bool,
}

fn decomp_check(ctx: &Ctx) -> Result<String, CliError> {
    let seed = ctx.global.seed.unwrap_or(0);
    let (sq, li) = checks::scaling_fits(seed);
    let square_slope = sq.as_ref().ok().map(|f| f.slope);
    let linear_remainder_zero = matches!(li, Err(npcore::Error::RemainderZero));
    let linear_slope = li.as_ref().ok().map(|f| f.slope);
    let pass = square_slope.is_some_and(|s| s >= 4.7) && (linear_remainder_zero || linear_slope.is_some_and(|s| s > 2.0));
    let summary = DecompSummary { square_slope, linear_slope, linear_remainder_zero, pass };
    ctx.finish(&format!("{{\"seed\": {seed}}}\n"), &summary)?;
    let line = format!(
        "square_slope={} linear={}",
        square_slope.map_or("n/a".into(), |s| format!("{s:.3}")),
        if linear_remainder_zero { "remainder-zero".to_string() } else { linear_slope.map_or("n/a".into(), |s| format!("{s:.3}")) }
    );
    if pass {
        Ok(format!("PASS {line}"))
    } else {
        Err(CliError::Numerical(format!("FAIL {line}")))
    }
}

#[derive(Serialize)]
struct GradSummary {
    grad: checks::GradSuite,
    euler: checks::EulerSuite,
    pass: bool,
}

fn grad_check(ctx: &Ctx, count: usize) -> Result<String, CliError> {
    let seed = ctx.global.seed.unwrap_or(0);
    let grad = checks::grad_suite(seed, count);
    let euler = checks::euler_suite(seed, count);
    let pass = grad.max_rel_err < 1e-6 && euler.max_euler_rel < 1e-9 && euler.max_scaling_rel < 1e-9;
    let line = format!("rel_err={:.3e} euler_rel={:.3e} nets={}", grad.max_rel_err, euler.max_euler_rel, grad.nets);
    ctx.finish(&format!("{{\"seed\": {seed}, \"count\": {count}}}\n"), &GradSummary { grad, euler, pass })?;
    if pass {
        Ok(format!("PASS {line}"))
    } else {
        Err(CliError::Numerical(format!("FAIL {line}")))
    }
}

#[derive(Serialize)]
struct OmpSummary {
    np_support: Vec<usize>,
    omp_support: Vec<usize>,
    np_products: Vec<f64>,
    omp_coefs: Vec<f64>,
    max_abs_diff: f64,
    np_l1: f64,
    supports_match: bool,
    outcome: npcore::pursuit::Outcome,
}

fn omp_compare(ctx: &Ctx) -> Result<String, CliError> {
    let (mut cfg, raw) = match ctx.global.config.as_deref() {
        Some(_) => io::load_config::<NPConfig>(ctx.global.config.as_deref())?,
        None => {
            let c = NPConfig::diagonal();
            let raw = serde_json::to_string_pretty(&c).expect("config serializes");
            (c, raw)
        }
    };
    if let Some(s) = ctx.global.seed {
        cfg.ascent.seed = s;
    }
    let (x, b) = diag_instance();
    let omp = omp_reference(&x, &b, x.rows().min(x.cols()))?;
    let (net, log) = np_run(&diag_dataset(), &cfg, None)?;
    let np_support: Vec<usize> = log.records.iter().filter_map(|r| r.coord).collect();
    let np_products = diagonal_products(&net, &log.coords);
    let max_abs_diff = np_products.iter().zip(&omp.coefs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let summary = OmpSummary {
        supports_match: np_support == omp.support,
        np_l1: np_products.iter().map(|v| v.abs()).sum(),
        np_support,
        omp_support: omp.support.clone(),
        np_products,
        omp_coefs: omp.coefs.clone(),
        max_abs_diff,
        outcome: log.outcome.unwrap_or(npcore::pursuit::Outcome::Failed),
    };
    ctx.finish(&raw, &summary)?;
    let line = format!("support={:?} max_abs_diff={:.2e}", summary.np_support, summary.max_abs_diff);
    if summary.supports_match && max_abs_diff < 1e-2 {
        Ok(format!("MATCH {line}"))
    } else {
        Err(CliError::Numerical(format!("MISMATCH {line}")))
    }
}
