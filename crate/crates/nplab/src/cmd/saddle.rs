// SPDX-License-Identifier: Apache-2.0

use npcore::saddle::{homog_sum_flow, HomogBlockSpec, SumFlowConfig};
use npcore::Mat;
use serde::{Deserialize, Serialize};

use super::Ctx;
use crate::experiments::{run_saddle, SimConfig};
use crate::io::{self, num};
use crate::CliError;

const TRAJ_HEADER: [&str; 7] = ["iter", "loss", "loss_ratio", "dist_to_saddle", "wz_norm", "alignment", "kkt_residual"];

pub fn simulate(ctx: &Ctx) -> Result<String, CliError> {
    let (mut cfg, raw) = io::load_config::<SimConfig>(ctx.global.config.as_deref())?;
    if let Some(s) = ctx.global.seed {
        cfg.seed = s;
        cfg.teacher.seed = s;
    }
    let (log, summary) = run_saddle(&cfg)?;
    if let Some(p) = ctx.path("trajectory.csv") {
        let rows: Vec<Vec<String>> = log
            .records
            .iter()
            .map(|r| {
                vec![
                    r.iter.to_string(),
                    num(r.loss),
                    num(r.loss_ratio),
                    num(r.dist_to_saddle),
                    num(r.wz_norm),
                    r.alignment.map_or(String::new(), num),
                    num(r.kkt_residual),
                ]
            })
            .collect();
        io::write_csv(&p, &TRAJ_HEADER, &rows)?;
    }
    if let Some(p) = ctx.path("neurons.csv") {
        let mut rows = Vec::new();
        for r in &log.records {
            for (l, (ins, outs)) in r.neuron_in.iter().zip(&r.neuron_out).enumerate() {
                for (j, (a, b)) in ins.iter().zip(outs).enumerate() {
                    rows.push(vec![r.iter.to_string(), (l + 1).to_string(), j.to_string(), num(*a), num(*b)]);
                }
            }
        }
        io::write_csv(&p, &["iter", "layer", "inactive_index", "in_norm", "out_norm"], &rows)?;
    }
    ctx.finish(&raw, &summary)?;
    if summary.diverged {
        return Err(CliError::Numerical("loss diverged".into()));
    }
    Ok(format!(
        "OK window={:?} max_dist={:.4} alignment={} escape={:?} plateau={:?}",
        summary.window,
        summary.window_max_dist,
        summary.window_end_alignment.map_or("n/a".into(), |a| format!("{a:.4}")),
        summary.escape_iter,
        summary.plateau_iter
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub degree: u32,
    pub a: Vec<Vec<f64>>,
    pub w0: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SumflowConfig {
    pub blocks: Vec<BlockConfig>,
    pub dt: f64,
    /// `null` disables the cap.
    pub norm_cap: Option<f64>,
    pub t_max: f64,
    pub max_growth: f64,
    pub max_steps: usize,
}

impl Default for SumflowConfig {
    fn default() -> Self {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        SumflowConfig {
            blocks: vec![
                BlockConfig { degree: 2, a: vec![vec![3.0, 0.0], vec![0.0, 0.5]], w0: vec![s, s] },
                BlockConfig { degree: 2, a: vec![vec![1.0, 0.0], vec![0.0, 0.2]], w0: vec![s, s] },
            ],
            dt: 1e-3,
            norm_cap: None,
            t_max: 5.0,
            max_growth: 0.1,
            max_steps: 10_000_000,
        }
    }
}

pub fn blocks_from(cfg: &[BlockConfig]) -> Result<Vec<HomogBlockSpec>, CliError> {
    cfg.iter()
        .enumerate()
        .map(|(i, b)| {
            let n = b.a.len();
            if b.a.iter().any(|r| r.len() != n) {
                return Err(CliError::Config(format!("field `blocks[{i}].a` must be square")));
            }
            Ok(HomogBlockSpec { degree: b.degree, a: Mat::from_fn(n, n, |r, c| b.a[r][c]), w0: b.w0.clone() })
        })
        .collect()
}

#[derive(Serialize)]
struct SumflowSummary {
    stop_time: f64,
    shares: Vec<f64>,
    blowup: Vec<Option<f64>>,
    brackets: Vec<Option<(f64, f64)>>,
    directions: Vec<Vec<f64>>,
    sphere_value_monotone: bool,
    steps: usize,
}

pub fn sumflow(ctx: &Ctx) -> Result<String, CliError> {
    let (cfg, raw) = io::load_config::<SumflowConfig>(ctx.global.config.as_deref())?;
    let blocks = blocks_from(&cfg.blocks)?;
    let fc = SumFlowConfig {
        dt: cfg.dt,
        norm_cap: cfg.norm_cap.unwrap_or(f64::INFINITY),
        t_max: cfg.t_max,
        max_growth: cfg.max_growth,
        max_steps: cfg.max_steps,
    };
    let rep = homog_sum_flow(&blocks, &fc)?;
    if let Some(p) = ctx.path("curve.csv") {
        let head: Vec<String> = std::iter::once("t".to_string()).chain((0..blocks.len()).map(|i| format!("norm{i}"))).collect();
        let head: Vec<&str> = head.iter().map(|s| s.as_str()).collect();
        let rows: Vec<Vec<String>> =
            rep.curve.iter().map(|(t, ns)| std::iter::once(num(*t)).chain(ns.iter().map(|v| num(*v))).collect()).collect();
        io::write_csv(&p, &head, &rows)?;
    }
    let summary = SumflowSummary {
        stop_time: rep.stop_time,
        shares: rep.shares.clone(),
        blowup: rep.blowup.clone(),
        brackets: blocks.iter().map(|b| b.blowup_bracket()).collect(),
        directions: rep.directions.clone(),
        sphere_value_monotone: rep.sphere_value_monotone,
        steps: rep.curve.len() - 1,
    };
    ctx.finish(&raw, &summary)?;
    Ok(format!("OK t={:.6} shares={:?} blowup={:?}", rep.stop_time, rep.shares, rep.blowup))
}
