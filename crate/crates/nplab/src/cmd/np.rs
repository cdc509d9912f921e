// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};

use npcore::pursuit::{run as np_run, IterRecord, NPConfig, Outcome};
use npcore::tasks::{gen_task, metrics, MetricKind, TaskSpec};
use npcore::{Dataset, Net};
use serde::{Deserialize, Serialize};

use super::Ctx;
use crate::io::{self, num};
use crate::CliError;

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NpRunConfig {
    /// Generated when `train` is absent.
    pub task: TaskSpec,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub np: NPConfig,
    /// Divide `np.gd.lr` by the number of training samples, so that step
    /// sizes tuned for the mean loss carry over to the summed loss.
    pub lr_per_sample: bool,
}

impl Default for NpRunConfig {
    fn default() -> Self {
        NpRunConfig { task: TaskSpec::default(), train: None, test: None, np: NPConfig::default(), lr_per_sample: true }
    }
}

#[derive(Serialize)]
struct RunSummary {
    outcome: Outcome,
    exit_code: i32,
    message: Option<String>,
    iterations: usize,
    widths: Vec<usize>,
    train_metric: Option<f64>,
    test_metric: Option<f64>,
    records: Vec<IterRecord>,
}

fn datasets(cfg: &NpRunConfig) -> Result<(Dataset, Option<Dataset>), CliError> {
    match &cfg.train {
        Some(p) => Ok((io::read_dataset(p)?, cfg.test.as_deref().map(io::read_dataset).transpose()?)),
        None => {
            let (tr, te) = gen_task(&cfg.task)?;
            Ok((tr, (te.n() > 0).then_some(te)))
        }
    }
}

const CSV_HEADER: [&str; 14] = [
    "iter", "layer", "ncf_value", "kkt_residual", "delta", "backoffs", "loss_before", "loss_probe", "loss_after",
    "gd_steps", "grad_norm", "train_metric", "test_metric", "widths",
];

fn csv_row(r: &IterRecord) -> Vec<String> {
    vec![
        r.iter.to_string(),
        r.layer.to_string(),
        num(r.ncf_value),
        num(r.kkt_residual),
        num(r.delta),
        r.backoffs.to_string(),
        num(r.loss_before),
        num(r.loss_probe),
        num(r.loss_after),
        r.gd.steps.to_string(),
        num(r.gd.grad_norm),
        num(r.train_metric),
        r.test_metric.map_or(String::new(), num),
        r.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("-"),
    ]
}

pub fn run(ctx: &Ctx) -> Result<String, CliError> {
    let (mut cfg, raw) = io::load_config::<NpRunConfig>(ctx.global.config.as_deref())?;
    if let Some(s) = ctx.global.seed {
        cfg.task.seed = s;
        cfg.np.ascent.seed = s;
    }
    let (train, test) = datasets(&cfg)?;
    let mut np = cfg.np.clone();
    if cfg.lr_per_sample {
        np.gd.lr /= train.n() as f64;
    }
    np.validate()?;
    let (net, log) = np_run(&train, &np, test.as_ref())?;
    let outcome = log.outcome.unwrap_or(Outcome::Failed);
    let last = log.records.last();
    let summary = RunSummary {
        outcome,
        exit_code: outcome.exit_code(),
        message: log.message.clone(),
        iterations: log.records.len(),
        widths: net.widths(),
        train_metric: last.map(|r| r.train_metric),
        test_metric: last.and_then(|r| r.test_metric),
        records: log.records.clone(),
    };
    if let Some(p) = ctx.path("iterations.csv") {
        io::write_csv(&p, &CSV_HEADER, &log.records.iter().map(csv_row).collect::<Vec<_>>())?;
    }
    if let Some(p) = ctx.path("net.json") {
        io::write_atomic(&p, &io::net_to_json(&net))?;
    }
    ctx.finish(&raw, &summary)?;
    let line = format!(
        "iters={} widths={:?} train={} test={}",
        summary.iterations,
        summary.widths,
        summary.train_metric.map_or("n/a".into(), |v| format!("{v:.4e}")),
        summary.test_metric.map_or("n/a".into(), |v| format!("{v:.4e}")),
    );
    match outcome {
        Outcome::Converged => Ok(format!("CONVERGED {line}")),
        Outcome::Stalled => Err(CliError::Stall(format!("{line} ({})", log.message.unwrap_or_default()))),
        Outcome::BudgetExhausted => Err(CliError::Budget(line)),
        Outcome::Failed => Err(CliError::Numerical(format!("{line} ({})", log.message.unwrap_or_default()))),
    }
}

#[derive(Serialize)]
struct EvalSummary {
    metric: String,
    value: f64,
    loss: f64,
    n: usize,
}

pub fn eval(ctx: &Ctx, net: &Path, data: &Path, metric: &str) -> Result<String, CliError> {
    let kind = match metric {
        "relative" => MetricKind::Relative,
        "classification" => MetricKind::Classification,
        other => return Err(CliError::Usage(format!("unknown metric `{other}`"))),
    };
    let net: Net = io::read_net(net)?;
    let data = io::read_dataset(data)?;
    let value = metrics(&net.forward_batch(&data.x)?, &data.y, kind)?;
    let s = EvalSummary { metric: metric.into(), value, loss: net.loss(&data)?, n: data.n() };
    let raw = serde_json::json!({ "metric": metric }).to_string();
    ctx.finish(&raw, &s)?;
    Ok(format!("{metric}={value:.6e} loss={:.6e}", s.loss))
}
