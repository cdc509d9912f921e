// SPDX-License-Identifier: Apache-2.0

//! Neuron Pursuit: grow a network one neuron at a time along the dominant
//! KKT point of the residual's neural correlation function, then retrain.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::act::Activation;
use crate::decomp::{zero_ncf_probe, LayerNcf, ZERO_NCF_TOL};
use crate::error::{invalid, Error, Result};
use crate::mat::{norm, Mat};
use crate::ncf::{pga_maximize, AscentConfig, NetNcf, NcfObjective};
use crate::net::{Dataset, GradientSet, Net};
use crate::tasks::{metrics, MetricKind};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Halving {
    /// Steps between loss checkpoints.
    pub window: usize,
    pub max_halvings: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GdConfig {
    pub lr: f64,
    pub iters: usize,
    pub halving: Option<Halving>,
    /// Stop once the gradient norm drops to this value.
    pub grad_tol: Option<f64>,
}

impl Default for GdConfig {
    fn default() -> Self {
        GdConfig { lr: 0.005, iters: 70_000, halving: None, grad_tol: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GdReport {
    pub steps: usize,
    pub loss_initial: f64,
    pub loss_final: f64,
    pub grad_norm: f64,
    pub lr_final: f64,
    pub halvings: usize,
    /// The run ended above its starting loss and the start was restored.
    pub restored: bool,
    /// A non-finite loss was seen.
    pub nonfinite: bool,
}

/// Which first-layer connections a neuron may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Connectivity {
    Dense,
    /// Two-layer network where hidden neuron `j` reads a single input
    /// coordinate and each coordinate hosts at most one neuron.
    Diagonal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case", tag = "kind", content = "value"))]
pub enum StopRule {
    Loss(f64),
    /// `||Y - H|| / ||Y||` on the training set.
    RelError(f64),
    /// Fraction of argmax mismatches on the training set.
    ClassError(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case", tag = "kind", content = "value"))]
pub enum LaterDelta {
    /// `delta = c * ||w||`.
    Relative(f64),
    Absolute(f64),
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct NPConfig {
    pub depth: usize,
    pub act: Activation,
    pub connectivity: Connectivity,
    /// First-stage delta and its backoff budget.
    pub delta0: f64,
    pub init_backoffs: usize,
    pub later_delta: LaterDelta,
    pub later_backoffs: usize,
    pub backoff: f64,
    pub ascent: AscentConfig,
    /// Ascent settings for the first stage; `ascent` when absent.
    pub init_ascent: Option<AscentConfig>,
    pub gd: GdConfig,
    pub stop: StopRule,
    /// Total iterations, counting the first stage.
    pub max_iters: usize,
    pub rebalance: bool,
    /// Random directions used by the zero-NCF probe.
    pub probe_samples: usize,
}

impl Default for NPConfig {
    fn default() -> Self {
        NPConfig {
            depth: 3,
            act: Activation::relu(),
            connectivity: Connectivity::Dense,
            delta0: 0.25,
            init_backoffs: 4,
            later_delta: LaterDelta::Relative(0.01),
            later_backoffs: 10,
            backoff: 0.8,
            ascent: AscentConfig::default(),
            init_ascent: None,
            gd: GdConfig::default(),
            stop: StopRule::RelError(1e-3),
            max_iters: 31,
            rebalance: false,
            probe_samples: 16,
        }
    }
}

impl NPConfig {
    /// Diagonal two-layer linear network, one neuron per input coordinate,
    /// small fixed step sizes.
    pub fn diagonal() -> Self {
        NPConfig {
            depth: 2,
            act: Activation::linear(),
            connectivity: Connectivity::Diagonal,
            delta0: 0.01,
            later_delta: LaterDelta::Absolute(0.01),
            ascent: AscentConfig { restarts: 4, steps: 500, ..Default::default() },
            gd: GdConfig { lr: 1e-3, iters: 400_000, halving: None, grad_tol: Some(1e-10) },
            stop: StopRule::RelError(1e-6),
            max_iters: 3,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(invalid("depth must be >= 2"));
        }
        if self.connectivity == Connectivity::Diagonal && (self.depth != 2 || !self.act.is_linear()) {
            return Err(invalid("diagonal connectivity needs a two-layer linear network"));
        }
        if !(self.delta0 > 0.0) {
            return Err(invalid("delta0 must be positive"));
        }
        if !(self.backoff > 0.0 && self.backoff < 1.0) {
            return Err(invalid("backoff must lie in (0, 1)"));
        }
        match self.later_delta {
            LaterDelta::Relative(c) | LaterDelta::Absolute(c) if !(c > 0.0) => {
                return Err(invalid("later delta must be positive"));
            }
            _ => {}
        }
        if !(self.gd.lr >= 0.0) {
            return Err(invalid("gd learning rate must be non-negative"));
        }
        if self.max_iters == 0 {
            return Err(invalid("max_iters must be >= 1"));
        }
        self.ascent.validate()?;
        if let Some(a) = &self.init_ascent {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DeltaChoice {
    pub delta: f64,
    pub backoffs: usize,
    pub loss: f64,
}

/// Shrink `delta` by `backoff` until `loss_probe(delta) < loss_before`, trying
/// at most `1 + max_backoffs` values.
pub fn choose_delta(
    mut loss_probe: impl FnMut(f64) -> f64,
    loss_before: f64,
    delta0: f64,
    backoff: f64,
    max_backoffs: usize,
) -> Result<DeltaChoice> {
    if !(delta0 > 0.0) {
        return Err(invalid("delta0 must be positive"));
    }
    let mut delta = delta0;
    let mut last = f64::NAN;
    for k in 0..=max_backoffs {
        last = loss_probe(delta);
        if last < loss_before {
            return Ok(DeltaChoice { delta, backoffs: k, loss: last });
        }
        delta *= backoff;
    }
    Err(Error::DeltaExhausted { tries: max_backoffs + 1, loss_before, loss_probe: last })
}

fn apply_mask(g: &mut GradientSet, mask: Option<&[Mat]>) {
    if let Some(mask) = mask {
        for (gw, m) in g.0.iter_mut().zip(mask) {
            for (v, keep) in gw.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *v *= keep;
            }
        }
    }
}

/// Full-batch gradient descent. With `mask`, gradient entries where the mask
/// is 0 are dropped.
pub fn gd_minimize(net: &Net, data: &Dataset, cfg: &GdConfig, mask: Option<&[Mat]>) -> Result<(Net, GdReport)> {
    let start = net.clone();
    let loss_initial = net.loss(data)?;
    let mut cur = net.clone();
    let mut lr = cfg.lr;
    let mut checkpoint = (cur.clone(), loss_initial);
    let mut halvings = 0;
    let mut nonfinite = false;
    let mut steps = 0;
    let mut grad_norm;
    loop {
        let (loss, mut g) = cur.loss_and_grad(data)?;
        apply_mask(&mut g, mask);
        grad_norm = g.norm();
        if !loss.is_finite() || !grad_norm.is_finite() {
            nonfinite = true;
            cur = checkpoint.0.clone();
            match cfg.halving {
                Some(h) if halvings < h.max_halvings => {
                    halvings += 1;
                    lr *= 0.5;
                    continue;
                }
                _ => break,
            }
        }
        if let Some(h) = cfg.halving {
            if steps > 0 && h.window > 0 && steps % h.window == 0 {
                if loss > checkpoint.1 && halvings < h.max_halvings {
                    halvings += 1;
                    lr *= 0.5;
                    cur = checkpoint.0.clone();
                    continue;
                }
                checkpoint = (cur.clone(), loss);
            }
        }
        if steps >= cfg.iters || cfg.grad_tol.is_some_and(|t| grad_norm <= t) {
            break;
        }
        cur.add_scaled(-lr, &g);
        steps += 1;
    }
    let mut loss_final = cur.loss(data)?;
    let mut restored = false;
    if !(loss_final <= loss_initial) {
        cur = start;
        loss_final = loss_initial;
        restored = true;
        let mut g = cur.grad_loss(data)?;
        apply_mask(&mut g, mask);
        grad_norm = g.norm();
    }
    Ok((cur, GdReport { steps, loss_initial, loss_final, grad_norm, lr_final: lr, halvings, restored, nonfinite }))
}

/// Append a hidden neuron to layer `l` (1-based): row `delta a` to `W_l`,
/// column `delta b` to `W_{l+1}`.
pub fn add_neuron(net: &Net, l: usize, a: &[f64], b: &[f64], delta: f64) -> Result<Net> {
    if l == 0 || l >= net.depth() {
        return Err(invalid(format!("layer index {l} outside 1..={}", net.depth() - 1)));
    }
    let (w_in, w_out) = (&net.layers[l - 1], &net.layers[l]);
    if a.len() != w_in.cols() || b.len() != w_out.rows() {
        return Err(crate::error::shape("candidate (a, b) does not match the adjacent widths"));
    }
    let mut out = net.clone();
    let da: Vec<f64> = a.iter().map(|v| delta * v).collect();
    let db: Vec<f64> = b.iter().map(|v| delta * v).collect();
    out.layers[l - 1] = w_in.push_row(&da);
    out.layers[l] = w_out.push_col(&db);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RebalanceReport {
    pub sweeps: usize,
    /// Largest `|in^2 - p out^2| / (in^2 + p out^2)` after the last sweep,
    /// over neurons that could be balanced.
    pub max_imbalance: f64,
    /// Neurons with exactly one of the two norms zero.
    pub unbalanceable: usize,
}

const REBALANCE_TOL: f64 = 1e-8;
const REBALANCE_SWEEPS: usize = 10_000;

/// Rescale each hidden neuron's incoming weights by `c` and outgoing weights
/// by `c^-p` so that `||in||^2 = p ||out||^2`, sweeping until every neuron is
/// balanced to a relative `1e-8`. The output is unchanged.
pub fn rebalance(net: &Net) -> (Net, RebalanceReport) {
    let mut out = net.clone();
    let p = out.act.p as f64;
    let mut report = RebalanceReport { sweeps: 0, max_imbalance: 0.0, unbalanceable: 0 };
    for sweep in 0..REBALANCE_SWEEPS {
        let mut worst: f64 = 0.0;
        let mut skipped = 0;
        for l in 1..out.depth() {
            for j in 0..out.layers[l - 1].rows() {
                let in2: f64 = out.layers[l - 1].row(j).iter().map(|v| v * v).sum();
                let out2: f64 = out.layers[l].col(j).iter().map(|v| v * v).sum();
                if in2 == 0.0 || out2 == 0.0 {
                    if in2 != out2 {
                        skipped += 1;
                    }
                    continue;
                }
                let gap = (in2 - p * out2).abs() / (in2 + p * out2);
                worst = worst.max(gap);
                if gap == 0.0 {
                    continue;
                }
                let c = libm::pow(p * out2 / in2, 1.0 / (2.0 + 2.0 * p));
                for v in out.layers[l - 1].row_mut(j) {
                    *v *= c;
                }
                let cp = libm::pow(c, -p);
                let w = &mut out.layers[l];
                for i in 0..w.rows() {
                    w[(i, j)] *= cp;
                }
            }
        }
        report = RebalanceReport { sweeps: sweep + 1, max_imbalance: worst, unbalanceable: skipped };
        if worst < REBALANCE_TOL {
            break;
        }
    }
    // `worst` is measured before the final sweep's rescaling; recompute.
    report.max_imbalance = max_imbalance(&out);
    (out, report)
}

/// Largest relative imbalance `|in^2 - p out^2| / (in^2 + p out^2)` over
/// hidden neurons with both norms nonzero.
pub fn max_imbalance(net: &Net) -> f64 {
    let p = net.act.p as f64;
    let mut worst: f64 = 0.0;
    for l in 1..net.depth() {
        for j in 0..net.layers[l - 1].rows() {
            let in2: f64 = net.layers[l - 1].row(j).iter().map(|v| v * v).sum();
            let out2: f64 = net.layers[l].col(j).iter().map(|v| v * v).sum();
            if in2 > 0.0 && out2 > 0.0 {
                worst = worst.max((in2 - p * out2).abs() / (in2 + p * out2));
            }
        }
    }
    worst
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerCandidate {
    /// Hidden layer (1-based) the neuron would join.
    pub layer: usize,
    /// Input coordinate, for diagonal connectivity.
    pub coord: Option<usize>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub value: f64,
    pub kkt_residual: f64,
    pub restart_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SearchResult {
    /// Dominant candidate; `None` on a stall.
    pub best: Option<LayerCandidate>,
    /// Best candidate of every layer (or coordinate).
    pub per_layer: Vec<LayerCandidate>,
    /// Largest `|NCF|` over random unit directions, across layers.
    pub probe: f64,
}

fn search_seed(seed: u64, iter: usize, slot: usize) -> u64 {
    seed ^ ((iter as u64) << 40) ^ ((slot as u64) << 20)
}

fn best_of(obj: &dyn NcfObjective, cfg: &AscentConfig) -> Result<(Vec<f64>, f64, f64, usize)> {
    let cands = pga_maximize(obj, cfg)?;
    let mut best: Option<(Vec<f64>, f64, f64, usize)> = None;
    for c in cands.into_iter().filter(|c| c.valid) {
        let neg: Vec<f64> = c.u.iter().map(|v| -v).collect();
        let nv = obj.value(&neg);
        let (u, v) = if nv > c.value { (neg, nv) } else { (c.u, c.value) };
        let better = match &best {
            None => true,
            Some(b) => v > b.1 || (v == b.1 && c.restart_index < b.3),
        };
        if better {
            best = Some((u, v, c.kkt_residual, c.restart_index));
        }
    }
    best.ok_or_else(|| Error::NonFinite(String::from("every ascent restart diverged")))
}

/// Maximize the single-neuron NCF against `residual` for every hidden layer
/// and return the dominant candidate. `used` lists occupied input coordinates
/// under diagonal connectivity.
pub fn candidate_search(
    net: &Net,
    x: &Mat,
    residual: &Mat,
    cfg: &NPConfig,
    iter: usize,
    used: Option<&[usize]>,
) -> Result<SearchResult> {
    let terms = crate::decomp::layer_terms(net, x, residual)?;
    let mut per_layer = Vec::new();
    let mut probe: f64 = 0.0;
    match used {
        None => {
            for (li, (g, r)) in terms.into_iter().enumerate() {
                let l = li + 1;
                let obj = LayerNcf::new(g, r, net.act)?;
                let acfg = AscentConfig { seed: search_seed(cfg.ascent.seed, iter, l), ..cfg.ascent };
                probe = probe.max(zero_ncf_probe(&obj, cfg.probe_samples, acfg.seed));
                let (u, value, res, restart) = best_of(&obj, &acfg)?;
                let (a, b) = obj.split_u(&u);
                per_layer.push(LayerCandidate {
                    layer: l,
                    coord: None,
                    a: a.to_vec(),
                    b: b.to_vec(),
                    value,
                    kkt_residual: res,
                    restart_index: restart,
                });
            }
        }
        Some(used) => {
            let (g, r) = &terms[0];
            for j in (0..g.rows()).filter(|j| !used.contains(j)) {
                let gj = Mat::from_vec(1, g.cols(), g.row(j).to_vec());
                let obj = LayerNcf::new(gj, r.clone(), net.act)?;
                let acfg = AscentConfig { seed: search_seed(cfg.ascent.seed, iter, j + 1), ..cfg.ascent };
                probe = probe.max(zero_ncf_probe(&obj, cfg.probe_samples, acfg.seed));
                let (u, value, res, restart) = best_of(&obj, &acfg)?;
                let mut a = vec![0.0; g.rows()];
                a[j] = u[0];
                per_layer.push(LayerCandidate {
                    layer: 1,
                    coord: Some(j),
                    a,
                    b: u[1..].to_vec(),
                    value,
                    kkt_residual: res,
                    restart_index: restart,
                });
            }
        }
    }
    // strict `>` keeps the earliest layer (or coordinate) on ties
    let mut best: Option<&LayerCandidate> = None;
    for c in &per_layer {
        if best.is_none_or(|b| c.value > b.value) {
            best = Some(c);
        }
    }
    let best = best.filter(|b| b.value > 0.0 && probe > ZERO_NCF_TOL).cloned();
    Ok(SearchResult { best, per_layer, probe })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Outcome {
    Converged,
    Stalled,
    BudgetExhausted,
    Failed,
}

impl Outcome {
    /// Process exit code used by the command line.
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Converged => 0,
            Outcome::Stalled => 2,
            Outcome::BudgetExhausted => 3,
            Outcome::Failed => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IterRecord {
    /// 1 for the first stage.
    pub iter: usize,
    /// Hidden layer that received the neuron; 0 when the first stage grew
    /// every layer at once.
    pub layer: usize,
    pub coord: Option<usize>,
    pub ncf_value: f64,
    pub kkt_residual: f64,
    /// `|‖a‖^2 - p‖b‖^2|` of the accepted direction.
    pub balance_gap: f64,
    pub delta: f64,
    pub backoffs: usize,
    pub loss_before: f64,
    pub loss_probe: f64,
    pub loss_after: f64,
    pub widths: Vec<usize>,
    pub gd: GdReport,
    pub train_metric: f64,
    pub test_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NPLog {
    pub records: Vec<IterRecord>,
    pub outcome: Option<Outcome>,
    pub message: Option<String>,
    /// Input coordinates hosting each hidden neuron (diagonal connectivity).
    pub coords: Vec<usize>,
}

fn metric_kind(stop: StopRule) -> MetricKind {
    match stop {
        StopRule::ClassError(_) => MetricKind::Classification,
        _ => MetricKind::Relative,
    }
}

fn train_metric(net: &Net, data: &Dataset, stop: StopRule) -> Result<f64> {
    match stop {
        StopRule::Loss(_) => net.loss(data),
        _ => metrics(&net.forward_batch(&data.x)?, &data.y, metric_kind(stop)),
    }
}

fn stop_met(v: f64, stop: StopRule) -> bool {
    match stop {
        StopRule::Loss(t) | StopRule::RelError(t) => v < t,
        StopRule::ClassError(t) => v <= t,
    }
}

fn diag_mask(net: &Net, coords: &[usize]) -> Vec<Mat> {
    let w1 = &net.layers[0];
    let m1 = Mat::from_fn(w1.rows(), w1.cols(), |i, j| if coords[i] == j { 1.0 } else { 0.0 });
    let mut out = vec![m1];
    out.extend(net.layers[1..].iter().map(|w| Mat::from_fn(w.rows(), w.cols(), |_, _| 1.0)));
    out
}

fn balance_gap(a: &[f64], b: &[f64], p: u32) -> f64 {
    let a2: f64 = a.iter().map(|v| v * v).sum();
    let b2: f64 = b.iter().map(|v| v * v).sum();
    (a2 - p as f64 * b2).abs()
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitStage {
    pub net: Net,
    pub record: IterRecord,
}

/// First stage: one neuron per hidden layer, initialized along the dominant
/// KKT point of `<Y, H(X; w)>` and trained by gradient descent.
pub fn np_init_stage(data: &Dataset, cfg: &NPConfig) -> Result<InitStage> {
    cfg.validate()?;
    let mut widths = vec![data.d()];
    widths.extend(core::iter::repeat_n(1, cfg.depth - 1));
    widths.push(data.m());
    let template = Net::zeros(&widths, cfg.act)?;
    let obj = NetNcf::for_dataset(&template, data);
    let acfg = cfg.init_ascent.unwrap_or(cfg.ascent);
    let acfg = AscentConfig { seed: search_seed(acfg.seed, 1, 0), ..acfg };
    let (u, value, res, _) = best_of(&obj, &acfg)?;
    if !(value > 0.0) {
        return Err(Error::NoPositiveKkt { value });
    }
    let dir = template.with_flat(&u);
    let loss0 = template.loss(data)?;
    let choice = choose_delta(
        |d| dir.scaled(d).loss(data).unwrap_or(f64::INFINITY),
        loss0,
        cfg.delta0,
        cfg.backoff,
        cfg.init_backoffs,
    )?;
    let start = dir.scaled(choice.delta);
    let (net, gd) = gd_minimize(&start, data, &cfg.gd, None)?;
    let net = if cfg.rebalance { rebalance(&net).0 } else { net };
    let gap = (1..net.depth()).map(|l| balance_gap(dir.layers[l - 1].as_slice(), dir.layers[l].as_slice(), cfg.act.p)).fold(0.0, f64::max);
    let record = IterRecord {
        iter: 1,
        layer: 0,
        coord: None,
        ncf_value: value,
        kkt_residual: res,
        balance_gap: gap,
        delta: choice.delta,
        backoffs: choice.backoffs,
        loss_before: loss0,
        loss_probe: choice.loss,
        loss_after: net.loss(data)?,
        widths: net.widths(),
        gd,
        train_metric: train_metric(&net, data, cfg.stop)?,
        test_metric: None,
    };
    Ok(InitStage { net, record })
}

fn later_delta(net: &Net, cfg: &NPConfig) -> f64 {
    match cfg.later_delta {
        LaterDelta::Relative(c) => c * net.norm(),
        LaterDelta::Absolute(d) => d,
    }
}

/// One neuron-addition iteration on `net`. Returns `Ok(None)` on a stall.
fn grow_once(
    net: &Net,
    data: &Dataset,
    cfg: &NPConfig,
    iter: usize,
    coords: &mut Vec<usize>,
) -> Result<Option<(Net, IterRecord)>> {
    let diagonal = cfg.connectivity == Connectivity::Diagonal;
    let residual = net.residual(data)?;
    let search = candidate_search(net, &data.x, &residual, cfg, iter, diagonal.then_some(coords.as_slice()))?;
    let Some(c) = search.best else {
        return Ok(None);
    };
    let loss_before = net.loss(data)?;
    let d0 = later_delta(net, cfg);
    let (d0, tries) = if d0 > 0.0 { (d0, cfg.later_backoffs) } else { (cfg.delta0, cfg.init_backoffs) };
    let choice = choose_delta(
        |d| add_neuron(net, c.layer, &c.a, &c.b, d).and_then(|n| n.loss(data)).unwrap_or(f64::INFINITY),
        loss_before,
        d0,
        cfg.backoff,
        tries,
    )?;
    let grown = add_neuron(net, c.layer, &c.a, &c.b, choice.delta)?;
    if let Some(j) = c.coord {
        coords.push(j);
    }
    let mask = diagonal.then(|| diag_mask(&grown, coords));
    let (trained, gd) = gd_minimize(&grown, data, &cfg.gd, mask.as_deref())?;
    let trained = if cfg.rebalance { rebalance(&trained).0 } else { trained };
    let record = IterRecord {
        iter,
        layer: c.layer,
        coord: c.coord,
        ncf_value: c.value,
        kkt_residual: c.kkt_residual,
        balance_gap: balance_gap(&c.a, &c.b, cfg.act.p),
        delta: choice.delta,
        backoffs: choice.backoffs,
        loss_before,
        loss_probe: choice.loss,
        loss_after: trained.loss(data)?,
        widths: trained.widths(),
        gd,
        train_metric: train_metric(&trained, data, cfg.stop)?,
        test_metric: None,
    };
    Ok(Some((trained, record)))
}

/// Run Neuron Pursuit to completion. Errors during the loop end the run with
/// [`Outcome::Failed`] and are described in the log; the returned network is
/// the last accepted one.
pub fn run(data: &Dataset, cfg: &NPConfig, eval: Option<&Dataset>) -> Result<(Net, NPLog)> {
    cfg.validate()?;
    let mut log = NPLog::default();
    let test_metric = |net: &Net| -> Result<Option<f64>> {
        match eval {
            Some(e) => Ok(Some(metrics(&net.forward_batch(&e.x)?, &e.y, metric_kind(cfg.stop))?)),
            None => Ok(None),
        }
    };
    let mut coords = Vec::new();
    let mut net = match cfg.connectivity {
        Connectivity::Dense => match np_init_stage(data, cfg) {
            Ok(mut st) => {
                st.record.test_metric = test_metric(&st.net)?;
                log.records.push(st.record);
                st.net
            }
            Err(e) => {
                let outcome = if matches!(e, Error::NoPositiveKkt { .. }) { Outcome::Stalled } else { Outcome::Failed };
                log.outcome = Some(outcome);
                log.message = Some(format!("{e}"));
                return Ok((Net::zeros(&[data.d(), 1, data.m()], cfg.act)?, log));
            }
        },
        Connectivity::Diagonal => Net::zeros(&[data.d(), 0, data.m()], cfg.act)?,
    };
    let mut iter = log.records.len();
    loop {
        if let Some(r) = log.records.last() {
            if stop_met(r.train_metric, cfg.stop) {
                log.outcome = Some(Outcome::Converged);
                break;
            }
        }
        if iter >= cfg.max_iters {
            log.outcome = Some(Outcome::BudgetExhausted);
            break;
        }
        iter += 1;
        match grow_once(&net, data, cfg, iter, &mut coords) {
            Ok(Some((n, mut rec))) => {
                rec.test_metric = test_metric(&n)?;
                log.records.push(rec);
                net = n;
            }
            Ok(None) => {
                log.outcome = Some(Outcome::Stalled);
                log.message = Some(String::from("no positive candidate (or zero NCF) for the residual"));
                break;
            }
            Err(e) => {
                log.outcome = Some(Outcome::Failed);
                log.message = Some(format!("{e}"));
                break;
            }
        }
    }
    log.coords = coords;
    Ok((net, log))
}

/// Weights `(u, v)` of a diagonal network as per-coordinate products
/// `u_j v_j`, summed over neurons sharing a coordinate.
pub fn diagonal_products(net: &Net, coords: &[usize]) -> Vec<f64> {
    let mut z = vec![0.0; net.input_dim()];
    for (i, &j) in coords.iter().enumerate() {
        z[j] += net.layers[0][(i, j)] * net.layers[1][(0, i)];
    }
    z
}

/// Gradient norm of the loss; used to report how stationary a hand-off is.
pub fn grad_norm(net: &Net, data: &Dataset) -> Result<f64> {
    Ok(norm(&net.grad_loss(data)?.flatten()))
}
