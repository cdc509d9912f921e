// SPDX-License-Identifier: Apache-2.0

//! Sparse saddle points, gradient descent started near them, and the
//! decoupled homogeneous flows that model the escape.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::act::Activation;
use crate::decomp::{wz_flatten, Partition, WzNcf};
use crate::error::{invalid, shape, Error, Result};
use crate::mat::{dot, norm, Mat};
use crate::ncf::kkt_metrics;
use crate::net::{Dataset, Net};
use crate::pursuit::{gd_minimize, np_init_stage, GdConfig, NPConfig};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SaddleSpec {
    pub net: Net,
    pub partition: Partition,
    pub loss_at_saddle: f64,
}

/// `||grad|| <= 1e-8 (1 + loss)`.
pub const SADDLE_GRAD_TOL: f64 = 1e-8;

fn check_stationary(net: &Net, data: &Dataset, tol: f64) -> Result<f64> {
    let (loss, g) = net.loss_and_grad(data)?;
    let gn = g.norm();
    if gn > tol * (1.0 + loss) {
        return Err(Error::NotStationary { grad_norm: gn, tol: tol * (1.0 + loss) });
    }
    Ok(loss)
}

/// Three-layer linear saddle built from the top singular triple of `s`, with
/// inputs `X = I` and labels `Y = S`.
pub fn make_linear_saddle(s: &Mat) -> Result<(SaddleSpec, Dataset)> {
    let d = s.rows();
    if s.cols() != d || d < 2 {
        return Err(shape("S must be square with d >= 2"));
    }
    let m = DMatrix::from_fn(d, d, |i, j| s[(i, j)]);
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.as_ref().unwrap(), svd.v_t.as_ref().unwrap());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].partial_cmp(&svd.singular_values[a]).unwrap());
    let (k, s1, s2) = (order[0], svd.singular_values[order[0]], svd.singular_values[order[1]]);
    if s1 - s2 <= 1e-10 {
        return Err(Error::SingularValueTie { gap: s1 - s2 });
    }
    let c = libm::cbrt(s1);
    let mut w1 = Mat::zeros(d, d);
    let mut w2 = Mat::zeros(d, d);
    let mut w3 = Mat::zeros(d, d);
    for j in 0..d {
        w1[(0, j)] = c * vt[(k, j)];
        w3[(j, 0)] = c * u[(j, k)];
    }
    w2[(0, 0)] = c;
    let net = Net::new(vec![w1, w2, w3], Activation::linear())?;
    let data = Dataset::new(Mat::identity(d), s.clone())?;
    let loss = check_stationary(&net, &data, SADDLE_GRAD_TOL)?;
    Ok((SaddleSpec { net, partition: Partition::new(vec![1, 1]), loss_at_saddle: loss }, data))
}

/// Squared-ReLU saddle in dimension `d` on the two samples `+-1/d`, both
/// labelled 1; the first is fit exactly, the second not at all.
pub fn make_sq_relu_saddle(d: usize) -> Result<(SaddleSpec, Dataset)> {
    if d < 2 {
        return Err(invalid("d must be >= 2"));
    }
    let mut w1 = Mat::zeros(d, d);
    for j in 0..d {
        w1[(0, j)] = 1.0;
    }
    let mut w2 = Mat::zeros(d, d);
    w2[(0, 0)] = 1.0;
    let mut w3 = Mat::zeros(1, d);
    w3[(0, 0)] = 1.0;
    let net = Net::new(vec![w1, w2, w3], Activation { p: 2, alpha: 0.0 })?;
    let inv = 1.0 / d as f64;
    let x = Mat::from_fn(d, 2, |_, j| if j == 0 { inv } else { -inv });
    let data = Dataset::new(x, Mat::from_rows(&[&[1.0, 1.0]]))?;
    let loss = check_stationary(&net, &data, SADDLE_GRAD_TOL)?;
    Ok((SaddleSpec { net, partition: Partition::new(vec![1, 1]), loss_at_saddle: loss }, data))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedSaddleConfig {
    /// Settings of the one-neuron-per-layer stage; only `ascent`, `delta0`,
    /// the backoff fields and `gd` are used.
    pub np: NPConfig,
    /// Extra descent used to polish the narrow net to `grad_tol`.
    pub polish: GdConfig,
    pub grad_tol: f64,
}

impl Default for TrainedSaddleConfig {
    fn default() -> Self {
        TrainedSaddleConfig {
            np: NPConfig::default(),
            polish: GdConfig { lr: 1e-3, iters: 1_000_000, halving: None, grad_tol: Some(1e-7) },
            grad_tol: 1e-7,
        }
    }
}

/// Embed `narrow` (one neuron per hidden layer) as the leading block of a
/// network with the given hidden widths; every other weight is zero.
pub fn embed(narrow: &Net, hidden: &[usize]) -> Result<Net> {
    let nw = narrow.widths();
    if hidden.len() + 2 != nw.len() || hidden.iter().zip(&nw[1..]).any(|(k, p)| k < p) {
        return Err(shape("hidden widths must cover the narrow network"));
    }
    let mut widths = vec![nw[0]];
    widths.extend_from_slice(hidden);
    widths.push(nw[nw.len() - 1]);
    let mut net = Net::zeros(&widths, narrow.act)?;
    for (w, n) in net.layers.iter_mut().zip(&narrow.layers) {
        w.set_block(0, 0, n);
    }
    Ok(net)
}

/// Train a one-neuron-per-layer network to stationarity and embed it in a
/// network with hidden widths `hidden`, the remaining weights zero.
pub fn make_trained_saddle(data: &Dataset, depth: usize, hidden: &[usize], act: Activation, cfg: &TrainedSaddleConfig) -> Result<SaddleSpec> {
    if hidden.len() + 1 != depth || hidden.iter().any(|k| *k < 2) {
        return Err(invalid("need depth - 1 hidden widths, each >= 2"));
    }
    let np = NPConfig { depth, act, ..cfg.np.clone() };
    let stage = np_init_stage(data, &np)?;
    let (narrow, rep) = gd_minimize(&stage.net, data, &cfg.polish, None)?;
    if rep.grad_norm > cfg.grad_tol {
        return Err(Error::NotStationary { grad_norm: rep.grad_norm, tol: cfg.grad_tol });
    }
    let net = embed(&narrow, hidden)?;
    let loss_at_saddle = net.loss(data)?;
    Ok(SaddleSpec { net, partition: Partition::new(vec![1; depth - 1]), loss_at_saddle })
}

fn wn_indices(net: &Net, part: &Partition) -> Vec<(usize, usize, usize)> {
    let p = part.extended(net);
    let mut out = Vec::new();
    for (l, w) in net.layers.iter().enumerate() {
        for i in 0..p[l + 1].min(w.rows()) {
            for j in 0..p[l].min(w.cols()) {
                out.push((l, i, j));
            }
        }
    }
    out
}

/// `w_n <- w_n + delta n`, `w_z <- delta z` with independent unit `n`, `z`.
pub fn perturb(saddle: &SaddleSpec, delta: f64, seed: u64) -> Result<Net> {
    if !(delta >= 0.0) {
        return Err(invalid("delta must be non-negative"));
    }
    let net = &saddle.net;
    let wn = wn_indices(net, &saddle.partition);
    let wz = saddle.partition.wz_indices(net);
    let mut r = rng::rng(seed);
    let n = rng::unit_sphere(&mut r, wn.len());
    let z = rng::unit_sphere(&mut r, wz.len());
    let mut out = net.clone();
    for ((l, i, j), v) in wn.into_iter().zip(n) {
        out.layers[l][(i, j)] += delta * v;
    }
    for ((l, i, j), v) in wz.into_iter().zip(z) {
        out.layers[l][(i, j)] = delta * v;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrajRecord {
    pub iter: usize,
    pub loss: f64,
    pub loss_ratio: f64,
    pub dist_to_saddle: f64,
    pub wz_norm: f64,
    pub alignment: Option<f64>,
    pub kkt_residual: f64,
    /// Incoming and outgoing weight norms of the inactive neurons, per
    /// hidden layer.
    pub neuron_in: Vec<Vec<f64>>,
    pub neuron_out: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrajectoryLog {
    pub records: Vec<TrajRecord>,
    /// Loss exceeded `1e6` times its initial value.
    pub diverged: bool,
    /// Final weights.
    #[cfg_attr(feature = "serde", serde(skip))]
    pub last: Option<Net>,
}

/// Alignment objective at a saddle: `<Y - H(X; w_n, 0), H1(X; w_n, .)>`.
pub fn saddle_ncf(saddle: &SaddleSpec, data: &Dataset) -> Result<WzNcf> {
    let ybar = saddle.net.residual(data)?;
    WzNcf::new(&saddle.net, &saddle.partition, &data.x, &ybar)
}

fn record(net: &Net, saddle: &SaddleSpec, obj: &WzNcf, iter: usize, loss: f64) -> TrajRecord {
    let part = &saddle.partition;
    let wz = wz_flatten(net, part);
    let wz_norm = norm(&wz);
    let (alignment, kkt_residual) = if wz_norm > 0.0 {
        let u: Vec<f64> = wz.iter().map(|v| v / wz_norm).collect();
        let m = kkt_metrics(obj, &u);
        (m.alignment, m.residual)
    } else {
        (None, f64::NAN)
    };
    let mut neuron_in = Vec::new();
    let mut neuron_out = Vec::new();
    for (li, &p) in part.active.iter().enumerate() {
        let (w_in, w_out) = (&net.layers[li], &net.layers[li + 1]);
        neuron_in.push((p..w_in.rows()).map(|j| norm(w_in.row(j))).collect());
        neuron_out.push((p..w_in.rows()).map(|j| norm(&w_out.col(j))).collect());
    }
    TrajRecord {
        iter,
        loss,
        loss_ratio: loss / saddle.loss_at_saddle,
        dist_to_saddle: net.distance(&saddle.net) / saddle.net.norm(),
        wz_norm,
        alignment,
        kkt_residual,
        neuron_in,
        neuron_out,
    }
}

/// Full-batch gradient descent from `net`, logging every `log_every` steps
/// (and the final step).
pub fn simulate(net: &Net, data: &Dataset, saddle: &SaddleSpec, lr: f64, iters: usize, log_every: usize) -> Result<TrajectoryLog> {
    if !(lr >= 0.0) || log_every == 0 {
        return Err(invalid("need lr >= 0 and log_every >= 1"));
    }
    let obj = saddle_ncf(saddle, data)?;
    let mut cur = net.clone();
    let mut log = TrajectoryLog::default();
    let mut loss0 = None;
    for k in 0..=iters {
        let (loss, g) = cur.loss_and_grad(data)?;
        let l0 = *loss0.get_or_insert(loss);
        if !loss.is_finite() || loss > 1e6 * l0 {
            log.diverged = true;
            log.records.push(record(&cur, saddle, &obj, k, loss));
            break;
        }
        if k % log_every == 0 || k == iters {
            log.records.push(record(&cur, saddle, &obj, k, loss));
        }
        if k < iters {
            cur.add_scaled(-lr, &g);
        }
    }
    log.last = Some(cur);
    Ok(log)
}

/// Index of the last record before `loss_ratio` leaves `[lo, hi]`, i.e. the
/// end of the window spent near the saddle.
pub fn pre_escape_end(log: &TrajectoryLog, lo: f64, hi: f64) -> Option<usize> {
    let k = log.records.iter().position(|r| !(r.loss_ratio >= lo && r.loss_ratio <= hi))?;
    k.checked_sub(1)
}

/// First logged iteration with `loss_ratio < 0.9`.
pub fn escape_iter(log: &TrajectoryLog) -> Option<usize> {
    log.records.iter().find(|r| r.loss_ratio < 0.9).map(|r| r.iter)
}

/// First logged iteration after `after` at which the loss changed by less
/// than `rel` (relative) over the preceding `window` steps.
pub fn plateau_iter(log: &TrajectoryLog, after: usize, window: usize, rel: f64) -> Option<usize> {
    let recs = &log.records;
    for (k, r) in recs.iter().enumerate() {
        if r.iter < after + window {
            continue;
        }
        let prev = recs[..k].iter().rev().find(|q| q.iter + window <= r.iter)?;
        if prev.iter < after {
            continue;
        }
        if (prev.loss - r.loss).abs() <= rel * prev.loss {
            return Some(r.iter);
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SparsityReport {
    /// Per hidden layer, whether each inactive-set neuron is active.
    pub before: Vec<Vec<bool>>,
    pub after: Vec<Vec<bool>>,
    /// Every neuron inactive before is inactive after.
    pub preserved: bool,
}

fn activity(r: &TrajRecord, threshold: f64) -> Vec<Vec<bool>> {
    let score: Vec<Vec<f64>> =
        r.neuron_in.iter().zip(&r.neuron_out).map(|(i, o)| i.iter().zip(o).map(|(a, b)| a + b).collect()).collect();
    let max = score.iter().flatten().fold(0.0f64, |m, v| m.max(*v));
    score.iter().map(|l| l.iter().map(|v| max > 0.0 && *v >= threshold * max || threshold == 0.0).collect()).collect()
}

fn record_at(log: &TrajectoryLog, iter: usize) -> Result<&TrajRecord> {
    log.records.iter().find(|r| r.iter >= iter).ok_or_else(|| invalid(format!("iteration {iter} is past the end of the log")))
}

/// Classify inactive-set neurons at two iterations by their share
/// `(in + out) / max` against `threshold`.
pub fn sparsity_report(log: &TrajectoryLog, escape: usize, plateau: usize, threshold: f64) -> Result<SparsityReport> {
    if escape >= plateau {
        return Err(invalid("escape iteration must precede the plateau"));
    }
    let before = activity(record_at(log, escape)?, threshold);
    let after = activity(record_at(log, plateau)?, threshold);
    let preserved = before.iter().flatten().zip(after.iter().flatten()).all(|(b, a)| *b || !*a);
    Ok(SparsityReport { before, after, preserved })
}

/// One block of a decoupled flow `w' = grad G(w)`, `G(w) = (w^T A w)^{L/2}`.
#[derive(Clone, Debug, PartialEq)]
pub struct HomogBlockSpec {
    pub degree: u32,
    pub a: Mat,
    pub w0: Vec<f64>,
}

impl HomogBlockSpec {
    pub fn value(&self, w: &[f64]) -> f64 {
        let q = dot(w, &self.a.matvec(w));
        libm::pow(q, self.degree as f64 / 2.0)
    }

    pub fn grad(&self, w: &[f64]) -> Vec<f64> {
        let aw = self.a.matvec(w);
        let q = dot(w, &aw);
        let c = self.degree as f64 * if self.degree == 2 { 1.0 } else { libm::pow(q, self.degree as f64 / 2.0 - 1.0) };
        aw.into_iter().map(|v| c * v).collect()
    }

    /// `max_{||w|| = 1} G(w) = lambda_max(A)^{L/2}` for `lambda_max > 0`.
    pub fn max_on_sphere(&self) -> f64 {
        let n = self.a.rows();
        let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (self.a[(i, j)] + self.a[(j, i)]));
        let lmax = m.symmetric_eigen().eigenvalues.max();
        libm::pow(lmax, self.degree as f64 / 2.0)
    }

    /// Blow-up time bracket `[1/(L(L-2) G(w*)), 1/(L(L-2) G(w0/||w0||)) * ||w0||^{2-L}]`.
    pub fn blowup_bracket(&self) -> Option<(f64, f64)> {
        let l = self.degree as f64;
        if self.degree <= 2 {
            return None;
        }
        let n0 = norm(&self.w0);
        let u: Vec<f64> = self.w0.iter().map(|v| v / n0).collect();
        let g0 = self.value(&u);
        if !(g0 > 0.0) {
            return None;
        }
        let scale = libm::pow(n0, 2.0 - l);
        Some((scale / (l * (l - 2.0) * self.max_on_sphere()), scale / (l * (l - 2.0) * g0)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SumFlowConfig {
    pub dt: f64,
    pub norm_cap: f64,
    pub t_max: f64,
    /// Largest relative per-step norm growth before the step is halved.
    pub max_growth: f64,
    pub max_steps: usize,
}

impl Default for SumFlowConfig {
    fn default() -> Self {
        SumFlowConfig { dt: 1e-3, norm_cap: 1e6, t_max: 10.0, max_growth: 0.1, max_steps: 10_000_000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SumFlowReport {
    /// `(t, per-block norms)` after every accepted step.
    pub curve: Vec<(f64, Vec<f64>)>,
    /// Time at which each block reached the cap.
    pub blowup: Vec<Option<f64>>,
    /// Time at which the earliest block stopped (or the end time).
    pub stop_time: f64,
    /// `||w_i|| / sqrt(sum_j ||w_j||^2)` at `stop_time`.
    pub shares: Vec<f64>,
    /// Unit-sphere direction of each block at `stop_time`.
    pub directions: Vec<Vec<f64>>,
    /// `G_i(w_i / ||w_i||)` never decreased by more than `1e-12`.
    pub sphere_value_monotone: bool,
}

fn rk4_step(b: &HomogBlockSpec, w: &[f64], h: f64) -> Vec<f64> {
    let add = |x: &[f64], c: f64, k: &[f64]| x.iter().zip(k).map(|(a, b)| a + c * b).collect::<Vec<f64>>();
    let k1 = b.grad(w);
    let k2 = b.grad(&add(w, 0.5 * h, &k1));
    let k3 = b.grad(&add(w, 0.5 * h, &k2));
    let k4 = b.grad(&add(w, h, &k3));
    (0..w.len()).map(|i| w[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect()
}

fn sphere_value(b: &HomogBlockSpec, w: &[f64]) -> f64 {
    let n = norm(w);
    b.value(&w.iter().map(|v| v / n).collect::<Vec<_>>())
}

/// Integrate every block in lockstep with classical RK4, halving the shared
/// step whenever some block's norm would grow by more than `max_growth` and
/// doubling it back towards `dt` after each accepted step.
pub fn homog_sum_flow(blocks: &[HomogBlockSpec], cfg: &SumFlowConfig) -> Result<SumFlowReport> {
    if blocks.is_empty() {
        return Err(invalid("need at least one block"));
    }
    let l = blocks[0].degree;
    if l < 2 || l % 2 != 0 || blocks.iter().any(|b| b.degree != l) {
        return Err(invalid("blocks must share one even degree >= 2"));
    }
    for b in blocks {
        if b.a.shape() != (b.w0.len(), b.w0.len()) {
            return Err(shape("A must be square and match w0"));
        }
        if l > 2 && !(sphere_value(b, &b.w0) > 0.0) {
            return Err(invalid("degree > 2 needs G(w0) > 0"));
        }
    }
    let mut w: Vec<Vec<f64>> = blocks.iter().map(|b| b.w0.clone()).collect();
    let mut alive: Vec<bool> = vec![true; blocks.len()];
    let mut blowup: Vec<Option<f64>> = vec![None; blocks.len()];
    let mut sv: Vec<f64> = blocks.iter().zip(&w).map(|(b, x)| sphere_value(b, x)).collect();
    let mut monotone = true;
    let mut t = 0.0;
    let mut dt = cfg.dt;
    let mut curve = vec![(0.0, w.iter().map(|x| norm(x)).collect())];
    let mut snapshot: Option<(f64, Vec<Vec<f64>>)> = None;
    let mut steps = 0;
    while t < cfg.t_max && alive.iter().any(|a| *a) && steps < cfg.max_steps {
        let h = dt.min(cfg.t_max - t);
        let next: Vec<Option<Vec<f64>>> =
            blocks.iter().zip(&w).zip(&alive).map(|((b, x), a)| a.then(|| rk4_step(b, x, h))).collect();
        let too_fast = next.iter().zip(&w).any(|(n, x)| {
            n.as_ref().is_some_and(|n| {
                let r = norm(n) / norm(x);
                !r.is_finite() || r > 1.0 + cfg.max_growth
            })
        });
        if too_fast {
            dt *= 0.5;
            if dt < 1e-300 {
                return Err(Error::NonFinite(format!("step underflow at t = {t}")));
            }
            continue;
        }
        t += h;
        steps += 1;
        dt = (2.0 * dt).min(cfg.dt);
        let mut stopped_now = false;
        for (i, n) in next.into_iter().enumerate() {
            let Some(n) = n else { continue };
            let v = sphere_value(&blocks[i], &n);
            if v < sv[i] - 1e-12 {
                monotone = false;
            }
            sv[i] = v;
            w[i] = n;
            if norm(&w[i]) >= cfg.norm_cap {
                alive[i] = false;
                blowup[i] = Some(t);
                stopped_now = true;
            }
        }
        curve.push((t, w.iter().map(|x| norm(x)).collect()));
        if stopped_now && snapshot.is_none() {
            snapshot = Some((t, w.clone()));
        }
    }
    let (stop_time, ws) = snapshot.unwrap_or((t, w));
    let total = libm::sqrt(ws.iter().map(|x| dot(x, x)).sum::<f64>());
    let shares = ws.iter().map(|x| norm(x) / total).collect();
    let directions = ws.iter().map(|x| {
        let n = norm(x);
        x.iter().map(|v| v / n).collect()
    });
    Ok(SumFlowReport { curve, blowup, stop_time, shares, directions: directions.collect(), sphere_value_monotone: monotone })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_saddle_diag() {
        let (s, _) = make_linear_saddle(&Mat::from_rows(&[&[2.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert!((s.loss_at_saddle - 0.5).abs() < 1e-12);
        let prod = s.net.layers[2].matmul(&s.net.layers[1]).matmul(&s.net.layers[0]);
        assert!((prod[(0, 0)] - 2.0).abs() < 1e-12 && prod[(1, 1)].abs() < 1e-12);
        assert!(matches!(make_linear_saddle(&Mat::identity(3)), Err(Error::SingularValueTie { .. })));
    }

    #[test]
    fn sq_relu_residual() {
        let (s, data) = make_sq_relu_saddle(4).unwrap();
        let r = s.net.residual(&data).unwrap();
        assert_eq!(r.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn perturbation_norm() {
        let (s, _) = make_sq_relu_saddle(5).unwrap();
        assert_eq!(perturb(&s, 0.0, 3).unwrap(), s.net);
        let p = perturb(&s, 0.1, 3).unwrap();
        assert!((p.distance(&s.net) - 0.1 * libm::sqrt(2.0)).abs() < 1e-12);
        assert_eq!(p, perturb(&s, 0.1, 3).unwrap());
    }

    #[test]
    fn single_block_equal_bracket() {
        let b = HomogBlockSpec { degree: 4, a: Mat::identity(3), w0: vec![1.0, 0.0, 0.0] };
        let (lo, hi) = b.blowup_bracket().unwrap();
        assert!((lo - 0.125).abs() < 1e-15 && (hi - 0.125).abs() < 1e-15);
    }
}
