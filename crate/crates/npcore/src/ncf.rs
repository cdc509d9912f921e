// SPDX-License-Identifier: Apache-2.0

//! Sphere-constrained maximization of homogeneous objectives by projected
//! gradient ascent, KKT diagnostics, and the unconstrained ascent flow.

use alloc::boxed::Box;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::mat::{axpy, dot, norm, Mat};
use crate::net::{Dataset, Net};
use crate::rng;

/// A homogeneous objective `u -> N(u)` with its gradient.
pub trait NcfObjective {
    fn dim(&self) -> usize;
    /// Homogeneity degree of `value` in `u`.
    fn degree(&self) -> u32;
    fn value(&self, u: &[f64]) -> f64;
    fn grad(&self, u: &[f64]) -> Vec<f64>;
    fn value_grad(&self, u: &[f64]) -> (f64, Vec<f64>) {
        (self.value(u), self.grad(u))
    }
}

impl<T: NcfObjective + ?Sized> NcfObjective for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn degree(&self) -> u32 {
        (**self).degree()
    }
    fn value(&self, u: &[f64]) -> f64 {
        (**self).value(u)
    }
    fn grad(&self, u: &[f64]) -> Vec<f64> {
        (**self).grad(u)
    }
    fn value_grad(&self, u: &[f64]) -> (f64, Vec<f64>) {
        (**self).value_grad(u)
    }
}

/// Objective assembled from closures.
pub struct FnObjective<'a> {
    pub dim: usize,
    pub degree: u32,
    pub value: Box<dyn Fn(&[f64]) -> f64 + 'a>,
    pub grad: Box<dyn Fn(&[f64]) -> Vec<f64> + 'a>,
}

impl NcfObjective for FnObjective<'_> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn degree(&self) -> u32 {
        self.degree
    }
    fn value(&self, u: &[f64]) -> f64 {
        (self.value)(u)
    }
    fn grad(&self, u: &[f64]) -> Vec<f64> {
        (self.grad)(u)
    }
}

/// `u -> u^T A u` for symmetric `A`.
#[derive(Clone, Debug)]
pub struct QuadraticForm {
    pub a: Mat,
}

impl NcfObjective for QuadraticForm {
    fn dim(&self) -> usize {
        self.a.rows()
    }
    fn degree(&self) -> u32 {
        2
    }
    fn value(&self, u: &[f64]) -> f64 {
        dot(u, &self.a.matvec(u))
    }
    fn grad(&self, u: &[f64]) -> Vec<f64> {
        self.a.matvec(u).into_iter().map(|v| 2.0 * v).collect()
    }
}

/// `w -> <Z, H(X; w)>` over all weights of a fixed architecture, with `w` the
/// flattened weights.
pub struct NetNcf<'a> {
    template: Net,
    x: &'a Mat,
    z: &'a Mat,
}

impl<'a> NetNcf<'a> {
    pub fn new(template: &Net, x: &'a Mat, z: &'a Mat) -> Self {
        NetNcf { template: template.clone(), x, z }
    }

    pub fn for_dataset(template: &Net, data: &'a Dataset) -> Self {
        NetNcf::new(template, &data.x, &data.y)
    }

    pub fn net_at(&self, u: &[f64]) -> Net {
        self.template.with_flat(u)
    }
}

impl NcfObjective for NetNcf<'_> {
    fn dim(&self) -> usize {
        self.template.num_params()
    }
    fn degree(&self) -> u32 {
        self.template.degree()
    }
    fn value(&self, u: &[f64]) -> f64 {
        let out = self.net_at(u).forward_batch(self.x).expect("NetNcf shapes are fixed at construction");
        out.frob_dot(self.z)
    }
    fn grad(&self, u: &[f64]) -> Vec<f64> {
        self.value_grad(u).1
    }
    fn value_grad(&self, u: &[f64]) -> (f64, Vec<f64>) {
        let net = self.net_at(u);
        let tr = net.trace(self.x).expect("NetNcf shapes are fixed at construction");
        let v = tr.out.frob_dot(self.z);
        let (g, _) = net.backprop(self.x, &tr, self.z);
        (v, g.flatten())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AscentConfig {
    pub restarts: usize,
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
    pub residual_tol: f64,
    /// Stop a restart early once its KKT residual drops below
    /// `residual_tol`. Off by default: the fixed step budget is used.
    pub stop_at_tol: bool,
}

impl Default for AscentConfig {
    fn default() -> Self {
        AscentConfig { restarts: 10, steps: 2500, step_size: 0.2, seed: 0, residual_tol: 1e-6, stop_at_tol: false }
    }
}

impl AscentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.steps == 0 {
            return Err(invalid("ascent needs restarts >= 1 and steps >= 1"));
        }
        if !(self.step_size > 0.0) {
            return Err(invalid("ascent step size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KktCandidate {
    pub u: Vec<f64>,
    pub value: f64,
    pub lambda: f64,
    pub kkt_residual: f64,
    /// `None` when the gradient vanishes at `u`.
    pub alignment: Option<f64>,
    pub restart_index: usize,
    /// False when the ascent produced a non-finite state.
    pub valid: bool,
    /// `kkt_residual <= residual_tol`.
    pub converged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KktMetrics {
    pub lambda: f64,
    pub residual: f64,
    pub alignment: Option<f64>,
}

pub fn project_sphere(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn metrics_from(u: &[f64], g: &[f64]) -> KktMetrics {
    let lambda = dot(u, g);
    let mut r = g.to_vec();
    axpy(&mut r, -lambda, u);
    let gn = norm(g);
    let alignment = if gn > 0.0 { Some((lambda / gn).clamp(-1.0, 1.0)) } else { None };
    KktMetrics { lambda, residual: norm(&r), alignment }
}

/// Multiplier, KKT residual and gradient alignment at a unit vector.
pub fn kkt_metrics(obj: &dyn NcfObjective, u: &[f64]) -> KktMetrics {
    metrics_from(u, &obj.grad(u))
}

fn run_restart(obj: &dyn NcfObjective, cfg: &AscentConfig, restart: usize) -> KktCandidate {
    let mut r = rng::stream(cfg.seed, restart as u64);
    let mut u = rng::unit_sphere(&mut r, obj.dim());
    let invalid = |u: Vec<f64>| KktCandidate {
        u,
        value: f64::NEG_INFINITY,
        lambda: f64::NAN,
        kkt_residual: f64::INFINITY,
        alignment: None,
        restart_index: restart,
        valid: false,
        converged: false,
    };
    for _ in 0..cfg.steps {
        let g = obj.grad(&u);
        if cfg.stop_at_tol && metrics_from(&u, &g).residual <= cfg.residual_tol {
            break;
        }
        let mut next = u.clone();
        axpy(&mut next, cfg.step_size, &g);
        match project_sphere(&next) {
            Ok(v) if v.iter().all(|x| x.is_finite()) => u = v,
            _ => return invalid(u),
        }
    }
    let (value, g) = obj.value_grad(&u);
    if !value.is_finite() || g.iter().any(|x| !x.is_finite()) {
        return invalid(u);
    }
    let m = metrics_from(&u, &g);
    KktCandidate {
        u,
        value,
        lambda: m.lambda,
        kkt_residual: m.residual,
        alignment: m.alignment,
        restart_index: restart,
        valid: true,
        converged: m.residual <= cfg.residual_tol,
    }
}

/// Sort valid candidates by descending value (ties by restart index), invalid
/// ones last.
pub fn rank_candidates(c: &mut [KktCandidate]) {
    c.sort_by(|a, b| {
        b.valid
            .cmp(&a.valid)
            .then(b.value.partial_cmp(&a.value).unwrap_or(core::cmp::Ordering::Equal))
            .then(a.restart_index.cmp(&b.restart_index))
    });
}

/// One projected-ascent run per restart, `u <- (u + eta grad) / ||.||`,
/// returned best first.
pub fn pga_maximize(obj: &dyn NcfObjective, cfg: &AscentConfig) -> Result<Vec<KktCandidate>> {
    cfg.validate()?;
    if obj.dim() == 0 {
        return Err(invalid("objective dimension must be >= 1"));
    }
    let mut out: Vec<KktCandidate> = (0..cfg.restarts).map(|h| run_restart(obj, cfg, h)).collect();
    rank_candidates(&mut out);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowTrajectory {
    /// `states[0]` is the initial point; one entry per completed step.
    pub states: Vec<Vec<f64>>,
    /// Step index at which the state became non-finite.
    pub blew_up_at: Option<usize>,
    /// Step index at which the norm first exceeded the cap.
    pub capped_at: Option<usize>,
}

/// Explicit Euler integration of `u' = grad N(u)`.
pub fn ncf_flow(obj: &dyn NcfObjective, u0: &[f64], dt: f64, steps: usize, norm_cap: f64) -> Result<FlowTrajectory> {
    if !(dt > 0.0) {
        return Err(invalid("flow step must be positive"));
    }
    if u0.len() != obj.dim() {
        return Err(invalid("initial point has the wrong dimension"));
    }
    let mut states = Vec::with_capacity(steps + 1);
    states.push(u0.to_vec());
    let mut u = u0.to_vec();
    for k in 1..=steps {
        let g = obj.grad(&u);
        axpy(&mut u, dt, &g);
        if u.iter().any(|x| !x.is_finite()) {
            return Ok(FlowTrajectory { states, blew_up_at: Some(k), capped_at: None });
        }
        let n = norm(&u);
        states.push(u.clone());
        if n > norm_cap {
            return Ok(FlowTrajectory { states, blew_up_at: None, capped_at: Some(k) });
        }
    }
    Ok(FlowTrajectory { states, blew_up_at: None, capped_at: None })
}
