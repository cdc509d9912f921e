// SPDX-License-Identifier: Apache-2.0

//! Synthetic regression and algorithmic tasks, error metrics, and an OMP
//! reference solver.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::act::Activation;
use crate::error::{invalid, shape, Error, Result};
use crate::mat::{dot, Mat};
use crate::net::Dataset;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TaskId {
    /// Sphere of radius `sqrt(d)`.
    F1,
    F2,
    /// Hypercube `{-1, 1}^d`.
    G1,
    G2,
    /// Standard Gaussian.
    H1,
    H2,
    ModAdd,
    Pvr,
    DiagLinear,
}

impl TaskId {
    pub fn parse(s: &str) -> Result<TaskId> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "f1" => TaskId::F1,
            "f2" => TaskId::F2,
            "g1" => TaskId::G1,
            "g2" => TaskId::G2,
            "h1" => TaskId::H1,
            "h2" => TaskId::H2,
            "modadd" => TaskId::ModAdd,
            "pvr" => TaskId::Pvr,
            "diag" | "diag-linear" | "diag_linear" => TaskId::DiagLinear,
            _ => return Err(Error::UnknownTask(s.to_string())),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::F1 => "f1",
            TaskId::F2 => "f2",
            TaskId::G1 => "g1",
            TaskId::G2 => "g2",
            TaskId::H1 => "h1",
            TaskId::H2 => "h2",
            TaskId::ModAdd => "modadd",
            TaskId::Pvr => "pvr",
            TaskId::DiagLinear => "diag-linear",
        }
    }

    /// Activation the task is normally trained with.
    pub fn default_activation(self) -> Activation {
        match self {
            TaskId::F1 | TaskId::F2 | TaskId::Pvr => Activation::relu(),
            TaskId::G1 | TaskId::G2 | TaskId::H1 | TaskId::H2 => Activation::leaky(0.5),
            TaskId::ModAdd => Activation::square(),
            TaskId::DiagLinear => Activation::linear(),
        }
    }

    pub fn default_depth(self) -> usize {
        match self {
            TaskId::H1 | TaskId::H2 => 4,
            TaskId::ModAdd | TaskId::DiagLinear => 2,
            _ => 3,
        }
    }

    /// Smallest input dimension the target reads.
    fn min_dim(self) -> usize {
        match self {
            TaskId::F1 | TaskId::G1 | TaskId::G2 | TaskId::H2 => 4,
            TaskId::F2 => 12,
            TaskId::H1 => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TaskSpec {
    pub task: TaskId,
    /// Input dimension for the sparse-function tasks; ignored otherwise.
    pub d: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Modulus for modular addition.
    pub modulus: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec { task: TaskId::F1, d: 20, n_train: 2000, n_test: 10_000, modulus: 59, seed: 0 }
    }
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn f_block(x: &[f64], o: usize) -> f64 {
    relu(relu(2.0 * x[o] + x[o + 1]) - relu(x[o + 2] - x[o + 3]))
}

/// Closed-form target of a sparse-function task at `x`.
pub fn target(task: TaskId, x: &[f64]) -> Result<f64> {
    if x.len() < task.min_dim() {
        return Err(invalid(format!("task {} needs d >= {}", task.name(), task.min_dim())));
    }
    Ok(match task {
        TaskId::F1 => f_block(x, 0),
        TaskId::F2 => f_block(x, 0) + 5.0 * (1..=2).map(|i| i as f64 * f_block(x, 4 * i)).sum::<f64>(),
        TaskId::G1 => x[0] * x[1] - x[0] * x[1] * x[2] * x[3],
        TaskId::G2 => x[0] * x[1] * x[2] * x[3],
        TaskId::H1 => (2.0 * x[0]).max(x[1]),
        TaskId::H2 => x[0].max(2.0 * x[1]) + x[2].max(2.0 * x[3]) - (x[0] + x[2]).max(-x[1]).max(-x[3]),
        _ => return Err(invalid(format!("task {} has no pointwise target", task.name()))),
    })
}

fn sample_input(task: TaskId, d: usize, r: &mut impl Rng) -> Vec<f64> {
    match task {
        TaskId::F1 | TaskId::F2 => {
            let s = libm::sqrt(d as f64);
            rng::unit_sphere(r, d).into_iter().map(|v| s * v).collect()
        }
        TaskId::G1 | TaskId::G2 => (0..d).map(|_| rng::sign(r)).collect(),
        _ => rng::normal_vec(r, d),
    }
}

fn sparse_split(task: TaskId, d: usize, n: usize, r: &mut impl Rng) -> Result<Dataset> {
    let mut x = Mat::zeros(d, n);
    let mut y = Mat::zeros(1, n);
    for i in 0..n {
        let xi = sample_input(task, d, r);
        y[(0, i)] = target(task, &xi)?;
        x.set_col(i, &xi);
    }
    Dataset::new(x, y)
}

/// Train and test sets for `spec`. Train and test come from independent
/// streams of the seed.
pub fn gen_task(spec: &TaskSpec) -> Result<(Dataset, Dataset)> {
    if spec.n_train == 0 || (spec.n_test == 0 && spec.task != TaskId::ModAdd) {
        return Err(invalid("n_train and n_test must be >= 1"));
    }
    match spec.task {
        TaskId::ModAdd => gen_modadd(spec.modulus, spec.n_train, spec.seed),
        TaskId::Pvr => Ok((pvr_split(spec.n_train, &mut rng::stream(spec.seed, 0)), pvr_split(spec.n_test, &mut rng::stream(spec.seed, 1)))),
        TaskId::DiagLinear => {
            let d = diag_dataset();
            Ok((d.clone(), d))
        }
        t => {
            if spec.d < t.min_dim() {
                return Err(invalid(format!("task {} needs d >= {}", t.name(), t.min_dim())));
            }
            let train = sparse_split(t, spec.d, spec.n_train, &mut rng::stream(spec.seed, 0))?;
            let test = sparse_split(t, spec.d, spec.n_test, &mut rng::stream(spec.seed, 1))?;
            Ok((train, test))
        }
    }
}

fn modadd_sample(p: usize, a: usize, b: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; 2 * p + 1];
    x[a] = 1.0;
    x[p + b] = 1.0;
    x[2 * p] = 1.0;
    let mut y = vec![0.0; p];
    y[(a + b) % p] = 1.0;
    (x, y)
}

fn modadd_set(p: usize, pairs: &[usize]) -> Result<Dataset> {
    let mut x = Mat::zeros(2 * p + 1, pairs.len());
    let mut y = Mat::zeros(p, pairs.len());
    for (i, &k) in pairs.iter().enumerate() {
        let (xi, yi) = modadd_sample(p, k / p, k % p);
        x.set_col(i, &xi);
        y.set_col(i, &yi);
    }
    Dataset::new(x, y)
}

/// `[1_a, 1_b, 1] -> 1_{(a+b) mod p}`. `n_train` pairs drawn without
/// replacement; all remaining pairs form the test set.
pub fn gen_modadd(p: usize, n_train: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if p < 2 {
        return Err(invalid("modulus must be >= 2"));
    }
    if n_train == 0 || n_train >= p * p {
        return Err(invalid(format!("n_train must lie in 1..{}", p * p)));
    }
    let mut idx: Vec<usize> = (0..p * p).collect();
    idx.shuffle(&mut rng::rng(seed));
    let train = &idx[..n_train];
    let mut test = idx[n_train..].to_vec();
    test.sort_unstable();
    Ok((modadd_set(p, train)?, modadd_set(p, &test)?))
}

pub const PVR_BITS: usize = 16;

/// Four-coordinate symmetric binary code of pointer `p` in `1..=15`:
/// bits of `p - 1`, most significant first, with 0 written as -1.
pub fn pvr_pointer_code(p: usize) -> [f64; 4] {
    let v = p - 1;
    core::array::from_fn(|k| if (v >> (3 - k)) & 1 == 1 { 1.0 } else { -1.0 })
}

/// One sample: input `[code(p), 1, x]` and label `x_p x_{p+1}` (1-based).
pub fn pvr_sample(p: usize, x: &[f64]) -> (Vec<f64>, f64) {
    let mut input = pvr_pointer_code(p).to_vec();
    input.push(1.0);
    input.extend_from_slice(x);
    (input, x[p - 1] * x[p])
}

fn pvr_split(n: usize, r: &mut impl Rng) -> Dataset {
    let mut x = Mat::zeros(5 + PVR_BITS, n);
    let mut y = Mat::zeros(1, n);
    for i in 0..n {
        let p = r.random_range(1..=15usize);
        let bits: Vec<f64> = (0..PVR_BITS).map(|_| rng::sign(r)).collect();
        let (xi, yi) = pvr_sample(p, &bits);
        x.set_col(i, &xi);
        y[(0, i)] = yi;
    }
    Dataset { x, y }
}

pub fn gen_pvr(n: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n == 0 {
        return Err(invalid("n must be >= 1"));
    }
    Ok((pvr_split(n, &mut rng::stream(seed, 0)), pvr_split(n, &mut rng::stream(seed, 1))))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MetricKind {
    /// `||truth - pred|| / ||truth||`.
    Relative,
    /// Fraction of samples whose argmax (sign, for scalar outputs) differs.
    Classification,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Error of predictions `pred` against `truth`, both `m x n`.
pub fn metrics(pred: &Mat, truth: &Mat, kind: MetricKind) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(shape("predictions and labels differ in shape"));
    }
    match kind {
        MetricKind::Relative => {
            let t = truth.norm();
            if t == 0.0 {
                return Err(invalid("relative error is undefined for zero labels"));
            }
            Ok(truth.sub(pred).norm() / t)
        }
        MetricKind::Classification => {
            let n = truth.cols();
            let wrong = (0..n)
                .filter(|&j| {
                    if truth.rows() == 1 {
                        (pred[(0, j)] >= 0.0) != (truth[(0, j)] >= 0.0)
                    } else {
                        argmax(&pred.col(j)) != argmax(&truth.col(j))
                    }
                })
                .count();
            Ok(wrong as f64 / n as f64)
        }
    }
}

/// The 2 x 3 sensing matrix (samples by features) and labels of the diagonal
/// linear example.
pub fn diag_instance() -> (Mat, Vec<f64>) {
    let x = Mat::from_rows(&[&[1.0, 0.0, -0.1], &[0.0, 1.0, 1.0 + 0.2 / 3.0]]);
    (x, vec![1.0, 2.0])
}

/// [`diag_instance`] as a dataset (features by samples).
pub fn diag_dataset() -> Dataset {
    let (x, b) = diag_instance();
    Dataset { x: x.transpose(), y: Mat::from_vec(1, b.len(), b) }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OmpStep {
    /// Selected columns, in selection order (0-based).
    pub support: Vec<usize>,
    /// Full-length coefficient vector after the refit.
    pub coefs: Vec<f64>,
    pub residual_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OmpResult {
    pub support: Vec<usize>,
    pub coefs: Vec<f64>,
    pub history: Vec<OmpStep>,
    /// Some refit used a rank-deficient support (pseudo-inverse solution).
    pub rank_deficient: bool,
}

/// Orthogonal matching pursuit on `x` (samples by features) for `k` steps,
/// stopping early once the residual has no correlation left.
pub fn omp_reference(x: &Mat, y: &[f64], k: usize) -> Result<OmpResult> {
    let (n, d) = x.shape();
    if y.len() != n {
        return Err(shape("labels must have one entry per row of X"));
    }
    if k > n.min(d) {
        return Err(invalid("k exceeds min(rows, columns)"));
    }
    let cols: Vec<Vec<f64>> = (0..d).map(|j| x.col(j)).collect();
    if cols.iter().any(|c| c.iter().all(|v| *v == 0.0)) {
        return Err(invalid("X has a zero column"));
    }
    let ynorm = crate::mat::norm(y);
    let mut support: Vec<usize> = Vec::new();
    let mut coefs = vec![0.0; d];
    let mut residual = y.to_vec();
    let mut history = Vec::new();
    let mut rank_deficient = false;
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for (j, c) in cols.iter().enumerate() {
            if support.contains(&j) {
                continue;
            }
            let corr = dot(c, &residual).abs();
            if best.is_none_or(|b| corr > b.1) {
                best = Some((j, corr));
            }
        }
        let Some((j, corr)) = best else { break };
        if corr <= 1e-14 * (1.0 + ynorm) {
            break;
        }
        support.push(j);
        let a = DMatrix::from_fn(n, support.len(), |i, c| x[(i, support[c])]);
        let svd = a.clone().svd(true, true);
        let tol = 1e-12 * svd.singular_values.max();
        if svd.rank(tol) < support.len() {
            rank_deficient = true;
        }
        let beta = svd.solve(&DVector::from_column_slice(y), tol).map_err(|e| Error::NonFinite(String::from(e)))?;
        coefs = vec![0.0; d];
        for (c, &s) in support.iter().enumerate() {
            coefs[s] = beta[c];
        }
        let fit = &a * &beta;
        residual = y.iter().zip(fit.iter()).map(|(a, b)| a - b).collect();
        history.push(OmpStep { support: support.clone(), coefs: coefs.clone(), residual_norm: crate::mat::norm(&residual) });
    }
    Ok(OmpResult { support, coefs, history, rank_deficient })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        let mut x = vec![0.0; 20];
        x[..4].copy_from_slice(&[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(target(TaskId::F1, &x).unwrap(), 3.0);
        assert_eq!(target(TaskId::G2, &[1.0; 6]).unwrap(), 1.0);
        assert_eq!(target(TaskId::H1, &[1.0, 3.0, 0.0]).unwrap(), 3.0);
    }

    #[test]
    fn modadd_encoding() {
        let (x, y) = modadd_sample(5, 0, 0);
        let ones: Vec<usize> = x.iter().enumerate().filter(|(_, v)| **v == 1.0).map(|(i, _)| i).collect();
        assert_eq!(ones, vec![0, 5, 10]);
        assert_eq!(y[0], 1.0);
    }

    #[test]
    fn pointer_codes() {
        assert_eq!(pvr_pointer_code(1), [-1.0, -1.0, -1.0, -1.0]);
        assert_eq!(pvr_pointer_code(2), [-1.0, -1.0, -1.0, 1.0]);
        assert_eq!(pvr_pointer_code(15), [1.0, 1.0, 1.0, -1.0]);
    }

    #[test]
    fn metric_edges() {
        let t = Mat::from_rows(&[&[1.0, -2.0, 3.0]]);
        assert_eq!(metrics(&t, &t, MetricKind::Relative).unwrap(), 0.0);
        assert_eq!(metrics(&Mat::zeros(1, 3), &t, MetricKind::Relative).unwrap(), 1.0);
        assert!(metrics(&t, &Mat::zeros(1, 3), MetricKind::Relative).is_err());
    }

    #[test]
    fn unknown_task() {
        assert_eq!(TaskId::parse("f9"), Err(Error::UnknownTask("f9".into())));
    }
}
