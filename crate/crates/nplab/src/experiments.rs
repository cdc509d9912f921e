// SPDX-License-Identifier: Apache-2.0

//! Fixed experiment setups shared by the CLI and the acceptance runner.

use npcore::pursuit::{GdConfig, NPConfig};
use npcore::saddle::{
    escape_iter, make_linear_saddle, make_sq_relu_saddle, make_trained_saddle, perturb, plateau_iter, simulate,
    sparsity_report, SaddleSpec, SparsityReport, TrainedSaddleConfig, TrajRecord, TrajectoryLog,
};
use npcore::{mat, rng, Activation, Dataset, Mat, Net};
use serde::{Deserialize, Serialize};

/// `2^(-12/7)`: the loss Hessian at the saddle grows like `label_scale^(12/7)`
/// for this degree-7 student, so step sizes tuned at unit label scale are
/// multiplied by this factor at label scale 2.
const LR_SCALE_2: f64 = 0.304_753_413_551_118_9;

/// Teacher-student setup for gradient descent near a trained sparse saddle:
/// Gaussian inputs, labels from a random square-activation teacher whose
/// first-layer rows have norms `1, decay, decay^2, ...`, rescaled to RMS
/// `label_scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSaddleConfig {
    pub d: usize,
    pub n: usize,
    pub teacher_hidden: Vec<usize>,
    pub decay: f64,
    pub student_hidden: Vec<usize>,
    pub label_scale: f64,
    pub seed: u64,
    /// Step size of the narrow-net training, per sample.
    pub train_lr: f64,
}

impl Default for TeacherSaddleConfig {
    fn default() -> Self {
        TeacherSaddleConfig {
            d: 20,
            n: 100,
            teacher_hidden: vec![3, 2],
            decay: 0.6,
            student_hidden: vec![10, 10],
            label_scale: 2.0,
            seed: 2,
            train_lr: 1e-3 * LR_SCALE_2,
        }
    }
}

pub fn teacher_dataset(cfg: &TeacherSaddleConfig) -> npcore::Result<Dataset> {
    let act = Activation::square();
    let mut r = rng::rng(cfg.seed);
    let mut widths = vec![cfg.d];
    widths.extend_from_slice(&cfg.teacher_hidden);
    widths.push(1);
    let mut teacher = Net::random(&widths, act, 1.0, &mut r)?;
    let mut f = 1.0;
    for i in 0..teacher.layers[0].rows() {
        let row = teacher.layers[0].row_mut(i);
        let nn = mat::norm(row);
        row.iter_mut().for_each(|v| *v *= f / nn);
        f *= cfg.decay;
    }
    let x = Mat::from_fn(cfg.d, cfg.n, |_, _| rng::normal(&mut r));
    let y = teacher.forward_batch(&x)?;
    let rms = (y.norm_sq() / cfg.n as f64).sqrt();
    Dataset::new(x, y.scaled(cfg.label_scale / rms))
}

pub fn teacher_saddle(cfg: &TeacherSaddleConfig) -> npcore::Result<(SaddleSpec, Dataset)> {
    let data = teacher_dataset(cfg)?;
    let lr = cfg.train_lr / cfg.n as f64;
    let tcfg = TrainedSaddleConfig {
        np: NPConfig { gd: GdConfig { lr, iters: 50_000, halving: None, grad_tol: Some(1e-7) }, ..Default::default() },
        polish: GdConfig { lr, iters: 2_000_000, halving: None, grad_tol: Some(1e-7) },
        grad_tol: 1e-7,
    };
    let depth = cfg.student_hidden.len() + 1;
    let s = make_trained_saddle(&data, depth, &cfg.student_hidden, Activation::square(), &tcfg)?;
    Ok((s, data))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SaddleRunSummary {
    pub loss_at_saddle: f64,
    /// First and last logged iterations of the stretch spent with the loss
    /// ratio inside the band, after the initial relaxation of `w_n`.
    pub window: Option<(usize, usize)>,
    pub window_max_dist: f64,
    pub window_max_loss_dev: f64,
    pub window_end_alignment: Option<f64>,
    pub window_end_wz_norm: f64,
    /// Worst `|in^2 - p out^2| / (in^2 + p out^2)` over inactive-set neurons
    /// carrying at least `1e-3` of the largest norm, at the window end.
    pub window_end_balance_gap: f64,
    pub escape_iter: Option<usize>,
    pub plateau_iter: Option<usize>,
    pub plateau_loss_ratio: Option<f64>,
    pub sparsity: Option<SparsityReport>,
    pub diverged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub band: f64,
    pub plateau_window: usize,
    pub plateau_rel: f64,
    pub share_threshold: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig { band: 0.01, plateau_window: 500, plateau_rel: 1e-6, share_threshold: 0.05 }
    }
}

fn balance_gap(r: &TrajRecord, p: f64) -> f64 {
    let max = r.neuron_in.iter().flatten().zip(r.neuron_out.iter().flatten()).map(|(a, b)| a + b).fold(0.0, f64::max);
    let mut gap: f64 = 0.0;
    for (a, b) in r.neuron_in.iter().flatten().zip(r.neuron_out.iter().flatten()) {
        if a + b >= 1e-3 * max && max > 0.0 {
            let (a2, b2) = (a * a, p * b * b);
            gap = gap.max((a2 - b2).abs() / (a2 + b2));
        }
    }
    gap
}

pub fn analyze(log: &TrajectoryLog, saddle: &SaddleSpec, cfg: &AnalysisConfig) -> SaddleRunSummary {
    let recs = &log.records;
    let inb = |r: &TrajRecord| (r.loss_ratio - 1.0).abs() <= cfg.band;
    let mut s = SaddleRunSummary {
        loss_at_saddle: saddle.loss_at_saddle,
        window: None,
        window_max_dist: f64::NAN,
        window_max_loss_dev: f64::NAN,
        window_end_alignment: None,
        window_end_wz_norm: f64::NAN,
        window_end_balance_gap: f64::NAN,
        escape_iter: escape_iter(log),
        plateau_iter: None,
        plateau_loss_ratio: None,
        sparsity: None,
        diverged: log.diverged,
    };
    if let Some(s0) = recs.iter().position(inb) {
        let e = recs[s0..].iter().position(|r| !inb(r)).map_or(recs.len() - 1, |k| s0 + k - 1);
        let w = &recs[s0..=e];
        s.window = Some((recs[s0].iter, recs[e].iter));
        s.window_max_dist = w.iter().map(|r| r.dist_to_saddle).fold(0.0, f64::max);
        s.window_max_loss_dev = w.iter().map(|r| (r.loss_ratio - 1.0).abs()).fold(0.0, f64::max);
        s.window_end_alignment = recs[e].alignment;
        s.window_end_wz_norm = recs[e].wz_norm;
        s.window_end_balance_gap = balance_gap(&recs[e], saddle.net.act.p as f64);
    }
    if let Some(esc) = s.escape_iter {
        s.plateau_iter = plateau_iter(log, esc, cfg.plateau_window, cfg.plateau_rel);
        if let Some(p) = s.plateau_iter {
            s.plateau_loss_ratio = recs.iter().find(|r| r.iter == p).map(|r| r.loss_ratio);
            s.sparsity = sparsity_report(log, esc, p, cfg.share_threshold).ok();
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaddleKind {
    /// Three-layer linear factorization of a Gaussian `d x d` matrix.
    Linear,
    /// Squared-ReLU two-sample construction.
    SqRelu,
    /// Trained one-neuron saddle of a square-activation teacher problem.
    Teacher,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub kind: SaddleKind,
    /// Dimension for the `linear` and `sq_relu` constructions.
    pub d: usize,
    pub teacher: TeacherSaddleConfig,
    pub delta: f64,
    /// Step size per sample; the descent step is `lr / n`.
    pub lr: f64,
    pub iters: usize,
    pub log_every: usize,
    /// Seeds the `linear` construction; the perturbation uses `seed + 1000`.
    pub seed: u64,
    pub analysis: AnalysisConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            kind: SaddleKind::Teacher,
            d: 10,
            teacher: TeacherSaddleConfig::default(),
            delta: 1e-2,
            lr: 2e-2 * LR_SCALE_2,
            iters: 2_000_000,
            log_every: 100,
            seed: 2,
            analysis: AnalysisConfig::default(),
        }
    }
}

/// Build the saddle, perturb it by `delta`, run gradient descent and analyze
/// the trajectory.
pub fn run_saddle(cfg: &SimConfig) -> npcore::Result<(TrajectoryLog, SaddleRunSummary)> {
    let (saddle, data) = match cfg.kind {
        SaddleKind::Linear => {
            let mut r = rng::rng(cfg.seed);
            let s = Mat::from_fn(cfg.d, cfg.d, |_, _| rng::normal(&mut r));
            make_linear_saddle(&s)?
        }
        SaddleKind::SqRelu => make_sq_relu_saddle(cfg.d)?,
        SaddleKind::Teacher => teacher_saddle(&cfg.teacher)?,
    };
    let w0 = perturb(&saddle, cfg.delta, cfg.seed.wrapping_add(1000))?;
    let log = simulate(&w0, &data, &saddle, cfg.lr / data.n() as f64, cfg.iters, cfg.log_every)?;
    let summary = analyze(&log, &saddle, &cfg.analysis);
    Ok((log, summary))
}
