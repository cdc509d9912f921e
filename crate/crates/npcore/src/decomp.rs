// SPDX-License-Identifier: Apache-2.0

//! Splitting a network into an active block `w_n` and a small block `w_z`,
//! and the lowest-order term `H1` of the output in `w_z`.
//!
//! Layer `l` (1-based) is laid out as
//!
//! ```text
//! W_l = [ N_l  B_l ]   rows: p_l active, k_l - p_l inactive
//!       [ A_l  C_l ]   cols: p_{l-1} active, k_{l-1} - p_{l-1} inactive
//! ```
//!
//! with `p_0 = d` and `p_L = m`, so `B_1`, `C_1`, `A_L` and `C_L` are empty.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::act::Activation;
use crate::error::{invalid, shape, Error, Result};
use crate::mat::{dot, Mat};
use crate::ncf::NcfObjective;
use crate::net::Net;
use crate::rng;

/// Number of leading active neurons in each hidden layer.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Partition {
    pub active: Vec<usize>,
}

impl Partition {
    pub fn new(active: Vec<usize>) -> Self {
        Partition { active }
    }

    /// `p` active neurons in every hidden layer of `net`.
    pub fn uniform(net: &Net, p: usize) -> Self {
        Partition { active: vec![p; net.depth() - 1] }
    }

    pub fn check(&self, net: &Net) -> Result<()> {
        if self.active.len() != net.depth() - 1 {
            return Err(shape(format!("partition lists {} hidden layers, network has {}", self.active.len(), net.depth() - 1)));
        }
        let w = net.widths();
        for (l, &p) in self.active.iter().enumerate() {
            if p == 0 || p > w[l + 1] {
                return Err(invalid(format!("hidden layer {} needs 1 <= p <= {}, got {}", l + 1, w[l + 1], p)));
            }
        }
        Ok(())
    }

    /// `[d, p_1, ..., p_{L-1}, m]`.
    pub fn extended(&self, net: &Net) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.active.len() + 2);
        v.push(net.input_dim());
        v.extend_from_slice(&self.active);
        v.push(net.output_dim());
        v
    }

    /// Positions `(layer, row, col)` (0-based layer) of the `w_z` entries, in
    /// layer then row-major order.
    pub fn wz_indices(&self, net: &Net) -> Vec<(usize, usize, usize)> {
        let p = self.extended(net);
        let mut out = Vec::new();
        for (l, w) in net.layers.iter().enumerate() {
            for i in 0..w.rows() {
                for j in 0..w.cols() {
                    if i >= p[l + 1] || j >= p[l] {
                        out.push((l, i, j));
                    }
                }
            }
        }
        out
    }

    pub fn wz_len(&self, net: &Net) -> usize {
        self.wz_indices(net).len()
    }
}

/// Flat copy of the `w_z` entries.
pub fn wz_flatten(net: &Net, part: &Partition) -> Vec<f64> {
    part.wz_indices(net).into_iter().map(|(l, i, j)| net.layers[l][(i, j)]).collect()
}

/// Copy of `net` with the `w_z` entries replaced by `v`.
pub fn wz_set(net: &Net, part: &Partition, v: &[f64]) -> Net {
    let idx = part.wz_indices(net);
    assert_eq!(idx.len(), v.len(), "wz_set: length mismatch");
    let mut out = net.clone();
    for ((l, i, j), x) in idx.into_iter().zip(v) {
        out.layers[l][(i, j)] = *x;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerBlocks {
    pub n: Mat,
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitWeights {
    /// `layers[l - 1]` holds the blocks of `W_l`.
    pub layers: Vec<LayerBlocks>,
    pub act: Activation,
}

pub fn split(net: &Net, part: &Partition) -> Result<SplitWeights> {
    part.check(net)?;
    let p = part.extended(net);
    let layers = net
        .layers
        .iter()
        .enumerate()
        .map(|(l, w)| {
            let (pr, pc) = (p[l + 1], p[l]);
            let (r, c) = w.shape();
            LayerBlocks {
                n: w.block(0, 0, pr, pc),
                a: w.block(pr, 0, r - pr, pc),
                b: w.block(0, pc, pr, c - pc),
                c: w.block(pr, pc, r - pr, c - pc),
            }
        })
        .collect();
    Ok(SplitWeights { layers, act: net.act })
}

pub fn join(sw: &SplitWeights) -> Net {
    let layers = sw
        .layers
        .iter()
        .map(|bl| {
            let rows = bl.n.rows() + bl.a.rows();
            let cols = bl.n.cols() + bl.b.cols();
            let mut w = Mat::zeros(rows, cols);
            w.set_block(0, 0, &bl.n);
            w.set_block(bl.n.rows(), 0, &bl.a);
            w.set_block(0, bl.n.cols(), &bl.b);
            w.set_block(bl.n.rows(), bl.n.cols(), &bl.c);
            w
        })
        .collect();
    Net { layers, act: sw.act }
}

impl SplitWeights {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// The network made of the `N` blocks only.
    pub fn narrow(&self) -> Net {
        Net { layers: self.layers.iter().map(|b| b.n.clone()).collect(), act: self.act }
    }

    /// Same split with every `A`, `B`, `C` block scaled by `c`.
    pub fn scale_wz(&self, c: f64) -> SplitWeights {
        SplitWeights {
            layers: self
                .layers
                .iter()
                .map(|b| LayerBlocks { n: b.n.clone(), a: b.a.scaled(c), b: b.b.scaled(c), c: b.c.scaled(c) })
                .collect(),
            act: self.act,
        }
    }
}

/// `g_0(x) = x`, `g_l(x) = sigma(N_l g_{l-1}(x))`.
pub fn g_features(sw: &SplitWeights, x: &[f64], l: usize) -> Vec<f64> {
    assert!(l < sw.depth(), "g_features: layer out of range");
    let mut g = x.to_vec();
    for blk in &sw.layers[..l] {
        g = blk.n.matvec(&g).into_iter().map(|v| sw.act.apply(v)).collect();
    }
    g
}

/// Jacobian (`m x p_{l+1}`) at `s` of the tail map
/// `s -> N_L sigma(N_{L-1} sigma(... N_{l+2} sigma(s)))`, for `1 <= l <= L-2`.
pub fn tail_grad(sw: &SplitWeights, s: &[f64], l: usize) -> Mat {
    let depth = sw.depth();
    assert!(l >= 1 && l + 2 <= depth, "tail_grad: need 1 <= l <= L-2");
    let act = sw.act;
    // pre-activations at layers l+1 .. L-1
    let mut pres = vec![s.to_vec()];
    let mut h: Vec<f64> = s.iter().map(|v| act.apply(*v)).collect();
    for k in l + 2..depth {
        let z = sw.layers[k - 1].n.matvec(&h);
        h = z.iter().map(|v| act.apply(*v)).collect();
        pres.push(z);
    }
    let mut jac = sw.layers[depth - 1].n.clone();
    for (idx, k) in (l + 1..depth).enumerate().rev() {
        let d = &pres[idx];
        for i in 0..jac.rows() {
            for (v, z) in jac.row_mut(i).iter_mut().zip(d) {
                *v *= act.deriv(*z);
            }
        }
        if k > l + 1 {
            jac = jac.matmul(&sw.layers[k - 1].n);
        }
    }
    jac
}

/// Single-neuron term `H_{1,l}(x; b, a)`: a neuron in hidden layer `l` with
/// incoming weights `a` (length `p_{l-1}`) and outgoing weights `b` (length
/// `p_{l+1}`).
pub fn h1_layer(sw: &SplitWeights, x: &[f64], l: usize, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let depth = sw.depth();
    if l == 0 || l >= depth {
        return Err(invalid(format!("layer index {l} outside 1..={}", depth - 1)));
    }
    let gprev = g_features(sw, x, l - 1);
    if a.len() != gprev.len() || b.len() != sw.layers[l].n.rows() {
        return Err(shape("candidate (a, b) does not match the active widths"));
    }
    let s = sw.act.apply(dot(a, &gprev));
    if l == depth - 1 {
        return Ok(b.iter().map(|v| v * s).collect());
    }
    let gl = g_features(sw, x, l);
    let arg = sw.layers[l].n.matvec(&gl);
    let j = tail_grad(sw, &arg, l);
    Ok(j.matvec(b).into_iter().map(|v| v * s).collect())
}

/// `H1(x)`: sum over layers of the tail Jacobian applied to
/// `B_{l+1} sigma(A_l g_{l-1}(x))`. `C` blocks do not enter.
pub fn h1_full(sw: &SplitWeights, x: &[f64]) -> Vec<f64> {
    let depth = sw.depth();
    let m = sw.layers[depth - 1].n.rows();
    let mut out = vec![0.0; m];
    let mut gprev = x.to_vec();
    for l in 1..depth {
        let blk = &sw.layers[l - 1];
        let u: Vec<f64> = blk.a.matvec(&gprev).into_iter().map(|v| sw.act.apply(v)).collect();
        let v = sw.layers[l].b.matvec(&u);
        let gl: Vec<f64> = blk.n.matvec(&gprev).into_iter().map(|v| sw.act.apply(v)).collect();
        let term = if l == depth - 1 {
            v
        } else {
            let arg = sw.layers[l].n.matvec(&gl);
            tail_grad(sw, &arg, l).matvec(&v)
        };
        for (o, t) in out.iter_mut().zip(term) {
            *o += t;
        }
        gprev = gl;
    }
    out
}

/// `H1` on every column of `x`.
pub fn h1_full_batch(sw: &SplitWeights, x: &Mat) -> Mat {
    let m = sw.layers[sw.depth() - 1].n.rows();
    let mut out = Mat::zeros(m, x.cols());
    for j in 0..x.cols() {
        out.set_col(j, &h1_full(sw, &x.col(j)));
    }
    out
}

/// Per-layer features `G_{l-1}` (`p_{l-1} x n`) and backpropagated targets
/// `R_l` (`p_{l+1} x n`) for `l = 1..L-1`: the inputs feeding a hidden-layer-`l`
/// neuron and the signal its outgoing weights see.
pub fn layer_terms(net: &Net, x: &Mat, target: &Mat) -> Result<Vec<(Mat, Mat)>> {
    let tr = net.trace(x)?;
    if target.shape() != tr.out.shape() {
        return Err(shape("target must be m x n"));
    }
    let (_, deltas) = net.backprop(x, &tr, target);
    Ok((1..net.depth())
        .map(|l| {
            let g = if l == 1 { x.clone() } else { tr.post[l - 2].clone() };
            (g, deltas[l].clone())
        })
        .collect())
}

/// `(a, b) -> sum_i (r_i^T b) sigma(a^T g_i)`, the NCF of a single neuron
/// added between two layers. `u = [a; b]`.
#[derive(Clone, Debug)]
pub struct LayerNcf {
    g: Mat,
    r: Mat,
    act: Activation,
}

impl LayerNcf {
    pub fn new(g: Mat, r: Mat, act: Activation) -> Result<Self> {
        if g.cols() != r.cols() {
            return Err(shape("features and targets must have the same number of samples"));
        }
        Ok(LayerNcf { g, r, act })
    }

    /// NCF for a neuron added to hidden layer `l` (1-based) of `net`, against
    /// the output-space target (usually the residual).
    pub fn from_net(net: &Net, x: &Mat, target: &Mat, l: usize) -> Result<Self> {
        if l == 0 || l >= net.depth() {
            return Err(invalid(format!("layer index {l} outside 1..={}", net.depth() - 1)));
        }
        let (g, r) = layer_terms(net, x, target)?.swap_remove(l - 1);
        LayerNcf::new(g, r, net.act)
    }

    pub fn in_dim(&self) -> usize {
        self.g.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.r.rows()
    }

    pub fn split_u<'u>(&self, u: &'u [f64]) -> (&'u [f64], &'u [f64]) {
        u.split_at(self.in_dim())
    }
}

impl NcfObjective for LayerNcf {
    fn dim(&self) -> usize {
        self.in_dim() + self.out_dim()
    }
    fn degree(&self) -> u32 {
        self.act.p + 1
    }
    fn value(&self, u: &[f64]) -> f64 {
        let (a, b) = self.split_u(u);
        let z = self.g.t_matvec(a);
        let c = self.r.t_matvec(b);
        z.iter().zip(&c).map(|(zi, ci)| ci * self.act.apply(*zi)).sum()
    }
    fn grad(&self, u: &[f64]) -> Vec<f64> {
        self.value_grad(u).1
    }
    fn value_grad(&self, u: &[f64]) -> (f64, Vec<f64>) {
        let (a, b) = self.split_u(u);
        let z = self.g.t_matvec(a);
        let c = self.r.t_matvec(b);
        let s: Vec<f64> = z.iter().map(|v| self.act.apply(*v)).collect();
        let value = dot(&c, &s);
        let w: Vec<f64> = z.iter().zip(&c).map(|(zi, ci)| ci * self.act.deriv(*zi)).collect();
        let mut grad = self.g.matvec(&w);
        grad.extend(self.r.matvec(&s));
        (value, grad)
    }
}

/// `w_z -> <target, H1(X; w_n, w_z)>` over the flat `w_z` layout of
/// [`Partition::wz_indices`]. `C` entries have zero gradient.
#[derive(Clone, Debug)]
pub struct WzNcf {
    /// Per hidden layer: features, targets, and the flat offsets of the
    /// `A_l` and `B_{l+1}` entries.
    terms: Vec<WzTerm>,
    dim: usize,
    act: Activation,
}

#[derive(Clone, Debug)]
struct WzTerm {
    g: Mat,
    r: Mat,
    /// `a_pos[j][k]`: flat index of `A_l[j, k]`.
    a_pos: Vec<Vec<usize>>,
    /// `b_pos[j][k]`: flat index of `B_{l+1}[k, j]`.
    b_pos: Vec<Vec<usize>>,
}

impl WzNcf {
    /// `net` supplies the shapes and the active weights; its current `w_z`
    /// values are ignored.
    pub fn new(net: &Net, part: &Partition, x: &Mat, target: &Mat) -> Result<Self> {
        let sw = split(net, part)?;
        let narrow = sw.narrow();
        let lt = layer_terms(&narrow, x, target)?;
        let p = part.extended(net);
        let idx = part.wz_indices(net);
        let mut pos = alloc::collections::BTreeMap::new();
        for (f, key) in idx.iter().enumerate() {
            pos.insert(*key, f);
        }
        let mut terms = Vec::with_capacity(lt.len());
        for (li, (g, r)) in lt.into_iter().enumerate() {
            let l = li + 1;
            let k_l = net.layers[l - 1].rows();
            let delta = k_l - p[l];
            let a_pos = (0..delta).map(|j| (0..p[l - 1]).map(|k| pos[&(l - 1, p[l] + j, k)]).collect()).collect();
            let b_pos = (0..delta).map(|j| (0..p[l + 1]).map(|k| pos[&(l, k, p[l] + j)]).collect()).collect();
            terms.push(WzTerm { g, r, a_pos, b_pos });
        }
        Ok(WzNcf { terms, dim: idx.len(), act: net.act })
    }
}

impl NcfObjective for WzNcf {
    fn dim(&self) -> usize {
        self.dim
    }
    fn degree(&self) -> u32 {
        self.act.p + 1
    }
    fn value(&self, u: &[f64]) -> f64 {
        self.value_grad(u).0
    }
    fn grad(&self, u: &[f64]) -> Vec<f64> {
        self.value_grad(u).1
    }
    fn value_grad(&self, u: &[f64]) -> (f64, Vec<f64>) {
        let mut value = 0.0;
        let mut grad = vec![0.0; self.dim];
        for t in &self.terms {
            for (ap, bp) in t.a_pos.iter().zip(&t.b_pos) {
                let a: Vec<f64> = ap.iter().map(|&i| u[i]).collect();
                let b: Vec<f64> = bp.iter().map(|&i| u[i]).collect();
                let z = t.g.t_matvec(&a);
                let c = t.r.t_matvec(&b);
                let s: Vec<f64> = z.iter().map(|v| self.act.apply(*v)).collect();
                value += dot(&c, &s);
                let w: Vec<f64> = z.iter().zip(&c).map(|(zi, ci)| ci * self.act.deriv(*zi)).collect();
                for (&i, v) in ap.iter().zip(t.g.matvec(&w)) {
                    grad[i] += v;
                }
                for (&i, v) in bp.iter().zip(t.r.matvec(&s)) {
                    grad[i] += v;
                }
            }
        }
        (value, grad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingFit {
    pub slope: f64,
    /// `(delta, R(delta))` for every probed delta, including dropped points.
    pub points: Vec<(f64, f64)>,
    /// Number of points above the floor used in the fit.
    pub used: usize,
}

/// Residuals at or below this are treated as exact zeros.
pub const REMAINDER_FLOOR: f64 = 1e-14;

/// Log-log least-squares slope of the remainder
/// `max_i |H(w_n, delta z) - H(w_n, 0) - H1(delta z)|` against `delta`.
pub fn residual_scaling(net: &Net, part: &Partition, wz_dir: &[f64], deltas: &[f64], probe: &Mat) -> Result<ScalingFit> {
    part.check(net)?;
    if wz_dir.len() != part.wz_len(net) {
        return Err(shape("w_z direction has the wrong length"));
    }
    let n = crate::mat::norm(wz_dir);
    if !(n > 0.0) {
        return Err(Error::ZeroVector);
    }
    if deltas.len() < 4 || deltas.iter().any(|d| !(*d > 0.0)) {
        return Err(invalid("need at least four positive deltas"));
    }
    let (lo, hi) = deltas.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(*d), hi.max(*d)));
    if hi / lo < 100.0 {
        return Err(invalid("deltas must span at least two decades"));
    }
    let dir: Vec<f64> = wz_dir.iter().map(|v| v / n).collect();
    let base = wz_set(net, part, &vec![0.0; dir.len()]);
    let h0 = base.forward_batch(probe)?;
    let mut points = Vec::with_capacity(deltas.len());
    for &d in deltas {
        let scaled: Vec<f64> = dir.iter().map(|v| d * v).collect();
        let nd = wz_set(net, part, &scaled);
        let h = nd.forward_batch(probe)?;
        let h1 = h1_full_batch(&split(&nd, part)?, probe);
        let r = h.sub(&h0).sub(&h1).max_abs();
        points.push((d, r));
    }
    let used: Vec<(f64, f64)> =
        points.iter().filter(|(_, r)| *r > REMAINDER_FLOOR).map(|(d, r)| (libm::log(*d), libm::log(*r))).collect();
    if used.len() < 2 {
        return Err(Error::RemainderZero);
    }
    Ok(ScalingFit { slope: ols_slope(&used), points, used: used.len() })
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn ols_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Largest `|value|` over `samples` random unit directions. Values at or
/// below [`ZERO_NCF_TOL`] indicate an identically zero NCF.
pub fn zero_ncf_probe(obj: &dyn NcfObjective, samples: usize, seed: u64) -> f64 {
    let mut r = rng::rng(seed);
    (0..samples.max(1)).map(|_| obj.value(&rng::unit_sphere(&mut r, obj.dim())).abs()).fold(0.0, f64::max)
}

pub const ZERO_NCF_TOL: f64 = 1e-10;

/// Reorder the neurons of hidden layer `l` (1-based): new neuron `i` is old
/// neuron `perm[i]`. The network output is unchanged.
pub fn permute_hidden(net: &Net, l: usize, perm: &[usize]) -> Result<Net> {
    if l == 0 || l >= net.depth() {
        return Err(invalid(format!("layer index {l} outside 1..={}", net.depth() - 1)));
    }
    let k = net.layers[l - 1].rows();
    let mut seen = vec![false; k];
    if perm.len() != k || perm.iter().any(|&p| p >= k || core::mem::replace(&mut seen[p], true)) {
        return Err(invalid("not a permutation of the layer's neurons"));
    }
    let mut out = net.clone();
    let w_in = &net.layers[l - 1];
    let w_out = &net.layers[l];
    out.layers[l - 1] = Mat::from_fn(k, w_in.cols(), |i, j| w_in[(perm[i], j)]);
    out.layers[l] = Mat::from_fn(w_out.rows(), k, |i, j| w_out[(i, perm[j])]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_net(seed: u64, act: Activation) -> Net {
        let mut r = rng::rng(seed);
        Net::random(&[3, 4, 5, 2], act, 0.7, &mut r).unwrap()
    }

    #[test]
    fn round_trip() {
        let net = sample_net(1, Activation::square());
        for p in [vec![1, 1], vec![4, 5], vec![2, 3]] {
            let part = Partition::new(p);
            assert_eq!(join(&split(&net, &part).unwrap()), net);
        }
    }

    #[test]
    fn rejects_empty_active_set() {
        let net = sample_net(1, Activation::square());
        assert!(split(&net, &Partition::new(vec![0, 0])).is_err());
        assert!(split(&net, &Partition::new(vec![1])).is_err());
        assert!(split(&net, &Partition::new(vec![5, 1])).is_err());
    }

    #[test]
    fn full_partition_has_no_h1() {
        let net = sample_net(2, Activation::square());
        let part = Partition::new(vec![4, 5]);
        assert_eq!(part.wz_len(&net), 0);
        let sw = split(&net, &part).unwrap();
        assert_eq!(h1_full(&sw, &[1.0, -0.5, 0.2]), vec![0.0, 0.0]);
    }

    #[test]
    fn wz_flat_round_trip() {
        let net = sample_net(3, Activation::relu());
        let part = Partition::new(vec![1, 2]);
        let v = wz_flatten(&net, &part);
        assert_eq!(wz_set(&net, &part, &v), net);
        // 3x4: rows 1..4 (9 entries); 5x4: rows 2..5 or cols 1..4 -> 20 - 2 = 18; 2x5: cols 2..5 -> 6
        assert_eq!(v.len(), 9 + 18 + 6);
    }

    #[test]
    fn permutation_preserves_output() {
        let net = sample_net(4, Activation::leaky(0.3));
        let q = permute_hidden(&net, 2, &[4, 0, 3, 1, 2]).unwrap();
        let x = [0.3, -0.1, 0.9];
        let (a, b) = (net.forward(&x).unwrap(), q.forward(&x).unwrap());
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
        assert!(permute_hidden(&net, 2, &[0, 0, 1, 2, 3]).is_err());
    }
}
