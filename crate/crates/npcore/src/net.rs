// SPDX-License-Identifier: Apache-2.0

//! Dense homogeneous feed-forward networks `H(x) = W_L s(... s(W_1 x))`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::act::Activation;
use crate::error::{invalid, shape, Result};
use crate::mat::{dot, Mat};
use crate::rng;

/// Training data stored column-wise: `x` is `d x n`, `y` is `m x n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Mat,
    pub y: Mat,
}

impl Dataset {
    pub fn new(x: Mat, y: Mat) -> Result<Self> {
        if x.cols() == 0 {
            return Err(invalid("dataset must contain at least one sample"));
        }
        if x.cols() != y.cols() {
            return Err(shape(format!("X has {} samples but Y has {}", x.cols(), y.cols())));
        }
        Ok(Dataset { x, y })
    }

    pub fn n(&self) -> usize {
        self.x.cols()
    }

    pub fn d(&self) -> usize {
        self.x.rows()
    }

    pub fn m(&self) -> usize {
        self.y.rows()
    }

    /// Same inputs, different labels.
    pub fn with_labels(&self, y: Mat) -> Result<Self> {
        Dataset::new(self.x.clone(), y)
    }
}

/// One matrix per layer; shapes match the owning [`Net`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet(pub Vec<Mat>);

impl GradientSet {
    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(Mat::norm_sq).sum()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.norm_sq())
    }

    pub fn dot(&self, other: &GradientSet) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a.frob_dot(b)).sum()
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.0 {
            g.scale(c);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().map(Mat::max_abs).fold(0.0, f64::max)
    }
}

/// Pre- and post-activation values of every hidden layer for a batch.
#[derive(Clone, Debug)]
pub struct Trace {
    /// `pre[l]` is `W_{l+1} a_l`, for hidden layers `l = 0..L-1` (0-based).
    pub pre: Vec<Mat>,
    /// `post[l] = sigma(pre[l])`.
    pub post: Vec<Mat>,
    /// Network output, `m x n`.
    pub out: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Net {
    pub layers: Vec<Mat>,
    pub act: Activation,
}

impl Net {
    pub fn new(layers: Vec<Mat>, act: Activation) -> Result<Self> {
        if layers.len() < 2 {
            return Err(invalid("a network needs at least two layers"));
        }
        for (l, w) in layers.windows(2).enumerate() {
            if w[1].cols() != w[0].rows() {
                return Err(shape(format!(
                    "layer {} has {} columns but layer {} has {} rows",
                    l + 2,
                    w[1].cols(),
                    l + 1,
                    w[0].rows()
                )));
            }
        }
        Ok(Net { layers, act })
    }

    /// All-zero network with widths `[d, k_1, ..., k_{L-1}, m]`.
    pub fn zeros(widths: &[usize], act: Activation) -> Result<Self> {
        if widths.len() < 3 {
            return Err(invalid("widths must list d, at least one hidden width, and m"));
        }
        let layers = widths.windows(2).map(|w| Mat::zeros(w[1], w[0])).collect();
        Net::new(layers, act)
    }

    /// Gaussian entries with standard deviation `scale`.
    pub fn random(widths: &[usize], act: Activation, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut net = Net::zeros(widths, act)?;
        for w in &mut net.layers {
            for x in w.as_mut_slice() {
                *x = scale * rng::normal(rng);
            }
        }
        Ok(net)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.depth() - 1].rows()
    }

    /// `[d, k_1, ..., k_{L-1}, m]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.depth() + 1);
        w.push(self.input_dim());
        w.extend(self.layers.iter().map(Mat::rows));
        w
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|w| w.rows() * w.cols()).sum()
    }

    /// Homogeneity degree `1 + p + ... + p^{L-1}`.
    pub fn degree(&self) -> u32 {
        (0..self.depth() as u32).map(|j| self.act.p.pow(j)).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.layers.iter().map(Mat::norm_sq).sum()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.norm_sq())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }

    /// Overwrite all weights from a flat vector in layer, row-major order.
    pub fn set_flat(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.num_params(), "set_flat: length mismatch");
        let mut off = 0;
        for w in &mut self.layers {
            let k = w.as_slice().len();
            w.as_mut_slice().copy_from_slice(&v[off..off + k]);
            off += k;
        }
    }

    pub fn with_flat(&self, v: &[f64]) -> Net {
        let mut n = self.clone();
        n.set_flat(v);
        n
    }

    pub fn scaled(&self, c: f64) -> Net {
        Net { layers: self.layers.iter().map(|w| w.scaled(c)).collect(), act: self.act }
    }

    /// `self += c * g`.
    pub fn add_scaled(&mut self, c: f64, g: &GradientSet) {
        for (w, gw) in self.layers.iter_mut().zip(&g.0) {
            w.add_scaled(c, gw);
        }
    }

    pub fn distance(&self, other: &Net) -> f64 {
        let s: f64 = self.layers.iter().zip(&other.layers).map(|(a, b)| a.sub(b).norm_sq()).sum();
        libm::sqrt(s)
    }

    pub fn zero_grad(&self) -> GradientSet {
        GradientSet(self.layers.iter().map(|w| Mat::zeros(w.rows(), w.cols())).collect())
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.rows() != self.input_dim() {
            return Err(shape(format!("input has {} rows, network expects {}", x.rows(), self.input_dim())));
        }
        Ok(())
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        self.check_input(&data.x)?;
        if data.m() != self.output_dim() {
            return Err(shape(format!("labels have {} rows, network outputs {}", data.m(), self.output_dim())));
        }
        Ok(())
    }

    /// Forward pass over a batch, keeping intermediate values for backprop.
    pub fn trace(&self, x: &Mat) -> Result<Trace> {
        self.check_input(x)?;
        let l = self.depth();
        let mut pre = Vec::with_capacity(l - 1);
        let mut post: Vec<Mat> = Vec::with_capacity(l - 1);
        for i in 0..l - 1 {
            let input = if i == 0 { x } else { &post[i - 1] };
            let z = self.layers[i].matmul(input);
            let a = z.map(|v| self.act.apply(v));
            pre.push(z);
            post.push(a);
        }
        let out = self.layers[l - 1].matmul(&post[l - 2]);
        Ok(Trace { pre, post, out })
    }

    /// Batch output, `m x n`.
    pub fn forward_batch(&self, x: &Mat) -> Result<Mat> {
        Ok(self.trace(x)?.out)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(&Mat::column(x))?.into_vec())
    }

    pub fn residual(&self, data: &Dataset) -> Result<Mat> {
        self.check_data(data)?;
        Ok(data.y.sub(&self.forward_batch(&data.x)?))
    }

    /// `0.5 * sum_i ||H(x_i) - y_i||^2`.
    pub fn loss(&self, data: &Dataset) -> Result<f64> {
        Ok(0.5 * self.residual(data)?.norm_sq())
    }

    /// Backpropagate an output-space signal `top` (`m x n`). Returns the weight
    /// gradient of `<top, H(X)>` and, for each layer `l`, the signal at that
    /// layer's pre-activation (the last entry is `top` itself).
    pub fn backprop(&self, x: &Mat, tr: &Trace, top: &Mat) -> (GradientSet, Vec<Mat>) {
        let l = self.depth();
        let mut grads: Vec<Mat> = Vec::with_capacity(l);
        let mut deltas: Vec<Mat> = Vec::with_capacity(l);
        let mut delta = top.clone();
        for i in (0..l).rev() {
            let input = if i == 0 { x } else { &tr.post[i - 1] };
            grads.push(delta.matmul_t(input));
            let next = if i > 0 {
                let mut back = self.layers[i].t_matmul(&delta);
                for (b, z) in back.as_mut_slice().iter_mut().zip(tr.pre[i - 1].as_slice()) {
                    *b *= self.act.deriv(*z);
                }
                Some(back)
            } else {
                None
            };
            deltas.push(delta);
            if let Some(n) = next {
                delta = n;
            } else {
                break;
            }
        }
        grads.reverse();
        deltas.reverse();
        (GradientSet(grads), deltas)
    }

    /// Gradient of `sum_i <z_i, H(x_i)>` with respect to all weights.
    pub fn vjp(&self, x: &Mat, z: &Mat) -> Result<GradientSet> {
        let tr = self.trace(x)?;
        if z.shape() != tr.out.shape() {
            return Err(shape("Z must be m x n"));
        }
        Ok(self.backprop(x, &tr, z).0)
    }

    pub fn grad_loss(&self, data: &Dataset) -> Result<GradientSet> {
        Ok(self.loss_and_grad(data)?.1)
    }

    pub fn loss_and_grad(&self, data: &Dataset) -> Result<(f64, GradientSet)> {
        self.check_data(data)?;
        let tr = self.trace(&data.x)?;
        let r = tr.out.sub(&data.y);
        let loss = 0.5 * r.norm_sq();
        let (g, _) = self.backprop(&data.x, &tr, &r);
        Ok((loss, g))
    }

    /// `max_k |<w, grad_w H_k(x)> - D H_k(x)|` over output coordinates `k`.
    pub fn euler_check(&self, x: &[f64]) -> Result<f64> {
        let xm = Mat::column(x);
        let tr = self.trace(&xm)?;
        let d = self.degree() as f64;
        let mut worst: f64 = 0.0;
        for k in 0..self.output_dim() {
            let mut e = Mat::zeros(self.output_dim(), 1);
            e[(k, 0)] = 1.0;
            let (g, _) = self.backprop(&xm, &tr, &e);
            let lhs: f64 = self.layers.iter().zip(&g.0).map(|(w, gw)| w.frob_dot(gw)).sum();
            worst = worst.max((lhs - d * tr.out[(k, 0)]).abs());
        }
        Ok(worst)
    }
}

pub fn forward(net: &Net, x: &[f64]) -> Result<Vec<f64>> {
    net.forward(x)
}

pub fn loss(net: &Net, data: &Dataset) -> Result<f64> {
    net.loss(data)
}

pub fn grad_loss(net: &Net, data: &Dataset) -> Result<GradientSet> {
    net.grad_loss(data)
}

pub fn vjp(net: &Net, x: &Mat, z: &Mat) -> Result<GradientSet> {
    net.vjp(x, z)
}

pub fn euler_check(net: &Net, x: &[f64]) -> Result<f64> {
    net.euler_check(x)
}

/// Smallest absolute hidden pre-activation over a batch; used to keep
/// finite-difference probes away from kinks.
pub fn min_abs_preactivation(net: &Net, x: &Mat) -> Result<f64> {
    let tr = net.trace(x)?;
    Ok(tr.pre.iter().flat_map(|z| z.as_slice().iter()).fold(f64::INFINITY, |m, v| m.min(v.abs())))
}

/// `sum_i <a_i, b_i>` for two equally shaped matrices.
pub fn inner(a: &Mat, b: &Mat) -> f64 {
    dot(a.as_slice(), b.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Net::zeros(&[3, 4, 2], Activation::relu()).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(net.euler_check(&[1.0, 2.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn single_path_hand_computation() {
        let net = Net::new(vec![Mat::from_rows(&[&[1.0, 0.0]]), Mat::from_rows(&[&[2.0]])], Activation::relu()).unwrap();
        assert_eq!(net.forward(&[3.0, -1.0]).unwrap(), vec![6.0]);
    }

    #[test]
    fn linear_three_layer_scales_by_cube() {
        let mut r = rng::rng(3);
        let net = Net::random(&[3, 4, 4, 1], Activation::linear(), 1.0, &mut r).unwrap();
        let x = [0.3, -1.2, 0.8];
        let h = net.forward(&x).unwrap()[0];
        let h2 = net.scaled(2.0).forward(&x).unwrap()[0];
        assert!((h2 - 8.0 * h).abs() <= 1e-12 * h.abs().max(1.0));
        assert_eq!(net.degree(), 3);
    }

    #[test]
    fn loss_of_zero_net_is_half_label_norm() {
        let net = Net::zeros(&[2, 3, 2], Activation::square()).unwrap();
        let data = Dataset::new(Mat::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]), Mat::from_rows(&[&[1.0, -1.0], &[2.0, 0.5]])).unwrap();
        assert_eq!(net.loss(&data).unwrap(), 0.5 * (1.0 + 1.0 + 4.0 + 0.25));
        let y0 = Dataset::new(data.x.clone(), Mat::zeros(2, 2)).unwrap();
        assert_eq!(net.loss(&y0).unwrap(), 0.0);
    }

    #[test]
    fn shape_errors() {
        assert!(Net::new(vec![Mat::zeros(2, 3)], Activation::relu()).is_err());
        assert!(Net::new(vec![Mat::zeros(2, 3), Mat::zeros(1, 3)], Activation::relu()).is_err());
        let net = Net::zeros(&[3, 2, 1], Activation::relu()).unwrap();
        assert!(net.forward(&[1.0]).is_err());
        assert!(Dataset::new(Mat::zeros(3, 2), Mat::zeros(1, 3)).is_err());
    }

    #[test]
    fn interpolating_net_has_zero_gradient() {
        let mut r = rng::rng(9);
        let net = Net::random(&[3, 5, 2], Activation::leaky(0.5), 1.0, &mut r).unwrap();
        let x = Mat::from_fn(3, 7, |i, j| ((i * 7 + j) as f64).sin());
        let y = net.forward_batch(&x).unwrap();
        let g = net.grad_loss(&Dataset::new(x, y).unwrap()).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }
}
