//! Reverse-mode autodiff tape.
//!
//! A [`Graph`] owns an arena of nodes recorded in topological order; each
//! non-leaf node stores the handles of its inputs and whatever context its
//! backward rule needs (argmax indices, dropout masks, normalization
//! statistics). [`Graph::backward`] traverses the tape in exact reverse
//! order and accumulates gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ActivationKind, Conv3dSpec, GroupNormSaved};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Relu,
    Sigmoid,
}

impl Activation {
    fn kind(self) -> ActivationKind {
        match self {
            Activation::Elu => ActivationKind::Elu,
            Activation::Relu => ActivationKind::Relu,
            Activation::Sigmoid => ActivationKind::Sigmoid,
        }
    }
}

enum Op<S: Scalar> {
    Leaf,
    Conv3d { input: Var, weight: Var, bias: Var, spec: Conv3dSpec },
    Upsample2x { input: Var },
    MaxPool2x { input: Var, argmax: Vec<u32> },
    GlobalAvgPool { input: Var },
    GlobalMaxPool { input: Var, argmax: Vec<u32> },
    Activation { input: Var, act: Activation, alpha: S },
    Softmax { input: Var },
    GroupNorm { input: Var, gamma: Var, beta: Var, groups: usize, saved: GroupNormSaved<S> },
    Linear { input: Var, weight: Var, bias: Var },
    Dropout { input: Var, mask: Vec<S> },
    ConcatChannels { a: Var, b: Var },
    Add { a: Var, b: Var },
    MulElem { a: Var, b: Var },
    Sum { input: Var },
    ChannelMeanMax { input: Var, argmax: Vec<u32> },
    ScaleChannels { x: Var, s: Var },
    ScaleSpatial { x: Var, s: Var },
    SoftDice { pred: Var, target: Tensor<S>, eps: S },
    WeightedCrossEntropy { probs: Var, labels: Vec<Option<usize>>, weights: Vec<S> },
    AffineCombine { terms: Vec<(S, Var)> },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// Autodiff tape: arena of recorded operations.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a leaf tensor.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last `backward` call; zeros if the
    /// node is not on any path to the loss.
    pub fn grad(&self, v: Var) -> Tensor<S> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape()),
        }
    }

    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let spec = kernels::conv3d_spec(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            padding,
        )?;
        let out = kernels::conv3d_forward(self.value(input), self.value(weight), self.value(bias), &spec);
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(out, rg, Op::Conv3d { input, weight, bias, spec }))
    }

    pub fn upsample_nearest_2x(&mut self, input: Var) -> Result<Var> {
        let out = kernels::upsample2x_forward(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(out, rg, Op::Upsample2x { input }))
    }

    pub fn maxpool3d_2x(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2x_forward(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(out, rg, Op::MaxPool2x { input, argmax }))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = kernels::global_avg_pool_forward(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(out, rg, Op::GlobalAvgPool { input }))
    }

    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::global_max_pool_forward(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(out, rg, Op::GlobalMaxPool { input, argmax }))
    }

    pub fn activation(&mut self, input: Var, act: Activation, alpha: S) -> Var {
        let out = kernels::activation_forward(self.value(input), act.kind(), alpha);
        let rg = self.rg(input);
        self.push(out, rg, Op::Activation { input, act, alpha })
    }

    pub fn elu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Elu, S::one())
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid, S::one())
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let out = kernels::softmax_forward(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(out, rg, Op::Softmax { input }))
    }

    pub fn group_norm(&mut self, input: Var, gamma: Var, beta: Var, groups: usize, eps: S) -> Result<Var> {
        let (out, saved) =
            kernels::group_norm_forward(self.value(input), self.value(gamma), self.value(beta), groups, eps)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, rg, Op::GroupNorm { input, gamma, beta, groups, saved }))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = kernels::linear_forward(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(out, rg, Op::Linear { input, weight, bias }))
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by
    /// 1/(1-p). Identity when `training` is false. The mask is drawn from
    /// a deterministic stream seeded by `seed`.
    pub fn dropout(&mut self, input: Var, p: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!("dropout rate must be in [0, 1), got {}", p)));
        }
        if !training || p == 0.0 {
            let out = self.value(input).clone();
            let mask = vec![S::one(); out.numel()];
            let rg = self.rg(input);
            return Ok(self.push(out, rg, Op::Dropout { input, mask }));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = S::of_f64(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.value(input).numel())
            .map(|_| if rng.gen::<f64>() < p { S::zero() } else { scale })
            .collect();
        let data: Vec<S> = self.value(input).data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::new(self.value(input).shape(), data)?;
        let rg = self.rg(input);
        Ok(self.push(out, rg, Op::Dropout { input, mask }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::concat_channels_forward(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::ConcatChannels { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::InvalidShape(format!(
                "add shapes differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::InvalidShape(format!(
                "mul shapes differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::MulElem { a, b }))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, input: Var) -> Var {
        let mut acc = S::zero();
        for &v in self.value(input).data() {
            acc += v;
        }
        let rg = self.rg(input);
        self.push(Tensor::scalar(acc), rg, Op::Sum { input })
    }

    pub fn channel_mean_max(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::channel_mean_max_forward(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(out, rg, Op::ChannelMeanMax { input, argmax }))
    }

    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let out = kernels::scale_channels_forward(self.value(x), self.value(s))?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, rg, Op::ScaleChannels { x, s }))
    }

    pub fn scale_spatial(&mut self, x: Var, s: Var) -> Result<Var> {
        let out = kernels::scale_spatial_forward(self.value(x), self.value(s))?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, rg, Op::ScaleSpatial { x, s }))
    }

    /// Soft Dice loss, per-sample Dice averaged over the batch.
    pub fn soft_dice_loss(&mut self, pred: Var, target: &Tensor<S>, eps: S) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::InvalidShape(format!(
                "dice shapes differ: {:?} vs {:?}",
                p.shape(),
                target.shape()
            )));
        }
        let n = p.shape()[0];
        let per = p.numel() / n;
        let mut loss = S::zero();
        for ni in 0..n {
            let ps = &p.data()[ni * per..][..per];
            let ts = &target.data()[ni * per..][..per];
            let mut inter = S::zero();
            let mut psum = S::zero();
            let mut tsum = S::zero();
            for (&pv, &tv) in ps.iter().zip(ts) {
                inter += pv * tv;
                psum += pv;
                tsum += tv;
            }
            let dice = (S::of_f64(2.0) * inter + eps) / (psum + tsum + eps);
            loss += S::one() - dice;
        }
        loss = loss / S::of_f64(n as f64);
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftDice { pred, target: target.clone(), eps },
        ))
    }

    /// Weighted cross entropy over softmax probabilities. Rows with a
    /// `None` label are excluded (used for unlabeled samples in a mixed
    /// batch); the mean is taken over labeled rows.
    pub fn weighted_cross_entropy(
        &mut self,
        probs: Var,
        labels: &[Option<usize>],
        weights: &[S],
    ) -> Result<Var> {
        let p = self.value(probs);
        let k = p.shape()[1];
        if p.shape()[0] != labels.len() {
            return Err(Error::InvalidShape(format!(
                "{} probability rows vs {} labels",
                p.shape()[0],
                labels.len()
            )));
        }
        if weights.len() != k {
            return Err(Error::InvalidShape(format!("{} weights for {} classes", weights.len(), k)));
        }
        let labeled = labels.iter().flatten().count();
        if labeled == 0 {
            return Err(Error::InvalidLabel("no labeled rows in batch".into()));
        }
        let floor = S::of_f64(1e-12);
        let mut loss = S::zero();
        for (row, label) in p.data().chunks(k).zip(labels) {
            if let Some(y) = label {
                if *y >= k {
                    return Err(Error::InvalidLabel(format!("label {} out of range for {} classes", y, k)));
                }
                loss += -weights[*y] * row[*y].max(floor).ln();
            }
        }
        loss = loss / S::of_f64(labeled as f64);
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::WeightedCrossEntropy { probs, labels: labels.to_vec(), weights: weights.to_vec() },
        ))
    }

    /// Scalar combination sum(coeff_i * term_i) of scalar nodes.
    pub fn affine_combine(&mut self, terms: &[(S, Var)]) -> Result<Var> {
        let mut acc = S::zero();
        for &(c, v) in terms {
            if !self.value(v).is_scalar() {
                return Err(Error::InvalidUse("affine_combine terms must be scalars".into()));
            }
            acc += c * self.value(v).item();
        }
        let rg = terms.iter().any(|&(_, v)| self.rg(v));
        Ok(self.push(Tensor::scalar(acc), rg, Op::AffineCombine { terms: terms.to_vec() }))
    }

    fn accumulate(&mut self, v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse-order gradient accumulation from a scalar loss node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::InvalidUse(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(S::one()));
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = self.nodes[i].grad.as_ref().unwrap().clone();
            // take the op out to appease the borrow checker, then restore
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            match &op {
                Op::Leaf => {}
                Op::Conv3d { input, weight, bias, spec } => {
                    let (dx, dw, db) = kernels::conv3d_backward(self.value(*input), self.value(*weight), spec, &g);
                    self.accumulate(*input, dx);
                    self.accumulate(*weight, dw);
                    self.accumulate(*bias, db);
                }
                Op::Upsample2x { input } => {
                    let dx = kernels::upsample2x_backward(self.value(*input).shape(), &g);
                    self.accumulate(*input, dx);
                }
                Op::MaxPool2x { input, argmax } => {
                    let dx = kernels::maxpool2x_backward(self.value(*input).shape(), argmax, &g);
                    self.accumulate(*input, dx);
                }
                Op::GlobalAvgPool { input } => {
                    let dx = kernels::global_avg_pool_backward(self.value(*input).shape(), &g);
                    self.accumulate(*input, dx);
                }
                Op::GlobalMaxPool { input, argmax } => {
                    let dx = kernels::global_max_pool_backward(self.value(*input).shape(), argmax, &g);
                    self.accumulate(*input, dx);
                }
                Op::Activation { input, act, alpha } => {
                    let dx = kernels::activation_backward(
                        self.value(*input),
                        &self.nodes[i].value,
                        act.kind(),
                        *alpha,
                        &g,
                    );
                    self.accumulate(*input, dx);
                }
                Op::Softmax { input } => {
                    let dx = kernels::softmax_backward(&self.nodes[i].value, &g);
                    self.accumulate(*input, dx);
                }
                Op::GroupNorm { input, gamma, beta, groups, saved } => {
                    let (dx, dgamma, dbeta) =
                        kernels::group_norm_backward(self.value(*input), self.value(*gamma), *groups, saved, &g);
                    self.accumulate(*input, dx);
                    self.accumulate(*gamma, dgamma);
                    self.accumulate(*beta, dbeta);
                }
                Op::Linear { input, weight, bias } => {
                    let (dx, dw, db) = kernels::linear_backward(self.value(*input), self.value(*weight), &g);
                    self.accumulate(*input, dx);
                    self.accumulate(*weight, dw);
                    self.accumulate(*bias, db);
                }
                Op::Dropout { input, mask } => {
                    let data: Vec<S> = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                    let dx = Tensor::new(self.value(*input).shape(), data)?;
                    self.accumulate(*input, dx);
                }
                Op::ConcatChannels { a, b } => {
                    let (da, db) =
                        kernels::concat_channels_backward(self.value(*a).shape(), self.value(*b).shape(), &g);
                    self.accumulate(*a, da);
                    self.accumulate(*b, db);
                }
                Op::Add { a, b } => {
                    self.accumulate(*a, g.clone());
                    self.accumulate(*b, g);
                }
                Op::MulElem { a, b } => {
                    let da: Vec<S> = g.data().iter().zip(self.value(*b).data()).map(|(&gv, &bv)| gv * bv).collect();
                    let db: Vec<S> = g.data().iter().zip(self.value(*a).data()).map(|(&gv, &av)| gv * av).collect();
                    let da = Tensor::new(self.value(*a).shape(), da)?;
                    let db = Tensor::new(self.value(*b).shape(), db)?;
                    self.accumulate(*a, da);
                    self.accumulate(*b, db);
                }
                Op::Sum { input } => {
                    let dx = Tensor::full(self.value(*input).shape(), g.item());
                    self.accumulate(*input, dx);
                }
                Op::ChannelMeanMax { input, argmax } => {
                    let dx = kernels::channel_mean_max_backward(self.value(*input).shape(), argmax, &g);
                    self.accumulate(*input, dx);
                }
                Op::ScaleChannels { x, s } => {
                    let (dx, ds) = kernels::scale_channels_backward(self.value(*x), self.value(*s), &g);
                    self.accumulate(*x, dx);
                    self.accumulate(*s, ds);
                }
                Op::ScaleSpatial { x, s } => {
                    let (dx, ds) = kernels::scale_spatial_backward(self.value(*x), self.value(*s), &g);
                    self.accumulate(*x, dx);
                    self.accumulate(*s, ds);
                }
                Op::SoftDice { pred, target, eps } => {
                    let gv = g.item();
                    let p = self.value(*pred);
                    let n = p.shape()[0];
                    let per = p.numel() / n;
                    let inv_n = S::of_f64(1.0 / n as f64);
                    let two = S::of_f64(2.0);
                    let mut dx = Tensor::zeros(p.shape());
                    for ni in 0..n {
                        let ps = &p.data()[ni * per..][..per];
                        let ts = &target.data()[ni * per..][..per];
                        let mut inter = S::zero();
                        let mut psum = S::zero();
                        let mut tsum = S::zero();
                        for (&pv, &tv) in ps.iter().zip(ts) {
                            inter += pv * tv;
                            psum += pv;
                            tsum += tv;
                        }
                        let num = two * inter + *eps;
                        let den = psum + tsum + *eps;
                        let dd = &mut dx.data_mut()[ni * per..][..per];
                        for (j, &tv) in ts.iter().enumerate() {
                            // d(1 - num/den)/dp = -(2*t*den - num)/den^2
                            dd[j] = -(two * tv * den - num) / (den * den) * inv_n * gv;
                        }
                    }
                    self.accumulate(*pred, dx);
                }
                Op::WeightedCrossEntropy { probs, labels, weights } => {
                    let gv = g.item();
                    let p = self.value(*probs);
                    let k = p.shape()[1];
                    let labeled = labels.iter().flatten().count();
                    let inv = S::of_f64(1.0 / labeled as f64);
                    let floor = S::of_f64(1e-12);
                    let mut dx = Tensor::zeros(p.shape());
                    for (ni, label) in labels.iter().enumerate() {
                        if let Some(y) = label {
                            let pv = p.data()[ni * k + y];
                            if pv > floor {
                                dx.data_mut()[ni * k + y] = -weights[*y] / pv * inv * gv;
                            }
                        }
                    }
                    self.accumulate(*probs, dx);
                }
                Op::AffineCombine { terms } => {
                    let gv = g.item();
                    for &(c, v) in terms {
                        self.accumulate(v, Tensor::scalar(c * gv));
                    }
                }
            }
            self.nodes[i].op = op;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap(), true);
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sum_of_squares_gives_2x() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let sq = g.mul_elem(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn off_path_tensor_gets_zero_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
        let y = g.leaf(Tensor::new(&[2], vec![3.0, 4.0]).unwrap(), true);
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn add_gradient_flows_to_both() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
        let b = g.leaf(Tensor::new(&[2], vec![5.0, -1.0]).unwrap(), true);
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).data(), &[1.0, 1.0]);
        assert_eq!(g.grad(b).data(), &[1.0, 1.0]);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let out = g.dropout(x, 0.0, true, 7).unwrap();
        assert_eq!(g.value(out).data(), g.value(x).data());
        let out = g.dropout(x, 0.9, false, 7).unwrap();
        assert_eq!(g.value(out).data(), g.value(x).data());
        assert!(g.dropout(x, 1.0, true, 7).is_err());
    }

    #[test]
    fn dropout_empirical_rate() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(&[1, 1, 20, 20, 20], 1.0), false);
        let out = g.dropout(x, 0.5, true, 42).unwrap();
        let zeros = g.value(out).data().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / 8000.0;
        assert!((frac - 0.5).abs() < 0.02, "zero fraction {}", frac);
        let mean: f32 = g.value(out).data().iter().sum::<f32>() / 8000.0;
        assert!((mean - 1.0).abs() < 0.05, "mean {}", mean);
    }

    #[test]
    fn conv_linearity_in_input() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = Tensor::<f32>::zeros(&[1, 2, 4, 4, 4]);
        let mut y = Tensor::<f32>::zeros(&[1, 2, 4, 4, 4]);
        let mut w = Tensor::<f32>::zeros(&[3, 2, 3, 3, 3]);
        super::super::fill_uniform(&mut x, &mut rng, -1.0, 1.0);
        super::super::fill_uniform(&mut y, &mut rng, -1.0, 1.0);
        super::super::fill_uniform(&mut w, &mut rng, -1.0, 1.0);
        let bias = Tensor::zeros(&[3]);
        let (a, b) = (0.7f32, -1.3f32);
        let combo: Vec<f32> = x.data().iter().zip(y.data()).map(|(&xv, &yv)| a * xv + b * yv).collect();
        let combo = Tensor::new(x.shape(), combo).unwrap();

        let mut g = Graph::<f32>::new();
        let wv = g.leaf(w, false);
        let bv = g.leaf(bias, false);
        let xv = g.leaf(x, false);
        let yv = g.leaf(y, false);
        let cv = g.leaf(combo, false);
        let cx = g.conv3d(xv, wv, bv, 1, 1).unwrap();
        let cy = g.conv3d(yv, wv, bv, 1, 1).unwrap();
        let cc = g.conv3d(cv, wv, bv, 1, 1).unwrap();
        for ((&ox, &oy), &oc) in g.value(cx).data().iter().zip(g.value(cy).data()).zip(g.value(cc).data()) {
            assert!((a * ox + b * oy - oc).abs() < 1e-5);
        }
    }
}
