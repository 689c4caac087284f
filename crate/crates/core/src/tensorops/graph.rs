//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and the backward sweep is a single reverse pass.
//! Leaves created with [`ComputeGraph::param`] receive gradients; leaves
//! created with [`ComputeGraph::constant`] and everything computed purely
//! from constants are skipped during the sweep.

use crate::error::{Error, Result};

use super::tensor::{gemm_into, gemm_tn_into, softmax_in_place, Element, Tensor};

/// Probabilities below this are clamped before taking a logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    AvgPool2x2 { x: Var, batch: usize, h: usize, w: usize },
    GlobalAvgPool { x: Var, batch: usize },
    SoftmaxRows(Var),
    Sum(Var),
    CrossEntropy { probs: Var, labels: Vec<usize> },
    Focal { probs: Var, labels: Vec<Option<usize>>, gamma: f64 },
    MseRows { x: Var, target: Var },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

pub struct ComputeGraph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for ComputeGraph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every parameter leaf.
pub struct Gradients<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for `var`, or `None` when it does not require one.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.slots.get(var.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.slots.get_mut(var.0).and_then(|s| s.take())
    }
}

impl<T: Element> ComputeGraph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {op:?}"
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "gemm inner dimensions differ: {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg)
    }

    /// Adds a length-`c` bias to every row of an `[r×c]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(bias).numel() != c {
            return Err(Error::Dimension(format!(
                "bias {:?} does not match {:?}",
                self.value(bias).shape(),
                self.value(x).shape()
            )));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in 0..r {
            for (o, &bv) in out.data_mut()[row * c..(row + 1) * c].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.any_grad(&[x, bias]);
        self.push(out, Op::AddBias(x, bias), rg)
    }

    /// Elementwise product of two same-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "elementwise product of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Smallest |input| over every ReLU on the tape; `None` without ReLUs.
    /// Central differences are only meaningful when this exceeds the step.
    pub fn kink_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.value(x).data().iter().map(|v| v.as_f64().abs()))
            .reduce(f64::min)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// 2×2 average pooling over a channel-last map stored as
    /// `[batch·h·w × c]` rows ordered (image, row, column).
    pub fn avg_pool2x2(&mut self, x: Var, batch: usize, h: usize, w: usize) -> Result<Var> {
        let (rows, c) = self.value(x).dims2()?;
        if rows != batch * h * w || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "cannot 2x2-pool {:?} as {batch}x{h}x{w}",
                self.value(x).shape()
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); batch * ho * wo * c];
        let quarter = T::of(0.25);
        for b in 0..batch {
            for y in 0..ho {
                for xo in 0..wo {
                    let dst = &mut out[((b * ho + y) * wo + xo) * c..][..c];
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let r = (b * h + 2 * y + dy) * w + 2 * xo + dx;
                        for (o, &v) in dst.iter_mut().zip(&src[r * c..(r + 1) * c]) {
                            *o += v;
                        }
                    }
                    for o in dst.iter_mut() {
                        *o *= quarter;
                    }
                }
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(
            Tensor::matrix(batch * ho * wo, c, out)?,
            Op::AvgPool2x2 { x, batch, h, w },
            rg,
        )
    }

    /// Mean over all spatial rows of each image: `[batch·hw × c] → [batch × c]`.
    pub fn global_avg_pool(&mut self, x: Var, batch: usize) -> Result<Var> {
        let (rows, c) = self.value(x).dims2()?;
        if batch == 0 || rows % batch != 0 {
            return Err(Error::Dimension(format!(
                "cannot pool {:?} over {batch} images",
                self.value(x).shape()
            )));
        }
        let hw = rows / batch;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); batch * c];
        let scale = T::one() / T::of(hw as f64);
        for b in 0..batch {
            let dst = &mut out[b * c..(b + 1) * c];
            for r in 0..hw {
                for (o, &v) in dst.iter_mut().zip(&src[(b * hw + r) * c..][..c]) {
                    *o += v;
                }
            }
            for o in dst.iter_mut() {
                *o *= scale;
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor::matrix(batch, c, out)?, Op::GlobalAvgPool { x, batch }, rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let mut out = self.value(x).clone();
        for row in 0..r {
            softmax_in_place(&mut out.data_mut()[row * c..(row + 1) * c]);
        }
        let rg = self.any_grad(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean over rows of `−ln p[row, label]`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.value(probs).dims2()?;
        if labels.len() != r {
            return Err(Error::Dimension(format!(
                "{} labels for {r} prediction rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(format!("label {bad} out of range for {c} classes")));
        }
        let p = self.value(probs).data();
        let clamp = T::of(LOG_CLAMP);
        let mut total = T::zero();
        for (row, &l) in labels.iter().enumerate() {
            total -= p[row * c + l].max(clamp).ln();
        }
        let loss = total / T::of(r as f64);
        let rg = self.any_grad(&[probs]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    /// Mean over rows of the focal term `−(1 − p)^γ ln p` at the labelled
    /// class; rows labelled `None` contribute nothing to value or gradient.
    pub fn focal(&mut self, probs: Var, labels: &[Option<usize>], gamma: f64) -> Result<Var> {
        let (r, c) = self.value(probs).dims2()?;
        if labels.len() != r {
            return Err(Error::Dimension(format!(
                "{} labels for {r} prediction rows",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().flatten().find(|&&l| l >= c) {
            return Err(Error::Contract(format!("label {bad} out of range for {c} classes")));
        }
        let p = self.value(probs).data();
        let mut total = T::zero();
        for (row, l) in labels.iter().enumerate() {
            if let Some(l) = *l {
                total += focal_term(p[row * c + l], gamma);
            }
        }
        let loss = total / T::of(r as f64);
        let rg = self.any_grad(&[probs]);
        self.push(
            Tensor::scalar(loss),
            Op::Focal {
                probs,
                labels: labels.to_vec(),
                gamma,
            },
            rg,
        )
    }

    /// Mean over rows of `(1/d)‖x_row − target_row‖²`.
    pub fn mse_rows(&mut self, x: Var, target: Var) -> Result<Var> {
        let (r, d) = self.value(x).dims2()?;
        if self.value(x).shape() != self.value(target).shape() {
            return Err(Error::Dimension(format!(
                "consistency between {:?} and {:?}",
                self.value(x).shape(),
                self.value(target).shape()
            )));
        }
        let mut total = T::zero();
        for (&a, &b) in self.value(x).data().iter().zip(self.value(target).data()) {
            let diff = a - b;
            total += diff * diff;
        }
        let loss = total / T::of((r * d) as f64);
        let rg = self.any_grad(&[x, target]);
        self.push(Tensor::scalar(loss), Op::MseRows { x, target }, rg)
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes. Terms with zero weight are dropped from
    /// the tape entirely, so they leave no trace in any gradient.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let kept: Vec<(Var, f64)> = terms.iter().copied().filter(|&(_, w)| w != 0.0).collect();
        let mut total = T::zero();
        for &(v, w) in &kept {
            if self.value(v).numel() != 1 {
                return Err(Error::Dimension(format!(
                    "weighted sum term {:?} is not scalar",
                    self.value(v).shape()
                )));
            }
            total += T::of(w) * self.value(v).data()[0];
        }
        let vars: Vec<Var> = kept.iter().map(|t| t.0).collect();
        let rg = self.any_grad(&vars);
        self.push(Tensor::scalar(total), Op::WeightedSum(kept), rg)
    }

    /// Gradients of scalar `output` with respect to every parameter leaf,
    /// summed over all paths.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar seed, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { slots });
        }
        slots[output.0] = Some(Tensor::filled(self.value(output).shape(), T::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = slots[idx].take() else { continue };
            self.backward_node(&node.op, &node.value, g, &mut slots)?;
        }
        for (slot, node) in slots.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { slots })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(
        &self,
        op: &Op,
        out: &Tensor<T>,
        g: Tensor<T>,
        slots: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2()?;
                let (_, n) = bv.dims2()?;
                if self.wants(*a) {
                    let bt = bv.transpose()?;
                    let mut da = vec![T::zero(); m * k];
                    gemm_into(g.data(), bt.data(), &mut da, m, n, k);
                    accumulate(slots, *a, Tensor::new(av.shape().to_vec(), da)?)?;
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn_into(av.data(), g.data(), &mut db, m, k, n);
                    accumulate(slots, *b, Tensor::new(bv.shape().to_vec(), db)?)?;
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(*bias) {
                    let (r, c) = g.dims2()?;
                    let mut db = vec![T::zero(); c];
                    for row in 0..r {
                        for (d, &gv) in db.iter_mut().zip(&g.data()[row * c..(row + 1) * c]) {
                            *d += gv;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    accumulate(slots, *bias, Tensor::new(shape, db)?)?;
                }
                if self.wants(*x) {
                    accumulate(slots, *x, g)?;
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(this) {
                        let ov = self.value(other);
                        let data = g.data().iter().zip(ov.data()).map(|(&gv, &o)| gv * o).collect();
                        accumulate(slots, this, Tensor::new(g.shape().to_vec(), data)?)?;
                    }
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let data = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(&gv, &o)| if o > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(slots, *x, Tensor::new(g.shape().to_vec(), data)?)?;
                }
            }
            Op::AvgPool2x2 { x, batch, h, w } => {
                if self.wants(*x) {
                    let (_, c) = g.dims2()?;
                    let (ho, wo) = (h / 2, w / 2);
                    let mut dx = vec![T::zero(); batch * h * w * c];
                    let quarter = T::of(0.25);
                    for b in 0..*batch {
                        for y in 0..ho {
                            for xo in 0..wo {
                                let src = &g.data()[((b * ho + y) * wo + xo) * c..][..c];
                                for (dy, dxx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    let r = (b * h + 2 * y + dy) * w + 2 * xo + dxx;
                                    for (d, &gv) in dx[r * c..(r + 1) * c].iter_mut().zip(src) {
                                        *d += gv * quarter;
                                    }
                                }
                            }
                        }
                    }
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(slots, *x, Tensor::new(shape, dx)?)?;
                }
            }
            Op::GlobalAvgPool { x, batch } => {
                if self.wants(*x) {
                    let (rows, c) = self.value(*x).dims2()?;
                    let hw = rows / batch;
                    let scale = T::one() / T::of(hw as f64);
                    let mut dx = vec![T::zero(); rows * c];
                    for b in 0..*batch {
                        let src = &g.data()[b * c..(b + 1) * c];
                        for r in 0..hw {
                            for (d, &gv) in dx[(b * hw + r) * c..][..c].iter_mut().zip(src) {
                                *d = gv * scale;
                            }
                        }
                    }
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(slots, *x, Tensor::new(shape, dx)?)?;
                }
            }
            Op::SoftmaxRows(x) => {
                if self.wants(*x) {
                    let (r, c) = out.dims2()?;
                    let mut dx = vec![T::zero(); r * c];
                    for row in 0..r {
                        let p = &out.data()[row * c..(row + 1) * c];
                        let gr = &g.data()[row * c..(row + 1) * c];
                        let dot: T = p.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &pv), &gv) in dx[row * c..(row + 1) * c].iter_mut().zip(p).zip(gr) {
                            *d = pv * (gv - dot);
                        }
                    }
                    accumulate(slots, *x, Tensor::new(out.shape().to_vec(), dx)?)?;
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(slots, *x, Tensor::filled(&shape, g.data()[0]))?;
                }
            }
            Op::CrossEntropy { probs, labels } => {
                if self.wants(*probs) {
                    let pv = self.value(*probs);
                    let (r, c) = pv.dims2()?;
                    let scale = g.data()[0] / T::of(r as f64);
                    let clamp = T::of(LOG_CLAMP);
                    let mut dp = vec![T::zero(); r * c];
                    for (row, &l) in labels.iter().enumerate() {
                        let p = pv.data()[row * c + l];
                        if p > clamp {
                            dp[row * c + l] = -scale / p;
                        }
                    }
                    accumulate(slots, *probs, Tensor::new(pv.shape().to_vec(), dp)?)?;
                }
            }
            Op::Focal {
                probs,
                labels,
                gamma,
            } => {
                if self.wants(*probs) {
                    let pv = self.value(*probs);
                    let (r, c) = pv.dims2()?;
                    let scale = g.data()[0] / T::of(r as f64);
                    let mut dp = vec![T::zero(); r * c];
                    let clamp = T::of(LOG_CLAMP);
                    for (row, l) in labels.iter().enumerate() {
                        if let Some(l) = *l {
                            let p = pv.data()[row * c + l];
                            // γ = 0 takes the cross-entropy path so the two agree bitwise.
                            dp[row * c + l] = if *gamma != 0.0 {
                                scale * focal_term_grad(p, *gamma)
                            } else if p > clamp {
                                -scale / p
                            } else {
                                T::zero()
                            };
                        }
                    }
                    accumulate(slots, *probs, Tensor::new(pv.shape().to_vec(), dp)?)?;
                }
            }
            Op::MseRows { x, target } => {
                let xv = self.value(*x);
                let tv = self.value(*target);
                let scale = T::of(2.0) * g.data()[0] / T::of(xv.numel() as f64);
                let diff: Vec<T> = xv
                    .data()
                    .iter()
                    .zip(tv.data())
                    .map(|(&a, &b)| scale * (a - b))
                    .collect();
                if self.wants(*target) {
                    let neg = diff.iter().map(|&d| -d).collect();
                    accumulate(slots, *target, Tensor::new(tv.shape().to_vec(), neg)?)?;
                }
                if self.wants(*x) {
                    accumulate(slots, *x, Tensor::new(xv.shape().to_vec(), diff)?)?;
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.wants(v) {
                        accumulate(slots, v, Tensor::scalar(T::of(w) * g.data()[0]))?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Element>(slots: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut slots[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// `−(1 − p)^γ · ln max(p, clamp)`.
pub fn focal_term<T: Element>(p: T, gamma: f64) -> T {
    let logp = p.max(T::of(LOG_CLAMP)).ln();
    let weight = if gamma == 0.0 {
        T::one()
    } else {
        (T::one() - p).max(T::zero()).powf(T::of(gamma))
    };
    -weight * logp
}

/// Derivative of [`focal_term`] with respect to `p`.
pub fn focal_term_grad<T: Element>(p: T, gamma: f64) -> T {
    let clamp = T::of(LOG_CLAMP);
    let q = (T::one() - p).max(T::zero());
    let (weight, dweight) = if gamma == 0.0 {
        (T::one(), T::zero())
    } else if q == T::zero() {
        // d/dp (1-p)^γ at p = 1 is zero for γ > 1 and −1 for γ = 1.
        let d = if gamma == 1.0 { -T::one() } else { T::zero() };
        (T::zero(), d)
    } else {
        let g = T::of(gamma);
        (q.powf(g), -g * q.powf(g - T::one()))
    };
    let (logp, dlogp) = if p > clamp {
        (p.ln(), T::one() / p)
    } else {
        (clamp.ln(), T::zero())
    };
    -(dweight * logp + weight * dlogp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_square() {
        let mut g = ComputeGraph::<f64>::new();
        let w = g.param(Tensor::scalar(3.0));
        let s = g.sum(w).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0]);

        let mut g = ComputeGraph::<f64>::new();
        let w = g.param(Tensor::scalar(3.0));
        let sq = g.mul(w, w).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_seed_rejected() {
        let mut g = ComputeGraph::<f64>::new();
        let w = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = ComputeGraph::<f64>::new();
        let a = g.param(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(5.0));
        let p = g.mul(a, c).unwrap();
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[5.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn pooling_backward_spreads_evenly() {
        let mut g = ComputeGraph::<f64>::new();
        let x = g.param(Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = g.avg_pool2x2(x, 1, 2, 2).unwrap();
        assert_eq!(g.value(p).data(), &[2.5]);
        let gap = g.global_avg_pool(x, 1).unwrap();
        assert_eq!(g.value(gap).data(), &[2.5]);
        let s = g.weighted_sum(&[(p, 1.0), (gap, 1.0)]).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.5; 4]);
    }

    #[test]
    fn focal_grad_matches_difference_quotient() {
        for &gamma in &[0.0, 1.0, 2.0, 0.5] {
            for &p in &[0.05f64, 0.3, 0.7, 0.99] {
                let h = 1e-6;
                let num = (focal_term(p + h, gamma) - focal_term(p - h, gamma)) / (2.0 * h);
                let ana = focal_term_grad(p, gamma);
                assert!((num - ana).abs() < 1e-6 * ana.abs().max(1.0), "γ={gamma} p={p}");
            }
        }
    }
}
