//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and whatever it needs
//! for the backward pass. Nodes are created in topological order, so the
//! backward sweep is a single reverse walk over the tape. A leaf used by
//! several ops (a weight shared by both siamese branches) accumulates the
//! gradient contributions of every use.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use super::kernels;
use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var },
    ConvT { x: Var, w: Var, b: Var },
    MaxPool { x: Var, arg: Vec<u32> },
    GlobalAvgPool { x: Var },
    AbsDiff { a: Var, b: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Dropout { x: Var, scale: Vec<T> },
    Concat { parts: Vec<Var> },
    Crop { x: Var },
    Wbce { y: Var, coeff: Vec<T> },
    WeightedSum { x: Var, coeffs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is propagated to it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf (parameter or probed input).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::Shape(format!("conv kernel must be odd and square, got {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::Shape(format!(
                "conv2d expects {} input channels, got {}",
                ws[1], xs[1]
            )));
        }
        if self.shape(b) != [1, ws[0], 1, 1] {
            return Err(Error::Shape(format!("conv2d bias shape {:?}", self.shape(b))));
        }
        let out = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b));
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Conv2d { x, w, b }, rg))
    }

    /// 2x2 stride-2 transpose convolution; `w` is `[cin, cout, 2, 2]`.
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws[2] != 2 || ws[3] != 2 {
            return Err(Error::Shape(format!("transpose conv kernel must be 2x2, got {ws:?}")));
        }
        if xs[1] != ws[0] {
            return Err(Error::Shape(format!(
                "transpose conv expects {} input channels, got {}",
                ws[0], xs[1]
            )));
        }
        if self.shape(b) != [1, ws[1], 1, 1] {
            return Err(Error::Shape(format!(
                "transpose conv bias shape {:?}",
                self.shape(b)
            )));
        }
        let out = kernels::conv_transpose2x2_forward(self.value(x), self.value(w), self.value(b));
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::ConvT { x, w, b }, rg))
    }

    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::Shape(format!(
                "2x2 pooling needs even spatial dims, got {}x{}",
                s[2], s[3]
            )));
        }
        let (out, arg) = kernels::max_pool2x2(self.value(x));
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool { x, arg }, rg))
    }

    pub fn max_pool3x3_same(&mut self, x: Var) -> Var {
        let (out, arg) = kernels::max_pool3x3_same(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::MaxPool { x, arg }, rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::from_vec([n, c, 1, 1], data), Op::GlobalAvgPool { x }, rg)
    }

    pub fn abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "abs_diff operands {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| (p - q).abs())
            .collect();
        let out = Tensor::from_vec(self.shape(a), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AbsDiff { a, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::from_vec(v.shape(), v.data().iter().map(|&e| e.max(T::zero())).collect());
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::from_vec(
            v.shape(),
            v.data()
                .iter()
                .map(|&e| T::one() / (T::one() + (-e).exp()))
                .collect(),
        );
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`;
    /// evaluation mode is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} not in [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let scale: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let v = self.value(x);
        let out = Tensor::from_vec(
            v.shape(),
            v.data().iter().zip(&scale).map(|(&e, &s)| e * s).collect(),
        );
        let rg = self.rg(x);
        Ok(self.push(out, Op::Dropout { x, scale }, rg))
    }

    /// Channel-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("concat of zero tensors".into()))?;
        let [n, _, h, w] = self.shape(*first);
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::Shape(format!(
                    "concat operands disagree: {:?} vs {:?}",
                    self.shape(*first),
                    s
                )));
            }
            c_total += s[1];
        }
        let hw = h * w;
        let mut out = Tensor::zeros([n, c_total, h, w]);
        let od = out.data_mut();
        for b in 0..n {
            let mut c_off = 0;
            for &p in parts {
                let v = self.value(p);
                let c = v.c();
                let src = &v.data()[b * c * hw..(b + 1) * c * hw];
                let dst0 = (b * c_total + c_off) * hw;
                od[dst0..dst0 + c * hw].copy_from_slice(src);
                c_off += c;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Keeps the top-left `h x w` window of every plane.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let [n, c, hs, ws] = self.shape(x);
        if h > hs || w > ws || h == 0 || w == 0 {
            return Err(Error::Shape(format!("crop {h}x{w} outside {hs}x{ws}")));
        }
        if (h, w) == (hs, ws) {
            return Ok(x);
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * h * w);
        for plane in 0..n * c {
            for y in 0..h {
                let s0 = plane * hs * ws + y * ws;
                data.extend_from_slice(&src[s0..s0 + w]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec([n, c, h, w], data), Op::Crop { x }, rg))
    }

    /// Weighted binary cross-entropy averaged over valid elements:
    /// `-mean[w_p * t * ln(y) + (1 - t) * ln(1 - y)]`, with `y` clamped to
    /// `[1e-7, 1 - 1e-7]`. `labels` holds 0/1 targets; `valid`, when given,
    /// excludes elements from the mean.
    pub fn wbce(&mut self, y: Var, labels: &[T], valid: Option<&[bool]>, w_p: f64) -> Result<Var> {
        let yv = self.value(y);
        if labels.len() != yv.len() || valid.is_some_and(|m| m.len() != yv.len()) {
            return Err(Error::Shape(format!(
                "wbce: {} predictions, {} labels",
                yv.len(),
                labels.len()
            )));
        }
        if w_p.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::InvalidArgument(format!("w_p must be positive, got {w_p}")));
        }
        let count = match valid {
            Some(m) => m.iter().filter(|&&v| v).count(),
            None => yv.len(),
        };
        if count == 0 {
            return Err(Error::Empty("wbce: no valid pixels".into()));
        }
        let lo = T::from_f64_lossy(1e-7);
        let hi = T::one() - lo;
        let wp = T::from_f64_lossy(w_p);
        let inv = T::one() / T::from_usize(count).unwrap();
        let mut total = T::zero();
        let mut coeff = vec![T::zero(); yv.len()];
        for (i, (&p, &t)) in yv.data().iter().zip(labels).enumerate() {
            if valid.is_some_and(|m| !m[i]) {
                continue;
            }
            let pc = p.max(lo).min(hi);
            total -= wp * t * pc.ln() + (T::one() - t) * (T::one() - pc).ln();
            if p > lo && p < hi {
                coeff[i] = -(wp * t / pc - (T::one() - t) / (T::one() - pc)) * inv;
            }
        }
        let rg = self.rg(y);
        Ok(self.push(Tensor::scalar(total * inv), Op::Wbce { y, coeff }, rg))
    }

    /// `sum_i coeffs[i] * x[i]`; projects a tensor to a scalar for probing.
    pub fn weighted_sum(&mut self, x: Var, coeffs: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if coeffs.len() != xv.len() {
            return Err(Error::Shape(format!(
                "weighted_sum: {} coefficients for {} elements",
                coeffs.len(),
                xv.len()
            )));
        }
        let s = xv.data().iter().zip(coeffs).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                coeffs: coeffs.to_vec(),
            },
            rg,
        ))
    }

    /// Hash of every non-smooth branch decision taken in the forward pass
    /// (ReLU gates, pooling argmaxes, |a-b| signs, loss clamps). Two passes
    /// with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for v in self.value(*x).data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { arg, .. } => arg.hash(&mut h),
                Op::AbsDiff { a, b } => {
                    for (p, q) in self.value(*a).data().iter().zip(self.value(*b).data()) {
                        p.partial_cmp(q).hash(&mut h);
                    }
                }
                Op::Wbce { coeff, .. } => {
                    for c in coeff {
                        (*c == T::zero()).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if self.shape(out) != [1, 1, 1, 1] {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d { x, w, b } => {
                    let r = kernels::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        [self.rg(*x), self.rg(*w), self.rg(*b)],
                    );
                    accumulate(&mut grads, *x, r.x);
                    accumulate(&mut grads, *w, r.weight);
                    accumulate(&mut grads, *b, r.bias);
                }
                Op::ConvT { x, w, b } => {
                    let r = kernels::conv_transpose2x2_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        [self.rg(*x), self.rg(*w), self.rg(*b)],
                    );
                    accumulate(&mut grads, *x, r.x);
                    accumulate(&mut grads, *w, r.weight);
                    accumulate(&mut grads, *b, r.bias);
                }
                Op::MaxPool { x, arg } => {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    let d = dx.data_mut();
                    for (&a, &gv) in arg.iter().zip(g.data()) {
                        d[a as usize] += gv;
                    }
                    accumulate(&mut grads, *x, Some(dx));
                }
                Op::GlobalAvgPool { x } => {
                    let s = self.shape(*x);
                    let hw = s[2] * s[3];
                    let inv = T::one() / T::from_usize(hw).unwrap();
                    let mut dx = Tensor::zeros(s);
                    for (plane, &gv) in dx.data_mut().chunks_mut(hw).zip(g.data()) {
                        plane.fill(gv * inv);
                    }
                    accumulate(&mut grads, *x, Some(dx));
                }
                Op::AbsDiff { a, b } => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let sign: Vec<T> = av
                        .iter()
                        .zip(bv)
                        .zip(g.data())
                        .map(|((&p, &q), &gv)| {
                            if p > q {
                                gv
                            } else if p < q {
                                -gv
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    let s = g.shape();
                    if self.rg(*b) {
                        let neg = sign.iter().map(|&v| -v).collect();
                        accumulate(&mut grads, *b, Some(Tensor::from_vec(s, neg)));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, Some(Tensor::from_vec(s, sign)));
                    }
                }
                Op::Relu { x } => {
                    let xv = self.value(*x).data();
                    let d = xv
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *x, Some(Tensor::from_vec(g.shape(), d)));
                }
                Op::Sigmoid { x } => {
                    let d = node
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&s, &gv)| gv * s * (T::one() - s))
                        .collect();
                    accumulate(&mut grads, *x, Some(Tensor::from_vec(g.shape(), d)));
                }
                Op::Dropout { x, scale } => {
                    let d = scale.iter().zip(g.data()).map(|(&s, &gv)| s * gv).collect();
                    accumulate(&mut grads, *x, Some(Tensor::from_vec(g.shape(), d)));
                }
                Op::Concat { parts } => {
                    let [n, c_total, h, w] = g.shape();
                    let hw = h * w;
                    let mut c_off = 0;
                    for &p in parts {
                        let c = self.shape(p)[1];
                        if self.rg(p) {
                            let mut dp = Tensor::zeros([n, c, h, w]);
                            for b in 0..n {
                                let src0 = (b * c_total + c_off) * hw;
                                dp.data_mut()[b * c * hw..(b + 1) * c * hw]
                                    .copy_from_slice(&g.data()[src0..src0 + c * hw]);
                            }
                            accumulate(&mut grads, p, Some(dp));
                        }
                        c_off += c;
                    }
                }
                Op::Crop { x } => {
                    let xs = self.shape(*x);
                    let [_, _, h, w] = g.shape();
                    let mut dx = Tensor::zeros(xs);
                    let d = dx.data_mut();
                    for plane in 0..xs[0] * xs[1] {
                        for y in 0..h {
                            let dst = plane * xs[2] * xs[3] + y * xs[3];
                            let src = plane * h * w + y * w;
                            d[dst..dst + w].copy_from_slice(&g.data()[src..src + w]);
                        }
                    }
                    accumulate(&mut grads, *x, Some(dx));
                }
                Op::Wbce { y, coeff } => {
                    let gv = g.data()[0];
                    let d = coeff.iter().map(|&c| c * gv).collect();
                    accumulate(&mut grads, *y, Some(Tensor::from_vec(self.shape(*y), d)));
                }
                Op::WeightedSum { x, coeffs } => {
                    let gv = g.data()[0];
                    let d = coeffs.iter().map(|&c| c * gv).collect();
                    accumulate(&mut grads, *x, Some(Tensor::from_vec(self.shape(*x), d)));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Option<Tensor<T>>) {
    let Some(g) = g else { return };
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of a scalar with respect to the differentiable leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when the leaf does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Shape, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec())
    }

    #[test]
    fn identity_1x1_conv_passes_input_through() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t([1, 2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]));
        let w = g.input(t([2, 2, 1, 1], &[1., 0., 0., 1.]));
        let b = g.input(Tensor::zeros([1, 2, 1, 1]));
        let y = g.conv2d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn all_ones_3x3_conv_counts_overlap() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full([1, 1, 3, 3], 1.0));
        let w = g.input(Tensor::full([1, 1, 3, 3], 1.0));
        let b = g.input(Tensor::zeros([1, 1, 1, 1]));
        let y = g.conv2d(x, w, b).unwrap();
        let v = g.value(y);
        assert_eq!(v.at(0, 0, 1, 1), 9.0);
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(v.at(0, 0, r, c), 4.0);
        }
        assert_eq!(v.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros([1, 3, 4, 4]));
        let w = g.input(Tensor::zeros([2, 2, 3, 3]));
        let b = g.input(Tensor::zeros([1, 2, 1, 1]));
        assert!(matches!(g.conv2d(x, w, b), Err(Error::Shape(_))));
    }

    #[test]
    fn same_padding_preserves_shape_for_all_kernel_sizes() {
        for k in [1, 3, 5] {
            let mut g = Graph::<f32>::new();
            let x = g.input(Tensor::zeros([2, 3, 7, 9]));
            let w = g.input(Tensor::zeros([4, 3, k, k]));
            let b = g.input(Tensor::zeros([1, 4, 1, 1]));
            let y = g.conv2d(x, w, b).unwrap();
            assert_eq!(g.shape(y), [2, 4, 7, 9]);
        }
    }

    #[test]
    fn transpose_conv_single_tap_expands_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t([1, 1, 1, 1], &[3.0]));
        let w = g.input(t([1, 1, 2, 2], &[1., 2., 3., 4.]));
        let b = g.input(Tensor::zeros([1, 1, 1, 1]));
        let y = g.conv_transpose2x2(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3., 6., 9., 12.]);

        let x7 = g.input(Tensor::zeros([1, 1, 7, 7]));
        let y7 = g.conv_transpose2x2(x7, w, b).unwrap();
        assert_eq!(g.shape(y7), [1, 1, 14, 14]);
    }

    #[test]
    fn pooling_contracts() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t([1, 1, 2, 2], &[1., 2., 3., 4.]));
        let y = g.max_pool2x2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let c = g.input(Tensor::full([1, 2, 4, 4], 2.5));
        let p2 = g.max_pool2x2(c).unwrap();
        let p3 = g.max_pool3x3_same(c);
        assert!(g.value(p2).data().iter().all(|&v| v == 2.5));
        assert!(g.value(p3).data().iter().all(|&v| v == 2.5));

        let odd = g.input(Tensor::zeros([1, 1, 3, 4]));
        assert!(g.max_pool2x2(odd).is_err());
    }

    #[test]
    fn global_avg_pool_of_row_index_plane() {
        let mut g = Graph::<f64>::new();
        let vals: Vec<f64> = (0..13).flat_map(|r| std::iter::repeat_n(r as f64, 13)).collect();
        let x = g.input(t([1, 1, 13, 13], &vals));
        let y = g.global_avg_pool(x);
        assert_eq!(g.shape(y), [1, 1, 1, 1]);
        assert!((g.value(y).data()[0] - 6.0).abs() < 1e-12);

        let c = g.input(Tensor::full([1, 1, 5, 5], -1.25));
        let yc = g.global_avg_pool(c);
        assert_eq!(g.value(yc).data(), &[-1.25]);
    }

    #[test]
    fn abs_diff_and_activations() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t([1, 1, 1, 1], &[3.0]));
        let b = g.input(t([1, 1, 1, 1], &[5.0]));
        let d = g.abs_diff(a, b).unwrap();
        assert_eq!(g.value(d).data(), &[2.0]);
        let z = g.abs_diff(a, a).unwrap();
        assert_eq!(g.value(z).data(), &[0.0]);

        let x = g.input(t([1, 1, 1, 3], &[-1.0, 2.0, 0.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data()[2], 0.5);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::<f64>::new();
        let x = g.input(t([1, 1, 1, 4], &[1., 2., 3., 4.]));
        for (rate, mode) in [(0.0, Mode::Train), (0.0, Mode::Eval), (0.7, Mode::Eval)] {
            let y = g.dropout(x, rate, mode, &mut rng).unwrap();
            assert_eq!(g.value(y).data(), g.value(x).data());
        }
        assert!(g.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_statistics_at_half_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::<f64>::new();
        let n = 100_000;
        let x = g.input(Tensor::full([1, 1, 1, n], 1.0));
        let y = g.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        let out = g.value(y).data();
        let kept = out.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        let mean = out.iter().sum::<f64>() / n as f64;
        assert!((kept - 0.5).abs() < 0.01, "kept fraction {kept}");
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn wbce_reference_values() {
        let mut g = Graph::<f64>::new();
        let y = g.input(t([1, 1, 1, 1], &[0.5]));
        let l0 = g.wbce(y, &[0.0], None, 7.0).unwrap();
        assert!((g.value(l0).data()[0] - 0.693147).abs() < 1e-6);
        let l1 = g.wbce(y, &[1.0], None, 4.0).unwrap();
        assert!((g.value(l1).data()[0] - 2.772589).abs() < 1e-6);

        let sure = g.input(t([1, 1, 1, 1], &[1.0 - 1e-9]));
        let l2 = g.wbce(sure, &[1.0], None, 3.0).unwrap();
        assert!(g.value(l2).data()[0] < 1e-6);

        let valid = [false];
        assert!(matches!(
            g.wbce(y, &[1.0], Some(&valid), 1.0),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn wbce_masks_undefined_pixels() {
        let mut g = Graph::<f64>::new();
        let y = g.input(t([1, 1, 1, 2], &[0.5, 0.01]));
        let l = g.wbce(y, &[0.0, 1.0], Some(&[true, false]), 2.0).unwrap();
        assert!((g.value(l).data()[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shared_leaf_accumulates_both_uses() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(t([1, 1, 1, 1], &[2.0]));
        let b = g.input(Tensor::zeros([1, 1, 1, 1]));
        let x1 = g.input(t([1, 1, 1, 1], &[3.0]));
        let x2 = g.input(t([1, 1, 1, 1], &[5.0]));
        let y1 = g.conv2d(x1, w, b).unwrap();
        let y2 = g.conv2d(x2, w, b).unwrap();
        let both = g.concat(&[y1, y2]).unwrap();
        let s = g.weighted_sum(both, &[1.0, 1.0]).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[8.0]);
        assert!(grads.get(b).is_none());
    }
}
