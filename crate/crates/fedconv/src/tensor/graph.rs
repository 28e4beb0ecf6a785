//! Reverse-mode autodiff over tensor-valued nodes.
//!
//! A [`Graph`] is a tape: operations append nodes whose parents already sit
//! on the tape, so insertion order is a topological order and the backward
//! pass is a single reverse sweep that visits each node exactly once.

use super::conv::{self, ConvDims};
use super::Tensor;
use crate::error::{Error, Result};
use std::collections::HashMap;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, Var),
    ScaleConst(Var, f64),
    Sum(Var),
    Dot(Var, Var),
    MatmulNt(Var, Var),
    Relu(Var),
    Mlr { x: Var, s_p: f64, s_n: f64 },
    Conv2d { input: Var, kernel: Var, dims: ConvDims },
    TConv2d { input: Var, kernel: Var, dims: ConvDims },
    WeightNorm { direction: Var, magnitude: Var },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    Reshape(Var),
    Narrow0 { src: Var, start: usize },
    Concat0(Vec<Var>),
    SlicesToConvWeight { src: Var, k1: usize, k2: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of operation records with parent links.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients for the trainable leaves of a graph, keyed by [`Var`].
pub struct GradientMap {
    grads: HashMap<usize, Tensor>,
}

impl GradientMap {
    /// Gradient of the loss with respect to a leaf, if it required one.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Install a tensor as a leaf. Its `requires_grad` flag decides whether
    /// the backward pass reports a gradient for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = value.requires_grad();
        self.push(value, Op::Leaf, rg)
    }

    /// Install a frozen leaf regardless of the tensor's flag.
    pub fn constant(&mut self, mut value: Tensor) -> Var {
        value.requires_grad = false;
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    fn out(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, rg: bool) -> Var {
        let t = Tensor {
            shape,
            data,
            requires_grad: false,
        };
        self.push(t, op, rg)
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Input(format!(
                "add shape mismatch: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.out(data, shape, Op::Add(a, b), rg))
    }

    /// Broadcast a bias over the channel axis: `[N,C,H,W] + [C]` or `[N,K] + [K]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = match tx.rank() {
            4 => tx.shape()[1],
            2 => tx.shape()[1],
            r => {
                return Err(Error::Input(format!("add_bias on rank-{r} tensor")));
            }
        };
        if tb.shape() != [c] {
            return Err(Error::Input(format!(
                "bias shape {:?} does not match channel count {c}",
                tb.shape()
            )));
        }
        let shape = tx.shape().to_vec();
        let mut data = tx.data().to_vec();
        if tx.rank() == 4 {
            let hw = shape[2] * shape[3];
            for n in 0..shape[0] {
                for ch in 0..c {
                    let base = (n * c + ch) * hw;
                    let b = tb.data()[ch];
                    for v in &mut data[base..base + hw] {
                        *v += b;
                    }
                }
            }
        } else {
            for n in 0..shape[0] {
                for ch in 0..c {
                    data[n * c + ch] += tb.data()[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.out(data, shape, Op::AddBias(x, bias), rg))
    }

    /// Multiply a tensor by a scalar node (the scalar may be trainable).
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * sv).collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.out(data, shape, Op::Scale(x, s), rg))
    }

    pub fn scale_const(&mut self, x: Var, c: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * c).collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(x);
        self.out(data, shape, Op::ScaleConst(x, c), rg)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.out(vec![s], vec![1], Op::Sum(x), rg)
    }

    /// Inner product of two same-shaped tensors, as a scalar node.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Input(format!(
                "dot shape mismatch: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.out(vec![s], vec![1], Op::Dot(a, b), rg))
    }

    /// `x[N,I] . w[O,I]^T -> [N,O]` (dense layer product).
    pub fn matmul_nt(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 2 || tw.rank() != 2 || tx.shape()[1] != tw.shape()[1] {
            return Err(Error::Input(format!(
                "matmul_nt shapes {:?} x {:?}",
                tx.shape(),
                tw.shape()
            )));
        }
        let (n, i, o) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
        let data = conv::matmul_nt(tx.data(), tw.data(), n, i, o);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.out(data, vec![n, o], Op::MatmulNt(x, w), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(x);
        self.out(data, shape, Op::Relu(x), rg)
    }

    /// Modified Leaky ReLU: `s_p*x` for `x >= 0`, `s_n*x` for `x < 0`.
    /// The subgradient at 0 is `s_p`.
    pub fn mlr(&mut self, x: Var, s_p: f64, s_n: f64) -> Var {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { s_p * v } else { s_n * v })
            .collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(x);
        self.out(data, shape, Op::Mlr { x, s_p, s_n }, rg)
    }

    /// 2-D convolution of `input[N,C_in,H,W]` with `kernel[C_out,C_in,k1,k2]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        let dims = ConvDims::infer(ti.shape(), tk.shape(), stride, padding)?;
        let data = conv::conv_fwd(ti.data(), tk.data(), &dims);
        let shape = vec![dims.n, dims.c_out, dims.h_out, dims.w_out];
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.out(data, shape, Op::Conv2d { input, kernel, dims }, rg))
    }

    /// Transposed 2-D convolution: the exact adjoint of [`Graph::conv2d`]
    /// with the same kernel layout `[C_out,C_in,k1,k2]`. The input carries
    /// `C_out` channels and the output `C_in`.
    pub fn transposed_conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        if ti.rank() != 4 || tk.rank() != 4 {
            return Err(Error::Input(format!(
                "transposed conv expects rank-4 input and kernel, got {:?} and {:?}",
                ti.shape(),
                tk.shape()
            )));
        }
        let (n, c, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2], ti.shape()[3]);
        let (c_out, c_in, k1, k2) = (
            tk.shape()[0],
            tk.shape()[1],
            tk.shape()[2],
            tk.shape()[3],
        );
        if c != c_out {
            return Err(Error::Config(format!(
                "transposed conv input has {c} channels but kernel maps from {c_out}"
            )));
        }
        let h_big = super::conv::tconv_out_dim(h, k1, stride, padding)?;
        let w_big = super::conv::tconv_out_dim(w, k2, stride, padding)?;
        // The adjoint is computed with the dims of the matching forward conv.
        let dims = ConvDims::infer(&[n, c_in, h_big, w_big], tk.shape(), stride, padding)?;
        if dims.h_out != h || dims.w_out != w {
            return Err(Error::Config(format!(
                "transposed conv configuration is not the adjoint of a conv: \
                 forward output would be {}x{}, input is {h}x{w}",
                dims.h_out, dims.w_out
            )));
        }
        let data = conv::conv_adj_input(ti.data(), tk.data(), &dims);
        let shape = vec![n, c_in, h_big, w_big];
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.out(data, shape, Op::TConv2d { input, kernel, dims }, rg))
    }

    /// Weight-normalization reparameterization. The first axis of `direction`
    /// indexes output channels; `magnitude` holds one scalar per channel.
    /// Output channel `o` is `magnitude[o] * direction[o] / ||direction[o]||`.
    pub fn weight_norm(&mut self, direction: Var, magnitude: Var) -> Result<Var> {
        let (td, tm) = (self.value(direction), self.value(magnitude));
        let o = td.shape()[0];
        if tm.shape() != [o] {
            return Err(Error::Input(format!(
                "magnitude shape {:?} does not match {o} output channels",
                tm.shape()
            )));
        }
        let per = td.len() / o;
        let mut data = vec![0.0; td.len()];
        for ch in 0..o {
            let slice = &td.data()[ch * per..(ch + 1) * per];
            let norm = slice.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Numerical(format!(
                    "weight_norm: zero-norm direction in channel {ch}"
                )));
            }
            let s = tm.data()[ch] / norm;
            for (dst, &src) in data[ch * per..(ch + 1) * per].iter_mut().zip(slice) {
                *dst = s * src;
            }
        }
        let shape = td.shape().to_vec();
        let rg = self.rg(direction) || self.rg(magnitude);
        Ok(self.out(data, shape, Op::WeightNorm { direction, magnitude }, rg))
    }

    /// Mean cross-entropy of `logits[N,K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.rank() != 2 {
            return Err(Error::Input(format!(
                "cross_entropy expects [N,K] logits, got {:?}",
                tl.shape()
            )));
        }
        let (n, k) = (tl.shape()[0], tl.shape()[1]);
        if labels.len() != n {
            return Err(Error::Input(format!(
                "{} labels for {n} rows of logits",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("label {bad} out of range [0,{k})")));
        }
        let mut loss = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            let r = &tl.data()[row * k..(row + 1) * k];
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - r[label];
        }
        loss /= n as f64;
        let rg = self.rg(logits);
        Ok(self.out(
            vec![loss],
            vec![1],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// View with a new shape (same element count, same layout).
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Slice `len` entries along axis 0 starting at `start`.
    pub fn narrow0(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let d0 = tx.shape()[0];
        if start + len > d0 {
            return Err(Error::Input(format!(
                "narrow0 [{start}, {start}+{len}) out of axis of size {d0}"
            )));
        }
        let chunk = tx.len() / d0;
        let data = tx.data()[start * chunk..(start + len) * chunk].to_vec();
        let mut shape = tx.shape().to_vec();
        shape[0] = len;
        let rg = self.rg(x);
        Ok(self.out(data, shape, Op::Narrow0 { src: x, start }, rg))
    }

    /// Concatenate along axis 0. All trailing dimensions must match.
    pub fn concat0(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Usage("concat0 of zero tensors".into()));
        }
        let tail = self.value(xs[0]).shape()[1..].to_vec();
        let mut d0 = 0;
        let mut data = Vec::new();
        for &v in xs {
            let t = self.value(v);
            if t.shape()[1..] != tail[..] {
                return Err(Error::Input(format!(
                    "concat0 trailing shape mismatch: {:?} vs {:?}",
                    &t.shape()[1..],
                    tail
                )));
            }
            d0 += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![d0];
        shape.extend_from_slice(&tail);
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.out(data, shape, Op::Concat0(xs.to_vec()), rg))
    }

    /// Rearrange a stack of slices `[k1*k2, 1, O, I]` into a convolution
    /// weight `[O, I, k1, k2]`, with slice index equal to the row-major
    /// kernel position.
    pub fn slices_to_conv_weight(&mut self, x: Var, k1: usize, k2: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 4 || tx.shape()[0] != k1 * k2 || tx.shape()[1] != 1 {
            return Err(Error::Input(format!(
                "expected [{}*{}={}, 1, O, I] slice stack, got {:?}",
                k1,
                k2,
                k1 * k2,
                tx.shape()
            )));
        }
        let (o, i) = (tx.shape()[2], tx.shape()[3]);
        let mut data = vec![0.0; tx.len()];
        for s in 0..k1 * k2 {
            for oo in 0..o {
                for ii in 0..i {
                    data[((oo * i + ii) * k1 * k2) + s] = tx.data()[(s * o + oo) * i + ii];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.out(
            data,
            vec![o, i, k1, k2],
            Op::SlicesToConvWeight { src: x, k1, k2 },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every leaf
    /// marked `requires_grad`; frozen leaves are absent from the map.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward from non-scalar node of shape {:?}",
                ln.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut map = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                if let Some(g) = grads[idx].take() {
                    map.insert(idx, Tensor::new(node.value.shape().to_vec(), g)?);
                }
            }
        }
        Ok(GradientMap { grads: map })
    }

    fn add_into(grads: &mut Vec<Option<Vec<f64>>>, v: Var, delta: Vec<f64>) {
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn accumulate(&self, idx: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    Self::add_into(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    Self::add_into(grads, *b, g.to_vec());
                }
            }
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    Self::add_into(grads, *x, g.to_vec());
                }
                if wants(*bias) {
                    let tx = &self.nodes[x.0].value;
                    let c = tx.shape()[1];
                    let mut gb = vec![0.0; c];
                    if tx.rank() == 4 {
                        let hw = tx.shape()[2] * tx.shape()[3];
                        for n in 0..tx.shape()[0] {
                            for ch in 0..c {
                                let base = (n * c + ch) * hw;
                                gb[ch] += g[base..base + hw].iter().sum::<f64>();
                            }
                        }
                    } else {
                        for n in 0..tx.shape()[0] {
                            for ch in 0..c {
                                gb[ch] += g[n * c + ch];
                            }
                        }
                    }
                    Self::add_into(grads, *bias, gb);
                }
            }
            Op::Scale(x, s) => {
                let sv = self.nodes[s.0].value.data()[0];
                if wants(*x) {
                    Self::add_into(grads, *x, g.iter().map(|v| v * sv).collect());
                }
                if wants(*s) {
                    let tx = &self.nodes[x.0].value;
                    let gs: f64 = g.iter().zip(tx.data()).map(|(gv, xv)| gv * xv).sum();
                    Self::add_into(grads, *s, vec![gs]);
                }
            }
            Op::ScaleConst(x, c) => {
                if wants(*x) {
                    Self::add_into(grads, *x, g.iter().map(|v| v * c).collect());
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let n = self.nodes[x.0].value.len();
                    Self::add_into(grads, *x, vec![g[0]; n]);
                }
            }
            Op::Dot(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if wants(*a) {
                    Self::add_into(grads, *a, tb.data().iter().map(|v| v * g[0]).collect());
                }
                if wants(*b) {
                    Self::add_into(grads, *b, ta.data().iter().map(|v| v * g[0]).collect());
                }
            }
            Op::MatmulNt(x, w) => {
                let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (n, i, o) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
                if wants(*x) {
                    // g[N,O] . w[O,I]
                    Self::add_into(grads, *x, conv::matmul_nn(g, tw.data(), n, o, i));
                }
                if wants(*w) {
                    // g[N,O]^T . x[N,I]
                    Self::add_into(grads, *w, conv::matmul_tn(g, tx.data(), n, o, i));
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let tx = &self.nodes[x.0].value;
                    let gx = g
                        .iter()
                        .zip(tx.data())
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    Self::add_into(grads, *x, gx);
                }
            }
            Op::Mlr { x, s_p, s_n } => {
                if wants(*x) {
                    let tx = &self.nodes[x.0].value;
                    let gx = g
                        .iter()
                        .zip(tx.data())
                        .map(|(gv, &xv)| if xv >= 0.0 { gv * s_p } else { gv * s_n })
                        .collect();
                    Self::add_into(grads, *x, gx);
                }
            }
            Op::Conv2d { input, kernel, dims } => {
                let (ti, tk) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
                if wants(*input) {
                    Self::add_into(grads, *input, conv::conv_adj_input(g, tk.data(), dims));
                }
                if wants(*kernel) {
                    Self::add_into(grads, *kernel, conv::conv_adj_kernel(ti.data(), g, dims));
                }
            }
            Op::TConv2d { input, kernel, dims } => {
                let (ti, tk) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
                if wants(*input) {
                    // adjoint of the adjoint is the forward conv
                    Self::add_into(grads, *input, conv::conv_fwd(g, tk.data(), dims));
                }
                if wants(*kernel) {
                    Self::add_into(grads, *kernel, conv::conv_adj_kernel(g, ti.data(), dims));
                }
            }
            Op::WeightNorm { direction, magnitude } => {
                let (td, tm) = (
                    &self.nodes[direction.0].value,
                    &self.nodes[magnitude.0].value,
                );
                let o = td.shape()[0];
                let per = td.len() / o;
                let mut gd = vec![0.0; td.len()];
                let mut gm = vec![0.0; o];
                for ch in 0..o {
                    let d = &td.data()[ch * per..(ch + 1) * per];
                    let gout = &g[ch * per..(ch + 1) * per];
                    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let gd_dot: f64 = gout.iter().zip(d).map(|(a, b)| a * b).sum();
                    gm[ch] = gd_dot / norm;
                    let m = tm.data()[ch];
                    let coef = m / norm;
                    let proj = gd_dot / (norm * norm);
                    for ((dst, &gv), &dv) in gd[ch * per..(ch + 1) * per]
                        .iter_mut()
                        .zip(gout)
                        .zip(d)
                    {
                        *dst = coef * (gv - proj * dv);
                    }
                }
                if wants(*direction) {
                    Self::add_into(grads, *direction, gd);
                }
                if wants(*magnitude) {
                    Self::add_into(grads, *magnitude, gm);
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if wants(*logits) {
                    let tl = &self.nodes[logits.0].value;
                    let (n, k) = (tl.shape()[0], tl.shape()[1]);
                    let mut gl = vec![0.0; n * k];
                    let scale = g[0] / n as f64;
                    for (row, &label) in labels.iter().enumerate() {
                        let r = &tl.data()[row * k..(row + 1) * k];
                        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = r.iter().map(|v| (v - max).exp()).sum();
                        for j in 0..k {
                            let p = (r[j] - max).exp() / denom;
                            gl[row * k + j] = scale * (p - if j == label { 1.0 } else { 0.0 });
                        }
                    }
                    Self::add_into(grads, *logits, gl);
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    Self::add_into(grads, *x, g.to_vec());
                }
            }
            Op::Narrow0 { src, start } => {
                if wants(*src) {
                    let ts = &self.nodes[src.0].value;
                    let chunk = ts.len() / ts.shape()[0];
                    let mut gs = vec![0.0; ts.len()];
                    gs[start * chunk..start * chunk + g.len()].copy_from_slice(g);
                    Self::add_into(grads, *src, gs);
                }
            }
            Op::Concat0(xs) => {
                let mut offset = 0;
                for &v in xs {
                    let len = self.nodes[v.0].value.len();
                    if wants(v) {
                        Self::add_into(grads, v, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::SlicesToConvWeight { src, k1, k2 } => {
                if wants(*src) {
                    let ts = &self.nodes[src.0].value;
                    let (o, i) = (ts.shape()[2], ts.shape()[3]);
                    let kk = k1 * k2;
                    let mut gs = vec![0.0; ts.len()];
                    for s in 0..kk {
                        for oo in 0..o {
                            for ii in 0..i {
                                gs[(s * o + oo) * i + ii] = g[(oo * i + ii) * kk + s];
                            }
                        }
                    }
                    Self::add_into(grads, *src, gs);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).with_grad());
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn frozen_leaves_absent() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let y = g.leaf(t(&[2], &[3.0, 4.0]));
        let d = g.dot(x, y).unwrap();
        let grads = g.backward(d).unwrap();
        assert!(grads.get(x).is_some());
        assert!(grads.get(y).is_none());
        assert_eq!(grads.len(), 1);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        assert!(matches!(
            g.backward(x),
            Err(crate::error::Error::Usage(_))
        ));
    }

    #[test]
    fn mlr_values() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[0.0, 2.0, -4.0]));
        let y = g.mlr(x, 0.85, 0.001);
        let got = g.value(y).data();
        assert_eq!(got[0], 0.0);
        assert!((got[1] - 1.70).abs() < 1e-15);
        assert!((got[2] - (-0.004)).abs() < 1e-15);
    }

    #[test]
    fn weight_norm_values() {
        let mut g = Graph::new();
        // direction [3,4] as one output channel
        let close = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
        };
        let d = g.leaf(t(&[1, 2], &[3.0, 4.0]));
        let m1 = g.leaf(t(&[1], &[1.0]));
        let w1 = g.weight_norm(d, m1).unwrap();
        assert!(close(g.value(w1).data(), &[0.6, 0.8]));
        let m10 = g.leaf(t(&[1], &[10.0]));
        let w10 = g.weight_norm(d, m10).unwrap();
        assert!(close(g.value(w10).data(), &[6.0, 8.0]));
        // magnitude = ||direction|| reproduces the direction
        let m5 = g.leaf(t(&[1], &[5.0]));
        let w5 = g.weight_norm(d, m5).unwrap();
        assert!(close(g.value(w5).data(), &[3.0, 4.0]));
    }

    #[test]
    fn weight_norm_zero_direction_is_numerical_error() {
        let mut g = Graph::new();
        let d = g.leaf(t(&[1, 2], &[0.0, 0.0]));
        let m = g.leaf(t(&[1], &[1.0]));
        assert!(matches!(
            g.weight_norm(d, m),
            Err(crate::error::Error::Numerical(_))
        ));
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::new();
        // uniform logits over 10 classes -> ln(10)
        let l = g.leaf(t(&[1, 10], &[0.0; 10]));
        let ce = g.cross_entropy(l, &[3]).unwrap();
        assert!((g.value(ce).item().unwrap() - 10f64.ln()).abs() < 1e-12);
        // saturated correct class -> ~0
        let l2 = g.leaf(t(&[1, 2], &[1000.0, 0.0]));
        let ce2 = g.cross_entropy(l2, &[0]).unwrap();
        assert!(g.value(ce2).item().unwrap().abs() < 1e-12);
        // hand case: logits [1,2,3], label 2 -> 0.40761
        let l3 = g.leaf(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let ce3 = g.cross_entropy(l3, &[2]).unwrap();
        assert!((g.value(ce3).item().unwrap() - 0.40760596444438).abs() < 1e-10);
        // label out of range
        let l4 = g.leaf(t(&[1, 2], &[0.0, 0.0]));
        assert!(g.cross_entropy(l4, &[2]).is_err());
    }

    #[test]
    fn conv_shape_from_paper_configuration() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 1, 32, 16]));
        let k = g.leaf(Tensor::zeros(&[1, 1, 9, 5]));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 24, 12]);
        // and the transposed direction maps back
        let z = g.transposed_conv2d(y, k, 1, 0).unwrap();
        assert_eq!(g.value(z).shape(), &[1, 1, 32, 16]);
    }

    #[test]
    fn conv_channel_mismatch_is_config_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 2, 5, 5]));
        let k = g.leaf(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(
            g.conv2d(x, k, 1, 0),
            Err(crate::error::Error::Config(_))
        ));
    }
}
