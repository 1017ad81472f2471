//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every op in creation order, which is already a
//! topological order, so backward is a single reverse sweep. Parameter
//! leaves borrow their tensors instead of copying them, which keeps the
//! no-grad inference path cheap.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{self, Scalar, Tensor};

/// Additive attention logit for masked keys.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Var {
        Var(i)
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    MulScalarVar(Var, Var),
    AddScalarVar(Var, Var),
    ScaleRows(Var, Var),
    Sigmoid(Var),
    Gelu(Var),
    Ln(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SelectRows(Var, Vec<usize>),
    SelectCol(Var, usize),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Normalize(Var),
    Attention {
        qkv: Var,
        probs: Vec<T>,
        batch: usize,
        heads: usize,
    },
    Tokens {
        patches: Var,
        cls: Var,
        pos: Var,
        batch: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Kl {
        p: Var,
        target: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::MulScalarVar(..) => "mul_scalar",
            Op::AddScalarVar(..) => "add_scalar",
            Op::ScaleRows(..) => "scale_rows",
            Op::Sigmoid(..) => "sigmoid",
            Op::Gelu(..) => "gelu",
            Op::Ln(..) => "ln",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::SelectRows(..) => "select_rows",
            Op::SelectCol(..) => "select_col",
            Op::Concat(..) => "concat",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Normalize(..) => "normalize",
            Op::Attention { .. } => "attention",
            Op::Tokens { .. } => "tokens",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Kl { .. } => "kl",
        }
    }
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    grad_enabled: bool,
    check_finite: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            check_finite: false,
        }
    }

    /// A graph that records values only; parameters are not marked for grad.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Turns on NaN/Inf detection for every op output.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    /// A borrowed trainable leaf (gradient tracked when the graph allows it).
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.push_leaf(Cow::Borrowed(t), rg)
    }

    /// A borrowed leaf with explicit grad tracking.
    pub fn param_with(&mut self, t: &'a Tensor<T>, requires_grad: bool) -> Var {
        let rg = self.grad_enabled && requires_grad;
        self.push_leaf(Cow::Borrowed(t), rg)
    }

    /// An owned leaf. Gradient tracked only if requested and enabled.
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let rg = self.grad_enabled && requires_grad;
        self.push_leaf(Cow::Owned(t), rg)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(Cow::Owned(t), false)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{op}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn scalar_of(&self, v: Var, op: &str) -> Result<T> {
        let t = self.value(v);
        if t.len() != 1 {
            return Err(Error::Shape(format!("{op}: expected scalar, got {:?}", t.shape())));
        }
        Ok(t.item())
    }

    // ── ops ──────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape(), data)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p - q).collect();
        let out = Tensor::new(x.shape(), data)?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape(), data)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// `x[i, :] + bias` for every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if self.value(bias).len() != cols {
            return Err(Error::Shape(format!(
                "add_row_bias: {:?} vs bias {:?}",
                self.value(x).shape(),
                self.value(bias).shape()
            )));
        }
        let xv = self.value(x);
        let bv = self.value(bias).data();
        let mut data = xv.data().to_vec();
        for r in 0..rows {
            for (o, &b) in data[r * cols..(r + 1) * cols].iter_mut().zip(bv) {
                *o += b;
            }
        }
        let out = Tensor::new(xv.shape(), data)?;
        self.push(out, Op::AddRowBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// Adds a constant offset elementwise.
    pub fn add_const(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddConst(x), &[x])
    }

    /// `x * s` for a one-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.scalar_of(s, "mul_scalar")?;
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::MulScalarVar(x, s), &[x, s])
    }

    /// `x + s` for a one-element `s`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.scalar_of(s, "add_scalar")?;
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalarVar(x, s), &[x, s])
    }

    /// Multiplies row `i` of `x` by `s[i]`. Used for token masks and for
    /// weighting class-token states by halting probabilities.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let xv = self.value(x);
        let rows = xv.shape().first().copied().unwrap_or(1);
        let sv = self.value(s);
        if sv.len() != rows || xv.is_empty() && rows != 0 {
            return Err(Error::Shape(format!(
                "scale_rows: {:?} vs scales {:?}",
                xv.shape(),
                sv.shape()
            )));
        }
        let width = if rows == 0 { 0 } else { xv.len() / rows };
        let mut data = xv.data().to_vec();
        for (r, &f) in sv.data().iter().enumerate() {
            for o in &mut data[r * width..(r + 1) * width] {
                *o = *o * f;
            }
        }
        let out = Tensor::new(xv.shape(), data)?;
        self.push(out, Op::ScaleRows(x, s), &[x, s])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(tensor::sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(tensor::gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.ln());
        self.push(out, Op::Ln(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = *xv.shape().last().ok_or_else(|| Error::Shape("softmax of a scalar".into()))?;
        let mut data = xv.data().to_vec();
        if cols > 0 {
            for row in data.chunks_mut(cols) {
                tensor::softmax_row(row);
            }
        }
        let out = Tensor::new(xv.shape(), data)?;
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last axis.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2()?;
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        if g.len() != cols || b.len() != cols {
            return Err(Error::Shape(format!(
                "layernorm: row width {cols}, gain {}, bias {}",
                g.len(),
                b.len()
            )));
        }
        let ones = vec![T::one(); cols];
        let zeros = vec![T::zero(); cols];
        let mut xhat = vec![T::zero(); rows * cols];
        let mut data = vec![T::zero(); rows * cols];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let span = r * cols..(r + 1) * cols;
            let (_, rs) = tensor::layernorm_row(&xv.data()[span.clone()], &ones, &zeros, eps, &mut xhat[span.clone()]);
            rstd.push(rs);
            for i in span {
                data[i] = xhat[i] * g[i % cols] + b[i % cols];
            }
        }
        let out = Tensor::new(xv.shape(), data)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Gathers entries along axis 0 (token compaction).
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let out = self.value(x).select_rows(indices)?;
        self.push(out, Op::SelectRows(x, indices.to_vec()), &[x])
    }

    /// Column `col` of a matrix as a vector (embedding index per token).
    pub fn select_col(&mut self, x: Var, col: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2()?;
        if col >= cols {
            return Err(Error::Index { index: col, len: cols });
        }
        let data = (0..rows).map(|r| xv.data()[r * cols + col]).collect();
        self.push(Tensor::from_vec(data), Op::SelectCol(x, col), &[x])
    }

    /// Concatenation along axis 0. Scalars are treated as length-1 vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<Tensor<T>> = parts
            .iter()
            .map(|&p| {
                let t = self.value(p);
                if t.rank() == 0 {
                    t.clone().reshape(&[1])
                } else {
                    Ok(t.clone())
                }
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor<T>> = tensors.iter().collect();
        let out = Tensor::concat_rows(&refs)?;
        self.push(out, Op::Concat(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::Shape("mean of empty tensor".into()));
        }
        let out = Tensor::scalar(xv.sum() / T::from_usize(xv.len()).unwrap());
        self.push(out, Op::Mean(x), &[x])
    }

    /// `x / sum(x)`.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.sum();
        let out = xv.map(|v| v / s);
        self.push(out, Op::Normalize(x), &[x])
    }

    /// Multi-head scaled dot-product attention over a packed `[q | k | v]`
    /// matrix of shape `(batch·tokens) × 3E`. Keys whose `key_mask` entry is
    /// false receive [`MASKED_LOGIT`] so no query attends to them.
    pub fn attention(&mut self, qkv: Var, key_mask: Option<&[bool]>, batch: usize, heads: usize) -> Result<Var> {
        let qv = self.value(qkv);
        let (rows, width) = qv.dims2()?;
        if batch == 0 || rows % batch != 0 || width % 3 != 0 || (width / 3) % heads != 0 {
            return Err(Error::Shape(format!(
                "attention: qkv {:?} with batch {batch}, heads {heads}",
                qv.shape()
            )));
        }
        if let Some(m) = key_mask {
            if m.len() != rows {
                return Err(Error::Shape(format!("attention: mask length {} vs {rows} rows", m.len())));
            }
        }
        let tokens = rows / batch;
        let embed = width / 3;
        let hd = embed / heads;
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        let masked = T::c(MASKED_LOGIT);
        let data = qv.data();
        let mut probs = vec![T::zero(); batch * heads * tokens * tokens];
        let mut out = vec![T::zero(); rows * embed];
        tensor::count_macs((2 * batch * heads * tokens * tokens * hd) as u64);
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * tokens * tokens;
                for i in 0..tokens {
                    let qi = &data[(b * tokens + i) * width + h * hd..][..hd];
                    let prow = &mut probs[base + i * tokens..base + (i + 1) * tokens];
                    for (j, p) in prow.iter_mut().enumerate() {
                        let kj = &data[(b * tokens + j) * width + embed + h * hd..][..hd];
                        let live = key_mask.map_or(true, |m| m[b * tokens + j]);
                        *p = if live { tensor::dot(qi, kj) * scale } else { masked };
                    }
                    tensor::softmax_row(prow);
                    let orow = &mut out[(b * tokens + i) * embed + h * hd..][..hd];
                    for (j, &p) in prow.iter().enumerate() {
                        if p == T::zero() {
                            continue;
                        }
                        let vj = &data[(b * tokens + j) * width + 2 * embed + h * hd..][..hd];
                        for (o, &v) in orow.iter_mut().zip(vj) {
                            *o += p * v;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[rows, embed], out)?;
        self.push(
            out,
            Op::Attention {
                qkv,
                probs,
                batch,
                heads,
            },
            &[qkv],
        )
    }

    /// Assembles `(batch·K) × E` token rows: class token at index 0 of each
    /// sample followed by its patch embeddings, plus positional embeddings.
    pub fn tokens(&mut self, patches: Var, cls: Var, pos: Var, batch: usize) -> Result<Var> {
        let (pr, e) = self.value(patches).dims2()?;
        let (k, pe) = self.value(pos).dims2()?;
        let cv = self.value(cls);
        if batch == 0 || pr != batch * (k - 1) || pe != e || cv.len() != e {
            return Err(Error::Shape(format!(
                "tokens: patches {:?}, cls {:?}, pos {:?}, batch {batch}",
                self.value(patches).shape(),
                cv.shape(),
                self.value(pos).shape()
            )));
        }
        let (pd, cd, posd) = (self.value(patches).data(), cv.data(), self.value(pos).data());
        let mut data = Vec::with_capacity(batch * k * e);
        for b in 0..batch {
            for t in 0..k {
                let src = if t == 0 { cd } else { &pd[(b * (k - 1) + t - 1) * e..][..e] };
                data.extend(src.iter().zip(&posd[t * e..(t + 1) * e]).map(|(&s, &p)| s + p));
            }
        }
        let out = Tensor::new(&[batch * k, e], data)?;
        self.push(
            out,
            Op::Tokens {
                patches,
                cls,
                pos,
                batch,
            },
            &[patches, cls, pos],
        )
    }

    /// Mean cross-entropy of `logits: B×C` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, c) = lv.dims2()?;
        if labels.len() != b {
            return Err(Error::Shape(format!("cross_entropy: {b} rows vs {} labels", labels.len())));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = T::zero();
        for (r, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Index { index: y, len: c });
            }
            let row = &mut probs[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[y];
            tensor::softmax_row(row);
        }
        let out = Tensor::scalar(loss / T::from_usize(b).unwrap());
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// `KL(p || target) = Σ p·ln(p/target)`; zero entries of `p` contribute 0.
    pub fn kl_div(&mut self, p: Var, target: &[T]) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != target.len() {
            return Err(Error::Shape(format!("kl: {} vs target {}", pv.len(), target.len())));
        }
        if target.iter().any(|&t| t <= T::zero()) {
            return Err(Error::Config("KL target must be strictly positive".into()));
        }
        let v = pv
            .data()
            .iter()
            .zip(target)
            .filter(|(&a, _)| a > T::zero())
            .map(|(&a, &t)| a * (a / t).ln())
            .sum();
        self.push(
            Tensor::scalar(v),
            Op::Kl {
                p,
                target: target.to_vec(),
            },
            &[p],
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar output. Every leaf that requires grad
    /// gets an entry, zero if unreachable.
    pub fn backward(&self, output: Var) -> Result<Grads<T>> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", out.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.shape(), T::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backward_node(idx, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, contrib: Vec<T>) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(node.value.shape(), contrib).expect("grad shape matches value"));
            }
        }
    }

    fn backward_node(&self, idx: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let g = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2()?;
                let (_, n) = bv.dims2()?;
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); m * k];
                    tensor::gemm_nt(g, bv.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); k * n];
                    tensor::gemm_tn(av.data(), g, &mut db, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, g.iter().zip(bv).map(|(&d, &q)| d * q).collect());
                self.accumulate(grads, *b, g.iter().zip(av).map(|(&d, &p)| d * p).collect());
            }
            Op::AddRowBias(x, bias) => {
                self.accumulate(grads, *x, g.to_vec());
                let cols = self.value(*bias).len();
                let mut db = vec![T::zero(); cols];
                for row in g.chunks(cols) {
                    for (o, &d) in db.iter_mut().zip(row) {
                        *o += d;
                    }
                }
                self.accumulate(grads, *bias, db);
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.iter().map(|&d| d * *c).collect());
            }
            Op::AddConst(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::MulScalarVar(x, s) => {
                let c = self.value(*s).item();
                self.accumulate(grads, *x, g.iter().map(|&d| d * c).collect());
                let ds = g.iter().zip(self.value(*x).data()).map(|(&d, &v)| d * v).sum();
                self.accumulate(grads, *s, vec![ds]);
            }
            Op::AddScalarVar(x, s) => {
                self.accumulate(grads, *x, g.to_vec());
                self.accumulate(grads, *s, vec![g.iter().copied().sum()]);
            }
            Op::ScaleRows(x, s) => {
                let xv = self.value(*x).data();
                let sv = self.value(*s).data();
                let width = if sv.is_empty() { 0 } else { xv.len() / sv.len() };
                let mut dx = vec![T::zero(); xv.len()];
                let mut ds = vec![T::zero(); sv.len()];
                for (r, &f) in sv.iter().enumerate() {
                    for i in r * width..(r + 1) * width {
                        dx[i] = g[i] * f;
                        ds[r] += g[i] * xv[i];
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *s, ds);
            }
            Op::Sigmoid(x) => {
                let d = g.iter().zip(y.data()).map(|(&d, &s)| d * s * (T::one() - s)).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Gelu(x) => {
                let d = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&d, &v)| d * tensor::gelu_grad(v))
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Ln(x) => {
                let d = g.iter().zip(self.value(*x).data()).map(|(&d, &v)| d / v).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Softmax(x) => {
                let cols = *y.shape().last().unwrap();
                let mut dx = vec![T::zero(); g.len()];
                for ((drow, yrow), orow) in g.chunks(cols).zip(y.data().chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let dotp: T = drow.iter().zip(yrow).map(|(&d, &s)| d * s).sum();
                    for ((o, &d), &s) in orow.iter_mut().zip(drow).zip(yrow) {
                        *o = s * (d - dotp);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let cols = gv.len();
                let n = T::from_usize(cols).unwrap();
                let mut dgain = vec![T::zero(); cols];
                let mut dbias = vec![T::zero(); cols];
                let mut dx = vec![T::zero(); g.len()];
                for r in 0..rstd.len() {
                    let span = r * cols..(r + 1) * cols;
                    let drow = &g[span.clone()];
                    let xh = &xhat[span.clone()];
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for i in 0..cols {
                        dgain[i] += drow[i] * xh[i];
                        dbias[i] += drow[i];
                        let dxh = drow[i] * gv[i];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[i];
                    }
                    mean_dxh = mean_dxh / n;
                    mean_dxh_xh = mean_dxh_xh / n;
                    for i in 0..cols {
                        let dxh = drow[i] * gv[i];
                        dx[r * cols + i] = rstd[r] * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
                self.accumulate(grads, *bias, dbias);
            }
            Op::SelectRows(x, indices) => {
                let xv = self.value(*x);
                let rows = xv.shape().first().copied().unwrap_or(1);
                let width = if rows == 0 { 0 } else { xv.len() / rows };
                let mut dx = vec![T::zero(); xv.len()];
                for (o, &i) in indices.iter().enumerate() {
                    for c in 0..width {
                        dx[i * width + c] += g[o * width + c];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SelectCol(x, col) => {
                let (rows, cols) = self.value(*x).dims2()?;
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    dx[r * cols + col] = g[r];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let d = g[0] / T::from_usize(n).unwrap();
                self.accumulate(grads, *x, vec![d; n]);
            }
            Op::Normalize(x) => {
                let s = self.value(*x).sum();
                let dotp: T = g.iter().zip(y.data()).map(|(&d, &v)| d * v).sum();
                self.accumulate(grads, *x, g.iter().map(|&d| (d - dotp) / s).collect());
            }
            Op::Attention {
                qkv,
                probs,
                batch,
                heads,
            } => {
                let qv = self.value(*qkv);
                let (rows, width) = qv.dims2()?;
                let (batch, heads) = (*batch, *heads);
                let tokens = rows / batch;
                let embed = width / 3;
                let hd = embed / heads;
                let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
                let data = qv.data();
                let mut dqkv = vec![T::zero(); rows * width];
                let mut dp = vec![T::zero(); tokens];
                for b in 0..batch {
                    for h in 0..heads {
                        let base = (b * heads + h) * tokens * tokens;
                        for i in 0..tokens {
                            let prow = &probs[base + i * tokens..base + (i + 1) * tokens];
                            let go = &g[(b * tokens + i) * embed + h * hd..][..hd];
                            // dV_j += p_ij dO_i ; dP_ij = dO_i · v_j
                            for j in 0..tokens {
                                let vj_off = (b * tokens + j) * width + 2 * embed + h * hd;
                                dp[j] = tensor::dot(go, &data[vj_off..vj_off + hd]);
                                let p = prow[j];
                                if p != T::zero() {
                                    for c in 0..hd {
                                        dqkv[vj_off + c] += p * go[c];
                                    }
                                }
                            }
                            let s: T = prow.iter().zip(&dp).map(|(&p, &d)| p * d).sum();
                            let q_off = (b * tokens + i) * width + h * hd;
                            for j in 0..tokens {
                                let ds = prow[j] * (dp[j] - s) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                let k_off = (b * tokens + j) * width + embed + h * hd;
                                for c in 0..hd {
                                    dqkv[q_off + c] += ds * data[k_off + c];
                                    dqkv[k_off + c] += ds * data[q_off + c];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *qkv, dqkv);
            }
            Op::Tokens {
                patches,
                cls,
                pos,
                batch,
            } => {
                let (k, e) = self.value(*pos).dims2()?;
                let mut dpatch = vec![T::zero(); batch * (k - 1) * e];
                let mut dcls = vec![T::zero(); e];
                let mut dpos = vec![T::zero(); k * e];
                for b in 0..*batch {
                    for t in 0..k {
                        let row = &g[(b * k + t) * e..][..e];
                        for c in 0..e {
                            dpos[t * e + c] += row[c];
                        }
                        if t == 0 {
                            for c in 0..e {
                                dcls[c] += row[c];
                            }
                        } else {
                            dpatch[(b * (k - 1) + t - 1) * e..][..e].copy_from_slice(row);
                        }
                    }
                }
                self.accumulate(grads, *patches, dpatch);
                self.accumulate(grads, *cls, dcls);
                self.accumulate(grads, *pos, dpos);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = probs.len() / labels.len();
                let inv_b = g[0] / T::from_usize(labels.len()).unwrap();
                let mut d = probs.clone();
                for (r, &lab) in labels.iter().enumerate() {
                    d[r * c + lab] -= T::one();
                }
                for v in &mut d {
                    *v = *v * inv_b;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::Kl { p, target } => {
                let d = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&a, &t)| {
                        if a > T::zero() {
                            g[0] * ((a / t).ln() + T::one())
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *p, d);
            }
        }
        Ok(())
    }
}
