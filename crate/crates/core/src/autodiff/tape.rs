//! Tape-based reverse-mode differentiation.
//!
//! Every kernel appends one node to the [`Tape`] holding its output value and
//! enough saved state to run its vector-Jacobian product later. [`Tape::backward`]
//! replays the nodes in reverse insertion order, which is a valid reverse
//! topological order because a node can only reference earlier nodes.
//!
//! Gradients accumulate: calling `backward` twice without [`Tape::zero_grad`]
//! adds the second pass on top of the first, doubling every gradient.

use super::gemm::gemm;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
///
/// Handles carry the tape generation they were created in; using one after
/// [`Tape::reset`] panics instead of silently reading an unrelated node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    generation: u64,
}

/// Kernel discriminant, used for reporting and for fault injection in tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Matmul,
    BatchMatmul,
    Add,
    Sub,
    Mul,
    AddBias,
    ScaleRows,
    Scale,
    AddScalar,
    Exp,
    Reciprocal,
    Relu,
    Clamp,
    Softmax,
    LayerNorm,
    MeanRows,
    MeanLast,
    Sum,
    Concat,
    Slice,
    Reshape,
    NormalizeRows,
    Contrastive,
    Nll,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    BatchMatmul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    ScaleRows {
        x: Var,
        scale: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    AddScalar {
        x: Var,
    },
    Exp {
        x: Var,
    },
    Reciprocal {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanRows {
        x: Var,
        rows: usize,
    },
    MeanLast {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Concat {
        parts: Vec<(Var, usize)>,
    },
    Slice {
        x: Var,
        start: usize,
        width: usize,
    },
    Reshape {
        x: Var,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Contrastive {
        sim: Var,
        diag_weight: f64,
    },
    Nll {
        probs: Var,
        labels: Vec<usize>,
        floor: f64,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::BatchMatmul { .. } => OpKind::BatchMatmul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::ScaleRows { .. } => OpKind::ScaleRows,
            Op::Scale { .. } => OpKind::Scale,
            Op::AddScalar { .. } => OpKind::AddScalar,
            Op::Exp { .. } => OpKind::Exp,
            Op::Reciprocal { .. } => OpKind::Reciprocal,
            Op::Relu { .. } => OpKind::Relu,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::MeanRows { .. } => OpKind::MeanRows,
            Op::MeanLast { .. } => OpKind::MeanLast,
            Op::Sum { .. } => OpKind::Sum,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::NormalizeRows { .. } => OpKind::NormalizeRows,
            Op::Contrastive { .. } => OpKind::Contrastive,
            Op::Nll { .. } => OpKind::Nll,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    trainable: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    generation: u64,
    fault: Option<(OpKind, f64)>,
}

const NORM_FLOOR: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every node and gradient. Handles from before the reset become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.generation += 1;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test hook: scales the upstream gradient of every `kind` node by `factor`
    /// during backward, simulating a wrong gradient rule.
    #[doc(hidden)]
    pub fn inject_gradient_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(
            v.generation, self.generation,
            "stale Var from tape generation {} used in generation {}",
            v.generation, self.generation
        );
        v.index
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[self.check(v)]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.node(v).op.kind()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|&p| self.node(p).requires_grad);
        self.push_node(Node {
            value,
            op,
            requires_grad,
            trainable: false,
        })
    }

    fn push_node(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        self.grads.push(None);
        Var {
            index: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    /// Trainable leaf: receives a gradient on every backward pass.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_node(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            trainable: true,
        })
    }

    /// Constant leaf: no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            trainable: false,
        })
    }

    // ---------------------------------------------------------------- linear

    /// `a[r×k] · b[k×c]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[r×k] · b[c×k]ᵀ`.
    pub fn matmul_transposed(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let op = if trans_b {
            "matmul_transposed"
        } else {
            "matmul"
        };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape(op, sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b {
            (sb[1], sb[0])
        } else {
            (sb[0], sb[1])
        };
        if k != kb {
            return Err(Error::shape(op, sa, sb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
        );
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(
            value,
            Op::Matmul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            },
            &[a, b],
        ))
    }

    /// Batched product over the leading axis: `a[B×r×k] · b[B×k×c]`, or with
    /// `trans_b`, `a[B×r×k] · b[B×c×k]ᵀ`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if k != kb {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let value = Tensor::new([batch, m, n], out)?;
        Ok(self.push(
            value,
            Op::BatchMatmul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            &[a, b],
        ))
    }

    // ----------------------------------------------------------- elementwise

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape(), data).expect("shape checked")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor::new(v.shape(), v.data().iter().map(|&e| f(e)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// `x[…×c] + bias[c]`, broadcasting the bias over all leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(bias) != [c] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, &bi) in row.iter_mut().zip(b) {
                *o += bi;
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.push(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// Multiplies every last-axis row of `x` by the matching entry of `scale`.
    pub fn scale_rows(&mut self, x: Var, scale: Var) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        let rows = vx.numel() / c.max(1);
        if self.value(scale).numel() != rows {
            return Err(Error::shape("scale_rows", vx.shape(), self.shape(scale)));
        }
        let s = self.value(scale).data();
        let mut out = vx.data().to_vec();
        for (row, &si) in out.chunks_mut(c).zip(s) {
            row.iter_mut().for_each(|o| *o *= si);
        }
        let value = Tensor::new(vx.shape(), out)?;
        Ok(self.push(value, Op::ScaleRows { x, scale }, &[x, scale]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.map(x, |e| e * factor);
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.map(x, |e| e + c);
        self.push(value, Op::AddScalar { x }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.map(x, f64::exp);
        self.push(value, Op::Exp { x }, &[x])
    }

    pub fn reciprocal(&mut self, x: Var) -> Var {
        let value = self.map(x, f64::recip);
        self.push(value, Op::Reciprocal { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.map(x, |e| e.max(0.0));
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero wherever the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.map(x, |e| e.clamp(lo, hi));
        self.push(value, Op::Clamp { x, lo, hi }, &[x])
    }

    // ------------------------------------------------------------- row-wise

    /// Softmax over the last axis with per-row max subtraction.
    pub fn row_softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.last_dim();
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor::new(vx.shape(), out).expect("same shape");
        self.push(value, Op::Softmax { x }, &[x])
    }

    /// Layer normalization over the last axis (biased variance) followed by
    /// the affine map `gamma ∘ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", vx.shape(), self.shape(gamma)));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = vx.numel() / c;
        let mut normalized = Vec::with_capacity(vx.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vx.numel());
        for row in vx.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * is;
                normalized.push(xh);
                out.push(g[j] * xh + b[j]);
            }
        }
        let value = Tensor::new(vx.shape(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Mean over the second-to-last axis: `[…×r×c] → […×c]` (and `[r×c] → [c]`).
    pub fn mean_pool_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("mean_pool_rows", &shape, &[]));
        }
        let rows = shape[shape.len() - 2];
        if rows == 0 {
            return Err(Error::EmptySequence {
                op: "mean_pool_rows",
            });
        }
        let c = shape[shape.len() - 1];
        let outer: usize = shape[..shape.len() - 2].iter().product();
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * c];
        for o in 0..outer {
            let dst = &mut out[o * c..(o + 1) * c];
            for r in 0..rows {
                let src = &data[(o * rows + r) * c..(o * rows + r + 1) * c];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
            dst.iter_mut().for_each(|d| *d /= rows as f64);
        }
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.push(c);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::MeanRows { x, rows }, &[x]))
    }

    /// Mean over the last axis: `[…×c] → […]`.
    pub fn mean_last(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.last_dim();
        let out = vx
            .data()
            .chunks(c)
            .map(|r| r.iter().sum::<f64>() / c as f64)
            .collect();
        let shape = &vx.shape()[..vx.shape().len().saturating_sub(1)];
        let value = Tensor::new(shape, out).expect("reduced shape");
        self.push(value, Op::MeanLast { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or(Error::EmptySequence { op: "concat_last" })?;
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape("concat_last", self.shape(first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        let parts_meta = parts.iter().copied().zip(widths).collect();
        Ok(self.push(value, Op::Concat { parts: parts_meta }, parts))
    }

    /// Columns `start..start+width` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        if start + width > c {
            return Err(Error::shape("slice_last", vx.shape(), &[start, width]));
        }
        let out = vx
            .data()
            .chunks(c)
            .flat_map(|r| r[start..start + width].iter().copied())
            .collect();
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = width;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Slice { x, start, width }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Scales each last-axis row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.last_dim();
        let mut out = vx.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / c.max(1));
        for row in out.chunks_mut(c) {
            let n = row
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(NORM_FLOOR);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let value = Tensor::new(vx.shape(), out).expect("same shape");
        self.push(value, Op::NormalizeRows { x, norms }, &[x])
    }

    // --------------------------------------------------------------- losses

    /// Mean over anchors `k` of
    /// `-log( e^{s_kk} / (w·e^{s_kk} + Σ_{j≠k} e^{s_kj}) )` for a square
    /// similarity matrix `s`. `w = 1` is the usual InfoNCE denominator.
    pub fn contrastive_nll(&mut self, sim: Var, diag_weight: f64) -> Result<Var> {
        let s = self.value(sim);
        if s.shape().len() != 2 || s.shape()[0] != s.shape()[1] {
            return Err(Error::shape("contrastive_nll", s.shape(), &[]));
        }
        let k = s.shape()[0];
        if k < 2 {
            return Err(Error::ContrastiveBatch(k));
        }
        let mut total = 0.0;
        for (r, row) in s.data().chunks(k).enumerate() {
            let (_, max, z) = contrastive_row(row, r, diag_weight);
            total += -row[r] + max + z.ln();
        }
        let value = Tensor::scalar(total / k as f64);
        Ok(self.push(value, Op::Contrastive { sim, diag_weight }, &[sim]))
    }

    /// Mean negative log-probability of the labelled class, with probabilities
    /// floored at `floor` before the log.
    pub fn nll(&mut self, probs: Var, labels: &[usize], floor: f64) -> Result<Var> {
        let p = self.value(probs);
        if p.shape().len() != 2 || p.shape()[0] != labels.len() {
            return Err(Error::shape("nll", p.shape(), &[labels.len()]));
        }
        let classes = p.shape()[1];
        let mut total = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::InvalidLabel {
                    row,
                    label,
                    classes,
                });
            }
            total -= p.row(row)[label].max(floor).ln();
        }
        let value = Tensor::scalar(total / labels.len().max(1) as f64);
        Ok(self.push(
            value,
            Op::Nll {
                probs,
                labels: labels.to_vec(),
                floor,
            },
            &[probs],
        ))
    }

    // ------------------------------------------------------------- backward

    /// Accumulates `d loss / d node` into every node that depends on a
    /// trainable leaf. See the module docs for accumulation semantics.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.check(loss);
        let lv = &self.nodes[root].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut work: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        if self.nodes[root].requires_grad {
            work[root] = Some(vec![1.0]);
        }
        for i in (0..=root).rev() {
            let Some(mut g) = work[i].take() else {
                continue;
            };
            if let Some((kind, factor)) = self.fault {
                if self.nodes[i].op.kind() == kind {
                    g.iter_mut().for_each(|v| *v *= factor);
                }
            }
            self.propagate(i, &g, &mut work);
            accumulate_into(&mut self.grads[i], g);
        }
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.trainable && grad.is_none() {
                *grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Accumulated gradient of `v`, if one has been materialized.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[self.check(v)].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let g = self.grad(v)?.to_vec();
        Some(Tensor::new(self.shape(v), g).expect("grad matches value shape"))
    }

    fn propagate(&self, i: usize, g: &[f64], work: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        // Accumulates a parent gradient, skipping parents that need none.
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let p = &self.nodes[v.index];
            if !p.requires_grad {
                return;
            }
            let slot = work[v.index].get_or_insert_with(|| vec![0.0; p.value.numel()]);
            f(slot);
        };
        let val = |v: Var| self.nodes[v.index].value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Matmul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            } => {
                let (av, bv) = (val(a), val(b));
                // C = A·B  : dA = dC·Bᵀ, dB = Aᵀ·dC
                // C = A·Bᵀ : dA = dC·B,  dB = dCᵀ·A
                send(a, &mut |da| gemm(m, n, k, g, false, bv, !trans_b, da));
                if trans_b {
                    send(b, &mut |db| gemm(n, m, k, g, true, av, false, db));
                } else {
                    send(b, &mut |db| gemm(k, m, n, av, true, g, false, db));
                }
            }
            &Op::BatchMatmul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (av, bv) = (val(a), val(b));
                let (sa, sb, sc) = (m * k, k * n, m * n);
                send(a, &mut |da| {
                    for t in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[t * sc..(t + 1) * sc],
                            false,
                            &bv[t * sb..(t + 1) * sb],
                            !trans_b,
                            &mut da[t * sa..(t + 1) * sa],
                        );
                    }
                });
                send(b, &mut |db| {
                    for t in 0..batch {
                        let gs = &g[t * sc..(t + 1) * sc];
                        let as_ = &av[t * sa..(t + 1) * sa];
                        let dbs = &mut db[t * sb..(t + 1) * sb];
                        if trans_b {
                            gemm(n, m, k, gs, true, as_, false, dbs);
                        } else {
                            gemm(k, m, n, as_, true, gs, false, dbs);
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                send(a, &mut |d| add_assign(d, g));
                send(b, &mut |d| add_assign(d, g));
            }
            &Op::Sub(a, b) => {
                send(a, &mut |d| add_assign(d, g));
                send(b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                send(a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                });
                send(b, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                });
            }
            &Op::AddBias { x, bias } => {
                send(x, &mut |d| add_assign(d, g));
                let c = self.nodes[bias.index].value.numel();
                send(bias, &mut |d| {
                    for row in g.chunks(c) {
                        add_assign(d, row);
                    }
                });
            }
            &Op::ScaleRows { x, scale } => {
                let (xv, sv) = (val(x), val(scale));
                let c = node.value.last_dim();
                send(x, &mut |d| {
                    for ((drow, grow), &s) in d.chunks_mut(c).zip(g.chunks(c)).zip(sv) {
                        drow.iter_mut().zip(grow).for_each(|(d, g)| *d += g * s);
                    }
                });
                send(scale, &mut |d| {
                    for ((ds, grow), xrow) in d.iter_mut().zip(g.chunks(c)).zip(xv.chunks(c)) {
                        *ds += grow.iter().zip(xrow).map(|(g, x)| g * x).sum::<f64>();
                    }
                });
            }
            &Op::Scale { x, factor } => {
                send(x, &mut |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g * factor)
                });
            }
            &Op::AddScalar { x } => send(x, &mut |d| add_assign(d, g)),
            &Op::Exp { x } => {
                send(x, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(out) {
                        *d += g * y;
                    }
                });
            }
            &Op::Reciprocal { x } => {
                send(x, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(out) {
                        *d -= g * y * y;
                    }
                });
            }
            &Op::Relu { x } => {
                let xv = val(x);
                send(x, &mut |d| {
                    for ((d, g), &xi) in d.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            &Op::Clamp { x, lo, hi } => {
                let xv = val(x);
                send(x, &mut |d| {
                    for ((d, g), &xi) in d.iter_mut().zip(g).zip(xv) {
                        if (lo..=hi).contains(&xi) {
                            *d += g;
                        }
                    }
                });
            }
            &Op::Softmax { x } => {
                let c = node.value.last_dim();
                send(x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (g - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let c = node.value.last_dim();
                let gv = val(*gamma);
                send(*gamma, &mut |d| {
                    for (grow, nrow) in g.chunks(c).zip(normalized.chunks(c)) {
                        for ((d, g), n) in d.iter_mut().zip(grow).zip(nrow) {
                            *d += g * n;
                        }
                    }
                });
                send(*beta, &mut |d| {
                    for grow in g.chunks(c) {
                        add_assign(d, grow);
                    }
                });
                send(*x, &mut |d| {
                    let mut dxhat = vec![0.0; c];
                    for (((drow, grow), nrow), &is) in d
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(normalized.chunks(c))
                        .zip(inv_std)
                    {
                        for ((dx, g), gam) in dxhat.iter_mut().zip(grow).zip(gv) {
                            *dx = g * gam;
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dn =
                            dxhat.iter().zip(nrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for ((d, dx), n) in drow.iter_mut().zip(&dxhat).zip(nrow) {
                            *d += is * (dx - mean_d - n * mean_dn);
                        }
                    }
                });
            }
            &Op::MeanRows { x, rows } => {
                let c = node.value.last_dim();
                send(x, &mut |d| {
                    for (o, grow) in g.chunks(c).enumerate() {
                        for r in 0..rows {
                            let drow = &mut d[(o * rows + r) * c..(o * rows + r + 1) * c];
                            drow.iter_mut()
                                .zip(grow)
                                .for_each(|(d, g)| *d += g / rows as f64);
                        }
                    }
                });
            }
            &Op::MeanLast { x } => {
                let c = self.nodes[x.index].value.last_dim();
                send(x, &mut |d| {
                    for (drow, &gi) in d.chunks_mut(c).zip(g) {
                        drow.iter_mut().for_each(|d| *d += gi / c as f64);
                    }
                });
            }
            &Op::Sum { x } => send(x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Concat { parts } => {
                let total: usize = parts.iter().map(|&(_, w)| w).sum();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for &(p, w) in parts {
                    send(p, &mut |d| {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            add_assign(&mut d[r * w..(r + 1) * w], src);
                        }
                    });
                    offset += w;
                }
            }
            &Op::Slice { x, start, width } => {
                let c = self.nodes[x.index].value.last_dim();
                send(x, &mut |d| {
                    for (drow, grow) in d.chunks_mut(c).zip(g.chunks(width)) {
                        add_assign(&mut drow[start..start + width], grow);
                    }
                });
            }
            &Op::Reshape { x } => send(x, &mut |d| add_assign(d, g)),
            Op::NormalizeRows { x, norms } => {
                let c = node.value.last_dim();
                send(*x, &mut |d| {
                    for (((drow, grow), yrow), &n) in d
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(out.chunks(c))
                        .zip(norms)
                    {
                        if n <= NORM_FLOOR {
                            continue;
                        }
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += (g - y * dot) / n;
                        }
                    }
                });
            }
            &Op::Contrastive { sim, diag_weight } => {
                let s = val(sim);
                let k = self.nodes[sim.index].value.shape()[0];
                let scale = g[0] / k as f64;
                send(sim, &mut |d| {
                    for (r, (drow, row)) in d.chunks_mut(k).zip(s.chunks(k)).enumerate() {
                        let (e, _, z) = contrastive_row(row, r, diag_weight);
                        for (j, dj) in drow.iter_mut().enumerate() {
                            *dj += scale
                                * if j == r {
                                    diag_weight * e[j] / z - 1.0
                                } else {
                                    e[j] / z
                                };
                        }
                    }
                });
            }
            Op::Nll {
                probs,
                labels,
                floor,
            } => {
                let p = &self.nodes[probs.index].value;
                let c = p.last_dim();
                let scale = g[0] / labels.len() as f64;
                send(*probs, &mut |d| {
                    for (row, &label) in labels.iter().enumerate() {
                        let pi = p.data()[row * c + label];
                        if pi > *floor {
                            d[row * c + label] -= scale / pi;
                        }
                    }
                });
            }
        }
    }
}

/// Shifted exponentials, row max and weighted partition for one similarity row.
fn contrastive_row(row: &[f64], diag: usize, diag_weight: f64) -> (Vec<f64>, f64, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z = e
        .iter()
        .enumerate()
        .map(|(j, &v)| if j == diag { diag_weight * v } else { v })
        .sum();
    (e, max, z)
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn accumulate_into(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(existing) => add_assign(existing, &g),
        None => *slot = Some(g),
    }
}
