//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Operations append nodes
//! and return [`Var`] handles; [`Graph::backward`] sweeps the tape once in
//! reverse, accumulating adjoints into per-node gradient buffers. Leaf
//! tensors are borrowed, not copied, so parameters live outside the graph
//! and survive it.

use super::{matmul_into, matmul_nt_into, matmul_tn_into, softmax_rows, Element, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'p, F> {
    Owned(Tensor<F>),
    Borrowed(&'p Tensor<F>),
}

impl<F> Value<'_, F> {
    fn get(&self) -> &Tensor<F> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `mul * x + add`, elementwise with scalar coefficients.
    Affine { x: Var, mul: F },
    /// `x[..., j] + bias[j]` for a rank-1 bias over the last axis.
    AddBias { x: Var, bias: Var },
    /// `x[i, t, :] + v[i, :]` — a per-batch-row bias over the middle axis.
    AddPerBatch { x: Var, v: Var },
    Matmul { a: Var, b: Var },
    /// `a · b^T` without materializing the transpose.
    MatmulNT { a: Var, b: Var },
    /// Batched matmul over the leading axis.
    Bmm { a: Var, b: Var },
    BmmNT { a: Var, b: Var },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: F },
    Embedding { table: Var, ids: Vec<u32> },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Transpose(Var),
    Dropout { x: Var, mask: Vec<F> },
    CrossEntropy { logits: Var, targets: Vec<u32>, probs: Vec<F>, valid: Vec<bool> },
    Sum(Var),
    Mean(Var),
}

struct Node<'p, F> {
    value: Value<'p, F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Define-by-run tape. Confined to one thread; dropped after use.
pub struct Graph<'p, F: Element> {
    nodes: Vec<Node<'p, F>>,
    grads: Vec<Option<Vec<F>>>,
    consumed: bool,
    check_finite: bool,
}

impl<'p, F: Element> Default for Graph<'p, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, F: Element> Graph<'p, F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), consumed: false, check_finite: true }
    }

    /// Disable the per-operation finiteness sweep (used by tests probing
    /// overflow behaviour; normal forward passes keep it on).
    pub fn without_finite_checks(mut self) -> Self {
        self.check_finite = false;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Borrow an external tensor as a leaf.
    pub fn leaf(&mut self, t: &'p Tensor<F>, requires_grad: bool) -> Var {
        self.push_raw(Value::Borrowed(t), Op::Leaf, requires_grad)
    }

    /// Move a tensor into the graph as a non-differentiable constant.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push_raw(Value::Owned(t), Op::Leaf, false)
    }

    /// Move a tensor into the graph as a differentiable input.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push_raw(Value::Owned(t), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.nodes[v.0].value.get()
    }

    /// Gradient of the last backward pass with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<F>> {
        self.grad(v).map(|g| {
            Tensor::new(self.value(v).shape().to_vec(), g.to_vec()).expect("grad shape")
        })
    }

    fn push_raw(&mut self, value: Value<'p, F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, out: Tensor<F>, op: Op<F>, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !out.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite values in {} output",
                op_name(&op)
            )));
        }
        Ok(self.push_raw(Value::Owned(out), op, requires_grad))
    }

    fn needs_grad(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{op}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.needs_grad(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.needs_grad(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.needs_grad(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// `mul * x + add` with scalar coefficients.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        let (m, c) = (F::from_f64(mul), F::from_f64(add));
        let data = self.value(x).data().iter().map(|&v| m * v + c).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.needs_grad(&[x]);
        self.push(out, Op::Affine { x, mul: m }, rg)
    }

    /// Scalar scale.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    /// Add a rank-1 bias over the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = match self.value(bias).shape() {
            [d] => *d,
            other => {
                return Err(Error::Dimension(format!("add_bias: bias must be rank 1, got {other:?}")))
            }
        };
        let xs = self.value(x).shape().to_vec();
        if xs.last() != Some(&d) {
            return Err(Error::Dimension(format!(
                "add_bias: x shape {xs:?} does not end in bias length {d}"
            )));
        }
        let bdata = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(bdata).map(|(&v, &b)| v + b).collect::<Vec<_>>())
            .collect();
        let out = Tensor::new(xs, data)?;
        let rg = self.needs_grad(&[x, bias]);
        self.push(out, Op::AddBias { x, bias }, rg)
    }

    /// `x[i, t, :] + v[i, :]`: broadcast a per-batch-row vector over the
    /// middle axis of a rank-3 tensor.
    pub fn add_per_batch(&mut self, x: Var, v: Var) -> Result<Var> {
        let (b, t, d) = self.value(x).dims3()?;
        let (vb, vd) = self.value(v).dims2()?;
        if vb != b || vd != d {
            return Err(Error::Dimension(format!(
                "add_per_batch: x {:?} with v {:?}",
                self.value(x).shape(),
                self.value(v).shape()
            )));
        }
        let xv = self.value(x).data();
        let vv = self.value(v).data();
        let mut data = Vec::with_capacity(xv.len());
        for i in 0..b {
            let vrow = &vv[i * d..(i + 1) * d];
            for tt in 0..t {
                let xrow = &xv[(i * t + tt) * d..(i * t + tt + 1) * d];
                data.extend(xrow.iter().zip(vrow).map(|(&a, &c)| a + c));
            }
        }
        let out = Tensor::new(vec![b, t, d], data)?;
        let rg = self.needs_grad(&[x, v]);
        self.push(out, Op::AddPerBatch { x, v }, rg)
    }

    // ── Matrix products ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::Dimension(format!(
                "matmul: inner dimensions differ, {:?} × {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_into(self.value(a).data(), self.value(b).data(), m, ka, n, out.data_mut());
        let rg = self.needs_grad(&[a, b]);
        self.push(out, Op::Matmul { a, b }, rg)
    }

    /// `a · b^T` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2()?;
        let (n, kb) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::Dimension(format!(
                "matmul_nt: inner dimensions differ, {:?} × {:?}^T",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_nt_into(self.value(a).data(), self.value(b).data(), m, ka, n, out.data_mut());
        let rg = self.needs_grad(&[a, b]);
        self.push(out, Op::MatmulNT { a, b }, rg)
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, m, ka) = self.value(a).dims3()?;
        let (bb, kb, n) = self.value(b).dims3()?;
        if ba != bb || ka != kb {
            return Err(Error::Dimension(format!(
                "bmm: {:?} × {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = Tensor::zeros(&[ba, m, n]);
        for i in 0..ba {
            matmul_into(
                &self.value(a).data()[i * m * ka..(i + 1) * m * ka],
                &self.value(b).data()[i * ka * n..(i + 1) * ka * n],
                m,
                ka,
                n,
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.needs_grad(&[a, b]);
        self.push(out, Op::Bmm { a, b }, rg)
    }

    /// Batched `a · b^T` for `a: [B,m,k]`, `b: [B,n,k]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, m, ka) = self.value(a).dims3()?;
        let (bb, n, kb) = self.value(b).dims3()?;
        if ba != bb || ka != kb {
            return Err(Error::Dimension(format!(
                "bmm_nt: {:?} × {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = Tensor::zeros(&[ba, m, n]);
        for i in 0..ba {
            matmul_nt_into(
                &self.value(a).data()[i * m * ka..(i + 1) * m * ka],
                &self.value(b).data()[i * n * ka..(i + 1) * n * ka],
                m,
                ka,
                n,
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.needs_grad(&[a, b]);
        self.push(out, Op::BmmNT { a, b }, rg)
    }

    // ── Nonlinearities ──────────────────────────────────────────────────

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v.tanh()).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.needs_grad(&[x]);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let one = F::one();
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| {
                // Split by sign to avoid overflow in exp.
                if v >= F::zero() {
                    one / (one + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (one + e)
                }
            })
            .collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.needs_grad(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let z = F::zero();
        let data = self.value(x).data().iter().map(|&v| if v > z { v } else { z }).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.needs_grad(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let mut out = Tensor::new(shape.clone(), self.value(x).data().to_vec())?;
        if axis == shape.len() - 1 {
            softmax_rows(out.data_mut(), shape[axis]);
        } else {
            let (outer, len, inner) = split_axis(&shape, axis);
            softmax_strided(out.data_mut(), outer, len, inner);
        }
        let rg = self.needs_grad(&[x]);
        self.push(out, Op::Softmax { x, axis }, rg)
    }

    /// Per-row normalization over the last axis followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm: epsilon must be > 0, got {eps}")));
        }
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().ok_or_else(|| Error::Dimension("layer_norm on rank-0".into()))?;
        for (v, name) in [(gain, "gain"), (bias, "bias")] {
            if self.value(v).shape() != [d] {
                return Err(Error::Dimension(format!(
                    "layer_norm: {name} shape {:?} does not match feature size {d}",
                    self.value(v).shape()
                )));
            }
        }
        let epsf = F::from_f64(eps);
        let gd = self.value(gain).data();
        let bd = self.value(bias).data();
        let mut data = Vec::with_capacity(self.value(x).numel());
        for row in self.value(x).data().chunks(d) {
            let (mean, inv_std) = row_stats(row, epsf);
            for (j, &v) in row.iter().enumerate() {
                data.push(gd[j] * ((v - mean) * inv_std) + bd[j]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.needs_grad(&[x, gain, bias]);
        self.push(out, Op::LayerNorm { x, gain, bias, eps: epsf }, rg)
    }

    // ── Structure ───────────────────────────────────────────────────────

    /// Gather rows of `table` by id; output shape is `ids_shape + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32], ids_shape: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Dimension(format!(
                "embedding: ids shape {ids_shape:?} does not cover {} ids",
                ids.len()
            )));
        }
        let tdata = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(Error::Input(format!("embedding: id {id} out of vocabulary {v}")));
            }
            data.extend_from_slice(&tdata[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let out = Tensor::new(shape, data)?;
        let rg = self.needs_grad(&[table]);
        self.push(out, Op::Embedding { table, ids: ids.to_vec() }, rg)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let first = self.value(xs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Dimension(format!(
                "concat: axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut total_axis = 0;
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Dimension(format!(
                    "concat: shape {s:?} incompatible with {first:?} along axis {axis}"
                )));
            }
            total_axis += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total_axis;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &x in xs {
                let s = self.value(x).shape();
                let block = s[axis] * inner;
                let src = self.value(x).data();
                data.extend_from_slice(&src[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.needs_grad(xs);
        self.push(out, Op::Concat { xs: xs.to_vec(), axis }, rg)
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::Dimension(format!(
                "slice: [{start}, {start}+{len}) along axis {axis} of shape {shape:?}"
            )));
        }
        let (outer, alen, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        let rg = self.needs_grad(&[x]);
        self.push(out, Op::Slice { x, axis, start }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} to {:?}",
                self.value(x).shape(),
                shape
            )));
        }
        let out = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        let rg = self.needs_grad(&[x]);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Rank-2 transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        let rg = self.needs_grad(&[x]);
        self.push(out, Op::Transpose(x), rg)
    }

    /// Inverted dropout: each element is zeroed with probability `p`, the
    /// survivors scaled by `1/(1-p)`. Identity when `train` is false.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout: rate must be in [0,1), got {p}")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = F::from_f64(1.0 / (1.0 - p));
        let mask: Vec<F> =
            (0..self.value(x).numel()).map(|_| if rng.bernoulli(p) { F::zero() } else { keep }).collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.needs_grad(&[x]);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    /// Mean negative log-likelihood from log-softmax over rows of `logits`,
    /// with rows whose target id equals `pad_id` masked out of the mean.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], pad_id: u32) -> Result<Var> {
        let (rows, vocab) = self.value(logits).dims2()?;
        if targets.len() != rows {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} logit rows but {} targets",
                rows,
                targets.len()
            )));
        }
        let valid: Vec<bool> = targets.iter().map(|&t| t != pad_id).collect();
        let n_valid = valid.iter().filter(|&&v| v).count();
        if n_valid == 0 {
            return Err(Error::Input("cross_entropy: every target is padding".into()));
        }
        let mut probs = self.value(logits).data().to_vec();
        softmax_rows(&mut probs, vocab);
        let ldata = self.value(logits).data();
        let mut total = F::zero();
        for (r, (&t, &ok)) in targets.iter().zip(&valid).enumerate() {
            if !ok {
                continue;
            }
            let t = t as usize;
            if t >= vocab {
                return Err(Error::Input(format!("cross_entropy: target {t} out of vocab {vocab}")));
            }
            let row = &ldata[r * vocab..(r + 1) * vocab];
            let mut max = row[0];
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            total += log_z - row[t];
        }
        let loss = total / F::from_f64(n_valid as f64);
        let rg = self.needs_grad(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, valid },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: F = self.value(x).data().iter().copied().sum();
        let rg = self.needs_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s: F = self.value(x).data().iter().copied().sum();
        let rg = self.needs_grad(&[x]);
        self.push(Tensor::scalar(s / F::from_f64(n as f64)), Op::Mean(x), rg)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`. Visits each node exactly once;
    /// gradient buffers of intermediates are freed as soon as they have
    /// been propagated, leaves keep theirs for collection.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State("backward on a consumed graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.grads[i].is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // keep leaf gradients for the caller
            }
            let gout = self.grads[i].take().expect("checked above");
            self.propagate(i, &gout)?;
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [F])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.value(v).numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![F::zero(); n]);
        f(slot);
    }

    fn propagate(&mut self, i: usize, g: &[F]) -> Result<()> {
        // The node's op is cloned out cheaply by matching on references;
        // input values are read through immutable indexing while gradient
        // buffers are mutated, which is safe because they are separate fields.
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.acc(a, |ga| acc_slice(ga, g));
                self.acc(b, |gb| acc_slice(gb, g));
            }
            &Op::Sub(a, b) => {
                self.acc(a, |ga| acc_slice(ga, g));
                self.acc(b, |gb| {
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let av: Vec<F> = self.value(a).data().to_vec();
                let bv: Vec<F> = self.value(b).data().to_vec();
                self.acc(a, |ga| {
                    for ((o, &v), &bb) in ga.iter_mut().zip(g).zip(&bv) {
                        *o += v * bb;
                    }
                });
                self.acc(b, |gb| {
                    for ((o, &v), &aa) in gb.iter_mut().zip(g).zip(&av) {
                        *o += v * aa;
                    }
                });
            }
            &Op::Affine { x, mul } => {
                self.acc(x, |gx| {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o += mul * v;
                    }
                });
            }
            &Op::AddBias { x, bias } => {
                let d = self.value(bias).numel();
                self.acc(x, |gx| acc_slice(gx, g));
                self.acc(bias, |gb| {
                    for row in g.chunks(d) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
            }
            &Op::AddPerBatch { x, v } => {
                let (b, t, d) = self.value(x).dims3()?;
                self.acc(x, |gx| acc_slice(gx, g));
                self.acc(v, |gv| {
                    for i in 0..b {
                        for tt in 0..t {
                            let row = &g[(i * t + tt) * d..(i * t + tt + 1) * d];
                            for (o, &val) in gv[i * d..(i + 1) * d].iter_mut().zip(row) {
                                *o += val;
                            }
                        }
                    }
                });
            }
            &Op::Matmul { a, b } => {
                let (m, k) = self.value(a).dims2()?;
                let n = self.value(b).dims2()?.1;
                let av = self.value(a).data().to_vec();
                let bv = self.value(b).data().to_vec();
                // da = g · b^T ; db = a^T · g
                self.acc(a, |ga| matmul_nt_into(g, &bv, m, n, k, ga));
                self.acc(b, |gb| matmul_tn_into(&av, g, m, k, n, gb));
            }
            &Op::MatmulNT { a, b } => {
                let (m, k) = self.value(a).dims2()?;
                let n = self.value(b).dims2()?.0;
                let av = self.value(a).data().to_vec();
                let bv = self.value(b).data().to_vec();
                // out = a · b^T: da = g · b ; db = g^T · a
                self.acc(a, |ga| matmul_into(g, &bv, m, n, k, ga));
                self.acc(b, |gb| matmul_tn_into(g, &av, m, n, k, gb));
            }
            &Op::Bmm { a, b } => {
                let (bs, m, k) = self.value(a).dims3()?;
                let n = self.value(b).dims3()?.2;
                let av = self.value(a).data().to_vec();
                let bv = self.value(b).data().to_vec();
                self.acc(a, |ga| {
                    for i in 0..bs {
                        matmul_nt_into(
                            &g[i * m * n..(i + 1) * m * n],
                            &bv[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                self.acc(b, |gb| {
                    for i in 0..bs {
                        matmul_tn_into(
                            &av[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                });
            }
            &Op::BmmNT { a, b } => {
                let (bs, m, k) = self.value(a).dims3()?;
                let n = self.value(b).dims3()?.1;
                let av = self.value(a).data().to_vec();
                let bv = self.value(b).data().to_vec();
                // out[i] = a[i] · b[i]^T: da[i] = g[i] · b[i] ; db[i] = g[i]^T · a[i]
                self.acc(a, |ga| {
                    for i in 0..bs {
                        matmul_into(
                            &g[i * m * n..(i + 1) * m * n],
                            &bv[i * n * k..(i + 1) * n * k],
                            m,
                            n,
                            k,
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                self.acc(b, |gb| {
                    for i in 0..bs {
                        matmul_tn_into(
                            &g[i * m * n..(i + 1) * m * n],
                            &av[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                            &mut gb[i * n * k..(i + 1) * n * k],
                        );
                    }
                });
            }
            &Op::Tanh(x) => {
                let y = value_vec(&self.nodes, i);
                self.acc(x, |gx| {
                    for ((o, &v), &yy) in gx.iter_mut().zip(g).zip(&y) {
                        *o += v * (F::one() - yy * yy);
                    }
                });
            }
            &Op::Sigmoid(x) => {
                let y = value_vec(&self.nodes, i);
                self.acc(x, |gx| {
                    for ((o, &v), &yy) in gx.iter_mut().zip(g).zip(&y) {
                        *o += v * yy * (F::one() - yy);
                    }
                });
            }
            &Op::Relu(x) => {
                let xin = self.value(x).data().to_vec();
                self.acc(x, |gx| {
                    for ((o, &v), &xi) in gx.iter_mut().zip(g).zip(&xin) {
                        if xi > F::zero() {
                            *o += v;
                        }
                    }
                });
            }
            &Op::Softmax { x, axis } => {
                let y = value_vec(&self.nodes, i);
                let shape = self.value(x).shape().to_vec();
                let (outer, len, inner) = split_axis(&shape, axis);
                self.acc(x, |gx| {
                    for o in 0..outer {
                        for inr in 0..inner {
                            let base = o * len * inner + inr;
                            let mut dot = F::zero();
                            for l in 0..len {
                                let idx = base + l * inner;
                                dot += g[idx] * y[idx];
                            }
                            for l in 0..len {
                                let idx = base + l * inner;
                                gx[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }
            &Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(x).data().to_vec();
                let gv = self.value(gain).data().to_vec();
                let d = gv.len();
                let dn = F::from_f64(d as f64);
                self.acc(x, |gx| {
                    for (r, row) in xv.chunks(d).enumerate() {
                        let (mean, inv_std) = row_stats(row, eps);
                        let grow = &g[r * d..(r + 1) * d];
                        // dl/dxhat = g ⊙ gain; then the usual two-projection form.
                        let mut sum_dxhat = F::zero();
                        let mut sum_dxhat_xhat = F::zero();
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv_std;
                            let dxhat = grow[j] * gv[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv_std;
                            let dxhat = grow[j] * gv[j];
                            gx[r * d + j] += inv_std
                                * (dxhat - sum_dxhat / dn - xhat * sum_dxhat_xhat / dn);
                        }
                    }
                });
                self.acc(gain, |gg| {
                    for (r, row) in xv.chunks(d).enumerate() {
                        let (mean, inv_std) = row_stats(row, eps);
                        let grow = &g[r * d..(r + 1) * d];
                        for j in 0..d {
                            gg[j] += grow[j] * ((row[j] - mean) * inv_std);
                        }
                    }
                });
                self.acc(bias, |gb| {
                    for grow in g.chunks(d) {
                        for (o, &v) in gb.iter_mut().zip(grow) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let (table, ids) = (*table, ids.clone());
                let d = self.value(table).dims2()?.1;
                self.acc(table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                        for (o, &v) in dst.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let (xs, axis) = (xs.clone(), *axis);
                let out_shape = self.nodes[i].value.get().shape().to_vec();
                let (outer, _, inner) = split_axis(&out_shape, axis);
                let mut offset = 0;
                for &x in &xs {
                    let xlen = self.value(x).shape()[axis];
                    let block = xlen * inner;
                    let stride = out_shape[axis] * inner;
                    self.acc(x, |gx| {
                        for o in 0..outer {
                            let src = &g[o * stride + offset..o * stride + offset + block];
                            acc_slice(&mut gx[o * block..(o + 1) * block], src);
                        }
                    });
                    offset += block;
                }
            }
            &Op::Slice { x, axis, start } => {
                let in_shape = self.value(x).shape().to_vec();
                let out_len = self.nodes[i].value.get().shape()[axis];
                let (outer, alen, inner) = split_axis(&in_shape, axis);
                self.acc(x, |gx| {
                    for o in 0..outer {
                        let dst_base = o * alen * inner + start * inner;
                        let src = &g[o * out_len * inner..(o + 1) * out_len * inner];
                        acc_slice(&mut gx[dst_base..dst_base + out_len * inner], src);
                    }
                });
            }
            &Op::Reshape(x) => {
                self.acc(x, |gx| acc_slice(gx, g));
            }
            &Op::Transpose(x) => {
                let (m, n) = self.value(x).dims2()?;
                self.acc(x, |gx| {
                    // g has shape [n, m]
                    for j in 0..n {
                        for ii in 0..m {
                            gx[ii * n + j] += g[j * m + ii];
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                let (x, mask) = (*x, mask.clone());
                self.acc(x, |gx| {
                    for ((o, &v), &m) in gx.iter_mut().zip(g).zip(&mask) {
                        *o += v * m;
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs, valid } => {
                let logits = *logits;
                let targets = targets.clone();
                let probs = probs.clone();
                let valid = valid.clone();
                let vocab = self.value(logits).dims2()?.1;
                let n_valid = valid.iter().filter(|&&v| v).count();
                let scale = g[0] / F::from_f64(n_valid as f64);
                self.acc(logits, |gl| {
                    for (r, (&t, &ok)) in targets.iter().zip(&valid).enumerate() {
                        if !ok {
                            continue;
                        }
                        let row = &mut gl[r * vocab..(r + 1) * vocab];
                        let prow = &probs[r * vocab..(r + 1) * vocab];
                        for (j, (o, &p)) in row.iter_mut().zip(prow).enumerate() {
                            let delta = if j == t as usize { F::one() } else { F::zero() };
                            *o += scale * (p - delta);
                        }
                    }
                });
            }
            &Op::Sum(x) => {
                let s = g[0];
                self.acc(x, |gx| {
                    for o in gx.iter_mut() {
                        *o += s;
                    }
                });
            }
            &Op::Mean(x) => {
                let n = self.value(x).numel();
                let s = g[0] / F::from_f64(n as f64);
                self.acc(x, |gx| {
                    for o in gx.iter_mut() {
                        *o += s;
                    }
                });
            }
        }
        Ok(())
    }
}

fn op_name<F>(op: &Op<F>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Affine { .. } => "affine",
        Op::AddBias { .. } => "add_bias",
        Op::AddPerBatch { .. } => "add_per_batch",
        Op::Matmul { .. } => "matmul",
        Op::MatmulNT { .. } => "matmul_nt",
        Op::Bmm { .. } => "bmm",
        Op::BmmNT { .. } => "bmm_nt",
        Op::Tanh(_) => "tanh",
        Op::Sigmoid(_) => "sigmoid",
        Op::Relu(_) => "relu",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Embedding { .. } => "embedding",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Reshape(_) => "reshape",
        Op::Transpose(_) => "transpose",
        Op::Dropout { .. } => "dropout",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
    }
}

fn value_vec<F: Element>(nodes: &[Node<'_, F>], i: usize) -> Vec<F> {
    nodes[i].value.get().data().to_vec()
}

fn acc_slice<F: Element>(dst: &mut [F], src: &[F]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

/// Split a shape at `axis` into (product before, axis length, product after).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Mean and 1/sqrt(var + eps) of a row, with biased variance.
fn row_stats<F: Element>(row: &[F], eps: F) -> (F, F) {
    let n = F::from_f64(row.len() as f64);
    let mean = row.iter().copied().sum::<F>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    (mean, (var + eps).sqrt().recip())
}

fn softmax_strided<F: Element>(data: &mut [F], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for inr in 0..inner {
            let base = o * len * inner + inr;
            let mut max = data[base];
            for l in 1..len {
                let v = data[base + l * inner];
                if v > max {
                    max = v;
                }
            }
            let mut sum = F::zero();
            for l in 0..len {
                let idx = base + l * inner;
                data[idx] = (data[idx] - max).exp();
                sum = sum + data[idx];
            }
            for l in 0..len {
                data[base + l * inner] = data[base + l * inner] / sum;
            }
        }
    }
}
