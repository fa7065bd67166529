//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value, so append order is a
//! valid topological order and `backward` is a single reverse sweep.

use super::{Scalar, Tensor, TensorError};

/// Additive attention-mask entry for a forbidden position.
pub const NEG_SENTINEL: f64 = -1e9;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Gelu(Var),
    Gather { table: Var, indices: Vec<usize> },
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { input: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    L2Normalize { input: Var, inv_norms: Vec<T> },
    MaskedSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Mse { pred: Var, truth: Var },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Append-only computation tape.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

const LN_EPS: f64 = 1e-5;

/// Splits `shape` around `axis` into (outer, axis_len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let one = T::one();
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (one + T::lit(3.0) * k * x * x);
    let value = half * x * (one + t);
    let deriv = half * (one + t) + half * x * (one - t * t) * du;
    (value, deriv)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the graph can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Result<Var, TensorError> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Result<Var, TensorError> {
        self.push(t, true, Op::Leaf)
    }

    /// Leaf that never accumulates gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var, TensorError> {
        self.push(t, false, Op::Leaf)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::Shape(format!("matmul needs rank-2 operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if transpose_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(TensorError::Shape(format!(
                "matmul inner dimensions differ: {sa:?} · {}{sb:?}",
                if transpose_b { "transpose of " } else { "" }
            )));
        }
        let mut out = vec![T::zero(); m * n];
        let (rsb, csb) = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            rsb,
            csb,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul { a, b, transpose_b })
    }

    /// Matrix product `a·b` of rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var, TensorError> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(t, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, TensorError> {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(t, rg, Op::Scale(a, s))
    }

    /// Adds a `[d]` vector to every trailing-axis slice of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(TensorError::Shape(format!(
                "bias {:?} does not match trailing axis of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias).data();
        let vx = self.value(x);
        let data = vx.data().iter().enumerate().map(|(i, &v)| v + b[i % d]).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        self.push(t, rg, Op::AddBias(x, bias))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a).map(|x| gelu_parts(x).0);
        let rg = self.rg(&[a]);
        self.push(t, rg, Op::Gelu(a))
    }

    /// Selects leading-axis rows of `table` (rank ≥ 1) by index.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let tv = self.value(table);
        let rows = tv.shape()[0];
        let width = tv.numel() / rows.max(1);
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::Index(format!("lookup index {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(&tv.data()[i * width..(i + 1) * width]);
        }
        let mut shape = tv.shape().to_vec();
        shape[0] = indices.len();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[table]);
        self.push(t, rg, Op::Gather { table, indices: indices.to_vec() })
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::Shape(format!("transpose needs rank ≥ 2, got {shape:?}")));
        }
        let r = shape.len();
        let (m, n) = (shape[r - 2], shape[r - 1]);
        let batch = shape[..r - 2].iter().product::<usize>();
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..batch {
            let off = bi * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[off + j * m + i] = src[off + i * n + j];
                }
            }
        }
        let mut new_shape = shape;
        new_shape.swap(r - 2, r - 1);
        let rg = self.rg(&[a]);
        self.push(Tensor::new(new_shape, out)?, rg, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = Tensor::new(shape.to_vec(), self.value(a).data().to_vec())?;
        let rg = self.rg(&[a]);
        self.push(t, rg, Op::Reshape(a))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = inputs.first().ok_or_else(|| TensorError::Shape("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(TensorError::Shape(format!("concat: {:?} incompatible with {base:?}", s)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        self.push(Tensor::new(shape, out)?, rg, Op::Concat { inputs: inputs.to_vec(), axis })
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::Index(format!(
                "slice {start}..{} on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(&[a]);
        self.push(Tensor::new(new_shape, out)?, rg, Op::Narrow { input: a, axis, start })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::lit(v.numel().max(1) as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), rg, Op::Mean(a))
    }

    /// Scales every trailing-axis slice to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let d = v.last_dim();
        let mut out = v.data().to_vec();
        let mut inv_norms = Vec::with_capacity(v.rows());
        for (r, row) in out.chunks_mut(d).enumerate() {
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if norm == T::zero() {
                return Err(TensorError::ZeroNorm { row: r });
            }
            let inv = T::one() / norm;
            row.iter_mut().for_each(|x| *x *= inv);
            inv_norms.push(inv);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        self.push(t, rg, Op::L2Normalize { input: a, inv_norms })
    }

    /// Softmax over the trailing axis of `logits + mask`.
    ///
    /// Mask entries are 0 or [`NEG_SENTINEL`]; a slice with every entry
    /// forbidden is rejected instead of producing a meaningless row.
    pub fn masked_softmax(&mut self, logits: Var, mask: Option<&Tensor<T>>) -> Result<Var, TensorError> {
        let v = self.value(logits);
        if let Some(m) = mask {
            if m.shape() != v.shape() {
                return Err(TensorError::Shape(format!(
                    "mask {:?} vs logits {:?}",
                    m.shape(),
                    v.shape()
                )));
            }
        }
        let d = v.last_dim();
        let half_sentinel = T::lit(NEG_SENTINEL / 2.0);
        let mut out = v.data().to_vec();
        for (r, row) in out.chunks_mut(d).enumerate() {
            if let Some(m) = mask {
                let mrow = m.row(r);
                if mrow.iter().all(|&x| x < half_sentinel) {
                    return Err(TensorError::DegenerateRow { row: r });
                }
                row.iter_mut().zip(mrow).for_each(|(x, &mv)| *x += mv);
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            let inv = T::one() / total;
            row.iter_mut().for_each(|x| *x *= inv);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[logits]);
        self.push(t, rg, Op::MaskedSoftmax(logits))
    }

    /// Normalizes trailing-axis slices to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let d = vx.last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::Shape(format!(
                "layer_norm affine {:?}/{:?} vs input {:?}",
                self.shape(gain),
                self.shape(bias),
                vx.shape()
            )));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let dn = T::lit(d as f64);
        let eps = T::lit(LN_EPS);
        let mut xhat = vx.data().to_vec();
        let mut out = vec![T::zero(); xhat.len()];
        let mut rstd = Vec::with_capacity(vx.rows());
        for (row, orow) in xhat.chunks_mut(d).zip(out.chunks_mut(d)) {
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mu) * rs;
                orow[j] = *v * g[j] + b[j];
            }
            rstd.push(rs);
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(t, rg, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy_from_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(logits);
        if v.shape().len() != 2 || v.shape()[0] != targets.len() {
            return Err(TensorError::Shape(format!(
                "cross_entropy: logits {:?} with {} targets",
                v.shape(),
                targets.len()
            )));
        }
        let vocab = v.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(TensorError::Index(format!("target {bad} ≥ vocabulary size {vocab}")));
        }
        let n = targets.len();
        let mut probs = v.data().to_vec();
        let mut loss = T::zero();
        for ((row, orig), &t) in probs.chunks_mut(vocab).zip(v.data().chunks(vocab)).zip(targets) {
            let max = orig.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            // -log p_t = log Σ exp(z_j - max) - (z_t - max)
            loss += total.ln() - (orig[t] - max);
            let inv = T::one() / total;
            row.iter_mut().for_each(|x| *x *= inv);
        }
        let mean = if n == 0 { T::zero() } else { loss / T::lit(n as f64) };
        let rg = self.rg(&[logits]);
        self.push(Tensor::scalar(mean), rg, Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, pred: Var, truth: Var) -> Result<Var, TensorError> {
        self.same_shape(pred, truth, "mse")?;
        let (p, t) = (self.value(pred), self.value(truth));
        let n = p.numel();
        let s: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let m = if n == 0 { T::zero() } else { s / T::lit(n as f64) };
        let rg = self.rg(&[pred, truth]);
        self.push(Tensor::scalar(m), rg, Op::Mse { pred, truth })
    }

    /// Populates gradients of every trainable node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[idx].grad.take() else { continue };
            if self.nodes[idx].requires_grad {
                let contributions = self.vjp(idx, &grad);
                for (input, contribution) in contributions {
                    self.accumulate(input, contribution);
                }
            }
            self.nodes[idx].grad = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, &b)| *a += b),
            None => node.grad = Some(contribution),
        }
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `dy`.
    fn vjp(&self, idx: usize, dy: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, transpose_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = node.value.shape()[1];
                if needs(a) {
                    let mut da = vec![T::zero(); m * k];
                    // dA = dC · Bᵀ
                    let (rs, cs) = if *transpose_b { (k as isize, 1) } else { (1, n as isize) };
                    T::gemm(m, n, k, dy, n as isize, 1, vb.data(), rs, cs, T::zero(), &mut da, k as isize, 1);
                    out.push((*a, da));
                }
                if needs(b) {
                    let mut db = vec![T::zero(); k * n];
                    if *transpose_b {
                        // dB (n×k) = dCᵀ · A
                        T::gemm(n, m, k, dy, 1, n as isize, va.data(), k as isize, 1, T::zero(), &mut db, k as isize, 1);
                    } else {
                        // dB (k×n) = Aᵀ · dC
                        T::gemm(k, m, n, va.data(), 1, k as isize, dy, n as isize, 1, T::zero(), &mut db, n as isize, 1);
                    }
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, dy.to_vec()));
                out.push((*b, dy.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, dy.to_vec()));
                out.push((*b, dy.iter().map(|&x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if needs(a) {
                    out.push((*a, dy.iter().zip(vb).map(|(&g, &y)| g * y).collect()));
                }
                if needs(b) {
                    out.push((*b, dy.iter().zip(va).map(|(&g, &x)| g * x).collect()));
                }
            }
            Op::Scale(a, s) => out.push((*a, dy.iter().map(|&g| g * *s).collect())),
            Op::AddBias(x, bias) => {
                out.push((*x, dy.to_vec()));
                if needs(bias) {
                    let d = self.value(*bias).numel();
                    let mut db = vec![T::zero(); d];
                    for row in dy.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                    }
                    out.push((*bias, db));
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                out.push((*a, dy.iter().zip(x).map(|(&g, &xv)| g * gelu_parts(xv).1).collect()));
            }
            Op::Gather { table, indices } => {
                let tv = self.value(*table);
                let width = tv.numel() / tv.shape()[0].max(1);
                let mut dt = vec![T::zero(); tv.numel()];
                for (r, &i) in indices.iter().enumerate() {
                    let dst = &mut dt[i * width..(i + 1) * width];
                    dst.iter_mut().zip(&dy[r * width..(r + 1) * width]).for_each(|(a, &g)| *a += g);
                }
                out.push((*table, dt));
            }
            Op::Transpose(a) => {
                let shape = node.value.shape();
                let r = shape.len();
                let (m, n) = (shape[r - 2], shape[r - 1]);
                let batch = shape[..r - 2].iter().product::<usize>();
                let mut da = vec![T::zero(); dy.len()];
                for bi in 0..batch {
                    let off = bi * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            da[off + j * m + i] = dy[off + i * n + j];
                        }
                    }
                }
                out.push((*a, da));
            }
            Op::Reshape(a) => out.push((*a, dy.to_vec())),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    if needs(v) {
                        let mut dv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            dv.extend_from_slice(&dy[base..base + len * inner]);
                        }
                        out.push((*v, dv));
                    }
                    offset += len;
                }
            }
            Op::Narrow { input, axis, start } => {
                let in_shape = self.shape(*input);
                let (outer, n, inner) = split_axis(in_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut da = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    da[base..base + len * inner].copy_from_slice(&dy[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*input, da));
            }
            Op::Sum(a) => out.push((*a, vec![dy[0]; self.value(*a).numel()])),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                out.push((*a, vec![dy[0] / T::lit(n.max(1) as f64); n]));
            }
            Op::L2Normalize { input, inv_norms } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut da = vec![T::zero(); y.len()];
                for (r, inv) in inv_norms.iter().enumerate() {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &dy[r * d..(r + 1) * d]);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        da[r * d + j] = (gr[j] - yr[j] * dot) * *inv;
                    }
                }
                out.push((*input, da));
            }
            Op::MaskedSoftmax(a) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut da = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(dy.chunks(d)).zip(da.chunks_mut(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*a, da));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let g = self.value(*gain).data();
                let d = g.len();
                let dn = T::lit(d as f64);
                if needs(x) {
                    let mut dx = vec![T::zero(); xhat.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let xr = &xhat[r * d..(r + 1) * d];
                        let gr = &dy[r * d..(r + 1) * d];
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * g[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xr[j];
                        }
                        for j in 0..d {
                            let dxh = gr[j] * g[j];
                            dx[r * d + j] = *rs / dn * (dn * dxh - sum_dxh - xr[j] * sum_dxh_xh);
                        }
                    }
                    out.push((*x, dx));
                }
                if needs(gain) || needs(bias) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for (xr, gr) in xhat.chunks(d).zip(dy.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                            db[j] += gr[j];
                        }
                    }
                    out.push((*gain, dg));
                    out.push((*bias, db));
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = targets.len();
                if let Some(vocab) = probs.len().checked_div(n) {
                    let s = dy[0] / T::lit(n as f64);
                    let mut dl: Vec<T> = probs.iter().map(|&p| p * s).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * vocab + t] -= s;
                    }
                    out.push((*logits, dl));
                }
            }
            Op::Mse { pred, truth } => {
                let (p, t) = (self.value(*pred).data(), self.value(*truth).data());
                let s = T::lit(2.0) * dy[0] / T::lit(p.len().max(1) as f64);
                let dp: Vec<T> = p.iter().zip(t).map(|(&a, &b)| (a - b) * s).collect();
                if needs(truth) {
                    out.push((*truth, dp.iter().map(|&x| -x).collect()));
                }
                out.push((*pred, dp));
            }
        }
        out
    }
}
