//! Tape-based reverse-mode differentiation.
//!
//! Every forward pass records its operations on a [`Graph`]. Nodes are
//! appended in evaluation order, so the node list is already a topological
//! order and `backward` simply walks it in reverse. Parameters enter the tape
//! through [`Graph::param`], which binds each [`ParamId`] to exactly one leaf:
//! using the same parameter twice in one graph yields the same [`Var`].

use std::collections::HashMap;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{self, axis_split, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    AddScalar(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Softmax {
        src: Var,
        axis: usize,
    },
    Log(Var),
    Exp(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Dropout {
        src: Var,
        mask: Vec<Real>,
    },
    LogSumExp {
        src: Var,
        axis: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<Real>,
        inv_std: Vec<Real>,
    },
    Mean {
        src: Var,
        axis: usize,
    },
    Sum(Var),
    Gather {
        src: Var,
        idx: Vec<usize>,
    },
    Expand(Var),
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape for one forward/backward cycle.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<Real>>>,
    bindings: HashMap<ParamId, Var>,
}

const GELU_C: Real = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: Real = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a gradient-tracking leaf. Repeated calls
    /// with the same id return the same variable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bindings.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), true);
        self.bindings.insert(id, v);
        v
    }

    pub fn binding(&self, id: ParamId) -> Option<Var> {
        self.bindings.get(&id).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("gradient shape tracks value shape")
        })
    }

    /// Gradients of every bound parameter reached by backward.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[Real])> + '_ {
        self.bindings
            .iter()
            .filter_map(|(&id, &v)| self.grads[v.0].as_deref().map(|g| (id, g)))
    }

    // ----- elementwise and linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Elementwise sum of equal shapes, or a bias row added to every row of
    /// a matrix (the only broadcast supported).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let rg = self.rg(a) || self.rg(b);
        if sa == sb {
            let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
            let value = Tensor::new(sa.to_vec(), data)?;
            return Ok(self.push(value, Op::Add(a, b), rg));
        }
        let is_bias =
            sa.len() == 2 && ((sb.len() == 1 && sb[0] == sa[1]) || (sb.len() == 2 && sb[0] == 1 && sb[1] == sa[1]));
        if !is_bias {
            return Err(Error::shape("add", sa, sb));
        }
        let cols = sa[1];
        let bias = self.value(b).data();
        let data: Vec<Real> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bias[i % cols])
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: Real) -> Var {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: Real) -> Var {
        self.unary(a, |x| x + k, Op::AddScalar(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Real::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Real::exp, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Real::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    /// Inverted dropout. In eval mode (or at rate 0) this returns `a` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: Real, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let mask: Vec<Real> = (0..self.value(a).numel())
            .map(|_| if rng.gen::<Real>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data: Vec<Real> = self.value(a).data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Dropout { src: a, mask }, rg))
    }

    // ----- structural -----

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Range `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} of {s:?}"),
            ));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let width = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = width;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Slice { src: a, axis, start }, rg))
    }

    /// Row `i` of a matrix as a `[1, cols]` matrix.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.slice(a, 0, i, i + 1)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let value = Tensor::new(shape.to_vec(), self.value(a).data().to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::invalid("transpose", format!("expected a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::invalid(
                "embedding",
                format!("table must be a matrix, got {s:?}"),
            ));
        }
        if ids.is_empty() {
            return Err(Error::invalid("embedding", "empty id list"));
        }
        let (rows, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(
                "embedding",
                format!("id {bad} out of range for {rows} rows"),
            ));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Selects elements by flat row-major index; output is a vector.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(a).numel();
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(Error::invalid("gather", format!("indices {idx:?} for {n} elements")));
        }
        let src = self.value(a).data();
        let data: Vec<Real> = idx.iter().map(|&i| src[i]).collect();
        let value = Tensor::vector(data);
        let rg = self.rg(a);
        Ok(self.push(
            value,
            Op::Gather {
                src: a,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.value(a).numel() != 1 {
            return Err(Error::shape("expand", self.shape(a), shape));
        }
        let value = Tensor::full(shape, self.value(a).item());
        let rg = self.rg(a);
        Ok(self.push(value, Op::Expand(a), rg))
    }

    /// Forward value `hard`, gradient routed to `soft` unchanged.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::shape("straight_through", hard.shape(), self.shape(soft)));
        }
        let rg = self.rg(soft);
        Ok(self.push(hard, Op::StraightThrough(soft), rg))
    }

    // ----- reductions and normalisation -----

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        self.check_axis("softmax", &s, axis)?;
        let (outer, len, inner) = axis_split(&s, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(Real::NEG_INFINITY, Real::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    data[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    data[at(k)] /= z;
                }
            }
        }
        let value = Tensor::new(s, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax { src: a, axis }, rg))
    }

    /// Numerically stable `log(sum(exp(a)))` along `axis`; the axis is removed.
    pub fn log_sum_exp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        self.check_axis("log_sum_exp", &s, axis)?;
        let (outer, len, inner) = axis_split(&s, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                data.push(tensor::log_sum_exp((0..len).map(|k| src[base + k * inner])));
            }
        }
        let value = Tensor::new(reduced_shape(&s, axis), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::LogSumExp { src: a, axis }, rg))
    }

    /// Mean along `axis`; the axis is removed.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        self.check_axis("mean", &s, axis)?;
        let (outer, len, inner) = axis_split(&s, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let total: Real = (0..len).map(|k| src[base + k * inner]).sum();
                data.push(total / len as Real);
            }
        }
        let value = Tensor::new(reduced_shape(&s, axis), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Mean { src: a, axis }, rg))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total: Real = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    /// Layer normalisation over the last axis of a matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: Real) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid("layer_norm", format!("expected a matrix, got {s:?}")));
        }
        let c = s[1];
        for p in [gamma, beta] {
            if self.value(p).numel() != c {
                return Err(Error::shape("layer_norm", &s, self.shape(p)));
            }
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(s[0]);
        let mut out = vec![0.0; src.len()];
        for r in 0..s[0] {
            let row = &src[r * c..(r + 1) * c];
            let mu = row.iter().sum::<Real>() / c as Real;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<Real>() / c as Real;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..c {
                let h = (row[j] - mu) * inv;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(s, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ----- helpers -----

    fn unary(&mut self, a: Var, f: impl Fn(Real) -> Real, op: Op) -> Var {
        let src = self.value(a);
        let data: Vec<Real> = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("unary keeps shape");
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
        if axis >= shape.len() {
            return Err(Error::invalid(op, format!("axis {axis} out of range for {shape:?}")));
        }
        Ok(())
    }

    // ----- backward -----

    /// Reverse pass from a scalar root. Gradients accumulate across calls.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::NonScalarRoot(self.shape(root).to_vec()));
        }
        if !self.rg(root) {
            return Ok(());
        }
        let mut tmp: Vec<Option<Vec<Real>>> = vec![None; self.nodes.len()];
        tmp[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = tmp[i].take() else { continue };
            self.propagate(i, &g, &mut tmp);
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn propagate(&self, i: usize, g: &[Real], tmp: &mut [Option<Vec<Real>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.rg(*a) {
                    let ga = self.slot(tmp, *a);
                    tensor::gemm_nt_acc(g, vb.data(), ga, m, n, k);
                }
                if self.rg(*b) {
                    let gb = self.slot(tmp, *b);
                    tensor::gemm_tn_acc(va.data(), g, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                self.acc(tmp, *a, |d| add_into(d, g));
                self.acc(tmp, *b, |d| add_into(d, g));
            }
            Op::AddBias(a, b) => {
                self.acc(tmp, *a, |d| add_into(d, g));
                self.acc(tmp, *b, |d| {
                    let c = d.len();
                    for (j, gv) in g.iter().enumerate() {
                        d[j % c] += gv;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.acc(tmp, *a, |d| add_into(d, g));
                self.acc(tmp, *b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(tmp, *a, |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * vb[j];
                    }
                });
                self.acc(tmp, *b, |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * va[j];
                    }
                });
            }
            Op::Scale(a, k) => self.acc(tmp, *a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += k * y)),
            Op::AddScalar(a) | Op::Reshape(a) | Op::StraightThrough(a) => self.acc(tmp, *a, |d| add_into(d, g)),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    self.acc(tmp, p, |d| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * len * inner;
                            add_into(&mut d[dst..dst + len * inner], &g[src..src + len * inner]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { src, axis, start } => {
                let (outer, len, inner) = axis_split(self.shape(*src), *axis);
                let width = node.value.shape()[*axis];
                self.acc(tmp, *src, |d| {
                    for o in 0..outer {
                        let dst = o * len * inner + start * inner;
                        let from = o * width * inner;
                        add_into(&mut d[dst..dst + width * inner], &g[from..from + width * inner]);
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                self.acc(tmp, *a, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Softmax { src, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                self.acc(tmp, *src, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * len * inner + k * inner + i;
                            let dot: Real = (0..len).map(|k| g[at(k)] * out[at(k)]).sum();
                            for k in 0..len {
                                d[at(k)] += out[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.acc(tmp, *a, |d| (0..d.len()).for_each(|j| d[j] += g[j] / x[j]));
            }
            Op::Exp(a) => self.acc(tmp, *a, |d| (0..d.len()).for_each(|j| d[j] += g[j] * out[j])),
            Op::Tanh(a) => self.acc(tmp, *a, |d| {
                (0..d.len()).for_each(|j| d[j] += g[j] * (1.0 - out[j] * out[j]))
            }),
            Op::Sigmoid(a) => self.acc(tmp, *a, |d| {
                (0..d.len()).for_each(|j| d[j] += g[j] * out[j] * (1.0 - out[j]))
            }),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.acc(tmp, *a, |d| {
                    (0..d.len()).for_each(|j| {
                        if x[j] > 0.0 {
                            d[j] += g[j]
                        }
                    })
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.acc(tmp, *a, |d| {
                    for j in 0..d.len() {
                        let v = x[j];
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        d[j] += g[j] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                });
            }
            Op::Dropout { src, mask } => self.acc(tmp, *src, |d| (0..d.len()).for_each(|j| d[j] += g[j] * mask[j])),
            Op::LogSumExp { src, axis } => {
                let x = self.value(*src);
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let xd = x.data();
                self.acc(tmp, *src, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let lse = out[o * inner + i];
                            let gv = g[o * inner + i];
                            for k in 0..len {
                                let at = o * len * inner + k * inner + i;
                                d[at] += gv * (xd[at] - lse).exp();
                            }
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let dim = node.value.shape()[1];
                self.acc(tmp, *table, |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = node.value.shape()[1];
                let rows = inv_std.len();
                let gm = self.value(*gamma).data();
                self.acc(tmp, *gamma, |d| {
                    for r in 0..rows {
                        for j in 0..c {
                            d[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
                self.acc(tmp, *beta, |d| {
                    for r in 0..rows {
                        for j in 0..c {
                            d[j] += g[r * c + j];
                        }
                    }
                });
                self.acc(tmp, *x, |d| {
                    let n = c as Real;
                    for r in 0..rows {
                        let base = r * c;
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..c {
                            let dh = g[base + j] * gm[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[base + j];
                        }
                        for j in 0..c {
                            let dh = g[base + j] * gm[j];
                            d[base + j] += inv_std[r] / n * (n * dh - sum_dh - xhat[base + j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::Mean { src, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*src), *axis);
                self.acc(tmp, *src, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let gv = g[o * inner + i] / len as Real;
                            for k in 0..len {
                                d[o * len * inner + k * inner + i] += gv;
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => self.acc(tmp, *a, |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Gather { src, idx } => {
                self.acc(tmp, *src, |d| {
                    for (k, &i) in idx.iter().enumerate() {
                        d[i] += g[k];
                    }
                });
            }
            Op::Expand(a) => {
                let total: Real = g.iter().sum();
                self.acc(tmp, *a, |d| d[0] += total);
            }
        }
    }

    fn slot<'t>(&self, tmp: &'t mut [Option<Vec<Real>>], v: Var) -> &'t mut [Real] {
        let n = self.nodes[v.0].value.numel();
        tmp[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn acc(&self, tmp: &mut [Option<Vec<Real>>], v: Var, f: impl FnOnce(&mut [Real])) {
        if self.rg(v) {
            f(self.slot(tmp, v));
        }
    }
}

fn add_into(dst: &mut [Real], src: &[Real]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(Real, Real) -> Real) -> Vec<Real> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

pub(crate) fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
