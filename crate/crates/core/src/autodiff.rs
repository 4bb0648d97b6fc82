//! Dense f64 tensors with a define-by-run reverse-mode tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Each kernel appends one
//! node holding its output value plus whatever it needs for the backward pass
//! (argmax indices, clamp flags). [`Graph::backward`] walks the nodes in
//! reverse creation order, which is a valid reverse topological order because
//! a node can only reference nodes created before it.
//!
//! The kernel set is deliberately closed: elementwise `add`/`mul` with
//! broadcasting, `matmul`, 3×3 `conv2d`, `relu`, 2×2 `max_pool2d`,
//! `upsample2x`, `mean_pool`/`max_reduce` over axis sets, `concat`,
//! last-axis `softmax`, `log`, `sigmoid`, `gather_mask`, and two layout-only
//! kernels (`reshape`, `transpose`). Everything else is composition.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid argument to {op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

/// Row-major dense array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Invalid {
                op: "tensor",
                msg: format!("shape {:?} holds {} values, got {}", shape, n, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err("reshape", &self.shape, shape);
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }
}

/// Handle to a node in a [`Graph`].
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
    Add(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Conv2d { input: Var, weight: Var },
    Relu(Var),
    MaxPool2d { input: Var, argmax: Vec<usize> },
    Upsample2x(Var),
    MeanPool { input: Var, map: Vec<usize>, count: usize },
    MaxReduce { input: Var, argmax: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Softmax(Var),
    Log { input: Var, clamped: Vec<bool> },
    Sigmoid(Var),
    GatherMask { input: Var, axis: usize, index: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Parameters of one [`ParamStore`] bound as leaves of a graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wrap existing graph variables, in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: crate::params::ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Define-by-run tape. Topological order is creation order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    clamp_count: usize,
    branch_notes: Vec<u64>,
}

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

    /// Number of elements clamped by `log_clamped` so far.
    pub fn clamp_count(&self) -> usize {
        self.clamp_count
    }

    /// Record a discrete choice made outside the tape (for example a
    /// neighbour selection) so that it enters [`Graph::branch_signature`].
    pub fn record_branch(&mut self, key: u64) {
        self.branch_notes.push(key);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let grad = match (&op, requires_grad) {
            (Op::Leaf, true) => Some(Tensor::zeros(&value.shape)),
            _ => None,
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Bind every tensor of `store` as a leaf. Frozen bindings carry no grad.
    pub fn bind(&mut self, store: &ParamStore, trainable: bool) -> Bound {
        let vars = store
            .tensors()
            .iter()
            .map(|t| self.leaf(t.clone(), trainable))
            .collect();
        Bound { vars }
    }

    /// Accumulated gradient per bound parameter (zeros where none flowed).
    pub fn grads_of(&self, bound: &Bound) -> Vec<Tensor> {
        bound
            .vars
            .iter()
            .map(|&v| match self.grad(v) {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.shape(v)),
            })
            .collect()
    }

    // ---- kernels -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), "add", |x, y| x + y)?
            .check_finite("add")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), "mul", |x, y| x * y)?
            .check_finite("mul")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?.check_finite("matmul")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// 3×3 convolution, stride 1, zero padding 1.
    /// `input [c, h, w]`, `weight [o, c, 3, 3]` -> `[o, h, w]`.
    pub fn conv2d(&mut self, input: Var, weight: Var) -> Result<Var> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] || sw[2] != 3 || sw[3] != 3 {
            return shape_err("conv2d", si, sw);
        }
        let (c, h, w, o) = (si[0], si[1], si[2], sw[0]);
        let x = &self.value(input).data;
        let k = &self.value(weight).data;
        let mut out = vec![0.0; o * h * w];
        for oc in 0..o {
            let dst = &mut out[oc * h * w..(oc + 1) * h * w];
            for ic in 0..c {
                let src = &x[ic * h * w..(ic + 1) * h * w];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wt = k[((oc * c + ic) * 3 + ky) * 3 + kx];
                        if wt == 0.0 {
                            continue;
                        }
                        let (x0, x1) = valid_span(w, kx);
                        let (y0, y1) = valid_span(h, ky);
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            let drow = &mut dst[y * w + x0..y * w + x1];
                            let srow = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                            for (d, s) in drow.iter_mut().zip(srow) {
                                *d += wt * s;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![o, h, w], out)?.check_finite("conv2d")?;
        let rg = self.rg(&[input, weight]);
        Ok(self.push(out, Op::Conv2d { input, weight }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        };
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Relu(a), rg))
    }

    /// 2×2 max pooling, stride 2, on `[c, h, w]` with even `h` and `w`.
    pub fn max_pool2d(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(TensorError::Invalid {
                op: "max_pool2d",
                msg: format!("expected [c, even h, even w], got {:?}", s),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let x = &self.value(a).data;
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut best = ch * h * w + 2 * y * w + 2 * xo;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ch * h * w + (2 * y + dy) * w + 2 * xo + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![c, ho, wo], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MaxPool2d { input: a, argmax }, rg))
    }

    /// Nearest-neighbour ×2 upsampling on `[c, h, w]`.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 {
            return Err(TensorError::Invalid {
                op: "upsample2x",
                msg: format!("expected [c, h, w], got {:?}", s),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let x = &self.value(a).data;
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = x[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new(vec![c, 2 * h, 2 * w], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Upsample2x(a), rg))
    }

    /// Mean over `axes`; reduced axes are removed from the shape.
    pub fn mean_pool(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let (out_shape, map) = reduction_map(self.shape(a), axes, "mean_pool")?;
        let out_n: usize = out_shape.iter().product();
        let count = self.value(a).numel() / out_n.max(1);
        if count == 0 {
            return Err(TensorError::Invalid {
                op: "mean_pool",
                msg: "reduction over an empty axis".into(),
            });
        }
        let mut out = vec![0.0; out_n];
        for (x, &o) in self.value(a).data.iter().zip(&map) {
            out[o] += x;
        }
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::new(out_shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MeanPool { input: a, map, count }, rg))
    }

    /// Max over `axes`; ties resolve to the first element in row-major order.
    pub fn max_reduce(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let (out_shape, map) = reduction_map(self.shape(a), axes, "max_reduce")?;
        let out_n: usize = out_shape.iter().product();
        if self.value(a).numel() == 0 {
            return Err(TensorError::Invalid {
                op: "max_reduce",
                msg: "reduction over an empty axis".into(),
            });
        }
        let x = &self.value(a).data;
        let mut argmax = vec![usize::MAX; out_n];
        for (i, &o) in map.iter().enumerate() {
            if argmax[o] == usize::MAX || x[i] > x[argmax[o]] {
                argmax[o] = i;
            }
        }
        let out = Tensor::new(out_shape, argmax.iter().map(|&i| x[i]).collect())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MaxReduce { input: a, argmax }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => {
                return Err(TensorError::Invalid {
                    op: "concat",
                    msg: "no inputs".into(),
                })
            }
        };
        if axis >= first.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {} out of range for {:?}", axis, first),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err("concat", &first, s);
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let l = match v.shape.last() {
            Some(&l) if l > 0 => l,
            _ => {
                return Err(TensorError::Invalid {
                    op: "softmax",
                    msg: format!("needs a non-empty last axis, got {:?}", v.shape),
                })
            }
        };
        let mut out = v.data.clone();
        for row in out.chunks_mut(l) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let out = Tensor::new(v.shape.clone(), out)?.check_finite("softmax")?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Natural log. Non-positive inputs are a numeric error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data.iter().any(|&x| !(x > 0.0)) {
            return Err(TensorError::NonFinite { op: "log" });
        }
        self.log_clamped(a, 0.0)
    }

    /// `ln(max(x, floor))`. Clamped elements get zero gradient and are
    /// counted in [`Graph::clamp_count`].
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Result<Var> {
        let v = self.value(a);
        let clamped: Vec<bool> = v.data.iter().map(|&x| x < floor).collect();
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| x.max(floor).ln()).collect(),
        }
        .check_finite("log")?;
        self.clamp_count += clamped.iter().filter(|&&c| c).count();
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Log { input: a, clamped }, rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| sigmoid(x)).collect(),
        };
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Sigmoid(a), rg))
    }

    /// Keep the positions along `axis` where `mask` is true.
    pub fn gather_mask(&mut self, a: Var, axis: usize, mask: &[bool]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || s[axis] != mask.len() {
            return shape_err("gather_mask", &s, &[mask.len()]);
        }
        let index: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let x = &self.value(a).data;
        let mut out = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &i in &index {
                let base = (o * s[axis] + i) * inner;
                out.extend_from_slice(&x[base..base + inner]);
            }
        }
        let mut shape = s;
        shape[axis] = index.len();
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GatherMask { input: a, axis, index }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("expected a matrix, got {:?}", s),
            });
        }
        let (r, c) = (s[0], s[1]);
        let out = Tensor::new(vec![c, r], transpose_data(&self.value(a).data, r, c))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    // ---- compositions ----------------------------------------------------

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = self.constant(Tensor::scalar(c));
        self.mul(a, k)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = self.constant(Tensor::scalar(c));
        self.add(a, k)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let na = self.neg(a)?;
        self.add_scalar(na, 1.0)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        let m = self.mean_pool(a, &axes)?;
        self.scale(m, n as f64)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean_pool(a, &axes)
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulate `d loss / d leaf` into every leaf that requires grad.
    /// Calling it again on the same graph adds the gradients a second time.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return shape_err("backward", self.shape(loss), &[]);
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let acc = self.nodes[id].grad.as_mut().expect("trainable leaf has grad");
                acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b);
                continue;
            }
            for (input, contrib) in self.local_grads(id, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match grads[input.0].as_mut() {
                    Some(acc) => acc.data.iter_mut().zip(&contrib.data).for_each(|(a, b)| *a += b),
                    None => grads[input.0] = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, id: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[id];
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => {
                let mut v = Vec::new();
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                if self.requires_grad(*a) {
                    v.push((*a, reduce_broadcast(g, sa, |_| 1.0)));
                }
                if self.requires_grad(*b) {
                    v.push((*b, reduce_broadcast(g, sb, |_| 1.0)));
                }
                v
            }
            Op::Mul(a, b) => {
                let mut v = Vec::new();
                if self.requires_grad(*a) {
                    let bv = self.value(*b);
                    let ib = broadcast_index(&g.shape, &bv.shape);
                    v.push((*a, reduce_broadcast(g, self.shape(*a), |k| bv.data[ib[k]])));
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a);
                    let ia = broadcast_index(&g.shape, &av.shape);
                    v.push((*b, reduce_broadcast(g, self.shape(*b), |k| av.data[ia[k]])));
                }
                v
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                let mut v = Vec::new();
                if self.requires_grad(*a) {
                    let bt = transpose_data(&bv.data, k, n);
                    let mut da = vec![0.0; m * k];
                    matmul_into(&g.data, &bt, &mut da, m, n, k);
                    v.push((*a, Tensor::new(vec![m, k], da)?));
                }
                if self.requires_grad(*b) {
                    let at = transpose_data(&av.data, m, k);
                    let mut db = vec![0.0; k * n];
                    matmul_into(&at, &g.data, &mut db, k, m, n);
                    v.push((*b, Tensor::new(vec![k, n], db)?));
                }
                v
            }
            Op::Conv2d { input, weight } => {
                let (xv, wv) = (self.value(*input), self.value(*weight));
                let (c, h, w, o) = (xv.shape[0], xv.shape[1], xv.shape[2], wv.shape[0]);
                let need_x = self.requires_grad(*input);
                let need_w = self.requires_grad(*weight);
                let mut dx = vec![0.0; if need_x { c * h * w } else { 0 }];
                let mut dw = vec![0.0; if need_w { o * c * 9 } else { 0 }];
                for oc in 0..o {
                    let go = &g.data[oc * h * w..(oc + 1) * h * w];
                    for ic in 0..c {
                        let src = &xv.data[ic * h * w..(ic + 1) * h * w];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let widx = ((oc * c + ic) * 3 + ky) * 3 + kx;
                                let wt = wv.data[widx];
                                let (x0, x1) = valid_span(w, kx);
                                let (y0, y1) = valid_span(h, ky);
                                let mut acc = 0.0;
                                for y in y0..y1 {
                                    let sy = y + ky - 1;
                                    let grow = &go[y * w + x0..y * w + x1];
                                    let off = sy * w + x0 + kx - 1;
                                    if need_w {
                                        let srow = &src[off..off + (x1 - x0)];
                                        acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                                    }
                                    if need_x && wt != 0.0 {
                                        let drow = &mut dx[ic * h * w + off..ic * h * w + off + (x1 - x0)];
                                        for (d, gg) in drow.iter_mut().zip(grow) {
                                            *d += wt * gg;
                                        }
                                    }
                                }
                                if need_w {
                                    dw[widx] += acc;
                                }
                            }
                        }
                    }
                }
                let mut v = Vec::new();
                if need_x {
                    v.push((*input, Tensor::new(vec![c, h, w], dx)?));
                }
                if need_w {
                    v.push((*weight, Tensor::new(vec![o, c, 3, 3], dw)?));
                }
                v
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let data = x
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                vec![(*a, Tensor::new(x.shape.clone(), data)?)]
            }
            Op::MaxPool2d { input, argmax } => {
                let mut d = Tensor::zeros(self.shape(*input));
                for (&i, &gi) in argmax.iter().zip(&g.data) {
                    d.data[i] += gi;
                }
                vec![(*input, d)]
            }
            Op::Upsample2x(a) => {
                let s = self.shape(*a);
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut d = Tensor::zeros(s);
                for ch in 0..c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            d.data[(ch * h + y / 2) * w + x / 2] += g.data[(ch * 2 * h + y) * 2 * w + x];
                        }
                    }
                }
                vec![(*a, d)]
            }
            Op::MeanPool { input, map, count } => {
                let inv = 1.0 / *count as f64;
                let data = map.iter().map(|&o| g.data[o] * inv).collect();
                vec![(*input, Tensor::new(self.shape(*input).to_vec(), data)?)]
            }
            Op::MaxReduce { input, argmax } => {
                let mut d = Tensor::zeros(self.shape(*input));
                for (&i, &gi) in argmax.iter().zip(&g.data) {
                    d.data[i] += gi;
                }
                vec![(*input, d)]
            }
            Op::Concat { inputs, axis } => {
                let shape = &node.value.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut v = Vec::new();
                let mut offset = 0;
                for &inp in inputs {
                    let len = self.shape(inp)[*axis] * inner;
                    if self.requires_grad(inp) {
                        let mut data = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            data.extend_from_slice(&g.data[o * total + offset..o * total + offset + len]);
                        }
                        v.push((inp, Tensor::new(self.shape(inp).to_vec(), data)?));
                    }
                    offset += len;
                }
                v
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let l = *y.shape.last().expect("softmax shape");
                let mut d = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data.chunks(l).zip(g.data.chunks(l)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot)));
                }
                vec![(*a, Tensor::new(y.shape.clone(), d)?)]
            }
            Op::Log { input, clamped } => {
                let x = self.value(*input);
                let data = x
                    .data
                    .iter()
                    .zip(&g.data)
                    .zip(clamped)
                    .map(|((&xi, &gi), &c)| if c { 0.0 } else { gi / xi })
                    .collect();
                vec![(*input, Tensor::new(x.shape.clone(), data)?.check_finite("log backward")?)]
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let data = y.data.iter().zip(&g.data).map(|(yi, gi)| gi * yi * (1.0 - yi)).collect();
                vec![(*a, Tensor::new(y.shape.clone(), data)?)]
            }
            Op::GatherMask { input, axis, index } => {
                let s = self.shape(*input);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut d = Tensor::zeros(s);
                let mut k = 0;
                for o in 0..outer {
                    for &i in index {
                        let base = (o * s[*axis] + i) * inner;
                        d.data[base..base + inner].copy_from_slice(&g.data[k..k + inner]);
                        k += inner;
                    }
                }
                vec![(*input, d)]
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshaped(self.shape(*a))?)],
            Op::Transpose(a) => {
                let s = self.shape(*a);
                // g is [c, r]
                vec![(*a, Tensor::new(s.to_vec(), transpose_data(&g.data, s[1], s[0]))?)]
            }
        };
        Ok(out)
    }

    /// Hash of every discrete branch taken by the forward pass: relu signs,
    /// pooling and max winners, log clamps. Two evaluations with equal
    /// signatures lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, n) in self.nodes.iter().enumerate() {
            match &n.op {
                Op::Relu(a) => {
                    i.hash(&mut h);
                    for &x in &self.value(*a).data {
                        (x > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool2d { argmax, .. } | Op::MaxReduce { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::Log { clamped, .. } => {
                    i.hash(&mut h);
                    clamped.hash(&mut h);
                }
                _ => {}
            }
        }
        self.branch_notes.hash(&mut h);
        h.finish()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output positions `[lo, hi)` for which kernel tap `k` (0..3) reads inside
/// an axis of length `n` under padding 1.
fn valid_span(n: usize, k: usize) -> (usize, usize) {
    match k {
        0 => (1.min(n), n),
        1 => (0, n),
        _ => (0, n.saturating_sub(1)),
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

fn transpose_data(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(op, a, b),
        };
    }
    Ok(out)
}

/// For each element of `out_shape`, the linear index into a tensor of
/// `in_shape` broadcast to it.
fn broadcast_index(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    if out_shape == in_shape {
        return (0..n).collect();
    }
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let mut strides = vec![0; rank];
    let mut s = 1;
    for i in (0..in_shape.len()).rev() {
        strides[i + pad] = if in_shape[i] == 1 { 0 } else { s };
        s *= in_shape[i];
    }
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0; rank];
    let mut cur = 0;
    for _ in 0..n {
        idx.push(cur);
        for d in (0..rank).rev() {
            counter[d] += 1;
            cur += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            cur -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape.clone(), data);
    }
    let shape = broadcast_shape(&a.shape, &b.shape, op)?;
    let ia = broadcast_index(&shape, &a.shape);
    let ib = broadcast_index(&shape, &b.shape);
    let data = ia.iter().zip(&ib).map(|(&i, &j)| f(a.data[i], b.data[j])).collect();
    Tensor::new(shape, data)
}

/// Sum `g * factor(k)` back onto `in_shape`, undoing broadcasting.
fn reduce_broadcast(g: &Tensor, in_shape: &[usize], factor: impl Fn(usize) -> f64) -> Tensor {
    let mut d = Tensor::zeros(in_shape);
    let idx = broadcast_index(&g.shape, in_shape);
    for (k, (&i, &gk)) in idx.iter().zip(&g.data).enumerate() {
        d.data[i] += gk * factor(k);
    }
    d
}

fn reduction_map(shape: &[usize], axes: &[usize], op: &'static str) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    if axes.iter().any(|&a| a >= rank) {
        return Err(TensorError::Invalid {
            op,
            msg: format!("axes {:?} out of range for {:?}", axes, shape),
        });
    }
    let keep: Vec<usize> = (0..rank).filter(|d| !axes.contains(d)).collect();
    let out_shape: Vec<usize> = keep.iter().map(|&d| shape[d]).collect();
    let mut out_strides = vec![0; rank];
    let mut s = 1;
    for &d in keep.iter().rev() {
        out_strides[d] = s;
        s *= shape[d];
    }
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0; rank];
    let mut cur = 0;
    for _ in 0..n {
        map.push(cur);
        for d in (0..rank).rev() {
            counter[d] += 1;
            cur += out_strides[d];
            if counter[d] < shape[d] {
                break;
            }
            cur -= out_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    Ok((out_shape, map))
}

// ---- gradient checking -------------------------------------------------------

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because a relu/max/clamp branch flipped within `h`.
    pub skipped: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Denominator floor for relative error, so that gradients that are zero up
/// to rounding do not register as failures.
pub const GRAD_REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_REL_FLOOR)
}

/// Check `d f / d x` at `x` for every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let wrapped = |g: &mut Graph, vs: &[Var]| f(g, vs[0]);
    let coords: Vec<(usize, usize)> = (0..x.numel()).map(|j| (0, j)).collect();
    grad_check_many(wrapped, std::slice::from_ref(x), &coords, h, tol)
}

/// Check the gradient of `f` with respect to several input tensors, at the
/// selected `(tensor, element)` coordinates.
pub fn grad_check_many<F>(
    f: F,
    xs: &[Tensor],
    coords: &[(usize, usize)],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.variable(x.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();
    let base_sig = g.branch_signature();
    let eval = |inputs: &[Tensor]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok((g.value(loss).item(), g.branch_signature()))
    };
    compare_gradients(eval, xs, &analytic, base_sig, coords, h, tol)
}

/// Compare `analytic` against central differences of `eval`. Kept separate
/// so a corrupted analytic gradient can be fed in as a negative control.
pub fn compare_gradients<E>(
    eval: E,
    xs: &[Tensor],
    analytic: &[Tensor],
    base_sig: u64,
    coords: &[(usize, usize)],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    E: Fn(&[Tensor]) -> Result<(f64, u64)>,
{
    let mut work: Vec<Tensor> = xs.to_vec();
    let mut max_rel: f64 = 0.0;
    let (mut checked, mut skipped) = (0, 0);
    for &(t, j) in coords {
        let orig = work[t].data[j];
        work[t].data[j] = orig + h;
        let (fp, sp) = eval(&work)?;
        work[t].data[j] = orig - h;
        let (fm, sm) = eval(&work)?;
        work[t].data[j] = orig;
        if sp != base_sig || sm != base_sig {
            skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        max_rel = max_rel.max(relative_error(analytic[t].data[j], numeric));
        checked += 1;
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        checked,
        skipped,
        tolerance: tol,
        passed: checked > 0 && max_rel <= tol,
    })
}
