use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels as k;
use super::{numel, Real, Result, Tensor, TensorError};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    graph: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.id
    }
}

/// Names of the primitive catalogue. Parsed from and printed as snake_case.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar,
    ScaleBy,
    Sqrt,
    Exp,
    MatMul,
    BatchMatMul,
    Transpose,
    Permute,
    Reshape,
    Concat,
    Slice,
    Expand,
    Sum,
    Mean,
    SumAxis,
    MeanAxis,
    Softmax,
    Gelu,
    Silu,
    LayerNorm,
    Embedding,
    DepthwiseConv1d,
    Conv1d,
    Rope,
}

impl OpKind {
    pub const ALL: [OpKind; 29] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::AddScalar,
        OpKind::MulScalar,
        OpKind::ScaleBy,
        OpKind::Sqrt,
        OpKind::Exp,
        OpKind::MatMul,
        OpKind::BatchMatMul,
        OpKind::Transpose,
        OpKind::Permute,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Expand,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumAxis,
        OpKind::MeanAxis,
        OpKind::Softmax,
        OpKind::Gelu,
        OpKind::Silu,
        OpKind::LayerNorm,
        OpKind::Embedding,
        OpKind::DepthwiseConv1d,
        OpKind::Conv1d,
        OpKind::Rope,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::AddScalar => "add_scalar",
            OpKind::MulScalar => "mul_scalar",
            OpKind::ScaleBy => "scale_by",
            OpKind::Sqrt => "sqrt",
            OpKind::Exp => "exp",
            OpKind::MatMul => "matmul",
            OpKind::BatchMatMul => "batch_matmul",
            OpKind::Transpose => "transpose",
            OpKind::Permute => "permute",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Expand => "expand",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis => "sum_axis",
            OpKind::MeanAxis => "mean_axis",
            OpKind::Softmax => "softmax",
            OpKind::Gelu => "gelu",
            OpKind::Silu => "silu",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Embedding => "embedding",
            OpKind::DepthwiseConv1d => "depthwise_conv1d",
            OpKind::Conv1d => "conv1d",
            OpKind::Rope => "rope",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| TensorError::UnknownOp(s.to_string()))
    }
}

/// Attributes for [`Graph::apply`]. Unused fields are ignored by each kind.
#[derive(Clone, Debug, Default)]
pub struct OpAttrs {
    pub scalar: f64,
    pub axis: usize,
    pub axes: Vec<usize>,
    pub shape: Vec<usize>,
    pub start: usize,
    pub end: usize,
    pub count: usize,
    pub ids: Vec<usize>,
    pub eps: f64,
    pub heads: usize,
    pub base: f64,
    pub offset: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    ScaleBy(usize, usize),
    Sqrt(usize),
    Exp(usize),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Slice { x: usize, axis: usize, start: usize },
    Expand { x: usize, axis: usize },
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    Softmax(usize),
    Gelu(usize),
    Silu(usize),
    LayerNorm {
        x: usize,
        gamma: Option<usize>,
        beta: Option<usize>,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding { table: usize, ids: Vec<usize> },
    DepthwiseConv1d { x: usize, w: usize, b: Option<usize> },
    Conv1d { x: usize, w: usize, b: Option<usize> },
    Rope { x: usize, heads: usize, base: f64, offset: usize },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::ScaleBy(a, b)
            | Op::MatMul(a, b)
            | Op::BatchMatMul(a, b) => vec![*a, *b],
            Op::AddScalar(x)
            | Op::MulScalar(x, _)
            | Op::Sqrt(x)
            | Op::Exp(x)
            | Op::Permute(x, _)
            | Op::Reshape(x)
            | Op::Slice { x, .. }
            | Op::Expand { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumAxis(x, _)
            | Op::MeanAxis(x, _)
            | Op::Softmax(x)
            | Op::Gelu(x)
            | Op::Silu(x)
            | Op::Rope { x, .. } => vec![*x],
            Op::Concat(xs, _) => xs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => {
                let mut v = vec![*x];
                v.extend(gamma.iter().chain(beta.iter()));
                v
            }
            Op::Embedding { table, .. } => vec![*table],
            Op::DepthwiseConv1d { x, w, b } | Op::Conv1d { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter());
                v
            }
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed primitives. Nodes are appended in execution
/// order, so the node list is always a topological order.
///
/// A graph is single-threaded (`!Sync`); independent graphs may live on
/// different threads.
pub struct Graph<T: Real> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, shape: &[usize], reason: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: shape.to_vec(),
        reason: reason.into(),
    }
}

fn to_f64s<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.id)
    }

    fn push(&self, value: Tensor<T>, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { id, graph: self.id }
    }

    /// Records an input tensor. Gradients are reported for leaves created
    /// with `requires_grad`.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var { id, graph: self.id }
    }

    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.id].requires_grad
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            nodes[ia].value.zip_with(&nodes[ib].value, name, f)?
        };
        Ok(self.push(value, op(ia, ib)))
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T, op: Op) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes.borrow()[ix].value.map(f);
        Ok(self.push(value, op))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary(x, |v| v + c, Op::AddScalar(x.id))
    }

    pub fn mul_scalar(&self, x: Var, c: f64) -> Result<Var> {
        let ct = T::of(c);
        self.unary(x, |v| v * ct, Op::MulScalar(x.id, c))
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn scale_by(&self, x: Var, s: Var) -> Result<Var> {
        let (ix, is) = (self.check(x)?, self.check(s)?);
        let value = {
            let nodes = self.nodes.borrow();
            let sv = &nodes[is].value;
            if sv.numel() != 1 {
                return Err(mismatch("scale_by", nodes[ix].value.shape(), sv.shape()));
            }
            let c = sv.data()[0];
            nodes[ix].value.scale(c)
        };
        Ok(self.push(value, Op::ScaleBy(ix, is)))
    }

    pub fn sqrt(&self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x.id))
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.exp(), Op::Exp(x.id))
    }

    pub fn gelu(&self, x: Var) -> Result<Var> {
        self.unary(x, k::gelu, Op::Gelu(x.id))
    }

    pub fn silu(&self, x: Var) -> Result<Var> {
        self.unary(x, k::silu, Op::Silu(x.id))
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.mul_scalar(x, -1.0)
    }

    /// `[n,k] x [k,m] -> [n,m]`
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[ia].value, &nodes[ib].value);
            let (sa, sb) = (av.shape(), bv.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(mismatch("matmul", sa, sb));
            }
            let (n, kk, m) = (sa[0], sa[1], sb[1]);
            Tensor::new([n, m], k::matmul(av.data(), bv.data(), n, kk, m))?
        };
        Ok(self.push(value, Op::MatMul(ia, ib)))
    }

    /// `[b,n,k] x [b,k,m] -> [b,n,m]`
    pub fn batch_matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[ia].value, &nodes[ib].value);
            let (sa, sb) = (av.shape(), bv.shape());
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(mismatch("batch_matmul", sa, sb));
            }
            let (bs, n, kk, m) = (sa[0], sa[1], sa[2], sb[2]);
            let mut out = Vec::with_capacity(bs * n * m);
            for i in 0..bs {
                out.extend(k::matmul(
                    &av.data()[i * n * kk..(i + 1) * n * kk],
                    &bv.data()[i * kk * m..(i + 1) * kk * m],
                    n,
                    kk,
                    m,
                ));
            }
            Tensor::new([bs, n, m], out)?
        };
        Ok(self.push(value, Op::BatchMatMul(ia, ib)))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 {
            return Err(invalid("transpose", &shape, "expected rank 2"));
        }
        self.permute(x, &[1, 0])
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[ix].value;
            let rank = xv.rank();
            let mut seen = vec![false; rank];
            if axes.len() != rank {
                return Err(invalid("permute", xv.shape(), format!("axes {axes:?}")));
            }
            for &a in axes {
                if a >= rank || seen[a] {
                    return Err(invalid("permute", xv.shape(), format!("axes {axes:?}")));
                }
                seen[a] = true;
            }
            let (data, shape) = k::permute(xv.data(), xv.shape(), axes);
            Tensor::new(shape, data)?
        };
        Ok(self.push(value, Op::Permute(ix, axes.to_vec())))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes.borrow()[ix].value.reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(ix)))
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let ids = xs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let value = {
            let nodes = self.nodes.borrow();
            let first = nodes
                .get(*ids.first().ok_or(TensorError::Arity {
                    op: "concat",
                    expected: 1,
                    actual: 0,
                })?)
                .map(|n| n.value.shape().to_vec())
                .unwrap_or_default();
            if axis >= first.len() {
                return Err(TensorError::AxisOutOfRange {
                    op: "concat",
                    axis,
                    rank: first.len(),
                });
            }
            let mut total = 0;
            for &i in &ids {
                let s = nodes[i].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter()
                        .zip(&first)
                        .enumerate()
                        .all(|(d, (a, b))| d == axis || a == b);
                if !compatible {
                    return Err(mismatch("concat", &first, s));
                }
                total += s[axis];
            }
            let mut out_shape = first.clone();
            out_shape[axis] = total;
            let (outer, _, inner) = k::split_axis(&out_shape, axis);
            let mut out = Vec::with_capacity(numel(&out_shape));
            for o in 0..outer {
                for &i in &ids {
                    let v = &nodes[i].value;
                    let chunk = v.shape()[axis] * inner;
                    out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(out_shape, out)?
        };
        Ok(self.push(value, Op::Concat(ids, axis)))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[ix].value;
            let shape = xv.shape();
            if axis >= shape.len() {
                return Err(TensorError::AxisOutOfRange {
                    op: "slice",
                    axis,
                    rank: shape.len(),
                });
            }
            if start > end || end > shape[axis] {
                return Err(invalid("slice", shape, format!("range {start}..{end} on axis {axis}")));
            }
            let (outer, len, inner) = k::split_axis(shape, axis);
            let mut out_shape = shape.to_vec();
            out_shape[axis] = end - start;
            let mut out = Vec::with_capacity(numel(&out_shape));
            for o in 0..outer {
                let base = o * len * inner;
                out.extend_from_slice(&xv.data()[base + start * inner..base + end * inner]);
            }
            Tensor::new(out_shape, out)?
        };
        Ok(self.push(value, Op::Slice { x: ix, axis, start }))
    }

    /// Repeats a size-1 axis `n` times. The only broadcasting primitive.
    pub fn expand(&self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[ix].value;
            let shape = xv.shape();
            if axis >= shape.len() {
                return Err(TensorError::AxisOutOfRange {
                    op: "expand",
                    axis,
                    rank: shape.len(),
                });
            }
            if shape[axis] != 1 {
                return Err(invalid("expand", shape, format!("axis {axis} must have size 1")));
            }
            let (outer, _, inner) = k::split_axis(shape, axis);
            let mut out_shape = shape.to_vec();
            out_shape[axis] = n;
            let mut out = Vec::with_capacity(numel(&out_shape));
            for o in 0..outer {
                let src = &xv.data()[o * inner..(o + 1) * inner];
                for _ in 0..n {
                    out.extend_from_slice(src);
                }
            }
            Tensor::new(out_shape, out)?
        };
        Ok(self.push(value, Op::Expand { x: ix, axis }))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.nodes.borrow()[ix].value.sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(ix)))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[ix].value;
            if xv.numel() == 0 {
                return Err(invalid("mean", xv.shape(), "empty tensor"));
            }
            xv.mean()
        };
        Ok(self.push(Tensor::scalar(value), Op::Mean(ix)))
    }

    fn reduce_axis(&self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let ix = self.check(x)?;
        let name = if mean { "mean_axis" } else { "sum_axis" };
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[ix].value;
            let shape = xv.shape();
            if axis >= shape.len() {
                return Err(TensorError::AxisOutOfRange {
                    op: name,
                    axis,
                    rank: shape.len(),
                });
            }
            let (outer, len, inner) = k::split_axis(shape, axis);
            if mean && len == 0 {
                return Err(invalid(name, shape, "empty axis"));
            }
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for a in 0..len {
                    let src = &xv.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                    for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            if mean {
                let n = T::of(len as f64);
                out.iter_mut().for_each(|v| *v /= n);
            }
            let mut out_shape = shape.to_vec();
            out_shape[axis] = 1;
            Tensor::new(out_shape, out)?
        };
        let op = if mean {
            Op::MeanAxis(ix, axis)
        } else {
            Op::SumAxis(ix, axis)
        };
        Ok(self.push(value, op))
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean along `axis`, keeping it with size 1.
    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Softmax along the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[ix].value;
            let cols = *xv
                .shape()
                .last()
                .ok_or_else(|| invalid("softmax", xv.shape(), "rank 0"))?;
            Tensor::new(xv.shape().to_vec(), k::softmax_rows(xv.data(), cols))?
        };
        Ok(self.push(value, Op::Softmax(ix)))
    }

    /// Normalizes over the last axis; `gamma`/`beta` (shape `[D]`) are the optional affine.
    pub fn layer_norm(&self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        let ix = self.check(x)?;
        let ig = gamma.map(|g| self.check(g)).transpose()?;
        let ib = beta.map(|b| self.check(b)).transpose()?;
        let (value, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[ix].value;
            let d = *xv
                .shape()
                .last()
                .ok_or_else(|| invalid("layer_norm", xv.shape(), "rank 0"))?;
            for p in ig.iter().chain(ib.iter()) {
                if nodes[*p].value.shape() != [d] {
                    return Err(mismatch("layer_norm", xv.shape(), nodes[*p].value.shape()));
                }
            }
            let (xhat, rstd) = k::layer_norm_rows(xv.data(), d, T::of(eps));
            let mut out = xhat.clone();
            if d > 0 {
                if let Some(g) = ig {
                    let gv = nodes[g].value.data();
                    for row in out.chunks_mut(d) {
                        row.iter_mut().zip(gv).for_each(|(o, &g)| *o *= g);
                    }
                }
                if let Some(b) = ib {
                    let bv = nodes[b].value.data();
                    for row in out.chunks_mut(d) {
                        row.iter_mut().zip(bv).for_each(|(o, &b)| *o += b);
                    }
                }
            }
            (Tensor::new(xv.shape().to_vec(), out)?, to_f64s(&xhat), to_f64s(&rstd))
        };
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                rstd,
            },
        ))
    }

    /// Row lookup into `table[V, D]`, producing `[ids.len(), D]`.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let value = {
            let nodes = self.nodes.borrow();
            let tv = &nodes[it].value;
            if tv.rank() != 2 {
                return Err(invalid("embedding", tv.shape(), "table must be rank 2"));
            }
            let (v, d) = (tv.shape()[0], tv.shape()[1]);
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(TensorError::IndexOutOfRange {
                        op: "embedding",
                        index: id,
                        bound: v,
                    });
                }
                out.extend_from_slice(tv.row(id));
            }
            Tensor::new([ids.len(), d], out)?
        };
        Ok(self.push(
            value,
            Op::Embedding {
                table: it,
                ids: ids.to_vec(),
            },
        ))
    }

    /// `x[len, ch]`, `w[ch, k]` (k odd), `b[ch]`; zero "same" padding.
    pub fn depthwise_conv1d(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = b.map(|b| self.check(b)).transpose()?;
        let value = {
            let nodes = self.nodes.borrow();
            let (xv, wv) = (&nodes[ix].value, &nodes[iw].value);
            let (xs, ws) = (xv.shape(), wv.shape());
            if xs.len() != 2 || ws.len() != 2 || ws[0] != xs[1] || ws[1] % 2 == 0 {
                return Err(mismatch("depthwise_conv1d", xs, ws));
            }
            if let Some(b) = ib {
                if nodes[b].value.shape() != [xs[1]] {
                    return Err(mismatch("depthwise_conv1d", xs, nodes[b].value.shape()));
                }
            }
            let bias = ib.map(|b| nodes[b].value.data());
            Tensor::new(
                xs.to_vec(),
                k::depthwise_conv1d(xv.data(), wv.data(), bias, xs[0], xs[1], ws[1]),
            )?
        };
        Ok(self.push(value, Op::DepthwiseConv1d { x: ix, w: iw, b: ib }))
    }

    /// `x[len, cin]`, `w[cout, cin, k]` (k odd), `b[cout]`; zero "same" padding.
    pub fn conv1d(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = b.map(|b| self.check(b)).transpose()?;
        let value = {
            let nodes = self.nodes.borrow();
            let (xv, wv) = (&nodes[ix].value, &nodes[iw].value);
            let (xs, ws) = (xv.shape(), wv.shape());
            if xs.len() != 2 || ws.len() != 3 || ws[1] != xs[1] || ws[2] % 2 == 0 {
                return Err(mismatch("conv1d", xs, ws));
            }
            if let Some(b) = ib {
                if nodes[b].value.shape() != [ws[0]] {
                    return Err(mismatch("conv1d", ws, nodes[b].value.shape()));
                }
            }
            let bias = ib.map(|b| nodes[b].value.data());
            Tensor::new(
                [xs[0], ws[0]],
                k::conv1d(xv.data(), wv.data(), bias, xs[0], xs[1], ws[0], ws[2]),
            )?
        };
        Ok(self.push(value, Op::Conv1d { x: ix, w: iw, b: ib }))
    }

    /// Rotary position embedding on `x[len, heads * head_dim]`; row `i` sits at
    /// position `i + offset`.
    pub fn rope(&self, x: Var, heads: usize, base: f64, offset: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[ix].value;
            let s = xv.shape();
            if s.len() != 2 || heads == 0 || s[1] % heads != 0 || (s[1] / heads) % 2 != 0 {
                return Err(invalid("rope", s, format!("width must split into {heads} even-sized heads")));
            }
            Tensor::new(
                s.to_vec(),
                k::rope(xv.data(), s[0], heads, s[1] / heads, base, offset, false),
            )?
        };
        Ok(self.push(
            value,
            Op::Rope {
                x: ix,
                heads,
                base,
                offset,
            },
        ))
    }

    /// Dispatches a catalogue primitive by kind.
    pub fn apply(&self, kind: OpKind, inputs: &[Var], attrs: &OpAttrs) -> Result<Var> {
        let need = |n: usize| -> Result<()> {
            if inputs.len() < n {
                Err(TensorError::Arity {
                    op: kind.name(),
                    expected: n,
                    actual: inputs.len(),
                })
            } else {
                Ok(())
            }
        };
        match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::ScaleBy => {
                need(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                match kind {
                    OpKind::Add => self.add(a, b),
                    OpKind::Sub => self.sub(a, b),
                    OpKind::Mul => self.mul(a, b),
                    OpKind::Div => self.div(a, b),
                    _ => self.scale_by(a, b),
                }
            }
            OpKind::MatMul => {
                need(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::BatchMatMul => {
                need(2)?;
                self.batch_matmul(inputs[0], inputs[1])
            }
            OpKind::Concat => {
                need(1)?;
                self.concat(inputs, attrs.axis)
            }
            OpKind::Embedding => {
                need(1)?;
                self.embedding(inputs[0], &attrs.ids)
            }
            OpKind::LayerNorm => {
                need(1)?;
                self.layer_norm(inputs[0], inputs.get(1).copied(), inputs.get(2).copied(), attrs.eps)
            }
            OpKind::DepthwiseConv1d => {
                need(2)?;
                self.depthwise_conv1d(inputs[0], inputs[1], inputs.get(2).copied())
            }
            OpKind::Conv1d => {
                need(2)?;
                self.conv1d(inputs[0], inputs[1], inputs.get(2).copied())
            }
            _ => {
                need(1)?;
                let x = inputs[0];
                match kind {
                    OpKind::AddScalar => self.add_scalar(x, attrs.scalar),
                    OpKind::MulScalar => self.mul_scalar(x, attrs.scalar),
                    OpKind::Sqrt => self.sqrt(x),
                    OpKind::Exp => self.exp(x),
                    OpKind::Transpose => self.transpose(x),
                    OpKind::Permute => self.permute(x, &attrs.axes),
                    OpKind::Reshape => self.reshape(x, &attrs.shape),
                    OpKind::Slice => self.slice(x, attrs.axis, attrs.start, attrs.end),
                    OpKind::Expand => self.expand(x, attrs.axis, attrs.count),
                    OpKind::Sum => self.sum(x),
                    OpKind::Mean => self.mean(x),
                    OpKind::SumAxis => self.sum_axis(x, attrs.axis),
                    OpKind::MeanAxis => self.mean_axis(x, attrs.axis),
                    OpKind::Softmax => self.softmax(x),
                    OpKind::Gelu => self.gelu(x),
                    OpKind::Silu => self.silu(x),
                    OpKind::Rope => self.rope(x, attrs.heads, attrs.base, attrs.offset),
                    _ => unreachable!("multi-input kinds handled above"),
                }
            }
        }
    }

    /// Runs the reverse pass from a scalar `loss`, consuming the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let il = self.check(loss)?;
        let nodes = self.nodes.into_inner();
        let root = &nodes[il];
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(TensorError::Detached);
        }

        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[il] = Some(vec![T::one()]);

        for i in (0..=il).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(&nodes, i, &g, &mut grads);
        }

        let leaf_grads = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if matches!(n.op, Op::Leaf) && n.requires_grad {
                    let data = grads[i]
                        .take()
                        .unwrap_or_else(|| vec![T::zero(); n.value.numel()]);
                    Some(Tensor::new(n.value.shape().to_vec(), data).expect("grad shape"))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients {
            graph: self.id,
            grads: leaf_grads,
        })
    }
}

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], idx: usize, contrib: Vec<T>) {
    if !nodes[idx].requires_grad {
        return;
    }
    match &mut grads[idx] {
        Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
        slot @ None => *slot = Some(contrib),
    }
}

fn propagate<T: Real>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |j: usize| nodes[j].value.data();
    let shape = |j: usize| nodes[j].value.shape();
    let out = nodes[i].value.data();
    let rg = |j: usize| nodes[j].requires_grad;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if rg(*a) {
                accumulate(nodes, grads, *a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect());
            }
            if rg(*b) {
                accumulate(nodes, grads, *b, g.iter().zip(av).map(|(&g, &a)| g * a).collect());
            }
        }
        Op::Div(a, b) => {
            let bv = val(*b);
            if rg(*a) {
                accumulate(nodes, grads, *a, g.iter().zip(bv).map(|(&g, &b)| g / b).collect());
            }
            if rg(*b) {
                let c: Vec<T> = g
                    .iter()
                    .zip(out)
                    .zip(bv)
                    .map(|((&g, &y), &b)| -g * y / b)
                    .collect();
                accumulate(nodes, grads, *b, c);
            }
        }
        Op::AddScalar(x) => accumulate(nodes, grads, *x, g.to_vec()),
        Op::MulScalar(x, c) => {
            let c = T::of(*c);
            accumulate(nodes, grads, *x, g.iter().map(|&v| v * c).collect());
        }
        Op::ScaleBy(x, s) => {
            let sv = val(*s)[0];
            if rg(*x) {
                accumulate(nodes, grads, *x, g.iter().map(|&v| v * sv).collect());
            }
            if rg(*s) {
                let d: T = g.iter().zip(val(*x)).map(|(&g, &x)| g * x).sum();
                accumulate(nodes, grads, *s, vec![d]);
            }
        }
        Op::Sqrt(x) => {
            let c = g.iter().zip(out).map(|(&g, &y)| g / (T::of(2.0) * y)).collect();
            accumulate(nodes, grads, *x, c);
        }
        Op::Exp(x) => {
            let c = g.iter().zip(out).map(|(&g, &y)| g * y).collect();
            accumulate(nodes, grads, *x, c);
        }
        Op::Gelu(x) => {
            let c = g.iter().zip(val(*x)).map(|(&g, &x)| g * k::gelu_grad(x)).collect();
            accumulate(nodes, grads, *x, c);
        }
        Op::Silu(x) => {
            let c = g.iter().zip(val(*x)).map(|(&g, &x)| g * k::silu_grad(x)).collect();
            accumulate(nodes, grads, *x, c);
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (shape(*a), shape(*b));
            let (n, kk, m) = (sa[0], sa[1], sb[1]);
            if rg(*a) {
                accumulate(nodes, grads, *a, k::matmul_nt(g, val(*b), n, m, kk));
            }
            if rg(*b) {
                accumulate(nodes, grads, *b, k::matmul_tn(val(*a), g, n, kk, m));
            }
        }
        Op::BatchMatMul(a, b) => {
            let (sa, sb) = (shape(*a), shape(*b));
            let (bs, n, kk, m) = (sa[0], sa[1], sa[2], sb[2]);
            if rg(*a) {
                let mut ga = Vec::with_capacity(bs * n * kk);
                for i in 0..bs {
                    ga.extend(k::matmul_nt(
                        &g[i * n * m..(i + 1) * n * m],
                        &val(*b)[i * kk * m..(i + 1) * kk * m],
                        n,
                        m,
                        kk,
                    ));
                }
                accumulate(nodes, grads, *a, ga);
            }
            if rg(*b) {
                let mut gb = Vec::with_capacity(bs * kk * m);
                for i in 0..bs {
                    gb.extend(k::matmul_tn(
                        &val(*a)[i * n * kk..(i + 1) * n * kk],
                        &g[i * n * m..(i + 1) * n * m],
                        n,
                        kk,
                        m,
                    ));
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Permute(x, axes) => {
            let out_shape = nodes[i].value.shape();
            let (back, _) = k::permute(g, out_shape, &k::inverse_permutation(axes));
            accumulate(nodes, grads, *x, back);
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, g.to_vec()),
        Op::Concat(xs, axis) => {
            let out_shape = nodes[i].value.shape();
            let (outer, _, inner) = k::split_axis(out_shape, *axis);
            let mut parts: Vec<Vec<T>> = xs
                .iter()
                .map(|&x| Vec::with_capacity(nodes[x].value.numel()))
                .collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (p, &x) in parts.iter_mut().zip(xs) {
                    let chunk = shape(x)[*axis] * inner;
                    p.extend_from_slice(&g[pos..pos + chunk]);
                    pos += chunk;
                }
            }
            for (p, &x) in parts.into_iter().zip(xs) {
                accumulate(nodes, grads, x, p);
            }
        }
        Op::Slice { x, axis, start } => {
            let xs = shape(*x);
            let (outer, len, inner) = k::split_axis(xs, *axis);
            let width = nodes[i].value.shape()[*axis];
            let mut c = vec![T::zero(); numel(xs)];
            for o in 0..outer {
                let dst = o * len * inner + start * inner;
                c[dst..dst + width * inner].copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
            }
            accumulate(nodes, grads, *x, c);
        }
        Op::Expand { x, axis } => {
            let out_shape = nodes[i].value.shape();
            let (outer, n, inner) = k::split_axis(out_shape, *axis);
            let mut c = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for r in 0..n {
                    let src = &g[(o * n + r) * inner..(o * n + r + 1) * inner];
                    for (d, &s) in c[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            accumulate(nodes, grads, *x, c);
        }
        Op::Sum(x) => accumulate(nodes, grads, *x, vec![g[0]; nodes[*x].value.numel()]),
        Op::Mean(x) => {
            let n = nodes[*x].value.numel();
            accumulate(nodes, grads, *x, vec![g[0] / T::of(n as f64); n]);
        }
        Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
            let xs = shape(*x);
            let (outer, len, inner) = k::split_axis(xs, *axis);
            let scale = if matches!(nodes[i].op, Op::MeanAxis(..)) {
                T::one() / T::of(len as f64)
            } else {
                T::one()
            };
            let mut c = Vec::with_capacity(numel(xs));
            for o in 0..outer {
                let src = &g[o * inner..(o + 1) * inner];
                for _ in 0..len {
                    c.extend(src.iter().map(|&v| v * scale));
                }
            }
            accumulate(nodes, grads, *x, c);
        }
        Op::Softmax(x) => {
            let cols = *shape(*x).last().unwrap_or(&1);
            let mut c = vec![T::zero(); g.len()];
            if cols > 0 {
                for ((gr, yr), cr) in g.chunks(cols).zip(out.chunks(cols)).zip(c.chunks_mut(cols)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gv), &yv) in cr.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
            }
            accumulate(nodes, grads, *x, c);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = *shape(*x).last().unwrap_or(&1);
            if d == 0 {
                return;
            }
            let rows = g.len() / d;
            let gam = gamma.map(|p| val(p));
            if let Some(p) = gamma {
                if rg(*p) {
                    let mut dg = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * T::of(xhat[r * d + j]);
                        }
                    }
                    accumulate(nodes, grads, *p, dg);
                }
            }
            if let Some(p) = beta {
                if rg(*p) {
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                    accumulate(nodes, grads, *p, db);
                }
            }
            if rg(*x) {
                let n = T::of(d as f64);
                let mut c = vec![T::zero(); g.len()];
                for r in 0..rows {
                    let dxhat: Vec<T> = (0..d)
                        .map(|j| g[r * d + j] * gam.map_or(T::one(), |gv| gv[j]))
                        .collect();
                    let xh: Vec<T> = (0..d).map(|j| T::of(xhat[r * d + j])).collect();
                    let mean_d = dxhat.iter().copied().sum::<T>() / n;
                    let mean_dx = dxhat.iter().zip(&xh).map(|(&a, &b)| a * b).sum::<T>() / n;
                    let rs = T::of(rstd[r]);
                    for j in 0..d {
                        c[r * d + j] = rs * (dxhat[j] - mean_d - xh[j] * mean_dx);
                    }
                }
                accumulate(nodes, grads, *x, c);
            }
        }
        Op::Embedding { table, ids } => {
            let ts = shape(*table);
            let d = ts[1];
            let mut c = vec![T::zero(); numel(ts)];
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    c[id * d + j] += g[r * d + j];
                }
            }
            accumulate(nodes, grads, *table, c);
        }
        Op::DepthwiseConv1d { x, w, b } => {
            let (xs, ws) = (shape(*x), shape(*w));
            let (len, ch, kw) = (xs[0], xs[1], ws[1]);
            let pad = kw / 2;
            let (xv, wv) = (val(*x), val(*w));
            let mut dx = vec![T::zero(); len * ch];
            let mut dw = vec![T::zero(); ch * kw];
            for t in 0..len {
                for j in 0..kw {
                    let src = t as isize + j as isize - pad as isize;
                    if src < 0 || src as usize >= len {
                        continue;
                    }
                    let s = src as usize;
                    for c in 0..ch {
                        let gv = g[t * ch + c];
                        dx[s * ch + c] += gv * wv[c * kw + j];
                        dw[c * kw + j] += gv * xv[s * ch + c];
                    }
                }
            }
            accumulate(nodes, grads, *x, dx);
            accumulate(nodes, grads, *w, dw);
            if let Some(b) = b {
                let mut db = vec![T::zero(); ch];
                for row in g.chunks(ch) {
                    db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Conv1d { x, w, b } => {
            let (xs, ws) = (shape(*x), shape(*w));
            let (len, cin, cout, kw) = (xs[0], xs[1], ws[0], ws[2]);
            let pad = kw / 2;
            let (xv, wv) = (val(*x), val(*w));
            let mut dx = vec![T::zero(); len * cin];
            let mut dw = vec![T::zero(); cout * cin * kw];
            for t in 0..len {
                for o in 0..cout {
                    let gv = g[t * cout + o];
                    for j in 0..kw {
                        let src = t as isize + j as isize - pad as isize;
                        if src < 0 || src as usize >= len {
                            continue;
                        }
                        let s = src as usize;
                        for ci in 0..cin {
                            dx[s * cin + ci] += gv * wv[(o * cin + ci) * kw + j];
                            dw[(o * cin + ci) * kw + j] += gv * xv[s * cin + ci];
                        }
                    }
                }
            }
            accumulate(nodes, grads, *x, dx);
            accumulate(nodes, grads, *w, dw);
            if let Some(b) = b {
                let mut db = vec![T::zero(); cout];
                for row in g.chunks(cout) {
                    db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Rope {
            x,
            heads,
            base,
            offset,
        } => {
            let s = shape(*x);
            let c = k::rope(g, s[0], *heads, s[1] / heads, *base, *offset, true);
            accumulate(nodes, grads, *x, c);
        }
    }
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
pub struct Gradients<T> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a leaf, or `None` if `v` is not a gradient-tracked leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([3]));
        let y = g.value(g.softmax(x).unwrap());
        for v in y.data() {
            assert_eq!(*v, 1.0 / 3.0);
        }
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let g = Graph::<f64>::new();
        let a = t(&[3, 3], &[1.0, -2.0, 3.5, 0.0, 4.0, 1e-3, 7.0, 8.0, -9.0]);
        let i = g.constant(Tensor::eye(3));
        let av = g.constant(a.clone());
        assert_eq!(g.value(g.matmul(i, av).unwrap()), a);
    }

    #[test]
    fn layer_norm_standardizes() {
        let g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.value(g.layer_norm(x, None, None, 1e-5).unwrap());
        let mean = y.mean();
        let var = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn square_sum_gradient() {
        let g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[5.0, 6.0]));
        let unrelated = g.mul_scalar(x, 0.0).unwrap();
        let both = g.add(unrelated, c).unwrap();
        let loss = g.sum(both).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.param(t(&[2], &[3.0, 4.0]));
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(y).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert_eq!(
            g.backward(x).err(),
            Some(TensorError::NotScalar(vec![2]))
        );
        let g = Graph::<f64>::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let s = g.sum(c).unwrap();
        assert_eq!(g.backward(s).err(), Some(TensorError::Detached));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn unknown_op_kind_is_rejected() {
        assert_eq!(
            "frobnicate".parse::<OpKind>(),
            Err(TensorError::UnknownOp("frobnicate".into()))
        );
        for kind in OpKind::ALL {
            assert_eq!(kind.name().parse::<OpKind>().unwrap(), kind);
        }
    }

    #[test]
    fn foreign_var_is_rejected() {
        let g1 = Graph::<f64>::new();
        let g2 = Graph::<f64>::new();
        let x = g1.constant(Tensor::zeros([1]));
        assert_eq!(g2.sum(x).unwrap_err(), TensorError::ForeignVar);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = g.slice(c, 1, 0, 2).unwrap();
        assert_eq!(g.value(back), g.value(a));
    }
}
