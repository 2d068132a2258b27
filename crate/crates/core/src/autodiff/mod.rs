//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is the tape: every op appends a node holding its output value
//! and the information its backward rule needs. Node inputs always precede
//! the node, so a single reverse sweep over the node list is a valid
//! topological traversal. A fresh graph is built for every forward pass.

mod gradcheck;
pub mod index;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{numel, Element, Tensor};

pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-defined unary op: `(input, output, grad_output) -> grad_input`.
pub type CustomBackward<T> = Arc<dyn Fn(&Tensor<T>, &Tensor<T>, &[T]) -> Vec<T> + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Gelu,
    Relu,
    Sigmoid,
}

/// Sparse row map `out[i] = sum_j w_ij * in[j]`, stored as CSR.
#[derive(Clone, Debug)]
pub struct SparseMap<T> {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<T>,
}

impl<T: Element> SparseMap<T> {
    /// Builds a map from per-output-row `(input index, weight)` taps.
    pub fn from_rows(rows: impl IntoIterator<Item = Vec<(usize, T)>>) -> Self {
        let mut offsets = vec![0];
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        for row in rows {
            for (c, w) in row {
                cols.push(c);
                weights.push(w);
            }
            offsets.push(cols.len());
        }
        Self { offsets, cols, weights }
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }
}

enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Scale(Var, T),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        a_batched: bool,
        b_batched: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape(Var),
    Gather(Var, Arc<[usize]>),
    Sparse(Var, Arc<SparseMap<T>>),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Sum {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Unary(UnaryKind, Var),
    Custom(Var, CustomBackward<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradient tape and value store for one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_COEFF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Tanh-approximated GELU, `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu_scalar<T: Element>(x: T) -> T {
    let c = T::from_f64_lossy(SQRT_2_OVER_PI);
    let a = T::from_f64_lossy(GELU_COEFF);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::from_f64_lossy(SQRT_2_OVER_PI);
    let a = T::from_f64_lossy(GELU_COEFF);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

pub fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`.
fn gemm_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aip * bv;
            }
        }
    }
}

/// `c += a · bᵀ` for `a: m×n`, `b: k×n`, `c: m×k`.
fn gemm_nt_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot = arow.iter().zip(brow).fold(T::zero(), |s, (&x, &y)| s + x * y);
            c[i * k + p] = c[i * k + p] + dot;
        }
    }
}

/// `c += aᵀ · b` for `a: m×k`, `b: m×n`, `c: k×n`.
fn gemm_tn_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aip * bv;
            }
        }
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(value.shape()), value.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad matches value shape"))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise arithmetic -------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let broadcast_ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        let scalar = sb == [1];
        if !(broadcast_ok || scalar) {
            let op = match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            };
            return Err(Error::shape(op, sa, sb));
        }
        let av = self.value(a);
        let bv = self.value(b).data();
        let inner = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[i % inner];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Binary { kind, a, b }, rg))
    }

    /// `a + b`; `b` may match a trailing suffix of `a`'s shape or be a `[1]` scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    // ---- linear algebra ----------------------------------------------------

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`. Batch
    /// axes must match, or one operand must be a plain matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (ba, mk) = sa.split_at(sa.len() - 2);
        let (bb, kn) = sb.split_at(sb.len() - 2);
        let (m, k, n) = (mk[0], mk[1], kn[1]);
        if kn[0] != k {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (batch_shape, a_batched, b_batched) = if ba == bb {
            (ba.to_vec(), true, true)
        } else if bb.is_empty() {
            (ba.to_vec(), true, false)
        } else if ba.is_empty() {
            (bb.to_vec(), false, true)
        } else {
            return Err(Error::shape("matmul", &sa, &sb));
        };
        let batch: usize = batch_shape.iter().product();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let ao = if a_batched { bi * m * k } else { 0 };
            let bo = if b_batched { bi * k * n } else { 0 };
            gemm_acc(
                &av[ao..ao + m * k],
                &bv[bo..bo + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                a_batched,
                b_batched,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// `x · W + b` over the last axis of `x`, with `W: [in, out]` and `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let rows = numel(&sx) / sw[0];
        let flat = self.reshape(x, vec![rows, sw[0]])?;
        let y = self.matmul(flat, w)?;
        let y = match b {
            Some(b) => {
                if self.shape(b) != [sw[1]] {
                    return Err(Error::shape("linear bias", &sw, self.shape(b)));
                }
                self.add(y, b)?
            }
            None => y,
        };
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = sw[1];
        self.reshape(y, out_shape)
    }

    // ---- data movement -----------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `out[i] = x[indices[i]]`, reshaped to `out_shape`.
    pub fn gather(&mut self, x: Var, out_shape: Vec<usize>, indices: Arc<[usize]>) -> Result<Var> {
        let xv = self.value(x).data();
        if numel(&out_shape) != indices.len() {
            return Err(Error::invalid(
                "gather",
                format!("{} indices for output shape {out_shape:?}", indices.len()),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::invalid(
                "gather",
                format!("index {bad} out of range for {} elements", xv.len()),
            ));
        }
        let data = indices.iter().map(|&i| xv[i]).collect();
        let out = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Gather(x, indices), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::invalid(
                "permute",
                format!("{perm:?} is not a permutation of rank {}", shape.len()),
            ));
        }
        let (out_shape, idx) = index::permute(&shape, perm);
        self.gather(x, out_shape, idx.into())
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    /// Toroidal roll with `out[i] = x[(i + shift) mod extent]` per listed axis.
    pub fn roll(&mut self, x: Var, shifts: &[(usize, isize)]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if let Some(&(axis, _)) = shifts.iter().find(|(a, _)| *a >= shape.len()) {
            return Err(Error::InvalidAxis {
                op: "roll",
                axis,
                rank: shape.len(),
            });
        }
        let idx = index::roll(&shape, shifts);
        self.gather(x, shape, idx.into())
    }

    /// Broadcasts size-1 axes to `target` (same rank).
    pub fn expand(&mut self, x: Var, target: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != target.len() || shape.iter().zip(target).any(|(&s, &t)| s != t && s != 1) {
            return Err(Error::shape("expand", &shape, target));
        }
        let idx = index::expand(&shape, target);
        self.gather(x, target.to_vec(), idx.into())
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!(
                    "range {start}..{} exceeds extent {} of axis {axis}",
                    start + len,
                    shape[axis]
                ),
            ));
        }
        let (out_shape, idx) = index::slice(&shape, axis, start, len);
        self.gather(x, out_shape, idx.into())
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op: "split",
                axis,
                rank: shape.len(),
            });
        }
        if sizes.iter().sum::<usize>() != shape[axis] {
            return Err(Error::invalid(
                "split",
                format!("sizes {sizes:?} do not sum to extent {}", shape[axis]),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidAxis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = around_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let val = self.value(v);
                let len = val.shape()[axis] * inner;
                data.extend_from_slice(&val.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Applies a fixed sparse linear map to the flattened input.
    pub fn sparse_map(&mut self, x: Var, out_shape: Vec<usize>, map: Arc<SparseMap<T>>) -> Result<Var> {
        let xv = self.value(x).data();
        if map.rows() != numel(&out_shape) || map.cols.iter().any(|&c| c >= xv.len()) {
            return Err(Error::invalid("sparse_map", "map does not fit input/output extents"));
        }
        let data = (0..map.rows())
            .map(|r| (map.offsets[r]..map.offsets[r + 1]).fold(T::zero(), |s, t| s + map.weights[t] * xv[map.cols[t]]))
            .collect();
        let out = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Sparse(x, map), rg))
    }

    // ---- reductions ----------------------------------------------------------

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::InvalidAxis { op, axis, rank });
        }
        Ok(())
    }

    /// Sum over `axis`, removing it (a rank-1 input reduces to `[1]`).
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = around_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] = data[o * inner + i] + xv[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Sum { x, outer, len, inner }, rg))
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean", x, axis)?;
        let len = self.shape(x)[axis];
        let s = self.sum(x, axis)?;
        Ok(self.scale(s, T::one() / T::from_f64_lossy(len as f64)))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let flat = self.reshape(x, vec![n]).expect("same element count");
        self.sum(flat, 0).expect("rank-1 sum")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, T::one() / T::from_f64_lossy(n as f64))
    }

    // ---- normalization and activations ---------------------------------------

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = around_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| xv[at(l)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for l in 0..len {
                    let e = (xv[at(l)] - max).exp();
                    data[at(l)] = e;
                    z = z + e;
                }
                for l in 0..len {
                    data[at(l)] = data[at(l)] / z;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax { x, outer, len, inner }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = around_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| xv[at(l)]).fold(T::neg_infinity(), T::max);
                let z = (0..len).fold(T::zero(), |s, l| s + (xv[at(l)] - max).exp());
                let lse = max + z.ln();
                for l in 0..len {
                    data[at(l)] = xv[at(l)] - lse;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::LogSoftmax { x, outer, len, inner }, rg))
    }

    /// Normalizes the last axis to zero mean and unit variance (biased, `eps`
    /// inside the square root), then applies `gamma`/`beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::invalid("layernorm", "rank 0"))?;
        if self.shape(gamma) != [c] {
            return Err(Error::shape("layernorm", &shape, self.shape(gamma)));
        }
        if self.shape(beta) != [c] {
            return Err(Error::shape("layernorm", &shape, self.shape(beta)));
        }
        let eps = T::from_f64_lossy(eps);
        let cf = T::from_f64_lossy(c as f64);
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / c;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let out = self.value(x).map(|v| match kind {
            UnaryKind::Gelu => gelu_scalar(v),
            UnaryKind::Relu => v.max(T::zero()),
            UnaryKind::Sigmoid => sigmoid_scalar(v),
        });
        let rg = self.rg(&[x]);
        self.push(out, Op::Unary(kind, x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    /// Records a user-defined shape-preserving op with an explicit backward rule.
    pub fn custom(
        &mut self,
        x: Var,
        forward: impl Fn(&Tensor<T>) -> Tensor<T>,
        backward: CustomBackward<T>,
    ) -> Result<Var> {
        let out = forward(self.value(x));
        if out.shape() != self.shape(x) {
            return Err(Error::shape("custom", self.shape(x), out.shape()));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Custom(x, backward), rg))
    }

    // ---- reverse sweep -------------------------------------------------------

    /// Populates gradients of `loss` with respect to every node that requires
    /// them. Contributions from multiple consumers are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let n = nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let inner = bv.len();
                acc(*a, &mut |ga| {
                    for (i, gi) in g.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add | BinaryKind::Sub => T::one(),
                            BinaryKind::Mul => bv[i % inner],
                            BinaryKind::Div => T::one() / bv[i % inner],
                        };
                        ga[i] = ga[i] + *gi * d;
                    }
                });
                acc(*b, &mut |gb| {
                    for (i, gi) in g.iter().enumerate() {
                        let y = bv[i % inner];
                        let d = match kind {
                            BinaryKind::Add => T::one(),
                            BinaryKind::Sub => -T::one(),
                            BinaryKind::Mul => av[i],
                            BinaryKind::Div => -av[i] / (y * y),
                        };
                        gb[i % inner] = gb[i % inner] + *gi * d;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| {
                for (a, &b) in gx.iter_mut().zip(g) {
                    *a = *a + b * *c;
                }
            }),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |gx| {
                for (a, &b) in gx.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }),
            Op::MatMul {
                a,
                b,
                batch,
                a_batched,
                b_batched,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                acc(*a, &mut |ga| {
                    for bi in 0..*batch {
                        let ao = if *a_batched { bi * m * k } else { 0 };
                        let bo = if *b_batched { bi * k * n } else { 0 };
                        gemm_nt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[bo..bo + k * n],
                            &mut ga[ao..ao + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for bi in 0..*batch {
                        let ao = if *a_batched { bi * m * k } else { 0 };
                        let bo = if *b_batched { bi * k * n } else { 0 };
                        gemm_tn_acc(
                            &av[ao..ao + m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bo..bo + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Gather(x, idx) => acc(*x, &mut |gx| {
                for (&i, &gi) in idx.iter().zip(g) {
                    gx[i] = gx[i] + gi;
                }
            }),
            Op::Sparse(x, map) => acc(*x, &mut |gx| {
                for (r, &gr) in g.iter().enumerate() {
                    for t in map.offsets[r]..map.offsets[r + 1] {
                        let c = map.cols[t];
                        gx[c] = gx[c] + map.weights[t] * gr;
                    }
                }
            }),
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = around_axis(out_shape, *axis);
                let mut start = 0;
                for &v in inputs {
                    let ext = nodes[v.0].value.shape()[*axis];
                    acc(v, &mut |gv| {
                        for o in 0..outer {
                            let src = (o * total + start) * inner;
                            let dst = o * ext * inner;
                            for j in 0..ext * inner {
                                gv[dst + j] = gv[dst + j] + g[src + j];
                            }
                        }
                    });
                    start += ext;
                }
            }
            Op::Sum { x, outer, len, inner } => acc(*x, &mut |gx| {
                for o in 0..*outer {
                    for l in 0..*len {
                        for i in 0..*inner {
                            let j = (o * len + l) * inner + i;
                            gx[j] = gx[j] + g[o * inner + i];
                        }
                    }
                }
            }),
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let (len, inner) = (*len, *inner);
                acc(*x, &mut |gx| {
                    for o in 0..*outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot = (0..len).fold(T::zero(), |s, l| s + g[at(l)] * y[at(l)]);
                            for l in 0..len {
                                gx[at(l)] = gx[at(l)] + y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, outer, len, inner } => {
                let y = node.value.data();
                let (len, inner) = (*len, *inner);
                acc(*x, &mut |gx| {
                    for o in 0..*outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let gs = (0..len).fold(T::zero(), |s, l| s + g[at(l)]);
                            for l in 0..len {
                                gx[at(l)] = gx[at(l)] + g[at(l)] - y[at(l)].exp() * gs;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = nodes[gamma.0].value.data();
                let c = gv.len();
                let cf = T::from_f64_lossy(c as f64);
                acc(*gamma, &mut |gg| {
                    for (j, (&gi, &h)) in g.iter().zip(xhat).enumerate() {
                        gg[j % c] = gg[j % c] + gi * h;
                    }
                });
                acc(*beta, &mut |gb| {
                    for (j, &gi) in g.iter().enumerate() {
                        gb[j % c] = gb[j % c] + gi;
                    }
                });
                acc(*x, &mut |gx| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let row = r * c..(r + 1) * c;
                        let gh: Vec<T> = g[row.clone()].iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let h = &xhat[row.clone()];
                        let mean_gh = gh.iter().copied().sum::<T>() / cf;
                        let mean_ghh = gh.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>() / cf;
                        for j in 0..c {
                            gx[r * c + j] = gx[r * c + j] + rs * (gh[j] - mean_gh - h[j] * mean_ghh);
                        }
                    }
                });
            }
            Op::Unary(kind, x) => {
                let xv = nodes[x.0].value.data();
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        let d = match kind {
                            UnaryKind::Gelu => gelu_grad(xv[i]),
                            UnaryKind::Relu => {
                                if xv[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::Sigmoid => y[i] * (T::one() - y[i]),
                        };
                        gx[i] = gx[i] + g[i] * d;
                    }
                });
            }
            Op::Custom(x, rule) => {
                let d = rule(&nodes[x.0].value, &node.value, g);
                acc(*x, &mut |gx| {
                    for (a, b) in gx.iter_mut().zip(&d) {
                        *a = *a + *b;
                    }
                });
            }
        }
    }
}
