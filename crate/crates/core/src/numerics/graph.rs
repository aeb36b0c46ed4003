//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one forward evaluation as a topologically ordered list
//! of nodes; [`Graph::backward`] walks the list exactly once in reverse.
//! Gradient accumulation order is fixed by record order, so repeated runs are
//! bitwise identical.
//!
//! Shape violations are programming errors and panic. Non-finite values are
//! never silently propagated: every op checks its output and panics naming
//! the offending op.

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use super::kernels as k;
use super::scalar::Scalar;
use super::tensor::Tensor;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph; re-record before calling again")]
    StaleGraph,
    #[error("backward unavailable: graph was recorded in no-grad mode")]
    NoGrad,
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Pixel-to-cell scatter pattern used by the BEV splat (shared, precomputed).
pub type RowLists = Arc<Vec<Vec<u32>>>;

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, S),
    MulScalarVar(Var, Var),
    Abs(Var),
    Exp(Var),
    Gelu(Var),
    Softplus(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Softmax { x: Var, axis: usize },
    CausalSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: S },
    Sum(Var),
    SumCols(Var),
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows { table: Var, idx: Arc<Vec<usize>> },
    ScatterMeanRows { x: Var, lists: RowLists },
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    Conv3d { x: Var, w: Var, b: Var },
    Upsample2x(Var),
    Trilinear { vol: Var, pos: Var },
    RegionMaxPool { x: Var, argmax: Vec<u32> },
    RegionAvgPool { x: Var, grid: (usize, usize) },
    SdfOpacity(Var),
    SurvivalWeights(Var),
    CrossEntropy { logits: Var, targets: Arc<Vec<usize>>, mask: Arc<Vec<bool>> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    grad_enabled: bool,
    backward_done: bool,
    keyed_leaves: HashMap<usize, Var>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            backward_done: false,
            keyed_leaves: HashMap::new(),
        }
    }

    /// Forward-only graph: values are recorded, backward is unavailable.
    pub fn no_grad() -> Self {
        let mut g = Self::new();
        g.grad_enabled = false;
        g
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool, name: &str) -> Var {
        assert!(value.is_finite(), "non-finite values produced by op `{name}`");
        let needs_grad = needs_grad && self.grad_enabled;
        let op = if self.grad_enabled { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn any_needs(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.needs(*v))
    }

    // ------------------------------------------------------------------
    // Leaves
    // ------------------------------------------------------------------

    pub fn leaf(&mut self, t: Tensor<S>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t, false)
    }

    /// Memoized leaf: repeated calls with one key return the same node, so a
    /// parameter used in several places accumulates one gradient.
    pub fn keyed_leaf(&mut self, key: usize, t: &Tensor<S>, requires_grad: bool) -> Var {
        if let Some(v) = self.keyed_leaves.get(&key) {
            return *v;
        }
        let v = self.leaf(t.clone(), requires_grad);
        self.keyed_leaves.insert(key, v);
        v
    }

    pub fn keyed_leaf_vars(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        let mut pairs: Vec<(usize, Var)> = self.keyed_leaves.iter().map(|(k, v)| (*k, *v)).collect();
        pairs.sort_by_key(|(k, _)| *k);
        pairs.into_iter()
    }

    // ------------------------------------------------------------------
    // Elementwise and linear ops
    // ------------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.any_needs(&[a, b]);
        self.push(out, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data);
        let ng = self.any_needs(&[a, b]);
        self.push(out, Op::Sub(a, b), ng, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data);
        let ng = self.any_needs(&[a, b]);
        self.push(out, Op::Mul(a, b), ng, "mul")
    }

    /// x: [n, d] (or any shape with last dim d), bias: d elements.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let d = self.value(x).last_dim();
        assert_eq!(self.value(b).numel(), d, "add_bias dimension mismatch");
        let bvals = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bvals[i % d];
        }
        let ng = self.any_needs(&[x, b]);
        self.push(out, Op::AddBias(x, b), ng, "add_bias")
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).map(|v| v * c);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, c), ng, "scale")
    }

    /// Multiply a tensor by a learnable scalar (shape [1]).
    pub fn mul_scalar_var(&mut self, x: Var, t: Var) -> Var {
        assert_eq!(self.value(t).numel(), 1, "mul_scalar_var expects scalar");
        let tv = self.value(t).item();
        let out = self.value(x).map(|v| v * tv);
        let ng = self.any_needs(&[x, t]);
        self.push(out, Op::MulScalarVar(x, t), ng, "mul_scalar_var")
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        let ng = self.needs(x);
        self.push(out, Op::Abs(x), ng, "abs")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        let ng = self.needs(x);
        self.push(out, Op::Exp(x), ng, "exp")
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(k::gelu);
        let ng = self.needs(x);
        self.push(out, Op::Gelu(x), ng, "gelu")
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(k::softplus);
        let ng = self.needs(x);
        self.push(out, Op::Softplus(x), ng, "softplus")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert_eq!(sa.len(), 2, "matmul lhs must be 2-D, got {sa:?}");
        assert_eq!(sb.len(), 2, "matmul rhs must be 2-D, got {sb:?}");
        assert_eq!(sa[1], sb[0], "matmul inner dimension mismatch: {sa:?} x {sb:?}");
        let (m, kk, p) = (sa[0], sa[1], sb[1]);
        let data = k::matmul(self.value(a).data(), self.value(b).data(), m, kk, p);
        let ng = self.any_needs(&[a, b]);
        self.push(Tensor::from_vec(&[m, p], data), Op::MatMul(a, b), ng, "matmul")
    }

    /// a [m, k] times b[p, k] transposed -> [m, p].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert_eq!(sa.len(), 2);
        assert_eq!(sb.len(), 2);
        assert_eq!(sa[1], sb[1], "matmul_nt inner dimension mismatch: {sa:?} x {sb:?}^T");
        let (m, kk, p) = (sa[0], sa[1], sb[0]);
        let data = k::matmul_nt(self.value(a).data(), self.value(b).data(), m, kk, p);
        let ng = self.any_needs(&[a, b]);
        self.push(Tensor::from_vec(&[m, p], data), Op::MatMulNT(a, b), ng, "matmul_nt")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.value(x).shape().to_vec();
        assert!(axis < shape.len(), "softmax axis {axis} out of range for {shape:?}");
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); xv.len()];
        let mut buf = vec![S::zero(); lane];
        let mut res = vec![S::zero(); lane];
        for o in 0..outer {
            for i in 0..inner {
                for l in 0..lane {
                    buf[l] = xv[(o * lane + l) * inner + i];
                }
                k::softmax_lane(&buf, &mut res);
                for l in 0..lane {
                    out[(o * lane + l) * inner + i] = res[l];
                }
            }
        }
        let ng = self.needs(x);
        self.push(Tensor::from_vec(&shape, out), Op::Softmax { x, axis }, ng, "softmax")
    }

    /// Row-wise softmax on a square [L, L] score matrix where row i may only
    /// attend to columns 0..=i. Masked entries come out exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        assert_eq!(shape.len(), 2);
        assert_eq!(shape[0], shape[1], "causal_softmax expects square scores");
        let l = shape[0];
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); l * l];
        for i in 0..l {
            let row = &xv[i * l..i * l + i + 1];
            k::softmax_lane(row, &mut out[i * l..i * l + i + 1]);
        }
        let ng = self.needs(x);
        self.push(Tensor::from_vec(&shape, out), Op::CausalSoftmax(x), ng, "causal_softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Var {
        let d = self.value(x).last_dim();
        assert_eq!(self.value(gamma).numel(), d, "layer_norm gamma mismatch");
        assert_eq!(self.value(beta).numel(), d, "layer_norm beta mismatch");
        let rows = self.value(x).rows_2d();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut out = vec![S::zero(); xv.len()];
        let dn = S::of(d as f64);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let inv = S::one() / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv * gv[j] + bv[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let ng = self.any_needs(&[x, gamma, beta]);
        self.push(
            Tensor::from_vec(&shape, out),
            Op::LayerNorm { x, gamma, beta, eps },
            ng,
            "layer_norm",
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<S>();
        let ng = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum(x), ng, "sum")
    }

    /// [r, c] -> [r], each output is a row sum.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        assert_eq!(shape.len(), 2, "sum_cols expects 2-D input");
        let (r, c) = (shape[0], shape[1]);
        let xv = self.value(x).data();
        let out: Vec<S> = (0..r).map(|i| xv[i * c..(i + 1) * c].iter().copied().sum()).collect();
        let ng = self.needs(x);
        self.push(Tensor::from_vec(&[r], out), Op::SumCols(x), ng, "sum_cols")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.value(x).numel(), "reshape numel mismatch");
        let out = Tensor::from_vec(shape, self.value(x).data().to_vec());
        let ng = self.needs(x);
        self.push(out, Op::Reshape(x), ng, "reshape")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let shape = self.value(x).shape().to_vec();
        assert_eq!(shape.len(), 2, "slice_rows expects 2-D input");
        let (n, d) = (shape[0], shape[1]);
        assert!(start + len <= n, "slice_rows out of range");
        let out = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let ng = self.needs(x);
        self.push(Tensor::from_vec(&[len, d], out), Op::SliceRows { x, start }, ng, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let shape = self.value(x).shape().to_vec();
        assert_eq!(shape.len(), 2, "slice_cols expects 2-D input");
        let (n, d) = (shape[0], shape[1]);
        assert!(start + len <= d, "slice_cols out of range");
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); n * len];
        for i in 0..n {
            out[i * len..(i + 1) * len].copy_from_slice(&xv[i * d + start..i * d + start + len]);
        }
        let ng = self.needs(x);
        self.push(Tensor::from_vec(&[n, len], out), Op::SliceCols { x, start }, ng, "slice_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let d = self.value(parts[0]).last_dim();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(s.len(), 2, "concat_rows expects 2-D inputs");
            assert_eq!(s[1], d, "concat_rows width mismatch");
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let ng = self.any_needs(parts);
        self.push(Tensor::from_vec(&[rows, d], data), Op::ConcatRows(parts.to_vec()), ng, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).shape()[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.value(p).shape();
                assert_eq!(s.len(), 2, "concat_cols expects 2-D inputs");
                assert_eq!(s[0], n, "concat_cols row-count mismatch");
                s[1]
            })
            .collect();
        let d: usize = widths.iter().sum();
        let mut data = vec![S::zero(); n * d];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(widths.iter()) {
            let pv = self.value(p).data().to_vec();
            for i in 0..n {
                data[i * d + off..i * d + off + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ng = self.any_needs(parts);
        self.push(Tensor::from_vec(&[n, d], data), Op::ConcatCols(parts.to_vec()), ng, "concat_cols")
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let shape = self.value(table).shape().to_vec();
        assert_eq!(shape.len(), 2, "gather_rows expects a 2-D table");
        let (n, d) = (shape[0], shape[1]);
        let tv = self.value(table).data();
        let mut out = vec![S::zero(); idx.len() * d];
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < n, "gather_rows index {i} out of range {n}");
            out[r * d..(r + 1) * d].copy_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ng = self.needs(table);
        self.push(
            Tensor::from_vec(&[idx.len(), d], out),
            Op::GatherRows { table, idx: Arc::new(idx.to_vec()) },
            ng,
            "gather_rows",
        )
    }

    /// out[r] = mean of x rows listed in lists[r]; empty lists yield zeros.
    pub fn scatter_mean_rows(&mut self, x: Var, lists: RowLists) -> Var {
        let shape = self.value(x).shape().to_vec();
        assert_eq!(shape.len(), 2, "scatter_mean_rows expects 2-D input");
        let (p, c) = (shape[0], shape[1]);
        let xv = self.value(x).data();
        let r = lists.len();
        let mut out = vec![S::zero(); r * c];
        for (ri, list) in lists.iter().enumerate() {
            if list.is_empty() {
                continue;
            }
            let inv = S::one() / S::of(list.len() as f64);
            for &pi in list.iter() {
                let pi = pi as usize;
                assert!(pi < p, "scatter_mean_rows row {pi} out of range {p}");
                for ch in 0..c {
                    out[ri * c + ch] = out[ri * c + ch] + xv[pi * c + ch];
                }
            }
            for ch in 0..c {
                out[ri * c + ch] = out[ri * c + ch] * inv;
            }
        }
        let ng = self.needs(x);
        self.push(
            Tensor::from_vec(&[r, c], out),
            Op::ScatterMeanRows { x, lists },
            ng,
            "scatter_mean_rows",
        )
    }

    // ------------------------------------------------------------------
    // Convolution / resampling
    // ------------------------------------------------------------------

    /// x: [w, h, cin]; w(eights): [3, 3, cin, cout]; b: [cout]; padding 1.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be [w,h,c]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [3,3,cin,cout]");
        assert_eq!(&ws[..2], &[3, 3], "conv2d kernel must be 3x3");
        assert_eq!(ws[2], xs[2], "conv2d channel mismatch");
        let (gw, gh, cin, cout) = (xs[0], xs[1], xs[2], ws[3]);
        assert_eq!(self.value(b).numel(), cout, "conv2d bias mismatch");
        let (ow, oh) = (k::conv2d_out_dim(gw, stride), k::conv2d_out_dim(gh, stride));
        let col = k::im2col_2d(self.value(x).data(), gw, gh, cin, stride);
        let mut y = k::matmul(&col, self.value(w).data(), ow * oh, 9 * cin, cout);
        let bv = self.value(b).data().to_vec();
        for (i, v) in y.iter_mut().enumerate() {
            *v += bv[i % cout];
        }
        let ng = self.any_needs(&[x, w, b]);
        self.push(
            Tensor::from_vec(&[ow, oh, cout], y),
            Op::Conv2d { x, w, b, stride },
            ng,
            "conv2d",
        )
    }

    /// x: [w, h, z, cin]; weights [3, 3, 3, cin, cout]; stride 1, padding 1.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv3d input must be [w,h,z,c]");
        assert_eq!(ws.len(), 5, "conv3d weight must be [3,3,3,cin,cout]");
        assert_eq!(&ws[..3], &[3, 3, 3], "conv3d kernel must be 3x3x3");
        assert_eq!(ws[3], xs[3], "conv3d channel mismatch");
        let (gw, gh, gz, cin, cout) = (xs[0], xs[1], xs[2], xs[3], ws[4]);
        assert_eq!(self.value(b).numel(), cout, "conv3d bias mismatch");
        let col = k::im2col_3d(self.value(x).data(), gw, gh, gz, cin);
        let mut y = k::matmul(&col, self.value(w).data(), gw * gh * gz, 27 * cin, cout);
        let bv = self.value(b).data().to_vec();
        for (i, v) in y.iter_mut().enumerate() {
            *v += bv[i % cout];
        }
        let ng = self.any_needs(&[x, w, b]);
        self.push(
            Tensor::from_vec(&[gw, gh, gz, cout], y),
            Op::Conv3d { x, w, b },
            ng,
            "conv3d",
        )
    }

    /// Nearest-neighbor doubling of both spatial dims of [w, h, c].
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3, "upsample2x input must be [w,h,c]");
        let (gw, gh, c) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); 4 * gw * gh * c];
        for ix in 0..gw {
            for iy in 0..gh {
                let src = (ix * gh + iy) * c;
                for dx in 0..2 {
                    for dy in 0..2 {
                        let dst = ((2 * ix + dx) * 2 * gh + 2 * iy + dy) * c;
                        out[dst..dst + c].copy_from_slice(&xv[src..src + c]);
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(
            Tensor::from_vec(&[2 * gw, 2 * gh, c], out),
            Op::Upsample2x(x),
            ng,
            "upsample2x",
        )
    }

    /// vol: [w, h, z, c]; pos: [n, 3] in continuous voxel coordinates.
    /// Out-of-grid positions clamp to the boundary.
    pub fn trilinear_sample(&mut self, vol: Var, pos: Var) -> Var {
        let vs = self.value(vol).shape().to_vec();
        let ps = self.value(pos).shape().to_vec();
        assert_eq!(vs.len(), 4, "trilinear_sample volume must be [w,h,z,c]");
        assert_eq!(ps.len(), 2, "trilinear_sample positions must be [n,3]");
        assert_eq!(ps[1], 3);
        let dims = (vs[0], vs[1], vs[2], vs[3]);
        let n = ps[0];
        let mut out = vec![S::zero(); n * vs[3]];
        k::trilinear_forward(self.value(vol).data(), dims, self.value(pos).data(), &mut out);
        let ng = self.any_needs(&[vol, pos]);
        self.push(
            Tensor::from_vec(&[n, vs[3]], out),
            Op::Trilinear { vol, pos },
            ng,
            "trilinear_sample",
        )
    }

    // ------------------------------------------------------------------
    // Pooling
    // ------------------------------------------------------------------

    fn region_cells(shape: &[usize], grid: (usize, usize)) -> (usize, usize, usize, usize, usize) {
        assert_eq!(shape.len(), 3, "region pooling expects [w,h,c]");
        let (w, h, c) = (shape[0], shape[1], shape[2]);
        let (gw, gh) = grid;
        assert!(gw > 0 && gh > 0 && w % gw == 0 && h % gh == 0, "region grid {grid:?} does not divide {w}x{h}");
        (w, h, c, w / gw, h / gh)
    }

    /// Adaptive max pooling into a (gw x gh) grid of equal rectangular
    /// regions, regions ordered x-major. Output [gw*gh, c].
    pub fn region_max_pool(&mut self, x: Var, grid: (usize, usize)) -> Var {
        let shape = self.value(x).shape().to_vec();
        let (_w, h, c, rw, rh) = Self::region_cells(&shape, grid);
        let (gw, gh) = grid;
        let xv = self.value(x).data();
        let n = gw * gh;
        let mut out = vec![S::zero(); n * c];
        let mut argmax = vec![0u32; n * c];
        for rx in 0..gw {
            for ry in 0..gh {
                let r = rx * gh + ry;
                for ch in 0..c {
                    let mut best = S::neg_infinity();
                    let mut best_idx = 0u32;
                    for ix in rx * rw..(rx + 1) * rw {
                        for iy in ry * rh..(ry + 1) * rh {
                            let cell = ix * h + iy;
                            let v = xv[cell * c + ch];
                            if v > best {
                                best = v;
                                best_idx = cell as u32;
                            }
                        }
                    }
                    out[r * c + ch] = best;
                    argmax[r * c + ch] = best_idx;
                }
            }
        }
        let ng = self.needs(x);
        self.push(
            Tensor::from_vec(&[n, c], out),
            Op::RegionMaxPool { x, argmax },
            ng,
            "region_max_pool",
        )
    }

    pub fn region_avg_pool(&mut self, x: Var, grid: (usize, usize)) -> Var {
        let shape = self.value(x).shape().to_vec();
        let (_w, h, c, rw, rh) = Self::region_cells(&shape, grid);
        let (gw, gh) = grid;
        let xv = self.value(x).data();
        let n = gw * gh;
        let inv = S::one() / S::of((rw * rh) as f64);
        let mut out = vec![S::zero(); n * c];
        for rx in 0..gw {
            for ry in 0..gh {
                let r = rx * gh + ry;
                for ix in rx * rw..(rx + 1) * rw {
                    for iy in ry * rh..(ry + 1) * rh {
                        let cell = ix * h + iy;
                        for ch in 0..c {
                            out[r * c + ch] = out[r * c + ch] + xv[cell * c + ch];
                        }
                    }
                }
                for ch in 0..c {
                    out[r * c + ch] = out[r * c + ch] * inv;
                }
            }
        }
        let ng = self.needs(x);
        self.push(
            Tensor::from_vec(&[n, c], out),
            Op::RegionAvgPool { x, grid },
            ng,
            "region_avg_pool",
        )
    }

    // ------------------------------------------------------------------
    // Rendering-specific fused ops
    // ------------------------------------------------------------------

    /// Interval opacities from sigmoid-warped SDF values.
    ///
    /// Input st = t * sdf, shape [R, n]. Output [R, n-1] with
    /// alpha_i = max((sig(st_i) - sig(st_{i+1})) / sig(st_i), 0),
    /// evaluated in the ratio form exp(softplus(-a) - softplus(-b)) which
    /// stays finite for extreme inputs.
    pub fn sdf_opacity(&mut self, st: Var) -> Var {
        let shape = self.value(st).shape().to_vec();
        assert_eq!(shape.len(), 2, "sdf_opacity expects [R,n]");
        let (r, n) = (shape[0], shape[1]);
        assert!(n >= 2, "sdf_opacity needs at least two samples per ray");
        let xv = self.value(st).data();
        let mut out = vec![S::zero(); r * (n - 1)];
        for ri in 0..r {
            for i in 0..n - 1 {
                let a = xv[ri * n + i];
                let b = xv[ri * n + i + 1];
                let ratio = (k::softplus(-a) - k::softplus(-b)).exp();
                let alpha = S::one() - ratio;
                out[ri * (n - 1) + i] = if alpha > S::zero() { alpha } else { S::zero() };
            }
        }
        let ng = self.needs(st);
        self.push(Tensor::from_vec(&[r, n - 1], out), Op::SdfOpacity(st), ng, "sdf_opacity")
    }

    /// w_i = alpha_i * prod_{j<i} (1 - alpha_j), per row.
    pub fn survival_weights(&mut self, alpha: Var) -> Var {
        let shape = self.value(alpha).shape().to_vec();
        assert_eq!(shape.len(), 2, "survival_weights expects [R,m]");
        let (r, m) = (shape[0], shape[1]);
        let av = self.value(alpha).data();
        let mut out = vec![S::zero(); r * m];
        for ri in 0..r {
            let mut t = S::one();
            for i in 0..m {
                let a = av[ri * m + i];
                out[ri * m + i] = t * a;
                t = t * (S::one() - a);
            }
        }
        let ng = self.needs(alpha);
        self.push(Tensor::from_vec(&[r, m], out), Op::SurvivalWeights(alpha), ng, "survival_weights")
    }

    // ------------------------------------------------------------------
    // Loss heads
    // ------------------------------------------------------------------

    /// Mean negative log-likelihood over masked positions.
    /// logits: [L, V]; targets: length L; mask marks supervised positions.
    /// The mask must select at least one position (callers handle empty).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Var {
        let shape = self.value(logits).shape().to_vec();
        assert_eq!(shape.len(), 2, "cross_entropy expects [L,V] logits");
        let (l, v) = (shape[0], shape[1]);
        assert_eq!(targets.len(), l, "cross_entropy target length mismatch");
        assert_eq!(mask.len(), l, "cross_entropy mask length mismatch");
        let nmask = mask.iter().filter(|&&b| b).count();
        assert!(nmask > 0, "cross_entropy requires a nonempty mask");
        let xv = self.value(logits).data();
        let mut total = S::zero();
        for p in 0..l {
            if !mask[p] {
                continue;
            }
            assert!(targets[p] < v, "cross_entropy target index out of range");
            let row = &xv[p * v..(p + 1) * v];
            let mut mx = row[0];
            for &e in &row[1..] {
                if e > mx {
                    mx = e;
                }
            }
            let lse = mx + row.iter().map(|&e| (e - mx).exp()).sum::<S>().ln();
            total += lse - row[targets[p]];
        }
        let loss = total / S::of(nmask as f64);
        let ng = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: Arc::new(targets.to_vec()),
                mask: Arc::new(mask.to_vec()),
            },
            ng,
            "cross_entropy",
        )
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    pub fn backward(&mut self, loss: Var) -> Result<(), GraphError> {
        if !self.grad_enabled {
            return Err(GraphError::NoGrad);
        }
        if self.backward_done {
            return Err(GraphError::StaleGraph);
        }
        if self.value(loss).numel() != 1 {
            return Err(GraphError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(S::one()));

        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match self.grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Tensor<S>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, id: usize, g: &Tensor<S>) {
        // Each arm computes the local vector-Jacobian product for every input
        // that participates in differentiation.
        enum Delta<S> {
            One(Var, Tensor<S>),
            Many(Vec<(Var, Tensor<S>)>),
            None,
        }
        let delta: Delta<S> = match &self.nodes[id].op {
            Op::Leaf => Delta::None,
            Op::Add(a, b) => Delta::Many(vec![(*a, g.clone()), (*b, g.clone())]),
            Op::Sub(a, b) => Delta::Many(vec![(*a, g.clone()), (*b, g.map(|v| -v))]),
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let da = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(bv).map(|(&gv, &x)| gv * x).collect(),
                );
                let db = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(av).map(|(&gv, &x)| gv * x).collect(),
                );
                Delta::Many(vec![(a, da), (b, db)])
            }
            Op::AddBias(x, b) => {
                let (x, b) = (*x, *b);
                let d = self.nodes[b.0].value.numel();
                let mut db = vec![S::zero(); d];
                for (i, &gv) in g.data().iter().enumerate() {
                    db[i % d] += gv;
                }
                Delta::Many(vec![
                    (x, g.clone()),
                    (b, Tensor::from_vec(self.nodes[b.0].value.shape(), db)),
                ])
            }
            Op::Scale(x, c) => {
                let c = *c;
                Delta::One(*x, g.map(|v| v * c))
            }
            Op::MulScalarVar(x, t) => {
                let (x, t) = (*x, *t);
                let tv = self.nodes[t.0].value.item();
                let dx = g.map(|v| v * tv);
                let xv = self.nodes[x.0].value.data();
                let dt = g.data().iter().zip(xv).map(|(&gv, &v)| gv * v).sum::<S>();
                Delta::Many(vec![(x, dx), (t, Tensor::scalar(dt))])
            }
            Op::Abs(x) => {
                let x = *x;
                let xv = self.nodes[x.0].value.data();
                let dx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &v)| {
                            if v > S::zero() {
                                gv
                            } else if v < S::zero() {
                                -gv
                            } else {
                                S::zero()
                            }
                        })
                        .collect(),
                );
                Delta::One(x, dx)
            }
            Op::Exp(x) => {
                let x = *x;
                let yv = self.nodes[id].value.data();
                let dx = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(yv).map(|(&gv, &y)| gv * y).collect(),
                );
                Delta::One(x, dx)
            }
            Op::Gelu(x) => {
                let x = *x;
                let xv = self.nodes[x.0].value.data();
                let dx = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(xv).map(|(&gv, &v)| gv * k::gelu_grad(v)).collect(),
                );
                Delta::One(x, dx)
            }
            Op::Softplus(x) => {
                let x = *x;
                let xv = self.nodes[x.0].value.data();
                let dx = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(xv).map(|(&gv, &v)| gv * k::sigmoid(v)).collect(),
                );
                Delta::One(x, dx)
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, kk) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let p = self.nodes[b.0].value.shape()[1];
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                // dA = g . B^T ; dB = A^T . g
                let da = k::matmul_nt(g.data(), bv, m, p, kk);
                let mut db = vec![S::zero(); kk * p];
                k::matmul_tn_acc(av, g.data(), &mut db, m, kk, p);
                Delta::Many(vec![
                    (a, Tensor::from_vec(&[m, kk], da)),
                    (b, Tensor::from_vec(&[kk, p], db)),
                ])
            }
            Op::MatMulNT(a, b) => {
                let (a, b) = (*a, *b);
                let (m, kk) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let p = self.nodes[b.0].value.shape()[0];
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                // y = A . B^T  =>  dA = g . B ; dB = g^T . A
                let da = k::matmul(g.data(), bv, m, p, kk);
                let mut db = vec![S::zero(); p * kk];
                k::matmul_tn_acc(g.data(), av, &mut db, m, p, kk);
                Delta::Many(vec![
                    (a, Tensor::from_vec(&[m, kk], da)),
                    (b, Tensor::from_vec(&[p, kk], db)),
                ])
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let shape = self.nodes[id].value.shape().to_vec();
                let lane = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                let yv = self.nodes[id].value.data();
                let gv = g.data();
                let mut dx = vec![S::zero(); yv.len()];
                let mut ybuf = vec![S::zero(); lane];
                let mut gbuf = vec![S::zero(); lane];
                let mut dbuf = vec![S::zero(); lane];
                for o in 0..outer {
                    for i in 0..inner {
                        for l in 0..lane {
                            let at = (o * lane + l) * inner + i;
                            ybuf[l] = yv[at];
                            gbuf[l] = gv[at];
                            dbuf[l] = S::zero();
                        }
                        k::softmax_lane_backward(&ybuf, &gbuf, &mut dbuf);
                        for l in 0..lane {
                            dx[(o * lane + l) * inner + i] = dbuf[l];
                        }
                    }
                }
                Delta::One(x, Tensor::from_vec(&shape, dx))
            }
            Op::CausalSoftmax(x) => {
                let x = *x;
                let l = self.nodes[id].value.shape()[0];
                let yv = self.nodes[id].value.data();
                let gv = g.data();
                let mut dx = vec![S::zero(); l * l];
                for i in 0..l {
                    let y = &yv[i * l..i * l + i + 1];
                    let gr = &gv[i * l..i * l + i + 1];
                    k::softmax_lane_backward(y, gr, &mut dx[i * l..i * l + i + 1]);
                }
                Delta::One(x, Tensor::from_vec(&[l, l], dx))
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let d = self.nodes[gamma.0].value.numel();
                let rows = self.nodes[x.0].value.rows_2d();
                let xv = self.nodes[x.0].value.data();
                let gamv = self.nodes[gamma.0].value.data();
                let gv = g.data();
                let dn = S::of(d as f64);
                let mut dx = vec![S::zero(); xv.len()];
                let mut dgamma = vec![S::zero(); d];
                let mut dbeta = vec![S::zero(); d];
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let grow = &gv[r * d..(r + 1) * d];
                    let mean = row.iter().copied().sum::<S>() / dn;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
                    let inv = S::one() / (var + eps).sqrt();
                    // xhat_j = (x_j - mean) * inv
                    let mut sum_dxhat = S::zero();
                    let mut sum_dxhat_xhat = S::zero();
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = grow[j] * gamv[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                    }
                    let m1 = sum_dxhat / dn;
                    let m2 = sum_dxhat_xhat / dn;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = grow[j] * gamv[j];
                        dx[r * d + j] = (dxhat - m1 - xhat * m2) * inv;
                    }
                }
                let xshape = self.nodes[x.0].value.shape().to_vec();
                Delta::Many(vec![
                    (x, Tensor::from_vec(&xshape, dx)),
                    (gamma, Tensor::from_vec(self.nodes[gamma.0].value.shape(), dgamma)),
                    (beta, Tensor::from_vec(self.nodes[beta.0].value.shape(), dbeta)),
                ])
            }
            Op::Sum(x) => {
                let x = *x;
                let gv = g.item();
                let shape = self.nodes[x.0].value.shape().to_vec();
                Delta::One(x, Tensor::full(&shape, gv))
            }
            Op::SumCols(x) => {
                let x = *x;
                let shape = self.nodes[x.0].value.shape().to_vec();
                let (r, c) = (shape[0], shape[1]);
                let gv = g.data();
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = gv[i];
                    }
                }
                Delta::One(x, Tensor::from_vec(&shape, dx))
            }
            Op::Reshape(x) => {
                let x = *x;
                let shape = self.nodes[x.0].value.shape().to_vec();
                Delta::One(x, Tensor::from_vec(&shape, g.data().to_vec()))
            }
            Op::SliceRows { x, start } => {
                let (x, start) = (*x, *start);
                let shape = self.nodes[x.0].value.shape().to_vec();
                let d = shape[1];
                let mut dx = vec![S::zero(); shape[0] * d];
                let len = g.shape()[0];
                dx[start * d..(start + len) * d].copy_from_slice(g.data());
                Delta::One(x, Tensor::from_vec(&shape, dx))
            }
            Op::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                let shape = self.nodes[x.0].value.shape().to_vec();
                let (n, d) = (shape[0], shape[1]);
                let len = g.shape()[1];
                let gv = g.data();
                let mut dx = vec![S::zero(); n * d];
                for i in 0..n {
                    dx[i * d + start..i * d + start + len]
                        .copy_from_slice(&gv[i * len..(i + 1) * len]);
                }
                Delta::One(x, Tensor::from_vec(&shape, dx))
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let d = g.shape()[1];
                let gv = g.data();
                let mut deltas = Vec::with_capacity(parts.len());
                let mut row = 0;
                for p in parts {
                    let rows = self.nodes[p.0].value.shape()[0];
                    let dp = gv[row * d..(row + rows) * d].to_vec();
                    deltas.push((p, Tensor::from_vec(&[rows, d], dp)));
                    row += rows;
                }
                Delta::Many(deltas)
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let n = g.shape()[0];
                let d = g.shape()[1];
                let gv = g.data();
                let mut deltas = Vec::with_capacity(parts.len());
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    let mut dp = vec![S::zero(); n * w];
                    for i in 0..n {
                        dp[i * w..(i + 1) * w].copy_from_slice(&gv[i * d + off..i * d + off + w]);
                    }
                    deltas.push((p, Tensor::from_vec(&[n, w], dp)));
                    off += w;
                }
                Delta::Many(deltas)
            }
            Op::GatherRows { table, idx } => {
                let table = *table;
                let idx = idx.clone();
                let shape = self.nodes[table.0].value.shape().to_vec();
                let d = shape[1];
                let gv = g.data();
                let mut dt = vec![S::zero(); shape[0] * d];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += gv[r * d + j];
                    }
                }
                Delta::One(table, Tensor::from_vec(&shape, dt))
            }
            Op::ScatterMeanRows { x, lists } => {
                let x = *x;
                let lists = lists.clone();
                let shape = self.nodes[x.0].value.shape().to_vec();
                let c = shape[1];
                let gv = g.data();
                let mut dx = vec![S::zero(); shape[0] * c];
                for (ri, list) in lists.iter().enumerate() {
                    if list.is_empty() {
                        continue;
                    }
                    let inv = S::one() / S::of(list.len() as f64);
                    for &pi in list.iter() {
                        let pi = pi as usize;
                        for ch in 0..c {
                            dx[pi * c + ch] += gv[ri * c + ch] * inv;
                        }
                    }
                }
                Delta::One(x, Tensor::from_vec(&shape, dx))
            }
            Op::Conv2d { x, w, b, stride } => {
                let (x, w, b, stride) = (*x, *w, *b, *stride);
                let xs = self.nodes[x.0].value.shape().to_vec();
                let ws = self.nodes[w.0].value.shape().to_vec();
                let (gw, gh, cin, cout) = (xs[0], xs[1], xs[2], ws[3]);
                let npos = g.numel() / cout;
                let col = k::im2col_2d(self.nodes[x.0].value.data(), gw, gh, cin, stride);
                let mut dw = vec![S::zero(); 9 * cin * cout];
                k::matmul_tn_acc(&col, g.data(), &mut dw, npos, 9 * cin, cout);
                let mut db = vec![S::zero(); cout];
                for (i, &gv) in g.data().iter().enumerate() {
                    db[i % cout] += gv;
                }
                let dcol = k::matmul(g.data(), &transpose(self.nodes[w.0].value.data(), 9 * cin, cout), npos, cout, 9 * cin);
                let dx = k::col2im_2d(&dcol, gw, gh, cin, stride);
                Delta::Many(vec![
                    (x, Tensor::from_vec(&xs, dx)),
                    (w, Tensor::from_vec(&ws, dw)),
                    (b, Tensor::from_vec(&[cout], db)),
                ])
            }
            Op::Conv3d { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xs = self.nodes[x.0].value.shape().to_vec();
                let ws = self.nodes[w.0].value.shape().to_vec();
                let (gw, gh, gz, cin, cout) = (xs[0], xs[1], xs[2], xs[3], ws[4]);
                let npos = gw * gh * gz;
                let col = k::im2col_3d(self.nodes[x.0].value.data(), gw, gh, gz, cin);
                let mut dw = vec![S::zero(); 27 * cin * cout];
                k::matmul_tn_acc(&col, g.data(), &mut dw, npos, 27 * cin, cout);
                let mut db = vec![S::zero(); cout];
                for (i, &gv) in g.data().iter().enumerate() {
                    db[i % cout] += gv;
                }
                let dcol = k::matmul(g.data(), &transpose(self.nodes[w.0].value.data(), 27 * cin, cout), npos, cout, 27 * cin);
                let dx = k::col2im_3d(&dcol, gw, gh, gz, cin);
                Delta::Many(vec![
                    (x, Tensor::from_vec(&xs, dx)),
                    (w, Tensor::from_vec(&ws, dw)),
                    (b, Tensor::from_vec(&[cout], db)),
                ])
            }
            Op::Upsample2x(x) => {
                let x = *x;
                let xs = self.nodes[x.0].value.shape().to_vec();
                let (gw, gh, c) = (xs[0], xs[1], xs[2]);
                let gv = g.data();
                let mut dx = vec![S::zero(); gw * gh * c];
                for ix in 0..gw {
                    for iy in 0..gh {
                        let dst = (ix * gh + iy) * c;
                        for dxs in 0..2usize {
                            for dys in 0..2usize {
                                let src = ((2 * ix + dxs) * 2 * gh + 2 * iy + dys) * c;
                                for ch in 0..c {
                                    dx[dst + ch] += gv[src + ch];
                                }
                            }
                        }
                    }
                }
                Delta::One(x, Tensor::from_vec(&xs, dx))
            }
            Op::Trilinear { vol, pos } => {
                let (vol, pos) = (*vol, *pos);
                let vs = self.nodes[vol.0].value.shape().to_vec();
                let (w, h, z, c) = (vs[0], vs[1], vs[2], vs[3]);
                let pv = self.nodes[pos.0].value.data();
                let vv = self.nodes[vol.0].value.data();
                let gv = g.data();
                let n = pv.len() / 3;
                let mut dvol = vec![S::zero(); vv.len()];
                let mut dpos = vec![S::zero(); pv.len()];
                for q in 0..n {
                    let (ix, fx, in_x) = clamp_split(pv[q * 3], w);
                    let (iy, fy, in_y) = clamp_split(pv[q * 3 + 1], h);
                    let (iz, fz, in_z) = clamp_split(pv[q * 3 + 2], z);
                    let gq = &gv[q * c..(q + 1) * c];
                    let mut dfx = S::zero();
                    let mut dfy = S::zero();
                    let mut dfz = S::zero();
                    for dx in 0..2usize {
                        if w == 1 && dx == 1 {
                            continue;
                        }
                        let wx = if dx == 0 { S::one() - fx } else { fx };
                        let sx = if dx == 0 { -S::one() } else { S::one() };
                        for dy in 0..2usize {
                            if h == 1 && dy == 1 {
                                continue;
                            }
                            let wy = if dy == 0 { S::one() - fy } else { fy };
                            let sy = if dy == 0 { -S::one() } else { S::one() };
                            for dz in 0..2usize {
                                if z == 1 && dz == 1 {
                                    continue;
                                }
                                let wz = if dz == 0 { S::one() - fz } else { fz };
                                let sz = if dz == 0 { -S::one() } else { S::one() };
                                let base = (((ix + dx) * h + (iy + dy)) * z + (iz + dz)) * c;
                                let mut dot = S::zero();
                                let wgt = wx * wy * wz;
                                for ch in 0..c {
                                    dvol[base + ch] += wgt * gq[ch];
                                    dot += vv[base + ch] * gq[ch];
                                }
                                dfx += sx * wy * wz * dot;
                                dfy += wx * sy * wz * dot;
                                dfz += wx * wy * sz * dot;
                            }
                        }
                    }
                    // clamped coordinates have zero positional gradient
                    if in_x {
                        dpos[q * 3] = dfx;
                    }
                    if in_y {
                        dpos[q * 3 + 1] = dfy;
                    }
                    if in_z {
                        dpos[q * 3 + 2] = dfz;
                    }
                }
                Delta::Many(vec![
                    (vol, Tensor::from_vec(&vs, dvol)),
                    (pos, Tensor::from_vec(self.nodes[pos.0].value.shape(), dpos)),
                ])
            }
            Op::RegionMaxPool { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                let shape = self.nodes[x.0].value.shape().to_vec();
                let c = shape[2];
                let gv = g.data();
                let mut dx = vec![S::zero(); shape[0] * shape[1] * c];
                for (rc, &cell) in argmax.iter().enumerate() {
                    let ch = rc % c;
                    dx[cell as usize * c + ch] += gv[rc];
                }
                Delta::One(x, Tensor::from_vec(&shape, dx))
            }
            Op::RegionAvgPool { x, grid } => {
                let (x, grid) = (*x, *grid);
                let shape = self.nodes[x.0].value.shape().to_vec();
                let (w, h, c) = (shape[0], shape[1], shape[2]);
                let (gw, gh) = grid;
                let (rw, rh) = (w / gw, h / gh);
                let inv = S::one() / S::of((rw * rh) as f64);
                let gv = g.data();
                let mut dx = vec![S::zero(); w * h * c];
                for rx in 0..gw {
                    for ry in 0..gh {
                        let r = rx * gh + ry;
                        for ix in rx * rw..(rx + 1) * rw {
                            for iy in ry * rh..(ry + 1) * rh {
                                let cell = ix * h + iy;
                                for ch in 0..c {
                                    dx[cell * c + ch] += gv[r * c + ch] * inv;
                                }
                            }
                        }
                    }
                }
                Delta::One(x, Tensor::from_vec(&shape, dx))
            }
            Op::SdfOpacity(st) => {
                let st = *st;
                let shape = self.nodes[st.0].value.shape().to_vec();
                let (r, n) = (shape[0], shape[1]);
                let xv = self.nodes[st.0].value.data();
                let gv = g.data();
                let mut dst = vec![S::zero(); r * n];
                for ri in 0..r {
                    for i in 0..n - 1 {
                        let a = xv[ri * n + i];
                        let b = xv[ri * n + i + 1];
                        let ratio = (k::softplus(-a) - k::softplus(-b)).exp();
                        if ratio >= S::one() {
                            continue; // clamped at zero opacity
                        }
                        let gq = gv[ri * (n - 1) + i];
                        // alpha = 1 - ratio; d ratio/da = -ratio*sig(-a), d ratio/db = ratio*sig(-b)
                        dst[ri * n + i] += gq * ratio * k::sigmoid(-a);
                        dst[ri * n + i + 1] -= gq * ratio * k::sigmoid(-b);
                    }
                }
                Delta::One(st, Tensor::from_vec(&shape, dst))
            }
            Op::SurvivalWeights(alpha) => {
                let alpha = *alpha;
                let shape = self.nodes[alpha.0].value.shape().to_vec();
                let (r, m) = (shape[0], shape[1]);
                let av = self.nodes[alpha.0].value.data();
                let wv = self.nodes[id].value.data();
                let gv = g.data();
                let mut da = vec![S::zero(); r * m];
                for ri in 0..r {
                    let a = &av[ri * m..(ri + 1) * m];
                    let w = &wv[ri * m..(ri + 1) * m];
                    let gr = &gv[ri * m..(ri + 1) * m];
                    // T_k = prod_{j<k} (1 - a_j), reconstructed front-to-back
                    let mut t = vec![S::one(); m];
                    for i in 1..m {
                        t[i] = t[i - 1] * (S::one() - a[i - 1]);
                    }
                    // suffix[k] = sum_{i>k} g_i w_i
                    let mut suffix = S::zero();
                    for kk in (0..m).rev() {
                        let one_minus = S::one() - a[kk];
                        let survivors = if one_minus != S::zero() {
                            suffix / one_minus
                        } else {
                            // exact full absorption: recompute the tail with
                            // the k-th factor skipped
                            let mut run = t[kk];
                            let mut acc = S::zero();
                            for i in kk + 1..m {
                                acc += gr[i] * a[i] * run;
                                run = run * (S::one() - a[i]);
                            }
                            acc
                        };
                        da[ri * m + kk] = gr[kk] * t[kk] - survivors;
                        suffix += gr[kk] * w[kk];
                    }
                }
                Delta::One(alpha, Tensor::from_vec(&shape, da))
            }
            Op::CrossEntropy { logits, targets, mask } => {
                let logits = *logits;
                let (targets, mask) = (targets.clone(), mask.clone());
                let shape = self.nodes[logits.0].value.shape().to_vec();
                let (l, v) = (shape[0], shape[1]);
                let xv = self.nodes[logits.0].value.data();
                let nmask = mask.iter().filter(|&&b| b).count();
                let scale = g.item() / S::of(nmask as f64);
                let mut dx = vec![S::zero(); l * v];
                let mut prob = vec![S::zero(); v];
                for p in 0..l {
                    if !mask[p] {
                        continue;
                    }
                    k::softmax_lane(&xv[p * v..(p + 1) * v], &mut prob);
                    for j in 0..v {
                        dx[p * v + j] = prob[j] * scale;
                    }
                    dx[p * v + targets[p]] -= scale;
                }
                Delta::One(logits, Tensor::from_vec(&shape, dx))
            }
        };
        match delta {
            Delta::None => {}
            Delta::One(v, d) => self.accumulate(v, d),
            Delta::Many(ds) => {
                for (v, d) in ds {
                    self.accumulate(v, d);
                }
            }
        }
    }
}

/// Transpose a [r, c] row-major matrix (helper for conv backward).
fn transpose<S: Scalar>(x: &[S], r: usize, c: usize) -> Vec<S> {
    let mut out = vec![S::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// Clamp + split a coordinate into (lower corner, fraction, was-interior).
fn clamp_split<S: Scalar>(p: S, dim: usize) -> (usize, S, bool) {
    let max = S::of((dim - 1) as f64);
    let interior = p >= S::zero() && p <= max;
    if dim == 1 {
        return (0, S::zero(), false);
    }
    let c = if p < S::zero() {
        S::zero()
    } else if p > max {
        max
    } else {
        p
    };
    let mut i0 = c.floor();
    if i0 > max - S::one() {
        i0 = max - S::one();
    }
    (i0.as_f64() as usize, c - i0, interior)
}
