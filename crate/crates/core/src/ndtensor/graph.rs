//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every executed operation in execution order, which is
//! already a topological order. [`Graph::backward`] walks the tape once in
//! reverse, accumulating gradients additively into each parent.

use super::kernels::{self, ConvGeom};
use super::params::ParamStore;
use super::tensor::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Conv2d(Var, Var, ConvGeom),
    Softmax(Var, usize),
    Resize(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    L2Normalize(Var, usize, Vec<f64>),
    Gather(Var, Vec<usize>),
    SoftmaxXent {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-channel statistics of one training-mode batch-norm call; the
/// variance is the unbiased estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchStats {
    /// `running = 0.9·running + 0.1·batch` for mean and variance.
    pub fn fold_into(&self, mean: &mut Tensor, var: &mut Tensor) {
        for (r, b) in mean.data_mut().iter_mut().zip(&self.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in var.data_mut().iter_mut().zip(&self.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(Var, String)>,
    consumed: bool,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteOutput { op })
    }
}

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis < rank {
        Ok(())
    } else {
        Err(Error::InvalidAxis { axis, rank })
    }
}

/// Output shape of numpy-style broadcasting between equal-rank shapes.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::shape(op, a, b)),
        })
        .collect()
}

/// For each linear index of `out`, the linear index into a (possibly
/// broadcast) operand of shape `src`.
fn broadcast_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    if out == src {
        return (0..n).collect();
    }
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if src[d] == 1 { 0 } else { acc };
        acc *= src[d];
    }
    let mut idx = vec![0usize; rank];
    let mut map = Vec::with_capacity(n);
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    map
}

fn reduce_to(g: &[f64], map: &[usize], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (v, &i) in g.iter().zip(map) {
        out[i] += v;
    }
    out
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Inserts a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput { op: "leaf" });
        }
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant leaf (never receives a gradient).
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        self.leaf(Tensor::new(shape.to_vec(), data)?)
    }

    /// Leaf bound to a named entry of `store`; its gradient is written back
    /// by [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store.get(name)?;
        let mut value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        value.set_requires_grad(t.requires_grad());
        let v = self.leaf(value)?;
        self.params.push((v, name.to_string()));
        Ok(v)
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Vec<usize>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(name, &sa, &sb)?;
        let (da, db) = (self.data(a), self.data(b));
        let data: Vec<f64> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(&out, &sa);
            let mb = broadcast_map(&out, &sb);
            ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        Ok((Tensor::from_parts(out.clone(), data), out))
    }

    /// Elementwise sum with broadcasting over size-1 dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.map(x, |v| v * c);
        self.push("scale", t, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.map(x, |v| v + c);
        self.push("add_scalar", t, Op::AddScalar(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| v.max(0.0));
        self.push("relu", t, Op::Relu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, f64::exp);
        self.push("exp", t, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, f64::ln);
        self.push("log", t, Op::Log(x), &[x])
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())
    }

    // ---- reductions and shape -----------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push("sum", Tensor::from_parts(vec![1], vec![s]), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push("mean", Tensor::from_parts(vec![1], vec![s]), Op::Mean(x), &[x])
    }

    /// Sum along `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(axis, shape.len())?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let d = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &d[(o * len + a) * inner..(o * len + a + 1) * inner];
                out[o * inner..(o + 1) * inner].iter_mut().zip(row).for_each(|(s, v)| *s += v);
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        self.push("sum_axis", Tensor::from_parts(oshape, out), Op::SumAxis(x, axis), &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis(axis, self.shape(x).len())?;
        let n = self.shape(x)[axis] as f64;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(Error::shape("reshape", v.shape(), shape));
        }
        let t = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidHyperparameter(format!("bad permutation {perm:?} for rank {rank}")));
        }
        let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.data(x), &shape, perm);
        self.push("permute", Tensor::from_parts(oshape, data), Op::Permute(x, perm.to_vec()), &[x])
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::InvalidAxis { axis: 1, rank });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| {
            Error::InvalidHyperparameter("concat of zero tensors".into())
        })?)
        .to_vec();
        check_axis(axis, first.len())?;
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                data.extend_from_slice(&self.data(x)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut oshape = first;
        oshape[axis] = total;
        self.push("concat", Tensor::from_parts(oshape, data), Op::Concat(xs.to_vec(), axis), xs)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(axis, shape.len())?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::IndexOutOfRange {
                index: start + len,
                len: shape[axis],
            });
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let d = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&d[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        self.push("slice", Tensor::from_parts(oshape, data), Op::Slice(x, axis, start), &[x])
    }

    /// Selects entries of axis 0 by index (repeats allowed).
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = shape[0];
        let width: usize = shape[1..].iter().product();
        if indices.is_empty() {
            return Err(Error::InvalidHyperparameter("gather with no indices".into()));
        }
        let d = self.data(x);
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(Error::IndexOutOfRange { index: i, len: rows });
            }
            data.extend_from_slice(&d[i * width..(i + 1) * width]);
        }
        let mut oshape = shape;
        oshape[0] = indices.len();
        self.push("gather", Tensor::from_parts(oshape, data), Op::Gather(x, indices.to_vec()), &[x])
    }

    // ---- linear algebra -----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        super::gemm::gemm(m, k, n, self.data(a), self.data(b), &mut out);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// Batched product `[B, m, k] · [B, k, n] → [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let out = kernels::bmm(sa[0], sa[1], sa[2], sb[2], self.data(a), self.data(b));
        self.push("bmm", Tensor::from_parts(vec![sa[0], sa[1], sb[2]], out), Op::Bmm(a, b), &[a, b])
    }

    /// Cross-correlation of `[B, C, h, w]` with `[O, C, kh, kw]`, zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if stride < 1 {
            return Err(Error::InvalidHyperparameter(format!("conv2d stride {stride} < 1")));
        }
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] || sk[2] > si[2] + 2 * pad || sk[3] > si[3] + 2 * pad {
            return Err(Error::shape("conv2d", &si, &sk));
        }
        let geom = ConvGeom {
            batch: si[0],
            in_ch: si[1],
            h: si[2],
            w: si[3],
            out_ch: sk[0],
            kh: sk[2],
            kw: sk[3],
            stride,
            pad,
            oh: (si[2] + 2 * pad - sk[2]) / stride + 1,
            ow: (si[3] + 2 * pad - sk[3]) / stride + 1,
        };
        let out = kernels::conv2d_forward(&geom, self.data(input), self.data(kernel));
        let shape = vec![geom.batch, geom.out_ch, geom.oh, geom.ow];
        self.push("conv2d", Tensor::from_parts(shape, out), Op::Conv2d(input, kernel, geom), &[input, kernel])
    }

    /// Bilinear resize of `[B, C, h, w]` (half-pixel centres, align-corners = false).
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if out_h < 1 || out_w < 1 {
            return Err(Error::InvalidHyperparameter(format!("resize target {out_h}x{out_w}")));
        }
        if s.len() != 4 {
            return Err(Error::shape("bilinear_resize", &s, &[0, 0, out_h, out_w]));
        }
        let out = kernels::bilinear_forward(s[0] * s[1], s[2], s[3], out_h, out_w, self.data(x));
        let t = Tensor::from_parts(vec![s[0], s[1], out_h, out_w], out);
        self.push("bilinear_resize", t, Op::Resize(x), &[x])
    }

    // ---- normalisation ------------------------------------------------

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(axis, shape.len())?;
        let data = softmax_data(self.data(x), &shape, axis);
        self.push("softmax", Tensor::from_parts(shape, data), Op::Softmax(x, axis), &[x])
    }

    /// Divides each slice along `axis` by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(axis, shape.len())?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let d = self.data(x);
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    let v = d[(o * len + a) * inner + i];
                    norms[o * inner + i] += v * v;
                }
            }
        }
        for n in &mut norms {
            *n = n.sqrt().max(1e-12);
        }
        let mut out = d.to_vec();
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    out[(o * len + a) * inner + i] /= norms[o * inner + i];
                }
            }
        }
        self.push("l2_normalize", Tensor::from_parts(shape, out), Op::L2Normalize(x, axis, norms), &[x])
    }

    /// Batch norm over `[B, C, h, w]` per channel. Training mode normalises
    /// with batch statistics and returns them for folding into the running
    /// estimates; eval mode is the affine map given by the running statistics.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        training: bool,
    ) -> Result<(Var, Option<BatchStats>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("batch_norm2d", &s, &[0, 0, 0, 0]));
        }
        let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
        for p in [gamma, beta] {
            if self.value(p).numel() != c {
                return Err(Error::shape("batch_norm2d", &s, self.shape(p)));
            }
        }
        if running_mean.numel() != c || running_var.numel() != c {
            return Err(Error::shape("batch_norm2d", &s, running_mean.shape()));
        }
        let m = b * plane;
        if training && m < 2 {
            return Err(Error::DegenerateBatch);
        }
        let d = self.data(x);
        let (mean, var): (Vec<f64>, Vec<f64>) = if training {
            (0..c)
                .map(|ch| {
                    let mut sum = 0.0;
                    for bi in 0..b {
                        sum += d[(bi * c + ch) * plane..][..plane].iter().sum::<f64>();
                    }
                    let mu = sum / m as f64;
                    let mut sq = 0.0;
                    for bi in 0..b {
                        sq += d[(bi * c + ch) * plane..][..plane].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                    (mu, sq / m as f64)
                })
                .unzip()
        } else {
            (running_mean.data().to_vec(), running_var.data().to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, bt) = (self.data(gamma), self.data(beta));
        let mut x_hat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (d[i] - mean[ch]) * inv_std[ch];
                    x_hat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let batch = training.then(|| {
            let unbias = m as f64 / (m as f64 - 1.0);
            BatchStats {
                mean: mean.clone(),
                var: var.iter().map(|v| v * unbias).collect(),
            }
        });
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            x_hat,
            inv_std,
            training,
        };
        let y = self.push("batch_norm2d", Tensor::from_parts(s, out), op, &[x, gamma, beta])?;
        Ok((y, batch))
    }

    /// `Σ_r w_r · (−log softmax(logits_r)[t_r])` over rows of a `[R, C]`
    /// logit matrix. Entries where `mask` is false are excluded from the
    /// softmax; rows with zero weight are skipped entirely.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.len() != s[0] || weights.len() != s[0] {
            return Err(Error::shape("softmax_cross_entropy", &s, &[targets.len(), weights.len()]));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(Error::shape("softmax_cross_entropy", &s, &[m.len()]));
            }
        }
        let d = self.data(logits);
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for r in 0..rows {
            if weights[r] == 0.0 {
                continue;
            }
            let t = targets[r];
            let live = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
            if t >= cols || !live(t) {
                return Err(Error::LabelOutOfRange { label: t, classes: cols });
            }
            let row = &d[r * cols..(r + 1) * cols];
            let max = (0..cols).filter(|&j| live(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in (0..cols).filter(|&j| live(j)) {
                let e = (row[j] - max).exp();
                probs[r * cols + j] = e;
                z += e;
            }
            for j in 0..cols {
                probs[r * cols + j] /= z;
            }
            loss += weights[r] * (z.ln() + max - row[t]);
        }
        let op = Op::SoftmaxXent {
            logits,
            probs,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
        };
        self.push("softmax_cross_entropy", Tensor::from_parts(vec![1], vec![loss]), op, &[logits])
    }

    // ---- composites ---------------------------------------------------

    /// Cosine similarity between every row of `a: [R, D]` and `b: [S, D]`.
    pub fn cosine_similarity_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.l2_normalize(a, 1)?;
        let bn = self.l2_normalize(b, 1)?;
        let bt = self.transpose_last(bn)?;
        self.matmul(an, bt)
    }

    /// `x·w + bias` for `x: [R, in]`, `w: [in, out]`, `bias: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => {
                let n = self.value(b).numel();
                let b2 = self.reshape(b, &[1, n])?;
                self.add(y, b2)
            }
            None => Ok(y),
        }
    }

    // ---- backward -----------------------------------------------------

    /// Reverse pass from a scalar `loss`. A graph supports exactly one
    /// backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds gradients of parameter leaves into the matching store entries.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (v, name) in &self.params {
            if let Some(g) = self.grad(*v) {
                store.get_mut(name)?.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let mut send = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let oshape = node.value.shape();
                if want(*a) {
                    let sa = self.shape(*a);
                    send(*a, reduce_to(g, &broadcast_map(oshape, sa), self.value(*a).numel()));
                }
                if want(*b) {
                    let sb = self.shape(*b);
                    let mut d = reduce_to(g, &broadcast_map(oshape, sb), self.value(*b).numel());
                    d.iter_mut().for_each(|v| *v *= sign);
                    send(*b, d);
                }
            }
            Op::Mul(a, b) => {
                let oshape = node.value.shape();
                let ma = broadcast_map(oshape, self.shape(*a));
                let mb = broadcast_map(oshape, self.shape(*b));
                let (da, db) = (self.data(*a), self.data(*b));
                if want(*a) {
                    let mut d = vec![0.0; da.len()];
                    for (k, gv) in g.iter().enumerate() {
                        d[ma[k]] += gv * db[mb[k]];
                    }
                    send(*a, d);
                }
                if want(*b) {
                    let mut d = vec![0.0; db.len()];
                    for (k, gv) in g.iter().enumerate() {
                        d[mb[k]] += gv * da[ma[k]];
                    }
                    send(*b, d);
                }
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Relu(x) => {
                let dx = self.data(*x);
                send(*x, g.iter().zip(dx).map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 }).collect())
            }
            Op::Exp(x) => send(*x, g.iter().zip(out).map(|(gv, y)| gv * y).collect()),
            Op::Log(x) => send(*x, g.iter().zip(self.data(*x)).map(|(gv, v)| gv / v).collect()),
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![g[0] / n as f64; n])
            }
            Op::SumAxis(x, axis) => {
                let shape = self.shape(*x);
                let (outer, len, inner) = axis_split(shape, *axis);
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        d[(o * len + a) * inner..(o * len + a + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                send(*x, d)
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if want(*a) {
                    send(*a, super::gemm::gemm_nt(m, n, k, g, self.data(*b)));
                }
                if want(*b) {
                    send(*b, super::gemm::gemm_tn(k, m, n, self.data(*a), g));
                }
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (ga, gb) = kernels::bmm_backward(sa[0], sa[1], sa[2], sb[2], self.data(*a), self.data(*b), g);
                send(*a, ga);
                send(*b, gb);
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                send(*x, permute_data(g, node.value.shape(), &inv))
            }
            Op::Conv2d(x, k, geom) => {
                let (gx, gk) = kernels::conv2d_backward(geom, self.data(*x), self.data(*k), g, want(*x), want(*k));
                if let Some(gx) = gx {
                    send(*x, gx);
                }
                if let Some(gk) = gk {
                    send(*k, gk);
                }
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut d = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..len).map(|a| g[idx(a)] * out[idx(a)]).sum();
                        for a in 0..len {
                            d[idx(a)] = out[idx(a)] * (g[idx(a)] - dot);
                        }
                    }
                }
                send(*x, d)
            }
            Op::Resize(x) => {
                let s = self.shape(*x);
                let os = node.value.shape();
                send(*x, kernels::bilinear_backward(s[0] * s[1], s[2], s[3], os[2], os[3], g))
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut start = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if want(x) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            d.extend_from_slice(&g[(o * total + start) * inner..(o * total + start + len) * inner]);
                        }
                        send(x, d);
                    }
                    start += len;
                }
            }
            Op::Slice(x, axis, start) => {
                let (outer, full, inner) = axis_split(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    d[(o * full + start) * inner..(o * full + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(*x, d)
            }
            Op::Gather(x, idx) => {
                let rows = self.shape(*x)[0];
                let width = self.value(*x).numel() / rows;
                let mut d = vec![0.0; rows * width];
                for (r, &i) in idx.iter().enumerate() {
                    d[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(&g[r * width..(r + 1) * width])
                        .for_each(|(a, b)| *a += b);
                }
                send(*x, d)
            }
            Op::L2Normalize(x, axis, norms) => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut d = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..len).map(|a| g[idx(a)] * out[idx(a)]).sum();
                        let n = norms[o * inner + i];
                        for a in 0..len {
                            d[idx(a)] = (g[idx(a)] - out[idx(a)] * dot) / n;
                        }
                    }
                }
                send(*x, d)
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                training,
            } => {
                let s = node.value.shape();
                let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                let m = (b * plane) as f64;
                let gam = self.data(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * plane;
                        for i in off..off + plane {
                            dgamma[ch] += g[i] * x_hat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                if want(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * plane;
                            let k = gam[ch] * inv_std[ch];
                            for i in off..off + plane {
                                dx[i] = if *training {
                                    k / m * (m * g[i] - dbeta[ch] - x_hat[i] * dgamma[ch])
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                    send(*x, dx);
                }
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::SoftmaxXent {
                logits,
                probs,
                targets,
                weights,
            } => {
                let cols = self.shape(*logits)[1];
                let mut d = vec![0.0; probs.len()];
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..cols {
                        d[r * cols + j] = g[0] * w * probs[r * cols + j];
                    }
                    d[r * cols + t] -= g[0] * w;
                }
                send(*logits, d)
            }
        }
    }
}

fn softmax_data(d: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let max = (0..len).map(|a| d[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for a in 0..len {
                let e = (d[idx(a)] - max).exp();
                out[idx(a)] = e;
                z += e;
            }
            for a in 0..len {
                out[idx(a)] /= z;
            }
        }
    }
    out
}

fn permute_data(d: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let ostrides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(d.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..d.len() {
        out.push(d[off]);
        for k in (0..rank).rev() {
            idx[k] += 1;
            off += ostrides[k];
            if idx[k] < oshape[k] {
                break;
            }
            off -= ostrides[k] * oshape[k];
            idx[k] = 0;
        }
    }
    out
}
