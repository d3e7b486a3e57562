//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value and the inputs it
//! needs for the backward rule, so append order is a valid topological order.
//! A graph lives for one training step and is dropped afterwards.

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Graph`].
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
    Affine { input: Var, mul: f64 },
    MatMul(Var, Var),
    Permute { input: Var, map: Vec<usize> },
    Reshape(Var),
    BroadcastTo(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { input: Var, axis: usize, start: usize },
    Softmax { input: Var, axis: usize },
    LogSoftmax { input: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Conv1d { x: Var, kernel: Var, stride: usize, padding: usize },
    AdaptiveAvgPool1d(Var),
    SumAxis { input: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    CosineRows { a: Var, b: Var, norm_a: Vec<f64>, norm_b: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

// ---------------------------------------------------------------------------
// index helpers

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out_shape`, the flat index of the broadcast source.
fn broadcast_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let lead = rank - in_shape.len();
    let in_strides = strides(in_shape);
    let eff: Vec<usize> = (0..rank)
        .map(|i| {
            if i < lead || in_shape[i - lead] == 1 {
                0
            } else {
                in_strides[i - lead]
            }
        })
        .collect();
    gather_map(out_shape, &eff)
}

/// Walks `shape` in row-major order emitting `sum(idx[i] * eff[i])`.
fn gather_map(shape: &[usize], eff: &[usize]) -> Vec<usize> {
    let n = numel(shape);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= eff[d] * shape[d];
            idx[d] = 0;
        }
    }
    out
}

/// (outer, len, inner) decomposition around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// c[m,n] += a[m,k] * b[k,n]
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// c[m,k] += a[m,n] * b[k,n]^T
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// c[k,n] += a[m,k]^T * b[m,n]
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Output positions `[lo, hi)` whose kernel tap `kk` lands inside the
/// unpadded input.
fn tap_range(kk: usize, t: usize, tout: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if kk >= padding { 0 } else { (padding - kk).div_ceil(stride) };
    let hi = if t + padding > kk { ((t + padding - kk - 1) / stride + 1).min(tout) } else { 0 };
    (lo, hi.max(lo))
}

/// `y += a * x` over equal-length slices.
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Exact-erf GELU, `x * Phi(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

// ---------------------------------------------------------------------------

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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Binds a tensor as a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Binds a tensor as a differentiated leaf regardless of its flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Binds a tensor as a constant.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are valid")
    }

    /// Accumulated gradient of a node after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb)
            .ok_or_else(|| Error::dim(format!("{name}: cannot broadcast {sa:?} with {sb:?}")))?;
        let (va, vb) = (self.value(a), self.value(b));
        let value = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(sa, &out_shape);
            let mb = broadcast_map(sb, &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        Ok((out_shape, value))
    }

    /// Broadcasting addition.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(s, v, Op::Add(a, b), rg))
    }

    /// Broadcasting subtraction.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(s, v, Op::Sub(a, b), rg))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(s, v, Op::Mul(a, b), rg))
    }

    /// `mul * x + add`.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let value = self.value(x).iter().map(|&v| mul * v + add).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, value, Op::Affine { input: x, mul }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, value, op, rg)
    }

    /// Exact GELU, `x * Phi(x)` with the normal CDF taken from `erfc`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), gelu_scalar)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    // ---- linear algebra ---------------------------------------------------

    /// Batched matrix product `[.., m, k] x [.., k, n]` with broadcast batch extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::dim(format!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb).ok_or_else(err)?;
        let ma = broadcast_map(ba, &batch);
        let mb = broadcast_map(bb, &batch);
        let mut value = vec![0.0; ma.len() * m * n];
        {
            let (va, vb) = (self.value(a), self.value(b));
            for (bo, (&ia, &ib)) in ma.iter().zip(&mb).enumerate() {
                gemm_nn(
                    &va[ia * m * k..(ia + 1) * m * k],
                    &vb[ib * k * n..(ib + 1) * k * n],
                    &mut value[bo * m * n..(bo + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, Op::MatMul(a, b), rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim(format!("permute: {axes:?} is not a permutation for {shape:?}")));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let map = gather_map(&out_shape, &eff);
        let value = map.iter().map(|&i| self.value(x)[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(out_shape, value, Op::Permute { input: x, map }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::dim("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::dim(format!("reshape: {:?} -> {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    /// Repeats `x` along broadcast axes to reach `shape`.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if broadcast_shape(s, shape).as_deref() != Some(shape) {
            return Err(Error::dim(format!("broadcast_to: {s:?} -> {shape:?}")));
        }
        let map = broadcast_map(s, shape);
        let value = map.iter().map(|&i| self.value(x)[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), value, Op::BroadcastTo(x), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| Error::dim("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::dim(format!("concat: axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!("concat: {s:?} does not match {first:?} off axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut value = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                value.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(shape, value, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::dim(format!("narrow: [{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let (outer, full, inner) = split_axis(&s, axis);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            value.extend_from_slice(&self.value(x)[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, Op::Narrow { input: x, axis, start }, rg))
    }

    // ---- normalisation ----------------------------------------------------

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::dim(format!("axis {axis} out of range for {:?}", self.shape(x))));
        }
        Ok(())
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let value = softmax_values(self.value(x), &shape, axis, false);
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, Op::Softmax { input: x, axis }, rg))
    }

    /// Max-shifted log-softmax along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let value = softmax_values(self.value(x), &shape, axis, true);
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, Op::LogSoftmax { input: x, axis }, rg))
    }

    /// Layer normalisation over the last axis; `eps` is added to the variance.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("layernorm of a scalar"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim(format!(
                "layernorm: input {shape:?} with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let rows = numel(&shape) / d;
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut value = vec![0.0; rows * d];
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                value[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(shape, value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    // ---- convolution and pooling -----------------------------------------

    /// Cross-correlation of `x: [n, c_in, t]` with `kernel: [c_out, c_in, k]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sk.len() != 3 || sx[1] != sk[1] || stride == 0 {
            return Err(Error::dim(format!("conv1d: input {sx:?}, kernel {sk:?}, stride {stride}")));
        }
        let (n, cin, t) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sk[0], sk[2]);
        if k > t + 2 * padding {
            return Err(Error::dim(format!("conv1d: kernel {k} longer than padded input {}", t + 2 * padding)));
        }
        let tout = (t + 2 * padding - k) / stride + 1;
        let mut value = vec![0.0; n * cout * tout];
        let (xv, kv) = (self.value(x), self.value(kernel));
        for b in 0..n {
            for co in 0..cout {
                let out = &mut value[(b * cout + co) * tout..(b * cout + co + 1) * tout];
                for ci in 0..cin {
                    let xrow = &xv[(b * cin + ci) * t..(b * cin + ci + 1) * t];
                    let krow = &kv[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                    for (kk, &w) in krow.iter().enumerate() {
                        let (lo, hi) = tap_range(kk, t, tout, stride, padding);
                        if lo < hi {
                            let start = lo * stride + kk - padding;
                            if stride == 1 {
                                axpy(&mut out[lo..hi], w, &xrow[start..start + hi - lo]);
                            } else {
                                for (ov, xv) in out[lo..hi].iter_mut().zip(xrow[start..].iter().step_by(stride)) {
                                    *ov += w * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(vec![n, cout, tout], value, Op::Conv1d { x, kernel, stride, padding }, rg))
    }

    /// Adaptive average pooling of `[n, c, t]` to `[n, c, out_len]`; segment `i`
    /// covers `[floor(i t / out_len), floor((i + 1) t / out_len))`.
    pub fn adaptive_avg_pool1d(&mut self, x: Var, out_len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || out_len == 0 || out_len > s[2] {
            return Err(Error::dim(format!("adaptive_avg_pool1d: {s:?} to length {out_len}")));
        }
        let (rows, t) = (s[0] * s[1], s[2]);
        let mut value = Vec::with_capacity(rows * out_len);
        let xv = self.value(x);
        for r in 0..rows {
            let row = &xv[r * t..(r + 1) * t];
            for i in 0..out_len {
                let (lo, hi) = pool_bounds(i, t, out_len);
                value.push(row[lo..hi].iter().sum::<f64>() / (hi - lo) as f64);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![s[0], s[1], out_len], value, Op::AdaptiveAvgPool1d(x), rg))
    }

    // ---- reductions -------------------------------------------------------

    /// Sums out `axis` (the axis is removed; a rank-1 input becomes `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let s = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&s, axis);
        let xv = self.value(x);
        let mut value = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    value[o * inner + i] += xv[(o * len + j) * inner + i];
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, Op::SumAxis { input: x, axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![v], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = xv.iter().sum::<f64>() / xv.len() as f64;
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![v], Op::Mean(x), rg)
    }

    /// Row-wise cosine similarity of two `[rows, features]` tensors. Rows where
    /// either side is the zero vector get similarity 0 and zero gradient.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb || sa.len() != 2 {
            return Err(Error::dim(format!("cosine_rows: {sa:?} vs {sb:?}")));
        }
        let (rows, f) = (sa[0], sa[1]);
        let (va, vb) = (self.value(a), self.value(b));
        let mut value = vec![0.0; rows];
        let mut norm_a = vec![0.0; rows];
        let mut norm_b = vec![0.0; rows];
        for r in 0..rows {
            let ra = &va[r * f..(r + 1) * f];
            let rb = &vb[r * f..(r + 1) * f];
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            let aa: f64 = ra.iter().map(|x| x * x).sum();
            let bb: f64 = rb.iter().map(|x| x * x).sum();
            norm_a[r] = aa.sqrt();
            norm_b[r] = bb.sqrt();
            // sqrt(aa * bb) keeps identical rows at exactly 1.
            let denom = (aa * bb).sqrt();
            value[r] = if denom > 0.0 { dot / denom } else { 0.0 };
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![rows], value, Op::CosineRows { a, b, norm_a, norm_b }, rg))
    }

    // ---- backward ---------------------------------------------------------

    /// Back-propagates from a single-element `loss`, adding into the gradient
    /// of every node that requires one. Calling it twice adds twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        scratch[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (lo, hi) = scratch.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else { continue };
            self.backward_node(i, g, lo);
        }
        for (i, s) in scratch.into_iter().enumerate() {
            if let Some(s) = s {
                match self.grads[i].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&s).for_each(|(a, b)| *a += b),
                    None => self.grads[i] = Some(s),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if needs(v) {
                        let map = broadcast_map(&self.nodes[v.0].shape, &node.shape);
                        let dst = slot(grads, v, len(v));
                        for (o, &j) in map.iter().enumerate() {
                            dst[j] += s * g[o];
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if needs(v) {
                        let map = broadcast_map(&self.nodes[v.0].shape, &node.shape);
                        let omap = broadcast_map(&self.nodes[other.0].shape, &node.shape);
                        let ov = &self.nodes[other.0].value;
                        let dst = slot(grads, v, len(v));
                        for o in 0..g.len() {
                            dst[map[o]] += g[o] * ov[omap[o]];
                        }
                    }
                }
            }
            Op::Affine { input, mul } => {
                let dst = slot(grads, *input, g.len());
                dst.iter_mut().zip(g).for_each(|(d, gv)| *d += mul * gv);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch = &node.shape[..node.shape.len() - 2];
                let ma = broadcast_map(&sa[..sa.len() - 2], batch);
                let mb = broadcast_map(&sb[..sb.len() - 2], batch);
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if needs(*a) {
                    let dst = slot(grads, *a, va.len());
                    for (bo, (&ia, &ib)) in ma.iter().zip(&mb).enumerate() {
                        gemm_nt(
                            &g[bo * m * n..(bo + 1) * m * n],
                            &vb[ib * k * n..(ib + 1) * k * n],
                            &mut dst[ia * m * k..(ia + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                }
                if needs(*b) {
                    let dst = slot(grads, *b, vb.len());
                    for (bo, (&ia, &ib)) in ma.iter().zip(&mb).enumerate() {
                        gemm_tn(
                            &va[ia * m * k..(ia + 1) * m * k],
                            &g[bo * m * n..(bo + 1) * m * n],
                            &mut dst[ib * k * n..(ib + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Permute { input, map } => {
                let dst = slot(grads, *input, len(*input));
                for (o, &j) in map.iter().enumerate() {
                    dst[j] += g[o];
                }
            }
            Op::BroadcastTo(input) => {
                let map = broadcast_map(&self.nodes[input.0].shape, &node.shape);
                let dst = slot(grads, *input, len(*input));
                for (o, &j) in map.iter().enumerate() {
                    dst[j] += g[o];
                }
            }
            Op::Reshape(input) => {
                let dst = slot(grads, *input, g.len());
                dst.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for o in 0..outer {
                    for &v in inputs {
                        let chunk = self.nodes[v.0].shape[*axis] * inner;
                        if needs(v) {
                            let dst = slot(grads, v, len(v));
                            for (d, gv) in dst[o * chunk..(o + 1) * chunk].iter_mut().zip(&g[offset..offset + chunk]) {
                                *d += gv;
                            }
                        }
                        offset += chunk;
                    }
                }
            }
            Op::Narrow { input, axis, start } => {
                let (outer, full, inner) = split_axis(&self.nodes[input.0].shape, *axis);
                let nlen = node.shape[*axis];
                let dst = slot(grads, *input, len(*input));
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    for (d, gv) in dst[base..base + nlen * inner].iter_mut().zip(&g[o * nlen * inner..(o + 1) * nlen * inner]) {
                        *d += gv;
                    }
                }
            }
            Op::Softmax { input, axis } => {
                let (outer, l, inner) = split_axis(&node.shape, *axis);
                let y = &node.value;
                let dst = slot(grads, *input, y.len());
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| (o * l + j) * inner + ii;
                        let dot: f64 = (0..l).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..l {
                            dst[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { input, axis } => {
                let (outer, l, inner) = split_axis(&node.shape, *axis);
                let y = &node.value;
                let dst = slot(grads, *input, y.len());
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| (o * l + j) * inner + ii;
                        let gsum: f64 = (0..l).map(|j| g[at(j)]).sum();
                        for j in 0..l {
                            dst[at(j)] += g[at(j)] - y[at(j)].exp() * gsum;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = *node.shape.last().unwrap();
                let rows = inv_std.len();
                let gv = &self.nodes[gain.0].value;
                if needs(*gain) {
                    let dst = slot(grads, *gain, d);
                    for r in 0..rows {
                        for j in 0..d {
                            dst[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if needs(*bias) {
                    let dst = slot(grads, *bias, d);
                    for r in 0..rows {
                        for j in 0..d {
                            dst[j] += g[r * d + j];
                        }
                    }
                }
                if needs(*x) {
                    let dst = slot(grads, *x, rows * d);
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            dst[r * d + j] += inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(input) => {
                let xv = &self.nodes[input.0].value;
                let dst = slot(grads, *input, xv.len());
                for ((d, &x), gv) in dst.iter_mut().zip(xv).zip(g) {
                    *d += gv * (std_normal_cdf(x) + x * std_normal_pdf(x));
                }
            }
            Op::Relu(input) => {
                let xv = &self.nodes[input.0].value;
                let dst = slot(grads, *input, xv.len());
                for ((d, &x), gv) in dst.iter_mut().zip(xv).zip(g) {
                    if x > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Exp(input) => {
                let dst = slot(grads, *input, g.len());
                for ((d, y), gv) in dst.iter_mut().zip(&node.value).zip(g) {
                    *d += gv * y;
                }
            }
            Op::Conv1d { x, kernel, stride, padding } => {
                let (sx, sk) = (&self.nodes[x.0].shape, &self.nodes[kernel.0].shape);
                let (n, cin, t) = (sx[0], sx[1], sx[2]);
                let (cout, k) = (sk[0], sk[2]);
                let tout = node.shape[2];
                let (xv, kv) = (&self.nodes[x.0].value, &self.nodes[kernel.0].value);
                let (stride, padding) = (*stride, *padding);
                let range = |kk: usize| tap_range(kk, t, tout, stride, padding);
                if needs(*x) {
                    let dst = slot(grads, *x, xv.len());
                    for b in 0..n {
                        for co in 0..cout {
                            let grow = &g[(b * cout + co) * tout..(b * cout + co + 1) * tout];
                            for ci in 0..cin {
                                let drow = &mut dst[(b * cin + ci) * t..(b * cin + ci + 1) * t];
                                let krow = &kv[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                                for (kk, &w) in krow.iter().enumerate() {
                                    let (lo, hi) = range(kk);
                                    if lo < hi {
                                        let start = lo * stride + kk - padding;
                                        if stride == 1 {
                                            axpy(&mut drow[start..start + hi - lo], w, &grow[lo..hi]);
                                        } else {
                                            let dst = drow[start..].iter_mut().step_by(stride);
                                            for (d, gv) in dst.zip(&grow[lo..hi]) {
                                                *d += w * gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if needs(*kernel) {
                    let dst = slot(grads, *kernel, kv.len());
                    for b in 0..n {
                        for co in 0..cout {
                            let grow = &g[(b * cout + co) * tout..(b * cout + co + 1) * tout];
                            for ci in 0..cin {
                                let xrow = &xv[(b * cin + ci) * t..(b * cin + ci + 1) * t];
                                let drow = &mut dst[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                                for (kk, dw) in drow.iter_mut().enumerate() {
                                    let (lo, hi) = range(kk);
                                    if lo < hi {
                                        let start = lo * stride + kk - padding;
                                        *dw += if stride == 1 {
                                            dot(&xrow[start..start + hi - lo], &grow[lo..hi])
                                        } else {
                                            xrow[start..].iter().step_by(stride).zip(&grow[lo..hi]).map(|(a, b)| a * b).sum()
                                        };
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::AdaptiveAvgPool1d(input) => {
                let t = self.nodes[input.0].shape[2];
                let out_len = node.shape[2];
                let rows = node.shape[0] * node.shape[1];
                let dst = slot(grads, *input, rows * t);
                for r in 0..rows {
                    for i in 0..out_len {
                        let (lo, hi) = pool_bounds(i, t, out_len);
                        let share = g[r * out_len + i] / (hi - lo) as f64;
                        dst[r * t + lo..r * t + hi].iter_mut().for_each(|d| *d += share);
                    }
                }
            }
            Op::SumAxis { input, axis } => {
                let (outer, l, inner) = split_axis(&self.nodes[input.0].shape, *axis);
                let dst = slot(grads, *input, outer * l * inner);
                for o in 0..outer {
                    for j in 0..l {
                        for ii in 0..inner {
                            dst[(o * l + j) * inner + ii] += g[o * inner + ii];
                        }
                    }
                }
            }
            Op::Sum(input) | Op::Mean(input) => {
                let n = len(*input);
                let share = if matches!(node.op, Op::Mean(_)) { g[0] / n as f64 } else { g[0] };
                slot(grads, *input, n).iter_mut().for_each(|d| *d += share);
            }
            Op::CosineRows { a, b, norm_a, norm_b } => {
                let f = self.nodes[a.0].shape[1];
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                for (v, w, nv, nw) in [(*a, vb, norm_a, norm_b), (*b, va, norm_b, norm_a)] {
                    if !needs(v) {
                        continue;
                    }
                    let own = &self.nodes[v.0].value;
                    let dst = slot(grads, v, own.len());
                    for r in 0..g.len() {
                        if nv[r] == 0.0 || nw[r] == 0.0 {
                            continue;
                        }
                        let sim = node.value[r];
                        let inv = 1.0 / (nv[r] * nw[r]);
                        let self_term = sim / (nv[r] * nv[r]);
                        for j in 0..f {
                            dst[r * f + j] += g[r] * (w[r * f + j] * inv - own[r * f + j] * self_term);
                        }
                    }
                }
            }
        }
    }
}

fn pool_bounds(i: usize, t: usize, out_len: usize) -> (usize, usize) {
    (i * t / out_len, (i + 1) * t / out_len)
}

fn softmax_values(x: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, l, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for ii in 0..inner {
            let at = |j: usize| (o * l + j) * inner + ii;
            let max = (0..l).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..l).map(|j| (x[at(j)] - max).exp()).sum();
            let log_sum = sum.ln();
            for j in 0..l {
                let shifted = x[at(j)] - max;
                out[at(j)] = if log { shifted - log_sum } else { shifted.exp() / sum };
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = numel(shape);
        t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    fn assert_fd(report: GradCheck, tol: f64) {
        assert!(report.max_rel_error < tol, "gradient check failed: {report:?}");
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let i2 = g.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(&t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(&t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[1, 1]);
        assert_eq!(g.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(&[2, 3]));
        let b = g.constant(&Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("and"), "{err}");
    }

    #[test]
    fn matmul_gradient_is_ones_times_b_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let mut g = Graph::new();
        let va = g.param(&a);
        let vb = g.constant(&b);
        let p = g.matmul(va, vb).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        // (ones[3,2] x B^T)[i][j] = sum_c B[j][c]
        let expect: Vec<f64> = (0..3)
            .flat_map(|_| (0..4).map(|j| b.data()[j * 2] + b.data()[j * 2 + 1]))
            .collect();
        assert_close(g.grad(va).unwrap(), &expect, 1e-12);

        let report = check_gradients(&[a, b], |g, v| {
            let p = g.matmul(v[0], v[1])?;
            Ok(g.sum(p))
        });
        assert_fd(report, 1e-6);
    }

    #[test]
    fn batched_matmul_broadcasts_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&[2, 3, 4], &mut rng);
        let w = random(&[4, 5], &mut rng);
        let report = check_gradients(&[a, w], |g, v| {
            let p = g.matmul(v[0], v[1])?;
            let p2 = g.mul(p, p)?;
            Ok(g.sum(p2))
        });
        assert_fd(report, 1e-6);
    }

    #[test]
    fn conv1d_identity_and_hand_case() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[1, 1, 3], &[1.0, 2.0, 3.0]));
        let k = g.constant(&t(&[1, 1, 1], &[1.0]));
        let y = g.conv1d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0]);

        let x = g.constant(&t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let k = g.constant(&t(&[1, 1, 2], &[1.0, 1.0]));
        let y = g.conv1d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn conv1d_output_length_and_errors() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(&[2, 3, 20]));
        let k = g.constant(&Tensor::zeros(&[4, 3, 5]));
        let y = g.conv1d(x, k, 3, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 4, (20 + 2 - 5) / 3 + 1]);
        let long = g.constant(&Tensor::zeros(&[4, 3, 23]));
        assert!(matches!(g.conv1d(x, long, 1, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv1d_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[1, 1, 16], &mut rng);
        let k = random(&[1, 1, 3], &mut rng);
        let report = check_gradients(&[x, k], |g, v| {
            let y = g.conv1d(v[0], v[1], 1, 0)?;
            let y2 = g.mul(y, y)?;
            Ok(g.sum(y2))
        });
        assert_fd(report, 1e-6);

        let x = random(&[2, 3, 17], &mut rng);
        let k = random(&[4, 3, 5], &mut rng);
        for (stride, padding) in [(2, 0), (3, 2), (1, 4)] {
            let report = check_gradients(&[x.clone(), k.clone()], |g, v| {
                let y = g.conv1d(v[0], v[1], stride, padding)?;
                let y = g.gelu(y);
                Ok(g.sum(y))
            });
            assert_fd(report, 1e-6);
        }
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(&[5]));
        let y = g.softmax(x, 0).unwrap();
        assert_close(g.value(y), &[0.2; 5], 1e-15);

        let x = g.constant(&t(&[2], &[1.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        let e = std::f64::consts::E;
        assert_close(g.value(y), &[e / (e + 1.0), 1.0 / (e + 1.0)], 1e-15);
        assert_close(g.value(y), &[0.731059, 0.268941], 1e-6);

        let x = g.constant(&t(&[2], &[1000.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert!(g.value(y).iter().all(|v| v.is_finite()));
        assert_eq!(g.value(y)[0], 1.0);
        assert!(g.value(y)[1] < 1e-300);
    }

    #[test]
    fn softmax_and_log_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[3, 4, 2], &mut rng);
        let w = random(&[3, 4, 2], &mut rng);
        for axis in 0..3 {
            let report = check_gradients(&[x.clone(), w.clone()], |g, v| {
                let s = g.softmax(v[0], axis)?;
                let p = g.mul(s, v[1])?;
                Ok(g.sum(p))
            });
            assert_fd(report, 1e-6);
            let report = check_gradients(&[x.clone(), w.clone()], |g, v| {
                let s = g.log_softmax(v[0], axis)?;
                let p = g.mul(s, v[1])?;
                Ok(g.sum(p))
            });
            assert_fd(report, 1e-6);
        }
    }

    #[test]
    fn layernorm_cases() {
        let mut g = Graph::new();
        let gain = g.constant(&Tensor::full(&[4], 1.0));
        let bias = g.constant(&Tensor::zeros(&[4]));
        let x = g.constant(&t(&[1, 4], &[5.0; 4]));
        let y = g.layernorm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(g.value(y), &[0.0; 4]);

        let gain = g.constant(&Tensor::full(&[2], 1.0));
        let bias = g.constant(&Tensor::zeros(&[2]));
        let x = g.constant(&t(&[2], &[1.0, 3.0]));
        let y = g.layernorm(x, gain, bias, 0.0).unwrap();
        assert_close(g.value(y), &[-1.0, 1.0], 1e-15);

        let x = g.constant(&Tensor::zeros(&[2, 3]));
        assert!(matches!(g.layernorm(x, gain, bias, 1e-5), Err(Error::Dimension(_))));
    }

    #[test]
    fn layernorm_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 8], &mut rng);
        let gain = random(&[8], &mut rng);
        let bias = random(&[8], &mut rng);
        let w = random(&[2, 8], &mut rng);
        let report = check_gradients(&[x, gain, bias, w], |g, v| {
            let y = g.layernorm(v[0], v[1], v[2], 1e-5)?;
            let p = g.mul(y, v[3])?;
            Ok(g.sum(p))
        });
        assert_fd(report, 1e-5);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(1.0) - 0.841345).abs() < 1e-6);
        let tail = gelu_scalar(-10.0);
        assert!(!tail.is_nan());
        assert!(tail < 0.0 && (tail + 7.6e-23).abs() < 1e-24, "{tail:e}");
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut g = Graph::new();
        let x = g.param(&t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

        let neg = g.constant(&t(&[3], &[-3.0, -2.0, -0.5]));
        let y = g.relu(neg);
        assert_eq!(g.value(y), &[0.0; 3]);

        let report = check_gradients(&[t(&[4], &[-1.5, -0.3, 0.4, 2.0])], |g, v| {
            let y = g.relu(v[0]);
            let y2 = g.mul(y, y)?;
            Ok(g.sum(y2))
        });
        assert_fd(report, 1e-6);
    }

    #[test]
    fn adaptive_pool_cases() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let same = g.adaptive_avg_pool1d(x, 4).unwrap();
        assert_eq!(g.value(same), &[1.0, 2.0, 3.0, 4.0]);
        let half = g.adaptive_avg_pool1d(x, 2).unwrap();
        assert_eq!(g.value(half), &[1.5, 3.5]);
        let c = g.constant(&Tensor::full(&[1, 2, 7], 3.25));
        for l in 1..=7 {
            let p = g.adaptive_avg_pool1d(c, l).unwrap();
            assert!(g.value(p).iter().all(|&v| (v - 3.25).abs() < 1e-15));
        }
        assert!(matches!(g.adaptive_avg_pool1d(x, 5), Err(Error::Dimension(_))));
    }

    #[test]
    fn adaptive_pool_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[2, 3, 11], &mut rng);
        let w = random(&[2, 3, 4], &mut rng);
        let report = check_gradients(&[x, w], |g, v| {
            let p = g.adaptive_avg_pool1d(v[0], 4)?;
            let p = g.mul(p, v[1])?;
            Ok(g.sum(p))
        });
        assert_fd(report, 1e-6);
    }

    #[test]
    fn shape_ops_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[2, 3, 4], &mut rng);
        let b = random(&[2, 1, 4], &mut rng);
        let c = random(&[1, 4], &mut rng);
        let report = check_gradients(&[a, b, c], |g, v| {
            let cat = g.concat(&[v[1], v[0]], 1)?;
            let perm = g.permute(cat, &[2, 0, 1])?;
            let r = g.reshape(perm, &[4, 8])?;
            let head = g.narrow(r, 1, 2, 5)?;
            let bc = g.broadcast_to(v[2], &[3, 4])?;
            let bt = g.transpose_last(bc)?;
            let bb = g.transpose_last(bt)?;
            let prod = g.matmul(bb, head)?;
            let sq = g.mul(prod, prod)?;
            let rows = g.sum_axis(sq, 1)?;
            let e = g.exp(rows);
            let m = g.mean(e);
            let sub = g.sub(m, rows)?;
            Ok(g.sum(sub))
        });
        assert_fd(report, 1e-6);
    }

    #[test]
    fn cosine_rows_values_and_gradient() {
        let mut g = Graph::new();
        let a = g.constant(&t(&[3, 2], &[1.0, 2.0, 1.0, 0.0, 0.0, 0.0]));
        let b = g.constant(&t(&[3, 2], &[1.0, 2.0, 0.0, 3.0, 1.0, 1.0]));
        let c = g.cosine_rows(a, b).unwrap();
        assert_eq!(g.value(c), &[1.0, 0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[3, 5], &mut rng);
        let y = random(&[3, 5], &mut rng);
        let report = check_gradients(&[x, y], |g, v| {
            let c = g.cosine_rows(v[0], v[1])?;
            let c2 = g.mul(c, c)?;
            Ok(g.sum(c2))
        });
        assert_fd(report, 1e-6);
    }

    #[test]
    fn backward_rules() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2], &[1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(&t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
        // a second call adds
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);

        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(3.0));
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);

        let mut g = Graph::new();
        let x = g.param(&Tensor::zeros(&[3]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2], &[1.0, 2.0]));
        let c = g.constant(&t(&[2], &[3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn random_elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..20 {
            let a = random(&[2, 3], &mut rng);
            let b = random(&[3], &mut rng);
            let report = check_gradients(&[a, b], |g, v| {
                let s = g.sub(v[0], v[1])?;
                let m = g.mul(s, v[1])?;
                let e = g.gelu(m);
                let af = g.affine(e, 1.7, -0.3);
                let x = g.exp(af);
                Ok(g.mean(x))
            });
            assert!(report.max_rel_error < 1e-4, "trial {trial}: {report:?}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 12)) {
                let mut g = Graph::new();
                let x = g.constant(&Tensor::new(vec![3, 4], values).unwrap());
                for axis in 0..2 {
                    let y = g.softmax(x, axis).unwrap();
                    let s = g.sum_axis(y, axis).unwrap();
                    for v in g.value(s) {
                        prop_assert!((v - 1.0).abs() < 1e-12);
                    }
                    prop_assert!(g.value(y).iter().all(|&v| v >= 0.0));
                }
            }

            #[test]
            fn layernorm_rows_are_standardised(values in prop::collection::vec(-20.0f64..20.0, 16)) {
                let spread = values.iter().cloned().fold(f64::MIN, f64::max) - values.iter().cloned().fold(f64::MAX, f64::min);
                prop_assume!(spread > 1e-3);
                let mut g = Graph::new();
                let x = g.constant(&Tensor::new(vec![2, 8], values).unwrap());
                let gain = g.constant(&Tensor::full(&[8], 1.0));
                let bias = g.constant(&Tensor::zeros(&[8]));
                let y = g.layernorm(x, gain, bias, 0.0).unwrap();
                for row in g.value(y).chunks(8) {
                    let mean = row.iter().sum::<f64>() / 8.0;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
                    prop_assert!(mean.abs() < 1e-9);
                    prop_assert!((var - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
