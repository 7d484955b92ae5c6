//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its forward value and enough
//! saved state to run its backward rule. Nodes that do not depend on any
//! parameter are recorded as constants and skipped by [`Tape::backward`].

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{c, sigmoid, softplus, Csr, NumericsError, ParamId, ParamStore, Real, Result, Tensor};

/// Node handle on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
    transpose_b: bool,
}

enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        dims: MatMulDims,
    },
    Add {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Sigmoid {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Softplus {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    MaskedFill {
        x: Var,
        mask: Arc<Vec<bool>>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        x: Var,
        scale: Vec<T>,
    },
    GatherRows {
        x: Var,
        idx: Arc<Vec<usize>>,
    },
    ConcatRows {
        a: Var,
        b: Var,
    },
    SumAll {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
    MeanRows {
        x: Var,
    },
    Aggregate {
        x: Var,
        csr: Arc<Csr>,
    },
    ScaleRows {
        x: Var,
        factors: Arc<Vec<T>>,
    },
    RowDot {
        a: Var,
        b: Var,
    },
    Permute {
        x: Var,
        perm: Arc<Vec<usize>>,
    },
    Reshape {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.index()]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.grads.iter()
    }
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation
    let k = c::<T>(0.797_884_560_802_865_4);
    let a = c::<T>(0.044_715);
    let half = c::<T>(0.5);
    let inner = k * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * k * (T::one() + c::<T>(3.0) * a * x * x);
    (y, dy)
}

impl<T: Real> Tape<T> {
    /// A tape in evaluation mode (dropout disabled).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// A tape in training mode whose dropout masks come from `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reads a trainable tensor from `store`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn matmul_dims(
        &self,
        a: Var,
        b: Var,
        transpose_b: bool,
        op: &'static str,
    ) -> Result<MatMulDims> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() < 2 || !(sb.len() == 2 || sb.len() == 3) {
            return Err(mismatch(op, sa, sb));
        }
        let m = sa[sa.len() - 2];
        let k = sa[sa.len() - 1];
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let b_batched = sb.len() == 3;
        let (bk, n) = if transpose_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if bk != k || (b_batched && (sb[0] != batch || sa.len() != 3)) {
            return Err(mismatch(op, sa, sb));
        }
        Ok(MatMulDims {
            batch,
            m,
            k,
            n,
            b_batched,
            transpose_b,
        })
    }

    fn matmul_impl(&mut self, a: Var, b: Var, dims: MatMulDims) -> Var {
        let MatMulDims {
            batch,
            m,
            k,
            n,
            b_batched,
            transpose_b,
        } = dims;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let ab = &av[bi * m * k..(bi + 1) * m * k];
            let bb = if b_batched {
                &bv[bi * k * n..(bi + 1) * k * n]
            } else {
                bv
            };
            let ob = &mut out[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                let arow = &ab[i * k..(i + 1) * k];
                let orow = &mut ob[i * n..(i + 1) * n];
                if transpose_b {
                    for (j, o) in orow.iter_mut().enumerate() {
                        let brow = &bb[j * k..(j + 1) * k];
                        *o = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                    }
                } else {
                    for (p, &x) in arow.iter().enumerate() {
                        if x == T::zero() {
                            continue;
                        }
                        let brow = &bb[p * n..(p + 1) * n];
                        for (o, &y) in orow.iter_mut().zip(brow) {
                            *o = *o + x * y;
                        }
                    }
                }
            }
        }
        let mut shape = self.shape(a)[..self.shape(a).len() - 1].to_vec();
        shape.push(n);
        self.push(
            Tensor::with_shape(shape, out),
            Op::MatMul { a, b, dims },
            &[a, b],
        )
    }

    /// `a @ b` where `a` is `[.., m, k]` and `b` is `[k, n]` (shared) or
    /// `[batch, k, n]` (batched, `a` must then be rank 3).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let dims = self.matmul_dims(a, b, false, "matmul")?;
        Ok(self.matmul_impl(a, b, dims))
    }

    /// `a @ b^T` with `b` shaped `[n, k]` or `[batch, n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let dims = self.matmul_dims(a, b, true, "matmul_nt")?;
        Ok(self.matmul_impl(a, b, dims))
    }

    /// Elementwise sum. `b` may also be a vector matching the last axis of
    /// `a`, in which case it is broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        let broadcast = if sa == sb {
            false
        } else if sb.len() == 1 && sb[0] == last_dim(&sa) && !sa.is_empty() {
            true
        } else {
            return Err(mismatch("add", &sa, sb));
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<T> = if broadcast {
            let w = bv.len();
            av.iter().enumerate().map(|(i, &x)| x + bv[i % w]).collect()
        } else {
            av.iter().zip(bv).map(|(&x, &y)| x + y).collect()
        };
        Ok(self.push(
            Tensor::with_shape(sa, out),
            Op::Add { a, b, broadcast },
            &[a, b],
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            return Err(mismatch("sub", &sa, self.shape(b)));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        Ok(self.push(Tensor::with_shape(sa, out), Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            return Err(mismatch("mul", &sa, self.shape(b)));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(Tensor::with_shape(sa, out), Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = self.value(x);
        let out = v.data().iter().map(|&e| e * factor).collect();
        let shape = v.shape().to_vec();
        self.push(
            Tensor::with_shape(shape, out),
            Op::Scale { x, factor },
            &[x],
        )
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(x);
        let out = v.data().iter().map(|&e| f(e)).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::with_shape(shape, out), op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |e| e.max(T::zero()), Op::Relu { x })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |e| gelu_parts(e).0, Op::Gelu { x })
    }

    /// `ln(1 + e^x)`; `softplus(-x) = -ln σ(x)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus { x })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let w = last_dim(v.shape());
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(w.max(1)) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                s = s + *e;
            }
            for e in row.iter_mut() {
                *e = *e / s;
            }
        }
        let shape = v.shape().to_vec();
        self.push(Tensor::with_shape(shape, out), Op::Softmax { x }, &[x])
    }

    /// Replaces every position where `mask` is true with `fill`.
    pub fn masked_fill(&mut self, x: Var, mask: Arc<Vec<bool>>, fill: T) -> Result<Var> {
        let v = self.value(x);
        if mask.len() != v.numel() {
            return Err(mismatch("masked_fill", v.shape(), &[mask.len()]));
        }
        let out = v
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&e, &m)| if m { fill } else { e })
            .collect();
        let shape = v.shape().to_vec();
        Ok(self.push(
            Tensor::with_shape(shape, out),
            Op::MaskedFill { x, mask },
            &[x],
        ))
    }

    /// Normalizes over the last axis then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let w = last_dim(&sx);
        if self.shape(gamma) != [w] || self.shape(beta) != [w] {
            return Err(mismatch("layer_norm", &sx, self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.len() / w.max(1);
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let wn = c::<T>(w as f64);
        for r in 0..rows {
            let row = &xv[r * w..(r + 1) * w];
            let mean = row.iter().copied().sum::<T>() / wn;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / wn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..w {
                let h = (row[j] - mean) * rs;
                xhat[r * w + j] = h;
                out[r * w + j] = g[j] * h + b[j];
            }
        }
        Ok(self.push(
            Tensor::with_shape(sx, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Inverted dropout. Identity when the tape is not training or when
    /// `keep_prob >= 1`.
    pub fn dropout(&mut self, x: Var, keep_prob: f64) -> Var {
        if !self.training || keep_prob >= 1.0 {
            return x;
        }
        let n = self.value(x).numel();
        let inv = c::<T>(1.0 / keep_prob.max(1e-12));
        let scale: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < keep_prob {
                    inv
                } else {
                    T::zero()
                }
            })
            .collect();
        let v = self.value(x);
        let out = v.data().iter().zip(&scale).map(|(&e, &s)| e * s).collect();
        let shape = v.shape().to_vec();
        self.push(
            Tensor::with_shape(shape, out),
            Op::Dropout { x, scale },
            &[x],
        )
    }

    /// Selects leading-axis slices of `x` by index (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let v = self.value(x);
        if v.shape().is_empty() {
            return Err(mismatch("gather_rows", v.shape(), &[idx.len()]));
        }
        let rows = v.rows();
        let w = v.row_len();
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx.iter() {
            if i >= rows {
                return Err(NumericsError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            out.extend_from_slice(v.row(i));
        }
        let mut shape = v.shape().to_vec();
        shape[0] = idx.len();
        Ok(self.push(
            Tensor::with_shape(shape, out),
            Op::GatherRows { x, idx },
            &[x],
        ))
    }

    /// Stacks `b` under `a` along the leading axis.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.is_empty() || sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(mismatch("concat_rows", sa, sb));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        Ok(self.push(
            Tensor::with_shape(shape, out),
            Op::ConcatRows { a, b },
            &[a, b],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / c::<T>(v.numel().max(1) as f64);
        self.push(Tensor::scalar(s), Op::MeanAll { x }, &[x])
    }

    /// Mean over the leading axis: `[n, d] -> [d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 || v.rows() == 0 {
            return Err(mismatch("mean_rows", v.shape(), &[]));
        }
        let (n, d) = (v.rows(), v.row_len());
        let mut out = vec![T::zero(); d];
        for r in 0..n {
            for (o, &e) in out.iter_mut().zip(v.row(r)) {
                *o = *o + e;
            }
        }
        let inv = T::one() / c::<T>(n as f64);
        out.iter_mut().for_each(|o| *o = *o * inv);
        Ok(self.push(Tensor::with_shape(vec![d], out), Op::MeanRows { x }, &[x]))
    }

    /// Sparse neighbor sum: row `r` of the result is the sum of the rows of
    /// `x` listed in row `r` of `csr`.
    pub fn aggregate(&mut self, csr: Arc<Csr>, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 || v.rows() != csr.n_cols() {
            return Err(mismatch(
                "aggregate",
                v.shape(),
                &[csr.n_rows(), csr.n_cols()],
            ));
        }
        let w = v.row_len();
        let mut out = vec![T::zero(); csr.n_rows() * w];
        csr.aggregate(v.data(), w, &mut out);
        let shape = vec![csr.n_rows(), w];
        Ok(self.push(
            Tensor::with_shape(shape, out),
            Op::Aggregate { x, csr },
            &[x],
        ))
    }

    /// Multiplies leading-axis slice `r` by `factors[r]`.
    pub fn scale_rows(&mut self, x: Var, factors: Arc<Vec<T>>) -> Result<Var> {
        let v = self.value(x);
        if v.rows() != factors.len() || v.shape().is_empty() {
            return Err(mismatch("scale_rows", v.shape(), &[factors.len()]));
        }
        let w = v.row_len();
        let out = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, &e)| e * factors[i / w])
            .collect();
        let shape = v.shape().to_vec();
        Ok(self.push(
            Tensor::with_shape(shape, out),
            Op::ScaleRows { x, factors },
            &[x],
        ))
    }

    /// Row-wise inner product: `[n, d] x [n, d] -> [n]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 || sa != self.shape(b) {
            return Err(mismatch("row_dot", sa, self.shape(b)));
        }
        let (n, d) = (sa[0], sa[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out = (0..n)
            .map(|r| {
                av[r * d..(r + 1) * d]
                    .iter()
                    .zip(&bv[r * d..(r + 1) * d])
                    .map(|(&x, &y)| x * y)
                    .sum()
            })
            .collect();
        Ok(self.push(
            Tensor::with_shape(vec![n], out),
            Op::RowDot { a, b },
            &[a, b],
        ))
    }

    /// `out.flat[i] = x.flat[perm[i]]`, reinterpreted with `shape`.
    pub fn permute(&mut self, x: Var, perm: Arc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x);
        if perm.len() != shape.iter().product::<usize>() || perm.len() != v.numel() {
            return Err(mismatch("permute", v.shape(), &shape));
        }
        let src = v.data();
        let out = perm.iter().map(|&p| src[p]).collect();
        Ok(self.push(
            Tensor::with_shape(shape, out),
            Op::Permute { x, perm },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(mismatch("reshape", v.shape(), &shape));
        }
        let out = v.data().to_vec();
        Ok(self.push(Tensor::with_shape(shape, out), Op::Reshape { x }, &[x]))
    }

    /// `[batch * seq, heads * dh] -> [batch * heads, seq, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != batch * seq || !s[1].is_multiple_of(heads) {
            return Err(mismatch("split_heads", s, &[batch, seq, heads]));
        }
        let d = s[1];
        let dh = d / heads;
        let mut perm = Vec::with_capacity(batch * seq * d);
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    for j in 0..dh {
                        perm.push((b * seq + t) * d + h * dh + j);
                    }
                }
            }
        }
        self.permute(x, Arc::new(perm), vec![batch * heads, seq, dh])
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || s[0] != batch * heads {
            return Err(mismatch("merge_heads", s, &[batch, heads]));
        }
        let (seq, dh) = (s[1], s[2]);
        let d = heads * dh;
        let mut perm = Vec::with_capacity(batch * seq * d);
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    for j in 0..dh {
                        perm.push(((b * heads + h) * seq + t) * dh + j);
                    }
                }
            }
        }
        self.permute(x, Arc::new(perm), vec![batch * seq, d])
    }

    /// Runs every recorded backward rule in reverse order and returns the
    /// gradient of `loss` with respect to each parameter in `store`.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::NonScalarLoss(ls.to_vec()));
        }
        let mut out = Gradients::zeros_like(store);
        if !self.nodes[loss.0].needs_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        out: &mut Gradients<T>,
    ) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
        }
        let numel = |v: Var| self.nodes[v.0].value.numel();

        match &node.op {
            Op::Constant => {}
            Op::Param(id) => {
                for (o, &e) in out.get_mut(*id).data_mut().iter_mut().zip(g) {
                    *o = *o + e;
                }
            }
            Op::MatMul { a, b, dims } => {
                let MatMulDims {
                    batch,
                    m,
                    k,
                    n,
                    b_batched,
                    transpose_b,
                } = *dims;
                let av = val(*a);
                let bv = val(*b);
                if needs(*a) {
                    let ga = slot(grads, *a, numel(*a));
                    for bi in 0..batch {
                        let bb = if b_batched {
                            &bv[bi * k * n..(bi + 1) * k * n]
                        } else {
                            bv
                        };
                        for i in 0..m {
                            let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                            let garow = &mut ga[(bi * m + i) * k..(bi * m + i + 1) * k];
                            if transpose_b {
                                // b is [n, k]
                                for (j, &gij) in grow.iter().enumerate() {
                                    if gij == T::zero() {
                                        continue;
                                    }
                                    let brow = &bb[j * k..(j + 1) * k];
                                    for (o, &y) in garow.iter_mut().zip(brow) {
                                        *o = *o + gij * y;
                                    }
                                }
                            } else {
                                // b is [k, n]
                                for (p, o) in garow.iter_mut().enumerate() {
                                    let brow = &bb[p * n..(p + 1) * n];
                                    *o = *o + grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                                }
                            }
                        }
                    }
                }
                if needs(*b) {
                    let gb = slot(grads, *b, numel(*b));
                    for bi in 0..batch {
                        let off = if b_batched { bi * k * n } else { 0 };
                        let gbb = &mut gb[off..off + k * n];
                        for i in 0..m {
                            let arow = &av[(bi * m + i) * k..(bi * m + i + 1) * k];
                            let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                            if transpose_b {
                                for (j, &gij) in grow.iter().enumerate() {
                                    if gij == T::zero() {
                                        continue;
                                    }
                                    let dst = &mut gbb[j * k..(j + 1) * k];
                                    for (o, &x) in dst.iter_mut().zip(arow) {
                                        *o = *o + gij * x;
                                    }
                                }
                            } else {
                                for (p, &x) in arow.iter().enumerate() {
                                    if x == T::zero() {
                                        continue;
                                    }
                                    let dst = &mut gbb[p * n..(p + 1) * n];
                                    for (o, &gij) in dst.iter_mut().zip(grow) {
                                        *o = *o + x * gij;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Add { a, b, broadcast } => {
                if needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(o, &e)| *o = *o + e);
                }
                if needs(*b) {
                    let nb = numel(*b);
                    let gb = slot(grads, *b, nb);
                    if *broadcast {
                        for (i, &e) in g.iter().enumerate() {
                            gb[i % nb] = gb[i % nb] + e;
                        }
                    } else {
                        gb.iter_mut().zip(g).for_each(|(o, &e)| *o = *o + e);
                    }
                }
            }
            Op::Sub { a, b } => {
                if needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(o, &e)| *o = *o + e);
                }
                if needs(*b) {
                    let gb = slot(grads, *b, g.len());
                    gb.iter_mut().zip(g).for_each(|(o, &e)| *o = *o - e);
                }
            }
            Op::Mul { a, b } => {
                if needs(*a) {
                    let bv = val(*b);
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * bv[i];
                    }
                }
                if needs(*b) {
                    let av = val(*a);
                    let gb = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] = gb[i] + g[i] * av[i];
                    }
                }
            }
            Op::Scale { x, factor } => {
                let gx = slot(grads, *x, g.len());
                gx.iter_mut()
                    .zip(g)
                    .for_each(|(o, &e)| *o = *o + e * *factor);
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] = gx[i] + g[i] * y[i] * (T::one() - y[i]);
                }
            }
            Op::Relu { x } => {
                let xv = val(*x);
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    if xv[i] > T::zero() {
                        gx[i] = gx[i] + g[i];
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = val(*x);
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] = gx[i] + g[i] * gelu_parts(xv[i]).1;
                }
            }
            Op::Softplus { x } => {
                let xv = val(*x);
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] = gx[i] + g[i] * sigmoid(xv[i]);
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let w = last_dim(node.value.shape()).max(1);
                let gx = slot(grads, *x, g.len());
                for r in 0..g.len() / w {
                    let yr = &y[r * w..(r + 1) * w];
                    let gr = &g[r * w..(r + 1) * w];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..w {
                        gx[r * w + j] = gx[r * w + j] + yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::MaskedFill { x, mask } => {
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    if !mask[i] {
                        gx[i] = gx[i] + g[i];
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let w = last_dim(node.value.shape());
                let gam = val(*gamma);
                if needs(*x) {
                    let gx = slot(grads, *x, g.len());
                    let wn = c::<T>(w as f64);
                    for r in 0..rstd.len() {
                        let gr = &g[r * w..(r + 1) * w];
                        let hr = &xhat[r * w..(r + 1) * w];
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..w {
                            let d = gr[j] * gam[j];
                            mean_d = mean_d + d;
                            mean_dh = mean_dh + d * hr[j];
                        }
                        mean_d = mean_d / wn;
                        mean_dh = mean_dh / wn;
                        for j in 0..w {
                            let d = gr[j] * gam[j];
                            gx[r * w + j] =
                                gx[r * w + j] + rstd[r] * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
                if needs(*gamma) {
                    let gg = slot(grads, *gamma, w);
                    for (i, &e) in g.iter().enumerate() {
                        gg[i % w] = gg[i % w] + e * xhat[i];
                    }
                }
                if needs(*beta) {
                    let gb = slot(grads, *beta, w);
                    for (i, &e) in g.iter().enumerate() {
                        gb[i % w] = gb[i % w] + e;
                    }
                }
            }
            Op::Dropout { x, scale } => {
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] = gx[i] + g[i] * scale[i];
                }
            }
            Op::GatherRows { x, idx } => {
                let w = node.value.row_len();
                let gx = slot(grads, *x, numel(*x));
                for (r, &i) in idx.iter().enumerate() {
                    let src = &g[r * w..(r + 1) * w];
                    let dst = &mut gx[i * w..(i + 1) * w];
                    dst.iter_mut().zip(src).for_each(|(o, &e)| *o = *o + e);
                }
            }
            Op::ConcatRows { a, b } => {
                let na = numel(*a);
                if needs(*a) {
                    let ga = slot(grads, *a, na);
                    ga.iter_mut().zip(&g[..na]).for_each(|(o, &e)| *o = *o + e);
                }
                if needs(*b) {
                    let gb = slot(grads, *b, g.len() - na);
                    gb.iter_mut().zip(&g[na..]).for_each(|(o, &e)| *o = *o + e);
                }
            }
            Op::SumAll { x } => {
                let n = numel(*x);
                let gx = slot(grads, *x, n);
                gx.iter_mut().for_each(|o| *o = *o + g[0]);
            }
            Op::MeanAll { x } => {
                let n = numel(*x);
                let share = g[0] / c::<T>(n.max(1) as f64);
                let gx = slot(grads, *x, n);
                gx.iter_mut().for_each(|o| *o = *o + share);
            }
            Op::MeanRows { x } => {
                let n = numel(*x);
                let d = g.len();
                let inv = T::one() / c::<T>((n / d) as f64);
                let gx = slot(grads, *x, n);
                for (i, o) in gx.iter_mut().enumerate() {
                    *o = *o + g[i % d] * inv;
                }
            }
            Op::Aggregate { x, csr } => {
                let w = node.value.row_len();
                let gx = slot(grads, *x, numel(*x));
                for r in 0..csr.n_rows() {
                    let src = &g[r * w..(r + 1) * w];
                    for &col in csr.row(r) {
                        let dst = &mut gx[col * w..(col + 1) * w];
                        dst.iter_mut().zip(src).for_each(|(o, &e)| *o = *o + e);
                    }
                }
            }
            Op::ScaleRows { x, factors } => {
                let w = node.value.row_len();
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] = gx[i] + g[i] * factors[i / w];
                }
            }
            Op::RowDot { a, b } => {
                let d = self.nodes[a.0].value.row_len();
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if !needs(this) {
                        continue;
                    }
                    let ov = val(other).to_vec();
                    let gt = slot(grads, this, ov.len());
                    for i in 0..ov.len() {
                        gt[i] = gt[i] + g[i / d] * ov[i];
                    }
                }
            }
            Op::Permute { x, perm } => {
                let gx = slot(grads, *x, g.len());
                for (i, &p) in perm.iter().enumerate() {
                    gx[p] = gx[p] + g[i];
                }
            }
            Op::Reshape { x } => {
                let gx = slot(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(o, &e)| *o = *o + e);
            }
        }
    }
}
