//! Wengert-list autodiff.
//!
//! Every op appends a node holding its forward value; nodes are therefore
//! already in topological order and `backward` is a single reverse sweep.

use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        tb: bool,
        batch: usize,
        b_batched: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias {
        x: usize,
        bias: usize,
    },
    Scale {
        x: usize,
        c: T,
    },
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    Reshape(usize),
    Gather {
        x: usize,
        idx: Vec<usize>,
        width: usize,
    },
    Concat(Vec<usize>),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(usize),
    Exp(usize),
    Ln(usize),
    Abs(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    Cosine {
        a: usize,
        b: usize,
        ah: Vec<T>,
        bh: Vec<T>,
        na: Vec<T>,
        nb: Vec<T>,
        floor: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// A gradient tape. Confined to one thread; build one per step.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn permuted_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    axes.iter().map(|&a| shape[a]).collect()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `out[j] = data[src(j)]` where out is `data` with axes permuted.
fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape = permuted_shape(shape, axes);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Graph<T> {
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, mut value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        value.grad = None;
        value.requires_grad = requires_grad;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false, None)
    }

    /// A leaf that receives a gradient but is not backed by a parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true, None)
    }

    /// Copies parameter `id` onto the tape (a counted read).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let value = store.get(id).clone();
        self.leaf(value, true, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---------------------------------------------------------------- ops

    /// Matrix product.
    ///
    /// `a` is `[.., m, k]`. When `b` is rank 2 (`[k, n]`, or `[n, k]` when
    /// `transpose_b`) it is shared across all leading dimensions of `a`; when
    /// `b` is rank 3 it must carry the same batch as a rank-3 `a`.
    pub fn matmul_t(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || shape_err("matmul", &sa, &sb);
        if sa.len() < 2 || !(sb.len() == 2 || sb.len() == 3) {
            return Err(err());
        }
        let (bk, bn) = {
            let r = sb.len();
            if transpose_b {
                (sb[r - 1], sb[r - 2])
            } else {
                (sb[r - 2], sb[r - 1])
            }
        };
        let k = sa[sa.len() - 1];
        if k != bk {
            return Err(err());
        }
        let (batch, m, b_batched) = if sb.len() == 2 {
            (1, sa[..sa.len() - 1].iter().product::<usize>(), false)
        } else {
            if sa.len() != 3 || sa[0] != sb[0] {
                return Err(err());
            }
            (sa[0], sa[1], true)
        };
        let n = bn;
        let (rsb, csb) = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for bi in 0..batch {
                let a_off = bi * m * k;
                let b_off = if b_batched { bi * k * n } else { 0 };
                T::gemm(
                    m,
                    k,
                    n,
                    &ad[a_off..a_off + m * k],
                    k as isize,
                    1,
                    &bd[b_off..b_off + k * n],
                    rsb,
                    csb,
                    T::zero(),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                tb: transpose_b,
                batch,
                b_batched,
                m,
                k,
                n,
            },
            &[a.0, b.0],
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false)
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        Ok(self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.zip_same(a, b, "add", |x, y| x + y)?;
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    /// `x + bias` with `bias` broadcast along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let w = last_dim(self.shape(x));
        if self.value(bias).numel() != w {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let bd = self.data(bias);
        let data: Vec<T> = self
            .data(x)
            .chunks(w)
            .flat_map(|row| row.iter().zip(bd).map(|(&a, &b)| a + b))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::AddBias { x: x.0, bias: bias.0 }, &[x.0, bias.0]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::c(c);
        let data = self.data(x).iter().map(|&v| v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Scale { x: x.0, c }, &[x.0])
    }

    /// Generalized transpose.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || seen[a]) {
            return Err(shape_err("permute", &shape, axes));
        }
        for &a in axes {
            seen[a] = true;
        }
        let data = permute_data(self.data(x), &shape, axes);
        let value = Tensor::new(permuted_shape(&shape, axes), data)?;
        Ok(self.push(
            value,
            Op::Permute {
                x: x.0,
                axes: axes.to_vec(),
            },
            &[x.0],
        ))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(shape_err("transpose", self.shape(x), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x.0), &[x.0]))
    }

    /// Rows of `x` (viewed as `[len / width, width]`) picked by `idx`;
    /// indices may repeat. Output is `[idx.len(), width]`.
    pub fn gather(&mut self, x: Var, idx: &[usize], width: usize) -> Result<Var> {
        let src = self.data(x);
        if width == 0 || !src.len().is_multiple_of(width) {
            return Err(shape_err("gather", self.shape(x), &[width]));
        }
        let rows = src.len() / width;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "gather index {bad} out of range for {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let value = Tensor::new([idx.len(), width], data)?;
        Ok(self.push(
            value,
            Op::Gather {
                x: x.0,
                idx: idx.to_vec(),
                width,
            },
            &[x.0],
        ))
    }

    /// Concatenate along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(shape_err("concat", &first, s));
            }
            rows += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = first;
        shape[0] = rows;
        let value = Tensor::new(shape, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(value, Op::Concat(ids.clone()), &ids))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let w = last_dim(self.shape(x));
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(w) {
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Softmax(x.0), &[x.0])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let w = last_dim(self.shape(x));
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(w) {
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::LogSoftmax(x.0), &[x.0])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let w = last_dim(self.shape(x));
        if self.value(gamma).numel() != w || self.value(beta).numel() != w {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::c(eps);
        let wt = T::c(w as f64);
        let src = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(src.len() / w);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(w) {
            let mean = row.iter().copied().sum::<T>() / wt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / wt;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            &[x.0, gamma.0, beta.0],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a) = (T::c(GELU_C), T::c(GELU_A));
        let half = T::c(0.5);
        let data = self
            .data(x)
            .iter()
            .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu(x.0), &[x.0])
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, op, &[x.0])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, T::exp, Op::Exp(x.0))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, T::ln, Op::Ln(x.0))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, T::abs, Op::Abs(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x.0))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::c(self.value(x).numel() as f64);
        let s = self.data(x).iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::Mean(x.0), &[x.0])
    }

    /// Pairwise cosine similarities between the rows of `a` (`[n, d]`) and
    /// `b` (`[m, d]`); row norms are floored at `floor`.
    pub fn cosine(&mut self, a: Var, b: Var, floor: f64) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("cosine", &sa, &sb));
        }
        let floor = T::c(floor);
        let d = sa[1];
        let normalize = |src: &[T]| {
            let mut hat = src.to_vec();
            let mut norms = Vec::with_capacity(src.len() / d);
            for row in hat.chunks_mut(d) {
                let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
                norms.push(n);
                row.iter_mut().for_each(|v| *v /= n);
            }
            (hat, norms)
        };
        let (ah, na) = normalize(self.data(a));
        let (bh, nb) = normalize(self.data(b));
        let (n, m) = (sa[0], sb[0]);
        let mut out = vec![T::zero(); n * m];
        T::gemm(n, d, m, &ah, d as isize, 1, &bh, 1, d as isize, T::zero(), &mut out);
        let value = Tensor::new([n, m], out)?;
        Ok(self.push(
            value,
            Op::Cosine {
                a: a.0,
                b: b.0,
                ah,
                bh,
                na,
                nb,
                floor,
            },
            &[a.0, b.0],
        ))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds gradients of every parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(Some(g))) = (node.param, self.grads.get(i)) {
                store.add_grad(id, g);
            }
        }
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn gbuf<'a>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], i: usize) -> &'a mut Vec<T> {
        grads[i].get_or_insert_with(|| vec![T::zero(); nodes[i].value.numel()])
    }

    fn acc(&mut self, i: usize, f: impl FnOnce(&mut [T], &[Node<T>])) {
        if !self.needs(i) {
            return;
        }
        let nodes = &self.nodes;
        let buf = Self::gbuf(&mut self.grads, nodes, i);
        f(buf, nodes);
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        // The op is moved out temporarily so the rest of the graph can be
        // borrowed while gradients are written.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                tb,
                batch,
                b_batched,
                m,
                k,
                n,
            } => {
                self.acc(a, |ga, nodes| {
                    let bd = nodes[b].value.data();
                    // dA = G * op(B)^T
                    let (rs, cs) = if tb { (k as isize, 1) } else { (1, n as isize) };
                    for bi in 0..batch {
                        let b_off = if b_batched { bi * k * n } else { 0 };
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            n as isize,
                            1,
                            &bd[b_off..b_off + k * n],
                            rs,
                            cs,
                            T::one(),
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                });
                self.acc(b, |gb, nodes| {
                    let ad = nodes[a].value.data();
                    for bi in 0..batch {
                        let b_off = if b_batched { bi * k * n } else { 0 };
                        let a_blk = &ad[bi * m * k..(bi + 1) * m * k];
                        let g_blk = &g[bi * m * n..(bi + 1) * m * n];
                        let out = &mut gb[b_off..b_off + k * n];
                        if tb {
                            // dB (n x k) = G^T * A
                            T::gemm(n, m, k, g_blk, 1, n as isize, a_blk, k as isize, 1, T::one(), out);
                        } else {
                            // dB (k x n) = A^T * G
                            T::gemm(k, m, n, a_blk, 1, k as isize, g_blk, n as isize, 1, T::one(), out);
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                self.acc(a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                self.acc(b, |gb, _| gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            }
            &Op::Sub(a, b) => {
                self.acc(a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                self.acc(b, |gb, _| gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            &Op::Mul(a, b) => {
                self.acc(a, |ga, nodes| {
                    let bd = nodes[b].value.data();
                    for ((x, &gy), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *x += gy * bv;
                    }
                });
                self.acc(b, |gb, nodes| {
                    let ad = nodes[a].value.data();
                    for ((x, &gy), &av) in gb.iter_mut().zip(g).zip(ad) {
                        *x += gy * av;
                    }
                });
            }
            &Op::AddBias { x, bias } => {
                self.acc(x, |gx, _| gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b));
                self.acc(bias, |gb, _| {
                    let w = gb.len();
                    for row in g.chunks(w) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                });
            }
            &Op::Scale { x, c } => {
                self.acc(x, |gx, _| gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * c));
            }
            Op::Permute { x, axes } => {
                let x = *x;
                let out_shape = self.nodes[i].value.shape().to_vec();
                let back = permute_data(g, &out_shape, &inverse_axes(axes));
                self.acc(x, |gx, _| gx.iter_mut().zip(&back).for_each(|(a, &b)| *a += b));
            }
            &Op::Reshape(x) => {
                self.acc(x, |gx, _| gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b));
            }
            Op::Gather { x, idx, width } => {
                let (x, w) = (*x, *width);
                self.acc(x, |gx, _| {
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = &mut gx[src * w..(src + 1) * w];
                        dst.iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(a, &b)| *a += b);
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.numel();
                    let slice = &g[offset..offset + len];
                    self.acc(p, |gp, _| gp.iter_mut().zip(slice).for_each(|(a, &b)| *a += b));
                    offset += len;
                }
            }
            &Op::Softmax(x) => {
                let w = last_dim(self.nodes[i].value.shape());
                let y = self.nodes[i].value.data().to_vec();
                self.acc(x, |gx, _| {
                    for ((gr, yr), dst) in g.chunks(w).zip(y.chunks(w)).zip(gx.chunks_mut(w)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..w {
                            dst[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmax(x) => {
                let w = last_dim(self.nodes[i].value.shape());
                let y = self.nodes[i].value.data().to_vec();
                self.acc(x, |gx, _| {
                    for ((gr, yr), dst) in g.chunks(w).zip(y.chunks(w)).zip(gx.chunks_mut(w)) {
                        let total: T = gr.iter().copied().sum();
                        for j in 0..w {
                            dst[j] += gr[j] - yr[j].exp() * total;
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
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let w = last_dim(self.nodes[i].value.shape());
                let gam = self.nodes[gamma].value.data().to_vec();
                self.acc(gamma, |gg, _| {
                    for (gr, hr) in g.chunks(w).zip(xhat.chunks(w)) {
                        for j in 0..w {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.acc(beta, |gb, _| {
                    for gr in g.chunks(w) {
                        gb.iter_mut().zip(gr).for_each(|(a, &b)| *a += b);
                    }
                });
                self.acc(x, |gx, _| {
                    let wt = T::c(w as f64);
                    for (r, ((gr, hr), dst)) in g.chunks(w).zip(xhat.chunks(w)).zip(gx.chunks_mut(w)).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..w {
                            let dh = gr[j] * gam[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= wt;
                        m2 /= wt;
                        for j in 0..w {
                            let dh = gr[j] * gam[j];
                            dst[j] += rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                });
            }
            &Op::Gelu(x) => {
                let (c, a) = (T::c(GELU_C), T::c(GELU_A));
                let half = T::c(0.5);
                let three = T::c(3.0);
                self.acc(x, |gx, nodes| {
                    let xd = nodes[x].value.data();
                    for ((dst, &gy), &v) in gx.iter_mut().zip(g).zip(xd) {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let du = c * (T::one() + three * a * v * v);
                        *dst += gy * (half * (T::one() + t) + half * v * (T::one() - t * t) * du);
                    }
                });
            }
            &Op::Exp(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc(x, |gx, _| {
                    for ((dst, &gy), &yv) in gx.iter_mut().zip(g).zip(&y) {
                        *dst += gy * yv;
                    }
                });
            }
            &Op::Ln(x) => {
                self.acc(x, |gx, nodes| {
                    let xd = nodes[x].value.data();
                    for ((dst, &gy), &v) in gx.iter_mut().zip(g).zip(xd) {
                        *dst += gy / v;
                    }
                });
            }
            &Op::Abs(x) => {
                self.acc(x, |gx, nodes| {
                    let xd = nodes[x].value.data();
                    for ((dst, &gy), &v) in gx.iter_mut().zip(g).zip(xd) {
                        if v > T::zero() {
                            *dst += gy;
                        } else if v < T::zero() {
                            *dst -= gy;
                        }
                    }
                });
            }
            &Op::Relu(x) => {
                self.acc(x, |gx, nodes| {
                    let xd = nodes[x].value.data();
                    for ((dst, &gy), &v) in gx.iter_mut().zip(g).zip(xd) {
                        if v > T::zero() {
                            *dst += gy;
                        }
                    }
                });
            }
            &Op::Sum(x) => {
                let s = g[0];
                self.acc(x, |gx, _| gx.iter_mut().for_each(|a| *a += s));
            }
            &Op::Mean(x) => {
                let s = g[0] / T::c(self.nodes[x].value.numel() as f64);
                self.acc(x, |gx, _| gx.iter_mut().for_each(|a| *a += s));
            }
            Op::Cosine {
                a,
                b,
                ah,
                bh,
                na,
                nb,
                floor,
            } => {
                let (a, b) = (*a, *b);
                let d = self.nodes[a].value.shape()[1];
                let n = na.len();
                let m = nb.len();
                // Gradient w.r.t. the unit vectors, then through normalization.
                let through_norm = |dhat: &mut [T], hat: &[T], norms: &[T]| {
                    for ((row, hrow), &nr) in dhat.chunks_mut(d).zip(hat.chunks(d)).zip(norms.iter()) {
                        if nr > *floor {
                            let dot: T = row.iter().zip(hrow).map(|(&x, &y)| x * y).sum();
                            for j in 0..d {
                                row[j] = (row[j] - hrow[j] * dot) / nr;
                            }
                        } else {
                            row.iter_mut().for_each(|v| *v /= nr);
                        }
                    }
                };
                if self.needs(a) {
                    let mut dah = vec![T::zero(); n * d];
                    T::gemm(n, m, d, g, m as isize, 1, bh, d as isize, 1, T::zero(), &mut dah);
                    through_norm(&mut dah, ah, na);
                    self.acc(a, |ga, _| ga.iter_mut().zip(&dah).for_each(|(x, &y)| *x += y));
                }
                if self.needs(b) {
                    let mut dbh = vec![T::zero(); m * d];
                    T::gemm(m, n, d, g, 1, m as isize, ah, d as isize, 1, T::zero(), &mut dbh);
                    through_norm(&mut dbh, bh, nb);
                    self.acc(b, |gb, _| gb.iter_mut().zip(&dbh).for_each(|(x, &y)| *x += y));
                }
            }
        }
        self.nodes[i].op = op;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let y = g.matmul(i2, m).unwrap();
        assert_eq!(g.data(y), &[1., 2., 3., 4.]);

        let p = g.constant(t(&[2, 2], &[1., 0., 0., 0.]));
        let q = g.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let y = g.matmul(p, q).unwrap();
        assert_eq!(g.data(y), &[5., 6., 0., 0.]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::seeded(3);
        let a = Tensor::<f64>::randn([4, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn([3, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let y = g.matmul(va, vb).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a.data()[i * 3 + k] * b.data()[k * 5 + j];
                }
                assert!((g.data(y)[i * 5 + j] - s).abs() <= 1e-12);
            }
        }
        let bt = g.transpose(vb).unwrap();
        let y2 = g.matmul_t(va, bt, true).unwrap();
        assert_eq!(g.data(y), g.data(y2));
    }

    #[test]
    fn matmul_shape_error() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0., 0., 0.]));
        let y = g.softmax(x);
        for &v in g.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[0., 2f64.ln()]));
        let y = g.softmax(x);
        assert!((g.data(y)[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((g.data(y)[1] - 2.0 / 3.0).abs() < 1e-15);
        let x = g.constant(t(&[2], &[1000., 0.]));
        let y = g.softmax(x);
        assert_eq!(g.data(y)[0], 1.0);
        assert!(g.data(y)[1] >= 0.0 && g.data(y)[1] < 1e-300);
    }

    #[test]
    fn backward_basics() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[3], &[1., 2., 3.]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1., 1., 1.]);

        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.variable(Tensor::scalar(-2.0));
        let p = g.mul(x, y).unwrap();
        g.backward(p).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[-2.0]);
        assert_eq!(g.grad(y).unwrap(), &[3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[1., 2.]));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    #[allow(clippy::identity_op, clippy::erasing_op)]
    fn permute_roundtrip() {
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let out = permute_data(&data, &[2, 3, 4], &[2, 0, 1]);
        // out[k][i][j] = in[i][j][k]
        assert_eq!(out[0 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4]);
        assert_eq!(out[3 * 6 + 1 * 3 + 0], data[1 * 12 + 0 * 4 + 3]);
        let back = permute_data(&out, &[4, 2, 3], &inverse_axes(&[2, 0, 1]));
        assert_eq!(back, data);
    }
}
