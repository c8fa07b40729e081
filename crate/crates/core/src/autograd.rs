//! Reverse-mode automatic differentiation over a per-sample tape.
//!
//! A [`Graph`] records every operation of one forward evaluation. Parameters
//! enter through [`Graph::param`], data through [`Graph::constant`]; calling
//! [`Graph::backward`] on a scalar node returns gradients for every parameter
//! the scalar depends on. Batches are handled by building one graph per
//! example and merging the resulting [`Gradients`].

use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{gemm_acc, matmul, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Spatial geometry of a 2-D convolution over a `[C, H*W]` feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Silu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Upsample2 { x: Var, h: usize, w: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Transpose(Var),
    Reshape(Var),
    SumAll(Var),
    SumSquares(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Same value as `v` with no gradient path back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: self.params.get(id).clone(),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` where `ta`/`tb` select transposition.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = matmul(self.value(a), ta, self.value(b), tb);
        self.push(value, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    fn zip_values(&self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "{what}: shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_values(a, b, "add", |p, q| p + q);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_values(a, b, "sub", |p, q| p - q);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_values(a, b, "mul", |p, q| p * q);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// `a[m, n] + b[n]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (x, bias) = (self.value(a), self.value(b));
        let n = x.cols();
        assert_eq!(bias.len(), n, "add_row: bias length");
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias.data()) {
                *o = *o + bv;
            }
        }
        self.push(out, Op::AddRow(a, b), &[a, b])
    }

    /// `a[m, n] + b[m]`, broadcasting `b` over columns.
    pub fn add_col(&mut self, a: Var, b: Var) -> Var {
        let (x, bias) = (self.value(a), self.value(b));
        let (m, n) = (x.rows(), x.cols());
        assert_eq!(bias.len(), m, "add_col: bias length");
        let mut out = x.clone();
        for (row, &bv) in out.data_mut().chunks_mut(n).zip(bias.data()) {
            for o in row.iter_mut() {
                *o = *o + bv;
            }
        }
        self.push(out, Op::AddCol(a, b), &[a, b])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu_fwd);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.cols();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    /// Normalizes each row, then applies per-column `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), n, "layer_norm: gamma length");
        let mut out = xv.clone();
        let mut means = Vec::with_capacity(xv.rows());
        let mut rstds = Vec::with_capacity(xv.rows());
        let inv_n = T::lit(1.0 / n as f64);
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rstd = T::one() / (var + T::lit(eps)).sqrt();
            for (j, o) in row.iter_mut().enumerate() {
                *o = (*o - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            &[x, gamma, beta],
        )
    }

    /// Group normalization of a `[C, H*W]` map with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xv = self.value(x);
        let (c, hw) = (xv.rows(), xv.cols());
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels, {groups} groups");
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let per = c / groups;
        let mut out = xv.clone();
        let mut means = Vec::with_capacity(groups);
        let mut rstds = Vec::with_capacity(groups);
        let inv_n = T::lit(1.0 / (per * hw) as f64);
        for (gi, chunk) in out.data_mut().chunks_mut(per * hw).enumerate() {
            let mean = chunk.iter().copied().sum::<T>() * inv_n;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rstd = T::one() / (var + T::lit(eps)).sqrt();
            for (ci, row) in chunk.chunks_mut(hw).enumerate() {
                let ch = gi * per + ci;
                for o in row.iter_mut() {
                    *o = (*o - mean) * rstd * g[ch] + b[ch];
                }
            }
            means.push(mean);
            rstds.push(rstd);
        }
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            &[x, gamma, beta],
        )
    }

    /// Convolution of `x[cin, h*w]` with `w[cout, cin*k*k]` and optional bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), geom.cin, "conv2d: input channels");
        assert_eq!(xv.cols(), geom.h * geom.w, "conv2d: input spatial size");
        let wv = self.value(w);
        assert_eq!(
            wv.cols(),
            geom.cin * geom.kernel * geom.kernel,
            "conv2d: weight fan-in"
        );
        let cout = wv.rows();
        let ohw = geom.out_h() * geom.out_w();
        let mut out = Tensor::zeros(&[cout, ohw]);
        if geom.is_pointwise() {
            gemm_acc(wv, false, xv, false, T::zero(), out.data_mut());
        } else {
            let cols = im2col(xv, geom);
            gemm_acc(wv, false, &cols, false, T::zero(), out.data_mut());
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (row, &bv) in out.data_mut().chunks_mut(ohw).zip(bias) {
                for o in row.iter_mut() {
                    *o = *o + bv;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Nearest-neighbour 2x upsampling of `x[c, h*w]`.
    pub fn upsample2(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        let c = xv.rows();
        assert_eq!(xv.cols(), h * w, "upsample2: spatial size");
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[c, h2 * w2]);
        for ch in 0..c {
            let src = xv.row_slice(ch);
            let dst = &mut out.data_mut()[ch * h2 * w2..(ch + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        self.push(out, Op::Upsample2 { x, h, w }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_rows(&tensors).expect("concat_rows: column mismatch");
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&v| self.value(v).cols()).sum();
        let mut out = Tensor::zeros(&[rows, total]);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols: row mismatch");
            let c = pv.cols();
            for r in 0..rows {
                out.data_mut()[r * total + off..r * total + off + c]
                    .copy_from_slice(pv.row_slice(r));
            }
            off += c;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.value(x).slice_rows(start, end);
        self.push(out, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let width = end - start;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * cols + start..r * cols + end]);
        }
        let out = Tensor::new(&[rows, width], data).expect("slice_cols");
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self
            .value(x)
            .clone()
            .reshape(shape)
            .expect("reshape: element count");
        self.push(out, Op::Reshape(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::full(&[1], s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, T::lit(1.0 / n as f64))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_squares();
        self.push(Tensor::full(&[1], s), Op::SumSquares(x), &[x])
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "scalar: node has {} elements", t.len());
        t.data()[0]
    }

    /// Gradients of the scalar `root` with respect to every reached parameter.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut pgrads = Gradients::empty(self.params.len());
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, dy, &mut grads, &mut pgrads);
        }
        pgrads
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        dy: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        pgrads: &mut Gradients<T>,
    ) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => pgrads.accumulate_param(*id, dy),
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    let da = if *ta {
                        matmul(bv, *tb, &dy, true)
                    } else {
                        matmul(&dy, false, bv, !*tb)
                    };
                    let da = da.reshape(av.shape()).expect("matmul grad shape");
                    self.acc(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = if *tb {
                        matmul(&dy, true, av, *ta)
                    } else {
                        matmul(av, !*ta, &dy, false)
                    };
                    let db = db.reshape(bv.shape()).expect("matmul grad shape");
                    self.acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *b, dy.clone());
                self.acc(grads, *a, dy);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *b, dy.map(|g| -g));
                self.acc(grads, *a, dy);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = zip(&dy, bv, |g, q| g * q);
                let db = zip(&dy, av, |g, p| g * p);
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, dy.map(|g| g * s));
            }
            Op::AddRow(a, b) => {
                let bshape = self.value(*b).shape().to_vec();
                let n = dy.cols();
                let mut db = vec![T::zero(); n];
                for row in dy.data().chunks(n) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d = *d + g;
                    }
                }
                self.acc(grads, *b, Tensor::new(&bshape, db).expect("bias shape"));
                self.acc(grads, *a, dy);
            }
            Op::AddCol(a, b) => {
                let bshape = self.value(*b).shape().to_vec();
                let n = dy.cols();
                let db: Vec<T> = dy.data().chunks(n).map(|r| r.iter().copied().sum()).collect();
                self.acc(grads, *b, Tensor::new(&bshape, db).expect("bias shape"));
                self.acc(grads, *a, dy);
            }
            Op::Silu(a) => {
                let xv = self.value(*a);
                let dx = zip(&dy, xv, |g, x| {
                    let s = sigmoid(x);
                    g * s * (T::one() + x * (T::one() - s))
                });
                self.acc(grads, *a, dx);
            }
            Op::Gelu(a) => {
                let xv = self.value(*a);
                let dx = zip(&dy, xv, |g, x| g * gelu_grad(x));
                self.acc(grads, *a, dx);
            }
            Op::SoftmaxRows(a) => {
                let n = y.cols();
                let mut dx = dy.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot = drow.iter().zip(yrow).fold(T::zero(), |acc, (&g, &p)| acc + g * p);
                    for (d, &p) in drow.iter_mut().zip(yrow) {
                        *d = p * (*d - dot);
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let g = self.value(*gamma);
                let n = xv.cols();
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                let mut dx = Tensor::zeros(xv.shape());
                let inv_n = T::lit(1.0 / n as f64);
                for r in 0..xv.rows() {
                    let xr = xv.row_slice(r);
                    let dr = dy.row_slice(r);
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..n {
                        let xhat = (xr[j] - mu) * rs;
                        dgamma[j] = dgamma[j] + dr[j] * xhat;
                        dbeta[j] = dbeta[j] + dr[j];
                        let dxhat = dr[j] * g.data()[j];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                    }
                    let out = &mut dx.data_mut()[r * n..(r + 1) * n];
                    for j in 0..n {
                        let xhat = (xr[j] - mu) * rs;
                        let dxhat = dr[j] * g.data()[j];
                        out[j] = rs * (dxhat - sum_dxhat * inv_n - xhat * sum_dxhat_xhat * inv_n);
                    }
                }
                let gshape = g.shape().to_vec();
                let bshape = self.value(*beta).shape().to_vec();
                self.acc(grads, *gamma, Tensor::new(&gshape, dgamma).expect("gamma"));
                self.acc(grads, *beta, Tensor::new(&bshape, dbeta).expect("beta"));
                self.acc(grads, *x, dx);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let g = self.value(*gamma).data();
                let (c, hw) = (xv.rows(), xv.cols());
                let per = c / groups;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = Tensor::zeros(xv.shape());
                let inv_n = T::lit(1.0 / (per * hw) as f64);
                for gi in 0..*groups {
                    let (mu, rs) = (mean[gi], rstd[gi]);
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for ch in gi * per..(gi + 1) * per {
                        let xr = xv.row_slice(ch);
                        let dr = dy.row_slice(ch);
                        for j in 0..hw {
                            let xhat = (xr[j] - mu) * rs;
                            dgamma[ch] = dgamma[ch] + dr[j] * xhat;
                            dbeta[ch] = dbeta[ch] + dr[j];
                            let dxhat = dr[j] * g[ch];
                            sum_dxhat = sum_dxhat + dxhat;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        }
                    }
                    for ch in gi * per..(gi + 1) * per {
                        let xr = xv.row_slice(ch);
                        let dr = dy.row_slice(ch);
                        let out = &mut dx.data_mut()[ch * hw..(ch + 1) * hw];
                        for j in 0..hw {
                            let xhat = (xr[j] - mu) * rs;
                            let dxhat = dr[j] * g[ch];
                            out[j] =
                                rs * (dxhat - sum_dxhat * inv_n - xhat * sum_dxhat_xhat * inv_n);
                        }
                    }
                }
                let gshape = self.value(*gamma).shape().to_vec();
                let bshape = self.value(*beta).shape().to_vec();
                self.acc(grads, *gamma, Tensor::new(&gshape, dgamma).expect("gamma"));
                self.acc(grads, *beta, Tensor::new(&bshape, dbeta).expect("beta"));
                self.acc(grads, *x, dx);
            }
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                if let Some(b) = b {
                    let db: Vec<T> = dy
                        .data()
                        .chunks(dy.cols())
                        .map(|r| r.iter().copied().sum())
                        .collect();
                    let bshape = self.value(*b).shape().to_vec();
                    self.acc(grads, *b, Tensor::new(&bshape, db).expect("bias"));
                }
                let cols = if geom.is_pointwise() {
                    None
                } else {
                    Some(im2col(xv, *geom))
                };
                if self.nodes[w.0].requires_grad {
                    let dw = matmul(&dy, false, cols.as_ref().unwrap_or(xv), true);
                    let dw = dw.reshape(wv.shape()).expect("conv weight grad");
                    self.acc(grads, *w, dw);
                }
                if self.nodes[x.0].requires_grad {
                    let dcols = matmul(wv, true, &dy, false);
                    let dx = if geom.is_pointwise() {
                        dcols
                    } else {
                        col2im(&dcols, *geom)
                    };
                    self.acc(grads, *x, dx);
                }
            }
            Op::Upsample2 { x, h, w } => {
                let (h, w) = (*h, *w);
                let c = dy.rows();
                let w2 = 2 * w;
                let mut dx = Tensor::zeros(&[c, h * w]);
                for ch in 0..c {
                    let src = dy.row_slice(ch);
                    let dst = &mut dx.data_mut()[ch * h * w..(ch + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..w2 {
                            let d = &mut dst[(y / 2) * w + xx / 2];
                            *d = *d + src[y * w2 + xx];
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    let g = dy
                        .slice_rows(off, off + r)
                        .reshape(self.value(p).shape())
                        .expect("concat grad");
                    self.acc(grads, p, g);
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let total = dy.cols();
                let rows = dy.rows();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut g = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        g.extend_from_slice(&dy.data()[r * total + off..r * total + off + c]);
                    }
                    let pshape = self.value(p).shape().to_vec();
                    self.acc(grads, p, Tensor::new(&pshape, g).expect("concat grad"));
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let mut g = Tensor::zeros(xv.shape());
                let c = xv.cols();
                g.data_mut()[start * c..start * c + dy.len()].copy_from_slice(dy.data());
                self.acc(grads, *x, g);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut g = Tensor::zeros(xv.shape());
                let (rows, cols) = (xv.rows(), xv.cols());
                let width = dy.cols();
                for r in 0..rows {
                    g.data_mut()[r * cols + start..r * cols + start + width]
                        .copy_from_slice(dy.row_slice(r));
                }
                self.acc(grads, *x, g);
            }
            Op::Transpose(x) => {
                let g = dy.transpose().reshape(self.value(*x).shape()).expect("transpose grad");
                self.acc(grads, *x, g);
            }
            Op::Reshape(x) => {
                let g = dy.reshape(self.value(*x).shape()).expect("reshape grad");
                self.acc(grads, *x, g);
            }
            Op::SumAll(x) => {
                let g = dy.data()[0];
                self.acc(grads, *x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::SumSquares(x) => {
                let g = dy.data()[0] * T::lit(2.0);
                self.acc(grads, *x, self.value(*x).map(|v| v * g));
            }
        }
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::new(b.shape(), data).expect("zip shape")
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let th = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * (T::one() - th * th) * du
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

fn im2col<T: Scalar>(x: &Tensor<T>, g: ConvGeom) -> Tensor<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let mut cols = Tensor::zeros(&[g.cin * k * k, oh * ow]);
    let data = cols.data_mut();
    for ci in 0..g.cin {
        let src = x.row_slice(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut data[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[oy * ow + ox] = src[iy * g.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &Tensor<T>, g: ConvGeom) -> Tensor<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let mut x = Tensor::zeros(&[g.cin, g.h * g.w]);
    let hw = g.h * g.w;
    let data = x.data_mut();
    for ci in 0..g.cin {
        let dst = &mut data[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = cols.row_slice(row);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            let d = &mut dst[iy * g.w + ix as usize];
                            *d = *d + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}
