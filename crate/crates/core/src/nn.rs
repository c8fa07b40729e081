//! Layer building blocks on top of [`Graph`].

use rand::Rng;

use crate::autograd::{ConvGeom, Graph, Var};
use crate::params::{fan_in, randn, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    FanIn,
    Zero,
    Normal(f64),
}

fn init_tensor<T: Scalar>(shape: &[usize], fan: usize, init: Init, rng: &mut impl Rng) -> Tensor<T> {
    match init {
        Init::FanIn => fan_in(shape, fan, rng),
        Init::Zero => Tensor::zeros(shape),
        Init::Normal(std) => randn(shape, std, rng),
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_tensor(&[in_dim, out_dim], in_dim, init, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt, Self::EPS)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        // largest divisor of `channels` not above the requested group count
        let groups = (1..=groups.min(channels))
            .rev()
            .find(|g| channels % g == 0)
            .unwrap_or(1);
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.group_norm(x, gm, bt, self.groups, Self::EPS)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// 2-D convolution over `[cin, h*w]` maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let fan = cin * kernel * kernel;
        Self {
            weight: store.add(
                format!("{name}.weight"),
                init_tensor(&[cout, fan], fan, init, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            cin,
            cout,
            kernel,
            stride,
        }
    }

    /// Returns the output and its spatial size.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, h: usize, w: usize) -> (Var, usize, usize) {
        let geom = ConvGeom {
            cin: self.cin,
            h,
            w,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.kernel / 2,
        };
        let (wt, b) = (g.param(self.weight), g.param(self.bias));
        let y = g.conv2d(x, wt, Some(b), geom);
        (y, geom.out_h(), geom.out_w())
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Scaled dot-product attention; returns the output and per-head
/// probability matrices `[nq, nk]`.
pub fn attention<T: Scalar>(g: &mut Graph<'_, T>, q: Var, k: Var, v: Var, heads: usize) -> (Var, Vec<Var>) {
    let d = g.value(q).cols();
    assert_eq!(d % heads, 0, "attention width {d} not divisible by {heads} heads");
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let dv = g.value(v).cols() / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, (h + 1) * dh),
                g.slice_cols(k, h * dh, (h + 1) * dh),
                g.slice_cols(v, h * dv, (h + 1) * dv),
            )
        };
        let scores = g.matmul_t(qh, false, kh, true);
        let scores = g.scale(scores, scale);
        let p = g.softmax_rows(scores);
        outs.push(g.matmul(p, vh));
        probs.push(p);
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    (out, probs)
}

/// Sinusoidal embedding of an integer timestep.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut v = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        v[i] = T::lit(arg.sin());
        v[half + i] = T::lit(arg.cos());
    }
    Tensor::new(&[1, dim], v).expect("embedding shape")
}
