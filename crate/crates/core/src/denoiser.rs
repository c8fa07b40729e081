//! Latent codec, conditioning context and the noise-predicting UNet.
//!
//! The UNet input is the channel concatenation of the masked-background
//! latent, the noisy latent and the box mask. Uncalibrated reference features
//! condition both encoder and decoder cross-attention. The tokens of the
//! deepest encoder levels form the bundle the calibration branches attend to,
//! and the calibrated features are appended to the decoder context only, so
//! nothing computed from them can feed back into the encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::calibration::Calibration;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image::{BoundingBox, Image};
use crate::nn::{attention, timestep_embedding, Conv2d, GroupNorm, Init, Linear};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fixed invertible map between images and latents: space-to-depth by
/// `factor`, then an orthonormal channel mix (an opponent colour basis
/// combined with a 2-D DCT over each cell), then a uniform scale.
#[derive(Clone, Debug)]
pub struct LatentCodec {
    pub factor: usize,
    pub canvas: usize,
    pub scale: f64,
    mix: Vec<f64>,
}

fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let a = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            m[k * n + i] = a * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos();
        }
    }
    m
}

impl LatentCodec {
    pub fn new(canvas: usize, factor: usize, scale: f64) -> Self {
        let s3 = 3f64.sqrt();
        let s2 = 2f64.sqrt();
        let s6 = 6f64.sqrt();
        let color = [
            [1.0 / s3, 1.0 / s3, 1.0 / s3],
            [1.0 / s2, -1.0 / s2, 0.0],
            [1.0 / s6, 1.0 / s6, -2.0 / s6],
        ];
        let d = dct_matrix(factor);
        let f2 = factor * factor;
        let c = 3 * f2;
        let mut mix = vec![0.0; c * c];
        for a in 0..3 {
            for u in 0..factor {
                for v in 0..factor {
                    let row = a * f2 + u * factor + v;
                    for ch in 0..3 {
                        for dy in 0..factor {
                            for dx in 0..factor {
                                let col = ch * f2 + dy * factor + dx;
                                mix[row * c + col] = color[a][ch] * d[u * factor + dy] * d[v * factor + dx];
                            }
                        }
                    }
                }
            }
        }
        Self {
            factor,
            canvas,
            scale,
            mix,
        }
    }

    pub fn from_config(cfg: &RunConfig) -> Self {
        Self::new(cfg.canvas_size, cfg.latent_factor, cfg.latent_scale)
    }

    pub fn channels(&self) -> usize {
        3 * self.factor * self.factor
    }

    pub fn size(&self) -> usize {
        self.canvas / self.factor
    }

    /// `[C, h*w]` latent of an image.
    pub fn encode<T: Scalar>(&self, image: &Image) -> Result<Tensor<T>> {
        if image.width() != self.canvas || image.height() != self.canvas {
            return Err(Error::Shape {
                what: "latent encode input".into(),
                expected: format!("{0}x{0}", self.canvas),
                actual: format!("{}x{}", image.width(), image.height()),
            });
        }
        let (f, s, c) = (self.factor, self.size(), self.channels());
        let mut out = vec![T::zero(); c * s * s];
        let mut cell = vec![0.0f64; c];
        for cy in 0..s {
            for cx in 0..s {
                for ch in 0..3 {
                    for dy in 0..f {
                        for dx in 0..f {
                            cell[ch * f * f + dy * f + dx] = image.get(cx * f + dx, cy * f + dy, ch) as f64;
                        }
                    }
                }
                for r in 0..c {
                    let v: f64 = self.mix[r * c..(r + 1) * c].iter().zip(&cell).map(|(m, x)| m * x).sum();
                    out[r * s * s + cy * s + cx] = T::lit(v * self.scale);
                }
            }
        }
        Tensor::new(&[c, s * s], out)
    }

    /// Image of a `[C, h*w]` latent, clamped to `[0, 1]`.
    pub fn decode<T: Scalar>(&self, z: &Tensor<T>) -> Result<Image> {
        let (f, s, c) = (self.factor, self.size(), self.channels());
        if z.shape() != [c, s * s] {
            return Err(Error::Shape {
                what: "latent decode input".into(),
                expected: format!("[{c}, {}]", s * s),
                actual: format!("{:?}", z.shape()),
            });
        }
        let mut img = Image::zeros(self.canvas, self.canvas);
        let mut cell = vec![0.0f64; c];
        for cy in 0..s {
            for cx in 0..s {
                cell.iter_mut().for_each(|v| *v = 0.0);
                for r in 0..c {
                    let zr = z.data()[r * s * s + cy * s + cx].as_f64() / self.scale;
                    for (col, v) in cell.iter_mut().enumerate() {
                        *v += self.mix[r * c + col] * zr;
                    }
                }
                for ch in 0..3 {
                    for dy in 0..f {
                        for dx in 0..f {
                            let v = cell[ch * f * f + dy * f + dx] as f32;
                            img.set(cx * f + dx, cy * f + dy, ch, v);
                        }
                    }
                }
            }
        }
        img.clamp01();
        Ok(img)
    }
}

/// Box mask at latent resolution as a `[1, h*w]` tensor of zeros and ones.
pub fn foreground_mask<T: Scalar>(bbox: &BoundingBox, canvas: usize, factor: usize) -> Tensor<T> {
    let m = bbox.to_latent_mask(canvas, canvas, factor);
    let s = canvas / factor;
    Tensor::new(&[1, s * s], m.iter().map(|&v| T::lit(v as f64)).collect()).expect("mask shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    UncalibratedGlobal,
    UncalibratedLocal,
    CalibratedGlobal,
    CalibratedLocal,
}

impl Segment {
    pub const ALL: [Segment; 4] = [
        Segment::UncalibratedGlobal,
        Segment::UncalibratedLocal,
        Segment::CalibratedGlobal,
        Segment::CalibratedLocal,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Segment::UncalibratedGlobal => "uncalibrated_global",
            Segment::UncalibratedLocal => "uncalibrated_local",
            Segment::CalibratedGlobal => "calibrated_global",
            Segment::CalibratedLocal => "calibrated_local",
        }
    }
}

/// Row ranges of each segment within a context sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ContextLayout {
    pub spans: Vec<(Segment, usize, usize)>,
}

impl ContextLayout {
    pub fn len(&self) -> usize {
        self.spans.last().map(|s| s.2).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean attention mass per segment over the rows of `probs` (`[nq, len]`).
    pub fn masses<T: Scalar>(&self, probs: &Tensor<T>) -> [f64; 4] {
        let mut m = [0.0; 4];
        let nq = probs.rows().max(1);
        for r in 0..probs.rows() {
            let row = probs.row_slice(r);
            for &(seg, a, b) in &self.spans {
                m[seg.index()] += row[a..b].iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        m.map(|v| v / nq as f64)
    }
}

/// Concatenates `parts` along the sequence dimension, skipping `None`.
pub fn assemble_context<T: Scalar>(g: &mut Graph<'_, T>, parts: &[(Segment, Option<Var>)]) -> Option<(Var, ContextLayout)> {
    let mut vars = Vec::new();
    let mut layout = ContextLayout::default();
    let mut at = 0;
    for &(seg, v) in parts {
        if let Some(v) = v {
            let n = g.shape(v)[0];
            layout.spans.push((seg, at, at + n));
            at += n;
            vars.push(v);
        }
    }
    if vars.is_empty() {
        return None;
    }
    let ctx = if vars.len() == 1 { vars[0] } else { g.concat_rows(&vars) };
    Some((ctx, layout))
}

/// `[f^g_1..f^g_K, f^l_{1,1}..f^l_{K,N}]`.
pub fn build_context<T: Scalar>(g: &mut Graph<'_, T>, global: Var, local: Var) -> (Var, ContextLayout) {
    assemble_context(
        g,
        &[
            (Segment::UncalibratedGlobal, Some(global)),
            (Segment::UncalibratedLocal, Some(local)),
        ],
    )
    .expect("non-empty context")
}

/// The plain context followed by the calibrated global and local features.
pub fn build_augmented_context<T: Scalar>(
    g: &mut Graph<'_, T>,
    global: Var,
    local: Var,
    cal_global: Var,
    cal_local: Var,
) -> (Var, ContextLayout) {
    assemble_context(
        g,
        &[
            (Segment::UncalibratedGlobal, Some(global)),
            (Segment::UncalibratedLocal, Some(local)),
            (Segment::CalibratedGlobal, Some(cal_global)),
            (Segment::CalibratedLocal, Some(cal_local)),
        ],
    )
    .expect("non-empty context")
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, cfg: &RunConfig, rng: &mut impl Rng) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, cfg.norm_groups),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, Init::FanIn, rng),
            temb: Linear::new(store, &format!("{name}.temb"), cfg.temb_dim, cout, true, Init::FanIn, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, cfg.norm_groups),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, Init::FanIn, rng),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, Init::FanIn, rng)),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, temb: Var, hw: (usize, usize)) -> Var {
        let h = self.norm1.forward(g, x);
        let h = g.silu(h);
        let (h, _, _) = self.conv1.forward(g, h, hw.0, hw.1);
        let t = self.temb.forward(g, temb);
        let t = g.transpose(t);
        let h = g.add_col(h, t);
        let h = self.norm2.forward(g, h);
        let h = g.silu(h);
        let (h, _, _) = self.conv2.forward(g, h, hw.0, hw.1);
        let s = match &self.skip {
            Some(c) => c.forward(g, x, hw.0, hw.1).0,
            None => x,
        };
        g.add(s, h)
    }

    fn params(&self) -> Vec<ParamId> {
        let mut v = self.norm1.params();
        v.extend(self.conv1.params());
        v.extend(self.temb.params());
        v.extend(self.norm2.params());
        v.extend(self.conv2.params());
        if let Some(s) = &self.skip {
            v.extend(s.params());
        }
        v
    }
}

#[derive(Clone, Debug)]
struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl CrossAttention {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, ch: usize, ctx_dim: usize, cfg: &RunConfig, rng: &mut impl Rng) -> Self {
        Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), ch, cfg.norm_groups),
            q: Linear::new(store, &format!("{name}.q"), ch, ch, false, Init::FanIn, rng),
            k: Linear::new(store, &format!("{name}.k"), ctx_dim, ch, false, Init::FanIn, rng),
            v: Linear::new(store, &format!("{name}.v"), ctx_dim, ch, false, Init::FanIn, rng),
            out: Linear::new(store, &format!("{name}.out"), ch, ch, true, Init::FanIn, rng),
            heads: cfg.attn_heads,
        }
    }

    /// Residual cross-attention of a `[C, hw]` map over `ctx`; also returns
    /// the head-averaged attention probabilities `[hw, len]`.
    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, ctx: Var) -> (Var, Tensor<T>) {
        let h = self.norm.forward(g, x);
        let tokens = g.transpose(h);
        let q = self.q.forward(g, tokens);
        let k = self.k.forward(g, ctx);
        let v = self.v.forward(g, ctx);
        let (a, probs) = attention(g, q, k, v, self.heads);
        let o = self.out.forward(g, a);
        let o = g.transpose(o);
        let mut mean = g.value(probs[0]).clone();
        for p in &probs[1..] {
            mean.add_assign(g.value(*p));
        }
        mean.scale_in_place(T::lit(1.0 / probs.len() as f64));
        (g.add(x, o), mean)
    }

    fn params(&self) -> Vec<ParamId> {
        let mut v = self.norm.params();
        for l in [&self.q, &self.k, &self.v, &self.out] {
            v.extend(l.params());
        }
        v
    }
}

#[derive(Clone, Debug)]
struct Level {
    res: ResBlock,
    attn: Option<CrossAttention>,
    /// Downsampling (encoder) or post-upsample (decoder) convolution.
    resample: Option<Conv2d>,
}

/// Which features fill the calibrated context slots.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CalibrationMode {
    /// Run the calibration branches.
    #[default]
    Active,
    /// Fill the calibrated slots with copies of the uncalibrated features.
    Bypass,
}

/// Table-3 style switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Switches {
    pub grfc: bool,
    pub lrfc: bool,
    pub use_calibrated: bool,
    pub use_uncalibrated: bool,
}

impl Switches {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            grfc: cfg.grfc,
            lrfc: cfg.lrfc,
            use_calibrated: cfg.use_calibrated,
            use_uncalibrated: cfg.use_uncalibrated,
        }
    }

    pub fn base() -> Self {
        Self {
            grfc: false,
            lrfc: false,
            use_calibrated: false,
            use_uncalibrated: true,
        }
    }

    pub fn full() -> Self {
        Self {
            grfc: true,
            lrfc: true,
            use_calibrated: true,
            use_uncalibrated: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub calibration: CalibrationMode,
    /// Keep full head-averaged attention maps in the records.
    pub full_attention_maps: bool,
}

/// Attention statistics of one decoder cross-attention block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub block: String,
    /// Mean mass per [`Segment`], indexed by `Segment::index`.
    pub masses: [f64; 4],
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map: Option<Vec<f64>>,
}

/// Reference features entering the denoiser.
#[derive(Clone, Copy, Debug)]
pub struct ReferenceVars {
    /// `[K, D]`.
    pub global: Var,
    /// `[K N, D]`.
    pub local: Var,
}

/// Graph outputs of one noise prediction.
#[derive(Clone, Debug)]
pub struct DenoiserOutput {
    /// Predicted noise `[C, hw]`.
    pub eps: Var,
    /// Encoder token bundle `[M, D_en]`.
    pub fen: Var,
    pub cal_global: Option<Var>,
    pub cal_local: Option<Var>,
    pub attention: Vec<AttentionRecord>,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    conv_in: Conv2d,
    temb1: Linear,
    temb2: Linear,
    enc: Vec<Level>,
    mid: ResBlock,
    dec: Vec<Level>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    taps: Vec<(usize, Linear)>,
    grad_through_taps: bool,
    channels: Vec<usize>,
    pub latent_size: usize,
    pub latent_channels: usize,
    pub timesteps: usize,
    temb_in: usize,
}

impl Denoiser {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &RunConfig, rng: &mut impl Rng) -> Self {
        let ch = cfg.unet_channels.clone();
        let levels = ch.len();
        let c_lat = cfg.latent_channels();
        let temb_in = ch[0] + ch[0] % 2;
        let conv_in = Conv2d::new(store, "unet.conv_in", 2 * c_lat + 1, ch[0], 3, 1, Init::FanIn, rng);
        let temb1 = Linear::new(store, "unet.temb1", temb_in, cfg.temb_dim, true, Init::FanIn, rng);
        let temb2 = Linear::new(store, "unet.temb2", cfg.temb_dim, cfg.temb_dim, true, Init::FanIn, rng);
        let mut enc = Vec::new();
        let mut cur = ch[0];
        for l in 0..levels {
            let name = format!("unet.enc{l}");
            let res = ResBlock::new(store, &format!("{name}.res"), cur, ch[l], cfg, rng);
            let attn = cfg.unet_attention[l]
                .then(|| CrossAttention::new(store, &format!("{name}.attn"), ch[l], cfg.feat_dim, cfg, rng));
            let resample = (l + 1 < levels)
                .then(|| Conv2d::new(store, &format!("{name}.down"), ch[l], ch[l], 3, 2, Init::FanIn, rng));
            enc.push(Level { res, attn, resample });
            cur = ch[l];
        }
        let mid = ResBlock::new(store, "unet.mid", cur, cur, cfg, rng);
        let mut dec: Vec<Option<Level>> = (0..levels).map(|_| None).collect();
        for l in (0..levels).rev() {
            let name = format!("unet.dec{l}");
            let res = ResBlock::new(store, &format!("{name}.res"), cur + ch[l], ch[l], cfg, rng);
            let attn = cfg.unet_attention[l]
                .then(|| CrossAttention::new(store, &format!("{name}.attn"), ch[l], cfg.feat_dim, cfg, rng));
            let resample = (l > 0)
                .then(|| Conv2d::new(store, &format!("{name}.up"), ch[l], ch[l], 3, 1, Init::FanIn, rng));
            dec[l] = Some(Level { res, attn, resample });
            cur = ch[l];
        }
        let out_norm = GroupNorm::new(store, "unet.out_norm", ch[0], cfg.norm_groups);
        let out_conv = Conv2d::new(store, "unet.out_conv", ch[0], c_lat, 3, 1, Init::FanIn, rng);
        let taps = (levels - cfg.fen_levels..levels)
            .map(|l| {
                (
                    l,
                    Linear::new(store, &format!("unet.tap{l}"), ch[l], cfg.fen_dim, true, Init::FanIn, rng),
                )
            })
            .collect();
        Self {
            conv_in,
            temb1,
            temb2,
            enc,
            mid,
            dec: dec.into_iter().map(|l| l.expect("every level built")).collect(),
            out_norm,
            out_conv,
            taps,
            grad_through_taps: cfg.calib_grad_to_denoiser,
            channels: ch,
            latent_size: cfg.latent_size(),
            latent_channels: c_lat,
            timesteps: cfg.timesteps,
            temb_in,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.conv_in.params();
        v.extend(self.temb1.params());
        v.extend(self.temb2.params());
        for lv in self.enc.iter().chain(&self.dec) {
            v.extend(lv.res.params());
            if let Some(a) = &lv.attn {
                v.extend(a.params());
            }
            if let Some(r) = &lv.resample {
                v.extend(r.params());
            }
        }
        v.extend(self.mid.params());
        v.extend(self.out_norm.params());
        v.extend(self.out_conv.params());
        for (_, t) in &self.taps {
            v.extend(t.params());
        }
        v
    }

    /// Runs the full staged pipeline: encoder over the plain context, the
    /// encoder token bundle, calibration, then the decoder over the
    /// augmented context.
    #[allow(clippy::too_many_arguments)]
    pub fn predict_noise<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        calibration: &Calibration,
        switches: Switches,
        zb: &Tensor<T>,
        zt: &Tensor<T>,
        mask: &Tensor<T>,
        refs: ReferenceVars,
        calib_inputs: ReferenceVars,
        t: usize,
        opts: ForwardOptions,
    ) -> Result<DenoiserOutput> {
        if t >= self.timesteps {
            return Err(Error::Param(format!("timestep {t} outside [0, {})", self.timesteps)));
        }
        let hw = self.latent_size * self.latent_size;
        let c = self.latent_channels;
        for (what, x, rows) in [("z_b", zb, c), ("z_t", zt, c), ("mask", mask, 1)] {
            if x.shape() != [rows, hw] {
                return Err(Error::Shape {
                    what: what.into(),
                    expected: format!("[{rows}, {hw}]"),
                    actual: format!("{:?}", x.shape()),
                });
            }
        }
        let x = Tensor::concat_rows(&[zb, zt, mask])?;
        let x = g.constant(x);

        let te = g.constant(timestep_embedding::<T>(t, self.temb_in));
        let te = self.temb1.forward(g, te);
        let te = g.silu(te);
        let te = self.temb2.forward(g, te);
        let temb = g.silu(te);

        let plain = switches
            .use_uncalibrated
            .then(|| build_context(g, refs.global, refs.local));

        let (mut s, mut h) = (self.latent_size, self.latent_size);
        let (mut x, _, _) = self.conv_in.forward(g, x, s, h);
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut taps = Vec::new();
        for (l, lv) in self.enc.iter().enumerate() {
            x = lv.res.forward(g, x, temb, (s, h));
            if let (Some(a), Some((ctx, _))) = (&lv.attn, &plain) {
                x = a.forward(g, x, *ctx).0;
            }
            finite(g, x, &format!("encoder level {l}"))?;
            if let Some((_, proj)) = self.taps.iter().find(|(tl, _)| *tl == l) {
                let tapped = if self.grad_through_taps { x } else { g.detach(x) };
                let tokens = g.transpose(tapped);
                taps.push(proj.forward(g, tokens));
            }
            skips.push(x);
            if let Some(down) = &lv.resample {
                let (y, ns, nh) = down.forward(g, x, s, h);
                (x, s, h) = (y, ns, nh);
            }
        }
        x = self.mid.forward(g, x, temb, (s, h));
        let fen = if taps.len() == 1 { taps[0] } else { g.concat_rows(&taps) };
        finite(g, fen, "encoder feature bundle")?;

        // calibration only sees the finished encoder bundle
        let (cal_global, cal_local) = match opts.calibration {
            CalibrationMode::Active => (
                switches.grfc.then(|| calibration.global.forward(g, calib_inputs.global, fen).0),
                switches.lrfc.then(|| calibration.local.forward(g, calib_inputs.local, fen).0),
            ),
            CalibrationMode::Bypass => (
                switches.grfc.then_some(refs.global),
                switches.lrfc.then_some(refs.local),
            ),
        };
        let inject = |v: Option<Var>| if switches.use_calibrated { v } else { None };
        let uncal = |v: Var| switches.use_uncalibrated.then_some(v);
        let augmented = assemble_context(
            g,
            &[
                (Segment::UncalibratedGlobal, uncal(refs.global)),
                (Segment::UncalibratedLocal, uncal(refs.local)),
                (Segment::CalibratedGlobal, inject(cal_global)),
                (Segment::CalibratedLocal, inject(cal_local)),
            ],
        );

        let mut records = Vec::new();
        for l in (0..self.dec.len()).rev() {
            let lv = &self.dec[l];
            x = g.concat_rows(&[x, skips[l]]);
            x = lv.res.forward(g, x, temb, (s, h));
            if let (Some(a), Some((ctx, layout))) = (&lv.attn, &augmented) {
                let (y, probs) = a.forward(g, x, *ctx);
                x = y;
                records.push(AttentionRecord {
                    block: format!("decoder level {l}"),
                    masses: layout.masses(&probs),
                    map: opts
                        .full_attention_maps
                        .then(|| probs.data().iter().map(|v| v.as_f64()).collect()),
                });
            }
            finite(g, x, &format!("decoder level {l}"))?;
            if let Some(up) = &lv.resample {
                let u = g.upsample2(x, s, h);
                (s, h) = (s * 2, h * 2);
                x = up.forward(g, u, s, h).0;
            }
        }
        let y = self.out_norm.forward(g, x);
        let y = g.silu(y);
        let (eps, _, _) = self.out_conv.forward(g, y, s, h);
        finite(g, eps, "noise prediction head")?;
        Ok(DenoiserOutput {
            eps,
            fen,
            cal_global,
            cal_local,
            attention: records,
        })
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }
}

fn finite<T: Scalar>(g: &Graph<'_, T>, v: Var, what: &str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn codec_roundtrip_and_linearity() {
        let codec = LatentCodec::new(64, 4, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data: Vec<f32> = (0..64 * 64 * 3).map(|_| rng.gen()).collect();
        let img = Image::new(64, 64, data).unwrap();
        let z = codec.encode::<f32>(&img).unwrap();
        assert_eq!(z.shape(), &[48, 256]);
        let back = codec.decode(&z).unwrap();
        let err = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err <= 1e-5, "roundtrip error {err}");
        let zero = codec.encode::<f64>(&Image::zeros(64, 64)).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn codec_mix_is_orthonormal() {
        let codec = LatentCodec::new(64, 4, 1.0);
        let c = codec.channels();
        for i in 0..c {
            for j in 0..c {
                let dot: f64 = (0..c).map(|k| codec.mix[i * c + k] * codec.mix[j * c + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn codec_rejects_wrong_size() {
        let codec = LatentCodec::new(64, 4, 0.5);
        assert!(codec.encode::<f32>(&Image::zeros(60, 64)).is_err());
        assert!(codec.decode(&Tensor::<f32>::zeros(&[4, 256])).is_err());
    }

    #[test]
    fn mask_matches_bbox() {
        let b = BoundingBox { x: 8, y: 16, w: 12, h: 8 };
        let m = foreground_mask::<f32>(&b, 64, 4);
        assert_eq!(m.data().iter().filter(|&&v| v == 1.0).count(), 3 * 2);
        let raw: Vec<u8> = m.data().iter().map(|&v| v as u8).collect();
        assert_eq!(BoundingBox::from_latent_mask(&raw, 16, 4), Some(b));
    }

    #[test]
    fn context_lengths_and_partition() {
        let store = ParamStore::<f32>::new();
        let mut g = Graph::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (k, n) in [(5, 16), (1, 16)] {
            let gl = g.constant(randn(&[k, 8], 1.0, &mut rng));
            let lo = g.constant(randn(&[k * n, 8], 1.0, &mut rng));
            let (c, layout) = build_context(&mut g, gl, lo);
            assert_eq!(g.shape(c)[0], k + k * n);
            let (a, alayout) = build_augmented_context(&mut g, gl, lo, gl, lo);
            assert_eq!(g.shape(a)[0], 2 * (k + k * n));
            for l in [layout, alayout] {
                let mut at = 0;
                for &(_, s, e) in &l.spans {
                    assert_eq!(s, at);
                    at = e;
                }
                assert_eq!(at, l.len());
            }
        }
    }
}
