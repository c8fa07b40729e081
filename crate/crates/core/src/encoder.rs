//! Foreground encoder: a small patch transformer with a CLS token, followed by
//! an adapter projection into the conditioning width.
//!
//! There are no positional embeddings; patch identity is carried by the row
//! order of the local features, which is row-major over the patch grid.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image::{BoundingBox, Image};
use crate::nn::{attention, Init, LayerNorm, Linear};
use crate::params::{randn, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smallest crop side accepted for ground-truth feature extraction.
pub const MIN_CROP: usize = 2;

/// CLS-token feature of one image, `[1, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalFeature<T> {
    pub vector: Tensor<T>,
    pub owner: usize,
}

/// Patch-token features of one image, `[N, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalFeatures<T> {
    pub rows: Tensor<T>,
    pub owner: usize,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    patch: Linear,
    cls: ParamId,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    adapter: Linear,
    local_adapter: Option<Linear>,
    pub ref_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub heads: usize,
    pub feat_dim: usize,
}

/// Graph nodes produced by one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    /// Adapter output of the CLS token, `[1, D]`.
    pub global: Var,
    /// Adapter outputs of the patch tokens, `[N, D]`.
    pub local: Var,
    /// Pre-adapter patch tokens, `[N, width]`.
    pub backbone_local: Var,
}

impl Encoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &RunConfig, rng: &mut impl Rng) -> Self {
        let w = cfg.enc_width;
        let patch_in = 3 * cfg.patch_size * cfg.patch_size;
        let patch = Linear::new(store, "encoder.patch", patch_in, w, true, Init::FanIn, rng);
        let cls = store.add("encoder.cls", randn(&[1, w], 0.02, rng));
        let blocks = (0..cfg.enc_layers)
            .map(|i| {
                let p = format!("encoder.block{i}");
                let hidden = w * cfg.enc_mlp_ratio;
                Block {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), w),
                    qkv: Linear::new(store, &format!("{p}.qkv"), w, 3 * w, true, Init::FanIn, rng),
                    proj: Linear::new(store, &format!("{p}.proj"), w, w, true, Init::FanIn, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), w),
                    fc1: Linear::new(store, &format!("{p}.fc1"), w, hidden, true, Init::FanIn, rng),
                    fc2: Linear::new(store, &format!("{p}.fc2"), hidden, w, true, Init::FanIn, rng),
                }
            })
            .collect();
        let ln_out = LayerNorm::new(store, "encoder.ln_out", w);
        let adapter = Linear::new(store, "encoder.adapter", w, cfg.feat_dim, true, Init::FanIn, rng);
        let local_adapter = cfg.separate_adapters.then(|| {
            Linear::new(store, "encoder.adapter_local", w, cfg.feat_dim, true, Init::FanIn, rng)
        });
        Self {
            patch,
            cls,
            blocks,
            ln_out,
            adapter,
            local_adapter,
            ref_size: cfg.ref_size,
            patch_size: cfg.patch_size,
            width: w,
            heads: cfg.enc_heads,
            feat_dim: cfg.feat_dim,
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.ref_size / self.patch_size).pow(2)
    }

    /// Parameters before the adapter.
    pub fn backbone_params(&self) -> Vec<ParamId> {
        let mut v = self.patch.params();
        v.push(self.cls);
        for b in &self.blocks {
            for l in [&b.qkv, &b.proj, &b.fc1, &b.fc2] {
                v.extend(l.params());
            }
            v.extend(b.ln1.params());
            v.extend(b.ln2.params());
        }
        v.extend(self.ln_out.params());
        v
    }

    pub fn adapter_params(&self) -> Vec<ParamId> {
        let mut v = self.adapter.params();
        if let Some(l) = &self.local_adapter {
            v.extend(l.params());
        }
        v
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.backbone_params();
        v.extend(self.adapter_params());
        v
    }

    /// Flattens an image into `[N, 3 P^2]` patch rows with samples mapped to `[-1, 1]`.
    pub fn patchify<T: Scalar>(&self, image: &Image) -> Result<Tensor<T>> {
        if image.width() != self.ref_size || image.height() != self.ref_size {
            return Err(Error::Param(format!(
                "encoder input must be {0}x{0}, got {1}x{2}",
                self.ref_size,
                image.width(),
                image.height()
            )));
        }
        let p = self.patch_size;
        let g = self.ref_size / p;
        let mut data = Vec::with_capacity(g * g * p * p * 3);
        for gy in 0..g {
            for gx in 0..g {
                for y in 0..p {
                    for x in 0..p {
                        for c in 0..3 {
                            let v = image.get(gx * p + x, gy * p + y, c);
                            data.push(T::lit(2.0 * v as f64 - 1.0));
                        }
                    }
                }
            }
        }
        Tensor::new(&[g * g, 3 * p * p], data)
    }

    /// Encodes one image inside `g`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, image: &Image) -> Result<EncodedVars> {
        let patches = g.constant(self.patchify(image)?);
        let n = self.num_patches();
        let tokens = self.patch.forward(g, patches);
        let cls = g.param(self.cls);
        let mut x = g.concat_rows(&[cls, tokens]);
        for b in &self.blocks {
            let h = b.ln1.forward(g, x);
            let qkv = b.qkv.forward(g, h);
            let w = self.width;
            let q = g.slice_cols(qkv, 0, w);
            let k = g.slice_cols(qkv, w, 2 * w);
            let v = g.slice_cols(qkv, 2 * w, 3 * w);
            let (a, _) = attention(g, q, k, v, self.heads);
            let a = b.proj.forward(g, a);
            x = g.add(x, a);
            let h = b.ln2.forward(g, x);
            let h = b.fc1.forward(g, h);
            let h = g.gelu(h);
            let h = b.fc2.forward(g, h);
            x = g.add(x, h);
        }
        let x = self.ln_out.forward(g, x);
        let cls_out = g.slice_rows(x, 0, 1);
        let patch_out = g.slice_rows(x, 1, n + 1);
        let global = self.adapter.forward(g, cls_out);
        let local = self
            .local_adapter
            .as_ref()
            .unwrap_or(&self.adapter)
            .forward(g, patch_out);
        Ok(EncodedVars {
            global,
            local,
            backbone_local: patch_out,
        })
    }

    /// Global and local features of one image.
    pub fn extract_features<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        image: &Image,
        owner: usize,
    ) -> Result<(GlobalFeature<T>, LocalFeatures<T>)> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, image)?;
        let global = g.value(out.global).clone();
        let local = g.value(out.local).clone();
        if !global.is_finite() || !local.is_finite() {
            return Err(Error::NonFinite("encoder output".into()));
        }
        Ok((
            GlobalFeature {
                vector: global,
                owner,
            },
            LocalFeatures { rows: local, owner },
        ))
    }

    /// Features of every reference, in order.
    pub fn extract_reference_sets<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        references: &[Image],
    ) -> Result<(Vec<GlobalFeature<T>>, Vec<LocalFeatures<T>>)> {
        if references.is_empty() {
            return Err(Error::Param("reference list is empty".into()));
        }
        let mut gs = Vec::with_capacity(references.len());
        let mut ls = Vec::with_capacity(references.len());
        for (k, r) in references.iter().enumerate() {
            let (gf, lf) = self.extract_features(store, r, k)?;
            gs.push(gf);
            ls.push(lf);
        }
        Ok((gs, ls))
    }

    /// Crops `bbox` out of `image` and resizes it to the encoder resolution.
    pub fn crop_foreground(&self, image: &Image, bbox: &BoundingBox) -> Result<Image> {
        if bbox.w < MIN_CROP || bbox.h < MIN_CROP {
            return Err(Error::Param(format!(
                "bbox {bbox} is degenerate (sides must be at least {MIN_CROP} px)"
            )));
        }
        let crop = image.crop(bbox.x, bbox.y, bbox.w, bbox.h)?;
        Ok(crop.resize(self.ref_size, self.ref_size))
    }

    /// Features of the ground-truth foreground inside `bbox`.
    pub fn extract_ground_truth_features<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        ground_truth: &Image,
        bbox: &BoundingBox,
    ) -> Result<(GlobalFeature<T>, LocalFeatures<T>)> {
        let crop = self.crop_foreground(ground_truth, bbox)?;
        self.extract_features(store, &crop, 0)
    }
}

/// Stacks global features into `[K, D]`.
pub fn stack_globals<T: Scalar>(features: &[GlobalFeature<T>]) -> Tensor<T> {
    let parts: Vec<&Tensor<T>> = features.iter().map(|f| &f.vector).collect();
    Tensor::concat_rows(&parts).expect("global features share a width")
}

/// Stacks local features into `[K N, D]`.
pub fn stack_locals<T: Scalar>(features: &[LocalFeatures<T>]) -> Tensor<T> {
    let parts: Vec<&Tensor<T>> = features.iter().map(|f| &f.rows).collect();
    Tensor::concat_rows(&parts).expect("local features share a width")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, check_params_promoted};
    use crate::synthdata::{render_scene, ObjectKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup<T: Scalar>(cfg: &RunConfig) -> (ParamStore<T>, Encoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, cfg, &mut rng);
        (store, enc)
    }

    fn sample_image(size: usize, seed: u64) -> Image {
        render_scene(seed, ObjectKind::MarkedSprite, 0, 5, 64, 4).crop.resize(size, size)
    }

    #[test]
    fn feature_shapes() {
        let cfg = RunConfig::default();
        let (store, enc) = setup::<f32>(&cfg);
        let (g, l) = enc.extract_features(&store, &sample_image(64, 3), 0).unwrap();
        assert_eq!(g.vector.shape(), &[1, 64]);
        assert_eq!(l.rows.shape(), &[16, 64]);
    }

    #[test]
    fn wrong_size_is_rejected() {
        let cfg = RunConfig::default();
        let (store, enc) = setup::<f32>(&cfg);
        let err = enc.extract_features(&store, &Image::zeros(48, 64), 0).unwrap_err();
        assert!(err.to_string().contains("64x64"), "{err}");
    }

    #[test]
    fn constant_crop_gives_identical_rows() {
        let cfg = RunConfig::default();
        let (store, enc) = setup::<f32>(&cfg);
        let img = Image::filled(64, 64, [0.2, 0.5, 0.7]);
        let bbox = BoundingBox { x: 8, y: 4, w: 24, h: 36 };
        let (_, l) = enc.extract_ground_truth_features(&store, &img, &bbox).unwrap();
        for r in 1..l.rows.rows() {
            for (a, b) in l.rows.row_slice(0).iter().zip(l.rows.row_slice(r)) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn full_canvas_crop_is_resize() {
        let cfg = RunConfig::default();
        let (store, enc) = setup::<f32>(&cfg);
        let img = sample_image(64, 5);
        let bbox = BoundingBox { x: 0, y: 0, w: 64, h: 64 };
        let a = enc.extract_ground_truth_features(&store, &img, &bbox).unwrap();
        let b = enc.extract_features(&store, &img.resize(64, 64), 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shifting_by_a_patch_changes_local_rows() {
        let cfg = RunConfig::default();
        let (store, enc) = setup::<f32>(&cfg);
        let img = sample_image(64, 9);
        let mut shifted = Image::zeros(64, 64);
        for y in 0..64 {
            for x in 16..64 {
                shifted.set_pixel(x, y, img.pixel(x - 16, y));
            }
        }
        let (_, a) = enc.extract_features(&store, &img, 0).unwrap();
        let (_, b) = enc.extract_features(&store, &shifted, 0).unwrap();
        let changed = (0..16).any(|r| a.rows.row_slice(r) != b.rows.row_slice(r));
        assert!(changed);
    }

    #[test]
    fn reference_order_is_preserved() {
        let cfg = RunConfig::default();
        let (store, enc) = setup::<f32>(&cfg);
        let imgs: Vec<Image> = (0..3).map(|s| sample_image(64, s)).collect();
        let (g1, l1) = enc.extract_reference_sets(&store, &imgs).unwrap();
        let rev: Vec<Image> = imgs.iter().rev().cloned().collect();
        let (g2, l2) = enc.extract_reference_sets(&store, &rev).unwrap();
        assert_eq!(g1.len(), 3);
        for k in 0..3 {
            assert_eq!(g1[k].vector, g2[2 - k].vector);
            assert_eq!(l1[k].rows, l2[2 - k].rows);
        }
        assert!(enc.extract_reference_sets::<f32>(&store, &[]).is_err());
    }

    fn weighted_output<T: Scalar>(enc: &Encoder, store: &ParamStore<T>, img: &Image) -> (T, crate::params::Gradients<T>) {
        let mut g = Graph::new(store);
        let out = enc.forward(&mut g, img).unwrap();
        // fixed pseudo-random weighting so every output entry matters
        let wg = Tensor::from_fn(g.shape(out.global), |i| T::lit(((i * 7 % 11) as f64 - 5.0) / 5.0));
        let wl = Tensor::from_fn(g.shape(out.local), |i| T::lit(((i * 5 % 13) as f64 - 6.0) / 6.0));
        let wg = g.constant(wg);
        let wl = g.constant(wl);
        let a = g.mul(out.global, wg);
        let b = g.mul(out.local, wl);
        let a = g.sum_all(a);
        let b = g.sum_all(b);
        let s = g.add(a, b);
        (g.scalar(s), g.backward(s))
    }

    #[test]
    fn gradient_check_f32() {
        let cfg = RunConfig::micro();
        let (store, enc) = setup::<f32>(&cfg);
        let img = sample_image(cfg.ref_size, 4);
        let (_, grads) = weighted_output(&enc, &store, &img);
        let reports = check_params_promoted(&store, &enc.params(), &grads, 24, 1e-6, |s| {
            weighted_output(&enc, s, &img).0
        });
        for r in reports {
            assert!(r.rel_err <= 1e-3, "{}: {}", r.param, r.rel_err);
        }
    }

    #[test]
    fn gradient_check_f64() {
        let cfg = RunConfig::micro();
        let (store, enc) = setup::<f64>(&cfg);
        let img = sample_image(cfg.ref_size, 4);
        let (_, grads) = weighted_output(&enc, &store, &img);
        let reports = check_params(&store, &enc.params(), &grads, 24, 1e-6, |s| {
            weighted_output(&enc, s, &img).0
        });
        for r in reports {
            assert!(r.analytic_norm > 0.0, "{} has no gradient", r.param);
            assert!(r.rel_err <= 1e-5, "{}: {}", r.param, r.rel_err);
        }
    }
}
