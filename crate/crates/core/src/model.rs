//! The full composition model and its per-example training objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::calibration::{global_loss_var, local_loss_var, Calibration};
use crate::config::RunConfig;
use crate::correspondence::{correspond_all, gather_targets, CorrespondenceMap};
use crate::denoiser::{foreground_mask, Denoiser, DenoiserOutput, ForwardOptions, LatentCodec, ReferenceVars, Switches};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::image::{erase_box, BoundingBox, Image};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::schedule::DiffusionSchedule;
use crate::synthdata::TrainingExample;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: RunConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub calibration: Calibration,
    pub denoiser: Denoiser,
    pub codec: LatentCodec,
}

/// Scalar loss terms of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub sd: f64,
    pub gc: f64,
    pub lc: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, o: &LossBreakdown) {
        self.sd += o.sd;
        self.gc += o.gc;
        self.lc += o.lc;
        self.total += o.total;
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            sd: self.sd * s,
            gc: self.gc * s,
            lc: self.lc * s,
            total: self.total * s,
        }
    }
}

/// Denoiser-side inputs derived from an example.
#[derive(Clone, Debug)]
pub struct Conditioning<T> {
    pub zb: Tensor<T>,
    pub mask: Tensor<T>,
    pub bbox: BoundingBox,
}

/// Ground-truth foreground features used as calibration targets.
#[derive(Clone, Debug)]
pub struct GroundTruthFeatures<T> {
    /// `[1, D]`.
    pub global: Tensor<T>,
    /// `[N, D]`.
    pub local: Tensor<T>,
    /// Pre-adapter patch tokens, `[N, width]`.
    pub backbone_local: Tensor<T>,
}

/// Reference features as plain values.
#[derive(Clone, Debug)]
pub struct ReferenceValues<T> {
    /// `[K, D]`.
    pub global: Tensor<T>,
    /// `[K N, D]`.
    pub local: Tensor<T>,
    /// `[K N, width]`.
    pub backbone_local: Tensor<T>,
    pub k: usize,
}

/// Graph outputs of one training objective evaluation.
pub struct ObjectiveVars {
    pub total: Var,
    pub sd: Var,
    pub gc: Option<Var>,
    pub lc: Option<Var>,
    pub output: DenoiserOutput,
}

impl<T: Scalar> Model<T> {
    /// Randomly initialised model; deterministic in `(config, seed)`.
    pub fn new(config: &RunConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, config, &mut rng);
        let calibration = Calibration::new(&mut store, config, &mut rng);
        let denoiser = Denoiser::new(&mut store, config, &mut rng);
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            calibration,
            denoiser,
            codec: LatentCodec::from_config(config),
        })
    }

    pub fn switches(&self) -> Switches {
        Switches::from_config(&self.config)
    }

    pub fn schedule(&self) -> DiffusionSchedule {
        DiffusionSchedule::from_config(&self.config)
    }

    /// Parameters updated by the optimiser.
    pub fn trainable_params(&self) -> Vec<ParamId> {
        let frozen = if self.config.freeze_encoder_backbone {
            self.encoder.backbone_params()
        } else {
            Vec::new()
        };
        self.store.ids().filter(|id| !frozen.contains(id)).collect()
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            calibration: self.calibration.clone(),
            denoiser: self.denoiser.clone(),
            codec: self.codec.clone(),
        }
    }

    pub fn conditioning(&self, background: &Image, bbox: &BoundingBox) -> Result<Conditioning<T>> {
        let cfg = &self.config;
        bbox.validate(cfg.canvas_size, cfg.canvas_size, cfg.latent_factor)?;
        let erased = erase_box(background, bbox);
        Ok(Conditioning {
            zb: self.codec.encode(&erased)?,
            mask: foreground_mask(bbox, cfg.canvas_size, cfg.latent_factor),
            bbox: *bbox,
        })
    }

    /// Encodes references inside `g`, returning stacked `[K, D]` / `[K N, D]` nodes
    /// and the stacked backbone tokens.
    pub fn encode_references(&self, g: &mut Graph<'_, T>, references: &[Image]) -> Result<(ReferenceVars, Var)> {
        if references.is_empty() {
            return Err(Error::Param("reference list is empty".into()));
        }
        let mut gs = Vec::new();
        let mut ls = Vec::new();
        let mut bs = Vec::new();
        for r in references {
            let e = self.encoder.forward(g, &self.fit_reference(r))?;
            gs.push(e.global);
            ls.push(e.local);
            bs.push(e.backbone_local);
        }
        let cat = |g: &mut Graph<'_, T>, v: &[Var]| if v.len() == 1 { v[0] } else { g.concat_rows(v) };
        let global = cat(g, &gs);
        let local = cat(g, &ls);
        let backbone = cat(g, &bs);
        Ok((ReferenceVars { global, local }, backbone))
    }

    fn fit_reference(&self, r: &Image) -> Image {
        let s = self.config.ref_size;
        if r.width() == s && r.height() == s {
            r.clone()
        } else {
            r.resize(s, s)
        }
    }

    pub fn reference_values(&self, references: &[Image]) -> Result<ReferenceValues<T>> {
        let mut g = Graph::new(&self.store);
        let (vars, backbone) = self.encode_references(&mut g, references)?;
        Ok(ReferenceValues {
            global: g.value(vars.global).clone(),
            local: g.value(vars.local).clone(),
            backbone_local: g.value(backbone).clone(),
            k: references.len(),
        })
    }

    pub fn ground_truth_features(&self, ground_truth: &Image, bbox: &BoundingBox) -> Result<GroundTruthFeatures<T>> {
        let crop = self.encoder.crop_foreground(ground_truth, bbox)?;
        let mut g = Graph::new(&self.store);
        let e = self.encoder.forward(&mut g, &crop)?;
        Ok(GroundTruthFeatures {
            global: g.value(e.global).clone(),
            local: g.value(e.local).clone(),
            backbone_local: g.value(e.backbone_local).clone(),
        })
    }

    /// Correspondence of every reference's patches onto the ground-truth patches.
    pub fn correspondence(&self, refs: &ReferenceValues<T>, gt: &GroundTruthFeatures<T>) -> Result<CorrespondenceMap> {
        let n = self.encoder.num_patches();
        let (src, dst) = if self.config.match_on_backbone {
            (&refs.backbone_local, &gt.backbone_local)
        } else {
            (&refs.local, &gt.local)
        };
        let blocks: Vec<Tensor<T>> = (0..refs.k).map(|k| src.slice_rows(k * n, (k + 1) * n)).collect();
        let parts: Vec<&Tensor<T>> = blocks.iter().collect();
        correspond_all(&parts, dst)
    }

    /// Ground-truth local rows gathered through `delta`, stacked `[K N, D]`.
    pub fn local_targets(&self, gt: &GroundTruthFeatures<T>, delta: &CorrespondenceMap) -> Tensor<T> {
        let gathered: Vec<Tensor<T>> = delta.per_reference.iter().map(|d| gather_targets(&gt.local, d)).collect();
        let parts: Vec<&Tensor<T>> = gathered.iter().collect();
        Tensor::concat_rows(&parts).expect("targets share a width")
    }

    /// Builds the combined objective `L_sd + λ_g L_gc + λ_l L_lc` for one example at
    /// timestep `t` with forward noise `noise`.
    #[allow(clippy::too_many_arguments)]
    pub fn objective(
        &self,
        g: &mut Graph<'_, T>,
        cond: &Conditioning<T>,
        z0: &Tensor<T>,
        references: &[Image],
        gt: &GroundTruthFeatures<T>,
        t: usize,
        noise: &Tensor<T>,
        schedule: &DiffusionSchedule,
    ) -> Result<ObjectiveVars> {
        let cfg = &self.config;
        let switches = self.switches();
        let (refs, backbone) = self.encode_references(g, references)?;
        let calib_inputs = if cfg.calib_grad_to_encoder {
            refs
        } else {
            ReferenceVars {
                global: g.detach(refs.global),
                local: g.detach(refs.local),
            }
        };
        let zt = schedule.q_sample(z0, t, noise)?;
        let out = self.denoiser.predict_noise(
            g,
            &self.calibration,
            switches,
            &cond.zb,
            &zt,
            &cond.mask,
            refs,
            calib_inputs,
            t,
            ForwardOptions::default(),
        )?;
        let sd = noise_loss(g, out.eps, noise);
        let mut total = sd;
        let gc = match out.cal_global {
            Some(cg) => {
                let l = global_loss_var(g, cg, &gt.global, cfg.loss_reduction);
                let w = g.scale(l, T::lit(cfg.lambda_g));
                total = g.add(total, w);
                Some(l)
            }
            None => None,
        };
        let lc = match out.cal_local {
            Some(cl) => {
                let values = ReferenceValues {
                    global: g.value(refs.global).clone(),
                    local: g.value(refs.local).clone(),
                    backbone_local: g.value(backbone).clone(),
                    k: references.len(),
                };
                let delta = self.correspondence(&values, gt)?;
                let targets = self.local_targets(gt, &delta);
                let l = local_loss_var(g, cl, &targets, cfg.loss_reduction);
                let w = g.scale(l, T::lit(cfg.lambda_l));
                total = g.add(total, w);
                Some(l)
            }
            None => None,
        };
        Ok(ObjectiveVars {
            total,
            sd,
            gc,
            lc,
            output: out,
        })
    }

    /// Latent, conditioning and ground-truth features of an assembled example.
    pub fn prepare(&self, ex: &TrainingExample) -> Result<(Conditioning<T>, Tensor<T>, GroundTruthFeatures<T>)> {
        let cond = self.conditioning(&ex.background, &ex.bbox)?;
        let z0 = self.codec.encode(&ex.ground_truth)?;
        let gt = self.ground_truth_features(&ex.ground_truth, &ex.bbox)?;
        Ok((cond, z0, gt))
    }
}

/// `mean((eps_hat - eps)^2)`.
pub fn noise_loss<T: Scalar>(g: &mut Graph<'_, T>, eps_hat: Var, eps: &Tensor<T>) -> Var {
    let n = eps.len();
    let target = g.constant(eps.clone());
    let d = g.sub(eps_hat, target);
    let s = g.sum_squares(d);
    g.scale(s, T::lit(1.0 / n as f64))
}

pub fn breakdown<T: Scalar>(g: &Graph<'_, T>, o: &ObjectiveVars) -> LossBreakdown {
    LossBreakdown {
        sd: g.scalar(o.sd).as_f64(),
        gc: o.gc.map(|v| g.scalar(v).as_f64()).unwrap_or(0.0),
        lc: o.lc.map(|v| g.scalar(v).as_f64()).unwrap_or(0.0),
        total: g.scalar(o.total).as_f64(),
    }
}
