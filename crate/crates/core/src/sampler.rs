//! Ancestral DDPM sampling of a composite, with per-timestep diagnostics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::correspondence::CorrespondenceMap;
use crate::denoiser::{AttentionRecord, CalibrationMode, ForwardOptions, ReferenceVars};
use crate::error::{Error, Result};
use crate::image::{BoundingBox, Image};
use crate::model::{GroundTruthFeatures, Model, ReferenceValues};
use crate::scalar::Scalar;
use crate::synthdata::MAX_REFERENCES;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default)]
pub struct SampleOptions<'a> {
    pub mode: CalibrationMode,
    /// Ground-truth composite; enables the feature-distance diagnostics.
    pub ground_truth: Option<&'a Image>,
    pub full_attention_maps: bool,
}

/// Mean L2 distances to the ground-truth features at one timestep. `None`
/// when the corresponding branch is disabled or no ground truth was given.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub global_calibrated: Option<f64>,
    pub global_uncalibrated: Option<f64>,
    pub local_calibrated: Option<f64>,
    pub local_uncalibrated: Option<f64>,
    pub attention: Vec<AttentionRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDiagnostics {
    pub config_hash: String,
    pub has_ground_truth: bool,
    /// One record per denoising step, in sampling order (`t = T-1` first).
    pub steps: Vec<StepRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correspondence: Option<CorrespondenceMap>,
}

#[derive(Clone, Debug)]
pub struct Composite {
    pub image: Image,
    pub trajectory: TrajectoryDiagnostics,
}

/// Mean over rows of `||a_r - b_r||`.
pub fn mean_row_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let rows = a.rows();
    let mut acc = 0.0;
    for r in 0..rows {
        let d: f64 = a
            .row_slice(r)
            .iter()
            .zip(b.row_slice(r))
            .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
            .sum();
        acc += d.sqrt();
    }
    acc / rows as f64
}

fn repeat_row<T: Scalar>(row: &Tensor<T>, n: usize) -> Tensor<T> {
    let parts: Vec<&Tensor<T>> = (0..n).map(|_| row).collect();
    Tensor::concat_rows(&parts).expect("same width")
}

/// Distance targets: the ground-truth global row per reference and the
/// gathered local rows.
struct Targets<T> {
    global: Tensor<T>,
    local: Tensor<T>,
    delta: CorrespondenceMap,
}

/// Places everything outside `bbox` from `background`.
pub fn paste_outside(generated: &Image, background: &Image, bbox: &BoundingBox) -> Image {
    let mut out = generated.clone();
    for y in 0..out.height() {
        for x in 0..out.width() {
            if !bbox.contains(x, y) {
                out.set_pixel(x, y, background.pixel(x, y));
            }
        }
    }
    out
}

impl<T: Scalar> Model<T> {
    /// Generates a composite of `references` into `bbox` of `background`.
    pub fn sample(
        &self,
        background: &Image,
        bbox: &BoundingBox,
        references: &[Image],
        seed: u64,
        opts: SampleOptions<'_>,
    ) -> Result<Composite> {
        if references.is_empty() || references.len() > MAX_REFERENCES {
            return Err(Error::Param(format!(
                "{} references given, expected 1..={MAX_REFERENCES}",
                references.len()
            )));
        }
        let cfg = &self.config;
        if background.width() != cfg.canvas_size || background.height() != cfg.canvas_size {
            return Err(Error::Param(format!(
                "background is {}x{}, model canvas is {}",
                background.width(),
                background.height(),
                cfg.canvas_size
            )));
        }
        let cond = self.conditioning(background, bbox)?;
        let refs = self.reference_values(references)?;
        let targets = match opts.ground_truth {
            Some(gt) => Some(self.distance_targets(&refs, &self.ground_truth_features(gt, bbox)?)?),
            None => None,
        };
        let uncal_global = targets.as_ref().map(|t| mean_row_distance(&refs.global, &t.global));
        let uncal_local = targets.as_ref().map(|t| mean_row_distance(&refs.local, &t.local));
        let switches = self.switches();
        let schedule = self.schedule();
        let shape = cond.zb.shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng| -> Tensor<T> {
            Tensor::from_fn(&shape, |_| T::lit(StandardNormal.sample(rng)))
        };
        let mut z = draw(&mut rng);
        let fwd = ForwardOptions {
            calibration: opts.mode,
            full_attention_maps: opts.full_attention_maps,
        };
        let mut steps = Vec::with_capacity(schedule.timesteps);
        for t in (0..schedule.timesteps).rev() {
            let mut g = Graph::new(&self.store);
            let rv = ReferenceVars {
                global: g.constant(refs.global.clone()),
                local: g.constant(refs.local.clone()),
            };
            let out = self
                .denoiser
                .predict_noise(&mut g, &self.calibration, switches, &cond.zb, &z, &cond.mask, rv, rv, t, fwd)?;
            let mut rec = StepRecord {
                t,
                attention: out.attention.clone(),
                ..Default::default()
            };
            if let Some(tg) = &targets {
                rec.global_uncalibrated = uncal_global;
                rec.local_uncalibrated = uncal_local;
                rec.global_calibrated = out.cal_global.map(|v| mean_row_distance(g.value(v), &tg.global));
                rec.local_calibrated = out.cal_local.map(|v| mean_row_distance(g.value(v), &tg.local));
            }
            steps.push(rec);
            let mean = schedule.posterior_mean(&z, t, g.value(out.eps))?;
            z = if t > 0 {
                let sd = T::lit(schedule.posterior_variance(t).sqrt());
                let noise = draw(&mut rng);
                let data = mean.data().iter().zip(noise.data()).map(|(&m, &n)| m + sd * n).collect();
                Tensor::new(&shape, data)?
            } else {
                mean
            };
        }
        // latent compositing: cells outside the mask come from z_b
        let m = cond.mask.data();
        let hw = m.len();
        let zb = cond.zb.data();
        for (i, v) in z.data_mut().iter_mut().enumerate() {
            if m[i % hw] == T::zero() {
                *v = zb[i];
            }
        }
        let decoded = self.codec.decode(&z)?;
        let image = paste_outside(&decoded, background, bbox);
        Ok(Composite {
            image,
            trajectory: TrajectoryDiagnostics {
                config_hash: cfg.hash(),
                has_ground_truth: targets.is_some(),
                steps,
                correspondence: targets.map(|t| t.delta),
            },
        })
    }

    fn distance_targets(&self, refs: &ReferenceValues<T>, gt: &GroundTruthFeatures<T>) -> Result<Targets<T>> {
        let delta = self.correspondence(refs, gt)?;
        Ok(Targets {
            global: repeat_row(&gt.global, refs.k),
            local: self.local_targets(gt, &delta),
            delta,
        })
    }
}
