//! Reference feature calibration: residual cross-attention from reference
//! features (queries) onto denoiser encoder tokens (keys and values), and the
//! squared-distance losses that pull calibrated features toward ground-truth
//! foreground features.
//!
//! For a feature row `f` and encoder tokens `F`:
//!
//! ```text
//! f~ = softmax((f Wq) (F Wk)^T / sqrt(d)) (F Wv) Wo + f
//! ```
//!
//! `Wo` starts at zero, so every branch is an exact identity at initialisation.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::{LossReduction, RunConfig};
use crate::correspondence::gather_targets;
use crate::encoder::{GlobalFeature, LocalFeatures};
use crate::error::{Error, Result};
use crate::nn::{attention, Init, Linear};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One cross-attention calibration branch.
#[derive(Clone, Debug)]
pub struct CalibrationBranch {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl CalibrationBranch {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        feat_dim: usize,
        fen_dim: usize,
        attn_dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), feat_dim, attn_dim, false, Init::FanIn, rng),
            key: Linear::new(store, &format!("{name}.key"), fen_dim, attn_dim, false, Init::FanIn, rng),
            value: Linear::new(store, &format!("{name}.value"), fen_dim, attn_dim, false, Init::FanIn, rng),
            output: Linear::new(store, &format!("{name}.output"), attn_dim, feat_dim, false, Init::Zero, rng),
            heads,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value, &self.output]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }

    /// Calibrates every row of `features` (`[R, D]`) against `fen` (`[M, D_en]`).
    /// Returns the calibrated rows and the per-head attention probabilities.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, features: Var, fen: Var) -> (Var, Vec<Var>) {
        let q = self.query.forward(g, features);
        let k = self.key.forward(g, fen);
        let v = self.value.forward(g, fen);
        let (a, probs) = attention(g, q, k, v, self.heads);
        let delta = self.output.forward(g, a);
        (g.add(features, delta), probs)
    }
}

/// The global and local calibration branches.
#[derive(Clone, Debug)]
pub struct Calibration {
    pub global: CalibrationBranch,
    pub local: CalibrationBranch,
}

impl Calibration {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &RunConfig, rng: &mut impl Rng) -> Self {
        let make = |store: &mut ParamStore<T>, name: &str, rng: &mut _| {
            CalibrationBranch::new(store, name, cfg.feat_dim, cfg.fen_dim, cfg.fen_dim, cfg.calib_heads, rng)
        };
        Self {
            global: make(store, "calib.global", rng),
            local: make(store, "calib.local", rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.global.params();
        v.extend(self.local.params());
        v
    }
}

fn check_finite<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

fn run_branch<T: Scalar>(
    branch: &CalibrationBranch,
    store: &ParamStore<T>,
    features: &Tensor<T>,
    fen: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_finite(features, "calibration input features")?;
    check_finite(fen, "encoder feature bundle")?;
    let expect = |what: &str, want: usize, got: usize| -> Result<()> {
        if want == got {
            Ok(())
        } else {
            Err(Error::Shape {
                what: what.into(),
                expected: format!("{want}"),
                actual: format!("{got}"),
            })
        }
    };
    expect("calibration feature width", branch.query.in_dim, features.cols())?;
    expect("encoder feature width", branch.key.in_dim, fen.cols())?;
    if fen.rows() == 0 {
        return Err(Error::Param("encoder feature bundle has no tokens".into()));
    }
    let mut g = Graph::new(store);
    let f = g.constant(features.clone());
    let e = g.constant(fen.clone());
    let (out, _) = branch.forward(&mut g, f, e);
    let out = g.value(out).clone();
    check_finite(&out, "calibrated features")?;
    Ok(out)
}

/// Calibrated version of one global feature.
pub fn calibrate_global<T: Scalar>(
    feature: &GlobalFeature<T>,
    fen: &Tensor<T>,
    calib: &Calibration,
    store: &ParamStore<T>,
) -> Result<GlobalFeature<T>> {
    Ok(GlobalFeature {
        vector: run_branch(&calib.global, store, &feature.vector, fen)?,
        owner: feature.owner,
    })
}

/// Calibrated version of one reference's local features, row by row.
pub fn calibrate_local<T: Scalar>(
    features: &LocalFeatures<T>,
    fen: &Tensor<T>,
    calib: &Calibration,
    store: &ParamStore<T>,
) -> Result<LocalFeatures<T>> {
    Ok(LocalFeatures {
        rows: run_branch(&calib.local, store, &features.rows, fen)?,
        owner: features.owner,
    })
}

fn reduction_scale(reduction: LossReduction, count: usize) -> f64 {
    match reduction {
        LossReduction::Sum => 1.0,
        LossReduction::Mean => 1.0 / count.max(1) as f64,
    }
}

/// `sum_k ||f~_k - f^||^2` inside a graph; `calibrated` is `[K, D]` and the
/// constant `target` is `[1, D]`.
pub fn global_loss_var<T: Scalar>(
    g: &mut Graph<'_, T>,
    calibrated: Var,
    target: &Tensor<T>,
    reduction: LossReduction,
) -> Var {
    let k = g.shape(calibrated)[0];
    let parts: Vec<&Tensor<T>> = std::iter::repeat(target).take(k).collect();
    let tiled = g.constant(Tensor::concat_rows(&parts).expect("target rows"));
    let d = g.sub(calibrated, tiled);
    let s = g.sum_squares(d);
    g.scale(s, T::lit(reduction_scale(reduction, k)))
}

/// `sum_k sum_i ||f~_{k,i} - f^_{δ(i)}||^2` inside a graph; `calibrated` is
/// `[K N, D]` and `targets` holds the already gathered rows in the same order.
pub fn local_loss_var<T: Scalar>(
    g: &mut Graph<'_, T>,
    calibrated: Var,
    targets: &Tensor<T>,
    reduction: LossReduction,
) -> Var {
    let rows = g.shape(calibrated)[0];
    let t = g.constant(targets.clone());
    let d = g.sub(calibrated, t);
    let s = g.sum_squares(d);
    g.scale(s, T::lit(reduction_scale(reduction, rows)))
}

/// Global calibration loss over plain values.
pub fn global_calibration_loss<T: Scalar>(calibrated: &[GlobalFeature<T>], target: &GlobalFeature<T>) -> Result<f64> {
    if calibrated.is_empty() {
        return Err(Error::Param("global calibration loss needs K ≥ 1".into()));
    }
    let mut total = 0.0;
    for f in calibrated {
        if f.vector.len() != target.vector.len() {
            return Err(Error::Shape {
                what: "global calibration loss".into(),
                expected: format!("{}", target.vector.len()),
                actual: format!("{}", f.vector.len()),
            });
        }
        total += f
            .vector
            .data()
            .iter()
            .zip(target.vector.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum::<f64>();
    }
    Ok(total)
}

/// Local calibration loss over plain values; `deltas[k]` maps the rows of
/// `calibrated[k]` onto rows of `gt_local`.
pub fn local_calibration_loss<T: Scalar>(
    calibrated: &[LocalFeatures<T>],
    gt_local: &LocalFeatures<T>,
    deltas: &[Vec<usize>],
) -> Result<f64> {
    if calibrated.len() != deltas.len() {
        return Err(Error::Param(format!(
            "{} calibrated sets but {} correspondences",
            calibrated.len(),
            deltas.len()
        )));
    }
    let mut total = 0.0;
    for (f, delta) in calibrated.iter().zip(deltas) {
        if f.rows.cols() != gt_local.rows.cols() || f.rows.rows() != delta.len() {
            return Err(Error::Shape {
                what: "local calibration loss".into(),
                expected: format!("[{}, {}]", delta.len(), gt_local.rows.cols()),
                actual: format!("{:?}", f.rows.shape()),
            });
        }
        if let Some(bad) = delta.iter().find(|&&j| j >= gt_local.rows.rows()) {
            return Err(Error::Param(format!("correspondence index {bad} out of range")));
        }
        let t = gather_targets(&gt_local.rows, delta);
        total += f
            .rows
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum::<f64>();
    }
    Ok(total)
}
