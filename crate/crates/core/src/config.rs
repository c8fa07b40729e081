//! Run configuration: one flat key/value table covering model dimensions,
//! ablation switches, the noise schedule and training hyperparameters.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synthdata::{PerturbConfig, MAX_REFERENCES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Plain sums over references and patches.
    Sum,
    /// Sums divided by the number of summed feature vectors.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // image and latent geometry
    pub canvas_size: usize,
    pub latent_factor: usize,
    pub latent_scale: f64,

    // foreground encoder
    pub ref_size: usize,
    pub patch_size: usize,
    pub enc_width: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub enc_mlp_ratio: usize,
    pub feat_dim: usize,
    pub separate_adapters: bool,
    pub freeze_encoder_backbone: bool,

    // denoiser
    pub unet_channels: Vec<usize>,
    pub unet_attention: Vec<bool>,
    pub temb_dim: usize,
    pub norm_groups: usize,
    pub attn_heads: usize,

    // calibration
    pub fen_dim: usize,
    pub fen_levels: usize,
    pub calib_heads: usize,
    pub calib_grad_to_encoder: bool,
    /// Let calibration gradients reach the denoiser encoder through F^en.
    pub calib_grad_to_denoiser: bool,
    pub match_on_backbone: bool,

    // ablation switches
    pub grfc: bool,
    pub lrfc: bool,
    pub use_calibrated: bool,
    pub use_uncalibrated: bool,

    // noise schedule
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    // optimisation
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub lambda_g: f64,
    pub lambda_l: f64,
    pub loss_reduction: LossReduction,
    pub seed: u64,
    pub num_refs: usize,
    pub random_k: bool,
    pub log_interval: usize,
    pub checkpoint_interval: usize,
    pub workers: usize,

    // reference perturbation
    pub perturb_rotation_deg: f32,
    pub perturb_scale: f32,
    pub perturb_flip_prob: f64,
    pub perturb_brightness: f32,
    pub perturb_contrast: f32,
    pub perturb_saturation: f32,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            canvas_size: 64,
            latent_factor: 4,
            latent_scale: 0.5,
            ref_size: 64,
            patch_size: 16,
            enc_width: 64,
            enc_layers: 2,
            enc_heads: 4,
            enc_mlp_ratio: 4,
            feat_dim: 64,
            separate_adapters: false,
            freeze_encoder_backbone: true,
            unet_channels: vec![32, 64, 64],
            unet_attention: vec![false, true, true],
            temb_dim: 128,
            norm_groups: 8,
            attn_heads: 1,
            fen_dim: 64,
            fen_levels: 2,
            calib_heads: 1,
            calib_grad_to_encoder: false,
            calib_grad_to_denoiser: false,
            match_on_backbone: false,
            grfc: true,
            lrfc: true,
            use_calibrated: true,
            use_uncalibrated: true,
            timesteps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            pretrain_epochs: 30,
            finetune_epochs: 150,
            max_steps: 0,
            batch_size: 16,
            lr: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            lambda_g: 0.1,
            lambda_l: 0.1,
            loss_reduction: LossReduction::Sum,
            seed: 0,
            num_refs: 4,
            random_k: true,
            log_interval: 1,
            checkpoint_interval: 0,
            workers: 1,
            perturb_rotation_deg: 15.0,
            perturb_scale: 0.1,
            perturb_flip_prob: 0.5,
            perturb_brightness: 0.2,
            perturb_contrast: 0.2,
            perturb_saturation: 0.2,
        }
    }
}

fn check(ok: bool, key: &str, constraint: &str, errors: &mut Vec<String>) {
    if !ok {
        errors.push(format!("{key}: must satisfy {constraint}"));
    }
}

impl RunConfig {
    /// A tiny configuration for gradient checks and smoke runs.
    pub fn micro() -> Self {
        Self {
            canvas_size: 16,
            ref_size: 16,
            patch_size: 8,
            enc_width: 8,
            enc_layers: 1,
            enc_heads: 2,
            enc_mlp_ratio: 2,
            feat_dim: 8,
            unet_channels: vec![8],
            unet_attention: vec![true],
            temb_dim: 8,
            norm_groups: 2,
            fen_dim: 8,
            fen_levels: 1,
            timesteps: 20,
            batch_size: 2,
            num_refs: 2,
            ..Self::default()
        }
    }

    pub fn latent_size(&self) -> usize {
        self.canvas_size / self.latent_factor
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.latent_factor * self.latent_factor
    }

    pub fn num_patches(&self) -> usize {
        (self.ref_size / self.patch_size).pow(2)
    }

    pub fn perturb(&self) -> PerturbConfig {
        PerturbConfig {
            max_rotation_deg: self.perturb_rotation_deg,
            scale_jitter: self.perturb_scale,
            flip_prob: self.perturb_flip_prob,
            brightness: self.perturb_brightness,
            contrast: self.perturb_contrast,
            saturation: self.perturb_saturation,
        }
    }

    /// Every violated constraint, each naming its key.
    pub fn validate(&self) -> Result<()> {
        let mut e = Vec::new();
        let levels = self.unet_channels.len();
        check(self.latent_factor >= 1, "latent_factor", "latent_factor ≥ 1", &mut e);
        check(
            self.latent_factor >= 1 && self.canvas_size > 0 && self.canvas_size % self.latent_factor == 0,
            "canvas_size",
            "a positive multiple of latent_factor",
            &mut e,
        );
        let lat = self.canvas_size / self.latent_factor.max(1);
        check(
            levels >= 1 && lat % (1 << (levels - 1)) == 0 && lat >> (levels - 1) >= 1,
            "canvas_size",
            "latent size divisible by 2^(levels-1)",
            &mut e,
        );
        check(self.latent_scale > 0.0, "latent_scale", "latent_scale > 0", &mut e);
        check(
            self.patch_size > 0 && self.ref_size % self.patch_size.max(1) == 0 && self.ref_size > 0,
            "patch_size",
            "patch_size divides ref_size",
            &mut e,
        );
        check(
            self.enc_heads > 0 && self.enc_width % self.enc_heads.max(1) == 0,
            "enc_heads",
            "enc_heads divides enc_width",
            &mut e,
        );
        check(self.enc_layers >= 1, "enc_layers", "enc_layers ≥ 1", &mut e);
        check(self.enc_mlp_ratio >= 1, "enc_mlp_ratio", "enc_mlp_ratio ≥ 1", &mut e);
        check(self.feat_dim >= 1, "feat_dim", "feat_dim ≥ 1", &mut e);
        check(levels >= 1, "unet_channels", "at least one level", &mut e);
        check(
            self.unet_attention.len() == levels,
            "unet_attention",
            "one entry per unet_channels level",
            &mut e,
        );
        check(
            self.unet_channels.iter().all(|&c| c > 0 && c % self.attn_heads.max(1) == 0),
            "attn_heads",
            "attn_heads divides every unet channel count",
            &mut e,
        );
        check(self.attn_heads >= 1, "attn_heads", "attn_heads ≥ 1", &mut e);
        check(self.temb_dim >= 2 && self.temb_dim % 2 == 0, "temb_dim", "an even number ≥ 2", &mut e);
        check(self.norm_groups >= 1, "norm_groups", "norm_groups ≥ 1", &mut e);
        check(
            self.fen_levels >= 1 && self.fen_levels <= levels,
            "fen_levels",
            "1 ≤ fen_levels ≤ number of unet levels",
            &mut e,
        );
        check(
            self.calib_heads >= 1 && self.fen_dim % self.calib_heads.max(1) == 0,
            "calib_heads",
            "calib_heads divides fen_dim",
            &mut e,
        );
        check(
            self.use_calibrated || self.use_uncalibrated,
            "use_calibrated",
            "use_calibrated or use_uncalibrated is true",
            &mut e,
        );
        check(self.timesteps >= 1, "timesteps", "timesteps ≥ 1", &mut e);
        check(
            0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0,
            "beta_end",
            "0 < beta_start ≤ beta_end < 1",
            &mut e,
        );
        check(self.batch_size >= 1, "batch_size", "batch_size ≥ 1", &mut e);
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "lr > 0", &mut e);
        check((0.0..1.0).contains(&self.adam_beta1), "adam_beta1", "0 ≤ β1 < 1", &mut e);
        check((0.0..1.0).contains(&self.adam_beta2), "adam_beta2", "0 ≤ β2 < 1", &mut e);
        check(self.adam_eps > 0.0, "adam_eps", "adam_eps > 0", &mut e);
        check(self.grad_clip >= 0.0, "grad_clip", "grad_clip ≥ 0 (0 disables)", &mut e);
        check(self.lambda_g >= 0.0, "lambda_g", "λ_g ≥ 0", &mut e);
        check(self.lambda_l >= 0.0, "lambda_l", "λ_l ≥ 0", &mut e);
        check(
            (1..=MAX_REFERENCES).contains(&self.num_refs),
            "num_refs",
            "1 ≤ K ≤ 5",
            &mut e,
        );
        check(self.log_interval >= 1, "log_interval", "log_interval ≥ 1", &mut e);
        check(self.workers >= 1, "workers", "workers ≥ 1", &mut e);
        check(
            (0.0..=1.0).contains(&self.perturb_flip_prob),
            "perturb_flip_prob",
            "0 ≤ p ≤ 1",
            &mut e,
        );
        check(
            [
                self.perturb_rotation_deg,
                self.perturb_scale,
                self.perturb_brightness,
                self.perturb_contrast,
                self.perturb_saturation,
            ]
            .iter()
            .all(|v| *v >= 0.0),
            "perturb_*",
            "non-negative jitter ranges",
            &mut e,
        );
        if e.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(e.join("; ")))
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical text form: every key, fixed order.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical form, truncated to 16 characters.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(digest)[..16].to_string()
    }
}
