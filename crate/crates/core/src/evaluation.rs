//! Metrics and diagnostic reports: feature-space foreground fidelity, SSIM
//! background preservation, feature-distance curves, attention masses, the
//! ablation harness and the reference-count sweep.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::checkpoint;
use crate::denoiser::{Segment, Switches};
use crate::error::{Error, Result};
use crate::image::{BoundingBox, Image};
use crate::model::Model;
use crate::sampler::{SampleOptions, TrajectoryDiagnostics};
use crate::scalar::Scalar;
use crate::synthdata::{derive_seed, DatasetManifest, ExampleRecord, ImageCache, ObjectKind, Split};
use crate::trainer::{finetune, RunOptions, TrainState};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Normalised 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filtering of a `w x h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            horiz[y * ow + x] = (0..n).map(|k| taps[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|k| taps[k] * horiz[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11x11 Gaussian windows and the three channels
/// (dynamic range 1).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Param(format!(
            "ssim: image sizes differ ({}x{} vs {}x{})",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Param(format!("ssim: images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    let taps = gaussian_taps();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let pa: Vec<f64> = (0..w * h).map(|i| a.data()[i * 3 + c] as f64).collect();
        let pb: Vec<f64> = (0..w * h).map(|i| b.data()[i * 3 + c] as f64).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
        let mu_a = filter_valid(&pa, w, h, &taps);
        let mu_b = filter_valid(&pb, w, h, &taps);
        let aa = filter_valid(&prod(&pa, &pa), w, h, &taps);
        let bb = filter_valid(&prod(&pb, &pb), w, h, &taps);
        let ab = filter_valid(&prod(&pa, &pb), w, h, &taps);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM restricted to the region outside `bbox`: both images have the box
/// filled with black before comparison, so identical surroundings score 1.
pub fn ssim_outside(a: &Image, b: &Image, bbox: &BoundingBox) -> Result<f64> {
    let blank = |img: &Image| {
        let mut out = img.clone();
        for y in bbox.y..(bbox.y + bbox.h).min(img.height()) {
            for x in bbox.x..(bbox.x + bbox.w).min(img.width()) {
                out.set_pixel(x, y, [0.0; 3]);
            }
        }
        out
    };
    ssim(&blank(a), &blank(b))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = (na * nb).max(1e-12);
    (dot / denom).clamp(-1.0, 1.0)
}

/// Foreground fidelity score in `[0, 100]`: `100 * max(0, cos)` between the
/// evaluator's global features of two foreground crops.
pub fn dino_analog<T: Scalar>(evaluator: &Model<T>, a: &Image, b: &Image) -> Result<f64> {
    let fa = global_feature(evaluator, a)?;
    let fb = global_feature(evaluator, b)?;
    Ok(100.0 * cosine(&fa, &fb).max(0.0))
}

fn global_feature<T: Scalar>(evaluator: &Model<T>, img: &Image) -> Result<Vec<f64>> {
    let full = BoundingBox {
        x: 0,
        y: 0,
        w: img.width(),
        h: img.height(),
    };
    // crop_foreground rejects degenerate crops and resizes to the encoder input
    let fitted = evaluator.encoder.crop_foreground(img, &full)?;
    let v = evaluator.reference_values(std::slice::from_ref(&fitted))?;
    Ok(v.global.data().iter().map(|x| x.as_f64()).collect())
}

/// Score against the closest of several references, for composites without
/// a ground-truth foreground.
pub fn dino_analog_nearest<T: Scalar>(evaluator: &Model<T>, generated: &Image, references: &[Image]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Param("no references to compare against".into()));
    }
    let mut best = f64::NEG_INFINITY;
    for r in references {
        best = best.max(dino_analog(evaluator, generated, r)?);
    }
    Ok(best)
}

/// One evaluated composite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub example_id: String,
    pub tag: String,
    pub k: usize,
    pub dino_analog: f64,
    pub ssim_bg: f64,
    /// Unix seconds; left empty unless requested so reports stay reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
    pub config_hash: String,
}

impl MetricsRecord {
    pub fn check(&self) -> Result<()> {
        let ok = self.dino_analog.is_finite()
            && (0.0..=100.0).contains(&self.dino_analog)
            && self.ssim_bg.is_finite()
            && (-1.0..=1.0 + 1e-12).contains(&self.ssim_bg);
        if ok {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("metrics of {} out of range", self.example_id)))
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    /// References per composite (capped by what the record offers).
    pub k: usize,
    pub seed: u64,
    pub tag: String,
    /// Also write every composite as PNG below this directory.
    pub save_dir: Option<PathBuf>,
}

/// Composes every record and scores it. References are the record's crops
/// in listed order, unperturbed.
pub fn evaluate_records<T: Scalar, E: Scalar>(
    model: &Model<T>,
    evaluator: &Model<E>,
    manifest: &DatasetManifest,
    records: &[&ExampleRecord],
    opts: &EvalOptions,
    cache: &mut ImageCache,
) -> Result<Vec<MetricsRecord>> {
    let hash = model.config.hash();
    let mut out = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let id = rec.id();
        let k = opts.k.min(rec.references.len());
        if k == 0 {
            return Err(Error::Param(format!("{id}: no references available")));
        }
        let gt = cache.get(manifest, &id, &rec.ground_truth)?.clone();
        let background = cache.get(manifest, &id, &rec.background)?.clone();
        let mut refs = Vec::with_capacity(k);
        for rel in &rec.references[..k] {
            refs.push(cache.get(manifest, &id, rel)?.clone());
        }
        let seed = derive_seed(opts.seed, &[i as u64]);
        let comp = model.sample(&background, &rec.bbox, &refs, seed, SampleOptions::default())?;
        if let Some(dir) = &opts.save_dir {
            let name = format!("{}_view{}.png", rec.object_id, rec.view);
            comp.image.save_png(&dir.join(sanitize(&opts.tag)).join(name))?;
        }
        let gen_fg = comp.image.crop(rec.bbox.x, rec.bbox.y, rec.bbox.w, rec.bbox.h)?;
        let gt_fg = gt.crop(rec.bbox.x, rec.bbox.y, rec.bbox.w, rec.bbox.h)?;
        let m = MetricsRecord {
            example_id: id,
            tag: opts.tag.clone(),
            k,
            dino_analog: dino_analog(evaluator, &gen_fg, &gt_fg)?,
            ssim_bg: ssim_outside(&comp.image, &background, &rec.bbox)?,
            timestamp: None,
            config_hash: hash.clone(),
        };
        m.check()?;
        out.push(m);
    }
    Ok(out)
}

fn sanitize(tag: &str) -> String {
    let s: String = tag
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    if s.is_empty() {
        "default".into()
    } else {
        s
    }
}

/// Mean and standard error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std_err: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary::default();
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std_err = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Summary { n, mean, std_err }
}

/// One-sided paired test that `a - b > 0` at the given confidence.
pub fn paired_margin_positive(a: &[f64], b: &[f64], confidence: f64) -> bool {
    if a.len() != b.len() || a.len() < 2 {
        return false;
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let s = summarize(&d);
    if s.mean <= 0.0 {
        return false;
    }
    if s.std_err == 0.0 {
        return true;
    }
    let dist = StudentsT::new(0.0, 1.0, (d.len() - 1) as f64).expect("positive degrees of freedom");
    s.mean / s.std_err > dist.inverse_cdf(confidence)
}

/// Per-timestep feature distances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub t: usize,
    pub global_calibrated: Option<f64>,
    pub global_uncalibrated: f64,
    pub local_calibrated: Option<f64>,
    pub local_uncalibrated: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceCurve {
    /// Rows in sampling order (`t` descending).
    pub rows: Vec<DistanceRow>,
}

impl DistanceCurve {
    /// Mean calibrated distances over the last `fraction` of sampling steps.
    pub fn final_calibrated(&self, fraction: f64) -> (Option<f64>, Option<f64>) {
        let n = self.rows.len();
        let take = ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1));
        let tail = &self.rows[n.saturating_sub(take)..];
        let mean = |f: &dyn Fn(&DistanceRow) -> Option<f64>| -> Option<f64> {
            let v: Option<Vec<f64>> = tail.iter().map(f).collect();
            v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        (mean(&|r| r.global_calibrated), mean(&|r| r.local_calibrated))
    }

    pub fn uncalibrated(&self) -> (f64, f64) {
        self.rows
            .first()
            .map(|r| (r.global_uncalibrated, r.local_uncalibrated))
            .unwrap_or((0.0, 0.0))
    }

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
        let mut s = String::from("t,global_calibrated,global_uncalibrated,local_calibrated,local_uncalibrated\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.9},{},{:.9}\n",
                r.t,
                f(r.global_calibrated),
                r.global_uncalibrated,
                f(r.local_calibrated),
                r.local_uncalibrated
            ));
        }
        s
    }
}

/// Calibrated and uncalibrated feature distances over the trajectory. The
/// uncalibrated distances must not vary with `t`.
pub fn feature_distance_curve(trajectory: &TrajectoryDiagnostics) -> Result<DistanceCurve> {
    if !trajectory.has_ground_truth {
        return Err(Error::Unavailable(
            "feature distances need the ground-truth composite; none was given".into(),
        ));
    }
    let mut rows = Vec::with_capacity(trajectory.steps.len());
    for s in &trajectory.steps {
        let (Some(gu), Some(lu)) = (s.global_uncalibrated, s.local_uncalibrated) else {
            return Err(Error::Unavailable(format!("step t={} has no distance record", s.t)));
        };
        rows.push(DistanceRow {
            t: s.t,
            global_calibrated: s.global_calibrated,
            global_uncalibrated: gu,
            local_calibrated: s.local_calibrated,
            local_uncalibrated: lu,
        });
    }
    if let Some(first) = rows.first() {
        let (g0, l0) = (first.global_uncalibrated, first.local_uncalibrated);
        if rows.iter().any(|r| r.global_uncalibrated != g0 || r.local_uncalibrated != l0) {
            return Err(Error::Param("uncalibrated feature distance varies with t".into()));
        }
    }
    Ok(DistanceCurve { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMasses {
    pub block: String,
    /// Indexed by `Segment::index`.
    pub masses: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub blocks: Vec<BlockMasses>,
}

impl AttentionReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("block");
        for seg in Segment::ALL {
            s.push(',');
            s.push_str(seg.name());
        }
        s.push('\n');
        for b in &self.blocks {
            s.push_str(&b.block);
            for m in b.masses {
                s.push_str(&format!(",{m:.9}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Segment masses per decoder block averaged over timesteps.
pub fn attention_report(trajectory: &TrajectoryDiagnostics) -> AttentionReport {
    let mut blocks: Vec<(String, [f64; 4], usize)> = Vec::new();
    for s in &trajectory.steps {
        for a in &s.attention {
            let slot = match blocks.iter().position(|b| b.0 == a.block) {
                Some(i) => i,
                None => {
                    blocks.push((a.block.clone(), [0.0; 4], 0));
                    blocks.len() - 1
                }
            };
            for (acc, m) in blocks[slot].1.iter_mut().zip(a.masses) {
                *acc += m;
            }
            blocks[slot].2 += 1;
        }
    }
    AttentionReport {
        blocks: blocks
            .into_iter()
            .map(|(block, m, n)| BlockMasses {
                block,
                masses: m.map(|v| v / n as f64),
            })
            .collect(),
    }
}

/// Switch patterns of the five ablation rows: UCF-only base, no LRFC, no
/// GRFC, no UCF, full.
pub const ABLATION_ROWS: [Switches; 5] = [
    Switches {
        grfc: false,
        lrfc: false,
        use_uncalibrated: true,
        use_calibrated: false,
    },
    Switches {
        grfc: true,
        lrfc: false,
        use_uncalibrated: true,
        use_calibrated: true,
    },
    Switches {
        grfc: false,
        lrfc: true,
        use_uncalibrated: true,
        use_calibrated: true,
    },
    Switches {
        grfc: true,
        lrfc: true,
        use_uncalibrated: false,
        use_calibrated: true,
    },
    Switches {
        grfc: true,
        lrfc: true,
        use_uncalibrated: true,
        use_calibrated: true,
    },
];

pub fn row_label(s: &Switches) -> String {
    let m = |b: bool| if b { "y" } else { "n" };
    format!(
        "grfc={} lrfc={} ucf={} cf={}",
        m(s.grfc),
        m(s.lrfc),
        m(s.use_uncalibrated),
        m(s.use_calibrated)
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub switches: Switches,
    pub present: bool,
    pub note: String,
    pub dino_analog: Summary,
    pub ssim_bg: Summary,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub records: Vec<MetricsRecord>,
}

impl AblationTable {
    /// Whether the full row scores at least as high as every present ablation.
    pub fn full_leads(&self) -> Option<bool> {
        let full = self.rows.last().filter(|r| r.present)?;
        Some(
            self.rows[..self.rows.len() - 1]
                .iter()
                .filter(|r| r.present)
                .all(|r| full.dino_analog.mean >= r.dino_analog.mean),
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("grfc,lrfc,ucf,cf,present,n,dino_analog,dino_analog_se,ssim_bg,config_hash,note\n");
        for r in &self.rows {
            let w = r.switches;
            s.push_str(&format!(
                "{},{},{},{},{},{},{:.6},{:.6},{:.6},{},{}\n",
                w.grfc as u8,
                w.lrfc as u8,
                w.use_uncalibrated as u8,
                w.use_calibrated as u8,
                r.present as u8,
                r.dino_analog.n,
                r.dino_analog.mean,
                r.dino_analog.std_err,
                r.ssim_bg.mean,
                r.config_hash,
                r.note.replace(',', ";")
            ));
        }
        s.push_str(&format!(
            "# trend: {}\n",
            match self.full_leads() {
                Some(true) => "full >= every ablation",
                Some(false) => "full below at least one ablation",
                None => "full row absent",
            }
        ));
        s
    }
}

#[derive(Clone, Debug)]
pub struct AblationOptions {
    pub k: usize,
    pub seed: u64,
    /// Finetune each row on every test object before composing it.
    pub finetune: bool,
    /// Finetuning step cap per object (`None`: config epochs).
    pub finetune_steps: Option<u64>,
    /// Only the first `n` test objects.
    pub max_objects: Option<usize>,
    /// Restrict to objects of this kind.
    pub kind: Option<ObjectKind>,
    pub save_dir: Option<PathBuf>,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            k: 4,
            seed: 0,
            finetune: true,
            finetune_steps: None,
            max_objects: None,
            kind: None,
            save_dir: None,
        }
    }
}

/// Test records grouped by object, honoring `max_objects` and `kind`.
pub fn test_objects<'m>(manifest: &'m DatasetManifest, opts: &AblationOptions) -> Vec<(String, Vec<&'m ExampleRecord>)> {
    let mut groups: Vec<(String, Vec<&ExampleRecord>)> = Vec::new();
    for r in manifest.split(Split::Test) {
        if opts.kind.is_some_and(|k| k != r.object_kind) {
            continue;
        }
        match groups.iter_mut().find(|(id, _)| *id == r.object_id) {
            Some(g) => g.1.push(r),
            None => groups.push((r.object_id.clone(), vec![r])),
        }
    }
    if let Some(n) = opts.max_objects {
        groups.truncate(n);
    }
    groups
}

/// Finetunes (optionally) and evaluates one trained state on every test object.
pub fn evaluate_state<T: Scalar, E: Scalar>(
    state: &TrainState<T>,
    evaluator: &Model<E>,
    manifest: &DatasetManifest,
    opts: &AblationOptions,
    tag: &str,
    cache: &mut ImageCache,
) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for (object, records) in test_objects(manifest, opts) {
        let tuned;
        let model = if opts.finetune {
            let run = RunOptions {
                max_steps: opts.finetune_steps,
                ..Default::default()
            };
            tuned = finetune(state.clone(), &object, manifest, &run)?.state;
            &tuned.model
        } else {
            &state.model
        };
        let eval = EvalOptions {
            k: opts.k,
            seed: derive_seed(opts.seed, &[fnv(&object)]),
            tag: tag.to_string(),
            save_dir: opts.save_dir.clone(),
        };
        out.extend(evaluate_records(model, evaluator, manifest, &records, &eval, cache)?);
    }
    Ok(out)
}

fn fnv(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Evaluates the five ablation rows. Rows whose checkpoint is missing,
/// unreadable or trained with other switches are listed as absent.
pub fn run_ablation<T: Scalar, E: Scalar>(
    manifest: &DatasetManifest,
    checkpoints: &[Option<PathBuf>; 5],
    evaluator: &Model<E>,
    opts: &AblationOptions,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut cache = ImageCache::default();
    for (expected, path) in ABLATION_ROWS.iter().zip(checkpoints) {
        let absent = |note: String| AblationRow {
            switches: *expected,
            present: false,
            note,
            dino_analog: Summary::default(),
            ssim_bg: Summary::default(),
            config_hash: String::new(),
        };
        let Some(path) = path else {
            rows.push(absent("no checkpoint given".into()));
            continue;
        };
        let state = match load_row::<T>(path) {
            Ok(s) => s,
            Err(e) => {
                rows.push(absent(format!("{}: {e}", path.display())));
                continue;
            }
        };
        let got = state.model.switches();
        if got != *expected {
            rows.push(absent(format!(
                "{} was trained with {}, expected {}",
                path.display(),
                row_label(&got),
                row_label(expected)
            )));
            continue;
        }
        let tag = row_label(expected);
        let rec = evaluate_state(&state, evaluator, manifest, opts, &tag, &mut cache)?;
        let dino: Vec<f64> = rec.iter().map(|r| r.dino_analog).collect();
        let ssim_bg: Vec<f64> = rec.iter().map(|r| r.ssim_bg).collect();
        rows.push(AblationRow {
            switches: *expected,
            present: true,
            note: String::new(),
            dino_analog: summarize(&dino),
            ssim_bg: summarize(&ssim_bg),
            config_hash: state.model.config.hash(),
        });
        records.extend(rec);
    }
    Ok(AblationTable { rows, records })
}

fn load_row<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    if !path.exists() {
        return Err(Error::Unavailable("file not found".into()));
    }
    checkpoint::load(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCountRow {
    pub k: usize,
    pub dino_analog: Summary,
    /// Records lacking `k` references are skipped and counted here.
    pub skipped: usize,
    pub note: String,
}

/// dino_analog as a function of the number of references, K = 1..=5.
pub fn vary_reference_count<T: Scalar, E: Scalar>(
    state: &TrainState<T>,
    evaluator: &Model<E>,
    manifest: &DatasetManifest,
    opts: &AblationOptions,
) -> Result<Vec<ReferenceCountRow>> {
    let mut cache = ImageCache::default();
    let groups = test_objects(manifest, opts);
    let mut tuned: Vec<(Model<T>, Vec<&ExampleRecord>)> = Vec::new();
    for (object, records) in groups {
        let model = if opts.finetune {
            let run = RunOptions {
                max_steps: opts.finetune_steps,
                ..Default::default()
            };
            finetune(state.clone(), &object, manifest, &run)?.state.model
        } else {
            state.model.clone()
        };
        tuned.push((model, records));
    }
    let mut rows = Vec::new();
    for k in 1..=crate::synthdata::MAX_REFERENCES {
        let mut scores = Vec::new();
        let mut skipped = 0;
        for (i, (model, records)) in tuned.iter().enumerate() {
            let usable: Vec<&ExampleRecord> = records.iter().copied().filter(|r| r.references.len() >= k).collect();
            skipped += records.len() - usable.len();
            let eval = EvalOptions {
                k,
                seed: derive_seed(opts.seed, &[i as u64]),
                tag: format!("k={k}"),
                save_dir: opts.save_dir.clone(),
            };
            scores.extend(
                evaluate_records(model, evaluator, manifest, &usable, &eval, &mut cache)?
                    .into_iter()
                    .map(|r| r.dino_analog),
            );
        }
        let note = if skipped > 0 {
            format!("{skipped} record(s) have fewer than {k} references")
        } else {
            String::new()
        };
        rows.push(ReferenceCountRow {
            k,
            dino_analog: summarize(&scores),
            skipped,
            note,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::synthdata::render_scene;

    fn noise_image(seed: u64, w: usize, h: usize) -> Image {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image::new(w, h, (0..w * h * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn ssim_identity_symmetry_and_errors() {
        let a = noise_image(1, 16, 16);
        let b = noise_image(2, 16, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        assert!(ssim(&a, &noise_image(3, 16, 17)).is_err());
        assert!(ssim(&noise_image(3, 8, 8), &noise_image(4, 8, 8)).is_err());
        let s = ssim(&a, &b).unwrap();
        assert!((-1.0..1.0).contains(&s));
    }

    #[test]
    fn ssim_outside_ignores_box() {
        let a = noise_image(1, 16, 16);
        let mut b = a.clone();
        let bbox = BoundingBox { x: 4, y: 4, w: 8, h: 8 };
        b.set_pixel(6, 6, [1.0, 0.0, 0.5]);
        assert!((ssim_outside(&a, &b, &bbox).unwrap() - 1.0).abs() < 1e-12);
        b.set_pixel(0, 0, [0.3, 0.9, 0.1]);
        assert!(ssim_outside(&a, &b, &bbox).unwrap() < 1.0);
    }

    #[test]
    fn dino_identity_symmetry_and_inversion() {
        let cfg = RunConfig::micro();
        let model = Model::<f64>::new(&cfg, 2).unwrap();
        let s = render_scene(3, ObjectKind::MarkedSprite, 0, 3, 16, 4);
        let t = render_scene(3, ObjectKind::MarkedSprite, 1, 3, 16, 4);
        assert!((dino_analog(&model, &s.crop, &s.crop).unwrap() - 100.0).abs() < 1e-9);
        let ab = dino_analog(&model, &s.crop, &t.crop).unwrap();
        let ba = dino_analog(&model, &t.crop, &s.crop).unwrap();
        assert!((ab - ba).abs() < 1e-6);
        let mut inv = s.crop.clone();
        for v in inv.data_mut() {
            *v = 1.0 - *v;
        }
        assert!(dino_analog(&model, &s.crop, &inv).unwrap() < 100.0);
        assert!(dino_analog(&model, &Image::zeros(1, 5), &s.crop).is_err());
        let near = dino_analog_nearest(&model, &s.crop, &[inv, s.crop.clone()]).unwrap();
        assert!((near - 100.0).abs() < 1e-9);
    }

    #[test]
    fn paired_margin() {
        assert!(paired_margin_positive(&[3.0, 3.1, 2.9], &[1.0, 1.0, 1.1], 0.95));
        assert!(!paired_margin_positive(&[1.0, 3.0, 1.0], &[1.1, 1.0, 1.2], 0.95));
        assert!(!paired_margin_positive(&[2.0], &[1.0], 0.95));
    }

    #[test]
    fn missing_ground_truth_is_unavailable() {
        let t = TrajectoryDiagnostics::default();
        assert!(matches!(feature_distance_curve(&t), Err(Error::Unavailable(_))));
    }

    #[test]
    fn ablation_rows_follow_table_pattern() {
        assert_eq!(ABLATION_ROWS[0], Switches::base());
        assert_eq!(ABLATION_ROWS[4], Switches::full());
        let cf: Vec<bool> = ABLATION_ROWS.iter().map(|s| s.use_calibrated).collect();
        assert_eq!(cf, [false, true, true, true, true]);
    }
}
