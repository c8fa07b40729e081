use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use refcomp_core::checkpoint::{self, CHECKPOINT_VERSION};
use refcomp_core::config::RunConfig;
use refcomp_core::denoiser::CalibrationMode;
use refcomp_core::evaluation::{
    attention_report, evaluate_records, feature_distance_curve, run_ablation, summarize, AblationOptions,
    EvalOptions,
};
use refcomp_core::image::{BoundingBox, Image};
use refcomp_core::model::Model;
use refcomp_core::plot;
use refcomp_core::sampler::{SampleOptions, TrajectoryDiagnostics};
use refcomp_core::scalar::Scalar;
use refcomp_core::synthdata::{self, load_manifest, DatasetManifest, GenConfig, ImageCache, Split, MANIFEST_VERSION};
use refcomp_core::trainer::{self, read_metrics, RunOptions, Stage, TrainState};
use refcomp_core::{Error, Result};

use crate::{AblateArgs, ComposeArgs, ConfigArgs, EvalArgs, FinetuneArgs, GenDataArgs, PlotArgs, PretrainArgs};

/// Environment variable naming a directory for auxiliary outputs (composite
/// PNGs written during `eval` and `ablate`).
pub const SCRATCH_ENV: &str = "REFCOMP_SCRATCH";

pub fn version_string() -> String {
    format!(
        "{} (checkpoint format {CHECKPOINT_VERSION}, manifest format {MANIFEST_VERSION})",
        refcomp_core::VERSION
    )
}

fn scratch_dir() -> Option<PathBuf> {
    std::env::var_os(SCRATCH_ENV).map(PathBuf::from)
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value).expect("serializable"))
}

fn manifest_in(dir: &Path) -> Result<DatasetManifest> {
    load_manifest(&dir.join("manifest.json"))
}

fn is_f64(ckpt: &Path) -> Result<bool> {
    Ok(checkpoint::read_header(ckpt)?.dtype == f64::DTYPE)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = GenConfig {
        objects: a.objects,
        pretrain_objects: a.pretrain_objects,
        views: a.views,
        canvas_size: a.canvas,
        latent_factor: a.latent_factor,
        seed: a.seed,
    };
    let m = synthdata::generate_dataset(&cfg, &a.out, a.overwrite)?;
    println!(
        "wrote {} scenes ({} pretrain, {} finetune, {} test) to {}",
        m.records.len(),
        m.split(Split::Pretrain).count(),
        m.split(Split::Finetune).count(),
        m.split(Split::Test).count(),
        a.out.display()
    );
    Ok(())
}

pub fn config(a: ConfigArgs) -> Result<()> {
    let cfg = match &a.file {
        Some(p) => RunConfig::load(p)?,
        None if a.micro => RunConfig::micro(),
        None => RunConfig::default(),
    };
    print!("{}", cfg.to_toml());
    println!("# hash {}", cfg.hash());
    Ok(())
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let manifest = manifest_in(&a.data)?;
    let opts = RunOptions {
        checkpoint: Some(a.out.clone()),
        metrics: Some(a.metrics.clone().unwrap_or_else(|| with_suffix(&a.out, ".metrics.jsonl"))),
        max_steps: a.max_steps,
    };
    if let Some(resume) = &a.resume {
        return if is_f64(resume)? {
            resume_pretrain::<f64>(resume, &manifest, &opts)
        } else {
            resume_pretrain::<f32>(resume, &manifest, &opts)
        };
    }
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.validate()?;
    }
    if a.f64 {
        run_pretrain(TrainState::<f64>::new(Model::new(&cfg, cfg.seed)?), &manifest, &opts)
    } else {
        run_pretrain(TrainState::<f32>::new(Model::new(&cfg, cfg.seed)?), &manifest, &opts)
    }
}

fn resume_pretrain<T: Scalar>(ckpt: &Path, manifest: &DatasetManifest, opts: &RunOptions) -> Result<()> {
    let state: TrainState<T> = checkpoint::load(ckpt)?;
    if state.stage != Stage::Pretrain {
        return Err(Error::Config(format!("{} is not a pretrain checkpoint", ckpt.display())));
    }
    run_pretrain(state, manifest, opts)
}

fn run_pretrain<T: Scalar>(state: TrainState<T>, manifest: &DatasetManifest, opts: &RunOptions) -> Result<()> {
    let hash = state.model.config.hash();
    let out = trainer::pretrain(state, manifest, opts)?;
    report_training(&out.metrics, out.state.step, &hash, opts);
    Ok(())
}

fn report_training(metrics: &[trainer::MetricRecord], step: u64, hash: &str, opts: &RunOptions) {
    if let Some(last) = metrics.last() {
        println!(
            "step {step}: l_sd {:.5} l_gc {:.5} l_lc {:.5} total {:.5}",
            last.l_sd, last.l_gc, last.l_lc, last.total
        );
    }
    if let Some(p) = &opts.checkpoint {
        println!("checkpoint {} (config {hash})", p.display());
    }
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let manifest = manifest_in(&a.data)?;
    let opts = RunOptions {
        checkpoint: Some(a.out.clone()),
        metrics: Some(a.metrics.clone().unwrap_or_else(|| with_suffix(&a.out, ".metrics.jsonl"))),
        max_steps: a.max_steps,
    };
    if is_f64(&a.ckpt)? {
        run_finetune::<f64>(&a, &manifest, &opts)
    } else {
        run_finetune::<f32>(&a, &manifest, &opts)
    }
}

fn run_finetune<T: Scalar>(a: &FinetuneArgs, manifest: &DatasetManifest, opts: &RunOptions) -> Result<()> {
    let state: TrainState<T> = checkpoint::load(&a.ckpt)?;
    let hash = state.model.config.hash();
    let out = trainer::finetune(state, &a.object, manifest, opts)?;
    report_training(&out.metrics, out.state.step, &hash, opts);
    Ok(())
}

pub fn compose(a: ComposeArgs) -> Result<()> {
    if is_f64(&a.ckpt)? {
        run_compose::<f64>(&a)
    } else {
        run_compose::<f32>(&a)
    }
}

fn run_compose<T: Scalar>(a: &ComposeArgs) -> Result<()> {
    let state: TrainState<T> = checkpoint::load(&a.ckpt)?;
    let background = Image::load_png(&a.background)?;
    let bbox = BoundingBox::parse(&a.bbox)?;
    let refs = a.refs.iter().map(|p| Image::load_png(p)).collect::<Result<Vec<_>>>()?;
    let gt = a.ground_truth.as_ref().map(|p| Image::load_png(p)).transpose()?;
    if a.dump_correspondence.is_some() && gt.is_none() {
        return Err(Error::Unavailable("--dump-correspondence needs --ground-truth".into()));
    }
    let opts = SampleOptions {
        mode: if a.bypass_calibration {
            CalibrationMode::Bypass
        } else {
            CalibrationMode::Active
        },
        ground_truth: gt.as_ref(),
        full_attention_maps: a.dump_attention.is_some(),
    };
    let comp = state.model.sample(&background, &bbox, &refs, a.seed, opts)?;
    comp.image.save_png(&a.out)?;
    let mut trajectory = comp.trajectory;
    if let Some(p) = &a.dump_correspondence {
        write_json(p, &trajectory.correspondence)?;
    }
    if let Some(p) = &a.dump_attention {
        let maps: Vec<_> = trajectory.steps.iter().map(|s| (s.t, &s.attention)).collect();
        write_json(p, &maps)?;
        for s in &mut trajectory.steps {
            for r in &mut s.attention {
                r.map = None;
            }
        }
    }
    if let Some(p) = &a.dump_trajectory {
        write_json(p, &trajectory)?;
    }
    println!("wrote {} (config {})", a.out.display(), trajectory.config_hash);
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "pretrain" => Ok(Split::Pretrain),
        "finetune" => Ok(Split::Finetune),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("unknown split {other:?} (pretrain, finetune, test)"))),
    }
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let split = parse_split(&a.split)?;
    let evaluator = a.evaluator.clone().unwrap_or_else(|| a.ckpt.clone());
    match (is_f64(&a.ckpt)?, is_f64(&evaluator)?) {
        (false, false) => run_eval::<f32, f32>(&a, split, &evaluator),
        (false, true) => run_eval::<f32, f64>(&a, split, &evaluator),
        (true, false) => run_eval::<f64, f32>(&a, split, &evaluator),
        (true, true) => run_eval::<f64, f64>(&a, split, &evaluator),
    }
}

fn run_eval<T: Scalar, E: Scalar>(a: &EvalArgs, split: Split, evaluator: &Path) -> Result<()> {
    let manifest = manifest_in(&a.data)?;
    let state: TrainState<T> = checkpoint::load(&a.ckpt)?;
    let eval_state: TrainState<E> = checkpoint::load(evaluator)?;
    let records: Vec<_> = manifest
        .split(split)
        .filter(|r| state.object_id.as_ref().is_none_or(|o| *o == r.object_id))
        .collect();
    if records.is_empty() {
        return Err(Error::Config(format!("no {} records to evaluate", a.split)));
    }
    let opts = EvalOptions {
        k: a.k.unwrap_or(state.model.config.num_refs),
        seed: a.seed,
        tag: a.ckpt.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
        save_dir: scratch_dir(),
    };
    let mut cache = ImageCache::default();
    let mut metrics = evaluate_records(&state.model, &eval_state.model, &manifest, &records, &opts, &mut cache)?;
    if a.timestamp {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        for m in &mut metrics {
            m.timestamp = Some(now);
        }
    }
    let mut text = String::new();
    for m in &metrics {
        text.push_str(&serde_json::to_string(m).expect("serializable"));
        text.push('\n');
    }
    write_text(&a.out, &text)?;
    let dino = summarize(&metrics.iter().map(|m| m.dino_analog).collect::<Vec<_>>());
    let ssim = summarize(&metrics.iter().map(|m| m.ssim_bg).collect::<Vec<_>>());
    println!(
        "{} records: dino_analog {:.3} ± {:.3}, ssim_bg {:.6}",
        metrics.len(),
        dino.mean,
        dino.std_err,
        ssim.mean
    );
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let rows: [Option<PathBuf>; 5] = std::array::from_fn(|i| Some(a.configs.join(format!("row{}.ckpt", i + 1))));
    let evaluator = match &a.evaluator {
        Some(p) => p.clone(),
        None => rows
            .iter()
            .rev()
            .flatten()
            .find(|p| p.exists())
            .cloned()
            .ok_or_else(|| Error::Config(format!("no row checkpoints in {}", a.configs.display())))?,
    };
    let manifest = manifest_in(&a.data)?;
    let opts = AblationOptions {
        k: a.k,
        seed: a.seed,
        finetune: !a.no_finetune,
        finetune_steps: a.finetune_steps,
        max_objects: a.max_objects,
        kind: None,
        save_dir: scratch_dir(),
    };
    // rows are loaded in the precision their checkpoints were written in;
    // a mismatching row is reported absent
    let row_f64 = rows.iter().flatten().find(|p| p.exists()).map(|p| is_f64(p)).transpose()?;
    let table = match (row_f64.unwrap_or(false), is_f64(&evaluator)?) {
        (false, false) => ablate_with::<f32, f32>(&manifest, &rows, &evaluator, &opts)?,
        (false, true) => ablate_with::<f32, f64>(&manifest, &rows, &evaluator, &opts)?,
        (true, false) => ablate_with::<f64, f32>(&manifest, &rows, &evaluator, &opts)?,
        (true, true) => ablate_with::<f64, f64>(&manifest, &rows, &evaluator, &opts)?,
    };
    write_text(&a.out, &table.to_csv())?;
    let mut lines = String::new();
    for m in &table.records {
        lines.push_str(&serde_json::to_string(m).expect("serializable"));
        lines.push('\n');
    }
    write_text(&a.out.with_extension("jsonl"), &lines)?;
    print!("{}", table.to_csv());
    Ok(())
}

fn ablate_with<T: Scalar, E: Scalar>(
    manifest: &DatasetManifest,
    rows: &[Option<PathBuf>; 5],
    evaluator: &Path,
    opts: &AblationOptions,
) -> Result<refcomp_core::evaluation::AblationTable> {
    let eval_state: TrainState<E> = checkpoint::load(evaluator)?;
    run_ablation::<T, E>(manifest, rows, &eval_state.model, opts)
}

pub fn plot(a: PlotArgs) -> Result<()> {
    if let Some(p) = &a.metrics {
        let metrics = read_metrics(p)?;
        plot::plot_losses(&metrics, &a.out)?;
        println!("wrote {} and {}", a.out.display(), plot::companion_csv(&a.out).display());
        return Ok(());
    }
    let p = a.trajectory.as_ref().expect("clap requires --trajectory or --metrics");
    let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
    let trajectory: TrajectoryDiagnostics = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: p.clone(),
        message: e.to_string(),
    })?;
    let attention_png = with_suffix(&a.out.with_extension(""), "_attention.png");
    plot::plot_attention(&attention_report(&trajectory), &attention_png)?;
    println!("wrote {}", attention_png.display());
    let curve = feature_distance_curve(&trajectory)?;
    plot::plot_distance_curve(&curve, &a.out)?;
    println!("wrote {} and {}", a.out.display(), plot::companion_csv(&a.out).display());
    Ok(())
}
