//! Scalar-loop reference implementations and instance generators shared by
//! the oracle and acceptance test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refcomp_core::calibration::{
    calibrate_global, calibrate_local, global_calibration_loss, local_calibration_loss, Calibration,
    CalibrationBranch,
};
use refcomp_core::config::RunConfig;
use refcomp_core::correspondence::{assign_correspondence, similarity_matrix};
use refcomp_core::encoder::{GlobalFeature, LocalFeatures};
use refcomp_core::evaluation::ssim;
use refcomp_core::image::Image;
use refcomp_core::params::ParamStore;
use refcomp_core::scalar::Scalar;
use refcomp_core::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(rng: &mut impl Rng) -> f64 {
    rng.sample::<f64, _>(rand_distr::StandardNormal)
}

pub fn random_mat(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| std * gauss(rng)).collect()).collect()
}

pub fn to_tensor<T: Scalar>(m: &Mat) -> Tensor<T> {
    let cols = m.first().map_or(0, Vec::len);
    Tensor::new(&[m.len(), cols], m.iter().flatten().map(|&v| T::lit(v)).collect()).unwrap()
}

/// The values a tensor actually holds, widened to f64.
pub fn to_mat<T: Scalar>(t: &Tensor<T>) -> Mat {
    (0..t.rows()).map(|r| t.row_slice(r).iter().map(|v| v.as_f64()).collect()).collect()
}

/// `max |a - b| / max(1, max |b|)`: error relative to the oracle's scale.
pub fn rel_err(a: &Mat, b: &Mat) -> f64 {
    let scale = b.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}

pub fn rel_err_scalar(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

/// Single-head residual cross-attention written out row by row.
pub struct BranchWeights {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
}

impl BranchWeights {
    pub fn read<T: Scalar>(store: &ParamStore<T>, b: &CalibrationBranch) -> Self {
        let m = |id| to_mat(store.get(id));
        Self {
            wq: m(b.query.weight),
            wk: m(b.key.weight),
            wv: m(b.value.weight),
            wo: m(b.output.weight),
        }
    }
}

pub struct OracleCalibration {
    pub out: Mat,
    pub probs: Mat,
}

pub fn oracle_calibrate(features: &Mat, fen: &Mat, w: &BranchWeights) -> OracleCalibration {
    let keys = matmul(fen, &w.wk);
    let values = matmul(fen, &w.wv);
    let d = w.wq[0].len() as f64;
    let mut out = Vec::new();
    let mut probs = Vec::new();
    for f in features {
        let q: Vec<f64> = (0..w.wq[0].len())
            .map(|j| f.iter().enumerate().map(|(i, x)| x * w.wq[i][j]).sum())
            .collect();
        let logits: Vec<f64> = keys
            .iter()
            .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| v / z).collect();
        let mixed: Vec<f64> = (0..values[0].len())
            .map(|j| p.iter().zip(&values).map(|(pi, v)| pi * v[j]).sum())
            .collect();
        let row: Vec<f64> = (0..f.len())
            .map(|c| f[c] + mixed.iter().enumerate().map(|(j, m)| m * w.wo[j][c]).sum::<f64>())
            .collect();
        out.push(row);
        probs.push(p);
    }
    OracleCalibration { out, probs }
}

pub fn oracle_global_loss(calibrated: &Mat, target: &[f64]) -> f64 {
    let mut s = 0.0;
    for row in calibrated {
        for (a, b) in row.iter().zip(target) {
            s += (a - b) * (a - b);
        }
    }
    s
}

pub fn oracle_local_loss(calibrated: &[Mat], gt: &Mat, deltas: &[Vec<usize>]) -> f64 {
    let mut s = 0.0;
    for (k, rows) in calibrated.iter().enumerate() {
        for (i, row) in rows.iter().enumerate() {
            let target = &gt[deltas[k][i]];
            for (a, b) in row.iter().zip(target) {
                s += (a - b) * (a - b);
            }
        }
    }
    s
}

pub fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt().max(1e-8) * nb.sqrt().max(1e-8))
}

/// Exhaustive argmax of cosine similarity, first index on ties.
pub fn oracle_nearest(refs: &Mat, gt: &Mat) -> Vec<usize> {
    refs.iter()
        .map(|r| {
            let sims: Vec<f64> = gt.iter().map(|g| oracle_cosine(r, g)).collect();
            let best = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            sims.iter().position(|&s| s == best).unwrap()
        })
        .collect()
}

/// SSIM with an explicit 2-D Gaussian window evaluated at every valid
/// position, averaged over windows and channels.
pub fn oracle_ssim(a: &Image, b: &Image) -> f64 {
    let n = 11usize;
    let sigma = 1.5f64;
    let c = (n / 2) as f64;
    let mut w2 = vec![vec![0.0; n]; n];
    let mut total_w = 0.0;
    for (i, row) in w2.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - c, j as f64 - c);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total_w += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (w, h) = (a.width(), a.height());
    let px = |img: &Image, x: usize, y: usize, ch: usize| img.data()[(y * w + x) * 3 + ch] as f64;
    let mut sum = 0.0;
    let mut count = 0;
    for ch in 0..3 {
        for y0 in 0..=h - n {
            for x0 in 0..=w - n {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let k = w2[i][j] / total_w;
                        ma += k * px(a, x0 + j, y0 + i, ch);
                        mb += k * px(b, x0 + j, y0 + i, ch);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let k = w2[i][j] / total_w;
                        let da = px(a, x0 + j, y0 + i, ch) - ma;
                        let db = px(b, x0 + j, y0 + i, ch) - mb;
                        va += k * da * da;
                        vb += k * db * db;
                        cov += k * da * db;
                    }
                }
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    sum / count as f64
}

pub fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> Image {
    Image::new(w, h, (0..w * h * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

/// An image correlated with `base`: noisy copy.
pub fn perturbed_image(rng: &mut impl Rng, base: &Image, amount: f32) -> Image {
    let data = base
        .data()
        .iter()
        .map(|v| (v + amount * (rng.gen::<f32>() - 0.5)).clamp(0.0, 1.0))
        .collect();
    Image::new(base.width(), base.height(), data).unwrap()
}

/// A calibration module with every projection (output included) random.
pub fn random_calibration<T: Scalar>(feat_dim: usize, fen_dim: usize, seed: u64) -> (ParamStore<T>, Calibration) {
    let cfg = RunConfig {
        feat_dim,
        fen_dim,
        calib_heads: 1,
        ..RunConfig::micro()
    };
    let mut r = rng(seed);
    let mut store = ParamStore::<T>::new();
    let calib = Calibration::new(&mut store, &cfg, &mut r);
    for id in calib.params() {
        let t = store.get_mut(id);
        for v in t.data_mut() {
            *v = T::lit(0.5 * gauss(&mut r));
        }
    }
    (store, calib)
}

/// Worst relative error of the calibration branches against the loop oracle
/// over `instances` random shapes.
pub fn calibration_oracle_error<T: Scalar>(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for case in 0..instances {
        let feat = r.gen_range(1..=8);
        let fen_dim = r.gen_range(1..=8);
        let m = r.gen_range(1..=8);
        let rows = r.gen_range(1..=5);
        let (store, calib) = random_calibration::<T>(feat, fen_dim, seed ^ case as u64);
        let fen: Tensor<T> = to_tensor(&random_mat(&mut r, m, fen_dim, 1.0));
        let fen_seen = to_mat(&fen);

        let g: Tensor<T> = to_tensor(&random_mat(&mut r, 1, feat, 1.0));
        let got = calibrate_global(&GlobalFeature { vector: g.clone(), owner: 0 }, &fen, &calib, &store).unwrap();
        let want = oracle_calibrate(&to_mat(&g), &fen_seen, &BranchWeights::read(&store, &calib.global));
        worst = worst.max(rel_err(&to_mat(&got.vector), &want.out));

        let l: Tensor<T> = to_tensor(&random_mat(&mut r, rows, feat, 1.0));
        let got = calibrate_local(&LocalFeatures { rows: l.clone(), owner: 0 }, &fen, &calib, &store).unwrap();
        let want = oracle_calibrate(&to_mat(&l), &fen_seen, &BranchWeights::read(&store, &calib.local));
        worst = worst.max(rel_err(&to_mat(&got.rows), &want.out));
    }
    worst
}

/// Worst relative error of both calibration losses against loop oracles.
pub fn loss_oracle_error<T: Scalar>(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let k = r.gen_range(1..=5);
        let d = r.gen_range(1..=8);
        let n = r.gen_range(1..=6);
        let cal: Vec<Tensor<T>> = (0..k).map(|_| to_tensor(&random_mat(&mut r, 1, d, 1.0))).collect();
        let target: Tensor<T> = to_tensor(&random_mat(&mut r, 1, d, 1.0));
        let got = global_calibration_loss(
            &cal.iter().map(|v| GlobalFeature { vector: v.clone(), owner: 0 }).collect::<Vec<_>>(),
            &GlobalFeature { vector: target.clone(), owner: 0 },
        )
        .unwrap();
        let rows: Mat = cal.iter().map(|t| to_mat(t).remove(0)).collect();
        let want = oracle_global_loss(&rows, &to_mat(&target)[0]);
        worst = worst.max(rel_err_scalar(got, want));

        let locals: Vec<Tensor<T>> = (0..k).map(|_| to_tensor(&random_mat(&mut r, n, d, 1.0))).collect();
        let gt: Tensor<T> = to_tensor(&random_mat(&mut r, n, d, 1.0));
        let deltas: Vec<Vec<usize>> = (0..k).map(|_| (0..n).map(|_| r.gen_range(0..n)).collect()).collect();
        let got = local_calibration_loss(
            &locals.iter().map(|t| LocalFeatures { rows: t.clone(), owner: 0 }).collect::<Vec<_>>(),
            &LocalFeatures { rows: gt.clone(), owner: 0 },
            &deltas,
        )
        .unwrap();
        let want = oracle_local_loss(&locals.iter().map(to_mat).collect::<Vec<_>>(), &to_mat(&gt), &deltas);
        worst = worst.max(rel_err_scalar(got, want));
    }
    worst
}

/// Worst relative error of the similarity matrix against the loop oracle.
pub fn similarity_oracle_error<T: Scalar>(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (n, m, d) = (r.gen_range(1..=16), r.gen_range(1..=16), r.gen_range(1..=64));
        let a: Tensor<T> = to_tensor(&random_mat(&mut r, n, d, 1.0));
        let b: Tensor<T> = to_tensor(&random_mat(&mut r, m, d, 1.0));
        let s = similarity_matrix(&a, &b).unwrap();
        let (am, bm) = (to_mat(&a), to_mat(&b));
        let want: Mat = am.iter().map(|x| bm.iter().map(|y| oracle_cosine(x, y)).collect()).collect();
        let got: Mat = (0..n).map(|i| s.row(i).to_vec()).collect();
        worst = worst.max(rel_err(&got, &want));
    }
    worst
}

/// Worst relative SSIM error against the direct-window oracle; half the
/// pairs are correlated so values span the range.
pub fn ssim_oracle_error(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (w, h) = (r.gen_range(11..=18), r.gen_range(11..=18));
        let a = random_image(&mut r, w, h);
        let b = if i % 2 == 0 {
            perturbed_image(&mut r, &a, 0.3)
        } else {
            random_image(&mut r, w, h)
        };
        worst = worst.max(rel_err_scalar(ssim(&a, &b).unwrap(), oracle_ssim(&a, &b)));
    }
    worst
}

/// A correspondence instance; with `ties`, some ground-truth rows are exact
/// duplicates of earlier ones and some reference rows copy a ground-truth row.
pub fn correspondence_instance(r: &mut impl Rng, n: usize, d: usize, ties: bool) -> (Mat, Mat) {
    let refs = random_mat(r, n, d, 1.0);
    let mut gt = random_mat(r, n, d, 1.0);
    let mut refs = refs;
    if ties {
        for j in (1..n).step_by(3) {
            let src = r.gen_range(0..j);
            gt[j] = gt[src].clone();
        }
        for i in (0..n).step_by(2) {
            refs[i] = gt[r.gen_range(0..n)].clone();
        }
    }
    (refs, gt)
}

/// Number of instances (out of `instances`, every other one with ties) where
/// the assignment differs from the exhaustive search.
pub fn correspondence_mismatches<T: Scalar>(instances: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for i in 0..instances {
        let (refs, gt) = correspondence_instance(&mut r, 16, 64, i % 2 == 1);
        let (rt, gtt): (Tensor<T>, Tensor<T>) = (to_tensor(&refs), to_tensor(&gt));
        let got = assign_correspondence(&similarity_matrix(&rt, &gtt).unwrap());
        if got != oracle_nearest(&to_mat(&rt), &to_mat(&gtt)) {
            bad += 1;
        }
    }
    bad
}

/// A tiny generated dataset and two assembled pretrain examples.
pub fn micro_batch(dir: &std::path::Path) -> Vec<refcomp_core::synthdata::TrainingExample> {
    use refcomp_core::synthdata::{assemble_example, generate_dataset, GenConfig, ImageCache, PerturbConfig, Split};
    let cfg = GenConfig {
        objects: 1,
        pretrain_objects: 2,
        views: 5,
        canvas_size: 16,
        latent_factor: 4,
        seed: 11,
    };
    let m = generate_dataset(&cfg, dir, false).unwrap();
    let mut cache = ImageCache::default();
    m.split(Split::Pretrain)
        .take(2)
        .enumerate()
        .map(|(i, r)| assemble_example(&m, r, 2, i as u64, &PerturbConfig::default(), &mut cache).unwrap())
        .collect()
}

/// Micro model with every parameter trainable, calibration inputs attached
/// to both encoders and the calibration output projections randomised, so all
/// branches carry gradient. Only the ground-truth targets remain constants.
pub fn gradcheck_model<T: Scalar>() -> refcomp_core::model::Model<T> {
    let cfg = RunConfig {
        freeze_encoder_backbone: false,
        calib_grad_to_encoder: true,
        calib_grad_to_denoiser: true,
        ..RunConfig::micro()
    };
    let mut model = refcomp_core::model::Model::<T>::new(&cfg, 3).unwrap();
    let mut r = rng(17);
    for id in [model.calibration.global.output.weight, model.calibration.local.output.weight] {
        for v in model.store.get_mut(id).data_mut() {
            *v = T::lit(0.3 * gauss(&mut r));
        }
    }
    model
}

/// Finite-difference check of the whole training objective. The numeric side
/// runs in double precision and keeps the stop-gradient targets at the values
/// of the unperturbed model, matching what the analytic gradient treats as
/// constant.
pub fn model_gradcheck<T: Scalar>(
    batch: &[refcomp_core::synthdata::TrainingExample],
    entries: usize,
) -> Vec<refcomp_core::gradcheck::GradCheckReport> {
    use refcomp_core::autograd::Graph;
    use refcomp_core::synthdata::derive_seed;
    use refcomp_core::trainer::{batch_objective, draw_noise};
    const SEED: u64 = 5;
    let model = gradcheck_model::<T>();
    let (_, grads) = batch_objective(&model, batch, SEED).unwrap();
    let wide = model.cast::<f64>();
    let schedule = wide.schedule();
    let shape = [wide.codec.channels(), wide.codec.size() * wide.codec.size()];
    let fixed: Vec<_> = batch
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let (t, noise) = draw_noise::<f64>(derive_seed(SEED, &[i as u64]), schedule.timesteps, &shape);
            (t, noise, wide.prepare(ex).unwrap())
        })
        .collect();
    let ids: Vec<_> = model.store.ids().collect();
    refcomp_core::gradcheck::check_params_promoted(&model.store, &ids, &grads, entries, 1e-6, |s| {
        let mut m = wide.clone();
        m.store = s.clone();
        let mut total = 0.0;
        for (ex, (t, noise, (cond, z0, gt))) in batch.iter().zip(&fixed) {
            let mut g = Graph::new(&m.store);
            let obj = m.objective(&mut g, cond, z0, &ex.references, gt, *t, noise, &schedule).unwrap();
            total += g.scalar(obj.total);
        }
        total / batch.len() as f64
    })
}

pub type CalibInputs<T> = (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>);

/// gc + lc through both branches, as a function of the parameters.
pub fn calibration_objective<T: Scalar>(
    store: &ParamStore<T>,
    calib: &Calibration,
    inputs: &CalibInputs<T>,
) -> (T, refcomp_core::params::Gradients<T>) {
    use refcomp_core::autograd::Graph;
    use refcomp_core::calibration::{global_loss_var, local_loss_var};
    use refcomp_core::config::LossReduction;
    let (glob, loc, fen, gt_g, gt_l) = inputs;
    let mut g = Graph::new(store);
    let (fg, fl, e) = (g.constant(glob.clone()), g.constant(loc.clone()), g.constant(fen.clone()));
    let (cg, _) = calib.global.forward(&mut g, fg, e);
    let (cl, _) = calib.local.forward(&mut g, fl, e);
    let a = global_loss_var(&mut g, cg, gt_g, LossReduction::Sum);
    let b = local_loss_var(&mut g, cl, gt_l, LossReduction::Sum);
    let total = g.add(a, b);
    let grads = g.backward(total);
    (g.value(total).data()[0], grads)
}

pub fn calibration_inputs<T: Scalar>(seed: u64) -> CalibInputs<T> {
    let mut r = rng(seed);
    (
        to_tensor(&random_mat(&mut r, 2, 4, 1.0)),
        to_tensor(&random_mat(&mut r, 6, 4, 1.0)),
        to_tensor(&random_mat(&mut r, 3, 5, 1.0)),
        to_tensor(&random_mat(&mut r, 1, 4, 1.0)),
        to_tensor(&random_mat(&mut r, 6, 4, 1.0)),
    )
}

/// Finite-difference reports for every calibration parameter. The numeric
/// side always runs in double precision.
pub fn calibration_gradcheck<T: Scalar>(seed: u64) -> Vec<refcomp_core::gradcheck::GradCheckReport> {
    use refcomp_core::gradcheck::check_params_promoted;
    let (store, calib) = random_calibration::<T>(4, 5, seed);
    let inputs = calibration_inputs::<T>(seed + 1);
    let (_, grads) = calibration_objective(&store, &calib, &inputs);
    let wide = (
        inputs.0.cast::<f64>(),
        inputs.1.cast::<f64>(),
        inputs.2.cast::<f64>(),
        inputs.3.cast::<f64>(),
        inputs.4.cast::<f64>(),
    );
    check_params_promoted(&store, &calib.params(), &grads, 64, 1e-6, |s| {
        calibration_objective(s, &calib, &wide).0
    })
}

/// Attention probabilities of the local branch for the given queries and keys.
pub fn attention_probs(store: &ParamStore<f64>, calib: &Calibration, feats: &Tensor<f64>, fen: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    use refcomp_core::autograd::Graph;
    let mut g = Graph::new(store);
    let (f, e) = (g.constant(feats.clone()), g.constant(fen.clone()));
    let (out, probs) = calib.local.forward(&mut g, f, e);
    (g.value(out).clone(), g.value(probs[0]).clone())
}

/// Largest deviation from one of an attention row sum over every
/// combination of reference count, tokens per reference and key count.
pub fn attention_row_error(ks: &[usize], ns: &[usize], ms: &[usize]) -> f64 {
    let mut worst = 0.0f64;
    let mut seed = 0;
    for &k in ks {
        for &n in ns {
            for &m in ms {
                seed += 1;
                let (store, calib) = random_calibration::<f64>(8, 8, seed);
                let mut r = rng(seed);
                let feats = to_tensor(&random_mat(&mut r, k * n, 8, 2.0));
                let fen = to_tensor(&random_mat(&mut r, m, 8, 2.0));
                let (_, p) = attention_probs(&store, &calib, &feats, &fen);
                for row in 0..p.rows() {
                    worst = worst.max((p.row_slice(row).iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    worst
}
