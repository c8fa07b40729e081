mod common;

use common::*;
use proptest::prelude::*;
use refcomp_core::correspondence::{assign_correspondence, similarity_matrix, SimilarityMatrix};
use refcomp_core::gradcheck::{check_params, GradCheckReport};
use refcomp_core::schedule::DiffusionSchedule;
use refcomp_core::tensor::Tensor;

#[test]
fn calibration_matches_loop_oracle() {
    assert!(calibration_oracle_error::<f64>(120, 1) < 1e-6);
    assert!(calibration_oracle_error::<f32>(120, 2) < 1e-6);
}

#[test]
fn calibration_losses_match_loop_oracle() {
    assert!(loss_oracle_error::<f64>(120, 3) < 1e-7);
    assert!(loss_oracle_error::<f32>(120, 4) < 1e-6);
}

#[test]
fn similarity_matches_loop_oracle() {
    assert!(similarity_oracle_error::<f64>(120, 5) < 1e-6);
    assert!(similarity_oracle_error::<f32>(120, 6) < 1e-6);
}

#[test]
fn ssim_matches_direct_window_oracle() {
    assert!(ssim_oracle_error(100, 7) < 1e-6);
}

#[test]
fn correspondence_matches_exhaustive_search() {
    assert_eq!(correspondence_mismatches::<f32>(200, 8), 0);
    assert_eq!(correspondence_mismatches::<f64>(200, 9), 0);
}

#[test]
fn correspondence_ties_go_to_lowest_index() {
    let s = SimilarityMatrix::new(2, 4, vec![0.1, 0.9, 0.9, 0.2, 0.5, 0.5, 0.5, 0.5]).unwrap();
    assert_eq!(assign_correspondence(&s), vec![1, 0]);
    let a = Tensor::<f64>::new(&[1, 2], vec![1.0, 0.0]).unwrap();
    let b = Tensor::<f64>::new(&[3, 2], vec![0.0, 1.0, 2.0, 0.0, 1.0, 0.0]).unwrap();
    assert_eq!(assign_correspondence(&similarity_matrix(&a, &b).unwrap()), vec![1]);
}

fn assert_reports(reports: &[GradCheckReport], tol: f64) {
    assert_eq!(reports.len(), 8);
    for r in reports {
        assert!(r.analytic_norm > 0.0, "{} has no gradient", r.param);
        assert!(r.rel_err <= tol, "{}: {} > {tol}", r.param, r.rel_err);
    }
}

#[test]
fn calibration_gradients_match_finite_differences_f64() {
    let (store, calib) = random_calibration::<f64>(4, 5, 21);
    let inputs = calibration_inputs::<f64>(22);
    let (_, grads) = calibration_objective(&store, &calib, &inputs);
    let reports = check_params(&store, &calib.params(), &grads, 64, 1e-6, |s| {
        calibration_objective(s, &calib, &inputs).0
    });
    assert_reports(&reports, 1e-5);
}

#[test]
fn calibration_gradients_match_finite_differences_f32() {
    assert_reports(&calibration_gradcheck::<f32>(23), 1e-3);
}

#[test]
fn schedule_preserves_variance_identity() {
    let s = DiffusionSchedule::linear(200, 1e-4, 0.02);
    for t in 0..200 {
        let a = s.alpha_bars[t];
        assert!((a.sqrt().powi(2) + (1.0 - a) - 1.0).abs() < 1e-12);
        if t > 0 {
            assert!(a < s.alpha_bars[t - 1]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_rows_sum_to_one(k in 1usize..=5, wide in any::<bool>(), m in 1usize..=64, seed in any::<u64>()) {
        let n = if wide { 16 } else { 1 };
        let (store, calib) = random_calibration::<f64>(8, 8, seed);
        let mut r = rng(seed);
        let feats = to_tensor(&random_mat(&mut r, k * n, 8, 2.0));
        let fen = to_tensor(&random_mat(&mut r, m, 8, 2.0));
        let (_, p) = attention_probs(&store, &calib, &feats, &fen);
        for row in 0..p.rows() {
            let s: f64 = p.row_slice(row).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn key_order_does_not_matter(m in 1usize..=12, seed in any::<u64>()) {
        let (store, calib) = random_calibration::<f64>(6, 5, seed);
        let mut r = rng(seed);
        let feats = to_tensor(&random_mat(&mut r, 3, 6, 1.0));
        let mut rows = random_mat(&mut r, m, 5, 1.0);
        let (a, _) = attention_probs(&store, &calib, &feats, &to_tensor(&rows));
        rows.reverse();
        rows.rotate_left(m / 2);
        let (b, _) = attention_probs(&store, &calib, &feats, &to_tensor(&rows));
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn permuting_references_permutes_outputs(k in 2usize..=5, seed in any::<u64>()) {
        let (store, calib) = random_calibration::<f64>(6, 5, seed);
        let mut r = rng(seed);
        let refs = random_mat(&mut r, k, 6, 1.0);
        let fen = to_tensor(&random_mat(&mut r, 7, 5, 1.0));
        let target = random_mat(&mut r, 1, 6, 1.0);
        let (a, _) = attention_probs(&store, &calib, &to_tensor(&refs), &fen);
        let mut perm = refs.clone();
        perm.rotate_left(1);
        let (b, _) = attention_probs(&store, &calib, &to_tensor(&perm), &fen);
        let mut expect = to_mat(&a);
        expect.rotate_left(1);
        prop_assert!(rel_err(&to_mat(&b), &expect) < 1e-12);
        let la = oracle_global_loss(&to_mat(&a), &target[0]);
        let lb = oracle_global_loss(&to_mat(&b), &target[0]);
        prop_assert!((la - lb).abs() < 1e-9 * la.max(1.0));
    }
}
