//! Patch correspondence between reference and ground-truth local features:
//! each reference patch is matched to its most cosine-similar ground-truth
//! patch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor applied to row norms before dividing.
pub const NORM_FLOOR: f64 = 1e-8;

/// Cosine similarities, rows indexing reference patches and columns
/// ground-truth patches.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape {
                what: "similarity matrix".into(),
                expected: format!("{}", rows * cols),
                actual: format!("{}", values.len()),
            });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

/// Per reference, the matched ground-truth patch index of every reference patch.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrespondenceMap {
    pub per_reference: Vec<Vec<usize>>,
}

fn row_norms<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    (0..t.rows())
        .map(|r| {
            t.row_slice(r)
                .iter()
                .map(|v| v.as_f64() * v.as_f64())
                .sum::<f64>()
                .sqrt()
                .max(NORM_FLOOR)
        })
        .collect()
}

/// `S[i][j] = cos(ref_i, gt_j)`, accumulated in double precision.
pub fn similarity_matrix<T: Scalar>(ref_local: &Tensor<T>, gt_local: &Tensor<T>) -> Result<SimilarityMatrix> {
    if ref_local.cols() != gt_local.cols() {
        return Err(Error::Shape {
            what: "similarity_matrix feature width".into(),
            expected: format!("{}", ref_local.cols()),
            actual: format!("{}", gt_local.cols()),
        });
    }
    let (rn, gn) = (row_norms(ref_local), row_norms(gt_local));
    let (n, m) = (ref_local.rows(), gt_local.rows());
    let mut values = Vec::with_capacity(n * m);
    for i in 0..n {
        let a = ref_local.row_slice(i);
        for j in 0..m {
            let b = gt_local.row_slice(j);
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
            values.push((dot / (rn[i] * gn[j])).clamp(-1.0, 1.0));
        }
    }
    SimilarityMatrix::new(n, m, values)
}

/// `δ(i) = argmax_j S[i][j]`, ties going to the smallest `j`.
pub fn assign_correspondence(s: &SimilarityMatrix) -> Vec<usize> {
    (0..s.rows)
        .map(|i| {
            let row = s.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Row `i` of the result is row `δ(i)` of `gt_local`.
pub fn gather_targets<T: Scalar>(gt_local: &Tensor<T>, delta: &[usize]) -> Tensor<T> {
    let d = gt_local.cols();
    let mut data = Vec::with_capacity(delta.len() * d);
    for &j in delta {
        assert!(j < gt_local.rows(), "correspondence index {j} out of range");
        data.extend_from_slice(gt_local.row_slice(j));
    }
    Tensor::new(&[delta.len(), d], data).expect("gathered shape")
}

/// Correspondence of every reference against one ground truth.
pub fn correspond_all<T: Scalar>(refs: &[&Tensor<T>], gt_local: &Tensor<T>) -> Result<CorrespondenceMap> {
    let per_reference = refs
        .iter()
        .map(|r| similarity_matrix(r, gt_local).map(|s| assign_correspondence(&s)))
        .collect::<Result<_>>()?;
    Ok(CorrespondenceMap { per_reference })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::randn;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn self_similarity_diagonal_is_one() {
        let t = Tensor::<f64>::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let s = similarity_matrix(&t, &t).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(s.at(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(assign_correspondence(&s), vec![0, 1, 2]);
    }

    #[test]
    fn constant_matrix_maps_to_zero() {
        let s = SimilarityMatrix::new(4, 4, vec![0.3; 16]).unwrap();
        assert_eq!(assign_correspondence(&s), vec![0; 4]);
    }

    #[test]
    fn width_mismatch_is_error() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 4]);
        assert!(similarity_matrix(&a, &b).is_err());
    }

    #[test]
    fn zero_rows_stay_finite() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let s = similarity_matrix(&a, &a).unwrap();
        assert!(s.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gather_cases() {
        let gt = Tensor::<f64>::from_fn(&[3, 2], |i| i as f64);
        assert_eq!(gather_targets(&gt, &[0, 1, 2]), gt);
        let z = gather_targets(&gt, &[0, 0, 0]);
        for r in 0..3 {
            assert_eq!(z.row_slice(r), gt.row_slice(0));
        }
        let p = gather_targets(&gt, &[2, 0, 1]);
        assert_eq!(p.row_slice(0), gt.row_slice(2));
        assert_eq!(p.row_slice(1), gt.row_slice(0));
        assert_eq!(p.row_slice(2), gt.row_slice(1));
    }

    proptest! {
        #[test]
        fn positive_row_scaling_keeps_assignment(seed in 0u64..1000, scales in prop::collection::vec(0.01f64..100.0, 6)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r: Tensor<f64> = randn(&[6, 5], 1.0, &mut rng);
            let g: Tensor<f64> = randn(&[6, 5], 1.0, &mut rng);
            let base = assign_correspondence(&similarity_matrix(&r, &g).unwrap());
            let scaled = Tensor::from_fn(&[6, 5], |i| r.data()[i] * scales[i / 5]);
            let again = assign_correspondence(&similarity_matrix(&scaled, &g).unwrap());
            prop_assert_eq!(base, again);
        }
    }
}
