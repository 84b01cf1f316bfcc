//! Fixed-effect multivariate meta-analysis: the inverse-variance-covariance
//! weighted average of identically parameterized study estimates,
//! `β̂ = (Σ S_k⁻¹)⁻¹ Σ S_k⁻¹ θ̂_k` with covariance `(Σ S_k⁻¹)⁻¹`.

use nalgebra::{DMatrix, DVector};

use crate::error::{GmetaError, Result};
use crate::linalg;

/// Combined estimate and covariance.
#[derive(Debug, Clone)]
pub struct MetaFit {
    pub estimate: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub k_studies: usize,
}

/// Inverse-variance-weighted combination of `(θ̂_k, S_k)` pairs.
///
/// Accumulation runs in a canonical content order so the result is
/// bit-identical under any permutation of the input studies.
pub fn fixed_effect_meta(summaries: &[(DVector<f64>, DMatrix<f64>)]) -> Result<MetaFit> {
    if summaries.is_empty() {
        return Err(GmetaError::InvalidInput("no summaries to combine".into()));
    }
    let dim = summaries[0].0.len();
    for (k, (theta, s)) in summaries.iter().enumerate() {
        if theta.len() != dim || s.nrows() != dim || s.ncols() != dim {
            return Err(GmetaError::DimensionMismatch(format!(
                "study {k}: expected dimension {dim}, got θ̂ of length {} and S of {}×{}",
                theta.len(),
                s.nrows(),
                s.ncols()
            )));
        }
    }
    let mut order: Vec<usize> = (0..summaries.len()).collect();
    order.sort_by(|&a, &b| {
        let (ta, sa) = &summaries[a];
        let (tb, sb) = &summaries[b];
        ta.iter()
            .chain(sa.iter())
            .zip(tb.iter().chain(sb.iter()))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut precision_sum = DMatrix::zeros(dim, dim);
    let mut weighted_sum = DVector::zeros(dim);
    for &k in &order {
        let (theta, s) = &summaries[k];
        if linalg::sym_condition_number(s) > 1e12 {
            return Err(GmetaError::SingularCovariance { study: k });
        }
        let precision = linalg::inv_spd(s, 0.0).ok_or(GmetaError::SingularCovariance { study: k })?;
        weighted_sum += &precision * theta;
        precision_sum += precision;
    }
    let covariance = linalg::inv_spd(&precision_sum, 0.0)
        .ok_or_else(|| GmetaError::Identifiability("summed precision matrix is singular".into()))?;
    let estimate = &covariance * weighted_sum;
    Ok(MetaFit {
        estimate,
        covariance,
        k_studies: summaries.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn single_study_is_identity() {
        let theta = DVector::from_vec(vec![1.5, -0.3]);
        let s = DMatrix::from_row_slice(2, 2, &[0.2, 0.05, 0.05, 0.3]);
        let fit = fixed_effect_meta(&[(theta.clone(), s.clone())]).unwrap();
        for j in 0..2 {
            assert_relative_eq!(fit.estimate[j], theta[j], epsilon = 1e-12);
            for i in 0..2 {
                assert_relative_eq!(fit.covariance[(i, j)], s[(i, j)], epsilon = 1e-12);
            }
        }
        assert_eq!(fit.k_studies, 1);
    }

    #[test]
    fn equal_variance_scalars_average() {
        let summaries = vec![
            (DVector::from_vec(vec![1.0]), DMatrix::from_element(1, 1, 0.5)),
            (DVector::from_vec(vec![3.0]), DMatrix::from_element(1, 1, 0.5)),
        ];
        let fit = fixed_effect_meta(&summaries).unwrap();
        assert_relative_eq!(fit.estimate[0], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn two_dim_distinct_covariances_match_recomputation() {
        let s1 = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.4]);
        let s2 = DMatrix::from_row_slice(2, 2, &[0.2, -0.05, -0.05, 0.25]);
        let t1 = DVector::from_vec(vec![0.8, -0.2]);
        let t2 = DVector::from_vec(vec![1.1, 0.1]);
        let fit = fixed_effect_meta(&[(t1.clone(), s1.clone()), (t2.clone(), s2.clone())]).unwrap();

        // Independent matrix-algebra oracle.
        let p1 = s1.try_inverse().unwrap();
        let p2 = s2.try_inverse().unwrap();
        let cov = (&p1 + &p2).try_inverse().unwrap();
        let est = &cov * (&p1 * &t1 + &p2 * &t2);
        for j in 0..2 {
            assert!((fit.estimate[j] - est[j]).abs() < 1e-12);
            for i in 0..2 {
                assert!((fit.covariance[(i, j)] - cov[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_covariance_names_the_study() {
        let good = (DVector::from_vec(vec![1.0]), DMatrix::from_element(1, 1, 0.5));
        let bad = (DVector::from_vec(vec![2.0]), DMatrix::from_element(1, 1, 0.0));
        match fixed_effect_meta(&[good, bad]) {
            Err(GmetaError::SingularCovariance { study }) => assert_eq!(study, 1),
            other => panic!("expected singular covariance, got {other:?}"),
        }
    }

    #[test]
    fn estimate_in_convex_hull_for_diagonal_covariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let dim = 3;
            let mut summaries = Vec::new();
            for _ in 0..4 {
                let theta = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
                let s = DMatrix::from_diagonal(&DVector::from_fn(dim, |_, _| 0.1 + rng.random::<f64>()));
                summaries.push((theta, s));
            }
            let fit = fixed_effect_meta(&summaries).unwrap();
            for j in 0..dim {
                let lo = summaries.iter().map(|(t, _)| t[j]).fold(f64::INFINITY, f64::min);
                let hi = summaries.iter().map(|(t, _)| t[j]).fold(f64::NEG_INFINITY, f64::max);
                assert!(fit.estimate[j] >= lo - 1e-12 && fit.estimate[j] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn combined_covariance_dominated_by_each_study() {
        // Σ̂ ⪯ S_k in the Loewner order.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let dim = 2;
            let mut summaries = Vec::new();
            for _ in 0..3 {
                let theta = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
                let mut a: DMatrix<f64> = DMatrix::zeros(dim, dim);
                for v in a.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                let s = &a * a.transpose() + DMatrix::identity(dim, dim) * 0.2;
                summaries.push((theta, s));
            }
            let fit = fixed_effect_meta(&summaries).unwrap();
            for (_, s) in &summaries {
                let diff = s - &fit.covariance;
                let ev = crate::linalg::sym_eigenvalues(&diff);
                assert!(ev[0] >= -1e-10, "min eigenvalue {}", ev[0]);
            }
        }
    }

    #[test]
    fn permutation_invariance_is_bit_exact() {
        let s1 = (DVector::from_vec(vec![0.5, 1.0]), DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.4]));
        let s2 = (DVector::from_vec(vec![-0.5, 0.2]), DMatrix::from_row_slice(2, 2, &[0.2, 0.02, 0.02, 0.5]));
        let s3 = (DVector::from_vec(vec![0.1, 0.6]), DMatrix::from_row_slice(2, 2, &[0.6, -0.1, -0.1, 0.3]));
        let a = fixed_effect_meta(&[s1.clone(), s2.clone(), s3.clone()]).unwrap();
        let b = fixed_effect_meta(&[s3, s1, s2]).unwrap();
        assert_eq!(a.estimate, b.estimate);
        assert_eq!(a.covariance, b.covariance);
    }
}
