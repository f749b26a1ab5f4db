//! The truncated Karhunen-Loeve expansion of the regularized TPS field.
//!
//! The covariance of the basis coefficients is `(I + alpha S)^-1`. Its
//! eigenvectors coincide with those of the penalty matrix `S`, so a single
//! decomposition of `S` serves every value of `alpha`: the expansion
//! eigenvalues follow from the scalar map `1 / (1 + alpha lambda_S,k)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::tps::TpsBasisSystem;

/// Expansion eigenvalues at a fixed penalty parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct KleEigenSpectrum {
    pub alpha: f64,
    /// `1 / (1 + alpha * lambda_S,k)` per retained mode, in (0, 1].
    pub lambdas: DVector<f64>,
}

/// A truncated expansion: the retained eigenvectors of the penalty matrix
/// and their eigenvalues, with null-space modes always kept first.
#[derive(Debug, Clone)]
pub struct KleModel {
    basis: Arc<TpsBasisSystem>,
    /// K x M_trunc retained eigenvector columns.
    psi: DMatrix<f64>,
    /// Retained penalty eigenvalues, nondecreasing, first M_null zero.
    lambda_s: DVector<f64>,
}

impl KleModel {
    pub fn basis(&self) -> &Arc<TpsBasisSystem> {
        &self.basis
    }

    pub fn truncation(&self) -> usize {
        self.psi.ncols()
    }

    pub fn null_dim(&self) -> usize {
        self.basis.null_dim()
    }

    /// Retained eigenvector columns of the penalty matrix (K x M_trunc).
    pub fn modes(&self) -> &DMatrix<f64> {
        &self.psi
    }

    /// Retained penalty eigenvalues.
    pub fn penalty_eigvals(&self) -> &DVector<f64> {
        &self.lambda_s
    }

    /// Expansion eigenvalues `1 / (1 + alpha lambda_S,k)` for the retained
    /// modes.
    pub fn eigenvalues(&self, alpha: f64) -> Result<KleEigenSpectrum> {
        check_alpha(alpha)?;
        let lambdas = self.lambda_s.map(|l| 1.0 / (1.0 + alpha * l));
        Ok(KleEigenSpectrum { alpha, lambdas })
    }

    /// Field values at evaluation points: `Phi_eval (Psi z)`, linear in z.
    pub fn reconstruct_field(
        &self,
        z: &DVector<f64>,
        eval_design: &DMatrix<f64>,
    ) -> Result<DVector<f64>> {
        check_dim("reconstruct_field coefficients", self.truncation(), z.len())?;
        check_dim(
            "reconstruct_field design columns",
            self.basis.basis_count(),
            eval_design.ncols(),
        )?;
        Ok(eval_design * (&self.psi * z))
    }

    /// Uncorrelated coordinates of a coefficient vector: `Psi' c`
    /// restricted to the retained modes.
    pub fn decorrelate(&self, c: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("decorrelate coefficients", self.basis.basis_count(), c.len())?;
        Ok(self.psi.transpose() * c)
    }
}

/// Full-spectrum coefficient covariance `(I + alpha S)^-1`, evaluated
/// through the spectral shortcut `Psi_S diag(1/(1+alpha lambda)) Psi_S'`.
pub fn covariance_matrix(basis: &TpsBasisSystem, alpha: f64) -> Result<DMatrix<f64>> {
    check_alpha(alpha)?;
    let k = basis.basis_count();
    let psi = basis.eigvecs();
    let diag = basis.eigvals().map(|l| 1.0 / (1.0 + alpha * l));
    let mut scaled = psi.clone();
    for j in 0..k {
        scaled.column_mut(j).scale_mut(diag[j]);
    }
    Ok(scaled * psi.transpose())
}

/// Truncate by cumulative variance at a reference alpha: the smallest
/// mode count whose eigenvalue prefix sum reaches `variance_fraction` of
/// the total, never below the null-space dimension. Truncation is chosen
/// once and held fixed during sampling.
pub fn truncate(
    basis: &Arc<TpsBasisSystem>,
    variance_fraction: f64,
    alpha_ref: f64,
) -> Result<KleModel> {
    if !(variance_fraction > 0.0 && variance_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "variance fraction must lie in (0, 1], got {variance_fraction}"
        )));
    }
    check_alpha(alpha_ref)?;
    let lam_alpha: Vec<f64> = basis
        .eigvals()
        .iter()
        .map(|l| 1.0 / (1.0 + alpha_ref * l))
        .collect();
    let total: f64 = lam_alpha.iter().sum();
    let target = variance_fraction * total;
    let mut cum = 0.0;
    let mut m = basis.basis_count();
    for (k, l) in lam_alpha.iter().enumerate() {
        cum += l;
        if cum >= target - 1e-12 * total {
            m = k + 1;
            break;
        }
    }
    let m = m.max(basis.null_dim());
    with_truncation(basis, m)
}

/// Build a model with an explicit mode count.
pub fn with_truncation(basis: &Arc<TpsBasisSystem>, m_trunc: usize) -> Result<KleModel> {
    let k = basis.basis_count();
    if m_trunc < basis.null_dim() || m_trunc > k {
        return Err(Error::invalid(format!(
            "truncation {m_trunc} outside [{}, {k}]",
            basis.null_dim()
        )));
    }
    let psi = basis.eigvecs().columns(0, m_trunc).clone_owned();
    let lambda_s = basis.eigvals().rows(0, m_trunc).clone_owned();
    Ok(KleModel {
        basis: Arc::clone(basis),
        psi,
        lambda_s,
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{PointRole, PointSet};
    use crate::tps::build_basis;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn random_basis(n: usize, seed: u64) -> Arc<TpsBasisSystem> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen::<f64>(), rng.gen())).collect();
        let knots = PointSet::from_coords(&coords, PointRole::Knot).unwrap();
        Arc::new(build_basis(&knots).unwrap())
    }

    #[test]
    fn null_modes_have_unit_eigenvalue() {
        let basis = random_basis(12, 1);
        let model = with_truncation(&basis, basis.basis_count()).unwrap();
        for alpha in [0.01, 1.0, 100.0] {
            let spec = model.eigenvalues(alpha).unwrap();
            for k in 0..model.null_dim() {
                assert_eq!(spec.lambdas[k], 1.0);
            }
        }
    }

    #[test]
    fn scalar_map_direct_substitution() {
        // lambda_S = (0, 1, 3), alpha = 1 -> (1, 0.5, 0.25)
        for (l, expect) in [(0.0, 1.0), (1.0, 0.5), (3.0, 0.25)] {
            assert_abs_diff_eq!(1.0 / (1.0 + 1.0 * l), expect, epsilon = 1e-15);
        }
    }

    #[test]
    fn covariance_matches_dense_inverse() {
        let basis = random_basis(10, 3);
        let alpha = 2.0;
        let k = basis.basis_count();
        let cov = covariance_matrix(&basis, alpha).unwrap();
        let dense = (DMatrix::identity(k, k) + basis.penalty() * alpha)
            .try_inverse()
            .unwrap();
        assert!((cov - dense).abs().max() <= 1e-9);
    }

    #[test]
    fn covariance_eigenvalues_match_scalar_map() {
        let basis = random_basis(12, 5);
        let alpha = 0.7;
        let cov = covariance_matrix(&basis, alpha).unwrap();
        let mut eigs: Vec<f64> = nalgebra::SymmetricEigen::new(cov)
            .eigenvalues
            .iter()
            .copied()
            .collect();
        let mut expect: Vec<f64> = basis
            .eigvals()
            .iter()
            .map(|l| 1.0 / (1.0 + alpha * l))
            .collect();
        eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (a, b) in eigs.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn covariance_near_identity_for_tiny_alpha() {
        let basis = random_basis(8, 7);
        let k = basis.basis_count();
        let cov = covariance_matrix(&basis, 1e-12).unwrap();
        assert!((cov - DMatrix::identity(k, k)).abs().max() <= 1e-8);
    }

    #[test]
    fn covariance_spectrum_in_unit_interval() {
        let basis = random_basis(9, 9);
        let cov = covariance_matrix(&basis, 3.0).unwrap();
        for e in nalgebra::SymmetricEigen::new(cov).eigenvalues.iter() {
            assert!(*e > 0.0 && *e <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn truncation_full_fraction_keeps_everything() {
        let basis = random_basis(10, 11);
        let model = truncate(&basis, 1.0, 1.0).unwrap();
        assert_eq!(model.truncation(), basis.basis_count());
    }

    #[test]
    fn truncation_matches_prefix_sum_oracle() {
        let basis = random_basis(20, 13);
        for fraction in [0.5, 0.8, 0.95, 0.99] {
            let alpha_ref = 1.0;
            let model = truncate(&basis, fraction, alpha_ref).unwrap();
            // Prefix-sum oracle, independent of the implementation path.
            let lam: Vec<f64> = basis
                .eigvals()
                .iter()
                .map(|l| 1.0 / (1.0 + alpha_ref * l))
                .collect();
            let total: f64 = lam.iter().sum();
            let mut cum = 0.0;
            let mut expect = lam.len();
            for (k, l) in lam.iter().enumerate() {
                cum += l;
                if cum >= fraction * total - 1e-12 * total {
                    expect = k + 1;
                    break;
                }
            }
            assert_eq!(model.truncation(), expect.max(basis.null_dim()));
        }
    }

    #[test]
    fn truncation_hand_example() {
        // lambda_{.,alpha_ref} = (1, 1, 1, 0.5, 0.25, 0.25); fraction 0.95
        // cumsum: 1,2,3,3.5,3.75,4.0 -> need 3.8; crossing at index 6.
        let lam = [1.0, 1.0, 1.0, 0.5, 0.25, 0.25];
        let total: f64 = lam.iter().sum();
        let mut cum = 0.0;
        let mut m = 0;
        for (k, l) in lam.iter().enumerate() {
            cum += l;
            if cum >= 0.95 * total {
                m = k + 1;
                break;
            }
        }
        assert_eq!(m, 6);
    }

    #[test]
    fn reconstruct_zero_and_unit_modes() {
        let basis = random_basis(10, 17);
        let model = with_truncation(&basis, 6).unwrap();
        let eval = {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(18);
            let coords: Vec<(f64, f64)> = (0..5).map(|_| (rng.gen::<f64>(), rng.gen())).collect();
            PointSet::from_coords(&coords, PointRole::Observation).unwrap()
        };
        let phi = basis.design(&eval);
        let zero = model
            .reconstruct_field(&DVector::zeros(6), &phi)
            .unwrap();
        assert_eq!(zero.abs().max(), 0.0);

        let mut z = DVector::zeros(6);
        z[3] = 1.0;
        let field = model.reconstruct_field(&z, &phi).unwrap();
        let expect = &phi * model.modes().column(3);
        assert!((field - expect).abs().max() <= 1e-12);
    }

    #[test]
    fn reconstruct_matches_two_step_composition() {
        let basis = random_basis(12, 19);
        let model = with_truncation(&basis, 8).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20);
        let z = DVector::from_fn(8, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let coords: Vec<(f64, f64)> = (0..7).map(|_| (rng.gen::<f64>(), rng.gen())).collect();
        let eval = PointSet::from_coords(&coords, PointRole::Observation).unwrap();
        let phi = basis.design(&eval);
        let direct = model.reconstruct_field(&z, &phi).unwrap();
        let c = model.modes() * &z;
        let two_step = &phi * c;
        assert!((direct - two_step).abs().max() <= 1e-12);
    }

    #[test]
    fn decorrelate_round_trip() {
        let basis = random_basis(9, 23);
        let k = basis.basis_count();
        let model = with_truncation(&basis, k).unwrap();
        // c = Psi e_1 -> z = e_1
        let c = model.modes().column(1).clone_owned();
        let z = model.decorrelate(&c).unwrap();
        for i in 0..k {
            let expect = if i == 1 { 1.0 } else { 0.0 };
            assert_abs_diff_eq!(z[i], expect, epsilon = 1e-10);
        }
        // completeness at full truncation
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(24);
        let c = DVector::from_fn(k, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let back = model.modes() * model.decorrelate(&c).unwrap();
        assert!((back - c).abs().max() <= 1e-10);
    }

    #[test]
    fn decorrelated_prior_draws_have_diagonal_covariance() {
        // Monte-Carlo check that z = Psi'c with c ~ N(0, K_alpha) has
        // cov(z) ~= diag(lambda_{k,alpha}).
        let basis = random_basis(8, 29);
        let k = basis.basis_count();
        let alpha = 0.8;
        let model = with_truncation(&basis, k).unwrap();
        let cov = covariance_matrix(&basis, alpha).unwrap();
        let chol = nalgebra::Cholesky::new(cov).unwrap();
        let l = chol.l();
        let n_draws = 10_000;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(30);
        let mut sum = DMatrix::zeros(k, k);
        use rand_distr::{Distribution, StandardNormal};
        for _ in 0..n_draws {
            let xi = DVector::from_fn(k, |_, _| {
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            });
            let c = &l * xi;
            let z = model.decorrelate(&c).unwrap();
            sum += &z * z.transpose();
        }
        let emp = sum / n_draws as f64;
        let spec = model.eigenvalues(alpha).unwrap();
        for i in 0..k {
            for j in 0..k {
                let expect = if i == j { spec.lambdas[i] } else { 0.0 };
                // 4 Monte-Carlo standard errors; var of a product of
                // unit-scale Gaussians is O(1), se ~ 1/sqrt(n).
                let se = 4.0 * (spec.lambdas[i] * spec.lambdas[j] * 2.0 / n_draws as f64).sqrt();
                assert!(
                    (emp[(i, j)] - expect).abs() <= se.max(4.0 / (n_draws as f64).sqrt()),
                    "cov({i},{j}) = {} vs {expect}",
                    emp[(i, j)]
                );
            }
        }
    }

    #[test]
    fn eigenvalue_monotonicity_in_alpha() {
        let basis = random_basis(14, 31);
        let model = with_truncation(&basis, basis.basis_count()).unwrap();
        let a = model.eigenvalues(0.5).unwrap();
        let b = model.eigenvalues(5.0).unwrap();
        for k in 0..model.truncation() {
            if model.penalty_eigvals()[k] > 0.0 {
                assert!(a.lambdas[k] > b.lambdas[k]);
            } else {
                assert_eq!(a.lambdas[k], 1.0);
                assert_eq!(b.lambdas[k], 1.0);
            }
        }
    }

    #[test]
    fn invalid_alpha_rejected() {
        let basis = random_basis(8, 37);
        assert!(covariance_matrix(&basis, 0.0).is_err());
        assert!(covariance_matrix(&basis, -1.0).is_err());
        let model = with_truncation(&basis, 5).unwrap();
        assert!(model.eigenvalues(0.0).is_err());
    }
}
