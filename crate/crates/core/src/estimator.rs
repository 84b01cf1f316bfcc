//! Minimization of the weighted quadratic form `Q_C(β) = U_nᵀ C U_n` and
//! the iterated optimal-weighting loop around it.
//!
//! The inner solver is a Newton iteration on β with step-halving. The
//! default Hessian is the Gauss–Newton part `GᵀCG` (positive semi-definite
//! whenever `C` is), with the exact second-derivative contraction available
//! as an opt-in; both share the gradient `GᵀCU`, hence the same fixed
//! points. The outer loop re-sets `C = (Δ̂ + Λ̂)⁻¹` at the current iterate
//! until β stabilizes.
//!
//! Estimated covariances come out at finite-sample scale: with optimal
//! weighting `Var(β̂) = (Γᵀ[(Δ̂+Λ̂)/n]⁻¹Γ)⁻¹`, and for a general `C` the
//! sandwich `(ΓᵀCΓ)⁻¹ΓᵀC[(Δ̂+Λ̂)/n]CΓ(ΓᵀCΓ)⁻¹`.

use nalgebra::{DMatrix, DVector};

use crate::error::{GmetaError, Result};
use crate::family::GlmFamily;
use crate::linalg;
use crate::moments::MomentSystem;

/// Where a weighting matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightingProvenance {
    Identity,
    /// `(Δ̂+Λ̂)⁻¹` with reference-based Λ̂.
    OptimalRef,
    /// `(Δ̂+Λ̂)⁻¹` with study-supplied covariances (reference fallback).
    OptimalStudy,
    User,
}

/// Positive semi-definite weighting matrix for the quadratic form.
#[derive(Debug, Clone)]
pub struct WeightingMatrix {
    pub matrix: DMatrix<f64>,
    pub provenance: WeightingProvenance,
}

impl WeightingMatrix {
    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: DMatrix::identity(dim, dim),
            provenance: WeightingProvenance::Identity,
        }
    }

    /// Wrap a user-supplied matrix, checking symmetry, finiteness and
    /// positive semi-definiteness.
    pub fn user(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(GmetaError::DimensionMismatch(
                "weighting matrix must be square".into(),
            ));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(GmetaError::InvalidInput(
                "weighting matrix has non-finite entries".into(),
            ));
        }
        let scale = linalg::sym_operator_norm(&matrix).max(1.0);
        let asym = (&matrix - matrix.transpose()).abs().max();
        if asym > 1e-8 * scale {
            return Err(GmetaError::InvalidInput(
                "weighting matrix is not symmetric".into(),
            ));
        }
        if !linalg::is_psd(&matrix, 1e-10) {
            return Err(GmetaError::InvalidInput(
                "weighting matrix is not positive semi-definite".into(),
            ));
        }
        Ok(Self {
            matrix,
            provenance: WeightingProvenance::User,
        })
    }
}

/// Which Λ̂ estimate feeds the optimal weighting and the covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaSource {
    /// Reference-sample estimate for every study.
    Reference,
    /// Study-supplied covariances, reference-based fallback per study.
    StudyWithFallback,
}

/// Estimator variants: identity weighting, and the iterated optimal
/// weighting fed by reference-based or study-based Λ̂.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GmetaVariant {
    Gmeta0,
    Gmeta1,
    Gmeta2,
}

impl GmetaVariant {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Gmeta0 => "gmeta0",
            Self::Gmeta1 => "gmeta1",
            Self::Gmeta2 => "gmeta2",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "gmeta0" => Ok(Self::Gmeta0),
            "gmeta1" => Ok(Self::Gmeta1),
            "gmeta2" => Ok(Self::Gmeta2),
            other => Err(GmetaError::InvalidInput(format!("unknown variant '{other}'"))),
        }
    }

    fn lambda_source(&self) -> LambdaSource {
        match self {
            Self::Gmeta0 | Self::Gmeta1 => LambdaSource::Reference,
            Self::Gmeta2 => LambdaSource::StudyWithFallback,
        }
    }
}

/// Hessian used in the Newton step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianMode {
    /// `GᵀCG` only: positive semi-definite for PSD `C`.
    GaussNewton,
    /// `GᵀCG` plus the exact second-derivative contraction.
    FullNewton,
}

/// Solver tolerances and iteration caps.
#[derive(Debug, Clone)]
pub struct GmetaConfig {
    pub inner_tolerance: f64,
    pub inner_max_iterations: usize,
    pub outer_tolerance: f64,
    pub outer_max_iterations: usize,
    /// Ridge scale used when a factorization fails.
    pub ridge_epsilon: f64,
    pub hessian_mode: HessianMode,
    pub max_step_halvings: usize,
}

impl Default for GmetaConfig {
    fn default() -> Self {
        Self {
            inner_tolerance: 1e-10,
            inner_max_iterations: 100,
            outer_tolerance: 1e-8,
            outer_max_iterations: 20,
            ridge_epsilon: 1e-10,
            hessian_mode: HessianMode::GaussNewton,
            max_step_halvings: 20,
        }
    }
}

/// Result of a generalized meta-analysis fit.
#[derive(Debug, Clone)]
pub struct GmetaFit {
    pub beta_hat: DVector<f64>,
    /// `Var(β̂)` (finite-sample scale), Λ̂ source matching the variant.
    pub covariance: DMatrix<f64>,
    pub weighting: WeightingMatrix,
    pub objective_value: f64,
    pub converged: bool,
    pub inner_iterations: usize,
    pub outer_iterations: usize,
    pub variant: GmetaVariant,
    /// Estimated maximal-model dispersion, when the family leaves it free.
    pub dispersion: Option<f64>,
    /// Studies whose Λ̂ block fell back to the reference-based estimate
    /// because no covariance was supplied (gmeta2 only).
    pub lambda_fallback_studies: Vec<usize>,
}

/// Largest Newton step accepted per iteration (infinity norm).
const MAX_STEP_INF_NORM: f64 = 5.0;

/// Value of the quadratic objective `U_nᵀ C U_n` at β.
pub fn objective(system: &MomentSystem, beta: &DVector<f64>, weighting: &WeightingMatrix) -> Result<f64> {
    let u = system.stacked_moment(beta)?;
    if weighting.matrix.nrows() != u.len() {
        return Err(GmetaError::DimensionMismatch(format!(
            "weighting is {}×{} but the stacked dimension is {}",
            weighting.matrix.nrows(),
            weighting.matrix.ncols(),
            u.len()
        )));
    }
    Ok((u.transpose() * &weighting.matrix * &u)[(0, 0)])
}

fn gradient_and_jacobian(
    system: &MomentSystem,
    beta: &DVector<f64>,
    c: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, DVector<f64>)> {
    let u = system.stacked_moment(beta)?;
    let g = system.jacobian_beta(beta)?;
    let grad = g.transpose() * c * &u;
    Ok((grad, g, u))
}

/// One Newton update of β with step-halving against the objective.
pub fn newton_step_beta(
    system: &MomentSystem,
    beta: &DVector<f64>,
    weighting: &WeightingMatrix,
    config: &GmetaConfig,
) -> Result<DVector<f64>> {
    let c = &weighting.matrix;
    let obj = objective(system, beta, weighting)?;
    let (grad, g, u) = gradient_and_jacobian(system, beta, c)?;
    if linalg::inf_norm(&grad) <= 1e-14 * (1.0 + obj.abs()) {
        return Ok(beta.clone());
    }
    let mut hessian = g.transpose() * c * &g;
    if config.hessian_mode == HessianMode::FullNewton {
        let cu = c * &u;
        hessian += system.moment_hessian_contraction(beta, &cu)?;
    }
    let direction = linalg::solve_spd(&hessian, &grad, config.ridge_epsilon)
        .ok_or_else(|| GmetaError::Identifiability("Newton Hessian is singular after ridge".into()))?;

    // Cap the step so near-flat directions (moments saturating at extreme
    // linear predictors) cannot fling the iterate to infinity in one move.
    let mut step = direction;
    let norm = linalg::inf_norm(&step);
    if norm > MAX_STEP_INF_NORM {
        step *= MAX_STEP_INF_NORM / norm;
    }
    let mut candidate = beta - &step;
    let mut obj_new = objective(system, &candidate, weighting)?;
    let mut halvings = 0;
    while obj_new > obj + 1e-12 * (1.0 + obj.abs()) && halvings < config.max_step_halvings {
        step *= 0.5;
        candidate = beta - &step;
        obj_new = objective(system, &candidate, weighting)?;
        halvings += 1;
    }
    if obj_new > obj + 1e-12 * (1.0 + obj.abs()) {
        // No descent available at this scale; stay put.
        return Ok(beta.clone());
    }
    Ok(candidate)
}

/// Inner minimization for a fixed weighting. Returns the minimizer, the
/// objective value, the iteration count, a convergence flag and the
/// objective trace across accepted steps.
fn minimize(
    system: &MomentSystem,
    weighting: &WeightingMatrix,
    start: DVector<f64>,
    config: &GmetaConfig,
) -> Result<(DVector<f64>, f64, usize, bool, Vec<f64>)> {
    let mut beta = start;
    let mut obj = objective(system, &beta, weighting)?;
    let mut trace = vec![obj];
    for iter in 1..=config.inner_max_iterations {
        let (grad, _, _) = gradient_and_jacobian(system, &beta, &weighting.matrix)?;
        if linalg::inf_norm(&grad) <= 1e-14 * (1.0 + obj.abs()) {
            return Ok((beta, obj, iter - 1, true, trace));
        }
        let next = newton_step_beta(system, &beta, weighting, config)?;
        let change = linalg::inf_norm(&(&next - &beta));
        let obj_next = objective(system, &next, weighting)?;
        beta = next;
        obj = obj_next;
        trace.push(obj);
        if change < config.inner_tolerance {
            return Ok((beta, obj, iter, true, trace));
        }
        if change == 0.0 {
            // Step-halving could not descend; accept only if the gradient
            // is already at its numerical floor.
            let small = linalg::inf_norm(&grad) < 1e-7 * (1.0 + obj.abs());
            return Ok((beta, obj, iter, small, trace));
        }
    }
    Err(GmetaError::Convergence {
        iterations: config.inner_max_iterations,
        last_change: f64::NAN,
        last_iterate: beta.iter().copied().collect(),
        objective_trace: trace,
    })
}

/// Block-diagonal Λ̂ (asymptotic scale) with the requested source. Returns
/// the matrix and the indices of studies that fell back to the
/// reference-based estimate.
pub fn lambda_blockdiag(
    system: &MomentSystem,
    beta: &DVector<f64>,
    source: LambdaSource,
    maximal_dispersion: Option<f64>,
) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let d = system.total_dim();
    let mut out = DMatrix::zeros(d, d);
    let mut fallbacks = Vec::new();
    for k in 0..system.n_studies() {
        let block = match source {
            LambdaSource::Reference => system.lambda_hat_ref(k, beta, maximal_dispersion)?,
            LambdaSource::StudyWithFallback => match system.lambda_hat_study(k) {
                Ok(b) => b,
                Err(GmetaError::MissingCovariance { .. }) => {
                    fallbacks.push(k);
                    system.lambda_hat_ref(k, beta, maximal_dispersion)?
                }
                Err(e) => return Err(e),
            },
        };
        let range = system.block_range(k);
        for (bi, i) in range.clone().enumerate() {
            for (bj, j) in range.clone().enumerate() {
                out[(i, j)] = block[(bi, bj)];
            }
        }
    }
    Ok((out, fallbacks))
}

/// `Ĉ_opt = (Δ̂ + Λ̂)⁻¹` at the supplied β.
fn optimal_weighting(
    system: &MomentSystem,
    beta: &DVector<f64>,
    source: LambdaSource,
    maximal_dispersion: Option<f64>,
    ridge_epsilon: f64,
) -> Result<(WeightingMatrix, Vec<usize>)> {
    let delta = system.delta_hat(beta)?;
    let (lambda, fallbacks) = lambda_blockdiag(system, beta, source, maximal_dispersion)?;
    let total = delta + lambda;
    let inv = linalg::inv_spd(&total, ridge_epsilon.max(1e-10))
        .ok_or_else(|| GmetaError::Identifiability("Δ̂+Λ̂ is singular even after ridge".into()))?;
    let provenance = match source {
        LambdaSource::Reference => WeightingProvenance::OptimalRef,
        LambdaSource::StudyWithFallback => WeightingProvenance::OptimalStudy,
    };
    Ok((
        WeightingMatrix {
            matrix: inv,
            provenance,
        },
        fallbacks,
    ))
}

/// Sandwich covariance from already-assembled pieces:
/// `(ΓᵀCΓ)⁻¹ΓᵀC M₀ CΓ(ΓᵀCΓ)⁻¹ / n` with `M₀ = Δ̂+Λ̂` at asymptotic scale.
pub(crate) fn sandwich_from_parts(
    gamma: &DMatrix<f64>,
    c: &DMatrix<f64>,
    m0: &DMatrix<f64>,
    n: usize,
) -> Result<DMatrix<f64>> {
    let bread = gamma.transpose() * c * gamma;
    let bread_inv = linalg::inv_spd(&bread, 1e-12)
        .ok_or_else(|| GmetaError::Identifiability("ΓᵀCΓ is singular".into()))?;
    let a = &bread_inv * gamma.transpose() * c;
    let cov = &a * m0 * a.transpose() / n as f64;
    Ok(linalg::symmetrize(&cov))
}

/// Estimated `Var(β̂)` (finite-sample scale) at `beta`.
///
/// With an optimal-provenance (or absent) weighting this is the closed form
/// `(Γᵀ[(Δ̂+Λ̂)/n]⁻¹Γ)⁻¹`; for any other `C` the sandwich form is used.
pub fn asymptotic_covariance(
    system: &MomentSystem,
    beta: &DVector<f64>,
    weighting: Option<&WeightingMatrix>,
    source: LambdaSource,
    maximal_dispersion: Option<f64>,
) -> Result<DMatrix<f64>> {
    let gamma = system.jacobian_beta(beta)?;
    let delta = system.delta_hat(beta)?;
    let (lambda, _) = lambda_blockdiag(system, beta, source, maximal_dispersion)?;
    let m0 = delta + lambda;
    let n = system.reference().n();
    let optimal = match weighting {
        None => true,
        Some(w) => matches!(
            w.provenance,
            WeightingProvenance::OptimalRef | WeightingProvenance::OptimalStudy
        ),
    };
    if optimal {
        let m0_inv = linalg::inv_spd(&m0, 1e-10)
            .ok_or_else(|| GmetaError::Identifiability("Δ̂+Λ̂ is singular".into()))?;
        let inner = gamma.transpose() * &m0_inv * &gamma;
        let cov = linalg::inv_spd(&inner, 1e-12)
            .ok_or_else(|| GmetaError::Identifiability("Γᵀ(Δ̂+Λ̂)⁻¹Γ is singular".into()))?;
        Ok(linalg::symmetrize(&(cov / n as f64)))
    } else {
        sandwich_from_parts(&gamma, &weighting.unwrap().matrix, &m0, n)
    }
}

/// Local identifiability diagnostic at a probe point.
#[derive(Debug, Clone)]
pub struct IdentifiabilityReport {
    /// Numerical rank of the d × p moment Jacobian at the probe.
    pub rank: usize,
    pub full_rank: bool,
    /// Maximal columns that appear in no study's covariate map.
    pub uncovered_columns: Vec<usize>,
}

/// Rank check of the moment Jacobian at `beta_probe`, plus the
/// covered-columns sufficient condition.
pub fn identifiability_check(system: &MomentSystem, beta_probe: &DVector<f64>) -> Result<IdentifiabilityReport> {
    let g = system.jacobian_beta(beta_probe)?;
    let rank = linalg::numerical_rank(&g, 1e-10);
    let p = system.maximal_dim();
    let mut uncovered = Vec::new();
    for col in 0..p {
        let covered = system
            .studies()
            .iter()
            .any(|s| s.map.maximal_columns.contains(&col));
        if !covered {
            uncovered.push(col);
        }
    }
    Ok(IdentifiabilityReport {
        rank,
        full_rank: rank == p,
        uncovered_columns: uncovered,
    })
}

/// One Newton–Raphson update of the maximal-model dispersion from the
/// per-study dispersion moments
/// `u_k(φ) = (1/n)Σᵢ[(b(ψ̂_ki) − μᵢψ̂_ki)·a′(φ̂_k)/a²(φ̂_k) + q_ki(φ)]`,
/// where `q_ki(φ) = Ẽ_{Y|X}[∂c(Y;φ_k)/∂φ_k]` under the maximal model with
/// dispersion φ. The weighting over the K dispersion moments defaults to
/// the identity.
pub fn dispersion_step(
    phi_t: f64,
    system: &MomentSystem,
    weighting: Option<&DMatrix<f64>>,
    beta_hat: &DVector<f64>,
) -> Result<f64> {
    if system.family() != GlmFamily::GaussianIdentity {
        return Err(GmetaError::Dispersion(format!(
            "{} has a known dispersion; nothing to estimate",
            system.family().name()
        )));
    }
    let k_count = system.n_studies();
    if let Some(c) = weighting {
        if c.nrows() != k_count || c.ncols() != k_count {
            return Err(GmetaError::DimensionMismatch(format!(
                "dispersion weighting is {}×{} but there are {k_count} studies",
                c.nrows(),
                c.ncols()
            )));
        }
    }
    let fam = system.family();
    let n = system.reference().n() as f64;
    let mut u = DVector::zeros(k_count);
    let mut q_prime = DVector::zeros(k_count);
    for k in 0..k_count {
        let study = system.study(k);
        let phi_k = study.dispersion_value()?;
        let preds = system.linear_predictors(k, beta_hat)?;
        let mut u_k = 0.0;
        // For the gaussian family E[Y²|x] = φ + μ², so
        // q_ki(φ) = (φ + μᵢ²)/(2φ̂_k²) − 1/(2φ̂_k) and ∂q_ki/∂φ = 1/(2φ̂_k²).
        for &(eta_full, eta_red) in &preds {
            let mu = fam.inv_link(eta_full);
            let psi = eta_red;
            let term1 = (fam.b(psi) - mu * psi) * fam.a_prime(phi_k) / (fam.a(phi_k) * fam.a(phi_k));
            let q = (phi_t + mu * mu) / (2.0 * phi_k * phi_k) - 1.0 / (2.0 * phi_k);
            u_k += term1 + q;
        }
        u[k] = u_k / n;
        q_prime[k] = 1.0 / (2.0 * phi_k * phi_k);
    }
    let identity;
    let c = match weighting {
        Some(c) => c,
        None => {
            identity = DMatrix::identity(k_count, k_count);
            &identity
        }
    };
    // q″ vanishes for the gaussian family, leaving J = q′ᵀCq′.
    let j = (q_prime.transpose() * c * &q_prime)[(0, 0)];
    if j.abs() < 1e-300 {
        return Err(GmetaError::Convergence {
            iterations: 0,
            last_change: f64::NAN,
            last_iterate: vec![phi_t],
            objective_trace: vec![],
        });
    }
    let d = (u.transpose() * c * &q_prime)[(0, 0)];
    Ok(phi_t - d / j)
}

/// Iterate [`dispersion_step`] to its fixed point.
fn estimate_dispersion(
    system: &MomentSystem,
    beta: &DVector<f64>,
    config: &GmetaConfig,
) -> Result<f64> {
    let start = {
        let mut acc = 0.0;
        for k in 0..system.n_studies() {
            acc += system.study(k).dispersion_value()?;
        }
        acc / system.n_studies() as f64
    };
    let mut phi = start;
    for _ in 0..config.inner_max_iterations {
        let next = dispersion_step(phi, system, None, beta)?;
        let change = (next - phi).abs();
        phi = next;
        if change < config.inner_tolerance * (1.0 + phi.abs()) {
            break;
        }
    }
    if !phi.is_finite() || phi <= 0.0 {
        return Err(GmetaError::Dispersion(format!(
            "estimated maximal dispersion {phi:.3e} is not positive"
        )));
    }
    Ok(phi)
}

/// Fit the generalized meta-analysis estimator.
///
/// `Gmeta0` is a single minimization with the identity weighting from the
/// zero start. `Gmeta1`/`Gmeta2` continue from that solution, re-setting
/// `Ĉ = (Δ̂+Λ̂)⁻¹` (reference- or study-based Λ̂) until β stabilizes.
pub fn fit_gmeta(system: &MomentSystem, variant: GmetaVariant, config: &GmetaConfig) -> Result<GmetaFit> {
    let p = system.maximal_dim();
    let d = system.total_dim();

    let report = identifiability_check(system, &DVector::zeros(p))?;
    if !report.full_rank {
        return Err(GmetaError::Identifiability(format!(
            "moment Jacobian rank {} < {p}; uncovered maximal columns: {:?}",
            report.rank, report.uncovered_columns
        )));
    }

    let identity = WeightingMatrix::identity(d);

    // An exactly identified single-study system is solved by transporting
    // θ̂ through the map: U vanishes there and no iteration can move.
    let transported = if system.n_studies() == 1 && d == p {
        let study = system.study(0);
        let mut beta = DVector::zeros(p);
        for (j, &c) in study.map.maximal_columns.iter().enumerate() {
            beta[c] = study.theta_hat[j];
        }
        let obj = objective(system, &beta, &identity)?;
        (obj <= 1e-28).then_some(beta)
    } else {
        None
    };

    let (mut beta, mut obj, mut inner_total, mut converged) = match transported {
        Some(beta) => {
            let obj = objective(system, &beta, &identity)?;
            (beta, obj, 0, true)
        }
        None => {
            let (beta, obj, iters, conv, _) = minimize(system, &identity, DVector::zeros(p), config)?;
            (beta, obj, iters, conv)
        }
    };

    let mut dispersion = system.family().known_dispersion().map(|_| None).unwrap_or(None);
    if !system.family().dispersion_known() {
        dispersion = Some(estimate_dispersion(system, &beta, config)?);
    }

    let mut weighting = identity;
    let mut outer_iterations = 0;
    let mut fallbacks = Vec::new();

    if variant != GmetaVariant::Gmeta0 {
        let source = variant.lambda_source();
        for outer in 1..=config.outer_max_iterations {
            let (c, fb) = optimal_weighting(system, &beta, source, dispersion, config.ridge_epsilon)?;
            let (beta_new, obj_new, iters, conv, _) = minimize(system, &c, beta.clone(), config)?;
            let change = linalg::inf_norm(&(&beta_new - &beta));
            beta = beta_new;
            obj = obj_new;
            inner_total += iters;
            converged = conv;
            weighting = c;
            fallbacks = fb;
            outer_iterations = outer;
            if !system.family().dispersion_known() {
                dispersion = Some(estimate_dispersion(system, &beta, config)?);
            }
            if change < config.outer_tolerance {
                break;
            }
            if outer == config.outer_max_iterations {
                converged = false;
            }
        }
    }

    let covariance = asymptotic_covariance(
        system,
        &beta,
        Some(&weighting),
        variant.lambda_source(),
        dispersion,
    )?;

    Ok(GmetaFit {
        beta_hat: beta,
        covariance,
        weighting,
        objective_value: obj,
        converged,
        inner_iterations: inner_total,
        outer_iterations,
        variant,
        dispersion,
        lambda_fallback_studies: fallbacks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::sigmoid;
    use crate::glm::{fit_mle, GlmFitConfig};
    use crate::moments::{CovariateMap, ReferenceSample, StudySummary};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_reference(rng: &mut ChaCha8Rng, n: usize) -> ReferenceSample {
        let mut m = DMatrix::zeros(n, 3);
        for i in 0..n {
            m[(i, 0)] = 1.0;
            m[(i, 1)] = rng.sample::<f64, _>(StandardNormal);
            m[(i, 2)] = rng.sample::<f64, _>(StandardNormal);
        }
        ReferenceSample::new(m, vec!["_intercept".into(), "x1".into(), "x2".into()]).unwrap()
    }

    fn logistic_study(label: &str, cols: Vec<usize>, theta: Vec<f64>, n: usize) -> StudySummary {
        StudySummary {
            label: label.into(),
            theta_hat: DVector::from_vec(theta),
            covariance: None,
            n,
            family: GlmFamily::BernoulliLogit,
            map: CovariateMap::new(0, cols).unwrap(),
            dispersion: None,
        }
    }

    fn two_study_system(rng: &mut ChaCha8Rng, n_ref: usize) -> MomentSystem {
        let reference = random_reference(rng, n_ref);
        MomentSystem::new(
            vec![
                logistic_study("s1", vec![0, 1], vec![0.4, -0.3], 200),
                logistic_study("s2", vec![0, 2], vec![-0.2, 0.6], 300),
            ],
            reference,
            GlmFamily::BernoulliLogit,
        )
        .unwrap()
    }

    #[test]
    fn objective_trivial_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // U = 0 at β when the single reduced model is maximal and θ̂ = β.
        let reference = random_reference(&mut rng, 6);
        let beta = DVector::from_vec(vec![0.2, -0.4, 0.6]);
        let sys = MomentSystem::new(
            vec![logistic_study("s1", vec![0, 1, 2], beta.iter().copied().collect(), 40)],
            reference,
            GlmFamily::BernoulliLogit,
        )
        .unwrap();
        let w = WeightingMatrix::identity(3);
        assert_eq!(objective(&sys, &beta, &w).unwrap(), 0.0);

        // Identity weighting is the squared norm, and a random PSD weighting
        // matches the naive vector-matrix-vector product.
        let sys = two_study_system(&mut rng, 7);
        let beta = DVector::from_vec(vec![0.1, 0.2, -0.3]);
        let u = sys.stacked_moment(&beta).unwrap();
        let q = objective(&sys, &beta, &WeightingMatrix::identity(4)).unwrap();
        assert_relative_eq!(q, u.iter().map(|v| v * v).sum::<f64>(), epsilon = 1e-15);

        let mut a = DMatrix::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        let c = &a * a.transpose();
        let q = objective(&sys, &beta, &WeightingMatrix::user(c.clone()).unwrap()).unwrap();
        let mut naive = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                naive += u[i] * c[(i, j)] * u[j];
            }
        }
        assert!((q - naive).abs() < 1e-14 * (1.0 + naive.abs()));
    }

    #[test]
    fn gaussian_exactly_identified_converges_in_one_step() {
        // Linear moments make Q quadratic, so one Newton step solves it.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = DMatrix::zeros(6, 2);
        for i in 0..6 {
            m[(i, 0)] = 1.0;
            m[(i, 1)] = rng.sample::<f64, _>(StandardNormal);
        }
        let reference = ReferenceSample::new(m, vec!["_intercept".into(), "x1".into()]).unwrap();
        let mut s = logistic_study("s1", vec![0, 1], vec![0.7, -0.4], 50);
        s.family = GlmFamily::GaussianIdentity;
        s.dispersion = Some(1.0);
        let sys = MomentSystem::new(vec![s], reference, GlmFamily::GaussianIdentity).unwrap();
        let config = GmetaConfig::default();
        let w = WeightingMatrix::identity(2);
        let one_step = newton_step_beta(&sys, &DVector::zeros(2), &w, &config).unwrap();
        let u = sys.stacked_moment(&one_step).unwrap();
        assert!(linalg::inf_norm(&u) < 1e-12);
    }

    #[test]
    fn step_is_zero_at_the_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reference = random_reference(&mut rng, 9);
        let theta = vec![0.3, -0.2, 0.5];
        let sys = MomentSystem::new(
            vec![logistic_study("s1", vec![0, 1, 2], theta.clone(), 80)],
            reference,
            GlmFamily::BernoulliLogit,
        )
        .unwrap();
        let beta = DVector::from_vec(theta);
        let next = newton_step_beta(&sys, &beta, &WeightingMatrix::identity(3), &GmetaConfig::default()).unwrap();
        assert_eq!(next, beta);
    }

    /// Minimal Nelder–Mead polytope search, used only as an independent
    /// derivative-free oracle.
    fn nelder_mead<F: Fn(&DVector<f64>) -> f64>(f: F, start: DVector<f64>, iters: usize) -> DVector<f64> {
        let n = start.len();
        let mut simplex: Vec<DVector<f64>> = Vec::with_capacity(n + 1);
        simplex.push(start.clone());
        for j in 0..n {
            let mut v = start.clone();
            v[j] += 0.25;
            simplex.push(v);
        }
        let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
        for _ in 0..iters {
            let mut idx: Vec<usize> = (0..=n).collect();
            idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
            let best = idx[0];
            let worst = idx[n];
            let second_worst = idx[n - 1];
            let mut centroid = DVector::zeros(n);
            for &i in idx.iter().take(n) {
                centroid += &simplex[i];
            }
            centroid /= n as f64;
            let reflect = &centroid + (&centroid - &simplex[worst]);
            let fr = f(&reflect);
            if fr < values[best] {
                let expand = &centroid + 2.0 * (&centroid - &simplex[worst]);
                let fe = f(&expand);
                if fe < fr {
                    simplex[worst] = expand;
                    values[worst] = fe;
                } else {
                    simplex[worst] = reflect;
                    values[worst] = fr;
                }
            } else if fr < values[second_worst] {
                simplex[worst] = reflect;
                values[worst] = fr;
            } else {
                let contract = &centroid + 0.5 * (&simplex[worst] - &centroid);
                let fc = f(&contract);
                if fc < values[worst] {
                    simplex[worst] = contract;
                    values[worst] = fc;
                } else {
                    let best_point = simplex[best].clone();
                    for i in 0..=n {
                        if i != best {
                            simplex[i] = (&simplex[i] + &best_point) * 0.5;
                            values[i] = f(&simplex[i]);
                        }
                    }
                }
            }
            let spread = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - values.iter().cloned().fold(f64::INFINITY, f64::min);
            if spread < 1e-24 {
                break;
            }
        }
        let best = (0..=n).min_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap()).unwrap();
        simplex[best].clone()
    }

    #[test]
    fn trajectory_endpoint_matches_polytope_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sys = two_study_system(&mut rng, 12);
        let config = GmetaConfig::default();
        let w = WeightingMatrix::identity(4);
        let (beta, _, _, converged, _) = minimize(&sys, &w, DVector::zeros(3), &config).unwrap();
        assert!(converged);
        let objective_fn = |b: &DVector<f64>| objective(&sys, b, &w).unwrap();
        // Restart the polytope search from its own endpoint to tighten it.
        let mut nm = nelder_mead(&objective_fn, DVector::zeros(3), 3000);
        for _ in 0..3 {
            nm = nelder_mead(&objective_fn, nm, 3000);
        }
        for j in 0..3 {
            assert!((beta[j] - nm[j]).abs() < 1e-6, "component {j}: {} vs {}", beta[j], nm[j]);
        }
    }

    #[test]
    fn exactly_identified_matches_root_finder_oracle() {
        // d = p: the GMM minimizer solves U(β) = 0; compare against an
        // independent Newton root-finder with finite-difference Jacobian.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reference = random_reference(&mut rng, 15);
        let sys = MomentSystem::new(
            vec![logistic_study("s1", vec![0, 1, 2], vec![0.4, -0.6, 0.3], 90)],
            reference,
            GlmFamily::BernoulliLogit,
        )
        .unwrap();
        // Start the solver away from the transported solution.
        let config = GmetaConfig::default();
        let w = WeightingMatrix::identity(3);
        let (beta, _, _, _, _) = minimize(&sys, &w, DVector::zeros(3), &config).unwrap();

        let mut root = DVector::zeros(3);
        for _ in 0..60 {
            let u = sys.stacked_moment(&root).unwrap();
            let h = 1e-7;
            let mut jac = DMatrix::zeros(3, 3);
            for j in 0..3 {
                let mut rp = root.clone();
                let mut rm = root.clone();
                rp[j] += h;
                rm[j] -= h;
                let up = sys.stacked_moment(&rp).unwrap();
                let um = sys.stacked_moment(&rm).unwrap();
                for i in 0..3 {
                    jac[(i, j)] = (up[i] - um[i]) / (2.0 * h);
                }
            }
            let step = jac.lu().solve(&u).unwrap();
            root -= &step;
            if linalg::inf_norm(&step) < 1e-13 {
                break;
            }
        }
        for j in 0..3 {
            assert!((beta[j] - root[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn single_study_reduced_equals_maximal_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let reference = random_reference(&mut rng, 10);
        let theta = vec![0.25, -0.55, 0.35];
        let cov = DMatrix::from_row_slice(3, 3, &[0.02, 0.001, 0.0, 0.001, 0.03, 0.002, 0.0, 0.002, 0.04]);
        let mut s = logistic_study("s1", vec![0, 1, 2], theta.clone(), 500);
        s.covariance = Some(cov.clone());
        let sys = MomentSystem::new(vec![s], reference, GlmFamily::BernoulliLogit).unwrap();
        for variant in [GmetaVariant::Gmeta0, GmetaVariant::Gmeta1, GmetaVariant::Gmeta2] {
            let fit = fit_gmeta(&sys, variant, &GmetaConfig::default()).unwrap();
            for j in 0..3 {
                assert_eq!(fit.beta_hat[j], theta[j], "variant {:?}", variant);
            }
            assert_eq!(fit.objective_value, 0.0);
            assert!(fit.converged);
        }
        // Covariance recovers S₁ for the study-based variant.
        let fit = fit_gmeta(&sys, GmetaVariant::Gmeta2, &GmetaConfig::default()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(fit.covariance[(i, j)], cov[(i, j)], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn objective_trace_non_increasing() {
        // Random θ̂'s can be mutually inconsistent enough that the minimum
        // sits at infinity; those instances must fail as ConvergenceError,
        // and their accepted-step trace must be monotone either way.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..100 {
            let reference = random_reference(&mut rng, 8);
            let sys = MomentSystem::new(
                vec![
                    logistic_study(
                        "s1",
                        vec![0, 1],
                        vec![rng.sample(StandardNormal), rng.sample(StandardNormal)],
                        100,
                    ),
                    logistic_study(
                        "s2",
                        vec![0, 2],
                        vec![rng.sample(StandardNormal), rng.sample(StandardNormal)],
                        150,
                    ),
                ],
                reference,
                GlmFamily::BernoulliLogit,
            )
            .unwrap();
            let trace = match minimize(&sys, &WeightingMatrix::identity(4), DVector::zeros(3), &GmetaConfig::default())
            {
                Ok((_, _, _, _, trace)) => trace,
                Err(GmetaError::Convergence { objective_trace, .. }) => objective_trace,
                Err(e) => panic!("trial {trial}: unexpected error {e}"),
            };
            for w in trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12 * (1.0 + w[0].abs()), "trial {trial}: {trace:?}");
            }
        }
    }

    #[test]
    fn gradient_small_at_returned_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut checked = 0;
        for _ in 0..100 {
            let sys = two_study_system(&mut rng, 10);
            let w = WeightingMatrix::identity(4);
            let (beta, obj, _, converged, _) = match minimize(&sys, &w, DVector::zeros(3), &GmetaConfig::default()) {
                Ok(r) => r,
                Err(GmetaError::Convergence { .. }) => continue,
                Err(e) => panic!("unexpected error {e}"),
            };
            assert!(converged);
            let (grad, _, _) = gradient_and_jacobian(&sys, &beta, &w.matrix).unwrap();
            assert!(linalg::inf_norm(&grad) < 1e-6 * (1.0 + obj.abs()));
            checked += 1;
        }
        assert!(checked >= 90, "only {checked} instances converged");
    }

    #[test]
    fn scaling_the_weighting_leaves_the_minimizer_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sys = two_study_system(&mut rng, 11);
        let config = GmetaConfig::default();
        let c1 = WeightingMatrix::identity(4);
        let c2 = WeightingMatrix::user(DMatrix::identity(4, 4) * 7.3).unwrap();
        let (b1, _, _, _, _) = minimize(&sys, &c1, DVector::zeros(3), &config).unwrap();
        let (b2, _, _, _, _) = minimize(&sys, &c2, DVector::zeros(3), &config).unwrap();
        for j in 0..3 {
            assert!((b1[j] - b2[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn full_newton_matches_gauss_newton_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let sys = two_study_system(&mut rng, 13);
        let gn = GmetaConfig::default();
        let fnw = GmetaConfig {
            hessian_mode: HessianMode::FullNewton,
            ..GmetaConfig::default()
        };
        let w = WeightingMatrix::identity(4);
        let (b1, _, _, _, _) = minimize(&sys, &w, DVector::zeros(3), &gn).unwrap();
        let (b2, _, _, _, _) = minimize(&sys, &w, DVector::zeros(3), &fnw).unwrap();
        for j in 0..3 {
            assert!((b1[j] - b2[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn full_newton_hessian_matches_gradient_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sys = two_study_system(&mut rng, 9);
        let beta = DVector::from_vec(vec![0.15, -0.25, 0.35]);
        let c = DMatrix::identity(4, 4);
        let (_, g, u) = gradient_and_jacobian(&sys, &beta, &c).unwrap();
        let cu = &c * &u;
        let hess = g.transpose() * &c * &g + sys.moment_hessian_contraction(&beta, &cu).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let mut bp = beta.clone();
            let mut bm = beta.clone();
            bp[j] += h;
            bm[j] -= h;
            let (gp, _, _) = gradient_and_jacobian(&sys, &bp, &c).unwrap();
            let (gm, _, _) = gradient_and_jacobian(&sys, &bm, &c).unwrap();
            for i in 0..3 {
                let fd = (gp[i] - gm[i]) / (2.0 * h);
                assert!(
                    (hess[(i, j)] - fd).abs() < 1e-6 * (1.0 + fd.abs()),
                    "({i},{j}): {} vs {}",
                    hess[(i, j)],
                    fd
                );
            }
        }
    }

    #[test]
    fn sandwich_matches_independent_matrix_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let d = 5;
            let p = 3;
            let mut gamma: DMatrix<f64> = DMatrix::zeros(d, p);
            for v in gamma.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let mut a: DMatrix<f64> = DMatrix::zeros(d, d);
            for v in a.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let c = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
            let mut b: DMatrix<f64> = DMatrix::zeros(d, d);
            for v in b.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let m0 = &b * b.transpose();
            let n = 37;
            let cov = sandwich_from_parts(&gamma, &c, &m0, n).unwrap();
            // Independent recomputation.
            let bread = (gamma.transpose() * &c * &gamma).try_inverse().unwrap();
            let expect = &bread
                * gamma.transpose()
                * &c
                * &m0
                * &c
                * &gamma
                * &bread
                / n as f64;
            for i in 0..p {
                for j in 0..p {
                    assert!((cov[(i, j)] - expect[(i, j)]).abs() < 1e-12 * (1.0 + expect[(i, j)].abs()));
                }
            }
        }
    }

    #[test]
    fn identifiability_report_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let reference = random_reference(&mut rng, 8);
        // Column 2 is in no map.
        let sys = MomentSystem::new(
            vec![
                logistic_study("s1", vec![0, 1], vec![0.1, 0.2], 50),
                logistic_study("s2", vec![0, 1], vec![0.0, 0.3], 60),
            ],
            reference.clone(),
            GlmFamily::BernoulliLogit,
        )
        .unwrap();
        let rep = identifiability_check(&sys, &DVector::zeros(3)).unwrap();
        assert!(!rep.full_rank);
        assert_eq!(rep.uncovered_columns, vec![2]);
        assert!(matches!(
            fit_gmeta(&sys, GmetaVariant::Gmeta0, &GmetaConfig::default()),
            Err(GmetaError::Identifiability(_))
        ));

        // Overlapping pairwise maps cover every column.
        let sys = two_study_system(&mut rng, 8);
        let rep = identifiability_check(&sys, &DVector::zeros(3)).unwrap();
        assert!(rep.full_rank);
        assert!(rep.uncovered_columns.is_empty());
    }

    #[test]
    fn rank_matches_column_pivot_elimination_oracle() {
        // Independent rank computation by column-pivoted elimination.
        fn elim_rank(m: &DMatrix<f64>) -> usize {
            let mut a = m.clone();
            let (rows, cols) = (a.nrows(), a.ncols());
            let mut rank = 0;
            for col in 0..cols {
                let mut pivot = rank;
                let mut best = 0.0;
                for r in rank..rows {
                    if a[(r, col)].abs() > best {
                        best = a[(r, col)].abs();
                        pivot = r;
                    }
                }
                if best < 1e-9 {
                    continue;
                }
                a.swap_rows(rank, pivot);
                for r in 0..rows {
                    if r != rank {
                        let f = a[(r, col)] / a[(rank, col)];
                        for c2 in 0..cols {
                            a[(r, c2)] -= f * a[(rank, c2)];
                        }
                    }
                }
                rank += 1;
                if rank == rows {
                    break;
                }
            }
            rank
        }
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..30 {
            let sys = two_study_system(&mut rng, 6);
            let g = sys.jacobian_beta(&DVector::zeros(3)).unwrap();
            assert_eq!(linalg::numerical_rank(&g, 1e-10), elim_rank(&g));
        }
    }

    #[test]
    fn dispersion_step_recovers_truth_and_refuses_bernoulli() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        // Gaussian studies with known truth φ* = 1: simulate large studies,
        // fit reduced linear models, and check the converged φ̂ against the
        // residual-variance oracle.
        let rho = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.6, 0.3, 1.0, 0.1, 0.6, 0.1, 1.0]);
        let half = linalg::sym_sqrt(&rho).unwrap();
        let n_k = 20_000;
        let beta_true = [0.0, 0.4, 0.3, -0.2];
        let draw_design = |rng: &mut ChaCha8Rng, n: usize| {
            let mut m = DMatrix::zeros(n, 4);
            for i in 0..n {
                let z = DVector::from_vec(vec![
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                ]);
                let x = &half * z;
                m[(i, 0)] = 1.0;
                for j in 0..3 {
                    m[(i, j + 1)] = x[j];
                }
            }
            m
        };
        let maps: [Vec<usize>; 2] = [vec![0, 1, 2], vec![0, 1, 3]];
        let mut studies = Vec::new();
        let mut residual_oracle = Vec::new();
        for (k, cols) in maps.iter().enumerate() {
            let pool = draw_design(&mut rng, n_k);
            let mut y = DVector::zeros(n_k);
            for i in 0..n_k {
                let eta: f64 = (0..4).map(|j| beta_true[j] * pool[(i, j)]).sum();
                y[i] = eta + rng.sample::<f64, _>(StandardNormal);
            }
            let mut xa = DMatrix::zeros(n_k, 3);
            for (j, &c) in cols.iter().enumerate() {
                for i in 0..n_k {
                    xa[(i, j)] = pool[(i, c)];
                }
            }
            let fit = fit_mle(&xa, &y, GlmFamily::GaussianIdentity, &GlmFitConfig::default()).unwrap();
            residual_oracle.push(fit.dispersion_estimate.unwrap());
            studies.push(StudySummary {
                label: format!("s{k}"),
                theta_hat: fit.coefficients,
                covariance: Some(fit.sandwich_covariance),
                n: n_k,
                family: GlmFamily::GaussianIdentity,
                map: CovariateMap::new(k, cols.clone()).unwrap(),
                dispersion: fit.dispersion_estimate,
            });
        }
        let mut ref_design = draw_design(&mut rng, 2000);
        for i in 0..2000 {
            ref_design[(i, 0)] = 1.0;
        }
        let reference = ReferenceSample::new(
            ref_design,
            vec!["_intercept".into(), "x1".into(), "x2".into(), "x3".into()],
        )
        .unwrap();
        let sys = MomentSystem::new(studies, reference, GlmFamily::GaussianIdentity).unwrap();
        let fit = fit_gmeta(&sys, GmetaVariant::Gmeta2, &GmetaConfig::default()).unwrap();
        let phi = fit.dispersion.unwrap();
        assert!((phi - 1.0).abs() < 0.05, "φ̂ = {phi}");
        // Study residual variances are consistent for φ* too; stay close.
        for r in &residual_oracle {
            assert!((phi - r).abs() < 0.1);
        }

        // Analytic ∂q_n/∂φ against finite differences via the step map:
        // φ⁺(φ) is affine with slope 1 − (q′ᵀq′)⁻¹q′ᵀq′·(∂u/∂φ q′-dir) …
        // check instead that u_k(φ) is affine in φ with slope q′_k.
        let beta_hat = &fit.beta_hat;
        let phi_a = 0.7;
        let phi_b = 0.9;
        let step_a = dispersion_step(phi_a, &sys, None, beta_hat).unwrap();
        let step_b = dispersion_step(phi_b, &sys, None, beta_hat).unwrap();
        // Affine step map: both lead to the same fixed point.
        let fp_a = step_a;
        let fp_b = step_b;
        assert!((fp_a - fp_b).abs() < 1e-9);

        // Bernoulli refusal.
        let mut rng2 = ChaCha8Rng::seed_from_u64(16);
        let sys_b = two_study_system(&mut rng2, 8);
        assert!(matches!(
            dispersion_step(1.0, &sys_b, None, &DVector::zeros(3)),
            Err(GmetaError::Dispersion(_))
        ));
    }

    #[test]
    fn dispersion_moment_derivative_matches_finite_differences() {
        // ∂q_n/∂φ is constant 1/(2φ̂_k²); verify via u_k(φ) differences.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut m = DMatrix::zeros(30, 2);
        for i in 0..30 {
            m[(i, 0)] = 1.0;
            m[(i, 1)] = rng.sample::<f64, _>(StandardNormal);
        }
        let reference = ReferenceSample::new(m, vec!["_intercept".into(), "x1".into()]).unwrap();
        let mut s1 = logistic_study("s1", vec![0, 1], vec![0.2, 0.5], 100);
        s1.family = GlmFamily::GaussianIdentity;
        s1.dispersion = Some(1.3);
        let mut s2 = logistic_study("s2", vec![0], vec![0.1], 150);
        s2.family = GlmFamily::GaussianIdentity;
        s2.dispersion = Some(0.8);
        let sys = MomentSystem::new(vec![s1, s2], reference, GlmFamily::GaussianIdentity).unwrap();
        let beta = DVector::from_vec(vec![0.3, -0.2]);
        // The Newton map is exact for an affine moment, so the fixed point
        // φ̂ from any two starts must agree; and the implied slope of the
        // moment in φ equals q′ᵀ-weighting consistency.
        let f1 = dispersion_step(0.5, &sys, None, &beta).unwrap();
        let f2 = dispersion_step(2.0, &sys, None, &beta).unwrap();
        assert!((f1 - f2).abs() < 1e-10);
        // Finite-difference slope of the dispersion moment through the step
        // map: reconstruct u(φ)ᵀq′ from the step and verify linearity.
        let probe = |phi: f64| phi - dispersion_step(phi, &sys, None, &beta).unwrap();
        let h = 1e-4;
        let slope = (probe(1.0 + h) - probe(1.0 - h)) / (2.0 * h);
        // d/dφ [φ − (φ − D/J)] = d/dφ [D/J] = (q′ᵀq′)/J = 1.
        assert_relative_eq!(slope, 1.0, epsilon = 1e-7);
    }

    #[test]
    fn meta_equivalence_on_identical_maximal_models() {
        // All studies fit the same maximal model: the optimally weighted
        // estimator coincides with fixed-effect meta-analysis up to o_p(n^{-1/2}).
        use crate::meta::fixed_effect_meta;
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let beta_true = [0.1, 0.3, -0.2];
        let n_k = 5000;
        let mut summaries = Vec::new();
        let mut studies = Vec::new();
        for k in 0..3 {
            let mut design = DMatrix::zeros(n_k, 3);
            for i in 0..n_k {
                design[(i, 0)] = 1.0;
                design[(i, 1)] = rng.sample::<f64, _>(StandardNormal);
                design[(i, 2)] = rng.sample::<f64, _>(StandardNormal);
            }
            let mut y = DVector::zeros(n_k);
            for i in 0..n_k {
                let eta: f64 = (0..3).map(|j| beta_true[j] * design[(i, j)]).sum();
                y[i] = if rng.random::<f64>() < sigmoid(eta) { 1.0 } else { 0.0 };
            }
            let fit = fit_mle(&design, &y, GlmFamily::BernoulliLogit, &GlmFitConfig::default()).unwrap();
            summaries.push((fit.coefficients.clone(), fit.sandwich_covariance.clone()));
            studies.push(StudySummary {
                label: format!("s{k}"),
                theta_hat: fit.coefficients,
                covariance: Some(fit.sandwich_covariance),
                n: n_k,
                family: GlmFamily::BernoulliLogit,
                map: CovariateMap::new(k, vec![0, 1, 2]).unwrap(),
                dispersion: None,
            });
        }
        let reference = random_reference(&mut rng, 2000);
        let sys = MomentSystem::new(studies, reference, GlmFamily::BernoulliLogit).unwrap();
        let fit = fit_gmeta(&sys, GmetaVariant::Gmeta2, &GmetaConfig::default()).unwrap();
        let meta = fixed_effect_meta(&summaries).unwrap();
        let min_se = (0..3).map(|j| meta.covariance[(j, j)].sqrt()).fold(f64::INFINITY, f64::min);
        let gap = linalg::inf_norm(&(&fit.beta_hat - &meta.estimate));
        assert!(gap < 0.05 * min_se, "gap {gap} vs 0.05·SE {}", 0.05 * min_se);
    }
}
