//! Maximum-likelihood fitting of generalized linear models by iteratively
//! reweighted least squares, with model-based and robust (sandwich)
//! covariance estimates.
//!
//! This is the machinery a contributing study would run: it produces the
//! coefficient estimate together with the two covariance estimates at
//! finite-sample scale, i.e. `Var(θ̂)` directly rather than the asymptotic
//! `Σ = n·Var(θ̂)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{GmetaError, Result};
use crate::family::GlmFamily;
use crate::linalg;

/// Tolerances and guards for [`fit_mle`].
#[derive(Debug, Clone)]
pub struct GlmFitConfig {
    /// Stop when the coefficient change has infinity norm below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Step halvings allowed per iteration when the deviance increases.
    pub max_step_halvings: usize,
    /// Declare separation when any |coefficient| exceeds this bound.
    pub separation_bound: f64,
}

impl Default for GlmFitConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 100,
            max_step_halvings: 20,
            separation_bound: 30.0,
        }
    }
}

/// A fitted reduced (or maximal) model as a study would report it.
#[derive(Debug, Clone)]
pub struct GlmFit {
    pub coefficients: DVector<f64>,
    /// Inverse observed information, `Var(θ̂)` scale.
    pub model_covariance: DMatrix<f64>,
    /// Robust Ĵ⁻¹V̂Ĵ⁻¹ covariance, `Var(θ̂)` scale.
    pub sandwich_covariance: DMatrix<f64>,
    /// Estimated dispersion `a(φ̂)`; absent when the family fixes it.
    pub dispersion_estimate: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
}

fn check_dims(design: &DMatrix<f64>, outcomes: &DVector<f64>) -> Result<()> {
    if design.nrows() != outcomes.len() {
        return Err(GmetaError::DimensionMismatch(format!(
            "design has {} rows but outcomes has {}",
            design.nrows(),
            outcomes.len()
        )));
    }
    if design.ncols() == 0 || design.nrows() == 0 {
        return Err(GmetaError::InvalidInput("empty design matrix".into()));
    }
    Ok(())
}

/// Deviance used for step-halving: −2·log-likelihood up to a constant in θ.
fn deviance(design: &DMatrix<f64>, outcomes: &DVector<f64>, family: GlmFamily, theta: &DVector<f64>) -> f64 {
    let eta = design * theta;
    match family {
        GlmFamily::BernoulliLogit => {
            let mut dev = 0.0;
            for i in 0..outcomes.len() {
                dev += 2.0 * (family.b(eta[i]) - outcomes[i] * eta[i]);
            }
            dev
        }
        GlmFamily::GaussianIdentity => {
            let mut rss = 0.0;
            for i in 0..outcomes.len() {
                let r = outcomes[i] - eta[i];
                rss += r * r;
            }
            rss
        }
    }
}

/// One IRWLS pass: returns the fitted coefficients, iteration count,
/// convergence flag and deviance trace (for the monotonicity invariant).
fn irwls(
    design: &DMatrix<f64>,
    outcomes: &DVector<f64>,
    family: GlmFamily,
    config: &GlmFitConfig,
) -> Result<(DVector<f64>, usize, bool, Vec<f64>)> {
    let d = design.ncols();

    // Deterministic starts: zero for logistic, OLS for gaussian.
    let mut theta = match family {
        GlmFamily::BernoulliLogit => DVector::zeros(d),
        GlmFamily::GaussianIdentity => {
            let xtx = design.transpose() * design;
            let xty = design.transpose() * outcomes;
            linalg::solve_spd(&xtx, &xty, 0.0)
                .ok_or_else(|| GmetaError::Identifiability("design is rank deficient".into()))?
        }
    };
    let mut dev = deviance(design, outcomes, family, &theta);
    let mut trace = vec![dev];

    for iter in 1..=config.max_iterations {
        let eta = design * &theta;
        // Canonical-link working response and weights; a(φ) cancels from the
        // Newton update so it is omitted here.
        let mut w = DVector::zeros(design.nrows());
        let mut z = DVector::zeros(design.nrows());
        for i in 0..design.nrows() {
            let mu = family.inv_link(eta[i]);
            let me = family.mu_eta(eta[i]).max(1e-10);
            w[i] = me;
            z[i] = eta[i] + (outcomes[i] - mu) / me;
        }
        let xtw = {
            let mut m = design.transpose();
            for i in 0..design.nrows() {
                for j in 0..d {
                    m[(j, i)] *= w[i];
                }
            }
            m
        };
        let hessian = &xtw * design;
        let rhs = &xtw * &z;
        let theta_new = linalg::solve_spd(&hessian, &rhs, 0.0).ok_or_else(|| {
            GmetaError::Identifiability("weighted information matrix is singular (rank-deficient design)".into())
        })?;

        let mut step = &theta_new - &theta;
        let mut candidate = theta_new;
        let mut dev_new = deviance(design, outcomes, family, &candidate);
        let mut halvings = 0;
        while dev_new > dev + 1e-12 * (1.0 + dev.abs()) && halvings < config.max_step_halvings {
            step *= 0.5;
            candidate = &theta + &step;
            dev_new = deviance(design, outcomes, family, &candidate);
            halvings += 1;
        }

        let change = linalg::inf_norm(&step);
        theta = candidate;
        dev = dev_new;
        trace.push(dev);

        if theta.iter().any(|c| c.abs() > config.separation_bound) {
            return Err(GmetaError::Separation {
                bound: config.separation_bound,
            });
        }
        if change < config.tolerance {
            return Ok((theta, iter, true, trace));
        }
        if iter == config.max_iterations {
            return Err(GmetaError::Convergence {
                iterations: iter,
                last_change: change,
                last_iterate: theta.iter().copied().collect(),
                objective_trace: trace,
            });
        }
    }
    unreachable!("loop either returns or errors")
}

/// Fit the maximum-likelihood estimate of a GLM.
///
/// Returns the coefficients along with the model-based covariance (inverse
/// observed information) and the sandwich covariance built from the score
/// outer products, both at `Var(θ̂)` scale.
pub fn fit_mle(
    design: &DMatrix<f64>,
    outcomes: &DVector<f64>,
    family: GlmFamily,
    config: &GlmFitConfig,
) -> Result<GlmFit> {
    check_dims(design, outcomes)?;
    for (i, &y) in outcomes.iter().enumerate() {
        if !family.in_support(y) {
            return Err(GmetaError::InvalidInput(format!(
                "outcome {y} at row {i} is outside the {} support",
                family.name()
            )));
        }
    }

    let (theta, iterations, converged, _trace) = irwls(design, outcomes, family, config)?;

    let n = design.nrows();
    let d = design.ncols();
    let eta = design * &theta;

    let dispersion_estimate = match family {
        GlmFamily::BernoulliLogit => None,
        GlmFamily::GaussianIdentity => {
            let mut rss = 0.0;
            for i in 0..n {
                let r = outcomes[i] - eta[i];
                rss += r * r;
            }
            let dof = (n.saturating_sub(d)).max(1);
            Some(rss / dof as f64)
        }
    };
    let phi = dispersion_estimate
        .or_else(|| family.known_dispersion())
        .expect("dispersion resolved for every family");

    // Observed information J = Σᵢ b″(ψᵢ)/a(φ) · xᵢxᵢᵀ under the canonical link.
    let mut info = DMatrix::zeros(d, d);
    for i in 0..n {
        let w = family.b_double_prime(eta[i]) / family.a(phi);
        let xi = design.row(i).transpose();
        info += w * &xi * xi.transpose();
    }
    let model_covariance = linalg::inv_spd(&info, 1e-12)
        .ok_or_else(|| GmetaError::Identifiability("observed information is singular".into()))?;

    let scores = score_contributions(&theta, design, outcomes, family, Some(phi))?;
    let meat = scores.transpose() * &scores;
    let sandwich_covariance = linalg::symmetrize(&(&model_covariance * meat * &model_covariance));

    Ok(GlmFit {
        coefficients: theta,
        model_covariance,
        sandwich_covariance,
        dispersion_estimate,
        converged,
        iterations,
    })
}

/// Per-observation score rows `(yᵢ − g⁻¹(xᵢᵀθ))·(a(φ)b″(ψᵢ)g′(b′(ψᵢ)))⁻¹·xᵢ`.
///
/// `dispersion` may be omitted when the family fixes it.
pub fn score_contributions(
    fit_params: &DVector<f64>,
    design: &DMatrix<f64>,
    outcomes: &DVector<f64>,
    family: GlmFamily,
    dispersion: Option<f64>,
) -> Result<DMatrix<f64>> {
    check_dims(design, outcomes)?;
    if design.ncols() != fit_params.len() {
        return Err(GmetaError::DimensionMismatch(format!(
            "design has {} columns but parameter vector has length {}",
            design.ncols(),
            fit_params.len()
        )));
    }
    let phi = dispersion.or_else(|| family.known_dispersion()).ok_or_else(|| {
        GmetaError::Dispersion(format!("{} requires a dispersion value", family.name()))
    })?;

    let eta = design * fit_params;
    let mut out = DMatrix::zeros(design.nrows(), design.ncols());
    for i in 0..design.nrows() {
        let mu = family.inv_link(eta[i]);
        let denom = family.score_denominator(phi, eta[i]);
        let scale = (outcomes[i] - mu) / denom;
        for j in 0..design.ncols() {
            out[(i, j)] = scale * design[(i, j)];
        }
    }
    Ok(out)
}

/// Recover `a(φ̂)` from the convention that the study standardized its
/// outcomes to unit variance:
/// `a(φ̂) = [1 − samplevar(g⁻¹(xᵀθ̂))]⁻¹ · mean(b″(ψ̂))` over the supplied
/// (reduced) reference design.
pub fn dispersion_from_standardized(
    reduced_params: &DVector<f64>,
    reference_design: &DMatrix<f64>,
    family: GlmFamily,
) -> Result<f64> {
    if reference_design.ncols() != reduced_params.len() {
        return Err(GmetaError::DimensionMismatch(format!(
            "reference design has {} columns but parameter vector has length {}",
            reference_design.ncols(),
            reduced_params.len()
        )));
    }
    let n = reference_design.nrows();
    if n == 0 {
        return Err(GmetaError::InvalidInput("empty reference design".into()));
    }
    let eta = reference_design * reduced_params;
    let fitted: Vec<f64> = eta.iter().map(|&e| family.inv_link(e)).collect();
    let mean = fitted.iter().sum::<f64>() / n as f64;
    let var = fitted.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / n as f64;
    if var >= 1.0 {
        return Err(GmetaError::Dispersion(format!(
            "sample variance of fitted means is {var:.6}, which is ≥ 1; \
             outcomes were not standardized or the model is badly misfit"
        )));
    }
    let mean_bpp = eta.iter().map(|&e| family.b_double_prime(e)).sum::<f64>() / n as f64;
    Ok(mean_bpp / (1.0 - var))
}
