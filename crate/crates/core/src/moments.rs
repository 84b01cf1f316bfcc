//! The stacked empirical moment system linking reduced-model summaries to
//! the maximal model.
//!
//! Study `k` reports `θ̂_k` for a model on the covariate subset `A_k`. The
//! conditional expectation of its score under the maximal model,
//!
//! ```text
//! u_k(x; β, θ_k) = (g⁻¹(xᵀβ) − g⁻¹(x_{A_k}ᵀθ_k)) · (a(φ_k)b″(ψ̂_k)g′(b′(ψ̂_k)))⁻¹ · x_{A_k},
//! ```
//!
//! averages to zero over the covariate distribution at the true `β`. This
//! module evaluates the stacked average over a reference sample, together
//! with the analytic Jacobians and the two variance pieces needed for
//! optimal weighting:
//!
//! - `Δ̂`  — outer-product covariance of the stacked moment vector, and
//! - `Λ̂_k` — per-study contribution from the sampling noise of `θ̂_k`,
//!   estimated either from the study covariance (`n·W_k S_k W_kᵀ`) or from
//!   the reference sample alone.
//!
//! Λ̂ and Δ̂ are on the asymptotic (√n) scale throughout; study covariances
//! enter at finite-sample scale `S_k = Var(θ̂_k)`.
//!
//! Study-specific intercepts are handled purely through the column maps:
//! the maximal design carries one intercept column per study, each study's
//! map selects its own, and intercept columns outside a study's map are
//! treated as zero in that study's full linear predictor.

use nalgebra::{DMatrix, DVector};

use crate::error::{GmetaError, Result};
use crate::family::GlmFamily;
use crate::linalg;

/// Which maximal-design columns a study's reduced model used, in order.
#[derive(Debug, Clone)]
pub struct CovariateMap {
    /// Position of the study in the system (0-based).
    pub study_index: usize,
    /// Ordered column indices into the maximal design, including the
    /// study's intercept column.
    pub maximal_columns: Vec<usize>,
}

impl CovariateMap {
    pub fn new(study_index: usize, maximal_columns: Vec<usize>) -> Result<Self> {
        let mut seen = maximal_columns.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != maximal_columns.len() {
            return Err(GmetaError::InvalidInput(format!(
                "covariate map of study {study_index} has repeated columns"
            )));
        }
        Ok(Self {
            study_index,
            maximal_columns,
        })
    }

    /// Reduced dimension d_k.
    pub fn reduced_dimension(&self) -> usize {
        self.maximal_columns.len()
    }
}

/// Summary-level information from one study.
#[derive(Debug, Clone)]
pub struct StudySummary {
    pub label: String,
    /// Reduced-model estimate θ̂_k, ordered as `map.maximal_columns`.
    pub theta_hat: DVector<f64>,
    /// `Var(θ̂_k)` (finite-sample scale), when the study supplied one.
    pub covariance: Option<DMatrix<f64>>,
    /// Study sample size n_k.
    pub n: usize,
    pub family: GlmFamily,
    pub map: CovariateMap,
    /// Dispersion `a(φ_k)`, when known or estimated.
    pub dispersion: Option<f64>,
}

impl StudySummary {
    fn validate(&self, maximal_dim: usize) -> Result<()> {
        let d_k = self.map.reduced_dimension();
        if self.theta_hat.len() != d_k {
            return Err(GmetaError::DimensionMismatch(format!(
                "study {}: θ̂ has length {} but the map selects {} columns",
                self.label,
                self.theta_hat.len(),
                d_k
            )));
        }
        if self.n == 0 {
            return Err(GmetaError::InvalidInput(format!(
                "study {}: sample size must be at least 1",
                self.label
            )));
        }
        for &c in &self.map.maximal_columns {
            if c >= maximal_dim {
                return Err(GmetaError::InvalidInput(format!(
                    "study {}: map column {c} exceeds maximal dimension {maximal_dim}",
                    self.label
                )));
            }
        }
        if let Some(cov) = &self.covariance {
            if cov.nrows() != d_k || cov.ncols() != d_k {
                return Err(GmetaError::DimensionMismatch(format!(
                    "study {}: covariance is {}×{} but d_k = {d_k}",
                    self.label,
                    cov.nrows(),
                    cov.ncols()
                )));
            }
            if !linalg::is_psd(cov, 1e-8) {
                return Err(GmetaError::InvalidInput(format!(
                    "study {}: covariance is not positive semi-definite",
                    self.label
                )));
            }
        }
        Ok(())
    }

    /// `a(φ_k)`: the family value when fixed, otherwise the supplied one.
    pub fn dispersion_value(&self) -> Result<f64> {
        self.family
            .known_dispersion()
            .or(self.dispersion)
            .ok_or_else(|| {
                GmetaError::Dispersion(format!(
                    "study {} ({}) needs a dispersion value",
                    self.label,
                    self.family.name()
                ))
            })
    }
}

/// Covariate-only sample used as the empirical measure for the moments.
#[derive(Debug, Clone)]
pub struct ReferenceSample {
    design: DMatrix<f64>,
    column_names: Vec<String>,
    intercept_columns: Vec<usize>,
}

impl ReferenceSample {
    /// Build from a maximal design whose intercept columns are the ones
    /// named with the `_intercept` prefix.
    pub fn new(design: DMatrix<f64>, column_names: Vec<String>) -> Result<Self> {
        if design.nrows() == 0 {
            return Err(GmetaError::InvalidInput("reference sample is empty".into()));
        }
        if column_names.len() != design.ncols() {
            return Err(GmetaError::DimensionMismatch(format!(
                "{} column names for {} design columns",
                column_names.len(),
                design.ncols()
            )));
        }
        if let Some(bad) = design.iter().position(|v| !v.is_finite()) {
            let (r, c) = (bad % design.nrows(), bad / design.nrows());
            return Err(GmetaError::InvalidInput(format!(
                "non-finite reference entry at row {r}, column {c}"
            )));
        }
        let intercept_columns = column_names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with("_intercept"))
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            design,
            column_names,
            intercept_columns,
        })
    }

    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    pub fn maximal_dim(&self) -> usize {
        self.design.ncols()
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn intercept_columns(&self) -> &[usize] {
        &self.intercept_columns
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }
}

/// Immutable bundle of study summaries plus the reference sample, with the
/// moment vector, Jacobians and variance components evaluated on demand.
#[derive(Debug, Clone)]
pub struct MomentSystem {
    studies: Vec<StudySummary>,
    reference: ReferenceSample,
    family: GlmFamily,
    /// Per study: reference columns restricted to the study map (n × d_k).
    reduced_designs: Vec<DMatrix<f64>>,
    /// Per study: maximal columns active in the study's full linear
    /// predictor (everything except other studies' intercept columns).
    active_columns: Vec<Vec<usize>>,
    /// Block start offsets into the stacked d-vector.
    offsets: Vec<usize>,
    total_dim: usize,
}

impl MomentSystem {
    pub fn new(
        studies: Vec<StudySummary>,
        reference: ReferenceSample,
        family: GlmFamily,
    ) -> Result<Self> {
        if studies.is_empty() {
            return Err(GmetaError::InvalidInput("no studies supplied".into()));
        }
        let p = reference.maximal_dim();
        for s in &studies {
            s.validate(p)?;
            if s.family != family {
                return Err(GmetaError::UnsupportedFamily(format!(
                    "study {} uses {} but the maximal model is {}; mixed links are not supported",
                    s.label,
                    s.family.name(),
                    family.name()
                )));
            }
        }
        let total_dim: usize = studies.iter().map(|s| s.map.reduced_dimension()).sum();
        if total_dim < p {
            return Err(GmetaError::Identifiability(format!(
                "stacked moment dimension {total_dim} is below the maximal dimension {p}"
            )));
        }

        let n = reference.n();
        let mut reduced_designs = Vec::with_capacity(studies.len());
        let mut active_columns = Vec::with_capacity(studies.len());
        let mut offsets = Vec::with_capacity(studies.len());
        let mut off = 0;
        for s in &studies {
            let d_k = s.map.reduced_dimension();
            let mut x_a = DMatrix::zeros(n, d_k);
            for (j, &c) in s.map.maximal_columns.iter().enumerate() {
                for i in 0..n {
                    x_a[(i, j)] = reference.design[(i, c)];
                }
            }
            reduced_designs.push(x_a);
            let active: Vec<usize> = (0..p)
                .filter(|c| {
                    !reference.intercept_columns.contains(c) || s.map.maximal_columns.contains(c)
                })
                .collect();
            active_columns.push(active);
            offsets.push(off);
            off += d_k;
        }

        Ok(Self {
            studies,
            reference,
            family,
            reduced_designs,
            active_columns,
            offsets,
            total_dim,
        })
    }

    pub fn studies(&self) -> &[StudySummary] {
        &self.studies
    }

    pub fn study(&self, k: usize) -> &StudySummary {
        &self.studies[k]
    }

    pub fn reference(&self) -> &ReferenceSample {
        &self.reference
    }

    pub fn family(&self) -> GlmFamily {
        self.family
    }

    /// Stacked dimension d = Σ d_k.
    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    /// Maximal dimension p.
    pub fn maximal_dim(&self) -> usize {
        self.reference.maximal_dim()
    }

    pub fn n_studies(&self) -> usize {
        self.studies.len()
    }

    /// Sample-size ratio c_k = n_k/n.
    pub fn c_k(&self, k: usize) -> f64 {
        self.studies[k].n as f64 / self.reference.n() as f64
    }

    /// Rows of the stacked vector belonging to study `k`.
    pub fn block_range(&self, k: usize) -> std::ops::Range<usize> {
        let start = self.offsets[k];
        start..start + self.studies[k].map.reduced_dimension()
    }

    fn check_beta(&self, beta: &DVector<f64>) -> Result<()> {
        if beta.len() != self.maximal_dim() {
            return Err(GmetaError::DimensionMismatch(format!(
                "β has length {} but the maximal dimension is {}",
                beta.len(),
                self.maximal_dim()
            )));
        }
        Ok(())
    }

    /// Full-model linear predictor for study `k` on an arbitrary maximal row
    /// (intercept columns outside the study's map contribute zero).
    fn full_eta(&self, k: usize, x_row: &DVector<f64>, beta: &DVector<f64>) -> f64 {
        self.active_columns[k]
            .iter()
            .map(|&c| beta[c] * x_row[c])
            .sum()
    }

    /// Moment contribution `u_k(x; β, θ̂_k)` of study `k` at one maximal row.
    pub fn moment_u_k(&self, k: usize, x_row: &DVector<f64>, beta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_beta(beta)?;
        if x_row.len() != self.maximal_dim() {
            return Err(GmetaError::DimensionMismatch(format!(
                "x has length {} but the maximal dimension is {}",
                x_row.len(),
                self.maximal_dim()
            )));
        }
        let study = &self.studies[k];
        let a_k = study.dispersion_value()?;
        let eta_full = self.full_eta(k, x_row, beta);
        let eta_red: f64 = study
            .map
            .maximal_columns
            .iter()
            .enumerate()
            .map(|(j, &c)| study.theta_hat[j] * x_row[c])
            .sum();
        let denom = self.family.score_denominator(a_k, eta_red);
        let r = (self.family.inv_link(eta_full) - self.family.inv_link(eta_red)) / denom;
        let mut u = DVector::zeros(study.map.reduced_dimension());
        for (j, &c) in study.map.maximal_columns.iter().enumerate() {
            u[j] = r * x_row[c];
        }
        Ok(u)
    }

    /// Scaled residual r_ki for study `k` at reference row `i`.
    fn residual(&self, k: usize, i: usize, beta: &DVector<f64>, a_k: f64) -> f64 {
        let x_a = &self.reduced_designs[k];
        let study = &self.studies[k];
        let eta_full: f64 = self.active_columns[k]
            .iter()
            .map(|&c| beta[c] * self.reference.design[(i, c)])
            .sum();
        let eta_red: f64 = (0..x_a.ncols()).map(|j| study.theta_hat[j] * x_a[(i, j)]).sum();
        let denom = self.family.score_denominator(a_k, eta_red);
        (self.family.inv_link(eta_full) - self.family.inv_link(eta_red)) / denom
    }

    /// Stacked moment vector `U_n(β, θ̂)`: block `k` is the reference-sample
    /// average of `u_k`.
    pub fn stacked_moment(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_beta(beta)?;
        let n = self.reference.n();
        let mut u = DVector::zeros(self.total_dim);
        for k in 0..self.studies.len() {
            let a_k = self.studies[k].dispersion_value()?;
            let x_a = &self.reduced_designs[k];
            let off = self.offsets[k];
            for i in 0..n {
                let r = self.residual(k, i, beta, a_k);
                for j in 0..x_a.ncols() {
                    u[off + j] += r * x_a[(i, j)];
                }
            }
        }
        u /= n as f64;
        Ok(u)
    }

    /// Analytic Jacobian `∂U_n/∂β` (d × p). Block `k` is
    /// `(1/n) Σᵢ w_ki x_{A_k,i} x_iᵀ` with
    /// `w_ki = {g′(g⁻¹(x_iᵀβ))·g′(g⁻¹(x_{A_k,i}ᵀθ̂_k))·a(φ̂_k)·b″(ψ̂_ki)}⁻¹`,
    /// intercept columns outside the study map masked to zero.
    pub fn jacobian_beta(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_beta(beta)?;
        let n = self.reference.n();
        let p = self.maximal_dim();
        let mut g = DMatrix::zeros(self.total_dim, p);
        for k in 0..self.studies.len() {
            let study = &self.studies[k];
            let a_k = study.dispersion_value()?;
            let x_a = &self.reduced_designs[k];
            let off = self.offsets[k];
            for i in 0..n {
                let eta_full: f64 = self.active_columns[k]
                    .iter()
                    .map(|&c| beta[c] * self.reference.design[(i, c)])
                    .sum();
                let eta_red: f64 = (0..x_a.ncols()).map(|j| study.theta_hat[j] * x_a[(i, j)]).sum();
                let denom = self.family.score_denominator(a_k, eta_red);
                let w = self.family.mu_eta(eta_full) / denom;
                for j in 0..x_a.ncols() {
                    let row_val = w * x_a[(i, j)];
                    for &c in &self.active_columns[k] {
                        g[(off + j, c)] += row_val * self.reference.design[(i, c)];
                    }
                }
            }
        }
        g /= n as f64;
        Ok(g)
    }

    /// Estimate of `W_k = E ∂u_k/∂θ_k` (d_k × d_k):
    /// `−(1/n) Σᵢ (dμ/dη)(x_{A_k,i}ᵀθ̂_k)·x_{A_k,i}x_{A_k,i}ᵀ / a(φ̂_k)`.
    /// Symmetric negative semi-definite for the canonical links.
    pub fn jacobian_theta_k(&self, k: usize) -> Result<DMatrix<f64>> {
        let study = &self.studies[k];
        let a_k = study.dispersion_value()?;
        let x_a = &self.reduced_designs[k];
        let n = self.reference.n();
        let d_k = x_a.ncols();
        let mut w = DMatrix::zeros(d_k, d_k);
        for i in 0..n {
            let eta_red: f64 = (0..d_k).map(|j| study.theta_hat[j] * x_a[(i, j)]).sum();
            let denom = self.family.score_denominator(a_k, eta_red);
            let scale = self.family.mu_eta(eta_red) / denom;
            for r in 0..d_k {
                for c in 0..d_k {
                    w[(r, c)] -= scale * x_a[(i, r)] * x_a[(i, c)];
                }
            }
        }
        w /= n as f64;
        Ok(w)
    }

    /// `Δ̂ = (1/n) Σᵢ U(xᵢ)Uᵀ(xᵢ)` at the supplied β and the stored θ̂'s.
    pub fn delta_hat(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_beta(beta)?;
        let n = self.reference.n();
        let d = self.total_dim;
        let k_count = self.studies.len();
        let a: Vec<f64> = (0..k_count)
            .map(|k| self.studies[k].dispersion_value())
            .collect::<Result<_>>()?;
        let mut delta = DMatrix::zeros(d, d);
        let mut u_i = DVector::zeros(d);
        for i in 0..n {
            for k in 0..k_count {
                let r = self.residual(k, i, beta, a[k]);
                let x_a = &self.reduced_designs[k];
                let off = self.offsets[k];
                for j in 0..x_a.ncols() {
                    u_i[off + j] = r * x_a[(i, j)];
                }
            }
            for r in 0..d {
                for c in r..d {
                    delta[(r, c)] += u_i[r] * u_i[c];
                }
            }
        }
        delta /= n as f64;
        for r in 0..d {
            for c in 0..r {
                delta[(r, c)] = delta[(c, r)];
            }
        }
        Ok(delta)
    }

    /// Reference-based estimate of `Λ_k = (1/c_k)·E[s_k s_kᵀ]`, where the
    /// inner expectation over the outcome is taken under the maximal model
    /// at `beta`. For the gaussian family the maximal dispersion is needed.
    pub fn lambda_hat_ref(
        &self,
        k: usize,
        beta: &DVector<f64>,
        maximal_dispersion: Option<f64>,
    ) -> Result<DMatrix<f64>> {
        self.check_beta(beta)?;
        let study = &self.studies[k];
        let a_k = study.dispersion_value()?;
        let x_a = &self.reduced_designs[k];
        let n = self.reference.n();
        let d_k = x_a.ncols();
        let mut lam = DMatrix::zeros(d_k, d_k);
        for i in 0..n {
            let eta_full: f64 = self.active_columns[k]
                .iter()
                .map(|&c| beta[c] * self.reference.design[(i, c)])
                .sum();
            let eta_red: f64 = (0..d_k).map(|j| study.theta_hat[j] * x_a[(i, j)]).sum();
            let bracket = match self.family {
                GlmFamily::BernoulliLogit => {
                    // E(Y−σ_A)² for Y ~ Bernoulli(σ_full):
                    //   σ(−η_A)²σ(η) + σ(η_A)²σ(−η).
                    let p_full = crate::family::sigmoid(eta_full);
                    let p_red = crate::family::sigmoid(eta_red);
                    (1.0 - p_red) * (1.0 - p_red) * p_full + p_red * p_red * (1.0 - p_full)
                }
                GlmFamily::GaussianIdentity => {
                    let sigma2 = maximal_dispersion.ok_or_else(|| {
                        GmetaError::Dispersion(
                            "maximal-model dispersion required for the gaussian reference-based Λ̂".into(),
                        )
                    })?;
                    let diff = eta_full - eta_red;
                    (sigma2 + diff * diff) / (a_k * a_k)
                }
            };
            for r in 0..d_k {
                for c in 0..d_k {
                    lam[(r, c)] += bracket * x_a[(i, r)] * x_a[(i, c)];
                }
            }
        }
        // (1/c_k)·(1/n)Σ = (1/n_k)Σ.
        lam /= study.n as f64;
        Ok(lam)
    }

    /// Study-based estimate `Λ̂_k = n·W_k S_k W_kᵀ` (equivalent to the
    /// asymptotic `(1/c_k)W_kΣ_kW_kᵀ` with `Σ_k = n_k S_k`).
    pub fn lambda_hat_study(&self, k: usize) -> Result<DMatrix<f64>> {
        let study = &self.studies[k];
        let s_k = study
            .covariance
            .as_ref()
            .ok_or(GmetaError::MissingCovariance { study: k })?;
        let w = self.jacobian_theta_k(k)?;
        Ok(self.reference.n() as f64 * &w * s_k * w.transpose())
    }

    /// Contraction `Σ_m weights_m · ∂²U_m/∂β∂βᵀ` of the stacked-moment
    /// second derivatives (p × p). The only β-curvature under the supported
    /// links comes through `(g⁻¹)″` of the full predictor, so block `m` in
    /// study `k` contributes `(1/n)Σᵢ x_{A_k,i,m}·(g⁻¹)″(ηᵢ)/denom·xᵢxᵢᵀ`.
    pub fn moment_hessian_contraction(
        &self,
        beta: &DVector<f64>,
        weights: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        self.check_beta(beta)?;
        if weights.len() != self.total_dim {
            return Err(GmetaError::DimensionMismatch(format!(
                "weights have length {} but the stacked dimension is {}",
                weights.len(),
                self.total_dim
            )));
        }
        let n = self.reference.n();
        let p = self.maximal_dim();
        let mut out = DMatrix::zeros(p, p);
        for k in 0..self.studies.len() {
            let study = &self.studies[k];
            let a_k = study.dispersion_value()?;
            let x_a = &self.reduced_designs[k];
            let off = self.offsets[k];
            let active = &self.active_columns[k];
            for i in 0..n {
                let eta_full: f64 = active
                    .iter()
                    .map(|&c| beta[c] * self.reference.design[(i, c)])
                    .sum();
                let eta_red: f64 = (0..x_a.ncols()).map(|j| study.theta_hat[j] * x_a[(i, j)]).sum();
                let denom = self.family.score_denominator(a_k, eta_red);
                let z: f64 = (0..x_a.ncols()).map(|j| weights[off + j] * x_a[(i, j)]).sum();
                let scale = z * self.family.mu_eta_deriv(eta_full) / denom;
                if scale == 0.0 {
                    continue;
                }
                for &r in active {
                    let xr = scale * self.reference.design[(i, r)];
                    for &c in active {
                        out[(r, c)] += xr * self.reference.design[(i, c)];
                    }
                }
            }
        }
        out /= n as f64;
        Ok(out)
    }

    /// Full and reduced linear predictors `(x_iᵀβ, x_{A_k,i}ᵀθ̂_k)` for
    /// study `k` over the reference rows (full predictor masked to the
    /// study's own intercept column).
    pub fn linear_predictors(&self, k: usize, beta: &DVector<f64>) -> Result<Vec<(f64, f64)>> {
        self.check_beta(beta)?;
        let study = &self.studies[k];
        let x_a = &self.reduced_designs[k];
        let mut out = Vec::with_capacity(self.reference.n());
        for i in 0..self.reference.n() {
            let eta_full: f64 = self.active_columns[k]
                .iter()
                .map(|&c| beta[c] * self.reference.design[(i, c)])
                .sum();
            let eta_red: f64 = (0..x_a.ncols()).map(|j| study.theta_hat[j] * x_a[(i, j)]).sum();
            out.push((eta_full, eta_red));
        }
        Ok(out)
    }
}
