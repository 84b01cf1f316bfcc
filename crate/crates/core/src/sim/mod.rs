//! Monte Carlo harness for the three-covariate logistic simulation designs:
//! correlated-normal covariate generation, per-study reduced-model fitting,
//! the full estimation pipeline per replicate, and aggregation into
//! bias/SE/coverage reports.
//!
//! Determinism contract: replicate `r` draws study data from stream `2r`
//! and the reference sample from stream `2r+1` of a counter-based
//! generator keyed by the scenario seed. Replicates are embarrassingly
//! parallel; results are collected in replicate order and folded
//! sequentially, so reports are bit-identical across thread counts. The
//! reference stream restarts at the same origin for every reference size,
//! which makes sweeps over the reference size use common random numbers.

mod presets;
mod report;

pub use presets::{Preset, PresetOutput, run_preset, table1_scenario, table2_scenarios, table3_scenario};
pub use report::{MonteCarloReport, VariantDraw, VariantStats};

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GmetaError, Result};
use crate::estimator::{
    asymptotic_covariance, fit_gmeta, GmetaConfig, GmetaVariant, LambdaSource,
};
use crate::family::{sigmoid, GlmFamily};
use crate::glm::{fit_mle, GlmFit, GlmFitConfig};
use crate::linalg;
use crate::meta::fixed_effect_meta;
use crate::moments::{CovariateMap, MomentSystem, ReferenceSample, StudySummary};

/// Covariate labels for the simulated trivariate designs.
pub const COVARIATE_NAMES: [&str; 3] = ["x1", "x2", "x3"];

/// Whether the maximal model carries one shared intercept or one per study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterceptMode {
    Shared,
    StudySpecific,
}

/// One simulated study: its population correlation, size, and which of the
/// three covariates its reduced model includes (1-based).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyArm {
    pub size: usize,
    pub rho: [f64; 3],
    pub covariates: Vec<usize>,
    /// Also fit the maximal model on this study's data; the maximal fit
    /// then enters the combined system in place of the reduced one.
    #[serde(default)]
    pub fits_maximal: bool,
}

/// Data-generating configuration for one Monte Carlo run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimScenario {
    #[serde(default = "default_label")]
    pub label: String,
    /// True intercept(s): one value (shared) or one per study.
    pub intercepts: Vec<f64>,
    /// True slopes (β₁, β₂, β₃).
    pub slopes: [f64; 3],
    pub studies: Vec<StudyArm>,
    pub reference_rho: [f64; 3],
    pub reference_size: usize,
    pub replications: usize,
    pub seed: u64,
    pub intercept_mode: InterceptMode,
    /// Additionally combine the reduced fits under the common reduced
    /// maximal model (reported as `gmeta-reduced`). Requires identical
    /// reduced covariate sets across studies.
    #[serde(default)]
    pub include_reduced_gmeta: bool,
}

fn default_label() -> String {
    "scenario".to_string()
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        if self.studies.is_empty() {
            return Err(GmetaError::InvalidInput("scenario has no studies".into()));
        }
        if self.replications == 0 {
            return Err(GmetaError::InvalidInput("replications must be at least 1".into()));
        }
        if self.reference_size == 0 {
            return Err(GmetaError::InvalidInput("reference size must be at least 1".into()));
        }
        let expected_intercepts = match self.intercept_mode {
            InterceptMode::Shared => 1,
            InterceptMode::StudySpecific => self.studies.len(),
        };
        if self.intercepts.len() != expected_intercepts {
            return Err(GmetaError::InvalidInput(format!(
                "expected {expected_intercepts} intercept value(s), got {}",
                self.intercepts.len()
            )));
        }
        for (k, arm) in self.studies.iter().enumerate() {
            if arm.size == 0 {
                return Err(GmetaError::InvalidInput(format!("study {k} has size 0")));
            }
            if arm.covariates.is_empty() {
                return Err(GmetaError::InvalidInput(format!("study {k} has no covariates")));
            }
            let mut seen = arm.covariates.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != arm.covariates.len() || arm.covariates.iter().any(|&c| c == 0 || c > 3) {
                return Err(GmetaError::InvalidInput(format!(
                    "study {k}: covariates must be distinct values in 1..=3"
                )));
            }
            correlation_matrix(arm.rho)?;
        }
        correlation_matrix(self.reference_rho)?;
        Ok(())
    }

    /// Number of maximal-model coefficients.
    pub fn maximal_dim(&self) -> usize {
        self.intercepts.len() + 3
    }

    /// Maximal coefficient names: intercept column(s) then x1..x3.
    pub fn coefficient_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.maximal_dim());
        match self.intercept_mode {
            InterceptMode::Shared => names.push("_intercept".to_string()),
            InterceptMode::StudySpecific => {
                for k in 0..self.studies.len() {
                    names.push(format!("_intercept_study{}", k + 1));
                }
            }
        }
        names.extend(COVARIATE_NAMES.iter().map(|s| s.to_string()));
        names
    }

    /// True maximal coefficient vector, aligned to `coefficient_names`.
    pub fn beta_true(&self) -> Vec<f64> {
        let mut beta = self.intercepts.clone();
        beta.extend_from_slice(&self.slopes);
        beta
    }

    /// Index of the first covariate column in the maximal design.
    fn covariate_offset(&self) -> usize {
        self.intercepts.len()
    }

    /// Maximal columns of study `k`'s reduced model.
    fn reduced_map(&self, k: usize) -> Vec<usize> {
        let int_col = match self.intercept_mode {
            InterceptMode::Shared => 0,
            InterceptMode::StudySpecific => k,
        };
        let off = self.covariate_offset();
        let mut cols = vec![int_col];
        cols.extend(self.studies[k].covariates.iter().map(|&c| off + c - 1));
        cols
    }

    /// Maximal columns of study `k`'s maximal-model fit.
    fn maximal_map(&self, k: usize) -> Vec<usize> {
        let int_col = match self.intercept_mode {
            InterceptMode::Shared => 0,
            InterceptMode::StudySpecific => k,
        };
        let off = self.covariate_offset();
        let mut cols = vec![int_col];
        cols.extend((0..3).map(|j| off + j));
        cols
    }
}

fn correlation_matrix(rho: [f64; 3]) -> Result<DMatrix<f64>> {
    let m = DMatrix::from_row_slice(
        3,
        3,
        &[1.0, rho[0], rho[1], rho[0], 1.0, rho[2], rho[1], rho[2], 1.0],
    );
    // Positive definiteness is what the square root needs anyway.
    linalg::sym_sqrt(&m).map_err(|e| {
        GmetaError::Correlation(format!("ρ = ({}, {}, {}): {e}", rho[0], rho[1], rho[2]))
    })?;
    Ok(m)
}

/// Draw `n_rows` i.i.d. trivariate normal rows with unit variances and the
/// given correlations, via the symmetric square root of the correlation
/// matrix applied to standard normals. Row-major draw order.
pub fn gen_covariates<R: Rng>(n_rows: usize, rho: [f64; 3], rng: &mut R) -> Result<DMatrix<f64>> {
    let corr = correlation_matrix(rho)?;
    let half = linalg::sym_sqrt(&corr)?;
    let mut out = DMatrix::zeros(n_rows, 3);
    for i in 0..n_rows {
        let z = DVector::from_vec(vec![
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        ]);
        let x = &half * z;
        for j in 0..3 {
            out[(i, j)] = x[j];
        }
    }
    Ok(out)
}

/// Independent Bernoulli outcomes with logistic success probabilities
/// `σ(xᵢᵀβ)`.
pub fn gen_outcomes<R: Rng>(design: &DMatrix<f64>, beta_true: &DVector<f64>, rng: &mut R) -> DVector<f64> {
    let mut y = DVector::zeros(design.nrows());
    for i in 0..design.nrows() {
        let eta: f64 = (0..design.ncols()).map(|j| beta_true[j] * design[(i, j)]).sum();
        y[i] = if rng.random::<f64>() < sigmoid(eta) { 1.0 } else { 0.0 };
    }
    y
}

/// Fitted models from one study's simulated data.
struct StudyFits {
    reduced: GlmFit,
    maximal: Option<GlmFit>,
}

/// Generate data for every study (in order) and fit the per-study models.
fn generate_study_fits(scenario: &SimScenario, rng: &mut ChaCha8Rng) -> Result<Vec<StudyFits>> {
    let glm_config = GlmFitConfig::default();
    let mut fits = Vec::with_capacity(scenario.studies.len());
    for (k, arm) in scenario.studies.iter().enumerate() {
        let x = gen_covariates(arm.size, arm.rho, rng)?;
        // Per-study generating design: [1, x1, x2, x3] with the study's own
        // true intercept.
        let mut design = DMatrix::zeros(arm.size, 4);
        for i in 0..arm.size {
            design[(i, 0)] = 1.0;
            for j in 0..3 {
                design[(i, j + 1)] = x[(i, j)];
            }
        }
        let intercept = match scenario.intercept_mode {
            InterceptMode::Shared => scenario.intercepts[0],
            InterceptMode::StudySpecific => scenario.intercepts[k],
        };
        let mut beta_gen = vec![intercept];
        beta_gen.extend_from_slice(&scenario.slopes);
        let y = gen_outcomes(&design, &DVector::from_vec(beta_gen), rng);

        let mut reduced_design = DMatrix::zeros(arm.size, 1 + arm.covariates.len());
        for i in 0..arm.size {
            reduced_design[(i, 0)] = 1.0;
            for (j, &c) in arm.covariates.iter().enumerate() {
                reduced_design[(i, j + 1)] = x[(i, c - 1)];
            }
        }
        let reduced = fit_mle(&reduced_design, &y, GlmFamily::BernoulliLogit, &glm_config)?;
        let maximal = if arm.fits_maximal {
            Some(fit_mle(&design, &y, GlmFamily::BernoulliLogit, &glm_config)?)
        } else {
            None
        };
        fits.push(StudyFits { reduced, maximal });
    }
    Ok(fits)
}

/// Draw the maximal reference design (intercept columns then covariates).
fn generate_reference(scenario: &SimScenario, size: usize, rng: &mut ChaCha8Rng) -> Result<ReferenceSample> {
    let x = gen_covariates(size, scenario.reference_rho, rng)?;
    let names = scenario.coefficient_names();
    let n_int = scenario.covariate_offset();
    let mut design = DMatrix::zeros(size, n_int + 3);
    for i in 0..size {
        for j in 0..n_int {
            design[(i, j)] = 1.0;
        }
        for j in 0..3 {
            design[(i, n_int + j)] = x[(i, j)];
        }
    }
    ReferenceSample::new(design, names)
}

fn study_summary(
    scenario: &SimScenario,
    k: usize,
    fit: &GlmFit,
    cols: Vec<usize>,
) -> Result<StudySummary> {
    Ok(StudySummary {
        label: format!("study{}", k + 1),
        theta_hat: fit.coefficients.clone(),
        covariance: Some(fit.sandwich_covariance.clone()),
        n: scenario.studies[k].size,
        family: GlmFamily::BernoulliLogit,
        map: CovariateMap::new(k, cols)?,
        dispersion: None,
    })
}

/// Record a GMeta fit with both estimated-SE sources.
fn record_gmeta(
    system: &MomentSystem,
    variant: GmetaVariant,
    config: &GmetaConfig,
    coef_cols: &[usize],
    p_total: usize,
) -> Result<VariantDraw> {
    let fit = fit_gmeta(system, variant, config)?;
    let cov_ref = asymptotic_covariance(
        system,
        &fit.beta_hat,
        Some(&fit.weighting),
        LambdaSource::Reference,
        fit.dispersion,
    )?;
    let cov_study = asymptotic_covariance(
        system,
        &fit.beta_hat,
        Some(&fit.weighting),
        LambdaSource::StudyWithFallback,
        fit.dispersion,
    )?;
    let mut draw = VariantDraw::new(variant.name(), p_total);
    for (j, &col) in coef_cols.iter().enumerate() {
        draw.estimates[col] = Some(fit.beta_hat[j]);
        draw.se1[col] = Some(cov_ref[(j, j)].max(0.0).sqrt());
        draw.se2[col] = Some(cov_study[(j, j)].max(0.0).sqrt());
    }
    Ok(draw)
}

/// Run the estimation pipeline for one replicate given the study fits and
/// a reference sample.
fn assemble_and_estimate(
    scenario: &SimScenario,
    fits: &[StudyFits],
    reference: ReferenceSample,
) -> Result<Vec<VariantDraw>> {
    let p = scenario.maximal_dim();
    let config = GmetaConfig::default();
    let mut draws = Vec::new();

    // Main system: maximal fit where available, reduced otherwise.
    let mut studies = Vec::with_capacity(fits.len());
    for (k, f) in fits.iter().enumerate() {
        let (fit, cols) = match &f.maximal {
            Some(m) => (m, scenario.maximal_map(k)),
            None => (&f.reduced, scenario.reduced_map(k)),
        };
        studies.push(study_summary(scenario, k, fit, cols)?);
    }
    let system = MomentSystem::new(studies, reference.clone(), GlmFamily::BernoulliLogit)?;
    let identity_cols: Vec<usize> = (0..p).collect();
    for variant in [GmetaVariant::Gmeta0, GmetaVariant::Gmeta1, GmetaVariant::Gmeta2] {
        draws.push(record_gmeta(&system, variant, &config, &identity_cols, p)?);
    }

    // Per-study comparator columns: the study fits themselves.
    for (k, f) in fits.iter().enumerate() {
        let mut entries = vec![(format!("study{}-reduced", k + 1), &f.reduced, scenario.reduced_map(k))];
        if let Some(m) = &f.maximal {
            entries.push((format!("study{}-maximal", k + 1), m, scenario.maximal_map(k)));
        }
        for (name, fit, cols) in entries {
            let mut draw = VariantDraw::new(&name, p);
            for (j, &col) in cols.iter().enumerate() {
                draw.estimates[col] = Some(fit.coefficients[j]);
                draw.se1[col] = Some(fit.sandwich_covariance[(j, j)].max(0.0).sqrt());
            }
            draws.push(draw);
        }
    }

    // Fixed-effect meta-analysis of the reduced fits, when they share a
    // covariate set: over full θ vectors in shared-intercept mode, over the
    // common slopes when intercepts are study-specific.
    let common = scenario
        .studies
        .iter()
        .all(|a| a.covariates == scenario.studies[0].covariates);
    if common && fits.len() > 1 {
        let slopes_only = scenario.intercept_mode == InterceptMode::StudySpecific;
        let summaries: Vec<(DVector<f64>, DMatrix<f64>)> = fits
            .iter()
            .map(|f| {
                let fit = &f.reduced;
                if slopes_only {
                    let d = fit.coefficients.len();
                    let theta = DVector::from_fn(d - 1, |i, _| fit.coefficients[i + 1]);
                    let cov = DMatrix::from_fn(d - 1, d - 1, |i, j| fit.sandwich_covariance[(i + 1, j + 1)]);
                    (theta, cov)
                } else {
                    (fit.coefficients.clone(), fit.sandwich_covariance.clone())
                }
            })
            .collect();
        let meta = fixed_effect_meta(&summaries)?;
        let cols: Vec<usize> = if slopes_only {
            scenario.studies[0]
                .covariates
                .iter()
                .map(|&c| scenario.covariate_offset() + c - 1)
                .collect()
        } else {
            scenario.reduced_map(0)
        };
        let mut draw = VariantDraw::new("meta", p);
        for (j, &col) in cols.iter().enumerate() {
            draw.estimates[col] = Some(meta.estimate[j]);
            draw.se1[col] = Some(meta.covariance[(j, j)].max(0.0).sqrt());
        }
        draws.push(draw);
    }

    // GMeta over the reduced fits under the common reduced maximal model.
    if scenario.include_reduced_gmeta {
        if !common {
            return Err(GmetaError::InvalidInput(
                "include_reduced_gmeta requires identical reduced covariate sets".into(),
            ));
        }
        let offset = scenario.covariate_offset();
        // Columns of the big maximal design retained in the reduced world.
        let kept: Vec<usize> = (0..offset)
            .chain(scenario.studies[0].covariates.iter().map(|&c| offset + c - 1))
            .collect();
        let names: Vec<String> = kept
            .iter()
            .map(|&c| scenario.coefficient_names()[c].clone())
            .collect();
        let mut design = DMatrix::zeros(reference.n(), kept.len());
        for i in 0..reference.n() {
            for (j, &c) in kept.iter().enumerate() {
                design[(i, j)] = reference.design()[(i, c)];
            }
        }
        let small_reference = ReferenceSample::new(design, names)?;
        let mut studies = Vec::with_capacity(fits.len());
        for (k, f) in fits.iter().enumerate() {
            let int_col = match scenario.intercept_mode {
                InterceptMode::Shared => 0,
                InterceptMode::StudySpecific => k,
            };
            let mut cols = vec![int_col];
            cols.extend((0..scenario.studies[k].covariates.len()).map(|j| offset + j));
            studies.push(study_summary(scenario, k, &f.reduced, cols)?);
        }
        let small_system = MomentSystem::new(studies, small_reference, GlmFamily::BernoulliLogit)?;
        let mut draw = record_gmeta(&small_system, GmetaVariant::Gmeta2, &config, &kept, p)?;
        draw.variant = "gmeta-reduced".to_string();
        draws.push(draw);
    }

    Ok(draws)
}

fn study_stream(replicate: u64) -> u64 {
    2 * replicate
}

fn reference_stream(replicate: u64) -> u64 {
    2 * replicate + 1
}

fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn run_replicate(scenario: &SimScenario, replicate: u64) -> Result<Vec<VariantDraw>> {
    let mut study_rng = seeded_rng(scenario.seed, study_stream(replicate));
    let fits = generate_study_fits(scenario, &mut study_rng)?;
    let mut ref_rng = seeded_rng(scenario.seed, reference_stream(replicate));
    let reference = generate_reference(scenario, scenario.reference_size, &mut ref_rng)?;
    assemble_and_estimate(scenario, &fits, reference)
}

#[cfg(feature = "parallel")]
fn map_replicates<T, F>(replications: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..replications as u64).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_replicates<T, F>(replications: usize, f: F) -> Vec<T>
where
    F: Fn(u64) -> T,
{
    (0..replications as u64).map(f).collect()
}

fn aggregate(scenario: &SimScenario, results: Vec<Result<Vec<VariantDraw>>>) -> MonteCarloReport {
    let mut draws = Vec::with_capacity(results.len());
    let mut failures = 0;
    for r in results {
        match r {
            Ok(d) => draws.push(d),
            Err(_) => failures += 1,
        }
    }
    MonteCarloReport::from_draws(
        &scenario.label,
        scenario.seed,
        scenario.replications,
        failures,
        &scenario.coefficient_names(),
        &scenario.beta_true(),
        &draws,
    )
}

/// Run the full Monte Carlo study (replicates in parallel when the
/// `parallel` feature is enabled).
pub fn run_scenario(scenario: &SimScenario) -> Result<MonteCarloReport> {
    scenario.validate()?;
    let results = map_replicates(scenario.replications, |r| run_replicate(scenario, r));
    Ok(aggregate(scenario, results))
}

/// Single-threaded variant of [`run_scenario`]; produces identical output.
pub fn run_scenario_sequential(scenario: &SimScenario) -> Result<MonteCarloReport> {
    scenario.validate()?;
    let results: Vec<_> = (0..scenario.replications as u64)
        .map(|r| run_replicate(scenario, r))
        .collect();
    Ok(aggregate(scenario, results))
}

/// Per-reference-size reports from a sweep holding the study data fixed
/// within each replicate (common random numbers across sizes).
#[derive(Debug, Clone)]
pub struct SweepReport {
    pub sizes: Vec<usize>,
    pub reports: Vec<MonteCarloReport>,
}

impl SweepReport {
    pub fn rmse(&self, size: usize, variant: &str, coefficient: &str) -> Option<f64> {
        let idx = self.sizes.iter().position(|&s| s == size)?;
        self.reports[idx].get(variant, coefficient).map(|r| r.rmse)
    }

    pub fn text_table(&self) -> String {
        self.reports.iter().map(|r| r.text_table()).collect::<Vec<_>>().join("\n")
    }

    pub fn to_csv(&self) -> String {
        let rows: String = self.reports.iter().map(|r| r.csv_rows()).collect();
        format!("{}\n{}", MonteCarloReport::CSV_HEADER, rows)
    }
}

/// Re-run the scenario at each reference size. Study data are shared
/// across sizes within a replicate, and the reference stream restarts per
/// size, so a single-size sweep reproduces [`run_scenario`] exactly.
pub fn reference_size_sweep(base: &SimScenario, sizes: &[usize]) -> Result<SweepReport> {
    base.validate()?;
    if sizes.is_empty() {
        return Err(GmetaError::InvalidInput("no reference sizes supplied".into()));
    }
    let scenarios: Vec<SimScenario> = sizes
        .iter()
        .map(|&n| {
            let mut sc = base.clone();
            sc.reference_size = n;
            sc.label = format!("{}-n{}", base.label, n);
            sc
        })
        .collect();

    let per_replicate: Vec<Vec<Result<Vec<VariantDraw>>>> = map_replicates(base.replications, |r| {
        let mut study_rng = seeded_rng(base.seed, study_stream(r));
        let fits = match generate_study_fits(base, &mut study_rng) {
            Ok(f) => f,
            Err(e) => return sizes.iter().map(|_| Err(e.clone())).collect(),
        };
        sizes
            .iter()
            .map(|&n| {
                let mut ref_rng = seeded_rng(base.seed, reference_stream(r));
                let reference = generate_reference(base, n, &mut ref_rng)?;
                assemble_and_estimate(base, &fits, reference)
            })
            .collect()
    });

    let mut reports = Vec::with_capacity(sizes.len());
    for (s_idx, sc) in scenarios.iter().enumerate() {
        let results: Vec<Result<Vec<VariantDraw>>> = per_replicate
            .iter()
            .map(|by_size| by_size[s_idx].clone())
            .collect();
        reports.push(aggregate(sc, results));
    }
    Ok(SweepReport {
        sizes: sizes.to_vec(),
        reports,
    })
}
