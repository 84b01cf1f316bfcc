//! Named simulation presets for the three study designs and the
//! reference-size sweep.

use crate::error::{GmetaError, Result};
use crate::sim::{
    reference_size_sweep, run_scenario, InterceptMode, MonteCarloReport, SimScenario, StudyArm,
};

/// Baseline correlations: ρ_low = (0.2, 0.4, 0.0), ρ_base = (0.3, 0.6, 0.1),
/// ρ_high = (0.4, 0.8, 0.2).
pub const RHO_LOW: [f64; 3] = [0.2, 0.4, 0.0];
pub const RHO_BASE: [f64; 3] = [0.3, 0.6, 0.1];
pub const RHO_HIGH: [f64; 3] = [0.4, 0.8, 0.2];

/// log(1.3), the common true slope.
pub fn true_slope() -> f64 {
    1.3_f64.ln()
}

fn arm(size: usize, rho: [f64; 3], covariates: Vec<usize>) -> StudyArm {
    StudyArm {
        size,
        rho,
        covariates,
        fits_maximal: false,
    }
}

/// Three studies of sizes 300/500/1000 fitting the two-covariate reduced
/// models {x1,x2}, {x1,x3}, {x2,x3}, a size-50 reference, and a common
/// baseline covariate correlation.
pub fn table1_scenario(seed: u64, replications: usize) -> SimScenario {
    let s = true_slope();
    SimScenario {
        label: "table1".into(),
        intercepts: vec![0.0],
        slopes: [s, s, s],
        studies: vec![
            arm(300, RHO_BASE, vec![1, 2]),
            arm(500, RHO_BASE, vec![1, 3]),
            arm(1000, RHO_BASE, vec![2, 3]),
        ],
        reference_rho: RHO_BASE,
        reference_size: 50,
        replications,
        seed,
        intercept_mode: InterceptMode::Shared,
        include_reduced_gmeta: false,
    }
}

/// The six covariance-heterogeneity rows: study correlations
/// (Σ₁, Σ₂, Σ₃) ∈ {(o,o,o), (h,o,l)} crossed with reference correlation
/// Σ_r ∈ {o, h, l}.
pub fn table2_scenarios(seed: u64, replications: usize) -> Vec<(String, SimScenario)> {
    let combos: [(&str, [[f64; 3]; 3], [f64; 3]); 6] = [
        ("ooo-o", [RHO_BASE, RHO_BASE, RHO_BASE], RHO_BASE),
        ("ooo-h", [RHO_BASE, RHO_BASE, RHO_BASE], RHO_HIGH),
        ("ooo-l", [RHO_BASE, RHO_BASE, RHO_BASE], RHO_LOW),
        ("hol-o", [RHO_HIGH, RHO_BASE, RHO_LOW], RHO_BASE),
        ("hol-h", [RHO_HIGH, RHO_BASE, RHO_LOW], RHO_HIGH),
        ("hol-l", [RHO_HIGH, RHO_BASE, RHO_LOW], RHO_LOW),
    ];
    combos
        .iter()
        .map(|(name, rhos, rho_ref)| {
            let mut sc = table1_scenario(seed, replications);
            sc.label = format!("table2-{name}");
            for (k, rho) in rhos.iter().enumerate() {
                sc.studies[k].rho = *rho;
            }
            sc.reference_rho = *rho_ref;
            (name.to_string(), sc)
        })
        .collect()
}

/// Two-study design with study-specific intercepts: study 1 (n = 500) fits
/// both the maximal and the {x1,x2} reduced model, study 2 (n = 5000) fits
/// only the reduced model; reference size 300.
pub fn table3_scenario(seed: u64, replications: usize) -> SimScenario {
    let s = true_slope();
    SimScenario {
        label: "table3".into(),
        intercepts: vec![0.0, 0.0],
        slopes: [s, s, s],
        studies: vec![
            StudyArm {
                size: 500,
                rho: RHO_BASE,
                covariates: vec![1, 2],
                fits_maximal: true,
            },
            StudyArm {
                size: 5000,
                rho: RHO_BASE,
                covariates: vec![1, 2],
                fits_maximal: false,
            },
        ],
        reference_rho: RHO_BASE,
        reference_size: 300,
        replications,
        seed,
        intercept_mode: InterceptMode::StudySpecific,
        include_reduced_gmeta: true,
    }
}

/// Reference sizes swept in the plateau study.
pub const FIGURE1_SIZES: [usize; 7] = [10, 30, 50, 70, 100, 200, 1000];

/// Named presets runnable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Table1,
    Table2,
    Table3,
    Figure1,
}

impl Preset {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "table1" => Ok(Self::Table1),
            "table2" => Ok(Self::Table2),
            "table3" => Ok(Self::Table3),
            "figure1" => Ok(Self::Figure1),
            other => Err(GmetaError::InvalidInput(format!(
                "unknown preset '{other}' (expected table1, table2, table3 or figure1)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Table1 => "table1",
            Self::Table2 => "table2",
            Self::Table3 => "table3",
            Self::Figure1 => "figure1",
        }
    }

    pub fn default_seed(&self) -> u64 {
        match self {
            Self::Table1 => 1001,
            Self::Table2 => 1002,
            Self::Table3 => 1003,
            Self::Figure1 => 1004,
        }
    }
}

/// Rendered preset results.
#[derive(Debug, Clone)]
pub struct PresetOutput {
    pub text: String,
    pub csv: String,
}

fn combine(reports: &[MonteCarloReport]) -> PresetOutput {
    let text = reports.iter().map(|r| r.text_table()).collect::<Vec<_>>().join("\n");
    let rows: String = reports.iter().map(|r| r.csv_rows()).collect();
    PresetOutput {
        text,
        csv: format!("{}\n{}", MonteCarloReport::CSV_HEADER, rows),
    }
}

/// Run a named preset with optional seed/replication overrides
/// (defaults: the preset seed and 500 replications).
pub fn run_preset(preset: Preset, seed: Option<u64>, replications: Option<usize>) -> Result<PresetOutput> {
    let seed = seed.unwrap_or_else(|| preset.default_seed());
    let replications = replications.unwrap_or(500);
    match preset {
        Preset::Table1 => {
            let report = run_scenario(&table1_scenario(seed, replications))?;
            Ok(combine(&[report]))
        }
        Preset::Table2 => {
            let mut reports = Vec::new();
            for (_, sc) in table2_scenarios(seed, replications) {
                reports.push(run_scenario(&sc)?);
            }
            Ok(combine(&reports))
        }
        Preset::Table3 => {
            let report = run_scenario(&table3_scenario(seed, replications))?;
            Ok(combine(&[report]))
        }
        Preset::Figure1 => {
            let sweep = reference_size_sweep(&table1_scenario(seed, replications), &FIGURE1_SIZES)?;
            Ok(PresetOutput {
                text: sweep.text_table(),
                csv: sweep.to_csv(),
            })
        }
    }
}
