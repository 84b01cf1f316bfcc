//! Aggregated Monte Carlo results: per-variant, per-coefficient bias,
//! empirical and estimated standard errors, RMSE, coverage and interval
//! length, rendered as aligned text and as delimited machine output.

use std::fmt::Write as _;

/// One estimator's recorded draw in one replicate, aligned to the maximal
/// coefficient order. `se1`/`se2` are the two estimated-SE sources (for the
/// GMeta variants: reference-based and study-based Λ̂; a single model-based
/// SE goes in `se1` for the comparators).
#[derive(Debug, Clone)]
pub struct VariantDraw {
    pub variant: String,
    pub estimates: Vec<Option<f64>>,
    pub se1: Vec<Option<f64>>,
    pub se2: Vec<Option<f64>>,
}

impl VariantDraw {
    pub fn new(variant: &str, p: usize) -> Self {
        Self {
            variant: variant.to_string(),
            estimates: vec![None; p],
            se1: vec![None; p],
            se2: vec![None; p],
        }
    }
}

/// Monte Carlo summary for one (variant, coefficient) pair.
#[derive(Debug, Clone)]
pub struct VariantStats {
    pub variant: String,
    pub coefficient: String,
    pub truth: f64,
    pub n_used: usize,
    pub mean_estimate: f64,
    pub bias: f64,
    /// Empirical standard deviation of the estimates.
    pub se_empirical: f64,
    /// Average estimated SE by source.
    pub ese1: Option<f64>,
    pub ese2: Option<f64>,
    /// √(bias² + SE²).
    pub rmse: f64,
    /// Coverage of ±1.96·SE intervals by source.
    pub coverage1: Option<f64>,
    pub coverage2: Option<f64>,
    /// Average interval length by source.
    pub avg_len1: Option<f64>,
    pub avg_len2: Option<f64>,
}

/// Full report over all variants and coefficients.
#[derive(Debug, Clone)]
pub struct MonteCarloReport {
    pub label: String,
    pub seed: u64,
    pub replications: usize,
    /// Replicates dropped because some pipeline stage errored.
    pub failures: usize,
    pub coefficient_names: Vec<String>,
    pub rows: Vec<VariantStats>,
}

impl MonteCarloReport {
    pub fn get(&self, variant: &str, coefficient: &str) -> Option<&VariantStats> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.coefficient == coefficient)
    }

    /// Aggregate raw per-replicate draws. Draw vectors must already be in
    /// replicate order; aggregation is a fixed-order fold so the result is
    /// identical however the replicates were computed.
    pub fn from_draws(
        label: &str,
        seed: u64,
        replications: usize,
        failures: usize,
        coefficient_names: &[String],
        truths: &[f64],
        draws: &[Vec<VariantDraw>],
    ) -> Self {
        let p = coefficient_names.len();
        // Stable variant order: first appearance across replicates.
        let mut variants: Vec<String> = Vec::new();
        for rep in draws {
            for d in rep {
                if !variants.iter().any(|v| v == &d.variant) {
                    variants.push(d.variant.clone());
                }
            }
        }
        let mut rows = Vec::new();
        for variant in &variants {
            for j in 0..p {
                let mut ests = Vec::new();
                let mut se1s = Vec::new();
                let mut se2s = Vec::new();
                for rep in draws {
                    if let Some(d) = rep.iter().find(|d| &d.variant == variant) {
                        if let Some(e) = d.estimates[j] {
                            ests.push(e);
                            se1s.push(d.se1[j]);
                            se2s.push(d.se2[j]);
                        }
                    }
                }
                if ests.is_empty() {
                    continue;
                }
                let n_used = ests.len();
                let mean = ests.iter().sum::<f64>() / n_used as f64;
                let truth = truths[j];
                let bias = mean - truth;
                let se = if n_used > 1 {
                    (ests.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n_used - 1) as f64).sqrt()
                } else {
                    0.0
                };
                let rmse = (bias * bias + se * se).sqrt();
                let summarize = |ses: &[Option<f64>]| -> (Option<f64>, Option<f64>, Option<f64>) {
                    let vals: Vec<(f64, f64)> = ses
                        .iter()
                        .zip(ests.iter())
                        .filter_map(|(s, e)| s.map(|s| (s, *e)))
                        .collect();
                    if vals.is_empty() {
                        return (None, None, None);
                    }
                    let ese = vals.iter().map(|(s, _)| s).sum::<f64>() / vals.len() as f64;
                    let covered = vals
                        .iter()
                        .filter(|(s, e)| (e - truth).abs() <= 1.96 * s)
                        .count() as f64
                        / vals.len() as f64;
                    let avg_len = vals.iter().map(|(s, _)| 2.0 * 1.96 * s).sum::<f64>() / vals.len() as f64;
                    (Some(ese), Some(covered), Some(avg_len))
                };
                let (ese1, coverage1, avg_len1) = summarize(&se1s);
                let (ese2, coverage2, avg_len2) = summarize(&se2s);
                rows.push(VariantStats {
                    variant: variant.clone(),
                    coefficient: coefficient_names[j].clone(),
                    truth,
                    n_used,
                    mean_estimate: mean,
                    bias,
                    se_empirical: se,
                    ese1,
                    ese2,
                    rmse,
                    coverage1,
                    coverage2,
                    avg_len1,
                    avg_len2,
                });
            }
        }
        Self {
            label: label.to_string(),
            seed,
            replications,
            failures,
            coefficient_names: coefficient_names.to_vec(),
            rows,
        }
    }

    /// Aligned text table, 6 significant digits.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# {} (replications = {}, failures = {}, seed = {})",
            self.label, self.replications, self.failures, self.seed
        );
        let header = [
            "variant", "coef", "mean", "bias", "SE", "ESE1", "ESE2", "RMSE", "CR1", "CR2", "AL1", "AL2",
        ];
        let mut table: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            table.push(vec![
                r.variant.clone(),
                r.coefficient.clone(),
                sig6(r.mean_estimate),
                sig6(r.bias),
                sig6(r.se_empirical),
                r.ese1.map(sig6).unwrap_or_default(),
                r.ese2.map(sig6).unwrap_or_default(),
                sig6(r.rmse),
                r.coverage1.map(sig6).unwrap_or_default(),
                r.coverage2.map(sig6).unwrap_or_default(),
                r.avg_len1.map(sig6).unwrap_or_default(),
                r.avg_len2.map(sig6).unwrap_or_default(),
            ]);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|row| row[c].len()).max().unwrap_or(0))
            .collect();
        for row in &table {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, cell)| format!("{:>width$}", cell, width = widths[c]))
                .collect();
            let _ = writeln!(out, "{}", line.join("  "));
        }
        out
    }

    pub const CSV_HEADER: &'static str =
        "scenario,variant,coefficient,truth,n_used,mean,bias,se,ese1,ese2,rmse,cr1,cr2,al1,al2";

    /// Machine-readable rows (no header), full precision.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                self.label,
                r.variant,
                r.coefficient,
                r.truth,
                r.n_used,
                r.mean_estimate,
                r.bias,
                r.se_empirical,
                opt(r.ese1),
                opt(r.ese2),
                r.rmse,
                opt(r.coverage1),
                opt(r.coverage2),
                opt(r.avg_len1),
                opt(r.avg_len2),
            );
        }
        out
    }

    /// Full delimited document with header.
    pub fn to_csv(&self) -> String {
        format!("{}\n{}", Self::CSV_HEADER, self.csv_rows())
    }
}

/// Format with 6 significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (5 - mag).max(0) as usize;
    let s = format!("{:.*}", decimals, x);
    // Trim trailing zeros but keep at least one digit after the point.
    if s.contains('.') {
        let t = s.trim_end_matches('0').trim_end_matches('.');
        t.to_string()
    } else {
        s
    }
}
