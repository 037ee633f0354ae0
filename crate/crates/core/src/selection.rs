//! Residual-based cleaning and backward stepwise model selection.

use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::covariates::CovariateSet;
use crate::error::{Error, Result};
use crate::mixedlm::{build_design, fit, Atom, FitOptions, FittedMixedModel, FixedTerm, Method, ModelFormula};
use crate::panel::{CellKey, MortalityPanel};

pub const DEFAULT_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    #[default]
    Aic,
    Bic,
}

impl Criterion {
    pub fn of(self, model: &FittedMixedModel) -> f64 {
        let ic = model.information_criteria();
        match self {
            Criterion::Aic => ic.aic,
            Criterion::Bic => ic.bic,
        }
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aic" => Ok(Criterion::Aic),
            "bic" => Ok(Criterion::Bic),
            _ => Err(Error::Validation(format!("unknown criterion `{s}` (expected aic or bic)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub threshold: f64,
    pub n_before: usize,
    pub n_after: usize,
    pub retained_fraction: f64,
    pub dropped_keys: Vec<CellKey>,
}

impl CleaningReport {
    pub fn write_dropped_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["country", "gender", "age", "year"])?;
        for k in &self.dropped_keys {
            w.write_record([k.country.clone(), k.gender.to_string(), k.age.to_string(), k.year.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CleanOutcome {
    pub panel: MortalityPanel,
    pub first_fit: FittedMixedModel,
    pub refit: FittedMixedModel,
    pub report: CleaningReport,
}

fn fit_formula(
    panel: &MortalityPanel,
    covs: &CovariateSet,
    formula: &ModelFormula,
    split_age: u32,
    method: Method,
    opts: &FitOptions,
) -> Result<FittedMixedModel> {
    let design = build_design(panel, covs, formula, split_age)?;
    fit(&design, method, opts)
}

/// Fits by REML, drops every record whose absolute residual exceeds
/// `threshold`, and refits once on the remainder. Covariates are held at
/// the values supplied, so they should come from the uncleaned panel.
pub fn clean_refit(
    panel: &MortalityPanel,
    covs: &CovariateSet,
    formula: &ModelFormula,
    threshold: f64,
    split_age: u32,
    opts: &FitOptions,
) -> Result<CleanOutcome> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::Validation(format!("cleaning threshold must be positive, got {threshold}")));
    }
    let first_fit = fit_formula(panel, covs, formula, split_age, Method::Reml, opts)?;
    let dropped: BTreeSet<&CellKey> = first_fit
        .keys
        .iter()
        .zip(&first_fit.residuals)
        .filter(|(_, r)| r.abs() > threshold)
        .map(|(k, _)| k)
        .collect();
    let cleaned = panel.filter(|r| !dropped.contains(&r.key))?;
    let design = build_design(&cleaned, covs, formula, split_age)?;
    for (term, before) in design.terms.iter().zip(&first_fit.random) {
        if let Some(lost) = before.levels.iter().find(|l| !term.levels.contains(l)) {
            return Err(Error::EmptyGroupLevel(format!("{} = {lost}", before.grouping)));
        }
    }
    let refit = fit(&design, Method::Reml, opts)?;
    let report = CleaningReport {
        threshold,
        n_before: panel.len(),
        n_after: cleaned.len(),
        retained_fraction: cleaned.len() as f64 / panel.len() as f64,
        dropped_keys: dropped.into_iter().cloned().collect(),
    };
    Ok(CleanOutcome { panel: cleaned, first_fit, refit, report })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Random,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub phase: Phase,
    pub removed: String,
    pub criterion_before: f64,
    pub criterion_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub criterion: Criterion,
    pub initial_formula: ModelFormula,
    pub steps: Vec<SelectionStep>,
    pub final_formula: ModelFormula,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SelectionOptions {
    pub criterion: Criterion,
    pub split_age: u32,
    pub fit: FitOptions,
}

/// Formulas reachable by dropping one random slope. The random intercept
/// stays.
fn random_moves(f: &ModelFormula) -> Vec<(String, ModelFormula)> {
    let mut out = Vec::new();
    for (t, term) in f.random.iter().enumerate() {
        for (k, atom) in term.regressors.iter().enumerate() {
            if *atom == Atom::Intercept {
                continue;
            }
            let mut g = f.clone();
            g.random[t].regressors.remove(k);
            let label = format!("({atom} | {})", term.grouping_name());
            if g.random[t].regressors.is_empty() {
                g.random.remove(t);
            }
            out.push((label, g));
        }
    }
    out
}

/// Formulas reachable by dropping one fixed term without breaking
/// marginality or leaving a random regressor without its fixed
/// counterpart. The intercept stays.
fn fixed_moves(f: &ModelFormula) -> Vec<(String, ModelFormula)> {
    let mut out = Vec::new();
    for (i, term) in f.fixed.iter().enumerate() {
        if term.is_intercept() {
            continue;
        }
        let others: Vec<&FixedTerm> = f.fixed.iter().filter(|t| *t != term).collect();
        if others.iter().any(|o| term.is_marginal_to(o)) {
            continue;
        }
        let mut g = f.clone();
        g.fixed.remove(i);
        if g.validate().is_ok() {
            out.push((term.to_string(), g));
        }
    }
    out
}

/// Backward elimination: random slopes first under REML, then fixed terms
/// under maximum likelihood. Each step removes the single term whose
/// removal lowers the criterion most; a phase ends when no removal helps.
pub fn backward_select(
    panel: &MortalityPanel,
    covs: &CovariateSet,
    maximal: &ModelFormula,
    opts: &SelectionOptions,
) -> Result<SelectionTrace> {
    maximal.validate()?;
    let mut current = maximal.clone();
    let mut steps = Vec::new();
    for (phase, method) in [(Phase::Random, Method::Reml), (Phase::Fixed, Method::Ml)] {
        let score = |f: &ModelFormula| -> Result<f64> {
            let m = fit_formula(panel, covs, f, opts.split_age, method, &opts.fit)?;
            Ok(opts.criterion.of(&m))
        };
        let mut best = score(&current)?;
        loop {
            let moves = match phase {
                Phase::Random => random_moves(&current),
                Phase::Fixed => fixed_moves(&current),
            };
            // Candidates that cannot be fitted (e.g. rank deficient) are skipped.
            let scored: Vec<(usize, f64)> = moves
                .par_iter()
                .enumerate()
                .filter_map(|(i, (_, f))| score(f).ok().map(|s| (i, s)))
                .collect();
            let Some(&(i, value)) = scored.iter().min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))) else {
                break;
            };
            if value >= best {
                break;
            }
            let (label, formula) = moves[i].clone();
            steps.push(SelectionStep { phase, removed: label, criterion_before: best, criterion_after: value });
            current = formula;
            best = value;
        }
    }
    Ok(SelectionTrace { criterion: opts.criterion, initial_formula: maximal.clone(), steps, final_formula: current })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantilePair {
    pub theoretical: f64,
    pub empirical: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedBin {
    pub fitted_min: f64,
    pub fitted_max: f64,
    pub fitted_mean: f64,
    pub n: usize,
    pub residual_mean: f64,
    pub residual_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualDiagnostics {
    pub quantiles: Vec<QuantilePair>,
    pub bins: Vec<FittedBin>,
}

pub const DIAGNOSTIC_BINS: usize = 20;

/// Normal QQ pairs at plotting positions `(i - 0.5)/n`, scaled by the
/// residuals' mean and standard deviation, and equal-count bins of residual
/// spread over the fitted values.
pub fn residual_diagnostics(fitted: &[f64], residuals: &[f64]) -> Result<ResidualDiagnostics> {
    let n = residuals.len();
    if n < 10 || fitted.len() != n {
        return Err(Error::Validation(format!("diagnostics need at least 10 paired residuals, got {n}")));
    }
    let nf = n as f64;
    let mean = residuals.iter().sum::<f64>() / nf;
    let sd = (residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut sorted = residuals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let quantiles = sorted
        .iter()
        .enumerate()
        .map(|(i, e)| QuantilePair {
            theoretical: mean + sd * std_normal.inverse_cdf((i as f64 + 0.5) / nf),
            empirical: *e,
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| fitted[a].total_cmp(&fitted[b]));
    let bins = (0..DIAGNOSTIC_BINS)
        .filter_map(|b| {
            let idx = &order[b * n / DIAGNOSTIC_BINS..(b + 1) * n / DIAGNOSTIC_BINS];
            if idx.is_empty() {
                return None;
            }
            let k = idx.len() as f64;
            let rm = idx.iter().map(|&i| residuals[i]).sum::<f64>() / k;
            let var = if idx.len() > 1 {
                idx.iter().map(|&i| (residuals[i] - rm).powi(2)).sum::<f64>() / (k - 1.0)
            } else {
                0.0
            };
            Some(FittedBin {
                fitted_min: fitted[idx[0]],
                fitted_max: fitted[idx[idx.len() - 1]],
                fitted_mean: idx.iter().map(|&i| fitted[i]).sum::<f64>() / k,
                n: idx.len(),
                residual_mean: rm,
                residual_variance: var,
            })
        })
        .collect();
    Ok(ResidualDiagnostics { quantiles, bins })
}

impl FittedMixedModel {
    /// Diagnostics of the in-sample residuals.
    pub fn residual_diagnostics(&self) -> Result<ResidualDiagnostics> {
        residual_diagnostics(&self.fitted, &self.residuals)
    }
}
