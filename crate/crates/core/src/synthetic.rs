//! Synthetic multi-population death rates for demos and tests.
//!
//! Log rates follow a Gompertz-like age profile with an infant term, a male
//! excess, population-specific level and improvement loadings, and one
//! random walk with drift per country driving the period trend.

use serde::{Deserialize, Serialize};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::panel::{build_panel, AgeGrid, AgeGroup, CellKey, Gender, MortalityPanel, RawRate, RawRateTable};
use crate::seed::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSetup {
    pub countries: Vec<String>,
    pub age_grid: AgeGrid,
    pub first_year: i32,
    pub last_year: i32,
    /// Standard deviation of the cell-level noise on the log scale.
    pub noise_sd: f64,
    /// Spread of the level offsets per country, gender and age group.
    pub level_sd: f64,
    /// Spread of the improvement loadings per country, gender and age group.
    pub loading_sd: f64,
    pub trend_drift: f64,
    pub trend_sd: f64,
    /// Share of cells shifted by `±outlier_shift`.
    pub outlier_fraction: f64,
    pub outlier_shift: f64,
    pub seed: u64,
}

impl Default for SyntheticSetup {
    fn default() -> Self {
        Self {
            countries: ["AAA", "BBB", "CCC", "DDD", "EEE", "FFF"].map(String::from).to_vec(),
            age_grid: AgeGrid::hmd_five_year(),
            first_year: 1961,
            last_year: 2019,
            noise_sd: 0.03,
            level_sd: 0.06,
            loading_sd: 0.15,
            trend_drift: -0.015,
            trend_sd: 0.01,
            outlier_fraction: 0.0,
            outlier_shift: 0.5,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub tables: Vec<RawRateTable>,
    /// Cells that received a planted shift.
    pub outliers: Vec<CellKey>,
}

impl SyntheticData {
    pub fn panel(&self, setup: &SyntheticSetup) -> Result<MortalityPanel> {
        build_panel(&self.tables, (setup.first_year, setup.last_year), &setup.age_grid)
    }
}

fn midpoint(age: &AgeGroup) -> f64 {
    match age.years() {
        Some(w) => age.lower as f64 + 0.5 * w as f64,
        None => age.lower as f64 + 2.5,
    }
}

fn base_log_rate(x: f64, gender: Gender) -> f64 {
    let level = (0.02 * (-4.0 * x).exp() + 0.0003 + 0.00003 * (0.095 * x).exp()).ln();
    match gender {
        Gender::Female => level,
        Gender::Male => level + 0.25 + 0.35 * (-((x - 22.0) / 12.0).powi(2)).exp(),
    }
}

/// Draws death-rate tables; country `i` uses stream `i` of `setup.seed`.
pub fn generate(setup: &SyntheticSetup) -> Result<SyntheticData> {
    if setup.first_year > setup.last_year || setup.countries.is_empty() {
        return Err(Error::Validation("synthetic data needs countries and a year range".into()));
    }
    let sd = |v: f64| Normal::new(0.0, v).map_err(|e| Error::Validation(format!("bad spread {v}: {e}")));
    let (noise, level, loading, trend) = (sd(setup.noise_sd)?, sd(setup.level_sd)?, sd(setup.loading_sd)?, sd(setup.trend_sd)?);
    let mut tables = Vec::with_capacity(setup.countries.len());
    let mut outliers = Vec::new();
    for (ci, country) in setup.countries.iter().enumerate() {
        let mut rng = stream_rng(setup.seed, ci as u64);
        let country_drift = setup.trend_drift * (1.0 + 0.2 * level.sample(&mut rng) / setup.level_sd.max(1e-12));
        let mut kappa = Vec::new();
        let mut k = 0.0;
        for _ in setup.first_year..=setup.last_year {
            kappa.push(k);
            k += country_drift + trend.sample(&mut rng);
        }
        let country_level = 2.0 * level.sample(&mut rng);
        let mut rates = Vec::new();
        for gender in Gender::BOTH {
            for age in setup.age_grid.groups() {
                let x = midpoint(age);
                let a = base_log_rate(x, gender) + country_level + level.sample(&mut rng);
                let b = (1.4 - x / 100.0) * (1.0 + loading.sample(&mut rng));
                for (t, year) in (setup.first_year..=setup.last_year).enumerate() {
                    let mut y = a + b * kappa[t] + noise.sample(&mut rng);
                    // Both draws happen for every cell so that the outlier
                    // share does not perturb the rest of the stream.
                    let u: f64 = rng.random();
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    if u < setup.outlier_fraction {
                        y += sign * setup.outlier_shift;
                        outliers.push(CellKey { country: country.clone(), gender, age: *age, year });
                    }
                    rates.push(RawRate { year, age: *age, gender, rate: y.exp() });
                }
            }
        }
        tables.push(RawRateTable { country: country.clone(), rates });
    }
    outliers.sort();
    Ok(SyntheticData { tables, outliers })
}
