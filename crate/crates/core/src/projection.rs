//! Forecasts of log death rates from a fitted mixed model, simulated
//! prediction intervals and the single-population Lee–Carter form.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::ops::RangeInclusive;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariates::CovariateSet;
use crate::error::{Error, Result};
use crate::mixedlm::fit::to_matrix;
use crate::mixedlm::{Atom, FittedMixedModel, GroupFactor};
use crate::panel::{AgeGrid, AgeGroup, CellKey, Gender};
use crate::seed::stream_rng;

/// Forecast of one cell on the log scale. Without intervals `lower` and
/// `upper` equal `point`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastCell {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

impl ForecastCell {
    pub fn exact(point: f64) -> Self {
        Self { point, lower: point, upper: point }
    }
}

/// Log-rate forecasts by cell, with the nominal coverage of the intervals.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RateForecast {
    pub cells: BTreeMap<CellKey, ForecastCell>,
    pub level: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ForecastRow {
    country: String,
    gender: Gender,
    age_lower: u32,
    year: i32,
    point: f64,
    lower: f64,
    upper: f64,
}

impl RateForecast {
    pub fn has_intervals(&self) -> bool {
        self.level.is_some()
    }

    pub fn get(&self, key: &CellKey) -> Option<&ForecastCell> {
        self.cells.get(key)
    }

    pub fn years(&self) -> Vec<i32> {
        let mut ys: Vec<i32> = self.cells.keys().map(|k| k.year).collect();
        ys.sort_unstable();
        ys.dedup();
        ys
    }

    pub fn populations(&self) -> Vec<(String, Gender)> {
        let mut ps: Vec<(String, Gender)> = self.cells.keys().map(|k| (k.country.clone(), k.gender)).collect();
        ps.dedup();
        ps
    }

    /// Cells of one population and year in age order.
    pub fn slice(&self, country: &str, gender: Gender, year: i32) -> Vec<(AgeGroup, ForecastCell)> {
        self.cells
            .iter()
            .filter(|(k, _)| k.country == country && k.gender == gender && k.year == year)
            .map(|(k, c)| (k.age, *c))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for (k, c) in &self.cells {
            w.serialize(ForecastRow {
                country: k.country.clone(),
                gender: k.gender,
                age_lower: k.age.lower,
                year: k.year,
                point: c.point,
                lower: c.lower,
                upper: c.upper,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV layout of [`RateForecast::write_csv`]; age groups are
    /// resolved on `grid`. The level is not part of the file.
    pub fn read_csv<R: Read>(input: R, grid: &AgeGrid, level: Option<f64>) -> Result<Self> {
        let mut cells = BTreeMap::new();
        for row in csv::Reader::from_reader(input).deserialize::<ForecastRow>() {
            let row = row?;
            let age = grid
                .by_lower(row.age_lower)
                .ok_or_else(|| Error::Validation(format!("age {} is not on the grid", row.age_lower)))?;
            let key = CellKey { country: row.country, gender: row.gender, age, year: row.year };
            cells.insert(key, ForecastCell { point: row.point, lower: row.lower, upper: row.upper });
        }
        Ok(Self { cells, level })
    }
}

/// Every (population, age group, year) cell, in key order.
pub fn forecast_cells(populations: &[(String, Gender)], grid: &AgeGrid, years: RangeInclusive<i32>) -> Vec<CellKey> {
    let mut keys = Vec::new();
    for (country, gender) in populations {
        for age in grid.groups() {
            for year in years.clone() {
                keys.push(CellKey { country: country.clone(), gender: *gender, age: *age, year });
            }
        }
    }
    keys.sort();
    keys
}

/// Point forecasts `xᵀβ̂ + zᵀη̂` with parameters held at their estimates.
pub fn predict_rates(fit: &FittedMixedModel, covs: &CovariateSet, cells: &[CellKey]) -> Result<RateForecast> {
    let points = fit.predict(cells, covs)?;
    Ok(RateForecast {
        cells: cells.iter().cloned().zip(points.into_iter().map(ForecastCell::exact)).collect(),
        level: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntervalOptions {
    pub n_sim: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for IntervalOptions {
    fn default() -> Self {
        Self { n_sim: 1000, level: 0.95, seed: 1 }
    }
}

/// `L` with `L Lᵀ = m` for a symmetric positive semi-definite `m`; falls
/// back to a clipped eigen decomposition when Cholesky fails.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    if let Some(c) = sym.clone().cholesky() {
        return c.l();
    }
    let eig = sym.symmetric_eigen();
    let mut l = eig.eigenvectors;
    for (j, v) in eig.eigenvalues.iter().enumerate() {
        let s = v.max(0.0).sqrt();
        l.column_mut(j).scale_mut(s);
    }
    l
}

/// Type-7 sample quantile of sorted values.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Distribution of one random-effect vector in the simulation.
struct EffectSource {
    mean: DVector<f64>,
    /// Response of the mean to `β* - β̂`; absent for unseen levels.
    shift: Option<DMatrix<f64>>,
    factor: DMatrix<f64>,
}

/// Simulated prediction intervals. Each simulation draws
/// `β* ~ N(β̂, Cov β̂)`, then one effect vector per level from its
/// conditional distribution given the data and `β*` (levels unseen in
/// training from `N(0, Ψ̂)`)
/// and `ε* ~ N(0, σ̂²)` per cell. Simulation `s` uses stream `s` of the
/// seed. The point is the simulated median.
pub fn prediction_intervals(
    fit: &FittedMixedModel,
    covs: &CovariateSet,
    cells: &[CellKey],
    opts: &IntervalOptions,
) -> Result<RateForecast> {
    if !(opts.level > 0.0 && opts.level < 1.0) {
        return Err(Error::Validation(format!("interval level {} is outside (0, 1)", opts.level)));
    }
    if opts.n_sim == 0 {
        return Err(Error::Validation("n_sim must be positive".into()));
    }
    let layout = fit.layout()?;
    let lookup = fit.level_lookup();
    let mut designs = Vec::with_capacity(cells.len());
    // Per term: the distinct levels touched, and each cell's slot in that list.
    let mut sources: Vec<Vec<EffectSource>> = Vec::with_capacity(fit.random.len());
    let mut slots: Vec<Vec<usize>> = vec![Vec::with_capacity(cells.len()); fit.random.len()];
    let mut slot_of: Vec<HashMap<String, usize>> = vec![HashMap::new(); fit.random.len()];
    for _ in &fit.random {
        sources.push(Vec::new());
    }
    for key in cells {
        let d = fit.cell_design(key, covs, &lookup)?;
        for (t, comp) in fit.random.iter().enumerate() {
            let label = layout.group_label(t, key);
            let next = sources[t].len();
            let slot = *slot_of[t].entry(label).or_insert(next);
            if slot == next {
                let (mean, shift, cov) = match d.random[t].0 {
                    Some(g) => (
                        DVector::from_vec(comp.blups[g].clone()),
                        comp.mode_shift.get(g).map(|s| to_matrix(s)),
                        to_matrix(&comp.cond_var[g]),
                    ),
                    None => (DVector::zeros(comp.q()), None, comp.psi_matrix()),
                };
                sources[t].push(EffectSource { mean, shift, factor: psd_factor(&cov) });
            }
            slots[t].push(slot);
        }
        designs.push(d);
    }
    let beta = fit.beta();
    let beta_factor = psd_factor(&fit.beta_cov_matrix());
    let sigma = fit.sigma2.max(0.0).sqrt();
    let p = beta.len();

    let sims: Vec<Vec<f64>> = (0..opts.n_sim)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream_rng(opts.seed, s as u64);
            let mut normals = |k: usize| DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
            let delta = &beta_factor * normals(p);
            let b = &beta + &delta;
            let effects: Vec<Vec<DVector<f64>>> = sources
                .iter()
                .map(|list| {
                    list.iter()
                        .map(|src| {
                            let mean = match &src.shift {
                                Some(s) => &src.mean + s * &delta,
                                None => src.mean.clone(),
                            };
                            mean + &src.factor * normals(src.mean.len())
                        })
                        .collect()
                })
                .collect();
            let eps = normals(designs.len());
            designs
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    let mut v: f64 = d.x.iter().zip(b.iter()).map(|(x, b)| x * b).sum();
                    for (t, (_, z)) in d.random.iter().enumerate() {
                        let eta = &effects[t][slots[t][i]];
                        v += z.iter().zip(eta.iter()).map(|(a, b)| a * b).sum::<f64>();
                    }
                    v + sigma * eps[i]
                })
                .collect()
        })
        .collect();

    let tail = (1.0 - opts.level) / 2.0;
    let summaries: Vec<ForecastCell> = (0..cells.len())
        .into_par_iter()
        .map(|i| {
            let mut v: Vec<f64> = sims.iter().map(|s| s[i]).collect();
            v.sort_by(f64::total_cmp);
            ForecastCell {
                point: quantile_sorted(&v, 0.5),
                lower: quantile_sorted(&v, tail),
                upper: quantile_sorted(&v, 1.0 - tail),
            }
        })
        .collect();
    Ok(RateForecast { cells: cells.iter().cloned().zip(summaries).collect(), level: Some(opts.level) })
}

/// Age pattern and trend loading of a single-population fit written as
/// `y = a_x + b_x k_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcForm {
    pub ages: Vec<AgeGroup>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl LcForm {
    pub fn log_rate(&self, age: &AgeGroup, k: f64) -> Option<f64> {
        let i = self.ages.iter().position(|a| a == age)?;
        Some(self.a[i] + self.b[i] * k)
    }
}

/// `a_x = β₀ + η₀ₓ` and `b_x = β₁ + η₁ₓ` for the model
/// `1 + I(k_t) + (1 + I(k_t) | age)` fitted to population `(country, gender)`.
pub fn to_lc_form(fit: &FittedMixedModel, country: &str, gender: Gender) -> Result<LcForm> {
    let layout = fit.layout()?;
    let f = &layout.formula;
    let shape_error = || Error::Validation(format!("model `{f}` is not of the form 1 + I(k_t) + (1 + I(k_t) | age)"));
    let fixed_ok = f.fixed.len() == 2
        && f.fixed[0].is_intercept()
        && f.fixed[1].factors.is_empty()
        && f.fixed[1].atom == Atom::Global(1);
    let random_ok = f.random.len() == 1
        && f.random[0].grouping == [GroupFactor::Age]
        && f.random[0].regressors == [Atom::Intercept, Atom::Global(1)];
    if !fixed_ok || !random_ok || fit.fixed.len() != 2 {
        return Err(shape_error());
    }
    let (b0, b1) = (fit.fixed[0].estimate, fit.fixed[1].estimate);
    let comp = &fit.random[0];
    let lookup = &fit.level_lookup()[0];
    let ages = layout.age_grid.groups().to_vec();
    let mut a = Vec::with_capacity(ages.len());
    let mut b = Vec::with_capacity(ages.len());
    for age in &ages {
        let key = CellKey { country: country.to_string(), gender, age: *age, year: 0 };
        let eta = lookup.get(layout.group_label(0, &key).as_str()).map_or([0.0, 0.0], |&g| [comp.blups[g][0], comp.blups[g][1]]);
        a.push(b0 + eta[0]);
        b.push(b1 + eta[1]);
    }
    Ok(LcForm { ages, a, b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariates::{GlobalSeries, SegmentedSeries, DEFAULT_SPLIT_AGE};
    use crate::mixedlm::{build_design, fit_reml, DesignLayout, FitOptions, FixedEffect, Method, ModelFormula, RandomComponent};
    use crate::synthetic::{generate, SyntheticSetup};

    const SELECTED: &str = "age + gender:age + gender:age:I(k_ct) + I(k_t^2) + gender:age:I(k_ct^2) + cohort + (I(k_t^2) + cohort | country:gender:age)";

    fn zero_rows(n: usize) -> Vec<Vec<f64>> {
        vec![vec![0.0; n]; n]
    }

    /// A model with hand-set coefficients and no estimation uncertainty.
    fn manual_model(layout: DesignLayout, beta: &[(&str, f64)], blups: &[(&str, Vec<f64>)]) -> FittedMixedModel {
        let names = layout.x_names();
        let fixed = names
            .iter()
            .map(|n| FixedEffect {
                name: n.clone(),
                estimate: beta.iter().find(|(b, _)| b == n).map_or(0.0, |b| b.1),
                std_error: 0.0,
            })
            .collect();
        let random = layout
            .formula
            .random
            .iter()
            .map(|term| {
                let q = term.regressors.len();
                RandomComponent {
                    grouping: term.grouping_name(),
                    regressors: term.regressors.iter().map(ToString::to_string).collect(),
                    levels: blups.iter().map(|b| b.0.to_string()).collect(),
                    psi: zero_rows(q),
                    std_devs: vec![0.0; q],
                    correlations: zero_rows(q),
                    blups: blups.iter().map(|b| b.1.clone()).collect(),
                    cond_var: blups.iter().map(|_| zero_rows(q)).collect(),
                    mode_shift: Vec::new(),
                }
            })
            .collect();
        FittedMixedModel {
            formula: Some(layout.formula.clone()),
            method: Method::Reml,
            beta_cov: zero_rows(names.len()),
            fixed,
            random,
            sigma2: 0.0,
            criterion: 0.0,
            loglik: 0.0,
            theta: Vec::new(),
            n_obs: 0,
            n_params: 0,
            converged: true,
            singular: false,
            evaluations: 0,
            layout: Some(layout),
            fitted: Vec::new(),
            residuals: Vec::new(),
            keys: Vec::new(),
        }
    }

    fn one_year_covariates(year: i32, k: f64, young: f64, old: f64) -> CovariateSet {
        let mut countries = BTreeMap::new();
        countries.insert(
            "AUT".to_string(),
            SegmentedSeries {
                country: "AUT".into(),
                split_age: DEFAULT_SPLIT_AGE,
                young: [(year, young)].into(),
                old: [(year, old)].into(),
            },
        );
        CovariateSet { global: GlobalSeries { values: [(year, k)].into() }, countries, extra: BTreeMap::new() }
    }

    #[test]
    fn published_worked_example() {
        let formula: ModelFormula = SELECTED.parse().unwrap();
        let layout = DesignLayout::new(&formula, &AgeGrid::hmd_five_year(), DEFAULT_SPLIT_AGE).unwrap();
        let fit = manual_model(
            layout,
            &[
                ("(Intercept)", 49.874),
                ("age50-54", -48.080),
                ("genderF:age50-54:I(k_ct)", 3.112),
                ("I(k_t^2)", 0.0061),
                ("genderF:age50-54:I(k_ct^2)", 0.396),
                ("cohort", -0.00103),
            ],
            &[("AUT:F:50-54", vec![0.0429, -0.02821, 0.000263])],
        );
        let (k, k_old) = (-5.158f64, -3.108f64);
        let covs = one_year_covariates(2019, k, -8.035, k_old);
        let key = CellKey { country: "AUT".into(), gender: Gender::Female, age: AgeGroup::closed(50, 5), year: 2019 };
        let got = predict_rates(&fit, &covs, std::slice::from_ref(&key)).unwrap().cells[&key].point;
        let expected = 49.874 - 48.080 + 3.112 * k_old + 0.0061 * k * k + 0.396 * k_old * k_old - 0.00103 * 1969.0
            + 0.0429
            - 0.02821 * k * k
            + 0.000263 * 1969.0;
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }

    #[test]
    fn missing_covariate_year_is_an_error() {
        let formula: ModelFormula = SELECTED.parse().unwrap();
        let layout = DesignLayout::new(&formula, &AgeGrid::hmd_five_year(), DEFAULT_SPLIT_AGE).unwrap();
        let fit = manual_model(layout, &[], &[]);
        let covs = one_year_covariates(2019, -5.0, -8.0, -3.0);
        let key = CellKey { country: "AUT".into(), gender: Gender::Male, age: AgeGroup::closed(50, 5), year: 2020 };
        assert!(predict_rates(&fit, &covs, &[key]).is_err());
    }

    struct Fixture {
        fit: FittedMixedModel,
        covs: CovariateSet,
        train: Vec<CellKey>,
        future: Vec<CellKey>,
    }

    fn fixture() -> Fixture {
        let setup = SyntheticSetup {
            countries: vec!["AAA".into(), "BBB".into()],
            age_grid: AgeGrid::hmd_five_year().restrict(50, 89).unwrap(),
            first_year: 1981,
            last_year: 2010,
            ..Default::default()
        };
        let panel = generate(&setup).unwrap().panel(&setup).unwrap();
        let covs = CovariateSet::from_panel(&panel, 60).unwrap();
        let formula: ModelFormula = "age + gender:age + I(k_t) + (1 + I(k_t) | country:gender:age)".parse().unwrap();
        let design = build_design(&panel, &covs, &formula, 60).unwrap();
        let fit = fit_reml(&design, &FitOptions::default()).unwrap();
        let walks = crate::covariates::CovariateWalks::fit(&covs).unwrap();
        let future_covs = walks.forecast_set(&covs, 5);
        let future = forecast_cells(&panel.populations(), panel.age_grid(), 2011..=2015);
        let train = panel.records().iter().map(|r| r.key.clone()).collect();
        Fixture { fit, covs: future_covs, train, future }
    }

    #[test]
    fn interval_properties() {
        let fx = fixture();

        // Training years reproduce the in-sample fitted values.
        let in_sample = predict_rates(&fx.fit, &fx.covs, &fx.train).unwrap();
        for (k, f) in fx.fit.keys.iter().zip(&fx.fit.fitted) {
            assert!((in_sample.cells[k].point - f).abs() < 1e-9);
        }

        let point = predict_rates(&fx.fit, &fx.covs, &fx.future).unwrap();
        let opts = IntervalOptions { n_sim: 1000, level: 0.95, seed: 11 };
        let wide = prediction_intervals(&fx.fit, &fx.covs, &fx.future, &opts).unwrap();
        let narrow = prediction_intervals(&fx.fit, &fx.covs, &fx.future, &IntervalOptions { level: 0.8, ..opts }).unwrap();
        let again = prediction_intervals(&fx.fit, &fx.covs, &fx.future, &opts).unwrap();
        assert_eq!(wide, again);
        let sd = fx.fit.sigma2.sqrt();
        for (k, w) in &wide.cells {
            let n = &narrow.cells[k];
            assert!(w.lower <= n.lower && n.upper <= w.upper);
            assert!(w.lower <= w.point && w.point <= w.upper);
            // Median versus point: the spread of a cell is at least σ, so
            // its Monte Carlo median error is of order σ/√n_sim.
            let spread = (w.upper - w.lower) / (2.0 * 1.96);
            assert!((w.point - point.cells[k].point).abs() < 4.0 * spread.max(sd) / (1000f64).sqrt());
        }
        let other = prediction_intervals(&fx.fit, &fx.covs, &fx.future, &IntervalOptions { seed: 12, ..opts }).unwrap();
        assert_ne!(wide, other);
    }

    #[test]
    fn zero_variances_collapse_the_interval() {
        let mut fx = fixture();
        fx.fit.sigma2 = 0.0;
        for row in &mut fx.fit.beta_cov {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
        for c in &mut fx.fit.random {
            for m in &mut c.cond_var {
                m.iter_mut().flatten().for_each(|v| *v = 0.0);
            }
        }
        let point = predict_rates(&fx.fit, &fx.covs, &fx.future).unwrap();
        let iv = prediction_intervals(&fx.fit, &fx.covs, &fx.future, &IntervalOptions::default()).unwrap();
        for (k, c) in &iv.cells {
            let p = point.cells[k].point;
            assert!((c.lower - p).abs() < 1e-12 && (c.upper - p).abs() < 1e-12 && (c.point - p).abs() < 1e-12);
        }
    }

    #[test]
    fn effect_draws_match_their_distributions() {
        // With β and ε fixed, a cell's spread is that of zᵀη: the
        // conditional covariance for a seen level and Ψ̂ for an unseen one.
        let mut fx = fixture();
        fx.fit.sigma2 = 0.0;
        fx.fit.beta_cov.iter_mut().flatten().for_each(|v| *v = 0.0);
        let seen_key = fx.future[0].clone();
        let mut unseen_key = seen_key.clone();
        unseen_key.country = "ZZZ".into();
        let mut covs = fx.covs.clone();
        let mut zzz = covs.countries["AAA"].clone();
        zzz.country = "ZZZ".into();
        covs.countries.insert("ZZZ".into(), zzz);
        let opts = IntervalOptions { n_sim: 20000, level: 0.95, seed: 5 };
        let iv = prediction_intervals(&fx.fit, &covs, &[seen_key.clone(), unseen_key.clone()], &opts).unwrap();
        let k = covs.global_at(seen_key.year).unwrap();
        let quad = |m: &[Vec<f64>]| m[0][0] + 2.0 * k * m[0][1] + k * k * m[1][1];
        let comp = &fx.fit.random[0];
        let g = comp.levels.iter().position(|l| *l == fx.fit.layout().unwrap().group_label(0, &seen_key)).unwrap();
        for (key, var) in [(&seen_key, quad(&comp.cond_var[g])), (&unseen_key, quad(&comp.psi))] {
            let c = iv.cells[key];
            let sd = (c.upper - c.lower) / (2.0 * 1.959964);
            assert!((sd / var.sqrt() - 1.0).abs() < 0.05, "{key}: {sd} vs {}", var.sqrt());
        }
    }

    #[test]
    fn csv_round_trip() {
        let fx = fixture();
        let iv = prediction_intervals(&fx.fit, &fx.covs, &fx.future, &IntervalOptions { n_sim: 200, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        iv.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("country,gender,age_lower,year,point,lower,upper\n"));
        let back = RateForecast::read_csv(text.as_bytes(), &fx.fit.layout().unwrap().age_grid, Some(0.95)).unwrap();
        assert_eq!(back, iv);
    }

    #[test]
    fn point_forecast_is_linear_in_the_trend() {
        let formula: ModelFormula = "1 + I(k_t) + (1 + I(k_t) | age)".parse().unwrap();
        let grid = AgeGrid::hmd_five_year().restrict(60, 69).unwrap();
        let layout = DesignLayout::new(&formula, &grid, DEFAULT_SPLIT_AGE).unwrap();
        let fit = manual_model(layout, &[("(Intercept)", -1.0), ("I(k_t)", 0.7)], &[("60-64", vec![0.1, -0.2])]);
        let at = |k: f64| {
            let covs = one_year_covariates(2020, k, 0.0, 0.0);
            let key = CellKey { country: "AUT".into(), gender: Gender::Male, age: AgeGroup::closed(60, 5), year: 2020 };
            predict_rates(&fit, &covs, std::slice::from_ref(&key)).unwrap().cells[&key].point
        };
        let (u, v) = (-3.0, 1.5);
        assert!((at(u + v) - (at(u) + at(v) - at(0.0))).abs() < 1e-12);
        assert!((at(2.0 * u) - (2.0 * at(u) - at(0.0))).abs() < 1e-12);
        assert!((at(u) - (-1.0 + 0.1 + (0.7 - 0.2) * u)).abs() < 1e-12);
    }

    #[test]
    fn lc_form_of_a_single_population_fit() {
        let setup = SyntheticSetup {
            countries: vec!["AAA".into()],
            age_grid: AgeGrid::hmd_five_year().restrict(40, 89).unwrap(),
            first_year: 1971,
            last_year: 2010,
            ..Default::default()
        };
        let panel = generate(&setup).unwrap().panel(&setup).unwrap().population("AAA", Gender::Female).unwrap();
        let covs = CovariateSet::from_panel(&panel, DEFAULT_SPLIT_AGE).unwrap();
        let formula: ModelFormula = "1 + I(k_t) + (1 + I(k_t) | age)".parse().unwrap();
        let design = build_design(&panel, &covs, &formula, DEFAULT_SPLIT_AGE).unwrap();
        let fit = fit_reml(&design, &FitOptions::default()).unwrap();
        let lc = to_lc_form(&fit, "AAA", Gender::Female).unwrap();
        for (i, age) in lc.ages.iter().enumerate() {
            let label = age.to_string();
            assert_eq!(lc.a[i], fit.fixed[0].estimate + fit.blup(0, &label, "(Intercept)").unwrap());
            assert_eq!(lc.b[i], fit.fixed[1].estimate + fit.blup(0, &label, "I(k_t)").unwrap());
        }
        for (key, f) in fit.keys.iter().zip(&fit.fitted) {
            let y = lc.log_rate(&key.age, covs.global_at(key.year).unwrap()).unwrap();
            assert!((y - f).abs() < 1e-9);
        }

        let mut zeroed = fit.clone();
        zeroed.random[0].blups.iter_mut().flatten().for_each(|v| *v = 0.0);
        let lc0 = to_lc_form(&zeroed, "AAA", Gender::Female).unwrap();
        assert!(lc0.a.iter().all(|a| *a == fit.fixed[0].estimate));
        assert!(lc0.b.iter().all(|b| *b == fit.fixed[1].estimate));

        let other: ModelFormula = "1 + I(k_t) + (1 | age)".parse().unwrap();
        let design = build_design(&panel, &covs, &other, DEFAULT_SPLIT_AGE).unwrap();
        let wrong = fit_reml(&design, &FitOptions::default()).unwrap();
        assert!(to_lc_form(&wrong, "AAA", Gender::Female).is_err());
    }
}
