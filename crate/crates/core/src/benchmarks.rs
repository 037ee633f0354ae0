//! Lee–Carter and Li–Lee reference models and the forecast error tables
//! used to compare them with the mixed model.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariates::{fit_rwd, forecast_rwd, simulate_rwd, RandomWalkModel, YearSeries};
use crate::error::{Error, Result};
use crate::panel::{AgeGroup, CellKey, Gender, MortalityPanel};
use crate::projection::{quantile_sorted, ForecastCell, IntervalOptions, RateForecast};

/// Relative gap below which the two leading singular values count as tied.
const TIE_TOLERANCE: f64 = 1e-9;

/// `log m(x, t) = a_x + b_x k_t` for one population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcFit {
    pub country: String,
    pub gender: Gender,
    pub ages: Vec<AgeGroup>,
    pub years: Vec<i32>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub k: Vec<f64>,
    pub rw: RandomWalkModel,
}

impl LcFit {
    pub fn fitted(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.a.len(), self.k.len(), |i, j| self.a[i] + self.b[i] * self.k[j])
    }

    pub fn k_series(&self) -> YearSeries {
        self.years.iter().copied().zip(self.k.iter().copied()).collect()
    }
}

/// Row means and the leading rank-one term of the centred matrix.
struct Bilinear {
    a: Vec<f64>,
    b: Vec<f64>,
    k: Vec<f64>,
}

/// Rescales a singular pair `(u, s v)` so that `Σb = 1` and `Σk = 0`.
/// Returns `None` when `Σu` vanishes and no such scaling exists.
pub fn normalize(u: &[f64], v: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let sum: f64 = u.iter().sum();
    let scale = u.iter().map(|x| x.abs()).sum::<f64>();
    if scale == 0.0 || sum.abs() < 1e-12 * scale {
        return None;
    }
    let b: Vec<f64> = u.iter().map(|x| x / sum).collect();
    let mut k: Vec<f64> = v.iter().map(|x| x * sum).collect();
    let mean = k.iter().sum::<f64>() / k.len() as f64;
    k.iter_mut().for_each(|x| *x -= mean);
    Some((b, k))
}

/// `zero_floor`: when set, a leading singular value at or below it yields a
/// null factor instead of an error.
fn bilinear(m: &DMatrix<f64>, zero_floor: Option<f64>) -> Result<Bilinear> {
    let (na, nt) = m.shape();
    if na < 3 || nt < 3 {
        return Err(Error::Validation(format!("need at least 3 ages and 3 years, got {na} × {nt}")));
    }
    let a: Vec<f64> = (0..na).map(|i| m.row(i).mean()).collect();
    let centred = DMatrix::from_fn(na, nt, |i, j| m[(i, j)] - a[i]);
    let scale = centred.amax();
    if !scale.is_finite() {
        return Err(Error::Numerical("log-rate matrix is not finite".into()));
    }
    let null = |a: Vec<f64>| Bilinear { a, b: vec![1.0 / na as f64; na], k: vec![0.0; nt] };
    let svd = centred.svd(true, true);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s1 = svd.singular_values[order[0]];
    let s2 = order.get(1).map_or(0.0, |&i| svd.singular_values[i]);
    if let Some(floor) = zero_floor {
        if s1 <= floor {
            return Ok(null(a));
        }
    }
    if scale == 0.0 || s1 <= 1e-12 * scale * ((na * nt) as f64).sqrt() {
        return Err(Error::Numerical("log-rate matrix has no variation over time".into()));
    }
    if s1 - s2 <= TIE_TOLERANCE * s1 {
        return Err(Error::Numerical("leading singular values are tied; the age pattern is not identified".into()));
    }
    let u = svd.u.as_ref().expect("left vectors requested").column(order[0]).iter().copied().collect::<Vec<_>>();
    let v: Vec<f64> = svd.v_t.as_ref().expect("right vectors requested").row(order[0]).iter().map(|x| x * s1).collect();
    let (b, k) = normalize(&u, &v)
        .ok_or_else(|| Error::Numerical("age loadings sum to zero and cannot be normalized".into()))?;
    Ok(Bilinear { a, b, k })
}

/// Lee–Carter fit of an `ages × years` log-rate matrix: `a` are row means,
/// `(b, k)` the leading singular pair of the centred matrix scaled to
/// `Σb = 1`, `Σk = 0`, and `k` gets a random walk with drift.
pub fn fit_lc_matrix(
    country: &str,
    gender: Gender,
    ages: Vec<AgeGroup>,
    years: Vec<i32>,
    m: &DMatrix<f64>,
) -> Result<LcFit> {
    if m.nrows() != ages.len() || m.ncols() != years.len() {
        return Err(Error::Validation("matrix shape does not match ages and years".into()));
    }
    let bl = bilinear(m, None)?;
    let series: YearSeries = years.iter().copied().zip(bl.k.iter().copied()).collect();
    let rw = fit_rwd(&series)?;
    Ok(LcFit { country: country.to_string(), gender, ages, years, a: bl.a, b: bl.b, k: bl.k, rw })
}

pub fn fit_lc(panel: &MortalityPanel, country: &str, gender: Gender) -> Result<LcFit> {
    let (ages, years, m) = panel.population_matrix(country, gender)?;
    fit_lc_matrix(country, gender, ages, years, &m)
}

/// One Lee–Carter fit per population of the panel.
pub fn fit_lc_all(panel: &MortalityPanel) -> Result<Vec<LcFit>> {
    panel.populations().par_iter().map(|(c, g)| fit_lc(panel, c, *g)).collect()
}

/// Forecast `horizon` years ahead. Points follow the drift path of `k`;
/// with `opts.n_sim > 0`, intervals come from simulated `k` paths.
pub fn forecast_lc(fit: &LcFit, horizon: usize, opts: &IntervalOptions) -> Result<RateForecast> {
    if horizon == 0 {
        return Err(Error::Validation("forecast horizon must be at least 1".into()));
    }
    let drift_path: Vec<f64> = forecast_rwd(&fit.rw, horizon).into_values().collect();
    let paths = (opts.n_sim > 0).then(|| simulate_rwd(&fit.rw, horizon, opts.n_sim, opts.seed));
    let tail = (1.0 - opts.level) / 2.0;
    let mut cells = BTreeMap::new();
    for (i, age) in fit.ages.iter().enumerate() {
        for h in 0..horizon {
            let point = fit.a[i] + fit.b[i] * drift_path[h];
            let cell = match &paths {
                Some(p) => {
                    let mut v: Vec<f64> = p.column(h).iter().map(|k| fit.a[i] + fit.b[i] * k).collect();
                    v.sort_by(f64::total_cmp);
                    ForecastCell {
                        point,
                        lower: quantile_sorted(&v, tail).min(point),
                        upper: quantile_sorted(&v, 1.0 - tail).max(point),
                    }
                }
                None => ForecastCell::exact(point),
            };
            let key = CellKey { country: fit.country.clone(), gender: fit.gender, age: *age, year: fit.rw.last_year + 1 + h as i32 };
            cells.insert(key, cell);
        }
    }
    Ok(RateForecast { cells, level: paths.map(|_| opts.level) })
}

/// First-order autoregression `k_t = c + φ k_{t-1} + e_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ar1Model {
    pub intercept: f64,
    pub phi: f64,
    pub innovation_variance: f64,
    pub last_year: i32,
    pub last_value: f64,
}

/// Least-squares AR(1) fit. A constant series gives `φ = 0`.
pub fn fit_ar1(series: &YearSeries) -> Result<Ar1Model> {
    if series.len() < 3 {
        return Err(Error::Validation("an autoregression needs at least 3 observations".into()));
    }
    let v: Vec<f64> = series.values().copied().collect();
    let (x, y) = (&v[..v.len() - 1], &v[1..]);
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let phi = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - phi * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - phi * a).powi(2)).sum();
    let (&last_year, &last_value) = series.iter().next_back().expect("non-empty series");
    Ok(Ar1Model { intercept, phi, innovation_variance: rss / (n - 2.0).max(1.0), last_year, last_value })
}

impl Ar1Model {
    pub fn forecast(&self, horizon: usize) -> Vec<f64> {
        let mut k = self.last_value;
        (0..horizon)
            .map(|_| {
                k = self.intercept + self.phi * k;
                k
            })
            .collect()
    }
}

/// Time dynamics of a population-specific factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpecificDynamics {
    Ar1,
    Rwd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KappaModel {
    Ar1(Ar1Model),
    Rwd(RandomWalkModel),
}

impl KappaModel {
    pub fn forecast(&self, horizon: usize) -> Vec<f64> {
        match self {
            KappaModel::Ar1(m) => m.forecast(horizon),
            KappaModel::Rwd(m) => forecast_rwd(m, horizon).into_values().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommonFactor {
    pub b: Vec<f64>,
    pub k: Vec<f64>,
    pub rw: RandomWalkModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecificFactor {
    pub country: String,
    pub gender: Gender,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub kappa: Vec<f64>,
    pub dynamics: KappaModel,
}

/// Li–Lee augmented common factor model
/// `log m_i(x, t) = α_ix + B_x K_t + β_ix k_it`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlFit {
    pub ages: Vec<AgeGroup>,
    pub years: Vec<i32>,
    pub common: CommonFactor,
    pub specific: Vec<SpecificFactor>,
}

/// Two-stage fit: `(B, K)` from the unweighted mean log-rate matrix over
/// populations, then a Lee–Carter pair per population on the residuals.
pub fn fit_ll(panel: &MortalityPanel, populations: &[(String, Gender)], dynamics: SpecificDynamics) -> Result<LlFit> {
    if populations.is_empty() {
        return Err(Error::Validation("no populations given".into()));
    }
    let mut mats = Vec::with_capacity(populations.len());
    let mut shape: Option<(Vec<AgeGroup>, Vec<i32>)> = None;
    for (c, g) in populations {
        let (ages, years, m) = panel.population_matrix(c, *g)?;
        match &shape {
            None => shape = Some((ages, years)),
            Some((a0, y0)) if *a0 != ages || *y0 != years => {
                return Err(Error::Validation(format!("{c} {g} does not share the panel's ages and years")));
            }
            Some(_) => {}
        }
        mats.push(m);
    }
    let (ages, years) = shape.expect("at least one population");
    let pooled = mats.iter().fold(DMatrix::zeros(ages.len(), years.len()), |acc, m| acc + m) / mats.len() as f64;
    let common = bilinear(&pooled, None)?;
    let series: YearSeries = years.iter().copied().zip(common.k.iter().copied()).collect();
    let rw = fit_rwd(&series)?;
    let bk = DVector::from_vec(common.b.clone()) * DVector::from_vec(common.k.clone()).transpose();
    let specific = populations
        .par_iter()
        .zip(mats.par_iter())
        .map(|((c, g), m)| {
            let alpha: Vec<f64> = (0..ages.len()).map(|i| m.row(i).mean()).collect();
            let resid = DMatrix::from_fn(ages.len(), years.len(), |i, j| m[(i, j)] - alpha[i] - bk[(i, j)]);
            // Residuals at rounding level relative to the population's own
            // variation carry no specific factor.
            let spread = DMatrix::from_fn(ages.len(), years.len(), |i, j| m[(i, j)] - alpha[i]).norm();
            let sp = bilinear(&resid, Some(1e-10 * spread))?;
            let ks: YearSeries = years.iter().copied().zip(sp.k.iter().copied()).collect();
            let model = match dynamics {
                SpecificDynamics::Ar1 => KappaModel::Ar1(fit_ar1(&ks)?),
                SpecificDynamics::Rwd => KappaModel::Rwd(fit_rwd(&ks)?),
            };
            Ok(SpecificFactor { country: c.clone(), gender: *g, alpha, beta: sp.b, kappa: sp.k, dynamics: model })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LlFit { ages, years, common: CommonFactor { b: common.b, k: common.k, rw }, specific })
}

/// Point forecasts with `K` on its drift path and each `k_i` on its mean path.
pub fn forecast_ll(fit: &LlFit, horizon: usize) -> Result<RateForecast> {
    if horizon == 0 {
        return Err(Error::Validation("forecast horizon must be at least 1".into()));
    }
    let big_k: Vec<f64> = forecast_rwd(&fit.common.rw, horizon).into_values().collect();
    let first = fit.common.rw.last_year + 1;
    let mut cells = BTreeMap::new();
    for sp in &fit.specific {
        let small_k = sp.dynamics.forecast(horizon);
        for (i, age) in fit.ages.iter().enumerate() {
            for h in 0..horizon {
                let y = sp.alpha[i] + fit.common.b[i] * big_k[h] + sp.beta[i] * small_k[h];
                let key = CellKey { country: sp.country.clone(), gender: sp.gender, age: *age, year: first + h as i32 };
                cells.insert(key, ForecastCell::exact(y));
            }
        }
    }
    Ok(RateForecast { cells, level: None })
}

/// Whether errors are measured on log rates or on rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorScale {
    Log,
    Natural,
}

impl std::str::FromStr for ErrorScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "log" => Ok(ErrorScale::Log),
            "natural" => Ok(ErrorScale::Natural),
            other => Err(Error::Validation(format!("unknown error scale `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationError {
    pub country: String,
    pub gender: Gender,
    pub n: usize,
    pub mse: f64,
}

/// Mean squared forecast error per population over the cells present in
/// both the forecast and the panel.
pub fn mse(forecast: &RateForecast, actual: &MortalityPanel, scale: ErrorScale) -> Result<Vec<PopulationError>> {
    let mut acc: BTreeMap<(String, Gender), (usize, f64)> = BTreeMap::new();
    for (key, cell) in &forecast.cells {
        let Some(obs) = actual.get(key) else { continue };
        let err = match scale {
            ErrorScale::Log => cell.point - obs,
            ErrorScale::Natural => cell.point.exp() - obs.exp(),
        };
        let e = acc.entry((key.country.clone(), key.gender)).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += err * err;
    }
    if acc.is_empty() {
        return Err(Error::Validation("forecast and observations share no cells".into()));
    }
    Ok(acc
        .into_iter()
        .map(|((country, gender), (n, sse))| PopulationError { country, gender, n, mse: sse / n as f64 })
        .collect())
}

/// One population's errors under the mixed model and a benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorComparison {
    pub country: String,
    pub gender: Gender,
    pub lme: f64,
    pub benchmark: f64,
    /// Benchmark error over mixed-model error.
    pub ratio: f64,
}

/// Pairs the two error tables by population.
pub fn compare_errors(lme: &[PopulationError], benchmark: &[PopulationError]) -> Result<Vec<ErrorComparison>> {
    lme.iter()
        .map(|l| {
            let b = benchmark
                .iter()
                .find(|b| b.country == l.country && b.gender == l.gender)
                .ok_or_else(|| Error::Validation(format!("benchmark has no errors for {} {}", l.country, l.gender)))?;
            Ok(ErrorComparison {
                country: l.country.clone(),
                gender: l.gender,
                lme: l.mse,
                benchmark: b.mse,
                ratio: b.mse / l.mse,
            })
        })
        .collect()
}

/// Writes `country,gender,lme,benchmark,ratio`.
pub fn write_comparison_csv<W: Write>(rows: &[ErrorComparison], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_errors_csv<W: Write>(rows: &[PopulationError], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
