//! Best estimate liability and solvency capital of an annuity portfolio
//! under projected mortality.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmarks::LcFit;
use crate::covariates::{simulate_rwd, CovariateSet, CovariateWalks};
use crate::error::{Error, Result};
use crate::mixedlm::FittedMixedModel;
use crate::panel::{AgeGrid, AgeGroup, CellKey, Gender};
use crate::seed::derive_seed;

pub const SCR_PERCENTILE: f64 = 0.995;

/// Which cash flows of a policy enter its liability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Leg {
    Premium,
    Annuity,
    Both,
}

impl FromStr for Leg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "premium" => Ok(Leg::Premium),
            "annuity" => Ok(Leg::Annuity),
            "both" => Ok(Leg::Both),
            other => Err(Error::Validation(format!("unknown policy type `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub year_of_birth: i32,
    pub gender: Gender,
    /// Paid by the insured at the start of each year before retirement.
    pub premium: f64,
    /// Paid to the insured at the start of each year from retirement.
    pub annuity: f64,
    #[serde(rename = "type")]
    pub leg: Leg,
}

/// Reads `year_of_birth,gender,premium,annuity,type`.
pub fn read_portfolio<R: Read>(input: R) -> Result<Vec<Policy>> {
    let mut out = Vec::new();
    for (i, row) in csv::Reader::from_reader(input).deserialize::<Policy>().enumerate() {
        let p = row?;
        if !(p.premium >= 0.0 && p.annuity >= 0.0) {
            return Err(Error::Parse { line: i + 2, message: "premium and annuity must be non-negative".into() });
        }
        out.push(p);
    }
    Ok(out)
}

pub fn write_portfolio<W: Write>(portfolio: &[Policy], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in portfolio {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Multiplicative adjustment of population death rates by integer age.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperienceTable {
    pub factors: BTreeMap<u32, f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExperienceRow {
    age: u32,
    factor: f64,
}

impl ExperienceTable {
    pub fn new(factors: BTreeMap<u32, f64>) -> Result<Self> {
        if let Some((a, f)) = factors.iter().find(|(_, f)| !(**f > 0.0 && f.is_finite())) {
            return Err(Error::Validation(format!("experience factor {f} at age {a} is not positive")));
        }
        Ok(Self { factors })
    }

    pub fn unit(ages: impl IntoIterator<Item = u32>) -> Self {
        Self { factors: ages.into_iter().map(|a| (a, 1.0)).collect() }
    }

    pub fn factor(&self, age: u32) -> Result<f64> {
        self.factors
            .get(&age)
            .copied()
            .ok_or_else(|| Error::Validation(format!("experience table has no factor for age {age}")))
    }

    /// Reads `age,factor`.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut factors = BTreeMap::new();
        for row in csv::Reader::from_reader(input).deserialize::<ExperienceRow>() {
            let row = row?;
            factors.insert(row.age, row.factor);
        }
        Self::new(factors)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for (&age, &factor) in &self.factors {
            w.serialize(ExperienceRow { age, factor })?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValuationConfig {
    pub valuation_year: i32,
    pub interest_rate: f64,
    pub retirement_age: u32,
    pub max_age: u32,
    pub n_sim: usize,
    pub seed: u64,
}

impl Default for ValuationConfig {
    fn default() -> Self {
        Self { valuation_year: 2023, interest_rate: 0.001, retirement_age: 65, max_age: 110, n_sim: 1000, seed: 1 }
    }
}

impl ValuationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.retirement_age >= self.max_age {
            return Err(Error::Validation("retirement_age must be below max_age".into()));
        }
        if !(self.interest_rate > -1.0) {
            return Err(Error::Validation("interest_rate must exceed -1".into()));
        }
        Ok(())
    }

    fn discount(&self) -> f64 {
        1.0 / (1.0 + self.interest_rate)
    }
}

/// Central death rates by gender, integer age and calendar year.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MortalitySurface {
    rates: HashMap<(Gender, u32, i32), f64>,
}

impl MortalitySurface {
    pub fn insert(&mut self, gender: Gender, age: u32, year: i32, rate: f64) {
        self.rates.insert((gender, age, year), rate);
    }

    pub fn rate(&self, gender: Gender, age: u32, year: i32) -> Result<f64> {
        self.rates
            .get(&(gender, age, year))
            .copied()
            .ok_or_else(|| Error::MissingCells(vec![format!("{gender}:{age}:{year}")]))
    }

    /// `m'(x, t) = factor(x) · m(x, t)` on every cell.
    pub fn with_experience(&self, table: &ExperienceTable) -> Result<Self> {
        let mut rates = HashMap::with_capacity(self.rates.len());
        for (&(g, a, y), &m) in &self.rates {
            rates.insert((g, a, y), table.factor(a)? * m);
        }
        Ok(Self { rates })
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }
}

/// `m'(x, t) = factor(x) · m(x, t)`.
pub fn apply_experience(surface: &MortalitySurface, table: &ExperienceTable) -> Result<MortalitySurface> {
    surface.with_experience(table)
}

/// One-year death probability under uniform deaths.
fn one_year_q(m: f64) -> f64 {
    if m.is_infinite() {
        return 1.0;
    }
    (m / (1.0 + 0.5 * m)).min(1.0)
}

/// Present values of the annuity and premium legs of one policy.
fn leg_values(policy: &Policy, surface: &MortalitySurface, cfg: &ValuationConfig) -> Result<(f64, f64)> {
    let current = cfg.valuation_year - policy.year_of_birth;
    if current < 0 {
        return Err(Error::Validation(format!("policy born {} is not alive in {}", policy.year_of_birth, cfg.valuation_year)));
    }
    let current = current as u32;
    if current > cfg.max_age {
        return Ok((0.0, 0.0));
    }
    let v = cfg.discount();
    let (mut annuity, mut premium) = (0.0, 0.0);
    let mut alive = 1.0;
    let mut vj = 1.0;
    for age in current..=cfg.max_age {
        let j = (age - current) as i32;
        if age >= cfg.retirement_age {
            annuity += policy.annuity * alive * vj;
        } else {
            premium += policy.premium * alive * vj;
        }
        if age == cfg.max_age {
            break;
        }
        alive *= 1.0 - one_year_q(surface.rate(policy.gender, age, cfg.valuation_year + j)?);
        vj *= v;
    }
    Ok((annuity, premium))
}

/// Expected present value of future cash flows at the valuation year:
/// annuity payments count positive, premiums negative.
pub fn policy_bel(policy: &Policy, surface: &MortalitySurface, cfg: &ValuationConfig) -> Result<f64> {
    let (annuity, premium) = leg_values(policy, surface, cfg)?;
    Ok(match policy.leg {
        Leg::Annuity => annuity,
        Leg::Premium => -premium,
        Leg::Both => annuity - premium,
    })
}

pub fn portfolio_bel(portfolio: &[Policy], surface: &MortalitySurface, cfg: &ValuationConfig) -> Result<f64> {
    let mut total = 0.0;
    for p in portfolio {
        total += policy_bel(p, surface, cfg)?;
    }
    Ok(total)
}

/// The (gender, age, year) cells whose rates the valuation reads.
pub fn required_cells(portfolio: &[Policy], cfg: &ValuationConfig) -> Vec<(Gender, u32, i32)> {
    let mut cells = BTreeSet::new();
    for p in portfolio {
        let current = cfg.valuation_year - p.year_of_birth;
        if current < 0 {
            continue;
        }
        for age in current as u32..cfg.max_age {
            cells.insert((p.gender, age, cfg.valuation_year + (age as i32 - current)));
        }
    }
    cells.into_iter().collect()
}

/// A projection model that yields log death rates for arbitrary cells,
/// either on its best-estimate path or on a simulated trend path.
pub trait ScenarioModel: Sync {
    fn key(&self, gender: Gender, age: u32, year: i32) -> Result<CellKey>;
    fn best_estimate(&self, cells: &[CellKey]) -> Result<Vec<f64>>;
    fn simulate(&self, cells: &[CellKey], seed: u64) -> Result<Vec<f64>>;
}

fn age_group_of(grid: &AgeGrid, age: u32) -> Result<AgeGroup> {
    grid.groups()
        .iter()
        .find(|g| g.contains(age))
        .copied()
        .ok_or_else(|| Error::Validation(format!("age {age} is outside the model's age grid")))
}

/// Mixed-model projections driven by random walks on the covariates.
pub struct LmeScenario<'a> {
    pub fit: &'a FittedMixedModel,
    pub country: String,
    pub base: CovariateSet,
    pub walks: CovariateWalks,
    pub horizon: usize,
    best: CovariateSet,
}

impl<'a> LmeScenario<'a> {
    pub fn new(fit: &'a FittedMixedModel, country: &str, base: CovariateSet, walks: CovariateWalks, horizon: usize) -> Self {
        let best = walks.forecast_set(&base, horizon);
        Self { fit, country: country.to_string(), base, walks, horizon, best }
    }
}

impl ScenarioModel for LmeScenario<'_> {
    fn key(&self, gender: Gender, age: u32, year: i32) -> Result<CellKey> {
        let age = age_group_of(&self.fit.layout()?.age_grid, age)?;
        Ok(CellKey { country: self.country.clone(), gender, age, year })
    }

    fn best_estimate(&self, cells: &[CellKey]) -> Result<Vec<f64>> {
        self.fit.predict(cells, &self.best)
    }

    fn simulate(&self, cells: &[CellKey], seed: u64) -> Result<Vec<f64>> {
        self.fit.predict(cells, &self.walks.simulate_set(&self.base, self.horizon, seed))
    }
}

/// Lee–Carter projections, one fit per gender.
pub struct LcScenario<'a> {
    pub fits: BTreeMap<Gender, &'a LcFit>,
    pub horizon: usize,
}

impl LcScenario<'_> {
    fn log_rate(&self, fit: &LcFit, key: &CellKey, path: Option<&[f64]>) -> Result<f64> {
        let i = fit
            .ages
            .iter()
            .position(|a| *a == key.age)
            .ok_or_else(|| Error::Validation(format!("age {} is outside the fit", key.age)))?;
        let k = if let Some(t) = fit.years.iter().position(|y| *y == key.year) {
            fit.k[t]
        } else {
            let h = key.year - fit.rw.last_year;
            if h < 1 || h as usize > self.horizon {
                return Err(Error::MissingCells(vec![key.to_string()]));
            }
            match path {
                Some(p) => p[h as usize - 1],
                None => fit.rw.last_value + h as f64 * fit.rw.drift,
            }
        };
        Ok(fit.a[i] + fit.b[i] * k)
    }

    fn fit_of(&self, gender: Gender) -> Result<&LcFit> {
        self.fits.get(&gender).copied().ok_or_else(|| Error::Validation(format!("no Lee–Carter fit for gender {gender}")))
    }
}

impl ScenarioModel for LcScenario<'_> {
    fn key(&self, gender: Gender, age: u32, year: i32) -> Result<CellKey> {
        let fit = self.fit_of(gender)?;
        let age = fit
            .ages
            .iter()
            .find(|g| g.contains(age))
            .copied()
            .ok_or_else(|| Error::Validation(format!("age {age} is outside the fit")))?;
        Ok(CellKey { country: fit.country.clone(), gender, age, year })
    }

    fn best_estimate(&self, cells: &[CellKey]) -> Result<Vec<f64>> {
        cells.iter().map(|c| self.log_rate(self.fit_of(c.gender)?, c, None)).collect()
    }

    fn simulate(&self, cells: &[CellKey], seed: u64) -> Result<Vec<f64>> {
        let paths: BTreeMap<Gender, Vec<f64>> = self
            .fits
            .iter()
            .enumerate()
            .map(|(j, (g, f))| (*g, simulate_rwd(&f.rw, self.horizon, 1, derive_seed(seed, j as u64)).row(0).iter().copied().collect()))
            .collect();
        cells.iter().map(|c| self.log_rate(self.fit_of(c.gender)?, c, paths.get(&c.gender).map(Vec::as_slice))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValuationResult {
    pub bel: f64,
    pub scr: f64,
    pub n_sim: usize,
    pub seed: u64,
    pub percentile: f64,
}

impl ValuationResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn surface_from(
    cells: &[(Gender, u32, i32)],
    log_rates: &[f64],
    experience: Option<&ExperienceTable>,
) -> Result<MortalitySurface> {
    let mut s = MortalitySurface::default();
    for (&(g, a, y), lr) in cells.iter().zip(log_rates) {
        let f = match experience {
            Some(t) => t.factor(a)?,
            None => 1.0,
        };
        s.insert(g, a, y, f * lr.exp());
    }
    Ok(s)
}

/// Nearest-rank empirical quantile.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// BEL on the best-estimate path and SCR as the 99.5% nearest-rank
/// liability over `cfg.n_sim` simulated paths minus the BEL, floored at 0.
/// Path `i` uses the seed derived from stream `i` of `cfg.seed`.
pub fn value_portfolio<M: ScenarioModel>(
    portfolio: &[Policy],
    model: &M,
    experience: Option<&ExperienceTable>,
    cfg: &ValuationConfig,
) -> Result<ValuationResult> {
    cfg.validate()?;
    let cells = required_cells(portfolio, cfg);
    let keys = cells.iter().map(|&(g, a, y)| model.key(g, a, y)).collect::<Result<Vec<_>>>()?;
    let best = surface_from(&cells, &model.best_estimate(&keys)?, experience)?;
    let bel = portfolio_bel(portfolio, &best, cfg)?;
    let mut liabilities = (0..cfg.n_sim)
        .into_par_iter()
        .map(|i| {
            let lr = model.simulate(&keys, derive_seed(cfg.seed, i as u64))?;
            portfolio_bel(portfolio, &surface_from(&cells, &lr, experience)?, cfg)
        })
        .collect::<Result<Vec<f64>>>()?;
    let scr = if liabilities.is_empty() {
        0.0
    } else {
        liabilities.sort_by(f64::total_cmp);
        (nearest_rank(&liabilities, SCR_PERCENTILE) - bel).max(0.0)
    };
    Ok(ValuationResult { bel, scr, n_sim: cfg.n_sim, seed: cfg.seed, percentile: SCR_PERCENTILE })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::fit_lc;
    use crate::mixedlm::{build_design, fit_reml, FitOptions, ModelFormula};
    use crate::synthetic::{generate, SyntheticSetup};
    use proptest::prelude::*;

    fn flat_surface(gender: Gender, ages: std::ops::RangeInclusive<u32>, years: std::ops::RangeInclusive<i32>, m: f64) -> MortalitySurface {
        let mut s = MortalitySurface::default();
        for a in ages {
            for y in years.clone() {
                s.insert(gender, a, y, m);
            }
        }
        s
    }

    fn cfg(retirement_age: u32, max_age: u32, interest_rate: f64) -> ValuationConfig {
        ValuationConfig { valuation_year: 2023, interest_rate, retirement_age, max_age, n_sim: 0, seed: 1 }
    }

    fn annuitant(year_of_birth: i32) -> Policy {
        Policy { year_of_birth, gender: Gender::Male, premium: 0.0, annuity: 1.0, leg: Leg::Annuity }
    }

    #[test]
    fn zero_mortality_counts_payments() {
        let c = cfg(65, 110, 0.0);
        let s = flat_surface(Gender::Male, 0..=110, 2023..=2200, 0.0);
        let bel = policy_bel(&annuitant(2023 - 65), &s, &c).unwrap();
        assert_eq!(bel, 46.0);
        // Ten years to retirement: the same payments, later.
        assert_eq!(policy_bel(&annuitant(2023 - 55), &s, &c).unwrap(), 46.0);
        let saver = Policy { premium: 1.0, annuity: 0.0, leg: Leg::Premium, ..annuitant(2023 - 55) };
        assert_eq!(policy_bel(&saver, &s, &c).unwrap(), -10.0);
        assert_eq!(policy_bel(&annuitant(2023 - 111), &s, &c).unwrap(), 0.0);
        assert!(policy_bel(&annuitant(2024), &s, &c).is_err());
    }

    #[test]
    fn certain_death_leaves_only_the_first_payment() {
        let c = cfg(65, 110, 0.03);
        let mut s = flat_surface(Gender::Male, 0..=110, 2023..=2200, 0.01);
        s.insert(Gender::Male, 70, 2023, f64::INFINITY);
        assert_eq!(policy_bel(&annuitant(2023 - 70), &s, &c).unwrap(), 1.0);
        s.insert(Gender::Male, 60, 2023, f64::INFINITY);
        assert_eq!(policy_bel(&annuitant(2023 - 60), &s, &c).unwrap(), 0.0);
    }

    #[test]
    fn matches_enumeration_over_death_times() {
        // Ages 108, 109, 110 with q = 0.1, 0.2, 1 and payments from 108.
        let qs = [0.1, 0.2, 1.0];
        let i = 0.001;
        let c = cfg(100, 110, i);
        let mut s = MortalitySurface::default();
        for (j, q) in qs.iter().enumerate() {
            let m = if *q == 1.0 { f64::INFINITY } else { q / (1.0 - 0.5 * q) };
            s.insert(Gender::Female, 108 + j as u32, 2023 + j as i32, m);
        }
        let p = Policy { gender: Gender::Female, annuity: 100.0, ..annuitant(2023 - 108) };
        let v = 1.0 / (1.0 + i);
        // Dying in year d (0-based) means payments at times 0..=d; surviving
        // past the table is impossible since the last age is terminal.
        let mut expected = 0.0;
        let mut reach = 1.0;
        for d in 0..3 {
            let die = if d == 2 { reach } else { reach * qs[d] };
            let paid: f64 = (0..=d).map(|t| 100.0 * v.powi(t as i32)).sum();
            expected += die * paid;
            reach *= 1.0 - qs[d];
        }
        let got = policy_bel(&p, &s, &c).unwrap();
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }

    #[test]
    fn experience_factors() {
        let table = ExperienceTable::new([(0, 0.40), (110, 1.05)].into()).unwrap();
        let mut s = MortalitySurface::default();
        s.insert(Gender::Female, 0, 2020, 0.01);
        s.insert(Gender::Female, 110, 2020, 0.6);
        let adj = apply_experience(&s, &table).unwrap();
        assert!((adj.rate(Gender::Female, 0, 2020).unwrap() - 0.004).abs() < 1e-15);
        assert!((adj.rate(Gender::Female, 110, 2020).unwrap() - 0.63).abs() < 1e-15);
        assert_eq!(apply_experience(&s, &ExperienceTable::unit([0, 110])).unwrap(), s);
        s.insert(Gender::Female, 50, 2020, 0.01);
        assert!(apply_experience(&s, &table).is_err());
        assert!(ExperienceTable::new([(3, 0.0)].into()).is_err());
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        assert_eq!(ExperienceTable::read_csv(buf.as_slice()).unwrap(), table);
    }

    #[test]
    fn portfolio_csv_round_trip() {
        let text = "year_of_birth,gender,premium,annuity,type\n1965,M,6925,23700,both\n1958,F,5540,23700,annuity\n";
        let p = read_portfolio(text.as_bytes()).unwrap();
        assert_eq!(p[1].gender, Gender::Female);
        assert_eq!(p[1].leg, Leg::Annuity);
        let mut buf = Vec::new();
        write_portfolio(&p, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), text.replace("6925,", "6925.0,").replace("5540,", "5540.0,").replace("23700,", "23700.0,"));
        assert!(read_portfolio("year_of_birth,gender,premium,annuity,type\n1965,M,-1,0,both\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn additivity_homogeneity_and_monotonicity(
            births in prop::collection::vec(1930i32..2000, 1..6),
            m in 0.001f64..0.2,
            bump_age in 23u32..109,
            scale_pow in -3i32..4,
        ) {
            let c = cfg(65, 110, 0.02);
            let s = flat_surface(Gender::Male, 0..=110, 2023..=2130, m);
            let portfolio: Vec<Policy> = births
                .iter()
                .map(|&y| Policy { year_of_birth: y, gender: Gender::Male, premium: 500.0, annuity: 2000.0, leg: Leg::Both })
                .collect();
            let total = portfolio_bel(&portfolio, &s, &c).unwrap();
            let parts: f64 = portfolio.iter().map(|p| policy_bel(p, &s, &c).unwrap()).sum();
            prop_assert_eq!(total, parts);
            let doubled: Vec<Policy> = portfolio.iter().flat_map(|p| [p.clone(), p.clone()]).collect();
            let single = policy_bel(&portfolio[0], &s, &c).unwrap();
            prop_assert_eq!(portfolio_bel(&doubled[..2], &s, &c).unwrap(), 2.0 * single);
            let k = 2f64.powi(scale_pow);
            let scaled: Vec<Policy> = portfolio.iter().map(|p| Policy { premium: k * p.premium, annuity: k * p.annuity, ..p.clone() }).collect();
            prop_assert_eq!(portfolio_bel(&scaled, &s, &c).unwrap(), k * total);

            let mut worse = s.clone();
            for y in 2023..=2130 {
                worse.insert(Gender::Male, bump_age, y, 2.0 * m);
            }
            for p in &portfolio {
                let (a0, p0) = leg_values(p, &s, &c).unwrap();
                let (a1, p1) = leg_values(p, &worse, &c).unwrap();
                prop_assert!(a1 <= a0 && p1 <= p0);
            }
        }
    }

    fn czech_like_fit() -> (FittedMixedModel, CovariateSet, LcFit, LcFit) {
        let setup = SyntheticSetup {
            countries: vec!["CZE".into()],
            age_grid: AgeGrid::hmd_single_year().restrict(45, 110).unwrap(),
            first_year: 1990,
            last_year: 2019,
            trend_sd: 0.02,
            ..Default::default()
        };
        let panel = generate(&setup).unwrap().panel(&setup).unwrap();
        let covs = CovariateSet::from_panel(&panel, 65).unwrap();
        let formula: ModelFormula = "age + gender:age + I(k_t) + (1 + I(k_t) | country:gender:age)".parse().unwrap();
        let design = build_design(&panel, &covs, &formula, 65).unwrap();
        let fit = fit_reml(&design, &FitOptions::default()).unwrap();
        let lc_f = fit_lc(&panel, "CZE", Gender::Female).unwrap();
        let lc_m = fit_lc(&panel, "CZE", Gender::Male).unwrap();
        (fit, covs, lc_f, lc_m)
    }

    fn portfolio() -> Vec<Policy> {
        [(1965, 6925.0), (1958, 5540.0), (1943, 7632.0), (1971, 7991.0), (1936, 8812.0)]
            .iter()
            .map(|&(y, premium)| Policy { year_of_birth: y, gender: Gender::Male, premium, annuity: 23700.0, leg: Leg::Both })
            .collect()
    }

    #[test]
    fn scenario_valuation() {
        let (fit, covs, lc_f, lc_m) = czech_like_fit();
        let walks = CovariateWalks::fit(&covs).unwrap();
        let horizon = 2023 + 120 - 2019;
        let c = ValuationConfig { n_sim: 300, ..Default::default() };
        let book = portfolio();

        let still = LmeScenario::new(&fit, "CZE", covs.clone(), walks.scaled_variance(0.0), horizon);
        let r0 = value_portfolio(&book, &still, None, &c).unwrap();
        assert_eq!(r0.scr, 0.0);
        assert!(r0.bel > 0.0);

        let lme = LmeScenario::new(&fit, "CZE", covs.clone(), walks.clone(), horizon);
        let r1 = value_portfolio(&book, &lme, None, &c).unwrap();
        assert_eq!(r1, value_portfolio(&book, &lme, None, &c).unwrap());
        assert_eq!(r1.bel, r0.bel);
        let louder = LmeScenario::new(&fit, "CZE", covs.clone(), walks.scaled_variance(4.0), horizon);
        let r4 = value_portfolio(&book, &louder, None, &c).unwrap();
        assert!(r4.scr > r1.scr, "{} vs {}", r4.scr, r1.scr);

        let lc = LcScenario { fits: [(Gender::Female, &lc_f), (Gender::Male, &lc_m)].into(), horizon };
        let rl = value_portfolio(&book, &lc, None, &c).unwrap();
        assert!(rl.bel > 0.0 && rl.scr >= 0.0);

        let favourable = ExperienceTable::new((0..=110).map(|a| (a, 0.7)).collect()).unwrap();
        let rf = value_portfolio(&book, &lme, Some(&favourable), &c).unwrap();
        assert!(rf.bel > r1.bel);

        let json = r1.to_json().unwrap();
        for field in ["bel", "scr", "n_sim", "seed", "percentile"] {
            assert!(json.contains(&format!("\"{field}\"")));
        }
    }

    #[test]
    fn nearest_rank_percentile() {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 0.995), 995.0);
        assert_eq!(nearest_rank(&v[..10], 0.995), 10.0);
        assert_eq!(nearest_rank(&[3.0], 0.995), 3.0);
    }
}
