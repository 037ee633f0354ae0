//! Mortality covariates (the global level `k_t` and per-country age-segmented
//! levels `k_ct`) and the random walks with drift used to extrapolate them.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{Gender, MortalityPanel};
use crate::seed::stream_rng;

pub type YearSeries = BTreeMap<i32, f64>;

/// Default boundary between the young and old age segments.
pub const DEFAULT_SPLIT_AGE: u32 = 40;

/// Which half of the age range a group belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Young,
    Old,
}

impl Segment {
    /// Groups are assigned by their lower bound.
    pub fn of(age_lower: u32, split_age: u32) -> Self {
        if age_lower <= split_age {
            Segment::Young
        } else {
            Segment::Old
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Segment::Young => "young",
            Segment::Old => "old",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentedSeries {
    pub country: String,
    pub split_age: u32,
    pub young: YearSeries,
    pub old: YearSeries,
}

impl SegmentedSeries {
    pub fn segment(&self, segment: Segment) -> &YearSeries {
        match segment {
            Segment::Young => &self.young,
            Segment::Old => &self.old,
        }
    }

    fn segment_mut(&mut self, segment: Segment) -> &mut YearSeries {
        match segment {
            Segment::Young => &mut self.young,
            Segment::Old => &mut self.old,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GlobalSeries {
    pub values: YearSeries,
}

/// ARIMA(0,1,0) with drift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomWalkModel {
    pub drift: f64,
    pub innovation_variance: f64,
    pub last_year: i32,
    pub last_value: f64,
}

impl RandomWalkModel {
    /// Same walk with the innovation variance multiplied by `factor`.
    pub fn scaled_variance(mut self, factor: f64) -> Self {
        self.innovation_variance *= factor;
        self
    }
}

fn check_split(panel: &MortalityPanel, split_age: u32) -> Result<()> {
    let groups = panel.age_grid().groups();
    if !groups.iter().any(|g| g.lower == split_age) {
        return Err(Error::Validation(format!(
            "split age {split_age} is not the lower bound of an age group"
        )));
    }
    if !groups.iter().any(|g| g.lower > split_age) {
        return Err(Error::Validation(format!("no age group above split age {split_age}")));
    }
    Ok(())
}

/// Per-country young/old averages of log rates over genders and groups.
pub fn country_covariate(
    panel: &MortalityPanel,
    country: &str,
    split_age: u32,
) -> Result<SegmentedSeries> {
    check_split(panel, split_age)?;
    let genders: BTreeSet<Gender> = panel
        .records()
        .iter()
        .filter(|r| r.key.country == country)
        .map(|r| r.key.gender)
        .collect();
    if genders.is_empty() {
        return Err(Error::Validation(format!("no records for country {country}")));
    }
    let per_segment = |s: Segment| {
        panel.age_grid().groups().iter().filter(|g| Segment::of(g.lower, split_age) == s).count()
            * genders.len()
    };
    let expected = [per_segment(Segment::Young), per_segment(Segment::Old)];
    let mut sums: BTreeMap<(i32, Segment), (f64, usize)> = BTreeMap::new();
    for r in panel.records().iter().filter(|r| r.key.country == country) {
        let e = sums.entry((r.key.year, Segment::of(r.key.age.lower, split_age))).or_default();
        e.0 += r.log_rate;
        e.1 += 1;
    }
    let mut out = SegmentedSeries {
        country: country.to_string(),
        split_age,
        young: YearSeries::new(),
        old: YearSeries::new(),
    };
    let mut incomplete = Vec::new();
    for year in panel.years() {
        for (seg, want) in [(Segment::Young, expected[0]), (Segment::Old, expected[1])] {
            match sums.get(&(year, seg)) {
                Some(&(sum, n)) if n == want => {
                    out.segment_mut(seg).insert(year, sum / n as f64);
                }
                _ => incomplete.push(format!("{country}:{}:{year}", seg.label())),
            }
        }
    }
    if !incomplete.is_empty() {
        return Err(Error::MissingCells(incomplete));
    }
    Ok(out)
}

/// Year-wise average of every log rate in a rectangular panel.
pub fn global_covariate(panel: &MortalityPanel) -> Result<GlobalSeries> {
    if !panel.is_rectangular() {
        return Err(Error::Validation("global covariate needs a rectangular panel".into()));
    }
    let mut sums: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
    for r in panel.records() {
        let e = sums.entry(r.key.year).or_default();
        e.0 += r.log_rate;
        e.1 += 1;
    }
    Ok(GlobalSeries { values: sums.into_iter().map(|(y, (s, n))| (y, s / n as f64)).collect() })
}

fn check_contiguous(series: &YearSeries) -> Result<()> {
    let years: Vec<i32> = series.keys().copied().collect();
    if years.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(Error::Validation("series years are not contiguous".into()));
    }
    if series.values().any(|v| !v.is_finite()) {
        return Err(Error::Validation("series has non-finite values".into()));
    }
    Ok(())
}

/// Drift and innovation variance from first differences.
pub fn fit_rwd(series: &YearSeries) -> Result<RandomWalkModel> {
    if series.len() < 3 {
        return Err(Error::Validation(format!(
            "random walk needs at least 3 points, got {}",
            series.len()
        )));
    }
    check_contiguous(series)?;
    let values: Vec<f64> = series.values().copied().collect();
    let n = values.len();
    let (&last_year, &last_value) = series.iter().next_back().expect("non-empty");
    let drift = (values[n - 1] - values[0]) / (n - 1) as f64;
    let ss: f64 = values.windows(2).map(|w| (w[1] - w[0] - drift).powi(2)).sum();
    Ok(RandomWalkModel { drift, innovation_variance: ss / (n - 2) as f64, last_year, last_value })
}

/// Point forecasts for years `last_year + 1 ..= last_year + horizon`.
pub fn forecast_rwd(model: &RandomWalkModel, horizon: usize) -> YearSeries {
    (1..=horizon)
        .map(|h| (model.last_year + h as i32, model.last_value + h as f64 * model.drift))
        .collect()
}

/// `n_paths × horizon` simulated continuations; path `i` uses stream `i` of
/// `seed`.
pub fn simulate_rwd(
    model: &RandomWalkModel,
    horizon: usize,
    n_paths: usize,
    seed: u64,
) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> =
        (0..n_paths).into_par_iter().map(|i| simulate_path(model, horizon, seed, i as u64)).collect();
    DMatrix::from_fn(n_paths, horizon, |i, j| rows[i][j])
}

fn simulate_path(model: &RandomWalkModel, horizon: usize, seed: u64, stream: u64) -> Vec<f64> {
    let sd = model.innovation_variance.max(0.0).sqrt();
    let mut rng = stream_rng(seed, stream);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    // Shocks accumulate apart from the drift line so that a zero-variance
    // walk reproduces `forecast_rwd` exactly.
    let mut shocks = 0.0;
    (1..=horizon)
        .map(|h| {
            if sd > 0.0 {
                shocks += sd * normal.sample(&mut rng);
            }
            model.last_value + h as f64 * model.drift + shocks
        })
        .collect()
}

/// All covariate series a model may reference.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CovariateSet {
    pub global: GlobalSeries,
    pub countries: BTreeMap<String, SegmentedSeries>,
    /// Additional group-level covariates: name → country → year → value.
    pub extra: BTreeMap<String, BTreeMap<String, YearSeries>>,
}

/// Label used for the global series in covariate CSV files.
pub const GLOBAL_COUNTRY: &str = "ALL";

impl CovariateSet {
    /// Global and per-country series from a full (uncleaned) panel.
    pub fn from_panel(panel: &MortalityPanel, split_age: u32) -> Result<Self> {
        let global = global_covariate(panel)?;
        let countries = panel
            .countries()
            .par_iter()
            .map(|c| country_covariate(panel, c, split_age).map(|s| (c.clone(), s)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Self { global, countries, extra: BTreeMap::new() })
    }

    pub fn with_extra(mut self, name: &str, values: BTreeMap<String, YearSeries>) -> Self {
        self.extra.insert(name.to_string(), values);
        self
    }

    pub fn global_at(&self, year: i32) -> Result<f64> {
        self.global
            .values
            .get(&year)
            .copied()
            .ok_or_else(|| Error::Validation(format!("global covariate missing year {year}")))
    }

    pub fn country_at(&self, country: &str, segment: Segment, year: i32) -> Result<f64> {
        self.countries
            .get(country)
            .and_then(|s| s.segment(segment).get(&year))
            .copied()
            .ok_or_else(|| {
                Error::Validation(format!(
                    "country covariate missing for {country} {} {year}",
                    segment.label()
                ))
            })
    }

    pub fn extra_at(&self, name: &str, country: &str, year: i32) -> Result<f64> {
        self.extra
            .get(name)
            .and_then(|m| m.get(country))
            .and_then(|s| s.get(&year))
            .copied()
            .ok_or_else(|| Error::Validation(format!("covariate {name} missing for {country} {year}")))
    }

    /// Restricts every series to years `<= last_year`.
    pub fn truncated(&self, last_year: i32) -> Self {
        let cut = |s: &YearSeries| s.range(..=last_year).map(|(&y, &v)| (y, v)).collect();
        Self {
            global: GlobalSeries { values: cut(&self.global.values) },
            countries: self
                .countries
                .iter()
                .map(|(c, s)| {
                    let mut s2 = s.clone();
                    s2.young = cut(&s.young);
                    s2.old = cut(&s.old);
                    (c.clone(), s2)
                })
                .collect(),
            extra: self
                .extra
                .iter()
                .map(|(n, m)| (n.clone(), m.iter().map(|(c, s)| (c.clone(), cut(s))).collect()))
                .collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["country", "segment", "year", "value"])?;
        for (&y, &v) in &self.global.values {
            w.write_record([GLOBAL_COUNTRY, "global", &y.to_string(), &format!("{v:?}")])?;
        }
        for (c, s) in &self.countries {
            for seg in [Segment::Young, Segment::Old] {
                for (&y, &v) in s.segment(seg) {
                    w.write_record([c, seg.label(), &y.to_string(), &format!("{v:?}")])?;
                }
            }
        }
        for (name, m) in &self.extra {
            for (c, s) in m {
                for (&y, &v) in s {
                    w.write_record([c, name, &y.to_string(), &format!("{v:?}")])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the global series as `year,value`.
    pub fn write_global_trend_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["year", "value"])?;
        for (&y, &v) in &self.global.values {
            w.write_record([y.to_string(), format!("{v:?}")])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the country series wide, one `{country}_young` and
    /// `{country}_old` column per country and one row per year present in
    /// every column.
    pub fn write_country_trends_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["year".to_string()];
        let mut columns: Vec<&YearSeries> = Vec::new();
        for (c, s) in &self.countries {
            for seg in [Segment::Young, Segment::Old] {
                header.push(format!("{c}_{}", seg.label()));
                columns.push(s.segment(seg));
            }
        }
        w.write_record(&header)?;
        let years: Vec<i32> = match columns.first() {
            Some(first) => first.keys().copied().filter(|y| columns.iter().all(|c| c.contains_key(y))).collect(),
            None => Vec::new(),
        };
        for y in years {
            let mut row = vec![y.to_string()];
            row.extend(columns.iter().map(|c| format!("{:?}", c[&y])));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `country,segment,year,value` rows. Segments other than
    /// `global`, `young` and `old` are extra covariates named by the segment.
    pub fn read_csv<R: Read>(reader: R, split_age: u32) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut set = CovariateSet::default();
        for (i, row) in rdr.records().enumerate() {
            let row = row?;
            let line = i + 2;
            let perr = |m: &str| Error::Parse { line, message: m.to_string() };
            if row.len() != 4 {
                return Err(perr("expected 4 fields"));
            }
            let country = row[0].to_string();
            let year: i32 = row[2].parse().map_err(|_| perr("bad year"))?;
            let value: f64 = row[3].parse().map_err(|_| perr("bad value"))?;
            let new_country = |c: &String| SegmentedSeries {
                country: c.clone(),
                split_age,
                young: YearSeries::new(),
                old: YearSeries::new(),
            };
            match &row[1] {
                "global" => {
                    set.global.values.insert(year, value);
                }
                "young" | "old" => {
                    let seg = if &row[1] == "young" { Segment::Young } else { Segment::Old };
                    set.countries
                        .entry(country.clone())
                        .or_insert_with(|| new_country(&country))
                        .segment_mut(seg)
                        .insert(year, value);
                }
                name => {
                    set.extra
                        .entry(name.to_string())
                        .or_default()
                        .entry(country)
                        .or_default()
                        .insert(year, value);
                }
            }
        }
        Ok(set)
    }
}

/// Random walks fitted to every series of a [`CovariateSet`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CovariateWalks {
    pub global: Option<RandomWalkModel>,
    pub countries: BTreeMap<String, BTreeMap<Segment, RandomWalkModel>>,
    pub extra: BTreeMap<String, BTreeMap<String, RandomWalkModel>>,
}

impl CovariateWalks {
    pub fn fit(set: &CovariateSet) -> Result<Self> {
        let global =
            if set.global.values.is_empty() { None } else { Some(fit_rwd(&set.global.values)?) };
        let mut countries = BTreeMap::new();
        for (c, s) in &set.countries {
            let mut m = BTreeMap::new();
            m.insert(Segment::Young, fit_rwd(&s.young)?);
            m.insert(Segment::Old, fit_rwd(&s.old)?);
            countries.insert(c.clone(), m);
        }
        let mut extra = BTreeMap::new();
        for (name, per) in &set.extra {
            let mut m = BTreeMap::new();
            for (c, s) in per {
                m.insert(c.clone(), fit_rwd(s)?);
            }
            extra.insert(name.clone(), m);
        }
        Ok(Self { global, countries, extra })
    }

    fn walks(&self) -> Vec<&RandomWalkModel> {
        let mut out: Vec<&RandomWalkModel> = self.global.iter().collect();
        out.extend(self.countries.values().flat_map(|m| m.values()));
        out.extend(self.extra.values().flat_map(|m| m.values()));
        out
    }

    /// Every walk with its innovation variance multiplied by `factor`.
    pub fn scaled_variance(&self, factor: f64) -> Self {
        let mut out = self.clone();
        if let Some(g) = out.global.as_mut() {
            *g = g.scaled_variance(factor);
        }
        for m in out.countries.values_mut() {
            for w in m.values_mut() {
                *w = w.scaled_variance(factor);
            }
        }
        for m in out.extra.values_mut() {
            for w in m.values_mut() {
                *w = w.scaled_variance(factor);
            }
        }
        out
    }

    pub fn max_innovation_variance(&self) -> f64 {
        self.walks().iter().map(|w| w.innovation_variance).fold(0.0, f64::max)
    }

    /// `base` extended by `horizon` years of drift forecasts.
    pub fn forecast_set(&self, base: &CovariateSet, horizon: usize) -> CovariateSet {
        self.extend(base, |w, _| forecast_rwd(w, horizon))
    }

    /// `base` extended by one simulated path per walk. Walk `j` uses stream
    /// `j` of `seed`, in the order global, countries, extras.
    pub fn simulate_set(&self, base: &CovariateSet, horizon: usize, seed: u64) -> CovariateSet {
        self.extend(base, |w, j| {
            simulate_path(w, horizon, seed, j as u64)
                .into_iter()
                .enumerate()
                .map(|(h, v)| (w.last_year + 1 + h as i32, v))
                .collect()
        })
    }

    fn extend<F: Fn(&RandomWalkModel, usize) -> YearSeries>(
        &self,
        base: &CovariateSet,
        continuation: F,
    ) -> CovariateSet {
        let mut out = base.clone();
        let mut j = 0;
        if let Some(g) = &self.global {
            out.global.values.extend(continuation(g, j));
            j += 1;
        }
        for (c, m) in &self.countries {
            for (seg, w) in m {
                if let Some(s) = out.countries.get_mut(c) {
                    s.segment_mut(*seg).extend(continuation(w, j));
                }
                j += 1;
            }
        }
        for (name, m) in &self.extra {
            for (c, w) in m {
                if let Some(s) = out.extra.get_mut(name).and_then(|e| e.get_mut(c)) {
                    s.extend(continuation(w, j));
                }
                j += 1;
            }
        }
        out
    }
}
