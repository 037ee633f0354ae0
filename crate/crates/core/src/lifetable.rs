//! Period life tables and life-expectancy series from death-rate surfaces.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{AgeGrid, AgeGroup, CellKey, Gender};
use crate::projection::RateForecast;

pub const RADIX: f64 = 100_000.0;

/// Share of a closed interval lived by those who die in it.
const FRACTION_LIVED: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifeTableRow {
    pub age: AgeGroup,
    pub m: f64,
    pub q: f64,
    pub l: f64,
    /// Person-years lived in the interval.
    pub big_l: f64,
    pub e: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifeTable {
    pub rows: Vec<LifeTableRow>,
}

/// Death probability of a closed group of `width` years at rate `m`,
/// capped at 1.
pub fn death_probability(m: f64, width: f64) -> f64 {
    if m.is_infinite() {
        return 1.0;
    }
    (width * m / (1.0 + (1.0 - FRACTION_LIVED) * width * m)).min(1.0)
}

/// Builds the table for one population-year. `rates[i]` is the central
/// death rate of `ages[i]`; only the last group may be open.
pub fn build_life_table(ages: &[AgeGroup], rates: &[f64]) -> Result<LifeTable> {
    if ages.is_empty() || ages.len() != rates.len() {
        return Err(Error::Validation("life table needs one rate per age group".into()));
    }
    if let Some((i, m)) = rates.iter().enumerate().find(|(_, m)| !(**m > 0.0) || m.is_nan()) {
        return Err(Error::Validation(format!("death rate {m} at age {} is not positive", ages[i])));
    }
    if ages[..ages.len() - 1].iter().any(AgeGroup::is_open) {
        return Err(Error::Validation("only the last age group may be open".into()));
    }
    let mut rows = Vec::with_capacity(ages.len());
    let mut l = RADIX;
    for (age, &m) in ages.iter().zip(rates) {
        let (q, big_l) = match age.years() {
            Some(w) => {
                let n = w as f64;
                let q = death_probability(m, n);
                (q, n * (l - (1.0 - FRACTION_LIVED) * l * q))
            }
            None => (1.0, l / m),
        };
        rows.push(LifeTableRow { age: *age, m, q, l, big_l, e: 0.0 });
        l *= 1.0 - q;
    }
    // Conditional recursion keeps e defined where no survivors remain.
    let mut next_e = 0.0;
    for row in rows.iter_mut().rev() {
        let lived = match row.age.years() {
            Some(w) => w as f64 * (1.0 - (1.0 - FRACTION_LIVED) * row.q),
            None => 1.0 / row.m,
        };
        row.e = lived + (1.0 - row.q) * next_e;
        next_e = row.e;
    }
    Ok(LifeTable { rows })
}

impl LifeTable {
    pub fn e0(&self) -> f64 {
        self.rows[0].e
    }

    /// Expected years lived before the open group, per newborn.
    pub fn temporary_expectancy(&self) -> f64 {
        self.rows.iter().filter(|r| !r.age.is_open()).map(|r| r.big_l).sum::<f64>() / RADIX
    }

    /// Rates implied by the death probabilities of closed groups; the open
    /// group keeps its own rate.
    pub fn implied_rates(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| match r.age.years() {
                Some(w) => r.q / (w as f64 * (1.0 - (1.0 - FRACTION_LIVED) * r.q)),
                None => r.m,
            })
            .collect()
    }

    /// Writes `age_lower,m,q,l,e`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["age_lower", "m", "q", "l", "e"])?;
        for r in &self.rows {
            w.write_record([r.age.lower.to_string(), r.m.to_string(), r.q.to_string(), r.l.to_string(), r.e.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectancyPoint {
    pub year: i32,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Life expectancy at birth per forecast year. The point comes from the
/// point rates, the lower band from the upper rate bound and the upper band
/// from the lower rate bound.
pub fn life_expectancy_series(
    forecast: &RateForecast,
    country: &str,
    gender: Gender,
    grid: &AgeGrid,
) -> Result<Vec<ExpectancyPoint>> {
    let years: Vec<i32> = forecast
        .cells
        .keys()
        .filter(|k| k.country == country && k.gender == gender)
        .map(|k| k.year)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if years.is_empty() {
        return Err(Error::Validation(format!("forecast has no cells for {country} {gender}")));
    }
    let ages = grid.groups();
    years
        .par_iter()
        .map(|&year| {
            let mut point = Vec::with_capacity(ages.len());
            let mut high = Vec::with_capacity(ages.len());
            let mut low = Vec::with_capacity(ages.len());
            for age in ages {
                let key = CellKey { country: country.to_string(), gender, age: *age, year };
                let c = forecast.get(&key).ok_or_else(|| Error::MissingCells(vec![key.to_string()]))?;
                point.push(c.point.exp());
                high.push(c.upper.exp());
                low.push(c.lower.exp());
            }
            let e = |r: &[f64]| build_life_table(ages, r).map(|t| t.e0());
            Ok(ExpectancyPoint { year, point: e(&point)?, lower: e(&high)?, upper: e(&low)? })
        })
        .collect()
}

/// Writes `year,point,lower,upper`.
pub fn write_series_csv<W: Write>(series: &[ExpectancyPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in series {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::ForecastCell;
    use proptest::prelude::*;

    fn single_year() -> Vec<AgeGroup> {
        AgeGrid::hmd_single_year().groups().to_vec()
    }

    /// Simpson's rule on [0, b] with `n` (even) panels.
    fn simpson(f: impl Fn(f64) -> f64, b: f64, n: usize) -> f64 {
        let h = b / n as f64;
        let mut s = f(0.0) + f(b);
        for i in 1..n {
            s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn constant_hazard_matches_the_exponential_lifetime() {
        let mu = 0.01;
        let ages = single_year();
        assert_eq!(ages.last().unwrap().lower, 110);
        let table = build_life_table(&ages, &vec![mu; ages.len()]).unwrap();
        let survival = |x: f64| (-mu * x).exp();
        let to_110 = simpson(survival, 110.0, 2200);
        assert!((table.temporary_expectancy() - to_110).abs() < 0.5, "{}", table.temporary_expectancy());
        let with_tail = to_110 + survival(110.0) / mu;
        assert!((table.e0() - with_tail).abs() < 0.5, "{}", table.e0());
    }

    #[test]
    fn overwhelming_infant_mortality() {
        let ages = single_year();
        let mut rates = vec![0.01; ages.len()];
        rates[0] = 1e300;
        let t = build_life_table(&ages, &rates).unwrap();
        assert_eq!(t.rows[0].q, 1.0);
        assert!((t.e0() - 0.5).abs() < 1e-12);
        assert_eq!(t.rows[1].l, 0.0);
    }

    #[test]
    fn structural_identities() {
        let ages = AgeGrid::hmd_five_year().groups().to_vec();
        let rates: Vec<f64> = ages.iter().map(|a| 0.0002 * (0.085 * a.lower as f64).exp() + 0.0004).collect();
        let t = build_life_table(&ages, &rates).unwrap();
        for w in t.rows.windows(2) {
            assert_eq!(w[1].l, w[0].l * (1.0 - w[0].q));
        }
        let last = t.rows.last().unwrap();
        assert_eq!(last.q, 1.0);
        assert_eq!(last.e, 1.0 / last.m);
        let again = build_life_table(&ages, &t.implied_rates()).unwrap();
        for (a, b) in t.rows.iter().zip(&again.rows) {
            assert!((a.q - b.q).abs() < 1e-12);
        }
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("age_lower,m,q,l,e\n0,"));
        assert_eq!(text.lines().count(), ages.len() + 1);
    }

    #[test]
    fn invalid_rates_are_rejected() {
        let ages = vec![AgeGroup::closed(0, 1), AgeGroup::open(1)];
        assert!(build_life_table(&ages, &[0.0, 0.1]).is_err());
        assert!(build_life_table(&ages, &[-0.1, 0.1]).is_err());
        assert!(build_life_table(&ages, &[f64::NAN, 0.1]).is_err());
        assert!(build_life_table(&[AgeGroup::open(0), AgeGroup::open(1)], &[0.1, 0.1]).is_err());
    }

    proptest! {
        #[test]
        fn table_invariants(logs in prop::collection::vec(-9.0f64..0.5, 24), bump in 0usize..24, factor in 1.0f64..5.0) {
            let ages = AgeGrid::hmd_five_year().groups().to_vec();
            let rates: Vec<f64> = logs.iter().map(|v| v.exp()).collect();
            let t = build_life_table(&ages, &rates).unwrap();
            for (i, r) in t.rows.iter().enumerate() {
                prop_assert!((0.0..=1.0).contains(&r.q) && r.e >= 0.0);
                if i > 0 {
                    prop_assert!(r.l <= t.rows[i - 1].l);
                }
            }
            let mut worse = rates.clone();
            worse[bump] *= factor;
            let w = build_life_table(&ages, &worse).unwrap();
            for i in 0..=bump {
                prop_assert!(w.rows[i].e <= t.rows[i].e + 1e-12);
            }
        }
    }

    fn forecast(width: impl Fn(i32) -> f64) -> (RateForecast, AgeGrid) {
        let grid = AgeGrid::hmd_five_year();
        let mut cells = std::collections::BTreeMap::new();
        for year in 2020..2030 {
            for age in grid.groups() {
                let point = -9.0 + 0.08 * age.lower as f64 - 0.01 * (year - 2020) as f64;
                let w = width(year);
                let key = CellKey { country: "AAA".into(), gender: Gender::Female, age: *age, year };
                cells.insert(key, ForecastCell { point, lower: point - w, upper: point + w });
            }
        }
        (RateForecast { cells, level: Some(0.95) }, grid)
    }

    #[test]
    fn expectancy_bands() {
        let (flat, grid) = forecast(|_| 0.0);
        let s = life_expectancy_series(&flat, "AAA", Gender::Female, &grid).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.iter().all(|p| p.lower == p.point && p.upper == p.point));
        assert!(s.windows(2).all(|w| w[1].point > w[0].point));

        let (wide, _) = forecast(|y| 0.02 * (y - 2019) as f64);
        let s = life_expectancy_series(&wide, "AAA", Gender::Female, &grid).unwrap();
        let mut last = 0.0;
        for p in &s {
            assert!(p.lower <= p.point && p.point <= p.upper);
            let width = p.upper - p.lower;
            assert!(width > last);
            last = width;
        }
        let mut buf = Vec::new();
        write_series_csv(&s, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("year,point,lower,upper\n2020,"));
        assert!(life_expectancy_series(&wide, "BBB", Gender::Female, &grid).is_err());
    }
}
