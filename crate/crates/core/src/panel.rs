//! Death-rate ingestion: HMD-style `Mx` text files and the long-format
//! mortality panel built from them.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    #[serde(rename = "F")]
    Female,
    #[serde(rename = "M")]
    Male,
}

impl Gender {
    pub const BOTH: [Gender; 2] = [Gender::Female, Gender::Male];

    pub fn code(self) -> &'static str {
        match self {
            Gender::Female => "F",
            Gender::Male => "M",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "F" | "f" | "Female" | "female" => Ok(Gender::Female),
            "M" | "m" | "Male" | "male" => Ok(Gender::Male),
            other => Err(Error::Validation(format!("unknown gender `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgeWidth {
    Closed(u32),
    Open,
}

/// An age interval `[lower, lower + width)`, or `[lower, ∞)` when open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgeGroup {
    pub lower: u32,
    pub width: AgeWidth,
}

impl AgeGroup {
    pub fn closed(lower: u32, width: u32) -> Self {
        Self { lower, width: AgeWidth::Closed(width) }
    }

    pub fn open(lower: u32) -> Self {
        Self { lower, width: AgeWidth::Open }
    }

    pub fn is_open(&self) -> bool {
        matches!(self.width, AgeWidth::Open)
    }

    /// Width in years; `None` for the open terminal group.
    pub fn years(&self) -> Option<u32> {
        match self.width {
            AgeWidth::Closed(w) => Some(w),
            AgeWidth::Open => None,
        }
    }

    pub fn contains(&self, age: u32) -> bool {
        match self.width {
            AgeWidth::Closed(w) => age >= self.lower && age < self.lower + w,
            AgeWidth::Open => age >= self.lower,
        }
    }

    fn width_label(&self) -> String {
        match self.width {
            AgeWidth::Closed(w) => w.to_string(),
            AgeWidth::Open => "OPEN".to_string(),
        }
    }
}

impl Ord for AgeGroup {
    fn cmp(&self, other: &Self) -> Ordering {
        self.lower.cmp(&other.lower).then_with(|| match (self.width, other.width) {
            (AgeWidth::Closed(a), AgeWidth::Closed(b)) => a.cmp(&b),
            (AgeWidth::Closed(_), AgeWidth::Open) => Ordering::Less,
            (AgeWidth::Open, AgeWidth::Closed(_)) => Ordering::Greater,
            (AgeWidth::Open, AgeWidth::Open) => Ordering::Equal,
        })
    }
}

impl PartialOrd for AgeGroup {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for AgeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.width {
            AgeWidth::Open => write!(f, "{}+", self.lower),
            AgeWidth::Closed(1) => write!(f, "{}", self.lower),
            AgeWidth::Closed(w) => write!(f, "{}-{}", self.lower, self.lower + w - 1),
        }
    }
}

impl FromStr for AgeGroup {
    type Err = Error;

    /// Accepts the HMD spellings `7`, `5-9` and `110+`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Validation(format!("malformed age `{s}`"));
        if let Some(lower) = s.strip_suffix('+') {
            return lower.parse().map(AgeGroup::open).map_err(|_| bad());
        }
        if let Some((a, b)) = s.split_once('-') {
            let a: u32 = a.parse().map_err(|_| bad())?;
            let b: u32 = b.parse().map_err(|_| bad())?;
            if b < a {
                return Err(bad());
            }
            return Ok(AgeGroup::closed(a, b - a + 1));
        }
        s.parse().map(|a| AgeGroup::closed(a, 1)).map_err(|_| bad())
    }
}

/// Ordered, disjoint set of age groups. At most one group is open and it
/// must come last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<AgeGroup>", into = "Vec<AgeGroup>")]
pub struct AgeGrid(Vec<AgeGroup>);

impl AgeGrid {
    pub fn new(groups: Vec<AgeGroup>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Validation("age grid is empty".into()));
        }
        for (i, g) in groups.iter().enumerate() {
            if g.width == AgeWidth::Closed(0) {
                return Err(Error::Validation(format!("age group {g} has zero width")));
            }
            if g.is_open() && i + 1 != groups.len() {
                return Err(Error::Validation(format!("open age group {g} is not last")));
            }
            if let Some(next) = groups.get(i + 1) {
                let end = g.lower + g.years().unwrap_or(0);
                if next.lower < end || next.lower <= g.lower {
                    return Err(Error::Validation(format!(
                        "age groups {g} and {next} overlap or are out of order"
                    )));
                }
            }
        }
        Ok(Self(groups))
    }

    /// HMD `5x1` layout: 0, 1-4, 5-9, ..., 105-109, 110+.
    pub fn hmd_five_year() -> Self {
        let mut groups = vec![AgeGroup::closed(0, 1), AgeGroup::closed(1, 4)];
        groups.extend((5..110).step_by(5).map(|a| AgeGroup::closed(a, 5)));
        groups.push(AgeGroup::open(110));
        Self(groups)
    }

    /// HMD `1x1` layout: 0, 1, ..., 109, 110+.
    pub fn hmd_single_year() -> Self {
        let mut groups: Vec<_> = (0..110).map(|a| AgeGroup::closed(a, 1)).collect();
        groups.push(AgeGroup::open(110));
        Self(groups)
    }

    /// Sub-grid of the groups whose lower bound lies in `[min, max]`.
    pub fn restrict(&self, min: u32, max: u32) -> Result<Self> {
        Self::new(self.0.iter().copied().filter(|g| g.lower >= min && g.lower <= max).collect())
    }

    pub fn groups(&self) -> &[AgeGroup] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn position(&self, group: &AgeGroup) -> Option<usize> {
        self.0.binary_search(group).ok()
    }

    pub fn by_lower(&self, lower: u32) -> Option<AgeGroup> {
        self.0.iter().copied().find(|g| g.lower == lower)
    }

    pub fn last(&self) -> AgeGroup {
        *self.0.last().expect("grid is non-empty")
    }
}

impl TryFrom<Vec<AgeGroup>> for AgeGrid {
    type Error = Error;

    fn try_from(groups: Vec<AgeGroup>) -> Result<Self> {
        AgeGrid::new(groups)
    }
}

impl From<AgeGrid> for Vec<AgeGroup> {
    fn from(grid: AgeGrid) -> Self {
        grid.0
    }
}

/// One observed central death rate from an `Mx` file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawRate {
    pub year: i32,
    pub age: AgeGroup,
    pub gender: Gender,
    pub rate: f64,
}

/// Per-country contents of an `Mx` file, missing cells dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRateTable {
    pub country: String,
    pub rates: Vec<RawRate>,
}

impl RawRateTable {
    /// Writes the table in the HMD `Mx` text layout read by [`parse_mx_file`].
    /// Cells present for only one gender get `.` for the other; the total
    /// column is the plain average of the two.
    pub fn write_mx<W: Write>(&self, mut out: W, title: &str) -> Result<()> {
        let mut cells: BTreeMap<(i32, AgeGroup), [Option<f64>; 2]> = BTreeMap::new();
        for r in &self.rates {
            let slot = usize::from(r.gender == Gender::Male);
            cells.entry((r.year, r.age)).or_default()[slot] = Some(r.rate);
        }
        writeln!(out, "{title}")?;
        writeln!(out)?;
        writeln!(out, "  Year          Age             Female            Male           Total")?;
        let fmt = |v: Option<f64>| v.map_or_else(|| ".".to_string(), |v| format!("{v:.6}"));
        for ((year, age), [f, m]) in cells {
            let total = match (f, m) {
                (Some(a), Some(b)) => Some(0.5 * (a + b)),
                _ => None,
            };
            writeln!(out, "  {year:<13} {:<15} {:<17} {:<14} {}", age.to_string(), fmt(f), fmt(m), fmt(total))?;
        }
        Ok(())
    }
}

/// Parses an HMD death-rate file.
///
/// Title and blank lines before the `Year Age Female Male Total` header are
/// skipped. Missing values (`.`) produce no record.
pub fn parse_mx_file<R: Read>(mut reader: R, country: &str) -> Result<RawRateTable> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    parse_mx_str(&text, country)
}

pub fn parse_mx_str(text: &str, country: &str) -> Result<RawRateTable> {
    let mut rates = Vec::new();
    let mut header_seen = false;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if !header_seen {
            if fields[0] == "Year" {
                let expected = ["Year", "Age", "Female", "Male", "Total"];
                if fields != expected {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("unexpected header `{}`", line.trim()),
                    });
                }
                header_seen = true;
            }
            continue;
        }
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let year: i32 = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad year `{}`", fields[0]),
        })?;
        let age: AgeGroup = fields[1].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad age `{}`", fields[1]),
        })?;
        for (gender, raw) in [(Gender::Female, fields[2]), (Gender::Male, fields[3])] {
            if raw == "." {
                continue;
            }
            let rate: f64 = raw.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad rate `{raw}`"),
            })?;
            if !rate.is_finite() {
                return Err(Error::Parse { line: line_no, message: format!("bad rate `{raw}`") });
            }
            if rate < 0.0 {
                return Err(Error::Validation(format!(
                    "line {line_no}: negative rate {rate} for {country} {gender} age {age} year {year}"
                )));
            }
            rates.push(RawRate { year, age, gender, rate });
        }
        // the Total column is validated as a field but not stored
        if fields[4] != "." && fields[4].parse::<f64>().is_err() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("bad total `{}`", fields[4]),
            });
        }
    }
    if !header_seen {
        return Err(Error::Parse { line: 1, message: "no `Year Age Female Male Total` header".into() });
    }
    Ok(RawRateTable { country: country.to_string(), rates })
}

/// Identifies one panel cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub country: String,
    pub gender: Gender,
    pub age: AgeGroup,
    pub year: i32,
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}:{}", self.country, self.gender, self.age, self.year)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub key: CellKey,
    pub log_rate: f64,
}

/// Long-format log death rates, sorted by (country, gender, age, year).
#[derive(Debug, Clone, PartialEq)]
pub struct MortalityPanel {
    records: Vec<Record>,
    age_grid: AgeGrid,
    year_range: (i32, i32),
    index: HashMap<CellKey, usize>,
}

impl MortalityPanel {
    /// Builds a panel from arbitrary records. Keys must be unique, finite and
    /// on the grid; rectangularity is not required (cleaned panels are
    /// ragged).
    pub fn from_records(mut records: Vec<Record>, age_grid: AgeGrid) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Validation("panel has no records".into()));
        }
        records.sort_by(|a, b| a.key.cmp(&b.key));
        let mut index = HashMap::with_capacity(records.len());
        let mut years = (i32::MAX, i32::MIN);
        for (i, r) in records.iter().enumerate() {
            if !r.log_rate.is_finite() {
                return Err(Error::Validation(format!("non-finite log rate at {}", r.key)));
            }
            if age_grid.position(&r.key.age).is_none() {
                return Err(Error::Validation(format!("age group of {} not on the grid", r.key)));
            }
            if index.insert(r.key.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate record {}", r.key)));
            }
            years = (years.0.min(r.key.year), years.1.max(r.key.year));
        }
        Ok(Self { records, age_grid, year_range: years, index })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn age_grid(&self) -> &AgeGrid {
        &self.age_grid
    }

    pub fn year_range(&self) -> (i32, i32) {
        self.year_range
    }

    pub fn years(&self) -> BTreeSet<i32> {
        self.records.iter().map(|r| r.key.year).collect()
    }

    pub fn countries(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.key.country.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Distinct (country, gender) pairs in key order.
    pub fn populations(&self) -> Vec<(String, Gender)> {
        let set: BTreeSet<(&str, Gender)> =
            self.records.iter().map(|r| (r.key.country.as_str(), r.key.gender)).collect();
        set.into_iter().map(|(c, g)| (c.to_string(), g)).collect()
    }

    pub fn get(&self, key: &CellKey) -> Option<f64> {
        self.index.get(key).map(|&i| self.records[i].log_rate)
    }

    /// True when every (country, gender, group) series covers the same years
    /// and every grid group is present.
    pub fn is_rectangular(&self) -> bool {
        let mut series: BTreeMap<(&str, Gender, AgeGroup), BTreeSet<i32>> = BTreeMap::new();
        for r in &self.records {
            series.entry((&r.key.country, r.key.gender, r.key.age)).or_default().insert(r.key.year);
        }
        let pops = self.populations().len();
        if series.len() != pops * self.age_grid.len() {
            return false;
        }
        let mut it = series.values();
        let first = it.next().cloned().unwrap_or_default();
        it.all(|s| *s == first)
    }

    /// Records satisfying `keep`, on the same grid.
    pub fn filter<F: Fn(&Record) -> bool>(&self, keep: F) -> Result<Self> {
        let records = self.records.iter().filter(|r| keep(r)).cloned().collect();
        Self::from_records(records, self.age_grid.clone())
    }

    pub fn population(&self, country: &str, gender: Gender) -> Result<Self> {
        self.filter(|r| r.key.country == country && r.key.gender == gender)
    }

    pub fn select_countries(&self, countries: &[String]) -> Result<Self> {
        self.filter(|r| countries.contains(&r.key.country))
    }

    /// Keeps only groups of `grid` (which must be a subset of this grid).
    pub fn restrict_grid(&self, grid: &AgeGrid) -> Result<Self> {
        let records =
            self.records.iter().filter(|r| grid.position(&r.key.age).is_some()).cloned().collect();
        Self::from_records(records, grid.clone())
    }

    /// Dense `ages × years` log-rate matrix for one population.
    pub fn population_matrix(
        &self,
        country: &str,
        gender: Gender,
    ) -> Result<(Vec<AgeGroup>, Vec<i32>, nalgebra::DMatrix<f64>)> {
        let years: Vec<i32> = self
            .records
            .iter()
            .filter(|r| r.key.country == country && r.key.gender == gender)
            .map(|r| r.key.year)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if years.is_empty() {
            return Err(Error::Validation(format!("no records for {country} {gender}")));
        }
        let ages = self.age_grid.groups().to_vec();
        let mut m = nalgebra::DMatrix::zeros(ages.len(), years.len());
        let mut missing = Vec::new();
        for (i, age) in ages.iter().enumerate() {
            for (j, &year) in years.iter().enumerate() {
                let key = CellKey { country: country.to_string(), gender, age: *age, year };
                match self.get(&key) {
                    Some(v) => m[(i, j)] = v,
                    None => missing.push(key.to_string()),
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingCells(missing));
        }
        Ok((ages, years, m))
    }

    /// CSV with columns `country,gender,age_lower,age_width,year,log_rate`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["country", "gender", "age_lower", "age_width", "year", "log_rate"])?;
        for r in &self.records {
            w.write_record([
                r.key.country.clone(),
                r.key.gender.code().to_string(),
                r.key.age.lower.to_string(),
                r.key.age.width_label(),
                r.key.year.to_string(),
                format!("{:?}", r.log_rate),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV produced by [`MortalityPanel::write_csv`]. The grid is
    /// the set of groups present.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut records = Vec::new();
        let mut groups = BTreeSet::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row?;
            let line = i + 2;
            let field = |k: usize| -> Result<&str> {
                row.get(k).ok_or(Error::Parse { line, message: "too few fields".into() })
            };
            let perr = |m: &str| Error::Parse { line, message: m.to_string() };
            let lower: u32 = field(2)?.parse().map_err(|_| perr("bad age_lower"))?;
            let age = match field(3)? {
                "OPEN" => AgeGroup::open(lower),
                w => AgeGroup::closed(lower, w.parse().map_err(|_| perr("bad age_width"))?),
            };
            groups.insert(age);
            records.push(Record {
                key: CellKey {
                    country: field(0)?.to_string(),
                    gender: field(1)?.parse()?,
                    age,
                    year: field(4)?.parse().map_err(|_| perr("bad year"))?,
                },
                log_rate: field(5)?.parse().map_err(|_| perr("bad log_rate"))?,
            });
        }
        let grid = AgeGrid::new(groups.into_iter().collect())?;
        Self::from_records(records, grid)
    }
}

/// Assembles a rectangular panel over every country in `tables`, both
/// genders, every group of `age_grid` and every year of `year_range`.
pub fn build_panel(
    tables: &[RawRateTable],
    year_range: (i32, i32),
    age_grid: &AgeGrid,
) -> Result<MortalityPanel> {
    if year_range.0 > year_range.1 {
        return Err(Error::Validation(format!("empty year range {year_range:?}")));
    }
    let mut records = Vec::new();
    let mut missing = Vec::new();
    let mut zero = Vec::new();
    for table in tables {
        let lookup: HashMap<(i32, AgeGroup, Gender), f64> =
            table.rates.iter().map(|r| ((r.year, r.age, r.gender), r.rate)).collect();
        for gender in Gender::BOTH {
            for age in age_grid.groups() {
                for year in year_range.0..=year_range.1 {
                    let key = CellKey { country: table.country.clone(), gender, age: *age, year };
                    match lookup.get(&(year, *age, gender)) {
                        None => missing.push(key.to_string()),
                        Some(&rate) if rate <= 0.0 => zero.push(key.to_string()),
                        Some(&rate) => records.push(Record { key, log_rate: rate.ln() }),
                    }
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingCells(missing));
    }
    if !zero.is_empty() {
        return Err(Error::Validation(format!(
            "zero death rate (log undefined) at {}",
            zero.join(", ")
        )));
    }
    MortalityPanel::from_records(records, age_grid.clone())
}

/// Splits at `cutoff_year`: train keeps years `<= cutoff`, test the rest.
pub fn split_train_test(
    panel: &MortalityPanel,
    cutoff_year: i32,
) -> Result<(MortalityPanel, MortalityPanel)> {
    let (t_min, t_max) = panel.year_range();
    if cutoff_year < t_min || cutoff_year >= t_max {
        return Err(Error::Validation(format!(
            "cutoff {cutoff_year} outside [{t_min}, {})",
            t_max
        )));
    }
    let train = panel.filter(|r| r.key.year <= cutoff_year)?;
    let test = panel.filter(|r| r.key.year > cutoff_year)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "Austria, Death rates (period 5x1)\tLast modified: 01 Jan 2020\n\n  Year          Age             Female            Male           Total\n  1961           0             0.030          0.040          0.035\n  1961         1-4             0.001          0.002          0.0015\n  1961         110+            0.5            0.6            0.55\n  1962           0             .              0.03           .\n";

    #[test]
    fn parses_open_group_and_missing_values() {
        let t = parse_mx_str(SAMPLE, "AUT").unwrap();
        assert_eq!(t.rates.len(), 7);
        let open: Vec<_> = t.rates.iter().filter(|r| r.age == AgeGroup::open(110)).collect();
        assert_eq!(open.len(), 2);
        assert_eq!(open[0].rate, 0.5);
        assert_eq!(open[0].gender, Gender::Female);
        assert_eq!(open[1].rate, 0.6);
        let y1962: Vec<_> = t.rates.iter().filter(|r| r.year == 1962).collect();
        assert_eq!(y1962.len(), 1);
        assert_eq!(y1962[0].gender, Gender::Male);
        assert_eq!(y1962[0].rate, 0.03);
        let span = t.rates.iter().find(|r| r.age.lower == 1).unwrap();
        assert_eq!(span.age, AgeGroup::closed(1, 4));
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "Year Age Female Male Total\n1961 0 0.1 0.2 0.15\n1961 1 0.1\n";
        match parse_mx_str(text, "X") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let text = "Year Age Female Male Total\n1961 abc 0.1 0.2 0.15\n";
        assert!(matches!(parse_mx_str(text, "X"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn negative_rate_is_validation_error() {
        let text = "Year Age Female Male Total\n1961 0 -0.1 0.2 0.15\n";
        assert!(matches!(parse_mx_str(text, "X"), Err(Error::Validation(_))));
    }

    #[test]
    fn grid_invariants() {
        assert_eq!(AgeGrid::hmd_five_year().len(), 24);
        assert_eq!(AgeGrid::hmd_single_year().len(), 111);
        assert!(AgeGrid::new(vec![AgeGroup::open(0), AgeGroup::closed(5, 5)]).is_err());
        assert!(AgeGrid::new(vec![AgeGroup::closed(0, 5), AgeGroup::closed(3, 5)]).is_err());
        let g = AgeGrid::hmd_five_year().restrict(45, 90).unwrap();
        assert_eq!(g.len(), 10);
        assert!(!g.last().is_open());
    }

    fn table(country: &str, grid: &AgeGrid, years: std::ops::RangeInclusive<i32>, rate: f64) -> RawRateTable {
        let mut rates = Vec::new();
        for year in years {
            for age in grid.groups() {
                for gender in Gender::BOTH {
                    rates.push(RawRate { year, age: *age, gender, rate });
                }
            }
        }
        RawRateTable { country: country.into(), rates }
    }

    #[test]
    fn build_panel_logs_rates() {
        let grid = AgeGrid::new(vec![AgeGroup::closed(0, 1), AgeGroup::open(1)]).unwrap();
        let p = build_panel(&[table("A", &grid, 2000..=2001, 1.0)], (2000, 2001), &grid).unwrap();
        assert!(p.records().iter().all(|r| r.log_rate == 0.0));
        let p = build_panel(&[table("A", &grid, 2000..=2001, (-5.0f64).exp())], (2000, 2001), &grid)
            .unwrap();
        assert!(p.records().iter().all(|r| (r.log_rate + 5.0).abs() < 1e-12));
        assert!(p.is_rectangular());
    }

    #[test]
    fn twelve_population_panel_size() {
        let grid = AgeGrid::hmd_five_year();
        let tables: Vec<_> = ["AUT", "BEL", "CHE", "CZE", "DNK", "SWE"]
            .iter()
            .map(|c| table(c, &grid, 1950..=2019, 0.01))
            .collect();
        let p = build_panel(&tables, (1961, 2010), &grid).unwrap();
        assert_eq!(p.len(), 14_400);
        assert_eq!(p.populations().len(), 12);
    }

    #[test]
    fn missing_and_zero_cells_abort() {
        let grid = AgeGrid::new(vec![AgeGroup::closed(0, 1), AgeGroup::open(1)]).unwrap();
        let mut t = table("A", &grid, 2000..=2001, 0.1);
        t.rates.retain(|r| !(r.year == 2001 && r.gender == Gender::Male));
        match build_panel(&[t], (2000, 2001), &grid) {
            Err(Error::MissingCells(keys)) => assert_eq!(keys.len(), 2),
            other => panic!("unexpected {other:?}"),
        }
        let mut t = table("A", &grid, 2000..=2001, 0.1);
        t.rates[0].rate = 0.0;
        assert!(matches!(build_panel(&[t], (2000, 2001), &grid), Err(Error::Validation(_))));
    }

    #[test]
    fn split_examples() {
        let grid = AgeGrid::new(vec![AgeGroup::closed(0, 1), AgeGroup::open(1)]).unwrap();
        let p = build_panel(&[table("A", &grid, 1950..=2019, 0.1)], (1961, 2019), &grid).unwrap();
        let (train, test) = split_train_test(&p, 2010).unwrap();
        assert_eq!(train.year_range(), (1961, 2010));
        assert_eq!(test.year_range(), (2011, 2019));
        let (_, test) = split_train_test(&p, 2018).unwrap();
        assert_eq!(test.years().len(), 1);
        assert!(split_train_test(&p, 2019).is_err());
        assert!(split_train_test(&p, 1960).is_err());
        let p = build_panel(&[table("A", &grid, 1950..=2019, 0.1)], (1950, 2019), &grid).unwrap();
        let (_, test) = split_train_test(&p, 1999).unwrap();
        assert_eq!(test.year_range(), (2000, 2019));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let grid = AgeGrid::hmd_five_year();
        let mut t = table("AUT", &grid, 2000..=2002, 0.0123456789);
        for (i, r) in t.rates.iter_mut().enumerate() {
            r.rate *= 1.0 + i as f64 * 1e-3;
        }
        let p = build_panel(&[t], (2000, 2002), &grid).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let back = MortalityPanel::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, p);
    }
}
