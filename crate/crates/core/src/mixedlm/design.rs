//! Realized fixed and random design matrices for a formula over a panel.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::formula::{Atom, Factor, FixedTerm, GroupFactor, ModelFormula, RandomTerm};
use crate::covariates::{CovariateSet, Segment};
use crate::error::{Error, Result};
use crate::panel::{AgeGrid, AgeGroup, CellKey, Gender, MortalityPanel};

/// One fixed-effect column: indicator of the optional gender and age levels
/// times the atom's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub gender: Option<Gender>,
    pub age: Option<AgeGroup>,
    pub atom: Atom,
}

impl ColumnSpec {
    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if let Some(g) = self.gender {
            parts.push(format!("gender{g}"));
        }
        if let Some(a) = self.age {
            parts.push(format!("age{a}"));
        }
        if self.atom != Atom::Intercept || parts.is_empty() {
            parts.push(self.atom.to_string());
        }
        parts.join(":")
    }
}

/// Everything needed to rebuild design rows for arbitrary cells: the
/// formula, its column coding and the random-effect levels seen in training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignLayout {
    pub formula: ModelFormula,
    pub age_grid: AgeGrid,
    pub split_age: u32,
    pub columns: Vec<ColumnSpec>,
    pub random_levels: Vec<Vec<String>>,
}

/// Random-effect design of one term in compact form: a level index per row
/// and the `n × q` regressor values.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomTermDesign {
    pub grouping: String,
    pub regressors: Vec<String>,
    pub levels: Vec<String>,
    pub group_of_row: Vec<usize>,
    pub values: DMatrix<f64>,
}

impl RandomTermDesign {
    pub fn q(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub x_names: Vec<String>,
    pub terms: Vec<RandomTermDesign>,
    /// Panel key of every row; empty when built from raw parts.
    pub keys: Vec<CellKey>,
    pub layout: Option<DesignLayout>,
}

impl DesignMatrices {
    /// Assembles and validates a design from raw matrices.
    pub fn from_parts(
        y: DVector<f64>,
        x: DMatrix<f64>,
        x_names: Vec<String>,
        terms: Vec<RandomTermDesign>,
    ) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n || x_names.len() != x.ncols() {
            return Err(Error::Validation("fixed design dimensions do not match".into()));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("design contains non-finite values".into()));
        }
        for t in &terms {
            if t.values.nrows() != n || t.group_of_row.len() != n || t.regressors.len() != t.q() {
                return Err(Error::Validation(format!("random term {} has wrong dimensions", t.grouping)));
            }
            if t.group_of_row.iter().any(|&g| g >= t.levels.len()) {
                return Err(Error::Validation(format!("random term {} has a bad level index", t.grouping)));
            }
            if t.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("random term {} has non-finite values", t.grouping)));
            }
        }
        check_rank(&x, &x_names)?;
        Ok(Self { y, x, x_names, terms, keys: Vec::new(), layout: None })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Term shapes as (levels, regressors).
    pub fn term_shapes(&self) -> Vec<(usize, usize)> {
        self.terms.iter().map(|t| (t.n_levels(), t.q())).collect()
    }

    /// Dense `n × Σ G_r q_r` random design, level-major within each term.
    pub fn dense_z(&self) -> DMatrix<f64> {
        let width: usize = self.terms.iter().map(|t| t.n_levels() * t.q()).sum();
        let mut z = DMatrix::zeros(self.n(), width);
        let mut offset = 0;
        for t in &self.terms {
            for i in 0..self.n() {
                let base = offset + t.group_of_row[i] * t.q();
                for j in 0..t.q() {
                    z[(i, base + j)] = t.values[(i, j)];
                }
            }
            offset += t.n_levels() * t.q();
        }
        z
    }

    /// Same design with a different response.
    pub fn with_response(&self, y: DVector<f64>) -> Result<Self> {
        if y.len() != self.n() {
            return Err(Error::Validation("response length mismatch".into()));
        }
        let mut out = self.clone();
        out.y = y;
        Ok(out)
    }
}

/// Flags columns lying (numerically) in the span of earlier columns.
fn check_rank(x: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let p = x.ncols();
    let norms: Vec<f64> = (0..p).map(|j| x.column(j).norm()).collect();
    let zero: Vec<String> =
        (0..p).filter(|&j| norms[j] == 0.0).map(|j| names[j].clone()).collect();
    if !zero.is_empty() {
        return Err(Error::RankDeficient(zero));
    }
    let mut xs = x.clone();
    for j in 0..p {
        xs.column_mut(j).scale_mut(1.0 / norms[j]);
    }
    let gram = xs.tr_mul(&xs);
    let mut chol = DMatrix::<f64>::zeros(p, p);
    let mut accepted: Vec<usize> = Vec::new();
    let mut collinear = Vec::new();
    for j in 0..p {
        let k = accepted.len();
        let mut w = vec![0.0; k];
        for a in 0..k {
            let mut s = gram[(accepted[a], j)];
            for b in 0..a {
                s -= chol[(a, b)] * w[b];
            }
            w[a] = s / chol[(a, a)];
        }
        let d = gram[(j, j)] - w.iter().map(|v| v * v).sum::<f64>();
        if d <= 1e-10 {
            collinear.push(names[j].clone());
            continue;
        }
        for (b, wb) in w.iter().enumerate() {
            chol[(k, b)] = *wb;
        }
        chol[(k, k)] = d.sqrt();
        accepted.push(j);
    }
    if collinear.is_empty() {
        Ok(())
    } else {
        Err(Error::RankDeficient(collinear))
    }
}

fn atom_value(atom: &Atom, key: &CellKey, covs: &CovariateSet, split_age: u32) -> Result<f64> {
    Ok(match atom {
        Atom::Intercept => 1.0,
        Atom::Global(j) => covs.global_at(key.year)?.powi(*j as i32),
        Atom::Country(j) => covs
            .country_at(&key.country, Segment::of(key.age.lower, split_age), key.year)?
            .powi(*j as i32),
        Atom::Cohort => (key.year - key.age.lower as i32) as f64,
        Atom::Extra(name) => {
            if !covs.extra.contains_key(name) {
                return Err(Error::UnknownTerm(name.clone()));
            }
            covs.extra_at(name, &key.country, key.year)?
        }
    })
}

fn group_label(grouping: &[GroupFactor], key: &CellKey) -> String {
    grouping
        .iter()
        .map(|g| match g {
            GroupFactor::Country => key.country.clone(),
            GroupFactor::Gender => key.gender.to_string(),
            GroupFactor::Age => key.age.to_string(),
        })
        .collect::<Vec<_>>()
        .join(":")
}

/// Sort key for group levels so that ages order numerically.
fn group_sort_key(grouping: &[GroupFactor], key: &CellKey) -> (Option<String>, Option<Gender>, Option<AgeGroup>) {
    (
        grouping.contains(&GroupFactor::Country).then(|| key.country.clone()),
        grouping.contains(&GroupFactor::Gender).then_some(key.gender),
        grouping.contains(&GroupFactor::Age).then_some(key.age),
    )
}

fn term_columns(term: &FixedTerm, formula: &ModelFormula, grid: &AgeGrid) -> Vec<ColumnSpec> {
    let contrast = |f: Factor| formula.contains_fixed(&term.without(f));
    let genders: Vec<Option<Gender>> = if term.factors.contains(&Factor::Gender) {
        if contrast(Factor::Gender) {
            vec![Some(Gender::Male)]
        } else {
            Gender::BOTH.iter().map(|g| Some(*g)).collect()
        }
    } else {
        vec![None]
    };
    let ages: Vec<Option<AgeGroup>> = if term.factors.contains(&Factor::Age) {
        let skip = usize::from(contrast(Factor::Age));
        grid.groups().iter().skip(skip).map(|a| Some(*a)).collect()
    } else {
        vec![None]
    };
    let mut out = Vec::new();
    for g in &genders {
        for a in &ages {
            out.push(ColumnSpec { gender: *g, age: *a, atom: term.atom.clone() });
        }
    }
    out
}

impl DesignLayout {
    pub fn new(formula: &ModelFormula, age_grid: &AgeGrid, split_age: u32) -> Result<Self> {
        formula.validate()?;
        let columns =
            formula.fixed.iter().flat_map(|t| term_columns(t, formula, age_grid)).collect();
        Ok(Self {
            formula: formula.clone(),
            age_grid: age_grid.clone(),
            split_age,
            columns,
            random_levels: Vec::new(),
        })
    }

    pub fn x_names(&self) -> Vec<String> {
        self.columns.iter().map(ColumnSpec::name).collect()
    }

    /// Dense fixed-effect row for `key`.
    pub fn fixed_row(&self, key: &CellKey, covs: &CovariateSet) -> Result<Vec<f64>> {
        let mut cache: BTreeMap<&Atom, f64> = BTreeMap::new();
        let mut row = Vec::with_capacity(self.columns.len());
        for c in &self.columns {
            let active = c.gender.is_none_or(|g| g == key.gender) && c.age.is_none_or(|a| a == key.age);
            if !active {
                row.push(0.0);
                continue;
            }
            let v = match cache.get(&c.atom) {
                Some(v) => *v,
                None => {
                    let v = atom_value(&c.atom, key, covs, self.split_age)?;
                    cache.insert(&c.atom, v);
                    v
                }
            };
            row.push(v);
        }
        Ok(row)
    }

    /// Level label of random term `t` for `key`.
    pub fn group_label(&self, t: usize, key: &CellKey) -> String {
        group_label(&self.formula.random[t].grouping, key)
    }

    /// Level label and regressor values of random term `t` for `key`.
    pub fn random_row(&self, t: usize, key: &CellKey, covs: &CovariateSet) -> Result<(String, Vec<f64>)> {
        let term: &RandomTerm = &self.formula.random[t];
        let values = term
            .regressors
            .iter()
            .map(|a| atom_value(a, key, covs, self.split_age))
            .collect::<Result<Vec<_>>>()?;
        Ok((group_label(&term.grouping, key), values))
    }
}

/// Builds `y`, `X` and the random-term designs for `formula` on `panel`.
pub fn build_design(
    panel: &MortalityPanel,
    covs: &CovariateSet,
    formula: &ModelFormula,
    split_age: u32,
) -> Result<DesignMatrices> {
    for t in formula.fixed.iter().map(|t| &t.atom).chain(formula.random.iter().flat_map(|r| &r.regressors)) {
        if let Atom::Extra(name) = t {
            if !covs.extra.contains_key(name) {
                return Err(Error::UnknownTerm(name.clone()));
            }
        }
    }
    let mut layout = DesignLayout::new(formula, panel.age_grid(), split_age)?;
    let records = panel.records();
    let n = records.len();
    let p = layout.columns.len();
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    for (i, r) in records.iter().enumerate() {
        y[i] = r.log_rate;
        let row = layout.fixed_row(&r.key, covs)?;
        for (j, v) in row.into_iter().enumerate() {
            x[(i, j)] = v;
        }
    }
    let mut terms = Vec::with_capacity(formula.random.len());
    for (t, term) in formula.random.iter().enumerate() {
        let sorted: BTreeMap<_, String> = records
            .iter()
            .map(|r| (group_sort_key(&term.grouping, &r.key), group_label(&term.grouping, &r.key)))
            .collect();
        let mut index = BTreeMap::new();
        let mut levels = Vec::new();
        for (i, (k, label)) in sorted.into_iter().enumerate() {
            index.insert(k, i);
            levels.push(label);
        }
        let q = term.regressors.len();
        let mut values = DMatrix::zeros(n, q);
        let mut group_of_row = Vec::with_capacity(n);
        for (i, r) in records.iter().enumerate() {
            group_of_row.push(index[&group_sort_key(&term.grouping, &r.key)]);
            let (_, vals) = layout.random_row(t, &r.key, covs)?;
            for (j, v) in vals.into_iter().enumerate() {
                values[(i, j)] = v;
            }
        }
        terms.push(RandomTermDesign {
            grouping: term.grouping_name(),
            regressors: term.regressors.iter().map(|a| a.to_string()).collect(),
            levels,
            group_of_row,
            values,
        });
    }
    layout.random_levels = terms.iter().map(|t| t.levels.clone()).collect();
    let mut design = DesignMatrices::from_parts(y, x, layout.x_names(), terms)?;
    design.keys = records.iter().map(|r| r.key.clone()).collect();
    design.layout = Some(layout);
    Ok(design)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariates::CovariateSet;
    use crate::panel::{AgeGrid, Record};

    pub(crate) fn synthetic_panel(countries: &[&str], grid: &AgeGrid, years: std::ops::RangeInclusive<i32>) -> MortalityPanel {
        let mut records = Vec::new();
        for (ci, c) in countries.iter().enumerate() {
            for g in Gender::BOTH {
                for (ai, a) in grid.groups().iter().enumerate() {
                    for y in years.clone() {
                        let t = (y - years.start()) as f64;
                        let log_rate = -9.0 + 0.08 * a.lower as f64 - 0.012 * t
                            + 0.3 * f64::from(g == Gender::Male)
                            + 0.05 * ci as f64
                            + 0.01 * ((ai * 7 + y as usize * 3 + ci) % 11) as f64
                            + 0.0002 * t * t * (ai % 3) as f64;
                        records.push(Record {
                            key: CellKey { country: c.to_string(), gender: g, age: *a, year: y },
                            log_rate,
                        });
                    }
                }
            }
        }
        MortalityPanel::from_records(records, grid.clone()).unwrap()
    }

    #[test]
    fn selected_model_column_count() {
        let grid = AgeGrid::hmd_five_year();
        let panel = synthetic_panel(&["A", "B", "C"], &grid, 1961..=1975);
        let covs = CovariateSet::from_panel(&panel, 40).unwrap();
        let f: ModelFormula = "age + gender:age + gender:age:I(k_ct) + I(k_t^2) + gender:age:I(k_ct^2) + cohort + (I(k_t^2) + cohort | country:gender:age)".parse().unwrap();
        let layout = DesignLayout::new(&f, &grid, 40).unwrap();
        assert_eq!(layout.columns.len(), 1 + 23 + 24 + 48 + 1 + 48 + 1);
        let names = layout.x_names();
        assert_eq!(names[0], "(Intercept)");
        assert_eq!(names[1], "age1-4");
        assert_eq!(names[24], "genderM:age0");
        assert_eq!(names[48], "genderF:age0:I(k_ct)");
        assert!(names.contains(&"cohort".to_string()));
        let d = build_design(&panel, &covs, &f, 40).unwrap();
        assert_eq!(d.terms.len(), 1);
        assert_eq!(d.terms[0].n_levels(), 3 * 2 * 24);
        assert_eq!(d.terms[0].q(), 3);
        assert_eq!(d.terms[0].levels[0], "A:F:0");
    }

    #[test]
    fn intercept_only_is_ones() {
        let grid = AgeGrid::hmd_five_year().restrict(45, 90).unwrap();
        let panel = synthetic_panel(&["A"], &grid, 1990..=1999);
        let covs = CovariateSet::from_panel(&panel, 45).unwrap();
        let f: ModelFormula = "1 + (1 | age)".parse().unwrap();
        let d = build_design(&panel, &covs, &f, 45).unwrap();
        assert_eq!(d.p(), 1);
        assert!(d.x.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_population_shape() {
        let grid = AgeGrid::hmd_five_year().restrict(45, 90).unwrap();
        let panel = synthetic_panel(&["A"], &grid, 1960..=1999).population("A", Gender::Female).unwrap();
        let covs = CovariateSet::from_panel(&panel, 45).unwrap();
        let f: ModelFormula = "I(k_t) + (I(k_t) | age)".parse().unwrap();
        let d = build_design(&panel, &covs, &f, 45).unwrap();
        assert_eq!(d.p(), 2);
        assert_eq!(d.term_shapes(), vec![(10, 2)]);
    }

    #[test]
    fn cohort_and_segment_values() {
        let grid = AgeGrid::hmd_five_year();
        let panel = synthetic_panel(&["A", "B"], &grid, 1961..=1970);
        let covs = CovariateSet::from_panel(&panel, 40).unwrap();
        let f: ModelFormula = "gender:age:I(k_ct) + cohort + (cohort | country:gender:age)".parse().unwrap();
        let d = build_design(&panel, &covs, &f, 40).unwrap();
        let layout = d.layout.as_ref().unwrap();
        let cohort = layout.x_names().iter().position(|n| n == "cohort").unwrap();
        for (i, k) in d.keys.iter().enumerate() {
            assert_eq!(d.x[(i, cohort)], (k.year - k.age.lower as i32) as f64);
            let name = format!("gender{}:age{}:I(k_ct)", k.gender, k.age);
            let col = layout.x_names().iter().position(|n| *n == name).unwrap();
            let seg = if k.age.lower <= 40 { Segment::Young } else { Segment::Old };
            assert_eq!(d.x[(i, col)], covs.country_at(&k.country, seg, k.year).unwrap());
            let active = (0..d.p()).filter(|&j| d.x[(i, j)] != 0.0).count();
            assert_eq!(active, 3);
        }
    }

    #[test]
    fn reference_cell_uses_intercept_and_covariates_only() {
        let grid = AgeGrid::hmd_five_year();
        let panel = synthetic_panel(&["A", "B"], &grid, 1961..=1970);
        let covs = CovariateSet::from_panel(&panel, 40).unwrap();
        let f: ModelFormula = "age + gender:age + I(k_t) + cohort + (1 | country:gender:age)".parse().unwrap();
        let layout = DesignLayout::new(&f, &grid, 40).unwrap();
        let key = CellKey { country: "A".into(), gender: Gender::Female, age: grid.groups()[0], year: 1965 };
        let row = layout.fixed_row(&key, &covs).unwrap();
        let names = layout.x_names();
        for (v, n) in row.iter().zip(&names) {
            if *v != 0.0 {
                assert!(["(Intercept)", "I(k_t)", "cohort"].contains(&n.as_str()), "{n}");
            }
        }
    }

    #[test]
    fn collinear_columns_are_named() {
        let grid = AgeGrid::hmd_five_year();
        let panel = synthetic_panel(&["A"], &grid, 1961..=1970);
        let covs = CovariateSet::from_panel(&panel, 40).unwrap();
        let f = ModelFormula {
            fixed: vec![
                FixedTerm::intercept(),
                FixedTerm::new(vec![Factor::Gender, Factor::Age], Atom::Intercept),
            ],
            random: vec![RandomTerm { regressors: vec![Atom::Intercept], grouping: vec![GroupFactor::Age] }],
        };
        match build_design(&panel, &covs, &f, 40) {
            Err(Error::RankDeficient(cols)) => assert_eq!(cols, vec!["genderM:age110+".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_extra_covariate() {
        let grid = AgeGrid::hmd_five_year();
        let panel = synthetic_panel(&["A"], &grid, 1961..=1970);
        let covs = CovariateSet::from_panel(&panel, 40).unwrap();
        let f: ModelFormula = "GDP + (GDP | country)".parse().unwrap();
        assert!(matches!(build_design(&panel, &covs, &f, 40), Err(Error::UnknownTerm(n)) if n == "GDP"));
    }

    #[test]
    fn rank_check_on_raw_parts() {
        let x = DMatrix::from_row_slice(4, 3, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 2.0, 3.0, 1.0, 3.0, 4.0]);
        let err = DesignMatrices::from_parts(DVector::zeros(4), x, vec!["a".into(), "b".into(), "c".into()], vec![]);
        assert!(matches!(err, Err(Error::RankDeficient(c)) if c == vec!["c".to_string()]));
    }
}
