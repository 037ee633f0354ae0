//! Model formulas in an lme4-like notation, e.g.
//! `age + gender:age + gender:age:I(k_ct) + I(k_t^2) + cohort + (I(k_t^2) + cohort | country:gender:age)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A numeric regressor: the constant, a covariate power, cohort or a named
/// group-level covariate.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Atom {
    Intercept,
    /// `k_t` raised to the given power.
    Global(u32),
    /// `k_ct` (segment chosen by the row's age group) raised to the given power.
    Country(u32),
    /// Birth year `year - age_lower`.
    Cohort,
    Extra(String),
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::Intercept => f.write_str("(Intercept)"),
            Atom::Global(1) => f.write_str("I(k_t)"),
            Atom::Global(j) => write!(f, "I(k_t^{j})"),
            Atom::Country(1) => f.write_str("I(k_ct)"),
            Atom::Country(j) => write!(f, "I(k_ct^{j})"),
            Atom::Cohort => f.write_str("cohort"),
            Atom::Extra(name) => f.write_str(name),
        }
    }
}

/// Categorical factors usable in fixed-effect interactions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Factor {
    Gender,
    Age,
}

impl Factor {
    pub fn name(self) -> &'static str {
        match self {
            Factor::Gender => "gender",
            Factor::Age => "age",
        }
    }
}

/// Panel index columns usable in grouping keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GroupFactor {
    Country,
    Gender,
    Age,
}

impl GroupFactor {
    pub fn name(self) -> &'static str {
        match self {
            GroupFactor::Country => "country",
            GroupFactor::Gender => "gender",
            GroupFactor::Age => "age",
        }
    }
}

/// `factors:atom`, e.g. `gender:age:I(k_ct^2)`. The intercept atom with no
/// factors is the model intercept.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FixedTerm {
    pub factors: Vec<Factor>,
    pub atom: Atom,
}

impl FixedTerm {
    pub fn new(mut factors: Vec<Factor>, atom: Atom) -> Self {
        factors.sort();
        factors.dedup();
        Self { factors, atom }
    }

    pub fn intercept() -> Self {
        Self::new(vec![], Atom::Intercept)
    }

    pub fn is_intercept(&self) -> bool {
        self.factors.is_empty() && self.atom == Atom::Intercept
    }

    /// The term with `factor` removed, used for contrast decisions.
    pub fn without(&self, factor: Factor) -> Self {
        Self::new(self.factors.iter().copied().filter(|f| *f != factor).collect(), self.atom.clone())
    }

    /// True when `other` is a lower-order relative: same atom (or the
    /// intercept atom) and a subset of the factors.
    pub fn is_marginal_to(&self, other: &FixedTerm) -> bool {
        if self == other {
            return false;
        }
        let atom_ok = self.atom == other.atom || self.atom == Atom::Intercept;
        atom_ok && self.factors.iter().all(|f| other.factors.contains(f))
    }
}

impl fmt::Display for FixedTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = self.factors.iter().map(|x| x.name().to_string()).collect();
        match (&self.atom, parts.is_empty()) {
            (Atom::Intercept, true) => return f.write_str("1"),
            (Atom::Intercept, false) => {}
            (atom, _) => parts.push(atom.to_string()),
        }
        f.write_str(&parts.join(":"))
    }
}

/// `(regressors | grouping)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RandomTerm {
    pub regressors: Vec<Atom>,
    pub grouping: Vec<GroupFactor>,
}

impl RandomTerm {
    pub fn grouping_name(&self) -> String {
        self.grouping.iter().map(|g| g.name()).collect::<Vec<_>>().join(":")
    }

    pub fn has_intercept(&self) -> bool {
        self.regressors.contains(&Atom::Intercept)
    }
}

impl fmt::Display for RandomTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = Vec::new();
        if !self.has_intercept() {
            parts.push("0".into());
        }
        parts.extend(self.regressors.iter().filter(|a| **a != Atom::Intercept).map(|a| a.to_string()));
        if parts.is_empty() {
            parts.push("1".into());
        }
        write!(f, "({} | {})", parts.join(" + "), self.grouping_name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelFormula {
    pub fixed: Vec<FixedTerm>,
    pub random: Vec<RandomTerm>,
}

impl ModelFormula {
    pub fn has_intercept(&self) -> bool {
        self.fixed.iter().any(FixedTerm::is_intercept)
    }

    pub fn contains_fixed(&self, term: &FixedTerm) -> bool {
        self.fixed.contains(term)
    }

    /// Every random regressor other than the intercept needs a fixed term
    /// carrying the same atom; a random intercept needs a fixed term with the
    /// intercept atom.
    pub fn validate(&self) -> Result<()> {
        if self.fixed.is_empty() {
            return Err(Error::Validation("formula has no fixed terms".into()));
        }
        for (i, t) in self.random.iter().enumerate() {
            if t.regressors.is_empty() {
                return Err(Error::Validation(format!("random term {t} has no regressors")));
            }
            if t.grouping.is_empty() {
                return Err(Error::Validation(format!("random term {t} has no grouping")));
            }
            for a in &t.regressors {
                if !self.fixed.iter().any(|f| f.atom == *a) {
                    return Err(Error::Validation(format!(
                        "random regressor {a} in {t} has no fixed counterpart"
                    )));
                }
            }
            if self.random[..i].iter().any(|o| o.grouping == t.grouping) {
                return Err(Error::Validation(format!(
                    "grouping {} used by more than one random term",
                    t.grouping_name()
                )));
            }
        }
        Ok(())
    }

    /// Highest covariate powers used: (fixed, random).
    pub fn degrees(&self) -> (u32, u32) {
        let deg = |a: &Atom| match a {
            Atom::Global(j) | Atom::Country(j) => *j,
            _ => 0,
        };
        (
            self.fixed.iter().map(|t| deg(&t.atom)).max().unwrap_or(0),
            self.random.iter().flat_map(|t| t.regressors.iter().map(deg)).max().unwrap_or(0),
        )
    }
}

impl fmt::Display for ModelFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = Vec::new();
        if !self.has_intercept() {
            parts.push("0".into());
        }
        parts.extend(self.fixed.iter().filter(|t| !t.is_intercept()).map(|t| t.to_string()));
        if parts.is_empty() {
            parts.push("1".into());
        }
        parts.extend(self.random.iter().map(|t| t.to_string()));
        f.write_str(&parts.join(" + "))
    }
}

impl Serialize for ModelFormula {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ModelFormula {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn split_top_level(s: &str, sep: char) -> Result<Vec<&str>> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, ch) in s.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth < 0 {
                    return Err(parse_err(format!("unbalanced `)` in `{s}`")));
                }
            }
            c if c == sep && depth == 0 => {
                out.push(&s[start..i]);
                start = i + c.len_utf8();
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(parse_err(format!("unbalanced `(` in `{s}`")));
    }
    out.push(&s[start..]);
    Ok(out)
}

fn parse_err(message: String) -> Error {
    Error::Parse { line: 1, message }
}

fn parse_power(inner: &str, base: &str) -> Option<u32> {
    let rest = inner.strip_prefix(base)?;
    if rest.is_empty() {
        return Some(1);
    }
    rest.strip_prefix('^')?.trim().parse().ok().filter(|&j| j >= 1)
}

fn parse_atom(token: &str) -> Result<Atom> {
    let t: String = token.chars().filter(|c| !c.is_whitespace()).collect();
    let inner = t.strip_prefix("I(").and_then(|r| r.strip_suffix(')')).unwrap_or(&t);
    if let Some(j) = parse_power(inner, "k_t") {
        return Ok(Atom::Global(j));
    }
    if let Some(j) = parse_power(inner, "k_ct") {
        return Ok(Atom::Country(j));
    }
    match inner {
        "1" => return Ok(Atom::Intercept),
        "cohort" => return Ok(Atom::Cohort),
        _ => {}
    }
    let ident = !inner.is_empty()
        && inner.chars().next().is_some_and(|c| c.is_ascii_alphabetic())
        && inner.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.');
    if ident && !matches!(inner, "age" | "x" | "gender" | "g" | "country" | "c") {
        Ok(Atom::Extra(inner.to_string()))
    } else {
        Err(parse_err(format!("unrecognized term `{token}`")))
    }
}

fn parse_factor(token: &str) -> Option<Factor> {
    match token.trim() {
        "age" | "x" => Some(Factor::Age),
        "gender" | "g" => Some(Factor::Gender),
        _ => None,
    }
}

fn parse_group_factor(token: &str) -> Result<GroupFactor> {
    match token.trim() {
        "country" | "c" => Ok(GroupFactor::Country),
        "gender" | "g" => Ok(GroupFactor::Gender),
        "age" | "x" => Ok(GroupFactor::Age),
        other => Err(parse_err(format!("unknown grouping factor `{other}`"))),
    }
}

fn parse_fixed(token: &str) -> Result<FixedTerm> {
    let mut factors = Vec::new();
    let mut atom: Option<Atom> = None;
    for part in split_top_level(token, ':')? {
        let part = part.trim();
        if let Some(f) = parse_factor(part) {
            factors.push(f);
        } else {
            let a = parse_atom(part)?;
            if atom.replace(a).is_some() {
                return Err(parse_err(format!("term `{token}` has two numeric parts")));
            }
        }
    }
    Ok(FixedTerm::new(factors, atom.unwrap_or(Atom::Intercept)))
}

fn parse_random(inner: &str) -> Result<RandomTerm> {
    let (lhs, rhs) = inner
        .split_once('|')
        .ok_or_else(|| parse_err(format!("random term `({inner})` lacks `|`")))?;
    let mut intercept = true;
    let mut regressors = Vec::new();
    for part in split_top_level(lhs, '+')? {
        match part.trim() {
            "" => return Err(parse_err(format!("empty regressor in `({inner})`"))),
            "0" | "-1" => intercept = false,
            "1" => {}
            p => {
                let a = parse_atom(p)?;
                if !regressors.contains(&a) {
                    regressors.push(a);
                }
            }
        }
    }
    if intercept {
        regressors.insert(0, Atom::Intercept);
    }
    let mut grouping: Vec<GroupFactor> =
        rhs.split(':').map(parse_group_factor).collect::<Result<_>>()?;
    grouping.sort();
    grouping.dedup();
    Ok(RandomTerm { regressors, grouping })
}

impl FromStr for ModelFormula {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let body = match s.split_once('~') {
            Some((_, rhs)) => rhs,
            None => s,
        };
        let mut intercept = true;
        let mut fixed: Vec<FixedTerm> = Vec::new();
        let mut random = Vec::new();
        for token in split_top_level(body, '+')? {
            let token = token.trim();
            if token.is_empty() {
                return Err(parse_err(format!("empty term in `{s}`")));
            }
            if token == "0" || token == "-1" {
                intercept = false;
            } else if token == "1" {
            } else if let Some(inner) = token.strip_prefix('(').and_then(|t| t.strip_suffix(')')) {
                if inner.contains('|') {
                    random.push(parse_random(inner)?);
                } else {
                    return Err(parse_err(format!("unrecognized term `{token}`")));
                }
            } else {
                let term = parse_fixed(token)?;
                if !fixed.contains(&term) {
                    fixed.push(term);
                }
            }
        }
        fixed.retain(|t| !t.is_intercept());
        if intercept {
            fixed.insert(0, FixedTerm::intercept());
        }
        let formula = ModelFormula { fixed, random };
        formula.validate()?;
        Ok(formula)
    }
}

/// The candidate family with covariate polynomials up to `fixed_degree` and
/// random slopes on `k_t` up to `random_degree`.
pub fn candidate_formula(fixed_degree: u32, random_degree: u32) -> ModelFormula {
    let mut fixed = vec![
        FixedTerm::intercept(),
        FixedTerm::new(vec![Factor::Age], Atom::Intercept),
        FixedTerm::new(vec![Factor::Gender, Factor::Age], Atom::Intercept),
    ];
    for j in 1..=fixed_degree {
        fixed.push(FixedTerm::new(vec![], Atom::Global(j)));
        fixed.push(FixedTerm::new(vec![Factor::Gender, Factor::Age], Atom::Country(j)));
    }
    fixed.push(FixedTerm::new(vec![], Atom::Cohort));
    let mut regressors = vec![Atom::Intercept];
    regressors.extend((1..=random_degree.min(fixed_degree)).map(Atom::Global));
    regressors.push(Atom::Cohort);
    ModelFormula {
        fixed,
        random: vec![RandomTerm {
            regressors,
            grouping: vec![GroupFactor::Country, GroupFactor::Gender, GroupFactor::Age],
        }],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAXIMAL: &str = "age + gender:age + I(k_t) + gender:age:I(k_ct) + I(k_t^2) + gender:age:I(k_ct^2) + cohort + (I(k_t) + I(k_t^2) + cohort | country:gender:age)";
    const SELECTED: &str = "age + gender:age + gender:age:I(k_ct) + I(k_t^2) + gender:age:I(k_ct^2) + cohort + (I(k_t^2) + cohort | country:gender:age)";

    #[test]
    fn maximal_matches_candidate_builder() {
        let f: ModelFormula = MAXIMAL.parse().unwrap();
        assert_eq!(f, candidate_formula(2, 2));
        assert_eq!(f.degrees(), (2, 2));
        assert_eq!(f.random[0].regressors.len(), 4);
    }

    #[test]
    fn display_round_trips() {
        for s in [MAXIMAL, SELECTED, "I(k_t) + (I(k_t) | age)", "0 + age + (1 | country)", "cohort + (0 + cohort | age)"] {
            let f: ModelFormula = s.parse().unwrap();
            assert_eq!(f.to_string(), s);
            let json = serde_json::to_string(&f).unwrap();
            assert_eq!(serde_json::from_str::<ModelFormula>(&json).unwrap(), f);
        }
    }

    #[test]
    fn notation_aliases_and_response() {
        let a: ModelFormula = "y ~ x + g:x + I(k_t^2) + (I(k_t^2) | c:g:x)".parse().unwrap();
        let b: ModelFormula = "age + gender:age + I(k_t^2) + (I(k_t^2) | country:gender:age)".parse().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hierarchy_is_enforced() {
        assert!("age + (I(k_t) | age)".parse::<ModelFormula>().is_err());
        assert!("0 + I(k_t) + (1 | age)".parse::<ModelFormula>().is_err());
        assert!("GDP + (GDP | country)".parse::<ModelFormula>().is_ok());
    }

    #[test]
    fn malformed_input() {
        for bad in ["age + ", "(I(k_t) | )", "age + (I(k_t) | planet)", "age + I(k_t", "age + 3x", "I(k_t):I(k_t^2)"] {
            assert!(bad.parse::<ModelFormula>().is_err(), "{bad}");
        }
    }

    #[test]
    fn marginality() {
        let age = FixedTerm::new(vec![Factor::Age], Atom::Intercept);
        let gx = FixedTerm::new(vec![Factor::Gender, Factor::Age], Atom::Intercept);
        let gxk = FixedTerm::new(vec![Factor::Gender, Factor::Age], Atom::Country(1));
        assert!(age.is_marginal_to(&gx));
        assert!(gx.is_marginal_to(&gxk));
        assert!(!gxk.is_marginal_to(&gx));
        assert!(FixedTerm::intercept().is_marginal_to(&age));
        assert!(!FixedTerm::new(vec![], Atom::Global(1)).is_marginal_to(&gxk));
    }
}
