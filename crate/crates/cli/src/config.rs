//! Declarative run configuration read from TOML, with flag overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mortmix::benchmarks::{ErrorScale, SpecificDynamics};
use mortmix::mixedlm::ModelFormula;
use mortmix::panel::{AgeGrid, Gender};
use mortmix::selection::Criterion;
use serde::Deserialize;

use crate::error::CliError;

/// Environment variable naming the default data root.
pub const DATA_ENV: &str = "MORTMIX_DATA";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    /// Restricts every command to these populations, as `AUT` or `AUT:F`.
    pub populations: Option<Vec<String>>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub forecast: ForecastSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    pub valuation: Option<ValuationSection>,
    /// Directory relative paths resolve against; the config file's own.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding `{country}.Mx_{kind}.txt`; falls back to `MORTMIX_DATA`.
    pub root: Option<PathBuf>,
    pub countries: Vec<String>,
    /// `5x1` or `1x1`.
    pub kind: String,
    /// Per-country file overrides.
    pub paths: BTreeMap<String, PathBuf>,
    pub first_year: i32,
    pub last_year: i32,
    pub age_min: u32,
    pub age_max: u32,
    /// Ready-made panel CSV used instead of `<out>/panel.csv`.
    pub panel: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: None,
            countries: Vec::new(),
            kind: "5x1".into(),
            paths: BTreeMap::new(),
            first_year: 1961,
            last_year: 2019,
            age_min: 0,
            age_max: 110,
            panel: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub train_cutoff: i32,
    pub split_age: u32,
    pub formula: String,
    /// Starting point of backward selection.
    pub maximal: Option<String>,
    pub criterion: String,
    /// Absolute-residual threshold; no cleaning when absent.
    pub cleaning_threshold: Option<f64>,
    /// Formula fitted before cleaning; `maximal`, else `formula`, by default.
    pub cleaning_formula: Option<String>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            train_cutoff: 2010,
            split_age: mortmix::covariates::DEFAULT_SPLIT_AGE,
            formula: String::new(),
            maximal: None,
            criterion: "aic".into(),
            cleaning_threshold: None,
            cleaning_formula: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSection {
    pub horizon: usize,
    pub level: f64,
    /// Simulations per interval; 0 gives point forecasts only.
    pub n_sim: usize,
    /// Any of `lc` and `ll`.
    pub benchmarks: Vec<String>,
    /// `ar1` or `rwd` for the Li–Lee population factors.
    pub ll_dynamics: String,
}

impl Default for ForecastSection {
    fn default() -> Self {
        Self { horizon: 9, level: 0.95, n_sim: 1000, benchmarks: Vec::new(), ll_dynamics: "ar1".into() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// `log` or `natural`.
    pub scale: String,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self { scale: "log".into() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValuationSection {
    pub country: String,
    /// `lme` or `lc`.
    #[serde(default = "default_valuation_model")]
    pub model: String,
    /// LME formula; a per-age random intercept and trend slope by default.
    pub formula: Option<String>,
    #[serde(default = "default_valuation_split")]
    pub split_age: u32,
    pub portfolio: PathBuf,
    pub experience: Option<PathBuf>,
    #[serde(default = "default_valuation_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub valuation_year: Option<i32>,
    #[serde(default)]
    pub interest_rate: Option<f64>,
    #[serde(default)]
    pub retirement_age: Option<u32>,
    #[serde(default)]
    pub max_age: Option<u32>,
    #[serde(default)]
    pub n_sim: Option<usize>,
}

fn default_valuation_model() -> String {
    "lme".into()
}

fn default_valuation_split() -> u32 {
    65
}

fn default_valuation_horizon() -> usize {
    120
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub populations: Option<String>,
    pub horizon: Option<usize>,
    pub level: Option<f64>,
    pub nsim: Option<usize>,
}

fn config_err(key: &str, message: impl Into<String>) -> CliError {
    CliError::Config { key: key.to_string(), message: message.into() }
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| config_err("config", format!("cannot read {}: {e}", p.display())))?;
                let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| {
                    let key = e.span().map(|s| key_at(&text, s.start)).unwrap_or_else(|| "config".into());
                    config_err(&key, e.message().to_string())
                })?;
                cfg.base_dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
                cfg
            }
            None => RunConfig::default(),
        };
        cfg.apply(overrides)?;
        Ok(cfg)
    }

    fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(out) = &o.out {
            self.out_dir = Some(out.clone());
        }
        if o.seed.is_some() {
            self.seed = o.seed;
        }
        if let Some(list) = &o.populations {
            self.populations = Some(list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect());
        }
        if let Some(h) = o.horizon {
            self.forecast.horizon = h;
        }
        if let Some(l) = o.level {
            self.forecast.level = l;
        }
        if let Some(n) = o.nsim {
            self.forecast.n_sim = n;
            if let Some(v) = self.valuation.as_mut() {
                v.n_sim = Some(n);
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> Result<PathBuf, CliError> {
        let dir = self.out_dir.as_deref().ok_or_else(|| config_err("out_dir", "no output directory (set out_dir or --out)"))?;
        let dir = self.resolve(dir);
        std::fs::create_dir_all(&dir).map_err(|e| config_err("out_dir", format!("cannot create {}: {e}", dir.display())))?;
        Ok(dir)
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| config_err("seed", "simulating commands need a seed (set seed or --seed)"))
    }

    pub fn data_root(&self) -> Result<PathBuf, CliError> {
        match &self.data.root {
            Some(r) => Ok(self.resolve(r)),
            None => std::env::var_os(DATA_ENV)
                .map(PathBuf::from)
                .ok_or_else(|| config_err("data.root", format!("no data root (set data.root or {DATA_ENV})"))),
        }
    }

    pub fn age_grid(&self) -> Result<AgeGrid, CliError> {
        let full = match self.data.kind.as_str() {
            "5x1" => AgeGrid::hmd_five_year(),
            "1x1" => AgeGrid::hmd_single_year(),
            other => return Err(config_err("data.kind", format!("unknown kind `{other}` (expected 5x1 or 1x1)"))),
        };
        full.restrict(self.data.age_min, self.data.age_max)
            .map_err(|e| config_err("data.age_min", e.to_string()))
    }

    pub fn formula(&self) -> Result<ModelFormula, CliError> {
        parse_formula(&self.model.formula, "model.formula")
    }

    pub fn maximal(&self) -> Result<ModelFormula, CliError> {
        let text = self.model.maximal.as_deref().ok_or_else(|| config_err("model.maximal", "selection needs a maximal formula"))?;
        parse_formula(text, "model.maximal")
    }

    pub fn cleaning(&self) -> Result<Option<(f64, ModelFormula)>, CliError> {
        let Some(t) = self.model.cleaning_threshold else {
            return Ok(None);
        };
        if !(t > 0.0) {
            return Err(config_err("model.cleaning_threshold", format!("must be positive, got {t}")));
        }
        let formula = match (&self.model.cleaning_formula, &self.model.maximal) {
            (Some(f), _) => parse_formula(f, "model.cleaning_formula")?,
            (None, Some(m)) => parse_formula(m, "model.maximal")?,
            (None, None) => self.formula()?,
        };
        Ok(Some((t, formula)))
    }

    pub fn criterion(&self) -> Result<Criterion, CliError> {
        self.model.criterion.parse().map_err(|e: mortmix::Error| config_err("model.criterion", e.to_string()))
    }

    pub fn horizon(&self) -> Result<usize, CliError> {
        if self.forecast.horizon == 0 {
            return Err(config_err("forecast.horizon", "must be at least 1"));
        }
        Ok(self.forecast.horizon)
    }

    pub fn level(&self) -> Result<f64, CliError> {
        let l = self.forecast.level;
        if !(l > 0.0 && l < 1.0) {
            return Err(config_err("forecast.level", format!("must lie in (0, 1), got {l}")));
        }
        Ok(l)
    }

    pub fn benchmarks(&self) -> Result<(bool, bool), CliError> {
        let mut out = (false, false);
        for b in &self.forecast.benchmarks {
            match b.to_ascii_lowercase().as_str() {
                "lc" => out.0 = true,
                "ll" => out.1 = true,
                other => return Err(config_err("forecast.benchmarks", format!("unknown benchmark `{other}` (expected lc or ll)"))),
            }
        }
        Ok(out)
    }

    pub fn ll_dynamics(&self) -> Result<SpecificDynamics, CliError> {
        match self.forecast.ll_dynamics.to_ascii_lowercase().as_str() {
            "ar1" => Ok(SpecificDynamics::Ar1),
            "rwd" => Ok(SpecificDynamics::Rwd),
            other => Err(config_err("forecast.ll_dynamics", format!("unknown dynamics `{other}` (expected ar1 or rwd)"))),
        }
    }

    pub fn scale(&self) -> Result<ErrorScale, CliError> {
        self.evaluate.scale.parse().map_err(|e: mortmix::Error| config_err("evaluate.scale", e.to_string()))
    }

    pub fn valuation(&self) -> Result<&ValuationSection, CliError> {
        self.valuation.as_ref().ok_or_else(|| config_err("valuation", "the value command needs a [valuation] section"))
    }

    /// Population filter: `None` keeps everything.
    pub fn population_filter(&self) -> Result<Option<Vec<(String, Option<Gender>)>>, CliError> {
        let Some(list) = &self.populations else {
            return Ok(None);
        };
        list.iter()
            .map(|p| match p.split_once(':') {
                None => Ok((p.clone(), None)),
                Some((c, g)) => g
                    .parse::<Gender>()
                    .map(|g| (c.to_string(), Some(g)))
                    .map_err(|e| config_err("populations", format!("`{p}`: {e}"))),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }
}

pub fn parse_formula(text: &str, key: &str) -> Result<ModelFormula, CliError> {
    if text.trim().is_empty() {
        return Err(config_err(key, "formula is empty"));
    }
    let f: ModelFormula = text.parse().map_err(|e: mortmix::Error| config_err(key, e.to_string()))?;
    f.validate().map_err(|e| config_err(key, e.to_string()))?;
    Ok(f)
}

/// Dotted key of the TOML entry containing byte `offset`.
fn key_at(text: &str, offset: usize) -> String {
    let mut section = String::new();
    let mut key = String::new();
    let mut pos = 0;
    for line in text.lines() {
        let t = line.trim();
        if t.starts_with('[') && t.ends_with(']') {
            section = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            key.clear();
        } else if let Some((k, _)) = t.split_once('=') {
            key = k.trim().to_string();
        }
        pos += line.len() + 1;
        if pos > offset {
            break;
        }
    }
    match (section.is_empty(), key.is_empty()) {
        (true, true) => "config".into(),
        (true, false) => key,
        (false, true) => section,
        (false, false) => format!("{section}.{key}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_of_an_offending_entry() {
        let text = "seed = 1\n[forecast]\nhorizon = \"nine\"\n";
        let e = toml::from_str::<RunConfig>(text).unwrap_err();
        assert_eq!(key_at(text, e.span().unwrap().start), "forecast.horizon");
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg: RunConfig = toml::from_str("seed = 3\n[forecast]\nhorizon = 4\n").unwrap();
        let o = Overrides { seed: Some(9), horizon: Some(12), populations: Some("AUT, CZE:M".into()), ..Default::default() };
        cfg.apply(&o).unwrap();
        assert_eq!(cfg.seed, Some(9));
        assert_eq!(cfg.forecast.horizon, 12);
        let filter = cfg.population_filter().unwrap().unwrap();
        assert_eq!(filter, vec![("AUT".to_string(), None), ("CZE".to_string(), Some(Gender::Male))]);
    }

    #[test]
    fn invalid_values_name_their_key() {
        let cfg: RunConfig = toml::from_str("[forecast]\nlevel = 1.5\n[model]\ncriterion = \"cp\"\n").unwrap();
        let key = |r: Result<(), CliError>| match r.unwrap_err() {
            CliError::Config { key, .. } => key,
            other => panic!("{other}"),
        };
        assert_eq!(key(cfg.level().map(|_| ())), "forecast.level");
        assert_eq!(key(cfg.criterion().map(|_| ())), "model.criterion");
        assert_eq!(key(cfg.seed().map(|_| ())), "seed");
        assert_eq!(key(cfg.formula().map(|_| ())), "model.formula");
    }
}
