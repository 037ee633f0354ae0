//! One runner per subcommand. Every runner reads its inputs from the
//! configuration and the output directory and writes its artifacts there.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use mortmix::actuarial::{read_portfolio, value_portfolio, ExperienceTable, LcScenario, LmeScenario, ValuationConfig};
use mortmix::benchmarks::{
    compare_errors, fit_lc, fit_ll, forecast_lc, forecast_ll, mse, write_comparison_csv, write_errors_csv, LcFit,
    PopulationError,
};
use mortmix::covariates::{CovariateSet, CovariateWalks, Segment};
use mortmix::lifetable::{build_life_table, life_expectancy_series, write_series_csv, ExpectancyPoint};
use mortmix::mixedlm::{build_design, fit_reml, FitOptions, FittedMixedModel, ModelFormula};
use mortmix::panel::{build_panel, parse_mx_file, Gender, MortalityPanel};
use mortmix::projection::{forecast_cells, predict_rates, prediction_intervals, to_lc_form, IntervalOptions, RateForecast};
use mortmix::selection::{backward_select, clean_refit, CleanOutcome, SelectionOptions};

use crate::config::{parse_formula, RunConfig};
use crate::error::CliError;

pub const PANEL: &str = "panel.csv";
pub const COVARIATES: &str = "covariates.csv";
pub const COVARIATES_FORECAST: &str = "covariates_forecast.csv";
pub const WALKS: &str = "walks.json";
pub const FIT: &str = "fit.json";
pub const FORECAST: &str = "forecast.csv";
pub const FORECAST_LC: &str = "forecast_lc.csv";
pub const FORECAST_LL: &str = "forecast_ll.csv";

type Outcome = Result<(), CliError>;

fn config_err(key: &str, message: impl Into<String>) -> CliError {
    CliError::Config { key: key.to_string(), message: message.into() }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn open(path: &Path, producer: &str) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::Data(format!("{}: {e} (produced by `{producer}`)", path.display())))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_text(path: &Path, producer: &str) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e} (produced by `{producer}`)", path.display())))
}

fn keep(filter: &Option<Vec<(String, Option<Gender>)>>, country: &str, gender: Gender) -> bool {
    match filter {
        None => true,
        Some(list) => list.iter().any(|(c, g)| c == country && g.is_none_or(|g| g == gender)),
    }
}

/// The panel of `<out>/panel.csv` (or `data.panel`), restricted to the
/// selected populations.
fn load_panel(cfg: &RunConfig, out: &Path) -> Result<MortalityPanel, CliError> {
    let path = match &cfg.data.panel {
        Some(p) => cfg.resolve(p),
        None => out.join(PANEL),
    };
    let filter = cfg.population_filter()?;
    let panel = MortalityPanel::read_csv(open(&path, "ingest")?)?;
    if filter.is_none() {
        return Ok(panel);
    }
    let kept = panel.filter(|r| keep(&filter, &r.key.country, r.key.gender))?;
    if kept.is_empty() {
        return Err(config_err("populations", "no panel records match the selected populations"));
    }
    Ok(kept)
}

fn training(cfg: &RunConfig, panel: &MortalityPanel) -> Result<MortalityPanel, CliError> {
    let cutoff = cfg.model.train_cutoff;
    let (first, last) = panel.year_range();
    if cutoff < first || cutoff > last {
        return Err(config_err("model.train_cutoff", format!("{cutoff} is outside the panel years {first}-{last}")));
    }
    Ok(panel.filter(|r| r.key.year <= cutoff)?)
}

fn read_covariates(cfg: &RunConfig, path: &Path) -> Result<CovariateSet, CliError> {
    Ok(CovariateSet::read_csv(open(path, "covariates")?, cfg.model.split_age)?)
}

fn fit_options() -> FitOptions {
    FitOptions::default()
}

pub fn ingest(cfg: &RunConfig) -> Outcome {
    let out = cfg.out_dir()?;
    let filter = cfg.population_filter()?;
    let mut countries: Vec<String> = cfg.data.countries.clone();
    if let Some(list) = &filter {
        countries.retain(|c| list.iter().any(|(f, _)| f == c));
        for (c, _) in list {
            if !countries.contains(c) {
                countries.push(c.clone());
            }
        }
    }
    if countries.is_empty() {
        return Err(config_err("data.countries", "no countries to ingest"));
    }
    let grid = cfg.age_grid()?;
    let kind = &cfg.data.kind;
    let mut tables = Vec::with_capacity(countries.len());
    for c in &countries {
        let path = match cfg.data.paths.get(c) {
            Some(p) => cfg.resolve(p),
            None => {
                let root = cfg.data_root()?;
                let name = format!("{c}.Mx_{kind}.txt");
                let nested = root.join(format!("Mx_{kind}")).join(&name);
                if nested.exists() { nested } else { root.join(name) }
            }
        };
        let file = File::open(&path).map_err(|e| CliError::io(&path, e))?;
        tables.push(parse_mx_file(file, c)?);
    }
    let panel = build_panel(&tables, (cfg.data.first_year, cfg.data.last_year), &grid)?;
    let panel = panel.filter(|r| keep(&filter, &r.key.country, r.key.gender))?;
    panel.write_csv(create(&out.join(PANEL))?)?;
    let years = panel.years().len();
    for (c, g) in panel.populations() {
        println!("{c} {g}: {} age groups x {years} years", grid.len());
    }
    Ok(())
}

pub fn covariates(cfg: &RunConfig) -> Outcome {
    let out = cfg.out_dir()?;
    let panel = load_panel(cfg, &out)?;
    let split = cfg.model.split_age;
    let set = CovariateSet::from_panel(&panel, split).map_err(|e| config_err("model.split_age", e.to_string()))?;
    set.write_csv(create(&out.join(COVARIATES))?)?;
    let train = set.truncated(cfg.model.train_cutoff);
    let walks = CovariateWalks::fit(&train)?;
    let json = serde_json::to_string_pretty(&walks).map_err(|e| CliError::Data(e.to_string()))?;
    write_text(&out.join(WALKS), &json)?;
    let extended = walks.forecast_set(&train, cfg.horizon()?);
    extended.write_csv(create(&out.join(COVARIATES_FORECAST))?)?;
    extended.write_global_trend_csv(create(&out.join("global_trend.csv"))?)?;
    extended.write_country_trends_csv(create(&out.join("country_trends.csv"))?)?;
    if let Some(w) = &walks.global {
        println!("global: drift {:.5}, innovation variance {:.6}", w.drift, w.innovation_variance);
    }
    for (c, m) in &walks.countries {
        let y = &m[&Segment::Young];
        let o = &m[&Segment::Old];
        println!(
            "{c}: young drift {:.5} (variance {:.6}), old drift {:.5} (variance {:.6})",
            y.drift, y.innovation_variance, o.drift, o.innovation_variance
        );
    }
    Ok(())
}

/// Cleans the training panel when configured, writing the report.
fn maybe_clean(cfg: &RunConfig, out: &Path, train: MortalityPanel, covs: &CovariateSet) -> Result<(MortalityPanel, Option<CleanOutcome>), CliError> {
    let Some((threshold, formula)) = cfg.cleaning()? else {
        return Ok((train, None));
    };
    let outcome = clean_refit(&train, covs, &formula, threshold, cfg.model.split_age, &fit_options())?;
    let report = serde_json::to_string_pretty(&outcome.report).map_err(|e| CliError::Data(e.to_string()))?;
    write_text(&out.join("cleaning.json"), &report)?;
    outcome.report.write_dropped_csv(create(&out.join("dropped.csv"))?)?;
    println!(
        "cleaning: kept {} of {} records ({:.3})",
        outcome.report.n_after, outcome.report.n_before, outcome.report.retained_fraction
    );
    Ok((outcome.panel.clone(), Some(outcome)))
}

fn fit_on(cfg: &RunConfig, panel: &MortalityPanel, covs: &CovariateSet, formula: &ModelFormula) -> Result<FittedMixedModel, CliError> {
    let design = build_design(panel, covs, formula, cfg.model.split_age)?;
    Ok(fit_reml(&design, &fit_options())?)
}

pub fn fit(cfg: &RunConfig) -> Outcome {
    let out = cfg.out_dir()?;
    let formula = cfg.formula()?;
    let panel = load_panel(cfg, &out)?;
    let covs = read_covariates(cfg, &out.join(COVARIATES))?;
    let train = training(cfg, &panel)?;
    let (train, cleaned) = maybe_clean(cfg, &out, train, &covs)?;
    let model = match cleaned {
        Some(c) if c.refit.formula.as_ref() == Some(&formula) => c.refit,
        _ => fit_on(cfg, &train, &covs, &formula)?,
    };
    write_text(&out.join(FIT), &model.to_json()?)?;
    model.write_fixed_effects_csv(create(&out.join("fixed_effects.csv"))?)?;
    model.write_blups_csv(create(&out.join("blups.csv"))?)?;
    model.write_variance_csv(create(&out.join("variance_components.csv"))?)?;
    let diagnostics = serde_json::to_string_pretty(&model.residual_diagnostics()?).map_err(|e| CliError::Data(e.to_string()))?;
    write_text(&out.join("diagnostics.json"), &diagnostics)?;

    let pops = train.populations();
    if let [(c, g)] = pops.as_slice() {
        if let Ok(form) = to_lc_form(&model, c, *g) {
            let mut text = String::from("age_lower,a,b\n");
            for ((age, a), b) in form.ages.iter().zip(&form.a).zip(&form.b) {
                text.push_str(&format!("{},{a:?},{b:?}\n", age.lower));
            }
            write_text(&out.join("lc_form.csv"), &text)?;
        }
    }

    println!(
        "REML criterion {:.3}, AIC {:.3}, BIC {:.3}, ICC {:.4}, converged {}",
        model.criterion,
        model.aic(),
        model.bic(),
        model.icc(),
        model.converged
    );
    let mut per_pop: BTreeMap<(String, Gender), (usize, f64)> = BTreeMap::new();
    for (k, r) in model.keys.iter().zip(&model.residuals) {
        let e = per_pop.entry((k.country.clone(), k.gender)).or_default();
        e.0 += 1;
        e.1 += r * r;
    }
    for ((c, g), (n, ss)) in per_pop {
        println!("{c} {g}: {n} records, residual RMS {:.5}", (ss / n as f64).sqrt());
    }
    Ok(())
}

pub fn select(cfg: &RunConfig) -> Outcome {
    let out = cfg.out_dir()?;
    let maximal = cfg.maximal()?;
    let criterion = cfg.criterion()?;
    let panel = load_panel(cfg, &out)?;
    let covs = read_covariates(cfg, &out.join(COVARIATES))?;
    let train = training(cfg, &panel)?;
    let (train, _) = maybe_clean(cfg, &out, train, &covs)?;
    let opts = SelectionOptions { criterion, split_age: cfg.model.split_age, fit: fit_options() };
    let trace = backward_select(&train, &covs, &maximal, &opts)?;
    let json = serde_json::to_string_pretty(&trace).map_err(|e| CliError::Data(e.to_string()))?;
    write_text(&out.join("selection.json"), &json)?;
    write_text(&out.join("selected_formula.txt"), &format!("{}\n", trace.final_formula))?;
    for s in &trace.steps {
        println!("{:?}: drop {} ({:.3} -> {:.3})", s.phase, s.removed, s.criterion_before, s.criterion_after);
    }
    println!("selected: {}", trace.final_formula);
    Ok(())
}

fn summarize(label: &str, f: &RateForecast) {
    let mut per: BTreeMap<(String, Gender), (usize, f64, f64)> = BTreeMap::new();
    for (k, c) in &f.cells {
        let e = per.entry((k.country.clone(), k.gender)).or_default();
        e.0 += 1;
        e.1 += c.point;
        e.2 += c.upper - c.lower;
    }
    for ((c, g), (n, p, w)) in per {
        println!("{label} {c} {g}: {n} cells, mean log rate {:.4}, mean interval width {:.4}", p / n as f64, w / n as f64);
    }
}

pub fn forecast(cfg: &RunConfig) -> Outcome {
    let out = cfg.out_dir()?;
    let horizon = cfg.horizon()?;
    let level = cfg.level()?;
    let n_sim = cfg.forecast.n_sim;
    let (with_lc, with_ll) = cfg.benchmarks()?;
    let seed = if n_sim > 0 { Some(cfg.seed()?) } else { None };
    let panel = load_panel(cfg, &out)?;
    let model = FittedMixedModel::from_json(&read_text(&out.join(FIT), "fit")?)?;
    let covs = read_covariates(cfg, &out.join(COVARIATES_FORECAST))?;
    let cutoff = cfg.model.train_cutoff;
    let pops = panel.populations();
    let cells = forecast_cells(&pops, panel.age_grid(), cutoff + 1..=cutoff + horizon as i32);
    let opts = IntervalOptions { n_sim, level, seed: seed.unwrap_or_default() };
    let lme = match seed {
        Some(_) => prediction_intervals(&model, &covs, &cells, &opts)?,
        None => predict_rates(&model, &covs, &cells)?,
    };
    lme.write_csv(create(&out.join(FORECAST))?)?;
    summarize("LME", &lme);

    if with_lc || with_ll {
        let train = training(cfg, &panel)?;
        if with_lc {
            let mut lc = RateForecast { cells: BTreeMap::new(), level: seed.map(|_| level) };
            for (c, g) in &pops {
                let f: LcFit = fit_lc(&train, c, *g)?;
                lc.cells.extend(forecast_lc(&f, horizon, &opts)?.cells);
            }
            lc.write_csv(create(&out.join(FORECAST_LC))?)?;
            summarize("LC", &lc);
        }
        if with_ll {
            let ll = forecast_ll(&fit_ll(&train, &pops, cfg.ll_dynamics()?)?, horizon)?;
            ll.write_csv(create(&out.join(FORECAST_LL))?)?;
            summarize("LL", &ll);
        }
    }
    Ok(())
}

fn read_forecast(cfg: &RunConfig, panel: &MortalityPanel, path: &Path) -> Result<RateForecast, CliError> {
    let level = if cfg.forecast.n_sim > 0 { Some(cfg.level()?) } else { None };
    Ok(RateForecast::read_csv(open(path, "forecast")?, panel.age_grid(), level)?)
}

pub fn evaluate(cfg: &RunConfig) -> Outcome {
    let out = cfg.out_dir()?;
    let scale = cfg.scale()?;
    let (with_lc, with_ll) = cfg.benchmarks()?;
    let panel = load_panel(cfg, &out)?;
    let cutoff = cfg.model.train_cutoff;
    if panel.year_range().1 <= cutoff {
        return Err(config_err("model.train_cutoff", format!("no panel years after {cutoff} to evaluate against")));
    }
    let test = panel.filter(|r| r.key.year > cutoff)?;
    let lme = mse(&read_forecast(cfg, &panel, &out.join(FORECAST))?, &test, scale)?;
    write_errors_csv(&lme, create(&out.join("mse.csv"))?)?;
    let bench = |file: &str, tag: &str| -> Result<Vec<PopulationError>, CliError> {
        let errors = mse(&read_forecast(cfg, &panel, &out.join(file))?, &test, scale)?;
        write_errors_csv(&errors, create(&out.join(format!("mse_{tag}.csv")))?)?;
        let rows = compare_errors(&lme, &errors)?;
        write_comparison_csv(&rows, create(&out.join(format!("comparison_{tag}.csv")))?)?;
        Ok(errors)
    };
    let lc = if with_lc { Some(bench(FORECAST_LC, "lc")?) } else { None };
    let ll = if with_ll { Some(bench(FORECAST_LL, "ll")?) } else { None };
    let find = |list: &Option<Vec<PopulationError>>, e: &PopulationError| {
        list.as_ref()
            .and_then(|l| l.iter().find(|x| x.country == e.country && x.gender == e.gender))
            .map(|x| format!(", {:.6e}", x.mse))
            .unwrap_or_default()
    };
    for e in &lme {
        println!("{} {}: MSE {:.6e}{}{}", e.country, e.gender, e.mse, find(&lc, e), find(&ll, e));
    }
    Ok(())
}

pub fn lifetable(cfg: &RunConfig) -> Outcome {
    let out = cfg.out_dir()?;
    let panel = load_panel(cfg, &out)?;
    let forecast = read_forecast(cfg, &panel, &out.join(FORECAST))?;
    let grid = panel.age_grid().clone();
    for (c, g) in forecast.populations() {
        let mut series: Vec<ExpectancyPoint> = Vec::new();
        let (ages, years, m) = panel.population_matrix(&c, g)?;
        if ages.as_slice() == grid.groups() {
            for (t, &year) in years.iter().enumerate() {
                let rates: Vec<f64> = m.column(t).iter().map(|v| v.exp()).collect();
                let e0 = build_life_table(&ages, &rates)?.e0();
                series.push(ExpectancyPoint { year, point: e0, lower: e0, upper: e0 });
            }
        }
        let last_observed = series.last().map(|p| p.year).unwrap_or(i32::MIN);
        let projected = life_expectancy_series(&forecast, &c, g, &grid)?;
        series.extend(projected.iter().filter(|p| p.year > last_observed));
        write_series_csv(&series, create(&out.join(format!("e0_{c}_{}.csv", g.code())))?)?;
        if let Some(p) = projected.last() {
            println!("{c} {g}: e0 {} = {:.2} [{:.2}, {:.2}]", p.year, p.point, p.lower, p.upper);
        }
    }
    Ok(())
}

pub fn value(cfg: &RunConfig) -> Outcome {
    let out = cfg.out_dir()?;
    let v = cfg.valuation()?;
    let seed = cfg.seed()?;
    let defaults = ValuationConfig::default();
    let vc = ValuationConfig {
        valuation_year: v.valuation_year.unwrap_or(defaults.valuation_year),
        interest_rate: v.interest_rate.unwrap_or(defaults.interest_rate),
        retirement_age: v.retirement_age.unwrap_or(defaults.retirement_age),
        max_age: v.max_age.unwrap_or(defaults.max_age),
        n_sim: v.n_sim.unwrap_or(defaults.n_sim),
        seed,
    };
    vc.validate().map_err(|e| config_err("valuation", e.to_string()))?;
    let portfolio_path = cfg.resolve(&v.portfolio);
    let portfolio = read_portfolio(File::open(&portfolio_path).map_err(|e| CliError::io(&portfolio_path, e))?)?;
    if portfolio.is_empty() {
        return Err(CliError::Data(format!("{}: portfolio is empty", portfolio_path.display())));
    }
    let experience = match &v.experience {
        Some(p) => {
            let path = cfg.resolve(p);
            Some(ExperienceTable::read_csv(File::open(&path).map_err(|e| CliError::io(&path, e))?)?)
        }
        None => None,
    };
    let genders: BTreeSet<Gender> = portfolio.iter().map(|p| p.gender).collect();
    let panel = load_panel(cfg, &out)?;
    let sub = panel.filter(|r| r.key.country == v.country && genders.contains(&r.key.gender))?;
    if sub.is_empty() {
        return Err(config_err("valuation.country", format!("panel has no records for {}", v.country)));
    }
    let result = match v.model.to_ascii_lowercase().as_str() {
        "lme" => {
            let text = match &v.formula {
                Some(f) => f.clone(),
                None if genders.len() == 1 => "I(k_t) + (1 + I(k_t) | age)".into(),
                None => "I(k_t) + (1 + I(k_t) | gender:age)".into(),
            };
            let formula = parse_formula(&text, "valuation.formula")?;
            let covs = CovariateSet::from_panel(&sub, v.split_age).map_err(|e| config_err("valuation.split_age", e.to_string()))?;
            let design = build_design(&sub, &covs, &formula, v.split_age)?;
            let model = fit_reml(&design, &fit_options())?;
            let walks = CovariateWalks::fit(&covs)?;
            let scenario = LmeScenario::new(&model, &v.country, covs, walks, v.horizon);
            value_portfolio(&portfolio, &scenario, experience.as_ref(), &vc)?
        }
        "lc" => {
            let fits: Vec<LcFit> = genders.iter().map(|g| fit_lc(&sub, &v.country, *g)).collect::<Result<_, _>>()?;
            let scenario = LcScenario { fits: fits.iter().map(|f| (f.gender, f)).collect(), horizon: v.horizon };
            value_portfolio(&portfolio, &scenario, experience.as_ref(), &vc)?
        }
        other => return Err(config_err("valuation.model", format!("unknown model `{other}` (expected lme or lc)"))),
    };
    write_text(&out.join("valuation.json"), &result.to_json()?)?;
    println!(
        "{} {}: BEL {:.2}, SCR {:.2} ({} paths, seed {})",
        v.country,
        genders.iter().map(|g| g.code()).collect::<Vec<_>>().join(","),
        result.bel,
        result.scr,
        result.n_sim,
        result.seed
    );
    Ok(())
}
