//! Fitted mixed models and their summaries.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::design::{DesignLayout, DesignMatrices};
use super::formula::ModelFormula;
use super::optimize::NelderMeadOptions;
use super::reml::{theta_len, Method, RemlProblem};
use crate::covariates::CovariateSet;
use crate::error::{Error, Result};
use crate::panel::CellKey;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FitOptions {
    pub optimizer: NelderMeadOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffect {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
}

/// Estimated covariance and predicted effects of one random term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomComponent {
    pub grouping: String,
    pub regressors: Vec<String>,
    pub levels: Vec<String>,
    pub psi: Vec<Vec<f64>>,
    pub std_devs: Vec<f64>,
    pub correlations: Vec<Vec<f64>>,
    /// One row of predicted effects per level.
    pub blups: Vec<Vec<f64>>,
    /// Conditional covariance of each level's effects given the data and
    /// the fixed effects.
    pub cond_var: Vec<Vec<Vec<f64>>>,
    /// Per level, the `q × p` change of the conditional mode per unit
    /// change of the fixed effects away from their estimate.
    #[serde(default)]
    pub mode_shift: Vec<Vec<Vec<f64>>>,
}

impl RandomComponent {
    pub fn q(&self) -> usize {
        self.regressors.len()
    }

    pub fn psi_matrix(&self) -> DMatrix<f64> {
        to_matrix(&self.psi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedMixedModel {
    pub formula: Option<ModelFormula>,
    pub method: Method,
    pub fixed: Vec<FixedEffect>,
    pub beta_cov: Vec<Vec<f64>>,
    pub random: Vec<RandomComponent>,
    pub sigma2: f64,
    /// Minimized deviance: -2 (restricted) log-likelihood.
    pub criterion: f64,
    pub loglik: f64,
    pub theta: Vec<f64>,
    pub n_obs: usize,
    pub n_params: usize,
    pub converged: bool,
    pub singular: bool,
    pub evaluations: usize,
    pub layout: Option<DesignLayout>,
    #[serde(skip)]
    pub fitted: Vec<f64>,
    #[serde(skip)]
    pub residuals: Vec<f64>,
    #[serde(skip)]
    pub keys: Vec<CellKey>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InformationCriteria {
    pub loglik: f64,
    pub n_params: usize,
    pub n_obs: usize,
    pub aic: f64,
    pub bic: f64,
}

/// AIC and BIC from a log-likelihood, parameter count and sample size.
pub fn information_criteria(loglik: f64, n_params: usize, n_obs: usize) -> InformationCriteria {
    let d = n_params as f64;
    InformationCriteria {
        loglik,
        n_params,
        n_obs,
        aic: -2.0 * loglik + 2.0 * d,
        bic: -2.0 * loglik + (n_obs as f64).ln() * d,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceShare {
    pub component: String,
    pub variance: f64,
    pub share: f64,
}

/// Share of total variance carried by the random effects.
pub fn icc_from_variances(random_variances: &[f64], sigma2: f64) -> f64 {
    let between: f64 = random_variances.iter().sum();
    if between + sigma2 == 0.0 {
        return 0.0;
    }
    between / (between + sigma2)
}

/// Rows of (component, variance, share) for the given variances; shares
/// sum to one unless every variance is zero.
pub fn decompose(components: Vec<(String, f64)>) -> Vec<VarianceShare> {
    let total: f64 = components.iter().map(|c| c.1).sum();
    components
        .into_iter()
        .map(|(component, variance)| VarianceShare {
            component,
            variance,
            share: if total > 0.0 { variance / total } else { 0.0 },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlupRow {
    pub group_key: String,
    pub regressor: String,
    pub value: f64,
}

/// Design of one cell: fixed row plus, per random term, the level index
/// (if seen in training) and regressor values.
#[derive(Debug, Clone, PartialEq)]
pub struct CellDesign {
    pub x: Vec<f64>,
    pub random: Vec<(Option<usize>, Vec<f64>)>,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(nr, nc, |i, j| rows[i][j])
}

/// Fits by REML.
pub fn fit_reml(design: &DesignMatrices, opts: &FitOptions) -> Result<FittedMixedModel> {
    fit(design, Method::Reml, opts)
}

/// `-(V_g / σ²) Z_gᵀ X_g` for each level `g` of term `r`, where `V_g` is
/// the conditional covariance of its effects.
fn mode_shifts(design: &DesignMatrices, r: usize, cond_var: &[DMatrix<f64>], sigma2: f64) -> Vec<Vec<Vec<f64>>> {
    let term = &design.terms[r];
    let (q, p) = (term.q(), design.p());
    let mut cross = vec![DMatrix::<f64>::zeros(q, p); term.n_levels()];
    for i in 0..design.n() {
        let z = term.values.row(i).transpose();
        cross[term.group_of_row[i]] += z * design.x.row(i);
    }
    cross
        .iter()
        .zip(cond_var)
        .map(|(c, v)| {
            let shift = if sigma2 > 0.0 { -(v * c) / sigma2 } else { DMatrix::zeros(q, p) };
            to_rows(&shift)
        })
        .collect()
}

/// Fits by REML or maximum likelihood.
pub fn fit(design: &DesignMatrices, method: Method, opts: &FitOptions) -> Result<FittedMixedModel> {
    let problem = RemlProblem::new(design)?;
    let sol = problem.fit(method, &opts.optimizer)?;
    let p = design.p();
    let fixed = (0..p)
        .map(|j| FixedEffect {
            name: design.x_names[j].clone(),
            estimate: sol.beta[j],
            std_error: sol.beta_cov[(j, j)].max(0.0).sqrt(),
        })
        .collect();
    let mut random = Vec::with_capacity(design.terms.len());
    for (r, term) in design.terms.iter().enumerate() {
        let lam = &sol.lambdas[r];
        let mut psi = lam * lam.transpose() * sol.sigma2;
        psi = (&psi + psi.transpose()) * 0.5;
        let sd: Vec<f64> = (0..term.q()).map(|k| psi[(k, k)].max(0.0).sqrt()).collect();
        let corr = DMatrix::from_fn(term.q(), term.q(), |i, j| {
            if i == j {
                1.0
            } else if sd[i] > 0.0 && sd[j] > 0.0 {
                psi[(i, j)] / (sd[i] * sd[j])
            } else {
                0.0
            }
        });
        random.push(RandomComponent {
            grouping: term.grouping.clone(),
            regressors: term.regressors.clone(),
            levels: term.levels.clone(),
            psi: to_rows(&psi),
            std_devs: sd,
            correlations: to_rows(&corr),
            blups: to_rows(&sol.blups[r]),
            cond_var: sol.cond_var[r].iter().map(to_rows).collect(),
            mode_shift: mode_shifts(design, r, &sol.cond_var[r], sol.sigma2),
        });
    }
    let n_params = p + design.terms.iter().map(|t| theta_len(t.q())).sum::<usize>() + 1;
    Ok(FittedMixedModel {
        formula: design.layout.as_ref().map(|l| l.formula.clone()),
        method,
        fixed,
        beta_cov: to_rows(&sol.beta_cov),
        random,
        sigma2: sol.sigma2,
        criterion: sol.criterion,
        loglik: -0.5 * sol.criterion,
        theta: sol.theta,
        n_obs: design.n(),
        n_params,
        converged: sol.converged,
        singular: sol.singular,
        evaluations: sol.evaluations,
        layout: design.layout.clone(),
        fitted: sol.fitted.iter().copied().collect(),
        residuals: sol.residuals.iter().copied().collect(),
        keys: design.keys.clone(),
    })
}

impl FittedMixedModel {
    pub fn beta(&self) -> DVector<f64> {
        DVector::from_iterator(self.fixed.len(), self.fixed.iter().map(|f| f.estimate))
    }

    pub fn beta_cov_matrix(&self) -> DMatrix<f64> {
        to_matrix(&self.beta_cov)
    }

    pub fn fixed_effect(&self, name: &str) -> Option<&FixedEffect> {
        self.fixed.iter().find(|f| f.name == name)
    }

    pub fn information_criteria(&self) -> InformationCriteria {
        information_criteria(self.loglik, self.n_params, self.n_obs)
    }

    pub fn aic(&self) -> f64 {
        self.information_criteria().aic
    }

    pub fn bic(&self) -> f64 {
        self.information_criteria().bic
    }

    fn random_variances(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for c in &self.random {
            for (k, reg) in c.regressors.iter().enumerate() {
                out.push((format!("{}|{}", reg, c.grouping), c.psi[k][k]));
            }
        }
        out
    }

    pub fn icc(&self) -> f64 {
        let v: Vec<f64> = self.random_variances().into_iter().map(|c| c.1).collect();
        icc_from_variances(&v, self.sigma2)
    }

    pub fn variance_decomposition(&self) -> Vec<VarianceShare> {
        let mut rows = self.random_variances();
        rows.push(("Residual".to_string(), self.sigma2));
        decompose(rows)
    }

    /// Predicted random effects keyed by level and regressor.
    pub fn blup_table(&self) -> Vec<BlupRow> {
        let mut out = Vec::new();
        for c in &self.random {
            for (level, row) in c.levels.iter().zip(&c.blups) {
                for (reg, v) in c.regressors.iter().zip(row) {
                    out.push(BlupRow { group_key: level.clone(), regressor: reg.clone(), value: *v });
                }
            }
        }
        out
    }

    pub fn blup(&self, term: usize, level: &str, regressor: &str) -> Option<f64> {
        let c = self.random.get(term)?;
        let g = c.levels.iter().position(|l| l == level)?;
        let k = c.regressors.iter().position(|r| r == regressor)?;
        Some(c.blups[g][k])
    }

    pub fn write_blups_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in self.blup_table() {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `term,estimate,std_error`.
    pub fn write_fixed_effects_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["term", "estimate", "std_error"])?;
        for f in &self.fixed {
            w.write_record([f.name.clone(), format!("{:?}", f.estimate), format!("{:?}", f.std_error)])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `component,variance,share`.
    pub fn write_variance_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in self.variance_decomposition() {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_blups_csv_path(&self, path: &Path) -> Result<()> {
        self.write_blups_csv(std::fs::File::create(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn layout(&self) -> Result<&DesignLayout> {
        self.layout
            .as_ref()
            .ok_or_else(|| Error::Validation("model was fitted without a panel layout".into()))
    }

    /// Level label to index, per random term.
    pub fn level_lookup(&self) -> Vec<HashMap<&str, usize>> {
        self.random
            .iter()
            .map(|c| c.levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect())
            .collect()
    }

    pub fn cell_design(
        &self,
        key: &CellKey,
        covs: &CovariateSet,
        lookup: &[HashMap<&str, usize>],
    ) -> Result<CellDesign> {
        let layout = self.layout()?;
        let x = layout.fixed_row(key, covs)?;
        let mut random = Vec::with_capacity(self.random.len());
        for (t, map) in lookup.iter().enumerate() {
            let (label, values) = layout.random_row(t, key, covs)?;
            random.push((map.get(label.as_str()).copied(), values));
        }
        Ok(CellDesign { x, random })
    }

    /// `xᵀβ + Σ zᵀb`, with unseen levels contributing nothing.
    pub fn linear_predictor(&self, cell: &CellDesign) -> f64 {
        let mut v: f64 = cell.x.iter().zip(&self.fixed).map(|(x, f)| x * f.estimate).sum();
        for ((level, z), c) in cell.random.iter().zip(&self.random) {
            if let Some(g) = level {
                v += z.iter().zip(&c.blups[*g]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        v
    }

    /// Conditional point predictions for arbitrary cells.
    pub fn predict(&self, keys: &[CellKey], covs: &CovariateSet) -> Result<Vec<f64>> {
        let lookup = self.level_lookup();
        keys.iter()
            .map(|k| Ok(self.linear_predictor(&self.cell_design(k, covs, &lookup)?)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixedlm::design::RandomTermDesign;
    use crate::mixedlm::reml::tests::synthetic;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn intercept_design(y: Vec<f64>, groups: usize) -> DesignMatrices {
        let n = y.len();
        let per = n / groups;
        DesignMatrices::from_parts(
            DVector::from_vec(y),
            DMatrix::from_element(n, 1, 1.0),
            vec!["(Intercept)".into()],
            vec![RandomTermDesign {
                grouping: "g".into(),
                regressors: vec!["(Intercept)".into()],
                levels: (0..groups).map(|g| g.to_string()).collect(),
                group_of_row: (0..n).map(|i| i / per).collect(),
                values: DMatrix::from_element(n, 1, 1.0),
            }],
        )
        .unwrap()
    }

    fn simulate_intercepts(seed: u64, groups: usize, per: usize, sd_group: f64, sd_resid: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Normal::new(0.0, sd_group).unwrap();
        let e = Normal::new(0.0, sd_resid).unwrap();
        let mut y = Vec::with_capacity(groups * per);
        for _ in 0..groups {
            let eta = g.sample(&mut rng);
            for _ in 0..per {
                y.push(2.0 + eta + e.sample(&mut rng));
            }
        }
        y
    }

    #[test]
    fn mode_shift_matches_the_joint_posterior() {
        // Dense joint covariance of (β, η) from the mixed-model equations.
        let d = synthetic(11, 12, 8, false);
        let m = fit_reml(&d, &FitOptions::default()).unwrap();
        assert!(!m.singular);
        let term = &d.terms[0];
        let (q, p, g) = (term.q(), d.p(), term.n_levels());
        let lambda = (m.random[0].psi_matrix() / m.sigma2).cholesky().unwrap().l();
        let mut zl = DMatrix::zeros(d.n(), g * q);
        for i in 0..d.n() {
            let row = term.values.row(i) * &lambda;
            zl.view_mut((i, term.group_of_row[i] * q), (1, q)).copy_from(&row);
        }
        let w = DMatrix::from_fn(d.n(), p + g * q, |i, j| if j < p { d.x[(i, j)] } else { zl[(i, j - p)] });
        let mut prec = w.tr_mul(&w);
        for j in p..p + g * q {
            prec[(j, j)] += 1.0;
        }
        let mut lift = DMatrix::<f64>::identity(p + g * q, p + g * q);
        for l in 0..g {
            lift.view_mut((p + l * q, p + l * q), (q, q)).copy_from(&lambda);
        }
        let cov = &lift * prec.try_inverse().unwrap() * lift.transpose() * m.sigma2;
        let cov_bb = cov.view((0, 0), (p, p)).clone_owned();
        let beta_cov = m.beta_cov_matrix();
        assert!((&cov_bb - &beta_cov).amax() < 1e-8 * beta_cov.amax());
        for l in 0..g {
            let shift = to_matrix(&m.random[0].mode_shift[l]);
            let cond = to_matrix(&m.random[0].cond_var[l]);
            let cross = cov.view((p + l * q, 0), (q, p)).clone_owned();
            let block = cov.view((p + l * q, p + l * q), (q, q)).clone_owned();
            let joint = &cond + &shift * &beta_cov * shift.transpose();
            assert!((&shift * &beta_cov - &cross).amax() < 1e-6 * cross.amax().max(1e-12), "level {l}");
            assert!((&joint - &block).amax() < 1e-6 * block.amax(), "level {l}");
        }
    }

    #[test]
    fn criteria_formulas() {
        let ic = information_criteria(-100.0, 5, 100);
        assert_abs_diff_eq!(ic.aic, 210.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ic.bic, 223.026, epsilon = 1e-3);
    }

    #[test]
    fn icc_of_published_components() {
        let v = [4.408e-3, 1.264e-3, 1.476e-7];
        let icc = icc_from_variances(&v, 1.786e-3);
        assert_abs_diff_eq!(icc, 0.7605, epsilon = 5e-4);
        let rows = decompose(vec![
            ("a".into(), v[0]),
            ("b".into(), v[1]),
            ("c".into(), v[2]),
            ("Residual".into(), 1.786e-3),
        ]);
        let total: f64 = rows.iter().map(|r| r.variance).sum();
        assert_abs_diff_eq!(total, 7.459e-3, epsilon = 1e-6);
        assert_abs_diff_eq!(rows[3].share, 0.24, epsilon = 5e-3);
        assert_abs_diff_eq!(rows.iter().map(|r| r.share).sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn icc_limits() {
        assert_eq!(icc_from_variances(&[0.0, 0.0], 0.5), 0.0);
        assert_abs_diff_eq!(icc_from_variances(&[0.3], 1e-300), 1.0, epsilon = 1e-12);
        let rows = decompose(vec![("a".into(), 2.0), ("b".into(), 2.0)]);
        assert_eq!(rows[0].share, rows[1].share);
    }

    #[test]
    fn recovers_simulated_standard_deviations() {
        let y = simulate_intercepts(2024, 288, 50, 0.07, 0.04);
        let fit = fit_reml(&intercept_design(y, 288), &FitOptions::default()).unwrap();
        assert!(fit.converged);
        let sd_group = fit.random[0].std_devs[0];
        let sd_resid = fit.sigma2.sqrt();
        assert!((sd_group / 0.07 - 1.0).abs() < 0.15, "{sd_group}");
        assert!((sd_resid / 0.04 - 1.0).abs() < 0.15, "{sd_resid}");
    }

    #[test]
    fn equal_group_means_give_boundary_fit() {
        let pattern = [-0.3, 0.1, 0.25, -0.05];
        let groups = 6;
        let y: Vec<f64> = (0..groups)
            .flat_map(|g| (0..4).map(move |j| 1.0 + pattern[(j + g) % 4]))
            .collect();
        let total_var = {
            let m = y.iter().sum::<f64>() / y.len() as f64;
            y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (y.len() - 1) as f64
        };
        let fit = fit_reml(&intercept_design(y, groups), &FitOptions::default()).unwrap();
        assert!(fit.singular);
        assert!(fit.random[0].psi[0][0] < 1e-8);
        assert_abs_diff_eq!(fit.sigma2, total_var, epsilon = 1e-6);
    }

    #[test]
    fn larger_model_never_fits_worse_under_ml() {
        let d = synthetic(17, 8, 10, false);
        let small = DesignMatrices::from_parts(
            d.y.clone(),
            d.x.columns(0, 2).clone_owned(),
            d.x_names[..2].to_vec(),
            d.terms.clone(),
        )
        .unwrap();
        let big = fit(&d, Method::Ml, &FitOptions::default()).unwrap();
        let little = fit(&small, Method::Ml, &FitOptions::default()).unwrap();
        assert!(big.criterion <= little.criterion + 1e-6);
        assert_eq!(big.n_params, 3 + 3 + 1);
    }

    #[test]
    fn blup_table_and_csv() {
        let d = synthetic(4, 3, 6, false);
        let fit = fit_reml(&d, &FitOptions::default()).unwrap();
        let table = fit.blup_table();
        assert_eq!(table.len(), 3 * 2);
        assert_eq!(table[1].group_key, "0");
        assert_eq!(table[1].regressor, "t");
        let mut buf = Vec::new();
        fit.write_blups_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("group_key,regressor,value\n0,(Intercept),"));
        let json = fit.to_json().unwrap();
        let back = FittedMixedModel::from_json(&json).unwrap();
        assert_eq!(back.fixed, fit.fixed);
        assert_eq!(back.random, fit.random);
        assert!(back.residuals.is_empty());

        let mut fixed = Vec::new();
        fit.write_fixed_effects_csv(&mut fixed).unwrap();
        let text = String::from_utf8(fixed).unwrap();
        assert!(text.starts_with("term,estimate,std_error\n(Intercept),"));
        assert_eq!(text.lines().count(), 1 + d.p());
        let mut var = Vec::new();
        fit.write_variance_csv(&mut var).unwrap();
        let text = String::from_utf8(var).unwrap();
        assert!(text.starts_with("component,variance,share\n"));
        let shares: f64 = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
        assert!((shares - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicated_rows_double_the_ml_deviance_without_random_variance() {
        let d = synthetic(8, 4, 5, false);
        let n = d.n();
        let idx: Vec<usize> = (0..2 * n).map(|i| i % n).collect();
        let mut t = d.terms[0].clone();
        t.group_of_row = idx.iter().map(|&i| d.terms[0].group_of_row[i]).collect();
        t.values = d.terms[0].values.select_rows(&idx);
        let twice = DesignMatrices::from_parts(
            DVector::from_iterator(2 * n, idx.iter().map(|&i| d.y[i])),
            d.x.select_rows(&idx),
            d.x_names.clone(),
            vec![t],
        )
        .unwrap();
        let once = RemlProblem::new(&d).unwrap();
        let dup = RemlProblem::new(&twice).unwrap();
        let zero = [0.0; 3];
        let a = once.deviance(&zero, Method::Ml).unwrap();
        let b = dup.deviance(&zero, Method::Ml).unwrap();
        assert_abs_diff_eq!(b, 2.0 * a, epsilon = 1e-8 * a.abs());
        let theta = [0.5, 0.001, 0.002];
        assert_eq!(dup.deviance(&theta, Method::Reml).unwrap(), dup.deviance(&theta, Method::Reml).unwrap());
    }

    #[test]
    fn zero_theta_is_ordinary_least_squares() {
        let d = synthetic(9, 5, 6, false);
        let prob = RemlProblem::new(&d).unwrap();
        let (n, p) = (d.n() as f64, d.p() as f64);
        let xtx = d.x.transpose() * &d.x;
        let beta = xtx.clone().try_inverse().unwrap() * d.x.transpose() * &d.y;
        let rss = (&d.y - &d.x * beta).norm_squared();
        let want = xtx.determinant().ln() + (n - p) * (1.0 + (2.0 * std::f64::consts::PI * rss / (n - p)).ln());
        let got = prob.deviance(&[0.0; 3], Method::Reml).unwrap();
        assert_abs_diff_eq!(got, want, epsilon = 1e-7 * want.abs());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn response_shift_moves_only_the_intercept(seed in 0u64..1000, shift in -5.0f64..5.0) {
            let d = synthetic(seed, 6, 8, false);
            let shifted = d.with_response(d.y.add_scalar(shift)).unwrap();
            let a = fit_reml(&d, &FitOptions::default()).unwrap();
            let b = fit_reml(&shifted, &FitOptions::default()).unwrap();
            prop_assert!((b.fixed[0].estimate - a.fixed[0].estimate - shift).abs() < 1e-4);
            for j in 1..3 {
                prop_assert!((b.fixed[j].estimate - a.fixed[j].estimate).abs() < 1e-4 * a.fixed[j].estimate.abs().max(1e-2));
            }
            prop_assert!((b.sigma2 / a.sigma2 - 1.0).abs() < 1e-3);
            prop_assert!((b.criterion - a.criterion).abs() < 1e-4);
            let (pa, pb) = (a.random[0].psi_matrix(), b.random[0].psi_matrix());
            prop_assert!((pa - pb).amax() < 1e-3 * a.random[0].psi[0][0].max(1e-6));
        }

        #[test]
        fn covariance_blocks_are_psd(seed in 0u64..1000, crossed in any::<bool>()) {
            let d = synthetic(seed, 5, 6, crossed);
            let fit = fit_reml(&d, &FitOptions::default()).unwrap();
            prop_assert!(fit.sigma2 > 0.0);
            for c in &fit.random {
                let psi = c.psi_matrix();
                prop_assert!((&psi - psi.transpose()).amax() == 0.0);
                for ev in psi.symmetric_eigenvalues().iter() {
                    prop_assert!(*ev >= -1e-10);
                }
            }
            let rows: usize = fit.random.iter().map(|c| c.blups.len()).sum();
            prop_assert_eq!(rows, d.terms.iter().map(|t| t.n_levels()).sum::<usize>());
        }

        #[test]
        fn blups_shrink_group_means(seed in 0u64..1000, groups in 3usize..8, per in 2usize..6) {
            let y = simulate_intercepts(seed, groups, per, 0.5, 0.3);
            let grand = y.iter().sum::<f64>() / y.len() as f64;
            let fit = fit_reml(&intercept_design(y.clone(), groups), &FitOptions::default()).unwrap();
            for g in 0..groups {
                let mean = y[g * per..(g + 1) * per].iter().sum::<f64>() / per as f64;
                prop_assert!(fit.random[0].blups[g][0].abs() <= (mean - grand).abs() + 1e-9);
            }
        }
    }
}
