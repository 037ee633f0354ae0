//! Derivative-free simplex minimization with lower bounds.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Convergence threshold on the spread of objective values, relative
    /// to `max(1, |f|)`.
    pub ftol: f64,
    /// Convergence threshold on the simplex diameter (max-norm).
    pub xtol: f64,
    /// Restarts from the best vertex after convergence.
    pub restarts: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self { max_evals: 5000, ftol: 1e-8, xtol: 1e-4, restarts: 3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

fn project(x: &mut [f64], lower: &[f64]) {
    for (v, lo) in x.iter_mut().zip(lower) {
        if *v < *lo {
            *v = *lo;
        }
    }
}

/// Minimizes `f` from `x0` subject to `x >= lower` (use `-inf` for free
/// coordinates). Uses dimension-adaptive coefficients and projects every
/// trial point onto the box.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    lower: &[f64],
    opts: &NelderMeadOptions,
) -> OptimResult {
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut best: Vec<f64> = x0.to_vec();
    project(&mut best, lower);
    if n == 0 {
        let v = eval(&best, &mut evals);
        return OptimResult { x: best, f: v, evals, converged: true };
    }
    let nf = n as f64;
    let (alpha, gamma, rho, sigma) = (1.0, 1.0 + 2.0 / nf, 0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf);
    let mut best_f = eval(&best, &mut evals);
    let mut converged = false;
    for round in 0..=opts.restarts {
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        simplex.push((best.clone(), best_f));
        for i in 0..n {
            let mut v = best.clone();
            let step = if v[i] != 0.0 { 0.2 * v[i].abs() } else { 0.05 };
            v[i] += step;
            project(&mut v, lower);
            if v == best {
                v[i] -= step;
            }
            let fv = eval(&v, &mut evals);
            simplex.push((v, fv));
        }
        let start_f = best_f;
        let mut round_converged = false;
        while evals < opts.max_evals {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let f_spread = simplex[n].1 - simplex[0].1;
            let x_spread = simplex[1..]
                .iter()
                .flat_map(|(v, _)| v.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max);
            if f_spread <= opts.ftol * simplex[0].1.abs().max(1.0) && x_spread <= opts.xtol {
                round_converged = true;
                break;
            }
            let mut centroid = vec![0.0; n];
            for (v, _) in &simplex[..n] {
                for (c, x) in centroid.iter_mut().zip(v) {
                    *c += x / nf;
                }
            }
            let toward = |coef: f64| -> Vec<f64> {
                let mut p: Vec<f64> =
                    centroid.iter().zip(&simplex[n].0).map(|(c, w)| c + coef * (c - w)).collect();
                project(&mut p, lower);
                p
            };
            let xr = toward(alpha);
            let fr = eval(&xr, &mut evals);
            if fr < simplex[0].1 {
                let xe = toward(gamma);
                let fe = eval(&xe, &mut evals);
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
                continue;
            }
            if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
                continue;
            }
            let (xc, fc) = if fr < simplex[n].1 {
                let xc = toward(alpha * rho);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            } else {
                let xc = toward(-rho);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            };
            if fc < fr.min(simplex[n].1) {
                simplex[n] = (xc, fc);
                continue;
            }
            let x_best = simplex[0].0.clone();
            for (v, fv) in simplex.iter_mut().skip(1) {
                for (a, b) in v.iter_mut().zip(&x_best) {
                    *a = b + sigma * (*a - b);
                }
                project(v, lower);
                *fv = eval(v, &mut evals);
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if simplex[0].1 <= best_f {
            best = simplex[0].0.clone();
            best_f = simplex[0].1;
        }
        converged = round_converged;
        if !round_converged || evals >= opts.max_evals {
            break;
        }
        if round > 0 && start_f - best_f <= opts.ftol * best_f.abs().max(1.0) {
            break;
        }
    }
    OptimResult { x: best, f: best_f, evals, converged }
}
