//! Error metrics on the measurement grid, ensemble statistics and Kendall's τ.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::neuralnet::NetError;
use crate::problems::{Model, Problem, ProblemError};
use crate::sampling::{measurement_grid, Point, SamplingError};

/// Spacing of the measurement grid in every direction.
pub const GRID_SPACING: f64 = 0.01;

/// Points per parallel work item when evaluating a grid.
const CHUNK: usize = 512;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("cannot evaluate on an empty grid")]
    EmptyGrid,
    #[error("kendall tau needs at least two pairs, got {0}")]
    TooFewPairs(usize),
    #[error("statistics of an empty list")]
    EmptyInput,
    #[error("input contains a non-finite value")]
    NonFinite,
    #[error("ensemble has no members")]
    NoMembers,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// `(1/N) Σ (v(xᵢ) - v̂(xᵢ))²` over the grid points.
pub fn fd_metric<F, G>(v_true: F, v_hat: G, grid: &[Point]) -> Result<f64, EvalError>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> f64,
{
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let sum: f64 = grid
        .iter()
        .map(|x| {
            let e = v_true(x) - v_hat(x);
            e * e
        })
        .sum();
    Ok(sum / grid.len() as f64)
}

/// Mean of squares of precomputed pointwise differences.
pub fn mean_square(values: &[f64]) -> Result<f64, EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    Ok(values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64)
}

/// Mean and population standard deviation.
pub fn summary_stats(values: &[f64]) -> Result<(f64, f64), EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    Ok((mu, var.sqrt()))
}

/// Kendall's τ-a: `(concordant - discordant) / (n(n-1)/2)`, ties counting
/// as neither. Runs in `O(n log n)`.
pub fn kendall_tau(pairs: &[(f64, f64)]) -> Result<f64, EvalError> {
    let n = pairs.len();
    if n < 2 {
        return Err(EvalError::TooFewPairs(n));
    }
    if pairs.iter().any(|(a, b)| a.is_nan() || b.is_nan()) {
        return Err(EvalError::NonFinite);
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));

    let ties = |eq: &dyn Fn(usize, usize) -> bool| -> i64 {
        let mut total = 0i64;
        let mut run = 1i64;
        for i in 1..n {
            if eq(i - 1, i) {
                run += 1;
            } else {
                total += run * (run - 1) / 2;
                run = 1;
            }
        }
        total + run * (run - 1) / 2
    };
    let tied_a = ties(&|i, j| sorted[i].0 == sorted[j].0);
    let tied_ab = ties(&|i, j| sorted[i].0 == sorted[j].0 && sorted[i].1 == sorted[j].1);

    let mut b: Vec<f64> = sorted.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; n];
    let swaps = merge_count(&mut b, &mut buf);
    let tied_b = ties(&|i, j| b[i] == b[j]);

    let total = (n as i64) * (n as i64 - 1) / 2;
    let numerator = total - tied_a - tied_b + tied_ab - 2 * swaps;
    Ok(numerator as f64 / total as f64)
}

/// Sorts `v` ascending and returns the number of strict inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> i64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut count = {
        let (l, r) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        merge_count(l, bl) + merge_count(r, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            count += (mid - i) as i64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    count
}

/// Model outputs and residuals at every grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct GridEvaluation {
    pub points: Vec<Point>,
    /// Predicted solution components per point.
    pub predicted: Vec<Vec<f64>>,
    pub exact: Vec<Vec<f64>>,
    /// Residual vector per point (see [`Problem::residuals`]).
    pub residuals: Vec<Vec<f64>>,
    pub pressure: Option<Vec<f64>>,
}

/// Prediction, exact value, residuals and pressure at one grid point.
type PointEvaluation = (Vec<f64>, Vec<f64>, Vec<f64>, Option<f64>);

impl GridEvaluation {
    pub fn compute(problem: &Problem, model: &Model, grid: &[Point]) -> Result<Self, EvalError> {
        if grid.is_empty() {
            return Err(EvalError::EmptyGrid);
        }
        model.architecture.validate_for(problem)?;
        let chunks: Vec<Vec<PointEvaluation>> = grid
            .par_chunks(CHUNK)
            .map(|pts| {
                pts.iter()
                    .map(|x| {
                        let jets = model.jets(x)?;
                        let residual = problem.residuals(&jets, x);
                        let pressure = jets.pressure.as_ref().map(|p| p.value[0]);
                        Ok((jets.primary.value, problem.exact(x), residual, pressure))
                    })
                    .collect::<Result<Vec<_>, NetError>>()
            })
            .collect::<Result<_, _>>()?;
        let n = grid.len();
        let mut out = Self {
            points: grid.to_vec(),
            predicted: Vec::with_capacity(n),
            exact: Vec::with_capacity(n),
            residuals: Vec::with_capacity(n),
            pressure: None,
        };
        let mut pressure = Vec::new();
        for (pred, exact, res, p) in chunks.into_iter().flatten() {
            out.predicted.push(pred);
            out.exact.push(exact);
            out.residuals.push(res);
            if let Some(p) = p {
                pressure.push(p);
            }
        }
        if pressure.len() == n {
            out.pressure = Some(pressure);
        }
        Ok(out)
    }

    fn components(&self) -> usize {
        self.exact[0].len()
    }

    /// `√FD(uᵢ - ûᵢ)` for every solution component.
    pub fn component_errors(&self) -> Vec<f64> {
        (0..self.components())
            .map(|k| {
                let d: Vec<f64> = self
                    .exact
                    .iter()
                    .zip(&self.predicted)
                    .map(|(e, p)| e[k] - p[k])
                    .collect();
                mean_square(&d).expect("non-empty grid").sqrt()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub problem: String,
    /// `√FD(u - û)`; for several components the sum of per-component values.
    pub fd_solution_error: f64,
    pub component_errors: Vec<f64>,
    /// `√FD(∇²û + f)`, or `√FD_mom + √FD_div`.
    pub fd_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fd_momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fd_divergence: Option<f64>,
    /// `√FD` of the pressure after subtracting each field's grid mean.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pressure_error: Option<f64>,
    pub grid_size: usize,
    /// Pointwise solution error magnitude, in grid order.
    #[serde(skip)]
    pub error_grid: Option<Vec<f64>>,
}

impl EvalReport {
    pub fn from_grid(problem: &Problem, eval: &GridEvaluation, keep_grid: bool) -> Self {
        let component_errors = eval.component_errors();
        let fd_solution_error = component_errors.iter().sum();
        let (fd_residual, fd_momentum, fd_divergence) = match problem {
            Problem::Poisson(_) => {
                let r: Vec<f64> = eval.residuals.iter().map(|r| r[0]).collect();
                (mean_square(&r).expect("non-empty").sqrt(), None, None)
            }
            Problem::Kovasznay(_) => {
                let n = eval.residuals.len() as f64;
                let mom = eval
                    .residuals
                    .iter()
                    .map(|r| r[0] * r[0] + r[1] * r[1])
                    .sum::<f64>()
                    / n;
                let div = eval.residuals.iter().map(|r| r[2] * r[2]).sum::<f64>() / n;
                let (m, d) = (mom.sqrt(), div.sqrt());
                (m + d, Some(m), Some(d))
            }
        };
        let pressure_error = match (problem, &eval.pressure) {
            (Problem::Kovasznay(k), Some(p_hat)) => {
                let p_true: Vec<f64> = eval.points.iter().map(|x| k.solution(x)[2]).collect();
                Some(gauge_free_error(&p_true, p_hat))
            }
            _ => None,
        };
        let error_grid = keep_grid.then(|| {
            eval.exact
                .iter()
                .zip(&eval.predicted)
                .map(|(e, p)| e.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .collect()
        });
        Self {
            problem: problem.id().to_string(),
            fd_solution_error,
            component_errors,
            fd_residual,
            fd_momentum,
            fd_divergence,
            pressure_error,
            grid_size: eval.points.len(),
            error_grid,
        }
    }
}

fn gauge_free_error(p_true: &[f64], p_hat: &[f64]) -> f64 {
    let n = p_true.len() as f64;
    let mt = p_true.iter().sum::<f64>() / n;
    let mh = p_hat.iter().sum::<f64>() / n;
    let d: Vec<f64> = p_true
        .iter()
        .zip(p_hat)
        .map(|(t, h)| (t - mt) - (h - mh))
        .collect();
    mean_square(&d).expect("non-empty").sqrt()
}

/// The problem's measurement grid.
pub fn problem_grid(problem: &Problem) -> Result<Vec<Point>, EvalError> {
    Ok(measurement_grid(problem.domain(), GRID_SPACING)?)
}

/// Evaluates one trained model on `grid`.
pub fn evaluate_model(
    problem: &Problem,
    model: &Model,
    grid: &[Point],
    keep_grid: bool,
) -> Result<EvalReport, EvalError> {
    let eval = GridEvaluation::compute(problem, model, grid)?;
    Ok(EvalReport::from_grid(problem, &eval, keep_grid))
}

/// `Σᵢ √FD(uᵢ - ū_i)` where `ū` is the pointwise mean prediction of the
/// members.
pub fn averaged_prediction_error(evals: &[GridEvaluation]) -> Result<f64, EvalError> {
    let first = evals.first().ok_or(EvalError::NoMembers)?;
    let n = first.points.len();
    if evals.iter().any(|e| e.points != first.points) {
        return Err(EvalError::LengthMismatch(
            "members were evaluated on different grids".into(),
        ));
    }
    let m = evals.len() as f64;
    let comps = first.components();
    let mut total = 0.0;
    for k in 0..comps {
        let d: Vec<f64> = (0..n)
            .map(|i| {
                let mean = evals.iter().map(|e| e.predicted[i][k]).sum::<f64>() / m;
                first.exact[i][k] - mean
            })
            .collect();
        total += mean_square(&d)?.sqrt();
    }
    Ok(total)
}

/// μ̃ for trained members of the same problem. Architectures may differ.
pub fn ensemble_average_error(
    problem: &Problem,
    members: &[Model],
    grid: &[Point],
) -> Result<f64, EvalError> {
    if members.is_empty() {
        return Err(EvalError::NoMembers);
    }
    let evals = members
        .iter()
        .map(|m| GridEvaluation::compute(problem, m, grid))
        .collect::<Result<Vec<_>, _>>()?;
    averaged_prediction_error(&evals)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub problem: String,
    /// Mean and population deviation of the members' solution errors.
    pub mu: f64,
    pub sigma: f64,
    pub residual_mu: f64,
    pub residual_sigma: f64,
    pub best: f64,
    /// Error of the averaged prediction.
    pub mu_tilde: f64,
    /// Kendall τ between solution-error and residual rankings; needs two
    /// members.
    pub tau: Option<f64>,
    pub member_reports: Vec<EvalReport>,
}

/// Statistics over member evaluations computed on the same grid.
pub fn ensemble_report(problem: &Problem, evals: &[GridEvaluation]) -> Result<EnsembleReport, EvalError> {
    if evals.is_empty() {
        return Err(EvalError::NoMembers);
    }
    let member_reports: Vec<EvalReport> = evals
        .iter()
        .map(|e| EvalReport::from_grid(problem, e, false))
        .collect();
    let errors: Vec<f64> = member_reports.iter().map(|r| r.fd_solution_error).collect();
    let residuals: Vec<f64> = member_reports.iter().map(|r| r.fd_residual).collect();
    let (mu, sigma) = summary_stats(&errors)?;
    let (residual_mu, residual_sigma) = summary_stats(&residuals)?;
    let pairs: Vec<(f64, f64)> = errors.iter().copied().zip(residuals.iter().copied()).collect();
    let tau = if pairs.len() >= 2 {
        Some(kendall_tau(&pairs)?)
    } else {
        None
    };
    Ok(EnsembleReport {
        problem: problem.id().to_string(),
        mu,
        sigma,
        residual_mu,
        residual_sigma,
        best: errors.iter().copied().fold(f64::INFINITY, f64::min),
        mu_tilde: averaged_prediction_error(evals)?,
        tau,
        member_reports,
    })
}

/// Writes `x1,x2,value` rows for plotting.
pub fn write_grid_csv<W: Write>(points: &[Point], values: &[f64], mut out: W) -> Result<(), EvalError> {
    if points.len() != values.len() {
        return Err(EvalError::LengthMismatch(format!(
            "{} points but {} values",
            points.len(),
            values.len()
        )));
    }
    writeln!(out, "x1,x2,value")?;
    for (x, v) in points.iter().zip(values) {
        let coords: Vec<String> = x.iter().map(|c| format!("{c:.16e}")).collect();
        writeln!(out, "{},{v:.16e}", coords.join(","))?;
    }
    Ok(())
}
