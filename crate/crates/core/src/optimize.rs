//! Dense BFGS with a strong-Wolfe line search, and the Lagrangian descent
//! outer loop that alternates BFGS solves with a multiplier update.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::objective::Objective;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OptimError {
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error("objective is not finite at the starting point ({0})")]
    NonFiniteStart(f64),
    #[error("search direction is not a descent direction (φ'(0) = {0})")]
    NotDescent(f64),
    #[error("starting parameter vector has length {got}, objective expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BfgsConfig {
    pub max_iterations: usize,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    /// Stop when `‖∇f‖₂` drops to this value.
    pub gradient_tolerance: f64,
    /// Function evaluations allowed per line search.
    pub max_linesearch_trials: usize,
}

impl Default for BfgsConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20_000,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            gradient_tolerance: 1e-12,
            max_linesearch_trials: 50,
        }
    }
}

impl BfgsConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(0.0 < self.wolfe_c1 && self.wolfe_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return Err(OptimError::InvalidConfig(format!(
                "need 0 < c1 < c2 < 1, got c1 = {}, c2 = {}",
                self.wolfe_c1, self.wolfe_c2
            )));
        }
        if self.max_linesearch_trials == 0 {
            return Err(OptimError::InvalidConfig(
                "max_linesearch_trials must be positive".into(),
            ));
        }
        if !(self.gradient_tolerance >= 0.0) {
            return Err(OptimError::InvalidConfig(
                "gradient_tolerance must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    MaxIterations,
    WolfeViolation,
    GradientTolerance,
    NonFinite,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::MaxIterations => "max_iterations",
            Termination::WolfeViolation => "wolfe_violation",
            Termination::GradientTolerance => "gradient_tolerance",
            Termination::NonFinite => "non_finite",
        }
    }
}

/// One accepted BFGS step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub loss_before: f64,
    pub loss: f64,
    /// `‖∇f‖₂` at the new point.
    pub grad_norm: f64,
    pub step: f64,
    /// `∇f(θ)ᵀd` at the start of the step.
    pub directional_derivative: f64,
    pub evaluations: usize,
}

impl StepRecord {
    /// `f(θ + t d) <= f(θ) + c1 t ∇f(θ)ᵀd`
    pub fn satisfies_sufficient_decrease(&self, c1: f64) -> bool {
        self.loss <= self.loss_before + c1 * self.step * self.directional_derivative
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimOutcome {
    pub theta: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
    /// Loss at the start followed by the loss after every accepted step.
    pub loss_history: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub initial_grad_norm: f64,
    pub evaluations: usize,
}

impl OptimOutcome {
    pub fn final_loss(&self) -> f64 {
        *self.loss_history.last().expect("history starts with the initial loss")
    }

    pub fn final_grad_norm(&self) -> f64 {
        self.steps
            .last()
            .map_or(self.initial_grad_norm, |s| s.grad_norm)
    }

    /// CSV log: `iteration,loss,grad_norm,step`; row 0 is the starting point.
    pub fn write_history_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "iteration,loss,grad_norm,step")?;
        writeln!(
            out,
            "0,{:.16e},{:.16e},0",
            self.loss_history[0], self.initial_grad_norm
        )?;
        for s in &self.steps {
            writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e}",
                s.iteration, s.loss, s.grad_norm, s.step
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchResult {
    pub step: f64,
    pub value: f64,
    pub derivative: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum LineSearchError {
    #[error("φ'(0) = {0} is not negative")]
    NotDescent(f64),
    #[error("φ(0) or φ'(0) is not finite")]
    NonFiniteStart,
    #[error("no step satisfying the strong Wolfe conditions after {evaluations} evaluations")]
    WolfeViolation { evaluations: usize },
}

#[derive(Debug, Clone, Copy)]
struct Probe {
    t: f64,
    f: f64,
    d: f64,
}

/// Finds `t > 0` with
///
/// ```text
/// φ(t)    <= φ(0) + c1 t φ'(0)
/// |φ'(t)| <= c2 |φ'(0)|
/// ```
///
/// by bracketing and safeguarded cubic zoom. `phi` returns `(φ(t), φ'(t))`;
/// `start` is `(φ(0), φ'(0))`. A non-finite trial value is treated as a step
/// that went too far. Every evaluation counts against `max_trials`.
pub fn wolfe_line_search<F>(
    mut phi: F,
    start: (f64, f64),
    initial_step: f64,
    c1: f64,
    c2: f64,
    max_trials: usize,
) -> Result<LineSearchResult, LineSearchError>
where
    F: FnMut(f64) -> (f64, f64),
{
    let (f0, d0) = start;
    if !f0.is_finite() || !d0.is_finite() {
        return Err(LineSearchError::NonFiniteStart);
    }
    if d0 >= 0.0 {
        return Err(LineSearchError::NotDescent(d0));
    }
    let armijo = |t: f64, f: f64| f <= f0 + c1 * t * d0;
    let curvature = |d: f64| d.abs() <= -c2 * d0;

    let mut evals = 0;
    let mut prev = Probe { t: 0.0, f: f0, d: d0 };
    // Smallest step known to produce a non-finite value.
    let mut wall = f64::INFINITY;
    let mut t = initial_step;

    let (lo, hi) = loop {
        if evals >= max_trials {
            return Err(LineSearchError::WolfeViolation { evaluations: evals });
        }
        let (f, d) = phi(t);
        evals += 1;
        if !f.is_finite() || !d.is_finite() {
            wall = t;
            t = prev.t + 0.5 * (t - prev.t);
            continue;
        }
        let cur = Probe { t, f, d };
        if !armijo(t, f) || (evals > 1 && prev.t > 0.0 && f >= prev.f) {
            break (prev, cur);
        }
        if curvature(d) {
            return Ok(LineSearchResult {
                step: t,
                value: f,
                derivative: d,
                evaluations: evals,
            });
        }
        if d >= 0.0 {
            break (cur, prev);
        }
        prev = cur;
        t = if wall.is_finite() {
            t + 0.5 * (wall - t)
        } else {
            2.0 * t
        };
    };

    zoom(&mut phi, lo, hi, f0, d0, c1, c2, evals, max_trials)
}

#[allow(clippy::too_many_arguments)]
fn zoom<F>(
    phi: &mut F,
    mut lo: Probe,
    mut hi: Probe,
    f0: f64,
    d0: f64,
    c1: f64,
    c2: f64,
    mut evals: usize,
    max_trials: usize,
) -> Result<LineSearchResult, LineSearchError>
where
    F: FnMut(f64) -> (f64, f64),
{
    while evals < max_trials {
        let width = (hi.t - lo.t).abs();
        if width <= 1e-16 * lo.t.abs().max(hi.t.abs()) {
            break;
        }
        let t = interpolate(&lo, &hi);
        let (f, d) = phi(t);
        evals += 1;
        if !f.is_finite() || !d.is_finite() {
            hi = Probe {
                t,
                f: f64::INFINITY,
                d: f64::NAN,
            };
            continue;
        }
        if f > f0 + c1 * t * d0 || f >= lo.f {
            hi = Probe { t, f, d };
        } else {
            if d.abs() <= -c2 * d0 {
                return Ok(LineSearchResult {
                    step: t,
                    value: f,
                    derivative: d,
                    evaluations: evals,
                });
            }
            if d * (hi.t - lo.t) >= 0.0 {
                hi = lo;
            }
            lo = Probe { t, f, d };
        }
    }
    Err(LineSearchError::WolfeViolation { evaluations: evals })
}

/// Cubic interpolation minimizer between two probes, kept at least 10% of
/// the bracket away from either end; falls back to bisection.
fn interpolate(a: &Probe, b: &Probe) -> f64 {
    let mid = 0.5 * (a.t + b.t);
    if !(b.f.is_finite() && b.d.is_finite()) {
        return mid;
    }
    let d1 = a.d + b.d - 3.0 * (a.f - b.f) / (a.t - b.t);
    let disc = d1 * d1 - a.d * b.d;
    if !(disc >= 0.0) {
        return mid;
    }
    let d2 = (b.t - a.t).signum() * disc.sqrt();
    let t = b.t - (b.t - a.t) * (b.d + d2 - d1) / (b.d - a.d + 2.0 * d2);
    let (lo, hi) = (a.t.min(b.t), a.t.max(b.t));
    let margin = 0.1 * (hi - lo);
    if t.is_finite() && t >= lo + margin && t <= hi - margin {
        t
    } else {
        mid
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Dense inverse-Hessian approximation, row-major.
struct InverseHessian {
    n: usize,
    h: Vec<f64>,
    scaled: bool,
}

impl InverseHessian {
    fn identity(n: usize) -> Self {
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            h[i * n + i] = 1.0;
        }
        Self { n, h, scaled: false }
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(&self.h[i * self.n..(i + 1) * self.n], v);
        }
    }

    /// `H ← (I - ρsyᵀ) H (I - ρysᵀ) + ρssᵀ`, skipped when `yᵀs` is not
    /// safely positive. Before the first update `H` is rescaled to
    /// `(yᵀs / yᵀy) I`.
    fn update(&mut self, s: &[f64], y: &[f64]) -> bool {
        let ys = dot(y, s);
        if !(ys > 1e-12 * norm(y) * norm(s)) {
            return false;
        }
        let n = self.n;
        if !self.scaled {
            let gamma = ys / dot(y, y);
            self.h.fill(0.0);
            for i in 0..n {
                self.h[i * n + i] = gamma;
            }
            self.scaled = true;
        }
        let rho = 1.0 / ys;
        let mut hy = vec![0.0; n];
        self.apply(y, &mut hy);
        let yhy = dot(y, &hy);
        let coef = rho * rho * yhy + rho;
        for i in 0..n {
            let row = &mut self.h[i * n..(i + 1) * n];
            let (si, hyi) = (s[i], hy[i]);
            for j in 0..n {
                row[j] += -rho * (si * hy[j] + hyi * s[j]) + coef * si * s[j];
            }
        }
        true
    }

    fn reset(&mut self) {
        *self = Self::identity(self.n);
    }

    #[cfg(test)]
    fn max_asymmetry(&self) -> f64 {
        let n = self.n;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..i {
                worst = worst.max((self.h[i * n + j] - self.h[j * n + i]).abs());
            }
        }
        worst
    }
}

/// Minimizes `objective` from `theta0` with dense BFGS.
///
/// The run stops at the first line-search failure (`WolfeViolation`), when
/// the gradient norm reaches the tolerance, or after `max_iterations`
/// accepted steps. The same inputs always produce the same outcome.
pub fn bfgs_minimize<O: Objective + ?Sized>(
    objective: &O,
    theta0: &[f64],
    config: &BfgsConfig,
) -> Result<OptimOutcome, OptimError> {
    config.validate()?;
    let n = objective.dim();
    if theta0.len() != n {
        return Err(OptimError::DimensionMismatch {
            expected: n,
            got: theta0.len(),
        });
    }
    let mut x = theta0.to_vec();
    let mut g = vec![0.0; n];
    let mut f = objective.evaluate(&x, &mut g);
    if !f.is_finite() {
        return Err(OptimError::NonFiniteStart(f));
    }
    let initial_grad_norm = norm(&g);
    let mut outcome = OptimOutcome {
        theta: Vec::new(),
        iterations: 0,
        termination: Termination::MaxIterations,
        loss_history: vec![f],
        steps: Vec::new(),
        initial_grad_norm,
        evaluations: 1,
    };
    if !initial_grad_norm.is_finite() {
        outcome.termination = Termination::NonFinite;
        outcome.theta = x;
        return Ok(outcome);
    }

    let mut hinv = InverseHessian::identity(n);
    let mut dir = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut trial_grad = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut grad_norm = initial_grad_norm;

    for iteration in 1..=config.max_iterations {
        if grad_norm <= config.gradient_tolerance {
            outcome.termination = Termination::GradientTolerance;
            break;
        }
        hinv.apply(&g, &mut dir);
        dir.iter_mut().for_each(|d| *d = -*d);
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            hinv.reset();
            dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi);
            slope = dot(&g, &dir);
        }
        if !slope.is_finite() {
            outcome.termination = Termination::NonFinite;
            break;
        }
        let t0 = if hinv.scaled {
            1.0
        } else {
            (1.0 / grad_norm).min(1.0)
        };

        let search = wolfe_line_search(
            |t| {
                for i in 0..n {
                    trial[i] = x[i] + t * dir[i];
                }
                let ft = objective.evaluate(&trial, &mut trial_grad);
                (ft, dot(&trial_grad, &dir))
            },
            (f, slope),
            t0,
            config.wolfe_c1,
            config.wolfe_c2,
            config.max_linesearch_trials,
        );
        let accepted = match search {
            Ok(r) => r,
            Err(LineSearchError::WolfeViolation { evaluations }) => {
                outcome.evaluations += evaluations;
                outcome.termination = Termination::WolfeViolation;
                break;
            }
            Err(_) => {
                outcome.termination = Termination::NonFinite;
                break;
            }
        };
        outcome.evaluations += accepted.evaluations;

        // The accepted step is always the last one evaluated, so `trial`
        // and `trial_grad` hold θ + t d and its gradient.
        for i in 0..n {
            s[i] = trial[i] - x[i];
            y[i] = trial_grad[i] - g[i];
        }
        x.copy_from_slice(&trial);
        g.copy_from_slice(&trial_grad);
        let loss_before = f;
        f = accepted.value;
        grad_norm = norm(&g);
        hinv.update(&s, &y);

        outcome.iterations = iteration;
        outcome.loss_history.push(f);
        outcome.steps.push(StepRecord {
            iteration,
            loss_before,
            loss: f,
            grad_norm,
            step: accepted.step,
            directional_derivative: slope,
            evaluations: accepted.evaluations,
        });
        if iteration == config.max_iterations && grad_norm <= config.gradient_tolerance {
            outcome.termination = Termination::GradientTolerance;
        }
    }
    outcome.theta = x;
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpdateSign {
    /// `λ ← λ - α E[(û - g)²]`
    #[default]
    PaperMinus,
    /// `λ ← λ + α E[(û - g)²]`
    AscentPlus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LagrangianConfig {
    /// Outer iterations.
    pub n: usize,
    pub alpha: f64,
    pub lambda0: f64,
    pub update_sign: UpdateSign,
    /// The inner loss is minimized under a square root when its plain value
    /// at the warm start is below this threshold.
    pub sqrt_threshold: f64,
}

impl Default for LagrangianConfig {
    fn default() -> Self {
        Self {
            n: 1,
            alpha: 1.0,
            lambda0: 1.0,
            update_sign: UpdateSign::PaperMinus,
            sqrt_threshold: 1.0,
        }
    }
}

impl LagrangianConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if self.n == 0 {
            return Err(OptimError::InvalidConfig("n must be at least 1".into()));
        }
        if !(self.alpha >= 0.0) || !(self.lambda0 >= 0.0) {
            return Err(OptimError::InvalidConfig(
                "alpha and lambda0 must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// A loss family `interior + λ·boundary` over a shared parameter vector.
pub trait PenaltyProblem {
    type Loss<'s>: Objective
    where
        Self: 's;

    /// `E_int + λ E_bou`, or its square root.
    fn penalized(&self, lambda: f64, sqrt: bool) -> Self::Loss<'_>;

    /// `E_bou[(û - g)²]` at `theta`.
    fn constraint_violation(&self, theta: &[f64]) -> f64;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LagrangianOutcome {
    pub theta: Vec<f64>,
    /// One BFGS outcome per outer iteration.
    pub inner: Vec<OptimOutcome>,
    /// `λ₀, λ₁, ..., λ_n`
    pub lambda_history: Vec<f64>,
    /// Whether the square-rooted inner loss was used in each outer iteration.
    pub used_sqrt: Vec<bool>,
}

impl LagrangianOutcome {
    pub fn iterations(&self) -> usize {
        self.inner.iter().map(|o| o.iterations).sum()
    }

    pub fn termination(&self) -> Termination {
        self.inner.last().expect("n >= 1").termination
    }
}

/// Alternates BFGS on the penalized loss with the multiplier update, warm
/// starting every inner solve from the previous parameters. `λ` is clamped
/// at zero.
pub fn lagrangian_descent<P: PenaltyProblem>(
    problem: &P,
    theta0: &[f64],
    config: &LagrangianConfig,
    bfgs: &BfgsConfig,
) -> Result<LagrangianOutcome, OptimError> {
    config.validate()?;
    let mut theta = theta0.to_vec();
    let mut lambda = config.lambda0;
    let mut out = LagrangianOutcome {
        theta: Vec::new(),
        inner: Vec::with_capacity(config.n),
        lambda_history: vec![lambda],
        used_sqrt: Vec::with_capacity(config.n),
    };
    for _ in 0..config.n {
        let plain = problem.penalized(lambda, false).value(&theta);
        let sqrt = plain < config.sqrt_threshold;
        let inner = bfgs_minimize(&problem.penalized(lambda, sqrt), &theta, bfgs)?;
        theta.clone_from(&inner.theta);
        let violation = problem.constraint_violation(&theta);
        lambda = match config.update_sign {
            UpdateSign::PaperMinus => lambda - config.alpha * violation,
            UpdateSign::AscentPlus => lambda + config.alpha * violation,
        }
        .max(0.0);
        out.lambda_history.push(lambda);
        out.used_sqrt.push(sqrt);
        let stop = inner.termination == Termination::NonFinite;
        out.inner.push(inner);
        if stop {
            break;
        }
    }
    out.theta = theta;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::FnObjective;

    fn sphere() -> FnObjective<impl Fn(&[f64], &mut [f64]) -> f64> {
        FnObjective::new(2, |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * x[0];
            g[1] = 2.0 * x[1];
            x[0] * x[0] + x[1] * x[1]
        })
    }

    fn rosenbrock() -> FnObjective<impl Fn(&[f64], &mut [f64]) -> f64> {
        FnObjective::new(2, |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        })
    }

    #[test]
    fn line_search_on_quadratic() {
        let r = wolfe_line_search(|t| ((t - 1.0).powi(2), 2.0 * (t - 1.0)), (1.0, -2.0), 0.1, 1e-4, 0.9, 50)
            .unwrap();
        assert!(r.value <= 1.0 + 1e-4 * r.step * -2.0);
        assert!(r.derivative.abs() <= 0.9 * 2.0);
        assert!(r.step > 0.0 && r.step < 2.0);
    }

    #[test]
    fn line_search_rejects_ascent() {
        assert_eq!(
            wolfe_line_search(|t| (t, 1.0), (0.0, 1.0), 1.0, 1e-4, 0.9, 50),
            Err(LineSearchError::NotDescent(1.0))
        );
    }

    #[test]
    fn line_search_backs_off_a_cliff() {
        // φ decreasing up to t = 3 but undefined beyond t = 2.
        let phi = |t: f64| {
            if t > 2.0 {
                (f64::NAN, f64::NAN)
            } else {
                ((t - 3.0).powi(2), 2.0 * (t - 3.0))
            }
        };
        for t0 in [1.0, 2.5, 10.0, 1e6] {
            match wolfe_line_search(phi, (9.0, -6.0), t0, 1e-4, 0.9, 50) {
                Ok(r) => {
                    assert!(r.step > 0.0 && r.step <= 2.0, "{}", r.step);
                    assert!(r.value.is_finite());
                }
                Err(e) => assert!(matches!(e, LineSearchError::WolfeViolation { .. })),
            }
        }
    }

    #[test]
    fn sphere_converges_in_few_iterations() {
        let out = bfgs_minimize(&sphere(), &[3.0, -4.0], &BfgsConfig::default()).unwrap();
        assert!(out.theta.iter().all(|x| x.abs() < 1e-10), "{:?}", out.theta);
        assert!(out.iterations <= 5);
    }

    #[test]
    fn rosenbrock_reaches_minimizer() {
        let out = bfgs_minimize(&rosenbrock(), &[-1.2, 1.0], &BfgsConfig::default()).unwrap();
        assert!((out.theta[0] - 1.0).abs() < 1e-6 && (out.theta[1] - 1.0).abs() < 1e-6);
        assert!(out.iterations <= 200, "{}", out.iterations);
        for s in &out.steps {
            assert!(s.satisfies_sufficient_decrease(1e-4));
        }
        for w in out.loss_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn zero_iterations_returns_start() {
        let cfg = BfgsConfig {
            max_iterations: 0,
            ..BfgsConfig::default()
        };
        let out = bfgs_minimize(&rosenbrock(), &[-1.2, 1.0], &cfg).unwrap();
        assert_eq!(out.theta, vec![-1.2, 1.0]);
        assert_eq!(out.termination, Termination::MaxIterations);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let f = FnObjective::new(1, |_: &[f64], _: &mut [f64]| f64::INFINITY);
        assert!(matches!(
            bfgs_minimize(&f, &[0.0], &BfgsConfig::default()),
            Err(OptimError::NonFiniteStart(_))
        ));
    }

    #[test]
    fn invalid_wolfe_constants_rejected() {
        let cfg = BfgsConfig {
            wolfe_c1: 0.9,
            wolfe_c2: 0.1,
            ..BfgsConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn runs_are_deterministic() {
        let a = bfgs_minimize(&rosenbrock(), &[-1.2, 1.0], &BfgsConfig::default()).unwrap();
        let b = bfgs_minimize(&rosenbrock(), &[-1.2, 1.0], &BfgsConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inverse_hessian_stays_symmetric() {
        let mut h = InverseHessian::identity(5);
        let mut seed = 1u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for _ in 0..50 {
            let s: Vec<f64> = (0..5).map(|_| next()).collect();
            // y = A s with A symmetric positive definite keeps yᵀs > 0
            let y: Vec<f64> = (0..5).map(|i| 2.0 * s[i] + 0.5 * s[(i + 1) % 5] + 0.5 * s[(i + 4) % 5]).collect();
            h.update(&s, &y);
            assert!(h.max_asymmetry() <= 1e-10);
        }
    }

    #[test]
    fn curvature_guard_skips_bad_pairs() {
        let mut h = InverseHessian::identity(2);
        assert!(!h.update(&[1.0, 0.0], &[-1.0, 0.0]));
        assert_eq!(h.h, vec![1.0, 0.0, 0.0, 1.0]);
    }

    /// `E_int = (x0 - 1)² + (x1 - 2)²`, `E_bou = x0²`.
    struct Toy;

    impl PenaltyProblem for Toy {
        type Loss<'s> = FnObjective<Box<dyn Fn(&[f64], &mut [f64]) -> f64>>;

        fn penalized(&self, lambda: f64, sqrt: bool) -> Self::Loss<'_> {
            FnObjective::new(
                2,
                Box::new(move |x: &[f64], g: &mut [f64]| {
                    let v = (x[0] - 1.0).powi(2) + (x[1] - 2.0).powi(2) + lambda * x[0] * x[0];
                    g[0] = 2.0 * (x[0] - 1.0) + 2.0 * lambda * x[0];
                    g[1] = 2.0 * (x[1] - 2.0);
                    if sqrt {
                        let r = v.sqrt();
                        g.iter_mut().for_each(|gi| *gi *= 0.5 / r);
                        r
                    } else {
                        v
                    }
                }),
            )
        }

        fn constraint_violation(&self, theta: &[f64]) -> f64 {
            theta[0] * theta[0]
        }
    }

    #[test]
    fn lagrangian_single_step_equals_plain_bfgs() {
        let cfg = LagrangianConfig {
            sqrt_threshold: 0.0,
            ..LagrangianConfig::default()
        };
        let lag = lagrangian_descent(&Toy, &[5.0, 5.0], &cfg, &BfgsConfig::default()).unwrap();
        let plain = bfgs_minimize(&Toy.penalized(1.0, false), &[5.0, 5.0], &BfgsConfig::default()).unwrap();
        assert_eq!(lag.inner[0], plain);
        assert_eq!(lag.theta, plain.theta);
    }

    #[test]
    fn lagrangian_zero_rate_keeps_lambda() {
        let cfg = LagrangianConfig {
            n: 3,
            alpha: 0.0,
            lambda0: 2.0,
            ..LagrangianConfig::default()
        };
        let out = lagrangian_descent(&Toy, &[5.0, 5.0], &cfg, &BfgsConfig::default()).unwrap();
        assert_eq!(out.lambda_history, vec![2.0; 4]);
    }

    #[test]
    fn lagrangian_update_signs() {
        for (sign, grows) in [(UpdateSign::PaperMinus, false), (UpdateSign::AscentPlus, true)] {
            let cfg = LagrangianConfig {
                n: 2,
                alpha: 0.5,
                lambda0: 1.0,
                update_sign: sign,
                sqrt_threshold: 0.0,
            };
            let out = lagrangian_descent(&Toy, &[5.0, 5.0], &cfg, &BfgsConfig::default()).unwrap();
            assert_eq!(out.lambda_history.len(), 3);
            assert_eq!(out.lambda_history[1] > 1.0, grows);
            assert!(out.lambda_history.iter().all(|&l| l >= 0.0));
        }
    }

    /// Exact boundary fit: `E_bou` is identically zero so λ never moves.
    struct Satisfied;

    impl PenaltyProblem for Satisfied {
        type Loss<'s> = FnObjective<fn(&[f64], &mut [f64]) -> f64>;

        fn penalized(&self, _lambda: f64, _sqrt: bool) -> Self::Loss<'_> {
            FnObjective::new(1, |x: &[f64], g: &mut [f64]| {
                g[0] = 2.0 * (x[0] - 1.0);
                (x[0] - 1.0).powi(2)
            })
        }

        fn constraint_violation(&self, _theta: &[f64]) -> f64 {
            0.0
        }
    }

    #[test]
    fn lagrangian_keeps_lambda_when_constraint_holds() {
        let cfg = LagrangianConfig {
            n: 4,
            alpha: 3.0,
            lambda0: 0.7,
            ..LagrangianConfig::default()
        };
        let out = lagrangian_descent(&Satisfied, &[4.0], &cfg, &BfgsConfig::default()).unwrap();
        assert_eq!(out.lambda_history, vec![0.7; 5]);
    }

    #[test]
    fn history_csv_layout() {
        let out = bfgs_minimize(&sphere(), &[3.0, -4.0], &BfgsConfig::default()).unwrap();
        let mut buf = Vec::new();
        out.write_history_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iteration,loss,grad_norm,step");
        assert_eq!(lines.len(), 2 + out.steps.len());
        assert!(lines[1].starts_with("0,2.5000000000000000e1,"));
    }
}
