//! Monte-Carlo collocation losses and their parameter gradients.
//!
//! Every variant is built from the same mean-of-squares parts:
//!
//! ```text
//! interior   (1/N_int) Σ r(x_i)²        r = ∇²û + f   or   Σ_k mom_k²
//! divergence (1/N_int) Σ (∇·û)²          Navier–Stokes only
//! boundary   (1/N_bou) Σ |û(s_j) - g|²
//! corners    (1/N_c)   Σ r(c_i)² + (1/N_c) Σ |û(c_i) - g|²
//! ```
//!
//! combined with per-variant weights and an optional outer square root.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Architecture, FieldJets, Problem, ProblemError};
use crate::neuralnet::{BatchJetEngine, DerivativeOrder, NetError};
use crate::objective::Objective;
use crate::optimize::PenaltyProblem;
use crate::sampling::{Dataset, Point};

/// Points per work item; fixes the summation order independent of thread count.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossVariant {
    /// `interior + divergence + boundary`
    Plain,
    /// `sqrt(plain)`
    Sqrt,
    /// `sqrt(plain + corner residual + corner boundary)`
    SqrtCorner,
    /// `sqrt(plain + η (corner residual + corner boundary))`, `0 <= η <= 1`
    SqrtCornerEta { eta: f64 },
    /// `interior + divergence + λ boundary`, optionally under a square root
    Penalty {
        lambda: f64,
        #[serde(default)]
        sqrt: bool,
    },
}

/// Per-part weights applied before the optional square root.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Weights {
    interior: f64,
    boundary: f64,
    corner: f64,
}

impl LossVariant {
    pub fn validate(&self) -> Result<(), ProblemError> {
        match *self {
            LossVariant::SqrtCornerEta { eta } if !(0.0..=1.0).contains(&eta) => Err(
                ProblemError::InvalidVariant(format!("eta must lie in [0, 1], got {eta}")),
            ),
            LossVariant::Penalty { lambda, .. } if !(lambda >= 0.0 && lambda.is_finite()) => Err(
                ProblemError::InvalidVariant(format!("lambda must be finite and >= 0, got {lambda}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn uses_corners(&self) -> bool {
        matches!(
            self,
            LossVariant::SqrtCorner | LossVariant::SqrtCornerEta { .. }
        )
    }

    pub fn is_sqrt(&self) -> bool {
        match self {
            LossVariant::Plain => false,
            LossVariant::Penalty { sqrt, .. } => *sqrt,
            _ => true,
        }
    }

    fn weights(&self) -> Weights {
        let (boundary, corner) = match *self {
            LossVariant::Plain | LossVariant::Sqrt => (1.0, 0.0),
            LossVariant::SqrtCorner => (1.0, 1.0),
            LossVariant::SqrtCornerEta { eta } => (1.0, eta),
            LossVariant::Penalty { lambda, .. } => (lambda, 0.0),
        };
        Weights {
            interior: 1.0,
            boundary,
            corner,
        }
    }

    /// Loss value from already averaged parts.
    pub fn combine(&self, terms: &LossTerms) -> f64 {
        let w = self.weights();
        let inner = w.interior * (terms.interior + terms.divergence)
            + w.boundary * terms.boundary
            + w.corner * (terms.corner_residual + terms.corner_boundary);
        if self.is_sqrt() {
            inner.sqrt()
        } else {
            inner
        }
    }

    pub fn label(&self) -> String {
        match *self {
            LossVariant::Plain => "plain".into(),
            LossVariant::Sqrt => "sqrt".into(),
            LossVariant::SqrtCorner => "sqrt-corner".into(),
            LossVariant::SqrtCornerEta { eta } => format!("sqrt-corner-eta({eta})"),
            LossVariant::Penalty { lambda, sqrt } => {
                format!("penalty(lambda={lambda}{})", if sqrt { ", sqrt" } else { "" })
            }
        }
    }
}

/// Mean squared residual parts (each already divided by its point count).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub interior: f64,
    pub divergence: f64,
    pub boundary: f64,
    pub corner_residual: f64,
    pub corner_boundary: f64,
}

impl LossTerms {
    /// Averages residuals of arbitrary field jets over a dataset.
    ///
    /// `jets` supplies the fields at a point; this lets exact solutions or
    /// any other jet provider be scored with the same residual operators
    /// the training loss uses.
    pub fn from_fields<F>(problem: &Problem, dataset: &Dataset, mut jets: F) -> Result<Self, NetError>
    where
        F: FnMut(&[f64]) -> Result<FieldJets, NetError>,
    {
        let mut t = LossTerms::default();
        let split = |r: &[f64]| -> (f64, f64) {
            match problem {
                Problem::Poisson(_) => (r[0] * r[0], 0.0),
                Problem::Kovasznay(_) => (r[0] * r[0] + r[1] * r[1], r[2] * r[2]),
            }
        };
        let mismatch = |fields: &FieldJets, x: &[f64]| -> f64 {
            let g = problem.boundary_value(x);
            fields
                .primary
                .value
                .iter()
                .zip(&g)
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        };
        for x in &dataset.interior {
            let (r, d) = split(&problem.residuals(&jets(x)?, x));
            t.interior += r;
            t.divergence += d;
        }
        for x in &dataset.boundary {
            t.boundary += mismatch(&jets(x)?, x);
        }
        for x in &dataset.corners {
            let fields = jets(x)?;
            t.corner_residual += split(&problem.residuals(&fields, x)).0;
            t.corner_boundary += mismatch(&fields, x);
        }
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        let (ni, nb, nc) = (
            dataset.interior.len(),
            dataset.boundary.len(),
            dataset.corners.len(),
        );
        Ok(LossTerms {
            interior: mean(t.interior, ni),
            divergence: mean(t.divergence, ni),
            boundary: mean(t.boundary, nb),
            corner_residual: mean(t.corner_residual, nc),
            corner_boundary: mean(t.corner_boundary, nc),
        })
    }
}

/// Raw sums of squares of one work item.
#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    interior: f64,
    divergence: f64,
    boundary: f64,
    corner_residual: f64,
    corner_boundary: f64,
}

impl Sums {
    fn add(&mut self, o: &Sums) {
        self.interior += o.interior;
        self.divergence += o.divergence;
        self.boundary += o.boundary;
        self.corner_residual += o.corner_residual;
        self.corner_boundary += o.corner_boundary;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PartKind {
    Interior,
    Boundary,
    Corner,
}

/// Multipliers applied to each squared residual: weight / point count.
#[derive(Debug, Clone, Copy)]
struct Coefficients {
    interior: f64,
    boundary: f64,
    corner: f64,
}

/// Scratch engines for one worker.
#[derive(Clone)]
struct Engines {
    /// Solution/velocity network with Laplacian jets.
    primary: BatchJetEngine,
    /// Solution/velocity network, values only.
    primary_value: BatchJetEngine,
    /// Pressure network with gradient jets.
    pressure: Option<BatchJetEngine>,
}

/// The training loss of a problem on a dataset for a given architecture.
#[derive(Clone)]
pub struct CollocationLoss<'a> {
    problem: &'a Problem,
    dataset: &'a Dataset,
    variant: LossVariant,
    param_count: usize,
    primary_range: std::ops::Range<usize>,
    pressure_range: Option<std::ops::Range<usize>>,
    /// Poisson source at interior points and corners.
    interior_source: Vec<f64>,
    corner_source: Vec<f64>,
    /// Flattened Dirichlet data, `components` values per point.
    boundary_target: Vec<f64>,
    corner_target: Vec<f64>,
    components: usize,
    engines: Engines,
}

impl<'a> CollocationLoss<'a> {
    pub fn new(
        problem: &'a Problem,
        variant: LossVariant,
        dataset: &'a Dataset,
        architecture: &Architecture,
    ) -> Result<Self, ProblemError> {
        variant.validate()?;
        architecture.validate_for(problem)?;
        if dataset.interior.is_empty() {
            return Err(ProblemError::MissingPart("interior"));
        }
        if dataset.boundary.is_empty() {
            return Err(ProblemError::MissingPart("boundary"));
        }
        if variant.uses_corners() {
            if matches!(problem, Problem::Kovasznay(_)) {
                return Err(ProblemError::UnsupportedVariant(format!(
                    "{} is only defined for the Poisson problem",
                    variant.label()
                )));
            }
            if dataset.corners.is_empty() {
                return Err(ProblemError::MissingPart("corner"));
            }
        }
        let domain = problem.domain();
        for p in dataset
            .interior
            .iter()
            .chain(&dataset.boundary)
            .chain(&dataset.corners)
        {
            if !domain.contains(p) {
                return Err(ProblemError::PointOutsideDomain(p.clone()));
            }
        }

        let source = |pts: &[Point]| -> Vec<f64> {
            match problem {
                Problem::Poisson(p) => pts.iter().map(|x| p.source(x)).collect(),
                Problem::Kovasznay(_) => Vec::new(),
            }
        };
        let target = |pts: &[Point]| -> Vec<f64> {
            pts.iter().flat_map(|x| problem.boundary_value(x)).collect()
        };
        let ranges = architecture.ranges();
        let nets = &architecture.networks;
        let corners: &[Point] = if variant.uses_corners() {
            &dataset.corners
        } else {
            &[]
        };
        Ok(Self {
            problem,
            dataset,
            variant,
            param_count: architecture.param_count(),
            primary_range: ranges[0].clone(),
            pressure_range: ranges.get(1).cloned(),
            interior_source: source(&dataset.interior),
            corner_source: source(corners),
            boundary_target: target(&dataset.boundary),
            corner_target: target(corners),
            components: problem.solution_components(),
            engines: Engines {
                primary: BatchJetEngine::new(&nets[0], DerivativeOrder::Laplacian, CHUNK),
                primary_value: BatchJetEngine::new(&nets[0], DerivativeOrder::Value, CHUNK),
                pressure: nets
                    .get(1)
                    .map(|n| BatchJetEngine::new(n, DerivativeOrder::Gradient, CHUNK)),
            },
        })
    }

    pub fn variant(&self) -> LossVariant {
        self.variant
    }

    /// Same problem, dataset and architecture with another variant.
    pub fn with_variant(&self, variant: LossVariant) -> Result<Self, ProblemError> {
        variant.validate()?;
        if variant.uses_corners() != self.variant.uses_corners() {
            return Err(ProblemError::UnsupportedVariant(
                "switching corner usage requires rebuilding the loss".into(),
            ));
        }
        let mut next = self.clone();
        next.variant = variant;
        Ok(next)
    }

    fn corner_count(&self) -> usize {
        self.corner_target.len() / self.components
    }

    fn coefficients(&self) -> Coefficients {
        let w = self.variant.weights();
        let nc = self.corner_count();
        Coefficients {
            interior: w.interior / self.dataset.interior.len() as f64,
            boundary: w.boundary / self.dataset.boundary.len() as f64,
            corner: if nc == 0 { 0.0 } else { w.corner / nc as f64 },
        }
    }

    /// Averaged parts at `theta`.
    pub fn terms(&self, theta: &[f64]) -> LossTerms {
        let sums = self.accumulate(theta, None);
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        let (ni, nb, nc) = (
            self.dataset.interior.len(),
            self.dataset.boundary.len(),
            self.corner_count(),
        );
        LossTerms {
            interior: mean(sums.interior, ni),
            divergence: mean(sums.divergence, ni),
            boundary: mean(sums.boundary, nb),
            corner_residual: mean(sums.corner_residual, nc),
            corner_boundary: mean(sums.corner_boundary, nc),
        }
    }

    /// Weighted inner sum (before any square root) and its gradient.
    fn accumulate(&self, theta: &[f64], grad: Option<&mut [f64]>) -> Sums {
        let n_int = self.dataset.interior.len();
        let n_bou = self.dataset.boundary.len();
        let mut items: Vec<(PartKind, usize, usize)> = Vec::new();
        for (kind, n) in [
            (PartKind::Interior, n_int),
            (PartKind::Boundary, n_bou),
            (PartKind::Corner, self.corner_count()),
        ] {
            let mut start = 0;
            while start < n {
                let end = (start + CHUNK).min(n);
                items.push((kind, start, end));
                start = end;
            }
        }
        let coeffs = self.coefficients();
        let want_grad = grad.is_some();
        let results: Vec<(Sums, Vec<f64>)> = items
            .par_iter()
            .map_init(
                || self.engines.clone(),
                |engines, &(kind, start, end)| {
                    let mut g = if want_grad {
                        vec![0.0; self.param_count]
                    } else {
                        Vec::new()
                    };
                    let gref = if want_grad { Some(&mut g[..]) } else { None };
                    let sums = self.work_item(engines, theta, kind, start, end, &coeffs, gref);
                    (sums, g)
                },
            )
            .collect();

        let mut total = Sums::default();
        match grad {
            Some(grad) => {
                grad.fill(0.0);
                for (s, g) in &results {
                    total.add(s);
                    for (a, b) in grad.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            None => results.iter().for_each(|(s, _)| total.add(s)),
        }
        total
    }

    #[allow(clippy::too_many_arguments)]
    fn work_item(
        &self,
        engines: &mut Engines,
        theta: &[f64],
        kind: PartKind,
        start: usize,
        end: usize,
        coeffs: &Coefficients,
        mut grad: Option<&mut [f64]>,
    ) -> Sums {
        let mut sums = Sums::default();
        let tu = &theta[self.primary_range.clone()];
        let m = self.components;
        let want_grad = grad.is_some();
        match kind {
            PartKind::Interior | PartKind::Corner => {
                let (points, sources, coeff) = if kind == PartKind::Interior {
                    (&self.dataset.interior[start..end], &self.interior_source, coeffs.interior)
                } else {
                    (&self.dataset.corners[start..end], &self.corner_source, coeffs.corner)
                };
                match self.problem {
                    Problem::Poisson(_) => {
                        let eng = &mut engines.primary;
                        eng.forward(tu, points).expect("dimensions validated");
                        eng.clear_seed();
                        for p in 0..points.len() {
                            let i = start + p;
                            let r = eng.laplacian(0, p) + sources[i];
                            let mut e = 0.0;
                            if kind == PartKind::Corner {
                                e = eng.value(0, p) - self.corner_target[i];
                                sums.corner_residual += r * r;
                                sums.corner_boundary += e * e;
                            } else {
                                sums.interior += r * r;
                            }
                            if want_grad {
                                eng.seed_laplacian(0, p, 2.0 * coeff * r);
                                if kind == PartKind::Corner {
                                    eng.seed_value(0, p, 2.0 * coeff * e);
                                }
                            }
                        }
                        if let Some(g) = grad.as_deref_mut() {
                            eng.backward(tu, &mut g[self.primary_range.clone()]);
                        }
                    }
                    Problem::Kovasznay(ns) => {
                        let pr = self.pressure_range.clone().expect("pressure network");
                        let tp = &theta[pr.clone()];
                        let vel = &mut engines.primary;
                        let pre = engines.pressure.as_mut().expect("pressure engine");
                        vel.forward(tu, points).expect("dimensions validated");
                        pre.forward(tp, points).expect("dimensions validated");
                        vel.clear_seed();
                        pre.clear_seed();
                        for p in 0..points.len() {
                            let u = [vel.value(0, p), vel.value(1, p)];
                            let du = [
                                [vel.grad(0, 0, p), vel.grad(0, 1, p)],
                                [vel.grad(1, 0, p), vel.grad(1, 1, p)],
                            ];
                            let mut mom = [0.0; 2];
                            for k in 0..2 {
                                mom[k] = -ns.nu * vel.laplacian(k, p)
                                    + u[0] * du[k][0]
                                    + u[1] * du[k][1]
                                    + pre.grad(0, k, p);
                            }
                            let div = du[0][0] + du[1][1];
                            sums.interior += mom[0] * mom[0] + mom[1] * mom[1];
                            sums.divergence += div * div;
                            if want_grad {
                                let a = [2.0 * coeff * mom[0], 2.0 * coeff * mom[1]];
                                let b = 2.0 * coeff * div;
                                for k in 0..2 {
                                    vel.seed_laplacian(k, p, -ns.nu * a[k]);
                                    vel.seed_value(k, p, a[0] * du[0][k] + a[1] * du[1][k]);
                                    for (j, uj) in u.iter().enumerate() {
                                        vel.seed_grad(k, j, p, a[k] * uj);
                                    }
                                    vel.seed_grad(k, k, p, b);
                                    pre.seed_grad(0, k, p, a[k]);
                                }
                            }
                        }
                        if let Some(g) = grad.as_deref_mut() {
                            vel.backward(tu, &mut g[self.primary_range.clone()]);
                            pre.backward(tp, &mut g[pr]);
                        }
                    }
                }
            }
            PartKind::Boundary => {
                let eng = &mut engines.primary_value;
                let points = &self.dataset.boundary[start..end];
                eng.forward(tu, points).expect("dimensions validated");
                eng.clear_seed();
                for p in 0..points.len() {
                    let target = &self.boundary_target[(start + p) * m..(start + p + 1) * m];
                    for (k, t) in target.iter().enumerate() {
                        let e = eng.value(k, p) - t;
                        sums.boundary += e * e;
                        if want_grad {
                            eng.seed_value(k, p, 2.0 * coeffs.boundary * e);
                        }
                    }
                }
                if let Some(g) = grad {
                    eng.backward(tu, &mut g[self.primary_range.clone()]);
                }
            }
        }
        sums
    }

    fn inner_value(&self, sums: &Sums) -> f64 {
        let c = self.coefficients();
        c.interior * (sums.interior + sums.divergence)
            + c.boundary * sums.boundary
            + c.corner * (sums.corner_residual + sums.corner_boundary)
    }
}

impl Objective for CollocationLoss<'_> {
    fn dim(&self) -> usize {
        self.param_count
    }

    fn evaluate(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let sums = self.accumulate(theta, Some(grad));
        let inner = self.inner_value(&sums);
        if !self.variant.is_sqrt() {
            return inner;
        }
        let value = inner.sqrt();
        let scale = if value > 0.0 { 0.5 / value } else { 0.0 };
        grad.iter_mut().for_each(|g| *g *= scale);
        value
    }

    fn value(&self, theta: &[f64]) -> f64 {
        let inner = self.inner_value(&self.accumulate(theta, None));
        if self.variant.is_sqrt() {
            inner.sqrt()
        } else {
            inner
        }
    }
}

impl PenaltyProblem for CollocationLoss<'_> {
    type Loss<'s>
        = CollocationLoss<'s>
    where
        Self: 's;

    fn penalized(&self, lambda: f64, sqrt: bool) -> Self::Loss<'_> {
        let mut next = self.clone();
        next.variant = LossVariant::Penalty { lambda, sqrt };
        next
    }

    fn constraint_violation(&self, theta: &[f64]) -> f64 {
        self.terms(theta).boundary
    }
}
