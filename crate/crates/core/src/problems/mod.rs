//! The two PDE problems: analytic solutions, residual operators and losses.

mod loss;
mod model;

pub use loss::{CollocationLoss, LossTerms, LossVariant};
pub use model::{Architecture, Model};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::neuralnet::{EvalJet, NetError};
use crate::sampling::Rectangle;

pub const POISSON_ID: &str = "poisson-manufactured";
pub const KOVASZNAY_ID: &str = "kovasznay";

#[derive(Debug, thiserror::Error)]
pub enum ProblemError {
    #[error("unknown problem id {0:?} (expected {POISSON_ID:?} or {KOVASZNAY_ID:?})")]
    UnknownProblem(String),
    #[error("architecture does not fit the problem: {0}")]
    ArchitectureMismatch(String),
    #[error("dataset has no {0} points but the loss needs them")]
    MissingPart(&'static str),
    #[error("dataset point {0:?} lies outside the problem domain")]
    PointOutsideDomain(Vec<f64>),
    #[error("loss variant not supported here: {0}")]
    UnsupportedVariant(String),
    #[error("invalid loss variant: {0}")]
    InvalidVariant(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// `-∇²u = f` on `[0,1]²` with `u = sin(πx₁) sin(πx₂)` and `g = u` on the boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonProblem {
    pub domain: Rectangle,
}

impl Default for PoissonProblem {
    fn default() -> Self {
        Self {
            domain: Rectangle::unit_square(),
        }
    }
}

impl PoissonProblem {
    pub fn u_true(&self, x: &[f64]) -> f64 {
        (PI * x[0]).sin() * (PI * x[1]).sin()
    }

    /// `f = 2π² sin(πx₁) sin(πx₂)`
    pub fn source(&self, x: &[f64]) -> f64 {
        2.0 * PI * PI * self.u_true(x)
    }

    pub fn boundary_value(&self, x: &[f64]) -> f64 {
        self.u_true(x)
    }

    /// Closed-form value, gradient and Hessian of the exact solution.
    pub fn u_true_jet(&self, x: &[f64]) -> EvalJet {
        let (s1, c1) = (PI * x[0]).sin_cos();
        let (s2, c2) = (PI * x[1]).sin_cos();
        let mut jet = EvalJet::zeros(1, 2);
        jet.value[0] = s1 * s2;
        jet.grad[0] = vec![PI * c1 * s2, PI * s1 * c2];
        let pp = PI * PI;
        jet.hessian[0] = vec![
            vec![-pp * s1 * s2, pp * c1 * c2],
            vec![pp * c1 * c2, -pp * s1 * s2],
        ];
        jet
    }

    /// `∇²û(x) + f(x)` for a scalar jet at `x`.
    pub fn residual(&self, jet: &EvalJet, x: &[f64]) -> f64 {
        jet.laplacian(0) + self.source(x)
    }
}

/// Kovasznay flow on `[-0.5, 1.0] x [-0.5, 1.5]`:
///
/// ```text
/// u₁ = 1 - exp(λx₁) cos 2πx₂
/// u₂ = λ/(2π) exp(λx₁) sin 2πx₂
/// p  = (1 - exp(2λx₁)) / 2 + C
/// λ  = 1/(2ν) - sqrt(1/(4ν²) + 4π²)
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KovasznayProblem {
    pub domain: Rectangle,
    pub nu: f64,
    /// Additive pressure constant `C`.
    pub gauge: f64,
}

impl Default for KovasznayProblem {
    fn default() -> Self {
        Self::with_viscosity(0.025)
    }
}

/// Pointwise Navier–Stokes residuals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NsResiduals {
    /// `(-ν∇²u + u·∇u + ∇p)_k`
    pub momentum: [f64; 2],
    /// `∇·u`
    pub divergence: f64,
}

impl KovasznayProblem {
    pub fn with_viscosity(nu: f64) -> Self {
        Self {
            domain: Rectangle::new(vec![-0.5, -0.5], vec![1.0, 1.5]).expect("valid"),
            nu,
            gauge: 0.0,
        }
    }

    pub fn lambda(&self) -> f64 {
        let nu = self.nu;
        1.0 / (2.0 * nu) - (1.0 / (4.0 * nu * nu) + 4.0 * PI * PI).sqrt()
    }

    /// `(u₁, u₂, p)`
    pub fn solution(&self, x: &[f64]) -> [f64; 3] {
        let lam = self.lambda();
        let e = (lam * x[0]).exp();
        let (s, c) = (2.0 * PI * x[1]).sin_cos();
        [
            1.0 - e * c,
            lam / (2.0 * PI) * e * s,
            0.5 * (1.0 - (2.0 * lam * x[0]).exp()) + self.gauge,
        ]
    }

    pub fn boundary_value(&self, x: &[f64]) -> [f64; 2] {
        let [u1, u2, _] = self.solution(x);
        [u1, u2]
    }

    /// Closed-form velocity jet (two outputs).
    ///
    /// With `E = exp(λx₁)`, `k = 2π`, `s = sin kx₂`, `c = cos kx₂`:
    /// `∂₁u₁ = -λEc`, `∂₂u₁ = kEs`, `∂₁₁u₁ = -λ²Ec`, `∂₁₂u₁ = λkEs`, `∂₂₂u₁ = k²Ec`;
    /// `∂₁u₂ = (λ²/k)Es`, `∂₂u₂ = λEc`, `∂₁₁u₂ = (λ³/k)Es`, `∂₁₂u₂ = λ²Ec`, `∂₂₂u₂ = -λkEs`.
    pub fn velocity_jet(&self, x: &[f64]) -> EvalJet {
        let lam = self.lambda();
        let k = 2.0 * PI;
        let e = (lam * x[0]).exp();
        let (s, c) = (k * x[1]).sin_cos();
        let mut jet = EvalJet::zeros(2, 2);
        jet.value = vec![1.0 - e * c, lam / k * e * s];
        jet.grad[0] = vec![-lam * e * c, k * e * s];
        jet.grad[1] = vec![lam * lam / k * e * s, lam * e * c];
        jet.hessian[0] = vec![
            vec![-lam * lam * e * c, lam * k * e * s],
            vec![lam * k * e * s, k * k * e * c],
        ];
        jet.hessian[1] = vec![
            vec![lam * lam * lam / k * e * s, lam * lam * e * c],
            vec![lam * lam * e * c, -lam * k * e * s],
        ];
        jet
    }

    /// Closed-form pressure jet: `∂₁p = -λ exp(2λx₁)`, `∂₁₁p = -2λ² exp(2λx₁)`.
    pub fn pressure_jet(&self, x: &[f64]) -> EvalJet {
        let lam = self.lambda();
        let e2 = (2.0 * lam * x[0]).exp();
        let mut jet = EvalJet::zeros(1, 2);
        jet.value[0] = 0.5 * (1.0 - e2) + self.gauge;
        jet.grad[0] = vec![-lam * e2, 0.0];
        jet.hessian[0] = vec![vec![-2.0 * lam * lam * e2, 0.0], vec![0.0, 0.0]];
        jet
    }

    /// Residuals of the steady equations with zero forcing.
    pub fn residuals(&self, velocity: &EvalJet, pressure: &EvalJet) -> NsResiduals {
        let u = &velocity.value;
        let mut momentum = [0.0; 2];
        for (k, m) in momentum.iter_mut().enumerate() {
            let convection: f64 = (0..2).map(|j| u[j] * velocity.grad[k][j]).sum();
            *m = -self.nu * velocity.laplacian(k) + convection + pressure.grad[0][k];
        }
        NsResiduals {
            momentum,
            divergence: velocity.grad[0][0] + velocity.grad[1][1],
        }
    }
}

/// Problem selected by string id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id")]
pub enum Problem {
    #[serde(rename = "poisson-manufactured")]
    Poisson(PoissonProblem),
    #[serde(rename = "kovasznay")]
    Kovasznay(KovasznayProblem),
}

/// Jets of every network at one point, as consumed by the residual operators.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldJets {
    /// Scalar solution (Poisson) or velocity (Kovasznay).
    pub primary: EvalJet,
    pub pressure: Option<EvalJet>,
}

impl Problem {
    pub fn from_id(id: &str) -> Result<Self, ProblemError> {
        match id {
            POISSON_ID => Ok(Problem::Poisson(PoissonProblem::default())),
            KOVASZNAY_ID => Ok(Problem::Kovasznay(KovasznayProblem::default())),
            other => Err(ProblemError::UnknownProblem(other.to_string())),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Problem::Poisson(_) => POISSON_ID,
            Problem::Kovasznay(_) => KOVASZNAY_ID,
        }
    }

    pub fn domain(&self) -> &Rectangle {
        match self {
            Problem::Poisson(p) => &p.domain,
            Problem::Kovasznay(k) => &k.domain,
        }
    }

    /// Number of solution components compared against the exact solution
    /// (velocity components for Kovasznay).
    pub fn solution_components(&self) -> usize {
        match self {
            Problem::Poisson(_) => 1,
            Problem::Kovasznay(_) => 2,
        }
    }

    /// Exact solution components (`u` or `(u₁, u₂)`).
    pub fn exact(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Problem::Poisson(p) => vec![p.u_true(x)],
            Problem::Kovasznay(k) => k.boundary_value(x).to_vec(),
        }
    }

    /// Dirichlet data `g`.
    pub fn boundary_value(&self, x: &[f64]) -> Vec<f64> {
        self.exact(x)
    }

    pub fn analytic_jets(&self, x: &[f64]) -> FieldJets {
        match self {
            Problem::Poisson(p) => FieldJets {
                primary: p.u_true_jet(x),
                pressure: None,
            },
            Problem::Kovasznay(k) => FieldJets {
                primary: k.velocity_jet(x),
                pressure: Some(k.pressure_jet(x)),
            },
        }
    }

    /// Pointwise residual vector: `[∇²û + f]` for Poisson,
    /// `[mom₁, mom₂, div]` for Kovasznay.
    pub fn residuals(&self, jets: &FieldJets, x: &[f64]) -> Vec<f64> {
        match self {
            Problem::Poisson(p) => vec![p.residual(&jets.primary, x)],
            Problem::Kovasznay(k) => {
                let pressure = jets
                    .pressure
                    .as_ref()
                    .expect("Kovasznay residuals need a pressure jet");
                let r = k.residuals(&jets.primary, pressure);
                vec![r.momentum[0], r.momentum[1], r.divergence]
            }
        }
    }
}
