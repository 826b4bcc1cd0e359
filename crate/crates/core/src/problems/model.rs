use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{FieldJets, Problem, ProblemError};
use crate::neuralnet::{
    self, check_len, forward_jet, init_xavier_from, NetError, NetworkSpec, ParameterVector,
};
use crate::rng::Stream;

/// The networks a problem is solved with.
///
/// Poisson uses one scalar network; Kovasznay uses a velocity network with
/// two outputs followed by a separate pressure network with one output. The
/// flat parameter vector is the concatenation of the per-network vectors in
/// this order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub networks: Vec<NetworkSpec>,
}

impl Architecture {
    pub fn poisson(hidden_layers: usize, width: usize) -> Self {
        Self {
            networks: vec![NetworkSpec::uniform(2, hidden_layers, width, 1)],
        }
    }

    pub fn kovasznay(velocity_layers: usize, pressure_layers: usize, width: usize) -> Self {
        Self {
            networks: vec![
                NetworkSpec::uniform(2, velocity_layers, width, 2),
                NetworkSpec::uniform(2, pressure_layers, width, 1),
            ],
        }
    }

    /// Numbered velocity/pressure architectures 1-4 with 16-unit layers:
    /// (1,1), (2,1), (2,2), (3,2) hidden layers.
    pub fn kovasznay_numbered(index: usize) -> Option<Self> {
        let (v, p) = match index {
            1 => (1, 1),
            2 => (2, 1),
            3 => (2, 2),
            4 => (3, 2),
            _ => return None,
        };
        Some(Self::kovasznay(v, p, 16))
    }

    pub fn param_count(&self) -> usize {
        self.networks.iter().map(NetworkSpec::param_count).sum()
    }

    /// Slice of the flat vector owned by each network.
    pub fn ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.networks
            .iter()
            .map(|n| {
                let r = start..start + n.param_count();
                start = r.end;
                r
            })
            .collect()
    }

    /// Xavier initialization of all networks from one stream seeded with `seed`.
    pub fn init_xavier(&self, seed: u64) -> ParameterVector {
        let mut stream = Stream::new(seed);
        ParameterVector(
            self.networks
                .iter()
                .flat_map(|n| init_xavier_from(n, &mut stream))
                .collect(),
        )
    }

    pub fn validate_for(&self, problem: &Problem) -> Result<(), ProblemError> {
        for n in &self.networks {
            n.validate()?;
            if n.input_dim != problem.domain().dim() {
                return Err(ProblemError::ArchitectureMismatch(format!(
                    "network input dimension {} but domain dimension {}",
                    n.input_dim,
                    problem.domain().dim()
                )));
            }
        }
        let outputs: Vec<usize> = self.networks.iter().map(|n| n.output_dim).collect();
        let expected: &[usize] = match problem {
            Problem::Poisson(_) => &[1],
            Problem::Kovasznay(_) => &[2, 1],
        };
        if outputs != expected {
            return Err(ProblemError::ArchitectureMismatch(format!(
                "{} needs networks with outputs {expected:?}, got {outputs:?}",
                problem.id()
            )));
        }
        Ok(())
    }
}

/// An architecture together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub architecture: Architecture,
    pub theta: ParameterVector,
}

impl Model {
    pub fn new(architecture: Architecture, theta: ParameterVector) -> Result<Self, NetError> {
        check_len("parameter vector", architecture.param_count(), theta.len())?;
        Ok(Self {
            architecture,
            theta,
        })
    }

    fn network(&self, index: usize) -> (&NetworkSpec, &[f64]) {
        let ranges = self.architecture.ranges();
        (
            &self.architecture.networks[index],
            &self.theta.0[ranges[index].clone()],
        )
    }

    /// Outputs of the first network (solution or velocity).
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        let (spec, theta) = self.network(0);
        neuralnet::forward(spec, theta, x)
    }

    /// Output of the pressure network, when there is one.
    pub fn pressure(&self, x: &[f64]) -> Result<Option<f64>, NetError> {
        if self.architecture.networks.len() < 2 {
            return Ok(None);
        }
        let (spec, theta) = self.network(1);
        Ok(Some(neuralnet::forward(spec, theta, x)?[0]))
    }

    pub fn jets(&self, x: &[f64]) -> Result<FieldJets, NetError> {
        let (spec, theta) = self.network(0);
        let primary = forward_jet(spec, theta, x)?;
        let pressure = if self.architecture.networks.len() > 1 {
            let (spec, theta) = self.network(1);
            Some(forward_jet(spec, theta, x)?)
        } else {
            None
        };
        Ok(FieldJets { primary, pressure })
    }
}
