//! Multilayer perceptrons with sigmoid hidden layers and a linear output layer.
//!
//! Parameters live in one flat vector. The layout is layer-major: for each
//! layer the `fan_out x fan_in` weight matrix in row-major order, followed by
//! its `fan_out` biases. The layout never changes, so a serialized vector
//! reloads into exactly the same network.

mod batch;
mod jet;

pub use batch::BatchJetEngine;
pub use jet::{forward_jet, DerivativeOrder, EvalJet, JetEngine};

use serde::{Deserialize, Serialize};

use crate::objective::Objective;
use crate::rng::Stream;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NetError {
    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("loss is not finite at the given parameters ({0})")]
    NonFiniteLoss(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

/// Offsets of one affine layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: usize,
    pub biases: usize,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden_widths: &[usize], output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            hidden_widths: hidden_widths.to_vec(),
            activation: Activation::Sigmoid,
        }
    }

    /// `layers` hidden layers of `width` units each.
    pub fn uniform(input_dim: usize, layers: usize, width: usize, output_dim: usize) -> Self {
        Self::new(input_dim, &vec![width; layers], output_dim)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(NetError::InvalidSpec(
                "input and output dimensions must be positive".into(),
            ));
        }
        if self.hidden_widths.contains(&0) {
            return Err(NetError::InvalidSpec("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_widths);
        dims.push(self.output_dim);
        let mut offset = 0;
        dims.windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let shape = LayerShape {
                    fan_in,
                    fan_out,
                    weights: offset,
                    biases: offset + fan_in * fan_out,
                };
                offset += fan_in * fan_out + fan_out;
                shape
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        param_count(self)
    }

    pub fn max_width(&self) -> usize {
        self.hidden_widths
            .iter()
            .copied()
            .chain([self.input_dim, self.output_dim])
            .max()
            .unwrap_or(0)
    }
}

/// Σ over layers of `fan_in * fan_out + fan_out`.
pub fn param_count(spec: &NetworkSpec) -> usize {
    spec.layer_shapes()
        .iter()
        .map(|l| l.fan_in * l.fan_out + l.fan_out)
        .sum()
}

/// Flat learnable-parameter vector.
///
/// Serializes as a list of decimal strings with 17 significant digits, which
/// round-trips every `f64` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector(pub Vec<f64>);

impl ParameterVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<f64>> for ParameterVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// 17 significant digits in scientific notation.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

impl Serialize for ParameterVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.0.iter().map(|&x| format_f64(x)))
    }
}

impl<'de> Deserialize<'de> for ParameterVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw: Vec<String> = Vec::deserialize(d)?;
        raw.iter()
            .map(|s| s.trim().parse::<f64>().map_err(serde::de::Error::custom))
            .collect::<Result<Vec<_>, _>>()
            .map(ParameterVector)
    }
}

/// Uniform Xavier initialization with zero biases, fully determined by `(spec, seed)`.
pub fn init_xavier(spec: &NetworkSpec, seed: u64) -> ParameterVector {
    let mut stream = Stream::new(seed);
    ParameterVector(init_xavier_from(spec, &mut stream))
}

/// Xavier initialization drawing weights from an existing stream, in layout order.
pub fn init_xavier_from(spec: &NetworkSpec, stream: &mut Stream) -> Vec<f64> {
    let mut theta = vec![0.0; param_count(spec)];
    for layer in spec.layer_shapes() {
        let bound = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
        for w in &mut theta[layer.weights..layer.biases] {
            *w = stream.uniform(-bound, bound);
        }
    }
    theta
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), NetError> {
    if expected == got {
        Ok(())
    } else {
        Err(NetError::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}

/// Plain network evaluation at `x`.
pub fn forward(spec: &NetworkSpec, theta: &[f64], x: &[f64]) -> Result<Vec<f64>, NetError> {
    check_len("parameter vector", param_count(spec), theta.len())?;
    check_len("input point", spec.input_dim, x.len())?;
    let shapes = spec.layer_shapes();
    let last = shapes.len() - 1;
    let mut act = x.to_vec();
    for (l, layer) in shapes.iter().enumerate() {
        let w = &theta[layer.weights..layer.biases];
        let b = &theta[layer.biases..layer.biases + layer.fan_out];
        act = (0..layer.fan_out)
            .map(|o| {
                let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                let z = row.iter().zip(&act).map(|(a, b)| a * b).sum::<f64>() + b[o];
                if l == last {
                    z
                } else {
                    sigmoid(z)
                }
            })
            .collect();
    }
    Ok(act)
}

/// Value and full parameter gradient of a loss, rejecting non-finite values.
pub fn loss_gradient<L: Objective + ?Sized>(
    loss: &L,
    theta: &[f64],
) -> Result<(f64, Vec<f64>), NetError> {
    check_len("parameter vector", loss.dim(), theta.len())?;
    let mut grad = vec![0.0; theta.len()];
    let value = loss.evaluate(theta, &mut grad);
    if !value.is_finite() {
        return Err(NetError::NonFiniteLoss(value));
    }
    Ok((value, grad))
}
