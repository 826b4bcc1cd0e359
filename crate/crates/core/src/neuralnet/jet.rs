//! Spatial derivative jets and their reverse-mode parameter gradients.
//!
//! A jet carries, for every unit of a layer, the value together with its
//! first derivatives `∂/∂x_j` and a chosen set of second derivatives
//! `∂²/∂x_i∂x_j` (index pairs with `i <= j`). The forward pass pushes jets
//! through the layers with the chain rule; the backward pass takes adjoints
//! for the output jet and accumulates `∂L/∂θ`, which includes the
//! third-order mixed terms needed when a loss depends on the Laplacian.
//!
//! Buffers are channel-major: channel 0 is the value, channels `1..=d` the
//! gradient, then one channel per second-derivative pair.

use super::{check_len, LayerShape, NetError, NetworkSpec};

/// Which derivatives of the output are propagated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeOrder {
    Value,
    Gradient,
    /// Gradient plus the diagonal second derivatives `∂²/∂x_i²`.
    Laplacian,
    /// Gradient plus every `∂²/∂x_i∂x_j` with `i <= j`.
    Hessian,
}

/// Network outputs with spatial gradient and Hessian at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalJet {
    pub value: Vec<f64>,
    /// `grad[k][j] = ∂û_k/∂x_j`
    pub grad: Vec<Vec<f64>>,
    /// `hessian[k][i][j] = ∂²û_k/∂x_i∂x_j`
    pub hessian: Vec<Vec<Vec<f64>>>,
}

impl EvalJet {
    pub fn zeros(outputs: usize, dim: usize) -> Self {
        Self {
            value: vec![0.0; outputs],
            grad: vec![vec![0.0; dim]; outputs],
            hessian: vec![vec![vec![0.0; dim]; dim]; outputs],
        }
    }

    pub fn outputs(&self) -> usize {
        self.value.len()
    }

    pub fn dim(&self) -> usize {
        self.grad.first().map_or(0, Vec::len)
    }

    pub fn laplacian(&self, k: usize) -> f64 {
        (0..self.dim()).map(|i| self.hessian[k][i][i]).sum()
    }
}

/// Reusable workspace for jet evaluation of one network.
///
/// Not `Sync`-shared: give every worker its own engine.
#[derive(Debug, Clone)]
pub struct JetEngine {
    shapes: Vec<LayerShape>,
    params: usize,
    dim: usize,
    outputs: usize,
    order: DerivativeOrder,
    pairs: Vec<(usize, usize)>,
    diagonal: Vec<usize>,
    channels: usize,
    /// Input jets of every layer.
    acts: Vec<Vec<f64>>,
    /// Pre-activation jets of every hidden layer.
    pre: Vec<Vec<f64>>,
    /// σ', σ'', σ''' of every hidden layer.
    sig: Vec<Vec<f64>>,
    out: Vec<f64>,
    seed: Vec<f64>,
    scratch: [Vec<f64>; 2],
}

impl JetEngine {
    pub fn new(spec: &NetworkSpec, order: DerivativeOrder) -> Self {
        let dim = spec.input_dim;
        let pairs: Vec<(usize, usize)> = match order {
            DerivativeOrder::Value | DerivativeOrder::Gradient => Vec::new(),
            DerivativeOrder::Laplacian => (0..dim).map(|i| (i, i)).collect(),
            DerivativeOrder::Hessian => (0..dim)
                .flat_map(|i| (i..dim).map(move |j| (i, j)))
                .collect(),
        };
        let diagonal = pairs
            .iter()
            .enumerate()
            .filter(|(_, (i, j))| i == j)
            .map(|(p, _)| p)
            .collect();
        let channels = match order {
            DerivativeOrder::Value => 1,
            _ => 1 + dim + pairs.len(),
        };
        let shapes = spec.layer_shapes();
        let acts = shapes.iter().map(|l| vec![0.0; channels * l.fan_in]).collect();
        let hidden = &shapes[..shapes.len() - 1];
        let pre = hidden.iter().map(|l| vec![0.0; channels * l.fan_out]).collect();
        let sig = hidden.iter().map(|l| vec![0.0; 3 * l.fan_out]).collect();
        let width = spec.max_width();
        Self {
            params: spec.param_count(),
            shapes,
            dim,
            outputs: spec.output_dim,
            order,
            pairs,
            diagonal,
            channels,
            acts,
            pre,
            sig,
            out: vec![0.0; channels * spec.output_dim],
            seed: vec![0.0; channels * spec.output_dim],
            scratch: [vec![0.0; channels * width], vec![0.0; channels * width]],
        }
    }

    pub fn order(&self) -> DerivativeOrder {
        self.order
    }

    pub fn param_count(&self) -> usize {
        self.params
    }

    /// Second-derivative index pairs carried by this engine.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Evaluates the jet at `x`; results are read through the accessors.
    pub fn forward(&mut self, theta: &[f64], x: &[f64]) -> Result<(), NetError> {
        check_len("parameter vector", self.params, theta.len())?;
        check_len("input point", self.dim, x.len())?;
        let (d, ch) = (self.dim, self.channels);

        let input = &mut self.acts[0];
        input.fill(0.0);
        input[..d].copy_from_slice(x);
        if ch > 1 {
            for j in 0..d {
                input[(1 + j) * d + j] = 1.0;
            }
        }

        let last = self.shapes.len() - 1;
        for l in 0..=last {
            let layer = self.shapes[l];
            let (fi, fo) = (layer.fan_in, layer.fan_out);
            let w = &theta[layer.weights..layer.biases];
            let b = &theta[layer.biases..layer.biases + fo];
            let z = if l == last {
                &mut self.out
            } else {
                &mut self.pre[l]
            };
            let a = &self.acts[l];
            for c in 0..ch {
                let ac = &a[c * fi..(c + 1) * fi];
                let zc = &mut z[c * fo..(c + 1) * fo];
                for (o, zo) in zc.iter_mut().enumerate() {
                    let row = &w[o * fi..(o + 1) * fi];
                    *zo = dot(row, ac);
                }
                if c == 0 {
                    for (zo, bo) in zc.iter_mut().zip(b) {
                        *zo += bo;
                    }
                }
            }
            if l < last {
                self.activate(l);
            }
        }
        Ok(())
    }

    /// Sigmoid on hidden layer `l`, writing the input jets of layer `l + 1`.
    fn activate(&mut self, l: usize) {
        let n = self.shapes[l].fan_out;
        let d = self.dim;
        let z = &self.pre[l];
        let sig = &mut self.sig[l];
        let h = &mut self.acts[l + 1];
        for k in 0..n {
            let s = 1.0 / (1.0 + (-z[k]).exp());
            let s1 = s * (1.0 - s);
            let s2 = s1 * (1.0 - 2.0 * s);
            let s3 = s1 * (1.0 - 6.0 * s1);
            sig[k] = s1;
            sig[n + k] = s2;
            sig[2 * n + k] = s3;
            h[k] = s;
        }
        if self.channels == 1 {
            return;
        }
        for j in 0..d {
            let c = (1 + j) * n;
            for k in 0..n {
                h[c + k] = sig[k] * z[c + k];
            }
        }
        for (p, &(i, j)) in self.pairs.iter().enumerate() {
            let c = (1 + d + p) * n;
            let (ci, cj) = ((1 + i) * n, (1 + j) * n);
            for k in 0..n {
                h[c + k] = sig[n + k] * z[ci + k] * z[cj + k] + sig[k] * z[c + k];
            }
        }
    }

    pub fn value(&self, k: usize) -> f64 {
        self.out[k]
    }

    pub fn grad(&self, k: usize, j: usize) -> f64 {
        debug_assert!(self.order != DerivativeOrder::Value);
        self.out[(1 + j) * self.outputs + k]
    }

    /// Second derivative for pair index `p` (see [`JetEngine::pairs`]).
    pub fn second(&self, k: usize, p: usize) -> f64 {
        self.out[(1 + self.dim + p) * self.outputs + k]
    }

    pub fn laplacian(&self, k: usize) -> f64 {
        self.diagonal.iter().map(|&p| self.second(k, p)).sum()
    }

    /// Full jet; only available when every second derivative is carried.
    pub fn eval_jet(&self) -> Option<EvalJet> {
        if self.order != DerivativeOrder::Hessian {
            return None;
        }
        let mut jet = EvalJet::zeros(self.outputs, self.dim);
        for k in 0..self.outputs {
            jet.value[k] = self.value(k);
            for j in 0..self.dim {
                jet.grad[k][j] = self.grad(k, j);
            }
            for (p, &(i, j)) in self.pairs.iter().enumerate() {
                let v = self.second(k, p);
                jet.hessian[k][i][j] = v;
                jet.hessian[k][j][i] = v;
            }
        }
        Some(jet)
    }

    pub fn clear_seed(&mut self) {
        self.seed.fill(0.0);
    }

    /// Adds `w` to the adjoint of output `k`.
    pub fn seed_value(&mut self, k: usize, w: f64) {
        self.seed[k] += w;
    }

    pub fn seed_grad(&mut self, k: usize, j: usize, w: f64) {
        self.seed[(1 + j) * self.outputs + k] += w;
    }

    /// Adds `w` to the adjoint of `∇²û_k`.
    pub fn seed_laplacian(&mut self, k: usize, w: f64) {
        let base = 1 + self.dim;
        for &p in &self.diagonal {
            self.seed[(base + p) * self.outputs + k] += w;
        }
    }

    /// Adds `w` to the adjoint of the symmetric pair `(i, j)`; the caller
    /// passes the combined weight of both `H_ij` and `H_ji`.
    pub fn seed_second(&mut self, k: usize, i: usize, j: usize, w: f64) {
        let key = (i.min(j), i.max(j));
        let p = self
            .pairs
            .iter()
            .position(|&q| q == key)
            .expect("second derivative not carried by this engine");
        self.seed[(1 + self.dim + p) * self.outputs + k] += w;
    }

    /// Accumulates `∂L/∂θ` into `grad` given the seeded output adjoints of
    /// the most recent [`JetEngine::forward`] call.
    pub fn backward(&mut self, theta: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params);
        let (d, ch) = (self.dim, self.channels);
        let [mut zbar, mut abar] = std::mem::take(&mut self.scratch);
        zbar[..self.seed.len()].copy_from_slice(&self.seed);

        for l in (0..self.shapes.len()).rev() {
            let layer = self.shapes[l];
            let (fi, fo) = (layer.fan_in, layer.fan_out);
            let a = &self.acts[l];
            {
                let (gw, gb) = grad[layer.weights..layer.biases + fo].split_at_mut(fi * fo);
                for o in 0..fo {
                    let row = &mut gw[o * fi..(o + 1) * fi];
                    for c in 0..ch {
                        let zb = zbar[c * fo + o];
                        if zb != 0.0 {
                            axpy(zb, &a[c * fi..(c + 1) * fi], row);
                        }
                    }
                    gb[o] += zbar[o];
                }
            }
            if l == 0 {
                break;
            }

            let w = &theta[layer.weights..layer.biases];
            abar[..ch * fi].fill(0.0);
            for c in 0..ch {
                let out = &mut abar[c * fi..(c + 1) * fi];
                for o in 0..fo {
                    let zb = zbar[c * fo + o];
                    if zb != 0.0 {
                        axpy(zb, &w[o * fi..(o + 1) * fi], out);
                    }
                }
            }

            // Through the sigmoid of hidden layer l - 1, whose width is fi.
            let n = fi;
            let z = &self.pre[l - 1];
            let sig = &self.sig[l - 1];
            for k in 0..n {
                let (s1, s2, s3) = (sig[k], sig[n + k], sig[2 * n + k]);
                let mut v = abar[k] * s1;
                if ch > 1 {
                    for j in 0..d {
                        let c = (1 + j) * n + k;
                        zbar[c] = abar[c] * s1;
                        v += s2 * abar[c] * z[c];
                    }
                    for (p, &(i, j)) in self.pairs.iter().enumerate() {
                        let c = (1 + d + p) * n + k;
                        let hs = abar[c];
                        let (ci, cj) = ((1 + i) * n + k, (1 + j) * n + k);
                        zbar[c] = hs * s1;
                        v += hs * (s3 * z[ci] * z[cj] + s2 * z[c]);
                        zbar[ci] += s2 * hs * z[cj];
                        zbar[cj] += s2 * hs * z[ci];
                    }
                }
                zbar[k] = v;
            }
        }
        self.scratch = [zbar, abar];
    }
}

/// Four independent partial sums so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Convenience wrapper: value, spatial gradient and Hessian of every output at `x`.
pub fn forward_jet(spec: &NetworkSpec, theta: &[f64], x: &[f64]) -> Result<EvalJet, NetError> {
    let mut engine = JetEngine::new(spec, DerivativeOrder::Hessian);
    engine.forward(theta, x)?;
    Ok(engine.eval_jet().expect("hessian order"))
}
