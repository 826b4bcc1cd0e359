//! Jets for a batch of points at once.
//!
//! Same propagation rules as [`JetEngine`](super::JetEngine), but every
//! buffer is laid out `[channel][unit][point]` so the inner loops run over
//! points.

use super::{check_len, DerivativeOrder, LayerShape, NetError, NetworkSpec};

#[derive(Debug, Clone)]
pub struct BatchJetEngine {
    shapes: Vec<LayerShape>,
    params: usize,
    dim: usize,
    outputs: usize,
    pairs: Vec<(usize, usize)>,
    diagonal: Vec<usize>,
    channels: usize,
    /// Point stride of every buffer.
    cap: usize,
    /// Points in the current batch.
    n: usize,
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    sig: Vec<Vec<f64>>,
    out: Vec<f64>,
    seed: Vec<f64>,
    scratch: [Vec<f64>; 2],
    /// Transposed weights of one layer.
    wt: Vec<f64>,
}

impl BatchJetEngine {
    pub fn new(spec: &NetworkSpec, order: DerivativeOrder, capacity: usize) -> Self {
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
        let cap = capacity.max(1);
        let shapes = spec.layer_shapes();
        let acts = shapes
            .iter()
            .map(|l| vec![0.0; channels * l.fan_in * cap])
            .collect();
        let hidden = &shapes[..shapes.len() - 1];
        let pre = hidden
            .iter()
            .map(|l| vec![0.0; channels * l.fan_out * cap])
            .collect();
        let sig = hidden.iter().map(|l| vec![0.0; 3 * l.fan_out * cap]).collect();
        let width = spec.max_width().max(spec.output_dim);
        let shapes_max_weights = shapes.iter().map(|l| l.fan_in * l.fan_out).max().unwrap_or(0);
        Self {
            params: spec.param_count(),
            shapes,
            dim,
            outputs: spec.output_dim,
            pairs,
            diagonal,
            channels,
            cap,
            n: 0,
            acts,
            pre,
            sig,
            out: vec![0.0; channels * spec.output_dim * cap],
            seed: vec![0.0; channels * spec.output_dim * cap],
            scratch: [
                vec![0.0; channels * width * cap],
                vec![0.0; channels * width * cap],
            ],
            wt: vec![0.0; shapes_max_weights],
        }
    }

    pub fn capacity(&self) -> usize {
        self.cap
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Evaluates the jets at up to `capacity` points.
    pub fn forward<P: AsRef<[f64]>>(&mut self, theta: &[f64], points: &[P]) -> Result<(), NetError> {
        check_len("parameter vector", self.params, theta.len())?;
        if points.len() > self.cap {
            return Err(NetError::DimensionMismatch {
                what: "batch size",
                expected: self.cap,
                got: points.len(),
            });
        }
        let (d, ch, cap) = (self.dim, self.channels, self.cap);
        let n = points.len();
        self.n = n;

        let input = &mut self.acts[0];
        input.fill(0.0);
        for (p, x) in points.iter().enumerate() {
            let x = x.as_ref();
            check_len("input point", d, x.len())?;
            for (i, xi) in x.iter().enumerate() {
                input[i * cap + p] = *xi;
            }
        }
        if ch > 1 {
            for j in 0..d {
                input[((1 + j) * d + j) * cap..][..n].fill(1.0);
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
                let init = if c == 0 { Some(b) } else { None };
                mat_batch(
                    &mut z[c * fo * cap..(c + 1) * fo * cap],
                    w,
                    fo,
                    fi,
                    &a[c * fi * cap..(c + 1) * fi * cap],
                    init,
                    cap,
                    n,
                );
            }
            if l < last {
                self.activate(l);
            }
        }
        Ok(())
    }

    fn activate(&mut self, l: usize) {
        let units = self.shapes[l].fan_out;
        let (d, cap, n) = (self.dim, self.cap, self.n);
        let z = &self.pre[l];
        let sig = &mut self.sig[l];
        let h = &mut self.acts[l + 1];
        for k in 0..units {
            let zk = &z[k * cap..][..n];
            let (s1v, rest) = sig[k * cap..].split_at_mut(units * cap);
            let (s2v, s3v) = rest.split_at_mut(units * cap);
            let hk = &mut h[k * cap..][..n];
            for p in 0..n {
                let s = 1.0 / (1.0 + (-zk[p]).exp());
                let s1 = s * (1.0 - s);
                s1v[p] = s1;
                s2v[p] = s1 * (1.0 - 2.0 * s);
                s3v[p] = s1 * (1.0 - 6.0 * s1);
                hk[p] = s;
            }
        }
        if self.channels == 1 {
            return;
        }
        let at = |c: usize, k: usize| (c * units + k) * cap;
        for k in 0..units {
            let s1 = &sig[k * cap..][..n];
            let s2 = &sig[(units + k) * cap..][..n];
            for j in 0..d {
                let zj = &z[at(1 + j, k)..][..n];
                let hj = &mut h[at(1 + j, k)..][..n];
                for p in 0..n {
                    hj[p] = s1[p] * zj[p];
                }
            }
            for (q, &(i, j)) in self.pairs.iter().enumerate() {
                let zi = &z[at(1 + i, k)..][..n];
                let zj = &z[at(1 + j, k)..][..n];
                let zq = &z[at(1 + d + q, k)..][..n];
                let hq = &mut h[at(1 + d + q, k)..][..n];
                for p in 0..n {
                    hq[p] = s2[p] * zi[p] * zj[p] + s1[p] * zq[p];
                }
            }
        }
    }

    fn out_index(&self, c: usize, k: usize, p: usize) -> usize {
        debug_assert!(p < self.n);
        (c * self.outputs + k) * self.cap + p
    }

    pub fn value(&self, k: usize, p: usize) -> f64 {
        self.out[self.out_index(0, k, p)]
    }

    pub fn grad(&self, k: usize, j: usize, p: usize) -> f64 {
        self.out[self.out_index(1 + j, k, p)]
    }

    pub fn laplacian(&self, k: usize, p: usize) -> f64 {
        self.diagonal
            .iter()
            .map(|&q| self.out[self.out_index(1 + self.dim + q, k, p)])
            .sum()
    }

    pub fn clear_seed(&mut self) {
        self.seed.fill(0.0);
    }

    pub fn seed_value(&mut self, k: usize, p: usize, w: f64) {
        let i = self.out_index(0, k, p);
        self.seed[i] += w;
    }

    pub fn seed_grad(&mut self, k: usize, j: usize, p: usize, w: f64) {
        let i = self.out_index(1 + j, k, p);
        self.seed[i] += w;
    }

    pub fn seed_laplacian(&mut self, k: usize, p: usize, w: f64) {
        for q in 0..self.diagonal.len() {
            let i = self.out_index(1 + self.dim + self.diagonal[q], k, p);
            self.seed[i] += w;
        }
    }

    /// Accumulates `∂L/∂θ` into `grad`, summed over the batch.
    pub fn backward(&mut self, theta: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params);
        let (d, ch, cap, n) = (self.dim, self.channels, self.cap, self.n);
        let [mut zbar, mut abar] = std::mem::take(&mut self.scratch);
        zbar[..self.seed.len()].copy_from_slice(&self.seed);

        for l in (0..self.shapes.len()).rev() {
            let layer = self.shapes[l];
            let (fi, fo) = (layer.fan_in, layer.fan_out);
            let a = &self.acts[l];
            {
                let (gw, gb) = grad[layer.weights..layer.biases + fo].split_at_mut(fi * fo);
                for o in 0..fo {
                    for i in 0..fi {
                        let mut s = 0.0;
                        for c in 0..ch {
                            s += dot(&zbar[(c * fo + o) * cap..][..n], &a[(c * fi + i) * cap..][..n]);
                        }
                        gw[o * fi + i] += s;
                    }
                    gb[o] += zbar[o * cap..][..n].iter().sum::<f64>();
                }
            }
            if l == 0 {
                break;
            }

            let w = &theta[layer.weights..layer.biases];
            let wt = &mut self.wt[..fi * fo];
            for o in 0..fo {
                for i in 0..fi {
                    wt[i * fo + o] = w[o * fi + i];
                }
            }
            for c in 0..ch {
                mat_batch(
                    &mut abar[c * fi * cap..(c + 1) * fi * cap],
                    wt,
                    fi,
                    fo,
                    &zbar[c * fo * cap..(c + 1) * fo * cap],
                    None,
                    cap,
                    n,
                );
            }

            // Through the sigmoid of hidden layer l - 1, whose width is fi.
            let units = fi;
            let z = &self.pre[l - 1];
            let sig = &self.sig[l - 1];
            let at = |c: usize, k: usize| (c * units + k) * cap;
            for k in 0..units {
                let s1 = &sig[k * cap..][..n];
                let s2 = &sig[(units + k) * cap..][..n];
                let s3 = &sig[(2 * units + k) * cap..][..n];
                {
                    let a0 = &abar[at(0, k)..][..n];
                    let z0 = &mut zbar[at(0, k)..][..n];
                    for p in 0..n {
                        z0[p] = a0[p] * s1[p];
                    }
                }
                if ch == 1 {
                    continue;
                }
                for j in 0..d {
                    let aj = &abar[at(1 + j, k)..][..n];
                    let zj = &z[at(1 + j, k)..][..n];
                    let (head, tail) = zbar.split_at_mut(at(1 + j, k));
                    let z0 = &mut head[at(0, k)..][..n];
                    let zbj = &mut tail[..n];
                    for p in 0..n {
                        zbj[p] = aj[p] * s1[p];
                        z0[p] += s2[p] * aj[p] * zj[p];
                    }
                }
                for (q, &(i, j)) in self.pairs.iter().enumerate() {
                    let hs = &abar[at(1 + d + q, k)..][..n];
                    let zi = &z[at(1 + i, k)..][..n];
                    let zj = &z[at(1 + j, k)..][..n];
                    let zq = &z[at(1 + d + q, k)..][..n];
                    for p in 0..n {
                        zbar[at(1 + d + q, k) + p] = hs[p] * s1[p];
                        zbar[at(0, k) + p] += hs[p] * (s3[p] * zi[p] * zj[p] + s2[p] * zq[p]);
                        zbar[at(1 + i, k) + p] += s2[p] * hs[p] * zj[p];
                        zbar[at(1 + j, k) + p] += s2[p] * hs[p] * zi[p];
                    }
                }
            }
        }
        self.scratch = [zbar, abar];
    }
}

/// `out[r][p] = init[r] + Σ_j coef[r][j] · input[j][p]` for `p < n`, rows
/// strided by `cap`. Accumulates in `j` order, eight points at a time.
#[allow(clippy::too_many_arguments)]
fn mat_batch(
    out: &mut [f64],
    coef: &[f64],
    rows: usize,
    inner: usize,
    input: &[f64],
    init: Option<&[f64]>,
    cap: usize,
    n: usize,
) {
    const B: usize = 8;
    for r in 0..rows {
        let row = &coef[r * inner..(r + 1) * inner];
        let start = init.map_or(0.0, |b| b[r]);
        let dst = &mut out[r * cap..r * cap + n];
        let mut p = 0;
        while p + B <= n {
            let mut acc = [start; B];
            for (j, &wj) in row.iter().enumerate() {
                let src = &input[j * cap + p..j * cap + p + B];
                for l in 0..B {
                    acc[l] += wj * src[l];
                }
            }
            dst[p..p + B].copy_from_slice(&acc);
            p += B;
        }
        for q in p..n {
            let mut acc = start;
            for (j, &wj) in row.iter().enumerate() {
                acc += wj * input[j * cap + q];
            }
            dst[q] = acc;
        }
    }
}

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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::{init_xavier, JetEngine};
    use crate::rng::Stream;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn matches_pointwise_engine() {
        let spec = NetworkSpec::uniform(2, 2, 7, 2);
        let theta = init_xavier(&spec, 5).0;
        let mut rng = Stream::new(9);
        let points: Vec<Vec<f64>> = (0..37)
            .map(|_| vec![rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)])
            .collect();
        for order in [
            DerivativeOrder::Value,
            DerivativeOrder::Gradient,
            DerivativeOrder::Laplacian,
            DerivativeOrder::Hessian,
        ] {
            let mut batch = BatchJetEngine::new(&spec, order, 64);
            let mut single = JetEngine::new(&spec, order);
            batch.forward(&theta, &points).unwrap();
            batch.clear_seed();
            let mut expected = vec![0.0; theta.len()];
            for (p, x) in points.iter().enumerate() {
                single.forward(&theta, x).unwrap();
                single.clear_seed();
                for k in 0..2 {
                    assert!(close(batch.value(k, p), single.value(k)));
                    let wv = 0.3 + p as f64 * 0.01 - k as f64;
                    batch.seed_value(k, p, wv);
                    single.seed_value(k, wv);
                    if order != DerivativeOrder::Value {
                        for j in 0..2 {
                            assert!(close(batch.grad(k, j, p), single.grad(k, j)));
                            let wg = 0.1 * (j as f64 + 1.0) - 0.02 * p as f64;
                            batch.seed_grad(k, j, p, wg);
                            single.seed_grad(k, j, wg);
                        }
                    }
                    if matches!(order, DerivativeOrder::Laplacian | DerivativeOrder::Hessian) {
                        assert!(close(batch.laplacian(k, p), single.laplacian(k)));
                        let wl = -0.5 + 0.03 * p as f64;
                        batch.seed_laplacian(k, p, wl);
                        single.seed_laplacian(k, wl);
                    }
                }
                single.backward(&theta, &mut expected);
            }
            let mut got = vec![0.0; theta.len()];
            batch.backward(&theta, &mut got);
            for (g, e) in got.iter().zip(&expected) {
                assert!((g - e).abs() <= 1e-11 * (1.0 + e.abs()), "{order:?}: {g} vs {e}");
            }
        }
    }

    #[test]
    fn oversized_batch_rejected() {
        let spec = NetworkSpec::uniform(2, 1, 3, 1);
        let theta = init_xavier(&spec, 1).0;
        let mut e = BatchJetEngine::new(&spec, DerivativeOrder::Value, 2);
        let pts = vec![vec![0.0, 0.0]; 3];
        assert!(e.forward(&theta, &pts).is_err());
    }
}
