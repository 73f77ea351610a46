//! Minimal feed-forward networks with hand-written backward passes.
//!
//! Everything here is deterministic: weights are initialized from a caller
//! supplied seeded RNG and all computation is single-threaded f64, so a fixed
//! seed reproduces training bit-for-bit.

mod layers;

pub use layers::{Cache, Layer, LayerSpec};

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A sequential stack of layers.
pub struct Net {
    specs: Vec<LayerSpec>,
    layers: Vec<Box<dyn Layer>>,
}

/// Per-layer forward caches from one [`Net::forward`] call.
pub struct NetCache(Vec<Cache>);

/// Parameter gradients, outer index = layer, inner = that layer's params.
pub struct Grads(pub Vec<Vec<ArrayD<f64>>>);

impl Net {
    pub fn build(specs: Vec<LayerSpec>, rng: &mut ChaCha8Rng) -> Net {
        let layers = specs.iter().map(|s| s.instantiate(rng)).collect();
        Net { specs, layers }
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    /// Inference-only forward pass.
    pub fn infer(&self, x: &ArrayD<f64>) -> ArrayD<f64> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur);
        }
        cur
    }

    /// Forward pass retaining per-layer caches for a later backward pass.
    pub fn forward(&self, x: &ArrayD<f64>) -> (ArrayD<f64>, NetCache) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let out = layer.forward(&cur);
            caches.push(Cache {
                input: cur,
                output: out.clone(),
            });
            cur = out;
        }
        (cur, NetCache(caches))
    }

    /// Backpropagate `grad_out` through the cached forward pass. Returns the
    /// gradient with respect to the network input and all parameter gradients.
    pub fn backward(&self, cache: &NetCache, grad_out: &ArrayD<f64>) -> (ArrayD<f64>, Grads) {
        let mut grad = grad_out.clone();
        let mut per_layer = vec![Vec::new(); self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (gin, gparams) = layer.backward(&cache.0[i], &grad);
            per_layer[i] = gparams;
            grad = gin;
        }
        (grad, Grads(per_layer))
    }

    pub fn params(&self) -> Vec<&ArrayD<f64>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// All parameters flattened into one vector (layer order, row-major).
    pub fn param_vector(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for p in self.params() {
            out.extend(p.iter().copied());
        }
        out
    }

    pub fn set_param_vector(&mut self, flat: &[f64]) -> Result<()> {
        let needed = self.num_params();
        if flat.len() != needed {
            return Err(Error::BadCheckpoint(format!(
                "parameter vector length {} does not match network size {}",
                flat.len(),
                needed
            )));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            for v in p.iter_mut() {
                *v = flat[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> NetSnapshot {
        NetSnapshot {
            specs: self.specs.clone(),
            params: self.param_vector(),
        }
    }

    pub fn from_snapshot(snap: &NetSnapshot) -> Result<Net> {
        // seed is irrelevant, params are overwritten
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = Net::build(snap.specs.clone(), &mut rng);
        net.set_param_vector(&snap.params)?;
        Ok(net)
    }
}

impl Clone for Net {
    fn clone(&self) -> Net {
        Net::from_snapshot(&self.snapshot()).expect("snapshot round-trip")
    }
}

/// Serializable network state: architecture plus flattened parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetSnapshot {
    pub specs: Vec<LayerSpec>,
    pub params: Vec<f64>,
}

/// Adaptive-moment optimizer over a [`Net`]'s parameter list.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, net: &Net) -> Adam {
        let zeros: Vec<ArrayD<f64>> = net
            .params()
            .iter()
            .map(|p| ArrayD::zeros(p.raw_dim()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, net: &mut Net, grads: &Grads) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let flat: Vec<&ArrayD<f64>> = grads.0.iter().flatten().collect();
        for (i, p) in net.params_mut().into_iter().enumerate() {
            let g = flat[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((pv, gv), (mv, vv)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Standalone Adam state for a single tensor (used for cluster centroids,
/// which live outside any [`Net`]).
pub struct AdamTensor {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: ArrayD<f64>,
    v: ArrayD<f64>,
}

impl AdamTensor {
    pub fn new(lr: f64, shape: &[usize]) -> AdamTensor {
        AdamTensor {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: ArrayD::zeros(shape.to_vec()),
            v: ArrayD::zeros(shape.to_vec()),
        }
    }

    pub fn step(&mut self, param: &mut ArrayD<f64>, grad: &ArrayD<f64>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((pv, gv), (mv, vv)) in param
            .iter_mut()
            .zip(grad.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
            *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            *pv -= self.lr * (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn finite_diff_check(specs: Vec<LayerSpec>, input_shape: &[usize]) {
        let mut net = Net::build(specs, &mut rng());
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let x = ArrayD::from_shape_fn(IxDyn(input_shape), |_| {
            rand::Rng::gen_range(&mut r, -1.0..1.0)
        });
        // scalar objective: sum of squares of the output
        let loss = |net: &Net, x: &ArrayD<f64>| -> f64 { net.infer(x).iter().map(|v| v * v).sum() };

        let (out, cache) = net.forward(&x);
        let upstream = out.mapv(|v| 2.0 * v);
        let (gx, grads) = net.backward(&cache, &upstream);

        // input gradient
        let mut xp = x.clone();
        let h = 1e-5;
        for idx in 0..x.len() {
            let orig = xp.as_slice_mut().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + h;
            let lp = loss(&net, &xp);
            xp.as_slice_mut().unwrap()[idx] = orig - h;
            let lm = loss(&net, &xp);
            xp.as_slice_mut().unwrap()[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = gx.as_slice().unwrap()[idx];
            assert!(
                (fd - an).abs() <= 1e-5 * (1.0 + fd.abs().max(an.abs())),
                "input grad mismatch at {idx}: fd={fd} an={an}"
            );
        }

        // parameter gradients via the flattened vector
        let flat_grads: Vec<f64> = grads
            .0
            .iter()
            .flatten()
            .flat_map(|g| g.iter().copied())
            .collect();
        let mut theta = net.param_vector();
        for idx in 0..theta.len() {
            let orig = theta[idx];
            theta[idx] = orig + h;
            net.set_param_vector(&theta).unwrap();
            let lp = loss(&net, &x);
            theta[idx] = orig - h;
            net.set_param_vector(&theta).unwrap();
            let lm = loss(&net, &x);
            theta[idx] = orig;
            net.set_param_vector(&theta).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let an = flat_grads[idx];
            assert!(
                (fd - an).abs() <= 1e-5 * (1.0 + fd.abs().max(an.abs())),
                "param grad mismatch at {idx}: fd={fd} an={an}"
            );
        }
    }

    #[test]
    fn dense_stack_gradients_match_finite_differences() {
        finite_diff_check(
            vec![
                LayerSpec::Dense { inp: 6, out: 5 },
                LayerSpec::LeakyRelu { alpha: 0.1 },
                LayerSpec::Dense { inp: 5, out: 3 },
                LayerSpec::ScaledTanh { scale: 0.7 },
            ],
            &[4, 6],
        );
    }

    #[test]
    fn conv_stack_gradients_match_finite_differences() {
        finite_diff_check(
            vec![
                LayerSpec::Conv2d {
                    in_c: 2,
                    out_c: 3,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Conv2d {
                    in_c: 3,
                    out_c: 2,
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense { inp: 2 * 3 * 3, out: 4 },
                LayerSpec::Sigmoid,
            ],
            &[2, 2, 5, 5],
        );
    }

    #[test]
    fn reshape_round_trips_gradients() {
        finite_diff_check(
            vec![
                LayerSpec::Dense { inp: 4, out: 8 },
                LayerSpec::Reshape {
                    shape: vec![2, 2, 2],
                },
                LayerSpec::Conv2d {
                    in_c: 2,
                    out_c: 1,
                    kernel: 1,
                    stride: 1,
                    pad: 0,
                },
                LayerSpec::Flatten,
            ],
            &[3, 4],
        );
    }

    #[test]
    fn snapshot_round_trip_preserves_outputs() {
        let specs = vec![
            LayerSpec::Dense { inp: 4, out: 6 },
            LayerSpec::Relu,
            LayerSpec::Dense { inp: 6, out: 2 },
        ];
        let net = Net::build(specs, &mut rng());
        let restored = Net::from_snapshot(&net.snapshot()).unwrap();
        let x = ArrayD::from_shape_fn(IxDyn(&[3, 4]), |i| (i[0] * 4 + i[1]) as f64 * 0.1);
        assert_eq!(net.infer(&x), restored.infer(&x));
    }

    #[test]
    fn adam_reduces_quadratic_loss() {
        let specs = vec![LayerSpec::Dense { inp: 3, out: 1 }];
        let mut net = Net::build(specs, &mut rng());
        let mut opt = Adam::new(0.05, &net);
        let x = ArrayD::from_shape_fn(IxDyn(&[8, 3]), |i| ((i[0] + i[1]) % 5) as f64 * 0.2);
        let target = 1.5;
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..200 {
            let (out, cache) = net.forward(&x);
            let loss: f64 = out.iter().map(|v| (v - target) * (v - target)).sum();
            let upstream = out.mapv(|v| 2.0 * (v - target));
            let (_, grads) = net.backward(&cache, &upstream);
            opt.step(&mut net, &grads);
            first.get_or_insert(loss);
            last = loss;
        }
        assert!(last < first.unwrap() * 0.01, "loss {last} did not decrease");
    }
}
