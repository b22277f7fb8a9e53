//! Dense feed-forward networks with reverse-mode gradients.
//!
//! Networks operate on row-major batches (`batch x features`). Both parameter
//! gradients (for training) and input gradients (for guidance) come out of the
//! same cached forward pass, so a guide evaluation costs one forward and one
//! backward sweep regardless of the input dimension.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Silu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Identity => x,
        }
    }

    /// Derivative given the pre-activation `x` and post-activation `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer; `weight` is stored `inputs x outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }
}

/// Multi-layer perceptron: smooth activation on hidden layers, identity on the
/// output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpCheckpoint", into = "MlpCheckpoint")]
pub struct Mlp {
    layers: Vec<Dense>,
    activation: Activation,
}

/// Cached intermediate values of a batched forward pass.
pub struct Tape {
    /// `acts[0]` is the input, `acts[k + 1]` the output of layer `k`.
    acts: Vec<Array2<f64>>,
    pres: Vec<Array2<f64>>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("tape always holds the input")
    }
}

/// Parameter gradients, laid out like the network.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weight: Vec<Array2<f64>>,
    pub bias: Vec<Array1<f64>>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(layer_sizes.len() >= 2, "an MLP needs at least an input and an output size");
        assert!(layer_sizes.iter().all(|&n| n > 0), "layer sizes must be positive");
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit));
                Dense {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Mlp { layers, activation }
    }

    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Self {
        assert!(layer_sizes.len() >= 2, "an MLP needs at least an input and an output size");
        let layers = layer_sizes
            .windows(2)
            .map(|w| Dense {
                weight: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Mlp { layers, activation }
    }

    pub fn from_layers(layers: Vec<Dense>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Format("network has no layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Shape {
                    expected: pair[0].outputs(),
                    got: pair[1].inputs(),
                    context: "adjacent layer sizes",
                });
            }
        }
        for layer in &layers {
            if layer.bias.len() != layer.outputs() {
                return Err(Error::Shape {
                    expected: layer.outputs(),
                    got: layer.bias.len(),
                    context: "bias length",
                });
            }
        }
        Ok(Mlp { layers, activation })
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(Dense::outputs));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, got: usize) -> Result<()> {
        if got != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got,
                context: "network input",
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        let input = ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice");
        Ok(self.forward_batch(input)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight);
            z += &layer.bias;
            if k != last {
                let act = self.activation;
                z.mapv_inplace(|v| act.apply(v));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward_tape(&self, x: ArrayView2<'_, f64>) -> Result<Tape> {
        self.check_input(x.ncols())?;
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pres = Vec::with_capacity(self.layers.len());
        acts.push(x.to_owned());
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = acts[k].dot(&layer.weight);
            z += &layer.bias;
            let a = if k == last {
                z.clone()
            } else {
                let act = self.activation;
                z.mapv(|v| act.apply(v))
            };
            pres.push(z);
            acts.push(a);
        }
        Ok(Tape { acts, pres })
    }

    /// Back-propagates `d_out` through a recorded pass. Returns parameter
    /// gradients when `want_params` is set, and always the input gradient.
    fn backprop(&self, tape: &Tape, d_out: ArrayView2<'_, f64>, want_params: bool) -> (Option<Gradients>, Array2<f64>) {
        let last = self.layers.len() - 1;
        let mut delta = d_out.to_owned();
        let mut gw = Vec::new();
        let mut gb = Vec::new();
        for k in (0..self.layers.len()).rev() {
            if k != last {
                let act = self.activation;
                ndarray::Zip::from(&mut delta)
                    .and(&tape.pres[k])
                    .and(&tape.acts[k + 1])
                    .for_each(|d, &x, &y| *d *= act.derivative(x, y));
            }
            if want_params {
                gw.push(tape.acts[k].t().dot(&delta));
                gb.push(delta.sum_axis(Axis(0)));
            }
            delta = delta.dot(&self.layers[k].weight.t());
        }
        let grads = want_params.then(|| {
            gw.reverse();
            gb.reverse();
            Gradients { weight: gw, bias: gb }
        });
        (grads, delta)
    }

    pub fn backward(&self, tape: &Tape, d_out: ArrayView2<'_, f64>) -> (Gradients, Array2<f64>) {
        let (g, dx) = self.backprop(tape, d_out, true);
        (g.expect("requested"), dx)
    }

    /// Input gradient only, for a cotangent chosen after the forward pass.
    pub fn backward_input(&self, tape: &Tape, d_out: ArrayView2<'_, f64>) -> Array2<f64> {
        self.backprop(tape, d_out, false).1
    }

    /// `d(cotangent . f(x)) / dx` for a single input.
    pub fn grad_input(&self, x: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        if cotangent.len() != self.output_dim() {
            return Err(Error::Shape {
                expected: self.output_dim(),
                got: cotangent.len(),
                context: "cotangent",
            });
        }
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice");
        let cv = ArrayView2::from_shape((1, cotangent.len()), cotangent).expect("contiguous slice");
        let (_, dx) = self.grad_input_batch(xv, cv)?;
        Ok(dx.into_raw_vec_and_offset().0)
    }

    /// Batched outputs and input gradients, one cotangent row per input row.
    pub fn grad_input_batch(
        &self,
        x: ArrayView2<'_, f64>,
        cotangent: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let tape = self.forward_tape(x)?;
        if cotangent.dim() != tape.output().dim() {
            return Err(Error::Shape {
                expected: self.output_dim(),
                got: cotangent.ncols(),
                context: "cotangent",
            });
        }
        let (_, dx) = self.backprop(&tape, cotangent, false);
        let out = tape.acts.into_iter().last().expect("nonempty");
        Ok((out, dx))
    }

    /// One optimizer step on a squared-error loss. Returns the loss measured
    /// before the update.
    pub fn train_step(
        &mut self,
        opt: &mut OptimizerState,
        inputs: ArrayView2<'_, f64>,
        targets: ArrayView2<'_, f64>,
    ) -> Result<f64> {
        if inputs.nrows() == 0 {
            return Err(Error::EmptyInput("training batch"));
        }
        if targets.dim() != (inputs.nrows(), self.output_dim()) {
            return Err(Error::Shape {
                expected: self.output_dim(),
                got: targets.ncols(),
                context: "training targets",
            });
        }
        let tape = self.forward_tape(inputs)?;
        let diff = tape.output() - &targets;
        let count = diff.len() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;
        if !loss.is_finite() {
            return Err(Error::TrainingDivergence {
                step: opt.step as usize,
                loss,
            });
        }
        let d_out = diff * (2.0 / count);
        let (grads, _) = self.backward(&tape, d_out.view());
        self.apply_gradients(opt, &grads)?;
        Ok(loss)
    }

    /// Adam update from precomputed gradients.
    pub fn apply_gradients(&mut self, opt: &mut OptimizerState, grads: &Gradients) -> Result<()> {
        if opt.m.len() != self.num_params() {
            return Err(Error::Shape {
                expected: self.num_params(),
                got: opt.m.len(),
                context: "optimizer state",
            });
        }
        opt.step += 1;
        let t = opt.step as i32;
        let bc1 = 1.0 - opt.beta1.powi(t);
        let bc2 = 1.0 - opt.beta2.powi(t);
        let mut offset = 0;
        for (k, layer) in self.layers.iter_mut().enumerate() {
            let params = layer
                .weight
                .as_slice_mut()
                .expect("weights are standard layout")
                .iter_mut()
                .chain(layer.bias.as_slice_mut().expect("standard layout").iter_mut());
            let g = grads.weight[k].iter().chain(grads.bias[k].iter());
            for (p, &gi) in params.zip(g) {
                let m = &mut opt.m[offset];
                let v = &mut opt.v[offset];
                *m = opt.beta1 * *m + (1.0 - opt.beta1) * gi;
                *v = opt.beta2 * *v + (1.0 - opt.beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
                offset += 1;
            }
        }
        if !self.params_finite() {
            return Err(Error::TrainingDivergence {
                step: opt.step as usize,
                loss: f64::NAN,
            });
        }
        Ok(())
    }

    pub fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn to_checkpoint(&self) -> MlpCheckpoint {
        MlpCheckpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            layer_sizes: self.layer_sizes(),
            activation: self.activation,
            params: self.flat_params(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: MlpCheckpoint = serde_json::from_str(&text)?;
        Mlp::try_from(ckpt)
    }
}

/// Adam moment accumulators over the flattened parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn adam(net: &Mlp, lr: f64) -> Self {
        OptimizerState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; net.num_params()],
            v: vec![0.0; net.num_params()],
        }
    }

    pub fn num_params(&self) -> usize {
        self.m.len()
    }
}

/// On-disk network representation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub format_version: u32,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
}

impl From<Mlp> for MlpCheckpoint {
    fn from(net: Mlp) -> Self {
        net.to_checkpoint()
    }
}

impl TryFrom<MlpCheckpoint> for Mlp {
    type Error = Error;

    fn try_from(ckpt: MlpCheckpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported network checkpoint version {} (expected {})",
                ckpt.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        if ckpt.layer_sizes.len() < 2 || ckpt.layer_sizes.contains(&0) {
            return Err(Error::Format(format!("bad layer sizes {:?}", ckpt.layer_sizes)));
        }
        let expected: usize = ckpt.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if expected != ckpt.params.len() {
            return Err(Error::Shape {
                expected,
                got: ckpt.params.len(),
                context: "checkpoint parameter count",
            });
        }
        let mut offset = 0;
        let mut layers = Vec::new();
        for w in ckpt.layer_sizes.windows(2) {
            let n = w[0] * w[1];
            let weight = Array2::from_shape_vec((w[0], w[1]), ckpt.params[offset..offset + n].to_vec())
                .expect("length checked");
            offset += n;
            let bias = Array1::from(ckpt.params[offset..offset + w[1]].to_vec());
            offset += w[1];
            layers.push(Dense { weight, bias });
        }
        Mlp::from_layers(layers, ckpt.activation)
    }
}

/// Mean squared error between two equally shaped views.
pub fn mse(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let n = a.len() as f64;
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent scalar forward pass used as an oracle.
    fn naive_forward(net: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let n = net.layers().len();
        for (k, layer) in net.layers().iter().enumerate() {
            let mut out = vec![0.0; layer.outputs()];
            for j in 0..layer.outputs() {
                let mut acc = layer.bias[j];
                for i in 0..layer.inputs() {
                    acc += h[i] * layer.weight[[i, j]];
                }
                out[j] = if k + 1 == n {
                    acc
                } else {
                    match net.activation() {
                        Activation::Tanh => acc.tanh(),
                        Activation::Silu => acc / (1.0 + (-acc).exp()),
                        Activation::Identity => acc,
                    }
                };
            }
            h = out;
        }
        h
    }

    fn finite_difference(net: &Mlp, x: &[f64], cot: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                let fp: f64 = net.forward(&xp).unwrap().iter().zip(cot).map(|(a, b)| a * b).sum();
                let fm: f64 = net.forward(&xm).unwrap().iter().zip(cot).map(|(a, b)| a * b).sum();
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 5, 2], Activation::Tanh);
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        let layer = Dense {
            weight: Array2::eye(2),
            bias: Array1::zeros(2),
        };
        let net = Mlp::from_layers(vec![layer], Activation::Tanh).unwrap();
        assert_eq!(net.forward(&[2.0, 3.0]).unwrap(), vec![2.0, 3.0]);
    }

    #[test]
    fn forward_matches_hand_rolled_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = Mlp::new(&[2, 4, 1], Activation::Tanh, &mut rng);
        let x = [0.5, -0.5];
        let got = net.forward(&x).unwrap();
        let want = naive_forward(&net, &x);
        assert!((got[0] - want[0]).abs() < 1e-12);
    }

    #[test]
    fn input_shape_error() {
        let net = Mlp::zeros(&[3, 2], Activation::Tanh);
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape { .. })));
        assert!(matches!(net.grad_input(&[1.0, 2.0, 3.0], &[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn linear_gradient_is_weight_row() {
        // y = W x with W = [[1,2,3],[4,5,6]]; stored transposed.
        let w = Array2::from_shape_vec((3, 2), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]).unwrap();
        let net = Mlp::from_layers(
            vec![Dense {
                weight: w,
                bias: Array1::zeros(2),
            }],
            Activation::Tanh,
        )
        .unwrap();
        assert_eq!(net.grad_input(&[0.3, 0.1, -2.0], &[0.0, 1.0]).unwrap(), vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn constant_network_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::new(&[3, 6, 1], Activation::Tanh, &mut rng);
        net.layers_mut()[1].weight.fill(0.0);
        net.layers_mut()[1].bias.fill(0.7);
        let g = net.grad_input(&[0.1, 0.2, 0.3], &[1.0]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..100 {
            let act = if trial % 2 == 0 { Activation::Tanh } else { Activation::Silu };
            let n_in = rng.random_range(1..6);
            let hidden = rng.random_range(2..10);
            let n_out = rng.random_range(1..4);
            let net = Mlp::new(&[n_in, hidden, hidden, n_out], act, &mut rng);
            let x: Vec<f64> = (0..n_in).map(|_| rng.random_range(-2.0..2.0)).collect();
            let cot: Vec<f64> = (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = net.grad_input(&x, &cot).unwrap();
            let fd = finite_difference(&net, &x, &cot, 1e-4);
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-4 * (1.0 + a.abs()), "trial {trial}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[3, 5, 2], Activation::Silu, &mut rng);
        let x = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let t = Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0));
        let loss = |n: &Mlp| mse(n.forward_batch(x.view()).unwrap().view(), t.view());
        let tape = net.forward_tape(x.view()).unwrap();
        let d_out = (tape.output() - &t) * (2.0 / 8.0);
        let (grads, _) = net.backward(&tape, d_out.view());
        let h = 1e-5;
        for (k, (i, j)) in [(0, (1, 2)), (1, (4, 0)), (0, (0, 0))] {
            let mut p = net.clone();
            p.layers_mut()[k].weight[[i, j]] += h;
            let mut m = net.clone();
            m.layers_mut()[k].weight[[i, j]] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - grads.weight[k][[i, j]]).abs() < 1e-7);
        }
    }

    #[test]
    fn constant_target_loss_decreases() {
        let mut net = Mlp::zeros(&[1, 1], Activation::Tanh);
        let mut opt = OptimizerState::adam(&net, 1e-2);
        let x = Array2::from_elem((1, 1), 1.0);
        let t = Array2::from_elem((1, 1), 3.0);
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let loss = net.train_step(&mut opt, x.view(), t.view()).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Mlp::new(&[2, 3, 1], Activation::Tanh, &mut rng);
        let before = net.flat_params();
        let mut opt = OptimizerState::adam(&net, 0.0);
        let x = Array2::from_elem((2, 2), 0.5);
        let t = Array2::from_elem((2, 1), 1.0);
        net.train_step(&mut opt, x.view(), t.view()).unwrap();
        assert_eq!(net.flat_params(), before);
    }

    #[test]
    fn divergence_is_reported() {
        let mut net = Mlp::zeros(&[1, 1], Activation::Tanh);
        let mut opt = OptimizerState::adam(&net, 1e-3);
        let x = Array2::from_elem((1, 1), 1.0);
        let t = Array2::from_elem((1, 1), f64::NAN);
        assert!(matches!(
            net.train_step(&mut opt, x.view(), t.view()),
            Err(Error::TrainingDivergence { .. })
        ));
    }

    #[test]
    fn fits_sine_regression() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut net = Mlp::new(&[1, 32, 32, 1], Activation::Tanh, &mut rng);
        let mut opt = OptimizerState::adam(&net, 1e-2);
        let xs = Array2::from_shape_fn((256, 1), |(i, _)| -3.0 + 6.0 * i as f64 / 255.0);
        let ys = xs.mapv(f64::sin);
        let mut loss = f64::INFINITY;
        for _ in 0..5000 {
            loss = net.train_step(&mut opt, xs.view(), ys.view()).unwrap();
            if loss < 1e-3 {
                break;
            }
        }
        assert!(loss < 1e-2, "final loss {loss}");
        let fitted = mse(net.forward_batch(xs.view()).unwrap().view(), ys.view());
        assert!(fitted < 1e-2);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut net = Mlp::new(&[2, 8, 1], Activation::Silu, &mut rng);
            let mut opt = OptimizerState::adam(&net, 1e-3);
            let x = Array2::from_shape_fn((16, 2), |_| rng.random_range(-1.0..1.0));
            let t = x.sum_axis(Axis(1)).insert_axis(Axis(1));
            for _ in 0..50 {
                net.train_step(&mut opt, x.view(), t.view()).unwrap();
            }
            net.flat_params()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[4, 3, 2], Activation::Silu, &mut rng);
        let text = serde_json::to_string(&net).unwrap();
        let back: Mlp = serde_json::from_str(&text).unwrap();
        assert_eq!(net, back);

        let mut bad = net.to_checkpoint();
        bad.format_version = 99;
        assert!(Mlp::try_from(bad).is_err());
    }
}
