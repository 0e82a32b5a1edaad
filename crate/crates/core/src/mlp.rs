//! Multilayer perceptron with explicit forward traces and per-layer gradients.
//!
//! The network is a plain fully-connected stack: `z_l = W_l h_{l-1} + b_l`,
//! hidden activations ReLU or Tanh, identity transform at the output layer
//! (softmax is applied by the cross-entropy head). Everything downstream of
//! this module consumes the [`ForwardTrace`] (per-layer activations, loss)
//! and [`LayerGradients`] (gradients with respect to every hidden layer plus
//! the flattened parameter gradient), so both are first-class values here
//! rather than internals.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default floor applied to predicted variances in the Gaussian NLL head.
pub const VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// max(0, z) on hidden layers.
    Relu,
    /// tanh(z) on hidden layers; smooth, so preferred for gradient checks.
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation value itself:
    /// ReLU' = [h > 0], tanh' = 1 - h^2.
    fn derivative_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - h * h,
        }
    }
}

/// Output-layer convention. Softmax marks a classifier; Linear leaves raw
/// outputs for the regression losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Linear,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Softmax cross-entropy over class logits.
    CrossEntropy,
    /// 0.5 * ||y_hat - y||^2.
    MeanSquaredError,
    /// Heteroscedastic Gaussian negative log-likelihood. The network emits
    /// `2t` outputs: `t` means followed by `t` log-variances. Variances are
    /// floored at `var_floor`; the additive constant is dropped, so this
    /// loss can be negative.
    GaussianNll { var_floor: f64 },
}

impl LossKind {
    pub fn gaussian_nll() -> Self {
        LossKind::GaussianNll { var_floor: VAR_FLOOR }
    }
}

/// Supervision target for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Class index for cross-entropy.
    Class(usize),
    /// Regression target vector for MSE / Gaussian NLL.
    Values(Vec<f64>),
}

/// Everything the forward pass produced for one sample: per-layer
/// activations (`activations[0]` is the input, `activations[L]` the raw
/// output), the output distribution or prediction, the scalar loss, and the
/// model version the pass ran under.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub activations: Vec<Vec<f64>>,
    /// Softmax probabilities for classifiers, raw predictions otherwise.
    pub output_probs: Vec<f64>,
    pub loss: f64,
    pub model_version: u64,
}

/// Backward-pass output: `hidden_grads[l]` is dloss/dh_l for layers
/// 0..L-1 (the input counts as layer 0; the output layer is omitted), and
/// `param_grad_flat` concatenates, per weight layer, the row-major weight
/// gradient followed by the bias gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub hidden_grads: Vec<Vec<f64>>,
    pub param_grad_flat: Vec<f64>,
    pub model_version: u64,
}

/// Forward trace and gradients for one sample, produced together.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    pub trace: ForwardTrace,
    pub grads: LayerGradients,
}

#[derive(Debug, Clone)]
pub struct MlpModel {
    dims: Vec<usize>,
    /// weights[w] is row-major with dims[w+1] rows and dims[w] columns.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    hidden_activation: Activation,
    output: OutputKind,
    version: u64,
}

impl MlpModel {
    /// Builds a model with He-style uniform init, `W ~ U(+-sqrt(6/fan_in))`,
    /// biases zero. `dims` lists layer widths from input to output and must
    /// contain at least two entries.
    pub fn new(
        dims: &[usize],
        hidden_activation: Activation,
        output: OutputKind,
        seed: u64,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!(
                "need input and output dims, got {} entries",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("zero-width layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(dims.len() - 1);
        let mut biases = Vec::with_capacity(dims.len() - 1);
        for w in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[w], dims[w + 1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let layer: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            weights.push(layer);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(MlpModel {
            dims: dims.to_vec(),
            weights,
            biases,
            hidden_activation,
            output,
            version: 0,
        })
    }

    /// Number of weight layers L.
    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn output_kind(&self) -> OutputKind {
        self.output
    }

    /// Row-major weight matrix of layer `w` (0-based weight-layer index).
    pub fn layer_weights(&self, w: usize) -> &[f64] {
        &self.weights[w]
    }

    pub fn layer_biases(&self, w: usize) -> &[f64] {
        &self.biases[w]
    }

    /// Total parameter count, which is also the length of
    /// `param_grad_flat`.
    pub fn param_count(&self) -> usize {
        (0..self.num_layers())
            .map(|w| self.dims[w] * self.dims[w + 1] + self.dims[w + 1])
            .sum()
    }

    /// Overwrites one layer's parameters (used by tests and notebooks to
    /// pin exact weights). Bumps the model version.
    pub fn set_layer(&mut self, w: usize, weights: &[f64], biases: &[f64]) -> Result<()> {
        let (rows, cols) = (self.dims[w + 1], self.dims[w]);
        if weights.len() != rows * cols {
            return Err(Error::Shape(format!(
                "layer {w} weights: expected {}x{} = {}, got {}",
                rows,
                cols,
                rows * cols,
                weights.len()
            )));
        }
        if biases.len() != rows {
            return Err(Error::Shape(format!(
                "layer {w} biases: expected {rows}, got {}",
                biases.len()
            )));
        }
        self.weights[w].copy_from_slice(weights);
        self.biases[w].copy_from_slice(biases);
        self.version += 1;
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dims[0] {
            return Err(Error::Shape(format!(
                "input dim {} != expected {}",
                x.len(),
                self.dims[0]
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite feature".into()));
        }
        Ok(())
    }

    /// Runs the linear/activation stack, returning all activations
    /// including the input (index 0) and the raw output (index L).
    fn forward_features(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let layers = self.num_layers();
        let mut activations = Vec::with_capacity(layers + 1);
        activations.push(x.to_vec());
        for w in 0..layers {
            let (rows, cols) = (self.dims[w + 1], self.dims[w]);
            let prev = &activations[w];
            let mut next = vec![0.0; rows];
            for i in 0..rows {
                let mut z = self.biases[w][i];
                let row = &self.weights[w][i * cols..(i + 1) * cols];
                for j in 0..cols {
                    z += row[j] * prev[j];
                }
                next[i] = if w + 1 == layers {
                    z // identity at the output layer
                } else {
                    self.hidden_activation.apply(z)
                };
            }
            activations.push(next);
        }
        Ok(activations)
    }

    fn check_loss_head(&self, loss: &LossKind) -> Result<()> {
        let ok = match loss {
            LossKind::CrossEntropy => self.output == OutputKind::Softmax,
            LossKind::MeanSquaredError | LossKind::GaussianNll { .. } => {
                self.output == OutputKind::Linear
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::UnsupportedLoss(format!(
                "{loss:?} incompatible with {:?} output",
                self.output
            )))
        }
    }

    /// Forward pass with loss. Returns the full trace; the model is not
    /// mutated.
    pub fn forward(&self, x: &[f64], y: &Target, loss: &LossKind) -> Result<ForwardTrace> {
        self.check_loss_head(loss)?;
        let activations = self.forward_features(x)?;
        let out = activations.last().unwrap();
        let (output_probs, loss_value) = match loss {
            LossKind::CrossEntropy => {
                let class = match y {
                    Target::Class(c) => *c,
                    Target::Values(_) => {
                        return Err(Error::Input("cross-entropy needs a class target".into()))
                    }
                };
                if class >= out.len() {
                    return Err(Error::Input(format!(
                        "class {class} out of range for {} outputs",
                        out.len()
                    )));
                }
                let probs = softmax(out);
                let l = -probs[class].clamp(PROB_FLOOR, 1.0).ln();
                (probs, l)
            }
            LossKind::MeanSquaredError => {
                let target = values_target(y, out.len())?;
                let l = 0.5
                    * out
                        .iter()
                        .zip(target)
                        .map(|(p, t)| (p - t) * (p - t))
                        .sum::<f64>();
                (out.clone(), l)
            }
            LossKind::GaussianNll { var_floor } => {
                if out.len() % 2 != 0 {
                    return Err(Error::Shape(format!(
                        "gaussian nll needs an even output width, got {}",
                        out.len()
                    )));
                }
                let t = out.len() / 2;
                let target = values_target(y, t)?;
                let mut l = 0.0;
                for j in 0..t {
                    let var = out[t + j].exp().max(*var_floor);
                    let resid = target[j] - out[j];
                    l += 0.5 * (resid * resid / var + var.ln());
                }
                (out.clone(), l)
            }
        };
        if !loss_value.is_finite() {
            return Err(Error::Numerics("non-finite loss".into()));
        }
        Ok(ForwardTrace {
            activations,
            output_probs,
            loss: loss_value,
            model_version: self.version,
        })
    }

    /// Class probabilities for a classifier model.
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.output != OutputKind::Softmax {
            return Err(Error::UnsupportedLoss(
                "predict_proba requires a softmax output".into(),
            ));
        }
        let activations = self.forward_features(x)?;
        Ok(softmax(activations.last().unwrap()))
    }

    /// Shannon entropy of the predictive class distribution (nats).
    pub fn predict_entropy(&self, x: &[f64]) -> Result<f64> {
        Ok(shannon_entropy(&self.predict_proba(x)?))
    }

    /// Backpropagates through a trace produced by this model at its current
    /// version. Traces from older versions are rejected rather than
    /// silently producing wrong gradients.
    pub fn backward(&self, trace: &ForwardTrace, y: &Target, loss: &LossKind) -> Result<LayerGradients> {
        if trace.model_version != self.version {
            return Err(Error::Stale(format!(
                "trace version {} != model version {}",
                trace.model_version, self.version
            )));
        }
        self.check_loss_head(loss)?;
        let layers = self.num_layers();
        let out = trace.activations.last().unwrap();

        // dloss/dz at the output layer (identity transform, so this is also
        // dloss/dh_L).
        let mut delta: Vec<f64> = match loss {
            LossKind::CrossEntropy => {
                let class = match y {
                    Target::Class(c) => *c,
                    Target::Values(_) => {
                        return Err(Error::Input("cross-entropy needs a class target".into()))
                    }
                };
                let mut d = trace.output_probs.clone();
                if class >= d.len() {
                    return Err(Error::Input("class out of range".into()));
                }
                d[class] -= 1.0;
                d
            }
            LossKind::MeanSquaredError => {
                let target = values_target(y, out.len())?;
                out.iter().zip(target).map(|(p, t)| p - t).collect()
            }
            LossKind::GaussianNll { var_floor } => {
                let t = out.len() / 2;
                let target = values_target(y, t)?;
                let mut d = vec![0.0; out.len()];
                for j in 0..t {
                    let raw_var = out[t + j].exp();
                    let var = raw_var.max(*var_floor);
                    let resid = target[j] - out[j];
                    d[j] = -resid / var;
                    // Once the floor binds, the loss no longer depends on
                    // the log-variance output.
                    d[t + j] = if raw_var > *var_floor {
                        0.5 * (1.0 - resid * resid / var)
                    } else {
                        0.0
                    };
                }
                d
            }
        };

        let mut hidden_grads = vec![Vec::new(); layers];
        let mut weight_grads: Vec<Vec<f64>> = Vec::with_capacity(layers);
        let mut bias_grads: Vec<Vec<f64>> = Vec::with_capacity(layers);
        for w in (0..layers).rev() {
            let (rows, cols) = (self.dims[w + 1], self.dims[w]);
            let below = &trace.activations[w];
            let mut wg = vec![0.0; rows * cols];
            let mut prev = vec![0.0; cols];
            for i in 0..rows {
                let d = delta[i];
                let row = &self.weights[w][i * cols..(i + 1) * cols];
                for j in 0..cols {
                    wg[i * cols + j] = d * below[j];
                    prev[j] += row[j] * d;
                }
            }
            bias_grads.push(delta.clone());
            weight_grads.push(wg);
            hidden_grads[w] = prev.clone();
            if w > 0 {
                // Entering hidden layer w: fold in its activation derivative.
                let h = &trace.activations[w];
                for j in 0..cols {
                    prev[j] *= self.hidden_activation.derivative_from_output(h[j]);
                }
            }
            delta = prev;
        }
        weight_grads.reverse();
        bias_grads.reverse();

        let mut flat = Vec::with_capacity(self.param_count());
        for w in 0..layers {
            flat.extend_from_slice(&weight_grads[w]);
            flat.extend_from_slice(&bias_grads[w]);
        }
        Ok(LayerGradients {
            hidden_grads,
            param_grad_flat: flat,
            model_version: self.version,
        })
    }

    /// Forward and backward in one call.
    pub fn evaluate(&self, x: &[f64], y: &Target, loss: &LossKind) -> Result<SampleEval> {
        let trace = self.forward(x, y, loss)?;
        let grads = self.backward(&trace, y, loss)?;
        Ok(SampleEval { trace, grads })
    }

    /// One SGD step on the mean gradient of `batch`. The version increments
    /// exactly once even when `lr == 0`; a non-finite mean gradient aborts
    /// the step with the parameters untouched.
    pub fn sgd_step(&mut self, batch: &[(&[f64], &Target)], lr: f64, loss: &LossKind) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        if !(lr >= 0.0) {
            return Err(Error::Config(format!("negative learning rate {lr}")));
        }
        let mut mean = vec![0.0; self.param_count()];
        for (x, y) in batch {
            let eval = self.evaluate(x, y, loss)?;
            for (m, g) in mean.iter_mut().zip(&eval.grads.param_grad_flat) {
                *m += g;
            }
        }
        let scale = 1.0 / batch.len() as f64;
        for m in &mut mean {
            *m *= scale;
        }
        if mean.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerics("non-finite mean gradient".into()));
        }
        let mut offset = 0;
        for w in 0..self.num_layers() {
            let n = self.weights[w].len();
            for (p, g) in self.weights[w].iter_mut().zip(&mean[offset..offset + n]) {
                *p -= lr * g;
            }
            offset += n;
            let n = self.biases[w].len();
            for (p, g) in self.biases[w].iter_mut().zip(&mean[offset..offset + n]) {
                *p -= lr * g;
            }
            offset += n;
        }
        self.version += 1;
        Ok(())
    }
}

fn values_target<'a>(y: &'a Target, expected: usize) -> Result<&'a [f64]> {
    match y {
        Target::Values(v) if v.len() == expected => Ok(v),
        Target::Values(v) => Err(Error::Shape(format!(
            "target dim {} != expected {expected}",
            v.len()
        ))),
        Target::Class(_) => Err(Error::Input("regression loss needs a value target".into())),
    }
}

/// Numerically stable softmax (max-shifted).
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Shannon entropy in nats with probabilities clamped to [1e-12, 1].
pub fn shannon_entropy(p: &[f64]) -> f64 {
    -p.iter()
        .map(|&v| {
            let v = v.clamp(PROB_FLOOR, 1.0);
            v * v.ln()
        })
        .sum::<f64>()
}
