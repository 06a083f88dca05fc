//! Feedforward encoder producing observables `φ(x)` and the stacked lift
//! `z = [x; φ(x)]`, with a reverse-mode parameter gradient.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Elu,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub activation: Activation,
    /// outputs × inputs
    #[serde(with = "crate::serde_util")]
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl DenseLayer {
    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Hidden-layer layout of an encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderArchitecture {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Number of learned observables `N`.
    pub features: usize,
}

impl Default for EncoderArchitecture {
    fn default() -> Self {
        EncoderArchitecture {
            hidden: vec![128, 128, 128],
            activation: Activation::Tanh,
            features: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderNetwork {
    pub input_dim: usize,
    pub layers: Vec<DenseLayer>,
    /// Per-dimension normalization applied before the first layer.
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub seed: u64,
}

/// Intermediate values of a batched forward pass, consumed by [`EncoderNetwork::gradient`].
pub struct ForwardCache {
    /// Input of each layer (normalized input first).
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    /// Output of the last layer: `N × batch`.
    pub output: DMatrix<f64>,
}

impl EncoderNetwork {
    /// Random fan-in-scaled initialization: weights and biases uniform in `±1/√fan_in`.
    /// An architecture with zero features produces an empty network (`z = x`).
    pub fn new(input_dim: usize, arch: &EncoderArchitecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        if arch.features > 0 {
            let mut fan_in = input_dim;
            let widths = arch.hidden.iter().map(|&w| (w, arch.activation));
            for (width, activation) in widths.chain(std::iter::once((arch.features, Activation::Linear))) {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weights = DMatrix::from_fn(width, fan_in, |_, _| rng.random_range(-bound..bound));
                let bias = DVector::from_fn(width, |_, _| rng.random_range(-bound..bound));
                layers.push(DenseLayer {
                    activation,
                    weights,
                    bias,
                });
                fan_in = width;
            }
        }
        EncoderNetwork {
            input_dim,
            layers,
            input_mean: vec![0.0; input_dim],
            input_std: vec![1.0; input_dim],
            seed,
        }
    }

    pub fn features(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::outputs)
    }

    pub fn lifted_dim(&self) -> usize {
        self.input_dim + self.features()
    }

    pub fn validate(&self) -> Result<()> {
        let mut fan_in = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.inputs() != fan_in || layer.bias.len() != layer.outputs() {
                return Err(Error::config(
                    format!("encoder.layers[{i}]"),
                    "inconsistent layer dimensions",
                ));
            }
            fan_in = layer.outputs();
        }
        if self.input_mean.len() != self.input_dim || self.input_std.len() != self.input_dim {
            return Err(Error::config("encoder.input_mean", "normalization length must equal input_dim"));
        }
        if self.input_std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::config("encoder.input_std", "entries must be positive"));
        }
        Ok(())
    }

    /// Sets input normalization to the per-dimension mean and standard deviation of `samples`.
    pub fn fit_normalization<'a>(&mut self, samples: impl IntoIterator<Item = &'a DVector<f64>>) {
        let d = self.input_dim;
        let mut sum = DVector::zeros(d);
        let mut sum_sq = DVector::zeros(d);
        let mut count = 0usize;
        for x in samples {
            sum += x;
            sum_sq += x.component_mul(x);
            count += 1;
        }
        if count == 0 {
            return;
        }
        let c = count as f64;
        for i in 0..d {
            let mean = sum[i] / c;
            let var = (sum_sq[i] / c - mean * mean).max(0.0);
            self.input_mean[i] = mean;
            self.input_std[i] = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Flat parameter view: per layer, weights row-major then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend(layer.weights.transpose().iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim("encoder parameters", self.param_count(), params.len())?;
        let mut offset = 0;
        for layer in &mut self.layers {
            let (rows, cols) = layer.weights.shape();
            layer.weights = DMatrix::from_row_slice(rows, cols, &params[offset..offset + rows * cols]);
            offset += rows * cols;
            layer.bias.copy_from_slice(&params[offset..offset + rows]);
            offset += rows;
        }
        Ok(())
    }

    fn normalize(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            let (m, s) = (self.input_mean[i], self.input_std[i]);
            row.apply(|v| *v = (*v - m) / s);
        }
        out
    }

    /// Batched forward pass over the columns of `x` (`input_dim × batch`).
    pub fn forward(&self, x: &DMatrix<f64>) -> ForwardCache {
        let batch = x.ncols();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = self.normalize(x);
        for layer in &self.layers {
            let mut z = &layer.weights * &a;
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            let out = z.map(|v| layer.activation.apply(v));
            inputs.push(a);
            pre.push(z);
            a = out;
        }
        let output = if self.layers.is_empty() {
            DMatrix::zeros(0, batch)
        } else {
            a
        };
        ForwardCache { inputs, pre, output }
    }

    /// Reverse-mode gradient of a scalar loss with respect to all parameters,
    /// given `adjoint = ∂loss/∂φ` (`N × batch`) for the batch in `cache`.
    pub fn gradient(&self, cache: &ForwardCache, adjoint: &DMatrix<f64>) -> Vec<f64> {
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut delta = adjoint.clone();
        let mut out = cache.output.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre[l];
            for ((d, x), y) in delta.iter_mut().zip(pre.iter()).zip(out.iter()) {
                *d *= layer.activation.derivative(*x, *y);
            }
            let input = &cache.inputs[l];
            let dw = &delta * input.transpose();
            let db: Vec<f64> = delta.row_iter().map(|r| r.sum()).collect();
            let mut g = Vec::with_capacity(layer.param_count());
            g.extend(dw.transpose().iter());
            g.extend(db);
            grads.push(g);
            if l > 0 {
                delta = layer.weights.transpose() * &delta;
                out = input.clone();
            }
        }
        grads.into_iter().rev().flatten().collect()
    }

    /// `φ(x)` for a single state.
    pub fn observables(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("encoder input", self.input_dim, x.len())?;
        check_finite("encoder input", x.as_slice())?;
        let cache = self.forward(&DMatrix::from_column_slice(x.len(), 1, x.as_slice()));
        Ok(cache.output.column(0).into_owned())
    }

    /// Lifted state `z = [x; φ(x)]`.
    pub fn lift(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let phi = self.observables(x)?;
        let mut z = DVector::zeros(self.lifted_dim());
        z.rows_mut(0, self.input_dim).copy_from(x);
        z.rows_mut(self.input_dim, phi.len()).copy_from(&phi);
        Ok(z)
    }

    /// Column-wise lift of `x` (`input_dim × batch`).
    pub fn lift_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let phi = self.forward(x).output;
        stack_rows(x, &phi)
    }
}

pub(crate) fn stack_rows(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    out
}
