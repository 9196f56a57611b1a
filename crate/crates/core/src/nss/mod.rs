//! Feed-forward neural state-space vehicle model.
//!
//! The network approximates the continuous-time derivative `x' = f(x, u)`;
//! [`NssModel::step`] discretises it with explicit Euler or classical RK4.
//! Inputs and outputs pass through affine scalers that are fitted at training
//! time and stored with the weights.

mod io;
mod train;

pub use io::{load_weights, save_weights};
pub use train::{
    batch_loss_and_gradient, loss, train, Gradient, Sample, TrainingConfig, TrainingReport,
};

use nalgebra::{DMatrix, DMatrixView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MpicError, Result};
use crate::state::{Dynamics, CONTROL_DIM, STATE_DIM};

pub const INPUT_DIM: usize = STATE_DIM + CONTROL_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    Euler,
    Rk4,
}

/// Dense layer, weights stored row-major as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Layer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    #[inline]
    fn forward(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.in_dim).zip(&self.bias) {
            let z: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b;
            out.push(self.activation.apply(z));
        }
    }

    /// Row-per-sample batch: `out = act(input W' + b)`.
    fn forward_batch(&self, input: &DMatrix<f64>) -> DMatrix<f64> {
        // row-major `out x in` storage read column-major is `W'`
        let wt = DMatrixView::from_slice(&self.weights, self.in_dim, self.out_dim);
        let mut z = input * wt;
        for (mut col, b) in z.column_iter_mut().zip(&self.bias) {
            for v in col.iter_mut() {
                *v = self.activation.apply(*v + b);
            }
        }
        z
    }
}

/// Per-feature affine scaler `z = (v - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn identity(n: usize) -> Self {
        Scaler {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Named architecture presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchPreset {
    /// One hidden layer of 512.
    Net1,
    /// Two hidden layers of 128.
    Net2,
    /// Hidden layers 64-128-128-64.
    Net3,
}

impl ArchPreset {
    pub fn layer_sizes(self) -> Vec<usize> {
        match self {
            ArchPreset::Net1 => vec![INPUT_DIM, 512, STATE_DIM],
            ArchPreset::Net2 => vec![INPUT_DIM, 128, 128, STATE_DIM],
            ArchPreset::Net3 => vec![INPUT_DIM, 64, 128, 128, 64, STATE_DIM],
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "net1" | "net-1" => Some(ArchPreset::Net1),
            "net2" | "net-2" => Some(ArchPreset::Net2),
            "net3" | "net-3" => Some(ArchPreset::Net3),
            _ => None,
        }
    }
}

/// Parses either a preset name or a comma separated layer list like `6,8,4`.
pub fn parse_arch(s: &str) -> Result<Vec<usize>> {
    if let Some(p) = ArchPreset::parse(s) {
        return Ok(p.layer_sizes());
    }
    let sizes: std::result::Result<Vec<usize>, _> =
        s.split(',').map(|t| t.trim().parse::<usize>()).collect();
    match sizes {
        Ok(v) if v.len() >= 2 && v.iter().all(|&n| n > 0) => Ok(v),
        _ => Err(MpicError::InvalidConfig(format!(
            "architecture '{s}' is neither net1/net2/net3 nor a layer list"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NssModel {
    pub layers: Vec<Layer>,
    pub dt: f64,
    pub scheme: Scheme,
    pub input_scaler: Scaler,
    pub output_scaler: Scaler,
}

impl NssModel {
    /// Glorot-uniform weights, zero biases, identity scalers.
    pub fn new_random(sizes: &[usize], dt: f64, scheme: Scheme, seed: u64) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(MpicError::InvalidConfig(
                "need at least an input and an output layer".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (i, w) in sizes.windows(2).enumerate() {
            let act = if i + 2 == sizes.len() {
                Activation::Identity
            } else {
                Activation::Tanh
            };
            let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
            let mut layer = Layer::zeros(w[0], w[1], act);
            for v in layer.weights.iter_mut() {
                *v = rng.gen_range(-limit..limit);
            }
            layers.push(layer);
        }
        let model = NssModel {
            input_scaler: Scaler::identity(sizes[0]),
            output_scaler: Scaler::identity(*sizes.last().unwrap()),
            layers,
            dt,
            scheme,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn from_layers(layers: Vec<Layer>, dt: f64, scheme: Scheme) -> Result<Self> {
        let in_dim = layers.first().map_or(0, |l| l.in_dim);
        let out_dim = layers.last().map_or(0, |l| l.out_dim);
        let model = NssModel {
            layers,
            dt,
            scheme,
            input_scaler: Scaler::identity(in_dim),
            output_scaler: Scaler::identity(out_dim),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut v = vec![self.layers[0].in_dim];
        v.extend(self.layers.iter().map(|l| l.out_dim));
        v
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(MpicError::DimensionMismatch("model has no layers".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(MpicError::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(MpicError::DimensionMismatch(format!(
                    "layer {i}: storage does not match {}x{}",
                    l.out_dim, l.in_dim
                )));
            }
            if i > 0 && self.layers[i - 1].out_dim != l.in_dim {
                return Err(MpicError::DimensionMismatch(format!(
                    "layer {i}: input {} does not chain from output {}",
                    l.in_dim,
                    self.layers[i - 1].out_dim
                )));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(MpicError::InvalidConfig(format!("layer {i}: non-finite weight")));
            }
        }
        if self.layers.last().unwrap().activation != Activation::Identity {
            return Err(MpicError::InvalidConfig(
                "final layer activation must be identity".into(),
            ));
        }
        if self.input_scaler.len() != self.input_dim() || self.output_scaler.len() != self.output_dim()
        {
            return Err(MpicError::DimensionMismatch("scaler dimensions".into()));
        }
        Ok(())
    }

    /// Raw network evaluation on an arbitrary-dimension input, scalers applied.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(MpicError::DimensionMismatch(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        Ok(self.forward_unchecked(input))
    }

    fn forward_unchecked(&self, input: &[f64]) -> Vec<f64> {
        let mut a: Vec<f64> = input
            .iter()
            .zip(self.input_scaler.mean.iter().zip(&self.input_scaler.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        let mut b = Vec::with_capacity(a.len());
        for layer in &self.layers {
            layer.forward(&a, &mut b);
            std::mem::swap(&mut a, &mut b);
        }
        for (v, (m, s)) in a
            .iter_mut()
            .zip(self.output_scaler.mean.iter().zip(&self.output_scaler.std))
        {
            *v = *v * s + m;
        }
        a
    }

    /// State derivative predicted by the network.
    pub fn mlp_forward(&self, x: &[f64; STATE_DIM], u: &[f64; CONTROL_DIM]) -> Result<[f64; STATE_DIM]> {
        if self.input_dim() != INPUT_DIM || self.output_dim() != STATE_DIM {
            return Err(MpicError::DimensionMismatch(format!(
                "vehicle model needs {INPUT_DIM} -> {STATE_DIM}, network is {} -> {}",
                self.input_dim(),
                self.output_dim()
            )));
        }
        Ok(self.derivative(x, u))
    }

    #[inline]
    fn derivative(&self, x: &[f64; STATE_DIM], u: &[f64; CONTROL_DIM]) -> [f64; STATE_DIM] {
        let input = [x[0], x[1], x[2], x[3], u[0], u[1]];
        let out = self.forward_unchecked(&input);
        [out[0], out[1], out[2], out[3]]
    }

    /// One discrete step with the configured scheme; `u` is held over the step.
    pub fn step_checked(&self, x: &[f64; STATE_DIM], u: &[f64; CONTROL_DIM]) -> Result<[f64; STATE_DIM]> {
        self.mlp_forward(x, u)?;
        Ok(self.step_with(x, u, self.scheme))
    }

    pub fn step_with(&self, x: &[f64; STATE_DIM], u: &[f64; CONTROL_DIM], scheme: Scheme) -> [f64; STATE_DIM] {
        let dt = self.dt;
        match scheme {
            Scheme::Euler => {
                let k = self.derivative(x, u);
                std::array::from_fn(|i| x[i] + dt * k[i])
            }
            Scheme::Rk4 => {
                let k1 = self.derivative(x, u);
                let x2 = std::array::from_fn(|i| x[i] + 0.5 * dt * k1[i]);
                let k2 = self.derivative(&x2, u);
                let x3 = std::array::from_fn(|i| x[i] + 0.5 * dt * k2[i]);
                let k3 = self.derivative(&x3, u);
                let x4 = std::array::from_fn(|i| x[i] + dt * k3[i]);
                let k4 = self.derivative(&x4, u);
                std::array::from_fn(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            }
        }
    }

    /// State derivatives for many `(x, u)` pairs in one pass through the
    /// network, one sample per row.
    fn derivative_batch(&self, xs: &[[f64; STATE_DIM]], us: &[[f64; CONTROL_DIM]]) -> DMatrix<f64> {
        let (im, is) = (&self.input_scaler.mean, &self.input_scaler.std);
        let mut a = DMatrix::from_fn(xs.len(), INPUT_DIM, |r, c| {
            let v = if c < STATE_DIM { xs[r][c] } else { us[r][c - STATE_DIM] };
            (v - im[c]) / is[c]
        });
        for layer in &self.layers {
            a = layer.forward_batch(&a);
        }
        let (om, os) = (&self.output_scaler.mean, &self.output_scaler.std);
        for (c, mut col) in a.column_iter_mut().enumerate() {
            for v in col.iter_mut() {
                *v = *v * os[c] + om[c];
            }
        }
        a
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }
}

impl Dynamics for NssModel {
    fn step(&self, x: &[f64; STATE_DIM], u: &[f64; CONTROL_DIM]) -> [f64; STATE_DIM] {
        self.step_with(x, u, self.scheme)
    }

    fn step_batch(&self, xs: &[[f64; STATE_DIM]], us: &[[f64; CONTROL_DIM]], out: &mut [[f64; STATE_DIM]]) {
        let dt = self.dt;
        let advance = |base: &[[f64; STATE_DIM]], k: &DMatrix<f64>, h: f64| -> Vec<[f64; STATE_DIM]> {
            base.iter().enumerate().map(|(r, x)| std::array::from_fn(|i| x[i] + h * k[(r, i)])).collect()
        };
        match self.scheme {
            Scheme::Euler => {
                let k = self.derivative_batch(xs, us);
                for (r, o) in out.iter_mut().enumerate() {
                    *o = std::array::from_fn(|i| xs[r][i] + dt * k[(r, i)]);
                }
            }
            Scheme::Rk4 => {
                let k1 = self.derivative_batch(xs, us);
                let k2 = self.derivative_batch(&advance(xs, &k1, 0.5 * dt), us);
                let k3 = self.derivative_batch(&advance(xs, &k2, 0.5 * dt), us);
                let k4 = self.derivative_batch(&advance(xs, &k3, dt), us);
                for (r, o) in out.iter_mut().enumerate() {
                    *o = std::array::from_fn(|i| {
                        xs[r][i] + dt / 6.0 * (k1[(r, i)] + 2.0 * k2[(r, i)] + 2.0 * k3[(r, i)] + k4[(r, i)])
                    });
                }
            }
        }
    }
}
