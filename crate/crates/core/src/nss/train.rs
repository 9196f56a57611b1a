//! Mini-batch Adam training of the state-space network.
//!
//! The loss is the mean squared one-step prediction error of the discretised
//! model, measured in standardised derivative units so that every state
//! component carries comparable weight. Gradients flow through the Euler or
//! RK4 stages back into the network weights.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Activation, NssModel, Scaler, Scheme, INPUT_DIM};
use crate::error::{MpicError, Result};
use crate::state::{CONTROL_DIM, STATE_DIM};

/// One transition `(x, u) -> x_next`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: [f64; STATE_DIM],
    pub u: [f64; CONTROL_DIM],
    pub x_next: [f64; STATE_DIM],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    /// Learning rate reached at the last epoch (geometric decay).
    pub final_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub dt: f64,
    pub scheme: Scheme,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 2e-3,
            final_learning_rate: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            epochs: 60,
            validation_fraction: 0.2,
            seed: 7,
            dt: 0.1,
            scheme: Scheme::Euler,
        }
    }
}

impl TrainingConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.final_learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.batch_size > 0
            && self.validation_fraction > 0.0
            && self.validation_fraction < 1.0
            && self.dt > 0.0;
        if ok {
            Ok(())
        } else {
            Err(MpicError::InvalidConfig(format!("bad training config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// One-step RMSE per state component on the training split (state units).
    pub train_rmse: [f64; STATE_DIM],
    pub validation_rmse: [f64; STATE_DIM],
    pub epochs: usize,
    pub seed: u64,
    pub train_samples: usize,
    pub validation_samples: usize,
    /// Mean standardised loss per epoch.
    pub loss_history: Vec<f64>,
}

/// Gradient of the loss with the same layout as the model layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

struct Net {
    w: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
    act: Vec<Activation>,
}

impl Net {
    fn from_model(model: &NssModel) -> Self {
        Net {
            w: model
                .layers
                .iter()
                .map(|l| DMatrix::from_row_slice(l.out_dim, l.in_dim, &l.weights))
                .collect(),
            b: model
                .layers
                .iter()
                .map(|l| DVector::from_column_slice(&l.bias))
                .collect(),
            act: model.layers.iter().map(|l| l.activation).collect(),
        }
    }

    fn write_back(&self, model: &mut NssModel) {
        for (l, (w, b)) in model.layers.iter_mut().zip(self.w.iter().zip(&self.b)) {
            for r in 0..l.out_dim {
                for c in 0..l.in_dim {
                    l.weights[r * l.in_dim + c] = w[(r, c)];
                }
            }
            l.bias.copy_from_slice(b.as_slice());
        }
    }

    /// Returns the activations of every layer, input first.
    fn forward(&self, input: DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut acts = Vec::with_capacity(self.w.len() + 1);
        acts.push(input);
        for ((w, b), act) in self.w.iter().zip(&self.b).zip(&self.act) {
            let mut z = w * acts.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if *act == Activation::Tanh {
                z.apply(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    /// Back-propagates `d_out` and accumulates into `grad`; returns the
    /// gradient with respect to the network input.
    fn backward(
        &self,
        acts: &[DMatrix<f64>],
        d_out: DMatrix<f64>,
        grad_w: &mut [DMatrix<f64>],
        grad_b: &mut [DVector<f64>],
    ) -> DMatrix<f64> {
        let mut delta = d_out;
        for l in (0..self.w.len()).rev() {
            if self.act[l] == Activation::Tanh {
                delta.zip_apply(&acts[l + 1], |d, a| *d *= 1.0 - a * a);
            }
            grad_w[l].gemm(1.0, &delta, &acts[l].transpose(), 1.0);
            grad_b[l] += delta.column_sum();
            delta = self.w[l].transpose() * &delta;
        }
        delta
    }
}

/// Physical-unit evaluation of the derivative network on a batch.
struct Physical<'a> {
    net: &'a Net,
    in_mean: DVector<f64>,
    in_std: DVector<f64>,
    out_mean: DVector<f64>,
    out_std: DVector<f64>,
}

impl<'a> Physical<'a> {
    fn new(net: &'a Net, model: &NssModel) -> Self {
        Physical {
            net,
            in_mean: DVector::from_column_slice(&model.input_scaler.mean),
            in_std: DVector::from_column_slice(&model.input_scaler.std),
            out_mean: DVector::from_column_slice(&model.output_scaler.mean),
            out_std: DVector::from_column_slice(&model.output_scaler.std),
        }
    }

    /// `inputs` is `INPUT_DIM x B` in physical units.
    fn forward(&self, inputs: &DMatrix<f64>) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let mut z = inputs.clone();
        for mut col in z.column_iter_mut() {
            col -= &self.in_mean;
            col.component_div_assign(&self.in_std);
        }
        let acts = self.net.forward(z);
        let mut out = acts.last().unwrap().clone();
        for mut col in out.column_iter_mut() {
            col.component_mul_assign(&self.out_std);
            col += &self.out_mean;
        }
        (out, acts)
    }

    /// Gradient with respect to the physical state inputs (first rows).
    fn backward(
        &self,
        acts: &[DMatrix<f64>],
        d_out_phys: &DMatrix<f64>,
        grad_w: &mut [DMatrix<f64>],
        grad_b: &mut [DVector<f64>],
    ) -> DMatrix<f64> {
        let mut d = d_out_phys.clone();
        for mut col in d.column_iter_mut() {
            col.component_mul_assign(&self.out_std);
        }
        let mut d_in = self.net.backward(acts, d, grad_w, grad_b);
        for mut col in d_in.column_iter_mut() {
            col.component_div_assign(&self.in_std);
        }
        d_in.rows(0, STATE_DIM).into_owned()
    }
}

struct Batch {
    x: DMatrix<f64>,
    u: DMatrix<f64>,
    x_next: DMatrix<f64>,
}

impl Batch {
    fn gather(data: &[Sample], idx: impl ExactSizeIterator<Item = usize> + Clone) -> Self {
        let n = idx.len();
        let mut x = DMatrix::zeros(STATE_DIM, n);
        let mut u = DMatrix::zeros(CONTROL_DIM, n);
        let mut x_next = DMatrix::zeros(STATE_DIM, n);
        for (c, i) in idx.enumerate() {
            let s = &data[i];
            for r in 0..STATE_DIM {
                x[(r, c)] = s.x[r];
                x_next[(r, c)] = s.x_next[r];
            }
            for r in 0..CONTROL_DIM {
                u[(r, c)] = s.u[r];
            }
        }
        Batch { x, u, x_next }
    }

    fn inputs(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = x.ncols();
        let mut m = DMatrix::zeros(INPUT_DIM, n);
        m.rows_mut(0, STATE_DIM).copy_from(x);
        m.rows_mut(STATE_DIM, CONTROL_DIM).copy_from(&self.u);
        m
    }
}

/// Loss and gradient through the discretisation. Gradients are accumulated
/// into the provided buffers (which the caller zeroes).
fn loss_grad(
    phys: &Physical,
    batch: &Batch,
    dt: f64,
    scheme: Scheme,
    grad_w: &mut [DMatrix<f64>],
    grad_b: &mut [DVector<f64>],
) -> f64 {
    let n = batch.x.ncols();
    let scale = 1.0 / (n * STATE_DIM) as f64;
    // residual in standardised units r = (pred - x_next) / (dt * out_std)
    let resid_scale = phys.out_std.map(|s| 1.0 / (dt * s));

    match scheme {
        Scheme::Euler => {
            let (k1, a1) = phys.forward(&batch.inputs(&batch.x));
            let mut r = &batch.x + &k1 * dt - &batch.x_next;
            for mut col in r.column_iter_mut() {
                col.component_mul_assign(&resid_scale);
            }
            let loss = r.norm_squared() * scale;
            // dL/dpred = 2 r * resid_scale * scale ; dpred/dk1 = dt
            let mut g = r * (2.0 * scale);
            for mut col in g.column_iter_mut() {
                col.component_mul_assign(&resid_scale);
            }
            phys.backward(&a1, &(g * dt), grad_w, grad_b);
            loss
        }
        Scheme::Rk4 => {
            let x1 = batch.x.clone();
            let (k1, a1) = phys.forward(&batch.inputs(&x1));
            let x2 = &batch.x + &k1 * (0.5 * dt);
            let (k2, a2) = phys.forward(&batch.inputs(&x2));
            let x3 = &batch.x + &k2 * (0.5 * dt);
            let (k3, a3) = phys.forward(&batch.inputs(&x3));
            let x4 = &batch.x + &k3 * dt;
            let (k4, a4) = phys.forward(&batch.inputs(&x4));
            let pred = &batch.x + (&k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (dt / 6.0);
            let mut r = pred - &batch.x_next;
            for mut col in r.column_iter_mut() {
                col.component_mul_assign(&resid_scale);
            }
            let loss = r.norm_squared() * scale;
            let mut g = r * (2.0 * scale);
            for mut col in g.column_iter_mut() {
                col.component_mul_assign(&resid_scale);
            }
            let c = dt / 6.0;
            let gk4 = &g * c;
            let gx4 = phys.backward(&a4, &gk4, grad_w, grad_b);
            let gk3 = &g * (2.0 * c) + gx4 * dt;
            let gx3 = phys.backward(&a3, &gk3, grad_w, grad_b);
            let gk2 = &g * (2.0 * c) + gx3 * (0.5 * dt);
            let gx2 = phys.backward(&a2, &gk2, grad_w, grad_b);
            let gk1 = &g * c + gx2 * (0.5 * dt);
            phys.backward(&a1, &gk1, grad_w, grad_b);
            loss
        }
    }
}

fn zero_grads(net: &Net) -> (Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
    (
        net.w.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
        net.b.iter().map(|b| DVector::zeros(b.len())).collect(),
    )
}

/// Standardised one-step loss evaluated sample by sample through
/// [`NssModel::step_with`]. Independent of the batched training path.
pub fn loss(model: &NssModel, batch: &[Sample]) -> f64 {
    let mut total = 0.0;
    for s in batch {
        let pred = model.step_with(&s.x, &s.u, model.scheme);
        for i in 0..STATE_DIM {
            let r = (pred[i] - s.x_next[i]) / (model.dt * model.output_scaler.std[i]);
            total += r * r;
        }
    }
    total / (batch.len() * STATE_DIM) as f64
}

/// Batched loss and analytic gradient for the model's current weights.
pub fn batch_loss_and_gradient(model: &NssModel, batch: &[Sample]) -> (f64, Gradient) {
    let net = Net::from_model(model);
    let phys = Physical::new(&net, model);
    let b = Batch::gather(batch, 0..batch.len());
    let (mut gw, mut gb) = zero_grads(&net);
    let l = loss_grad(&phys, &b, model.dt, model.scheme, &mut gw, &mut gb);
    let weights = gw
        .iter()
        .map(|w| {
            let mut v = Vec::with_capacity(w.len());
            for r in 0..w.nrows() {
                for c in 0..w.ncols() {
                    v.push(w[(r, c)]);
                }
            }
            v
        })
        .collect();
    let bias = gb.iter().map(|b| b.as_slice().to_vec()).collect();
    (l, Gradient { weights, bias })
}

fn fit_scalers(data: &[Sample], idx: &[usize], dt: f64) -> (Scaler, Scaler) {
    let n = idx.len().max(1) as f64;
    let mut in_mean = vec![0.0; INPUT_DIM];
    let mut out_mean = vec![0.0; STATE_DIM];
    let input = |s: &Sample| [s.x[0], s.x[1], s.x[2], s.x[3], s.u[0], s.u[1]];
    let deriv = |s: &Sample| std::array::from_fn::<f64, STATE_DIM, _>(|i| (s.x_next[i] - s.x[i]) / dt);
    for &i in idx {
        let s = &data[i];
        for (m, v) in in_mean.iter_mut().zip(input(s)) {
            *m += v / n;
        }
        for (m, v) in out_mean.iter_mut().zip(deriv(s)) {
            *m += v / n;
        }
    }
    let mut in_var = vec![0.0; INPUT_DIM];
    let mut out_var = vec![0.0; STATE_DIM];
    for &i in idx {
        let s = &data[i];
        for ((acc, m), v) in in_var.iter_mut().zip(&in_mean).zip(input(s)) {
            *acc += (v - m).powi(2) / n;
        }
        for ((acc, m), v) in out_var.iter_mut().zip(&out_mean).zip(deriv(s)) {
            *acc += (v - m).powi(2) / n;
        }
    }
    let to_std = |v: Vec<f64>| -> Vec<f64> {
        v.into_iter()
            .map(|x| if x.sqrt() > 1e-9 { x.sqrt() } else { 1.0 })
            .collect()
    };
    (
        Scaler { mean: in_mean, std: to_std(in_var) },
        Scaler { mean: out_mean, std: to_std(out_var) },
    )
}

fn rmse(model: &NssModel, data: &[Sample], idx: &[usize]) -> [f64; STATE_DIM] {
    let mut acc = [0.0; STATE_DIM];
    for &i in idx {
        let s = &data[i];
        let pred = model.step_with(&s.x, &s.u, model.scheme);
        for k in 0..STATE_DIM {
            acc[k] += (pred[k] - s.x_next[k]).powi(2);
        }
    }
    let n = idx.len().max(1) as f64;
    acc.map(|a| (a / n).sqrt())
}

/// Trains a network with layer sizes `arch` on `data`.
pub fn train(data: &[Sample], arch: &[usize], cfg: &TrainingConfig) -> Result<(NssModel, TrainingReport)> {
    cfg.validate()?;
    if arch.first() != Some(&INPUT_DIM) || arch.last() != Some(&STATE_DIM) {
        return Err(MpicError::DimensionMismatch(format!(
            "vehicle model architecture must map {INPUT_DIM} -> {STATE_DIM}, got {arch:?}"
        )));
    }
    if data.len() < 2 {
        return Err(MpicError::InvalidConfig("need at least two samples".into()));
    }
    if data
        .iter()
        .any(|s| s.x.iter().chain(&s.u).chain(&s.x_next).any(|v| !v.is_finite()))
    {
        return Err(MpicError::InvalidConfig("training data contains non-finite values".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((data.len() as f64) * cfg.validation_fraction).round() as usize;
    let n_val = n_val.clamp(1, data.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let (val_idx, mut train_idx) = (val_idx.to_vec(), train_idx.to_vec());

    let mut model = NssModel::new_random(arch, cfg.dt, cfg.scheme, cfg.seed ^ 0x9e37_79b9_7f4a_7c15)?;
    let (in_s, out_s) = fit_scalers(data, &train_idx, cfg.dt);
    model.input_scaler = in_s;
    model.output_scaler = out_s;

    let mut net = Net::from_model(&model);
    let (mut m_w, mut m_b) = zero_grads(&net);
    let (mut v_w, mut v_b) = zero_grads(&net);
    let mut step = 0i32;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = if cfg.epochs > 1 {
            let frac = epoch as f64 / (cfg.epochs - 1) as f64;
            cfg.learning_rate * (cfg.final_learning_rate / cfg.learning_rate).powf(frac)
        } else {
            cfg.learning_rate
        };
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let batch = Batch::gather(data, chunk.iter().copied());
            let (mut gw, mut gb) = zero_grads(&net);
            let l = {
                let phys = Physical::new(&net, &model);
                loss_grad(&phys, &batch, cfg.dt, cfg.scheme, &mut gw, &mut gb)
            };
            if !l.is_finite() {
                return Err(MpicError::DivergedTraining { epoch, loss: l });
            }
            epoch_loss += l;
            batches += 1;
            step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(step);
            let bc2 = 1.0 - cfg.beta2.powi(step);
            let adam = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.epsilon);
            };
            for l in 0..net.w.len() {
                for (((p, g), m), v) in net.w[l]
                    .iter_mut()
                    .zip(gw[l].iter())
                    .zip(m_w[l].iter_mut())
                    .zip(v_w[l].iter_mut())
                {
                    adam(p, *g, m, v);
                }
                for (((p, g), m), v) in net.b[l]
                    .iter_mut()
                    .zip(gb[l].iter())
                    .zip(m_b[l].iter_mut())
                    .zip(v_b[l].iter_mut())
                {
                    adam(p, *g, m, v);
                }
            }
        }
        let mean = epoch_loss / batches.max(1) as f64;
        log::debug!("epoch {epoch}: loss {mean:.3e} lr {lr:.2e}");
        history.push(mean);
    }
    net.write_back(&mut model);
    model.validate()?;

    let report = TrainingReport {
        train_rmse: rmse(&model, data, &train_idx),
        validation_rmse: rmse(&model, data, &val_idx),
        epochs: cfg.epochs,
        seed: cfg.seed,
        train_samples: train_idx.len(),
        validation_samples: val_idx.len(),
        loss_history: history,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_batch(n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                let u = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                let x_next = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                Sample { x, u, x_next }
            })
            .collect()
    }

    fn check_gradient(scheme: Scheme) {
        let mut model = NssModel::new_random(&[6, 8, 4], 0.1, scheme, 11).unwrap();
        model.input_scaler.std = vec![1.5, 0.7, 1.0, 2.0, 0.5, 1.2];
        model.output_scaler.std = vec![2.0, 1.0, 0.5, 1.5];
        model.output_scaler.mean = vec![0.1, -0.2, 0.0, 0.3];
        let batch = random_batch(16, 5);
        let (l, grad) = batch_loss_and_gradient(&model, &batch);
        assert!((l - loss(&model, &batch)).abs() < 1e-12 * l.max(1.0));

        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for li in 0..model.layers.len() {
            for k in 0..model.layers[li].weights.len() {
                let mut p = model.clone();
                p.layers[li].weights[k] += h;
                let mut m = model.clone();
                m.layers[li].weights[k] -= h;
                let fd = (loss(&p, &batch) - loss(&m, &batch)) / (2.0 * h);
                let an = grad.weights[li][k];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(rel);
            }
            for k in 0..model.layers[li].bias.len() {
                let mut p = model.clone();
                p.layers[li].bias[k] += h;
                let mut m = model.clone();
                m.layers[li].bias[k] -= h;
                let fd = (loss(&p, &batch) - loss(&m, &batch)) / (2.0 * h);
                let an = grad.bias[li][k];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "{scheme:?} worst relative gradient error {worst:e}");
    }

    #[test]
    fn gradient_matches_finite_differences_euler() {
        check_gradient(Scheme::Euler);
    }

    #[test]
    fn gradient_matches_finite_differences_rk4() {
        check_gradient(Scheme::Rk4);
    }

    fn linear_data(n: usize, factor: f64, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-5.0..5.0));
                let u = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                Sample { x, u, x_next: x.map(|v| factor * v) }
            })
            .collect()
    }

    #[test]
    fn learns_zero_dynamics() {
        let data = linear_data(1000, 1.0, 1);
        let cfg = TrainingConfig { epochs: 50, batch_size: 16, learning_rate: 2e-2, ..Default::default() };
        let (_, report) = train(&data, &[6, 8, 4], &cfg).unwrap();
        for r in report.validation_rmse {
            assert!(r <= 1e-3, "{report:?}");
        }
    }

    #[test]
    fn learns_linear_contraction() {
        let data = linear_data(2000, 0.9, 2);
        let cfg = TrainingConfig { epochs: 50, batch_size: 16, learning_rate: 2e-2, ..Default::default() };
        let (_, report) = train(&data, &[6, 4], &cfg).unwrap();
        for r in report.validation_rmse {
            assert!(r <= 1e-3, "{report:?}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = linear_data(500, 0.9, 3);
        let cfg = TrainingConfig { epochs: 3, ..Default::default() };
        let (a, _) = train(&data, &[6, 8, 4], &cfg).unwrap();
        let (b, _) = train(&data, &[6, 8, 4], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_is_reported() {
        let data = linear_data(200, 0.9, 4);
        let cfg = TrainingConfig {
            learning_rate: 1e200,
            final_learning_rate: 1e200,
            epochs: 5,
            ..Default::default()
        };
        let r = train(&data, &[6, 8, 4], &cfg);
        assert!(matches!(r, Err(MpicError::DivergedTraining { .. })), "{r:?}");
    }
}
