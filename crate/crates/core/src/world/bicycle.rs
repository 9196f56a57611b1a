//! Kinematic bicycle ground truth and synthetic training data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nss::Sample;
use crate::state::{ControlInput, Dynamics, VehicleState, CONTROL_DIM, STATE_DIM};

pub const DEFAULT_WHEELBASE: f64 = 2.7;

fn derivative(s: &[f64; STATE_DIM], u: &[f64; CONTROL_DIM], wheelbase: f64) -> [f64; STATE_DIM] {
    let v = s[3].max(0.0);
    let dv = if s[3] <= 0.0 && u[0] < 0.0 { 0.0 } else { u[0] };
    [
        v * s[2].cos(),
        v * s[2].sin(),
        v / wheelbase * u[1].tan(),
        dv,
    ]
}

/// One RK4 step of the kinematic bicycle with the control held; speed is
/// clamped at zero (no reversing).
pub fn bicycle_step(x: &VehicleState, u: &ControlInput, dt: f64, wheelbase: f64) -> VehicleState {
    let s = x.to_array();
    let u = u.to_array();
    let add = |a: &[f64; 4], k: &[f64; 4], h: f64| std::array::from_fn(|i| a[i] + h * k[i]);
    let k1 = derivative(&s, &u, wheelbase);
    let k2 = derivative(&add(&s, &k1, 0.5 * dt), &u, wheelbase);
    let k3 = derivative(&add(&s, &k2, 0.5 * dt), &u, wheelbase);
    let k4 = derivative(&add(&s, &k3, dt), &u, wheelbase);
    let mut out: [f64; 4] =
        std::array::from_fn(|i| s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    out[3] = out[3].max(0.0);
    VehicleState::from_array(out)
}

/// The bicycle as a [`Dynamics`] implementation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bicycle {
    pub dt: f64,
    pub wheelbase: f64,
}

impl Dynamics for Bicycle {
    fn step(&self, x: &[f64; STATE_DIM], u: &[f64; CONTROL_DIM]) -> [f64; STATE_DIM] {
        bicycle_step(
            &VehicleState::from_array(*x),
            &ControlInput::from_array(*u),
            self.dt,
            self.wheelbase,
        )
        .to_array()
    }
}

/// Envelope of the random-walk excitation used to build training sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationConfig {
    pub dt: f64,
    pub wheelbase: f64,
    pub speed_max: f64,
    /// Initial positions are drawn from these boxes.
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub heading_range: [f64; 2],
    pub accel_range: [f64; 2],
    pub steer_max: f64,
    /// Random-walk step sizes per sample.
    pub accel_step: f64,
    pub steer_step: f64,
    /// Steering is additionally limited so that `v^2 tan(delta) / L` stays
    /// below this lateral acceleration.
    pub lateral_accel_max: f64,
    /// Transitions per episode before a fresh state is drawn.
    pub episode_len: usize,
}

impl Default for ExcitationConfig {
    fn default() -> Self {
        ExcitationConfig {
            dt: 0.1,
            wheelbase: DEFAULT_WHEELBASE,
            speed_max: 35.0,
            x_range: [-50.0, 650.0],
            y_range: [-8.0, 8.0],
            heading_range: [-0.6, 0.6],
            accel_range: [-6.0, 4.0],
            steer_max: 0.5,
            accel_step: 1.5,
            steer_step: 0.06,
            lateral_accel_max: 8.0,
            episode_len: 20,
        }
    }
}

/// Random-walk excitation of `(a, delta)` from states spread over the speed
/// and heading envelope. Deterministic for a given seed.
pub fn generate_training_data(cfg: &ExcitationConfig, n_samples: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_samples);
    let mut state = VehicleState::default();
    let mut u = ControlInput::default();
    let mut left = 0usize;
    let steer_cap = |v: f64| {
        let lat = (cfg.lateral_accel_max * cfg.wheelbase / (v * v).max(1e-9)).atan();
        lat.min(cfg.steer_max)
    };
    while out.len() < n_samples {
        if left == 0 {
            state = VehicleState::new(
                rng.gen_range(cfg.x_range[0]..=cfg.x_range[1]),
                rng.gen_range(cfg.y_range[0]..=cfg.y_range[1]),
                rng.gen_range(cfg.heading_range[0]..=cfg.heading_range[1]),
                rng.gen_range(0.0..=cfg.speed_max),
            );
            let cap = steer_cap(state.v);
            u = ControlInput::new(
                rng.gen_range(cfg.accel_range[0]..=cfg.accel_range[1]),
                rng.gen_range(-cap..=cap),
            );
            left = cfg.episode_len.max(1);
        } else {
            u.a = (u.a + rng.gen_range(-cfg.accel_step..=cfg.accel_step))
                .clamp(cfg.accel_range[0], cfg.accel_range[1]);
            let cap = steer_cap(state.v);
            u.delta = (u.delta + rng.gen_range(-cfg.steer_step..=cfg.steer_step)).clamp(-cap, cap);
        }
        // keep speeds inside the envelope by biasing acceleration at the edges
        if state.v > cfg.speed_max - 1.0 && u.a > 0.0 {
            u.a = -u.a;
        }
        let next = bicycle_step(&state, &u, cfg.dt, cfg.wheelbase);
        out.push(Sample {
            x: state.to_array(),
            u: u.to_array(),
            x_next: next.to_array(),
        });
        state = next;
        left -= 1;
        let outside = state.x < cfg.x_range[0] - 100.0
            || state.x > cfg.x_range[1] + 100.0
            || state.y.abs() > cfg.y_range[1].abs().max(cfg.y_range[0].abs()) + 10.0
            || state.phi < cfg.heading_range[0] - 0.5
            || state.phi > cfg.heading_range[1] + 0.5;
        if outside {
            left = 0;
        }
    }
    out
}
