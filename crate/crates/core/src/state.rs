//! Vehicle state, control and the stacked augmented state layout.

use serde::{Deserialize, Serialize};

pub const STATE_DIM: usize = 4;
pub const CONTROL_DIM: usize = 2;
/// `[x; u; du]`.
pub const AUG_DIM: usize = STATE_DIM + 2 * CONTROL_DIM;
/// `[y_x; y_u; y_g]`.
pub const MEAS_DIM: usize = STATE_DIM + CONTROL_DIM + 1;

pub const X_BLOCK: std::ops::Range<usize> = 0..STATE_DIM;
pub const U_BLOCK: std::ops::Range<usize> = STATE_DIM..STATE_DIM + CONTROL_DIM;
pub const DU_BLOCK: std::ops::Range<usize> = STATE_DIM + CONTROL_DIM..AUG_DIM;

/// Vehicle state. In the planning frame `x` is arc length and `y` the
/// lateral offset from the road reference line.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub phi: f64,
    pub v: f64,
}

impl VehicleState {
    pub const fn new(x: f64, y: f64, phi: f64, v: f64) -> Self {
        VehicleState { x, y, phi, v }
    }

    pub fn to_array(self) -> [f64; STATE_DIM] {
        [self.x, self.y, self.phi, self.v]
    }

    pub fn from_array(a: [f64; STATE_DIM]) -> Self {
        VehicleState::new(a[0], a[1], a[2], a[3])
    }

    pub fn from_slice(a: &[f64]) -> Self {
        VehicleState::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Acceleration (m/s^2) and steering angle (rad). Also used for increments.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub a: f64,
    pub delta: f64,
}

pub type ControlIncrement = ControlInput;

impl ControlInput {
    pub const fn new(a: f64, delta: f64) -> Self {
        ControlInput { a, delta }
    }

    pub fn to_array(self) -> [f64; CONTROL_DIM] {
        [self.a, self.delta]
    }

    pub fn from_array(a: [f64; CONTROL_DIM]) -> Self {
        ControlInput::new(a[0], a[1])
    }

    pub fn from_slice(a: &[f64]) -> Self {
        ControlInput::new(a[0], a[1])
    }

    pub fn sub(self, other: ControlInput) -> ControlInput {
        ControlInput::new(self.a - other.a, self.delta - other.delta)
    }
}

/// Discrete-time state transition `x_{k+1} = f(x_k, u_k)`.
pub trait Dynamics: Send + Sync {
    fn step(&self, x: &[f64; STATE_DIM], u: &[f64; CONTROL_DIM]) -> [f64; STATE_DIM];

    /// Steps many states at once. Implementations may reorder arithmetic, so
    /// results can differ from [`Dynamics::step`] in the last bits.
    fn step_batch(&self, xs: &[[f64; STATE_DIM]], us: &[[f64; CONTROL_DIM]], out: &mut [[f64; STATE_DIM]]) {
        for ((x, u), o) in xs.iter().zip(us).zip(out.iter_mut()) {
            *o = self.step(x, u);
        }
    }
}

/// Linear test double `x_{k+1} = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics {
    pub a: [[f64; STATE_DIM]; STATE_DIM],
    pub b: [[f64; CONTROL_DIM]; STATE_DIM],
}

impl LinearDynamics {
    /// Two decoupled double integrators `[p_x, p_y, v_x, v_y]` driven by
    /// `[a_x, a_y]`, discretised exactly with sample time `dt`.
    pub fn double_integrator(dt: f64) -> Self {
        let h = 0.5 * dt * dt;
        LinearDynamics {
            a: [
                [1.0, 0.0, dt, 0.0],
                [0.0, 1.0, 0.0, dt],
                [0.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
            ],
            b: [[h, 0.0], [0.0, h], [dt, 0.0], [0.0, dt]],
        }
    }
}

impl Dynamics for LinearDynamics {
    fn step(&self, x: &[f64; STATE_DIM], u: &[f64; CONTROL_DIM]) -> [f64; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..STATE_DIM).map(|j| self.a[i][j] * x[j]).sum::<f64>()
                + (0..CONTROL_DIM).map(|j| self.b[i][j] * u[j]).sum::<f64>();
        }
        out
    }
}
