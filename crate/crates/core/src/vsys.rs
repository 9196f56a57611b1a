//! The augmented stochastic system whose smoothing posterior encodes the
//! receding-horizon control problem.
//!
//! State `[x; u; du]` (8), measurement `[y_x; y_u; y_g]` (7). The control
//! block integrates the increments, the increment block is pure process
//! noise, and `y_g` sums a softplus barrier over all driving constraints.

use serde::{Deserialize, Serialize};

use crate::error::{MpicError, Result};
use crate::numerics::{block_diag, Matrix, Vector};
use crate::state::{Dynamics, AUG_DIM, CONTROL_DIM, DU_BLOCK, MEAS_DIM, STATE_DIM, U_BLOCK, X_BLOCK};
use crate::world::{constraint_count, margins_into, ObstacleSnapshot, Scenario};

/// Shape of the barrier `psi(g) = ln(1 + exp(b g)) / a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierParams {
    pub a: f64,
    pub b: f64,
}

impl Default for BarrierParams {
    fn default() -> Self {
        BarrierParams { a: 1.0, b: 8.0 }
    }
}

impl BarrierParams {
    pub fn validate(&self) -> Result<()> {
        if self.a > 0.0 && self.b > 0.0 && self.a.is_finite() && self.b.is_finite() {
            Ok(())
        } else {
            Err(MpicError::InvalidConfig(format!("barrier parameters must be positive: {self:?}")))
        }
    }

    #[inline]
    pub fn psi(&self, g: f64) -> f64 {
        let z = self.b * g;
        if z > 30.0 {
            z / self.a
        } else {
            z.exp().ln_1p() / self.a
        }
    }
}

/// Noise covariances of the virtual system, already scaled by `lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub lambda: f64,
    pub q_bar: Matrix,
    pub r_bar: Matrix,
}

fn check_spd(name: &str, m: &Matrix) -> Result<()> {
    if !m.is_square() || m.iter().any(|v| !v.is_finite()) {
        return Err(MpicError::NotSpd(format!("{name} is not a finite square matrix")));
    }
    let asym = (m - m.transpose()).amax();
    if asym > 1e-10 * (1.0 + m.amax()) {
        return Err(MpicError::NotSpd(format!("{name} is not symmetric")));
    }
    if m.clone().cholesky().is_none() {
        return Err(MpicError::NotSpd(format!("{name} is not positive definite")));
    }
    Ok(())
}

/// Builds `lambda * Qbar` with blocks `[[0,0,0],[0,Qdu,Qdu],[0,Qdu,Qdu]]`
/// and `lambda * Rbar = lambda * diag(R, Qu, Qeps)`.
pub fn assemble_noise(q_du: &Matrix, r: &Matrix, q_u: &Matrix, q_eps: f64, lambda: f64) -> Result<NoiseModel> {
    check_spd("Q_du", q_du)?;
    check_spd("R", r)?;
    check_spd("Q_u", q_u)?;
    if !(q_eps > 0.0 && q_eps.is_finite()) {
        return Err(MpicError::NotSpd(format!("Q_eps must be positive, got {q_eps}")));
    }
    if !(lambda >= 1.0 && lambda.is_finite()) {
        return Err(MpicError::InvalidConfig(format!("inflation must be >= 1, got {lambda}")));
    }
    let nc = q_du.nrows();
    let nx = r.nrows();
    if q_u.nrows() != nc {
        return Err(MpicError::DimensionMismatch("Q_u and Q_du differ in size".into()));
    }
    let n = nx + 2 * nc;
    let mut q_bar = Matrix::zeros(n, n);
    for (ro, co) in [(nx, nx), (nx, nx + nc), (nx + nc, nx), (nx + nc, nx + nc)] {
        q_bar.view_mut((ro, co), (nc, nc)).copy_from(q_du);
    }
    let eps = Matrix::from_element(1, 1, q_eps);
    let r_bar = block_diag(&[r, q_u, &eps]);
    Ok(NoiseModel { lambda, q_bar: q_bar * lambda, r_bar: r_bar * lambda })
}

/// Interface the particle filter and smoother run against. Step `j` of a
/// horizon is the `j`-th sample after the planning instant.
pub trait VirtualSystem: Sync {
    fn state_dim(&self) -> usize;
    fn meas_dim(&self) -> usize;
    /// Deterministic transition from step `j - 1` to step `j`.
    fn f(&self, j: usize, x: &[f64], out: &mut [f64]);
    /// [`VirtualSystem::f`] applied to every column of `xs`.
    fn f_batch(&self, j: usize, xs: &Matrix, out: &mut Matrix) {
        let mut buf = vec![0.0; out.nrows()];
        for k in 0..xs.ncols() {
            self.f(j, xs.column(k).as_slice(), &mut buf);
            out.column_mut(k).copy_from_slice(&buf);
        }
    }
    /// Measurement function at step `j`.
    fn h(&self, j: usize, x: &[f64], out: &mut [f64]);
    fn q(&self) -> &Matrix;
    fn r(&self) -> &Matrix;
}

/// Affine-Gaussian test double `x' = A x + a`, `y = C x + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianSystem {
    pub a: Matrix,
    pub a_offset: Vector,
    pub c: Matrix,
    pub c_offset: Vector,
    pub q: Matrix,
    pub r: Matrix,
}

impl VirtualSystem for LinearGaussianSystem {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn meas_dim(&self) -> usize {
        self.c.nrows()
    }

    fn f(&self, _j: usize, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.a_offset[i] + (0..x.len()).map(|k| self.a[(i, k)] * x[k]).sum::<f64>();
        }
    }

    fn h(&self, _j: usize, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.c_offset[i] + (0..x.len()).map(|k| self.c[(i, k)] * x[k]).sum::<f64>();
        }
    }

    fn q(&self) -> &Matrix {
        &self.q
    }

    fn r(&self) -> &Matrix {
        &self.r
    }
}

/// `fbar(xbar) = [f(x, u); u; 0]`.
pub fn fbar<D: Dynamics + ?Sized>(xbar: &[f64; AUG_DIM], model: &D) -> [f64; AUG_DIM] {
    let x: [f64; STATE_DIM] = xbar[X_BLOCK].try_into().unwrap();
    let u: [f64; CONTROL_DIM] = xbar[U_BLOCK].try_into().unwrap();
    let next = model.step(&x, &u);
    let mut out = [0.0; AUG_DIM];
    out[X_BLOCK].copy_from_slice(&next);
    out[U_BLOCK].copy_from_slice(&u);
    out
}

/// `hbar(xbar) = [x; u; sum_j psi(g_j(x, u, du))]` at scenario time `t`.
pub fn hbar(xbar: &[f64; AUG_DIM], sc: &Scenario, t: f64, barrier: &BarrierParams) -> Result<[f64; MEAS_DIM]> {
    let snap = ObstacleSnapshot::at(sc, t)?;
    let mut g = vec![0.0; constraint_count(sc)];
    let mut out = [0.0; MEAS_DIM];
    hbar_with(xbar, sc, &snap, barrier, &mut g, &mut out);
    Ok(out)
}

fn hbar_with(
    xbar: &[f64],
    sc: &Scenario,
    snap: &ObstacleSnapshot,
    barrier: &BarrierParams,
    g: &mut [f64],
    out: &mut [f64],
) {
    let x: [f64; STATE_DIM] = xbar[X_BLOCK].try_into().unwrap();
    let u: [f64; CONTROL_DIM] = xbar[U_BLOCK].try_into().unwrap();
    let du: [f64; CONTROL_DIM] = xbar[DU_BLOCK].try_into().unwrap();
    margins_into(&x, &u, &du, sc, snap, g);
    out[..STATE_DIM + CONTROL_DIM].copy_from_slice(&xbar[..STATE_DIM + CONTROL_DIM]);
    out[MEAS_DIM - 1] = g.iter().map(|&v| barrier.psi(v)).sum();
}

/// Noise model from the scenario's diagonal weights.
pub fn scenario_noise(sc: &Scenario, lambda: f64) -> Result<NoiseModel> {
    let w = &sc.weights;
    assemble_noise(
        &Matrix::from_diagonal(&Vector::from_column_slice(&w.q_du)),
        &Matrix::from_diagonal(&Vector::from_column_slice(&w.r)),
        &Matrix::from_diagonal(&Vector::from_column_slice(&w.q_u)),
        w.q_eps,
        lambda,
    )
}

/// The vehicle virtual system over one planning horizon starting at `t0`.
pub struct VehicleSystem<'a, D: Dynamics + ?Sized> {
    pub model: &'a D,
    pub scenario: &'a Scenario,
    pub barrier: BarrierParams,
    pub noise: NoiseModel,
    snapshots: Vec<ObstacleSnapshot>,
    n_constraints: usize,
}

impl<'a, D: Dynamics + ?Sized> VehicleSystem<'a, D> {
    /// Precomputes obstacle positions for steps `0..=h`.
    pub fn new(
        model: &'a D,
        scenario: &'a Scenario,
        t0: f64,
        h: usize,
        barrier: BarrierParams,
        noise: NoiseModel,
    ) -> Result<Self> {
        barrier.validate()?;
        let snapshots = (0..=h)
            .map(|j| ObstacleSnapshot::at(scenario, t0 + j as f64 * scenario.dt))
            .collect::<Result<Vec<_>>>()?;
        Ok(VehicleSystem {
            model,
            scenario,
            barrier,
            noise,
            snapshots,
            n_constraints: constraint_count(scenario),
        })
    }

    pub fn horizon(&self) -> usize {
        self.snapshots.len() - 1
    }

    pub fn snapshot(&self, j: usize) -> &ObstacleSnapshot {
        &self.snapshots[j]
    }
}

impl<D: Dynamics + ?Sized> VirtualSystem for VehicleSystem<'_, D> {
    fn state_dim(&self) -> usize {
        AUG_DIM
    }

    fn meas_dim(&self) -> usize {
        MEAS_DIM
    }

    fn f(&self, _j: usize, x: &[f64], out: &mut [f64]) {
        let xb: [f64; AUG_DIM] = x.try_into().unwrap();
        out.copy_from_slice(&fbar(&xb, self.model));
    }

    fn f_batch(&self, _j: usize, xs: &Matrix, out: &mut Matrix) {
        let k = xs.ncols();
        let x: Vec<[f64; STATE_DIM]> = (0..k).map(|c| std::array::from_fn(|i| xs[(i, c)])).collect();
        let u: Vec<[f64; CONTROL_DIM]> = (0..k).map(|c| std::array::from_fn(|i| xs[(STATE_DIM + i, c)])).collect();
        let mut next = vec![[0.0; STATE_DIM]; k];
        self.model.step_batch(&x, &u, &mut next);
        out.fill(0.0);
        for c in 0..k {
            for i in 0..STATE_DIM {
                out[(i, c)] = next[c][i];
            }
            for i in 0..CONTROL_DIM {
                out[(STATE_DIM + i, c)] = u[c][i];
            }
        }
    }

    fn h(&self, j: usize, x: &[f64], out: &mut [f64]) {
        let mut g = [0.0; 32];
        let mut g_vec;
        let g: &mut [f64] = if self.n_constraints <= g.len() {
            &mut g[..self.n_constraints]
        } else {
            g_vec = vec![0.0; self.n_constraints];
            &mut g_vec
        };
        hbar_with(x, self.scenario, &self.snapshots[j], &self.barrier, g, out);
    }

    fn q(&self) -> &Matrix {
        &self.noise.q_bar
    }

    fn r(&self) -> &Matrix {
        &self.noise.r_bar
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nss::{Activation, Layer, NssModel, Scheme};
    use crate::state::LinearDynamics;
    use crate::world::OvTrack;

    fn zero_model() -> NssModel {
        NssModel::from_layers(
            vec![Layer::zeros(6, 8, Activation::Tanh), Layer::zeros(8, 4, Activation::Identity)],
            0.1,
            Scheme::Euler,
        )
        .unwrap()
    }

    #[test]
    fn fbar_structure() {
        let xb = [1.0, 2.0, 0.1, 9.0, 0.5, -0.2, 0.3, 0.01];
        let out = fbar(&xb, &zero_model());
        assert_eq!(out, [1.0, 2.0, 0.1, 9.0, 0.5, -0.2, 0.0, 0.0]);
        let m = NssModel::new_random(&[6, 16, 4], 0.1, Scheme::Rk4, 4).unwrap();
        let out = fbar(&xb, &m);
        let direct = m.step_checked(&[1.0, 2.0, 0.1, 9.0], &[0.5, -0.2]).unwrap();
        for i in 0..4 {
            assert!((out[i] - direct[i]).abs() <= 1e-12);
        }
        assert_eq!(&out[4..6], &[0.5, -0.2]);
        let lin = LinearDynamics::double_integrator(0.1);
        assert_eq!(&fbar(&xb, &lin)[4..], &[0.5, -0.2, 0.0, 0.0]);
    }

    #[test]
    fn softplus_examples() {
        let b1 = BarrierParams { a: 1.0, b: 1.0 };
        assert!((b1.psi(0.0) - 2f64.ln()).abs() < 1e-15);
        let b5 = BarrierParams { a: 1.0, b: 5.0 };
        assert!(b5.psi(-20.0) <= 1e-40);
        let direct = (1.0 + (10.0f64).exp()).ln();
        assert!((b5.psi(2.0) - direct).abs() < 1e-12);
        assert!((b5.psi(2.0) - 10.0000454).abs() < 1e-7);
        assert_eq!(b5.psi(100.0), 500.0);
        // continuity across the branch switch
        let z = 30.0 / 5.0;
        assert!((b5.psi(z + 1e-12) - b5.psi(z - 1e-12)).abs() < 1e-10);
    }

    #[test]
    fn hbar_feasible_and_monotone() {
        let mut sc = Scenario::overtaking();
        let end = sc.duration + sc.horizon as f64 * sc.dt + 1.0;
        sc.ovs = vec![OvTrack::from_profile(300.0, -1.8, 0.0, &[], sc.dt, end, [2.4, 1.0])];
        sc.du_min = [-3.0, -1.0];
        sc.du_max = [3.0, 1.0];
        let xb = [50.0, 0.0, 0.0, 20.0, 0.0, 0.0, 0.0, 0.0];
        let deep = hbar(&xb, &sc, 0.0, &BarrierParams { a: 1.0, b: 20.0 }).unwrap();
        assert_eq!(&deep[..6], &xb[..6]);
        assert!(deep[6] < 1e-3, "{}", deep[6]);
        let b = BarrierParams::default();
        let mut prev = f64::NEG_INFINITY;
        for k in 0..50 {
            let mut x = xb;
            x[1] = -1.0 - 0.05 * k as f64; // approaching the lower boundary
            let y = hbar(&x, &sc, 0.0, &b).unwrap()[6];
            assert!(y >= prev);
            prev = y;
        }
    }

    #[test]
    fn noise_structure() {
        let q = Matrix::identity(2, 2);
        let r = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let qu = Matrix::from_diagonal(&Vector::from_vec(vec![0.5, 0.25]));
        let n1 = assemble_noise(&q, &r, &qu, 0.01, 1.0).unwrap();
        for (ro, co) in [(4, 4), (4, 6), (6, 4), (6, 6)] {
            assert_eq!(n1.q_bar.view((ro, co), (2, 2)), q);
        }
        assert_eq!(n1.q_bar.view((0, 0), (4, 8)).amax(), 0.0);
        assert_eq!(n1.q_bar.view((0, 0), (8, 4)).amax(), 0.0);
        let n10 = assemble_noise(&q, &r, &qu, 0.01, 10.0).unwrap();
        assert_eq!(n10.q_bar, &n1.q_bar * 10.0);
        assert_eq!(n10.r_bar, &n1.r_bar * 10.0);
        let det = n10.r_bar.determinant();
        let expected = 10f64.powi(7) * 24.0 * 0.125 * 0.01;
        assert!((det - expected).abs() <= 1e-9 * expected);
        let bad = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(assemble_noise(&bad, &r, &qu, 0.01, 1.0), Err(MpicError::NotSpd(_))));
    }
}
