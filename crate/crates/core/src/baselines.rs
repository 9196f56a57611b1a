//! Reference planners for verification: random shooting and an exhaustive
//! grid over control increments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MpicError, Result};
use crate::numerics::{gaussian_logpdf, Matrix, Vector};
use crate::state::{Dynamics, AUG_DIM, CONTROL_DIM, MEAS_DIM, STATE_DIM};
use crate::vsys::{scenario_noise, BarrierParams, VehicleSystem, VirtualSystem};
use crate::world::{stage_cost, Scenario};

/// Largest grid [`grid_oracle`] will enumerate.
pub const GRID_LIMIT: usize = 1_000_000;

/// A horizon problem from a measured state: references `r_0..r_H`, constant
/// nominal control and the previously applied control.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonProblem<'a> {
    pub scenario: &'a Scenario,
    pub x0: [f64; STATE_DIM],
    pub u_prev: [f64; CONTROL_DIM],
    pub t0: f64,
    pub refs: Vec<[f64; STATE_DIM]>,
    pub nominal: [f64; CONTROL_DIM],
    pub barrier: BarrierParams,
}

impl HorizonProblem<'_> {
    pub fn horizon(&self) -> usize {
        self.refs.len() - 1
    }
}

/// Objective of the incremental MPC over controls `u_0..u_H`:
/// stage costs at every step plus `y_g^2 / q_eps` for the barrier sum.
pub fn horizon_cost<D: Dynamics + ?Sized>(
    sys: &VehicleSystem<'_, D>,
    p: &HorizonProblem<'_>,
    controls: &[[f64; CONTROL_DIM]],
) -> f64 {
    let w = &p.scenario.weights;
    let mut x = p.x0;
    let mut prev = p.u_prev;
    let mut cost = 0.0;
    let mut xb = [0.0; AUG_DIM];
    let mut y = [0.0; MEAS_DIM];
    for (j, u) in controls.iter().enumerate() {
        if j > 0 {
            x = sys.model.step(&x, &prev);
        }
        let du = [u[0] - prev[0], u[1] - prev[1]];
        xb[..STATE_DIM].copy_from_slice(&x);
        xb[STATE_DIM..STATE_DIM + CONTROL_DIM].copy_from_slice(u);
        xb[STATE_DIM + CONTROL_DIM..].copy_from_slice(&du);
        sys.h(j, &xb, &mut y);
        cost += stage_cost(&x, u, &du, &p.refs[j], &p.nominal, w) + y[MEAS_DIM - 1].powi(2) / w.q_eps;
        prev = *u;
    }
    cost
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShootingConfig {
    pub candidates: usize,
    pub seed: u64,
    /// Make candidate 0 the sequence that holds the previous control.
    pub include_zero: bool,
}

impl Default for ShootingConfig {
    fn default() -> Self {
        ShootingConfig { candidates: 1000, seed: 0, include_zero: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShootingResult {
    pub controls: Vec<[f64; CONTROL_DIM]>,
    pub cost: f64,
    /// Which candidate won.
    pub index: usize,
}

fn sample_sequence(p: &HorizonProblem<'_>, rng: &mut ChaCha8Rng) -> Vec<[f64; CONTROL_DIM]> {
    let sc = p.scenario;
    let mut prev = p.u_prev;
    (0..=p.horizon())
        .map(|_| {
            let u = std::array::from_fn(|i| {
                let du = rng.gen_range(sc.du_min[i]..=sc.du_max[i]);
                (prev[i] + du).clamp(sc.u_min[i], sc.u_max[i])
            });
            prev = u;
            u
        })
        .collect()
}

/// Samples increment-feasible control sequences, rolls each through the
/// model and keeps the cheapest under [`horizon_cost`].
pub fn random_shooting_plan<D: Dynamics + ?Sized>(
    model: &D,
    p: &HorizonProblem<'_>,
    cfg: &ShootingConfig,
) -> Result<ShootingResult> {
    if cfg.candidates == 0 {
        return Err(MpicError::InvalidConfig("random shooting needs at least one candidate".into()));
    }
    let noise = scenario_noise(p.scenario, 1.0)?;
    let sys = VehicleSystem::new(model, p.scenario, p.t0, p.horizon(), p.barrier, noise)?;
    let best = (0..cfg.candidates)
        .into_par_iter()
        .map(|c| {
            let controls = if c == 0 && cfg.include_zero {
                vec![p.u_prev; p.horizon() + 1]
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(c as u64);
                sample_sequence(p, &mut rng)
            };
            let cost = horizon_cost(&sys, p, &controls);
            (cost, c, controls)
        })
        .reduce_with(|a, b| if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a })
        .unwrap();
    Ok(ShootingResult { controls: best.2, cost: best.0, index: best.1 })
}

/// Moving-horizon cost and Gaussian log-posterior tables over a grid of
/// increments `w_0..w_{H-1}`, flattened with the last component fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub resolution: usize,
    pub horizon: usize,
    pub mhe: Vec<f64>,
    pub log_posterior: Vec<f64>,
    pub argmin_mhe: usize,
    pub argmax_map: usize,
}

impl GridResult {
    /// Increments at a flattened grid index.
    pub fn increments(&self, index: usize, sc: &Scenario) -> Vec<[f64; CONTROL_DIM]> {
        grid_point(index, self.resolution, self.horizon, sc)
    }

    /// `max - min` of `mhe + 2 lambda log_posterior`, zero when the tables
    /// differ by a constant.
    pub fn offset_spread(&self, lambda: f64) -> f64 {
        let d = self.mhe.iter().zip(&self.log_posterior).map(|(m, l)| m + 2.0 * lambda * l);
        let (lo, hi) = d.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        hi - lo
    }
}

fn axis(res: usize, lo: f64, hi: f64, k: usize) -> f64 {
    if res == 1 {
        0.5 * (lo + hi)
    } else {
        lo + (hi - lo) * k as f64 / (res - 1) as f64
    }
}

fn grid_point(mut index: usize, res: usize, h: usize, sc: &Scenario) -> Vec<[f64; CONTROL_DIM]> {
    let mut out = vec![[0.0; CONTROL_DIM]; h];
    for j in (0..h).rev() {
        for i in (0..CONTROL_DIM).rev() {
            out[j][i] = axis(res, sc.du_min[i], sc.du_max[i], index % res);
            index /= res;
        }
    }
    out
}

struct Evaluator<'a, D: Dynamics + ?Sized> {
    p: &'a HorizonProblem<'a>,
    sys: VehicleSystem<'a, D>,
    q_du: Matrix,
}

impl<'a, D: Dynamics + ?Sized> Evaluator<'a, D> {
    fn new(model: &'a D, p: &'a HorizonProblem<'a>, lambda: f64) -> Result<Self> {
        let sc = p.scenario;
        let noise = scenario_noise(sc, lambda)?;
        let q_du = Matrix::from_diagonal(&Vector::from_column_slice(&sc.weights.q_du)) * lambda;
        let sys = VehicleSystem::new(model, sc, p.t0, p.horizon(), p.barrier, noise)?;
        Ok(Evaluator { p, sys, q_du })
    }

    /// `(MHE cost, log-posterior)` of the increment sequence `incs`.
    fn at(&self, incs: &[[f64; CONTROL_DIM]]) -> Result<(f64, f64)> {
        let (p, w) = (self.p, &self.p.scenario.weights);
        let mut x = p.x0;
        let mut u = p.u_prev;
        let (mut mhe, mut lp) = (0.0, 0.0);
        let mut xb = [0.0; AUG_DIM];
        let mut y = [0.0; MEAS_DIM];
        for (j, wj) in incs.iter().enumerate() {
            x = self.sys.model.step(&x, &u);
            u = [u[0] + wj[0], u[1] + wj[1]];
            xb[..STATE_DIM].copy_from_slice(&x);
            xb[STATE_DIM..STATE_DIM + CONTROL_DIM].copy_from_slice(&u);
            xb[STATE_DIM + CONTROL_DIM..].copy_from_slice(wj);
            self.sys.h(j + 1, &xb, &mut y);
            let r = &p.refs[j + 1];
            for i in 0..STATE_DIM {
                mhe += (r[i] - y[i]).powi(2) / w.r[i];
            }
            for i in 0..CONTROL_DIM {
                mhe += (p.nominal[i] - y[STATE_DIM + i]).powi(2) / w.q_u[i];
                mhe += wj[i].powi(2) / w.q_du[i];
            }
            mhe += y[MEAS_DIM - 1].powi(2) / w.q_eps;
            let mut rbar = Vector::zeros(MEAS_DIM);
            rbar.rows_mut(0, STATE_DIM).copy_from_slice(r);
            rbar.rows_mut(STATE_DIM, CONTROL_DIM).copy_from_slice(&p.nominal);
            lp += gaussian_logpdf(&rbar, &Vector::from_column_slice(&y), self.sys.r())?;
            lp += gaussian_logpdf(&Vector::from_column_slice(wj), &Vector::zeros(CONTROL_DIM), &self.q_du)?;
        }
        Ok((mhe, lp))
    }
}

/// Moving-horizon cost and log-posterior of one increment sequence
/// `w_0..w_{H-1}`, as tabulated by [`grid_oracle`].
pub fn mhe_and_log_posterior<D: Dynamics + ?Sized>(
    model: &D,
    p: &HorizonProblem<'_>,
    increments: &[[f64; CONTROL_DIM]],
    lambda: f64,
) -> Result<(f64, f64)> {
    if increments.len() != p.horizon() {
        return Err(MpicError::DimensionMismatch(format!(
            "{} increments for horizon {}",
            increments.len(),
            p.horizon()
        )));
    }
    Evaluator::new(model, p, lambda)?.at(increments)
}

/// Exhaustive evaluation of the moving-horizon estimation cost and of the
/// Gaussian log-posterior of the virtual system, with the planning state
/// `[x0; u_prev; 0]` known exactly and measurements `[r_j; s; 0]` at
/// `j = 1..H`. Each increment component is gridded uniformly over its bounds.
pub fn grid_oracle<D: Dynamics + ?Sized>(
    model: &D,
    p: &HorizonProblem<'_>,
    resolution: usize,
    lambda: f64,
) -> Result<GridResult> {
    let h = p.horizon();
    let dims = (h * CONTROL_DIM) as u32;
    if resolution == 0 || h == 0 {
        return Err(MpicError::InvalidConfig("grid needs a positive resolution and horizon".into()));
    }
    let points = (resolution as u128).saturating_pow(dims);
    if points > GRID_LIMIT as u128 {
        return Err(MpicError::GridTooLarge { points, limit: GRID_LIMIT as u128 });
    }
    let points = points as usize;
    let eval = Evaluator::new(model, p, lambda)?;
    let rows: Vec<Result<(f64, f64)>> = (0..points)
        .into_par_iter()
        .map(|idx| eval.at(&grid_point(idx, resolution, h, p.scenario)))
        .collect();
    let mut mhe = Vec::with_capacity(points);
    let mut log_posterior = Vec::with_capacity(points);
    for r in rows {
        let (m, l) = r?;
        mhe.push(m);
        log_posterior.push(l);
    }
    let argmin_mhe = (0..points).min_by(|&a, &b| mhe[a].total_cmp(&mhe[b])).unwrap();
    let argmax_map = (0..points).max_by(|&a, &b| log_posterior[a].total_cmp(&log_posterior[b]).then(b.cmp(&a))).unwrap();
    Ok(GridResult {
        resolution,
        horizon: h,
        mhe,
        log_posterior,
        argmin_mhe,
        argmax_map,
    })
}
