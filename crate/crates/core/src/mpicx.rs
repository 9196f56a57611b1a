//! Receding-horizon inferential controller: cold or warm ensemble start,
//! forward filter bank, backward smoother bank, and the equal-weight smoothed
//! mean as the control decision.

use std::time::Instant;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{MpicError, Result};
use crate::ipf::{ipf_pass, FilterConfig, FilterParticle, IisSampler, UtParams};
use crate::ips::{ips_pass_with, SmoothHistory, SmootherConfig};
use crate::numerics::{Matrix, Vector};
use crate::state::{
    ControlInput, Dynamics, VehicleState, AUG_DIM, CONTROL_DIM, DU_BLOCK, MEAS_DIM, STATE_DIM, U_BLOCK, X_BLOCK,
};
use crate::vsys::{scenario_noise, BarrierParams, VehicleSystem};
use crate::world::{
    bicycle_step, box_distance, constraint_margins, margins_into, stage_cost, NominalControl, ObstacleSnapshot,
    PlanTrace, Scenario, TraceRow,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Planning horizon in steps; `None` takes the scenario's.
    pub horizon: Option<usize>,
    pub particles: usize,
    /// Diagonal of the initial control covariance; `None` uses the increment weights.
    pub sigma_u: Option<[f64; CONTROL_DIM]>,
    /// Diagonal of the initial increment covariance; `None` uses the increment weights.
    pub sigma_du: Option<[f64; CONTROL_DIM]>,
    /// Variance placed on the measured state so that covariances stay full rank.
    pub x_jitter: f64,
    /// Implicit-sampler variances for the state, control and increment blocks.
    pub sampler_sigma: [f64; 3],
    pub seed: u64,
    pub deterministic: bool,
    pub resample_threshold: f64,
    pub warm_start: bool,
    pub ut: UtParams,
    /// Covariance inflation; `None` takes the scenario's.
    pub inflation: Option<f64>,
    /// Barrier shape; `None` takes the scenario's.
    pub barrier: Option<BarrierParams>,
    pub parallel: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            horizon: None,
            particles: 10,
            sigma_u: None,
            sigma_du: None,
            x_jitter: 1e-8,
            sampler_sigma: [0.005, 0.1, 0.03],
            seed: 0,
            deterministic: false,
            resample_threshold: 0.5,
            warm_start: true,
            ut: UtParams::default(),
            inflation: None,
            barrier: None,
            parallel: true,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MpicError::InvalidConfig(m.into()));
        if self.particles == 0 {
            return bad("need at least one particle");
        }
        if self.horizon == Some(0) {
            return bad("horizon must be at least one step");
        }
        let pos = |v: &[f64]| v.iter().all(|x| *x > 0.0 && x.is_finite());
        if !self.sigma_u.map_or(true, |s| pos(&s)) || !self.sigma_du.map_or(true, |s| pos(&s)) {
            return bad("initial exploration covariances must be positive definite");
        }
        if !(self.x_jitter >= 0.0) || !pos(&self.sampler_sigma) {
            return bad("jitter must be non-negative and sampler variances positive");
        }
        if !(0.0..=1.0).contains(&self.resample_threshold) {
            return bad("resample threshold must lie in [0, 1]");
        }
        if let Some(l) = self.inflation {
            if !(l >= 1.0) {
                return bad("inflation must be at least 1");
            }
        }
        Ok(())
    }
}

/// Outcome of one planning step.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanStepResult {
    /// Control to apply, clamped to the bounds.
    pub control: ControlInput,
    /// Control block of the smoothed mean before clamping.
    pub raw_control: ControlInput,
    pub clamp_amount: f64,
    /// `|u_0 - (u_prev + du_0)|` of the smoothed mean.
    pub increment_discrepancy: f64,
    /// Equal-weight smoothed mean for steps `0..=H`.
    pub trajectory: Vec<[f64; AUG_DIM]>,
    pub wall_seconds: f64,
    pub ess: Vec<f64>,
    pub resamples: usize,
    /// Largest constraint margin along the planned mean trajectory.
    pub max_margin: f64,
    pub retried: bool,
}

/// Initial filtering ensemble. Cold: `[x; u_prev; 0]` with covariance
/// `diag(jitter, sigma_u, sigma_du)`. Warm: step 1 of the previous smoothed
/// ensemble with the state block replaced by the measurement.
pub fn init_ensemble(
    x_k: &VehicleState,
    u_prev: &ControlInput,
    n: usize,
    sigma_u: [f64; CONTROL_DIM],
    sigma_du: [f64; CONTROL_DIM],
    x_jitter: f64,
    warm: Option<&SmoothHistory>,
) -> Vec<FilterParticle> {
    let x = x_k.to_array();
    if let Some(prev) = warm.filter(|w| w.n_particles() == n && w.paths[0].len() > 1) {
        return prev
            .paths
            .iter()
            .map(|path| {
                let mut mean = path[1].mean.clone();
                let mut cov = path[1].cov.clone();
                mean.rows_mut(0, STATE_DIM).copy_from_slice(&x);
                for i in X_BLOCK {
                    cov.row_mut(i).fill(0.0);
                    cov.column_mut(i).fill(0.0);
                    cov[(i, i)] = x_jitter;
                }
                FilterParticle::new(mean, cov)
            })
            .collect();
    }
    let mut mean = Vector::zeros(AUG_DIM);
    mean.rows_mut(0, STATE_DIM).copy_from_slice(&x);
    mean.rows_mut(U_BLOCK.start, CONTROL_DIM).copy_from_slice(&u_prev.to_array());
    let mut diag = [x_jitter; AUG_DIM];
    diag[U_BLOCK].copy_from_slice(&sigma_u);
    diag[DU_BLOCK].copy_from_slice(&sigma_du);
    let cov = Matrix::from_diagonal(&Vector::from_column_slice(&diag));
    vec![FilterParticle::new(mean, cov); n]
}

fn clamp_control(u: [f64; CONTROL_DIM], u_prev: [f64; CONTROL_DIM], sc: &Scenario) -> [f64; CONTROL_DIM] {
    std::array::from_fn(|i| {
        let du = (u[i] - u_prev[i]).clamp(sc.du_min[i], sc.du_max[i]);
        (u_prev[i] + du).clamp(sc.u_min[i], sc.u_max[i])
    })
}

/// Single-owner controller holding the model, scenario and warm-start state.
pub struct Controller<D: Dynamics> {
    model: D,
    scenario: Scenario,
    cfg: ControllerConfig,
    warm: Option<SmoothHistory>,
}

impl<D: Dynamics> Controller<D> {
    pub fn new(model: D, scenario: Scenario, cfg: ControllerConfig) -> Result<Self> {
        cfg.validate()?;
        scenario.validate()?;
        Ok(Controller { model, scenario, cfg, warm: None })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn model(&self) -> &D {
        &self.model
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn horizon(&self) -> usize {
        self.cfg.horizon.unwrap_or(self.scenario.horizon)
    }

    /// Forgets the warm-start ensemble.
    pub fn reset(&mut self) {
        self.warm = None;
    }

    /// Nominal control `s_t` for a step whose previous control is `u_prev`.
    pub fn nominal(&self, u_prev: &ControlInput) -> [f64; CONTROL_DIM] {
        match self.scenario.nominal_control {
            NominalControl::Previous => u_prev.to_array(),
            NominalControl::Zero => [0.0; CONTROL_DIM],
        }
    }

    /// Plans at step `k` against the scenario's reference generator.
    pub fn plan_step(&mut self, k: usize, x_k: &VehicleState, u_prev: &ControlInput) -> Result<PlanStepResult> {
        let t_k = k as f64 * self.scenario.dt;
        let refs = self.scenario.reference_horizon(t_k, x_k.x, self.horizon());
        let s = self.nominal(u_prev);
        self.plan_with_refs(k, x_k, u_prev, &refs, s)
    }

    /// Plans at step `k` against explicit state references `r_0..r_H` and a
    /// constant nominal control. The horizon is `refs.len() - 1` and may
    /// differ from the configured one.
    pub fn plan_with_refs(
        &mut self,
        k: usize,
        x_k: &VehicleState,
        u_prev: &ControlInput,
        refs: &[[f64; STATE_DIM]],
        s: [f64; CONTROL_DIM],
    ) -> Result<PlanStepResult> {
        let start = Instant::now();
        if refs.is_empty() {
            return Err(MpicError::DimensionMismatch("no references".into()));
        }
        let h = refs.len() - 1;
        if !x_k.is_finite() {
            return Err(MpicError::InvalidConfig(format!("state at step {k} is not finite")));
        }
        let rbar: Vec<Vector> = refs
            .iter()
            .map(|r| {
                let mut v = Vector::zeros(MEAS_DIM);
                v.rows_mut(0, STATE_DIM).copy_from_slice(r);
                v.rows_mut(STATE_DIM, CONTROL_DIM).copy_from_slice(&s);
                v
            })
            .collect();
        let lambda = self.cfg.inflation.unwrap_or(self.scenario.inflation);
        let sampler = IisSampler::vehicle(self.cfg.sampler_sigma, self.cfg.deterministic, self.cfg.seed);
        let (smoothed, ess, resamples, retried) = match self.infer(k, x_k, u_prev, &rbar, &sampler, lambda, 0) {
            Ok((sm, ess, rs)) => (sm, ess, rs, false),
            Err(first) => {
                warn!("step {k}: planning failed ({first}); retrying with wider search");
                match self.infer(k, x_k, u_prev, &rbar, &sampler.scaled(2.0), 2.0 * lambda, 1) {
                    Ok((sm, ess, rs)) => (sm, ess, rs, true),
                    Err(e) => {
                        self.warm = None;
                        return Err(MpicError::PlanningFailed { step: k, source: Box::new(e) });
                    }
                }
            }
        };
        let trajectory: Vec<[f64; AUG_DIM]> = (0..=h)
            .map(|j| {
                let m = smoothed.mean(j);
                std::array::from_fn(|i| m[i])
            })
            .collect();
        let up = u_prev.to_array();
        let raw: [f64; CONTROL_DIM] = trajectory[0][U_BLOCK].try_into().unwrap();
        let du0: [f64; CONTROL_DIM] = trajectory[0][DU_BLOCK].try_into().unwrap();
        let applied = clamp_control(raw, up, &self.scenario);
        let clamp_amount = (0..CONTROL_DIM).map(|i| (raw[i] - applied[i]).powi(2)).sum::<f64>().sqrt();
        if clamp_amount > 0.0 {
            debug!("step {k}: clamped control by {clamp_amount:.3e}");
        }
        let increment_discrepancy = (0..CONTROL_DIM).map(|i| (raw[i] - up[i] - du0[i]).powi(2)).sum::<f64>().sqrt();
        let max_margin = self.max_margin(k, &trajectory)?;
        self.warm = if self.cfg.warm_start { Some(smoothed) } else { None };
        Ok(PlanStepResult {
            control: ControlInput::from_array(applied),
            raw_control: ControlInput::from_array(raw),
            clamp_amount,
            increment_discrepancy,
            trajectory,
            wall_seconds: start.elapsed().as_secs_f64(),
            ess,
            resamples,
            max_margin,
            retried,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn infer(
        &self,
        k: usize,
        x_k: &VehicleState,
        u_prev: &ControlInput,
        rbar: &[Vector],
        sampler: &IisSampler,
        lambda: f64,
        attempt: u64,
    ) -> Result<(SmoothHistory, Vec<f64>, usize)> {
        let h = rbar.len() - 1;
        let sc = &self.scenario;
        let t_k = k as f64 * sc.dt;
        let barrier = self.cfg.barrier.unwrap_or(sc.barrier);
        let noise = scenario_noise(sc, lambda)?;
        let sys = VehicleSystem::new(&self.model, sc, t_k, h, barrier, noise)?;
        let sigma_u = self.cfg.sigma_u.unwrap_or(sc.weights.q_du);
        let sigma_du = self.cfg.sigma_du.unwrap_or(sc.weights.q_du);
        let init = init_ensemble(
            x_k,
            u_prev,
            self.cfg.particles,
            sigma_u,
            sigma_du,
            self.cfg.x_jitter,
            self.warm.as_ref(),
        );
        let context = ((k as u64) << 1) | attempt;
        let fcfg = FilterConfig {
            ut: self.cfg.ut,
            resample_threshold: self.cfg.resample_threshold,
            initial_update: true,
            context,
            parallel: self.cfg.parallel,
        };
        let hist = ipf_pass(init, &sys, rbar, sampler, &fcfg)?;
        let scfg = SmootherConfig { context, parallel: self.cfg.parallel, ..Default::default() };
        let smoothed = ips_pass_with(&hist, sampler, &scfg)?;
        Ok((smoothed, hist.ess, hist.resample_steps.len()))
    }

    fn max_margin(&self, k: usize, traj: &[[f64; AUG_DIM]]) -> Result<f64> {
        let sc = &self.scenario;
        let mut g = vec![0.0; crate::world::constraint_count(sc)];
        let mut worst = f64::NEG_INFINITY;
        for (j, xb) in traj.iter().enumerate() {
            let snap = ObstacleSnapshot::at(sc, (k + j) as f64 * sc.dt)?;
            let x: [f64; STATE_DIM] = xb[X_BLOCK].try_into().unwrap();
            let u: [f64; CONTROL_DIM] = xb[U_BLOCK].try_into().unwrap();
            let du: [f64; CONTROL_DIM] = xb[DU_BLOCK].try_into().unwrap();
            margins_into(&x, &u, &du, sc, &snap, &mut g);
            worst = g.iter().copied().fold(worst, f64::max);
        }
        Ok(worst)
    }
}

/// Closed-loop result; on failure the rows logged before the failing step
/// are kept alongside the error.
#[derive(Debug)]
pub struct ClosedLoop {
    pub trace: PlanTrace,
    pub error: Option<MpicError>,
}

/// Smallest box gap between the ego vehicle and any obstacle at `t`.
pub fn min_obstacle_distance(x: &VehicleState, sc: &Scenario, t: f64) -> Result<f64> {
    let snap = ObstacleSnapshot::at(sc, t)?;
    Ok(snap
        .boxes
        .iter()
        .map(|(c, h)| box_distance([x.x, x.y], sc.ev_half_extents, *c, *h))
        .fold(f64::INFINITY, f64::min))
}

/// Runs the scenario with the bicycle as plant. Planning happens in road
/// coordinates; the plant evolves in the global frame.
pub fn run_closed_loop_partial<D: Dynamics>(ctrl: &mut Controller<D>) -> ClosedLoop {
    let mut trace = PlanTrace::default();
    let error = closed_loop_into(ctrl, &mut trace).err();
    ClosedLoop { trace, error }
}

pub fn run_closed_loop<D: Dynamics>(ctrl: &mut Controller<D>) -> Result<PlanTrace> {
    let out = run_closed_loop_partial(ctrl);
    match out.error {
        Some(e) => Err(e),
        None => Ok(out.trace),
    }
}

fn closed_loop_into<D: Dynamics>(ctrl: &mut Controller<D>, trace: &mut PlanTrace) -> Result<()> {
    ctrl.reset();
    let sc = ctrl.scenario().clone();
    let road = sc.road()?;
    let mut plant = road.from_frenet(&sc.ev0);
    let mut u_prev = ControlInput::default();
    for k in 0..sc.steps() {
        let t = k as f64 * sc.dt;
        let x = road.to_frenet(&plant)?;
        let res = ctrl.plan_step(k, &x, &u_prev)?;
        let u = res.control;
        let du = u.sub(u_prev);
        let r = sc.reference_horizon(t, x.x, 0)[0];
        let s = ctrl.nominal(&u_prev);
        trace.rows.push(TraceRow {
            t,
            state: x,
            control: u,
            increment: du,
            stage_cost: stage_cost(&x.to_array(), &u.to_array(), &du.to_array(), &r, &s, &sc.weights),
            margins: constraint_margins(&x.to_array(), &u.to_array(), &du.to_array(), &sc, t)?,
            min_ov_dist: min_obstacle_distance(&x, &sc, t)?,
            plan_seconds: res.wall_seconds,
            resamples: res.resamples,
            clamp_amount: res.clamp_amount,
        });
        plant = bicycle_step(&plant, &u, sc.dt, sc.wheelbase);
        u_prev = u;
        trace.final_state = Some(road.to_frenet(&plant)?);
    }
    Ok(())
}
