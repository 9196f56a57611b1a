//! Random shooting and the exhaustive grid against the controller.

mod common;

use common::*;
use mpic_core::baselines::{grid_oracle, mhe_and_log_posterior, random_shooting_plan, HorizonProblem, ShootingConfig};
use mpic_core::mpicx::{Controller, ControllerConfig};
use mpic_core::nss::{NssModel, Scheme};
use mpic_core::state::{ControlInput, Dynamics, LinearDynamics, VehicleState};
use mpic_core::world::{stage_cost, Scenario};

fn bounded_lq(steps: usize, horizon: usize) -> Scenario {
    let mut sc = lq_scenario(steps, horizon);
    sc.u_min = [-5.0; 2];
    sc.u_max = [5.0; 2];
    sc.du_min = [-2.0; 2];
    sc.du_max = [2.0; 2];
    sc
}

fn problem(sc: &Scenario, x0: [f64; 4], u_prev: [f64; 2], h: usize) -> HorizonProblem<'_> {
    HorizonProblem {
        scenario: sc,
        x0,
        u_prev,
        t0: 0.0,
        refs: vec![[0.0; 4]; h + 1],
        nominal: [0.0; 2],
        barrier: sc.barrier,
    }
}

fn closed_loop_cost(sc: &Scenario, x0: [f64; 4], mut plan: impl FnMut(usize, [f64; 4], [f64; 2]) -> [f64; 2]) -> f64 {
    let plant = LinearDynamics::double_integrator(sc.dt);
    let (mut x, mut u_prev, mut cost) = (x0, [0.0; 2], 0.0);
    for k in 0..sc.steps() {
        let u = plan(k, x, u_prev);
        let du = [u[0] - u_prev[0], u[1] - u_prev[1]];
        cost += stage_cost(&x, &u, &du, &[0.0; 4], &[0.0; 2], &sc.weights);
        x = plant.step(&x, &u);
        u_prev = u;
    }
    cost
}

#[test]
fn controller_beats_shooting_with_a_hundred_times_the_samples() {
    let (steps, h, n) = (30, 10, 10);
    let sc = bounded_lq(steps, h);
    let x0 = [4.0, -3.0, 1.0, 0.5];
    let model = LinearDynamics::double_integrator(sc.dt);
    for seed in 0..5 {
        let cfg = ControllerConfig { particles: n, seed, ..Default::default() };
        let mut ctrl = Controller::new(model.clone(), sc.clone(), cfg).unwrap();
        let refs = vec![[0.0; 4]; h + 1];
        let mpic = closed_loop_cost(&sc, x0, |k, x, u| {
            ctrl.plan_with_refs(k, &VehicleState::from_array(x), &ControlInput::from_array(u), &refs, [0.0; 2])
                .unwrap()
                .control
                .to_array()
        });
        let shoot_cfg = ShootingConfig { candidates: 100 * n, seed, include_zero: false };
        let shooting = closed_loop_cost(&sc, x0, |k, x, u| {
            let cfg = ShootingConfig { seed: shoot_cfg.seed * 1000 + k as u64, ..shoot_cfg.clone() };
            random_shooting_plan(&model, &problem(&sc, x, u, h), &cfg).unwrap().controls[0]
        });
        assert!(mpic <= shooting, "seed {seed}: controller {mpic} vs shooting {shooting}");
    }
}

fn barrier_problem(sc: &Scenario, h: usize) -> HorizonProblem<'_> {
    let x0 = [33.0, -1.0, 0.05, 16.0];
    HorizonProblem {
        refs: sc.reference_horizon(0.0, x0[0], h),
        scenario: sc,
        x0,
        u_prev: [-0.5, 0.02],
        t0: 0.0,
        nominal: [-0.5, 0.02],
        barrier: sc.barrier,
    }
}

#[test]
fn inflation_leaves_the_map_optimum_unchanged() {
    let sc = Scenario::overtaking();
    let model = NssModel::new_random(&[6, 12, 4], sc.dt, Scheme::Euler, 5).unwrap();
    let p = barrier_problem(&sc, 1);
    let best: Vec<usize> = [1.0, 3.0, 10.0, 100.0]
        .iter()
        .map(|&l| grid_oracle(&model, &p, 41, l).unwrap().argmax_map)
        .collect();
    assert!(best.iter().all(|b| *b == best[0]), "{best:?}");
}

#[test]
fn tables_match_pointwise_evaluation() {
    let sc = Scenario::overtaking();
    let model = NssModel::new_random(&[6, 12, 4], sc.dt, Scheme::Euler, 6).unwrap();
    let p = barrier_problem(&sc, 2);
    let g = grid_oracle(&model, &p, 5, 2.0).unwrap();
    for idx in [0, 17, 312, 624] {
        let (m, l) = mhe_and_log_posterior(&model, &p, &g.increments(idx, &sc), 2.0).unwrap();
        assert_eq!(m, g.mhe[idx]);
        assert_eq!(l, g.log_posterior[idx]);
    }
}

#[test]
fn grid_optimum_bounds_the_controller_plan() {
    // The grid fixes the first control; feed it the controller's applied
    // control so that the controller's remaining plan is a grid candidate.
    let h = 2;
    let sc = bounded_lq(5, h);
    let model = LinearDynamics::double_integrator(sc.dt);
    let x0 = [1.0, -0.5, 0.5, 0.2];
    let cfg = ControllerConfig { particles: 1, deterministic: true, ..Default::default() };
    let mut ctrl = Controller::new(model.clone(), sc.clone(), cfg).unwrap();
    let refs = vec![[0.0; 4]; h + 1];
    let res = ctrl
        .plan_with_refs(0, &VehicleState::from_array(x0), &ControlInput::default(), &refs, [0.0; 2])
        .unwrap();
    let us: Vec<[f64; 2]> = res.trajectory.iter().map(|z| [z[4], z[5]]).collect();
    let p = problem(&sc, x0, us[0], h);
    let tail: Vec<[f64; 2]> = (0..h).map(|j| [us[j + 1][0] - us[j][0], us[j + 1][1] - us[j][1]]).collect();
    let (plan_cost, _) = mhe_and_log_posterior(&model, &p, &tail, 1.0).unwrap();
    let res = 21;
    let g = grid_oracle(&model, &p, res, 1.0).unwrap();
    // largest change between neighbouring cells bounds the discretisation error
    let mut eps = 0.0f64;
    let n = g.mhe.len();
    for idx in 0..n {
        let mut stride = 1;
        for _ in 0..2 * h {
            if (idx / stride) % res + 1 < res {
                eps = eps.max((g.mhe[idx + stride] - g.mhe[idx]).abs());
            }
            stride *= res;
        }
    }
    assert!(g.mhe[g.argmin_mhe] <= plan_cost + eps, "grid {} vs plan {plan_cost} + {eps}", g.mhe[g.argmin_mhe]);
    assert!(plan_cost <= g.mhe[g.argmin_mhe] + eps, "plan {plan_cost} far above grid optimum");
}
