//! Closed-form oracles shared by the integration tests: Kalman/RTS
//! recursions with explicit inverses and a discrete Riccati solution for the
//! double-integrator surrogate.
#![allow(dead_code)]

use mpic_core::mpicx::{Controller, ControllerConfig};
use mpic_core::numerics::{Matrix, Vector};
use mpic_core::state::{ControlInput, Dynamics, LinearDynamics, VehicleState};
use mpic_core::vsys::LinearGaussianSystem;
use mpic_core::world::{stage_cost, NominalControl, RefPoint, RoadSpec, Scenario, Weights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn spd(n: usize, floor: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let a = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    &a * a.transpose() / n as f64 + Matrix::identity(n, n) * floor
}

pub fn random_system(n: usize, m: usize, rng: &mut ChaCha8Rng) -> LinearGaussianSystem {
    let a = Matrix::from_fn(n, n, |_, _| rng.gen_range(-0.4..0.4)) + Matrix::identity(n, n) * 0.6;
    LinearGaussianSystem {
        a,
        a_offset: Vector::from_fn(n, |_, _| rng.gen_range(-0.5..0.5)),
        c: Matrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0)),
        c_offset: Vector::from_fn(m, |_, _| rng.gen_range(-0.5..0.5)),
        q: spd(n, 0.05, rng),
        r: spd(m, 0.1, rng),
    }
}

pub struct Oracle {
    pub filt_m: Vec<Vector>,
    pub filt_p: Vec<Matrix>,
    pub smooth_m: Vec<Vector>,
    pub smooth_p: Vec<Matrix>,
}

/// Textbook Kalman filter (update at step 0, then predict/update) followed by
/// the RTS recursion, with explicit inverses.
pub fn closed_form(sys: &LinearGaussianSystem, m0: &Vector, p0: &Matrix, ys: &[Vector]) -> Oracle {
    let (a, c) = (&sys.a, &sys.c);
    let update = |m: &Vector, p: &Matrix, y: &Vector| {
        let s = c * p * c.transpose() + &sys.r;
        let k = p * c.transpose() * s.try_inverse().unwrap();
        let m = m + &k * (y - c * m - &sys.c_offset);
        let p = p - &k * c * p;
        (m, (&p + p.transpose()) * 0.5)
    };
    let (mut fm, mut fp) = (Vec::new(), Vec::new());
    let (m, p) = update(m0, p0, &ys[0]);
    fm.push(m);
    fp.push(p);
    for y in &ys[1..] {
        let mp = a * fm.last().unwrap() + &sys.a_offset;
        let pp = a * fp.last().unwrap() * a.transpose() + &sys.q;
        let (m, p) = update(&mp, &pp, y);
        fm.push(m);
        fp.push(p);
    }
    let h = ys.len() - 1;
    let mut sm = fm.clone();
    let mut sp = fp.clone();
    for t in (0..h).rev() {
        let pp = a * &fp[t] * a.transpose() + &sys.q;
        let g = &fp[t] * a.transpose() * pp.clone().try_inverse().unwrap();
        sm[t] = &fm[t] + &g * (&sm[t + 1] - (a * &fm[t] + &sys.a_offset));
        sp[t] = &fp[t] + &g * (&sp[t + 1] - pp) * g.transpose();
    }
    Oracle { filt_m: fm, filt_p: fp, smooth_m: sm, smooth_p: sp }
}

pub fn setup(seed: u64, h: usize) -> (LinearGaussianSystem, Vector, Matrix, Vec<Vector>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sys = random_system(8, 7, &mut rng);
    let m0 = Vector::from_fn(8, |_, _| rng.gen_range(-1.0..1.0));
    let p0 = spd(8, 0.2, &mut rng);
    let ys = (0..=h).map(|_| Vector::from_fn(7, |_, _| rng.gen_range(-2.0..2.0))).collect();
    (sys, m0, p0, ys)
}

pub fn max_err(a: &[Vector], b: &[Vector]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

pub fn max_err_m(a: &[Matrix], b: &[Matrix]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

pub fn lq_scenario(steps: usize, horizon: usize) -> Scenario {
    let mut sc = Scenario::overtaking();
    sc.name = "double-integrator".into();
    sc.duration = steps as f64 * sc.dt;
    sc.horizon = horizon;
    sc.road = RoadSpec::Arcs { start: [0.0, 0.0, 0.0], pieces: vec![[1000.0, 0.0]] };
    sc.lanes = 1000;
    sc.ovs.clear();
    sc.u_min = [-1e3; 2];
    sc.u_max = [1e3; 2];
    sc.du_min = [-1e3; 2];
    sc.du_max = [1e3; 2];
    sc.weights = Weights { r: [1.0, 1.0, 4.0, 4.0], q_u: [10.0, 10.0], q_du: [1.0, 1.0], q_eps: 0.01 };
    sc.inflation = 1.0;
    sc.reference = vec![RefPoint { t: 0.0, d: 0.0, v: 0.0 }];
    sc.nominal_control = NominalControl::Zero;
    sc
}

pub fn lq_config() -> ControllerConfig {
    ControllerConfig { particles: 1, deterministic: true, warm_start: false, ..Default::default() }
}

/// Riccati recursion on `z = [x; u_prev]` with decision `du`, stage cost
/// `|x|^2_R + |u|^2_Qu + |du|^2_Qdu`. Returns the optimal cost-to-go matrix
/// of the `n`-stage problem and its first-stage gain (`du = -K z`).
fn riccati(dyn_: &LinearDynamics, w: &Weights, n: usize) -> (Matrix, Matrix) {
    let a = Matrix::from_fn(4, 4, |i, j| dyn_.a[i][j]);
    let b = Matrix::from_fn(4, 2, |i, j| dyn_.b[i][j]);
    let mut f = Matrix::zeros(6, 6);
    f.view_mut((0, 0), (4, 4)).copy_from(&a);
    f.view_mut((0, 4), (4, 2)).copy_from(&b);
    f.view_mut((4, 4), (2, 2)).fill_with_identity();
    let mut g = Matrix::zeros(6, 2);
    g.view_mut((0, 0), (4, 2)).copy_from(&b);
    g.view_mut((4, 0), (2, 2)).fill_with_identity();
    let inv = |v: &[f64]| Matrix::from_diagonal(&Vector::from_iterator(v.len(), v.iter().map(|x| 1.0 / x)));
    let (ri, qui, qdi) = (inv(&w.r), inv(&w.q_u), inv(&w.q_du));
    let mut m = Matrix::zeros(6, 6);
    m.view_mut((0, 0), (4, 4)).copy_from(&ri);
    m.view_mut((4, 4), (2, 2)).copy_from(&qui);
    let mut nn = Matrix::zeros(6, 2);
    nn.view_mut((4, 0), (2, 2)).copy_from(&qui);
    let s = &qui + &qdi;
    let mut p = Matrix::zeros(6, 6);
    let mut k = Matrix::zeros(2, 6);
    for _ in 0..n {
        let h = &s + g.transpose() * &p * &g;
        let l = nn.transpose() + g.transpose() * &p * &f;
        let h_inv = h.try_inverse().unwrap();
        k = &h_inv * &l;
        p = &m + f.transpose() * &p * &f - l.transpose() * h_inv * l;
    }
    (p, k)
}

fn augmented(x: [f64; 4], u_prev: [f64; 2]) -> Vector {
    Vector::from_vec(vec![x[0], x[1], x[2], x[3], u_prev[0], u_prev[1]])
}

/// Optimal cost of `sum_{k<n}` stage costs from `x_0` with `u_{-1} = 0`.
pub fn riccati_cost(dyn_: &LinearDynamics, w: &Weights, x0: [f64; 4], n: usize) -> f64 {
    let (p, _) = riccati(dyn_, w, n);
    let z = augmented(x0, [0.0; 2]);
    (z.transpose() * p * z)[(0, 0)]
}

/// Closed-loop cost over `steps` of the exact receding-horizon LQ controller
/// that plans `u_0..u_H` at every step.
pub fn receding_riccati_cost(dyn_: &LinearDynamics, w: &Weights, x0: [f64; 4], steps: usize, h: usize) -> f64 {
    let (_, k) = riccati(dyn_, w, h + 1);
    let (mut x, mut u_prev, mut cost) = (x0, [0.0; 2], 0.0);
    for _ in 0..steps {
        let du = -(&k * augmented(x, u_prev));
        let u = [u_prev[0] + du[0], u_prev[1] + du[1]];
        cost += stage_cost(&x, &u, &[du[0], du[1]], &[0.0; 4], &[0.0; 2], w);
        x = dyn_.step(&x, &u);
        u_prev = u;
    }
    cost
}

/// Closed-loop cost of the controller on the double integrator. With
/// `horizon == None` the horizon shrinks so that step `k` plans exactly the
/// remaining `steps - k` stages. Warm starting replaces the control prior by
/// the previous posterior, so only cold starts solve the LQ problem exactly.
pub fn lq_closed_loop(x0: [f64; 4], steps: usize, horizon: Option<usize>, warm_start: bool) -> f64 {
    let sc = lq_scenario(steps, horizon.unwrap_or(steps));
    let plant = LinearDynamics::double_integrator(sc.dt);
    let w = sc.weights.clone();
    let mut ctrl = Controller::new(plant.clone(), sc, ControllerConfig { warm_start, ..lq_config() }).unwrap();
    let (mut x, mut u_prev, mut cost) = (x0, [0.0; 2], 0.0);
    for k in 0..steps {
        let h = horizon.unwrap_or(steps - 1 - k);
        let refs = vec![[0.0; 4]; h + 1];
        let res = ctrl
            .plan_with_refs(k, &VehicleState::from_array(x), &ControlInput::from_array(u_prev), &refs, [0.0; 2])
            .unwrap();
        let u = res.control.to_array();
        let du = [u[0] - u_prev[0], u[1] - u_prev[1]];
        cost += stage_cost(&x, &u, &du, &[0.0; 4], &[0.0; 2], &w);
        x = plant.step(&x, &u);
        u_prev = u;
    }
    cost
}
