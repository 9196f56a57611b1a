//! Self-check suites run by `mpic verify`: unscented-transform exactness on
//! affine maps, filter and smoother reductions to closed-form Kalman/RTS, and
//! MHE/MAP agreement on exhaustive grids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{grid_oracle, HorizonProblem};
use crate::error::Result;
use crate::ipf::{ipf_pass, unscented_transform, FilterConfig, FilterParticle, IisSampler, UtParams};
use crate::ips::{ips_pass_with, SmootherConfig};
use crate::numerics::{Matrix, Vector};
use crate::nss::{NssModel, Scheme};
use crate::vsys::LinearGaussianSystem;
use crate::world::Scenario;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub seed: u64,
    pub ut_maps: usize,
    pub reduction_instances: usize,
    pub grid_instances: usize,
    pub grid_resolution: usize,
    /// Fault injection: scales every smoother gain.
    pub rts_gain_scale: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 0,
            ut_maps: 100,
            reduction_instances: 10,
            grid_instances: 50,
            grid_resolution: 7,
            rts_gain_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Check {
    fn below(name: String, value: f64, tolerance: f64) -> Self {
        Check { name, passed: value <= tolerance, value, tolerance, error: None }
    }

    fn failed(name: String, e: impl ToString) -> Self {
        Check { name, passed: false, value: f64::NAN, tolerance: 0.0, error: Some(e.to_string()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub name: String,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl Suite {
    fn new(name: &str, checks: Vec<Check>) -> Self {
        Suite { name: name.into(), passed: checks.iter().all(|c| c.passed), checks }
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub suites: Vec<Suite>,
}

pub fn run(cfg: &VerifyConfig) -> VerifyReport {
    let suites = vec![ut_suite(cfg), kf_suite(cfg), rts_suite(cfg), map_suite(cfg)];
    VerifyReport { passed: suites.iter().all(|s| s.passed), suites }
}

fn spd(n: usize, floor: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let a = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    &a * a.transpose() / n as f64 + Matrix::identity(n, n) * floor
}

fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).amax() / (1.0 + b.amax())
}

pub fn ut_suite(cfg: &VerifyConfig) -> Suite {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = Vec::new();
    for i in 0..cfg.ut_maps {
        let n = rng.gen_range(1..=8);
        let m = rng.gen_range(1..=8);
        let a = Matrix::from_fn(m, n, |_, _| rng.gen_range(-2.0..2.0));
        let b = Vector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
        let mean = Vector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
        let p = spd(n, 0.01, &mut rng);
        let q = spd(m, 0.01, &mut rng);
        let params = UtParams {
            alpha: rng.gen_range(0.3..1.0),
            ..UtParams::default()
        };
        let gamma = |x: &[f64], y: &mut [f64]| {
            let v = &a * Vector::from_column_slice(x) + &b;
            y.copy_from_slice(v.as_slice());
        };
        let name = format!("affine-{i}");
        match unscented_transform(gamma, &mean, &p, &q, m, &params) {
            Ok(out) => {
                let em = rel_err(&Matrix::from_column_slice(m, 1, out.mean.as_slice()), &Matrix::from_column_slice(m, 1, (&a * &mean + &b).as_slice()));
                let ec = rel_err(&out.cov, &(&a * &p * a.transpose() + &q));
                let ex = rel_err(&out.cross, &(&p * a.transpose()));
                checks.push(Check::below(name, em.max(ec).max(ex), 1e-9));
            }
            Err(e) => checks.push(Check::failed(name, e)),
        }
    }
    Suite::new("ut", checks)
}

fn random_lgs(rng: &mut ChaCha8Rng) -> (LinearGaussianSystem, Vector, Matrix, Vec<Vector>) {
    let (n, m) = (rng.gen_range(2..=8), rng.gen_range(1..=7));
    let sys = LinearGaussianSystem {
        a: Matrix::from_fn(n, n, |_, _| rng.gen_range(-0.4..0.4)) + Matrix::identity(n, n) * 0.6,
        a_offset: Vector::from_fn(n, |_, _| rng.gen_range(-0.5..0.5)),
        c: Matrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0)),
        c_offset: Vector::from_fn(m, |_, _| rng.gen_range(-0.5..0.5)),
        q: spd(n, 0.05, rng),
        r: spd(m, 0.1, rng),
    };
    let m0 = Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let p0 = spd(n, 0.2, rng);
    let h = rng.gen_range(1..=20);
    let ys = (0..=h).map(|_| Vector::from_fn(m, |_, _| rng.gen_range(-2.0..2.0))).collect();
    (sys, m0, p0, ys)
}

type Gaussians = (Vec<Vector>, Vec<Matrix>);

/// Covariance-form Kalman filter with explicit inverses, updating at step 0.
fn kalman(sys: &LinearGaussianSystem, m0: &Vector, p0: &Matrix, ys: &[Vector]) -> Option<(Gaussians, Gaussians)> {
    let (a, c) = (&sys.a, &sys.c);
    let mut fm: Vec<Vector> = Vec::new();
    let mut fp: Vec<Matrix> = Vec::new();
    let mut pm = Vec::new();
    let mut pp = Vec::new();
    for (j, y) in ys.iter().enumerate() {
        let (m, p) = if j == 0 {
            (m0.clone(), p0.clone())
        } else {
            (a * &fm[j - 1] + &sys.a_offset, a * &fp[j - 1] * a.transpose() + &sys.q)
        };
        let s = c * &p * c.transpose() + &sys.r;
        let k = &p * c.transpose() * s.try_inverse()?;
        fm.push(&m + &k * (y - c * &m - &sys.c_offset));
        fp.push(&p - &k * c * &p);
        pm.push(m);
        pp.push(p);
    }
    let mut sm = fm.clone();
    let mut sp = fp.clone();
    for t in (0..ys.len() - 1).rev() {
        let g = &fp[t] * a.transpose() * pp[t + 1].clone().try_inverse()?;
        sm[t] = &fm[t] + &g * (&sm[t + 1] - &pm[t + 1]);
        sp[t] = &fp[t] + &g * (&sp[t + 1] - &pp[t + 1]) * g.transpose();
    }
    Some(((fm, fp), (sm, sp)))
}

fn worst(a: &Gaussians, means: &[Vector], covs: &[Matrix]) -> f64 {
    let em = a.0.iter().zip(means).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max);
    let ep = a.1.iter().zip(covs).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max);
    em.max(ep)
}

fn reduction_suite(cfg: &VerifyConfig, name: &str, smoothed: bool) -> Suite {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6b66);
    let mut checks = Vec::new();
    for i in 0..cfg.reduction_instances {
        let (sys, m0, p0, ys) = random_lgs(&mut rng);
        let label = format!("instance-{i}");
        let Some((filt, smooth)) = kalman(&sys, &m0, &p0, &ys) else {
            checks.push(Check::failed(label, "closed-form recursion is singular"));
            continue;
        };
        let sampler = IisSampler::deterministic(m0.len());
        let run = || -> Result<f64> {
            let hist = ipf_pass(vec![FilterParticle::new(m0.clone(), p0.clone())], &sys, &ys, &sampler, &FilterConfig::default())?;
            if !smoothed {
                let p = &hist.paths[0];
                let means: Vec<Vector> = p.iter().map(|q| q.mean.clone()).collect();
                let covs: Vec<Matrix> = p.iter().map(|q| q.cov.clone()).collect();
                return Ok(worst(&filt, &means, &covs));
            }
            let sc = SmootherConfig { gain_scale: cfg.rts_gain_scale, ..Default::default() };
            let sm = ips_pass_with(&hist, &sampler, &sc)?;
            let means: Vec<Vector> = sm.paths[0].iter().map(|q| q.mean.clone()).collect();
            let covs: Vec<Matrix> = sm.paths[0].iter().map(|q| q.cov.clone()).collect();
            Ok(worst(&smooth, &means, &covs))
        };
        checks.push(match run() {
            Ok(e) => Check::below(label, e, 1e-8),
            Err(e) => Check::failed(label, e),
        });
    }
    Suite::new(name, checks)
}

pub fn kf_suite(cfg: &VerifyConfig) -> Suite {
    reduction_suite(cfg, "kf-reduction", false)
}

pub fn rts_suite(cfg: &VerifyConfig) -> Suite {
    reduction_suite(cfg, "rts-reduction", true)
}

/// Random two-step problems beside the first obstacle of the overtaking
/// fixture, so the barrier term is active, with a small random network as
/// the model.
pub fn map_suite(cfg: &VerifyConfig) -> Suite {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7431);
    let base = Scenario::overtaking();
    let mut checks = Vec::new();
    for i in 0..cfg.grid_instances {
        let label = format!("instance-{i}");
        let mut sc = base.clone();
        for w in sc.weights.r.iter_mut().chain(&mut sc.weights.q_u).chain(&mut sc.weights.q_du) {
            *w *= rng.gen_range(0.5..2.0);
        }
        let lambda = [1.0, 2.0, 10.0][rng.gen_range(0..3)];
        let x0 = [rng.gen_range(30.0..36.0), rng.gen_range(-2.0..2.0), rng.gen_range(-0.1..0.1), rng.gen_range(10.0..20.0)];
        let u_prev = [rng.gen_range(-2.0..1.0), rng.gen_range(-0.05..0.05)];
        let model = match NssModel::new_random(&[6, 8, 4], sc.dt, Scheme::Euler, rng.gen()) {
            Ok(m) => m,
            Err(e) => {
                checks.push(Check::failed(label, e));
                continue;
            }
        };
        let p = HorizonProblem {
            refs: sc.reference_horizon(0.0, x0[0], 2),
            scenario: &sc,
            x0,
            u_prev,
            t0: 0.0,
            nominal: u_prev,
            barrier: sc.barrier,
        };
        match grid_oracle(&model, &p, cfg.grid_resolution, lambda) {
            Ok(g) => {
                let mut c = Check::below(label.clone(), g.offset_spread(lambda), 1e-8);
                if g.argmin_mhe != g.argmax_map {
                    c.passed = false;
                    c.error = Some(format!("MHE argmin {} but MAP argmax {}", g.argmin_mhe, g.argmax_map));
                }
                checks.push(c);
            }
            Err(e) => checks.push(Check::failed(label, e)),
        }
    }
    Suite::new("theorem-1", checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VerifyConfig {
        VerifyConfig { ut_maps: 10, reduction_instances: 3, grid_instances: 3, grid_resolution: 5, ..Default::default() }
    }

    #[test]
    fn clean_run_passes() {
        let r = run(&small());
        for s in &r.suites {
            assert!(s.passed, "{}: {:?}", s.name, s.failures().collect::<Vec<_>>());
        }
        assert_eq!(r.suites.len(), 4);
    }

    #[test]
    fn corrupted_gain_fails_rts_only() {
        let r = run(&VerifyConfig { rts_gain_scale: 1.1, ..small() });
        let failed: Vec<&str> = r.suites.iter().filter(|s| !s.passed).map(|s| s.name.as_str()).collect();
        assert_eq!(failed, ["rts-reduction"]);
    }
}
