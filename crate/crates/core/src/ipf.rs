//! Unscented transform and the forward implicit particle filter, realised as
//! a bank of per-particle unscented Kalman filters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MpicError, Result};
use crate::numerics::{
    gaussian_logpdf, normalize_log_weights, right_divide_spd, sqrt_psd, symmetrize, systematic_resample,
    Matrix, Vector, WeightVector,
};
use crate::state::AUG_DIM;
use crate::vsys::VirtualSystem;

/// Scaled unscented transform parameters, `lambda = alpha^2 (n + kappa) - n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UtParams {
    fn default() -> Self {
        UtParams { alpha: 0.8, beta: 2.0, kappa: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtWeights {
    pub wm: Vec<f64>,
    pub wc: Vec<f64>,
    /// Sigma points sit at `m ± scale * sqrt(P)_i`.
    pub scale: f64,
}

impl UtParams {
    pub fn weights(&self, n: usize) -> Result<UtWeights> {
        let nf = n as f64;
        let lambda = self.alpha * self.alpha * (nf + self.kappa) - nf;
        if !(self.alpha > 0.0) || !(nf + lambda > 0.0) {
            return Err(MpicError::InvalidConfig(format!("unscented parameters {self:?} give n + lambda <= 0")));
        }
        let c = nf + lambda;
        let mut wm = vec![0.5 / c; 2 * n + 1];
        let mut wc = wm.clone();
        wm[0] = lambda / c;
        wc[0] = lambda / c + (1.0 - self.alpha * self.alpha + self.beta);
        Ok(UtWeights { wm, wc, scale: c.sqrt() })
    }
}

/// Mean, covariance (with additive noise) and input-output cross-covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct UtOutput {
    pub mean: Vector,
    pub cov: Matrix,
    pub cross: Matrix,
}

/// Propagates `N(m, P)` through `gamma: R^n -> R^out_dim`.
pub fn unscented_transform<F>(
    gamma: F,
    m: &Vector,
    p: &Matrix,
    q_add: &Matrix,
    out_dim: usize,
    params: &UtParams,
) -> Result<UtOutput>
where
    F: Fn(&[f64], &mut [f64]),
{
    let pointwise = |xs: &Matrix, ys: &mut Matrix| {
        let mut buf = vec![0.0; out_dim];
        for k in 0..xs.ncols() {
            gamma(xs.column(k).as_slice(), &mut buf);
            ys.column_mut(k).copy_from_slice(&buf);
        }
    };
    unscented_transform_batch(pointwise, m, p, q_add, out_dim, params)
}

/// As [`unscented_transform`], with `gamma` mapping all sigma points (one per
/// column) at once.
pub fn unscented_transform_batch<F>(
    gamma: F,
    m: &Vector,
    p: &Matrix,
    q_add: &Matrix,
    out_dim: usize,
    params: &UtParams,
) -> Result<UtOutput>
where
    F: Fn(&Matrix, &mut Matrix),
{
    let n = m.len();
    if p.nrows() != n || p.ncols() != n || q_add.nrows() != out_dim || q_add.ncols() != out_dim {
        return Err(MpicError::DimensionMismatch(format!(
            "UT with m:{n} P:{}x{} Q:{}x{} out:{out_dim}",
            p.nrows(),
            p.ncols(),
            q_add.nrows(),
            q_add.ncols()
        )));
    }
    let w = params.weights(n)?;
    let s = sqrt_psd(p)? * w.scale;
    let mut xs = Matrix::zeros(n, 2 * n + 1);
    xs.column_mut(0).copy_from(m);
    for i in 0..n {
        let col = s.column(i);
        xs.column_mut(1 + i).copy_from(&(m + col));
        xs.column_mut(1 + n + i).copy_from(&(m - col));
    }
    let mut ys = Matrix::zeros(out_dim, 2 * n + 1);
    gamma(&xs, &mut ys);
    let mut mean = Vector::zeros(out_dim);
    for k in 0..2 * n + 1 {
        mean.axpy(w.wm[k], &ys.column(k), 1.0);
    }
    let mut cov = q_add.clone();
    let mut cross = Matrix::zeros(n, out_dim);
    for k in 0..2 * n + 1 {
        let dy = ys.column(k) - &mean;
        let dx = xs.column(k) - m;
        cov.ger(w.wc[k], &dy, &dy, 1.0);
        cross.ger(w.wc[k], &dx, &dy, 1.0);
    }
    if mean.iter().any(|v| !v.is_finite()) || cov.iter().any(|v| !v.is_finite()) {
        return Err(MpicError::NotPositiveSemiDefinite { jitter: 0.0 });
    }
    Ok(UtOutput { mean, cov: symmetrize(&cov), cross })
}

/// Reference distribution of the implicit sampler, `xi ~ N(0, diag(var))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IisSampler {
    pub variances: Vec<f64>,
    /// When set every draw is zero.
    pub deterministic: bool,
    pub seed: u64,
}

/// Independent random streams within one planning step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Forward = 1,
    Backward = 2,
    Resample = 3,
}

impl IisSampler {
    /// Block variances `(s1 I4, s2 I2, s3 I2)` for the vehicle state.
    pub fn vehicle(sigma: [f64; 3], deterministic: bool, seed: u64) -> Self {
        let mut v = vec![sigma[0]; 4];
        v.extend([sigma[1]; 2]);
        v.extend([sigma[2]; 2]);
        debug_assert_eq!(v.len(), AUG_DIM);
        IisSampler { variances: v, deterministic, seed }
    }

    pub fn deterministic(n: usize) -> Self {
        IisSampler { variances: vec![1.0; n], deterministic: true, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variances.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(MpicError::InvalidConfig("sampler variances must be positive".into()))
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        IisSampler {
            variances: self.variances.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    /// RNG for one particle in one pass of the planning step `context`.
    pub fn stream(&self, context: u64, pass: Pass, particle: usize) -> ChaCha8Rng {
        let key = self
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(context.wrapping_mul(0xbf58_476d_1ce4_e5b9));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.set_stream(((pass as u64) << 48) | particle as u64);
        rng
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Vector {
        if self.deterministic {
            return Vector::zeros(self.variances.len());
        }
        Vector::from_iterator(
            self.variances.len(),
            self.variances.iter().map(|v| {
                let z: f64 = StandardNormal.sample(rng);
                z * v.sqrt()
            }),
        )
    }
}

/// Statistics of the transition into a step, kept for the smoother.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictCache {
    pub m: Vector,
    pub p: Matrix,
    /// Cross-covariance between the previous state and this step's state.
    pub cross: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterParticle {
    pub mean: Vector,
    pub cov: Matrix,
    /// Present for every step after the first.
    pub cache: Option<PredictCache>,
}

impl FilterParticle {
    pub fn new(mean: Vector, cov: Matrix) -> Self {
        FilterParticle { mean, cov, cache: None }
    }
}

/// Outputs of the two chained unscented transforms for one particle.
#[derive(Debug, Clone, PartialEq)]
pub struct Predicted {
    pub cache: PredictCache,
    pub y_hat: Vector,
    pub p_y: Matrix,
    pub p_xy: Matrix,
}

/// UT through `f` with `Q`, then through `h` with `R`.
pub fn kalman_predict<S: VirtualSystem + ?Sized>(
    p: &FilterParticle,
    sys: &S,
    j: usize,
    ut: &UtParams,
) -> Result<Predicted> {
    let n = sys.state_dim();
    let f = unscented_transform_batch(|xs, ys| sys.f_batch(j, xs, ys), &p.mean, &p.cov, sys.q(), n, ut)?;
    let (y_hat, p_y, p_xy) = measure(sys, j, &f.mean, &f.cov, ut)?;
    Ok(Predicted {
        cache: PredictCache { m: f.mean, p: f.cov, cross: f.cross },
        y_hat,
        p_y,
        p_xy,
    })
}

fn measure<S: VirtualSystem + ?Sized>(
    sys: &S,
    j: usize,
    m: &Vector,
    p: &Matrix,
    ut: &UtParams,
) -> Result<(Vector, Matrix, Matrix)> {
    let h = unscented_transform(|x, out| sys.h(j, x, out), m, p, sys.r(), sys.meas_dim(), ut)?;
    Ok((h.mean, h.cov, h.cross))
}

/// `K = Pxy Py^-1`, `m~ = m + K (y - y_hat)`, `P~ = P - K Py K'`.
pub fn kalman_update(m: &Vector, p: &Matrix, y_hat: &Vector, p_y: &Matrix, p_xy: &Matrix, y: &Vector) -> Result<(Vector, Matrix)> {
    let k = right_divide_spd(p_xy, p_y, 0.0)?;
    let mt = m + &k * (y - y_hat);
    let pt = symmetrize(&(p - &k * p_y * k.transpose()));
    Ok((mt, pt))
}

/// Draws `m~ + sqrt(P~) xi` and returns the new particle with the
/// log-likelihood increment `log N(y; y_hat, Py)`.
pub fn perturb_and_weight(
    m_tilde: Vector,
    p_tilde: Matrix,
    cache: Option<PredictCache>,
    xi: &Vector,
    y_hat: &Vector,
    p_y: &Matrix,
    y: &Vector,
) -> Result<(FilterParticle, f64)> {
    let mean = if xi.iter().all(|v| *v == 0.0) {
        m_tilde
    } else {
        &m_tilde + sqrt_psd(&p_tilde)? * xi
    };
    let ll = gaussian_logpdf(y, y_hat, p_y)?;
    Ok((FilterParticle { mean, cov: p_tilde, cache }, ll))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub ut: UtParams,
    /// Resample when `ESS < threshold * N`.
    pub resample_threshold: f64,
    /// Also condition the initial ensemble on the step-0 reference.
    pub initial_update: bool,
    /// Distinguishes random streams of successive planning steps.
    pub context: u64,
    pub parallel: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            ut: UtParams::default(),
            resample_threshold: 0.5,
            initial_update: true,
            context: 0,
            parallel: true,
        }
    }
}

/// Per-particle paths over the horizon plus per-step weight diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterHistory {
    /// `paths[i][j]` is particle `i` at step `j`. Resampling copies whole
    /// ancestor paths so that every path is one consistent lineage.
    pub paths: Vec<Vec<FilterParticle>>,
    /// Normalised weights after weighting at each step (before any reset).
    pub weights: Vec<WeightVector>,
    pub ess: Vec<f64>,
    pub resample_steps: Vec<usize>,
}

impl FilterHistory {
    pub fn n_particles(&self) -> usize {
        self.paths.len()
    }

    pub fn horizon(&self) -> usize {
        self.paths[0].len() - 1
    }

    pub fn step(&self, j: usize) -> Vec<&FilterParticle> {
        self.paths.iter().map(|p| &p[j]).collect()
    }

    /// Weighted mean at step `j`.
    pub fn mean(&self, j: usize) -> Vector {
        let w = self.weights[j].as_slice();
        let mut m = Vector::zeros(self.paths[0][j].mean.len());
        for (p, wi) in self.paths.iter().zip(w) {
            m.axpy(*wi, &p[j].mean, 1.0);
        }
        m
    }
}

fn filter_step<S: VirtualSystem + ?Sized>(
    prev: &FilterParticle,
    sys: &S,
    j: usize,
    predict: bool,
    y: &Vector,
    sampler: &IisSampler,
    rng: &mut ChaCha8Rng,
    ut: &UtParams,
) -> Result<(FilterParticle, f64)> {
    let (m, p, cache, y_hat, p_y, p_xy) = if predict {
        let pr = kalman_predict(prev, sys, j, ut)?;
        (pr.cache.m.clone(), pr.cache.p.clone(), Some(pr.cache), pr.y_hat, pr.p_y, pr.p_xy)
    } else {
        let (y_hat, p_y, p_xy) = measure(sys, j, &prev.mean, &prev.cov, ut)?;
        (prev.mean.clone(), prev.cov.clone(), prev.cache.clone(), y_hat, p_y, p_xy)
    };
    let (mt, pt) = kalman_update(&m, &p, &y_hat, &p_y, &p_xy, y)?;
    let xi = sampler.draw(rng);
    perturb_and_weight(mt, pt, cache, &xi, &y_hat, &p_y, y)
}

/// Forward pass over steps `0..=H` where `H = refs.len() - 1`.
pub fn ipf_pass<S: VirtualSystem + ?Sized>(
    initial: Vec<FilterParticle>,
    sys: &S,
    refs: &[Vector],
    sampler: &IisSampler,
    cfg: &FilterConfig,
) -> Result<FilterHistory> {
    let n = initial.len();
    if n == 0 {
        return Err(MpicError::InvalidConfig("ensemble is empty".into()));
    }
    if refs.is_empty() {
        return Err(MpicError::InvalidConfig("need at least the step-0 reference".into()));
    }
    if let Some(r) = refs.iter().find(|r| r.len() != sys.meas_dim()) {
        return Err(MpicError::DimensionMismatch(format!(
            "reference of length {} for a {}-dim measurement",
            r.len(),
            sys.meas_dim()
        )));
    }
    sampler.validate()?;
    let h = refs.len() - 1;
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| sampler.stream(cfg.context, Pass::Forward, i)).collect();
    let mut resample_rng = sampler.stream(cfg.context, Pass::Resample, 0);
    let mut paths: Vec<Vec<FilterParticle>> = initial
        .into_iter()
        .map(|p| {
            let mut v = Vec::with_capacity(h + 1);
            v.push(p);
            v
        })
        .collect();
    let mut logw = vec![0.0; n];
    let mut history = FilterHistory {
        paths: Vec::new(),
        weights: Vec::with_capacity(h + 1),
        ess: Vec::with_capacity(h + 1),
        resample_steps: Vec::new(),
    };

    for j in 0..=h {
        let predict = j > 0;
        if !predict && !cfg.initial_update {
            history.weights.push(WeightVector::uniform(n));
            history.ess.push(n as f64);
            continue;
        }
        let y = &refs[j];
        let step = |(path, rng): (&mut Vec<FilterParticle>, &mut ChaCha8Rng)| -> Result<f64> {
            let prev = path.last().unwrap();
            let (next, ll) = filter_step(prev, sys, j, predict, y, sampler, rng, &cfg.ut)?;
            if predict {
                path.push(next);
            } else {
                *path.last_mut().unwrap() = next;
            }
            Ok(ll)
        };
        let lls: Vec<Result<f64>> = if cfg.parallel {
            paths.par_iter_mut().zip(rngs.par_iter_mut()).map(step).collect()
        } else {
            paths.iter_mut().zip(rngs.iter_mut()).map(step).collect()
        };
        for (lw, ll) in logw.iter_mut().zip(lls) {
            *lw += ll?;
        }
        let w = normalize_log_weights(&logw)?;
        let ess = w.ess();
        history.ess.push(ess);
        if n > 1 && ess < cfg.resample_threshold * n as f64 {
            use rand::Rng;
            let u0: f64 = resample_rng.gen();
            let ancestors = systematic_resample(&w, u0);
            paths = ancestors.iter().map(|&a| paths[a].clone()).collect();
            logw.iter_mut().for_each(|v| *v = 0.0);
            history.resample_steps.push(j);
        } else {
            // keep the log-weights bounded without changing their ratios
            let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            logw.iter_mut().for_each(|v| *v -= max);
        }
        history.weights.push(w);
    }
    history.paths = paths;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let a = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &a * a.transpose() + Matrix::identity(n, n) * 0.1
    }

    #[test]
    fn identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Vector::from_fn(5, |_, _| rng.gen_range(-2.0..2.0));
        let p = random_spd(5, &mut rng);
        let out = unscented_transform(|x, y| y.copy_from_slice(x), &m, &p, &Matrix::zeros(5, 5), 5, &UtParams::default())
            .unwrap();
        assert!((out.mean - &m).amax() < 1e-10);
        assert!((out.cov - &p).amax() < 1e-10);
        assert!((out.cross - &p).amax() < 1e-10);
    }

    #[test]
    fn square_against_monte_carlo() {
        let m = Vector::from_element(1, 0.0);
        let p = Matrix::from_element(1, 1, 1.0);
        let ut = UtParams::default();
        let out = unscented_transform(|x, y| y[0] = x[0] * x[0], &m, &p, &Matrix::zeros(1, 1), 1, &ut).unwrap();
        assert!((out.mean[0] - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 1_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            let v = z * z;
            s1 += v;
            s2 += v * v;
        }
        let mc_var = s2 / n as f64 - (s1 / n as f64).powi(2);
        assert!((out.cov[(0, 0)] - mc_var).abs() / mc_var < 0.05, "{} vs {mc_var}", out.cov[(0, 0)]);
    }

    #[test]
    fn zero_gain_update() {
        let m = Vector::from_vec(vec![1.0, 2.0]);
        let p = Matrix::identity(2, 2);
        let (mt, pt) = kalman_update(
            &m,
            &p,
            &Vector::from_vec(vec![0.0]),
            &Matrix::from_element(1, 1, 2.0),
            &Matrix::zeros(2, 1),
            &Vector::from_vec(vec![5.0]),
        )
        .unwrap();
        assert_eq!(mt, m);
        assert_eq!(pt, p);
    }

    #[test]
    fn scalar_update() {
        let (mt, pt) = kalman_update(
            &Vector::from_vec(vec![0.0]),
            &Matrix::from_element(1, 1, 1.0),
            &Vector::from_vec(vec![0.0]),
            &Matrix::from_element(1, 1, 2.0),
            &Matrix::from_element(1, 1, 1.0),
            &Vector::from_vec(vec![1.0]),
        )
        .unwrap();
        assert!((mt[0] - 0.5).abs() < 1e-15 && (pt[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn deterministic_perturbation_keeps_mean() {
        let m = Vector::from_vec(vec![1.0, -1.0]);
        let (p, _) = perturb_and_weight(
            m.clone(),
            Matrix::identity(2, 2),
            None,
            &IisSampler::deterministic(2).draw(&mut ChaCha8Rng::seed_from_u64(0)),
            &Vector::zeros(1),
            &Matrix::identity(1, 1),
            &Vector::zeros(1),
        )
        .unwrap();
        assert_eq!(p.mean, m);
    }

    #[test]
    fn feasible_particle_dominates() {
        let y = Vector::zeros(1);
        let py = Matrix::from_element(1, 1, 0.01);
        let ok = gaussian_logpdf(&y, &Vector::from_vec(vec![0.01]), &py).unwrap();
        let bad = gaussian_logpdf(&y, &Vector::from_vec(vec![5.0]), &py).unwrap();
        let w = normalize_log_weights(&[ok, bad]).unwrap();
        assert!(w.as_slice()[0] > 1.0 - 1e-6);
        let w = normalize_log_weights(&[ok, ok]).unwrap();
        assert_eq!(w.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn streams_are_independent_of_order() {
        let s = IisSampler::vehicle([0.005, 1.0, 0.3], false, 42);
        let a = s.draw(&mut s.stream(3, Pass::Forward, 7));
        let _ = s.draw(&mut s.stream(3, Pass::Forward, 6));
        let b = s.draw(&mut s.stream(3, Pass::Forward, 7));
        assert_eq!(a, b);
        let c = s.draw(&mut s.stream(3, Pass::Backward, 7));
        assert_ne!(a, c);
    }
}
