//! Backward implicit particle smoother: a bank of per-particle RTS smoothers
//! with equal weights.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{MpicError, Result};
use crate::ipf::{FilterHistory, FilterParticle, IisSampler, Pass, PredictCache};
use crate::numerics::{right_divide_spd, sqrt_psd, symmetrize, Matrix, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothParticle {
    pub mean: Vector,
    pub cov: Matrix,
}

/// `paths[i][j]` is smoothing particle `i` at step `j`; every weight is `1/N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothHistory {
    pub paths: Vec<Vec<SmoothParticle>>,
}

impl SmoothHistory {
    pub fn n_particles(&self) -> usize {
        self.paths.len()
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.paths.len() as f64
    }

    /// Equal-weight mean at step `j`.
    pub fn mean(&self, j: usize) -> Vector {
        let mut m = Vector::zeros(self.paths[0][j].mean.len());
        for p in &self.paths {
            m += &p[j].mean;
        }
        m / self.paths.len() as f64
    }
}

/// One RTS step: `K = C P^-1`, `m~ = x_f + K (x_s - m)`,
/// `P~ = S_f + K (S_s - P) K'`.
pub fn rts_update(next: &SmoothParticle, filt: &FilterParticle, cache_next: &PredictCache) -> Result<(Vector, Matrix)> {
    rts_update_scaled(next, filt, cache_next, 1.0)
}

fn rts_update_scaled(
    next: &SmoothParticle,
    filt: &FilterParticle,
    cache_next: &PredictCache,
    gain_scale: f64,
) -> Result<(Vector, Matrix)> {
    let k = right_divide_spd(&cache_next.cross, &cache_next.p, 0.0)? * gain_scale;
    let m = &filt.mean + &k * (&next.mean - &cache_next.m);
    let p = symmetrize(&(&filt.cov + &k * (&next.cov - &cache_next.p) * k.transpose()));
    Ok((m, p))
}

/// Options for [`ips_pass_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct SmootherConfig {
    pub context: u64,
    pub parallel: bool,
    /// Multiplies every smoother gain. Only useful for fault-injection tests;
    /// anything other than 1 gives wrong answers.
    pub gain_scale: f64,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        SmootherConfig { context: 0, parallel: true, gain_scale: 1.0 }
    }
}

pub fn ips_pass(hist: &FilterHistory, sampler: &IisSampler, context: u64) -> Result<SmoothHistory> {
    ips_pass_with(hist, sampler, &SmootherConfig { context, ..Default::default() })
}

/// Backward pass from the terminal filtered ensemble. Particle `i` is only
/// ever smoothed against its own filtered path.
pub fn ips_pass_with(hist: &FilterHistory, sampler: &IisSampler, cfg: &SmootherConfig) -> Result<SmoothHistory> {
    sampler.validate()?;
    let h = hist.horizon();
    let run = |(i, path): (usize, &Vec<FilterParticle>)| -> Result<Vec<SmoothParticle>> {
        let mut rng: ChaCha8Rng = sampler.stream(cfg.context, Pass::Backward, i);
        let mut out = vec![
            SmoothParticle { mean: Vector::zeros(0), cov: Matrix::zeros(0, 0) };
            h + 1
        ];
        out[h] = SmoothParticle { mean: path[h].mean.clone(), cov: path[h].cov.clone() };
        for t in (0..h).rev() {
            let cache = path[t + 1].cache.as_ref().ok_or_else(|| {
                MpicError::InvalidConfig(format!("particle {i} has no predict cache at step {}", t + 1))
            })?;
            let (m, p) = rts_update_scaled(&out[t + 1], &path[t], cache, cfg.gain_scale)?;
            let xi = sampler.draw(&mut rng);
            let mean = if xi.iter().all(|v| *v == 0.0) { m } else { &m + sqrt_psd(&p)? * xi };
            out[t] = SmoothParticle { mean, cov: p };
        }
        Ok(out)
    };
    let paths: Vec<Result<Vec<SmoothParticle>>> = if cfg.parallel {
        hist.paths.par_iter().enumerate().map(run).collect()
    } else {
        hist.paths.iter().enumerate().map(run).collect()
    };
    Ok(SmoothHistory { paths: paths.into_iter().collect::<Result<_>>()? })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    #[test]
    fn no_information_fixed_point() {
        let filt = FilterParticle::new(Vector::from_vec(vec![1.0, 2.0]), Matrix::identity(2, 2) * 0.5);
        let cache = PredictCache {
            m: Vector::from_vec(vec![3.0, -1.0]),
            p: Matrix::identity(2, 2) * 2.0,
            cross: Matrix::from_row_slice(2, 2, &[0.4, 0.1, 0.0, 0.3]),
        };
        let next = SmoothParticle { mean: cache.m.clone(), cov: cache.p.clone() };
        let (m, p) = rts_update(&next, &filt, &cache).unwrap();
        assert!((m - &filt.mean).amax() < 1e-15);
        assert!((p - &filt.cov).amax() < 1e-15);
    }

    #[test]
    fn scalar_hand_arithmetic() {
        let filt = FilterParticle::new(Vector::from_vec(vec![3.0]), scalar(1.0));
        let cache = PredictCache { m: Vector::from_vec(vec![0.0]), p: scalar(1.0), cross: scalar(0.5) };
        let next = SmoothParticle { mean: Vector::from_vec(vec![2.0]), cov: scalar(0.5) };
        let (m, p) = rts_update(&next, &filt, &cache).unwrap();
        assert!((m[0] - 4.0).abs() < 1e-15);
        assert!((p[(0, 0)] - 0.875).abs() < 1e-15);
    }
}
