//! Dense linear-algebra and probability helpers shared by the estimators.
//!
//! Everything here works on `nalgebra` dynamic matrices; dimensions in this
//! crate never exceed 16, so no attempt is made at blocking or sparsity.

use nalgebra::{DMatrix, DVector};

use crate::error::{MpicError, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Largest jitter the Cholesky ladder will add before giving up.
pub const MAX_JITTER: f64 = 1e-6;
/// First non-zero rung of the ladder when the caller asked for zero jitter.
pub const MIN_JITTER: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Normalised importance weights. Entries are non-negative and sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    /// Uniform weights `1/n`.
    pub fn uniform(n: usize) -> Self {
        WeightVector(vec![1.0 / n as f64; n])
    }

    /// Wraps weights that are already normalised. Renormalises defensively
    /// against accumulated round-off.
    pub fn from_normalized(w: Vec<f64>) -> Self {
        let s: f64 = w.iter().sum();
        WeightVector(w.into_iter().map(|x| x / s).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Effective sample size `1 / sum(w_i^2)`.
    pub fn ess(&self) -> f64 {
        1.0 / self.0.iter().map(|w| w * w).sum::<f64>()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Returns `(M + M^T) / 2`.
pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Lower Cholesky factor of a covariance matrix with a jitter ladder.
///
/// `M` is symmetrised, then factorised as `M + j I` starting at `j = jitter`
/// and multiplying by ten (from [`MIN_JITTER`] when `jitter` is zero) until
/// the factorisation succeeds or `j` passes [`MAX_JITTER`].
pub fn chol_psd(m: &Matrix, jitter: f64) -> Result<Matrix> {
    if !m.is_square() {
        return Err(MpicError::DimensionMismatch(format!(
            "cholesky of a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) || !jitter.is_finite() || jitter < 0.0 {
        return Err(MpicError::NotPositiveSemiDefinite { jitter });
    }
    let n = m.nrows();
    let sym = symmetrize(m);
    let mut j = jitter;
    loop {
        let mut a = sym.clone();
        if j > 0.0 {
            for i in 0..n {
                a[(i, i)] += j;
            }
        }
        if let Some(c) = a.cholesky() {
            return Ok(c.unpack());
        }
        j = if j == 0.0 { MIN_JITTER } else { j * 10.0 };
        if j > MAX_JITTER * (1.0 + 1e-9) {
            return Err(MpicError::NotPositiveSemiDefinite { jitter: j / 10.0 });
        }
    }
}

/// Solves `L L^T X = B` given the lower factor `L`.
pub fn chol_solve(l: &Matrix, b: &Matrix) -> Matrix {
    let y = l
        .solve_lower_triangular(b)
        .expect("cholesky factor has a zero pivot");
    l.transpose()
        .solve_upper_triangular(&y)
        .expect("cholesky factor has a zero pivot")
}

/// A square root `S` with `S S^T ≈ M`. Uses the Cholesky ladder and falls
/// back to an eigen-decomposition with negative eigenvalues clipped to zero.
pub fn sqrt_psd(m: &Matrix) -> Result<Matrix> {
    match chol_psd(m, 0.0) {
        Ok(l) => Ok(l),
        Err(MpicError::NotPositiveSemiDefinite { jitter }) => {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(MpicError::NotPositiveSemiDefinite { jitter });
            }
            let eig = symmetrize(m).symmetric_eigen();
            let floor = -1e-8 * (1.0 + eig.eigenvalues.amax());
            if eig.eigenvalues.iter().any(|&l| l < floor) {
                return Err(MpicError::NotPositiveSemiDefinite { jitter });
            }
            let mut v = eig.eigenvectors;
            for (j, l) in eig.eigenvalues.iter().enumerate() {
                let s = l.max(0.0).sqrt();
                v.column_mut(j).scale_mut(s);
            }
            Ok(v)
        }
        Err(e) => Err(e),
    }
}

/// Computes `A P^{-1}` for a covariance `P` through its Cholesky factor.
pub fn right_divide_spd(a: &Matrix, p: &Matrix, jitter: f64) -> Result<Matrix> {
    let l = chol_psd(p, jitter)?;
    Ok(chol_solve(&l, &a.transpose()).transpose())
}

/// `exp(logw - logsumexp(logw))`.
pub fn normalize_log_weights(logw: &[f64]) -> Result<WeightVector> {
    let max = logw
        .iter()
        .copied()
        .filter(|v| !v.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(MpicError::AllWeightsDegenerate);
    }
    let shifted: Vec<f64> = logw
        .iter()
        .map(|&v| if v.is_nan() { 0.0 } else { (v - max).exp() })
        .collect();
    let total: f64 = shifted.iter().sum();
    Ok(WeightVector(shifted.into_iter().map(|v| v / total).collect()))
}

/// Systematic resampling with a single uniform offset `u0 ∈ [0, 1)`.
///
/// Returns `N = w.len()` ancestor indices in non-decreasing order.
pub fn systematic_resample(w: &WeightVector, u0: f64) -> Vec<usize> {
    systematic_resample_n(w, u0, w.len())
}

/// Systematic resampling drawing `draws` indices from the weights.
pub fn systematic_resample_n(w: &WeightVector, u0: f64, draws: usize) -> Vec<usize> {
    let n = w.len();
    let mut out = Vec::with_capacity(draws);
    if n == 0 {
        return out;
    }
    let mut cumulative = 0.0;
    let mut i = 0usize;
    let weights = w.as_slice();
    for k in 0..draws {
        let pos = (u0 + k as f64) / draws as f64;
        while i < n - 1 && cumulative + weights[i] <= pos {
            cumulative += weights[i];
            i += 1;
        }
        // skip trailing zero-weight entries that the float sum may land on
        while weights[i] == 0.0 && i > 0 {
            i -= 1;
        }
        out.push(i);
    }
    out
}

/// Log-density of `N(m, P)` at `x`, evaluated through the Cholesky factor.
pub fn gaussian_logpdf(x: &Vector, m: &Vector, p: &Matrix) -> Result<f64> {
    if x.len() != m.len() || p.nrows() != x.len() || p.ncols() != x.len() {
        return Err(MpicError::DimensionMismatch(format!(
            "logpdf with x:{} m:{} P:{}x{}",
            x.len(),
            m.len(),
            p.nrows(),
            p.ncols()
        )));
    }
    let l = chol_psd(p, 0.0)?;
    let diff = x - m;
    let z = l
        .solve_lower_triangular(&diff)
        .expect("cholesky factor has a zero pivot");
    let logdet: f64 = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
    Ok(-0.5 * (z.dot(&z) + logdet + x.len() as f64 * LN_2PI))
}

/// Block-diagonal assembly of square blocks.
pub fn block_diag(blocks: &[&Matrix]) -> Matrix {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Matrix::zeros(n, n);
    let mut o = 0;
    for b in blocks {
        out.view_mut((o, o), (b.nrows(), b.ncols())).copy_from(b);
        o += b.nrows();
    }
    out
}

/// Weighted mean of row-vectors with equal weights.
pub fn mean_of(vs: &[Vector]) -> Vector {
    let mut m = Vector::zeros(vs[0].len());
    for v in vs {
        m += v;
    }
    m / vs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn chol_identity() {
        let l = chol_psd(&Matrix::identity(3, 3), 0.0).unwrap();
        assert_eq!(l, Matrix::identity(3, 3));
    }

    #[test]
    fn chol_reproduces_input() {
        let m = Matrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let l = chol_psd(&m, 0.0).unwrap();
        let back = &l * l.transpose();
        for (a, b) in back.iter().zip(m.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert_eq!(l[(0, 1)], 0.0);
    }

    #[test]
    fn chol_zero_matrix_takes_jitter() {
        let l = chol_psd(&Matrix::zeros(2, 2), 1e-8).unwrap();
        assert_relative_eq!(l, Matrix::identity(2, 2) * 1e-4, epsilon = 1e-18);
    }

    #[test]
    fn chol_escalates_ladder_for_singular_input() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = chol_psd(&m, 0.0).unwrap();
        let back = &l * l.transpose();
        assert!((back - m).norm() < 1e-8);
    }

    #[test]
    fn chol_rejects_indefinite() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            chol_psd(&m, 0.0),
            Err(MpicError::NotPositiveSemiDefinite { .. })
        ));
    }

    #[test]
    fn chol_rejects_non_square() {
        assert!(matches!(
            chol_psd(&Matrix::zeros(2, 3), 0.0),
            Err(MpicError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn normalize_examples() {
        let w = normalize_log_weights(&[0.0, 0.0, 0.0]).unwrap();
        for v in w.as_slice() {
            assert_relative_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let w = normalize_log_weights(&[0.0, f64::NEG_INFINITY]).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 0.0]);

        // e^{-1000} / (e^{-1000} + e^{-1001}) = e / (1 + e)
        let e = std::f64::consts::E;
        let w = normalize_log_weights(&[-1000.0, -1001.0]).unwrap();
        assert_relative_eq!(w.as_slice()[0], e / (1.0 + e), epsilon = 1e-15);
        assert_relative_eq!(w.as_slice()[1], 1.0 / (1.0 + e), epsilon = 1e-15);
        assert_relative_eq!(w.as_slice()[0], 0.7311, epsilon = 1e-4);
    }

    #[test]
    fn normalize_all_neg_inf_is_degenerate() {
        assert_eq!(
            normalize_log_weights(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            Err(MpicError::AllWeightsDegenerate)
        );
    }

    #[test]
    fn resample_uniform_is_identity() {
        let w = WeightVector::uniform(4);
        assert_eq!(systematic_resample(&w, 0.0), vec![0, 1, 2, 3]);
    }

    #[test]
    fn resample_point_mass() {
        let w = WeightVector::from_normalized(vec![1.0, 0.0, 0.0]);
        for u0 in [0.0, 0.3, 0.999] {
            assert_eq!(systematic_resample(&w, u0), vec![0, 0, 0]);
        }
    }

    #[test]
    fn resample_counts_within_floor_ceil() {
        // Strata positions (u0 + k)/10 against cumulative [0.5, 0.8, 1.0]:
        // u0 = 0   -> positions 0.0..0.9 -> counts (5, 3, 2)
        // u0 = 0.5 -> positions 0.05..0.95 -> counts (5, 3, 2)
        let w = WeightVector::from_normalized(vec![0.5, 0.3, 0.2]);
        for u0 in [0.0, 0.5] {
            let idx = systematic_resample_n(&w, u0, 10);
            assert_eq!(idx.len(), 10);
            let mut counts = [0usize; 3];
            for i in idx {
                counts[i] += 1;
            }
            assert_eq!(counts, [5, 3, 2]);
        }
    }

    #[test]
    fn logpdf_examples() {
        let zero = Vector::zeros(1);
        let one = Matrix::identity(1, 1);
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(
            gaussian_logpdf(&zero, &zero, &one).unwrap(),
            -half_ln_2pi,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            gaussian_logpdf(&Vector::from_element(1, 1.0), &zero, &one).unwrap(),
            -0.5 - half_ln_2pi,
            epsilon = 1e-15
        );
        let p = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 3.0]));
        let x = Vector::from_vec(vec![1.0, 1.0]);
        let expected = -0.5 * (0.5 + 1.0 / 3.0)
            - 0.5 * ((2.0 * std::f64::consts::PI).powi(2) * 6.0).ln();
        assert_relative_eq!(
            gaussian_logpdf(&x, &Vector::zeros(2), &p).unwrap(),
            expected,
            epsilon = 1e-14
        );
    }

    #[test]
    fn logpdf_dimension_mismatch() {
        let r = gaussian_logpdf(&Vector::zeros(2), &Vector::zeros(3), &Matrix::identity(2, 2));
        assert!(matches!(r, Err(MpicError::DimensionMismatch(_))));
    }

    #[test]
    fn block_diag_layout() {
        let a = Matrix::identity(2, 2);
        let b = Matrix::from_element(1, 1, 5.0);
        let d = block_diag(&[&a, &b]);
        assert_eq!(d[(2, 2)], 5.0);
        assert_eq!(d[(0, 2)], 0.0);
        assert_eq!(d[(1, 1)], 1.0);
    }
}
