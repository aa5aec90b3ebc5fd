//! Cholesky factorization with jitter escalation and triangular-solve helpers.

use nalgebra::{DMatrix, DVector};

use crate::error::{GpError, Result};

/// First jitter tried, relative to the signal variance.
pub const JITTER_START: f64 = 1e-10;
/// Largest jitter tried before giving up, relative to the signal variance.
pub const JITTER_MAX: f64 = 1e-4;

/// Lower Cholesky factor of a symmetric positive-definite matrix.
#[derive(Clone, Debug)]
pub struct CholFactor {
    pub l: DMatrix<f64>,
    /// Absolute jitter that was added to the diagonal (0 if none).
    pub jitter: f64,
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// `L^{-1} B`.
    pub fn solve_l(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        if self.dim() > 0 {
            self.l.solve_lower_triangular_mut(&mut x);
        }
        x
    }

    pub fn solve_l_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        if self.dim() > 0 {
            self.l.solve_lower_triangular_mut(&mut x);
        }
        x
    }

    /// `L^{-T} B`.
    pub fn solve_lt(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        if self.dim() > 0 {
            self.l.tr_solve_lower_triangular_mut(&mut x);
        }
        x
    }

    pub fn solve_lt_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        if self.dim() > 0 {
            self.l.tr_solve_lower_triangular_mut(&mut x);
        }
        x
    }

    /// `A^{-1} B` for the factored matrix `A = L L^T`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.solve_lt(&self.solve_l(b))
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.solve_lt_vec(&self.solve_l_vec(b))
    }

    /// `A^{-1}` formed by two triangular solves against the identity.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve(&DMatrix::identity(self.dim(), self.dim()))
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// `L L^T`, the matrix that was actually factored (jitter included).
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }
}

fn try_cholesky(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if a.nrows() == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    let c = nalgebra::Cholesky::new(a.clone())?;
    let l = c.l();
    if l.diagonal().iter().all(|v| v.is_finite() && *v > 0.0) {
        Some(l)
    } else {
        None
    }
}

/// Factors a symmetric matrix, retrying with jitter `1e-10 * scale`,
/// escalating by 10x up to `1e-4 * scale` when the plain factorization fails.
pub fn cholesky_jitter(a: &DMatrix<f64>, scale: f64, context: &'static str) -> Result<CholFactor> {
    if let Some(l) = try_cholesky(a) {
        return Ok(CholFactor { l, jitter: 0.0 });
    }
    let mut trail = vec![0.0];
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = rel * scale;
        trail.push(jitter);
        let mut aj = a.clone();
        for i in 0..aj.nrows() {
            aj[(i, i)] += jitter;
        }
        if let Some(l) = try_cholesky(&aj) {
            log::debug!("{context}: cholesky needed jitter {jitter:e}");
            return Ok(CholFactor { l, jitter });
        }
        rel *= 10.0;
    }
    Err(GpError::Factorization {
        context,
        jitter_trail: trail,
    })
}

/// Adds `v` to every diagonal entry in place.
pub(crate) fn add_diag(a: &mut DMatrix<f64>, v: f64) {
    for i in 0..a.nrows().min(a.ncols()) {
        a[(i, i)] += v;
    }
}

/// Relative Frobenius distance `|a - b| / |b|`.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = b.norm().max(f64::MIN_POSITIVE);
    (a - b).norm() / denom
}
