//! Squared-exponential ARD kernel, kernel matrices and analytic derivatives.
//!
//! All positive hyperparameters live in log space. The flat parameter layout
//! used by every objective in the crate is
//! `[log l_1, .., log l_d, log sigma_f^2, log sigma_eps^2]`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, GpError, Result};
use crate::par;

/// Kernel and likelihood hyperparameters, stored as logarithms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub log_lengthscales: Vec<f64>,
    pub log_signal_var: f64,
    pub log_noise_var: f64,
}

impl Hyperparameters {
    /// Builds hyperparameters from positive (non-log) values.
    pub fn new(lengthscales: &[f64], signal_var: f64, noise_var: f64) -> Result<Self> {
        let hp = Hyperparameters {
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
            log_signal_var: signal_var.ln(),
            log_noise_var: noise_var.ln(),
        };
        hp.validate()?;
        Ok(hp)
    }

    /// Same length-scale on every input dimension.
    pub fn isotropic(d: usize, lengthscale: f64, signal_var: f64, noise_var: f64) -> Result<Self> {
        Self::new(&vec![lengthscale; d], signal_var, noise_var)
    }

    /// The initialization used throughout the experiments: l = 0.5,
    /// sigma_f^2 = 1, sigma_eps^2 = 0.1 on normalized data.
    pub fn default_init(d: usize) -> Self {
        Self::isotropic(d, 0.5, 1.0, 0.1).expect("constant init is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.log_lengthscales.is_empty() {
            return Err(GpError::invalid("hyperparameters need at least one length-scale"));
        }
        let ok = self
            .log_lengthscales
            .iter()
            .chain([&self.log_signal_var, &self.log_noise_var])
            .all(|v| v.is_finite() && v.exp().is_finite() && v.exp() > 0.0);
        if ok {
            Ok(())
        } else {
            Err(GpError::invalid(format!(
                "hyperparameters must be finite and positive: {self:?}"
            )))
        }
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    /// Number of entries in the flat parameter vector.
    pub fn n_params(&self) -> usize {
        self.dim() + 2
    }

    pub fn lengthscale(&self, i: usize) -> f64 {
        self.log_lengthscales[i].exp()
    }

    pub fn signal_var(&self) -> f64 {
        self.log_signal_var.exp()
    }

    pub fn noise_var(&self) -> f64 {
        self.log_noise_var.exp()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.log_lengthscales.clone();
        v.push(self.log_signal_var);
        v.push(self.log_noise_var);
        v
    }

    pub fn from_slice(d: usize, p: &[f64]) -> Self {
        Hyperparameters {
            log_lengthscales: p[..d].to_vec(),
            log_signal_var: p[d],
            log_noise_var: p[d + 1],
        }
    }

    /// Index of log sigma_f^2 in the flat vector.
    pub fn signal_index(&self) -> usize {
        self.dim()
    }

    /// Index of log sigma_eps^2 in the flat vector.
    pub fn noise_index(&self) -> usize {
        self.dim() + 1
    }

    pub(crate) fn inv_sq_lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| (-2.0 * l).exp()).collect()
    }
}

/// A kernel matrix together with the diagonal jitter added to it.
#[derive(Clone, Debug)]
pub struct KernelMatrix {
    pub values: DMatrix<f64>,
    pub jitter_applied: f64,
}

/// Selects the quantity a kernel-matrix derivative is taken with respect to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelParam {
    LogLengthscale(usize),
    LogSignalVar,
    /// Coordinate `dim` of row `row` of the first argument, as when that row
    /// is an inducing input. The second argument is held fixed.
    InputCoordinate { row: usize, dim: usize },
}

#[inline]
pub(crate) fn se_ard_raw(x: &[f64], y: &[f64], inv_l2: &[f64], sf2: f64) -> f64 {
    let mut s = 0.0;
    for ((a, b), w) in x.iter().zip(y).zip(inv_l2) {
        let t = a - b;
        s += t * t * w;
    }
    sf2 * (-0.5 * s).exp()
}

/// Squared-exponential ARD kernel value between two points.
pub fn se_ard(x: &[f64], x_prime: &[f64], hp: &Hyperparameters) -> Result<f64> {
    check_dim("se_ard: x", hp.dim(), x.len())?;
    check_dim("se_ard: x'", hp.dim(), x_prime.len())?;
    Ok(se_ard_raw(x, x_prime, &hp.inv_sq_lengthscales(), hp.signal_var()))
}

/// Rows of `m` as contiguous vectors (points in a column-major layout).
pub(crate) fn points(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.transpose()
}

/// `K(A, B)` without input validation; `a_t`, `b_t` hold points as columns.
pub(crate) fn cross_from_points(a_t: &DMatrix<f64>, b_t: &DMatrix<f64>, hp: &Hyperparameters) -> DMatrix<f64> {
    let inv_l2 = hp.inv_sq_lengthscales();
    let sf2 = hp.signal_var();
    let na = a_t.ncols();
    let nb = b_t.ncols();
    let cols = par::map_indices(nb, |j| {
        let bj = b_t.column(j);
        let bj = bj.as_slice();
        (0..na)
            .map(|i| se_ard_raw(a_t.column(i).as_slice(), bj, &inv_l2, sf2))
            .collect::<Vec<f64>>()
    });
    DMatrix::from_iterator(na, nb, cols.into_iter().flatten())
}

pub(crate) fn cross(a: &DMatrix<f64>, b: &DMatrix<f64>, hp: &Hyperparameters) -> DMatrix<f64> {
    cross_from_points(&points(a), &points(b), hp)
}

/// Kernel matrix `K(A, B)` with rows of `A` and `B` as inputs. No jitter.
pub fn kernel_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, hp: &Hyperparameters) -> Result<KernelMatrix> {
    check_dim("kernel_matrix: A columns", hp.dim(), a.ncols())?;
    check_dim("kernel_matrix: B columns", hp.dim(), b.ncols())?;
    Ok(KernelMatrix {
        values: cross(a, b, hp),
        jitter_applied: 0.0,
    })
}

/// Analytic derivative of `K(A, B)` with respect to one parameter.
pub fn kernel_gradients(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    hp: &Hyperparameters,
    wrt: KernelParam,
) -> Result<DMatrix<f64>> {
    check_dim("kernel_gradients: A columns", hp.dim(), a.ncols())?;
    check_dim("kernel_gradients: B columns", hp.dim(), b.ncols())?;
    let k = cross(a, b, hp);
    match wrt {
        KernelParam::LogSignalVar => Ok(k),
        KernelParam::LogLengthscale(i) => {
            if i >= hp.dim() {
                return Err(GpError::invalid(format!(
                    "length-scale index {i} out of range for d = {}",
                    hp.dim()
                )));
            }
            let w = (-2.0 * hp.log_lengthscales[i]).exp();
            Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |r, c| {
                let t = a[(r, i)] - b[(c, i)];
                k[(r, c)] * t * t * w
            }))
        }
        KernelParam::InputCoordinate { row, dim } => {
            if row >= a.nrows() || dim >= hp.dim() {
                return Err(GpError::invalid(format!(
                    "input coordinate ({row}, {dim}) out of range for {}x{}",
                    a.nrows(),
                    hp.dim()
                )));
            }
            let w = (-2.0 * hp.log_lengthscales[dim]).exp();
            let mut g = DMatrix::zeros(a.nrows(), b.nrows());
            for c in 0..b.nrows() {
                g[(row, c)] = -k[(row, c)] * (a[(row, dim)] - b[(c, dim)]) * w;
            }
            Ok(g)
        }
    }
}

/// Gradient sink for the chain rule from kernel-matrix sensitivities to
/// hyperparameters and inducing inputs.
///
/// `hp` collects the flat hyperparameter gradient (length d + 2); `z`, when
/// present, collects the gradient with respect to the inducing inputs.
pub(crate) struct GradSink<'a> {
    pub hp: &'a mut [f64],
    pub z: Option<&'a mut DMatrix<f64>>,
}

/// Adds `sum_ij g_ij dK(X, Z)_ij / dtheta` for an `n x m` cross-covariance.
/// `x_t`, `z_t` hold points as columns; `k` is `K(X, Z)`.
pub(crate) fn chain_cross(
    x_t: &DMatrix<f64>,
    z_t: &DMatrix<f64>,
    k: &DMatrix<f64>,
    g: &DMatrix<f64>,
    hp: &Hyperparameters,
    sink: &mut GradSink<'_>,
) {
    let d = hp.dim();
    let inv_l2 = hp.inv_sq_lengthscales();
    let n = x_t.ncols();
    let want_z = sink.z.is_some();
    // per inducing column: (lengthscale partials, signal partial, z-row gradient)
    let parts = par::map_indices(z_t.ncols(), |j| {
        let zj = z_t.column(j);
        let mut ls = vec![0.0; d];
        let mut sig = 0.0;
        let mut zg = vec![0.0; d];
        for i in 0..n {
            let w = g[(i, j)] * k[(i, j)];
            if w == 0.0 {
                continue;
            }
            sig += w;
            let xi = x_t.column(i);
            for q in 0..d {
                let t = xi[q] - zj[q];
                ls[q] += w * t * t * inv_l2[q];
                if want_z {
                    zg[q] += w * t * inv_l2[q];
                }
            }
        }
        (ls, sig, zg)
    });
    for (j, (ls, sig, zg)) in parts.into_iter().enumerate() {
        for q in 0..d {
            sink.hp[q] += ls[q];
        }
        sink.hp[d] += sig;
        if let Some(zs) = sink.z.as_deref_mut() {
            for q in 0..d {
                zs[(j, q)] += zg[q];
            }
        }
    }
}

/// Adds `sum_rs g_rs dK(Z, Z)_rs / dtheta` for a self-covariance.
///
/// `g` must be symmetric. `k` is the jittered matrix; jitter proportional to
/// sigma_f^2 differentiates consistently with respect to log sigma_f^2 and is
/// constant for every other parameter.
pub(crate) fn chain_self(
    z_t: &DMatrix<f64>,
    k: &DMatrix<f64>,
    g: &DMatrix<f64>,
    hp: &Hyperparameters,
    sink: &mut GradSink<'_>,
) {
    let d = hp.dim();
    let inv_l2 = hp.inv_sq_lengthscales();
    let m = z_t.ncols();
    let want_z = sink.z.is_some();
    let parts = par::map_indices(m, |r| {
        let zr = z_t.column(r);
        let mut ls = vec![0.0; d];
        let mut sig = 0.0;
        let mut zg = vec![0.0; d];
        for s in 0..m {
            let w = g[(r, s)] * k[(r, s)];
            sig += w;
            if s == r || w == 0.0 {
                continue;
            }
            let zs = z_t.column(s);
            for q in 0..d {
                let t = zs[q] - zr[q];
                ls[q] += w * t * t * inv_l2[q];
                if want_z {
                    zg[q] += 2.0 * w * t * inv_l2[q];
                }
            }
        }
        (ls, sig, zg)
    });
    for (r, (ls, sig, zg)) in parts.into_iter().enumerate() {
        for q in 0..d {
            sink.hp[q] += ls[q];
        }
        sink.hp[d] += sig;
        if let Some(zs) = sink.z.as_deref_mut() {
            for q in 0..d {
                zs[(r, q)] += zg[q];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn zero_distance_gives_signal_variance() {
        let hp = Hyperparameters::new(&[0.3, 2.0], 2.5, 0.1).unwrap();
        assert_relative_eq!(se_ard(&[1.0, -1.0], &[1.0, -1.0], &hp).unwrap(), 2.5, epsilon = 1e-14);
    }

    #[test]
    fn hand_values() {
        let hp = Hyperparameters::new(&[1.0], 1.0, 0.1).unwrap();
        assert_relative_eq!(se_ard(&[0.0], &[1.0], &hp).unwrap(), 0.606_530_659_712_633_4, epsilon = 1e-12);
        let hp = Hyperparameters::new(&[1.0, 2.0], 4.0, 0.1).unwrap();
        assert_relative_eq!(
            se_ard(&[0.0, 0.0], &[1.0, 2.0], &hp).unwrap(),
            4.0 * (-1.0f64).exp(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let hp = Hyperparameters::isotropic(2, 1.0, 1.0, 0.1).unwrap();
        assert!(matches!(
            se_ard(&[0.0], &[1.0, 2.0], &hp),
            Err(GpError::DimensionMismatch { .. })
        ));
        let a = DMatrix::zeros(3, 3);
        assert!(kernel_matrix(&a, &a, &hp).is_err());
    }

    #[test]
    fn single_row_matrix() {
        let hp = Hyperparameters::isotropic(3, 0.7, 1.7, 0.1).unwrap();
        let a = DMatrix::from_row_slice(1, 3, &[0.1, 0.2, 0.3]);
        let k = kernel_matrix(&a, &a, &hp).unwrap();
        assert_eq!(k.jitter_applied, 0.0);
        assert_relative_eq!(k.values[(0, 0)], 1.7, epsilon = 1e-14);
    }

    #[test]
    fn matrix_matches_elementwise_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hp = Hyperparameters::new(&[0.5, 1.3, 2.0], 1.4, 0.2).unwrap();
        let a = random_matrix(&mut rng, 5, 3);
        let b = random_matrix(&mut rng, 4, 3);
        let k = kernel_matrix(&a, &b, &hp).unwrap().values;
        for i in 0..5 {
            for j in 0..4 {
                // oracle: direct formula, independent of se_ard_raw
                let mut s = 0.0;
                for q in 0..3 {
                    s += (a[(i, q)] - b[(j, q)]).powi(2) / hp.lengthscale(q).powi(2);
                }
                assert_relative_eq!(k[(i, j)], 1.4 * (-0.5 * s).exp(), max_relative = 1e-13);
            }
        }
        let ks = kernel_matrix(&a, &a, &hp).unwrap().values;
        assert_relative_eq!(ks.clone(), ks.transpose(), max_relative = 1e-12);
    }

    #[test]
    fn signal_gradient_is_kernel_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hp = Hyperparameters::new(&[0.5, 1.3], 1.4, 0.2).unwrap();
        let a = random_matrix(&mut rng, 6, 2);
        let g = kernel_gradients(&a, &a, &hp, KernelParam::LogSignalVar).unwrap();
        assert_eq!(g, kernel_matrix(&a, &a, &hp).unwrap().values);
        let gl = kernel_gradients(&a, &a, &hp, KernelParam::LogLengthscale(1)).unwrap();
        for i in 0..6 {
            assert_eq!(gl[(i, i)], 0.0);
        }
    }

    #[test]
    fn selector_out_of_range() {
        let hp = Hyperparameters::isotropic(2, 1.0, 1.0, 0.1).unwrap();
        let a = DMatrix::zeros(3, 2);
        assert!(kernel_gradients(&a, &a, &hp, KernelParam::LogLengthscale(2)).is_err());
        assert!(kernel_gradients(&a, &a, &hp, KernelParam::InputCoordinate { row: 3, dim: 0 }).is_err());
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-5;
        for _ in 0..20 {
            let hp = Hyperparameters::new(
                &[rng.random_range(0.3..2.0), rng.random_range(0.3..2.0)],
                rng.random_range(0.5..2.0),
                0.1,
            )
            .unwrap();
            let a = random_matrix(&mut rng, 4, 2);
            let b = random_matrix(&mut rng, 3, 2);
            for (sel, idx) in [
                (KernelParam::LogLengthscale(0), 0usize),
                (KernelParam::LogLengthscale(1), 1),
                (KernelParam::LogSignalVar, 2),
            ] {
                let g = kernel_gradients(&a, &b, &hp, sel).unwrap();
                let mut p = hp.to_vec();
                p[idx] += h;
                let kp = cross(&a, &b, &Hyperparameters::from_slice(2, &p));
                p[idx] -= 2.0 * h;
                let km = cross(&a, &b, &Hyperparameters::from_slice(2, &p));
                let fd = (kp - km) / (2.0 * h);
                for (x, y) in g.iter().zip(fd.iter()) {
                    assert!((x - y).abs() / (1e-8f64).max(x.abs() + y.abs()) < 1e-6);
                }
            }
            let sel = KernelParam::InputCoordinate { row: 2, dim: 1 };
            let g = kernel_gradients(&a, &b, &hp, sel).unwrap();
            let mut ap = a.clone();
            ap[(2, 1)] += h;
            let mut am = a.clone();
            am[(2, 1)] -= h;
            let fd = (cross(&ap, &b, &hp) - cross(&am, &b, &hp)) / (2.0 * h);
            for (x, y) in g.iter().zip(fd.iter()) {
                assert!((x - y).abs() / (1e-8f64).max(x.abs() + y.abs()) < 1e-6);
            }
        }
    }
}
