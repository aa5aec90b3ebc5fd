//! Exact Gaussian-process regression.
//!
//! The exact model is the reference every approximation is checked against:
//! negative log marginal likelihood with analytic gradients, hyperparameter
//! fitting and closed-form prediction, all through one Cholesky factor of
//! `K_nn + sigma_eps^2 I`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{check_dim, GpError, Result};
use crate::kernel::{self, GradSink, Hyperparameters};
use crate::linalg::{add_diag, cholesky_jitter, CholFactor};
use crate::optimize::{minimize_deterministic, DeterministicConfig, OptTrace};
use crate::predictive::{Flavor, PredictiveDistribution};

/// Largest training set the exact model accepts by default.
pub const DEFAULT_EXACT_CAP: usize = 10_000;

/// Exact GP with fitted hyperparameters and cached factorization.
#[derive(Clone, Debug)]
pub struct TrainedFullGP {
    pub dataset: Dataset,
    pub hp: Hyperparameters,
    /// Factor of `K_nn + sigma_eps^2 I` (plus jitter, if any was needed).
    pub chol: CholFactor,
    /// `(K_nn + sigma_eps^2 I)^{-1} y`.
    pub alpha: DVector<f64>,
    pub nlml: f64,
    pub trace: Option<OptTrace>,
}

struct Factored {
    chol: CholFactor,
    alpha: DVector<f64>,
    nlml: f64,
    /// `K_nn` plus jitter, without the noise term.
    k_signal: DMatrix<f64>,
}

fn factor(data: &Dataset, hp: &Hyperparameters) -> Result<Factored> {
    check_dim("full GP: hyperparameter dimension", data.d(), hp.dim())?;
    hp.validate()?;
    let mut k = kernel::cross(&data.x, &data.x, hp);
    let noise = hp.noise_var();
    add_diag(&mut k, noise);
    let chol = cholesky_jitter(&k, hp.signal_var(), "full GP covariance")?;
    let alpha = chol.solve_vec(&data.y);
    let n = data.n() as f64;
    let nlml = 0.5 * data.y.dot(&alpha) + 0.5 * chol.log_det() + 0.5 * n * (2.0 * PI).ln();
    add_diag(&mut k, chol.jitter - noise);
    Ok(Factored {
        chol,
        alpha,
        nlml,
        k_signal: k,
    })
}

fn check_cap(data: &Dataset, cap: usize) -> Result<()> {
    if data.n() > cap {
        Err(GpError::invalid(format!(
            "exact GP refused: n = {} exceeds the cap of {cap}",
            data.n()
        )))
    } else {
        Ok(())
    }
}

/// Negative log marginal likelihood and its gradient with respect to the
/// flat log-hyperparameter vector.
pub fn nlml(data: &Dataset, hp: &Hyperparameters) -> Result<(f64, Vec<f64>)> {
    nlml_capped(data, hp, DEFAULT_EXACT_CAP)
}

pub fn nlml_capped(data: &Dataset, hp: &Hyperparameters, cap: usize) -> Result<(f64, Vec<f64>)> {
    check_cap(data, cap)?;
    let f = factor(data, hp)?;
    // dNLML/dtheta = 0.5 tr((K^{-1} - alpha alpha^T) dK/dtheta)
    let mut w = f.chol.inverse();
    w.ger(-1.0, &f.alpha, &f.alpha, 1.0);
    let mut grad = vec![0.0; hp.n_params()];
    let x_t = kernel::points(&data.x);
    let half_w = &w * 0.5;
    kernel::chain_self(&x_t, &f.k_signal, &half_w, hp, &mut GradSink { hp: &mut grad, z: None });
    grad[hp.noise_index()] = 0.5 * hp.noise_var() * w.trace();
    Ok((f.nlml, grad))
}

/// Builds the trained model at fixed hyperparameters (no optimization).
pub fn condition(data: &Dataset, hp: &Hyperparameters) -> Result<TrainedFullGP> {
    check_cap(data, DEFAULT_EXACT_CAP)?;
    let f = factor(data, hp)?;
    Ok(TrainedFullGP {
        dataset: data.clone(),
        hp: hp.clone(),
        chol: f.chol,
        alpha: f.alpha,
        nlml: f.nlml,
        trace: None,
    })
}

/// Fits hyperparameters by minimizing the NLML from `hp0`.
pub fn fit(data: &Dataset, hp0: &Hyperparameters, cfg: &DeterministicConfig) -> Result<TrainedFullGP> {
    check_cap(data, DEFAULT_EXACT_CAP)?;
    hp0.validate()?;
    let d = hp0.dim();
    let res = minimize_deterministic(
        |p: &[f64]| nlml(data, &Hyperparameters::from_slice(d, p)),
        &hp0.to_vec(),
        cfg,
    )?;
    let hp = Hyperparameters::from_slice(d, &res.x);
    let mut model = condition(data, &hp)?;
    model.trace = Some(res.trace);
    Ok(model)
}

impl TrainedFullGP {
    /// Latent mean and (unclamped) variance at each row of `xstar`.
    pub fn latent_moments(&self, xstar: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim("full GP predict: input columns", self.hp.dim(), xstar.ncols())?;
        let k_ns = kernel::cross(&self.dataset.x, xstar, &self.hp);
        let mean = k_ns.tr_mul(&self.alpha);
        let v = self.chol.solve_l(&k_ns);
        let sf2 = self.hp.signal_var();
        let var = v.column_iter().map(|c| sf2 - c.norm_squared()).collect();
        Ok((mean.as_slice().to_vec(), var))
    }

    pub fn predict(&self, xstar: &DMatrix<f64>, flavor: Flavor) -> Result<PredictiveDistribution> {
        let (mean, var) = self.latent_moments(xstar)?;
        Ok(PredictiveDistribution::from_latent(mean, var, self.hp.noise_var(), flavor))
    }

    /// Negative log marginal likelihood recomputed from the cached factor.
    pub fn nlml_from_cache(&self) -> f64 {
        let n = self.dataset.n() as f64;
        0.5 * self.dataset.y.dot(&self.alpha) + 0.5 * self.chol.log_det() + 0.5 * n * (2.0 * PI).ln()
    }
}

/// Free-function form of [`TrainedFullGP::predict`].
pub fn predict(model: &TrainedFullGP, xstar: &DMatrix<f64>, flavor: Flavor) -> Result<PredictiveDistribution> {
    model.predict(xstar, flavor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rel_frobenius;
    use crate::optimize::check_gradient;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_point(y: f64) -> Dataset {
        Dataset::new(DMatrix::from_element(1, 1, 0.3), DVector::from_element(1, y)).unwrap()
    }

    fn random_data(seed: u64, n: usize, d: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: DMatrix<f64> = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
        let y = DVector::from_fn(n, |i, _| x[(i, 0)].sin() + rng.random_range(-0.3..0.3));
        Dataset::new(x, y).unwrap()
    }

    /// Dense log-density of N(0, K + s I) by LU determinant and solve.
    fn dense_log_density(data: &Dataset, hp: &Hyperparameters) -> f64 {
        let n = data.n();
        let mut c = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let xi: Vec<f64> = data.x.row(i).iter().copied().collect();
                let xj: Vec<f64> = data.x.row(j).iter().copied().collect();
                c[(i, j)] = kernel::se_ard(&xi, &xj, hp).unwrap();
            }
            c[(i, i)] += hp.noise_var();
        }
        let lu = c.clone().lu();
        let sol = lu.solve(&data.y).unwrap();
        -0.5 * data.y.dot(&sol) - 0.5 * lu.determinant().ln() - 0.5 * n as f64 * (2.0 * PI).ln()
    }

    #[test]
    fn single_point_values() {
        let hp = Hyperparameters::new(&[1.0], 1.0, 1e-12).unwrap();
        let (v, _) = nlml(&one_point(0.0), &hp).unwrap();
        assert_relative_eq!(v, 0.918_938_533_204_672_8, epsilon = 1e-9);
        let hp = Hyperparameters::new(&[1.0], 0.75, 0.25).unwrap();
        let (v, _) = nlml(&one_point(1.0), &hp).unwrap();
        assert_relative_eq!(v, 1.418_938_533_204_673, epsilon = 1e-12);
    }

    #[test]
    fn matches_dense_density() {
        let data = random_data(2, 3, 2);
        let hp = Hyperparameters::new(&[0.8, 1.4], 1.3, 0.2).unwrap();
        let (v, _) = nlml(&data, &hp).unwrap();
        assert_relative_eq!(v, -dense_log_density(&data, &hp), epsilon = 1e-10);
    }

    #[test]
    fn cached_factor_invariants() {
        let data = random_data(3, 20, 2);
        let hp = Hyperparameters::new(&[0.8, 1.4], 1.3, 0.2).unwrap();
        let m = condition(&data, &hp).unwrap();
        let mut k = kernel::cross(&data.x, &data.x, &hp);
        add_diag(&mut k, hp.noise_var() + m.chol.jitter);
        assert!(rel_frobenius(&m.chol.reconstruct(), &k) < 1e-8);
        assert_relative_eq!(m.nlml, m.nlml_from_cache(), epsilon = 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = random_data(4, 30, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..50 {
            let p = vec![
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-3.0..0.0),
            ];
            let c = check_gradient(|q: &[f64]| nlml(&data, &Hyperparameters::from_slice(2, q)), &p, 1e-5).unwrap();
            assert!(c.max_rel_error < 1e-5, "{:?}", c);
        }
    }

    #[test]
    fn noiseless_interpolation_and_prior_reversion() {
        let data = random_data(5, 8, 1);
        let hp = Hyperparameters::new(&[0.7], 1.5, 1e-10).unwrap();
        let m = condition(&data, &hp).unwrap();
        let p = m.predict(&data.x, Flavor::Latent).unwrap();
        for i in 0..8 {
            assert!((p.mean[i] - data.y[i]).abs() < 1e-6);
            assert!(p.variance[i] < 1e-8);
        }
        let far = DMatrix::from_element(1, 1, 2.0 + 10.0 * 0.7 + 1.0);
        let p = m.predict(&far, Flavor::Latent).unwrap();
        assert!(p.mean[0].abs() < 1e-6);
        assert!((p.variance[0] - 1.5).abs() < 1e-6);
    }

    #[test]
    fn single_training_point_closed_form() {
        let hp = Hyperparameters::new(&[0.9], 1.2, 0.3).unwrap();
        let m = condition(&one_point(0.7), &hp).unwrap();
        let xs = DMatrix::from_element(1, 1, -0.4);
        let k = kernel::se_ard(&[-0.4], &[0.3], &hp).unwrap();
        let p = m.predict(&xs, Flavor::Observed).unwrap();
        assert_relative_eq!(p.mean[0], k * 0.7 / 1.5, epsilon = 1e-12);
        assert_relative_eq!(p.variance[0], 1.2 - k * k / 1.5 + 0.3, epsilon = 1e-12);
    }

    #[test]
    fn stationary_start_is_kept() {
        let hp0 = Hyperparameters::new(&[1.0], 0.5, 0.5).unwrap();
        let m = fit(&one_point(1.0), &hp0, &DeterministicConfig::default()).unwrap();
        assert_eq!(m.hp, hp0);
        let (_, g) = nlml(&one_point(1.0), &hp0).unwrap();
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-6);
    }

    #[test]
    fn fit_improves_on_start() {
        let data = random_data(6, 40, 2);
        let hp0 = Hyperparameters::default_init(2);
        let (v0, _) = nlml(&data, &hp0).unwrap();
        let m = fit(&data, &hp0, &DeterministicConfig::default()).unwrap();
        assert!(m.nlml <= v0);
    }

    #[test]
    fn permutation_invariance() {
        let data = random_data(7, 15, 2);
        let hp = Hyperparameters::new(&[0.8, 1.4], 1.3, 0.2).unwrap();
        let perm: Vec<usize> = (0..15).rev().collect();
        let a = condition(&data, &hp).unwrap();
        let b = condition(&data.subset(&perm), &hp).unwrap();
        let xs = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, -1.0, 0.5]);
        let pa = a.predict(&xs, Flavor::Latent).unwrap();
        let pb = b.predict(&xs, Flavor::Latent).unwrap();
        for i in 0..2 {
            assert_relative_eq!(pa.mean[i], pb.mean[i], epsilon = 1e-10);
            assert_relative_eq!(pa.variance[i], pb.variance[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn cap_and_dimension_checks() {
        let data = random_data(8, 5, 2);
        let hp = Hyperparameters::default_init(2);
        assert!(nlml_capped(&data, &hp, 4).is_err());
        assert!(nlml(&data, &Hyperparameters::default_init(3)).is_err());
        let m = condition(&data, &hp).unwrap();
        assert!(m.predict(&DMatrix::zeros(1, 3), Flavor::Latent).is_err());
    }
}
