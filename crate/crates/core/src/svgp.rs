//! Stochastic variational GP.
//!
//! The uncollapsed bound keeps an explicit `q(f_m) = N(mean, S)` with
//! `S = L L^T`. Its data term is a sum over points, so an unbiased estimate
//! comes from a minibatch rescaled by `n / b`; the KL term is added once.
//!
//! Per point, with `p_i = K_mm^{-1} k_mi`, the Gaussian expectation is
//!
//! ```text
//! E[log N(y_i | f_i, s2)] = -0.5 log(2 pi s2)
//!     - 0.5 / s2 * ((y_i - p_i^T mean)^2 + k_ii - k_mi^T p_i + p_i^T S p_i)
//! ```
//!
//! Training moves in whitened coordinates, `mean = L_mm w` and
//! `L = L_mm L_w`, which keeps the problem well scaled when `Z` and the
//! hyperparameters change.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_dim, GpError, Result};
use crate::kernel::{self, GradSink, Hyperparameters};
use crate::linalg::{add_diag, cholesky_jitter, CholFactor};
use crate::optimize::{minimize_stochastic, OptTrace, StochasticConfig};
use crate::predictive::{Flavor, PredictiveDistribution};
use crate::sparse::InducingSet;

/// `q(f_m) = N(mean, cov_factor cov_factor^T)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub mean: DVector<f64>,
    /// Lower triangular with a positive diagonal.
    pub cov_factor: DMatrix<f64>,
}

impl VariationalState {
    pub fn new(mean: DVector<f64>, cov_factor: DMatrix<f64>) -> Result<Self> {
        let vs = VariationalState { mean, cov_factor };
        vs.validate()?;
        Ok(vs)
    }

    pub fn m(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.mean.len();
        check_dim("variational factor rows", m, self.cov_factor.nrows())?;
        check_dim("variational factor columns", m, self.cov_factor.ncols())?;
        for i in 0..m {
            if !(self.cov_factor[(i, i)] > 0.0) {
                return Err(GpError::invalid(format!("variational factor diagonal {i} is not positive")));
            }
            for j in (i + 1)..m {
                if self.cov_factor[(i, j)] != 0.0 {
                    return Err(GpError::invalid("variational factor must be lower triangular"));
                }
            }
        }
        if !self.mean.iter().chain(self.cov_factor.iter()).all(|v| v.is_finite()) {
            return Err(GpError::invalid("variational state must be finite"));
        }
        Ok(())
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.cov_factor * self.cov_factor.transpose()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvgpConfig {
    pub batch_size: usize,
    pub step_rate: f64,
    pub momentum: f64,
    pub decay: f64,
    pub offset: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// Optimize the inducing inputs along with everything else.
    pub train_inducing: bool,
}

impl Default for SvgpConfig {
    fn default() -> Self {
        let s = StochasticConfig::default();
        SvgpConfig {
            batch_size: 120,
            step_rate: s.step_rate,
            momentum: s.momentum,
            decay: s.decay,
            offset: s.offset,
            max_iters: s.max_iters,
            seed: 0,
            train_inducing: true,
        }
    }
}

impl SvgpConfig {
    pub fn stochastic(&self) -> StochasticConfig {
        StochasticConfig {
            step_rate: self.step_rate,
            momentum: self.momentum,
            decay: self.decay,
            offset: self.offset,
            max_iters: self.max_iters,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > n {
            return Err(GpError::config(
                "batch_size",
                format!("must lie in [1, {n}], got {}", self.batch_size),
            ));
        }
        if self.max_iters == 0 {
            return Err(GpError::config("max_iters", "must be at least 1"));
        }
        if !(self.step_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.decay) {
            return Err(GpError::config(
                "step_rate",
                "step rate must be positive; momentum and decay must lie in [0, 1)",
            ));
        }
        Ok(())
    }
}

/// Gradient of the bound in its natural coordinates.
#[derive(Clone, Debug)]
pub struct ElboGradient {
    /// Flat log-hyperparameters.
    pub hp: Vec<f64>,
    /// Inducing inputs, `m x d`.
    pub z: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// Lower-triangular entries only.
    pub cov_factor: DMatrix<f64>,
}

/// Partial derivatives before they are chained through the kernel.
struct Partials {
    value: f64,
    g_mean: DVector<f64>,
    g_factor: DMatrix<f64>,
    /// Symmetric, w.r.t. `K_mm`.
    g_kmm: DMatrix<f64>,
    /// W.r.t. `K_bm`.
    g_kbm: DMatrix<f64>,
    g_log_noise: f64,
    g_log_signal_direct: f64,
}

fn lower(mut a: DMatrix<f64>) -> DMatrix<f64> {
    a.fill_upper_triangle(0.0, 1);
    a
}

fn partials(
    yb: &DVector<f64>,
    n_total: usize,
    lm: &CholFactor,
    kbm: &DMatrix<f64>,
    hp: &Hyperparameters,
    mean: &DVector<f64>,
    lf: &DMatrix<f64>,
) -> Partials {
    let m = mean.len();
    let b = yb.len();
    let s = n_total as f64 / b as f64;
    let s2 = hp.noise_var();
    let sf2 = hp.signal_var();

    let a = lm.solve_vec(mean);
    let c = kbm.transpose();
    let p = lm.solve(&c);
    let e = yb - kbm * &a;
    let lt_p = lf.tr_mul(&p);
    let kinv = lm.inverse();
    let cov = lf * lf.transpose();
    let bmat = &kinv * &cov * &kinv;

    let mut t = 0.0;
    for i in 0..b {
        let q = c.column(i).dot(&p.column(i));
        t += e[i] * e[i] + sf2 - q + lt_p.column(i).norm_squared();
    }
    let ell = s * (-0.5 * b as f64 * (2.0 * PI * s2).ln() - 0.5 * t / s2);
    let log_det_s: f64 = 2.0 * (0..m).map(|i| lf[(i, i)].ln()).sum::<f64>();
    let kl = 0.5 * ((&kinv * &cov).trace() + mean.dot(&a) - m as f64 + lm.log_det() - log_det_s);

    let coef = -0.5 * s / s2;
    let pe = &p * &e;
    let bc = &bmat * &c;
    let ppt = &p * p.transpose();
    let mut dt_dc = (&bc - &p) * 2.0;
    dt_dc.ger(-2.0, &a, &e, 1.0);
    let mut dt_dk = &ppt - &p * bc.transpose() - &bc * p.transpose();
    dt_dk.ger(1.0, &pe, &a, 1.0);
    dt_dk.ger(1.0, &a, &pe, 1.0);

    let mut g_kmm = &dt_dk * coef - (&kinv - &bmat) * 0.5;
    g_kmm.ger(0.5, &a, &a, 1.0);
    let g_s = &ppt * coef - &kinv * 0.5;
    let mut g_factor = lower(&g_s * lf * 2.0);
    for i in 0..m {
        g_factor[(i, i)] += 1.0 / lf[(i, i)];
    }
    Partials {
        value: ell - kl,
        g_mean: &pe * (s / s2) - &a,
        g_factor,
        g_kmm: (&g_kmm + g_kmm.transpose()) * 0.5,
        g_kbm: (dt_dc * coef).transpose(),
        g_log_noise: -0.5 * s * b as f64 + 0.5 * s * t / s2,
        g_log_signal_direct: coef * b as f64 * sf2,
    }
}

fn chain_kernel(
    xb: &DMatrix<f64>,
    z: &DMatrix<f64>,
    hp: &Hyperparameters,
    lm: &CholFactor,
    kbm: &DMatrix<f64>,
    pt: &Partials,
    want_z: bool,
) -> (Vec<f64>, DMatrix<f64>) {
    let mut grad = vec![0.0; hp.n_params()];
    grad[hp.noise_index()] = pt.g_log_noise;
    grad[hp.signal_index()] = pt.g_log_signal_direct;
    let mut gz = DMatrix::zeros(z.nrows(), z.ncols());
    let mut kmm = kernel::cross(z, z, hp);
    add_diag(&mut kmm, lm.jitter);
    let z_t = kernel::points(z);
    {
        let mut sink = GradSink {
            hp: &mut grad,
            z: if want_z { Some(&mut gz) } else { None },
        };
        kernel::chain_cross(&kernel::points(xb), &z_t, kbm, &pt.g_kbm, hp, &mut sink);
        kernel::chain_self(&z_t, &kmm, &pt.g_kmm, hp, &mut sink);
    }
    (grad, gz)
}

fn check_inputs(batch: &Dataset, n_total: usize, z: &DMatrix<f64>, hp: &Hyperparameters, vs: &VariationalState) -> Result<()> {
    check_dim("elbo: hyperparameter dimension", batch.d(), hp.dim())?;
    check_dim("elbo: inducing dimension", batch.d(), z.ncols())?;
    check_dim("elbo: variational size", z.nrows(), vs.m())?;
    if z.nrows() == 0 {
        return Err(GpError::invalid("SVGP needs at least one inducing point"));
    }
    if n_total < batch.n() {
        return Err(GpError::invalid("elbo: n_total smaller than the batch"));
    }
    hp.validate()?;
    vs.validate()
}

/// Unbiased minibatch estimate of the uncollapsed bound.
pub fn elbo(batch: &Dataset, n_total: usize, z: &DMatrix<f64>, hp: &Hyperparameters, vs: &VariationalState) -> Result<f64> {
    Ok(elbo_with_gradient(batch, n_total, z, hp, vs)?.0)
}

/// [`elbo`] and its gradient with respect to every argument.
pub fn elbo_with_gradient(
    batch: &Dataset,
    n_total: usize,
    z: &DMatrix<f64>,
    hp: &Hyperparameters,
    vs: &VariationalState,
) -> Result<(f64, ElboGradient)> {
    check_inputs(batch, n_total, z, hp, vs)?;
    let lm = cholesky_jitter(&kernel::cross(z, z, hp), hp.signal_var(), "K_mm")?;
    let kbm = kernel::cross(&batch.x, z, hp);
    let pt = partials(&batch.y, n_total, &lm, &kbm, hp, &vs.mean, &vs.cov_factor);
    let (g_hp, g_z) = chain_kernel(&batch.x, z, hp, &lm, &kbm, &pt, true);
    Ok((
        pt.value,
        ElboGradient {
            hp: g_hp,
            z: g_z,
            mean: pt.g_mean,
            cov_factor: pt.g_factor,
        },
    ))
}

/// Flat layout used by the gradient checker: hyperparameters, `Z` row-major,
/// mean, then the lower triangle of the factor row by row.
pub fn flatten(hp: &Hyperparameters, z: &DMatrix<f64>, vs: &VariationalState) -> Vec<f64> {
    let mut out = hp.to_vec();
    push_rows(&mut out, z);
    out.extend(vs.mean.iter());
    push_lower(&mut out, &vs.cov_factor);
    out
}

/// Inverse of [`flatten`].
pub fn unflatten(p: &[f64], d: usize, m: usize) -> Result<(Hyperparameters, DMatrix<f64>, VariationalState)> {
    let np = d + 2;
    check_dim("flattened SVGP parameters", np + m * d + m + m * (m + 1) / 2, p.len())?;
    let hp = Hyperparameters::from_slice(d, &p[..np]);
    let z = DMatrix::from_row_slice(m, d, &p[np..np + m * d]);
    let off = np + m * d;
    let mean = DVector::from_column_slice(&p[off..off + m]);
    let cov_factor = read_lower(&p[off + m..], m);
    Ok((hp, z, VariationalState { mean, cov_factor }))
}

/// Flattened gradient matching [`flatten`].
pub fn flatten_gradient(g: &ElboGradient) -> Vec<f64> {
    let mut out = g.hp.clone();
    push_rows(&mut out, &g.z);
    out.extend(g.mean.iter());
    push_lower(&mut out, &g.cov_factor);
    out
}

fn push_rows(out: &mut Vec<f64>, a: &DMatrix<f64>) {
    for i in 0..a.nrows() {
        out.extend(a.row(i).iter());
    }
}

fn push_lower(out: &mut Vec<f64>, a: &DMatrix<f64>) {
    for i in 0..a.nrows() {
        for j in 0..=i {
            out.push(a[(i, j)]);
        }
    }
}

fn read_lower(p: &[f64], m: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(m, m);
    let mut k = 0;
    for i in 0..m {
        for j in 0..=i {
            a[(i, j)] = p[k];
            k += 1;
        }
    }
    a
}

/// The variational distribution that maximizes the bound at fixed `Z` and
/// hyperparameters.
pub fn optimal_variational_state(data: &Dataset, z: &DMatrix<f64>, hp: &Hyperparameters) -> Result<VariationalState> {
    check_dim("optimal state: hyperparameter dimension", data.d(), hp.dim())?;
    check_dim("optimal state: inducing dimension", data.d(), z.ncols())?;
    hp.validate()?;
    let s2 = hp.noise_var();
    let lm = cholesky_jitter(&kernel::cross(z, z, hp), hp.signal_var(), "K_mm")?;
    let v = lm.solve_l(&kernel::cross(z, &data.x, hp));
    let mut a = &v * v.transpose() / s2;
    add_diag(&mut a, 1.0);
    let la = cholesky_jitter(&a, 1.0, "inner m x m matrix")?;
    let mean = &lm.l * la.solve_vec(&(&v * &data.y)) / s2;
    let t = &lm.l * la.solve_lt(&DMatrix::identity(z.nrows(), z.nrows()));
    let cov = &t * t.transpose();
    let f = cholesky_jitter(&cov, hp.signal_var(), "variational covariance")?;
    VariationalState::new(mean, f.l)
}

/// Trained SVGP.
#[derive(Clone, Debug)]
pub struct SvgpModel {
    pub inducing: InducingSet,
    pub hp: Hyperparameters,
    pub state: VariationalState,
    pub config: SvgpConfig,
    /// Negated minibatch bound per iteration.
    pub trace: OptTrace,
    kmm: CholFactor,
}

impl SvgpModel {
    /// Model at fixed parameters, without training.
    pub fn new(inducing: InducingSet, hp: Hyperparameters, state: VariationalState, config: SvgpConfig) -> Result<Self> {
        check_dim("SVGP: inducing dimension", hp.dim(), inducing.d())?;
        check_dim("SVGP: variational size", inducing.m(), state.m())?;
        state.validate()?;
        let kmm = cholesky_jitter(&kernel::cross(&inducing.z, &inducing.z, &hp), hp.signal_var(), "K_mm")?;
        Ok(SvgpModel {
            inducing,
            hp,
            state,
            config,
            trace: OptTrace::default(),
            kmm,
        })
    }

    pub fn kmm_factor(&self) -> &CholFactor {
        &self.kmm
    }

    /// Full-batch bound at the fitted parameters.
    pub fn elbo(&self, data: &Dataset) -> Result<f64> {
        elbo(data, data.n(), &self.inducing.z, &self.hp, &self.state)
    }

    pub fn latent_moments(&self, xstar: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim("svgp predict: input columns", self.hp.dim(), xstar.ncols())?;
        let kms = kernel::cross(&self.inducing.z, xstar, &self.hp);
        let r = self.kmm.solve(&kms);
        let mean = r.tr_mul(&self.state.mean).as_slice().to_vec();
        let lt_r = self.state.cov_factor.tr_mul(&r);
        let sf2 = self.hp.signal_var();
        let var = (0..xstar.nrows())
            .map(|j| sf2 - kms.column(j).dot(&r.column(j)) + lt_r.column(j).norm_squared())
            .collect();
        Ok((mean, var))
    }

    pub fn predict(&self, xstar: &DMatrix<f64>, flavor: Flavor) -> Result<PredictiveDistribution> {
        let (mean, var) = self.latent_moments(xstar)?;
        Ok(PredictiveDistribution::from_latent(mean, var, self.hp.noise_var(), flavor))
    }
}

/// Free-function form of [`SvgpModel::predict`].
pub fn svgp_predict(model: &SvgpModel, xstar: &DMatrix<f64>, flavor: Flavor) -> Result<PredictiveDistribution> {
    model.predict(xstar, flavor)
}

/// Whitened parameter layout used during training: hyperparameters, `Z`
/// row-major (if trained), whitened mean, then the lower triangle of the
/// whitened factor with its diagonal stored as logs.
struct Whitened {
    d: usize,
    m: usize,
    z0: DMatrix<f64>,
    train_z: bool,
}

impl Whitened {
    fn pack(&self, hp: &Hyperparameters, z: &DMatrix<f64>, w: &DVector<f64>, lw: &DMatrix<f64>) -> Vec<f64> {
        let mut out = hp.to_vec();
        if self.train_z {
            push_rows(&mut out, z);
        }
        out.extend(w.iter());
        let mut lw = lw.clone();
        for i in 0..self.m {
            lw[(i, i)] = lw[(i, i)].ln();
        }
        push_lower(&mut out, &lw);
        out
    }

    fn unpack(&self, p: &[f64]) -> (Hyperparameters, DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
        let np = self.d + 2;
        let hp = Hyperparameters::from_slice(self.d, &p[..np]);
        let mut off = np;
        let z = if self.train_z {
            off += self.m * self.d;
            DMatrix::from_row_slice(self.m, self.d, &p[np..off])
        } else {
            self.z0.clone()
        };
        let w = DVector::from_column_slice(&p[off..off + self.m]);
        let mut lw = read_lower(&p[off + self.m..], self.m);
        for i in 0..self.m {
            lw[(i, i)] = lw[(i, i)].exp();
        }
        (hp, z, w, lw)
    }

    /// Bound and gradient in whitened coordinates.
    fn evaluate(&self, batch: &Dataset, n_total: usize, p: &[f64]) -> Result<(f64, Vec<f64>)> {
        if !p.iter().all(|v| v.is_finite()) {
            return Err(GpError::Numerical("non-finite SVGP parameters".into()));
        }
        let (hp, z, w, lw) = self.unpack(p);
        let lm = cholesky_jitter(&kernel::cross(&z, &z, &hp), hp.signal_var(), "K_mm")?;
        let mean = &lm.l * &w;
        let lf = &lm.l * &lw;
        let kbm = kernel::cross(&batch.x, &z, &hp);
        let mut pt = partials(&batch.y, n_total, &lm, &kbm, &hp, &mean, &lf);
        if !pt.value.is_finite() {
            return Err(GpError::Numerical("non-finite SVGP bound".into()));
        }
        // mean = L_mm w and L = L_mm L_w both depend on K_mm through its factor
        let mut g_lm = &pt.g_mean * w.transpose() + &pt.g_factor * lw.transpose();
        g_lm = lower(g_lm);
        pt.g_kmm += cholesky_backprop(&lm, &g_lm);
        let g_w = lm.l.tr_mul(&pt.g_mean);
        let mut g_lw = lower(lm.l.tr_mul(&pt.g_factor));
        for i in 0..self.m {
            g_lw[(i, i)] *= lw[(i, i)];
        }
        let (g_hp, g_z) = chain_kernel(&batch.x, &z, &hp, &lm, &kbm, &pt, self.train_z);
        let mut g = g_hp;
        if self.train_z {
            push_rows(&mut g, &g_z);
        }
        g.extend(g_w.iter());
        push_lower(&mut g, &g_lw);
        Ok((pt.value, g))
    }
}

/// Symmetric gradient w.r.t. `A` given the gradient w.r.t. the lower factor
/// `L = chol(A)`.
fn cholesky_backprop(f: &CholFactor, g_l: &DMatrix<f64>) -> DMatrix<f64> {
    let mut phi = lower(f.l.tr_mul(g_l));
    for i in 0..phi.nrows() {
        phi[(i, i)] *= 0.5;
    }
    let sym = (&phi + phi.transpose()) * 0.5;
    let left = f.solve_lt(&sym);
    f.solve_lt(&left.transpose()).transpose()
}

/// Minibatch Adadelta on hyperparameters, inducing inputs (unless frozen)
/// and the variational state, starting from the prior `q(f_m) = p(f_m)`.
pub fn fit_svgp(data: &Dataset, z0: &InducingSet, hp0: &Hyperparameters, config: &SvgpConfig) -> Result<SvgpModel> {
    let n = data.n();
    config.validate(n)?;
    check_dim("SVGP: hyperparameter dimension", data.d(), hp0.dim())?;
    check_dim("SVGP: inducing dimension", data.d(), z0.d())?;
    hp0.validate()?;
    let m = z0.m();
    if m == 0 {
        return Err(GpError::invalid("SVGP needs at least one inducing point"));
    }
    let layout = Whitened {
        d: data.d(),
        m,
        z0: z0.z.clone(),
        train_z: config.train_inducing,
    };
    let x0 = layout.pack(hp0, &z0.z, &DVector::zeros(m), &DMatrix::identity(m, m));

    let b = config.batch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let res = minimize_stochastic(
        |p: &[f64], _iter| {
            if cursor + b > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + b];
            cursor += b;
            let batch = if b == n { data.clone() } else { data.subset(idx) };
            let (v, g) = layout.evaluate(&batch, n, p)?;
            Ok((-v, g.into_iter().map(|x| -x).collect()))
        },
        &x0,
        &config.stochastic(),
    )?;
    let (hp, z, w, lw) = layout.unpack(&res.x);
    let lm = cholesky_jitter(&kernel::cross(&z, &z, &hp), hp.signal_var(), "K_mm")?;
    let state = VariationalState::new(&lm.l * w, &lm.l * lw)?;
    let mut model = SvgpModel::new(
        InducingSet {
            z,
            trainable: z0.trainable,
        },
        hp,
        state,
        config.clone(),
    )?;
    model.trace = res.trace;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimize::{check_gradient_with, Stencil, CENTRAL5_STEP};
    use crate::sparse::{condition_sparse, sparse_evidence_value, SparseMethod};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_data(seed: u64, n: usize, d: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: DMatrix<f64> = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
        let y = DVector::from_fn(n, |i, _| x[(i, 0)].sin() + rng.random_range(-0.3..0.3));
        Dataset::new(x, y).unwrap()
    }

    fn random_state(seed: u64, m: usize) -> VariationalState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let mut l = DMatrix::from_fn(m, m, |_, _| rng.random_range(-0.3..0.3));
        l.fill_upper_triangle(0.0, 1);
        for i in 0..m {
            l[(i, i)] = rng.random_range(0.2..1.0);
        }
        VariationalState::new(mean, l).unwrap()
    }

    fn setup() -> (Dataset, DMatrix<f64>, Hyperparameters) {
        let data = random_data(1, 24, 2);
        let z = InducingSet::from_kmeans(&data.x, 5, 0, true).unwrap().z;
        let hp = Hyperparameters::new(&[0.8, 1.3], 1.1, 0.15).unwrap();
        (data, z, hp)
    }

    #[test]
    fn scalar_optimal_state() {
        // n = m = 1 with x = z: K = k = sf2, so mean = sf2 y / (sf2 + s2),
        // variance = sf2 s2 / (sf2 + s2)
        let data = Dataset::new(DMatrix::from_element(1, 1, 0.4), DVector::from_element(1, 1.5)).unwrap();
        let hp = Hyperparameters::new(&[1.0], 2.0, 0.5).unwrap();
        let vs = optimal_variational_state(&data, &data.x, &hp).unwrap();
        assert_relative_eq!(vs.mean[0], 2.0 * 1.5 / 2.5, epsilon = 1e-12);
        assert_relative_eq!(vs.cov_factor[(0, 0)].powi(2), 2.0 * 0.5 / 2.5, epsilon = 1e-12);
    }

    #[test]
    fn optimal_state_recovers_collapsed_bound() {
        let (data, z, hp) = setup();
        let vs = optimal_variational_state(&data, &z, &hp).unwrap();
        let f = elbo(&data, data.n(), &z, &hp, &vs).unwrap();
        let ind = InducingSet::new(z.clone(), false).unwrap();
        let vfe = sparse_evidence_value(SparseMethod::Vfe, &data, &ind, &hp, None).unwrap();
        assert_relative_eq!(f, vfe, epsilon = 1e-6);
        for seed in 0..10 {
            assert!(elbo(&data, data.n(), &z, &hp, &random_state(seed, 5)).unwrap() <= vfe + 1e-8);
        }
    }

    #[test]
    fn huge_noise_gives_prior() {
        let (data, z, _) = setup();
        let hp = Hyperparameters::new(&[0.8, 1.3], 1.1, 1e10).unwrap();
        let vs = optimal_variational_state(&data, &z, &hp).unwrap();
        let kmm = kernel::cross(&z, &z, &hp);
        assert!(vs.mean.amax() < 1e-8);
        assert!(crate::linalg::rel_frobenius(&vs.covariance(), &kmm) < 1e-8);
    }

    #[test]
    fn prior_state_has_zero_kl() {
        let (data, z, hp) = setup();
        let lm = cholesky_jitter(&kernel::cross(&z, &z, &hp), hp.signal_var(), "K_mm").unwrap();
        let vs = VariationalState::new(DVector::zeros(5), lm.l.clone()).unwrap();
        // with mean 0 and S = K_mm the data term reduces to the prior expectation
        let s2 = hp.noise_var();
        let ell: f64 = data
            .y
            .iter()
            .map(|y| -0.5 * (2.0 * PI * s2).ln() - 0.5 * (y * y + hp.signal_var()) / s2)
            .sum();
        assert_relative_eq!(elbo(&data, data.n(), &z, &hp, &vs).unwrap(), ell, epsilon = 1e-8);
    }

    #[test]
    fn minibatch_estimate_is_unbiased() {
        let (data, z, hp) = setup();
        let vs = random_state(3, 5);
        let full = elbo(&data, data.n(), &z, &hp, &vs).unwrap();
        let b = 6;
        let batches: Vec<f64> = (0..data.n() / b)
            .map(|k| {
                let idx: Vec<usize> = (k * b..(k + 1) * b).collect();
                elbo(&data.subset(&idx), data.n(), &z, &hp, &vs).unwrap()
            })
            .collect();
        let mean = batches.iter().sum::<f64>() / batches.len() as f64;
        assert_relative_eq!(mean, full, epsilon = 1e-8);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (data, z, _) = setup();
        for seed in 0..4 {
            let hp = Hyperparameters::new(&[0.6 + 0.2 * seed as f64, 1.0], 0.9, 0.2).unwrap();
            let x0 = flatten(&hp, &z, &random_state(seed, 5));
            let chk = check_gradient_with(
                |p: &[f64]| {
                    let (hp, z, vs) = unflatten(p, 2, 5)?;
                    let (v, g) = elbo_with_gradient(&data, data.n(), &z, &hp, &vs)?;
                    Ok((v, flatten_gradient(&g)))
                },
                &x0,
                CENTRAL5_STEP,
                Stencil::Central5,
            )
            .unwrap();
            assert!(chk.max_rel_error < 1e-5, "{} {:?}", chk.max_rel_error, chk.rel_errors);
        }
    }

    #[test]
    fn whitened_gradient_matches_finite_differences() {
        let (data, z, hp) = setup();
        let layout = Whitened {
            d: 2,
            m: 5,
            z0: z.clone(),
            train_z: true,
        };
        let vs = random_state(9, 5);
        let x0 = layout.pack(&hp, &z, &vs.mean, &vs.cov_factor);
        let batch = data.subset(&[0, 3, 5, 7, 11, 20]);
        let chk = check_gradient_with(|p: &[f64]| layout.evaluate(&batch, 24, p), &x0, CENTRAL5_STEP, Stencil::Central5).unwrap();
        assert!(chk.max_rel_error < 1e-5, "{} {:?}", chk.max_rel_error, chk.rel_errors);
    }

    #[test]
    fn prediction_at_optimal_state_matches_vfe() {
        let (data, z, hp) = setup();
        let vs = optimal_variational_state(&data, &z, &hp).unwrap();
        let ind = InducingSet::new(z, false).unwrap();
        let model = SvgpModel::new(ind.clone(), hp.clone(), vs, SvgpConfig::default()).unwrap();
        let vfe = condition_sparse(SparseMethod::Vfe, &data, &ind, &hp, None).unwrap();
        let xs = random_data(5, 15, 2).x;
        let (a, av) = model.latent_moments(&xs).unwrap();
        let (b, bv) = vfe.latent_moments(&xs).unwrap();
        for j in 0..15 {
            assert_relative_eq!(a[j], b[j], epsilon = 1e-6);
            assert_relative_eq!(av[j], bv[j], epsilon = 1e-6);
        }
        let far = DMatrix::from_element(1, 2, 40.0);
        assert_relative_eq!(model.latent_moments(&far).unwrap().1[0], hp.signal_var(), epsilon = 1e-4);
    }

    #[test]
    fn fit_is_deterministic_and_improves() {
        let data = random_data(2, 40, 1);
        let ind = InducingSet::from_kmeans(&data.x, 6, 0, true).unwrap();
        let hp0 = Hyperparameters::default_init(1);
        let cfg = SvgpConfig {
            batch_size: 10,
            max_iters: 200,
            seed: 4,
            ..SvgpConfig::default()
        };
        let a = fit_svgp(&data, &ind, &hp0, &cfg).unwrap();
        let b = fit_svgp(&data, &ind, &hp0, &cfg).unwrap();
        assert_eq!(a.trace.values(), b.trace.values());
        let start = VariationalState::new(DVector::zeros(6), {
            cholesky_jitter(&kernel::cross(&ind.z, &ind.z, &hp0), 1.0, "K_mm").unwrap().l
        })
        .unwrap();
        let before = elbo(&data, 40, &ind.z, &hp0, &start).unwrap();
        assert!(a.elbo(&data).unwrap() > before);
        assert!(fit_svgp(&data, &ind, &hp0, &SvgpConfig { batch_size: 41, ..cfg }).is_err());
    }

    #[test]
    fn rejects_bad_state() {
        let mut l = DMatrix::identity(2, 2);
        l[(0, 1)] = 0.5;
        assert!(VariationalState::new(DVector::zeros(2), l).is_err());
        let mut l = DMatrix::identity(2, 2);
        l[(1, 1)] = 0.0;
        assert!(VariationalState::new(DVector::zeros(2), l).is_err());
    }
}
