//! Inducing-point approximations: SoR, DTC, FITC, PIC and VFE.
//!
//! Every method shares one evidence template,
//! `log N(y | 0, Q_nn + Lambda)` with `Lambda = Qtilde_nn + sigma_eps^2 I`,
//! and differs only in the correction `Qtilde_nn`:
//!
//! | method   | `Qtilde_nn`                       | extra term                  |
//! |----------|-----------------------------------|-----------------------------|
//! | SoR, DTC | `0`                               |                             |
//! | FITC     | `diag[K_nn - Q_nn]`               |                             |
//! | PIC      | `blockdiag[K_nn - Q_nn]`          |                             |
//! | VFE      | `0`                               | `-tr(K_nn - Q_nn) / 2 s^2`  |
//!
//! Determinants and solves go through the `m x m` matrix
//! `A = I + V Lambda^{-1} V^T` with `V = L_mm^{-1} K_mn`, so no `n x n`
//! matrix is ever factored.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::aggregation::Partition;
use crate::data::Dataset;
use crate::error::{check_dim, GpError, Result};
use crate::kernel::{self, GradSink, Hyperparameters};
use crate::linalg::{add_diag, cholesky_jitter, CholFactor};
use crate::optimize::{minimize_deterministic, DeterministicConfig, OptTrace};
use crate::par;
use crate::predictive::{Flavor, PredictiveDistribution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SparseMethod {
    SoR,
    Dtc,
    Fitc,
    Pic,
    Vfe,
}

impl SparseMethod {
    pub const ALL: [SparseMethod; 5] = [
        SparseMethod::SoR,
        SparseMethod::Dtc,
        SparseMethod::Fitc,
        SparseMethod::Pic,
        SparseMethod::Vfe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SparseMethod::SoR => "sor",
            SparseMethod::Dtc => "dtc",
            SparseMethod::Fitc => "fitc",
            SparseMethod::Pic => "pic",
            SparseMethod::Vfe => "vfe",
        }
    }
}

/// Inducing inputs `Z` (`m x d`).
#[derive(Clone, Debug, PartialEq)]
pub struct InducingSet {
    pub z: DMatrix<f64>,
    pub trainable: bool,
}

impl InducingSet {
    pub fn new(z: DMatrix<f64>, trainable: bool) -> Result<Self> {
        if z.nrows() == 0 {
            return Err(GpError::invalid("inducing set needs m >= 1"));
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(GpError::invalid("inducing inputs must be finite"));
        }
        Ok(InducingSet { z, trainable })
    }

    /// No inducing points. Only meaningful for PIC, where it yields the pure
    /// local GP of each block.
    pub fn empty(d: usize) -> Self {
        InducingSet {
            z: DMatrix::zeros(0, d),
            trainable: false,
        }
    }

    /// `m` points equally spaced on `[lo, hi]` (1-D inputs).
    pub fn equally_spaced(lo: f64, hi: f64, m: usize, trainable: bool) -> Result<Self> {
        if m == 0 || !(lo <= hi) {
            return Err(GpError::invalid("equally spaced inducing set needs m >= 1 and lo <= hi"));
        }
        let z = if m == 1 {
            vec![0.5 * (lo + hi)]
        } else {
            (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect()
        };
        Self::new(DMatrix::from_column_slice(m, 1, &z), trainable)
    }

    /// k-means centroids of the training inputs.
    pub fn from_kmeans(x: &DMatrix<f64>, m: usize, seed: u64, trainable: bool) -> Result<Self> {
        let p = crate::aggregation::partition_kmeans(x, m, seed)?;
        Self::new(p.centroids, trainable)
    }

    pub fn m(&self) -> usize {
        self.z.nrows()
    }

    pub fn d(&self) -> usize {
        self.z.ncols()
    }
}

/// `Q_AB = K_AZ K_ZZ^{-1} K_ZB`, via triangular solves against the factor of
/// `K_ZZ`.
pub fn nystrom(a: &DMatrix<f64>, b: &DMatrix<f64>, z: &DMatrix<f64>, hp: &Hyperparameters) -> Result<DMatrix<f64>> {
    check_dim("nystrom: A columns", hp.dim(), a.ncols())?;
    check_dim("nystrom: B columns", hp.dim(), b.ncols())?;
    check_dim("nystrom: Z columns", hp.dim(), z.ncols())?;
    let kmm = kernel::cross(z, z, hp);
    let lm = cholesky_jitter(&kmm, hp.signal_var(), "K_mm")?;
    let va = lm.solve_l(&kernel::cross(z, a, hp));
    let vb = lm.solve_l(&kernel::cross(z, b, hp));
    Ok(va.tr_mul(&vb))
}

/// `tr(K_nn - Q_nn)`, the total variance of the training conditional.
pub fn trace_term(x: &DMatrix<f64>, z: &DMatrix<f64>, hp: &Hyperparameters) -> Result<f64> {
    let kmm = kernel::cross(z, z, hp);
    let lm = cholesky_jitter(&kmm, hp.signal_var(), "K_mm")?;
    let v = lm.solve_l(&kernel::cross(z, x, hp));
    Ok(x.nrows() as f64 * hp.signal_var() - v.norm_squared())
}

/// Diagonal or block-diagonal `Lambda`.
#[derive(Clone, Debug)]
enum Lambda {
    Diag(DVector<f64>),
    Blocks { blocks: Vec<Vec<usize>>, factors: Vec<CholFactor> },
}

impl Lambda {
    /// `Lambda^{-1} M` for an `n x k` matrix.
    fn solve_mat(&self, mat: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Lambda::Diag(l) => {
                let mut out = mat.clone();
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row /= l[i];
                }
                out
            }
            Lambda::Blocks { blocks, factors } => {
                let mut out = DMatrix::zeros(mat.nrows(), mat.ncols());
                let idx: Vec<usize> = (0..blocks.len()).collect();
                let solved = par::map_slice(&idx, |&b| factors[b].solve(&mat.select_rows(&blocks[b])));
                for (b, s) in solved.into_iter().enumerate() {
                    for (r, &i) in blocks[b].iter().enumerate() {
                        out.row_mut(i).copy_from(&s.row(r));
                    }
                }
                out
            }
        }
    }

    fn solve_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Lambda::Diag(l) => v.component_div(l),
            Lambda::Blocks { .. } => {
                let m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
                DVector::from_column_slice(self.solve_mat(&m).as_slice())
            }
        }
    }

    fn log_det(&self) -> f64 {
        match self {
            Lambda::Diag(l) => l.iter().map(|v| v.ln()).sum(),
            Lambda::Blocks { factors, .. } => factors.iter().map(|f| f.log_det()).sum(),
        }
    }

    fn trace_inv(&self) -> f64 {
        match self {
            Lambda::Diag(l) => l.iter().map(|v| 1.0 / v).sum(),
            Lambda::Blocks { factors, .. } => factors
                .iter()
                .map(|f| f.solve_l(&DMatrix::identity(f.dim(), f.dim())).norm_squared())
                .sum(),
        }
    }
}

/// Everything the evidence, its gradient and prediction need.
#[derive(Clone, Debug)]
struct Core {
    /// Factor of `K_mm` (+ jitter).
    lm: CholFactor,
    /// `K_nm`.
    knm: DMatrix<f64>,
    /// `L_mm^{-1} K_mn`.
    v: DMatrix<f64>,
    lambda: Lambda,
    /// `V Lambda^{-1}`.
    v_li: DMatrix<f64>,
    /// Factor of `A = I + V Lambda^{-1} V^T`.
    la: CholFactor,
    /// `L_A^{-1} V Lambda^{-1} y`.
    c: DVector<f64>,
    /// `(Q_nn + Lambda)^{-1} y`.
    beta: DVector<f64>,
    /// `tr(K_nn - Q_nn)`.
    trace: f64,
    evidence: f64,
}

fn validate_inputs(
    method: SparseMethod,
    data: &Dataset,
    inducing: &InducingSet,
    hp: &Hyperparameters,
    partition: Option<&Partition>,
) -> Result<()> {
    check_dim("sparse GP: hyperparameter dimension", data.d(), hp.dim())?;
    check_dim("sparse GP: inducing dimension", data.d(), inducing.d())?;
    hp.validate()?;
    match (method, partition) {
        (SparseMethod::Pic, None) => Err(GpError::invalid("PIC requires a partition")),
        (SparseMethod::Pic, Some(p)) => check_dim("PIC partition size", data.n(), p.assignments.len()),
        (_, Some(_)) => Err(GpError::invalid(format!(
            "{} does not take a partition",
            method.name()
        ))),
        (_, None) if inducing.m() == 0 => Err(GpError::invalid(format!(
            "{} needs at least one inducing point",
            method.name()
        ))),
        _ => Ok(()),
    }
}

fn build_core(
    method: SparseMethod,
    data: &Dataset,
    z: &DMatrix<f64>,
    hp: &Hyperparameters,
    partition: Option<&Partition>,
) -> Result<Core> {
    let n = data.n();
    let sf2 = hp.signal_var();
    let s2 = hp.noise_var();
    let kmm = kernel::cross(z, z, hp);
    let lm = cholesky_jitter(&kmm, sf2, "K_mm")?;
    let knm = kernel::cross(&data.x, z, hp);
    let v = lm.solve_l(&knm.transpose());
    let qdiag: Vec<f64> = v.column_iter().map(|c| c.norm_squared()).collect();
    let trace = n as f64 * sf2 - qdiag.iter().sum::<f64>();

    let lambda = match method {
        SparseMethod::SoR | SparseMethod::Dtc | SparseMethod::Vfe => Lambda::Diag(DVector::from_element(n, s2)),
        SparseMethod::Fitc => Lambda::Diag(DVector::from_iterator(
            n,
            qdiag.iter().map(|q| (sf2 - q).max(0.0) + s2),
        )),
        SparseMethod::Pic => {
            let blocks = partition.expect("validated").blocks();
            let factors = par::map_slice(&blocks, |b| -> Result<CholFactor> {
                let xb = data.x.select_rows(b);
                let vb = v.select_columns(b);
                let mut lb = kernel::cross(&xb, &xb, hp) - vb.tr_mul(&vb);
                add_diag(&mut lb, s2);
                cholesky_jitter(&lb, sf2, "PIC block")
            });
            let factors = factors.into_iter().collect::<Result<Vec<_>>>()?;
            Lambda::Blocks { blocks, factors }
        }
    };

    let v_li = lambda.solve_mat(&v.transpose()).transpose();
    let mut a = &v_li * v.transpose();
    add_diag(&mut a, 1.0);
    let la = cholesky_jitter(&a, 1.0, "inner m x m matrix")?;
    let ly = lambda.solve_vec(&data.y);
    let c = la.solve_l_vec(&(&v * &ly));
    let quad = data.y.dot(&ly) - c.norm_squared();
    let log_det = lambda.log_det() + la.log_det();
    let mut evidence = -0.5 * n as f64 * (2.0 * PI).ln() - 0.5 * log_det - 0.5 * quad;
    if method == SparseMethod::Vfe {
        evidence -= 0.5 * trace / s2;
    }
    let beta = &ly - v_li.tr_mul(&la.solve_lt_vec(&c));
    Ok(Core {
        lm,
        knm,
        v,
        lambda,
        v_li,
        la,
        c,
        beta,
        trace,
        evidence,
    })
}

/// Gradient of the evidence: flat hyperparameters first, then `Z` row-major
/// when `with_z` is set.
fn evidence_gradient(
    method: SparseMethod,
    data: &Dataset,
    z: &DMatrix<f64>,
    hp: &Hyperparameters,
    core: &Core,
    with_z: bool,
) -> Vec<f64> {
    let n = data.n();
    let m = z.nrows();
    let d = hp.dim();
    let sf2 = hp.signal_var();
    let s2 = hp.noise_var();

    // W = Sigma_y^{-1} - beta beta^T with Sigma_y^{-1} = Lambda^{-1} - P^T P
    let p = core.la.solve_l(&core.v_li);
    let r = core.lm.solve_lt(&core.v);
    let rt = r.transpose();
    let r_beta = &r * &core.beta;
    let li_rt = core.lambda.solve_mat(&rt);
    let mut w_rt = li_rt - p.tr_mul(&(&p * &rt));
    w_rt.ger(-1.0, &core.beta, &r_beta, 1.0);

    // masked part of W (diagonal for FITC, blocks for PIC) and its coefficient on K_nn
    let mut knn_diag_coef = vec![0.0; n];
    let mut block_coefs: Vec<DMatrix<f64>> = Vec::new();
    let mut u_rt = w_rt;
    match (&core.lambda, method) {
        (Lambda::Diag(l), SparseMethod::Fitc) => {
            for i in 0..n {
                let wii = 1.0 / l[i] - p.column(i).norm_squared() - core.beta[i] * core.beta[i];
                knn_diag_coef[i] = -0.5 * wii;
                let row = rt.row(i) * wii;
                let mut ur = u_rt.row_mut(i);
                ur -= row;
            }
        }
        (Lambda::Blocks { blocks, factors }, _) => {
            for (b, idx) in blocks.iter().enumerate() {
                let pb = p.select_columns(idx);
                let bb = DVector::from_iterator(idx.len(), idx.iter().map(|&i| core.beta[i]));
                let mut wb = factors[b].inverse() - pb.tr_mul(&pb);
                wb.ger(-1.0, &bb, &bb, 1.0);
                let sub = &wb * rt.select_rows(idx);
                for (k, &i) in idx.iter().enumerate() {
                    let mut ur = u_rt.row_mut(i);
                    ur -= sub.row(k);
                }
                block_coefs.push(wb * -0.5);
            }
        }
        _ => {}
    }

    let mut g_nm = -&u_rt;
    let mut g_mm = (&r * &u_rt) * 0.5;
    let trace_w = core.lambda.trace_inv() - p.norm_squared() - core.beta.norm_squared();
    let mut grad = vec![0.0; hp.n_params()];
    grad[hp.noise_index()] = -0.5 * s2 * trace_w;
    if method == SparseMethod::Vfe {
        g_nm += &rt / s2;
        g_mm -= (&r * &rt) * (0.5 / s2);
        knn_diag_coef.iter_mut().for_each(|c| *c -= 0.5 / s2);
        grad[hp.noise_index()] += 0.5 * core.trace / s2;
    }
    g_mm = (&g_mm + g_mm.transpose()) * 0.5;

    let mut kmm_j = kernel::cross(z, z, hp);
    add_diag(&mut kmm_j, core.lm.jitter);
    let x_t = kernel::points(&data.x);
    let z_t = kernel::points(z);
    let mut gz = DMatrix::zeros(m, d);
    {
        let mut sink = GradSink {
            hp: &mut grad,
            z: if with_z { Some(&mut gz) } else { None },
        };
        kernel::chain_cross(&x_t, &z_t, &core.knm, &g_nm, hp, &mut sink);
        kernel::chain_self(&z_t, &kmm_j, &g_mm, hp, &mut sink);
    }
    grad[hp.signal_index()] += sf2 * knn_diag_coef.iter().sum::<f64>();
    if let Lambda::Blocks { blocks, .. } = &core.lambda {
        for (idx, coef) in blocks.iter().zip(&block_coefs) {
            let xb_t = x_t.select_columns(idx);
            let kbb = kernel::cross_from_points(&xb_t, &xb_t, hp);
            kernel::chain_self(&xb_t, &kbb, coef, hp, &mut GradSink { hp: &mut grad, z: None });
        }
    }
    if with_z {
        for i in 0..m {
            for q in 0..d {
                grad.push(gz[(i, q)]);
            }
        }
    }
    grad
}

/// Approximate log evidence (the collapsed bound for VFE) and its gradient.
///
/// The gradient covers the flat log-hyperparameters and, when the inducing
/// set is trainable, the entries of `Z` in row-major order.
pub fn sparse_evidence(
    method: SparseMethod,
    data: &Dataset,
    inducing: &InducingSet,
    hp: &Hyperparameters,
    partition: Option<&Partition>,
) -> Result<(f64, Vec<f64>)> {
    validate_inputs(method, data, inducing, hp, partition)?;
    let core = build_core(method, data, &inducing.z, hp, partition)?;
    let grad = evidence_gradient(method, data, &inducing.z, hp, &core, inducing.trainable);
    Ok((core.evidence, grad))
}

/// Evidence value only.
pub fn sparse_evidence_value(
    method: SparseMethod,
    data: &Dataset,
    inducing: &InducingSet,
    hp: &Hyperparameters,
    partition: Option<&Partition>,
) -> Result<f64> {
    validate_inputs(method, data, inducing, hp, partition)?;
    Ok(build_core(method, data, &inducing.z, hp, partition)?.evidence)
}

/// A fitted sparse approximation with cached factors.
#[derive(Clone, Debug)]
pub struct SparseModel {
    pub method: SparseMethod,
    pub data: Dataset,
    pub inducing: InducingSet,
    pub hp: Hyperparameters,
    pub partition: Option<Partition>,
    pub evidence: f64,
    pub trace: Option<OptTrace>,
    core: Core,
}

/// Builds a model at fixed hyperparameters and inducing inputs.
pub fn condition_sparse(
    method: SparseMethod,
    data: &Dataset,
    inducing: &InducingSet,
    hp: &Hyperparameters,
    partition: Option<&Partition>,
) -> Result<SparseModel> {
    validate_inputs(method, data, inducing, hp, partition)?;
    let core = build_core(method, data, &inducing.z, hp, partition)?;
    Ok(SparseModel {
        method,
        data: data.clone(),
        inducing: inducing.clone(),
        hp: hp.clone(),
        partition: partition.cloned(),
        evidence: core.evidence,
        trace: None,
        core,
    })
}

/// Maximizes the evidence over hyperparameters and, if trainable, `Z`.
pub fn fit_sparse(
    method: SparseMethod,
    data: &Dataset,
    inducing0: &InducingSet,
    hp0: &Hyperparameters,
    cfg: &DeterministicConfig,
    partition: Option<&Partition>,
) -> Result<SparseModel> {
    validate_inputs(method, data, inducing0, hp0, partition)?;
    let d = hp0.dim();
    let np = hp0.n_params();
    let m = inducing0.m();
    let trainable = inducing0.trainable && m > 0;
    let unpack = |p: &[f64]| -> (Hyperparameters, InducingSet) {
        let hp = Hyperparameters::from_slice(d, &p[..np]);
        let z = if trainable {
            DMatrix::from_row_slice(m, d, &p[np..])
        } else {
            inducing0.z.clone()
        };
        (
            hp,
            InducingSet {
                z,
                trainable: inducing0.trainable,
            },
        )
    };
    let mut x0 = hp0.to_vec();
    if trainable {
        for i in 0..m {
            x0.extend(inducing0.z.row(i).iter());
        }
    }
    let res = minimize_deterministic(
        |p: &[f64]| {
            let (hp, ind) = unpack(p);
            if !p.iter().all(|v| v.is_finite()) {
                return Err(GpError::Numerical("non-finite parameters".into()));
            }
            let core = build_core(method, data, &ind.z, &hp, partition)?;
            let g = evidence_gradient(method, data, &ind.z, &hp, &core, trainable);
            Ok((-core.evidence, g.into_iter().map(|v| -v).collect()))
        },
        &x0,
        cfg,
    )?;
    let (hp, ind) = unpack(&res.x);
    let mut model = condition_sparse(method, data, &ind, &hp, partition)?;
    model.trace = Some(res.trace);
    Ok(model)
}

impl SparseModel {
    /// Factor of `K_mm` (jitter included).
    pub fn kmm_factor(&self) -> &CholFactor {
        &self.core.lm
    }

    /// Factor of the inner `m x m` matrix `I + V Lambda^{-1} V^T`.
    pub fn inner_factor(&self) -> &CholFactor {
        &self.core.la
    }

    /// `tr(K_nn - Q_nn)` at the fitted parameters.
    pub fn trace_term(&self) -> f64 {
        self.core.trace
    }

    pub fn jitter_events(&self) -> usize {
        let mut n = usize::from(self.core.lm.jitter > 0.0) + usize::from(self.core.la.jitter > 0.0);
        if let Lambda::Blocks { factors, .. } = &self.core.lambda {
            n += factors.iter().filter(|f| f.jitter > 0.0).count();
        }
        n
    }

    /// Latent mean and unclamped variance.
    pub fn latent_moments(&self, xstar: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim("sparse predict: input columns", self.hp.dim(), xstar.ncols())?;
        let sf2 = self.hp.signal_var();
        let ksm = kernel::cross(&self.inducing.z, xstar, &self.hp);
        let vs = self.core.lm.solve_l(&ksm);
        if self.method == SparseMethod::Pic {
            return Ok(self.pic_moments(xstar, &vs));
        }
        let ws = self.core.la.solve_l(&vs);
        let mean = ws.tr_mul(&self.core.c).as_slice().to_vec();
        let var = ws
            .column_iter()
            .zip(vs.column_iter())
            .map(|(w, v)| match self.method {
                SparseMethod::SoR => w.norm_squared(),
                _ => sf2 - v.norm_squared() + w.norm_squared(),
            })
            .collect();
        Ok((mean, var))
    }

    fn pic_moments(&self, xstar: &DMatrix<f64>, vs: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
        let partition = self.partition.as_ref().expect("PIC model has a partition");
        let Lambda::Blocks { blocks, factors } = &self.core.lambda else {
            unreachable!("PIC uses block lambda")
        };
        let sf2 = self.hp.signal_var();
        let v = &self.core.v;
        let v_beta = v * &self.core.beta;
        let mut a_minus_i = self.core.la.reconstruct();
        add_diag(&mut a_minus_i, -1.0);
        let xs_t = kernel::points(xstar);
        let x_t = kernel::points(&self.data.x);
        let inv_l2 = self.hp.inv_sq_lengthscales();
        let results = par::map_indices(xstar.nrows(), |j| {
            let xj = xs_t.column(j);
            let b = partition.nearest_block(xj.as_slice());
            let idx = &blocks[b];
            let vsj = vs.column(j).into_owned();
            let vb = v.select_columns(idx);
            // exact-minus-Nystrom covariance to the test point's own block
            let kb = DVector::from_iterator(
                idx.len(),
                idx.iter()
                    .map(|&i| kernel::se_ard_raw(x_t.column(i).as_slice(), xj.as_slice(), &inv_l2, sf2)),
            );
            let eb = &kb - vb.tr_mul(&vsj);
            let li_e = factors[b].solve_vec(&eb);
            let beta_b = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.core.beta[i]));
            let mean = vsj.dot(&v_beta) + eb.dot(&beta_b);
            let vb_li_e = &vb * &li_e;
            let quad = vsj.dot(&(&a_minus_i * &vsj)) + 2.0 * vsj.dot(&vb_li_e) + eb.dot(&li_e);
            let u = self.core.la.solve_l_vec(&(&a_minus_i * &vsj + vb_li_e));
            (mean, sf2 - (quad - u.norm_squared()))
        });
        results.into_iter().unzip()
    }

    pub fn predict(&self, xstar: &DMatrix<f64>, flavor: Flavor) -> Result<PredictiveDistribution> {
        let (mean, var) = self.latent_moments(xstar)?;
        Ok(PredictiveDistribution::from_latent(mean, var, self.hp.noise_var(), flavor))
    }
}

/// Free-function form of [`SparseModel::predict`].
pub fn sparse_predict(model: &SparseModel, xstar: &DMatrix<f64>, flavor: Flavor) -> Result<PredictiveDistribution> {
    model.predict(xstar, flavor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::partition_kmeans;
    use crate::gp_full;
    use crate::optimize::{check_gradient_with, Stencil, CENTRAL5_STEP};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_data(seed: u64, n: usize, d: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: DMatrix<f64> = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
        let y = DVector::from_fn(n, |i, _| x[(i, 0)].sin() + rng.random_range(-0.3..0.3));
        Dataset::new(x, y).unwrap()
    }

    fn random_hp(seed: u64, d: usize) -> Hyperparameters {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ls: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();
        Hyperparameters::new(&ls, rng.random_range(0.5..2.0), rng.random_range(0.05..0.3)).unwrap()
    }

    /// log N(y | 0, C) by LU decomposition.
    fn dense_log_density(c: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
        let lu = c.clone().lu();
        let alpha = lu.solve(y).unwrap();
        let n = y.len() as f64;
        -0.5 * y.dot(&alpha) - 0.5 * lu.determinant().ln() - 0.5 * n * (2.0 * PI).ln()
    }

    /// Builds `Q_nn + Lambda` elementwise from the definitions.
    fn dense_sigma(method: SparseMethod, data: &Dataset, z: &DMatrix<f64>, hp: &Hyperparameters, part: Option<&Partition>) -> DMatrix<f64> {
        let k = kernel::cross(&data.x, &data.x, hp);
        let kmm = kernel::cross(z, z, hp);
        let knm = kernel::cross(&data.x, z, hp);
        let q = &knm * kmm.lu().solve(&knm.transpose()).unwrap();
        let n = data.n();
        let mut s = q.clone();
        for i in 0..n {
            for j in 0..n {
                let same = match method {
                    SparseMethod::Fitc => i == j,
                    SparseMethod::Pic => part.unwrap().assignments[i] == part.unwrap().assignments[j],
                    _ => false,
                };
                if same {
                    s[(i, j)] = k[(i, j)];
                }
            }
            s[(i, i)] += hp.noise_var();
        }
        s
    }

    #[test]
    fn evidence_matches_dense_oracle() {
        let data = random_data(3, 25, 2);
        let hp = random_hp(4, 2);
        let ind = InducingSet::from_kmeans(&data.x, 6, 1, false).unwrap();
        let part = partition_kmeans(&data.x, 4, 2).unwrap();
        for method in SparseMethod::ALL {
            let p = (method == SparseMethod::Pic).then_some(&part);
            let f = sparse_evidence_value(method, &data, &ind, &hp, p).unwrap();
            let mut expected = dense_log_density(&dense_sigma(method, &data, &ind.z, &hp, p), &data.y);
            if method == SparseMethod::Vfe {
                let k = kernel::cross(&data.x, &data.x, &hp);
                let s = dense_sigma(SparseMethod::Dtc, &data, &ind.z, &hp, None);
                let tr = (0..data.n()).map(|i| k[(i, i)] - (s[(i, i)] - hp.noise_var())).sum::<f64>();
                expected -= 0.5 * tr / hp.noise_var();
            }
            assert_relative_eq!(f, expected, epsilon = 1e-8, max_relative = 1e-10);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let data = random_data(5, 40, 2);
        let part = partition_kmeans(&data.x, 5, 0).unwrap();
        let ind0 = InducingSet::from_kmeans(&data.x, 7, 3, true).unwrap();
        for method in SparseMethod::ALL {
            let p = (method == SparseMethod::Pic).then_some(&part);
            for draw in 0..3 {
                let hp = random_hp(100 + draw, 2);
                let mut x0 = hp.to_vec();
                for i in 0..7 {
                    x0.extend(ind0.z.row(i).iter());
                }
                let chk = check_gradient_with(
                    |v: &[f64]| {
                        let hp = Hyperparameters::from_slice(2, &v[..4]);
                        let ind = InducingSet::new(DMatrix::from_row_slice(7, 2, &v[4..]), true)?;
                        sparse_evidence(method, &data, &ind, &hp, p)
                    },
                    &x0,
                    CENTRAL5_STEP,
                    Stencil::Central5,
                )
                .unwrap();
                assert!(chk.max_rel_error < 1e-5, "{method:?}: {} {:?}", chk.max_rel_error, chk.rel_errors);
            }
        }
    }

    #[test]
    fn inducing_at_training_inputs_recovers_exact_gp() {
        let data = random_data(7, 8, 2);
        let hp = Hyperparameters::new(&[0.6, 0.8], 1.2, 0.1).unwrap();
        let ind = InducingSet::new(data.x.clone(), false).unwrap();
        let full = gp_full::condition(&data, &hp).unwrap();
        let xs = random_data(8, 12, 2).x;
        let (fm, fv) = full.latent_moments(&xs).unwrap();
        let (fm_x, fv_x) = full.latent_moments(&data.x).unwrap();
        let part = partition_kmeans(&data.x, 3, 1).unwrap();
        for method in SparseMethod::ALL {
            let p = (method == SparseMethod::Pic).then_some(&part);
            let model = condition_sparse(method, &data, &ind, &hp, p).unwrap();
            assert_eq!(model.kmm_factor().jitter, 0.0);
            assert_relative_eq!(model.evidence, -full.nlml, epsilon = 1e-6);
            let (m, v) = model.latent_moments(&xs).unwrap();
            for j in 0..xs.nrows() {
                assert_relative_eq!(m[j], fm[j], epsilon = 1e-6);
                if method != SparseMethod::SoR {
                    assert_relative_eq!(v[j], fv[j], epsilon = 1e-6);
                }
            }
            let (_, v) = model.latent_moments(&data.x).unwrap();
            for j in 0..data.n() {
                assert_relative_eq!(v[j], fv_x[j], epsilon = 1e-6);
            }
            let _ = &fm_x;
        }
    }

    #[test]
    fn pic_without_inducing_points_is_local_gp() {
        let data = random_data(9, 30, 1);
        let hp = random_hp(10, 1);
        let part = partition_kmeans(&data.x, 4, 5).unwrap();
        let model = condition_sparse(SparseMethod::Pic, &data, &InducingSet::empty(1), &hp, Some(&part)).unwrap();
        let xs = DMatrix::from_fn(20, 1, |i, _| -3.0 + 0.3 * i as f64);
        let (m, v) = model.latent_moments(&xs).unwrap();
        let blocks = part.blocks();
        let local_nlml: f64 = blocks
            .iter()
            .map(|b| gp_full::condition(&data.subset(b), &hp).unwrap().nlml)
            .sum();
        assert_relative_eq!(model.evidence, -local_nlml, epsilon = 1e-8);
        for j in 0..20 {
            let b = part.nearest_block(&[xs[(j, 0)]]);
            let local = gp_full::condition(&data.subset(&blocks[b]), &hp).unwrap();
            let (lm, lv) = local.latent_moments(&xs.rows(j, 1).into_owned()).unwrap();
            assert_relative_eq!(m[j], lm[0], epsilon = 1e-10);
            assert_relative_eq!(v[j], lv[0], epsilon = 1e-10);
        }
    }

    #[test]
    fn pic_with_singleton_blocks_is_fitc() {
        let data = random_data(11, 15, 2);
        let hp = random_hp(12, 2);
        let ind = InducingSet::from_kmeans(&data.x, 4, 0, false).unwrap();
        let part = Partition::from_assignments(&data.x, (0..15).collect(), 15).unwrap();
        let pic = condition_sparse(SparseMethod::Pic, &data, &ind, &hp, Some(&part)).unwrap();
        let fitc = condition_sparse(SparseMethod::Fitc, &data, &ind, &hp, None).unwrap();
        assert_relative_eq!(pic.evidence, fitc.evidence, epsilon = 1e-10);
        // at a training input the PIC block correction is exact, so compare away from data
        let xs = DMatrix::from_row_slice(2, 2, &[5.0, 5.0, -6.0, 4.0]);
        let (pm, pv) = pic.latent_moments(&xs).unwrap();
        let (fm, fv) = fitc.latent_moments(&xs).unwrap();
        for j in 0..2 {
            assert_relative_eq!(pm[j], fm[j], epsilon = 1e-8);
            assert_relative_eq!(pv[j], fv[j], epsilon = 1e-8);
        }
    }

    #[test]
    fn sor_and_dtc_relations() {
        let data = random_data(13, 30, 1);
        let hp = random_hp(14, 1);
        let ind = InducingSet::equally_spaced(-2.0, 2.0, 5, false).unwrap();
        let sor = condition_sparse(SparseMethod::SoR, &data, &ind, &hp, None).unwrap();
        let dtc = condition_sparse(SparseMethod::Dtc, &data, &ind, &hp, None).unwrap();
        assert_relative_eq!(sor.evidence, dtc.evidence, epsilon = 1e-12);
        let xs = DMatrix::from_fn(100, 1, |i, _| -6.0 + 0.12 * i as f64);
        let (sm, sv) = sor.latent_moments(&xs).unwrap();
        let (dm, dv) = dtc.latent_moments(&xs).unwrap();
        for j in 0..100 {
            assert!((sm[j] - dm[j]).abs() < 1e-10);
            assert!(dv[j] >= sv[j] - 1e-10);
        }
    }

    #[test]
    fn vfe_bound_and_nesting() {
        let data = random_data(15, 30, 1);
        let hp = random_hp(16, 1);
        let exact = -gp_full::nlml(&data, &hp).unwrap().0;
        let mut prev = f64::NEG_INFINITY;
        let all = InducingSet::equally_spaced(-2.0, 2.0, 9, false).unwrap();
        for m in [1usize, 3, 5, 9] {
            // nested subsets of the same 9 points
            let idx: Vec<usize> = (0..9).step_by(8 / (m - 1).max(1)).take(m).collect();
            let idx = if m == 1 { vec![4] } else { idx };
            let z = InducingSet::new(all.z.select_rows(&idx), false).unwrap();
            let f = sparse_evidence_value(SparseMethod::Vfe, &data, &z, &hp, None).unwrap();
            assert!(f <= exact + 1e-8);
            if m > 1 {
                assert!(f >= prev - 1e-8, "m = {m}: {f} < {prev}");
            }
            prev = f;
        }
    }

    #[test]
    fn fit_improves_evidence() {
        let data = random_data(17, 40, 1);
        let hp0 = Hyperparameters::default_init(1);
        let ind = InducingSet::from_kmeans(&data.x, 6, 0, true).unwrap();
        let before = sparse_evidence_value(SparseMethod::Vfe, &data, &ind, &hp0, None).unwrap();
        let model = fit_sparse(SparseMethod::Vfe, &data, &ind, &hp0, &DeterministicConfig::default(), None).unwrap();
        assert!(model.evidence > before);
        assert_ne!(model.inducing.z, ind.z);
        let v = model.trace.as_ref().unwrap().values();
        assert!(v.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn argument_checks() {
        let data = random_data(1, 10, 2);
        let hp = random_hp(2, 2);
        let ind = InducingSet::from_kmeans(&data.x, 3, 0, false).unwrap();
        assert!(sparse_evidence(SparseMethod::Pic, &data, &ind, &hp, None).is_err());
        let part = partition_kmeans(&data.x, 2, 0).unwrap();
        assert!(sparse_evidence(SparseMethod::Fitc, &data, &ind, &hp, Some(&part)).is_err());
        assert!(sparse_evidence(SparseMethod::Dtc, &data, &InducingSet::empty(2), &hp, None).is_err());
        assert!(InducingSet::new(DMatrix::zeros(0, 2), false).is_err());
        let bad = InducingSet::new(DMatrix::zeros(3, 1), false).unwrap();
        assert!(sparse_evidence(SparseMethod::Dtc, &data, &bad, &hp, None).is_err());
        let model = condition_sparse(SparseMethod::Dtc, &data, &ind, &hp, None).unwrap();
        assert!(model.latent_moments(&DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn nystrom_and_trace() {
        let data = random_data(21, 12, 2);
        let hp = random_hp(22, 2);
        let z = InducingSet::from_kmeans(&data.x, 4, 0, false).unwrap().z;
        let q = nystrom(&data.x, &data.x, &z, &hp).unwrap();
        let s = dense_sigma(SparseMethod::Dtc, &data, &z, &hp, None);
        let mut expected = s.clone();
        add_diag(&mut expected, -hp.noise_var());
        assert!(crate::linalg::rel_frobenius(&q, &expected) < 1e-10);
        let t = trace_term(&data.x, &z, &hp).unwrap();
        assert_relative_eq!(t, 12.0 * hp.signal_var() - q.trace(), epsilon = 1e-10);
        assert!(t > 0.0);
    }
}
