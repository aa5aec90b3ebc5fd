//! Local experts and product-type aggregation (PoE, GPoE, BCM, RBCM).

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_dim, GpError, Result};
use crate::gp_full::{self, TrainedFullGP};
use crate::kernel::Hyperparameters;
use crate::optimize::{minimize_deterministic, DeterministicConfig, OptTrace};
use crate::par;
use crate::predictive::{Flavor, PredictiveDistribution};

const KMEANS_MAX_SWEEPS: usize = 100;
/// Smallest aggregated precision; larger variances are not representable.
pub const PRECISION_FLOOR: f64 = 1e-12;

/// Assignment of training rows to `M` experts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub assignments: Vec<usize>,
    /// `M x d` block centres, used to route test points.
    pub centroids: DMatrix<f64>,
}

impl Partition {
    /// Builds a partition from assignments, with centroids set to block
    /// means. Every expert must own at least one row.
    pub fn from_assignments(x: &DMatrix<f64>, assignments: Vec<usize>, m: usize) -> Result<Self> {
        check_dim("partition: assignments", x.nrows(), assignments.len())?;
        let centroids = block_means(x, &assignments, m);
        let p = Partition { assignments, centroids };
        p.validate()?;
        Ok(p)
    }

    pub fn n_experts(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.n_experts();
        let mut counts = vec![0usize; m];
        for &a in &self.assignments {
            if a >= m {
                return Err(GpError::invalid(format!("expert index {a} out of range for M = {m}")));
            }
            counts[a] += 1;
        }
        if let Some(e) = counts.iter().position(|&c| c == 0) {
            return Err(GpError::invalid(format!("expert {e} has no points")));
        }
        Ok(())
    }

    /// Row indices of each expert, in ascending order.
    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_experts()];
        for (i, &a) in self.assignments.iter().enumerate() {
            out[a].push(i);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.blocks().iter().map(Vec::len).collect()
    }

    /// Index of the centroid closest to `x` (lowest index on ties).
    pub fn nearest_block(&self, x: &[f64]) -> usize {
        nearest(&self.centroids, x).0
    }
}

fn sq_dist_row(c: &DMatrix<f64>, r: usize, x: &[f64]) -> f64 {
    x.iter().enumerate().map(|(q, v)| (c[(r, q)] - v).powi(2)).sum()
}

fn nearest(c: &DMatrix<f64>, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for r in 0..c.nrows() {
        let d = sq_dist_row(c, r, x);
        if d < best.1 {
            best = (r, d);
        }
    }
    best
}

fn block_means(x: &DMatrix<f64>, assignments: &[usize], m: usize) -> DMatrix<f64> {
    let d = x.ncols();
    let mut sums = DMatrix::zeros(m, d);
    let mut counts = vec![0usize; m];
    for (i, &a) in assignments.iter().enumerate() {
        if a < m {
            counts[a] += 1;
            for q in 0..d {
                sums[(a, q)] += x[(i, q)];
            }
        }
    }
    for (r, &c) in counts.iter().enumerate() {
        if c > 0 {
            for q in 0..d {
                sums[(r, q)] /= c as f64;
            }
        }
    }
    sums
}

fn check_count(n: usize, m: usize) -> Result<()> {
    if m == 0 || m > n {
        return Err(GpError::invalid(format!("need 1 <= M <= n, got M = {m}, n = {n}")));
    }
    Ok(())
}

/// k-means++ seeding followed by Lloyd sweeps until the assignment stops
/// changing or 100 sweeps have run.
pub fn partition_kmeans(x: &DMatrix<f64>, m: usize, seed: u64) -> Result<Partition> {
    let n = x.nrows();
    check_count(n, m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = x.row_iter().map(|r| r.iter().copied().collect()).collect();

    let mut centroids = DMatrix::zeros(m, x.ncols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from(&x.row(first));
    let mut d2: Vec<f64> = rows.iter().map(|p| sq_dist_row(&centroids, 0, p)).collect();
    for k in 1..m {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(k).copy_from(&x.row(pick));
        for (i, p) in rows.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist_row(&centroids, k, p));
        }
    }

    let mut assignments = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_SWEEPS {
        let next = par::map_slice(&rows, |p| nearest(&centroids, p).0);
        let changed = next != assignments;
        assignments = next;
        repair_empty(&rows, &mut assignments, &centroids, m);
        centroids = block_means(x, &assignments, m);
        if !changed {
            break;
        }
    }
    Partition::from_assignments(x, assignments, m)
}

/// Moves into each empty cluster the point of the largest cluster that lies
/// farthest from that cluster's centre.
fn repair_empty(rows: &[Vec<f64>], assignments: &mut [usize], centroids: &DMatrix<f64>, m: usize) {
    loop {
        let mut counts = vec![0usize; m];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let largest = (0..m).max_by_key(|&k| (counts[k], std::cmp::Reverse(k))).unwrap();
        let mut far = (usize::MAX, -1.0);
        for (i, p) in rows.iter().enumerate() {
            if assignments[i] == largest {
                let d = sq_dist_row(centroids, largest, p);
                if d > far.1 {
                    far = (i, d);
                }
            }
        }
        assignments[far.0] = empty;
    }
}

/// Balanced random assignment: rows are shuffled and dealt round-robin.
pub fn partition_random(x: &DMatrix<f64>, m: usize, seed: u64) -> Result<Partition> {
    let n = x.nrows();
    check_count(n, m)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignments = vec![0; n];
    for (k, &i) in idx.iter().enumerate() {
        assignments[i] = k % m;
    }
    Partition::from_assignments(x, assignments, m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExpertMode {
    /// One set of hyperparameters fitted to the sum of expert evidences.
    Shared,
    /// Each expert fitted on its own.
    Individual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregationMethod {
    PoE,
    GPoE,
    Bcm,
    Rbcm,
}

impl AggregationMethod {
    pub const ALL: [AggregationMethod; 4] = [
        AggregationMethod::PoE,
        AggregationMethod::GPoE,
        AggregationMethod::Bcm,
        AggregationMethod::Rbcm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregationMethod::PoE => "poe",
            AggregationMethod::GPoE => "gpoe",
            AggregationMethod::Bcm => "bcm",
            AggregationMethod::Rbcm => "rbcm",
        }
    }

    fn prior_corrected(self) -> bool {
        matches!(self, AggregationMethod::Bcm | AggregationMethod::Rbcm)
    }
}

/// Expert weights `beta_i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BetaRule {
    ConstantOne,
    UniformOverM,
    /// `0.5 (log s2_prior - log s2_i)`.
    DifferentialEntropy,
    /// Differential entropy rescaled to sum to one.
    NormalizedEntropy,
}

impl BetaRule {
    pub fn default_for(method: AggregationMethod) -> Self {
        match method {
            AggregationMethod::PoE | AggregationMethod::Bcm => BetaRule::ConstantOne,
            AggregationMethod::GPoE => BetaRule::UniformOverM,
            AggregationMethod::Rbcm => BetaRule::DifferentialEntropy,
        }
    }
}

/// Aggregated prediction plus diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregated {
    pub prediction: PredictiveDistribution,
    /// Points whose aggregated precision fell below [`PRECISION_FLOOR`].
    pub floor_hits: usize,
    /// Count of negative entropy weights across all points.
    pub negative_betas: usize,
}

/// Combines latent expert predictions pointwise.
///
/// `prior_vars[i]` is expert `i`'s prior latent variance; the BCM family
/// needs them all equal. `noise_var` is added afterwards for the observed
/// flavor.
pub fn aggregate(
    experts: &[PredictiveDistribution],
    prior_vars: &[f64],
    method: AggregationMethod,
    beta: BetaRule,
    noise_var: f64,
    flavor: Flavor,
) -> Result<Aggregated> {
    let m = experts.len();
    if m == 0 {
        return Err(GpError::invalid("aggregate: no experts"));
    }
    check_dim("aggregate: prior variances", m, prior_vars.len())?;
    let n = experts[0].len();
    for e in experts {
        check_dim("aggregate: expert prediction length", n, e.len())?;
        if e.flavor != Flavor::Latent {
            return Err(GpError::invalid("aggregate: expert predictions must be latent"));
        }
        if let Some(v) = e.variance.iter().find(|v| !(**v > 0.0)) {
            return Err(GpError::Numerical(format!("aggregate: non-positive expert variance {v}")));
        }
    }
    if method.prior_corrected() && prior_vars.iter().any(|&p| p != prior_vars[0]) {
        return Err(GpError::invalid(format!(
            "{} needs a prior shared by all experts",
            method.name()
        )));
    }

    let mut mean = vec![0.0; n];
    let mut var = vec![0.0; n];
    let mut floor_hits = 0;
    let mut negative_betas = 0;
    let mut betas = vec![0.0; m];
    for j in 0..n {
        match beta {
            BetaRule::ConstantOne => betas.fill(1.0),
            BetaRule::UniformOverM => betas.fill(1.0 / m as f64),
            BetaRule::DifferentialEntropy | BetaRule::NormalizedEntropy => {
                for (i, e) in experts.iter().enumerate() {
                    betas[i] = 0.5 * (prior_vars[i].ln() - e.variance[j].ln());
                }
                negative_betas += betas.iter().filter(|&&b| b < 0.0).count();
                if beta == BetaRule::NormalizedEntropy {
                    let s: f64 = betas.iter().sum();
                    if s != 0.0 {
                        betas.iter_mut().for_each(|b| *b /= s);
                    } else {
                        betas.fill(1.0 / m as f64);
                    }
                }
            }
        }
        let mut prec = 0.0;
        let mut weighted = 0.0;
        for (i, e) in experts.iter().enumerate() {
            let p = betas[i] / e.variance[j];
            prec += p;
            weighted += p * e.mean[j];
        }
        if method.prior_corrected() {
            prec += (1.0 - betas.iter().sum::<f64>()) / prior_vars[0];
        }
        if !(prec >= PRECISION_FLOOR) {
            prec = PRECISION_FLOOR;
            floor_hits += 1;
        }
        var[j] = 1.0 / prec;
        mean[j] = weighted * var[j];
    }
    if floor_hits > 0 {
        warn!("aggregate: precision floored at {floor_hits} point(s)");
    }
    Ok(Aggregated {
        prediction: PredictiveDistribution::from_latent(mean, var, noise_var, flavor),
        floor_hits,
        negative_betas,
    })
}

/// Trained local experts.
#[derive(Clone, Debug)]
pub struct ExpertEnsemble {
    pub partition: Partition,
    pub mode: ExpertMode,
    /// `None` where an expert failed to factorize (individual mode only).
    pub experts: Vec<Option<TrainedFullGP>>,
    pub hp_shared: Option<Hyperparameters>,
    /// Summed negative log evidence of the surviving experts.
    pub total_nlml: f64,
    /// Optimizer trace of the shared fit.
    pub trace: Option<OptTrace>,
}

impl ExpertEnsemble {
    pub fn excluded(&self) -> Vec<usize> {
        (0..self.experts.len()).filter(|&i| self.experts[i].is_none()).collect()
    }

    fn survivors(&self) -> impl Iterator<Item = &TrainedFullGP> {
        self.experts.iter().flatten()
    }

    /// Noise added to aggregated predictions: the shared value, or the mean
    /// over surviving experts.
    pub fn noise_var(&self) -> f64 {
        match &self.hp_shared {
            Some(hp) => hp.noise_var(),
            None => {
                let v: Vec<f64> = self.survivors().map(|e| e.hp.noise_var()).collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            }
        }
    }

    pub fn jitter_events(&self) -> usize {
        self.survivors().filter(|e| e.chol.jitter > 0.0).count()
    }
}

/// Trains one full GP per block.
pub fn fit_experts(
    data: &Dataset,
    partition: &Partition,
    mode: ExpertMode,
    hp0: &Hyperparameters,
    cfg: &DeterministicConfig,
) -> Result<ExpertEnsemble> {
    check_dim("fit_experts: partition size", data.n(), partition.assignments.len())?;
    partition.validate()?;
    let subsets: Vec<Dataset> = partition.blocks().iter().map(|b| data.subset(b)).collect();
    match mode {
        ExpertMode::Shared => {
            let d = hp0.dim();
            let res = minimize_deterministic(
                |p: &[f64]| {
                    let hp = Hyperparameters::from_slice(d, p);
                    let parts = par::map_slice(&subsets, |s| gp_full::nlml(s, &hp));
                    let mut value = 0.0;
                    let mut grad = vec![0.0; p.len()];
                    for r in parts {
                        let (v, g) = r?;
                        value += v;
                        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                    }
                    Ok((value, grad))
                },
                &hp0.to_vec(),
                cfg,
            )?;
            let hp = Hyperparameters::from_slice(d, &res.x);
            let experts = par::map_slice(&subsets, |s| gp_full::condition(s, &hp))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let total_nlml = experts.iter().map(|e| e.nlml).sum();
            Ok(ExpertEnsemble {
                partition: partition.clone(),
                mode,
                experts: experts.into_iter().map(Some).collect(),
                hp_shared: Some(hp),
                total_nlml,
                trace: Some(res.trace),
            })
        }
        ExpertMode::Individual => {
            let fits = par::map_slice(&subsets, |s| gp_full::fit(s, hp0, cfg));
            let mut experts = Vec::with_capacity(fits.len());
            for (i, f) in fits.into_iter().enumerate() {
                match f {
                    Ok(e) => experts.push(Some(e)),
                    Err(e) if e.is_numerical() => {
                        warn!("expert {i} excluded: {e}");
                        experts.push(None);
                    }
                    Err(e) => return Err(e),
                }
            }
            let total_nlml = experts.iter().flatten().map(|e| e.nlml).sum();
            Ok(ExpertEnsemble {
                partition: partition.clone(),
                mode,
                experts,
                hp_shared: None,
                total_nlml,
                trace: None,
            })
        }
    }
}

/// Queries every surviving expert and aggregates.
pub fn predict_aggregated(
    ensemble: &ExpertEnsemble,
    xstar: &DMatrix<f64>,
    method: AggregationMethod,
    beta: Option<BetaRule>,
    flavor: Flavor,
) -> Result<Aggregated> {
    if ensemble.mode == ExpertMode::Individual && method.prior_corrected() {
        return Err(GpError::invalid(format!(
            "{} requires shared hyperparameters",
            method.name()
        )));
    }
    let live: Vec<&TrainedFullGP> = ensemble.survivors().collect();
    if live.is_empty() {
        return Err(GpError::Numerical("all experts were excluded".into()));
    }
    let preds = par::map_slice(&live, |e| -> Result<PredictiveDistribution> {
        let (mean, var) = e.latent_moments(xstar)?;
        Ok(PredictiveDistribution {
            mean,
            variance: var,
            flavor: Flavor::Latent,
            clamped: 0,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let priors: Vec<f64> = live.iter().map(|e| e.hp.signal_var()).collect();
    aggregate(
        &preds,
        &priors,
        method,
        beta.unwrap_or_else(|| BetaRule::default_for(method)),
        ensemble.noise_var(),
        flavor,
    )
}

/// Pure local prediction: each test point is answered by the expert whose
/// centroid is nearest.
pub fn predict_local(ensemble: &ExpertEnsemble, xstar: &DMatrix<f64>, flavor: Flavor) -> Result<PredictiveDistribution> {
    let n = xstar.nrows();
    let owner: Vec<usize> = (0..n)
        .map(|j| {
            let row: Vec<f64> = xstar.row(j).iter().copied().collect();
            ensemble.partition.nearest_block(&row)
        })
        .collect();
    let mut mean = vec![0.0; n];
    let mut var = vec![0.0; n];
    let mut noise = vec![0.0; n];
    for (b, expert) in ensemble.experts.iter().enumerate() {
        let idx: Vec<usize> = (0..n).filter(|&j| owner[j] == b).collect();
        if idx.is_empty() {
            continue;
        }
        let Some(e) = expert else {
            return Err(GpError::Numerical(format!("expert {b} was excluded")));
        };
        let (m, v) = e.latent_moments(&xstar.select_rows(&idx))?;
        for (k, &j) in idx.iter().enumerate() {
            mean[j] = m[k];
            var[j] = v[k];
            noise[j] = e.hp.noise_var();
        }
    }
    let mut p = PredictiveDistribution::from_latent(mean, var, 0.0, Flavor::Latent);
    if flavor == Flavor::Observed {
        p.variance.iter_mut().zip(&noise).for_each(|(v, s)| *v += s);
        p.flavor = Flavor::Observed;
    }
    Ok(p)
}

/// Training-set SMSE of one expert's latent mean.
pub fn expert_train_smse(e: &TrainedFullGP) -> Result<f64> {
    let (m, _) = e.latent_moments(&e.dataset.x)?;
    let var = e.dataset.target_var();
    let y: &DVector<f64> = &e.dataset.y;
    crate::metrics::smse(y.as_slice(), &m, if var > 0.0 { var } else { 1.0 })
}
