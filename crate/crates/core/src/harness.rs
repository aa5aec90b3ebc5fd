//! Experiment orchestration: config files, end-to-end runs, reports,
//! multi-seed campaigns and the gradient-check suite.
//!
//! Config files are flat `key = value` text. Blank lines and lines starting
//! with `#` are ignored; unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    self, fit_experts, partition_kmeans, partition_random, predict_aggregated, AggregationMethod, BetaRule,
    ExpertEnsemble, ExpertMode, Partition,
};
use crate::data::{self, Dataset, NormStats, SincSpec};
use crate::error::{GpError, Result};
use crate::gp_full::{self, TrainedFullGP, DEFAULT_EXACT_CAP};
use crate::kernel::Hyperparameters;
use crate::metrics;
use crate::optimize::{check_gradient_with, DeterministicConfig, OptTrace, Stencil, CENTRAL5_STEP};
use crate::predictive::{Flavor, PredictiveDistribution};
use crate::sparse::{self, InducingSet, SparseMethod, SparseModel};
use crate::svgp::{self, SvgpConfig, SvgpModel, VariationalState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MethodKind {
    Full,
    Sparse(SparseMethod),
    Svgp,
    Aggregated(AggregationMethod),
}

impl MethodKind {
    pub const NAMES: [&'static str; 11] = [
        "full", "sor", "dtc", "fitc", "pic", "vfe", "svgp", "poe", "gpoe", "bcm", "rbcm",
    ];

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().as_str() {
            "full" => MethodKind::Full,
            "sor" => MethodKind::Sparse(SparseMethod::SoR),
            "dtc" => MethodKind::Sparse(SparseMethod::Dtc),
            "fitc" => MethodKind::Sparse(SparseMethod::Fitc),
            "pic" => MethodKind::Sparse(SparseMethod::Pic),
            "vfe" => MethodKind::Sparse(SparseMethod::Vfe),
            "svgp" => MethodKind::Svgp,
            "poe" => MethodKind::Aggregated(AggregationMethod::PoE),
            "gpoe" => MethodKind::Aggregated(AggregationMethod::GPoE),
            "bcm" => MethodKind::Aggregated(AggregationMethod::Bcm),
            "rbcm" => MethodKind::Aggregated(AggregationMethod::Rbcm),
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Full => "full",
            MethodKind::Sparse(m) => m.name(),
            MethodKind::Svgp => "svgp",
            MethodKind::Aggregated(a) => a.name(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Sinc,
    Csv { path: PathBuf, target: String },
    /// Smooth synthetic data of a chosen shape.
    Synthetic { n: usize, d: usize, noise_var: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InducingInit {
    KMeans,
    /// Equally spaced over the training range; 1-D inputs only.
    Grid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartitionKind {
    KMeans,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HpInit {
    /// The configured initial values.
    Fixed,
    /// `l ~ U(0, 1)`, `sigma_f^2 ~ U(0, 1)`, `sigma_eps^2 ~ U(0, 0.5)` drawn
    /// with the model seed.
    Random,
}

/// Everything one experiment needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub method: MethodKind,
    pub data: DataSource,
    pub sinc: SincSpec,
    pub test_fraction: f64,
    pub data_seed: u64,
    pub model_seed: u64,
    /// Inducing size `m`.
    pub inducing: usize,
    pub inducing_init: InducingInit,
    pub train_inducing: bool,
    /// Number of experts `M` (also the PIC block count).
    pub experts: usize,
    pub partition: PartitionKind,
    pub expert_mode: ExpertMode,
    pub beta: Option<BetaRule>,
    pub svgp: SvgpConfig,
    pub optimizer: DeterministicConfig,
    pub init_lengthscale: f64,
    pub init_signal_var: f64,
    pub init_noise_var: f64,
    pub hp_init: HpInit,
    /// Extra random-start fits for deterministic models; the best is kept.
    pub restarts: usize,
    pub exact_cap: usize,
    pub output_dir: Option<PathBuf>,
    /// Seeds of a `bench` campaign.
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: MethodKind::Full,
            data: DataSource::Sinc,
            sinc: SincSpec::default(),
            test_fraction: 0.1,
            data_seed: 0,
            model_seed: 0,
            inducing: 15,
            inducing_init: InducingInit::KMeans,
            train_inducing: true,
            experts: 10,
            partition: PartitionKind::KMeans,
            expert_mode: ExpertMode::Shared,
            beta: None,
            svgp: SvgpConfig::default(),
            optimizer: DeterministicConfig::default(),
            init_lengthscale: 0.5,
            init_signal_var: 1.0,
            init_noise_var: 0.1,
            hp_init: HpInit::Fixed,
            restarts: 0,
            exact_cap: DEFAULT_EXACT_CAP,
            output_dir: None,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

/// Recognized config keys.
pub const CONFIG_KEYS: [&str; 36] = [
    "method",
    "dataset",
    "csv_path",
    "target",
    "synthetic_n",
    "synthetic_d",
    "synthetic_noise_var",
    "sinc_n_train",
    "sinc_n_test",
    "sinc_noise_var",
    "test_fraction",
    "data_seed",
    "model_seed",
    "m",
    "inducing_init",
    "train_inducing",
    "experts",
    "partition",
    "expert_mode",
    "beta",
    "batch_size",
    "step_rate",
    "momentum",
    "decay",
    "svgp_max_iters",
    "opt_max_iters",
    "grad_tol",
    "rel_f_tol",
    "init_lengthscale",
    "init_signal_var",
    "init_noise_var",
    "hp_init",
    "restarts",
    "exact_cap",
    "output_dir",
    "seeds",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| GpError::config(key, format!("cannot parse `{v}` as a number")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(GpError::config(key, format!("expected true or false, got `{v}`"))),
    }
}

fn beta_name(b: Option<BetaRule>) -> &'static str {
    match b {
        None => "default",
        Some(BetaRule::ConstantOne) => "one",
        Some(BetaRule::UniformOverM) => "uniform",
        Some(BetaRule::DifferentialEntropy) => "entropy",
        Some(BetaRule::NormalizedEntropy) => "normalized_entropy",
    }
}

impl ExperimentConfig {
    /// Parses config text. Every key is optional except `method`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(GpError::config(
                    format!("line {}", lineno + 1),
                    format!("expected `key = value`, got `{line}`"),
                ));
            };
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if !CONFIG_KEYS.contains(&k.as_str()) {
                return Err(GpError::config(k, "unknown key"));
            }
            if kv.insert(k.clone(), v).is_some() {
                return Err(GpError::config(k, "key given more than once"));
            }
        }
        Self::from_map(&kv)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    fn from_map(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        let get = |k: &str| kv.get(k).map(String::as_str);
        let method = get("method").ok_or_else(|| GpError::config("method", "missing required key"))?;
        c.method = MethodKind::parse(method).ok_or_else(|| {
            GpError::config("method", format!("unknown method `{method}`; expected one of {:?}", MethodKind::NAMES))
        })?;
        for (k, v) in kv {
            let v = v.as_str();
            match k.as_str() {
                "sinc_n_train" => c.sinc.n_train = parse_num(k, v)?,
                "sinc_n_test" => c.sinc.n_test = parse_num(k, v)?,
                "sinc_noise_var" => c.sinc.noise_var = parse_num(k, v)?,
                "test_fraction" => c.test_fraction = parse_num(k, v)?,
                "data_seed" => c.data_seed = parse_num(k, v)?,
                "model_seed" => c.model_seed = parse_num(k, v)?,
                "m" => c.inducing = parse_num(k, v)?,
                "inducing_init" => {
                    c.inducing_init = match v {
                        "kmeans" => InducingInit::KMeans,
                        "grid" => InducingInit::Grid,
                        _ => return Err(GpError::config(k, format!("expected kmeans or grid, got `{v}`"))),
                    }
                }
                "train_inducing" => c.train_inducing = parse_bool(k, v)?,
                "experts" => c.experts = parse_num(k, v)?,
                "partition" => {
                    c.partition = match v {
                        "kmeans" => PartitionKind::KMeans,
                        "random" => PartitionKind::Random,
                        _ => return Err(GpError::config(k, format!("expected kmeans or random, got `{v}`"))),
                    }
                }
                "expert_mode" => {
                    c.expert_mode = match v {
                        "shared" => ExpertMode::Shared,
                        "individual" => ExpertMode::Individual,
                        _ => return Err(GpError::config(k, format!("expected shared or individual, got `{v}`"))),
                    }
                }
                "beta" => {
                    c.beta = match v {
                        "default" => None,
                        "one" => Some(BetaRule::ConstantOne),
                        "uniform" => Some(BetaRule::UniformOverM),
                        "entropy" => Some(BetaRule::DifferentialEntropy),
                        "normalized_entropy" => Some(BetaRule::NormalizedEntropy),
                        _ => {
                            return Err(GpError::config(
                                k,
                                format!("expected default, one, uniform, entropy or normalized_entropy, got `{v}`"),
                            ))
                        }
                    }
                }
                "batch_size" => c.svgp.batch_size = parse_num(k, v)?,
                "step_rate" => c.svgp.step_rate = parse_num(k, v)?,
                "momentum" => c.svgp.momentum = parse_num(k, v)?,
                "decay" => c.svgp.decay = parse_num(k, v)?,
                "svgp_max_iters" => c.svgp.max_iters = parse_num(k, v)?,
                "opt_max_iters" => c.optimizer.max_iters = parse_num(k, v)?,
                "grad_tol" => c.optimizer.grad_tol = parse_num(k, v)?,
                "rel_f_tol" => c.optimizer.rel_f_tol = parse_num(k, v)?,
                "init_lengthscale" => c.init_lengthscale = parse_num(k, v)?,
                "init_signal_var" => c.init_signal_var = parse_num(k, v)?,
                "init_noise_var" => c.init_noise_var = parse_num(k, v)?,
                "hp_init" => {
                    c.hp_init = match v {
                        "fixed" => HpInit::Fixed,
                        "random" => HpInit::Random,
                        _ => return Err(GpError::config(k, format!("expected fixed or random, got `{v}`"))),
                    }
                }
                "restarts" => c.restarts = parse_num(k, v)?,
                "exact_cap" => c.exact_cap = parse_num(k, v)?,
                "output_dir" => c.output_dir = Some(PathBuf::from(v)),
                "seeds" => {
                    c.seeds = v
                        .split(',')
                        .map(|s| parse_num(k, s.trim()))
                        .collect::<Result<Vec<u64>>>()?
                }
                _ => {}
            }
        }
        let dataset = get("dataset").unwrap_or("sinc");
        c.data = match dataset {
            "sinc" => DataSource::Sinc,
            "csv" => DataSource::Csv {
                path: PathBuf::from(get("csv_path").ok_or_else(|| GpError::config("csv_path", "required when dataset = csv"))?),
                target: get("target")
                    .ok_or_else(|| GpError::config("target", "required when dataset = csv"))?
                    .to_string(),
            },
            "synthetic" => DataSource::Synthetic {
                n: get("synthetic_n").map(|v| parse_num("synthetic_n", v)).transpose()?.unwrap_or(1200),
                d: get("synthetic_d").map(|v| parse_num("synthetic_d", v)).transpose()?.unwrap_or(5),
                noise_var: get("synthetic_noise_var")
                    .map(|v| parse_num("synthetic_noise_var", v))
                    .transpose()?
                    .unwrap_or(0.01),
            },
            _ => {
                return Err(GpError::config(
                    "dataset",
                    format!("expected sinc, csv or synthetic, got `{dataset}`"),
                ))
            }
        };
        for k in ["csv_path", "target"] {
            if kv.contains_key(k) && dataset != "csv" {
                return Err(GpError::config(k, "only valid with dataset = csv"));
            }
        }
        for k in ["synthetic_n", "synthetic_d", "synthetic_noise_var"] {
            if kv.contains_key(k) && dataset != "synthetic" {
                return Err(GpError::config(k, "only valid with dataset = synthetic"));
            }
        }
        c.svgp.seed = c.model_seed;
        c.svgp.train_inducing = c.train_inducing;
        c.validate()?;
        Ok(c)
    }

    /// Checks value ranges and that referenced files exist.
    pub fn validate(&self) -> Result<()> {
        if let DataSource::Csv { path, .. } = &self.data {
            if !path.is_file() {
                return Err(GpError::config("csv_path", format!("file `{}` does not exist", path.display())));
            }
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(GpError::config("test_fraction", "must lie in (0, 1)"));
        }
        for (k, v) in [
            ("init_lengthscale", self.init_lengthscale),
            ("init_signal_var", self.init_signal_var),
            ("init_noise_var", self.init_noise_var),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GpError::config(k, "must be positive"));
            }
        }
        if self.inducing == 0 && matches!(self.method, MethodKind::Sparse(m) if m != SparseMethod::Pic) {
            return Err(GpError::config("m", "must be at least 1"));
        }
        if self.experts == 0 {
            return Err(GpError::config("experts", "must be at least 1"));
        }
        if self.optimizer.max_iters == 0 {
            return Err(GpError::config("opt_max_iters", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(GpError::config("seeds", "needs at least one seed"));
        }
        if self.expert_mode == ExpertMode::Individual
            && matches!(self.method, MethodKind::Aggregated(AggregationMethod::Bcm | AggregationMethod::Rbcm))
        {
            return Err(GpError::config(
                "expert_mode",
                "bcm and rbcm need shared hyperparameters",
            ));
        }
        Ok(())
    }

    /// Flat key/value view, echoed into reports.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("method", self.method.name().into());
        match &self.data {
            DataSource::Sinc => {
                put("dataset", "sinc".into());
                put("sinc_n_train", self.sinc.n_train.to_string());
                put("sinc_n_test", self.sinc.n_test.to_string());
                put("sinc_noise_var", self.sinc.noise_var.to_string());
            }
            DataSource::Csv { path, target } => {
                put("dataset", "csv".into());
                put("csv_path", path.display().to_string());
                put("target", target.clone());
                put("test_fraction", self.test_fraction.to_string());
            }
            DataSource::Synthetic { n, d, noise_var } => {
                put("dataset", "synthetic".into());
                put("synthetic_n", n.to_string());
                put("synthetic_d", d.to_string());
                put("synthetic_noise_var", noise_var.to_string());
                put("test_fraction", self.test_fraction.to_string());
            }
        }
        put("data_seed", self.data_seed.to_string());
        put("model_seed", self.model_seed.to_string());
        put("m", self.inducing.to_string());
        put(
            "inducing_init",
            match self.inducing_init {
                InducingInit::KMeans => "kmeans",
                InducingInit::Grid => "grid",
            }
            .into(),
        );
        put("train_inducing", self.train_inducing.to_string());
        put("experts", self.experts.to_string());
        put(
            "partition",
            match self.partition {
                PartitionKind::KMeans => "kmeans",
                PartitionKind::Random => "random",
            }
            .into(),
        );
        put(
            "expert_mode",
            match self.expert_mode {
                ExpertMode::Shared => "shared",
                ExpertMode::Individual => "individual",
            }
            .into(),
        );
        put("beta", beta_name(self.beta).into());
        put("batch_size", self.svgp.batch_size.to_string());
        put("step_rate", self.svgp.step_rate.to_string());
        put("momentum", self.svgp.momentum.to_string());
        put("decay", self.svgp.decay.to_string());
        put("svgp_max_iters", self.svgp.max_iters.to_string());
        put("opt_max_iters", self.optimizer.max_iters.to_string());
        put("grad_tol", self.optimizer.grad_tol.to_string());
        put("rel_f_tol", self.optimizer.rel_f_tol.to_string());
        put("init_lengthscale", self.init_lengthscale.to_string());
        put("init_signal_var", self.init_signal_var.to_string());
        put("init_noise_var", self.init_noise_var.to_string());
        put(
            "hp_init",
            match self.hp_init {
                HpInit::Fixed => "fixed",
                HpInit::Random => "random",
            }
            .into(),
        );
        put("restarts", self.restarts.to_string());
        put("exact_cap", self.exact_cap.to_string());
        if let Some(p) = &self.output_dir {
            put("output_dir", p.display().to_string());
        }
        put(
            "seeds",
            self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
        );
        m
    }

    /// Config text that parses back to the same config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_map() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    fn initial_hp(&self, d: usize, rng: &mut ChaCha8Rng) -> Result<Hyperparameters> {
        match self.hp_init {
            HpInit::Fixed => Hyperparameters::isotropic(d, self.init_lengthscale, self.init_signal_var, self.init_noise_var),
            HpInit::Random => random_hp(d, rng),
        }
    }
}

fn random_hp(d: usize, rng: &mut ChaCha8Rng) -> Result<Hyperparameters> {
    // open intervals: a zero draw would have no logarithm
    let ls: Vec<f64> = (0..d).map(|_| rng.random_range(1e-3..1.0)).collect();
    Hyperparameters::new(&ls, rng.random_range(1e-3..1.0), rng.random_range(1e-3..0.5))
}

/// Normalized train/test data of one experiment.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub stats: NormStats,
    /// Noise-free test targets (sinc only), normalized.
    pub test_clean: Option<DVector<f64>>,
    /// Raw test inputs, all original columns.
    pub raw_test_x: DMatrix<f64>,
    /// Raw training-input range of the first column (sinc only).
    pub train_range: Option<(f64, f64)>,
}

/// Generates or loads the data, splits it and standardizes both parts with
/// the training statistics.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (train_raw, test_raw, clean) = match &cfg.data {
        DataSource::Sinc => {
            let s = data::generate_sinc(&cfg.sinc, cfg.data_seed)?;
            (s.train, s.test, Some(s.test_clean))
        }
        DataSource::Csv { path, target } => {
            let all = data::load_csv(path, target)?;
            let (tr, te) = data::split(&all, cfg.test_fraction, cfg.data_seed)?;
            (tr, te, None)
        }
        DataSource::Synthetic { n, d, noise_var } => {
            let all = data::generate_smooth(*n, *d, *noise_var, cfg.data_seed)?;
            let (tr, te) = data::split(&all, cfg.test_fraction, cfg.data_seed)?;
            (tr, te, None)
        }
    };
    let stats = NormStats::fit(&train_raw)?;
    let train_range = matches!(cfg.data, DataSource::Sinc).then(|| (cfg.sinc.train_range.0, cfg.sinc.train_range.1));
    Ok(PreparedData {
        train: stats.apply(&train_raw),
        test: stats.apply(&test_raw),
        test_clean: clean.map(|c| stats.transform_targets(&c)),
        raw_test_x: test_raw.x.clone(),
        stats,
        train_range,
    })
}

/// Any trained model.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum FittedModel {
    Full(TrainedFullGP),
    Sparse(SparseModel),
    Svgp(SvgpModel),
    Experts {
        ensemble: ExpertEnsemble,
        method: AggregationMethod,
        beta: Option<BetaRule>,
    },
}

/// Observed-flavor prediction with aggregation diagnostics.
#[derive(Clone, Debug)]
pub struct ModelPrediction {
    pub dist: PredictiveDistribution,
    pub floor_hits: usize,
    pub negative_betas: usize,
}

impl FittedModel {
    pub fn predict(&self, x: &DMatrix<f64>, flavor: Flavor) -> Result<ModelPrediction> {
        let plain = |dist| ModelPrediction {
            dist,
            floor_hits: 0,
            negative_betas: 0,
        };
        Ok(match self {
            FittedModel::Full(m) => plain(m.predict(x, flavor)?),
            FittedModel::Sparse(m) => plain(m.predict(x, flavor)?),
            FittedModel::Svgp(m) => plain(m.predict(x, flavor)?),
            FittedModel::Experts { ensemble, method, beta } => {
                let a = predict_aggregated(ensemble, x, *method, *beta, flavor)?;
                ModelPrediction {
                    dist: a.prediction,
                    floor_hits: a.floor_hits,
                    negative_betas: a.negative_betas,
                }
            }
        })
    }

    /// NLML for exact and aggregated models, the negated evidence or bound
    /// for sparse models and SVGP (full-batch).
    pub fn objective(&self, train: &Dataset) -> Result<f64> {
        Ok(match self {
            FittedModel::Full(m) => m.nlml,
            FittedModel::Sparse(m) => -m.evidence,
            FittedModel::Svgp(m) => -m.elbo(train)?,
            FittedModel::Experts { ensemble, .. } => ensemble.total_nlml,
        })
    }

    /// Noise variance in normalized units.
    pub fn noise_var(&self) -> f64 {
        match self {
            FittedModel::Full(m) => m.hp.noise_var(),
            FittedModel::Sparse(m) => m.hp.noise_var(),
            FittedModel::Svgp(m) => m.hp.noise_var(),
            FittedModel::Experts { ensemble, .. } => ensemble.noise_var(),
        }
    }

    pub fn trace(&self) -> Option<&OptTrace> {
        match self {
            FittedModel::Full(m) => m.trace.as_ref(),
            FittedModel::Sparse(m) => m.trace.as_ref(),
            FittedModel::Svgp(m) => Some(&m.trace),
            FittedModel::Experts { ensemble, .. } => ensemble.trace.as_ref(),
        }
    }

    pub fn jitter_events(&self) -> usize {
        match self {
            FittedModel::Full(m) => usize::from(m.chol.jitter > 0.0),
            FittedModel::Sparse(m) => m.jitter_events(),
            FittedModel::Svgp(m) => usize::from(m.kmm_factor().jitter > 0.0),
            FittedModel::Experts { ensemble, .. } => ensemble.jitter_events(),
        }
    }

    pub fn excluded_experts(&self) -> Vec<usize> {
        match self {
            FittedModel::Experts { ensemble, .. } => ensemble.excluded(),
            _ => Vec::new(),
        }
    }

    /// Parameters needed to rebuild the model on the same training data.
    pub fn snapshot(&self, cfg: &ExperimentConfig, prepared: &PreparedData, raw_feature_names: Vec<String>) -> Snapshot {
        let mut s = Snapshot {
            config: cfg.to_text(),
            norm_stats: prepared.stats.clone(),
            raw_feature_names,
            hp: None,
            expert_hp: Vec::new(),
            inducing: None,
            partition: None,
            variational: None,
        };
        match self {
            FittedModel::Full(m) => s.hp = Some(m.hp.clone()),
            FittedModel::Sparse(m) => {
                s.hp = Some(m.hp.clone());
                s.inducing = Some(m.inducing.z.clone());
                s.partition = m.partition.clone();
            }
            FittedModel::Svgp(m) => {
                s.hp = Some(m.hp.clone());
                s.inducing = Some(m.inducing.z.clone());
                s.variational = Some(m.state.clone());
            }
            FittedModel::Experts { ensemble, .. } => {
                s.hp = ensemble.hp_shared.clone();
                s.expert_hp = ensemble.experts.iter().map(|e| e.as_ref().map(|e| e.hp.clone())).collect();
                s.partition = Some(ensemble.partition.clone());
            }
        }
        s
    }
}

fn best_of<T>(runs: Vec<Result<T>>, score: impl Fn(&T) -> f64) -> Result<T> {
    let mut best: Option<T> = None;
    let mut first_err = None;
    for r in runs {
        match r {
            Ok(m) => {
                if best.as_ref().is_none_or(|b| score(&m) < score(b)) {
                    best = Some(m);
                }
            }
            Err(e) => {
                log::warn!("fit attempt failed: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_err.expect("at least one attempt"))
}

fn make_partition(cfg: &ExperimentConfig, x: &DMatrix<f64>) -> Result<Partition> {
    match cfg.partition {
        PartitionKind::KMeans => partition_kmeans(x, cfg.experts, cfg.model_seed),
        PartitionKind::Random => partition_random(x, cfg.experts, cfg.model_seed),
    }
}

fn make_inducing(cfg: &ExperimentConfig, train: &Dataset) -> Result<InducingSet> {
    let m = cfg.inducing;
    if m == 0 {
        return Ok(InducingSet::empty(train.d()));
    }
    if m > train.n() {
        return Err(GpError::config("m", format!("m = {m} exceeds the training size {}", train.n())));
    }
    match cfg.inducing_init {
        InducingInit::KMeans => InducingSet::from_kmeans(&train.x, m, cfg.model_seed, cfg.train_inducing),
        InducingInit::Grid => {
            if train.d() != 1 {
                return Err(GpError::config("inducing_init", "grid initialization needs 1-D inputs"));
            }
            let lo = train.x.min();
            let hi = train.x.max();
            InducingSet::equally_spaced(lo, hi, m, cfg.train_inducing)
        }
    }
}

/// Trains the configured model on normalized training data.
pub fn fit_model(cfg: &ExperimentConfig, train: &Dataset) -> Result<FittedModel> {
    let d = train.d();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model_seed);
    let mut inits = vec![cfg.initial_hp(d, &mut rng)?];
    if !matches!(cfg.method, MethodKind::Svgp) {
        for _ in 0..cfg.restarts {
            inits.push(random_hp(d, &mut rng)?);
        }
    }
    match cfg.method {
        MethodKind::Full => {
            if train.n() > cfg.exact_cap {
                return Err(GpError::config(
                    "exact_cap",
                    format!("n = {} exceeds the exact-GP cap {}", train.n(), cfg.exact_cap),
                ));
            }
            let runs = inits.iter().map(|h| gp_full::fit(train, h, &cfg.optimizer)).collect();
            Ok(FittedModel::Full(best_of(runs, |m: &TrainedFullGP| m.nlml)?))
        }
        MethodKind::Sparse(method) => {
            let ind = make_inducing(cfg, train)?;
            let part = if method == SparseMethod::Pic {
                Some(make_partition(cfg, &train.x)?)
            } else {
                None
            };
            let runs = inits
                .iter()
                .map(|h| sparse::fit_sparse(method, train, &ind, h, &cfg.optimizer, part.as_ref()))
                .collect();
            Ok(FittedModel::Sparse(best_of(runs, |m: &SparseModel| -m.evidence)?))
        }
        MethodKind::Svgp => {
            let ind = make_inducing(cfg, train)?;
            let mut sc = cfg.svgp.clone();
            sc.seed = cfg.model_seed;
            sc.train_inducing = cfg.train_inducing;
            Ok(FittedModel::Svgp(svgp::fit_svgp(train, &ind, &inits[0], &sc)?))
        }
        MethodKind::Aggregated(method) => {
            let part = make_partition(cfg, &train.x)?;
            let runs = inits
                .iter()
                .map(|h| fit_experts(train, &part, cfg.expert_mode, h, &cfg.optimizer))
                .collect();
            let ensemble = best_of(runs, |e: &ExpertEnsemble| e.total_nlml)?;
            Ok(FittedModel::Experts {
                ensemble,
                method,
                beta: cfg.beta,
            })
        }
    }
}

/// Reload-able model parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Snapshot {
    /// Config text of the run that produced the snapshot.
    pub config: String,
    pub norm_stats: NormStats,
    /// Raw input column names, in file order.
    pub raw_feature_names: Vec<String>,
    pub hp: Option<Hyperparameters>,
    /// Per-expert hyperparameters (`None` for excluded experts).
    pub expert_hp: Vec<Option<Hyperparameters>>,
    pub inducing: Option<DMatrix<f64>>,
    pub partition: Option<Partition>,
    pub variational: Option<VariationalState>,
}

fn missing(what: &str) -> GpError {
    GpError::invalid(format!("snapshot has no {what}"))
}

impl Snapshot {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Rebuilds the model on `train` at the stored parameters, without
    /// optimization.
    pub fn restore(&self, cfg: &ExperimentConfig, train: &Dataset) -> Result<FittedModel> {
        match cfg.method {
            MethodKind::Full => Ok(FittedModel::Full(gp_full::condition(
                train,
                self.hp.as_ref().ok_or_else(|| missing("hyperparameters"))?,
            )?)),
            MethodKind::Sparse(method) => {
                let hp = self.hp.as_ref().ok_or_else(|| missing("hyperparameters"))?;
                let z = self.inducing.clone().ok_or_else(|| missing("inducing inputs"))?;
                let ind = if z.nrows() == 0 {
                    InducingSet::empty(train.d())
                } else {
                    InducingSet::new(z, cfg.train_inducing)?
                };
                Ok(FittedModel::Sparse(sparse::condition_sparse(
                    method,
                    train,
                    &ind,
                    hp,
                    self.partition.as_ref(),
                )?))
            }
            MethodKind::Svgp => {
                let hp = self.hp.clone().ok_or_else(|| missing("hyperparameters"))?;
                let z = self.inducing.clone().ok_or_else(|| missing("inducing inputs"))?;
                let vs = self.variational.clone().ok_or_else(|| missing("variational state"))?;
                Ok(FittedModel::Svgp(SvgpModel::new(
                    InducingSet::new(z, cfg.train_inducing)?,
                    hp,
                    vs,
                    cfg.svgp.clone(),
                )?))
            }
            MethodKind::Aggregated(method) => {
                let partition = self.partition.clone().ok_or_else(|| missing("partition"))?;
                let blocks = partition.blocks();
                if blocks.len() != self.expert_hp.len() {
                    return Err(GpError::invalid("snapshot expert count does not match its partition"));
                }
                let experts = blocks
                    .iter()
                    .zip(&self.expert_hp)
                    .map(|(b, hp)| hp.as_ref().map(|hp| gp_full::condition(&train.subset(b), hp)).transpose())
                    .collect::<Result<Vec<_>>>()?;
                let total_nlml = experts.iter().flatten().map(|e| e.nlml).sum();
                let mode = if self.hp.is_some() {
                    ExpertMode::Shared
                } else {
                    ExpertMode::Individual
                };
                Ok(FittedModel::Experts {
                    ensemble: ExpertEnsemble {
                        partition,
                        mode,
                        experts,
                        hp_shared: self.hp.clone(),
                        total_nlml,
                        trace: None,
                    },
                    method,
                    beta: cfg.beta,
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub data_seed: u64,
    pub model_seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub n_train: usize,
    pub n_test: usize,
    pub input_dim: usize,
    pub iterations: usize,
    pub jitter_events: usize,
    pub excluded_experts: Vec<usize>,
    pub variance_floor_hits: usize,
    pub negative_betas: usize,
    pub clamped_variances: usize,
    /// Fitted noise variance in the original target units.
    pub noise_var_estimate: f64,
    pub noise_var_normalized: f64,
    /// SMSE against noise-free targets (sinc only).
    pub smse_clean: Option<f64>,
    /// The same restricted to test inputs inside the training range.
    pub smse_clean_train_range: Option<f64>,
}

/// Result of one experiment. Metrics are in normalized target units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub params: BTreeMap<String, String>,
    pub seeds: Seeds,
    pub smse: f64,
    pub msll: f64,
    pub train_time_s: f64,
    pub predict_time_s: f64,
    pub nlml_or_bound: f64,
    pub diagnostics: Diagnostics,
}

/// A finished experiment with everything needed to write outputs.
pub struct ExperimentOutcome {
    pub report: MetricsReport,
    pub model: FittedModel,
    pub prepared: PreparedData,
    pub prediction: ModelPrediction,
    pub snapshot: Snapshot,
}

fn raw_feature_names(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    Ok(match &cfg.data {
        DataSource::Sinc => vec!["x".into()],
        DataSource::Csv { path, target } => {
            let mut rdr = csv::Reader::from_path(path)?;
            rdr.headers()?.iter().filter(|h| h.trim() != target).map(|h| h.trim().to_string()).collect()
        }
        DataSource::Synthetic { d, .. } => (0..*d).map(|i| format!("x{i}")).collect(),
    })
}

/// Runs load, normalize, split, fit, predict and metrics without writing
/// anything.
pub fn execute(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let prepared = prepare_data(cfg).map_err(|e| e.in_stage("data"))?;
    let t0 = Instant::now();
    let model = fit_model(cfg, &prepared.train).map_err(|e| e.in_stage("fit"))?;
    let train_time_s = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let prediction = model
        .predict(&prepared.test.x, Flavor::Observed)
        .map_err(|e| e.in_stage("predict"))?;
    let predict_time_s = t1.elapsed().as_secs_f64();

    let metrics_err = |e: GpError| e.in_stage("metrics");
    let y = prepared.test.y.as_slice();
    let smse = metrics::smse(y, &prediction.dist.mean, 1.0).map_err(metrics_err)?;
    let msll = metrics::msll(y, &prediction.dist.mean, &prediction.dist.variance, 0.0, 1.0).map_err(metrics_err)?;
    let (smse_clean, smse_clean_train_range) = match &prepared.test_clean {
        Some(c) => {
            let all = metrics::smse(c.as_slice(), &prediction.dist.mean, 1.0).map_err(metrics_err)?;
            let inside = prepared.train_range.and_then(|(lo, hi)| {
                let idx: Vec<usize> = (0..prepared.raw_test_x.nrows())
                    .filter(|&i| (lo..=hi).contains(&prepared.raw_test_x[(i, 0)]))
                    .collect();
                let yc: Vec<f64> = idx.iter().map(|&i| c[i]).collect();
                let mu: Vec<f64> = idx.iter().map(|&i| prediction.dist.mean[i]).collect();
                metrics::smse(&yc, &mu, 1.0).ok()
            });
            (Some(all), inside)
        }
        None => (None, None),
    };
    let objective = model.objective(&prepared.train).map_err(|e| e.in_stage("fit"))?;
    let noise_norm = model.noise_var();
    let report = MetricsReport {
        method: cfg.method.name().into(),
        params: cfg.to_map(),
        seeds: Seeds {
            data_seed: cfg.data_seed,
            model_seed: cfg.model_seed,
        },
        smse,
        msll,
        train_time_s,
        predict_time_s,
        nlml_or_bound: objective,
        diagnostics: Diagnostics {
            n_train: prepared.train.n(),
            n_test: prepared.test.n(),
            input_dim: prepared.train.d(),
            iterations: model.trace().map_or(0, |t| t.iterations.len().saturating_sub(1)),
            jitter_events: model.jitter_events(),
            excluded_experts: model.excluded_experts(),
            variance_floor_hits: prediction.floor_hits,
            negative_betas: prediction.negative_betas,
            clamped_variances: prediction.dist.clamped,
            noise_var_estimate: prepared.stats.denormalize_var(noise_norm),
            noise_var_normalized: noise_norm,
            smse_clean,
            smse_clean_train_range,
        },
    };
    let snapshot = model.snapshot(cfg, &prepared, raw_feature_names(cfg).map_err(|e| e.in_stage("data"))?);
    Ok(ExperimentOutcome {
        report,
        model,
        prepared,
        prediction,
        snapshot,
    })
}

/// Writes `(x..., y, mean, variance, y_raw, mean_raw, variance_raw)` rows.
/// Normalized columns come first; `_raw` columns are in original units.
pub fn write_predictions(
    path: &Path,
    feature_names: &[String],
    raw_x: &DMatrix<f64>,
    y_norm: Option<&DVector<f64>>,
    pred: &PredictiveDistribution,
    stats: &NormStats,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = feature_names.to_vec();
    if y_norm.is_some() {
        header.push("y".into());
    }
    header.extend(["mean", "variance"].map(String::from));
    if y_norm.is_some() {
        header.push("y_raw".into());
    }
    header.extend(["mean_raw", "variance_raw"].map(String::from));
    w.write_record(&header)?;
    for i in 0..pred.len() {
        let mut row: Vec<String> = raw_x.row(i).iter().map(|v| v.to_string()).collect();
        if let Some(y) = y_norm {
            row.push(y[i].to_string());
        }
        row.push(pred.mean[i].to_string());
        row.push(pred.variance[i].to_string());
        if let Some(y) = y_norm {
            row.push(stats.denormalize_mean(y[i]).to_string());
        }
        row.push(stats.denormalize_mean(pred.mean[i]).to_string());
        row.push(stats.denormalize_var(pred.variance[i]).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the optimizer trace as `iteration,objective`.
pub fn write_trace(path: &Path, trace: Option<&OptTrace>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "objective"])?;
    if let Some(t) = trace {
        for e in &t.iterations {
            w.write_record([e.iter.to_string(), e.value.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// File names written into an experiment's output directory.
pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

fn write_outcome(dir: &Path, out: &ExperimentOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut written: Vec<PathBuf> = Vec::new();
    let result = (|| -> Result<()> {
        let p = dir.join(PREDICTIONS_FILE);
        written.push(p.clone());
        write_predictions(
            &p,
            &out.snapshot.raw_feature_names,
            &out.prepared.raw_test_x,
            Some(&out.prepared.test.y),
            &out.prediction.dist,
            &out.prepared.stats,
        )?;
        let p = dir.join(TRACE_FILE);
        written.push(p.clone());
        write_trace(&p, out.model.trace())?;
        let p = dir.join(SNAPSHOT_FILE);
        written.push(p.clone());
        fs::write(&p, serde_json::to_string_pretty(&out.snapshot)?)?;
        let p = dir.join(REPORT_FILE);
        written.push(p.clone());
        fs::write(&p, serde_json::to_string_pretty(&out.report)?)?;
        Ok(())
    })();
    if result.is_err() {
        for p in &written {
            let _ = fs::remove_file(p);
        }
    }
    result.map_err(|e| e.in_stage("output"))
}

/// Runs one experiment and, if `output_dir` is set, writes the report,
/// predictions, trace and snapshot there.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let out = execute(cfg)?;
    if let Some(dir) = &cfg.output_dir {
        write_outcome(dir, &out)?;
    }
    Ok(out.report)
}

/// Predictions from a snapshot. The model is rebuilt on the training data
/// its config describes; `input_csv` (raw input columns, header required)
/// defaults to that config's test split.
pub fn predict_from_snapshot(snapshot: &Snapshot, input_csv: Option<&Path>, output_csv: &Path) -> Result<()> {
    let cfg = ExperimentConfig::parse(&snapshot.config).map_err(|e| e.in_stage("config"))?;
    let prepared = prepare_data(&cfg).map_err(|e| e.in_stage("data"))?;
    if prepared.stats != snapshot.norm_stats {
        return Err(GpError::invalid("training data no longer matches the snapshot's normalization").in_stage("data"));
    }
    let model = snapshot.restore(&cfg, &prepared.train).map_err(|e| e.in_stage("restore"))?;
    let (raw_x, y) = match input_csv {
        Some(p) => (read_inputs(p, &snapshot.raw_feature_names).map_err(|e| e.in_stage("data"))?, None),
        None => (prepared.raw_test_x.clone(), Some(&prepared.test.y)),
    };
    let x = snapshot.norm_stats.transform_inputs(&raw_x);
    let pred = model.predict(&x, Flavor::Observed).map_err(|e| e.in_stage("predict"))?;
    write_predictions(output_csv, &snapshot.raw_feature_names, &raw_x, y, &pred.dist, &snapshot.norm_stats)
        .map_err(|e| e.in_stage("output"))
}

/// Reads the named columns of a CSV into a matrix, in the given order.
fn read_inputs(path: &Path, names: &[String]) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let cols = names
        .iter()
        .map(|n| {
            header
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| GpError::config("input", format!("input CSV lacks column `{n}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut vals = Vec::new();
    let mut rows = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for &c in &cols {
            let f = rec.get(c).unwrap_or("");
            vals.push(f.parse::<f64>().map_err(|_| GpError::Parse {
                row: r + 2,
                column: c + 1,
                message: format!("non-numeric cell `{f}`"),
            })?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(GpError::invalid("input CSV has no rows"));
    }
    Ok(DMatrix::from_row_slice(rows, names.len(), &vals))
}

/// Mean and sample standard deviation of one metric across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

fn summarize(v: &[f64]) -> Summary {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Summary { mean, std: var.sqrt() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub method: String,
    pub seeds: Vec<u64>,
    pub smse: Summary,
    pub msll: Summary,
    pub train_time_s: Summary,
    pub predict_time_s: Summary,
    pub runs: Vec<MetricsReport>,
}

/// Repeats an experiment once per seed (data and model seed both set to
/// it). Per-seed outputs go to `output_dir/seed_<s>` and the summary to
/// `output_dir/bench.json`.
pub fn run_bench(cfg: &ExperimentConfig) -> Result<BenchReport> {
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &s in &cfg.seeds {
        let mut c = cfg.clone();
        c.data_seed = s;
        c.model_seed = s;
        c.svgp.seed = s;
        c.output_dir = cfg.output_dir.as_ref().map(|d| d.join(format!("seed_{s}")));
        runs.push(run_experiment(&c)?);
    }
    let pick = |f: fn(&MetricsReport) -> f64| summarize(&runs.iter().map(f).collect::<Vec<_>>());
    let report = BenchReport {
        method: cfg.method.name().into(),
        seeds: cfg.seeds.clone(),
        smse: pick(|r| r.smse),
        msll: pick(|r| r.msll),
        train_time_s: pick(|r| r.train_time_s),
        predict_time_s: pick(|r| r.predict_time_s),
        runs,
    };
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("bench.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

/// Worst finite-difference agreement of one objective over random points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub objective: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub worst_point: usize,
}

/// Objectives covered by [`gradcheck_suite`].
pub const GRADCHECK_OBJECTIVES: [&str; 7] = ["full", "sor", "dtc", "fitc", "pic", "vfe", "svgp"];

/// Checks every analytic gradient (exact NLML, the five sparse evidences
/// with trainable `Z`, and the SVGP bound with its variational parameters)
/// at `points` random parameter draws on a random `n = 40`, `d = 2`
/// problem. Uses the five-point stencil at [`CENTRAL5_STEP`].
pub fn gradcheck_suite(points: usize, seed: u64) -> Result<Vec<GradcheckRow>> {
    let (n, d, m, blocks) = (40, 2, 7, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: DMatrix<f64> = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
    let y = DVector::from_fn(n, |i, _| (1.3 * x[(i, 0)]).sin() + 0.5 * x[(i, 1)] + rng.random_range(-0.2..0.2));
    let data = Dataset::new(x, y)?;
    let centres = partition_kmeans(&data.x, m, seed)?.centroids;
    let part = partition_kmeans(&data.x, blocks, seed.wrapping_add(1))?;

    let mut rows = Vec::new();
    for name in GRADCHECK_OBJECTIVES {
        let mut worst = (0.0f64, 0usize);
        for k in 0..points {
            let ls: Vec<f64> = (0..d).map(|_| rng.random_range(0.4..2.0)).collect();
            let hp = Hyperparameters::new(&ls, rng.random_range(0.3..2.0), rng.random_range(0.02..0.5))?;
            let z = centres.map(|v| v + rng.random_range(-0.1..0.1));
            let err = match name {
                "full" => {
                    check_gradient_with(
                        |p: &[f64]| gp_full::nlml(&data, &Hyperparameters::from_slice(d, p)),
                        &hp.to_vec(),
                        CENTRAL5_STEP,
                        Stencil::Central5,
                    )?
                    .max_rel_error
                }
                "svgp" => {
                    let mut mean = DVector::zeros(m);
                    let mut l = DMatrix::zeros(m, m);
                    for i in 0..m {
                        mean[i] = rng.random_range(-1.0..1.0);
                        for j in 0..i {
                            l[(i, j)] = rng.random_range(-0.3..0.3);
                        }
                        l[(i, i)] = rng.random_range(0.2..1.0);
                    }
                    let vs = VariationalState::new(mean, l)?;
                    check_gradient_with(
                        |p: &[f64]| {
                            let (hp, z, vs) = svgp::unflatten(p, d, m)?;
                            let (v, g) = svgp::elbo_with_gradient(&data, n, &z, &hp, &vs)?;
                            Ok((v, svgp::flatten_gradient(&g)))
                        },
                        &svgp::flatten(&hp, &z, &vs),
                        CENTRAL5_STEP,
                        Stencil::Central5,
                    )?
                    .max_rel_error
                }
                s => {
                    let method = match s {
                        "sor" => SparseMethod::SoR,
                        "dtc" => SparseMethod::Dtc,
                        "fitc" => SparseMethod::Fitc,
                        "pic" => SparseMethod::Pic,
                        _ => SparseMethod::Vfe,
                    };
                    let p = (method == SparseMethod::Pic).then_some(&part);
                    let mut x0 = hp.to_vec();
                    for i in 0..m {
                        x0.extend(z.row(i).iter());
                    }
                    check_gradient_with(
                        |v: &[f64]| {
                            let hp = Hyperparameters::from_slice(d, &v[..d + 2]);
                            let ind = InducingSet::new(DMatrix::from_row_slice(m, d, &v[d + 2..]), true)?;
                            sparse::sparse_evidence(method, &data, &ind, &hp, p)
                        },
                        &x0,
                        CENTRAL5_STEP,
                        Stencil::Central5,
                    )?
                    .max_rel_error
                }
            };
            if err > worst.0 || k == 0 {
                worst = (err, k);
            }
        }
        rows.push(GradcheckRow {
            objective: name.into(),
            points,
            max_rel_error: worst.0,
            worst_point: worst.1,
        });
    }
    Ok(rows)
}

/// Training-set SMSE of each surviving expert of an aggregated model.
pub fn expert_train_smse(model: &FittedModel) -> Result<Vec<f64>> {
    match model {
        FittedModel::Experts { ensemble, .. } => ensemble
            .experts
            .iter()
            .flatten()
            .map(aggregation::expert_train_smse)
            .collect(),
        _ => Err(GpError::invalid("not an aggregated model")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let text = "method = vfe\nm = 20\n# comment\n\nbeta = entropy\nseeds = 3, 4\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.method, MethodKind::Sparse(SparseMethod::Vfe));
        assert_eq!(c.inducing, 20);
        assert_eq!(c.beta, Some(BetaRule::DifferentialEntropy));
        assert_eq!(c.seeds, vec![3, 4]);
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn config_errors_name_the_field() {
        let field = |text: &str| match ExperimentConfig::parse(text).unwrap_err() {
            GpError::Config { field, .. } => field,
            e => panic!("unexpected {e}"),
        };
        assert_eq!(field("method = magic"), "method");
        assert_eq!(field("method = full\nbogus = 1"), "bogus");
        assert_eq!(field("m = 3"), "method");
        assert_eq!(field("method = vfe\nm = x"), "m");
        assert_eq!(field("method = vfe\nm = 3\nm = 4"), "m");
        assert_eq!(field("method = full\ndataset = csv\ncsv_path = /nonexistent.csv\ntarget = y"), "csv_path");
        assert_eq!(field("method = rbcm\nexpert_mode = individual"), "expert_mode");
        assert_eq!(field("method = full\ncsv_path = a.csv"), "csv_path");
    }

    #[test]
    fn sinc_full_gp_experiment() {
        let c = ExperimentConfig::parse("method = full").unwrap();
        let r = run_experiment(&c).unwrap();
        assert!(r.diagnostics.smse_clean_train_range.unwrap() < 0.05);
        assert!(r.smse < 1.0 && r.msll < 0.0);
        assert_eq!(r.seeds.data_seed, 0);
        let again = run_experiment(&c).unwrap();
        assert_eq!(again.smse, r.smse);
        assert_eq!(again.nlml_or_bound, r.nlml_or_bound);
    }

    #[test]
    fn every_method_runs_on_sinc() {
        for name in MethodKind::NAMES {
            let text = format!("method = {name}\nopt_max_iters = 30\nsvgp_max_iters = 50\nbatch_size = 20\nexperts = 4");
            let c = ExperimentConfig::parse(&text).unwrap();
            let r = run_experiment(&c).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(r.smse.is_finite() && r.msll.is_finite(), "{name}");
            assert!(r.smse < 1.0, "{name}: smse {}", r.smse);
        }
    }

    #[test]
    fn gradcheck_suite_small() {
        let rows = gradcheck_suite(3, 7).unwrap();
        assert_eq!(rows.len(), GRADCHECK_OBJECTIVES.len());
        for r in rows {
            assert!(r.max_rel_error < 1e-5, "{r:?}");
        }
    }
}
