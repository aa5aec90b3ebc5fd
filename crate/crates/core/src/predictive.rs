use serde::{Deserialize, Serialize};

/// Whether variances describe the latent function or a noisy observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Flavor {
    Latent,
    Observed,
}

/// Pointwise Gaussian predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveDistribution {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub flavor: Flavor,
    /// Latent variances below zero (round-off) that were clamped to 0.
    pub clamped: usize,
}

impl PredictiveDistribution {
    /// Builds a distribution from latent moments, clamping negative
    /// variances and adding `noise_var` for the observed flavor.
    pub fn from_latent(mean: Vec<f64>, mut latent_var: Vec<f64>, noise_var: f64, flavor: Flavor) -> Self {
        let mut clamped = 0;
        for v in latent_var.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
                clamped += 1;
            }
        }
        if flavor == Flavor::Observed {
            latent_var.iter_mut().for_each(|v| *v += noise_var);
        }
        PredictiveDistribution {
            mean,
            variance: latent_var,
            flavor,
            clamped,
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}
