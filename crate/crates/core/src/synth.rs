//! Ground-truth sparse factor instances.
//!
//! Loadings are `s_kj * Exp(1)` with `s_kj ~ Bernoulli(pi)`; abilities and
//! difficulties are unit-variance Gaussians whose means are drawn from
//! `U[-1, 1]`; answers are Bernoulli draws of the model probabilities.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::ResponseDataset;
use crate::error::Result;
use crate::model::{predict_prob, FactorSet};
use crate::rng;

/// Where the uniform means of the Gaussian factors are drawn.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMode {
    /// One mean for all abilities and one for all difficulties.
    #[default]
    PerFamily,
    /// One mean per latent dimension of C and one per question for mu.
    PerCoordinate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub q: usize,
    pub k: usize,
    pub pi: f64,
    pub seed: u64,
    pub mean_mode: MeanMode,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { n: 300, q: 50, k: 5, pi: 0.3, seed: 0, mean_mode: MeanMode::PerFamily }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        use crate::error::Error;
        if self.n == 0 || self.q == 0 || self.k == 0 {
            return Err(Error::InvalidParameter("N, Q and K must be positive".into()));
        }
        if !(self.pi > 0.0 && self.pi <= 1.0) {
            return Err(Error::InvalidParameter("pi must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthInstance {
    pub truth: FactorSet,
    pub full_values: Array2<f64>,
    pub full_probs: Array2<f64>,
}

impl SynthInstance {
    /// Dataset view; `mask = None` observes every entry.
    pub fn to_dataset(&self, mask: Option<&Array2<bool>>) -> Result<ResponseDataset> {
        let mask = mask.cloned().unwrap_or_else(|| Array2::from_elem(self.full_values.dim(), true));
        ResponseDataset::from_dense(self.full_values.clone(), mask)
    }
}

fn uniform_mean<R: Rng>(r: &mut R) -> f64 {
    r.random_range(-1.0..=1.0)
}

/// Inverse-CDF exponential draw with rate 1.
fn exponential<R: Rng>(r: &mut R) -> f64 {
    let u: f64 = r.random();
    -(1.0 - u).ln()
}

pub fn generate(spec: &SynthSpec) -> SynthInstance {
    let SynthSpec { n, q, k, pi, seed, mean_mode } = *spec;
    let mut r = rng::keyed(seed, &[rng::domain::SYNTH]);

    let (c_means, mu_means): (Vec<f64>, Vec<f64>) = match mean_mode {
        MeanMode::PerFamily => {
            let c = uniform_mean(&mut r);
            let mu = uniform_mean(&mut r);
            (vec![c; k], vec![mu; q])
        }
        MeanMode::PerCoordinate => {
            let c = (0..k).map(|_| uniform_mean(&mut r)).collect();
            let mu = (0..q).map(|_| uniform_mean(&mut r)).collect();
            (c, mu)
        }
    };

    let mut c = Array2::zeros((k, n));
    for i in 0..n {
        for kk in 0..k {
            let z: f64 = StandardNormal.sample(&mut r);
            c[[kk, i]] = c_means[kk] + z;
        }
    }
    let mut m = Array2::zeros((k, q));
    for kk in 0..k {
        for j in 0..q {
            let active = r.random::<f64>() < pi;
            let magnitude = exponential(&mut r);
            if active {
                m[[kk, j]] = magnitude;
            }
        }
    }
    let mu = Array1::from_iter((0..q).map(|j| {
        let z: f64 = StandardNormal.sample(&mut r);
        mu_means[j] + z
    }));
    let truth = FactorSet { c, m, mu };

    let mut full_probs = Array2::zeros((n, q));
    let mut full_values = Array2::zeros((n, q));
    for i in 0..n {
        for j in 0..q {
            let p = predict_prob(&truth, i, j);
            full_probs[[i, j]] = p;
            if r.random::<f64>() < p {
                full_values[[i, j]] = 1.0;
            }
        }
    }
    SynthInstance { truth, full_values, full_probs }
}

/// Observation mask where student `i` answers `n_i ~ U{min_answers..=q}`
/// distinct questions. Every question is guaranteed at least one answer.
pub fn uniform_count_mask(n: usize, q: usize, min_answers: usize, seed: u64) -> Array2<bool> {
    let min_answers = min_answers.clamp(1, q);
    let mut r = rng::keyed(seed, &[rng::domain::OBS_MASK]);
    let mut mask = Array2::from_elem((n, q), false);
    for i in 0..n {
        let count = r.random_range(min_answers..=q);
        for j in rand::seq::index::sample(&mut r, q, count) {
            mask[[i, j]] = true;
        }
    }
    for j in 0..q {
        if n > 0 && !mask.column(j).iter().any(|&m| m) {
            let i = r.random_range(0..n);
            mask[[i, j]] = true;
        }
    }
    mask
}
