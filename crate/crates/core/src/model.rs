//! The factor model `P(y_ij = 1) = sigmoid(c_i . m_j + mu_j)`.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::ResponseDataset;
use crate::error::{Error, Result};

/// Student abilities `c` (K x N), nonnegative loadings `m` (K x Q) and
/// question difficulties `mu` (Q).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSet {
    pub c: Array2<f64>,
    pub m: Array2<f64>,
    pub mu: Array1<f64>,
}

impl FactorSet {
    pub fn zeros(k: usize, n_students: usize, n_questions: usize) -> Self {
        FactorSet {
            c: Array2::zeros((k, n_students)),
            m: Array2::zeros((k, n_questions)),
            mu: Array1::zeros(n_questions),
        }
    }

    pub fn k(&self) -> usize {
        self.m.nrows()
    }

    pub fn n_students(&self) -> usize {
        self.c.ncols()
    }

    pub fn n_questions(&self) -> usize {
        self.m.ncols()
    }

    /// `c_i . m_j + mu_j`.
    pub fn logit(&self, i: usize, j: usize) -> f64 {
        let mut z = self.mu[j];
        for k in 0..self.k() {
            z += self.c[[k, i]] * self.m[[k, j]];
        }
        z
    }

    pub fn validate(&self) -> Result<()> {
        if self.c.nrows() != self.m.nrows() || self.mu.len() != self.m.ncols() {
            return Err(Error::Shape("factor shapes are inconsistent".into()));
        }
        if self.m.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidParameter("loadings must be nonnegative".into()));
        }
        let finite = self.c.iter().chain(self.m.iter()).chain(self.mu.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("factor set".into()));
        }
        Ok(())
    }
}

/// Latent dimension and regularization weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelHyper {
    pub k: usize,
    pub lambda_l1_m: f64,
    pub lambda_l2_mu: f64,
    /// Only used by the point-estimate trainer.
    pub lambda_l2_c: f64,
}

impl Default for ModelHyper {
    fn default() -> Self {
        ModelHyper { k: 5, lambda_l1_m: 0.1, lambda_l2_mu: 1e-3, lambda_l2_c: 30.0 }
    }
}

impl ModelHyper {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidParameter("K must be at least 1".into()));
        }
        for (name, v) in [
            ("lambda_l1_m", self.lambda_l1_m),
            ("lambda_l2_mu", self.lambda_l2_mu),
            ("lambda_l2_c", self.lambda_l2_c),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln sigmoid(z)`.
pub fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

/// Bernoulli log-likelihood of `y` under logit `z`.
pub fn bernoulli_loglik(y: f64, z: f64) -> f64 {
    y * log_sigmoid(z) + (1.0 - y) * log_sigmoid(-z)
}

/// Bernoulli log-likelihood and `sigmoid(z) - y` sharing one exponential.
pub fn loglik_and_residual(y: f64, z: f64) -> (f64, f64) {
    let e = (-z.abs()).exp();
    let lp = e.ln_1p();
    let ll = -y * ((-z).max(0.0) + lp) - (1.0 - y) * (z.max(0.0) + lp);
    let p = if z >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    (ll, p - y)
}

pub fn predict_prob(factors: &FactorSet, i: usize, j: usize) -> f64 {
    sigmoid(factors.logit(i, j))
}

/// Masked log-likelihood; `n_entries == 0` flags an empty mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLik {
    pub value: f64,
    pub n_entries: usize,
}

impl LogLik {
    pub fn is_empty(&self) -> bool {
        self.n_entries == 0
    }
}

pub fn masked_loglik(factors: &FactorSet, dataset: &ResponseDataset, mask: &Array2<bool>) -> LogLik {
    let mut value = 0.0;
    let mut n_entries = 0;
    for ((i, j), &m) in mask.indexed_iter() {
        if m {
            value += bernoulli_loglik(dataset.value(i, j), factors.logit(i, j));
            n_entries += 1;
        }
    }
    if n_entries == 0 {
        log::warn!("log-likelihood evaluated over an empty mask");
    }
    LogLik { value, n_entries }
}

/// Gradient of [`masked_loglik`] with respect to every factor.
pub fn masked_loglik_grad(
    factors: &FactorSet,
    dataset: &ResponseDataset,
    mask: &Array2<bool>,
) -> (LogLik, FactorSet) {
    let k = factors.k();
    let mut grad = FactorSet::zeros(k, factors.n_students(), factors.n_questions());
    let mut value = 0.0;
    let mut n_entries = 0;
    for ((i, j), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        let y = dataset.value(i, j);
        let z = factors.logit(i, j);
        value += bernoulli_loglik(y, z);
        n_entries += 1;
        let r = y - sigmoid(z);
        for kk in 0..k {
            grad.c[[kk, i]] += r * factors.m[[kk, j]];
            grad.m[[kk, j]] += r * factors.c[[kk, i]];
        }
        grad.mu[j] += r;
    }
    (LogLik { value, n_entries }, grad)
}

/// `l1 * sum|M| + l2_mu * ||mu||^2 (+ l2_c * ||C||^2 when `include_c`)`.
pub fn regularizer(factors: &FactorSet, hyper: &ModelHyper, include_c: bool) -> f64 {
    let l1: f64 = factors.m.iter().map(|v| v.abs()).sum();
    let mu2: f64 = factors.mu.iter().map(|v| v * v).sum();
    let mut r = hyper.lambda_l1_m * l1 + hyper.lambda_l2_mu * mu2;
    if include_c {
        r += hyper.lambda_l2_c * factors.c.iter().map(|v| v * v).sum::<f64>();
    }
    r
}
