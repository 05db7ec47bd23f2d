//! Amortized variational inference over student abilities.
//!
//! A three-layer tanh network maps a student's zero-imputed response row to
//! the mean and log-variance of a diagonal Gaussian over that student's
//! ability vector. The network weights and the question parameters
//! `{M, mu}` are trained jointly by maximizing the evidence lower bound
//! (summed over observed entries) minus the theta penalties.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{entries_by_row, impute_row, InputEncoding, ResponseDataset, SplitMask};
use crate::error::{Error, Result};
use crate::mle::init_theta;
use crate::model::{loglik_and_residual, FactorSet, ModelHyper};
use crate::optim::{adam_step, prox_nonneg_l1_inplace, AdamState, GradientBundle, Parameterized};
use crate::rng;
use crate::trace::{epoch_batches, EpochRecord, TrainTrace};

/// Weights of the encoder `x -> tanh(W1 x + b1) -> tanh(W2 . + b2) -> W3 . + b3`.
///
/// The final layer has `2K` outputs: the posterior mean followed by the
/// posterior log-variance.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
    pub input_encoding: InputEncoding,
}

impl EncoderParams {
    pub fn zeros(q: usize, hidden: usize, k: usize) -> Self {
        EncoderParams {
            w1: Array2::zeros((hidden, q)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, hidden)),
            b2: Array1::zeros(hidden),
            w3: Array2::zeros((2 * k, hidden)),
            b3: Array1::zeros(2 * k),
            input_encoding: InputEncoding::Binary,
        }
    }

    /// Every weight and bias of a layer drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(q: usize, hidden: usize, k: usize, seed: u64) -> Self {
        let mut r = rng::keyed(seed, &[rng::domain::ENCODER_INIT]);
        let mut layer = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            let w = Array2::from_shape_simple_fn((rows, cols), || r.random_range(-bound..bound));
            let b = Array1::from_shape_simple_fn(rows, || r.random_range(-bound..bound));
            (w, b)
        };
        let (w1, b1) = layer(hidden, q);
        let (w2, b2) = layer(hidden, hidden);
        let (w3, b3) = layer(2 * k, hidden);
        EncoderParams { w1, b1, w2, b2, w3, b3, input_encoding: InputEncoding::Binary }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_width(&self) -> usize {
        self.w1.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.w3.nrows() / 2
    }

    pub fn validate(&self) -> Result<()> {
        let (h, q, k2) = (self.hidden_width(), self.input_dim(), self.w3.nrows());
        let shapes_ok = self.b1.len() == h
            && self.w2.dim() == (h, h)
            && self.b2.len() == h
            && self.w3.ncols() == h
            && self.b3.len() == k2
            && k2 % 2 == 0
            && q > 0;
        if !shapes_ok {
            return Err(Error::Shape("encoder layer shapes are inconsistent".into()));
        }
        let all_finite = [&self.w1, &self.w2, &self.w3].iter().all(|w| w.iter().all(|v| v.is_finite()))
            && [&self.b1, &self.b2, &self.b3].iter().all(|b| b.iter().all(|v| v.is_finite()));
        if !all_finite {
            return Err(Error::NonFinite("encoder parameters".into()));
        }
        Ok(())
    }

    fn forward_sparse(&self, x: &[(usize, f64)]) -> Forward {
        let mut fwd = Forward::default();
        self.forward_into(x, &mut fwd);
        fwd
    }

    fn forward_into(&self, x: &[(usize, f64)], fwd: &mut Forward) {
        let q = self.input_dim();
        let w1 = self.w1.as_slice().unwrap();
        let b1 = self.b1.as_slice().unwrap();
        fwd.h1.resize(b1.len(), 0.0);
        for (row, a) in fwd.h1.iter_mut().enumerate() {
            let w = &w1[row * q..(row + 1) * q];
            let mut acc = b1[row];
            for &(j, xj) in x {
                acc += w[j] * xj;
            }
            *a = acc.tanh();
        }
        affine_into(&self.w2, &self.b2, &fwd.h1, true, &mut fwd.h2);
        affine_into(&self.w3, &self.b3, &fwd.h2, false, &mut fwd.out);
    }
}

fn affine_into(w: &Array2<f64>, b: &Array1<f64>, x: &[f64], tanh: bool, out: &mut Vec<f64>) {
    let cols = x.len();
    let ws = w.as_slice().unwrap();
    let bs = b.as_slice().unwrap();
    out.resize(bs.len(), 0.0);
    for (r, o) in out.iter_mut().enumerate() {
        let row = &ws[r * cols..(r + 1) * cols];
        let mut acc = bs[r];
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        *o = if tanh { acc.tanh() } else { acc };
    }
}

#[derive(Default)]
struct Forward {
    h1: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
}

fn sparse(x: &[f64]) -> Vec<(usize, f64)> {
    x.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(j, &v)| (j, v)).collect()
}

/// Diagonal Gaussian `N(mean, diag(exp(logvar)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl GaussianPosterior {
    pub fn prior(k: usize) -> Self {
        GaussianPosterior { mean: vec![0.0; k], logvar: vec![0.0; k] }
    }

    pub fn k(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.logvar.iter().map(|lv| (0.5 * lv).exp()).collect()
    }

    /// Average standard deviation over the latent dimensions.
    pub fn mean_std(&self) -> f64 {
        let s = self.std();
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }
}

/// Encoder forward pass on a dense imputed row.
pub fn encode(enc: &EncoderParams, x: &[f64]) -> Result<GaussianPosterior> {
    if x.len() != enc.input_dim() {
        return Err(Error::Shape(format!("encoder expects {} inputs, got {}", enc.input_dim(), x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("encoder input".into()));
    }
    posterior_from(enc, &sparse(x))
}

fn posterior_from(enc: &EncoderParams, x: &[(usize, f64)]) -> Result<GaussianPosterior> {
    let fwd = enc.forward_sparse(x);
    if fwd.out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("encoder activation".into()));
    }
    let k = enc.latent_dim();
    Ok(GaussianPosterior { mean: fwd.out[..k].to_vec(), logvar: fwd.out[k..].to_vec() })
}

/// `KL(q || N(0, I)) = 0.5 * sum(exp(logvar) + mean^2 - 1 - logvar)`.
pub fn kl_std_normal(post: &GaussianPosterior) -> f64 {
    0.5 * post
        .mean
        .iter()
        .zip(&post.logvar)
        .map(|(u, lv)| lv.exp() + u * u - 1.0 - lv)
        .sum::<f64>()
}

/// `mean + exp(0.5 * logvar) * eps`.
pub fn reparameterize(post: &GaussianPosterior, eps: &[f64]) -> Vec<f64> {
    assert_eq!(eps.len(), post.k(), "noise length");
    post.mean
        .iter()
        .zip(&post.logvar)
        .zip(eps)
        .map(|((u, lv), e)| u + (0.5 * lv).exp() * e)
        .collect()
}

/// How many times each student's KL term enters the bound.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlWeighting {
    /// Once per observed entry, as the bound is summed over entries.
    #[default]
    PerEntry,
    /// Once per student with at least one observed entry.
    PerStudent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViConfig {
    pub hyper: ModelHyper,
    pub lr: f64,
    pub epochs: usize,
    pub batch_students: usize,
    pub mc_samples: usize,
    pub hidden_width: usize,
    pub seed: u64,
    pub kl_weighting: KlWeighting,
    pub input_encoding: InputEncoding,
}

impl Default for ViConfig {
    fn default() -> Self {
        ViConfig {
            hyper: ModelHyper::default(),
            lr: 0.05,
            epochs: 100,
            batch_students: 32,
            mc_samples: 1,
            hidden_width: 64,
            seed: 0,
            kl_weighting: KlWeighting::PerEntry,
            input_encoding: InputEncoding::Binary,
        }
    }
}

impl ViConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.epochs < 1 || self.batch_students < 1 || self.mc_samples < 1 || self.hidden_width < 1 {
            return Err(Error::InvalidParameter(
                "epochs, batch size, MC samples and hidden width must be at least 1".into(),
            ));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::InvalidParameter("learning rate must be > 0".into()));
        }
        Ok(())
    }

    pub fn elbo_options(&self) -> ElboOptions {
        ElboOptions { mc_samples: self.mc_samples, kl_weighting: self.kl_weighting }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboOptions {
    pub mc_samples: usize,
    pub kl_weighting: KlWeighting,
}

impl Default for ElboOptions {
    fn default() -> Self {
        ElboOptions { mc_samples: 1, kl_weighting: KlWeighting::PerEntry }
    }
}

/// Encoder plus the question parameters learned by maximum likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct VarfaModel {
    pub encoder: EncoderParams,
    pub m: Array2<f64>,
    pub mu: Array1<f64>,
}

impl Parameterized for VarfaModel {
    fn params(&self) -> Vec<(&'static str, &[f64])> {
        let e = &self.encoder;
        vec![
            ("W1", e.w1.as_slice().unwrap()),
            ("b1", e.b1.as_slice().unwrap()),
            ("W2", e.w2.as_slice().unwrap()),
            ("b2", e.b2.as_slice().unwrap()),
            ("W3", e.w3.as_slice().unwrap()),
            ("b3", e.b3.as_slice().unwrap()),
            ("M", self.m.as_slice().unwrap()),
            ("mu", self.mu.as_slice().unwrap()),
        ]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let e = &mut self.encoder;
        vec![
            ("W1", e.w1.as_slice_mut().unwrap()),
            ("b1", e.b1.as_slice_mut().unwrap()),
            ("W2", e.w2.as_slice_mut().unwrap()),
            ("b2", e.b2.as_slice_mut().unwrap()),
            ("W3", e.w3.as_slice_mut().unwrap()),
            ("b3", e.b3.as_slice_mut().unwrap()),
            ("M", self.m.as_slice_mut().unwrap()),
            ("mu", self.mu.as_slice_mut().unwrap()),
        ]
    }
}

impl VarfaModel {
    pub fn k(&self) -> usize {
        self.m.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.m.nrows() != self.encoder.latent_dim()
            || self.m.ncols() != self.encoder.input_dim()
            || self.mu.len() != self.m.ncols()
        {
            return Err(Error::Shape("theta does not match encoder shapes".into()));
        }
        if self.m.iter().any(|&v| v < 0.0 || !v.is_finite()) || self.mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("loadings must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Factor set with each student's ability set to its posterior mean.
    pub fn point_factors(&self, dataset: &ResponseDataset, split: &SplitMask) -> Result<FactorSet> {
        let k = self.k();
        let mut c = Array2::zeros((k, dataset.n_students()));
        for i in 0..dataset.n_students() {
            let post = infer_posterior(&self.encoder, dataset, split, i)?;
            for kk in 0..k {
                c[[kk, i]] = post.mean[kk];
            }
        }
        Ok(FactorSet { c, m: self.m.clone(), mu: self.mu.clone() })
    }
}

/// Standard-normal draws for one student, `mc_samples x K`, keyed by
/// `(seed, epoch, batch, student)`.
pub fn draw_noise(seed: u64, epoch: u64, batch: u64, student: usize, mc_samples: usize, k: usize) -> Array2<f64> {
    let mut r = rng::keyed(seed, &[rng::domain::NOISE, epoch, batch, student as u64]);
    Array2::from_shape_simple_fn((mc_samples, k), || StandardNormal.sample(&mut r))
}

/// Imputed encoder inputs for every student, as sparse `(column, value)` lists.
fn sparse_inputs(dataset: &ResponseDataset, mask: &Array2<bool>, encoding: InputEncoding) -> Vec<Vec<(usize, f64)>> {
    (0..dataset.n_students()).map(|i| sparse(&impute_row(dataset, mask, i, encoding))).collect()
}

/// Evidence lower bound over the `batch` students.
///
/// `noise[b]` holds the `mc_samples x K` draws for `batch[b]`.
pub fn elbo(
    model: &VarfaModel,
    dataset: &ResponseDataset,
    train_mask: &Array2<bool>,
    batch: &[usize],
    noise: &[Array2<f64>],
    opts: &ElboOptions,
) -> Result<f64> {
    let rows = entries_by_row(dataset, train_mask);
    let inputs = sparse_inputs(dataset, train_mask, model.encoder.input_encoding);
    let (neg, _) = neg_elbo_impl(model, &rows, &inputs, batch, noise, opts, false)?;
    Ok(-neg)
}

/// `-ELBO + lambda_mu ||mu||^2` over the batch and its gradient.
///
/// The l1 penalty on M is left to the proximal step.
pub fn smooth_loss_and_grad(
    model: &VarfaModel,
    dataset: &ResponseDataset,
    train_mask: &Array2<bool>,
    batch: &[usize],
    noise: &[Array2<f64>],
    opts: &ElboOptions,
    hyper: &ModelHyper,
) -> Result<(f64, GradientBundle)> {
    let rows = entries_by_row(dataset, train_mask);
    let inputs = sparse_inputs(dataset, train_mask, model.encoder.input_encoding);
    let (neg, grads) = neg_elbo_impl(model, &rows, &inputs, batch, noise, opts, true)?;
    let mut grads = grads.expect("gradient requested");
    let penalty = add_mu_penalty(model, hyper, &mut grads);
    Ok((neg + penalty, grads))
}

fn add_mu_penalty(model: &VarfaModel, hyper: &ModelHyper, grads: &mut GradientBundle) -> f64 {
    let gmu = grads.get_mut("mu").expect("mu gradient");
    let mut penalty = 0.0;
    for (g, &mu) in gmu.iter_mut().zip(model.mu.iter()) {
        penalty += hyper.lambda_l2_mu * mu * mu;
        *g += 2.0 * hyper.lambda_l2_mu * mu;
    }
    penalty
}

/// Negative ELBO over `batch` and, optionally, its gradient.
fn neg_elbo_impl(
    model: &VarfaModel,
    rows: &[Vec<(usize, f64)>],
    inputs: &[Vec<(usize, f64)>],
    batch: &[usize],
    noise: &[Array2<f64>],
    opts: &ElboOptions,
    want_grad: bool,
) -> Result<(f64, Option<GradientBundle>)> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("ELBO batch is empty".into()));
    }
    if noise.len() != batch.len() {
        return Err(Error::Shape("one noise block is needed per batch student".into()));
    }
    let enc = &model.encoder;
    let (k, h, q) = (model.k(), enc.hidden_width(), enc.input_dim());
    let s_count = opts.mc_samples;
    let inv_s = 1.0 / s_count as f64;

    let mut g_w1 = vec![0.0; if want_grad { h * q } else { 0 }];
    let mut g_b1 = vec![0.0; h];
    let mut g_w2 = vec![0.0; if want_grad { h * h } else { 0 }];
    let mut g_b2 = vec![0.0; h];
    let mut g_w3 = vec![0.0; if want_grad { 2 * k * h } else { 0 }];
    let mut g_b3 = vec![0.0; 2 * k];
    let mut g_m = vec![0.0; if want_grad { k * q } else { 0 }];
    let mut g_mu = vec![0.0; if want_grad { q } else { 0 }];

    let m = model.m.as_slice().unwrap();
    let mut loss = 0.0;
    let mut nu = vec![0.0; k];
    let mut g_nu = vec![0.0; k];
    let mut sd = vec![0.0; k];
    let mut g_out = vec![0.0; 2 * k];
    let mut g_h2 = vec![0.0; h];
    let mut g_h1 = vec![0.0; h];
    let mut fwd = Forward::default();
    for (b, &i) in batch.iter().enumerate() {
        let entries = &rows[i];
        if entries.is_empty() {
            continue;
        }
        let eps = &noise[b];
        if eps.dim() != (s_count, k) {
            return Err(Error::Shape(format!("noise for student {i} must be {s_count} x {k}")));
        }
        enc.forward_into(&inputs[i], &mut fwd);
        let (u, lv) = fwd.out.split_at(k);
        if fwd.out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("encoder output for student {i}")));
        }
        for (s, l) in sd.iter_mut().zip(lv) {
            *s = (0.5 * l).exp();
        }
        let weight = match opts.kl_weighting {
            KlWeighting::PerEntry => entries.len() as f64,
            KlWeighting::PerStudent => 1.0,
        };
        let kl: f64 = 0.5 * (0..k).map(|kk| sd[kk] * sd[kk] + u[kk] * u[kk] - 1.0 - lv[kk]).sum::<f64>();
        loss += weight * kl;

        // d loss / d out, first K for the mean, last K for the log-variance.
        for kk in 0..k {
            g_out[kk] = weight * u[kk];
            g_out[k + kk] = weight * 0.5 * (sd[kk] * sd[kk] - 1.0);
        }
        for s in 0..s_count {
            for kk in 0..k {
                nu[kk] = u[kk] + sd[kk] * eps[[s, kk]];
            }
            g_nu.fill(0.0);
            for &(j, y) in entries {
                let mut z = model.mu[j];
                for kk in 0..k {
                    z += nu[kk] * m[kk * q + j];
                }
                let (ll, r) = loglik_and_residual(y, z);
                if !ll.is_finite() {
                    return Err(Error::NonFinite(format!("log-likelihood at ({i}, {j})")));
                }
                loss -= inv_s * ll;
                if want_grad {
                    let r = inv_s * r;
                    for kk in 0..k {
                        g_nu[kk] += r * m[kk * q + j];
                        g_m[kk * q + j] += r * nu[kk];
                    }
                    g_mu[j] += r;
                }
            }
            for kk in 0..k {
                g_out[kk] += g_nu[kk];
                g_out[k + kk] += g_nu[kk] * eps[[s, kk]] * 0.5 * sd[kk];
            }
        }
        if !want_grad {
            continue;
        }

        // Backward through the encoder.
        let w3 = enc.w3.as_slice().unwrap();
        g_h2.fill(0.0);
        for (o, &go) in g_out.iter().enumerate() {
            g_b3[o] += go;
            let row = &w3[o * h..(o + 1) * h];
            for c in 0..h {
                g_w3[o * h + c] += go * fwd.h2[c];
                g_h2[c] += go * row[c];
            }
        }
        let w2 = enc.w2.as_slice().unwrap();
        g_h1.fill(0.0);
        for o in 0..h {
            let ga = g_h2[o] * (1.0 - fwd.h2[o] * fwd.h2[o]);
            g_b2[o] += ga;
            let row = &w2[o * h..(o + 1) * h];
            for c in 0..h {
                g_w2[o * h + c] += ga * fwd.h1[c];
                g_h1[c] += ga * row[c];
            }
        }
        for o in 0..h {
            let ga = g_h1[o] * (1.0 - fwd.h1[o] * fwd.h1[o]);
            g_b1[o] += ga;
            for &(j, xj) in &inputs[i] {
                g_w1[o * q + j] += ga * xj;
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("negative ELBO".into()));
    }
    if !want_grad {
        return Ok((loss, None));
    }
    let mut grads = GradientBundle::new();
    grads.insert("W1", g_w1);
    grads.insert("b1", g_b1);
    grads.insert("W2", g_w2);
    grads.insert("b2", g_b2);
    grads.insert("W3", g_w3);
    grads.insert("b3", g_b3);
    grads.insert("M", g_m);
    grads.insert("mu", g_mu);
    Ok((loss, Some(grads)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarfaFit {
    pub model: VarfaModel,
    pub trace: TrainTrace,
}

/// Batch index used for the noise of the pre-training loss evaluation.
const EVAL_BATCH: u64 = u64::MAX;

/// Jointly trains the encoder and `{M, mu}` on the train part of `split`.
///
/// Theta starts from the same draws as the point-estimate trainer. Each batch
/// takes one Adam step on `-ELBO + lambda_mu ||mu||^2` followed by
/// `max(0, M - lr * lambda_l1_m)`.
pub fn train_varfa(dataset: &ResponseDataset, split: &SplitMask, config: &ViConfig) -> Result<VarfaFit> {
    config.validate()?;
    if dataset.n_observed() == 0 {
        return Err(Error::EmptyDataset);
    }
    let hyper = config.hyper;
    let (n, q, k) = (dataset.n_students(), dataset.n_questions(), hyper.k);
    let opts = config.elbo_options();
    let rows = entries_by_row(dataset, &split.train);
    let inputs = sparse_inputs(dataset, &split.train, config.input_encoding);

    let mut encoder = EncoderParams::init(q, config.hidden_width, k, config.seed);
    encoder.input_encoding = config.input_encoding;
    let (m, mu) = init_theta(k, q, config.seed);
    let mut model = VarfaModel { encoder, m, mu };
    let mut adam = AdamState::default();
    let threshold = config.lr * hyper.lambda_l1_m;
    let theta_penalty = |model: &VarfaModel| {
        hyper.lambda_l1_m * model.m.iter().sum::<f64>()
            + hyper.lambda_l2_mu * model.mu.iter().map(|v| v * v).sum::<f64>()
    };
    let min_loading = |model: &VarfaModel| model.m.iter().copied().fold(f64::INFINITY, f64::min);

    let all: Vec<usize> = (0..n).collect();
    let eval_noise: Vec<Array2<f64>> =
        all.iter().map(|&i| draw_noise(config.seed, 0, EVAL_BATCH, i, config.mc_samples, k)).collect();
    let (initial, _) = neg_elbo_impl(&model, &rows, &inputs, &all, &eval_noise, &opts, false)?;
    let mut trace = TrainTrace::default();
    trace.records.push(EpochRecord {
        epoch: 0,
        train_loss: initial + theta_penalty(&model),
        wall_seconds: 0.0,
        min_loading: min_loading(&model),
    });

    let start = Instant::now();
    for epoch in 1..=config.epochs {
        let mut epoch_loss = 0.0;
        for (b, batch) in epoch_batches(n, config.batch_students, config.seed, epoch).iter().enumerate() {
            let noise: Vec<Array2<f64>> = batch
                .iter()
                .map(|&i| draw_noise(config.seed, epoch as u64, b as u64, i, config.mc_samples, k))
                .collect();
            let (loss, grads) = neg_elbo_impl(&model, &rows, &inputs, batch, &noise, &opts, true)
                .map_err(|e| match e {
                    Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch}, batch {b}")),
                    other => other,
                })?;
            let mut grads = grads.expect("gradient requested");
            add_mu_penalty(&model, &hyper, &mut grads);
            epoch_loss += loss;
            adam_step(&mut model, &grads, &mut adam, config.lr)?;
            prox_nonneg_l1_inplace(model.m.as_slice_mut().unwrap(), threshold);
        }
        trace.records.push(EpochRecord {
            epoch,
            train_loss: epoch_loss + theta_penalty(&model),
            wall_seconds: start.elapsed().as_secs_f64(),
            min_loading: min_loading(&model),
        });
    }
    trace.wall_train_seconds = start.elapsed().as_secs_f64();
    Ok(VarfaFit { model, trace })
}

/// Posterior for student `i` from its train-observed answers. Pure forward pass.
pub fn infer_posterior(
    enc: &EncoderParams,
    dataset: &ResponseDataset,
    split: &SplitMask,
    i: usize,
) -> Result<GaussianPosterior> {
    if i >= dataset.n_students() {
        return Err(Error::InvalidParameter(format!("student index {i} out of range")));
    }
    let x = impute_row(dataset, &split.train, i, enc.input_encoding);
    encode(enc, &x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub posterior: GaussianPosterior,
    /// `n x K` draws.
    pub samples: Array2<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Summary of a set of draws: per-dimension sample mean and standard deviation.
fn summarize(samples: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = samples.nrows() as f64;
    let mean: Vec<f64> = samples.columns().into_iter().map(|c| c.sum() / n).collect();
    let std = samples
        .columns()
        .into_iter()
        .zip(&mean)
        .map(|(c, m)| {
            if samples.nrows() < 2 {
                0.0
            } else {
                (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt()
            }
        })
        .collect();
    (mean, std)
}

/// Reparameterized draws from a given posterior with explicit noise rows.
pub fn sample_with_noise(post: &GaussianPosterior, noise: &Array2<f64>) -> PosteriorSamples {
    let mut samples = Array2::zeros(noise.dim());
    for (s, eps) in noise.outer_iter().enumerate() {
        let draw = reparameterize(post, eps.as_slice().unwrap());
        samples.row_mut(s).assign(&Array1::from(draw));
    }
    let (mean, std) = summarize(&samples);
    PosteriorSamples { posterior: post.clone(), samples, mean, std }
}

/// `n` draws from student `i`'s posterior, keyed by `seed`.
pub fn sample_posterior(
    enc: &EncoderParams,
    dataset: &ResponseDataset,
    split: &SplitMask,
    i: usize,
    n: usize,
    seed: u64,
) -> Result<PosteriorSamples> {
    if n < 1 {
        return Err(Error::InvalidParameter("need at least one sample".into()));
    }
    let post = infer_posterior(enc, dataset, split, i)?;
    let mut r = rng::keyed(seed, &[rng::domain::SAMPLE, i as u64]);
    let noise = Array2::from_shape_simple_fn((n, post.k()), || StandardNormal.sample(&mut r));
    Ok(sample_with_noise(&post, &noise))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn zero_weights_emit_the_bias() {
        let mut enc = EncoderParams::zeros(4, 3, 2);
        enc.b3 = array![0.5, -1.0, 0.2, -0.3];
        for x in [[0.0; 4], [1.0, 0.0, 1.0, 1.0]] {
            let p = encode(&enc, &x).unwrap();
            assert_eq!(p.mean, vec![0.5, -1.0]);
            assert_eq!(p.logvar, vec![0.2, -0.3]);
        }
    }

    #[test]
    fn output_has_2k_entries() {
        let enc = EncoderParams::init(6, 5, 3, 1);
        let p = encode(&enc, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(p.mean.len() + p.logvar.len(), 6);
        assert!(encode(&enc, &[1.0; 5]).is_err());
    }

    #[test]
    fn unobserved_coordinate_still_moves_the_output() {
        let enc = EncoderParams::init(4, 8, 2, 3);
        let a = encode(&enc, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = encode(&enc, &[1.0, 0.0, 1.0, 1.0]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn non_finite_activation_is_an_error() {
        let mut enc = EncoderParams::zeros(2, 2, 1);
        enc.b3 = array![f64::INFINITY, 0.0];
        assert!(matches!(encode(&enc, &[0.0, 0.0]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn kl_closed_form_examples() {
        assert_eq!(kl_std_normal(&GaussianPosterior::prior(3)), 0.0);
        let p = GaussianPosterior { mean: vec![1.0], logvar: vec![0.0] };
        assert_abs_diff_eq!(kl_std_normal(&p), 0.5);
        let p = GaussianPosterior { mean: vec![0.0], logvar: vec![1.0] };
        assert_abs_diff_eq!(kl_std_normal(&p), 0.5 * (std::f64::consts::E - 2.0), epsilon = 1e-15);
        assert_abs_diff_eq!(kl_std_normal(&p), 0.359141, epsilon = 1e-6);
    }

    #[test]
    fn reparameterize_cases() {
        let p = GaussianPosterior { mean: vec![0.3, -1.0], logvar: vec![0.4, 2.0] };
        assert_eq!(reparameterize(&p, &[0.0, 0.0]), p.mean);
        let prior = GaussianPosterior::prior(2);
        assert_eq!(reparameterize(&prior, &[1.7, -0.2]), vec![1.7, -0.2]);
    }

    #[test]
    fn single_entry_elbo_at_prior() {
        let ds = ResponseDataset::from_dense(array![[1.0]], array![[true]]).unwrap();
        let model = VarfaModel { encoder: EncoderParams::zeros(1, 2, 1), m: array![[0.0]], mu: array![0.0] };
        let noise = vec![array![[0.8]]];
        let v = elbo(&model, &ds, ds.mask(), &[0], &noise, &ElboOptions::default()).unwrap();
        assert_abs_diff_eq!(v, 0.5f64.ln(), epsilon = 1e-6);
    }

    #[test]
    fn kl_weighting_changes_the_bound() {
        let ds = ResponseDataset::from_dense(array![[1.0, 0.0, 1.0]], array![[true, true, true]]).unwrap();
        let mut enc = EncoderParams::zeros(3, 2, 1);
        enc.b3 = array![0.5, -0.5];
        let model = VarfaModel { encoder: enc, m: array![[0.2, 0.1, 0.3]], mu: array![0.0, 0.1, -0.1] };
        let noise = vec![array![[0.0]]];
        let per_entry = elbo(&model, &ds, ds.mask(), &[0], &noise, &ElboOptions::default()).unwrap();
        let opts = ElboOptions { kl_weighting: KlWeighting::PerStudent, ..ElboOptions::default() };
        let per_student = elbo(&model, &ds, ds.mask(), &[0], &noise, &opts).unwrap();
        let kl = kl_std_normal(&GaussianPosterior { mean: vec![0.5], logvar: vec![-0.5] });
        assert_abs_diff_eq!(per_student - per_entry, 2.0 * kl, epsilon = 1e-12);
    }

    #[test]
    fn sample_posterior_with_zero_noise_is_the_mean() {
        let p = GaussianPosterior { mean: vec![0.1, 0.2, 0.3], logvar: vec![0.0; 3] };
        let s = sample_with_noise(&p, &Array2::zeros((1, 3)));
        assert_eq!(s.samples.row(0).to_vec(), p.mean);
        assert_eq!(s.samples.dim(), (1, 3));
    }
}
