//! Point-estimate trainer: regularized maximum likelihood over C, M and mu
//! with mini-batch Adam and a nonnegative soft-threshold step on M.

use std::time::Instant;

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{entries_by_row, ResponseDataset, SplitMask};
use crate::error::{Error, Result};
use crate::model::{loglik_and_residual, masked_loglik, regularizer, sigmoid, FactorSet, ModelHyper};
use crate::optim::{adam_step, prox_nonneg_l1_inplace, AdamState, GradientBundle, Parameterized};
use crate::rng;
use crate::trace::{epoch_batches, EpochRecord, TrainTrace};

pub const INIT_SD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MleConfig {
    pub hyper: ModelHyper,
    pub lr: f64,
    pub epochs: usize,
    pub batch_students: usize,
    pub seed: u64,
}

impl Default for MleConfig {
    fn default() -> Self {
        MleConfig { hyper: ModelHyper::default(), lr: 0.05, epochs: 100, batch_students: 32, seed: 0 }
    }
}

impl MleConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.epochs < 1 {
            return Err(Error::InvalidParameter("epochs must be at least 1".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::InvalidParameter("learning rate must be > 0".into()));
        }
        if self.batch_students < 1 {
            return Err(Error::InvalidParameter("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

impl Parameterized for FactorSet {
    fn params(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("C", self.c.as_slice().expect("standard layout")),
            ("M", self.m.as_slice().expect("standard layout")),
            ("mu", self.mu.as_slice().expect("standard layout")),
        ]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("C", self.c.as_slice_mut().expect("standard layout")),
            ("M", self.m.as_slice_mut().expect("standard layout")),
            ("mu", self.mu.as_slice_mut().expect("standard layout")),
        ]
    }
}

/// Loadings and difficulties drawn from the seed's theta stream:
/// `M = |N(0, 0.1^2)|`, `mu ~ N(0, 0.1^2)`. Shared by both trainers.
pub fn init_theta(k: usize, n_questions: usize, seed: u64) -> (Array2<f64>, ndarray::Array1<f64>) {
    let normal = Normal::new(0.0, INIT_SD).unwrap();
    let mut r = rng::keyed(seed, &[rng::domain::THETA_INIT]);
    let m = Array2::from_shape_simple_fn((k, n_questions), || normal.sample(&mut r).abs());
    let mu = ndarray::Array1::from_shape_simple_fn(n_questions, || normal.sample(&mut r));
    (m, mu)
}

pub fn init_factors(k: usize, n_students: usize, n_questions: usize, seed: u64) -> FactorSet {
    let normal = Normal::new(0.0, INIT_SD).unwrap();
    let mut r = rng::keyed(seed, &[rng::domain::ABILITY_INIT]);
    let c = Array2::from_shape_simple_fn((k, n_students), || normal.sample(&mut r));
    let (m, mu) = init_theta(k, n_questions, seed);
    FactorSet { c, m, mu }
}

/// Negative log-likelihood over `train_mask` plus the full regularizer.
pub fn mle_objective(
    factors: &FactorSet,
    dataset: &ResponseDataset,
    train_mask: &Array2<bool>,
    hyper: &ModelHyper,
) -> f64 {
    -masked_loglik(factors, dataset, train_mask).value + regularizer(factors, hyper, true)
}

/// Smooth part of [`mle_objective`] (everything except the l1 term).
pub fn mle_smooth_objective(
    factors: &FactorSet,
    dataset: &ResponseDataset,
    train_mask: &Array2<bool>,
    hyper: &ModelHyper,
) -> f64 {
    let smooth = ModelHyper { lambda_l1_m: 0.0, ..*hyper };
    mle_objective(factors, dataset, train_mask, &smooth)
}

/// Gradient of [`mle_smooth_objective`] over all students.
pub fn mle_smooth_gradient(
    factors: &FactorSet,
    dataset: &ResponseDataset,
    train_mask: &Array2<bool>,
    hyper: &ModelHyper,
) -> GradientBundle {
    let rows = entries_by_row(dataset, train_mask);
    let all: Vec<usize> = (0..factors.n_students()).collect();
    batch_gradient(factors, &rows, &all, hyper).1
}

/// Loss and gradient of the smooth objective restricted to `batch` students.
///
/// The returned loss is the batch's negative log-likelihood plus the C
/// penalty of the batch columns; the gradient also carries the mu penalty.
fn batch_gradient(
    factors: &FactorSet,
    rows: &[Vec<(usize, f64)>],
    batch: &[usize],
    hyper: &ModelHyper,
) -> (f64, GradientBundle) {
    let k = factors.k();
    let (n, q) = (factors.n_students(), factors.n_questions());
    let mut gc = Array2::<f64>::zeros((k, n));
    let mut gm = Array2::<f64>::zeros((k, q));
    let mut gmu = vec![0.0; q];
    let mut loss = 0.0;
    let mut ci = vec![0.0; k];
    for &i in batch {
        for kk in 0..k {
            ci[kk] = factors.c[[kk, i]];
        }
        let mut gci = vec![0.0; k];
        for &(j, y) in &rows[i] {
            let mut z = factors.mu[j];
            for kk in 0..k {
                z += ci[kk] * factors.m[[kk, j]];
            }
            // r = d(-loglik)/dz
            let (ll, r) = loglik_and_residual(y, z);
            loss -= ll;
            for kk in 0..k {
                gci[kk] += r * factors.m[[kk, j]];
                gm[[kk, j]] += r * ci[kk];
            }
            gmu[j] += r;
        }
        for kk in 0..k {
            loss += hyper.lambda_l2_c * ci[kk] * ci[kk];
            gc[[kk, i]] = gci[kk] + 2.0 * hyper.lambda_l2_c * ci[kk];
        }
    }
    for (j, g) in gmu.iter_mut().enumerate() {
        *g += 2.0 * hyper.lambda_l2_mu * factors.mu[j];
    }
    let mut grads = GradientBundle::new();
    grads.insert("C", gc.into_raw_vec_and_offset().0);
    grads.insert("M", gm.into_raw_vec_and_offset().0);
    grads.insert("mu", gmu);
    (loss, grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MleFit {
    pub factors: FactorSet,
    pub trace: TrainTrace,
}

fn min_loading(m: &Array2<f64>) -> f64 {
    m.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Trains all factors on the train part of `split`.
///
/// Each epoch visits shuffled student batches; every batch takes one Adam
/// step on the smooth objective followed by `max(0, M - lr * lambda_l1_m)`.
/// The recorded epoch loss is the sum of batch losses plus the theta
/// penalties at the end of the epoch.
pub fn train_mle(dataset: &ResponseDataset, split: &SplitMask, config: &MleConfig) -> Result<MleFit> {
    config.validate()?;
    if dataset.n_observed() == 0 {
        return Err(Error::EmptyDataset);
    }
    let hyper = config.hyper;
    let rows = entries_by_row(dataset, &split.train);
    let mut factors = init_factors(hyper.k, dataset.n_students(), dataset.n_questions(), config.seed);
    let mut adam = AdamState::default();
    let threshold = config.lr * hyper.lambda_l1_m;

    let mut trace = TrainTrace::default();
    trace.records.push(EpochRecord {
        epoch: 0,
        train_loss: mle_objective(&factors, dataset, &split.train, &hyper),
        wall_seconds: 0.0,
        min_loading: min_loading(&factors.m),
    });

    let start = Instant::now();
    for epoch in 1..=config.epochs {
        let mut epoch_loss = 0.0;
        for (b, batch) in epoch_batches(dataset.n_students(), config.batch_students, config.seed, epoch)
            .iter()
            .enumerate()
        {
            let (loss, grads) = batch_gradient(&factors, &rows, batch, &hyper);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, batch {b}")));
            }
            epoch_loss += loss;
            adam_step(&mut factors, &grads, &mut adam, config.lr)?;
            prox_nonneg_l1_inplace(factors.m.as_slice_mut().unwrap(), threshold);
        }
        epoch_loss += hyper.lambda_l1_m * factors.m.iter().sum::<f64>()
            + hyper.lambda_l2_mu * factors.mu.iter().map(|v| v * v).sum::<f64>();
        trace.records.push(EpochRecord {
            epoch,
            train_loss: epoch_loss,
            wall_seconds: start.elapsed().as_secs_f64(),
            min_loading: min_loading(&factors.m),
        });
    }
    trace.wall_train_seconds = start.elapsed().as_secs_f64();
    Ok(MleFit { factors, trace })
}

/// Predicted probabilities for every entry of `test_mask`, row-major.
pub fn predict_missing(
    factors: &FactorSet,
    dataset: &ResponseDataset,
    test_mask: &Array2<bool>,
) -> Vec<((usize, usize), f64)> {
    debug_assert_eq!(test_mask.dim(), dataset.mask().dim());
    test_mask
        .indexed_iter()
        .filter(|(_, &m)| m)
        .map(|((i, j), _)| ((i, j), sigmoid(factors.logit(i, j))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split;
    use crate::optim::finite_diff_check;
    use crate::synth::{generate, SynthSpec};
    use approx::assert_abs_diff_eq;

    fn small_problem() -> (ResponseDataset, SplitMask) {
        let inst = generate(&SynthSpec { n: 20, q: 10, k: 3, seed: 4, ..SynthSpec::default() });
        let ds = inst.to_dataset(None).unwrap();
        let s = split(&ds, 0.7, 1).unwrap();
        (ds, s)
    }

    #[test]
    fn objective_at_zero_is_n_log2() {
        let (ds, s) = small_problem();
        let f = FactorSet::zeros(3, 20, 10);
        let h = ModelHyper { k: 3, lambda_l1_m: 0.0, lambda_l2_mu: 0.0, lambda_l2_c: 0.0 };
        let n = s.n_train() as f64;
        assert_abs_diff_eq!(mle_objective(&f, &ds, &s.train, &h), n * std::f64::consts::LN_2, epsilon = 1e-10);
        let empty = Array2::from_elem(ds.mask().dim(), false);
        assert_eq!(mle_objective(&f, &ds, &empty, &h), 0.0);
        let mut one_more = empty.clone();
        one_more[[0, 0]] = true;
        assert_abs_diff_eq!(mle_objective(&f, &ds, &one_more, &h), std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn smooth_gradient_matches_finite_differences() {
        let (ds, s) = small_problem();
        let mut f = init_factors(3, 20, 10, 9);
        f.c.mapv_inplace(|v| v * 10.0);
        f.m.mapv_inplace(|v| v * 10.0);
        let h = ModelHyper { k: 3, lambda_l1_m: 0.0, lambda_l2_mu: 0.01, lambda_l2_c: 0.02 };
        let g = mle_smooth_gradient(&f, &ds, &s.train, &h).flatten_like(&f).unwrap();
        let x = f.flatten();
        let mut probe = f.clone();
        let report = finite_diff_check(
            |p| {
                probe.assign_flat(p);
                Ok(mle_smooth_objective(&probe, &ds, &s.train, &h))
            },
            &x,
            &g,
            1e-5,
            100,
            0,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn training_descends_and_is_deterministic() {
        let inst = generate(&SynthSpec { n: 100, q: 50, k: 5, seed: 2, ..SynthSpec::default() });
        let ds = inst.to_dataset(None).unwrap();
        let s = split(&ds, 0.5, 0).unwrap();
        let cfg = MleConfig { epochs: 30, ..MleConfig::default() };
        let a = train_mle(&ds, &s, &cfg).unwrap();
        assert!(a.trace.final_loss().unwrap() < a.trace.initial_loss().unwrap());
        assert!(a.trace.records.iter().all(|r| r.min_loading >= 0.0));
        let b = train_mle(&ds, &s, &cfg).unwrap();
        assert_eq!(a.factors, b.factors);
    }

    #[test]
    fn zero_factors_predict_half() {
        let (ds, s) = small_problem();
        let f = FactorSet::zeros(3, 20, 10);
        let preds = predict_missing(&f, &ds, &s.test);
        assert_eq!(preds.len(), s.n_test());
        assert!(preds.iter().all(|(_, p)| *p == 0.5));
    }
}
