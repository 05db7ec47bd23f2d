//! Adam, the nonnegative soft-threshold proximal map and a central
//! finite-difference gradient checker.

use std::collections::BTreeMap;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng;

/// A model whose trainable arrays can be visited by name.
///
/// Names must be unique and the visiting order fixed.
pub trait Parameterized {
    fn params(&self) -> Vec<(&'static str, &[f64])>;
    fn params_mut(&mut self) -> Vec<(&'static str, &mut [f64])>;

    fn n_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// All parameters concatenated in visiting order.
    fn flatten(&self) -> Vec<f64> {
        self.params().into_iter().flat_map(|(_, p)| p.iter().copied()).collect()
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params(), "flat parameter length");
        let mut offset = 0;
        for (_, p) in self.params_mut() {
            p.copy_from_slice(&flat[offset..offset + p.len()]);
            offset += p.len();
        }
    }
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientBundle {
    entries: BTreeMap<String, Vec<f64>>,
}

impl GradientBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, grad: Vec<f64>) {
        self.entries.insert(name.to_string(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.entries.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Gradients concatenated in the visiting order of `like`.
    pub fn flatten_like<P: Parameterized + ?Sized>(&self, like: &P) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(like.n_params());
        for (name, p) in like.params() {
            let g = self.get(name).ok_or_else(|| Error::Shape(format!("no gradient for `{name}`")))?;
            if g.len() != p.len() {
                return Err(Error::Shape(format!("gradient for `{name}` has wrong length")));
            }
            out.extend_from_slice(g);
        }
        Ok(out)
    }

    fn check_against(&self, names_and_lens: &[(&'static str, usize)]) -> Result<()> {
        if self.entries.len() != names_and_lens.len() {
            return Err(Error::Shape(format!(
                "gradient bundle has {} entries, model has {} parameters",
                self.entries.len(),
                names_and_lens.len()
            )));
        }
        for &(name, len) in names_and_lens {
            let g = self.get(name).ok_or_else(|| Error::Shape(format!("no gradient for `{name}`")))?;
            if g.len() != len {
                return Err(Error::Shape(format!("gradient for `{name}` has length {}, expected {len}", g.len())));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        Ok(())
    }
}

/// Adam moment buffers and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState::new(0.9, 0.999, 1e-8)
    }
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState { step: 0, beta1, beta2, eps, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }
}

/// One bias-corrected Adam update of every parameter.
///
/// Inputs are validated before anything is mutated.
pub fn adam_step<P: Parameterized + ?Sized>(
    params: &mut P,
    grads: &GradientBundle,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidParameter(format!("learning rate must be > 0, got {lr}")));
    }
    let shapes: Vec<(&'static str, usize)> = params.params().iter().map(|(n, p)| (*n, p.len())).collect();
    grads.check_against(&shapes)?;

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.params_mut() {
        let g = grads.get(name).expect("checked above");
        if !state.first.contains_key(name) {
            state.first.insert(name.to_string(), vec![0.0; p.len()]);
            state.second.insert(name.to_string(), vec![0.0; p.len()]);
        }
        let m = state.first.get_mut(name).expect("inserted above");
        let v = state.second.get_mut(name).expect("inserted above");
        for idx in 0..p.len() {
            m[idx] = b1 * m[idx] + (1.0 - b1) * g[idx];
            v[idx] = b2 * v[idx] + (1.0 - b2) * g[idx] * g[idx];
            let m_hat = m[idx] / c1;
            let v_hat = v[idx] / c2;
            p[idx] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Proximal map of `t * ||x||_1 + indicator(x >= 0)`: `max(0, x - t)`.
pub fn prox_nonneg_l1(x: &[f64], threshold: f64) -> Vec<f64> {
    x.iter().map(|&v| (v - threshold).max(0.0)).collect()
}

pub fn prox_nonneg_l1_inplace(x: &mut [f64], threshold: f64) {
    debug_assert!(threshold >= 0.0);
    for v in x {
        *v = (*v - threshold).max(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub n_checked: usize,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
}

/// Gradients below this magnitude are compared in absolute terms.
pub const FD_SCALE_FLOOR: f64 = 1e-4;

/// Compares `analytic` against central differences of `objective`.
///
/// Checks every coordinate when there are at most `min_coords` of them,
/// otherwise a seeded random subsample of `min_coords`. Relative error is
/// `|a - n| / max(|a|, |n|, FD_SCALE_FLOOR)`.
pub fn finite_diff_check<F>(
    mut objective: F,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    min_coords: usize,
    seed: u64,
) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidParameter("finite-difference step must be > 0".into()));
    }
    if params.len() != analytic.len() {
        return Err(Error::Shape("parameter and gradient lengths differ".into()));
    }
    let base = objective(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("objective at base point".into()));
    }
    let n = params.len();
    let coords: Vec<usize> = if n <= min_coords.max(100) {
        (0..n).collect()
    } else {
        let mut rng = rng::keyed(seed, &[rng::domain::FD_COORDS]);
        let mut picked = index::sample(&mut rng, n, min_coords.max(100)).into_vec();
        picked.sort_unstable();
        picked
    };

    let mut x = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0;
    let mut worst = 0;
    for &c in &coords {
        let orig = x[c];
        x[c] = orig + h;
        let up = objective(&x)?;
        x[c] = orig - h;
        let down = objective(&x)?;
        x[c] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective perturbed at coordinate {c}")));
        }
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[c];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_SCALE_FLOOR);
        sum_rel += rel;
        if rel > max_rel {
            max_rel = rel;
            worst = c;
        }
    }
    Ok(FdReport {
        max_rel_error: max_rel,
        mean_rel_error: sum_rel / coords.len().max(1) as f64,
        n_checked: coords.len(),
        worst_index: worst,
    })
}
