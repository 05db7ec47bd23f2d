//! Prediction metrics, run-time measurement and posterior-uncertainty reports.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::SplitMask;
use crate::error::{Error, Result};
use crate::vi::{GaussianPosterior, PosteriorSamples};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_lengths(probs: &[f64], labels: &[bool]) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores but {} labels", probs.len(), labels.len())));
    }
    Ok(())
}

/// Fraction of entries where `prob >= threshold` agrees with the label.
pub fn accuracy(probs: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    check_lengths(probs, labels)?;
    if probs.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let hits = probs.iter().zip(labels).filter(|(&p, &y)| (p >= threshold) == y).count();
    Ok(hits as f64 / probs.len() as f64)
}

/// F1 of the positive class; 0 when precision and recall are both 0.
pub fn f1(probs: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    check_lengths(probs, labels)?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &y) in probs.iter().zip(labels) {
        match (p >= threshold, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    Ok(if tp == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 })
}

/// 1-based ranks with tied values sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

/// Rank-statistic ROC AUC; tied scores count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC scores".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let ranks = average_ranks(scores);
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y).map(|(r, _)| r).sum();
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Pearson correlation of average ranks. The flag reports ties in either input;
/// a constant input yields 0.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, bool)> {
    if x.len() != y.len() {
        return Err(Error::Shape("spearman inputs differ in length".into()));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedMetric("spearman needs at least two points".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let has_ties = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s.windows(2).any(|w| w[0] == w[1])
    };
    let ties = has_ties(x) || has_ties(y);
    let n = x.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok((0.0, true));
    }
    Ok((sxy / (sxx * syy).sqrt(), ties))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    pub auc: f64,
    pub f1: f64,
    pub n_test: usize,
    pub wall_train_seconds: f64,
}

impl MetricReport {
    pub fn evaluate(probs: &[f64], labels: &[bool], wall_train_seconds: f64) -> Result<Self> {
        Ok(MetricReport {
            acc: accuracy(probs, labels, DEFAULT_THRESHOLD)?,
            auc: auc(probs, labels)?,
            f1: f1(probs, labels, DEFAULT_THRESHOLD)?,
            n_test: probs.len(),
            wall_train_seconds,
        })
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }
}

/// CSV with one row per report, prefixed by a free-form label column.
pub fn write_metrics_csv<W: Write>(rows: &[(String, MetricReport)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["label", "acc", "auc", "f1", "n_test", "wall_train_seconds"])?;
    for (label, r) in rows {
        w.write_record([
            label.clone(),
            r.acc.to_string(),
            r.auc.to_string(),
            r.f1.to_string(),
            r.n_test.to_string(),
            r.wall_train_seconds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs `f` and returns its output with the elapsed monotone-clock seconds.
pub fn benchmark<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRow {
    pub student: usize,
    pub n_answered: usize,
    pub mean_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    /// Sorted by `n_answered`, then student.
    pub rows: Vec<UncertaintyRow>,
    pub spearman: f64,
    pub ties: bool,
}

impl UncertaintyReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }
}

/// Relates each student's train answer count to its average posterior std.
pub fn uncertainty_report(posteriors: &[GaussianPosterior], split: &SplitMask) -> Result<UncertaintyReport> {
    if posteriors.len() != split.train.nrows() {
        return Err(Error::Shape("one posterior per student is required".into()));
    }
    if posteriors.len() < 3 {
        return Err(Error::UndefinedMetric("uncertainty report needs at least 3 students".into()));
    }
    let mut rows: Vec<UncertaintyRow> = posteriors
        .iter()
        .enumerate()
        .map(|(i, p)| UncertaintyRow { student: i, n_answered: split.train_count(i), mean_std: p.mean_std() })
        .collect();
    if rows.iter().all(|r| r.n_answered == rows[0].n_answered) {
        return Err(Error::UndefinedMetric("every student answered the same number of questions".into()));
    }
    rows.sort_by_key(|r| (r.n_answered, r.student));
    let counts: Vec<f64> = rows.iter().map(|r| r.n_answered as f64).collect();
    let stds: Vec<f64> = rows.iter().map(|r| r.mean_std).collect();
    let (rho, ties) = spearman(&counts, &stds)?;
    Ok(UncertaintyReport { rows, spearman: rho, ties })
}

pub const VIOLIN_QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Linear-interpolation sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolinRow {
    pub student_id: String,
    pub n_answered: usize,
    pub dim: usize,
    pub mean: f64,
    pub std: f64,
    pub q05: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q95: f64,
}

/// One row per latent dimension of a student's posterior draws.
pub fn violin_summary(student_id: &str, n_answered: usize, samples: &PosteriorSamples) -> Vec<ViolinRow> {
    samples
        .samples
        .columns()
        .into_iter()
        .enumerate()
        .map(|(d, col)| {
            let mut v = col.to_vec();
            v.sort_by(f64::total_cmp);
            let q: Vec<f64> = VIOLIN_QUANTILES.iter().map(|&p| quantile_sorted(&v, p)).collect();
            ViolinRow {
                student_id: student_id.to_string(),
                n_answered,
                dim: d,
                mean: samples.mean[d],
                std: samples.std[d],
                q05: q[0],
                q25: q[1],
                q50: q[2],
                q75: q[3],
                q95: q[4],
            }
        })
        .collect()
}

pub fn write_violin_csv<W: Write>(rows: &[ViolinRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
