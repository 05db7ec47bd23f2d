//! Dataset loading, fitting, evaluation, the two experiment suites and
//! regularization grid search.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;

use super::checkpoint::{Checkpoint, TrainMeta};
use super::config::{ExperimentConfig, Mode};
use crate::data::{ingest_csv, load_cache, preprocess, split, split_mask, ResponseDataset, SplitMask};
use crate::error::{Error, Result};
use crate::eval::{
    auc, uncertainty_report, violin_summary, write_metrics_csv, write_violin_csv, MetricReport, UncertaintyReport,
};
use crate::mle::{predict_missing, train_mle};
use crate::model::{FactorSet, ModelHyper};
use crate::postprocess::{associate_tags, mastery_rows, write_mastery_csv, Association, TagMatrix};
use crate::synth::{generate, SynthSpec};
use crate::trace::TrainTrace;
use crate::vi::{infer_posterior, sample_posterior, train_varfa};

/// Reads the configured dataset source.
pub fn load_dataset(config: &ExperimentConfig) -> Result<ResponseDataset> {
    config.validate_source()?;
    let d = &config.data;
    if let Some(path) = &d.csv {
        let records = ingest_csv(File::open(path)?, &d.schema)?;
        return preprocess(&records, d.min_student_answers, d.min_question_answers);
    }
    if let Some(spec) = &d.synth {
        return generate(spec).to_dataset(None);
    }
    load_cache(d.cache.as_deref().expect("validated source"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub checkpoint: Checkpoint,
    pub trace: TrainTrace,
}

/// Trains `config.mode` on the train part of `split`.
pub fn fit(config: &ExperimentConfig, dataset: &ResponseDataset, split: &SplitMask) -> Result<Trained> {
    let fingerprint = dataset.fingerprint();
    let meta = |trace: &TrainTrace| TrainMeta {
        seed: config.train.seed,
        epochs: config.train.epochs as u64,
        wall_train_seconds: trace.wall_train_seconds,
    };
    match config.mode {
        Mode::Mle => {
            let fit = train_mle(dataset, split, &config.mle_config())?;
            let checkpoint = Checkpoint {
                mode: Mode::Mle,
                hyper: config.hyper,
                factors: fit.factors,
                encoder: None,
                fingerprint,
                meta: meta(&fit.trace),
            };
            Ok(Trained { checkpoint, trace: fit.trace })
        }
        Mode::Varfa => {
            let fit = train_varfa(dataset, split, &config.vi_config())?;
            let checkpoint = Checkpoint::from_varfa(&fit.model, config.hyper, fingerprint, meta(&fit.trace));
            Ok(Trained { checkpoint, trace: fit.trace })
        }
    }
}

/// Predicted probabilities and labels on the entries of `mask`.
pub fn scored_entries(factors: &FactorSet, dataset: &ResponseDataset, mask: &ndarray::Array2<bool>) -> (Vec<f64>, Vec<bool>) {
    predict_missing(factors, dataset, mask)
        .into_iter()
        .map(|((i, j), p)| (p, dataset.value(i, j) == 1.0))
        .unzip()
}

pub fn test_metrics(checkpoint: &Checkpoint, dataset: &ResponseDataset, split: &SplitMask) -> Result<MetricReport> {
    let factors = checkpoint.point_factors(dataset, split)?;
    let (probs, labels) = scored_entries(&factors, dataset, &split.test);
    MetricReport::evaluate(&probs, &labels, checkpoint.meta.wall_train_seconds)
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, sd)
}

/// One (size, method) cell of the synthetic suite; spreads are sample sds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteRow {
    pub n_students: usize,
    pub n_questions: usize,
    pub method: &'static str,
    pub acc_mean: f64,
    pub acc_sd: f64,
    pub auc_mean: f64,
    pub auc_sd: f64,
    pub f1_mean: f64,
    pub f1_sd: f64,
    pub time_mean: f64,
    pub time_sd: f64,
    pub runs_ok: usize,
    pub runs_failed: usize,
}

impl SuiteRow {
    fn from_reports(n: usize, q: usize, mode: Mode, reports: &[Option<MetricReport>]) -> Self {
        let ok: Vec<&MetricReport> = reports.iter().flatten().collect();
        let col = |f: fn(&MetricReport) -> f64| mean_sd(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (acc_mean, acc_sd) = col(|r| r.acc);
        let (auc_mean, auc_sd) = col(|r| r.auc);
        let (f1_mean, f1_sd) = col(|r| r.f1);
        let (time_mean, time_sd) = col(|r| r.wall_train_seconds);
        SuiteRow {
            n_students: n,
            n_questions: q,
            method: mode.name(),
            acc_mean,
            acc_sd,
            auc_mean,
            auc_sd,
            f1_mean,
            f1_sd,
            time_mean,
            time_sd,
            runs_ok: ok.len(),
            runs_failed: reports.len() - ok.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteTable {
    pub rows: Vec<SuiteRow>,
}

impl SuiteTable {
    /// Mean VarFA training time over mean MLE training time for `n` students.
    pub fn time_ratio(&self, n: usize) -> Option<f64> {
        let t = |m: Mode| self.rows.iter().find(|r| r.n_students == n && r.method == m.name()).map(|r| r.time_mean);
        Some(t(Mode::Varfa)? / t(Mode::Mle)?)
    }

    pub fn row(&self, n: usize, mode: Mode) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.n_students == n && r.method == mode.name())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Run `r` of the synthetic suite for `n` students: instance, split and
/// trainer seeds are all offset by `r`.
pub fn synth_run(config: &ExperimentConfig, n: usize, run: usize, mode: Mode) -> Result<MetricReport> {
    let base = config.data.synth.unwrap_or_default();
    let spec = SynthSpec { n, q: config.suite.questions, seed: base.seed + run as u64, ..base };
    let dataset = generate(&spec).to_dataset(None)?;
    let s = split(&dataset, config.split.train_fraction, config.split.seed + run as u64)?;
    let mut cfg = config.clone();
    cfg.mode = mode;
    cfg.train.seed = config.train.seed + run as u64;
    let trained = fit(&cfg, &dataset, &s)?;
    test_metrics(&trained.checkpoint, &dataset, &s)
}

/// Both methods at every suite size, `suite.runs` seeds each. Failed runs are
/// logged and counted, not fatal.
pub fn run_synth_suite(config: &ExperimentConfig) -> Result<SuiteTable> {
    config.validate()?;
    let mut rows = Vec::new();
    for &n in &config.suite.sizes {
        for mode in [Mode::Mle, Mode::Varfa] {
            let reports: Vec<Option<MetricReport>> = (0..config.suite.runs)
                .map(|run| match synth_run(config, n, run, mode) {
                    Ok(r) => Some(r),
                    Err(e) => {
                        log::error!("synthetic run n={n} run={run} {}: {e}", mode.name());
                        None
                    }
                })
                .collect();
            rows.push(SuiteRow::from_reports(n, config.suite.questions, mode, &reports));
        }
    }
    Ok(SuiteTable { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridRow {
    pub lambda_l1_m: f64,
    pub lambda_l2_mu: f64,
    pub lambda_l2_c: f64,
    /// `None` when the fit or the metric failed.
    pub validation_auc: Option<f64>,
}

impl GridRow {
    fn total(&self) -> f64 {
        self.lambda_l1_m + self.lambda_l2_mu + self.lambda_l2_c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub best: ModelHyper,
    pub best_auc: f64,
}

impl GridResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["lambda_l1_m", "lambda_l2_mu", "lambda_l2_c", "validation_auc"])?;
        for r in &self.rows {
            w.write_record([
                r.lambda_l1_m.to_string(),
                r.lambda_l2_mu.to_string(),
                r.lambda_l2_c.to_string(),
                r.validation_auc.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Key separating the validation carve-out from the train/test split stream.
const VALIDATION_SEED_SALT: u64 = 0x5641_4c49_4441_5445;

/// Exhaustive search over the configured lambda grids, scored by AUC on a
/// validation carve-out of the train entries. Ties go to the smaller total
/// regularization weight. The C grid is only searched in MLE mode.
pub fn grid_search(config: &ExperimentConfig, dataset: &ResponseDataset, outer: &SplitMask) -> Result<GridResult> {
    let g = &config.grid;
    let inner = split_mask(&outer.train, 1.0 - g.validation_fraction, config.split.seed ^ VALIDATION_SEED_SALT)?;
    let c_grid = match config.mode {
        Mode::Mle => g.lambda_l2_c.clone(),
        Mode::Varfa => vec![config.hyper.lambda_l2_c],
    };
    let mut rows = Vec::new();
    for &l1 in &g.lambda_l1_m {
        for &lmu in &g.lambda_l2_mu {
            for &lc in &c_grid {
                let mut cfg = config.clone();
                cfg.hyper = ModelHyper { lambda_l1_m: l1, lambda_l2_mu: lmu, lambda_l2_c: lc, ..config.hyper };
                let score = fit(&cfg, dataset, &inner).and_then(|t| {
                    let factors = t.checkpoint.point_factors(dataset, &inner)?;
                    let (p, y) = scored_entries(&factors, dataset, &inner.test);
                    auc(&p, &y)
                });
                if let Err(e) = &score {
                    log::warn!("grid point l1={l1} mu={lmu} c={lc} failed: {e}");
                }
                rows.push(GridRow { lambda_l1_m: l1, lambda_l2_mu: lmu, lambda_l2_c: lc, validation_auc: score.ok() });
            }
        }
    }
    let best = rows
        .iter()
        .filter_map(|r| r.validation_auc.map(|a| (r, a)))
        .fold(None::<(&GridRow, f64)>, |acc, (r, a)| match acc {
            Some((br, ba)) if ba > a || (ba == a && br.total() <= r.total()) => Some((br, ba)),
            _ => Some((r, a)),
        })
        .ok_or_else(|| Error::UndefinedMetric("every grid point failed".into()))?;
    let (row, best_auc) = (*best.0, best.1);
    let best = ModelHyper {
        lambda_l1_m: row.lambda_l1_m,
        lambda_l2_mu: row.lambda_l2_mu,
        lambda_l2_c: row.lambda_l2_c,
        ..config.hyper
    };
    Ok(GridResult { rows, best, best_auc })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealSuiteReport {
    pub metrics: Vec<(Mode, MetricReport)>,
    pub uncertainty: Option<UncertaintyReport>,
    pub association: Option<Association>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Fits both methods on the configured split and writes every report into
/// `config.output_dir`.
pub fn run_real_suite(config: &ExperimentConfig) -> Result<RealSuiteReport> {
    config.validate()?;
    let dataset = load_dataset(config)?;
    let s = split(&dataset, config.split.train_fraction, config.split.seed)?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out)?;

    let mut metrics = Vec::new();
    let mut varfa = None;
    for mode in [Mode::Mle, Mode::Varfa] {
        let mut cfg = config.clone();
        cfg.mode = mode;
        if config.suite.grid_search {
            let g = grid_search(&cfg, &dataset, &s)?;
            g.write_csv(&out.join(format!("grid_{}.csv", mode.name())))?;
            cfg.hyper = g.best;
        }
        let trained = fit(&cfg, &dataset, &s)?;
        trained.trace.write_csv(create(&out.join(format!("trace_{}.csv", mode.name())))?)?;
        metrics.push((mode, test_metrics(&trained.checkpoint, &dataset, &s)?));
        if mode == Mode::Varfa {
            varfa = Some(trained.checkpoint);
        }
    }
    let labelled: Vec<(String, MetricReport)> = metrics.iter().map(|(m, r)| (m.name().to_string(), *r)).collect();
    write_metrics_csv(&labelled, create(&out.join("metrics.csv"))?)?;
    serde_json::to_writer_pretty(
        create(&out.join("metrics.json"))?,
        &labelled.iter().map(|(m, r)| (m.as_str(), r)).collect::<std::collections::BTreeMap<_, _>>(),
    )?;

    let ck = varfa.expect("varfa fitted");
    let model = ck.varfa_model().expect("varfa checkpoint");
    let posteriors = (0..dataset.n_students())
        .map(|i| infer_posterior(&model.encoder, &dataset, &s, i))
        .collect::<Result<Vec<_>>>()?;
    let uncertainty = match uncertainty_report(&posteriors, &s) {
        Ok(r) => {
            r.write_csv(create(&out.join("uncertainty.csv"))?)?;
            r.write_json(create(&out.join("uncertainty.json"))?)?;
            Some(r)
        }
        Err(e) => {
            log::warn!("uncertainty report skipped: {e}");
            None
        }
    };
    let mut violin = Vec::new();
    for i in 0..dataset.n_students() {
        let draws = sample_posterior(&model.encoder, &dataset, &s, i, config.suite.posterior_samples, config.train.seed)?;
        violin.extend(violin_summary(dataset.students().id(i), s.train_count(i), &draws));
    }
    write_violin_csv(&violin, create(&out.join("violin.csv"))?)?;

    let association = match TagMatrix::from_dataset(&dataset) {
        Some(tags) => {
            let assoc = associate_tags(&model.m, &tags)?;
            assoc.write_csv(create(&out.join("association.csv"))?)?;
            let factors = ck.point_factors(&dataset, &s)?;
            let mut rows = Vec::new();
            for i in 0..dataset.n_students() {
                let ability: Vec<f64> = factors.c.column(i).to_vec();
                rows.extend(mastery_rows(&dataset, &s, &tags, &assoc, &ability, i)?);
            }
            write_mastery_csv(&rows, create(&out.join("mastery.csv"))?)?;
            Some(assoc)
        }
        None => {
            log::info!("dataset has no skill tags; association step skipped");
            None
        }
    };
    Ok(RealSuiteReport { metrics, uncertainty, association })
}
