//! Command-line experiment runner.

mod checkpoint;
mod config;
mod experiment;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainMeta, FORMAT_VERSION, MAGIC};
pub use config::{DataConfig, ExperimentConfig, GridConfig, Mode, SplitConfig, SuiteConfig, TrainConfig};
pub use experiment::{
    fit, grid_search, load_dataset, run_real_suite, run_synth_suite, scored_entries, synth_run, test_metrics,
    GridResult, GridRow, RealSuiteReport, SuiteRow, SuiteTable, Trained,
};

use crate::data::{save_cache, split, ResponseDataset, SplitMask};
use crate::error::{Error, Result};
use crate::eval::{violin_summary, write_metrics_csv, write_violin_csv};
use crate::postprocess::{associate_tags, mastery_rows, write_mastery_csv, TagMatrix};
use crate::synth::generate;
use crate::vi::{infer_posterior, sample_posterior};

#[derive(Debug, Parser)]
#[command(name = "varfa", version, about = "Sparse factor analysis with amortized variational inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WithCheckpoint {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic instance and write it as a dataset cache.
    SynthGen(Common),
    /// Train the configured mode and write the checkpoint alongside its reports.
    Train(Common),
    /// Evaluate a checkpoint on the configured split's test entries.
    Eval(WithCheckpoint),
    /// Print a student's ability estimate (posterior in VarFA mode).
    Infer {
        #[command(flatten)]
        ck: WithCheckpoint,
        #[arg(long)]
        student: String,
    },
    /// Draw posterior samples for a student and write the violin summary.
    Sample {
        #[command(flatten)]
        ck: WithCheckpoint,
        #[arg(long)]
        student: String,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Associate latent skills with skill tags and write mastery curves.
    Associate(WithCheckpoint),
    /// Synthetic suite over every configured size with both methods.
    SuiteSynth(Common),
    /// Real-data suite: fit both methods and write every report.
    SuiteReal(Common),
    /// Regularization grid search on a validation carve-out.
    GridSearch(Common),
}

fn load_config(common: &Common, base: ExperimentConfig) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::load(base, common.config.as_deref(), &common.set)?;
    if let Some(out) = &common.out {
        c.output_dir = out.clone();
    }
    std::fs::create_dir_all(&c.output_dir)?;
    Ok(c)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn data_and_split(config: &ExperimentConfig) -> Result<(ResponseDataset, SplitMask)> {
    let dataset = load_dataset(config)?;
    let s = split(&dataset, config.split.train_fraction, config.split.seed)?;
    Ok((dataset, s))
}

fn student_index(dataset: &ResponseDataset, id: &str) -> Result<usize> {
    dataset
        .students()
        .index(id)
        .ok_or_else(|| Error::InvalidParameter(format!("unknown student id `{id}`")))
}

fn write_metrics(config: &ExperimentConfig, label: &str, report: &crate::eval::MetricReport) -> Result<()> {
    write_metrics_csv(&[(label.to_string(), *report)], create(&config.output_dir.join("metrics.csv"))?)?;
    report.write_json(create(&config.output_dir.join("metrics.json"))?)
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthGen(common) => {
            let mut c = load_config(&common, ExperimentConfig::default())?;
            let spec = *c.data.synth.get_or_insert_with(Default::default);
            let dataset = generate(&spec).to_dataset(None)?;
            let path = c.output_dir.join("dataset.json");
            save_cache(&dataset, &path)?;
            println!("wrote {} ({} x {})", path.display(), dataset.n_students(), dataset.n_questions());
        }
        Command::Train(common) => {
            let c = load_config(&common, ExperimentConfig::default())?;
            let (dataset, s) = data_and_split(&c)?;
            let trained = fit(&c, &dataset, &s)?;
            save_checkpoint(&trained.checkpoint, &c.output_dir.join("model.ckpt"))?;
            trained.trace.write_csv(create(&c.output_dir.join("trace.csv"))?)?;
            let report = test_metrics(&trained.checkpoint, &dataset, &s)?;
            write_metrics(&c, c.mode.name(), &report)?;
            println!(
                "{}: acc {:.4} auc {:.4} f1 {:.4} on {} test entries, {:.3}s training",
                c.mode.name(),
                report.acc,
                report.auc,
                report.f1,
                report.n_test,
                report.wall_train_seconds
            );
        }
        Command::Eval(ck) => {
            let c = load_config(&ck.common, ExperimentConfig::default())?;
            let checkpoint = load_checkpoint(&ck.checkpoint)?;
            let (dataset, s) = data_and_split(&c)?;
            let report = test_metrics(&checkpoint, &dataset, &s)?;
            write_metrics(&c, checkpoint.mode.name(), &report)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Infer { ck, student } => {
            let c = load_config(&ck.common, ExperimentConfig::default())?;
            let checkpoint = load_checkpoint(&ck.checkpoint)?;
            let (dataset, s) = data_and_split(&c)?;
            checkpoint.check_fingerprint(&dataset);
            let i = student_index(&dataset, &student)?;
            let value = match checkpoint.varfa_model() {
                Some(model) => {
                    let post = infer_posterior(&model.encoder, &dataset, &s, i)?;
                    serde_json::json!({
                        "student_id": student,
                        "n_answered": s.train_count(i),
                        "mean": post.mean,
                        "std": post.std(),
                    })
                }
                None => {
                    let f = checkpoint.point_factors(&dataset, &s)?;
                    serde_json::json!({ "student_id": student, "ability": f.c.column(i).to_vec() })
                }
            };
            println!("{}", serde_json::to_string_pretty(&value)?);
        }
        Command::Sample { ck, student, n, seed } => {
            let c = load_config(&ck.common, ExperimentConfig::default())?;
            let checkpoint = load_checkpoint(&ck.checkpoint)?;
            let model = checkpoint
                .varfa_model()
                .ok_or_else(|| Error::Config("sampling needs a VarFA checkpoint".into()))?;
            let (dataset, s) = data_and_split(&c)?;
            checkpoint.check_fingerprint(&dataset);
            let i = student_index(&dataset, &student)?;
            let draws = sample_posterior(&model.encoder, &dataset, &s, i, n, seed)?;
            let rows = violin_summary(&student, s.train_count(i), &draws);
            let path = c.output_dir.join(format!("violin_{student}.csv"));
            write_violin_csv(&rows, create(&path)?)?;
            println!("wrote {}", path.display());
        }
        Command::Associate(ck) => {
            let c = load_config(&ck.common, ExperimentConfig::default())?;
            let checkpoint = load_checkpoint(&ck.checkpoint)?;
            let (dataset, s) = data_and_split(&c)?;
            let tags = TagMatrix::from_dataset(&dataset)
                .ok_or_else(|| Error::Schema("dataset carries no skill tags".into()))?;
            let assoc = associate_tags(&checkpoint.factors.m, &tags)?;
            assoc.write_csv(create(&c.output_dir.join("association.csv"))?)?;
            let factors = checkpoint.point_factors(&dataset, &s)?;
            let mut rows = Vec::new();
            for i in 0..dataset.n_students() {
                rows.extend(mastery_rows(&dataset, &s, &tags, &assoc, &factors.c.column(i).to_vec(), i)?);
            }
            write_mastery_csv(&rows, create(&c.output_dir.join("mastery.csv"))?)?;
            for k in 0..assoc.a.nrows() {
                let top: Vec<String> =
                    assoc.top_tags(k, 3).iter().map(|(t, w)| format!("{t} ({:.1}%)", 100.0 * w)).collect();
                println!("latent skill {k}: {}", top.join(", "));
            }
        }
        Command::SuiteSynth(common) => {
            let c = load_config(&common, ExperimentConfig::default())?;
            let table = run_synth_suite(&c)?;
            table.write_csv(&c.output_dir.join("suite_synth.csv"))?;
            for r in &table.rows {
                println!(
                    "n={:<5} {:<6} acc {:.4}±{:.4} auc {:.4}±{:.4} f1 {:.4}±{:.4} time {:.3}s",
                    r.n_students, r.method, r.acc_mean, r.acc_sd, r.auc_mean, r.auc_sd, r.f1_mean, r.f1_sd, r.time_mean
                );
            }
            for &n in &c.suite.sizes {
                if let Some(ratio) = table.time_ratio(n) {
                    println!("n={n} varfa/mle time ratio {ratio:.2}");
                }
            }
        }
        Command::SuiteReal(common) => {
            let c = load_config(&common, ExperimentConfig::real_defaults())?;
            let report = run_real_suite(&c)?;
            for (mode, r) in &report.metrics {
                println!("{}: acc {:.4} auc {:.4} f1 {:.4}", mode.name(), r.acc, r.auc, r.f1);
            }
            if let Some(u) = &report.uncertainty {
                println!("spearman(n_answered, posterior std) = {:.3}", u.spearman);
            }
        }
        Command::GridSearch(common) => {
            let c = load_config(&common, ExperimentConfig::default())?;
            let (dataset, s) = data_and_split(&c)?;
            let result = grid_search(&c, &dataset, &s)?;
            result.write_csv(&c.output_dir.join("grid.csv"))?;
            println!(
                "best validation auc {:.4}: lambda_l1_m={} lambda_l2_mu={} lambda_l2_c={}",
                result.best_auc, result.best.lambda_l1_m, result.best.lambda_l2_mu, result.best.lambda_l2_c
            );
        }
    }
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.category().exit_code()
        }
    }
}
