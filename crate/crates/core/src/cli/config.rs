//! Experiment configuration: a TOML document layered over defaults, with
//! `key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CsvSchema, InputEncoding};
use crate::error::{Error, Result};
use crate::mle::MleConfig;
use crate::model::ModelHyper;
use crate::synth::SynthSpec;
use crate::vi::{KlWeighting, ViConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Mle,
    #[default]
    Varfa,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Mle => "mle",
            Mode::Varfa => "varfa",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub csv: Option<PathBuf>,
    pub synth: Option<SynthSpec>,
    pub cache: Option<PathBuf>,
    pub schema: CsvSchema,
    pub min_student_answers: usize,
    pub min_question_answers: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            csv: None,
            synth: None,
            cache: None,
            schema: CsvSchema::default(),
            min_student_answers: 1,
            min_question_answers: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train_fraction: 0.5, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_students: usize,
    pub seed: u64,
    pub mc_samples: usize,
    pub hidden_width: usize,
    pub kl_weighting: KlWeighting,
    pub input_encoding: InputEncoding,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let vi = ViConfig::default();
        TrainConfig {
            lr: vi.lr,
            epochs: vi.epochs,
            batch_students: vi.batch_students,
            seed: vi.seed,
            mc_samples: vi.mc_samples,
            hidden_width: vi.hidden_width,
            kl_weighting: vi.kl_weighting,
            input_encoding: vi.input_encoding,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    /// Student counts of the synthetic suite; every size uses `questions` columns.
    pub sizes: Vec<usize>,
    pub questions: usize,
    pub runs: usize,
    /// Grid-search the regularization weights before each real-data fit.
    pub grid_search: bool,
    /// Posterior draws per student for the violin summary.
    pub posterior_samples: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            sizes: vec![100, 300, 500, 700, 900],
            questions: 50,
            runs: 5,
            grid_search: false,
            posterior_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub lambda_l1_m: Vec<f64>,
    pub lambda_l2_mu: Vec<f64>,
    pub lambda_l2_c: Vec<f64>,
    pub validation_fraction: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        let grid = vec![1e-4, 1e-3, 1e-2, 1e-1];
        GridConfig {
            lambda_l1_m: grid.clone(),
            lambda_l2_mu: grid.clone(),
            lambda_l2_c: grid,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub hyper: ModelHyper,
    pub train: TrainConfig,
    pub suite: SuiteConfig,
    pub grid: GridConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::default(),
            data: DataConfig::default(),
            split: SplitConfig::default(),
            hyper: ModelHyper::default(),
            train: TrainConfig::default(),
            suite: SuiteConfig::default(),
            grid: GridConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Settings for real response logs: 8 latent skills and an 80:20 split.
    pub fn real_defaults() -> Self {
        let mut c = ExperimentConfig::default();
        c.hyper.k = 8;
        c.split.train_fraction = 0.8;
        c
    }

    /// Layers a TOML document and then `key=value` overrides on top of `base`.
    pub fn layered(base: ExperimentConfig, document: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(doc) = document {
            let file: toml::Table = doc.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
            merge(&mut value, toml::Value::Table(file));
        }
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        let config: ExperimentConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(base: ExperimentConfig, path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let doc = path.map(std::fs::read_to_string).transpose()?;
        Self::layered(base, doc.as_deref(), overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks everything except the dataset source, which only data-reading
    /// commands require.
    pub fn validate(&self) -> Result<()> {
        self.mle_config().validate()?;
        self.vi_config().validate()?;
        if let Some(spec) = &self.data.synth {
            spec.validate()?;
        }
        let s = &self.suite;
        if s.runs < 1 || s.sizes.is_empty() || s.questions < 1 || s.posterior_samples < 1 {
            return Err(Error::Config("suite needs sizes, and questions, runs and samples >= 1".into()));
        }
        let g = &self.grid;
        if g.lambda_l1_m.is_empty() || g.lambda_l2_mu.is_empty() || g.lambda_l2_c.is_empty() {
            return Err(Error::Config("every grid must be nonempty".into()));
        }
        if !(g.validation_fraction > 0.0 && g.validation_fraction < 1.0) {
            return Err(Error::Config("validation fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Exactly one of `data.csv`, `data.synth`, `data.cache` must be set.
    pub fn validate_source(&self) -> Result<()> {
        let d = &self.data;
        let n = d.csv.is_some() as u8 + d.synth.is_some() as u8 + d.cache.is_some() as u8;
        if n != 1 {
            return Err(Error::Config(format!("exactly one dataset source is required, found {n}")));
        }
        Ok(())
    }

    pub fn mle_config(&self) -> MleConfig {
        MleConfig {
            hyper: self.hyper,
            lr: self.train.lr,
            epochs: self.train.epochs,
            batch_students: self.train.batch_students,
            seed: self.train.seed,
        }
    }

    pub fn vi_config(&self) -> ViConfig {
        let t = &self.train;
        ViConfig {
            hyper: self.hyper,
            lr: t.lr,
            epochs: t.epochs,
            batch_students: t.batch_students,
            mc_samples: t.mc_samples,
            hidden_width: t.hidden_width,
            seed: t.seed,
            kl_weighting: t.kl_weighting,
            input_encoding: t.input_encoding,
        }
    }
}

fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Parses `a.b.c=value`; the value is read as a TOML literal, falling back to a string.
fn apply_override(root: &mut toml::Value, item: &str) -> Result<()> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{path}` does not name a table")))?;
        node = table.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("`{path}` does not name a table")))?;
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
