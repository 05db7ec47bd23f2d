//! Student-response data: CSV ingestion, preprocessing, train/test splits,
//! zero-imputed encoder inputs and the on-disk dataset cache.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

/// One answer record as read from a source file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseRecord {
    pub student_id: String,
    pub question_id: String,
    pub correct: bool,
    pub tag_ids: BTreeSet<String>,
    /// Position of the record in its source file.
    pub order_index: usize,
}

/// Column names used to read a response CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    pub student: String,
    pub question: String,
    pub correct: String,
    pub tags: Option<String>,
    pub tag_delimiter: char,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            student: "user_id".into(),
            question: "problem_id".into(),
            correct: "correct".into(),
            tags: None,
            tag_delimiter: ';',
        }
    }
}

/// Reads response records from a headed CSV stream.
pub fn ingest_csv<R: Read>(stream: R, schema: &CsvSchema) -> Result<Vec<ResponseRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(stream);
    let headers = reader.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let student_col = column(&schema.student)?;
    let question_col = column(&schema.question)?;
    let correct_col = column(&schema.correct)?;
    let tag_col = schema.tags.as_deref().map(column).transpose()?;
    let width = headers.len();

    let mut records = Vec::new();
    for (order_index, row) in reader.records().enumerate() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(order_index as u64 + 2);
        if row.len() != width {
            return Err(Error::MalformedRow {
                line,
                reason: format!("expected {width} fields, found {}", row.len()),
            });
        }
        let correct = match row[correct_col].trim() {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::MalformedRow {
                    line,
                    reason: format!("correctness must be 0 or 1, found `{other}`"),
                })
            }
        };
        let tag_ids = match tag_col {
            Some(c) => row[c]
                .split(schema.tag_delimiter)
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(String::from)
                .collect(),
            None => BTreeSet::new(),
        };
        records.push(ResponseRecord {
            student_id: row[student_col].trim().to_string(),
            question_id: row[question_col].trim().to_string(),
            correct,
            tag_ids,
            order_index,
        });
    }
    Ok(records)
}

/// Bijection between opaque ids and dense indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IdIndex {
    ids: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl IdIndex {
    pub fn new(ids: Vec<String>) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if lookup.insert(id.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate id `{id}`")));
            }
        }
        Ok(IdIndex { ids, lookup })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn index(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// Question → skill-tag assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagMap {
    pub tags: IdIndex,
    /// Tag columns attached to each question column.
    pub question_tags: Vec<Vec<usize>>,
}

/// Binary response matrix with its observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseDataset {
    values: Array2<f64>,
    mask: Array2<bool>,
    students: IdIndex,
    questions: IdIndex,
    tag_map: Option<TagMap>,
}

impl ResponseDataset {
    pub fn new(
        values: Array2<f64>,
        mask: Array2<bool>,
        students: IdIndex,
        questions: IdIndex,
        tag_map: Option<TagMap>,
    ) -> Result<Self> {
        if values.dim() != mask.dim() {
            return Err(Error::Shape("values and mask differ in shape".into()));
        }
        let (n, q) = values.dim();
        if students.len() != n || questions.len() != q {
            return Err(Error::Shape("index maps do not match matrix shape".into()));
        }
        if let Some(tm) = &tag_map {
            if tm.question_tags.len() != q {
                return Err(Error::Shape("tag map does not cover every question".into()));
            }
            if tm.question_tags.iter().flatten().any(|&t| t >= tm.tags.len()) {
                return Err(Error::Shape("tag map refers to an unknown tag".into()));
            }
        }
        for ((i, j), &v) in values.indexed_iter() {
            let ok = if mask[[i, j]] { v == 0.0 || v == 1.0 } else { v == 0.0 };
            if !ok {
                return Err(Error::Format(format!("invalid value {v} at ({i}, {j})")));
            }
        }
        Ok(ResponseDataset { values, mask, students, questions, tag_map })
    }

    /// Builds a dataset from dense matrices with generated ids `s<i>` / `q<j>`.
    pub fn from_dense(values: Array2<f64>, mask: Array2<bool>) -> Result<Self> {
        let (n, q) = values.dim();
        let values = ndarray::Zip::from(&values)
            .and(&mask)
            .map_collect(|&v, &m| if m { v } else { 0.0 });
        Self::new(
            values,
            mask,
            IdIndex::new((0..n).map(|i| format!("s{i}")).collect())?,
            IdIndex::new((0..q).map(|j| format!("q{j}")).collect())?,
            None,
        )
    }

    pub fn with_tag_map(mut self, tag_map: TagMap) -> Result<Self> {
        if tag_map.question_tags.len() != self.n_questions() {
            return Err(Error::Shape("tag map does not cover every question".into()));
        }
        self.tag_map = Some(tag_map);
        Ok(self)
    }

    pub fn n_students(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_questions(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    pub fn students(&self) -> &IdIndex {
        &self.students
    }

    pub fn questions(&self) -> &IdIndex {
        &self.questions
    }

    pub fn tag_map(&self) -> Option<&TagMap> {
        self.tag_map.as_ref()
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn observed_fraction(&self) -> f64 {
        self.n_observed() as f64 / self.mask.len() as f64
    }

    /// Observed entries as records, row-major.
    pub fn to_records(&self) -> Vec<ResponseRecord> {
        let mut out = Vec::with_capacity(self.n_observed());
        for ((i, j), &m) in self.mask.indexed_iter() {
            if !m {
                continue;
            }
            let tag_ids = self
                .tag_map
                .as_ref()
                .map(|tm| tm.question_tags[j].iter().map(|&t| tm.tags.id(t).to_string()).collect())
                .unwrap_or_default();
            out.push(ResponseRecord {
                student_id: self.students.id(i).to_string(),
                question_id: self.questions.id(j).to_string(),
                correct: self.values[[i, j]] == 1.0,
                tag_ids,
                order_index: out.len(),
            });
        }
        out
    }

    /// Short hash of the student and question index maps.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for id in self.students.ids() {
            h.update(id.as_bytes());
            h.update([0u8]);
        }
        h.update([0xffu8]);
        for id in self.questions.ids() {
            h.update(id.as_bytes());
            h.update([0u8]);
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Deduplicates, filters sparse students/questions and packs the matrix.
///
/// Duplicate (student, question) pairs keep the record with the smallest
/// `order_index`. Students and questions below the thresholds are removed
/// repeatedly until every survivor meets both minimums. Ids are packed in
/// lexicographic order.
pub fn preprocess(
    records: &[ResponseRecord],
    min_student_answers: usize,
    min_question_answers: usize,
) -> Result<ResponseDataset> {
    if min_student_answers < 1 || min_question_answers < 1 {
        return Err(Error::InvalidParameter("answer thresholds must be at least 1".into()));
    }
    let mut first: HashMap<(&str, &str), (usize, bool)> = HashMap::new();
    for r in records {
        let key = (r.student_id.as_str(), r.question_id.as_str());
        first
            .entry(key)
            .and_modify(|e| {
                if r.order_index < e.0 {
                    *e = (r.order_index, r.correct);
                }
            })
            .or_insert((r.order_index, r.correct));
    }
    let mut kept: Vec<(&str, &str, bool)> = first.into_iter().map(|((s, q), (_, c))| (s, q, c)).collect();

    loop {
        let mut per_student: HashMap<&str, usize> = HashMap::new();
        let mut per_question: HashMap<&str, usize> = HashMap::new();
        for &(s, q, _) in &kept {
            *per_student.entry(s).or_default() += 1;
            *per_question.entry(q).or_default() += 1;
        }
        let before = kept.len();
        kept.retain(|(s, q, _)| {
            per_student[s] >= min_student_answers && per_question[q] >= min_question_answers
        });
        if kept.len() == before {
            break;
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let students: BTreeSet<&str> = kept.iter().map(|e| e.0).collect();
    let questions: BTreeSet<&str> = kept.iter().map(|e| e.1).collect();
    let students = IdIndex::new(students.into_iter().map(String::from).collect())?;
    let questions = IdIndex::new(questions.into_iter().map(String::from).collect())?;

    let (n, q) = (students.len(), questions.len());
    let mut values = Array2::zeros((n, q));
    let mut mask = Array2::from_elem((n, q), false);
    for &(s, qu, c) in &kept {
        let (i, j) = (students.index(s).unwrap(), questions.index(qu).unwrap());
        mask[[i, j]] = true;
        values[[i, j]] = if c { 1.0 } else { 0.0 };
    }

    let tag_map = if records.iter().any(|r| !r.tag_ids.is_empty()) {
        let mut per_question: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); q];
        for r in records {
            if let Some(j) = questions.index(&r.question_id) {
                per_question[j].extend(r.tag_ids.iter().map(String::as_str));
            }
        }
        let all: BTreeSet<&str> = per_question.iter().flatten().copied().collect();
        let tags = IdIndex::new(all.into_iter().map(String::from).collect())?;
        let question_tags = per_question
            .iter()
            .map(|set| set.iter().map(|t| tags.index(t).unwrap()).collect())
            .collect();
        Some(TagMap { tags, question_tags })
    } else {
        None
    };

    ResponseDataset::new(values, mask, students, questions, tag_map)
}

/// Disjoint train/test partition of the observed entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMask {
    pub train: Array2<bool>,
    pub test: Array2<bool>,
}

impl SplitMask {
    /// Every observed entry in train, nothing in test.
    pub fn all_train(dataset: &ResponseDataset) -> Self {
        SplitMask {
            train: dataset.mask().clone(),
            test: Array2::from_elem(dataset.mask().dim(), false),
        }
    }

    pub fn n_train(&self) -> usize {
        self.train.iter().filter(|&&m| m).count()
    }

    pub fn n_test(&self) -> usize {
        self.test.iter().filter(|&&m| m).count()
    }

    /// Number of train-observed entries in row `i`.
    pub fn train_count(&self, i: usize) -> usize {
        self.train.row(i).iter().filter(|&&m| m).count()
    }
}

/// Splits the dataset's observed entries into train and test.
pub fn split(dataset: &ResponseDataset, train_fraction: f64, seed: u64) -> Result<SplitMask> {
    split_mask(dataset.mask(), train_fraction, seed)
}

/// Splits the `true` entries of an arbitrary mask.
///
/// Exactly `round(train_fraction * n)` entries go to train, sampled without
/// replacement from a stream keyed by `seed`.
pub fn split_mask(mask: &Array2<bool>, train_fraction: f64, seed: u64) -> Result<SplitMask> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut coords: Vec<(usize, usize)> =
        mask.indexed_iter().filter(|(_, &m)| m).map(|(ij, _)| ij).collect();
    if coords.len() < 2 {
        return Err(Error::InvalidParameter("split needs at least two observed entries".into()));
    }
    let n_train = (train_fraction * coords.len() as f64).round() as usize;
    let mut rng = rng::keyed(seed, &[rng::domain::SPLIT]);
    coords.shuffle(&mut rng);
    let mut train = Array2::from_elem(mask.dim(), false);
    let mut test = Array2::from_elem(mask.dim(), false);
    for (k, &ij) in coords.iter().enumerate() {
        if k < n_train {
            train[ij] = true;
        } else {
            test[ij] = true;
        }
    }
    Ok(SplitMask { train, test })
}

/// How a response row is turned into encoder input.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputEncoding {
    /// correct = 1, incorrect = 0, missing = 0.
    #[default]
    Binary,
    /// correct = +1, incorrect = -1, missing = 0.
    Signed,
}

/// Encoder input for row `row`, reading only train-observed entries.
pub fn zero_impute(dataset: &ResponseDataset, split: &SplitMask, row: usize) -> Vec<f64> {
    impute_row(dataset, &split.train, row, InputEncoding::Binary)
}

/// Like [`zero_impute`], over an explicit observation mask and encoding.
pub fn impute_row(
    dataset: &ResponseDataset,
    observed: &Array2<bool>,
    row: usize,
    encoding: InputEncoding,
) -> Vec<f64> {
    dataset
        .values()
        .row(row)
        .iter()
        .zip(observed.row(row))
        .map(|(&v, &m)| match (m, encoding) {
            (false, _) => 0.0,
            (true, InputEncoding::Binary) => v,
            (true, InputEncoding::Signed) => 2.0 * v - 1.0,
        })
        .collect()
}

/// Per-row lists of `(question, value)` for the entries set in `mask`.
pub fn entries_by_row(dataset: &ResponseDataset, mask: &Array2<bool>) -> Vec<Vec<(usize, f64)>> {
    mask.outer_iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .map(|(j, _)| (j, dataset.value(i, j)))
                .collect()
        })
        .collect()
}

pub const CACHE_MAGIC: &str = "varfa-dataset";
pub const CACHE_VERSION: u32 = 1;

/// Dataset cache document.
///
/// JSON object with `magic` = `"varfa-dataset"`, integer `version`, the id
/// lists, optional tag names with per-question tag indices, and the observed
/// entries as `[row, column, value]` triples.
#[derive(Debug, Serialize, Deserialize)]
struct CacheDocument {
    magic: String,
    version: u32,
    students: Vec<String>,
    questions: Vec<String>,
    tags: Option<Vec<String>>,
    question_tags: Option<Vec<Vec<usize>>>,
    entries: Vec<(usize, usize, u8)>,
}

pub fn write_cache<W: Write>(dataset: &ResponseDataset, writer: W) -> Result<()> {
    let entries = dataset
        .mask()
        .indexed_iter()
        .filter(|(_, &m)| m)
        .map(|((i, j), _)| (i, j, dataset.value(i, j) as u8))
        .collect();
    let doc = CacheDocument {
        magic: CACHE_MAGIC.into(),
        version: CACHE_VERSION,
        students: dataset.students().ids().to_vec(),
        questions: dataset.questions().ids().to_vec(),
        tags: dataset.tag_map().map(|t| t.tags.ids().to_vec()),
        question_tags: dataset.tag_map().map(|t| t.question_tags.clone()),
        entries,
    };
    serde_json::to_writer(writer, &doc)?;
    Ok(())
}

pub fn read_cache<R: Read>(reader: R) -> Result<ResponseDataset> {
    let doc: CacheDocument = serde_json::from_reader(reader)?;
    if doc.magic != CACHE_MAGIC {
        return Err(Error::Format(format!("not a dataset cache (magic `{}`)", doc.magic)));
    }
    if doc.version != CACHE_VERSION {
        return Err(Error::Version { found: doc.version, expected: CACHE_VERSION });
    }
    let (n, q) = (doc.students.len(), doc.questions.len());
    let mut values = Array2::zeros((n, q));
    let mut mask = Array2::from_elem((n, q), false);
    for (i, j, v) in doc.entries {
        if i >= n || j >= q || v > 1 {
            return Err(Error::Format(format!("bad cache entry ({i}, {j}, {v})")));
        }
        mask[[i, j]] = true;
        values[[i, j]] = v as f64;
    }
    let tag_map = match (doc.tags, doc.question_tags) {
        (Some(tags), Some(question_tags)) => Some(TagMap { tags: IdIndex::new(tags)?, question_tags }),
        (None, None) => None,
        _ => return Err(Error::Format("tag names and question tags must appear together".into())),
    };
    ResponseDataset::new(values, mask, IdIndex::new(doc.students)?, IdIndex::new(doc.questions)?, tag_map)
}

pub fn save_cache(dataset: &ResponseDataset, path: &Path) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_cache(dataset, file)
}

pub fn load_cache(path: &Path) -> Result<ResponseDataset> {
    read_cache(std::io::BufReader::new(std::fs::File::open(path)?))
}
