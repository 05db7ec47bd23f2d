//! Links learned latent skills to human skill tags and turns abilities into
//! per-tag mastery curves.

use std::io::Write;

use ndarray::Array2;
use serde::Serialize;

use crate::data::{ResponseDataset, SplitMask};
use crate::error::{Error, Result};

pub const NNLS_TOLERANCE: f64 = 1e-8;
pub const NNLS_MAX_ITERS: usize = 10_000;

/// Binary tag-by-question matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TagMatrix {
    pub matrix: Array2<f64>,
    pub names: Vec<String>,
}

impl TagMatrix {
    pub fn new(matrix: Array2<f64>, names: Vec<String>) -> Result<Self> {
        if matrix.nrows() != names.len() {
            return Err(Error::Shape("one name per tag row is required".into()));
        }
        if matrix.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidParameter("tag matrix must be binary".into()));
        }
        if matrix.outer_iter().any(|row| row.iter().all(|&v| v == 0.0)) {
            return Err(Error::InvalidParameter("every tag must label at least one question".into()));
        }
        Ok(TagMatrix { matrix, names })
    }

    /// Tag matrix of a dataset; `None` when the dataset carries no tags.
    pub fn from_dataset(dataset: &ResponseDataset) -> Option<Self> {
        let map = dataset.tag_map()?;
        let mut matrix = Array2::zeros((map.tags.len(), dataset.n_questions()));
        for (j, tags) in map.question_tags.iter().enumerate() {
            for &t in tags {
                matrix[[t, j]] = 1.0;
            }
        }
        let keep: Vec<usize> =
            (0..map.tags.len()).filter(|&t| matrix.row(t).iter().any(|&v| v != 0.0)).collect();
        if keep.is_empty() {
            return None;
        }
        let matrix = matrix.select(ndarray::Axis(0), &keep);
        let names = keep.iter().map(|&t| map.tags.id(t).to_string()).collect();
        Some(TagMatrix { matrix, names })
    }

    pub fn n_tags(&self) -> usize {
        self.matrix.nrows()
    }

    /// Tags attached to question `j`.
    pub fn tags_of(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_tags()).filter(move |&t| self.matrix[[t, j]] != 0.0)
    }
}

/// Row-stochastic latent-skill-to-tag weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Association {
    /// `K x T`, each row sums to 1.
    pub a: Array2<f64>,
    pub tag_names: Vec<String>,
    /// Rows replaced by the uniform distribution because the fit was all zero.
    pub degenerate: Vec<bool>,
    /// Least-squares objective after each iteration, starting from `A = 0`.
    pub objective_trace: Vec<f64>,
}

fn objective(m: &Array2<f64>, a: &Array2<f64>, t: &Array2<f64>) -> f64 {
    let r = a.dot(t) - m;
    r.iter().map(|v| v * v).sum()
}

/// `min_{A >= 0} ||M - A T||_F^2` by projected gradient, then row normalization.
pub fn associate_tags(m: &Array2<f64>, tags: &TagMatrix) -> Result<Association> {
    let t = &tags.matrix;
    if m.ncols() != t.ncols() {
        return Err(Error::Shape(format!("M has {} questions, tags have {}", m.ncols(), t.ncols())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loadings".into()));
    }
    let (k, n_tags) = (m.nrows(), t.nrows());
    let gram = t.dot(&t.t());
    let mt = m.dot(&t.t());
    // Gershgorin bound on the largest eigenvalue of the Gram matrix.
    let lambda_max = gram.outer_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let step = if lambda_max > 0.0 { 1.0 / (2.0 * lambda_max) } else { 0.0 };

    let mut a = Array2::<f64>::zeros((k, n_tags));
    let mut prev = objective(m, &a, t);
    let mut trace = vec![prev];
    for _ in 0..NNLS_MAX_ITERS {
        let grad = (a.dot(&gram) - &mt) * 2.0;
        a.zip_mut_with(&grad, |x, g| *x = (*x - step * g).max(0.0));
        let cur = objective(m, &a, t);
        trace.push(cur);
        let done = prev == 0.0 || (prev - cur).abs() / prev < NNLS_TOLERANCE;
        prev = cur;
        if done {
            break;
        }
    }

    let mut degenerate = vec![false; k];
    for (kk, mut row) in a.outer_iter_mut().enumerate() {
        let s: f64 = row.sum();
        let zero_loading = m.row(kk).iter().all(|&v| v == 0.0);
        if zero_loading || s <= 0.0 {
            row.fill(1.0 / n_tags as f64);
            degenerate[kk] = true;
        } else {
            row.mapv_inplace(|v| v / s);
        }
    }
    Ok(Association { a, tag_names: tags.names.clone(), degenerate, objective_trace: trace })
}

impl Association {
    /// Tags of latent skill `k` sorted by decreasing weight.
    pub fn top_tags(&self, k: usize, n: usize) -> Vec<(&str, f64)> {
        let mut v: Vec<(&str, f64)> =
            self.tag_names.iter().map(String::as_str).zip(self.a.row(k).iter().copied()).collect();
        v.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(y.0)));
        v.truncate(n);
        v
    }

    /// CSV with columns `latent_skill,tag,weight`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["latent_skill", "tag", "weight"])?;
        for ((k, t), v) in self.a.indexed_iter() {
            w.write_record([k.to_string(), self.tag_names[t].clone(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagMastery {
    pub tags: Vec<usize>,
    pub raw: Vec<f64>,
    /// Min-max normalized to `[0, 1]`; all 0.5 when the raw scores are equal.
    pub normalized: Vec<f64>,
    pub degenerate: bool,
}

/// Per-tag mastery `sum_k A[k][t] c[k]` over `answered_tags`, min-max normalized.
pub fn tag_mastery(assoc: &Association, ability: &[f64], answered_tags: &[usize]) -> Result<TagMastery> {
    if ability.len() != assoc.a.nrows() {
        return Err(Error::Shape(format!("ability has {} dims, association has {}", ability.len(), assoc.a.nrows())));
    }
    if let Some(&t) = answered_tags.iter().find(|&&t| t >= assoc.a.ncols()) {
        return Err(Error::InvalidParameter(format!("tag index {t} out of range")));
    }
    let raw: Vec<f64> = answered_tags
        .iter()
        .map(|&t| ability.iter().enumerate().map(|(k, c)| assoc.a[[k, t]] * c).sum())
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = raw.is_empty() || hi - lo <= 0.0;
    let normalized = if degenerate {
        vec![0.5; raw.len()]
    } else {
        raw.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
    };
    Ok(TagMastery { tags: answered_tags.to_vec(), raw, normalized, degenerate })
}

/// Train-observed correct fraction per tag for student `i`; tags without
/// answered questions are omitted. Sorted by tag index.
pub fn empirical_mastery(
    dataset: &ResponseDataset,
    split: &SplitMask,
    tags: &TagMatrix,
    i: usize,
) -> Vec<(usize, f64)> {
    let mut correct = vec![0.0; tags.n_tags()];
    let mut answered = vec![0usize; tags.n_tags()];
    for j in 0..dataset.n_questions() {
        if !split.train[[i, j]] {
            continue;
        }
        for t in tags.tags_of(j) {
            answered[t] += 1;
            correct[t] += dataset.value(i, j);
        }
    }
    (0..tags.n_tags()).filter(|&t| answered[t] > 0).map(|t| (t, correct[t] / answered[t] as f64)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MasteryRow {
    pub student_id: String,
    pub tag: String,
    pub predicted: f64,
    pub empirical: f64,
}

/// Predicted and empirical mastery for one student over the tags it answered.
pub fn mastery_rows(
    dataset: &ResponseDataset,
    split: &SplitMask,
    tags: &TagMatrix,
    assoc: &Association,
    ability: &[f64],
    i: usize,
) -> Result<Vec<MasteryRow>> {
    let empirical = empirical_mastery(dataset, split, tags, i);
    let answered: Vec<usize> = empirical.iter().map(|(t, _)| *t).collect();
    let predicted = tag_mastery(assoc, ability, &answered)?;
    Ok(empirical
        .iter()
        .zip(&predicted.normalized)
        .map(|(&(t, e), &p)| MasteryRow {
            student_id: dataset.students().id(i).to_string(),
            tag: tags.names[t].clone(),
            predicted: p,
            empirical: e,
        })
        .collect())
}

pub fn write_mastery_csv<W: Write>(rows: &[MasteryRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tags(m: Array2<f64>) -> TagMatrix {
        let names = (0..m.nrows()).map(|t| format!("t{t}")).collect();
        TagMatrix::new(m, names).unwrap()
    }

    #[test]
    fn identity_correspondence() {
        let t = array![[1.0, 0.0, 0.0, 1.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]];
        let assoc = associate_tags(&t, &tags(t.clone())).unwrap();
        for ((r, c), &v) in assoc.a.indexed_iter() {
            let want = if r == c { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-6, "A[{r},{c}] = {v}");
        }
    }

    #[test]
    fn zero_loading_row_is_uniform() {
        let m = array![[0.0, 0.0], [1.0, 0.5]];
        let assoc = associate_tags(&m, &tags(array![[1.0, 0.0], [0.0, 1.0]])).unwrap();
        assert_eq!(assoc.degenerate, vec![true, false]);
        assert_eq!(assoc.a.row(0).to_vec(), vec![0.5, 0.5]);
        assert!((assoc.a.row(1).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        assert!(associate_tags(&array![[1.0, 2.0, 3.0]], &tags(array![[1.0, 0.0]])).is_err());
    }

    #[test]
    fn mastery_cases() {
        let assoc = Association {
            a: array![[0.7, 0.3], [0.2, 0.8]],
            tag_names: vec!["a".into(), "b".into()],
            degenerate: vec![false; 2],
            objective_trace: vec![],
        };
        let z = tag_mastery(&assoc, &[0.0, 0.0], &[0, 1]).unwrap();
        assert!(z.degenerate);
        assert_eq!(z.normalized, vec![0.5, 0.5]);
        let one = tag_mastery(&assoc, &[1.0, -1.0], &[1]).unwrap();
        assert_eq!(one.normalized, vec![0.5]);
        let two = tag_mastery(&assoc, &[1.0, -1.0], &[0, 1]).unwrap();
        assert_eq!(two.normalized, vec![1.0, 0.0]);
    }

    #[test]
    fn empirical_fraction() {
        let values = array![[1.0, 0.0, 1.0, 0.0, 1.0]];
        let mask = array![[true, true, true, true, false]];
        let ds = ResponseDataset::from_dense(values, mask).unwrap();
        let split = SplitMask::all_train(&ds);
        let t = tags(array![[1.0, 1.0, 1.0, 1.0, 0.0], [0.0, 0.0, 0.0, 0.0, 1.0]]);
        assert_eq!(empirical_mastery(&ds, &split, &t, 0), vec![(0, 0.5)]);
    }
}
