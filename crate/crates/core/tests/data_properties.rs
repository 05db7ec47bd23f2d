use std::collections::{BTreeSet, HashMap};

use ndarray::Array2;
use proptest::prelude::*;
use varfa::data::{ingest_csv, preprocess, split, zero_impute, CsvSchema, ResponseDataset, ResponseRecord};

fn dense(n: usize, q: usize) -> impl Strategy<Value = ResponseDataset> {
    (proptest::collection::vec(any::<bool>(), n * q), proptest::collection::vec(any::<bool>(), n * q)).prop_map(
        move |(obs, val)| {
            let mask = Array2::from_shape_vec((n, q), obs).unwrap();
            let values = Array2::from_shape_fn((n, q), |(i, j)| (mask[[i, j]] && val[i * q + j]) as u8 as f64);
            ResponseDataset::from_dense(values, mask).unwrap()
        },
    )
}

fn records() -> impl Strategy<Value = Vec<ResponseRecord>> {
    proptest::collection::vec((0..8usize, 0..6usize, any::<bool>()), 1..80).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(k, (s, q, c))| ResponseRecord {
                student_id: format!("u{s}"),
                question_id: format!("p{q}"),
                correct: c,
                tag_ids: BTreeSet::new(),
                order_index: k,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn split_partitions_the_observed_entries(ds in dense(7, 5), fraction in 0.05f64..0.95, seed in any::<u64>()) {
        prop_assume!(ds.n_observed() >= 2);
        let s = split(&ds, fraction, seed).unwrap();
        for ((i, j), &m) in ds.mask().indexed_iter() {
            prop_assert!(!(s.train[[i, j]] && s.test[[i, j]]));
            prop_assert_eq!(s.train[[i, j]] || s.test[[i, j]], m);
        }
        let expected = (fraction * ds.n_observed() as f64).round() as usize;
        prop_assert_eq!(s.n_train(), expected);
        prop_assert_eq!(split(&ds, fraction, seed).unwrap(), s);
    }

    #[test]
    fn preprocess_is_idempotent(recs in records(), min_s in 1usize..4, min_q in 1usize..4) {
        let Ok(once) = preprocess(&recs, min_s, min_q) else { return Ok(()); };
        let twice = preprocess(&once.to_records(), min_s, min_q).unwrap();
        prop_assert_eq!(once.values(), twice.values());
        prop_assert_eq!(once.mask(), twice.mask());
        prop_assert_eq!(once.students().ids(), twice.students().ids());
        prop_assert_eq!(once.questions().ids(), twice.questions().ids());
    }

    #[test]
    fn dedup_keeps_the_earliest_record(recs in records()) {
        let ds = preprocess(&recs, 1, 1).unwrap();
        let mut sorted = recs.clone();
        sorted.sort_by_key(|r| r.order_index);
        let mut first: HashMap<(String, String), bool> = HashMap::new();
        for r in &sorted {
            first.entry((r.student_id.clone(), r.question_id.clone())).or_insert(r.correct);
        }
        prop_assert_eq!(first.len(), ds.n_observed());
        for ((s, q), c) in first {
            let i = ds.students().index(&s).unwrap();
            let j = ds.questions().index(&q).unwrap();
            prop_assert!(ds.mask()[[i, j]]);
            prop_assert_eq!(ds.value(i, j), c as u8 as f64);
        }
    }

    #[test]
    fn every_row_and_column_is_observed_after_preprocessing(recs in records(), min_s in 1usize..4, min_q in 1usize..4) {
        let Ok(ds) = preprocess(&recs, min_s, min_q) else { return Ok(()); };
        for row in ds.mask().outer_iter() {
            prop_assert!(row.iter().filter(|&&m| m).count() >= min_s);
        }
        for col in ds.mask().columns() {
            prop_assert!(col.iter().filter(|&&m| m).count() >= min_q);
        }
    }

    #[test]
    fn encoder_input_ignores_test_entries(ds in dense(6, 6), seed in any::<u64>()) {
        prop_assume!(ds.n_observed() >= 2);
        let s = split(&ds, 0.5, seed).unwrap();
        // flip every test-entry answer
        let flipped = Array2::from_shape_fn(ds.values().dim(), |(i, j)| {
            let v = ds.value(i, j);
            if s.test[[i, j]] { 1.0 - v } else { v }
        });
        let other = ResponseDataset::from_dense(flipped, ds.mask().clone()).unwrap();
        for i in 0..ds.n_students() {
            let a: Vec<u64> = zero_impute(&ds, &s, i).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = zero_impute(&other, &s, i).iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}

#[test]
fn csv_ingest_and_preprocess() {
    let text = "user_id,problem_id,correct,skill\n\
                a,p1,1,add\n\
                a,p2,0,add;mul\n\
                b,p1,0,add\n\
                a,p1,0,add\n\
                c,p3,1,frac\n";
    let schema = CsvSchema { tags: Some("skill".into()), ..CsvSchema::default() };
    let recs = ingest_csv(text.as_bytes(), &schema).unwrap();
    assert_eq!(recs.len(), 5);
    let ds = preprocess(&recs, 1, 2).unwrap();
    // p2 and p3 have one answer each, which drops c and then leaves a, b on p1
    assert_eq!(ds.questions().ids(), ["p1"]);
    assert_eq!(ds.students().ids(), ["a", "b"]);
    assert_eq!(ds.value(0, 0), 1.0);
}

#[test]
fn malformed_rows_are_reported_with_their_line() {
    let text = "user_id,problem_id,correct\na,p1,1\nb,p1,maybe\n";
    let err = ingest_csv(text.as_bytes(), &CsvSchema::default()).unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");
    let missing = "student,problem_id,correct\na,p1,1\n";
    assert!(ingest_csv(missing.as_bytes(), &CsvSchema::default()).is_err());
}
