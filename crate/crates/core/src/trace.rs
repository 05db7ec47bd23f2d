//! Per-epoch training records and mini-batch scheduling shared by both trainers.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the state before the first update.
    pub epoch: usize,
    pub train_loss: f64,
    /// Cumulative training wall time at the end of the epoch.
    pub wall_seconds: f64,
    /// Smallest loading entry after the epoch.
    pub min_loading: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
    pub wall_train_seconds: f64,
}

impl TrainTrace {
    pub fn initial_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.train_loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.train_loss)
    }

    /// Fraction of epochs whose loss did not increase over the previous one.
    pub fn non_increasing_fraction(&self) -> f64 {
        let steps = self.records.len().saturating_sub(1);
        if steps == 0 {
            return 1.0;
        }
        let ok = self.records.windows(2).filter(|w| w[1].train_loss <= w[0].train_loss).count();
        ok as f64 / steps as f64
    }

    /// CSV with columns `epoch,train_loss,wall_seconds`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "train_loss", "wall_seconds"])?;
        for r in &self.records {
            w.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.wall_seconds.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shuffled student batches for one epoch.
pub fn epoch_batches(n_students: usize, batch_students: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_students).collect();
    let mut r = rng::keyed(seed, &[rng::domain::SHUFFLE, epoch as u64]);
    order.shuffle(&mut r);
    order.chunks(batch_students.max(1)).map(<[usize]>::to_vec).collect()
}
