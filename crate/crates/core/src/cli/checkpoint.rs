//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic `VARFACKP`, `u32` format version, `u64` payload
//! length, the payload, then the SHA-256 of the payload. All numbers are
//! little-endian; reals are IEEE-754 binary64.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use super::config::Mode;
use crate::data::{InputEncoding, ResponseDataset, SplitMask};
use crate::error::{Error, Result};
use crate::model::{FactorSet, ModelHyper};
use crate::vi::{EncoderParams, VarfaModel};

pub const MAGIC: &[u8; 8] = b"VARFACKP";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: u64,
    pub wall_train_seconds: f64,
}

/// Trained state. In VarFA mode `factors.c` has zero columns and the
/// abilities come from `encoder`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub mode: Mode,
    pub hyper: ModelHyper,
    pub factors: FactorSet,
    pub encoder: Option<EncoderParams>,
    pub fingerprint: String,
    pub meta: TrainMeta,
}

impl Checkpoint {
    pub fn from_varfa(model: &VarfaModel, hyper: ModelHyper, fingerprint: String, meta: TrainMeta) -> Self {
        let k = model.k();
        Checkpoint {
            mode: Mode::Varfa,
            hyper,
            factors: FactorSet { c: Array2::zeros((k, 0)), m: model.m.clone(), mu: model.mu.clone() },
            encoder: Some(model.encoder.clone()),
            fingerprint,
            meta,
        }
    }

    pub fn varfa_model(&self) -> Option<VarfaModel> {
        self.encoder.as_ref().map(|e| VarfaModel {
            encoder: e.clone(),
            m: self.factors.m.clone(),
            mu: self.factors.mu.clone(),
        })
    }

    /// Factors usable for prediction on `dataset`: stored C in MLE mode,
    /// posterior means of the train-observed rows in VarFA mode.
    pub fn point_factors(&self, dataset: &ResponseDataset, split: &SplitMask) -> Result<FactorSet> {
        self.check_fingerprint(dataset);
        if dataset.n_questions() != self.factors.n_questions() {
            return Err(Error::Shape(format!(
                "checkpoint has {} questions, dataset has {}",
                self.factors.n_questions(),
                dataset.n_questions()
            )));
        }
        match self.varfa_model() {
            Some(model) => model.point_factors(dataset, split),
            None => {
                if self.factors.n_students() != dataset.n_students() {
                    return Err(Error::Shape("checkpoint and dataset differ in student count".into()));
                }
                Ok(self.factors.clone())
            }
        }
    }

    /// Logs a warning when the dataset's index maps differ from training.
    pub fn check_fingerprint(&self, dataset: &ResponseDataset) -> bool {
        let same = dataset.fingerprint() == self.fingerprint;
        if !same {
            log::warn!(
                "dataset fingerprint {} differs from checkpoint {}; ids may not align",
                dataset.fingerprint(),
                self.fingerprint
            );
        }
        same
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.write_u32::<LE>(FORMAT_VERSION).unwrap();
        out.write_u64::<LE>(payload.len() as u64).unwrap();
        out.extend_from_slice(&payload);
        out.extend_from_slice(&Sha256::digest(&payload));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Checksum);
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut header = Cursor::new(&bytes[8..HEADER_LEN]);
        let version = header.read_u32::<LE>()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: FORMAT_VERSION });
        }
        let len = header.read_u64::<LE>()? as usize;
        if bytes.len() != HEADER_LEN + len + DIGEST_LEN {
            return Err(Error::Checksum);
        }
        let payload = &bytes[HEADER_LEN..HEADER_LEN + len];
        if Sha256::digest(payload).as_slice() != &bytes[HEADER_LEN + len..] {
            return Err(Error::Checksum);
        }
        Self::parse_payload(payload).map_err(|e| match e {
            Error::Io(_) => Error::Format("checkpoint payload is inconsistent".into()),
            other => other,
        })
    }

    fn payload(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.write_u8(match self.mode {
            Mode::Mle => 0,
            Mode::Varfa => 1,
        })
        .unwrap();
        w.write_u64::<LE>(self.hyper.k as u64).unwrap();
        for v in [self.hyper.lambda_l1_m, self.hyper.lambda_l2_mu, self.hyper.lambda_l2_c] {
            w.write_f64::<LE>(v).unwrap();
        }
        w.write_u64::<LE>(self.meta.seed).unwrap();
        w.write_u64::<LE>(self.meta.epochs).unwrap();
        w.write_f64::<LE>(self.meta.wall_train_seconds).unwrap();
        write_bytes(&mut w, self.fingerprint.as_bytes());
        write_matrix(&mut w, &self.factors.c);
        write_matrix(&mut w, &self.factors.m);
        write_vector(&mut w, &self.factors.mu);
        match &self.encoder {
            None => w.write_u8(0).unwrap(),
            Some(e) => {
                w.write_u8(1).unwrap();
                w.write_u8(match e.input_encoding {
                    InputEncoding::Binary => 0,
                    InputEncoding::Signed => 1,
                })
                .unwrap();
                write_matrix(&mut w, &e.w1);
                write_vector(&mut w, &e.b1);
                write_matrix(&mut w, &e.w2);
                write_vector(&mut w, &e.b2);
                write_matrix(&mut w, &e.w3);
                write_vector(&mut w, &e.b3);
            }
        }
        w
    }

    fn parse_payload(payload: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(payload);
        let mode = match r.read_u8()? {
            0 => Mode::Mle,
            1 => Mode::Varfa,
            m => return Err(Error::Format(format!("unknown mode tag {m}"))),
        };
        let k = r.read_u64::<LE>()? as usize;
        let hyper = ModelHyper {
            k,
            lambda_l1_m: r.read_f64::<LE>()?,
            lambda_l2_mu: r.read_f64::<LE>()?,
            lambda_l2_c: r.read_f64::<LE>()?,
        };
        let meta = TrainMeta {
            seed: r.read_u64::<LE>()?,
            epochs: r.read_u64::<LE>()?,
            wall_train_seconds: r.read_f64::<LE>()?,
        };
        let fingerprint = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|_| Error::Format("fingerprint is not UTF-8".into()))?;
        let factors = FactorSet { c: read_matrix(&mut r)?, m: read_matrix(&mut r)?, mu: read_vector(&mut r)? };
        let encoder = match r.read_u8()? {
            0 => None,
            1 => {
                let input_encoding = match r.read_u8()? {
                    0 => InputEncoding::Binary,
                    1 => InputEncoding::Signed,
                    t => return Err(Error::Format(format!("unknown input encoding {t}"))),
                };
                Some(EncoderParams {
                    w1: read_matrix(&mut r)?,
                    b1: read_vector(&mut r)?,
                    w2: read_matrix(&mut r)?,
                    b2: read_vector(&mut r)?,
                    w3: read_matrix(&mut r)?,
                    b3: read_vector(&mut r)?,
                    input_encoding,
                })
            }
            t => return Err(Error::Format(format!("unknown encoder tag {t}"))),
        };
        if r.position() as usize != payload.len() {
            return Err(Error::Format("trailing bytes in checkpoint payload".into()));
        }
        let ck = Checkpoint { mode, hyper, factors, encoder, fingerprint, meta };
        ck.validate()?;
        Ok(ck)
    }

    fn validate(&self) -> Result<()> {
        let f = &self.factors;
        if f.m.nrows() != self.hyper.k || f.c.nrows() != self.hyper.k || f.mu.len() != f.m.ncols() {
            return Err(Error::Format("checkpoint factor shapes are inconsistent".into()));
        }
        match (self.mode, &self.encoder) {
            (Mode::Varfa, Some(_)) => {
                self.varfa_model().expect("encoder present").validate()?;
            }
            (Mode::Mle, None) => f.validate()?,
            _ => return Err(Error::Format("checkpoint mode does not match its contents".into())),
        }
        Ok(())
    }
}

fn write_bytes(w: &mut Vec<u8>, b: &[u8]) {
    w.write_u64::<LE>(b.len() as u64).unwrap();
    w.extend_from_slice(b);
}

fn read_bytes(r: &mut Cursor<&[u8]>) -> Result<Vec<u8>> {
    let n = read_len(r, 1)?;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

/// Reads a length and rejects values that cannot fit in the rest of the payload.
fn read_len(r: &mut Cursor<&[u8]>, elem_size: usize) -> Result<usize> {
    let n = r.read_u64::<LE>()? as usize;
    let remaining = r.get_ref().len() - r.position() as usize;
    if n.checked_mul(elem_size).is_none_or(|b| b > remaining) {
        return Err(Error::Format("length field exceeds payload".into()));
    }
    Ok(n)
}

fn write_matrix(w: &mut Vec<u8>, m: &Array2<f64>) {
    w.write_u64::<LE>(m.nrows() as u64).unwrap();
    w.write_u64::<LE>(m.ncols() as u64).unwrap();
    for &v in m.iter() {
        w.write_f64::<LE>(v).unwrap();
    }
}

fn read_matrix(r: &mut Cursor<&[u8]>) -> Result<Array2<f64>> {
    let rows = r.read_u64::<LE>()? as usize;
    let cols = r.read_u64::<LE>()? as usize;
    let remaining = r.get_ref().len() - r.position() as usize;
    if rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).is_none_or(|b| b > remaining) {
        return Err(Error::Format("matrix shape exceeds payload".into()));
    }
    let mut data = vec![0.0; rows * cols];
    r.read_f64_into::<LE>(&mut data)?;
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format(e.to_string()))
}

fn write_vector(w: &mut Vec<u8>, v: &Array1<f64>) {
    w.write_u64::<LE>(v.len() as u64).unwrap();
    for &x in v.iter() {
        w.write_f64::<LE>(x).unwrap();
    }
}

fn read_vector(r: &mut Cursor<&[u8]>) -> Result<Array1<f64>> {
    let n = read_len(r, 8)?;
    let mut data = vec![0.0; n];
    r.read_f64_into::<LE>(&mut data)?;
    Ok(Array1::from(data))
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&checkpoint.to_bytes())?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
