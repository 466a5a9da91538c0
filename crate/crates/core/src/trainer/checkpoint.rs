//! Versioned binary checkpoint.
//!
//! ```text
//! magic "CJSTCKPT" | u32 version | u64 header_len | header (JSON)
//! u32 blob_count | blobs
//! blob: u32 name_len | name | u32 rank | u64 × rank dims | f64 × prod(dims)
//! ```
//!
//! All integers and floats are little-endian. The JSON header holds the
//! model and compressor configuration, the training and CJST configuration
//! that produced the state, step counter, tracker, schedule counts, Adam
//! hyper-parameters and step count, and the best dev record. Blob names are
//! `param/<name>`, `adam.m/<name>` and `adam.v/<name>`, written in name order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, BestRecord, CjstConfig, Interleave, TrainConfig, TrainState};
use crate::compressor::CompressionConfig;
use crate::data::write_atomic;
use crate::error::Error;
use crate::modality::LengthRatioTracker;
use crate::model::{AsrModel, ModelConfig};
use crate::numerics::Tensor;
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"CJSTCKPT";
const VERSION: u32 = 1;

/// Training configuration recorded alongside the state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub train: Option<TrainConfig>,
    pub cjst: Option<CjstConfig>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    compressor: CompressionConfig,
    snapshot: ConfigSnapshot,
    step: u64,
    tracker: LengthRatioTracker,
    schedule: Vec<u64>,
    adam: AdamHeader,
    best: Option<BestRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

fn write_blob(w: &mut impl Write, name: &str, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, state: &TrainState, snapshot: &ConfigSnapshot) -> Result<(), Error> {
    let header = Header {
        model: state.model.cfg.clone(),
        compressor: state.model.compression.clone(),
        snapshot: snapshot.clone(),
        step: state.step,
        tracker: state.tracker.clone(),
        schedule: state.schedule.counts().to_vec(),
        adam: AdamHeader {
            beta1: state.optimizer.beta1,
            beta2: state.optimizer.beta2,
            eps: state.optimizer.eps,
            t: state.optimizer.t,
        },
        best: state.best,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut blobs: Vec<(String, &Tensor)> = Vec::new();
    blobs.extend(state.params.iter().map(|(n, t)| (format!("param/{n}"), t)));
    blobs.extend(state.optimizer.m.iter().map(|(n, t)| (format!("adam.m/{n}"), t)));
    blobs.extend(state.optimizer.v.iter().map(|(n, t)| (format!("adam.v/{n}"), t)));
    write_atomic(path, |w| {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&(blobs.len() as u32).to_le_bytes())?;
        for (name, t) in &blobs {
            write_blob(w, name, t)?;
        }
        Ok(())
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], Error> {
        let s = self
            .bytes
            .get(self.pos..self.pos.saturating_add(n))
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, Error> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, Error> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState, ConfigSnapshot), Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u64()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Checkpoint("blob name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("blob too large".into()))?)?;
        let data = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data)?;
        let bad = || Error::Checkpoint(format!("unknown blob `{name}`"));
        let (kind, key) = name.split_once('/').ok_or_else(bad)?;
        match kind {
            "param" => params.insert(key, t),
            "adam.m" => {
                m.insert(key.to_string(), t);
            }
            "adam.v" => {
                v.insert(key.to_string(), t);
            }
            _ => return Err(bad()),
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last blob".into()));
    }
    let model = AsrModel::new(header.model, header.compressor)?;
    let expected = model.init_params(&mut crate::data::derive_rng(&[0]));
    for (name, t) in expected.iter() {
        match params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            Some(p) => {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, config expects {:?}",
                    p.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
        }
    }
    let state = TrainState {
        model,
        params,
        optimizer: Adam {
            beta1: header.adam.beta1,
            beta2: header.adam.beta2,
            eps: header.adam.eps,
            t: header.adam.t,
            m,
            v,
        },
        step: header.step,
        tracker: header.tracker,
        schedule: Interleave::from_counts(header.schedule),
        best: header.best,
    };
    Ok((state, header.snapshot))
}
