//! Checkpoints: a magic line, a one-line JSON header, then little-endian
//! `f64` arrays (parameters in header order, then Adam first and second
//! moments when present).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::latent::AnnealSchedule;
use crate::model::Seq2Seq;
use crate::optim::{AdamConfig, AdamState};

const MAGIC: &str = "domaingen-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: RunConfig,
    step: u64,
    temperature: Option<f64>,
    schedule: Option<AnnealSchedule>,
    params: Vec<ParamEntry>,
    optimizer: Option<OptimizerHeader>,
}

/// A trained model with the state needed to resume or decode.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub schedule: Option<AnnealSchedule>,
    pub model: Seq2Seq,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn temperature(&self) -> Option<f64> {
        self.schedule.as_ref().map(|s| s.temperature(self.step))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: FORMAT_VERSION,
            config: self.config.clone(),
            step: self.step,
            temperature: self.temperature(),
            schedule: self.schedule.clone(),
            params: self
                .model
                .params
                .iter()
                .map(|(_, name, t)| ParamEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
                counts: o.counts.clone(),
            }),
        };
        let mut out = format!("{MAGIC} {FORMAT_VERSION}\n").into_bytes();
        serde_json::to_writer(&mut out, &header).map_err(|e| Error::Input(e.to_string()))?;
        out.push(b'\n');
        let mut put = |xs: &[f64]| {
            for x in xs {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        for (_, _, t) in self.model.params.iter() {
            put(t.data());
        }
        if let Some(o) = &self.optimizer {
            for m in &o.m {
                put(m);
            }
            for v in &o.v {
                put(v);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|message| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let (magic, rest) = split_line(bytes).ok_or("missing format line")?;
        let expected = format!("{MAGIC} {FORMAT_VERSION}");
        let magic = std::str::from_utf8(magic).map_err(|_| "format line is not text")?;
        if magic != expected {
            return Err(if magic.starts_with(MAGIC) {
                format!("unsupported format version ({magic:?}, expected {expected:?})")
            } else {
                "not a checkpoint file".into()
            });
        }
        let (header, mut body) = split_line(rest).ok_or("missing header")?;
        let header: Header = serde_json::from_slice(header).map_err(|e| format!("bad header: {e}"))?;
        header.config.validate().map_err(|e| e.to_string())?;
        let mut model = header.config.build_model().map_err(|e| e.to_string())?;
        if model.params.len() != header.params.len() {
            return Err(format!(
                "header lists {} parameters, the configured model has {}",
                header.params.len(),
                model.params.len()
            ));
        }
        let ids: Vec<_> = model.params.ids().collect();
        for (id, entry) in ids.iter().zip(&header.params) {
            let t = model.params.get(*id);
            if model.params.name(*id) != entry.name || t.shape() != entry.shape.as_slice() {
                return Err(format!(
                    "parameter {} {:?} does not match the model's {} {:?}",
                    entry.name,
                    entry.shape,
                    model.params.name(*id),
                    t.shape()
                ));
            }
        }
        let mut take = |n: usize, what: &str| -> Result<Vec<f64>, String> {
            if body.len() < n * 8 {
                return Err(format!("truncated while reading {what}"));
            }
            let (head, tail) = body.split_at(n * 8);
            body = tail;
            Ok(head
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let mut values = Vec::with_capacity(ids.len());
        for (id, entry) in ids.iter().zip(&header.params) {
            values.push((*id, take(model.params.get(*id).numel(), &entry.name)?));
        }
        let optimizer = match &header.optimizer {
            Some(o) => {
                if o.counts.len() != ids.len() {
                    return Err("optimizer counts do not match the parameter list".into());
                }
                let sizes: Vec<usize> = ids.iter().map(|&id| model.params.get(id).numel()).collect();
                let m = sizes.iter().map(|&n| take(n, "first moments")).collect::<Result<Vec<_>, _>>()?;
                let v = sizes.iter().map(|&n| take(n, "second moments")).collect::<Result<Vec<_>, _>>()?;
                Some(AdamState {
                    config: o.config,
                    step: o.step,
                    counts: o.counts.clone(),
                    m,
                    v,
                })
            }
            None => None,
        };
        if !body.is_empty() {
            return Err(format!("{} trailing bytes", body.len()));
        }
        for (id, data) in values {
            model.params.get_mut(id).data_mut().copy_from_slice(&data);
        }
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            schedule: header.schedule,
            model,
            optimizer,
        })
    }
}

fn split_line(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let i = bytes.iter().position(|&b| b == b'\n')?;
    Some((&bytes[..i], &bytes[i + 1..]))
}
