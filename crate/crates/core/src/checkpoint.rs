//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `KBMEMCKP`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then the raw
//! little-endian `f64` sections listed in the header (parameters, then the
//! optional optimizer moments and importance array). The header carries the
//! model configuration, vocabulary and tensor table, and loading rejects any
//! tensor whose name, shape or offset disagrees with the configuration.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memorizer::{Layout, ModelConfig, Parameters, TensorInfo, Vocab};
use crate::seed::Rng;
use crate::trainer::{Adam, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"KBMEMCKP";
pub const FORMAT_TAG: &str = "kbmem-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters,
    pub vocab: Vocab,
    pub state: Option<TrainState>,
    pub train_config: Option<TrainConfig>,
    /// Free-form annotation, e.g. why a diagnostic checkpoint was written.
    pub note: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    n_items: usize,
    epoch: u64,
    step: u64,
    adam_t: u64,
    rng: Rng,
    best_f1: Option<f64>,
    best_step: Option<u64>,
    last_improve_epoch: u64,
}

#[derive(Serialize, Deserialize)]
struct Section {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    model: ModelConfig,
    vocab: Vocab,
    tensors: Vec<TensorInfo>,
    #[serde(default)]
    train_state: Option<StateMeta>,
    #[serde(default)]
    train_config: Option<TrainConfig>,
    #[serde(default)]
    note: Option<String>,
    sections: Vec<Section>,
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64s(bytes: &[u8], len: usize, at: &mut usize, name: &str) -> Result<Vec<f64>> {
    let end = at
        .checked_add(len.checked_mul(8).ok_or_else(|| Error::Checkpoint(format!("section {name} too large")))?)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint(format!("section {name} is truncated")))?;
    let out = bytes[*at..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    *at = end;
    Ok(out)
}

impl Checkpoint {
    pub fn new(params: Parameters, vocab: Vocab) -> Self {
        Checkpoint {
            params,
            vocab,
            state: None,
            train_config: None,
            note: None,
        }
    }

    pub fn with_state(mut self, state: TrainState, cfg: TrainConfig) -> Self {
        self.state = Some(state);
        self.train_config = Some(cfg);
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sections = vec![Section {
            name: "params".into(),
            len: self.params.len(),
        }];
        let meta = self.state.as_ref().map(|s| {
            for (name, len) in [
                ("adam_m", s.adam.m.len()),
                ("adam_v", s.adam.v.len()),
                ("importance", s.importance.len()),
            ] {
                sections.push(Section { name: name.into(), len });
            }
            StateMeta {
                n_items: s.importance.len(),
                epoch: s.epoch,
                step: s.step,
                adam_t: s.adam.t,
                rng: s.rng.clone(),
                best_f1: s.best_f1,
                best_step: s.best_step,
                last_improve_epoch: s.last_improve_epoch,
            }
        });
        let header = Header {
            format: FORMAT_TAG.into(),
            model: self.params.config().clone(),
            vocab: self.vocab.clone(),
            tensors: self.params.layout().tensors().to_vec(),
            train_state: meta,
            train_config: self.train_config.clone(),
            note: self.note.clone(),
            sections,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + self.params.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        push_f64s(&mut out, self.params.data());
        if let Some(s) = &self.state {
            push_f64s(&mut out, &s.adam.m);
            push_f64s(&mut out, &s.adam.v);
            push_f64s(&mut out, &s.importance);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint(format!("not a {FORMAT_TAG} file (bad magic)")));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{FORMAT_TAG} version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("header is truncated".into()))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])?;
        if header.format != FORMAT_TAG {
            return Err(Error::Checkpoint(format!(
                "format tag {:?}, expected {FORMAT_TAG:?}",
                header.format
            )));
        }
        header.model.validate()?;
        check_tensors(&header.model, &header.tensors)?;
        if header.vocab.len() != header.model.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} tokens, model expects {}",
                header.vocab.len(),
                header.model.vocab_size
            )));
        }

        let mut at = header_end;
        let mut sections = header.sections.iter();
        let mut next = |expected: &str, len: usize| -> Result<Vec<f64>> {
            match sections.next() {
                Some(s) if s.name == expected && s.len == len => read_f64s(bytes, len, &mut at, expected),
                Some(s) => Err(Error::Checkpoint(format!(
                    "section {}[{}] where {expected}[{len}] was expected",
                    s.name, s.len
                ))),
                None => Err(Error::Checkpoint(format!("missing section {expected}"))),
            }
        };
        let total = Layout::new(&header.model).total();
        let params = Parameters::from_data(header.model.clone(), next("params", total)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let state = match header.train_state {
            None => None,
            Some(meta) => {
                let m = next("adam_m", total)?;
                let v = next("adam_v", total)?;
                let importance = next("importance", meta.n_items)?;
                Some(TrainState {
                    importance,
                    epoch: meta.epoch,
                    step: meta.step,
                    adam: Adam { m, v, t: meta.adam_t },
                    rng: meta.rng,
                    best_f1: meta.best_f1,
                    best_step: meta.best_step,
                    last_improve_epoch: meta.last_improve_epoch,
                })
            }
        };
        if at != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - at)));
        }
        Ok(Checkpoint {
            params,
            vocab: header.vocab,
            state,
            train_config: header.train_config,
            note: header.note,
        })
    }

    /// Writes through a temporary sibling and renames, so a failed save
    /// never leaves a partial file behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fails unless the stored model has exactly the given configuration.
    pub fn expect_config(&self, cfg: &ModelConfig) -> Result<()> {
        if self.params.config() != cfg {
            return Err(Error::Checkpoint(format!(
                "{FORMAT_TAG} holds model {:?}, expected {:?}",
                self.params.config(),
                cfg
            )));
        }
        Ok(())
    }
}

fn check_tensors(cfg: &ModelConfig, stored: &[TensorInfo]) -> Result<()> {
    let expected = Layout::new(cfg);
    if stored.len() != expected.tensors().len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, configuration implies {}",
            stored.len(),
            expected.tensors().len()
        )));
    }
    for (s, e) in stored.iter().zip(expected.tensors()) {
        if s != e {
            return Err(Error::Checkpoint(format!(
                "shape mismatch: stored tensor {} {:?}@{} vs expected {} {:?}@{}",
                s.name, s.shape, s.offset, e.name, e.shape, e.offset
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::TrainState;

    fn small() -> (Parameters, Vocab) {
        let vocab = Vocab::build(["a b c d"]).unwrap();
        let mut cfg = ModelConfig::new(vocab.len());
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.n_layers = 1;
        cfg.max_seq_len = 8;
        (Parameters::init(cfg, 3).unwrap(), vocab)
    }

    #[test]
    fn round_trip_with_and_without_state() {
        let (p, v) = small();
        let plain = Checkpoint::new(p.clone(), v.clone());
        let back = Checkpoint::from_bytes(&plain.to_bytes().unwrap()).unwrap();
        assert_eq!(back, plain);

        let cfg = TrainConfig::default();
        let mut state = TrainState::new(5, p.len(), &cfg);
        state.importance[2] = 0.5;
        state.adam.m[0] = 1.5;
        state.step = 7;
        state.best_f1 = Some(0.25);
        let full = Checkpoint::new(p, v).with_state(state, cfg);
        let bytes = full.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, full);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let (p, v) = small();
        let bytes = Checkpoint::new(p, v).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn rejects_shape_mismatch() {
        let (p, v) = small();
        let bytes = Checkpoint::new(p, v).to_bytes().unwrap();
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[20..20 + len]).unwrap();
        let tampered = json.replacen("\"shape\":[", "\"shape\":[2,", 1);
        let mut out = bytes[..12].to_vec();
        out.extend_from_slice(&(tampered.len() as u64).to_le_bytes());
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[20 + len..]);
        let err = Checkpoint::from_bytes(&out).unwrap_err().to_string();
        assert!(err.contains("shape mismatch"), "{err}");
    }
}
