//! `VMSST1` archives: magic, u32 manifest length, JSON manifest, u32 CRC-32
//! of manifest and payload, then little-endian f32 tensors.

use std::fs;
use std::path::Path;

use numcore::{ParamStore, Real, Tensor};
use serde::{Deserialize, Serialize};

use super::{Adam, TrainState, TrainingConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"VMSST1";

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    step: u64,
    model: ModelConfig,
    training: TrainingConfig,
    vocab: Option<Vec<String>>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// A training state plus the vocabulary it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F: Real> {
    pub state: TrainState<F>,
    pub vocab: Option<Vec<String>>,
}

fn stores<F: Real>(state: &TrainState<F>) -> [(&'static str, &ParamStore<F>); 3] {
    [
        ("", state.model.params()),
        ("adam.m.", &state.adam.m),
        ("adam.v.", &state.adam.v),
    ]
}

pub fn encode<F: Real>(state: &TrainState<F>, vocab: Option<&[String]>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (prefix, store) in stores(state) {
        for (name, t) in store.iter() {
            tensors.push(TensorEntry {
                name: format!("{prefix}{name}"),
                shape: t.shape().to_vec(),
            });
            for &x in t.data() {
                payload.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
            }
        }
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        step: state.step,
        model: state.model.config().clone(),
        training: state.config.clone(),
        vocab: vocab.map(<[String]>::to_vec),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("manifest too large".into()))?;
    let mut crc = crc32fast::Hasher::new();
    crc.update(&json);
    crc.update(&payload);
    let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&crc.finalize().to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("truncated checkpoint ({what})")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn u32_le(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4 bytes"))
}

pub fn decode<F: Real>(bytes: &[u8]) -> Result<Checkpoint<F>> {
    let mut rest = bytes;
    if take(&mut rest, CHECKPOINT_MAGIC.len(), "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a VMSST1 checkpoint (bad magic)".into()));
    }
    let len = u32_le(take(&mut rest, 4, "manifest length")?) as usize;
    let json = take(&mut rest, len, "manifest")?;
    let stored_crc = u32_le(take(&mut rest, 4, "checksum")?);
    let payload = rest;
    let mut crc = crc32fast::Hasher::new();
    crc.update(json);
    crc.update(payload);
    if crc.finalize() != stored_crc {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    let total: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if total * 4 != payload.len() {
        return Err(Error::Format(format!(
            "payload holds {} bytes, manifest describes {}",
            payload.len(),
            total * 4
        )));
    }
    let mut params = ParamStore::new();
    let mut m = ParamStore::new();
    let mut v = ParamStore::new();
    let mut data = payload;
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = take(&mut data, n * 4, &entry.name)?;
        let values: Vec<F> = raw
            .chunks_exact(4)
            .map(|c| F::from_f64_lossy(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        let t = Tensor::from_vec(&entry.shape, values)?;
        if let Some(name) = entry.name.strip_prefix("adam.m.") {
            m.insert(name, t);
        } else if let Some(name) = entry.name.strip_prefix("adam.v.") {
            v.insert(name, t);
        } else {
            params.insert(entry.name.clone(), t);
        }
    }
    let model = Model::from_params(manifest.model, params)?;
    for (kind, store) in [("first", &m), ("second", &v)] {
        let ok = store.len() == model.params().len()
            && model
                .params()
                .iter()
                .all(|(name, t)| store.get(name).is_some_and(|s| s.shape() == t.shape()));
        if !ok {
            return Err(Error::Format(format!(
                "{kind} Adam moments do not match the parameters"
            )));
        }
    }
    manifest.training.validate()?;
    Ok(Checkpoint {
        state: TrainState {
            config: manifest.training,
            model,
            adam: Adam { m, v },
            step: manifest.step,
        },
        vocab: manifest.vocab,
    })
}

/// Writes atomically through a temporary sibling file.
pub fn checkpoint_save<F: Real>(state: &TrainState<F>, vocab: Option<&[String]>, path: &Path) -> Result<()> {
    let bytes = encode(state, vocab)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn checkpoint_load<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode(&bytes)
}
