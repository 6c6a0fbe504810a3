//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic     8 bytes  "FLOWTTS\0"
//! version   u32      FORMAT_VERSION
//! hdr_len   u64      byte length of the JSON header
//! header    hdr_len  UTF-8 JSON, see `Header`
//! payload   f64 x N  sections in header order, each the concatenation of
//!                    every parameter tensor in `params` order
//! ```
//!
//! Header fields: `model` (ModelConfig), `training` (TrainingConfig),
//! `params` (list of `{name, shape}`), `sections` (subset of
//! `weights`, `ema`, `adam_m`, `adam_v`), `updates`, `rng` (`seed` as hex,
//! `stream`, `word_pos` as a decimal string). The whole file is parsed and
//! validated before any state is built.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AdamW, TrainError, Trainer, TrainingConfig};
use crate::model::{ModelConfig, ModelError, ParamStore, VectorFieldModel};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"FLOWTTS\0";
pub const FORMAT_VERSION: u32 = 1;
pub const SECTIONS: [&str; 4] = ["weights", "ema", "adam_m", "adam_v"];

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint field `{field}`: {reason}")]
    Field { field: String, reason: String },
    #[error("checkpoint payload is {found} bytes, expected {expected}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

fn field(field: impl Into<String>, reason: impl Into<String>) -> CheckpointError {
    CheckpointError::Field {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    training: TrainingConfig,
    params: Vec<ParamEntry>,
    sections: Vec<String>,
    updates: u64,
    rng: RngState,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

pub fn encode<T: Real>(trainer: &Trainer<T>) -> Result<Vec<u8>> {
    let store = trainer.model.params();
    let header = Header {
        model: trainer.model.config().clone(),
        training: trainer.config.clone(),
        params: store
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        sections: SECTIONS.iter().map(|s| s.to_string()).collect(),
        updates: trainer.opt.step,
        rng: RngState {
            seed: hex(&trainer.rng.get_seed()),
            stream: trainer.rng.get_stream(),
            word_pos: trainer.rng.get_word_pos().to_string(),
        },
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let sections: [&[Tensor<T>]; 4] = [store.values(), trainer.ema.values(), &trainer.opt.m, &trainer.opt.v];
    for tensors in sections {
        for t in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Trainer<T>> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 20 {
        return Err(CheckpointError::Truncated {
            expected: 20,
            found: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let hdr_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < hdr_len {
        return Err(field("header", format!("declares {hdr_len} bytes, {} present", body.len())));
    }
    let header: Header = serde_json::from_slice(&body[..hdr_len])?;
    let payload = &body[hdr_len..];

    header.model.validate().map_err(|e| field("model", e.to_string()))?;
    header.training.validate().map_err(|e| field("training", e.to_string()))?;
    if header.sections != SECTIONS {
        return Err(field("sections", format!("expected {SECTIONS:?}, got {:?}", header.sections)));
    }
    let seed = unhex(&header.rng.seed).ok_or_else(|| field("rng.seed", "expected 64 hex digits"))?;
    let word_pos: u128 = header
        .rng
        .word_pos
        .parse()
        .map_err(|_| field("rng.word_pos", "expected a decimal integer"))?;

    // reference layout for the declared config
    let mut init_rng = ChaCha8Rng::seed_from_u64(0);
    let reference = VectorFieldModel::<T>::new(header.model.clone(), &mut init_rng)?;
    let expected = reference.params();
    if header.params.len() != expected.len() {
        return Err(field(
            "params",
            format!("{} tensors, the model config needs {}", header.params.len(), expected.len()),
        ));
    }
    for (entry, (name, t)) in header.params.iter().zip(expected.iter()) {
        if entry.name != name {
            return Err(field(format!("params.{name}"), format!("found `{}` in its place", entry.name)));
        }
        if entry.shape != t.shape() {
            return Err(field(
                format!("params.{name}"),
                format!("shape {:?}, model config needs {:?}", entry.shape, t.shape()),
            ));
        }
    }
    let per_section: usize = expected.element_count();
    let need = per_section * SECTIONS.len() * 8;
    if payload.len() != need {
        return Err(CheckpointError::Truncated {
            expected: need,
            found: payload.len(),
        });
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())));
    let mut read_section = || -> Vec<Tensor<T>> {
        expected
            .values()
            .iter()
            .map(|t| {
                let data: Vec<T> = values.by_ref().take(t.numel()).collect();
                Tensor::new(t.shape().to_vec(), data).expect("length checked")
            })
            .collect()
    };
    let (weights, ema, m, v) = (read_section(), read_section(), read_section(), read_section());

    let mut params = expected.clone();
    params.values_mut().clone_from_slice(&weights);
    let mut ema_store: ParamStore<T> = expected.clone();
    ema_store.values_mut().clone_from_slice(&ema);
    let model = reference.with_params(params)?;
    let mut opt = AdamW::new(model.params(), &header.training);
    opt.step = header.updates;
    opt.m = m;
    opt.v = v;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(word_pos);
    Ok(Trainer {
        config: header.training,
        model,
        ema: ema_store,
        opt,
        rng,
    })
}

pub fn save_checkpoint<T: Real>(trainer: &Trainer<T>, path: &Path) -> Result<()> {
    let bytes = encode(trainer)?;
    // write then rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Trainer<T>> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{make_infilling_mask, Example, TrainingBatch};
    use crate::text::pad_to_length;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            feat_dim: 3,
            capacity: 16,
            dit_layers: 1,
            dit_dim: 8,
            heads: 2,
            ffn_mult: 2,
            convnext_layers: 1,
            convnext_dim: 4,
            convnext_ffn_mult: 2,
            convnext_kernel: 3,
            conv_pos_kernel: 3,
            vocab_size: 4,
            rope_base: 10000.0,
            dropout: 0.1,
        }
    }

    fn batch(r: &mut ChaCha8Rng) -> TrainingBatch<f32> {
        let examples = (0..3)
            .map(|_| {
                let len = r.gen_range(4..8);
                Example {
                    x1: crate::cfm::sample_noise(&[len, 3], r),
                    z: pad_to_length(&[1, 3], len).unwrap(),
                    mask: make_infilling_mask(len, [0.7, 1.0], r),
                }
            })
            .collect();
        TrainingBatch { examples }
    }

    fn trained(steps: usize) -> (Trainer<f32>, ChaCha8Rng) {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let model = VectorFieldModel::new(tiny(), &mut r).unwrap();
        let mut tr = Trainer::new(model, TrainingConfig::default()).unwrap();
        for _ in 0..steps {
            let b = batch(&mut r);
            tr.train_step(&b).unwrap();
        }
        (tr, r)
    }

    #[test]
    fn round_trip_continues_identically() {
        let (mut a, mut r) = trained(10);
        assert!(a.ema.values() != a.model.params().values());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&a, &path).unwrap();
        let mut b: Trainer<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(b.updates(), 10);
        assert_eq!(b.ema, a.ema);
        let batch = batch(&mut r);
        let la = a.train_step(&batch).unwrap();
        let lb = b.train_step(&batch).unwrap();
        assert_eq!(la.loss.to_bits(), lb.loss.to_bits());
        assert_eq!(a.model.params(), b.model.params());
    }

    #[test]
    fn truncation_and_corruption_rejected() {
        let (a, _) = trained(1);
        let bytes = encode(&a).unwrap();
        for cut in [0, 7, 19, 40, bytes.len() - 1] {
            assert!(decode::<f32>(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(decode::<f32>(&v), Err(CheckpointError::Version { found: 9 })));
        let mut v = bytes.clone();
        v[0] = b'X';
        assert!(matches!(decode::<f32>(&v), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn shape_mismatch_names_field() {
        let (a, _) = trained(0);
        let bytes = encode(&a).unwrap();
        let hdr_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[20..20 + hdr_len]).unwrap();
        let edited = json.replace("\"dit_dim\":8", "\"dit_dim\":4");
        assert_ne!(json, edited);
        let mut v = bytes[..12].to_vec();
        v.extend_from_slice(&(edited.len() as u64).to_le_bytes());
        v.extend_from_slice(edited.as_bytes());
        v.extend_from_slice(&bytes[20 + hdr_len..]);
        match decode::<f32>(&v) {
            Err(CheckpointError::Field { field, .. }) => assert!(field.starts_with("params."), "{field}"),
            other => panic!("{other:?}"),
        }
    }
}
