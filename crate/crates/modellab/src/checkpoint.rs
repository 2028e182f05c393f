//! Model checkpoints: a little-endian binary container holding the model
//! config as a JSON blob plus every parameter tensor by name.
//!
//! Layout: magic `MLAB`, format version `u32`, config blob (`u64` length +
//! JSON bytes), record count `u64`, then per record: name (`u64` length +
//! UTF-8 bytes), rank `u64`, extents `u64` each, and the row-major `f32`
//! payload. Readers reject unknown versions. Writing is deterministic
//! (parameter-walk order), so save -> load -> save reproduces the file
//! byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use modellab_core::model::{MllmModel, ModelConfig};
use modellab_core::tensor::Tensor;

use crate::fsutil::atomic_write;

pub const MAGIC: &[u8; 4] = b"MLAB";
pub const FORMAT_VERSION: u32 = 1;

fn encode(config: &ModelConfig, records: &[(String, Vec<usize>, Vec<f32>)]) -> Result<Vec<u8>> {
    let config_json = serde_json::to_vec(config)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&config_json);
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for (name, shape, data) in records {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for &extent in shape {
            out.extend_from_slice(&(extent as u64).to_le_bytes());
        }
        for &x in data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Serializes the model to checkpoint bytes.
pub fn to_bytes(model: &MllmModel) -> Result<Vec<u8>> {
    let mut records = Vec::new();
    model.for_each_param(|_, name, tensor| {
        records.push((name.to_string(), tensor.shape().to_vec(), tensor.data().to_vec()));
    });
    encode(model.config(), &records)
}

pub fn save_model(path: &Path, model: &MllmModel) -> Result<()> {
    atomic_write(path, &to_bytes(model)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| anyhow!("checkpoint truncated at byte {}", self.pos))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64_len(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).context("length field exceeds addressable memory")
    }
}

/// Parses checkpoint bytes back into a live model. Every parameter of the
/// configured model must be present with its exact shape, and no extra
/// records may remain.
pub fn from_bytes(bytes: &[u8]) -> Result<MllmModel> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        bail!("not a model checkpoint (bad magic)");
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        bail!("unsupported checkpoint format version {version} (expected {FORMAT_VERSION})");
    }
    let config_len = cur.u64_len()?;
    let config: ModelConfig = serde_json::from_slice(cur.take(config_len)?)
        .context("parsing checkpoint config blob")?;
    let count = cur.u64_len()?;
    let mut records: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for _ in 0..count {
        let name_len = cur.u64_len()?;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .context("parameter name is not UTF-8")?
            .to_string();
        let rank = cur.u64_len()?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64_len()?);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if records.insert(name.clone(), (shape, data)).is_some() {
            bail!("duplicate parameter record '{name}'");
        }
    }
    if cur.pos != bytes.len() {
        bail!("{} trailing bytes after the last record", bytes.len() - cur.pos);
    }

    let mut model =
        MllmModel::new(config, 0).context("instantiating model from checkpoint config")?;
    let mut error: Option<anyhow::Error> = None;
    model.for_each_param_mut(|_, name, tensor| {
        if error.is_some() {
            return;
        }
        match records.remove(name) {
            None => error = Some(anyhow!("checkpoint is missing parameter '{name}'")),
            Some((shape, data)) => {
                if shape != tensor.shape() {
                    error = Some(anyhow!(
                        "parameter '{name}' has shape {shape:?}, model expects {:?}",
                        tensor.shape()
                    ));
                    return;
                }
                let mut fresh = Tensor::from_vec(shape, data).expect("validated shape");
                fresh.requires_grad = tensor.requires_grad;
                *tensor = fresh;
            }
        }
    });
    if let Some(e) = error {
        return Err(e);
    }
    if let Some(name) = records.keys().next() {
        bail!("checkpoint contains unknown parameter '{name}'");
    }
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<MllmModel> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))?;
    from_bytes(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use modellab_core::vision::VisionConfig;

    fn small_config() -> ModelConfig {
        let mut cfg = ModelConfig::toy();
        cfg.vocab_size = 48;
        cfg.d_l = 16;
        cfg.layers = 2;
        cfg.heads = 2;
        cfg.mlp_hidden = 24;
        cfg.separate_visual_qkv = true;
        cfg.vision = VisionConfig {
            image_size: 8,
            patch_size: 4,
            d_v: 8,
            layers: 2,
            heads: 2,
            mlp_hidden: 16,
            tap_layers: vec![1],
        };
        cfg
    }

    fn err_text(result: Result<MllmModel>) -> String {
        match result {
            Ok(_) => panic!("expected an error"),
            Err(e) => e.to_string(),
        }
    }

    #[test]
    fn save_load_save_is_bit_identical_and_params_survive() {
        let model = MllmModel::new(small_config(), 41).unwrap();
        let bytes = to_bytes(&model).unwrap();
        let reloaded = from_bytes(&bytes).unwrap();
        let again = to_bytes(&reloaded).unwrap();
        assert_eq!(bytes, again);

        let mut originals = Vec::new();
        model.for_each_param(|_, name, t| originals.push((name.to_string(), t.data().to_vec())));
        let mut i = 0;
        reloaded.for_each_param(|_, name, t| {
            assert_eq!(originals[i].0, name);
            assert_eq!(originals[i].1, t.data(), "{name}");
            i += 1;
        });
        assert_eq!(i, originals.len());
    }

    #[test]
    fn version_and_magic_are_enforced() {
        let model = MllmModel::new(small_config(), 42).unwrap();
        let bytes = to_bytes(&model).unwrap();

        let mut wrong_version = bytes.clone();
        wrong_version[4..8].copy_from_slice(&99u32.to_le_bytes());
        let err = err_text(from_bytes(&wrong_version));
        assert!(err.contains("version 99") && err.contains("expected 1"), "{err}");

        let mut wrong_magic = bytes;
        wrong_magic[0] = b'X';
        assert!(err_text(from_bytes(&wrong_magic)).contains("magic"));
    }

    #[test]
    fn missing_extra_and_misshapen_records_are_rejected() {
        let model = MllmModel::new(small_config(), 43).unwrap();
        let mut records = Vec::new();
        model.for_each_param(|_, name, t| {
            records.push((name.to_string(), t.shape().to_vec(), t.data().to_vec()));
        });

        let mut missing = records.clone();
        missing.pop();
        let bytes = encode(model.config(), &missing).unwrap();
        assert!(err_text(from_bytes(&bytes)).contains("missing parameter"));

        let mut extra = records.clone();
        extra.push(("bogus.weight".into(), vec![1], vec![0.0]));
        let bytes = encode(model.config(), &extra).unwrap();
        assert!(err_text(from_bytes(&bytes)).contains("unknown parameter"));

        let mut misshapen = records;
        misshapen[0].1 = vec![1, misshapen[0].2.len()];
        let bytes = encode(model.config(), &misshapen).unwrap();
        assert!(err_text(from_bytes(&bytes)).contains("shape"));
    }

    #[test]
    fn truncated_files_error_instead_of_panicking() {
        let model = MllmModel::new(small_config(), 44).unwrap();
        let bytes = to_bytes(&model).unwrap();
        for cut in [0, 3, 7, 11, bytes.len() / 2, bytes.len() - 1] {
            assert!(from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }
}
