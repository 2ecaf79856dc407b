//! Binary checkpoint: a little-endian header (`vocab: u32`, `hidden: u32`,
//! `layers: u32`, `seed: u64`) followed by every tensor as raw `f64` LE
//! values in canonical order. Stored gains include the `+1` offset.

use std::io::{Read, Write};
use std::path::Path;

use super::{ModelError, ToyModel, ToyModelConfig};

const HEADER_LEN: usize = 4 + 4 + 4 + 8;

pub fn save_checkpoint(model: &ToyModel, path: &Path) -> Result<(), ModelError> {
    let cfg = model.config();
    let mut out = Vec::with_capacity(HEADER_LEN + cfg.param_count() * 8);
    out.extend(cfg.vocab.to_le_bytes());
    out.extend((cfg.hidden as u32).to_le_bytes());
    out.extend((cfg.layers as u32).to_le_bytes());
    out.extend(cfg.seed.to_le_bytes());
    for tensor in model.tensors() {
        for v in tensor {
            out.extend(v.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ToyModel, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN {
        return Err(ModelError::Checkpoint(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let cfg = ToyModelConfig {
        vocab: u32_at(0),
        hidden: u32_at(4) as usize,
        layers: u32_at(8) as usize,
        seed: u64::from_le_bytes(bytes[12..20].try_into().unwrap()),
    };
    cfg.validate()
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let expected = HEADER_LEN + cfg.param_count() * 8;
    if bytes.len() != expected {
        return Err(ModelError::Checkpoint(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let mut values = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let tensors = cfg
        .tensor_lengths()
        .into_iter()
        .map(|len| values.by_ref().take(len).collect())
        .collect();
    Ok(ToyModel::assemble(cfg, tensors, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::TokenId;

    fn small() -> ToyModelConfig {
        ToyModelConfig {
            vocab: 16,
            hidden: 8,
            layers: 2,
            seed: 11,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let model = ToyModel::init(small()).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, model);
        let prompt = [TokenId(1), TokenId(2)];
        assert_eq!(
            loaded.sequential_decode(&prompt, 8).unwrap(),
            model.sequential_decode(&prompt, 8).unwrap()
        );
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_checkpoint(&ToyModel::init(small()).unwrap(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::Checkpoint(_))
        ));
    }
}
