//! Versioned checkpoint container.
//!
//! Layout:
//!
//! ```text
//! magic "MOSFCKPT" (8 bytes)
//! header length (u32, little-endian)
//! header JSON: { "format_version", "config", "tensors": [{ "name", "shape" }] }
//! payload: for each listed tensor, raw little-endian f32 values
//! ```
//!
//! Round-trips are bit-exact. The loader rebuilds the expected parameter set
//! from the header's config and refuses files whose tensor list or shapes
//! disagree, naming the offending field.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MOSFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorMeta>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

/// Serialize parameters to the container format in memory.
pub fn to_bytes(params: &ModelParams<f32>) -> Result<Vec<u8>> {
    let named = params.named_params();
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: params.config().clone(),
        tensors: named
            .iter()
            .map(|(name, t)| TensorMeta {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Usage(format!("checkpoint header serialization: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, t) in &named {
        for v in t.data().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Reconstruct parameters from container bytes (`path` is only for error
/// messages).
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<ModelParams<f32>> {
    let fail = |reason: String| Error::format(path, reason);
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 {
        return Err(fail("truncated before header".into()));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail("bad magic bytes (not a checkpoint file)".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end {
        return Err(fail("truncated inside header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| fail(format!("invalid header JSON: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: header.format_version,
            supported: CHECKPOINT_VERSION,
        });
    }
    header.config.validate()?;

    // Expected parameter set is a pure function of the config.
    let params = ModelParams::<f32>::init(&header.config, 0)?;
    let named = params.named_params();
    if named.len() != header.tensors.len() {
        return Err(fail(format!(
            "tensor count mismatch: file lists {}, config implies {}",
            header.tensors.len(),
            named.len()
        )));
    }

    let mut offset = header_end;
    for ((name, tensor), meta) in named.iter().zip(&header.tensors) {
        if name != &meta.name {
            return Err(fail(format!(
                "tensor name mismatch: file has '{}', expected '{}'",
                meta.name, name
            )));
        }
        if tensor.shape() != meta.shape.as_slice() {
            return Err(fail(format!(
                "tensor '{}': file shape {:?} does not match config shape {:?}",
                name,
                meta.shape,
                tensor.shape()
            )));
        }
        let n = tensor.numel();
        let end = offset + 4 * n;
        if bytes.len() < end {
            return Err(fail(format!("truncated payload in tensor '{name}'")));
        }
        let data: Vec<f32> = bytes[offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensor.set_data(data)?;
        offset = end;
    }
    if offset != bytes.len() {
        return Err(fail(format!(
            "{} trailing bytes after payload",
            bytes.len() - offset
        )));
    }
    Ok(params)
}

/// Write a checkpoint file.
pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    let bytes = to_bytes(params)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a checkpoint file back into parameters (and their config).
pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

/// Hex SHA-256 of a file, echoed into evaluation reports for provenance.
pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::HistoryState;
    use crate::model::MemMode;

    fn cfg() -> ModelConfig {
        ModelConfig {
            num_phases: 5,
            window: 2,
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 8,
            heads: 2,
            depth: 1,
            mem_mode: MemMode::Full,
            intervals: vec![2, 4],
            step_size: 5,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact_and_forward_identical() {
        let params = ModelParams::<f32>::init(&cfg(), 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        for ((na, ta), (nb, tb)) in params
            .named_params()
            .iter()
            .zip(loaded.named_params().iter())
        {
            assert_eq!(na, nb);
            let a = ta.to_vec();
            let b = tb.to_vec();
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let frames = vec![vec![0.25f32; cfg().frame_len()]; cfg().window];
        let refs: Vec<&[f32]> = frames.iter().map(|f| f.as_slice()).collect();
        let h = HistoryState::new(5, 5).unwrap();
        let imp = vec![vec![0.0f32; 8]; 2];
        let a = params.forward(&refs, &h, &imp).unwrap().logits.to_vec();
        let b = loaded.forward(&refs, &h, &imp).unwrap().logits.to_vec();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn config_shape_mismatch_is_named() {
        let params = ModelParams::<f32>::init(&cfg(), 1).unwrap();
        let mut bytes = to_bytes(&params).unwrap();
        // rewrite the header claiming a different phase count
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_str = String::from_utf8(bytes[12..12 + header_len].to_vec()).unwrap();
        let patched = header_str.replace("\"num_phases\":5", "\"num_phases\":7");
        assert_ne!(header_str, patched);
        let mut out = Vec::new();
        out.extend_from_slice(&bytes[..8]);
        out.extend_from_slice(&(patched.len() as u32).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[12 + header_len..]);
        bytes = out;
        let err = from_bytes(&bytes, Path::new("patched.ckpt")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("history.proj") || msg.contains("shape"), "{msg}");
    }

    #[test]
    fn unknown_version_is_explicit() {
        let params = ModelParams::<f32>::init(&cfg(), 1).unwrap();
        let bytes = to_bytes(&params).unwrap();
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_str = String::from_utf8(bytes[12..12 + header_len].to_vec()).unwrap();
        let patched = header_str.replace("\"format_version\":1", "\"format_version\":9");
        let mut out = Vec::new();
        out.extend_from_slice(&bytes[..8]);
        out.extend_from_slice(&(patched.len() as u32).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[12 + header_len..]);
        let err = from_bytes(&out, Path::new("v9.ckpt")).unwrap_err();
        assert!(matches!(err, Error::UnsupportedVersion { found: 9, .. }));
    }

    #[test]
    fn truncated_payload_names_tensor() {
        let params = ModelParams::<f32>::init(&cfg(), 1).unwrap();
        let bytes = to_bytes(&params).unwrap();
        let cut = &bytes[..bytes.len() - 10];
        let err = from_bytes(cut, Path::new("cut.ckpt")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("truncated payload in tensor"), "{msg}");
        assert!(msg.contains("head.b"), "{msg}");
    }

    #[test]
    fn memoryless_checkpoint_lists_no_memory_tensors() {
        let mut c = cfg();
        c.mem_mode = MemMode::None;
        let params = ModelParams::<f32>::init(&c, 3).unwrap();
        let bytes = to_bytes(&params).unwrap();
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(&bytes[12..12 + header_len]).unwrap();
        assert!(header
            .tensors
            .iter()
            .all(|t| !t.name.starts_with("history") && !t.name.starts_with("impression")));
    }
}
