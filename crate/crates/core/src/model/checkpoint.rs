//! Checkpoints: a JSON manifest next to a raw little-endian `f64` blob.
//!
//! `model.json` names the blob, the config and every tensor's shape and
//! offset; `model.bin` holds the values in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::ModelParams;
use crate::numerics::Tensor2;

const FORMAT: &str = "qctc-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset into the blob, in values.
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    blob: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    extra: Option<serde_json::Value>,
}

/// Writes `params` to `<dir>/model.json` and `<dir>/model.bin`.
pub fn save(params: &ModelParams, dir: &Path) -> Result<()> {
    save_with_extra(params, dir, None)
}

/// As [`save`], attaching free-form metadata to the manifest.
pub fn save_with_extra(
    params: &ModelParams,
    dir: &Path,
    extra: Option<serde_json::Value>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(params.num_scalars() * 8);
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            rows: t.rows(),
            cols: t.cols(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: params.config().clone(),
        tensors: entries,
        blob: "model.bin".into(),
        extra,
    };
    let bin = dir.join("model.bin");
    fs::write(&bin, blob).map_err(|e| Error::io(bin, e))?;
    let json = manifest_path(dir);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&json, text).map_err(|e| Error::io(json, e))
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("model.json")
}

/// Loads a checkpoint written by [`save`].
pub fn load(dir: &Path) -> Result<ModelParams> {
    load_with_extra(dir).map(|(p, _)| p)
}

pub fn load_with_extra(dir: &Path) -> Result<(ModelParams, Option<serde_json::Value>)> {
    let json = manifest_path(dir);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&json, e))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::format(
            &json,
            format!("unsupported checkpoint {} v{}", manifest.format, manifest.version),
        ));
    }
    manifest.config.validate()?;
    let bin = dir.join(&manifest.blob);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format(&bin, "blob length is not a multiple of 8"));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut named = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        if e.rows * e.cols != e.len || e.offset + e.len > values.len() {
            return Err(Error::format(&bin, format!("tensor {} lies outside the blob", e.name)));
        }
        let data = values[e.offset..e.offset + e.len].to_vec();
        named.push((e.name, Tensor2::from_vec(e.rows, e.cols, data)));
    }
    let params = ModelParams::from_named(&manifest.config, named)
        .map_err(|e| Error::format(&json, e))?;
    Ok((params, manifest.extra))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::Vocab;
    use crate::model::config::DecoderKind;
    use crate::numerics::Rng;

    fn params(kind: DecoderKind) -> ModelParams {
        let mut c = ModelConfig::new(Vocab::new(5).unwrap(), Vocab::new(4).unwrap(), kind);
        c.d_model = 8;
        c.n_heads = 2;
        c.n_queries = 3;
        c.max_src_len = 5;
        c.max_tgt_len = 4;
        ModelParams::init(&c, &mut Rng::new(3)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for kind in [
            DecoderKind::Autoregressive,
            DecoderKind::LqtParallel,
            DecoderKind::EncoderOutputParallel,
        ] {
            let dir = tempfile::tempdir().unwrap();
            let mut p = params(kind);
            p.tensors_mut()[0].set(0, 0, f64::MIN_POSITIVE / 3.0);
            p.tensors_mut()[0].set(0, 1, -0.0);
            save(&p, dir.path()).unwrap();
            let q = load(dir.path()).unwrap();
            assert_eq!(p, q);
            let bits = |m: &ModelParams| -> Vec<u64> { m.to_flat().iter().map(|v| v.to_bits()).collect() };
            assert_eq!(bits(&p), bits(&q));
        }
    }

    #[test]
    fn extra_metadata_survives() {
        let dir = tempfile::tempdir().unwrap();
        let p = params(DecoderKind::LqtParallel);
        save_with_extra(&p, dir.path(), Some(serde_json::json!({"objective": "qctc"}))).unwrap();
        let (_, extra) = load_with_extra(dir.path()).unwrap();
        assert_eq!(extra.unwrap()["objective"], "qctc");
    }

    #[test]
    fn truncated_blob_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        save(&params(DecoderKind::LqtParallel), dir.path()).unwrap();
        let bin = dir.path().join("model.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Format { .. })));
        assert!(matches!(load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
