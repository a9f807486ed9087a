//! Single-file checkpoint container: safetensors tensors plus string metadata.
//!
//! Every file carries `format_version`, `kind` and a JSON `meta` blob; tensor
//! names are namespaced by prefix (`base.`, `train.`, `disc.`, `pair.`, ...).

use candle_core::{Device, Tensor};
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Stainer,
    PairEncoder,
    Segmenter,
}

impl CheckpointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::Stainer => "stainer",
            CheckpointKind::PairEncoder => "pair_encoder",
            CheckpointKind::Segmenter => "segmenter",
        }
    }
}

pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: HashMap<String, Tensor>,
}

impl Container {
    pub fn expect_kind(&self, kind: CheckpointKind, path: &Path) -> Result<()> {
        if self.kind != kind.as_str() {
            return Err(Error::checkpoint(
                path,
                format!("expected a {} checkpoint, found `{}`", kind.as_str(), self.kind),
            ));
        }
        Ok(())
    }
}

/// Writes atomically (temp file + rename) so an interrupted save never
/// clobbers the previous checkpoint.
pub fn save(
    path: &Path,
    kind: CheckpointKind,
    meta: &serde_json::Value,
    tensors: &[(String, Tensor)],
) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut info = HashMap::new();
    info.insert("format_version".to_string(), FORMAT_VERSION.to_string());
    info.insert("kind".to_string(), kind.as_str().to_string());
    info.insert("meta".to_string(), serde_json::to_string(meta)?);
    let contiguous = tensors
        .iter()
        .map(|(n, t)| Ok((n.clone(), t.contiguous()?)))
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(contiguous.iter().map(|(n, t)| (n.as_str(), t)), Some(info))
        .map_err(|e| Error::checkpoint(path, e.to_string()))?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::checkpoint(path, e.to_string()))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::checkpoint(path, format!("not a checkpoint: {e}")))?;
    let info = header.metadata().clone().unwrap_or_default();
    match info.get("format_version") {
        Some(v) if v == FORMAT_VERSION => {}
        other => {
            return Err(Error::checkpoint(
                path,
                format!("unsupported format version {other:?}"),
            ))
        }
    }
    let kind = info
        .get("kind")
        .cloned()
        .ok_or_else(|| Error::checkpoint(path, "missing kind"))?;
    let meta = match info.get("meta") {
        Some(m) => serde_json::from_str(m).map_err(|e| Error::checkpoint(path, e.to_string()))?,
        None => serde_json::Value::Null,
    };
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)
        .map_err(|e| Error::checkpoint(path, e.to_string()))?;
    Ok(Container { kind, meta, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_keeps_metadata_and_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        let t = Tensor::new(&[[1f32, 2.], [3., 4.]], &Device::Cpu).unwrap();
        let meta = serde_json::json!({"a": 1});
        save(&path, CheckpointKind::Segmenter, &meta, &[("seg.w".into(), t)]).unwrap();
        let c = load(&path).unwrap();
        assert_eq!(c.kind, "segmenter");
        assert_eq!(c.meta, meta);
        assert_eq!(c.tensors["seg.w"].to_vec2::<f32>().unwrap(), vec![vec![1., 2.], vec![3., 4.]]);
        assert!(c.expect_kind(CheckpointKind::Stainer, &path).is_err());
    }

    #[test]
    fn garbage_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");
        fs::write(&path, b"nope").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint { .. })));
    }
}
