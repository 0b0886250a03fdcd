//! Checkpoint files: a text manifest plus one little-endian `f32` blob.
//!
//! ```text
//! STEGOGRAPH-CKPT-1
//! blob model.bin
//! meta model cnn-gat
//! tensor cnn.group1.conv.w 8x1x5x5 0
//! tensor cnn.group1.bn.gamma 8 800
//! ```
//!
//! `meta` lines carry free-form key/value pairs; `tensor` lines give the
//! name, the shape (`x`-separated) and the byte offset into the blob.

use std::fs;
use std::path::{Path, PathBuf};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_HEADER: &str = "STEGOGRAPH-CKPT-1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore<f32>, meta: Vec<(String, String)>) -> Self {
        Self {
            meta,
            tensors: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Copy tensors into `store` by name; every store entry must be present
    /// with a matching shape.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        for (_, p) in store.iter_mut() {
            let (_, t) = self
                .tensors
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn blob_path(manifest: &Path) -> PathBuf {
        manifest.with_extension("bin")
    }

    pub fn save(&self, manifest: &Path) -> Result<()> {
        let blob_path = Self::blob_path(manifest);
        let blob_name = blob_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Checkpoint(format!("bad path {}", manifest.display())))?
            .to_string();
        let mut text = format!("{CHECKPOINT_HEADER}\nblob {blob_name}\n");
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("unencodable meta entry {k:?}")));
            }
            text.push_str(&format!("meta {k} {v}\n"));
        }
        let mut blob = Vec::new();
        for (name, t) in &self.tensors {
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            text.push_str(&format!("tensor {name} {} {}\n", shape.join("x"), blob.len()));
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(manifest, text)?;
        fs::write(blob_path, blob)?;
        Ok(())
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest)?;
        let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", manifest.display()));
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_HEADER) {
            return Err(bad(format!("missing {CHECKPOINT_HEADER} header")));
        }
        let mut blob = None;
        let mut meta = Vec::new();
        let mut records = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut parts = line.splitn(2, ' ');
            let kind = parts.next().unwrap_or_default();
            let rest = parts.next().unwrap_or_default();
            match kind {
                "blob" => {
                    let dir = manifest.parent().unwrap_or(Path::new("."));
                    blob = Some(fs::read(dir.join(rest))?);
                }
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.push((k.to_string(), v.to_string()));
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 3 {
                        return Err(bad(format!("malformed tensor record {line:?}")));
                    }
                    let shape = f[1]
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| bad(format!("shape {:?}: {e}", f[1])))?;
                    let offset: usize = f[2].parse().map_err(|e| bad(format!("offset: {e}")))?;
                    records.push((f[0].to_string(), shape, offset));
                }
                other => return Err(bad(format!("unknown record {other:?}"))),
            }
        }
        let blob = blob.ok_or_else(|| bad("no blob record".into()))?;
        let mut tensors = Vec::with_capacity(records.len());
        for (name, shape, offset) in records {
            let count: usize = shape.iter().product();
            let end = offset + 4 * count;
            let bytes = blob
                .get(offset..end)
                .ok_or_else(|| bad(format!("tensor {name} runs past the blob")))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Self { meta, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamKind;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut store = ParamStore::<f32>::new();
        store
            .add("a.w", Tensor::new(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-7, 9.0]).unwrap(), ParamKind::Trainable)
            .unwrap();
        store
            .add("a.rmean", Tensor::new(&[1], vec![0.5]).unwrap(), ParamKind::Buffer)
            .unwrap();
        let ck = Checkpoint::from_store(&store, vec![("model".into(), "cnn".into())]);
        ck.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("STEGOGRAPH-CKPT-1\nblob m.bin\nmeta model cnn\n"));
        assert!(text.contains("tensor a.w 2x3 0\n"));
        assert!(text.contains("tensor a.rmean 1 24\n"));
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta("model"), Some("cnn"));
    }

    #[test]
    fn load_rejects_wrong_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        fs::write(&path, "NOT-A-CKPT\n").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn load_into_checks_shapes() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(&[2]), ParamKind::Trainable).unwrap();
        let ck = Checkpoint {
            meta: vec![],
            tensors: vec![("w".into(), Tensor::zeros(&[3]))],
        };
        assert!(ck.load_into(&mut store).is_err());
    }
}
