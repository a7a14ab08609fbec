//! Weights on disk: a JSON manifest (names, shapes, dtype, byte offsets) next
//! to one little-endian float blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::params::Parameterized;

pub const FORMAT: &str = "fbcnet-weights";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: usize,
    pub nbytes: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub blob: String,
    pub total_bytes: usize,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn blob_path(manifest: &Path, m: &Manifest) -> PathBuf {
    manifest.parent().unwrap_or_else(|| Path::new(".")).join(&m.blob)
}

/// Serializes every tensor of `model` in traversal order. Writes
/// `<dir>/<stem>.json` and `<dir>/<stem>.bin`; returns the manifest path.
pub fn save<M: Parameterized + ?Sized>(
    model: &M,
    dir: &Path,
    stem: &str,
    dtype: DType,
    metadata: serde_json::Value,
) -> Result<PathBuf> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    model.visit("", &mut |name, t| {
        let offset = blob.len();
        for &v in t.data() {
            match dtype {
                DType::F64 => blob.extend_from_slice(&v.to_le_bytes()),
                DType::F32 => blob.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype,
            offset,
            nbytes: blob.len() - offset,
            trainable: t.requires_grad(),
        });
    });
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: 1,
        blob: format!("{stem}.bin"),
        total_bytes: blob.len(),
        tensors,
        metadata,
    };
    fs::create_dir_all(dir)?;
    let mpath = dir.join(format!("{stem}.json"));
    fs::write(dir.join(&manifest.blob), &blob)?;
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(mpath)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != FORMAT {
        return Err(Error::Weights(format!("unknown format {:?}", m.format)));
    }
    Ok(m)
}

/// Loads values into `model` by name; every model tensor must be present with
/// the same shape. Returns the manifest metadata.
pub fn load<M: Parameterized + ?Sized>(model: &mut M, manifest_path: &Path) -> Result<serde_json::Value> {
    let m = read_manifest(manifest_path)?;
    let blob = fs::read(blob_path(manifest_path, &m))?;
    if blob.len() != m.total_bytes {
        return Err(Error::Weights(format!("blob has {} bytes, manifest says {}", blob.len(), m.total_bytes)));
    }
    let mut failure: Option<Error> = None;
    let mut seen = 0usize;
    model.visit_mut("", &mut |name, t| {
        if failure.is_some() {
            return;
        }
        let Some(e) = m.tensors.iter().find(|e| e.name == name) else {
            failure = Some(Error::Weights(format!("missing tensor {name}")));
            return;
        };
        if e.shape != t.shape() {
            failure = Some(Error::Weights(format!("{name}: shape {:?} != {:?}", e.shape, t.shape())));
            return;
        }
        if e.nbytes != t.numel() * e.dtype.size() || e.offset + e.nbytes > blob.len() {
            failure = Some(Error::Weights(format!("{name}: bad byte range")));
            return;
        }
        let bytes = &blob[e.offset..e.offset + e.nbytes];
        let dst = t.data_mut();
        match e.dtype {
            DType::F64 => {
                for (d, c) in dst.iter_mut().zip(bytes.chunks_exact(8)) {
                    *d = f64::from_le_bytes(c.try_into().unwrap());
                }
            }
            DType::F32 => {
                for (d, c) in dst.iter_mut().zip(bytes.chunks_exact(4)) {
                    *d = f64::from(f32::from_le_bytes(c.try_into().unwrap()));
                }
            }
        }
        seen += 1;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if seen != m.tensors.len() {
        return Err(Error::Weights(format!(
            "manifest lists {} tensors, model has {seen}",
            m.tensors.len()
        )));
    }
    Ok(m.metadata)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;
    use crate::numerics::tensor::Tensor;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn f64_round_trip_is_bit_exact(values in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let n = values.len();
            let original = (Tensor::new(vec![n], values).unwrap().into_param(), Tensor::zeros(&[2, 3]));
            let dir = tempfile::tempdir().unwrap();
            let path = save(&original, dir.path(), "w", DType::F64, serde_json::json!({"k": 1})).unwrap();
            let mut restored = (Tensor::zeros(&[n]).into_param(), Tensor::full(&[2, 3], 7.0));
            let meta = load(&mut restored, &path).unwrap();
            prop_assert_eq!(meta, serde_json::json!({"k": 1}));
            let a: Vec<u64> = original.0.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = restored.0.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(restored.1.data(), &[0.0; 6]);
        }
    }

    #[test]
    fn manifest_offsets_are_contiguous() {
        let mut rng = RngStream::new(1);
        let model = vec![Tensor::uniform(&[3, 2], 0.0, 1.0, &mut rng), Tensor::uniform(&[5], 0.0, 1.0, &mut rng)];
        let dir = tempfile::tempdir().unwrap();
        let path = save(&model, dir.path(), "m", DType::F32, serde_json::Value::Null).unwrap();
        let m = read_manifest(&path).unwrap();
        assert_eq!(m.tensors[0].offset, 0);
        assert_eq!(m.tensors[1].offset, 24);
        assert_eq!(m.total_bytes, 44);
        assert_eq!(m.tensors[1].name, "1");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = save(&Tensor::zeros(&[4]), dir.path(), "w", DType::F64, serde_json::Value::Null).unwrap();
        let mut wrong = Tensor::zeros(&[5]);
        assert!(load(&mut wrong, &path).is_err());
    }
}
