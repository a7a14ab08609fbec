//! Deterministic scene collections and their on-disk cache.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::rng::derive_seed;
use crate::numerics::tensor::Tensor;

use super::metrics::BBox;
use super::scene::{make_toy_scene, SceneConfig, SceneMeta, ToyScene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn label(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Eval => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub split: Split,
    pub config: SceneConfig,
    pub scenes: Vec<ToyScene>,
}

impl Dataset {
    pub fn generate(seed: u64, split: Split, count: usize, config: &SceneConfig) -> Result<Self> {
        let scenes = (0..count)
            .map(|i| make_toy_scene(derive_seed(seed, &[split.label(), i as u64]), config))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { seed, split, config: *config, scenes })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// SHA-256 over the f32 image bytes and the box coordinates, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.scenes {
            for &v in s.image.data() {
                h.update((v as f32).to_le_bytes());
            }
            h.update((s.boxes.len() as u64).to_le_bytes());
            for b in &s.boxes {
                for v in [b.x, b.y, b.w, b.h] {
                    h.update(v.to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes `<dir>/index.json` and one `scene_NNNN.f32` blob per image.
    pub fn save_cache(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.len());
        for (i, s) in self.scenes.iter().enumerate() {
            let file = format!("scene_{i:04}.f32");
            let bytes: Vec<u8> = s.image.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
            fs::write(dir.join(&file), bytes)?;
            entries.push(CacheEntry { file, shape: s.image.shape().to_vec(), boxes: s.boxes.clone(), meta: s.meta.clone() });
        }
        let index = CacheIndex {
            seed: self.seed,
            split: self.split,
            config: self.config,
            hash: self.hash(),
            scenes: entries,
        };
        fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)? + "\n")?;
        Ok(())
    }

    /// Reads a cache and checks its recorded hash. Images come back at f32
    /// precision.
    pub fn load_cache(dir: &Path) -> Result<Self> {
        let index: CacheIndex = serde_json::from_str(&fs::read_to_string(dir.join("index.json"))?)?;
        let mut scenes = Vec::with_capacity(index.scenes.len());
        for e in index.scenes {
            let bytes = fs::read(dir.join(&e.file))?;
            let data: Vec<f64> = bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect();
            let image = Tensor::new(e.shape, data)?;
            scenes.push(ToyScene { image, boxes: e.boxes, meta: e.meta });
        }
        let ds = Self { seed: index.seed, split: index.split, config: index.config, scenes };
        if ds.hash() != index.hash {
            return Err(Error::invalid(format!("dataset cache {} fails its hash check", dir.display())));
        }
        Ok(ds)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheEntry {
    file: String,
    shape: Vec<usize>,
    boxes: Vec<BBox>,
    meta: SceneMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheIndex {
    seed: u64,
    split: Split,
    config: SceneConfig,
    hash: String,
    scenes: Vec<CacheEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_round_trip_preserves_hash() {
        let ds = Dataset::generate(3, Split::Train, 4, &SceneConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save_cache(dir.path()).unwrap();
        let back = Dataset::load_cache(dir.path()).unwrap();
        assert_eq!(back.hash(), ds.hash());
        assert_eq!(back.scenes[2].boxes, ds.scenes[2].boxes);
        fs::write(dir.path().join("scene_0001.f32"), vec![0u8; 3 * 64 * 64 * 4]).unwrap();
        assert!(Dataset::load_cache(dir.path()).is_err());
    }

    #[test]
    fn splits_differ() {
        let cfg = SceneConfig::default();
        let a = Dataset::generate(1, Split::Train, 2, &cfg).unwrap();
        let b = Dataset::generate(1, Split::Eval, 2, &cfg).unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), Dataset::generate(1, Split::Train, 2, &cfg).unwrap().hash());
    }
}
