//! Synthetic low-light scenes: a dark noisy background, faint elongated
//! foreground blobs and bright round distractors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::Tensor;

use super::metrics::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Square image side; a multiple of 8.
    pub size: usize,
    pub background: f64,
    pub noise_sigma: f64,
    /// Blob intensity delta is `contrast * U[1/3, 1]`.
    pub contrast: f64,
    /// Paints blobs at this absolute intensity instead.
    pub foreground_override: Option<f64>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_width: f64,
    pub max_width: f64,
    pub min_aspect: f64,
    pub max_aspect: f64,
    pub max_distractors: usize,
    pub distractor_min: f64,
    pub distractor_max: f64,
    pub placement_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 64,
            background: 0.06,
            noise_sigma: 0.02,
            contrast: 0.15,
            foreground_override: None,
            min_objects: 1,
            max_objects: 4,
            min_width: 6.0,
            max_width: 12.0,
            min_aspect: 2.0,
            max_aspect: 3.0,
            max_distractors: 6,
            distractor_min: 0.7,
            distractor_max: 1.0,
            placement_retries: 50,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 8 != 0 {
            return Err(Error::invalid(format!("scene size {} must be a positive multiple of 8", self.size)));
        }
        if self.min_objects > self.max_objects || self.min_width > self.max_width || self.min_aspect > self.max_aspect {
            return Err(Error::invalid("scene config: min exceeds max"));
        }
        if self.min_width <= 0.0 || self.min_aspect <= 0.0 {
            return Err(Error::invalid("scene config: object extents must be positive"));
        }
        if self.max_width * self.max_aspect + 2.0 > self.size as f64 {
            return Err(Error::invalid("scene config: objects do not fit in the image"));
        }
        if self.contrast < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::invalid("scene config: contrast and noise must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    pub contrast: f64,
    pub distractors: usize,
    pub requested_objects: usize,
    pub requested_distractors: usize,
    pub placement_failures: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub boxes: Vec<BBox>,
    pub meta: SceneMeta,
}

fn place_box(rng: &mut RngStream, size: f64, w: f64, h: f64) -> BBox {
    let x = (rng.uniform(0.0, size - w)).floor();
    let y = (rng.uniform(0.0, size - h)).floor();
    BBox::new(x, y, w, h)
}

/// Generates one scene from `seed`.
pub fn make_toy_scene(seed: u64, cfg: &SceneConfig) -> Result<ToyScene> {
    cfg.validate()?;
    let mut rng = RngStream::new(seed);
    let n = cfg.size;
    let sz = n as f64;
    let mut gray = vec![cfg.background; n * n];

    let requested = rng.range_inclusive(cfg.min_objects, cfg.max_objects);
    let mut failures = 0;
    let mut boxes: Vec<BBox> = Vec::new();
    let mut blobs = Vec::new();
    for _ in 0..requested {
        let w = rng.uniform(cfg.min_width, cfg.max_width).round();
        let h = (w * rng.uniform(cfg.min_aspect, cfg.max_aspect)).round();
        let delta = cfg.contrast * rng.uniform(1.0 / 3.0, 1.0);
        let mut placed = None;
        for _ in 0..cfg.placement_retries {
            let b = place_box(&mut rng, sz, w, h);
            if boxes.iter().all(|o| !o.overlaps(&b, 1.0)) {
                placed = Some(b);
                break;
            }
        }
        match placed {
            Some(b) => {
                boxes.push(b);
                blobs.push(delta);
            }
            None => failures += 1,
        }
    }
    for (b, &delta) in boxes.iter().zip(&blobs) {
        let (cx, cy) = b.center();
        let (rx, ry) = (b.w / 2.0, b.h / 2.0);
        for i in b.y as usize..(b.y + b.h) as usize {
            for j in b.x as usize..(b.x + b.w) as usize {
                let dx = (j as f64 + 0.5 - cx) / rx;
                let dy = (i as f64 + 0.5 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    gray[i * n + j] = match cfg.foreground_override {
                        Some(v) => v,
                        None => cfg.background + delta,
                    };
                }
            }
        }
    }

    let requested_d = rng.range_inclusive(0, cfg.max_distractors);
    let mut distractors = 0;
    for _ in 0..requested_d {
        let r = rng.uniform(2.0, 5.0).round();
        let level = rng.uniform(cfg.distractor_min, cfg.distractor_max);
        let mut placed = None;
        for _ in 0..cfg.placement_retries {
            let b = place_box(&mut rng, sz, 2.0 * r, 2.0 * r);
            if boxes.iter().all(|o| !o.overlaps(&b, 1.0)) {
                placed = Some(b);
                break;
            }
        }
        let Some(b) = placed else {
            failures += 1;
            continue;
        };
        distractors += 1;
        let (cx, cy) = b.center();
        for i in b.y as usize..(b.y + b.h) as usize {
            for j in b.x as usize..(b.x + b.w) as usize {
                let (dx, dy) = (j as f64 + 0.5 - cx, i as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    gray[i * n + j] = level;
                }
            }
        }
    }

    let mut image = Tensor::zeros(&[3, n, n]);
    let data = image.data_mut();
    for c in 0..3 {
        for p in 0..n * n {
            data[c * n * n + p] = (gray[p] + cfg.noise_sigma * rng.normal()).clamp(0.0, 1.0);
        }
    }
    Ok(ToyScene {
        image,
        boxes,
        meta: SceneMeta {
            seed,
            contrast: cfg.contrast,
            distractors,
            requested_objects: requested,
            requested_distractors: requested_d,
            placement_failures: failures,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boxes_inside_and_disjoint() {
        for s in 0..40 {
            let sc = make_toy_scene(s, &SceneConfig::default()).unwrap();
            assert!(!sc.boxes.is_empty() && sc.boxes.len() <= 4);
            for (i, b) in sc.boxes.iter().enumerate() {
                assert!(b.x >= 0.0 && b.y >= 0.0 && b.x + b.w <= 64.0 && b.y + b.h <= 64.0);
                assert!(b.h >= 2.0 * b.w - 1.0 && b.h <= 3.0 * b.w + 1.0);
                for o in &sc.boxes[i + 1..] {
                    assert!(!b.overlaps(o, 0.0));
                }
            }
            assert!(sc.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        assert_eq!(make_toy_scene(9, &cfg).unwrap(), make_toy_scene(9, &cfg).unwrap());
        assert_ne!(make_toy_scene(9, &cfg).unwrap().image, make_toy_scene(10, &cfg).unwrap().image);
    }

    #[test]
    fn invalid_size_rejected() {
        let cfg = SceneConfig { size: 60, ..Default::default() };
        assert!(make_toy_scene(0, &cfg).is_err());
    }
}
