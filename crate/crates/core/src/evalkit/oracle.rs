//! A detector with no learning: threshold the gray image, take 4-connected
//! components and keep the upright elongated ones.

use serde::{Deserialize, Serialize};

use super::metrics::{BBox, Detection};
use super::scene::ToyScene;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdOracle {
    pub threshold: f64,
    /// Keep components with `h >= min_aspect * w`.
    pub min_aspect: f64,
    pub min_pixels: usize,
}

impl Default for ThresholdOracle {
    fn default() -> Self {
        Self { threshold: 0.5, min_aspect: 1.5, min_pixels: 4 }
    }
}

impl ThresholdOracle {
    /// Detections scored by mean component intensity.
    pub fn detect(&self, scene: &ToyScene) -> Vec<Detection> {
        let shape = scene.image.shape();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let data = scene.image.data();
        let gray: Vec<f64> = (0..h * w).map(|p| (0..c).map(|ch| data[ch * h * w + p]).sum::<f64>() / c as f64).collect();
        let mut seen = vec![false; h * w];
        let mut out = Vec::new();
        let mut stack = Vec::new();
        for start in 0..h * w {
            if seen[start] || gray[start] <= self.threshold {
                continue;
            }
            seen[start] = true;
            stack.push(start);
            let (mut i0, mut i1, mut j0, mut j1) = (h, 0, w, 0);
            let (mut n, mut sum) = (0usize, 0.0);
            while let Some(p) = stack.pop() {
                let (i, j) = (p / w, p % w);
                i0 = i0.min(i);
                i1 = i1.max(i);
                j0 = j0.min(j);
                j1 = j1.max(j);
                n += 1;
                sum += gray[p];
                let mut push = |q: usize| {
                    if !seen[q] && gray[q] > self.threshold {
                        seen[q] = true;
                        stack.push(q);
                    }
                };
                if i > 0 {
                    push(p - w);
                }
                if i + 1 < h {
                    push(p + w);
                }
                if j > 0 {
                    push(p - 1);
                }
                if j + 1 < w {
                    push(p + 1);
                }
            }
            let (bw, bh) = ((j1 - j0 + 1) as f64, (i1 - i0 + 1) as f64);
            if n >= self.min_pixels && bh >= self.min_aspect * bw {
                out.push(Detection { bbox: BBox::new(j0 as f64, i0 as f64, bw, bh), score: (sum / n as f64).clamp(0.0, 1.0) });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::scene::{make_toy_scene, SceneConfig};

    #[test]
    fn finds_bright_blobs_and_skips_round_ones() {
        let cfg = SceneConfig { foreground_override: Some(1.0), distractor_min: 0.9, ..Default::default() };
        let sc = make_toy_scene(5, &cfg).unwrap();
        let dets = ThresholdOracle::default().detect(&sc);
        assert_eq!(dets.len(), sc.boxes.len());
        for d in &dets {
            assert!(d.bbox.h >= 1.5 * d.bbox.w);
        }
    }
}
