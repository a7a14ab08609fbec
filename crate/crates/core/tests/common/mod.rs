//! Independent reference implementations used by the property tests.
#![allow(dead_code)]

use fbcnet::attention::{AttentionConfig, Fbca};
use fbcnet::evalkit::metrics::{iou, BBox, Detection, DetectionRecord, MrConfig};
use fbcnet::numerics::{RngStream, Tensor};

/// Direct 7-loop convolution with zero padding.
pub fn naive_conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Vec<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, k) = (ws[0], ws[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b_ in 0..n {
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..ci {
                        for u in 0..k {
                            for v in 0..k {
                                let (yi, xj) = ((i * stride + u) as isize - pad as isize, (j * stride + v) as isize - pad as isize);
                                if yi < 0 || xj < 0 || yi >= h as isize || xj >= wd as isize {
                                    continue;
                                }
                                acc += x.at4(b_, c, yi as usize, xj as usize) * w.at4(o, c, u, v);
                            }
                        }
                    }
                    out[((b_ * co + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i * n + j] += a[i * k + t] * b[t * n + j];
            }
        }
    }
    out
}

/// `x[B,I] W[O,I]^T + b`.
pub fn naive_linear(x: &[f64], w: &[f64], b: &[f64], batch: usize, i: usize, o: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * o];
    for r in 0..batch {
        for c in 0..o {
            let mut acc = b[c];
            for t in 0..i {
                acc += x[r * i + t] * w[c * i + t];
            }
            out[r * o + c] = acc;
        }
    }
    out
}

/// Greedy matching recomputed from scratch on the detections with score >= t.
fn tp_fp_at(records: &[DetectionRecord], t: f64, iou_thresh: f64) -> (usize, usize) {
    let (mut tp, mut fp) = (0, 0);
    for r in records {
        let mut kept: Vec<(usize, &Detection)> = r.detections.iter().enumerate().filter(|(_, d)| d.score >= t).collect();
        kept.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0)));
        let mut used = vec![false; r.ground_truth.len()];
        for (_, d) in kept {
            let mut best = None;
            let mut best_iou = -1.0;
            for (g, gt) in r.ground_truth.iter().enumerate() {
                let o = iou(&d.bbox, gt);
                if !used[g] && o >= iou_thresh && o > best_iou {
                    best = Some(g);
                    best_iou = o;
                }
            }
            match best {
                Some(g) => {
                    used[g] = true;
                    tp += 1;
                }
                None => fp += 1,
            }
        }
    }
    (tp, fp)
}

/// Log-average miss rate by enumerating every distinct score threshold.
pub fn brute_mr2(records: &[DetectionRecord], cfg: &MrConfig) -> f64 {
    let n_gt: usize = records.iter().map(|r| r.ground_truth.len()).sum();
    let n_img = records.len() as f64;
    let mut thresholds: Vec<f64> = records.iter().flat_map(|r| r.detections.iter().map(|d| d.score)).collect();
    thresholds.push(f64::INFINITY);
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let (tp, fp) = tp_fp_at(records, t, cfg.iou_thresh);
            (fp as f64 / n_img, 1.0 - tp as f64 / n_gt as f64)
        })
        .collect();
    let refs: Vec<f64> = (0..cfg.points)
        .map(|i| 10f64.powf(-2.0 + 2.0 * i as f64 / (cfg.points - 1) as f64))
        .collect();
    let mut log_sum = 0.0;
    for r in &refs {
        // largest fppi not above the reference; among equal fppi, the lowest threshold
        let mut pick: Option<(f64, f64)> = None;
        for &(f, m) in &points {
            if f <= *r && pick.map_or(true, |(pf, _)| f >= pf) {
                pick = Some((f, m));
            }
        }
        let m = pick.map_or(1.0, |p| p.1);
        log_sum += m.max(cfg.floor).ln();
    }
    (log_sum / refs.len() as f64).exp()
}

/// Up to `max_images` images with jittered true detections, random false
/// ones and scores on a coarse grid so that ties occur.
pub fn random_records(rng: &mut RngStream, max_images: usize) -> Vec<DetectionRecord> {
    loop {
        let n = rng.range_inclusive(1, max_images);
        let recs: Vec<DetectionRecord> = (0..n)
            .map(|_| {
                let gts: Vec<BBox> = (0..rng.range_inclusive(0, 3))
                    .map(|_| BBox::new(rng.uniform(0.0, 50.0), rng.uniform(0.0, 40.0), rng.uniform(4.0, 12.0), rng.uniform(10.0, 24.0)))
                    .collect();
                let mut dets = Vec::new();
                for g in &gts {
                    for _ in 0..rng.range_inclusive(0, 2) {
                        let j = rng.uniform(-3.0, 3.0);
                        dets.push(Detection { bbox: BBox::new(g.x + j, g.y + j, g.w, g.h), score: (rng.uniform(0.0, 1.0) * 10.0).round() / 10.0 });
                    }
                }
                for _ in 0..rng.range_inclusive(0, 3) {
                    dets.push(Detection {
                        bbox: BBox::new(rng.uniform(0.0, 60.0), rng.uniform(0.0, 50.0), rng.uniform(4.0, 12.0), rng.uniform(10.0, 24.0)),
                        score: (rng.uniform(0.0, 1.0) * 10.0).round() / 10.0,
                    });
                }
                let mut r = DetectionRecord { detections: dets, ground_truth: gts };
                r.sort();
                r
            })
            .collect();
        if recs.iter().any(|r| !r.ground_truth.is_empty()) {
            return recs;
        }
    }
}

/// Copy of `block` acting on channel-permuted inputs: input channel `perm[c]`
/// of the new block plays the role of channel `c` of the old one.
pub fn permute_fbca(block: &Fbca, perm: &[usize]) -> Fbca {
    let mut out = block.clone();
    let c = block.channels;
    let k = block.k;
    let src = block.cblr.kernel.data();
    let dst = out.cblr.kernel.data_mut();
    for old in 0..c {
        let new = perm[old];
        dst[new * k * k..(new + 1) * k * k].copy_from_slice(&src[old * k * k..(old + 1) * k * k]);
    }
    let gates = [(&block.fore_gate, &mut out.fore_gate)];
    let mut pairs: Vec<_> = gates.into_iter().collect();
    if let (Some(a), Some(b)) = (&block.back_gate, out.back_gate.as_mut()) {
        pairs.push((a, b));
    }
    for (a, b) in pairs {
        let h = a.hidden();
        for old in 0..c {
            let new = perm[old];
            for j in 0..h {
                b.w1.data_mut()[j * c + new] = a.w1.data()[j * c + old];
                b.w2.data_mut()[new * h + j] = a.w2.data()[old * h + j];
            }
            if let (Some(ab), Some(bb)) = (&a.b2, b.b2.as_mut()) {
                bb.data_mut()[new] = ab.data()[old];
            }
        }
    }
    out
}

/// `x` with channel `c` moved to `perm[c]`.
pub fn permute_channels(x: &Tensor, perm: &[usize]) -> Tensor {
    let s = x.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = vec![0.0; x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            out[(b * c + perm[ch]) * hw..(b * c + perm[ch] + 1) * hw].copy_from_slice(src);
        }
    }
    Tensor::new(s.to_vec(), out).unwrap()
}

pub fn random_fbca(rng: &mut RngStream, channels: usize, k: usize, r: usize, background: bool) -> Fbca {
    let cfg = AttentionConfig { r, include_background: background, ..Default::default() };
    let mut b = Fbca::new("p", channels, k, &cfg, rng).unwrap();
    // non-trivial BN statistics and biases
    for t in [&mut b.cblr.bn.gamma, &mut b.cblr.bn.beta, &mut b.cblr.bn.running_mean] {
        for v in t.data_mut() {
            *v += rng.uniform(-0.5, 0.5);
        }
    }
    if let Some(cb) = b.cblr.conv_bias.as_mut() {
        cb.data_mut()[0] = rng.uniform(-0.5, 0.5);
    }
    b
}
