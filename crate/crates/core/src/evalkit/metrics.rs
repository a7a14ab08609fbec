//! Boxes, IoU, greedy matching, NMS and the log-average miss rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `(x, y, w, h)` in pixels, `(x, y)` the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// True when the boxes share interior area after growing `self` by `margin`.
    pub fn overlaps(&self, other: &BBox, margin: f64) -> bool {
        self.x - margin < other.x + other.w
            && other.x < self.x + self.w + margin
            && self.y - margin < other.y + other.h
            && other.y < self.y + self.h + margin
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (aa, ab) = (a.area(), b.area());
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let iw = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let ih = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (aa + ab - inter)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

/// Detections and ground truth of one image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<BBox>,
}

impl DetectionRecord {
    /// Sorts detections by descending score; equal scores keep their order.
    pub fn sort(&mut self) {
        self.detections.sort_by(|a, b| b.score.total_cmp(&a.score));
    }
}

/// Indices of `dets` in descending score order, ties by lower index.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Matched GT index per detection (input order).
    pub assignment: Vec<Option<usize>>,
}

/// Greedy matching: detections in descending score order each take the
/// unmatched GT of highest IoU (ties by lower GT index) if it reaches `thresh`.
pub fn match_detections(dets: &[Detection], gts: &[BBox], thresh: f64) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut assignment = vec![None; dets.len()];
    let mut tp = 0;
    for i in score_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let o = iou(&dets[i].bbox, gt);
            if o >= thresh && best.map_or(true, |(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            assignment[i] = Some(g);
            tp += 1;
        }
    }
    MatchResult { tp, fp: dets.len() - tp, fn_: gts.len() - tp, assignment }
}

/// Greedy non-maximum suppression; returns survivors in descending score order.
pub fn nms(dets: &[Detection], thresh: f64) -> Vec<Detection> {
    let mut keep: Vec<Detection> = Vec::new();
    for i in score_order(dets) {
        if keep.iter().all(|k| iou(&k.bbox, &dets[i].bbox) <= thresh) {
            keep.push(dets[i]);
        }
    }
    keep
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MrConfig {
    pub iou_thresh: f64,
    /// Number of log-uniform FPPI reference points in `[fppi_min, fppi_max]`.
    pub points: usize,
    pub fppi_min: f64,
    pub fppi_max: f64,
    /// Miss rates are floored here before taking logs.
    pub floor: f64,
}

impl Default for MrConfig {
    fn default() -> Self {
        Self { iou_thresh: 0.5, points: 9, fppi_min: 1e-2, fppi_max: 1.0, floor: 1e-10 }
    }
}

impl MrConfig {
    pub fn reference_points(&self) -> Vec<f64> {
        let (lo, hi) = (self.fppi_min.log10(), self.fppi_max.log10());
        if self.points == 1 {
            return vec![self.fppi_max];
        }
        (0..self.points)
            .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (self.points - 1) as f64))
            .collect()
    }
}

/// One point of the miss-rate / FPPI curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fppi: f64,
    pub miss_rate: f64,
}

fn total_gt(records: &[DetectionRecord]) -> Result<usize> {
    if records.is_empty() {
        return Err(Error::invalid("mr2: no images"));
    }
    let n: usize = records.iter().map(|r| r.ground_truth.len()).sum();
    if n == 0 {
        return Err(Error::NoGroundTruth);
    }
    Ok(n)
}

/// Miss rate against FPPI, one point per distinct score threshold, preceded by
/// the empty-detection point `(fppi 0, miss rate 1)`.
pub fn miss_rate_curve(records: &[DetectionRecord], iou_thresh: f64) -> Result<Vec<CurvePoint>> {
    let n_gt = total_gt(records)? as f64;
    let n_img = records.len() as f64;
    // Thresholding keeps a score-prefix of each image; greedy matching of a
    // prefix is the prefix of the full greedy matching.
    let mut flagged: Vec<(f64, bool)> = Vec::new();
    for r in records {
        let m = match_detections(&r.detections, &r.ground_truth, iou_thresh);
        for (d, a) in r.detections.iter().zip(&m.assignment) {
            flagged.push((d.score, a.is_some()));
        }
    }
    flagged.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = vec![CurvePoint { threshold: f64::INFINITY, fppi: 0.0, miss_rate: 1.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < flagged.len() {
        let s = flagged[i].0;
        while i < flagged.len() && flagged[i].0 == s {
            if flagged[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push(CurvePoint { threshold: s, fppi: fp as f64 / n_img, miss_rate: 1.0 - tp as f64 / n_gt });
    }
    Ok(curve)
}

/// Miss rate sampled at each reference FPPI: the curve point of largest FPPI
/// not exceeding the reference (lowest miss rate among equal FPPI).
pub fn sampled_miss_rates(curve: &[CurvePoint], refs: &[f64]) -> Vec<f64> {
    refs.iter()
        .map(|&r| {
            curve
                .iter()
                .filter(|p| p.fppi <= r)
                .map(|p| p.miss_rate)
                .fold(1.0, f64::min)
        })
        .collect()
}

/// Log-average miss rate over the configured FPPI range.
pub fn mr2(records: &[DetectionRecord], cfg: &MrConfig) -> Result<f64> {
    let curve = miss_rate_curve(records, cfg.iou_thresh)?;
    let rates = sampled_miss_rates(&curve, &cfg.reference_points());
    let mean_log = rates.iter().map(|m| m.max(cfg.floor).ln()).sum::<f64>() / rates.len() as f64;
    Ok(mean_log.exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, y: f64, s: f64) -> Detection {
        Detection { bbox: BBox::new(x, y, 10.0, 20.0), score: s }
    }

    #[test]
    fn iou_cases() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert!((iou(&a, &BBox::new(1.0, 1.0, 2.0, 2.0)) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou(&a, &BBox::new(0.0, 0.0, 0.0, 2.0)), 0.0);
    }

    #[test]
    fn greedy_matching_prefers_higher_scores() {
        let gts = [BBox::new(0.0, 0.0, 10.0, 20.0)];
        let dets = [det(1.0, 0.0, 0.6), det(0.0, 0.0, 0.9)];
        let m = match_detections(&dets, &gts, 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 0));
        assert_eq!(m.assignment, vec![None, Some(0)]);
        // equal scores: lower index wins
        let dets = [det(1.0, 0.0, 0.9), det(0.0, 0.0, 0.9)];
        assert_eq!(match_detections(&dets, &gts, 0.5).assignment, vec![Some(0), None]);
    }

    #[test]
    fn nms_suppresses_overlaps() {
        let dets = [det(0.0, 0.0, 0.5), det(1.0, 0.0, 0.9), det(40.0, 0.0, 0.7)];
        let kept = nms(&dets, 0.5);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(kept[1].score, 0.7);
    }

    #[test]
    fn reference_points_are_log_uniform() {
        let r = MrConfig::default().reference_points();
        assert_eq!(r.len(), 9);
        assert!((r[0] - 0.01).abs() < 1e-15 && (r[8] - 1.0).abs() < 1e-15);
        assert!((r[4] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn endpoints() {
        let gt = vec![BBox::new(0.0, 0.0, 10.0, 20.0)];
        let perfect = vec![DetectionRecord { detections: vec![det(0.0, 0.0, 1.0)], ground_truth: gt.clone() }];
        assert!((mr2(&perfect, &MrConfig::default()).unwrap() - 1e-10).abs() < 1e-20);
        let empty = vec![DetectionRecord { detections: vec![], ground_truth: gt }];
        assert_eq!(mr2(&empty, &MrConfig::default()).unwrap(), 1.0);
        let no_gt = vec![DetectionRecord::default()];
        assert!(matches!(mr2(&no_gt, &MrConfig::default()), Err(Error::NoGroundTruth)));
    }

    #[test]
    fn two_image_hand_case() {
        // img1: GT matched at .9, FP at .8; img2: GT missed.
        let recs = vec![
            DetectionRecord {
                detections: vec![det(0.0, 0.0, 0.9), det(50.0, 50.0, 0.8)],
                ground_truth: vec![BBox::new(0.0, 0.0, 10.0, 20.0)],
            },
            DetectionRecord { detections: vec![], ground_truth: vec![BBox::new(0.0, 0.0, 10.0, 20.0)] },
        ];
        // curve: (0, 1), (0, .5) at .9, (.5, .5) at .8 -> every reference sees .5
        let v = mr2(&recs, &MrConfig::default()).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
    }
}
