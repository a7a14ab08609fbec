//! The toy detector: a small strided backbone, the fusion neck and a
//! single-scale anchor-free head at stride 8.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::blocks::{FusionConfig, Neck, NeckConfig};
use crate::error::{Error, Result};
use crate::impl_parameterized;
use crate::numerics::layers::{Activation, Conv2d, ConvBnAct, ConvSpec};
use crate::numerics::rng::RngStream;
use crate::numerics::tape::{sigmoid, Tape, Var};
use crate::numerics::tensor::Tensor;

use super::metrics::{nms, BBox, Detection};
use super::scene::ToyScene;

pub const HEAD_STRIDE: usize = 8;
/// Objectness plus `(tx, ty, log w/s, log h/s)`.
pub const HEAD_OUTPUTS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stem_channels: usize,
    /// Backbone widths at strides 8, 16, 32.
    pub backbone_channels: [usize; 3],
    pub neck_channels: [usize; 3],
    pub head_channels: usize,
    pub fusion: FusionConfig,
    /// Initial objectness bias as a prior probability.
    pub objectness_prior: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stem_channels: 8,
            backbone_channels: [8, 8, 8],
            neck_channels: [8, 8, 8],
            head_channels: 8,
            fusion: FusionConfig {
                n_bottlenecks: 1,
                attention: AttentionConfig { r: 2, ..Default::default() },
                ..Default::default()
            },
            objectness_prior: 0.5,
        }
    }
}

/// 1/2 average pool, then four 3x3 stride-2 ConvBnAct stages.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: ConvBnAct,
    pub c3: ConvBnAct,
    pub c4: ConvBnAct,
    pub c5: ConvBnAct,
}

impl_parameterized!(Backbone { stem, c3, c4, c5 });

impl Backbone {
    pub fn new(cfg: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        let act = Activation::LeakyRelu(cfg.fusion.attention.leaky_slope);
        let conv = |ci, co, rng: &mut RngStream| ConvBnAct::new(ConvSpec::new(ci, co, 3).stride(2).activation(act), rng);
        let [b3, b4, b5] = cfg.backbone_channels;
        Ok(Self {
            stem: conv(3, cfg.stem_channels, rng)?,
            c3: conv(cfg.stem_channels, b3, rng)?,
            c4: conv(b3, b4, rng)?,
            c5: conv(b4, b5, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, image: Var, training: bool) -> Result<(Var, Var, Var)> {
        let x = tape.avg_pool2x2(image)?;
        let x = self.stem.forward(tape, x, training)?;
        let f3 = self.c3.forward(tape, x, training)?;
        let f4 = self.c4.forward(tape, f3, training)?;
        let f5 = self.c5.forward(tape, f4, training)?;
        Ok((f3, f4, f5))
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    pub conv: ConvBnAct,
    pub pred: Conv2d,
}

impl_parameterized!(Head { conv, pred });

impl Head {
    pub fn new(c_in: usize, hidden: usize, slope: f64, prior: f64, rng: &mut RngStream) -> Result<Self> {
        if !(prior > 0.0 && prior < 1.0) {
            return Err(Error::invalid(format!("objectness prior {prior} outside (0, 1)")));
        }
        let conv = ConvBnAct::new(ConvSpec::new(c_in, hidden, 3).activation(Activation::LeakyRelu(slope)), rng)?;
        let mut pred = Conv2d::new(hidden, HEAD_OUTPUTS, 1, true, rng)?;
        pred.kernel.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        pred.bias.as_mut().expect("pred conv has a bias").data_mut()[0] = (prior / (1.0 - prior)).ln();
        Ok(Self { conv, pred })
    }

    /// Raw `[N, 5, G, G]` map: objectness logit then box regressors.
    pub fn forward(&self, tape: &mut Tape, x: Var, training: bool) -> Result<Var> {
        let h = self.conv.forward(tape, x, training)?;
        self.pred.forward(tape, h)
    }
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub neck: Neck,
    pub head: Head,
}

impl_parameterized!(ToyModel { backbone, neck, head });

impl ToyModel {
    pub fn new(cfg: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        let backbone = Backbone::new(&cfg, rng)?;
        let neck = Neck::new(
            NeckConfig { in_channels: cfg.backbone_channels, out_channels: cfg.neck_channels, fusion: cfg.fusion },
            rng,
        )?;
        let slope = cfg.fusion.attention.leaky_slope;
        let head = Head::new(cfg.neck_channels[0], cfg.head_channels, slope, cfg.objectness_prior, rng)?;
        Ok(Self { cfg, backbone, neck, head })
    }

    pub fn forward(&self, tape: &mut Tape, images: Var, training: bool) -> Result<Var> {
        let (f3, f4, f5) = self.backbone.forward(tape, images, training)?;
        let out = self.neck.forward(tape, f3, f4, f5, training)?;
        self.head.forward(tape, out.f3, training)
    }
}

/// Stacks scene images into `[N, 3, H, W]`.
pub fn stack_images(scenes: &[&ToyScene]) -> Result<Tensor> {
    let first = scenes.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(scenes.len() * first.image.numel());
    for s in scenes {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::shape("stack_images", &shape, s.image.shape()));
        }
        data.extend_from_slice(s.image.data());
    }
    let mut full = vec![scenes.len()];
    full.extend(shape);
    Tensor::new(full, data)
}

/// Dense training targets for one batch on a `g x g` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub objectness: Vec<f64>,
    pub boxes: Vec<f64>,
    /// 1 on positive cells, repeated over the 4 box channels.
    pub box_mask: Vec<f64>,
    pub positives: usize,
}

/// Assigns each GT to the cell containing its center; the first GT listed
/// keeps a contested cell.
pub fn build_targets(boxes: &[&[BBox]], grid: usize) -> Targets {
    let n = boxes.len();
    let cells = grid * grid;
    let mut objectness = vec![0.0; n * cells];
    let mut targets = vec![0.0; n * 4 * cells];
    let mut mask = vec![0.0; n * 4 * cells];
    let mut positives = 0;
    let s = HEAD_STRIDE as f64;
    for (b, gts) in boxes.iter().enumerate() {
        for gt in gts.iter() {
            let (cx, cy) = gt.center();
            let j = ((cx / s).floor() as usize).min(grid - 1);
            let i = ((cy / s).floor() as usize).min(grid - 1);
            let cell = i * grid + j;
            if objectness[b * cells + cell] == 1.0 {
                continue;
            }
            objectness[b * cells + cell] = 1.0;
            positives += 1;
            let t = [cx / s - j as f64, cy / s - i as f64, (gt.w / s).ln(), (gt.h / s).ln()];
            for (k, v) in t.into_iter().enumerate() {
                targets[(b * 4 + k) * cells + cell] = v;
                mask[(b * 4 + k) * cells + cell] = 1.0;
            }
        }
    }
    Targets { objectness, boxes: targets, box_mask: mask, positives }
}

/// Objectness BCE (mean over cells) plus L1 over positive cells' regressors
/// (summed, divided by the positive count).
pub fn detection_loss(tape: &mut Tape, raw: Var, targets: &Targets) -> Result<Var> {
    let obj = tape.slice(raw, 1, 0, 1)?;
    let reg = tape.slice(raw, 1, 1, 4)?;
    let bce = tape.bce_with_logits(obj, targets.objectness.clone())?;
    let denom = targets.positives.max(1) as f64;
    let l1 = tape.masked_l1(reg, targets.boxes.clone(), targets.box_mask.clone(), denom)?;
    tape.add(bce, l1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub min_score: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { min_score: 1e-3, nms_iou: 0.5, max_detections: 100 }
    }
}

/// Turns a raw head map into per-image NMS-filtered detections.
pub fn decode(raw: &Tensor, cfg: &DecodeConfig) -> Result<Vec<Vec<Detection>>> {
    let &[n, c, g, g2] = raw.shape() else {
        return Err(Error::shape("decode", "[N, 5, G, G]", raw.shape()));
    };
    if c != HEAD_OUTPUTS || g != g2 {
        return Err(Error::shape("decode", [n, HEAD_OUTPUTS, g, g], raw.shape()));
    }
    let s = HEAD_STRIDE as f64;
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let mut dets = Vec::new();
        for i in 0..g {
            for j in 0..g {
                let score = sigmoid(raw.at4(b, 0, i, j));
                if score < cfg.min_score {
                    continue;
                }
                let cx = (j as f64 + raw.at4(b, 1, i, j)) * s;
                let cy = (i as f64 + raw.at4(b, 2, i, j)) * s;
                let w = raw.at4(b, 3, i, j).clamp(-4.0, 4.0).exp() * s;
                let h = raw.at4(b, 4, i, j).clamp(-4.0, 4.0).exp() * s;
                dets.push(Detection { bbox: BBox::new(cx - w / 2.0, cy - h / 2.0, w, h), score });
            }
        }
        let mut kept = nms(&dets, cfg.nms_iou);
        kept.truncate(cfg.max_detections);
        out.push(kept);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::Parameterized;

    #[test]
    fn zero_head_gives_half_objectness() {
        let mut rng = RngStream::new(1);
        let mut head = Head::new(4, 4, 0.1, 0.5, &mut rng).unwrap();
        head.pred.visit_mut("", &mut |_, t| t.data_mut().fill(0.0));
        let x = Tensor::uniform(&[1, 4, 3, 3], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let y = head.forward(&mut tape, xv, false).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(sigmoid(tape.value(y).at4(0, 0, i, j)), 0.5);
            }
        }
    }

    #[test]
    fn single_centered_gt_gives_one_positive() {
        let gt = [BBox::new(20.0, 12.0, 8.0, 16.0)];
        let t = build_targets(&[&gt], 8);
        assert_eq!(t.positives, 1);
        assert_eq!(t.objectness.iter().sum::<f64>(), 1.0);
        // center (24, 20) -> cell (2, 3)
        assert_eq!(t.objectness[2 * 8 + 3], 1.0);
        assert_eq!(t.box_mask.iter().sum::<f64>(), 4.0);
        let two = [BBox::new(20.0, 12.0, 8.0, 16.0), BBox::new(21.0, 13.0, 6.0, 14.0)];
        assert_eq!(build_targets(&[&two], 8).positives, 1);
    }

    #[test]
    fn decode_inverts_target_encoding() {
        let gt = BBox::new(13.0, 7.0, 9.0, 22.0);
        let t = build_targets(&[&[gt]], 8);
        let mut raw = vec![-20.0; 64];
        raw.extend_from_slice(&t.boxes);
        for (o, m) in raw[..64].iter_mut().zip(&t.objectness) {
            if *m == 1.0 {
                *o = 5.0;
            }
        }
        let raw = Tensor::new(vec![1, 5, 8, 8], raw).unwrap();
        let dets = decode(&raw, &DecodeConfig::default()).unwrap();
        assert_eq!(dets[0].len(), 1);
        let b = dets[0][0].bbox;
        for (a, e) in [b.x, b.y, b.w, b.h].iter().zip([gt.x, gt.y, gt.w, gt.h]) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn model_output_shape() {
        let model = ToyModel::new(ModelConfig::default(), &mut RngStream::new(2)).unwrap();
        let x = Tensor::uniform(&[2, 3, 64, 64], 0.0, 1.0, &mut RngStream::new(3));
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let y = model.forward(&mut tape, xv, true).unwrap();
        assert_eq!(tape.shape(y), &[2, 5, 8, 8]);
    }
}
