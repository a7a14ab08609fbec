//! SGDW training of the toy detector, per-epoch evaluation and logging.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::numerics::params::Parameterized;
use crate::numerics::rng::{derive_seed, RngStream};
use crate::numerics::tape::Tape;
use crate::numerics::tensor::Tensor;

use super::dataset::{Dataset, Split};
use super::metrics::{mr2, DetectionRecord, MrConfig};
use super::model::{build_targets, decode, detection_loss, stack_images, DecodeConfig, ModelConfig, ToyModel, HEAD_STRIDE};
use super::scene::{SceneConfig, ToyScene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to 0 over the run, stepped per epoch.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub attention_kind: AttentionKind,
    pub include_background: bool,
    pub residual: bool,
    pub schedule: LrSchedule,
    /// Evaluate every this many epochs; epoch 0 and the last epoch always are.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 500,
            batch_size: 8,
            seed: 42,
            attention_kind: AttentionKind::Fbca,
            include_background: true,
            residual: false,
            schedule: LrSchedule::Constant,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.lr, self.momentum, self.weight_decay].iter().all(|v| v.is_finite() && *v >= 0.0);
        if !finite || self.momentum >= 1.0 {
            return Err(Error::invalid("train config: lr and weight_decay must be >= 0, momentum in [0, 1)"));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::invalid("train config: batch_size and eval_every must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = (epoch.saturating_sub(1)) as f64 / self.epochs.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Everything a toy run depends on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Experiment {
    /// Attention kind, background path and residual flag are taken from
    /// `train`, not from `model.fusion`.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scene: SceneConfig,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub decode: DecodeConfig,
    pub mr: MrConfig,
}

impl Default for Experiment {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            scene: SceneConfig::default(),
            train_scenes: 200,
            eval_scenes: 100,
            decode: DecodeConfig::default(),
            mr: MrConfig::default(),
        }
    }
}

impl Experiment {
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model;
        m.fusion.attention_kind = self.train.attention_kind;
        m.fusion.attention.include_background = self.train.include_background;
        m.fusion.attention.residual = self.train.residual;
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.scene.validate()?;
        if self.train_scenes == 0 || self.eval_scenes == 0 {
            return Err(Error::invalid("experiment: scene counts must be positive"));
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<ToyModel> {
        ToyModel::new(self.model_config(), &mut RngStream::new(derive_seed(self.train.seed, &[2])))
    }

    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let train = Dataset::generate(self.train.seed, Split::Train, self.train_scenes, &self.scene)?;
        let eval = Dataset::generate(self.train.seed, Split::Eval, self.eval_scenes, &self.scene)?;
        Ok((train, eval))
    }
}

/// Momentum SGD with decoupled weight decay:
/// `v = mu * v + g; p -= lr * v + lr * wd * p`. Decay applies to tensors of
/// rank >= 2 only.
#[derive(Clone, Debug, Default)]
pub struct Sgdw {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgdw {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    /// Updates every trainable tensor from its stored gradient.
    pub fn step<P: Parameterized + ?Sized>(&mut self, model: &mut P, lr: f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        let vel = &mut self.velocity;
        let mut i = 0;
        model.visit_mut("", &mut |_, t| {
            if !t.requires_grad() {
                return;
            }
            let g = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
            if vel.len() <= i {
                vel.push(vec![0.0; t.numel()]);
            }
            let v = &mut vel[i];
            let decay = if t.shape().len() >= 2 { wd } else { 0.0 };
            for ((p, v), g) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + g;
                *p -= lr * *v + lr * decay * *p;
            }
            i += 1;
        });
    }
}

/// Copies of every tensor's data, in traversal order.
pub fn snapshot<P: Parameterized + ?Sized>(model: &P) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    model.visit("", &mut |_, t| out.push(t.data().to_vec()));
    out
}

pub fn restore<P: Parameterized + ?Sized>(model: &mut P, snap: &[Vec<f64>]) {
    let mut i = 0;
    model.visit_mut("", &mut |_, t| {
        t.data_mut().copy_from_slice(&snap[i]);
        i += 1;
    });
}

/// Means of one FBCA site's channel vectors over a batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SiteStats {
    pub mean_abs_dw: f64,
    pub mean_cf: f64,
    /// NaN when the site has no background path.
    pub mean_cb: f64,
}

/// Reads `c_fore`, `c_back` and `d_w` probes off a tape, per site.
pub fn site_stats(tape: &Tape) -> BTreeMap<String, SiteStats> {
    let mut acc: BTreeMap<String, [Option<f64>; 3]> = BTreeMap::new();
    let mean = |t: &Tensor, f: fn(f64) -> f64| t.data().iter().map(|&v| f(v)).sum::<f64>() / t.numel() as f64;
    for p in tape.probes() {
        let e = acc.entry(p.site.clone()).or_default();
        let v = tape.value(p.var);
        match p.field {
            "d_w" => e[0] = Some(mean(v, f64::abs)),
            "c_fore" => e[1] = Some(mean(v, |x| x)),
            "c_back" => e[2] = Some(mean(v, |x| x)),
            _ => {}
        }
    }
    acc.into_iter()
        .filter_map(|(k, [dw, cf, cb])| {
            Some((k, SiteStats { mean_abs_dw: dw?, mean_cf: cf?, mean_cb: cb.unwrap_or(f64::NAN) }))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub mr2: f64,
    pub records: Vec<DetectionRecord>,
    pub sites: BTreeMap<String, SiteStats>,
}

impl Evaluation {
    fn site_mean(&self, f: impl Fn(&SiteStats) -> f64) -> f64 {
        if self.sites.is_empty() {
            return f64::NAN;
        }
        self.sites.values().map(f).sum::<f64>() / self.sites.len() as f64
    }

    pub fn mean_abs_dw(&self) -> f64 {
        self.site_mean(|s| s.mean_abs_dw)
    }

    pub fn mean_cf(&self) -> f64 {
        self.site_mean(|s| s.mean_cf)
    }

    pub fn mean_cb(&self) -> f64 {
        self.site_mean(|s| s.mean_cb)
    }
}

fn batches(n: usize, batch: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).step_by(batch).map(move |s| s..(s + batch).min(n))
}

fn grid_of(scene: &ToyScene) -> usize {
    scene.image.shape()[1] / HEAD_STRIDE
}

/// Eval-mode forward over a dataset, batched. Site statistics are averaged
/// over batches weighted by batch size.
pub fn evaluate(model: &ToyModel, data: &Dataset, batch: usize, dec: &DecodeConfig, mr: &MrConfig) -> Result<Evaluation> {
    let mut records = Vec::with_capacity(data.len());
    let mut sums: BTreeMap<String, [f64; 3]> = BTreeMap::new();
    for range in batches(data.len(), batch.max(1)) {
        let scenes: Vec<&ToyScene> = data.scenes[range.clone()].iter().collect();
        let mut tape = Tape::new();
        let x = tape.constant(stack_images(&scenes)?);
        let raw = model.forward(&mut tape, x, false)?;
        for (dets, s) in decode(tape.value(raw), dec)?.into_iter().zip(&scenes) {
            let mut r = DetectionRecord { detections: dets, ground_truth: s.boxes.clone() };
            r.sort();
            records.push(r);
        }
        let w = range.len() as f64;
        for (site, st) in site_stats(&tape) {
            let e = sums.entry(site).or_default();
            e[0] += w * st.mean_abs_dw;
            e[1] += w * st.mean_cf;
            e[2] += w * st.mean_cb;
        }
    }
    let n = data.len() as f64;
    let sites = sums
        .into_iter()
        .map(|(k, [a, b, c])| (k, SiteStats { mean_abs_dw: a / n, mean_cf: b / n, mean_cb: c / n }))
        .collect();
    Ok(Evaluation { mr2: mr2(&records, mr)?, records, sites })
}

/// One training-mode forward over a batch; returns the tape and loss var.
fn batch_loss(model: &ToyModel, scenes: &[&ToyScene]) -> Result<(Tape, crate::numerics::tape::Var)> {
    let mut tape = Tape::new();
    let x = tape.constant(stack_images(scenes)?);
    let raw = model.forward(&mut tape, x, true)?;
    let boxes: Vec<&[_]> = scenes.iter().map(|s| s.boxes.as_slice()).collect();
    let targets = build_targets(&boxes, grid_of(scenes[0]));
    let loss = detection_loss(&mut tape, raw, &targets)?;
    Ok((tape, loss))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub eval: Option<Evaluation>,
}

impl EpochLog {
    fn eval_field(&self, f: impl Fn(&Evaluation) -> f64) -> f64 {
        self.eval.as_ref().map_or(f64::NAN, f)
    }

    pub fn mr2(&self) -> f64 {
        self.eval_field(|e| e.mr2)
    }

    pub fn separation(&self) -> f64 {
        self.eval_field(|e| e.mean_cf() - e.mean_cb())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub const METRICS_HEADER: &'static str = "epoch,loss,mr2,mean_abs_dw,mean_cf,mean_cb";

    /// `epoch,loss,mr2,mean_abs_dw,mean_cf,mean_cb`; blank eval columns read NaN.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(Self::METRICS_HEADER);
        s.push('\n');
        for e in &self.epochs {
            let ev = |f: fn(&Evaluation) -> f64| e.eval_field(f);
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                e.epoch,
                e.loss,
                ev(|x| x.mr2),
                ev(Evaluation::mean_abs_dw),
                ev(Evaluation::mean_cf),
                ev(Evaluation::mean_cb)
            );
        }
        s
    }

    /// `epoch,site,mean_abs_dw,mean_cf,mean_cb` for evaluated epochs.
    pub fn sites_csv(&self) -> String {
        let mut s = String::from("epoch,site,mean_abs_dw,mean_cf,mean_cb\n");
        for e in &self.epochs {
            if let Some(ev) = &e.eval {
                for (site, st) in &ev.sites {
                    let _ = writeln!(s, "{},{},{},{},{}", e.epoch, site, st.mean_abs_dw, st.mean_cf, st.mean_cb);
                }
            }
        }
        s
    }

    pub fn last_eval(&self) -> Option<&EpochLog> {
        self.epochs.iter().rev().find(|e| e.eval.is_some())
    }
}

/// Hooks into a running train loop.
pub trait TrainObserver {
    fn on_epoch(&mut self, _log: &EpochLog) {}
}

impl TrainObserver for () {}

impl<F: FnMut(&EpochLog)> TrainObserver for F {
    fn on_epoch(&mut self, log: &EpochLog) {
        self(log)
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. })
}

/// Trains `model` in place. Epoch 0 reports the training-mode loss of the
/// untouched model over the training set without updating anything. On a
/// non-finite loss the model is rolled back to the start of the failing
/// epoch and `Error::Diverged` is returned.
pub fn train(
    model: &mut ToyModel,
    train_set: &Dataset,
    eval_set: &Dataset,
    exp: &Experiment,
    observer: &mut dyn TrainObserver,
) -> Result<TrainLog> {
    exp.validate()?;
    let cfg = &exp.train;
    let mut opt = Sgdw::new(cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle = RngStream::new(derive_seed(cfg.seed, &[3]));
    let mut log = TrainLog::default();

    let mut epoch0 = 0.0;
    for range in batches(order.len(), cfg.batch_size) {
        let scenes: Vec<&ToyScene> = train_set.scenes[range.clone()].iter().collect();
        let (tape, loss) = batch_loss(model, &scenes)?;
        epoch0 += tape.scalar(loss) * range.len() as f64;
    }
    let eval = evaluate(model, eval_set, cfg.batch_size, &exp.decode, &exp.mr)?;
    let first = EpochLog { epoch: 0, loss: epoch0 / order.len() as f64, lr: 0.0, eval: Some(eval) };
    observer.on_epoch(&first);
    log.epochs.push(first);

    for epoch in 1..=cfg.epochs {
        let good = snapshot(model);
        shuffle.shuffle(&mut order);
        let lr = cfg.lr_at(epoch);
        let mut total = 0.0;
        let step = (|| -> Result<Option<Evaluation>> {
            for range in batches(order.len(), cfg.batch_size) {
                let scenes: Vec<&ToyScene> = order[range.clone()].iter().map(|&i| &train_set.scenes[i]).collect();
                let (mut tape, loss) = batch_loss(model, &scenes)?;
                let l = tape.scalar(loss);
                total += l * range.len() as f64;
                tape.backward(loss)?;
                model.pull_grads(&tape);
                model.apply_bn_updates(&tape);
                opt.step(model, lr);
            }
            let mut finite = true;
            model.visit("", &mut |_, t| finite &= t.all_finite());
            if !finite {
                return Err(Error::NonFinite { op: "sgdw" });
            }
            if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
                return Ok(Some(evaluate(model, eval_set, cfg.batch_size, &exp.decode, &exp.mr)?));
            }
            Ok(None)
        })();
        let eval = match step {
            Ok(eval) => eval,
            Err(e) if is_divergence(&e) => {
                restore(model, &good);
                log::warn!("epoch {epoch}: {e}; restored parameters from epoch {}", epoch - 1);
                return Err(Error::Diverged { epoch });
            }
            Err(e) => return Err(e),
        };
        let entry = EpochLog { epoch, loss: total / order.len() as f64, lr, eval };
        log::debug!("epoch {epoch} loss {:.6} mr2 {:.4}", entry.loss, entry.mr2());
        observer.on_epoch(&entry);
        log.epochs.push(entry);
    }
    Ok(log)
}
