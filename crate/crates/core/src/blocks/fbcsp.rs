//! Cross-stage-partial fusion block with attention at two sites.
//!
//! ```text
//!   x ──1x1──> A ──att1──> bottlenecks ──┐
//!   └──1x1──> B ─────────────────────────┴─ concat ──1x1──> att3 ──> out
//! ```

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBlock, AttentionConfig, AttentionKind};
use crate::error::{Error, Result};
use crate::impl_parameterized;
use crate::numerics::layers::{Activation, ConvBnAct, ConvSpec};
use crate::numerics::rng::RngStream;
use crate::numerics::tape::{Tape, Var};

/// Everything about a fusion block except its channel counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub n_bottlenecks: usize,
    pub hidden_ratio: f64,
    pub fbca_pos1_k: usize,
    pub fbca_pos3_k: usize,
    pub attention_kind: AttentionKind,
    pub attention: AttentionConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            n_bottlenecks: 1,
            hidden_ratio: 0.5,
            fbca_pos1_k: 5,
            fbca_pos3_k: 3,
            attention_kind: AttentionKind::Fbca,
            attention: AttentionConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FbcspConfig {
    pub c_in: usize,
    pub c_out: usize,
    #[serde(default = "default_n")]
    pub n_bottlenecks: usize,
    #[serde(default = "default_ratio")]
    pub hidden_ratio: f64,
    #[serde(default = "default_k1")]
    pub fbca_pos1_k: usize,
    #[serde(default = "default_k3")]
    pub fbca_pos3_k: usize,
    #[serde(default = "default_kind")]
    pub attention_kind: AttentionKind,
    #[serde(default)]
    pub attention: AttentionConfig,
}

fn default_n() -> usize {
    FusionConfig::default().n_bottlenecks
}
fn default_ratio() -> f64 {
    FusionConfig::default().hidden_ratio
}
fn default_k1() -> usize {
    FusionConfig::default().fbca_pos1_k
}
fn default_k3() -> usize {
    FusionConfig::default().fbca_pos3_k
}
fn default_kind() -> AttentionKind {
    AttentionKind::Fbca
}

impl FbcspConfig {
    pub fn new(c_in: usize, c_out: usize, fusion: &FusionConfig) -> Self {
        Self {
            c_in,
            c_out,
            n_bottlenecks: fusion.n_bottlenecks,
            hidden_ratio: fusion.hidden_ratio,
            fbca_pos1_k: fusion.fbca_pos1_k,
            fbca_pos3_k: fusion.fbca_pos3_k,
            attention_kind: fusion.attention_kind,
            attention: fusion.attention,
        }
    }

    pub fn include_background(&self) -> bool {
        self.attention.include_background
    }

    pub fn hidden(&self) -> Result<usize> {
        if !(self.hidden_ratio > 0.0 && self.hidden_ratio <= 1.0) {
            return Err(Error::invalid(format!("hidden_ratio {} outside (0, 1]", self.hidden_ratio)));
        }
        let h = (self.c_out as f64 * self.hidden_ratio).round() as usize;
        if h == 0 {
            return Err(Error::invalid(format!("hidden width rounds to 0 for c_out={}", self.c_out)));
        }
        Ok(h)
    }

    fn validate(&self) -> Result<usize> {
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::invalid("fbcsp: channel counts must be positive"));
        }
        for k in [self.fbca_pos1_k, self.fbca_pos3_k] {
            if k % 2 == 0 {
                return Err(Error::invalid(format!("fbcsp: attention kernel size must be odd, got {k}")));
            }
        }
        self.hidden()
    }
}

/// Two 3x3 ConvBnAct layers with an additive shortcut.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub cv1: ConvBnAct,
    pub cv2: ConvBnAct,
}

impl_parameterized!(Bottleneck { cv1, cv2 });

impl Bottleneck {
    pub fn new(channels: usize, slope: f64, rng: &mut RngStream) -> Result<Self> {
        let spec = ConvSpec::new(channels, channels, 3).activation(Activation::LeakyRelu(slope));
        Ok(Self { cv1: ConvBnAct::new(spec, rng)?, cv2: ConvBnAct::new(spec, rng)? })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, training: bool) -> Result<Var> {
        let y = self.cv1.forward(tape, x, training)?;
        let y = self.cv2.forward(tape, y, training)?;
        tape.add(x, y)
    }
}

#[derive(Clone, Debug)]
pub struct Fbcsp {
    pub cfg: FbcspConfig,
    pub cv_a: ConvBnAct,
    pub cv_b: ConvBnAct,
    pub att1: AttentionBlock,
    pub bottlenecks: Vec<Bottleneck>,
    pub cv_out: ConvBnAct,
    pub att3: AttentionBlock,
}

impl_parameterized!(Fbcsp { cv_a, cv_b, att1, bottlenecks, cv_out, att3 });

impl Fbcsp {
    pub fn new(name: &str, cfg: FbcspConfig, rng: &mut RngStream) -> Result<Self> {
        let hidden = cfg.validate()?;
        let slope = cfg.attention.leaky_slope;
        let act = Activation::LeakyRelu(slope);
        let cv_a = ConvBnAct::new(ConvSpec::new(cfg.c_in, hidden, 1).activation(act), rng)?;
        let cv_b = ConvBnAct::new(ConvSpec::new(cfg.c_in, hidden, 1).activation(act), rng)?;
        let att1 = AttentionBlock::new(cfg.attention_kind, &format!("{name}.pos1"), hidden, cfg.fbca_pos1_k, &cfg.attention, rng)?;
        let bottlenecks = (0..cfg.n_bottlenecks)
            .map(|_| Bottleneck::new(hidden, slope, rng))
            .collect::<Result<Vec<_>>>()?;
        let cv_out = ConvBnAct::new(ConvSpec::new(2 * hidden, cfg.c_out, 1).activation(act), rng)?;
        let att3 = AttentionBlock::new(cfg.attention_kind, &format!("{name}.pos3"), cfg.c_out, cfg.fbca_pos3_k, &cfg.attention, rng)?;
        Ok(Self { cfg, cv_a, cv_b, att1, bottlenecks, cv_out, att3 })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, training: bool) -> Result<Var> {
        let dims = tape.value(x).dims4("fbcsp")?;
        if dims[1] != self.cfg.c_in {
            return Err(Error::shape("fbcsp", format!("{} input channels", self.cfg.c_in), dims[1]));
        }
        let mut a = self.cv_a.forward(tape, x, training)?;
        a = self.att1.forward(tape, a, training)?;
        for b in &self.bottlenecks {
            a = b.forward(tape, a, training)?;
        }
        let b = self.cv_b.forward(tape, x, training)?;
        let cat = tape.concat_channels(&[a, b])?;
        let y = self.cv_out.forward(tape, cat, training)?;
        self.att3.forward(tape, y, training)
    }

    /// Attention sites in forward order.
    pub fn attention_sites_mut(&mut self) -> [&mut AttentionBlock; 2] {
        [&mut self.att1, &mut self.att3]
    }

    pub fn formula_params(cfg: &FbcspConfig) -> Result<usize> {
        let hidden = cfg.validate()?;
        let spec = |ci, co, k| ConvSpec::new(ci, co, k);
        let convs = 2 * ConvBnAct::formula_params(&spec(cfg.c_in, hidden, 1))
            + cfg.n_bottlenecks * 2 * ConvBnAct::formula_params(&spec(hidden, hidden, 3))
            + ConvBnAct::formula_params(&spec(2 * hidden, cfg.c_out, 1));
        let att = AttentionBlock::formula_params(cfg.attention_kind, hidden, cfg.fbca_pos1_k, &cfg.attention)
            + AttentionBlock::formula_params(cfg.attention_kind, cfg.c_out, cfg.fbca_pos3_k, &cfg.attention);
        Ok(convs + att)
    }
}
