//! Channel attention blocks sharing one contract: `[N,C,H,W] -> [N,C,H,W]`.

pub mod baselines;
pub mod fbca;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::DEFAULT_LEAKY_SLOPE;
use crate::numerics::params::Parameterized;
use crate::numerics::rng::RngStream;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

pub use baselines::{CoordAttention, Eca, Se};
pub use fbca::{Fbca, FbcaIntermediates, FbcaOverrides, FbcaVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    None,
    Se,
    Eca,
    Coord,
    Fbca,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 5] = [Self::None, Self::Se, Self::Eca, Self::Coord, Self::Fbca];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Se => "se",
            Self::Eca => "eca",
            Self::Coord => "coord",
            Self::Fbca => "fbca",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown attention kind {s:?}")))
    }
}

/// Hyperparameters shared by every attention site of a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    /// Compression ratio of the gate MLPs.
    pub r: usize,
    /// Negative slope shared by the CBLR activation and the gate MLPs.
    pub leaky_slope: f64,
    pub conv_bias: bool,
    pub gate_bias: bool,
    pub include_background: bool,
    /// Adds the input back onto the FBCA output.
    pub residual: bool,
    pub eca_k: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            r: 16,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            conv_bias: true,
            gate_bias: true,
            include_background: true,
            residual: false,
            eca_k: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub enum AttentionBlock {
    None,
    Se(Se),
    Eca(Eca),
    Coord(CoordAttention),
    Fbca(Fbca),
}

impl Parameterized for AttentionBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            Self::None => {}
            Self::Se(b) => b.visit(prefix, f),
            Self::Eca(b) => b.visit(prefix, f),
            Self::Coord(b) => b.visit(prefix, f),
            Self::Fbca(b) => b.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Self::None => {}
            Self::Se(b) => b.visit_mut(prefix, f),
            Self::Eca(b) => b.visit_mut(prefix, f),
            Self::Coord(b) => b.visit_mut(prefix, f),
            Self::Fbca(b) => b.visit_mut(prefix, f),
        }
    }
}

impl AttentionBlock {
    /// `k` is the FBCA map kernel size; other kinds ignore it.
    pub fn new(
        kind: AttentionKind,
        name: &str,
        channels: usize,
        k: usize,
        cfg: &AttentionConfig,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(match kind {
            AttentionKind::None => Self::None,
            AttentionKind::Se => Self::Se(Se::new(channels, cfg.r, rng)?),
            AttentionKind::Eca => Self::Eca(Eca::new(channels, cfg.eca_k, rng)?),
            AttentionKind::Coord => Self::Coord(CoordAttention::new(channels, cfg.r, rng)?),
            AttentionKind::Fbca => Self::Fbca(Fbca::new(name, channels, k, cfg, rng)?),
        })
    }

    pub fn kind(&self) -> AttentionKind {
        match self {
            Self::None => AttentionKind::None,
            Self::Se(_) => AttentionKind::Se,
            Self::Eca(_) => AttentionKind::Eca,
            Self::Coord(_) => AttentionKind::Coord,
            Self::Fbca(_) => AttentionKind::Fbca,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, training: bool) -> Result<Var> {
        match self {
            Self::None => Ok(x),
            Self::Se(b) => b.forward(tape, x),
            Self::Eca(b) => b.forward(tape, x),
            Self::Coord(b) => b.forward(tape, x, training),
            Self::Fbca(b) => Ok(b.forward(tape, x, training)?.0),
        }
    }

    pub fn as_fbca(&self) -> Option<&Fbca> {
        match self {
            Self::Fbca(b) => Some(b),
            _ => None,
        }
    }

    pub fn as_fbca_mut(&mut self) -> Option<&mut Fbca> {
        match self {
            Self::Fbca(b) => Some(b),
            _ => None,
        }
    }

    /// Learnable scalar count from the configuration alone.
    pub fn formula_params(kind: AttentionKind, channels: usize, k: usize, cfg: &AttentionConfig) -> usize {
        match kind {
            AttentionKind::None => 0,
            AttentionKind::Se => Se::formula_params(channels, cfg.r),
            AttentionKind::Eca => Eca::formula_params(cfg.eca_k),
            AttentionKind::Coord => CoordAttention::formula_params(channels, cfg.r),
            AttentionKind::Fbca => Fbca::formula_params(channels, k, cfg),
        }
    }

    /// Multiply-accumulate count of one forward pass on a single sample.
    pub fn formula_macs(kind: AttentionKind, channels: usize, h: usize, w: usize, k: usize, cfg: &AttentionConfig) -> u64 {
        match kind {
            AttentionKind::None => 0,
            AttentionKind::Se => Se::formula_macs(channels, cfg.r),
            AttentionKind::Eca => Eca::formula_macs(channels, cfg.eca_k),
            AttentionKind::Coord => CoordAttention::formula_macs(channels, h, w, cfg.r),
            AttentionKind::Fbca => Fbca::formula_macs(channels, h, w, k, cfg),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_round_trips_through_strings_and_json() {
        for k in AttentionKind::ALL {
            assert_eq!(k.as_str().parse::<AttentionKind>().unwrap(), k);
            let j = serde_json::to_string(&k).unwrap();
            assert_eq!(j, format!("\"{k}\""));
        }
        assert!("cbam".parse::<AttentionKind>().is_err());
    }

    #[test]
    fn fbca_reference_param_count() {
        let cfg = AttentionConfig::default();
        let b = AttentionBlock::new(AttentionKind::Fbca, "f", 64, 5, &cfg, &mut RngStream::new(1)).unwrap();
        // 25*64 conv + 1 bias + 2 BN affine + 2 * (64*4 + 4 + 4*64 + 64)
        assert_eq!(b.param_count(), 1600 + 1 + 2 + 2 * 580);
        assert_eq!(AttentionBlock::formula_params(AttentionKind::Fbca, 64, 5, &cfg), b.param_count());
    }

    #[test]
    fn formula_macs_match_instrumented_counter() {
        let cfg = AttentionConfig { r: 4, ..Default::default() };
        let (c, h, w) = (16, 6, 10);
        let x = Tensor::uniform(&[1, c, h, w], -1.0, 1.0, &mut RngStream::new(2));
        for kind in AttentionKind::ALL {
            let b = AttentionBlock::new(kind, "m", c, 5, &cfg, &mut RngStream::new(3)).unwrap();
            let mut tape = Tape::new();
            let xv = tape.leaf(&x);
            b.forward(&mut tape, xv, false).unwrap();
            assert_eq!(tape.macs(), AttentionBlock::formula_macs(kind, c, h, w, 5, &cfg), "{kind}");
        }
    }

    #[test]
    fn every_kind_preserves_shape() {
        let cfg = AttentionConfig { r: 2, ..Default::default() };
        let x = Tensor::uniform(&[2, 8, 4, 4], -1.0, 1.0, &mut RngStream::new(4));
        for kind in AttentionKind::ALL {
            let b = AttentionBlock::new(kind, "m", 8, 3, &cfg, &mut RngStream::new(5)).unwrap();
            let mut tape = Tape::new();
            let xv = tape.leaf(&x);
            let y = b.forward(&mut tape, xv, true).unwrap();
            assert_eq!(tape.shape(y), x.shape());
        }
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let ok: AttentionConfig = serde_json::from_str(r#"{"r": 4}"#).unwrap();
        assert_eq!(ok.r, 4);
        assert!(ok.include_background);
        assert!(serde_json::from_str::<AttentionConfig>(r#"{"ratio": 4}"#).is_err());
    }
}
