//! Three-level top-down + bottom-up fusion neck.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::impl_parameterized;
use crate::numerics::layers::{Activation, ConvBnAct, ConvSpec};
use crate::numerics::rng::RngStream;
use crate::numerics::tape::{Tape, Var};

use super::fbcsp::{Fbcsp, FbcspConfig, FusionConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeckConfig {
    /// `[C3, C4, C5]` at strides 8, 16, 32.
    pub in_channels: [usize; 3],
    pub out_channels: [usize; 3],
    #[serde(default)]
    pub fusion: FusionConfig,
}

/// 3x3 stride-2 ConvBnAct.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: ConvBnAct,
}

impl_parameterized!(Downsample { conv });

impl Downsample {
    pub fn new(c_in: usize, c_out: usize, slope: f64, rng: &mut RngStream) -> Result<Self> {
        let spec = ConvSpec::new(c_in, c_out, 3).stride(2).activation(Activation::LeakyRelu(slope));
        Ok(Self { conv: ConvBnAct::new(spec, rng)? })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, training: bool) -> Result<Var> {
        let [_, _, h, w] = tape.value(x).dims4("downsample")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(format!("downsample: odd spatial extent {h}x{w}")));
        }
        self.conv.forward(tape, x, training)
    }
}

/// Nearest-neighbour x2 upsampling.
pub fn upsample(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.upsample2x(x)
}

#[derive(Clone, Debug)]
pub struct Neck {
    pub cfg: NeckConfig,
    pub top4: Fbcsp,
    pub top3: Fbcsp,
    pub down3: Downsample,
    pub bottom4: Fbcsp,
    pub down4: Downsample,
    pub bottom5: Fbcsp,
}

impl_parameterized!(Neck { top4, top3, down3, bottom4, down4, bottom5 });

#[derive(Clone, Copy, Debug)]
pub struct NeckOutputs {
    pub f3: Var,
    pub f4: Var,
    pub f5: Var,
}

impl Neck {
    pub fn new(cfg: NeckConfig, rng: &mut RngStream) -> Result<Self> {
        let [c3, c4, c5] = cfg.in_channels;
        let [o3, o4, o5] = cfg.out_channels;
        if cfg.in_channels.contains(&0) || cfg.out_channels.contains(&0) {
            return Err(Error::invalid("neck: channel counts must be positive"));
        }
        let f = &cfg.fusion;
        let slope = f.attention.leaky_slope;
        Ok(Self {
            top4: Fbcsp::new("top4", FbcspConfig::new(c5 + c4, o4, f), rng)?,
            top3: Fbcsp::new("top3", FbcspConfig::new(o4 + c3, o3, f), rng)?,
            down3: Downsample::new(o3, o3, slope, rng)?,
            bottom4: Fbcsp::new("bottom4", FbcspConfig::new(o3 + o4, o4, f), rng)?,
            down4: Downsample::new(o4, o4, slope, rng)?,
            bottom5: Fbcsp::new("bottom5", FbcspConfig::new(o4 + c5, o5, f), rng)?,
            cfg,
        })
    }

    pub fn fusions(&self) -> [&Fbcsp; 4] {
        [&self.top4, &self.top3, &self.bottom4, &self.bottom5]
    }

    pub fn fusions_mut(&mut self) -> [&mut Fbcsp; 4] {
        [&mut self.top4, &mut self.top3, &mut self.bottom4, &mut self.bottom5]
    }

    pub fn forward(&self, tape: &mut Tape, f3: Var, f4: Var, f5: Var, training: bool) -> Result<NeckOutputs> {
        let d3 = tape.value(f3).dims4("neck")?;
        let d4 = tape.value(f4).dims4("neck")?;
        let d5 = tape.value(f5).dims4("neck")?;
        let ratio_ok = d3[2] == 2 * d4[2] && d3[3] == 2 * d4[3] && d4[2] == 2 * d5[2] && d4[3] == 2 * d5[3];
        if !ratio_ok || d3[0] != d4[0] || d4[0] != d5[0] {
            return Err(Error::shape("neck", "4:2:1 spatial pyramid", vec![d3, d4, d5]));
        }
        let u5 = upsample(tape, f5)?;
        let cat = tape.concat_channels(&[u5, f4])?;
        let p4 = self.top4.forward(tape, cat, training)?;
        let u4 = upsample(tape, p4)?;
        let cat = tape.concat_channels(&[u4, f3])?;
        let p3 = self.top3.forward(tape, cat, training)?;

        let d = self.down3.forward(tape, p3, training)?;
        let cat = tape.concat_channels(&[d, p4])?;
        let n4 = self.bottom4.forward(tape, cat, training)?;
        let d = self.down4.forward(tape, n4, training)?;
        let cat = tape.concat_channels(&[d, f5])?;
        let n5 = self.bottom5.forward(tape, cat, training)?;
        Ok(NeckOutputs { f3: p3, f4: n4, f5: n5 })
    }
}
