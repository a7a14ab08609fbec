//! Fore-background contrast attention.
//!
//! A single-channel activation map splits every feature map into a
//! foreground and a background region. Each region is pooled into a channel
//! vector by weighting the spatial positions with the map, the two vectors go
//! through independent sigmoid gates, and the gate difference rescales the
//! input channels:
//!
//! ```text
//! map_f = sigmoid(CBLR(F))            map_b = 1 - map_f
//! v_f   = map_f (1 x HW) * F^T (HW x C)    v_b likewise with map_b
//! c_f   = sigmoid(W2f lrelu(W1f v_f))      c_b likewise with the back gate
//! d_w   = c_f - c_b                   F'    = F * d_w  (per channel)
//! ```

use crate::error::{Error, Result};
use crate::impl_parameterized;
use crate::numerics::layers::{Activation, ConvBnAct, ConvSpec, MlpGate};
use crate::numerics::params::Parameterized;
use crate::numerics::rng::RngStream;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

use super::AttentionConfig;

/// Test and diagnostic hooks that replace internal values with constants.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FbcaOverrides {
    /// Replaces the foreground activation map.
    pub fore_map: Option<f64>,
    /// Replaces the channel scale `d_w`.
    pub d_w: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Fbca {
    pub name: String,
    /// Conv(C -> 1, k x k) + BN + LeakyReLU producing the pre-sigmoid map.
    pub cblr: ConvBnAct,
    pub fore_gate: MlpGate,
    /// Absent when the background vector is ablated.
    pub back_gate: Option<MlpGate>,
    pub channels: usize,
    pub k: usize,
    pub r: usize,
    pub residual: bool,
    pub overrides: FbcaOverrides,
}

impl_parameterized!(Fbca { cblr, fore_gate, back_gate });

/// Tape handles of the embedding stage.
#[derive(Clone, Copy, Debug)]
pub struct EmbedVars {
    pub f_map_fore: Var,
    pub f_map_back: Option<Var>,
    pub v_fore: Var,
    pub v_back: Option<Var>,
}

/// Tape handles of every FBCA intermediate.
#[derive(Clone, Copy, Debug)]
pub struct FbcaVars {
    pub embed: EmbedVars,
    pub c_fore: Var,
    pub c_back: Option<Var>,
    pub d_w: Var,
}

/// Materialized intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct FbcaIntermediates {
    pub f_map_fore: Tensor,
    pub f_map_back: Option<Tensor>,
    pub v_fore: Tensor,
    pub v_back: Option<Tensor>,
    pub c_fore: Tensor,
    pub c_back: Option<Tensor>,
    pub d_w: Tensor,
}

impl FbcaVars {
    pub fn materialize(&self, tape: &Tape) -> FbcaIntermediates {
        let get = |v: Var| tape.value(v).clone();
        FbcaIntermediates {
            f_map_fore: get(self.embed.f_map_fore),
            f_map_back: self.embed.f_map_back.map(get),
            v_fore: get(self.embed.v_fore),
            v_back: self.embed.v_back.map(get),
            c_fore: get(self.c_fore),
            c_back: self.c_back.map(get),
            d_w: get(self.d_w),
        }
    }
}

impl Fbca {
    pub fn new(name: &str, channels: usize, k: usize, cfg: &AttentionConfig, rng: &mut RngStream) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::invalid(format!("{name}: FBCA kernel size must be odd, got {k}")));
        }
        let spec = ConvSpec::new(channels, 1, k)
            .bias(cfg.conv_bias)
            .activation(Activation::LeakyRelu(cfg.leaky_slope));
        let cblr = ConvBnAct::new(spec, rng)?;
        let fore_gate = MlpGate::new(channels, cfg.r, cfg.gate_bias, cfg.leaky_slope, rng)?;
        let back_gate = if cfg.include_background {
            Some(MlpGate::new(channels, cfg.r, cfg.gate_bias, cfg.leaky_slope, rng)?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            cblr,
            fore_gate,
            back_gate,
            channels,
            k,
            r: cfg.r,
            residual: cfg.residual,
            overrides: FbcaOverrides::default(),
        })
    }

    pub fn include_background(&self) -> bool {
        self.back_gate.is_some()
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<[usize; 4]> {
        let dims = tape.value(x).dims4("fbca")?;
        if dims[1] != self.channels {
            return Err(Error::shape("fbca", format!("{} channels", self.channels), dims[1]));
        }
        if dims[2] * dims[3] == 0 {
            return Err(Error::invalid("fbca: empty spatial extent"));
        }
        Ok(dims)
    }

    /// Activation maps and region-pooled channel vectors.
    pub fn embed(&self, tape: &mut Tape, x: Var, training: bool) -> Result<EmbedVars> {
        let [n, c, h, w] = self.check_input(tape, x)?;
        let f_map_fore = match self.overrides.fore_map {
            Some(v) => tape.constant(Tensor::full(&[n, 1, h, w], v)),
            None => {
                let z = self.cblr.forward(tape, x, training)?;
                tape.sigmoid(z)?
            }
        };
        let f_map_back = if self.include_background() {
            Some(tape.one_minus(f_map_fore)?)
        } else {
            None
        };
        // F^T as [N, HW, C]
        let flat = tape.reshape(x, &[n, c, h * w])?;
        let ft = tape.swap_last2(flat)?;
        let pool = |tape: &mut Tape, map: Var| -> Result<Var> {
            let row = tape.reshape(map, &[n, 1, h * w])?;
            let v = tape.matmul(row, ft)?;
            tape.reshape(v, &[n, c])
        };
        let v_fore = pool(tape, f_map_fore)?;
        let v_back = f_map_back.map(|m| pool(tape, m)).transpose()?;
        Ok(EmbedVars { f_map_fore, f_map_back, v_fore, v_back })
    }

    /// Gated channel vectors and their difference.
    pub fn contrast(&self, tape: &mut Tape, embed: &EmbedVars) -> Result<(Var, Option<Var>, Var)> {
        let c_fore = self.fore_gate.forward(tape, embed.v_fore)?;
        let c_back = match (&self.back_gate, embed.v_back) {
            (Some(g), Some(v)) => Some(g.forward(tape, v)?),
            (None, _) => None,
            (Some(_), None) => return Err(Error::invalid("fbca: background vector missing")),
        };
        let d_w = match self.overrides.d_w {
            Some(v) => {
                let shape = tape.shape(c_fore).to_vec();
                tape.constant(Tensor::full(&shape, v))
            }
            None => match c_back {
                Some(cb) => tape.sub(c_fore, cb)?,
                None => c_fore,
            },
        };
        Ok((c_fore, c_back, d_w))
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, training: bool) -> Result<(Var, FbcaVars)> {
        let embed = self.embed(tape, x, training)?;
        let (c_fore, c_back, d_w) = self.contrast(tape, &embed)?;
        let mut out = tape.scale_channels(x, d_w)?;
        if self.residual {
            out = tape.add(out, x)?;
        }
        let vars = FbcaVars { embed, c_fore, c_back, d_w };
        tape.probe(&self.name, "f_map_fore", embed.f_map_fore);
        tape.probe(&self.name, "c_fore", c_fore);
        if let Some(cb) = c_back {
            tape.probe(&self.name, "c_back", cb);
        }
        tape.probe(&self.name, "d_w", d_w);
        Ok((out, vars))
    }

    /// Sets the CBLR conv to zero so the foreground map is exactly 0.5
    /// (with identity BN statistics), and copies the fore gate into the back
    /// gate. Together these make `d_w` exactly zero.
    pub fn make_symmetric(&mut self) {
        self.cblr.kernel.data_mut().fill(0.0);
        if let Some(b) = self.cblr.conv_bias.as_mut() {
            b.data_mut().fill(0.0);
        }
        self.cblr.bn.beta.data_mut().fill(0.0);
        self.cblr.bn.running_mean.data_mut().fill(0.0);
        if let Some(back) = self.back_gate.as_mut() {
            copy_values(&self.fore_gate, back);
        }
    }

    pub fn formula_params(channels: usize, k: usize, cfg: &AttentionConfig) -> usize {
        let conv = channels * k * k + usize::from(cfg.conv_bias) + 2;
        let gates = if cfg.include_background { 2 } else { 1 };
        conv + gates * MlpGate::formula_params(channels, cfg.r, cfg.gate_bias)
    }

    /// Conv + the two weighted-pooling products + the gate MLPs.
    pub fn formula_macs(channels: usize, h: usize, w: usize, k: usize, cfg: &AttentionConfig) -> u64 {
        let hidden = channels / cfg.r;
        let paths = if cfg.include_background { 2 } else { 1 };
        (k * k * channels * h * w + paths * channels * h * w + paths * 2 * channels * hidden) as u64
    }
}

fn copy_values<P: Parameterized>(src: &P, dst: &mut P) {
    let mut values = Vec::new();
    src.visit("", &mut |_, t| values.push(t.data().to_vec()));
    let mut it = values.into_iter();
    dst.visit_mut("", &mut |_, t| t.data_mut().copy_from_slice(&it.next().expect("same structure")));
}
