//! Conv + BatchNorm + activation, and the two-layer sigmoid gate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::impl_parameterized;
use crate::numerics::params::Parameterized;
use crate::numerics::rng::RngStream;
use crate::numerics::tape::{BnStats, BnUpdate, Tape, Var};
use crate::numerics::tensor::Tensor;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.1;
pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu(f64),
    HardSwish,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::LeakyRelu(slope) => tape.leaky_relu(x, slope),
            Activation::HardSwish => tape.hard_swish(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// He (Kaiming) normal initialization for a layer with the given fan-in.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Tensor {
    Tensor::normal(shape, (2.0 / fan_in as f64).sqrt(), rng).into_param()
}

/// Batch normalization parameters and running statistics for `C` channels.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl_parameterized!(BatchNorm { gamma, beta, running_mean, running_var });

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0).into_param(),
            beta: Tensor::zeros(&[channels]).into_param(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: DEFAULT_BN_EPS,
            momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Training mode normalizes with batch statistics and queues a
    /// running-statistics update on the tape; eval mode uses running stats.
    pub fn forward(&self, tape: &mut Tape, x: Var, training: bool) -> Result<Var> {
        let gamma = tape.leaf(&self.gamma);
        let beta = tape.leaf(&self.beta);
        if !training {
            let stats = BnStats::Fixed {
                mean: self.running_mean.data(),
                var: self.running_var.data(),
                eps: self.eps,
            };
            return Ok(tape.batch_norm(x, gamma, beta, stats)?.0);
        }
        let (y, moments) = tape.batch_norm(x, gamma, beta, BnStats::Batch { eps: self.eps })?;
        let moments = moments.expect("batch statistics in training mode");
        let unbias = moments.count as f64 / (moments.count as f64 - 1.0);
        let m = self.momentum;
        let new_mean = self
            .running_mean
            .data()
            .iter()
            .zip(&moments.mean)
            .map(|(r, b)| (1.0 - m) * r + m * b)
            .collect();
        let new_var = self
            .running_var
            .data()
            .iter()
            .zip(&moments.var)
            .map(|(r, b)| ((1.0 - m) * r + m * b * unbias).max(0.0))
            .collect();
        tape.push_bn_update(BnUpdate {
            running_mean: self.running_mean.id(),
            running_var: self.running_var.id(),
            new_mean,
            new_var,
        });
        Ok(y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub bias: bool,
    pub activation: Activation,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, k: usize) -> Self {
        Self {
            c_in,
            c_out,
            k,
            stride: 1,
            bias: true,
            activation: Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE),
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn bias(mut self, on: bool) -> Self {
        self.bias = on;
        self
    }

    pub fn activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }
}

/// Conv (odd k, padding (k-1)/2) -> BatchNorm -> activation.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub kernel: Tensor,
    pub conv_bias: Option<Tensor>,
    pub bn: BatchNorm,
    pub spec: ConvSpec,
}

impl_parameterized!(ConvBnAct { kernel, conv_bias, bn });

impl ConvBnAct {
    pub fn new(spec: ConvSpec, rng: &mut RngStream) -> Result<Self> {
        if spec.k % 2 == 0 {
            return Err(Error::invalid(format!("conv kernel size must be odd, got {}", spec.k)));
        }
        if spec.c_in == 0 || spec.c_out == 0 || spec.stride == 0 {
            return Err(Error::invalid(format!("degenerate conv spec {spec:?}")));
        }
        let fan_in = spec.c_in * spec.k * spec.k;
        Ok(Self {
            kernel: he_normal(&[spec.c_out, spec.c_in, spec.k, spec.k], fan_in, rng),
            conv_bias: spec.bias.then(|| Tensor::zeros(&[spec.c_out]).into_param()),
            bn: BatchNorm::new(spec.c_out),
            spec,
        })
    }

    pub fn padding(&self) -> usize {
        (self.spec.k - 1) / 2
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, training: bool) -> Result<Var> {
        let w = tape.leaf(&self.kernel);
        let b = self.conv_bias.as_ref().map(|b| tape.leaf(b));
        let y = tape.conv2d(x, w, b, self.spec.stride, self.padding())?;
        let y = self.bn.forward(tape, y, training)?;
        self.spec.activation.apply(tape, y)
    }

    /// Turns the block into a pure pass-through for `c_in == c_out`:
    /// identity kernel, zero bias, unit BN, identity activation.
    pub fn set_identity(&mut self) {
        assert_eq!(self.spec.c_in, self.spec.c_out, "identity needs square channel map");
        let (c, k) = (self.spec.c_out, self.spec.k);
        let center = k / 2;
        let w = self.kernel.data_mut();
        w.fill(0.0);
        for ch in 0..c {
            w[((ch * c + ch) * k + center) * k + center] = 1.0;
        }
        if let Some(b) = self.conv_bias.as_mut() {
            b.data_mut().fill(0.0);
        }
        self.bn.gamma.data_mut().fill(1.0);
        self.bn.beta.data_mut().fill(0.0);
        self.bn.running_mean.data_mut().fill(0.0);
        self.bn.running_var.data_mut().fill(1.0 - self.bn.eps);
        self.spec.activation = Activation::Identity;
    }

    /// Learnable scalar count implied by the spec, without enumerating tensors.
    pub fn formula_params(spec: &ConvSpec) -> usize {
        spec.c_out * spec.c_in * spec.k * spec.k + if spec.bias { spec.c_out } else { 0 } + 2 * spec.c_out
    }
}

/// Plain convolution with optional bias (no normalization).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
}

impl_parameterized!(Conv2d { kernel, bias });

impl Conv2d {
    pub fn new(c_in: usize, c_out: usize, k: usize, bias: bool, rng: &mut RngStream) -> Result<Self> {
        if k % 2 == 0 || c_in == 0 || c_out == 0 {
            return Err(Error::invalid(format!("bad conv {c_in}->{c_out} k={k}")));
        }
        Ok(Self {
            kernel: he_normal(&[c_out, c_in, k, k], c_in * k * k, rng),
            bias: bias.then(|| Tensor::zeros(&[c_out]).into_param()),
            stride: 1,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.leaf(&self.kernel);
        let b = self.bias.as_ref().map(|b| tape.leaf(b));
        let k = self.kernel.shape()[2];
        tape.conv2d(x, w, b, self.stride, (k - 1) / 2)
    }
}

/// `sigmoid(W2 * act(W1 * v + b1) + b2)` over `v[N, C]`, hidden width `C / r`.
#[derive(Clone, Debug)]
pub struct MlpGate {
    pub w1: Tensor,
    pub b1: Option<Tensor>,
    pub w2: Tensor,
    pub b2: Option<Tensor>,
    pub slope: f64,
}

impl_parameterized!(MlpGate { w1, b1, w2, b2 });

impl MlpGate {
    pub fn new(channels: usize, r: usize, bias: bool, slope: f64, rng: &mut RngStream) -> Result<Self> {
        let hidden = reduced_width(channels, r)?;
        Ok(Self {
            w1: he_normal(&[hidden, channels], channels, rng),
            b1: bias.then(|| Tensor::zeros(&[hidden]).into_param()),
            w2: he_normal(&[channels, hidden], hidden, rng),
            b2: bias.then(|| Tensor::zeros(&[channels]).into_param()),
            slope,
        })
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape, v: Var) -> Result<Var> {
        let (w1, w2) = (tape.leaf(&self.w1), tape.leaf(&self.w2));
        let b1 = self.b1.as_ref().map(|b| tape.leaf(b));
        let b2 = self.b2.as_ref().map(|b| tape.leaf(b));
        let h = tape.linear(v, w1, b1)?;
        let h = tape.leaky_relu(h, self.slope)?;
        let z = tape.linear(h, w2, b2)?;
        tape.sigmoid(z)
    }

    pub fn zero(&mut self) {
        self.visit_mut("", &mut |_, t| t.data_mut().fill(0.0));
    }

    pub fn formula_params(channels: usize, r: usize, bias: bool) -> usize {
        let h = channels / r;
        2 * channels * h + if bias { h + channels } else { 0 }
    }
}



/// `C / r`, requiring exact divisibility and a non-empty result.
pub fn reduced_width(channels: usize, r: usize) -> Result<usize> {
    if r == 0 || channels % r != 0 || channels / r == 0 {
        return Err(Error::invalid(format!(
            "compression ratio r={r} must divide channel count C={channels}"
        )));
    }
    Ok(channels / r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduced_width_requires_divisibility() {
        assert_eq!(reduced_width(64, 16).unwrap(), 4);
        assert!(reduced_width(10, 4).is_err());
        assert!(reduced_width(4, 8).is_err());
        assert!(reduced_width(4, 0).is_err());
    }

    #[test]
    fn even_kernel_rejected() {
        let mut rng = RngStream::new(1);
        assert!(ConvBnAct::new(ConvSpec::new(2, 2, 4), &mut rng).is_err());
    }

    #[test]
    fn formula_matches_enumeration() {
        let mut rng = RngStream::new(2);
        let spec = ConvSpec::new(3, 5, 3);
        let c = ConvBnAct::new(spec, &mut rng).unwrap();
        assert_eq!(c.param_count(), ConvBnAct::formula_params(&spec));
        let g = MlpGate::new(8, 2, true, 0.1, &mut rng).unwrap();
        assert_eq!(g.param_count(), MlpGate::formula_params(8, 2, true));
    }

    #[test]
    fn identity_conv_passes_input_through() {
        let mut rng = RngStream::new(3);
        let mut c = ConvBnAct::new(ConvSpec::new(2, 2, 3), &mut rng).unwrap();
        c.set_identity();
        let x = Tensor::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let y = c.forward(&mut tape, xv, false).unwrap();
        assert!(tape.value(y).max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn training_forward_queues_running_update() {
        let mut rng = RngStream::new(4);
        let mut c = ConvBnAct::new(ConvSpec::new(1, 2, 1), &mut rng).unwrap();
        let x = Tensor::uniform(&[2, 1, 3, 3], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        c.forward(&mut tape, xv, true).unwrap();
        assert_eq!(tape.bn_updates().len(), 1);
        let before = c.bn.running_mean.data().to_vec();
        c.apply_bn_updates(&tape);
        assert_ne!(c.bn.running_mean.data(), &before[..]);
        assert!(c.bn.running_var.data().iter().all(|&v| v >= 0.0));
    }
}
