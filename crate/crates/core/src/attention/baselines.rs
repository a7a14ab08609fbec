//! Comparison channel-attention blocks: squeeze-and-excitation, efficient
//! channel attention and coordinate attention.

use crate::error::{Error, Result};
use crate::impl_parameterized;
use crate::numerics::layers::{he_normal, Activation, BatchNorm, Conv2d, MlpGate};
use crate::numerics::rng::RngStream;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

fn expect_channels(tape: &Tape, x: Var, channels: usize, op: &'static str) -> Result<[usize; 4]> {
    let dims = tape.value(x).dims4(op)?;
    if dims[1] != channels {
        return Err(Error::shape(op, format!("{channels} channels"), dims[1]));
    }
    Ok(dims)
}

/// GAP -> FC(C, C/r) -> ReLU -> FC(C/r, C) -> sigmoid -> channel scale.
#[derive(Clone, Debug)]
pub struct Se {
    pub gate: MlpGate,
}

impl_parameterized!(Se { gate });

impl Se {
    pub fn new(channels: usize, r: usize, rng: &mut RngStream) -> Result<Self> {
        Ok(Self { gate: MlpGate::new(channels, r, true, 0.0, rng)? })
    }

    pub fn channels(&self) -> usize {
        self.gate.channels()
    }

    pub fn gate_values(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        expect_channels(tape, x, self.channels(), "se")?;
        let v = tape.global_avg_pool(x)?;
        self.gate.forward(tape, v)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = self.gate_values(tape, x)?;
        tape.scale_channels(x, g)
    }

    pub fn formula_params(channels: usize, r: usize) -> usize {
        MlpGate::formula_params(channels, r, true)
    }

    pub fn formula_macs(channels: usize, r: usize) -> u64 {
        (2 * channels * (channels / r)) as u64
    }
}

/// GAP -> 1D conv across channels (odd k, no bias) -> sigmoid -> channel scale.
#[derive(Clone, Debug)]
pub struct Eca {
    pub kernel: Tensor,
    pub channels: usize,
}

impl_parameterized!(Eca { kernel });

impl Eca {
    pub fn new(channels: usize, k: usize, rng: &mut RngStream) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::invalid(format!("eca: kernel size must be odd, got {k}")));
        }
        Ok(Self { kernel: he_normal(&[k], k, rng), channels })
    }

    pub fn gate_values(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        expect_channels(tape, x, self.channels, "eca")?;
        let v = tape.global_avg_pool(x)?;
        let w = tape.leaf(&self.kernel);
        let z = tape.channel_conv1d(v, w)?;
        tape.sigmoid(z)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = self.gate_values(tape, x)?;
        tape.scale_channels(x, g)
    }

    pub fn formula_params(k: usize) -> usize {
        k
    }

    pub fn formula_macs(channels: usize, k: usize) -> u64 {
        (channels * k) as u64
    }
}

/// Coordinate attention: directional pooling along each axis, a shared 1x1
/// stem (conv, BN, hard-swish), then per-axis 1x1 convs with sigmoid.
#[derive(Clone, Debug)]
pub struct CoordAttention {
    pub stem: Conv2d,
    pub bn: BatchNorm,
    pub conv_h: Conv2d,
    pub conv_w: Conv2d,
    pub channels: usize,
}

impl_parameterized!(CoordAttention { stem, bn, conv_h, conv_w });

/// Stem width: `max(8, C / r)`.
pub fn coord_mid_channels(channels: usize, r: usize) -> usize {
    (channels / r.max(1)).max(8)
}

impl CoordAttention {
    pub fn new(channels: usize, r: usize, rng: &mut RngStream) -> Result<Self> {
        if channels == 0 || r == 0 {
            return Err(Error::invalid("coord attention needs C >= 1 and r >= 1"));
        }
        let mip = coord_mid_channels(channels, r);
        Ok(Self {
            stem: Conv2d::new(channels, mip, 1, true, rng)?,
            bn: BatchNorm::new(mip),
            conv_h: Conv2d::new(mip, channels, 1, true, rng)?,
            conv_w: Conv2d::new(mip, channels, 1, true, rng)?,
            channels,
        })
    }

    /// Returns `(a_h[N,C,H,1], a_w[N,C,1,W])`.
    pub fn gate_values(&self, tape: &mut Tape, x: Var, training: bool) -> Result<(Var, Var)> {
        let [n, c, h, w] = expect_channels(tape, x, self.channels, "coord")?;
        let xh = tape.mean_pool(x, false, true)?;
        let xw = tape.mean_pool(x, true, false)?;
        let xw = tape.reshape(xw, &[n, c, w, 1])?;
        let y = tape.concat(&[xh, xw], 2)?;
        let y = self.stem.forward(tape, y)?;
        let y = self.bn.forward(tape, y, training)?;
        let y = Activation::HardSwish.apply(tape, y)?;
        let yh = tape.slice(y, 2, 0, h)?;
        let yw = tape.slice(y, 2, h, w)?;
        let ah = self.conv_h.forward(tape, yh)?;
        let ah = tape.sigmoid(ah)?;
        let aw = self.conv_w.forward(tape, yw)?;
        let aw = tape.sigmoid(aw)?;
        let aw = tape.reshape(aw, &[n, c, 1, w])?;
        Ok((ah, aw))
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, training: bool) -> Result<Var> {
        let (ah, aw) = self.gate_values(tape, x, training)?;
        let y = tape.mul_broadcast(x, aw)?;
        tape.mul_broadcast(y, ah)
    }

    pub fn formula_params(channels: usize, r: usize) -> usize {
        let mip = coord_mid_channels(channels, r);
        (channels * mip + mip) + 2 * mip + 2 * (mip * channels + channels)
    }

    pub fn formula_macs(channels: usize, h: usize, w: usize, r: usize) -> u64 {
        let mip = coord_mid_channels(channels, r);
        (2 * channels * mip * (h + w)) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::Parameterized;
    use crate::numerics::tape::{hard_swish, sigmoid};

    fn input(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut RngStream::new(seed))
    }

    #[test]
    fn se_with_zero_weights_halves_input() {
        let mut se = Se::new(8, 2, &mut RngStream::new(1)).unwrap();
        se.gate.zero();
        let x = input(&[2, 8, 3, 3], 2);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let y = se.forward(&mut tape, xv).unwrap();
        for (o, i) in tape.value(y).data().iter().zip(x.data()) {
            assert_eq!(*o, 0.5 * i);
        }
    }

    #[test]
    fn se_param_count() {
        let se = Se::new(64, 16, &mut RngStream::new(1)).unwrap();
        assert_eq!(se.param_count(), 580);
        assert_eq!(Se::formula_params(64, 16), 580);
    }

    #[test]
    fn eca_on_constant_channels_matches_loop() {
        let eca = Eca::new(5, 3, &mut RngStream::new(3)).unwrap();
        assert_eq!(eca.param_count(), 3);
        let means = [0.3, -0.7, 1.1, 0.0, 0.25];
        let x = Tensor::from_fn(&[1, 5, 4, 4], |i| means[i / 16]);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let g = eca.gate_values(&mut tape, xv).unwrap();
        let k = eca.kernel.data();
        for c in 0..5 {
            let mut z = 0.0;
            for j in 0..3 {
                let src = c as isize + j as isize - 1;
                if (0..5).contains(&src) {
                    z += k[j] * means[src as usize];
                }
            }
            assert!((tape.value(g).at2(0, c) - sigmoid(z)).abs() < 1e-12);
        }
    }

    #[test]
    fn coord_on_single_pixel_is_a_channel_gate() {
        let (c, r) = (4, 1);
        let mut rng = RngStream::new(4);
        let mut ca = CoordAttention::new(c, r, &mut rng).unwrap();
        ca.bn.running_mean = Tensor::uniform(&[8], -0.2, 0.2, &mut rng);
        ca.bn.running_var = Tensor::uniform(&[8], 0.5, 1.5, &mut rng);
        let x = input(&[1, c, 1, 1], 5);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let y = ca.forward(&mut tape, xv, false).unwrap();

        let mip = coord_mid_channels(c, r);
        let conv1x1 = |conv: &Conv2d, v: &[f64], cin: usize, cout: usize| -> Vec<f64> {
            (0..cout)
                .map(|o| conv.bias.as_ref().unwrap().data()[o] + (0..cin).map(|i| conv.kernel.data()[o * cin + i] * v[i]).sum::<f64>())
                .collect()
        };
        let stem = conv1x1(&ca.stem, x.data(), c, mip);
        let bn = &ca.bn;
        let act: Vec<f64> = (0..mip)
            .map(|m| {
                let z = (stem[m] - bn.running_mean.data()[m]) / (bn.running_var.data()[m] + bn.eps).sqrt();
                hard_swish(bn.gamma.data()[m] * z + bn.beta.data()[m])
            })
            .collect();
        let ah = conv1x1(&ca.conv_h, &act, mip, c);
        let aw = conv1x1(&ca.conv_w, &act, mip, c);
        for ch in 0..c {
            let expect = x.data()[ch] * sigmoid(aw[ch]) * sigmoid(ah[ch]);
            assert!((tape.value(y).data()[ch] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn coord_gates_are_per_position() {
        let ca = CoordAttention::new(8, 2, &mut RngStream::new(6)).unwrap();
        let x = input(&[2, 8, 4, 6], 7);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let (ah, aw) = ca.gate_values(&mut tape, xv, true).unwrap();
        assert_eq!(tape.shape(ah), &[2, 8, 4, 1]);
        assert_eq!(tape.shape(aw), &[2, 8, 1, 6]);
        for v in tape.value(ah).data().iter().chain(tape.value(aw).data()) {
            assert!(*v > 0.0 && *v < 1.0);
        }
        assert_eq!(ca.param_count(), CoordAttention::formula_params(8, 2));
    }

    #[test]
    fn wrong_channels_rejected() {
        let se = Se::new(8, 2, &mut RngStream::new(1)).unwrap();
        let x = input(&[1, 4, 2, 2], 1);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        assert!(se.forward(&mut tape, xv).is_err());
        assert!(Eca::new(8, 4, &mut RngStream::new(1)).is_err());
    }
}
