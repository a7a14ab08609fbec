//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node holding its value and enough saved state to run
//! its vector-Jacobian product. Nodes are created in topological order, so
//! `backward` walks them in reverse index order: the traversal is fixed and
//! results are bit-reproducible.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::conv::{self, ConvGeometry};
use crate::numerics::tensor::{numel, Tensor, TensorId};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Upper clamp of the sigmoid: the largest double below one.
pub const SIGMOID_MAX: f64 = 1.0 - f64::EPSILON / 2.0;
/// Lower clamp of the sigmoid.
pub const SIGMOID_MIN: f64 = f64::MIN_POSITIVE;

/// Logistic function with its output kept strictly inside `(0, 1)`.
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(SIGMOID_MIN, SIGMOID_MAX)
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn hard_swish(x: f64) -> f64 {
    x * (x + 3.0).clamp(0.0, 6.0) / 6.0
}

/// How batch normalization obtains its statistics.
#[derive(Clone, Copy, Debug)]
pub enum BnStats<'a> {
    /// Normalize with the statistics of the current batch.
    Batch { eps: f64 },
    /// Normalize with fixed (running) statistics.
    Fixed { mean: &'a [f64], var: &'a [f64], eps: f64 },
}

/// Batch statistics observed during a training-mode normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased (divide-by-count) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

/// A pending running-statistics update for a normalization layer.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: TensorId,
    pub running_var: TensorId,
    pub new_mean: Vec<f64>,
    pub new_var: Vec<f64>,
}

/// A named intermediate exposed for inspection after a forward pass.
#[derive(Clone, Debug)]
pub struct Probe {
    pub site: String,
    pub field: &'static str,
    pub var: Var,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch: bool },
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid { x: Var },
    HardSwish { x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulBroadcast { a: Var, b: Var },
    OneMinus(Var),
    Scale { x: Var, c: f64 },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    SwapLast2(Var),
    Matmul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    MeanPool { x: Var, over_h: bool, over_w: bool },
    AvgPool2x2(Var),
    Upsample2x(Var),
    ChannelConv1d { x: Var, w: Var },
    Sum(Var),
    Mean(Var),
    BceWithLogits { x: Var, target: Vec<f64> },
    MaskedL1 { x: Var, target: Vec<f64>, mask: Vec<f64>, denom: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: HashMap<TensorId, Var>,
    grads: Vec<Option<Vec<f64>>>,
    backpropagated: bool,
    macs: u64,
    bn_updates: Vec<BnUpdate>,
    probes: Vec<Probe>,
    branches: u64,
}

/// Shape of `[outer, axis, inner]` blocks around one axis.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Multiply-accumulate count of every conv / matmul / linear op recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a tensor as a leaf. The same tensor (by id) maps to the same
    /// variable for the lifetime of the tape.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        if let Some(&v) = self.leaves.get(&t.id()) {
            return v;
        }
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        let v = self.push_raw(value, Op::Leaf, t.requires_grad());
        self.leaves.insert(t.id(), v);
        v
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    pub fn var_of(&self, id: TensorId) -> Option<Var> {
        self.leaves.get(&id).copied()
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn push_bn_update(&mut self, u: BnUpdate) {
        self.bn_updates.push(u);
    }

    pub fn probe(&mut self, site: &str, field: &'static str, var: Var) {
        self.probes.push(Probe { site: site.to_string(), field, var });
    }

    pub fn probes(&self) -> &[Probe] {
        &self.probes
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[Var]) -> Result<Var> {
        if self.backpropagated {
            return Err(Error::AlreadyBackpropagated);
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push_raw(Tensor::from_parts(shape, data), op, needs_grad))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ------------------------------------------------------------------
    // Layer primitives

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::shape("conv2d", [geom.c_out], self.shape(b).to_vec()));
            }
        }
        let out = conv::conv2d_im2col(self.data(x), self.data(w), b.map(|b| self.data(b)), &geom);
        self.macs += geom.macs();
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push("conv2d", geom.out_shape().to_vec(), out, Op::Conv2d { x, w, b, geom }, &parents)
    }

    /// Per-channel normalization over (N, H, W) followed by `gamma * xhat + beta`.
    /// Returns the batch moments when batch statistics were used.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: BnStats<'_>) -> Result<(Var, Option<BatchMoments>)> {
        let [n, c, h, w] = self.value(x).dims4("batch_norm")?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("batch_norm", [c], self.shape(p).to_vec()));
            }
        }
        let m = n * h * w;
        let hw = h * w;
        let xd = self.data(x);
        let (mean, var, eps, batch) = match stats {
            BnStats::Batch { eps } => {
                if m < 2 {
                    return Err(Error::invalid(format!(
                        "batch_norm: training mode needs N*H*W >= 2 per channel, got {m}"
                    )));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for s_n in 0..n {
                        s += xd[(s_n * c + ch) * hw..(s_n * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut q = 0.0;
                    for s_n in 0..n {
                        q += xd[(s_n * c + ch) * hw..(s_n * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = q / m as f64;
                }
                (mean, var, eps, true)
            }
            BnStats::Fixed { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", [c], [mean.len(), var.len()]));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f64> = var
            .iter()
            .map(|&v| {
                if v < 0.0 {
                    log::warn!("batch_norm: negative variance {v:e} clamped to 0");
                }
                1.0 / (v.max(0.0) + eps).sqrt()
            })
            .collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for s_n in 0..n {
            for ch in 0..c {
                let base = (s_n * c + ch) * hw;
                for i in base..base + hw {
                    let z = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = z;
                    out[i] = g[ch] * z + b[ch];
                }
            }
        }
        let moments = batch.then(|| BatchMoments { mean, var, count: m });
        let v = self.push(
            "batch_norm",
            vec![n, c, h, w],
            out,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch },
            &[x, gamma, beta],
        )?;
        Ok((v, moments))
    }

    /// Hash of which piece of every piecewise-defined op each element fell on.
    /// Two forward passes with equal signatures evaluated the same smooth
    /// branch everywhere.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    fn record_branches(&mut self, codes: impl Iterator<Item = u8>) {
        let mut h = self.branches;
        for c in codes {
            h = (h ^ u64::from(c)).wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.branches = h ^ 0xff;
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let codes: Vec<u8> = self.data(x).iter().map(|&v| u8::from(v > 0.0)).collect();
        self.record_branches(codes.into_iter());
        let out = self.data(x).iter().map(|&v| leaky_relu(v, slope)).collect();
        self.push("leaky_relu", self.shape(x).to_vec(), out, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let codes: Vec<u8> = out.iter().map(|&s| u8::from(s == SIGMOID_MIN) + 2 * u8::from(s == SIGMOID_MAX)).collect();
        self.record_branches(codes.into_iter());
        self.push("sigmoid", self.shape(x).to_vec(), out, Op::Sigmoid { x }, &[x])
    }

    pub fn hard_swish(&mut self, x: Var) -> Result<Var> {
        let codes: Vec<u8> = self.data(x).iter().map(|&v| u8::from(v > -3.0) + u8::from(v >= 3.0)).collect();
        self.record_branches(codes.into_iter());
        let out = self.data(x).iter().map(|&v| hard_swish(v)).collect();
        self.push("hard_swish", self.shape(x).to_vec(), out, Op::HardSwish { x }, &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a).to_vec(), self.shape(b).to_vec()));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        self.push(name, self.shape(a).to_vec(), out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise `1 - x`, computed literally.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| 1.0 - v).collect();
        self.push("one_minus", self.shape(x).to_vec(), out, Op::OneMinus(x), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| c * v).collect();
        self.push("scale", self.shape(x).to_vec(), out, Op::Scale { x, c }, &[x])
    }

    /// `a * b` where `b` has the same rank and every extent of `b` is either
    /// equal to that of `a` or 1.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa.iter().zip(&sb).any(|(&x, &y)| y != x && y != 1) {
            return Err(Error::shape("mul_broadcast", sa, sb));
        }
        let map = broadcast_index(&sa, &sb);
        let (ad, bd) = (self.data(a), self.data(b));
        let out = ad.iter().zip(&map).map(|(&x, &j)| x * bd[j]).collect();
        self.push("mul_broadcast", sa, out, Op::MulBroadcast { a, b }, &[a, b])
    }

    /// Scales every channel map of `x[N,C,H,W]` by `s[N,C]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let [n, c, _, _] = self.value(x).dims4("scale_channels")?;
        if self.shape(s) != [n, c] {
            return Err(Error::shape("scale_channels", [n, c], self.shape(s).to_vec()));
        }
        let s4 = self.reshape(s, &[n, c, 1, 1])?;
        self.mul_broadcast(x, s4)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat: axis {axis} out of range for rank {}", base.len())));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", base.clone(), s.to_vec()));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.data(*p)[o * len..(o + 1) * len]);
            }
        }
        self.push("concat", shape, out, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, 1)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::invalid(format!("slice: [{start}, {}) out of range on axis {axis} of {s:?}", start + len)));
        }
        let (outer, ax, inner) = split_axis(&s, axis);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ax * inner + start * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push("slice", shape, out, Op::Slice { x, axis, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() {
            return Err(Error::shape("reshape", self.shape(x).to_vec(), shape.to_vec()));
        }
        let data = self.data(x).to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    /// Flattens everything after the first axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = *s.first().ok_or_else(|| Error::invalid("flatten: scalar input"))?;
        let rest = numel(&s[1..]);
        self.reshape(x, &[n, rest])
    }

    /// Transposes the last two axes.
    pub fn swap_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("swap_last2", "rank >= 2", s));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = numel(&s[..s.len() - 2]);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            let off = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[off + j * r + i] = xd[off + i * c + j];
                }
            }
        }
        let mut shape = s;
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        self.push("swap_last2", shape, out, Op::SwapLast2(x), &[x])
    }

    /// `[M,K] x [K,N]` or batched `[B,M,K] x [B,K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (&sa[..], &sb[..]) {
            (&[m, k], &[k2, n]) if k == k2 => (1, m, k, n),
            (&[b1, m, k], &[b2, k2, n]) if b1 == b2 && k == k2 => (b1, m, k, n),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            conv::gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                false,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.macs += (batch * m * k * n) as u64;
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        self.push("matmul", shape, out, Op::Matmul { a, b }, &[a, b])
    }

    /// `x[N,in] * w[out,in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [n, fin] = self.value(x).dims2("linear")?;
        let [fout, win] = self.value(w).dims2("linear")?;
        if win != fin {
            return Err(Error::shape("linear", [fout, fin], [fout, win]));
        }
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(Error::shape("linear", [fout], self.shape(b).to_vec()));
            }
        }
        let mut out = vec![0.0; n * fout];
        if let Some(b) = b {
            let bd = self.data(b);
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bd);
            }
        }
        conv::gemm(n, fin, fout, self.data(x), false, self.data(w), true, 1.0, &mut out);
        self.macs += (n * fin * fout) as u64;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push("linear", vec![n, fout], out, Op::Linear { x, w, b }, &parents)
    }

    /// Mean over H and/or W of `[N,C,H,W]`, keeping the reduced axes as 1.
    pub fn mean_pool(&mut self, x: Var, over_h: bool, over_w: bool) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("mean_pool")?;
        let (ho, wo) = (if over_h { 1 } else { h }, if over_w { 1 } else { w });
        let div = (if over_h { h } else { 1 } * if over_w { w } else { 1 }) as f64;
        let xd = self.data(x);
        let mut out = vec![0.0; n * c * ho * wo];
        for nc in 0..n * c {
            for i in 0..h {
                for j in 0..w {
                    let oi = if over_h { 0 } else { i };
                    let oj = if over_w { 0 } else { j };
                    out[(nc * ho + oi) * wo + oj] += xd[(nc * h + i) * w + j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= div);
        self.push("mean_pool", vec![n, c, ho, wo], out, Op::MeanPool { x, over_h, over_w }, &[x])
    }

    /// Global average pooling `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, _, _] = self.value(x).dims4("global_avg_pool")?;
        let p = self.mean_pool(x, true, true)?;
        self.reshape(p, &[n, c])
    }

    pub fn avg_pool2x2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("avg_pool2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(format!("avg_pool2x2: odd spatial extent {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.data(x);
        let mut out = vec![0.0; n * c * ho * wo];
        for nc in 0..n * c {
            for i in 0..ho {
                for j in 0..wo {
                    let s = |di: usize, dj: usize| xd[(nc * h + 2 * i + di) * w + 2 * j + dj];
                    out[(nc * ho + i) * wo + j] = 0.25 * (s(0, 0) + s(0, 1) + s(1, 0) + s(1, 1));
                }
            }
        }
        self.push("avg_pool2x2", vec![n, c, ho, wo], out, Op::AvgPool2x2(x), &[x])
    }

    /// Nearest-neighbour upsampling by two.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("upsample2x")?;
        let (ho, wo) = (2 * h, 2 * w);
        let xd = self.data(x);
        let mut out = vec![0.0; n * c * ho * wo];
        for nc in 0..n * c {
            for i in 0..ho {
                for j in 0..wo {
                    out[(nc * ho + i) * wo + j] = xd[(nc * h + i / 2) * w + j / 2];
                }
            }
        }
        self.push("upsample2x", vec![n, c, ho, wo], out, Op::Upsample2x(x), &[x])
    }

    /// 1D cross-correlation along the channel axis of `x[N,C]` with a
    /// zero-padded odd kernel `w[k]`, no bias.
    pub fn channel_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let [n, c] = self.value(x).dims2("channel_conv1d")?;
        let k = match self.shape(w) {
            &[k] if k % 2 == 1 => k,
            s => return Err(Error::shape("channel_conv1d", "odd kernel [k]", s.to_vec())),
        };
        let pad = k / 2;
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![0.0; n * c];
        for s in 0..n {
            for ch in 0..c {
                let mut acc = 0.0;
                for (j, &wj) in wd.iter().enumerate() {
                    let src = ch as isize + j as isize - pad as isize;
                    if src >= 0 && (src as usize) < c {
                        acc += wj * xd[s * c + src as usize];
                    }
                }
                out[s * c + ch] = acc;
            }
        }
        self.macs += (n * c * k) as u64;
        self.push("channel_conv1d", vec![n, c], out, Op::ChannelConv1d { x, w }, &[x, w])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push("sum", vec![], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push("mean", vec![], vec![s], Op::Mean(x), &[x])
    }

    /// Mean binary cross-entropy of logits `x` against fixed targets.
    pub fn bce_with_logits(&mut self, x: Var, target: Vec<f64>) -> Result<Var> {
        let xd = self.data(x);
        if target.len() != xd.len() {
            return Err(Error::shape("bce_with_logits", xd.len(), target.len()));
        }
        let total: f64 = xd
            .iter()
            .zip(&target)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = total / xd.len() as f64;
        self.push("bce_with_logits", vec![], vec![loss], Op::BceWithLogits { x, target }, &[x])
    }

    /// `sum(mask * |x - target|) / denom`.
    pub fn masked_l1(&mut self, x: Var, target: Vec<f64>, mask: Vec<f64>, denom: f64) -> Result<Var> {
        let xd = self.data(x);
        if target.len() != xd.len() || mask.len() != xd.len() {
            return Err(Error::shape("masked_l1", xd.len(), [target.len(), mask.len()]));
        }
        if denom <= 0.0 {
            return Err(Error::invalid("masked_l1: denominator must be positive"));
        }
        let total: f64 = xd.iter().zip(&target).zip(&mask).map(|((&v, &t), &m)| m * (v - t).abs()).sum();
        let codes: Vec<u8> = xd.iter().zip(&target).zip(&mask).map(|((&v, &t), &m)| u8::from(m != 0.0 && v > t)).collect();
        self.record_branches(codes.into_iter());
        self.push("masked_l1", vec![], vec![total / denom], Op::MaskedL1 { x, target, mask, denom }, &[x])
    }

    // ------------------------------------------------------------------
    // Reverse pass

    /// Populates gradients of `loss` with respect to every recorded node that
    /// depends on a gradient-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backpropagated {
            return Err(Error::AlreadyBackpropagated);
        }
        let shape = self.shape(loss);
        if !shape.is_empty() && numel(shape) != 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        self.backpropagated = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of the leaf registered for `t`, zero-filled when the loss does
    /// not depend on it.
    pub fn grad_of(&self, t: &Tensor) -> Option<Vec<f64>> {
        let v = self.var_of(t.id())?;
        Some(self.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
    }
}

/// For each element of `a_shape`, the flat index into the broadcast operand.
fn broadcast_index(a_shape: &[usize], b_shape: &[usize]) -> Vec<usize> {
    let rank = a_shape.len();
    let mut b_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        b_strides[d] = if b_shape[d] == 1 { 0 } else { acc };
        acc *= b_shape[d];
    }
    let total = numel(a_shape);
    let mut idx = vec![0usize; rank];
    let mut out = Vec::with_capacity(total);
    for _ in 0..total {
        out.push(idx.iter().zip(&b_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < a_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let wants = |v: Var| nodes[v.0].needs_grad;
    let len = |v: Var| nodes[v.0].value.numel();
    let val = |v: Var| nodes[v.0].value.data();
    macro_rules! acc {
        ($v:expr) => {
            accumulate(grads, $v, len($v))
        };
    }
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, geom } => {
            let r = conv::conv2d_backward(val(*x), val(*w), g, geom, wants(*x));
            if let Some(dx) = r.dx {
                acc!(*x).iter_mut().zip(&dx).for_each(|(a, d)| *a += d);
            }
            if wants(*w) {
                acc!(*w).iter_mut().zip(&r.dkernel).for_each(|(a, d)| *a += d);
            }
            if let Some(b) = b.filter(|b| wants(*b)) {
                acc!(b).iter_mut().zip(&r.dbias).for_each(|(a, d)| *a += d);
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch } => {
            let s = node.value.shape();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let m = (n * hw) as f64;
            let gam = val(*gamma);
            let mut sum_dy = vec![0.0; c];
            let mut sum_dy_xhat = vec![0.0; c];
            for s_n in 0..n {
                for ch in 0..c {
                    let base = (s_n * c + ch) * hw;
                    for i in base..base + hw {
                        sum_dy[ch] += g[i];
                        sum_dy_xhat[ch] += g[i] * xhat[i];
                    }
                }
            }
            if wants(*gamma) {
                acc!(*gamma).iter_mut().zip(&sum_dy_xhat).for_each(|(a, d)| *a += d);
            }
            if wants(*beta) {
                acc!(*beta).iter_mut().zip(&sum_dy).for_each(|(a, d)| *a += d);
            }
            if wants(*x) {
                let dx = acc!(*x);
                for s_n in 0..n {
                    for ch in 0..c {
                        let base = (s_n * c + ch) * hw;
                        let k = gam[ch] * inv_std[ch];
                        for i in base..base + hw {
                            dx[i] += if *batch {
                                k * (g[i] - sum_dy[ch] / m - xhat[i] * sum_dy_xhat[ch] / m)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
            }
        }
        Op::LeakyRelu { x, slope } => {
            let xv = val(*x);
            acc!(*x).iter_mut().zip(g).zip(xv).for_each(|((a, &d), &v)| *a += if v > 0.0 { d } else { slope * d });
        }
        Op::Sigmoid { x } => {
            let y = node.value.data();
            acc!(*x).iter_mut().zip(g).zip(y).for_each(|((a, &d), &s)| *a += d * s * (1.0 - s));
        }
        Op::HardSwish { x } => {
            let xv = val(*x);
            acc!(*x).iter_mut().zip(g).zip(xv).for_each(|((a, &d), &v)| {
                let dv = if v < -3.0 {
                    0.0
                } else if v > 3.0 {
                    1.0
                } else {
                    (2.0 * v + 3.0) / 6.0
                };
                *a += d * dv;
            });
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if wants(v) {
                    acc!(v).iter_mut().zip(g).for_each(|(t, d)| *t += d);
                }
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                acc!(*a).iter_mut().zip(g).for_each(|(t, d)| *t += d);
            }
            if wants(*b) {
                acc!(*b).iter_mut().zip(g).for_each(|(t, d)| *t -= d);
            }
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                let bv = val(*b);
                acc!(*a).iter_mut().zip(g).zip(bv).for_each(|((t, d), y)| *t += d * y);
            }
            if wants(*b) {
                let av = val(*a);
                acc!(*b).iter_mut().zip(g).zip(av).for_each(|((t, d), x)| *t += d * x);
            }
        }
        Op::MulBroadcast { a, b } => {
            let map = broadcast_index(nodes[a.0].value.shape(), nodes[b.0].value.shape());
            if wants(*a) {
                let bv = val(*b);
                acc!(*a).iter_mut().zip(g).zip(&map).for_each(|((t, d), &j)| *t += d * bv[j]);
            }
            if wants(*b) {
                let av = val(*a).to_vec();
                let db = acc!(*b);
                for ((d, x), &j) in g.iter().zip(&av).zip(&map) {
                    db[j] += d * x;
                }
            }
        }
        Op::OneMinus(x) => {
            acc!(*x).iter_mut().zip(g).for_each(|(t, d)| *t -= d);
        }
        Op::Scale { x, c } => {
            acc!(*x).iter_mut().zip(g).for_each(|(t, d)| *t += c * d);
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            let total = node.value.shape()[*axis] * inner;
            for &p in parts {
                let plen = nodes[p.0].value.shape()[*axis] * inner;
                if wants(p) {
                    let dp = acc!(p);
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + plen];
                        dp[o * plen..(o + 1) * plen].iter_mut().zip(src).for_each(|(t, d)| *t += d);
                    }
                }
                offset += plen;
            }
        }
        Op::Slice { x, axis, start } => {
            let xs = nodes[x.0].value.shape().to_vec();
            let (outer, ax, inner) = split_axis(&xs, *axis);
            let len = node.value.shape()[*axis];
            let dx = acc!(*x);
            for o in 0..outer {
                let base = o * ax * inner + start * inner;
                dx[base..base + len * inner]
                    .iter_mut()
                    .zip(&g[o * len * inner..(o + 1) * len * inner])
                    .for_each(|(t, d)| *t += d);
            }
        }
        Op::Reshape(x) => {
            acc!(*x).iter_mut().zip(g).for_each(|(t, d)| *t += d);
        }
        Op::SwapLast2(x) => {
            // output is [.., c, r] of input [.., r, c]
            let s = node.value.shape();
            let (c, r) = (s[s.len() - 2], s[s.len() - 1]);
            let batch = numel(&s[..s.len() - 2]);
            let dx = acc!(*x);
            for b in 0..batch {
                let off = b * r * c;
                for j in 0..c {
                    for i in 0..r {
                        dx[off + i * c + j] += g[off + j * r + i];
                    }
                }
            }
        }
        Op::Matmul { a, b } => {
            let sa = nodes[a.0].value.shape();
            let sb = nodes[b.0].value.shape();
            let (batch, m, k) = if sa.len() == 2 { (1, sa[0], sa[1]) } else { (sa[0], sa[1], sa[2]) };
            let n = sb[sb.len() - 1];
            if wants(*a) {
                let bv = val(*b).to_vec();
                let da = acc!(*a);
                for i in 0..batch {
                    // dA = dC [m,n] * B^T [n,k]
                    conv::gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &bv[i * k * n..(i + 1) * k * n],
                        true,
                        1.0,
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                }
            }
            if wants(*b) {
                let av = val(*a).to_vec();
                let db = acc!(*b);
                for i in 0..batch {
                    // dB = A^T [k,m] * dC [m,n]
                    conv::gemm(
                        k,
                        m,
                        n,
                        &av[i * m * k..(i + 1) * m * k],
                        true,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        1.0,
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
            }
        }
        Op::Linear { x, w, b } => {
            let s = nodes[x.0].value.shape();
            let (n, fin) = (s[0], s[1]);
            let fout = node.value.shape()[1];
            if wants(*x) {
                let wv = val(*w).to_vec();
                conv::gemm(n, fout, fin, g, false, &wv, false, 1.0, acc!(*x));
            }
            if wants(*w) {
                let xv = val(*x).to_vec();
                conv::gemm(fout, n, fin, g, true, &xv, false, 1.0, acc!(*w));
            }
            if let Some(b) = b.filter(|b| wants(*b)) {
                let db = acc!(b);
                for row in g.chunks(fout) {
                    db.iter_mut().zip(row).for_each(|(t, d)| *t += d);
                }
            }
        }
        Op::MeanPool { x, over_h, over_w } => {
            let s = nodes[x.0].value.shape();
            let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
            let os = node.value.shape();
            let (ho, wo) = (os[2], os[3]);
            let div = (if *over_h { h } else { 1 } * if *over_w { w } else { 1 }) as f64;
            let dx = acc!(*x);
            for p in 0..nc {
                for i in 0..h {
                    for j in 0..w {
                        let oi = if *over_h { 0 } else { i };
                        let oj = if *over_w { 0 } else { j };
                        dx[(p * h + i) * w + j] += g[(p * ho + oi) * wo + oj] / div;
                    }
                }
            }
        }
        Op::AvgPool2x2(x) => {
            let s = nodes[x.0].value.shape();
            let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
            let (ho, wo) = (h / 2, w / 2);
            let dx = acc!(*x);
            for p in 0..nc {
                for i in 0..h {
                    for j in 0..w {
                        dx[(p * h + i) * w + j] += 0.25 * g[(p * ho + i / 2) * wo + j / 2];
                    }
                }
            }
        }
        Op::Upsample2x(x) => {
            let s = nodes[x.0].value.shape();
            let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
            let (ho, wo) = (2 * h, 2 * w);
            let dx = acc!(*x);
            for p in 0..nc {
                for i in 0..ho {
                    for j in 0..wo {
                        dx[(p * h + i / 2) * w + j / 2] += g[(p * ho + i) * wo + j];
                    }
                }
            }
        }
        Op::ChannelConv1d { x, w } => {
            let s = nodes[x.0].value.shape();
            let (n, c) = (s[0], s[1]);
            let k = nodes[w.0].value.numel();
            let pad = k / 2;
            let (xv, wv) = (val(*x).to_vec(), val(*w).to_vec());
            let mut dx = vec![0.0; n * c];
            let mut dw = vec![0.0; k];
            for sn in 0..n {
                for ch in 0..c {
                    let d = g[sn * c + ch];
                    for j in 0..k {
                        let src = ch as isize + j as isize - pad as isize;
                        if src >= 0 && (src as usize) < c {
                            let si = sn * c + src as usize;
                            dx[si] += wv[j] * d;
                            dw[j] += xv[si] * d;
                        }
                    }
                }
            }
            if wants(*x) {
                acc!(*x).iter_mut().zip(&dx).for_each(|(t, d)| *t += d);
            }
            if wants(*w) {
                acc!(*w).iter_mut().zip(&dw).for_each(|(t, d)| *t += d);
            }
        }
        Op::Sum(x) => {
            acc!(*x).iter_mut().for_each(|t| *t += g[0]);
        }
        Op::Mean(x) => {
            let n = len(*x) as f64;
            acc!(*x).iter_mut().for_each(|t| *t += g[0] / n);
        }
        Op::BceWithLogits { x, target } => {
            let xv = val(*x).to_vec();
            let n = xv.len() as f64;
            acc!(*x)
                .iter_mut()
                .zip(&xv)
                .zip(target)
                .for_each(|((t, &z), &y)| *t += g[0] * (sigmoid_unclamped(z) - y) / n);
        }
        Op::MaskedL1 { x, target, mask, denom } => {
            let xv = val(*x).to_vec();
            acc!(*x).iter_mut().zip(&xv).zip(target.iter().zip(mask)).for_each(|((t, &v), (&y, &m))| {
                let sgn = if v > y {
                    1.0
                } else if v < y {
                    -1.0
                } else {
                    0.0
                };
                *t += g[0] * m * sgn / denom;
            });
        }
    }
}

fn sigmoid_unclamped(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
        tape.leaf(&Tensor::new(shape.to_vec(), data).unwrap().into_param())
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.0]);
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[4], vec![0.0; 4]);
        let y = t.sigmoid(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5; 4]);
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn sigmoid_stays_open() {
        assert!(sigmoid(1e3) < 1.0);
        assert!(sigmoid(-1e3) > 0.0);
    }

    #[test]
    fn leaky_relu_negative() {
        assert_eq!(leaky_relu(-1.0, 0.1), -0.1);
        assert_eq!(leaky_relu(2.0, 0.1), 2.0);
    }

    #[test]
    fn backward_errors() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], vec![1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(Error::NotScalar(_))));
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(Error::AlreadyBackpropagated)));
        assert!(matches!(t.sum(x), Err(Error::AlreadyBackpropagated)));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[1], vec![1e308]);
        assert!(matches!(t.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn concat_then_slice_recovers_inputs() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2, 1, 2, 2], (0..8).map(f64::from).collect());
        let b = leaf(&mut t, &[2, 3, 2, 2], (0..24).map(|i| f64::from(i) * 0.1).collect());
        let c = t.concat_channels(&[a, b]).unwrap();
        assert_eq!(t.shape(c), &[2, 4, 2, 2]);
        let a2 = t.slice(c, 1, 0, 1).unwrap();
        let b2 = t.slice(c, 1, 1, 3).unwrap();
        assert_eq!(t.value(a2).data(), t.value(a).data());
        assert_eq!(t.value(b2).data(), t.value(b).data());
    }

    #[test]
    fn upsample_block_replicates() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = t.upsample2x(x).unwrap();
        #[rustfmt::skip]
        let expect = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(t.value(y).data(), &expect);
    }

    #[test]
    fn same_tensor_maps_to_one_leaf() {
        let p = Tensor::full(&[3], 2.0).into_param();
        let mut t = Tape::new();
        let a = t.leaf(&p);
        let b = t.leaf(&p);
        assert_eq!(a, b);
        let m = t.mul(a, b).unwrap();
        let s = t.sum(m).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad_of(&p).unwrap(), vec![4.0; 3]);
    }

    #[test]
    fn matmul_shapes() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2, 3], vec![1.0; 6]);
        let b = leaf(&mut t, &[2, 2], vec![1.0; 4]);
        assert!(t.matmul(a, b).is_err());
        let c = leaf(&mut t, &[3, 4], vec![1.0; 12]);
        let y = t.matmul(a, c).unwrap();
        assert_eq!(t.shape(y), &[2, 4]);
        assert_eq!(t.value(y).data(), &[3.0; 8]);
        assert_eq!(t.macs(), 24);
    }

    #[test]
    fn broadcast_index_maps_channels() {
        let m = broadcast_index(&[1, 2, 2, 1], &[1, 2, 1, 1]);
        assert_eq!(m, vec![0, 0, 1, 1]);
    }
}
