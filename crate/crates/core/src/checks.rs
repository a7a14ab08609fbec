//! The gradient-check suite: every tape op plus the FBCA block, the fusion
//! block, the neck and the detection head, each over several seeds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, Fbca};
use crate::blocks::{Fbcsp, FbcspConfig, FusionConfig, Neck, NeckConfig};
use crate::error::Result;
use crate::evalkit::metrics::BBox;
use crate::evalkit::model::{build_targets, detection_loss, Head, HEAD_STRIDE};
use crate::numerics::gradcheck::{gradcheck, GradCheckOptions, GradReport};
use crate::numerics::params::Parameterized;
use crate::numerics::rng::{derive_seed, RngStream};
use crate::numerics::tape::{BnStats, Tape, Var};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub seeds: usize,
    pub base_seed: u64,
    pub h: f64,
    pub tol: f64,
    pub fbca_channels: Vec<usize>,
    /// Run only checks whose name starts with one of these.
    pub only: Vec<String>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { seeds: 10, base_seed: 0, h: 1e-5, tol: 1e-4, fbca_channels: vec![4, 8, 16], only: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
    pub error: Option<String>,
}

impl CheckResult {
    fn from_report(name: &str, seed: u64, r: Result<GradReport>) -> Self {
        match r {
            Ok(r) => Self {
                name: name.to_string(),
                seed,
                max_rel_err: r.max_rel_err(),
                max_abs_err: r.params.iter().map(|p| p.max_abs_err).fold(0.0, f64::max),
                checked: r.checked(),
                skipped: r.skipped(),
                passed: r.passed(),
                error: None,
            },
            Err(e) => Self {
                name: name.to_string(),
                seed,
                max_rel_err: f64::NAN,
                max_abs_err: f64::NAN,
                checked: 0,
                skipped: 0,
                passed: false,
                error: Some(e.to_string()),
            },
        }
    }
}

/// `check,seed,max_rel_err,max_abs_err,checked,skipped,passed`.
pub fn suite_csv(results: &[CheckResult]) -> String {
    let mut s = String::from("check,seed,max_rel_err,max_abs_err,checked,skipped,passed\n");
    for r in results {
        let _ = writeln!(
            s,
            "{},{},{:e},{:e},{},{},{}",
            r.name, r.seed, r.max_rel_err, r.max_abs_err, r.checked, r.skipped, r.passed
        );
    }
    s
}

fn uniform(shape: &[usize], scale: f64, rng: &mut RngStream) -> Tensor {
    Tensor::uniform(shape, -scale, scale, rng)
}

/// `sum(out * proj)` with a fixed random projection of the output's shape.
fn project(tape: &mut Tape, out: Var, proj: &Tensor) -> Result<Var> {
    let r = tape.constant(proj.clone());
    let m = tape.mul(out, r)?;
    tape.sum(m)
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    inputs: &'static [&'static [usize]],
    scale: f64,
    f: OpFn,
}

fn ops() -> Vec<OpCase> {
    fn c(name: &'static str, inputs: &'static [&'static [usize]], scale: f64, f: OpFn) -> OpCase {
        OpCase { name, inputs, scale, f }
    }
    vec![
        c("op.conv2d", &[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]], 1.0, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        c("op.conv2d_stride2", &[&[1, 2, 6, 6], &[3, 2, 3, 3]], 1.0, |t, v| t.conv2d(v[0], v[1], None, 2, 1)),
        c("op.conv2d_1x1", &[&[2, 3, 3, 4], &[2, 3, 1, 1], &[2]], 1.0, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 0)),
        c("op.batch_norm_batch", &[&[3, 2, 3, 3], &[2], &[2]], 1.0, |t, v| {
            Ok(t.batch_norm(v[0], v[1], v[2], BnStats::Batch { eps: 1e-5 })?.0)
        }),
        c("op.batch_norm_fixed", &[&[2, 2, 3, 3], &[2], &[2]], 1.0, |t, v| {
            let stats = BnStats::Fixed { mean: &[0.1, -0.2], var: &[0.5, 2.0], eps: 1e-5 };
            Ok(t.batch_norm(v[0], v[1], v[2], stats)?.0)
        }),
        c("op.leaky_relu", &[&[2, 3, 4]], 1.0, |t, v| t.leaky_relu(v[0], 0.1)),
        c("op.sigmoid", &[&[2, 3, 4]], 4.0, |t, v| t.sigmoid(v[0])),
        c("op.hard_swish", &[&[2, 3, 4]], 5.0, |t, v| t.hard_swish(v[0])),
        c("op.add", &[&[2, 3], &[2, 3]], 1.0, |t, v| t.add(v[0], v[1])),
        c("op.sub", &[&[2, 3], &[2, 3]], 1.0, |t, v| t.sub(v[0], v[1])),
        c("op.mul", &[&[2, 3], &[2, 3]], 1.0, |t, v| t.mul(v[0], v[1])),
        c("op.one_minus", &[&[2, 3]], 1.0, |t, v| t.one_minus(v[0])),
        c("op.scale", &[&[2, 3]], 1.0, |t, v| t.scale(v[0], 1.7)),
        c("op.mul_broadcast", &[&[2, 3, 4, 5], &[1, 3, 1, 5]], 1.0, |t, v| t.mul_broadcast(v[0], v[1])),
        c("op.scale_channels", &[&[2, 3, 4, 4], &[2, 3]], 1.0, |t, v| t.scale_channels(v[0], v[1])),
        c("op.concat", &[&[2, 1, 3], &[2, 2, 3]], 1.0, |t, v| t.concat(&[v[0], v[1]], 1)),
        c("op.concat_last", &[&[2, 3, 1], &[2, 3, 2]], 1.0, |t, v| t.concat(&[v[0], v[1]], 2)),
        c("op.slice", &[&[2, 5, 3]], 1.0, |t, v| t.slice(v[0], 1, 1, 3)),
        c("op.reshape", &[&[2, 3, 4]], 1.0, |t, v| t.reshape(v[0], &[4, 6])),
        c("op.flatten", &[&[2, 3, 2, 2]], 1.0, |t, v| t.flatten(v[0])),
        c("op.swap_last2", &[&[2, 3, 4]], 1.0, |t, v| t.swap_last2(v[0])),
        c("op.matmul", &[&[3, 4], &[4, 5]], 1.0, |t, v| t.matmul(v[0], v[1])),
        c("op.matmul_batched", &[&[2, 3, 4], &[2, 4, 2]], 1.0, |t, v| t.matmul(v[0], v[1])),
        c("op.linear", &[&[3, 4], &[5, 4], &[5]], 1.0, |t, v| t.linear(v[0], v[1], Some(v[2]))),
        c("op.mean_pool_h", &[&[2, 3, 4, 5]], 1.0, |t, v| t.mean_pool(v[0], true, false)),
        c("op.mean_pool_w", &[&[2, 3, 4, 5]], 1.0, |t, v| t.mean_pool(v[0], false, true)),
        c("op.global_avg_pool", &[&[2, 3, 4, 5]], 1.0, |t, v| t.global_avg_pool(v[0])),
        c("op.avg_pool2x2", &[&[1, 2, 4, 6]], 1.0, |t, v| t.avg_pool2x2(v[0])),
        c("op.upsample2x", &[&[1, 2, 3, 2]], 1.0, |t, v| t.upsample2x(v[0])),
        c("op.channel_conv1d", &[&[2, 7], &[3]], 1.0, |t, v| t.channel_conv1d(v[0], v[1])),
        c("op.sum", &[&[2, 3]], 1.0, |t, v| t.sum(v[0])),
        c("op.mean", &[&[2, 3]], 1.0, |t, v| t.mean(v[0])),
        c("op.bce_with_logits", &[&[2, 6]], 3.0, |t, v| {
            let target = (0..12).map(|i| (i % 4) as f64 / 3.0).collect();
            t.bce_with_logits(v[0], target)
        }),
        c("op.masked_l1", &[&[2, 6]], 1.0, |t, v| {
            let target = (0..12).map(|i| 0.3 * (i as f64 - 5.5) / 5.5).collect();
            let mask = (0..12).map(|i| f64::from(u8::from(i % 3 != 0))).collect();
            t.masked_l1(v[0], target, mask, 3.0)
        }),
    ]
}

fn run_op(case: &OpCase, seed: u64, opts: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = RngStream::new(seed);
    let mut params: Vec<Tensor> = case.inputs.iter().map(|s| uniform(s, case.scale, &mut rng).into_param()).collect();
    let f = case.f;
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
        let out = f(&mut tape, &vars)?;
        tape.shape(out).to_vec()
    };
    let proj = uniform(&out_shape, 1.0, &mut rng);
    gradcheck(
        &mut params,
        |p, tape| {
            let vars: Vec<Var> = p.iter().map(|t| tape.leaf(t)).collect();
            let out = f(tape, &vars)?;
            project(tape, out, &proj)
        },
        opts,
    )
}

/// Module parameters together with a random input, checked jointly.
fn run_block<M: Parameterized>(
    module: M,
    x: Tensor,
    proj: Tensor,
    f: impl Fn(&M, &mut Tape, Var) -> Result<Var>,
    opts: &GradCheckOptions,
) -> Result<GradReport> {
    let mut p = (module, x.into_param());
    gradcheck(
        &mut p,
        |(m, x), tape| {
            let xv = tape.leaf(x);
            let y = f(m, tape, xv)?;
            project(tape, y, &proj)
        },
        opts,
    )
}

/// Inputs to attention-bearing blocks stay at this scale: the gates see
/// unnormalized spatial sums and saturate on unit-scale inputs, which buries
/// their gradients under finite-difference rounding.
const BLOCK_INPUT_SCALE: f64 = 0.1;

fn fbca_check(channels: usize, seed: u64, opts: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = RngStream::new(seed);
    let cfg = AttentionConfig { r: (channels / 2).clamp(1, 4), ..Default::default() };
    let block = Fbca::new("fbca", channels, 3, &cfg, &mut rng)?;
    let x = uniform(&[2, channels, 5, 5], BLOCK_INPUT_SCALE, &mut rng);
    let proj = uniform(&[2, channels, 5, 5], 1.0, &mut rng);
    run_block(block, x, proj, |b, t, x| Ok(b.forward(t, x, false)?.0), opts)
}

fn fbcsp_check(seed: u64, opts: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = RngStream::new(seed);
    let fusion = FusionConfig { attention: AttentionConfig { r: 2, ..Default::default() }, ..Default::default() };
    let block = Fbcsp::new("fbcsp", FbcspConfig::new(6, 8, &fusion), &mut rng)?;
    let x = uniform(&[1, 6, 6, 6], BLOCK_INPUT_SCALE, &mut rng);
    let proj = uniform(&[1, 8, 6, 6], 1.0, &mut rng);
    run_block(block, x, proj, |b, t, x| b.forward(t, x, false), opts)
}

fn neck_check(seed: u64, opts: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = RngStream::new(seed);
    let fusion = FusionConfig { attention: AttentionConfig { r: 2, ..Default::default() }, ..Default::default() };
    let neck = Neck::new(NeckConfig { in_channels: [4, 4, 4], out_channels: [4, 4, 4], fusion }, &mut rng)?;
    let shapes = [[1, 4, 8, 8], [1, 4, 4, 4], [1, 4, 2, 2]];
    let xs: Vec<Tensor> = shapes.iter().map(|s| uniform(s, BLOCK_INPUT_SCALE, &mut rng).into_param()).collect();
    let proj: Vec<Tensor> = shapes.iter().map(|s| uniform(s, 1.0, &mut rng)).collect();
    let mut p = (neck, xs);
    gradcheck(
        &mut p,
        |(neck, xs), tape| {
            let v: Vec<Var> = xs.iter().map(|x| tape.leaf(x)).collect();
            let out = neck.forward(tape, v[0], v[1], v[2], false)?;
            let mut total = project(tape, out.f3, &proj[0])?;
            for (y, r) in [out.f4, out.f5].into_iter().zip(&proj[1..]) {
                let s = project(tape, y, r)?;
                total = tape.add(total, s)?;
            }
            Ok(total)
        },
        opts,
    )
}

fn head_check(seed: u64, opts: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = RngStream::new(seed);
    let head = Head::new(4, 4, 0.1, 0.3, &mut rng)?;
    let grid = 4;
    let side = (grid * HEAD_STRIDE) as f64;
    let boxes: Vec<Vec<BBox>> = (0..2)
        .map(|_| {
            (0..2)
                .map(|_| {
                    let (w, h) = (rng.uniform(4.0, 10.0), rng.uniform(8.0, 20.0));
                    BBox::new(rng.uniform(0.0, side - w), rng.uniform(0.0, side - h), w, h)
                })
                .collect()
        })
        .collect();
    let refs: Vec<&[BBox]> = boxes.iter().map(Vec::as_slice).collect();
    let targets = build_targets(&refs, grid);
    let x = uniform(&[2, 4, grid, grid], 1.0, &mut rng).into_param();
    let mut p = (head, x);
    gradcheck(
        &mut p,
        |(head, x), tape| {
            let xv = tape.leaf(x);
            let raw = head.forward(tape, xv, false)?;
            detection_loss(tape, raw, &targets)
        },
        opts,
    )
}

/// Names of every check the suite runs, in order.
pub fn check_names(cfg: &SuiteConfig) -> Vec<String> {
    let mut names: Vec<String> = ops().iter().map(|c| c.name.to_string()).collect();
    names.extend(cfg.fbca_channels.iter().map(|c| format!("fbca.c{c}")));
    names.extend(["fbcsp", "neck", "head"].map(String::from));
    names.retain(|n| cfg.only.is_empty() || cfg.only.iter().any(|o| n.starts_with(o.as_str())));
    names
}

/// Runs every selected check for `cfg.seeds` seeds. Seeds are derived from
/// `base_seed`, the check name and the seed index.
pub fn run_suite(cfg: &SuiteConfig, mut progress: impl FnMut(&CheckResult)) -> Vec<CheckResult> {
    let opts = GradCheckOptions { h: cfg.h, tol: cfg.tol, ..Default::default() };
    let op_cases = ops();
    let mut out = Vec::new();
    for (k, name) in check_names(cfg).iter().enumerate() {
        for i in 0..cfg.seeds {
            let seed = derive_seed(cfg.base_seed, &[k as u64, i as u64]);
            let report = if let Some(case) = op_cases.iter().find(|c| c.name == name) {
                run_op(case, seed, &opts)
            } else if let Some(c) = name.strip_prefix("fbca.c") {
                fbca_check(c.parse().expect("generated name"), seed, &opts)
            } else {
                match name.as_str() {
                    "fbcsp" => fbcsp_check(seed, &opts),
                    "neck" => neck_check(seed, &opts),
                    _ => head_check(seed, &opts),
                }
            };
            let r = CheckResult::from_report(name, seed, report);
            progress(&r);
            out.push(r);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_selects_prefixes() {
        let cfg = SuiteConfig { only: vec!["fbca".into(), "op.mat".into()], ..Default::default() };
        assert_eq!(check_names(&cfg), ["op.matmul", "op.matmul_batched", "fbca.c4", "fbca.c8", "fbca.c16"]);
    }

    #[test]
    fn single_seed_of_ops_passes() {
        let cfg = SuiteConfig { seeds: 1, only: vec!["op.".into()], ..Default::default() };
        let res = run_suite(&cfg, |_| {});
        assert_eq!(res.len(), ops().len());
        for r in &res {
            assert!(r.passed, "{r:?}");
        }
        assert!(suite_csv(&res).starts_with("check,seed,"));
    }
}
