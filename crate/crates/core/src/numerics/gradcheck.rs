//! Central-difference gradient checking.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::params::Parameterized;
use crate::numerics::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Absolute errors at or below this count as exact agreement; keeps `0/0`
    /// at zero and absorbs the rounding floor of the difference quotient.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamReport {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Elements whose `±h` probes landed on a different branch of a
    /// piecewise op than the base point; central differences are not a valid
    /// oracle there.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub params: Vec<ParamReport>,
    pub tol: f64,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tol)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.numel - p.skipped).sum()
    }

    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped).sum()
    }
}

/// Relative error `|a - n| / max(|a|, |n|)`, or 0 when `|a - n| <= floor`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= floor {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Loss value and branch signature of one forward pass.
fn eval_loss<P: Parameterized + ?Sized, F: FnMut(&P, &mut Tape) -> Result<Var>>(params: &P, forward: &mut F) -> Result<(f64, u64)> {
    let mut tape = Tape::new();
    let loss = forward(params, &mut tape)?;
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    let s = v.data()[0];
    if !s.is_finite() {
        return Err(Error::NonFinite { op: "gradcheck" });
    }
    Ok((s, tape.branch_signature()))
}

/// Writes `value` into element `elem` of the `index`-th trainable tensor and
/// returns the previous value.
fn poke<P: Parameterized + ?Sized>(params: &mut P, index: usize, elem: usize, value: f64) -> f64 {
    let mut seen = 0;
    let mut old = f64::NAN;
    params.visit_mut("", &mut |_, t| {
        if !t.requires_grad() {
            return;
        }
        if seen == index {
            old = std::mem::replace(&mut t.data_mut()[elem], value);
        }
        seen += 1;
    });
    old
}

/// Compares the tape gradient of the scalar `forward` against central
/// differences for every trainable tensor in `params`.
pub fn gradcheck<P, F>(params: &mut P, mut forward: F, opts: &GradCheckOptions) -> Result<GradReport>
where
    P: Parameterized + ?Sized,
    F: FnMut(&P, &mut Tape) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&opts.h) {
        return Err(Error::invalid(format!("gradcheck: step h={} outside [1e-6, 1e-4]", opts.h)));
    }
    let mut tape = Tape::new();
    let loss = forward(params, &mut tape)?;
    let base_branches = tape.branch_signature();
    tape.backward(loss)?;
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    params.visit("", &mut |name, t| {
        if t.requires_grad() {
            let g = tape.grad_of(t).unwrap_or_else(|| vec![0.0; t.numel()]);
            analytic.push((name.to_string(), g));
        }
    });
    drop(tape);

    let mut reports = Vec::with_capacity(analytic.len());
    for (index, (name, grad)) in analytic.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut skipped = 0;
        for (elem, &a) in grad.iter().enumerate() {
            let orig = poke(params, index, elem, f64::NAN);
            poke(params, index, elem, orig + opts.h);
            let plus = eval_loss(params, &mut forward);
            poke(params, index, elem, orig - opts.h);
            let minus = eval_loss(params, &mut forward);
            poke(params, index, elem, orig);
            let ((plus, bp), (minus, bm)) = (plus?, minus?);
            if !a.is_finite() {
                return Err(Error::NonFinite { op: "gradcheck" });
            }
            if bp != base_branches || bm != base_branches {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.h);
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(rel_err(a, numeric, opts.abs_floor));
        }
        reports.push(ParamReport {
            name: name.clone(),
            numel: grad.len(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            skipped,
        });
    }
    Ok(GradReport { params: reports, tol: opts.tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn zero_function_has_zero_error() {
        let mut p = Tensor::full(&[3], 1.0).into_param();
        let report = gradcheck(
            &mut p,
            |p, tape| {
                let x = tape.leaf(p);
                let z = tape.scale(x, 0.0)?;
                tape.sum(z)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.max_rel_err(), 0.0);
        assert!(report.passed());
    }

    #[test]
    fn linear_layer_passes_seed_7() {
        let mut rng = RngStream::new(7);
        let mut params = (
            (Tensor::normal(&[3, 4], 1.0, &mut rng).into_param(), Tensor::normal(&[3], 1.0, &mut rng).into_param()),
            Tensor::normal(&[2, 4], 1.0, &mut rng).into_param(),
        );
        let proj = Tensor::normal(&[2, 3], 1.0, &mut rng);
        let report = gradcheck(
            &mut params,
            |p, tape| {
                let (w, b, x) = (tape.leaf(&p.0 .0), tape.leaf(&p.0 .1), tape.leaf(&p.1));
                let y = tape.linear(x, w, Some(b))?;
                let r = tape.constant(proj.clone());
                let m = tape.mul(y, r)?;
                tape.sum(m)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.params.len(), 3);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // A loss whose value ignores the parameter on the tape path is caught.
        let mut p = Tensor::full(&[2], 0.5).into_param();
        let report = gradcheck(
            &mut p,
            |p, tape| {
                let x = tape.leaf(p);
                let sq = tape.mul(x, x)?;
                let s = tape.sum(sq)?;
                // Constant folded from the raw data: the tape sees no dependency.
                let extra = tape.constant(Tensor::scalar(p.data().iter().sum::<f64>() * 3.0));
                tape.add(s, extra)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn kink_crossings_are_skipped_not_misreported() {
        // x sits within h of the leaky-relu kink; the difference quotient
        // straddles two slopes and would disagree with either one-sided slope.
        let mut p = Tensor::new(vec![2], vec![4e-6, 0.5]).unwrap().into_param();
        let report = gradcheck(
            &mut p,
            |p, tape| {
                let x = tape.leaf(p);
                let y = tape.leaky_relu(x, 0.1)?;
                tape.sum(y)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.skipped(), 1);
        assert_eq!(report.checked(), 1);
        assert!(report.passed());
    }

    #[test]
    fn step_out_of_range_is_rejected() {
        let mut p = Tensor::full(&[1], 1.0).into_param();
        let opts = GradCheckOptions { h: 1e-2, ..Default::default() };
        assert!(gradcheck(&mut p, |p, t| { let x = t.leaf(p); t.sum(x) }, &opts).is_err());
    }
}
