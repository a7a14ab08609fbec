//! Attention-variant sweeps over seeds.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::error::{Error, Result};

use super::train::{train, Experiment, TrainLog};

/// One row of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    None,
    Se,
    Eca,
    Coord,
    FbcaNoBg,
    Fbca,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::None, Variant::Se, Variant::Eca, Variant::Coord, Variant::FbcaNoBg, Variant::Fbca];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::Se => "se",
            Variant::Eca => "eca",
            Variant::Coord => "coord",
            Variant::FbcaNoBg => "fbca_no_bg",
            Variant::Fbca => "fbca",
        }
    }

    pub fn kind(self) -> AttentionKind {
        match self {
            Variant::None => AttentionKind::None,
            Variant::Se => AttentionKind::Se,
            Variant::Eca => AttentionKind::Eca,
            Variant::Coord => AttentionKind::Coord,
            Variant::FbcaNoBg | Variant::Fbca => AttentionKind::Fbca,
        }
    }

    /// `base` with this variant's attention settings.
    pub fn apply(self, base: &Experiment) -> Experiment {
        let mut e = *base;
        e.train.attention_kind = self.kind();
        e.train.include_background = self != Variant::FbcaNoBg;
        e
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub mr2: f64,
    pub log: TrainLog,
}

/// Trains one model per `(variant, seed)`. Jobs run on the current rayon
/// pool; results come back in variant-major, seed-minor order.
pub fn run_ablation(base: &Experiment, variants: &[Variant], seeds: &[u64]) -> Result<Vec<AblationRun>> {
    let jobs: Vec<(Variant, u64)> = variants.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    jobs.par_iter()
        .map(|&(variant, seed)| {
            let mut exp = variant.apply(base);
            exp.train.seed = seed;
            let (tr, ev) = exp.datasets()?;
            let mut model = exp.build_model()?;
            let log = train(&mut model, &tr, &ev, &exp, &mut ())?;
            let mr2 = log.last_eval().map_or(f64::NAN, |e| e.mr2());
            log::info!("ablation {variant} seed {seed}: mr2 {mr2:.4}");
            Ok(AblationRun { variant, seed, mr2, log })
        })
        .collect()
}

/// `kind,seed,mr2`.
pub fn ablation_csv(runs: &[AblationRun]) -> String {
    let mut s = String::from("kind,seed,mr2\n");
    for r in runs {
        let _ = writeln!(s, "{},{},{}", r.variant, r.seed, r.mr2);
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub variant: Variant,
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub sd: f64,
}

/// Mean and sample sd of MR per variant, in first-appearance order.
pub fn summarize(runs: &[AblationRun]) -> Vec<Summary> {
    let mut order: Vec<Variant> = Vec::new();
    for r in runs {
        if !order.contains(&r.variant) {
            order.push(r.variant);
        }
    }
    order
        .into_iter()
        .map(|v| {
            let xs: Vec<f64> = runs.iter().filter(|r| r.variant == v).map(|r| r.mr2).collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let sd = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
            Summary { variant: v, runs: xs.len(), mean, sd }
        })
        .collect()
}

/// Orderings expected from the full-scale ablation that do not hold here.
pub fn ordering_warnings(summary: &[Summary]) -> Vec<String> {
    let get = |v| summary.iter().find(|s| s.variant == v).map(|s| s.mean);
    let mut out = Vec::new();
    if let Some(f) = get(Variant::Fbca) {
        for other in [Variant::FbcaNoBg, Variant::None] {
            if let Some(o) = get(other) {
                if f > o {
                    out.push(format!("mean MR fbca {f:.4} > {other} {o:.4}"));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(variant: Variant, seed: u64, mr2: f64) -> AblationRun {
        AblationRun { variant, seed, mr2, log: TrainLog::default() }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("fbca_w/o".parse::<Variant>().is_err());
    }

    #[test]
    fn summary_mean_and_sd() {
        let runs = [run(Variant::Fbca, 1, 0.1), run(Variant::Fbca, 2, 0.3), run(Variant::None, 1, 0.5)];
        let s = summarize(&runs);
        assert_eq!(s.len(), 2);
        assert!((s[0].mean - 0.2).abs() < 1e-15);
        assert!((s[0].sd - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(s[1].sd, 0.0);
        assert!(ordering_warnings(&s).is_empty());
        let bad = summarize(&[run(Variant::Fbca, 1, 0.6), run(Variant::None, 1, 0.5)]);
        assert_eq!(ordering_warnings(&bad).len(), 1);
        assert_eq!(ablation_csv(&runs[..1]), "kind,seed,mr2\nfbca,1,0.1\n");
    }
}
