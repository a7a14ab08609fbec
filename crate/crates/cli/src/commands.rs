//! One function per subcommand.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use serde_json::json;

use fbcnet::attention::AttentionBlock;
use fbcnet::checks::{run_suite, suite_csv};
use fbcnet::evalkit::ablation::{ablation_csv, ordering_warnings, run_ablation, summarize};
use fbcnet::evalkit::dataset::{Dataset, Split};
use fbcnet::evalkit::dump::{channel_csv, dump_sites, pgm};
use fbcnet::evalkit::train::{evaluate, train, EpochLog, Experiment, TrainLog};
use fbcnet::evalkit::ToyModel;
use fbcnet::numerics::weights::{self, DType};
use fbcnet::numerics::{Parameterized, RngStream, Tape, Tensor};

use crate::config::{self, LoadedConfig, Precision, RunConfig};
use crate::error::CliError;
use crate::{Cli, Command};

const DEFAULT_OUT: &str = "fbcnet-out";
const WEIGHTS_STEM: &str = "weights";

/// Resolved settings shared by every command.
pub struct Context {
    pub loaded: LoadedConfig,
    pub cfg: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
    pub precision: Precision,
}

impl Context {
    pub fn new(cli: &Cli) -> Result<Self, CliError> {
        let loaded = config::load(cli.config.as_deref())?;
        let mut cfg = loaded.config.clone();
        let seed = cli.seed.or(cfg.seed).unwrap_or(cfg.experiment.train.seed);
        cfg.seed = Some(seed);
        cfg.experiment.train.seed = seed;
        cfg.gradcheck.base_seed = seed;
        let out = cli.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        cfg.out_dir = Some(out.clone());
        let precision = cli.precision.unwrap_or(cfg.precision);
        cfg.precision = precision;
        if cli.jobs == 0 {
            return Err(CliError::usage("--jobs must be at least 1"));
        }
        Ok(Self { loaded, cfg, seed, out, jobs: cli.jobs, precision })
    }

    fn experiment(&self) -> Result<Experiment, CliError> {
        let exp = self.cfg.experiment;
        exp.validate()?;
        Ok(exp)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Creates the output directory and echoes the config: the source text
    /// verbatim, plus the structure after flag overrides.
    fn prepare_out(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display())).map_err(CliError::Runtime)?;
        fs::write(self.path("config.json"), &self.loaded.source)?;
        fs::write(self.path("resolved_config.json"), serde_json::to_string_pretty(&self.cfg)? + "\n")?;
        Ok(())
    }
}

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let ctx = Context::new(cli)?;
    match &cli.command {
        Command::Gradcheck => gradcheck(&ctx),
        Command::TrainToy => train_toy(&ctx),
        Command::EvalToy => eval_toy(&ctx),
        Command::Ablate => ablate(&ctx),
        Command::BenchAttn => bench_attn(&ctx),
        Command::DumpAttn { image } => dump_attn(&ctx, *image),
    }
}

pub fn gradcheck(ctx: &Context) -> Result<(), CliError> {
    if ctx.precision != Precision::F64 {
        return Err(CliError::usage("gradcheck requires f64 precision"));
    }
    ctx.prepare_out()?;
    let results = run_suite(&ctx.cfg.gradcheck, |r| {
        if !r.passed {
            log::error!("{} seed {}: max rel err {:e} {}", r.name, r.seed, r.max_rel_err, r.error.as_deref().unwrap_or(""));
        }
    });
    fs::write(ctx.path("gradcheck.csv"), suite_csv(&results))?;
    let mut names: Vec<&str> = Vec::new();
    for r in &results {
        if !names.contains(&r.name.as_str()) {
            names.push(&r.name);
        }
    }
    let mut failed = 0;
    for name in names {
        let rs: Vec<_> = results.iter().filter(|r| r.name == name).collect();
        let worst = rs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
        let bad = rs.iter().filter(|r| !r.passed).count();
        failed += bad;
        let checked: usize = rs.iter().map(|r| r.checked).sum();
        let skipped: usize = rs.iter().map(|r| r.skipped).sum();
        println!(
            "{:<22} seeds {:>2}  max rel err {:>10.3e}  checked {:>6}  skipped {:>4}  {}",
            name,
            rs.len(),
            worst,
            checked,
            skipped,
            if bad == 0 { "ok" } else { "FAIL" }
        );
    }
    if failed > 0 {
        return Err(CliError::Check(format!("{failed} of {} gradient checks failed", results.len())));
    }
    println!("all {} checks passed (tol {:e})", results.len(), ctx.cfg.gradcheck.tol);
    Ok(())
}

fn dtype(p: Precision) -> DType {
    match p {
        Precision::F32 => DType::F32,
        Precision::F64 => DType::F64,
    }
}

fn write_logs(ctx: &Context, log: &TrainLog) -> Result<(), CliError> {
    fs::write(ctx.path("metrics.csv"), log.metrics_csv())?;
    fs::write(ctx.path("sites.csv"), log.sites_csv())?;
    Ok(())
}

pub fn train_toy(ctx: &Context) -> Result<(), CliError> {
    let exp = ctx.experiment()?;
    ctx.prepare_out()?;
    let (tr, ev) = exp.datasets()?;
    tr.save_cache(&ctx.path("dataset/train"))?;
    ev.save_cache(&ctx.path("dataset/eval"))?;
    let mut model = exp.build_model()?;
    let mut seen = TrainLog::default();
    let every = (exp.train.epochs / 10).max(1);
    let mut observer = |e: &EpochLog| {
        if e.epoch % every == 0 || e.epoch == exp.train.epochs {
            log::info!("epoch {:>4}  loss {:.5}  mr2 {:.4}", e.epoch, e.loss, e.mr2());
        }
        seen.epochs.push(e.clone());
    };
    let result = train(&mut model, &tr, &ev, &exp, &mut observer);
    let meta = |final_mr2: f64| {
        json!({
            "seed": ctx.seed,
            "attention_kind": exp.train.attention_kind,
            "include_background": exp.train.include_background,
            "train_hash": tr.hash(),
            "eval_hash": ev.hash(),
            "final_mr2": final_mr2,
        })
    };
    match result {
        Ok(log) => {
            write_logs(ctx, &log)?;
            let final_mr2 = log.last_eval().map_or(f64::NAN, EpochLog::mr2);
            weights::save(&model, &ctx.out, WEIGHTS_STEM, dtype(ctx.precision), meta(final_mr2))?;
            println!("final mr2 {final_mr2}");
            Ok(())
        }
        Err(fbcnet::Error::Diverged { epoch }) => {
            write_logs(ctx, &seen)?;
            let path = weights::save(&model, &ctx.out, "checkpoint", dtype(ctx.precision), meta(f64::NAN))?;
            Err(CliError::Check(format!("training diverged at epoch {epoch}; last good parameters in {}", path.display())))
        }
        Err(e) => Err(e.into()),
    }
}

fn load_model(exp: &Experiment, manifest: &Path) -> Result<(ToyModel, serde_json::Value), CliError> {
    if !manifest.is_file() {
        return Err(CliError::usage(format!("missing weights file {}", manifest.display())));
    }
    let mut model = exp.build_model()?;
    let meta = weights::load(&mut model, manifest)?;
    Ok((model, meta))
}

pub fn eval_toy(ctx: &Context) -> Result<(), CliError> {
    let exp = ctx.experiment()?;
    let ev = Dataset::generate(exp.train.seed, Split::Eval, exp.eval_scenes, &exp.scene)?;
    let (model, meta) = load_model(&exp, &ctx.path(&format!("{WEIGHTS_STEM}.json")))?;
    let hash = ev.hash();
    if meta.get("eval_hash").and_then(|h| h.as_str()) != Some(hash.as_str()) {
        return Err(CliError::usage("dataset/seed mismatch: evaluation split differs from the one the weights were trained with"));
    }
    let cache = ctx.path("dataset/eval");
    if cache.join("index.json").is_file() && Dataset::load_cache(&cache)?.hash() != hash {
        return Err(CliError::usage(format!("dataset/seed mismatch with cache {}", cache.display())));
    }
    let e = evaluate(&model, &ev, exp.train.batch_size, &exp.decode, &exp.mr)?;
    let csv = format!("mr2,mean_abs_dw,mean_cf,mean_cb\n{},{},{},{}\n", e.mr2, e.mean_abs_dw(), e.mean_cf(), e.mean_cb());
    fs::write(ctx.path("eval.csv"), csv)?;
    println!("mr2 {}", e.mr2);
    Ok(())
}

pub fn ablate(ctx: &Context) -> Result<(), CliError> {
    let exp = ctx.experiment()?;
    let sec = &ctx.cfg.ablation;
    if sec.variants.is_empty() {
        return Err(CliError::usage("ablation: no variants"));
    }
    let seeds: Vec<u64> = if sec.seeds.is_empty() { (0..5).map(|i| ctx.seed + i).collect() } else { sec.seeds.clone() };
    ctx.prepare_out()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.jobs)
        .build()
        .map_err(|e| CliError::Runtime(e.into()))?;
    let runs = pool.install(|| run_ablation(&exp, &sec.variants, &seeds))?;
    fs::write(ctx.path("ablation.csv"), ablation_csv(&runs))?;
    let summary = summarize(&runs);
    let mut s = String::from("kind,runs,mean,sd\n");
    for row in &summary {
        let _ = writeln!(s, "{},{},{},{}", row.variant, row.runs, row.mean, row.sd);
        println!("{:<11} n={}  mr2 {:.4} ± {:.4}", row.variant.as_str(), row.runs, row.mean, row.sd);
    }
    fs::write(ctx.path("summary.csv"), s)?;
    for w in ordering_warnings(&summary) {
        log::warn!("ablation ordering: {w}");
    }
    Ok(())
}

pub fn bench_attn(ctx: &Context) -> Result<(), CliError> {
    let b = &ctx.cfg.bench;
    ctx.prepare_out()?;
    let mut csv = String::from("kind,channels,height,width,k,r,params,formula_params,macs,counted_macs\n");
    let mut mismatches = Vec::new();
    println!("{:<6} {:>8} {:>14} {:>14}", "kind", "params", "macs", "counted");
    for &kind in &b.kinds {
        let mut rng = RngStream::new(ctx.seed);
        let block = AttentionBlock::new(kind, "bench", b.channels, b.k, &b.attention, &mut rng)?;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, b.channels, b.height, b.width]));
        block.forward(&mut tape, x, false)?;
        let counted = tape.macs();
        let macs = AttentionBlock::formula_macs(kind, b.channels, b.height, b.width, b.k, &b.attention);
        let params = block.param_count();
        let fparams = AttentionBlock::formula_params(kind, b.channels, b.k, &b.attention);
        let _ = writeln!(
            csv,
            "{kind},{},{},{},{},{},{params},{fparams},{macs},{counted}",
            b.channels, b.height, b.width, b.k, b.attention.r
        );
        println!("{:<6} {:>8} {:>14} {:>14}", kind.as_str(), params, macs, counted);
        if macs != counted || params != fparams {
            mismatches.push(kind.as_str());
        }
    }
    fs::write(ctx.path("bench.csv"), csv)?;
    if !mismatches.is_empty() {
        return Err(CliError::Check(format!("formula and count disagree for {}", mismatches.join(", "))));
    }
    Ok(())
}

pub fn dump_attn(ctx: &Context, image: Option<usize>) -> Result<(), CliError> {
    let exp = ctx.experiment()?;
    let d = &ctx.cfg.dump;
    let index = image.unwrap_or(d.image_index);
    if index >= exp.eval_scenes {
        return Err(fbcnet::Error::IndexOutOfRange { index, len: exp.eval_scenes }.into());
    }
    let ev = Dataset::generate(exp.train.seed, Split::Eval, index + 1, &exp.scene)?;
    let mut model = match &d.weights {
        Some(p) => load_model(&exp, p)?.0,
        None => exp.build_model()?,
    };
    if d.symmetric {
        for fusion in model.neck.fusions_mut() {
            for site in fusion.attention_sites_mut() {
                if let Some(f) = site.as_fbca_mut() {
                    f.make_symmetric();
                }
            }
        }
    }
    ctx.prepare_out()?;
    let sites = dump_sites(&model, &ev.scenes[index])?;
    if sites.is_empty() {
        log::warn!("model has no FBCA sites; nothing to dump");
    }
    let dir = ctx.path("dump");
    fs::create_dir_all(&dir)?;
    for s in &sites {
        let shape = s.f_map_fore.shape();
        fs::write(dir.join(format!("{}.pgm", s.site)), pgm(s.f_map_fore.data(), shape[0], shape[1])?)?;
    }
    fs::write(dir.join("channels.csv"), channel_csv(&sites))?;
    println!("wrote {} activation maps for eval image {index} to {}", sites.len(), dir.display());
    Ok(())
}
