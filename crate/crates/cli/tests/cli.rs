use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fbcnet(args: &[&str], out: &Path, config: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fbcnet"));
    cmd.args(args).arg("--out").arg(out).env("RUST_LOG", "warn");
    if let Some(text) = config {
        let path = out.with_extension("json");
        fs::write(&path, text).unwrap();
        cmd.arg("--config").arg(path);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"{"experiment": {"train_scenes": 12, "eval_scenes": 6, "train": {"epochs": 3, "batch_size": 4}}}"#;

#[test]
fn corrupt_json_exits_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let o = fbcnet(&["gradcheck"], &dir.path().join("o"), Some(r#"{"seed": 1,"#));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}

#[test]
fn unknown_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let o = fbcnet(&["bench-attn"], &dir.path().join("o"), Some(r#"{"bench": {"chanels": 4}}"#));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("chanels"));
}

#[test]
fn gradcheck_refuses_f32() {
    let dir = tempfile::tempdir().unwrap();
    let o = fbcnet(&["gradcheck", "--precision", "f32"], &dir.path().join("o"), None);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_subset_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = fbcnet(&["gradcheck"], &out, Some(r#"{"gradcheck": {"seeds": 2, "only": ["op.sig", "fbca.c4"]}}"#));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("gradcheck.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
    assert!(csv.lines().any(|l| l.starts_with("fbca.c4,")));
}

#[test]
fn bad_flag_exits_2() {
    let o = Command::new(env!("CARGO_BIN_EXE_fbcnet")).args(["bench-attn", "--jobs", "x"]).output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn echoed_config_is_verbatim_and_resolved_config_reparses() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let text = r#"{"seed": 5, "bench": {"kinds": ["eca"], "channels": 8, "height": 4, "width": 4}}"#;
    assert_eq!(code(&fbcnet(&["bench-attn"], &out, Some(text))), 0);
    assert_eq!(fs::read_to_string(out.join("config.json")).unwrap(), text);
    let resolved = fbcnet_cli::config::parse(&fs::read_to_string(out.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved.seed, Some(5));
    assert_eq!(resolved.experiment.train.seed, 5);
}

#[test]
fn bench_eca_has_three_params() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(code(&fbcnet(&["bench-attn"], &out, Some(r#"{"bench": {"kinds": ["eca"]}}"#))), 0);
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "eca");
    assert_eq!(row[6], "3");
}

#[test]
fn bench_fbca_macs_match_hand_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cfg = r#"{"bench": {"kinds": ["fbca"], "channels": 64, "height": 80, "width": 80, "k": 5, "attention": {"r": 16}}}"#;
    assert_eq!(code(&fbcnet(&["bench-attn"], &out, Some(cfg))), 0);
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    let row: Vec<u64> = csv.lines().nth(1).unwrap().split(',').skip(6).map(|v| v.parse().unwrap()).collect();
    let hand = 25 * 64 * 6400 + 2 * 64 * 6400 + 2 * 2 * 64 * 4;
    assert_eq!(row[2], hand);
    assert_eq!(row[3], hand);
}

#[test]
fn ablate_one_seed_two_kinds_gives_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cfg = r#"{"experiment": {"train_scenes": 8, "eval_scenes": 4, "train": {"epochs": 1, "batch_size": 4}},
                 "ablation": {"variants": ["fbca", "fbca_no_bg"], "seeds": [7]}}"#;
    let o = fbcnet(&["ablate", "--jobs", "2"], &out, Some(cfg));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert_eq!(fs::read_to_string(out.join("ablation.csv")).unwrap().lines().count(), 3);
}

#[test]
fn eval_toy_reproduces_final_training_mr2_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = fbcnet(&["train-toy"], &out, Some(SMALL));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let last = metrics.lines().last().unwrap().split(',').nth(2).unwrap().to_string();
    let o = fbcnet(&["eval-toy"], &out, Some(SMALL));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let eval = fs::read_to_string(out.join("eval.csv")).unwrap();
    let got = eval.lines().nth(1).unwrap().split(',').next().unwrap();
    assert_eq!(got.parse::<f64>().unwrap().to_bits(), last.parse::<f64>().unwrap().to_bits());

    // another seed regenerates a different evaluation split
    let o = fbcnet(&["eval-toy", "--seed", "1234"], &out, Some(SMALL));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("mismatch"));
}

#[test]
fn eval_toy_without_weights_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = fbcnet(&["eval-toy"], &dir.path().join("o"), Some(SMALL));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("weights"));
}

#[test]
fn f32_weights_still_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(code(&fbcnet(&["train-toy", "--precision", "f32"], &out, Some(SMALL))), 0);
    let o = fbcnet(&["eval-toy"], &out, Some(SMALL));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn symmetric_dump_is_uniform_gray() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cfg = r#"{"experiment": {"eval_scenes": 3}, "dump": {"symmetric": true}}"#;
    let o = fbcnet(&["dump-attn", "--image", "2"], &out, Some(cfg));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut maps = 0;
    for entry in fs::read_dir(out.join("dump")).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "pgm") {
            let bytes = fs::read(&path).unwrap();
            let header_end = bytes.windows(4).position(|w| w == b"255\n").unwrap() + 4;
            assert!(bytes[header_end..].iter().all(|&b| b == 128), "{}", path.display());
            maps += 1;
        }
    }
    assert!(maps > 0);
    let channels = fs::read_to_string(out.join("dump/channels.csv")).unwrap();
    assert!(channels.lines().skip(1).all(|l| l.ends_with(",0")));
}

#[test]
fn dump_index_out_of_range_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = fbcnet(&["dump-attn", "--image", "3"], &dir.path().join("o"), Some(r#"{"experiment": {"eval_scenes": 3}}"#));
    assert_eq!(code(&o), 2);
}
