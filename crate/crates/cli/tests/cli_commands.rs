use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pppc_cli::ablate::{cmd_ablate, members, AblateArgs, Axis};
use pppc_cli::manifest::{RunManifest, Status};
use pppc_cli::OUTPUT_ROOT_ENV;

const TINY: &str = r#"
seed = 3

[world]
height = 24
width = 24
classes = 4
blob_scale = 6.0

[data]
source_images = 3
target_images = 3
eval_images = 2

[model]
hidden = 8
proj_hidden = 8
embed_dim = 4

[loss]
alpha = 0.3

[crop]
size = 8
top_k = 2
count = 4

[schedule]
total_iters = 10
warmup_iters = 2

[eval]
interval = 5
crops = 5
"#;

fn pppc(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pppc"))
        .args(args)
        .env(OUTPUT_ROOT_ENV, root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    (tmp, cfg)
}

fn run_dir(root: &Path, o: &Output) -> PathBuf {
    let line = String::from_utf8_lossy(&o.stdout).lines().last().unwrap().to_string();
    let p = PathBuf::from(line);
    assert!(p.starts_with(root), "{p:?} not under {root:?}");
    p
}

#[test]
fn train_writes_artifacts_and_a_completed_manifest() {
    let (tmp, cfg) = setup();
    let root = tmp.path().join("runs");
    let o = pppc(&root, &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dir = run_dir(&root, &o);
    let m = RunManifest::read(&dir.join(RunManifest::FILE)).unwrap();
    assert_eq!(m.status, Status::Completed);
    assert!(m.stages.iter().all(|s| s.status == Status::Completed));
    for f in &m.outputs {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let trace = fs::read_to_string(dir.join("trace.csv")).unwrap();
    assert!(trace.lines().count() >= 2);
    assert!(trace.starts_with("step,split,iou_0,iou_1,iou_2,iou_3,miou\n"));
    assert_eq!(fs::read_to_string(dir.join("steps.csv")).unwrap().lines().count(), 11);
}

#[test]
fn config_errors_exit_with_status_two() {
    let (tmp, cfg) = setup();
    let root = tmp.path().join("runs");
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[loss\nalpha = 0.5").unwrap();
    assert_eq!(code(&pppc(&root, &["train", "--config", bad.to_str().unwrap()])), 2);

    fs::write(&bad, "[loss]\nalpah = 0.5").unwrap();
    let o = pppc(&root, &["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("alpah"));

    let o = pppc(
        &root,
        &["train", "--config", cfg.to_str().unwrap(), "--set", "crop.top_k=9"],
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("crop.top_k"), "{}", stderr(&o));

    assert_eq!(code(&pppc(&root, &["train", "--config", "/no/such/file.toml"])), 2);
    assert_eq!(code(&pppc(&root, &["ablate", "--axis", "colour"])), 2);
    assert_eq!(code(&pppc(&root, &["frobnicate"])), 2);
    assert!(!root.exists() || fs::read_dir(&root).unwrap().next().is_none());
}

#[test]
fn existing_output_needs_force() {
    let (tmp, cfg) = setup();
    let root = tmp.path().join("runs");
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&pppc(&root, &["train", "--config", c])), 0);
    let o = pppc(&root, &["train", "--config", c]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--force"));
    assert_eq!(code(&pppc(&root, &["train", "--config", c, "--force"])), 0);
}

#[test]
fn numeric_abort_exits_with_status_three() {
    let (tmp, cfg) = setup();
    let root = tmp.path().join("runs");
    let o = pppc(
        &root,
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "schedule.lr=1e300",
            "--set",
            "schedule.warmup_iters=0",
        ],
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("aborted at step"));
    let dir = fs::read_dir(&root).unwrap().next().unwrap().unwrap().path();
    let m = RunManifest::read(&dir.join(RunManifest::FILE)).unwrap();
    assert_eq!(m.status, Status::Failed);
    assert!(dir.join("checkpoint_last_good.bin").is_file());
    assert!(!dir.join("checkpoint.bin").exists());
}

#[test]
fn manifest_replay_is_byte_identical() {
    let (tmp, cfg) = setup();
    let root = tmp.path().join("runs");
    let o = pppc(&root, &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let first = run_dir(&root, &o);
    let replay = root.join("replay");
    let manifest = first.join(RunManifest::FILE);
    let o = pppc(
        &root,
        &[
            "train",
            "--config",
            manifest.to_str().unwrap(),
            "--out",
            replay.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in [
        "checkpoint.bin",
        "trace.csv",
        "steps.csv",
        "summary.json",
        "config.toml",
    ] {
        assert_eq!(
            fs::read(first.join(f)).unwrap(),
            fs::read(replay.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn exports_are_complete_and_repeatable() {
    let (tmp, cfg) = setup();
    let root = tmp.path().join("runs");
    let dir = run_dir(&root, &pppc(&root, &["train", "--config", cfg.to_str().unwrap()]));
    let ckpt = dir.join("checkpoint.bin");
    let c = ckpt.to_str().unwrap();

    for what in ["entropy-maps", "embeddings", "grids"] {
        let a = tmp.path().join(format!("{what}-a"));
        let b = tmp.path().join(format!("{what}-b"));
        for out in [&a, &b] {
            let o = pppc(
                &root,
                &["export", "--what", what, "--ckpt", c, "--out", out.to_str().unwrap()],
            );
            assert_eq!(code(&o), 0, "{}", stderr(&o));
        }
        let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert!(!names.is_empty());
        for n in &names {
            assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n:?}");
        }
    }
    // Two 24×24 target evaluation grids, one row per pixel plus the header.
    let csv = fs::read_to_string(tmp.path().join("embeddings-a/embeddings_target.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 24 * 24);
    assert!(csv.lines().next().unwrap().ends_with("var_3"));
    let pgm = fs::read(tmp.path().join("entropy-maps-a/entropy_target_00.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n24 24\n255\n"));
    assert_eq!(pgm.len(), b"P5\n24 24\n255\n".len() + 24 * 24);

    fs::write(tmp.path().join("junk.bin"), b"not a checkpoint").unwrap();
    let junk = tmp.path().join("junk.bin");
    assert_eq!(
        code(&pppc(
            &root,
            &["export", "--what", "grids", "--ckpt", junk.to_str().unwrap()]
        )),
        2
    );
}

#[test]
fn ablation_tables_follow_the_axis_rows() {
    let (tmp, cfg) = setup();
    let mut args = AblateArgs::new(Axis::LossTerms);
    args.config = Some(cfg.clone());
    args.seeds = vec![1, 2];
    args.out = Some(tmp.path().join("loss"));
    let report = cmd_ablate(&args).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(names, ["ssl", "ssl+cl", "ssl+cl+kl", "ssl+cl+kl+agc"]);
    assert!(!report.any_failed());
    assert!(report.rows[0].delta.is_none());
    for r in &report.rows[1..] {
        assert!((r.delta.unwrap() - (r.miou.unwrap() - report.rows[0].miou.unwrap())).abs() < 1e-15);
    }
    assert_eq!(report.runs.len(), 8);
    let table = fs::read_to_string(report.dir.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(table.starts_with("method,miou,delta_vs_base,completed,failed\nssl,"));

    args.only = vec!["ssl+cl".into()];
    args.seeds = vec![1];
    args.force = true;
    let one = cmd_ablate(&args).unwrap();
    assert_eq!(one.rows.len(), 1);
    // The lone row reproduces the same member of the full sweep.
    let earlier = report
        .runs
        .iter()
        .find(|r| r.method == "ssl+cl" && r.seed == 1)
        .unwrap();
    assert_eq!(one.runs[0].result, earlier.result);

    let sim: Vec<String> = members(Axis::Similarity).into_iter().map(|m| m.name).collect();
    assert_eq!(sim.len(), 10);
    assert!(sim.contains(&"mc_cosine:30".to_string()) && sim.contains(&"bk".to_string()));
    let crop: Vec<String> = members(Axis::Cropping).into_iter().map(|m| m.name).collect();
    assert_eq!(crop, ["random", "cbc", "agc_constant", "agc"]);
}

#[test]
fn failed_member_marks_its_row_and_exits_one() {
    let (tmp, cfg) = setup();
    let root = tmp.path().join("runs");
    let o = pppc(
        &root,
        &[
            "ablate",
            "--axis",
            "cropping",
            "--only",
            "random,agc",
            "--seeds",
            "1",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "schedule.lr=1e300",
            "--set",
            "schedule.warmup_iters=0",
        ],
    );
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("random,failed,failed,0,1"), "{out}");
}

#[test]
fn verify_reports_one_line_per_check() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pppc(tmp.path(), &["verify"]);
    let out = String::from_utf8_lossy(&o.stdout);
    let lines: Vec<&str> = out.lines().collect();
    let checks = &lines[..lines.len() - 1];
    assert!(checks.len() >= 10);
    assert!(checks.iter().all(|l| l.starts_with("PASS ") || l.starts_with("FAIL ")));
    let all_pass = checks.iter().all(|l| l.starts_with("PASS "));
    assert_eq!(code(&o), if all_pass { 0 } else { 1 });
}
