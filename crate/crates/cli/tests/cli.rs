//! End-to-end tests of the binary: flag handling, exit codes, config
//! merging, and the happy path through train/attack/eval/report.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use memebench::dataset::{load_manifest, save_dataset};
use memebench::synth;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_memebench"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_line(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).trim().to_string()
}

/// Write a small train/test fixture manifest and return its path.
fn fixture_manifest(dir: &Path, n_train: usize, n_test: usize, seed: u64) -> PathBuf {
    let ds = synth::make_synthetic_dataset_with_splits(n_train, 0, n_test, seed, 24);
    save_dataset(&ds, dir).expect("fixture saved")
}

#[test]
fn help_exits_zero_on_every_subcommand() {
    for args in [
        vec!["--help"],
        vec!["train", "--help"],
        vec!["perturb-text", "--help"],
        vec!["perturb-image", "--help"],
        vec!["attack", "--help"],
        vec!["attack", "hotflip", "--help"],
        vec!["attack", "trigger", "--help"],
        vec!["attack", "uap", "--help"],
        vec!["eval", "--help"],
        vec!["grid", "--help"],
        vec!["ablate", "--help"],
        vec!["gen-aug", "--help"],
        vec!["report", "--help"],
    ] {
        let output = run(&args);
        assert!(
            output.status.success(),
            "{args:?} exited {:?}",
            output.status.code()
        );
        assert!(!output.stdout.is_empty(), "{args:?} printed no help");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(1));
    // Missing required inputs are usage errors too.
    let out = run(&["train"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn data_errors_exit_two() {
    let out = run(&["train", "--manifest", "/nonexistent/manifest.jsonl", "--out", "/tmp/mb-x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn severity_out_of_range_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let manifest = fixture_manifest(dir.path(), 4, 2, 1);
    let out = run(&[
        "perturb-image",
        "--family",
        "corruption",
        "--severity",
        "9",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn perturb_text_rate_zero_is_identity() {
    let dir = TempDir::new().unwrap();
    let manifest = fixture_manifest(dir.path(), 6, 0, 2);
    let out = run(&[
        "perturb-text",
        "--family",
        "typos",
        "--rate",
        "0",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out_manifest = PathBuf::from(stdout_line(&out));
    let original = load_manifest(&manifest).unwrap();
    let perturbed = load_manifest(&out_manifest).unwrap();
    for (a, b) in original.samples.iter().zip(perturbed.samples.iter()) {
        assert_eq!(a.caption, b.caption);
    }
}

#[test]
fn perturb_text_typos_changes_captions_deterministically() {
    let dir = TempDir::new().unwrap();
    let manifest = fixture_manifest(dir.path(), 6, 0, 4);
    let args = [
        "perturb-text",
        "--family",
        "typos",
        "--rate",
        "0.9",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
        "--seed",
        "5",
    ];
    let first = run(&args);
    assert!(first.status.success());
    let second = run(&args);
    let a = fs::read_to_string(stdout_line(&first)).unwrap();
    let b = fs::read_to_string(stdout_line(&second)).unwrap();
    assert_eq!(a, b, "same seed must rewrite identically");
    let original = load_manifest(&manifest).unwrap();
    let perturbed = load_manifest(&PathBuf::from(stdout_line(&first))).unwrap();
    assert!(original
        .samples
        .iter()
        .zip(perturbed.samples.iter())
        .any(|(x, y)| x.caption != y.caption));
}

/// Full workflow: train, craft artifacts, evaluate conditions, re-render.
#[test]
fn train_attack_eval_report_workflow() {
    let dir = TempDir::new().unwrap();
    let manifest = fixture_manifest(dir.path(), 32, 16, 6);
    let manifest = manifest.to_str().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();

    let train = run(&[
        "train", "--manifest", manifest, "--out", out, "--seed", "7", "--epochs", "10",
    ]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let checkpoint = stdout_line(&train);
    assert!(Path::new(&checkpoint).exists());
    let run_dir = Path::new(&checkpoint).parent().unwrap();
    assert!(run_dir.join("config.toml").exists(), "resolved config persisted");
    assert!(run_dir.join("curve.csv").exists(), "training curve persisted");

    let trigger = run(&[
        "attack", "trigger", "--manifest", manifest, "--checkpoint", &checkpoint, "--out", out,
        "--seed", "7", "--trigger-iterations", "1",
    ]);
    assert!(trigger.status.success(), "{}", String::from_utf8_lossy(&trigger.stderr));
    let trigger_path = stdout_line(&trigger);

    let uap = run(&[
        "attack", "uap", "--manifest", manifest, "--checkpoint", &checkpoint, "--out", out,
        "--seed", "7", "--uap-epochs", "1",
    ]);
    assert!(uap.status.success(), "{}", String::from_utf8_lossy(&uap.stderr));
    let uap_path = stdout_line(&uap);
    assert!(Path::new(&uap_path).with_extension("bin.json").exists() ||
            Path::new(&(uap_path.clone() + ".json")).exists());

    let eval = run(&[
        "eval", "--manifest", manifest, "--checkpoint", &checkpoint, "--out", out, "--seed", "7",
        "--text-family", "triggers", "--trigger", &trigger_path,
        "--image-family", "uap", "--uap", &uap_path,
    ]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let csv = String::from_utf8_lossy(&eval.stdout);
    assert!(csv.starts_with("condition,accuracy,auroc,f1"));
    assert!(csv.contains("\nclean,"));
    assert!(csv.contains("\nt3-i1,"));

    // eval without the trigger file is a usage error.
    let missing = run(&[
        "eval", "--manifest", manifest, "--checkpoint", &checkpoint, "--out", out,
        "--text-family", "triggers",
    ]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn config_file_merges_under_flags() {
    let dir = TempDir::new().unwrap();
    let manifest = fixture_manifest(dir.path(), 6, 0, 8);
    let config_path = dir.path().join("run.toml");
    fs::write(
        &config_path,
        format!(
            "[paths]\nmanifest = {:?}\nout_dir = {:?}\n\n[run]\nseed = 11\n\n[noise]\ntypo_rate = 0.0\n",
            manifest.to_str().unwrap(),
            dir.path().join("out").to_str().unwrap()
        ),
    )
    .unwrap();

    // Config alone: rate 0 leaves captions alone.
    let from_config = run(&[
        "perturb-text",
        "--config",
        config_path.to_str().unwrap(),
        "--family",
        "typos",
    ]);
    assert!(from_config.status.success(), "{}", String::from_utf8_lossy(&from_config.stderr));
    let unchanged = load_manifest(&PathBuf::from(stdout_line(&from_config))).unwrap();
    let original = load_manifest(&manifest).unwrap();
    assert!(original
        .samples
        .iter()
        .zip(unchanged.samples.iter())
        .all(|(a, b)| a.caption == b.caption));

    // Flag overrides the config's rate.
    let overridden = run(&[
        "perturb-text",
        "--config",
        config_path.to_str().unwrap(),
        "--family",
        "typos",
        "--rate",
        "1.0",
    ]);
    assert!(overridden.status.success());
    let changed = load_manifest(&PathBuf::from(stdout_line(&overridden))).unwrap();
    assert!(original
        .samples
        .iter()
        .zip(changed.samples.iter())
        .any(|(a, b)| a.caption != b.caption));

    let bad = run(&["perturb-text", "--config", "/nonexistent.toml", "--family", "typos"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn report_rerenders_grid_csv() {
    let dir = TempDir::new().unwrap();
    // A hand-written table-shaped grid CSV.
    let csv = "\
text_noise,image_noise,accuracy,auroc,f1,delta_acc,delta_auroc,delta_f1
0,0,0.744,0.834,0.727,,,
1,1,0.730,0.827,0.712,0.0140,0.0070,0.0150
1,2,0.712,0.812,0.696,0.0320,0.0220,0.0310
average_drop,,,,,0.0230,0.0145,0.0230
average_dropping_rate,,,,,3.09%,1.74%,3.16%
";
    let path = dir.path().join("grid.csv");
    fs::write(&path, csv).unwrap();

    let md = run(&["report", "--in", path.to_str().unwrap(), "--format", "markdown"]);
    assert!(md.status.success());
    let text = String::from_utf8_lossy(&md.stdout);
    assert!(text.contains("| 0 | 0 | 0.744 | 0.834 | 0.727 |"));
    assert!(text.contains("**Average drop**"));

    // CSV re-render is byte-stable (footer recomputed from the cells).
    let csv2 = run(&["report", "--in", path.to_str().unwrap(), "--format", "csv"]);
    assert!(csv2.status.success());
    let text2 = String::from_utf8_lossy(&csv2.stdout);
    assert!(text2.starts_with("text_noise,image_noise"));
    assert!(text2.contains("1,2,0.712,0.812,0.696"));

    let garbage = dir.path().join("garbage.csv");
    fs::write(&garbage, "not,a,report\n").unwrap();
    assert_eq!(
        run(&["report", "--in", garbage.to_str().unwrap()]).status.code(),
        Some(2)
    );
}

#[test]
fn ablate_writes_both_tables() {
    let dir = TempDir::new().unwrap();
    let manifest = fixture_manifest(dir.path(), 24, 12, 9);
    let manifest = manifest.to_str().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let train = run(&[
        "train", "--manifest", manifest, "--out", out, "--seed", "3", "--epochs", "8",
    ]);
    assert!(train.status.success());
    let checkpoint = stdout_line(&train);
    let ablate = run(&[
        "ablate", "--manifest", manifest, "--checkpoint", &checkpoint, "--out", out, "--seed",
        "3", "--uap-epochs", "1", "--trigger-iterations", "1",
    ]);
    assert!(ablate.status.success(), "{}", String::from_utf8_lossy(&ablate.stderr));
    let csv_path = PathBuf::from(stdout_line(&ablate));
    let csv = fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("text_noise,"));
    assert!(csv.contains("image_noise,"));
    assert!(csv.contains("\nhotflip,"));
    assert!(csv.contains("\naugmix,"));
    let md = fs::read_to_string(csv_path.with_file_name("ablate.md")).unwrap();
    assert!(md.contains("## Text-only channel"));
    assert!(md.contains("## Image-only channel"));
}

#[test]
fn gen_aug_small_run_produces_valid_manifest() {
    let dir = TempDir::new().unwrap();
    let manifest = fixture_manifest(dir.path(), 10, 0, 10);
    let out = run(&[
        "gen-aug",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
        "--seed",
        "1",
        "--n",
        "25",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let aug = load_manifest(&PathBuf::from(stdout_line(&out))).unwrap();
    assert_eq!(aug.len(), 25);
    assert!(aug.samples.iter().all(|s| s.aux.contains_key("source_id")));
}
