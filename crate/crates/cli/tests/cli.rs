//! End-to-end tests of the command-line surface: every subcommand runs
//! as a real process, and the documented exit codes and artifacts are
//! checked on disk.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::tempdir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dropcycle"))
}

fn run(cmd: &mut Command) -> (i32, String, String) {
    let Output {
        status,
        stdout,
        stderr,
    } = cmd.output().expect("binary spawns");
    (
        status.code().expect("no signal"),
        String::from_utf8_lossy(&stdout).into_owned(),
        String::from_utf8_lossy(&stderr).into_owned(),
    )
}

/// Writes a tiny corpus and returns its directory.
fn tiny_corpus(dir: &Path, count: usize, edge: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("corpus_{seed}"));
    let (code, _, stderr) = run(bin()
        .arg("synth")
        .args(["--count", &count.to_string()])
        .args(["--height", &edge.to_string()])
        .args(["--width", &edge.to_string()])
        .args(["--min-droplets", "1", "--max-droplets", "2"])
        .args(["--min-radius", "2", "--max-radius", "4"])
        .args(["--feather", "1", "--blur-radius", "1"])
        .args(["--seed", &seed.to_string()])
        .arg("--out")
        .arg(&out));
    assert_eq!(code, 0, "synth failed: {stderr}");
    out
}

/// Trains a 2-step throwaway model and returns the final checkpoint.
fn tiny_train(corpus: &Path, out: &Path, extra: &[&str]) -> (i32, String, PathBuf) {
    let (code, _, stderr) = run(bin()
        .arg("train")
        .arg("--rainy")
        .arg(corpus.join("rain"))
        .arg("--clean")
        .arg(corpus.join("clean"))
        .arg("--out")
        .arg(out)
        .args(["--epochs", "1", "--batch-size", "2", "--crop", "24"])
        .args([
            "--iterations",
            "2",
            "--gen-base-width",
            "4",
            "--res-blocks",
            "1",
        ])
        .args(["--disc-base-width", "4", "--seed", "9"])
        .args(extra));
    (code, stderr, out.join("checkpoint_final.ckpt"))
}

#[test]
fn help_lists_every_subcommand_and_flag_defaults() {
    let (code, stdout, _) = run(bin().arg("--help"));
    assert_eq!(code, 0, "--help is a success");
    for sub in ["train", "eval", "infer", "decompose", "synth"] {
        assert!(stdout.contains(sub), "help must list `{sub}`:\n{stdout}");
    }

    let (code, stdout, _) = run(bin().args(["train", "--help"]));
    assert_eq!(code, 0);
    for flag in [
        "--rainy",
        "--clean",
        "--out",
        "--config",
        "--resume",
        "--max-steps",
    ] {
        assert!(stdout.contains(flag), "train help must list `{flag}`");
    }
    assert!(
        stdout.contains("[default: 0.001]"),
        "defaults are documented inline"
    );

    let (code, stdout, _) = run(bin().args(["synth", "--help"]));
    assert_eq!(code, 0);
    assert!(
        stdout.contains("[default: 8]"),
        "synth defaults are documented"
    );
}

#[test]
fn no_arguments_prints_help_and_usage_errors_exit_one() {
    let (code, _, _) = run(&mut bin());
    assert_eq!(code, 1, "bare invocation is a usage error");

    let (code, _, stderr) = run(bin().args(["train", "--bogus-flag", "1"]));
    assert_eq!(code, 1, "unknown flag is a usage error: {stderr}");

    let (code, _, _) = run(bin().args(["eval", "--layout"]));
    assert_eq!(code, 1, "missing flag value is a usage error");
}

#[test]
fn missing_input_directory_is_a_data_error_naming_the_path() {
    let dir = tempdir().unwrap();
    let ghost = dir.path().join("no_such_dir");
    let (code, _, stderr) = run(bin()
        .arg("train")
        .arg("--rainy")
        .arg(&ghost)
        .arg("--clean")
        .arg(&ghost)
        .arg("--out")
        .arg(dir.path().join("out")));
    assert_eq!(code, 2, "missing data is a data error: {stderr}");
    assert!(
        stderr.contains("no_such_dir"),
        "message names the path: {stderr}"
    );
}

#[test]
fn unknown_config_key_is_a_usage_error_listing_valid_keys() {
    let dir = tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "ferocity = 11\n").unwrap();
    let corpus = tiny_corpus(dir.path(), 2, 24, 31);
    let (code, _, stderr) = run(bin()
        .arg("train")
        .arg("--rainy")
        .arg(corpus.join("rain"))
        .arg("--clean")
        .arg(corpus.join("clean"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .arg("--config")
        .arg(&conf));
    assert_eq!(code, 1, "unknown key is a usage error: {stderr}");
    assert!(
        stderr.contains("ferocity") && stderr.contains("learning_rate"),
        "message names the bad key and lists valid ones: {stderr}"
    );
}

#[test]
fn invalid_hyperparameter_is_a_usage_error() {
    let dir = tempdir().unwrap();
    let corpus = tiny_corpus(dir.path(), 2, 24, 32);
    let (code, stderr, _) = tiny_train(&corpus, &dir.path().join("out"), &["--crop", "23"]);
    assert_eq!(code, 1, "misaligned crop is a usage error: {stderr}");
    assert!(
        stderr.contains("crop"),
        "message says which knob is wrong: {stderr}"
    );
}

#[test]
fn the_full_pipeline_runs_train_infer_decompose_eval() {
    let dir = tempdir().unwrap();
    let corpus = tiny_corpus(dir.path(), 4, 24, 33);
    let run_dir = dir.path().join("run");
    let (code, stderr, ckpt) = tiny_train(&corpus, &run_dir, &[]);
    assert_eq!(code, 0, "training failed: {stderr}");
    assert!(ckpt.is_file(), "final checkpoint exists");
    let log = std::fs::read_to_string(run_dir.join("metrics.tsv")).unwrap();
    assert!(log.starts_with("step\tgan\tcyc\tidentity\tsparsity\ttotal\n"));
    assert_eq!(
        log.lines().count(),
        3,
        "header plus one line per step:\n{log}"
    );

    let cleaned = dir.path().join("cleaned");
    let (code, _, stderr) = run(bin()
        .arg("infer")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--input")
        .arg(corpus.join("rain"))
        .arg("--out")
        .arg(&cleaned));
    assert_eq!(code, 0, "infer failed: {stderr}");
    for entry in std::fs::read_dir(corpus.join("rain")).unwrap() {
        let name = entry.unwrap().file_name();
        assert!(
            cleaned.join(&name).is_file(),
            "output keeps input name {name:?}"
        );
    }

    let layers = dir.path().join("layers");
    let input = std::fs::read_dir(corpus.join("rain"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let (code, _, stderr) = run(bin()
        .arg("decompose")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--image")
        .arg(&input)
        .arg("--out")
        .arg(&layers));
    assert_eq!(code, 0, "decompose failed: {stderr}");
    let stem = input.file_stem().unwrap().to_str().unwrap();
    for i in 1..=2 {
        for kind in ["background", "raindrop", "mask", "recon"] {
            let path = layers.join(format!("{stem}_{kind}_iter{i}.png"));
            assert!(path.is_file(), "missing layer image {path:?}");
        }
    }
    assert!(
        layers.join("colorbar.png").is_file(),
        "mask legend is written"
    );

    let report = dir.path().join("scores.tsv");
    let (code, stdout, stderr) = run(bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--data")
        .arg(&corpus)
        .args(["--layout", "flat"])
        .arg("--report")
        .arg(&report));
    assert_eq!(code, 0, "eval failed: {stderr}");
    assert!(
        stdout.contains("mean PSNR"),
        "summary goes to stdout: {stdout}"
    );
    let table = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "filename\tpsnr\tssim");
    assert_eq!(lines.len(), 6, "header, four rows, one summary:\n{table}");
    assert!(
        lines[5].starts_with("mean\t"),
        "summary row is labeled: {}",
        lines[5]
    );
}

#[test]
fn resuming_a_finished_run_extends_the_metrics_log() {
    let dir = tempdir().unwrap();
    let corpus = tiny_corpus(dir.path(), 4, 24, 34);
    let run_dir = dir.path().join("run");
    let (code, stderr, ckpt) = tiny_train(&corpus, &run_dir, &[]);
    assert_eq!(code, 0, "training failed: {stderr}");

    let (code, _, stderr) = run(bin()
        .arg("train")
        .arg("--rainy")
        .arg(corpus.join("rain"))
        .arg("--clean")
        .arg(corpus.join("clean"))
        .arg("--out")
        .arg(&run_dir)
        .arg("--resume")
        .arg(&ckpt)
        .args(["--epochs", "2", "--batch-size", "2", "--crop", "24"])
        .args([
            "--iterations",
            "2",
            "--gen-base-width",
            "4",
            "--res-blocks",
            "1",
        ])
        .args(["--disc-base-width", "4", "--seed", "9"]));
    assert_eq!(code, 0, "resume failed: {stderr}");
    let log = std::fs::read_to_string(run_dir.join("metrics.tsv")).unwrap();
    assert_eq!(
        log.lines().count(),
        5,
        "two more steps were appended:\n{log}"
    );
}

#[test]
fn ablation_flag_zeroes_the_disabled_column() {
    let dir = tempdir().unwrap();
    let corpus = tiny_corpus(dir.path(), 4, 24, 35);
    let (code, stderr, _) = tiny_train(&corpus, &dir.path().join("run"), &["--ablation", "no_cyc"]);
    assert_eq!(code, 0, "ablated training failed: {stderr}");
    let log = std::fs::read_to_string(dir.path().join("run").join("metrics.tsv")).unwrap();
    for line in log.lines().skip(1) {
        let cyc = line.split('\t').nth(2).unwrap();
        assert_eq!(cyc, "0.000000", "removed term reports exactly zero: {line}");
    }

    let (code, _, stderr) = run(bin()
        .args(["train", "--ablation", "no_gravity"])
        .args(["--rainy", "x", "--clean", "x", "--out", "x"]));
    assert_eq!(code, 1, "unknown ablation is a usage error: {stderr}");
    assert!(
        stderr.contains("no_iternn"),
        "message lists the known variants: {stderr}"
    );
}

#[test]
fn unaligned_images_error_without_pad_and_succeed_with_it() {
    let dir = tempdir().unwrap();
    let corpus = tiny_corpus(dir.path(), 2, 24, 36);
    let (code, stderr, ckpt) = tiny_train(&corpus, &dir.path().join("run"), &[]);
    assert_eq!(code, 0, "training failed: {stderr}");

    // A 30×30 input: not a multiple of the stride-4 pyramid.
    let odd_corpus = tiny_corpus(dir.path(), 1, 30, 37);
    let odd = std::fs::read_dir(odd_corpus.join("rain"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();

    let layers = dir.path().join("layers");
    let (code, _, stderr) = run(bin()
        .arg("decompose")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--image")
        .arg(&odd)
        .arg("--out")
        .arg(&layers));
    assert_eq!(code, 2, "unaligned input is a data error: {stderr}");
    assert!(
        stderr.contains("multiples of 4") && stderr.contains("--pad"),
        "message states the alignment rule and the fix: {stderr}"
    );

    let (code, _, stderr) = run(bin()
        .arg("decompose")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--image")
        .arg(&odd)
        .arg("--out")
        .arg(&layers)
        .arg("--pad"));
    assert_eq!(code, 0, "padded decompose failed: {stderr}");
    let stem = odd.file_stem().unwrap().to_str().unwrap();
    let out = dropcycle::data::load_image(&layers.join(format!("{stem}_background_iter1.png")))
        .expect("output readable");
    assert_eq!(
        out.shape(),
        (3, 30, 30),
        "outputs are cropped back to the input size"
    );
}

#[test]
fn the_seed_environment_variable_pins_synthesis() {
    let dir = tempdir().unwrap();
    let make = |out: &Path, env: Option<&str>| {
        let mut cmd = bin();
        cmd.arg("synth")
            .args(["--count", "2", "--height", "24", "--width", "24"])
            .arg("--out")
            .arg(out);
        if let Some(seed) = env {
            cmd.env("DROPCYCLE_SEED", seed);
        }
        let (code, _, stderr) = run(&mut cmd);
        assert_eq!(code, 0, "synth failed: {stderr}");
        let first = std::fs::read_dir(out.join("rain"))
            .unwrap()
            .next()
            .unwrap()
            .unwrap()
            .path();
        std::fs::read(first).unwrap()
    };
    let a = make(&dir.path().join("a"), Some("5"));
    let b = make(&dir.path().join("b"), Some("5"));
    let c = make(&dir.path().join("c"), None);
    assert_eq!(a, b, "same pinned seed, same bytes");
    assert_ne!(a, c, "the pin overrides the default seed");

    let mut cmd = bin();
    cmd.arg("synth")
        .arg("--out")
        .arg(dir.path().join("d"))
        .env("DROPCYCLE_SEED", "pony");
    let (code, _, stderr) = run(&mut cmd);
    assert_eq!(code, 1, "junk in the env var is a usage error: {stderr}");
}

#[test]
fn identical_invocations_are_idempotent() {
    let dir = tempdir().unwrap();
    let corpus = tiny_corpus(dir.path(), 2, 24, 38);
    let run_once = |out: &Path| {
        let (code, stderr, _) = tiny_train(&corpus, out, &[]);
        assert_eq!(code, 0, "training failed: {stderr}");
        std::fs::read(out.join("checkpoint_final.ckpt")).unwrap()
    };
    let first = run_once(&dir.path().join("r1"));
    let second = run_once(&dir.path().join("r1"));
    let elsewhere = run_once(&dir.path().join("r2"));
    assert_eq!(first, second, "re-running in place reproduces the artifact");
    assert_eq!(
        first, elsewhere,
        "the output directory does not influence the model"
    );
}
