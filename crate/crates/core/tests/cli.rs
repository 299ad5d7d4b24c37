use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedunlearn::audit::audit_records;
use fedunlearn::rundir::{parse_rounds_csv, read_model};

const SMALL: &str = "dataset = \"synthetic\"\nclasses = 3\ndim = 2\nper_class = 200\nclients = 6\n\
unlearn_clients = 2\npartition = \"dirichlet\"\nalpha = 0.5\nhidden = [8]\n\
pretrain_rounds = 20\neta = 0.05\ns = 3\nunlearn_rounds = 8\npost_rounds = 6\nseed = 4\n";

fn fedunlearn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedunlearn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn run_all(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--config", s(config), "--out", s(out)];
    args.extend_from_slice(extra);
    let output = fedunlearn(&args);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    output
}

#[test]
fn rounds_header_matches_the_golden_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "small.toml", SMALL);
    let out = tmp.path().join("run");
    run_all(&config, &out, &[]);
    let csv = fs::read_to_string(out.join("rounds.csv")).unwrap();
    let golden = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/rounds_header.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), golden.trim_end());
    let records = parse_rounds_csv(&csv).unwrap();
    assert_eq!(records.len(), csv.lines().count() - 1);
    assert!(audit_records(&records).is_empty());
    for name in ["config.resolved", "pretrain.csv", "model_pre.bin", "model_unlearned.bin", "model_final.bin", "summary.txt"] {
        assert!(out.join(name).is_file(), "{name}");
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "small.toml", SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_all(&config, &a, &[]);
    run_all(&config, &b, &[]);
    for name in ["rounds.csv", "pretrain.csv", "config.resolved", "model_pre.bin", "model_unlearned.bin", "model_final.bin"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn staged_runs_compose_to_the_full_run() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "small.toml", SMALL);
    let full = tmp.path().join("full");
    run_all(&config, &full, &[]);

    let pre = tmp.path().join("pre");
    run_all(&config, &pre, &["--stage", "pretrain"]);
    assert!(!pre.join("model_unlearned.bin").exists());
    let unl = tmp.path().join("unl");
    run_all(&config, &unl, &["--stage", "unlearn", "--init", s(&pre.join("model_pre.bin"))]);
    let post = tmp.path().join("post");
    run_all(&config, &post, &["--stage", "posttrain", "--init", s(&unl.join("model_unlearned.bin"))]);

    let bytes = |dir: &Path, name: &str| fs::read(dir.join(name)).unwrap();
    assert_eq!(bytes(&pre, "model_pre.bin"), bytes(&full, "model_pre.bin"));
    assert_eq!(bytes(&unl, "model_unlearned.bin"), bytes(&full, "model_unlearned.bin"));
    assert_eq!(bytes(&post, "model_final.bin"), bytes(&full, "model_final.bin"));

    let full_csv = fs::read_to_string(full.join("rounds.csv")).unwrap();
    let unl_csv = fs::read_to_string(unl.join("rounds.csv")).unwrap();
    let post_csv = fs::read_to_string(post.join("rounds.csv")).unwrap();
    let stitched: Vec<&str> = unl_csv.lines().chain(post_csv.lines().skip(1)).collect();
    assert_eq!(stitched, full_csv.lines().collect::<Vec<_>>());
}

#[test]
fn ablation_flag_labels_the_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "small.toml", SMALL);
    let out = tmp.path().join("m5");
    let output = run_all(&config, &out, &["--ablation", "M5", "--seed", "9"]);
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.starts_with("variant=M5 "), "{stdout}");
    let resolved = fs::read_to_string(out.join("config.resolved")).unwrap();
    assert!(resolved.contains("seed = 9"), "{resolved}");
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let cases = [
        ("missing.toml", "dataset = \"synthetic\"\nclients = 4\n"),
        ("unknown.toml", &format!("{SMALL}colour = 3\n")),
        ("range.toml", &SMALL.replace("eta = 0.05", "eta = -1.0")),
        ("count.toml", &SMALL.replace("unlearn_clients = 2", "unlearn_clients = 7")),
        ("sweep.toml", &format!("{SMALL}sweep_axis = \"s\"\n")),
    ];
    for (name, text) in cases {
        let config = write_config(tmp.path(), name, text);
        let cmd = if name == "sweep.toml" { "sweep" } else { "run" };
        let output = fedunlearn(&[cmd, "--config", s(&config), "--out", s(&out)]);
        assert_eq!(output.status.code(), Some(2), "{name}: {}", String::from_utf8_lossy(&output.stderr));
    }
    let config = write_config(tmp.path(), "small.toml", SMALL);
    let bad_variant = fedunlearn(&["run", "--config", s(&config), "--ablation", "M9", "--out", s(&out)]);
    assert_eq!(bad_variant.status.code(), Some(2));
    let no_init = fedunlearn(&["run", "--config", s(&config), "--stage", "unlearn", "--out", s(&out)]);
    assert_eq!(no_init.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_code_three() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "small.toml", SMALL);
    let broken = tmp.path().join("broken.bin");
    fs::write(&broken, b"FUPM\x01\x00").unwrap();
    let out = tmp.path().join("x");
    let output = fedunlearn(&["run", "--config", s(&config), "--stage", "unlearn", "--init", s(&broken), "--out", s(&out)]);
    assert_eq!(output.status.code(), Some(3));
    let output = fedunlearn(&["inspect", s(&tmp.path().join("absent.bin"))]);
    assert_eq!(output.status.code(), Some(3));
}

#[test]
fn inspect_and_eval_read_saved_models() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "small.toml", SMALL);
    let out = tmp.path().join("run");
    run_all(&config, &out, &[]);
    let model = out.join("model_final.bin");
    let n = read_model(&model).unwrap().len();

    let inspect = fedunlearn(&["inspect", s(&model)]);
    assert!(inspect.status.success());
    let text = String::from_utf8(inspect.stdout).unwrap();
    assert!(text.contains(&format!("magic=FUPM version=1 n={n}")), "{text}");
    assert!(text.contains("finite=true"));

    let eval = fedunlearn(&["eval", "--config", s(&config), "--model", s(&model)]);
    assert!(eval.status.success());
    let text = String::from_utf8(eval.stdout).unwrap();
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    let final_line = summary.lines().find(|l| l.starts_with("final: ")).unwrap();
    assert!(text.starts_with("asr="), "{text}");
    // Same model, same data: eval reproduces the stored final metrics.
    assert_eq!(text.trim_end(), final_line.trim_start_matches("final: "));
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{SMALL}sweep_axis = \"s\"\nsweep_values = [1, 3]\n");
    let config = write_config(tmp.path(), "sweep.toml", &text);
    let out = tmp.path().join("sweep");
    let output = fedunlearn(&["sweep", "--config", s(&config), "--out", s(&out)]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
}
