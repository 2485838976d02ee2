use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dyskernel"));
    cmd.current_dir(dir).args(args).env("RUST_LOG", "warn").env_remove("DYSK_SEED");
    if let Some(seed) = env_seed {
        cmd.env("DYSK_SEED", seed);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &[&str] = &[
    "--height", "16", "--width", "16", "--channels", "8", "--heads", "2", "--steps", "1", "--pairs-per-step", "1",
    "--pairs", "2",
];

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(SMALL.iter().copied()).collect()
}

#[test]
fn train_register_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let train = run(dir.path(), &with_small(&["train", "--seed", "3"]), None);
    assert_eq!(train.status.code(), Some(0), "{}", stderr(&train));
    assert!(stdout(&train).contains("checkpoint out/model.dysk"));
    assert!(dir.path().join("out/train_log.csv").exists());

    let reg = run(dir.path(), &with_small(&["register", "--seed", "3", "--attention-pixels=1:1"]), None);
    assert_eq!(reg.status.code(), Some(0), "{}", stderr(&reg));
    assert!(dir.path().join("out/registration.dysk").exists());
    assert!(dir.path().join("out/attention_block1.csv").exists());

    let eval = run(dir.path(), &with_small(&["eval", "--seed", "3"]), None);
    assert_eq!(eval.status.code(), Some(0), "{}", stderr(&eval));
    let text = stdout(&eval);
    assert!(text.contains("pairs 2 (skipped 0)"), "{text}");
    assert!(text.contains("|J|<0 "), "{text}");
}

#[test]
fn missing_seed_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &with_small(&["train"]), None);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("seed"), "{}", stderr(&out));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn invalid_values_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["train", "--seed", "1", "--window", "cross4"][..],
        &["train", "--seed", "1", "--no-such-key", "2"],
        &["train", "--seed", "1", "--steps"],
        &["analyze-complexity", "--labels", "1"],
        &["frobnicate"],
    ] {
        let out = run(dir.path(), args, None);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", stderr(&out));
    }
}

#[test]
fn malformed_config_file_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "steps = 3\nthis line has no equals\n").unwrap();
    let out = run(dir.path(), &["show-config", "--config", "bad.cfg"], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn corrupt_input_image_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("pairs");
    fs::create_dir(&data).unwrap();
    fs::write(data.join("0000_a.pgm"), b"P5\n16 16\n255\n").unwrap();
    fs::write(data.join("0000_b.pgm"), b"P5\n16 16\n255\n").unwrap();
    let out = run(dir.path(), &with_small(&["train", "--seed", "1", "--data-dir", "pairs"]), None);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("0000_a.pgm"), "{}", stderr(&out));
}

#[test]
fn unwritable_output_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("blocker"), "not a directory").unwrap();
    let out = run(dir.path(), &with_small(&["train", "--seed", "1", "--output-dir", "blocker/run"]), None);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn seed_precedence_is_file_then_env_then_flag() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "# comment\nseed = 11\nsteps = 5\n").unwrap();
    let seed_of = |o: &Output| {
        stdout(o).lines().find_map(|l| l.strip_prefix("seed = ").map(str::to_string)).unwrap_or_default()
    };
    let file = run(dir.path(), &["show-config", "--config", "run.cfg"], None);
    assert_eq!(seed_of(&file), "11");
    assert!(stdout(&file).contains("steps = 5"));
    let env = run(dir.path(), &["show-config", "--config", "run.cfg"], Some("22"));
    assert_eq!(seed_of(&env), "22");
    let flag = run(dir.path(), &["show-config", "--config", "run.cfg", "--seed=33"], Some("22"));
    assert_eq!(seed_of(&flag), "33");
}

#[test]
fn show_config_output_is_a_valid_config() {
    let dir = tempfile::tempdir().unwrap();
    let first = run(dir.path(), &["show-config", "--window", "cross5", "--lr", "0.002"], None);
    assert_eq!(first.status.code(), Some(0));
    fs::write(dir.path().join("echo.cfg"), first.stdout.clone()).unwrap();
    let second = run(dir.path(), &["show-config", "--config", "echo.cfg"], None);
    assert_eq!(stdout(&first), stdout(&second));
}

#[test]
fn analyze_complexity_prints_sweep_and_crossover() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["analyze-complexity", "--n-values", "4,8"], None);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "N,log10_H,log10_C,R");
    assert!(lines[1].starts_with("4,") && lines[2].starts_with("8,"));
    assert!(text.contains("# crossover N* = 6"), "{text}");

    let include = run(dir.path(), &["analyze-complexity", "--n-values", "4", "--form", "include-self"], None);
    assert!(stdout(&include).contains("# crossover N* = 5"));
}

#[test]
fn gradcheck_passes_and_reports_every_op() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gradcheck", "--instances", "2"], None);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    for name in ["conv2d", "grid-sample-bilinear", "softmax-over-axis", "end-to-end-bireg"] {
        assert!(text.contains(name), "missing {name} in\n{text}");
    }
    assert!(text.contains("all gradient checks passed"));
}

#[test]
fn help_exits_with_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--help"], None);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("analyze-complexity"));
}
