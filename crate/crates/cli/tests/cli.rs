use std::path::Path;
use std::process::{Command, Output};

fn seqop(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqop"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn manifest(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("run.json")).expect("run.json written");
    serde_json::from_str(&text).unwrap()
}

#[test]
fn check_ema_passes_and_fails_on_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let ok = seqop(
        dir.path(),
        &[
            "check-ema",
            "--len",
            "4096",
            "--dtype",
            "f64",
            "--tol",
            "1e-10",
            "--trials",
            "5",
        ],
    );
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    assert!(stdout(&ok).contains("PASS"));
    let m = manifest(dir.path());
    assert_eq!(m["command"], "check-ema");
    assert!(m["result"]["max_deviation"].as_f64().unwrap() < 1e-10);
    assert!(m["build"]["rustc"].is_string());

    let strict = seqop(
        dir.path(),
        &["check-ema", "--len", "64", "--tol", "0", "--trials", "3"],
    );
    assert_eq!(code(&strict), 1);

    let tiny = seqop(dir.path(), &["check-ema", "--trials", "1", "--len", "1"]);
    assert_eq!(code(&tiny), 0);
}

#[test]
fn rf_prints_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    for (args, want) in [
        (["3", "3", "2", "1"], "9"),
        (["17", "8", "4", "1"], "9361"),
        (["5", "1", "3", "2"], "25"),
    ] {
        let o = seqop(
            dir.path(),
            &[
                "rf", "--k", args[0], "--f", args[1], "--d", args[2], "--b", args[3],
            ],
        );
        assert_eq!(code(&o), 0);
        assert_eq!(stdout(&o).trim(), want, "{args:?}");
    }
    assert_eq!(manifest(dir.path())["result"]["receptive_field"], 25);
}

#[test]
fn bad_arguments_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&seqop(dir.path(), &["rf", "--nope"])), 2);
    assert_eq!(code(&seqop(dir.path(), &["rf", "--k", "0"])), 2);
    assert_eq!(
        code(&seqop(dir.path(), &["gradcheck", "--module", "xyz"])),
        2
    );
    assert_eq!(code(&seqop(dir.path(), &["bench", "--ops", "fast"])), 2);
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    let o = seqop(
        dir.path(),
        &[
            "bench",
            "--lens",
            "64,128",
            "--reps",
            "1",
            "--warmup",
            "0",
            "--passes",
            "forward",
            "--ops",
            "ema_fft,ema_fft_pregen,dilated_conv",
            "--out",
            csv.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 2);
    assert!(stdout(&o).contains("1.20-1.51x"));
    assert_eq!(manifest(dir.path())["result"]["rows"], 6);
}

#[test]
fn train_recall_zero_epochs_reports_untrained_model() {
    let dir = tempfile::tempdir().unwrap();
    let o = seqop(
        dir.path(),
        &[
            "train-recall",
            "--seq-len",
            "16",
            "--vocab",
            "4",
            "--epochs",
            "0",
            "--n-train",
            "20",
            "--n-eval",
            "10",
            "--lrs",
            "1e-3",
            "--dropouts",
            "0",
            "--threads",
            "1",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("recall_sweep.csv").exists());
    assert!(dir.path().join("best.ckpt").exists());
    let m = manifest(dir.path());
    assert_eq!(m["result"]["rows"].as_array().unwrap().len(), 1);
    assert_eq!(m["resolved"]["settings"]["epochs"], 0);
}

#[test]
fn gradcheck_modules_pass_and_fault_is_caught() {
    let dir = tempfile::tempdir().unwrap();
    for m in ["ema", "tcn", "attn", "model"] {
        let o = seqop(dir.path(), &["gradcheck", "--module", m]);
        assert_eq!(code(&o), 0, "{m}: {}", stdout(&o));
    }
    let faulty = seqop(
        dir.path(),
        &["gradcheck", "--module", "ema", "--inject-fault"],
    );
    assert_eq!(code(&faulty), 1);
    assert!(stdout(&faulty).contains("FAIL"));
}

#[test]
fn config_file_fills_in_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("rf.conf");
    std::fs::write(&cfg, "# receptive field\nk = 3\nf = 3\nd = 2\n").unwrap();
    let c = cfg.to_str().unwrap();

    let o = seqop(dir.path(), &["rf", "--config", c]);
    assert_eq!(stdout(&o).trim(), "9");
    let m = manifest(dir.path());
    assert!(m["config_file"].as_str().unwrap().ends_with("rf.conf"));

    let o = seqop(dir.path(), &["--config", c, "rf", "--d", "1"]);
    assert_eq!(stdout(&o).trim(), "3");

    std::fs::write(&cfg, "vocab = 3\n").unwrap();
    assert_eq!(code(&seqop(dir.path(), &["rf", "--config", c])), 2);
}
