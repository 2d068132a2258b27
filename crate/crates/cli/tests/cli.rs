use std::path::Path;
use std::process::{Command, Output};

use transdeeplab_core::tensor::Tensor;

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_transdeeplab"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let o = run(args, cwd);
    assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
    o
}

#[test]
fn train_writes_one_log_row_per_step_and_repeats_exactly() {
    let d = tempfile::tempdir().unwrap();
    ok(&["train", "--steps", "10", "--seed", "3", "--out", "a", "-q"], d.path());
    ok(&["train", "--steps", "10", "--seed", "3", "--out", "b", "-q"], d.path());
    let a = std::fs::read_to_string(d.path().join("a/loss.csv")).unwrap();
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], "step,lr,dice_loss,ce_loss,total");
    assert_eq!(lines.len(), 11);
    assert!(lines[10].starts_with("10,"));
    assert_eq!(a, std::fs::read_to_string(d.path().join("b/loss.csv")).unwrap());
    assert_eq!(
        std::fs::read(d.path().join("a/checkpoint.tdlc")).unwrap(),
        std::fs::read(d.path().join("b/checkpoint.tdlc")).unwrap()
    );

    ok(&["train", "--steps", "10", "--seed", "4", "--out", "c", "-q"], d.path());
    assert_ne!(a, std::fs::read_to_string(d.path().join("c/loss.csv")).unwrap());
}

#[test]
fn resolved_config_reproduces_the_run() {
    let d = tempfile::tempdir().unwrap();
    ok(&["train", "--steps", "3", "--seed", "5", "--out", "a", "-q"], d.path());
    let cfg = d.path().join("a/config.cfg");
    ok(
        &["train", "--config", cfg.to_str().unwrap(), "--out", "b", "-q"],
        d.path(),
    );
    assert_eq!(
        std::fs::read(d.path().join("a/loss.csv")).unwrap(),
        std::fs::read(d.path().join("b/loss.csv")).unwrap()
    );
}

#[test]
fn resume_continues_the_log() {
    let d = tempfile::tempdir().unwrap();
    ok(
        &["train", "--steps", "6", "--seed", "2", "--out", "full", "-q"],
        d.path(),
    );
    ok(
        &[
            "train",
            "--steps",
            "6",
            "--seed",
            "2",
            "--out",
            "part",
            "--checkpoint-every",
            "3",
            "-q",
        ],
        d.path(),
    );
    let ck = d.path().join("part/checkpoint_step000003.tdlc");
    assert!(ck.exists());
    ok(
        &[
            "train",
            "--steps",
            "6",
            "--seed",
            "2",
            "--out",
            "rest",
            "--resume",
            ck.to_str().unwrap(),
            "-q",
        ],
        d.path(),
    );
    let full = std::fs::read_to_string(d.path().join("full/loss.csv")).unwrap();
    let rest = std::fs::read_to_string(d.path().join("rest/loss.csv")).unwrap();
    let tail: Vec<&str> = full.lines().skip(4).collect();
    assert_eq!(rest.lines().skip(1).collect::<Vec<_>>(), tail);
}

#[test]
fn synth_train_eval_predict_pipeline() {
    let d = tempfile::tempdir().unwrap();
    ok(
        &["synth", "--n", "4", "--classes", "3", "--seed", "1", "--out", "ds"],
        d.path(),
    );
    std::fs::write(
        d.path().join("run.cfg"),
        "preset = tiny\nnum_classes = 3\nbatch_size = 2\n",
    )
    .unwrap();
    ok(
        &[
            "train",
            "--config",
            "run.cfg",
            "--dataset",
            "ds",
            "--steps",
            "2",
            "--out",
            "run",
            "-q",
        ],
        d.path(),
    );

    let o = ok(
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint.tdlc",
            "--dataset",
            "ds",
            "--metrics",
            "m.csv",
        ],
        d.path(),
    );
    let table = stdout(&o);
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "class,dice,hausdorff,sensitivity,specificity,accuracy");
    assert_eq!(rows.len(), 1 + 3 + 1);
    assert!(rows[4].starts_with("mean,"));
    assert_eq!(std::fs::read_to_string(d.path().join("m.csv")).unwrap(), table);

    let img = d.path().join("ds/images/00000.tdl");
    ok(
        &[
            "predict",
            "--checkpoint",
            "run/checkpoint.tdlc",
            "--image",
            img.to_str().unwrap(),
            "--out",
            "p.tdl",
        ],
        d.path(),
    );
    let labels = Tensor::<f32>::load(&d.path().join("p.tdl")).unwrap();
    assert_eq!(labels.shape(), &[32, 32]);
    assert!(labels.data().iter().all(|&l| l == 0.0 || l == 1.0 || l == 2.0));
}

#[test]
fn dataset_errors_exit_3_with_path() {
    let d = tempfile::tempdir().unwrap();
    ok(&["synth", "--n", "2", "--out", "ds"], d.path());
    std::fs::remove_dir_all(d.path().join("ds/masks")).unwrap();
    let o = run(&["train", "--dataset", "ds", "--steps", "1", "--out", "r"], d.path());
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("masks"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_2_with_line_and_key() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(
        d.path().join("bad.cfg"),
        "preset = tiny\n# comment\nwindow_size = seven\n",
    )
    .unwrap();
    let o = run(&["train", "--config", "bad.cfg"], d.path());
    assert_eq!(code(&o), 2);
    let e = stderr(&o);
    assert!(e.contains("line 3") && e.contains("window_size"), "{e}");

    let o = run(&["train", "--config", "missing.cfg"], d.path());
    assert_eq!(code(&o), 2);

    std::fs::write(d.path().join("odd.cfg"), "preset = tiny\nimg_size = 30\n").unwrap();
    assert_eq!(code(&run(&["count-params", "--config", "odd.cfg"], d.path())), 2);
}

#[test]
fn class_mismatch_exits_4_and_corrupt_checkpoint_exits_5() {
    let d = tempfile::tempdir().unwrap();
    ok(&["train", "--steps", "1", "--out", "run", "-q"], d.path());
    ok(&["synth", "--n", "2", "--classes", "3", "--out", "ds3"], d.path());
    let o = run(
        &["eval", "--checkpoint", "run/checkpoint.tdlc", "--dataset", "ds3"],
        d.path(),
    );
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    ok(&["synth", "--n", "2", "--out", "ds"], d.path());
    let bytes = std::fs::read(d.path().join("run/checkpoint.tdlc")).unwrap();
    std::fs::write(d.path().join("trunc.tdlc"), &bytes[..bytes.len() / 2]).unwrap();
    let mut flipped = bytes.clone();
    flipped[0] ^= 0xff;
    std::fs::write(d.path().join("magic.tdlc"), flipped).unwrap();
    for name in ["trunc.tdlc", "magic.tdlc"] {
        let o = run(&["eval", "--checkpoint", name, "--dataset", "ds"], d.path());
        assert_eq!(code(&o), 5, "{name}: {}", stderr(&o));
        assert!(stderr(&o).contains(name));
    }
}

#[test]
fn verify_suites_and_fault_injection() {
    let d = tempfile::tempdir().unwrap();
    let o = ok(&["verify", "--suite", "swin", "--suite", "metrics"], d.path());
    let out = stdout(&o);
    assert!(out.contains("PASS swin") && out.contains("PASS metrics"), "{out}");
    assert!(!out.contains("gradcheck"));

    let o = run(&["verify", "--suite", "gradcheck", "--inject-fault"], d.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("gradcheck"));
    assert!(stdout(&o).contains("FAIL custom (fault injected)"));

    assert_eq!(code(&run(&["verify", "--suite", "nope"], d.path())), 2);
}

#[test]
fn count_params_reports_reference_and_breakdown() {
    let d = tempfile::tempdir().unwrap();
    let out = stdout(&ok(&["count-params"], d.path()));
    assert_eq!(out.lines().next(), Some("total 20715250"));
    let parts: usize = out
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().nth(1).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(parts, 20_715_250);
    assert!(stdout(&ok(&["count-params", "--tiny"], d.path())).starts_with("total 26987\n"));
}
