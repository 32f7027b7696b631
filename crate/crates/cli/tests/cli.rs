use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_rlvr-lab");

fn rlvr(out_root: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RLVR_LAB_OUT", out_root)
        .current_dir(out_root)
        .output()
        .expect("binary runs")
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

const TINY: &[&str] = &[
    "--set",
    "task_size=3",
    "--set",
    "steps=6",
    "--set",
    "batch_size=8",
    "--set",
    "eval_interval=3",
    "--set",
    "eval_prompts=10",
];

fn train(root: &Path, name: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--name", name];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    rlvr(root, &args)
}

#[test]
fn train_writes_outputs_under_env_root() {
    let tmp = tempfile::tempdir().unwrap();
    let out = train(tmp.path(), "run", &["--log-rollouts"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("run");
    for f in [
        "metrics.csv",
        "timing.csv",
        "checkpoint.txt",
        "policy.txt",
        "rollouts.jsonl",
        "manifest.json",
    ] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 7);
    assert!(metrics.starts_with("step,entropy,reward,loss,pass_at_1,solved_ratio,degenerate_fraction\n"));
    let m = manifest(&dir);
    assert_eq!(m["status"], "ok");
    assert_eq!(m["seed"], 0);
    assert_eq!(m["output_sha256"].as_object().unwrap().len(), 5);
}

#[test]
fn out_dir_flag_overrides_env() {
    let tmp = tempfile::tempdir().unwrap();
    let explicit = tmp.path().join("elsewhere");
    let out = rlvr(
        tmp.path(),
        &["curves", "--method", "real", "--out-dir", explicit.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(0));
    assert!(explicit.join("curves.csv").exists());
    assert!(!tmp.path().join("curves").exists());
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    assert_eq!(rlvr(root, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        rlvr(root, &["curves", "--method", "real", "--tau", "0"]).status.code(),
        Some(1)
    );
    assert_eq!(rlvr(root, &["verify", "--suite", "nope"]).status.code(), Some(1));
    assert_eq!(rlvr(root, &["--help"]).status.code(), Some(0));

    fs::write(root.join("bad.cfg"), "method = real\nzeta = 1\nalpha = 2\n").unwrap();
    let out = rlvr(root, &["train", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("alpha") && err.contains("zeta"), "{err}");
}

#[test]
fn numeric_fault_exits_two_and_keeps_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out = train(tmp.path(), "fault", &["--set", "learning_rate=1e307"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("fault");
    assert_eq!(manifest(&dir)["status"], "numeric_fault");
    let text = fs::read_to_string(dir.join("checkpoint.txt")).unwrap();
    let (_, state) = rlvr_lab::trainer::parse_checkpoint(&text).unwrap();
    assert!(state.policy.rows().all(|(_, row)| row.iter().all(|z| z.is_finite())));
}

#[test]
fn verify_failure_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let out = rlvr(
        tmp.path(),
        &["verify", "--suite", "gradients", "--quick", "--inject-sign-flip"],
    );
    assert_eq!(out.status.code(), Some(3));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.lines().any(|l| l.starts_with("FAIL gradients/fd/real")),
        "{stdout}"
    );
    assert_eq!(manifest(&tmp.path().join("verify"))["status"], "verification_failed");
}

#[test]
fn resume_continues_the_same_trajectory() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    assert_eq!(train(root, "full", &[]).status.code(), Some(0));
    assert_eq!(train(root, "half", &["--set", "steps=3"]).status.code(), Some(0));
    let ckpt = root.join("half/checkpoint.txt");
    let out = rlvr(
        root,
        &[
            "train",
            "--resume",
            ckpt.to_str().unwrap(),
            "--set",
            "steps=6",
            "--name",
            "rest",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let full = fs::read_to_string(root.join("full/metrics.csv")).unwrap();
    let rest = fs::read_to_string(root.join("rest/metrics.csv")).unwrap();
    let tail: Vec<&str> = full.lines().skip(4).collect();
    assert_eq!(rest.lines().skip(1).collect::<Vec<_>>(), tail);
    assert_eq!(
        fs::read(root.join("full/policy.txt")).unwrap(),
        fs::read(root.join("rest/policy.txt")).unwrap()
    );
}

#[test]
fn eval_reads_checkpoints_and_bare_policies() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    assert_eq!(train(root, "run", &[]).status.code(), Some(0));
    let ckpt = root.join("run/checkpoint.txt");
    let out = rlvr(
        root,
        &[
            "eval",
            "--policy",
            ckpt.to_str().unwrap(),
            "--prompts",
            "20",
            "--samples",
            "2",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("eval/eval.json")).unwrap()).unwrap();
    let p = record["pass_at_1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));

    let bare = root.join("run/policy.txt");
    let out = rlvr(root, &["eval", "--policy", bare.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let out = rlvr(
        root,
        &[
            "eval",
            "--policy",
            bare.to_str().unwrap(),
            "--task",
            "parity:3",
            "--prompts",
            "5",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn damaged_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    assert_eq!(train(root, "run", &[]).status.code(), Some(0));
    let ckpt = root.join("run/checkpoint.txt");
    let text = fs::read_to_string(&ckpt).unwrap();
    fs::write(&ckpt, &text[..text.len() / 2]).unwrap();
    let out = rlvr(root, &["train", "--resume", ckpt.to_str().unwrap(), "--name", "again"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bins_reports_line_numbers_for_bad_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    assert_eq!(train(root, "run", &["--log-rollouts"]).status.code(), Some(0));
    let log = root.join("run/rollouts.jsonl");
    let pol = root.join("run/policy.txt");
    let out = rlvr(
        root,
        &[
            "bins",
            "--log",
            log.to_str().unwrap(),
            "--policy",
            pol.to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(root.join("bins/bins.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);

    let mut text = fs::read_to_string(&log).unwrap();
    text.push_str("{not json\n");
    let lines = text.lines().count();
    fs::write(&log, text).unwrap();
    let out = rlvr(
        root,
        &[
            "bins",
            "--log",
            log.to_str().unwrap(),
            "--policy",
            pol.to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&format!("line {lines}")));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    for name in ["a", "b"] {
        assert_eq!(train(root, name, &["--set", "method=dapo"]).status.code(), Some(0));
    }
    for f in ["metrics.csv", "policy.txt", "checkpoint.txt"] {
        assert_eq!(
            fs::read(root.join("a").join(f)).unwrap(),
            fs::read(root.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}
