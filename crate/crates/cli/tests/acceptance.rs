//! Acceptance suite. Drives the `rlvr-lab` binary and prints one PASS/FAIL
//! line per criterion; exits nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rlvr_lab::gradan::RatioBin;
use rlvr_lab::objectives::ClipRange;
use rlvr_lab::policy::Policy;
use rlvr_lab::rollout::write_jsonl;
use rlvr_lab::verify::synthetic_log;

const BIN: &str = env!("CARGO_BIN_EXE_rlvr-lab");

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

struct Run {
    code: Option<i32>,
    stdout: String,
    stderr: String,
    elapsed: Duration,
}

fn rlvr(out_root: &Path, args: &[&str]) -> Run {
    let started = Instant::now();
    let out = Command::new(BIN)
        .args(args)
        .env("RLVR_LAB_OUT", out_root)
        .current_dir(workspace())
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code(),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        elapsed: started.elapsed(),
    }
}

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

/// Run verify suites and require every property line to pass within `limit`.
fn suites(root: &Path, names: &[&str], expect: &[&str], limit: Duration) -> Outcome {
    let mut lines = Vec::new();
    let mut elapsed = Duration::ZERO;
    for name in names {
        let run = rlvr(
            root,
            &[
                "verify",
                "--suite",
                name,
                "--out-dir",
                &root.join(format!("verify-{name}")).to_string_lossy(),
            ],
        );
        elapsed += run.elapsed;
        if run.code != Some(0) {
            return outcome(
                false,
                format!(
                    "verify --suite {name} exited {:?}\n{}{}",
                    run.code, run.stdout, run.stderr
                ),
            );
        }
        lines.extend(
            run.stdout
                .lines()
                .filter(|l| l.starts_with("PASS") || l.starts_with("FAIL"))
                .map(String::from),
        );
    }
    let all_pass = lines.iter().all(|l| l.starts_with("PASS"));
    let present = expect.iter().all(|e| lines.iter().any(|l| l.contains(e)));
    let detail = format!(
        "{:.1}s (limit {}s); {}",
        elapsed.as_secs_f64(),
        limit.as_secs(),
        lines.join(" | ")
    );
    outcome(all_pass && present && elapsed < limit, detail)
}

fn table_structure(root: &Path) -> Outcome {
    let clip = ClipRange::symmetric(0.2);
    let (policy, records) = synthetic_log(clip).expect("fixture");
    let dir = root.join("table");
    fs::create_dir_all(&dir).unwrap();
    let log = dir.join("log.jsonl");
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &records).unwrap();
    fs::write(&log, buf).unwrap();
    let pol = dir.join("policy.txt");
    fs::write(&pol, policy.to_text()).unwrap();

    let run = rlvr(
        root,
        &[
            "bins",
            "--log",
            &log.to_string_lossy(),
            "--policy",
            &pol.to_string_lossy(),
            "--out-dir",
            &dir.join("out").to_string_lossy(),
        ],
    );
    if run.code != Some(0) {
        return outcome(false, format!("bins exited {:?}: {}", run.code, run.stderr));
    }
    let csv = fs::read_to_string(dir.join("out/bins.csv")).unwrap();

    // independent recount: (class, bin) -> (tokens, sum of ratios)
    let mut expect: BTreeMap<(&str, &str), (usize, f64)> = BTreeMap::new();
    let mut per_class: BTreeMap<&str, usize> = BTreeMap::new();
    for rec in &records {
        let class = if rec.reward == 1 { "positive" } else { "negative" };
        for t in 0..rec.tokens.len() {
            let ctx = policy.context(rec.prompt, &rec.tokens[..t]);
            let ratio = (policy.token_logprob(&ctx, rec.tokens[t]).unwrap() - rec.old_logprobs[t]).exp();
            let label = if ratio < 0.8 {
                "<1-eps"
            } else if ratio < 1.0 {
                "[1-eps,1)"
            } else if ratio <= 1.2 {
                "[1,1+eps]"
            } else {
                ">1+eps"
            };
            assert_eq!(RatioBin::of(ratio, clip).label(), label);
            let e = expect.entry((class, label)).or_default();
            e.0 += 1;
            e.1 += ratio;
            *per_class.entry(class).or_default() += 1;
        }
    }

    let mut worst = 0.0f64;
    let mut problems = Vec::new();
    for line in csv.lines().skip(1) {
        let q: Vec<&str> = line.split('"').collect();
        let (class, range) = (q[0].trim_end_matches(','), q[1]);
        let f: Vec<&str> = q[2].trim_start_matches(',').split(',').collect();
        let (tokens, percent, avg) = (f[0], f[1], f[2]);
        let (n, sum) = expect.get(&(class, range)).copied().unwrap_or((0, 0.0));
        if tokens.parse::<usize>().unwrap() != n {
            problems.push(format!("{class} {range}: {tokens} tokens, expected {n}"));
        }
        let pct = 100.0 * n as f64 / per_class[class] as f64;
        if (percent.parse::<f64>().unwrap() - pct).abs() > 1e-9 {
            problems.push(format!("{class} {range}: percent {percent}, expected {pct}"));
        }
        let should_clip = (class == "positive" && range == ">1+eps") || (class == "negative" && range == "<1-eps");
        if should_clip != (avg == "-") {
            problems.push(format!("{class} {range}: marker {avg:?}"));
        }
        if !should_clip && n > 0 {
            worst = worst.max((avg.parse::<f64>().unwrap() - sum / n as f64).abs());
        }
    }
    let ok = problems.is_empty() && worst < 1e-9 && csv.lines().count() == 9;
    outcome(
        ok,
        format!(
            "zero markers at positive >1+eps and negative <1-eps; max |avg W - avg ratio| {worst:.2e}; {}",
            problems.join("; ")
        ),
    )
}

fn grpo_closed(s: f64, positive: bool) -> f64 {
    let r = s.exp();
    if (positive && r > 1.2) || (!positive && r < 0.8) {
        0.0
    } else {
        r
    }
}

fn real_closed(s: f64, positive: bool) -> f64 {
    let z = if positive { 2.0 * s } else { -2.0 * s };
    2.0 / (1.0 + 4.0 * z.exp())
}

fn figure(root: &Path) -> Outcome {
    let dir = root.join("figure");
    let run = rlvr(
        root,
        &["curves", "--method", "figure", "--out-dir", &dir.to_string_lossy()],
    );
    if run.code != Some(0) {
        return outcome(false, format!("curves exited {:?}: {}", run.code, run.stderr));
    }
    let csv = fs::read_to_string(dir.join("curves.csv")).unwrap();
    let mut worst = 0.0f64;
    let mut at_zero = Vec::new();
    let mut real_max = 0.0f64;
    let mut rows = 0;
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let positive = f[1] == "positive";
        let s: f64 = f[2].parse().unwrap();
        let w: f64 = f[3].parse().unwrap();
        let reference = match f[0] {
            "grpo" => grpo_closed(s, positive),
            "real" => {
                real_max = real_max.max(w);
                if s == 0.0 {
                    at_zero.push(w);
                }
                real_closed(s, positive)
            }
            other => return outcome(false, format!("unexpected method {other}")),
        };
        worst = worst.max((w - reference).abs());
        rows += 1;
    }
    let zero_ok = at_zero.len() == 2 && at_zero.iter().all(|&w| w == 0.4);
    outcome(
        worst < 1e-12 && zero_ok && real_max <= 2.0 && rows > 0,
        format!("{rows} points; max abs diff {worst:.2e}; REAL at s=0: {at_zero:?}; REAL max {real_max}"),
    )
}

fn final_pass_at_1(metrics: &str) -> Option<f64> {
    let last = metrics.lines().last()?;
    last.split(',').nth(4)?.parse().ok()
}

fn smoke(root: &Path) -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for (cfg, name, threshold) in [
        ("configs/parity_real.cfg", "smoke-real", 0.95),
        ("configs/parity_grpo.cfg", "smoke-grpo", 0.90),
    ] {
        let run = rlvr(root, &["train", "--config", cfg, "--name", name]);
        let metrics = fs::read_to_string(root.join(name).join("metrics.csv")).unwrap_or_default();
        let steps = metrics.lines().count().saturating_sub(1);
        let p = final_pass_at_1(&metrics);
        let good = run.code == Some(0)
            && steps == 2000
            && p.is_some_and(|p| p >= threshold)
            && run.elapsed < Duration::from_secs(600);
        ok &= good;
        details.push(format!(
            "{name}: exit {:?}, {steps} steps, pass@1 {p:?} (>= {threshold}), {:.1}s",
            run.code,
            run.elapsed.as_secs_f64()
        ));
    }
    outcome(ok, details.join("; "))
}

fn determinism(root: &Path) -> Outcome {
    let run = rlvr(
        root,
        &[
            "train",
            "--config",
            "configs/parity_real.cfg",
            "--name",
            "smoke-real-again",
        ],
    );
    if run.code != Some(0) {
        return outcome(false, format!("rerun exited {:?}: {}", run.code, run.stderr));
    }
    let a = fs::read(root.join("smoke-real/metrics.csv")).unwrap_or_default();
    let b = fs::read(root.join("smoke-real-again/metrics.csv")).unwrap_or_default();
    let policies_equal =
        fs::read(root.join("smoke-real/policy.txt")).ok() == fs::read(root.join("smoke-real-again/policy.txt")).ok();
    outcome(
        !a.is_empty() && a == b && policies_equal,
        format!(
            "metrics.csv {} bytes, identical: {}; policy identical: {policies_equal}",
            a.len(),
            a == b
        ),
    )
}

type Check<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let criteria: Vec<Check> = vec![
        (
            "gradient oracle, six methods, under 2 min",
            Box::new(|| {
                suites(
                    root,
                    &["gradients"],
                    &[
                        "fd/grpo:",
                        "fd/dapo:",
                        "fd/gspo:",
                        "fd/real:",
                        "fd/real_vanilla:",
                        "fd/real_bce:",
                        "real-weight-consistency",
                    ],
                    Duration::from_secs(120),
                )
            }),
        ),
        (
            "REAL weights below 1/tau, supremum approached, under 30 s",
            Box::new(|| {
                suites(
                    root,
                    &["bounds"],
                    &[
                        "real-below-inverse-tau",
                        "bce-at-most-inverse-tau",
                        "supremum-approached",
                    ],
                    Duration::from_secs(30),
                )
            }),
        ),
        (
            "REAL weight monotone in the rollout score",
            Box::new(|| {
                suites(
                    root,
                    &["monotonicity"],
                    &["real-strictly-monotone"],
                    Duration::from_secs(600),
                )
            }),
        ),
        (
            "GRPO exponential growth and zero clipped gradient",
            Box::new(|| {
                suites(
                    root,
                    &["growth"],
                    &["grpo-exponential", "clipped-zero-gradient"],
                    Duration::from_secs(600),
                )
            }),
        ),
        (
            "unified CE pairwise identity and REAL decomposition",
            Box::new(|| {
                suites(
                    root,
                    &["identities"],
                    &["unified-ce-pairwise", "real-decomposition"],
                    Duration::from_secs(600),
                )
            }),
        ),
        ("ratio-bin table structure", Box::new(|| table_structure(root))),
        ("weight-curve figure closed forms", Box::new(|| figure(root))),
        (
            "degenerate groups: advantage methods zero, REAL nonzero",
            Box::new(|| {
                suites(
                    root,
                    &["degenerate"],
                    &["advantage-zero-real-nonzero"],
                    Duration::from_secs(600),
                )
            }),
        ),
        (
            "parity training smoke (REAL >= 0.95, GRPO >= 0.90)",
            Box::new(|| smoke(root)),
        ),
        ("byte-identical metrics across reruns", Box::new(|| determinism(root))),
    ];

    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failed += usize::from(!o.passed);
        println!(
            "{} [{}] {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
