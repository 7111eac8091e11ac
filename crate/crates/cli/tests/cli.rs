use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn pdt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdt"))
        .args(args)
        .env_remove("PDT_SEED")
        .output()
        .expect("spawn pdt")
}

fn ok(args: &[&str]) -> String {
    let out = pdt(args);
    assert!(
        out.status.success(),
        "pdt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn synth(dir: &TempDir, name: &str, extra: &[&str]) -> String {
    let path = dir.path().join(name).to_string_lossy().into_owned();
    let mut args = vec!["synth", "--out", &path];
    args.extend_from_slice(extra);
    ok(&args);
    path
}

/// Parse a two-line CSV into header → value pairs.
fn csv_row(text: &str) -> Vec<(String, String)> {
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',');
    let row = lines.next().unwrap().split(',');
    header.zip(row).map(|(h, v)| (h.to_string(), v.to_string())).collect()
}

fn field<'a>(row: &'a [(String, String)], name: &str) -> &'a str {
    &row.iter().find(|(h, _)| h == name).unwrap().1
}

#[test]
fn clean_artifact_has_no_rollbacks() {
    let dir = TempDir::new().unwrap();
    let art = synth(&dir, "clean.pdtr", &[]);
    let row = csv_row(&ok(&["replay", &art, "--format", "csv"]));
    assert_eq!(field(&row, "rollbacks"), "0");
    assert_eq!(field(&row, "tokens_committed"), "384");
}

#[test]
fn three_planted_divergences_give_three_rollbacks() {
    let dir = TempDir::new().unwrap();
    let art = synth(
        &dir,
        "p.pdtr",
        &["--plant", "0:10", "--plant", "1:40", "--plant", "2:70"],
    );
    let trace = dir.path().join("p.trace");
    let out = ok(&["replay", &art, "--trace", trace.to_str().unwrap(), "--format", "csv"]);
    assert_eq!(field(&csv_row(&out), "rollbacks"), "3");
    let text = std::fs::read_to_string(&trace).unwrap();
    let rollbacks: Vec<&str> = text.lines().filter(|l| l.starts_with("ROLLBACK")).collect();
    assert_eq!(rollbacks.len(), 3);
    assert!(rollbacks[1].contains("trigger_position=40 rolled_back_to=32"));
}

#[test]
fn replay_is_reproducible_across_runs_and_threads() {
    let dir = TempDir::new().unwrap();
    let art = synth(&dir, "r.pdtr", &["--plant", "1:20"]);
    let base = ok(&["replay", &art, "--format", "csv", "--cadence", "stochastic"]);
    assert_eq!(
        base,
        ok(&["replay", &art, "--format", "csv", "--cadence", "stochastic"])
    );
    let threaded = ok(&[
        "replay",
        &art,
        "--format",
        "csv",
        "--cadence",
        "stochastic",
        "--threads",
        "4",
    ]);
    assert_eq!(base, threaded);
    let reseeded = ok(&[
        "--seed",
        "5",
        "replay",
        &art,
        "--format",
        "csv",
        "--cadence",
        "stochastic",
    ]);
    assert_ne!(
        field(&csv_row(&base), "trace_sha256"),
        field(&csv_row(&reseeded), "trace_sha256")
    );
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = TempDir::new().unwrap();
    let flag = synth(&dir, "flag.pdtr", &["--seed", "11", "--length", "8"]);
    let env = dir.path().join("env.pdtr");
    let out = Command::new(env!("CARGO_BIN_EXE_pdt"))
        .args(["synth", "--length", "8", "--out", env.to_str().unwrap()])
        .env("PDT_SEED", "11")
        .output()
        .unwrap();
    assert!(out.status.success());
    let default = synth(&dir, "zero.pdtr", &["--length", "8"]);
    let bytes = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(bytes(Path::new(&flag)), bytes(&env));
    assert_ne!(bytes(Path::new(&flag)), bytes(Path::new(&default)));
}

fn transcript_value(text: &str, label: &str) -> f64 {
    let line = text.lines().find(|l| l.contains(label)).unwrap();
    let rest = line.split(':').nth(1).unwrap().trim();
    rest.split_whitespace().next().unwrap().parse().unwrap()
}

#[test]
fn clustered_transcript_carries_every_field() {
    let out = ok(&[
        "--seed",
        "3",
        "clustered-sim",
        "--rho",
        "0.5",
        "--L",
        "32",
        "--q_token",
        "0.0033",
        "--trials",
        "10000",
    ]);
    for needle in [
        "--- Clustered Rollback Simulation ---",
        "L=32, rho=0.5, q_token=0.0033",
        "(Theo: 0.1004)",
        "Conclusion:",
        "Stride failure rate DECREASES",
        "Variance INCREASES",
    ] {
        assert!(out.contains(needle), "missing {needle:?} in\n{out}");
    }
    let indep = transcript_value(&out, "[Independent] Stride Fail Prob");
    let clustered = transcript_value(&out, "[Clustered]   Stride Fail Prob");
    assert!((0.089..=0.111).contains(&indep));
    assert!((0.047..=0.062).contains(&clustered));
    assert!(!out.contains("Warning"));
    let threaded = ok(&["--seed", "3", "clustered-sim", "--trials", "10000", "--threads", "4"]);
    assert_eq!(out, threaded);
}

#[test]
fn uncorrelated_errors_match_independent_ones() {
    let out = ok(&["clustered-sim", "--rho", "0", "--trials", "20000", "--format", "csv"]);
    let row = csv_row(&out);
    let get = |k: &str| field(&row, k).parse::<f64>().unwrap();
    // both are binomial(20000, ~0.1): 3-sigma of the difference is about 0.009
    assert!((get("independent_fail_prob") - get("clustered_fail_prob")).abs() < 0.009);
    assert!((get("independent_variance") - get("clustered_variance")).abs() < 0.01);
}

#[test]
fn single_trial_prints_a_disclaimer() {
    let out = ok(&["clustered-sim", "--trials", "1"]);
    assert!(out.contains("Warning: only 1 trial(s)"));
}

#[test]
fn out_of_range_flags_are_validation_errors() {
    for args in [
        vec!["clustered-sim", "--rho", "1.0"],
        vec!["clustered-sim", "--q-token", "0"],
        vec!["clustered-sim", "--trials", "0"],
    ] {
        assert_eq!(pdt(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn memcalc_reports_the_worked_examples() {
    let mqa = ok(&["memcalc", configs().join("mqa.toml").to_str().unwrap()]);
    assert!(mqa.lines().any(|l| l.starts_with("kv_total") && l.ends_with("106 MiB")));
    assert!(mqa
        .lines()
        .any(|l| l.starts_with("kv_per_token_per_layer") && l.ends_with("512 B")));
    let gqa = ok(&[
        "memcalc",
        configs().join("gqa.toml").to_str().unwrap(),
        "--format",
        "csv",
    ]);
    assert!(gqa.contains("kv_total,815792128,778 MiB"));
    assert!(gqa.contains("kv_per_token,131072,128 KiB"));
    assert!(gqa.contains("verdict,ok,"));
}

#[test]
fn memcalc_flags_oom_and_bad_dims() {
    let dir = TempDir::new().unwrap();
    let base = std::fs::read_to_string(configs().join("mqa.toml")).unwrap();
    let oom = dir.path().join("oom.toml");
    std::fs::write(&oom, base.replace("weights_bytes = 0", "weights_bytes = 200000000000")).unwrap();
    let out = ok(&["memcalc", oom.to_str().unwrap(), "--format", "csv"]);
    assert!(out.contains("verdict,oom,"));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, base.replace("d_head = 128", "d_head = 100")).unwrap();
    let out = pdt(&["memcalc", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("d_model"));
}

#[test]
fn one_point_cadence_sweep_equals_replay() {
    let dir = TempDir::new().unwrap();
    let art = synth(&dir, "s.pdtr", &["--plant", "2:50"]);
    let replay = csv_row(&ok(&["replay", &art, "--format", "csv", "--m", "4", "--stride", "16"]));
    let sweep = csv_row(&ok(&[
        "sweep",
        "cadence",
        &art,
        "--m-values",
        "4",
        "--b-values",
        "16",
        "--format",
        "csv",
    ]));
    let tail: Vec<_> = sweep.iter().skip(4).cloned().collect();
    assert_eq!(tail, replay);
}

#[test]
fn sweep_rows_are_ordered_and_thread_independent() {
    let dir = TempDir::new().unwrap();
    let art = synth(&dir, "g.pdtr", &["--length", "48"]);
    let args = |t: &'static str| {
        vec![
            "sweep",
            "cadence",
            art.as_str(),
            "--m-values",
            "2,4",
            "--b-values",
            "8,16",
            "--format",
            "csv",
            "--threads",
            t,
        ]
    };
    let one = ok(&args("1"));
    assert_eq!(one, ok(&args("4")));
    let keys: Vec<String> = one
        .lines()
        .skip(1)
        .map(|l| l.split(',').take(2).collect::<Vec<_>>().join(","))
        .collect();
    assert_eq!(keys, ["2,8", "2,16", "4,8", "4,16"]);
}

#[test]
fn mask_ablation_with_zero_gate_is_flat() {
    let dir = TempDir::new().unwrap();
    let art = synth(&dir, "m.pdtr", &[]);
    let out = ok(&[
        "sweep",
        "mask-ablation",
        &art,
        "--gate-override",
        "0",
        "--format",
        "csv",
    ]);
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 3 * 4);
    assert!(rows.iter().all(|r| r.ends_with(",0.000000")));
    let open = ok(&["sweep", "mask-ablation", &art, "--format", "csv"]);
    assert!(open.lines().skip(1).any(|r| !r.ends_with(",0.000000")));
}

#[test]
fn zero_noise_reproduces_the_baseline() {
    let dir = TempDir::new().unwrap();
    let art = synth(&dir, "n.pdtr", &["--plant", "0:5"]);
    let out = ok(&["sweep", "noise-stress", &art, "--scales", "0,0.5", "--format", "csv"]);
    let rows: Vec<Vec<&str>> = out.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0][6], "true");
    let baseline = csv_row(&ok(&["replay", &art, "--format", "csv"]));
    assert_eq!(rows[0][7], field(&baseline, "trace_sha256"));
    assert_eq!(rows[1][6], "false");
}

#[test]
fn empty_sweep_ranges_are_rejected() {
    let dir = TempDir::new().unwrap();
    let art = synth(&dir, "e.pdtr", &["--length", "8"]);
    assert_eq!(
        pdt(&["sweep", "cadence", &art, "--b-values", "8"]).status.code(),
        Some(2)
    );
    assert_eq!(
        pdt(&["sweep", "noise-stress", &art, "--scales", ""]).status.code(),
        Some(2)
    );
}

#[test]
fn malformed_artifacts_report_a_byte_offset() {
    let dir = TempDir::new().unwrap();
    let art = synth(&dir, "t.pdtr", &["--length", "8"]);
    let bytes = std::fs::read(&art).unwrap();
    let cut = dir.path().join("cut.pdtr");
    std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    let out = pdt(&["replay", cut.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("parse error at byte"), "{err}");
    let missing = pdt(&["replay", dir.path().join("none.pdtr").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn runtime_failures_use_the_runtime_exit_code() {
    let dir = TempDir::new().unwrap();
    // tau = 1 fails every stride, so the rollback limit trips
    let art = synth(&dir, "f.pdtr", &["--length", "8"]);
    let out = pdt(&["replay", &art, "--tau", "1", "--stride", "8", "--horizon", "8"]);
    assert_eq!(out.status.code(), Some(1));
    let out = pdt(&["replay", &art, "--stride", "64", "--horizon", "8"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn balance_replays_a_loss_log() {
    let dir = TempDir::new().unwrap();
    let log = dir.path().join("loss.csv");
    let mut text = String::from("step,g_ce,g_kl,l_ce,l_kl\n");
    for s in 0..=100 {
        text += &format!("{s},1.0,1.0,2.0,1.0\n");
    }
    std::fs::write(&log, text).unwrap();
    let out = ok(&["balance", log.to_str().unwrap(), "--updates-only", "--format", "csv"]);
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(
        rows[0],
        "step,lambda_ce,lambda_kl,updated,rho,delta_r,sigma_lambda,flags"
    );
    // balanced norms and equal rates: the weights stay put and nothing is flagged
    assert_eq!(
        rows[1..],
        [
            "50,0.500000,0.500000,true,1.000000,0.000000,0.000000,-",
            "100,0.500000,0.500000,true,1.000000,0.000000,0.000000,-"
        ]
    );
    std::fs::write(&log, "step,g_ce\n1,2\n").unwrap();
    assert_eq!(pdt(&["balance", log.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn analytics_closed_forms() {
    assert!(ok(&["analytics", "stale-bound", "--L", "32", "--epsilon", "0.005"]).contains("0.282843"));
    assert!(ok(&[
        "analytics",
        "cadence-variance",
        "--l",
        "32",
        "--epsilon",
        "0.01",
        "--m",
        "4"
    ])
    .contains("0.030000"));
    let scale = ok(&["analytics", "scale", "--format", "csv", "--max-n", "3"]);
    assert_eq!(scale.lines().nth(3).unwrap(), "3,4.000000,32,near-linear");
}

#[test]
fn output_flag_writes_the_report_to_a_file() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("report.txt");
    let stdout = ok(&["analytics", "scale", "--output", path.to_str().unwrap()]);
    assert!(stdout.is_empty());
    assert!(std::fs::read_to_string(path).unwrap().starts_with("n_streams"));
}
