use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn harm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_harm")).current_dir(dir).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = harm(dir, args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const CHAIN: &str = "iterations = 300\nburn_in = 100\nthin = 4\n";
const EXPERIMENT: &str = "runs = 3\nn_popular = 6\nn_random = 4\n\n[chain]\niterations = 200\nburn_in = 50\nthin = 5\n";

#[test]
fn simulate_fit_evaluate_end_to_end() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "chain.toml", CHAIN);
    write(d, "exp.toml", EXPERIMENT);
    ok(d, &["simulate", "--seed", "7", "--patients", "50", "--conditions", "20", "--out", "db.json", "--truth-out", "truth.json"]);
    ok(d, &["fit", "--db", "db.json", "--chain-config", "chain.toml", "--seed", "1", "--out", "summary.json", "--posterior-out", "post.jsonl", "--diagnostics-out", "diag.csv"]);
    ok(d, &["evaluate", "--db", "db.json", "--experiment-config", "exp.toml", "--seed", "3", "--out", "report"]);
    for f in ["db.json", "truth.json", "summary.json", "post.jsonl", "diag.csv"] {
        assert!(d.join(f).metadata().unwrap().len() > 0, "{f}");
    }
    for f in ["scores.csv", "summary.txt", "plot_data.csv", "report.json"] {
        assert!(d.join("report").join(f).metadata().unwrap().len() > 0, "{f}");
    }
    let post = fs::read_to_string(d.join("post.jsonl")).unwrap();
    assert_eq!(post.lines().count(), 50 * 400);
}

#[test]
fn outputs_are_reproducible_and_thread_independent() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "chain.toml", CHAIN);
    write(d, "exp.toml", EXPERIMENT);
    ok(d, &["simulate", "--seed", "4", "--patients", "30", "--conditions", "12", "--out", "db.json"]);
    ok(d, &["simulate", "--seed", "4", "--patients", "30", "--conditions", "12", "--out", "db2.json"]);
    assert_eq!(fs::read(d.join("db.json")).unwrap(), fs::read(d.join("db2.json")).unwrap());
    ok(d, &["fit", "--db", "db.json", "--chain-config", "chain.toml", "--seed", "5", "--out", "a.json"]);
    ok(d, &["fit", "--db", "db.json", "--chain-config", "chain.toml", "--seed", "5", "--out", "b.json"]);
    assert_eq!(fs::read(d.join("a.json")).unwrap(), fs::read(d.join("b.json")).unwrap());
    ok(d, &["--threads", "1", "evaluate", "--db", "db.json", "--experiment-config", "exp.toml", "--seed", "9", "--out", "r1"]);
    ok(d, &["--threads", "3", "evaluate", "--db", "db.json", "--experiment-config", "exp.toml", "--seed", "9", "--out", "r3"]);
    for f in ["scores.csv", "summary.txt", "plot_data.csv", "report.json"] {
        assert_eq!(fs::read(d.join("r1").join(f)).unwrap(), fs::read(d.join("r3").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn fitting_an_empty_database_is_a_validation_error() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "empty.json", r#"{"patients":[],"vocabulary":[],"covariate_names":[]}"#);
    let out = harm(d, &["fit", "--db", "empty.json", "--seed", "1", "--out", "s.json"]);
    assert_eq!(code(&out), 1);
    assert!(!d.join("s.json").exists());
}

#[test]
fn usage_errors_exit_one() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    assert_eq!(code(&harm(d, &["fit", "--db", "x.json", "--out", "s.json"])), 1, "missing seed");
    assert_eq!(code(&harm(d, &["simulate", "--patients", "3", "--conditions", "2", "--out", "x.json"])), 1, "missing seed");
    assert_eq!(code(&harm(d, &["predict", "--frozen", "x", "--patient", "p", "--bogus"])), 1);
    assert_eq!(code(&harm(d, &["no-such-command"])), 1);
    assert_eq!(code(&harm(d, &["fit", "--db", "missing.json", "--seed", "1", "--out", "s.json"])), 1);
    assert_eq!(code(&harm(d, &["--help"])), 0);
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let out = harm(d, &["simulate", "--seed", "1", "--patients", "3", "--conditions", "2", "--out", "no/such/dir/db.json"]);
    assert_eq!(code(&out), 2);
}

const COVARIATES: &str = "patient_id,gender,age,race,treatment\nP1,F,54,white,T\nP2,M,67,black,P\nP3,F,48,white,P\n";

/// Early visits, with every label present so the vocabulary is complete.
const EARLY: &str = r#"{"patient_id":"P1","day":0,"conditions":["anemia","fatigue"]}
{"patient_id":"P1","day":40,"conditions":["nausea"]}
{"patient_id":"P2","day":0,"conditions":["anemia"]}
{"patient_id":"P3","day":0,"conditions":["headache"]}
{"patient_id":"P3","day":45,"conditions":["fatigue","rash"]}
"#;

const LATE: &str = r#"{"patient_id":"P1","day":90,"conditions":["rash","fatigue"]}
{"patient_id":"P2","day":50,"conditions":[]}
{"patient_id":"P2","day":100,"conditions":["nausea","headache"]}
"#;

fn ingest(d: &Path, encounters: &str, out: &str) {
    let enc = write(d, &format!("{out}.jsonl"), encounters);
    ok(d, &["ingest", "--encounters", enc.to_str().unwrap(), "--covariates", "cov.csv", "--out", out]);
}

#[test]
fn predict_lists_three_ranked_conditions() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "cov.csv", COVARIATES);
    write(d, "chain.toml", CHAIN);
    ingest(d, EARLY, "db.json");
    ok(d, &["fit", "--db", "db.json", "--chain-config", "chain.toml", "--seed", "2", "--out", "s.json"]);
    ok(d, &["freeze", "--summary", "s.json", "--db", "db.json", "--out", "fp.jsonl"]);
    let stdout = ok(d, &["predict", "--frozen", "fp.jsonl", "--patient", "P1", "--top", "3"]);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 3);
    let scores: Vec<f64> = lines.iter().map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    let labels: Vec<&str> = lines.iter().map(|l| l.split('\t').next().unwrap()).collect();
    assert!(labels.iter().all(|l| ["anemia", "fatigue", "headache", "nausea", "rash"].contains(l)));
    assert_eq!(code(&harm(d, &["predict", "--frozen", "fp.jsonl", "--patient", "P9"])), 1);
}

#[test]
fn absorbing_new_visits_matches_freezing_the_full_history() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "cov.csv", COVARIATES);
    write(d, "chain.toml", CHAIN);
    ingest(d, EARLY, "early.json");
    ingest(d, &format!("{EARLY}{LATE}"), "full.json");
    write(d, "late.jsonl", LATE);
    ok(d, &["fit", "--db", "early.json", "--chain-config", "chain.toml", "--seed", "3", "--out", "s.json"]);
    ok(d, &["freeze", "--summary", "s.json", "--db", "early.json", "--out", "fp_early.jsonl"]);
    ok(d, &["freeze", "--frozen", "fp_early.jsonl", "--absorb", "late.jsonl", "--out", "fp_online.jsonl"]);
    ok(d, &["freeze", "--summary", "s.json", "--db", "full.json", "--out", "fp_batch.jsonl"]);
    assert_eq!(fs::read(d.join("fp_online.jsonl")).unwrap(), fs::read(d.join("fp_batch.jsonl")).unwrap());
    assert_ne!(fs::read(d.join("fp_online.jsonl")).unwrap(), fs::read(d.join("fp_early.jsonl")).unwrap());
    for p in ["P1", "P2", "P3"] {
        let online = ok(d, &["predict", "--frozen", "fp_online.jsonl", "--patient", p, "--top", "3"]);
        let batch = ok(d, &["predict", "--frozen", "fp_batch.jsonl", "--patient", p, "--top", "3"]);
        assert_eq!(online, batch, "{p}");
    }
    write(d, "stranger.jsonl", "{\"patient_id\":\"P7\",\"day\":1,\"conditions\":[]}\n");
    assert_eq!(code(&harm(d, &["freeze", "--frozen", "fp_early.jsonl", "--absorb", "stranger.jsonl", "--out", "x.jsonl"])), 1);
}

#[test]
fn mine_and_report() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "cov.csv", COVARIATES);
    write(d, "chain.toml", CHAIN);
    ingest(d, EARLY, "db.json");
    let mined = ok(d, &["mine", "--db", "db.json", "--ranker", "minsup", "--theta", "1", "--patient", "P1", "--top", "2"]);
    assert_eq!(mined.lines().count(), 2);
    // P1: [anemia, fatigue] then [nausea]
    let conf = ok(d, &["mine", "--db", "db.json", "--ranker", "conf", "--patient", "P1"]);
    let lines: Vec<&str> = conf.lines().collect();
    assert_eq!(lines.len(), 25);
    assert_eq!(
        lines[..6],
        [
            "{} -> anemia\t0.5\t1\t2",
            "{} -> fatigue\t0.5\t1\t2",
            "{} -> nausea\t0.5\t1\t2",
            "anemia -> fatigue\t0.5\t1\t2",
            "anemia -> nausea\t0.5\t1\t2",
            "fatigue -> nausea\t0.5\t1\t2",
        ]
    );
    assert!(lines.contains(&"fatigue -> anemia\t0\t0\t2"));
    assert!(lines.contains(&"nausea -> anemia\t0\t0\t1"));
    ok(d, &["fit", "--db", "db.json", "--chain-config", "chain.toml", "--seed", "2", "--out", "s.json"]);
    ok(d, &["report", "--summary", "s.json", "--db", "db.json", "--group-by", "male", "--rules={}->fatigue,anemia->nausea", "--out", "bands.csv"]);
    let table = fs::read_to_string(d.join("bands.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 * 2);
    assert!(table.starts_with("male,rule,n_patients,mean"));
    let out = harm(d, &["report", "--summary", "s.json", "--db", "db.json", "--group-by", "height", "--rules={}->fatigue", "--out", "x.csv"]);
    assert_eq!(code(&out), 1);
}
