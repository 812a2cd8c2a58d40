use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn golden() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/golden")
}

fn oodeval(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oodeval")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = oodeval(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn eval_reproduces_golden_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = golden().join("config.toml");
    let table = ok(&["eval", "--config", s(&cfg), "--workers", "2", "--out", s(tmp.path())]);
    assert!(table.starts_with("| method |"));
    let got = fs::read_to_string(tmp.path().join("report.json")).unwrap();
    let want = fs::read_to_string(golden().join("golden_report.json")).unwrap();
    assert_eq!(got, want);
    for f in ["report.csv", "report.md", "outcomes/msp__far.tsv", "outcomes/mahalanobis__far.tsv"] {
        assert!(tmp.path().join(f).is_file(), "missing {f}");
    }

    let csv = ok(&["report", "--report", s(&tmp.path().join("report.json")), "--format", "csv"]);
    assert_eq!(csv, fs::read_to_string(tmp.path().join("report.csv")).unwrap());
}

#[test]
fn eval_flags_override_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = golden().join("config.toml");
    ok(&["eval", "--config", s(&cfg), "--method", "energy", "--tau", "1.5", "--out", s(tmp.path())]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("report.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["method"], "energy");
    assert_eq!(rows[0]["tau"], 1.5);
}

#[test]
fn fit_score_and_calibrate() {
    let tmp = tempfile::tempdir().unwrap();
    let g = golden();
    let cats = g.join("categories.tsv");
    let state = tmp.path().join("maha.state");
    let scores = tmp.path().join("id.scores");
    ok(&["fit", "--method", "mahalanobis", "--records", s(&g.join("train.det")), "--categories", s(&cats), "--out", s(&state)]);
    ok(&["score", "--state", s(&state), "--records", s(&g.join("id.det")), "--categories", s(&cats), "--workers", "2", "--out", s(&scores)]);
    let text = fs::read_to_string(&scores).unwrap();
    assert!(text.starts_with("#schema:scores:"));
    assert_eq!(text.lines().count(), 1 + 38);

    let tau: serde_json::Value = serde_json::from_str(&ok(&["calibrate-tau", "--records", s(&scores)])).unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(g.join("golden_report.json")).unwrap()).unwrap();
    let golden_tau = report["rows"].as_array().unwrap().iter().find(|r| r["method"] == "mahalanobis").unwrap()["tau"].clone();
    assert_eq!(tau["tau"], golden_tau);
    assert!(tau["achieved_tpr"].as_f64().unwrap() >= 0.95);
}

#[test]
fn stratify_and_filter_overlap() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |name: &str| tmp.path().join(name);
    fs::write(p("cats.tsv"), "#schema:categories:1\n1\tperson\tid\n5\tcat\toverlap\n20\tbear\tood_near\n30\tkite\tood_far\n").unwrap();
    let bbox = "0,0,10,10";
    fs::write(
        p("gt"),
        format!("#schema:ground_truth:1\nb\t{bbox}\t20\t1\tcoco\na\t{bbox}\t5\t0\tcoco\nc\t{bbox}\t30\t1\tcoco\nb\t{bbox}\t30\t1\tcoco\n"),
    )
    .unwrap();
    fs::write(p("images"), "#schema:images:1\nd\nc\nb\na\n").unwrap();
    fs::write(p("overlap"), "#schema:category_ids:1\n5\n").unwrap();
    fs::write(p("near"), "#schema:category_ids:1\n20\n").unwrap();

    let args = |mode: &str, out: &Path| {
        ok(&[
            "stratify", "--gt", s(&p("gt")), "--categories", s(&p("cats.tsv")), "--images", s(&p("images")),
            "--overlap", s(&p("overlap")), "--near", s(&p("near")), "--mode", mode, "--out", s(out),
        ])
    };
    args("near-far", &p("m1"));
    assert_eq!(
        fs::read_to_string(p("m1")).unwrap(),
        "#schema:manifest:1\na\tremoved\t5\nb\tnear\t20\nc\tfar\t-\nd\tfar\t-\n"
    );
    args("all-farther", &p("m2"));
    assert!(fs::read_to_string(p("m2")).unwrap().contains("b\tfarther"));

    ok(&["filter-overlap", "--gt", s(&p("gt")), "--categories", s(&p("cats.tsv")), "--overlap", s(&p("overlap")), "--out", s(&p("m3"))]);
    assert_eq!(fs::read_to_string(p("m3")).unwrap(), "#schema:manifest:1\na\tremoved\t5\n");
}

#[test]
fn bad_input_fails_cleanly() {
    let out = oodeval(&["calibrate-tau", "--records", "/nonexistent/scores"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = oodeval(&["eval", "--config", s(&golden().join("config.toml")), "--workers", "0"]);
    assert!(!out.status.success());
}
