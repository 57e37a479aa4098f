use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use minreveal::cli::ReportRow;

const BIN: &str = env!("CARGO_BIN_EXE_minreveal");

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str], stdin: &str) -> Output {
    run_env(args, stdin, &[])
}

fn run_env(args: &[&str], stdin: &str, env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    for (k, v) in env {
        cmd.env(k, v);
    }
    let mut child = cmd.spawn().unwrap();
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

struct Trained {
    dir: tempfile::TempDir,
    train_stdout: String,
}

impl Trained {
    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).display().to_string()
    }
}

/// synth -> train with test split and prior written out.
fn trained(kind: &str) -> Trained {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).display().to_string();
    ok(&run(&["synth", "--seed", "3", "--out", &p("data.csv")], ""));
    let o = run(
        &[
            "train", "--data", &p("data.csv"), "--kind", kind, "--seed", "5", "--epochs", "40",
            "--out", &p("model.json"), "--prior-out", &p("prior.json"), "--test-out", &p("test.csv"),
        ],
        "",
    );
    ok(&o);
    Trained { train_stdout: stdout(&o), dir }
}

fn audit_args<'a>(out: &'a str, delta: &'a str, seed: &'a str, paths: &'a [String; 3]) -> Vec<&'a str> {
    vec![
        "audit", "--data", &paths[0], "--model", &paths[1], "--prior", &paths[2],
        "--sensitive", "5", "--seed", seed, "--delta", delta, "--samples", "200", "--out", out,
    ]
}

fn line_value(text: &str, prefix: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(prefix))
        .unwrap_or_else(|| panic!("no `{prefix}` line in:\n{text}"))
        .trim()
        .to_string()
}

#[test]
fn audit_linear_delta0_matches_train_accuracy_and_is_deterministic() {
    let t = trained("linear");
    let paths = [t.path("test.csv"), t.path("model.json"), t.path("prior.json")];
    let (a, b, c) = (t.path("a.jsonl"), t.path("b.jsonl"), t.path("c.jsonl"));
    let o = run(&audit_args(&a, "0", "7", &paths), "");
    ok(&o);
    let out = stdout(&o);
    assert!(out.starts_with("# minreveal audit seed=7 samples=200 delta=0 grid_delta=0.2 jitter=0.000001"));
    assert_eq!(line_value(&out, "accuracy "), line_value(&t.train_stdout, "test accuracy "));
    assert_eq!(line_value(&out, "samples "), "600");

    ok(&run_env(&audit_args(&b, "0", "7", &paths), "", &[("MINREVEAL_THREADS", "1")]));
    ok(&run_env(&audit_args(&c, "0", "7", &paths), "", &[("MINREVEAL_THREADS", "3")]));
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert_eq!(bytes, std::fs::read(&c).unwrap());
    let first: serde_json::Value = serde_json::from_str(std::str::from_utf8(&bytes).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["sample_id"], 0);
    for key in ["delta", "revealed", "leakage", "repr_label", "true_label", "baseline_label", "method"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn audit_errors_exit_2_without_output() {
    let t = trained("linear");
    let out = t.path("x.jsonl");
    let missing = [t.path("test.csv"), t.path("nope.json"), t.path("prior.json")];
    let o = run(&audit_args(&out, "0", "1", &missing), "");
    assert_eq!(o.status.code(), Some(2));
    assert!(!Path::new(&out).exists());

    let paths = [t.path("test.csv"), t.path("model.json"), t.path("prior.json")];
    assert_eq!(run(&audit_args(&out, "0.5", "1", &paths), "").status.code(), Some(2));
    assert!(!Path::new(&out).exists());

    let fig = [t.path("test.csv"), fixture("toy_model.json").display().to_string(), fixture("toy_prior.json").display().to_string()];
    let o = run(&audit_args(&out, "0", "1", &fig), "");
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("schema error"));
}

fn reveal(public: &str, extra: &[&str], stdin: &str) -> Output {
    let model = fixture("toy_model.json").display().to_string();
    let prior = fixture("toy_prior.json").display().to_string();
    let mut args = vec!["reveal", "--model", &model, "--prior", &prior, "--public", public];
    args.extend_from_slice(extra);
    run(&args, stdin)
}

#[test]
fn reveal_user_a_stops_immediately() {
    let o = reveal("Job=1.0", &[], "");
    ok(&o);
    let out = stdout(&o);
    assert!(out.contains("prediction 1, 0 features revealed"), "{out}");
    assert!(out.contains("revealed: none"));
    assert!(!out.contains("[-1, 1]:"));
}

#[test]
fn reveal_user_b_needs_loc() {
    let o = reveal("Job=-0.9", &["--sensitive", "Loc,Inc"], "1.0\n");
    ok(&o);
    let out = stdout(&o);
    assert!(out.contains("Loc [-1, 1]: "), "{out}");
    assert!(out.contains("prediction 0, 1 features revealed"), "{out}");
    assert!(out.contains("revealed: Loc"));
    assert!(out.contains("step 0: most likely 0 with certainty"));
}

#[test]
fn reveal_reprompts_on_bad_input() {
    let o = reveal("Job=-0.9", &[], "1.5\nabc\n1.0\n");
    ok(&o);
    let out = stdout(&o);
    assert!(out.contains("value 1.5 outside [-1, 1]; enter a number in [-1, 1]"), "{out}");
    assert!(out.contains("cannot parse \"abc\""), "{out}");
    assert_eq!(out.matches("Loc [-1, 1]: ").count(), 3);
    assert!(out.contains("prediction 0, 1 features revealed"));
}

#[test]
fn reveal_eof_exits_3() {
    let o = reveal("Job=-0.9", &[], "");
    assert_eq!(o.status.code(), Some(3));
    let out = stdout(&o);
    assert!(out.contains("aborted after 0 features revealed"), "{out}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("end of input"));
}

#[test]
fn reveal_raw_units() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.json");
    let text = std::fs::read_to_string(fixture("toy_model.json"))
        .unwrap()
        .replace("[[-1.0, 1.0], [-1.0, 1.0], [-1.0, 1.0]]", "[[0.0, 100.0], [0.0, 10.0], [-5.0, 5.0]]");
    std::fs::write(&model, text).unwrap();
    let prior = fixture("toy_prior.json").display().to_string();
    let m = model.display().to_string();
    // Job=5 raw -> -0.9 in the box; Loc=10 raw -> 1.0
    let o = run(&["reveal", "--model", &m, "--prior", &prior, "--public", "Job=5", "--raw"], "12\n10\n");
    ok(&o);
    let out = stdout(&o);
    assert!(out.contains("Loc [0, 10]: "), "{out}");
    assert!(out.contains("value 12 outside [0, 10]"), "{out}");
    assert!(out.contains("revealed Loc = 10"), "{out}");
    assert!(out.contains("prediction 0, 1 features revealed"), "{out}");
}

#[test]
fn reveal_rejects_missing_public_value() {
    let o = reveal("Job=1.0", &["--sensitive", "Loc"], "");
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_merges_runs() {
    let t = trained("linear");
    let paths = [t.path("test.csv"), t.path("model.json"), t.path("prior.json")];
    let (a, b, c) = (t.path("a.jsonl"), t.path("b.jsonl"), t.path("c.jsonl"));
    ok(&run(&audit_args(&a, "0", "2", &paths), ""));
    ok(&run(&audit_args(&b, "0.05", "2", &paths), ""));
    ok(&run(&audit_args(&c, "0", "2", &paths), ""));
    let merged = t.path("merged.csv");
    ok(&run(&["report", &a, &b, &c, "--out", &merged], ""));
    let rows: Vec<ReportRow> = csv::Reader::from_path(&merged).unwrap().deserialize().map(Result::unwrap).collect();
    // one delta group per file, four metrics per group
    assert_eq!(rows.len(), 3 * 4);
    let same_key: Vec<&ReportRow> = rows.iter().filter(|r| r.delta == 0.0 && r.metric == "accuracy").collect();
    assert_eq!(same_key.len(), 2);
    assert_ne!(same_key[0].run_id, same_key[1].run_id);
    assert_eq!(same_key[0].value, same_key[1].value);
    assert!(rows.iter().all(|r| r.model.ends_with("model.json")));

    let single = run(&["report", &a], "");
    ok(&single);
    assert_eq!(stdout(&single).lines().count(), 1 + 4);
}

#[test]
fn opt_and_fit_prior() {
    let t = trained("linear");
    let opt_out = t.path("opt.jsonl");
    let o = run(
        &["opt", "--data", &t.path("test.csv"), "--model", &t.path("model.json"), "--sensitive", "x1,x4,x6", "--out", &opt_out],
        "",
    );
    ok(&o);
    assert!(stdout(&o).contains("mean minimum core set size"));
    assert_eq!(std::fs::read_to_string(&opt_out).unwrap().lines().count(), 600);

    let prior = t.path("p2.json");
    ok(&run(&["fit-prior", "--data", &t.path("test.csv"), "--model", &t.path("model.json"), "--out", &prior], ""));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(prior).unwrap()).unwrap();
    assert_eq!(v["mean"].as_array().unwrap().len(), 8);
}

#[test]
fn mlp_audit_runs() {
    let t = trained("mlp");
    let paths = [t.path("test.csv"), t.path("model.json"), t.path("prior.json")];
    let out = t.path("m.jsonl");
    let mut args = audit_args(&out, "0.05", "4", &paths);
    args[8] = "3";
    ok(&run(&args, ""));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 600);
}

#[test]
fn bench_small_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("res.csv").display().to_string();
    let o = run(
        &["bench", "--seed", "1", "--sizes", "2,3", "--deltas", "0,0.1", "--repetitions", "1", "--samples", "50", "--max-test", "40", "--out", &out],
        "",
    );
    ok(&o);
    assert!(stdout(&o).starts_with("# minreveal bench {"));
    // 2 sizes x (baseline, opt, 2 deltas) x 4 metrics + header
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 2 * 4 * 4 + 1);
    assert!(dir.path().join("res.hist.csv").exists());

    let o = run(&["bench", "--out", &out], "");
    assert_eq!(o.status.code(), Some(2));
}
