use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nowcast::dfm::{simulate_dfm, DfmSpec};

fn nowcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nowcast")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = nowcast(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) {
    ok(&["synth", "--out", p(dir), "--months", "12", "--docs-per-month", "20", "--seed", "3"]);
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn run_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let corpus = data.join("corpus.jsonl");
    let survey = data.join("survey.csv");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["run", "--corpus", p(&corpus), "--survey", p(&survey), "--out", p(&a)]);
    ok(&["run", "--corpus", p(&corpus), "--survey", p(&survey), "--out", p(&b)]);
    let files = listing(&a);
    assert!(files.iter().any(|(n, _)| n == "manifest.json"));
    assert!(files.iter().any(|(n, _)| n == "sentences.jsonl"));
    assert_eq!(files, listing(&b));

    let other = tmp.path().join("c");
    ok(&["run", "--corpus", p(&corpus), "--survey", p(&survey), "--out", p(&other), "--seed", "9"]);
    let manifest = |d: &Path| fs::read_to_string(d.join("manifest.json")).unwrap();
    assert_ne!(manifest(&a), manifest(&other));
}

#[test]
fn staged_commands_reproduce_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let corpus = data.join("corpus.jsonl");
    let survey = data.join("survey.csv");
    let run = tmp.path().join("run");
    ok(&["run", "--corpus", p(&corpus), "--survey", p(&survey), "--out", p(&run)]);

    let models = tmp.path().join("models");
    ok(&["train-outlier", "--survey", p(&survey), "--models", p(&models)]);
    ok(&["train-sentiment", "--survey", p(&survey), "--models", p(&models)]);
    for f in ["tfidf.json", "ocsvm.json", "ridge.json"] {
        assert_eq!(fs::read(models.join(f)).unwrap(), fs::read(run.join(f)).unwrap(), "{f}");
    }
    let sentences = tmp.path().join("sentences.jsonl");
    ok(&["score", "--corpus", p(&corpus), "--models", p(&models), "--out", p(&sentences)]);
    assert_eq!(fs::read(&sentences).unwrap(), fs::read(run.join("sentences.jsonl")).unwrap());

    let index = tmp.path().join("index.csv");
    ok(&["index", "--sentences", p(&sentences), "--out", p(&index)]);
    assert_eq!(fs::read(&index).unwrap(), fs::read(run.join("index_filtered.csv")).unwrap());
    let weekly = ok(&["index", "--sentences", p(&sentences), "--bucket", "week"]);
    assert!(weekly.lines().count() > 40);

    let contrib = ok(&["contrib", "--sentences", p(&sentences), "--term", "p0"]);
    assert!(contrib.lines().count() >= 12);

    let eval = ok(&["eval", "--index", p(&index), "--reference", p(&data.join("truth.csv"))]);
    let r = serde_json::from_str::<serde_json::Value>(&eval).unwrap()["pearson"].as_f64().unwrap();
    assert!(r > 0.8, "r = {r}");
    let eval = ok(&["eval", "--index", p(&index), "--survey", p(&survey)]);
    assert!(eval.contains("pearson"));
}

#[test]
fn dfm_command_writes_spec_and_factor() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = DfmSpec {
        beta0: vec![0.0, 1.0, -1.0],
        gamma: vec![1.0, 0.7, 0.9],
        phi: vec![0.7],
        d: vec![vec![0.2], vec![0.0], vec![-0.3]],
        var_eta: 1.0,
        var_eps: vec![0.4, 0.5, 0.3],
    };
    let sim = simulate_dfm(&spec, 120, 4).unwrap();
    let mut csv = String::from("month,a,b,c\n");
    for t in 0..120 {
        let cells: Vec<String> = (0..3)
            .map(|i| if i == 1 && t % 5 == 0 { String::new() } else { sim.y[i][t].to_string() })
            .collect();
        csv.push_str(&format!("{}-{:02},{}\n", 2010 + t / 12, t % 12 + 1, cells.join(",")));
    }
    let panel = tmp.path().join("panel.csv");
    fs::write(&panel, csv).unwrap();
    let out = tmp.path().join("dfm");
    ok(&["dfm", "--panel", p(&panel), "--p", "1", "--q", "1", "--out", p(&out)]);
    let factor = fs::read_to_string(out.join("factor.csv")).unwrap();
    assert_eq!(factor.lines().count(), 121);
    assert!(factor.lines().nth(1).unwrap().starts_with("2010-01,"));
    let fitted: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("dfm_spec.json")).unwrap()).unwrap();
    assert_eq!(fitted["series"], serde_json::json!(["a", "b", "c"]));
    assert_eq!(fitted["spec"]["gamma"].as_array().unwrap().len(), 3);
}

#[test]
fn errors_name_the_stage_and_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.csv");
    let out = nowcast(&["run", "--corpus", p(&missing), "--survey", p(&missing), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error: run:"), "{stderr}");
    assert!(stderr.contains("nope.csv"), "{stderr}");

    let data = tmp.path().join("data");
    synth(&data);
    let sentences = tmp.path().join("s.jsonl");
    let run = tmp.path().join("run");
    ok(&[
        "run",
        "--corpus",
        p(&data.join("corpus.jsonl")),
        "--survey",
        p(&data.join("survey.csv")),
        "--out",
        p(&run),
    ]);
    fs::copy(run.join("sentences.jsonl"), &sentences).unwrap();
    let out = nowcast(&["contrib", "--sentences", p(&sentences), "--term", "p0", "--method", "rollout"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: contrib:"));

    let out = nowcast(&["synth", "--out", p(tmp.path()), "--months", "1"]);
    assert_eq!(out.status.code(), Some(1));
}
