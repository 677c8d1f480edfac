use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use nowcast::pipeline::{run_pipeline, RunConfig};
use nowcast::synth::{generate, SynthConfig};
use nowcast_ffi::*;

fn last_error() -> String {
    let p = nowcast_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn models(dir: &Path) -> nowcast::pipeline::RunOutput {
    let data = generate(&SynthConfig {
        months: 12,
        docs_per_month: 20,
        ..Default::default()
    })
    .unwrap();
    let out = run_pipeline(&data.documents, &data.survey, &RunConfig::default()).unwrap();
    out.write(dir, "ffi").unwrap();
    out
}

#[test]
fn model_handle_matches_core() {
    let dir = tempfile::tempdir().unwrap();
    let run = models(dir.path());
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { nowcast_model_load(path.as_ptr(), &mut model) }, NowcastStatus::Ok);
    assert!(!model.is_null());

    for text in ["q0 q1 p0 p1 p2 n0.", "z0 z1 z2 z3 z4"] {
        let c = CString::new(text).unwrap();
        let x = run.tfidf.transform(&nowcast::corpus::tokenize(text));
        let (mut score, mut decision) = (0.0, 0.0);
        assert_eq!(unsafe { nowcast_model_score(model, c.as_ptr(), &mut score) }, NowcastStatus::Ok);
        assert_eq!(unsafe { nowcast_model_decision(model, c.as_ptr(), &mut decision) }, NowcastStatus::Ok);
        assert_eq!(score, run.ridge.predict(&x).unwrap());
        assert_eq!(decision, run.svm.decision(&x));
    }
    unsafe { nowcast_model_free(model) };
    unsafe { nowcast_model_free(ptr::null_mut()) };
}

#[test]
fn failures_report_status_and_message() {
    let missing = CString::new("/nonexistent/models").unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { nowcast_model_load(missing.as_ptr(), &mut model) }, NowcastStatus::Io);
    assert!(model.is_null());
    assert!(last_error().contains("tfidf.json"));

    assert_eq!(unsafe { nowcast_model_load(ptr::null(), &mut model) }, NowcastStatus::NullPointer);
    let mut out = 0.0;
    assert_eq!(
        unsafe { nowcast_model_score(ptr::null(), missing.as_ptr(), &mut out) },
        NowcastStatus::NullPointer
    );

    let bad = [0xffu8, 0xfe, 0];
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { nowcast_tokenize(bad.as_ptr().cast(), &mut s) }, NowcastStatus::InvalidUtf8);

    let zeros = [0u64; 5];
    assert_eq!(unsafe { nowcast_diffusion_index(zeros.as_ptr(), &mut out) }, NowcastStatus::InvalidArgument);
    assert!(!last_error().is_empty());

    // A successful call clears the message.
    let counts = [1u64; 5];
    assert_eq!(unsafe { nowcast_diffusion_index(counts.as_ptr(), &mut out) }, NowcastStatus::Ok);
    assert!(nowcast_last_error().is_null());
}

#[test]
fn tokenize_returns_json() {
    let text = CString::new("Tax 増税 up").unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { nowcast_tokenize(text.as_ptr(), &mut s) }, NowcastStatus::Ok);
    let json = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_owned();
    unsafe { nowcast_string_free(s) };
    let tokens: Vec<String> = serde_json::from_str(&json).unwrap();
    assert_eq!(tokens, nowcast::corpus::tokenize("Tax 増税 up"));
}

#[test]
fn numeric_entry_points() {
    let mut out = 0.0;
    let a = [1.0, 2.0, 3.0, 4.0];
    let b = [2.0, 4.0, 6.0, 8.5];
    assert_eq!(unsafe { nowcast_pearson(a.as_ptr(), b.as_ptr(), 4, &mut out) }, NowcastStatus::Ok);
    assert_eq!(out, nowcast::index::pearson(&a, &b).unwrap());

    for (counts, want) in [([3u64, 0, 0, 0, 0], 100.0), ([0, 0, 0, 0, 3], 0.0), ([0, 0, 3, 0, 0], 50.0)] {
        assert_eq!(unsafe { nowcast_diffusion_index(counts.as_ptr(), &mut out) }, NowcastStatus::Ok);
        assert_eq!(out, want);
    }

    // Two layers, one head, three tokens.
    let layer = [0.5, 0.25, 0.25, 0.1, 0.8, 0.1, 0.3, 0.3, 0.4];
    let attn: Vec<f64> = layer.iter().chain(layer.iter()).copied().collect();
    let mut row = [0.0; 3];
    assert_eq!(unsafe { nowcast_attention_rollout(attn.as_ptr(), 2, 1, 3, row.as_mut_ptr()) }, NowcastStatus::Ok);
    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let spec = r#"{"beta0":[0.0,1.0],"gamma":[1.0,0.5],"phi":[0.5],"d":[[],[]],"var_eta":1.0,"var_eps":[0.5,0.5]}"#;
    let parsed: nowcast::dfm::DfmSpec = serde_json::from_str(spec).unwrap();
    let y = [0.1, -0.3, f64::NAN, 0.4, 1.2, 0.8, 1.1, 0.9];
    let c = CString::new(spec).unwrap();
    assert_eq!(unsafe { nowcast_dfm_loglik(c.as_ptr(), y.as_ptr(), 2, 4, &mut out) }, NowcastStatus::Ok);
    let panel: Vec<Vec<Option<f64>>> = y.chunks(4).map(|r| r.iter().map(|v| (!v.is_nan()).then_some(*v)).collect()).collect();
    let want = nowcast::dfm::log_likelihood(&nowcast::dfm::build_state_space(&parsed).unwrap(), &panel).unwrap();
    assert_eq!(out, want);
}

#[test]
fn header_compiles_as_c() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = std::fs::read_to_string(include.join("nowcast.h")).unwrap();
    for name in ["nowcast_model_load", "nowcast_last_error", "nowcast_dfm_loglik", "NOWCAST_STATUS_PANIC"] {
        assert!(header.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"nowcast.h\"\nint main(void) { NowcastModel *m = 0; return nowcast_model_load(\"x\", &m) == NOWCAST_STATUS_OK; }\n",
    )
    .unwrap();
    let Ok(status) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .status()
    else {
        eprintln!("no C compiler; skipped syntax check");
        return;
    };
    assert!(status.success());
}
