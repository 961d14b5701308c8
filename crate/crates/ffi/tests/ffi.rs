use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use driftharness::corpus::{write_corpus, NormalizedKey};
use driftharness::synth::{self, SynthConfig};
use driftharness_ffi::*;

fn last_error() -> String {
    let p = dh_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

#[test]
fn metric_functions_match_the_core() {
    let labels = [1u8, 0, 1, 1, 0, 0];
    let preds = [1u8, 0, 0, 1, 1, 0];
    let mut out = f64::NAN;
    assert_eq!(
        unsafe { dh_macro_f1(labels.as_ptr(), preds.as_ptr(), labels.len(), &mut out) },
        DhStatus::Ok
    );
    assert_eq!(out, driftharness::metrics::macro_f1(&labels, &preds).unwrap());
    assert!(dh_last_error_message().is_null());

    let diffs = [0.2, -0.1, 0.4, 0.3, 0.05];
    let (mut w, mut p) = (0.0, 0.0);
    assert_eq!(
        unsafe { dh_wilcoxon(diffs.as_ptr(), diffs.len(), &mut w, &mut p) },
        DhStatus::Ok
    );
    let core = driftharness::stats::wilcoxon_signed_rank(&diffs).unwrap();
    assert_eq!((w, p), (core.statistic, core.p_value));

    let (a, b) = ([0.9, 0.8, 0.7], [0.1, 0.8]);
    assert_eq!(
        unsafe { dh_cliffs_delta(a.as_ptr(), a.len(), b.as_ptr(), b.len(), &mut out) },
        DhStatus::Ok
    );
    assert_eq!(out, driftharness::stats::cliffs_delta(&a, &b).unwrap());

    let ibr = [0.791, 0.747, 0.734, 0.729];
    assert_eq!(unsafe { dh_retention_auc(ibr.as_ptr(), &mut out) }, DhStatus::Ok);
    assert!((out - 0.750).abs() <= 0.001);
    assert_eq!(unsafe { dh_decay_rate(ibr.as_ptr(), &mut out) }, DhStatus::Ok);
    assert!((out - 0.078).abs() <= 0.001);
}

#[test]
fn errors_are_reported_through_status_and_message() {
    let mut out = 0.0;
    let labels = [1u8, 2];
    let status = unsafe { dh_macro_f1(labels.as_ptr(), labels.as_ptr(), 2, &mut out) };
    assert_eq!(status, DhStatus::Metric);
    assert!(!last_error().is_empty());

    assert_eq!(
        unsafe { dh_macro_f1(ptr::null(), labels.as_ptr(), 2, &mut out) },
        DhStatus::NullPointer
    );
    assert!(last_error().contains("labels"));

    let bad = [1.5, 0.7, 0.6, 0.5];
    assert_eq!(unsafe { dh_retention_auc(bad.as_ptr(), &mut out) }, DhStatus::Metric);

    let invalid = [0xffu8, 0xfe, 0];
    let mut key = ptr::null_mut();
    assert_eq!(
        unsafe { dh_normalized_key(invalid.as_ptr().cast(), &mut key) },
        DhStatus::InvalidUtf8
    );

    let mut model = ptr::null_mut();
    let cfg = cstr("{\"rank\": \"wide\"}");
    assert_eq!(unsafe { dh_model_new(cfg.as_ptr(), &mut model) }, DhStatus::Parse);
    assert!(model.is_null());
}

#[test]
fn normalized_key_matches_core_digest() {
    let code = "int f(void) { /* x */ return 1; }";
    let c = cstr(code);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { dh_normalized_key(c.as_ptr(), &mut out) }, DhStatus::Ok);
    let hex = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_owned();
    unsafe { dh_string_free(out) };
    assert_eq!(hex, NormalizedKey::of(code).to_string());
}

#[test]
fn model_train_predict_save_load() {
    let dir = tempfile::tempdir().unwrap();
    let sc = SynthConfig {
        windows: 2,
        per_window: 40,
        ..Default::default()
    };
    let corpus = dir.path().join("corpus.jsonl");
    write_corpus(&corpus, &synth::generate(&sc).unwrap()).unwrap();

    let mut model = ptr::null_mut();
    assert_eq!(unsafe { dh_model_new(ptr::null(), &mut model) }, DhStatus::Ok);
    let corpus_c = cstr(corpus.to_str().unwrap());
    let train = cstr(&serde_json::to_string(&synth::train_preset(1)).unwrap());
    let mut loss = f64::NAN;
    assert_eq!(
        unsafe { dh_model_train(model, corpus_c.as_ptr(), train.as_ptr(), &mut loss) },
        DhStatus::Ok
    );
    assert!(loss.is_finite());

    let code = cstr("void g(char *buf, int n) { unsafe_op_3(buf, n); }");
    let mut p = 0.0;
    assert_eq!(unsafe { dh_model_predict(model, code.as_ptr(), &mut p) }, DhStatus::Ok);
    assert!((0.0..=1.0).contains(&p));

    let ckpt = cstr(dir.path().join("model.ckpt").to_str().unwrap());
    assert_eq!(unsafe { dh_model_save(model, ckpt.as_ptr()) }, DhStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { dh_model_load(ckpt.as_ptr(), &mut loaded) }, DhStatus::Ok);
    let mut q = 0.0;
    assert_eq!(unsafe { dh_model_predict(loaded, code.as_ptr(), &mut q) }, DhStatus::Ok);
    assert_eq!(p, q);
    unsafe {
        dh_model_free(model);
        dh_model_free(loaded);
    }

    let missing = cstr(dir.path().join("nope.ckpt").to_str().unwrap());
    assert_eq!(unsafe { dh_model_load(missing.as_ptr(), &mut loaded) }, DhStatus::Io);
}

#[test]
fn prepare_and_ledger_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let sc = SynthConfig {
        windows: 8,
        per_window: 30,
        ..Default::default()
    };
    let corpus = dir.path().join("corpus.jsonl");
    write_corpus(&corpus, &synth::generate(&sc).unwrap()).unwrap();
    let (corpus_c, out_c) = (
        cstr(corpus.to_str().unwrap()),
        cstr(dir.path().join("prep").to_str().unwrap()),
    );
    let mut count = 0usize;
    assert_eq!(
        unsafe { dh_prepare_corpus(corpus_c.as_ptr(), out_c.as_ptr(), 2, &mut count) },
        DhStatus::Ok
    );
    assert_eq!(count, 8);
    assert_eq!(
        unsafe { dh_prepare_corpus(corpus_c.as_ptr(), out_c.as_ptr(), 5, ptr::null_mut()) },
        DhStatus::Config
    );

    let prepared = driftharness::cli::PreparedCorpus::load(&dir.path().join("prep")).unwrap();
    let cfg = driftharness::config::RunConfig {
        out: dir.path().join("run"),
        seeds: vec![1],
        train: synth::train_preset(1),
        ..Default::default()
    };
    let outcome = driftharness::cli::run_all(&cfg, &prepared.windows).unwrap().remove(0);
    outcome.result.unwrap();
    let ledger_dir = cstr(outcome.dir.to_str().unwrap());

    let mut ledger = ptr::null_mut();
    assert_eq!(
        unsafe { dh_ledger_load(ledger_dir.as_ptr(), &mut ledger) },
        DhStatus::Ok
    );
    let mut n = 0usize;
    assert_eq!(unsafe { dh_ledger_forward_count(ledger, &mut n) }, DhStatus::Ok);
    assert_eq!(n, 7);
    let core = driftharness::protocol::RunLedger::read(&outcome.dir).unwrap();
    let series = driftharness::metrics::MethodSeries::from_ledger(&core);
    let (mut f1, mut ibr1) = (0.0, 0.0);
    assert_eq!(unsafe { dh_ledger_mean_forward_f1(ledger, &mut f1) }, DhStatus::Ok);
    let values = series.forward_values();
    assert!((f1 - values.iter().sum::<f64>() / values.len() as f64).abs() < 1e-12);
    assert_eq!(unsafe { dh_ledger_ibr(ledger, 1, &mut ibr1) }, DhStatus::Ok);
    assert_eq!(ibr1, driftharness::metrics::ibr(&series, 1).unwrap());
    assert_eq!(unsafe { dh_ledger_ibr(ledger, 9, &mut ibr1) }, DhStatus::Metric);
    unsafe { dh_ledger_free(ledger) };
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/driftharness.h");
    let text = std::fs::read_to_string(&header).unwrap();
    let source = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    for line in source.lines().filter(|l| l.contains("extern \"C\" fn ")) {
        let name = line.split("fn ").nth(1).unwrap().split('(').next().unwrap();
        assert!(text.contains(&format!("{name}(")), "{name} missing from header");
    }
    match Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
    {
        Ok(s) => assert!(s.success(), "header does not compile as C"),
        Err(e) => eprintln!("skipping C syntax check: {e}"),
    }
}
