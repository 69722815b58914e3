use std::collections::BTreeSet;
use std::fs;

use ctxlm::corpus::{content, TokenId};
use ctxlm::pipeline::{self, Pipeline, PipelineConfig, PipelineManifest};
use ctxlm::store::EncodingStore;
use ctxlm::training::qa_exact_match;
use ctxlm::{Error, Model};

fn tiny() -> PipelineConfig {
    let mut cfg = PipelineConfig::default().with_seed(3);
    cfg.data.synth.n_entities = 24;
    cfg.data.synth.n_filler_articles = 6;
    cfg.data.synth.heldout_fraction = 0.25;
    cfg.model.d_model = 16;
    cfg.model.d_ff = 32;
    cfg.lm.steps = 30;
    cfg.lm.eval_every = 0;
    cfg.qa.steps = 20;
    cfg.qa.eval_every = 10;
    cfg.retriever.steps = 10;
    cfg.qa_val = 8;
    cfg.analysis_limit = 30;
    cfg.html_examples = 3;
    cfg
}

#[test]
fn full_run_writes_a_verifiable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(dir.path(), tiny()).unwrap();
    let manifest = p.run_all().unwrap();
    let names: Vec<&str> = manifest.stages.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, &pipeline::STAGES[..pipeline::STAGES.len() - 1]);
    assert!(manifest.stages.iter().all(|s| s.duration_ms.is_none()));
    let loaded = PipelineManifest::load(&p.path(pipeline::MANIFEST)).unwrap();
    assert_eq!(loaded, manifest);
    loaded.verify(dir.path()).unwrap();

    let store = EncodingStore::open(&p.path(pipeline::STORE_DIR)).unwrap();
    assert_eq!(store.len(), p.windows().unwrap().len());
    let html = fs::read_to_string(p.path(pipeline::DELTA_HTML)).unwrap();
    assert!(html.contains("<html") && html.contains("class=\"tok"));

    fs::write(p.path(pipeline::QA_REPORT), b"{}").unwrap();
    assert!(loaded.verify(dir.path()).is_err());
}

#[test]
fn stages_refuse_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(dir.path(), tiny()).unwrap();
    assert!(matches!(p.run_stage("lm"), Err(Error::Io(_))));
    assert!(p.run_stage("no-such-stage").is_err());
}

#[test]
fn no_heldout_value_reaches_a_training_target() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(dir.path(), tiny()).unwrap();
    p.run_stage("synth").unwrap();
    p.run_stage("data").unwrap();
    let vocab = p.vocab().unwrap();
    let heldout: BTreeSet<TokenId> = p.corpus().unwrap().heldout_values.iter().map(|v| vocab.id(v).unwrap()).collect();
    assert!(!heldout.is_empty());
    let clean = |target: &[TokenId]| content(target).all(|t| !heldout.contains(&t));
    for case in p.lm_cases(false).unwrap() {
        assert!(clean(&case.triplet.target));
    }
    let train_cases = p.qa_cases(false).unwrap();
    for case in &train_cases {
        assert!(clean(&case.item.triplet.target));
    }
    let (train, val) = p.qa_training_sets(&train_cases, &vocab).unwrap();
    assert!(train.len() > train_cases.len());
    for t in &train {
        assert!(clean(&t.target));
    }
    for item in &val {
        assert!(clean(&item.triplet.target));
    }
    // held-out values do reach the retrievable contexts
    let in_windows = p.windows().unwrap().iter().any(|w| w.tokens.iter().any(|t| heldout.contains(t)));
    assert!(in_windows);
}

#[test]
fn qa_report_matches_the_saved_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(dir.path(), tiny()).unwrap();
    for stage in ["synth", "data", "lm", "qa"] {
        p.run_stage(stage).unwrap();
    }
    let report: pipeline::QaReport = serde_json::from_slice(&fs::read(p.path(pipeline::QA_REPORT)).unwrap()).unwrap();
    let vocab = p.vocab().unwrap();
    let eval: Vec<_> = p.qa_cases(true).unwrap().into_iter().map(|c| c.item).collect();
    let with = Model::<f32>::load(&p.path(pipeline::QA_WITH)).unwrap();
    assert_eq!(qa_exact_match(&with, &eval, &vocab, true).unwrap(), report.em_with);
    assert!(report.history_with.best_step > 0);
}

#[test]
fn config_files_round_trip_through_apply() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.conf");
    fs::write(&path, "# comment\nmodel.d_model = 32\nlm.steps = 7\npipeline.qa_wide_pool = false\nembedder.dim = 8\n").unwrap();
    let cfg = PipelineConfig::from_file(&path).unwrap();
    assert_eq!((cfg.model.d_model, cfg.lm.steps, cfg.qa_wide_pool, cfg.embedder.dim), (32, 7, false, 8));
    fs::write(&path, "lm.nonsense = 1\n").unwrap();
    assert!(PipelineConfig::from_file(&path).is_err());
}
