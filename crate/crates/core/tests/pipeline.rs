use std::path::{Path, PathBuf};

use novelty_core::analysis::NoveltyReport;
use novelty_core::llm::MockLlm;
use novelty_core::pipeline::{
    run_pipeline, PaperInput, PhaseStatus, PipelineConfig, RunManifest, CALL_LOG_FILE, MANIFEST_FILE, PHASE1_FILE,
    PHASE2_FILE, PHASE3_FILE,
};
use novelty_core::render::{render_markdown, RenderConfig};
use novelty_core::retrieval::{CannedSearch, MockSearch, RecordingSleeper};
use novelty_core::Phase;

fn demo(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/demo").join(name)
}

fn demo_llm() -> MockLlm {
    MockLlm::from_json(&std::fs::read_to_string(demo("llm.json")).unwrap()).unwrap()
}

fn demo_search() -> MockSearch {
    MockSearch::from_json(&std::fs::read_to_string(demo("search.json")).unwrap()).unwrap()
}

fn config(out: &Path) -> PipelineConfig {
    PipelineConfig {
        output_dir: out.to_path_buf(),
        generated_at: Some("2026-01-01T00:00:00Z".into()),
        ..PipelineConfig::default()
    }
}

fn statuses(m: &RunManifest) -> Vec<PhaseStatus> {
    m.phases.iter().map(|p| p.status).collect()
}

fn failing_search() -> MockSearch {
    MockSearch::default().rule(
        &[],
        vec![CannedSearch::Error {
            error: "service unavailable".into(),
        }],
    )
}

#[test]
fn full_run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let paper = PaperInput::load(&demo("paper.json")).unwrap();
    let m = run_pipeline(&paper, &config(tmp.path()), &demo_llm(), &demo_search(), &RecordingSleeper::default()).unwrap();
    assert!(m.succeeded() && m.is_ordered());
    for f in [PHASE1_FILE, PHASE2_FILE, PHASE3_FILE, MANIFEST_FILE, CALL_LOG_FILE] {
        assert!(tmp.path().join(f).exists(), "{f} missing");
    }
    let md = m.markdown_path().unwrap();
    assert_eq!(
        md.file_name().unwrap().to_str().unwrap(),
        "novelty_report_doi_10.5555_demo.0001_v0.1.0.md"
    );

    let report = NoveltyReport::from_json(&std::fs::read_to_string(tmp.path().join(PHASE3_FILE)).unwrap()).unwrap();
    let rendered = render_markdown(&report, &RenderConfig::default()).unwrap();
    assert_eq!(rendered, std::fs::read_to_string(md).unwrap());

    let log = std::fs::read_to_string(tmp.path().join(CALL_LOG_FILE)).unwrap();
    let entries: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(entries.iter().any(|e| e["kind"] == "llm" && e["task"] == "taxonomy"));
    assert_eq!(entries.iter().filter(|e| e["kind"] == "search").count(), 12);
}

#[test]
fn resume_reuses_saved_phases_without_external_calls() {
    let tmp = tempfile::tempdir().unwrap();
    let paper = PaperInput::load(&demo("paper.json")).unwrap();
    let cfg = config(tmp.path());
    let first = run_pipeline(&paper, &cfg, &demo_llm(), &demo_search(), &RecordingSleeper::default()).unwrap();
    let md = std::fs::read_to_string(first.markdown_path().unwrap()).unwrap();

    let silent = MockLlm::default();
    let resumed = PipelineConfig { resume: true, ..cfg };
    let m = run_pipeline(&paper, &resumed, &silent, &failing_search(), &RecordingSleeper::default()).unwrap();
    assert_eq!(
        statuses(&m),
        [PhaseStatus::Resumed, PhaseStatus::Resumed, PhaseStatus::Resumed, PhaseStatus::Completed]
    );
    assert!(silent.calls().is_empty());
    assert_eq!(std::fs::read_to_string(m.markdown_path().unwrap()).unwrap(), md);
}

#[test]
fn resume_recomputes_from_the_first_missing_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let paper = PaperInput::load(&demo("paper.json")).unwrap();
    let cfg = config(tmp.path());
    run_pipeline(&paper, &cfg, &demo_llm(), &demo_search(), &RecordingSleeper::default()).unwrap();
    std::fs::remove_file(tmp.path().join(PHASE2_FILE)).unwrap();

    let llm = demo_llm();
    let search = demo_search();
    let resumed = PipelineConfig { resume: true, ..cfg };
    let m = run_pipeline(&paper, &resumed, &llm, &search, &RecordingSleeper::default()).unwrap();
    assert_eq!(
        statuses(&m),
        [PhaseStatus::Resumed, PhaseStatus::Completed, PhaseStatus::Completed, PhaseStatus::Completed]
    );
    assert_eq!(search.calls().len(), 12);
    assert_eq!(llm.calls_for(novelty_core::llm::Task::CoreTask), 0);
    assert!(llm.calls_for(novelty_core::llm::Task::Taxonomy) > 0);
}

#[test]
fn retrieval_failure_is_recorded_and_stops_later_phases() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join(PHASE3_FILE), "stale").unwrap();
    let paper = PaperInput::load(&demo("paper.json")).unwrap();
    let cfg = PipelineConfig {
        retry: novelty_core::retrieval::RetryPolicy {
            max_query_attempts: 2,
            ..Default::default()
        },
        ..config(tmp.path())
    };
    let sleeper = RecordingSleeper::default();
    let m = run_pipeline(&paper, &cfg, &demo_llm(), &failing_search(), &sleeper).unwrap();
    assert!(!m.succeeded());
    assert_eq!(
        statuses(&m),
        [PhaseStatus::Completed, PhaseStatus::Failed, PhaseStatus::NotStarted, PhaseStatus::NotStarted]
    );
    assert_eq!(m.failed_phase().unwrap().phase, Phase::Retrieval);
    assert!(!m.failure_log.is_empty());
    assert!(tmp.path().join(PHASE1_FILE).exists());
    assert!(!tmp.path().join(PHASE3_FILE).exists(), "stale artifact survived a fresh run");
    let saved: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(saved, m);
    assert!(!sleeper.slept().is_empty());
}

#[test]
fn plain_text_paper_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let paper = PaperInput::load(&demo("paper.md")).unwrap();
    assert_eq!(
        paper.title,
        "Tidal Registers: Distinct Counting over Sliding Windows with Decaying Sketch Cells"
    );
    assert!(paper.abstract_text.starts_with("We study estimating the number of distinct items"));
    let m = run_pipeline(&paper, &config(tmp.path()), &demo_llm(), &demo_search(), &RecordingSleeper::default()).unwrap();
    assert!(m.succeeded(), "{:?}", m.failure_log);
    // The fixture taxonomy names the DOI-based id; without a DOI the target
    // gets a title-hash id, so the taxonomy cannot validate.
    let report = NoveltyReport::from_json(&std::fs::read_to_string(tmp.path().join(PHASE3_FILE)).unwrap()).unwrap();
    assert!(report.metadata.flags.iter().any(|f| f == "taxonomy_needs_review"));
}

#[test]
fn empty_paper_is_rejected_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let paper = PaperInput {
        title: "T".into(),
        abstract_text: String::new(),
        text: "   ".into(),
        url: None,
        identifiers: Default::default(),
        publication_date: None,
    };
    let llm = MockLlm::default();
    assert!(run_pipeline(&paper, &config(tmp.path()), &llm, &failing_search(), &RecordingSleeper::default()).is_err());
    assert!(llm.calls().is_empty());
}
