//! End-to-end driver: runs the four phases in order, persists one artifact per
//! phase, logs every external call, and resumes from persisted artifacts.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::{info, warn};

use crate::analysis::{run_phase3, NoveltyReport, Phase3Config, Phase3Input};
use crate::error::{Error, Phase, Result};
use crate::extraction::{run_phase1, Phase1Output, TargetText, Temperatures};
use crate::llm::{LlmClient, LlmError, LlmRequest};
use crate::paper::{infer_publication_date, preprocess_document, Identifiers, PaperRecord, PublicationDate, Purpose};
use crate::render::{write_report, RenderConfig};
use crate::retrieval::{run_phase2, Phase2Output, RetryPolicy, SearchClient, SearchError, SearchHit, Sleeper, TopK};
use crate::verification::VerifyConfig;

pub const PHASE1_FILE: &str = "phase1.json";
pub const PHASE2_FILE: &str = "phase2.json";
pub const PHASE3_FILE: &str = "phase3_complete_report.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CALL_LOG_FILE: &str = "calls.jsonl";
const FRONT_MATTER_CHARS: usize = 3000;

/// The target paper as supplied by the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperInput {
    pub title: String,
    #[serde(rename = "abstract", default)]
    pub abstract_text: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default)]
    pub identifiers: Identifiers,
    /// ISO date; inferred when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub publication_date: Option<String>,
}

impl PaperInput {
    /// Plain-text input: the first non-empty line is the title and the
    /// paragraph under an `Abstract` heading (or prefix) is the abstract.
    pub fn from_text(raw: &str) -> Result<Self> {
        let mut lines = raw.lines().map(str::trim);
        let title = lines
            .by_ref()
            .find(|l| !l.is_empty())
            .ok_or_else(|| Error::invalid("paper text is empty"))?
            .trim_start_matches('#')
            .trim()
            .to_string();
        let mut abstract_lines: Vec<&str> = Vec::new();
        let mut in_abstract = false;
        for line in raw.lines().map(str::trim) {
            let lower = line.to_lowercase();
            let bare = lower.trim_start_matches('#').trim().trim_end_matches(['.', ':']);
            if !in_abstract {
                if bare == "abstract" {
                    in_abstract = true;
                } else if let Some(rest) = lower.strip_prefix("abstract") {
                    if rest.starts_with([':', '.', ' ']) {
                        in_abstract = true;
                        let body = line["abstract".len()..].trim_start_matches([':', '.', ' ', '-']);
                        if !body.is_empty() {
                            abstract_lines.push(body);
                        }
                    }
                }
                continue;
            }
            if line.is_empty() {
                if abstract_lines.is_empty() {
                    continue;
                }
                break;
            }
            if line.starts_with('#') {
                break;
            }
            abstract_lines.push(line);
        }
        Ok(PaperInput {
            title,
            abstract_text: abstract_lines.join(" "),
            text: raw.to_string(),
            url: None,
            identifiers: Identifiers::default(),
            publication_date: None,
        })
    }

    /// JSON when the content parses as a paper object, plain text otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            return Ok(serde_json::from_str(&raw)?);
        }
        Self::from_text(&raw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub retry: RetryPolicy,
    pub top_k: TopK,
    pub temperatures: Temperatures,
    /// Worker count for Phase III comparisons and similarity detection.
    pub concurrency: usize,
    pub verify: VerifyConfig,
    pub allow_llm_repair: bool,
    pub render: RenderConfig,
    /// Fixed report timestamp; the current time when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<String>,
    pub resume: bool,
    pub tool_version: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            output_dir: PathBuf::from("out"),
            retry: RetryPolicy::default(),
            top_k: TopK::default(),
            temperatures: Temperatures::default(),
            concurrency: 1,
            verify: VerifyConfig::default(),
            allow_llm_repair: true,
            render: RenderConfig::default(),
            generated_at: None,
            resume: false,
            tool_version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseStatus {
    NotStarted,
    Completed,
    Resumed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub status: PhaseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact: Option<PathBuf>,
    pub duration_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub phases: Vec<PhaseRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failure_log: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl RunManifest {
    fn new() -> Self {
        RunManifest {
            phases: [Phase::Extraction, Phase::Retrieval, Phase::Analysis, Phase::Render]
                .into_iter()
                .map(|phase| PhaseRecord {
                    phase,
                    status: PhaseStatus::NotStarted,
                    artifact: None,
                    duration_ms: 0,
                    error: None,
                })
                .collect(),
            failure_log: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn succeeded(&self) -> bool {
        self.phases
            .iter()
            .all(|p| matches!(p.status, PhaseStatus::Completed | PhaseStatus::Resumed))
    }

    pub fn failed_phase(&self) -> Option<&PhaseRecord> {
        self.phases.iter().find(|p| p.status == PhaseStatus::Failed)
    }

    /// Phases finished in order with nothing after a gap.
    pub fn is_ordered(&self) -> bool {
        let done: Vec<bool> = self
            .phases
            .iter()
            .map(|p| matches!(p.status, PhaseStatus::Completed | PhaseStatus::Resumed))
            .collect();
        done.windows(2).all(|w| w[0] || !w[1])
    }

    fn record(&mut self, phase: Phase) -> &mut PhaseRecord {
        self.phases.iter_mut().find(|p| p.phase == phase).expect("every phase has a record")
    }

    pub fn markdown_path(&self) -> Option<&Path> {
        self.phases
            .iter()
            .find(|p| p.phase == Phase::Render)
            .and_then(|p| p.artifact.as_deref())
    }
}

/// Append-only JSON-lines log of external requests and responses.
pub struct CallLog {
    out: Mutex<BufWriter<File>>,
}

impl CallLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(CallLog { out: Mutex::new(BufWriter::new(file)) })
    }

    fn write(&self, entry: serde_json::Value) {
        let mut out = self.out.lock().unwrap();
        if let Err(e) = writeln!(out, "{entry}").and_then(|_| out.flush()) {
            warn!(error = %e, "call log write failed");
        }
    }
}

fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub struct LoggedLlm<'a> {
    pub inner: &'a dyn LlmClient,
    pub log: &'a CallLog,
}

impl LlmClient for LoggedLlm<'_> {
    fn complete(&self, request: &LlmRequest) -> std::result::Result<String, LlmError> {
        let started = Instant::now();
        let result = self.inner.complete(request);
        let (response, error) = match &result {
            Ok(r) => (Some(r.as_str()), None),
            Err(e) => (None, Some(e.to_string())),
        };
        self.log.write(json!({
            "ts": timestamp(),
            "kind": "llm",
            "task": request.task,
            "temperature": request.temperature,
            "system_prompt": request.system_prompt,
            "user_prompt": request.user_prompt,
            "response": response,
            "error": error,
            "elapsed_ms": started.elapsed().as_millis() as u64,
        }));
        result
    }
}

pub struct LoggedSearch<'a> {
    pub inner: &'a dyn SearchClient,
    pub log: &'a CallLog,
}

impl SearchClient for LoggedSearch<'_> {
    fn search(&self, query: &str) -> std::result::Result<Vec<SearchHit>, SearchError> {
        let started = Instant::now();
        let result = self.inner.search(query);
        let (hits, error, status) = match &result {
            Ok(h) => (Some(h.len()), None, None),
            Err(e) => (None, Some(e.message.clone()), e.status),
        };
        self.log.write(json!({
            "ts": timestamp(),
            "kind": "search",
            "query": query,
            "hits": hits,
            "status": status,
            "error": error,
            "elapsed_ms": started.elapsed().as_millis() as u64,
        }));
        result
    }
}

/// Phase I artifact: the target's identity plus the extraction output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase1Artifact {
    pub target: PaperRecord,
    pub phase1: Phase1Output,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Option<T> {
    let text = std::fs::read_to_string(path).ok()?;
    match serde_json::from_str(&text) {
        Ok(v) => Some(v),
        Err(e) => {
            warn!(path = %path.display(), error = %e, "ignoring unreadable artifact");
            None
        }
    }
}

fn remove_if_present(path: &Path) -> Result<()> {
    match std::fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Builds the target record: identity, inferred date, no full text.
pub fn target_record(paper: &PaperInput, llm: &dyn LlmClient) -> Result<PaperRecord> {
    let mut record = PaperRecord::new(&paper.title, paper.identifiers.clone())?;
    record.abstract_text = paper.abstract_text.clone();
    record.url = paper.url.clone();
    record.publication_date = match &paper.publication_date {
        Some(d) => Some(PublicationDate::parse_iso(d, crate::paper::DateSource::Metadata)?),
        None => {
            let front: String = paper.text.chars().take(FRONT_MATTER_CHARS).collect();
            infer_publication_date(paper.url.as_deref(), Some(&front), Some(llm))?
        }
    };
    Ok(record)
}

fn abort(phase: Phase, e: Error) -> Error {
    match e {
        Error::PhaseAbort { .. } => e,
        other => Error::PhaseAbort {
            phase,
            reason: other.to_string(),
        },
    }
}

/// Runs Phases I to IV, stopping at the first failing phase. The manifest is
/// written on every exit path and records the failure, if any.
pub fn run_pipeline(
    paper: &PaperInput,
    cfg: &PipelineConfig,
    llm: &dyn LlmClient,
    search: &dyn SearchClient,
    sleeper: &dyn Sleeper,
) -> Result<RunManifest> {
    if paper.text.trim().is_empty() {
        return Err(Error::invalid("paper text is empty"));
    }
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = [dir.join(PHASE1_FILE), dir.join(PHASE2_FILE), dir.join(PHASE3_FILE)];
    if !cfg.resume {
        for p in &paths {
            remove_if_present(p)?;
        }
        remove_if_present(&dir.join(CALL_LOG_FILE))?;
    }
    let log = CallLog::create(&dir.join(CALL_LOG_FILE))?;
    let llm = LoggedLlm { inner: llm, log: &log };
    let search = LoggedSearch { inner: search, log: &log };
    let mut manifest = RunManifest::new();
    let result = run_phases(paper, cfg, &llm, &search, sleeper, &paths, &mut manifest);
    if let Err(e) = &result {
        manifest.failure_log.push(e.to_string());
    }
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    match result {
        Ok(()) => Ok(manifest),
        Err(e) => {
            warn!(error = %e, "pipeline stopped");
            Ok(manifest)
        }
    }
}

fn run_phases(
    paper: &PaperInput,
    cfg: &PipelineConfig,
    llm: &dyn LlmClient,
    search: &dyn SearchClient,
    sleeper: &dyn Sleeper,
    paths: &[PathBuf; 3],
    manifest: &mut RunManifest,
) -> Result<()> {
    let mut resuming = cfg.resume;
    let stage = |manifest: &mut RunManifest, phase: Phase, start: Instant, artifact: Option<PathBuf>, resumed: bool| {
        let r = manifest.record(phase);
        r.status = if resumed { PhaseStatus::Resumed } else { PhaseStatus::Completed };
        r.artifact = artifact;
        r.duration_ms = start.elapsed().as_millis() as u64;
    };
    let fail = |manifest: &mut RunManifest, phase: Phase, start: Instant, e: Error| -> Error {
        let e = abort(phase, e);
        let r = manifest.record(phase);
        r.status = PhaseStatus::Failed;
        r.duration_ms = start.elapsed().as_millis() as u64;
        r.error = Some(e.to_string());
        e
    };

    // Phase I
    let start = Instant::now();
    let p1: Phase1Artifact = match resuming.then(|| read_json::<Phase1Artifact>(&paths[0])).flatten() {
        Some(a) => {
            info!("resuming from {}", paths[0].display());
            stage(manifest, Phase::Extraction, start, Some(paths[0].clone()), true);
            a
        }
        None => {
            resuming = false;
            for p in &paths[1..] {
                remove_if_present(p)?;
            }
            let run = || -> Result<Phase1Artifact> {
                let target = target_record(paper, llm)?;
                let body = preprocess_document(&paper.text, Purpose::Extraction)?;
                let text = TargetText {
                    title: &paper.title,
                    abstract_text: &paper.abstract_text,
                    body: &body,
                };
                let phase1 = run_phase1(text, llm, &cfg.temperatures)?;
                Ok(Phase1Artifact { target, phase1 })
            };
            let a = run().map_err(|e| fail(manifest, Phase::Extraction, start, e))?;
            write_json(&paths[0], &a)?;
            stage(manifest, Phase::Extraction, start, Some(paths[0].clone()), false);
            a
        }
    };
    manifest.warnings.extend(p1.phase1.warnings.iter().cloned());

    // Phase II
    let start = Instant::now();
    let p2: Phase2Output = match resuming.then(|| read_json::<Phase2Output>(&paths[1])).flatten() {
        Some(a) => {
            stage(manifest, Phase::Retrieval, start, Some(paths[1].clone()), true);
            a
        }
        None => {
            resuming = false;
            remove_if_present(&paths[2])?;
            let out = run_phase2(&p1.phase1.queries, search, &cfg.retry, sleeper, &p1.target, cfg.top_k)
                .map_err(|e| fail(manifest, Phase::Retrieval, start, e))?;
            write_json(&paths[1], &out)?;
            stage(manifest, Phase::Retrieval, start, Some(paths[1].clone()), false);
            out
        }
    };

    // Phase III
    let start = Instant::now();
    let report: NoveltyReport = match resuming.then(|| read_json::<NoveltyReport>(&paths[2])).flatten() {
        Some(r) => {
            stage(manifest, Phase::Analysis, start, Some(paths[2].clone()), true);
            r
        }
        None => {
            let mut target = p1.target.clone();
            target.full_text = Some(
                preprocess_document(&paper.text, Purpose::Comparison)
                    .map_err(|e| fail(manifest, Phase::Analysis, start, e))?,
            );
            let config = Phase3Config {
                concurrency: cfg.concurrency,
                verify: cfg.verify,
                allow_llm_repair: cfg.allow_llm_repair,
                generated_at: cfg.generated_at.clone().unwrap_or_else(timestamp),
                tool_version: cfg.tool_version.clone(),
            };
            let input = Phase3Input {
                target: &target,
                phase1: &p1.phase1,
                phase2: &p2,
            };
            let report =
                run_phase3(input, llm, &config).map_err(|e| fail(manifest, Phase::Analysis, start, e))?;
            write_json(&paths[2], &report)?;
            stage(manifest, Phase::Analysis, start, Some(paths[2].clone()), false);
            report
        }
    };

    // Phase IV
    let start = Instant::now();
    let render = RenderConfig {
        output_dir: cfg.output_dir.clone(),
        ..cfg.render.clone()
    };
    let out = write_report(&report, &render).map_err(|e| fail(manifest, Phase::Render, start, e))?;
    stage(manifest, Phase::Render, start, Some(out.markdown), false);
    Ok(())
}
