//! Phase II: fault-tolerant query execution and multi-layer candidate filtering.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::error::{Error, Result};
use crate::extraction::{QueryScope, QuerySet, SearchQuery};
use crate::paper::{
    compute_quality_flag, infer_publication_date, normalize_title, CanonicalId, DocumentText, Identifiers,
    PaperRecord, PublicationDate, QualityFlag, VerificationVerdict, DateSource,
};

pub const DEFAULT_TOPK_CORE: usize = 50;
pub const DEFAULT_TOPK_CONTRIBUTION: usize = 10;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("search failed: {message}")]
pub struct SearchError {
    pub message: String,
    /// Response code, when the backend returned one.
    pub status: Option<u16>,
}

impl SearchError {
    pub fn new(message: impl Into<String>) -> Self {
        SearchError {
            message: message.into(),
            status: None,
        }
    }
}

/// One search-engine hit with its per-criterion verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub title: String,
    #[serde(rename = "abstract", default)]
    pub abstract_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default)]
    pub identifiers: Identifiers,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub authors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub venue: Option<String>,
    pub relevance_score: f64,
    #[serde(default)]
    pub verdict: VerificationVerdict,
    /// `YYYY`, `YYYY-MM` or `YYYY-MM-DD`; inferred from the URL when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub publication_date: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_text: Option<String>,
}

impl SearchHit {
    pub fn into_record(self) -> Result<PaperRecord> {
        let mut rec = PaperRecord::new(self.title, self.identifiers)?.with_relevance(self.relevance_score)?;
        rec.abstract_text = self.abstract_text;
        rec.authors = self.authors;
        rec.venue = self.venue;
        rec.publication_date = match self.publication_date.as_deref() {
            Some(s) => Some(PublicationDate::parse_iso(s, DateSource::Metadata)?),
            None => match self.url.as_deref() {
                Some(url) => infer_publication_date(Some(url), None, None)?,
                None => None,
            },
        };
        rec.url = self.url;
        rec.full_text = self.full_text.map(DocumentText::new);
        Ok(rec)
    }
}

/// Natural-language search backend.
pub trait SearchClient: Send + Sync {
    fn search(&self, query: &str) -> Result<Vec<SearchHit>, SearchError>;
}

impl<T: SearchClient + ?Sized> SearchClient for &T {
    fn search(&self, query: &str) -> Result<Vec<SearchHit>, SearchError> {
        (**self).search(query)
    }
}

impl<T: SearchClient + ?Sized> SearchClient for Box<T> {
    fn search(&self, query: &str) -> Result<Vec<SearchHit>, SearchError> {
        (**self).search(query)
    }
}

impl<T: SearchClient + ?Sized> SearchClient for std::sync::Arc<T> {
    fn search(&self, query: &str) -> Result<Vec<SearchHit>, SearchError> {
        (**self).search(query)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CannedSearch {
    Error { error: String },
    Hits { hits: Vec<SearchHit> },
}

/// Applies to queries containing every string in `contains`; responses are
/// served in order per distinct query text, the last one repeating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockSearchRule {
    #[serde(default)]
    pub contains: Vec<String>,
    pub responses: Vec<CannedSearch>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockSearchFixture {
    pub rules: Vec<MockSearchRule>,
}

#[derive(Debug, Default)]
pub struct MockSearch {
    rules: Vec<MockSearchRule>,
    served: Mutex<HashMap<(usize, String), usize>>,
    calls: Mutex<Vec<String>>,
}

impl MockSearch {
    pub fn new(fixture: MockSearchFixture) -> Self {
        MockSearch {
            rules: fixture.rules,
            ..Default::default()
        }
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str(json)?))
    }

    pub fn rule(mut self, contains: &[&str], responses: Vec<CannedSearch>) -> Self {
        self.rules.push(MockSearchRule {
            contains: contains.iter().map(|s| s.to_string()).collect(),
            responses,
        });
        self
    }

    pub fn calls(&self) -> Vec<String> {
        self.calls.lock().unwrap().clone()
    }
}

impl SearchClient for MockSearch {
    fn search(&self, query: &str) -> Result<Vec<SearchHit>, SearchError> {
        self.calls.lock().unwrap().push(query.to_string());
        let Some((idx, rule)) = self
            .rules
            .iter()
            .enumerate()
            .find(|(_, r)| r.contains.iter().all(|s| query.contains(s.as_str())))
        else {
            return Ok(Vec::new());
        };
        if rule.responses.is_empty() {
            return Ok(Vec::new());
        }
        let mut served = self.served.lock().unwrap();
        let n = served.entry((idx, query.to_string())).or_insert(0);
        let response = &rule.responses[(*n).min(rule.responses.len() - 1)];
        *n += 1;
        match response {
            CannedSearch::Error { error } => Err(SearchError::new(error.clone())),
            CannedSearch::Hits { hits } => Ok(hits.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_query_attempts: usize,
    #[serde(with = "duration_ms")]
    pub initial_delay: Duration,
    pub global_max_retries: usize,
    pub concurrency: usize,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_query_attempts: 8,
            initial_delay: Duration::from_secs(5),
            global_max_retries: 180,
            concurrency: 1,
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.max_query_attempts == 0 || self.concurrency == 0 || self.global_max_retries == 0 {
            return Err(Error::invalid("retry policy values must be positive"));
        }
        if self.initial_delay.is_zero() {
            return Err(Error::invalid("retry policy initial delay must be positive"));
        }
        Ok(())
    }

    /// Wait before `attempt` (1-based): none before the first, then
    /// `initial_delay × (attempt - 1)`.
    pub fn delay_before(&self, attempt: usize) -> Duration {
        self.initial_delay * (attempt.saturating_sub(1)) as u32
    }
}

mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, duration: Duration);
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

/// Records requested sleeps without waiting.
#[derive(Debug, Default)]
pub struct RecordingSleeper {
    slept: Mutex<Vec<Duration>>,
}

impl RecordingSleeper {
    pub fn slept(&self) -> Vec<Duration> {
        self.slept.lock().unwrap().clone()
    }
}

impl Sleeper for RecordingSleeper {
    fn sleep(&self, duration: Duration) {
        self.slept.lock().unwrap().push(duration);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub paper: PaperRecord,
    pub query_id: String,
    pub scope: QueryScope,
    /// `core_task` or the owning contribution id.
    pub scope_key: String,
    pub verdict: VerificationVerdict,
    pub relevance_score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub query_id: String,
    pub query: String,
    pub attempt: usize,
    pub delay_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hits: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryFailure {
    pub query_id: String,
    pub query: String,
    pub attempts: usize,
    pub last_error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub results: Vec<RetrievalResult>,
    pub attempts: Vec<AttemptRecord>,
    pub failures: Vec<QueryFailure>,
    /// Hits dropped because they could not be turned into records.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected_hits: Vec<String>,
}

/// Stable id of the `i`-th query of a scope, e.g. `core_task#0`.
pub fn query_ids(queries: &QuerySet) -> Vec<(String, &SearchQuery)> {
    let mut counters: HashMap<&str, usize> = HashMap::new();
    queries
        .all()
        .into_iter()
        .map(|q| {
            let n = counters.entry(q.scope_key()).or_insert(0);
            let id = format!("{}#{}", q.scope_key(), n);
            *n += 1;
            (id, q)
        })
        .collect()
}

struct QueryRun {
    results: Vec<RetrievalResult>,
    attempts: Vec<AttemptRecord>,
    failure: Option<QueryFailure>,
    rejected: Vec<String>,
}

fn run_one(
    id: &str,
    query: &SearchQuery,
    search: &dyn SearchClient,
    policy: &RetryPolicy,
    sleeper: &dyn Sleeper,
    retry_budget: &AtomicUsize,
) -> QueryRun {
    let mut attempts = Vec::new();
    let mut last_error = String::new();
    for attempt in 1..=policy.max_query_attempts {
        let delay = policy.delay_before(attempt);
        if attempt > 1 {
            let granted = retry_budget
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |left| left.checked_sub(1))
                .is_ok();
            if !granted {
                last_error = format!("{last_error} (global retry budget exhausted)");
                break;
            }
            sleeper.sleep(delay);
        }
        let mut record = AttemptRecord {
            query_id: id.to_string(),
            query: query.text.clone(),
            attempt,
            delay_ms: delay.as_millis() as u64,
            hits: None,
            error: None,
        };
        match search.search(&query.text) {
            Ok(hits) => {
                record.hits = Some(hits.len());
                attempts.push(record);
                let mut results = Vec::with_capacity(hits.len());
                let mut rejected = Vec::new();
                for hit in hits {
                    let verdict = hit.verdict.clone();
                    let title = hit.title.clone();
                    match hit.into_record() {
                        Ok(mut paper) => {
                            paper.quality_flag = Some(compute_quality_flag(&verdict).unwrap_or(QualityFlag::No));
                            results.push(RetrievalResult {
                                relevance_score: paper.relevance(),
                                paper,
                                query_id: id.to_string(),
                                scope: query.scope,
                                scope_key: query.scope_key().to_string(),
                                verdict,
                            });
                        }
                        Err(e) => rejected.push(format!("{id}: `{title}`: {e}")),
                    }
                }
                return QueryRun {
                    results,
                    attempts,
                    failure: None,
                    rejected,
                };
            }
            Err(e) => {
                warn!(query_id = id, attempt, error = %e, "search attempt failed");
                last_error = e.to_string();
                record.error = Some(last_error.clone());
                attempts.push(record);
            }
        }
    }
    QueryRun {
        failure: Some(QueryFailure {
            query_id: id.to_string(),
            query: query.text.clone(),
            attempts: attempts.len(),
            last_error,
        }),
        results: Vec::new(),
        attempts,
        rejected: Vec::new(),
    }
}

/// Runs every query with per-query retries on a pool of `policy.concurrency`
/// workers. Output order follows query order regardless of scheduling.
pub fn execute_queries(
    queries: &QuerySet,
    search: &dyn SearchClient,
    policy: &RetryPolicy,
    sleeper: &dyn Sleeper,
) -> Result<ExecutionOutcome> {
    policy.validate()?;
    let indexed = query_ids(queries);
    if indexed.is_empty() {
        return Err(Error::invalid("query set is empty"));
    }
    let retry_budget = AtomicUsize::new(policy.global_max_retries);
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<QueryRun>>> = indexed.iter().map(|_| Mutex::new(None)).collect();
    let workers = policy.concurrency.min(indexed.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((id, query)) = indexed.get(i) else { break };
                let run = run_one(id, query, search, policy, sleeper, &retry_budget);
                *slots[i].lock().unwrap() = Some(run);
            });
        }
    });
    let mut outcome = ExecutionOutcome::default();
    for slot in slots {
        let run = slot.into_inner().unwrap().expect("every query slot is filled");
        outcome.results.extend(run.results);
        outcome.attempts.extend(run.attempts);
        outcome.rejected_hits.extend(run.rejected);
        if let Some(f) = run.failure {
            outcome.failures.push(f);
        }
    }
    if outcome.failures.len() == indexed.len() {
        return Err(Error::RetrievalEmpty {
            attempted: indexed.len(),
            failures: outcome.failures.iter().map(|f| format!("{}: {}", f.query_id, f.last_error)).collect(),
        });
    }
    info!(
        queries = indexed.len(),
        failed = outcome.failures.len(),
        hits = outcome.results.len(),
        "retrieval finished"
    );
    Ok(outcome)
}

/// Comparable form of a URL: no scheme, `www.`, query, trailing slash or `.pdf`,
/// arXiv `abs`/`pdf` paths unified and version suffix dropped.
pub fn normalize_url(url: &str) -> String {
    let mut u = url.trim().to_ascii_lowercase();
    for p in ["https://", "http://"] {
        if let Some(rest) = u.strip_prefix(p) {
            u = rest.to_string();
        }
    }
    if let Some(rest) = u.strip_prefix("www.") {
        u = rest.to_string();
    }
    if let Some(i) = u.find(['?', '#']) {
        u.truncate(i);
    }
    let mut u = u.trim_end_matches('/').to_string();
    if let Some(rest) = u.strip_suffix(".pdf") {
        u = rest.to_string();
    }
    u = u.replace("arxiv.org/pdf/", "arxiv.org/abs/");
    if u.contains("arxiv.org/abs/") {
        if let Some(v) = u.rfind('v') {
            if v + 1 < u.len() && u[v + 1..].bytes().all(|b| b.is_ascii_digit()) && u[..v].ends_with(|c: char| c.is_ascii_digit()) {
                u.truncate(v);
            }
        }
    }
    u
}

fn same_work(a: &PaperRecord, b: &PaperRecord) -> bool {
    a.canonical_id == b.canonical_id || a.title_hash() == b.title_hash()
}

fn is_self_reference(candidate: &PaperRecord, target: &PaperRecord) -> bool {
    if candidate.canonical_id == target.canonical_id {
        return true;
    }
    if let (Some(a), Some(b)) = (&candidate.url, &target.url) {
        if normalize_url(a) == normalize_url(b) {
            return true;
        }
    }
    match (normalize_title(&candidate.title), normalize_title(&target.title)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

/// Groups papers that denote the same work (equal canonical id or equal title
/// hash), keeping the highest-relevance instance; first seen wins ties.
pub fn dedup_by_identity(papers: Vec<PaperRecord>) -> Vec<PaperRecord> {
    let mut kept: Vec<PaperRecord> = Vec::new();
    let mut by_id: HashMap<CanonicalId, usize> = HashMap::new();
    let mut by_hash: HashMap<String, usize> = HashMap::new();
    for paper in papers {
        let hash = paper.title_hash();
        let slot = by_id.get(&paper.canonical_id).or_else(|| by_hash.get(&hash)).copied();
        match slot {
            Some(i) => {
                if paper.relevance() > kept[i].relevance() {
                    kept[i] = paper;
                }
                by_id.insert(kept[i].canonical_id.clone(), i);
                by_hash.insert(kept[i].title_hash(), i);
            }
            None => {
                by_id.insert(paper.canonical_id.clone(), kept.len());
                by_hash.insert(hash, kept.len());
                kept.push(paper);
            }
        }
    }
    kept
}

/// Relevance descending, canonical id ascending on ties.
pub fn rank_order(a: &PaperRecord, b: &PaperRecord) -> std::cmp::Ordering {
    b.relevance()
        .total_cmp(&a.relevance())
        .then_with(|| a.canonical_id.to_string().cmp(&b.canonical_id.to_string()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub raw: usize,
    pub after_quality: usize,
    pub after_dedup: usize,
    pub after_self_reference: usize,
    pub after_temporal: usize,
    pub selected: usize,
}

impl FilterStats {
    pub fn add(&mut self, other: &FilterStats) {
        self.raw += other.raw;
        self.after_quality += other.after_quality;
        self.after_dedup += other.after_dedup;
        self.after_self_reference += other.after_self_reference;
        self.after_temporal += other.after_temporal;
        self.selected += other.selected;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScopeFilterOutcome {
    pub papers: Vec<PaperRecord>,
    pub stats: FilterStats,
    /// Partial-flag hits, logged for diagnostics and never ranked.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub partial: Vec<CanonicalId>,
}

/// Quality filter, intra-scope dedup, self-reference removal, temporal filter,
/// then Top-K by relevance.
pub fn filter_scope(results: &[RetrievalResult], k: usize, target: &PaperRecord) -> ScopeFilterOutcome {
    let mut stats = FilterStats {
        raw: results.len(),
        ..Default::default()
    };
    let mut partial = Vec::new();
    let mut perfect = Vec::new();
    for r in results {
        match r.paper.quality_flag {
            Some(QualityFlag::Perfect) => perfect.push(r.paper.clone()),
            Some(QualityFlag::Partial) => {
                if !partial.contains(&r.paper.canonical_id) {
                    partial.push(r.paper.canonical_id.clone());
                }
            }
            _ => {}
        }
    }
    stats.after_quality = perfect.len();
    let deduped = dedup_by_identity(perfect);
    stats.after_dedup = deduped.len();
    let not_self: Vec<PaperRecord> = deduped.into_iter().filter(|p| !is_self_reference(p, target)).collect();
    stats.after_self_reference = not_self.len();
    let mut timely: Vec<PaperRecord> = not_self
        .into_iter()
        .filter(|p| match (&p.publication_date, &target.publication_date) {
            (Some(pd), Some(td)) => !pd.is_after(td),
            _ => true,
        })
        .collect();
    stats.after_temporal = timely.len();
    timely.sort_by(rank_order);
    timely.truncate(k);
    stats.selected = timely.len();
    ScopeFilterOutcome {
        papers: timely,
        stats,
        partial,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeList {
    pub contribution_id: String,
    pub papers: Vec<PaperRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnifiedCandidate {
    pub paper: PaperRecord,
    /// Scopes that retrieved it: `core_task` and/or contribution ids.
    pub scopes: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CrossScopeStats {
    pub combined: usize,
    pub unique: usize,
    pub removed: usize,
    pub removal_percent: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub core_task: Vec<PaperRecord>,
    pub per_contribution: Vec<ScopeList>,
    pub unified: Vec<UnifiedCandidate>,
    pub stats: CrossScopeStats,
}

impl CandidateSet {
    pub fn get(&self, id: &CanonicalId) -> Option<&PaperRecord> {
        self.unified.iter().map(|u| &u.paper).find(|p| &p.canonical_id == id)
    }

    pub fn contribution(&self, contribution_id: &str) -> &[PaperRecord] {
        self.per_contribution
            .iter()
            .find(|s| s.contribution_id == contribution_id)
            .map_or(&[], |s| s.papers.as_slice())
    }
}

/// Merges per-scope lists into one keyed set. On collision the core-task (or
/// earlier) instance wins and absorbs identifiers it lacks; scope lists are
/// rewritten to the surviving instance.
pub fn cross_scope_dedup(core: Vec<PaperRecord>, per_contribution: Vec<ScopeList>) -> CandidateSet {
    let combined = core.len() + per_contribution.iter().map(|s| s.papers.len()).sum::<usize>();
    let mut unified: Vec<UnifiedCandidate> = Vec::new();
    let mut core_slots = Vec::with_capacity(core.len());
    let mut contribution_slots: Vec<Vec<usize>> = Vec::new();
    let place = |paper: PaperRecord, scope: &str, unified: &mut Vec<UnifiedCandidate>| -> usize {
        match unified.iter().position(|u| same_work(&u.paper, &paper)) {
            Some(i) => {
                let entry = &mut unified[i];
                entry.paper.identifiers.merge_missing(&paper.identifiers);
                entry.paper.refresh_canonical_id();
                if entry.paper.full_text.is_none() {
                    entry.paper.full_text = paper.full_text;
                }
                if entry.paper.publication_date.is_none() {
                    entry.paper.publication_date = paper.publication_date;
                }
                if !entry.scopes.iter().any(|s| s == scope) {
                    entry.scopes.push(scope.to_string());
                }
                i
            }
            None => {
                unified.push(UnifiedCandidate {
                    paper,
                    scopes: vec![scope.to_string()],
                });
                unified.len() - 1
            }
        }
    };
    for paper in core {
        core_slots.push(place(paper, "core_task", &mut unified));
    }
    let ids: Vec<String> = per_contribution.iter().map(|s| s.contribution_id.clone()).collect();
    for list in per_contribution {
        let slots = list
            .papers
            .into_iter()
            .map(|p| place(p, &list.contribution_id, &mut unified))
            .collect();
        contribution_slots.push(slots);
    }
    let pick = |slots: &[usize]| -> Vec<PaperRecord> {
        let mut out: Vec<PaperRecord> = Vec::with_capacity(slots.len());
        for &i in slots {
            if !out.iter().any(|p| p.canonical_id == unified[i].paper.canonical_id) {
                out.push(unified[i].paper.clone());
            }
        }
        out
    };
    let core_task = pick(&core_slots);
    let per_contribution = ids
        .into_iter()
        .zip(&contribution_slots)
        .map(|(contribution_id, slots)| ScopeList {
            contribution_id,
            papers: pick(slots),
        })
        .collect();
    let unique = unified.len();
    let removed = combined - unique;
    CandidateSet {
        core_task,
        per_contribution,
        unified,
        stats: CrossScopeStats {
            combined,
            unique,
            removed,
            removal_percent: percent(removed, combined),
        },
    }
}

pub fn percent(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        part as f64 * 100.0 / whole as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OverallStats {
    pub raw: usize,
    pub unified: usize,
    pub filtered_percent: f64,
}

/// Phase II result persisted as `phase2.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Phase2Output {
    pub core_task_stats: FilterStats,
    pub contribution_stats: Vec<(String, FilterStats)>,
    /// Sum over contribution scopes.
    pub contribution_total: FilterStats,
    pub candidates: CandidateSet,
    pub overall: OverallStats,
    pub attempts: Vec<AttemptRecord>,
    pub failures: Vec<QueryFailure>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub partial_log: Vec<CanonicalId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected_hits: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopK {
    pub core_task: usize,
    pub contribution: usize,
}

impl Default for TopK {
    fn default() -> Self {
        TopK {
            core_task: DEFAULT_TOPK_CORE,
            contribution: DEFAULT_TOPK_CONTRIBUTION,
        }
    }
}

/// Filters already-executed results into the final candidate set.
pub fn filter_results(
    queries: &QuerySet,
    outcome: ExecutionOutcome,
    target: &PaperRecord,
    top_k: TopK,
) -> Phase2Output {
    let of_scope = |key: &str| -> Vec<RetrievalResult> {
        outcome.results.iter().filter(|r| r.scope_key == key).cloned().collect()
    };
    let core = filter_scope(&of_scope("core_task"), top_k.core_task, target);
    let mut partial_log = core.partial.clone();
    let mut contribution_stats = Vec::new();
    let mut contribution_total = FilterStats::default();
    let mut lists = Vec::new();
    for cq in &queries.contribution_queries {
        let scoped = filter_scope(&of_scope(&cq.contribution_id), top_k.contribution, target);
        contribution_total.add(&scoped.stats);
        contribution_stats.push((cq.contribution_id.clone(), scoped.stats));
        for id in scoped.partial {
            if !partial_log.contains(&id) {
                partial_log.push(id);
            }
        }
        lists.push(ScopeList {
            contribution_id: cq.contribution_id.clone(),
            papers: scoped.papers,
        });
    }
    let candidates = cross_scope_dedup(core.papers, lists);
    let raw = core.stats.raw + contribution_total.raw;
    let overall = OverallStats {
        raw,
        unified: candidates.unified.len(),
        filtered_percent: percent(raw - candidates.unified.len().min(raw), raw),
    };
    Phase2Output {
        core_task_stats: core.stats,
        contribution_stats,
        contribution_total,
        candidates,
        overall,
        attempts: outcome.attempts,
        failures: outcome.failures,
        partial_log,
        rejected_hits: outcome.rejected_hits,
    }
}

pub fn run_phase2(
    queries: &QuerySet,
    search: &dyn SearchClient,
    policy: &RetryPolicy,
    sleeper: &dyn Sleeper,
    target: &PaperRecord,
    top_k: TopK,
) -> Result<Phase2Output> {
    let outcome = execute_queries(queries, search, policy, sleeper)?;
    Ok(filter_results(queries, outcome, target, top_k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::{ContributionQueries, QueryKind};
    use crate::paper::{Assessment, Criterion};

    fn q(text: &str) -> SearchQuery {
        SearchQuery {
            text: text.into(),
            scope: QueryScope::CoreTask,
            kind: QueryKind::Primary,
            contribution_id: None,
        }
    }

    fn set(texts: &[&str]) -> QuerySet {
        QuerySet {
            core_task_queries: texts.iter().map(|t| q(t)).collect(),
            ..Default::default()
        }
    }

    fn hit(title: &str, rel: f64, flag: Assessment) -> SearchHit {
        SearchHit {
            title: title.into(),
            abstract_text: String::new(),
            url: None,
            identifiers: Identifiers::default(),
            authors: vec![],
            venue: None,
            relevance_score: rel,
            verdict: VerificationVerdict {
                criteria: vec![Criterion::new("topic", flag)],
            },
            publication_date: None,
            full_text: None,
        }
    }

    fn fast() -> RetryPolicy {
        RetryPolicy {
            initial_delay: Duration::from_millis(5),
            ..Default::default()
        }
    }

    #[test]
    fn retries_until_success() {
        let search = MockSearch::default().rule(
            &["a"],
            vec![
                CannedSearch::Error { error: "503".into() },
                CannedSearch::Error { error: "503".into() },
                CannedSearch::Hits {
                    hits: vec![hit("P", 0.5, Assessment::Support)],
                },
            ],
        );
        let sleeper = RecordingSleeper::default();
        let out = execute_queries(&set(&["a", "b"]), &search, &fast(), &sleeper).unwrap();
        assert_eq!(out.results.len(), 1);
        let for_a: Vec<_> = out.attempts.iter().filter(|a| a.query_id == "core_task#0").collect();
        assert_eq!(for_a.len(), 3);
        assert_eq!(sleeper.slept(), [Duration::from_millis(5), Duration::from_millis(10)]);
    }

    #[test]
    fn eight_failures_skip_the_query() {
        let search = MockSearch::default()
            .rule(&["bad"], vec![CannedSearch::Error { error: "down".into() }])
            .rule(&[], vec![CannedSearch::Hits { hits: vec![hit("P", 0.5, Assessment::Support)] }]);
        let out = execute_queries(&set(&["bad", "good"]), &search, &fast(), &RecordingSleeper::default()).unwrap();
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].attempts, 8);
        assert_eq!(out.results.len(), 1);

        let err = execute_queries(&set(&["bad"]), &search, &fast(), &RecordingSleeper::default()).unwrap_err();
        assert!(matches!(err, Error::RetrievalEmpty { attempted: 1, .. }));
    }

    #[test]
    fn global_budget_caps_retries() {
        let search = MockSearch::default().rule(&[], vec![CannedSearch::Error { error: "x".into() }]);
        let policy = RetryPolicy {
            global_max_retries: 3,
            ..fast()
        };
        let _ = execute_queries(&set(&["a", "b"]), &search, &policy, &RecordingSleeper::default());
        assert_eq!(search.calls().len(), 2 + 3);
    }

    #[test]
    fn result_order_follows_query_order_under_concurrency() {
        let texts: Vec<String> = (0..12).map(|i| format!("query <{i}>")).collect();
        let refs: Vec<&str> = texts.iter().map(|s| s.as_str()).collect();
        let mut search = MockSearch::default();
        for t in &texts {
            search = search.rule(&[t.as_str()], vec![CannedSearch::Hits { hits: vec![hit(t, 0.5, Assessment::Support)] }]);
        }
        for c in [1, 4] {
            let policy = RetryPolicy { concurrency: c, ..fast() };
            let out = execute_queries(&set(&refs), &search, &policy, &RecordingSleeper::default()).unwrap();
            let titles: Vec<&str> = out.results.iter().map(|r| r.paper.title.as_str()).collect();
            assert_eq!(titles, refs);
        }
    }

    fn result(title: &str, rel: f64, flag: QualityFlag) -> RetrievalResult {
        let mut paper = PaperRecord::new(title, Identifiers::default()).unwrap().with_relevance(rel).unwrap();
        paper.quality_flag = Some(flag);
        RetrievalResult {
            paper,
            query_id: "core_task#0".into(),
            scope: QueryScope::CoreTask,
            scope_key: "core_task".into(),
            verdict: VerificationVerdict::default(),
            relevance_score: rel,
        }
    }

    #[test]
    fn filter_scope_layers() {
        let target = PaperRecord::new("Target Paper", Identifiers::default()).unwrap();
        let results = vec![
            result("A", 0.4, QualityFlag::Perfect),
            result("a", 0.9, QualityFlag::Perfect),
            result("B", 0.8, QualityFlag::Partial),
            result("target paper", 0.99, QualityFlag::Perfect),
            result("C", 0.4, QualityFlag::Perfect),
            result("D", 0.1, QualityFlag::No),
        ];
        let out = filter_scope(&results, 50, &target);
        assert_eq!(
            out.stats,
            FilterStats {
                raw: 6,
                after_quality: 4,
                after_dedup: 3,
                after_self_reference: 2,
                after_temporal: 2,
                selected: 2
            }
        );
        let titles: Vec<&str> = out.papers.iter().map(|p| p.title.as_str()).collect();
        assert_eq!(titles, ["a", "C"]);
        assert_eq!(out.partial.len(), 1);
    }

    #[test]
    fn temporal_filter_uses_shared_precision() {
        let mut target = PaperRecord::new("T", Identifiers::default()).unwrap();
        target.publication_date = Some(PublicationDate::parse_iso("2024-03", DateSource::Url).unwrap());
        let dated = |title: &str, date: Option<&str>| {
            let mut r = result(title, 0.5, QualityFlag::Perfect);
            r.paper.publication_date = date.map(|d| PublicationDate::parse_iso(d, DateSource::Metadata).unwrap());
            r
        };
        let results = vec![
            dated("same month", Some("2024-03-30")),
            dated("later", Some("2024-04")),
            dated("same year", Some("2024")),
            dated("unknown", None),
        ];
        let out = filter_scope(&results, 10, &target);
        assert_eq!(out.stats.after_temporal, 3);
        assert!(out.papers.iter().all(|p| p.title != "later"));
    }

    #[test]
    fn url_self_reference() {
        let mut target = PaperRecord::new("T", Identifiers::default()).unwrap();
        target.url = Some("https://arxiv.org/abs/2403.12345v2".into());
        let mut r = result("Other Title", 0.5, QualityFlag::Perfect);
        r.paper.url = Some("http://www.arxiv.org/pdf/2403.12345.pdf".into());
        assert_eq!(filter_scope(&[r], 10, &target).stats.after_self_reference, 0);
    }

    #[test]
    fn ties_break_by_canonical_id() {
        let target = PaperRecord::new("T", Identifiers::default()).unwrap();
        let results: Vec<_> = ["x", "y", "z"].iter().map(|t| result(t, 0.5, QualityFlag::Perfect)).collect();
        let out = filter_scope(&results, 2, &target);
        let mut ids: Vec<String> = results.iter().map(|r| r.paper.canonical_id.to_string()).collect();
        ids.sort();
        let got: Vec<String> = out.papers.iter().map(|p| p.canonical_id.to_string()).collect();
        assert_eq!(got, ids[..2]);
    }

    #[test]
    fn cross_scope_prefers_core_and_merges_doi() {
        let core_paper = {
            let mut p = PaperRecord::new("Shared Work", Identifiers::default()).unwrap();
            p.identifiers.arxiv_id = Some("2401.00001".into());
            p.refresh_canonical_id();
            p
        };
        let contrib_paper = PaperRecord::new(
            "Shared Work",
            Identifiers {
                doi: Some("10.1/shared".into()),
                ..Default::default()
            },
        )
        .unwrap();
        let other = PaperRecord::new("Other", Identifiers::default()).unwrap();
        let set = cross_scope_dedup(
            vec![core_paper],
            vec![ScopeList {
                contribution_id: "contribution_1".into(),
                papers: vec![contrib_paper, other],
            }],
        );
        assert_eq!(set.unified.len(), 2);
        assert_eq!(set.unified[0].paper.canonical_id.to_string(), "doi:10.1/shared");
        assert_eq!(set.unified[0].scopes, ["core_task", "contribution_1"]);
        assert_eq!(set.contribution("contribution_1")[0].canonical_id, set.core_task[0].canonical_id);
        assert_eq!(set.stats.removed, 1);
    }

    #[test]
    fn query_ids_are_per_scope() {
        let mut qs = set(&["a", "b", "c"]);
        qs.contribution_queries.push(ContributionQueries {
            contribution_id: "contribution_1".into(),
            queries: vec![SearchQuery {
                text: "Find papers about x".into(),
                scope: QueryScope::Contribution,
                kind: QueryKind::Primary,
                contribution_id: Some("contribution_1".into()),
            }],
        });
        let ids: Vec<String> = query_ids(&qs).into_iter().map(|(id, _)| id).collect();
        assert_eq!(ids, ["core_task#0", "core_task#1", "core_task#2", "contribution_1#0"]);
    }
}
