//! Phase III: taxonomy construction, one-to-N comparisons, similarity
//! detection, and assembly of the complete report.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock, RwLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tracing::{info, warn};

use crate::error::{Error, Result};
use crate::extraction::{ContributionClaim, Phase1Output};
use crate::llm::{LlmClient, LlmRequest, Task};
use crate::paper::{CanonicalId, PaperRecord};
use crate::pool::parallel_map;
use crate::prompts;
use crate::retrieval::Phase2Output;
use crate::structured::parse_structured_output;
use crate::taxonomy::{
    build_taxonomy, PositionMode, RepairOutcome, RepairStatus, StructuralPosition, TaxonomyNode, TaxonomyPaper,
};
use crate::text::{tokenize, truncate_words, TokenStream};
use crate::verification::{
    downgrade_unverified, filter_segments, verify_quote_tokens, verify_segment_tokens, QuoteLocation, SegmentType,
    SimilaritySegment, VerifyConfig,
};

pub const MAX_QUOTE_WORDS: usize = 90;
pub const DUPLICATE_ADVISORY: &str =
    "This paper is highly similar to the original paper; it may be a variant or near-duplicate. Please manually verify.";
pub const MODULES: [&str; 7] = [
    "original_paper",
    "core_task_survey",
    "contribution_analysis",
    "core_task_comparisons",
    "references",
    "textual_similarity",
    "metadata",
];
const INTRO_WORDS: usize = 600;
const SIBLING_CONTEXT_WORDS: usize = 1500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefutationStatus {
    CanRefute,
    CannotRefute,
    Unclear,
}

impl RefutationStatus {
    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_lowercase().replace([' ', '-'], "_").as_str() {
            "can_refute" => Some(RefutationStatus::CanRefute),
            "cannot_refute" | "can_not_refute" => Some(RefutationStatus::CannotRefute),
            "unclear" => Some(RefutationStatus::Unclear),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparisonMode {
    Fulltext,
    Abstract,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidencePair {
    pub original_quote: String,
    pub original_paragraph_label: String,
    pub original_location: QuoteLocation,
    pub candidate_quote: String,
    pub candidate_paragraph_label: String,
    pub candidate_location: QuoteLocation,
    pub rationale: String,
}

impl EvidencePair {
    pub fn is_verified(&self) -> bool {
        self.original_location.found && self.candidate_location.found
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefutationEvidence {
    pub summary: String,
    pub evidence_pairs: Vec<EvidencePair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionComparison {
    pub contribution_id: String,
    pub contribution_name: String,
    pub canonical_id: CanonicalId,
    pub candidate_paper_title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_paper_url: Option<String>,
    pub comparison_mode: ComparisonMode,
    pub refutation_status: RefutationStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refutation_evidence: Option<RefutationEvidence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brief_note: Option<String>,
    #[serde(default)]
    pub similarity_segments: Vec<SimilaritySegment>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub downgraded: bool,
}

impl ContributionComparison {
    pub fn has_verified_pair(&self) -> bool {
        self.refutation_evidence
            .as_ref()
            .is_some_and(|e| e.evidence_pairs.iter().any(EvidencePair::is_verified))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoreComparisonMode {
    Fulltext,
    AbstractFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreTaskComparison {
    pub canonical_id: CanonicalId,
    pub candidate_paper_title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_paper_url: Option<String>,
    pub relationship: String,
    pub comparison_mode: CoreComparisonMode,
    pub is_duplicate_variant: bool,
    pub brief_comparison: String,
    #[serde(default)]
    pub similarity_segments: Vec<SimilaritySegment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtopicSummary {
    pub leaf_name: String,
    pub sibling_subtopics: Vec<String>,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationRecord {
    pub leaf_name: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreTaskComparisons {
    pub mode: PositionMode,
    pub path: Vec<String>,
    pub comparisons: Vec<CoreTaskComparison>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtopic_summary: Option<SubtopicSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub isolation: Option<IsolationRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub index: usize,
    pub alias: String,
    pub citation: String,
    pub canonical_id: CanonicalId,
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<i32>,
    pub is_original: bool,
}

/// Short alias from a title: the part before a colon when it is at most four
/// words, otherwise the first word.
pub fn citation_alias(title: &str) -> String {
    let head = match title.split_once(':') {
        Some((h, _)) if !h.trim().is_empty() && h.split_whitespace().count() <= 4 => h.trim().to_string(),
        _ => title.split_whitespace().next().unwrap_or("").to_string(),
    };
    let cleaned: String = head
        .chars()
        .filter(|c| c.is_alphanumeric() || matches!(c, '-' | ' ' | '.'))
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    let cleaned = cleaned.trim_matches(|c: char| c == '-' || c == '.').to_string();
    if cleaned.is_empty() {
        "Paper".to_string()
    } else {
        cleaned
    }
}

/// Index 0 is the target; candidates follow in the given order.
pub fn build_references(target: &PaperRecord, candidates: &[&PaperRecord]) -> Vec<Reference> {
    std::iter::once(target)
        .chain(candidates.iter().copied())
        .enumerate()
        .map(|(index, p)| {
            let alias = citation_alias(&p.title);
            Reference {
                index,
                citation: format!("{alias}[{index}]"),
                alias,
                canonical_id: p.canonical_id.clone(),
                title: p.title.clone(),
                url: p.url.clone(),
                year: p.publication_date.as_ref().map(|d| d.year),
                is_original: index == 0,
            }
        })
        .collect()
}

fn citation_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[(\d+)\]").expect("valid regex"))
}

/// Every bracketed citation index in `text`, in order of appearance.
pub fn cited_indices(text: &str) -> Vec<usize> {
    citation_regex()
        .captures_iter(text)
        .filter_map(|c| c[1].parse().ok())
        .collect()
}

/// Removes `[k]` markers whose index is not allowed, leaving the alias text.
/// Repeats until stable, since a removal can join brackets into a new marker.
pub fn strip_disallowed_citations(text: &str, allowed: &BTreeSet<usize>) -> String {
    let mut out = text.to_string();
    loop {
        let next = citation_regex()
            .replace_all(&out, |c: &regex::Captures<'_>| match c[1].parse::<usize>() {
                Ok(k) if allowed.contains(&k) => c[0].to_string(),
                _ => String::new(),
            })
            .into_owned();
        if next == out {
            return out;
        }
        out = next;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexedPaper {
    pub index: usize,
    pub alias: String,
    pub canonical_id: CanonicalId,
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leaf: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brief_one_liner: Option<String>,
    pub is_original: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OriginalPaper {
    pub canonical_id: CanonicalId,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub publication_date: Option<String>,
    pub core_task: String,
    pub contributions: Vec<ContributionClaim>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreTaskSurvey {
    pub taxonomy: TaxonomyNode,
    pub taxonomy_status: RepairStatus,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub taxonomy_diagnostics: Vec<String>,
    pub taxonomy_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<StructuralPosition>,
    pub narrative: String,
    pub papers_index: Vec<IndexedPaper>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContributionStats {
    pub candidates_examined: usize,
    pub can_refute: usize,
    pub non_refutable_or_unclear: usize,
}

impl ContributionStats {
    pub fn of(comparisons: &[ContributionComparison]) -> Self {
        let can_refute = comparisons
            .iter()
            .filter(|c| c.refutation_status == RefutationStatus::CanRefute)
            .count();
        ContributionStats {
            candidates_examined: comparisons.len(),
            can_refute,
            non_refutable_or_unclear: comparisons.len() - can_refute,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.can_refute + self.non_refutable_or_unclear == self.candidates_examined
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionResult {
    pub contribution_id: String,
    pub contribution_name: String,
    pub author_claim_text: String,
    pub statistics: ContributionStats,
    pub comparisons: Vec<ContributionComparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionAnalysis {
    pub overall_assessment: Vec<String>,
    pub contributions: Vec<ContributionResult>,
    pub statistics: ContributionStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityEntry {
    pub canonical_id: CanonicalId,
    pub candidate_paper_title: String,
    pub citation: String,
    pub segments: Vec<SimilaritySegment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub generated_at: String,
    pub tool_version: String,
    pub taxonomy_status: RepairStatus,
    pub candidates_examined: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

/// The complete structured report. Field names are the seven module names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyReport {
    pub original_paper: OriginalPaper,
    pub core_task_survey: CoreTaskSurvey,
    pub contribution_analysis: ContributionAnalysis,
    pub core_task_comparisons: CoreTaskComparisons,
    pub references: Vec<Reference>,
    pub textual_similarity: Vec<SimilarityEntry>,
    pub metadata: ReportMetadata,
}

impl NoveltyReport {
    /// Parses a report, naming the first absent module.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::invalid("report is not a JSON object"))?;
        if let Some(missing) = MODULES.iter().find(|m| !obj.contains_key(**m)) {
            return Err(Error::MissingModule(missing));
        }
        let report: NoveltyReport = serde_json::from_value(value)?;
        report.check()?;
        Ok(report)
    }

    /// Citation resolution and statistics identity.
    pub fn check(&self) -> Result<()> {
        let known: BTreeSet<usize> = self.references.iter().map(|r| r.index).collect();
        let mut texts: Vec<&str> = vec![&self.core_task_survey.narrative];
        texts.extend(self.contribution_analysis.overall_assessment.iter().map(String::as_str));
        for k in texts.iter().flat_map(|t| cited_indices(t)) {
            if !known.contains(&k) {
                return Err(Error::DanglingCitation(k));
            }
        }
        for c in &self.contribution_analysis.contributions {
            if !c.statistics.is_consistent() || c.statistics != ContributionStats::of(&c.comparisons) {
                return Err(Error::invalid(format!("statistics mismatch for contribution {}", c.contribution_id)));
            }
        }
        Ok(())
    }

    pub fn reference_for(&self, id: &CanonicalId) -> Option<&Reference> {
        self.references.iter().find(|r| &r.canonical_id == id)
    }
}

/// Segments found between the target and one candidate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityResult {
    pub segments: Vec<SimilaritySegment>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

type SimilarityKey = (String, String);

/// Per-run cache keyed by (target id, candidate id). Readers share a lock;
/// each key is computed by exactly one caller.
#[derive(Debug, Default)]
pub struct SimilarityCache {
    entries: RwLock<HashMap<SimilarityKey, Arc<OnceLock<Arc<SimilarityResult>>>>>,
    computed: AtomicUsize,
}

impl SimilarityCache {
    pub fn get(&self, target: &CanonicalId, candidate: &CanonicalId) -> Option<Arc<SimilarityResult>> {
        let key = (target.to_string(), candidate.to_string());
        self.entries.read().unwrap().get(&key).and_then(|c| c.get().cloned())
    }

    pub fn get_or_compute(
        &self,
        target: &CanonicalId,
        candidate: &CanonicalId,
        compute: impl FnOnce() -> SimilarityResult,
    ) -> Arc<SimilarityResult> {
        let key = (target.to_string(), candidate.to_string());
        let cell = {
            let read = self.entries.read().unwrap();
            read.get(&key).cloned()
        };
        let cell = cell.unwrap_or_else(|| self.entries.write().unwrap().entry(key).or_default().clone());
        cell.get_or_init(|| {
            self.computed.fetch_add(1, Ordering::SeqCst);
            Arc::new(compute())
        })
        .clone()
    }

    /// Number of detections actually run.
    pub fn computed(&self) -> usize {
        self.computed.load(Ordering::SeqCst)
    }
}

/// Target-side text shared by every comparison, tokenized once.
pub struct TargetContext<'a> {
    pub paper: &'a PaperRecord,
    pub text: &'a str,
    pub tokens: TokenStream,
}

impl<'a> TargetContext<'a> {
    pub fn new(paper: &'a PaperRecord) -> Self {
        let text = paper
            .full_text
            .as_ref()
            .filter(|d| !d.is_empty())
            .map_or(paper.abstract_text.as_str(), |d| d.raw.as_str());
        TargetContext {
            paper,
            text,
            tokens: tokenize(text),
        }
    }
}

fn candidate_text(candidate: &PaperRecord) -> (&str, ComparisonMode) {
    match candidate.full_text.as_ref().filter(|d| !d.is_empty()) {
        Some(d) => (d.raw.as_str(), ComparisonMode::Fulltext),
        None => (candidate.abstract_text.as_str(), ComparisonMode::Abstract),
    }
}

fn str_field(obj: &Map<String, Value>, key: &str) -> String {
    obj.get(key).and_then(Value::as_str).unwrap_or("").trim().to_string()
}

fn capped(quote: &str) -> String {
    truncate_words(quote, MAX_QUOTE_WORDS).unwrap_or_else(|| quote.trim().to_string())
}

fn contributions_text(claims: &[&ContributionClaim]) -> String {
    claims
        .iter()
        .enumerate()
        .map(|(i, c)| {
            format!(
                "{}. {}\n   Claim: {}\n   Description: {}",
                i + 1,
                c.name,
                c.author_claim_text,
                c.description
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// One inference call comparing `candidate` against `claims`, with every
/// evidence quote capped and verified against its source text.
pub fn compare_contribution(
    target: &TargetContext<'_>,
    candidate: &PaperRecord,
    citation: &str,
    claims: &[&ContributionClaim],
    llm: &dyn LlmClient,
    verify: &VerifyConfig,
) -> Vec<ContributionComparison> {
    let (cand_text, mode) = candidate_text(candidate);
    let n = claims.len().to_string();
    let ct = contributions_text(claims);
    let user = prompts::CONTRIBUTION_COMPARISON.render_user(&[
        ("title", &candidate.title),
        ("citation", citation),
        ("n", &n),
        ("contributions_text", &ct),
        ("orig_text", target.text),
        ("cand_text", cand_text),
    ]);
    let request = LlmRequest::new(Task::ContributionComparison, prompts::CONTRIBUTION_COMPARISON.system, user, 0.0);
    let entry = |claim: &ContributionClaim, status, evidence, note: Option<String>| ContributionComparison {
        contribution_id: claim.id.clone(),
        contribution_name: claim.name.clone(),
        canonical_id: candidate.canonical_id.clone(),
        candidate_paper_title: candidate.title.clone(),
        candidate_paper_url: candidate.url.clone(),
        comparison_mode: mode,
        refutation_status: status,
        refutation_evidence: evidence,
        brief_note: note,
        similarity_segments: Vec::new(),
        downgraded: false,
    };
    let failed = |reason: String| -> Vec<ContributionComparison> {
        warn!(candidate = %candidate.canonical_id, %reason, "contribution comparison failed");
        claims
            .iter()
            .map(|c| entry(c, RefutationStatus::Unclear, None, Some(format!("Comparison unavailable: {reason}"))))
            .collect()
    };
    let raw = match llm.complete(&request) {
        Ok(r) => r,
        Err(e) => return failed(e.to_string()),
    };
    let analyses: Vec<Map<String, Value>> = match parse_structured_output(&raw) {
        Ok(p) => match p.value.get("contribution_analyses").and_then(Value::as_array) {
            Some(items) => items.iter().filter_map(|v| v.as_object().cloned()).collect(),
            None => return failed("output lacks contribution_analyses".into()),
        },
        Err(e) => return failed(format!("unparseable output ({e})")),
    };
    let cand_tokens = tokenize(cand_text);
    let mut used = vec![false; analyses.len()];
    claims
        .iter()
        .enumerate()
        .map(|(i, claim)| {
            let wanted = claim.name.trim().to_lowercase();
            let pick = analyses
                .iter()
                .position(|a| str_field(a, "contribution_name").to_lowercase() == wanted)
                .filter(|k| !used[*k])
                .or_else(|| (i < analyses.len() && !used[i]).then_some(i));
            let Some(k) = pick else {
                return entry(claim, RefutationStatus::Unclear, None, Some("No analysis returned for this contribution.".into()));
            };
            used[k] = true;
            let a = &analyses[k];
            let status_text = str_field(a, "refutation_status");
            let Some(status) = RefutationStatus::parse(&status_text) else {
                return entry(
                    claim,
                    RefutationStatus::Unclear,
                    None,
                    Some(format!("Unrecognized refutation status `{status_text}`.")),
                );
            };
            if status != RefutationStatus::CanRefute {
                let note = str_field(a, "brief_note");
                let note = if note.is_empty() { "No explanation provided.".to_string() } else { note };
                return entry(claim, status, None, Some(note));
            }
            let ev = a.get("refutation_evidence").and_then(Value::as_object);
            let summary = ev.map(|e| str_field(e, "summary")).unwrap_or_default();
            let pairs = ev
                .and_then(|e| e.get("evidence_pairs"))
                .and_then(Value::as_array)
                .map(|ps| {
                    ps.iter()
                        .filter_map(Value::as_object)
                        .map(|p| {
                            let original_quote = capped(&str_field(p, "original_quote"));
                            let candidate_quote = capped(&str_field(p, "candidate_quote"));
                            EvidencePair {
                                original_location: verify_quote_tokens(&original_quote, &target.tokens, verify).location,
                                candidate_location: verify_quote_tokens(&candidate_quote, &cand_tokens, verify).location,
                                original_quote,
                                candidate_quote,
                                original_paragraph_label: str_field(p, "original_paragraph_label"),
                                candidate_paragraph_label: str_field(p, "candidate_paragraph_label"),
                                rationale: str_field(p, "rationale"),
                            }
                        })
                        .collect()
                })
                .unwrap_or_default();
            entry(claim, status, Some(RefutationEvidence { summary, evidence_pairs: pairs }), None)
        })
        .collect()
}

/// Segment detection for one candidate, run at most once per cache key.
pub fn detect_similarity(
    target: &TargetContext<'_>,
    candidate: &PaperRecord,
    llm: &dyn LlmClient,
    cache: &SimilarityCache,
    verify: &VerifyConfig,
) -> Arc<SimilarityResult> {
    cache.get_or_compute(&target.paper.canonical_id, &candidate.canonical_id, || {
        let Some(doc) = candidate.full_text.as_ref().filter(|d| !d.is_empty()) else {
            return SimilarityResult {
                segments: Vec::new(),
                diagnostics: vec!["no full text; similarity not checked".into()],
            };
        };
        let user = prompts::SIMILARITY.render_user(&[("paper_a", target.text), ("paper_b", &doc.raw)]);
        let request = LlmRequest::new(Task::Similarity, prompts::SIMILARITY.system, user, 0.0);
        let parsed = llm
            .complete(&request)
            .map_err(|e| e.to_string())
            .and_then(|raw| parse_structured_output(&raw).map_err(|e| e.to_string()));
        let value = match parsed {
            Ok(p) => p.value,
            Err(e) => {
                return SimilarityResult {
                    segments: Vec::new(),
                    diagnostics: vec![format!("similarity detection failed: {e}")],
                }
            }
        };
        let items = value
            .get("plagiarism_segments")
            .and_then(Value::as_array)
            .cloned()
            .or_else(|| value.as_array().cloned())
            .unwrap_or_default();
        let cand_tokens = tokenize(&doc.raw);
        let mut diagnostics = Vec::new();
        let verified: Vec<SimilaritySegment> = items
            .iter()
            .filter_map(Value::as_object)
            .enumerate()
            .filter_map(|(i, o)| {
                let kind = str_field(o, "plagiarism_type").to_lowercase();
                let location = str_field(o, "location");
                let seg = SimilaritySegment {
                    segment_id: o.get("segment_id").and_then(Value::as_u64).map_or(i as u32 + 1, |v| v as u32),
                    location: if location.is_empty() { "unknown".into() } else { location },
                    original_text: str_field(o, "original_text"),
                    candidate_text: str_field(o, "candidate_text"),
                    segment_type: if kind.contains("para") { SegmentType::Paraphrase } else { SegmentType::Direct },
                    rationale: str_field(o, "rationale"),
                    verified: false,
                };
                let seg = verify_segment_tokens(&seg, &target.tokens, &cand_tokens, verify);
                if !seg.verified {
                    diagnostics.push(format!("segment {} rejected", seg.segment_id));
                }
                seg.verified.then_some(seg)
            })
            .collect();
        SimilarityResult {
            segments: filter_segments(verified),
            diagnostics,
        }
    })
}

fn papers_brief(ids: &[String], lookup: &HashMap<String, &PaperRecord>) -> Vec<String> {
    ids.iter()
        .map(|id| lookup.get(id).map_or_else(|| id.clone(), |p| p.title.clone()))
        .collect()
}

fn taxonomy_context(position: &StructuralPosition, leaf: Option<&TaxonomyNode>) -> String {
    let mut out = format!("Path of the original paper: {}.", position.path.join(" > "));
    if let Some(leaf) = leaf {
        if let Some(s) = &leaf.scope_note {
            out.push_str(&format!(" Leaf scope: {s}"));
        }
        if let Some(e) = &leaf.exclude_note {
            out.push_str(&format!(" Leaf excludes: {e}"));
        }
    }
    out
}

fn find_leaf<'t>(tax: &'t TaxonomyNode, name: &str) -> Option<&'t TaxonomyNode> {
    let mut found = None;
    tax.walk(&mut |n, _| {
        if found.is_none() && n.subtopics.is_none() && n.name == name {
            found = Some(n);
        }
    });
    found
}

fn head_words(text: &str, n: usize) -> String {
    truncate_words(text, n).unwrap_or_else(|| text.to_string())
}

/// Sibling distinctions, one categorical subtopic comparison, or an isolation record.
pub fn compare_core_task(
    position: &StructuralPosition,
    taxonomy: &TaxonomyNode,
    core_task: &str,
    target: &TargetContext<'_>,
    candidates: &HashMap<String, &PaperRecord>,
    references: &[Reference],
    llm: &dyn LlmClient,
    workers: usize,
) -> CoreTaskComparisons {
    let leaf_name = position.path.last().cloned().unwrap_or_default();
    let leaf = find_leaf(taxonomy, &leaf_name);
    let mut out = CoreTaskComparisons {
        mode: position.mode,
        path: position.path.clone(),
        comparisons: Vec::new(),
        subtopic_summary: None,
        isolation: None,
        diagnostics: Vec::new(),
    };
    match position.mode {
        PositionMode::Sibling => {
            let system = prompts::SIBLING_DISTINCTION.render_system(&[
                ("core_task_text", core_task),
                ("taxonomy_context_text", &taxonomy_context(position, leaf)),
            ]);
            let siblings: Vec<&PaperRecord> = position
                .siblings
                .iter()
                .filter_map(|id| {
                    let p = candidates.get(id).copied();
                    if p.is_none() {
                        warn!(%id, "sibling not among candidates");
                    }
                    p
                })
                .collect();
            let results = parallel_map(&siblings, workers, |cand| {
                sibling_comparison(&system, target, cand, references, llm)
            });
            for (cmp, diag) in results {
                out.comparisons.push(cmp);
                out.diagnostics.extend(diag);
            }
        }
        PositionMode::SubtopicSiblings => {
            let describe = |n: &TaxonomyNode| {
                let mut ids = Vec::new();
                n.walk(&mut |m, _| ids.extend(m.paper_ids().iter().cloned()));
                json!({
                    "name": n.name,
                    "scope_note": n.scope_note,
                    "exclude_note": n.exclude_note,
                    "papers": papers_brief(&ids, candidates),
                })
            };
            let user = json!({
                "core_task": core_task,
                "original_paper": {"title": target.paper.title, "abstract": target.paper.abstract_text},
                "original_leaf": leaf.map(describe),
                "sibling_subtopics": position.sibling_subtopics.iter().map(describe).collect::<Vec<_>>(),
            })
            .to_string();
            let request = LlmRequest::new(Task::SubtopicComparison, prompts::SUBTOPIC_COMPARISON.system, user, 0.0);
            let summary = match llm.complete(&request) {
                Ok(raw) => match parse_structured_output(&raw) {
                    Ok(p) => p
                        .value
                        .get("summary")
                        .and_then(Value::as_str)
                        .map(str::to_string)
                        .unwrap_or_else(|| raw.trim().to_string()),
                    Err(_) => raw.trim().to_string(),
                },
                Err(e) => {
                    out.diagnostics.push(format!("subtopic comparison failed: {e}"));
                    String::new()
                }
            };
            out.subtopic_summary = Some(SubtopicSummary {
                leaf_name,
                sibling_subtopics: position.sibling_subtopics.iter().map(|n| n.name.clone()).collect(),
                summary,
            });
        }
        PositionMode::Isolated => {
            info!(leaf = %leaf_name, "original paper is isolated in the taxonomy; no core-task comparison");
            out.isolation = Some(IsolationRecord {
                leaf_name,
                reason: "The leaf holds no other papers and its parent has no other subtopics.".into(),
            });
        }
    }
    out
}

fn sibling_comparison(
    system: &str,
    target: &TargetContext<'_>,
    cand: &PaperRecord,
    references: &[Reference],
    llm: &dyn LlmClient,
) -> (CoreTaskComparison, Option<String>) {
    let citation = references
        .iter()
        .find(|r| r.canonical_id == cand.canonical_id)
        .map(|r| r.citation.clone())
        .unwrap_or_default();
    let full = cand.full_text.as_ref().filter(|d| !d.is_empty());
    let mode = if full.is_some() { CoreComparisonMode::Fulltext } else { CoreComparisonMode::AbstractFallback };
    let mut original = json!({"title": target.paper.title, "abstract": target.paper.abstract_text});
    let mut candidate = json!({"title": cand.title, "citation": citation, "abstract": cand.abstract_text});
    if let Some(d) = full {
        original["text"] = json!(head_words(target.text, SIBLING_CONTEXT_WORDS));
        candidate["text"] = json!(head_words(&d.raw, SIBLING_CONTEXT_WORDS));
    }
    let user = json!({"original": original, "candidate": candidate}).to_string();
    let request = LlmRequest::new(Task::SiblingDistinction, system, user, 0.0);
    let parsed = llm
        .complete(&request)
        .map_err(|e| e.to_string())
        .and_then(|raw| parse_structured_output(&raw).map_err(|e| e.to_string()));
    let base = |dup: bool, text: String| CoreTaskComparison {
        canonical_id: cand.canonical_id.clone(),
        candidate_paper_title: cand.title.clone(),
        candidate_paper_url: cand.url.clone(),
        relationship: "sibling".into(),
        comparison_mode: mode,
        is_duplicate_variant: dup,
        brief_comparison: text,
        similarity_segments: Vec::new(),
    };
    match parsed {
        Ok(p) => {
            let dup = p.value.get("is_duplicate_variant").and_then(Value::as_bool).unwrap_or(false);
            let text = p.value.get("brief_comparison").and_then(Value::as_str).unwrap_or("").trim().to_string();
            if dup {
                (base(true, DUPLICATE_ADVISORY.into()), None)
            } else if text.is_empty() {
                let msg = format!("empty sibling comparison for {}", cand.canonical_id);
                (base(false, "Comparison unavailable.".into()), Some(msg))
            } else {
                (base(false, text), None)
            }
        }
        Err(e) => {
            let msg = format!("sibling comparison failed for {}: {e}", cand.canonical_id);
            (base(false, "Comparison unavailable.".into()), Some(msg))
        }
    }
}

/// Calls `request`, re-requesting once when the output cites an index outside
/// `allowed`; remaining violations are stripped.
fn cited_generation(
    llm: &dyn LlmClient,
    request: LlmRequest,
    allowed: &BTreeSet<usize>,
    extract: impl Fn(&Value) -> Option<Vec<String>>,
    diagnostics: &mut Vec<String>,
) -> Vec<String> {
    let attempt = |req: &LlmRequest| -> std::result::Result<Vec<String>, String> {
        let raw = llm.complete(req).map_err(|e| e.to_string())?;
        let parsed = parse_structured_output(&raw).map_err(|e| e.to_string())?;
        extract(&parsed.value).ok_or_else(|| "output lacks the expected key".to_string())
    };
    let bad = |texts: &[String]| -> Vec<usize> {
        let mut v: Vec<usize> = texts
            .iter()
            .flat_map(|t| cited_indices(t))
            .filter(|k| !allowed.contains(k))
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let task = request.task;
    let first = match attempt(&request) {
        Ok(t) => t,
        Err(e) => {
            diagnostics.push(format!("{task} generation failed: {e}"));
            return Vec::new();
        }
    };
    let violations = bad(&first);
    if violations.is_empty() {
        return first;
    }
    let mut retry = request.clone();
    retry.user_prompt.push_str(&format!(
        "\n\nYour previous answer cited indices {violations:?}, which are not allowed. Cite only {:?}.",
        allowed.iter().collect::<Vec<_>>()
    ));
    let second = attempt(&retry).unwrap_or_else(|e| {
        diagnostics.push(format!("{task} re-request failed: {e}"));
        first.clone()
    });
    let still = bad(&second);
    if still.is_empty() {
        return second;
    }
    diagnostics.push(format!("{task}: stripped disallowed citations {still:?}"));
    second.iter().map(|t| strip_disallowed_citations(t, allowed)).collect()
}

fn citation_index_json(references: &[Reference], allowed: &BTreeSet<usize>) -> Value {
    let mut map = Map::new();
    for r in references.iter().filter(|r| allowed.contains(&r.index)) {
        map.insert(
            r.canonical_id.to_string(),
            json!({"alias": r.alias, "index": r.index, "year": r.year, "is_original": r.is_original}),
        );
    }
    Value::Object(map)
}

/// Phase III configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase3Config {
    pub concurrency: usize,
    pub verify: VerifyConfig,
    pub allow_llm_repair: bool,
    /// Stamped into the report; injected for reproducible output.
    pub generated_at: String,
    pub tool_version: String,
}

impl Default for Phase3Config {
    fn default() -> Self {
        Phase3Config {
            concurrency: 1,
            verify: VerifyConfig::default(),
            allow_llm_repair: true,
            generated_at: "1970-01-01T00:00:00Z".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

pub struct Phase3Input<'a> {
    pub target: &'a PaperRecord,
    pub phase1: &'a Phase1Output,
    pub phase2: &'a Phase2Output,
}

/// Runs taxonomy, comparisons, similarity, downgrade, narrative and assessment,
/// then assembles the report.
pub fn run_phase3(input: Phase3Input<'_>, llm: &dyn LlmClient, config: &Phase3Config) -> Result<NoveltyReport> {
    let Phase3Input { target, phase1, phase2 } = input;
    let ctx = TargetContext::new(target);
    let candidates = &phase2.candidates;
    let unified: Vec<&PaperRecord> = candidates.unified.iter().map(|u| &u.paper).collect();
    let references = build_references(target, &unified);
    let lookup: HashMap<String, &PaperRecord> = unified.iter().map(|p| (p.canonical_id.to_string(), *p)).collect();
    let index_of: HashMap<String, usize> = references.iter().map(|r| (r.canonical_id.to_string(), r.index)).collect();
    let target_id = target.canonical_id.to_string();
    let mut diagnostics: Vec<String> = Vec::new();
    let mut flags: Vec<String> = Vec::new();

    // Taxonomy over the target plus the core-task candidates.
    let mut tax_papers = vec![TaxonomyPaper::from_record(target, 0)];
    tax_papers.extend(
        candidates
            .core_task
            .iter()
            .enumerate()
            .map(|(i, p)| TaxonomyPaper::from_record(p, i + 1)),
    );
    let build = build_taxonomy(&phase1.core_task.text, &tax_papers, Some(&target_id), llm, config.allow_llm_repair);
    let (outcome, taxonomy_hash) = match build {
        Ok(b) => (b.outcome, b.content_hash),
        Err(e) => {
            let tax = TaxonomyNode::root(&phase1.core_task.text, Vec::new());
            let hash = tax.content_hash();
            let outcome = RepairOutcome {
                taxonomy: tax,
                status: RepairStatus::NeedsReview,
                diagnostics: vec![format!("taxonomy not built: {e}")],
                raw_output: None,
            };
            (outcome, hash)
        }
    };
    if outcome.status == RepairStatus::NeedsReview {
        flags.push("taxonomy_needs_review".into());
    }
    let taxonomy = &outcome.taxonomy;
    let position = match crate::taxonomy::structural_position(taxonomy, &target_id) {
        Ok(p) => Some(p),
        Err(e) => {
            diagnostics.push(format!("structural position unavailable: {e}"));
            None
        }
    };

    // Core-task comparisons.
    let core_comparisons = match &position {
        Some(pos) => compare_core_task(
            pos,
            taxonomy,
            &phase1.core_task.text,
            &ctx,
            &lookup,
            &references,
            llm,
            config.concurrency,
        ),
        None => CoreTaskComparisons {
            mode: PositionMode::Isolated,
            path: Vec::new(),
            comparisons: Vec::new(),
            subtopic_summary: None,
            isolation: Some(IsolationRecord {
                leaf_name: String::new(),
                reason: "The original paper could not be located in the taxonomy.".into(),
            }),
            diagnostics: Vec::new(),
        },
    };

    // Contribution comparisons: each candidate is compared against the claims that retrieved it.
    let jobs: Vec<(&PaperRecord, Vec<&ContributionClaim>)> = candidates
        .unified
        .iter()
        .filter_map(|u| {
            let claims: Vec<&ContributionClaim> = phase1
                .contributions
                .iter()
                .filter(|c| u.scopes.iter().any(|s| s == &c.id))
                .collect();
            (!claims.is_empty()).then_some((&u.paper, claims))
        })
        .collect();
    let results = parallel_map(&jobs, config.concurrency, |(cand, claims)| {
        let citation = references
            .iter()
            .find(|r| r.canonical_id == cand.canonical_id)
            .map_or("", |r| r.citation.as_str());
        compare_contribution(&ctx, cand, citation, claims, llm, &config.verify)
    });
    let mut by_pair: HashMap<(String, String), ContributionComparison> = HashMap::new();
    for c in results.into_iter().flatten() {
        by_pair.insert((c.contribution_id.clone(), c.canonical_id.to_string()), c);
    }

    // Similarity detection, once per candidate with full text.
    let mut sim_targets: Vec<&PaperRecord> = Vec::new();
    let mut seen = BTreeSet::new();
    for p in jobs
        .iter()
        .map(|(p, _)| *p)
        .chain(core_comparisons.comparisons.iter().filter_map(|c| lookup.get(&c.canonical_id.to_string()).copied()))
    {
        if p.full_text.as_ref().is_some_and(|d| !d.is_empty()) && seen.insert(p.canonical_id.to_string()) {
            sim_targets.push(p);
        }
    }
    let cache = SimilarityCache::default();
    let sims = parallel_map(&sim_targets, config.concurrency, |p| {
        detect_similarity(&ctx, p, llm, &cache, &config.verify)
    });
    let sim_by_id: HashMap<String, Arc<SimilarityResult>> = sim_targets
        .iter()
        .zip(sims)
        .map(|(p, r)| (p.canonical_id.to_string(), r))
        .collect();

    // Order per contribution follows its candidate list; downgrade before assembly.
    let mut contributions = Vec::new();
    for claim in &phase1.contributions {
        let list = candidates.contribution(&claim.id);
        let mut comps: Vec<ContributionComparison> = list
            .iter()
            .filter_map(|p| by_pair.remove(&(claim.id.clone(), p.canonical_id.to_string())))
            .collect();
        for c in &mut comps {
            if let Some(s) = sim_by_id.get(&c.canonical_id.to_string()) {
                c.similarity_segments = s.segments.clone();
            }
        }
        let comps = downgrade_unverified(comps);
        let downgraded = comps.iter().filter(|c| c.downgraded).count();
        if downgraded > 0 {
            diagnostics.push(format!("{}: {downgraded} can_refute verdicts downgraded", claim.id));
        }
        contributions.push(ContributionResult {
            contribution_id: claim.id.clone(),
            contribution_name: claim.name.clone(),
            author_claim_text: claim.author_claim_text.clone(),
            statistics: ContributionStats::of(&comps),
            comparisons: comps,
        });
    }
    let mut core_comparisons = core_comparisons;
    for c in &mut core_comparisons.comparisons {
        if let Some(s) = sim_by_id.get(&c.canonical_id.to_string()) {
            c.similarity_segments = s.segments.clone();
        }
    }
    let textual_similarity: Vec<SimilarityEntry> = sim_targets
        .iter()
        .filter_map(|p| {
            let r = sim_by_id.get(&p.canonical_id.to_string())?;
            (!r.segments.is_empty()).then(|| SimilarityEntry {
                canonical_id: p.canonical_id.clone(),
                candidate_paper_title: p.title.clone(),
                citation: references[index_of[&p.canonical_id.to_string()]].citation.clone(),
                segments: r.segments.clone(),
            })
        })
        .collect();
    if !textual_similarity.is_empty() {
        flags.push("textual_similarity_detected".into());
    }

    // Papers index with one-liners.
    let tax_ids: Vec<String> = std::iter::once(target_id.clone())
        .chain(candidates.core_task.iter().map(|p| p.canonical_id.to_string()))
        .collect();
    let one_liners = one_liners(&tax_papers, llm, &mut diagnostics);
    let mut leaf_of: HashMap<String, String> = HashMap::new();
    taxonomy.walk(&mut |n, _| {
        for id in n.paper_ids() {
            leaf_of.entry(id.clone()).or_insert_with(|| n.name.clone());
        }
    });
    let papers_index: Vec<IndexedPaper> = tax_ids
        .iter()
        .filter_map(|id| {
            let r = &references[*index_of.get(id)?];
            Some(IndexedPaper {
                index: r.index,
                alias: r.alias.clone(),
                canonical_id: r.canonical_id.clone(),
                title: r.title.clone(),
                year: r.year,
                leaf: leaf_of.get(id).cloned(),
                brief_one_liner: one_liners.get(id).cloned(),
                is_original: r.is_original,
            })
        })
        .collect();

    // Narrative over the taxonomy papers.
    let tax_allowed: BTreeSet<usize> = papers_index.iter().map(|p| p.index).collect();
    let leaf_neighbors: Vec<Value> = position
        .as_ref()
        .map(|p| {
            p.siblings
                .iter()
                .filter_map(|id| index_of.get(id).map(|i| &references[*i]))
                .map(|r| json!({"alias": r.alias, "index": r.index, "title": r.title}))
                .collect()
        })
        .unwrap_or_default();
    let narrative_user = json!({
        "core_task_text": phase1.core_task.text,
        "root_name": taxonomy.name,
        "top_level_branches": taxonomy.children().iter().map(|c| c.name.clone()).collect::<Vec<_>>(),
        "original_path": position.as_ref().map(|p| p.path.clone()).unwrap_or_default(),
        "leaf_neighbors": leaf_neighbors,
        "citation_index": citation_index_json(&references, &tax_allowed),
        "allowed_citation_indices": tax_allowed,
    })
    .to_string();
    let narrative = cited_generation(
        llm,
        LlmRequest::new(Task::Narrative, prompts::NARRATIVE.system, narrative_user, 0.0),
        &tax_allowed,
        |v| v.get("narrative").and_then(Value::as_str).map(|s| vec![s.trim().to_string()]),
        &mut diagnostics,
    )
    .into_iter()
    .next()
    .unwrap_or_default();

    // Overall assessment over every referenced paper.
    let all_allowed: BTreeSet<usize> = references.iter().map(|r| r.index).collect();
    let stats_json: Vec<Value> = contributions
        .iter()
        .map(|c| {
            let refuters: Vec<&str> = c
                .comparisons
                .iter()
                .filter(|x| x.refutation_status == RefutationStatus::CanRefute)
                .filter_map(|x| index_of.get(&x.canonical_id.to_string()).map(|i| references[*i].citation.as_str()))
                .collect();
            json!({
                "contribution": c.contribution_name,
                "candidates_examined": c.statistics.candidates_examined,
                "can_refute": c.statistics.can_refute,
                "non_refutable_or_unclear": c.statistics.non_refutable_or_unclear,
                "refuting_candidates": refuters,
            })
        })
        .collect();
    let assessment_user = json!({
        "abstract": target.abstract_text,
        "introduction": head_words(ctx.text, INTRO_WORDS),
        "taxonomy": taxonomy,
        "original_position": position,
        "search_scope": {
            "core_task_candidates": candidates.core_task.len(),
            "contribution_candidates": candidates.per_contribution.iter().map(|s| s.papers.len()).sum::<usize>(),
            "unified_candidates": candidates.unified.len(),
        },
        "contribution_statistics": stats_json,
        "citation_index": citation_index_json(&references, &all_allowed),
        "allowed_citation_indices": all_allowed,
    })
    .to_string();
    let overall_assessment = cited_generation(
        llm,
        LlmRequest::new(Task::OverallAssessment, prompts::OVERALL_ASSESSMENT.system, assessment_user, 0.0),
        &all_allowed,
        |v| {
            v.get("paragraphs").and_then(Value::as_array).map(|ps| {
                ps.iter()
                    .filter_map(Value::as_str)
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            })
        },
        &mut diagnostics,
    );
    if !(3..=4).contains(&overall_assessment.len()) {
        diagnostics.push(format!("overall assessment has {} paragraphs", overall_assessment.len()));
    }

    let total = contributions
        .iter()
        .fold(ContributionStats::default(), |acc, c| ContributionStats {
            candidates_examined: acc.candidates_examined + c.statistics.candidates_examined,
            can_refute: acc.can_refute + c.statistics.can_refute,
            non_refutable_or_unclear: acc.non_refutable_or_unclear + c.statistics.non_refutable_or_unclear,
        });
    diagnostics.extend(outcome.diagnostics.iter().map(|d| format!("taxonomy: {d}")));
    diagnostics.extend(core_comparisons.diagnostics.iter().cloned());
    for (id, r) in &sim_by_id {
        diagnostics.extend(r.diagnostics.iter().map(|d| format!("similarity {id}: {d}")));
    }
    diagnostics.sort();
    diagnostics.dedup();

    let parts = ReportParts {
        original_paper: Some(OriginalPaper {
            canonical_id: target.canonical_id.clone(),
            title: target.title.clone(),
            abstract_text: target.abstract_text.clone(),
            url: target.url.clone(),
            publication_date: target.publication_date.as_ref().map(|d| d.to_string()),
            core_task: phase1.core_task.text.clone(),
            contributions: phase1.contributions.clone(),
        }),
        core_task_survey: Some(CoreTaskSurvey {
            taxonomy: outcome.taxonomy.clone(),
            taxonomy_status: outcome.status,
            taxonomy_diagnostics: outcome.diagnostics.clone(),
            taxonomy_hash,
            position,
            narrative,
            papers_index,
        }),
        contribution_analysis: Some(ContributionAnalysis {
            overall_assessment,
            contributions,
            statistics: total,
        }),
        core_task_comparisons: Some(core_comparisons),
        references: Some(references.clone()),
        textual_similarity: Some(textual_similarity),
        metadata: Some(ReportMetadata {
            generated_at: config.generated_at.clone(),
            tool_version: config.tool_version.clone(),
            taxonomy_status: outcome.status,
            candidates_examined: candidates.unified.len(),
            flags,
            diagnostics,
        }),
    };
    assemble_report(parts)
}

fn one_liners(papers: &[TaxonomyPaper], llm: &dyn LlmClient, diagnostics: &mut Vec<String>) -> HashMap<String, String> {
    let items: Vec<Value> = papers
        .iter()
        .map(|p| json!({"paper_id": p.id, "title": p.title, "abstract": p.abstract_text}))
        .collect();
    let user = json!({ "papers": items }).to_string();
    let request = LlmRequest::new(Task::OneLiner, prompts::ONE_LINER.system, user, 0.0);
    let parsed = llm
        .complete(&request)
        .map_err(|e| e.to_string())
        .and_then(|raw| parse_structured_output(&raw).map_err(|e| e.to_string()));
    match parsed {
        Ok(p) => p
            .value
            .get("items")
            .and_then(Value::as_array)
            .map(|items| {
                items
                    .iter()
                    .filter_map(Value::as_object)
                    .filter_map(|o| {
                        let id = o.get("paper_id")?.as_str()?.to_string();
                        let text = o.get("brief_one_liner")?.as_str()?.trim().to_string();
                        (!text.is_empty()).then_some((id, text))
                    })
                    .collect()
            })
            .unwrap_or_default(),
        Err(e) => {
            diagnostics.push(format!("one-liner generation failed: {e}"));
            HashMap::new()
        }
    }
}

/// Module-by-module inputs to [`assemble_report`].
#[derive(Debug, Clone, Default)]
pub struct ReportParts {
    pub original_paper: Option<OriginalPaper>,
    pub core_task_survey: Option<CoreTaskSurvey>,
    pub contribution_analysis: Option<ContributionAnalysis>,
    pub core_task_comparisons: Option<CoreTaskComparisons>,
    pub references: Option<Vec<Reference>>,
    pub textual_similarity: Option<Vec<SimilarityEntry>>,
    pub metadata: Option<ReportMetadata>,
}

pub fn assemble_report(parts: ReportParts) -> Result<NoveltyReport> {
    let report = NoveltyReport {
        original_paper: parts.original_paper.ok_or(Error::MissingModule("original_paper"))?,
        core_task_survey: parts.core_task_survey.ok_or(Error::MissingModule("core_task_survey"))?,
        contribution_analysis: parts.contribution_analysis.ok_or(Error::MissingModule("contribution_analysis"))?,
        core_task_comparisons: parts.core_task_comparisons.ok_or(Error::MissingModule("core_task_comparisons"))?,
        references: parts.references.ok_or(Error::MissingModule("references"))?,
        textual_similarity: parts.textual_similarity.ok_or(Error::MissingModule("textual_similarity"))?,
        metadata: parts.metadata.ok_or(Error::MissingModule("metadata"))?,
    };
    for c in &report.contribution_analysis.contributions {
        if let Some(bad) = c
            .comparisons
            .iter()
            .find(|x| x.refutation_status == RefutationStatus::CanRefute && !x.has_verified_pair())
        {
            return Err(Error::invalid(format!(
                "can_refute without verified evidence for {} / {}",
                c.contribution_id, bad.canonical_id
            )));
        }
    }
    report.check()?;
    Ok(report)
}

/// Groups contribution comparisons by candidate, keeping first-seen order.
pub fn comparisons_by_candidate(report: &NoveltyReport) -> BTreeMap<String, Vec<&ContributionComparison>> {
    let mut out: BTreeMap<String, Vec<&ContributionComparison>> = BTreeMap::new();
    for c in report.contribution_analysis.contributions.iter().flat_map(|c| &c.comparisons) {
        out.entry(c.canonical_id.to_string()).or_default().push(c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::MockLlm;
    use crate::paper::{DocumentText, Identifiers};

    fn paper(title: &str, doi: &str, full: Option<&str>) -> PaperRecord {
        let ids = Identifiers {
            doi: Some(doi.into()),
            ..Default::default()
        };
        let mut p = PaperRecord::new(title, ids).unwrap();
        p.abstract_text = format!("Abstract of {title}.");
        p.full_text = full.map(DocumentText::new);
        p
    }

    fn claim(id: &str, name: &str) -> ContributionClaim {
        ContributionClaim {
            id: id.into(),
            name: name.into(),
            author_claim_text: format!("We propose {name}."),
            description: format!("{name} does things."),
            source_hint: "Introduction".into(),
            prior_work_query: None,
            query_variants: Vec::new(),
            audit: Vec::new(),
        }
    }

    const TARGET_TEXT: &str = "Our framework decouples environment execution from policy optimization \
        so that thousands of rollouts run in parallel across heterogeneous simulators.";
    const CAND_TEXT: &str = "Prior systems already decouple environment execution from policy optimization \
        and run rollouts in parallel on many simulators.";

    #[test]
    fn aliases() {
        assert_eq!(citation_alias("AgentGym-RL: Training LLM Agents"), "AgentGym-RL");
        assert_eq!(citation_alias("Reinforcement learning for agents"), "Reinforcement");
        assert_eq!(citation_alias("A very long prefix that has many words: rest"), "A");
        assert_eq!(citation_alias("???"), "Paper");
    }

    #[test]
    fn citation_stripping() {
        let allowed: BTreeSet<usize> = [0, 1].into_iter().collect();
        assert_eq!(cited_indices("A[0] and B[12]"), [0, 12]);
        assert_eq!(strip_disallowed_citations("A[0] and B[12].", &allowed), "A[0] and B.");
    }

    #[test]
    fn verified_can_refute_is_kept_and_fabricated_is_downgraded() {
        let target = paper("Target Paper", "10.1/t", Some(TARGET_TEXT));
        let cand = paper("Cand Paper", "10.1/c", Some(CAND_TEXT));
        let ctx = TargetContext::new(&target);
        let good = json!({"contribution_analyses": [{
            "contribution_name": "Decoupled rollouts",
            "refutation_status": "can_refute",
            "refutation_evidence": {"summary": "s", "evidence_pairs": [{
                "original_quote": "decouples environment execution from policy optimization",
                "original_paragraph_label": "Abstract",
                "candidate_quote": "decouple environment execution from policy optimization",
                "candidate_paragraph_label": "Method",
                "rationale": "same idea"}]}}]});
        let llm = MockLlm::default().reply(Task::ContributionComparison, &[], good.to_string());
        let c = claim("contribution_1", "Decoupled rollouts");
        let out = compare_contribution(&ctx, &cand, "Cand[1]", &[&c], &llm, &VerifyConfig::default());
        assert_eq!(out.len(), 1);
        assert!(out[0].has_verified_pair(), "{:?}", out[0].refutation_evidence);
        let after = downgrade_unverified(out.clone());
        assert_eq!(after, out);

        let fake = good.to_string().replace(
            "decouple environment execution from policy optimization",
            "a fabricated sentence that never appears anywhere in the text",
        );
        let llm = MockLlm::default().reply(Task::ContributionComparison, &[], fake);
        let out = compare_contribution(&ctx, &cand, "Cand[1]", &[&c], &llm, &VerifyConfig::default());
        let after = downgrade_unverified(out);
        assert_eq!(after[0].refutation_status, RefutationStatus::CannotRefute);
        assert!(after[0].downgraded && after[0].brief_note.is_some() && after[0].refutation_evidence.is_none());
    }

    #[test]
    fn parse_failure_yields_unclear() {
        let target = paper("Target Paper", "10.1/t", Some(TARGET_TEXT));
        let cand = paper("Cand Paper", "10.1/c", None);
        let ctx = TargetContext::new(&target);
        let llm = MockLlm::default().reply(Task::ContributionComparison, &[], "nonsense");
        let c1 = claim("contribution_1", "A");
        let c2 = claim("contribution_2", "B");
        let out = compare_contribution(&ctx, &cand, "Cand[1]", &[&c1, &c2], &llm, &VerifyConfig::default());
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|c| c.refutation_status == RefutationStatus::Unclear));
        assert!(out.iter().all(|c| c.comparison_mode == ComparisonMode::Abstract));
    }

    #[test]
    fn cache_runs_detection_once() {
        let target = paper("Target Paper", "10.1/t", Some(TARGET_TEXT));
        let cand = paper("Cand Paper", "10.1/c", Some(CAND_TEXT));
        let ctx = TargetContext::new(&target);
        let llm = MockLlm::default().reply(Task::Similarity, &[], r#"{"plagiarism_segments": []}"#);
        let cache = SimilarityCache::default();
        let items = vec![&cand; 8];
        parallel_map(&items, 4, |c| detect_similarity(&ctx, c, &llm, &cache, &VerifyConfig::default()));
        assert_eq!(llm.calls_for(Task::Similarity), 1);
        assert_eq!(cache.computed(), 1);
    }

    #[test]
    fn statistics_identity() {
        let mk = |s| ContributionComparison {
            contribution_id: "c".into(),
            contribution_name: "c".into(),
            canonical_id: CanonicalId::from_title("x").unwrap(),
            candidate_paper_title: "x".into(),
            candidate_paper_url: None,
            comparison_mode: ComparisonMode::Abstract,
            refutation_status: s,
            refutation_evidence: None,
            brief_note: Some("n".into()),
            similarity_segments: Vec::new(),
            downgraded: false,
        };
        let comps = vec![
            mk(RefutationStatus::CanRefute),
            mk(RefutationStatus::Unclear),
            mk(RefutationStatus::CannotRefute),
        ];
        let s = ContributionStats::of(&comps);
        assert_eq!((s.candidates_examined, s.can_refute, s.non_refutable_or_unclear), (3, 1, 2));
    }

    #[test]
    fn missing_module_is_named() {
        assert!(matches!(assemble_report(ReportParts::default()), Err(Error::MissingModule("original_paper"))));
        assert!(matches!(NoveltyReport::from_json("{\"original_paper\": {}}"), Err(Error::MissingModule("core_task_survey"))));
    }
}
