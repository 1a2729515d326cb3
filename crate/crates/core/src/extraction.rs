//! Phase I: core task and contribution extraction, query synthesis.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tracing::warn;

use crate::error::{Error, Phase, Result};
use crate::llm::{LlmClient, LlmRequest, Task};
use crate::paper::DocumentText;
use crate::prompts;
use crate::structured::parse_structured_output;
use crate::text::{truncate_words, word_count};

/// Literal prefix every contribution query starts with.
pub const SEARCH_PREFIX: &str = "Find papers about ";
pub const MAX_QUERY_WORDS: usize = 25;
pub const CORE_TASK_MIN_WORDS: usize = 5;
pub const CORE_TASK_MAX_WORDS: usize = 15;
pub const MAX_NAME_WORDS: usize = 15;
pub const MAX_CLAIM_WORDS: usize = 40;
pub const MAX_DESCRIPTION_WORDS: usize = 60;
pub const MAX_CONTRIBUTIONS: usize = 3;
/// Sentinel used for optional fields the model left out.
pub const UNKNOWN: &str = "unknown";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperatures {
    pub contributions: f64,
    pub core_task: f64,
    pub primary_query: f64,
    pub variants: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Temperatures {
            contributions: 0.0,
            core_task: 0.1,
            primary_query: 0.0,
            variants: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditAction {
    Truncated,
    PrefixAdded,
    Defaulted,
    Rerequested,
    Fallback,
}

/// Records a correction applied to model output.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AuditFlag {
    pub field: String,
    pub action: AuditAction,
}

impl AuditFlag {
    pub fn new(field: impl Into<String>, action: AuditAction) -> Self {
        AuditFlag {
            field: field.into(),
            action,
        }
    }
}

fn push_audit(audit: &mut Vec<AuditFlag>, flag: AuditFlag) {
    if !audit.contains(&flag) {
        audit.push(flag);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreTask {
    pub text: String,
    /// Primary query followed by two variants, none carrying the search prefix.
    #[serde(default)]
    pub query_variants: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub audit: Vec<AuditFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionClaim {
    pub id: String,
    pub name: String,
    pub author_claim_text: String,
    pub description: String,
    pub source_hint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_work_query: Option<String>,
    /// Primary query followed by two variants, all prefixed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub query_variants: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub audit: Vec<AuditFlag>,
}

/// Ensures the search prefix and the hard word cap.
pub fn normalize_contribution_query(query: &str, audit: &mut Vec<AuditFlag>, field: &str) -> String {
    let collapsed = query.split_whitespace().collect::<Vec<_>>().join(" ");
    let bare = SEARCH_PREFIX.trim_end();
    let with_prefix = if collapsed.starts_with(SEARCH_PREFIX) {
        collapsed
    } else if collapsed.is_char_boundary(bare.len()) && collapsed[..bare.len()].eq_ignore_ascii_case(bare) {
        // Same words, wrong case: rewrite to the exact literal.
        let rest = collapsed[bare.len()..].trim_start();
        push_audit(audit, AuditFlag::new(field, AuditAction::PrefixAdded));
        format!("{SEARCH_PREFIX}{rest}")
    } else {
        push_audit(audit, AuditFlag::new(field, AuditAction::PrefixAdded));
        format!("{SEARCH_PREFIX}{collapsed}")
    };
    match truncate_words(&with_prefix, MAX_QUERY_WORDS) {
        Some(cut) => {
            push_audit(audit, AuditFlag::new(field, AuditAction::Truncated));
            cut
        }
        None => with_prefix.trim_end().to_string(),
    }
}

/// Removes the search prefix (any case) from a core-task query.
pub fn strip_search_prefix(query: &str) -> String {
    let collapsed = query.split_whitespace().collect::<Vec<_>>().join(" ");
    let bare = SEARCH_PREFIX.trim_end();
    if collapsed.is_char_boundary(bare.len()) && collapsed[..bare.len()].eq_ignore_ascii_case(bare)
    {
        collapsed[bare.len()..].trim_start().to_string()
    } else {
        collapsed
    }
}

fn string_field(raw: &Map<String, Value>, key: &str) -> Option<String> {
    match raw.get(key)? {
        Value::String(s) if !s.trim().is_empty() => Some(s.trim().to_string()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn limited(text: String, limit: usize, field: &str, audit: &mut Vec<AuditFlag>) -> String {
    match truncate_words(&text, limit) {
        Some(cut) => {
            push_audit(audit, AuditFlag::new(field, AuditAction::Truncated));
            cut
        }
        None => text,
    }
}

/// Validates one contribution object. `index` (1-based) names the claim when
/// the object carries no `id`. Running it on its own serialized output is a no-op.
pub fn validate_contribution(raw: &Map<String, Value>, index: usize) -> Result<ContributionClaim> {
    let mut audit: Vec<AuditFlag> = raw
        .get("audit")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default();
    let name = string_field(raw, "name").ok_or_else(|| Error::invalid("contribution has no name"))?;
    let name = limited(name, MAX_NAME_WORDS, "name", &mut audit);
    let mut optional = |key: &str, limit: Option<usize>| match string_field(raw, key) {
        Some(v) => match limit {
            Some(l) => limited(v, l, key, &mut audit),
            None => v,
        },
        None => {
            push_audit(&mut audit, AuditFlag::new(key, AuditAction::Defaulted));
            UNKNOWN.to_string()
        }
    };
    let author_claim_text = optional("author_claim_text", Some(MAX_CLAIM_WORDS));
    let description = optional("description", Some(MAX_DESCRIPTION_WORDS));
    let source_hint = optional("source_hint", None);
    let prior_work_query = string_field(raw, "prior_work_query")
        .map(|q| normalize_contribution_query(&q, &mut audit, "prior_work_query"));
    let query_variants = raw
        .get("query_variants")
        .and_then(Value::as_array)
        .map(|items| {
            items
                .iter()
                .filter_map(Value::as_str)
                .map(|q| normalize_contribution_query(q, &mut audit, "query_variants"))
                .collect()
        })
        .unwrap_or_default();
    let id = string_field(raw, "id").unwrap_or_else(|| format!("contribution_{index}"));
    Ok(ContributionClaim {
        id,
        name,
        author_claim_text,
        description,
        source_hint,
        prior_work_query,
        query_variants,
        audit,
    })
}

fn first_line_phrase(raw: &str) -> String {
    let line = raw.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let line = line.trim_matches(|c: char| matches!(c, '"' | '\'' | '`' | '*' | '\u{201C}' | '\u{201D}'));
    let line = line.trim_end_matches('.').trim();
    line.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Title and abstract sent alongside the preprocessed body.
#[derive(Debug, Clone, Copy)]
pub struct TargetText<'a> {
    pub title: &'a str,
    pub abstract_text: &'a str,
    pub body: &'a DocumentText,
}

fn complete_with_retry(llm: &dyn LlmClient, request: &LlmRequest) -> Result<String> {
    match llm.complete(request) {
        Ok(s) => Ok(s),
        Err(first) => {
            warn!(task = %request.task, error = %first, "llm call failed, retrying once");
            llm.complete(request).map_err(|e| Error::PhaseAbort {
                phase: Phase::Extraction,
                reason: e.to_string(),
            })
        }
    }
}

/// Core-task phrase without query variants (see [`generate_core_task_queries`]).
pub fn extract_core_task(target: TargetText<'_>, llm: &dyn LlmClient, temps: &Temperatures) -> Result<CoreTask> {
    if target.body.is_empty() {
        return Err(Error::invalid("document is empty"));
    }
    let template = prompts::CORE_TASK;
    let request = LlmRequest::new(
        Task::CoreTask,
        template.system,
        template.render_user(&[
            ("title", target.title),
            ("abstract", target.abstract_text),
            ("body_text", &target.body.raw),
        ]),
        temps.core_task,
    );
    let mut audit = Vec::new();
    let mut phrase = first_line_phrase(&complete_with_retry(llm, &request)?);
    if word_count(&phrase) < CORE_TASK_MIN_WORDS {
        audit.push(AuditFlag::new("core_task", AuditAction::Rerequested));
        phrase = first_line_phrase(&complete_with_retry(llm, &request)?);
    }
    let words = word_count(&phrase);
    if words < CORE_TASK_MIN_WORDS {
        return Err(Error::PhaseAbort {
            phase: Phase::Extraction,
            reason: format!("core task has {words} words after re-request (min {CORE_TASK_MIN_WORDS})"),
        });
    }
    if let Some(cut) = truncate_words(&phrase, CORE_TASK_MAX_WORDS) {
        audit.push(AuditFlag::new("core_task", AuditAction::Truncated));
        phrase = cut;
    }
    Ok(CoreTask {
        text: phrase,
        query_variants: Vec::new(),
        audit,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContributionExtraction {
    pub claims: Vec<ContributionClaim>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Claims from a parsed `{"contributions": [...]}` value: validated, deduplicated
/// by case-insensitive name, capped at three in model order.
pub fn contributions_from_value(value: &Value) -> ContributionExtraction {
    let mut out = ContributionExtraction::default();
    let items = value
        .get("contributions")
        .and_then(Value::as_array)
        .or_else(|| value.as_array());
    let Some(items) = items else {
        out.warnings.push("output has no contributions array".into());
        return out;
    };
    for item in items {
        if out.claims.len() == MAX_CONTRIBUTIONS {
            break;
        }
        let Some(obj) = item.as_object() else {
            out.warnings.push("skipped non-object contribution".into());
            continue;
        };
        let mut obj = obj.clone();
        obj.remove("id");
        match validate_contribution(&obj, out.claims.len() + 1) {
            Ok(claim) => {
                let key = claim.name.to_lowercase();
                if out.claims.iter().any(|c| c.name.to_lowercase() == key) {
                    out.warnings.push(format!("dropped duplicate contribution `{}`", claim.name));
                } else {
                    out.claims.push(claim);
                }
            }
            Err(e) => out.warnings.push(format!("rejected contribution: {e}")),
        }
    }
    if out.claims.is_empty() {
        out.warnings.push("no valid contributions; continuing with core-task scope only".into());
    }
    out
}

pub fn extract_contributions(
    target: TargetText<'_>,
    llm: &dyn LlmClient,
    temps: &Temperatures,
) -> Result<ContributionExtraction> {
    if target.body.is_empty() {
        return Err(Error::invalid("document is empty"));
    }
    let template = prompts::CONTRIBUTIONS;
    let request = LlmRequest::new(
        Task::Contributions,
        template.system,
        template.render_user(&[("title", target.title), ("body_text", &target.body.raw)]),
        temps.contributions,
    );
    let raw = match complete_with_retry(llm, &request) {
        Ok(raw) => raw,
        Err(e) => {
            return Ok(ContributionExtraction {
                claims: Vec::new(),
                warnings: vec![format!("contribution extraction failed: {e}")],
            })
        }
    };
    match parse_structured_output(&raw) {
        Ok(parsed) => Ok(contributions_from_value(&parsed.value)),
        Err(e) => Ok(ContributionExtraction {
            claims: Vec::new(),
            warnings: vec![format!("contribution output unparseable: {e}")],
        }),
    }
}

fn request_variants(llm: &dyn LlmClient, primary: &str, temps: &Temperatures) -> Vec<String> {
    let template = prompts::QUERY_VARIANTS;
    let request = LlmRequest::new(
        Task::QueryVariants,
        template.system,
        template.render_user(&[("primary_query", primary)]),
        temps.variants,
    );
    let Ok(raw) = llm.complete(&request) else {
        return Vec::new();
    };
    let Ok(parsed) = parse_structured_output(&raw) else {
        return Vec::new();
    };
    parsed
        .value
        .get("variants")
        .and_then(Value::as_array)
        .map(|v| v.iter().filter_map(Value::as_str).map(str::to_string).collect())
        .unwrap_or_default()
}

/// Fills the two variant slots, reusing the primary query when the model
/// produced fewer than two usable variants.
fn variant_slots(
    primary: &str,
    candidates: Vec<String>,
    audit: &mut Vec<AuditFlag>,
    mut normalize: impl FnMut(&str) -> String,
) -> Vec<String> {
    let mut out = vec![primary.to_string()];
    for c in candidates {
        if out.len() == 3 {
            break;
        }
        let q = normalize(&c);
        if !q.is_empty() && !out.contains(&q) {
            out.push(q);
        }
    }
    if out.len() < 3 {
        push_audit(audit, AuditFlag::new("query_variants", AuditAction::Fallback));
        while out.len() < 3 {
            out.push(primary.to_string());
        }
    }
    out
}

/// Primary query (the phrase itself) plus two prefix-free variants.
pub fn generate_core_task_queries(core: &mut CoreTask, llm: &dyn LlmClient, temps: &Temperatures) {
    let candidates = request_variants(llm, &core.text, temps);
    let normalize = |q: &str| {
        let bare = strip_search_prefix(q);
        truncate_words(&bare, CORE_TASK_MAX_WORDS).unwrap_or(bare)
    };
    let text = core.text.clone();
    core.query_variants = variant_slots(&text, candidates, &mut core.audit, normalize);
}

fn claims_block(claims: &[ContributionClaim]) -> String {
    claims
        .iter()
        .map(|c| {
            format!(
                "- [{}]\n  name: {}\n  author_claim_text: {}\n  description: {}",
                c.id, c.name, c.author_claim_text, c.description
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// One primary query per claim (single batched call), then two variants each.
pub fn generate_contribution_queries(claims: &mut [ContributionClaim], llm: &dyn LlmClient, temps: &Temperatures) {
    if claims.is_empty() {
        return;
    }
    let template = prompts::PRIMARY_QUERY;
    let request = LlmRequest::new(
        Task::PrimaryQuery,
        template.system,
        template.render_user(&[("claims", &claims_block(claims))]),
        temps.primary_query,
    );
    let by_id: Map<String, Value> = llm
        .complete(&request)
        .ok()
        .and_then(|raw| parse_structured_output(&raw).ok())
        .and_then(|p| p.value.get("queries").and_then(Value::as_array).cloned())
        .unwrap_or_default()
        .into_iter()
        .filter_map(|q| {
            let id = q.get("id")?.as_str()?.to_string();
            let text = q.get("prior_work_query")?.as_str()?.to_string();
            Some((id, Value::String(text)))
        })
        .collect();
    for claim in claims.iter_mut() {
        let primary = match by_id.get(&claim.id).and_then(Value::as_str) {
            Some(q) => normalize_contribution_query(q, &mut claim.audit, "prior_work_query"),
            None => {
                push_audit(&mut claim.audit, AuditFlag::new("prior_work_query", AuditAction::Fallback));
                normalize_contribution_query(&claim.name, &mut Vec::new(), "prior_work_query")
            }
        };
        let candidates = request_variants(llm, &primary, temps);
        let mut scratch = Vec::new();
        let variants = variant_slots(&primary, candidates, &mut claim.audit, |q| {
            normalize_contribution_query(q, &mut scratch, "query_variants")
        });
        claim.audit.extend(scratch);
        dedup_audit(&mut claim.audit);
        claim.prior_work_query = Some(primary);
        claim.query_variants = variants;
    }
}

fn dedup_audit(audit: &mut Vec<AuditFlag>) {
    let mut seen = Vec::with_capacity(audit.len());
    audit.retain(|f| {
        if seen.contains(f) {
            false
        } else {
            seen.push(f.clone());
            true
        }
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryScope {
    CoreTask,
    Contribution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Primary,
    Variant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchQuery {
    pub text: String,
    pub scope: QueryScope,
    pub kind: QueryKind,
    /// Owning contribution for contribution-scope queries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contribution_id: Option<String>,
}

impl SearchQuery {
    /// Scope key used to group retrieval results: `core_task` or the contribution id.
    pub fn scope_key(&self) -> &str {
        self.contribution_id.as_deref().unwrap_or("core_task")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContributionQueries {
    pub contribution_id: String,
    pub queries: Vec<SearchQuery>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySet {
    pub core_task_queries: Vec<SearchQuery>,
    pub contribution_queries: Vec<ContributionQueries>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl QuerySet {
    /// Every query in submission order: core task first, then contributions.
    pub fn all(&self) -> Vec<&SearchQuery> {
        self.core_task_queries
            .iter()
            .chain(self.contribution_queries.iter().flat_map(|c| c.queries.iter()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.core_task_queries.len() + self.contribution_queries.iter().map(|c| c.queries.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn three(primary: &str, variants: &[String]) -> Vec<String> {
    let mut out: Vec<String> = variants.iter().take(3).cloned().collect();
    if out.is_empty() {
        out.push(primary.to_string());
    }
    while out.len() < 3 {
        out.push(out[0].clone());
    }
    out
}

pub fn assemble_query_set(core: &CoreTask, claims: &[ContributionClaim]) -> QuerySet {
    let kind = |i: usize| if i == 0 { QueryKind::Primary } else { QueryKind::Variant };
    let core_task_queries = three(&core.text, &core.query_variants)
        .into_iter()
        .enumerate()
        .map(|(i, q)| SearchQuery {
            text: strip_search_prefix(&q),
            scope: QueryScope::CoreTask,
            kind: kind(i),
            contribution_id: None,
        })
        .collect();
    let contribution_queries = claims
        .iter()
        .take(MAX_CONTRIBUTIONS)
        .map(|claim| {
            let primary = claim.prior_work_query.clone().unwrap_or_else(|| claim.name.clone());
            let queries = three(&primary, &claim.query_variants)
                .into_iter()
                .enumerate()
                .map(|(i, q)| SearchQuery {
                    text: normalize_contribution_query(&q, &mut Vec::new(), "query"),
                    scope: QueryScope::Contribution,
                    kind: kind(i),
                    contribution_id: Some(claim.id.clone()),
                })
                .collect();
            ContributionQueries {
                contribution_id: claim.id.clone(),
                queries,
            }
        })
        .collect();
    let mut set = QuerySet {
        core_task_queries,
        contribution_queries,
        warnings: Vec::new(),
    };
    if claims.is_empty() {
        set.warnings
            .push(format!("only {} queries: no contributions extracted", set.len()));
    }
    set
}

/// Phase I result persisted as `phase1.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase1Output {
    pub core_task: CoreTask,
    pub contributions: Vec<ContributionClaim>,
    pub queries: QuerySet,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub fn run_phase1(target: TargetText<'_>, llm: &dyn LlmClient, temps: &Temperatures) -> Result<Phase1Output> {
    let mut core = extract_core_task(target, llm, temps)?;
    let ContributionExtraction { mut claims, warnings } = extract_contributions(target, llm, temps)?;
    for w in &warnings {
        warn!("{w}");
    }
    generate_core_task_queries(&mut core, llm, temps);
    generate_contribution_queries(&mut claims, llm, temps);
    let queries = assemble_query_set(&core, &claims);
    let mut all_warnings = warnings;
    all_warnings.extend(queries.warnings.iter().cloned());
    Ok(Phase1Output {
        core_task: core,
        contributions: claims,
        queries,
        warnings: all_warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::MockLlm;
    use serde_json::json;

    fn obj(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn prefix_is_prepended() {
        let c = validate_contribution(&obj(json!({"name": "n", "prior_work_query": "RL frameworks for agents"})), 1)
            .unwrap();
        assert_eq!(c.prior_work_query.as_deref(), Some("Find papers about RL frameworks for agents"));
        assert!(c.audit.contains(&AuditFlag::new("prior_work_query", AuditAction::PrefixAdded)));
    }

    #[test]
    fn long_query_keeps_25_words() {
        let words: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
        let q = format!("{SEARCH_PREFIX}{}", words.join(" "));
        let c = validate_contribution(&obj(json!({"name": "n", "prior_work_query": q})), 1).unwrap();
        let got = c.prior_work_query.unwrap();
        assert_eq!(word_count(&got), 25);
        assert!(got.starts_with(SEARCH_PREFIX));
        assert!(got.ends_with("w21"));
    }

    #[test]
    fn missing_optional_fields_default_to_unknown() {
        let c = validate_contribution(&obj(json!({"name": "Thing"})), 2).unwrap();
        assert_eq!(c.source_hint, UNKNOWN);
        assert_eq!(c.id, "contribution_2");
        assert!(c.audit.contains(&AuditFlag::new("source_hint", AuditAction::Defaulted)));
        assert!(validate_contribution(&obj(json!({"description": "x"})), 1).is_err());
    }

    #[test]
    fn validation_is_idempotent() {
        let raw = obj(json!({
            "name": (0..20).map(|i| format!("n{i}")).collect::<Vec<_>>().join(" "),
            "description": "d",
            "prior_work_query": "find papers about things",
        }));
        let once = validate_contribution(&raw, 1).unwrap();
        let again = validate_contribution(&obj(serde_json::to_value(&once).unwrap()), 7).unwrap();
        assert_eq!(once, again);
        assert_eq!(word_count(&once.name), 15);
        assert_eq!(once.prior_work_query.as_deref(), Some("Find papers about things"));
    }

    fn doc() -> DocumentText {
        DocumentText::new("We propose a thing.")
    }

    fn target(d: &DocumentText) -> TargetText<'_> {
        TargetText {
            title: "T",
            abstract_text: "A",
            body: d,
        }
    }

    #[test]
    fn core_task_accepted_and_trimmed() {
        let d = doc();
        let phrase = "training llm agents for long-horizon decision making via multi-turn reinforcement learning";
        let llm = MockLlm::default().reply(Task::CoreTask, &[], phrase);
        let core = extract_core_task(target(&d), &llm, &Temperatures::default()).unwrap();
        assert_eq!(core.text, phrase);
        assert!(core.audit.is_empty());
        assert_eq!(llm.calls()[0].temperature, 0.1);

        let long = (0..16).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let llm = MockLlm::default().reply(Task::CoreTask, &[], long);
        let core = extract_core_task(target(&d), &llm, &Temperatures::default()).unwrap();
        assert_eq!(word_count(&core.text), 15);
        assert_eq!(core.audit, vec![AuditFlag::new("core_task", AuditAction::Truncated)]);
    }

    #[test]
    fn short_core_task_is_rerequested_once_then_rejected() {
        let d = doc();
        let llm = MockLlm::default().reply(Task::CoreTask, &[], "three word phrase");
        assert!(matches!(
            extract_core_task(target(&d), &llm, &Temperatures::default()),
            Err(Error::PhaseAbort { .. })
        ));
        assert_eq!(llm.calls_for(Task::CoreTask), 2);
    }

    #[test]
    fn contributions_capped_at_three() {
        let items: Vec<Value> = (1..=5).map(|i| json!({"name": format!("c{i}")})).collect();
        let out = contributions_from_value(&json!({ "contributions": items }));
        let names: Vec<&str> = out.claims.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["c1", "c2", "c3"]);
        assert_eq!(out.claims[2].id, "contribution_3");
    }

    #[test]
    fn duplicate_names_merge() {
        let out = contributions_from_value(&json!({"contributions": [{"name": "A"}, {"name": "a"}, {"name": "B"}]}));
        assert_eq!(out.claims.len(), 2);
        assert_eq!(out.claims[1].id, "contribution_2");
    }

    #[test]
    fn query_counts() {
        let core = CoreTask {
            text: "one two three four five".into(),
            query_variants: vec!["one two three four five".into(), "v1 a b c d".into(), "Find papers about v2 a b c".into()],
            audit: vec![],
        };
        let claim = |i: usize| ContributionClaim {
            id: format!("contribution_{i}"),
            name: format!("c{i}"),
            author_claim_text: "x".into(),
            description: "x".into(),
            source_hint: "x".into(),
            prior_work_query: Some(format!("{SEARCH_PREFIX}c{i}")),
            query_variants: vec![],
            audit: vec![],
        };
        let claims: Vec<_> = (1..=3).map(claim).collect();
        assert_eq!(assemble_query_set(&core, &claims).len(), 12);
        assert_eq!(assemble_query_set(&core, &claims[..1]).len(), 6);
        let none = assemble_query_set(&core, &[]);
        assert_eq!(none.len(), 3);
        assert_eq!(none.warnings.len(), 1);
        let set = assemble_query_set(&core, &claims);
        assert!(set.core_task_queries.iter().all(|q| !q.text.starts_with(SEARCH_PREFIX)));
        assert_eq!(set.core_task_queries[2].text, "v2 a b c");
        for q in set.all().into_iter().filter(|q| q.scope == QueryScope::Contribution) {
            assert!(q.text.starts_with(SEARCH_PREFIX));
        }
    }

    #[test]
    fn fence_wrapped_contributions_parse() {
        let d = doc();
        let llm = MockLlm::default().reply(
            Task::Contributions,
            &[],
            "```json\n{\"contributions\": [{\"name\": \"X\", \"author_claim_text\": \"We propose X\", \"description\": \"d\", \"source_hint\": \"Abstract\"}]}\n```",
        );
        let out = extract_contributions(target(&d), &llm, &Temperatures::default()).unwrap();
        assert_eq!(out.claims.len(), 1);
        assert_eq!(out.claims[0].source_hint, "Abstract");
    }
}
