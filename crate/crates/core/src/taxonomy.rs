//! Hierarchical MECE taxonomy: validation, repair, ordering and position queries.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use tracing::warn;

use crate::error::{Error, Result};
use crate::llm::{LlmClient, LlmRequest, Task};
use crate::paper::PaperRecord;
use crate::prompts;
use crate::structured::parse_structured_output;
use crate::text::word_count;

pub const ROOT_SUFFIX: &str = " Survey Taxonomy";
pub const MAX_NOTE_WORDS: usize = 25;
pub const LEAF_SIZE_MIN: usize = 2;
pub const LEAF_SIZE_MAX: usize = 7;

/// A taxonomy node in the JSON shape the model emits. Leaves carry `papers`,
/// internal nodes and the root carry `subtopics`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyNode {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope_note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclude_note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtopics: Option<Vec<TaxonomyNode>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub papers: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Root,
    Internal,
    Leaf,
}

impl TaxonomyNode {
    pub fn leaf(name: impl Into<String>, papers: Vec<String>) -> Self {
        TaxonomyNode {
            name: name.into(),
            scope_note: Some("Included items.".into()),
            exclude_note: Some("Excluded items belong elsewhere.".into()),
            subtopics: None,
            papers: Some(papers),
        }
    }

    pub fn internal(name: impl Into<String>, subtopics: Vec<TaxonomyNode>) -> Self {
        TaxonomyNode {
            name: name.into(),
            scope_note: Some("Included items.".into()),
            exclude_note: Some("Excluded items belong elsewhere.".into()),
            subtopics: Some(subtopics),
            papers: None,
        }
    }

    pub fn root(topic_label: &str, subtopics: Vec<TaxonomyNode>) -> Self {
        TaxonomyNode {
            name: format!("{topic_label}{ROOT_SUFFIX}"),
            scope_note: None,
            exclude_note: None,
            subtopics: Some(subtopics),
            papers: None,
        }
    }

    pub fn kind(&self, depth: usize) -> NodeKind {
        if depth == 0 {
            NodeKind::Root
        } else if self.papers.is_some() && self.subtopics.is_none() {
            NodeKind::Leaf
        } else {
            NodeKind::Internal
        }
    }

    pub fn children(&self) -> &[TaxonomyNode] {
        self.subtopics.as_deref().unwrap_or(&[])
    }

    pub fn paper_ids(&self) -> &[String] {
        self.papers.as_deref().unwrap_or(&[])
    }

    /// Every paper id in depth-first leaf order, duplicates included.
    pub fn all_paper_ids(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.walk(&mut |node, _| out.extend(node.paper_ids().iter().map(String::as_str)));
        out
    }

    /// Pre-order traversal with depth (root = 0).
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a TaxonomyNode, usize)) {
        fn go<'a>(node: &'a TaxonomyNode, depth: usize, f: &mut impl FnMut(&'a TaxonomyNode, usize)) {
            f(node, depth);
            for c in node.children() {
                go(c, depth + 1, f);
            }
        }
        go(self, 0, f);
    }

    fn walk_mut(&mut self, f: &mut impl FnMut(&mut TaxonomyNode)) {
        f(self);
        if let Some(children) = self.subtopics.as_mut() {
            for c in children {
                c.walk_mut(f);
            }
        }
    }

    pub fn leaves(&self) -> Vec<&TaxonomyNode> {
        let mut out = Vec::new();
        self.walk(&mut |n, d| {
            if n.kind(d) == NodeKind::Leaf {
                out.push(n);
            }
        });
        out
    }

    /// Maximum depth of any node (root = 0).
    pub fn depth(&self) -> usize {
        let mut max = 0;
        self.walk(&mut |_, d| max = max.max(d));
        max
    }

    /// Hex SHA-256 of the compact JSON form, for diffing runs.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("taxonomy serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub missing_ids: BTreeSet<String>,
    pub extra_ids: BTreeSet<String>,
    pub duplicate_ids: BTreeSet<String>,
    pub structural_errors: Vec<String>,
    /// Soft-constraint violations; they never make a taxonomy invalid.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    pub is_valid: bool,
}

fn check_note(node: &TaxonomyNode, note: Option<&String>, label: &str, warnings: &mut Vec<String>) {
    match note {
        None => warnings.push(format!("node `{}` has no {label}", node.name)),
        Some(n) if word_count(n) > MAX_NOTE_WORDS => warnings.push(format!(
            "{label} of `{}` has {} words (max {MAX_NOTE_WORDS})",
            node.name,
            word_count(n)
        )),
        _ => {}
    }
}

/// Checks coverage, uniqueness, hallucination and tree shape. `original`, when
/// given, is treated as allowed and must be assigned exactly once.
pub fn validate_taxonomy(tax: &TaxonomyNode, allowed: &BTreeSet<String>, original: Option<&str>) -> ValidationReport {
    let mut allowed = allowed.clone();
    if let Some(o) = original {
        allowed.insert(o.to_string());
    }
    let mut report = ValidationReport::default();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for id in tax.all_paper_ids() {
        *counts.entry(id).or_insert(0) += 1;
    }
    report.missing_ids = allowed.iter().filter(|id| !counts.contains_key(id.as_str())).cloned().collect();
    report.extra_ids = counts.keys().filter(|id| !allowed.contains(**id)).map(|s| s.to_string()).collect();
    report.duplicate_ids = counts.iter().filter(|(_, n)| **n > 1).map(|(id, _)| id.to_string()).collect();

    let label = tax.name.strip_suffix(ROOT_SUFFIX).unwrap_or("");
    if label.trim().is_empty() || label.contains(['<', '>']) {
        report
            .structural_errors
            .push(format!("root name `{}` is not `<TOPIC_LABEL>{ROOT_SUFFIX}`", tax.name));
    }
    let errors = &mut report.structural_errors;
    let warnings = &mut report.warnings;
    tax.walk(&mut |node, depth| {
        let name = &node.name;
        if name.trim().is_empty() {
            errors.push(format!("node at depth {depth} has an empty name"));
        }
        if depth == 0 {
            if node.scope_note.is_some() || node.exclude_note.is_some() {
                errors.push("root must not carry scope_note or exclude_note".into());
            }
            if node.papers.is_some() {
                errors.push("root must not carry papers".into());
            }
            if node.children().is_empty() {
                errors.push("root has no subtopics".into());
            }
            return;
        }
        match (&node.subtopics, &node.papers) {
            (Some(_), Some(_)) => errors.push(format!("node `{name}` has both subtopics and papers")),
            (None, None) => errors.push(format!("node `{name}` has neither subtopics nor papers")),
            (Some(s), None) if s.is_empty() => errors.push(format!("node `{name}` has empty subtopics")),
            (None, Some(p)) if p.is_empty() => errors.push(format!("leaf `{name}` has no papers")),
            (None, Some(p)) if !(LEAF_SIZE_MIN..=LEAF_SIZE_MAX).contains(&p.len()) => warnings.push(format!(
                "leaf `{name}` holds {} papers (typical {LEAF_SIZE_MIN}-{LEAF_SIZE_MAX})",
                p.len()
            )),
            _ => {}
        }
        check_note(node, node.scope_note.as_ref(), "scope_note", warnings);
        check_note(node, node.exclude_note.as_ref(), "exclude_note", warnings);
    });
    report.is_valid = report.missing_ids.is_empty()
        && report.extra_ids.is_empty()
        && report.duplicate_ids.is_empty()
        && report.structural_errors.is_empty();
    report
}

/// Drops nodes left empty by id removal, bottom-up, until nothing changes.
fn prune_empty(node: &mut TaxonomyNode) {
    loop {
        let mut changed = false;
        node.walk_mut(&mut |n| {
            if let Some(children) = n.subtopics.as_mut() {
                let before = children.len();
                children.retain(|c| {
                    let empty_leaf = c.subtopics.is_none() && c.papers.as_ref().is_some_and(|p| p.is_empty());
                    let empty_internal = c.papers.is_none() && c.subtopics.as_ref().is_some_and(|s| s.is_empty());
                    !(empty_leaf || empty_internal)
                });
                changed |= children.len() != before;
            }
        });
        if !changed {
            break;
        }
    }
}

/// Removes extra ids, keeps only the first depth-first occurrence of every id,
/// and prunes emptied leaves and internals. Never assigns anything.
pub fn deterministic_repair(tax: &TaxonomyNode, report: &ValidationReport) -> TaxonomyNode {
    let mut out = tax.clone();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    out.walk_mut(&mut |n| {
        if let Some(papers) = n.papers.as_mut() {
            papers.retain(|id| !report.extra_ids.contains(id) && seen.insert(id.clone()));
        }
    });
    prune_empty(&mut out);
    out
}

/// Paper metadata sent to the taxonomy prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyPaper {
    pub id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub rank: usize,
}

impl TaxonomyPaper {
    pub fn from_record(paper: &PaperRecord, rank: usize) -> Self {
        TaxonomyPaper {
            id: paper.canonical_id.to_string(),
            title: paper.title.clone(),
            abstract_text: paper.abstract_text.clone(),
            rank,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairStatus {
    Valid,
    NeedsReview,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairOutcome {
    pub taxonomy: TaxonomyNode,
    pub status: RepairStatus,
    pub diagnostics: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_output: Option<String>,
}

fn is_catch_all(name: &str) -> bool {
    let lower = name.to_lowercase();
    ["unassigned", "uncategorized", "uncategorised", "miscellaneous"]
        .iter()
        .any(|w| lower.contains(w))
}

fn node_names(tax: &TaxonomyNode) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    tax.walk(&mut |n, _| {
        out.insert(n.name.clone());
    });
    out
}

/// One model round that places missing papers. Skips the call when nothing is
/// missing. Catch-all categories introduced by the model are never accepted.
pub fn llm_repair(
    tax: &TaxonomyNode,
    report: &ValidationReport,
    papers: &[TaxonomyPaper],
    allowed: &BTreeSet<String>,
    original: Option<&str>,
    llm: &dyn LlmClient,
) -> RepairOutcome {
    let status_of = |r: &ValidationReport| if r.is_valid { RepairStatus::Valid } else { RepairStatus::NeedsReview };
    if report.missing_ids.is_empty() {
        return RepairOutcome {
            taxonomy: tax.clone(),
            status: status_of(report),
            diagnostics: describe(report),
            raw_output: None,
        };
    }
    let missing_papers: Vec<&TaxonomyPaper> = papers.iter().filter(|p| report.missing_ids.contains(&p.id)).collect();
    let mut allowed_ids: BTreeSet<&str> = allowed.iter().map(String::as_str).collect();
    if let Some(o) = original {
        allowed_ids.insert(o);
    }
    let user = json!({
        "root_name": tax.name,
        "allowed_ids": allowed_ids,
        "missing_ids": report.missing_ids,
        "extra_ids": report.extra_ids,
        "missing_papers": missing_papers,
        "taxonomy": tax,
    })
    .to_string();
    let request = LlmRequest::new(Task::TaxonomyRepair, prompts::TAXONOMY_REPAIR.system, user, 0.0);
    let mut diagnostics = Vec::new();
    let raw = match llm.complete(&request) {
        Ok(raw) => raw,
        Err(e) => {
            diagnostics.push(format!("repair call failed: {e}"));
            diagnostics.extend(describe(report));
            return RepairOutcome {
                taxonomy: tax.clone(),
                status: RepairStatus::NeedsReview,
                diagnostics,
                raw_output: None,
            };
        }
    };
    let repaired = parse_structured_output(&raw)
        .map_err(|e| e.to_string())
        .and_then(|p| serde_json::from_value::<TaxonomyNode>(p.value).map_err(|e| e.to_string()));
    let candidate = match repaired {
        Ok(t) => t,
        Err(e) => {
            diagnostics.push(format!("repair output unusable: {e}"));
            diagnostics.extend(describe(report));
            return RepairOutcome {
                taxonomy: tax.clone(),
                status: RepairStatus::NeedsReview,
                diagnostics,
                raw_output: Some(raw),
            };
        }
    };
    let before = node_names(tax);
    let catch_all: Vec<String> = node_names(&candidate)
        .into_iter()
        .filter(|n| !before.contains(n) && is_catch_all(n))
        .collect();
    if !catch_all.is_empty() {
        diagnostics.push(format!("repair introduced catch-all categories {catch_all:?}; rejected"));
        diagnostics.extend(describe(report));
        return RepairOutcome {
            taxonomy: tax.clone(),
            status: RepairStatus::NeedsReview,
            diagnostics,
            raw_output: Some(raw),
        };
    }
    let check = validate_taxonomy(&candidate, allowed, original);
    let cleaned = deterministic_repair(&candidate, &check);
    let final_report = validate_taxonomy(&cleaned, allowed, original);
    diagnostics.extend(describe(&final_report));
    RepairOutcome {
        taxonomy: cleaned,
        status: status_of(&final_report),
        diagnostics,
        raw_output: None,
    }
}

/// Human-readable summary of every hard violation in a report.
pub fn describe(report: &ValidationReport) -> Vec<String> {
    let mut out = Vec::new();
    if !report.missing_ids.is_empty() {
        out.push(format!("missing ids: {:?}", report.missing_ids));
    }
    if !report.extra_ids.is_empty() {
        out.push(format!("extra ids: {:?}", report.extra_ids));
    }
    if !report.duplicate_ids.is_empty() {
        out.push(format!("duplicate ids: {:?}", report.duplicate_ids));
    }
    out.extend(report.structural_errors.iter().cloned());
    out
}

/// Original first, then ascending rank; equal ranks keep their order.
/// Ids without a rank sort after ranked ones.
pub fn order_leaf_papers(papers: &[String], original: Option<&str>, rank: &HashMap<String, usize>) -> Vec<String> {
    let mut out: Vec<String> = papers.to_vec();
    out.sort_by_key(|id| {
        let is_original = original == Some(id.as_str());
        (!is_original, rank.get(id).copied().unwrap_or(usize::MAX))
    });
    out
}

/// Applies [`order_leaf_papers`] to every leaf.
pub fn order_all_leaves(tax: &mut TaxonomyNode, original: Option<&str>, rank: &HashMap<String, usize>) {
    tax.walk_mut(&mut |n| {
        if let Some(p) = n.papers.as_mut() {
            *p = order_leaf_papers(p, original, rank);
        }
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    Sibling,
    SubtopicSiblings,
    Isolated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralPosition {
    /// Node names from the root down to the leaf holding the paper.
    pub path: Vec<String>,
    pub mode: PositionMode,
    pub siblings: Vec<String>,
    pub sibling_subtopics: Vec<TaxonomyNode>,
}

pub fn structural_position(tax: &TaxonomyNode, original: &str) -> Result<StructuralPosition> {
    fn find<'a>(node: &'a TaxonomyNode, id: &str, path: &mut Vec<&'a TaxonomyNode>) -> bool {
        path.push(node);
        if node.subtopics.is_none() && node.paper_ids().iter().any(|p| p == id) {
            return true;
        }
        for c in node.children() {
            if find(c, id, path) {
                return true;
            }
        }
        path.pop();
        false
    }
    let count = tax.all_paper_ids().into_iter().filter(|p| *p == original).count();
    if count != 1 {
        return Err(Error::invalid(format!("paper `{original}` is assigned {count} times, expected once")));
    }
    let mut path = Vec::new();
    if !find(tax, original, &mut path) || path.len() < 2 {
        return Err(Error::invalid(format!("paper `{original}` is not in a leaf")));
    }
    let leaf = path[path.len() - 1];
    let parent = path[path.len() - 2];
    let siblings: Vec<String> = leaf.paper_ids().iter().filter(|p| *p != original).cloned().collect();
    let sibling_subtopics: Vec<TaxonomyNode> = parent
        .children()
        .iter()
        .filter(|c| !std::ptr::eq(*c, leaf))
        .cloned()
        .collect();
    let mode = if !siblings.is_empty() {
        PositionMode::Sibling
    } else if !sibling_subtopics.is_empty() {
        PositionMode::SubtopicSiblings
    } else {
        PositionMode::Isolated
    };
    Ok(StructuralPosition {
        path: path.iter().map(|n| n.name.clone()).collect(),
        mode,
        siblings,
        sibling_subtopics: if mode == PositionMode::SubtopicSiblings { sibling_subtopics } else { Vec::new() },
    })
}

/// Generated taxonomy plus its validation trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyBuild {
    pub outcome: RepairOutcome,
    pub initial_report: Option<ValidationReport>,
    pub final_report: ValidationReport,
    pub content_hash: String,
}

/// Single generation call over all papers, validation, deterministic repair,
/// and at most one model repair round. `papers` includes the target.
pub fn build_taxonomy(
    topic: &str,
    papers: &[TaxonomyPaper],
    original: Option<&str>,
    llm: &dyn LlmClient,
    allow_llm_repair: bool,
) -> Result<TaxonomyBuild> {
    if papers.len() < 2 {
        return Err(Error::invalid("taxonomy needs at least two papers"));
    }
    let allowed: BTreeSet<String> = papers.iter().map(|p| p.id.clone()).collect();
    let rank: HashMap<String, usize> = papers.iter().map(|p| (p.id.clone(), p.rank)).collect();
    let user = json!({"topic": topic, "original_paper_id": original, "papers": papers}).to_string();
    let request = LlmRequest::new(Task::Taxonomy, prompts::TAXONOMY.system, user, 0.0);
    let empty_root = || TaxonomyNode::root(topic, Vec::new());
    let generated = llm
        .complete(&request)
        .map_err(|e| (e.to_string(), None))
        .and_then(|raw| {
            parse_structured_output(&raw)
                .map_err(|e| e.to_string())
                .and_then(|p| serde_json::from_value::<TaxonomyNode>(p.value).map_err(|e| e.to_string()))
                .map_err(|e| (e, Some(raw)))
        });
    let tax = match generated {
        Ok(t) => t,
        Err((reason, raw)) => {
            warn!(%reason, "taxonomy generation failed");
            let tax = empty_root();
            let report = validate_taxonomy(&tax, &allowed, original);
            let mut diagnostics = vec![format!("taxonomy generation failed: {reason}")];
            diagnostics.extend(describe(&report));
            return Ok(TaxonomyBuild {
                content_hash: tax.content_hash(),
                outcome: RepairOutcome {
                    taxonomy: tax,
                    status: RepairStatus::NeedsReview,
                    diagnostics,
                    raw_output: raw,
                },
                initial_report: None,
                final_report: report,
            });
        }
    };
    let initial = validate_taxonomy(&tax, &allowed, original);
    let mut outcome = if initial.is_valid {
        RepairOutcome {
            taxonomy: tax,
            status: RepairStatus::Valid,
            diagnostics: Vec::new(),
            raw_output: None,
        }
    } else {
        let cleaned = deterministic_repair(&tax, &initial);
        let after = validate_taxonomy(&cleaned, &allowed, original);
        if after.is_valid || after.missing_ids.is_empty() || !allow_llm_repair {
            RepairOutcome {
                status: if after.is_valid { RepairStatus::Valid } else { RepairStatus::NeedsReview },
                diagnostics: describe(&after),
                taxonomy: cleaned,
                raw_output: None,
            }
        } else {
            llm_repair(&cleaned, &after, papers, &allowed, original, llm)
        }
    };
    order_all_leaves(&mut outcome.taxonomy, original, &rank);
    let final_report = validate_taxonomy(&outcome.taxonomy, &allowed, original);
    Ok(TaxonomyBuild {
        content_hash: outcome.taxonomy.content_hash(),
        outcome,
        initial_report: Some(initial),
        final_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::MockLlm;

    fn ids(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn sample() -> TaxonomyNode {
        TaxonomyNode::root(
            "Agent RL",
            vec![
                TaxonomyNode::internal(
                    "Frameworks",
                    vec![
                        TaxonomyNode::leaf("Multi-env", ids(&["o", "a", "b"])),
                        TaxonomyNode::leaf("Single-env", ids(&["c", "d"])),
                    ],
                ),
                TaxonomyNode::leaf("Benchmarks", ids(&["e", "f"])),
            ],
        )
    }

    #[test]
    fn clean_taxonomy_is_valid() {
        let r = validate_taxonomy(&sample(), &set(&["a", "b", "c", "d", "e", "f"]), Some("o"));
        assert!(r.is_valid, "{r:?}");
    }

    #[test]
    fn violations_are_reported() {
        let r = validate_taxonomy(&sample(), &set(&["a", "b", "c", "d", "e", "f", "g"]), Some("o"));
        assert_eq!(r.missing_ids, set(&["g"]));
        let r = validate_taxonomy(&sample(), &set(&["a", "b", "c", "d", "e"]), Some("o"));
        assert_eq!(r.extra_ids, set(&["f"]));
        assert!(!r.is_valid);
    }

    #[test]
    fn structural_checks() {
        let mut t = sample();
        t.name = "Bad Root".into();
        t.subtopics.as_mut().unwrap()[1].papers = Some(vec![]);
        let r = validate_taxonomy(&t, &set(&["a", "b", "c", "d", "o"]), None);
        assert_eq!(r.structural_errors.len(), 2, "{:?}", r.structural_errors);
        let mut t = sample();
        t.subtopics.as_mut().unwrap()[1].scope_note = Some("word ".repeat(26));
        let r = validate_taxonomy(&t, &set(&["a", "b", "c", "d", "e", "f"]), Some("o"));
        assert!(r.is_valid);
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn repair_removes_extras_and_duplicates() {
        let mut t = sample();
        t.subtopics.as_mut().unwrap()[1].papers = Some(ids(&["e", "a", "x"]));
        let allowed = set(&["a", "b", "c", "d", "e"]);
        let r = validate_taxonomy(&t, &allowed, Some("o"));
        assert_eq!(r.extra_ids, set(&["x"]));
        assert_eq!(r.duplicate_ids, set(&["a"]));
        let fixed = deterministic_repair(&t, &r);
        assert_eq!(fixed.subtopics.as_ref().unwrap()[1].paper_ids(), ids(&["e"]).as_slice());
        assert!(validate_taxonomy(&fixed, &allowed, Some("o")).is_valid);
    }

    #[test]
    fn cascade_prune() {
        let t = TaxonomyNode::root(
            "T",
            vec![
                TaxonomyNode::internal("I", vec![TaxonomyNode::leaf("L", ids(&["x"]))]),
                TaxonomyNode::leaf("K", ids(&["a", "b"])),
            ],
        );
        let r = validate_taxonomy(&t, &set(&["a", "b"]), None);
        let fixed = deterministic_repair(&t, &r);
        assert_eq!(fixed.children().len(), 1);
        assert_eq!(fixed.children()[0].name, "K");
    }

    #[test]
    fn leaf_ordering() {
        let rank: HashMap<String, usize> = [("A".to_string(), 2), ("B".to_string(), 5)].into_iter().collect();
        assert_eq!(order_leaf_papers(&ids(&["B", "orig", "A"]), Some("orig"), &rank), ids(&["orig", "A", "B"]));
        assert_eq!(order_leaf_papers(&ids(&["B", "A"]), None, &rank), ids(&["A", "B"]));
        let tied: HashMap<String, usize> = [("x".to_string(), 1), ("y".to_string(), 1)].into_iter().collect();
        assert_eq!(order_leaf_papers(&ids(&["y", "x"]), None, &tied), ids(&["y", "x"]));
    }

    #[test]
    fn positions() {
        let p = structural_position(&sample(), "o").unwrap();
        assert_eq!(p.mode, PositionMode::Sibling);
        assert_eq!(p.siblings, ids(&["a", "b"]));
        assert_eq!(p.path, ["Agent RL Survey Taxonomy", "Frameworks", "Multi-env"]);

        let t = TaxonomyNode::root(
            "T",
            vec![TaxonomyNode::internal(
                "I",
                vec![
                    TaxonomyNode::leaf("Solo", ids(&["o"])),
                    TaxonomyNode::leaf("L1", ids(&["a", "b"])),
                    TaxonomyNode::leaf("L2", ids(&["c", "d"])),
                ],
            )],
        );
        let p = structural_position(&t, "o").unwrap();
        assert_eq!(p.mode, PositionMode::SubtopicSiblings);
        assert_eq!(p.sibling_subtopics.len(), 2);

        let t = TaxonomyNode::root(
            "T",
            vec![TaxonomyNode::internal("I", vec![TaxonomyNode::leaf("Solo", ids(&["o"]))])],
        );
        assert_eq!(structural_position(&t, "o").unwrap().mode, PositionMode::Isolated);
        assert!(structural_position(&t, "zz").is_err());
    }

    fn papers(xs: &[&str]) -> Vec<TaxonomyPaper> {
        xs.iter()
            .enumerate()
            .map(|(i, id)| TaxonomyPaper {
                id: id.to_string(),
                title: format!("Title {id}"),
                abstract_text: String::new(),
                rank: i,
            })
            .collect()
    }

    #[test]
    fn build_with_two_stage_repair() {
        let first = TaxonomyNode::root(
            "T",
            vec![
                TaxonomyNode::leaf("L1", ids(&["o", "a", "ghost"])),
                TaxonomyNode::leaf("L2", ids(&["c", "d"])),
            ],
        );
        let fixed = TaxonomyNode::root(
            "T",
            vec![
                TaxonomyNode::leaf("L1", ids(&["a", "o", "b"])),
                TaxonomyNode::leaf("L2", ids(&["c", "d"])),
            ],
        );
        let llm = MockLlm::default()
            .reply(Task::Taxonomy, &[], serde_json::to_string(&first).unwrap())
            .reply(Task::TaxonomyRepair, &["\"missing_ids\":[\"b\"]"], serde_json::to_string(&fixed).unwrap());
        let build = build_taxonomy("T", &papers(&["o", "a", "b", "c", "d"]), Some("o"), &llm, true).unwrap();
        assert_eq!(build.outcome.status, RepairStatus::Valid, "{:?}", build.outcome.diagnostics);
        assert_eq!(build.outcome.taxonomy.children()[0].paper_ids(), ids(&["o", "a", "b"]).as_slice());
        assert_eq!(llm.calls_for(Task::TaxonomyRepair), 1);
    }

    #[test]
    fn still_missing_needs_review_and_catch_all_rejected() {
        let first = TaxonomyNode::root("T", vec![TaxonomyNode::leaf("L1", ids(&["o", "a"]))]);
        let bad = TaxonomyNode::root(
            "T",
            vec![
                TaxonomyNode::leaf("L1", ids(&["o", "a"])),
                TaxonomyNode::leaf("Unassigned", ids(&["b"])),
            ],
        );
        let llm = MockLlm::default()
            .reply(Task::Taxonomy, &[], serde_json::to_string(&first).unwrap())
            .reply(Task::TaxonomyRepair, &[], serde_json::to_string(&bad).unwrap());
        let build = build_taxonomy("T", &papers(&["o", "a", "b"]), Some("o"), &llm, true).unwrap();
        assert_eq!(build.outcome.status, RepairStatus::NeedsReview);
        assert!(build.final_report.missing_ids.contains("b"));

        let llm = MockLlm::default().reply(Task::Taxonomy, &[], "not json at all");
        let build = build_taxonomy("T", &papers(&["o", "a"]), Some("o"), &llm, true).unwrap();
        assert_eq!(build.outcome.status, RepairStatus::NeedsReview);
        assert_eq!(build.outcome.raw_output.as_deref(), Some("not json at all"));
    }

    #[test]
    fn no_missing_means_no_repair_call() {
        let llm = MockLlm::default();
        let t = sample();
        let r = validate_taxonomy(&t, &set(&["a", "b", "c", "d", "e", "f"]), Some("o"));
        let out = llm_repair(&t, &r, &[], &set(&["a"]), Some("o"), &llm);
        assert_eq!(out.status, RepairStatus::Valid);
        assert!(llm.calls().is_empty());
    }

    #[test]
    fn json_shape_round_trips() {
        let raw = r#"{"name":"X Survey Taxonomy","subtopics":[{"name":"L","scope_note":"s","exclude_note":"e","papers":["a","b"]}]}"#;
        let t: TaxonomyNode = serde_json::from_str(raw).unwrap();
        assert_eq!(serde_json::to_string(&t).unwrap(), raw);
        assert_eq!(t.content_hash().len(), 64);
    }
}
