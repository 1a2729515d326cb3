//! Phase IV: deterministic Markdown rendering of a complete report.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    cited_indices, ComparisonMode, ContributionComparison, CoreComparisonMode, NoveltyReport, RefutationStatus,
};
use crate::error::{Error, Result};
use crate::taxonomy::{PositionMode, TaxonomyNode};
use crate::text::truncate_words;
use crate::verification::{QuoteLocation, SegmentType};

pub const ELLIPSIS: &str = "…";
pub const MIN_QUOTE_LIMIT: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub quote_truncation_limit: usize,
    pub indent_unit: String,
    pub emit_pdf: bool,
    pub output_dir: PathBuf,
    /// External Markdown-to-PDF converter and its extra arguments.
    pub pdf_converter: String,
    #[serde(default)]
    pub pdf_args: Vec<String>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            quote_truncation_limit: 90,
            indent_unit: "  ".into(),
            emit_pdf: false,
            output_dir: PathBuf::from("."),
            pdf_converter: "pandoc".into(),
            pdf_args: Vec::new(),
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.quote_truncation_limit < MIN_QUOTE_LIMIT {
            return Err(Error::invalid(format!(
                "quote truncation limit {} is below {MIN_QUOTE_LIMIT}",
                self.quote_truncation_limit
            )));
        }
        if self.indent_unit.is_empty() || !self.indent_unit.chars().all(|c| c == ' ' || c == '\t') {
            return Err(Error::invalid("indent unit must be non-empty whitespace"));
        }
        Ok(())
    }
}

/// Collapses whitespace and truncates to `limit` words with a trailing ellipsis.
pub fn truncate_quote(quote: &str, limit: usize) -> String {
    match truncate_words(quote, limit) {
        Some(t) => format!("{t} {ELLIPSIS}"),
        None => quote.split_whitespace().collect::<Vec<_>>().join(" "),
    }
}

fn spaced_citations(text: &str) -> String {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(\S)\[(\d+)\]").expect("valid regex"));
    re.replace_all(text, "$1 [$2]").into_owned()
}

fn single_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// File name derived from the target id and pipeline version only.
pub fn output_filename(report: &NoveltyReport) -> String {
    let version: String = report
        .metadata
        .tool_version
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("novelty_report_{}_v{}.md", report.original_paper.canonical_id.slug(), version)
}

struct Citations<'a> {
    by_id: HashMap<String, &'a str>,
}

impl<'a> Citations<'a> {
    fn new(report: &'a NoveltyReport) -> Self {
        Citations {
            by_id: report
                .references
                .iter()
                .map(|r| (r.canonical_id.to_string(), r.citation.as_str()))
                .collect(),
        }
    }

    fn label(&self, id: &str, title: &str) -> String {
        match self.by_id.get(id) {
            Some(c) => format!("{}: {title}", spaced_citations(c)),
            None => title.to_string(),
        }
    }
}

fn render_tree(
    out: &mut String,
    node: &TaxonomyNode,
    depth: usize,
    indent: &str,
    cites: &Citations<'_>,
    original: &str,
) {
    let pad = indent.repeat(depth);
    let mut line = format!("{pad}- **{}**", single_line(&node.name));
    if let Some(papers) = &node.papers {
        let refs: Vec<String> = papers
            .iter()
            .map(|id| {
                let c = cites.by_id.get(id).map_or_else(|| id.clone(), |c| spaced_citations(c));
                if id == original {
                    format!("{c} (this paper)")
                } else {
                    c
                }
            })
            .collect();
        let _ = write!(line, ": {}", refs.join(", "));
    }
    if let Some(s) = &node.scope_note {
        let _ = write!(line, "; scope: {}", single_line(s));
    }
    out.push_str(&line);
    out.push('\n');
    for c in node.children() {
        render_tree(out, c, depth + 1, indent, cites, original);
    }
}

fn location_text(loc: &QuoteLocation) -> String {
    let state = if loc.found { "verified" } else { "not verified" };
    format!("{state}, score {:.2}", loc.match_score)
}

fn status_text(s: RefutationStatus) -> &'static str {
    match s {
        RefutationStatus::CanRefute => "can refute",
        RefutationStatus::CannotRefute => "cannot refute",
        RefutationStatus::Unclear => "unclear",
    }
}

fn render_comparison(out: &mut String, c: &ContributionComparison, cites: &Citations<'_>, limit: usize) {
    let mode = match c.comparison_mode {
        ComparisonMode::Fulltext => "full text",
        ComparisonMode::Abstract => "abstract only",
    };
    let _ = writeln!(
        out,
        "#### {}\n\n- **Judgment:** {}\n- **Compared on:** {mode}",
        cites.label(&c.canonical_id.to_string(), &single_line(&c.candidate_paper_title)),
        status_text(c.refutation_status)
    );
    if c.downgraded {
        out.push_str("- **Downgraded:** evidence could not be verified\n");
    }
    out.push('\n');
    if let Some(ev) = &c.refutation_evidence {
        if !ev.summary.is_empty() {
            let _ = writeln!(out, "{}\n", spaced_citations(&single_line(&ev.summary)));
        }
        for (i, p) in ev.evidence_pairs.iter().enumerate() {
            let _ = writeln!(out, "Evidence pair {}:\n", i + 1);
            let _ = writeln!(
                out,
                "- Original ({}; {}):\n\n  > {}\n",
                single_line(&p.original_paragraph_label),
                location_text(&p.original_location),
                truncate_quote(&p.original_quote, limit)
            );
            let _ = writeln!(
                out,
                "- Candidate ({}; {}):\n\n  > {}\n",
                single_line(&p.candidate_paragraph_label),
                location_text(&p.candidate_location),
                truncate_quote(&p.candidate_quote, limit)
            );
            if !p.rationale.is_empty() {
                let _ = writeln!(out, "- Rationale: {}\n", spaced_citations(&single_line(&p.rationale)));
            }
        }
    }
    if let Some(note) = &c.brief_note {
        let _ = writeln!(out, "{}\n", spaced_citations(&single_line(note)));
    }
    if !c.similarity_segments.is_empty() {
        let _ = writeln!(
            out,
            "Textual overlap: {} verified segment(s), see the appendix.\n",
            c.similarity_segments.len()
        );
    }
}

fn check_citations(report: &NoveltyReport) -> Result<()> {
    let known: BTreeSet<usize> = report.references.iter().map(|r| r.index).collect();
    let mut texts: Vec<&str> = vec![report.core_task_survey.narrative.as_str()];
    texts.extend(report.contribution_analysis.overall_assessment.iter().map(String::as_str));
    for c in report.contribution_analysis.contributions.iter().flat_map(|c| &c.comparisons) {
        texts.extend(c.brief_note.as_deref());
        if let Some(ev) = &c.refutation_evidence {
            texts.push(&ev.summary);
            texts.extend(ev.evidence_pairs.iter().map(|p| p.rationale.as_str()));
        }
    }
    for c in &report.core_task_comparisons.comparisons {
        texts.push(&c.brief_comparison);
    }
    if let Some(s) = &report.core_task_comparisons.subtopic_summary {
        texts.push(&s.summary);
    }
    match texts.iter().flat_map(|t| cited_indices(t)).find(|k| !known.contains(k)) {
        Some(k) => Err(Error::DanglingCitation(k)),
        None => Ok(()),
    }
}

pub fn render_markdown(report: &NoveltyReport, cfg: &RenderConfig) -> Result<String> {
    cfg.validate()?;
    check_citations(report)?;
    let cites = Citations::new(report);
    let limit = cfg.quote_truncation_limit;
    let paper = &report.original_paper;
    let meta = &report.metadata;
    let mut out = String::new();

    let _ = writeln!(out, "# Novelty Assessment: {}\n", single_line(&paper.title));
    let _ = writeln!(out, "- **Paper ID:** `{}`", paper.canonical_id);
    if let Some(url) = &paper.url {
        let _ = writeln!(out, "- **URL:** <{url}>");
    }
    if let Some(d) = &paper.publication_date {
        let _ = writeln!(out, "- **Published:** {d}");
    }
    let _ = writeln!(out, "- **Core task:** {}", single_line(&paper.core_task));
    let _ = writeln!(out, "- **Generated:** {}", meta.generated_at);
    let _ = writeln!(out, "- **Pipeline version:** {}", meta.tool_version);
    let status = match meta.taxonomy_status {
        crate::taxonomy::RepairStatus::Valid => "valid",
        crate::taxonomy::RepairStatus::NeedsReview => "needs review",
    };
    let _ = writeln!(out, "- **Taxonomy status:** {status}");
    let _ = writeln!(out, "- **Candidates examined:** {}", meta.candidates_examined);
    if !meta.flags.is_empty() {
        let _ = writeln!(out, "- **Flags:** {}", meta.flags.join(", "));
    }
    out.push('\n');

    if !paper.contributions.is_empty() {
        out.push_str("### Claimed contributions\n\n");
        for (i, c) in paper.contributions.iter().enumerate() {
            let _ = writeln!(out, "{}. **{}**: {}", i + 1, single_line(&c.name), single_line(&c.author_claim_text));
        }
        out.push('\n');
    }

    // Core task survey
    let survey = &report.core_task_survey;
    out.push_str("## Core Task Survey\n\n### Taxonomy\n\n");
    render_tree(&mut out, &survey.taxonomy, 0, &cfg.indent_unit, &cites, &paper.canonical_id.to_string());
    out.push('\n');
    out.push_str("### Narrative\n\n");
    if survey.narrative.trim().is_empty() {
        out.push_str("No narrative was generated.\n\n");
    } else {
        for para in survey.narrative.split("\n\n").map(single_line).filter(|p| !p.is_empty()) {
            let _ = writeln!(out, "{}\n", spaced_citations(&para));
        }
    }
    if !survey.papers_index.is_empty() {
        out.push_str("### Surveyed papers\n\n");
        for p in &survey.papers_index {
            let mut line = format!("- {} [{}] *{}*", p.alias, p.index, single_line(&p.title));
            if let Some(y) = p.year {
                let _ = write!(line, " ({y})");
            }
            if let Some(o) = &p.brief_one_liner {
                let _ = write!(line, ": {}", single_line(o));
            }
            out.push_str(&line);
            out.push('\n');
        }
        out.push('\n');
    }

    // Core task comparisons
    let ctc = &report.core_task_comparisons;
    out.push_str("## Core Task Comparisons\n\n");
    if !ctc.path.is_empty() {
        let _ = writeln!(out, "Taxonomy position: {}\n", ctc.path.join(" > "));
    }
    match ctc.mode {
        PositionMode::Sibling => {
            for c in &ctc.comparisons {
                let mode = match c.comparison_mode {
                    CoreComparisonMode::Fulltext => "full text",
                    CoreComparisonMode::AbstractFallback => "abstract only",
                };
                let _ = writeln!(
                    out,
                    "### {}\n\n- **Relationship:** {}\n- **Compared on:** {mode}",
                    cites.label(&c.canonical_id.to_string(), &single_line(&c.candidate_paper_title)),
                    c.relationship
                );
                if c.is_duplicate_variant {
                    out.push_str("- **Possible duplicate or variant**\n");
                }
                let _ = writeln!(out, "\n{}\n", spaced_citations(&single_line(&c.brief_comparison)));
            }
            if ctc.comparisons.is_empty() {
                out.push_str("No sibling comparisons are available.\n\n");
            }
        }
        PositionMode::SubtopicSiblings => {
            if let Some(s) = &ctc.subtopic_summary {
                let _ = writeln!(
                    out,
                    "The paper's leaf has no other papers. Compared against sibling subtopics: {}.\n",
                    s.sibling_subtopics.join(", ")
                );
                if !s.summary.trim().is_empty() {
                    let _ = writeln!(out, "{}\n", spaced_citations(&single_line(&s.summary)));
                }
            }
        }
        PositionMode::Isolated => {
            let reason = ctc.isolation.as_ref().map_or("No comparison targets.", |i| i.reason.as_str());
            let _ = writeln!(out, "No core-task comparison was performed. {}\n", single_line(reason));
        }
    }

    // Contribution analysis
    let ca = &report.contribution_analysis;
    out.push_str("## Contribution Analysis\n\n### Overall assessment\n\n");
    if ca.overall_assessment.is_empty() {
        out.push_str("No overall assessment was generated.\n\n");
    }
    for p in &ca.overall_assessment {
        let _ = writeln!(out, "{}\n", spaced_citations(&single_line(p)));
    }
    for (i, c) in ca.contributions.iter().enumerate() {
        let _ = writeln!(out, "### Contribution {}: {}\n", i + 1, single_line(&c.contribution_name));
        if !c.author_claim_text.is_empty() {
            let _ = writeln!(out, "> {}\n", single_line(&c.author_claim_text));
        }
        let s = &c.statistics;
        let _ = writeln!(
            out,
            "Candidates examined: {}. Can refute: {}. Non-refutable or unclear: {}.\n",
            s.candidates_examined, s.can_refute, s.non_refutable_or_unclear
        );
        for cmp in &c.comparisons {
            render_comparison(&mut out, cmp, &cites, limit);
        }
    }

    // Textual similarity appendix
    out.push_str("## Appendix: Textual Similarity\n\n");
    if report.textual_similarity.is_empty() {
        out.push_str("No overlapping text segments were found.\n\n");
    }
    for entry in &report.textual_similarity {
        let _ = writeln!(
            out,
            "### {}: {}\n",
            spaced_citations(&entry.citation),
            single_line(&entry.candidate_paper_title)
        );
        for seg in &entry.segments {
            let kind = match seg.segment_type {
                SegmentType::Direct => "Direct",
                SegmentType::Paraphrase => "Paraphrase",
            };
            let _ = writeln!(
                out,
                "Segment {} ({kind}, {}):\n\n- Original:\n\n  > {}\n\n- Candidate:\n\n  > {}\n",
                seg.segment_id,
                single_line(&seg.location),
                truncate_quote(&seg.original_text, limit),
                truncate_quote(&seg.candidate_text, limit)
            );
            if !seg.rationale.is_empty() {
                let _ = writeln!(out, "- Rationale: {}\n", single_line(&seg.rationale));
            }
        }
    }

    // References
    out.push_str("## References\n\n");
    for r in &report.references {
        let mut line = format!("- [{}] {}: {}", r.index, r.alias, single_line(&r.title));
        if let Some(y) = r.year {
            let _ = write!(line, " ({y})");
        }
        if let Some(u) = &r.url {
            let _ = write!(line, " <{u}>");
        }
        if r.is_original {
            line.push_str(" (this paper)");
        }
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderOutput {
    pub markdown: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pdf: Option<PathBuf>,
}

/// Writes the Markdown file and, when configured, converts it to PDF.
pub fn write_report(report: &NoveltyReport, cfg: &RenderConfig) -> Result<RenderOutput> {
    let markdown = render_markdown(report, cfg)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let path = cfg.output_dir.join(output_filename(report));
    std::fs::write(&path, markdown).map_err(|e| Error::io(&path, e))?;
    let pdf = if cfg.emit_pdf { Some(convert_pdf(&path, cfg)?) } else { None };
    Ok(RenderOutput { markdown: path, pdf })
}

pub fn convert_pdf(markdown: &Path, cfg: &RenderConfig) -> Result<PathBuf> {
    let pdf = markdown.with_extension("pdf");
    let status = Command::new(&cfg.pdf_converter)
        .arg(markdown)
        .arg("-o")
        .arg(&pdf)
        .args(&cfg.pdf_args)
        .status()
        .map_err(|e| Error::io(&cfg.pdf_converter, e))?;
    if !status.success() {
        return Err(Error::invalid(format!("{} exited with {status}", cfg.pdf_converter)));
    }
    Ok(pdf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quote_truncation() {
        let q = vec!["w"; 120].join(" ");
        let t = truncate_quote(&q, 90);
        assert_eq!(t.split_whitespace().count(), 91);
        assert!(t.ends_with(ELLIPSIS));
        assert_eq!(truncate_quote("a  b\nc", 90), "a b c");
    }

    #[test]
    fn citation_spacing() {
        assert_eq!(spaced_citations("AgentGym-RL[1] and Foo[12]."), "AgentGym-RL [1] and Foo [12].");
        assert_eq!(spaced_citations("already [3]"), "already [3]");
    }

    #[test]
    fn config_validation() {
        assert!(RenderConfig::default().validate().is_ok());
        let bad = RenderConfig {
            quote_truncation_limit: 29,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
