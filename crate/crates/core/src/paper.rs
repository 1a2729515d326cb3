//! Identity, metadata, quality flags and document normalization primitives.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use md5::{Digest, Md5};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::{LlmClient, LlmRequest, Task};
use crate::prompts;
use crate::structured::parse_structured_output;
use crate::text::{normalize_text, tokenize};

/// Hard cap on preprocessed document length, in characters.
pub const MAX_DOCUMENT_CHARS: usize = 200_000;

/// Identifier schemes in descending metadata quality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IdScheme {
    Doi,
    Arxiv,
    Openreview,
    TitleHash,
}

impl IdScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            IdScheme::Doi => "doi",
            IdScheme::Arxiv => "arxiv",
            IdScheme::Openreview => "openreview",
            IdScheme::TitleHash => "title-hash",
        }
    }
}

/// A paper identity. Rendered and serialized as `scheme:value`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CanonicalId {
    pub scheme: IdScheme,
    pub value: String,
}

impl CanonicalId {
    pub fn new(scheme: IdScheme, value: impl Into<String>) -> Self {
        CanonicalId {
            scheme,
            value: value.into(),
        }
    }

    /// Title-hash identity: MD5 hex digest of the normalized title.
    pub fn from_title(title: &str) -> Result<Self> {
        Ok(CanonicalId::new(IdScheme::TitleHash, title_hash(title)?))
    }

    /// File-system safe rendering of the id.
    pub fn slug(&self) -> String {
        self.to_string()
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
            .collect()
    }
}

impl fmt::Display for CanonicalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.scheme.as_str(), self.value)
    }
}

impl FromStr for CanonicalId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (scheme, value) = s
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("canonical id `{s}` has no scheme")))?;
        let scheme = match scheme {
            "doi" => IdScheme::Doi,
            "arxiv" => IdScheme::Arxiv,
            "openreview" => IdScheme::Openreview,
            "title-hash" => IdScheme::TitleHash,
            other => return Err(Error::invalid(format!("unknown id scheme `{other}`"))),
        };
        if value.is_empty() {
            return Err(Error::invalid(format!("canonical id `{s}` has an empty value")));
        }
        Ok(CanonicalId::new(scheme, value))
    }
}

impl Serialize for CanonicalId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CanonicalId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Lowercase, collapse whitespace, and strip surrounding punctuation.
pub fn normalize_title(title: &str) -> Result<String> {
    let collapsed = title.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    let trimmed = collapsed.trim_matches(|c: char| !c.is_alphanumeric());
    if trimmed.is_empty() {
        return Err(Error::invalid("title is empty after normalization"));
    }
    Ok(trimmed.to_string())
}

pub fn title_hash(title: &str) -> Result<String> {
    let normalized = normalize_title(title)?;
    Ok(hex::encode(Md5::digest(normalized.as_bytes())))
}

/// External identifiers attached to a paper. Unknown schemes are dropped upstream.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identifiers {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doi: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arxiv_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub openreview_id: Option<String>,
}

impl Identifiers {
    /// Fill absent identifiers from `other`.
    pub fn merge_missing(&mut self, other: &Identifiers) {
        if self.doi.is_none() {
            self.doi = other.doi.clone();
        }
        if self.arxiv_id.is_none() {
            self.arxiv_id = other.arxiv_id.clone();
        }
        if self.openreview_id.is_none() {
            self.openreview_id = other.openreview_id.clone();
        }
    }
}

fn clean_doi(doi: &str) -> Option<String> {
    let d = doi.trim();
    let lower = d.to_ascii_lowercase();
    let stripped = ["https://doi.org/", "http://doi.org/", "https://dx.doi.org/", "doi:"]
        .iter()
        .find_map(|p| lower.strip_prefix(p))
        .unwrap_or(&lower);
    (!stripped.is_empty()).then(|| stripped.to_string())
}

fn clean_arxiv(id: &str) -> Option<String> {
    static VERSION: OnceLock<Regex> = OnceLock::new();
    let re = VERSION.get_or_init(|| Regex::new(r"v\d+$").unwrap());
    let s = id.trim();
    let s = s
        .strip_prefix("arXiv:")
        .or_else(|| s.strip_prefix("arxiv:"))
        .unwrap_or(s);
    let s = re.replace(s, "");
    (!s.is_empty()).then(|| s.to_string())
}

fn clean_plain(id: &str) -> Option<String> {
    let s = id.trim();
    (!s.is_empty()).then(|| s.to_string())
}

/// Highest-priority identity available: DOI > arXiv > OpenReview > title hash.
pub fn canonical_id_of(ids: &Identifiers, title: &str) -> Result<CanonicalId> {
    let title_fallback = CanonicalId::from_title(title)?;
    if let Some(doi) = ids.doi.as_deref().and_then(clean_doi) {
        return Ok(CanonicalId::new(IdScheme::Doi, doi));
    }
    if let Some(arxiv) = ids.arxiv_id.as_deref().and_then(clean_arxiv) {
        return Ok(CanonicalId::new(IdScheme::Arxiv, arxiv));
    }
    if let Some(or) = ids.openreview_id.as_deref().and_then(clean_plain) {
        return Ok(CanonicalId::new(IdScheme::Openreview, or));
    }
    Ok(title_fallback)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityFlag {
    Perfect,
    Partial,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assessment {
    Support,
    SomewhatSupport,
    Reject,
    InsufficientInformation,
}

impl Assessment {
    pub const ALL: [Assessment; 4] = [
        Assessment::Support,
        Assessment::SomewhatSupport,
        Assessment::Reject,
        Assessment::InsufficientInformation,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Criterion {
    #[serde(rename = "type")]
    pub criterion_type: String,
    pub assessment: Assessment,
}

impl Criterion {
    pub fn new(criterion_type: impl Into<String>, assessment: Assessment) -> Self {
        Criterion {
            criterion_type: criterion_type.into(),
            assessment,
        }
    }
}

/// Per-criterion assessments returned by the search engine for one hit.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationVerdict {
    pub criteria: Vec<Criterion>,
}

pub fn compute_quality_flag(verdict: &VerificationVerdict) -> Result<QualityFlag> {
    let criteria = &verdict.criteria;
    if criteria.is_empty() {
        return Err(Error::invalid("verdict has no criteria"));
    }
    if criteria.iter().all(|c| c.assessment == Assessment::Support) {
        return Ok(QualityFlag::Perfect);
    }
    let partial = if criteria.len() == 1 {
        criteria[0].assessment == Assessment::SomewhatSupport
    } else {
        criteria.iter().any(|c| {
            matches!(c.assessment, Assessment::Support | Assessment::SomewhatSupport)
                && c.criterion_type != "time"
        })
    };
    Ok(if partial { QualityFlag::Partial } else { QualityFlag::No })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DateGranularity {
    Year,
    YearMonth,
    YearMonthDay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DateSource {
    Url,
    Regex,
    Llm,
    Metadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicationDate {
    pub year: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub month: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub day: Option<u8>,
    pub granularity: DateGranularity,
    pub source_tier: DateSource,
}

impl PublicationDate {
    pub fn new(year: i32, month: Option<u8>, day: Option<u8>, source_tier: DateSource) -> Result<Self> {
        let granularity = match (month, day) {
            (None, None) => DateGranularity::Year,
            (Some(m), None) if (1..=12).contains(&m) => DateGranularity::YearMonth,
            (Some(m), Some(d)) if (1..=12).contains(&m) && (1..=31).contains(&d) => {
                DateGranularity::YearMonthDay
            }
            _ => return Err(Error::invalid(format!("bad date {year}-{month:?}-{day:?}"))),
        };
        if !(1000..=9999).contains(&year) {
            return Err(Error::invalid(format!("implausible year {year}")));
        }
        Ok(PublicationDate {
            year,
            month,
            day,
            granularity,
            source_tier,
        })
    }

    /// Parses `YYYY`, `YYYY-MM` or `YYYY-MM-DD`.
    pub fn parse_iso(s: &str, source_tier: DateSource) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split('-').collect();
        let num = |p: &str| p.parse::<i64>().map_err(|_| Error::invalid(format!("bad date `{s}`")));
        match parts.as_slice() {
            [y] => Self::new(num(y)? as i32, None, None, source_tier),
            [y, m] => Self::new(num(y)? as i32, Some(num(m)? as u8), None, source_tier),
            [y, m, d] => Self::new(num(y)? as i32, Some(num(m)? as u8), Some(num(d)? as u8), source_tier),
            _ => Err(Error::invalid(format!("bad date `{s}`"))),
        }
    }

    /// Strictly later at the coarsest precision both dates share.
    pub fn is_after(&self, other: &PublicationDate) -> bool {
        let ord = self.year.cmp(&other.year).then_with(|| match (self.month, other.month) {
            (Some(a), Some(b)) => a.cmp(&b).then_with(|| match (self.day, other.day) {
                (Some(x), Some(y)) => x.cmp(&y),
                _ => Ordering::Equal,
            }),
            _ => Ordering::Equal,
        });
        ord == Ordering::Greater
    }
}

impl fmt::Display for PublicationDate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}", self.year)?;
        if let Some(m) = self.month {
            write!(f, "-{m:02}")?;
        }
        if let Some(d) = self.day {
            write!(f, "-{d:02}")?;
        }
        Ok(())
    }
}

fn month_number(name: &str) -> Option<u8> {
    const MONTHS: [&str; 12] = [
        "jan", "feb", "mar", "apr", "may", "jun", "jul", "aug", "sep", "oct", "nov", "dec",
    ];
    let lower = name.to_ascii_lowercase();
    MONTHS
        .iter()
        .position(|m| lower.starts_with(m))
        .map(|i| i as u8 + 1)
}

fn date_from_url(url: &str) -> Option<PublicationDate> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"arxiv\.org/(?:abs|pdf)/(\d{2})(\d{2})\.\d{4,5}").unwrap());
    let caps = re.captures(url)?;
    let yy: i32 = caps[1].parse().ok()?;
    let mm: u8 = caps[2].parse().ok()?;
    PublicationDate::new(2000 + yy, Some(mm), None, DateSource::Url).ok()
}

fn date_from_front_matter(text: &str) -> Option<PublicationDate> {
    const MONTH: &str = r"(Jan(?:uary)?|Feb(?:ruary)?|Mar(?:ch)?|Apr(?:il)?|May|June?|July?|Aug(?:ust)?|Sep(?:t(?:ember)?)?|Oct(?:ober)?|Nov(?:ember)?|Dec(?:ember)?)\.?";
    static PATTERNS: OnceLock<Vec<Regex>> = OnceLock::new();
    let patterns = PATTERNS.get_or_init(|| {
        vec![
            // 2024-03-15
            Regex::new(r"\b(\d{4})-(\d{2})-(\d{2})\b").unwrap(),
            // March 15, 2024
            Regex::new(&format!(r"\b{MONTH}\s+(\d{{1,2}}),?\s+(\d{{4}})\b")).unwrap(),
            // 15 March 2024
            Regex::new(&format!(r"\b(\d{{1,2}})\s+{MONTH}\s+(\d{{4}})\b")).unwrap(),
            // March 2024
            Regex::new(&format!(r"\b{MONTH}\s+(\d{{4}})\b")).unwrap(),
            // 2024-03
            Regex::new(r"\b(\d{4})-(\d{2})\b").unwrap(),
            // 2024
            Regex::new(r"\b((?:19|20)\d{2})\b").unwrap(),
        ]
    });
    for (i, re) in patterns.iter().enumerate() {
        for caps in re.captures_iter(text) {
            let n = |k: usize| caps[k].parse::<i64>().ok();
            let parsed = match i {
                0 => PublicationDate::new(n(1)? as i32, Some(n(2)? as u8), Some(n(3)? as u8), DateSource::Regex),
                1 => PublicationDate::new(n(3)? as i32, month_number(&caps[1]), Some(n(2)? as u8), DateSource::Regex),
                2 => PublicationDate::new(n(3)? as i32, month_number(&caps[2]), Some(n(1)? as u8), DateSource::Regex),
                3 => PublicationDate::new(n(2)? as i32, month_number(&caps[1]), None, DateSource::Regex),
                4 => PublicationDate::new(n(1)? as i32, Some(n(2)? as u8), None, DateSource::Regex),
                _ => PublicationDate::new(n(1)? as i32, None, None, DateSource::Regex),
            };
            if let Ok(date) = parsed {
                return Some(date);
            }
        }
    }
    None
}

fn date_from_llm(front_matter: &str, llm: &dyn LlmClient) -> Option<PublicationDate> {
    let template = prompts::PUBLICATION_DATE;
    let request = LlmRequest::new(
        Task::PublicationDate,
        template.system,
        template.render_user(&[("front_matter", front_matter)]),
        0.0,
    );
    let raw = llm.complete(&request).ok()?;
    let value = parse_structured_output(&raw).ok()?.value;
    let year = value.get("year")?.as_i64()? as i32;
    let month = value.get("month").and_then(|v| v.as_u64()).map(|m| m as u8);
    let day = month.and(value.get("day").and_then(|v| v.as_u64()).map(|d| d as u8));
    PublicationDate::new(year, month, day, DateSource::Llm).ok()
}

/// Three-tier best-effort date inference: arXiv URL, front-matter regexes, then the LLM.
pub fn infer_publication_date(
    url: Option<&str>,
    front_matter: Option<&str>,
    llm: Option<&dyn LlmClient>,
) -> Result<Option<PublicationDate>> {
    if url.is_none() && front_matter.is_none() && llm.is_none() {
        return Err(Error::invalid("date inference needs at least one input"));
    }
    if let Some(date) = url.and_then(date_from_url) {
        return Ok(Some(date));
    }
    if let Some(date) = front_matter.and_then(date_from_front_matter) {
        return Ok(Some(date));
    }
    if let Some(llm) = llm {
        return Ok(date_from_llm(front_matter.unwrap_or(""), llm));
    }
    Ok(None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocumentFlag {
    ReferencesTruncated,
    LengthCapped,
    AcknowledgementsRemoved,
    Empty,
}

/// Preprocessed document text. Serializes as the raw string only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocumentText {
    pub raw: String,
    pub normalized: String,
    pub token_count: usize,
    pub flags: Vec<DocumentFlag>,
}

impl DocumentText {
    pub fn new(raw: impl Into<String>) -> Self {
        let raw = raw.into();
        let normalized = normalize_text(&raw);
        let token_count = tokenize(&raw).len();
        DocumentText {
            raw,
            normalized,
            token_count,
            flags: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.raw.trim().is_empty()
    }
}

impl Serialize for DocumentText {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.raw)
    }
}

impl<'de> Deserialize<'de> for DocumentText {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        Ok(DocumentText::new(String::deserialize(deserializer)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Extraction,
    Comparison,
}

fn heading_text(line: &str) -> String {
    let t = line.trim().trim_start_matches('#').trim();
    let t = t.trim_start_matches(|c: char| c.is_ascii_digit() || c == '.').trim();
    t.trim_end_matches(':').trim().to_ascii_lowercase()
}

fn is_references_heading(line: &str) -> bool {
    matches!(heading_text(line).as_str(), "references" | "bibliography")
}

fn is_acknowledgements_heading(line: &str) -> bool {
    matches!(
        heading_text(line).as_str(),
        "acknowledgements" | "acknowledgments" | "acknowledgement" | "acknowledgment"
    )
}

/// Section-like line that ends an acknowledgements block.
fn is_section_heading(line: &str) -> bool {
    let t = line.trim();
    if t.is_empty() || t.split_whitespace().count() > 8 {
        return false;
    }
    t.starts_with('#')
        || t.to_ascii_lowercase().starts_with("appendix")
        || t.chars().next().is_some_and(|c| c.is_ascii_digit())
            && t.split_whitespace().nth(1).is_some()
            && !t.ends_with('.')
}

/// Byte offsets at which each line starts.
fn line_starts(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut offset = 0;
    text.split_inclusive('\n').map(move |line| {
        let start = offset;
        offset += line.len();
        (start, line)
    })
}

fn remove_acknowledgements(text: &str) -> Option<String> {
    let lines: Vec<(usize, &str)> = line_starts(text).collect();
    let start = lines.iter().position(|(_, l)| is_acknowledgements_heading(l))?;
    let end = lines[start + 1..]
        .iter()
        .position(|(_, l)| is_section_heading(l))
        .map(|i| lines[start + 1 + i].0)
        .unwrap_or(text.len());
    let mut out = String::with_capacity(text.len());
    out.push_str(&text[..lines[start].0]);
    out.push_str(&text[end..]);
    Some(out)
}

pub fn preprocess_document(raw: &str, purpose: Purpose) -> Result<DocumentText> {
    if raw.is_empty() {
        return Err(Error::invalid("document text is empty"));
    }
    let mut flags = Vec::new();
    let mut text = match line_starts(raw).find(|(_, l)| is_references_heading(l)) {
        Some((at, _)) => {
            flags.push(DocumentFlag::ReferencesTruncated);
            raw[..at].to_string()
        }
        None => raw.to_string(),
    };
    if purpose == Purpose::Comparison {
        while let Some(stripped) = remove_acknowledgements(&text) {
            if !flags.contains(&DocumentFlag::AcknowledgementsRemoved) {
                flags.push(DocumentFlag::AcknowledgementsRemoved);
            }
            text = stripped;
        }
    }
    if let Some((cut, _)) = text.char_indices().nth(MAX_DOCUMENT_CHARS) {
        text.truncate(cut);
        flags.push(DocumentFlag::LengthCapped);
    }
    let mut doc = DocumentText::new(text);
    if doc.is_empty() {
        flags.push(DocumentFlag::Empty);
    }
    doc.flags = flags;
    Ok(doc)
}

/// A target or retrieved paper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperRecord {
    pub canonical_id: CanonicalId,
    pub title: String,
    #[serde(rename = "abstract", default)]
    pub abstract_text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub authors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub venue: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default)]
    pub identifiers: Identifiers,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub publication_date: Option<PublicationDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality_flag: Option<QualityFlag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_text: Option<DocumentText>,
}

impl PaperRecord {
    /// Builds a record with its canonical id derived from `identifiers` and `title`.
    pub fn new(title: impl Into<String>, identifiers: Identifiers) -> Result<Self> {
        let title = title.into();
        if title.trim().is_empty() {
            return Err(Error::invalid("paper title is empty"));
        }
        let canonical_id = canonical_id_of(&identifiers, &title)?;
        Ok(PaperRecord {
            canonical_id,
            title,
            abstract_text: String::new(),
            authors: Vec::new(),
            venue: None,
            url: None,
            identifiers,
            relevance_score: None,
            publication_date: None,
            quality_flag: None,
            full_text: None,
        })
    }

    pub fn with_relevance(mut self, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) || score.is_nan() {
            return Err(Error::invalid(format!("relevance score {score} outside [0,1]")));
        }
        self.relevance_score = Some(score);
        Ok(self)
    }

    pub fn title_hash(&self) -> String {
        title_hash(&self.title).unwrap_or_default()
    }

    pub fn relevance(&self) -> f64 {
        self.relevance_score.unwrap_or(0.0)
    }

    /// Recompute the canonical id after identifiers changed.
    pub fn refresh_canonical_id(&mut self) {
        if let Ok(id) = canonical_id_of(&self.identifiers, &self.title) {
            self.canonical_id = id;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_title_examples() {
        assert_eq!(
            normalize_title("Tidal-Reg:  Counting Distinct Items").unwrap(),
            "tidal-reg: counting distinct items"
        );
        assert_eq!(normalize_title("abc").unwrap(), "abc");
        assert_eq!(normalize_title("  A\tB  ").unwrap(), "a b");
        assert_eq!(normalize_title("\"Quoted Title.\"").unwrap(), "quoted title");
        assert!(normalize_title("").is_err());
        assert!(normalize_title(" ... ").is_err());
    }

    #[test]
    fn canonical_priority() {
        let ids = Identifiers {
            doi: Some("10.1/x".into()),
            arxiv_id: Some("2403.1".into()),
            openreview_id: None,
        };
        assert_eq!(canonical_id_of(&ids, "T").unwrap(), CanonicalId::new(IdScheme::Doi, "10.1/x"));
        let ids = Identifiers {
            arxiv_id: Some("arXiv:2403.12345v3".into()),
            openreview_id: Some("abc".into()),
            ..Default::default()
        };
        assert_eq!(canonical_id_of(&ids, "T").unwrap().to_string(), "arxiv:2403.12345");
        let ids = Identifiers {
            openreview_id: Some("abc".into()),
            ..Default::default()
        };
        assert_eq!(canonical_id_of(&ids, "T").unwrap().to_string(), "openreview:abc");
    }

    #[test]
    fn title_hash_fallback_matches_reference_md5() {
        // Digests computed with Python's hashlib.md5.
        let id = canonical_id_of(&Identifiers::default(), "T").unwrap();
        assert_eq!(id, CanonicalId::new(IdScheme::TitleHash, "e358efa489f58062f10dd7316b65649e"));
        let a = canonical_id_of(&Identifiers::default(), "A B").unwrap();
        let b = canonical_id_of(&Identifiers::default(), "a  b").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.value, "0cc9cd4dd26c5137b675a0d819cb9ab0");
        assert!(canonical_id_of(&Identifiers::default(), "").is_err());
    }

    #[test]
    fn canonical_id_string_round_trip() {
        let id: CanonicalId = "doi:10.1/x:y".parse().unwrap();
        assert_eq!(id.value, "10.1/x:y");
        assert_eq!(id.to_string(), "doi:10.1/x:y");
        assert!("weird:1".parse::<CanonicalId>().is_err());
        assert_eq!(id.slug(), "doi_10.1_x_y");
    }

    #[test]
    fn quality_flag_examples() {
        use Assessment::*;
        let v = |c: &[(&str, Assessment)]| VerificationVerdict {
            criteria: c.iter().map(|(t, a)| Criterion::new(*t, *a)).collect(),
        };
        assert_eq!(compute_quality_flag(&v(&[("time", Support), ("topic", Support)])).unwrap(), QualityFlag::Perfect);
        assert_eq!(compute_quality_flag(&v(&[("topic", SomewhatSupport)])).unwrap(), QualityFlag::Partial);
        assert_eq!(compute_quality_flag(&v(&[("time", Support), ("time", SomewhatSupport)])).unwrap(), QualityFlag::No);
        assert_eq!(compute_quality_flag(&v(&[("topic", Reject)])).unwrap(), QualityFlag::No);
        assert!(compute_quality_flag(&v(&[])).is_err());
    }

    #[test]
    fn date_tiers() {
        let d = infer_publication_date(Some("https://arxiv.org/abs/2403.12345"), None, None)
            .unwrap()
            .unwrap();
        assert_eq!((d.year, d.month, d.granularity, d.source_tier), (2024, Some(3), DateGranularity::YearMonth, DateSource::Url));

        let d = infer_publication_date(None, Some("Published 2024-03-15"), None).unwrap().unwrap();
        assert_eq!((d.year, d.month, d.day), (2024, Some(3), Some(15)));
        assert_eq!(d.granularity, DateGranularity::YearMonthDay);

        let d = infer_publication_date(None, Some("Preprint. March 2024"), None).unwrap().unwrap();
        assert_eq!((d.year, d.month, d.day), (2024, Some(3), None));

        let d = infer_publication_date(None, Some("Copyright 2023 the authors"), None).unwrap().unwrap();
        assert_eq!(d.granularity, DateGranularity::Year);

        assert_eq!(infer_publication_date(Some("not a url"), Some("no dates here"), None).unwrap(), None);
        assert!(infer_publication_date(None, None, None).is_err());
    }

    #[test]
    fn malformed_url_falls_through_to_regex() {
        let d = infer_publication_date(Some("arxiv.org/abs/2413.00001"), Some("June 2, 2021"), None)
            .unwrap()
            .unwrap();
        assert_eq!((d.year, d.month, d.day, d.source_tier), (2021, Some(6), Some(2), DateSource::Regex));
    }

    #[test]
    fn date_ordering_uses_shared_precision() {
        let y = PublicationDate::parse_iso("2024", DateSource::Metadata).unwrap();
        let ym = PublicationDate::parse_iso("2024-03", DateSource::Metadata).unwrap();
        let later = PublicationDate::parse_iso("2024-04-01", DateSource::Metadata).unwrap();
        assert!(!y.is_after(&ym));
        assert!(!ym.is_after(&y));
        assert!(later.is_after(&ym));
        assert!(!ym.is_after(&later));
        assert_eq!(later.to_string(), "2024-04-01");
    }

    #[test]
    fn references_truncation_point() {
        let body = "x".repeat(999) + "\n";
        let text = format!("{body}References\n[1] Someone. 2020.\n");
        let doc = preprocess_document(&text, Purpose::Extraction).unwrap();
        assert_eq!(doc.raw.chars().count(), 1000);
        assert!(doc.flags.contains(&DocumentFlag::ReferencesTruncated));
    }

    #[test]
    fn length_cap() {
        let text = "word ".repeat(50_000);
        let doc = preprocess_document(&text, Purpose::Extraction).unwrap();
        assert_eq!(doc.raw.chars().count(), MAX_DOCUMENT_CHARS);
        assert!(doc.flags.contains(&DocumentFlag::LengthCapped));
    }

    #[test]
    fn acknowledgements_removed_for_comparison() {
        let text = "Intro text.\n\nAcknowledgements\nWe thank the funders.\n\n## Appendix A\nMore.\n";
        let cmp = preprocess_document(text, Purpose::Comparison).unwrap();
        assert!(!cmp.raw.contains("funders"));
        assert!(cmp.raw.contains("Appendix A"));
        let ext = preprocess_document(text, Purpose::Extraction).unwrap();
        assert!(ext.raw.contains("funders"));
    }

    #[test]
    fn empty_after_truncation_is_flagged() {
        let doc = preprocess_document("References\n[1] x\n", Purpose::Extraction).unwrap();
        assert!(doc.flags.contains(&DocumentFlag::Empty));
        assert!(preprocess_document("", Purpose::Extraction).is_err());
    }

    #[test]
    fn record_rejects_bad_relevance() {
        let rec = PaperRecord::new("Title", Identifiers::default()).unwrap();
        assert!(rec.clone().with_relevance(1.5).is_err());
        assert!(rec.with_relevance(0.5).is_ok());
        assert!(PaperRecord::new("  ", Identifiers::default()).is_err());
    }
}
