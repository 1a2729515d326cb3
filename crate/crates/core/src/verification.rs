//! Anchor-alignment quote verification and similarity-segment gating.
//!
//! A quote is split into anchors of at least [`MIN_ANCHOR_CHARS`] characters.
//! Each anchor is aligned against the document by longest-common-subsequence
//! over fixed-width token windows. Anchor coverages combine into a single
//! match score:
//!
//! ```text
//! base  = 0.7 * mean_coverage + 0.3 * hit_ratio
//! score = base        if the matched spans are compact
//!         0.5 * base  otherwise
//! ```

use serde::{Deserialize, Serialize};

use crate::analysis::{ContributionComparison, RefutationStatus};
use crate::paper::DocumentText;
use crate::text::{tokenize, word_count, TokenStream};

pub const MIN_ANCHOR_CHARS: usize = 20;
pub const HIT_THRESHOLD: f64 = 0.6;
pub const FOUND_THRESHOLD: f64 = 0.6;
pub const MAX_GAP_TOKENS: usize = 300;
pub const MIN_SEGMENT_WORDS: usize = 30;
pub const MAX_SEGMENTS: usize = 3;
const MAX_TIED_SPANS: usize = 64;

/// Which anchors the mean coverage averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageMean {
    #[default]
    HitsOnly,
    AllAnchors,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub hit_threshold: f64,
    pub found_threshold: f64,
    pub max_gap: usize,
    pub coverage_mean: CoverageMean,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            hit_threshold: HIT_THRESHOLD,
            found_threshold: FOUND_THRESHOLD,
            max_gap: MAX_GAP_TOKENS,
            coverage_mean: CoverageMean::HitsOnly,
        }
    }
}

/// Contiguous token range `start..end` of the quote.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anchor {
    pub start: usize,
    pub end: usize,
    pub char_length: usize,
}

impl Anchor {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Greedy left-to-right segmentation. An anchor closes once its tokens joined
/// by single spaces reach [`MIN_ANCHOR_CHARS`]; a short tail joins the previous anchor.
pub fn segment_anchors(quote: &TokenStream) -> Vec<Anchor> {
    let mut anchors: Vec<Anchor> = Vec::new();
    let mut start = 0;
    for end in 1..=quote.len() {
        let char_length = quote.joined_len(start..end);
        if char_length >= MIN_ANCHOR_CHARS {
            anchors.push(Anchor { start, end, char_length });
            start = end;
        }
    }
    if start < quote.len() {
        match anchors.last_mut() {
            Some(last) => {
                last.end = quote.len();
                last.char_length = quote.joined_len(last.start..last.end);
            }
            None => anchors.push(Anchor {
                start,
                end: quote.len(),
                char_length: quote.joined_len(start..quote.len()),
            }),
        }
    }
    anchors
}

/// Token equality, relaxed at the quote's outer edges: a quote cut mid-word
/// starts with a suffix of a document token and ends with a prefix of one.
pub fn tokens_match(quote_token: &str, quote_index: usize, quote_len: usize, doc_token: &str) -> bool {
    let first = quote_index == 0;
    let last = quote_index + 1 == quote_len;
    match (first, last) {
        (true, true) => doc_token.contains(quote_token),
        (true, false) => doc_token.ends_with(quote_token),
        (false, true) => doc_token.starts_with(quote_token),
        (false, false) => doc_token == quote_token,
    }
}

/// Window width used for an anchor of `n` tokens.
pub fn window_width(n: usize) -> usize {
    n + n / 4
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorMatch {
    pub coverage: f64,
    pub matched: usize,
    /// Inclusive document token interval of the tightest best window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_span: Option<(usize, usize)>,
    pub is_hit: bool,
}

struct Alignment {
    matched: usize,
    /// Minimal inclusive spans achieving `matched`, sorted by start.
    spans: Vec<(usize, usize)>,
}

fn align(quote: &TokenStream, anchor: &Anchor, doc: &TokenStream) -> Alignment {
    let a = &quote.tokens[anchor.start..anchor.end];
    let qlen = quote.len();
    let n = a.len();
    let m = doc.len();
    if n == 0 || m == 0 {
        return Alignment { matched: 0, spans: Vec::new() };
    }
    let w = window_width(n);
    let eq = |i: usize, d: &str| tokens_match(&a[i], anchor.start + i, qlen, d);
    let mut best = 0;
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut prev = vec![0usize; n + 1];
    let mut cur = vec![0usize; n + 1];
    for s in 0..m {
        if !(0..n).any(|i| eq(i, &doc.tokens[s])) {
            continue;
        }
        prev.iter_mut().for_each(|x| *x = 0);
        let end = (s + w).min(m);
        let mut value = 0;
        let mut first_end = s;
        for e in s..end {
            let d = &doc.tokens[e];
            cur[0] = 0;
            for i in 0..n {
                cur[i + 1] = if eq(i, d) { prev[i] + 1 } else { prev[i + 1].max(cur[i]) };
            }
            std::mem::swap(&mut prev, &mut cur);
            if prev[n] > value {
                value = prev[n];
                first_end = e;
            }
        }
        if value > best {
            best = value;
            spans.clear();
        }
        if value == best && value > 0 {
            spans.push((s, first_end));
        }
    }
    // Keep spans that do not strictly contain a later-starting span.
    let mut minimal = Vec::with_capacity(spans.len());
    let mut min_end_after = usize::MAX;
    for &(s, e) in spans.iter().rev() {
        if e < min_end_after {
            minimal.push((s, e));
            min_end_after = e;
        }
    }
    minimal.reverse();
    Alignment { matched: best, spans: minimal }
}

fn tightest(spans: &[(usize, usize)]) -> Option<(usize, usize)> {
    spans.iter().copied().min_by_key(|(s, e)| (e - s, *s))
}

/// Best window for one anchor. Coverage is matched anchor tokens over anchor tokens.
pub fn align_anchor(quote: &TokenStream, anchor: &Anchor, doc: &TokenStream) -> AnchorMatch {
    align_anchor_with(quote, anchor, doc, HIT_THRESHOLD)
}

fn align_anchor_with(quote: &TokenStream, anchor: &Anchor, doc: &TokenStream, hit_threshold: f64) -> AnchorMatch {
    let al = align(quote, anchor, doc);
    let coverage = if anchor.is_empty() { 0.0 } else { al.matched as f64 / anchor.len() as f64 };
    AnchorMatch {
        coverage,
        matched: al.matched,
        doc_span: tightest(&al.spans),
        is_hit: coverage >= hit_threshold,
    }
}

/// Tokens strictly between two inclusive spans; 0 when they overlap or touch.
pub fn span_gap(a: (usize, usize), b: (usize, usize)) -> usize {
    if b.0 > a.1 {
        b.0 - a.1 - 1
    } else if a.0 > b.1 {
        a.0 - b.1 - 1
    } else {
        0
    }
}

/// Picks one tied span per hit anchor so the largest gap between anchors
/// consecutive in the quote is as small as possible.
fn choose_spans(candidates: &[Vec<(usize, usize)>]) -> Vec<(usize, usize)> {
    if candidates.is_empty() {
        return Vec::new();
    }
    let mut cost: Vec<Vec<usize>> = vec![vec![0; candidates[0].len()]];
    let mut back: Vec<Vec<usize>> = vec![vec![0; candidates[0].len()]];
    for j in 1..candidates.len() {
        let mut row_cost = Vec::with_capacity(candidates[j].len());
        let mut row_back = Vec::with_capacity(candidates[j].len());
        for &c in &candidates[j] {
            let (k, v) = candidates[j - 1]
                .iter()
                .enumerate()
                .map(|(k, &p)| (k, cost[j - 1][k].max(span_gap(p, c))))
                .min_by_key(|&(k, v)| (v, k))
                .expect("candidate lists are non-empty");
            row_cost.push(v);
            row_back.push(k);
        }
        cost.push(row_cost);
        back.push(row_back);
    }
    let last = candidates.len() - 1;
    let mut idx = (0..candidates[last].len()).min_by_key(|&k| (cost[last][k], k)).expect("non-empty");
    let mut out = vec![(0, 0); candidates.len()];
    for j in (0..candidates.len()).rev() {
        out[j] = candidates[j][idx];
        idx = back[j][idx];
    }
    out
}

/// Compactness over spans in document order. Vacuously true for fewer than two.
pub fn is_compact(spans: &[(usize, usize)], max_gap: usize) -> bool {
    let mut sorted = spans.to_vec();
    sorted.sort_unstable();
    sorted.windows(2).all(|w| span_gap(w[0], w[1]) <= max_gap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreParts {
    pub hit_ratio: f64,
    pub mean_coverage: f64,
    pub compact: bool,
    pub score: f64,
}

/// The scoring formula on its own, from per-anchor coverages.
pub fn score_from_coverages(coverages: &[f64], compact: bool, config: &VerifyConfig) -> ScoreParts {
    if coverages.is_empty() {
        return ScoreParts { hit_ratio: 0.0, mean_coverage: 0.0, compact, score: 0.0 };
    }
    let hits: Vec<f64> = coverages.iter().copied().filter(|c| *c >= config.hit_threshold).collect();
    let hit_ratio = hits.len() as f64 / coverages.len() as f64;
    let mean_coverage = match config.coverage_mean {
        CoverageMean::HitsOnly if hits.is_empty() => 0.0,
        CoverageMean::HitsOnly => hits.iter().sum::<f64>() / hits.len() as f64,
        CoverageMean::AllAnchors => coverages.iter().sum::<f64>() / coverages.len() as f64,
    };
    let base = 0.7 * mean_coverage + 0.3 * hit_ratio;
    let score = if compact { base } else { 0.5 * base };
    ScoreParts { hit_ratio, mean_coverage, compact, score: score.clamp(0.0, 1.0) }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QuoteLocation {
    pub found: bool,
    pub match_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuoteVerification {
    pub location: QuoteLocation,
    pub anchors: Vec<Anchor>,
    pub matches: Vec<AnchorMatch>,
    pub parts: ScoreParts,
}

/// Verifies `quote` against an already tokenized document.
pub fn verify_quote_tokens(quote: &str, doc: &TokenStream, config: &VerifyConfig) -> QuoteVerification {
    let q = tokenize(quote);
    let anchors = segment_anchors(&q);
    let mut matches = Vec::with_capacity(anchors.len());
    let mut hit_spans: Vec<Vec<(usize, usize)>> = Vec::new();
    for anchor in &anchors {
        let al = align(&q, anchor, doc);
        let coverage = al.matched as f64 / anchor.len() as f64;
        let is_hit = coverage >= config.hit_threshold;
        matches.push(AnchorMatch { coverage, matched: al.matched, doc_span: tightest(&al.spans), is_hit });
        if is_hit {
            let mut spans = al.spans;
            spans.truncate(MAX_TIED_SPANS);
            hit_spans.push(spans);
        }
    }
    let chosen = choose_spans(&hit_spans);
    let compact = is_compact(&chosen, config.max_gap);
    let coverages: Vec<f64> = matches.iter().map(|m| m.coverage).collect();
    let parts = score_from_coverages(&coverages, compact, config);
    QuoteVerification {
        location: QuoteLocation { found: parts.score > config.found_threshold, match_score: parts.score },
        anchors,
        matches,
        parts,
    }
}

pub fn verify_quote(quote: &str, doc: &DocumentText) -> QuoteLocation {
    verify_quote_tokens(quote, &tokenize(&doc.raw), &VerifyConfig::default()).location
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentType {
    Direct,
    Paraphrase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySegment {
    pub segment_id: u32,
    pub location: String,
    pub original_text: String,
    pub candidate_text: String,
    #[serde(rename = "type")]
    pub segment_type: SegmentType,
    pub rationale: String,
    #[serde(default)]
    pub verified: bool,
}

impl SimilaritySegment {
    pub fn min_words(&self) -> usize {
        word_count(&self.original_text).min(word_count(&self.candidate_text))
    }
}

/// Verified iff both quotes are found in their documents and both span at
/// least [`MIN_SEGMENT_WORDS`] words.
pub fn verify_segment_tokens(
    seg: &SimilaritySegment,
    doc_a: &TokenStream,
    doc_b: &TokenStream,
    config: &VerifyConfig,
) -> SimilaritySegment {
    let verified = seg.min_words() >= MIN_SEGMENT_WORDS
        && verify_quote_tokens(&seg.original_text, doc_a, config).location.found
        && verify_quote_tokens(&seg.candidate_text, doc_b, config).location.found;
    SimilaritySegment { verified, ..seg.clone() }
}

pub fn verify_segment(seg: &SimilaritySegment, doc_a: &DocumentText, doc_b: &DocumentText) -> SimilaritySegment {
    verify_segment_tokens(seg, &tokenize(&doc_a.raw), &tokenize(&doc_b.raw), &VerifyConfig::default())
}

/// Keeps at most [`MAX_SEGMENTS`] segments with the largest minimum word count.
/// Ties keep the earlier segment; output stays in input order.
pub fn filter_segments(segs: Vec<SimilaritySegment>) -> Vec<SimilaritySegment> {
    if segs.len() <= MAX_SEGMENTS {
        return segs;
    }
    let mut order: Vec<usize> = (0..segs.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(segs[i].min_words()), segs[i].segment_id, i));
    let mut keep: Vec<usize> = order.into_iter().take(MAX_SEGMENTS).collect();
    keep.sort_unstable();
    let mut segs: Vec<Option<SimilaritySegment>> = segs.into_iter().map(Some).collect();
    keep.into_iter().filter_map(|i| segs[i].take()).collect()
}

pub const DOWNGRADE_NOTE: &str =
    "Downgraded from can_refute: no evidence pair had both quotes verified in the source texts.";

/// Rewrites every `can_refute` entry lacking a doubly verified evidence pair to
/// `cannot_refute`. Entries with a verified pair are returned untouched.
pub fn downgrade_unverified(comparisons: Vec<ContributionComparison>) -> Vec<ContributionComparison> {
    comparisons
        .into_iter()
        .map(|mut c| {
            if c.refutation_status == RefutationStatus::CanRefute && !c.has_verified_pair() {
                c.refutation_status = RefutationStatus::CannotRefute;
                c.refutation_evidence = None;
                c.brief_note = Some(DOWNGRADE_NOTE.to_string());
                c.downgraded = true;
            }
            c
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: &str) -> TokenStream {
        tokenize(s)
    }

    const DOC: &str = "Reinforcement learning agents interact with many environments. \
        The framework decouples environment execution from policy training so that rollouts scale. \
        We also report results on web navigation and embodied tasks.";

    #[test]
    fn anchors_partition_and_meet_minimum() {
        let q = ts("the framework decouples environment execution from policy training");
        let anchors = segment_anchors(&q);
        assert!(anchors.len() >= 2);
        assert_eq!(anchors[0].start, 0);
        assert_eq!(anchors.last().unwrap().end, q.len());
        for w in anchors.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
        assert!(anchors.iter().all(|a| a.char_length >= MIN_ANCHOR_CHARS));
        assert_eq!(segment_anchors(&ts("short one")).len(), 1);
        assert!(segment_anchors(&ts("")).is_empty());
    }

    #[test]
    fn verbatim_quote_scores_one() {
        let doc = ts(DOC);
        let v = verify_quote_tokens("decouples environment execution from policy training", &doc, &VerifyConfig::default());
        assert_eq!(v.location.match_score, 1.0);
        assert!(v.location.found);
    }

    #[test]
    fn mid_word_substring_scores_one() {
        let doc = ts(DOC);
        let start = DOC.find("ement learning").unwrap();
        let quote = &DOC[start..start + 40];
        let v = verify_quote_tokens(quote, &doc, &VerifyConfig::default());
        assert_eq!(v.location.match_score, 1.0, "{quote:?}");
    }

    #[test]
    fn absent_quote_scores_zero() {
        let v = verify_quote_tokens("quantum chromodynamics lattice simulations", &ts(DOC), &VerifyConfig::default());
        assert_eq!(v.location.match_score, 0.0);
        assert!(!v.location.found);
        assert!(v.matches.iter().all(|m| m.doc_span.is_none()));
    }

    #[test]
    fn partial_coverage() {
        let doc = ts("alpha beta gamma delta epsilon zeta eta theta iota kappa");
        let q = ts("xx alpha beta gamma qq delta epsilon zeta rr eta yy");
        let anchor = Anchor { start: 1, end: 11, char_length: 0 };
        let m = align_anchor(&q, &anchor, &doc);
        // window of 12 tokens; alpha..eta gives 7 of 10
        assert_eq!(m.matched, 7);
        assert!((m.coverage - 0.7).abs() < 1e-12);
        assert!(m.is_hit);
    }

    #[test]
    fn formula_points() {
        let cfg = VerifyConfig::default();
        let c = [1.0, 1.0, 0.5, 0.0];
        let p = score_from_coverages(&c, true, &cfg);
        assert!((p.score - 0.85).abs() < 1e-9);
        let p = score_from_coverages(&c, false, &cfg);
        assert!((p.score - 0.425).abs() < 1e-9);
        let all = VerifyConfig { coverage_mean: CoverageMean::AllAnchors, ..cfg };
        let p = score_from_coverages(&c, true, &all);
        assert!((p.score - (0.7 * 0.625 + 0.3 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn far_apart_anchors_are_not_compact() {
        let filler = "lorem ".repeat(400);
        let doc_text = format!("first anchor words here {filler} second anchor phrase there");
        let doc = ts(&doc_text);
        let v = verify_quote_tokens(
            "first anchor words here second anchor phrase there",
            &doc,
            &VerifyConfig::default(),
        );
        assert!(v.matches.iter().all(|m| m.is_hit));
        assert!(!v.parts.compact);
        assert!((v.location.match_score - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tied_spans_prefer_compact_choice() {
        let filler = "lorem ".repeat(400);
        let doc_text =
            format!("second anchor phrase there {filler} first anchor words here second anchor phrase there");
        let v = verify_quote_tokens(
            "first anchor words here second anchor phrase there",
            &ts(&doc_text),
            &VerifyConfig::default(),
        );
        assert!(v.parts.compact);
        assert_eq!(v.location.match_score, 1.0);
    }

    fn seg(id: u32, words: usize) -> SimilaritySegment {
        let text = vec!["w"; words].join(" ");
        SimilaritySegment {
            segment_id: id,
            location: "unknown".into(),
            original_text: text.clone(),
            candidate_text: text,
            segment_type: SegmentType::Direct,
            rationale: String::new(),
            verified: true,
        }
    }

    #[test]
    fn top_three_by_words() {
        let kept = filter_segments(vec![seg(1, 80), seg(2, 31), seg(3, 60), seg(4, 33), seg(5, 45)]);
        let ids: Vec<u32> = kept.iter().map(|s| s.segment_id).collect();
        assert_eq!(ids, [1, 3, 5]);
        assert_eq!(filter_segments(vec![seg(1, 40), seg(2, 40)]).len(), 2);
        let kept = filter_segments(vec![seg(1, 50), seg(2, 40), seg(3, 40), seg(4, 40)]);
        let ids: Vec<u32> = kept.iter().map(|s| s.segment_id).collect();
        assert_eq!(ids, [1, 2, 3]);
    }

    #[test]
    fn segment_word_gate() {
        let words: Vec<String> = (0..40).map(|i| format!("token{i}")).collect();
        let doc = ts(&words.join(" "));
        let mut s = seg(1, 0);
        s.original_text = words[..29].join(" ");
        s.candidate_text = s.original_text.clone();
        assert!(!verify_segment_tokens(&s, &doc, &doc, &VerifyConfig::default()).verified);
        s.original_text = words[..30].join(" ");
        s.candidate_text = s.original_text.clone();
        assert!(verify_segment_tokens(&s, &doc, &doc, &VerifyConfig::default()).verified);
        s.candidate_text = "nothing like this exists anywhere ".repeat(8);
        assert!(!verify_segment_tokens(&s, &doc, &doc, &VerifyConfig::default()).verified);
    }
}
