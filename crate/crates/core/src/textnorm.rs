//! Transcript normalization, word-level Levenshtein labeling and
//! token-to-word mapping.
//!
//! Labels are defined on reference-word positions only: a reference word is
//! correct (`1`) when the minimum-edit alignment matches it exactly against a
//! response word, and incorrect (`0`) when it is substituted or deleted.
//! Inserted response words never create labels.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_general_category::{get_general_category, GeneralCategory};
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TextError {
    #[error("token offsets are not monotonic at token {index}")]
    InconsistentOffsets { index: usize },
}

/// Half-open index range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    fn overlap(&self, other: &Span) -> usize {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        hi.saturating_sub(lo)
    }
}

/// Canonical transcript: normalized words plus their character spans in the
/// single-space-joined normalized text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceTranscript {
    pub words: Vec<String>,
    pub char_spans: Vec<Span>,
    pub token_spans: Option<Vec<Span>>,
}

impl ReferenceTranscript {
    pub fn from_raw(raw: &str) -> Self {
        Self::from_words(normalize_transcript(raw))
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let mut char_spans = Vec::with_capacity(words.len());
        let mut cursor = 0;
        for (i, w) in words.iter().enumerate() {
            if i > 0 {
                cursor += 1;
            }
            let n = w.chars().count();
            char_spans.push(Span::new(cursor, cursor + n));
            cursor += n;
        }
        Self {
            words,
            char_spans,
            token_spans: None,
        }
    }

    /// The normalized text the character spans index into.
    pub fn text(&self) -> String {
        self.words.join(" ")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Per-reference-word correctness `correct` and validity mask `valid`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WordLabelSet {
    pub correct: Vec<u8>,
    pub valid: Vec<u8>,
}

impl WordLabelSet {
    pub fn len(&self) -> usize {
        self.correct.len()
    }

    pub fn is_empty(&self) -> bool {
        self.correct.is_empty()
    }

    /// Marks word `i` invalid. Its correctness value is reset to 0 and never
    /// read afterwards.
    pub fn invalidate(&mut self, i: usize) {
        self.valid[i] = 0;
        self.correct[i] = 0;
    }

    pub fn bits(bits: &[u8]) -> String {
        bits.iter().map(|b| if *b != 0 { '1' } else { '0' }).collect()
    }

    pub fn parse_bits(s: &str) -> Option<Vec<u8>> {
        s.chars()
            .map(|c| match c {
                '0' => Some(0),
                '1' => Some(1),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Match,
    Substitution,
    Deletion,
    Insertion,
}

impl OpKind {
    pub fn code(self) -> char {
        match self {
            OpKind::Match => 'M',
            OpKind::Substitution => 'S',
            OpKind::Deletion => 'D',
            OpKind::Insertion => 'I',
        }
    }

    pub fn cost(self) -> usize {
        match self {
            OpKind::Match => 0,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AlignmentOp {
    pub kind: OpKind,
    pub ref_index: Option<usize>,
    pub hyp_index: Option<usize>,
}

impl AlignmentOp {
    fn pair(kind: OpKind, r: usize, h: usize) -> Self {
        Self {
            kind,
            ref_index: Some(r),
            hyp_index: Some(h),
        }
    }

    fn deletion(r: usize) -> Self {
        Self {
            kind: OpKind::Deletion,
            ref_index: Some(r),
            hyp_index: None,
        }
    }

    fn insertion(h: usize) -> Self {
        Self {
            kind: OpKind::Insertion,
            ref_index: None,
            hyp_index: Some(h),
        }
    }
}

/// Compact `M/S/D/I` rendering of an alignment.
pub struct OpString<'a>(pub &'a [AlignmentOp]);

impl fmt::Display for OpString<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for op in self.0 {
            write!(f, "{}", op.kind.code())?;
        }
        Ok(())
    }
}

fn is_quote(c: char) -> bool {
    matches!(
        c,
        '\u{2018}' | '\u{2019}' | '\u{201A}' | '\u{201B}' | '\u{2032}' | '\u{02BC}' | '\u{0060}'
            | '\u{00B4}' | '\u{FF07}'
    )
}

fn is_dash_or_slash(c: char) -> bool {
    matches!(
        c,
        '/' | '\\' | '\u{2044}' | '\u{2215}' | '\u{2212}' | '\u{FE63}' | '\u{FF0D}'
    ) || get_general_category(c) == GeneralCategory::DashPunctuation
}

fn is_punctuation(c: char) -> bool {
    use GeneralCategory::*;
    matches!(
        get_general_category(c),
        ConnectorPunctuation
            | DashPunctuation
            | OpenPunctuation
            | ClosePunctuation
            | InitialPunctuation
            | FinalPunctuation
            | OtherPunctuation
    )
}

/// Normalizes raw text into words: NFKC, lowercase, typographic quotes to
/// `'`, dashes and slashes to spaces, remove punctuation except `'`, split on
/// whitespace.
pub fn normalize_transcript(raw: &str) -> Vec<String> {
    let lowered = raw.nfkc().collect::<String>().to_lowercase();
    let mut cleaned = String::with_capacity(lowered.len());
    for c in lowered.chars() {
        let c = if is_quote(c) { '\'' } else { c };
        if is_dash_or_slash(c) {
            cleaned.push(' ');
        } else if c == '\'' || !is_punctuation(c) {
            cleaned.push(c);
        }
    }
    // Dropping a punctuation mark can bring a base letter next to a
    // combining mark; recompose so the output is a fixed point.
    let cleaned: String = cleaned.nfkc().collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Minimum-edit word alignment with unit costs.
///
/// Backtrace order among equal-cost predecessors is
/// match > substitution > deletion > insertion.
pub fn align(reference: &[String], response: &[String]) -> (usize, Vec<AlignmentOp>) {
    let n = reference.len();
    let m = response.len();
    let width = m + 1;
    let mut dist = vec![0usize; (n + 1) * width];
    for i in 0..=n {
        dist[i * width] = i;
    }
    for j in 0..=m {
        dist[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = dist[(i - 1) * width + j - 1] + usize::from(reference[i - 1] != response[j - 1]);
            let up = dist[(i - 1) * width + j] + 1;
            let left = dist[i * width + j - 1] + 1;
            dist[i * width + j] = diag.min(up).min(left);
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dist[i * width + j];
        if i > 0 && j > 0 {
            let diag = dist[(i - 1) * width + j - 1];
            let same = reference[i - 1] == response[j - 1];
            if same && diag == here {
                ops.push(AlignmentOp::pair(OpKind::Match, i - 1, j - 1));
                i -= 1;
                j -= 1;
                continue;
            }
            if !same && diag + 1 == here {
                ops.push(AlignmentOp::pair(OpKind::Substitution, i - 1, j - 1));
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dist[(i - 1) * width + j] + 1 == here {
            ops.push(AlignmentOp::deletion(i - 1));
            i -= 1;
        } else {
            ops.push(AlignmentOp::insertion(j - 1));
            j -= 1;
        }
    }
    ops.reverse();
    (dist[n * width + m], ops)
}

/// Aligns a listener response to the reference and derives word labels.
pub fn align_and_label(reference: &[String], response: &[String]) -> (WordLabelSet, Vec<AlignmentOp>) {
    let (_, ops) = align(reference, response);
    let labels = labels_from_ops(reference.len(), &ops);
    (labels, ops)
}

pub fn labels_from_ops(n: usize, ops: &[AlignmentOp]) -> WordLabelSet {
    let mut correct = vec![0u8; n];
    for op in ops {
        if let (OpKind::Match, Some(r)) = (op.kind, op.ref_index) {
            correct[r] = 1;
        }
    }
    WordLabelSet {
        correct,
        valid: vec![1; n],
    }
}

/// A teacher-forced decoder token. `offsets` is the character range in the
/// normalized text; prompt and start tokens carry an empty range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderToken {
    pub text: String,
    pub offsets: Option<Span>,
}

impl DecoderToken {
    pub fn with_offsets(text: &str, start: usize, end: usize) -> Self {
        Self {
            text: text.to_owned(),
            offsets: Some(Span::new(start, end)),
        }
    }

    pub fn text_only(text: &str) -> Self {
        Self {
            text: text.to_owned(),
            offsets: None,
        }
    }

    fn is_special(&self) -> bool {
        let t = self.text.trim();
        t.starts_with("<|") && t.ends_with("|>")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMapping {
    /// Per reference word, the contiguous token index range.
    pub spans: Vec<Span>,
    /// Word indices whose span ended up empty; these must be masked out.
    pub empty_words: Vec<usize>,
}

/// Maps decoder tokens onto reference words.
///
/// With offsets, a token belongs to the word sharing the most characters with
/// it (ties to the earlier word). Without offsets, falls back to greedy
/// left-to-right character counting over the token text.
pub fn map_tokens_to_words(
    tokens: &[DecoderToken],
    reference: &ReferenceTranscript,
) -> Result<TokenMapping, TextError> {
    let n = reference.len();
    let offsets_available = tokens
        .iter()
        .all(|t| t.offsets.is_some() || t.is_special());
    let assignment = if offsets_available {
        assign_by_offsets(tokens, reference)?
    } else {
        assign_by_text(tokens, reference)
    };

    let mut spans = vec![Span::default(); n];
    let mut seen = vec![false; n];
    for (k, word) in assignment.iter().enumerate() {
        if let Some(w) = *word {
            if seen[w] {
                spans[w].end = k + 1;
            } else {
                seen[w] = true;
                spans[w] = Span::new(k, k + 1);
            }
        }
    }
    let empty_words = (0..n).filter(|&i| spans[i].is_empty()).collect();
    Ok(TokenMapping { spans, empty_words })
}

fn assign_by_offsets(
    tokens: &[DecoderToken],
    reference: &ReferenceTranscript,
) -> Result<Vec<Option<usize>>, TextError> {
    let mut prev_end = 0;
    let mut out = Vec::with_capacity(tokens.len());
    for (k, tok) in tokens.iter().enumerate() {
        let span = match tok.offsets {
            Some(s) if !s.is_empty() => s,
            _ => {
                out.push(None);
                continue;
            }
        };
        if span.start < prev_end || span.end < span.start {
            return Err(TextError::InconsistentOffsets { index: k });
        }
        prev_end = span.end;
        let mut best: Option<(usize, usize)> = None;
        for (i, ws) in reference.char_spans.iter().enumerate() {
            let ov = span.overlap(ws);
            if ov > 0 && best.is_none_or(|(_, b)| ov > b) {
                best = Some((i, ov));
            }
        }
        out.push(best.map(|(i, _)| i));
    }
    Ok(out)
}

fn assign_by_text(tokens: &[DecoderToken], reference: &ReferenceTranscript) -> Vec<Option<usize>> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut word = 0;
    let mut remaining = reference.words.first().map_or(0, |w| w.chars().count());
    for tok in tokens {
        let piece = tok.text.trim().trim_start_matches('\u{0120}');
        let count = piece.chars().count();
        if tok.is_special() || count == 0 || word >= reference.len() {
            out.push(None);
            continue;
        }
        out.push(Some(word));
        remaining = remaining.saturating_sub(count);
        if remaining == 0 {
            word += 1;
            remaining = reference.words.get(word).map_or(0, |w| w.chars().count());
        }
    }
    out
}
