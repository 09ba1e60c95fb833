//! Masked text: parsing `[LABEL]` tokens and recovering source spans.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::span::{CharIndex, Entity, Label, Span};

/// Text in which PII spans have been replaced by `[LABEL]` mask tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaskedText(String);

impl MaskedText {
    pub fn new(text: impl Into<String>) -> Self {
        Self(text.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }

    pub fn segments(&self) -> MaskSegmentation {
        extract_mask_spans(&self.0)
    }
}

impl fmt::Display for MaskedText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for MaskedText {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

impl From<String> for MaskedText {
    fn from(s: String) -> Self {
        Self(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Mask(String),
}

impl Segment {
    pub fn is_mask(&self) -> bool {
        matches!(self, Segment::Mask(_))
    }
}

/// Ordered literal and mask segments of a masked string.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskSegmentation {
    pub segments: Vec<Segment>,
    /// Unbalanced brackets that were kept as literal text.
    pub warnings: usize,
}

impl MaskSegmentation {
    /// Re-renders the segments; equals the parsed input exactly.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Mask(label) => {
                    out.push('[');
                    out.push_str(label);
                    out.push(']');
                }
            }
        }
        out
    }

    pub fn masks(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Mask(l) => Some(l.as_str()),
            Segment::Literal(_) => None,
        })
    }

    pub fn mask_count(&self) -> usize {
        self.masks().count()
    }
}

/// True for a valid mask label body: uppercase ASCII letters, digits, `_`.
pub fn is_mask_label(body: &str) -> bool {
    !body.is_empty()
        && body
            .bytes()
            .all(|b| b.is_ascii_uppercase() || b.is_ascii_digit() || b == b'_')
}

/// Splits a masked string into literal and mask segments.
///
/// Bracketed text that is not a valid label stays literal. A `[` with no
/// closing `]` before the next `[` (or the end), and a `]` with no opener,
/// are kept as literal text and counted in `warnings`.
pub fn extract_mask_spans(masked: &str) -> MaskSegmentation {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut warnings = 0;
    let bytes = masked.as_bytes();
    let mut i = 0;
    while i < masked.len() {
        match bytes[i] {
            b'[' => {
                let rest = &masked[i + 1..];
                let close = rest.find(']');
                let next_open = rest.find('[');
                match close {
                    Some(c) if next_open.is_none_or(|o| c < o) => {
                        let body = &rest[..c];
                        if is_mask_label(body) {
                            if !literal.is_empty() {
                                segments.push(Segment::Literal(std::mem::take(&mut literal)));
                            }
                            segments.push(Segment::Mask(body.to_string()));
                        } else {
                            literal.push('[');
                            literal.push_str(body);
                            literal.push(']');
                        }
                        i += c + 2;
                    }
                    _ => {
                        warnings += 1;
                        literal.push('[');
                        i += 1;
                    }
                }
            }
            b']' => {
                warnings += 1;
                literal.push(']');
                i += 1;
            }
            _ => {
                let next = masked[i..]
                    .find(['[', ']'])
                    .map_or(masked.len(), |off| i + off);
                literal.push_str(&masked[i..next]);
                i = next;
            }
        }
    }
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    MaskSegmentation { segments, warnings }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AlignmentFailure {
    #[error("target prefix does not match the source")]
    PrefixMismatch,
    #[error("target suffix does not match the source")]
    SuffixMismatch,
    #[error("source and target differ and the target has no masks")]
    LiteralMismatch,
    #[error("anchor {anchor:?} could not be located in the source")]
    AnchorNotFound { anchor: String },
    #[error("alignment search budget exhausted")]
    BudgetExhausted,
}

const SEARCH_BUDGET: usize = 100_000;

/// Recovers the source spans of every mask in `target`.
///
/// Literal segments of the target are anchors that must occur in the source
/// in order; each run of masks takes the source text lying strictly between
/// its neighbouring anchors. The first literal must be a prefix of the
/// source and the last one a suffix. Middle anchors are placed longest
/// first at their leftmost feasible occurrence, backtracking when the
/// remaining anchors no longer fit. Every mask must cover at least one
/// character.
///
/// Labels are taken verbatim from the mask tokens (canonical names become
/// [`Label::Canonical`]).
pub fn align_gold_spans(source: &str, target: &MaskedText) -> Result<Vec<Entity>, AlignmentFailure> {
    let seg = target.segments();
    align_segmentation(source, &seg)
}

pub fn align_segmentation(
    source: &str,
    seg: &MaskSegmentation,
) -> Result<Vec<Entity>, AlignmentFailure> {
    // literals[0], groups[0], literals[1], ..., groups[k-1], literals[k]
    let mut literals: Vec<&str> = vec![""];
    let mut groups: Vec<Vec<&str>> = Vec::new();
    let mut prev_mask = false;
    for s in &seg.segments {
        match s {
            Segment::Literal(text) => {
                *literals.last_mut().expect("non-empty") = text.as_str();
                prev_mask = false;
            }
            Segment::Mask(label) if prev_mask => {
                groups.last_mut().expect("group exists").push(label.as_str());
            }
            Segment::Mask(label) => {
                groups.push(vec![label.as_str()]);
                literals.push("");
                prev_mask = true;
            }
        }
    }

    if groups.is_empty() {
        return if source == literals[0] {
            Ok(Vec::new())
        } else {
            Err(AlignmentFailure::LiteralMismatch)
        };
    }

    let head = literals[0];
    let tail = *literals.last().expect("non-empty");
    if !source.starts_with(head) {
        return Err(AlignmentFailure::PrefixMismatch);
    }
    if !source.ends_with(tail) || source.len() < head.len() + tail.len() {
        return Err(AlignmentFailure::SuffixMismatch);
    }

    let chars = CharIndex::new(source);
    let k = groups.len();
    // Byte position of each middle literal (indices 1..k).
    let mut placed = vec![0usize; k + 1];
    placed[0] = 0;
    placed[k] = source.len() - tail.len();
    let mut search = Search {
        source,
        chars: &chars,
        literals: &literals,
        groups: &groups,
        placed: &mut placed,
        budget: SEARCH_BUDGET,
    };
    search.place(head.len(), source.len() - tail.len(), 1, k)?;

    let mut entities = Vec::new();
    for (gi, group) in groups.iter().enumerate() {
        let start = placed[gi] + literals[gi].len();
        let end = placed[gi + 1];
        let cs = chars.char_of(start);
        let ce = chars.char_of(end);
        for (label, span) in group.iter().zip(split_region(&chars, cs, ce, group.len())) {
            let entity = Entity::from_index(Label::from_name(label), span, &chars)
                .expect("aligned span lies inside the source");
            entities.push(entity);
        }
    }
    Ok(entities)
}

struct Search<'s, 'p> {
    source: &'s str,
    chars: &'s CharIndex<'s>,
    literals: &'s [&'s str],
    groups: &'s [Vec<&'s str>],
    placed: &'p mut [usize],
    budget: usize,
}

impl Search<'_, '_> {
    /// Places literals `first..last` (exclusive) inside the byte window
    /// `[lo, hi)`. Group `first - 1` starts at `lo`; group `last - 1` ends
    /// at `hi`.
    fn place(&mut self, lo: usize, hi: usize, first: usize, last: usize) -> Result<(), AlignmentFailure> {
        if first >= last {
            return if self.region_fits(lo, hi, first - 1) {
                Ok(())
            } else {
                Err(AlignmentFailure::AnchorNotFound {
                    anchor: self.literals[first.min(self.literals.len() - 1)].to_string(),
                })
            };
        }
        // Longest literal first; ties go to the leftmost.
        let pick = (first..last)
            .max_by(|&a, &b| {
                self.literals[a]
                    .len()
                    .cmp(&self.literals[b].len())
                    .then(b.cmp(&a))
            })
            .expect("non-empty range");
        let anchor = self.literals[pick];
        let mut from = lo;
        while from <= hi {
            let Some(off) = self.source[from..hi].find(anchor) else {
                break;
            };
            let at = from + off;
            if self.budget == 0 {
                return Err(AlignmentFailure::BudgetExhausted);
            }
            self.budget -= 1;
            let end = at + anchor.len();
            if self.place(lo, at, first, pick).is_ok() && self.place(end, hi, pick + 1, last).is_ok() {
                self.placed[pick] = at;
                return Ok(());
            }
            if matches!(self.budget, 0) {
                return Err(AlignmentFailure::BudgetExhausted);
            }
            // Next occurrence may overlap this one.
            from = at + self.source[at..].chars().next().map_or(1, char::len_utf8);
        }
        Err(AlignmentFailure::AnchorNotFound {
            anchor: anchor.to_string(),
        })
    }

    fn region_fits(&self, lo: usize, hi: usize, group: usize) -> bool {
        if lo > hi {
            return false;
        }
        let need = self.groups[group].len();
        self.chars.char_of(hi) - self.chars.char_of(lo) >= need
    }
}

/// Splits the character region `[start, end)` among `parts` adjacent masks.
///
/// Each cut goes to the whitespace boundary nearest the even split point
/// when one exists, otherwise to the even split point itself. Whitespace at
/// a cut stays with the right-hand piece.
fn split_region(chars: &CharIndex<'_>, start: usize, end: usize, parts: usize) -> Vec<Span> {
    if parts == 1 {
        return vec![Span::new(start, end).expect("ordered")];
    }
    let len = end - start;
    let region = chars.slice(Span::new(start, end).expect("ordered"));
    let region_chars: Vec<char> = region.chars().collect();
    // Candidate cuts: positions where whitespace begins after a non-space.
    let candidates: Vec<usize> = (1..len)
        .filter(|&i| region_chars[i].is_whitespace() && !region_chars[i - 1].is_whitespace())
        .collect();
    let mut cuts = Vec::with_capacity(parts - 1);
    let mut prev = 0usize;
    for p in 1..parts {
        let ideal = len * p / parts;
        // Leave at least one char for every remaining piece.
        let min_cut = prev + 1;
        let max_cut = len - (parts - p);
        let best = candidates
            .iter()
            .copied()
            .filter(|&c| c >= min_cut && c <= max_cut)
            .min_by_key(|&c| (c.abs_diff(ideal), c));
        let cut = best.unwrap_or_else(|| ideal.clamp(min_cut, max_cut));
        cuts.push(cut);
        prev = cut;
    }
    let mut spans = Vec::with_capacity(parts);
    let mut s = 0;
    for c in cuts.into_iter().chain(std::iter::once(len)) {
        spans.push(Span::new(start + s, start + c).expect("ordered"));
        s = c;
    }
    spans
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lit(s: &str) -> Segment {
        Segment::Literal(s.into())
    }

    fn mask(s: &str) -> Segment {
        Segment::Mask(s.into())
    }

    #[test]
    fn segmentation_examples() {
        let seg = extract_mask_spans("Contact [EMAIL] now");
        assert_eq!(seg.segments, vec![lit("Contact "), mask("EMAIL"), lit(" now")]);
        assert_eq!(extract_mask_spans("no masks here").segments, vec![lit("no masks here")]);
        assert_eq!(extract_mask_spans("[URL][URL]").segments, vec![mask("URL"), mask("URL")]);
    }

    #[test]
    fn unbalanced_brackets_are_literal_with_warnings() {
        let text = "a [b [EMAIL] c] d ]";
        let seg = extract_mask_spans(text);
        assert_eq!(seg.render(), text);
        assert_eq!(seg.warnings, 3);
        assert_eq!(seg.mask_count(), 1);
    }

    #[test]
    fn lowercase_brackets_are_literal() {
        let seg = extract_mask_spans("see [note] and [GIVEN_NAME_1]");
        assert_eq!(seg.segments, vec![lit("see [note] and "), mask("GIVEN_NAME_1")]);
        assert_eq!(seg.warnings, 0);
    }

    #[test]
    fn align_phone() {
        let src = "Call 555-0199 today";
        let ents = align_gold_spans(src, &"Call [PHONE_NUMBER] today".into()).unwrap();
        assert_eq!(ents.len(), 1);
        assert_eq!(ents[0].value, "555-0199");
        assert_eq!((ents[0].span.start(), ents[0].span.end()), (5, 13));
        assert_eq!(ents[0].label.as_str(), "PHONE_NUMBER");
    }

    #[test]
    fn align_identity() {
        assert_eq!(align_gold_spans("hello", &"hello".into()).unwrap(), vec![]);
        assert_eq!(
            align_gold_spans("hello", &"hullo".into()),
            Err(AlignmentFailure::LiteralMismatch)
        );
    }

    #[test]
    fn align_missing_anchor_fails() {
        let err = align_gold_spans("ab", &"[NAME] [NAME]".into()).unwrap_err();
        assert!(matches!(err, AlignmentFailure::AnchorNotFound { .. }));
    }

    #[test]
    fn align_longest_anchor_first() {
        // The short anchor " " occurs inside the first value; the longer
        // anchor " lives at " pins the layout.
        let src = "Mary Ann lives at 12 Oak St, Springfield";
        let tgt: MaskedText = "[PERSON_NAME] lives at [STREET_NAME], [CITY]".into();
        let ents = align_gold_spans(src, &tgt).unwrap();
        let values: Vec<_> = ents.iter().map(|e| e.value.as_str()).collect();
        assert_eq!(values, vec!["Mary Ann", "12 Oak St", "Springfield"]);
    }

    #[test]
    fn align_backtracks_past_infeasible_occurrence() {
        // Leftmost "-" leaves no room for the first mask.
        let src = "-x-y";
        let ents = align_gold_spans(src, &"-[A]-[B]".into()).unwrap();
        let values: Vec<_> = ents.iter().map(|e| e.value.as_str()).collect();
        assert_eq!(values, vec!["x", "y"]);
    }

    #[test]
    fn adjacent_masks_split_on_whitespace() {
        let ents = align_gold_spans("Hi Jane Doe!", &"Hi [FIRST][LAST]!".into()).unwrap();
        let values: Vec<_> = ents.iter().map(|e| e.value.as_str()).collect();
        assert_eq!(values, vec!["Jane", " Doe"]);
        let ents = align_gold_spans("x abcd", &"x [A][B]".into()).unwrap();
        let values: Vec<_> = ents.iter().map(|e| e.value.as_str()).collect();
        assert_eq!(values, vec!["ab", "cd"]);
    }

    #[test]
    fn align_unicode_offsets_are_chars() {
        let ents = align_gold_spans("Grüße, Jürgen!", &"Grüße, [NAME]!".into()).unwrap();
        assert_eq!((ents[0].span.start(), ents[0].span.end()), (7, 13));
        assert_eq!(ents[0].value, "Jürgen");
    }

    #[test]
    fn prefix_and_suffix_must_match() {
        assert_eq!(
            align_gold_spans("Hello Bob", &"Hi [NAME]".into()),
            Err(AlignmentFailure::PrefixMismatch)
        );
        assert_eq!(
            align_gold_spans("Bob says hi", &"[NAME] says hello".into()),
            Err(AlignmentFailure::SuffixMismatch)
        );
    }
}
