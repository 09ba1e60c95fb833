//! Character spans, labelled entities and span overlap measures.
//!
//! All offsets are Unicode scalar value indices into the owning text and
//! spans are half-open: `[start, end)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::taxonomy::CanonicalLabel;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SpanError {
    #[error("span start {start} is after its end {end}")]
    Inverted { start: usize, end: usize },
    #[error("span end {end} exceeds text length {len}")]
    OutOfBounds { end: usize, len: usize },
}

/// Half-open character range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    start: usize,
    end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Result<Self, SpanError> {
        if start > end {
            return Err(SpanError::Inverted { start, end });
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn intersection_len(&self, other: &Span) -> usize {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        hi.saturating_sub(lo)
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.start <= pos && pos < self.end
    }

    /// Checks the span against a text of `len` characters.
    pub fn validate(&self, len: usize) -> Result<(), SpanError> {
        if self.end > len {
            return Err(SpanError::OutOfBounds { end: self.end, len });
        }
        Ok(())
    }

    /// Moves the span right by `offset` characters.
    pub fn shifted(&self, offset: usize) -> Span {
        Span {
            start: self.start + offset,
            end: self.end + offset,
        }
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// Intersection over union of two spans, measured in character positions.
///
/// Disjoint spans score 0, and so does a pair of empty spans: an empty
/// prediction never earns overlap credit.
pub fn span_iou(a: Span, b: Span) -> f64 {
    let inter = a.intersection_len(&b);
    if inter == 0 {
        return 0.0;
    }
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// True iff the spans share at least one character position.
pub fn spans_overlap(a: Span, b: Span) -> bool {
    a.intersection_len(&b) > 0
}

/// Entity label: one of the canonical labels, or a raw label carried through
/// verbatim (for example an un-normalized annotation from a corpus).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Canonical(CanonicalLabel),
    Raw(String),
}

impl Label {
    /// Builds a label from its name; canonical names become `Canonical`.
    pub fn from_name(name: &str) -> Self {
        match name.parse::<CanonicalLabel>() {
            Ok(canon) => Label::Canonical(canon),
            Err(_) => Label::Raw(name.to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            Label::Canonical(c) => c.as_str(),
            Label::Raw(s) => s,
        }
    }

    pub fn is_canonical(&self) -> bool {
        matches!(self, Label::Canonical(_))
    }

    pub fn canonical(&self) -> Option<CanonicalLabel> {
        match self {
            Label::Canonical(c) => Some(*c),
            Label::Raw(_) => None,
        }
    }
}

impl From<CanonicalLabel> for Label {
    fn from(c: CanonicalLabel) -> Self {
        Label::Canonical(c)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A labelled character span together with the surface text it covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub label: Label,
    pub span: Span,
    pub value: String,
}

impl Entity {
    /// Builds an entity by slicing `text`, validating the span on the way.
    pub fn from_text(label: impl Into<Label>, span: Span, text: &str) -> Result<Self, SpanError> {
        let chars = CharIndex::new(text);
        Self::from_index(label, span, &chars)
    }

    pub(crate) fn from_index(
        label: impl Into<Label>,
        span: Span,
        chars: &CharIndex<'_>,
    ) -> Result<Self, SpanError> {
        span.validate(chars.len())?;
        Ok(Self {
            label: label.into(),
            span,
            value: chars.slice(span).to_string(),
        })
    }

    /// Checks that `value` equals the slice of `text` under `span`.
    pub fn validate_against(&self, text: &str) -> Result<(), EntityError> {
        let chars = CharIndex::new(text);
        self.span.validate(chars.len())?;
        if chars.slice(self.span) != self.value {
            return Err(EntityError::ValueMismatch { span: self.span });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EntityError {
    #[error(transparent)]
    Span(#[from] SpanError),
    #[error("entity value does not match the text under {span}")]
    ValueMismatch { span: Span },
}

/// Sorts entities by start offset (then end, then label) in place.
pub fn sort_entities(entities: &mut [Entity]) {
    entities.sort_by(|a, b| {
        (a.span.start, a.span.end, a.label.as_str()).cmp(&(b.span.start, b.span.end, b.label.as_str()))
    });
}

/// Drops overlapping entities, keeping the leftmost and then the longest.
/// The result is sorted and pairwise disjoint.
pub fn resolve_overlaps(mut entities: Vec<Entity>) -> Vec<Entity> {
    entities.sort_by(|a, b| {
        a.span
            .start
            .cmp(&b.span.start)
            .then(b.span.len().cmp(&a.span.len()))
            .then(a.label.as_str().cmp(b.label.as_str()))
    });
    let mut kept: Vec<Entity> = Vec::with_capacity(entities.len());
    for e in entities {
        if e.span.is_empty() {
            continue;
        }
        match kept.last() {
            Some(last) if e.span.start < last.span.end => {}
            _ => kept.push(e),
        }
    }
    kept
}

/// Maps between character offsets and byte offsets of a string.
#[derive(Debug, Clone)]
pub struct CharIndex<'a> {
    text: &'a str,
    /// Byte offset of every char boundary, including the end of the text.
    boundaries: Vec<usize>,
}

impl<'a> CharIndex<'a> {
    pub fn new(text: &'a str) -> Self {
        let mut boundaries: Vec<usize> = text.char_indices().map(|(i, _)| i).collect();
        boundaries.push(text.len());
        Self { text, boundaries }
    }

    /// Number of characters.
    pub fn len(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn byte_of(&self, char_pos: usize) -> usize {
        self.boundaries[char_pos]
    }

    /// Character position of a byte offset that lies on a char boundary.
    pub fn char_of(&self, byte_pos: usize) -> usize {
        self.boundaries
            .binary_search(&byte_pos)
            .expect("byte offset must lie on a char boundary")
    }

    pub fn slice(&self, span: Span) -> &'a str {
        &self.text[self.byte_of(span.start)..self.byte_of(span.end)]
    }

    pub fn span_of_bytes(&self, start: usize, end: usize) -> Span {
        Span {
            start: self.char_of(start),
            end: self.char_of(end),
        }
    }
}

/// Length of a string in characters.
pub fn char_len(text: &str) -> usize {
    text.chars().count()
}
