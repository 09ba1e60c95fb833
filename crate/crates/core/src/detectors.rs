//! Detection backends: the regex suite, the detector abstraction and the
//! leak finder / masker built on top of it.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use regex::Regex;

use crate::masked::{MaskedText, Segment};
use crate::span::{resolve_overlaps, CharIndex, Entity, Label, Span};
use crate::taxonomy::{CanonicalLabel, UnknownLabel};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DetectError {
    #[error("detector backend timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("detector backend unavailable: {0}")]
    Backend(String),
}

/// Anything that maps text to labelled spans.
///
/// Implementations return valid, start-sorted entities whose values equal
/// the corresponding slices of the input.
pub trait Detector: Send + Sync {
    fn detect(&self, text: &str) -> Result<Vec<Entity>, DetectError>;
}

impl<D: Detector + ?Sized> Detector for &D {
    fn detect(&self, text: &str) -> Result<Vec<Entity>, DetectError> {
        (**self).detect(text)
    }
}

impl<D: Detector + ?Sized> Detector for Box<D> {
    fn detect(&self, text: &str) -> Result<Vec<Entity>, DetectError> {
        (**self).detect(text)
    }
}

impl<D: Detector + ?Sized> Detector for Arc<D> {
    fn detect(&self, text: &str) -> Result<Vec<Entity>, DetectError> {
        (**self).detect(text)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PatternError {
    #[error("failed to read patterns file: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected `LABEL<TAB>PRIORITY<TAB>PATTERN`")]
    Syntax { line: usize },
    #[error("line {line}")]
    Label { line: usize, source: UnknownLabel },
    #[error("line {line}: invalid priority {value:?}")]
    Priority { line: usize, value: String },
    #[error("line {line}")]
    Regex { line: usize, source: regex::Error },
    #[error("line {line}: priority {priority} already used by {other}")]
    PriorityClash {
        line: usize,
        priority: i32,
        other: CanonicalLabel,
    },
}

#[derive(Debug, Clone)]
pub struct RegexRule {
    pub label: CanonicalLabel,
    pub priority: i32,
    pub regex: Regex,
}

/// Ordered list of (pattern, label, priority) rules.
#[derive(Debug, Clone)]
pub struct RegexSuite {
    rules: Vec<RegexRule>,
}

const DEFAULT_PATTERNS: &str = include_str!("../data/default_patterns.tsv");

impl Default for RegexSuite {
    fn default() -> Self {
        Self::parse(DEFAULT_PATTERNS).expect("bundled patterns are valid")
    }
}

impl RegexSuite {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, PatternError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Parses `LABEL<TAB>PRIORITY<TAB>PATTERN` lines. Blank lines and lines
    /// starting with `#` are skipped. Two different labels may not share a
    /// priority.
    pub fn parse(text: &str) -> Result<Self, PatternError> {
        let mut rules: Vec<RegexRule> = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            let (Some(label), Some(priority), Some(pattern)) = (parts.next(), parts.next(), parts.next())
            else {
                return Err(PatternError::Syntax { line: line_no });
            };
            let label: CanonicalLabel = label
                .trim()
                .parse()
                .map_err(|source| PatternError::Label { line: line_no, source })?;
            let priority: i32 = priority.trim().parse().map_err(|_| PatternError::Priority {
                line: line_no,
                value: priority.to_string(),
            })?;
            if let Some(other) = rules.iter().find(|r| r.priority == priority && r.label != label) {
                return Err(PatternError::PriorityClash {
                    line: line_no,
                    priority,
                    other: other.label,
                });
            }
            let regex = Regex::new(pattern).map_err(|source| PatternError::Regex { line: line_no, source })?;
            rules.push(RegexRule { label, priority, regex });
        }
        Ok(Self { rules })
    }

    pub fn rules(&self) -> &[RegexRule] {
        &self.rules
    }

    /// Labels the suite can emit.
    pub fn labels(&self) -> Vec<CanonicalLabel> {
        let mut labels: Vec<_> = self.rules.iter().map(|r| r.label).collect();
        labels.sort();
        labels.dedup();
        labels
    }
}

impl Detector for RegexSuite {
    fn detect(&self, text: &str) -> Result<Vec<Entity>, DetectError> {
        Ok(detect_regex(text, self))
    }
}

struct Candidate {
    priority: i32,
    label: CanonicalLabel,
    start: usize,
    end: usize,
}

/// Runs every rule and keeps a non-overlapping subset of the matches:
/// higher priority first, then leftmost, then longest.
pub fn detect_regex(text: &str, suite: &RegexSuite) -> Vec<Entity> {
    let mut candidates = Vec::new();
    for rule in &suite.rules {
        for m in rule.regex.find_iter(text) {
            if m.start() == m.end() || !passes_checks(rule.label, m.as_str()) {
                continue;
            }
            candidates.push(Candidate {
                priority: rule.priority,
                label: rule.label,
                start: m.start(),
                end: m.end(),
            });
        }
    }
    candidates.sort_by(|a, b| {
        b.priority
            .cmp(&a.priority)
            .then(a.start.cmp(&b.start))
            .then((b.end - b.start).cmp(&(a.end - a.start)))
    });

    let mut accepted: Vec<&Candidate> = Vec::new();
    for c in &candidates {
        if accepted.iter().all(|a| c.end <= a.start || c.start >= a.end) {
            accepted.push(c);
        }
    }
    accepted.sort_by_key(|c| c.start);

    let chars = CharIndex::new(text);
    accepted
        .into_iter()
        .map(|c| {
            let span = chars.span_of_bytes(c.start, c.end);
            Entity {
                label: Label::Canonical(c.label),
                span,
                value: text[c.start..c.end].to_string(),
            }
        })
        .collect()
}

fn passes_checks(label: CanonicalLabel, matched: &str) -> bool {
    let digits: Vec<u32> = matched.chars().filter_map(|c| c.to_digit(10)).collect();
    match label {
        CanonicalLabel::IdentificationNumber if matched.bytes().all(|b| b.is_ascii_digit() || b == b' ' || b == b'-') => {
            if (13..=19).contains(&digits.len()) {
                luhn_valid(&digits)
            } else {
                true
            }
        }
        CanonicalLabel::PhoneNumber => {
            if !(7..=15).contains(&digits.len()) {
                return false;
            }
            let prefixed = matched.starts_with('+') || matched.contains('(');
            let groups = matched
                .split(|c: char| !c.is_ascii_digit())
                .filter(|g| !g.is_empty())
                .count();
            let local = matched.len() == 8 && matched.as_bytes()[3] == b'-' && digits.len() == 7;
            prefixed || groups >= 3 || local
        }
        _ => true,
    }
}

/// Luhn checksum over a digit sequence.
pub fn luhn_valid(digits: &[u32]) -> bool {
    if digits.is_empty() {
        return false;
    }
    let sum: u32 = digits
        .iter()
        .rev()
        .enumerate()
        .map(|(i, &d)| {
            if i % 2 == 1 {
                let x = d * 2;
                if x > 9 {
                    x - 9
                } else {
                    x
                }
            } else {
                d
            }
        })
        .sum();
    sum % 10 == 0
}

/// Runs `detector` over the literal segments of a masked target. Mask
/// tokens are never scanned. Every hit is PII that escaped masking; its
/// span indexes into the target text.
pub fn find_leaks(target: &MaskedText, detector: &dyn Detector) -> Result<Vec<Entity>, DetectError> {
    let mut leaks = Vec::new();
    let mut offset = 0usize;
    for seg in target.segments().segments {
        match seg {
            Segment::Mask(label) => offset += label.chars().count() + 2,
            Segment::Literal(text) => {
                for mut e in detector.detect(&text)? {
                    e.span = e.span.shifted(offset);
                    leaks.push(e);
                }
                offset += text.chars().count();
            }
        }
    }
    Ok(leaks)
}

/// Replaces every entity span with its mask token. Overlapping entities are
/// resolved leftmost-then-longest first; all other text is kept verbatim.
pub fn mask_entities(text: &str, entities: &[Entity]) -> (MaskedText, Vec<Entity>) {
    let kept = resolve_overlaps(entities.to_vec());
    let chars = CharIndex::new(text);
    let mut out = text.to_string();
    for e in kept.iter().rev() {
        let start = chars.byte_of(e.span.start());
        let end = chars.byte_of(e.span.end());
        out.replace_range(start..end, &format!("[{}]", e.label.as_str()));
    }
    (MaskedText::new(out), kept)
}

/// Detected entities together with the masked rendering of the text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskOutcome {
    pub masked: MaskedText,
    pub entities: Vec<Entity>,
}

pub fn apply_detector_as_masker(text: &str, detector: &dyn Detector) -> Result<MaskOutcome, DetectError> {
    let found = detector.detect(text)?;
    let (masked, entities) = mask_entities(text, &found);
    Ok(MaskOutcome { masked, entities })
}

/// Per-label counts of PII found unmasked in targets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LeakReport {
    pub per_label: BTreeMap<String, usize>,
    pub total: usize,
    pub offenders: Vec<String>,
}

impl LeakReport {
    pub fn record(&mut self, record_id: &str, leaks: &[Entity]) {
        if leaks.is_empty() {
            return;
        }
        for leak in leaks {
            *self.per_label.entry(leak.label.as_str().to_string()).or_default() += 1;
        }
        self.total += leaks.len();
        self.offenders.push(record_id.to_string());
    }

    pub fn merge(&mut self, other: LeakReport) {
        for (label, n) in other.per_label {
            *self.per_label.entry(label).or_default() += n;
        }
        self.total += other.total;
        self.offenders.extend(other.offenders);
    }

    pub fn count(&self, label: CanonicalLabel) -> usize {
        self.per_label.get(label.as_str()).copied().unwrap_or(0)
    }

    /// Label with the most leaks; ties go to the alphabetically first.
    pub fn top_label(&self) -> Option<&str> {
        self.per_label
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(l, _)| l.as_str())
    }
}

/// Detector returning a fixed list of entities located by value, for tests
/// and for wrapping externally produced annotations.
#[derive(Debug, Clone, Default)]
pub struct FixedDetector {
    pub items: Vec<(CanonicalLabel, String)>,
}

impl Detector for FixedDetector {
    fn detect(&self, text: &str) -> Result<Vec<Entity>, DetectError> {
        let chars = CharIndex::new(text);
        let mut found = Vec::new();
        for (label, value) in &self.items {
            if value.is_empty() {
                continue;
            }
            for (byte, _) in text.match_indices(value.as_str()) {
                let span = chars.span_of_bytes(byte, byte + value.len());
                found.push(Entity {
                    label: Label::Canonical(*label),
                    span,
                    value: value.clone(),
                });
            }
        }
        Ok(resolve_overlaps(found))
    }
}

/// Convenience: span of a substring's first occurrence, in characters.
pub fn find_span(text: &str, needle: &str) -> Option<Span> {
    let byte = text.find(needle)?;
    let chars = CharIndex::new(text);
    Some(chars.span_of_bytes(byte, byte + needle.len()))
}
