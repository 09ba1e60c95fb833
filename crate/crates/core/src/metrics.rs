//! Evaluation metrics for PII masking output.
//!
//! Character-level, span-level and entity-level scores compare the spans a
//! system masked against the gold spans; sequence-level scores (ROUGE,
//! BLEU, length ratio) compare the masked strings themselves; SPriV
//! measures the fraction of gold PII tokens that escaped masking.
//!
//! Zero-denominator conventions: precision is 1 when nothing was predicted
//! and recall is 1 when there was nothing to find; F1 is 0 when both are 0.
//! Sequence scores are 0 when either side has no n-grams.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::masked::{align_gold_spans, MaskedText, Segment};
use crate::span::{char_len, span_iou, spans_overlap, Entity};

/// Precision, recall and their harmonic mean.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        Self {
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }

    /// From confusion counts, with the vacuous-truth conventions.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        Self::new(ratio_or(tp, tp + fp, 1.0), ratio_or(tp, tp + fn_, 1.0))
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio_or(num: usize, den: usize, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

// ---------------------------------------------------------------------------
// Character level

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CharCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

fn coverage(entities: &[Entity], len: usize) -> Vec<bool> {
    let mut covered = vec![false; len];
    for e in entities {
        for slot in &mut covered[e.span.start().min(len)..e.span.end().min(len)] {
            *slot = true;
        }
    }
    covered
}

/// Position-wise PII/non-PII confusion counts over a text of `len` chars.
pub fn char_counts(pred: &[Entity], gold: &[Entity], len: usize) -> CharCounts {
    let p = coverage(pred, len);
    let g = coverage(gold, len);
    let mut c = CharCounts::default();
    for (pi, gi) in p.into_iter().zip(g) {
        match (pi, gi) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct CharMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// 1 when the predicted and gold position sets are identical.
    pub exact: f64,
}

pub fn char_metrics(pred: &[Entity], gold: &[Entity], len: usize) -> CharMetrics {
    let c = char_counts(pred, gold, len);
    let prf = Prf::from_counts(c.tp, c.fp, c.fn_);
    CharMetrics {
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        exact: if c.fp == 0 && c.fn_ == 0 { 1.0 } else { 0.0 },
    }
}

// ---------------------------------------------------------------------------
// Span and entity level

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Identical boundaries.
    Strict,
    /// Any overlap.
    Relaxed,
}

impl MatchMode {
    fn spans_match(&self, a: &Entity, b: &Entity) -> bool {
        match self {
            MatchMode::Strict => a.span == b.span,
            MatchMode::Relaxed => spans_overlap(a.span, b.span),
        }
    }
}

/// Maximum one-to-one matching between predictions and golds over the
/// allowed pairs. Pairs are first taken greedily in order of IoU
/// (descending), gold start and prediction start; augmenting paths then
/// extend the matching to maximum cardinality.
fn max_matching(pred: &[Entity], gold: &[Entity], allowed: impl Fn(&Entity, &Entity) -> bool) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    for (pi, p) in pred.iter().enumerate() {
        for (gi, g) in gold.iter().enumerate() {
            if allowed(p, g) {
                edges.push((pi, gi, span_iou(p.span, g.span)));
            }
        }
    }
    edges.sort_by(|a, b| {
        b.2.total_cmp(&a.2)
            .then(gold[a.1].span.start().cmp(&gold[b.1].span.start()))
            .then(pred[a.0].span.start().cmp(&pred[b.0].span.start()))
    });

    let mut pred_match: Vec<Option<usize>> = vec![None; pred.len()];
    let mut gold_match: Vec<Option<usize>> = vec![None; gold.len()];
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); pred.len()];
    for &(pi, gi, _) in &edges {
        adjacency[pi].push(gi);
        if pred_match[pi].is_none() && gold_match[gi].is_none() {
            pred_match[pi] = Some(gi);
            gold_match[gi] = Some(pi);
        }
    }

    fn augment(
        pi: usize,
        adjacency: &[Vec<usize>],
        seen: &mut [bool],
        pred_match: &mut [Option<usize>],
        gold_match: &mut [Option<usize>],
    ) -> bool {
        for &gi in &adjacency[pi] {
            if seen[gi] {
                continue;
            }
            seen[gi] = true;
            let free = match gold_match[gi] {
                None => true,
                Some(other) => augment(other, adjacency, seen, pred_match, gold_match),
            };
            if free {
                pred_match[pi] = Some(gi);
                gold_match[gi] = Some(pi);
                return true;
            }
        }
        false
    }

    for pi in 0..pred.len() {
        if pred_match[pi].is_none() && !adjacency[pi].is_empty() {
            let mut seen = vec![false; gold.len()];
            augment(pi, &adjacency, &mut seen, &mut pred_match, &mut gold_match);
        }
    }

    pred_match
        .into_iter()
        .enumerate()
        .filter_map(|(pi, g)| g.map(|gi| (pi, gi)))
        .collect()
}

/// Outcome of matching one document's predictions against its golds.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EntityMatchOutcome {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Boundary-matched pairs whose labels disagree.
    pub mislabels: usize,
    /// Size of the best boundary-only matching (labels ignored).
    pub span_matched: usize,
    /// (prediction index, gold index) of every true positive.
    pub pairs: Vec<(usize, usize)>,
}

/// Matches predictions to golds one-to-one under `mode`.
///
/// A true positive needs the mode's boundary criterion and an equal label;
/// the matching maximises their number. Mislabels are the extra pairs a
/// boundary-only matching achieves over the label-aware one.
pub fn match_entities(pred: &[Entity], gold: &[Entity], mode: MatchMode) -> EntityMatchOutcome {
    let pairs = max_matching(pred, gold, |p, g| mode.spans_match(p, g) && p.label == g.label);
    let span_matched = max_matching(pred, gold, |p, g| mode.spans_match(p, g)).len();
    let tp = pairs.len();
    EntityMatchOutcome {
        tp,
        fp: pred.len() - tp,
        fn_: gold.len() - tp,
        mislabels: span_matched - tp,
        span_matched,
        pairs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct EntityMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Character-level (TP + TN) / all positions.
    pub accuracy: f64,
    /// Label agreement among boundary-matched pairs.
    pub type_accuracy: f64,
    pub mislabels: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl EntityMetrics {
    fn from_totals(t: &EntityTotals, chars: &CharCounts) -> Self {
        let prf = Prf::from_counts(t.tp, t.fp, t.fn_);
        let positions = chars.tp + chars.fp + chars.fn_ + chars.tn;
        EntityMetrics {
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
            accuracy: ratio_or(chars.tp + chars.tn, positions, 1.0),
            type_accuracy: ratio_or(t.tp, t.span_matched, 1.0),
            mislabels: t.mislabels,
            tp: t.tp,
            fp: t.fp,
            fn_: t.fn_,
        }
    }
}

pub fn entity_metrics(pred: &[Entity], gold: &[Entity], mode: MatchMode, text_len: usize) -> (EntityMatchOutcome, EntityMetrics) {
    let outcome = match_entities(pred, gold, mode);
    let totals = EntityTotals::from(&outcome);
    let chars = char_counts(pred, gold, text_len);
    let metrics = EntityMetrics::from_totals(&totals, &chars);
    (outcome, metrics)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct EntityTotals {
    tp: usize,
    fp: usize,
    fn_: usize,
    mislabels: usize,
    span_matched: usize,
}

impl From<&EntityMatchOutcome> for EntityTotals {
    fn from(o: &EntityMatchOutcome) -> Self {
        Self {
            tp: o.tp,
            fp: o.fp,
            fn_: o.fn_,
            mislabels: o.mislabels,
            span_matched: o.span_matched,
        }
    }
}

impl EntityTotals {
    fn add(&mut self, o: &EntityTotals) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.mislabels += o.mislabels;
        self.span_matched += o.span_matched;
    }
}

/// Sum of IoU over greedy IoU-descending one-to-one pairs, labels ignored.
pub fn matched_iou_sum(pred: &[Entity], gold: &[Entity]) -> f64 {
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, p) in pred.iter().enumerate() {
        for (gi, g) in gold.iter().enumerate() {
            let iou = span_iou(p.span, g.span);
            if iou > 0.0 {
                cands.push((iou, pi, gi));
            }
        }
    }
    cands.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(gold[a.2].span.start().cmp(&gold[b.2].span.start()))
            .then(pred[a.1].span.start().cmp(&pred[b.1].span.start()))
    });
    let mut pred_used = vec![false; pred.len()];
    let mut gold_used = vec![false; gold.len()];
    let mut sum = 0.0;
    for (iou, pi, gi) in cands {
        if !pred_used[pi] && !gold_used[gi] {
            pred_used[pi] = true;
            gold_used[gi] = true;
            sum += iou;
        }
    }
    sum
}

/// Average IoU over golds; unmatched golds contribute 0. With no golds the
/// score is 1 if nothing was predicted, else 0.
pub fn avg_iou(pred: &[Entity], gold: &[Entity]) -> f64 {
    if gold.is_empty() {
        return if pred.is_empty() { 1.0 } else { 0.0 };
    }
    matched_iou_sum(pred, gold) / gold.len() as f64
}

// ---------------------------------------------------------------------------
// Sequence level

fn strip_token(tok: &str) -> &str {
    tok.trim_matches(|c: char| !c.is_alphanumeric())
}

/// Splits masked text into tokens: each mask token is one token, literal
/// text is split on whitespace with surrounding punctuation removed.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for seg in crate::masked::extract_mask_spans(text).segments {
        match seg {
            Segment::Mask(label) => tokens.push(format!("[{label}]")),
            Segment::Literal(lit) => tokens.extend(
                lit.split_whitespace()
                    .map(strip_token)
                    .filter(|t| !t.is_empty())
                    .map(str::to_string),
            ),
        }
    }
    tokens
}

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_default() += 1;
    }
    counts
}

/// Clipped n-gram overlap and the n-gram totals of both sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OverlapCounts {
    pub overlap: usize,
    pub hyp: usize,
    pub reference: usize,
}

impl OverlapCounts {
    fn add(&mut self, o: &OverlapCounts) {
        self.overlap += o.overlap;
        self.hyp += o.hyp;
        self.reference += o.reference;
    }

    fn prf(&self) -> Prf {
        Prf::new(ratio_or(self.overlap, self.hyp, 0.0), ratio_or(self.overlap, self.reference, 0.0))
    }
}

pub fn ngram_overlap<T: AsRef<str>>(hyp: &[T], reference: &[T], n: usize) -> OverlapCounts {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let overlap = h
        .iter()
        .map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0)))
        .sum();
    OverlapCounts {
        overlap,
        hyp: h.values().sum(),
        reference: r.values().sum(),
    }
}

pub fn rouge_n<T: AsRef<str>>(hyp: &[T], reference: &[T], n: usize) -> Prf {
    ngram_overlap(hyp, reference, n).prf()
}

/// Length of the longest common subsequence (two-row dynamic program).
pub fn lcs_len<T: AsRef<str>>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: AsRef<str>>(hyp: &[T], reference: &[T]) -> Prf {
    OverlapCounts {
        overlap: lcs_len(hyp, reference),
        hyp: hyp.len(),
        reference: reference.len(),
    }
    .prf()
}

const BLEU_ORDER: usize = 4;

/// Sufficient statistics for corpus BLEU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BleuCounts {
    pub matches: [usize; BLEU_ORDER],
    pub totals: [usize; BLEU_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuCounts {
    pub fn new<T: AsRef<str>>(hyp: &[T], reference: &[T]) -> Self {
        let mut c = BleuCounts {
            hyp_len: hyp.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=BLEU_ORDER {
            let o = ngram_overlap(hyp, reference, n);
            c.matches[n - 1] = o.overlap;
            c.totals[n - 1] = o.hyp;
        }
        c
    }

    fn add(&mut self, o: &BleuCounts) {
        for i in 0..BLEU_ORDER {
            self.matches[i] += o.matches[i];
            self.totals[i] += o.totals[i];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }

    /// BLEU-4: geometric mean of clipped precisions (add-one smoothing when
    /// an order of 2 or more has no matches) times the brevity penalty.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for i in 0..BLEU_ORDER {
            let p = if i == 0 || self.matches[i] > 0 {
                self.matches[i] as f64 / self.totals[i] as f64
            } else {
                1.0 / (self.totals[i] as f64 + 1.0)
            };
            log_sum += p.ln();
        }
        let bp = if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        };
        bp * (log_sum / BLEU_ORDER as f64).exp()
    }
}

pub fn bleu<T: AsRef<str>>(hyp: &[T], reference: &[T]) -> f64 {
    BleuCounts::new(hyp, reference).score()
}

/// Total hypothesis tokens over total reference tokens.
pub fn length_ratio<T: AsRef<str>>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> f64 {
    let h: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    length_ratio_from_counts(h, r)
}

fn length_ratio_from_counts(hyp: usize, reference: usize) -> f64 {
    if hyp == 0 {
        0.0
    } else if reference == 0 {
        f64::INFINITY
    } else {
        hyp as f64 / reference as f64
    }
}

// ---------------------------------------------------------------------------
// Privacy leakage

/// Gold PII tokens and how many of them no prediction covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LeakageCounts {
    pub missed: usize,
    pub total: usize,
}

/// Splits each gold value into whitespace tokens (surrounding punctuation
/// removed); a token is missed unless every one of its characters lies
/// inside some predicted span.
pub fn leakage_counts(pred: &[Entity], gold: &[Entity], len: usize) -> LeakageCounts {
    let covered = coverage(pred, len);
    let mut c = LeakageCounts::default();
    for g in gold {
        let chars: Vec<char> = g.value.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            if chars[i].is_whitespace() {
                i += 1;
                continue;
            }
            let start = i;
            while i < chars.len() && !chars[i].is_whitespace() {
                i += 1;
            }
            // Trim non-alphanumerics at both ends of the token.
            let (mut s, mut e) = (start, i);
            while s < e && !chars[s].is_alphanumeric() {
                s += 1;
            }
            while e > s && !chars[e - 1].is_alphanumeric() {
                e -= 1;
            }
            if s == e {
                continue;
            }
            c.total += 1;
            let base = g.span.start();
            if !(base + s..base + e).all(|p| covered.get(p).copied().unwrap_or(false)) {
                c.missed += 1;
            }
        }
    }
    c
}

// ---------------------------------------------------------------------------
// Corpus evaluation

/// One evaluated example: the source, the reference masking and the
/// system's masking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionTriple {
    #[serde(default)]
    pub id: String,
    #[serde(rename = "source_text")]
    pub source: String,
    #[serde(rename = "gold_text")]
    pub gold: MaskedText,
    #[serde(rename = "predicted_text")]
    pub predicted: MaskedText,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no prediction triples to evaluate")]
    Empty,
    #[error("all {quarantined} triples failed alignment")]
    NothingAligned { quarantined: usize },
    #[error("cannot read {path}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
}

/// Reads a line-delimited prediction file.
pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionTriple>, EvalError> {
    let path = path.as_ref();
    let read_err = |source| EvalError::Read {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(read_err)?;
    let mut triples = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(read_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let mut t: PredictionTriple = serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        if t.id.is_empty() {
            t.id = format!("line-{}", idx + 1);
        }
        triples.push(t);
    }
    Ok(triples)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct EvalReport {
    pub triples: usize,
    pub quarantined: usize,
    pub char_level: CharMetrics,
    pub avg_iou: f64,
    pub strict: EntityMetrics,
    pub relaxed: EntityMetrics,
    pub rouge1: Prf,
    pub rouge2: Prf,
    pub rouge_l: Prf,
    pub bleu: f64,
    pub spriv: f64,
    pub length_ratio: f64,
}

#[derive(Debug, Clone, Default)]
struct Totals {
    triples: usize,
    quarantined: usize,
    exact: usize,
    chars: CharCounts,
    iou_sum: f64,
    preds: usize,
    golds: usize,
    strict: EntityTotals,
    relaxed: EntityTotals,
    rouge1: OverlapCounts,
    rouge2: OverlapCounts,
    rouge_l: OverlapCounts,
    bleu: BleuCounts,
    leakage: LeakageCounts,
}

impl Totals {
    fn merge(mut self, o: Totals) -> Totals {
        self.triples += o.triples;
        self.quarantined += o.quarantined;
        self.exact += o.exact;
        self.chars.tp += o.chars.tp;
        self.chars.fp += o.chars.fp;
        self.chars.fn_ += o.chars.fn_;
        self.chars.tn += o.chars.tn;
        self.iou_sum += o.iou_sum;
        self.preds += o.preds;
        self.golds += o.golds;
        self.strict.add(&o.strict);
        self.relaxed.add(&o.relaxed);
        self.rouge1.add(&o.rouge1);
        self.rouge2.add(&o.rouge2);
        self.rouge_l.add(&o.rouge_l);
        self.bleu.add(&o.bleu);
        self.leakage.missed += o.leakage.missed;
        self.leakage.total += o.leakage.total;
        self
    }
}

fn score_triple(t: &PredictionTriple) -> Totals {
    let aligned = align_gold_spans(&t.source, &t.gold)
        .and_then(|g| align_gold_spans(&t.source, &t.predicted).map(|p| (g, p)));
    let Ok((gold, pred)) = aligned else {
        tracing::debug!(id = %t.id, "triple quarantined: alignment failed");
        return Totals {
            quarantined: 1,
            ..Default::default()
        };
    };
    let len = char_len(&t.source);
    let chars = char_counts(&pred, &gold, len);
    let hyp = tokenize(t.predicted.as_str());
    let reference = tokenize(t.gold.as_str());
    Totals {
        triples: 1,
        quarantined: 0,
        exact: usize::from(chars.fp == 0 && chars.fn_ == 0),
        chars,
        iou_sum: matched_iou_sum(&pred, &gold),
        preds: pred.len(),
        golds: gold.len(),
        strict: EntityTotals::from(&match_entities(&pred, &gold, MatchMode::Strict)),
        relaxed: EntityTotals::from(&match_entities(&pred, &gold, MatchMode::Relaxed)),
        rouge1: ngram_overlap(&hyp, &reference, 1),
        rouge2: ngram_overlap(&hyp, &reference, 2),
        rouge_l: OverlapCounts {
            overlap: lcs_len(&hyp, &reference),
            hyp: hyp.len(),
            reference: reference.len(),
        },
        bleu: BleuCounts::new(&hyp, &reference),
        leakage: leakage_counts(&pred, &gold, len),
    }
}

/// Scores a prediction set. Triples whose gold or predicted text cannot be
/// aligned with the source are excluded from every metric and counted as
/// quarantined. Counts are summed over the corpus before ratios are taken.
pub fn evaluate(triples: &[PredictionTriple]) -> Result<EvalReport, EvalError> {
    if triples.is_empty() {
        return Err(EvalError::Empty);
    }
    let t = triples
        .par_iter()
        .map(score_triple)
        .reduce(Totals::default, Totals::merge);
    if t.triples == 0 {
        return Err(EvalError::NothingAligned {
            quarantined: t.quarantined,
        });
    }
    let char_prf = Prf::from_counts(t.chars.tp, t.chars.fp, t.chars.fn_);
    Ok(EvalReport {
        triples: t.triples,
        quarantined: t.quarantined,
        char_level: CharMetrics {
            precision: char_prf.precision,
            recall: char_prf.recall,
            f1: char_prf.f1,
            exact: t.exact as f64 / t.triples as f64,
        },
        avg_iou: if t.golds == 0 {
            if t.preds == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            t.iou_sum / t.golds as f64
        },
        strict: EntityMetrics::from_totals(&t.strict, &t.chars),
        relaxed: EntityMetrics::from_totals(&t.relaxed, &t.chars),
        rouge1: t.rouge1.prf(),
        rouge2: t.rouge2.prf(),
        rouge_l: t.rouge_l.prf(),
        bleu: t.bleu.score(),
        spriv: ratio_or(t.leakage.missed, t.leakage.total, 0.0),
        length_ratio: length_ratio_from_counts(t.rouge_l.hyp, t.rouge_l.reference),
    })
}

impl EvalReport {
    /// Every field as `(key, value)`, in a fixed order.
    pub fn fields(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = vec![
            ("triples".into(), self.triples as f64),
            ("quarantined".into(), self.quarantined as f64),
            ("char_precision".into(), self.char_level.precision),
            ("char_recall".into(), self.char_level.recall),
            ("char_f1".into(), self.char_level.f1),
            ("char_exact_match".into(), self.char_level.exact),
            ("avg_iou".into(), self.avg_iou),
        ];
        for (name, m) in [("strict", &self.strict), ("relaxed", &self.relaxed)] {
            out.extend([
                (format!("{name}_precision"), m.precision),
                (format!("{name}_recall"), m.recall),
                (format!("{name}_f1"), m.f1),
                (format!("{name}_accuracy"), m.accuracy),
                (format!("{name}_type_accuracy"), m.type_accuracy),
                (format!("{name}_mislabels"), m.mislabels as f64),
                (format!("{name}_tp"), m.tp as f64),
                (format!("{name}_fp"), m.fp as f64),
                (format!("{name}_fn"), m.fn_ as f64),
            ]);
        }
        for (name, m) in [("rouge1", &self.rouge1), ("rouge2", &self.rouge2), ("rougeL", &self.rouge_l)] {
            out.extend([
                (format!("{name}_precision"), m.precision),
                (format!("{name}_recall"), m.recall),
                (format!("{name}_f1"), m.f1),
            ]);
        }
        out.extend([
            ("bleu".into(), self.bleu),
            ("spriv".into(), self.spriv),
            ("length_ratio".into(), self.length_ratio),
        ]);
        out
    }

    /// Flat `key = value` rendering, one field per line.
    pub fn to_key_values(&self) -> String {
        self.fields()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parses the output of [`EvalReport::to_key_values`].
    pub fn parse_key_values(text: &str) -> Result<Vec<(String, f64)>, String> {
        text.lines()
            .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .map(|l| {
                let (k, v) = l.split_once('=').ok_or_else(|| format!("bad line {l:?}"))?;
                let v: f64 = v.trim().parse().map_err(|e| format!("{k}: {e}"))?;
                Ok((k.trim().to_string(), v))
            })
            .collect()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Evaluated {} triples ({} quarantined)", self.triples, self.quarantined)?;
        writeln!(f)?;
        writeln!(f, "Character-level")?;
        writeln!(f, "  Precision           {:.4}", self.char_level.precision)?;
        writeln!(f, "  Recall              {:.4}", self.char_level.recall)?;
        writeln!(f, "  F1 Score            {:.4}", self.char_level.f1)?;
        writeln!(f, "  Exact Match Rate    {:.4}", self.char_level.exact)?;
        writeln!(f, "Span-based")?;
        writeln!(f, "  Average IoU         {:.4}", self.avg_iou)?;
        writeln!(f, "Entity-level          {:>9} {:>9}", "strict", "relaxed")?;
        let rows: [(&str, f64, f64); 5] = [
            ("Precision", self.strict.precision, self.relaxed.precision),
            ("Recall", self.strict.recall, self.relaxed.recall),
            ("F1 Score", self.strict.f1, self.relaxed.f1),
            ("Accuracy", self.strict.accuracy, self.relaxed.accuracy),
            ("Type Accuracy", self.strict.type_accuracy, self.relaxed.type_accuracy),
        ];
        for (name, s, r) in rows {
            writeln!(f, "  {name:<20}{s:>9.4} {r:>9.4}")?;
        }
        writeln!(f, "  {:<20}{:>9} {:>9}", "Mislabel #", self.strict.mislabels, self.relaxed.mislabels)?;
        writeln!(f, "Sequence-level")?;
        writeln!(f, "  ROUGE-1 F1          {:.4}", self.rouge1.f1)?;
        writeln!(f, "  ROUGE-2 F1          {:.4}", self.rouge2.f1)?;
        writeln!(f, "  ROUGE-L F1          {:.4}", self.rouge_l.f1)?;
        writeln!(f, "  BLEU                {:.4}", self.bleu)?;
        writeln!(f, "  SPriV               {:.4}", self.spriv)?;
        writeln!(f, "  Length Ratio        {:.4}", self.length_ratio)
    }
}
