//! Corpus ingestion, auditing, variant construction and splitting.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detectors::{find_leaks, DetectError, Detector, LeakReport, RegexSuite};
use crate::masked::{align_gold_spans, MaskedText, Segment};
use crate::span::{char_len, CharIndex, Entity, Label, Span};
use crate::taxonomy::{CanonicalLabel, MappingTable};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read {path}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot write {path}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("split needs at least 3 records, got {0}")]
    TooFewRecords(usize),
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("taxonomy size must be at least 1")]
    EmptyTaxonomy,
    #[error(transparent)]
    Detect(#[from] DetectError),
}

/// One source/target pair of the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub source: String,
    pub target: MaskedText,
    /// Explicit span annotations, when the corpus ships them.
    pub gold: Option<Vec<Entity>>,
    pub language: String,
}

impl DatasetRecord {
    /// Gold entities: the explicit annotations, or spans recovered by
    /// aligning the target against the source.
    pub fn gold_entities(&self) -> Option<Vec<Entity>> {
        match &self.gold {
            Some(g) => Some(g.clone()),
            None => align_gold_spans(&self.source, &self.target).ok(),
        }
    }

    /// PII left unmasked in this record's target.
    pub fn leaks(&self, detector: &dyn Detector) -> Result<Vec<Entity>, DetectError> {
        find_leaks(&self.target, detector)
    }
}

/// Span annotation in the corpus file format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivacyMaskEntry {
    pub value: String,
    pub start: usize,
    pub end: usize,
    pub label: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecordLine {
    #[serde(default, skip_serializing_if = "Option::is_none", deserialize_with = "id_as_string")]
    id: Option<String>,
    source_text: String,
    target_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    privacy_mask: Option<Vec<PrivacyMaskEntry>>,
    #[serde(default)]
    language: String,
}

fn id_as_string<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
    let v = Option::<serde_json::Value>::deserialize(d)?;
    Ok(v.map(|v| match v {
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    }))
}

impl DatasetRecord {
    fn to_line(&self) -> RecordLine {
        RecordLine {
            id: Some(self.id.clone()),
            source_text: self.source.clone(),
            target_text: self.target.as_str().to_string(),
            privacy_mask: self.gold.as_ref().map(|g| {
                g.iter()
                    .map(|e| PrivacyMaskEntry {
                        value: e.value.clone(),
                        start: e.span.start(),
                        end: e.span.end(),
                        label: e.label.as_str().to_string(),
                    })
                    .collect()
            }),
            language: self.language.clone(),
        }
    }

    /// Serializes the record as one line of the corpus format.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.to_line()).expect("record serializes")
    }
}

/// A record set aside with the reason it could not be used.
#[derive(Debug, Clone, PartialEq)]
pub struct Quarantined {
    pub record: DatasetRecord,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct IngestOutcome {
    pub records: Vec<DatasetRecord>,
    pub non_english: usize,
    /// (line number, reason) for lines that were not valid records.
    pub malformed: Vec<(usize, String)>,
    pub quarantined: Vec<Quarantined>,
}

impl IngestOutcome {
    /// SHA-256 over `id \t source \t target \n` of every retained record.
    pub fn checksum(&self) -> String {
        records_checksum(&self.records)
    }
}

pub fn records_checksum(records: &[DatasetRecord]) -> String {
    let mut hasher = Sha256::new();
    for r in records {
        hasher.update(r.id.as_bytes());
        hasher.update(b"\t");
        hasher.update(r.source.as_bytes());
        hasher.update(b"\t");
        hasher.update(r.target.as_str().as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

pub fn is_english(tag: &str) -> bool {
    let tag = tag.trim().to_ascii_lowercase();
    tag == "en" || tag == "english" || tag.starts_with("en-") || tag.starts_with("en_")
}

/// Loads a line-delimited corpus file, keeping English records only.
///
/// Lines that are not valid records are counted and skipped; records whose
/// target has unbalanced brackets or whose annotations do not match the
/// source are quarantined.
pub fn ingest(path: impl AsRef<Path>) -> Result<IngestOutcome, DatasetError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DatasetError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = IngestOutcome::default();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DatasetError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = match serde_json::from_str(&line) {
            Ok(p) => p,
            Err(e) => {
                tracing::warn!(line = line_no, "skipping malformed record: {e}");
                out.malformed.push((line_no, e.to_string()));
                continue;
            }
        };
        if !is_english(&parsed.language) {
            out.non_english += 1;
            continue;
        }
        let id = parsed.id.clone().unwrap_or_else(|| format!("line-{line_no}"));
        match record_from_line(id, parsed) {
            Ok(rec) => out.records.push(rec),
            Err(q) => {
                tracing::warn!(id = %q.record.id, "quarantined record: {}", q.reason);
                out.quarantined.push(q);
            }
        }
    }
    Ok(out)
}

fn record_from_line(id: String, line: RecordLine) -> Result<DatasetRecord, Quarantined> {
    let mut record = DatasetRecord {
        id,
        source: line.source_text,
        target: MaskedText::new(line.target_text),
        gold: None,
        language: line.language,
    };
    let seg = record.target.segments();
    if seg.warnings > 0 {
        return Err(Quarantined {
            reason: format!("target has {} unbalanced bracket(s)", seg.warnings),
            record,
        });
    }
    if let Some(mask) = line.privacy_mask {
        let chars = CharIndex::new(&record.source);
        let mut gold = Vec::with_capacity(mask.len());
        for m in &mask {
            let entity = Span::new(m.start, m.end)
                .ok()
                .and_then(|span| Entity::from_index(Label::from_name(&m.label), span, &chars).ok())
                .filter(|e| e.value == m.value);
            match entity {
                Some(e) => gold.push(e),
                None => {
                    let reason = format!("annotation [{}, {}) does not match the source", m.start, m.end);
                    return Err(Quarantined { record, reason });
                }
            }
        }
        crate::span::sort_entities(&mut gold);
        record.gold = Some(gold);
    }
    Ok(record)
}

/// Writes records in the corpus line format.
pub fn write_records(path: impl AsRef<Path>, records: &[DatasetRecord]) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let wrap = |source| DatasetError::Write {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(wrap)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(wrap)?);
    for r in records {
        writeln!(w, "{}", r.to_json_line()).map_err(wrap)?;
    }
    w.flush().map_err(wrap)
}

/// Dataset statistics and annotation-quality findings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditReport {
    pub samples: usize,
    pub total_masks: usize,
    pub avg_masks: f64,
    pub unique_tags: usize,
    /// Raw tags ranked by frequency (descending), ties alphabetical.
    pub tag_frequencies: Vec<(String, usize)>,
    pub leaks: LeakReport,
    pub quarantined: usize,
}

#[derive(Default)]
struct AuditPartial {
    samples: usize,
    total_masks: usize,
    tags: HashMap<String, usize>,
    leaks: LeakReport,
}

impl AuditPartial {
    fn merge(mut self, other: AuditPartial) -> AuditPartial {
        self.samples += other.samples;
        self.total_masks += other.total_masks;
        for (tag, n) in other.tags {
            *self.tags.entry(tag).or_default() += n;
        }
        self.leaks.merge(other.leaks);
        self
    }
}

/// Counts mask tags and scans every target for unmasked PII.
pub fn audit(records: &[DatasetRecord], detector: &dyn Detector) -> Result<AuditReport, DatasetError> {
    let partial = records
        .par_iter()
        .map(|r| -> Result<AuditPartial, DetectError> {
            let mut p = AuditPartial {
                samples: 1,
                ..Default::default()
            };
            for label in r.target.segments().masks() {
                p.total_masks += 1;
                *p.tags.entry(label.to_string()).or_default() += 1;
            }
            p.leaks.record(&r.id, &r.leaks(detector)?);
            Ok(p)
        })
        .try_reduce(AuditPartial::default, |a, b| Ok(a.merge(b)))?;

    let mut tag_frequencies: Vec<(String, usize)> = partial.tags.into_iter().collect();
    tag_frequencies.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut leaks = partial.leaks;
    leaks.offenders.sort();
    Ok(AuditReport {
        samples: partial.samples,
        total_masks: partial.total_masks,
        avg_masks: if partial.samples == 0 {
            0.0
        } else {
            partial.total_masks as f64 / partial.samples as f64
        },
        unique_tags: tag_frequencies.len(),
        tag_frequencies,
        leaks,
        quarantined: 0,
    })
}

/// Deterministic random subset of `n` records.
pub fn sample(records: &[DatasetRecord], n: usize, seed: u64) -> Vec<DatasetRecord> {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter().map(|i| records[i].clone()).collect()
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples             {}", self.samples)?;
        writeln!(f, "total mask tags     {}", self.total_masks)?;
        writeln!(f, "avg masks / sample  {:.2}", self.avg_masks)?;
        writeln!(f, "unique raw tags     {}", self.unique_tags)?;
        writeln!(f, "quarantined         {}", self.quarantined)?;
        writeln!(f, "leaks               {}", self.leaks.total)?;
        let mut by_count: Vec<_> = self.leaks.per_label.iter().collect();
        by_count.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
        for (label, n) in by_count {
            writeln!(f, "  {label:<22}{n}")?;
        }
        writeln!(f, "tag ranking")?;
        for (rank, (tag, n)) in self.tag_frequencies.iter().enumerate() {
            writeln!(f, "  {:>4}  {tag:<28}{n}", rank + 1)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VariantKind {
    Normalized,
    Replaced,
    Removed,
}

impl VariantKind {
    pub const ALL: [VariantKind; 3] = [VariantKind::Normalized, VariantKind::Replaced, VariantKind::Removed];

    pub fn as_str(&self) -> &'static str {
        match self {
            VariantKind::Normalized => "normalized",
            VariantKind::Replaced => "replaced",
            VariantKind::Removed => "removed",
        }
    }
}

impl std::str::FromStr for VariantKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normalized" => Ok(VariantKind::Normalized),
            "replaced" => Ok(VariantKind::Replaced),
            "removed" => Ok(VariantKind::Removed),
            other => Err(format!("unknown variant {other:?}")),
        }
    }
}

pub struct VariantSpec<'a> {
    pub kind: VariantKind,
    pub mapping: &'a MappingTable,
    pub suite: &'a RegexSuite,
    /// Number of canonical labels kept by the `removed` filter, most
    /// frequent first.
    pub taxonomy_size: usize,
}

impl<'a> VariantSpec<'a> {
    pub fn new(kind: VariantKind, mapping: &'a MappingTable, suite: &'a RegexSuite) -> Self {
        Self {
            kind,
            mapping,
            suite,
            taxonomy_size: CanonicalLabel::ALL.len(),
        }
    }
}

#[derive(Debug, Default)]
pub struct VariantOutput {
    pub records: Vec<DatasetRecord>,
    /// Records that could not be normalized (normalized / replaced).
    pub quarantine: Vec<Quarantined>,
    /// Records filtered out (removed).
    pub dropped: Vec<Quarantined>,
    /// Leak spans rewritten into mask tokens (replaced).
    pub leaks_replaced: usize,
}

/// Rewrites every mask label through the mapping table. Unmapped labels
/// are reported instead of passed through.
pub fn normalize_record(record: &DatasetRecord, mapping: &MappingTable) -> Result<DatasetRecord, Vec<String>> {
    let seg = record.target.segments();
    let mut unmapped = Vec::new();
    let mut out = String::with_capacity(record.target.as_str().len());
    for s in &seg.segments {
        match s {
            Segment::Literal(text) => out.push_str(text),
            Segment::Mask(raw) => match mapping.normalize_label(raw) {
                Ok(c) => {
                    out.push('[');
                    out.push_str(c.as_str());
                    out.push(']');
                }
                Err(u) => unmapped.push(u.raw),
            },
        }
    }
    let gold = match &record.gold {
        None => None,
        Some(g) => {
            let mut ents = Vec::with_capacity(g.len());
            for e in g {
                match mapping.normalize_label(e.label.as_str()) {
                    Ok(c) => ents.push(Entity {
                        label: Label::Canonical(c),
                        ..e.clone()
                    }),
                    Err(u) => unmapped.push(u.raw),
                }
            }
            Some(ents)
        }
    };
    if !unmapped.is_empty() {
        unmapped.sort();
        unmapped.dedup();
        return Err(unmapped);
    }
    Ok(DatasetRecord {
        target: MaskedText::new(out),
        gold,
        ..record.clone()
    })
}

const MAX_CORRECTION_PASSES: usize = 8;

/// Masks every leak in the target with its canonical token, repeating
/// until a rescan finds nothing. Returns the number of spans replaced.
pub fn correct_leaks(record: &mut DatasetRecord, detector: &dyn Detector) -> Result<usize, DetectError> {
    let mut replaced = 0;
    for _ in 0..MAX_CORRECTION_PASSES {
        let leaks = record.leaks(detector)?;
        if leaks.is_empty() {
            break;
        }
        let (masked, kept) = crate::detectors::mask_entities(record.target.as_str(), &leaks);
        replaced += kept.len();
        record.target = masked;
    }
    if replaced > 0 && record.gold.is_some() {
        record.gold = align_gold_spans(&record.source, &record.target).ok();
    }
    Ok(replaced)
}

/// Builds one dataset variant. Source texts are never modified.
pub fn build_variant(records: &[DatasetRecord], spec: &VariantSpec<'_>) -> Result<VariantOutput, DatasetError> {
    if spec.taxonomy_size == 0 {
        return Err(DatasetError::EmptyTaxonomy);
    }
    let normalized: Vec<Result<DatasetRecord, Quarantined>> = records
        .par_iter()
        .map(|r| {
            normalize_record(r, spec.mapping).map_err(|labels| Quarantined {
                record: r.clone(),
                reason: format!("unmapped labels: {}", labels.join(", ")),
            })
        })
        .collect();

    let mut out = VariantOutput::default();
    match spec.kind {
        VariantKind::Normalized => {
            for r in normalized {
                match r {
                    Ok(rec) => out.records.push(rec),
                    Err(q) => out.quarantine.push(q),
                }
            }
        }
        VariantKind::Replaced => {
            let corrected: Vec<Result<(DatasetRecord, usize), Quarantined>> = normalized
                .into_par_iter()
                .map(|r| {
                    r.and_then(|mut rec| match correct_leaks(&mut rec, spec.suite) {
                        Ok(n) => Ok((rec, n)),
                        Err(e) => Err(Quarantined {
                            reason: e.to_string(),
                            record: rec,
                        }),
                    })
                })
                .collect();
            for r in corrected {
                match r {
                    Ok((rec, n)) => {
                        out.leaks_replaced += n;
                        out.records.push(rec);
                    }
                    Err(q) => out.quarantine.push(q),
                }
            }
        }
        VariantKind::Removed => {
            let kept: Vec<DatasetRecord> = normalized
                .into_iter()
                .filter_map(|r| match r {
                    Ok(rec) => Some(rec),
                    Err(q) => {
                        out.dropped.push(q);
                        None
                    }
                })
                .collect();
            let allowed = top_labels(&kept, spec.taxonomy_size);
            for rec in kept {
                let outside: Vec<String> = rec
                    .target
                    .segments()
                    .masks()
                    .filter(|m| m.parse::<CanonicalLabel>().map_or(true, |c| !allowed.contains(&c)))
                    .map(str::to_string)
                    .collect();
                if outside.is_empty() {
                    out.records.push(rec);
                } else {
                    out.dropped.push(Quarantined {
                        reason: format!("labels outside the taxonomy: {}", outside.join(", ")),
                        record: rec,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// The `k` most frequent canonical labels across targets (ties go to the
/// label order of the taxonomy). Labels that never occur rank last.
pub fn top_labels(records: &[DatasetRecord], k: usize) -> Vec<CanonicalLabel> {
    let mut counts: BTreeMap<CanonicalLabel, usize> = CanonicalLabel::ALL.iter().map(|c| (*c, 0)).collect();
    for r in records {
        for m in r.target.segments().masks() {
            if let Ok(c) = m.parse::<CanonicalLabel>() {
                *counts.entry(c).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(CanonicalLabel, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(k).map(|(c, _)| c).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<DatasetRecord>,
    pub validation: Vec<DatasetRecord>,
    pub test: Vec<DatasetRecord>,
}

/// Seeded shuffle followed by contiguous slicing. Train and validation
/// sizes are rounded to the nearest integer; test takes the remainder.
pub fn split(records: &[DatasetRecord], ratios: [f64; 3], seed: u64) -> Result<Splits, DatasetError> {
    if records.len() < 3 {
        return Err(DatasetError::TooFewRecords(records.len()));
    }
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadRatios(ratios));
    }
    let n = records.len();
    let n_train = ((n as f64 * ratios[0]).round() as usize).min(n);
    let n_val = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);

    let mut shuffled = records.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled.split_off(n_train + n_val);
    let validation = shuffled.split_off(n_train);
    Ok(Splits {
        train: shuffled,
        validation,
        test,
    })
}

/// Writes a variant as `<out>/<variant>/{train,validation,test,quarantine}.jsonl`.
pub fn write_variant(
    out_dir: impl AsRef<Path>,
    kind: VariantKind,
    splits: &Splits,
    set_aside: &[Quarantined],
) -> Result<PathBuf, DatasetError> {
    let dir = out_dir.as_ref().join(kind.as_str());
    write_records(dir.join("train.jsonl"), &splits.train)?;
    write_records(dir.join("validation.jsonl"), &splits.validation)?;
    write_records(dir.join("test.jsonl"), &splits.test)?;
    let aside: Vec<DatasetRecord> = set_aside.iter().map(|q| q.record.clone()).collect();
    write_records(dir.join("quarantine.jsonl"), &aside)?;
    Ok(dir)
}

/// Characters of all sources; handy sanity figure for reports.
pub fn total_source_chars(records: &[DatasetRecord]) -> usize {
    records.iter().map(|r| char_len(&r.source)).sum()
}

/// Short human-readable summary of a variant build.
pub fn variant_summary(kind: VariantKind, out: &VariantOutput, splits: &Splits) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<11} kept {:>6}  train {:>6}  validation {:>5}  test {:>5}  quarantined {:>5}  dropped {:>5}  leaks replaced {:>5}",
        kind.as_str(),
        out.records.len(),
        splits.train.len(),
        splits.validation.len(),
        splits.test.len(),
        out.quarantine.len(),
        out.dropped.len(),
        out.leaks_replaced,
    );
    s
}
