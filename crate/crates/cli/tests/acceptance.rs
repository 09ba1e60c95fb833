//! End-to-end acceptance run: one PASS/FAIL/SKIP line per criterion.
//!
//! Set `PIIMASK_CORPUS` to an ai4privacy-format JSONL train file to run the
//! corpus-scale checks; `PIIMASK_CORPUS_TEST` optionally points at the
//! matching test split for the regex-baseline calibration.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::io::Write;
use std::net::SocketAddr;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::{Arc, Barrier, Mutex};
use std::time::{Duration, Instant};

use common::{expected, fixture, num};
use piimask::client::{
    bench_latency, format_prompt, parse_model_output, EndpointClient, MockEndpoint, ParseNote, ParseOptions,
    PromptTemplate,
};
use piimask::dataset::{
    audit, build_variant, ingest, normalize_record, records_checksum, sample, split, DatasetRecord, VariantKind,
    VariantSpec,
};
use piimask::detectors::{DetectError, FixedDetector};
use piimask::metrics::{entity_metrics, evaluate, lcs_len, load_predictions, rouge_l, EvalReport};
use piimask::{
    apply_detector_as_masker, find_leaks, CanonicalLabel, Detector, Entity, MappingTable, MatchMode, PredictionTriple,
    RegexSuite, Segment, Span,
};
use piimask_cli::backend::Backend;
use piimask_cli::chat::{
    run_bot, BotConfig, ChatEvent, FailurePolicy, GatewayAction, InMemoryGateway, ModerationPolicy,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Skip(String),
}

type Check = Result<Outcome, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Line {
    id: u8,
    advisory: bool,
    passed: bool,
}

fn criterion(id: u8, name: &str, advisory: bool, f: impl FnOnce() -> Check) -> Line {
    let started = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = started.elapsed().as_secs_f64();
    let tag = if advisory { " (advisory)" } else { "" };
    let (status, detail, passed) = match result {
        Ok(Outcome::Pass(d)) => ("PASS", d, true),
        Ok(Outcome::Skip(d)) => ("SKIP", d, !advisory),
        Err(d) => ("FAIL", d, false),
    };
    println!("[{status}] {id:>2} {name}{tag}: {detail} [{secs:.2}s]");
    Line { id, advisory, passed }
}

fn corpus_train() -> Option<PathBuf> {
    std::env::var_os("PIIMASK_CORPUS").map(PathBuf::from)
}

// ---------------------------------------------------------------------------
// 1. metric oracles

const ORACLE_LABELS: [CanonicalLabel; 3] = [CanonicalLabel::PersonName, CanonicalLabel::Email, CanonicalLabel::City];

fn random_entities(rng: &mut ChaCha8Rng, text: &[char]) -> Vec<Entity> {
    let k = rng.random_range(0..=10);
    (0..k)
        .map(|_| {
            let start = rng.random_range(0..text.len() - 1);
            let end = (start + rng.random_range(1..12)).min(text.len());
            Entity {
                label: ORACLE_LABELS[rng.random_range(0..3)].into(),
                span: Span::new(start, end).unwrap(),
                value: text[start..end].iter().collect(),
            }
        })
        .collect()
}

/// Largest one-to-one matching, by DP over subsets of golds.
fn oracle_matching(pred: &[Entity], gold: &[Entity], ok: &dyn Fn(&Entity, &Entity) -> bool) -> usize {
    let full = 1usize << gold.len();
    let mut best = vec![0usize; full];
    for p in pred {
        let prev = best.clone();
        for used in 0..full {
            for (j, g) in gold.iter().enumerate() {
                if used & (1 << j) == 0 && ok(p, g) {
                    let next = used | (1 << j);
                    best[next] = best[next].max(prev[used] + 1);
                }
            }
        }
    }
    best.into_iter().max().unwrap_or(0)
}

fn oracle_prf(tp: usize, npred: usize, ngold: usize) -> (f64, f64, f64) {
    let p = if npred == 0 { 1.0 } else { tp as f64 / npred as f64 };
    let r = if ngold == 0 { 1.0 } else { tp as f64 / ngold as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

fn enumerated_lcs(a: &[String], b: &[String]) -> usize {
    (0u32..1 << a.len())
        .filter(|mask| {
            let mut it = b.iter();
            (0..a.len()).filter(|i| mask & (1 << i) != 0).all(|i| it.any(|x| *x == a[i]))
        })
        .map(|mask| mask.count_ones() as usize)
        .max()
        .unwrap_or(0)
}

fn metric_oracles() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for doc in 0..200 {
        let text: Vec<char> = (0..80).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
        let gold = random_entities(&mut rng, &text);
        let pred = random_entities(&mut rng, &text);
        for mode in [MatchMode::Strict, MatchMode::Relaxed] {
            let span_ok = |p: &Entity, g: &Entity| match mode {
                MatchMode::Strict => p.span == g.span,
                MatchMode::Relaxed => piimask::spans_overlap(p.span, g.span),
            };
            let tp = oracle_matching(&pred, &gold, &|p, g| span_ok(p, g) && p.label == g.label);
            let sm = oracle_matching(&pred, &gold, &span_ok);
            let (outcome, m) = entity_metrics(&pred, &gold, mode, text.len());
            ensure!(outcome.tp == tp, "doc {doc} {mode:?}: tp {} vs oracle {tp}", outcome.tp);
            ensure!(outcome.mislabels == sm - tp, "doc {doc} {mode:?}: mislabels {} vs {}", outcome.mislabels, sm - tp);
            let (p, r, f) = oracle_prf(tp, pred.len(), gold.len());
            ensure!(
                (m.precision, m.recall, m.f1) == (p, r, f),
                "doc {doc} {mode:?}: P/R/F1 ({}, {}, {}) vs ({p}, {r}, {f})",
                m.precision,
                m.recall,
                m.f1
            );
            let type_acc = if sm == 0 { 1.0 } else { tp as f64 / sm as f64 };
            ensure!(m.type_accuracy == type_acc, "doc {doc} {mode:?}: type accuracy");
        }
    }
    for case in 0..200 {
        let seq = |rng: &mut ChaCha8Rng| -> Vec<String> {
            let n = rng.random_range(0..=8);
            (0..n).map(|_| ["a", "b", "c"][rng.random_range(0..3)].to_string()).collect()
        };
        let (a, b) = (seq(&mut rng), seq(&mut rng));
        let l = enumerated_lcs(&a, &b);
        ensure!(lcs_len(&a, &b) == l, "lcs case {case}: {} vs {l}", lcs_len(&a, &b));
        let r = rouge_l(&a, &b);
        let p = if a.is_empty() { 0.0 } else { l as f64 / a.len() as f64 };
        let rc = if b.is_empty() { 0.0 } else { l as f64 / b.len() as f64 };
        ensure!(r.precision == p && r.recall == rc, "rougeL case {case}");
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(Outcome::Pass("200 documents x 2 modes and 200 LCS cases agree with brute force".into()))
}

// ---------------------------------------------------------------------------
// 2 and 10. evaluation fixture

fn fixture_report() -> Result<EvalReport, String> {
    let triples = load_predictions(fixture("predictions_20.jsonl")).map_err(|e| e.to_string())?;
    evaluate(&triples).map_err(|e| e.to_string())
}

fn evaluation_fixture() -> Check {
    let exp = expected("predictions_20.expected");
    let report = fixture_report()?;
    let fields = report.fields();
    ensure!(fields.len() == exp.len(), "{} fields vs {} expected", fields.len(), exp.len());
    for (key, got) in &fields {
        let want = num(&exp, key);
        ensure!((got - want).abs() <= 1e-9, "{key}: {got} vs {want}");
    }
    Ok(Outcome::Pass(format!("{} fields within 1e-9", fields.len())))
}

fn table_columns() -> Check {
    let report = fixture_report()?;
    let keys: Vec<String> = report.fields().into_iter().map(|(k, _)| k).collect();
    let mut required = vec!["rouge1_f1", "rouge2_f1", "rougeL_f1", "bleu", "spriv", "length_ratio"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    for mode in ["strict", "relaxed"] {
        for col in ["precision", "recall", "accuracy", "mislabels"] {
            required.push(format!("{mode}_{col}"));
        }
    }
    for k in &required {
        ensure!(keys.contains(k), "missing column {k}");
    }
    let parsed = EvalReport::parse_key_values(&report.to_key_values())?;
    ensure!(parsed == report.fields(), "key/value export does not round-trip");

    // A fresh file in the documented format.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("preds.jsonl");
    let line = serde_json::json!({
        "id": "a",
        "source_text": "Call Ann at ann@x.io",
        "gold_text": "Call [PERSON_NAME] at [EMAIL]",
        "predicted_text": "Call Ann at [EMAIL]",
    });
    std::fs::write(&path, format!("{line}\n")).map_err(|e| e.to_string())?;
    let r = evaluate(&load_predictions(&path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure!(r.strict.precision == 1.0 && r.strict.recall == 0.5, "fresh file scored {:?}", r.strict);
    evaluation_fixture()?;
    Ok(Outcome::Pass(format!("{} columns present, values match the hand-scored fixture", required.len())))
}

// ---------------------------------------------------------------------------
// 3. identities

fn identities() -> Check {
    let ing = ingest(fixture("corpus_1000.jsonl")).map_err(|e| e.to_string())?;
    let triples: Vec<PredictionTriple> = ing
        .records
        .iter()
        .map(|r| PredictionTriple {
            id: r.id.clone(),
            source: r.source.clone(),
            gold: r.target.clone(),
            predicted: r.target.clone(),
        })
        .collect();
    let r = evaluate(&triples).map_err(|e| e.to_string())?;
    ensure!(r.quarantined == 0, "{} quarantined", r.quarantined);
    let ones = [
        ("char_precision", r.char_level.precision),
        ("char_recall", r.char_level.recall),
        ("char_f1", r.char_level.f1),
        ("exact_match", r.char_level.exact),
        ("avg_iou", r.avg_iou),
        ("strict_precision", r.strict.precision),
        ("strict_recall", r.strict.recall),
        ("strict_f1", r.strict.f1),
        ("relaxed_precision", r.relaxed.precision),
        ("relaxed_recall", r.relaxed.recall),
        ("relaxed_f1", r.relaxed.f1),
        ("rouge1", r.rouge1.f1),
        ("rouge2", r.rouge2.f1),
        ("rougeL", r.rouge_l.f1),
        ("bleu", r.bleu),
        ("length_ratio", r.length_ratio),
    ];
    for (k, v) in ones {
        ensure!(v == 1.0, "{k} = {v}");
    }
    ensure!(r.spriv == 0.0, "spriv = {}", r.spriv);
    Ok(Outcome::Pass(format!("{} identity triples score exactly", r.triples)))
}

// ---------------------------------------------------------------------------
// 4. audit

fn audit_fixture() -> Result<String, String> {
    let exp = expected("corpus_1000.expected");
    let ing = ingest(fixture("corpus_1000.jsonl")).map_err(|e| e.to_string())?;
    ensure!(ing.records.len() as f64 == num(&exp, "records"), "records {}", ing.records.len());
    ensure!(ing.non_english as f64 == num(&exp, "non_english"), "non-English {}", ing.non_english);
    ensure!(ing.malformed.len() as f64 == num(&exp, "malformed"), "malformed {}", ing.malformed.len());
    ensure!(ing.quarantined.len() as f64 == num(&exp, "quarantined"), "quarantined {}", ing.quarantined.len());
    ensure!(records_checksum(&ing.records) == exp["checksum"], "checksum differs");
    let rep = audit(&ing.records, &RegexSuite::default()).map_err(|e| e.to_string())?;
    ensure!(rep.total_masks as f64 == num(&exp, "total_masks"), "total masks {}", rep.total_masks);
    ensure!(rep.avg_masks == num(&exp, "avg_masks"), "average {}", rep.avg_masks);
    ensure!(rep.unique_tags as f64 == num(&exp, "unique_tags"), "unique tags {}", rep.unique_tags);
    ensure!(rep.leaks.total as f64 == num(&exp, "leaks_total"), "leaks {}", rep.leaks.total);
    for (label, n) in &rep.leaks.per_label {
        let key = format!("leaks.{label}");
        ensure!(exp.contains_key(&key) && *n as f64 == num(&exp, &key), "{key} = {n}");
    }
    for (i, (tag, n)) in rep.tag_frequencies.iter().take(5).enumerate() {
        let key = format!("tag_rank.{}", i + 1);
        ensure!(format!("{tag}:{n}") == exp[&key], "{key} = {tag}:{n}");
    }
    Ok(format!(
        "fixture: {} masks, avg {:.3}, {} tags, {} leaks",
        rep.total_masks, rep.avg_masks, rep.unique_tags, rep.leaks.total
    ))
}

fn within(got: f64, target: f64, tol: f64) -> bool {
    (got - target).abs() <= tol
}

fn audit_reproduction() -> Check {
    let fixture_detail = audit_fixture()?;
    let Some(path) = corpus_train() else {
        return Ok(Outcome::Pass(format!("corpus unavailable; {fixture_detail}")));
    };
    let started = Instant::now();
    let ing = ingest(&path).map_err(|e| e.to_string())?;
    let rep = audit(&ing.records, &RegexSuite::default()).map_err(|e| e.to_string())?;
    let email = rep.leaks.per_label.get("EMAIL").copied().unwrap_or(0);
    let largest = rep.leaks.per_label.values().copied().max().unwrap_or(0);
    ensure!(within(rep.total_masks as f64, 385_284.0, 3_852.84), "total masks {}", rep.total_masks);
    ensure!(within(rep.avg_masks, 12.88, 0.1), "average {:.3}", rep.avg_masks);
    ensure!(within(rep.unique_tags as f64, 225.0, 5.0), "unique tags {}", rep.unique_tags);
    ensure!(within(rep.leaks.total as f64, 1_150.0, 115.0), "leaks {}", rep.leaks.total);
    ensure!(email == largest && email > 0, "EMAIL {email} is not the largest leak category");
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 300.0, "took {secs:.0}s");
    Ok(Outcome::Pass(format!(
        "corpus: {} masks, avg {:.2}, {} tags, {} leaks (EMAIL {email}); {fixture_detail}",
        rep.total_masks, rep.avg_masks, rep.unique_tags, rep.leaks.total
    )))
}

// ---------------------------------------------------------------------------
// 5. regex baseline calibration

fn regex_baseline() -> Check {
    let Some(train) = corpus_train() else {
        return Ok(Outcome::Skip("corpus unavailable (set PIIMASK_CORPUS)".into()));
    };
    let mapping = MappingTable::default();
    let suite = RegexSuite::default();
    let test_records = match std::env::var_os("PIIMASK_CORPUS_TEST") {
        Some(p) => ingest(PathBuf::from(p)).map_err(|e| e.to_string())?.records,
        None => {
            let ing = ingest(&train).map_err(|e| e.to_string())?;
            let normalized = build_variant(&ing.records, &VariantSpec::new(VariantKind::Normalized, &mapping, &suite))
                .map_err(|e| e.to_string())?;
            let total = 29_718.0 + 3_943.0 + 3_943.0;
            split(&normalized.records, [29_718.0 / total, 3_943.0 / total, 3_943.0 / total], 42)
                .map_err(|e| e.to_string())?
                .test
        }
    };
    let normalized = build_variant(&test_records, &VariantSpec::new(VariantKind::Normalized, &mapping, &suite))
        .map_err(|e| e.to_string())?;
    let triples = normalized
        .records
        .iter()
        .map(|r| {
            let predicted = apply_detector_as_masker(&r.source, &suite).map_err(|e| e.to_string())?.masked;
            Ok(PredictionTriple {
                id: r.id.clone(),
                source: r.source.clone(),
                gold: r.target.clone(),
                predicted,
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    let r = evaluate(&triples).map_err(|e| e.to_string())?;
    let detail = format!("char F1 {:.4} (target 0.1911), entity F1 {:.4} (target 0.1511)", r.char_level.f1, r.strict.f1);
    ensure!(within(r.char_level.f1, 0.1911, 0.05) && within(r.strict.f1, 0.1511, 0.05), "{detail}");
    Ok(Outcome::Pass(detail))
}

// ---------------------------------------------------------------------------
// 6. variant fixed points

fn check_variants(records: &[DatasetRecord], what: &str) -> Result<String, String> {
    let mapping = MappingTable::default();
    let suite = RegexSuite::default();
    let build = |kind| build_variant(records, &VariantSpec::new(kind, &mapping, &suite)).map_err(|e| e.to_string());
    let replaced = build(VariantKind::Replaced)?;
    for r in &replaced.records {
        let leaks = find_leaks(&r.target, &suite).map_err(|e| e.to_string())?;
        ensure!(leaks.is_empty(), "{what}: {} leaks remain in replaced record {}", leaks.len(), r.id);
    }
    let removed = build(VariantKind::Removed)?;
    let mut labels = std::collections::BTreeSet::new();
    for r in &removed.records {
        for m in r.target.segments().masks() {
            ensure!(m.parse::<CanonicalLabel>().is_ok(), "{what}: removed record {} keeps {m}", r.id);
            labels.insert(m.to_string());
        }
    }
    ensure!(labels.len() <= CanonicalLabel::ALL.len(), "{what}: {} labels", labels.len());
    let normalized = build(VariantKind::Normalized)?;
    for r in &normalized.records {
        let again = normalize_record(r, &mapping).map_err(|u| format!("{what}: renormalizing {} failed: {u:?}", r.id))?;
        ensure!(&again == r, "{what}: normalization of {} is not idempotent", r.id);
    }
    Ok(format!(
        "{what}: {} leaks replaced, removed keeps {} records over {} labels, {} normalized records stable",
        replaced.leaks_replaced,
        removed.records.len(),
        labels.len(),
        normalized.records.len()
    ))
}

fn variant_fixed_points() -> Check {
    let ing = ingest(fixture("corpus_1000.jsonl")).map_err(|e| e.to_string())?;
    let mut detail = check_variants(&ing.records, "fixture")?;
    if let Some(path) = corpus_train() {
        let all = ingest(&path).map_err(|e| e.to_string())?;
        detail = format!("{detail}; {}", check_variants(&sample(&all.records, 2_000, 7), "corpus sample")?);
    }
    Ok(Outcome::Pass(detail))
}

// ---------------------------------------------------------------------------
// 7. masking round trip

fn random_string(rng: &mut ChaCha8Rng, alphabet: &[char], len: std::ops::RangeInclusive<usize>) -> String {
    let n = rng.random_range(len);
    (0..n).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
}

fn residual_case(text: &str, detector: &dyn Detector) -> Result<(), String> {
    let out = apply_detector_as_masker(text, detector).map_err(|e| e.to_string())?;
    let from_output: String = out
        .masked
        .segments()
        .segments
        .iter()
        .filter_map(|s| match s {
            Segment::Literal(l) => Some(l.as_str()),
            Segment::Mask(_) => None,
        })
        .collect();
    let chars: Vec<char> = text.chars().collect();
    let mut from_input = String::new();
    let mut pos = 0;
    for e in &out.entities {
        if e.span.start() < pos {
            return Err(format!("overlapping entities in {text:?}"));
        }
        from_input.extend(&chars[pos..e.span.start()]);
        pos = e.span.end();
    }
    from_input.extend(&chars[pos..]);
    if from_output != from_input {
        return Err(format!("residuals differ for {text:?}"));
    }
    Ok(())
}

fn masking_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let lit: Vec<char> = "abcdefghij ,.!é".chars().collect();
    let val: Vec<char> = "ABCXYZ0123ö@.".chars().collect();
    let regex = RegexSuite::default();
    for case in 0..500 {
        if case % 2 == 0 {
            let mut text = String::new();
            let mut items = Vec::new();
            for _ in 0..rng.random_range(0..6) {
                text.push_str(&random_string(&mut rng, &lit, 1..=8));
                let v = random_string(&mut rng, &val, 1..=10);
                text.push_str(&v);
                items.push((ORACLE_LABELS[rng.random_range(0..3)], v));
            }
            text.push_str(&random_string(&mut rng, &lit, 0..=8));
            residual_case(&text, &FixedDetector { items })?;
        } else {
            let pieces = [
                format!("{}@example.com", random_string(&mut rng, &lit[..10], 1..=6)),
                format!("+1 555 {:03} {:04}", rng.random_range(0..1000), rng.random_range(0..10000)),
                format!("10.{}.{}.{}", rng.random_range(0..256), rng.random_range(0..256), rng.random_range(0..256)),
                "https://example.org/a?b=1".to_string(),
                random_string(&mut rng, &lit, 1..=10),
            ];
            let text: Vec<&str> = (0..rng.random_range(1..6)).map(|_| pieces[rng.random_range(0..pieces.len())].as_str()).collect();
            residual_case(&text.join(" "), &regex)?;
        }
    }
    Ok(Outcome::Pass("500 cases (250 fixed-value, 250 regex) leave identical residuals".into()))
}

// ---------------------------------------------------------------------------
// 8. prompts and parsing

fn prompt_conformance() -> Check {
    let x = "My name is Jane.";
    let y = "My name is [PERSON_NAME].";
    let p = "Mask the PII.";
    let seq = PromptTemplate::seq2seq();
    let causal = PromptTemplate::causal(p);
    ensure!(format_prompt(&seq, x).map_err(|e| e.to_string())? == "mask pii: My name is Jane.", "seq2seq template");
    let prompt = format_prompt(&causal, x).map_err(|e| e.to_string())?;
    ensure!(prompt == "<s>Mask the PII. Input: My name is Jane. Output:", "causal prompt {prompt:?}");
    ensure!(
        format!("{prompt} {y}{}", causal.stop) == format!("<s>{p} Input: {x} Output: {y}</s>"),
        "causal training instance"
    );

    let mapping = MappingTable::default();
    let opts = ParseOptions::new(&mapping);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let alphabet: Vec<char> = "abcdefgh XYZ.,!?:".chars().collect();
    for _ in 0..200 {
        let source = random_string(&mut rng, &alphabet, 20..=40);
        let planted = format!("{} [EMAIL]{}", random_string(&mut rng, &alphabet, 0..=15), random_string(&mut rng, &alphabet, 0..=5));
        let echoed = format!("{} {planted}</s>trailing", format_prompt(&causal, &source).map_err(|e| e.to_string())?);
        let got = parse_model_output(&echoed, &causal, &source, &opts);
        ensure!(got.masked.as_str() == planted, "echo recovery: {:?} vs {planted:?}", got.masked.as_str());
        let got = parse_model_output(&format!("{planted}</s>"), &seq, &source, &opts);
        ensure!(got.masked.as_str() == planted, "seq2seq recovery: {:?}", got.masked.as_str());
    }

    let source = "a".repeat(50);
    let runaway = "abcdefghij".repeat(100);
    let got = parse_model_output(&runaway, &seq, &source, &opts);
    ensure!(got.masked.as_str().chars().count() == 100, "runaway kept {} chars", got.masked.as_str().chars().count());
    ensure!(
        got.notes.iter().any(|n| matches!(n, ParseNote::RunawayTruncated { cap: 100, .. })),
        "no truncation note"
    );
    ensure!(got.verdict.truncated, "verdict not marked truncated");
    Ok(Outcome::Pass("templates byte-exact, 400 planted completions recovered, runaway cut at 100 chars".into()))
}

// ---------------------------------------------------------------------------
// 9. latency

fn latency_harness() -> Check {
    let mock = MockEndpoint::canned("done").delay(Duration::from_millis(50)).start().map_err(|e| e.to_string())?;
    let client = EndpointClient::new(mock.config()).map_err(|e| e.to_string())?;
    let docs: Vec<String> = (0..20).map(|i| format!("document number {i}")).collect();
    let stats = bench_latency(&client, &PromptTemplate::seq2seq(), &docs).map_err(|e| e.to_string())?;
    ensure!(stats.count == 20 && stats.failures == 0, "{} samples, {} failures", stats.count, stats.failures);
    ensure!((0.050..=0.080).contains(&stats.mean), "mean {:.4}s", stats.mean);
    ensure!(stats.p50 <= stats.p95 && stats.p95 <= stats.max, "quantiles out of order");
    Ok(Outcome::Pass(format!(
        "mean {:.4}s, p50 {:.4}s, p95 {:.4}s, max {:.4}s",
        stats.mean, stats.p50, stats.p95, stats.max
    )))
}

// ---------------------------------------------------------------------------
// 11. service and chat connector

#[derive(Clone, Default)]
struct LogBuffer(Arc<Mutex<Vec<u8>>>);

impl Write for LogBuffer {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

impl LogBuffer {
    fn contents(&self) -> String {
        String::from_utf8_lossy(&self.0.lock().unwrap()).into_owned()
    }
}

const PLANTED: [&str; 4] = ["jane.doe@example.com", "+1 555 123 4567", "4111 1111 1111 1111", "Jane Doe"];

fn start_service() -> Result<(SocketAddr, std::sync::mpsc::Sender<()>, std::thread::JoinHandle<()>), String> {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    listener.set_nonblocking(true).map_err(|e| e.to_string())?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    let (stop_tx, stop_rx) = std::sync::mpsc::channel::<()>();
    let handle = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).unwrap();
            let backend = Arc::new(Backend::Regex(RegexSuite::default()));
            let shutdown = async move {
                let _ = tokio::task::spawn_blocking(move || stop_rx.recv()).await;
            };
            piimask_cli::service::serve_on(listener, backend, shutdown).await.unwrap();
        });
    });
    Ok((addr, stop_tx, handle))
}

fn service_smoke(logs: &LogBuffer) -> Result<String, String> {
    let (addr, stop, handle) = start_service()?;
    let base = format!("http://{addr}");
    let http = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(10))
        .build()
        .map_err(|e| e.to_string())?;
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        match http.get(format!("{base}/health")).send() {
            Ok(r) if r.status().is_success() => break,
            _ if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(20)),
            _ => return Err("service never became healthy".into()),
        }
    }

    let text = format!(
        "Hi, I am {} and you can reach me at {} or {}; card {}.",
        PLANTED[3], PLANTED[0], PLANTED[1], PLANTED[2]
    );
    let barrier = Arc::new(Barrier::new(10));
    let outputs: Vec<Result<serde_json::Value, String>> = std::thread::scope(|scope| {
        let workers: Vec<_> = (0..10)
            .map(|_| {
                let (http, base, text, barrier) = (http.clone(), base.clone(), text.clone(), barrier.clone());
                scope.spawn(move || {
                    barrier.wait();
                    let resp = http
                        .post(format!("{base}/mask"))
                        .json(&serde_json::json!({ "text": text }))
                        .send()
                        .map_err(|e| e.to_string())?;
                    if !resp.status().is_success() {
                        return Err(format!("status {}", resp.status()));
                    }
                    let mut v: serde_json::Value = resp.json().map_err(|e| e.to_string())?;
                    v.as_object_mut().map(|o| o.remove("latency_seconds"));
                    Ok(v)
                })
            })
            .collect();
        workers.into_iter().map(|w| w.join().unwrap()).collect()
    });
    let _ = stop.send(());
    let _ = handle.join();

    let outputs = outputs.into_iter().collect::<Result<Vec<_>, String>>()?;
    ensure!(outputs.windows(2).all(|w| w[0] == w[1]), "responses differ across concurrent requests");
    let masked = outputs[0]["masked_text"].as_str().unwrap_or_default().to_string();
    for pii in &PLANTED[..3] {
        ensure!(!masked.contains(pii), "{pii:?} survived masking: {masked}");
    }
    let log = logs.contents();
    ensure!(log.contains("entities"), "no request was logged");
    for pii in PLANTED {
        ensure!(!log.contains(pii), "logs contain {pii:?}");
    }
    Ok(format!("10 concurrent identical responses ({masked:?})"))
}

struct Down;

impl Detector for Down {
    fn detect(&self, _: &str) -> Result<Vec<Entity>, DetectError> {
        Err(DetectError::Backend("connection refused".into()))
    }
}

fn event(channel: &str, id: &str, text: &str) -> ChatEvent {
    ChatEvent {
        channel_id: channel.into(),
        author_id: "u1".into(),
        message_id: id.into(),
        text: text.into(),
        timestamp: 0,
    }
}

fn chat_connector(logs: &LogBuffer) -> Result<String, String> {
    let config = BotConfig {
        initial_backoff: Duration::from_millis(1),
        max_backoff: Duration::from_millis(4),
        poll_interval: Duration::from_millis(1),
        ..BotConfig::default()
    };
    let regex = Backend::Regex(RegexSuite::default());
    let repost = |channel: &str, id: &str, text: &str| GatewayAction::Repost {
        channel_id: channel.into(),
        author_id: "u1".into(),
        reply_to: id.into(),
        text: text.into(),
    };

    let mut gw = InMemoryGateway::new(vec![vec![
        event("c1", "m1", "my email is jane.doe@example.com"),
        event("c1", "m2", "hello"),
    ]]);
    gw.push_disconnect("socket closed");
    gw.script.push_back(Ok(vec![event("c2", "m3", "call me on +1 555 123 4567")]));
    let stats = run_bot(&mut gw, &regex, &config).map_err(|e| e.to_string())?;
    let want = vec![
        repost("c1", "m1", "my email is [EMAIL]"),
        repost("c2", "m3", "call me on [PHONE_NUMBER]"),
    ];
    ensure!(gw.actions == want, "repost policy produced {:?}", gw.actions);
    ensure!(gw.reconnects == 1 && stats.processed == 3 && stats.skipped == 1, "stats {stats:?}");

    let mut gw = InMemoryGateway::new(vec![vec![event("c1", "m4", "mail jane.doe@example.com")]]);
    let flag_config = BotConfig {
        policy: ModerationPolicy::RepostFlag,
        ..config.clone()
    };
    run_bot(&mut gw, &regex, &flag_config).map_err(|e| e.to_string())?;
    ensure!(
        gw.actions.len() == 2 && gw.actions[0] == repost("c1", "m4", "mail [EMAIL]") && matches!(gw.actions[1], GatewayAction::Flag { .. }),
        "repost-flag policy produced {:?}",
        gw.actions
    );

    let mut gw = InMemoryGateway::new(vec![vec![event("c1", "m5", "my email is jane.doe@example.com")]]);
    let block = BotConfig {
        on_backend_failure: FailurePolicy::Block,
        ..config.clone()
    };
    let stats = run_bot(&mut gw, &Down, &block).map_err(|e| e.to_string())?;
    ensure!(
        gw.actions
            == vec![GatewayAction::Flag {
                channel_id: "c1".into(),
                message_id: "m5".into(),
                reason: "masking backend unavailable; message not checked".into(),
            }],
        "block policy produced {:?}",
        gw.actions
    );
    ensure!(stats.backend_failures == 1, "stats {stats:?}");

    let mut gw = InMemoryGateway::new(vec![vec![event("c1", "m6", "my email is jane.doe@example.com")]]);
    run_bot(&mut gw, &Down, &config).map_err(|e| e.to_string())?;
    ensure!(gw.actions.is_empty(), "skip policy produced {:?}", gw.actions);

    let log = logs.contents();
    for pii in PLANTED {
        ensure!(!log.contains(pii), "logs contain {pii:?}");
    }
    Ok("scripted stream gives repost, no-op, flag and skip as configured".into())
}

fn service_integration(logs: &LogBuffer) -> Check {
    let service = service_smoke(logs)?;
    let chat = chat_connector(logs)?;
    Ok(Outcome::Pass(format!("{service}; {chat}; no planted PII in logs")))
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance() {
    let logs = LogBuffer::default();
    let writer = logs.clone();
    let subscriber = tracing_subscriber::fmt()
        .with_writer(move || writer.clone())
        .with_ansi(false)
        .with_max_level(tracing::Level::DEBUG)
        .finish();
    tracing::subscriber::set_global_default(subscriber).expect("global subscriber");

    let lines = vec![
        criterion(1, "metric-oracle equivalence", false, metric_oracles),
        criterion(2, "hand-scored prediction fixture", false, evaluation_fixture),
        criterion(3, "degenerate identities", false, identities),
        criterion(4, "dataset audit reproduction", false, audit_reproduction),
        criterion(5, "regex-baseline calibration", true, regex_baseline),
        criterion(6, "variant fixed points", false, variant_fixed_points),
        criterion(7, "masking round trip", false, masking_round_trip),
        criterion(8, "prompt and parse conformance", false, prompt_conformance),
        criterion(9, "latency harness", false, latency_harness),
        criterion(10, "model-quality table columns", false, table_columns),
        criterion(11, "service integration", false, || service_integration(&logs)),
    ];
    let failed: Vec<u8> = lines.iter().filter(|l| !l.advisory && !l.passed).map(|l| l.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
