//! PII masking toolkit.
//!
//! Span algebra over masked text, the canonical label taxonomy, regex
//! detection, dataset curation, evaluation metrics and an inference
//! endpoint client.

pub mod client;
pub mod dataset;
pub mod detectors;
pub mod masked;
pub mod metrics;
pub mod span;
pub mod taxonomy;

pub use client::{format_prompt, parse_model_output, EndpointClient, EndpointConfig, EndpointDetector, PromptTemplate};
pub use detectors::{apply_detector_as_masker, detect_regex, find_leaks, Detector, RegexSuite};
pub use masked::{align_gold_spans, extract_mask_spans, MaskSegmentation, MaskedText, Segment};
pub use metrics::{evaluate, EvalReport, MatchMode, PredictionTriple};
pub use span::{span_iou, spans_overlap, Entity, Label, Span};
pub use taxonomy::{mask_token, CanonicalLabel, MappingTable};
