//! The canonical 24-label PII taxonomy and raw-label normalization.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

macro_rules! canonical_labels {
    ($($variant:ident => $name:literal),+ $(,)?) => {
        /// One of the 24 supported PII labels.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(into = "String", try_from = "String")]
        pub enum CanonicalLabel {
            $($variant),+
        }

        impl CanonicalLabel {
            pub const ALL: &'static [CanonicalLabel] = &[$(CanonicalLabel::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self {
                    $(CanonicalLabel::$variant => $name),+
                }
            }
        }

        impl FromStr for CanonicalLabel {
            type Err = UnknownLabel;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($name => Ok(CanonicalLabel::$variant),)+
                    other => Err(UnknownLabel(other.to_string())),
                }
            }
        }
    };
}

canonical_labels! {
    Url => "URL",
    Username => "USERNAME",
    Email => "EMAIL",
    IpAddress => "IP_ADDRESS",
    Password => "PASSWORD",
    PersonName => "PERSON_NAME",
    Gender => "GENDER",
    DateOfBirth => "DATE_OF_BIRTH",
    Title => "TITLE",
    Country => "COUNTRY",
    State => "STATE",
    City => "CITY",
    StreetName => "STREET_NAME",
    BuildingNumber => "BUILDING_NUMBER",
    PostalCode => "POSTAL_CODE",
    SecondaryAddress => "SECONDARY_ADDRESS",
    GeoCoordinates => "GEO_COORDINATES",
    Date => "DATE",
    Time => "TIME",
    PhoneNumber => "PHONE_NUMBER",
    Organization => "ORGANIZATION",
    IdentificationNumber => "IDENTIFICATION_NUMBER",
    FinancialAmount => "FINANCIAL_AMOUNT",
    Signature => "SIGNATURE",
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown canonical label {0:?}")]
pub struct UnknownLabel(pub String);

impl fmt::Display for CanonicalLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<CanonicalLabel> for String {
    fn from(l: CanonicalLabel) -> String {
        l.as_str().to_string()
    }
}

impl TryFrom<String> for CanonicalLabel {
    type Error = UnknownLabel;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Renders the mask token for a label, e.g. `[PERSON_NAME]`.
pub fn mask_token(label: CanonicalLabel) -> String {
    format!("[{}]", label.as_str())
}

/// A raw label that has no canonical counterpart.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("label {raw:?} has no canonical mapping")]
pub struct Unmapped {
    pub raw: String,
    /// The table lists the label as known but unsupported.
    pub droppable: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum MappingError {
    #[error("failed to read mapping file: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected `RAW_LABEL = CANONICAL_LABEL`")]
    Syntax { line: usize },
    #[error("line {line}")]
    UnknownTarget { line: usize, source: UnknownLabel },
    #[error("line {line}: {raw:?} maps to both {first} and {second}")]
    Conflict {
        line: usize,
        raw: String,
        first: String,
        second: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Canonical(CanonicalLabel),
    Drop,
}

impl Target {
    fn describe(&self) -> String {
        match self {
            Target::Canonical(c) => c.as_str().to_string(),
            Target::Drop => "-".to_string(),
        }
    }
}

/// Raw label to canonical label mapping.
///
/// Keys are stored upper-cased with underscores removed so that spelling
/// variants such as `FIRST_NAME` and `FIRSTNAME` collapse onto one entry.
#[derive(Debug, Clone)]
pub struct MappingTable {
    entries: HashMap<String, Target>,
}

const DEFAULT_MAPPING: &str = include_str!("../data/default_mapping.map");

impl Default for MappingTable {
    fn default() -> Self {
        Self::parse(DEFAULT_MAPPING).expect("bundled mapping table is valid")
    }
}

impl MappingTable {
    /// A table containing only the canonical fixed points.
    pub fn canonical_only() -> Self {
        let entries = CanonicalLabel::ALL
            .iter()
            .map(|c| (squash(c.as_str()), Target::Canonical(*c)))
            .collect();
        Self { entries }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, MappingError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Parses `RAW = CANONICAL` lines; `#` starts a comment and a target of
    /// `-` marks the raw label as droppable.
    pub fn parse(text: &str) -> Result<Self, MappingError> {
        let mut table = Self::canonical_only();
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (raw, target) = line.split_once('=').ok_or(MappingError::Syntax { line: line_no })?;
            let (raw, target) = (raw.trim(), target.trim());
            if raw.is_empty() || target.is_empty() {
                return Err(MappingError::Syntax { line: line_no });
            }
            let target = if target == "-" {
                Target::Drop
            } else {
                Target::Canonical(
                    target
                        .to_ascii_uppercase()
                        .parse()
                        .map_err(|source| MappingError::UnknownTarget { line: line_no, source })?,
                )
            };
            let key = squash(raw);
            match table.entries.get(&key) {
                Some(existing) if *existing != target => {
                    return Err(MappingError::Conflict {
                        line: line_no,
                        raw: raw.to_string(),
                        first: existing.describe(),
                        second: target.describe(),
                    });
                }
                _ => {
                    table.entries.insert(key, target);
                }
            }
        }
        Ok(table)
    }

    /// Maps a bracket-stripped raw label onto the canonical set.
    ///
    /// Matching is case-insensitive and ignores underscores. When the label
    /// itself is not listed, trailing `_<digits>` and `_<letter>` suffixes
    /// are stripped one at a time and the lookup retried.
    pub fn normalize_label(&self, raw: &str) -> Result<CanonicalLabel, Unmapped> {
        let mut candidate = raw.trim().trim_matches(['[', ']']).to_ascii_uppercase();
        loop {
            match self.entries.get(&squash(&candidate)) {
                Some(Target::Canonical(c)) => return Ok(*c),
                Some(Target::Drop) => {
                    return Err(Unmapped {
                        raw: raw.to_string(),
                        droppable: true,
                    })
                }
                None => {}
            }
            match strip_suffix(&candidate) {
                Some(shorter) => candidate = shorter.to_string(),
                None => {
                    return Err(Unmapped {
                        raw: raw.to_string(),
                        droppable: false,
                    })
                }
            }
        }
    }

    pub fn is_supported(&self, raw: &str) -> bool {
        self.normalize_label(raw).is_ok()
    }

    /// The set of canonical labels reachable through the table.
    pub fn image(&self) -> BTreeSet<CanonicalLabel> {
        self.entries
            .values()
            .filter_map(|t| match t {
                Target::Canonical(c) => Some(*c),
                Target::Drop => None,
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn squash(label: &str) -> String {
    label
        .chars()
        .filter(|c| *c != '_' && *c != '-' && !c.is_whitespace())
        .map(|c| c.to_ascii_uppercase())
        .collect()
}

/// Strips one trailing `_<digits>` or `_<single letter>` suffix.
fn strip_suffix(label: &str) -> Option<&str> {
    let (head, tail) = label.rsplit_once('_')?;
    if head.is_empty() {
        return None;
    }
    let numeric = !tail.is_empty() && tail.bytes().all(|b| b.is_ascii_digit());
    let letter = tail.len() == 1 && tail.bytes().all(|b| b.is_ascii_alphabetic());
    (numeric || letter).then_some(head)
}
