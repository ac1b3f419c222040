//! Notes and gold annotations: loading, schema validation, residual PHI
//! scrubbing and per-cell statistics.
//!
//! Both input files are newline-delimited JSON, one record per line. Blank
//! lines are skipped; everything else must parse.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate note_id {note_id:?}")]
    DuplicateNoteId {
        path: PathBuf,
        line: usize,
        note_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("unknown subtype {0:?}")]
    UnknownSubtype(String),
    #[error("subtype {subtype} is not valid for category {category}")]
    Pairing {
        category: Category,
        subtype: Subtype,
    },
    #[error("category {0} requires a subtype")]
    MissingSubtype(Category),
    #[error("span_text is empty")]
    EmptySpan,
}

/// Top-level extraction category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Age,
    Gender,
    Ethnicity,
    SocialHistory,
    FamilyHistory,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Age,
        Category::Gender,
        Category::Ethnicity,
        Category::SocialHistory,
        Category::FamilyHistory,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Age => "age",
            Category::Gender => "gender",
            Category::Ethnicity => "ethnicity",
            Category::SocialHistory => "social_history",
            Category::FamilyHistory => "family_history",
        }
    }

    /// Human-readable label, as used in prompts and reports.
    pub fn label(self) -> &'static str {
        match self {
            Category::Age => "Age",
            Category::Gender => "Gender",
            Category::Ethnicity => "Ethnicity",
            Category::SocialHistory => "Social History",
            Category::FamilyHistory => "Family History",
        }
    }

    pub fn has_subtypes(self) -> bool {
        matches!(self, Category::SocialHistory | Category::FamilyHistory)
    }

    pub fn subtypes(self) -> &'static [Subtype] {
        match self {
            Category::SocialHistory => &Subtype::ALL[..6],
            Category::FamilyHistory => &Subtype::ALL[6..],
            _ => &[],
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = normalize_name(s);
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == key)
            .ok_or_else(|| SchemaError::UnknownCategory(s.to_string()))
    }
}

/// Subtype of social history or family history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Subtype {
    EmploymentStatus,
    AlcoholUse,
    TobaccoUse,
    DrugUse,
    EducationStatus,
    LivingStatus,
    Observation,
    Vital,
}

impl Subtype {
    pub const ALL: [Subtype; 8] = [
        Subtype::EmploymentStatus,
        Subtype::AlcoholUse,
        Subtype::TobaccoUse,
        Subtype::DrugUse,
        Subtype::EducationStatus,
        Subtype::LivingStatus,
        Subtype::Observation,
        Subtype::Vital,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Subtype::EmploymentStatus => "employment_status",
            Subtype::AlcoholUse => "alcohol_use",
            Subtype::TobaccoUse => "tobacco_use",
            Subtype::DrugUse => "drug_use",
            Subtype::EducationStatus => "education_status",
            Subtype::LivingStatus => "living_status",
            Subtype::Observation => "observation",
            Subtype::Vital => "vital",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Subtype::EmploymentStatus => "Employment status",
            Subtype::AlcoholUse => "Alcohol use",
            Subtype::TobaccoUse => "Tobacco use",
            Subtype::DrugUse => "Drug use",
            Subtype::EducationStatus => "Education status",
            Subtype::LivingStatus => "Living status",
            Subtype::Observation => "Observation",
            Subtype::Vital => "Vital",
        }
    }

    pub fn parent(self) -> Category {
        match self {
            Subtype::Observation | Subtype::Vital => Category::FamilyHistory,
            _ => Category::SocialHistory,
        }
    }
}

impl fmt::Display for Subtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subtype {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = normalize_name(s);
        Subtype::ALL
            .into_iter()
            .find(|t| t.as_str() == key)
            .ok_or_else(|| SchemaError::UnknownSubtype(s.to_string()))
    }
}

/// Accepts `Social History`, `social-history`, `SOCIAL_HISTORY`, ...
fn normalize_name(s: &str) -> String {
    s.trim()
        .chars()
        .map(|c| match c {
            ' ' | '-' => '_',
            c => c.to_ascii_lowercase(),
        })
        .collect()
}

macro_rules! serde_via_str {
    ($ty:ty) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let raw = String::deserialize(d)?;
                raw.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

serde_via_str!(Category);
serde_via_str!(Subtype);

/// One scoring cell: a category plus, for social and family history, a subtype.
///
/// The derived ordering is the row order of the results table: demographics
/// first, then the six social-history subtypes, then the two family-history
/// subtypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub category: Category,
    pub subtype: Option<Subtype>,
}

impl Cell {
    pub fn new(category: Category, subtype: Option<Subtype>) -> Result<Self, SchemaError> {
        match (category.has_subtypes(), subtype) {
            (true, None) => Err(SchemaError::MissingSubtype(category)),
            (false, Some(subtype)) => Err(SchemaError::Pairing { category, subtype }),
            (true, Some(subtype)) if subtype.parent() != category => {
                Err(SchemaError::Pairing { category, subtype })
            }
            _ => Ok(Cell { category, subtype }),
        }
    }

    pub fn demographic(category: Category) -> Self {
        debug_assert!(!category.has_subtypes());
        Cell {
            category,
            subtype: None,
        }
    }

    pub fn of_subtype(subtype: Subtype) -> Self {
        Cell {
            category: subtype.parent(),
            subtype: Some(subtype),
        }
    }

    /// The eleven cells of the results table, in table order.
    pub fn all() -> Vec<Cell> {
        let mut cells: Vec<Cell> = [Category::Age, Category::Gender, Category::Ethnicity]
            .into_iter()
            .map(Cell::demographic)
            .collect();
        cells.extend(Subtype::ALL.into_iter().map(Cell::of_subtype));
        cells
    }

    pub fn label(&self) -> &'static str {
        match self.subtype {
            Some(s) => s.label(),
            None => self.category.label(),
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.subtype {
            Some(s) => write!(f, "{}/{}", self.category, s),
            None => write!(f, "{}", self.category),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalNote {
    pub note_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGold")]
pub struct GoldAnnotation {
    pub note_id: String,
    pub category: Category,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subtype: Option<Subtype>,
    pub span_text: String,
}

#[derive(Deserialize)]
struct RawGold {
    note_id: String,
    category: Category,
    #[serde(default)]
    subtype: Option<Subtype>,
    span_text: String,
}

impl TryFrom<RawGold> for GoldAnnotation {
    type Error = SchemaError;

    fn try_from(raw: RawGold) -> Result<Self, Self::Error> {
        GoldAnnotation::new(raw.note_id, raw.category, raw.subtype, raw.span_text)
    }
}

impl GoldAnnotation {
    pub fn new(
        note_id: impl Into<String>,
        category: Category,
        subtype: Option<Subtype>,
        span_text: impl Into<String>,
    ) -> Result<Self, SchemaError> {
        Cell::new(category, subtype)?;
        let span_text = span_text.into();
        if span_text.trim().is_empty() {
            return Err(SchemaError::EmptySpan);
        }
        Ok(GoldAnnotation {
            note_id: note_id.into(),
            category,
            subtype,
            span_text,
        })
    }

    pub fn cell(&self) -> Cell {
        Cell {
            category: self.category,
            subtype: self.subtype,
        }
    }
}

fn read_lines(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_records<T: for<'de> Deserialize<'de>>(
    path: &Path,
    content: &str,
) -> Result<Vec<(usize, T)>, CorpusError> {
    content
        .lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(idx, line)| {
            serde_json::from_str(line)
                .map(|rec| (idx + 1, rec))
                .map_err(|e| CorpusError::Malformed {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    message: e.to_string(),
                })
        })
        .collect()
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<ClinicalNote>, CorpusError> {
    let path = path.as_ref();
    let content = read_lines(path)?;
    let mut seen = HashSet::new();
    let mut notes = Vec::new();
    for (line, note) in parse_records::<ClinicalNote>(path, &content)? {
        if note.text.trim().is_empty() {
            return Err(CorpusError::Malformed {
                path: path.to_path_buf(),
                line,
                message: format!("note {:?} has empty text", note.note_id),
            });
        }
        if !seen.insert(note.note_id.clone()) {
            return Err(CorpusError::DuplicateNoteId {
                path: path.to_path_buf(),
                line,
                note_id: note.note_id,
            });
        }
        notes.push(note);
    }
    Ok(notes)
}

pub fn load_gold(path: impl AsRef<Path>) -> Result<Vec<GoldAnnotation>, CorpusError> {
    let path = path.as_ref();
    let content = read_lines(path)?;
    Ok(parse_records::<GoldAnnotation>(path, &content)?
        .into_iter()
        .map(|(_, g)| g)
        .collect())
}

/// Serializes records as newline-delimited JSON, one record per line.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).expect("record serialization is infallible"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PhiKind {
    Phone,
    Date,
    Mrn,
}

impl PhiKind {
    pub fn placeholder(self) -> &'static str {
        match self {
            PhiKind::Phone => "[PHONE]",
            PhiKind::Date => "[DATE]",
            PhiKind::Mrn => "[MRN]",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhiFinding {
    pub kind: PhiKind,
    /// Byte offset of the replaced text in the original string.
    pub offset: usize,
    /// Byte length of the replaced text.
    pub len: usize,
}

// Every alternative is bounded by \b on both ends (or starts with `(`/`+`),
// so replacement never creates a new match at the seam; scrub stays idempotent.
static PHI_PATTERN: LazyLock<Regex> = LazyLock::new(|| {
    let phone = r"(?:\+1[-. ]?|\b1[-. ])?(?:\(\d{3}\)[-. ]?|\b\d{3}[-.])\d{3}[-.]\d{4}\b";
    let date = concat!(
        r"\b\d{1,2}[/-]\d{1,2}[/-](?:\d{4}|\d{2})\b",
        r"|\b\d{4}-\d{2}-\d{2}\b",
        r"|\b(?:jan|feb|mar|apr|may|jun|jul|aug|sep|sept|oct|nov|dec)[a-z]*\.?\s+\d{1,2},?\s+\d{4}\b",
    );
    let mrn = r"\b\d{6,}\b";
    Regex::new(&format!(
        r"(?i)(?P<phone>{phone})|(?P<date>{date})|(?P<mrn>{mrn})"
    ))
    .expect("PHI pattern compiles")
});

/// Replaces phone numbers, dates and MRN-like digit runs with placeholders.
///
/// Text outside the matches is copied unchanged.
pub fn scrub_phi(text: &str) -> (String, Vec<PhiFinding>) {
    let mut out = String::with_capacity(text.len());
    let mut findings = Vec::new();
    let mut last = 0;
    for caps in PHI_PATTERN.captures_iter(text) {
        let whole = caps.get(0).expect("group 0 always present");
        let kind = if caps.name("phone").is_some() {
            PhiKind::Phone
        } else if caps.name("date").is_some() {
            PhiKind::Date
        } else {
            PhiKind::Mrn
        };
        out.push_str(&text[last..whole.start()]);
        out.push_str(kind.placeholder());
        findings.push(PhiFinding {
            kind,
            offset: whole.start(),
            len: whole.len(),
        });
        last = whole.end();
    }
    out.push_str(&text[last..]);
    (out, findings)
}

/// Annotation counts per cell.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    counts: BTreeMap<Cell, usize>,
}

impl CorpusStats {
    pub fn count(&self, cell: Cell) -> usize {
        self.counts.get(&cell).copied().unwrap_or(0)
    }

    /// Total for a top-level category; for subtyped categories this is the
    /// sum over its subtypes.
    pub fn category_total(&self, category: Category) -> usize {
        self.counts
            .iter()
            .filter(|(cell, _)| cell.category == category)
            .map(|(_, n)| n)
            .sum()
    }

    /// All eleven cells in table order, including zero counts.
    pub fn rows(&self) -> Vec<(Cell, usize)> {
        Cell::all()
            .into_iter()
            .map(|c| (c, self.count(c)))
            .collect()
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

pub fn corpus_stats(gold: &[GoldAnnotation]) -> CorpusStats {
    let mut counts = BTreeMap::new();
    for g in gold {
        *counts.entry(g.cell()).or_insert(0) += 1;
    }
    CorpusStats { counts }
}
