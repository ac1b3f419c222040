//! Splits extracted social/family history strings into segments and routes
//! each segment to subtypes by keyword lexicons.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Category, Cell, SchemaError, Subtype};
use crate::eval_ner::words;
use crate::extraction::ExtractionRecord;

pub const DEFAULT_LEXICONS: &str = include_str!("../lexicons/default.tsv");

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("cannot read lexicon file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("lexicon line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("lexicon line {line}: {source}")]
    Schema {
        line: usize,
        #[source]
        source: SchemaError,
    },
    #[error("lexicon line {line}: keyword {keyword:?} already listed under {other} in the same category")]
    DuplicateKeyword {
        line: usize,
        keyword: String,
        other: Subtype,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub text: String,
    pub source_category: Category,
    /// Byte range of `text` within the category string.
    pub char_range: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtypedConcept {
    pub note_id: String,
    pub category: Category,
    pub subtypes: BTreeSet<Subtype>,
    pub text: String,
}

impl SubtypedConcept {
    /// Scoring cells this concept contributes to. Empty for an uncategorized
    /// social/family history segment.
    pub fn cells(&self) -> Vec<Cell> {
        if self.category.has_subtypes() {
            self.subtypes.iter().map(|s| Cell::of_subtype(*s)).collect()
        } else {
            vec![Cell::demographic(self.category)]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    pub subtype: Subtype,
    pub keywords: BTreeSet<String>,
}

impl Lexicon {
    fn matches(&self, tokens: &[String]) -> bool {
        self.keywords.iter().any(|kw| keyword_hits(kw, tokens))
    }
}

/// Keyword words must prefix-match consecutive tokens.
fn keyword_hits(keyword: &str, tokens: &[String]) -> bool {
    let kw: Vec<String> = words(keyword).collect();
    if kw.is_empty() || kw.len() > tokens.len() {
        return false;
    }
    tokens
        .windows(kw.len())
        .any(|w| w.iter().zip(&kw).all(|(t, k)| t.starts_with(k.as_str())))
}

/// All subtype lexicons in use, at most one per subtype.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexiconSet {
    lexicons: BTreeMap<Subtype, Lexicon>,
}

impl Default for LexiconSet {
    fn default() -> Self {
        LexiconSet::parse(DEFAULT_LEXICONS).expect("embedded lexicons are valid")
    }
}

impl LexiconSet {
    /// Parses `category.subtype<TAB>keyword` lines. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut lexicons: BTreeMap<Subtype, Lexicon> = BTreeMap::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, keyword) = line.split_once('\t').ok_or_else(|| LexiconError::Syntax {
                line: line_no,
                message: "expected category.subtype<TAB>keyword".into(),
            })?;
            let (cat, sub) = key
                .trim()
                .split_once('.')
                .ok_or_else(|| LexiconError::Syntax {
                    line: line_no,
                    message: format!("expected category.subtype, got {key:?}"),
                })?;
            let schema = |source| LexiconError::Schema {
                line: line_no,
                source,
            };
            let category: Category = cat.parse().map_err(schema)?;
            let subtype: Subtype = sub.parse().map_err(schema)?;
            Cell::new(category, Some(subtype)).map_err(schema)?;

            let keyword = keyword.trim().to_lowercase();
            if words(&keyword).next().is_none() {
                return Err(LexiconError::Syntax {
                    line: line_no,
                    message: "keyword has no letters or digits".into(),
                });
            }
            if let Some(other) = lexicons.values().find(|l| {
                l.subtype != subtype
                    && l.subtype.parent() == category
                    && l.keywords.contains(&keyword)
            }) {
                return Err(LexiconError::DuplicateKeyword {
                    line: line_no,
                    keyword,
                    other: other.subtype,
                });
            }
            lexicons
                .entry(subtype)
                .or_insert_with(|| Lexicon {
                    subtype,
                    keywords: BTreeSet::new(),
                })
                .keywords
                .insert(keyword);
        }
        Ok(LexiconSet { lexicons })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LexiconError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn get(&self, subtype: Subtype) -> Option<&Lexicon> {
        self.lexicons.get(&subtype)
    }

    pub fn for_category(&self, category: Category) -> impl Iterator<Item = &Lexicon> {
        self.lexicons
            .values()
            .filter(move |l| l.subtype.parent() == category)
    }

    pub fn add_keyword(&mut self, subtype: Subtype, keyword: &str) {
        self.lexicons
            .entry(subtype)
            .or_insert_with(|| Lexicon {
                subtype,
                keywords: BTreeSet::new(),
            })
            .keywords
            .insert(keyword.to_lowercase());
    }

    /// Canonical file form: sorted by subtype then keyword.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for lex in self.lexicons.values() {
            for kw in &lex.keywords {
                let _ = writeln!(out, "{}.{}\t{}", lex.subtype.parent(), lex.subtype, kw);
            }
        }
        out
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }
}

fn is_delimiter(prev: Option<char>, c: char, next: Option<char>) -> bool {
    match c {
        ',' | ';' => true,
        // keep decimals such as "1.5 packs" whole
        '.' => {
            !(prev.is_some_and(|p| p.is_ascii_digit()) && next.is_some_and(|n| n.is_ascii_digit()))
        }
        _ => false,
    }
}

/// Splits on commas, semicolons and periods outside parentheses, trims each
/// piece and drops empty ones.
pub fn segment(category_text: &str, category: Category) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut push = |start: usize, end: usize| {
        let piece = &category_text[start..end];
        let trimmed = piece.trim();
        if trimmed.is_empty() {
            return;
        }
        let lead = piece.len() - piece.trim_start().len();
        segments.push(Segment {
            text: trimmed.to_string(),
            source_category: category,
            char_range: (start + lead, start + lead + trimmed.len()),
        });
    };

    let chars: Vec<(usize, char)> = category_text.char_indices().collect();
    let mut depth = 0usize;
    let mut start = 0;
    for (i, &(pos, c)) in chars.iter().enumerate() {
        match c {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            _ if depth == 0 => {
                let prev = i.checked_sub(1).map(|j| chars[j].1);
                let next = chars.get(i + 1).map(|&(_, n)| n);
                if is_delimiter(prev, c, next) {
                    push(start, pos);
                    start = pos + c.len_utf8();
                }
            }
            _ => {}
        }
    }
    push(start, category_text.len());
    segments
}

/// Assigns every subtype whose lexicon has a keyword in the segment.
pub fn categorize(note_id: &str, seg: &Segment, lexicons: &LexiconSet) -> SubtypedConcept {
    let tokens: Vec<String> = words(&seg.text).collect();
    let subtypes = lexicons
        .for_category(seg.source_category)
        .filter(|l| l.matches(&tokens))
        .map(|l| l.subtype)
        .collect();
    SubtypedConcept {
        note_id: note_id.to_string(),
        category: seg.source_category,
        subtypes,
        text: seg.text.clone(),
    }
}

pub fn postprocess_record(
    record: &ExtractionRecord,
    lexicons: &LexiconSet,
) -> Vec<SubtypedConcept> {
    let mut concepts = Vec::new();
    for category in Category::ALL {
        let Some(value) = record.field(category) else {
            continue;
        };
        if category.has_subtypes() {
            concepts.extend(
                segment(value, category)
                    .iter()
                    .map(|seg| categorize(&record.note_id, seg, lexicons)),
            );
        } else if !value.trim().is_empty() {
            concepts.push(SubtypedConcept {
                note_id: record.note_id.clone(),
                category,
                subtypes: BTreeSet::new(),
                text: value.trim().to_string(),
            });
        }
    }
    concepts
}

/// Segments that need a human look: no subtype at all, or more than one.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostprocessDiagnostics {
    pub uncategorized: Vec<SubtypedConcept>,
    pub multi_assigned: Vec<SubtypedConcept>,
}

pub fn postprocess_all(
    records: &[ExtractionRecord],
    lexicons: &LexiconSet,
) -> (Vec<SubtypedConcept>, PostprocessDiagnostics) {
    let concepts: Vec<_> = records
        .iter()
        .flat_map(|r| postprocess_record(r, lexicons))
        .collect();
    let mut diag = PostprocessDiagnostics::default();
    for c in concepts.iter().filter(|c| c.category.has_subtypes()) {
        match c.subtypes.len() {
            0 => diag.uncategorized.push(c.clone()),
            1 => {}
            _ => diag.multi_assigned.push(c.clone()),
        }
    }
    (concepts, diag)
}
