use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::RawExtraction;
use crate::corpus::Category;

/// Parsed model reply: one optional text field per top-level category.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub note_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ethnicity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub social_history: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family_history: Option<String>,
}

impl ExtractionRecord {
    pub fn new(note_id: impl Into<String>) -> Self {
        ExtractionRecord {
            note_id: note_id.into(),
            ..Default::default()
        }
    }

    pub fn field(&self, category: Category) -> Option<&str> {
        match category {
            Category::Age => self.age.as_deref(),
            Category::Gender => self.gender.as_deref(),
            Category::Ethnicity => self.ethnicity.as_deref(),
            Category::SocialHistory => self.social_history.as_deref(),
            Category::FamilyHistory => self.family_history.as_deref(),
        }
    }

    pub fn field_mut(&mut self, category: Category) -> &mut Option<String> {
        match category {
            Category::Age => &mut self.age,
            Category::Gender => &mut self.gender,
            Category::Ethnicity => &mut self.ethnicity,
            Category::SocialHistory => &mut self.social_history,
            Category::FamilyHistory => &mut self.family_history,
        }
    }

    /// Renders the canonical five-line reply, `N/A` for absent fields.
    pub fn to_reply(&self) -> String {
        Category::ALL
            .iter()
            .map(|c| format!("{}: {}", c.label(), self.field(*c).unwrap_or("N/A")))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("reply for note {0:?} contains none of the five labels")]
    Unparseable(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseDiagnostics {
    /// Non-blank lines outside any labeled field (preamble, epilogue).
    pub ignored_lines: usize,
    /// Labels seen again after their first occurrence; only the first counts.
    pub duplicate_labels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parsed {
    pub record: ExtractionRecord,
    pub diagnostics: ParseDiagnostics,
}

// Optional list bullet or number, optional markdown bold, the label, a colon.
static LABEL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)^[ \t]*(?:[-*•][ \t]*|\d+[.)][ \t]*)?(?:\*\*)?(age|gender|ethnicity|social[ _-]*history|family[ _-]*history)(?:\*\*)?[ \t]*:(?:\*\*)?",
    )
    .expect("label pattern compiles")
});

fn label_category(label: &str) -> Category {
    let lower = label.to_ascii_lowercase();
    if lower.starts_with("social") {
        Category::SocialHistory
    } else if lower.starts_with("family") {
        Category::FamilyHistory
    } else if lower == "age" {
        Category::Age
    } else if lower == "gender" {
        Category::Gender
    } else {
        Category::Ethnicity
    }
}

fn is_null_marker(value: &str) -> bool {
    let v = value.strip_suffix('.').unwrap_or(value).trim();
    v.is_empty() || v.eq_ignore_ascii_case("n/a") || v.eq_ignore_ascii_case("none")
}

struct OpenField {
    category: Category,
    start: usize,
    end: usize,
}

pub fn parse_output(raw: &RawExtraction) -> Result<ExtractionRecord, ParseError> {
    parse_output_with_diagnostics(raw).map(|p| p.record)
}

/// Line-wise label scan. A field runs from its label to the next label or
/// blank line; continuation lines are kept verbatim, so every captured value
/// is a trimmed slice of the reply.
pub fn parse_output_with_diagnostics(raw: &RawExtraction) -> Result<Parsed, ParseError> {
    let text = raw.raw_text.as_str();
    let mut record = ExtractionRecord::new(raw.note_id.clone());
    let mut diagnostics = ParseDiagnostics::default();
    let mut seen = [false; 5];
    let mut any_label = false;
    let mut open: Option<OpenField> = None;

    let mut close = |field: Option<OpenField>,
                     record: &mut ExtractionRecord,
                     diagnostics: &mut ParseDiagnostics| {
        let Some(f) = field else { return };
        let idx = f.category as usize;
        if seen[idx] {
            diagnostics.duplicate_labels += 1;
            return;
        }
        seen[idx] = true;
        let value = text[f.start..f.end].trim();
        if !is_null_marker(value) {
            *record.field_mut(f.category) = Some(value.to_string());
        }
    };

    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let line_start = offset;
        offset += line.len();
        let content = line.trim_end_matches(['\n', '\r']);
        let content_end = line_start + content.len();

        if let Some(caps) = LABEL.captures(content) {
            any_label = true;
            close(open.take(), &mut record, &mut diagnostics);
            let label = caps.get(1).expect("label group").as_str();
            open = Some(OpenField {
                category: label_category(label),
                start: line_start + caps.get(0).expect("group 0").end(),
                end: content_end,
            });
        } else if content.trim().is_empty() {
            close(open.take(), &mut record, &mut diagnostics);
        } else if let Some(f) = open.as_mut() {
            f.end = content_end;
        } else {
            diagnostics.ignored_lines += 1;
        }
    }
    close(open.take(), &mut record, &mut diagnostics);

    if !any_label {
        return Err(ParseError::Unparseable(raw.note_id.clone()));
    }
    Ok(Parsed {
        record,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(text: &str) -> RawExtraction {
        RawExtraction {
            note_id: "n1".into(),
            raw_text: text.into(),
            attempt_count: 1,
        }
    }

    #[test]
    fn canonical_reply() {
        let rec = parse_output(&raw(
            "Age: 76 year old\nGender: female\nEthnicity: White\nSocial History: N/A\nFamily History: N/A",
        ))
        .unwrap();
        assert_eq!(rec.age.as_deref(), Some("76 year old"));
        assert_eq!(rec.gender.as_deref(), Some("female"));
        assert_eq!(rec.ethnicity.as_deref(), Some("White"));
        assert_eq!(rec.social_history, None);
        assert_eq!(rec.family_history, None);
    }

    #[test]
    fn no_labels_is_an_error() {
        assert_eq!(
            parse_output(&raw("no structured content here")),
            Err(ParseError::Unparseable("n1".into()))
        );
        assert!(parse_output(&raw("")).is_err());
    }

    #[test]
    fn single_family_history_line() {
        let rec = parse_output(&raw("Family History: father had heart disease and died")).unwrap();
        assert_eq!(
            rec.family_history.as_deref(),
            Some("father had heart disease and died")
        );
        assert_eq!(
            rec,
            ExtractionRecord {
                family_history: rec.family_history.clone(),
                ..ExtractionRecord::new("n1")
            }
        );
    }

    #[test]
    fn lenient_label_forms() {
        let rec = parse_output(&raw(
            "Here are the results:\n\n- **Age:** 54 year old\n2. gender: Female\nSOCIAL_HISTORY: never smoker,\n  drinks alcohol\n\nLet me know if you need more.",
        ))
        .unwrap();
        assert_eq!(rec.age.as_deref(), Some("54 year old"));
        assert_eq!(rec.gender.as_deref(), Some("Female"));
        assert_eq!(
            rec.social_history.as_deref(),
            Some("never smoker,\n  drinks alcohol")
        );
        let parsed =
            parse_output_with_diagnostics(&raw("Here are the results:\nAge: 5\n\nThanks\nAge: 6"))
                .unwrap();
        assert_eq!(parsed.diagnostics.ignored_lines, 2);
        assert_eq!(parsed.diagnostics.duplicate_labels, 1);
        assert_eq!(parsed.record.age.as_deref(), Some("5"));
    }

    #[test]
    fn null_markers() {
        let rec = parse_output(&raw(
            "Age: none\nGender:\nEthnicity: n/a.\nSocial History: None mentioned",
        ))
        .unwrap();
        assert_eq!(rec.age, None);
        assert_eq!(rec.gender, None);
        assert_eq!(rec.ethnicity, None);
        assert_eq!(rec.social_history.as_deref(), Some("None mentioned"));
    }

    #[test]
    fn crlf_line_endings() {
        let rec = parse_output(&raw("Age: 54\r\nGender: male\r\n")).unwrap();
        assert_eq!(rec.age.as_deref(), Some("54"));
        assert_eq!(rec.gender.as_deref(), Some("male"));
    }

    #[test]
    fn label_inside_sentence_is_not_a_label() {
        let rec = parse_output(&raw("Social History: lives alone, age: unknown")).unwrap();
        assert_eq!(
            rec.social_history.as_deref(),
            Some("lives alone, age: unknown")
        );
        assert_eq!(rec.age, None);
    }
}
