//! Joins the two metric families into per-cell rows and renders them as CSV,
//! JSON or a markdown table.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Category, Cell, CorpusStats, Subtype};
use crate::eval_ner::{mean_prf, Prf};
use crate::eval_semantic::SemanticScores;

pub const CSV_HEADER: &str = "category,subtype,precision,recall,f1,avg_s,acc_080,acc_090,support";
pub const AGGREGATION_NOTE: &str =
    "Overall scores are unweighted means of the per-row scores within each group.";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cell {0} has NER results but no semantic results")]
    MissingSemantic(Cell),
    #[error("cell {0} has semantic results but no NER results")]
    MissingNer(Cell),
    #[error("cell {cell}: accuracy at threshold {theta} was not computed")]
    MissingThreshold { cell: Cell, theta: f64 },
    #[error("unknown report format {0:?} (expected csv, json or markdown)")]
    UnknownFormat(String),
    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub category: Category,
    pub subtype: Option<Subtype>,
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub avg_s: f64,
    pub acc_080: f64,
    pub acc_090: f64,
    pub support: usize,
}

impl MetricRow {
    pub fn cell(&self) -> Cell {
        Cell {
            category: self.category,
            subtype: self.subtype,
        }
    }
}

/// Everything needed to reproduce a run, given the same backend behaviour.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub toolkit_version: String,
    /// Input role (`notes`, `gold`, ...) to SHA-256 of the file contents.
    pub corpus_hashes: BTreeMap<String, String>,
    pub prompt_hash: Option<String>,
    pub model_id: Option<String>,
    pub temperature: Option<f64>,
    pub embedding_model_id: Option<String>,
    pub lexicon_hash: Option<String>,
    pub pooling: Option<String>,
    pub thresholds: Vec<f64>,
    pub pairing_mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

impl RunManifest {
    pub fn new() -> Self {
        RunManifest {
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            ..Default::default()
        }
    }

    fn without_timestamp(&self) -> RunManifest {
        RunManifest {
            timestamp: None,
            ..self.clone()
        }
    }
}

/// Joins per-cell NER and semantic results into table rows, in table order.
pub fn assemble(
    ner: &BTreeMap<Cell, Prf>,
    semantic: &BTreeMap<Cell, SemanticScores>,
    stats: &CorpusStats,
) -> Result<Vec<MetricRow>, ReportError> {
    if let Some(cell) = semantic.keys().find(|c| !ner.contains_key(c)) {
        return Err(ReportError::MissingNer(*cell));
    }
    ner.iter()
        .map(|(cell, prf)| {
            let sem = semantic
                .get(cell)
                .ok_or(ReportError::MissingSemantic(*cell))?;
            let acc = |theta: f64| {
                sem.accuracy_at(theta)
                    .ok_or(ReportError::MissingThreshold { cell: *cell, theta })
            };
            Ok(MetricRow {
                category: cell.category,
                subtype: cell.subtype,
                p: prf.precision,
                r: prf.recall,
                f1: prf.f1,
                avg_s: sem.avg_s,
                acc_080: acc(0.8)?,
                acc_090: acc(0.9)?,
                support: stats.count(*cell),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverallGroup {
    Demographics,
    SocialHistory,
    FamilyHistory,
}

impl OverallGroup {
    pub fn of(category: Category) -> Self {
        match category {
            Category::Age | Category::Gender | Category::Ethnicity => OverallGroup::Demographics,
            Category::SocialHistory => OverallGroup::SocialHistory,
            Category::FamilyHistory => OverallGroup::FamilyHistory,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            OverallGroup::Demographics => "Demographics",
            OverallGroup::SocialHistory => "Social History",
            OverallGroup::FamilyHistory => "Family History",
        }
    }
}

/// Unweighted mean of P, R and F1 over the rows of each group. Groups without
/// rows are left out.
pub fn aggregate_overall(rows: &[MetricRow]) -> BTreeMap<OverallGroup, Prf> {
    let mut groups: BTreeMap<OverallGroup, Vec<Prf>> = BTreeMap::new();
    for row in rows {
        groups
            .entry(OverallGroup::of(row.category))
            .or_default()
            .push(Prf {
                precision: row.p,
                recall: row.r,
                f1: row.f1,
            });
    }
    groups
        .into_iter()
        .map(|(g, prfs)| (g, mean_prf(&prfs)))
        .collect()
}

/// Three decimals, halves rounded away from zero. Values within 1e-9 of a
/// half (in thousandths) count as the half, so 0.7215 prints as 0.722 even
/// though its binary value sits just below.
pub fn format_3dp(x: f64) -> String {
    let scaled = (x.abs() * 1000.0 + 0.5 + 1e-9).floor() as u64;
    let sign = if x < 0.0 && scaled != 0 { "-" } else { "" };
    format!("{sign}{}.{:03}", scaled / 1000, scaled % 1000)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

impl ReportFormat {
    pub fn file_name(self) -> &'static str {
        match self {
            ReportFormat::Csv => "report.csv",
            ReportFormat::Json => "report.json",
            ReportFormat::Markdown => "report.md",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            _ => Err(ReportError::UnknownFormat(s.to_string())),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
            ReportFormat::Markdown => "markdown",
        })
    }
}

/// The JSON report document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub manifest: RunManifest,
    pub rows: Vec<MetricRow>,
    pub overall: BTreeMap<OverallGroup, Prf>,
    pub aggregation: String,
}

pub fn render(rows: &[MetricRow], manifest: &RunManifest, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => render_csv(rows),
        ReportFormat::Json => render_json(rows, manifest),
        ReportFormat::Markdown => render_markdown(rows, manifest),
    }
}

fn render_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.category,
            r.subtype.map(|s| s.as_str()).unwrap_or(""),
            format_3dp(r.p),
            format_3dp(r.r),
            format_3dp(r.f1),
            format_3dp(r.avg_s),
            format_3dp(r.acc_080),
            format_3dp(r.acc_090),
            r.support
        );
    }
    out
}

fn render_json(rows: &[MetricRow], manifest: &RunManifest) -> String {
    let doc = ReportDocument {
        manifest: manifest.without_timestamp(),
        rows: rows.to_vec(),
        overall: aggregate_overall(rows),
        aggregation: AGGREGATION_NOTE.to_string(),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("report serialization is infallible");
    s.push('\n');
    s
}

fn render_markdown(rows: &[MetricRow], manifest: &RunManifest) -> String {
    let mut out = String::from("# Performance by entity type\n\n");
    out.push_str("|  | NER P | NER R | NER F1 | Ave (s) | Acc (θ=0.8) | Acc (θ=0.9) | Support |\n");
    out.push_str("|---|---:|---:|---:|---:|---:|---:|---:|\n");
    let mut section: Option<Category> = None;
    for r in rows {
        if r.category.has_subtypes() && section != Some(r.category) {
            let _ = writeln!(out, "| **{}** |  |  |  |  |  |  |  |", r.category.label());
        }
        section = Some(r.category);
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            r.cell().label(),
            format_3dp(r.p),
            format_3dp(r.r),
            format_3dp(r.f1),
            format_3dp(r.avg_s),
            format_3dp(r.acc_080),
            format_3dp(r.acc_090),
            r.support
        );
    }

    let overall = aggregate_overall(rows);
    if !overall.is_empty() {
        out.push_str("\n## Overall\n\n| Group | P | R | F1 |\n|---|---:|---:|---:|\n");
        for (g, prf) in &overall {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} |",
                g.label(),
                format_3dp(prf.precision),
                format_3dp(prf.recall),
                format_3dp(prf.f1)
            );
        }
    }

    out.push('\n');
    out.push_str(AGGREGATION_NOTE);
    out.push_str("\n\n");
    let _ = writeln!(out, "- toolkit version: {}", manifest.toolkit_version);
    let opt = |v: &Option<String>| v.clone().unwrap_or_else(|| "-".to_string());
    let _ = writeln!(out, "- model: {}", opt(&manifest.model_id));
    let _ = writeln!(
        out,
        "- embedding model: {}",
        opt(&manifest.embedding_model_id)
    );
    let _ = writeln!(out, "- pooling: {}", opt(&manifest.pooling));
    let _ = writeln!(out, "- pairing: {}", opt(&manifest.pairing_mode));
    let _ = writeln!(out, "- prompt sha256: {}", opt(&manifest.prompt_hash));
    let _ = writeln!(out, "- lexicon sha256: {}", opt(&manifest.lexicon_hash));
    for (role, hash) in &manifest.corpus_hashes {
        let _ = writeln!(out, "- {role} sha256: {hash}");
    }
    out
}

/// Reads rows back from [`render`]'s CSV output.
pub fn parse_csv(text: &str) -> Result<Vec<MetricRow>, ReportError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => {
            return Err(ReportError::Csv {
                line: 1,
                message: "missing or unexpected header".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(idx, line)| {
            let err = |message: String| ReportError::Csv {
                line: idx + 1,
                message,
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 9 {
                return Err(err(format!("expected 9 fields, got {}", fields.len())));
            }
            let category: Category = fields[0].parse().map_err(|e| err(format!("{e}")))?;
            let subtype = match fields[1] {
                "" => None,
                s => Some(s.parse::<Subtype>().map_err(|e| err(format!("{e}")))?),
            };
            let num = |i: usize| {
                fields[i]
                    .parse::<f64>()
                    .map_err(|e| err(format!("field {}: {e}", i + 1)))
            };
            Ok(MetricRow {
                category,
                subtype,
                p: num(2)?,
                r: num(3)?,
                f1: num(4)?,
                avg_s: num(5)?,
                acc_080: num(6)?,
                acc_090: num(7)?,
                support: fields[8]
                    .parse()
                    .map_err(|e| err(format!("support: {e}")))?,
            })
        })
        .collect()
}

pub fn parse_json(text: &str) -> Result<ReportDocument, ReportError> {
    Ok(serde_json::from_str(text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval_semantic::ThresholdAccuracy;

    fn row(cell: Cell, f1: f64) -> MetricRow {
        MetricRow {
            category: cell.category,
            subtype: cell.subtype,
            p: f1,
            r: f1,
            f1,
            avg_s: 0.9,
            acc_080: 0.8,
            acc_090: 0.7,
            support: 3,
        }
    }

    fn sem(avg: f64) -> SemanticScores {
        SemanticScores {
            avg_s: avg,
            acc_at: vec![
                ThresholdAccuracy {
                    theta: 0.8,
                    accuracy: 1.0,
                },
                ThresholdAccuracy {
                    theta: 0.9,
                    accuracy: 0.5,
                },
            ],
            records: 2,
            spurious: 0,
        }
    }

    #[test]
    fn rounding() {
        assert_eq!(format_3dp(0.7215), "0.722");
        assert_eq!(format_3dp((0.704 + 0.739) / 2.0), "0.722");
        assert_eq!(format_3dp(0.0005), "0.001");
        assert_eq!(format_3dp(0.00049), "0.000");
        assert_eq!(format_3dp(1.0), "1.000");
        assert_eq!(format_3dp(0.9996), "1.000");
        assert_eq!(format_3dp(-0.25), "-0.250");
        assert_eq!(format_3dp(-0.0001), "0.000");
        assert_eq!(format_3dp(2.0 / 3.0), "0.667");
    }

    #[test]
    fn assemble_orders_and_joins() {
        let cells = Cell::all();
        let ner: BTreeMap<_, _> = cells.iter().rev().map(|c| (*c, Prf::PERFECT)).collect();
        let semantic: BTreeMap<_, _> = cells.iter().map(|c| (*c, sem(0.95))).collect();
        let rows = assemble(&ner, &semantic, &CorpusStats::default()).unwrap();
        assert_eq!(rows.len(), 11);
        assert_eq!(rows.iter().map(MetricRow::cell).collect::<Vec<_>>(), cells);
        assert_eq!(rows[0].acc_080, 1.0);
        assert_eq!(rows[0].acc_090, 0.5);
        assert_eq!(rows[0].support, 0);

        assert!(
            assemble(&BTreeMap::new(), &BTreeMap::new(), &CorpusStats::default())
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn assemble_rejects_mismatch() {
        let age = Cell::demographic(Category::Age);
        let vital = Cell::of_subtype(Subtype::Vital);
        let ner = BTreeMap::from([(age, Prf::PERFECT)]);
        let semantic = BTreeMap::from([(age, sem(1.0)), (vital, sem(1.0))]);
        let err = assemble(&ner, &semantic, &CorpusStats::default()).unwrap_err();
        assert!(err.to_string().contains("family_history/vital"), "{err}");
        let err = assemble(&ner, &BTreeMap::new(), &CorpusStats::default()).unwrap_err();
        assert!(err.to_string().contains("age"), "{err}");

        let mut partial = sem(1.0);
        partial.acc_at.truncate(1);
        let err = assemble(
            &ner,
            &BTreeMap::from([(age, partial)]),
            &CorpusStats::default(),
        );
        assert!(matches!(err, Err(ReportError::MissingThreshold { .. })));
    }

    #[test]
    fn overall_means() {
        let rows = vec![
            row(Cell::demographic(Category::Age), 0.991),
            row(Cell::demographic(Category::Gender), 0.977),
            row(Cell::demographic(Category::Ethnicity), 0.948),
            row(Cell::of_subtype(Subtype::Observation), 0.704),
            row(Cell::of_subtype(Subtype::Vital), 0.739),
            row(Cell::of_subtype(Subtype::DrugUse), 0.603),
        ];
        let o = aggregate_overall(&rows);
        assert_eq!(format_3dp(o[&OverallGroup::Demographics].f1), "0.972");
        assert!((o[&OverallGroup::FamilyHistory].f1 - 0.7215).abs() < 1e-12);
        assert_eq!(o[&OverallGroup::SocialHistory].f1, 0.603);
    }

    #[test]
    fn constant_rows_aggregate_to_themselves() {
        let rows: Vec<_> = Cell::all().into_iter().map(|c| row(c, 0.613)).collect();
        for prf in aggregate_overall(&rows).values() {
            assert!((prf.f1 - 0.613).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_layout_and_round_trip() {
        let rows: Vec<_> = Cell::all().into_iter().map(|c| row(c, 2.0 / 3.0)).collect();
        let m = RunManifest::new();
        let csv = render(&rows, &m, ReportFormat::Csv);
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(
            csv.lines().nth(4).unwrap(),
            "social_history,employment_status,0.667,0.667,0.667,0.900,0.800,0.700,3"
        );
        let parsed = parse_csv(&csv).unwrap();
        assert_eq!(render(&parsed, &m, ReportFormat::Csv), csv);
        assert!(parse_csv("nope\n").is_err());
        assert!(parse_csv(&format!("{CSV_HEADER}\nage,,1,1\n")).is_err());
    }

    #[test]
    fn markdown_sections() {
        let rows: Vec<_> = Cell::all().into_iter().map(|c| row(c, 1.0)).collect();
        let md = render(&rows, &RunManifest::new(), ReportFormat::Markdown);
        let table: Vec<&str> = md
            .lines()
            .skip_while(|l| !l.starts_with('|'))
            .take_while(|l| l.starts_with('|'))
            .collect();
        assert_eq!(table.len(), 2 + 11 + 2);
        assert_eq!(table.iter().filter(|l| l.starts_with("| **")).count(), 2);
        assert!(md.contains(AGGREGATION_NOTE));
    }

    #[test]
    fn json_omits_timestamp_and_parses_back() {
        let rows = vec![row(Cell::demographic(Category::Age), 1.0)];
        let mut m = RunManifest::new();
        m.timestamp = Some("2026-01-01T00:00:00Z".into());
        let json = render(&rows, &m, ReportFormat::Json);
        assert!(!json.contains("2026-01-01"));
        let doc = parse_json(&json).unwrap();
        assert_eq!(doc.rows, rows);
        assert_eq!(render(&doc.rows, &doc.manifest, ReportFormat::Json), json);
    }

    #[test]
    fn format_names() {
        assert_eq!(
            "markdown".parse::<ReportFormat>().unwrap(),
            ReportFormat::Markdown
        );
        assert_eq!("CSV".parse::<ReportFormat>().unwrap(), ReportFormat::Csv);
        assert!(matches!(
            "pdf".parse::<ReportFormat>(),
            Err(ReportError::UnknownFormat(_))
        ));
    }
}
