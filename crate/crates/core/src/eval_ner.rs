//! Relaxed word-overlap scoring: concepts become sets of case-folded words,
//! and precision/recall/F1 are computed from the overlap of those sets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Cell, GoldAnnotation};
use crate::postprocess::SubtypedConcept;

/// Case-folded words in order of appearance. Anything that is not a letter
/// or digit separates words, so `54-year-old` gives `54`, `year`, `old`.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordBag(pub BTreeSet<String>);

impl WordBag {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn extend_from(&mut self, text: &str) {
        self.0.extend(words(text));
    }
}

impl<S: Into<String>> FromIterator<S> for WordBag {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        WordBag(iter.into_iter().map(Into::into).collect())
    }
}

pub fn tokenize_words(text: &str) -> WordBag {
    WordBag(words(text).collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl std::ops::AddAssign for MatchCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.tp += rhs.tp;
        self.fp += rhs.fp;
        self.fn_ += rhs.fn_;
    }
}

pub fn count_matches(gold: &WordBag, predicted: &WordBag) -> MatchCounts {
    let tp = gold.0.intersection(&predicted.0).count() as u64;
    MatchCounts {
        tp,
        fp: predicted.len() as u64 - tp,
        fn_: gold.len() as u64 - tp,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub const PERFECT: Prf = Prf {
        precision: 1.0,
        recall: 1.0,
        f1: 1.0,
    };
}

/// P = TP/(TP+FP), R = TP/(TP+FN), F1 = 2PR/(P+R).
///
/// Empty-vs-empty (all counts zero) scores 1 across the board. Otherwise a
/// zero denominator scores 0, as does F1 when P+R = 0.
pub fn compute_prf(counts: MatchCounts) -> Prf {
    let MatchCounts { tp, fp, fn_ } = counts;
    if tp == 0 && fp == 0 && fn_ == 0 {
        return Prf::PERFECT;
    }
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf {
        precision,
        recall,
        f1,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Sum counts over notes, then compute once.
    #[default]
    Micro,
    /// Average per-note scores over notes where the cell is non-empty on
    /// either side.
    Macro,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown pooling {0:?} (expected micro or macro)")]
pub struct UnknownPooling(pub String);

impl FromStr for Pooling {
    type Err = UnknownPooling;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "micro" => Ok(Pooling::Micro),
            "macro" => Ok(Pooling::Macro),
            _ => Err(UnknownPooling(s.to_string())),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Micro => "micro",
            Pooling::Macro => "macro",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NerCell {
    pub prf: Prf,
    /// Counts summed over all notes, whatever the pooling.
    pub counts: MatchCounts,
    /// Notes where gold or prediction is present for the cell.
    pub notes: usize,
}

#[derive(Default)]
struct NoteCell {
    gold: WordBag,
    predicted: WordBag,
}

/// Scores every cell that has at least one gold annotation. Predictions in
/// cells with no gold anywhere are not scored.
pub fn evaluate_ner_detailed(
    gold: &[GoldAnnotation],
    concepts: &[SubtypedConcept],
    pooling: Pooling,
) -> BTreeMap<Cell, NerCell> {
    let gold_cells: BTreeSet<Cell> = gold.iter().map(GoldAnnotation::cell).collect();
    let mut per_note: BTreeMap<Cell, BTreeMap<&str, NoteCell>> = BTreeMap::new();

    for g in gold {
        per_note
            .entry(g.cell())
            .or_default()
            .entry(g.note_id.as_str())
            .or_default()
            .gold
            .extend_from(&g.span_text);
    }
    for c in concepts {
        for cell in c.cells() {
            if gold_cells.contains(&cell) {
                per_note
                    .entry(cell)
                    .or_default()
                    .entry(c.note_id.as_str())
                    .or_default()
                    .predicted
                    .extend_from(&c.text);
            }
        }
    }

    per_note
        .into_iter()
        .map(|(cell, notes)| {
            let mut total = MatchCounts::default();
            let mut per_note_prf = Vec::with_capacity(notes.len());
            for nc in notes.values() {
                let counts = count_matches(&nc.gold, &nc.predicted);
                total += counts;
                per_note_prf.push(compute_prf(counts));
            }
            let prf = match pooling {
                Pooling::Micro => compute_prf(total),
                Pooling::Macro => mean_prf(&per_note_prf),
            };
            (
                cell,
                NerCell {
                    prf,
                    counts: total,
                    notes: notes.len(),
                },
            )
        })
        .collect()
}

pub fn evaluate_ner(
    gold: &[GoldAnnotation],
    concepts: &[SubtypedConcept],
    pooling: Pooling,
) -> BTreeMap<Cell, Prf> {
    evaluate_ner_detailed(gold, concepts, pooling)
        .into_iter()
        .map(|(cell, r)| (cell, r.prf))
        .collect()
}

/// Component-wise arithmetic mean. Empty input gives the empty-vs-empty score.
pub fn mean_prf(values: &[Prf]) -> Prf {
    if values.is_empty() {
        return Prf::PERFECT;
    }
    let n = values.len() as f64;
    Prf {
        precision: values.iter().map(|p| p.precision).sum::<f64>() / n,
        recall: values.iter().map(|p| p.recall).sum::<f64>() / n,
        f1: values.iter().map(|p| p.f1).sum::<f64>() / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Category, Subtype};
    use proptest::prelude::*;

    fn bag(ws: &[&str]) -> WordBag {
        ws.iter().copied().collect()
    }

    #[test]
    fn tokenization() {
        assert_eq!(tokenize_words("54-year-old"), bag(&["54", "year", "old"]));
        assert!(tokenize_words("").is_empty());
        assert_eq!(tokenize_words("White"), tokenize_words("white"));
        assert_eq!(
            tokenize_words("former smoker (quit greater than 1 year ago)."),
            bag(&["former", "smoker", "quit", "greater", "than", "1", "year", "ago"])
        );
        assert_eq!(tokenize_words("smoker smoker"), bag(&["smoker"]));
    }

    #[test]
    fn counting() {
        let c = count_matches(&bag(&["never", "smoker"]), &bag(&["never", "smoker"]));
        assert_eq!(
            c,
            MatchCounts {
                tp: 2,
                fp: 0,
                fn_: 0
            }
        );
        let c = count_matches(&bag(&["female"]), &bag(&["woman"]));
        assert_eq!(
            c,
            MatchCounts {
                tp: 0,
                fp: 1,
                fn_: 1
            }
        );
        let c = count_matches(&bag(&["a", "b", "c"]), &bag(&["b", "c", "d"]));
        assert_eq!(
            c,
            MatchCounts {
                tp: 2,
                fp: 1,
                fn_: 1
            }
        );
    }

    #[test]
    fn prf_values() {
        let p = compute_prf(MatchCounts {
            tp: 3,
            fp: 1,
            fn_: 1,
        });
        assert_eq!((p.precision, p.recall, p.f1), (0.75, 0.75, 0.75));
        assert_eq!(compute_prf(MatchCounts::default()), Prf::PERFECT);
        let p = compute_prf(MatchCounts {
            tp: 0,
            fp: 2,
            fn_: 3,
        });
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
        let p = compute_prf(MatchCounts {
            tp: 0,
            fp: 0,
            fn_: 3,
        });
        assert_eq!((p.precision, p.recall), (0.0, 0.0));
        let p = compute_prf(MatchCounts {
            tp: 0,
            fp: 2,
            fn_: 0,
        });
        assert_eq!((p.precision, p.recall), (0.0, 0.0));
        let p = compute_prf(MatchCounts {
            tp: 1,
            fp: 0,
            fn_: 3,
        });
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 0.25, 0.4));
    }

    #[test]
    fn pooling_parse() {
        assert_eq!("MICRO".parse::<Pooling>().unwrap(), Pooling::Micro);
        assert_eq!("macro".parse::<Pooling>().unwrap(), Pooling::Macro);
        assert!("weighted".parse::<Pooling>().is_err());
    }

    fn gold(note: &str, sub: Subtype, text: &str) -> GoldAnnotation {
        GoldAnnotation::new(note, sub.parent(), Some(sub), text).unwrap()
    }

    fn concept(note: &str, subs: &[Subtype], text: &str) -> SubtypedConcept {
        SubtypedConcept {
            note_id: note.into(),
            category: subs.first().map_or(Category::SocialHistory, |s| s.parent()),
            subtypes: subs.iter().copied().collect(),
            text: text.into(),
        }
    }

    #[test]
    fn micro_versus_macro() {
        use Subtype::TobaccoUse as T;
        let g = vec![gold("a", T, "never smoker"), gold("b", T, "former smoker")];
        // note a perfect; note b half right with one spurious word
        let c = vec![
            concept("a", &[T], "never smoker"),
            concept("b", &[T], "current smoker"),
        ];
        let cell = Cell::of_subtype(T);
        let micro = evaluate_ner_detailed(&g, &c, Pooling::Micro)[&cell];
        assert_eq!(
            micro.counts,
            MatchCounts {
                tp: 3,
                fp: 1,
                fn_: 1
            }
        );
        assert_eq!(micro.prf.f1, 0.75);
        let macro_ = evaluate_ner(&g, &c, Pooling::Macro)[&cell];
        assert_eq!(macro_.precision, 0.75);
        assert_eq!(macro_.recall, 0.75);
    }

    #[test]
    fn predictions_outside_gold_cells_are_ignored() {
        let g = vec![gold("a", Subtype::TobaccoUse, "never smoker")];
        let c = vec![
            concept("a", &[Subtype::TobaccoUse], "never smoker"),
            concept("a", &[Subtype::AlcoholUse], "drinks wine"),
            concept("a", &[], "enjoys gardening"),
        ];
        let res = evaluate_ner(&g, &c, Pooling::Micro);
        assert_eq!(res.len(), 1);
        assert_eq!(res[&Cell::of_subtype(Subtype::TobaccoUse)], Prf::PERFECT);
    }

    #[test]
    fn spurious_note_counts_as_false_positive() {
        let g = vec![gold("a", Subtype::TobaccoUse, "never smoker")];
        let c = vec![
            concept("a", &[Subtype::TobaccoUse], "never smoker"),
            concept("b", &[Subtype::TobaccoUse], "smoker"),
        ];
        let r =
            evaluate_ner_detailed(&g, &c, Pooling::Micro)[&Cell::of_subtype(Subtype::TobaccoUse)];
        assert_eq!(
            r.counts,
            MatchCounts {
                tp: 2,
                fp: 1,
                fn_: 0
            }
        );
        assert_eq!(r.notes, 2);
    }

    fn arb_bag() -> impl Strategy<Value = WordBag> {
        proptest::collection::btree_set("[a-e]", 0..6).prop_map(WordBag)
    }

    proptest! {
        #[test]
        fn count_symmetry_and_totals(g in arb_bag(), p in arb_bag()) {
            let c = count_matches(&g, &p);
            let swapped = count_matches(&p, &g);
            prop_assert_eq!(c.tp, swapped.tp);
            prop_assert_eq!(c.fp, swapped.fn_);
            prop_assert_eq!(c.fn_, swapped.fp);
            prop_assert_eq!(c.tp + c.fn_, g.len() as u64);
            prop_assert_eq!(c.tp + c.fp, p.len() as u64);
        }

        #[test]
        fn prf_bounds(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50) {
            let p = compute_prf(MatchCounts { tp, fp, fn_ });
            for v in [p.precision, p.recall, p.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if p.precision + p.recall > 0.0 {
                let lo = p.precision.min(p.recall) - 1e-12;
                let hi = p.precision.max(p.recall) + 1e-12;
                prop_assert!(lo <= p.f1 && p.f1 <= hi);
            }
        }
    }
}
