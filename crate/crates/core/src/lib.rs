//! Extraction of demographics, social history and family history from
//! clinical notes with a zero-shot chat model, plus lexicon post-processing
//! and lexical/semantic scoring against gold annotations.

pub mod cli;
pub mod corpus;
pub mod eval_ner;
pub mod eval_semantic;
pub mod extraction;
pub mod postprocess;
pub mod report;

pub use corpus::{Category, Cell, ClinicalNote, GoldAnnotation, Subtype};
pub use extraction::{parse_output, ExtractionRecord};
pub use postprocess::{categorize, segment, LexiconSet, SubtypedConcept};
