//! Labeled prompt corpora in NDJSON form: one `{"text", "marker"}` per line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::update::UpdateMarker;
use crate::error::CorpusError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub text: String,
    pub marker: UpdateMarker,
}

const NAV_CORPUS: &str = include_str!("../../fixtures/nav_corpus.ndjson");
const DRIVING_CORPUS: &str = include_str!("../../fixtures/driving_corpus.ndjson");
const NAV_PARAPHRASES: &str = include_str!("../../fixtures/nav_paraphrases.ndjson");
const DRIVING_PARAPHRASES: &str = include_str!("../../fixtures/driving_paraphrases.ndjson");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinCorpus {
    Navigation,
    Driving,
}

impl BuiltinCorpus {
    pub fn training(self) -> Vec<TrainingExample> {
        let src = match self {
            Self::Navigation => NAV_CORPUS,
            Self::Driving => DRIVING_CORPUS,
        };
        parse_corpus(src).expect("shipped corpus is well formed")
    }

    /// Held-out sentences that never appear in the training corpus.
    pub fn paraphrases(self) -> Vec<TrainingExample> {
        let src = match self {
            Self::Navigation => NAV_PARAPHRASES,
            Self::Driving => DRIVING_PARAPHRASES,
        };
        parse_corpus(src).expect("shipped paraphrase fixture is well formed")
    }

    pub fn marker_len(self) -> usize {
        match self {
            Self::Navigation => 2,
            Self::Driving => 3,
        }
    }
}

/// Parse NDJSON; blank lines are skipped and every marker must share one length.
pub fn parse_corpus(src: &str) -> Result<Vec<TrainingExample>, CorpusError> {
    let mut out: Vec<TrainingExample> = Vec::new();
    for (i, line) in src.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let ex: TrainingExample = serde_json::from_str(line)
            .map_err(|e| CorpusError::Parse { line: line_no, message: e.to_string() })?;
        if ex.text.trim().is_empty() {
            return Err(CorpusError::Parse { line: line_no, message: "empty text".into() });
        }
        if let Some(first) = out.first() {
            if first.marker.len() != ex.marker.len() {
                return Err(CorpusError::MixedDimensions {
                    first: first.marker.len(),
                    other: ex.marker.len(),
                    line: line_no,
                });
            }
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<TrainingExample>, CorpusError> {
    parse_corpus(&std::fs::read_to_string(path)?)
}
