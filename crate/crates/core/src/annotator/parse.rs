//! Extraction of "Action <i>: <score>" lines from free-form model output.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no \"Action <i>: <score>\" entries found")]
    NoScores,
    #[error("missing score for action {0}")]
    MissingIndex(usize),
    #[error("action {index} scored twice with different values ({first} and {second})")]
    ConflictingDuplicate { index: usize, first: String, second: String },
    #[error("score {score} for action {index} is outside 0..={max}")]
    OutOfRange { index: usize, score: String, max: u32 },
    #[error("score {score} for action {index} is not an integer")]
    NotInteger { index: usize, score: String },
    #[error("expected {expected} scores, found an entry for action {index}")]
    UnexpectedIndex { expected: usize, index: usize },
}

/// One entry: "Action", the index, a separator, then the score. Tolerates
/// markdown emphasis, quoted keys, a parenthesised action name, table
/// pipes, arrows, "gets a score of" phrasing and a trailing "/10" or
/// "out of 10".
static ENTRY: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r#"(?ix)
        (?: ^ | [^a-z0-9] ) action [\s\#]* (\d+) \s* [*_`"']* \s*
        (?: \( [^)\n]* \) \s* )?
        [*_`"']* \s*
        (?: [:=|] | -> | → | – | — | - | (?: gets | receives | earns ) \s+ (?: a \s+ )? (?: score \s+ of )? )
        \s* [*_`]* \s*
        (?: score \s* [:=]? \s* )?
        (-?\d+(?:\.\d+)?)
        "#,
    )
    .expect("entry regex compiles")
});

/// Extracts exactly `n` scores keyed by action index. Lines may appear in
/// any order and be wrapped in prose; an index repeated with the same
/// score is accepted, anything ambiguous is an error.
pub fn parse_scores(text: &str, n: usize, scale_max: u32) -> Result<Vec<u32>, ParseError> {
    let mut found: BTreeMap<usize, (u32, String)> = BTreeMap::new();
    for cap in ENTRY.captures_iter(text) {
        let raw_index = &cap[1];
        let raw_score = cap[2].to_string();
        let index: usize = raw_index.parse().unwrap_or(usize::MAX);
        if index >= n {
            return Err(ParseError::UnexpectedIndex { expected: n, index });
        }
        let value: f64 = raw_score.parse().expect("regex admits only numbers");
        if value.fract() != 0.0 {
            return Err(ParseError::NotInteger { index, score: raw_score });
        }
        if value < 0.0 || value > scale_max as f64 {
            return Err(ParseError::OutOfRange { index, score: raw_score, max: scale_max });
        }
        let score = value as u32;
        match found.get(&index) {
            Some((prev, prev_raw)) if *prev != score => {
                return Err(ParseError::ConflictingDuplicate {
                    index,
                    first: prev_raw.clone(),
                    second: raw_score,
                });
            }
            Some(_) => {}
            None => {
                found.insert(index, (score, raw_score));
            }
        }
    }
    if found.is_empty() {
        return Err(ParseError::NoScores);
    }
    (0..n).map(|i| found.get(&i).map(|(s, _)| *s).ok_or(ParseError::MissingIndex(i))).collect()
}

/// Canonical rendering of a score list in the requested grammar.
pub fn format_scores(scores: &[u32]) -> String {
    scores
        .iter()
        .enumerate()
        .map(|(i, s)| format!("Action {i}: {s}"))
        .collect::<Vec<_>>()
        .join("\n")
}
