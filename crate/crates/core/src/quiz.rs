//! Multiple-choice quiz items: validation and grading.

use serde::{Deserialize, Serialize};

use crate::text::normalize_option;

pub const MIN_OPTIONS: usize = 3;
pub const MAX_OPTIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuizItem {
    pub stem: String,
    pub options: Vec<String>,
    pub correct_index: i64,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuizViolation {
    OptionCount {
        count: usize,
    },
    CorrectIndexOutOfRange {
        index: i64,
        options: usize,
    },
    EmptyStem,
    EmptyOption {
        index: usize,
    },
    EmptyExplanation,
    /// Two distractors normalize to the same text.
    DuplicateOptions {
        first: usize,
        second: usize,
    },
    /// A distractor normalizes to the correct option's text.
    CorrectMatchesDistractor {
        distractor: usize,
    },
}

impl std::fmt::Display for QuizViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QuizViolation::OptionCount { count } => write!(
                f,
                "quiz item has {count} options, expected {MIN_OPTIONS}-{MAX_OPTIONS}"
            ),
            QuizViolation::CorrectIndexOutOfRange { index, options } => {
                write!(f, "correct_index {index} is outside 0..{options}")
            }
            QuizViolation::EmptyStem => write!(f, "quiz stem is empty"),
            QuizViolation::EmptyOption { index } => write!(f, "option {index} is empty"),
            QuizViolation::EmptyExplanation => write!(f, "explanation is empty"),
            QuizViolation::DuplicateOptions { first, second } => {
                write!(f, "options {first} and {second} are duplicates")
            }
            QuizViolation::CorrectMatchesDistractor { distractor } => write!(
                f,
                "distractor {distractor} is textually identical to the correct option"
            ),
        }
    }
}

/// Returns every violation of the item, or `Ok(())` for a well-formed item.
/// Duplicate detection compares options case-insensitively with whitespace
/// collapsed; empty options are reported once as empty, not as duplicates.
pub fn validate_quiz(item: &QuizItem) -> Result<(), Vec<QuizViolation>> {
    let mut violations = Vec::new();
    let n = item.options.len();
    if !(MIN_OPTIONS..=MAX_OPTIONS).contains(&n) {
        violations.push(QuizViolation::OptionCount { count: n });
    }
    let index_ok = item.correct_index >= 0 && (item.correct_index as usize) < n;
    if !index_ok {
        violations.push(QuizViolation::CorrectIndexOutOfRange {
            index: item.correct_index,
            options: n,
        });
    }
    if item.stem.trim().is_empty() {
        violations.push(QuizViolation::EmptyStem);
    }
    let normalized: Vec<String> = item.options.iter().map(|o| normalize_option(o)).collect();
    for (i, o) in normalized.iter().enumerate() {
        if o.is_empty() {
            violations.push(QuizViolation::EmptyOption { index: i });
        }
    }
    if item.explanation.trim().is_empty() {
        violations.push(QuizViolation::EmptyExplanation);
    }
    let correct = index_ok.then_some(item.correct_index as usize);
    for i in 0..n {
        for j in (i + 1)..n {
            if normalized[i].is_empty() || normalized[i] != normalized[j] {
                continue;
            }
            match correct {
                Some(c) if c == i => {
                    violations.push(QuizViolation::CorrectMatchesDistractor { distractor: j })
                }
                Some(c) if c == j => {
                    violations.push(QuizViolation::CorrectMatchesDistractor { distractor: i })
                }
                _ => violations.push(QuizViolation::DuplicateOptions {
                    first: i,
                    second: j,
                }),
            }
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemFeedback {
    pub chosen: usize,
    pub correct_index: usize,
    pub correct: bool,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuizGrade {
    /// Fraction of items answered correctly, in `[0, 1]`.
    pub score: f64,
    pub items: Vec<ItemFeedback>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("expected {expected} answers, got {got}")]
pub struct AnswerCountMismatch {
    pub expected: usize,
    pub got: usize,
}

pub fn grade(quiz: &[QuizItem], answers: &[usize]) -> Result<QuizGrade, AnswerCountMismatch> {
    if quiz.len() != answers.len() {
        return Err(AnswerCountMismatch {
            expected: quiz.len(),
            got: answers.len(),
        });
    }
    let items: Vec<ItemFeedback> = quiz
        .iter()
        .zip(answers)
        .map(|(item, &chosen)| {
            let correct_index = item.correct_index.max(0) as usize;
            ItemFeedback {
                chosen,
                correct_index,
                correct: chosen == correct_index,
                explanation: item.explanation.clone(),
            }
        })
        .collect();
    let right = items.iter().filter(|i| i.correct).count();
    let score = if items.is_empty() {
        0.0
    } else {
        right as f64 / items.len() as f64
    };
    Ok(QuizGrade { score, items })
}
