//! Accuracy of judge answers against gold QA labels.

use serde::{Deserialize, Serialize};

use super::report::{EvalReport, ItemScore};
use super::EvalError;
use crate::answer::QaAnswer;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    #[serde(default)]
    pub id: Option<String>,
    pub question: String,
    pub gold: QaAnswer,
    #[serde(default)]
    pub category: Option<String>,
}

/// Exact-match accuracy, overall and per category. `n/a` is correct only
/// when the gold answer is `n/a`.
pub fn score_qa(predictions: &[QaAnswer], items: &[QaItem]) -> Result<EvalReport, EvalError> {
    if predictions.len() != items.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            items: items.len(),
        });
    }
    let scores = items
        .iter()
        .zip(predictions)
        .enumerate()
        .map(|(i, (item, pred))| ItemScore {
            id: item.id.clone().unwrap_or_else(|| format!("q{:04}", i + 1)),
            category: item.category.clone(),
            scores: [(
                "accuracy".to_string(),
                if *pred == item.gold { 1.0 } else { 0.0 },
            )]
            .into(),
        })
        .collect();
    Ok(EvalReport::from_items("qa", "accuracy", scores))
}
