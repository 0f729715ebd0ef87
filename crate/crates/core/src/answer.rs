//! The three-way answer set used by caption QA judging.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QaAnswer {
    #[serde(rename = "yes")]
    Yes,
    #[serde(rename = "no")]
    No,
    #[serde(rename = "n/a")]
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("judge answer {raw:?} is not one of yes, no, n/a")]
pub struct UnparseableAnswer {
    pub raw: String,
}

impl QaAnswer {
    pub const ALL: [QaAnswer; 3] = [QaAnswer::Yes, QaAnswer::No, QaAnswer::NotApplicable];

    pub fn as_str(self) -> &'static str {
        match self {
            QaAnswer::Yes => "yes",
            QaAnswer::No => "no",
            QaAnswer::NotApplicable => "n/a",
        }
    }

    /// Normalizes raw judge text: lowercase, trim, drop leading punctuation and
    /// trailing periods, then match against the accepted spellings.
    pub fn normalize(raw: &str) -> Result<Self, UnparseableAnswer> {
        let lowered = raw.trim().to_lowercase();
        let stripped = lowered
            .trim_start_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
            .trim_end_matches(|c: char| c == '.' || c.is_whitespace());
        match stripped {
            "yes" => Ok(QaAnswer::Yes),
            "no" => Ok(QaAnswer::No),
            "n/a" | "na" | "not answerable" => Ok(QaAnswer::NotApplicable),
            _ => Err(UnparseableAnswer {
                raw: raw.to_string(),
            }),
        }
    }
}

impl FromStr for QaAnswer {
    type Err = UnparseableAnswer;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        QaAnswer::normalize(s)
    }
}

impl fmt::Display for QaAnswer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_examples() {
        assert_eq!(QaAnswer::normalize("Yes."), Ok(QaAnswer::Yes));
        assert_eq!(QaAnswer::normalize("N/A"), Ok(QaAnswer::NotApplicable));
        assert_eq!(QaAnswer::normalize("  no  "), Ok(QaAnswer::No));
        assert_eq!(QaAnswer::normalize("- NA"), Ok(QaAnswer::NotApplicable));
        assert_eq!(
            QaAnswer::normalize("Not answerable."),
            Ok(QaAnswer::NotApplicable)
        );
        assert!(QaAnswer::normalize("maybe").is_err());
        assert!(QaAnswer::normalize("").is_err());
        assert!(QaAnswer::normalize("yes, it is").is_err());
    }

    #[test]
    fn serde_uses_wire_tokens() {
        let s = serde_json::to_string(&QaAnswer::ALL).unwrap();
        assert_eq!(s, r#"["yes","no","n/a"]"#);
        let back: Vec<QaAnswer> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, QaAnswer::ALL);
    }
}
