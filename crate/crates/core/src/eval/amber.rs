//! Object hallucination (CHAIR) and coverage (Cover) of a caption.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChairCover {
    /// Fraction of mentioned objects that are not annotated.
    pub chair: f64,
    /// Fraction of annotated objects that are mentioned.
    pub cover: f64,
    /// `cover - chair`.
    pub over: f64,
}

/// CHAIR is 0 when nothing is mentioned; Cover is 0 when nothing is
/// annotated.
pub fn chair_cover(mentioned: &BTreeSet<String>, annotated: &BTreeSet<String>) -> ChairCover {
    let hallucinated = mentioned.difference(annotated).count();
    let hit = mentioned.intersection(annotated).count();
    let chair = if mentioned.is_empty() {
        0.0
    } else {
        hallucinated as f64 / mentioned.len() as f64
    };
    let cover = if annotated.is_empty() {
        0.0
    } else {
        hit as f64 / annotated.len() as f64
    };
    ChairCover {
        chair,
        cover,
        over: cover - chair,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn worked_example() {
        let r = chair_cover(&set(&["cat", "dog", "car"]), &set(&["cat", "dog"]));
        assert!((r.chair - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.cover, 1.0);
        assert!((r.over - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identity_and_empty() {
        let s = set(&["a", "b"]);
        assert_eq!(
            chair_cover(&s, &s),
            ChairCover {
                chair: 0.0,
                cover: 1.0,
                over: 1.0
            }
        );
        assert_eq!(
            chair_cover(&BTreeSet::new(), &s),
            ChairCover {
                chair: 0.0,
                cover: 0.0,
                over: 0.0
            }
        );
    }
}
