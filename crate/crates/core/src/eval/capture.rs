//! Element-set matching between candidate and reference captions.
//!
//! Elements of each type (objects, attributes, relations) are paired
//! injectively. A pair is admissible at one of three tiers: exact string
//! equality, synonym equivalence, or soft similarity (character-trigram Dice
//! at or above a threshold). The assignment maximizes the number of matched
//! elements, then the number of exact matches, then the number of synonym
//! matches.

use std::collections::BTreeSet;

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::{Deserialize, Serialize};

use super::mentions::ObjectVocabulary;
use super::EvalError;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementSet {
    #[serde(default)]
    pub objects: Vec<String>,
    #[serde(default)]
    pub attributes: Vec<String>,
    /// `subject|predicate|object`
    #[serde(default)]
    pub relations: Vec<String>,
}

fn normalize_list(items: &[String]) -> Vec<String> {
    items
        .iter()
        .map(|s| {
            s.split('|')
                .map(|part| part.split_whitespace().collect::<Vec<_>>().join(" "))
                .collect::<Vec<_>>()
                .join("|")
                .to_lowercase()
        })
        .filter(|s| !s.is_empty())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

impl ElementSet {
    /// Lowercased, whitespace-collapsed, deduplicated and sorted.
    pub fn normalized(&self) -> Self {
        Self {
            objects: normalize_list(&self.objects),
            attributes: normalize_list(&self.attributes),
            relations: normalize_list(&self.relations),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptureWeights {
    pub objects: f64,
    pub attributes: f64,
    pub relations: f64,
}

impl Default for CaptureWeights {
    fn default() -> Self {
        Self {
            objects: 1.0,
            attributes: 1.0,
            relations: 1.0,
        }
    }
}

pub const DEFAULT_SOFT_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptureConfig {
    pub synonyms: ObjectVocabulary,
    pub soft_threshold: f64,
    pub weights: CaptureWeights,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        Self {
            synonyms: ObjectVocabulary::default(),
            soft_threshold: DEFAULT_SOFT_THRESHOLD,
            weights: CaptureWeights::default(),
        }
    }
}

impl CaptureConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let w = self.weights;
        let ws = [w.objects, w.attributes, w.relations];
        if ws.iter().any(|v| !v.is_finite() || *v < 0.0) || ws.iter().sum::<f64>() <= 0.0 {
            return Err(EvalError::InvalidWeights);
        }
        if !(self.soft_threshold > 0.0 && self.soft_threshold <= 1.0) {
            return Err(EvalError::InvalidThreshold(self.soft_threshold));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchTier {
    Soft = 1,
    Synonym = 2,
    Exact = 3,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub candidate: String,
    pub reference: String,
    pub tier: MatchTier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub candidates: usize,
    pub references: usize,
    pub exact: usize,
    pub synonym: usize,
    pub soft: usize,
    pub pairs: Vec<MatchedPair>,
}

impl TypeScore {
    pub fn matched(&self) -> usize {
        self.exact + self.synonym + self.soft
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureScore {
    pub objects: TypeScore,
    pub attributes: TypeScore,
    pub relations: TypeScore,
    /// `sum(w_t * F1_t) / sum(w_t)`
    pub weighted: f64,
}

/// Character trigrams of `s` padded with one space on each side.
pub fn trigrams(s: &str) -> BTreeSet<String> {
    let padded: Vec<char> = std::iter::once(' ')
        .chain(s.chars())
        .chain(std::iter::once(' '))
        .collect();
    padded.windows(3).map(|w| w.iter().collect()).collect()
}

/// Dice coefficient of the trigram sets of `a` and `b`.
pub fn trigram_dice(a: &str, b: &str) -> f64 {
    let ta = trigrams(a);
    let tb = trigrams(b);
    if ta.is_empty() || tb.is_empty() {
        return if a == b { 1.0 } else { 0.0 };
    }
    let common = ta.intersection(&tb).count();
    2.0 * common as f64 / (ta.len() + tb.len()) as f64
}

/// Element strings are synonym-equivalent when they have the same number of
/// `|`-separated parts and each pair of parts is equal or listed together in
/// the vocabulary.
pub fn synonym_equivalent(a: &str, b: &str, vocab: &ObjectVocabulary) -> bool {
    let pa: Vec<&str> = a.split('|').collect();
    let pb: Vec<&str> = b.split('|').collect();
    pa.len() == pb.len()
        && pa
            .iter()
            .zip(&pb)
            .all(|(x, y)| x == y || vocab.are_synonyms(x, y))
}

/// Strongest admissible tier for a candidate/reference pair.
pub fn match_tier(candidate: &str, reference: &str, config: &CaptureConfig) -> Option<MatchTier> {
    if candidate == reference {
        Some(MatchTier::Exact)
    } else if synonym_equivalent(candidate, reference, &config.synonyms) {
        Some(MatchTier::Synonym)
    } else if trigram_dice(candidate, reference) >= config.soft_threshold {
        Some(MatchTier::Soft)
    } else {
        None
    }
}

fn assign(candidates: &[String], references: &[String], config: &CaptureConfig) -> Vec<MatchedPair> {
    let n = candidates.len().min(references.len());
    if n == 0 {
        return Vec::new();
    }
    // lexicographic objective: matched count, then exact, then synonym
    let unit = n as i64 + 1;
    let weight = |tier: Option<MatchTier>| match tier {
        None => 0,
        Some(MatchTier::Soft) => unit * unit,
        Some(MatchTier::Synonym) => unit * unit + 1,
        Some(MatchTier::Exact) => unit * unit + unit,
    };
    let tiers: Vec<Vec<Option<MatchTier>>> = candidates
        .iter()
        .map(|c| references.iter().map(|r| match_tier(c, r, config)).collect())
        .collect();

    let transpose = candidates.len() > references.len();
    let (rows, cols) = if transpose {
        (references.len(), candidates.len())
    } else {
        (candidates.len(), references.len())
    };
    let tier_at = |row: usize, col: usize| {
        if transpose {
            tiers[col][row]
        } else {
            tiers[row][col]
        }
    };
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            data.push(weight(tier_at(r, c)));
        }
    }
    let matrix = Matrix::from_vec(rows, cols, data).expect("matrix dimensions");
    let (_, assignment) = kuhn_munkres(&matrix);

    let mut pairs: Vec<MatchedPair> = assignment
        .into_iter()
        .enumerate()
        .filter_map(|(row, col)| {
            let tier = tier_at(row, col)?;
            let (ci, ri) = if transpose { (col, row) } else { (row, col) };
            Some(MatchedPair {
                candidate: candidates[ci].clone(),
                reference: references[ri].clone(),
                tier,
            })
        })
        .collect();
    pairs.sort_by(|a, b| a.candidate.cmp(&b.candidate));
    pairs
}

fn prf(matched: usize, candidates: usize, references: usize) -> (f64, f64, f64) {
    if candidates == 0 && references == 0 {
        return (1.0, 1.0, 1.0);
    }
    let p = if candidates == 0 {
        0.0
    } else {
        matched as f64 / candidates as f64
    };
    let r = if references == 0 {
        0.0
    } else {
        matched as f64 / references as f64
    };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

fn score_type(candidates: &[String], references: &[String], config: &CaptureConfig) -> TypeScore {
    let pairs = assign(candidates, references, config);
    let count = |t: MatchTier| pairs.iter().filter(|p| p.tier == t).count();
    let (exact, synonym, soft) = (
        count(MatchTier::Exact),
        count(MatchTier::Synonym),
        count(MatchTier::Soft),
    );
    let (precision, recall, f1) = prf(pairs.len(), candidates.len(), references.len());
    TypeScore {
        precision,
        recall,
        f1,
        candidates: candidates.len(),
        references: references.len(),
        exact,
        synonym,
        soft,
        pairs,
    }
}

/// Per-type precision/recall/F1 and the weighted F1 score.
///
/// When both sides of a type are empty the type scores 1.0.
pub fn capture_match(
    candidate: &ElementSet,
    reference: &ElementSet,
    config: &CaptureConfig,
) -> Result<CaptureScore, EvalError> {
    config.validate()?;
    let cand = candidate.normalized();
    let refs = reference.normalized();
    let objects = score_type(&cand.objects, &refs.objects, config);
    let attributes = score_type(&cand.attributes, &refs.attributes, config);
    let relations = score_type(&cand.relations, &refs.relations, config);
    let w = config.weights;
    let weighted = (w.objects * objects.f1 + w.attributes * attributes.f1 + w.relations * relations.f1)
        / (w.objects + w.attributes + w.relations);
    Ok(CaptureScore {
        objects,
        attributes,
        relations,
        weighted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn es(objects: &[&str]) -> ElementSet {
        ElementSet {
            objects: objects.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn exact_only_example() {
        let cfg = CaptureConfig {
            soft_threshold: 1.0,
            ..Default::default()
        };
        let s = capture_match(&es(&["cat", "mat"]), &es(&["cat", "dog"]), &cfg).unwrap();
        assert_eq!(s.objects.precision, 0.5);
        assert_eq!(s.objects.recall, 0.5);
        assert_eq!(s.objects.f1, 0.5);
        assert_eq!(s.objects.exact, 1);
    }

    #[test]
    fn identity_and_disjoint() {
        let full = ElementSet {
            objects: vec!["cat".into(), "mat".into()],
            attributes: vec!["cat|black".into()],
            relations: vec!["cat|on|mat".into()],
        };
        let s = capture_match(&full, &full, &CaptureConfig::default()).unwrap();
        assert_eq!(
            (s.objects.f1, s.attributes.f1, s.relations.f1, s.weighted),
            (1.0, 1.0, 1.0, 1.0)
        );
        let cfg = CaptureConfig {
            soft_threshold: 1.0,
            ..Default::default()
        };
        let s = capture_match(&es(&["car", "tree"]), &es(&["dog", "sky"]), &cfg).unwrap();
        assert_eq!(s.objects.f1, 0.0);
    }

    #[test]
    fn synonym_and_soft_tiers() {
        let cfg = CaptureConfig {
            synonyms: ObjectVocabulary::new([("couch", vec!["sofa"])]).unwrap(),
            soft_threshold: 0.6,
            ..Default::default()
        };
        let s = capture_match(
            &ElementSet {
                objects: vec!["sofa".into(), "red cars".into()],
                relations: vec!["cat|on|sofa".into()],
                ..Default::default()
            },
            &ElementSet {
                objects: vec!["couch".into(), "red car".into()],
                relations: vec!["cat|on|couch".into()],
                ..Default::default()
            },
            &cfg,
        )
        .unwrap();
        assert_eq!((s.objects.synonym, s.objects.soft), (1, 1));
        assert_eq!(s.relations.synonym, 1);
    }

    #[test]
    fn prefers_larger_matching() {
        // "ab" matches "ab" exactly and "abx" softly; "abx" is the only
        // partner for "abxy". A count-maximal assignment must use both.
        let cfg = CaptureConfig {
            soft_threshold: 0.4,
            ..Default::default()
        };
        let s = capture_match(&es(&["ab", "abxy"]), &es(&["ab", "abx"]), &cfg).unwrap();
        assert_eq!(s.objects.matched(), 2);
        assert_eq!(s.objects.exact, 1);
    }

    #[test]
    fn weights_validation() {
        let mut cfg = CaptureConfig::default();
        cfg.weights = CaptureWeights {
            objects: 0.0,
            attributes: 0.0,
            relations: 0.0,
        };
        assert_eq!(
            capture_match(&es(&[]), &es(&[]), &cfg),
            Err(EvalError::InvalidWeights)
        );
        cfg.weights.objects = -1.0;
        cfg.weights.relations = 2.0;
        assert!(capture_match(&es(&[]), &es(&[]), &cfg).is_err());
        let cfg = CaptureConfig {
            soft_threshold: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            capture_match(&es(&[]), &es(&[]), &cfg),
            Err(EvalError::InvalidThreshold(_))
        ));
    }

    #[test]
    fn weighted_score() {
        let cfg = CaptureConfig {
            weights: CaptureWeights {
                objects: 2.0,
                attributes: 1.0,
                relations: 1.0,
            },
            soft_threshold: 1.0,
            ..Default::default()
        };
        let cand = ElementSet {
            objects: vec!["cat".into()],
            attributes: vec!["cat|red".into()],
            relations: vec![],
        };
        let reference = ElementSet {
            objects: vec!["cat".into()],
            attributes: vec!["cat|blue".into()],
            relations: vec![],
        };
        let s = capture_match(&cand, &reference, &cfg).unwrap();
        // objects 1.0 (w 2), attributes 0.0, relations empty on both sides 1.0
        assert!((s.weighted - 0.75).abs() < 1e-12);
    }

    #[test]
    fn dice_values() {
        assert_eq!(trigram_dice("cat", "cat"), 1.0);
        assert_eq!(trigram_dice("cat", "dog"), 0.0);
        // " cat " → {" ca","cat","at "}; " cats " → {" ca","cat","ats","ts "}
        assert!((trigram_dice("cat", "cats") - 4.0 / 7.0).abs() < 1e-12);
    }
}
