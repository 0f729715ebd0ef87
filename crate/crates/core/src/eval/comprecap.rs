//! Scene-graph coverage: object and pixel coverage, plus judge-rated
//! attribute and relation accuracy.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::mentions::{extract_mentions, ObjectVocabulary};
use super::EvalError;
use crate::prompt::PromptTemplates;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgObject {
    pub name: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
    pub area_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SgAttribute {
    pub object: String,
    pub attribute: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SgRelation {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneGraphAnnotation {
    pub objects: Vec<SgObject>,
    #[serde(default)]
    pub attributes: Vec<SgAttribute>,
    #[serde(default)]
    pub relations: Vec<SgRelation>,
}

impl SceneGraphAnnotation {
    pub fn validate(&self) -> Result<(), EvalError> {
        let names: BTreeSet<&str> = self.objects.iter().map(|o| o.name.as_str()).collect();
        if names.len() != self.objects.len() {
            return Err(EvalError::InvalidSceneGraph("duplicate object names".into()));
        }
        let mut total = 0.0;
        for o in &self.objects {
            if !(0.0..=1.0).contains(&o.area_fraction) {
                return Err(EvalError::InvalidSceneGraph(format!(
                    "area fraction of {:?} outside [0, 1]",
                    o.name
                )));
            }
            total += o.area_fraction;
        }
        if total > 1.0 + 1e-9 {
            return Err(EvalError::InvalidSceneGraph(format!(
                "area fractions sum to {total}"
            )));
        }
        let unknown = |n: &str| !names.contains(n);
        if let Some(a) = self.attributes.iter().find(|a| unknown(&a.object)) {
            return Err(EvalError::InvalidSceneGraph(format!(
                "attribute refers to unannotated object {:?}",
                a.object
            )));
        }
        if let Some(r) = self
            .relations
            .iter()
            .find(|r| unknown(&r.subject) || unknown(&r.object))
        {
            return Err(EvalError::InvalidSceneGraph(format!(
                "relation {:?} {:?} {:?} refers to an unannotated object",
                r.subject, r.predicate, r.object
            )));
        }
        Ok(())
    }

    /// The annotated objects as a mention vocabulary.
    pub fn vocabulary(&self) -> Result<ObjectVocabulary, EvalError> {
        ObjectVocabulary::new(
            self.objects
                .iter()
                .map(|o| (o.name.as_str(), o.synonyms.clone())),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub covered: BTreeSet<String>,
    pub object_coverage: f64,
    pub pixel_coverage: f64,
}

/// Objects of `sg` mentioned in `caption`, with object- and pixel-level
/// coverage.
pub fn object_coverage(caption: &str, sg: &SceneGraphAnnotation) -> Result<Coverage, EvalError> {
    if sg.objects.is_empty() {
        return Err(EvalError::EmptyAnnotation);
    }
    let vocab = sg.vocabulary()?;
    let covered = extract_mentions(caption, &vocab);
    let object_coverage = covered.len() as f64 / sg.objects.len() as f64;
    let pixel_coverage = pixel_coverage(&covered, sg)?;
    Ok(Coverage {
        covered,
        object_coverage,
        pixel_coverage,
    })
}

/// Area-weighted share of annotated objects that are in `covered`.
pub fn pixel_coverage(covered: &BTreeSet<String>, sg: &SceneGraphAnnotation) -> Result<f64, EvalError> {
    if sg.objects.is_empty() {
        return Err(EvalError::EmptyAnnotation);
    }
    let total: f64 = sg.objects.iter().map(|o| o.area_fraction).sum();
    if total <= 0.0 {
        return Err(EvalError::ZeroArea);
    }
    let hit: f64 = sg
        .objects
        .iter()
        .filter(|o| covered.contains(&o.name.to_lowercase()))
        .map(|o| o.area_fraction)
        .sum();
    Ok(hit / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactKind {
    Attribute,
    Relation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeTranscript {
    pub kind: FactKind,
    pub fact: String,
    pub prompt: String,
    pub response: String,
    pub rating: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttrRelScores {
    /// Mean attribute rating; absent when nothing was annotated or rated.
    pub attr_score: Option<f64>,
    pub rel_score: Option<f64>,
    pub scale_max: u32,
    pub unparseable: usize,
    pub transcripts: Vec<JudgeTranscript>,
}

/// First number in `text`, if it lies in `[0, scale_max]`.
pub fn parse_rating(text: &str, scale_max: u32) -> Option<f64> {
    let start = text.find(|c: char| c.is_ascii_digit())?;
    let rest = &text[start..];
    let end = rest
        .char_indices()
        .find(|&(i, c)| !(c.is_ascii_digit() || (c == '.' && i > 0)))
        .map_or(rest.len(), |(i, _)| i);
    let number = rest[..end].trim_end_matches('.');
    let value: f64 = number.parse().ok()?;
    let negative = text[..start].trim_end().ends_with('-');
    (!negative && value <= f64::from(scale_max)).then_some(value)
}

/// Asks `judge` to rate every annotated attribute and relation against the
/// caption on `[0, scale_max]`, averaging the parseable ratings per kind.
pub fn judge_attr_rel<E>(
    caption: &str,
    sg: &SceneGraphAnnotation,
    templates: &PromptTemplates,
    scale_max: u32,
    judge: &mut dyn FnMut(&str) -> Result<String, E>,
) -> Result<AttrRelScores, E>
where
    E: From<EvalError>,
{
    if scale_max == 0 {
        return Err(EvalError::InvalidScale.into());
    }
    let facts = sg
        .attributes
        .iter()
        .map(|a| (FactKind::Attribute, format!("the {} is {}", a.object, a.attribute)))
        .chain(sg.relations.iter().map(|r| {
            (
                FactKind::Relation,
                format!("{} {} {}", r.subject, r.predicate, r.object),
            )
        }));

    let mut transcripts = Vec::new();
    let mut unparseable = 0;
    for (kind, fact) in facts {
        let prompt = templates.render_judge_rating(caption, &fact, scale_max);
        let response = judge(&prompt)?;
        let rating = parse_rating(&response, scale_max);
        if rating.is_none() {
            unparseable += 1;
        }
        transcripts.push(JudgeTranscript {
            kind,
            fact,
            prompt,
            response,
            rating,
        });
    }
    let mean = |kind: FactKind| {
        let rated: Vec<f64> = transcripts
            .iter()
            .filter(|t| t.kind == kind)
            .filter_map(|t| t.rating)
            .collect();
        (!rated.is_empty()).then(|| rated.iter().sum::<f64>() / rated.len() as f64)
    };
    Ok(AttrRelScores {
        attr_score: mean(FactKind::Attribute),
        rel_score: mean(FactKind::Relation),
        scale_max,
        unparseable,
        transcripts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sg() -> SceneGraphAnnotation {
        let obj = |name: &str, area: f64| SgObject {
            name: name.into(),
            synonyms: vec![],
            area_fraction: area,
        };
        SceneGraphAnnotation {
            objects: vec![obj("cat", 0.3), obj("dog", 0.2), obj("sky", 0.5)],
            attributes: vec![
                SgAttribute {
                    object: "cat".into(),
                    attribute: "black".into(),
                },
                SgAttribute {
                    object: "dog".into(),
                    attribute: "small".into(),
                },
            ],
            relations: vec![
                SgRelation {
                    subject: "cat".into(),
                    predicate: "next to".into(),
                    object: "dog".into(),
                },
                SgRelation {
                    subject: "dog".into(),
                    predicate: "under".into(),
                    object: "sky".into(),
                },
            ],
        }
    }

    #[test]
    fn pixel_coverage_example() {
        let covered: BTreeSet<String> = ["cat", "sky"].iter().map(|s| s.to_string()).collect();
        assert!((pixel_coverage(&covered, &sg()).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn coverage_extremes() {
        let g = sg();
        let all = object_coverage("A cat, a dog, the sky.", &g).unwrap();
        assert_eq!(all.object_coverage, 1.0);
        assert!((all.pixel_coverage - 1.0).abs() < 1e-12);
        let none = object_coverage("A tree.", &g).unwrap();
        assert_eq!(none.object_coverage, 0.0);
        assert_eq!(none.pixel_coverage, 0.0);
        assert_eq!(
            object_coverage("x", &SceneGraphAnnotation::default()),
            Err(EvalError::EmptyAnnotation)
        );
    }

    #[test]
    fn validation() {
        assert!(sg().validate().is_ok());
        let mut g = sg();
        g.objects[0].area_fraction = 0.9;
        assert!(g.validate().is_err());
        let mut g = sg();
        g.relations[0].object = "tree".into();
        assert!(g.validate().is_err());
    }

    #[test]
    fn ratings() {
        assert_eq!(parse_rating("3", 3), Some(3.0));
        assert_eq!(parse_rating("Score: 2.5.", 3), Some(2.5));
        assert_eq!(parse_rating("4", 3), None);
        assert_eq!(parse_rating("-1", 3), None);
        assert_eq!(parse_rating("none", 3), None);
    }

    #[test]
    fn judge_max_and_alternating() {
        let t = PromptTemplates::default();
        let mut always_max = |_: &str| Ok::<_, EvalError>("3".to_string());
        let s = judge_attr_rel("caption", &sg(), &t, 3, &mut always_max).unwrap();
        assert_eq!(s.attr_score, Some(3.0));
        assert_eq!(s.rel_score, Some(3.0));
        assert_eq!(s.transcripts.len(), 4);

        let mut n = 0;
        let mut alternating = |_: &str| {
            n += 1;
            Ok::<_, EvalError>(if n % 2 == 1 { "0" } else { "3" }.to_string())
        };
        let s = judge_attr_rel("caption", &sg(), &t, 3, &mut alternating).unwrap();
        assert_eq!(s.attr_score, Some(1.5));
        assert_eq!(s.rel_score, Some(1.5));
    }

    #[test]
    fn judge_absent_and_unparseable() {
        let t = PromptTemplates::default();
        let mut g = sg();
        g.attributes.clear();
        let mut judge = |p: &str| {
            Ok::<_, EvalError>(if p.contains("under") { "dunno" } else { "2" }.to_string())
        };
        let s = judge_attr_rel("c", &g, &t, 3, &mut judge).unwrap();
        assert_eq!(s.attr_score, None);
        assert_eq!(s.rel_score, Some(2.0));
        assert_eq!(s.unparseable, 1);
    }
}
