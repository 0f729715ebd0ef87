//! Caption scoring: QA-judge accuracy, object hallucination (CHAIR/Cover),
//! scene-graph coverage and element-set matching.

pub mod amber;
pub mod capture;
pub mod comprecap;
pub mod mentions;
pub mod qa;
pub mod report;

pub use amber::{chair_cover, ChairCover};
pub use capture::{capture_match, CaptureConfig, CaptureScore, CaptureWeights, ElementSet, TypeScore};
pub use comprecap::{
    judge_attr_rel, object_coverage, pixel_coverage, AttrRelScores, SceneGraphAnnotation, SgAttribute, SgObject, SgRelation,
};
pub use mentions::{extract_mentions, ObjectVocabulary};
pub use qa::{score_qa, QaItem};
pub use report::{EvalReport, ItemScore};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("{predictions} predictions for {items} items")]
    LengthMismatch { predictions: usize, items: usize },
    #[error("scene graph has no annotated objects")]
    EmptyAnnotation,
    #[error("scene graph objects have zero total area")]
    ZeroArea,
    #[error("invalid scene graph: {0}")]
    InvalidSceneGraph(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("weights must be nonnegative and sum to a positive value")]
    InvalidWeights,
    #[error("soft threshold must lie in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("scale_max must be positive")]
    InvalidScale,
}
