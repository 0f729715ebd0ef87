//! Reviser prompt rendering and parsing of the reviser's tagged output.
//!
//! The refinement prompt is assembled from four text resources:
//! an intro/task block, the comparison-guidelines block, the improvement
//! request (which carries the `{orig_caption}` and `{token_budget}` slots) and
//! the trailing analysis instruction. Guidelines and the analysis instruction
//! are toggled by [`PromptVariant`].

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const REVISED_OPEN: &str = "<revised caption>";
pub const REVISED_CLOSE: &str = "</revised caption>";
pub const ANALYSIS_OPEN: &str = "<analysis>";
pub const ANALYSIS_CLOSE: &str = "</analysis>";

const MARKERS: [(&str, Marker); 4] = [
    (REVISED_OPEN, Marker::RevisedOpen),
    (REVISED_CLOSE, Marker::RevisedClose),
    (ANALYSIS_OPEN, Marker::AnalysisOpen),
    (ANALYSIS_CLOSE, Marker::AnalysisClose),
];

pub const DEFAULT_TOKEN_BUDGET: u32 = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptVariant {
    pub include_tips: bool,
    pub require_analysis: bool,
    pub token_budget: u32,
}

impl Default for PromptVariant {
    fn default() -> Self {
        Self {
            include_tips: true,
            require_analysis: true,
            token_budget: DEFAULT_TOKEN_BUDGET,
        }
    }
}

impl PromptVariant {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.token_budget == 0 {
            return Err(PromptError::ZeroTokenBudget);
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("unknown initial prompt id {0} (expected 1, 2 or 3)")]
    UnknownPromptId(u8),
    #[error("token budget must be positive")]
    ZeroTokenBudget,
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("reviser output has no <revised caption> marker")]
    MissingCaptionMarker,
    #[error("reviser output has a <revised caption> marker but no caption text")]
    EmptyRevisedCaption,
}

/// Prompt text resources. `Default` yields the embedded templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub refine_intro: String,
    pub refine_guidelines: String,
    pub refine_request: String,
    pub refine_analysis: String,
    pub initial: [String; 3],
    pub judge_qa: String,
    pub judge_rating: String,
}

fn resource(text: &str) -> String {
    text.trim_end_matches(['\n', '\r']).to_string()
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            refine_intro: resource(include_str!("../templates/refine_intro.txt")),
            refine_guidelines: resource(include_str!("../templates/refine_guidelines.txt")),
            refine_request: resource(include_str!("../templates/refine_request.txt")),
            refine_analysis: resource(include_str!("../templates/refine_analysis.txt")),
            initial: [
                resource(include_str!("../templates/initial_1.txt")),
                resource(include_str!("../templates/initial_2.txt")),
                resource(include_str!("../templates/initial_3.txt")),
            ],
            judge_qa: resource(include_str!("../templates/judge_qa.txt")),
            judge_rating: resource(include_str!("../templates/judge_rating.txt")),
        }
    }
}

impl PromptTemplates {
    /// Embedded templates, with any of the known file names found in `dir`
    /// replacing their embedded counterpart.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut t = Self::default();
        let slots: [(&str, &mut String); 6] = [
            ("refine_intro.txt", &mut t.refine_intro),
            ("refine_guidelines.txt", &mut t.refine_guidelines),
            ("refine_request.txt", &mut t.refine_request),
            ("refine_analysis.txt", &mut t.refine_analysis),
            ("judge_qa.txt", &mut t.judge_qa),
            ("judge_rating.txt", &mut t.judge_rating),
        ];
        for (name, slot) in slots {
            if let Some(text) = read_optional(&dir.join(name))? {
                *slot = text;
            }
        }
        for (i, slot) in t.initial.iter_mut().enumerate() {
            if let Some(text) = read_optional(&dir.join(format!("initial_{}.txt", i + 1)))? {
                *slot = text;
            }
        }
        Ok(t)
    }

    pub fn render_refinement(&self, prev_caption: &str, variant: &PromptVariant) -> String {
        let mut out = String::with_capacity(4096);
        out.push_str(&self.refine_intro);
        out.push_str("\n\n");
        if variant.include_tips {
            out.push_str(&self.refine_guidelines);
            out.push_str("\n\n");
        }
        out.push_str(&self.refine_request);
        if variant.require_analysis {
            out.push(' ');
            out.push_str(&self.refine_analysis);
        }
        // budget first so a caption containing "{token_budget}" stays verbatim
        out.replace("{token_budget}", &variant.token_budget.to_string())
            .replace("{orig_caption}", prev_caption)
    }

    pub fn initial_prompt(&self, id: u8) -> Result<&str, PromptError> {
        match id {
            1..=3 => Ok(&self.initial[usize::from(id - 1)]),
            other => Err(PromptError::UnknownPromptId(other)),
        }
    }

    pub fn render_judge_qa(&self, caption: &str, question: &str) -> String {
        self.judge_qa
            .replace("{question}", question)
            .replace("{caption}", caption)
    }

    pub fn render_judge_rating(&self, caption: &str, fact: &str, scale_max: u32) -> String {
        self.judge_rating
            .replace("{scale_max}", &scale_max.to_string())
            .replace("{fact}", fact)
            .replace("{caption}", caption)
    }
}

fn read_optional(path: &Path) -> Result<Option<String>, PromptError> {
    match fs::read_to_string(path) {
        Ok(text) => Ok(Some(resource(&text))),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(source) => Err(PromptError::Io {
            path: path.display().to_string(),
            source,
        }),
    }
}

/// Renders the refinement prompt from the embedded templates.
pub fn render_refinement_prompt(prev_caption: &str, variant: &PromptVariant) -> String {
    PromptTemplates::default().render_refinement(prev_caption, variant)
}

/// One of the three initial-captioning prompts, verbatim.
pub fn initial_prompt(id: u8) -> Result<String, PromptError> {
    PromptTemplates::default()
        .initial_prompt(id)
        .map(str::to_string)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviserOutput {
    pub revised_caption: String,
    pub analysis: Option<String>,
    pub raw: String,
}

/// `<revised caption>c</revised caption><analysis>a</analysis>`
pub fn render_wrapped(caption: &str, analysis: &str) -> String {
    format!("{REVISED_OPEN}{caption}{REVISED_CLOSE}{ANALYSIS_OPEN}{analysis}{ANALYSIS_CLOSE}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Marker {
    RevisedOpen,
    RevisedClose,
    AnalysisOpen,
    AnalysisClose,
}

#[derive(Debug, Clone, Copy)]
struct MarkerHit {
    kind: Marker,
    start: usize,
    end: usize,
}

/// Marker occurrences in order. Matching ignores ASCII case.
fn scan_markers(raw: &str) -> Vec<MarkerHit> {
    let lowered = raw.to_ascii_lowercase();
    let bytes = lowered.as_bytes();
    let mut hits = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'<' {
            if let Some((tag, kind)) = MARKERS
                .iter()
                .find(|(tag, _)| bytes[i..].starts_with(tag.as_bytes()))
            {
                hits.push(MarkerHit {
                    kind: *kind,
                    start: i,
                    end: i + tag.len(),
                });
                i += tag.len();
                continue;
            }
        }
        i += 1;
    }
    hits
}

/// Content of the first well-formed `open..close` block with nonempty text;
/// failing that, the text after the first usable `open` up to the next marker
/// or end of input.
fn extract_block(raw: &str, hits: &[MarkerHit], open: Marker, close: Marker) -> Option<String> {
    let segment_after = |idx: usize| {
        let from = hits[idx].end;
        let to = hits.get(idx + 1).map_or(raw.len(), |h| h.start);
        raw[from..to].trim()
    };
    let well_formed = hits.iter().enumerate().find_map(|(i, h)| {
        let closed = h.kind == open && hits.get(i + 1).is_some_and(|n| n.kind == close);
        let text = segment_after(i);
        (closed && !text.is_empty()).then(|| text.to_string())
    });
    well_formed.or_else(|| {
        hits.iter().enumerate().find_map(|(i, h)| {
            let text = segment_after(i);
            (h.kind == open && !text.is_empty()).then(|| text.to_string())
        })
    })
}

/// Extracts the revised caption and optional analysis from reviser output.
///
/// Closed and unclosed `<revised caption>` blocks are both accepted; an
/// unclosed block ends at the next marker or end of text. The first
/// well-formed block of each kind wins and later ones are ignored.
pub fn parse_reviser_output(raw: &str) -> Result<ReviserOutput, ParseError> {
    let hits = scan_markers(raw);
    if !hits.iter().any(|h| h.kind == Marker::RevisedOpen) {
        return Err(ParseError::MissingCaptionMarker);
    }
    let revised_caption = extract_block(raw, &hits, Marker::RevisedOpen, Marker::RevisedClose)
        .ok_or(ParseError::EmptyRevisedCaption)?;
    let analysis = extract_block(raw, &hits, Marker::AnalysisOpen, Marker::AnalysisClose);
    Ok(ReviserOutput {
        revised_caption,
        analysis,
        raw: raw.to_string(),
    })
}

/// True if `text` contains any marker token (ASCII case-insensitive).
pub fn contains_marker(text: &str) -> bool {
    !scan_markers(text).is_empty()
}
