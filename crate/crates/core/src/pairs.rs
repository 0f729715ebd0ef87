//! Preference pairs from refinement traces and their line-oriented export.
//!
//! Each exported line is `{"id", "images", "prompt", "chosen", "rejected"}`
//! with image paths relative to the export file. Image bytes are written to
//! `images/<hash>.<ext>` beside the file, and the training hyperparameters to
//! `<stem>.meta.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dpo::DpoHyperparams;
use crate::image_ref::ImageRef;
use crate::trace::RefinementTrace;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub id: String,
    pub image: ImageRef,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub trace_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    /// Final caption equals the initial caption.
    FixedPoint,
    /// Every refinement step carried the previous caption over.
    AllDegenerate,
    /// The trace did not finish.
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedTrace {
    pub trace_id: String,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairBuild {
    pub pairs: Vec<PreferencePair>,
    pub skipped: Vec<SkippedTrace>,
}

/// One pair per finished trace whose final caption differs from its initial
/// caption; the final caption is preferred. Pairs come out sorted by id.
pub fn build_preference_pairs<'a, I>(traces: I) -> PairBuild
where
    I: IntoIterator<Item = &'a RefinementTrace>,
{
    let mut out = PairBuild::default();
    for trace in traces {
        let skip = if !trace.is_complete() {
            Some(SkipReason::Incomplete)
        } else if trace.all_degenerate() {
            Some(SkipReason::AllDegenerate)
        } else if trace.final_caption() == trace.initial_caption() {
            Some(SkipReason::FixedPoint)
        } else {
            None
        };
        match skip {
            Some(reason) => out.skipped.push(SkippedTrace {
                trace_id: trace.id.clone(),
                reason,
            }),
            None => out.pairs.push(PreferencePair {
                id: trace.id.clone(),
                image: trace.image.clone(),
                prompt: trace.initial.prompt().to_string(),
                chosen: trace.final_caption().to_string(),
                rejected: trace.initial_caption().to_string(),
                trace_id: trace.id.clone(),
            }),
        }
    }
    out.pairs.sort_by(|a, b| a.id.cmp(&b.id));
    out.skipped.sort_by(|a, b| a.trace_id.cmp(&b.trace_id));
    out
}

/// Source of image bytes for export.
pub trait BlobSource {
    fn blob_bytes(&self, image: &ImageRef) -> io::Result<Vec<u8>>;
}

impl BlobSource for BTreeMap<String, Vec<u8>> {
    fn blob_bytes(&self, image: &ImageRef) -> io::Result<Vec<u8>> {
        self.get(&image.hash).cloned().ok_or_else(|| {
            io::Error::new(io::ErrorKind::NotFound, format!("no blob {}", image.hash))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportMeta {
    #[serde(flatten)]
    pub hyperparams: DpoHyperparams,
    pub pairs: usize,
    pub skipped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_run: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PairLine {
    id: String,
    images: Vec<String>,
    prompt: String,
    chosen: String,
    rejected: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExportError + '_ {
    move |source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Sidecar metadata path for an export file (`pairs.jsonl` → `pairs.meta.json`).
pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn image_rel_path(image: &ImageRef) -> String {
    format!("images/{}.{}", image.hash, image.extension())
}

/// Writes `pairs` (sorted by id) to `path`, materializes their images, and
/// writes the metadata sidecar.
pub fn export_pairs(
    pairs: &[PreferencePair],
    path: &Path,
    blobs: &dyn BlobSource,
    meta: &ExportMeta,
) -> Result<(), ExportError> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut sorted: Vec<&PreferencePair> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));

    if !sorted.is_empty() {
        let images_dir = base.join("images");
        fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for pair in sorted {
        let rel = image_rel_path(&pair.image);
        let target = base.join(&rel);
        if !target.exists() {
            let bytes = blobs.blob_bytes(&pair.image).map_err(io_err(&target))?;
            fs::write(&target, bytes).map_err(io_err(&target))?;
        }
        let line = PairLine {
            id: pair.id.clone(),
            images: vec![rel],
            prompt: pair.prompt.clone(),
            chosen: pair.chosen.clone(),
            rejected: pair.rejected.clone(),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| io_err(path)(e.into()))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;

    let meta_file = meta_path(path);
    let mut text = serde_json::to_string_pretty(meta).expect("meta serializes");
    text.push('\n');
    fs::write(&meta_file, text).map_err(io_err(&meta_file))?;
    Ok(())
}

/// Reads an export file back, re-deriving image refs from the materialized
/// image files.
pub fn import_pairs(path: &Path) -> Result<Vec<PreferencePair>, ExportError> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut pairs = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let format_err = |message: String| ExportError::Format {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let parsed: PairLine = serde_json::from_str(&line).map_err(|e| format_err(e.to_string()))?;
        let rel = parsed
            .images
            .first()
            .ok_or_else(|| format_err("pair has no image".into()))?;
        let image_path = base.join(rel);
        let bytes = fs::read(&image_path).map_err(io_err(&image_path))?;
        let image = ImageRef::from_bytes(&bytes).map_err(|e| format_err(e.to_string()))?;
        pairs.push(PreferencePair {
            trace_id: parsed.id.clone(),
            id: parsed.id,
            image,
            prompt: parsed.prompt,
            chosen: parsed.chosen,
            rejected: parsed.rejected,
        });
    }
    Ok(pairs)
}

pub fn read_meta(path: &Path) -> Result<ExportMeta, ExportError> {
    let p = meta_path(path);
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    serde_json::from_str(&text).map_err(|e| ExportError::Format {
        path: p,
        line: 0,
        message: e.to_string(),
    })
}
