//! Annotation file formats and the evaluation commands built on them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use recap_core::answer::QaAnswer;
use recap_core::eval::amber::chair_cover;
use recap_core::eval::capture::{capture_match, CaptureConfig, ElementSet};
use recap_core::eval::comprecap::{judge_attr_rel, object_coverage, JudgeTranscript, SceneGraphAnnotation};
use recap_core::eval::{extract_mentions, score_qa, EvalError, EvalReport, ItemScore, ObjectVocabulary, QaItem};
use recap_core::hashing::sha256_hex;
use recap_core::prompt::PromptTemplates;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::client::{ClientError, Clients};
use crate::config::EvalDefaults;
use crate::exit::{self, ExitClass};
use crate::store::{write_atomic, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum EvalIoError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{0}")]
    Usage(String),
}

impl ExitClass for EvalIoError {
    fn exit_code(&self) -> i32 {
        match self {
            EvalIoError::Read { .. } => exit::CONFIG,
            EvalIoError::Parse { .. } => exit::PARSE,
            EvalIoError::Eval(EvalError::InvalidWeights | EvalError::InvalidThreshold(_) | EvalError::InvalidScale) => {
                exit::CONFIG
            }
            EvalIoError::Eval(_) => exit::PARSE,
            EvalIoError::Client(e) => e.exit_code(),
            EvalIoError::Store(e) => e.exit_code(),
            EvalIoError::Usage(_) => exit::USAGE,
        }
    }
}

/// An input file with the hash recorded as report provenance.
struct Input<T> {
    name: String,
    sha256: String,
    value: T,
}

fn read_input<T: DeserializeOwned>(path: &Path) -> Result<Input<T>, EvalIoError> {
    let bytes = fs::read(path).map_err(|source| EvalIoError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let value = serde_json::from_slice(&bytes).map_err(|e| EvalIoError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(Input {
        name: path
            .file_name()
            .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned()),
        sha256: sha256_hex(&bytes),
        value,
    })
}

fn parse_err(path: &Path, message: impl Into<String>) -> EvalIoError {
    EvalIoError::Parse {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Human label for a headline metric.
pub fn headline_label(metric: &str) -> &str {
    match metric {
        "over" => "Over",
        "accuracy" => "Accuracy",
        "object_coverage" => "Object coverage",
        "weighted_f1" => "Weighted F1",
        other => other,
    }
}

/// `"<Label> = 0.1234"`, or `"<Label> = n/a"` without items.
pub fn headline_line(report: &EvalReport) -> String {
    let label = headline_label(&report.headline);
    match report.headline_value() {
        Some(v) => format!("{label} = {v:.4}"),
        None => format!("{label} = n/a"),
    }
}

// ---- QA ----

#[derive(Debug, Deserialize)]
pub struct QaFile {
    pub items: Vec<QaFileItem>,
}

#[derive(Debug, Deserialize)]
pub struct QaFileItem {
    #[serde(flatten)]
    pub item: QaItem,
    /// Key into the captions file; optional when there is a single caption.
    #[serde(default)]
    pub image: Option<String>,
}

pub enum QaSource<'a> {
    /// JSON array of answers aligned with the items.
    Predictions(&'a Path),
    /// JSON object image key → caption; answers come from the judge.
    Captions(&'a Path, &'a Clients),
}

pub fn eval_qa(items_path: &Path, source: QaSource<'_>, templates: &PromptTemplates) -> Result<EvalReport, EvalIoError> {
    let file: Input<QaFile> = read_input(items_path)?;
    let items: Vec<QaItem> = file.value.items.iter().map(|i| i.item.clone()).collect();
    let mut provenance = BTreeMap::from([(file.name.clone(), file.sha256.clone())]);
    let mut notes = Vec::new();

    let (predictions, kept): (Vec<QaAnswer>, Vec<QaItem>) = match source {
        QaSource::Predictions(path) => {
            let preds: Input<Vec<String>> = read_input(path)?;
            provenance.insert(preds.name.clone(), preds.sha256.clone());
            let answers = preds
                .value
                .iter()
                .enumerate()
                .map(|(i, raw)| {
                    QaAnswer::normalize(raw)
                        .map_err(|e| parse_err(path, format!("prediction {}: unparseable answer {:?}", i + 1, e.raw)))
                })
                .collect::<Result<Vec<_>, _>>()?;
            (answers, items)
        }
        QaSource::Captions(path, clients) => {
            let captions: Input<BTreeMap<String, String>> = read_input(path)?;
            provenance.insert(captions.name.clone(), captions.sha256.clone());
            let single = (captions.value.len() == 1).then(|| captions.value.values().next().unwrap());
            let mut answers = Vec::new();
            let mut kept = Vec::new();
            let mut skipped = 0;
            for (i, entry) in file.value.items.iter().enumerate() {
                let caption = match &entry.image {
                    Some(key) => captions.value.get(key),
                    None => single,
                }
                .ok_or_else(|| parse_err(path, format!("no caption for item {}", i + 1)))?;
                let prompt = templates.render_judge_qa(caption, &entry.item.question);
                match clients.judge_qa(&prompt, &entry.item.question) {
                    Ok((answer, _)) => {
                        answers.push(answer);
                        kept.push(entry.item.clone());
                    }
                    Err(ClientError::UnparseableAnswer { raw, .. }) => {
                        log::warn!("item {}: unparseable judge answer {raw:?}; skipped", i + 1);
                        skipped += 1;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            if skipped > 0 {
                notes.push(format!("{skipped} item(s) skipped: unparseable judge answer"));
            }
            (answers, kept)
        }
    };
    let mut report = score_qa(&predictions, &kept)?;
    report.provenance = provenance;
    report.notes.extend(notes);
    Ok(report)
}

// ---- Amber-style CHAIR / Cover ----

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmberFile {
    pub vocabulary: ObjectVocabulary,
    pub items: Vec<AmberItem>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmberItem {
    pub id: String,
    pub caption: String,
    pub annotated: Vec<String>,
}

pub fn eval_amber(path: &Path) -> Result<EvalReport, EvalIoError> {
    let file: Input<AmberFile> = read_input(path)?;
    let vocab = file.value.vocabulary.normalized()?;
    let mut items = Vec::new();
    for item in &file.value.items {
        let annotated: BTreeSet<String> = item.annotated.iter().map(|a| a.trim().to_lowercase()).collect();
        if let Some(unknown) = annotated.iter().find(|a| !vocab.entries.contains_key(*a)) {
            return Err(parse_err(path, format!("item {}: annotated object {unknown:?} is not in the vocabulary", item.id)));
        }
        let mentioned = extract_mentions(&item.caption, &vocab);
        let cc = chair_cover(&mentioned, &annotated);
        items.push(ItemScore {
            id: item.id.clone(),
            category: None,
            scores: [("chair".into(), cc.chair), ("cover".into(), cc.cover), ("over".into(), cc.over)].into(),
        });
    }
    let mut report = EvalReport::from_items("amber", "over", items);
    report.provenance.insert(file.name, file.sha256);
    Ok(report)
}

// ---- CompreCap-style coverage and judged attributes / relations ----

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComprecapFile {
    pub items: Vec<ComprecapItem>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComprecapItem {
    pub id: String,
    pub caption: String,
    pub scene_graph: SceneGraphAnnotation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemTranscripts {
    pub id: String,
    pub transcripts: Vec<JudgeTranscript>,
}

/// Coverage per item; with a judge, also attribute and relation ratings on
/// `[0, scale_max]`. Returns the judge transcripts alongside.
pub fn eval_comprecap(
    path: &Path,
    judge: Option<&Clients>,
    templates: &PromptTemplates,
    scale_max: u32,
) -> Result<(EvalReport, Vec<ItemTranscripts>), EvalIoError> {
    let file: Input<ComprecapFile> = read_input(path)?;
    let mut items = Vec::new();
    let mut transcripts = Vec::new();
    let mut unparseable = 0;
    for item in &file.value.items {
        let cov = object_coverage(&item.caption, &item.scene_graph)?;
        let mut scores = BTreeMap::from([
            ("object_coverage".to_string(), cov.object_coverage),
            ("pixel_coverage".to_string(), cov.pixel_coverage),
        ]);
        if let Some(clients) = judge {
            let mut ask = |prompt: &str| -> Result<String, EvalIoError> {
                // scripted fixtures are keyed by the fact being rated
                let fact = prompt.rsplit("Fact: ").next().unwrap_or(prompt).trim();
                Ok(clients.judge(prompt, fact)?.value)
            };
            let judged = judge_attr_rel(&item.caption, &item.scene_graph, templates, scale_max, &mut ask)?;
            if let Some(a) = judged.attr_score {
                scores.insert("attr_score".into(), a);
            }
            if let Some(r) = judged.rel_score {
                scores.insert("rel_score".into(), r);
            }
            unparseable += judged.unparseable;
            transcripts.push(ItemTranscripts {
                id: item.id.clone(),
                transcripts: judged.transcripts,
            });
        }
        items.push(ItemScore {
            id: item.id.clone(),
            category: None,
            scores,
        });
    }
    let mut report = EvalReport::from_items("comprecap", "object_coverage", items);
    report.provenance.insert(file.name, file.sha256);
    if judge.is_some() {
        report.config = json!({ "scale_max": scale_max });
    }
    if unparseable > 0 {
        report.notes.push(format!("{unparseable} judge rating(s) unparseable and skipped"));
    }
    Ok((report, transcripts))
}

// ---- CAPTURE-style element matching ----

/// `{"items": {"<id>": {"objects": [...], "attributes": [...], "relations": [...]}}}`
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElementFile {
    pub items: BTreeMap<String, ElementSet>,
}

pub fn eval_capture(
    candidates: &Path,
    references: &Path,
    synonyms: Option<&Path>,
    defaults: &EvalDefaults,
) -> Result<EvalReport, EvalIoError> {
    let cand: Input<ElementFile> = read_input(candidates)?;
    let refs: Input<ElementFile> = read_input(references)?;
    let mut provenance = BTreeMap::from([(cand.name.clone(), cand.sha256.clone()), (refs.name.clone(), refs.sha256.clone())]);
    let vocab = match synonyms {
        Some(p) => {
            let v: Input<ObjectVocabulary> = read_input(p)?;
            provenance.insert(v.name.clone(), v.sha256.clone());
            v.value.normalized()?
        }
        None => ObjectVocabulary::default(),
    };
    let config = CaptureConfig {
        synonyms: vocab,
        soft_threshold: defaults.soft_threshold,
        weights: defaults.weights,
    };
    config.validate()?;
    if let Some(missing) = cand.value.items.keys().find(|k| !refs.value.items.contains_key(*k)) {
        return Err(parse_err(references, format!("no reference for item {missing:?}")));
    }
    let mut items = Vec::new();
    for (id, c) in &cand.value.items {
        let s = capture_match(c, &refs.value.items[id], &config)?;
        let mut scores = BTreeMap::new();
        for (name, t) in [("objects", &s.objects), ("attributes", &s.attributes), ("relations", &s.relations)] {
            scores.insert(format!("{name}_precision"), t.precision);
            scores.insert(format!("{name}_recall"), t.recall);
            scores.insert(format!("{name}_f1"), t.f1);
        }
        scores.insert("weighted_f1".into(), s.weighted);
        items.push(ItemScore {
            id: id.clone(),
            category: None,
            scores,
        });
    }
    let mut report = EvalReport::from_items("capture", "weighted_f1", items);
    report.provenance = provenance;
    report.config = json!({
        "soft_threshold": config.soft_threshold,
        "weights": config.weights,
        "synonym_entries": config.synonyms.entries.len(),
    });
    Ok(report)
}

/// Writes the report JSON to `path` and its table rendering beside it
/// (`.txt`). Returns the paths written.
pub fn write_report(report: &EvalReport, path: &Path) -> Result<Vec<PathBuf>, EvalIoError> {
    let mut json = serde_json::to_string_pretty(report).expect("report serializes");
    json.push('\n');
    write_atomic(path, json.as_bytes())?;
    let table = path.with_extension("txt");
    let mut text = report.render_table();
    text.push_str(&headline_line(report));
    text.push('\n');
    write_atomic(&table, text.as_bytes())?;
    Ok(vec![path.to_path_buf(), table])
}

/// Default report location in the store: `evals/<kind>-<hash>.json`, where
/// the hash covers the input provenance and config.
pub fn default_report_path(store_root: &Path, report: &EvalReport) -> PathBuf {
    let material = json!({"provenance": report.provenance, "config": report.config});
    let hash = sha256_hex(material.to_string().as_bytes());
    store_root.join("evals").join(format!("{}-{}.json", report.kind, &hash[..12]))
}
