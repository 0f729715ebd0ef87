//! Manifest-driven batch refinement with a bounded worker pool and resume.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use recap_core::hashing::{canonical_json, sha256_hex};
use recap_core::prompt::PromptTemplates;
use recap_core::trace::TraceStatus;
use recap_core::{RefineConfig, RefinementTrace};
use serde::{Deserialize, Serialize};

use crate::client::Clients;
use crate::exit::{self, ExitClass};
use crate::refine::{run_refinement, RefineError, RefineInput, RefineOptions};
use crate::store::{validate_id, RunMeta, StoreError};

const MAX_DOWNLOAD_BYTES: u64 = 64 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum BatchError {
    #[error("cannot read manifest {path}: {source}")]
    ManifestRead {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    ManifestParse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl ExitClass for BatchError {
    fn exit_code(&self) -> i32 {
        match self {
            BatchError::ManifestRead { .. } => exit::CONFIG,
            BatchError::ManifestParse { .. } => exit::PARSE,
            BatchError::Store(e) => e.exit_code(),
        }
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub id: String,
    /// Path (relative to the manifest), `file://` URI or `http(s)://` URL.
    pub image: String,
    #[serde(default)]
    pub init_caption: Option<String>,
}

/// Parses a JSON-lines manifest. Blank lines are ignored; ids must be valid
/// and unique.
pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestItem>, BatchError> {
    let mut items = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| BatchError::ManifestParse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let item: ManifestItem = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        validate_id(&item.id).map_err(|e| err(e.to_string()))?;
        if item.image.trim().is_empty() {
            return Err(err("empty image reference".into()));
        }
        if !seen.insert(item.id.clone()) {
            return Err(err(format!("duplicate id {:?}", item.id)));
        }
        items.push(item);
    }
    Ok(items)
}

/// Reads the bytes behind a manifest image reference.
pub fn fetch_image(reference: &str, base_dir: &Path) -> Result<Vec<u8>, String> {
    if reference.starts_with("http://") || reference.starts_with("https://") {
        let mut resp = ureq::get(reference).call().map_err(|e| e.to_string())?;
        return resp
            .body_mut()
            .with_config()
            .limit(MAX_DOWNLOAD_BYTES)
            .read_to_vec()
            .map_err(|e| e.to_string());
    }
    let path = Path::new(reference.strip_prefix("file://").unwrap_or(reference));
    let path = if path.is_absolute() {
        path.to_path_buf()
    } else {
        base_dir.join(path)
    };
    fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))
}

/// Default run id: stable for the same manifest bytes and refine config.
pub fn default_run_id(manifest_bytes: &[u8], config: &RefineConfig) -> String {
    let cfg = serde_json::to_value(config).expect("config serializes");
    let mut buf = manifest_bytes.to_vec();
    buf.push(0);
    buf.extend_from_slice(canonical_json(&cfg).as_bytes());
    format!("run-{}", &sha256_hex(&buf)[..12])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemState {
    Completed,
    Skipped,
    Failed,
    Interrupted,
    /// Not started before an interrupt.
    Pending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemReport {
    pub id: String,
    pub state: ItemState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Exit class of the error, when failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    pub steps_completed: usize,
    pub degenerate_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_caption: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub items: usize,
    pub mean_ms: f64,
    pub p50_ms: u64,
    pub p95_ms: u64,
    pub max_ms: u64,
}

impl LatencyStats {
    pub fn from_samples(mut samples: Vec<u64>) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        samples.sort_unstable();
        let pct = |p: f64| samples[((samples.len() - 1) as f64 * p).round() as usize];
        Self {
            items: samples.len(),
            mean_ms: samples.iter().sum::<u64>() as f64 / samples.len() as f64,
            p50_ms: pct(0.5),
            p95_ms: pct(0.95),
            max_ms: *samples.last().unwrap(),
        }
    }
}

/// `completed` counts every item with a complete trace, including those
/// skipped because a previous run already finished them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub run_id: String,
    pub manifest: String,
    pub total: usize,
    pub completed: usize,
    pub skipped: usize,
    pub failed: usize,
    /// Items with at least one degenerate step.
    pub degenerate: usize,
    pub interrupted: bool,
    /// Transport calls made by this invocation (cache hits excluded).
    pub backend_calls: u64,
    pub latency: LatencyStats,
    pub items: Vec<ItemReport>,
}

impl BatchReport {
    pub fn summary(&self) -> String {
        format!(
            "run: {}\ntotal: {}\ncompleted: {}\nskipped: {}\nfailed: {}\ndegenerate: {}\nbackend calls: {}{}",
            self.run_id,
            self.total,
            self.completed,
            self.skipped,
            self.failed,
            self.degenerate,
            self.backend_calls,
            if self.interrupted { "\ninterrupted: yes" } else { "" }
        )
    }

    /// Exit class of the first failed item, if any.
    pub fn first_failure_code(&self) -> Option<i32> {
        self.items
            .iter()
            .find(|i| i.state == ItemState::Failed)
            .map(|i| i.exit_code.unwrap_or(exit::REMOTE))
    }
}

pub struct BatchOptions<'a> {
    pub run_id: Option<String>,
    pub parallelism: usize,
    pub strict_parse: bool,
    pub cancel: Option<&'a AtomicBool>,
}

fn item_report(id: &str, state: ItemState, trace: Option<&RefinementTrace>) -> ItemReport {
    ItemReport {
        id: id.to_string(),
        state,
        error: None,
        exit_code: None,
        steps_completed: trace.map_or(0, RefinementTrace::n_completed),
        degenerate_steps: trace.map_or(0, |t| t.steps.iter().filter(|s| s.degenerate).count()),
        final_caption: trace.map(|t| t.final_caption().to_string()),
    }
}

fn failed(id: &str, message: String, code: i32) -> ItemReport {
    ItemReport {
        error: Some(message),
        exit_code: Some(code),
        ..item_report(id, ItemState::Failed, None)
    }
}

/// Runs (or resumes) a batch. Items whose trace is already complete are
/// skipped without touching any backend. Per-item failures are recorded in
/// the report and never stop other items.
pub fn run_batch(
    clients: &Clients,
    manifest_path: &Path,
    config: &RefineConfig,
    templates: &PromptTemplates,
    opts: &BatchOptions<'_>,
) -> Result<BatchReport, BatchError> {
    let bytes = fs::read(manifest_path).map_err(|source| BatchError::ManifestRead {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| BatchError::ManifestParse {
        path: manifest_path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    let items = parse_manifest(&text, manifest_path)?;
    let base_dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let run_id = opts
        .run_id
        .clone()
        .unwrap_or_else(|| default_run_id(&bytes, config));
    let store = clients.store();
    store.init_run(&RunMeta {
        run_id: run_id.clone(),
        created_at_ms: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64),
        manifest: Some(manifest_path.display().to_string()),
        manifest_sha256: Some(sha256_hex(&bytes)),
        config: *config,
    })?;

    let calls_before = clients.total_calls();
    let mut results: Vec<Option<ItemReport>> = vec![None; items.len()];
    let mut queue = Vec::new();
    for (idx, item) in items.iter().enumerate() {
        match store.load_trace(&run_id, &item.id) {
            Ok(t) if t.is_complete() => {
                results[idx] = Some(item_report(&item.id, ItemState::Skipped, Some(&t)));
            }
            Ok(_) | Err(StoreError::NotFound(_)) => queue.push(idx),
            Err(e) => {
                log::warn!("{}: discarding unreadable trace: {e}", item.id);
                queue.push(idx);
            }
        }
    }

    let next = AtomicUsize::new(0);
    let done = Mutex::new(Vec::new());
    let latencies = Mutex::new(Vec::new());
    let workers = opts.parallelism.max(1).min(queue.len().max(1));
    let cancelled = || opts.cancel.is_some_and(|c| c.load(Ordering::SeqCst));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if cancelled() {
                    break;
                }
                let Some(&idx) = queue.get(next.fetch_add(1, Ordering::SeqCst)) else {
                    break;
                };
                let item = &items[idx];
                let report = process_item(clients, item, base_dir, &run_id, config, templates, opts);
                if let Ok(Some(ms)) = report.as_ref().map(|(_, ms)| *ms) {
                    latencies.lock().unwrap().push(ms);
                }
                let report = report.map_or_else(|r| r, |(r, _)| r);
                log::info!("{}: {:?}", item.id, report.state);
                done.lock().unwrap().push((idx, report));
            });
        }
    });
    for (idx, report) in done.into_inner().unwrap() {
        results[idx] = Some(report);
    }
    let items: Vec<ItemReport> = results
        .into_iter()
        .zip(&items)
        .map(|(r, item)| r.unwrap_or_else(|| item_report(&item.id, ItemState::Pending, None)))
        .collect();

    let count = |s: ItemState| items.iter().filter(|i| i.state == s).count();
    let report = BatchReport {
        run_id,
        manifest: manifest_path.display().to_string(),
        total: items.len(),
        completed: count(ItemState::Completed) + count(ItemState::Skipped),
        skipped: count(ItemState::Skipped),
        failed: count(ItemState::Failed),
        degenerate: items.iter().filter(|i| i.degenerate_steps > 0).count(),
        interrupted: cancelled() || count(ItemState::Interrupted) + count(ItemState::Pending) > 0,
        backend_calls: clients.total_calls() - calls_before,
        latency: LatencyStats::from_samples(latencies.into_inner().unwrap()),
        items,
    };
    store.save_report(&report)?;
    Ok(report)
}

/// `Ok((report, latency))` for items that ran; `Err(report)` for failures.
fn process_item(
    clients: &Clients,
    item: &ManifestItem,
    base_dir: &Path,
    run_id: &str,
    config: &RefineConfig,
    templates: &PromptTemplates,
    opts: &BatchOptions<'_>,
) -> Result<(ItemReport, Option<u64>), ItemReport> {
    let store = clients.store();
    let bytes = fetch_image(&item.image, base_dir)
        .map_err(|e| failed(&item.id, format!("cannot read image: {e}"), exit::CONFIG))?;
    let image = store
        .put_image(&bytes)
        .map_err(|e| failed(&item.id, e.to_string(), e.exit_code()))?;
    let input = RefineInput {
        id: item.id.clone(),
        image,
        init_caption: item.init_caption.clone(),
    };
    let ropts = RefineOptions {
        config,
        templates,
        strict_parse: opts.strict_parse,
        cancel: opts.cancel,
    };
    let mut persist = |t: &RefinementTrace| store.save_trace(run_id, t).map(drop);
    match run_refinement(clients, &input, &ropts, &mut persist) {
        Ok(trace) => {
            let state = match trace.status {
                TraceStatus::Interrupted => ItemState::Interrupted,
                _ => ItemState::Completed,
            };
            let ms = trace
                .timing
                .finished_at_ms
                .saturating_sub(trace.timing.started_at_ms);
            Ok((item_report(&item.id, state, Some(&trace)), Some(ms)))
        }
        Err(e) => {
            log::error!("{}: {e}", item.id);
            Err(failed(&item.id, e.to_string(), RefineError::exit_code(&e)))
        }
    }
}
