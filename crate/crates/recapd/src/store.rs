//! On-disk store: content-addressed blobs, the remote-call cache, and run /
//! trace persistence.
//!
//! Layout under the root:
//!
//! ```text
//! blobs/<first2>/<sha256>
//! cache/<first2>/<key>.json
//! runs/<run-id>/run.json
//! runs/<run-id>/report.json
//! runs/<run-id>/traces/<item-id>.json
//! ```
//!
//! Every file is staged under a temporary name in the target directory and
//! renamed into place, so readers never observe a partial write.

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use recap_core::hashing::sha256_hex;
use recap_core::pairs::BlobSource;
use recap_core::{ImageRef, RefinementTrace, RefineConfig, Role};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::batch::BatchReport;

/// Test hook: milliseconds to pause halfway through every atomic write.
pub const STALL_WRITES_ENV: &str = "RECAPD_TEST_STALL_WRITES";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("blob {0} not found")]
    BlobNotFound(String),
    #[error("blob {0} does not match its hash")]
    CorruptBlob(String),
    #[error("corrupt trace {path}: {reason}")]
    CorruptTrace { path: PathBuf, reason: String },
    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },
    #[error("{0} not found")]
    NotFound(String),
    #[error("invalid identifier {0:?}: use letters, digits, '.', '_' or '-'")]
    InvalidId(String),
    #[error("payload is not an image: {0}")]
    NotAnImage(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Run and item ids become file names, so they are restricted to a safe set.
pub fn validate_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidId(id.to_string()))
    }
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn stall() -> Option<Duration> {
    std::env::var(STALL_WRITES_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .map(Duration::from_millis)
}

/// Writes `bytes` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(
        ".{name}.tmp-{}-{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let result = (|| {
        let mut f = File::create(&tmp)?;
        match stall() {
            Some(pause) => {
                let half = bytes.len() / 2;
                f.write_all(&bytes[..half])?;
                f.flush()?;
                std::thread::sleep(pause);
                f.write_all(&bytes[half..])?;
            }
            None => f.write_all(bytes)?,
        }
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, StoreError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(StoreError::NotFound(path.display().to_string()))
        }
        Err(e) => return Err(io_err(path)(e)),
    };
    serde_json::from_str(&text).map_err(|e| StoreError::CorruptFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// A recorded provider response, keyed by [`cache_key`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub role: Role,
    pub model: String,
    pub request_hash: String,
    pub attempts: u32,
    pub response: Value,
}

/// SHA-256 over role, model name and the canonical request body. `salt`
/// distinguishes deliberate repeats of an identical request (parse retries).
pub fn cache_key(role: Role, model: &str, canonical_body: &str, salt: u32) -> String {
    let mut material = Vec::new();
    material.extend_from_slice(role.as_str().as_bytes());
    material.push(0);
    material.extend_from_slice(model.as_bytes());
    material.push(0);
    material.extend_from_slice(canonical_body.as_bytes());
    if salt > 0 {
        material.push(0);
        material.extend_from_slice(format!("repeat:{salt}").as_bytes());
    }
    sha256_hex(&material)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub created_at_ms: u64,
    pub manifest: Option<String>,
    pub manifest_sha256: Option<String>,
    pub config: RefineConfig,
}

#[derive(Serialize, Deserialize)]
struct TraceEnvelope {
    checksum: String,
    trace: RefinementTrace,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for sub in ["blobs", "cache", "runs"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn fanout(&self, kind: &str, key: &str, suffix: &str) -> PathBuf {
        self.root
            .join(kind)
            .join(&key[..2.min(key.len())])
            .join(format!("{key}{suffix}"))
    }

    pub fn blob_path(&self, hash: &str) -> PathBuf {
        self.fanout("blobs", hash, "")
    }

    /// Stores `bytes` once; repeated puts of the same bytes are no-ops.
    pub fn put_blob(&self, bytes: &[u8]) -> Result<ImageRef, StoreError> {
        let image = ImageRef::from_bytes(bytes).map_err(|e| StoreError::NotAnImage(e.to_string()))?;
        let path = self.blob_path(&image.hash);
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        Ok(image)
    }

    /// Like [`Store::put_blob`] but rejects bytes that are not a known image
    /// format.
    pub fn put_image(&self, bytes: &[u8]) -> Result<ImageRef, StoreError> {
        ImageRef::from_image_bytes(bytes).map_err(|e| StoreError::NotAnImage(e.to_string()))?;
        self.put_blob(bytes)
    }

    /// Blob bytes, verified against their hash.
    pub fn get_blob(&self, hash: &str) -> Result<Vec<u8>, StoreError> {
        let path = self.blob_path(hash);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::BlobNotFound(hash.to_string()))
            }
            Err(e) => return Err(io_err(&path)(e)),
        };
        if sha256_hex(&bytes) != hash {
            return Err(StoreError::CorruptBlob(hash.to_string()));
        }
        Ok(bytes)
    }

    pub fn has_blob(&self, hash: &str) -> bool {
        self.blob_path(hash).is_file()
    }

    pub fn cache_path(&self, key: &str) -> PathBuf {
        self.fanout("cache", key, ".json")
    }

    pub fn cache_lookup(&self, key: &str) -> Result<Option<CacheEntry>, StoreError> {
        match read_json(&self.cache_path(key)) {
            Ok(entry) => Ok(Some(entry)),
            Err(StoreError::NotFound(_)) => Ok(None),
            Err(StoreError::CorruptFile { path, reason }) => {
                log::warn!("ignoring unreadable cache entry {}: {reason}", path.display());
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    pub fn cache_put(&self, key: &str, entry: &CacheEntry) -> Result<(), StoreError> {
        write_json(&self.cache_path(key), entry)
    }

    /// Removes cache entries matching the filters; returns how many.
    pub fn purge_cache(&self, role: Option<Role>, model: Option<&str>) -> Result<usize, StoreError> {
        let mut removed = 0;
        let cache = self.root.join("cache");
        for shard in read_dir_sorted(&cache)? {
            for file in read_dir_sorted(&shard)? {
                if file.extension().and_then(|e| e.to_str()) != Some("json") {
                    continue;
                }
                let matches = match read_json::<CacheEntry>(&file) {
                    Ok(e) => {
                        role.is_none_or(|r| r == e.role) && model.is_none_or(|m| m == e.model)
                    }
                    // Unreadable entries only go when purging everything.
                    Err(_) => role.is_none() && model.is_none(),
                };
                if matches {
                    fs::remove_file(&file).map_err(io_err(&file))?;
                    removed += 1;
                }
            }
        }
        Ok(removed)
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    pub fn trace_path(&self, run_id: &str, item_id: &str) -> PathBuf {
        self.run_dir(run_id).join("traces").join(format!("{item_id}.json"))
    }

    /// Writes run metadata unless the run already has some.
    pub fn init_run(&self, meta: &RunMeta) -> Result<RunMeta, StoreError> {
        validate_id(&meta.run_id)?;
        let path = self.run_dir(&meta.run_id).join("run.json");
        match read_json::<RunMeta>(&path) {
            Ok(existing) => Ok(existing),
            Err(StoreError::NotFound(_)) => {
                write_json(&path, meta)?;
                Ok(meta.clone())
            }
            Err(e) => Err(e),
        }
    }

    pub fn list_runs(&self) -> Result<Vec<RunMeta>, StoreError> {
        let mut runs = Vec::new();
        for dir in read_dir_sorted(&self.root.join("runs"))? {
            let meta = dir.join("run.json");
            if meta.is_file() {
                runs.push(read_json(&meta)?);
            }
        }
        Ok(runs)
    }

    pub fn save_trace(&self, run_id: &str, trace: &RefinementTrace) -> Result<PathBuf, StoreError> {
        validate_id(run_id)?;
        validate_id(&trace.id)?;
        let path = self.trace_path(run_id, &trace.id);
        let envelope = TraceEnvelope {
            checksum: trace.checksum(),
            trace: trace.clone(),
        };
        write_json(&path, &envelope)?;
        Ok(path)
    }

    pub fn load_trace(&self, run_id: &str, item_id: &str) -> Result<RefinementTrace, StoreError> {
        validate_id(run_id)?;
        validate_id(item_id)?;
        let path = self.trace_path(run_id, item_id);
        let envelope: TraceEnvelope = match read_json(&path) {
            Ok(e) => e,
            Err(StoreError::NotFound(_)) => {
                return Err(StoreError::NotFound(format!("trace {run_id}/{item_id}")))
            }
            Err(StoreError::CorruptFile { path, reason }) => {
                return Err(StoreError::CorruptTrace { path, reason })
            }
            Err(e) => return Err(e),
        };
        let actual = envelope.trace.checksum();
        if actual != envelope.checksum {
            return Err(StoreError::CorruptTrace {
                path,
                reason: format!("checksum {actual} does not match recorded {}", envelope.checksum),
            });
        }
        Ok(envelope.trace)
    }

    /// Item ids with a trace file in `run_id`, sorted.
    pub fn list_traces(&self, run_id: &str) -> Result<Vec<String>, StoreError> {
        validate_id(run_id)?;
        let dir = self.run_dir(run_id);
        if !dir.is_dir() {
            return Err(StoreError::NotFound(format!("run {run_id}")));
        }
        let mut ids = Vec::new();
        for path in read_dir_sorted(&dir.join("traces"))? {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if let Some(id) = name.strip_suffix(".json") {
                if !name.starts_with('.') {
                    ids.push(id.to_string());
                }
            }
        }
        Ok(ids)
    }

    pub fn save_report(&self, report: &BatchReport) -> Result<PathBuf, StoreError> {
        let path = self.run_dir(&report.run_id).join("report.json");
        write_json(&path, report)?;
        Ok(path)
    }

    pub fn load_report(&self, run_id: &str) -> Result<BatchReport, StoreError> {
        validate_id(run_id)?;
        read_json(&self.run_dir(run_id).join("report.json"))
    }
}

impl BlobSource for Store {
    fn blob_bytes(&self, image: &ImageRef) -> io::Result<Vec<u8>> {
        self.get_blob(&image.hash)
            .map_err(|e| io::Error::new(io::ErrorKind::NotFound, e.to_string()))
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(dir)(e)),
    };
    let mut out = Vec::new();
    for entry in entries {
        out.push(entry.map_err(io_err(dir))?.path());
    }
    out.sort();
    Ok(out)
}
