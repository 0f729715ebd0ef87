#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use recap_core::prompt::PromptTemplates;
use recap_core::{RefineConfig, Role};
use recapd::client::{Clients, Endpoint, ScriptedTransport};
use recapd::config::{CliConfig, EndpointConfig, EndpointSettings};
use recapd::mock::solid_png;
use recapd::store::{Store, StoreError, STALL_WRITES_ENV};
use std::time::{Duration, Instant};
use serde_json::Value;

/// Clients with every role served by the in-process mock.
pub fn mock_clients(root: &Path) -> Clients {
    Clients::from_config(&CliConfig::all_mock(), Store::open(root).unwrap()).unwrap()
}

pub fn mock_endpoint(role: Role) -> Endpoint {
    Endpoint::from_config(EndpointConfig::mock(role)).unwrap()
}

pub fn scripted_endpoint(role: Role, fixtures: Value) -> Endpoint {
    let map: BTreeMap<String, Value> = serde_json::from_value(fixtures).unwrap();
    let config = EndpointConfig::new(
        role,
        EndpointSettings {
            model_name: format!("scripted-{role}"),
            max_retries: 0,
            rate_limit_rpm: 60_000,
            ..Default::default()
        },
    );
    Endpoint::with_transport(config, Box::new(ScriptedTransport::new(map)))
}

pub fn clients_with(root: &Path, endpoints: Vec<Endpoint>) -> Clients {
    Clients::new(endpoints, Store::open(root).unwrap(), true)
}

/// Distinct small PNGs.
pub fn png(i: u8) -> Vec<u8> {
    solid_png([i, 255 - i, i.wrapping_mul(37)])
}

pub fn write_png(dir: &Path, name: &str, i: u8) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, png(i)).unwrap();
    p
}

pub fn refine_config(n: u32) -> RefineConfig {
    RefineConfig {
        n_iterations: n,
        ..Default::default()
    }
}

pub fn templates() -> PromptTemplates {
    PromptTemplates::default()
}

/// Runs the CLI in-process; returns the exit code and captured stdout.
pub fn run_cli(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let argv = std::iter::once("recapd").chain(args.iter().copied());
    let code = recapd::cli::run(argv, &mut out);
    (code, String::from_utf8(out).unwrap())
}

/// Config file with every role on the in-process mock backend.
pub fn write_mock_config(dir: &Path, store: &Path) -> PathBuf {
    let mut text = format!("store = {:?}\n", store.display().to_string());
    for role in ["captioner", "t2i", "reviser", "judge"] {
        text.push_str(&format!(
            "[endpoints.{role}]\nbackend = \"mock\"\nrate_limit_rpm = 60000\nmax_in_flight = 8\n"
        ));
    }
    let p = dir.join("recapd.toml");
    std::fs::write(&p, text).unwrap();
    p
}

/// Config file pointing the chat roles and t2i at an HTTP server.
pub fn write_http_config(dir: &Path, store: &Path, base_url: &str, roles: &[&str]) -> PathBuf {
    let mut text = format!("store = {:?}\n", store.display().to_string());
    for role in roles {
        let backend = if *role == "t2i" { "http_t2i" } else { "http_chat" };
        text.push_str(&format!(
            "[endpoints.{role}]\nbackend = \"{backend}\"\nbase_url = \"{base_url}\"\nmodel_name = \"m-{role}\"\nmax_retries = 0\nbackoff_base_ms = 1\nrate_limit_rpm = 60000\ntimeout_s = 10\n"
        ));
    }
    let p = dir.join(format!("http-{}.toml", roles.join("-")));
    std::fs::write(&p, text).unwrap();
    p
}

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_recapd"))
}

/// A `recapd mock-serve` child process, killed on drop.
pub struct Served {
    pub child: Child,
    pub base_url: String,
}

impl Drop for Served {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub fn mock_serve(fixtures: &Path, generate: bool) -> Served {
    let mut cmd = bin();
    cmd.args(["mock-serve", "--port", "0", "--fixtures", fixtures.to_str().unwrap()]);
    if generate {
        cmd.arg("--generate");
    }
    let mut child = cmd.stdout(Stdio::piped()).stderr(Stdio::null()).spawn().unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
        .to_string();
    Served {
        child,
        base_url: format!("{addr}/v1"),
    }
}

/// Three mock-captioned items used by the report golden file.
pub fn write_three_item_manifest(dir: &Path) -> PathBuf {
    let mut manifest = String::new();
    for i in 0..3u8 {
        write_png(dir, &format!("m{i}.png"), 100 + i);
        manifest.push_str(&format!("{{\"id\":\"m{i}\",\"image\":\"m{i}.png\"}}\n"));
    }
    let p = dir.join("m.jsonl");
    std::fs::write(&p, manifest).unwrap();
    p
}

pub fn check_golden(name: &str, actual: &str) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e} (run with UPDATE_GOLDEN=1 to create)", path.display()));
    assert_eq!(actual, expected, "golden {name} changed");
}

fn temp_traces(dir: &Path) -> Vec<String> {
    std::fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(Result::ok)
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| n.starts_with(".item.json.tmp-"))
                .collect()
        })
        .unwrap_or_default()
}

/// Kills a stalled `recapd refine` while it is half-way through writing the
/// `nth` version of a trace and checks what a reader sees.
pub fn kill_during_trace_write(nth: usize) {
    let dir = tempfile::tempdir().unwrap();
    let store_dir = dir.path().join("store");
    let config = write_mock_config(dir.path(), &store_dir);
    let image = write_png(dir.path(), "a.png", 90);
    let mut child = bin()
        .args(["--config", config.to_str().unwrap(), "refine", image.to_str().unwrap()])
        .args(["--id", "item", "--run-id", "kill", "--iterations", "3"])
        .env(STALL_WRITES_ENV, "300")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();

    let traces = store_dir.join("runs/kill/traces");
    let trace_file = traces.join("item.json");
    let deadline = Instant::now() + Duration::from_secs(60);
    let mut completed_writes = 0;
    let mut seen = false;
    loop {
        assert!(Instant::now() < deadline, "no trace write observed");
        let tmp = temp_traces(&traces);
        if !tmp.is_empty() && !seen {
            seen = true;
            if completed_writes == nth {
                break;
            }
        } else if tmp.is_empty() && seen {
            seen = false;
            completed_writes += 1;
        }
        assert!(child.try_wait().unwrap().is_none(), "process finished before the kill");
        std::thread::sleep(Duration::from_millis(5));
    }
    child.kill().unwrap();
    child.wait().unwrap();

    // The half-written temp file is left behind but never read as a trace.
    assert!(!temp_traces(&traces).is_empty());
    let store = Store::open(&store_dir).unwrap();
    match store.load_trace("kill", "item") {
        Ok(t) => {
            assert!(nth > 0, "a trace appeared before its first write finished");
            t.check_shape().unwrap();
            assert!(!t.is_complete());
        }
        Err(StoreError::NotFound(_)) => {
            assert_eq!(nth, 0);
            assert!(!trace_file.exists());
        }
        Err(e) => panic!("partial trace surfaced as {e}"),
    }
    let ids = store.list_traces("kill").unwrap();
    assert_eq!(ids.len(), usize::from(nth > 0));
}

