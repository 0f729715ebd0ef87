//! Local HTTP server speaking the chat-completions and image-generation wire
//! shapes, answering from a fixture file keyed by canonical request hash.

use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use recap_core::hashing::canonical_hash;
use recap_core::Role;
use serde_json::{json, Value};
use tiny_http::{Header, Response, Server};

use crate::exit::{self, ExitClass};
use crate::mock;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error("cannot bind {addr}: {message}")]
    Bind { addr: String, message: String },
    #[error("cannot read fixtures {path}: {source}")]
    FixtureRead {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid fixtures {path}: {message}")]
    FixtureParse { path: PathBuf, message: String },
}

impl ExitClass for ServeError {
    fn exit_code(&self) -> i32 {
        match self {
            ServeError::FixtureParse { .. } => exit::PARSE,
            _ => exit::CONFIG,
        }
    }
}

/// Map from canonical request hash to the response body to serve.
pub type Fixtures = BTreeMap<String, Value>;

pub fn load_fixtures(path: &Path) -> Result<Fixtures, ServeError> {
    let text = fs::read_to_string(path).map_err(|source| ServeError::FixtureRead {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| ServeError::FixtureParse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Route {
    Chat,
    Images,
}

fn route(url: &str) -> Option<Route> {
    let path = url.split('?').next().unwrap_or_default();
    if path.ends_with("/chat/completions") {
        Some(Route::Chat)
    } else if path.ends_with("/images/generations") {
        Some(Route::Images)
    } else {
        None
    }
}

/// Status and JSON body for one request. Pure; used by the server loop.
pub fn answer(url: &str, body: &[u8], fixtures: &Fixtures, generate: bool) -> (u16, Value) {
    let Some(route) = route(url) else {
        return (404, json!({"error": format!("unknown path {url}")}));
    };
    let request: Value = match serde_json::from_slice(body) {
        Ok(v @ Value::Object(_)) => v,
        Ok(_) => return (400, json!({"error": "request body must be a JSON object"})),
        Err(e) => return (400, json!({"error": format!("malformed JSON: {e}")})),
    };
    let key = canonical_hash(&request);
    if let Some(found) = fixtures.get(&key) {
        return (200, found.clone());
    }
    if generate {
        let role = match route {
            Route::Images => Role::T2i,
            Route::Chat => mock::infer_chat_role(&request),
        };
        return (200, mock::respond(role, &request));
    }
    (404, json!({"error": format!("no fixture for request {key}"), "key": key}))
}

/// A running server; dropped or [`MockServer::shutdown`] stops it.
pub struct MockServer {
    server: Arc<Server>,
    addr: SocketAddr,
    requests: Arc<AtomicU64>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Binds `127.0.0.1:port` (0 picks a free port) and serves in a
    /// background thread.
    pub fn start(port: u16, fixtures: Fixtures, generate: bool) -> Result<Self, ServeError> {
        let addr = format!("127.0.0.1:{port}");
        let server = Server::http(&addr).map_err(|e| {
            let in_use = e
                .downcast_ref::<std::io::Error>()
                .is_some_and(|io| io.kind() == std::io::ErrorKind::AddrInUse);
            if in_use {
                ServeError::PortInUse(port)
            } else {
                ServeError::Bind {
                    addr: addr.clone(),
                    message: e.to_string(),
                }
            }
        })?;
        let addr = server.server_addr().to_ip().ok_or_else(|| ServeError::Bind {
            addr: addr.clone(),
            message: "not an IP listener".into(),
        })?;
        let server = Arc::new(server);
        let requests = Arc::new(AtomicU64::new(0));
        let handle = {
            let (server, requests) = (Arc::clone(&server), Arc::clone(&requests));
            std::thread::spawn(move || {
                for mut req in server.incoming_requests() {
                    requests.fetch_add(1, Ordering::SeqCst);
                    let mut body = Vec::new();
                    let (status, value) = match req.as_reader().read_to_end(&mut body) {
                        Ok(_) if req.method() == &tiny_http::Method::Post => {
                            answer(req.url(), &body, &fixtures, generate)
                        }
                        Ok(_) => (405, json!({"error": "use POST"})),
                        Err(e) => (400, json!({"error": e.to_string()})),
                    };
                    log::debug!("{} {} -> {status}", req.method(), req.url());
                    let header = Header::from_bytes("Content-Type", "application/json")
                        .expect("static header");
                    let response = Response::from_string(value.to_string())
                        .with_status_code(status)
                        .with_header(header);
                    if let Err(e) = req.respond(response) {
                        log::warn!("mock-serve: {e}");
                    }
                }
            })
        };
        Ok(Self {
            server,
            addr,
            requests,
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL for endpoint configs, e.g. `http://127.0.0.1:8080/v1`.
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    /// Blocks until the server stops (never, unless shut down elsewhere).
    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop();
    }
}
