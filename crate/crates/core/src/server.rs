//! Deterministic embedding service for integration tests.
//!
//! Serves the hashed provider over the `/embed` wire protocol:
//! `POST /embed {"texts": [str]}` → `{"embeddings": [[number]]}`.

use crate::embeddings::HashedProvider;
use crate::error::{Error, Result};
use serde::Deserialize;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

#[derive(Deserialize)]
struct EmbedRequest {
    texts: Vec<String>,
}

pub struct EchoEmbedServer {
    server: Arc<tiny_http::Server>,
    addr: String,
    requests: Arc<AtomicUsize>,
    shutdown: Arc<AtomicBool>,
    handles: Vec<JoinHandle<()>>,
}

impl EchoEmbedServer {
    /// Bind and start serving. `bind` like `"127.0.0.1:0"` picks a free
    /// port; workers handle requests independently.
    pub fn start(bind: &str, dim: usize, workers: usize) -> Result<Self> {
        let server = Arc::new(
            tiny_http::Server::http(bind)
                .map_err(|e| Error::Provider(format!("cannot bind {bind}: {e}")))?,
        );
        let addr = server.server_addr().to_string();
        let requests = Arc::new(AtomicUsize::new(0));
        let shutdown = Arc::new(AtomicBool::new(false));
        let mut handles = Vec::new();
        for _ in 0..workers.max(1) {
            let server = Arc::clone(&server);
            let requests = Arc::clone(&requests);
            let shutdown = Arc::clone(&shutdown);
            let provider = HashedProvider::new(dim);
            handles.push(std::thread::spawn(move || {
                while !shutdown.load(Ordering::Relaxed) {
                    match server.recv_timeout(Duration::from_millis(50)) {
                        Ok(Some(request)) => {
                            requests.fetch_add(1, Ordering::Relaxed);
                            handle(request, &provider);
                        }
                        Ok(None) => continue,
                        Err(_) => break,
                    }
                }
            }));
        }
        Ok(Self {
            server,
            addr,
            requests,
            shutdown,
            handles,
        })
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}/embed", self.addr)
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    /// Requests handled so far.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }

    /// Serve until the process ends.
    pub fn join(mut self) {
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }

    pub fn stop(mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        self.server.unblock();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

fn handle(mut request: tiny_http::Request, provider: &HashedProvider) {
    let ok_json = |body: String| {
        tiny_http::Response::from_string(body).with_header(
            tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).unwrap(),
        )
    };
    if request.method() != &tiny_http::Method::Post || request.url() != "/embed" {
        let _ = request.respond(
            tiny_http::Response::from_string("{\"error\":\"POST /embed only\"}")
                .with_status_code(404),
        );
        return;
    }
    let mut body = String::new();
    if request.as_reader().read_to_string(&mut body).is_err() {
        let _ = request
            .respond(tiny_http::Response::from_string("{\"error\":\"unreadable body\"}").with_status_code(400));
        return;
    }
    match serde_json::from_str::<EmbedRequest>(&body) {
        Ok(req) => {
            let vectors: Vec<Vec<f64>> = req
                .texts
                .iter()
                .map(|t| provider.embed_one(t).values().to_vec())
                .collect();
            let body = serde_json::json!({ "embeddings": vectors }).to_string();
            let _ = request.respond(ok_json(body));
        }
        Err(e) => {
            let _ = request.respond(
                tiny_http::Response::from_string(format!("{{\"error\":\"{e}\"}}"))
                    .with_status_code(400),
            );
        }
    }
}
