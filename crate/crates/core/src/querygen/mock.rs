//! A local completion server for offline runs and tests.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::thread::JoinHandle;

use tiny_http::{Header, Method, Response, Server};

use crate::error::{Error, Result};

use super::client::{CompletionRequest, CompletionResponse};
use super::read_jsonl;

/// One recorded exchange in a replay transcript.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TranscriptEntry {
    pub prompt: String,
    pub completion: String,
}

/// Reads a JSONL transcript of `{"prompt", "completion"}` objects into a
/// lookup table. A later entry for the same prompt wins.
pub fn load_transcript(path: &Path) -> Result<HashMap<String, String>> {
    let entries: Vec<TranscriptEntry> = read_jsonl(path)?;
    Ok(entries.into_iter().map(|e| (e.prompt, e.completion)).collect())
}

/// Deterministic mock completion: the first `words` words of the target
/// document, i.e. the line before the trailing query cue with any leading
/// `Label:` removed. Ends with a newline and a stray explanation line so
/// callers exercise the first-line rule.
pub fn document_prefix_completion(prompt: &str, words: usize) -> String {
    let mut lines: Vec<&str> = prompt.trim_end().lines().collect();
    let target = if lines.len() >= 2 {
        lines.pop();
        lines.pop().unwrap_or("")
    } else {
        lines.pop().unwrap_or("")
    };
    let body = match target.split_once(": ") {
        Some((label, rest)) if !label.contains(' ') => rest,
        _ => target,
    };
    let query: Vec<&str> = body.split_whitespace().take(words).collect();
    format!(" {}\nExplanation: mock", query.join(" "))
}

#[derive(Debug, Clone)]
pub enum MockBehavior {
    DocumentPrefix { words: usize },
    Fixed(String),
    /// Prompt → completion, as recorded from a real endpoint.
    Replay(HashMap<String, String>),
    /// Answer every request with HTTP 500.
    Fail,
}

/// Serves the completion contract on `127.0.0.1`. Stops on drop.
pub struct MockServer {
    server: Arc<Server>,
    addr: SocketAddr,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(behavior: MockBehavior) -> Result<Self> {
        Self::bind("127.0.0.1:0", behavior)
    }

    pub fn bind(addr: &str, behavior: MockBehavior) -> Result<Self> {
        let server = Server::http(addr).map_err(|e| Error::Endpoint(format!("bind {addr}: {e}")))?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::Endpoint("mock server has no IP address".into()))?;
        let server = Arc::new(server);
        let worker = Arc::clone(&server);
        let handle = std::thread::spawn(move || {
            for request in worker.incoming_requests() {
                let _ = handle(request, &behavior);
            }
        });
        Ok(Self {
            server,
            addr,
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}/v1/completions", self.addr)
    }

    /// Blocks until the server is stopped from elsewhere.
    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn handle(mut request: tiny_http::Request, behavior: &MockBehavior) -> std::io::Result<()> {
    let json = Header::from_bytes("Content-Type", "application/json").expect("static header");
    if *request.method() != Method::Post {
        return request.respond(Response::from_string("{\"error\":\"POST only\"}").with_status_code(405));
    }
    let mut body = String::new();
    request.as_reader().read_to_string(&mut body)?;
    let parsed: std::result::Result<CompletionRequest, _> = serde_json::from_str(&body);
    let Ok(req) = parsed else {
        return request.respond(Response::from_string("{\"error\":\"bad request\"}").with_status_code(400));
    };
    let text = match behavior {
        MockBehavior::DocumentPrefix { words } => document_prefix_completion(&req.prompt, *words),
        MockBehavior::Fixed(t) => t.clone(),
        MockBehavior::Replay(map) => match map.get(&req.prompt) {
            Some(t) => t.clone(),
            None => {
                return request.respond(
                    Response::from_string("{\"error\":\"unknown prompt\"}").with_status_code(404),
                )
            }
        },
        MockBehavior::Fail => {
            return request.respond(Response::from_string("{\"error\":\"mock failure\"}").with_status_code(500))
        }
    };
    let payload = serde_json::to_string(&CompletionResponse::single(text)).expect("serializable");
    request.respond(Response::from_string(payload).with_header(json))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_takes_target_document() {
        let prompt = "Document: first example\nRelevant Query: q\n\nDocument: alpha beta gamma delta\nRelevant Query:";
        assert_eq!(
            document_prefix_completion(prompt, 3),
            " alpha beta gamma\nExplanation: mock"
        );
    }
}
