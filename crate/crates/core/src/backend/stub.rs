//! Deterministic local completions server for tests and offline benchmarks.
//!
//! Replies come from a responder function, optionally preceded by a queue
//! of scripted replies (used for fault injection). Every request body is
//! recorded.

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::json;

use super::CompletionRequest;

#[derive(Debug, Clone, PartialEq)]
pub enum StubReply {
    Completion { text: String, finish_reason: String, eos: bool },
    /// One-token answer with these top alternatives.
    Logprobs(Vec<(String, f64)>),
    Status(u16),
    /// Valid JSON that is not a completion response.
    Garbage,
    /// Waits before sending the inner reply.
    Delayed(Duration, Box<StubReply>),
}

impl StubReply {
    pub fn step(text: impl Into<String>) -> Self {
        StubReply::Completion { text: text.into(), finish_reason: "stop".into(), eos: false }
    }

    pub fn truncated(text: impl Into<String>) -> Self {
        StubReply::Completion { text: text.into(), finish_reason: "length".into(), eos: false }
    }

    pub fn end_of_sequence(text: impl Into<String>) -> Self {
        StubReply::Completion { text: text.into(), finish_reason: "stop".into(), eos: true }
    }

    pub fn yes_no(yes: f64, no: f64) -> Self {
        StubReply::Logprobs(vec![("Yes".into(), yes), ("No".into(), no)])
    }
}

/// Which requests a scripted reply may answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplyFor {
    Any,
    /// Requests without log-probabilities.
    Generation,
    /// Requests asking for log-probabilities.
    Verification,
}

impl ReplyFor {
    fn matches(self, req: &CompletionRequest) -> bool {
        match self {
            ReplyFor::Any => true,
            ReplyFor::Generation => req.logprobs.is_none(),
            ReplyFor::Verification => req.logprobs.is_some(),
        }
    }
}

type Responder = dyn Fn(&CompletionRequest) -> StubReply + Send + Sync;

struct Shared {
    queue: Mutex<VecDeque<(ReplyFor, StubReply)>>,
    requests: Mutex<Vec<CompletionRequest>>,
    responder: Box<Responder>,
    active: Mutex<(usize, usize)>,
}

pub struct StubServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    server: Arc<tiny_http::Server>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(responder: impl Fn(&CompletionRequest) -> StubReply + Send + Sync + 'static) -> std::io::Result<Self> {
        let server = tiny_http::Server::http("127.0.0.1:0").map_err(std::io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("stub bound to a non-IP address"))?;
        let server = Arc::new(server);
        let shared = Arc::new(Shared {
            queue: Mutex::default(),
            requests: Mutex::default(),
            responder: Box::new(responder),
            active: Mutex::default(),
        });
        let stop = Arc::new(AtomicBool::new(false));
        let thread = {
            let (server, shared, stop) = (server.clone(), shared.clone(), stop.clone());
            std::thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    match server.recv_timeout(Duration::from_millis(50)) {
                        Ok(Some(req)) => {
                            let shared = shared.clone();
                            std::thread::spawn(move || handle(&shared, req));
                        }
                        Ok(None) => {}
                        Err(_) => break,
                    }
                }
            })
        };
        Ok(Self { addr, shared, server, stop, thread: Some(thread) })
    }

    /// Always answers generations with `text` and verifications with a
    /// confident Yes.
    pub fn constant(text: &str) -> std::io::Result<Self> {
        let text = text.to_owned();
        Self::start(move |req| if req.logprobs.is_some() { StubReply::yes_no(-0.01, -5.0) } else { StubReply::step(text.clone()) })
    }

    /// A short scripted reasoning chain: the i-th generation after the prompt
    /// is `step i`, and step `steps - 1` carries a boxed answer.
    pub fn reasoning(steps: usize) -> std::io::Result<Self> {
        Self::start(move |req| {
            if req.logprobs.is_some() {
                return StubReply::yes_no(-0.02, -4.0);
            }
            let delim = req.stop.first().map_or("\n\n", String::as_str);
            let i = req.prompt.matches(delim).count().saturating_sub(1);
            if i + 1 >= steps {
                StubReply::end_of_sequence(format!("step {i} so the answer is \\boxed{{{i}}}"))
            } else {
                StubReply::step(format!("step {i} continues the chain\n\n"))
            }
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Replies served, in order, before the responder is consulted again.
    pub fn push_replies(&self, replies: impl IntoIterator<Item = StubReply>) {
        self.push_replies_for(ReplyFor::Any, replies);
    }

    pub fn push_replies_for(&self, kind: ReplyFor, replies: impl IntoIterator<Item = StubReply>) {
        self.shared.queue.lock().unwrap().extend(replies.into_iter().map(|r| (kind, r)));
    }

    /// Fails the next `n` requests of any kind with `status`.
    pub fn fail_next(&self, n: usize, status: u16) {
        self.push_replies(std::iter::repeat_n(StubReply::Status(status), n));
    }

    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.shared.requests.lock().unwrap().clone()
    }

    /// Largest number of requests handled at once.
    pub fn peak_concurrency(&self) -> usize {
        self.shared.active.lock().unwrap().1
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn handle(shared: &Shared, mut req: tiny_http::Request) {
    {
        let mut a = shared.active.lock().unwrap();
        a.0 += 1;
        a.1 = a.1.max(a.0);
    }
    let mut body = String::new();
    let parsed = req
        .as_reader()
        .read_to_string(&mut body)
        .ok()
        .and_then(|_| serde_json::from_str::<CompletionRequest>(&body).ok());
    let (status, payload) = match parsed {
        None => (400, json!({"error": "bad request"}).to_string()),
        Some(creq) => {
            shared.requests.lock().unwrap().push(creq.clone());
            let scripted = {
                let mut queue = shared.queue.lock().unwrap();
                let at = queue.iter().position(|(kind, _)| kind.matches(&creq));
                at.and_then(|i| queue.remove(i)).map(|(_, r)| r)
            };
            let reply = scripted.unwrap_or_else(|| (shared.responder)(&creq));
            render(reply, &creq)
        }
    };
    let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
    let _ = req.respond(tiny_http::Response::from_string(payload).with_status_code(status).with_header(header));
    shared.active.lock().unwrap().0 -= 1;
}

fn render(reply: StubReply, req: &CompletionRequest) -> (u16, String) {
    match reply {
        StubReply::Delayed(d, inner) => {
            std::thread::sleep(d);
            render(*inner, req)
        }
        StubReply::Status(code) => (code, json!({"error": format!("injected {code}")}).to_string()),
        StubReply::Garbage => (200, json!({"unexpected": true}).to_string()),
        StubReply::Completion { text, finish_reason, eos } => {
            let mut text = text;
            // Servers strip the matched stop sequence.
            let mut matched = None;
            for s in &req.stop {
                if let Some(at) = text.find(s.as_str()) {
                    text.truncate(at);
                    matched = Some(s.clone());
                    break;
                }
            }
            let words = text.split_whitespace().count() as u64;
            let mut choice = json!({"index": 0, "text": text, "finish_reason": finish_reason, "logprobs": null});
            if eos {
                choice["stop_reason"] = serde_json::Value::Null;
            } else if let Some(s) = matched {
                choice["stop_reason"] = json!(s);
            }
            (200, json!({"object": "text_completion", "choices": [choice], "usage": {"completion_tokens": words}}).to_string())
        }
        StubReply::Logprobs(top) => {
            let k = req.logprobs.unwrap_or(0) as usize;
            let mut top = top;
            top.sort_by(|a, b| b.1.total_cmp(&a.1));
            top.truncate(k.max(1));
            let first = top.first().cloned().unwrap_or(("?".into(), 0.0));
            let map: serde_json::Map<String, serde_json::Value> = top.into_iter().map(|(t, l)| (t, json!(l))).collect();
            let choice = json!({
                "index": 0,
                "text": first.0,
                "finish_reason": "length",
                "logprobs": {"tokens": [first.0], "token_logprobs": [first.1], "top_logprobs": [map]},
            });
            (200, json!({"object": "text_completion", "choices": [choice], "usage": {"completion_tokens": 1}}).to_string())
        }
    }
}
