//! Subprocess-backed provider speaking JSON lines over stdio.
//!
//! The child first prints a handshake `{"hello":{"dim":D,"normalized":true}}`.
//! Requests are one object per line:
//!
//! ```text
//! {"id":"1","kind":"text","payload":"hello","lang":"en"}
//! {"id":"2","kind":"image","payload_b64":"iVBORw0..."}
//! ```
//!
//! and each response carries the request id with either `"vector"` or
//! `"error"`. Responses may arrive out of order.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde_json::{json, Value};

use super::{Embedding, EmbeddingProvider, ProviderError};
use crate::kg::Lang;

pub const DEFAULT_REQUEST_TIMEOUT: Duration = Duration::from_secs(30);

type Reply = Result<Vec<f32>, String>;

struct Channel {
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    pending: HashMap<String, Reply>,
    next_id: u64,
    dead: Option<String>,
}

pub struct ExternalProvider {
    dim: usize,
    normalized: bool,
    timeout: Duration,
    channel: Mutex<Channel>,
    child: Mutex<Child>,
}

impl std::fmt::Debug for ExternalProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalProvider")
            .field("dim", &self.dim)
            .field("normalized", &self.normalized)
            .finish_non_exhaustive()
    }
}

impl ExternalProvider {
    /// Runs `command` through `sh -c` and waits for its handshake.
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self, ProviderError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(ProviderError::Spawn)?;
        let stdin = child.stdin.take().expect("stdin piped");
        let stdout = child.stdout.take().expect("stdout piped");

        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });

        let hello = match rx.recv_timeout(timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(ProviderError::Crash(e.to_string())),
            Err(RecvTimeoutError::Timeout) => {
                let _ = child.kill();
                return Err(ProviderError::Timeout(timeout));
            }
            Err(RecvTimeoutError::Disconnected) => {
                let status = child.wait().ok();
                return Err(ProviderError::Crash(format!(
                    "exited before handshake ({status:?})"
                )));
            }
        };
        let (dim, normalized) = parse_hello(&hello)?;

        Ok(ExternalProvider {
            dim,
            normalized,
            timeout,
            channel: Mutex::new(Channel {
                stdin,
                lines: rx,
                pending: HashMap::new(),
                next_id: 1,
                dead: None,
            }),
            child: Mutex::new(child),
        })
    }

    fn request(&self, mut body: serde_json::Map<String, Value>) -> Result<Embedding, ProviderError> {
        let mut ch = self.channel.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(reason) = &ch.dead {
            return Err(ProviderError::Crash(reason.clone()));
        }
        let id = ch.next_id.to_string();
        ch.next_id += 1;
        body.insert("id".into(), Value::String(id.clone()));
        let line = Value::Object(body).to_string();
        if let Err(e) = writeln!(ch.stdin, "{line}").and_then(|_| ch.stdin.flush()) {
            let reason = format!("write failed: {e}");
            ch.dead = Some(reason.clone());
            return Err(ProviderError::Crash(reason));
        }

        let deadline = Instant::now() + self.timeout;
        loop {
            if let Some(reply) = ch.pending.remove(&id) {
                return self.finish(reply);
            }
            let left = deadline.saturating_duration_since(Instant::now());
            match ch.lines.recv_timeout(left) {
                Ok(Ok(line)) => {
                    let (rid, reply) = parse_reply(&line)?;
                    ch.pending.insert(rid, reply);
                }
                Ok(Err(e)) => {
                    let reason = format!("read failed: {e}");
                    ch.dead = Some(reason.clone());
                    return Err(ProviderError::Crash(reason));
                }
                Err(RecvTimeoutError::Timeout) => return Err(ProviderError::Timeout(self.timeout)),
                Err(RecvTimeoutError::Disconnected) => {
                    let status = self.child.lock().ok().and_then(|mut c| c.try_wait().ok().flatten());
                    let reason = match status {
                        Some(s) => format!("provider exited with {s}"),
                        None => "provider closed its output".to_string(),
                    };
                    ch.dead = Some(reason.clone());
                    return Err(ProviderError::Crash(reason));
                }
            }
        }
    }

    fn finish(&self, reply: Reply) -> Result<Embedding, ProviderError> {
        let values = reply.map_err(ProviderError::Provider)?;
        if values.len() != self.dim {
            return Err(ProviderError::Protocol(format!(
                "vector has {} components, handshake declared {}",
                values.len(),
                self.dim
            )));
        }
        Ok(Embedding::new(values)?)
    }
}

fn parse_hello(line: &str) -> Result<(usize, bool), ProviderError> {
    let bad = || ProviderError::Protocol(format!("expected handshake, got {line:?}"));
    let v: Value = serde_json::from_str(line).map_err(|_| bad())?;
    let hello = v.get("hello").ok_or_else(bad)?;
    let dim = hello
        .get("dim")
        .and_then(Value::as_u64)
        .filter(|d| *d > 0)
        .ok_or_else(bad)? as usize;
    let normalized = hello.get("normalized").and_then(Value::as_bool).unwrap_or(false);
    Ok((dim, normalized))
}

fn parse_reply(line: &str) -> Result<(String, Reply), ProviderError> {
    let v: Value = serde_json::from_str(line)
        .map_err(|e| ProviderError::Protocol(format!("malformed line {line:?}: {e}")))?;
    let id = match v.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => {
            let detail = v
                .get("error")
                .and_then(Value::as_str)
                .map(|e| format!(" (provider error: {e})"))
                .unwrap_or_default();
            return Err(ProviderError::Protocol(format!("response without id{detail}")));
        }
    };
    if let Some(err) = v.get("error") {
        let msg = err.as_str().map(str::to_string).unwrap_or_else(|| err.to_string());
        return Ok((id, Err(msg)));
    }
    let arr = v
        .get("vector")
        .and_then(Value::as_array)
        .ok_or_else(|| ProviderError::Protocol(format!("response {id} has neither vector nor error")))?;
    let values = arr
        .iter()
        .map(|x| x.as_f64().map(|f| f as f32))
        .collect::<Option<Vec<f32>>>()
        .ok_or_else(|| ProviderError::Protocol(format!("response {id} has a non-numeric component")))?;
    Ok((id, Ok(values)))
}

impl EmbeddingProvider for ExternalProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn normalized(&self) -> bool {
        self.normalized
    }

    fn embed_text(&self, text: &str, lang: Option<Lang>) -> Result<Embedding, ProviderError> {
        let mut body = json!({"kind": "text", "payload": text});
        if let Some(lang) = lang {
            body["lang"] = Value::String(lang.code().to_string());
        }
        self.request(body.as_object().cloned().unwrap_or_default())
    }

    fn embed_image(&self, bytes: &[u8]) -> Result<Embedding, ProviderError> {
        let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
        let body = json!({"kind": "image", "payload_b64": b64});
        self.request(body.as_object().cloned().unwrap_or_default())
    }
}

impl Drop for ExternalProvider {
    fn drop(&mut self) {
        if let Ok(child) = self.child.get_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
