//! Client (and a reference server) for the model-bridge wire protocol:
//! newline-delimited JSON over a byte stream.
//!
//! ```text
//! {"op":"hello","proto":1}                          -> {"ok":true,"vocab_size":N,"bos":i,"eos":j,"name":s}
//! {"op":"frame","id":k,"tokens":[..],"with_context":b} -> {"ok":true,"id":k,"logprobs":[..]}
//! {"op":"close"}
//! ```
//!
//! Masked entries travel as the string `"-inf"`. Any `{"ok":false,"error":s}`
//! response aborts the client session.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::str::FromStr;

use gdec_core::frame::{check_log_probs, logprobs};
use gdec_core::{Error, ModelSession, Result, SessionDescriptor, TokenId};
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

/// Where the bridge lives: `stdio:PROGRAM ARGS...` or `tcp:HOST:PORT`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Stdio { program: String, args: Vec<String> },
    Tcp(String),
}

impl FromStr for Endpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(cmd) = s.strip_prefix("stdio:") {
            let mut parts = cmd.split_whitespace().map(String::from);
            let program = parts
                .next()
                .ok_or_else(|| Error::Config(format!("endpoint {s:?} names no program")))?;
            Ok(Endpoint::Stdio {
                program,
                args: parts.collect(),
            })
        } else if let Some(addr) = s.strip_prefix("tcp:") {
            if addr.is_empty() {
                return Err(Error::Config(format!("endpoint {s:?} names no address")));
            }
            Ok(Endpoint::Tcp(addr.to_string()))
        } else {
            Err(Error::Config(format!(
                "endpoint {s:?} must start with stdio: or tcp:"
            )))
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Hello {
        proto: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prompt: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        context: Option<String>,
    },
    Frame {
        id: u64,
        tokens: Vec<TokenId>,
        with_context: bool,
    },
    Close,
}

#[derive(Debug, Deserialize)]
struct HelloResponse {
    ok: bool,
    #[serde(default)]
    error: Option<String>,
    #[serde(default)]
    proto: Option<u32>,
    #[serde(default)]
    vocab_size: Option<usize>,
    #[serde(default)]
    bos: Option<TokenId>,
    #[serde(default)]
    eos: Option<TokenId>,
    #[serde(default)]
    name: Option<String>,
}

#[derive(Debug, Deserialize)]
struct FrameResponse {
    ok: bool,
    #[serde(default)]
    error: Option<String>,
    #[serde(default)]
    id: Option<u64>,
    #[serde(default, with = "opt_logprobs")]
    logprobs: Option<Vec<f64>>,
}

mod opt_logprobs {
    use serde::{Deserialize, Deserializer};

    #[derive(Deserialize)]
    struct Wrap(#[serde(with = "gdec_core::frame::logprobs")] Vec<f64>);

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<f64>>, D::Error> {
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

#[derive(Serialize)]
struct FrameReply<'a> {
    ok: bool,
    id: u64,
    #[serde(with = "logprobs")]
    logprobs: &'a [f64],
}

/// Session backed by a bridge process or socket.
pub struct BridgeSession {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
    descriptor: SessionDescriptor,
    next_id: u64,
    line: u64,
    cache: HashMap<(Vec<TokenId>, bool), Vec<f64>>,
    closed: bool,
}

impl std::fmt::Debug for BridgeSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeSession")
            .field("descriptor", &self.descriptor)
            .field("next_id", &self.next_id)
            .finish_non_exhaustive()
    }
}

fn protocol(msg: impl Into<String>) -> Error {
    Error::Protocol(msg.into())
}

/// Connects to `endpoint`, performs the handshake and returns a session for
/// `prompt` and the opaque `context_ref`.
pub fn open_bridge_session(
    endpoint: &Endpoint,
    prompt: &str,
    context_ref: &str,
) -> Result<BridgeSession> {
    match endpoint {
        Endpoint::Stdio { program, args } => {
            let mut child = Command::new(program)
                .args(args)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()
                .map_err(|e| protocol(format!("cannot start bridge {program:?}: {e}")))?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            let mut session = BridgeSession::handshake(
                Box::new(BufReader::new(stdout)),
                Box::new(stdin),
                prompt,
                context_ref,
            );
            if let Ok(s) = &mut session {
                s.child = Some(child);
            } else {
                let _ = child.kill();
                let _ = child.wait();
            }
            session
        }
        Endpoint::Tcp(addr) => {
            let stream = TcpStream::connect(addr)
                .map_err(|e| protocol(format!("cannot reach bridge at {addr}: {e}")))?;
            let read_half = stream
                .try_clone()
                .map_err(|e| protocol(format!("socket clone failed: {e}")))?;
            BridgeSession::handshake(
                Box::new(BufReader::new(read_half)),
                Box::new(stream),
                prompt,
                context_ref,
            )
        }
    }
}

impl BridgeSession {
    /// Runs the handshake over already connected streams.
    pub fn handshake(
        reader: Box<dyn BufRead + Send>,
        writer: Box<dyn Write + Send>,
        prompt: &str,
        context_ref: &str,
    ) -> Result<Self> {
        let mut session = BridgeSession {
            reader,
            writer,
            child: None,
            descriptor: SessionDescriptor {
                vocab_size: 0,
                bos_id: 0,
                eos_id: 0,
                model_name: String::new(),
            },
            next_id: 0,
            line: 0,
            cache: HashMap::new(),
            closed: false,
        };
        session.send(&Request::Hello {
            proto: PROTOCOL_VERSION,
            prompt: (!prompt.is_empty()).then(|| prompt.to_string()),
            context: (!context_ref.is_empty()).then(|| context_ref.to_string()),
        })?;
        let text = session.read_line()?;
        let hello: HelloResponse = serde_json::from_str(&text).map_err(|e| {
            protocol(format!(
                "malformed hello response at line {}: {e}",
                session.line
            ))
        })?;
        if !hello.ok {
            return Err(protocol(format!(
                "bridge refused handshake: {}",
                hello.error.unwrap_or_default()
            )));
        }
        if let Some(v) = hello.proto {
            if v != PROTOCOL_VERSION {
                return Err(protocol(format!(
                    "protocol version mismatch: bridge speaks {v}, client {PROTOCOL_VERSION}"
                )));
            }
        }
        let (Some(vocab_size), Some(bos_id), Some(eos_id)) =
            (hello.vocab_size, hello.bos, hello.eos)
        else {
            return Err(protocol(format!(
                "hello response at line {} lacks vocab_size/bos/eos",
                session.line
            )));
        };
        session.descriptor = SessionDescriptor {
            vocab_size,
            bos_id,
            eos_id,
            model_name: hello.name.unwrap_or_default(),
        };
        session
            .descriptor
            .validate()
            .map_err(|e| protocol(format!("bridge descriptor invalid: {e}")))?;
        Ok(session)
    }

    fn send(&mut self, req: &Request) -> Result<()> {
        let mut line = serde_json::to_string(req).expect("requests serialize");
        line.push('\n');
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| protocol(format!("write to bridge failed: {e}")))
    }

    fn read_line(&mut self) -> Result<String> {
        let mut buf = String::new();
        let n = self
            .reader
            .read_line(&mut buf)
            .map_err(|e| protocol(format!("read from bridge failed: {e}")))?;
        self.line += 1;
        if n == 0 {
            return Err(protocol(format!(
                "bridge closed the stream before line {}",
                self.line
            )));
        }
        Ok(buf)
    }

    fn request_frame(&mut self, prefix: &[TokenId], with_context: bool) -> Result<Vec<f64>> {
        let id = self.next_id;
        self.next_id += 1;
        self.send(&Request::Frame {
            id,
            tokens: prefix.to_vec(),
            with_context,
        })?;
        let text = self.read_line()?;
        let resp: FrameResponse = serde_json::from_str(&text)
            .map_err(|e| protocol(format!("malformed response at line {}: {e}", self.line)))?;
        if !resp.ok {
            return Err(protocol(format!(
                "bridge error for request {id}: {}",
                resp.error.unwrap_or_default()
            )));
        }
        if resp.id != Some(id) {
            return Err(protocol(format!(
                "response at line {} answers request {:?}, expected {id}",
                self.line, resp.id
            )));
        }
        let lp = resp.logprobs.ok_or_else(|| {
            protocol(format!(
                "response at line {} carries no logprobs",
                self.line
            ))
        })?;
        if lp.len() != self.descriptor.vocab_size {
            return Err(Error::ContractViolation {
                id,
                detail: format!(
                    "{} entries, vocabulary is {}",
                    lp.len(),
                    self.descriptor.vocab_size
                ),
            });
        }
        check_log_probs(&lp).map_err(|detail| Error::ContractViolation { id, detail })?;
        Ok(lp)
    }

    /// Sends `close` and reaps the bridge process.
    pub fn close(mut self) -> Result<()> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> Result<()> {
        if self.closed {
            return Ok(());
        }
        self.closed = true;
        let sent = self.send(&Request::Close);
        if let Some(mut child) = self.child.take() {
            // dropping stdin signals EOF to bridges that ignore close
            self.writer = Box::new(io::sink());
            let _ = child.wait();
        }
        sent
    }
}

impl Drop for BridgeSession {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

impl ModelSession for BridgeSession {
    fn descriptor(&self) -> &SessionDescriptor {
        &self.descriptor
    }

    fn frame_for(&mut self, prefix: &[TokenId], include_context: bool) -> Result<Vec<f64>> {
        let key = (prefix.to_vec(), include_context);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit.clone());
        }
        let lp = self.request_frame(prefix, include_context)?;
        self.cache.insert(key, lp.clone());
        Ok(lp)
    }
}

/// Counters from one [`serve`] run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub frames: u64,
    pub errors: u64,
}

fn reply_error(w: &mut impl Write, msg: &str) -> io::Result<()> {
    let line = serde_json::json!({ "ok": false, "error": msg });
    writeln!(w, "{line}")?;
    w.flush()
}

/// Serves `session` over the protocol until `close` or end of input.
/// Per-request failures are answered with `ok: false` and serving continues.
pub fn serve<S: ModelSession + ?Sized>(
    session: &mut S,
    reader: impl BufRead,
    mut writer: impl Write,
) -> io::Result<ServeStats> {
    let mut stats = ServeStats::default();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: Request = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                stats.errors += 1;
                reply_error(&mut writer, &format!("bad request: {e}"))?;
                continue;
            }
        };
        match req {
            Request::Hello { proto, .. } => {
                if proto != PROTOCOL_VERSION {
                    stats.errors += 1;
                    reply_error(&mut writer, &format!("unsupported protocol {proto}"))?;
                    continue;
                }
                let d = session.descriptor();
                let reply = serde_json::json!({
                    "ok": true,
                    "proto": PROTOCOL_VERSION,
                    "vocab_size": d.vocab_size,
                    "bos": d.bos_id,
                    "eos": d.eos_id,
                    "name": d.model_name,
                });
                writeln!(writer, "{reply}")?;
                writer.flush()?;
            }
            Request::Frame {
                id,
                tokens,
                with_context,
            } => match session.frame_for(&tokens, with_context) {
                Ok(lp) => {
                    stats.frames += 1;
                    let reply = FrameReply {
                        ok: true,
                        id,
                        logprobs: &lp,
                    };
                    let text = serde_json::to_string(&reply).map_err(io::Error::other)?;
                    writeln!(writer, "{text}")?;
                    writer.flush()?;
                }
                Err(e) => {
                    stats.errors += 1;
                    reply_error(&mut writer, &e.to_string())?;
                }
            },
            Request::Close => break,
        }
    }
    Ok(stats)
}
