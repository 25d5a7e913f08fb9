//! Partner adapters speaking a line-delimited JSON protocol.
//!
//! Request, one line: `{"context": "...", "max_candidates": 5}`.
//! Response, one line: `{"candidates": [{"text": "...", "score": -0.1}, ...]}` ordered by
//! descending score, or `{"error": "..."}`.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartnerError {
    #[error("partner I/O error: {0}")]
    Io(String),
    #[error("partner protocol error: {0}")]
    Protocol(String),
    #[error("partner reported an error: {0}")]
    Remote(String),
    #[error("partner returned no candidates")]
    Empty,
    #[error("invalid partner specification {0:?}; expected mock:<script>, exec:<command> or tcp:<host:port>")]
    Spec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartnerRequest {
    pub context: String,
    pub max_candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PartnerResponse {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PartnerResponse {
    fn into_result(self) -> Result<Vec<Candidate>, PartnerError> {
        if let Some(e) = self.error {
            return Err(PartnerError::Remote(e));
        }
        if self.candidates.is_empty() {
            return Err(PartnerError::Empty);
        }
        Ok(self.candidates)
    }
}

/// A model that continues text when the base model calls. Must tolerate concurrent use.
pub trait Partner: Send + Sync {
    fn query(&self, request: &PartnerRequest) -> Result<Vec<Candidate>, PartnerError>;
}

/// Replays a fixed list of responses in order, cycling when exhausted.
#[derive(Debug)]
pub struct ScriptedPartner {
    responses: Vec<PartnerResponse>,
    state: Mutex<(usize, Vec<String>)>,
}

impl ScriptedPartner {
    pub fn new(responses: Vec<PartnerResponse>) -> Self {
        ScriptedPartner { responses, state: Mutex::new((0, Vec::new())) }
    }

    /// One response per line in protocol format; blank lines and `#` comments are skipped.
    pub fn from_script(script: &str) -> Result<Self, PartnerError> {
        let responses = script
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| PartnerError::Protocol(format!("script line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if responses.is_empty() {
            return Err(PartnerError::Protocol("script has no responses".into()));
        }
        Ok(Self::new(responses))
    }

    /// A partner that always answers with one piece of text.
    pub fn constant(text: &str) -> Self {
        Self::new(vec![PartnerResponse { candidates: vec![Candidate { text: text.into(), score: 0.0 }], error: None }])
    }

    /// Contexts received so far.
    pub fn contexts(&self) -> Vec<String> {
        self.state.lock().expect("partner state").1.clone()
    }
}

impl Partner for ScriptedPartner {
    fn query(&self, request: &PartnerRequest) -> Result<Vec<Candidate>, PartnerError> {
        let mut state = self.state.lock().expect("partner state");
        let response = self.responses[state.0 % self.responses.len()].clone();
        state.0 += 1;
        state.1.push(request.context.clone());
        let mut candidates = response.into_result()?;
        candidates.truncate(request.max_candidates.max(1));
        Ok(candidates)
    }
}

/// Protocol client over any line-oriented byte stream.
pub struct LinePartner<R: BufRead + Send, W: Write + Send> {
    io: Mutex<(R, W)>,
}

impl<R: BufRead + Send, W: Write + Send> LinePartner<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        LinePartner { io: Mutex::new((reader, writer)) }
    }
}

impl<R: BufRead + Send, W: Write + Send> Partner for LinePartner<R, W> {
    fn query(&self, request: &PartnerRequest) -> Result<Vec<Candidate>, PartnerError> {
        let mut io = self.io.lock().expect("partner stream");
        let line = serde_json::to_string(request).expect("request serializes");
        let io_err = |e: std::io::Error| PartnerError::Io(e.to_string());
        writeln!(io.1, "{line}").map_err(io_err)?;
        io.1.flush().map_err(io_err)?;
        let mut reply = String::new();
        if io.0.read_line(&mut reply).map_err(io_err)? == 0 {
            return Err(PartnerError::Io("partner closed the stream".into()));
        }
        let response: PartnerResponse =
            serde_json::from_str(reply.trim_end()).map_err(|e| PartnerError::Protocol(e.to_string()))?;
        response.into_result()
    }
}

/// Subprocess partner; the child is killed when the adapter is dropped.
pub struct ExecPartner {
    inner: LinePartner<BufReader<ChildStdout>, ChildStdin>,
    child: Child,
}

impl ExecPartner {
    pub fn spawn(command: &str) -> Result<Self, PartnerError> {
        let mut parts = command.split_whitespace();
        let program = parts.next().ok_or_else(|| PartnerError::Spec(format!("exec:{command}")))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| PartnerError::Io(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(ExecPartner { inner: LinePartner::new(BufReader::new(stdout), stdin), child })
    }
}

impl Partner for ExecPartner {
    fn query(&self, request: &PartnerRequest) -> Result<Vec<Candidate>, PartnerError> {
        self.inner.query(request)
    }
}

impl Drop for ExecPartner {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Opens a partner from `mock:<script path>`, `exec:<command>` or `tcp:<host:port>`.
pub fn connect_partner(spec: &str) -> Result<Box<dyn Partner>, PartnerError> {
    if let Some(path) = spec.strip_prefix("mock:") {
        let script = std::fs::read_to_string(path).map_err(|e| PartnerError::Io(format!("{path}: {e}")))?;
        return Ok(Box::new(ScriptedPartner::from_script(&script)?));
    }
    if let Some(cmd) = spec.strip_prefix("exec:") {
        return Ok(Box::new(ExecPartner::spawn(cmd)?));
    }
    if let Some(addr) = spec.strip_prefix("tcp:") {
        let stream = TcpStream::connect(addr).map_err(|e| PartnerError::Io(format!("{addr}: {e}")))?;
        let reader = BufReader::new(stream.try_clone().map_err(|e| PartnerError::Io(e.to_string()))?);
        return Ok(Box::new(LinePartner::new(reader, stream)));
    }
    Err(PartnerError::Spec(spec.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req() -> PartnerRequest {
        PartnerRequest { context: "ctx".into(), max_candidates: 2 }
    }

    #[test]
    fn scripted_partner_cycles_and_records() {
        let p = ScriptedPartner::from_script(
            "# comment\n{\"candidates\":[{\"text\":\"a\",\"score\":1}]}\n\n{\"error\":\"down\"}\n",
        )
        .unwrap();
        assert_eq!(p.query(&req()).unwrap()[0].text, "a");
        assert_eq!(p.query(&req()), Err(PartnerError::Remote("down".into())));
        assert_eq!(p.query(&req()).unwrap()[0].text, "a");
        assert_eq!(p.contexts().len(), 3);
    }

    #[test]
    fn line_protocol_round_trip() {
        let reply = b"{\"candidates\":[{\"text\":\" 17\",\"score\":-0.5}]}\n".to_vec();
        let mut sent = Vec::new();
        {
            let p = LinePartner::new(&reply[..], &mut sent);
            assert_eq!(p.query(&req()).unwrap(), vec![Candidate { text: " 17".into(), score: -0.5 }]);
        }
        assert_eq!(String::from_utf8(sent).unwrap(), "{\"context\":\"ctx\",\"max_candidates\":2}\n");
    }

    #[test]
    fn closed_stream_and_garbage_are_errors() {
        let p = LinePartner::new(&b""[..], Vec::new());
        assert!(matches!(p.query(&req()), Err(PartnerError::Io(_))));
        let p = LinePartner::new(&b"nope\n"[..], Vec::new());
        assert!(matches!(p.query(&req()), Err(PartnerError::Protocol(_))));
        let p = LinePartner::new(&b"{\"candidates\":[]}\n"[..], Vec::new());
        assert_eq!(p.query(&req()), Err(PartnerError::Empty));
    }

    #[test]
    fn bad_spec() {
        assert!(matches!(connect_partner("http://x"), Err(PartnerError::Spec(_))));
    }
}
