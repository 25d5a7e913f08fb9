//! Acceptability judging over the partner protocol.
//!
//! The filled prompt is sent as the request context with `max_candidates = 1`; the top
//! candidate's text is the judge's reply.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{Candidate, Partner, PartnerError, PartnerRequest};

/// The judge prompt with three `'{}'` slots: starting text, proposed token, reference token.
pub const ACCEPTABILITY_TEMPLATE: &str = include_str!("../../../../fixtures/prompts/acceptability.txt");

const PROPOSED_FIELD: &str = "**proposed_next_token**: '";
const REFERENCE_FIELD: &str = "**reference_next_token**: '";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JudgeError {
    #[error("judge reply has no parseable output label: {0:?}")]
    Parse(String),
    #[error(transparent)]
    Partner(#[from] PartnerError),
    #[error("judge table line {line}: {message}")]
    Table { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub explanation: String,
    /// 1 when the proposed token is acceptable.
    pub output: u8,
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

/// Fills the template; backslashes and newlines in the fields are escaped.
pub fn fill_template(starting_text: &str, proposed: &str, reference: &str) -> String {
    let template = ACCEPTABILITY_TEMPLATE.strip_suffix('\n').unwrap_or(ACCEPTABILITY_TEMPLATE);
    let mut out = String::with_capacity(template.len() + starting_text.len() + 32);
    let mut fields = [starting_text, proposed, reference].into_iter();
    let mut rest = template;
    while let Some(at) = rest.find("{}") {
        out.push_str(&rest[..at]);
        out.push_str(&escape(fields.next().expect("template has three slots")));
        rest = &rest[at + 2..];
    }
    out.push_str(rest);
    out
}

/// Reads the label after the last `**output**:` and the text after the last `**explanation**:`.
pub fn parse_verdict(reply: &str) -> Result<JudgeVerdict, JudgeError> {
    let err = || JudgeError::Parse(reply.chars().take(200).collect());
    let at = reply.rfind("**output**:").ok_or_else(err)?;
    let tail = reply[at + "**output**:".len()..].trim_start();
    let output = match tail.as_bytes() {
        [b @ (b'0' | b'1'), rest @ ..] if rest.first().is_none_or(|c| !c.is_ascii_digit()) => b - b'0',
        _ => return Err(err()),
    };
    let explanation = reply[..at]
        .rfind("**explanation**:")
        .map(|e| reply[e + "**explanation**:".len()..at].trim().to_string())
        .unwrap_or_default();
    Ok(JudgeVerdict { explanation, output })
}

/// Asks the judge once, retrying once on a failed query or unparseable reply.
pub fn judge_acceptability(
    starting_text: &str,
    proposed: &str,
    reference: &str,
    judge: &dyn Partner,
) -> Result<JudgeVerdict, JudgeError> {
    let request = PartnerRequest { context: fill_template(starting_text, proposed, reference), max_candidates: 1 };
    let attempt = || -> Result<JudgeVerdict, JudgeError> {
        let reply = judge.query(&request)?;
        parse_verdict(&reply[0].text)
    };
    attempt().or_else(|e| {
        log::warn!("judge attempt failed, retrying: {e}");
        attempt()
    })
}

/// Judges `(starting_text, proposed, reference)` triples with at most `max_in_flight`
/// concurrent requests. Results keep input order.
pub fn judge_many(
    items: &[(String, String, String)],
    judge: &dyn Partner,
    max_in_flight: usize,
) -> Vec<Result<JudgeVerdict, JudgeError>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<JudgeVerdict, JudgeError>>>> = Mutex::new(vec![None; items.len()]);
    std::thread::scope(|scope| {
        for _ in 0..max_in_flight.clamp(1, items.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((s, p, r)) = items.get(i) else { break };
                let v = judge_acceptability(s, p, r, judge);
                results.lock().expect("judge results")[i] = Some(v);
            });
        }
    });
    results.into_inner().expect("judge results").into_iter().map(|r| r.expect("every item judged")).collect()
}

/// Offline judge: identical tokens are acceptable, listed pairs take the table verdict,
/// anything else is unacceptable.
#[derive(Debug, Clone, Default)]
pub struct MockJudge {
    table: BTreeMap<(String, String), u8>,
}

impl MockJudge {
    /// Tab-separated `proposed`, `reference`, `0|1` lines; `#` starts a comment line.
    pub fn from_tsv(text: &str) -> Result<Self, JudgeError> {
        let mut table = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = |message: &str| JudgeError::Table { line: i + 1, message: message.into() };
            if cols.len() != 3 {
                return Err(bad("expected three tab-separated columns"));
            }
            let verdict = match cols[2].trim() {
                "0" => 0,
                "1" => 1,
                _ => return Err(bad("verdict must be 0 or 1")),
            };
            table.insert((cols[0].to_string(), cols[1].to_string()), verdict);
        }
        Ok(MockJudge { table })
    }

    pub fn verdict(&self, proposed: &str, reference: &str) -> u8 {
        if proposed == reference {
            return 1;
        }
        self.table.get(&(proposed.to_string(), reference.to_string())).copied().unwrap_or(0)
    }
}

fn task_field<'a>(prompt: &'a str, field: &str, next: &str) -> Option<&'a str> {
    let start = prompt.rfind(field)? + field.len();
    let end = start + prompt[start..].find(next)?;
    Some(&prompt[start..end])
}

impl Partner for MockJudge {
    fn query(&self, request: &PartnerRequest) -> Result<Vec<Candidate>, PartnerError> {
        let p = &request.context;
        let fields = task_field(p, PROPOSED_FIELD, &format!("'\n{REFERENCE_FIELD}"))
            .zip(p.rfind(REFERENCE_FIELD).map(|at| &p[at + REFERENCE_FIELD.len()..]))
            .and_then(|(proposed, tail)| tail.rfind('\'').map(|end| (proposed, &tail[..end])));
        let Some((proposed, reference)) = fields else {
            return Err(PartnerError::Protocol("prompt lacks the task fields".into()));
        };
        let (proposed, reference) = (unescape(proposed), unescape(reference));
        let output = self.verdict(&proposed, &reference);
        let explanation = if proposed == reference {
            "The proposed_next_token matches reference_next_token.".to_string()
        } else {
            format!("Table verdict for '{proposed}' against '{reference}'.")
        };
        Ok(vec![Candidate { text: format!("**explanation**: {explanation}\n**output**: {output}"), score: 0.0 }])
    }
}
