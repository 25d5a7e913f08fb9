//! Greedy cascade decoding: the base model emits tokens until it calls, then a partner
//! model supplies the continuation.

mod calibrate;
mod partner;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use calibrate::{calibrate_threshold, CallCalibrator};
pub use partner::{
    connect_partner, Candidate, ExecPartner, LinePartner, Partner, PartnerError, PartnerRequest, PartnerResponse,
    ScriptedPartner,
};

use crate::model::LanguageModel;
use crate::tokenmap::{SubwordTokenizer, TokenError};

#[derive(Debug, Error)]
pub enum CascadeError {
    #[error("model vocabulary has {model} entries but the tokenizer has {tokenizer}")]
    VocabMismatch { model: usize, tokenizer: usize },
    #[error("no partner candidate has a valid encoding")]
    Unencodable,
    #[error("no candidates to map")]
    NoCandidates,
    #[error(transparent)]
    Token(#[from] TokenError),
}

/// How the `<CALL>` decision is made at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CallPolicy {
    /// Running-quantile threshold on the call logit.
    #[default]
    Calibrated,
    /// Call when the call logit is the largest logit.
    Argmax,
    /// Never call.
    Suppressed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub max_new_tokens: usize,
    pub repetition_penalty: f32,
    pub target_call_ratio: f64,
    pub window: usize,
    pub warmup: usize,
    pub policy: CallPolicy,
    pub max_retrieval_tokens: usize,
    pub max_candidates: usize,
    /// Partner retries after a failed query before falling back to the base model.
    pub partner_retries: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            max_new_tokens: 256,
            repetition_penalty: 1.2,
            target_call_ratio: 0.15,
            window: 512,
            warmup: 32,
            policy: CallPolicy::Calibrated,
            max_retrieval_tokens: 3,
            max_candidates: 5,
            partner_retries: 1,
        }
    }
}

/// What happened at one decision step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decision {
    Token {
        id: u32,
    },
    Call {
        candidate: usize,
        tokens: Vec<u32>,
        truncated: bool,
        text: String,
    },
    /// The partner failed; the base model's own argmax was emitted instead.
    Fallback {
        id: u32,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub call_logit: f32,
    /// `None` when the threshold is infinite.
    pub threshold: Option<f64>,
    pub best_token: u32,
    pub best_logit: f32,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub text: String,
    pub tokens: Vec<u32>,
    pub trace: Vec<TraceEntry>,
    pub calls_made: u64,
    pub tokens_emitted: u64,
    pub target_ratio: f64,
    pub realized_ratio: f64,
}

/// Generation state. The calibrator may be carried over between sessions.
pub struct CascadeSession<'a> {
    pub config: CascadeConfig,
    pub prompt: Vec<u32>,
    pub calibrator: CallCalibrator,
    pub tokenizer: &'a dyn SubwordTokenizer,
    pub partner: &'a dyn Partner,
}

impl<'a> CascadeSession<'a> {
    pub fn new(
        config: CascadeConfig,
        prompt: Vec<u32>,
        tokenizer: &'a dyn SubwordTokenizer,
        partner: &'a dyn Partner,
    ) -> Self {
        let calibrator = CallCalibrator::new(config.target_call_ratio, config.window, config.warmup);
        CascadeSession { config, prompt, calibrator, tokenizer, partner }
    }
}

/// Encodes a prompt, prefixed by the end-of-text token when the vocabulary has one.
pub fn encode_prompt(tokenizer: &dyn SubwordTokenizer, text: &str) -> Result<Vec<u32>, TokenError> {
    let mut ids: Vec<u32> = tokenizer.vocab().eot_id().into_iter().collect();
    ids.extend(tokenizer.encode(text)?);
    Ok(ids)
}

/// Divides positive logits and multiplies negative ones by `penalty` for every distinct
/// previously generated token. The `<CALL>` entry is never penalized.
pub fn apply_repetition_penalty(logits: &mut [f32], generated: &BTreeSet<u32>, penalty: f32, call_id: u32) {
    for &t in generated {
        if t == call_id {
            continue;
        }
        if let Some(l) = logits.get_mut(t as usize) {
            *l = if *l > 0.0 { *l / penalty } else { *l * penalty };
        }
    }
}

/// Index and value of the largest logit other than `exclude`; ties go to the lower index.
pub fn argmax_excluding(logits: &[f32], exclude: u32) -> (u32, f32) {
    let mut best = (u32::MAX, f32::NEG_INFINITY);
    for (i, &l) in logits.iter().enumerate() {
        if i as u32 != exclude && (best.0 == u32::MAX || l > best.1) {
            best = (i as u32, l);
        }
    }
    best
}

/// Result of mapping partner candidates onto base-vocabulary tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub candidate: usize,
    pub tokens: Vec<u32>,
    pub truncated: bool,
}

/// Encodes the best candidate that has a non-empty base encoding, keeping at most
/// `max_tokens` tokens. Candidates are considered by descending score, stable on ties.
pub fn map_retrieval(
    candidates: &[Candidate],
    tokenizer: &dyn SubwordTokenizer,
    max_tokens: usize,
) -> Result<Retrieval, CascadeError> {
    if candidates.is_empty() {
        return Err(CascadeError::NoCandidates);
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].score.total_cmp(&candidates[a].score));
    let call = tokenizer.vocab().call_token_id();
    for i in order {
        let Ok(mut tokens) = tokenizer.encode(&candidates[i].text) else { continue };
        if tokens.is_empty() || tokens.contains(&call) {
            continue;
        }
        let truncated = tokens.len() > max_tokens;
        tokens.truncate(max_tokens.max(1));
        return Ok(Retrieval { candidate: i, tokens, truncated });
    }
    Err(CascadeError::Unencodable)
}

fn query_partner(session: &CascadeSession, context: &[u32]) -> Result<Retrieval, String> {
    let text = session.tokenizer.decode(context).map_err(|e| e.to_string())?;
    let request = PartnerRequest { context: text, max_candidates: session.config.max_candidates };
    let mut last = String::new();
    for _ in 0..=session.config.partner_retries {
        match session.partner.query(&request) {
            Ok(candidates) => {
                return map_retrieval(&candidates, session.tokenizer, session.config.max_retrieval_tokens)
                    .map_err(|e| e.to_string())
            }
            Err(e) => last = e.to_string(),
        }
    }
    Err(last)
}

/// Runs greedy cascade decoding until `max_new_tokens` tokens or end-of-text.
pub fn generate(session: &mut CascadeSession, model: &dyn LanguageModel) -> Result<GenerationOutput, CascadeError> {
    let vocab = session.tokenizer.vocab();
    if model.vocab_size() != vocab.size() {
        return Err(CascadeError::VocabMismatch { model: model.vocab_size(), tokenizer: vocab.size() });
    }
    let call_id = vocab.call_token_id();
    let eot = vocab.eot_id();
    let cfg = session.config;
    let mut context = session.prompt.clone();
    let mut generated: Vec<u32> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut trace = Vec::new();
    let (mut calls_made, mut emitted) = (0u64, 0u64);

    while generated.len() < cfg.max_new_tokens {
        let mut logits = model.next_logits(&context);
        apply_repetition_penalty(&mut logits, &seen, cfg.repetition_penalty, call_id);
        let call_logit = logits[call_id as usize];
        let (best, best_logit) = argmax_excluding(&logits, call_id);
        let (wants_call, threshold) = match cfg.policy {
            CallPolicy::Suppressed => (false, f64::INFINITY),
            CallPolicy::Argmax => (call_logit >= best_logit, best_logit as f64),
            CallPolicy::Calibrated => {
                let t = session.calibrator.threshold();
                (call_logit as f64 >= t, t)
            }
        };
        let (decision, appended) = if wants_call {
            match query_partner(session, &context) {
                Ok(r) => {
                    let text = session.tokenizer.decode(&r.tokens)?;
                    let tokens = r.tokens.clone();
                    (Decision::Call { candidate: r.candidate, tokens: r.tokens, truncated: r.truncated, text }, tokens)
                }
                Err(reason) => {
                    log::warn!("partner failed, falling back to the base model: {reason}");
                    (Decision::Fallback { id: best, reason }, vec![best])
                }
            }
        } else {
            (Decision::Token { id: best }, vec![best])
        };
        let called = matches!(decision, Decision::Call { .. });
        if cfg.policy == CallPolicy::Calibrated {
            session.calibrator.record(call_logit, called);
        }
        calls_made += called as u64;
        emitted += 1;
        trace.push(TraceEntry {
            step: trace.len(),
            call_logit,
            threshold: threshold.is_finite().then_some(threshold),
            best_token: best,
            best_logit,
            decision,
        });
        let mut stop = false;
        for t in appended {
            if generated.len() == cfg.max_new_tokens {
                break;
            }
            context.push(t);
            generated.push(t);
            seen.insert(t);
            if Some(t) == eot {
                stop = true;
                break;
            }
        }
        if stop {
            break;
        }
    }
    let text_tokens: Vec<u32> = generated.iter().copied().filter(|&t| Some(t) != eot).collect();
    Ok(GenerationOutput {
        text: session.tokenizer.decode(&text_tokens)?,
        tokens: generated,
        trace,
        calls_made,
        tokens_emitted: emitted,
        target_ratio: cfg.target_call_ratio,
        realized_ratio: if emitted == 0 { 0.0 } else { calls_made as f64 / emitted as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::LogitSlab;
    use crate::tokenmap::{BpeTrainer, WordTokenizer};

    /// Logits are a fixed function of the last token: a lookup table.
    struct TableModel {
        table: Vec<Vec<f32>>,
    }

    impl LanguageModel for TableModel {
        fn vocab_size(&self) -> usize {
            self.table[0].len()
        }
        fn context_length(&self) -> usize {
            8
        }
        fn forward(&self, tokens: &[u32]) -> LogitSlab {
            let v = self.vocab_size();
            let data = tokens.iter().flat_map(|&t| self.table[t as usize].clone()).collect();
            LogitSlab::new(tokens.len(), v, data).unwrap()
        }
    }

    fn words() -> WordTokenizer {
        WordTokenizer::new(["<|endoftext|>", "a", "b", "c", "d"].iter().map(|s| s.to_string()).collect()).unwrap()
    }

    /// Hand-written greedy decoding with repetition penalty, used as the no-call reference.
    fn plain_greedy(model: &TableModel, prompt: &[u32], steps: usize, penalty: f32, call: u32) -> Vec<u32> {
        let mut ctx = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..steps {
            let mut l = model.next_logits(&ctx);
            for &t in out.iter().collect::<BTreeSet<_>>() {
                let x: &mut f32 = &mut l[t as usize];
                *x = if *x > 0.0 { *x / penalty } else { *x * penalty };
            }
            l[call as usize] = f32::NEG_INFINITY;
            let best = (0..l.len()).fold(0, |b, i| if l[i] > l[b] { i } else { b }) as u32;
            ctx.push(best);
            out.push(best);
            if best == 0 {
                break;
            }
        }
        out
    }

    fn model() -> TableModel {
        // Vocabulary: 0 eot, 1 a, 2 b, 3 c, 4 d, 5 CALL.
        TableModel {
            table: vec![
                vec![-1.0, 2.0, 1.9, 0.0, 0.0, -5.0],
                vec![-1.0, 0.5, 2.0, 1.8, -0.5, 1.0],
                vec![-1.0, 1.5, 0.2, 1.4, 1.0, 3.0],
                vec![-2.0, 1.0, 0.9, 0.1, 1.1, -3.0],
                vec![0.5, 0.4, 0.3, 0.2, 0.1, 0.0],
                vec![0.0; 6],
            ],
        }
    }

    #[test]
    fn suppressed_calls_equal_plain_greedy() {
        let tok = words();
        let partner = ScriptedPartner::constant("d");
        let m = model();
        let cfg = CascadeConfig { max_new_tokens: 12, policy: CallPolicy::Suppressed, ..Default::default() };
        let mut s = CascadeSession::new(cfg, vec![0], &tok, &partner);
        let out = generate(&mut s, &m).unwrap();
        assert_eq!(out.tokens, plain_greedy(&m, &[0], 12, 1.2, 5));
        assert_eq!(out.calls_made, 0);
        assert!(partner.contexts().is_empty());
    }

    #[test]
    fn scripted_partner_interleaving() {
        // Hand trace with argmax calling, penalty 1.2, max 5 tokens, prompt [eot]:
        // 1. after eot: best a (2.0), call -5 -> a
        // 2. after a: b 2.0 > call 1.0 -> b
        // 3. after b: call 3.0 >= a 1.5 -> partner "d" -> d
        // 4. after d: eot 0.5 vs a 0.4/1.2; b 0.3; d penalized 0.1/1.2; call 0.0 -> eot, stop
        let tok = words();
        let partner = ScriptedPartner::constant("d");
        let cfg = CascadeConfig { max_new_tokens: 5, policy: CallPolicy::Argmax, ..Default::default() };
        let mut s = CascadeSession::new(cfg, vec![0], &tok, &partner);
        let out = generate(&mut s, &model()).unwrap();
        assert_eq!(out.tokens, [1, 2, 4, 0]);
        assert_eq!(out.calls_made, 1);
        assert_eq!(out.tokens_emitted, 4);
        assert_eq!(out.trace.len() as u64, out.tokens_emitted);
        let calls = out.trace.iter().filter(|t| matches!(t.decision, Decision::Call { .. })).count();
        assert_eq!(calls as u64, out.calls_made);
        assert_eq!(partner.contexts(), ["<|endoftext|> a b"]);
        assert_eq!(out.text, "a b d");
    }

    #[test]
    fn partner_failure_retries_then_falls_back() {
        let tok = words();
        let partner = ScriptedPartner::new(vec![PartnerResponse { candidates: vec![], error: Some("down".into()) }]);
        let cfg = CascadeConfig { max_new_tokens: 1, policy: CallPolicy::Argmax, ..Default::default() };
        let mut s = CascadeSession::new(cfg, vec![2], &tok, &partner);
        let out = generate(&mut s, &model()).unwrap();
        assert!(matches!(out.trace[0].decision, Decision::Fallback { id: 1, .. }));
        assert_eq!(out.calls_made, 0);
        assert_eq!(partner.contexts().len(), 2);
    }

    #[test]
    fn retrieval_mapping() {
        let tok = BpeTrainer { vocab_size: 300, min_frequency: 2 }.train(["born in 1769 and 1821"]).unwrap();
        let c = |t: &str, s: f64| Candidate { text: t.into(), score: s };
        let r = map_retrieval(&[c(" 1769", 0.0)], &tok, 3).unwrap();
        assert_eq!(r.tokens.len(), 3);
        assert!(r.truncated);
        assert!(" 1769".starts_with(&tok.decode(&r.tokens).unwrap()));
        let r = map_retrieval(&[c("\u{4e2d}", 0.9), c(" in", 0.5)], &tok, 3).unwrap();
        assert_eq!(r.candidate, 1);
        assert_eq!(tok.decode(&r.tokens).unwrap(), " in");
        assert!(matches!(map_retrieval(&[c("\u{4e2d}", 1.0)], &tok, 3), Err(CascadeError::Unencodable)));
        assert!(matches!(map_retrieval(&[], &tok, 3), Err(CascadeError::NoCandidates)));
    }

    #[test]
    fn repetition_penalty_skips_call() {
        let mut l = vec![2.0, -2.0, 4.0];
        apply_repetition_penalty(&mut l, &[0, 1, 2].into_iter().collect(), 2.0, 2);
        assert_eq!(l, [1.0, -4.0, 4.0]);
    }
}
