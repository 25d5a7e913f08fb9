//! Training loop: batch, forward, per-token losses, mask, masked objective, backward, AdamW.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use callmask::batching::{BatchLayout, TokenBatch, TokenStream};
use callmask::factlabel::WordClass;
use callmask::formats::{LossRecord, TokenLabelRecord};
use callmask::maskbuild::{batch_rng, batch_seed, build_mask, MaskError, Method, MethodSpec};
use callmask::model::LanguageModel;
use callmask::objective::{loss_with_masks, per_position_nll, ObjectiveError};
use callmask::provenance::Provenance;
use callmask::tokenmap::Vocabulary;

use crate::checkpoint::{write_checkpoint, CheckpointError};
use crate::model::{ModelConfig, Transformer};
use crate::optim::{clip_grad_norm, warmup_lr, AdamW, AdamWConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f32,
    pub warmup_steps: u64,
    pub seed: u64,
    pub method: MethodSpec,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f32,
    /// Keep training past `steps` until the tokens trained towards their true target match
    /// what a run without call or ignore masks would have trained.
    pub compensate: bool,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub adam: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 128,
            layers: 2,
            heads: 4,
            context: 256,
            batch_size: 8,
            steps: 1000,
            learning_rate: 1e-3,
            warmup_steps: 100,
            seed: 0,
            method: MethodSpec::new(Method::Baseline),
            grad_clip: 1.0,
            compensate: false,
            checkpoint_every: 0,
            adam: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 || self.steps == 0 || self.context == 0 {
            return bad("batch_size, steps and context must be positive");
        }
        if self.warmup_steps > self.steps {
            return bad("warmup_steps exceeds steps");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        self.method.validate()?;
        Ok(())
    }

    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        ModelConfig { vocab, context: self.context, dim: self.dim, layers: self.layers, heads: self.heads }
    }

    fn layout(&self) -> BatchLayout {
        BatchLayout { context: self.context, batch_size: self.batch_size }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("corpus is too short for one training window")]
    EmptyCorpus,
    #[error("token {token} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("loss diverged at step {step}; last good checkpoint: {checkpoint:?}")]
    Diverged { step: u64, checkpoint: Option<PathBuf> },
    #[error("reference losses cover {got} windows, the corpus has {expected}")]
    RefLosses { got: usize, expected: usize },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f32,
    pub loss: f64,
    pub grad_norm: f32,
    pub valid_tokens: usize,
    pub fact_tokens: usize,
    pub call_tokens: usize,
    pub calls_on_facts: usize,
    pub ignore_tokens: usize,
    /// Tokens trained towards their true target: valid minus called minus ignored.
    pub trained_tokens: usize,
    pub mask_warnings: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Transformer,
    pub metrics: Vec<StepMetrics>,
    pub steps_run: u64,
    /// Sum of `trained_tokens` over all steps.
    pub trained_tokens: u64,
    /// Valid tokens in the first `steps` batches; the compensation target.
    pub budget_tokens: u64,
}

/// Deterministic endless sequence of window indices, reshuffled every epoch.
struct WindowOrder {
    windows: usize,
    seed: u64,
    epoch: u64,
    perm: Vec<usize>,
    pos: usize,
}

impl WindowOrder {
    fn new(windows: usize, seed: u64) -> Self {
        WindowOrder { windows, seed, epoch: 0, perm: Vec::new(), pos: 0 }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.perm.len() {
            self.perm = (0..self.windows).collect();
            self.perm.shuffle(&mut batch_rng(self.seed, self.epoch));
            self.epoch += 1;
            self.pos = 0;
        }
        self.pos += 1;
        self.perm[self.pos - 1]
    }
}

/// Where checkpoints go; `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct CheckpointPlan {
    pub dir: Option<PathBuf>,
    pub provenance: Option<Provenance>,
}

impl CheckpointPlan {
    fn save(&self, name: &str, step: u64, model: &Transformer) -> Result<Option<PathBuf>, TrainError> {
        let Some(dir) = &self.dir else { return Ok(None) };
        std::fs::create_dir_all(dir)?;
        let path = dir.join(name);
        let prov = self.provenance.clone().unwrap_or_else(|| Provenance::new("train", &serde_json::Value::Null));
        let file = std::io::BufWriter::new(std::fs::File::create(&path)?);
        write_checkpoint(file, &prov, step, model)?;
        Ok(Some(path))
    }
}

fn seed_for(root: u64, stage: u64) -> u64 {
    batch_seed(root, stage)
}

const STAGE_INIT: u64 = 0x1417;
const STAGE_ORDER: u64 = 0x0DE2;

pub fn train(
    records: &[TokenLabelRecord],
    vocab: &Vocabulary,
    config: &TrainConfig,
    ref_losses: Option<&[LossRecord]>,
    checkpoints: &CheckpointPlan,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    let eot = vocab.eot_id().ok_or_else(|| TrainError::Config("vocabulary lacks the end-of-text token".into()))?;
    let call_id = vocab.call_token_id();
    let v = vocab.size();
    for r in records {
        if let Some(&token) = r.token_ids.iter().find(|&&t| t as usize >= v) {
            return Err(TrainError::TokenOutOfRange { token, vocab: v });
        }
    }
    let stream = TokenStream::from_records(records, eot);
    let windows = stream.window_count(config.context);
    if windows == 0 {
        return Err(TrainError::EmptyCorpus);
    }
    if let Some(r) = ref_losses {
        if r.len() != windows {
            return Err(TrainError::RefLosses { got: r.len(), expected: windows });
        }
    }
    let layout = config.layout();
    let mut model = Transformer::new(config.model_config(v), seed_for(config.seed, STAGE_INIT));
    let decay: Vec<bool> = {
        let mut d = vec![false; model.param_count()];
        for info in model.param_info() {
            d[info.offset..info.offset + info.len()].fill(info.decays());
        }
        d
    };
    let mut opt = AdamW::new(config.adam, decay);
    let mut order = WindowOrder::new(windows, seed_for(config.seed, STAGE_ORDER));
    let mut metrics = Vec::new();
    let (mut trained, mut budget) = (0u64, 0u64);
    let max_steps = if config.compensate { config.steps * 2 } else { config.steps };
    let mut step = 0u64;
    while step < max_steps {
        if step >= config.steps && (!config.compensate || trained >= budget) {
            break;
        }
        let picks: Vec<Option<usize>> = (0..config.batch_size).map(|_| Some(order.next())).collect();
        let batch = TokenBatch::from_windows(&stream, layout, step, &picks, eot);
        let cache = model.forward_train(&batch.inputs, batch.rows, batch.context);
        let slab = cache.slab(v);
        let losses = per_position_nll(&slab, &batch.targets, &batch.valid, call_id)?;
        let refs = ref_losses
            .map(|r| picks.iter().flat_map(|w| r[w.expect("every row is a window")].losses.iter().copied()).collect());
        let mask = build_mask(&batch.training_batch(losses, refs), &config.method)?;
        let out = loss_with_masks(&slab, &batch.targets, &mask, &batch.valid, call_id)?;
        if !out.loss.is_finite() {
            let checkpoint = checkpoints.save("last-good.ckpt", step, &model)?;
            return Err(TrainError::Diverged { step, checkpoint });
        }
        let mut grads = model.backward(&cache, &out.grad);
        let grad_norm = clip_grad_norm(&mut grads, config.grad_clip);
        if !grad_norm.is_finite() {
            let checkpoint = checkpoints.save("last-good.ckpt", step, &model)?;
            return Err(TrainError::Diverged { step, checkpoint });
        }
        let lr = warmup_lr(config.learning_rate, config.warmup_steps, step);
        opt.step(&mut model.params, &grads, lr);

        let valid = batch.valid.iter().filter(|&&b| b).count();
        let is_fact = |i: usize| batch.valid[i] && batch.classes[i] == WordClass::Fact;
        let m = StepMetrics {
            step,
            lr,
            loss: out.loss,
            grad_norm,
            valid_tokens: valid,
            fact_tokens: (0..batch.valid.len()).filter(|&i| is_fact(i)).count(),
            call_tokens: mask.call_count(),
            calls_on_facts: (0..batch.valid.len()).filter(|&i| mask.call[i] && is_fact(i)).count(),
            ignore_tokens: mask.ignore_count(),
            trained_tokens: (0..batch.valid.len())
                .filter(|&i| batch.valid[i] && !mask.call[i] && !mask.ignore[i])
                .count(),
            mask_warnings: mask.warnings.len(),
        };
        trained += m.trained_tokens as u64;
        if step < config.steps {
            budget += valid as u64;
        }
        on_step(&m);
        metrics.push(m);
        step += 1;
        if config.checkpoint_every > 0 && step.is_multiple_of(config.checkpoint_every) {
            checkpoints.save(&format!("step-{step:07}.ckpt"), step, &model)?;
        }
    }
    checkpoints.save("final.ckpt", step, &model)?;
    Ok(TrainOutput { model, metrics, steps_run: step, trained_tokens: trained, budget_tokens: budget })
}

/// Per-token losses of `model` on every canonical window, for use as reference losses.
/// Padding positions get 0.
pub fn dump_losses(
    model: &Transformer,
    records: &[TokenLabelRecord],
    vocab: &Vocabulary,
    context: usize,
) -> Result<Vec<LossRecord>, TrainError> {
    let eot = vocab.eot_id().ok_or_else(|| TrainError::Config("vocabulary lacks the end-of-text token".into()))?;
    let stream = TokenStream::from_records(records, eot);
    let layout = BatchLayout { context, batch_size: 1 };
    (0..stream.window_count(context))
        .map(|w| {
            let b = TokenBatch::from_windows(&stream, layout, w as u64, &[Some(w)], eot);
            let slab = model.forward_train(&b.inputs, 1, context).slab(vocab.size());
            let losses = per_position_nll(&slab, &b.targets, &b.valid, vocab.call_token_id())?;
            Ok(LossRecord { ordinal: w as u64, losses })
        })
        .collect()
}

/// Share of positions where `<CALL>` is the top logit, split into fact-labeled targets and
/// all other targets. Each document is scored from its own leading end-of-text token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CallTopRates {
    pub fact: f64,
    pub non_fact: f64,
    pub fact_positions: usize,
    pub non_fact_positions: usize,
}

pub fn call_top_rates(model: &dyn LanguageModel, records: &[TokenLabelRecord], vocab: &Vocabulary) -> CallTopRates {
    let call = vocab.call_token_id() as usize;
    let eot = vocab.eot_id().expect("vocabulary has end-of-text");
    let (mut fh, mut fn_, mut nh, mut nn) = (0usize, 0usize, 0usize, 0usize);
    for r in records {
        let mut ids = vec![eot];
        ids.extend_from_slice(&r.token_ids);
        let ctx = model.context_length();
        for start in (0..r.token_ids.len()).step_by(ctx) {
            let end = (start + ctx).min(r.token_ids.len());
            let slab = model.forward(&ids[start..end]);
            for (k, i) in (start..end).enumerate() {
                let row = slab.row(k);
                let top = row.iter().enumerate().all(|(j, &x)| j == call || row[call] >= x);
                if r.classes[i] == WordClass::Fact {
                    fn_ += 1;
                    fh += top as usize;
                } else {
                    nn += 1;
                    nh += top as usize;
                }
            }
        }
    }
    let ratio = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    CallTopRates { fact: ratio(fh, fn_), non_fact: ratio(nh, nn), fact_positions: fn_, non_fact_positions: nn }
}
