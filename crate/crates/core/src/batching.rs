//! Canonical layout of a token-label corpus into fixed-size training windows.
//!
//! Documents are concatenated, each preceded by the end-of-text token. The stream is cut
//! into windows of `context + 1` tokens with stride `context`; inputs are the first
//! `context` tokens and targets the last `context`. Labels follow the targets. The tail
//! window and the tail batch are padded with end-of-text tokens marked invalid.

use serde::{Deserialize, Serialize};

use crate::factlabel::WordClass;
use crate::formats::TokenLabelRecord;
use crate::maskbuild::TrainingBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchLayout {
    pub context: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenStream {
    pub ids: Vec<u32>,
    pub classes: Vec<WordClass>,
    pub calls: Vec<bool>,
}

impl TokenStream {
    pub fn from_records(records: &[TokenLabelRecord], eot: u32) -> Self {
        let mut s = TokenStream::default();
        for rec in records {
            s.ids.push(eot);
            s.classes.push(WordClass::Other);
            s.calls.push(false);
            s.ids.extend_from_slice(&rec.token_ids);
            s.classes.extend_from_slice(&rec.classes);
            s.calls.extend_from_slice(&rec.calls);
        }
        s
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of windows of the given context length.
    pub fn window_count(&self, context: usize) -> usize {
        self.len().saturating_sub(1).div_ceil(context)
    }
}

/// Inputs and aligned target labels for a group of windows, flattened row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ordinal: u64,
    pub rows: usize,
    pub context: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub classes: Vec<WordClass>,
    pub judge_calls: Vec<bool>,
    pub valid: Vec<bool>,
}

impl TokenBatch {
    /// Assembles a batch from window indices; `None` entries are fully padded rows.
    pub fn from_windows(
        stream: &TokenStream,
        layout: BatchLayout,
        ordinal: u64,
        windows: &[Option<usize>],
        eot: u32,
    ) -> Self {
        let ctx = layout.context;
        let n = layout.batch_size * ctx;
        let mut b = TokenBatch {
            ordinal,
            rows: layout.batch_size,
            context: ctx,
            inputs: vec![eot; n],
            targets: vec![eot; n],
            classes: vec![WordClass::Other; n],
            judge_calls: vec![false; n],
            valid: vec![false; n],
        };
        for (row, w) in windows.iter().take(layout.batch_size).enumerate() {
            let Some(w) = *w else { continue };
            let start = w * ctx;
            for k in 0..ctx {
                let at = row * ctx + k;
                if start + k < stream.len() {
                    b.inputs[at] = stream.ids[start + k];
                }
                let t = start + k + 1;
                if t < stream.len() {
                    b.targets[at] = stream.ids[t];
                    b.classes[at] = stream.classes[t];
                    b.judge_calls[at] = stream.calls[t];
                    b.valid[at] = true;
                }
            }
        }
        b
    }

    pub fn training_batch(&self, losses: Vec<f32>, ref_losses: Option<Vec<f32>>) -> TrainingBatch {
        TrainingBatch {
            ordinal: self.ordinal,
            token_ids: self.targets.clone(),
            classes: self.classes.clone(),
            losses,
            ref_losses,
            judge_calls: Some(self.judge_calls.clone()),
            valid: self.valid.clone(),
        }
    }
}

/// All windows in corpus order, grouped into batches.
pub fn canonical_batches(stream: &TokenStream, layout: BatchLayout, eot: u32) -> Vec<TokenBatch> {
    let windows: Vec<usize> = (0..stream.window_count(layout.context)).collect();
    windows
        .chunks(layout.batch_size)
        .enumerate()
        .map(|(ordinal, chunk)| {
            let ws: Vec<Option<usize>> = chunk.iter().copied().map(Some).collect();
            TokenBatch::from_windows(stream, layout, ordinal as u64, &ws, eot)
        })
        .collect()
}
