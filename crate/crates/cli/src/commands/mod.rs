pub mod analyze;
pub mod annotate;
pub mod eval_loss;
pub mod generate;
pub mod judge;
pub mod leakage;
pub mod mask;
pub mod tokenize;
pub mod train;

use std::path::Path;
use std::sync::Arc;

use anyhow::Result;
use callmask::formats::{read_losses, read_token_labels, LossRecord, TokenLabelRecord};
use callmask::tokenmap::{load_tokenizer, SubwordTokenizer};
use callmask_tinytrain::{read_checkpoint, Transformer};

use crate::artifact::{read_bytes, user, user_at, Inputs};

pub fn load_tokenizer_file(path: &Path, inputs: &mut Inputs) -> Result<Arc<dyn SubwordTokenizer>> {
    let bytes = read_bytes(path)?;
    inputs.add("tokenizer", &bytes);
    let text = String::from_utf8(bytes).map_err(user_at(path.display()))?;
    load_tokenizer(&text).map_err(user_at(path.display()))
}

pub fn load_labels(path: &Path, inputs: &mut Inputs) -> Result<Vec<TokenLabelRecord>> {
    let bytes = read_bytes(path)?;
    inputs.add("labels", &bytes);
    Ok(read_token_labels(&bytes[..]).map_err(user_at(path.display()))?.1)
}

pub fn load_losses(path: &Path, role: &str, inputs: &mut Inputs) -> Result<Vec<LossRecord>> {
    let bytes = read_bytes(path)?;
    inputs.add(role, &bytes);
    Ok(read_losses(&bytes[..]).map_err(user_at(path.display()))?.1)
}

pub fn load_model(path: &Path, role: &str, inputs: &mut Inputs) -> Result<Transformer> {
    let bytes = read_bytes(path)?;
    inputs.add(role, &bytes);
    Ok(read_checkpoint(&bytes[..]).map_err(user_at(path.display()))?.model)
}

/// Fails unless the model and tokenizer agree on the vocabulary size.
pub fn check_vocab(model: &Transformer, tokenizer: &dyn SubwordTokenizer) -> Result<()> {
    let (m, t) = (model.config.vocab, tokenizer.vocab().size());
    if m != t {
        return Err(user(format!("checkpoint vocabulary has {m} entries, tokenizer has {t}")));
    }
    Ok(())
}

/// The end-of-text id, which batching and prompts require.
pub fn eot_of(tokenizer: &dyn SubwordTokenizer) -> Result<u32> {
    tokenizer.vocab().eot_id().ok_or_else(|| user("tokenizer vocabulary has no end-of-text token"))
}

/// Per-window loss records gathered into one flat vector per batch of `batch_size` windows;
/// missing rows are zero.
pub fn batch_losses(
    records: &[LossRecord],
    windows: usize,
    context: usize,
    batch_size: usize,
    what: &str,
) -> Result<Vec<Vec<f32>>> {
    if records.len() != windows {
        return Err(user(format!(
            "{what} cover {} windows, the corpus has {windows} at context {context}",
            records.len()
        )));
    }
    for (i, r) in records.iter().enumerate() {
        if r.ordinal != i as u64 || r.losses.len() != context {
            return Err(user(format!(
                "{what} record {i} has ordinal {} and {} losses, expected ordinal {i} and {context}",
                r.ordinal,
                r.losses.len()
            )));
        }
    }
    Ok(records
        .chunks(batch_size)
        .map(|chunk| {
            let mut flat: Vec<f32> = chunk.iter().flat_map(|r| r.losses.iter().copied()).collect();
            flat.resize(batch_size * context, 0.0);
            flat
        })
        .collect())
}
