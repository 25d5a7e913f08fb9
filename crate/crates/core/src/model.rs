//! Interface between the toolkit and any autoregressive next-token model.

use crate::objective::LogitSlab;

pub trait LanguageModel {
    fn vocab_size(&self) -> usize;

    /// Maximum number of tokens the model attends to.
    fn context_length(&self) -> usize;

    /// Next-token logits after every prefix of `tokens`; one row per input position.
    /// `tokens.len()` must not exceed [`LanguageModel::context_length`].
    fn forward(&self, tokens: &[u32]) -> LogitSlab;

    /// Logits for the token following `tokens`, using at most the last `context_length` tokens.
    fn next_logits(&self, tokens: &[u32]) -> Vec<f32> {
        let start = tokens.len().saturating_sub(self.context_length());
        let slab = self.forward(&tokens[start..]);
        slab.row(slab.positions - 1).to_vec()
    }
}
