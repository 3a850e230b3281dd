use ndarray::ArrayView1;

use super::hooks::InterventionHook;
use super::{Model, Real};
use crate::error::{Error, Result};
use crate::synthlang::TokenId;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest<F: Real>(row: ArrayView1<F>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl<F: Real> Model<F> {
    /// Greedy decoding. Hooks run on every decode step's full forward pass.
    /// Returns only the newly generated tokens.
    pub fn generate(
        &self,
        prompt: &[TokenId],
        max_new_tokens: usize,
        hooks: &[InterventionHook],
    ) -> Result<Vec<TokenId>> {
        if prompt.is_empty() {
            return Err(Error::Empty("empty prompt".into()));
        }
        if prompt.len() + max_new_tokens > self.config.context_length {
            return Err(Error::Invalid(format!(
                "prompt ({}) + max_new_tokens ({max_new_tokens}) exceeds context length {}",
                prompt.len(),
                self.config.context_length
            )));
        }
        let mut seq = prompt.to_vec();
        for _ in 0..max_new_tokens {
            let (logits, _) = self.forward(&seq, &[], hooks)?;
            let next = argmax_lowest(logits.row(seq.len() - 1));
            seq.push(next as TokenId);
        }
        Ok(seq.split_off(prompt.len()))
    }
}

impl<F: Real> Model<F> {
    /// Greedy decoding of several prompts at once; equivalent to calling
    /// [`Model::generate`] on each.
    pub fn generate_batch(
        &self,
        prompts: &[Vec<TokenId>],
        max_new_tokens: usize,
        hooks: &[InterventionHook],
    ) -> Result<Vec<Vec<TokenId>>> {
        for p in prompts {
            if p.is_empty() {
                return Err(Error::Empty("empty prompt".into()));
            }
            if p.len() + max_new_tokens > self.config.context_length {
                return Err(Error::Invalid(format!(
                    "prompt ({}) + max_new_tokens ({max_new_tokens}) exceeds context length {}",
                    p.len(),
                    self.config.context_length
                )));
            }
        }
        let mut seqs: Vec<Vec<TokenId>> = prompts.to_vec();
        for _ in 0..max_new_tokens {
            let views: Vec<&[TokenId]> = seqs.iter().map(|s| s.as_slice()).collect();
            let out = self.forward_batch(&views, &[], hooks)?;
            let next: Vec<TokenId> = (0..seqs.len())
                .map(|i| argmax_lowest(out.logits.row(out.offsets[i + 1] - 1)) as TokenId)
                .collect();
            for (s, t) in seqs.iter_mut().zip(next) {
                s.push(t);
            }
        }
        Ok(seqs
            .into_iter()
            .zip(prompts)
            .map(|(mut s, p)| s.split_off(p.len()))
            .collect())
    }
}
