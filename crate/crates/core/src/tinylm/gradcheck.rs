use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::train::Example;
use super::Model;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter (tensor name, flat index) with the largest error.
    pub worst: (String, usize),
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`; the floor keeps
/// vanishing gradients from dividing by zero.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backprop gradients against central differences on `samples`
/// randomly chosen parameters, in f64.
pub fn grad_check(
    model: &Model<f64>,
    batch: &[Example],
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    if samples == 0 {
        return Err(Error::Invalid("need at least one sampled parameter".into()));
    }
    let (_, grads) = model.loss_and_grad(batch)?;
    if !grads.all_finite() {
        return Err(Error::Invalid("non-finite analytic gradient".into()));
    }
    let total = model.num_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut worst = (0.0f64, (String::new(), 0usize));
    for _ in 0..samples {
        let mut flat = rng.gen_range(0..total);
        let mut ti = 0;
        while flat >= probe.params.tensors[ti].data.len() {
            flat -= probe.params.tensors[ti].data.len();
            ti += 1;
        }
        let orig = probe.params.tensors[ti].data[flat];
        probe.params.tensors[ti].data[flat] = orig + epsilon;
        let plus = probe.loss_and_grad_value(batch)?;
        probe.params.tensors[ti].data[flat] = orig - epsilon;
        let minus = probe.loss_and_grad_value(batch)?;
        probe.params.tensors[ti].data[flat] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let analytic = grads.tensors[ti].data[flat];
        if !numeric.is_finite() {
            return Err(Error::Invalid("non-finite numerical gradient".into()));
        }
        let err = rel_error(analytic, numeric, 1e-6);
        if err > worst.0 || worst.1 .0.is_empty() {
            worst = (err, (probe.params.tensors[ti].name.clone(), flat));
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        checked: samples,
        worst: worst.1,
    })
}

impl Model<f64> {
    fn loss_and_grad_value(&self, batch: &[Example]) -> Result<f64> {
        let seqs: Vec<_> = batch.iter().map(|e| e.tokens.as_slice()).collect();
        let out = self.forward_batch(&seqs, &[], &[])?;
        let total: usize = batch.iter().map(|e| e.positions.len()).sum();
        let mut loss = 0.0;
        for (i, e) in batch.iter().enumerate() {
            let logits = out.logits_of(i);
            for &p in &e.positions {
                loss += super::forward::token_nll(logits.row(p), e.tokens[p + 1]);
            }
        }
        Ok(loss / total as f64)
    }
}
