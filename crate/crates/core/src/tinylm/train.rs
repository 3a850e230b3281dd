use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, Params, Real};
use crate::error::{Error, Result};
use crate::synthlang::{CorpusFile, LangId, TokenId};

/// A training sequence and the positions whose next-token prediction is scored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<TokenId>,
    pub positions: Vec<usize>,
}

impl Example {
    /// Scores every next-token prediction.
    pub fn full(tokens: Vec<TokenId>) -> Self {
        let positions = (0..tokens.len().saturating_sub(1)).collect();
        Self { tokens, positions }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Fraction of `<BOS> s <LANGID> <label>` examples in the mixture.
    pub langid_fraction: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 3e-3,
            warmup_steps: 100,
            min_lr_ratio: 0.1,
            weight_decay: 0.01,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.99,
            langid_fraction: 0.1,
            seed: 0,
            log_every: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.steps == 0 {
            errs.push("train.steps must be > 0".into());
        }
        if self.batch_size == 0 {
            errs.push("train.batch_size must be > 0".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push("train.lr must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.langid_fraction) {
            errs.push("train.langid_fraction must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            errs.push("train.min_lr_ratio must lie in [0, 1]".into());
        }
        errs
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.steps - self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = self.lr * self.min_lr_ratio;
        floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// AdamW with global-norm gradient clipping.
pub struct Trainer<'a, F: Real> {
    pub model: &'a mut Model<F>,
    pub config: TrainConfig,
    m: Params<F>,
    v: Params<F>,
    step: usize,
}

impl<'a, F: Real> Trainer<'a, F> {
    pub fn new(model: &'a mut Model<F>, config: TrainConfig) -> Self {
        let m = model.params.zeros_like();
        let v = model.params.zeros_like();
        Self {
            model,
            config,
            m,
            v,
            step: 0,
        }
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn step(&mut self, batch: &[Example]) -> Result<f64> {
        let (loss, mut grads) = self.model.loss_and_grad(batch)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged {
                step: self.step,
                loss,
            });
        }
        let c = &self.config;
        let norm = grads.sq_norm().sqrt();
        if c.grad_clip > 0.0 && norm > c.grad_clip {
            let s = F::of(c.grad_clip / norm);
            for t in &mut grads.tensors {
                t.data.iter_mut().for_each(|g| *g *= s);
            }
        }
        let lr = c.lr_at(self.step);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let step_size = F::of(lr / bc1);
        let inv_bc2 = F::of(1.0 / bc2);
        let eps = F::of(1e-8);
        for (ti, param) in self.model.params.tensors.iter_mut().enumerate() {
            let decay = if param.shape.len() == 2 {
                F::of(1.0 - lr * c.weight_decay)
            } else {
                F::one()
            };
            let g = &grads.tensors[ti].data;
            let m = &mut self.m.tensors[ti].data;
            let v = &mut self.v.tensors[ti].data;
            for i in 0..param.data.len() {
                m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                param.data[i] = param.data[i] * decay - step_size * m[i] / denom;
            }
        }
        self.step += 1;
        Ok(loss)
    }
}

/// Samples training sequences from the training split: multi-sentence
/// documents `<BOS> s1 <SEP> s2 <SEP> ...` in one language, and
/// language-identification examples `<BOS> s <LANGID> <label>`.
pub struct TrainingMixture<'a> {
    corpus: &'a CorpusFile,
    context_length: usize,
    langid_fraction: f64,
}

impl<'a> TrainingMixture<'a> {
    pub fn new(corpus: &'a CorpusFile, context_length: usize, langid_fraction: f64) -> Result<Self> {
        for l in 0..corpus.family.num_languages() {
            if corpus.train(l).is_empty() {
                return Err(Error::Empty(format!("no training sentences for language {l}")));
            }
        }
        Ok(Self {
            corpus,
            context_length,
            langid_fraction,
        })
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Example {
        let fam = &self.corpus.family;
        let lang: LangId = rng.gen_range(0..fam.num_languages());
        if rng.gen_bool(self.langid_fraction) {
            let s = self.corpus.train(lang).choose(rng).unwrap();
            let mut tokens = fam.langid_prompt(s);
            tokens.push(fam.shared.labels[lang]);
            return Example::full(tokens);
        }
        Example::full(self.document(lang, rng))
    }

    /// `<BOS> s1 <SEP> s2 <SEP> ...` filled up to the context length.
    pub fn document(&self, lang: LangId, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        let fam = &self.corpus.family;
        let pool = self.corpus.train(lang);
        let mut tokens = vec![fam.shared.bos];
        loop {
            let s = pool.choose(rng).unwrap();
            if tokens.len() + s.len() + 1 > self.context_length {
                break;
            }
            tokens.extend_from_slice(s);
            tokens.push(fam.shared.sep);
        }
        if tokens.len() == 1 {
            // context shorter than one sentence: truncate
            let s = pool.choose(rng).unwrap();
            tokens.extend(s.iter().take(self.context_length - 1));
        }
        tokens
    }

    /// `count` documents cycling through the languages, with their language ids.
    pub fn documents(&self, count: usize, seed: u64) -> Vec<(LangId, Vec<TokenId>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.corpus.family.num_languages();
        (0..count).map(|i| (i % k, self.document(i % k, &mut rng))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub initial_heldout_ce: Vec<f64>,
    pub final_heldout_ce: Vec<f64>,
    pub checksum: String,
}

/// Mean CE per language over `<BOS> s` texts from the evaluation split
/// (first `limit` sentences).
pub fn heldout_ce<F: Real>(model: &Model<F>, corpus: &CorpusFile, limit: usize) -> Result<Vec<f64>> {
    (0..corpus.family.num_languages())
        .map(|l| {
            let texts: Vec<Vec<TokenId>> = corpus
                .eval(l)
                .iter()
                .take(limit)
                .map(|s| corpus.family.lm_text(s))
                .collect();
            let per = model.ce_per_text(&texts, &[], 64)?;
            Ok(per.iter().sum::<f64>() / per.len() as f64)
        })
        .collect()
}

impl Model<f32> {
    /// Trains on the corpus training split and reports per-language held-out CE.
    pub fn train(&mut self, corpus: &CorpusFile, config: &TrainConfig) -> Result<TrainReport> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Validation(errs));
        }
        if self.config.vocab_size < corpus.family.vocab_size {
            return Err(Error::Config(format!(
                "model.vocab_size ({}) is smaller than the corpus vocabulary ({})",
                self.config.vocab_size, corpus.family.vocab_size
            )));
        }
        let mixture = TrainingMixture::new(corpus, self.config.context_length, config.langid_fraction)?;
        let initial = heldout_ce(self, corpus, 100)?;
        info!("initial held-out CE per language: {initial:?}");
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut losses = Vec::with_capacity(config.steps);
        {
            let mut trainer = Trainer::new(self, config.clone());
            for step in 0..config.steps {
                let batch: Vec<Example> = (0..config.batch_size)
                    .map(|_| mixture.sample(&mut rng))
                    .collect();
                let loss = trainer.step(&batch)?;
                if config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.steps) {
                    info!("step {step:>5} loss {loss:.4} lr {:.2e}", config.lr_at(step));
                }
                losses.push(loss);
            }
        }
        let last = *losses.last().unwrap();
        if losses.len() > 1 && last >= losses[0] {
            return Err(Error::Invalid(format!(
                "training did not reduce the loss ({:.4} -> {last:.4})",
                losses[0]
            )));
        }
        let final_ce = heldout_ce(self, corpus, 100)?;
        info!("final held-out CE per language: {final_ce:?}");
        Ok(TrainReport {
            losses,
            initial_heldout_ce: initial,
            final_heldout_ce: final_ce,
            checksum: self.checksum(),
        })
    }
}
