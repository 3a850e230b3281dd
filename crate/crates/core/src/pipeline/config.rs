use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiments::Method;
use crate::interventions::{AblationMode, GateMode};
use crate::sae::{SaeTrainConfig, SaeVariant};
use crate::synthlang::{FamilyConfig, GrammarConfig, Split};
use crate::tinylm::{ModelConfig, TrainConfig};

pub const ENV_OUTPUT_DIR: &str = "LANGFEAT_OUTPUT_DIR";
pub const ENV_THREADS: &str = "LANGFEAT_THREADS";

/// Seed for a named stage: the first 8 bytes (little-endian) of
/// `SHA-256(global_seed as u64 LE ‖ stage name as UTF-8)`.
pub fn stage_seed(global: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub threads: usize,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sae: SaeSection,
    pub experiments: ExperimentSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("runs/desk"),
            threads: 1,
            corpus: CorpusSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            sae: SaeSection::default(),
            experiments: ExperimentSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub languages: usize,
    pub tokens_per_language: usize,
    /// Fraction of each language's tokens shared with its sibling.
    pub overlap: f64,
    pub sentences: usize,
    /// Sentences `[0, fit)` rank features and build steering vectors.
    pub fit: usize,
    /// Sentences `[fit, fit + eval)` are evaluation texts.
    pub eval: usize,
    pub grammar: GrammarConfig,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            languages: 4,
            tokens_per_language: 64,
            overlap: 0.25,
            sentences: 4000,
            fit: 100,
            eval: 500,
            grammar: GrammarConfig::default(),
        }
    }
}

impl CorpusSection {
    pub fn family(&self, seed: u64) -> FamilyConfig {
        FamilyConfig {
            num_languages: self.languages,
            tokens_per_language: self.tokens_per_language,
            overlap_fraction: self.overlap,
            grammar: self.grammar.clone(),
            seed,
        }
    }

    pub fn split(&self) -> Split {
        Split {
            fit: self.fit,
            eval: self.eval,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub context_length: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 128,
            num_layers: 4,
            num_heads: 4,
            d_ff: 512,
            context_length: 32,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            d_ff: self.d_ff,
            context_length: self.context_length,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub langid_fraction: f64,
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: 2e-3,
            warmup_steps: t.warmup_steps,
            min_lr_ratio: t.min_lr_ratio,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            beta1: t.beta1,
            beta2: t.beta2,
            langid_fraction: t.langid_fraction,
            log_every: t.log_every,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            min_lr_ratio: self.min_lr_ratio,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            beta1: self.beta1,
            beta2: self.beta2,
            langid_fraction: self.langid_fraction,
            seed,
            log_every: self.log_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    /// `topk` or `l1`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeSection {
    /// Omitted: Top-K with K = d_model / 4.
    pub variant: Option<VariantSpec>,
    /// Omitted: 8 × d_model.
    pub num_features: Option<usize>,
    /// Omitted: every layer.
    pub layers: Option<Vec<usize>>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub heldout_fraction: f64,
    /// Training-split sentences per language dumped for SAE training.
    pub dump_sentences: usize,
}

impl Default for SaeSection {
    fn default() -> Self {
        let s = SaeTrainConfig::default();
        Self {
            variant: None,
            num_features: None,
            layers: None,
            steps: s.steps,
            batch_size: s.batch_size,
            lr: s.lr,
            heldout_fraction: s.heldout_fraction,
            dump_sentences: 1000,
        }
    }
}

impl SaeSection {
    fn parse_variant(&self, d_model: usize, errs: &mut Vec<String>) -> Option<SaeVariant> {
        let Some(v) = &self.variant else {
            return Some(SaeVariant::default_topk(d_model));
        };
        match v.kind.as_str() {
            "topk" => match v.k {
                Some(k) => Some(SaeVariant::TopK { k }),
                None => {
                    errs.push("sae.variant.k is required when sae.variant.kind = \"topk\"".into());
                    None
                }
            },
            "l1" => match v.lambda {
                Some(lambda) => Some(SaeVariant::L1 { lambda }),
                None => {
                    errs.push("sae.variant.lambda is required when sae.variant.kind = \"l1\"".into());
                    None
                }
            },
            other => {
                errs.push(format!("sae.variant.kind must be \"topk\" or \"l1\" (got \"{other}\")"));
                None
            }
        }
    }

    /// Variant of a normalized config.
    pub fn variant(&self) -> SaeVariant {
        let v = self.variant.as_ref().expect("normalized config");
        match v.kind.as_str() {
            "topk" => SaeVariant::TopK { k: v.k.unwrap() },
            _ => SaeVariant::L1 { lambda: v.lambda.unwrap() },
        }
    }

    pub fn layers(&self) -> &[usize] {
        self.layers.as_deref().expect("normalized config")
    }

    pub fn train_config(&self, seed: u64) -> SaeTrainConfig {
        SaeTrainConfig {
            variant: self.variant(),
            num_features: self.num_features,
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            heldout_fraction: self.heldout_fraction,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub ce_delta: bool,
    pub synergy: bool,
    pub code_switch: bool,
    pub langid: bool,
    pub continuation: bool,
    pub top_n: usize,
    pub ablation: AblationMode,
    /// Evaluation texts per language for CE measurements; omitted: all.
    pub eval_texts: Option<usize>,
    /// Evaluation texts per source language for the steering tasks.
    pub task_texts: usize,
    pub max_new_tokens: usize,
    /// First steering layer.
    pub steer_start: usize,
    pub sv_layers: usize,
    pub gated_layers: usize,
    pub gate_mode: GateMode,
    /// Code-switch sentences per prefix language.
    pub code_switch_items: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            ce_delta: true,
            synergy: true,
            code_switch: true,
            langid: true,
            continuation: true,
            top_n: 2,
            ablation: AblationMode::Span,
            eval_texts: None,
            task_texts: 100,
            max_new_tokens: 8,
            steer_start: 1,
            sv_layers: 1,
            gated_layers: 3,
            gate_mode: GateMode::Any,
            code_switch_items: 100,
        }
    }
}

impl ExperimentSection {
    pub fn methods(&self) -> Vec<Method> {
        vec![
            Method::Baseline,
            Method::Steer {
                start: self.steer_start,
                layers: self.sv_layers,
            },
            Method::Gated {
                start: self.steer_start,
                layers: self.gated_layers,
                mode: self.gate_mode,
            },
        ]
    }
}

impl RunConfig {
    /// A seconds-scale configuration for smoke tests.
    pub fn smoke(output_dir: impl Into<PathBuf>) -> Self {
        let mut c = Self {
            output_dir: output_dir.into(),
            ..Self::default()
        };
        c.corpus = CorpusSection {
            languages: 2,
            tokens_per_language: 24,
            overlap: 0.0,
            sentences: 300,
            fit: 20,
            eval: 20,
            grammar: GrammarConfig::default(),
        };
        c.model = ModelSection {
            vocab_size: 64,
            d_model: 16,
            num_layers: 2,
            num_heads: 2,
            d_ff: 32,
            context_length: 20,
        };
        c.train.steps = 40;
        c.train.warmup_steps = 5;
        c.train.log_every = 0;
        c.sae.num_features = Some(32);
        c.sae.steps = 60;
        c.sae.batch_size = 64;
        c.sae.dump_sentences = 60;
        c.experiments.task_texts = 6;
        c.experiments.max_new_tokens = 6;
        c.experiments.steer_start = 0;
        c.experiments.gated_layers = 2;
        c.experiments.code_switch_items = 6;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `LANGFEAT_OUTPUT_DIR` and `LANGFEAT_THREADS`.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(dir) = std::env::var(ENV_OUTPUT_DIR) {
            self.output_dir = PathBuf::from(dir);
        }
        if let Ok(t) = std::env::var(ENV_THREADS) {
            self.threads = t
                .parse()
                .map_err(|_| Error::Config(format!("{ENV_THREADS} must be a positive integer (got \"{t}\")")))?;
        }
        Ok(())
    }

    /// SHA-256 of the config's TOML text with the output location and
    /// worker count blanked, since neither affects results.
    pub fn hash(&self) -> String {
        let c = Self {
            output_dir: PathBuf::new(),
            threads: 0,
            ..self.clone()
        };
        crate::binio::sha256_hex(c.to_toml().as_bytes())
    }

    /// Checks every cross-field constraint and returns the config with all
    /// defaults materialized.
    pub fn validate(&self) -> std::result::Result<RunConfig, Vec<String>> {
        let mut errs = Vec::new();
        let mut cfg = self.clone();
        let c = &cfg.corpus;
        let m = &cfg.model;

        let family = c.family(0);
        errs.extend(family.validate());
        errs.extend(m.model_config(0).validate());
        errs.extend(cfg.train.train_config(0).validate());
        if cfg.threads == 0 {
            errs.push("threads must be >= 1".into());
        }
        if family.validate().is_empty() && family.total_vocab() > m.vocab_size {
            errs.push(format!(
                "corpus.languages ({}) x corpus.tokens_per_language ({}) plus shared tokens needs {} ids, \
                 more than model.vocab_size ({})",
                c.languages,
                c.tokens_per_language,
                family.total_vocab(),
                m.vocab_size
            ));
        }
        if c.fit == 0 || c.eval == 0 {
            errs.push("corpus.fit and corpus.eval must be > 0".into());
        }
        if c.fit + c.eval >= c.sentences {
            errs.push(format!(
                "corpus.fit ({}) + corpus.eval ({}) leaves no training sentences out of corpus.sentences ({})",
                c.fit, c.eval, c.sentences
            ));
        }
        let longest = c.grammar.max_len + 2;
        if longest > m.context_length {
            errs.push(format!(
                "model.context_length ({}) cannot hold a language-ID prompt of {longest} tokens (corpus.grammar.max_len + 2)",
                m.context_length
            ));
        }

        let variant = cfg.sae.parse_variant(m.d_model, &mut errs);
        if let Some(v) = variant {
            cfg.sae.variant = Some(match v {
                SaeVariant::TopK { k } => VariantSpec {
                    kind: "topk".into(),
                    k: Some(k),
                    lambda: None,
                },
                SaeVariant::L1 { lambda } => VariantSpec {
                    kind: "l1".into(),
                    k: None,
                    lambda: Some(lambda),
                },
            });
        }
        let features = *cfg.sae.num_features.get_or_insert(8 * m.d_model);
        if features == 0 {
            errs.push("sae.num_features must be > 0".into());
        }
        if let Some(SaeVariant::TopK { k }) = variant {
            if k > features {
                errs.push(format!("sae.variant.k ({k}) exceeds sae.num_features ({features})"));
            }
        }
        let layers = cfg.sae.layers.get_or_insert_with(|| (0..m.num_layers).collect());
        layers.sort_unstable();
        layers.dedup();
        if layers.is_empty() {
            errs.push("sae.layers must not be empty".into());
        }
        for &l in layers.iter() {
            if l >= m.num_layers {
                errs.push(format!("sae.layers contains {l}, but model.num_layers is {}", m.num_layers));
            }
        }
        if variant.is_some() {
            errs.extend(cfg.sae.train_config(0).validate());
        }
        let train_sentences = c.sentences.saturating_sub(c.fit + c.eval);
        if cfg.sae.dump_sentences == 0 || cfg.sae.dump_sentences > train_sentences {
            errs.push(format!(
                "sae.dump_sentences ({}) must lie in [1, {train_sentences}] (training sentences per language)",
                cfg.sae.dump_sentences
            ));
        }

        let e = &mut cfg.experiments;
        let eval_texts = *e.eval_texts.get_or_insert(c.eval);
        if eval_texts == 0 || eval_texts > c.eval {
            errs.push(format!("experiments.eval_texts ({eval_texts}) must lie in [1, corpus.eval = {}]", c.eval));
        }
        if e.task_texts == 0 || e.task_texts > c.eval {
            errs.push(format!(
                "experiments.task_texts ({}) must lie in [1, corpus.eval = {}]",
                e.task_texts, c.eval
            ));
        }
        if e.top_n == 0 || e.top_n > features {
            errs.push(format!("experiments.top_n ({}) must lie in [1, sae.num_features]", e.top_n));
        }
        if e.continuation && longest + e.max_new_tokens > m.context_length {
            errs.push(format!(
                "continuation prompts ({longest} tokens) + experiments.max_new_tokens ({}) exceed model.context_length ({})",
                e.max_new_tokens, m.context_length
            ));
        }
        if e.continuation && e.max_new_tokens == 0 {
            errs.push("experiments.max_new_tokens must be > 0".into());
        }
        if e.langid || e.continuation {
            let span = e.sv_layers.max(e.gated_layers);
            if e.sv_layers == 0 || e.gated_layers == 0 {
                errs.push("experiments.sv_layers and experiments.gated_layers must be > 0".into());
            } else if e.steer_start + span > m.num_layers {
                errs.push(format!(
                    "experiments.steer_start ({}) + {span} steering layers exceeds model.num_layers ({})",
                    e.steer_start, m.num_layers
                ));
            } else {
                let layers = cfg.sae.layers.as_deref().unwrap_or(&[]);
                for l in e.steer_start..e.steer_start + e.gated_layers {
                    if !layers.contains(&l) {
                        errs.push(format!("gated steering needs an SAE at layer {l}; add it to sae.layers"));
                    }
                }
            }
        }
        if e.code_switch && e.code_switch_items == 0 {
            errs.push("experiments.code_switch_items must be > 0".into());
        }

        if cfg.output_dir.as_os_str().is_empty() {
            errs.push("output_dir must not be empty".into());
        } else if cfg.output_dir.exists() && !cfg.output_dir.is_dir() {
            errs.push(format!("output_dir {} exists and is not a directory", cfg.output_dir.display()));
        } else if let Some(blocker) = cfg.output_dir.ancestors().skip(1).find(|a| a.exists() && !a.is_dir()) {
            errs.push(format!(
                "output_dir {} cannot be created: {} is not a directory",
                cfg.output_dir.display(),
                blocker.display()
            ));
        }

        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(errs)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seed_matches_documented_rule() {
        let mut bytes = 7u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"corpus");
        let digest = Sha256::digest(&bytes);
        let want = u64::from_le_bytes(digest[..8].try_into().unwrap());
        assert_eq!(stage_seed(7, "corpus"), want);
        assert_ne!(stage_seed(7, "corpus"), stage_seed(7, "lm"));
        assert_ne!(stage_seed(7, "corpus"), stage_seed(8, "corpus"));
    }

    #[test]
    fn minimal_config_materializes_defaults() {
        let cfg = RunConfig::from_toml("seed = 3\noutput_dir = \"out\"\n").unwrap();
        let n = cfg.validate().unwrap();
        assert_eq!(n.sae.variant().clone(), SaeVariant::TopK { k: 32 });
        assert_eq!(n.sae.num_features, Some(1024));
        assert_eq!(n.sae.layers(), &[0, 1, 2, 3]);
        assert_eq!(n.experiments.eval_texts, Some(500));
        // normalized output re-parses to itself
        let again = RunConfig::from_toml(&n.to_toml()).unwrap();
        assert_eq!(again, n);
        assert_eq!(again.validate().unwrap(), n);
    }

    #[test]
    fn vocab_overflow_names_both_fields() {
        let cfg = RunConfig::from_toml("[corpus]\nlanguages = 4\ntokens_per_language = 100\noverlap = 0.0\n").unwrap();
        let errs = cfg.validate().unwrap_err();
        assert!(errs.iter().any(|e| e.contains("corpus.tokens_per_language") && e.contains("model.vocab_size")), "{errs:?}");
    }

    #[test]
    fn topk_without_k_is_rejected() {
        let cfg = RunConfig::from_toml("[sae.variant]\nkind = \"topk\"\n").unwrap();
        let errs = cfg.validate().unwrap_err();
        assert!(errs.iter().any(|e| e.contains("sae.variant.k")), "{errs:?}");
    }

    #[test]
    fn errors_are_aggregated() {
        let cfg = RunConfig::from_toml(
            "threads = 0\n[model]\nnum_heads = 3\n[corpus]\nfit = 3000\neval = 2000\n[sae]\nlayers = [9]\n",
        )
        .unwrap();
        let errs = cfg.validate().unwrap_err();
        for needle in ["threads", "model.num_heads", "corpus.fit", "sae.layers"] {
            assert!(errs.iter().any(|e| e.contains(needle)), "missing {needle}: {errs:?}");
        }
    }

    #[test]
    fn output_dir_must_be_creatable() {
        let dir = tempfile::tempdir().unwrap();
        let nested = RunConfig::smoke(dir.path().join("a/b/c"));
        assert!(nested.validate().is_ok());
        let file = dir.path().join("file");
        std::fs::write(&file, b"x").unwrap();
        let errs = RunConfig::smoke(file.join("run")).validate().unwrap_err();
        assert!(errs.iter().any(|e| e.contains("is not a directory")), "{errs:?}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[model]\nwidth = 3\n"), Err(Error::Toml(_))));
    }
}
