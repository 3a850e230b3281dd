//! Ablation sweeps, synergy scans, steering tasks and their reports.
//!
//! Every experiment compares cross-entropy or task metrics under an
//! intervention hook against the unhooked model on held-out texts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};
use crate::interventions::{
    feature_ablation, gated_steering_hook, mean_of_prompt_means, steering_hook, AblationMode, Gate,
    GateMode, SteeringVector,
};
use crate::monolinguality::{code_switch_profile, Condition, MonoScoreTable};
use crate::sae::Sae;
use crate::synthlang::{Classification, CodeSwitchSet, CorpusFile, LangId, LanguageFamily, TokenId};
use crate::tinylm::forward::token_nll;
use crate::tinylm::{InterventionHook, Model};

pub const REPORT_VERSION: u32 = 1;

/// Minimum classifier confidence for a continuation to count as the target language.
pub const CONTINUATION_MIN_CONFIDENCE: f64 = 0.8;

/// Disclaimer attached to language-identification reports.
pub const LANGID_NOTE: &str =
    "language identification uses the synthetic <LANGID> token format as a stand-in prompt";

pub fn sae_for(saes: &[Sae], layer: usize) -> Result<&Sae> {
    saes.iter()
        .find(|s| s.layer == layer)
        .ok_or_else(|| Error::Invalid(format!("no SAE for layer {layer}")))
}

pub fn scores_for(tables: &[MonoScoreTable], layer: usize) -> Result<&MonoScoreTable> {
    tables
        .iter()
        .find(|t| t.layer == layer)
        .ok_or_else(|| Error::Invalid(format!("no feature scores for layer {layer}")))
}

/// `<BOS> s` for the evaluation split of every language, optionally truncated.
pub fn eval_lm_texts(corpus: &CorpusFile, limit: Option<usize>) -> Vec<Vec<Vec<TokenId>>> {
    (0..corpus.family.num_languages())
        .map(|l| {
            let s = corpus.eval(l);
            s[..limit.unwrap_or(s.len()).min(s.len())]
                .iter()
                .map(|t| corpus.family.lm_text(t))
                .collect()
        })
        .collect()
}

/// Per-language held-out CE with a cached unhooked baseline.
pub struct CeEvaluator<'a> {
    pub model: &'a Model<f32>,
    pub texts: Vec<Vec<Vec<TokenId>>>,
    pub baseline: Vec<f64>,
    pub batch: usize,
}

impl<'a> CeEvaluator<'a> {
    pub fn new(model: &'a Model<f32>, texts: Vec<Vec<Vec<TokenId>>>, batch: usize) -> Result<Self> {
        if texts.is_empty() || texts.iter().any(|t| t.is_empty()) {
            return Err(Error::Empty("every language needs evaluation texts".into()));
        }
        let mut ev = Self {
            model,
            texts,
            baseline: Vec::new(),
            batch,
        };
        ev.baseline = (0..ev.num_languages())
            .map(|l| ev.mean_ce(l, &[]))
            .collect::<Result<_>>()?;
        Ok(ev)
    }

    pub fn num_languages(&self) -> usize {
        self.texts.len()
    }

    /// Mean over texts of the per-text mean next-token CE (nats).
    pub fn mean_ce(&self, lang: LangId, hooks: &[InterventionHook]) -> Result<f64> {
        let ce = self.model.ce_per_text(&self.texts[lang], hooks, self.batch)?;
        Ok(ce.iter().sum::<f64>() / ce.len() as f64)
    }

    /// Mean per-text CE pooled over every language except `exclude`.
    pub fn pooled_ce(&self, exclude: LangId, hooks: &[InterventionHook]) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for l in (0..self.num_languages()).filter(|&l| l != exclude) {
            let ce = self.model.ce_per_text(&self.texts[l], hooks, self.batch)?;
            total += ce.iter().sum::<f64>();
            n += ce.len();
        }
        if n == 0 {
            return Err(Error::Empty("no texts outside the source language".into()));
        }
        Ok(total / n as f64)
    }

    pub fn pooled_baseline(&self, exclude: LangId) -> f64 {
        let mut total = 0.0;
        let mut n = 0usize;
        for l in (0..self.num_languages()).filter(|&l| l != exclude) {
            total += self.baseline[l] * self.texts[l].len() as f64;
            n += self.texts[l].len();
        }
        total / n as f64
    }

    fn tokens(&self, lang: LangId) -> usize {
        self.texts[lang].iter().map(|t| t.len() - 1).sum()
    }
}

fn ablation_hook(sae: &Sae, features: &[usize], mode: AblationMode) -> Result<InterventionHook> {
    Ok(feature_ablation(sae, features, mode)?.hook(sae.layer))
}

fn feature_list(features: &[usize]) -> String {
    features.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(";")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeDeltaRow {
    pub layer: usize,
    /// `top-n` for a language's top features or `control`.
    pub condition: String,
    pub ablated_language: Option<LangId>,
    pub features: String,
    pub eval_language: LangId,
    pub baseline_ce: f64,
    pub intervened_ce: f64,
    pub delta_ce: f64,
    pub texts: usize,
    pub tokens: usize,
}

fn ce_rows(
    ev: &CeEvaluator,
    layer: usize,
    condition: String,
    ablated_language: Option<LangId>,
    features: &[usize],
    hook: InterventionHook,
) -> Result<Vec<CeDeltaRow>> {
    let hooks = [hook];
    (0..ev.num_languages())
        .map(|l| {
            let ce = ev.mean_ce(l, &hooks)?;
            let delta_ce = ce - ev.baseline[l];
            if !delta_ce.is_finite() {
                return Err(Error::Invalid(format!("non-finite CE delta at layer {layer}")));
            }
            Ok(CeDeltaRow {
                layer,
                condition: condition.clone(),
                ablated_language,
                features: feature_list(features),
                eval_language: l,
                baseline_ce: ev.baseline[l],
                intervened_ce: ce,
                delta_ce,
                texts: ev.texts[l].len(),
                tokens: ev.tokens(l),
            })
        })
        .collect()
}

/// Ablates the span of `target`'s top-`top_n` features at each layer and
/// measures CE on every language.
pub fn run_ce_delta(
    ev: &CeEvaluator,
    saes: &[Sae],
    scores: &[MonoScoreTable],
    target: LangId,
    layers: &[usize],
    top_n: usize,
    mode: AblationMode,
) -> Result<Vec<CeDeltaRow>> {
    let mut rows = Vec::new();
    for &layer in layers {
        let sae = sae_for(saes, layer)?;
        let feats: Vec<usize> = scores_for(scores, layer)?
            .top_features(target, top_n)?
            .into_iter()
            .map(|(f, _)| f)
            .collect();
        let hook = ablation_hook(sae, &feats, mode)?;
        rows.extend(ce_rows(ev, layer, format!("top-{top_n}"), Some(target), &feats, hook)?);
    }
    Ok(rows)
}

/// Ablates each layer's control feature (least active across languages).
pub fn run_control(
    ev: &CeEvaluator,
    saes: &[Sae],
    scores: &[MonoScoreTable],
    layers: &[usize],
) -> Result<Vec<CeDeltaRow>> {
    let mut rows = Vec::new();
    for &layer in layers {
        let sae = sae_for(saes, layer)?;
        let f = scores_for(scores, layer)?.control_feature();
        let hook = ablation_hook(sae, &[f], AblationMode::Span)?;
        rows.extend(ce_rows(ev, layer, "control".into(), None, &[f], hook)?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CeDeltaReport {
    pub rows: Vec<CeDeltaRow>,
}

impl CeDeltaReport {
    pub fn delta(&self, condition: &str, ablated: Option<LangId>, layer: usize, eval: LangId) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.condition == condition && r.ablated_language == ablated && r.layer == layer && r.eval_language == eval)
            .map(|r| r.delta_ce)
    }

    /// Layer where ablating `lang`'s features hurts `lang` the most.
    pub fn best_layer(&self, condition: &str, lang: LangId) -> Option<usize> {
        self.rows
            .iter()
            .filter(|r| r.condition == condition && r.ablated_language == Some(lang) && r.eval_language == lang)
            .fold(None, |best: Option<&CeDeltaRow>, r| match best {
                Some(b) if b.delta_ce >= r.delta_ce => Some(b),
                _ => Some(r),
            })
            .map(|r| r.layer)
    }

    /// Largest ΔCE on any language other than the ablated one.
    pub fn max_other(&self, condition: &str, lang: LangId, layer: usize) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| {
                r.condition == condition && r.ablated_language == Some(lang) && r.layer == layer && r.eval_language != lang
            })
            .map(|r| r.delta_ce)
            .reduce(f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynergyRow {
    pub layer: usize,
    pub language: LangId,
    pub feature_1: usize,
    pub feature_2: usize,
    pub delta_1: f64,
    pub delta_2: f64,
    pub delta_joint: f64,
    /// `delta_joint − (delta_1 + delta_2)`.
    pub excess: f64,
}

/// Ablates `language`'s first and second features alone and jointly,
/// evaluating on that language's texts.
pub fn run_synergy(
    ev: &CeEvaluator,
    saes: &[Sae],
    scores: &[MonoScoreTable],
    language: LangId,
    layers: &[usize],
    mode: AblationMode,
) -> Result<Vec<SynergyRow>> {
    let mut rows = Vec::new();
    for &layer in layers {
        let sae = sae_for(saes, layer)?;
        let top = scores_for(scores, layer)?.top_features(language, 2)?;
        rows.push(synergy_cell(ev, sae, language, top[0].0, top[1].0, mode)?);
    }
    Ok(rows)
}

pub fn synergy_cell(
    ev: &CeEvaluator,
    sae: &Sae,
    language: LangId,
    f1: usize,
    f2: usize,
    mode: AblationMode,
) -> Result<SynergyRow> {
    let delta = |feats: &[usize]| -> Result<f64> {
        let hook = ablation_hook(sae, feats, mode)?;
        Ok(ev.mean_ce(language, &[hook])? - ev.baseline[language])
    };
    let delta_1 = delta(&[f1])?;
    let delta_2 = delta(&[f2])?;
    let delta_joint = delta(&[f1, f2])?;
    Ok(SynergyRow {
        layer: sae.layer,
        language,
        feature_1: f1,
        feature_2: f2,
        delta_1,
        delta_2,
        delta_joint,
        excess: delta_joint - (delta_1 + delta_2),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    AdversarialLangid,
    Continuation,
}

impl Task {
    pub fn id(self) -> &'static str {
        match self {
            Task::AdversarialLangid => "adversarial-langid",
            Task::Continuation => "continuation",
        }
    }
}

/// How the source-to-target steering is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Method {
    Baseline,
    /// Plain steering at `layers` consecutive layers from `start`.
    Steer { start: usize, layers: usize },
    /// SAE-gated steering at `layers` consecutive layers from `start`.
    Gated {
        start: usize,
        layers: usize,
        #[serde(default)]
        mode: GateMode,
    },
}

impl Method {
    pub fn id(&self) -> String {
        match self {
            Method::Baseline => "baseline".into(),
            Method::Steer { layers, .. } => format!("sv-{layers}l"),
            Method::Gated { layers, .. } => format!("gated-{layers}l"),
        }
    }

    pub fn layers(&self) -> Vec<usize> {
        match *self {
            Method::Baseline => Vec::new(),
            Method::Steer { start, layers } | Method::Gated { start, layers, .. } => (start..start + layers).collect(),
        }
    }
}

/// Everything needed to run the steering tasks: per-language mean
/// activations from the fit split, SAEs and feature rankings.
pub struct SteeringContext<'a> {
    pub model: &'a Model<f32>,
    pub family: &'a LanguageFamily,
    pub saes: &'a [Sae],
    pub scores: &'a [MonoScoreTable],
    /// `means[layer][lang]`: mean over fit prompts of per-prompt mean residuals.
    pub means: BTreeMap<usize, Vec<Vec<f64>>>,
    /// Raw evaluation sentences per language.
    pub eval_sentences: Vec<Vec<Vec<TokenId>>>,
    pub max_new_tokens: usize,
}

impl<'a> SteeringContext<'a> {
    pub fn new(
        model: &'a Model<f32>,
        corpus: &'a CorpusFile,
        saes: &'a [Sae],
        scores: &'a [MonoScoreTable],
        layers: &[usize],
        eval_limit: Option<usize>,
        max_new_tokens: usize,
    ) -> Result<Self> {
        let family = &corpus.family;
        let k = family.num_languages();
        let prompts: Vec<Vec<Vec<TokenId>>> = (0..k)
            .map(|l| corpus.fit(l).iter().map(|s| family.lm_text(s)).collect())
            .collect();
        let mut means = BTreeMap::new();
        for &layer in layers {
            let per_lang = prompts
                .iter()
                .map(|p| mean_of_prompt_means(model, layer, p))
                .collect::<Result<Vec<_>>>()?;
            means.insert(layer, per_lang);
        }
        let eval_sentences = (0..k)
            .map(|l| {
                let s = corpus.eval(l);
                s[..eval_limit.unwrap_or(s.len()).min(s.len())].to_vec()
            })
            .collect();
        Ok(Self {
            model,
            family,
            saes,
            scores,
            means,
            eval_sentences,
            max_new_tokens,
        })
    }

    pub fn steering_vector(&self, layer: usize, source: LangId, target: LangId) -> Result<SteeringVector> {
        let m = self
            .means
            .get(&layer)
            .ok_or_else(|| Error::Invalid(format!("no steering means for layer {layer}")))?;
        SteeringVector::from_means(layer, source, target, &m[target], &m[source])
    }

    /// Gate on the source language's top-2 features at `layer`.
    pub fn gated_vector(&self, layer: usize, source: LangId, target: LangId, mode: GateMode) -> Result<SteeringVector> {
        let top = scores_for(self.scores, layer)?.top_features(source, 2)?;
        let gate = Gate {
            features: top.into_iter().map(|(f, _)| f).collect(),
            threshold: 0.0,
            mode,
        };
        Ok(self.steering_vector(layer, source, target)?.with_gate(gate))
    }

    pub fn hooks(&self, method: &Method, source: LangId, target: LangId) -> Result<Vec<InterventionHook>> {
        method
            .layers()
            .into_iter()
            .map(|layer| match *method {
                Method::Baseline => unreachable!(),
                Method::Steer { .. } => Ok(steering_hook(self.steering_vector(layer, source, target)?)),
                Method::Gated { mode, .. } => {
                    let sae = Arc::new(sae_for(self.saes, layer)?.clone());
                    gated_steering_hook(self.gated_vector(layer, source, target, mode)?, sae)
                }
            })
            .collect()
    }
}

/// Mean CE of predicting `target`'s label after `<BOS> s <LANGID>`.
pub fn adversarial_langid(
    model: &Model<f32>,
    family: &LanguageFamily,
    sentences: &[Vec<TokenId>],
    target: LangId,
    hooks: &[InterventionHook],
) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::Empty("no language-identification texts".into()));
    }
    let label = family.label(target)?;
    let prompts: Vec<Vec<TokenId>> = sentences.iter().map(|s| family.langid_prompt(s)).collect();
    let mut total = 0.0;
    for chunk in prompts.chunks(64) {
        let seqs: Vec<&[TokenId]> = chunk.iter().map(|p| p.as_slice()).collect();
        let out = model.forward_batch(&seqs, &[], hooks)?;
        for (i, p) in chunk.iter().enumerate() {
            total += token_nll(out.logits_of(i).row(p.len() - 1), label);
        }
    }
    Ok(total / prompts.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuationOutcome {
    pub success_rate: f64,
    /// Continuations with no content tokens (counted as failures).
    pub empty: usize,
    pub total: usize,
}

/// Greedy continuation of `<BOS> s <SEP>`; success when the continuation
/// is classified as `target` with confidence ≥ 0.8.
pub fn continuation(
    model: &Model<f32>,
    family: &LanguageFamily,
    sentences: &[Vec<TokenId>],
    target: LangId,
    hooks: &[InterventionHook],
    max_new_tokens: usize,
) -> Result<ContinuationOutcome> {
    if sentences.is_empty() {
        return Err(Error::Empty("no continuation texts".into()));
    }
    family.language(target)?;
    let prompts: Vec<Vec<TokenId>> = sentences.iter().map(|s| family.continuation_prompt(s)).collect();
    let mut success = 0usize;
    let mut empty = 0usize;
    for chunk in prompts.chunks(64) {
        for cont in model.generate_batch(chunk, max_new_tokens, hooks)? {
            match family.classify(&cont) {
                Classification::Undetermined => empty += 1,
                Classification::Language { lang, confidence } => {
                    success += (lang == target && confidence >= CONTINUATION_MIN_CONFIDENCE) as usize
                }
            }
        }
    }
    Ok(ContinuationOutcome {
        success_rate: success as f64 / prompts.len() as f64,
        empty,
        total: prompts.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task: Task,
    pub method: String,
    pub source: LangId,
    pub target: LangId,
    /// Label CE (language identification) or success rate (continuation).
    pub metric: f64,
    pub empty_continuations: usize,
    pub texts: usize,
    pub side_effect_ce: f64,
    pub side_effect_increase: f64,
}

/// Runs `tasks` for one (method, source, target) cell. Side-effect CE is
/// measured once on every language except the source.
pub fn run_task_cell(
    ctx: &SteeringContext,
    ev: &CeEvaluator,
    tasks: &[Task],
    method: &Method,
    source: LangId,
    target: LangId,
) -> Result<Vec<TaskRow>> {
    let hooks = ctx.hooks(method, source, target)?;
    let side = ev.pooled_ce(source, &hooks)?;
    let side_increase = side - ev.pooled_baseline(source);
    let sentences = &ctx.eval_sentences[source];
    tasks
        .iter()
        .map(|&task| {
            let (metric, empty) = match task {
                Task::AdversarialLangid => (adversarial_langid(ctx.model, ctx.family, sentences, target, &hooks)?, 0),
                Task::Continuation => {
                    let o = continuation(ctx.model, ctx.family, sentences, target, &hooks, ctx.max_new_tokens)?;
                    (o.success_rate, o.empty)
                }
            };
            Ok(TaskRow {
                task,
                method: method.id(),
                source,
                target,
                metric,
                empty_continuations: empty,
                texts: sentences.len(),
                side_effect_ce: side,
                side_effect_increase: side_increase,
            })
        })
        .collect()
}

/// Every ordered pair of distinct languages.
pub fn language_pairs(k: usize) -> Vec<(LangId, LangId)> {
    (0..k).flat_map(|a| (0..k).filter(move |&b| b != a).map(move |b| (a, b))).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub note: String,
    pub rows: Vec<TaskRow>,
}

impl TaskReport {
    pub fn get(&self, task: Task, method: &str, source: LangId, target: LangId) -> Option<&TaskRow> {
        self.rows
            .iter()
            .find(|r| r.task == task && r.method == method && r.source == source && r.target == target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeSwitchRow {
    pub layer: usize,
    pub prefix_language: LangId,
    pub noun_language: LangId,
    pub sibling: bool,
    /// Prefix language's top feature.
    pub prefix_feature: usize,
    /// Noun language's top feature.
    pub noun_feature: usize,
    pub prefix_feature_prefixed: f64,
    pub prefix_feature_standalone: f64,
    pub noun_feature_prefixed: f64,
    pub noun_feature_standalone: f64,
    pub items: usize,
}

impl CodeSwitchRow {
    /// Prefix-language feature gain from adding the prefix.
    pub fn prefix_shift(&self) -> f64 {
        self.prefix_feature_prefixed - self.prefix_feature_standalone
    }

    /// Noun-language feature change from adding the prefix.
    pub fn noun_shift(&self) -> f64 {
        self.noun_feature_prefixed - self.noun_feature_standalone
    }
}

/// Activation of the prefix and noun languages' top features at the
/// final noun, with and without the foreign prefix.
pub fn run_code_switch(
    model: &Model<f32>,
    family: &LanguageFamily,
    saes: &[Sae],
    scores: &[MonoScoreTable],
    sets: &[CodeSwitchSet],
    layers: &[usize],
) -> Result<Vec<CodeSwitchRow>> {
    let mut rows = Vec::new();
    for &layer in layers {
        let sae = sae_for(saes, layer)?;
        let table = scores_for(scores, layer)?;
        let top1 = |l: LangId| -> Result<usize> { Ok(table.top_features(l, 1)?[0].0) };
        for set in sets {
            let pf = top1(set.prefix_language)?;
            let mut feats = vec![pf];
            for &nl in &set.noun_languages {
                feats.push(top1(nl)?);
            }
            feats.sort_unstable();
            feats.dedup();
            let profile = code_switch_profile(model, sae, family, set, &feats)?;
            for &nl in &set.noun_languages {
                let nf = top1(nl)?;
                let get = |cond, f| profile.mean(nl, cond, f).expect("profiled feature");
                rows.push(CodeSwitchRow {
                    layer,
                    prefix_language: set.prefix_language,
                    noun_language: nl,
                    sibling: family.languages[set.prefix_language].sibling == Some(nl),
                    prefix_feature: pf,
                    noun_feature: nf,
                    prefix_feature_prefixed: get(Condition::Prefixed, pf),
                    prefix_feature_standalone: get(Condition::Standalone, pf),
                    noun_feature_prefixed: get(Condition::Prefixed, nf),
                    noun_feature_standalone: get(Condition::Standalone, nf),
                    items: set.items_for(nl).count(),
                });
            }
        }
    }
    Ok(rows)
}

/// A report row type with a fixed CSV column list.
pub trait ReportRow: Serialize + DeserializeOwned {
    const KIND: &'static str;
    const COLUMNS: &'static [&'static str];
}

impl ReportRow for CeDeltaRow {
    const KIND: &'static str = "ce-delta";
    const COLUMNS: &'static [&'static str] = &[
        "layer",
        "condition",
        "ablated_language",
        "features",
        "eval_language",
        "baseline_ce",
        "intervened_ce",
        "delta_ce",
        "texts",
        "tokens",
    ];
}

impl ReportRow for SynergyRow {
    const KIND: &'static str = "synergy";
    const COLUMNS: &'static [&'static str] = &[
        "layer",
        "language",
        "feature_1",
        "feature_2",
        "delta_1",
        "delta_2",
        "delta_joint",
        "excess",
    ];
}

impl ReportRow for TaskRow {
    const KIND: &'static str = "task";
    const COLUMNS: &'static [&'static str] = &[
        "task",
        "method",
        "source",
        "target",
        "metric",
        "empty_continuations",
        "texts",
        "side_effect_ce",
        "side_effect_increase",
    ];
}

impl ReportRow for CodeSwitchRow {
    const KIND: &'static str = "code-switch";
    const COLUMNS: &'static [&'static str] = &[
        "layer",
        "prefix_language",
        "noun_language",
        "sibling",
        "prefix_feature",
        "noun_feature",
        "prefix_feature_prefixed",
        "prefix_feature_standalone",
        "noun_feature_prefixed",
        "noun_feature_standalone",
        "items",
    ];
}

pub fn csv_bytes<R: ReportRow>(rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(R::COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Invalid(format!("csv buffer: {e}")))
}

pub fn write_csv<R: ReportRow>(rows: &[R], path: &Path) -> Result<()> {
    binio::write_atomic(path, &csv_bytes(rows)?)
}

pub fn read_csv<R: ReportRow>(path: &Path) -> Result<Vec<R>> {
    let bytes = binio::read_file(path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != R::COLUMNS {
        return Err(Error::UnknownFormat {
            path: path.into(),
            msg: format!("expected {} columns {:?}, found {:?}", R::KIND, R::COLUMNS, header),
        });
    }
    Ok(r.deserialize().collect::<std::result::Result<Vec<R>, _>>()?)
}

#[derive(Serialize, Deserialize)]
struct JsonReport<R> {
    kind: String,
    version: u32,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    note: String,
    columns: Vec<String>,
    rows: Vec<R>,
}

pub fn write_json<R: ReportRow>(rows: &[R], note: &str, path: &Path) -> Result<()>
where
    R: Clone,
{
    let doc = JsonReport {
        kind: R::KIND.into(),
        version: REPORT_VERSION,
        note: note.into(),
        columns: R::COLUMNS.iter().map(|c| c.to_string()).collect(),
        rows: rows.to_vec(),
    };
    let mut bytes = serde_json::to_vec_pretty(&doc)?;
    bytes.push(b'\n');
    binio::write_atomic(path, &bytes)
}

/// Rows and note of a JSON report.
pub fn read_json<R: ReportRow>(path: &Path) -> Result<(Vec<R>, String)> {
    let bytes = binio::read_file(path)?;
    let doc: JsonReport<R> = serde_json::from_slice(&bytes)?;
    if doc.kind != R::KIND || doc.version != REPORT_VERSION {
        return Err(Error::UnknownFormat {
            path: path.into(),
            msg: format!("report {} v{}, expected {} v{}", doc.kind, doc.version, R::KIND, REPORT_VERSION),
        });
    }
    Ok((doc.rows, doc.note))
}

/// Writes `<dir>/<stem>.csv` and `<dir>/<stem>.json`.
pub fn emit_report<R: ReportRow + Clone>(rows: &[R], note: &str, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    write_csv(rows, &csv_path)?;
    write_json(rows, note, &json_path)?;
    Ok(vec![csv_path, json_path])
}
