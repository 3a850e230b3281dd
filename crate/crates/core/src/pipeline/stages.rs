//! Stage bodies shared by `run-all` and the single-step CLI verbs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::activations::{dump_filtered, ActivationDump};
use crate::binio;
use crate::error::{Error, Result};
use crate::experiments::{
    emit_report, eval_lm_texts, language_pairs, run_ce_delta, run_code_switch, run_control, run_synergy,
    run_task_cell, CeEvaluator, SteeringContext, Task, LANGID_NOTE,
};
use crate::monolinguality::{collect_activation_sets, mono_scores, read_scores_csv, write_scores_csv, MonoScoreTable};
use crate::sae::{load_sae, save_sae, train_sae, Sae, SaeMetrics};
use crate::synthlang::{make_code_switch_set, CorpusFile, LangId, TokenId};
use crate::tinylm::{load_checkpoint, save_checkpoint, Model, TrainReport};

pub const CORPUS: &str = "corpus.json";
pub const MODEL: &str = "model.lflm";
pub const LM_REPORT: &str = "lm_report.json";
pub const SCORES: &str = "scores.csv";
pub const EVAL_BATCH: usize = 64;

pub fn dump_file(layer: usize) -> String {
    format!("dumps/L{layer}.lfad")
}

pub fn sae_file(layer: usize) -> String {
    format!("saes/L{layer}.lfsa")
}

pub fn sae_metrics_file(layer: usize) -> String {
    format!("saes/L{layer}.json")
}

pub fn report_files(stem: &str) -> Vec<String> {
    vec![format!("reports/{stem}.csv"), format!("reports/{stem}.json")]
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    binio::write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = binio::read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::corrupt(path, 0, format!("JSON: {e}")))
}

pub fn gen_corpus(cfg: &RunConfig, seed: u64) -> Result<CorpusFile> {
    CorpusFile::generate(&cfg.corpus.family(seed), cfg.corpus.sentences, cfg.corpus.split(), None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmReport {
    pub vocab_size: usize,
    pub ln_vocab: f64,
    pub params: usize,
    pub train: TrainReport,
}

pub fn train_lm(cfg: &RunConfig, out: &Path, init_seed: u64, train_seed: u64) -> Result<()> {
    let corpus = CorpusFile::load(&out.join(CORPUS))?;
    let mut model = Model::<f32>::for_vocab(cfg.model.model_config(init_seed), corpus.family.vocab_size)?;
    let train = model.train(&corpus, &cfg.train.train_config(train_seed))?;
    save_checkpoint(&model, &out.join(MODEL))?;
    let report = LmReport {
        vocab_size: model.config.vocab_size,
        ln_vocab: (model.config.vocab_size as f64).ln(),
        params: model.num_params(),
        train,
    };
    write_json(&report, &out.join(LM_REPORT))
}

/// `<BOS> s` for the first `per_language` training sentences of each language.
pub fn dump_texts(corpus: &CorpusFile, per_language: usize) -> Vec<(LangId, Vec<TokenId>)> {
    (0..corpus.family.num_languages())
        .flat_map(|l| {
            let s = corpus.train(l);
            s[..per_language.min(s.len())]
                .iter()
                .map(move |t| (l, corpus.family.lm_text(t)))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Residuals at every non-BOS position of the dump texts.
pub fn dump(cfg: &RunConfig, out: &Path) -> Result<()> {
    let corpus = CorpusFile::load(&out.join(CORPUS))?;
    let model = load_checkpoint(&out.join(MODEL))?;
    let texts = dump_texts(&corpus, cfg.sae.dump_sentences);
    let dumps = dump_filtered(&model, &texts, cfg.sae.layers(), EVAL_BATCH, |p, _| p > 0)?;
    std::fs::create_dir_all(out.join("dumps")).map_err(|e| Error::io(out.join("dumps"), e))?;
    for d in dumps {
        d.save(&out.join(dump_file(d.layer)))?;
    }
    Ok(())
}

pub fn train_sae_layer(cfg: &RunConfig, out: &Path, layer: usize, seed: u64) -> Result<SaeMetrics> {
    let dump = ActivationDump::load(&out.join(dump_file(layer)))?;
    let (sae, metrics) = train_sae(dump.rows.view(), layer, &cfg.sae.train_config(seed))?;
    std::fs::create_dir_all(out.join("saes")).map_err(|e| Error::io(out.join("saes"), e))?;
    save_sae(&sae, &out.join(sae_file(layer)))?;
    write_json(&metrics, &out.join(sae_metrics_file(layer)))?;
    Ok(metrics)
}

/// Trains the given layers on up to `threads` workers; returns wall time
/// per layer in input order.
pub fn train_saes_parallel(
    cfg: &RunConfig,
    out: &Path,
    layers: &[usize],
    threads: usize,
    seed: impl Fn(usize) -> u64 + Sync,
) -> Vec<Result<f64>> {
    let run = |l: usize| -> Result<f64> {
        let t = Instant::now();
        train_sae_layer(cfg, out, l, seed(l))?;
        Ok(t.elapsed().as_secs_f64())
    };
    let mut results = Vec::with_capacity(layers.len());
    for chunk in layers.chunks(threads.max(1)) {
        if chunk.len() == 1 {
            results.push(run(chunk[0]));
            continue;
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&l| s.spawn(move || run(l))).collect();
            for h in handles {
                results.push(h.join().unwrap_or_else(|_| Err(Error::Invalid("SAE worker panicked".into()))));
            }
        });
    }
    results
}

pub fn load_saes(out: &Path, layers: &[usize]) -> Result<Vec<Sae>> {
    layers.iter().map(|&l| load_sae(&out.join(sae_file(l)))).collect()
}

pub struct Loaded {
    pub corpus: CorpusFile,
    pub model: Model<f32>,
    pub saes: Vec<Sae>,
}

pub fn load_inputs(cfg: &RunConfig, out: &Path) -> Result<Loaded> {
    Ok(Loaded {
        corpus: CorpusFile::load(&out.join(CORPUS))?,
        model: load_checkpoint(&out.join(MODEL))?,
        saes: load_saes(out, cfg.sae.layers())?,
    })
}

/// Scores every SAE feature per language on the fit split.
pub fn score_features(model: &Model<f32>, corpus: &CorpusFile, saes: &[Sae]) -> Result<Vec<MonoScoreTable>> {
    let k = corpus.family.num_languages();
    let fit: Vec<&[Vec<TokenId>]> = (0..k).map(|l| corpus.fit(l)).collect();
    let layers: Vec<usize> = saes.iter().map(|s| s.layer).collect();
    let sets = collect_activation_sets(model, &corpus.family, &fit, &layers)?;
    saes.iter().zip(&sets).map(|(sae, set)| mono_scores(sae, set)).collect()
}

pub fn rank_features(cfg: &RunConfig, out: &Path) -> Result<()> {
    let x = load_inputs(cfg, out)?;
    let tables = score_features(&x.model, &x.corpus, &x.saes)?;
    write_scores_csv(&tables, &out.join(SCORES))
}

fn reports_dir(out: &Path) -> PathBuf {
    out.join("reports")
}

pub fn code_switch(cfg: &RunConfig, out: &Path, seed: u64) -> Result<()> {
    let x = load_inputs(cfg, out)?;
    let scores = read_scores_csv(&out.join(SCORES))?;
    let family = &x.corpus.family;
    let k = family.num_languages();
    let sets = (0..k)
        .map(|p| {
            let others: Vec<LangId> = (0..k).filter(|&l| l != p).collect();
            make_code_switch_set(family, p, &others, cfg.experiments.code_switch_items, seed.wrapping_add(p as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = run_code_switch(&x.model, family, &x.saes, &scores, &sets, cfg.sae.layers())?;
    emit_report(&rows, "", &reports_dir(out), "code_switch")?;
    Ok(())
}

fn evaluator<'a>(cfg: &RunConfig, x: &'a Loaded) -> Result<CeEvaluator<'a>> {
    CeEvaluator::new(&x.model, eval_lm_texts(&x.corpus, cfg.experiments.eval_texts), EVAL_BATCH)
}

pub fn ce_delta(cfg: &RunConfig, out: &Path) -> Result<()> {
    let x = load_inputs(cfg, out)?;
    let scores = read_scores_csv(&out.join(SCORES))?;
    let ev = evaluator(cfg, &x)?;
    let layers = cfg.sae.layers();
    let mut rows = Vec::new();
    for lang in 0..x.corpus.family.num_languages() {
        rows.extend(run_ce_delta(
            &ev,
            &x.saes,
            &scores,
            lang,
            layers,
            cfg.experiments.top_n,
            cfg.experiments.ablation,
        )?);
    }
    rows.extend(run_control(&ev, &x.saes, &scores, layers)?);
    emit_report(&rows, "", &reports_dir(out), "ce_delta")?;
    Ok(())
}

pub fn synergy(cfg: &RunConfig, out: &Path) -> Result<()> {
    let x = load_inputs(cfg, out)?;
    let scores = read_scores_csv(&out.join(SCORES))?;
    let ev = evaluator(cfg, &x)?;
    let mut rows = Vec::new();
    for lang in 0..x.corpus.family.num_languages() {
        rows.extend(run_synergy(
            &ev,
            &x.saes,
            &scores,
            lang,
            cfg.sae.layers(),
            cfg.experiments.ablation,
        )?);
    }
    emit_report(&rows, "", &reports_dir(out), "synergy")?;
    Ok(())
}

pub fn tasks(cfg: &RunConfig, out: &Path) -> Result<()> {
    let x = load_inputs(cfg, out)?;
    let scores = read_scores_csv(&out.join(SCORES))?;
    let ev = evaluator(cfg, &x)?;
    let e = &cfg.experiments;
    let methods = e.methods();
    let mut layers: Vec<usize> = methods.iter().flat_map(|m| m.layers()).collect();
    layers.sort_unstable();
    layers.dedup();
    let ctx = SteeringContext::new(
        &x.model,
        &x.corpus,
        &x.saes,
        &scores,
        &layers,
        Some(e.task_texts),
        e.max_new_tokens,
    )?;
    let mut tasks = Vec::new();
    if e.langid {
        tasks.push(Task::AdversarialLangid);
    }
    if e.continuation {
        tasks.push(Task::Continuation);
    }
    let mut rows = Vec::new();
    for (source, target) in language_pairs(x.corpus.family.num_languages()) {
        for m in &methods {
            rows.extend(run_task_cell(&ctx, &ev, &tasks, m, source, target)?);
        }
    }
    let note = if e.langid { LANGID_NOTE } else { "" };
    emit_report(&rows, note, &reports_dir(out), "tasks")?;
    Ok(())
}
