use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{stage_seed, RunConfig};
use super::stages;
use crate::binio;
use crate::error::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";
const SIDECAR_DIR: &str = ".stages";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub executed: bool,
    pub seconds: f64,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    /// Relative path → SHA-256 for every produced file.
    pub artifacts: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    /// SHA-256 over tool version, config hash and artifacts (timings excluded).
    pub manifest_hash: String,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = binio::read_file(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::corrupt(path, 0, format!("manifest JSON: {e}")))
    }

    pub fn executed(&self) -> Vec<&str> {
        self.stages.iter().filter(|s| s.executed).map(|s| s.name.as_str()).collect()
    }
}

pub fn manifest_hash(tool_version: &str, config_hash: &str, artifacts: &BTreeMap<String, String>) -> String {
    let doc = serde_json::json!({
        "tool_version": tool_version,
        "config_hash": config_hash,
        "artifacts": artifacts,
    });
    binio::sha256_hex(doc.to_string().as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    fingerprint: String,
    outputs: BTreeMap<String, String>,
}

/// One stage's identity: name, upstream stages, parameters and outputs.
pub struct StageSpec {
    pub name: String,
    pub deps: Vec<String>,
    pub params: serde_json::Value,
    pub outputs: Vec<String>,
}

impl StageSpec {
    pub fn new(name: impl Into<String>, deps: &[String], params: serde_json::Value, outputs: Vec<String>) -> Self {
        Self {
            name: name.into(),
            deps: deps.to_vec(),
            params,
            outputs,
        }
    }
}

/// Tracks stage fingerprints, skips up-to-date stages and collects checksums.
pub struct Runner {
    pub out: PathBuf,
    executed: BTreeSet<String>,
    outputs: BTreeMap<String, BTreeMap<String, String>>,
    records: Vec<StageRecord>,
}

pub struct Plan {
    spec: StageSpec,
    fingerprint: String,
    pub up_to_date: Option<BTreeMap<String, String>>,
}

impl Runner {
    pub fn new(out: &Path) -> Self {
        Self {
            out: out.to_path_buf(),
            executed: BTreeSet::new(),
            outputs: BTreeMap::new(),
            records: Vec::new(),
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn sidecar_path(&self, name: &str) -> PathBuf {
        self.out.join(SIDECAR_DIR).join(format!("{name}.json"))
    }

    /// Decides whether a stage can be skipped: no upstream stage ran, the
    /// fingerprint matches and every output exists with its recorded checksum.
    pub fn plan(&self, spec: StageSpec) -> Result<Plan> {
        let mut upstream = BTreeMap::new();
        for d in &spec.deps {
            let outs = self
                .outputs
                .get(d)
                .ok_or_else(|| Error::Invalid(format!("stage {} depends on unknown stage {d}", spec.name)))?;
            upstream.insert(d.clone(), outs.clone());
        }
        let fp_doc = serde_json::json!({
            "stage": spec.name,
            "params": spec.params,
            "upstream": upstream,
            "outputs": spec.outputs,
        });
        let fingerprint = binio::sha256_hex(fp_doc.to_string().as_bytes());
        let upstream_ran = spec.deps.iter().any(|d| self.executed.contains(d));
        let up_to_date = if upstream_ran {
            None
        } else {
            self.check_sidecar(&spec, &fingerprint)
        };
        Ok(Plan {
            spec,
            fingerprint,
            up_to_date,
        })
    }

    fn check_sidecar(&self, spec: &StageSpec, fingerprint: &str) -> Option<BTreeMap<String, String>> {
        let bytes = std::fs::read(self.sidecar_path(&spec.name)).ok()?;
        let side: Sidecar = serde_json::from_slice(&bytes).ok()?;
        if side.fingerprint != fingerprint || side.outputs.keys().ne(spec.outputs.iter().collect::<BTreeSet<_>>()) {
            return None;
        }
        for (rel, sum) in &side.outputs {
            match binio::file_sha256(&self.path(rel)) {
                Ok(s) if &s == sum => {}
                _ => return None,
            }
        }
        Some(side.outputs)
    }

    /// Records a stage as skipped or finished; `ran` supplies the wall time.
    pub fn finish(&mut self, plan: Plan, seconds: Option<f64>) -> Result<()> {
        let name = plan.spec.name.clone();
        let (outputs, executed) = match (plan.up_to_date, seconds) {
            (Some(o), None) => (o, false),
            (_, Some(_)) => {
                let mut sums = BTreeMap::new();
                for rel in &plan.spec.outputs {
                    let p = self.path(rel);
                    if !p.exists() {
                        return Err(Error::Stage {
                            stage: name.clone(),
                            source: Box::new(Error::Invalid(format!("stage did not produce {rel}"))),
                        });
                    }
                    sums.insert(rel.clone(), binio::file_sha256(&p)?);
                }
                let side = Sidecar {
                    fingerprint: plan.fingerprint,
                    outputs: sums.clone(),
                };
                binio::write_atomic(&self.sidecar_path(&name), &serde_json::to_vec_pretty(&side)?)?;
                (sums, true)
            }
            (None, None) => return Err(Error::Invalid(format!("stage {name} was neither run nor up to date"))),
        };
        if executed {
            self.executed.insert(name.clone());
            log::info!("stage {name}: done in {:.1}s", seconds.unwrap());
        } else {
            log::info!("stage {name}: up to date");
        }
        self.records.push(StageRecord {
            name: name.clone(),
            executed,
            seconds: seconds.unwrap_or(0.0),
            outputs: outputs.keys().cloned().collect(),
        });
        self.outputs.insert(name, outputs);
        Ok(())
    }

    /// Plans and, if needed, runs a stage.
    pub fn stage(&mut self, spec: StageSpec, run: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let plan = self.plan(spec)?;
        if plan.up_to_date.is_some() {
            return self.finish(plan, None);
        }
        let name = plan.spec.name.clone();
        log::info!("stage {name}: running");
        let t = Instant::now();
        run(&self.out).map_err(|e| Error::Stage {
            stage: name,
            source: Box::new(e),
        })?;
        self.finish(plan, Some(t.elapsed().as_secs_f64()))
    }

    pub fn into_manifest(self, cfg: &RunConfig) -> RunManifest {
        let artifacts: BTreeMap<String, String> = self.outputs.into_values().flatten().collect();
        let config_hash = cfg.hash();
        RunManifest {
            tool_version: TOOL_VERSION.into(),
            manifest_hash: manifest_hash(TOOL_VERSION, &config_hash, &artifacts),
            config_hash,
            seed: cfg.seed,
            artifacts,
            stages: self.records,
        }
    }
}

fn params<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("params serialize")
}

/// Runs every stage in order, skipping those already up to date, and
/// writes `manifest.json` last.
pub fn run_all(config: &RunConfig) -> Result<RunManifest> {
    let cfg = config.validate().map_err(Error::Validation)?;
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut r = Runner::new(&out);
    let seed = |name: &str| stage_seed(cfg.seed, name);
    let sae_layers = cfg.sae.layers().to_vec();

    r.stage(
        StageSpec::new(
            "corpus",
            &[],
            serde_json::json!({"corpus": params(&cfg.corpus), "seed": seed("corpus")}),
            vec![stages::CORPUS.into()],
        ),
        |out| stages::gen_corpus(&cfg, seed("corpus"))?.save(&out.join(stages::CORPUS)),
    )?;

    r.stage(
        StageSpec::new(
            "lm",
            &["corpus".into()],
            serde_json::json!({
                "model": params(&cfg.model), "train": params(&cfg.train),
                "init_seed": seed("lm-init"), "train_seed": seed("lm-train"),
            }),
            vec![stages::MODEL.into(), stages::LM_REPORT.into()],
        ),
        |out| stages::train_lm(&cfg, out, seed("lm-init"), seed("lm-train")),
    )?;

    let dump_outputs: Vec<String> = sae_layers.iter().map(|&l| stages::dump_file(l)).collect();
    r.stage(
        StageSpec::new(
            "dump",
            &["corpus".into(), "lm".into()],
            serde_json::json!({"layers": sae_layers, "sentences": cfg.sae.dump_sentences}),
            dump_outputs,
        ),
        |out| stages::dump(&cfg, out),
    )?;

    // SAE stages that are out of date train concurrently.
    let mut pending = Vec::new();
    for &l in &sae_layers {
        let name = format!("sae-L{l}");
        let spec = StageSpec::new(
            &name,
            &["dump".into()],
            serde_json::json!({"sae": params(&cfg.sae.train_config(seed(&name))), "layer": l}),
            vec![stages::sae_file(l), stages::sae_metrics_file(l)],
        );
        let plan = r.plan(spec)?;
        if plan.up_to_date.is_some() {
            r.finish(plan, None)?;
        } else {
            pending.push((l, plan));
        }
    }
    let layers: Vec<usize> = pending.iter().map(|(l, _)| *l).collect();
    let results = stages::train_saes_parallel(&cfg, &out, &layers, cfg.threads, |l| seed(&format!("sae-L{l}")));
    for ((l, plan), res) in pending.into_iter().zip(results) {
        let secs = res.map_err(|e| Error::Stage {
            stage: format!("sae-L{l}"),
            source: Box::new(e),
        })?;
        r.finish(plan, Some(secs))?;
    }
    let sae_stages: Vec<String> = sae_layers.iter().map(|l| format!("sae-L{l}")).collect();

    let mut model_deps = vec!["corpus".to_string(), "lm".to_string()];
    model_deps.extend(sae_stages.iter().cloned());
    r.stage(
        StageSpec::new("scores", &model_deps, serde_json::json!({}), vec![stages::SCORES.into()]),
        |out| stages::rank_features(&cfg, out),
    )?;
    let mut exp_deps = model_deps.clone();
    exp_deps.push("scores".into());

    let e = &cfg.experiments;
    if e.code_switch {
        r.stage(
            StageSpec::new(
                "code-switch",
                &exp_deps,
                serde_json::json!({"items": e.code_switch_items, "seed": seed("code-switch")}),
                stages::report_files("code_switch"),
            ),
            |out| stages::code_switch(&cfg, out, seed("code-switch")),
        )?;
    }
    if e.ce_delta {
        r.stage(
            StageSpec::new(
                "ce-delta",
                &exp_deps,
                serde_json::json!({"top_n": e.top_n, "ablation": e.ablation, "eval_texts": e.eval_texts}),
                stages::report_files("ce_delta"),
            ),
            |out| stages::ce_delta(&cfg, out),
        )?;
    }
    if e.synergy {
        r.stage(
            StageSpec::new(
                "synergy",
                &exp_deps,
                serde_json::json!({"ablation": e.ablation, "eval_texts": e.eval_texts}),
                stages::report_files("synergy"),
            ),
            |out| stages::synergy(&cfg, out),
        )?;
    }
    if e.langid || e.continuation {
        r.stage(
            StageSpec::new(
                "tasks",
                &exp_deps,
                serde_json::json!({
                    "langid": e.langid, "continuation": e.continuation, "methods": e.methods(),
                    "eval_texts": e.eval_texts, "task_texts": e.task_texts, "max_new_tokens": e.max_new_tokens,
                }),
                stages::report_files("tasks"),
            ),
            |out| stages::tasks(&cfg, out),
        )?;
    }

    let manifest = r.into_manifest(&cfg);
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    binio::write_atomic(&out.join(MANIFEST_FILE), &bytes)?;
    Ok(manifest)
}
