use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use langfeat::experiments::{eval_lm_texts, sae_for, CeEvaluator, SteeringContext};
use langfeat::interventions::{feature_ablation, save_steering, GateMode};
use langfeat::monolinguality::read_scores_csv;
use langfeat::pipeline::stages::{self, EVAL_BATCH};
use langfeat::pipeline::{inspect, run_all, stage_seed, RunConfig};
use langfeat::synthlang::CorpusFile;
use langfeat::tinylm::{heldout_ce, load_checkpoint};
use langfeat::{Error, Result};

#[derive(Parser)]
#[command(name = "langfeat", version, about = "Language-specific SAE features on synthetic multilingual models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML run configuration; built-in desk defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config and LANGFEAT_OUTPUT_DIR).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config and print it with all defaults filled in.
    Validate(RunArgs),
    /// Run every stage, skipping those already up to date.
    RunAll(RunArgs),
    /// Generate the parallel corpus.
    GenCorpus(RunArgs),
    /// Train the language model.
    TrainLm(RunArgs),
    /// Per-language held-out cross-entropy of the trained model.
    EvalCe {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 500)]
        limit: usize,
    },
    /// Dump residual activations at the SAE layers.
    DumpActivations(RunArgs),
    /// Train SAEs (all configured layers, or one).
    TrainSae {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Score every SAE feature's monolinguality.
    RankFeatures(RunArgs),
    /// Code-switch context experiment.
    CodeSwitch(RunArgs),
    /// Build a steering vector from the fit split.
    MakeSv {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        source: usize,
        #[arg(long)]
        target: usize,
        #[arg(long, value_enum, default_value_t = GateArg::Auto)]
        gate: GateArg,
        #[arg(long)]
        output: PathBuf,
    },
    /// CE change per language from ablating SAE features at one layer.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        layer: usize,
        /// Comma-separated feature indices.
        #[arg(long, value_delimiter = ',', required = true)]
        features: Vec<usize>,
    },
    /// Experiment reports.
    Exp {
        #[command(subcommand)]
        which: Experiment,
    },
    /// Summarize any artifact file.
    Inspect { path: PathBuf },
}

#[derive(Subcommand)]
enum Experiment {
    /// Top-N and control ablation sweep.
    AblateSweep(RunArgs),
    Synergy(RunArgs),
    /// Adversarial language identification under steering.
    Langid(RunArgs),
    /// Continuation language under steering.
    Continue(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GateArg {
    /// Gate on the source language's top-2 features.
    Auto,
    None,
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate().map_err(Error::Validation)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate(a) => print!("{}", load_config(&a)?.to_toml()),
        Command::RunAll(a) => {
            let m = run_all(&load_config(&a)?)?;
            println!("manifest {}", m.manifest_hash);
            for s in &m.stages {
                let state = if s.executed { format!("ran in {:.1}s", s.seconds) } else { "up to date".into() };
                println!("  {:<12} {state}", s.name);
            }
        }
        Command::GenCorpus(a) => {
            let cfg = load_config(&a)?;
            ensure_dir(&cfg.output_dir)?;
            let path = cfg.output_dir.join(stages::CORPUS);
            stages::gen_corpus(&cfg, stage_seed(cfg.seed, "corpus"))?.save(&path)?;
            println!("wrote {}", path.display());
        }
        Command::TrainLm(a) => {
            let cfg = load_config(&a)?;
            let s = |n| stage_seed(cfg.seed, n);
            stages::train_lm(&cfg, &cfg.output_dir, s("lm-init"), s("lm-train"))?;
            println!("wrote {}", cfg.output_dir.join(stages::MODEL).display());
        }
        Command::EvalCe { run, limit } => {
            let cfg = load_config(&run)?;
            let corpus = CorpusFile::load(&cfg.output_dir.join(stages::CORPUS))?;
            let model = load_checkpoint(&cfg.output_dir.join(stages::MODEL))?;
            println!("ln V = {:.4}", (model.config.vocab_size as f64).ln());
            for (l, ce) in heldout_ce(&model, &corpus, limit)?.iter().enumerate() {
                println!("language {l}: {ce:.4}");
            }
        }
        Command::DumpActivations(a) => {
            let cfg = load_config(&a)?;
            stages::dump(&cfg, &cfg.output_dir)?;
            println!("wrote dumps for layers {:?}", cfg.sae.layers());
        }
        Command::TrainSae { run, layer } => {
            let cfg = load_config(&run)?;
            let layers = match layer {
                Some(l) if cfg.sae.layers().contains(&l) => vec![l],
                Some(l) => return Err(Error::Invalid(format!("layer {l} is not in sae.layers {:?}", cfg.sae.layers()))),
                None => cfg.sae.layers().to_vec(),
            };
            for l in layers {
                let m = stages::train_sae_layer(&cfg, &cfg.output_dir, l, stage_seed(cfg.seed, &format!("sae-L{l}")))?;
                println!("layer {l}: held-out FVU {:.4}, mean L0 {:.2}", m.heldout_fvu, m.mean_l0);
            }
        }
        Command::RankFeatures(a) => {
            let cfg = load_config(&a)?;
            stages::rank_features(&cfg, &cfg.output_dir)?;
            print!("{}", inspect(&cfg.output_dir.join(stages::SCORES))?);
        }
        Command::CodeSwitch(a) => {
            let cfg = load_config(&a)?;
            stages::code_switch(&cfg, &cfg.output_dir, stage_seed(cfg.seed, "code-switch"))?;
            println!("wrote reports/code_switch.csv");
        }
        Command::MakeSv {
            run,
            layer,
            source,
            target,
            gate,
            output,
        } => {
            let cfg = load_config(&run)?;
            let x = stages::load_inputs(&cfg, &cfg.output_dir)?;
            let scores = read_scores_csv(&cfg.output_dir.join(stages::SCORES))?;
            let k = x.corpus.family.num_languages();
            if source >= k || target >= k || source == target {
                return Err(Error::Invalid(format!(
                    "source and target must be distinct languages below {k}"
                )));
            }
            let ctx = SteeringContext::new(&x.model, &x.corpus, &x.saes, &scores, &[layer], Some(0), 0)?;
            let sv = match gate {
                GateArg::Auto => ctx.gated_vector(layer, source, target, GateMode::Any)?,
                GateArg::None => ctx.steering_vector(layer, source, target)?,
            };
            save_steering(&sv, &output)?;
            print!("{}", inspect(&output)?);
        }
        Command::Ablate { run, layer, features } => {
            let cfg = load_config(&run)?;
            let x = stages::load_inputs(&cfg, &cfg.output_dir)?;
            let sae = sae_for(&x.saes, layer)?;
            let hook = feature_ablation(sae, &features, cfg.experiments.ablation)?.hook(layer);
            let texts = eval_lm_texts(&x.corpus, cfg.experiments.eval_texts);
            let ev = CeEvaluator::new(&x.model, texts, EVAL_BATCH)?;
            println!("language,baseline_ce,ablated_ce,delta_ce");
            for l in 0..ev.num_languages() {
                let ce = ev.mean_ce(l, std::slice::from_ref(&hook))?;
                println!("{l},{:.6},{ce:.6},{:.6}", ev.baseline[l], ce - ev.baseline[l]);
            }
        }
        Command::Exp { which } => {
            let (a, stem) = match &which {
                Experiment::AblateSweep(a) => (a, "ce_delta"),
                Experiment::Synergy(a) => (a, "synergy"),
                Experiment::Langid(a) | Experiment::Continue(a) => (a, "tasks"),
            };
            let mut cfg = load_config(a)?;
            match which {
                Experiment::AblateSweep(_) => stages::ce_delta(&cfg, &cfg.output_dir)?,
                Experiment::Synergy(_) => stages::synergy(&cfg, &cfg.output_dir)?,
                Experiment::Langid(_) => {
                    cfg.experiments.langid = true;
                    cfg.experiments.continuation = false;
                    stages::tasks(&cfg, &cfg.output_dir)?
                }
                Experiment::Continue(_) => {
                    cfg.experiments.langid = false;
                    cfg.experiments.continuation = true;
                    stages::tasks(&cfg, &cfg.output_dir)?
                }
            }
            print!("{}", inspect(&cfg.output_dir.join(format!("reports/{stem}.csv")))?);
        }
        Command::Inspect { path } => print!("{}", inspect(&path)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
