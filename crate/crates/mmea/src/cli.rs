//! Command-line pipeline: task synthesis, training, pivot induction,
//! evaluation, and ablation, all emitting machine-first JSON/CSV reports.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::EvalReport;
use crate::kgdata::formats::{read_pivots, write_scored_pivots, KeyValueFile};
use crate::kgdata::{load_task_from_manifest, AlignmentTask, Modality};
use crate::seeding::{induce_visual_pivots, threshold_pivots, ILConfig};
use crate::synth::{write_to_dir, SynthConfig};
use crate::trainer::checkpoint::{load_checkpoint, save_checkpoint};
use crate::trainer::{
    evaluate_trained, train, visual_similarity, EvalOptions, TrainConfig, TrainState,
};

#[derive(Parser)]
#[command(name = "mmea", version, about = "Multi-modal entity alignment toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic alignment task on disk.
    Synth(SynthArgs),
    /// Train a model (optionally over several seeds) and evaluate it.
    Train(TrainArgs),
    /// Induce visual seed pivots from image-feature similarity.
    InducePivots(InduceArgs),
    /// Evaluate a trained checkpoint on a task's held-out pivots.
    Evaluate(EvaluateArgs),
    /// Train with modalities removed and evaluate.
    Ablate(TrainArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory for the generated task.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional key = value file of synth.* generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub entities: Option<usize>,
    #[arg(long)]
    pub triples: Option<usize>,
    /// Uniform feature noise for all modalities.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Image-channel noise override.
    #[arg(long)]
    pub image_noise: Option<f64>,
    /// Zipf exponent of the degree distribution.
    #[arg(long)]
    pub exponent: Option<f64>,
    /// Fraction of entities used as training pivots.
    #[arg(long)]
    pub seed_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Task manifest plus train.* settings.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated seeds, one training run each.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Modality to remove from the model (repeatable).
    #[arg(long = "disable")]
    pub disable: Vec<String>,
    /// Seed training from induced visual pivots instead of labels.
    #[arg(long)]
    pub unsupervised: bool,
    /// Number of visual pivots to induce.
    #[arg(long)]
    pub pivots: Option<usize>,
    /// Similarity cut-off for induced pivots.
    #[arg(long)]
    pub pivot_threshold: Option<f64>,
    /// CSLS neighbourhood size at evaluation.
    #[arg(long)]
    pub csls_k: Option<usize>,
    /// Rank with raw cosine instead of CSLS.
    #[arg(long)]
    pub no_csls: bool,
    /// Skip the iterative-learning phase.
    #[arg(long)]
    pub no_il: bool,
    /// Degree-sum strata in the evaluation report.
    #[arg(long)]
    pub strata: Option<usize>,
}

#[derive(Args)]
pub struct InduceArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated pivot counts to induce.
    #[arg(long)]
    pub pivots: Option<String>,
    /// Similarity cut-off applied after induction.
    #[arg(long)]
    pub pivot_threshold: Option<f64>,
    /// Gold pivot file for precision reporting (defaults to the
    /// manifest's pivots.gold when present).
    #[arg(long)]
    pub gold: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub csls_k: Option<usize>,
    #[arg(long)]
    pub no_csls: bool,
    /// Rank against every target entity instead of the test pool.
    #[arg(long)]
    pub all_candidates: bool,
    #[arg(long)]
    pub strata: Option<usize>,
}

/// Entry point used by the binary; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(&args),
        Command::Train(args) => cmd_train(&args, &[]),
        Command::Ablate(args) => {
            let disabled = args.disable.clone();
            cmd_train(&args, &disabled)
        }
        Command::InducePivots(args) => cmd_induce_pivots(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn ensure_fresh(path: &Path) -> Result<()> {
    if path.exists() {
        return Err(Error::Invalid(format!(
            "refusing to overwrite existing output {}",
            path.display()
        )));
    }
    Ok(())
}

fn parse_modalities(names: &[String]) -> Result<Vec<Modality>> {
    names
        .iter()
        .map(|n| {
            Modality::from_name(n)
                .ok_or_else(|| Error::Config(format!("unknown modality '{n}'")))
        })
        .collect()
}

fn parse_seed_list(raw: &str) -> Result<Vec<u64>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("bad seed '{s}'")))
        })
        .collect()
}

/// Build a [`TrainConfig`] from the train.* keys of a manifest.
pub fn train_config_from_manifest(kv: &KeyValueFile) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    cfg.rng_seed = kv.parsed_or("seed", 0)?;
    cfg.optimizer.learning_rate = kv.parsed_or("train.learning_rate", cfg.optimizer.learning_rate)?;
    cfg.optimizer.weight_decay = kv.parsed_or("train.weight_decay", cfg.optimizer.weight_decay)?;
    cfg.batch_size = kv.parsed_or("train.batch_size", cfg.batch_size)?;
    cfg.base_epochs = kv.parsed_or("train.base_epochs", cfg.base_epochs)?;
    cfg.il_epochs = kv.parsed_or("train.il_epochs", cfg.il_epochs)?;
    cfg.il = ILConfig {
        k_e: kv.parsed_or("train.k_e", cfg.il.k_e)?,
        k_s: kv.parsed_or("train.k_s", cfg.il.k_s)?,
    };
    cfg.loss.alpha_structure = kv.parsed_or("train.alpha_structure", cfg.loss.alpha_structure)?;
    cfg.loss.alpha_other = kv.parsed_or("train.alpha_other", cfg.loss.alpha_other)?;
    cfg.loss.beta = kv.parsed_or("train.beta", cfg.loss.beta)?;
    if let Some(dims) = kv.get("train.gcn_dims") {
        let parts: Vec<usize> = dims
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad train.gcn_dims '{dims}'")))
            })
            .collect::<Result<_>>()?;
        if parts.len() != 3 {
            return Err(Error::Config(
                "train.gcn_dims needs three comma-separated widths".to_string(),
            ));
        }
        cfg.dims.entity_dim = parts[0];
        cfg.dims.gcn_hidden = parts[1];
        cfg.dims.gcn_out = parts[2];
    }
    if let Some(d) = kv.parsed::<usize>("train.proj_dim")? {
        for m in Modality::FEATURE {
            cfg.dims.proj_out.insert(m, d);
        }
    }
    for m in Modality::FEATURE {
        if let Some(d) = kv.parsed::<usize>(&format!("train.proj_dim.{}", m.name()))? {
            cfg.dims.proj_out.insert(m, d);
        }
    }
    cfg.unsupervised = kv.parsed_or("train.unsupervised", false)?;
    cfg.visual_pivot_count = kv.parsed::<usize>("train.visual_pivots")?;
    cfg.visual_pivot_threshold = kv.parsed::<f64>("train.visual_pivot_threshold")?;
    cfg.il_use_csls = kv.parsed_or("train.il_use_csls", false)?;
    cfg.csls_k = kv.parsed_or("train.csls_k", cfg.csls_k)?;
    Ok(cfg)
}

fn eval_options_from(kv: &KeyValueFile, args: &TrainArgs) -> Result<EvalOptions> {
    let mut opts = EvalOptions::default();
    opts.use_csls = kv.parsed_or("train.eval_csls", true)?;
    opts.csls_k = kv.parsed_or("train.csls_k", opts.csls_k)?;
    if kv.parsed_or("train.eval_candidates_all", false)? {
        opts.all_candidates = true;
    }
    if args.no_csls {
        opts.use_csls = false;
    }
    if let Some(k) = args.csls_k {
        opts.csls_k = k;
    }
    opts.strata = args.strata;
    Ok(opts)
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::default();
    if let Some(path) = &args.config {
        let kv = KeyValueFile::parse(path)?;
        cfg.entities = kv.parsed_or("synth.entities", cfg.entities)?;
        cfg.triples = kv.parsed_or("synth.triples", cfg.triples)?;
        cfg.relations = kv.parsed_or("synth.relations", cfg.relations)?;
        cfg.latent_dim = kv.parsed_or("synth.latent_dim", cfg.latent_dim)?;
        if let Some(s) = kv.parsed::<f64>("synth.noise")? {
            cfg = cfg.with_noise(s);
        }
        cfg.noise_image = kv.parsed_or("synth.noise_image", cfg.noise_image)?;
        cfg.noise_relation = kv.parsed_or("synth.noise_relation", cfg.noise_relation)?;
        cfg.noise_attribute = kv.parsed_or("synth.noise_attribute", cfg.noise_attribute)?;
        cfg.noise_surface = kv.parsed_or("synth.noise_surface", cfg.noise_surface)?;
        cfg.include_surface = kv.parsed_or("synth.include_surface", cfg.include_surface)?;
        cfg.power_law_exponent = kv.parsed_or("synth.exponent", cfg.power_law_exponent)?;
        cfg.edge_dropout = kv.parsed_or("synth.edge_dropout", cfg.edge_dropout)?;
        cfg.seed_fraction = kv.parsed_or("synth.seed_fraction", cfg.seed_fraction)?;
        cfg.pivot_degree_bias = kv.parsed_or("synth.pivot_degree_bias", cfg.pivot_degree_bias)?;
        cfg.hub_core_size = kv.parsed_or("synth.hub_core_size", cfg.hub_core_size)?;
        cfg.spoke_exponent = kv.parsed_or("synth.spoke_exponent", cfg.spoke_exponent)?;
        cfg.max_spokes = kv.parsed_or("synth.max_spokes", cfg.max_spokes)?;
        cfg.twin_image_noise_factor =
            kv.parsed_or("synth.twin_image_noise_factor", cfg.twin_image_noise_factor)?;
        cfg.duplicate_fraction = kv.parsed_or("synth.duplicate_fraction", cfg.duplicate_fraction)?;
        cfg.duplicate_jitter = kv.parsed_or("synth.duplicate_jitter", cfg.duplicate_jitter)?;
        cfg.image_coverage = kv.parsed_or("synth.image_coverage", cfg.image_coverage)?;
        cfg.seed = kv.parsed_or("synth.seed", cfg.seed)?;
    }
    if let Some(v) = args.entities {
        cfg.entities = v;
    }
    if let Some(v) = args.triples {
        cfg.triples = v;
    }
    if let Some(v) = args.noise {
        cfg = cfg.with_noise(v);
    }
    if let Some(v) = args.image_noise {
        cfg.noise_image = v;
    }
    if let Some(v) = args.exponent {
        cfg.power_law_exponent = v;
    }
    if let Some(v) = args.seed_fraction {
        cfg.seed_fraction = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }

    ensure_fresh(&args.out.join("task.cfg"))?;
    let manifest = write_to_dir(&cfg, &args.out)?;
    println!(
        "synthesized {} entities/side, {} source triples -> {}",
        cfg.entities,
        cfg.triples,
        manifest.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SeedReport {
    seed: u64,
    #[serde(flatten)]
    metrics: EvalReport,
    final_pivot_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    induced_pivot_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    induced_pivot_precision: Option<f64>,
}

#[derive(Serialize)]
struct MetricStats {
    h1: f64,
    h10: f64,
    mrr: f64,
}

#[derive(Serialize)]
struct AggregateReport {
    n_seeds: usize,
    disabled_modalities: Vec<String>,
    per_seed: Vec<SeedReport>,
    mean: MetricStats,
    variance: MetricStats,
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn seed_worker_count() -> usize {
    std::env::var("MMEA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

struct SeedOutcome {
    seed: u64,
    state: TrainState,
    report: EvalReport,
}

fn run_seeds(
    task: &AlignmentTask,
    base_cfg: &TrainConfig,
    opts: &EvalOptions,
    seeds: &[u64],
) -> Result<Vec<SeedOutcome>> {
    let workers = seed_worker_count().min(seeds.len().max(1));
    if workers <= 1 {
        return seeds
            .iter()
            .map(|&seed| run_one_seed(task, base_cfg, opts, seed))
            .collect();
    }
    let mut outcomes: Vec<Option<Result<SeedOutcome>>> = Vec::new();
    outcomes.resize_with(seeds.len(), || None);
    for chunk_start in (0..seeds.len()).step_by(workers) {
        let chunk_end = (chunk_start + workers).min(seeds.len());
        let slots = &mut outcomes[chunk_start..chunk_end];
        let chunk = &seeds[chunk_start..chunk_end];
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for &seed in chunk {
                handles.push(scope.spawn(move || run_one_seed(task, base_cfg, opts, seed)));
            }
            for (slot, handle) in slots.iter_mut().zip(handles) {
                *slot = Some(handle.join().expect("seed worker panicked"));
            }
        });
    }
    outcomes.into_iter().map(|o| o.expect("slot filled")).collect()
}

fn run_one_seed(
    task: &AlignmentTask,
    base_cfg: &TrainConfig,
    opts: &EvalOptions,
    seed: u64,
) -> Result<SeedOutcome> {
    let mut cfg = base_cfg.clone();
    cfg.rng_seed = seed;
    let state = train(task, &cfg)?;
    let report = evaluate_trained(task, &state.params, opts)?;
    Ok(SeedOutcome {
        seed,
        state,
        report,
    })
}

fn cmd_train(args: &TrainArgs, extra_disabled: &[String]) -> Result<()> {
    let kv = KeyValueFile::parse(&args.config)?;
    let task = load_task_from_manifest(&kv)?;
    for (modality, src_cov, tgt_cov) in task.coverage() {
        println!(
            "{modality}: coverage {:.1}% / {:.1}%",
            100.0 * src_cov,
            100.0 * tgt_cov
        );
    }

    let mut cfg = train_config_from_manifest(&kv)?;
    let mut disabled = parse_modalities(&args.disable)?;
    disabled.extend(parse_modalities(extra_disabled)?);
    disabled.sort();
    disabled.dedup();
    cfg.disabled = disabled.clone();
    if args.unsupervised {
        cfg.unsupervised = true;
    }
    if let Some(n) = args.pivots {
        cfg.visual_pivot_count = Some(n);
    }
    if let Some(t) = args.pivot_threshold {
        cfg.visual_pivot_threshold = Some(t);
    }
    if args.no_il {
        cfg.il_epochs = 0;
    }
    let opts = eval_options_from(&kv, args)?;

    let seeds = match &args.seeds {
        Some(raw) => parse_seed_list(raw)?,
        None => vec![cfg.rng_seed],
    };
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    ensure_fresh(&args.out.join("report.json"))?;

    let gold: Option<HashSet<(usize, usize)>> = kv
        .opt_path_value("pivots.gold")
        .map(|p| read_pivots(&p))
        .transpose()?
        .map(|pairs| pairs.into_iter().collect());

    let outcomes = run_seeds(&task, &cfg, &opts, &seeds)?;
    let mut per_seed = Vec::new();
    for outcome in &outcomes {
        let seed = outcome.seed;
        fs::write(
            args.out.join(format!("history_seed{seed}.csv")),
            outcome.state.history_csv(),
        )
        .map_err(|e| Error::io(&args.out, e))?;
        fs::write(
            args.out.join(format!("report_seed{seed}.json")),
            outcome.report.to_json(),
        )
        .map_err(|e| Error::io(&args.out, e))?;
        save_checkpoint(&args.out.join(format!("checkpoint_seed{seed}")), &outcome.state)?;

        let (induced_count, induced_precision) = match (&outcome.state.induced_seeds, &gold) {
            (Some(induced), Some(gold)) if !induced.is_empty() => {
                let hits = induced
                    .iter()
                    .filter(|p| gold.contains(&(p.source, p.target)))
                    .count();
                (
                    Some(induced.len()),
                    Some(hits as f64 / induced.len() as f64),
                )
            }
            (Some(induced), None) => (Some(induced.len()), None),
            _ => (None, None),
        };
        println!(
            "seed {seed}: H@1 {:.4}  H@10 {:.4}  MRR {:.4}  pivots {}{}",
            outcome.report.h1,
            outcome.report.h10,
            outcome.report.mrr,
            outcome.state.ledger.permanent_len(),
            induced_precision
                .map(|p| format!("  induced precision {p:.3}"))
                .unwrap_or_default()
        );
        per_seed.push(SeedReport {
            seed,
            metrics: outcome.report.clone(),
            final_pivot_count: outcome.state.ledger.permanent_len(),
            induced_pivot_count: induced_count,
            induced_pivot_precision: induced_precision,
        });
    }

    let collect = |f: fn(&EvalReport) -> f64| -> Vec<f64> {
        per_seed.iter().map(|s| f(&s.metrics)).collect()
    };
    let (h1_mean, h1_var) = mean_var(&collect(|r| r.h1));
    let (h10_mean, h10_var) = mean_var(&collect(|r| r.h10));
    let (mrr_mean, mrr_var) = mean_var(&collect(|r| r.mrr));
    let aggregate = AggregateReport {
        n_seeds: per_seed.len(),
        disabled_modalities: disabled.iter().map(|m| m.name().to_string()).collect(),
        per_seed,
        mean: MetricStats {
            h1: h1_mean,
            h10: h10_mean,
            mrr: mrr_mean,
        },
        variance: MetricStats {
            h1: h1_var,
            h10: h10_var,
            mrr: mrr_var,
        },
    };
    fs::write(
        args.out.join("report.json"),
        serde_json::to_string_pretty(&aggregate).expect("report serializes"),
    )
    .map_err(|e| Error::io(&args.out, e))?;
    println!(
        "H@1 {h1_mean:.4} ± {h1_var:.6}  H@10 {h10_mean:.4} ± {h10_var:.6}  MRR {mrr_mean:.4} ± {mrr_var:.6} over {} seed(s)",
        outcomes.len()
    );
    Ok(())
}

fn cmd_induce_pivots(args: &InduceArgs) -> Result<()> {
    let kv = KeyValueFile::parse(&args.config)?;
    let task = load_task_from_manifest(&kv)?;
    let sim = visual_similarity(&task)?;

    let max_n = sim.rows().min(sim.cols());
    let ns: Vec<usize> = match &args.pivots {
        Some(raw) => raw
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad pivot count '{s}'")))
            })
            .collect::<Result<_>>()?,
        None => vec![max_n],
    };

    let gold: Option<HashSet<(usize, usize)>> = match &args.gold {
        Some(p) => Some(read_pivots(p)?.into_iter().collect()),
        None => kv
            .opt_path_value("pivots.gold")
            .map(|p| read_pivots(&p))
            .transpose()?
            .map(|pairs| pairs.into_iter().collect()),
    };

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut summary = String::from("n,kept,precision\n");
    for &n in &ns {
        let mut pivots = induce_visual_pivots(&sim, n)?;
        if let Some(t) = args.pivot_threshold {
            pivots = threshold_pivots(&pivots, t);
        }
        let out_path = args.out.join(format!("pivots_n{n}.tsv"));
        ensure_fresh(&out_path)?;
        let rows: Vec<(usize, usize, f64)> =
            pivots.iter().map(|p| (p.source, p.target, p.score)).collect();
        write_scored_pivots(&out_path, &rows)?;
        let precision = gold.as_ref().map(|g| {
            if pivots.is_empty() {
                0.0
            } else {
                pivots
                    .iter()
                    .filter(|p| g.contains(&(p.source, p.target)))
                    .count() as f64
                    / pivots.len() as f64
            }
        });
        match precision {
            Some(p) => {
                println!("n = {n}: kept {} pivots, precision {p:.4}", pivots.len());
                summary.push_str(&format!("{n},{},{p}\n", pivots.len()));
            }
            None => {
                println!("n = {n}: kept {} pivots", pivots.len());
                summary.push_str(&format!("{n},{},\n", pivots.len()));
            }
        }
    }
    fs::write(args.out.join("pivot_precision.csv"), summary)
        .map_err(|e| Error::io(&args.out, e))?;
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let kv = KeyValueFile::parse(&args.config)?;
    let task = load_task_from_manifest(&kv)?;
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let mut opts = EvalOptions::default();
    opts.use_csls = !args.no_csls;
    if let Some(k) = args.csls_k {
        opts.csls_k = k;
    }
    opts.all_candidates = args.all_candidates;
    opts.strata = args.strata;

    let report = evaluate_trained(&task, &checkpoint.params, &opts)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let json_path = args.out.join("report.json");
    ensure_fresh(&json_path)?;
    fs::write(&json_path, report.to_json()).map_err(|e| Error::io(&json_path, e))?;
    fs::write(args.out.join("report.csv"), report.to_csv())
        .map_err(|e| Error::io(&args.out, e))?;
    println!(
        "H@1 {:.4}  H@10 {:.4}  MRR {:.4}  over {} queries",
        report.h1, report.h10, report.mrr, report.n
    );
    Ok(())
}
