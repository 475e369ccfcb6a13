use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use headsparse::engine::SparsityPolicy;
use headsparse::model::init_model;
use headsparse::specializer::gate_expectations;
use headsparse_cli::commands::{
    decode, duplicate_layer_model, format_bench, format_grid, format_sweep, overlap_grid, run_bench, run_sweep,
    specialize, sweep_batches, BenchConfig,
};
use headsparse_cli::config::{parse_policy, policy_label, ExperimentConfig};
use headsparse_cli::files::{load_model, load_rolemap, read_prompt, save_model, save_rolemap, write_atomic};
use headsparse_cli::record::{now_unix_ms, RunRecord};
use serde_json::json;

#[derive(Parser)]
#[command(name = "headsparse", version, about = "Hybrid retrieval/sparse head decoding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded toy model.
    InitModel {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's model seed.
        #[arg(long, env = "HEADSPARSE_SEED")]
        seed: Option<u64>,
        /// Every layer copies layer 0 and leaves the residual stream untouched.
        #[arg(long)]
        duplicate_layers: bool,
    },
    /// Learn head roles on synthetic passkey prompts and write a role map.
    Specialize {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Model to specialize; defaults to the config's seeded toy model.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Line-delimited JSON training log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        record: Option<PathBuf>,
        /// Overrides the config's training seed.
        #[arg(long, env = "HEADSPARSE_SEED")]
        seed: Option<u64>,
    },
    /// Greedy decoding with hybrid heads.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        rolemap: PathBuf,
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long, value_enum, default_value_t = PolicyKind::Ratio)]
        policy: PolicyKind,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, default_value_t = 0.7)]
        theta: f64,
        #[arg(long, default_value_t = 16)]
        tokens: usize,
        #[arg(long)]
        correction_window: Option<usize>,
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Simulated kernel cost across context lengths and split counts.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        rolemap: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096")]
        lengths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        splits: Vec<usize>,
        /// Fraction of blocks a sparse head skips.
        #[arg(long, default_value_t = 0.9)]
        sparsity: f64,
        #[arg(long, default_value_t = 64)]
        block_size: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, env = "HEADSPARSE_SEED", default_value_t = 0)]
        seed: u64,
        /// Skip the wall-clock measurement.
        #[arg(long)]
        no_measure: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Top-k overlap between adjacent layers at the final prompt position.
    Overlap {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measured sparsity and passkey agreement per selection policy.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        rolemap: PathBuf,
        /// Comma-separated: dense, topk:K, topp:P, threshold:TAU, ratio:THETA.
        #[arg(long, value_delimiter = ',', default_value = "dense,topk:64,topk:16,topp:0.9,threshold:0.01,ratio:0.7,ratio:0.8,ratio:0.9")]
        policies: Vec<String>,
        /// Prompt settings for the passkey batches.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long, env = "HEADSPARSE_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        record: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyKind {
    Dense,
    Topk,
    Topp,
    Threshold,
    Ratio,
}

fn experiment(path: Option<&Path>) -> Result<ExperimentConfig> {
    path.map_or_else(|| Ok(ExperimentConfig::default()), ExperimentConfig::load)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn policy_from_flags(kind: PolicyKind, k: Option<usize>, p: Option<f64>, tau: Option<f64>, theta: f64) -> Result<SparsityPolicy> {
    let policy = match kind {
        PolicyKind::Dense => SparsityPolicy::TopK(usize::MAX),
        PolicyKind::Topk => SparsityPolicy::TopK(k.context("--policy topk needs --k")?),
        PolicyKind::Topp => SparsityPolicy::TopP(p.context("--policy topp needs --p")?),
        PolicyKind::Threshold => SparsityPolicy::Threshold(tau.context("--policy threshold needs --tau")?),
        PolicyKind::Ratio => SparsityPolicy::Ratio(theta),
    };
    policy.validate()?;
    Ok(policy)
}

fn run(cli: Cli) -> Result<()> {
    let started = now_unix_ms();
    match cli.command {
        Command::InitModel { config, out, seed, duplicate_layers } => {
            let cfg = experiment(config.as_deref())?;
            let seed = seed.unwrap_or(cfg.model_seed);
            let model =
                if duplicate_layers { duplicate_layer_model(&cfg.model, seed)? } else { init_model(&cfg.model, seed)? };
            save_model(&out, &model)?;
            eprintln!("wrote {} (checksum {})", out.display(), model.checksum());
        }
        Command::Specialize { config, out, model, log, record, seed } => {
            let mut cfg = experiment(config.as_deref())?;
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            cfg.train.validate(&cfg.model)?;
            let weights = match &model {
                Some(path) => load_model(path)?,
                None => init_model(&cfg.model, cfg.model_seed)?,
            };
            if weights.config != cfg.model {
                bail!("model file does not match the [model] section of the config");
            }
            let mut lines = String::new();
            let (state, roles) = specialize(&cfg, &weights, |step| {
                lines.push_str(&serde_json::to_string(step).expect("step logs serialize"));
                lines.push('\n');
            })?;
            save_rolemap(&out, &roles)?;
            if let Some(path) = &log {
                write_atomic(path, lines.as_bytes())?;
            }
            let expectations = gate_expectations(&state);
            let undecided = expectations.iter().filter(|e| **e > 0.05 && **e < 0.95).count();
            let l0 = state.expected_l0();
            let metrics = json!({
                "expected_l0": l0,
                "constraint_gap": (l0 - cfg.train.n_target).abs(),
                "lambda": state.lambda,
                "gated_retrieval_heads": roles.gated_retrieval_count(),
                "undecided_gates": undecided,
                "final_distill": state.history.last().map(|s| s.distill),
            });
            eprintln!("{metrics}");
            if let Some(path) = &record {
                RunRecord::new("specialize", serde_json::to_value(&cfg)?, metrics, started).write(path)?;
            }
        }
        Command::Decode { model, rolemap, prompt, policy, k, p, tau, theta, tokens, correction_window, record } => {
            let weights = load_model(&model)?;
            let roles = load_rolemap(&rolemap, &weights)?;
            let prompt_ids = read_prompt(&prompt)?;
            let policy = policy_from_flags(policy, k, p, tau, theta)?;
            let outcome = decode(&weights, roles, &prompt_ids, policy, tokens, correction_window)?;
            let text: Vec<String> = outcome.tokens.iter().map(u32::to_string).collect();
            println!("{}", text.join(" "));
            eprintln!(
                "sparsity={:.6} tpot_mean_ms={:.4} corrections={}",
                outcome.sparsity, outcome.tpot_mean_ms, outcome.corrections
            );
            if let Some(path) = &record {
                let config = json!({
                    "model": model, "model_checksum": weights.checksum(), "rolemap": rolemap, "prompt": prompt,
                    "policy": policy_label(policy), "tokens": tokens, "correction_window": correction_window,
                });
                RunRecord::new("decode", config, serde_json::to_value(&outcome)?, started).write(path)?;
            }
        }
        Command::Bench {
            model,
            rolemap,
            lengths,
            splits,
            sparsity,
            block_size,
            batch,
            seed,
            no_measure,
            out,
            record,
        } => {
            let weights = load_model(&model)?;
            let roles = load_rolemap(&rolemap, &weights)?;
            let bench = BenchConfig { lengths, splits, sparsity, block_size, batch, seed, measure: !no_measure };
            let rows = run_bench(&weights.config, &roles, &bench)?;
            emit(out.as_deref(), &format_bench(&rows))?;
            if let Some(path) = &record {
                let config = json!({ "model": model, "rolemap": rolemap, "bench": bench });
                RunRecord::new("bench", config, json!({ "rows": rows }), started).write(path)?;
            }
        }
        Command::Overlap { model, prompt, k, out } => {
            let weights = load_model(&model)?;
            let grid = overlap_grid(&weights, &read_prompt(&prompt)?, k)?;
            emit(out.as_deref(), &format_grid(&grid))?;
        }
        Command::Sweep { model, rolemap, policies, config, samples, seed, out, record } => {
            let weights = load_model(&model)?;
            let roles = load_rolemap(&rolemap, &weights)?;
            let cfg = experiment(config.as_deref())?;
            let parsed = policies.iter().map(|p| parse_policy(p)).collect::<Result<Vec<_>>>()?;
            let batches = sweep_batches(&cfg, samples, seed);
            let rows = run_sweep(&weights, &roles, &parsed, &batches)?;
            emit(out.as_deref(), &format_sweep(&rows))?;
            if let Some(path) = &record {
                let config = json!({
                    "model": model, "rolemap": rolemap, "policies": policies, "samples": samples, "seed": seed,
                    "experiment": cfg,
                });
                RunRecord::new("sweep", config, json!({ "rows": rows }), started).write(path)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

