use std::time::Instant;

use anyhow::{bail, Result};
use headsparse::attention::args_top_k;
use headsparse::engine::{Engine, EngineConfig, SparsityPolicy};
use headsparse::kernel_sim::{
    bytes_per_block, execute, hybrid_blocks, latency_model, plan_splits, BlockIndexSet, KernelInput,
};
use headsparse::model::{argmax, dense_run, forward_full, init_model, Linear, ModelConfig, ModelWeights};
use headsparse::rolemap::RoleMap;
use headsparse::specializer::{batch_seed, gen_passkey_batch, train, PasskeyBatch, StepLog, TrainState};
use headsparse::specializer::export_roles;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{policy_label, ExperimentConfig};

/// Model whose layers all share layer 0's weights, with the attention output
/// and feed-forward down projections zeroed so every layer sees the same
/// residual stream.
pub fn duplicate_layer_model(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    let mut model = init_model(config, seed)?;
    let mut first = model.layers[0].clone();
    first.wo = Linear::zeros(first.wo.in_dim, first.wo.out_dim);
    first.w_down = Linear::zeros(first.w_down.in_dim, first.w_down.out_dim);
    model.layers.iter_mut().for_each(|l| *l = first.clone());
    Ok(model)
}

/// `grid[l][h]`: overlap of the top-`k` token sets of query head `h` at the
/// final prompt position between layers `l` and `l + 1`, as
/// `|A ∩ B| / min(k, len)`.
pub fn overlap_grid(model: &ModelWeights, prompt: &[u32], k: usize) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        bail!("k must be at least 1");
    }
    let run = dense_run(model, prompt)?;
    let denom = k.min(prompt.len()) as f64;
    let sets: Vec<Vec<_>> =
        run.last_weights.iter().map(|layer| layer.iter().map(|w| args_top_k(w, k)).collect()).collect();
    Ok(sets
        .windows(2)
        .map(|pair| pair[0].iter().zip(&pair[1]).map(|(a, b)| a.intersection_len(b) as f64 / denom).collect())
        .collect())
}

/// Tab-separated grid with a header row of head indices and one row per
/// adjacent layer pair.
pub fn format_grid(grid: &[Vec<f64>]) -> String {
    let heads = grid.first().map_or(0, Vec::len);
    let mut out = String::from("layers");
    for h in 0..heads {
        out.push_str(&format!("\thead{h}"));
    }
    out.push('\n');
    for (l, row) in grid.iter().enumerate() {
        out.push_str(&format!("{l}-{}", l + 1));
        for v in row {
            out.push_str(&format!("\t{v:.6}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct DecodeOutcome {
    pub tokens: Vec<u32>,
    pub step_ms: Vec<f64>,
    pub tpot_mean_ms: f64,
    pub sparsity: f64,
    pub corrections: usize,
}

pub fn decode(
    model: &ModelWeights,
    roles: RoleMap,
    prompt: &[u32],
    policy: SparsityPolicy,
    n_tokens: usize,
    correction_window: Option<usize>,
) -> Result<DecodeOutcome> {
    let config = EngineConfig { policy, correction_window, record_sets: false };
    let mut engine = Engine::new(model, roles, config)?;
    let tokens = engine.generate(prompt, n_tokens)?;
    let step_ms: Vec<f64> = engine.records().iter().map(|r| r.elapsed.as_secs_f64() * 1e3).collect();
    let tpot_mean_ms = if step_ms.is_empty() { 0.0 } else { step_ms.iter().sum::<f64>() / step_ms.len() as f64 };
    Ok(DecodeOutcome {
        tokens,
        tpot_mean_ms,
        sparsity: engine.measure_sparsity(),
        corrections: engine.records().iter().filter(|r| r.corrected).count(),
        step_ms,
    })
}

/// Greedy continuation from a dense forward over the whole sequence at
/// every step.
pub fn dense_greedy(model: &ModelWeights, prompt: &[u32], n_tokens: usize) -> Result<Vec<u32>> {
    let mut seq = prompt.to_vec();
    for _ in 0..n_tokens {
        let logits = forward_full(model, &seq)?;
        seq.push(argmax(logits.last().expect("non-empty sequence")));
    }
    Ok(seq.split_off(prompt.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Workload {
    /// Every head reads every block.
    Dense,
    /// Retrieval heads of the role map read every block, the rest a subset.
    Hybrid,
    /// Every head reads a subset.
    Sparse,
}

impl Workload {
    pub fn label(self) -> &'static str {
        match self {
            Workload::Dense => "dense",
            Workload::Hybrid => "hybrid",
            Workload::Sparse => "sparse",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub splits: Vec<usize>,
    pub sparsity: f64,
    pub block_size: usize,
    pub batch: usize,
    pub seed: u64,
    pub measure: bool,
}

/// One decode step's kernel work summed over layers.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub length: usize,
    pub splits: usize,
    pub workload: Workload,
    pub total_blocks: usize,
    pub critical_path_blocks: usize,
    pub critical_path_bytes: usize,
    pub naive_critical_path_blocks: usize,
    /// Worst per-layer max/mean split load.
    pub balance_ratio: f64,
    pub wall_ms_per_token: Option<f64>,
}

fn layer_blocks(
    cfg: &ModelConfig,
    roles: &RoleMap,
    bench: &BenchConfig,
    workload: Workload,
    length: usize,
    layer: usize,
) -> Result<BlockIndexSet> {
    let retrieval: Vec<bool> = (0..cfg.n_kv_heads)
        .map(|h| match workload {
            Workload::Dense => true,
            Workload::Hybrid => roles.is_retrieval(layer, h),
            Workload::Sparse => false,
        })
        .collect();
    let seed = bench.seed ^ ((length as u64) << 20) ^ ((layer as u64) << 8) ^ workload as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(hybrid_blocks(bench.batch, &retrieval, length, bench.block_size, bench.sparsity, &mut rng)?)
}

fn random_input(cfg: &ModelConfig, batch: usize, length: usize, seed: u64) -> KernelInput<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vecs = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect() };
    let queries = (0..batch).map(|_| (0..cfg.n_q_heads).map(|_| vecs(cfg.d_head)).collect()).collect();
    let keys = (0..batch).map(|_| (0..cfg.n_kv_heads).map(|_| vecs(length * cfg.d_head)).collect()).collect();
    let values = (0..batch).map(|_| (0..cfg.n_kv_heads).map(|_| vecs(length * cfg.d_head)).collect()).collect();
    KernelInput {
        d_head: cfg.d_head,
        group_size: cfg.group_size(),
        scale: cfg.attn_scale() as f32,
        queries,
        keys,
        values,
    }
}

/// Simulated kernel cost of one decode step for every length, split count
/// and workload. Workloads depend only on `(seed, length, layer)`, so rows
/// that differ only in split count schedule the same blocks.
pub fn run_bench(cfg: &ModelConfig, roles: &RoleMap, bench: &BenchConfig) -> Result<Vec<BenchRow>> {
    if bench.batch == 0 || bench.block_size == 0 {
        bail!("batch and block size must be at least 1");
    }
    let bpb = bytes_per_block(bench.block_size, cfg.d_head, std::mem::size_of::<f32>());
    let mut rows = Vec::new();
    for &length in &bench.lengths {
        if length == 0 {
            bail!("context lengths must be at least 1");
        }
        let input = bench.measure.then(|| random_input(cfg, bench.batch, length, bench.seed ^ length as u64));
        for workload in [Workload::Dense, Workload::Hybrid, Workload::Sparse] {
            let layers: Vec<BlockIndexSet> = (0..cfg.n_layers)
                .map(|l| layer_blocks(cfg, roles, bench, workload, length, l))
                .collect::<Result<_>>()?;
            for &splits in &bench.splits {
                let mut row = BenchRow {
                    length,
                    splits,
                    workload,
                    total_blocks: 0,
                    critical_path_blocks: 0,
                    critical_path_bytes: 0,
                    naive_critical_path_blocks: 0,
                    balance_ratio: 0.0,
                    wall_ms_per_token: None,
                };
                let mut wall = 0.0;
                for blocks in &layers {
                    let schedule = plan_splits(blocks, splits)?;
                    let report = latency_model(&schedule, bpb);
                    row.total_blocks += report.total_blocks;
                    row.critical_path_blocks += report.critical_path_blocks;
                    row.critical_path_bytes += report.critical_path_bytes;
                    row.naive_critical_path_blocks += report.naive_critical_path_blocks;
                    row.balance_ratio = row.balance_ratio.max(report.balance_ratio);
                    if let Some(input) = &input {
                        let start = Instant::now();
                        execute(input, blocks, &schedule, 1)?;
                        wall += start.elapsed().as_secs_f64() * 1e3;
                    }
                }
                row.wall_ms_per_token = input.as_ref().map(|_| wall);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

pub fn format_bench(rows: &[BenchRow]) -> String {
    let mut out = String::from(
        "length\tsplits\tworkload\ttotal_blocks\tcritical_path_blocks\tcritical_path_bytes\tnaive_critical_path_blocks\tbalance_ratio\twall_ms_per_token\n",
    );
    for r in rows {
        let wall = r.wall_ms_per_token.map_or_else(|| "-".to_string(), |w| format!("{w:.3}"));
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{}\n",
            r.length,
            r.splits,
            r.workload.label(),
            r.total_blocks,
            r.critical_path_blocks,
            r.critical_path_bytes,
            r.naive_critical_path_blocks,
            r.balance_ratio,
            wall
        ));
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub policy: String,
    /// Invocation-weighted over every batch.
    pub sparsity: f64,
    /// Top-1 agreement with the dense teacher at the passkey positions.
    pub accuracy: f64,
}

/// Passkey batches drawn from the experiment's prompt settings.
pub fn sweep_batches(cfg: &ExperimentConfig, samples: usize, seed: u64) -> Vec<PasskeyBatch> {
    (0..samples).map(|i| gen_passkey_batch(&cfg.train, cfg.model.vocab_size, batch_seed(seed, 0, i))).collect()
}

pub fn run_sweep(
    model: &ModelWeights,
    roles: &RoleMap,
    policies: &[SparsityPolicy],
    batches: &[PasskeyBatch],
) -> Result<Vec<SweepRow>> {
    if batches.is_empty() {
        bail!("sweep needs at least one batch");
    }
    let teacher: Vec<Vec<u32>> = batches
        .iter()
        .map(|b| {
            let mut seq = b.prompt.clone();
            seq.extend_from_slice(&b.targets[..b.targets.len() - 1]);
            let logits = forward_full(model, &seq)?;
            Ok(logits[b.prompt.len() - 1..].iter().map(|l| argmax(l)).collect())
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(policies.len());
    for &policy in policies {
        let (mut hits, mut total) = (0usize, 0usize);
        let (mut kept, mut invocations) = (0.0, 0usize);
        for (b, expected) in batches.iter().zip(&teacher) {
            let config = EngineConfig { policy, correction_window: None, record_sets: false };
            let mut engine = Engine::new(model, roles.clone(), config)?;
            let mut logits = engine.prefill(&b.prompt)?;
            for (i, &want) in expected.iter().enumerate() {
                hits += usize::from(argmax(&logits) == want);
                total += 1;
                if i + 1 < expected.len() {
                    logits = engine.decode_step(b.targets[i])?;
                }
            }
            kept += engine.measure_sparsity() * engine.sparse_invocations() as f64;
            invocations += engine.sparse_invocations();
        }
        rows.push(SweepRow {
            policy: policy_label(policy),
            sparsity: if invocations == 0 { 0.0 } else { kept / invocations as f64 },
            accuracy: hits as f64 / total as f64,
        });
    }
    Ok(rows)
}

pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut out = String::from("policy\tsparsity\taccuracy\n");
    for r in rows {
        out.push_str(&format!("{}\t{:.6}\t{:.6}\n", r.policy, r.sparsity, r.accuracy));
    }
    out
}

/// Trains gates on the experiment's passkey task and exports the roles.
pub fn specialize(
    cfg: &ExperimentConfig,
    model: &ModelWeights,
    on_step: impl FnMut(&StepLog),
) -> Result<(TrainState, RoleMap)> {
    let state = train(model, cfg.train.clone(), on_step)?;
    let roles = export_roles(&model.config, &state)?;
    Ok((state, roles))
}
