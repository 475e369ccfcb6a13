//! CPU simulator of the hybrid-head block-sparse split-K decode kernel.
//!
//! Every KV head contributes a list of KV-cache blocks: retrieval heads list
//! all of them, sparse heads a subset. The blocks of all heads of one batch
//! item are pooled and cut into `num_splits` contiguous, near-equal chunks,
//! so a split may straddle head boundaries. Each split runs an online
//! softmax per (head, split) pair and stores a normalized partial output
//! with its log-sum-exp; a final reduction merges the partials of each head.
//!
//! The ragged tail block is padded with masked (`-inf`) slots.

use std::fmt;

use num_traits::Float;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;

use crate::attention::{SoftmaxAccumulator, TokenSet};
use crate::{Error, Result};

pub const DEFAULT_BLOCK_SIZE: usize = 64;

/// Per (batch item, KV head) ascending list of block ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockIndexSet {
    block_size: usize,
    blocks: Vec<Vec<Vec<usize>>>,
}

impl BlockIndexSet {
    pub fn new(block_size: usize, blocks: Vec<Vec<Vec<usize>>>) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::Config("block size must be at least 1".into()));
        }
        for (b, heads) in blocks.iter().enumerate() {
            for (h, list) in heads.iter().enumerate() {
                if list.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config(format!(
                        "block ids of batch {b} head {h} must be strictly ascending"
                    )));
                }
            }
        }
        Ok(Self { block_size, blocks })
    }

    /// Every block of a `seq_len` cache for every head.
    pub fn dense(batch: usize, n_heads: usize, seq_len: usize, block_size: usize) -> Result<Self> {
        let all: Vec<usize> = (0..num_blocks(seq_len, block_size)).collect();
        Self::new(block_size, vec![vec![all; n_heads]; batch])
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn batch(&self) -> usize {
        self.blocks.len()
    }

    pub fn heads(&self, batch: usize) -> &[Vec<usize>] {
        &self.blocks[batch]
    }

    pub fn total_blocks(&self) -> usize {
        self.blocks.iter().flatten().map(Vec::len).sum()
    }
}

pub fn num_blocks(seq_len: usize, block_size: usize) -> usize {
    seq_len.div_ceil(block_size)
}

/// Blocks touched by a token set.
pub fn blocks_for_tokens(set: &TokenSet, block_size: usize) -> Vec<usize> {
    let mut out: Vec<usize> = set.indices().iter().map(|&i| i / block_size).collect();
    out.dedup();
    out
}

/// Random hybrid workload: heads flagged `true` in `retrieval` take every
/// block, the rest take `ceil((1 - sparsity) * n_blocks)` random blocks.
pub fn hybrid_blocks<R: Rng>(
    batch: usize,
    retrieval: &[bool],
    seq_len: usize,
    block_size: usize,
    sparsity: f64,
    rng: &mut R,
) -> Result<BlockIndexSet> {
    let n = num_blocks(seq_len, block_size);
    let keep = sparse_block_budget(n, sparsity);
    let blocks = (0..batch)
        .map(|_| {
            retrieval
                .iter()
                .map(|&dense| {
                    if dense {
                        (0..n).collect()
                    } else {
                        let mut picked = sample_indices(rng, n, keep).into_vec();
                        picked.sort_unstable();
                        picked
                    }
                })
                .collect()
        })
        .collect();
    BlockIndexSet::new(block_size, blocks)
}

/// Blocks a sparse head keeps out of `n_blocks` at the given sparsity.
pub fn sparse_block_budget(n_blocks: usize, sparsity: f64) -> usize {
    let raw = (1.0 - sparsity) * n_blocks as f64;
    ((raw - 1e-9 * raw.max(1.0)).ceil() as usize).clamp(1, n_blocks.max(1))
}

/// A contiguous run of one head's block list, `blocks[start..end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkUnit {
    pub head: usize,
    pub start: usize,
    pub end: usize,
    /// Index of this split among the splits touching `head`.
    pub head_split: usize,
}

impl WorkUnit {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub units: Vec<WorkUnit>,
}

impl Split {
    pub fn blocks(&self) -> usize {
        self.units.iter().map(WorkUnit::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSchedule {
    pub num_splits: usize,
    /// `[batch][split]`.
    pub splits: Vec<Vec<Split>>,
    /// `[batch][head]` block counts of the planned workload.
    pub head_blocks: Vec<Vec<usize>>,
}

impl SplitSchedule {
    pub fn split_blocks(&self) -> impl Iterator<Item = usize> + '_ {
        self.splits.iter().flatten().map(Split::blocks)
    }
}

/// Pools every head's blocks per batch item and cuts the pool into
/// `num_splits` contiguous chunks whose sizes differ by at most one block.
pub fn plan_splits(blocks: &BlockIndexSet, num_splits: usize) -> Result<SplitSchedule> {
    if num_splits == 0 {
        return Err(Error::Config("num_splits must be at least 1".into()));
    }
    let mut splits = Vec::with_capacity(blocks.batch());
    let mut head_blocks = Vec::with_capacity(blocks.batch());
    for b in 0..blocks.batch() {
        let counts: Vec<usize> = blocks.heads(b).iter().map(Vec::len).collect();
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptyWorkload);
        }
        // head boundaries in pooled coordinates
        let mut offsets = Vec::with_capacity(counts.len() + 1);
        offsets.push(0);
        for c in &counts {
            offsets.push(offsets.last().unwrap() + c);
        }
        let mut next_head_split = vec![0usize; counts.len()];
        let mut batch_splits = Vec::with_capacity(num_splits);
        for s in 0..num_splits {
            let (lo, hi) = (s * total / num_splits, (s + 1) * total / num_splits);
            let mut units = Vec::new();
            for (h, w) in offsets.windows(2).enumerate() {
                let (a, z) = (lo.max(w[0]), hi.min(w[1]));
                if a < z {
                    units.push(WorkUnit { head: h, start: a - w[0], end: z - w[0], head_split: next_head_split[h] });
                    next_head_split[h] += 1;
                }
            }
            batch_splits.push(Split { units });
        }
        splits.push(batch_splits);
        head_blocks.push(counts);
    }
    Ok(SplitSchedule { num_splits, splits, head_blocks })
}

/// Critical path, in blocks, when the same `num_splits` workers are dealt
/// out per head: each head gets `num_splits / n_heads` workers (at least one,
/// with heads sharing workers round-robin when there are fewer workers than
/// heads) and cuts only its own blocks.
pub fn naive_critical_path(head_blocks: &[usize], num_splits: usize) -> usize {
    let h = head_blocks.len();
    if h == 0 || num_splits == 0 {
        return 0;
    }
    if num_splits >= h {
        let per_head = num_splits / h;
        head_blocks.iter().map(|b| b.div_ceil(per_head)).max().unwrap_or(0)
    } else {
        let mut load = vec![0usize; num_splits];
        for (i, b) in head_blocks.iter().enumerate() {
            load[i % num_splits] += b;
        }
        load.into_iter().max().unwrap_or(0)
    }
}

/// Bytes streamed per block: keys plus values.
pub fn bytes_per_block(block_size: usize, d_head: usize, elem_bytes: usize) -> usize {
    2 * block_size * d_head * elem_bytes
}

/// I/O cost summary of a schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub batch: usize,
    pub num_splits: usize,
    pub total_blocks: usize,
    /// Largest per-split block count over the whole grid.
    pub critical_path_blocks: usize,
    pub critical_path_bytes: usize,
    /// Max over mean per-split blocks.
    pub balance_ratio: f64,
    /// Critical path of per-head scheduling on the same workload.
    pub naive_critical_path_blocks: usize,
}

pub fn latency_model(schedule: &SplitSchedule, bytes_per_block: usize) -> CostReport {
    let per_split: Vec<usize> = schedule.split_blocks().collect();
    let total: usize = per_split.iter().sum();
    let critical = per_split.iter().copied().max().unwrap_or(0);
    let mean = total as f64 / per_split.len().max(1) as f64;
    let naive = schedule
        .head_blocks
        .iter()
        .map(|counts| naive_critical_path(counts, schedule.num_splits))
        .max()
        .unwrap_or(0);
    CostReport {
        batch: schedule.splits.len(),
        num_splits: schedule.num_splits,
        total_blocks: total,
        critical_path_blocks: critical,
        critical_path_bytes: critical * bytes_per_block,
        balance_ratio: if mean > 0.0 { critical as f64 / mean } else { 1.0 },
        naive_critical_path_blocks: naive,
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "batch={}\tsplits={}\ttotal_blocks={}\tcritical_path_blocks={}\tcritical_path_bytes={}\tbalance_ratio={:.6}\tnaive_critical_path_blocks={}",
            self.batch,
            self.num_splits,
            self.total_blocks,
            self.critical_path_blocks,
            self.critical_path_bytes,
            self.balance_ratio,
            self.naive_critical_path_blocks
        )
    }
}

/// Queries and KV cache for one kernel launch.
#[derive(Debug, Clone)]
pub struct KernelInput<T> {
    pub d_head: usize,
    /// Query heads per KV head.
    pub group_size: usize,
    pub scale: T,
    /// `[batch][q_head]`, each `d_head` long.
    pub queries: Vec<Vec<Vec<T>>>,
    /// `[batch][kv_head]`, row-major `seq_len x d_head`.
    pub keys: Vec<Vec<Vec<T>>>,
    pub values: Vec<Vec<Vec<T>>>,
}

impl<T: Float> KernelInput<T> {
    pub fn seq_len(&self, batch: usize) -> usize {
        self.keys[batch][0].len() / self.d_head
    }

    pub fn n_q_heads(&self) -> usize {
        self.queries[0].len()
    }
}

/// Normalized partial output and log-sum-exp of one (head, split) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialResult<T> {
    pub batch: usize,
    pub q_head: usize,
    pub head_split: usize,
    pub output: Vec<T>,
    pub lse: T,
}

#[derive(Debug, Clone)]
pub struct SplitOutput<T> {
    pub partials: Vec<PartialResult<T>>,
    /// `(kv_head, block)` pairs in execution order.
    pub executed: Vec<(usize, usize)>,
}

/// Runs one split of one batch item.
pub fn run_split<T: Float>(
    input: &KernelInput<T>,
    blocks: &BlockIndexSet,
    batch: usize,
    split: &Split,
) -> Result<SplitOutput<T>> {
    let d = input.d_head;
    let bs = blocks.block_size();
    let seq_len = input.seq_len(batch);
    let n_blocks = num_blocks(seq_len, bs);
    let mut partials = Vec::new();
    let mut executed = Vec::with_capacity(split.blocks());
    let mut scores = vec![T::neg_infinity(); bs];
    let mut values = vec![T::zero(); bs * d];
    for unit in &split.units {
        let list = &blocks.heads(batch)[unit.head][unit.start..unit.end];
        let (keys_h, values_h) = (&input.keys[batch][unit.head], &input.values[batch][unit.head]);
        let group = unit.head * input.group_size..(unit.head + 1) * input.group_size;
        let mut accs: Vec<SoftmaxAccumulator<T>> = group.clone().map(|_| SoftmaxAccumulator::new(d)).collect();
        for &block in list {
            if block >= n_blocks {
                return Err(Error::BlockOutOfRange { block, num_blocks: n_blocks });
            }
            let first = block * bs;
            let valid = bs.min(seq_len - first);
            values[..valid * d].copy_from_slice(&values_h[first * d..(first + valid) * d]);
            values[valid * d..].iter_mut().for_each(|v| *v = T::zero());
            for (acc, qh) in accs.iter_mut().zip(group.clone()) {
                let q = &input.queries[batch][qh];
                for (slot, score) in scores.iter_mut().enumerate() {
                    *score = if slot < valid {
                        let k = &keys_h[(first + slot) * d..(first + slot + 1) * d];
                        q.iter().zip(k).fold(T::zero(), |s, (a, b)| s + *a * *b) * input.scale
                    } else {
                        T::neg_infinity()
                    };
                }
                acc.update(&scores, &values);
            }
            executed.push((unit.head, block));
        }
        for (acc, qh) in accs.into_iter().zip(group) {
            if acc.is_empty() {
                continue;
            }
            partials.push(PartialResult {
                batch,
                q_head: qh,
                head_split: unit.head_split,
                output: acc.output(),
                lse: acc.log_sum_exp(),
            });
        }
    }
    Ok(SplitOutput { partials, executed })
}

/// Merges the partials of every head with a max-shifted log-sum-exp.
/// Returns `[batch][q_head]` outputs.
pub fn combine<T: Float>(
    partials: &[PartialResult<T>],
    batch: usize,
    n_q_heads: usize,
    d_head: usize,
) -> Result<Vec<Vec<Vec<T>>>> {
    let mut grouped: Vec<Vec<&PartialResult<T>>> = vec![Vec::new(); batch * n_q_heads];
    for p in partials {
        grouped[p.batch * n_q_heads + p.q_head].push(p);
    }
    let mut out = vec![Vec::with_capacity(n_q_heads); batch];
    for (key, mut group) in grouped.into_iter().enumerate() {
        let (b, h) = (key / n_q_heads, key % n_q_heads);
        if group.is_empty() {
            return Err(Error::MissingPartials { batch: b, head: h });
        }
        group.sort_by_key(|p| p.head_split);
        let m = group.iter().map(|p| p.lse).fold(T::neg_infinity(), T::max);
        let mut num = vec![T::zero(); d_head];
        let mut den = T::zero();
        for p in &group {
            let w = (p.lse - m).exp();
            den = den + w;
            for (n, o) in num.iter_mut().zip(&p.output) {
                *n = *n + w * *o;
            }
        }
        out[b].push(num.into_iter().map(|n| n / den).collect());
    }
    Ok(out)
}

/// Result of a full simulated launch.
#[derive(Debug, Clone)]
pub struct KernelOutput<T> {
    /// `[batch][q_head]`.
    pub outputs: Vec<Vec<Vec<T>>>,
    /// `[batch][kv_head][block]` execution counts.
    pub executions: Vec<Vec<Vec<usize>>>,
}

/// Runs every split on `workers` threads, then combines.
pub fn execute<T: Float + Send + Sync>(
    input: &KernelInput<T>,
    blocks: &BlockIndexSet,
    schedule: &SplitSchedule,
    workers: usize,
) -> Result<KernelOutput<T>> {
    let jobs: Vec<(usize, &Split)> = schedule
        .splits
        .iter()
        .enumerate()
        .flat_map(|(b, splits)| splits.iter().map(move |s| (b, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<SplitOutput<T>>> =
        pool.install(|| jobs.par_iter().map(|(b, s)| run_split(input, blocks, *b, s)).collect());
    let mut partials = Vec::new();
    let mut executions: Vec<Vec<Vec<usize>>> = (0..blocks.batch())
        .map(|b| {
            let n = num_blocks(input.seq_len(b), blocks.block_size());
            vec![vec![0; n]; input.keys[b].len()]
        })
        .collect();
    for ((b, _), res) in jobs.iter().zip(results) {
        let res = res?;
        for (h, block) in res.executed {
            executions[*b][h][block] += 1;
        }
        partials.extend(res.partials);
    }
    let outputs = combine(&partials, blocks.batch(), input.n_q_heads(), input.d_head)?;
    Ok(KernelOutput { outputs, executions })
}
