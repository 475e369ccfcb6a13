mod common;

use common::rng;
use headsparse::kernel_sim::{
    execute, latency_model, naive_critical_path, num_blocks, plan_splits, BlockIndexSet, KernelInput,
    DEFAULT_BLOCK_SIZE,
};
use proptest::prelude::*;
use rand::seq::index::sample;
use rand::Rng;

#[derive(Debug, Clone)]
struct Case {
    batch: usize,
    kv: usize,
    group: usize,
    d: usize,
    seq: Vec<usize>,
    splits: usize,
    seed: u64,
}

fn cases_strategy(max_seq: usize) -> impl Strategy<Value = Case> {
    (1usize..=4, 1usize..=8, 1usize..=4, 1usize..=16, 1usize..=8, any::<u64>()).prop_map(
        move |(batch, kv, group, d, splits, seed)| {
            let mut r = rng(seed);
            let seq = (0..batch).map(|_| r.gen_range(1..=max_seq)).collect();
            Case { batch, kv, group, d, seq, splits, seed }
        },
    )
}

fn kernel_input(c: &Case) -> KernelInput<f64> {
    let mut r = rng(c.seed ^ 0xabc);
    let mut vec = |n: usize| (0..n).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let queries = (0..c.batch).map(|_| (0..c.kv * c.group).map(|_| vec(c.d).iter().map(|x| 4.0 * x).collect()).collect()).collect();
    let keys = c.seq.iter().map(|&n| (0..c.kv).map(|_| vec(n * c.d)).collect()).collect();
    let values = c.seq.iter().map(|&n| (0..c.kv).map(|_| vec(n * c.d)).collect()).collect();
    KernelInput { d_head: c.d, group_size: c.group, scale: 1.0 / (c.d as f64).sqrt(), queries, keys, values }
}

fn to_f32(input: &KernelInput<f64>) -> KernelInput<f32> {
    let cast3 = |t: &Vec<Vec<Vec<f64>>>| -> Vec<Vec<Vec<f32>>> {
        t.iter().map(|a| a.iter().map(|v| v.iter().map(|x| *x as f32).collect()).collect()).collect()
    };
    KernelInput {
        d_head: input.d_head,
        group_size: input.group_size,
        scale: input.scale as f32,
        queries: cast3(&input.queries),
        keys: cast3(&input.keys),
        values: cast3(&input.values),
    }
}

/// Each head keeps a random non-empty subset of its blocks.
fn random_blocks(c: &Case, bs: usize) -> BlockIndexSet {
    let mut r = rng(c.seed ^ 0x51);
    let blocks = c
        .seq
        .iter()
        .map(|&n| {
            let nb = num_blocks(n, bs);
            (0..c.kv)
                .map(|_| {
                    let keep = r.gen_range(1..=nb);
                    let mut ids = sample(&mut r, nb, keep).into_vec();
                    ids.sort_unstable();
                    ids
                })
                .collect()
        })
        .collect();
    BlockIndexSet::new(bs, blocks).unwrap()
}

/// Attention of every query head over the tokens of its KV head's blocks,
/// computed in one pass in f64.
fn reference(input: &KernelInput<f64>, blocks: &BlockIndexSet) -> Vec<Vec<Vec<f64>>> {
    let (d, bs) = (input.d_head, blocks.block_size());
    (0..blocks.batch())
        .map(|b| {
            let n = input.seq_len(b);
            (0..input.n_q_heads())
                .map(|qh| {
                    let h = qh / input.group_size;
                    let q = &input.queries[b][qh];
                    let tokens: Vec<usize> =
                        blocks.heads(b)[h].iter().flat_map(|&blk| blk * bs..((blk + 1) * bs).min(n)).collect();
                    let s: Vec<f64> = tokens
                        .iter()
                        .map(|&t| (0..d).map(|c| q[c] * input.keys[b][h][t * d + c]).sum::<f64>() * input.scale)
                        .collect();
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    (0..d)
                        .map(|c| tokens.iter().zip(&e).map(|(&t, w)| w * input.values[b][h][t * d + c]).sum::<f64>() / z)
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn worst(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>]) -> f64 {
    a.iter().flatten().flatten().zip(b.iter().flatten().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn homogeneous_workloads_tie_with_the_naive_plan() {
    for (heads, per_head, splits) in [(4, 16, 8), (8, 10, 8), (2, 7, 6), (4, 64, 4)] {
        let blocks = BlockIndexSet::new(64, vec![vec![(0..per_head).collect(); heads]]).unwrap();
        let report = latency_model(&plan_splits(&blocks, splits).unwrap(), 1);
        assert_eq!(report.critical_path_blocks, report.naive_critical_path_blocks);
    }
}

#[test]
fn dense_long_context_f32_matches() {
    let c = Case { batch: 1, kv: 2, group: 2, d: 16, seq: vec![4096], splits: 8, seed: 77 };
    let input = kernel_input(&c);
    let blocks = BlockIndexSet::dense(1, 2, 4096, DEFAULT_BLOCK_SIZE).unwrap();
    let out = execute(&to_f32(&input), &blocks, &plan_splits(&blocks, 8).unwrap(), 4).unwrap();
    let out64: Vec<Vec<Vec<f64>>> =
        out.outputs.iter().map(|a| a.iter().map(|v| v.iter().map(|x| *x as f64).collect()).collect()).collect();
    assert!(worst(&out64, &reference(&input, &blocks)) < 1e-5);
}

proptest! {
    #![proptest_config(common::cases(32))]

    #[test]
    fn kernel_matches_reference(c in cases_strategy(1500)) {
        let input = kernel_input(&c);
        let blocks = random_blocks(&c, DEFAULT_BLOCK_SIZE);
        let schedule = plan_splits(&blocks, c.splits).unwrap();
        let expect = reference(&input, &blocks);
        let out = execute(&input, &blocks, &schedule, 2).unwrap();
        prop_assert!(worst(&out.outputs, &expect) < 1e-10);
        let out32 = execute(&to_f32(&input), &blocks, &schedule, 2).unwrap();
        let out32: Vec<Vec<Vec<f64>>> =
            out32.outputs.iter().map(|a| a.iter().map(|v| v.iter().map(|x| *x as f64).collect()).collect()).collect();
        prop_assert!(worst(&out32, &expect) < 1e-5);
    }

    #[test]
    fn splits_and_workers_do_not_change_results(c in cases_strategy(700), other in 1usize..=8) {
        let input = kernel_input(&c);
        let blocks = random_blocks(&c, 32);
        let a = plan_splits(&blocks, c.splits).unwrap();
        let one = execute(&input, &blocks, &a, 1).unwrap();
        for workers in [2, 3, 8] {
            let again = execute(&input, &blocks, &a, workers).unwrap();
            prop_assert_eq!(&again.outputs, &one.outputs);
        }
        let b = execute(&input, &blocks, &plan_splits(&blocks, other).unwrap(), 4).unwrap();
        prop_assert!(worst(&b.outputs, &one.outputs) < 1e-12);
    }

    #[test]
    fn every_listed_block_runs_exactly_once(c in cases_strategy(1000)) {
        let input = kernel_input(&c);
        let blocks = random_blocks(&c, 16);
        let schedule = plan_splits(&blocks, c.splits).unwrap();
        let out = execute(&input, &blocks, &schedule, 3).unwrap();
        for b in 0..c.batch {
            for h in 0..c.kv {
                let listed = &blocks.heads(b)[h];
                for (blk, n) in out.executions[b][h].iter().enumerate() {
                    prop_assert_eq!(*n, listed.contains(&blk) as usize);
                }
            }
            let sizes: Vec<usize> = schedule.splits[b].iter().map(|s| s.blocks()).collect();
            let total: usize = blocks.heads(b).iter().map(Vec::len).sum();
            prop_assert_eq!(sizes.iter().sum::<usize>(), total);
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn pooled_never_exceeds_naive(counts in prop::collection::vec(0usize..200, 1..12), splits in 1usize..=16) {
        prop_assume!(counts.iter().any(|c| *c > 0));
        let blocks = BlockIndexSet::new(64, vec![counts.iter().map(|&c| (0..c).collect()).collect()]).unwrap();
        let report = latency_model(&plan_splits(&blocks, splits).unwrap(), 1);
        prop_assert!(report.critical_path_blocks <= report.naive_critical_path_blocks);
        prop_assert_eq!(report.naive_critical_path_blocks, naive_critical_path(&counts, splits));
        let total: usize = counts.iter().sum();
        prop_assert_eq!(report.critical_path_blocks, total.div_ceil(splits));
    }
}
