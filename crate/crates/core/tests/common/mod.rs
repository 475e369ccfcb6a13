#![allow(dead_code)]

use headsparse::model::{init_model, ModelConfig, ModelWeights};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn config(n_layers: usize, n_q_heads: usize, n_kv_heads: usize, d_head: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_q_heads,
        n_kv_heads,
        d_head,
        d_ff: 2 * n_q_heads * d_head,
        vocab_size: 32,
        max_seq_len: 256,
        ..ModelConfig::default()
    }
}

pub fn model(cfg: &ModelConfig, seed: u64) -> ModelWeights {
    init_model(cfg, seed).unwrap()
}

pub fn prompt(seed: u64, len: usize, vocab: usize) -> Vec<u32> {
    let mut r = rng(seed);
    (0..len).map(|_| r.gen_range(0..vocab as u32)).collect()
}

pub fn normals(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Fixed-seed property runs so every failure reproduces.
pub fn cases(n: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases: n,
        rng_seed: proptest::test_runner::RngSeed::Fixed(0x5eed),
        failure_persistence: None,
        ..Default::default()
    }
}
