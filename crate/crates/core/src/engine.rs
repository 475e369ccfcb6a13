//! Hybrid-head decoding with a KV cache.
//!
//! Per step and per layer the new token's keys and values are appended to
//! the cache. Retrieval heads (and every head in layer 0) attend densely and
//! refresh the critical-token set of their head index; sparse heads attend
//! only over the set last written for their index and leave it unchanged.
//! Selection in GQA models uses the group's averaged query, while every
//! query head still computes its own output.

use std::time::{Duration, Instant};

use crate::attention::{
    args_top_k, dense_attention, dense_weights, gqa_pool_queries, sparse_attention, AttnInput, TokenSet,
};
use crate::model::{dense_run, HeadProjections, ModelWeights};
use crate::rolemap::{Role, RoleMap};
use crate::{Error, Result};

/// How a retrieval head turns an attention map into a critical-token set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SparsityPolicy {
    /// The `k` heaviest tokens.
    TopK(usize),
    /// Smallest heaviest-first prefix whose mass reaches `p`.
    TopP(f64),
    /// Every token with weight above `tau` (the argmax if none is).
    Threshold(f64),
    /// The `ceil((1 - theta) * seq_len)` heaviest tokens.
    Ratio(f64),
}

impl SparsityPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            SparsityPolicy::TopK(k) => k >= 1,
            SparsityPolicy::TopP(p) => p > 0.0 && p <= 1.0,
            SparsityPolicy::Threshold(t) => t > 0.0,
            SparsityPolicy::Ratio(r) => r > 0.0 && r < 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid sparsity policy {self:?}")))
        }
    }

    /// Token budget of a `Ratio` policy at `seq_len`, at least one token.
    pub fn ratio_budget(theta: f64, seq_len: usize) -> usize {
        // the epsilon keeps e.g. (1 - 0.7) * 1000 = 300.00000000000006 at 300
        let raw = (1.0 - theta) * seq_len as f64;
        ((raw - 1e-9 * raw.max(1.0)).ceil() as usize).clamp(1, seq_len.max(1))
    }
}

/// Applies `policy` to one attention map.
pub fn select_tokens(policy: SparsityPolicy, weights: &[f64], seq_len: usize) -> TokenSet {
    debug_assert_eq!(weights.len(), seq_len);
    match policy {
        SparsityPolicy::TopK(k) => args_top_k(weights, k),
        SparsityPolicy::TopP(p) => {
            if p >= 1.0 {
                return TokenSet::full(seq_len);
            }
            let mut order: Vec<usize> = (0..seq_len).collect();
            order.sort_by(|a, b| weights[*b].total_cmp(&weights[*a]).then(a.cmp(b)));
            let mut mass = 0.0;
            let mut take = order.len();
            for (n, &i) in order.iter().enumerate() {
                mass += weights[i];
                if mass >= p {
                    take = n + 1;
                    break;
                }
            }
            order.truncate(take);
            TokenSet::from_indices(order)
        }
        SparsityPolicy::Threshold(tau) => {
            let kept: Vec<usize> = (0..seq_len).filter(|&i| weights[i] > tau).collect();
            if kept.is_empty() {
                args_top_k(weights, 1)
            } else {
                TokenSet::from_indices(kept)
            }
        }
        SparsityPolicy::Ratio(theta) => args_top_k(weights, SparsityPolicy::ratio_budget(theta, seq_len)),
    }
}

/// Per-layer, per-KV-head key/value history.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    d_head: usize,
    /// `[layer][kv_head]`, row-major `len x d_head`.
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    len: usize,
}

impl KvCache {
    fn from_dense(keys: Vec<Vec<Vec<f64>>>, values: Vec<Vec<Vec<f64>>>, d_head: usize) -> Self {
        let len = keys[0][0].len() / d_head;
        Self { d_head, keys, values, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn keys(&self, layer: usize, head: usize) -> &[f64] {
        &self.keys[layer][head]
    }

    pub fn values(&self, layer: usize, head: usize) -> &[f64] {
        &self.values[layer][head]
    }

    fn append(&mut self, layer: usize, proj: &HeadProjections) {
        for (h, (k, v)) in proj.k.iter().zip(&proj.v).enumerate() {
            self.keys[layer][h].extend_from_slice(k);
            self.values[layer][h].extend_from_slice(v);
        }
    }

    fn overwrite(&mut self, layer: usize, pos: usize, proj: &HeadProjections) {
        let d = self.d_head;
        for (h, (k, v)) in proj.k.iter().zip(&proj.v).enumerate() {
            self.keys[layer][h][pos * d..(pos + 1) * d].copy_from_slice(k);
            self.values[layer][h][pos * d..(pos + 1) * d].copy_from_slice(v);
        }
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub policy: SparsityPolicy,
    /// Dense re-prefill of the most recent `W` decoded tokens every `W`
    /// steps; `None` disables correction.
    pub correction_window: Option<usize>,
    /// Keep a [`StepRecord`] with the token sets of every step.
    pub record_sets: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { policy: SparsityPolicy::TopK(64), correction_window: None, record_sets: false }
    }
}

/// What one KV head did at one layer during one step.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadRecord {
    pub role: Role,
    /// Set attended over (sparse heads) or selected (retrieval heads).
    pub set: TokenSet,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub position: usize,
    pub elapsed: Duration,
    /// `[layer][kv_head]`; empty unless `record_sets` is on.
    pub heads: Vec<Vec<HeadRecord>>,
    pub corrected: bool,
}

/// Decoding state for one sequence.
pub struct Engine<'m> {
    model: &'m ModelWeights,
    roles: RoleMap,
    config: EngineConfig,
    cache: Option<KvCache>,
    token_sets: Vec<TokenSet>,
    tokens: Vec<u32>,
    since_correction: usize,
    sparse_fraction_sum: f64,
    sparse_invocations: usize,
    records: Vec<StepRecord>,
}

impl<'m> Engine<'m> {
    pub fn new(model: &'m ModelWeights, roles: RoleMap, config: EngineConfig) -> Result<Self> {
        config.policy.validate()?;
        if config.correction_window == Some(0) {
            return Err(Error::Config("correction window must be at least 1".into()));
        }
        roles.check_model(&model.config)?;
        Ok(Self {
            model,
            roles,
            config,
            cache: None,
            token_sets: vec![TokenSet::default(); model.config.n_kv_heads],
            tokens: Vec::new(),
            since_correction: 0,
            sparse_fraction_sum: 0.0,
            sparse_invocations: 0,
            records: Vec::new(),
        })
    }

    pub fn cache(&self) -> Option<&KvCache> {
        self.cache.as_ref()
    }

    pub fn token_sets(&self) -> &[TokenSet] {
        &self.token_sets
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn policy(&self) -> SparsityPolicy {
        self.config.policy
    }

    /// Dense pass over the prompt. Fills the cache and seeds the token sets
    /// from the last prompt position with every head selecting. Returns the
    /// logits of the last prompt position.
    pub fn prefill(&mut self, prompt: &[u32]) -> Result<Vec<f64>> {
        if prompt.is_empty() {
            return Err(Error::State("prefill needs a non-empty prompt".into()));
        }
        let cfg = &self.model.config;
        let run = dense_run(self.model, prompt)?;
        let cache = KvCache::from_dense(run.keys, run.values, cfg.d_head);
        let queries = run.last_queries;
        for (layer, layer_q) in queries.iter().enumerate() {
            self.token_sets = self.select_all(&cache, layer, layer_q)?;
        }
        self.cache = Some(cache);
        self.tokens = prompt.to_vec();
        self.since_correction = 0;
        Ok(run.logits.into_iter().next_back().expect("non-empty prompt"))
    }

    fn select_all(&self, cache: &KvCache, layer: usize, queries: &[Vec<f64>]) -> Result<Vec<TokenSet>> {
        let g = self.model.config.group_size();
        let pooled = gqa_pool_queries(queries, g)?;
        pooled
            .iter()
            .enumerate()
            .map(|(h, q)| {
                let input = AttnInput::new(q, cache.keys(layer, h), cache.values(layer, h), self.model.config.attn_scale())?;
                let w = dense_weights(&input)?;
                Ok(select_tokens(self.config.policy, &w, cache.len()))
            })
            .collect()
    }

    /// Feeds one token and returns the next-token logits.
    pub fn decode_step(&mut self, token: u32) -> Result<Vec<f64>> {
        let start = Instant::now();
        let model = self.model;
        let cfg = &model.config;
        let mut cache = self.cache.take().ok_or_else(|| Error::State("decode_step before prefill".into()))?;
        let pos = cache.len;
        let result = (|| {
            let mut x = model.embed(token, pos)?;
            let g = cfg.group_size();
            let scale = cfg.attn_scale();
            let mut heads_log = Vec::new();
            for (layer, weights) in model.layers.iter().enumerate() {
                let proj = weights.project(cfg, &x, pos);
                cache.append(layer, &proj);
                let seq_len = pos + 1;
                let mut outs = Vec::with_capacity(cfg.n_q_heads);
                let mut layer_log = Vec::new();
                for h in 0..cfg.n_kv_heads {
                    let (keys, values) = (cache.keys(layer, h), cache.values(layer, h));
                    let group = &proj.q[h * g..(h + 1) * g];
                    if self.roles.is_retrieval(layer, h) {
                        let mut first_weights = None;
                        for q in group {
                            let (out, w) = dense_attention(&AttnInput::new(q, keys, values, scale)?)?;
                            outs.push(out);
                            first_weights.get_or_insert(w);
                        }
                        let select_w = if g == 1 {
                            first_weights.expect("group is non-empty")
                        } else {
                            let pooled = gqa_pool_queries(group, g)?.remove(0);
                            dense_weights(&AttnInput::new(&pooled, keys, values, scale)?)?
                        };
                        self.token_sets[h] = select_tokens(self.config.policy, &select_w, seq_len);
                    } else {
                        let set = &self.token_sets[h];
                        for q in group {
                            outs.push(sparse_attention(&AttnInput::new(q, keys, values, scale)?, set)?);
                        }
                        self.sparse_fraction_sum += set.len() as f64 / seq_len as f64;
                        self.sparse_invocations += 1;
                    }
                    if self.config.record_sets {
                        layer_log.push(HeadRecord {
                            role: if self.roles.is_retrieval(layer, h) { Role::Retrieval } else { Role::Sparse },
                            set: self.token_sets[h].clone(),
                        });
                    }
                }
                if self.config.record_sets {
                    heads_log.push(layer_log);
                }
                x = weights.finish(&x, &outs);
            }
            cache.len += 1;
            Ok((model.logits(&x), heads_log))
        })();
        let (logits, heads) = match result {
            Ok(v) => v,
            Err(e) => {
                // keep the cache consistent: drop rows appended by the failed step
                let d = cfg.d_head;
                for layer in 0..cfg.n_layers {
                    for h in 0..cfg.n_kv_heads {
                        cache.keys[layer][h].truncate(pos * d);
                        cache.values[layer][h].truncate(pos * d);
                    }
                }
                self.cache = Some(cache);
                return Err(e);
            }
        };
        self.cache = Some(cache);
        self.tokens.push(token);
        self.since_correction += 1;
        let corrected = match self.config.correction_window {
            Some(w) if self.since_correction >= w => self.cache_correction()?,
            _ => false,
        };
        self.records.push(StepRecord { position: pos, elapsed: start.elapsed(), heads, corrected });
        Ok(logits)
    }

    /// Dense re-prefill of the last `W` decoded tokens, overwriting their
    /// KV rows in every layer. Returns `false` (and does nothing) when fewer
    /// than `W` tokens were decoded since the previous correction, or when
    /// correction is disabled.
    pub fn cache_correction(&mut self) -> Result<bool> {
        let w = match self.config.correction_window {
            Some(w) if self.since_correction >= w => w,
            _ => return Ok(false),
        };
        let cfg = &self.model.config;
        let cache = self.cache.as_mut().ok_or_else(|| Error::State("correction before prefill".into()))?;
        let start = cache.len - w;
        let mut xs: Vec<Vec<f64>> = (start..cache.len)
            .map(|p| self.model.embed(self.tokens[p], p))
            .collect::<Result<_>>()?;
        let g = cfg.group_size();
        for (layer, weights) in self.model.layers.iter().enumerate() {
            let proj: Vec<HeadProjections> =
                xs.iter().enumerate().map(|(i, x)| weights.project(cfg, x, start + i)).collect();
            for (i, p) in proj.iter().enumerate() {
                cache.overwrite(layer, start + i, p);
            }
            for (i, x) in xs.iter_mut().enumerate() {
                let rows = (start + i + 1) * cfg.d_head;
                let mut outs = Vec::with_capacity(cfg.n_q_heads);
                for (qh, q) in proj[i].q.iter().enumerate() {
                    let h = qh / g;
                    let input = AttnInput::new(
                        q,
                        &cache.keys[layer][h][..rows],
                        &cache.values[layer][h][..rows],
                        cfg.attn_scale(),
                    )?;
                    outs.push(dense_attention(&input)?.0);
                }
                *x = weights.finish(x, &outs);
            }
        }
        self.since_correction = 0;
        Ok(true)
    }

    /// Fraction of the context excluded from sparse-head attention, averaged
    /// over every sparse-head invocation so far. 0 when no sparse head ran.
    pub fn measure_sparsity(&self) -> f64 {
        if self.sparse_invocations == 0 {
            return 0.0;
        }
        1.0 - self.sparse_fraction_sum / self.sparse_invocations as f64
    }

    pub fn sparse_invocations(&self) -> usize {
        self.sparse_invocations
    }

    /// Greedily extends the sequence by `n` tokens after `prefill`.
    pub fn generate(&mut self, prompt: &[u32], n: usize) -> Result<Vec<u32>> {
        let mut logits = self.prefill(prompt)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let next = crate::model::argmax(&logits);
            out.push(next);
            logits = self.decode_step(next)?;
        }
        Ok(out)
    }
}
