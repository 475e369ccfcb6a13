//! A small deterministic decoder-only transformer.
//!
//! Pre-norm residual blocks (RMS norm without gain), grouped-query attention,
//! a GELU feed-forward and an untied output head. The model serves as the
//! dense teacher and as the substrate every hybrid path runs on, so the
//! per-position building blocks ([`ModelWeights::embed`],
//! [`LayerWeights::project`], [`LayerWeights::finish`],
//! [`ModelWeights::logits`]) are shared by all of them. Sharing them keeps
//! the dense decode path bitwise identical to [`forward_full`].

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{dense_attention, AttnInput};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"HSDW";
const FORMAT_VERSION: u32 = 1;
const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    #[default]
    LearnedAbsolute,
    Rotary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub positional: Positional,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_q_heads: 8,
            n_kv_heads: 4,
            d_head: 16,
            d_ff: 256,
            vocab_size: 64,
            max_seq_len: 2048,
            positional: Positional::LearnedAbsolute,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.n_q_heads * self.d_head
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    /// Query heads sharing one KV head.
    pub fn group_size(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    pub fn attn_scale(&self) -> f64 {
        1.0 / (self.d_head as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_q_heads", self.n_q_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.n_q_heads % self.n_kv_heads != 0 {
            return Err(Error::Config(format!(
                "n_q_heads ({}) must be divisible by n_kv_heads ({})",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        Ok(())
    }

    fn header_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let pos = match self.positional {
            Positional::LearnedAbsolute => 0u32,
            Positional::Rotary => 1,
        };
        for v in [
            self.n_layers,
            self.n_q_heads,
            self.n_kv_heads,
            self.d_head,
            self.d_ff,
            self.vocab_size,
            self.max_seq_len,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&pos.to_le_bytes());
        out
    }

    /// Hex digest identifying this configuration.
    pub fn checksum(&self) -> String {
        hex_digest(&self.header_bytes())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Dense `x * W` with `W` stored row-major as `in_dim x out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weight: vec![0.0; in_dim * out_dim] }
    }

    fn random(in_dim: usize, out_dim: usize, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let weight = (0..in_dim * out_dim).map(|_| uniform_f32(rng, bound)).collect();
        Self { in_dim, out_dim, weight }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut y = vec![0.0; self.out_dim];
        for (xi, row) in x.iter().zip(self.weight.chunks_exact(self.out_dim)) {
            if *xi == 0.0 {
                continue;
            }
            for (yj, w) in y.iter_mut().zip(row) {
                *yj += xi * w;
            }
        }
        y
    }
}

/// Uniform draw in `(-bound, bound)` rounded to `f32`, so the weight file
/// stores every value exactly.
fn uniform_f32(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    let v: f64 = rng.gen_range(-bound..bound);
    v as f32 as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub w_up: Linear,
    pub w_down: Linear,
}

/// Per-position projections of one layer, already split into heads.
#[derive(Debug, Clone)]
pub struct HeadProjections {
    /// One vector per query head.
    pub q: Vec<Vec<f64>>,
    /// One vector per KV head.
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl LayerWeights {
    fn zeros(cfg: &ModelConfig) -> Self {
        let (dm, kv) = (cfg.d_model(), cfg.kv_dim());
        Self {
            wq: Linear::zeros(dm, dm),
            wk: Linear::zeros(dm, kv),
            wv: Linear::zeros(dm, kv),
            wo: Linear::zeros(dm, dm),
            w_up: Linear::zeros(dm, cfg.d_ff),
            w_down: Linear::zeros(cfg.d_ff, dm),
        }
    }

    fn random(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (dm, kv) = (cfg.d_model(), cfg.kv_dim());
        let b_dm = 1.0 / (dm as f64).sqrt();
        let b_ff = 1.0 / (cfg.d_ff as f64).sqrt();
        Self {
            wq: Linear::random(dm, dm, b_dm, rng),
            wk: Linear::random(dm, kv, b_dm, rng),
            wv: Linear::random(dm, kv, b_dm, rng),
            wo: Linear::random(dm, dm, b_dm, rng),
            w_up: Linear::random(dm, cfg.d_ff, b_dm, rng),
            w_down: Linear::random(cfg.d_ff, dm, b_ff, rng),
        }
    }

    fn tensors(&self) -> [&Linear; 6] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w_up, &self.w_down]
    }

    fn tensors_mut(&mut self) -> [&mut Linear; 6] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo, &mut self.w_up, &mut self.w_down]
    }

    /// Normalizes the residual stream and projects it to per-head q, k, v.
    pub fn project(&self, cfg: &ModelConfig, x: &[f64], pos: usize) -> HeadProjections {
        let h = rms_norm(x);
        let dh = cfg.d_head;
        let split = |flat: Vec<f64>| -> Vec<Vec<f64>> {
            flat.chunks_exact(dh).map(|c| c.to_vec()).collect()
        };
        let mut q = split(self.wq.apply(&h));
        let mut k = split(self.wk.apply(&h));
        let v = split(self.wv.apply(&h));
        if cfg.positional == Positional::Rotary {
            q.iter_mut().for_each(|head| rotate(head, pos));
            k.iter_mut().for_each(|head| rotate(head, pos));
        }
        HeadProjections { q, k, v }
    }

    /// Output projection of the concatenated head outputs, residual add,
    /// then the feed-forward block with its own residual.
    pub fn finish(&self, x: &[f64], head_outputs: &[Vec<f64>]) -> Vec<f64> {
        let concat: Vec<f64> = head_outputs.iter().flatten().copied().collect();
        let attn = self.wo.apply(&concat);
        let h: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
        let mut up = self.w_up.apply(&rms_norm(&h));
        up.iter_mut().for_each(|u| *u = gelu(*u));
        let down = self.w_down.apply(&up);
        h.iter().zip(&down).map(|(a, b)| a + b).collect()
    }
}

fn rms_norm(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    x.iter().map(|v| v * inv).collect()
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn rotate(head: &mut [f64], pos: usize) {
    let d = head.len();
    for i in 0..d / 2 {
        let freq = 10_000f64.powf(-2.0 * i as f64 / d as f64);
        let (sin, cos) = (pos as f64 * freq).sin_cos();
        let (a, b) = (head[2 * i], head[2 * i + 1]);
        head[2 * i] = a * cos - b * sin;
        head[2 * i + 1] = a * sin + b * cos;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// `vocab_size x d_model`.
    pub embedding: Vec<f64>,
    /// `max_seq_len x d_model`; empty for rotary models.
    pub positions: Vec<f64>,
    pub layers: Vec<LayerWeights>,
    pub lm_head: Linear,
}

/// Seeded initialization: embeddings uniform in `(-1, 1)`, projections
/// uniform with bound `1 / sqrt(fan_in)`. Values are `f32`-representable.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dm = config.d_model();
    let embedding = (0..config.vocab_size * dm).map(|_| uniform_f32(&mut rng, 1.0)).collect();
    let positions = match config.positional {
        Positional::LearnedAbsolute => {
            (0..config.max_seq_len * dm).map(|_| uniform_f32(&mut rng, 1.0)).collect()
        }
        Positional::Rotary => Vec::new(),
    };
    let layers = (0..config.n_layers).map(|_| LayerWeights::random(config, &mut rng)).collect();
    let lm_head = Linear::random(dm, config.vocab_size, 1.0 / (dm as f64).sqrt(), &mut rng);
    Ok(ModelWeights { config: config.clone(), embedding, positions, layers, lm_head })
}

impl ModelWeights {
    /// All-zero weights.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let dm = config.d_model();
        let positions = match config.positional {
            Positional::LearnedAbsolute => vec![0.0; config.max_seq_len * dm],
            Positional::Rotary => Vec::new(),
        };
        Ok(Self {
            config: config.clone(),
            embedding: vec![0.0; config.vocab_size * dm],
            positions,
            layers: (0..config.n_layers).map(|_| LayerWeights::zeros(config)).collect(),
            lm_head: Linear::zeros(dm, config.vocab_size),
        })
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Config(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        match tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(&t) => Err(Error::Config(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Residual stream entering layer 0.
    pub fn embed(&self, token: u32, pos: usize) -> Result<Vec<f64>> {
        let cfg = &self.config;
        if token as usize >= cfg.vocab_size {
            return Err(Error::Config(format!("token id {token} outside vocabulary of {}", cfg.vocab_size)));
        }
        if pos >= cfg.max_seq_len {
            return Err(Error::Config(format!("position {pos} exceeds max_seq_len {}", cfg.max_seq_len)));
        }
        let dm = cfg.d_model();
        let tok = &self.embedding[token as usize * dm..(token as usize + 1) * dm];
        Ok(match cfg.positional {
            Positional::LearnedAbsolute => {
                let p = &self.positions[pos * dm..(pos + 1) * dm];
                tok.iter().zip(p).map(|(a, b)| a + b).collect()
            }
            Positional::Rotary => tok.to_vec(),
        })
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.lm_head.apply(&rms_norm(x))
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.embedding, &self.positions];
        for layer in &self.layers {
            out.extend(layer.tensors().iter().map(|t| t.weight.as_slice()));
        }
        out.push(&self.lm_head.weight);
        out
    }

    /// Serializes to the binary weight format: magic, version, config block,
    /// row-major little-endian `f32` tensors in declaration order, then the
    /// first 8 bytes of the SHA-256 of everything before them.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.config.header_bytes();
        for t in self.tensors() {
            for v in t {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest[..8]);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 48 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a weight file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if Sha256::digest(body)[..8] != *tail {
            return Err(Error::Format("weight file checksum mismatch".into()));
        }
        let word = |i: usize| u32::from_le_bytes(body[4 * i..4 * i + 4].try_into().unwrap());
        if word(1) != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported weight format version {}", word(1))));
        }
        let positional = match word(9) {
            0 => Positional::LearnedAbsolute,
            1 => Positional::Rotary,
            other => return Err(Error::Format(format!("unknown positional tag {other}"))),
        };
        let config = ModelConfig {
            n_layers: word(2) as usize,
            n_q_heads: word(3) as usize,
            n_kv_heads: word(4) as usize,
            d_head: word(5) as usize,
            d_ff: word(6) as usize,
            vocab_size: word(7) as usize,
            max_seq_len: word(8) as usize,
            positional,
        };
        let mut model = Self::zeros(&config)?;
        let mut floats = body[40..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        let expected: usize = model.tensors().iter().map(|t| t.len()).sum();
        if body.len() - 40 != expected * 4 {
            return Err(Error::Format(format!(
                "weight payload holds {} floats, config needs {expected}",
                (body.len() - 40) / 4
            )));
        }
        let mut fill = |dst: &mut [f64]| dst.iter_mut().for_each(|d| *d = floats.next().unwrap());
        fill(&mut model.embedding);
        fill(&mut model.positions);
        for layer in &mut model.layers {
            for t in layer.tensors_mut() {
                fill(&mut t.weight);
            }
        }
        fill(&mut model.lm_head.weight);
        Ok(model)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Hex digest of the serialized weights.
    pub fn checksum(&self) -> String {
        hex_digest(&self.to_bytes())
    }
}

/// Everything a dense causal pass produces.
#[derive(Debug, Clone)]
pub struct DenseRun {
    /// Logits at every position.
    pub logits: Vec<Vec<f64>>,
    /// `[layer][kv_head]`, row-major `seq_len x d_head`.
    pub keys: Vec<Vec<Vec<f64>>>,
    pub values: Vec<Vec<Vec<f64>>>,
    /// `[layer][q_head]` attention weights of the final position.
    pub last_weights: Vec<Vec<Vec<f64>>>,
    /// `[layer][q_head]` queries of the final position.
    pub last_queries: Vec<Vec<Vec<f64>>>,
}

/// Dense causal forward pass returning logits for every position.
pub fn forward_full(model: &ModelWeights, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
    Ok(dense_run(model, tokens)?.logits)
}

/// Dense causal forward pass that also keeps the KV history and the final
/// position's attention maps.
pub fn dense_run(model: &ModelWeights, tokens: &[u32]) -> Result<DenseRun> {
    if tokens.is_empty() {
        return Err(Error::EmptyContext);
    }
    model.check_tokens(tokens)?;
    let cfg = &model.config;
    let n = tokens.len();
    let mut xs: Vec<Vec<f64>> =
        tokens.iter().enumerate().map(|(p, &t)| model.embed(t, p)).collect::<Result<_>>()?;
    let mut keys = Vec::with_capacity(cfg.n_layers);
    let mut values = Vec::with_capacity(cfg.n_layers);
    let mut last_weights = Vec::with_capacity(cfg.n_layers);
    let mut last_queries = Vec::with_capacity(cfg.n_layers);
    for layer in &model.layers {
        let proj: Vec<HeadProjections> = xs.iter().enumerate().map(|(p, x)| layer.project(cfg, x, p)).collect();
        let mut lk = vec![Vec::with_capacity(n * cfg.d_head); cfg.n_kv_heads];
        let mut lv = vec![Vec::with_capacity(n * cfg.d_head); cfg.n_kv_heads];
        for p in &proj {
            for h in 0..cfg.n_kv_heads {
                lk[h].extend_from_slice(&p.k[h]);
                lv[h].extend_from_slice(&p.v[h]);
            }
        }
        let mut layer_last = Vec::new();
        for (t, x) in xs.iter_mut().enumerate() {
            let rows = (t + 1) * cfg.d_head;
            let mut outs = Vec::with_capacity(cfg.n_q_heads);
            for (qh, q) in proj[t].q.iter().enumerate() {
                let kvh = qh / cfg.group_size();
                let input = AttnInput::new(q, &lk[kvh][..rows], &lv[kvh][..rows], cfg.attn_scale())?;
                let (out, w) = dense_attention(&input)?;
                if t + 1 == n {
                    layer_last.push(w);
                }
                outs.push(out);
            }
            *x = layer.finish(x, &outs);
        }
        keys.push(lk);
        values.push(lv);
        last_weights.push(layer_last);
        last_queries.push(proj[n - 1].q.clone());
    }
    let logits = xs.iter().map(|x| model.logits(x)).collect();
    Ok(DenseRun { logits, keys, values, last_weights, last_queries })
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f64]) -> u32 {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_q_heads: 4,
            n_kv_heads: 2,
            d_head: 4,
            d_ff: 16,
            vocab_size: 11,
            max_seq_len: 32,
            positional: Positional::LearnedAbsolute,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(&tiny(), 1).unwrap();
        let b = init_model(&tiny(), 1).unwrap();
        let c = init_model(&tiny(), 2).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn zero_model_gives_flat_logits() {
        let m = ModelWeights::zeros(&tiny()).unwrap();
        let logits = forward_full(&m, &[1, 2, 3]).unwrap();
        for row in logits {
            assert!(row.iter().all(|&v| v == row[0]));
        }
    }

    #[test]
    fn single_token_forward() {
        let m = init_model(&tiny(), 4).unwrap();
        let logits = forward_full(&m, &[7]).unwrap();
        assert_eq!(logits.len(), 1);
        assert!(logits[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn causal_prefix_is_unaffected_by_suffix() {
        for positional in [Positional::LearnedAbsolute, Positional::Rotary] {
            let cfg = ModelConfig { positional, ..tiny() };
            let m = init_model(&cfg, 5).unwrap();
            let a = forward_full(&m, &[1, 2, 3, 4, 5]).unwrap();
            let b = forward_full(&m, &[1, 2, 3, 9, 0, 10]).unwrap();
            assert_eq!(a[..3], b[..3]);
            assert_ne!(a[3], b[3]);
        }
    }

    #[test]
    fn rejects_bad_tokens_and_configs() {
        let m = init_model(&tiny(), 4).unwrap();
        assert!(forward_full(&m, &[11]).is_err());
        assert!(forward_full(&m, &[]).is_err());
        assert!(forward_full(&m, &[0; 33]).is_err());
        let bad = ModelConfig { n_kv_heads: 3, ..tiny() };
        assert!(init_model(&bad, 0).is_err());
        let zero = ModelConfig { d_head: 0, ..tiny() };
        assert!(init_model(&zero, 0).is_err());
    }

    #[test]
    fn weight_file_round_trip() {
        for positional in [Positional::LearnedAbsolute, Positional::Rotary] {
            let m = init_model(&ModelConfig { positional, ..tiny() }, 8).unwrap();
            let bytes = m.to_bytes();
            let back = ModelWeights::from_bytes(&bytes).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn corrupted_weight_file_is_rejected() {
        let mut bytes = init_model(&tiny(), 8).unwrap().to_bytes();
        bytes[100] ^= 1;
        assert!(ModelWeights::from_bytes(&bytes).is_err());
        assert!(ModelWeights::from_bytes(b"nope").is_err());
    }
}
