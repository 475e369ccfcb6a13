//! Learns which heads keep dense attention.
//!
//! Every gated head (layer > 0, per KV head) owns a stretched, rectified
//! Kumaraswamy gate `z`. The student mixes the dense attention map `A_R` with
//! the map restricted to the inherited critical-token set `A_S` as
//! `z * A_R + (1 - z) * A_S`, and is trained to match the dense teacher's
//! logits on target positions. The number of open gates is held near a
//! budget by a Lagrange multiplier that ascends on the constraint gap.
//!
//! Only the gate parameters and the multiplier change; the model is frozen.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{args_top_k, dense_weights, gqa_pool_queries, sparse_weights, weighted_sum, AttnInput, TokenSet};
use crate::hardkuma::{
    expected_gate, expected_l0, expected_l0_grad_raw, open_uniform, pathwise_grad_raw, sample, GateParams, Stretch,
};
use crate::model::{dense_run, ModelConfig, ModelWeights};
use crate::rolemap::{Role, RoleEntry, RoleMap};
use crate::{Error, Result};

/// Marks the end of a passkey prompt.
pub const QUERY_TOKEN: u32 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr_gates: f64,
    pub lr_lambda: f64,
    /// Open-gate budget.
    pub n_target: f64,
    /// Critical tokens kept by a sparse head, as a fraction of the context.
    pub token_budget_fraction: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub prompt_len_min: usize,
    pub prompt_len_max: usize,
    pub passkey_len: usize,
    /// Step of the central differences taken on each gate value.
    pub fd_step: f64,
    /// Monte Carlo draws used to estimate `E[z]` at export.
    pub export_samples: usize,
    pub init_alpha: f64,
    pub init_beta: f64,
    pub stretch: [f64; 2],
    pub optimizer: Optimizer,
    /// Both log-parameters are clamped to this range after every step.
    pub log_param_range: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr_gates: 0.01,
            lr_lambda: 0.0007,
            n_target: 4.0,
            token_budget_fraction: 0.30,
            seed: 0,
            batch_size: 1,
            prompt_len_min: 64,
            prompt_len_max: 128,
            passkey_len: 4,
            fd_step: 1e-5,
            export_samples: 100_000,
            init_alpha: 1.0,
            init_beta: 1.0,
            stretch: [-0.1, 1.1],
            optimizer: Optimizer::Adam,
            log_param_range: [-3.0, 1.0],
        }
    }
}

impl TrainConfig {
    pub fn stretch(&self) -> Result<Stretch> {
        Stretch::new(self.stretch[0], self.stretch[1])
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let gated = gated_heads(model);
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.n_target >= 0.0 && self.n_target <= gated as f64) {
            return fail(format!("n_target {} outside [0, {gated}] gated heads", self.n_target));
        }
        if !(self.token_budget_fraction > 0.0 && self.token_budget_fraction <= 1.0) {
            return fail(format!("token_budget_fraction {} outside (0, 1]", self.token_budget_fraction));
        }
        if !(self.lr_gates > 0.0 && self.lr_lambda >= 0.0 && self.fd_step > 0.0) {
            return fail("learning rates and fd_step must be positive".into());
        }
        let [lo, hi] = self.log_param_range;
        let (la, lb) = (self.init_alpha.ln(), self.init_beta.ln());
        if !(lo <= la && la <= hi && lo <= lb && lb <= hi) {
            return fail(format!("initial gate parameters outside log range [{lo}, {hi}]"));
        }
        if self.batch_size == 0 || self.passkey_len == 0 || self.export_samples == 0 {
            return fail("batch_size, passkey_len and export_samples must be at least 1".into());
        }
        if self.prompt_len_min < self.passkey_len + 2 || self.prompt_len_min > self.prompt_len_max {
            return fail(format!(
                "prompt length range [{}, {}] cannot hold a {}-token passkey",
                self.prompt_len_min, self.prompt_len_max, self.passkey_len
            ));
        }
        if self.prompt_len_max + self.passkey_len > model.max_seq_len {
            return fail("prompt plus passkey exceeds max_seq_len".into());
        }
        if model.vocab_size < 4 {
            return fail("passkey prompts need a vocabulary of at least 4 tokens".into());
        }
        self.stretch()?;
        GateParams::new(self.init_alpha, self.init_beta, self.stretch()?)?;
        Ok(())
    }
}

/// Gated heads: every KV head above layer 0.
pub fn gated_heads(model: &ModelConfig) -> usize {
    model.n_layers.saturating_sub(1) * model.n_kv_heads
}

/// Tokens kept out of a context of `seq_len` at the given fraction, at least one.
pub fn token_budget(fraction: f64, seq_len: usize) -> usize {
    let raw = fraction * seq_len as f64;
    ((raw - 1e-9 * raw.max(1.0)).ceil() as usize).clamp(1, seq_len.max(1))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PasskeyBatch {
    pub prompt: Vec<u32>,
    /// The passkey, which the prompt contains verbatim.
    pub targets: Vec<u32>,
}

/// Filler tokens from the lower half of the vocabulary with a passkey drawn
/// from the upper half inserted at a random offset, ending in
/// [`QUERY_TOKEN`].
pub fn gen_passkey_batch(config: &TrainConfig, vocab_size: usize, seed: u64) -> PasskeyBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = (vocab_size / 2) as u32;
    let len = rng.gen_range(config.prompt_len_min..=config.prompt_len_max);
    let k = config.passkey_len;
    let targets: Vec<u32> = (0..k).map(|_| rng.gen_range(half..vocab_size as u32)).collect();
    let at = rng.gen_range(0..len - k);
    let mut prompt: Vec<u32> = (0..len - 1).map(|_| rng.gen_range(1..half)).collect();
    prompt[at..at + k].copy_from_slice(&targets);
    prompt.push(QUERY_TOKEN);
    PasskeyBatch { prompt, targets }
}

/// Teacher side of one distillation example: the dense KV cache of the
/// prompt minus its last token, the teacher-forced student inputs, and the
/// teacher logits at the positions that predict the targets.
#[derive(Debug, Clone)]
pub struct DistillExample {
    pub start: usize,
    pub inputs: Vec<u32>,
    pub teacher: Vec<Vec<f64>>,
    prefix_keys: Vec<Vec<Vec<f64>>>,
    prefix_values: Vec<Vec<Vec<f64>>>,
}

pub fn prepare_example(model: &ModelWeights, batch: &PasskeyBatch) -> Result<DistillExample> {
    if batch.prompt.len() < 2 || batch.targets.is_empty() {
        return Err(Error::Config("a distillation example needs a 2-token prompt and a target".into()));
    }
    let start = batch.prompt.len() - 1;
    let mut seq = batch.prompt.clone();
    seq.extend_from_slice(&batch.targets[..batch.targets.len() - 1]);
    let run = dense_run(model, &seq)?;
    let rows = start * model.config.d_head;
    let cut = |t: Vec<Vec<Vec<f64>>>| -> Vec<Vec<Vec<f64>>> {
        t.into_iter()
            .map(|layer| {
                layer
                    .into_iter()
                    .map(|mut h| {
                        h.truncate(rows);
                        h
                    })
                    .collect()
            })
            .collect()
    };
    Ok(DistillExample {
        start,
        inputs: seq[start..].to_vec(),
        teacher: run.logits[start..].to_vec(),
        prefix_keys: cut(run.keys),
        prefix_values: cut(run.values),
    })
}

/// Student logits at the example's target positions, with gate value
/// `z[(layer - 1) * n_kv_heads + head]` mixing each gated head.
pub fn hybrid_forward(
    model: &ModelWeights,
    z: &[f64],
    example: &DistillExample,
    token_budget_fraction: f64,
) -> Result<Vec<Vec<f64>>> {
    let cfg = &model.config;
    if z.len() != gated_heads(cfg) {
        return Err(Error::Shape(format!("{} gate values for {} gated heads", z.len(), gated_heads(cfg))));
    }
    let (g, scale, d) = (cfg.group_size(), cfg.attn_scale(), cfg.d_head);
    let mut keys = example.prefix_keys.clone();
    let mut values = example.prefix_values.clone();
    let mut logits = Vec::with_capacity(example.inputs.len());
    for (i, &token) in example.inputs.iter().enumerate() {
        let pos = example.start + i;
        let seq_len = pos + 1;
        let budget = token_budget(token_budget_fraction, seq_len);
        let mut x = model.embed(token, pos)?;
        let mut sets: Vec<Option<TokenSet>> = vec![None; cfg.n_kv_heads];
        for (layer, weights) in model.layers.iter().enumerate() {
            let proj = weights.project(cfg, &x, pos);
            for h in 0..cfg.n_kv_heads {
                keys[layer][h].extend_from_slice(&proj.k[h]);
                values[layer][h].extend_from_slice(&proj.v[h]);
            }
            let mut outs = Vec::with_capacity(cfg.n_q_heads);
            let mut next_sets = Vec::with_capacity(cfg.n_kv_heads);
            for h in 0..cfg.n_kv_heads {
                let (k, v) = (&keys[layer][h][..], &values[layer][h][..]);
                let group = &proj.q[h * g..(h + 1) * g];
                let mut dense = Vec::with_capacity(g);
                for q in group {
                    dense.push(dense_weights(&AttnInput::new(q, k, v, scale)?)?);
                }
                let select = if g == 1 {
                    dense[0].clone()
                } else {
                    let pooled = gqa_pool_queries(group, g)?.remove(0);
                    dense_weights(&AttnInput::new(&pooled, k, v, scale)?)?
                };
                next_sets.push(Some(args_top_k(&select, budget)));
                if layer == 0 {
                    outs.extend(dense.iter().map(|a_r| weighted_sum(a_r, v, d)));
                    continue;
                }
                let zv = z[(layer - 1) * cfg.n_kv_heads + h];
                let set = sets[h]
                    .as_ref()
                    .ok_or_else(|| Error::State(format!("no token set for layer {layer} head {h}")))?;
                for (q, a_r) in group.iter().zip(&dense) {
                    let a_s = sparse_weights(&AttnInput::new(q, k, v, scale)?, set)?;
                    let mut mixed: Vec<f64> = a_r.iter().map(|r| zv * r).collect();
                    for (w, &j) in a_s.iter().zip(set.indices()) {
                        mixed[j] += (1.0 - zv) * w;
                    }
                    outs.push(weighted_sum(&mixed, v, d));
                }
            }
            sets = next_sets;
            x = weights.finish(&x, &outs);
        }
        logits.push(model.logits(&x));
    }
    Ok(logits)
}

/// Summed squared distance between student and teacher logits over every
/// target position.
pub fn distill_loss(student: &[Vec<f64>], teacher: &[Vec<f64>]) -> Result<f64> {
    if student.len() != teacher.len() || student.iter().zip(teacher).any(|(s, t)| s.len() != t.len()) {
        return Err(Error::Shape("student and teacher logits differ in shape".into()));
    }
    Ok(student.iter().zip(teacher).flat_map(|(s, t)| s.iter().zip(t).map(|(a, b)| (a - b) * (a - b))).sum())
}

pub fn lagrangian(distill: f64, gates: &[GateParams], lambda: f64, n_target: f64) -> f64 {
    distill + lambda * (expected_l0(gates) - n_target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub distill: f64,
    pub expected_l0: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Layer-major over layers `1..n_layers`.
    pub gates: Vec<GateParams>,
    pub lambda: f64,
    pub step: usize,
    pub history: Vec<StepLog>,
    optimizer: Adam,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: &ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate(model)?;
        let gate = GateParams::new(config.init_alpha, config.init_beta, config.stretch()?)?;
        let n = gated_heads(model);
        Ok(Self {
            gates: vec![gate; n],
            lambda: 0.0,
            step: 0,
            history: Vec::new(),
            optimizer: Adam::new(2 * n),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
        })
    }

    pub fn expected_l0(&self) -> f64 {
        expected_l0(&self.gates)
    }

    /// One uniform driver per gate.
    pub fn draw_uniforms(&mut self) -> Vec<f64> {
        (0..self.gates.len()).map(|_| open_uniform(&mut self.rng)).collect()
    }

    /// Gate values for fixed drivers.
    pub fn gate_values(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.gates.iter().zip(u).map(|(g, &u)| Ok(sample(g, u)?.z)).collect()
    }

    /// Descends the gates along `grad` with the configured optimizer.
    pub fn apply_gradient(&mut self, grad: &GateGrad) {
        let mut params: Vec<f64> = self.gates.iter().flat_map(|g| [g.log_alpha, g.log_beta]).collect();
        let flat: Vec<f64> = grad.log_alpha.iter().zip(&grad.log_beta).flat_map(|(a, b)| [*a, *b]).collect();
        let lr = self.config.lr_gates;
        match self.config.optimizer {
            Optimizer::Adam => self.optimizer.step(&mut params, &flat, lr),
            Optimizer::Sgd => params.iter_mut().zip(&flat).for_each(|(p, g)| *p -= lr * g),
        }
        let [lo, hi] = self.config.log_param_range;
        for (g, p) in self.gates.iter_mut().zip(params.chunks_exact(2)) {
            g.log_alpha = p[0].clamp(lo, hi);
            g.log_beta = p[1].clamp(lo, hi);
        }
    }

    /// Ascent on the constraint gap, clamped at zero.
    pub fn update_lambda(&mut self, expected_l0: f64) {
        self.lambda = (self.lambda + self.config.lr_lambda * (expected_l0 - self.config.n_target)).max(0.0);
    }
}

/// Gradient of the Lagrangian with respect to every gate's log-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GateGrad {
    pub log_alpha: Vec<f64>,
    pub log_beta: Vec<f64>,
    /// Mean distillation loss at the sampled gate values.
    pub distill: f64,
}

/// Mean distillation loss over `examples` at gate values `z`.
pub fn batch_distill(model: &ModelWeights, z: &[f64], examples: &[DistillExample], fraction: f64) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        total += distill_loss(&hybrid_forward(model, z, ex, fraction)?, &ex.teacher)?;
    }
    Ok(total / examples.len() as f64)
}

/// Pathwise gradient at drivers `u`: the loss slope in each gate value, taken
/// by central differences, chained through the sample's dependence on the
/// gate parameters, plus the multiplier times the expected-L0 gradient.
pub fn grad_gates(
    model: &ModelWeights,
    state: &TrainState,
    examples: &[DistillExample],
    u: &[f64],
) -> Result<GateGrad> {
    if examples.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let fraction = state.config.token_budget_fraction;
    let z = state.gate_values(u)?;
    let distill = batch_distill(model, &z, examples, fraction)?;
    let h = state.config.fd_step;
    let per_gate: Vec<Result<(f64, f64)>> = (0..state.gates.len())
        .into_par_iter()
        .map(|i| {
            let (g, ui) = (&state.gates[i], u[i]);
            let (pa, pb) = pathwise_grad_raw(g, ui)?;
            let (la, lb) = expected_l0_grad_raw(g);
            let (mut da, mut db) = (state.lambda * la, state.lambda * lb);
            if pa != 0.0 || pb != 0.0 {
                let mut zp = z.clone();
                zp[i] = z[i] + h;
                let up = batch_distill(model, &zp, examples, fraction)?;
                zp[i] = z[i] - h;
                let down = batch_distill(model, &zp, examples, fraction)?;
                let dz = (up - down) / (2.0 * h);
                da += dz * pa;
                db += dz * pb;
            }
            Ok((da, db))
        })
        .collect();
    let mut grad = GateGrad { log_alpha: Vec::with_capacity(u.len()), log_beta: Vec::with_capacity(u.len()), distill };
    for r in per_gate {
        let (a, b) = r?;
        grad.log_alpha.push(a);
        grad.log_beta.push(b);
    }
    Ok(grad)
}

/// One optimization step on `examples`: fresh gate draws, gate descent,
/// multiplier ascent.
pub fn train_step(model: &ModelWeights, state: &mut TrainState, examples: &[DistillExample]) -> Result<StepLog> {
    let u = state.draw_uniforms();
    let grad = grad_gates(model, state, examples, &u)?;
    let l0 = state.expected_l0();
    state.apply_gradient(&grad);
    state.update_lambda(l0);
    state.step += 1;
    let log = StepLog { step: state.step, distill: grad.distill, expected_l0: l0, lambda: state.lambda };
    state.history.push(log.clone());
    Ok(log)
}

/// Seed of the passkey batch drawn at `step`.
pub fn batch_seed(seed: u64, step: usize, item: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (item as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Runs `config.steps` steps on freshly generated passkey batches, calling
/// `on_step` after each.
pub fn train(model: &ModelWeights, config: TrainConfig, mut on_step: impl FnMut(&StepLog)) -> Result<TrainState> {
    let mut state = TrainState::new(&model.config, config)?;
    while state.step < state.config.steps {
        let examples = (0..state.config.batch_size)
            .map(|item| {
                let seed = batch_seed(state.config.seed, state.step, item);
                prepare_example(model, &gen_passkey_batch(&state.config, model.config.vocab_size, seed))
            })
            .collect::<Result<Vec<_>>>()?;
        let log = train_step(model, &mut state, &examples)?;
        on_step(&log);
    }
    Ok(state)
}

/// `E[z]` of every gate, estimated by sampling.
pub fn gate_expectations(state: &TrainState) -> Vec<f64> {
    let n = state.config.export_samples;
    state
        .gates
        .iter()
        .enumerate()
        .map(|(i, g)| expected_gate(g, n, state.config.seed.wrapping_add(i as u64)))
        .collect()
}

/// Retrieval where `E[z] > 0.5`; layer 0 is always retrieval.
pub fn export_roles(model: &ModelConfig, state: &TrainState) -> Result<RoleMap> {
    let expectations = gate_expectations(state);
    let mut entries = vec![RoleEntry { role: Role::Retrieval, expectation: 1.0, gate: None }; model.n_kv_heads];
    for (g, e) in state.gates.iter().zip(expectations) {
        let role = if e > 0.5 { Role::Retrieval } else { Role::Sparse };
        entries.push(RoleEntry { role, expectation: e, gate: Some(*g) });
    }
    RoleMap::new(model, state.config.stretch()?, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn tiny() -> (ModelWeights, TrainConfig) {
        let cfg = ModelConfig {
            n_layers: 2,
            n_q_heads: 4,
            n_kv_heads: 2,
            d_head: 4,
            d_ff: 16,
            vocab_size: 16,
            max_seq_len: 64,
            ..ModelConfig::default()
        };
        let train = TrainConfig { n_target: 1.0, prompt_len_min: 12, prompt_len_max: 20, passkey_len: 3, ..TrainConfig::default() };
        (init_model(&cfg, 3).unwrap(), train)
    }

    #[test]
    fn passkey_batches_are_deterministic_and_well_formed() {
        let (model, train) = tiny();
        let a = gen_passkey_batch(&train, model.config.vocab_size, 9);
        assert_eq!(a, gen_passkey_batch(&train, model.config.vocab_size, 9));
        assert!((12..=20).contains(&a.prompt.len()));
        assert_eq!(*a.prompt.last().unwrap(), QUERY_TOKEN);
        assert!(a.prompt.windows(3).any(|w| w == a.targets.as_slice()));
    }

    #[test]
    fn open_gates_reproduce_the_teacher() {
        let (model, train) = tiny();
        let ex = prepare_example(&model, &gen_passkey_batch(&train, 16, 1)).unwrap();
        let out = hybrid_forward(&model, &[1.0, 1.0], &ex, 0.3).unwrap();
        assert_eq!(out, ex.teacher);
        assert_eq!(distill_loss(&out, &ex.teacher).unwrap(), 0.0);
    }

    #[test]
    fn closed_gates_with_full_budget_reproduce_the_teacher() {
        let (model, train) = tiny();
        let ex = prepare_example(&model, &gen_passkey_batch(&train, 16, 2)).unwrap();
        let out = hybrid_forward(&model, &[0.0, 0.0], &ex, 1.0).unwrap();
        for (s, t) in out.iter().zip(&ex.teacher) {
            for (a, b) in s.iter().zip(t) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn distill_loss_of_constant_offset() {
        let t = vec![vec![1.0, 2.0, 3.0]];
        let s = vec![vec![0.5, 1.5, 2.5]];
        assert_eq!(distill_loss(&s, &t).unwrap(), 0.75);
        assert!(distill_loss(&s, &[vec![1.0]]).is_err());
    }

    #[test]
    fn lagrangian_cases() {
        let gates = vec![GateParams::uniform(Stretch::default()); 3];
        let l0 = expected_l0(&gates);
        assert_eq!(lagrangian(2.0, &gates, 0.0, 1.0), 2.0);
        assert_eq!(lagrangian(2.0, &gates, 5.0, l0), 2.0);
    }

    #[test]
    fn lambda_ascent_and_clamp() {
        let (model, train) = tiny();
        let mut state = TrainState::new(&model.config, train).unwrap();
        state.update_lambda(1.5);
        assert!(state.lambda > 0.0);
        let mut low = TrainState::new(&model.config, TrainConfig { n_target: 1.0, ..state.config.clone() }).unwrap();
        low.update_lambda(0.2);
        assert_eq!(low.lambda, 0.0);
    }

    #[test]
    fn clipped_samples_carry_no_distillation_gradient() {
        let (model, train) = tiny();
        let state = TrainState::new(&model.config, train.clone()).unwrap();
        let ex = prepare_example(&model, &gen_passkey_batch(&train, 16, 4)).unwrap();
        // u near 0 gives s near 1, stretched past 1; u near 1 clips at 0
        let grad = grad_gates(&model, &state, &[ex], &[1e-6, 1.0 - 1e-9]).unwrap();
        assert!(grad.log_alpha.iter().chain(&grad.log_beta).all(|g| *g == 0.0));
    }

    #[test]
    fn bad_configs_are_rejected() {
        let (model, train) = tiny();
        for bad in [
            TrainConfig { n_target: 3.0, ..train.clone() },
            TrainConfig { token_budget_fraction: 0.0, ..train.clone() },
            TrainConfig { prompt_len_min: 3, ..train.clone() },
            TrainConfig { prompt_len_max: 70, ..train.clone() },
        ] {
            assert!(TrainState::new(&model.config, bad).is_err());
        }
    }

    #[test]
    fn export_forces_layer_zero() {
        let (model, train) = tiny();
        let mut state = TrainState::new(&model.config, TrainConfig { export_samples: 2000, ..train }).unwrap();
        state.gates[0] = GateParams::new(50.0, 0.02, Stretch::default()).unwrap();
        state.gates[1] = GateParams::new(0.02, 50.0, Stretch::default()).unwrap();
        let roles = export_roles(&model.config, &state).unwrap();
        assert!(roles.is_retrieval(0, 0) && roles.is_retrieval(0, 1));
        assert_eq!(roles.role(1, 0), Role::Retrieval);
        assert_eq!(roles.role(1, 1), Role::Sparse);
    }
}
