mod common;

use common::{config, max_abs_diff, model, rng};
use headsparse::hardkuma::{expected_l0, expected_l0_grad_raw, prob_one, prob_zero, sample, GateParams};
use headsparse::model::{dense_run, ModelWeights};
use headsparse::rolemap::Role;
use headsparse::specializer::{
    batch_distill, distill_loss, export_roles, gen_passkey_batch, grad_gates, hybrid_forward, lagrangian,
    prepare_example, token_budget, train_step, DistillExample, GateGrad, Optimizer, PasskeyBatch, TrainConfig,
    TrainState, QUERY_TOKEN,
};
use proptest::prelude::*;
use rand::Rng;

fn toy_config() -> TrainConfig {
    TrainConfig { prompt_len_min: 12, prompt_len_max: 20, passkey_len: 3, n_target: 1.0, ..TrainConfig::default() }
}

fn toy(n_kv: usize, group: usize, seed: u64) -> (ModelWeights, TrainConfig) {
    (model(&config(2, n_kv * group, n_kv, 4), seed), toy_config())
}

fn example(m: &ModelWeights, tc: &TrainConfig, seed: u64) -> (PasskeyBatch, DistillExample) {
    let batch = gen_passkey_batch(tc, m.config.vocab_size, seed);
    let ex = prepare_example(m, &batch).unwrap();
    (batch, ex)
}

fn softmax_rows(q: &[f64], keys: &[f64], rows: &[usize], scale: f64) -> Vec<f64> {
    let d = q.len();
    let s: Vec<f64> = rows.iter().map(|&j| (0..d).map(|c| q[c] * keys[j * d + c]).sum::<f64>() * scale).collect();
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Two-layer student logits composed by hand: layer 0 dense, layer 1 mixes
/// the dense map with the map restricted to layer 0's selection.
fn mixture_oracle(m: &ModelWeights, batch: &PasskeyBatch, z: &[f64], fraction: f64) -> Vec<Vec<f64>> {
    let cfg = &m.config;
    let (d, g, scale) = (cfg.d_head, cfg.group_size(), cfg.attn_scale());
    let start = batch.prompt.len() - 1;
    let mut seq = batch.prompt.clone();
    seq.extend_from_slice(&batch.targets[..batch.targets.len() - 1]);
    let run = dense_run(m, &seq).unwrap();
    (start..seq.len())
        .map(|pos| {
            let all: Vec<usize> = (0..=pos).collect();
            let x0 = m.embed(seq[pos], pos).unwrap();
            let p0 = m.layers[0].project(cfg, &x0, pos);
            let mut outs = Vec::new();
            let mut sets = Vec::new();
            for h in 0..cfg.n_kv_heads {
                for q in &p0.q[h * g..(h + 1) * g] {
                    let w = softmax_rows(q, &run.keys[0][h], &all, scale);
                    outs.push((0..d).map(|c| all.iter().map(|&j| w[j] * run.values[0][h][j * d + c]).sum()).collect());
                }
                let pooled: Vec<f64> =
                    (0..d).map(|c| p0.q[h * g..(h + 1) * g].iter().map(|q| q[c]).sum::<f64>() / g as f64).collect();
                let w = softmax_rows(&pooled, &run.keys[0][h], &all, scale);
                let mut order = all.clone();
                order.sort_by(|a, b| w[*b].partial_cmp(&w[*a]).unwrap().then(a.cmp(b)));
                order.truncate(token_budget(fraction, pos + 1));
                order.sort_unstable();
                sets.push(order);
            }
            let x1 = m.layers[0].finish(&x0, &outs);
            let p1 = m.layers[1].project(cfg, &x1, pos);
            let mut outs = Vec::new();
            for h in 0..cfg.n_kv_heads {
                for q in &p1.q[h * g..(h + 1) * g] {
                    let dense = softmax_rows(q, &run.keys[1][h], &all, scale);
                    let sparse = softmax_rows(q, &run.keys[1][h], &sets[h], scale);
                    let mut mixed: Vec<f64> = dense.iter().map(|a| z[h] * a).collect();
                    for (w, &j) in sparse.iter().zip(&sets[h]) {
                        mixed[j] += (1.0 - z[h]) * w;
                    }
                    outs.push((0..d).map(|c| all.iter().map(|&j| mixed[j] * run.values[1][h][j * d + c]).sum()).collect());
                }
            }
            m.logits(&m.layers[1].finish(&x1, &outs))
        })
        .collect()
}

fn state(m: &ModelWeights, tc: &TrainConfig, seed: u64) -> TrainState {
    let mut s = TrainState::new(&m.config, tc.clone()).unwrap();
    let mut r = rng(seed);
    for g in &mut s.gates {
        g.log_alpha = r.gen_range(-1.0..1.0);
        g.log_beta = r.gen_range(-1.0..1.0);
    }
    s.lambda = r.gen_range(0.0..2.0);
    s
}

#[test]
fn open_gates_are_bitwise_the_teacher() {
    let (m, tc) = toy(2, 2, 4);
    let (_, ex) = example(&m, &tc, 9);
    assert_eq!(hybrid_forward(&m, &[1.0, 1.0], &ex, 0.3).unwrap(), ex.teacher);
}

#[test]
fn closed_gates_with_full_budget_match_the_teacher() {
    let (m, tc) = toy(3, 1, 6);
    let (_, ex) = example(&m, &tc, 2);
    let out = hybrid_forward(&m, &[0.0; 3], &ex, 1.0).unwrap();
    for (a, b) in out.iter().zip(&ex.teacher) {
        assert!(max_abs_diff(a, b) < 1e-6);
    }
}

#[test]
fn distill_loss_matches_double_loop() {
    let mut r = rng(3);
    let a: Vec<Vec<f64>> = (0..4).map(|_| (0..7).map(|_| r.gen_range(-3.0..3.0)).collect()).collect();
    let b: Vec<Vec<f64>> = (0..4).map(|_| (0..7).map(|_| r.gen_range(-3.0..3.0)).collect()).collect();
    let mut expect = 0.0;
    for i in 0..4 {
        for j in 0..7 {
            expect += (a[i][j] - b[i][j]).powi(2);
        }
    }
    assert!((distill_loss(&a, &b).unwrap() - expect).abs() < 1e-9);
    assert_eq!(distill_loss(&a, &a).unwrap(), 0.0);
    assert!(distill_loss(&a[..3], &b).is_err());
    let c = vec![vec![1.0, -2.0, 0.5]];
    assert!((distill_loss(&[vec![0.0; 3]], &c).unwrap() - 5.25).abs() < 1e-12);
}

#[test]
fn penalty_gradient_alone_lowers_expected_l0() {
    let (m, tc) = toy(4, 1, 1);
    for optimizer in [Optimizer::Adam, Optimizer::Sgd] {
        let mut s = TrainState::new(&m.config, TrainConfig { n_target: 1.0, optimizer, ..tc.clone() }).unwrap();
        s.lambda = 0.5;
        for _ in 0..20 {
            let before = s.expected_l0();
            assert!(before > s.config.n_target);
            let (a, b): (Vec<f64>, Vec<f64>) =
                s.gates.iter().map(|g| expected_l0_grad_raw(g)).map(|(a, b)| (s.lambda * a, s.lambda * b)).unzip();
            s.apply_gradient(&GateGrad { log_alpha: a, log_beta: b, distill: 0.0 });
            assert!(s.expected_l0() < before);
        }
    }
}

#[test]
fn multiplier_rules() {
    let (m, tc) = toy(2, 1, 1);
    let mut s = TrainState::new(&m.config, TrainConfig { n_target: 1.0, lr_lambda: 0.01, ..tc }).unwrap();
    assert_eq!(s.lambda, 0.0);
    s.update_lambda(0.5);
    assert_eq!(s.lambda, 0.0);
    s.update_lambda(1.5);
    assert!(s.lambda > 0.0);
    let before = s.lambda;
    s.update_lambda(1.2);
    assert!(s.lambda > before);
}

#[test]
fn fixed_batch_training_meets_the_budget() {
    let (m, tc) = toy(4, 1, 12);
    let tc = TrainConfig { n_target: 2.0, seed: 5, lr_lambda: 0.01, ..tc };
    let examples: Vec<DistillExample> = (0..2).map(|i| example(&m, &tc, 40 + i).1).collect();
    let mut s = TrainState::new(&m.config, tc).unwrap();
    for _ in 0..2000 {
        train_step(&m, &mut s, &examples).unwrap();
    }
    let gap = (s.expected_l0() - s.config.n_target).abs();
    assert!(gap < 1.0, "gap {gap}");
}

#[test]
fn export_follows_the_gates() {
    let (m, tc) = toy(2, 1, 1);
    let mut s = TrainState::new(&m.config, TrainConfig { export_samples: 20_000, ..tc }).unwrap();
    s.gates[0] = GateParams { log_alpha: 3.0, log_beta: -3.0, ..s.gates[0] };
    s.gates[1] = GateParams { log_alpha: -3.0, log_beta: 3.0, ..s.gates[1] };
    assert!(prob_one(&s.gates[0]) > 0.9 && prob_zero(&s.gates[1]) > 0.9);
    let roles = export_roles(&m.config, &s).unwrap();
    assert_eq!(roles.role(0, 0), Role::Retrieval);
    assert_eq!(roles.role(0, 1), Role::Retrieval);
    assert_eq!(roles.role(1, 0), Role::Retrieval);
    assert_eq!(roles.role(1, 1), Role::Sparse);
}

proptest! {
    #![proptest_config(common::cases(50))]

    #[test]
    fn mid_gates_match_the_hand_composed_mixture(seed in any::<u64>(), group in 1usize..3,
                                                 z0 in 0.0f64..1.0, z1 in 0.0f64..1.0, fraction in 0.05f64..1.0) {
        let (m, tc) = toy(2, group, seed);
        let (batch, ex) = example(&m, &tc, seed ^ 5);
        let got = hybrid_forward(&m, &[z0, z1], &ex, fraction).unwrap();
        let expect = mixture_oracle(&m, &batch, &[z0, z1], fraction);
        prop_assert_eq!(got.len(), expect.len());
        for (a, b) in got.iter().zip(&expect) {
            prop_assert!(max_abs_diff(a, b) < 1e-6);
        }
    }

    #[test]
    fn gate_gradient_matches_raw_differences(seed in any::<u64>()) {
        let (m, tc) = toy(2, 1, seed);
        let examples = vec![example(&m, &tc, seed ^ 11).1];
        let s = state(&m, &tc, seed);
        let mut r = rng(seed ^ 13);
        let u: Vec<f64> = (0..2).map(|_| r.gen_range(0.05..0.95)).collect();
        let z = s.gate_values(&u).unwrap();
        prop_assume!(z.iter().all(|z| *z > 0.02 && *z < 0.98));
        let grad = grad_gates(&m, &s, &examples, &u).unwrap();
        let objective = |gates: &[GateParams]| {
            let z: Vec<f64> = gates.iter().zip(&u).map(|(g, u)| sample(g, *u).unwrap().z).collect();
            let distill = batch_distill(&m, &z, &examples, tc.token_budget_fraction).unwrap();
            lagrangian(distill, gates, s.lambda, s.config.n_target)
        };
        let h = 1e-4;
        for i in 0..2 {
            for (which, analytic) in [(0, grad.log_alpha[i]), (1, grad.log_beta[i])] {
                let shifted = |delta: f64| {
                    let mut gates = s.gates.clone();
                    if which == 0 { gates[i].log_alpha += delta } else { gates[i].log_beta += delta }
                    objective(&gates)
                };
                let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                prop_assert!((analytic - fd).abs() <= 1e-3 * fd.abs().max(1e-6), "gate {} param {}: {} vs {}", i, which, analytic, fd);
            }
        }
    }

    #[test]
    fn clipped_gates_without_multiplier_have_zero_gradient(seed in any::<u64>()) {
        let (m, tc) = toy(2, 1, seed);
        let examples = vec![example(&m, &tc, seed).1];
        let mut s = state(&m, &tc, seed);
        s.lambda = 0.0;
        // a driver near 1 lands below the stretch floor, near 0 above the ceiling
        let u = [1.0 - 1e-12, 1e-12];
        let z = s.gate_values(&u).unwrap();
        prop_assert_eq!(z, vec![0.0, 1.0]);
        let grad = grad_gates(&m, &s, &examples, &u).unwrap();
        prop_assert_eq!(grad.log_alpha, vec![0.0, 0.0]);
        prop_assert_eq!(grad.log_beta, vec![0.0, 0.0]);
    }

    #[test]
    fn lagrangian_is_its_parts(distill in 0.0f64..100.0, lambda in 0.0f64..10.0, n in 0.0f64..6.0, seed in any::<u64>()) {
        let (m, tc) = toy(3, 1, 1);
        let s = state(&m, &tc, seed);
        let value = lagrangian(distill, &s.gates, lambda, n);
        prop_assert!((value - (distill + lambda * (expected_l0(&s.gates) - n))).abs() < 1e-12);
        prop_assert_eq!(lagrangian(distill, &s.gates, 0.0, n), distill);
    }

    #[test]
    fn passkey_batches_are_well_formed(seed in any::<u64>(), lo in 8usize..40, extra in 0usize..40, k in 1usize..6) {
        let tc = TrainConfig { prompt_len_min: lo, prompt_len_max: lo + extra, passkey_len: k, ..TrainConfig::default() };
        let b = gen_passkey_batch(&tc, 64, seed);
        prop_assert_eq!(&b, &gen_passkey_batch(&tc, 64, seed));
        prop_assert!(b.prompt.len() >= lo && b.prompt.len() <= lo + extra);
        prop_assert_eq!(*b.prompt.last().unwrap(), QUERY_TOKEN);
        prop_assert_eq!(b.targets.len(), k);
        prop_assert!(b.prompt.windows(k).any(|w| w == &b.targets[..]));
        prop_assert!(b.prompt.iter().all(|t| (*t as usize) < 64));
    }
}
