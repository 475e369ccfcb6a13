use std::path::Path;

use anyhow::{bail, Context, Result};
use headsparse::engine::SparsityPolicy;
use headsparse::model::ModelConfig;
use headsparse::specializer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Contents of an experiment TOML file. Every section is optional.
///
/// ```toml
/// model_seed = 7
///
/// [model]
/// n_layers = 4
/// n_q_heads = 4
/// n_kv_heads = 4
/// d_head = 8
/// d_ff = 64
/// vocab_size = 64
/// max_seq_len = 512
///
/// [train]
/// steps = 3000
/// n_target = 4
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model_seed: 7,
            model: ModelConfig {
                n_layers: 4,
                n_q_heads: 4,
                n_kv_heads: 4,
                d_head: 8,
                d_ff: 64,
                vocab_size: 64,
                max_seq_len: 512,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("invalid experiment config")?;
        cfg.model.validate()?;
        cfg.train.validate(&cfg.model)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }
}

/// Parses `dense`, `topk:<k>`, `topp:<p>`, `threshold:<tau>` or `ratio:<theta>`.
pub fn parse_policy(spec: &str) -> Result<SparsityPolicy> {
    let policy = match spec.split_once(':') {
        None if spec == "dense" => SparsityPolicy::TopK(usize::MAX),
        Some(("topk", v)) => SparsityPolicy::TopK(v.parse().with_context(|| format!("bad k in {spec:?}"))?),
        Some(("topp", v)) => SparsityPolicy::TopP(v.parse().with_context(|| format!("bad p in {spec:?}"))?),
        Some(("threshold", v)) => SparsityPolicy::Threshold(v.parse().with_context(|| format!("bad tau in {spec:?}"))?),
        Some(("ratio", v)) => SparsityPolicy::Ratio(v.parse().with_context(|| format!("bad theta in {spec:?}"))?),
        _ => bail!("unknown policy {spec:?}; expected dense, topk:K, topp:P, threshold:TAU or ratio:THETA"),
    };
    policy.validate()?;
    Ok(policy)
}

pub fn policy_label(policy: SparsityPolicy) -> String {
    match policy {
        SparsityPolicy::TopK(usize::MAX) => "dense".into(),
        SparsityPolicy::TopK(k) => format!("topk:{k}"),
        SparsityPolicy::TopP(p) => format!("topp:{p}"),
        SparsityPolicy::Threshold(t) => format!("threshold:{t}"),
        SparsityPolicy::Ratio(r) => format!("ratio:{r}"),
    }
}
