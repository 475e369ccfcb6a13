//! Per-(layer, KV head) role assignment and its on-disk form.
//!
//! The file is pretty-printed JSON:
//!
//! ```text
//! {
//!   "version": 1,
//!   "model_checksum": "<hex digest of the model config>",
//!   "n_layers": 4,
//!   "n_kv_heads": 4,
//!   "stretch": [-0.1, 1.1],
//!   "heads": [
//!     { "layer": 0, "head": 0, "role": "retrieval", "expectation": 1.0, "alpha": null, "beta": null },
//!     { "layer": 1, "head": 0, "role": "sparse", "expectation": 0.003, "alpha": 0.21, "beta": 3.9 },
//!     ...
//!   ]
//! }
//! ```
//!
//! Layer 0 carries no gate. Loading rejects files whose roles disagree with
//! their expectations, whose layer 0 is not all retrieval, or whose model
//! checksum does not match the model they are used with.

use serde::{Deserialize, Serialize};

use crate::hardkuma::{GateParams, Stretch};
use crate::model::ModelConfig;
use crate::{Error, Result};

pub const ROLEMAP_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Retrieval,
    Sparse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoleEntry {
    pub role: Role,
    /// Learned `E[z]`; 1.0 for ungated layer-0 heads.
    pub expectation: f64,
    pub gate: Option<GateParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoleMap {
    n_layers: usize,
    n_heads: usize,
    model_checksum: String,
    stretch: Stretch,
    entries: Vec<RoleEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoleMapFile {
    version: u32,
    model_checksum: String,
    n_layers: usize,
    n_kv_heads: usize,
    stretch: [f64; 2],
    heads: Vec<HeadEntryFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadEntryFile {
    layer: usize,
    head: usize,
    role: Role,
    expectation: f64,
    alpha: Option<f64>,
    beta: Option<f64>,
}

impl RoleMap {
    /// Builds a map from explicit entries in layer-major order and checks
    /// its invariants.
    pub fn new(config: &ModelConfig, stretch: Stretch, entries: Vec<RoleEntry>) -> Result<Self> {
        let map = Self {
            n_layers: config.n_layers,
            n_heads: config.n_kv_heads,
            model_checksum: config.checksum(),
            stretch,
            entries,
        };
        map.validate()?;
        Ok(map)
    }

    /// Every head retrieval: decoding reduces to dense attention.
    pub fn all_retrieval(config: &ModelConfig) -> Self {
        Self::from_roles(config, |_, _| Role::Retrieval)
    }

    /// Every head above layer 0 sparse.
    pub fn all_sparse(config: &ModelConfig) -> Self {
        Self::from_roles(config, |_, _| Role::Sparse)
    }

    /// Assigns roles from a closure over `(layer, head)`. Layer 0 is always
    /// retrieval; expectations are set to 1 or 0 to match.
    pub fn from_roles(config: &ModelConfig, mut role: impl FnMut(usize, usize) -> Role) -> Self {
        let mut entries = Vec::with_capacity(config.n_layers * config.n_kv_heads);
        for layer in 0..config.n_layers {
            for head in 0..config.n_kv_heads {
                let r = if layer == 0 { Role::Retrieval } else { role(layer, head) };
                let expectation = if r == Role::Retrieval { 1.0 } else { 0.0 };
                entries.push(RoleEntry { role: r, expectation, gate: None });
            }
        }
        Self {
            n_layers: config.n_layers,
            n_heads: config.n_kv_heads,
            model_checksum: config.checksum(),
            stretch: Stretch::default(),
            entries,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.entries.len() != self.n_layers * self.n_heads {
            return Err(Error::Format(format!(
                "role map has {} entries, expected {} x {}",
                self.entries.len(),
                self.n_layers,
                self.n_heads
            )));
        }
        for (i, e) in self.entries.iter().enumerate() {
            let (layer, head) = (i / self.n_heads, i % self.n_heads);
            if layer == 0 && e.role != Role::Retrieval {
                return Err(Error::Format(format!("layer 0 head {head} must be a retrieval head")));
            }
            if !(0.0..=1.0).contains(&e.expectation) {
                return Err(Error::Format(format!(
                    "layer {layer} head {head}: expectation {} outside [0, 1]",
                    e.expectation
                )));
            }
            if (e.role == Role::Retrieval) != (e.expectation > 0.5) {
                return Err(Error::Format(format!(
                    "layer {layer} head {head}: role {:?} disagrees with expectation {}",
                    e.role, e.expectation
                )));
            }
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn model_checksum(&self) -> &str {
        &self.model_checksum
    }

    pub fn entry(&self, layer: usize, head: usize) -> &RoleEntry {
        &self.entries[layer * self.n_heads + head]
    }

    pub fn role(&self, layer: usize, head: usize) -> Role {
        self.entry(layer, head).role
    }

    pub fn is_retrieval(&self, layer: usize, head: usize) -> bool {
        layer == 0 || self.role(layer, head) == Role::Retrieval
    }

    /// Retrieval heads above layer 0.
    pub fn gated_retrieval_count(&self) -> usize {
        self.entries[self.n_heads..].iter().filter(|e| e.role == Role::Retrieval).count()
    }

    /// Fails unless this map was produced for `config`.
    pub fn check_model(&self, config: &ModelConfig) -> Result<()> {
        if self.model_checksum != config.checksum() {
            return Err(Error::Format(format!(
                "role map was built for model config {}, not {}",
                self.model_checksum,
                config.checksum()
            )));
        }
        if self.n_layers != config.n_layers || self.n_heads != config.n_kv_heads {
            return Err(Error::Format("role map shape does not match the model".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let heads = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| HeadEntryFile {
                layer: i / self.n_heads,
                head: i % self.n_heads,
                role: e.role,
                expectation: e.expectation,
                alpha: e.gate.map(|g| g.alpha()),
                beta: e.gate.map(|g| g.beta()),
            })
            .collect();
        let file = RoleMapFile {
            version: ROLEMAP_VERSION,
            model_checksum: self.model_checksum.clone(),
            n_layers: self.n_layers,
            n_kv_heads: self.n_heads,
            stretch: [self.stretch.lo(), self.stretch.hi()],
            heads,
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: RoleMapFile = serde_json::from_str(text)?;
        if file.version != ROLEMAP_VERSION {
            return Err(Error::Format(format!("unsupported role map version {}", file.version)));
        }
        let stretch = Stretch::new(file.stretch[0], file.stretch[1])?;
        let mut entries = Vec::with_capacity(file.heads.len());
        for (i, h) in file.heads.into_iter().enumerate() {
            if h.layer * file.n_kv_heads + h.head != i {
                return Err(Error::Format(format!(
                    "entry {i} is (layer {}, head {}); entries must be layer-major",
                    h.layer, h.head
                )));
            }
            let gate = match (h.alpha, h.beta) {
                (Some(a), Some(b)) => Some(GateParams::new(a, b, stretch)?),
                (None, None) => None,
                _ => return Err(Error::Format(format!("entry {i} has only one of alpha/beta"))),
            };
            entries.push(RoleEntry { role: h.role, expectation: h.expectation, gate });
        }
        let map = Self {
            n_layers: file.n_layers,
            n_heads: file.n_kv_heads,
            model_checksum: file.model_checksum,
            stretch,
            entries,
        };
        map.validate()?;
        Ok(map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_keeps_gates() {
        let cfg = ModelConfig { n_layers: 3, n_kv_heads: 2, n_q_heads: 2, ..ModelConfig::default() };
        let gate = GateParams::new(2.5, 0.4, Stretch::default()).unwrap();
        let mut entries = vec![RoleEntry { role: Role::Retrieval, expectation: 1.0, gate: None }; 2];
        for i in 0..4 {
            let retrieval = i % 2 == 0;
            entries.push(RoleEntry {
                role: if retrieval { Role::Retrieval } else { Role::Sparse },
                expectation: if retrieval { 0.93 } else { 0.02 },
                gate: Some(gate),
            });
        }
        let map = RoleMap::new(&cfg, Stretch::default(), entries).unwrap();
        let back = RoleMap::from_json(&map.to_json().unwrap()).unwrap();
        assert_eq!(back.role(1, 0), Role::Retrieval);
        assert_eq!(back.role(2, 1), Role::Sparse);
        let g = back.entry(1, 0).gate.unwrap();
        assert!((g.alpha() - 2.5).abs() < 1e-12 && (g.beta() - 0.4).abs() < 1e-12);
        assert_eq!(back.gated_retrieval_count(), 2);
        back.check_model(&cfg).unwrap();
        let other = ModelConfig { d_head: 8, ..cfg };
        assert!(back.check_model(&other).is_err());
    }

    #[test]
    fn inconsistent_entries_are_rejected() {
        let cfg = ModelConfig { n_layers: 2, n_kv_heads: 1, n_q_heads: 1, ..ModelConfig::default() };
        let ok = RoleEntry { role: Role::Retrieval, expectation: 1.0, gate: None };
        let sparse_layer0 = RoleEntry { role: Role::Sparse, expectation: 0.1, gate: None };
        assert!(RoleMap::new(&cfg, Stretch::default(), vec![sparse_layer0, ok.clone()]).is_err());
        let disagree = RoleEntry { role: Role::Retrieval, expectation: 0.3, gate: None };
        assert!(RoleMap::new(&cfg, Stretch::default(), vec![ok.clone(), disagree]).is_err());
        assert!(RoleMap::new(&cfg, Stretch::default(), vec![ok]).is_err());
    }

    #[test]
    fn layer_zero_is_always_retrieval() {
        let cfg = ModelConfig { n_layers: 2, n_kv_heads: 2, n_q_heads: 2, ..ModelConfig::default() };
        let map = RoleMap::all_sparse(&cfg);
        assert!(map.is_retrieval(0, 1));
        assert!(!map.is_retrieval(1, 1));
    }
}
