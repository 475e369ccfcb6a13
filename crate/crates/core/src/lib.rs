//! Hybrid-head sparse decoding.
//!
//! Attention heads are split into *retrieval* heads, which attend densely and
//! pick the critical tokens, and *sparse* heads, which reuse the token set
//! picked by the same head index in an earlier layer. Roles are learned with
//! HardKuma gates under an expected-L0 budget ([`specializer`]), decoding runs
//! through [`engine`], and [`kernel_sim`] reproduces the pooled block-sparse
//! split-K decode kernel on the CPU.

pub mod attention;
pub mod engine;
pub mod error;
pub mod hardkuma;
pub mod kernel_sim;
pub mod model;
pub mod rolemap;
pub mod specializer;

pub use error::{Error, Result};
