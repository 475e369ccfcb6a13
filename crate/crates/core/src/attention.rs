//! Attention primitives shared by the decoding engine, the specializer and
//! the kernel simulator.
//!
//! All reference paths run in `f64`. [`SoftmaxAccumulator`] is generic so
//! the kernel simulator can also run it in `f32`.

use num_traits::Float;

use crate::{Error, Result};

/// A single decode query against a key/value history for one head.
///
/// `keys` and `values` are row-major `seq_len x d_head`.
#[derive(Debug, Clone, Copy)]
pub struct AttnInput<'a> {
    q: &'a [f64],
    keys: &'a [f64],
    values: &'a [f64],
    scale: f64,
}

impl<'a> AttnInput<'a> {
    pub fn new(q: &'a [f64], keys: &'a [f64], values: &'a [f64], scale: f64) -> Result<Self> {
        let d = q.len();
        if d == 0 {
            return Err(Error::Shape("d_head must be at least 1".into()));
        }
        if keys.len() != values.len() || keys.len() % d != 0 {
            return Err(Error::Shape(format!(
                "keys ({}) and values ({}) must both be seq_len x {d}",
                keys.len(),
                values.len()
            )));
        }
        if !(scale > 0.0) {
            return Err(Error::Domain { value: scale, domain: "scale > 0" });
        }
        Ok(Self { q, keys, values, scale })
    }

    /// Builds an input with the usual `1 / sqrt(d_head)` scale.
    pub fn scaled(q: &'a [f64], keys: &'a [f64], values: &'a [f64]) -> Result<Self> {
        Self::new(q, keys, values, 1.0 / (q.len() as f64).sqrt())
    }

    pub fn d_head(&self) -> usize {
        self.q.len()
    }

    pub fn seq_len(&self) -> usize {
        self.keys.len() / self.q.len()
    }

    pub fn values(&self) -> &'a [f64] {
        self.values
    }

    fn key(&self, i: usize) -> &'a [f64] {
        let d = self.d_head();
        &self.keys[i * d..(i + 1) * d]
    }

    fn score(&self, i: usize) -> f64 {
        dot(self.q, self.key(i)) * self.scale
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Ascending, duplicate-free list of token positions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSet(Vec<usize>);

impl TokenSet {
    /// Sorts and deduplicates `indices`.
    pub fn from_indices(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self(indices)
    }

    /// Every position in `0..len`.
    pub fn full(len: usize) -> Self {
        Self((0..len).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.0.binary_search(&index).is_ok()
    }

    /// Number of positions present in both sets.
    pub fn intersection_len(&self, other: &TokenSet) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < self.0.len() && j < other.0.len() {
            match self.0[i].cmp(&other.0[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    pub fn check_against(&self, seq_len: usize) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::EmptyTokenSet);
        }
        match self.0.last() {
            Some(&last) if last >= seq_len => Err(Error::TokenOutOfRange { index: last, len: seq_len }),
            _ => Ok(()),
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x /= total;
    }
    w
}

/// `sum_i weights[i] * values[i, :]`, accumulated in index order.
pub fn weighted_sum(weights: &[f64], values: &[f64], d_head: usize) -> Vec<f64> {
    let mut out = vec![0.0; d_head];
    for (w, row) in weights.iter().zip(values.chunks_exact(d_head)) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += w * v;
        }
    }
    out
}

/// Attention weights over the whole history.
pub fn dense_weights(input: &AttnInput<'_>) -> Result<Vec<f64>> {
    let n = input.seq_len();
    if n == 0 {
        return Err(Error::EmptyContext);
    }
    let scores: Vec<f64> = (0..n).map(|i| input.score(i)).collect();
    Ok(softmax(&scores))
}

/// Standard attention: returns the output vector and the attention weights.
pub fn dense_attention(input: &AttnInput<'_>) -> Result<(Vec<f64>, Vec<f64>)> {
    let weights = dense_weights(input)?;
    let out = weighted_sum(&weights, input.values, input.d_head());
    Ok((out, weights))
}

/// Attention weights restricted to `set`, in the order of `set`.
pub fn sparse_weights(input: &AttnInput<'_>, set: &TokenSet) -> Result<Vec<f64>> {
    set.check_against(input.seq_len())?;
    let scores: Vec<f64> = set.indices().iter().map(|&i| input.score(i)).collect();
    Ok(softmax(&scores))
}

/// Attention over the rows named by `set` only.
pub fn sparse_attention(input: &AttnInput<'_>, set: &TokenSet) -> Result<Vec<f64>> {
    let weights = sparse_weights(input, set)?;
    let d = input.d_head();
    let mut out = vec![0.0; d];
    for (w, &i) in weights.iter().zip(set.indices()) {
        for (o, v) in out.iter_mut().zip(&input.values[i * d..(i + 1) * d]) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Indices of the `k` largest weights, ties going to the lower index,
/// returned ascending. `k` larger than the input is clamped.
pub fn args_top_k(weights: &[f64], k: usize) -> TokenSet {
    let k = k.min(weights.len());
    if k == 0 {
        return TokenSet::default();
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    let rank = |a: &usize, b: &usize| weights[*b].total_cmp(&weights[*a]).then(a.cmp(b));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, rank);
        order.truncate(k);
    }
    TokenSet::from_indices(order)
}

/// Averages each group of `group_size` consecutive query heads.
pub fn gqa_pool_queries(q_heads: &[Vec<f64>], group_size: usize) -> Result<Vec<Vec<f64>>> {
    if group_size == 0 || q_heads.len() % group_size != 0 {
        return Err(Error::Config(format!(
            "{} query heads cannot be pooled in groups of {group_size}",
            q_heads.len()
        )));
    }
    let pooled = q_heads
        .chunks(group_size)
        .map(|group| {
            let d = group[0].len();
            let mut mean = vec![0.0; d];
            for q in group {
                for (m, x) in mean.iter_mut().zip(q) {
                    *m += x;
                }
            }
            let n = group_size as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            mean
        })
        .collect();
    Ok(pooled)
}

/// Running state of a streaming softmax-weighted value sum.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxAccumulator<T> {
    pub o: Vec<T>,
    pub m: T,
    pub l: T,
}

impl<T: Float> SoftmaxAccumulator<T> {
    pub fn new(d_head: usize) -> Self {
        Self { o: vec![T::zero(); d_head], m: T::neg_infinity(), l: T::zero() }
    }

    /// Folds one block of scores and the matching value rows into the state.
    /// Scores of `-inf` act as masked slots.
    pub fn update(&mut self, scores: &[T], values: &[T]) {
        let d = self.o.len();
        debug_assert_eq!(scores.len() * d, values.len());
        let block_max = scores.iter().copied().fold(T::neg_infinity(), T::max);
        if block_max == T::neg_infinity() {
            return;
        }
        let m_new = self.m.max(block_max);
        let rescale = (self.m - m_new).exp();
        self.l = self.l * rescale;
        for o in &mut self.o {
            *o = *o * rescale;
        }
        for (s, row) in scores.iter().zip(values.chunks_exact(d)) {
            let p = (*s - m_new).exp();
            self.l = self.l + p;
            for (o, v) in self.o.iter_mut().zip(row) {
                *o = *o + p * *v;
            }
        }
        self.m = m_new;
    }

    pub fn is_empty(&self) -> bool {
        self.l == T::zero()
    }

    /// Normalized output `o / l`.
    pub fn output(&self) -> Vec<T> {
        self.o.iter().map(|&o| o / self.l).collect()
    }

    /// `log(l) + m`.
    pub fn log_sum_exp(&self) -> T {
        self.l.ln() + self.m
    }
}
