//! Query-group layout, the denoising attention mask, and masked multi-head
//! attention applied separately to each query group.
//!
//! Each group's combined query matrix stacks its `N` learnable queries first,
//! followed by `C` blocks of `K` noisy queries (one per ground-truth object):
//!
//! ```text
//! rows [0, N)                     learnable
//! rows [N + jK, N + (j+1)K)       noisy block j
//! ```
//!
//! Learnable rows see only learnable columns, so nothing derived from the
//! ground truth reaches the queries that get Hungarian-matched. Noisy rows see
//! the learnable columns and their own block.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VqdError};
use crate::numerics::{Graph, ParamId, ParameterStore, Tensor, Var};

/// Boolean `S x S` interaction mask with `S = K * C + N`; `true` permits the
/// row query to attend to the column key.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub num_learnable: usize,
    pub num_objects: usize,
    pub num_noisy_groups: usize,
    allow: Arc<Vec<bool>>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.num_learnable + self.num_objects * self.num_noisy_groups
    }

    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.allow[row * self.size() + col]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }

    pub(crate) fn shared(&self) -> &Arc<Vec<bool>> {
        &self.allow
    }

    /// Which block a row/column belongs to: `None` for learnable, `Some(j)` for noisy block `j`.
    pub fn block_of(&self, idx: usize) -> Option<usize> {
        if idx < self.num_learnable {
            None
        } else {
            Some((idx - self.num_learnable) / self.num_objects)
        }
    }

    pub fn allowed_in_row(&self, row: usize) -> usize {
        (0..self.size()).filter(|&c| self.allows(row, c)).count()
    }
}

/// Builds the mask for `N` learnable queries and `C` noisy blocks of `K`.
pub fn build_denoising_mask(num_learnable: usize, num_objects: usize, num_noisy_groups: usize) -> AttentionMask {
    assert!(num_learnable >= 1, "at least one learnable query is required");
    let (n, k) = (num_learnable, num_objects);
    let s = n + k * num_noisy_groups;
    let mut allow = vec![false; s * s];
    let block = |i: usize| if i < n { None } else { Some((i - n) / k) };
    for row in 0..s {
        for col in 0..s {
            allow[row * s + col] = match (block(row), block(col)) {
                (None, None) => true,
                (None, Some(_)) => false,
                (Some(_), None) => true,
                (Some(a), Some(b)) => a == b,
            };
        }
    }
    AttentionMask { num_learnable: n, num_objects: k, num_noisy_groups, allow: Arc::new(allow) }
}

/// Per-group combined queries `q_i` (each `S x D`) and their block counts.
#[derive(Clone, Debug)]
pub struct GroupQuerySet {
    pub groups: Vec<Var>,
    pub num_learnable: usize,
    pub num_objects: usize,
    pub num_noisy_groups: usize,
    pub width: usize,
}

impl GroupQuerySet {
    pub fn size(&self) -> usize {
        self.num_learnable + self.num_objects * self.num_noisy_groups
    }

    pub fn validate(&self, g: &Graph) -> Result<()> {
        for (i, &q) in self.groups.iter().enumerate() {
            if g.value(q).dims2() != (self.size(), self.width) {
                return Err(VqdError::Dimension(format!(
                    "group {i} has shape {:?}, expected [{}, {}]",
                    g.value(q).shape(),
                    self.size(),
                    self.width
                )));
            }
        }
        Ok(())
    }
}

/// Stacks a learnable block and its noisy blocks in order.
pub fn concat_group_queries(g: &mut Graph, learnable: Var, noisy: &[Var]) -> Result<Var> {
    let mut parts = Vec::with_capacity(1 + noisy.len());
    parts.push(learnable);
    parts.extend_from_slice(noisy);
    g.concat_rows(&parts)
}

/// Query, key, value and output projections of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttentionParams {
    pub fn register(store: &mut ParameterStore, prefix: &str, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut w = |name: &str| store.insert_glorot(&format!("{prefix}.{name}"), width, width, rng);
        let (wq, wk, wv, wo) = (w("wq"), w("wk"), w("wv"), w("wo"));
        let mut b = |name: &str| store.insert(&format!("{prefix}.{name}"), Tensor::zeros(&[width]));
        let (bq, bk, bv, bo) = (b("bq"), b("bk"), b("bv"), b("bo"));
        Self { wq, bq, wk, bk, wv, bv, wo, bo }
    }
}

pub struct AttentionOutput {
    pub output: Var,
    /// Attention weights averaged over heads (`rows x keys`), detached.
    pub attn_map: Tensor,
}

/// Scaled dot-product attention with `heads` heads. Disallowed logits are
/// excluded from the softmax, so their weights are exactly zero.
#[allow(clippy::too_many_arguments)]
pub fn multihead_attention(
    g: &mut Graph,
    store: &ParameterStore,
    p: &AttentionParams,
    query_in: Var,
    key_in: Var,
    value_in: Var,
    heads: usize,
    mask: Option<&AttentionMask>,
) -> Result<AttentionOutput> {
    let width = g.value(query_in).cols();
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(VqdError::Dimension(format!("width {width} not divisible by {heads} heads")));
    }
    let rows = g.value(query_in).rows();
    let keys = g.value(key_in).rows();
    if let Some(m) = mask {
        if m.size() != rows || m.size() != keys {
            return Err(VqdError::Dimension(format!("mask of size {} for {rows}x{keys} attention", m.size())));
        }
    }
    let head_dim = width / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let lin = |g: &mut Graph, x: Var, w: ParamId, b: ParamId| -> Result<Var> {
        let (w, b) = (g.param(store, w), g.param(store, b));
        g.linear(x, w, b)
    };
    let q = lin(g, query_in, p.wq, p.bq)?;
    let k = lin(g, key_in, p.wk, p.bk)?;
    let v = lin(g, value_in, p.wv, p.bv)?;

    let mut head_outputs = Vec::with_capacity(heads);
    let mut map = vec![0.0; rows * keys];
    for h in 0..heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim)?;
        let kh = g.slice_cols(k, h * head_dim, head_dim)?;
        let vh = g.slice_cols(v, h * head_dim, head_dim)?;
        let scores = g.matmul_bt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let weights = g.softmax_rows(scores, mask.map(AttentionMask::shared))?;
        for (m, w) in map.iter_mut().zip(g.value(weights).data()) {
            *m += w / heads as f64;
        }
        head_outputs.push(g.matmul(weights, vh)?);
    }
    let merged = g.concat_cols(&head_outputs)?;
    let output = lin(g, merged, p.wo, p.bo)?;
    Ok(AttentionOutput { output, attn_map: Tensor::matrix(rows, keys, map)? })
}

/// Self-attention of one combined query matrix under `mask`.
pub fn masked_multihead_self_attention(
    g: &mut Graph,
    store: &ParameterStore,
    p: &AttentionParams,
    q_i: Var,
    mask: &AttentionMask,
    heads: usize,
) -> Result<AttentionOutput> {
    multihead_attention(g, store, p, q_i, q_i, q_i, heads, Some(mask))
}

/// Applies the same masked self-attention to every group independently;
/// group `i`'s output is a function of `q_i` alone.
pub fn separated_group_attention(
    g: &mut Graph,
    store: &ParameterStore,
    queries: &GroupQuerySet,
    mask: &AttentionMask,
    p: &AttentionParams,
    heads: usize,
) -> Result<Vec<AttentionOutput>> {
    queries.validate(g)?;
    queries
        .groups
        .iter()
        .map(|&q| masked_multihead_self_attention(g, store, p, q, mask, heads))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn mask_example_small() {
        let m = build_denoising_mask(2, 1, 2);
        assert_eq!(m.size(), 4);
        let rows: Vec<Vec<u8>> = (0..4).map(|r| (0..4).map(|c| m.allows(r, c) as u8).collect()).collect();
        assert_eq!(rows, vec![vec![1, 1, 0, 0], vec![1, 1, 0, 0], vec![1, 1, 1, 0], vec![1, 1, 0, 1]]);
    }

    #[test]
    fn mask_without_noise_is_full() {
        let m = build_denoising_mask(5, 3, 0);
        assert_eq!(m.size(), 5);
        assert!(m.as_slice().iter().all(|&a| a));
    }

    #[test]
    fn concat_examples() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let alone = concat_group_queries(&mut g, l, &[]).unwrap();
        assert_eq!(g.value(alone), g.value(l));
        let n = g.constant(Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap());
        let q = concat_group_queries(&mut g, l, &[n]).unwrap();
        assert_eq!(g.value(q).data(), &[1.0, 2.0, 3.0, 4.0]);
        let bad = g.constant(Tensor::zeros(&[1, 3]));
        assert!(concat_group_queries(&mut g, l, &[bad]).is_err());
    }

    fn setup(width: usize) -> (ParameterStore, AttentionParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParameterStore::new(11);
        let p = AttentionParams::register(&mut store, "attn", width, &mut rng);
        (store, p)
    }

    #[test]
    fn single_query_attends_to_itself() {
        let (store, p) = setup(4);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.3, -0.1, 0.8, 0.2]]).unwrap());
        let mask = build_denoising_mask(1, 0, 0);
        let out = masked_multihead_self_attention(&mut g, &store, &p, x, &mask, 2).unwrap();
        assert_eq!(out.attn_map.data(), &[1.0]);
        // value projection followed by the output projection
        let wv = g.param(&store, p.wv);
        let bv = g.param(&store, p.bv);
        let v = g.linear(x, wv, bv).unwrap();
        let wo = g.param(&store, p.wo);
        let bo = g.param(&store, p.bo);
        let expect = g.linear(v, wo, bo).unwrap();
        assert_eq!(g.value(out.output), g.value(expect));
    }

    #[test]
    fn width_must_divide_heads() {
        let (store, p) = setup(4);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4]));
        assert!(multihead_attention(&mut g, &store, &p, x, x, x, 3, None).is_err());
    }
}
