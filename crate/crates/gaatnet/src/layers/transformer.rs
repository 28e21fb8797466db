//! Transformer encoder with a distant-neighbor additive attention bias.
//!
//! The bias is one learned scalar per node, computed from the mean
//! embedding of that node's sampled exact-g-hop neighbors, and added on
//! the key side of every self-attention score matrix (attending *to* node
//! j is boosted by j's distant-neighborhood signal).

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{SparseMat, Tensor};
use crate::graph::DistantSampleTable;

use super::DropoutCfg;

#[derive(Clone)]
pub struct DistantBiasParams {
    /// d_m x 1 linear map.
    pub weight: Tensor,
    /// 1 x 1 offset.
    pub bias: Tensor,
}

/// Row-averaging matrix over each node's sampled distant neighbors; nodes
/// without samples get a zero row.
pub fn distant_mean_matrix(table: &DistantSampleTable, num_nodes: usize) -> Rc<SparseMat> {
    assert_eq!(table.samples.len(), num_nodes, "table/node count mismatch");
    let rows: Vec<Vec<(u32, f64)>> = table
        .samples
        .iter()
        .map(|samples| {
            if samples.is_empty() {
                Vec::new()
            } else {
                let w = 1.0 / samples.len() as f64;
                samples.iter().map(|&j| (j, w)).collect()
            }
        })
        .collect();
    Rc::new(SparseMat::from_rows(num_nodes, &rows))
}

/// Per-node bias b_i = Linear(mean of distant-neighbor rows of `z`).
pub fn distant_bias(z: &Tensor, mean_mat: &Rc<SparseMat>, params: &DistantBiasParams) -> Tensor {
    assert_eq!(params.bias.shape(), (1, 1), "distant bias offset is 1x1");
    let z_dist = Tensor::fixed_spmm(mean_mat, z);
    z_dist.matmul(&params.weight).add_row_broadcast(&params.bias)
}

#[derive(Clone)]
pub struct TransformerLayerParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_a_weight: Tensor,
    pub ffn_a_bias: Tensor,
    pub ffn_b_weight: Tensor,
    pub ffn_b_bias: Tensor,
    pub ln_attn_scale: Tensor,
    pub ln_attn_shift: Tensor,
    pub ln_ffn_scale: Tensor,
    pub ln_ffn_shift: Tensor,
}

#[derive(Clone)]
pub struct TransformerParams {
    pub layers: Vec<TransformerLayerParams>,
    pub heads: usize,
}

const LN_EPS: f64 = 1e-5;

/// Multi-head self-attention with an optional key-side additive bias:
/// per head, softmax(Q K^T / sqrt(d_k) + B) V with B_ij = b_j, heads
/// concatenated and output-projected.
pub fn biased_attention(
    z: &Tensor,
    bias: Option<&Tensor>,
    layer: &TransformerLayerParams,
    heads: usize,
) -> Tensor {
    let (n, d_m) = z.shape();
    assert!(heads >= 1 && d_m % heads == 0, "d_m must divide into heads");
    if let Some(b) = bias {
        assert_eq!(b.shape(), (n, 1), "bias must be n x 1");
    }
    let d_k = d_m / heads;
    let q = z.matmul(&layer.wq);
    let k = z.matmul(&layer.wk);
    let v = z.matmul(&layer.wv);
    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * d_k, (h + 1) * d_k);
        outputs.push(Tensor::attention_head(
            &q.slice_cols(lo, hi),
            &k.slice_cols(lo, hi),
            &v.slice_cols(lo, hi),
            bias,
        ));
    }
    Tensor::concat_cols(&outputs).matmul(&layer.wo)
}

/// Stacked encoder layers; each applies biased self-attention and a GELU
/// FFN, both behind residual + LayerNorm, with dropout on each sublayer
/// output. The same bias vector is applied in every layer.
pub fn transformer_encoder(
    z: &Tensor,
    bias: Option<&Tensor>,
    params: &TransformerParams,
    dropout: DropoutCfg,
    rng: &mut impl Rng,
) -> Tensor {
    let mut h = z.clone();
    for layer in &params.layers {
        let attn = biased_attention(&h, bias, layer, params.heads)
            .dropout(dropout.rate, dropout.train, rng);
        h = h
            .add(&attn)
            .layer_norm(&layer.ln_attn_scale, &layer.ln_attn_shift, LN_EPS);
        let ffn = h
            .matmul(&layer.ffn_a_weight)
            .add_row_broadcast(&layer.ffn_a_bias)
            .gelu()
            .matmul(&layer.ffn_b_weight)
            .add_row_broadcast(&layer.ffn_b_bias)
            .dropout(dropout.rate, dropout.train, rng);
        h = h
            .add(&ffn)
            .layer_norm(&layer.ln_ffn_scale, &layer.ln_ffn_shift, LN_EPS);
    }
    h
}
