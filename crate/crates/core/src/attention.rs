//! Scaled dot-product attention and the key/value swap between two passes.
//!
//! Every entry point funnels through [`attend`], so a swap that is handed the
//! pass's own keys and values reproduces plain self-attention bit for bit.

use std::collections::BTreeMap;

use crate::embedding::ContextualEmbedding;
use crate::error::{Error, Result};
use crate::masking::BinaryMask;
use crate::numerics::{matmul, softmax_rows, Matrix};

/// Single-head projections. `query` is `h x d`; `key` and `value` are
/// `src x d`, with `src` the latent width for self-attention and the
/// context width for cross-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    query: Matrix,
    key: Matrix,
    value: Matrix,
}

impl AttentionWeights {
    pub fn new(query: Matrix, key: Matrix, value: Matrix) -> Result<Self> {
        let d = query.cols();
        if key.cols() != d || value.cols() != d {
            return Err(Error::Dimension(format!(
                "projection widths differ: W_Q {}x{}, W_K {}x{}, W_V {}x{}",
                query.rows(),
                query.cols(),
                key.rows(),
                key.cols(),
                value.rows(),
                value.cols()
            )));
        }
        if key.rows() != value.rows() {
            return Err(Error::shapes("W_K vs W_V", key.shape(), value.shape()));
        }
        if d == 0 {
            return Err(Error::Dimension("attention dimension must be positive".into()));
        }
        Ok(Self { query, key, value })
    }

    pub fn query(&self) -> &Matrix {
        &self.query
    }

    pub fn key(&self) -> &Matrix {
        &self.key
    }

    pub fn value(&self) -> &Matrix {
        &self.value
    }

    /// Projection dimension `d`.
    pub fn dim(&self) -> usize {
        self.query.cols()
    }

    pub fn source_dim(&self) -> usize {
        self.key.rows()
    }

    pub(crate) fn zeroed(&self) -> Self {
        Self {
            query: Matrix::zeros(self.query.rows(), self.query.cols()),
            key: Matrix::zeros(self.key.rows(), self.key.cols()),
            value: Matrix::zeros(self.value.rows(), self.value.cols()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    SelfAttention,
    Cross,
}

/// One attention map captured during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    /// Executed step, counting from 1 at the noisiest latent.
    pub step: usize,
    pub timestep: usize,
    pub kind: AttentionKind,
    /// Latent grid `(H, W)` the map's rows are laid out on.
    pub grid: (usize, usize),
    /// `M_S` (`l x l`) for self-attention, `M_C` (`l x l_c`) for cross-attention.
    pub map: Matrix,
    /// Keys and values, kept only for designated swap layers.
    pub key: Option<Matrix>,
    pub value: Option<Matrix>,
}

/// Donor keys/values captured at one timestep, plus the subject mask the
/// recipient applies them under.
#[derive(Debug, Clone, PartialEq)]
pub struct SwapBuffer {
    timestep: usize,
    layers: BTreeMap<usize, (Matrix, Matrix)>,
    mask: BinaryMask,
}

impl SwapBuffer {
    pub fn new(timestep: usize, mask: BinaryMask) -> Self {
        Self { timestep, layers: BTreeMap::new(), mask }
    }

    pub fn insert(&mut self, layer: usize, key: Matrix, value: Matrix) {
        self.layers.insert(layer, (key, value));
    }

    /// Timestep of the donor pass that filled the buffer.
    pub fn timestep(&self) -> usize {
        self.timestep
    }

    pub fn layer(&self, layer: usize) -> Option<(&Matrix, &Matrix)> {
        self.layers.get(&layer).map(|(k, v)| (k, v))
    }

    pub fn layer_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.keys().copied()
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub output: Matrix,
    /// Row-stochastic attention map, `l x l` or `l x l_c`.
    pub map: Matrix,
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
}

/// `softmax(Q Kᵀ / sqrt(d)) V`, returning the output and the map.
pub fn attend(query: &Matrix, key: &Matrix, value: &Matrix) -> Result<(Matrix, Matrix)> {
    if query.cols() != key.cols() {
        return Err(Error::shapes("Q vs K", query.shape(), key.shape()));
    }
    if key.rows() != value.rows() {
        return Err(Error::shapes("K vs V", key.shape(), value.shape()));
    }
    let scores = matmul(query, &key.transpose())?;
    let map = softmax_rows(&scores, 1.0 / (query.cols() as f64).sqrt());
    let output = matmul(&map, value)?;
    Ok((output, map))
}

fn project(features: &Matrix, query_src: &Matrix, kv_src: &Matrix, w: &AttentionWeights) -> Result<AttentionOutput> {
    let query = matmul(query_src, &w.query)?;
    let key = matmul(kv_src, &w.key)?;
    let value = matmul(kv_src, &w.value)?;
    let (output, map) = attend(&query, &key, &value)?;
    debug_assert_eq!(output.rows(), features.rows());
    Ok(AttentionOutput { output, map, query, key, value })
}

/// Latent features attend over the contextual embedding.
pub fn cross_attention(features: &Matrix, context: &ContextualEmbedding, w: &AttentionWeights) -> Result<AttentionOutput> {
    if context.is_empty() {
        return Err(Error::EmptyContext);
    }
    if features.cols() != w.query.rows() {
        return Err(Error::shapes("features vs W_Q", features.shape(), w.query.shape()));
    }
    if context.dim() != w.key.rows() {
        return Err(Error::shapes("context vs W_K", context.rows().shape(), w.key.shape()));
    }
    project(features, features, context.rows(), w)
}

/// Latent features attend over themselves.
pub fn self_attention(features: &Matrix, w: &AttentionWeights) -> Result<AttentionOutput> {
    if features.cols() != w.query.rows() || features.cols() != w.key.rows() {
        return Err(Error::shapes("features vs W_Q/W_K", features.shape(), w.query.shape()));
    }
    project(features, features, features, w)
}

fn check_donor(query: &Matrix, donor_key: &Matrix, donor_value: &Matrix) -> Result<()> {
    if donor_key.shape() != query.shape() {
        return Err(Error::DualShape { main: query.shape(), donor: donor_key.shape() });
    }
    if donor_value.rows() != query.rows() {
        return Err(Error::DualShape { main: query.shape(), donor: donor_value.shape() });
    }
    Ok(())
}

/// Main-pass queries against donor keys and values: `softmax(Q K'ᵀ/√d) V'`.
/// Returns the output and the cross-process map.
pub fn attn_swap(query: &Matrix, donor_key: &Matrix, donor_value: &Matrix) -> Result<(Matrix, Matrix)> {
    check_donor(query, donor_key, donor_value)?;
    attend(query, donor_key, donor_value)
}

/// Rows where `mask` is 1 take the swapped output, the others keep the
/// pass's own self-attention. Rows are copied, never blended, so each row
/// is bit-identical to the endpoint it came from.
pub fn masked_attn_swap(
    query: &Matrix,
    key: &Matrix,
    value: &Matrix,
    donor_key: &Matrix,
    donor_value: &Matrix,
    mask: &[f64],
) -> Result<Matrix> {
    check_donor(query, donor_key, donor_value)?;
    if mask.len() != query.rows() {
        return Err(Error::Dimension(format!(
            "mask has {} entries for {} latent pixels",
            mask.len(),
            query.rows()
        )));
    }
    if let Some((index, &value)) = mask.iter().enumerate().find(|(_, &m)| m != 0.0 && m != 1.0) {
        return Err(Error::Mask { index, value });
    }
    let (own, _) = attend(query, key, value)?;
    if mask.iter().all(|&m| m == 0.0) {
        return Ok(own);
    }
    let (swapped, _) = attend(query, donor_key, donor_value)?;
    let mut out = own;
    for (i, &m) in mask.iter().enumerate() {
        if m == 1.0 {
            out.row_mut(i).copy_from_slice(swapped.row(i));
        }
    }
    Ok(out)
}
