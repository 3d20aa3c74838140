//! Toy text and image encoders plus composition of the contextual embedding.
//!
//! The encoders are seeded random maps with no semantics. What matters
//! downstream is the token layout: visual rows first, then textual rows,
//! each carrying its origin so roles can be looked up after composition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, mix, Matrix, SeededRng};

pub const DEFAULT_VOCAB_SIZE: u32 = 65_536;
pub const DEFAULT_VISUAL_TOKENS: usize = 4;
/// Width of the pooled per-strip image descriptor.
pub const DESCRIPTOR_LEN: usize = 16;

// Stream id for the visual mapper weights; above any valid token id.
const VISUAL_MAPPER_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    Subject,
    ClassName,
    Article,
    Padding,
    Special,
    Regular,
}

impl TokenRole {
    pub const ALL: [TokenRole; 6] = [
        TokenRole::Subject,
        TokenRole::ClassName,
        TokenRole::Article,
        TokenRole::Padding,
        TokenRole::Special,
        TokenRole::Regular,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TokenRole::Subject => "subject",
            TokenRole::ClassName => "class_name",
            TokenRole::Article => "article",
            TokenRole::Padding => "padding",
            TokenRole::Special => "special",
            TokenRole::Regular => "regular",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextToken {
    pub id: u32,
    pub role: TokenRole,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    tokens: Vec<TextToken>,
    dim: usize,
}

impl TextEmbedding {
    /// Assembles an embedding from explicit vectors. At most one subject
    /// token is allowed and every vector must have length `dim`.
    pub fn from_tokens(tokens: Vec<TextToken>, dim: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("text embedding needs at least one token"));
        }
        for (i, t) in tokens.iter().enumerate() {
            if t.vector.len() != dim {
                return Err(Error::Dimension(format!(
                    "text token {i} has length {}, expected {dim}",
                    t.vector.len()
                )));
            }
            if t.vector.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { index: i });
            }
        }
        let subjects = tokens.iter().filter(|t| t.role == TokenRole::Subject).count();
        if subjects > 1 {
            return Err(Error::Parameter {
                name: "prompt",
                reason: format!("{subjects} subject tokens, at most one allowed"),
            });
        }
        Ok(Self { tokens, dim })
    }

    pub fn tokens(&self) -> &[TextToken] {
        &self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualEmbedding {
    tokens: Matrix,
}

impl VisualEmbedding {
    pub fn new(tokens: Matrix) -> Result<Self> {
        if tokens.rows() == 0 {
            return Err(Error::EmptyInput("visual embedding needs at least one token"));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

/// Seeded stand-in for a pretrained text encoder: token id `k` always maps
/// to the first `dim` Gaussians of the stream `mix(seed, k)`, scaled by
/// `1/sqrt(dim)`.
#[derive(Debug, Clone, Copy)]
pub struct TextEncoder {
    pub dim: usize,
    pub seed: u64,
    pub vocab_size: u32,
}

impl TextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed, vocab_size: DEFAULT_VOCAB_SIZE }
    }

    pub fn token_vector(&self, id: u32) -> Vec<f64> {
        let scale = 1.0 / (self.dim as f64).sqrt();
        let mut rng = SeededRng::new(mix(self.seed, u64::from(id)));
        (0..self.dim).map(|_| rng.gaussian() * scale).collect()
    }

    pub fn encode(&self, prompt: &[(u32, TokenRole)]) -> Result<TextEmbedding> {
        if prompt.is_empty() {
            return Err(Error::EmptyInput("prompt has no tokens"));
        }
        if let Some(&(id, _)) = prompt.iter().find(|(id, _)| *id >= self.vocab_size) {
            return Err(Error::Parameter {
                name: "token id",
                reason: format!("{id} >= vocabulary size {}", self.vocab_size),
            });
        }
        let tokens = prompt
            .iter()
            .map(|&(id, role)| TextToken { id, role, vector: self.token_vector(id) })
            .collect();
        TextEmbedding::from_tokens(tokens, self.dim)
    }
}

/// Seeded stand-in for the image-to-embedding mapper. The image is cut into
/// `tokens` horizontal strips; each strip is average-pooled into a
/// [`DESCRIPTOR_LEN`]-wide descriptor and sent through a fixed linear map.
#[derive(Debug, Clone, Copy)]
pub struct VisualEncoder {
    pub dim: usize,
    pub tokens: usize,
    pub seed: u64,
}

impl VisualEncoder {
    pub fn new(dim: usize, tokens: usize, seed: u64) -> Self {
        Self { dim, tokens, seed }
    }

    /// `DESCRIPTOR_LEN x dim` mapper weights, scaled by 1/4.
    pub fn mapper(&self) -> Matrix {
        SeededRng::new(mix(self.seed, VISUAL_MAPPER_STREAM)).gaussian_matrix(DESCRIPTOR_LEN, self.dim, 0.25)
    }

    pub fn encode(&self, image: &Matrix) -> Result<VisualEmbedding> {
        let (height, width) = image.shape();
        if self.tokens == 0 || height == 0 || width == 0 || height % self.tokens != 0 {
            return Err(Error::Dimension(format!(
                "{height}x{width} image cannot be split into {} equal strips",
                self.tokens
            )));
        }
        let strip = height / self.tokens;
        let mut descriptors = Vec::with_capacity(self.tokens * DESCRIPTOR_LEN);
        for s in 0..self.tokens {
            for b in 0..DESCRIPTOR_LEN {
                // adaptive pooling bounds: [floor(b*W/n), ceil((b+1)*W/n))
                let c0 = b * width / DESCRIPTOR_LEN;
                let c1 = ((b + 1) * width).div_ceil(DESCRIPTOR_LEN);
                let mut sum = 0.0;
                for r in s * strip..(s + 1) * strip {
                    for c in c0..c1 {
                        sum += image.get(r, c);
                    }
                }
                descriptors.push(sum / (strip * (c1 - c0)) as f64);
            }
        }
        let pooled = Matrix::from_raw(self.tokens, DESCRIPTOR_LEN, descriptors);
        VisualEmbedding::new(matmul(&pooled, &self.mapper())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    Full,
    VisualOnly,
    TextualOnly,
}

impl ContextMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ContextMode::Full => "full",
            ContextMode::VisualOnly => "visual_only",
            ContextMode::TextualOnly => "textual_only",
        }
    }
}

/// Origin of one contextual-embedding row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Visual(usize),
    Textual { index: usize, role: TokenRole },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextualEmbedding {
    mode: ContextMode,
    rows: Matrix,
    slots: Vec<Slot>,
}

impl ContextualEmbedding {
    pub fn mode(&self) -> ContextMode {
        self.mode
    }

    pub fn rows(&self) -> &Matrix {
        &self.rows
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    /// Row indices of textual tokens whose role is in `roles`.
    pub fn slots_with_roles(&self, roles: &[TokenRole]) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| match s {
                Slot::Textual { role, .. } if roles.contains(role) => Some(i),
                _ => None,
            })
            .collect()
    }

    #[cfg(test)]
    pub(crate) fn empty(mode: ContextMode, dim: usize) -> Self {
        Self { mode, rows: Matrix::zeros(0, dim), slots: Vec::new() }
    }

    pub(crate) fn with_rows(&self, rows: Matrix) -> Self {
        debug_assert_eq!(rows.shape(), self.rows.shape());
        Self { mode: self.mode, rows, slots: self.slots.clone() }
    }
}

/// Concatenates `[v; t]` according to `mode`. Absent parts are omitted, not
/// zero-filled, so the sequence simply gets shorter.
pub fn compose_context(
    visual: Option<&VisualEmbedding>,
    text: Option<&TextEmbedding>,
    mode: ContextMode,
) -> Result<ContextualEmbedding> {
    let (visual, text) = match mode {
        ContextMode::Full => (
            Some(visual.ok_or(Error::Mode { mode: "full", missing: "a visual embedding" })?),
            Some(text.ok_or(Error::Mode { mode: "full", missing: "a text embedding" })?),
        ),
        ContextMode::VisualOnly => (
            Some(visual.ok_or(Error::Mode { mode: "visual_only", missing: "a visual embedding" })?),
            None,
        ),
        ContextMode::TextualOnly => (
            None,
            Some(text.ok_or(Error::Mode { mode: "textual_only", missing: "a text embedding" })?),
        ),
    };
    if let (Some(v), Some(t)) = (visual, text) {
        if v.dim() != t.dim() {
            return Err(Error::Dimension(format!(
                "visual width {} vs text width {}",
                v.dim(),
                t.dim()
            )));
        }
    }
    let dim = visual.map(VisualEmbedding::dim).or(text.map(TextEmbedding::dim)).unwrap_or(0);
    let mut data = Vec::new();
    let mut slots = Vec::new();
    if let Some(v) = visual {
        data.extend_from_slice(v.tokens().data());
        slots.extend((0..v.len()).map(Slot::Visual));
    }
    if let Some(t) = text {
        for (index, token) in t.tokens().iter().enumerate() {
            data.extend_from_slice(&token.vector);
            slots.push(Slot::Textual { index, role: token.role });
        }
    }
    Ok(ContextualEmbedding { mode, rows: Matrix::from_raw(slots.len(), dim, data), slots })
}
