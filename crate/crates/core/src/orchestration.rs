//! Orthogonal visual embeddings.
//!
//! The included textual tokens are orthonormalized by Gram-Schmidt in prompt
//! order, and each visual token is split into the part inside their span and
//! the part orthogonal to it. Only the orthogonal part is kept in the
//! orchestrated context; textual rows are left alone.

use crate::embedding::{ContextMode, ContextualEmbedding, Slot, TextEmbedding, TokenRole};
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix};

/// Relative residual below which a textual token counts as linearly dependent.
pub const DEFAULT_DROP_TOLERANCE: f64 = 1e-10;
/// `‖v⊥‖ < COLLAPSE_RATIO·‖v‖` is reported as a collapse.
pub const COLLAPSE_RATIO: f64 = 1e-6;

pub const DEFAULT_EXCLUDED_ROLES: [TokenRole; 5] = [
    TokenRole::Subject,
    TokenRole::ClassName,
    TokenRole::Article,
    TokenRole::Padding,
    TokenRole::Special,
];

/// Orthonormal basis of the textual subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalBasis {
    vectors: Vec<Vec<f64>>,
    sources: Vec<usize>,
    excluded: Vec<usize>,
    dropped: Vec<usize>,
    dim: usize,
}

impl OrthogonalBasis {
    pub fn empty(dim: usize) -> Self {
        Self { vectors: Vec::new(), sources: Vec::new(), excluded: Vec::new(), dropped: Vec::new(), dim }
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    /// Text token index behind each basis vector.
    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    /// Text tokens skipped because of their role.
    pub fn excluded(&self) -> &[usize] {
        &self.excluded
    }

    /// Text tokens skipped as numerically dependent on earlier ones.
    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// `Σ_j ⟨t̄_j, v⟩ t̄_j`.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for q in &self.vectors {
            let c = dot(q, v);
            for (o, qi) in out.iter_mut().zip(q) {
                *o += c * qi;
            }
        }
        out
    }
}

fn subtract_projection(basis: &[Vec<f64>], v: &mut [f64]) {
    // classical Gram-Schmidt: all coefficients from the same vector
    let coeffs: Vec<f64> = basis.iter().map(|q| dot(q, v)).collect();
    for (q, c) in basis.iter().zip(coeffs) {
        for (x, qi) in v.iter_mut().zip(q) {
            *x -= c * qi;
        }
    }
}

/// Gram-Schmidt over the text tokens whose role is not in `excluded`, in
/// prompt order. The projection is applied twice per token so the basis
/// stays orthonormal to working precision even for nearly dependent tokens.
pub fn build_basis(text: &TextEmbedding, excluded: &[TokenRole], drop_tolerance: f64) -> Result<OrthogonalBasis> {
    if !(drop_tolerance > 0.0 && drop_tolerance.is_finite()) {
        return Err(Error::Parameter {
            name: "drop_tolerance",
            reason: format!("must be positive and finite, got {drop_tolerance}"),
        });
    }
    let mut basis = OrthogonalBasis::empty(text.dim());
    for (index, token) in text.tokens().iter().enumerate() {
        if excluded.contains(&token.role) {
            basis.excluded.push(index);
            continue;
        }
        let original = norm(&token.vector);
        let mut residual = token.vector.clone();
        subtract_projection(&basis.vectors, &mut residual);
        subtract_projection(&basis.vectors, &mut residual);
        let remaining = norm(&residual);
        if original == 0.0 || remaining < drop_tolerance * original {
            basis.dropped.push(index);
            continue;
        }
        residual.iter_mut().for_each(|x| *x /= remaining);
        basis.vectors.push(residual);
        basis.sources.push(index);
    }
    Ok(basis)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub orthogonal: Vec<f64>,
    pub parallel: Vec<f64>,
    /// Set when almost nothing survives the projection. The value is still
    /// returned as computed.
    pub collapsed: bool,
}

pub fn orthogonalize(v: &[f64], basis: &OrthogonalBasis) -> Result<Decomposition> {
    if v.len() != basis.dim {
        return Err(Error::Dimension(format!(
            "visual token has length {}, basis lives in dimension {}",
            v.len(),
            basis.dim
        )));
    }
    let parallel = basis.project(v);
    let orthogonal: Vec<f64> = v.iter().zip(&parallel).map(|(a, b)| a - b).collect();
    let collapsed = norm(&orthogonal) < COLLAPSE_RATIO * norm(v);
    Ok(Decomposition { orthogonal, parallel, collapsed })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Orchestrated {
    pub context: ContextualEmbedding,
    /// Visual token indices whose orthogonal component collapsed.
    pub collapsed: Vec<usize>,
}

/// Replaces every visual row of a full context by its orthogonal component.
pub fn orchestrate(context: &ContextualEmbedding, basis: &OrthogonalBasis) -> Result<Orchestrated> {
    if context.mode() != ContextMode::Full {
        return Err(Error::Mode { mode: context.mode().as_str(), missing: "full mode for orchestration" });
    }
    if context.dim() != basis.dim {
        return Err(Error::Dimension(format!(
            "context width {} vs basis dimension {}",
            context.dim(),
            basis.dim
        )));
    }
    let mut rows: Matrix = context.rows().clone();
    let mut collapsed = Vec::new();
    for (r, slot) in context.slots().iter().enumerate() {
        if let Slot::Visual(vi) = *slot {
            let d = orthogonalize(context.rows().row(r), basis)?;
            if d.collapsed {
                collapsed.push(vi);
            }
            rows.row_mut(r).copy_from_slice(&d.orthogonal);
        }
    }
    Ok(Orchestrated { context: context.with_rows(rows), collapsed })
}
