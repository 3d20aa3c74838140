//! Subject masks derived from cross-attention maps.

use crate::attention::{AttentionKind, AttentionRecord};
use crate::error::{Error, Result};
use crate::numerics::{resample_nearest, Matrix};
use crate::Warning;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Binary mask over a `height x width` grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Dimension(format!(
                "{height}x{width} mask needs {} entries, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![true; height * width] }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    /// Nonzero entries become 1.
    pub fn from_matrix(m: &Matrix) -> Self {
        Self { height: m.rows(), width: m.cols(), bits: m.data().iter().map(|&x| x != 0.0).collect() }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.contains(&true)
    }

    pub fn coverage(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.bits.len() as f64
        }
    }

    /// 0/1 weights in row-major pixel order.
    pub fn weights(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_raw(self.height, self.width, self.weights())
    }

    pub fn resample(&self, height: usize, width: usize) -> Result<Self> {
        Ok(Self::from_matrix(&resample_nearest(&self.to_matrix(), height, width)?))
    }
}

/// Binarized subject saliency together with the step it was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectMask {
    pub mask: BinaryMask,
    /// Executed step whose cross-attention produced the mask; 0 when no
    /// records were available.
    pub source_step: usize,
    pub coverage: f64,
}

impl SubjectMask {
    pub fn new(mask: BinaryMask, source_step: usize) -> Self {
        let coverage = mask.coverage();
        Self { mask, source_step, coverage }
    }
}

/// Averages the subject columns of every cross-attention map, brings each
/// layer's map to the reference grid, averages across layers and min-max
/// normalizes to `[0, 1]`. A constant map normalizes to zeros.
pub fn aggregate_subject_saliency(
    records: &[&AttentionRecord],
    subject_slots: &[usize],
    ref_height: usize,
    ref_width: usize,
) -> Result<Matrix> {
    if subject_slots.is_empty() {
        return Err(Error::Parameter { name: "subject slots", reason: "no subject columns selected".into() });
    }
    let cross: Vec<&AttentionRecord> = records.iter().copied().filter(|r| r.kind == AttentionKind::Cross).collect();
    if cross.is_empty() {
        return Err(Error::MissingRecord);
    }
    let mut total = vec![0.0; ref_height * ref_width];
    for record in &cross {
        let (h, w) = record.grid;
        if h * w != record.map.rows() {
            return Err(Error::Dimension(format!(
                "layer {} map has {} rows for a {h}x{w} grid",
                record.layer,
                record.map.rows()
            )));
        }
        if let Some(&bad) = subject_slots.iter().find(|&&s| s >= record.map.cols()) {
            return Err(Error::Dimension(format!(
                "subject slot {bad} outside a context of length {}",
                record.map.cols()
            )));
        }
        let column: Vec<f64> = record
            .map
            .iter_rows()
            .map(|row| subject_slots.iter().map(|&s| row[s]).sum::<f64>() / subject_slots.len() as f64)
            .collect();
        let layer_map = resample_nearest(&Matrix::from_raw(h, w, column), ref_height, ref_width)?;
        for (t, x) in total.iter_mut().zip(layer_map.data()) {
            *t += x;
        }
    }
    let n = cross.len() as f64;
    total.iter_mut().for_each(|t| *t /= n);
    let lo = total.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = total.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let normalized = if hi > lo {
        total.iter().map(|&x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; total.len()]
    };
    Ok(Matrix::from_raw(ref_height, ref_width, normalized))
}

/// `m_i = 1` iff `saliency_i >= threshold`. An empty result comes back with
/// a warning; it is still a valid mask.
pub fn binarize(saliency: &Matrix, threshold: f64, source_step: usize) -> Result<(SubjectMask, Option<Warning>)> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Parameter { name: "threshold", reason: format!("{threshold} outside [0, 1]") });
    }
    let bits = saliency.data().iter().map(|&s| s >= threshold).collect();
    let mask = SubjectMask::new(BinaryMask::new(saliency.rows(), saliency.cols(), bits)?, source_step);
    let warning = mask.mask.is_empty().then(|| {
        log::warn!("subject mask from step {source_step} is empty; swap is a no-op there");
        Warning::EmptyMask { step: source_step }
    });
    Ok((mask, warning))
}
