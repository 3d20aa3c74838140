//! Masked image-alignment scores and the ablation report.
//!
//! Both images are restricted to their own subject masks before features
//! are extracted, so content outside the subject (new objects, background)
//! does not move the score. The bundled extractor is a normalized intensity
//! histogram; real feature networks plug in through [`FeatureExtractor`].

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::masking::BinaryMask;
use crate::numerics::{dot, Matrix};
use crate::sampler::Variant;
use crate::Warning;

pub trait FeatureExtractor {
    fn name(&self) -> &str;

    /// Features of the masked pixels of `image`. Must return a vector of
    /// fixed length, zero when the mask is empty.
    fn extract(&self, image: &Matrix, mask: &BinaryMask) -> Vec<f64>;
}

/// L2-normalized intensity histogram over the masked pixels. Intensities are
/// rescaled to the masked region's own min/max before binning.
#[derive(Debug, Clone, Copy)]
pub struct HistogramExtractor {
    pub bins: usize,
}

impl Default for HistogramExtractor {
    fn default() -> Self {
        Self { bins: 64 }
    }
}

impl FeatureExtractor for HistogramExtractor {
    fn name(&self) -> &str {
        "histogram"
    }

    fn extract(&self, image: &Matrix, mask: &BinaryMask) -> Vec<f64> {
        let mut hist = vec![0.0; self.bins];
        let values: Vec<f64> = image.data().iter().zip(mask.bits()).filter(|(_, &m)| m).map(|(&x, _)| x).collect();
        if values.is_empty() {
            return hist;
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for x in values {
            let bin = if hi > lo { (((x - lo) / (hi - lo)) * self.bins as f64) as usize } else { 0 };
            hist[bin.min(self.bins - 1)] += 1.0;
        }
        let n = dot(&hist, &hist).sqrt();
        hist.iter_mut().for_each(|h| *h /= n);
        hist
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedImage {
    image: Matrix,
    mask: BinaryMask,
}

impl MaskedImage {
    pub fn new(image: Matrix, mask: BinaryMask) -> Result<Self> {
        if image.shape() != mask.shape() {
            return Err(Error::shapes("image vs mask", image.shape(), mask.shape()));
        }
        Ok(Self { image, mask })
    }

    pub fn unmasked(image: Matrix) -> Self {
        let mask = BinaryMask::full(image.rows(), image.cols());
        Self { image, mask }
    }

    pub fn image(&self) -> &Matrix {
        &self.image
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    /// Image with every pixel outside the mask set to zero.
    pub fn masked_pixels(&self) -> Matrix {
        let data = self.image.data().iter().zip(self.mask.bits()).map(|(&x, &m)| if m { x } else { 0.0 }).collect();
        Matrix::from_raw(self.image.rows(), self.image.cols(), data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedPair {
    pub reference: MaskedImage,
    pub generated: MaskedImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Similarity {
    pub value: f64,
    pub warning: Option<Warning>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    // sqrt(s*s) == s exactly, so identical inputs score exactly 1
    (dot(a, b) / (dot(a, a) * dot(b, b)).sqrt()).clamp(-1.0, 1.0)
}

pub fn masked_similarity(pair: &MaskedPair, extractor: &dyn FeatureExtractor) -> Result<Similarity> {
    let side = match (pair.reference.mask.is_empty(), pair.generated.mask.is_empty()) {
        (false, false) => None,
        (true, false) => Some("reference"),
        (false, true) => Some("generated"),
        (true, true) => Some("reference and generated"),
    };
    if let Some(side) = side {
        log::warn!("masked similarity with an empty {side} mask scores 0");
        return Ok(Similarity { value: 0.0, warning: Some(Warning::EmptyMetricMask { side }) });
    }
    let a = extractor.extract(&pair.reference.masked_pixels(), &pair.reference.mask);
    let b = extractor.extract(&pair.generated.masked_pixels(), &pair.generated.mask);
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("feature lengths {} vs {}", a.len(), b.len())));
    }
    if dot(&a, &a) == 0.0 || dot(&b, &b) == 0.0 {
        return Ok(Similarity { value: 0.0, warning: None });
    }
    Ok(Similarity { value: cosine(&a, &b), warning: None })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub variant: Variant,
    pub masked_sim: f64,
    pub unmasked_sim: f64,
    pub mask_coverage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<ReportRow>,
    pub warnings: Vec<(Variant, Warning)>,
}

pub const REPORT_HEADER: [&str; 4] = ["variant", "masked_sim", "unmasked_sim", "mask_coverage"];

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = REPORT_HEADER.join(",");
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.variant.name(), r.masked_sim, r.unmasked_sim, r.mask_coverage);
        }
        out
    }
}

/// One row per variant in table order. Each generated image is scored
/// against the reference under both masks and with no masks at all.
pub fn ablation_report(
    results: &[(Variant, MaskedImage)],
    reference: &MaskedImage,
    extractor: &dyn FeatureExtractor,
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(4);
    let mut warnings = Vec::new();
    for variant in Variant::ALL {
        let mut matching = results.iter().filter(|(v, _)| *v == variant);
        let (_, generated) = matching
            .next()
            .ok_or_else(|| Error::Report(format!("missing variant {}", variant.name())))?;
        if matching.next().is_some() {
            return Err(Error::Report(format!("variant {} given twice", variant.name())));
        }
        let masked = masked_similarity(
            &MaskedPair { reference: reference.clone(), generated: generated.clone() },
            extractor,
        )?;
        let unmasked = masked_similarity(
            &MaskedPair {
                reference: MaskedImage::unmasked(reference.image.clone()),
                generated: MaskedImage::unmasked(generated.image.clone()),
            },
            extractor,
        )?;
        warnings.extend(masked.warning.map(|w| (variant, w)));
        rows.push(ReportRow {
            variant,
            masked_sim: masked.value,
            unmasked_sim: unmasked.value,
            mask_coverage: generated.mask.coverage(),
        });
    }
    Ok(AblationReport { rows, warnings })
}
