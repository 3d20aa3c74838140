use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use harmonize_core::denoiser::Autoencoder;
use harmonize_core::embedding::{compose_context, ContextMode};
use harmonize_core::masking::aggregate_subject_saliency;
use harmonize_core::metrics::{ablation_report, HistogramExtractor, MaskedImage};
use harmonize_core::sampler::{run_ablation, Retention, Variant};

use crate::config::Prepared;
use crate::manifest::{FileEntry, ImageEntry, Manifest, VariantEntry, MANIFEST_FILE};
use crate::pgm;

pub const METRICS_FILE: &str = "metrics.csv";

/// One output file, held in memory until everything has been computed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub path: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    pub artifacts: Vec<Artifact>,
    pub manifest: Manifest,
}

/// Runs the requested variants and renders every output file.
///
/// Final images go to `images/{variant}.pgm`, subject masks to
/// `masks/{variant}_step{k:03}.pgm` (swap steps) and
/// `masks/{variant}_final.pgm`, cross-attention saliency averaged over the
/// whole run to `heatmaps/{variant}_cross.pgm`. `metrics.csv` is written
/// only when all four variants ran.
pub fn execute(prepared: &Prepared, variants: &[Variant]) -> harmonize_core::Result<Outputs> {
    let config = prepared.dual_run_config();
    let ablation =
        run_ablation(&prepared.model, &prepared.text, &prepared.visual, &config, variants, Retention::CrossOnly)?;
    let context = compose_context(Some(&prepared.visual), Some(&prepared.text), ContextMode::Full)?;
    let slots = context.slots_with_roles(&prepared.config.mask.roles);

    let mut warnings: Vec<String> = ablation.warnings.iter().map(|w| w.to_string()).collect();
    let mut images = Vec::new();
    let mut artifacts = Vec::new();
    let mut scored = Vec::new();
    for result in &ablation.results {
        let name = result.variant.name();
        let (h, w) = result.latent.grid();

        let picture = Autoencoder::Identity.decode_latent(&result.latent).luminance();
        let (bytes, min, max) = pgm::encode_normalized(&picture);
        let path = format!("images/{name}.pgm");
        images.push(ImageEntry { variant: name.to_string(), path: path.clone(), min, max });
        artifacts.push(Artifact { path, bytes });

        for (step, mask) in &result.step_masks {
            artifacts.push(Artifact { path: format!("masks/{name}_step{step:03}.pgm"), bytes: pgm::encode_mask(&mask.mask) });
        }
        artifacts
            .push(Artifact { path: format!("masks/{name}_final.pgm"), bytes: pgm::encode_mask(&result.final_mask.mask) });

        let cross: Vec<_> = result.log.cross_records().collect();
        let heat = aggregate_subject_saliency(&cross, &slots, h, w)?;
        artifacts.push(Artifact { path: format!("heatmaps/{name}_cross.pgm"), bytes: pgm::encode_normalized(&heat).0 });

        warnings.extend(result.warnings.iter().map(|w| format!("{name}: {w}")));
        scored.push((result.variant, MaskedImage::new(picture, result.final_mask.mask.clone())?));
    }

    let all: BTreeSet<Variant> = variants.iter().copied().collect();
    if all.len() == Variant::ALL.len() && variants.len() == all.len() {
        let reference = MaskedImage::new(prepared.image.clone(), prepared.reference_mask.clone())?;
        let report = ablation_report(&scored, &reference, &HistogramExtractor::default())?;
        warnings.extend(report.warnings.iter().map(|(v, w)| format!("{}: metrics: {w}", v.name())));
        artifacts.push(Artifact { path: METRICS_FILE.to_string(), bytes: report.to_csv().into_bytes() });
    }

    let mut echo = prepared.config.clone();
    echo.output_dir = None;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: echo.seed,
        config: echo,
        variants: variants
            .iter()
            .map(|v| VariantEntry { name: v.name().to_string(), label: v.label().to_string() })
            .collect(),
        images,
        files: artifacts.iter().map(|a| FileEntry::new(&a.path, &a.bytes)).collect(),
        warnings,
    };
    Ok(Outputs { artifacts, manifest })
}

/// Writes all artifacts and then the manifest. On failure every file and
/// directory this call created is removed again.
pub fn write_outputs(dir: &Path, outputs: &Outputs) -> io::Result<()> {
    let mut created_dirs: Vec<PathBuf> = Vec::new();
    let mut written: Vec<PathBuf> = Vec::new();
    let result = write_all(dir, outputs, &mut created_dirs, &mut written);
    if result.is_err() {
        for f in written.iter().rev() {
            let _ = fs::remove_file(f);
        }
        for d in created_dirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
    }
    result
}

fn ensure_dir(path: &Path, created: &mut Vec<PathBuf>) -> io::Result<()> {
    if path.is_dir() {
        return Ok(());
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent, created)?;
    }
    fs::create_dir(path)?;
    created.push(path.to_path_buf());
    Ok(())
}

fn write_all(dir: &Path, outputs: &Outputs, created: &mut Vec<PathBuf>, written: &mut Vec<PathBuf>) -> io::Result<()> {
    ensure_dir(dir, created)?;
    let manifest = outputs.manifest.to_json();
    let files = outputs.artifacts.iter().map(|a| (a.path.as_str(), a.bytes.as_slice()));
    for (rel, bytes) in files.chain([(MANIFEST_FILE, manifest.as_slice())]) {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            ensure_dir(parent, created)?;
        }
        written.push(path.clone());
        fs::write(&path, bytes)?;
    }
    Ok(())
}
