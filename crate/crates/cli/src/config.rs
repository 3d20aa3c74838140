//! Run configuration: strict JSON schema plus invariant checks.
//!
//! [`prepare`] is the single gate between a parsed config and compute. It
//! loads the input images, builds the cheap model pieces and collects every
//! violation it finds, each tagged with the field path it belongs to.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use harmonize_core::denoiser::{ModelConfig, ToyDenoiser};
use harmonize_core::embedding::{
    TextEmbedding, TextEncoder, TokenRole, VisualEmbedding, VisualEncoder, DEFAULT_VISUAL_TOKENS, DEFAULT_VOCAB_SIZE,
};
use harmonize_core::masking::{BinaryMask, DEFAULT_THRESHOLD};
use harmonize_core::numerics::mix;
use harmonize_core::orchestration::{DEFAULT_DROP_TOLERANCE, DEFAULT_EXCLUDED_ROLES};
use harmonize_core::sampler::{DualRunConfig, MaskSource, Schedule, SchedulerConfig, SwapWindow, DEFAULT_SWAP_START};
use harmonize_core::Matrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::pgm;

const TEXT_STREAM: u64 = 0x5445_5854; // "TEXT"
const VISUAL_STREAM: u64 = 0x5649_5355; // "VISU"

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    pub prompt: Vec<PromptToken>,
    pub image: ImageSource,
    #[serde(default = "default_visual_tokens")]
    pub visual_tokens: usize,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub swap: SwapSection,
    #[serde(default)]
    pub orchestration: OrchestrationSection,
    #[serde(default)]
    pub mask: MaskSection,
    /// Subject mask for the reference image; all ones when absent.
    #[serde(default)]
    pub reference_mask: Option<ImageSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_visual_tokens() -> usize {
    DEFAULT_VISUAL_TOKENS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptToken {
    pub text: String,
    pub role: TokenRole,
    /// Vocabulary id; derived from the text when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u32>,
}

impl PromptToken {
    /// Explicit id, or the first eight bytes of SHA-256(text) modulo the
    /// vocabulary size.
    pub fn token_id(&self) -> u32 {
        self.id.unwrap_or_else(|| {
            let digest = Sha256::digest(self.text.as_bytes());
            let head = u64::from_be_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"));
            (head % u64::from(DEFAULT_VOCAB_SIZE)) as u32
        })
    }
}

/// A plain PGM / ASCII-grid file relative to the config, or rows inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ImageSource {
    Path(PathBuf),
    Grid(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwapSection {
    pub enabled: bool,
    /// First executed step that swaps.
    pub start_step: usize,
    /// Global block ids; the last three decoder blocks when absent.
    pub layers: Option<Vec<usize>>,
    pub shared_noise: bool,
}

impl Default for SwapSection {
    fn default() -> Self {
        Self { enabled: true, start_step: DEFAULT_SWAP_START, layers: None, shared_noise: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrchestrationSection {
    pub enabled: bool,
    pub excluded_roles: Vec<TokenRole>,
    pub drop_tolerance: f64,
}

impl Default for OrchestrationSection {
    fn default() -> Self {
        Self { enabled: true, excluded_roles: DEFAULT_EXCLUDED_ROLES.to_vec(), drop_tolerance: DEFAULT_DROP_TOLERANCE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSection {
    pub threshold: f64,
    pub roles: Vec<TokenRole>,
}

impl Default for MaskSection {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, roles: vec![TokenRole::Subject] }
    }
}

/// One failed check, attached to a dotted field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl Violation {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self { path: path.into(), message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Parses a config strictly. Errors carry the path of the offending field.
pub fn parse(text: &str) -> Result<RunConfig, Violation> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { "<root>".to_string() } else { path };
        Violation::new(path, e.into_inner().to_string())
    })
}

/// A config that passed every check, with its inputs loaded.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// The config with defaults resolved (swap layers filled in).
    pub config: RunConfig,
    pub image: Matrix,
    pub reference_mask: BinaryMask,
    pub text: TextEmbedding,
    pub visual: VisualEmbedding,
    pub model: ToyDenoiser,
}

impl Prepared {
    pub fn dual_run_config(&self) -> DualRunConfig {
        let c = &self.config;
        DualRunConfig {
            seed: c.seed,
            scheduler: c.scheduler,
            window: SwapWindow {
                start_step: c.swap.start_step,
                layers: c.swap.layers.clone().unwrap_or_default(),
            },
            orchestration: c.orchestration.enabled,
            swap: c.swap.enabled,
            mask: MaskSource::CrossAttention { threshold: c.mask.threshold, roles: c.mask.roles.clone() },
            excluded_roles: c.orchestration.excluded_roles.clone(),
            drop_tolerance: c.orchestration.drop_tolerance,
            shared_noise: c.swap.shared_noise,
        }
    }
}

fn load_image(source: &ImageSource, base_dir: &Path, path: &str, out: &mut Vec<Violation>) -> Option<Matrix> {
    let loaded = match source {
        ImageSource::Grid(rows) => Matrix::from_rows(rows).map_err(|e| e.to_string()),
        ImageSource::Path(p) => {
            let full = base_dir.join(p);
            fs::read(&full)
                .map_err(|e| format!("cannot read {}: {e}", full.display()))
                .and_then(|bytes| pgm::read_image(&bytes).map_err(|e| format!("{}: {e}", full.display())))
        }
    };
    match loaded {
        Ok(m) if m.rows() > 0 && m.cols() > 0 => Some(m),
        Ok(_) => {
            out.push(Violation::new(path, "image is empty"));
            None
        }
        Err(e) => {
            out.push(Violation::new(path, e));
            None
        }
    }
}

/// Checks every invariant and loads the inputs. `base_dir` resolves
/// relative image paths.
pub fn prepare(mut config: RunConfig, base_dir: &Path) -> Result<Prepared, Vec<Violation>> {
    let mut v = Vec::new();
    let model_cfg = config.model;

    let model = match ToyDenoiser::new(model_cfg, config.seed) {
        Ok(m) => Some(m),
        Err(e) => {
            v.push(Violation::new("model", e.to_string()));
            None
        }
    };

    if let Err(e) = Schedule::new(&config.scheduler) {
        v.push(Violation::new("scheduler", e.to_string()));
    }
    let steps = config.scheduler.steps;

    if config.prompt.is_empty() {
        v.push(Violation::new("prompt", "needs at least one token"));
    }
    for (i, t) in config.prompt.iter().enumerate() {
        if t.text.is_empty() {
            v.push(Violation::new(format!("prompt[{i}].text"), "must not be empty"));
        }
        if let Some(id) = t.id.filter(|&id| id >= DEFAULT_VOCAB_SIZE) {
            v.push(Violation::new(format!("prompt[{i}].id"), format!("{id} >= vocabulary size {DEFAULT_VOCAB_SIZE}")));
        }
    }
    let subjects = config.prompt.iter().filter(|t| t.role == TokenRole::Subject).count();
    if subjects > 1 {
        v.push(Violation::new("prompt", format!("{subjects} subject tokens, at most one allowed")));
    }

    if config.visual_tokens == 0 {
        v.push(Violation::new("visual_tokens", "must be positive"));
    }

    if config.swap.start_step == 0 || config.swap.start_step > steps + 1 {
        v.push(Violation::new(
            "swap.start_step",
            format!("{} outside 1..={} (the last value disables swapping)", config.swap.start_step, steps + 1),
        ));
    }
    let layers = config.swap.layers.get_or_insert_with(|| model_cfg.default_swap_layers()).clone();
    let blocks = model_cfg.block_count();
    let decoder = model_cfg.decoder_layers();
    for (i, &l) in layers.iter().enumerate() {
        if l >= blocks {
            v.push(Violation::new("swap.layers", format!("layer id {l} >= block count {blocks}")));
        } else if !decoder.contains(&l) {
            v.push(Violation::new(
                "swap.layers",
                format!("layer {l} is not a decoder block ({}..{})", decoder.start, decoder.end),
            ));
        }
        if layers[..i].contains(&l) {
            v.push(Violation::new("swap.layers", format!("layer {l} listed twice")));
        }
    }

    let tol = config.orchestration.drop_tolerance;
    if !(tol > 0.0 && tol.is_finite()) {
        v.push(Violation::new("orchestration.drop_tolerance", format!("must be positive and finite, got {tol}")));
    }

    let tau = config.mask.threshold;
    if !(0.0..=1.0).contains(&tau) {
        v.push(Violation::new("mask.threshold", format!("must lie in [0, 1], got {tau}")));
    }
    if config.mask.roles.is_empty() {
        v.push(Violation::new("mask.roles", "needs at least one role"));
    } else if !config.prompt.iter().any(|t| config.mask.roles.contains(&t.role)) {
        let roles: Vec<_> = config.mask.roles.iter().map(|r| r.as_str()).collect();
        v.push(Violation::new("mask.roles", format!("no prompt token has a mask role ({})", roles.join(", "))));
    }

    let image = load_image(&config.image, base_dir, "image", &mut v);
    let reference_mask = match (&config.reference_mask, &image) {
        (None, Some(img)) => Some(BinaryMask::full(img.rows(), img.cols())),
        (None, None) => None,
        (Some(src), img) => load_image(src, base_dir, "reference_mask", &mut v).and_then(|m| {
            let mask = BinaryMask::from_matrix(&m);
            match img {
                Some(img) if mask.shape() != img.shape() => {
                    v.push(Violation::new(
                        "reference_mask",
                        format!("{}x{} mask for a {}x{} image", m.rows(), m.cols(), img.rows(), img.cols()),
                    ));
                    None
                }
                _ => Some(mask),
            }
        }),
    };

    let hc = model_cfg.context_dim;
    let text = if config.prompt.is_empty() || hc == 0 {
        None
    } else {
        let ids: Vec<(u32, TokenRole)> = config.prompt.iter().map(|t| (t.token_id(), t.role)).collect();
        TextEncoder::new(hc, mix(config.seed, TEXT_STREAM)).encode(&ids).ok()
    };
    let visual = match (&image, config.visual_tokens, hc) {
        (Some(img), m, hc) if m > 0 && hc > 0 => {
            match VisualEncoder::new(hc, m, mix(config.seed, VISUAL_STREAM)).encode(img) {
                Ok(e) => Some(e),
                Err(e) => {
                    v.push(Violation::new("visual_tokens", e.to_string()));
                    None
                }
            }
        }
        _ => None,
    };

    if !v.is_empty() {
        return Err(v);
    }
    match (model, image, reference_mask, text, visual) {
        (Some(model), Some(image), Some(reference_mask), Some(text), Some(visual)) => {
            Ok(Prepared { config, image, reference_mask, text, visual, model })
        }
        _ => Err(vec![Violation::new("<root>", "config could not be prepared")]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{
            "prompt": [{"text": "a", "role": "article"}, {"text": "<s>", "role": "subject"},
                       {"text": "dog", "role": "class_name"}, {"text": "beach", "role": "regular"}],
            "image": {"grid": [[0.0, 1.0], [1.0, 0.0], [0.5, 0.5], [0.2, 0.8]]}
        }"#
    }

    #[test]
    fn defaults_resolve_to_reference_settings() {
        let c = parse(minimal()).unwrap();
        assert_eq!(c.scheduler.steps, 100);
        assert_eq!(c.mask.threshold, 0.5);
        assert_eq!(c.swap.start_step, 21);
        assert_eq!(c.swap.layers, None);
        let p = prepare(c, Path::new(".")).unwrap();
        assert_eq!(p.config.swap.layers, Some(vec![8, 9, 10]));
        assert_eq!(p.reference_mask, BinaryMask::full(4, 2));
    }

    #[test]
    fn unknown_field_reports_its_path() {
        let text = minimal().replacen("\"prompt\"", "\"swap\": {\"start\": 3}, \"prompt\"", 1);
        let err = parse(&text).unwrap_err();
        assert_eq!(err.path, "swap.start");
        assert!(err.message.contains("unknown field `start`"), "{err}");
    }

    #[test]
    fn type_error_reports_nested_path() {
        let text = minimal().replacen("\"prompt\"", "\"mask\": {\"threshold\": \"high\"}, \"prompt\"", 1);
        assert_eq!(parse(&text).unwrap_err().path, "mask.threshold");
    }

    #[test]
    fn collects_every_violation() {
        let mut c = parse(minimal()).unwrap();
        c.mask.threshold = 1.5;
        c.swap.layers = Some(vec![11, 2]);
        c.swap.start_step = 0;
        c.visual_tokens = 3;
        let paths: Vec<String> = prepare(c, Path::new(".")).unwrap_err().into_iter().map(|v| v.path).collect();
        assert_eq!(paths, ["swap.start_step", "swap.layers", "swap.layers", "mask.threshold", "visual_tokens"]);
    }

    #[test]
    fn mask_roles_must_match_a_prompt_token() {
        let mut c = parse(minimal()).unwrap();
        c.mask.roles = vec![TokenRole::Padding];
        let err = prepare(c, Path::new(".")).unwrap_err();
        assert_eq!(err[0].path, "mask.roles");
    }

    #[test]
    fn reference_mask_shape_must_match_image() {
        let mut c = parse(minimal()).unwrap();
        c.reference_mask = Some(ImageSource::Grid(vec![vec![1.0]]));
        assert_eq!(prepare(c, Path::new(".")).unwrap_err()[0].path, "reference_mask");
    }

    #[test]
    fn token_ids_are_stable_hashes() {
        let t = PromptToken { text: "dog".into(), role: TokenRole::ClassName, id: None };
        // sha256("dog") starts cd6357efdd966de8
        assert_eq!(t.token_id(), (0xcd63_57ef_dd96_6de8u64 % 65_536) as u32);
        assert_eq!(PromptToken { id: Some(7), ..t }.token_id(), 7);
    }
}
