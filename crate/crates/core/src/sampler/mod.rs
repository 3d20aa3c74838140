//! Deterministic sampling: single trajectories, the lockstep main/donor pair
//! with masked key/value swap, and the four-variant ablation.
//!
//! Steps are counted as executed: step `k` runs at timestep `τ = T − k + 1`,
//! so step 1 denoises `z_T`.

pub mod schedule;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionKind, AttentionRecord, SwapBuffer};
use crate::denoiser::{Hooks, LatentState, StepIndex, ToyDenoiser};
use crate::embedding::{compose_context, ContextMode, ContextualEmbedding, TextEmbedding, TokenRole, VisualEmbedding};
use crate::error::{Error, Result};
use crate::masking::{aggregate_subject_saliency, binarize, BinaryMask, SubjectMask, DEFAULT_THRESHOLD};
use crate::numerics::{mix, SeededRng};
use crate::orchestration::{build_basis, orchestrate, OrthogonalBasis, DEFAULT_DROP_TOLERANCE, DEFAULT_EXCLUDED_ROLES};
use crate::Warning;

pub use schedule::{ddim_update, Schedule, SchedulerConfig};

/// First executed step with swapping: "after the 20th step".
pub const DEFAULT_SWAP_START: usize = 21;
const INITIAL_NOISE_STREAM: u64 = 0;
const DONOR_NOISE_STREAM: u64 = 0xD0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwapWindow {
    /// First executed step that swaps; `T + 1` disables swapping.
    pub start_step: usize,
    /// Global ids of the decoder blocks that swap.
    pub layers: Vec<usize>,
}

impl SwapWindow {
    pub fn contains(&self, step: usize) -> bool {
        step >= self.start_step
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MaskSource {
    /// Binarized subject saliency from the main pass's previous step.
    CrossAttention { threshold: f64, roles: Vec<TokenRole> },
    /// The same mask at every swap step.
    Fixed(BinaryMask),
}

impl Default for MaskSource {
    fn default() -> Self {
        MaskSource::CrossAttention { threshold: DEFAULT_THRESHOLD, roles: vec![TokenRole::Subject] }
    }
}

/// Everything a run needs beyond the model and the embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct DualRunConfig {
    pub seed: u64,
    pub scheduler: SchedulerConfig,
    pub window: SwapWindow,
    pub orchestration: bool,
    pub swap: bool,
    pub mask: MaskSource,
    pub excluded_roles: Vec<TokenRole>,
    pub drop_tolerance: f64,
    pub shared_noise: bool,
}

impl DualRunConfig {
    pub fn new(seed: u64, window_layers: Vec<usize>) -> Self {
        Self {
            seed,
            scheduler: SchedulerConfig::default(),
            window: SwapWindow { start_step: DEFAULT_SWAP_START, layers: window_layers },
            orchestration: true,
            swap: true,
            mask: MaskSource::default(),
            excluded_roles: DEFAULT_EXCLUDED_ROLES.to_vec(),
            drop_tolerance: DEFAULT_DROP_TOLERANCE,
            shared_noise: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Retention {
    All,
    CrossOnly,
    Nothing,
}

/// Attention records of one trajectory. Every record is checked for row
/// stochasticity and counted whether or not it is retained.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordLog {
    retention: Retention,
    records: Vec<AttentionRecord>,
    self_count: usize,
    cross_count: usize,
    max_row_deviation: f64,
}

impl RecordLog {
    pub fn new(retention: Retention) -> Self {
        Self { retention, records: Vec::new(), self_count: 0, cross_count: 0, max_row_deviation: 0.0 }
    }

    fn push(&mut self, record: AttentionRecord) {
        for row in record.map.iter_rows() {
            let dev = (row.iter().sum::<f64>() - 1.0).abs();
            self.max_row_deviation = self.max_row_deviation.max(dev);
        }
        let keep = match record.kind {
            AttentionKind::SelfAttention => {
                self.self_count += 1;
                self.retention == Retention::All
            }
            AttentionKind::Cross => {
                self.cross_count += 1;
                self.retention != Retention::Nothing
            }
        };
        if keep {
            self.records.push(record);
        }
    }

    pub fn records(&self) -> &[AttentionRecord] {
        &self.records
    }

    pub fn count(&self, kind: AttentionKind) -> usize {
        match kind {
            AttentionKind::SelfAttention => self.self_count,
            AttentionKind::Cross => self.cross_count,
        }
    }

    /// Largest `|Σ row − 1|` over every map seen.
    pub fn max_row_deviation(&self) -> f64 {
        self.max_row_deviation
    }

    pub fn cross_records(&self) -> impl Iterator<Item = &AttentionRecord> {
        self.records.iter().filter(|r| r.kind == AttentionKind::Cross)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingleRun {
    pub latent: LatentState,
    pub log: RecordLog,
    /// Cross-attention records of the final step, always kept.
    pub last_cross: Vec<AttentionRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualRun {
    pub latent: LatentState,
    pub donor_latent: LatentState,
    pub log: RecordLog,
    pub donor_log: RecordLog,
    pub last_cross: Vec<AttentionRecord>,
    /// One mask per swapping step, in step order.
    pub masks: Vec<(usize, SubjectMask)>,
    /// `(executed step, timestep of the buffer consumed)` for each swap step.
    pub buffer_tags: Vec<(usize, usize)>,
    pub warnings: Vec<Warning>,
}

/// Standard-normal `z_T` for `seed`, drawn from stream `mix(seed, 0)`.
pub fn initial_latent(model: &ToyDenoiser, seed: u64) -> LatentState {
    let c = model.config();
    LatentState::gaussian(c.height, c.width, c.latent_dim, &mut SeededRng::new(mix(seed, INITIAL_NOISE_STREAM)))
}

fn donor_latent(model: &ToyDenoiser, seed: u64) -> LatentState {
    let c = model.config();
    LatentState::gaussian(c.height, c.width, c.latent_dim, &mut SeededRng::new(mix(seed, DONOR_NOISE_STREAM)))
}

/// Subject mask from a set of cross-attention records at the latent grid.
pub fn derive_mask(
    records: &[AttentionRecord],
    context: &ContextualEmbedding,
    roles: &[TokenRole],
    threshold: f64,
    grid: (usize, usize),
    source_step: usize,
) -> Result<(SubjectMask, Option<Warning>)> {
    let slots = context.slots_with_roles(roles);
    if slots.is_empty() {
        return Err(Error::Configuration(format!(
            "no context token has a mask role ({})",
            roles.iter().map(|r| r.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    let refs: Vec<&AttentionRecord> = records.iter().collect();
    let saliency = aggregate_subject_saliency(&refs, &slots, grid.0, grid.1)?;
    binarize(&saliency, threshold, source_step)
}

pub struct Sampler<'a> {
    model: &'a ToyDenoiser,
    schedule: Schedule,
}

impl<'a> Sampler<'a> {
    pub fn new(model: &'a ToyDenoiser, scheduler: &SchedulerConfig) -> Result<Self> {
        Ok(Self { model, schedule: Schedule::new(scheduler)? })
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    fn index(&self, step: usize) -> StepIndex {
        StepIndex { step, timestep: self.schedule.steps() - step + 1 }
    }

    pub fn run_single(&self, context: &ContextualEmbedding, initial: &LatentState, retention: Retention) -> Result<SingleRun> {
        let mut latent = initial.clone();
        let mut log = RecordLog::new(retention);
        let mut last_cross = Vec::new();
        for step in 1..=self.schedule.steps() {
            let idx = self.index(step);
            let out = self.model.forward(&latent, idx, context, Hooks::default())?;
            latent = latent.with_features(self.schedule.ddim_step(latent.features(), out.noise.features(), idx.timestep)?)?;
            last_cross = keep_cross(out.records, &mut log);
        }
        Ok(SingleRun { latent, log, last_cross })
    }

    fn check_window(&self, window: &SwapWindow) -> Result<()> {
        let steps = self.schedule.steps();
        if window.start_step == 0 || window.start_step > steps + 1 {
            return Err(Error::Configuration(format!(
                "swap start step {} outside 1..={}",
                window.start_step,
                steps + 1
            )));
        }
        let decoder = self.model.config().decoder_layers();
        if let Some(bad) = window.layers.iter().find(|l| !decoder.contains(l)) {
            return Err(Error::Configuration(format!(
                "swap layer {bad} is not a decoder block ({}..{})",
                decoder.start, decoder.end
            )));
        }
        Ok(())
    }

    /// Main and donor trajectories in lockstep. At each step the donor runs
    /// first and hands its keys/values to the main pass, which applies them
    /// under a mask derived from its own cross-attention one step earlier.
    #[allow(clippy::too_many_arguments)]
    pub fn run_dual(
        &self,
        main: &ContextualEmbedding,
        visual: &ContextualEmbedding,
        initial: &LatentState,
        donor_initial: &LatentState,
        window: &SwapWindow,
        mask_source: &MaskSource,
        retention: Retention,
    ) -> Result<DualRun> {
        if initial.grid() != donor_initial.grid() || initial.features().shape() != donor_initial.features().shape() {
            return Err(Error::DualShape { main: initial.features().shape(), donor: donor_initial.features().shape() });
        }
        if main.dim() != visual.dim() {
            return Err(Error::Dimension(format!("main context width {} vs donor {}", main.dim(), visual.dim())));
        }
        self.check_window(window)?;
        if let MaskSource::CrossAttention { roles, .. } = mask_source {
            if main.slots_with_roles(roles).is_empty() {
                return Err(Error::Configuration("main context has no token with a mask role".into()));
            }
        }
        let grid = initial.grid();
        let capture: BTreeSet<usize> = window.layers.iter().copied().collect();

        let mut latent = initial.clone();
        let mut donor = donor_initial.clone();
        let mut log = RecordLog::new(retention);
        let mut donor_log = RecordLog::new(retention);
        let mut prev_cross: Vec<AttentionRecord> = Vec::new();
        let mut masks = Vec::new();
        let mut buffer_tags = Vec::new();
        let mut warnings = Vec::new();

        for step in 1..=self.schedule.steps() {
            let idx = self.index(step);
            let swapping = window.contains(step) && !capture.is_empty();

            let donor_out = self.model.forward(
                &donor,
                idx,
                visual,
                Hooks { capture: swapping.then_some(&capture), swap: None },
            )?;

            let buffer = if swapping {
                let mask = match mask_source {
                    MaskSource::Fixed(m) => SubjectMask::new(m.resample(grid.0, grid.1)?, step - 1),
                    MaskSource::CrossAttention { threshold, roles } => {
                        if prev_cross.is_empty() {
                            warnings.push(Warning::NoMaskSource { step });
                            SubjectMask::new(BinaryMask::empty(grid.0, grid.1), 0)
                        } else {
                            let (m, w) = derive_mask(&prev_cross, main, roles, *threshold, grid, step - 1)?;
                            warnings.extend(w);
                            m
                        }
                    }
                };
                let mut buffer = SwapBuffer::new(idx.timestep, mask.mask.clone());
                for r in &donor_out.records {
                    if let (Some(k), Some(v)) = (&r.key, &r.value) {
                        buffer.insert(r.layer, k.clone(), v.clone());
                    }
                }
                masks.push((step, mask));
                buffer_tags.push((step, buffer.timestep()));
                Some(buffer)
            } else {
                None
            };

            let main_out = self.model.forward(&latent, idx, main, Hooks { capture: None, swap: buffer.as_ref() })?;

            latent = latent.with_features(self.schedule.ddim_step(latent.features(), main_out.noise.features(), idx.timestep)?)?;
            donor = donor.with_features(self.schedule.ddim_step(donor.features(), donor_out.noise.features(), idx.timestep)?)?;

            for mut r in donor_out.records {
                r.key = None;
                r.value = None;
                donor_log.push(r);
            }
            prev_cross = keep_cross(main_out.records, &mut log);
        }
        Ok(DualRun { latent, donor_latent: donor, log, donor_log, last_cross: prev_cross, masks, buffer_tags, warnings })
    }
}

/// Logs every record and returns copies of the cross-attention ones.
fn keep_cross(records: Vec<AttentionRecord>, log: &mut RecordLog) -> Vec<AttentionRecord> {
    let mut cross = Vec::new();
    for r in records {
        if r.kind == AttentionKind::Cross {
            cross.push(r.clone());
        }
        log.push(r);
    }
    cross
}

/// Ablation rows in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Orchestration,
    Swap,
    Ours,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Orchestration, Variant::Swap, Variant::Ours];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Orchestration => "orchestration",
            Variant::Swap => "swap",
            Variant::Ours => "ours",
        }
    }

    /// Row label in the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::Orchestration => "w/Orchestration",
            Variant::Swap => "w/SA Swap",
            Variant::Ours => "Ours",
        }
    }

    pub fn orchestrated(self) -> bool {
        matches!(self, Variant::Orchestration | Variant::Ours)
    }

    pub fn swapped(self) -> bool {
        matches!(self, Variant::Swap | Variant::Ours)
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantResult {
    pub variant: Variant,
    pub initial: LatentState,
    pub latent: LatentState,
    /// Mask used for masked scoring: the last swap mask for dual runs, the
    /// final step's cross-attention mask otherwise.
    pub final_mask: SubjectMask,
    pub step_masks: Vec<(usize, SubjectMask)>,
    pub log: RecordLog,
    pub buffer_tags: Vec<(usize, usize)>,
    pub warnings: Vec<Warning>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub basis: OrthogonalBasis,
    pub results: Vec<VariantResult>,
    pub warnings: Vec<Warning>,
}

/// Runs the requested variants from one shared `z_T`:
/// baseline and orchestration-only as single trajectories on the plain and
/// orchestrated full contexts, swap-only and full method as dual runs with
/// the same two main contexts. `config.orchestration` and `config.swap`
/// gate the mechanisms: when one is off, the variants that would use it run
/// without it.
pub fn run_ablation(
    model: &ToyDenoiser,
    text: &TextEmbedding,
    visual: &VisualEmbedding,
    config: &DualRunConfig,
    variants: &[Variant],
    retention: Retention,
) -> Result<Ablation> {
    let plain = compose_context(Some(visual), Some(text), ContextMode::Full)?;
    let visual_only = compose_context(Some(visual), None, ContextMode::VisualOnly)?;
    let basis = build_basis(text, &config.excluded_roles, config.drop_tolerance)?;
    let orchestrated = orchestrate(&plain, &basis)?;
    let warnings: Vec<Warning> =
        orchestrated.collapsed.iter().map(|&index| Warning::CollapsedVisualToken { index }).collect();

    let sampler = Sampler::new(model, &config.scheduler)?;
    let initial = initial_latent(model, config.seed);
    let donor_initial = if config.shared_noise { initial.clone() } else { donor_latent(model, config.seed) };
    let grid = initial.grid();
    let (threshold, roles) = match &config.mask {
        MaskSource::CrossAttention { threshold, roles } => (*threshold, roles.clone()),
        MaskSource::Fixed(_) => (DEFAULT_THRESHOLD, vec![TokenRole::Subject]),
    };

    let steps = sampler.schedule().steps();
    // a disabled mechanism is switched off in every variant that would use it
    let window = if config.swap {
        config.window.clone()
    } else {
        SwapWindow { start_step: steps + 1, layers: config.window.layers.clone() }
    };

    let mut results = Vec::with_capacity(variants.len());
    for &variant in variants {
        let context =
            if variant.orchestrated() && config.orchestration { &orchestrated.context } else { &plain };
        let result = if variant.swapped() {
            let run = sampler.run_dual(context, &visual_only, &initial, &donor_initial, &window, &config.mask, retention)?;
            let mut warnings = run.warnings;
            let final_mask = match run.masks.last() {
                Some((_, m)) => m.clone(),
                None => {
                    let (m, w) = derive_mask(&run.last_cross, context, &roles, threshold, grid, steps)?;
                    warnings.extend(w);
                    m
                }
            };
            VariantResult {
                variant,
                initial: initial.clone(),
                latent: run.latent,
                final_mask,
                step_masks: run.masks,
                log: run.log,
                buffer_tags: run.buffer_tags,
                warnings,
            }
        } else {
            let run = sampler.run_single(context, &initial, retention)?;
            let (final_mask, w) = derive_mask(&run.last_cross, context, &roles, threshold, grid, steps)?;
            VariantResult {
                variant,
                initial: initial.clone(),
                latent: run.latent,
                final_mask,
                step_masks: Vec::new(),
                log: run.log,
                buffer_tags: Vec::new(),
                warnings: w.into_iter().collect(),
            }
        };
        results.push(result);
    }
    Ok(Ablation { basis, results, warnings })
}
