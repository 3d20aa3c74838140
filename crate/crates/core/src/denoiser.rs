//! A small attention-only noise predictor standing in for the UNet, the
//! identity autoencoder, and the denoising loss.
//!
//! Each block runs residual self-attention, residual cross-attention against
//! the contextual embedding, and a residual feedforward, each behind a
//! parameter-free layer norm. All pixels stay at one resolution, so every
//! layer shares the latent grid.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attention::{
    cross_attention, masked_attn_swap, self_attention, AttentionKind, AttentionRecord, AttentionWeights, SwapBuffer,
};
use crate::embedding::ContextualEmbedding;
use crate::error::{Error, Result};
use crate::numerics::{matmul, mix, Matrix, SeededRng};
use crate::sampler::schedule::Schedule;

const WEIGHT_STREAM: u64 = 0x5745_4947_4854; // "WEIGHT"
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Latent channel count `h`.
    pub latent_dim: usize,
    /// Context width `h_c`.
    pub context_dim: usize,
    /// Attention projection width `d`.
    pub attention_dim: usize,
    pub ff_dim: usize,
    pub encoder_blocks: usize,
    pub middle_blocks: usize,
    pub decoder_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            latent_dim: 32,
            context_dim: 32,
            attention_dim: 32,
            ff_dim: 64,
            encoder_blocks: 4,
            middle_blocks: 1,
            decoder_blocks: 6,
        }
    }
}

impl ModelConfig {
    pub fn block_count(&self) -> usize {
        self.encoder_blocks + self.middle_blocks + self.decoder_blocks
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Global layer ids of the decoder blocks.
    pub fn decoder_layers(&self) -> std::ops::Range<usize> {
        let start = self.encoder_blocks + self.middle_blocks;
        start..start + self.decoder_blocks
    }

    /// The last three decoder blocks, or all of them when there are fewer.
    pub fn default_swap_layers(&self) -> Vec<usize> {
        let r = self.decoder_layers();
        (r.end.saturating_sub(3).max(r.start)..r.end).collect()
    }

    pub fn stage_of(&self, layer: usize) -> Option<Stage> {
        if layer < self.encoder_blocks {
            Some(Stage::Encoder)
        } else if layer < self.encoder_blocks + self.middle_blocks {
            Some(Stage::Middle)
        } else if layer < self.block_count() {
            Some(Stage::Decoder)
        } else {
            None
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("height", self.height),
            ("width", self.width),
            ("latent_dim", self.latent_dim),
            ("context_dim", self.context_dim),
            ("attention_dim", self.attention_dim),
            ("ff_dim", self.ff_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Configuration(format!("model.{name} must be positive")));
            }
        }
        if self.block_count() == 0 {
            return Err(Error::Configuration("model needs at least one block".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Encoder,
    Middle,
    Decoder,
}

/// Spatial latent: `l = H·W` pixels of width `h`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    height: usize,
    width: usize,
    features: Matrix,
}

impl LatentState {
    pub fn new(height: usize, width: usize, features: Matrix) -> Result<Self> {
        if features.rows() != height * width {
            return Err(Error::Dimension(format!(
                "{height}x{width} grid needs {} pixels, features have {}",
                height * width,
                features.rows()
            )));
        }
        Ok(Self { height, width, features })
    }

    /// Standard-normal latent drawn from `rng`.
    pub fn gaussian(height: usize, width: usize, dim: usize, rng: &mut SeededRng) -> Self {
        Self { height, width, features: rng.gaussian_matrix(height * width, dim, 1.0) }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn into_features(self) -> Matrix {
        self.features
    }

    pub fn with_features(&self, features: Matrix) -> Result<Self> {
        if features.shape() != self.features.shape() {
            return Err(Error::shapes("latent", self.features.shape(), features.shape()));
        }
        Ok(Self { features, ..*self })
    }
}

/// Image as `height x width` pixels of `channels` values, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    /// Per-pixel channel mean as a `height x width` matrix.
    pub fn luminance(&self) -> Matrix {
        let data = self
            .data
            .chunks(self.channels)
            .map(|px| px.iter().sum::<f64>() / self.channels as f64)
            .collect();
        Matrix::from_raw(self.height, self.width, data)
    }
}

/// Stand-in for the encoder/decoder pair. Only the identity mode exists.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Autoencoder {
    #[default]
    Identity,
}

impl Autoencoder {
    pub fn encode_image(&self, image: &Image) -> Result<LatentState> {
        match self {
            Autoencoder::Identity => LatentState::new(
                image.height,
                image.width,
                Matrix::new(image.height * image.width, image.channels, image.data.clone())?,
            ),
        }
    }

    pub fn decode_latent(&self, latent: &LatentState) -> Image {
        match self {
            Autoencoder::Identity => Image {
                height: latent.height,
                width: latent.width,
                channels: latent.features.cols(),
                data: latent.features.data().to_vec(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub layer: usize,
    pub stage: Stage,
    pub self_attn: AttentionWeights,
    pub self_out: Matrix,
    pub cross_attn: AttentionWeights,
    pub cross_out: Matrix,
    pub ff_in: Matrix,
    pub ff_out: Matrix,
}

/// Which step a forward call belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepIndex {
    /// Executed step, 1 at the noisiest latent.
    pub step: usize,
    /// Diffusion timestep `τ`.
    pub timestep: usize,
}

/// Per-call instrumentation: layers whose keys/values are kept in the
/// self-attention records, and an optional swap buffer to consume.
#[derive(Debug, Clone, Copy, Default)]
pub struct Hooks<'a> {
    pub capture: Option<&'a BTreeSet<usize>>,
    pub swap: Option<&'a SwapBuffer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub noise: LatentState,
    pub records: Vec<AttentionRecord>,
}

/// Anything that predicts noise from `(z_τ, τ, c)`.
pub trait NoisePredictor {
    fn predict_noise(&self, latent: &LatentState, timestep: usize, context: &ContextualEmbedding) -> Result<LatentState>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    config: ModelConfig,
    blocks: Vec<Block>,
    out_proj: Matrix,
}

fn init(rng: &mut SeededRng, fan_in: usize, fan_out: usize) -> Matrix {
    rng.gaussian_matrix(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
}

impl ToyDenoiser {
    /// Draws every weight from one seeded stream, scaled by `1/sqrt(fan_in)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let ModelConfig { latent_dim: h, context_dim: hc, attention_dim: d, ff_dim: ff, .. } = config;
        let mut rng = SeededRng::new(mix(seed, WEIGHT_STREAM));
        let mut blocks = Vec::with_capacity(config.block_count());
        for layer in 0..config.block_count() {
            let self_attn = AttentionWeights::new(init(&mut rng, h, d), init(&mut rng, h, d), init(&mut rng, h, d))?;
            let self_out = init(&mut rng, d, h);
            let cross_attn =
                AttentionWeights::new(init(&mut rng, h, d), init(&mut rng, hc, d), init(&mut rng, hc, d))?;
            let cross_out = init(&mut rng, d, h);
            let ff_in = init(&mut rng, h, ff);
            let ff_out = init(&mut rng, ff, h);
            blocks.push(Block {
                layer,
                stage: config.stage_of(layer).expect("layer below block count"),
                self_attn,
                self_out,
                cross_attn,
                cross_out,
                ff_in,
                ff_out,
            });
        }
        let out_proj = init(&mut rng, h, h);
        Ok(Self { config, blocks, out_proj })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn out_proj(&self) -> &Matrix {
        &self.out_proj
    }

    /// Copy with every attention and feedforward weight set to zero, leaving
    /// only the timestep embedding and the output projection.
    pub fn with_silent_blocks(&self) -> Self {
        let blocks = self
            .blocks
            .iter()
            .map(|b| Block {
                layer: b.layer,
                stage: b.stage,
                self_attn: b.self_attn.zeroed(),
                self_out: Matrix::zeros(b.self_out.rows(), b.self_out.cols()),
                cross_attn: b.cross_attn.zeroed(),
                cross_out: Matrix::zeros(b.cross_out.rows(), b.cross_out.cols()),
                ff_in: Matrix::zeros(b.ff_in.rows(), b.ff_in.cols()),
                ff_out: Matrix::zeros(b.ff_out.rows(), b.ff_out.cols()),
            })
            .collect();
        Self { config: self.config, blocks, out_proj: self.out_proj.clone() }
    }

    pub fn forward(
        &self,
        latent: &LatentState,
        index: StepIndex,
        context: &ContextualEmbedding,
        hooks: Hooks<'_>,
    ) -> Result<ForwardOutput> {
        let h = self.config.latent_dim;
        if latent.features.cols() != h {
            return Err(Error::Dimension(format!("latent width {} vs model width {h}", latent.features.cols())));
        }
        if index.timestep == 0 {
            return Err(Error::Step { step: 0, steps: usize::MAX });
        }
        if context.is_empty() {
            return Err(Error::EmptyContext);
        }
        if let Some(buffer) = hooks.swap {
            if buffer.timestep() != index.timestep {
                return Err(Error::Lockstep { buffer: buffer.timestep(), current: index.timestep });
            }
            if let Some(bad) = buffer.layer_ids().find(|&l| l >= self.blocks.len()) {
                return Err(Error::Configuration(format!(
                    "swap hook names layer {bad}, model has {} blocks",
                    self.blocks.len()
                )));
            }
        }
        if let Some(bad) = hooks.capture.and_then(|c| c.iter().copied().find(|&l| l >= self.blocks.len())) {
            return Err(Error::Configuration(format!(
                "capture hook names layer {bad}, model has {} blocks",
                self.blocks.len()
            )));
        }

        let grid = latent.grid();
        let temb = timestep_embedding(index.timestep, h);
        let mut x = latent.features.clone();
        for r in 0..x.rows() {
            for (v, t) in x.row_mut(r).iter_mut().zip(&temb) {
                *v += t;
            }
        }

        let mut records = Vec::with_capacity(2 * self.blocks.len());
        for block in &self.blocks {
            let normed = layer_norm(&x);
            let sa = self_attention(&normed, &block.self_attn)?;
            let attended = match hooks.swap.and_then(|b| b.layer(block.layer).map(|kv| (b, kv))) {
                Some((buffer, (donor_key, donor_value))) => {
                    let mask = buffer.mask().resample(grid.0, grid.1)?;
                    masked_attn_swap(&sa.query, &sa.key, &sa.value, donor_key, donor_value, &mask.weights())?
                }
                None => sa.output,
            };
            x = x.add(&matmul(&attended, &block.self_out)?)?;
            let keep = hooks.capture.is_some_and(|c| c.contains(&block.layer));
            records.push(AttentionRecord {
                layer: block.layer,
                step: index.step,
                timestep: index.timestep,
                kind: AttentionKind::SelfAttention,
                grid,
                map: sa.map,
                key: keep.then_some(sa.key),
                value: keep.then_some(sa.value),
            });

            let normed = layer_norm(&x);
            let ca = cross_attention(&normed, context, &block.cross_attn)?;
            x = x.add(&matmul(&ca.output, &block.cross_out)?)?;
            records.push(AttentionRecord {
                layer: block.layer,
                step: index.step,
                timestep: index.timestep,
                kind: AttentionKind::Cross,
                grid,
                map: ca.map,
                key: None,
                value: None,
            });

            let hidden = matmul(&layer_norm(&x), &block.ff_in)?.map(silu);
            x = x.add(&matmul(&hidden, &block.ff_out)?)?;
        }
        let noise = LatentState { height: grid.0, width: grid.1, features: matmul(&x, &self.out_proj)? };
        Ok(ForwardOutput { noise, records })
    }
}

impl NoisePredictor for ToyDenoiser {
    fn predict_noise(&self, latent: &LatentState, timestep: usize, context: &ContextualEmbedding) -> Result<LatentState> {
        Ok(self.forward(latent, StepIndex { step: 0, timestep }, context, Hooks::default())?.noise)
    }
}

/// Sinusoidal embedding of width `dim`: sines in the first half, cosines in
/// the second, frequencies `10000^(-i/half)`. An odd trailing slot is zero.
pub fn timestep_embedding(timestep: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * i as f64 / half as f64);
        let arg = timestep as f64 * freq;
        out[i] = libm::sin(arg);
        out[half + i] = libm::cos(arg);
    }
    out
}

fn layer_norm(x: &Matrix) -> Matrix {
    let n = x.cols() as f64;
    let mut out = Vec::with_capacity(x.data().len());
    for row in x.iter_rows() {
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        out.extend(row.iter().map(|v| (v - mean) * inv));
    }
    Matrix::from_raw(x.rows(), x.cols(), out)
}

fn silu(v: f64) -> f64 {
    v / (1.0 + libm::exp(-v))
}

/// Denoising objective for one sample: noise `z0` to `τ`, predict, and take
/// the mean squared error over all `l·h` entries.
pub fn ldm_loss<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &Schedule,
    z0: &LatentState,
    noise: &Matrix,
    timestep: usize,
    context: &ContextualEmbedding,
) -> Result<f64> {
    if timestep == 0 || timestep > schedule.steps() {
        return Err(Error::Step { step: timestep, steps: schedule.steps() });
    }
    if noise.shape() != z0.features.shape() {
        return Err(Error::shapes("ldm_loss noise", z0.features.shape(), noise.shape()));
    }
    let noised = z0.with_features(schedule.add_noise(&z0.features, noise, timestep)?)?;
    let predicted = predictor.predict_noise(&noised, timestep, context)?;
    if predicted.features.shape() != noise.shape() {
        return Err(Error::shapes("predicted noise", noise.shape(), predicted.features.shape()));
    }
    let sse: f64 = noise
        .data()
        .iter()
        .zip(predicted.features.data())
        .map(|(e, p)| (e - p) * (e - p))
        .sum();
    Ok(sse / noise.data().len() as f64)
}
