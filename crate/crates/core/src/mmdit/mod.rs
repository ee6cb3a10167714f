//! Miniature MMDiT denoiser.
//!
//! Prompt tokens and patchified video tokens share every transformer block.
//! When a frequency-aware embedding is attached, its per-layer token block is
//! concatenated to each block's input between the prompt and video segments
//! and stripped from the block's output. Attention scores from video queries
//! to those tokens can be shifted by a scalar bias before the softmax.

mod attention;
mod model;

pub use attention::{attention_with_bias, video_to_freq_mass, AttentionOutput, Segments};
pub use model::{backward, forward, loss_and_backward, snr_weight, ForwardCache, GradTargets};

use ndarray::{Array1, Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::LatentGrid;
use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::fae::FrequencyEmbedding;
use crate::params::{impl_param_set, ParamSet};
use crate::refadapter::AdapterWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Spatial patch size over the latent grid.
    pub patch: usize,
    pub mlp_ratio: usize,
    pub prompt_vocab: usize,
    pub prompt_len: usize,
    pub time_embed_dim: usize,
    /// Latent grid of the noisy video side: `T' x H' x W' x C`.
    pub latent_slots: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub latent_channels: usize,
    /// Linear beta range the output parameterisation is tied to.
    pub train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Training losses at timestep `t` are scaled by `min(gamma / snr(t), 1)`.
    pub min_snr_gamma: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 4,
            patch: 2,
            mlp_ratio: 2,
            prompt_vocab: crate::prompt::vocab_size(),
            prompt_len: crate::prompt::PROMPT_LEN,
            time_embed_dim: 32,
            latent_slots: 4,
            latent_height: 8,
            latent_width: 8,
            latent_channels: 96,
            train_timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            min_snr_gamma: Some(5.0),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if self.patch == 0 || self.latent_height % self.patch != 0 || self.latent_width % self.patch != 0 {
            return Err(Error::Config(format!(
                "latent {}x{} not divisible by patch {}",
                self.latent_height, self.latent_width, self.patch
            )));
        }
        if self.layers == 0 || self.mlp_ratio == 0 || self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("layers, mlp_ratio and an even time_embed_dim are required".into()));
        }
        if self.prompt_len == 0 || self.prompt_vocab == 0 || self.latent_slots == 0 || self.latent_channels == 0 {
            return Err(Error::Config("prompt and latent sizes must be positive".into()));
        }
        NoiseSchedule::linear(self.train_timesteps, self.beta_start, self.beta_end)?;
        if let Some(g) = self.min_snr_gamma.filter(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::Config(format!("min_snr_gamma must be positive, got {g}")));
        }
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.train_timesteps, self.beta_start, self.beta_end)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.latent_height / self.patch, self.latent_width / self.patch)
    }

    pub fn num_video_tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        self.latent_slots * gh * gw
    }

    /// Input token width: patch area times the concatenated `2C` channels.
    pub fn token_in(&self) -> usize {
        self.patch * self.patch * 2 * self.latent_channels
    }

    pub fn token_out(&self) -> usize {
        self.patch * self.patch * self.latent_channels
    }

    pub fn mlp_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }
}

/// Affine map `y = x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}
impl_param_set!(Linear { w, b });

impl Linear {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, std: f64) -> Self {
        Self {
            w: normal_array(rng, (fan_in, fan_out), std),
            b: Array1::zeros(fan_out),
        }
    }
}

fn normal_array(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    let n = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn(shape, || n.sample(rng))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    /// Timestep modulation: shift/scale/gate for attention and MLP (6 x dim).
    pub ada: Linear,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
}
impl_param_set!(Block { ada, q, k, v, o, fc1, fc2 });

#[derive(Clone, Debug, PartialEq)]
pub struct MmDit {
    pub config: ModelConfig,
    pub patch_embed: Linear,
    pub pos_video: Array2<f64>,
    pub prompt_table: Array2<f64>,
    pub pos_prompt: Array2<f64>,
    pub time_fc1: Linear,
    pub time_fc2: Linear,
    pub blocks: Vec<Block>,
    pub final_ada: Linear,
    pub head: Linear,
    /// Cumulative signal fractions of `config`'s schedule.
    pub alpha_bars: Vec<f64>,
}
impl_param_set!(MmDit {
    patch_embed,
    pos_video,
    prompt_table,
    pos_prompt,
    time_fc1,
    time_fc2,
    blocks,
    final_ada,
    head
});

impl MmDit {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let patch_embed = Linear::init(&mut rng, config.token_in(), d, inv(config.token_in()));
        let pos_video = normal_array(&mut rng, (config.num_video_tokens(), d), 0.1);
        let prompt_table = normal_array(&mut rng, (config.prompt_vocab, d), 0.5);
        let pos_prompt = normal_array(&mut rng, (config.prompt_len, d), 0.1);
        let time_fc1 = Linear::init(&mut rng, config.time_embed_dim, d, inv(config.time_embed_dim));
        let time_fc2 = Linear::init(&mut rng, d, d, inv(d));
        let blocks = (0..config.layers)
            .map(|_| Block {
                ada: Linear::init(&mut rng, d, 6 * d, 0.02),
                q: Linear::init(&mut rng, d, d, inv(d)),
                k: Linear::init(&mut rng, d, d, inv(d)),
                v: Linear::init(&mut rng, d, d, inv(d)),
                o: Linear::init(&mut rng, d, d, inv(d)),
                fc1: Linear::init(&mut rng, d, config.mlp_dim(), inv(d)),
                fc2: Linear::init(&mut rng, config.mlp_dim(), d, inv(config.mlp_dim())),
            })
            .collect();
        let final_ada = Linear::init(&mut rng, d, 2 * d, 0.02);
        let head = Linear::init(&mut rng, d, config.token_out(), 0.02);
        let alpha_bars = config.noise_schedule()?.alpha_bars;
        let mut m = Self {
            config,
            patch_embed,
            pos_video,
            prompt_table,
            pos_prompt,
            time_fc1,
            time_fc2,
            blocks,
            final_ada,
            head,
            alpha_bars,
        };
        // Start the residual gates half-open so every block contributes at init.
        for b in &mut m.blocks {
            for g in [2, 5] {
                b.ada.b.slice_mut(ndarray::s![g * d..(g + 1) * d]).fill(0.5);
            }
        }
        Ok(m)
    }

    /// A zeroed copy with identical structure, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    /// Names of the attention projections an adapter may target.
    pub fn projection_names(&self) -> Vec<String> {
        (0..self.config.layers)
            .flat_map(|l| ["q", "k", "v", "o"].map(|p| format!("blocks.{l}.{p}")))
            .collect()
    }
}

/// Splits a latent into non-overlapping `patch x patch` tokens.
///
/// Tokens are ordered `(slot, row, col)`; features `(dy, dx, channel)`.
pub fn patchify(l: &LatentGrid, patch: usize) -> Result<Array2<f64>> {
    let (t, h, w, c) = l.shape();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("latent {h}x{w} not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array2::zeros((t * gh * gw, patch * patch * c));
    for s in 0..t {
        for gy in 0..gh {
            for gx in 0..gw {
                let tok = (s * gh + gy) * gw + gx;
                for dy in 0..patch {
                    for dx in 0..patch {
                        for ch in 0..c {
                            out[[tok, (dy * patch + dx) * c + ch]] = l.data[[s, gy * patch + dy, gx * patch + dx, ch]];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Array2<f64>, slots: usize, height: usize, width: usize, patch: usize) -> Result<Array4<f64>> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::Shape(format!("latent {height}x{width} not divisible by patch {patch}")));
    }
    let (gh, gw) = (height / patch, width / patch);
    let (n, f) = tokens.dim();
    if n != slots * gh * gw || f % (patch * patch) != 0 {
        return Err(Error::Shape(format!("{n}x{f} tokens do not tile {slots}x{height}x{width} with patch {patch}")));
    }
    let c = f / (patch * patch);
    let mut out = Array4::zeros((slots, height, width, c));
    for s in 0..slots {
        for gy in 0..gh {
            for gx in 0..gw {
                let tok = (s * gh + gy) * gw + gx;
                for dy in 0..patch {
                    for dx in 0..patch {
                        for ch in 0..c {
                            out[[s, gy * patch + dy, gx * patch + dx, ch]] = tokens[[tok, (dy * patch + dx) * c + ch]];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Base model plus optional adapter and frequency embedding, bound to a prompt.
#[derive(Clone, Copy)]
pub struct ModelView<'a> {
    pub base: &'a MmDit,
    pub adapter: Option<&'a AdapterWeights>,
    pub freq: Option<&'a FrequencyEmbedding>,
    pub prompt: &'a [usize],
}

impl<'a> ModelView<'a> {
    pub fn new(base: &'a MmDit, prompt: &'a [usize]) -> Self {
        Self {
            base,
            adapter: None,
            freq: None,
            prompt,
        }
    }

    pub fn with_adapter(mut self, adapter: Option<&'a AdapterWeights>) -> Self {
        self.adapter = adapter;
        self
    }

    pub fn with_freq(mut self, freq: Option<&'a FrequencyEmbedding>) -> Self {
        self.freq = freq;
        self
    }
}

impl Denoiser for ModelView<'_> {
    fn predict_noise(&self, input: &LatentGrid, t: usize, bias: f64) -> Result<LatentGrid> {
        let (out, _) = forward(self, input, t, bias)?;
        Ok(LatentGrid::new(out, input.temporal_factor, input.spatial_factor))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn random_latent(shape: (usize, usize, usize, usize), seed: u64) -> LatentGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentGrid::new(Array4::from_shape_simple_fn(shape, || rng.random::<f64>() - 0.5), 2, 4)
    }

    #[test]
    fn patchify_round_trip_and_token_count() {
        let l = random_latent((4, 8, 8, 5), 1);
        let tok = patchify(&l, 2).unwrap();
        assert_eq!(tok.dim(), (64, 20));
        assert_eq!(unpatchify(&tok, 4, 8, 8, 2).unwrap(), l.data);
    }

    #[test]
    fn single_patch_is_flattened_latent() {
        let l = random_latent((1, 2, 2, 3), 2);
        let tok = patchify(&l, 2).unwrap();
        assert_eq!(tok.dim(), (1, 12));
        let flat: Vec<f64> = l.data.iter().copied().collect();
        assert_eq!(tok.row(0).to_vec(), flat);
    }

    #[test]
    fn patchify_shape_errors() {
        let l = random_latent((1, 3, 4, 2), 3);
        assert!(matches!(patchify(&l, 2), Err(Error::Shape(_))));
        let tok = Array2::zeros((5, 8));
        assert!(unpatchify(&tok, 1, 4, 4, 2).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.patch = 3;
        assert!(MmDit::new(c, 0).is_err());
        let m = MmDit::new(ModelConfig::default(), 0).unwrap();
        assert_eq!(m.projection_names().len(), 8);
        assert_eq!(m.config.num_video_tokens(), 64);
    }
}
