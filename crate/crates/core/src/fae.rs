//! Frequency-aware action extraction: a per-reference token block trained on
//! random crops of one clip, and the timestep-scheduled attention bias that
//! amplifies it during the early, low-frequency part of sampling.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Array4, ArrayViewD, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, VideoTensor};
use crate::diffusion::{q_sample, standard_normal, NoiseSchedule};
use crate::error::{Error, Result};
use crate::mmdit::{forward, loss_and_backward, GradTargets, MmDit, ModelConfig, ModelView};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{join, ParamSet};
use crate::prompt::Prompt;
use crate::refadapter::build_conditioning;
use crate::training::{numeric_error, LossLog};

/// Learnable tokens concatenated to the input of every transformer layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyEmbedding {
    pub reference_id: String,
    /// One `n_tokens x dim` block per layer.
    pub tokens: Vec<Array2<f64>>,
}

impl ParamSet for FrequencyEmbedding {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        ParamSet::tensors(&self.tokens)
            .into_iter()
            .map(|(n, t)| (join("tokens", &n), t))
            .collect()
    }
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        ParamSet::tensors_mut(&mut self.tokens)
            .into_iter()
            .map(|(n, t)| (join("tokens", &n), t))
            .collect()
    }
}

impl FrequencyEmbedding {
    pub fn new(cfg: &ModelConfig, n_tokens: usize, init_std: f64, reference_id: impl Into<String>, seed: u64) -> Result<Self> {
        if n_tokens == 0 {
            return Err(Error::Config("frequency embedding needs at least one token".into()));
        }
        if !(init_std.is_finite() && init_std >= 0.0) {
            return Err(Error::Config(format!("invalid init std {init_std}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, init_std).expect("checked std");
        let tokens = (0..cfg.layers)
            .map(|_| Array2::from_shape_simple_fn((n_tokens, cfg.dim), || normal.sample(&mut rng)))
            .collect();
        Ok(Self {
            reference_id: reference_id.into(),
            tokens,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.first().map_or(0, |t| t.nrows())
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        if self.tokens.len() != cfg.layers {
            return Err(Error::Config(format!(
                "frequency embedding has {} layer blocks, model has {} layers",
                self.tokens.len(),
                cfg.layers
            )));
        }
        let n = self.n_tokens();
        if n == 0 {
            return Err(Error::Config("frequency embedding has no tokens".into()));
        }
        for (l, t) in self.tokens.iter().enumerate() {
            if t.dim() != (n, cfg.dim) {
                return Err(Error::Config(format!("frequency block {l} has shape {:?}, expected ({n}, {})", t.dim(), cfg.dim)));
            }
        }
        if !self.all_finite() {
            return Err(Error::Config("frequency embedding contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.tokens
            .iter()
            .zip(&other.tokens)
            .map(|(a, b)| (a - b).mapv(|v| v * v).sum())
            .sum::<f64>()
            .sqrt()
    }
}

/// Shape of the bias curve between the two boundaries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transition {
    /// Cosine half-wave from `alpha` at `t_l` down to 0 at `t_h`.
    #[default]
    Cosine,
    /// `alpha` for `t >= t_l`, else 0.
    StepAtLow,
    /// `alpha` for `t >= t_h`, else 0.
    StepAtHigh,
}

impl Transition {
    pub const ALL: [Transition; 3] = [Transition::Cosine, Transition::StepAtLow, Transition::StepAtHigh];

    pub fn as_str(self) -> &'static str {
        match self {
            Transition::Cosine => "cosine",
            Transition::StepAtLow => "step-at-low",
            Transition::StepAtHigh => "step-at-high",
        }
    }
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Transition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Transition::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown transition {s:?}; expected cosine, step-at-low or step-at-high")))
    }
}

/// Bias strength and boundaries. `t_l` is the larger timestep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasScheduleParams {
    pub alpha: f64,
    pub t_l: f64,
    pub t_h: f64,
    pub horizon: f64,
    pub transition: Transition,
}

impl Default for BiasScheduleParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            t_l: 800.0,
            t_h: 700.0,
            horizon: 1000.0,
            transition: Transition::Cosine,
        }
    }
}

impl BiasScheduleParams {
    pub fn with_alpha(self, alpha: f64) -> Self {
        Self { alpha, ..self }
    }

    pub fn with_transition(self, transition: Transition) -> Self {
        Self { transition, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.alpha, self.t_l, self.t_h, self.horizon].iter().all(|v| v.is_finite());
        if !finite || self.alpha < 0.0 {
            return Err(Error::Config(format!("bias schedule needs finite values and alpha >= 0, got {self:?}")));
        }
        if !(0.0 <= self.t_h && self.t_h < self.t_l && self.t_l <= self.horizon) {
            return Err(Error::Config(format!(
                "bias schedule needs 0 <= t_h < t_l <= T, got t_h={}, t_l={}, T={}",
                self.t_h, self.t_l, self.horizon
            )));
        }
        Ok(())
    }
}

/// Scheduled bias at timestep `t`.
pub fn w_bias(t: f64, p: &BiasScheduleParams) -> Result<f64> {
    p.validate()?;
    if !(0.0..=p.horizon).contains(&t) {
        return Err(Error::Contract(format!("timestep {t} outside [0, {}]", p.horizon)));
    }
    Ok(eval_schedule(t, p))
}

fn eval_schedule(t: f64, p: &BiasScheduleParams) -> f64 {
    match p.transition {
        Transition::Cosine => {
            if t >= p.t_l {
                p.alpha
            } else if t >= p.t_h {
                p.alpha / 2.0 * ((std::f64::consts::PI / (p.t_h - p.t_l) * (t - p.t_l)).cos() + 1.0)
            } else {
                0.0
            }
        }
        Transition::StepAtLow => {
            if t >= p.t_l {
                p.alpha
            } else {
                0.0
            }
        }
        Transition::StepAtHigh => {
            if t >= p.t_h {
                p.alpha
            } else {
                0.0
            }
        }
    }
}

/// Validated schedule as a closure over integer timesteps; timesteps past the
/// horizon are clamped to it.
pub fn bias_hook(p: BiasScheduleParams) -> Result<impl Fn(usize) -> f64> {
    p.validate()?;
    Ok(move |t: usize| eval_schedule((t as f64).min(p.horizon), &p))
}

/// `(t, w_bias(t))` for every integer `t` in `[0, T]`.
pub fn schedule_dump(p: &BiasScheduleParams) -> Result<Vec<(usize, f64)>> {
    p.validate()?;
    let last = p.horizon.floor() as usize;
    Ok((0..=last).map(|t| (t, eval_schedule(t as f64, p))).collect())
}

/// Spatial window shared by every frame of a crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct CroppedClip {
    pub video: VideoTensor,
    pub window: CropWindow,
    /// `(top, left)` used for each frame.
    pub frame_offsets: Vec<(usize, usize)>,
}

/// Random window of at least `min_area_fraction` of the frame, resized back
/// to full resolution with bilinear interpolation. Windows narrower than
/// `min_side` pixels are rejected.
pub fn random_crop(v: &VideoTensor, rng: &mut impl Rng, min_area_fraction: f64, min_side: usize) -> Result<CroppedClip> {
    if !(min_area_fraction > 0.0 && min_area_fraction <= 1.0) {
        return Err(Error::Config(format!("min_area_fraction must lie in (0, 1], got {min_area_fraction}")));
    }
    let (hh, ww) = (v.height(), v.width());
    let area = (hh * ww) as f64;
    let min_h = ((min_area_fraction * area / ww as f64).ceil() as usize).clamp(1, hh);
    let height = rng.random_range(min_h..=hh);
    let min_w = ((min_area_fraction * area / height as f64).ceil() as usize).clamp(1, ww);
    let width = rng.random_range(min_w..=ww);
    if height < min_side.max(1) || width < min_side.max(1) {
        return Err(Error::Degenerate(format!(
            "crop window {height}x{width} is smaller than one latent cell ({min_side} px)"
        )));
    }
    let top = rng.random_range(0..=hh - height);
    let left = rng.random_range(0..=ww - width);
    let window = CropWindow { top, left, height, width };
    let mut out = Array4::zeros(v.data().dim());
    let mut frame_offsets = Vec::with_capacity(v.frames());
    for f in 0..v.frames() {
        frame_offsets.push((top, left));
        let src = v.data().slice(s![f, top..top + height, left..left + width, ..]);
        let resized = resize_bilinear(&src.to_owned(), hh, ww);
        out.slice_mut(s![f, .., .., ..]).assign(&resized);
    }
    Ok(CroppedClip {
        video: VideoTensor::new(out)?,
        window,
        frame_offsets,
    })
}

/// Half-pixel-centred bilinear resize of an `H x W x C` image.
pub fn resize_bilinear(img: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, c) = img.dim();
    let axis = |i: usize, n_in: usize, n_out: usize| {
        let x = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = Array3::zeros((out_h, out_w, c));
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = axis(x, w, out_w);
            for ch in 0..c {
                let top = img[[y0, x0, ch]] * (1.0 - fx) + img[[y0, x1, ch]] * fx;
                let bot = img[[y1, x0, ch]] * (1.0 - fx) + img[[y1, x1, ch]] * fx;
                out[[y, x, ch]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub n_tokens: usize,
    pub init_std: f64,
    pub min_area_fraction: f64,
    pub optim: AdamWConfig,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for FaeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 4,
            n_tokens: 8,
            init_std: 0.1,
            min_area_fraction: 0.6,
            optim: AdamWConfig {
                lr: 5e-3,
                ..Default::default()
            },
            seed: 0,
            log_every: 250,
        }
    }
}

/// Fits a frequency embedding to one reference clip with the base model
/// frozen and no adapter in the graph.
pub fn train_fae(
    base: &MmDit,
    reference: &VideoTensor,
    prompt: &Prompt,
    reference_id: &str,
    codec: &Codec,
    schedule: &NoiseSchedule,
    cfg: &FaeTrainConfig,
) -> Result<(FrequencyEmbedding, LossLog)> {
    let mut emb = FrequencyEmbedding::new(&base.config, cfg.n_tokens, cfg.init_std, reference_id, cfg.seed ^ 0xfae)?;
    let mut opt = AdamW::new(&emb, cfg.optim.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids = prompt.token_ids();
    let mut log = LossLog::default();
    let batch = cfg.batch.max(1);
    for step in 0..cfg.steps {
        let mut grads = emb.zeros_like();
        let mut total = 0.0;
        for _ in 0..batch {
            let crop = random_crop(reference, &mut rng, cfg.min_area_fraction, codec.spatial_factor)?;
            let lv = codec.to_diffusion(&codec.encode_video(&crop.video)?);
            let li = codec.to_diffusion(&codec.encode_image(&crop.video.frame(0))?);
            let t = rng.random_range(0..schedule.steps());
            let noise = standard_normal(lv.shape(), &mut rng);
            let noisy = q_sample(schedule, &lv, t, &noise)?;
            let bundle = build_conditioning(&noisy, &li, false)?;
            let view = ModelView::new(base, &ids).with_freq(Some(&emb));
            let mut targets = GradTargets {
                freq: Some(&mut grads),
                ..Default::default()
            };
            total += loss_and_backward(&view, &bundle.model_input, t, &noise, None, 0.0, 1.0 / batch as f64, &mut targets)
                .map_err(|e| numeric_error(step, t, e))?;
        }
        let loss = total / batch as f64;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Numeric { step, timestep: 0, message: "non-finite embedding loss".into() });
        }
        opt.step(&mut emb, &grads);
        log.push(loss);
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            log::info!("fae step {} loss {:.4}", step + 1, log.smoothed(step + 1, cfg.log_every).unwrap_or(loss));
        }
    }
    Ok((emb, log))
}

/// Video-to-embedding attention averaged over layers, heads and embedding
/// tokens, one `T' x gh x gw` map per timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub timestep: usize,
    pub map: Array3<f64>,
}

/// Noises the reference latent to each timestep (averaging over `draws`
/// noise samples), conditions on its first frame and records attention.
#[allow(clippy::too_many_arguments)]
pub fn extract_attention_maps(
    base: &MmDit,
    freq: Option<&FrequencyEmbedding>,
    reference: &VideoTensor,
    prompt: &Prompt,
    codec: &Codec,
    schedule: &NoiseSchedule,
    timesteps: &[usize],
    draws: usize,
    seed: u64,
) -> Result<Vec<AttentionMap>> {
    let freq = freq.ok_or_else(|| Error::Contract("attention maps need a frequency embedding segment".into()))?;
    let cfg = &base.config;
    let (gh, gw) = cfg.grid();
    let ids = prompt.token_ids();
    let view = ModelView::new(base, &ids).with_freq(Some(freq));
    let lv = codec.to_diffusion(&codec.encode_video(reference)?);
    let li = codec.to_diffusion(&codec.encode_image(&reference.frame(0))?);
    let mut out = Vec::with_capacity(timesteps.len());
    for &t in timesteps {
        if t >= schedule.steps() {
            return Err(Error::Contract(format!("timestep {t} outside [0, {})", schedule.steps())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = vec![0.0; cfg.num_video_tokens()];
        let mut count = 0usize;
        for _ in 0..draws.max(1) {
            let noise = standard_normal(lv.shape(), &mut rng);
            let noisy = q_sample(schedule, &lv, t, &noise)?;
            let bundle = build_conditioning(&noisy, &li, false)?;
            let (_, cache) = forward(&view, &bundle.model_input, t, 0.0)?;
            for l in 0..cache.num_layers() {
                let seg = cache.segments(l);
                let fr = seg.freq.clone().ok_or_else(|| Error::Contract("forward pass has no frequency segment".into()))?;
                for probs in cache.attention(l) {
                    for (i, row) in seg.video.clone().enumerate() {
                        acc[i] += probs.slice(s![row, fr.clone()]).mean().unwrap_or(0.0);
                    }
                    count += 1;
                }
            }
        }
        let map = Array3::from_shape_vec((cfg.latent_slots, gh, gw), acc.into_iter().map(|v| v / count as f64).collect())
            .map_err(|e| Error::Shape(e.to_string()))?;
        out.push(AttentionMap { timestep: t, map });
    }
    Ok(out)
}

/// Fraction of each video token's pixels (over its frames) covered by the
/// per-frame motion masks; same layout as an [`AttentionMap`].
pub fn token_motion_coverage(masks: &[Array2<bool>], codec: &Codec, patch: usize) -> Result<Array3<f64>> {
    let frames = masks.len();
    let (h, w) = masks.first().map(|m| m.dim()).ok_or_else(|| Error::Contract("no motion masks".into()))?;
    let cell = codec.spatial_factor * patch;
    let ft = codec.temporal_factor;
    if frames % ft != 0 || h % cell != 0 || w % cell != 0 {
        return Err(Error::Shape(format!("masks {frames}x{h}x{w} do not tile into {ft}x{cell}x{cell} tokens")));
    }
    let (slots, gh, gw) = (frames / ft, h / cell, w / cell);
    let mut cov = Array3::zeros((slots, gh, gw));
    for (f, m) in masks.iter().enumerate() {
        for ((y, x), &on) in m.indexed_iter() {
            if on {
                cov[[f / ft, y / cell, x / cell]] += 1.0;
            }
        }
    }
    cov /= (ft * cell * cell) as f64;
    Ok(cov)
}

/// Attention-weighted share of the motion region: `sum(map * cov) / sum(map)`.
pub fn motion_region_fraction(map: &Array3<f64>, coverage: &Array3<f64>) -> Result<f64> {
    if map.dim() != coverage.dim() {
        return Err(Error::Shape(format!("map {:?} vs coverage {:?}", map.dim(), coverage.dim())));
    }
    let total = map.sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("attention map has no mass".into()));
    }
    Ok((map * coverage).sum() / total)
}
