//! Low-rank adapter on the attention projections, and the reference-frame
//! conditioning protocol it is trained with.
//!
//! Training differs from plain image-to-video training in two ways: the
//! condition frame is drawn uniformly from the clip instead of being the
//! first frame, and temporal slot 0 of the noisy video latent is overwritten
//! with the condition latent so it acts as a reference rather than a start.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array4, ArrayViewD, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{pad_image_latent, Codec, ImageTensor, LatentGrid, VideoTensor};
use crate::diffusion::{q_sample, standard_normal, NoiseSchedule};
use crate::error::{Error, Result};
use crate::mmdit::{loss_and_backward, GradTargets, MmDit, ModelConfig, ModelView};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{impl_param_set, join, ParamSet};
use crate::prompt::Prompt;
use crate::training::{numeric_error, LossLog, PromptDropout};

pub const PROJECTIONS: [&str; 4] = ["q", "k", "v", "o"];

/// `x -> scale * (x down) up`, with `down: dim x r` and `up: r x dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    pub down: Array2<f64>,
    pub up: Array2<f64>,
}
impl_param_set!(LoraPair { down, up });

#[derive(Clone, Debug, PartialEq)]
pub struct LayerLora {
    pub q: LoraPair,
    pub k: LoraPair,
    pub v: LoraPair,
    pub o: LoraPair,
}
impl_param_set!(LayerLora { q, k, v, o });

impl LayerLora {
    pub fn get(&self, which: usize) -> &LoraPair {
        match which {
            0 => &self.q,
            1 => &self.k,
            2 => &self.v,
            _ => &self.o,
        }
    }

    pub fn get_mut(&mut self, which: usize) -> &mut LoraPair {
        match which {
            0 => &mut self.q,
            1 => &mut self.k,
            2 => &mut self.v,
            _ => &mut self.o,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterWeights {
    pub rank: usize,
    pub scale: f64,
    pub layers: Vec<LayerLora>,
}

impl ParamSet for AdapterWeights {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        ParamSet::tensors(&self.layers)
            .into_iter()
            .map(|(n, t)| (join("blocks", &n), t))
            .collect()
    }
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        ParamSet::tensors_mut(&mut self.layers)
            .into_iter()
            .map(|(n, t)| (join("blocks", &n), t))
            .collect()
    }
}

impl AdapterWeights {
    /// Fresh adapter: Gaussian down factors, zero up factors.
    pub fn new(cfg: &ModelConfig, rank: usize, scale: f64, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (cfg.dim as f64).sqrt()).expect("valid std");
        let mut pair = || LoraPair {
            down: Array2::from_shape_simple_fn((cfg.dim, rank), || normal.sample(&mut rng)),
            up: Array2::zeros((rank, cfg.dim)),
        };
        let layers = (0..cfg.layers)
            .map(|_| LayerLora {
                q: pair(),
                k: pair(),
                v: pair(),
                o: pair(),
            })
            .collect();
        Ok(Self { rank, scale, layers })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    /// Target projection names, matching [`MmDit::projection_names`].
    pub fn target_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|l| PROJECTIONS.map(|p| format!("blocks.{l}.{p}")))
            .collect()
    }

    fn pair_names(&self) -> Vec<(String, usize, usize)> {
        self.target_names()
            .into_iter()
            .enumerate()
            .map(|(i, n)| (n, i / 4, i % 4))
            .collect()
    }

    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        let model_names: Vec<String> = (0..cfg.layers)
            .flat_map(|l| PROJECTIONS.map(|p| format!("blocks.{l}.{p}")))
            .collect();
        let mine = self.target_names();
        let unmatched: Vec<&String> = mine.iter().filter(|n| !model_names.contains(n)).collect();
        let uncovered: Vec<&String> = model_names.iter().filter(|n| !mine.contains(n)).collect();
        if !unmatched.is_empty() || !uncovered.is_empty() {
            return Err(Error::Config(format!(
                "adapter targets do not match model: unmatched {unmatched:?}, uncovered {uncovered:?}"
            )));
        }
        for (name, l, p) in self.pair_names() {
            let pair = self.layers[l].get(p);
            if pair.down.dim() != (cfg.dim, self.rank) || pair.up.dim() != (self.rank, cfg.dim) {
                return Err(Error::Config(format!(
                    "adapter target {name} has factors {:?}/{:?}, expected {}x{r}/{r}x{}",
                    pair.down.dim(),
                    pair.up.dim(),
                    cfg.dim,
                    cfg.dim,
                    r = self.rank
                )));
            }
        }
        Ok(())
    }

    /// Rebuilds an adapter from named factor arrays (`blocks.{l}.{proj}.{down|up}`).
    pub fn from_named(cfg: &ModelConfig, rank: usize, scale: f64, mut arrays: BTreeMap<String, Array2<f64>>) -> Result<Self> {
        let mut adapter = Self::new(cfg, rank, scale, 0)?;
        let mut missing = Vec::new();
        for (name, mut t) in adapter.tensors_mut() {
            match arrays.remove(&name) {
                Some(a) if a.shape() == t.shape() => t.assign(&a.into_dyn()),
                Some(a) => {
                    return Err(Error::Config(format!("adapter array {name} has shape {:?}, expected {:?}", a.shape(), t.shape())))
                }
                None => missing.push(name),
            }
        }
        if !missing.is_empty() || !arrays.is_empty() {
            let unmatched: Vec<String> = arrays.into_keys().collect();
            return Err(Error::Config(format!(
                "adapter arrays do not match model targets: missing {missing:?}, unmatched {unmatched:?}"
            )));
        }
        Ok(adapter)
    }
}

/// Validates that `adapter` covers every attention projection of `model` and
/// returns a view computing `base(x) + scale * up(down(x))` on each of them.
pub fn inject_adapter<'a>(model: &'a MmDit, adapter: &'a AdapterWeights, prompt: &'a [usize]) -> Result<ModelView<'a>> {
    adapter.check_compatible(&model.config)?;
    Ok(ModelView::new(model, prompt).with_adapter(Some(adapter)))
}

/// Uniformly random frame of a clip.
pub fn select_condition_frame(video: &VideoTensor, rng: &mut impl Rng) -> Result<(ImageTensor, usize)> {
    if video.frames() < 2 {
        return Err(Error::Degenerate(format!(
            "need at least 2 frames to pick a condition frame, got {}",
            video.frames()
        )));
    }
    let index = rng.random_range(0..video.frames());
    Ok((video.frame(index), index))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    /// `[padded condition | video side]` along channels, `2C` channels.
    pub model_input: LatentGrid,
    /// The video-side latent after optional first-slot replacement.
    pub video_side: Array4<f64>,
    pub condition_frame_index: Option<usize>,
    pub replaced_first_slot: bool,
}

/// Builds the channel-concatenated model input.
pub fn build_conditioning(video_side: &LatentGrid, image_latent: &LatentGrid, replace_first: bool) -> Result<ConditioningBundle> {
    let (slots, h, w, c) = video_side.shape();
    let (one, ih, iw, ic) = image_latent.shape();
    if one != 1 {
        return Err(Error::Contract(format!("image latent must have 1 temporal slot, got {one}")));
    }
    if (ih, iw, ic) != (h, w, c) {
        return Err(Error::Shape(format!(
            "image latent {:?} incompatible with video latent {:?}",
            image_latent.shape(),
            video_side.shape()
        )));
    }
    let mut video = video_side.data.clone();
    if replace_first {
        video.slice_mut(s![0..1, .., .., ..]).assign(&image_latent.data);
    }
    let padded = pad_image_latent(image_latent, slots)?;
    let mut input = Array4::zeros((slots, h, w, 2 * c));
    input.slice_mut(s![.., .., .., ..c]).assign(&padded.data);
    input.slice_mut(s![.., .., .., c..]).assign(&video);
    Ok(ConditioningBundle {
        model_input: video_side.with_data(input),
        video_side: video,
        condition_frame_index: None,
        replaced_first_slot: replace_first,
    })
}

/// A training clip with its prompt.
#[derive(Clone, Debug)]
pub struct TrainingClip {
    pub video: VideoTensor,
    pub prompt: Prompt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefAdapterTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub rank: usize,
    pub scale: f64,
    pub optim: AdamWConfig,
    pub dropout: PromptDropout,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for RefAdapterTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            rank: 8,
            scale: 1.0,
            optim: AdamWConfig {
                lr: 1e-4,
                ..Default::default()
            },
            dropout: PromptDropout::default(),
            seed: 0,
            log_every: 200,
        }
    }
}

/// Trains only the adapter; `base` is borrowed immutably throughout.
pub fn train_refadapter(
    base: &MmDit,
    corpus: &[TrainingClip],
    codec: &Codec,
    schedule: &NoiseSchedule,
    cfg: &RefAdapterTrainConfig,
) -> Result<(AdapterWeights, LossLog)> {
    if corpus.is_empty() && cfg.steps > 0 {
        return Err(Error::InsufficientData("adapter training needs at least one clip".into()));
    }
    let mut adapter = AdapterWeights::new(&base.config, cfg.rank, cfg.scale, cfg.seed ^ 0xada)?;
    let mut opt = AdamW::new(&adapter, cfg.optim.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = LossLog::default();
    let mut mask = vec![true; base.config.latent_slots];
    mask[0] = false;
    let batch = cfg.batch.max(1);
    for step in 0..cfg.steps {
        let mut grads = adapter.zeros_like();
        let mut total = 0.0;
        for _ in 0..batch {
            let clip = &corpus[rng.random_range(0..corpus.len())];
            let (frame, _) = select_condition_frame(&clip.video, &mut rng)?;
            let lv = codec.to_diffusion(&codec.encode_video(&clip.video)?);
            let li = codec.to_diffusion(&codec.encode_image(&frame)?);
            let t = rng.random_range(0..schedule.steps());
            let noise = standard_normal(lv.shape(), &mut rng);
            let noisy = q_sample(schedule, &lv, t, &noise)?;
            let bundle = build_conditioning(&noisy, &li, true)?;
            let ids = cfg.dropout.apply(&clip.prompt, &mut rng).token_ids();
            let view = inject_adapter(base, &adapter, &ids)?;
            let mut targets = GradTargets {
                adapter: Some(&mut grads),
                ..Default::default()
            };
            total += loss_and_backward(&view, &bundle.model_input, t, &noise, Some(&mask), 0.0, 1.0 / batch as f64, &mut targets)
                .map_err(|e| numeric_error(step, t, e))?;
        }
        let loss = total / batch as f64;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Numeric { step, timestep: 0, message: "non-finite adapter loss".into() });
        }
        opt.step(&mut adapter, &grads);
        log.push(loss);
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            log::info!("refadapter step {} loss {:.4}", step + 1, log.smoothed(step + 1, cfg.log_every).unwrap_or(loss));
        }
    }
    Ok((adapter, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::Denoiser;
    use ndarray::Array;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            dim: 16,
            layers: 2,
            heads: 2,
            latent_slots: 2,
            latent_height: 4,
            latent_width: 4,
            latent_channels: 12,
            ..Default::default()
        }
    }

    fn random_latent(shape: (usize, usize, usize, usize), seed: u64) -> LatentGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentGrid::new(Array::from_shape_simple_fn(shape, || rng.random::<f64>() - 0.5), 1, 2)
    }

    #[test]
    fn condition_frame_is_uniform() {
        let v = VideoTensor::new(Array4::from_shape_fn((2, 2, 2, 3), |(t, ..)| t as f64)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 10_000;
        let mut ones = 0;
        for _ in 0..draws {
            let (f, i) = select_condition_frame(&v, &mut rng).unwrap();
            assert_eq!(f, v.frame(i));
            ones += i;
        }
        let p = ones as f64 / draws as f64;
        // Binomial standard error 0.005; allow four of them.
        assert!((p - 0.5).abs() < 0.02, "{p}");
        let a = select_condition_frame(&v, &mut ChaCha8Rng::seed_from_u64(4)).unwrap().1;
        let b = select_condition_frame(&v, &mut ChaCha8Rng::seed_from_u64(4)).unwrap().1;
        assert_eq!(a, b);
        let single = VideoTensor::new(Array4::zeros((1, 2, 2, 3))).unwrap();
        assert!(matches!(select_condition_frame(&single, &mut rng), Err(Error::Degenerate(_))));
    }

    #[test]
    fn conditioning_laws() {
        let lv = random_latent((4, 3, 3, 5), 1);
        let li = random_latent((1, 3, 3, 5), 2);
        let plain = build_conditioning(&lv, &li, false).unwrap();
        assert_eq!(plain.model_input.channels(), 10);
        assert_eq!(plain.model_input.data.slice(s![.., .., .., 5..]), lv.data);
        assert_eq!(plain.model_input.data.slice(s![0, .., .., ..5]), li.data.slice(s![0, .., .., ..]));
        assert!(plain.model_input.data.slice(s![1.., .., .., ..5]).iter().all(|v| *v == 0.0));
        let rep = build_conditioning(&lv, &li, true).unwrap();
        assert!(rep.replaced_first_slot);
        assert_eq!(rep.model_input.data.slice(s![0, .., .., 5..]), li.data.slice(s![0, .., .., ..]));
        assert_eq!(rep.model_input.data.slice(s![1.., .., .., 5..]), lv.data.slice(s![1.., .., .., ..]));
        let bad = random_latent((1, 3, 3, 4), 3);
        assert!(matches!(build_conditioning(&lv, &bad, false), Err(Error::Shape(_))));
        assert!(build_conditioning(&lv, &lv, false).is_err());
    }

    #[test]
    fn zero_init_and_zero_scale_are_identity() {
        let cfg = small_cfg();
        let model = MmDit::new(cfg.clone(), 5).unwrap();
        let ids = [1, 2, 3];
        let input = random_latent((2, 4, 4, 24), 6);
        let base = ModelView::new(&model, &ids).predict_noise(&input, 400, 0.0).unwrap();
        let fresh = AdapterWeights::new(&cfg, 4, 1.0, 7).unwrap();
        let adapted = inject_adapter(&model, &fresh, &ids).unwrap().predict_noise(&input, 400, 0.0).unwrap();
        assert_eq!(adapted, base);
        let mut trained = fresh.clone();
        for l in &mut trained.layers {
            l.q.up.fill(0.3);
            l.o.up.fill(-0.2);
        }
        let changed = inject_adapter(&model, &trained, &ids).unwrap().predict_noise(&input, 400, 0.0).unwrap();
        assert_ne!(changed, base);
        trained.scale = 0.0;
        let off = inject_adapter(&model, &trained, &ids).unwrap().predict_noise(&input, 400, 0.0).unwrap();
        assert_eq!(off, base);
    }

    #[test]
    fn parameter_count_is_two_d_r_per_target() {
        let cfg = ModelConfig::default();
        for rank in [1, 4, 8] {
            let a = AdapterWeights::new(&cfg, rank, 1.0, 0).unwrap();
            assert_eq!(a.num_params(), 4 * cfg.layers * 2 * cfg.dim * rank);
        }
    }

    #[test]
    fn mismatched_adapters_list_names() {
        let cfg = small_cfg();
        let model = MmDit::new(cfg.clone(), 0).unwrap();
        let mut deeper = cfg.clone();
        deeper.layers = 3;
        let a = AdapterWeights::new(&deeper, 2, 1.0, 0).unwrap();
        match inject_adapter(&model, &a, &[0, 0, 0]) {
            Err(Error::Config(msg)) => assert!(msg.contains("blocks.2.q"), "{msg}"),
            other => panic!("expected config error, got {:?}", other.map(|_| ())),
        }
        let good = AdapterWeights::new(&cfg, 2, 1.0, 0).unwrap();
        let mut named: BTreeMap<String, Array2<f64>> = good
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.into_dimensionality().unwrap().to_owned()))
            .collect();
        assert_eq!(AdapterWeights::from_named(&cfg, 2, 1.0, named.clone()).unwrap(), good);
        named.remove("blocks.1.v.up");
        match AdapterWeights::from_named(&cfg, 2, 1.0, named) {
            Err(Error::Config(msg)) => assert!(msg.contains("blocks.1.v.up")),
            _ => panic!("expected config error"),
        }
    }

    #[test]
    fn zero_steps_returns_initialisation_and_base_is_untouched() {
        let cfg = small_cfg();
        let model = MmDit::new(cfg.clone(), 1).unwrap();
        let codec = Codec::new(1, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clip = TrainingClip {
            video: VideoTensor::new(Array4::from_shape_simple_fn((2, 8, 8, 3), || rng.random())).unwrap(),
            prompt: Prompt::parse("red square").unwrap(),
        };
        let sched = NoiseSchedule::default();
        let mut tc = RefAdapterTrainConfig { steps: 0, seed: 9, ..Default::default() };
        let (a0, log) = train_refadapter(&model, std::slice::from_ref(&clip), &codec, &sched, &tc).unwrap();
        assert!(log.is_empty());
        assert_eq!(a0, AdapterWeights::new(&cfg, tc.rank, tc.scale, 9 ^ 0xada).unwrap());
        let before = model.snapshot();
        tc.steps = 3;
        tc.batch = 2;
        let (a3, log) = train_refadapter(&model, &[clip], &codec, &sched, &tc).unwrap();
        assert_eq!(log.len(), 3);
        assert_ne!(a3, a0);
        assert_eq!(model.snapshot(), before);
    }
}
