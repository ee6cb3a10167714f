//! Stage 0 base training, transfer inference and run evaluation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{Codec, ImageTensor, VideoTensor};
use crate::diffusion::{q_sample, sample, standard_normal, NoiseSchedule, SampleRequest};
use crate::error::{Error, Result};
use crate::fae::{bias_hook, BiasScheduleParams, FrequencyEmbedding};
use crate::metrics::{
    appearance_consistency, fill_invalid, motion_fidelity, resample, temporal_consistency, text_similarity,
    track_centroids, EncoderHandle, MetricReport,
};
use crate::mmdit::{loss_and_backward, GradTargets, MmDit, ModelConfig, ModelView};
use crate::optim::{AdamW, AdamWConfig};
use crate::prompt::Prompt;
use crate::refadapter::{build_conditioning, inject_adapter, TrainingClip};
use crate::synth_data::{Corpus, CorpusConfig, Tracklets};
use crate::training::{numeric_error, LossLog, PromptDropout};

/// In-memory corpus drawn with [`CorpusConfig::sample_item`].
pub fn synthetic_clips(cfg: &CorpusConfig, seed: u64) -> Result<Vec<TrainingClip>> {
    cfg.validate()?;
    (0..cfg.size)
        .map(|i| {
            let meta = cfg.sample_item(seed, i)?;
            Ok(TrainingClip {
                video: meta.render(cfg.height, cfg.width)?,
                prompt: Prompt::parse(&meta.prompt)?,
            })
        })
        .collect()
}

pub fn clips_from_corpus(corpus: &Corpus) -> Result<Vec<TrainingClip>> {
    corpus
        .items
        .iter()
        .map(|it| {
            Ok(TrainingClip {
                video: it.video.clone(),
                prompt: Prompt::parse(&it.meta.prompt)?,
            })
        })
        .collect()
}

/// Model configuration matching a corpus resolution under a codec.
pub fn model_config_for(base: &ModelConfig, codec: &Codec, frames: usize, height: usize, width: usize) -> Result<ModelConfig> {
    let (s, h, w, c) = codec.latent_shape(frames, height, width)?;
    let cfg = ModelConfig {
        latent_slots: s,
        latent_height: h,
        latent_width: w,
        latent_channels: c,
        ..base.clone()
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optim: AdamWConfig,
    pub dropout: PromptDropout,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 8,
            optim: AdamWConfig::default(),
            dropout: PromptDropout::default(),
            seed: 0,
            log_every: 500,
        }
    }
}

/// Stage 0: first-frame-conditioned image-to-video training of the base.
pub fn train_base(
    model_cfg: &ModelConfig,
    corpus: &[TrainingClip],
    codec: &Codec,
    schedule: &NoiseSchedule,
    cfg: &BaseTrainConfig,
) -> Result<(MmDit, LossLog)> {
    if corpus.is_empty() && cfg.steps > 0 {
        return Err(Error::InsufficientData("base training needs at least one clip".into()));
    }
    let mut model = MmDit::new(model_cfg.clone(), cfg.seed ^ 0xba5e)?;
    let mut opt = AdamW::new(&model, cfg.optim.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = LossLog::default();
    let batch = cfg.batch.max(1);
    for step in 0..cfg.steps {
        let mut grads = model.zeros_like();
        let mut total = 0.0;
        for _ in 0..batch {
            let clip = &corpus[rng.random_range(0..corpus.len())];
            let lv = codec.to_diffusion(&codec.encode_video(&clip.video)?);
            let li = codec.to_diffusion(&codec.encode_image(&clip.video.frame(0))?);
            let t = rng.random_range(0..schedule.steps());
            let noise = standard_normal(lv.shape(), &mut rng);
            let noisy = q_sample(schedule, &lv, t, &noise)?;
            let bundle = build_conditioning(&noisy, &li, false)?;
            let ids = cfg.dropout.apply(&clip.prompt, &mut rng).token_ids();
            let view = ModelView::new(&model, &ids);
            let mut targets = GradTargets {
                base: Some(&mut grads),
                ..Default::default()
            };
            total += loss_and_backward(&view, &bundle.model_input, t, &noise, None, 0.0, 1.0 / batch as f64, &mut targets)
                .map_err(|e| numeric_error(step, t, e))?;
        }
        let loss = total / batch as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric { step, timestep: 0, message: "non-finite base loss".into() });
        }
        opt.step(&mut model, &grads);
        log.push(loss);
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            log::info!("base step {} loss {:.4}", step + 1, log.smoothed(step + 1, cfg.log_every).unwrap_or(loss));
        }
    }
    Ok((model, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub num_steps: usize,
    /// First-slot replacement at inference; only applied when an adapter is loaded.
    pub replace_first: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            num_steps: 50,
            replace_first: true,
        }
    }
}

/// One transfer request. Absent adapter or embedding means the base path.
#[derive(Clone, Copy)]
pub struct TransferInputs<'a> {
    pub base: &'a MmDit,
    pub adapter: Option<&'a crate::refadapter::AdapterWeights>,
    pub freq: Option<&'a FrequencyEmbedding>,
    pub target: &'a ImageTensor,
    pub prompt: &'a Prompt,
    pub schedule_params: BiasScheduleParams,
    pub sampling: &'a SamplingConfig,
    pub seed: u64,
}

/// Composes the base with the optional adapter and embedding, conditions on
/// the target image and samples with the scheduled bias. The embedding is
/// attached only when alpha is positive.
pub fn infer_transfer(inputs: &TransferInputs, codec: &Codec, schedule: &NoiseSchedule) -> Result<VideoTensor> {
    let cfg = &inputs.base.config;
    let (eh, ew) = (cfg.latent_height * codec.spatial_factor, cfg.latent_width * codec.spatial_factor);
    if (inputs.target.height(), inputs.target.width()) != (eh, ew) {
        return Err(Error::Config(format!(
            "target image is {}x{}, model expects {eh}x{ew}",
            inputs.target.height(),
            inputs.target.width()
        )));
    }
    if codec.channels() != cfg.latent_channels {
        return Err(Error::Config(format!(
            "codec yields {} channels, model expects {}",
            codec.channels(),
            cfg.latent_channels
        )));
    }
    inputs.schedule_params.validate()?;
    if let Some(f) = inputs.freq {
        f.check_compatible(cfg)?;
    }
    let ids = inputs.prompt.token_ids();
    let freq = inputs.freq.filter(|_| inputs.schedule_params.alpha > 0.0);
    let view = match inputs.adapter {
        Some(a) => inject_adapter(inputs.base, a, &ids)?,
        None => ModelView::new(inputs.base, &ids),
    }
    .with_freq(freq);
    let li = codec.to_diffusion(&codec.encode_image(inputs.target)?);
    let req = SampleRequest {
        image_latent: &li,
        slots: cfg.latent_slots,
        replace_first: inputs.sampling.replace_first && inputs.adapter.is_some(),
        num_steps: inputs.sampling.num_steps,
        seed: inputs.seed,
    };
    let latent = match freq {
        Some(_) => {
            let hook = bias_hook(inputs.schedule_params)?;
            sample(&view, schedule, &req, Some(&hook))?
        }
        _ => sample(&view, schedule, &req, None)?,
    };
    let (video, clamped) = codec.decode_for_display(&codec.from_diffusion(&latent))?;
    if clamped > 0 {
        log::debug!("clamped {clamped} decoded values into [0, 1]");
    }
    Ok(video)
}

/// Motion fidelity between the tracked centroids of two videos, resampling
/// the generated track to the reference length. `None` when either track has
/// fewer than two valid frames.
pub fn tracked_motion_fidelity(reference: &Tracklets, generated: &Tracklets) -> Result<Option<f64>> {
    let (Ok(r), Ok(g)) = (fill_invalid(reference), fill_invalid(generated)) else {
        return Ok(None);
    };
    let g = resample(&g, r.len());
    let full = |p: Vec<[f64; 2]>| Tracklets { valid: vec![true; p.len()], positions: p };
    Ok(Some(motion_fidelity(&full(r), &full(g))?))
}

/// All four metrics for one generated video.
pub fn evaluate_run(
    generated: &VideoTensor,
    reference: &VideoTensor,
    prompt: &str,
    enc: &dyn EncoderHandle,
    run_id: &str,
    seed: u64,
) -> Result<MetricReport> {
    let mf = tracked_motion_fidelity(&track_centroids(reference), &track_centroids(generated))?;
    Ok(MetricReport {
        run_id: run_id.to_string(),
        seed,
        text_similarity: text_similarity(generated, prompt, enc)?,
        motion_fidelity: mf,
        motion_fidelity_missing: mf.is_none(),
        temporal_consistency: temporal_consistency(generated, enc)?,
        appearance_consistency: appearance_consistency(generated, enc)?,
    })
}

/// Dimensions written next to every raw video file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoSidecar {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub layout: String,
    pub seed: Option<u64>,
    #[serde(default)]
    pub provenance: serde_json::Value,
}

pub const VIDEO_LAYOUT: &str = "rgb8, frame-major, row-major, interleaved channels";

pub fn sidecar_path(video: &Path) -> std::path::PathBuf {
    video.with_extension("json")
}

pub fn save_video(path: &Path, v: &VideoTensor, seed: Option<u64>, provenance: serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, v.to_bytes()).map_err(|e| Error::io(path, e))?;
    let side = VideoSidecar {
        frames: v.frames(),
        height: v.height(),
        width: v.width(),
        layout: VIDEO_LAYOUT.into(),
        seed,
        provenance,
    };
    let sp = sidecar_path(path);
    std::fs::write(&sp, serde_json::to_vec_pretty(&side)?).map_err(|e| Error::io(&sp, e))
}

pub fn load_video(path: &Path) -> Result<VideoTensor> {
    let sp = sidecar_path(path);
    let side: VideoSidecar = serde_json::from_slice(&std::fs::read(&sp).map_err(|e| Error::io(&sp, e))?)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    VideoTensor::from_bytes(&bytes, side.frames, side.height, side.width)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ToyEncoder;
    use crate::synth_data::{make_trajectory, render_video, FrameGeometry, Shape, SpriteScene, TrajectoryKind, TrajectorySpec};

    fn zigzag() -> VideoTensor {
        let scene = SpriteScene {
            shape: Shape::Square,
            color: [0.9, 0.2, 0.2],
            size: 8.0,
            background: [0.05, 0.05, 0.1],
        };
        let spec = TrajectorySpec { kind: TrajectoryKind::Zigzag, amplitude: 0.8, period: 4.0, phase: 0.0, num_frames: 8 };
        let geom = FrameGeometry { height: 32, width: 32, sprite_size: 8.0 };
        render_video(&scene, &make_trajectory(&spec, &geom).unwrap(), 32, 32).unwrap()
    }

    #[test]
    fn self_evaluation() {
        let v = zigzag();
        let r = evaluate_run(&v, &v, "red square", &ToyEncoder::default(), "self", 0).unwrap();
        assert_eq!(r.motion_fidelity, Some(1.0));
        let still = VideoTensor::from_frames(&vec![v.frame(0); 8]).unwrap();
        let r = evaluate_run(&still, &v, "red square", &ToyEncoder::default(), "still", 0).unwrap();
        assert!((r.temporal_consistency - 1.0).abs() < 1e-12);
        assert!((r.appearance_consistency - 1.0).abs() < 1e-12);
    }

    #[test]
    fn video_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.rgb");
        let v = zigzag();
        save_video(&p, &v, Some(3), serde_json::json!({"k": 1})).unwrap();
        assert_eq!(load_video(&p).unwrap(), VideoTensor::from_bytes(&v.to_bytes(), 8, 32, 32).unwrap());
    }
}
