//! The toy transfer experiment behind the ablation comparisons: train all
//! three stages for one seed, then sample and score a fixed set of variants.

use serde::{Deserialize, Serialize};

use crate::codec::{ImageTensor, VideoTensor};
use crate::error::{Error, Result};
use crate::fae::{extract_attention_maps, motion_region_fraction, token_motion_coverage, train_fae, FrequencyEmbedding, Transition};
use crate::metrics::{EncoderHandle, MetricReport, ToyEncoder};
use crate::mmdit::MmDit;
use crate::prompt::{color_rgb, Prompt};
use crate::refadapter::{train_refadapter, AdapterWeights, RefAdapterTrainConfig};
use crate::synth_data::{make_trajectory, motion_masks, render_frame, render_video, FrameGeometry, Shape, SpriteScene, TrajectoryKind, TrajectorySpec};
use crate::training::LossLog;

use super::pipeline::{evaluate_run, infer_transfer, synthetic_clips, train_base, TransferInputs};
use super::RunConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubjectSpec {
    pub shape: Shape,
    pub color: String,
    pub size: f64,
    pub background: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub reference: SubjectSpec,
    pub reference_motion: TrajectorySpec,
    pub target: SubjectSpec,
    /// Sampling seeds averaged per variant.
    pub eval_samples: usize,
    pub attention_draws: usize,
    pub attention_timesteps: (usize, usize),
}

impl Default for SubjectSpec {
    fn default() -> Self {
        Self {
            shape: Shape::Square,
            color: "red".into(),
            size: 9.0,
            background: [0.08, 0.08, 0.10],
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            reference: SubjectSpec::default(),
            reference_motion: TrajectorySpec {
                kind: TrajectoryKind::Zigzag,
                amplitude: 0.8,
                period: 4.0,
                phase: 0.0,
                num_frames: 8,
            },
            target: SubjectSpec {
                shape: Shape::Circle,
                color: "blue".into(),
                size: 9.0,
                background: [0.25, 0.20, 0.30],
            },
            eval_samples: 4,
            attention_draws: 4,
            attention_timesteps: (800, 200),
        }
    }
}

impl SubjectSpec {
    pub fn scene(&self) -> Result<SpriteScene> {
        let color = color_rgb(&self.color).ok_or_else(|| Error::Config(format!("unknown colour {:?}", self.color)))?;
        let scene = SpriteScene {
            shape: self.shape,
            color,
            size: self.size,
            background: self.background,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn prompt(&self) -> Prompt {
        Prompt {
            color: Some(self.color.clone()),
            shape: Some(self.shape),
            action: None,
        }
    }
}

/// Sampling variants compared per seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Adapter, embedding and the cosine schedule.
    Full,
    /// Adapter and embedding with the bias switched off.
    AlphaZero,
    StepAtLow,
    StepAtHigh,
    /// Embedding and schedule on the base alone.
    NoAdapter,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::AlphaZero, Variant::StepAtLow, Variant::StepAtHigh, Variant::NoAdapter];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::AlphaZero => "alpha-zero",
            Variant::StepAtLow => "step-at-low",
            Variant::StepAtHigh => "step-at-high",
            Variant::NoAdapter => "no-adapter",
        }
    }
}

/// Metrics of one variant averaged over sampling seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantScore {
    pub variant: Variant,
    pub motion_fidelity: f64,
    pub motion_missing: usize,
    pub appearance_consistency: f64,
    pub temporal_consistency: f64,
    pub text_similarity: f64,
    pub reports: Vec<MetricReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub base_loss: LossLog,
    pub adapter_loss: LossLog,
    pub fae_loss: LossLog,
    pub scores: Vec<VariantScore>,
    pub attention_fraction_high: f64,
    pub attention_fraction_low: f64,
}

impl SeedOutcome {
    pub fn score(&self, v: Variant) -> &VariantScore {
        self.scores.iter().find(|s| s.variant == v).expect("all variants scored")
    }
}

/// Trained artefacts of one seed, kept for inspection.
pub struct TrainedSetup {
    pub base: MmDit,
    pub adapter: AdapterWeights,
    pub freq: FrequencyEmbedding,
    pub reference: VideoTensor,
    pub target: ImageTensor,
}

impl ExperimentConfig {
    /// Reference clip and its motion masks.
    pub fn reference_clip(&self) -> Result<(VideoTensor, Vec<ndarray::Array2<bool>>)> {
        let c = &self.run.corpus;
        let scene = self.reference.scene()?;
        let geom = FrameGeometry { height: c.height, width: c.width, sprite_size: self.reference.size };
        let spec = TrajectorySpec { num_frames: c.num_frames, ..self.reference_motion.clone() };
        let poses = make_trajectory(&spec, &geom)?;
        Ok((render_video(&scene, &poses, c.height, c.width)?, motion_masks(&scene, &poses, c.height, c.width)))
    }

    /// Target subject at the reference's starting position.
    pub fn target_image(&self) -> Result<ImageTensor> {
        let c = &self.run.corpus;
        let geom = FrameGeometry { height: c.height, width: c.width, sprite_size: self.target.size };
        let spec = TrajectorySpec { num_frames: c.num_frames, ..self.reference_motion.clone() };
        let start = make_trajectory(&spec, &geom)?[0];
        render_frame(&self.target.scene()?, &start, c.height, c.width)
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Trains base, adapter and embedding for `seed`.
pub fn train_setup(cfg: &ExperimentConfig, seed: u64) -> Result<(TrainedSetup, [LossLog; 3])> {
    let run = &cfg.run;
    let codec = run.codec;
    let schedule = run.schedule.build()?;
    let model_cfg = run.resolved_model()?;
    let clips = synthetic_clips(&run.corpus, seed)?;
    log::info!("seed {seed}: training base for {} steps", run.base.steps);
    let (base, base_loss) = train_base(&model_cfg, &clips, &codec, &schedule, &super::BaseTrainConfig { seed, ..run.base.clone() })?;
    log::info!("seed {seed}: training adapter for {} steps", run.refadapter.steps);
    let (adapter, adapter_loss) = train_refadapter(&base, &clips, &codec, &schedule, &RefAdapterTrainConfig { seed, ..run.refadapter.clone() })?;
    let (reference, _) = cfg.reference_clip()?;
    log::info!("seed {seed}: training frequency embedding for {} steps", run.fae.steps);
    let fae_cfg = crate::fae::FaeTrainConfig { seed, ..run.fae.clone() };
    let (freq, fae_loss) = train_fae(&base, &reference, &cfg.reference.prompt(), "reference", &codec, &schedule, &fae_cfg)?;
    let target = cfg.target_image()?;
    Ok((TrainedSetup { base, adapter, freq, reference, target }, [base_loss, adapter_loss, fae_loss]))
}

/// Samples and scores one variant over `cfg.eval_samples` sampling seeds.
pub fn score_variant(cfg: &ExperimentConfig, setup: &TrainedSetup, variant: Variant, seed: u64, enc: &dyn EncoderHandle) -> Result<VariantScore> {
    let run = &cfg.run;
    let schedule = run.schedule.build()?;
    let params = match variant {
        Variant::AlphaZero => run.bias.with_alpha(0.0),
        Variant::StepAtLow => run.bias.with_transition(Transition::StepAtLow),
        Variant::StepAtHigh => run.bias.with_transition(Transition::StepAtHigh),
        Variant::Full | Variant::NoAdapter => run.bias,
    };
    let adapter = (variant != Variant::NoAdapter).then_some(&setup.adapter);
    let prompt = cfg.target.prompt();
    let text = prompt.render();
    let mut reports = Vec::new();
    for k in 0..cfg.eval_samples.max(1) {
        let sample_seed = seed.wrapping_mul(1000).wrapping_add(k as u64);
        let inputs = TransferInputs {
            base: &setup.base,
            adapter,
            freq: Some(&setup.freq),
            target: &setup.target,
            prompt: &prompt,
            schedule_params: params,
            sampling: &run.sampling,
            seed: sample_seed,
        };
        let video = infer_transfer(&inputs, &run.codec, &schedule)?;
        let id = format!("seed{seed}-{}-{k}", variant.as_str());
        reports.push(evaluate_run(&video, &setup.reference, &text, enc, &id, sample_seed)?);
    }
    Ok(VariantScore {
        variant,
        motion_fidelity: mean(reports.iter().filter_map(|r| r.motion_fidelity)),
        motion_missing: reports.iter().filter(|r| r.motion_fidelity_missing).count(),
        appearance_consistency: mean(reports.iter().map(|r| r.appearance_consistency)),
        temporal_consistency: mean(reports.iter().map(|r| r.temporal_consistency)),
        text_similarity: mean(reports.iter().map(|r| r.text_similarity)),
        reports,
    })
}

/// Attention-weighted motion-region share at the two diagnostic timesteps.
pub fn attention_fractions(cfg: &ExperimentConfig, setup: &TrainedSetup, seed: u64) -> Result<(f64, f64)> {
    let run = &cfg.run;
    let schedule = run.schedule.build()?;
    let (_, masks) = cfg.reference_clip()?;
    let cov = token_motion_coverage(&masks, &run.codec, setup.base.config.patch)?;
    let (hi, lo) = cfg.attention_timesteps;
    let maps = extract_attention_maps(
        &setup.base,
        Some(&setup.freq),
        &setup.reference,
        &cfg.reference.prompt(),
        &run.codec,
        &schedule,
        &[hi, lo],
        cfg.attention_draws,
        seed,
    )?;
    Ok((motion_region_fraction(&maps[0].map, &cov)?, motion_region_fraction(&maps[1].map, &cov)?))
}

/// Full per-seed experiment.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(SeedOutcome, TrainedSetup)> {
    let (setup, [base_loss, adapter_loss, fae_loss]) = train_setup(cfg, seed)?;
    let enc = ToyEncoder::default();
    let scores = Variant::ALL
        .into_iter()
        .map(|v| score_variant(cfg, &setup, v, seed, &enc))
        .collect::<Result<Vec<_>>>()?;
    let (attention_fraction_high, attention_fraction_low) = attention_fractions(cfg, &setup, seed)?;
    Ok((
        SeedOutcome {
            seed,
            base_loss,
            adapter_loss,
            fae_loss,
            scores,
            attention_fraction_high,
            attention_fraction_low,
        },
        setup,
    ))
}

/// Median of a nonempty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Plain-text comparison of the schedule variants across seeds.
pub fn transition_report(outcomes: &[SeedOutcome]) -> String {
    let mut out = String::from("variant,seed,motion_fidelity,appearance_consistency,temporal_consistency,text_similarity\n");
    for v in [Variant::Full, Variant::StepAtLow, Variant::StepAtHigh, Variant::AlphaZero] {
        for o in outcomes {
            let s = o.score(v);
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                v.as_str(),
                o.seed,
                s.motion_fidelity,
                s.appearance_consistency,
                s.temporal_consistency,
                s.text_similarity
            ));
        }
    }
    for v in [Variant::Full, Variant::StepAtLow, Variant::StepAtHigh, Variant::AlphaZero] {
        let mf: Vec<f64> = outcomes.iter().map(|o| o.score(v).motion_fidelity).collect();
        let ac: Vec<f64> = outcomes.iter().map(|o| o.score(v).appearance_consistency).collect();
        out.push_str(&format!("{},median,{:.6},{:.6},,\n", v.as_str(), median(&mf), median(&ac)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_subjects() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let cfg = ExperimentConfig::default();
        let (v, masks) = cfg.reference_clip().unwrap();
        assert_eq!((v.frames(), masks.len()), (8, 8));
        let t = cfg.target_image().unwrap();
        assert_eq!((t.height(), t.width()), (32, 32));
        assert_eq!(cfg.target.prompt().render(), "blue circle");
    }
}
