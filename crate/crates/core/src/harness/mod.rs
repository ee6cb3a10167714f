//! Run configuration, checkpoints and the staged pipeline: base
//! pretraining, adapter training, per-reference embedding training,
//! inference, evaluation and diagnostics.

pub mod checkpoint;
pub mod experiment;
pub mod pipeline;
pub mod viz;

use std::fmt;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{Codec, ImageTensor};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::fae::{BiasScheduleParams, FaeTrainConfig};
use crate::mmdit::ModelConfig;
use crate::refadapter::RefAdapterTrainConfig;
use crate::synth_data::CorpusConfig;

pub use checkpoint::{Checkpoint, CheckpointKind};
pub use pipeline::{evaluate_run, infer_transfer, train_base, BaseTrainConfig, SamplingConfig, TransferInputs};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "ACTTRANSFER_OUTPUT_ROOT";

pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    TrainBase,
    TrainRefadapter,
    TrainFae,
    Infer,
    Eval,
    AttnViz,
    ScheduleDump,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::GenData,
        Stage::TrainBase,
        Stage::TrainRefadapter,
        Stage::TrainFae,
        Stage::Infer,
        Stage::Eval,
        Stage::AttnViz,
        Stage::ScheduleDump,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainBase => "train-base",
            Stage::TrainRefadapter => "train-refadapter",
            Stage::TrainFae => "train-fae",
            Stage::Infer => "infer",
            Stage::Eval => "eval",
            Stage::AttnViz => "attn-viz",
            Stage::ScheduleDump => "schedule-dump",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Full hyperparameter record of a run, loadable from TOML.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub codec: Codec,
    pub schedule: ScheduleConfig,
    pub base: BaseTrainConfig,
    pub refadapter: RefAdapterTrainConfig,
    pub fae: FaeTrainConfig,
    pub bias: BiasScheduleParams,
    pub sampling: SamplingConfig,
    pub encoder: EncoderConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub name: String,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { name: "toy".into() }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.schedule.build()?;
        self.bias.validate()?;
        self.resolved_model()?;
        Ok(())
    }

    /// Model config with latent sizes derived from the corpus and codec.
    pub fn resolved_model(&self) -> Result<ModelConfig> {
        self.model_for(self.corpus.num_frames, self.corpus.height, self.corpus.width)
    }

    /// Model config for clips of the given size, with the beta range taken from `schedule`.
    pub fn model_for(&self, frames: usize, height: usize, width: usize) -> Result<ModelConfig> {
        let model = ModelConfig {
            train_timesteps: self.schedule.steps,
            beta_start: self.schedule.beta_start,
            beta_end: self.schedule.beta_end,
            ..self.model.clone()
        };
        pipeline::model_config_for(&model, &self.codec, frames, height, width)
    }
}

/// Fails with a configuration error unless `path` exists.
pub fn require_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Config(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

pub fn load_png_image(path: &Path) -> Result<ImageTensor> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Config(format!("{}: only 8-bit PNGs are supported", path.display())));
    }
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::Config(format!("{}: unsupported colour type {other:?}", path.display()))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let data = ndarray::Array3::from_shape_fn((h, w, 3), |(y, x, c)| buf[(y * w + x) * channels + c] as f64 / 255.0);
    ImageTensor::new(data)
}

pub fn save_png_image(path: &Path, img: &ImageTensor) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let bytes: Vec<u8> = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Serde(e.to_string()))?;
    writer.write_image_data(&bytes).map_err(|e| Error::Serde(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        let partial = RunConfig::from_toml_str("seed = 4\n[base]\nsteps = 10\n").unwrap();
        assert_eq!((partial.seed, partial.base.steps, partial.base.batch), (4, 10, 8));
        assert!(RunConfig::from_toml_str("[bias]\nt_h = 900.0\n").is_err());
        assert_eq!(cfg.resolved_model().unwrap(), ModelConfig::default());
    }

    #[test]
    fn stages_parse() {
        for s in Stage::ALL {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
        }
    }

    #[test]
    fn png_round_trip_is_quantised() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let img = ImageTensor::new(ndarray::Array3::from_shape_fn((4, 5, 3), |(y, x, c)| ((y + x + c) % 5) as f64 / 4.0)).unwrap();
        save_png_image(&p, &img).unwrap();
        let back = load_png_image(&p).unwrap();
        assert!(back.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
    }
}
