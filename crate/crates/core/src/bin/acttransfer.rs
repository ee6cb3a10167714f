use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use acttransfer::fae::{extract_attention_maps, train_fae, BiasScheduleParams, Transition};
use acttransfer::harness::checkpoint::{
    adapter_checkpoint, adapter_from_checkpoint, base_checkpoint, base_from_checkpoint, freq_checkpoint, freq_from_checkpoint,
};
use acttransfer::harness::experiment::ExperimentConfig;
use acttransfer::harness::pipeline::{clips_from_corpus, load_video, save_video, sha256_file};
use acttransfer::harness::viz::{export_attention_map, write_schedule_csv};
use acttransfer::harness::{
    default_output_root, evaluate_run, infer_transfer, load_png_image, require_exists, save_png_image, train_base, Checkpoint,
    CheckpointKind, RunConfig, TransferInputs,
};
use acttransfer::metrics::encoder_from_name;
use acttransfer::prompt::Prompt;
use acttransfer::refadapter::train_refadapter;
use acttransfer::synth_data::{build_corpus, Corpus};
use acttransfer::{Error, Result};

#[derive(Parser)]
#[command(name = "acttransfer", version, about = "Toy action transfer: data, training stages, inference and metrics")]
struct Cli {
    /// TOML run config; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct BiasArgs {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    t_l: Option<f64>,
    #[arg(long)]
    t_h: Option<f64>,
    /// cosine, step-at-low or step-at-high
    #[arg(long)]
    transition: Option<Transition>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        size: Option<usize>,
        /// Also write the demo reference clip and target image.
        #[arg(long)]
        demo: bool,
    },
    /// Stage 0: first-frame image-to-video pretraining.
    TrainBase {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Stage 1: adapter training with random condition frames.
    TrainRefadapter {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Stage 2: fit a frequency embedding to one reference clip.
    TrainFae {
        #[arg(long)]
        base: PathBuf,
        /// Raw video written by gen-data --demo or infer.
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        reference_id: Option<String>,
        /// Rejected: the adapter is never part of this stage.
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Transfer the embedded action onto a target image.
    Infer {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        freq: Option<PathBuf>,
        /// RGB PNG at model resolution.
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        no_replace_first: bool,
        #[command(flatten)]
        bias: BiasArgs,
    },
    /// Score a generated video against its reference.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Heatmaps of video-to-embedding attention per timestep.
    AttnViz {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        freq: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, value_delimiter = ',', default_values_t = vec![900usize, 800, 600, 400, 200])]
        timesteps: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        draws: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write (t, w_bias) for every timestep.
    ScheduleDump {
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        bias: BiasArgs,
    },
}

fn bias_params(base: BiasScheduleParams, a: &BiasArgs) -> Result<BiasScheduleParams> {
    let p = BiasScheduleParams {
        alpha: a.alpha.unwrap_or(base.alpha),
        t_l: a.t_l.unwrap_or(base.t_l),
        t_h: a.t_h.unwrap_or(base.t_h),
        horizon: base.horizon,
        transition: a.transition.unwrap_or(base.transition),
    };
    p.validate()?;
    Ok(p)
}

fn out_or(path: Option<PathBuf>, default: &str) -> PathBuf {
    path.unwrap_or_else(|| default_output_root().join(default))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn provenance_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("provenance.json")
}

fn load_ckpt(path: &Path, kind: CheckpointKind) -> Result<(Checkpoint, String)> {
    require_exists(path, "checkpoint")?;
    let ck = Checkpoint::load_kind(path, kind)?;
    Ok((ck, sha256_file(path)?))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => {
            require_exists(p, "config")?;
            RunConfig::from_toml_file(p)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let seed = cfg.seed;
    let codec = cfg.codec;
    let schedule = cfg.schedule.build()?;
    match cli.command {
        Command::GenData { out, size, demo } => {
            if let Some(n) = size {
                cfg.corpus.size = n;
            }
            let out = out_or(out, "corpus");
            let manifest = build_corpus(&cfg.corpus, seed, &out)?;
            println!("wrote {} items to {}", manifest.items.len(), out.display());
            if demo {
                let exp = ExperimentConfig {
                    run: cfg.clone(),
                    ..Default::default()
                };
                let (reference, _) = exp.reference_clip()?;
                let rp = out.join("reference_zigzag.rgb");
                save_video(&rp, &reference, Some(seed), json!({ "prompt": exp.reference.prompt().render(), "motion": exp.reference_motion }))?;
                let tp = out.join("target.png");
                save_png_image(&tp, &exp.target_image()?)?;
                println!("wrote {} and {}", rp.display(), tp.display());
            }
        }
        Command::TrainBase { corpus, out, steps } => {
            require_exists(&corpus, "corpus")?;
            if let Some(s) = steps {
                cfg.base.steps = s;
            }
            let c = Corpus::load(&corpus)?;
            let model_cfg = cfg.model_for(c.manifest.frames, c.manifest.height, c.manifest.width)?;
            let clips = clips_from_corpus(&c)?;
            let tc = acttransfer::harness::BaseTrainConfig { seed, ..cfg.base.clone() };
            let (model, log) = train_base(&model_cfg, &clips, &codec, &schedule, &tc)?;
            let out = out_or(out, "base.ckpt");
            let hash = base_checkpoint(&model).save(&out)?;
            log.write_csv(&out.with_extension("loss.csv"))?;
            write_json(&provenance_path(&out), &json!({ "stage": "train-base", "seed": seed, "corpus_manifest_sha256": c.manifest_hash()?, "checkpoint_sha256": hash, "config": tc }))?;
            println!("base checkpoint {} ({hash}), final loss {:.4}", out.display(), log.smoothed(log.len(), 100).unwrap_or(f64::NAN));
        }
        Command::TrainRefadapter { corpus, base, out, steps } => {
            require_exists(&corpus, "corpus")?;
            let (bck, bhash) = load_ckpt(&base, CheckpointKind::Base)?;
            let model = base_from_checkpoint(&bck)?;
            if let Some(s) = steps {
                cfg.refadapter.steps = s;
            }
            let c = Corpus::load(&corpus)?;
            let tc = acttransfer::refadapter::RefAdapterTrainConfig { seed, ..cfg.refadapter.clone() };
            let (adapter, log) = train_refadapter(&model, &clips_from_corpus(&c)?, &codec, &schedule, &tc)?;
            let out = out_or(out, "adapter.ckpt");
            let hash = adapter_checkpoint(&adapter, &model.config).save(&out)?;
            log.write_csv(&out.with_extension("loss.csv"))?;
            write_json(&provenance_path(&out), &json!({ "stage": "train-refadapter", "seed": seed, "base_sha256": bhash, "corpus_manifest_sha256": c.manifest_hash()?, "checkpoint_sha256": hash, "config": tc }))?;
            println!("adapter checkpoint {} ({hash})", out.display());
        }
        Command::TrainFae { base, reference, prompt, reference_id, adapter, out, steps } => {
            if let Some(a) = adapter {
                return Err(Error::Config(format!(
                    "train-fae never loads an adapter (got {}); the embedding is fitted on the base alone",
                    a.display()
                )));
            }
            log::info!("train-fae: adapter not loaded for this stage");
            let (bck, bhash) = load_ckpt(&base, CheckpointKind::Base)?;
            let model = base_from_checkpoint(&bck)?;
            require_exists(&reference, "reference video")?;
            let video = load_video(&reference)?;
            let p = Prompt::parse(&prompt)?;
            if let Some(s) = steps {
                cfg.fae.steps = s;
            }
            let rid = reference_id.unwrap_or_else(|| reference.file_stem().map_or("reference".into(), |s| s.to_string_lossy().into_owned()));
            let tc = acttransfer::fae::FaeTrainConfig { seed, ..cfg.fae.clone() };
            let (emb, log) = train_fae(&model, &video, &p, &rid, &codec, &schedule, &tc)?;
            let out = out_or(out, "freq.ckpt");
            let hash = freq_checkpoint(&emb, &model.config).save(&out)?;
            log.write_csv(&out.with_extension("loss.csv"))?;
            write_json(&provenance_path(&out), &json!({ "stage": "train-fae", "seed": seed, "adapter_loaded": false, "base_sha256": bhash, "reference_sha256": sha256_file(&reference)?, "prompt": p.render(), "checkpoint_sha256": hash, "config": tc }))?;
            println!("embedding checkpoint {} ({hash})", out.display());
        }
        Command::Infer { base, adapter, freq, target, prompt, out, steps, no_replace_first, bias } => {
            let (bck, bhash) = load_ckpt(&base, CheckpointKind::Base)?;
            let adapter_ck = adapter.as_deref().map(|p| load_ckpt(p, CheckpointKind::Adapter)).transpose()?;
            let freq_ck = freq.as_deref().map(|p| load_ckpt(p, CheckpointKind::FreqEmb)).transpose()?;
            require_exists(&target, "target image")?;
            let model = base_from_checkpoint(&bck)?;
            let adapter_w = adapter_ck.as_ref().map(|(c, _)| adapter_from_checkpoint(c)).transpose()?;
            let freq_w = freq_ck.as_ref().map(|(c, _)| freq_from_checkpoint(c)).transpose()?;
            let img = load_png_image(&target)?;
            let p = Prompt::parse(&prompt)?;
            let params = bias_params(cfg.bias, &bias)?;
            if let Some(s) = steps {
                cfg.sampling.num_steps = s;
            }
            if no_replace_first {
                cfg.sampling.replace_first = false;
            }
            let inputs = TransferInputs {
                base: &model,
                adapter: adapter_w.as_ref(),
                freq: freq_w.as_ref(),
                target: &img,
                prompt: &p,
                schedule_params: params,
                sampling: &cfg.sampling,
                seed,
            };
            let video = infer_transfer(&inputs, &codec, &schedule)?;
            let out = out_or(out, "generated.rgb");
            let provenance = json!({
                "stage": "infer",
                "base_sha256": bhash,
                "adapter_sha256": adapter_ck.as_ref().map(|(_, h)| h),
                "freq_sha256": freq_ck.as_ref().map(|(_, h)| h),
                "target_sha256": sha256_file(&target)?,
                "prompt": p.render(),
                "schedule": params,
                "sampling": cfg.sampling,
            });
            save_video(&out, &video, Some(seed), provenance)?;
            println!("wrote {} ({} frames)", out.display(), video.frames());
        }
        Command::Eval { generated, reference, prompt, csv, run_id } => {
            require_exists(&generated, "generated video")?;
            require_exists(&reference, "reference video")?;
            let enc = encoder_from_name(&cfg.encoder.name)?;
            let g = load_video(&generated)?;
            let r = load_video(&reference)?;
            let id = run_id.unwrap_or_else(|| generated.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned()));
            let report = evaluate_run(&g, &r, &prompt, enc.as_ref(), &id, seed)?;
            let csv = out_or(csv, "metrics.csv");
            ensure_parent(&csv)?;
            report.append_csv(&csv)?;
            print!("{}", report.summary());
        }
        Command::AttnViz { base, freq, reference, prompt, timesteps, draws, out } => {
            let (bck, _) = load_ckpt(&base, CheckpointKind::Base)?;
            let (fck, _) = load_ckpt(&freq, CheckpointKind::FreqEmb)?;
            require_exists(&reference, "reference video")?;
            let model = base_from_checkpoint(&bck)?;
            let emb = freq_from_checkpoint(&fck)?;
            let video = load_video(&reference)?;
            let maps = extract_attention_maps(&model, Some(&emb), &video, &Prompt::parse(&prompt)?, &codec, &schedule, &timesteps, draws, seed)?;
            let out = out_or(out, "attn");
            for m in &maps {
                let files = export_attention_map(&out, m, 16)?;
                println!("t={} -> {} files in {}", m.timestep, files.len(), out.display());
            }
        }
        Command::ScheduleDump { out, bias } => {
            let params = bias_params(cfg.bias, &bias)?;
            let out = out_or(out, "schedule.csv");
            ensure_parent(&out)?;
            write_schedule_csv(&out, &params)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
