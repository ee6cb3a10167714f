use acttransfer::codec::Codec;
use acttransfer::diffusion::NoiseSchedule;
use acttransfer::fae::{train_fae, FaeTrainConfig};
use acttransfer::harness::experiment::ExperimentConfig;
use acttransfer::harness::pipeline::model_config_for;
use acttransfer::mmdit::{MmDit, ModelConfig};
use acttransfer::prompt::Prompt;
use acttransfer::synth_data::{CorpusConfig, TrajectoryKind};

#[test]
fn different_references_give_different_embeddings() {
    let codec = Codec::default();
    let small = ModelConfig { dim: 16, layers: 1, heads: 2, time_embed_dim: 8, ..Default::default() };
    let base = MmDit::new(model_config_for(&small, &codec, 8, 32, 32).unwrap(), 1).unwrap();
    let schedule = NoiseSchedule::default();
    let cfg = FaeTrainConfig { steps: 20, batch: 1, n_tokens: 2, log_every: 0, ..Default::default() };
    let (zigzag, _) = ExperimentConfig::default().reference_clip().unwrap();
    let other = (0..64)
        .map(|i| CorpusConfig::default().sample_item(7, i).unwrap())
        .find(|m| m.trajectory.kind == TrajectoryKind::Orbit)
        .unwrap();
    let orbit = other.render(32, 32).unwrap();
    let prompt = Prompt::parse("red square").unwrap();
    let (a, la) = train_fae(&base, &zigzag, &prompt, "zigzag", &codec, &schedule, &cfg).unwrap();
    let (b, _) = train_fae(&base, &orbit, &prompt, "orbit", &codec, &schedule, &cfg).unwrap();
    let (a2, la2) = train_fae(&base, &zigzag, &prompt, "zigzag", &codec, &schedule, &cfg).unwrap();
    assert_eq!(a, a2);
    assert_eq!(la, la2);
    assert_eq!(la.len(), 20);
    assert!(a.distance(&b) > 1e-6, "embeddings coincide");
    assert_eq!((a.reference_id.as_str(), b.reference_id.as_str()), ("zigzag", "orbit"));
}
