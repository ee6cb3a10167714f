#![allow(dead_code)]

use acttransfer::codec::LatentGrid;
use acttransfer::diffusion::denoising_loss;
use acttransfer::fae::FrequencyEmbedding;
use acttransfer::mmdit::{loss_and_backward, GradTargets, MmDit, ModelConfig, ModelView};
use acttransfer::params::ParamSet;
use acttransfer::refadapter::AdapterWeights;
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_array(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn(shape, || rng.random::<f64>() * 2.0 - 1.0)
}

pub fn grad_check_config() -> ModelConfig {
    ModelConfig {
        dim: 16,
        layers: 1,
        heads: 2,
        patch: 2,
        mlp_ratio: 2,
        time_embed_dim: 8,
        latent_slots: 2,
        latent_height: 4,
        latent_width: 4,
        latent_channels: 3,
        ..Default::default()
    }
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl GradReport {
    fn merge(&mut self, group: &str, name: String, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        self.checked += 1;
        if rel > self.max_rel {
            self.max_rel = rel;
            self.worst = format!("{group}:{name} analytic {analytic:e} numeric {numeric:e}");
        }
    }
}

fn named_indices<P: ParamSet>(p: &P) -> Vec<String> {
    p.tensors()
        .into_iter()
        .flat_map(|(n, t)| (0..t.len()).map(move |i| format!("{n}[{i}]")))
        .collect()
}

/// Central differences over every parameter of the base, an adapter with
/// non-zero factors and a frequency embedding, with a positive bias active.
pub fn run_gradient_check() -> GradReport {
    let cfg = grad_check_config();
    let mut base = MmDit::new(cfg.clone(), 3).unwrap();
    let mut adapter = AdapterWeights::new(&cfg, 2, 0.7, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (_, mut t) in adapter.tensors_mut() {
        t.mapv_inplace(|_| rng.random::<f64>() * 0.4 - 0.2);
    }
    let mut freq = FrequencyEmbedding::new(&cfg, 3, 0.5, "grad", 6).unwrap();
    let shape = (2, 4, 4, 3);
    let input = LatentGrid::new(random_array((2, 4, 4, 6), 7), 1, 1);
    let noise = random_array(shape, 8);
    let prompt = [1usize, 10, 14];
    let (t, bias) = (640, 0.8);

    let mut gb = base.zeros_like();
    let mut ga = adapter.zeros_like();
    let mut gf = freq.zeros_like();
    {
        let view = ModelView::new(&base, &prompt).with_adapter(Some(&adapter)).with_freq(Some(&freq));
        let mut targets = GradTargets {
            base: Some(&mut gb),
            adapter: Some(&mut ga),
            freq: Some(&mut gf),
        };
        loss_and_backward(&view, &input, t, &noise, None, bias, 1.0, &mut targets).unwrap();
    }

    let h = 1e-5;
    let loss = |b: &MmDit, a: &AdapterWeights, f: &FrequencyEmbedding| {
        let view = ModelView::new(b, &prompt).with_adapter(Some(a)).with_freq(Some(f));
        denoising_loss(&view, &input, t, &noise, bias).unwrap()
    };
    let mut report = GradReport::default();
    for (i, name) in named_indices(&base).into_iter().enumerate() {
        let x = base.get_flat(i).unwrap();
        base.set_flat(i, x + h);
        let up = loss(&base, &adapter, &freq);
        base.set_flat(i, x - h);
        let down = loss(&base, &adapter, &freq);
        base.set_flat(i, x);
        report.merge("base", name, gb.get_flat(i).unwrap(), (up - down) / (2.0 * h));
    }
    for (i, name) in named_indices(&adapter).into_iter().enumerate() {
        let x = adapter.get_flat(i).unwrap();
        adapter.set_flat(i, x + h);
        let up = loss(&base, &adapter, &freq);
        adapter.set_flat(i, x - h);
        let down = loss(&base, &adapter, &freq);
        adapter.set_flat(i, x);
        report.merge("adapter", name, ga.get_flat(i).unwrap(), (up - down) / (2.0 * h));
    }
    for (i, name) in named_indices(&freq).into_iter().enumerate() {
        let x = freq.get_flat(i).unwrap();
        freq.set_flat(i, x + h);
        let up = loss(&base, &adapter, &freq);
        freq.set_flat(i, x - h);
        let down = loss(&base, &adapter, &freq);
        freq.set_flat(i, x);
        report.merge("freq", name, gf.get_flat(i).unwrap(), (up - down) / (2.0 * h));
    }
    report
}
