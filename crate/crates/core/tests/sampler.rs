mod common;

use acttransfer::codec::{Codec, LatentGrid};
use acttransfer::diffusion::{sample, Denoiser, NoiseSchedule, SampleRequest};
use acttransfer::refadapter::build_conditioning;
use acttransfer::Result;
use ndarray::{s, Array4};

/// Returns the exact noise that maps `x0` to the current video side.
struct Oracle<'a> {
    x0: &'a Array4<f64>,
    schedule: &'a NoiseSchedule,
    channels: usize,
}

impl Denoiser for Oracle<'_> {
    fn predict_noise(&self, input: &LatentGrid, t: usize, _bias: f64) -> Result<LatentGrid> {
        let ab = self.schedule.alpha_bars[t];
        let xt = input.data.slice(s![.., .., .., self.channels..]).to_owned();
        let eps = (xt - self.x0 * ab.sqrt()) / (1.0 - ab).sqrt();
        Ok(input.with_data(eps))
    }
}

#[test]
fn ddim_with_an_exact_denoiser_recovers_the_clean_latent() {
    let schedule = NoiseSchedule::default();
    let codec = Codec::default();
    let x0 = common::random_array((4, 8, 8, codec.channels()), 12);
    let li = LatentGrid::new(x0.slice(s![0..1, .., .., ..]).to_owned(), 2, 4);
    let oracle = Oracle { x0: &x0, schedule: &schedule, channels: codec.channels() };
    for steps in [1, 50, 1000] {
        let req = SampleRequest { image_latent: &li, slots: 4, replace_first: true, num_steps: steps, seed: 3 };
        let out = sample(&oracle, &schedule, &req, None).unwrap();
        let err = (&out.data - &x0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-9, "{steps} steps: max error {err:e}");
    }
}

#[test]
fn timestep_subsequences_are_strided_and_descending() {
    let schedule = NoiseSchedule::default();
    let ts = schedule.timesteps(50).unwrap();
    assert_eq!(ts.len(), 50);
    assert_eq!(ts[0], 999);
    assert!(ts.windows(2).all(|w| w[0] > w[1]));
    assert_eq!(schedule.timesteps(1000).unwrap(), (0..1000).rev().collect::<Vec<_>>());
}

#[test]
fn bias_hook_sees_every_sampled_timestep() {
    let schedule = NoiseSchedule::default();
    let x0 = common::random_array((2, 2, 2, 3), 1);
    let li = LatentGrid::new(x0.slice(s![0..1, .., .., ..]).to_owned(), 1, 1);
    let oracle = Oracle { x0: &x0, schedule: &schedule, channels: 3 };
    let seen = std::cell::RefCell::new(Vec::new());
    let hook = |t: usize| {
        seen.borrow_mut().push(t);
        0.0
    };
    let req = SampleRequest { image_latent: &li, slots: 2, replace_first: false, num_steps: 20, seed: 0 };
    sample(&oracle, &schedule, &req, Some(&hook)).unwrap();
    assert_eq!(*seen.borrow(), schedule.timesteps(20).unwrap());
    let b = build_conditioning(&li, &li, false).unwrap();
    assert_eq!(b.model_input.channels(), 6);
}
