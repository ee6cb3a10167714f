//! DDPM noise schedule, forward noising, the noise-prediction objective and a
//! deterministic DDIM sampler.

use ndarray::{s, Array4, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::LatentGrid;
use crate::error::{Error, Result};
use crate::refadapter::build_conditioning;

/// Anything that predicts the added noise from a channel-concatenated input.
pub trait Denoiser {
    fn predict_noise(&self, input: &LatentGrid, t: usize, bias: f64) -> Result<LatentGrid>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 2e-2).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(Error::Config(format!("invalid beta range [{beta_start}, {beta_end}]")));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::Contract(format!("timestep {t} outside [0, {})", self.steps())));
        }
        Ok(())
    }

    /// Sampler timesteps: `num_steps` values strided uniformly from `T-1` down to 0.
    pub fn timesteps(&self, num_steps: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if num_steps < 1 || num_steps > total {
            return Err(Error::Contract(format!("num_steps {num_steps} outside [1, {total}]")));
        }
        if num_steps == 1 {
            return Ok(vec![total - 1]);
        }
        Ok((0..num_steps)
            .map(|i| ((total - 1) as f64 * (num_steps - 1 - i) as f64 / (num_steps - 1) as f64).round() as usize)
            .collect())
    }
}

/// `sqrt(abar_t) * l0 + sqrt(1 - abar_t) * noise`.
pub fn q_sample(schedule: &NoiseSchedule, l0: &LatentGrid, t: usize, noise: &Array4<f64>) -> Result<LatentGrid> {
    schedule.check_t(t)?;
    if noise.dim() != l0.shape() {
        return Err(Error::Contract(format!("noise {:?} does not match latent {:?}", noise.dim(), l0.shape())));
    }
    Ok(l0.with_data(q_sample_with(schedule.alpha_bars[t], &l0.data, noise)))
}

pub(crate) fn q_sample_with(alpha_bar: f64, l0: &Array4<f64>, noise: &Array4<f64>) -> Array4<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let mut out = Array4::zeros(l0.dim());
    Zip::from(&mut out).and(l0).and(noise).for_each(|o, &x, &n| *o = a * x + b * n);
    out
}

pub fn standard_normal(shape: (usize, usize, usize, usize), rng: &mut impl rand::Rng) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// Mean squared error between a prediction and the added noise, optionally
/// restricted to a subset of temporal slots. Returns the loss and its gradient
/// with respect to the prediction.
pub fn masked_mse(pred: &Array4<f64>, noise: &Array4<f64>, slot_mask: Option<&[bool]>) -> (f64, Array4<f64>) {
    let slots = pred.dim().0;
    let active: Vec<bool> = match slot_mask {
        Some(m) => (0..slots).map(|i| m.get(i).copied().unwrap_or(true)).collect(),
        None => vec![true; slots],
    };
    let per_slot = pred.len() / slots.max(1);
    let count = (active.iter().filter(|a| **a).count() * per_slot).max(1) as f64;
    let mut grad = pred - noise;
    let mut sum = 0.0;
    for (i, &on) in active.iter().enumerate() {
        let mut g = grad.slice_mut(s![i, .., .., ..]);
        if on {
            sum += g.iter().map(|v| v * v).sum::<f64>();
            g.mapv_inplace(|v| 2.0 * v / count);
        } else {
            g.fill(0.0);
        }
    }
    (sum / count, grad)
}

/// Noise-prediction objective for one conditioned input.
pub fn denoising_loss(model: &dyn Denoiser, conditioned_input: &LatentGrid, t: usize, noise: &Array4<f64>, bias: f64) -> Result<f64> {
    let pred = model.predict_noise(conditioned_input, t, bias)?;
    if pred.shape() != noise.dim() {
        return Err(Error::Shape(format!("prediction {:?} does not match noise {:?}", pred.shape(), noise.dim())));
    }
    if pred.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            step: 0,
            timestep: t,
            message: "model produced non-finite noise prediction".into(),
        });
    }
    Ok(masked_mse(&pred.data, noise, None).0)
}

/// Inputs to one sampling run.
#[derive(Clone, Debug)]
pub struct SampleRequest<'a> {
    /// Single-slot condition latent.
    pub image_latent: &'a LatentGrid,
    /// Temporal slots of the generated latent.
    pub slots: usize,
    /// Overwrite slot 0 of the video side with the condition latent.
    pub replace_first: bool,
    pub num_steps: usize,
    pub seed: u64,
}

/// Deterministic DDIM (eta = 0). `bias_hook`, when given, is evaluated at the
/// diffusion timestep of every step and passed to every attention layer.
pub fn sample(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    req: &SampleRequest,
    bias_hook: Option<&dyn Fn(usize) -> f64>,
) -> Result<LatentGrid> {
    let ts = schedule.timesteps(req.num_steps)?;
    let (_, h, w, c) = req.image_latent.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut x = req.image_latent.with_data(standard_normal((req.slots, h, w, c), &mut rng));
    for (i, &t) in ts.iter().enumerate() {
        let bias = bias_hook.map_or(0.0, |f| f(t));
        let bundle = build_conditioning(&x, req.image_latent, req.replace_first)?;
        let eps = model.predict_noise(&bundle.model_input, t, bias)?;
        if eps.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                step: i,
                timestep: t,
                message: "non-finite noise prediction while sampling".into(),
            });
        }
        let ab = schedule.alpha_bars[t];
        let ab_prev = ts.get(i + 1).map_or(1.0, |&tp| schedule.alpha_bars[tp]);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        let current = if req.replace_first { bundle.video_side } else { x.data };
        let mut next = Array4::zeros(current.dim());
        Zip::from(&mut next)
            .and(&current)
            .and(&eps.data)
            .for_each(|o, &xt, &e| {
                let x0 = (xt - sb * e) / sa;
                *o = pa * x0 + pb * e;
            });
        x = req.image_latent.with_data(next);
    }
    if req.replace_first {
        x.data.slice_mut(s![0..1, .., .., ..]).assign(&req.image_latent.data);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::Rng;

    #[test]
    fn schedule_is_monotone() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert!(s.betas.iter().all(|b| *b > 0.0 && *b < 1.0));
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bars[0] > 0.9998);
        assert!(s.alpha_bars[999] < 1e-4);
    }

    #[test]
    fn timestep_striding() {
        let s = NoiseSchedule::default();
        let ts = s.timesteps(50).unwrap();
        assert_eq!((ts[0], ts[49], ts.len()), (999, 0, 50));
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.timesteps(1000).unwrap(), (0..1000).rev().collect::<Vec<_>>());
        assert!(s.timesteps(0).is_err());
        assert!(s.timesteps(1001).is_err());
    }

    #[test]
    fn q_sample_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l0 = LatentGrid::new(standard_normal((2, 2, 2, 3), &mut rng), 1, 1);
        let n = standard_normal((2, 2, 2, 3), &mut rng);
        let clean = NoiseSchedule { betas: vec![0.0, 1.0], alpha_bars: vec![1.0, 0.0] };
        assert_eq!(q_sample(&clean, &l0, 0, &n).unwrap(), l0);
        assert_eq!(q_sample(&clean, &l0, 1, &n).unwrap().data, n);
        assert!(q_sample(&clean, &l0, 2, &n).is_err());
        let bad = Array4::zeros((1, 2, 2, 3));
        assert!(matches!(q_sample(&clean, &l0, 0, &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn q_sample_variance_matches_closed_form() {
        // Each element of l0 has variance 0.25 (uniform on [-sqrt(0.75), sqrt(0.75)]).
        let s = NoiseSchedule::default();
        let t = 300;
        let ab = s.alpha_bars[t];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let half = 0.75f64.sqrt();
        let draws = 10_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..draws {
            let l0 = LatentGrid::new(Array::from_shape_simple_fn((1, 1, 1, 1), || rng.random_range(-half..half)), 1, 1);
            let n = standard_normal((1, 1, 1, 1), &mut rng);
            let x = q_sample(&s, &l0, t, &n).unwrap().data[[0, 0, 0, 0]];
            sum += x;
            sq += x * x;
        }
        let mean = sum / draws as f64;
        let var = sq / draws as f64 - mean * mean;
        let expected = ab * 0.25 + (1.0 - ab);
        // Standard error of a variance estimate is about var * sqrt(2 / n).
        assert!((var - expected).abs() < 4.0 * expected * (2.0 / draws as f64).sqrt(), "{var} vs {expected}");
    }

    struct Oracle(Array4<f64>);
    impl Denoiser for Oracle {
        fn predict_noise(&self, input: &LatentGrid, _t: usize, _b: f64) -> Result<LatentGrid> {
            Ok(input.with_data(self.0.clone()))
        }
    }

    #[test]
    fn loss_of_exact_and_zero_predictor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = standard_normal((4, 16, 16, 24), &mut rng);
        let input = LatentGrid::zeros((4, 16, 16, 48), 1, 1);
        assert_eq!(denoising_loss(&Oracle(noise.clone()), &input, 5, &noise, 0.0).unwrap(), 0.0);
        let zero = denoising_loss(&Oracle(Array4::zeros(noise.dim())), &input, 5, &noise, 0.0).unwrap();
        // 24576 draws of chi-squared(1)/n: standard error about 0.009.
        assert!((zero - 1.0).abs() < 0.05, "{zero}");
        let bad = Oracle(Array4::from_elem(noise.dim(), f64::NAN));
        assert!(matches!(denoising_loss(&bad, &input, 7, &noise, 0.0), Err(Error::Numeric { timestep: 7, .. })));
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = standard_normal((2, 3, 3, 2), &mut rng);
        let pred = standard_normal((2, 3, 3, 2), &mut rng);
        let (a, _) = masked_mse(&pred, &noise, None);
        let mut idx: Vec<usize> = (0..noise.len()).collect();
        idx.reverse();
        idx.swap(0, 7);
        let permute = |x: &Array4<f64>| {
            let flat: Vec<f64> = x.iter().copied().collect();
            Array4::from_shape_vec(x.dim(), idx.iter().map(|&i| flat[i]).collect()).unwrap()
        };
        let (b, _) = masked_mse(&permute(&pred), &permute(&noise), None);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn masked_mse_ignores_masked_slots() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = standard_normal((3, 2, 2, 2), &mut rng);
        let mut pred = noise.clone();
        pred.slice_mut(s![0, .., .., ..]).fill(100.0);
        let (l, g) = masked_mse(&pred, &noise, Some(&[false, true, true]));
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }
}
