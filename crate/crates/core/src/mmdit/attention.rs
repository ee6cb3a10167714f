use std::ops::Range;

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Segment boundaries of a joint token sequence: `[prompt | freq | video]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    pub prompt: Range<usize>,
    pub freq: Option<Range<usize>>,
    pub video: Range<usize>,
}

impl Segments {
    pub fn new(prompt_len: usize, freq_len: usize, video_len: usize) -> Self {
        let freq = (freq_len > 0).then(|| prompt_len..prompt_len + freq_len);
        let video_start = prompt_len + freq_len;
        Self {
            prompt: 0..prompt_len,
            freq,
            video: video_start..video_start + video_len,
        }
    }

    pub fn len(&self) -> usize {
        self.video.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn freq_len(&self) -> usize {
        self.freq.as_ref().map_or(0, |r| r.len())
    }

    /// Checks that the boundaries partition `0..n` in order.
    pub fn check(&self, n: usize) -> Result<()> {
        let freq_end = self.freq.as_ref().map_or(self.prompt.end, |r| r.end);
        let freq_start = self.freq.as_ref().map_or(self.prompt.end, |r| r.start);
        if self.prompt.start != 0 || freq_start != self.prompt.end || self.video.start != freq_end || self.video.end != n {
            return Err(Error::Contract(format!("segments {self:?} do not partition a sequence of {n} tokens")));
        }
        Ok(())
    }
}

pub struct AttentionOutput {
    pub out: Array2<f64>,
    /// Row-normalised attention weights, `S x S`.
    pub probs: Array2<f64>,
}

/// Scaled dot-product attention for one head with an additive bias on every
/// (video query, frequency key) score before the softmax.
pub fn attention_with_bias(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    segments: &Segments,
    bias: f64,
) -> Result<AttentionOutput> {
    let n = q.nrows();
    if k.nrows() != n || v.nrows() != n || q.ncols() != k.ncols() {
        return Err(Error::Shape(format!(
            "attention operands disagree: q {:?}, k {:?}, v {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    segments.check(n)?;
    if !(bias.is_finite() && bias >= 0.0) {
        return Err(Error::Contract(format!("attention bias must be finite and >= 0, got {bias}")));
    }
    if bias > 0.0 && segments.freq.is_none() {
        return Err(Error::Contract("attention bias given but no frequency segment to target".into()));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut scores = q.dot(&k.t());
    scores *= scale;
    if bias > 0.0 {
        if let Some(freq) = &segments.freq {
            scores
                .slice_mut(ndarray::s![segments.video.clone(), freq.clone()])
                .mapv_inplace(|s| s + bias);
        }
    }
    softmax_rows(&mut scores);
    let out = scores.dot(&v);
    Ok(AttentionOutput { out, probs: scores })
}

pub(crate) fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Total attention mass on frequency tokens per video query.
pub fn video_to_freq_mass(probs: &Array2<f64>, segments: &Segments) -> Vec<f64> {
    match &segments.freq {
        None => vec![0.0; segments.video.len()],
        Some(freq) => segments
            .video
            .clone()
            .map(|i| probs.row(i).slice(ndarray::s![freq.clone()]).sum())
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn zero_bias_is_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k, v) = (rand_mat(&mut rng, 7, 4), rand_mat(&mut rng, 7, 4), rand_mat(&mut rng, 7, 3));
        let seg = Segments::new(2, 2, 3);
        let a = attention_with_bias(q.view(), k.view(), v.view(), &seg, 0.0).unwrap();
        let plain = attention_with_bias(q.view(), k.view(), v.view(), &Segments::new(4, 0, 3), 0.0).unwrap();
        assert_eq!(a.out, plain.out);
    }

    #[test]
    fn two_key_closed_form() {
        // One video query; keys [freq, other] with scaled scores (a, b).
        let (a, b, bias) = (0.3, -0.8, 0.7);
        let q = array![[1.0, 0.0]];
        let q = ndarray::concatenate![Axis(0), array![[0.0, 0.0]], q * 2f64.sqrt()];
        let k = array![[a, 0.0], [b, 0.0]];
        let v = array![[1.0], [0.0]];
        // Layout: [freq key, video token with key b]; the query is row 1.
        let seg = Segments { prompt: 0..0, freq: Some(0..1), video: 1..2 };
        let out = attention_with_bias(q.view(), k.view(), v.view(), &seg, bias).unwrap();
        let sigma = 1.0 / (1.0 + (-(a + bias - b)).exp());
        assert!((out.probs[[1, 0]] - sigma).abs() < 1e-12);
    }

    #[test]
    fn bias_without_freq_segment_is_rejected() {
        let m = Array2::zeros((3, 2));
        let seg = Segments::new(1, 0, 2);
        assert!(matches!(attention_with_bias(m.view(), m.view(), m.view(), &seg, 0.5), Err(Error::Contract(_))));
        assert!(attention_with_bias(m.view(), m.view(), m.view(), &seg, 0.0).is_ok());
        assert!(attention_with_bias(m.view(), m.view(), m.view(), &Segments::new(1, 1, 1), -1.0).is_err());
    }

    #[test]
    fn large_bias_saturates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, k, v) = (rand_mat(&mut rng, 9, 4), rand_mat(&mut rng, 9, 4), rand_mat(&mut rng, 9, 2));
        let seg = Segments::new(2, 3, 4);
        let a = attention_with_bias(q.view(), k.view(), v.view(), &seg, 60.0).unwrap();
        for m in video_to_freq_mass(&a.probs, &seg) {
            assert!(m > 1.0 - 1e-12);
        }
    }

    proptest! {
        #[test]
        fn prompt_rows_untouched_and_mass_monotone(seed in any::<u64>(), b1 in 0.0f64..4.0, db in 0.01f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (q, k, v) = (rand_mat(&mut rng, 10, 4), rand_mat(&mut rng, 10, 4), rand_mat(&mut rng, 10, 3));
            let seg = Segments::new(3, 2, 5);
            let lo = attention_with_bias(q.view(), k.view(), v.view(), &seg, b1).unwrap();
            let hi = attention_with_bias(q.view(), k.view(), v.view(), &seg, b1 + db).unwrap();
            for i in seg.prompt.clone().chain(seg.freq.clone().unwrap()) {
                prop_assert_eq!(lo.probs.row(i), hi.probs.row(i));
            }
            let (ml, mh) = (video_to_freq_mass(&lo.probs, &seg), video_to_freq_mass(&hi.probs, &seg));
            prop_assert!(mh.iter().sum::<f64>() > ml.iter().sum::<f64>());
            for row in hi.probs.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }
}
