//! Lossless space-to-depth latent codec.
//!
//! A video of shape `T x H x W x 3` becomes a latent of shape
//! `T/ft x H/fs x W/fs x C` with `C = 3 * ft * fs^2`. Channel `c` of latent
//! cell `(t', y', x')` holds pixel `(t'*ft + dt, y'*fs + dy, x'*fs + dx, rgb)`
//! where `c = ((dt * fs + dy) * fs + dx) * 3 + rgb`.

use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    data: Array4<f64>,
    pub frame_rate: f64,
}

impl VideoTensor {
    /// Validating constructor: `T >= 1`, three channels, values in `[0, 1]`.
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let v = Self::from_raw(data)?;
        if let Some(x) = v.data.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Contract(format!("pixel value {x} outside [0, 1]")));
        }
        Ok(v)
    }

    /// Accepts any finite values; used for unclamped decoder output.
    pub fn from_raw(data: Array4<f64>) -> Result<Self> {
        let (t, _, _, c) = data.dim();
        if t == 0 || c != 3 {
            return Err(Error::Shape(format!("video must be T x H x W x 3 with T >= 1, got {:?}", data.dim())));
        }
        Ok(Self { data, frame_rate: 8.0 })
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f64> {
        self.data
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn frame(&self, t: usize) -> ImageTensor {
        ImageTensor {
            data: self.data.index_axis(Axis(0), t).to_owned(),
        }
    }

    pub fn from_frames(frames: &[ImageTensor]) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::Shape("no frames".into()))?;
        let (h, w, _) = first.data.dim();
        let mut data = Array4::zeros((frames.len(), h, w, 3));
        for (t, f) in frames.iter().enumerate() {
            if f.data.dim() != (h, w, 3) {
                return Err(Error::Shape("frames differ in size".into()));
            }
            data.index_axis_mut(Axis(0), t).assign(&f.data);
        }
        Self::from_raw(data)
    }

    /// Raw on-disk layout: frame-major, row-major, interleaved RGB, 8-bit.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(bytes: &[u8], frames: usize, height: usize, width: usize) -> Result<Self> {
        let n = frames * height * width * 3;
        if bytes.len() != n {
            return Err(Error::Shape(format!("expected {n} bytes for {frames}x{height}x{width}x3, got {}", bytes.len())));
        }
        let data = Array4::from_shape_vec((frames, height, width, 3), bytes.iter().map(|b| *b as f64 / 255.0).collect())
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(data)
    }

    /// Elementwise clamp to `[0, 1]`; returns the number of clamped values.
    pub fn clamped(&self) -> (VideoTensor, usize) {
        let mut n = 0;
        let data = self.data.mapv(|v| {
            let c = v.clamp(0.0, 1.0);
            if c != v {
                n += 1;
            }
            c
        });
        (VideoTensor { data, frame_rate: self.frame_rate }, n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim().2 != 3 {
            return Err(Error::Shape(format!("image must be H x W x 3, got {:?}", data.dim())));
        }
        if let Some(x) = data.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Contract(format!("pixel value {x} outside [0, 1]")));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }
}

/// Compressed latent `T' x H' x W' x C` with the factors that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub data: Array4<f64>,
    pub temporal_factor: usize,
    pub spatial_factor: usize,
}

impl LatentGrid {
    pub fn new(data: Array4<f64>, temporal_factor: usize, spatial_factor: usize) -> Self {
        Self {
            data,
            temporal_factor,
            spatial_factor,
        }
    }

    pub fn zeros(shape: (usize, usize, usize, usize), temporal_factor: usize, spatial_factor: usize) -> Self {
        Self::new(Array4::zeros(shape), temporal_factor, spatial_factor)
    }

    pub fn slots(&self) -> usize {
        self.data.dim().0
    }

    pub fn channels(&self) -> usize {
        self.data.dim().3
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn with_data(&self, data: Array4<f64>) -> Self {
        Self::new(data, self.temporal_factor, self.spatial_factor)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Codec {
    pub temporal_factor: usize,
    pub spatial_factor: usize,
    /// Map into the space the denoiser works in.
    pub scaling: LatentScaling,
}

impl Default for Codec {
    fn default() -> Self {
        Self {
            temporal_factor: 2,
            spatial_factor: 4,
            scaling: LatentScaling::default(),
        }
    }
}

/// Affine map `z = (l - shift) * scale` taking codec latents in `[0, 1]`
/// to roughly unit scale for diffusion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentScaling {
    pub shift: f64,
    pub scale: f64,
}

impl Default for LatentScaling {
    fn default() -> Self {
        Self { shift: 0.5, scale: 2.0 }
    }
}

impl Codec {
    pub fn new(temporal_factor: usize, spatial_factor: usize) -> Result<Self> {
        if temporal_factor == 0 || spatial_factor == 0 {
            return Err(Error::Config("compression factors must be positive".into()));
        }
        Ok(Self {
            temporal_factor,
            spatial_factor,
            scaling: LatentScaling::default(),
        })
    }

    pub fn to_diffusion(&self, l: &LatentGrid) -> LatentGrid {
        let LatentScaling { shift, scale } = self.scaling;
        l.with_data(l.data.mapv(|v| (v - shift) * scale))
    }

    pub fn from_diffusion(&self, z: &LatentGrid) -> LatentGrid {
        let LatentScaling { shift, scale } = self.scaling;
        z.with_data(z.data.mapv(|v| v / scale + shift))
    }

    pub fn channels(&self) -> usize {
        3 * self.temporal_factor * self.spatial_factor * self.spatial_factor
    }

    /// Latent shape for a `frames x height x width` video.
    pub fn latent_shape(&self, frames: usize, height: usize, width: usize) -> Result<(usize, usize, usize, usize)> {
        let (ft, fs) = (self.temporal_factor, self.spatial_factor);
        if frames % ft != 0 || height % fs != 0 || width % fs != 0 {
            return Err(Error::Shape(format!(
                "{frames}x{height}x{width} not divisible by (ft={ft}, fs={fs})"
            )));
        }
        Ok((frames / ft, height / fs, width / fs, self.channels()))
    }

    fn pack_frame(&self, frame: ArrayView3<f64>, dt: usize, out: &mut ndarray::ArrayViewMut3<f64>) {
        let fs = self.spatial_factor;
        let (h2, w2, _) = out.dim();
        for y in 0..h2 {
            for x in 0..w2 {
                for dy in 0..fs {
                    for dx in 0..fs {
                        let base = ((dt * fs + dy) * fs + dx) * 3;
                        for c in 0..3 {
                            out[[y, x, base + c]] = frame[[y * fs + dy, x * fs + dx, c]];
                        }
                    }
                }
            }
        }
    }

    pub fn encode_video(&self, v: &VideoTensor) -> Result<LatentGrid> {
        let shape = self.latent_shape(v.frames(), v.height(), v.width())?;
        let mut data = Array4::zeros(shape);
        for t in 0..v.frames() {
            let slot = t / self.temporal_factor;
            let dt = t % self.temporal_factor;
            let mut out = data.index_axis_mut(Axis(0), slot);
            self.pack_frame(v.data().index_axis(Axis(0), t), dt, &mut out);
        }
        Ok(LatentGrid::new(data, self.temporal_factor, self.spatial_factor))
    }

    /// Encodes one frame into a single temporal slot; the frame is
    /// replicated across the temporal sub-slots so `C` matches video latents.
    pub fn encode_image(&self, img: &ImageTensor) -> Result<LatentGrid> {
        let (_, h2, w2, c) = self.latent_shape(self.temporal_factor, img.height(), img.width())?;
        let mut data = Array4::zeros((1, h2, w2, c));
        {
            let mut out = data.index_axis_mut(Axis(0), 0);
            for dt in 0..self.temporal_factor {
                self.pack_frame(img.data().view(), dt, &mut out);
            }
        }
        Ok(LatentGrid::new(data, self.temporal_factor, self.spatial_factor))
    }

    /// Exact inverse of [`Codec::encode_video`]; no clamping.
    pub fn decode(&self, l: &LatentGrid) -> Result<VideoTensor> {
        let (t2, h2, w2, c) = l.shape();
        if c != self.channels() || l.temporal_factor != self.temporal_factor || l.spatial_factor != self.spatial_factor {
            return Err(Error::Shape(format!(
                "latent with C={c} (ft={}, fs={}) does not match codec C={}",
                l.temporal_factor,
                l.spatial_factor,
                self.channels()
            )));
        }
        let (ft, fs) = (self.temporal_factor, self.spatial_factor);
        let mut data = Array4::zeros((t2 * ft, h2 * fs, w2 * fs, 3));
        for slot in 0..t2 {
            for dt in 0..ft {
                for y in 0..h2 {
                    for x in 0..w2 {
                        for dy in 0..fs {
                            for dx in 0..fs {
                                let base = ((dt * fs + dy) * fs + dx) * 3;
                                for ch in 0..3 {
                                    data[[slot * ft + dt, y * fs + dy, x * fs + dx, ch]] = l.data[[slot, y, x, base + ch]];
                                }
                            }
                        }
                    }
                }
            }
        }
        VideoTensor::from_raw(data)
    }

    /// Decode followed by a clamp to `[0, 1]`; reports how many values were clamped.
    pub fn decode_for_display(&self, l: &LatentGrid) -> Result<(VideoTensor, usize)> {
        Ok(self.decode(l)?.clamped())
    }
}

/// Zero-pads a single-slot image latent along the temporal axis.
pub fn pad_image_latent(li: &LatentGrid, target_slots: usize) -> Result<LatentGrid> {
    if li.slots() != 1 {
        return Err(Error::Contract(format!("image latent must have 1 temporal slot, got {}", li.slots())));
    }
    if target_slots < 1 {
        return Err(Error::Contract("padding target must be at least 1 slot".into()));
    }
    let (_, h, w, c) = li.shape();
    let mut data = Array4::zeros((target_slots, h, w, c));
    data.slice_mut(s![0..1, .., .., ..]).assign(&li.data);
    Ok(li.with_data(data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_video(t: usize, h: usize, w: usize, seed: u64) -> VideoTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoTensor::new(Array::from_shape_fn((t, h, w, 3), |_| rng.random::<f64>())).unwrap()
    }

    #[test]
    fn paper_and_toy_shape_laws() {
        let v = random_video(8, 32, 32, 1);
        let paper = Codec::new(4, 8).unwrap().encode_video(&v).unwrap();
        assert_eq!(paper.shape(), (2, 4, 4, 768));
        let toy = Codec::default().encode_video(&v).unwrap();
        assert_eq!(toy.shape(), (4, 8, 8, 96));
        let img = Codec::default().encode_image(&v.frame(3)).unwrap();
        assert_eq!(img.shape(), (1, 8, 8, 96));
    }

    #[test]
    fn non_divisible_dimensions_rejected() {
        let v = random_video(6, 32, 30, 2);
        assert!(matches!(Codec::default().encode_video(&v), Err(Error::Shape(_))));
        let v = random_video(7, 32, 32, 2);
        assert!(matches!(Codec::default().encode_video(&v), Err(Error::Shape(_))));
    }

    #[test]
    fn encode_image_depends_only_on_its_frame() {
        let codec = Codec::default();
        let a = random_video(8, 16, 16, 3);
        let mut data = random_video(8, 16, 16, 4).into_data();
        data.index_axis_mut(Axis(0), 5).assign(&a.data().index_axis(Axis(0), 5));
        let b = VideoTensor::new(data).unwrap();
        assert_eq!(codec.encode_image(&a.frame(5)).unwrap(), codec.encode_image(&b.frame(5)).unwrap());
    }

    #[test]
    fn image_latent_matches_video_latent_of_a_static_clip() {
        let codec = Codec::default();
        let f = random_video(1, 16, 16, 5).frame(0);
        let clip = VideoTensor::from_frames(&[f.clone(), f.clone()]).unwrap();
        assert_eq!(codec.encode_image(&f).unwrap().data, codec.encode_video(&clip).unwrap().data);
    }

    #[test]
    fn padding_laws() {
        let codec = Codec::default();
        let li = codec.encode_image(&random_video(1, 16, 16, 6).frame(0)).unwrap();
        assert_eq!(pad_image_latent(&li, 1).unwrap(), li);
        let p = pad_image_latent(&li, 4).unwrap();
        assert_eq!(p.slots(), 4);
        assert_eq!(p.data.index_axis(Axis(0), 0), li.data.index_axis(Axis(0), 0));
        assert!(p.data.slice(s![1.., .., .., ..]).iter().all(|x| *x == 0.0));
        let abs = |l: &LatentGrid| l.data.iter().map(|x| x.abs()).sum::<f64>();
        assert_eq!(abs(&p), abs(&li));
        assert!(pad_image_latent(&li, 0).is_err());
        assert!(pad_image_latent(&p, 4).is_err());
    }

    #[test]
    fn decode_zero_and_linearity() {
        let codec = Codec::default();
        let z = LatentGrid::zeros((4, 8, 8, 96), 2, 4);
        assert!(codec.decode(&z).unwrap().data().iter().all(|x| *x == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l = LatentGrid::new(Array::from_shape_fn((4, 8, 8, 96), |_| rng.random::<f64>() * 4.0 - 2.0), 2, 4);
        let a = -1.75;
        let lhs = codec.decode(&l.with_data(&l.data * a)).unwrap();
        let rhs = codec.decode(&l).unwrap().into_data() * a;
        assert_eq!(lhs.data(), &rhs);
        let (shown, n) = codec.decode_for_display(&l).unwrap();
        assert!(n > 0);
        assert!(shown.data().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn decode_rejects_mismatched_channels() {
        let z = LatentGrid::zeros((4, 8, 8, 95), 2, 4);
        assert!(matches!(Codec::default().decode(&z), Err(Error::Shape(_))));
    }

    #[test]
    fn changing_one_frame_touches_one_slot() {
        let codec = Codec::default();
        let a = random_video(8, 16, 16, 10);
        let mut data = a.data().clone();
        data.index_axis_mut(Axis(0), 5).fill(0.5);
        let b = VideoTensor::new(data).unwrap();
        let (la, lb) = (codec.encode_video(&a).unwrap(), codec.encode_video(&b).unwrap());
        for slot in 0..4 {
            let same = la.data.index_axis(Axis(0), slot) == lb.data.index_axis(Axis(0), slot);
            assert_eq!(same, slot != 2);
        }
    }

    #[test]
    fn byte_layout_is_frame_major_rgb() {
        let mut data = Array4::zeros((2, 2, 3, 3));
        data[[1, 0, 2, 1]] = 1.0;
        let bytes = VideoTensor::new(data).unwrap().to_bytes();
        assert_eq!(bytes.len(), 36);
        assert_eq!(bytes[((1 * 2 + 0) * 3 + 2) * 3 + 1], 255);
        assert_eq!(bytes.iter().filter(|b| **b != 0).count(), 1);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(ft in 1usize..4, fs in 1usize..5, t in 1usize..4, h in 1usize..4, w in 1usize..4, seed in any::<u64>()) {
            let codec = Codec::new(ft, fs).unwrap();
            let v = random_video(t * ft, h * fs, w * fs, seed);
            let l = codec.encode_video(&v).unwrap();
            prop_assert_eq!(l.shape(), (t, h, w, 3 * ft * fs * fs));
            let back = codec.decode(&l).unwrap();
            prop_assert_eq!(back.data(), v.data());
        }

        #[test]
        fn diffusion_scaling_round_trips(seed in any::<u64>()) {
            let codec = Codec::default();
            let l = codec.encode_video(&random_video(4, 8, 8, seed)).unwrap();
            let z = codec.to_diffusion(&l);
            prop_assert!(z.data.iter().all(|v| (-1.0..=1.0).contains(v)));
            let back = codec.from_diffusion(&z);
            prop_assert!(back.data.iter().zip(l.data.iter()).all(|(a, b)| (a - b).abs() < 1e-15));
        }
    }
}
