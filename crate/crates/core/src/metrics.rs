//! Automatic video metrics: text similarity, motion fidelity, temporal and
//! appearance consistency, over a pluggable frame/text encoder.
//!
//! Motion fidelity is a stand-in definition (displacement cosine after mean
//! removal and diameter normalisation); it is not a canonical formula.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::codec::{ImageTensor, VideoTensor};
use crate::error::{Error, Result};
use crate::prompt::{color_rgb, Prompt};
use crate::synth_data::{render_frame, Pose, SpriteScene, Tracklets};

/// Frame and text embeddings in a shared unit-norm space.
pub trait EncoderHandle {
    fn dim(&self) -> usize;
    fn frame_embed(&self, frame: &ImageTensor) -> Result<Array1<f64>>;
    fn text_embed(&self, prompt: &str) -> Result<Array1<f64>>;
}

/// Picks an encoder by config key.
pub fn encoder_from_name(name: &str) -> Result<Box<dyn EncoderHandle>> {
    match name {
        "toy" => Ok(Box::new(ToyEncoder::default())),
        other => Err(Error::Config(format!("unknown encoder {other:?}; available: toy"))),
    }
}

/// Foreground colour histogram plus a bounding-box occupancy grid.
///
/// Text embeddings are frame embeddings of a canonical rendering: the named
/// shape in the named colour, centred on a black canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyEncoder {
    pub color_bins: usize,
    pub shape_grid: usize,
    pub threshold: f64,
    pub canvas: usize,
    pub canonical_size: f64,
}

impl Default for ToyEncoder {
    fn default() -> Self {
        Self {
            color_bins: 4,
            shape_grid: 6,
            threshold: 0.1,
            canvas: 32,
            canonical_size: 9.0,
        }
    }
}

fn normalize(mut v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v /= n;
    }
    v
}

/// Mean colour of the most frequent 1/16-quantised colour cell.
pub fn background_mode(frame: &ImageTensor) -> [f64; 3] {
    let mut counts: HashMap<[u8; 3], (usize, [f64; 3])> = HashMap::new();
    for px in frame.data().rows() {
        let key = [0, 1, 2].map(|c| (px[c] * 16.0).floor().clamp(0.0, 15.0) as u8);
        let e = counts.entry(key).or_insert((0, [0.0; 3]));
        e.0 += 1;
        for c in 0..3 {
            e.1[c] += px[c];
        }
    }
    let (_, (n, sum)) = counts
        .into_iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.0.cmp(&a.0)))
        .expect("frame has pixels");
    sum.map(|s| s / n as f64)
}

/// Per-pixel colour distance from the background mode.
fn foreground_strength(frame: &ImageTensor) -> Array2<f64> {
    let bg = background_mode(frame);
    let d = frame.data();
    Array2::from_shape_fn((frame.height(), frame.width()), |(i, j)| {
        (0..3).map(|c| (d[[i, j, c]] - bg[c]).powi(2)).sum::<f64>().sqrt()
    })
}

impl ToyEncoder {
    fn color_histogram(&self, frame: &ImageTensor, mask: &Array2<bool>) -> Array1<f64> {
        let b = self.color_bins;
        let mut hist = Array1::zeros(b * b * b);
        let any = mask.iter().any(|m| *m);
        for ((i, j), &m) in mask.indexed_iter() {
            if any && !m {
                continue;
            }
            // Trilinear soft binning over bin centres.
            let coords = [0, 1, 2].map(|c| {
                let x = (frame.data()[[i, j, c]].clamp(0.0, 1.0) * b as f64 - 0.5).clamp(0.0, (b - 1) as f64);
                let lo = (x.floor() as usize).min(b - 1);
                let hi = (lo + 1).min(b - 1);
                (lo, hi, x - lo as f64)
            });
            for (r, wr) in [(coords[0].0, 1.0 - coords[0].2), (coords[0].1, coords[0].2)] {
                for (g, wg) in [(coords[1].0, 1.0 - coords[1].2), (coords[1].1, coords[1].2)] {
                    for (bl, wb) in [(coords[2].0, 1.0 - coords[2].2), (coords[2].1, coords[2].2)] {
                        hist[(r * b + g) * b + bl] += wr * wg * wb;
                    }
                }
            }
        }
        normalize(hist)
    }

    fn shape_descriptor(&self, mask: &Array2<bool>) -> Array1<f64> {
        let g = self.shape_grid;
        let on: Vec<(usize, usize)> = mask.indexed_iter().filter(|(_, m)| **m).map(|(p, _)| p).collect();
        let mut cells = Array1::zeros(g * g);
        if on.is_empty() {
            return cells;
        }
        let (y0, y1) = (on.iter().map(|p| p.0).min().unwrap(), on.iter().map(|p| p.0).max().unwrap() + 1);
        let (x0, x1) = (on.iter().map(|p| p.1).min().unwrap(), on.iter().map(|p| p.1).max().unwrap() + 1);
        let (bh, bw) = ((y1 - y0) as f64, (x1 - x0) as f64);
        let mut totals = Array1::<f64>::zeros(g * g);
        for i in y0..y1 {
            for j in x0..x1 {
                let cy = ((((i - y0) as f64 + 0.5) / bh * g as f64) as usize).min(g - 1);
                let cx = ((((j - x0) as f64 + 0.5) / bw * g as f64) as usize).min(g - 1);
                totals[cy * g + cx] += 1.0;
                if mask[[i, j]] {
                    cells[cy * g + cx] += 1.0;
                }
            }
        }
        Array1::from_iter(cells.iter().zip(&totals).map(|(c, t)| if *t > 0.0 { c / t } else { 0.0 }))
    }

    fn canonical_frame(&self, prompt: &Prompt) -> Result<ImageTensor> {
        let (color, shape) = match (&prompt.color, prompt.shape) {
            (Some(c), Some(s)) => (c, s),
            _ => {
                return Err(Error::Config(format!(
                    "toy encoder needs a colour and a shape in the prompt, got {:?}",
                    prompt.render()
                )))
            }
        };
        let scene = SpriteScene {
            shape,
            color: color_rgb(color).expect("parsed colour"),
            size: self.canonical_size,
            background: [0.0; 3],
        };
        let c = self.canvas as f64 / 2.0;
        render_frame(&scene, &Pose { x: c, y: c, scale_y: 1.0 }, self.canvas, self.canvas)
    }
}

impl EncoderHandle for ToyEncoder {
    fn dim(&self) -> usize {
        self.color_bins.pow(3) + self.shape_grid * self.shape_grid
    }

    fn frame_embed(&self, frame: &ImageTensor) -> Result<Array1<f64>> {
        let mask = foreground_strength(frame).mapv(|d| d > self.threshold);
        let hist = self.color_histogram(frame, &mask);
        let shape = normalize(self.shape_descriptor(&mask));
        let mut v = Array1::zeros(self.dim());
        v.slice_mut(ndarray::s![..hist.len()]).assign(&hist);
        v.slice_mut(ndarray::s![hist.len()..]).assign(&shape);
        Ok(normalize(v))
    }

    fn text_embed(&self, prompt: &str) -> Result<Array1<f64>> {
        if prompt.trim().is_empty() {
            return Err(Error::Contract("empty prompt".into()));
        }
        let p = Prompt::parse(prompt)?;
        self.frame_embed(&self.canonical_frame(&p)?)
    }
}

/// Centroid tracker: pixels farther than `threshold` from the background
/// mode form the mask, weighted by their distance.
pub fn track_centroids_with(v: &VideoTensor, threshold: f64) -> Tracklets {
    let mut positions = Vec::with_capacity(v.frames());
    let mut valid = Vec::with_capacity(v.frames());
    for f in 0..v.frames() {
        let d = foreground_strength(&v.frame(f));
        let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for ((i, j), &w) in d.indexed_iter() {
            if w > threshold {
                sw += w;
                sx += w * (j as f64 + 0.5);
                sy += w * (i as f64 + 0.5);
            }
        }
        if sw > 0.0 {
            positions.push([sx / sw, sy / sw]);
            valid.push(true);
        } else {
            positions.push([0.0, 0.0]);
            valid.push(false);
        }
    }
    Tracklets { positions, valid }
}

pub const TRACK_THRESHOLD: f64 = 0.1;

/// [`track_centroids_with`] at [`TRACK_THRESHOLD`]. Frames with an empty mask
/// are flagged invalid; a video with no valid frame is degenerate for
/// [`motion_fidelity`].
pub fn track_centroids(v: &VideoTensor) -> Tracklets {
    track_centroids_with(v, TRACK_THRESHOLD)
}

/// Fills invalid frames by linear interpolation between the nearest valid
/// neighbours (constant extension at the ends).
pub fn fill_invalid(tr: &Tracklets) -> Result<Vec<[f64; 2]>> {
    let valid: Vec<usize> = (0..tr.len()).filter(|&i| tr.valid[i]).collect();
    if valid.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "motion fidelity needs at least 2 valid frames, got {}",
            valid.len()
        )));
    }
    Ok((0..tr.len())
        .map(|i| {
            if tr.valid[i] {
                return tr.positions[i];
            }
            let next = valid.iter().position(|&v| v > i);
            match next {
                None => tr.positions[*valid.last().unwrap()],
                Some(0) => tr.positions[valid[0]],
                Some(k) => {
                    let (a, b) = (valid[k - 1], valid[k]);
                    let f = (i - a) as f64 / (b - a) as f64;
                    let (pa, pb) = (tr.positions[a], tr.positions[b]);
                    [pa[0] + f * (pb[0] - pa[0]), pa[1] + f * (pb[1] - pa[1])]
                }
            }
        })
        .collect())
}

/// Linear resampling of a filled trajectory to `len` points.
pub fn resample(points: &[[f64; 2]], len: usize) -> Vec<[f64; 2]> {
    if points.len() == len || points.is_empty() {
        return points.to_vec();
    }
    (0..len)
        .map(|i| {
            let x = if len == 1 { 0.0 } else { i as f64 * (points.len() - 1) as f64 / (len - 1) as f64 };
            let a = (x.floor() as usize).min(points.len() - 1);
            let b = (a + 1).min(points.len() - 1);
            let f = x - a as f64;
            [points[a][0] + f * (points[b][0] - points[a][0]), points[a][1] + f * (points[b][1] - points[a][1])]
        })
        .collect()
}

const ZERO_STEP: f64 = 1e-9;

/// Per-step displacements scaled by the trajectory diameter. Mean removal
/// cancels in the differences, so it is not applied numerically.
fn normalized_displacements(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut diameter = 0.0f64;
    for a in points {
        for b in points {
            diameter = diameter.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
        }
    }
    let s = if diameter > 0.0 { 1.0 / diameter } else { 1.0 };
    points
        .windows(2)
        .map(|w| [(w[1][0] - w[0][0]) * s, (w[1][1] - w[0][1]) * s])
        .collect()
}

/// Mean cosine between corresponding per-step displacements.
pub fn motion_fidelity(reference: &Tracklets, generated: &Tracklets) -> Result<f64> {
    if reference.len() != generated.len() {
        return Err(Error::Contract(format!(
            "tracklets must share a length (resample first): {} vs {}",
            reference.len(),
            generated.len()
        )));
    }
    let a = normalized_displacements(&fill_invalid(reference)?);
    let b = normalized_displacements(&fill_invalid(generated)?);
    let total: f64 = a
        .iter()
        .zip(&b)
        .map(|(u, v)| {
            let (uu, vv) = (u[0] * u[0] + u[1] * u[1], v[0] * v[0] + v[1] * v[1]);
            match (uu.sqrt() < ZERO_STEP, vv.sqrt() < ZERO_STEP) {
                (true, true) => 1.0,
                (true, false) | (false, true) => 0.0,
                _ => ((u[0] * v[0] + u[1] * v[1]) / (uu * vv).sqrt()).clamp(-1.0, 1.0),
            }
        })
        .sum();
    Ok(total / a.len() as f64)
}

fn frame_embeddings(v: &VideoTensor, enc: &dyn EncoderHandle) -> Result<Vec<Array1<f64>>> {
    (0..v.frames()).map(|f| enc.frame_embed(&v.frame(f))).collect()
}

fn need_two(v: &VideoTensor) -> Result<()> {
    if v.frames() < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 frames, got {}", v.frames())));
    }
    Ok(())
}

/// Mean cosine over all unordered frame pairs.
pub fn temporal_consistency(v: &VideoTensor, enc: &dyn EncoderHandle) -> Result<f64> {
    need_two(v)?;
    let e = frame_embeddings(v, enc)?;
    let n = e.len() as f64;
    let mut sum = Array1::zeros(enc.dim());
    let mut self_sim = 0.0;
    for x in &e {
        sum += x;
        self_sim += x.dot(x);
    }
    Ok((sum.dot(&sum) - self_sim) / (n * (n - 1.0)))
}

/// Mean cosine between frame 0 and every later frame.
pub fn appearance_consistency(v: &VideoTensor, enc: &dyn EncoderHandle) -> Result<f64> {
    need_two(v)?;
    let e = frame_embeddings(v, enc)?;
    let rest = e[1..].iter().fold(Array1::zeros(enc.dim()), |acc, x| acc + x) / (e.len() - 1) as f64;
    Ok(e[0].dot(&rest))
}

/// Mean over frames of the frame/text cosine.
pub fn text_similarity(v: &VideoTensor, prompt: &str, enc: &dyn EncoderHandle) -> Result<f64> {
    if prompt.trim().is_empty() {
        return Err(Error::Contract("empty prompt".into()));
    }
    let text = enc.text_embed(prompt)?;
    let e = frame_embeddings(v, enc)?;
    let mean = e.iter().fold(Array1::zeros(enc.dim()), |acc, x| acc + x) / e.len() as f64;
    Ok(text.dot(&mean))
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub run_id: String,
    pub seed: u64,
    pub text_similarity: f64,
    pub motion_fidelity: Option<f64>,
    pub motion_fidelity_missing: bool,
    pub temporal_consistency: f64,
    pub appearance_consistency: f64,
}

pub const CSV_COLUMNS: [&str; 7] = [
    "run_id",
    "seed",
    "text_similarity",
    "motion_fidelity",
    "motion_fidelity_missing",
    "temporal_consistency",
    "appearance_consistency",
];

impl MetricReport {
    pub fn to_csv_string(reports: &[MetricReport]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in reports {
            w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Appends one row, writing the header when the file is new or empty.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        w.serialize(self).map_err(|e| Error::Serde(e.to_string()))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<MetricReport>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
        r.deserialize().map(|row| row.map_err(|e| Error::Serde(e.to_string()))).collect()
    }

    /// `key = value` summary lines.
    pub fn summary(&self) -> String {
        let mf = self.motion_fidelity.map_or("missing".to_string(), |v| format!("{v:.6}"));
        format!(
            "run_id = {}\nseed = {}\ntext_similarity = {:.6}\nmotion_fidelity = {mf}\ntemporal_consistency = {:.6}\nappearance_consistency = {:.6}\n",
            self.run_id, self.seed, self.text_similarity, self.temporal_consistency, self.appearance_consistency
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_data::{make_trajectory, render_video, FrameGeometry, Shape, TrajectoryKind, TrajectorySpec};
    use ndarray::Array4;
    use proptest::prelude::*;

    fn tr(points: &[[f64; 2]]) -> Tracklets {
        Tracklets {
            positions: points.to_vec(),
            valid: vec![true; points.len()],
        }
    }

    fn sprite_video(kind: TrajectoryKind, amplitude: f64) -> VideoTensor {
        let scene = SpriteScene {
            shape: Shape::Square,
            color: [0.9, 0.2, 0.2],
            size: 8.0,
            background: [0.05, 0.05, 0.1],
        };
        let spec = TrajectorySpec { kind, amplitude, period: 4.0, phase: 0.0, num_frames: 8 };
        let geom = FrameGeometry { height: 32, width: 32, sprite_size: 8.0 };
        render_video(&scene, &make_trajectory(&spec, &geom).unwrap(), 32, 32).unwrap()
    }

    #[test]
    fn fidelity_basics() {
        let sweep: Vec<[f64; 2]> = (0..6).map(|i| [i as f64, 2.0 * i as f64]).collect();
        let rev: Vec<[f64; 2]> = sweep.iter().rev().copied().collect();
        assert_eq!(motion_fidelity(&tr(&sweep), &tr(&sweep)).unwrap(), 1.0);
        assert!((motion_fidelity(&tr(&sweep), &tr(&rev)).unwrap() + 1.0).abs() < 1e-12);
        let still = tr(&[[3.0, 3.0]; 6]);
        assert_eq!(motion_fidelity(&still, &still).unwrap(), 1.0);
        assert_eq!(motion_fidelity(&still, &tr(&sweep)).unwrap(), 0.0);
        let mut one = tr(&sweep);
        one.valid = vec![false; 6];
        one.valid[2] = true;
        assert!(matches!(motion_fidelity(&one, &tr(&sweep)), Err(Error::InsufficientData(_))));
        assert!(motion_fidelity(&tr(&sweep[..5]), &tr(&sweep)).is_err());
    }

    #[test]
    fn invalid_frames_are_interpolated() {
        let mut t = tr(&[[0.0, 0.0], [9.0, 9.0], [2.0, 4.0], [9.0, 9.0], [9.0, 9.0]]);
        t.valid = vec![true, false, true, false, false];
        assert_eq!(fill_invalid(&t).unwrap(), vec![[0.0, 0.0], [1.0, 2.0], [2.0, 4.0], [2.0, 4.0], [2.0, 4.0]]);
        assert_eq!(resample(&[[0.0, 0.0], [2.0, 2.0]], 3), vec![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]);
    }

    proptest! {
        #[test]
        fn fidelity_invariances(pts in prop::collection::vec((-8i32..8, -8i32..8), 3..10), dx in -5i32..5, dy in -5i32..5, other in prop::collection::vec((-8i32..8, -8i32..8), 10)) {
            // Dyadic coordinates, integer shifts and a power-of-two scale keep every step exact.
            let a: Vec<[f64; 2]> = pts.iter().map(|&(x, y)| [x as f64 / 4.0, y as f64 / 4.0]).collect();
            let moved: Vec<[f64; 2]> = a.iter().map(|p| [2.0 * p[0] + dx as f64, 2.0 * p[1] + dy as f64]).collect();
            let b: Vec<[f64; 2]> = other[..a.len()].iter().map(|&(x, y)| [x as f64, y as f64]).collect();
            let base = motion_fidelity(&tr(&a), &tr(&b)).unwrap();
            prop_assert_eq!(motion_fidelity(&tr(&moved), &tr(&b)).unwrap(), base);
            prop_assert_eq!(motion_fidelity(&tr(&b), &tr(&a)).unwrap(), base);
            prop_assert!((-1.0..=1.0).contains(&base));
        }
    }

    #[test]
    fn tracker_basics() {
        let flat = VideoTensor::new(Array4::from_elem((3, 8, 8, 3), 0.4)).unwrap();
        assert_eq!(track_centroids(&flat).num_valid(), 0);
        let still = sprite_video(TrajectoryKind::Bounce, 0.0);
        let t = track_centroids(&still);
        assert_eq!(t.num_valid(), 8);
        assert!(t.positions.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn consistency_metrics_match_brute_force() {
        let enc = ToyEncoder::default();
        let v = sprite_video(TrajectoryKind::SquatRise, 0.9);
        let e: Vec<Array1<f64>> = (0..8).map(|f| enc.frame_embed(&v.frame(f)).unwrap()).collect();
        let mut pair_sum = 0.0;
        let mut pairs = 0;
        for i in 0..8 {
            assert!((e[i].dot(&e[i]) - 1.0).abs() < 1e-12);
            for j in i + 1..8 {
                pair_sum += e[i].dot(&e[j]);
                pairs += 1;
            }
        }
        assert!((temporal_consistency(&v, &enc).unwrap() - pair_sum / pairs as f64).abs() < 1e-9);
        let app = (1..8).map(|j| e[0].dot(&e[j])).sum::<f64>() / 7.0;
        assert!((appearance_consistency(&v, &enc).unwrap() - app).abs() < 1e-9);
        let text = enc.text_embed("red square").unwrap();
        let ts = (0..8).map(|j| text.dot(&e[j])).sum::<f64>() / 8.0;
        assert!((text_similarity(&v, "red square", &enc).unwrap() - ts).abs() < 1e-9);
        assert!(matches!(text_similarity(&v, "  ", &enc), Err(Error::Contract(_))));
        let one = VideoTensor::new(v.data().slice(ndarray::s![0..1, .., .., ..]).to_owned()).unwrap();
        assert!(matches!(temporal_consistency(&one, &enc), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn canonical_subject_scores_one() {
        let enc = ToyEncoder::default();
        let p = Prompt::parse("blue circle").unwrap();
        let frame = enc.canonical_frame(&p).unwrap();
        let v = VideoTensor::from_frames(&[frame.clone(), frame.clone(), frame]).unwrap();
        assert!((text_similarity(&v, "blue circle", &enc).unwrap() - 1.0).abs() < 1e-12);
        assert!((temporal_consistency(&v, &enc).unwrap() - 1.0).abs() < 1e-12);
        assert!(text_similarity(&v, "red star", &enc).unwrap() < 0.9);
        assert!(enc.text_embed("circle").is_err());
    }

    #[test]
    fn report_csv_round_trip() {
        let r = MetricReport {
            run_id: "a".into(),
            seed: 3,
            text_similarity: 0.5,
            motion_fidelity: None,
            motion_fidelity_missing: true,
            temporal_consistency: 0.9,
            appearance_consistency: 0.8,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        r.append_csv(&path).unwrap();
        r.append_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
        assert_eq!(MetricReport::read_csv(&path).unwrap(), vec![r.clone(), r]);
    }
}
