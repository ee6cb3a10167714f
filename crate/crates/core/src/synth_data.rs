//! Synthetic sprite-action corpus.
//!
//! Each item is a single anti-aliased sprite moving along a parametric
//! trajectory over a flat background. Positions are continuous pixel
//! coordinates: pixel `(row, col)` covers `[col, col+1) x [row, row+1)`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::VideoTensor;
use crate::error::{Error, Result};
use crate::prompt::{Prompt, COLORS};

/// Maximum vertical compression for the squat-rise action.
pub const SQUAT_DEPTH: f64 = 0.4;
/// Minimum Euclidean RGB distance between sprite and background.
pub const MIN_CONTRAST: f64 = 0.35;
/// Supersampling factor per axis used by the rasterizer.
pub const SUPERSAMPLE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    Bounce,
    Zigzag,
    Orbit,
    Dash,
    SquatRise,
}

impl TrajectoryKind {
    pub const ALL: [TrajectoryKind; 5] = [
        TrajectoryKind::Bounce,
        TrajectoryKind::Zigzag,
        TrajectoryKind::Orbit,
        TrajectoryKind::Dash,
        TrajectoryKind::SquatRise,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap_or(0)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrajectoryKind::Bounce => "bounce",
            TrajectoryKind::Zigzag => "zigzag",
            TrajectoryKind::Orbit => "orbit",
            TrajectoryKind::Dash => "dash",
            TrajectoryKind::SquatRise => "squat-rise",
        }
    }
}

impl fmt::Display for TrajectoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrajectoryKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s || (s == "squat" && *k == TrajectoryKind::SquatRise))
            .ok_or_else(|| Error::Config(format!("unknown trajectory kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Star,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Star];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).unwrap_or(0)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Star => "star",
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Shape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape {s:?}")))
    }
}

/// Parametric action. `period` is in frames; for `zigzag` it is the length of
/// one sweep between direction reversals, for `dash` the length of one eased
/// sweep, and a full cycle for the other kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
    pub num_frames: usize,
}

/// Frame size and the sprite extent the trajectory must keep inside the frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameGeometry {
    pub height: usize,
    pub width: usize,
    pub sprite_size: f64,
}

impl FrameGeometry {
    fn center(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    /// Largest center offset that keeps the sprite one pixel away from the border.
    fn travel(&self) -> (f64, f64) {
        let half = self.sprite_size / 2.0;
        (
            (self.width as f64 / 2.0 - half - 1.0).max(0.0),
            (self.height as f64 / 2.0 - half - 1.0).max(0.0),
        )
    }
}

/// Sprite placement in one frame: centroid plus vertical scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub scale_y: f64,
}

fn triangle_wave(s: f64) -> f64 {
    let f = s - s.floor();
    if f < 0.25 {
        4.0 * f
    } else if f < 0.75 {
        2.0 - 4.0 * f
    } else {
        4.0 * f - 4.0
    }
}

fn smoothstep(f: f64) -> f64 {
    f * f * (3.0 - 2.0 * f)
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_frames < 2 {
            return Err(Error::Config(format!(
                "trajectory needs at least 2 frames, got {}",
                self.num_frames
            )));
        }
        if !(0.0..=1.0).contains(&self.amplitude) {
            return Err(Error::Config(format!(
                "amplitude {} outside [0, 1]",
                self.amplitude
            )));
        }
        if !(self.period > 0.0 && self.period.is_finite()) || !self.phase.is_finite() {
            return Err(Error::Config("period must be positive and finite".into()));
        }
        Ok(())
    }

    /// Closed-form pose at continuous time `t` (frames).
    pub fn pose_at(&self, geom: &FrameGeometry, t: f64) -> Pose {
        let (cx, cy) = geom.center();
        let (ax, ay) = geom.travel();
        let (ax, ay) = (self.amplitude * ax, self.amplitude * ay);
        let u = (t + self.phase) / self.period;
        let pi = std::f64::consts::PI;
        match self.kind {
            TrajectoryKind::Bounce => Pose {
                x: cx,
                y: cy + ay * (1.0 - 2.0 * (pi * u).sin().abs()),
                scale_y: 1.0,
            },
            TrajectoryKind::Zigzag => Pose {
                x: cx + ax * triangle_wave(u / 2.0),
                y: cy,
                scale_y: 1.0,
            },
            TrajectoryKind::Orbit => Pose {
                x: cx + ax * (2.0 * pi * u).cos(),
                y: cy + ay * (2.0 * pi * u).sin(),
                scale_y: 1.0,
            },
            TrajectoryKind::Dash => {
                let leg = u.floor();
                let e = smoothstep(u - leg);
                let s = if (leg as i64).rem_euclid(2) == 0 { e } else { 1.0 - e };
                Pose {
                    x: cx + ax * (2.0 * s - 1.0),
                    y: cy,
                    scale_y: 1.0,
                }
            }
            TrajectoryKind::SquatRise => {
                let scale_y = 1.0 - SQUAT_DEPTH * self.amplitude * (pi * u).sin().powi(2);
                // Bottom edge stays fixed while the sprite compresses.
                Pose {
                    x: cx,
                    y: cy + geom.sprite_size / 2.0 * (1.0 - scale_y),
                    scale_y,
                }
            }
        }
    }
}

pub fn make_trajectory(spec: &TrajectorySpec, geom: &FrameGeometry) -> Result<Vec<Pose>> {
    spec.validate()?;
    Ok((0..spec.num_frames)
        .map(|t| spec.pose_at(geom, t as f64))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteScene {
    pub shape: Shape,
    pub color: [f64; 3],
    pub size: f64,
    pub background: [f64; 3],
}

fn rgb_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

impl SpriteScene {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |c: &[f64; 3]| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit(&self.color) || !in_unit(&self.background) {
            return Err(Error::Config("colors must lie in [0, 1]^3".into()));
        }
        if !(self.size > 0.0) {
            return Err(Error::Config("sprite size must be positive".into()));
        }
        let d = rgb_distance(self.color, self.background);
        if d < MIN_CONTRAST {
            return Err(Error::Config(format!(
                "sprite/background contrast {d:.3} below {MIN_CONTRAST}"
            )));
        }
        Ok(())
    }

    /// Shape membership for a point relative to the sprite centroid.
    fn contains(&self, dx: f64, dy: f64, scale_y: f64) -> bool {
        let r = self.size / 2.0;
        let dy = dy / scale_y;
        match self.shape {
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Triangle => {
                // Equilateral, circumradius r, vertex mean at the origin.
                let s3 = 3f64.sqrt();
                let v = [(0.0, -r), (r * s3 / 2.0, r / 2.0), (-r * s3 / 2.0, r / 2.0)];
                point_in_polygon(dx, dy, &v)
            }
            Shape::Star => {
                let pts: Vec<(f64, f64)> = (0..10)
                    .map(|i| {
                        let a = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI / 5.0;
                        let rad = if i % 2 == 0 { r } else { 0.45 * r };
                        (rad * a.cos(), rad * a.sin())
                    })
                    .collect();
                point_in_polygon(dx, dy, &pts)
            }
        }
    }

    /// Per-pixel coverage in `[0, 1]` of the sprite placed at `pose`.
    pub fn coverage(&self, pose: &Pose, height: usize, width: usize) -> Array2<f64> {
        let n = SUPERSAMPLE;
        let w = 1.0 / (n * n) as f64;
        let r = self.size / 2.0 + 1.0;
        let mut cov = Array2::zeros((height, width));
        let row0 = ((pose.y - r).floor().max(0.0)) as usize;
        let row1 = ((pose.y + r).ceil().min(height as f64)) as usize;
        let col0 = ((pose.x - r).floor().max(0.0)) as usize;
        let col1 = ((pose.x + r).ceil().min(width as f64)) as usize;
        for i in row0..row1 {
            for j in col0..col1 {
                let mut hits = 0usize;
                for si in 0..n {
                    for sj in 0..n {
                        let py = i as f64 + (si as f64 + 0.5) / n as f64;
                        let px = j as f64 + (sj as f64 + 0.5) / n as f64;
                        if self.contains(px - pose.x, py - pose.y, pose.scale_y) {
                            hits += 1;
                        }
                    }
                }
                cov[[i, j]] = hits as f64 * w;
            }
        }
        cov
    }

    fn check_in_bounds(&self, pose: &Pose, height: usize, width: usize) -> Result<()> {
        let rx = self.size / 2.0;
        let ry = self.size / 2.0 * pose.scale_y;
        if pose.x - rx < 0.0
            || pose.x + rx > width as f64
            || pose.y - ry < 0.0
            || pose.y + ry > height as f64
            || !pose.x.is_finite()
            || !pose.y.is_finite()
        {
            return Err(Error::Render(format!(
                "sprite of size {} at ({:.2}, {:.2}) leaves the {height}x{width} frame",
                self.size, pose.x, pose.y
            )));
        }
        Ok(())
    }
}

fn point_in_polygon(x: f64, y: f64, v: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = v.len() - 1;
    for i in 0..v.len() {
        let (xi, yi) = v[i];
        let (xj, yj) = v[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

pub fn render_video(scene: &SpriteScene, traj: &[Pose], height: usize, width: usize) -> Result<VideoTensor> {
    scene.validate()?;
    if traj.is_empty() {
        return Err(Error::Render("empty trajectory".into()));
    }
    let mut data = Array4::zeros((traj.len(), height, width, 3));
    for (t, pose) in traj.iter().enumerate() {
        scene.check_in_bounds(pose, height, width)?;
        let cov = scene.coverage(pose, height, width);
        for i in 0..height {
            for j in 0..width {
                let a = cov[[i, j]];
                for c in 0..3 {
                    data[[t, i, j, c]] = scene.background[c] * (1.0 - a) + scene.color[c] * a;
                }
            }
        }
    }
    VideoTensor::new(data)
}

/// Single-frame rendering of a scene at a pose.
pub fn render_frame(scene: &SpriteScene, pose: &Pose, height: usize, width: usize) -> Result<crate::codec::ImageTensor> {
    Ok(render_video(scene, std::slice::from_ref(pose), height, width)?.frame(0))
}

/// Per-frame object positions with validity flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tracklets {
    pub positions: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl Tracklets {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

pub fn ground_truth_tracklets(scene: &SpriteScene, traj: &[Pose], num_frames: usize) -> Result<Tracklets> {
    scene.validate()?;
    if traj.len() != num_frames {
        return Err(Error::Contract(format!(
            "trajectory has {} poses but the video has {num_frames} frames",
            traj.len()
        )));
    }
    Ok(Tracklets {
        positions: traj.iter().map(|p| [p.x, p.y]).collect(),
        valid: vec![true; num_frames],
    })
}

/// Per-frame boolean masks of the pixels the sprite touches.
pub fn motion_masks(scene: &SpriteScene, traj: &[Pose], height: usize, width: usize) -> Vec<Array2<bool>> {
    traj.iter()
        .map(|p| scene.coverage(p, height, width).mapv(|c| c > 0.0))
        .collect()
}

/// Corpus sampling distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub size: usize,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub shapes: Vec<Shape>,
    pub kinds: Vec<TrajectoryKind>,
    /// Named colors from [`COLORS`] sprites are drawn from.
    pub colors: Vec<String>,
    pub backgrounds: Vec<[f64; 3]>,
    pub sprite_size: (u32, u32),
    pub amplitude: (f64, f64),
    pub color_jitter: f64,
    /// (shape, color) pairs never generated; reserved as unseen targets.
    pub holdout: Vec<(Shape, String)>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            size: 512,
            num_frames: 8,
            height: 32,
            width: 32,
            shapes: Shape::ALL.to_vec(),
            kinds: TrajectoryKind::ALL.to_vec(),
            colors: COLORS.iter().map(|(n, _)| n.to_string()).collect(),
            backgrounds: default_backgrounds(),
            sprite_size: (7, 11),
            amplitude: (0.4, 0.9),
            color_jitter: 0.04,
            holdout: vec![(Shape::Circle, "blue".into())],
        }
    }
}

pub fn default_backgrounds() -> Vec<[f64; 3]> {
    vec![
        [0.08, 0.08, 0.10],
        [0.25, 0.20, 0.30],
        [0.05, 0.18, 0.12],
        [0.30, 0.30, 0.32],
        [0.12, 0.10, 0.25],
    ]
}

/// Everything needed to regenerate one corpus item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub index: usize,
    pub scene: SpriteScene,
    pub color_name: String,
    pub trajectory: TrajectorySpec,
    pub prompt: String,
    pub poses: Vec<Pose>,
    pub tracklets: Tracklets,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub video: String,
    pub meta: String,
    pub video_sha256: String,
    pub meta_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub config: CorpusConfig,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub items: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || self.kinds.is_empty() || self.colors.is_empty() || self.backgrounds.is_empty() {
            return Err(Error::Config("corpus distributions must be nonempty".into()));
        }
        if self.sprite_size.0 == 0 || self.sprite_size.0 > self.sprite_size.1 {
            return Err(Error::Config("invalid sprite size range".into()));
        }
        for c in &self.colors {
            if crate::prompt::color_rgb(c).is_none() {
                return Err(Error::Config(format!("unknown color {c:?}")));
            }
        }
        if self.num_frames < 2 {
            return Err(Error::Config("corpus videos need at least 2 frames".into()));
        }
        let max_size = self.sprite_size.1 as f64;
        if max_size + 2.0 > self.height.min(self.width) as f64 {
            return Err(Error::Config("sprites do not fit the frame".into()));
        }
        let usable = self.shapes.iter().any(|s| {
            self.colors
                .iter()
                .any(|c| !self.holdout.iter().any(|(hs, hc)| hs == s && hc == c))
        });
        if !usable {
            return Err(Error::Config("holdout excludes every shape/color pair".into()));
        }
        Ok(())
    }

    pub fn geometry(&self, sprite_size: f64) -> FrameGeometry {
        FrameGeometry {
            height: self.height,
            width: self.width,
            sprite_size,
        }
    }

    /// Samples item `index`; a pure function of `(self, seed, index)`.
    pub fn sample_item(&self, seed: u64, index: usize) -> Result<ItemMeta> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let (shape, color_name) = loop {
            let s = self.shapes[rng.random_range(0..self.shapes.len())];
            let c = &self.colors[rng.random_range(0..self.colors.len())];
            if !self.holdout.iter().any(|(hs, hc)| *hs == s && hc == c) {
                break (s, c.clone());
            }
        };
        let base = crate::prompt::color_rgb(&color_name).unwrap_or([1.0; 3]);
        let mut color = [0.0; 3];
        for (dst, b) in color.iter_mut().zip(base) {
            let j = if self.color_jitter > 0.0 {
                rng.random_range(-self.color_jitter..=self.color_jitter)
            } else {
                0.0
            };
            *dst = (b + j).clamp(0.0, 1.0);
        }
        let start = rng.random_range(0..self.backgrounds.len());
        let background = (0..self.backgrounds.len())
            .map(|k| self.backgrounds[(start + k) % self.backgrounds.len()])
            .find(|bg| rgb_distance(*bg, color) >= MIN_CONTRAST)
            .ok_or_else(|| Error::Config(format!("no background contrasts with {color_name}")))?;
        let size = rng.random_range(self.sprite_size.0..=self.sprite_size.1) as f64;
        let kind = self.kinds[rng.random_range(0..self.kinds.len())];
        let amplitude = rng.random_range(self.amplitude.0..=self.amplitude.1);
        let period = match kind {
            TrajectoryKind::Bounce => rng.random_range(4..=8),
            TrajectoryKind::Zigzag => rng.random_range(2..=4),
            TrajectoryKind::Orbit => rng.random_range(6..=10),
            TrajectoryKind::Dash => rng.random_range(3..=7),
            TrajectoryKind::SquatRise => rng.random_range(4..=8),
        } as f64;
        let phase = rng.random_range(0.0..period);
        let trajectory = TrajectorySpec {
            kind,
            amplitude,
            period,
            phase,
            num_frames: self.num_frames,
        };
        let scene = SpriteScene {
            shape,
            color,
            size,
            background,
        };
        let poses = make_trajectory(&trajectory, &self.geometry(size))?;
        let tracklets = ground_truth_tracklets(&scene, &poses, self.num_frames)?;
        let prompt = Prompt {
            color: Some(color_name.clone()),
            shape: Some(shape),
            action: Some(kind),
        }
        .render();
        Ok(ItemMeta {
            index,
            scene,
            color_name,
            trajectory,
            prompt,
            poses,
            tracklets,
        })
    }
}

impl ItemMeta {
    pub fn render(&self, height: usize, width: usize) -> Result<VideoTensor> {
        render_video(&self.scene, &self.poses, height, width)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Renders and writes the corpus; returns the manifest (also written to disk).
pub fn build_corpus(config: &CorpusConfig, seed: u64, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut items = Vec::with_capacity(config.size);
    for index in 0..config.size {
        let meta = config.sample_item(seed, index)?;
        let video = meta.render(config.height, config.width)?;
        let video_bytes = video.to_bytes();
        let meta_bytes = serde_json::to_vec_pretty(&meta)?;
        let video_name = format!("item_{index:05}.rgb");
        let meta_name = format!("item_{index:05}.json");
        write_file(&out_dir.join(&video_name), &video_bytes)?;
        write_file(&out_dir.join(&meta_name), &meta_bytes)?;
        items.push(ManifestEntry {
            index,
            video: video_name,
            meta: meta_name,
            video_sha256: sha256_hex(&video_bytes),
            meta_sha256: sha256_hex(&meta_bytes),
        });
    }
    let manifest = Manifest {
        version: 1,
        seed,
        config: config.clone(),
        frames: config.num_frames,
        height: config.height,
        width: config.width,
        items,
    };
    write_file(&out_dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// A corpus item loaded back from disk.
#[derive(Clone, Debug)]
pub struct CorpusItem {
    pub meta: ItemMeta,
    pub video: VideoTensor,
}

pub struct Corpus {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub items: Vec<CorpusItem>,
}

impl Corpus {
    /// Loads a corpus directory, verifying every file hash listed in the manifest.
    pub fn load(root: &Path) -> Result<Self> {
        let manifest_path = root.join(MANIFEST_FILE);
        let text = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_slice(&text)?;
        let mut items = Vec::with_capacity(manifest.items.len());
        for entry in &manifest.items {
            let vpath = root.join(&entry.video);
            let mpath = root.join(&entry.meta);
            let vbytes = fs::read(&vpath).map_err(|e| Error::io(&vpath, e))?;
            let mbytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
            if sha256_hex(&vbytes) != entry.video_sha256 || sha256_hex(&mbytes) != entry.meta_sha256 {
                return Err(Error::Contract(format!("hash mismatch for corpus item {}", entry.index)));
            }
            let video = VideoTensor::from_bytes(&vbytes, manifest.frames, manifest.height, manifest.width)?;
            let meta: ItemMeta = serde_json::from_slice(&mbytes)?;
            items.push(CorpusItem { meta, video });
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            items,
        })
    }

    /// SHA-256 over the manifest file, used as corpus provenance.
    pub fn manifest_hash(&self) -> Result<String> {
        let p = self.root.join(MANIFEST_FILE);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        Ok(sha256_hex(&bytes))
    }
}
