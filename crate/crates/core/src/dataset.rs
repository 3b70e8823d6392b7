//! Synthetic moving-shapes corpus and the `HDCV` binary container.
//!
//! Each video shows one shape of one color translating at constant velocity
//! on a torus. Appearance (shape x color) and motion (direction x speed)
//! labels are assigned by two independent balanced shuffles.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HdcError, Result};
use crate::seeding::{self, Rng, stream};

pub const MAGIC: &[u8; 4] = b"HDCV";
pub const VERSION: u16 = 1;

/// Frames stored as `[T, H, W, C]`, row-major, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub frames: Vec<f32>,
    pub len: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Clip {
    pub fn new(
        frames: Vec<f32>,
        len: usize,
        height: usize,
        width: usize,
        channels: usize,
    ) -> Result<Self> {
        if frames.len() != len * height * width * channels {
            return Err(HdcError::shape(
                "clip",
                format!(
                    "{} values for [{len}, {height}, {width}, {channels}]",
                    frames.len()
                ),
            ));
        }
        Ok(Clip {
            frames,
            len,
            height,
            width,
            channels,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.len, self.height, self.width, self.channels]
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.frame_len()..(t + 1) * self.frame_len()]
    }

    /// Contiguous frames `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<Clip> {
        if start + len > self.len {
            return Err(HdcError::InvalidArgument(format!(
                "window [{start}, {}) exceeds {} frames",
                start + len,
                self.len
            )));
        }
        let fl = self.frame_len();
        Clip::new(
            self.frames[start * fl..(start + len) * fl].to_vec(),
            len,
            self.height,
            self.width,
            self.channels,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub id: u32,
    pub clip: Clip,
    pub appearance_label: u32,
    pub motion_label: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Disk,
    Triangle,
    Cross,
}

impl ShapeKind {
    fn contains(self, dy: f32, dx: f32, r: f32) -> bool {
        match self {
            ShapeKind::Square => dy.abs() <= r && dx.abs() <= r,
            ShapeKind::Disk => dy * dy + dx * dx <= r * r,
            ShapeKind::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
            ShapeKind::Cross => {
                (dy.abs() <= r && dx.abs() <= r / 3.0) || (dx.abs() <= r && dy.abs() <= r / 3.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub frame_size: [usize; 2],
    pub shapes: Vec<ShapeKind>,
    /// RGB colors in `[-1, 1]`.
    pub colors: Vec<[f32; 3]>,
    /// Number of evenly spaced headings, starting along +x.
    pub directions: usize,
    /// Pixels per frame; a zero speed yields a static class per direction.
    pub speeds: Vec<f32>,
    pub shape_radius: f32,
    pub background: f32,
    pub noise_std: f32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_videos: 64,
            frames_per_video: 64,
            frame_size: [32, 32],
            shapes: vec![ShapeKind::Square, ShapeKind::Disk, ShapeKind::Triangle],
            colors: vec![[0.9, -0.3, -0.6], [-0.6, 0.2, 0.9]],
            directions: 4,
            speeds: vec![1.0, 2.0],
            shape_radius: 5.0,
            background: -0.8,
            noise_std: 0.05,
        }
    }
}

impl SyntheticConfig {
    pub fn appearance_classes(&self) -> usize {
        self.shapes.len() * self.colors.len()
    }

    pub fn motion_classes(&self) -> usize {
        self.directions * self.speeds.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HdcError::Config(format!("dataset: {m}")));
        if self.num_videos == 0 || self.frames_per_video == 0 {
            return fail("num_videos and frames_per_video must be positive".into());
        }
        if self.appearance_classes() < 2 || self.motion_classes() < 2 {
            return fail(format!(
                "need at least 2 appearance and 2 motion classes, got {} and {}",
                self.appearance_classes(),
                self.motion_classes()
            ));
        }
        let extent = 2.0 * self.shape_radius + 1.0;
        if extent > self.frame_size[0].min(self.frame_size[1]) as f32 {
            return fail(format!(
                "shape extent {extent} does not fit in frame {:?}",
                self.frame_size
            ));
        }
        if !(self.noise_std >= 0.0) {
            return fail("noise_std must be non-negative".into());
        }
        if self
            .colors
            .iter()
            .flatten()
            .chain([&self.background])
            .any(|v| v.abs() > 1.0)
        {
            return fail("colors and background must lie in [-1, 1]".into());
        }
        Ok(())
    }

    /// Velocity `(dy, dx)` in pixels per frame for a motion label.
    pub fn velocity(&self, motion_label: u32) -> (f32, f32) {
        let m = motion_label as usize;
        let (dir, speed) = (m / self.speeds.len(), self.speeds[m % self.speeds.len()]);
        let angle = std::f64::consts::TAU * dir as f64 / self.directions as f64;
        // Rounded so axis-aligned headings give exact integer shifts.
        let snap = |v: f64| ((v * 1e6).round() / 1e6) as f32;
        (snap(angle.sin()) * speed, snap(angle.cos()) * speed)
    }
}

fn balanced_labels(n: usize, classes: usize, rng: &mut Rng) -> Vec<u32> {
    let mut labels: Vec<u32> = (0..n).map(|i| (i % classes) as u32).collect();
    labels.shuffle(rng);
    labels
}

fn wrap_delta(v: f32, extent: usize) -> f32 {
    let e = extent as f32;
    (v + e / 2.0).rem_euclid(e) - e / 2.0
}

fn render(config: &SyntheticConfig, id: u32, appearance: u32, motion: u32, seed: u64) -> Video {
    let mut rng = seeding::rng_from(&[seed, stream::DATASET, id as u64]);
    let [h, w] = config.frame_size;
    let t_total = config.frames_per_video;
    let shape = config.shapes[appearance as usize / config.colors.len()];
    let color = config.colors[appearance as usize % config.colors.len()];
    let (vy, vx) = config.velocity(motion);
    let (y0, x0) = (rng.gen_range(0..h) as f32, rng.gen_range(0..w) as f32);
    let noise = (config.noise_std > 0.0).then(|| Normal::new(0.0f32, config.noise_std).unwrap());

    let mut frames = Vec::with_capacity(t_total * h * w * 3);
    for t in 0..t_total {
        let cy = y0 + vy * t as f32;
        let cx = x0 + vx * t as f32;
        for y in 0..h {
            let dy = wrap_delta(y as f32 - cy, h);
            for x in 0..w {
                let dx = wrap_delta(x as f32 - cx, w);
                let inside = shape.contains(dy, dx, config.shape_radius);
                for c in 0..3 {
                    let base = if inside { color[c] } else { config.background };
                    let v = match &noise {
                        Some(n) => base + n.sample(&mut rng),
                        None => base,
                    };
                    frames.push(v.clamp(-1.0, 1.0));
                }
            }
        }
    }
    Video {
        id,
        clip: Clip {
            frames,
            len: t_total,
            height: h,
            width: w,
            channels: 3,
        },
        appearance_label: appearance,
        motion_label: motion,
    }
}

/// Renders the corpus in memory. Deterministic per `(config, seed)`.
pub fn generate_videos(config: &SyntheticConfig, seed: u64) -> Result<Vec<Video>> {
    config.validate()?;
    let mut rng = seeding::rng_from(&[seed, stream::DATASET]);
    let appearance = balanced_labels(config.num_videos, config.appearance_classes(), &mut rng);
    let motion = balanced_labels(config.num_videos, config.motion_classes(), &mut rng);
    Ok((0..config.num_videos)
        .into_par_iter()
        .map(|i| render(config, i as u32, appearance[i], motion[i], seed))
        .collect())
}

/// Renders the corpus and writes it to `path` in `HDCV` format.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64, path: &Path) -> Result<Vec<Video>> {
    let videos = generate_videos(config, seed)?;
    write_dataset(path, &videos)?;
    Ok(videos)
}

pub fn encode_dataset(videos: &[Video]) -> Vec<u8> {
    let payload: usize = videos.iter().map(|v| 28 + v.clip.frames.len() * 4).sum();
    let mut out = Vec::with_capacity(10 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(videos.len() as u32).to_le_bytes());
    for v in videos {
        let c = &v.clip;
        for field in [
            v.id,
            c.len as u32,
            c.height as u32,
            c.width as u32,
            c.channels as u32,
            v.appearance_label,
            v.motion_label,
        ] {
            out.extend_from_slice(&field.to_le_bytes());
        }
        for x in &c.frames {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn write_dataset(path: &Path, videos: &[Video]) -> Result<()> {
    let bytes = encode_dataset(videos);
    let mut file = fs::File::create(path).map_err(|e| HdcError::io(path, e))?;
    file.write_all(&bytes).map_err(|e| HdcError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let Some(end) = end else {
            return Err(HdcError::CorruptFile {
                path: self.path.to_path_buf(),
                reason: format!("truncated at byte {} (wanted {n} more)", self.pos),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<Vec<Video>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(HdcError::CorruptFile {
            path: path.to_path_buf(),
            reason: "bad magic (expected HDCV)".into(),
        });
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(HdcError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32()? as usize;
    let mut videos = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id = r.u32()?;
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
        let appearance_label = r.u32()?;
        let motion_label = r.u32()?;
        let numel = dims.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
        let raw = r.take(numel.and_then(|n| n.checked_mul(4)).unwrap_or(usize::MAX))?;
        let frames = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        videos.push(Video {
            id,
            clip: Clip::new(frames, dims[0], dims[1], dims[2], dims[3])?,
            appearance_label,
            motion_label,
        });
    }
    if r.pos != bytes.len() {
        return Err(HdcError::CorruptFile {
            path: path.to_path_buf(),
            reason: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(videos)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Video>> {
    let bytes = fs::read(path).map_err(|e| HdcError::io(path, e))?;
    decode_dataset(&bytes, path)
}

/// Indices of `batch` distinct videos drawn uniformly without replacement.
pub fn sample_batch(videos: &[Video], batch: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if batch > videos.len() {
        return Err(HdcError::InvalidArgument(format!(
            "batch of {batch} exceeds corpus of {} videos",
            videos.len()
        )));
    }
    Ok(rand::seq::index::sample(rng, videos.len(), batch).into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            num_videos: 8,
            frames_per_video: 6,
            frame_size: [16, 16],
            shape_radius: 3.0,
            ..Default::default()
        }
    }

    #[test]
    fn oversized_shape_rejected() {
        let cfg = SyntheticConfig {
            shape_radius: 20.0,
            ..small()
        };
        assert!(matches!(generate_videos(&cfg, 1), Err(HdcError::Config(_))));
    }

    #[test]
    fn static_motion_repeats_frames() {
        let cfg = SyntheticConfig {
            speeds: vec![0.0, 1.0],
            noise_std: 0.0,
            ..small()
        };
        let videos = generate_videos(&cfg, 3).unwrap();
        let still = videos
            .iter()
            .find(|v| cfg.velocity(v.motion_label) == (0.0, 0.0))
            .unwrap();
        for t in 1..still.clip.len {
            assert_eq!(still.clip.frame(t), still.clip.frame(0));
        }
    }

    #[test]
    fn values_in_range_with_noise() {
        let cfg = SyntheticConfig {
            noise_std: 0.5,
            ..small()
        };
        for v in generate_videos(&cfg, 9).unwrap() {
            assert!(v.clip.frames.iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn truncated_bytes_are_corrupt() {
        let videos = generate_videos(&small(), 2).unwrap();
        let bytes = encode_dataset(&videos);
        let err = decode_dataset(&bytes[..bytes.len() - 3], Path::new("x")).unwrap_err();
        assert!(matches!(err, HdcError::CorruptFile { .. }));
        let err = decode_dataset(b"NOPE\x01\x00", Path::new("x")).unwrap_err();
        assert!(matches!(err, HdcError::CorruptFile { .. }));
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        assert!(matches!(
            decode_dataset(&wrong, Path::new("x")),
            Err(HdcError::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn batch_larger_than_corpus_rejected() {
        let videos = generate_videos(&small(), 2).unwrap();
        let mut rng = seeding::rng_from(&[0]);
        assert!(sample_batch(&videos, 9, &mut rng).is_err());
        let mut all = sample_batch(&videos, 8, &mut rng).unwrap();
        all.sort();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
    }
}
