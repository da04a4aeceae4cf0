//! Deterministic moving-shape videos with masks, prompts and ground truth.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::svdt;
use crate::tensor::Tensor;

/// Shape colors; prompt `k` (1-based) asks for `PALETTE[k - 1]`, prompt 0 is null.
pub const PALETTE: [[f32; 3]; 6] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.2],
    [0.15, 0.25, 0.9],
    [0.9, 0.85, 0.1],
    [0.85, 0.15, 0.8],
    [0.1, 0.8, 0.85],
];

pub const VOCAB: usize = PALETTE.len() + 1;

/// Nominal range of clean pixel values.
pub const PIXEL_RANGE: (f32, f32) = (0.0, 1.0);

/// Largest per-axis speed the random generator produces, in pixels per frame.
pub const MAX_SPEED: f32 = 1.5;

pub const MANIFEST_VERSION: u32 = 1;

pub fn prompt_color(prompt: usize) -> Result<[f32; 3]> {
    if prompt == 0 || prompt > PALETTE.len() {
        return Err(Error::OutOfRange {
            what: "color prompt",
            value: prompt as i64,
            range: format!("1..={}", PALETTE.len()),
        });
    }
    Ok(PALETTE[prompt - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Disk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoSpec {
    pub frames: usize,
    pub image_size: usize,
    pub shape: ShapeKind,
    /// Half side (square) or radius (disk), in pixels.
    pub radius: f32,
    pub start: [f32; 2],
    pub velocity: [f32; 2],
    /// Source prompt index, 1-based into [`PALETTE`].
    pub prompt: usize,
    #[serde(default)]
    pub noise_sigma: f32,
    pub seed: u64,
}

impl VideoSpec {
    /// A random valid spec drawn from `seeds` at `index`.
    pub fn random(seeds: &SeedTree, index: u64, frames: usize, image_size: usize) -> Self {
        let mut rng = seeds.rng("video.spec", index);
        let size = image_size as f32;
        let radius = rng.random_range(0.12 * size..0.2 * size).floor().max(1.0);
        let mut coord = || rng.random_range(radius..size - radius);
        let start = [coord(), coord()];
        let mut speed = || rng.random_range(-MAX_SPEED..MAX_SPEED);
        let velocity = [speed(), speed()];
        Self {
            frames,
            image_size,
            shape: if rng.random_bool(0.5) {
                ShapeKind::Square
            } else {
                ShapeKind::Disk
            },
            radius,
            start,
            velocity,
            prompt: rng.random_range(1..=PALETTE.len()),
            noise_sigma: 0.0,
            seed: seeds.seed("video.noise", index),
        }
    }

    pub fn color(&self) -> Result<[f32; 3]> {
        prompt_color(self.prompt)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames < 1 {
            return bad("video needs at least one frame".into());
        }
        if self.image_size < 2 {
            return bad(format!("image_size {} too small", self.image_size));
        }
        let size = self.image_size as f32;
        if !(self.radius >= 0.5 && 2.0 * self.radius < size) {
            return bad(format!(
                "radius {} does not fit a {size} canvas",
                self.radius
            ));
        }
        if self
            .start
            .iter()
            .any(|&c| !(c >= self.radius && c <= size - self.radius))
        {
            return bad(format!(
                "start {:?} puts the shape outside the canvas",
                self.start
            ));
        }
        if self.velocity.iter().any(|v| !v.is_finite()) || !(self.noise_sigma >= 0.0) {
            return bad("velocity and noise must be finite, noise >= 0".into());
        }
        self.color()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVideo {
    pub spec: VideoSpec,
    /// `[C x H x W]` frames with values in `[0, 1]` before noise.
    pub frames: Vec<Tensor>,
    /// `[H x W]` occupancy, 1 inside the shape.
    pub masks: Vec<Tensor>,
    /// Shape centers `[x, y]` in pixel units.
    pub centers: Vec<[f32; 2]>,
}

impl LabeledVideo {
    pub fn prompt(&self) -> usize {
        self.spec.prompt
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn bounce(pos: &mut f32, vel: &mut f32, lo: f32, hi: f32) {
    *pos += *vel;
    if *pos < lo {
        *pos = 2.0 * lo - *pos;
        *vel = -*vel;
    }
    if *pos > hi {
        *pos = 2.0 * hi - *pos;
        *vel = -*vel;
    }
    *pos = pos.clamp(lo, hi);
}

fn render_mask(kind: ShapeKind, center: [f32; 2], r: f32, size: usize) -> Vec<f32> {
    let mut mask = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f32 + 0.5 - center[0];
            let dy = y as f32 + 0.5 - center[1];
            let inside = match kind {
                ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
                ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            };
            if inside {
                mask[y * size + x] = 1.0;
            }
        }
    }
    mask
}

/// Renders the video frame by frame; the generator keeps only the current
/// position and velocity.
pub fn generate_video(spec: &VideoSpec) -> Result<LabeledVideo> {
    spec.validate()?;
    let size = spec.image_size;
    let color = spec.color()?;
    let (lo, hi) = (spec.radius, size as f32 - spec.radius);
    let mut pos = spec.start;
    let mut vel = spec.velocity;
    let mut rng = SeedTree::new(spec.seed).rng("pixels", 0);
    let noise = Normal::new(0.0f32, spec.noise_sigma.max(f32::MIN_POSITIVE)).expect("valid sigma");
    let mut video = LabeledVideo {
        spec: spec.clone(),
        frames: Vec::with_capacity(spec.frames),
        masks: Vec::with_capacity(spec.frames),
        centers: Vec::with_capacity(spec.frames),
    };
    for n in 0..spec.frames {
        if n > 0 {
            for a in 0..2 {
                bounce(&mut pos[a], &mut vel[a], lo, hi);
            }
        }
        let mut mask = render_mask(spec.shape, pos, spec.radius, size);
        if mask.iter().all(|&m| m == 0.0) {
            // A sub-pixel shape still occupies the pixel under its center.
            let (x, y) = (
                (pos[0] as usize).min(size - 1),
                (pos[1] as usize).min(size - 1),
            );
            mask[y * size + x] = 1.0;
        }
        let mut data = Vec::with_capacity(3 * size * size);
        for c in color {
            data.extend(mask.iter().map(|&m| m * c));
        }
        if spec.noise_sigma > 0.0 {
            data.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
        video.frames.push(Tensor::new(vec![3, size, size], data)?);
        video.masks.push(Tensor::new(vec![size, size], mask)?);
        video.centers.push(pos);
    }
    Ok(video)
}

/// Consecutive clips of `clip_len` frames; the last may be shorter.
pub fn split_into_clips<T>(frames: &[T], clip_len: usize) -> Result<Vec<&[T]>> {
    if clip_len == 0 {
        return Err(Error::Config("clip_len must be at least 1".into()));
    }
    Ok(frames.chunks(clip_len).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub spec: VideoSpec,
    pub prompt: usize,
    pub frames_file: String,
    pub masks_file: String,
    pub centers: Vec<[f32; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub vocab: usize,
    pub videos: Vec<ManifestEntry>,
}

fn stack(ts: &[Tensor]) -> Result<Tensor> {
    let parts: Vec<Tensor> = ts
        .iter()
        .map(|t| {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.reshape(&shape)
        })
        .collect::<Result<_>>()?;
    Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)
}

fn unstack(t: &Tensor) -> Result<Vec<Tensor>> {
    let n = t.shape().first().copied().unwrap_or(0);
    let inner = t.shape()[1..].to_vec();
    (0..n).map(|i| t.narrow(0, i, 1)?.reshape(&inner)).collect()
}

/// Writes `manifest.json` plus one frame stack and one mask stack per video.
pub fn write_dataset(videos: &[LabeledVideo], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        version: MANIFEST_VERSION,
        vocab: VOCAB,
        videos: Vec::new(),
    };
    for (i, v) in videos.iter().enumerate() {
        let frames_file = format!("video_{i:04}.svdt");
        let masks_file = format!("masks_{i:04}.svdt");
        svdt::save_tensor(dir.join(&frames_file), &stack(&v.frames)?)?;
        svdt::save_tensor(dir.join(&masks_file), &stack(&v.masks)?)?;
        manifest.videos.push(ManifestEntry {
            spec: v.spec.clone(),
            prompt: v.prompt(),
            frames_file,
            masks_file,
            centers: v.centers.clone(),
        });
    }
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<LabeledVideo>> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Config(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    manifest
        .videos
        .into_iter()
        .map(|e| {
            if e.prompt == 0 || e.prompt >= manifest.vocab {
                return Err(Error::Config(format!(
                    "prompt {} outside vocabulary {}",
                    e.prompt, manifest.vocab
                )));
            }
            let frames = unstack(&svdt::load_tensor(dir.join(&e.frames_file))?)?;
            let masks = unstack(&svdt::load_tensor(dir.join(&e.masks_file))?)?;
            if frames.len() != masks.len() || frames.len() != e.centers.len() {
                return Err(Error::Config(format!(
                    "`{}` and its masks disagree on length",
                    e.frames_file
                )));
            }
            Ok(LabeledVideo {
                spec: e.spec,
                frames,
                masks,
                centers: e.centers,
            })
        })
        .collect()
}

/// `count` random videos of `frames` frames.
pub fn random_videos(
    seeds: &SeedTree,
    first: u64,
    count: usize,
    frames: usize,
    image_size: usize,
) -> Result<Vec<LabeledVideo>> {
    (0..count as u64)
        .map(|i| generate_video(&VideoSpec::random(seeds, first + i, frames, image_size)))
        .collect()
}
