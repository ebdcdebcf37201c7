//! Synthetic motion clips: a textured sprite drifting over a static textured
//! background. Any single frame is uninformative about the class; only the
//! direction of motion separates classes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{ops, Tensor};
use crate::binfmt::{FormatError, LeReader, LeWriter};
use crate::config::{parse_bool, parse_value, ConfigError, KvConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{0}")]
    Invalid(String),
}

pub const CLASS_NAMES: [&str; 5] = ["right", "left", "down", "up", "static"];

/// Per-frame pixel displacement direction `(dx, dy)` of each class.
const DIRECTIONS: [(i64, i64); 5] = [(1, 0), (-1, 0), (0, 1), (0, -1), (0, 0)];

#[derive(Clone, Debug)]
pub struct VideoClip {
    /// `[3×T_raw×H×W]`, values in `[0, 1]`.
    pub frames: Tensor,
    pub label: usize,
    pub id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    /// Number of drift directions (1..=4).
    pub directions: usize,
    /// Adds a motionless class after the drift classes.
    pub static_class: bool,
    pub clips_per_class: usize,
    pub val_clips_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub sprite: usize,
    pub min_speed: usize,
    pub max_speed: usize,
    pub data_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            directions: 4,
            static_class: false,
            clips_per_class: 64,
            val_clips_per_class: 16,
            frames: 16,
            height: 32,
            width: 32,
            sprite: 8,
            min_speed: 1,
            max_speed: 2,
            data_seed: 1,
        }
    }
}

impl DatasetSpec {
    /// Full-resolution clips, few of them (each is ~19 MB in memory).
    pub fn paper() -> Self {
        DatasetSpec {
            clips_per_class: 2,
            val_clips_per_class: 1,
            height: 224,
            width: 224,
            sprite: 56,
            min_speed: 4,
            max_speed: 8,
            ..Self::default()
        }
    }

    pub fn num_classes(&self) -> usize {
        self.directions + usize::from(self.static_class)
    }

    /// Direction index of a class label.
    fn direction(&self, class: usize) -> (i64, i64) {
        if class < self.directions {
            DIRECTIONS[class]
        } else {
            DIRECTIONS[4]
        }
    }

    pub fn class_name(&self, class: usize) -> &'static str {
        if class < self.directions {
            CLASS_NAMES[class]
        } else {
            CLASS_NAMES[4]
        }
    }
}

impl KvConfig for DatasetSpec {
    fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        match key {
            "directions" => self.directions = parse_value(key, value)?,
            "static_class" => self.static_class = parse_bool(key, value)?,
            "clips_per_class" => self.clips_per_class = parse_value(key, value)?,
            "val_clips_per_class" => self.val_clips_per_class = parse_value(key, value)?,
            "raw_frames" => self.frames = parse_value(key, value)?,
            "clip_height" => self.height = parse_value(key, value)?,
            "clip_width" => self.width = parse_value(key, value)?,
            "sprite" => self.sprite = parse_value(key, value)?,
            "min_speed" => self.min_speed = parse_value(key, value)?,
            "max_speed" => self.max_speed = parse_value(key, value)?,
            "data_seed" => self.data_seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("directions", self.directions.to_string()),
            ("static_class", self.static_class.to_string()),
            ("clips_per_class", self.clips_per_class.to_string()),
            ("val_clips_per_class", self.val_clips_per_class.to_string()),
            ("raw_frames", self.frames.to_string()),
            ("clip_height", self.height.to_string()),
            ("clip_width", self.width.to_string()),
            ("sprite", self.sprite.to_string()),
            ("min_speed", self.min_speed.to_string()),
            ("max_speed", self.max_speed.to_string()),
            ("data_seed", self.data_seed.to_string()),
        ]
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(1..=4).contains(&self.directions) {
            return bad(format!("directions must be 1..=4, got {}", self.directions));
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return bad("clip geometry must be positive".into());
        }
        if self.sprite == 0 || self.sprite > self.height.min(self.width) {
            return bad(format!("sprite size {} does not fit the frame", self.sprite));
        }
        if self.min_speed > self.max_speed {
            return bad(format!("min_speed {} exceeds max_speed {}", self.min_speed, self.max_speed));
        }
        Ok(())
    }
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a combined word
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Top-left corner of the sprite in frame `t`, on the torus.
pub fn sprite_position(start: (usize, usize), velocity: (i64, i64), t: usize, h: usize, w: usize) -> (usize, usize) {
    let y = (start.0 as i64 + velocity.1 * t as i64).rem_euclid(h as i64) as usize;
    let x = (start.1 as i64 + velocity.0 * t as i64).rem_euclid(w as i64) as usize;
    (y, x)
}

/// Hidden generation parameters of a clip, for tests that need ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipLayout {
    pub start: (usize, usize),
    /// Pixels per frame along x and y.
    pub velocity: (i64, i64),
}

/// Deterministic clip of `class` from `seed`.
pub fn gen_clip(class: usize, seed: u64, spec: &DatasetSpec) -> VideoClip {
    gen_clip_with_layout(class, seed, spec).0
}

pub fn gen_clip_with_layout(class: usize, seed: u64, spec: &DatasetSpec) -> (VideoClip, ClipLayout) {
    let class = class.min(spec.num_classes().saturating_sub(1));
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, class as u64 + 1));
    let (h, w, t_raw, s) = (spec.height, spec.width, spec.frames, spec.sprite.clamp(1, spec.height.min(spec.width)));
    let background: Vec<f64> = (0..3 * h * w).map(|_| rng.gen_range(0.0..0.4)).collect();
    let texture: Vec<f64> = (0..3 * s * s).map(|_| rng.gen_range(0.6..1.0)).collect();
    let start = (rng.gen_range(0..h), rng.gen_range(0..w));
    let speed = rng.gen_range(spec.min_speed..=spec.max_speed.max(spec.min_speed)) as i64;
    let (dx, dy) = spec.direction(class);
    let velocity = (dx * speed, dy * speed);
    let mut data = vec![0.0; 3 * t_raw * h * w];
    for t in 0..t_raw {
        let (py, px) = sprite_position(start, velocity, t, h, w);
        for c in 0..3 {
            for y in 0..h {
                let sy = (y + h - py) % h;
                for x in 0..w {
                    let sx = (x + w - px) % w;
                    let v = if sy < s && sx < s {
                        texture[(c * s + sy) * s + sx]
                    } else {
                        background[(c * h + y) * w + x]
                    };
                    data[((c * t_raw + t) * h + y) * w + x] = v;
                }
            }
        }
    }
    let frames = Tensor::new(&[3, t_raw, h, w], data).expect("clip geometry");
    let clip = VideoClip { frames, label: class, id: format!("{}-{seed:016x}", spec.class_name(class)) };
    (clip, ClipLayout { start, velocity })
}

/// Train and validation splits, class-interleaved.
pub fn generate(spec: &DatasetSpec) -> (Vec<VideoClip>, Vec<VideoClip>) {
    let split = |tag: u64, per_class: usize| {
        (0..per_class)
            .flat_map(|j| {
                (0..spec.num_classes()).map(move |c| {
                    let seed = mix(mix(spec.data_seed, tag), (j * spec.num_classes() + c) as u64);
                    gen_clip(c, seed, spec)
                })
            })
            .collect::<Vec<_>>()
    };
    (split(1, spec.clips_per_class), split(2, spec.val_clips_per_class))
}

/// Frame indices: `t_raw` split into `t` equal segments, one index each
/// (segment centre, or uniform within the segment when `jitter` is given).
pub fn sparse_sample(t_raw: usize, t: usize, jitter: Option<&mut ChaCha8Rng>) -> Result<Vec<usize>, DataError> {
    if t == 0 || t > t_raw {
        return Err(DataError::Invalid(format!("cannot sample {t} frames from {t_raw}")));
    }
    let bounds = |i: usize| (i * t_raw / t, (i + 1) * t_raw / t);
    Ok(match jitter {
        None => (0..t).map(|i| (2 * i + 1) * t_raw / (2 * t)).collect(),
        Some(rng) => (0..t)
            .map(|i| {
                let (lo, hi) = bounds(i);
                rng.gen_range(lo..hi)
            })
            .collect(),
    })
}

/// Mirror every frame left to right.
pub fn flip_video(video: &Tensor) -> Tensor {
    let w = video.shape()[3];
    let rev: Vec<usize> = (0..w).rev().collect();
    ops::index_select(video, 3, &rev).expect("video is rank 4")
}

/// Label of a mirrored clip: left and right drifts swap.
pub fn flip_label(label: usize, spec: &DatasetSpec) -> usize {
    match label {
        0 if spec.directions >= 2 => 1,
        1 => 0,
        other => other,
    }
}

/// Square crop of relative side `scale` at `(oy, ox)`, resized back to the
/// full frame by nearest-neighbour sampling. Applied to all frames alike.
pub fn crop_resize(video: &Tensor, scale: f64, oy: f64, ox: f64) -> Tensor {
    let (h, w) = (video.shape()[2], video.shape()[3]);
    let ch = ((h as f64 * scale).round() as usize).clamp(1, h);
    let cw = ((w as f64 * scale).round() as usize).clamp(1, w);
    let y0 = ((h - ch) as f64 * oy).round() as usize;
    let x0 = ((w - cw) as f64 * ox).round() as usize;
    let rows: Vec<usize> = (0..h).map(|y| y0 + (y * ch) / h).collect();
    let cols: Vec<usize> = (0..w).map(|x| x0 + (x * cw) / w).collect();
    let v = ops::index_select(video, 2, &rows).expect("video is rank 4");
    ops::index_select(&v, 3, &cols).expect("video is rank 4")
}

const DATASET_MAGIC: &[u8; 4] = b"TDSD";
const DATASET_VERSION: u32 = 1;

pub fn write_dataset<W: Write>(w: W, clips: &[VideoClip]) -> Result<(), DataError> {
    let mut out = LeWriter::new(w);
    let io = |e: std::io::Error| DataError::Format(FormatError::Io(e));
    out.raw(DATASET_MAGIC).map_err(io)?;
    out.u32(DATASET_VERSION).map_err(io)?;
    out.u32(clips.len() as u32).map_err(io)?;
    for clip in clips {
        let s = clip.frames.shape();
        let (t, h, wd) = (s[1], s[2], s[3]);
        out.string(&clip.id)?;
        out.u32(clip.label as u32).map_err(io)?;
        for d in [t, h, wd] {
            out.u32(d as u32).map_err(io)?;
        }
        // stored frame-major, channel-height-width within each frame
        let framewise = ops::permute(&clip.frames, &[1, 0, 2, 3]).expect("clip is rank 4");
        out.f64s(framewise.data()).map_err(io)?;
    }
    out.finish().map_err(io)
}

pub fn read_dataset<R: Read>(r: R) -> Result<Vec<VideoClip>, DataError> {
    let mut inp = LeReader::new(r);
    inp.magic(DATASET_MAGIC)?;
    let version = inp.u32("version")?;
    if version != DATASET_VERSION {
        return Err(FormatError::Version(version).into());
    }
    let count = inp.u32("clip count")? as usize;
    let mut clips = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id = inp.string("clip id")?;
        let label = inp.u32("label")? as usize;
        let t = inp.u32("frames")? as usize;
        let h = inp.u32("height")? as usize;
        let w = inp.u32("width")? as usize;
        if t == 0 || h == 0 || w == 0 {
            return Err(FormatError::Invalid(format!("clip `{id}` has empty geometry {t}×{h}×{w}")).into());
        }
        let data = inp.f64s(3 * t * h * w, "pixels")?;
        let framewise = Tensor::new(&[t, 3, h, w], data).map_err(|e| DataError::Invalid(e.to_string()))?;
        let frames = ops::permute(&framewise, &[1, 0, 2, 3]).expect("clip is rank 4");
        clips.push(VideoClip { frames, label, id });
    }
    inp.finish()?;
    Ok(clips)
}

pub fn save_dataset(path: &Path, clips: &[VideoClip]) -> Result<(), DataError> {
    let f = File::create(path).map_err(FormatError::Io)?;
    write_dataset(BufWriter::new(f), clips)
}

pub fn load_dataset(path: &Path) -> Result<Vec<VideoClip>, DataError> {
    let f = File::open(path).map_err(FormatError::Io)?;
    read_dataset(BufReader::new(f))
}
