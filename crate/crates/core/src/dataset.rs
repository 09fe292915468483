//! Synthetic animation corpus: deterministic flat-shaded moving shapes,
//! shortest-first clip selection, random window sampling, fill-and-crop
//! resolution conformance, and training-triplet assembly.
//!
//! Every generated pixel value lies exactly on the u8/255 grid, so clips
//! survive a PNG round trip bit for bit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::sketcher::{sketch_video, SketchConfig};
use crate::tensor::Tensor;
use crate::video::{resize_bilinear, VideoTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One clip in the corpus manifest (JSON-lines, one record per line).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub frame_count: usize,
    pub path: String,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum MotionKind {
    /// Constant velocity in pixels per frame.
    Linear { vx: f64, vy: f64 },
    /// Orbit of radius `radius` around the anchor at `omega` rad per frame.
    Circular { radius: f64, omega: f64, phase: f64 },
    /// Half-size grows by `rate` pixels per frame (may be negative).
    Scale { rate: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Flat fill colour, exact u8/255 values.
    pub colour: [f64; 3],
    /// Anchor position at frame 0 (pixel coordinates).
    pub cx: f64,
    pub cy: f64,
    /// Half-size in pixels at frame 0.
    pub size: f64,
    pub motion: MotionKind,
}

impl ShapeSpec {
    /// Anchor and half-size at frame `t`, rounded to the pixel grid so pure
    /// translations keep the rasterized pixel set identical.
    pub fn at_frame(&self, t: usize) -> (i64, i64, f64) {
        let tf = t as f64;
        match self.motion {
            MotionKind::Linear { vx, vy } => (
                (self.cx + vx * tf).round() as i64,
                (self.cy + vy * tf).round() as i64,
                self.size,
            ),
            MotionKind::Circular { radius, omega, phase } => (
                (self.cx + radius * (omega * tf + phase).cos()).round() as i64,
                (self.cy + radius * (omega * tf + phase).sin()).round() as i64,
                self.size,
            ),
            MotionKind::Scale { rate } => {
                ((self.cx).round() as i64, (self.cy).round() as i64, self.size + rate * tf)
            }
        }
    }
}

/// A deterministic scene: background plus flat-shaded shapes with constant
/// per-shape colour across all frames.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub background: [f64; 3],
    pub shapes: Vec<ShapeSpec>,
}

/// Minimum pairwise palette separation in RGB channel space.
pub const PALETTE_MIN_DIST: f64 = 0.15;
/// Minimum fraction of each shape that must stay inside the frame.
pub const MIN_INSIDE_FRACTION: f64 = 0.6;

fn colour_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn snap_u8(v: f64) -> f64 {
    (v * 255.0).round().clamp(0.0, 255.0) / 255.0
}

impl SceneSpec {
    pub fn palette(&self) -> Vec<[f64; 3]> {
        self.shapes.iter().map(|s| s.colour).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.shapes.len() < 2 || self.shapes.len() > 6 {
            return Err(Error::Config(format!(
                "scene must hold 2–6 shapes, got {}",
                self.shapes.len()
            )));
        }
        let mut all = self.palette();
        all.push(self.background);
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                if colour_dist(all[i], all[j]) < PALETTE_MIN_DIST {
                    return Err(Error::Config(format!(
                        "palette colours {i} and {j} closer than {PALETTE_MIN_DIST}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Samples a scene whose shapes keep disjoint motion envelopes and stay
    /// well inside a `height`×`width` frame over `frames` frames.
    pub fn sample<R: Rng>(seed: u64, rng: &mut R, frames: usize, height: usize, width: usize) -> Self {
        let background =
            [snap_u8(rng.gen_range(0.72..0.95)), snap_u8(rng.gen_range(0.72..0.95)), snap_u8(rng.gen_range(0.72..0.95))];
        let mut colours: Vec<[f64; 3]> = Vec::new();
        let target_shapes = rng.gen_range(2..=4usize);
        while colours.len() < target_shapes {
            let c = [
                snap_u8(rng.gen_range(0.05..0.85)),
                snap_u8(rng.gen_range(0.05..0.85)),
                snap_u8(rng.gen_range(0.05..0.85)),
            ];
            let ok = colour_dist(c, background) >= PALETTE_MIN_DIST
                && colours.iter().all(|&p| colour_dist(c, p) >= PALETTE_MIN_DIST);
            if ok {
                colours.push(c);
            }
        }

        let min_dim = height.min(width) as f64;
        let mut shapes: Vec<ShapeSpec> = Vec::new();
        let mut envelopes: Vec<(f64, f64, f64)> = Vec::new(); // cx, cy, radius
        for &colour in &colours {
            // place each shape so its whole motion envelope stays in frame
            // and clear of earlier shapes; shrink on repeated failure
            let mut size = min_dim * rng.gen_range(0.12..0.20);
            for attempt in 0..200 {
                if attempt > 0 && attempt % 50 == 0 {
                    size *= 0.85;
                }
                let kind = match rng.gen_range(0..3) {
                    0 => ShapeKind::Circle,
                    1 => ShapeKind::Square,
                    _ => ShapeKind::Triangle,
                };
                let motion = match rng.gen_range(0..3) {
                    0 => {
                        let speed = rng.gen_range(0.25..0.75) * min_dim / frames as f64;
                        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                        MotionKind::Linear { vx: speed * angle.cos(), vy: speed * angle.sin() }
                    }
                    1 => MotionKind::Circular {
                        radius: rng.gen_range(0.08..0.2) * min_dim,
                        omega: rng.gen_range(0.15..0.45),
                        phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    },
                    _ => MotionKind::Scale {
                        rate: rng.gen_range(-0.25..0.35) * size / frames as f64,
                    },
                };
                let travel = match motion {
                    MotionKind::Linear { vx, vy } => vx.hypot(vy) * (frames - 1) as f64,
                    MotionKind::Circular { radius, .. } => 2.0 * radius,
                    MotionKind::Scale { rate } => rate.abs() * (frames - 1) as f64,
                };
                let max_size = match motion {
                    MotionKind::Scale { rate } if rate > 0.0 => size + rate * (frames - 1) as f64,
                    _ => size,
                };
                let envelope = max_size + travel + 2.0;
                if 2.0 * envelope >= width.min(height) as f64 {
                    continue;
                }
                let cx = rng.gen_range(envelope..(width as f64 - envelope));
                let cy = rng.gen_range(envelope..(height as f64 - envelope));
                if envelopes
                    .iter()
                    .all(|&(ex, ey, er)| (ex - cx).hypot(ey - cy) >= er + envelope + 1.0)
                {
                    envelopes.push((cx, cy, envelope));
                    shapes.push(ShapeSpec { kind, colour, cx, cy, size, motion });
                    break;
                }
            }
        }
        while shapes.len() < 2 {
            // degenerate frame size; fall back to two small static shapes
            let i = shapes.len();
            shapes.push(ShapeSpec {
                kind: ShapeKind::Square,
                colour: colours[i],
                cx: width as f64 * (0.3 + 0.4 * i as f64),
                cy: height as f64 * 0.5,
                size: min_dim * 0.1,
                motion: MotionKind::Linear { vx: 0.0, vy: 0.0 },
            });
        }
        SceneSpec { seed, background, shapes }
    }
}

fn inside_shape(kind: ShapeKind, dx: f64, dy: f64, size: f64) -> bool {
    match kind {
        ShapeKind::Circle => dx * dx + dy * dy <= size * size,
        ShapeKind::Square => dx.abs() <= size && dy.abs() <= size,
        // apex-up isoceles triangle of height 2·size
        ShapeKind::Triangle => dy.abs() <= size && dx.abs() <= (dy + size) / 2.0,
    }
}

/// Rasterizes a deterministic clip of flat-shaded moving shapes.
///
/// Shape colours are constant across frames, so ground-truth colourization
/// is temporally coherent by construction. Later shapes occlude earlier
/// ones. Fails if any shape dips below the stay-in-frame fraction.
pub fn generate_synthetic_clip(
    spec: &SceneSpec,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<VideoTensor> {
    spec.validate()?;
    let mut data = vec![0.0; frames * height * width * 3];
    for t in 0..frames {
        let frame = &mut data[t * height * width * 3..(t + 1) * height * width * 3];
        for p in 0..height * width {
            frame[p * 3..p * 3 + 3].copy_from_slice(&spec.background);
        }
        for (si, shape) in spec.shapes.iter().enumerate() {
            let (px, py, size) = shape.at_frame(t);
            if size <= 0.5 {
                return Err(Error::Generation(format!(
                    "shape {si} shrank to nothing at frame {t}"
                )));
            }
            let r = size.ceil() as i64;
            let mut total = 0usize;
            let mut inside_frame = 0usize;
            for dy in -r..=r {
                for dx in -r..=r {
                    if !inside_shape(shape.kind, dx as f64, dy as f64, size) {
                        continue;
                    }
                    total += 1;
                    let (x, y) = (px + dx, py + dy);
                    if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
                        continue;
                    }
                    inside_frame += 1;
                    let p = (y as usize * width + x as usize) * 3;
                    frame[p..p + 3].copy_from_slice(&shape.colour);
                }
            }
            if total == 0 || (inside_frame as f64) < MIN_INSIDE_FRACTION * total as f64 {
                return Err(Error::Generation(format!(
                    "shape {si} leaves the frame at t={t}: {inside_frame}/{total} pixels inside"
                )));
            }
        }
    }
    VideoTensor::new(Tensor::from_vec(&[frames, height, width, 3], data))
}

/// Result of [`select_clips`]; `shortfall` flags that fewer than the
/// requested number of eligible clips exist.
#[derive(Clone, Debug)]
pub struct Selection {
    pub clips: Vec<ClipRecord>,
    pub shortfall: bool,
}

/// Keeps clips with at least `min_frames` frames, orders them shortest
/// first (clip id as tiebreak) and returns the first `count`.
pub fn select_clips(manifest: &[ClipRecord], count: usize, min_frames: usize) -> Selection {
    let mut eligible: Vec<ClipRecord> =
        manifest.iter().filter(|c| c.frame_count >= min_frames).cloned().collect();
    eligible.sort_by(|a, b| {
        a.frame_count.cmp(&b.frame_count).then_with(|| a.clip_id.cmp(&b.clip_id))
    });
    let shortfall = eligible.len() < count;
    eligible.truncate(count);
    Selection { clips: eligible, shortfall }
}

/// A contiguous `window_len`-frame slice starting at a seed-uniform offset.
pub fn sample_window(clip: &VideoTensor, window_len: usize, seed: u64) -> Result<VideoTensor> {
    if clip.frames() < window_len {
        return Err(Error::Contract(format!(
            "clip has {} frames, window needs {window_len}; selection should have filtered it",
            clip.frames()
        )));
    }
    let max_start = clip.frames() - window_len;
    let start = rng_from(seed).gen_range(0..=max_start);
    Ok(clip.window(start, window_len))
}

/// Aspect-preserving cover resize then centre crop: scales by
/// s = max(targetH/h, targetW/w) and crops the overshoot evenly, so no
/// padding bars ever appear.
pub fn fill_and_crop(frame: &Tensor, target_h: usize, target_w: usize) -> Tensor {
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let s = (target_h as f64 / h as f64).max(target_w as f64 / w as f64);
    let sh = ((h as f64 * s).round() as usize).max(target_h);
    let sw = ((w as f64 * s).round() as usize).max(target_w);
    let scaled = if (sh, sw) == (h, w) { frame.clone() } else { resize_bilinear(frame, sh, sw) };
    if (sh, sw) == (target_h, target_w) {
        return scaled;
    }
    let oy = (sh - target_h) / 2;
    let ox = (sw - target_w) / 2;
    let c = frame.shape()[2];
    let mut out = Vec::with_capacity(target_h * target_w * c);
    for y in 0..target_h {
        let row = &scaled.data()[((y + oy) * sw + ox) * c..((y + oy) * sw + ox + target_w) * c];
        out.extend_from_slice(row);
    }
    Tensor::from_vec(&[target_h, target_w, c], out)
}

/// Applies [`fill_and_crop`] to every frame of a clip.
pub fn fill_and_crop_video(video: &VideoTensor, target_h: usize, target_w: usize) -> Result<VideoTensor> {
    let mut data = Vec::with_capacity(video.frames() * target_h * target_w * 3);
    for t in 0..video.frames() {
        data.extend_from_slice(fill_and_crop(&video.frame(t), target_h, target_w).data());
    }
    VideoTensor::new(Tensor::from_vec(&[video.frames(), target_h, target_w, 3], data))
}

/// One training triplet: coloured first frame, binary sketch sequence,
/// ground-truth clip.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub reference: VideoTensor,
    pub sketches: VideoTensor,
    pub ground_truth: VideoTensor,
}

/// Builds the (reference, sketches, ground truth) triplet from a clip.
pub fn make_training_example(clip: &VideoTensor, sketch_config: &SketchConfig) -> Result<TrainingExample> {
    let sketches = sketch_video(clip, sketch_config)?;
    Ok(TrainingExample {
        reference: clip.frame_video(0),
        sketches,
        ground_truth: clip.clone(),
    })
}

/// Data-generation parameters for the synthetic corpus.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DataConfig {
    pub train_clips: usize,
    pub test_clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_frames: usize,
    /// Train clips draw frame counts from [frames, frames+extra_frames].
    pub extra_frames: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_clips: 512,
            test_clips: 32,
            frames: 17,
            height: 64,
            width: 96,
            min_frames: 17,
            extra_frames: 7,
        }
    }
}

/// A planned clip: manifest record plus the scene that generates it.
#[derive(Clone, Debug)]
pub struct PlannedClip {
    pub record: ClipRecord,
    pub scene: SceneSpec,
}

/// Plans the full corpus from the root seed: ids, splits, frame counts and
/// scene specs. Pure function of (config, root seed).
pub fn plan_corpus(cfg: &DataConfig, root_seed: u64) -> Vec<PlannedClip> {
    let mut plan = Vec::with_capacity(cfg.train_clips + cfg.test_clips);
    for i in 0..cfg.train_clips + cfg.test_clips {
        let split = if i < cfg.train_clips { Split::Train } else { Split::Test };
        let clip_seed = crate::rng::derive_seed(root_seed, "corpus-clip", i as u64);
        let mut rng = rng_from(clip_seed);
        let frame_count = match split {
            // varied lengths exercise selection and windowing
            Split::Train => cfg.frames + rng.gen_range(0..=cfg.extra_frames),
            Split::Test => cfg.frames,
        };
        let scene = SceneSpec::sample(clip_seed, &mut rng, frame_count, cfg.height, cfg.width);
        let (dir, name) = match split {
            Split::Train => ("train", format!("clip_{i:05}")),
            Split::Test => ("test", format!("clip_{i:05}")),
        };
        plan.push(PlannedClip {
            record: ClipRecord {
                clip_id: name.clone(),
                frame_count,
                path: format!("{dir}/{name}"),
                split,
            },
            scene,
        });
    }
    plan
}

/// Renders one planned clip.
pub fn render_planned(cfg: &DataConfig, clip: &PlannedClip) -> Result<VideoTensor> {
    generate_synthetic_clip(&clip.scene, clip.record.frame_count, cfg.height, cfg.width)
}

/// Serializes manifest records as JSON lines.
pub fn manifest_to_jsonl(records: &[ClipRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses a JSON-lines manifest.
pub fn manifest_from_jsonl(text: &str) -> Result<Vec<ClipRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
