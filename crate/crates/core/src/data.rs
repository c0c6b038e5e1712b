//! In-memory datasets, preprocessing and the procedural generators.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::Task;
use crate::error::{Error, Result};
use crate::loss::TaskLabel;
use crate::ops::Mode;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// 8-bit image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * channels || !(channels == 1 || channels == 3) {
            return Err(Error::Format(format!(
                "{width}x{height}x{channels} image cannot hold {} bytes",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn gray(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 1, pixels)
    }

    pub fn at(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.pixels[(row * self.width + col) * self.channels + ch]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// Path relative to the dataset root.
    pub path: String,
    pub image: Image,
    pub label: TaskLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub split: Split,
    /// Per-channel pixel mean of the training split, in pixel units.
    pub mean: Vec<f64>,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<TaskLabel> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn channels(&self) -> usize {
        self.examples.first().map_or(self.mean.len(), |e| e.image.channels)
    }
}

/// Per-channel mean pixel value over `examples`.
pub fn channel_means(examples: &[Example]) -> Vec<f64> {
    let Some(first) = examples.first() else {
        return Vec::new();
    };
    let c = first.image.channels;
    let mut sums = vec![0.0; c];
    let mut count = 0usize;
    for e in examples {
        for px in e.image.pixels.chunks_exact(c) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += f64::from(v);
            }
        }
        count += e.image.width * e.image.height;
    }
    sums.iter().map(|s| s / count.max(1) as f64).collect()
}

/// Square `crop × crop` window scaled to `[0, 1]` after subtracting the
/// channel mean. Training draws the offset (and an optional horizontal
/// flip) from `rng`; evaluation takes the centered window.
pub fn preprocess(image: &Image, mean: &[f64], crop: usize, mode: Mode, hflip: bool, rng: Option<&mut Rng>) -> Result<Tensor> {
    if image.width < crop || image.height < crop {
        return Err(Error::Format(format!(
            "{}x{} image is smaller than the {crop}-pixel crop",
            image.width, image.height
        )));
    }
    if mean.len() != image.channels {
        return Err(Error::shape("preprocess mean", &[mean.len()], &[image.channels]));
    }
    let (mut top, mut left) = ((image.height - crop) / 2, (image.width - crop) / 2);
    let mut flip = false;
    if let (Mode::Train, Some(rng)) = (mode, rng) {
        top = rng.below(image.height - crop + 1);
        left = rng.below(image.width - crop + 1);
        flip = hflip && rng.uniform() < 0.5;
    }
    let c = image.channels;
    let mut out = Vec::with_capacity(crop * crop * c);
    for r in 0..crop {
        for col in 0..crop {
            let src = if flip { left + crop - 1 - col } else { left + col };
            for (ch, m) in mean.iter().enumerate() {
                out.push((f64::from(image.at(top + r, src, ch)) - m) / 255.0);
            }
        }
    }
    Tensor::new(&[crop, crop, c], out)
}

/// Stacks preprocessed images into `[batch, crop, crop, channels]`.
pub fn stack(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::contract("empty batch"))?;
    let mut dims = vec![images.len()];
    dims.extend_from_slice(first.dims());
    let mut values = Vec::with_capacity(first.len() * images.len());
    for t in images {
        if t.dims() != first.dims() {
            return Err(Error::shape("stack", first.dims(), t.dims()));
        }
        values.extend_from_slice(t.values());
    }
    Tensor::new(&dims, values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    /// Class carried by a fine period-2 fill pattern.
    Texture,
    /// Class carried by a coarse blob arrangement.
    Layout,
    /// Half the classes of each kind.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub task: Task,
    pub image_size: usize,
    pub count: usize,
    pub seed: u64,
    pub split: Split,
    /// Translation range in scene units (pixels), symmetric.
    pub translation: f64,
    /// Rotation range in degrees, symmetric.
    pub rotation_deg: f64,
    pub n_classes: usize,
    pub signal: Signal,
}

impl SynthConfig {
    pub fn new(task: Task, count: usize, seed: u64) -> Self {
        Self {
            task,
            image_size: 32,
            count,
            seed,
            split: Split::Train,
            translation: 4.0,
            rotation_deg: 45.0,
            n_classes: 4,
            signal: Signal::Mixed,
        }
    }
}

const SUPERSAMPLE: [f64; 4] = [-0.375, -0.125, 0.125, 0.375];

/// Snaps values that are zero up to rounding, so quarter turns stay exact.
fn snap(v: f64) -> f64 {
    if v.abs() < 1e-12 {
        0.0
    } else {
        v
    }
}

/// Ground-plane intensity at scene point `(x, y)`: a low-contrast 8-unit
/// checkerboard with three high-contrast glyphs around the origin.
pub fn scene_intensity(x: f64, y: f64) -> f64 {
    let cell = (libm::floor(x / 8.0) as i64 + libm::floor(y / 8.0) as i64).rem_euclid(2);
    let mut v = if cell == 0 { 100.0 } else { 130.0 };
    // bright disc
    let (dx, dy) = (x + 8.0, y + 8.0);
    if dx * dx + dy * dy <= 9.0 {
        v = 250.0;
    }
    // dark square
    if (x - 8.0).abs() <= 3.0 && (y + 8.0).abs() <= 3.0 {
        v = 10.0;
    }
    // bright cross
    let (cx, cy) = ((x + 8.0).abs(), (y - 8.0).abs());
    if (cx <= 1.0 && cy <= 4.0) || (cy <= 1.0 && cx <= 4.0) {
        v = 235.0;
    }
    v
}

/// Renders the scene seen by a camera translated by `(tx, ty)` and rotated
/// by `theta` radians about the view axis.
pub fn render_pose(size: usize, tx: f64, ty: f64, theta: f64) -> Image {
    let (s, c) = (snap(libm::sin(theta)), snap(libm::cos(theta)));
    let half = size as f64 / 2.0;
    let mut pixels = Vec::with_capacity(size * size);
    for row in 0..size {
        for col in 0..size {
            let mut acc = 0.0;
            for oy in SUPERSAMPLE {
                for ox in SUPERSAMPLE {
                    let u = col as f64 + 0.5 + ox - half;
                    let v = row as f64 + 0.5 + oy - half;
                    acc += scene_intensity(c * u - s * v + tx, s * u + c * v + ty);
                }
            }
            pixels.push(libm::round(acc / 16.0).clamp(0.0, 255.0) as u8);
        }
    }
    Image::gray(size, size, pixels).expect("square buffer")
}

pub fn pose_label(tx: f64, ty: f64, theta: f64) -> TaskLabel {
    TaskLabel::Pose {
        position: [tx, ty, 0.0],
        orientation: [libm::cos(theta / 2.0), 0.0, 0.0, libm::sin(theta / 2.0)],
    }
}

/// Pose dataset: uniformly random translations and view-axis rotations.
pub fn synth_pose(config: &SynthConfig) -> Result<Dataset> {
    if config.task != Task::Pose {
        return Err(Error::config("synth_pose needs task = pose"));
    }
    let mut rng = Rng::new(config.seed, 0x9053);
    let rot = config.rotation_deg.to_radians();
    let examples = (0..config.count)
        .map(|i| {
            let tx = rng.uniform_range(-config.translation, config.translation);
            let ty = rng.uniform_range(-config.translation, config.translation);
            let theta = rng.uniform_range(-rot, rot);
            Example {
                path: format!("img/{i:05}.pgm"),
                image: render_pose(config.image_size, tx, ty, theta),
                label: pose_label(tx, ty, theta),
            }
        })
        .collect::<Vec<_>>();
    Ok(Dataset {
        task: Task::Pose,
        split: config.split,
        mean: channel_means_or_default(&examples, 1),
        examples,
    })
}

fn channel_means_or_default(examples: &[Example], channels: usize) -> Vec<f64> {
    if examples.is_empty() {
        vec![0.0; channels]
    } else {
        channel_means(examples)
    }
}

/// Zero-mean 2×2 tiles; every aligned or shifted 2×2 window of the tiled
/// pattern sums to zero, so 2×2 average pooling erases all of them.
const TEXTURES: [[f64; 4]; 8] = [
    [1.0, -1.0, 1.0, -1.0],  // vertical stripes
    [1.0, 1.0, -1.0, -1.0],  // horizontal stripes
    [1.0, -1.0, -1.0, 1.0],  // checker
    [3.0, -1.0, -1.0, -1.0], // dots
    [-3.0, 1.0, 1.0, 1.0],   // holes
    [2.0, 0.0, 0.0, -2.0],   // diagonal pairs
    [0.0, 2.0, -2.0, 0.0],   // anti-diagonal pairs
    [2.0, -2.0, 0.0, 0.0],   // half stripes
];

const TEXTURE_AMPLITUDE: f64 = 12.0;
const BLOB_LIFT: f64 = 70.0;
const BACKGROUND: f64 = 110.0;
const PIXEL_NOISE: f64 = 6.0;

/// Blob centers, in units of the image size, for each layout class.
const LAYOUTS: [[(f64, f64); 2]; 8] = [
    [(0.25, 0.25), (0.75, 0.75)],
    [(0.25, 0.75), (0.75, 0.25)],
    [(0.25, 0.5), (0.75, 0.5)],
    [(0.5, 0.25), (0.5, 0.75)],
    [(0.25, 0.25), (0.25, 0.75)],
    [(0.75, 0.25), (0.75, 0.75)],
    [(0.25, 0.25), (0.75, 0.25)],
    [(0.25, 0.75), (0.75, 0.75)],
];

/// How many of `n_classes` are texture classes under `signal`.
pub fn texture_class_count(signal: Signal, n_classes: usize) -> usize {
    match signal {
        Signal::Texture => n_classes,
        Signal::Layout => 0,
        Signal::Mixed => n_classes / 2,
    }
}

/// Class dataset; labels cycle through the classes so counts differ by at
/// most one.
pub fn synth_class(config: &SynthConfig) -> Result<Dataset> {
    if config.task != Task::Class {
        return Err(Error::config("synth_class needs task = class"));
    }
    let n = config.n_classes;
    let textures = texture_class_count(config.signal, n);
    if n < 2 || textures > TEXTURES.len() || n - textures > LAYOUTS.len() {
        return Err(Error::config(format!(
            "{n} classes unsupported for {:?} signal (at most {} texture and {} layout classes)",
            config.signal,
            TEXTURES.len(),
            LAYOUTS.len()
        )));
    }
    let mut rng = Rng::new(config.seed, 0xC1A5);
    let examples = (0..config.count)
        .map(|i| {
            let label = i % n;
            let image = if label < textures {
                render_texture_class(&mut rng, config.image_size, &TEXTURES[label])
            } else {
                render_layout_class(&mut rng, config.image_size, &LAYOUTS[label - textures])
            };
            Example {
                path: format!("img/{i:05}.pgm"),
                image,
                label: TaskLabel::Class(label),
            }
        })
        .collect::<Vec<_>>();
    Ok(Dataset {
        task: Task::Class,
        split: config.split,
        mean: channel_means_or_default(&examples, 1),
        examples,
    })
}

fn blob_radius(size: usize) -> f64 {
    size as f64 * 0.19
}

fn in_blob(blobs: &[(f64, f64)], r: f64, row: usize, col: usize) -> bool {
    let (y, x) = (row as f64 + 0.5, col as f64 + 0.5);
    blobs.iter().any(|&(by, bx)| (y - by) * (y - by) + (x - bx) * (x - bx) <= r * r)
}

fn quantize(v: f64) -> u8 {
    libm::round(v).clamp(0.0, 255.0) as u8
}

/// Two bright blobs at random places, filled with the class texture at a
/// random phase. Every tile is scaled to the same energy.
pub fn render_texture_class(rng: &mut Rng, size: usize, tile: &[f64; 4]) -> Image {
    let r = blob_radius(size);
    let blobs: Vec<(f64, f64)> = (0..2)
        .map(|_| (rng.uniform_range(r, size as f64 - r), rng.uniform_range(r, size as f64 - r)))
        .collect();
    let rms = libm::sqrt(tile.iter().map(|t| t * t).sum::<f64>() / 4.0);
    let (py, px) = (rng.below(2), rng.below(2));
    let mut pixels = Vec::with_capacity(size * size);
    for row in 0..size {
        for col in 0..size {
            let mut v = BACKGROUND + rng.uniform_range(-PIXEL_NOISE, PIXEL_NOISE);
            if in_blob(&blobs, r, row, col) {
                v += BLOB_LIFT + TEXTURE_AMPLITUDE / rms * tile[((row + py) % 2) * 2 + (col + px) % 2];
            }
            pixels.push(quantize(v));
        }
    }
    Image::gray(size, size, pixels).expect("square buffer")
}

/// Two flat bright blobs at the class arrangement, jittered slightly.
pub fn render_layout_class(rng: &mut Rng, size: usize, layout: &[(f64, f64); 2]) -> Image {
    let r = blob_radius(size);
    let jitter = size as f64 / 16.0;
    let blobs: Vec<(f64, f64)> = layout
        .iter()
        .map(|&(y, x)| {
            (
                y * size as f64 + rng.uniform_range(-jitter, jitter),
                x * size as f64 + rng.uniform_range(-jitter, jitter),
            )
        })
        .collect();
    let mut pixels = Vec::with_capacity(size * size);
    for row in 0..size {
        for col in 0..size {
            let mut v = BACKGROUND + rng.uniform_range(-PIXEL_NOISE, PIXEL_NOISE);
            if in_blob(&blobs, r, row, col) {
                v += BLOB_LIFT;
            }
            pixels.push(quantize(v));
        }
    }
    Image::gray(size, size, pixels).expect("square buffer")
}

/// Generates the dataset `config` describes.
pub fn synthesize(config: &SynthConfig) -> Result<Dataset> {
    match config.task {
        Task::Pose => synth_pose(config),
        Task::Class => synth_class(config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_pose() {
        let cfg = SynthConfig::new(Task::Pose, 3, 7);
        let a = synth_pose(&cfg).unwrap();
        let b = synth_pose(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(pose_label(0.0, 0.0, 0.0), TaskLabel::Pose {
            position: [0.0; 3],
            orientation: [1.0, 0.0, 0.0, 0.0]
        });
        let img = render_pose(32, 0.0, 0.0, 0.0);
        // glyph centers land where the scene puts them
        assert_eq!(img.at(8, 8, 0), 250);
        assert_eq!(img.at(8, 24, 0), 10);
        assert_eq!(img.at(24, 8, 0), 235);
    }

    #[test]
    fn quarter_turn_matches_rotated_image() {
        let n = 32;
        let base = render_pose(n, 0.0, 0.0, 0.0);
        let turned = render_pose(n, 0.0, 0.0, core::f64::consts::FRAC_PI_2);
        // scene point seen at pixel (r, c) of the turned camera is seen at
        // pixel (c, n-1-r) of the canonical one
        for r in 2..n - 2 {
            for c in 2..n - 2 {
                assert_eq!(turned.at(r, c, 0), base.at(c, n - 1 - r, 0), "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn class_labels_balanced_and_textures_distinct() {
        let mut cfg = SynthConfig::new(Task::Class, 10, 3);
        cfg.n_classes = 3;
        cfg.signal = Signal::Texture;
        let d = synth_class(&cfg).unwrap();
        let mut counts = [0usize; 3];
        for e in &d.examples {
            let TaskLabel::Class(c) = e.label else { panic!() };
            counts[c] += 1;
        }
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);

        // identical layout and noise, different pattern
        let a = render_texture_class(&mut Rng::new(1, 1), 32, &TEXTURES[0]);
        let b = render_texture_class(&mut Rng::new(1, 1), 32, &TEXTURES[1]);
        assert_ne!(a, b);
        cfg.n_classes = 9;
        assert!(synth_class(&cfg).is_err());
    }

    #[test]
    fn textures_vanish_under_two_by_two_pooling() {
        for tile in TEXTURES {
            assert_eq!(tile.iter().sum::<f64>(), 0.0);
        }
    }

    #[test]
    fn mean_subtraction_centers_training_data() {
        let d = synth_pose(&SynthConfig::new(Task::Pose, 6, 1)).unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for e in &d.examples {
            let t = preprocess(&e.image, &d.mean, 32, Mode::Eval, false, None).unwrap();
            total += t.values().iter().sum::<f64>();
            count += t.len();
        }
        assert!((total / count as f64).abs() <= 1e-9);
    }

    #[test]
    fn crops_and_flips() {
        let img = Image::gray(4, 4, (0..16).collect()).unwrap();
        let t = preprocess(&img, &[0.0], 2, Mode::Eval, false, None).unwrap();
        assert_eq!(t.values(), &[5.0 / 255.0, 6.0 / 255.0, 9.0 / 255.0, 10.0 / 255.0]);
        let mut rng = Rng::new(3, 0);
        for _ in 0..20 {
            let t = preprocess(&img, &[0.0], 2, Mode::Train, true, Some(&mut rng)).unwrap();
            let v: Vec<u8> = t.values().iter().map(|x| libm::round(x * 255.0) as u8).collect();
            assert_eq!(v[2], v[0] + 4);
            assert_eq!(v[1].abs_diff(v[0]), 1);
        }
        assert!(preprocess(&img, &[0.0], 5, Mode::Eval, false, None).is_err());
    }
}

#[cfg(test)]
mod baseline {
    use super::*;

    /// 1-nearest-neighbor accuracy on raw pixels.
    fn nearest_neighbor_accuracy(signal: Signal) -> f64 {
        let mut cfg = SynthConfig::new(Task::Class, 200, 31);
        cfg.signal = signal;
        let train = synth_class(&cfg).unwrap();
        cfg.seed = 32;
        cfg.count = 100;
        let test = synth_class(&cfg).unwrap();
        let dist = |a: &Image, b: &Image| -> f64 {
            a.pixels.iter().zip(&b.pixels).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum()
        };
        let correct = test
            .examples
            .iter()
            .filter(|t| {
                let best = train
                    .examples
                    .iter()
                    .min_by(|a, b| dist(&a.image, &t.image).total_cmp(&dist(&b.image, &t.image)))
                    .unwrap();
                best.label == t.label
            })
            .count();
        correct as f64 / test.len() as f64
    }

    #[test]
    fn raw_pixel_neighbors_see_layout_but_not_texture() {
        let layout = nearest_neighbor_accuracy(Signal::Layout);
        let texture = nearest_neighbor_accuracy(Signal::Texture);
        std::println!("nearest-neighbor accuracy: layout {layout}, texture {texture}");
        assert!(layout >= 0.9, "layout {layout}");
        assert!((texture - 0.25).abs() <= 0.1, "texture {texture}");
    }
}
