//! The paired-color mosaic dataset and the image-consistency metric.
//!
//! Every image is 3x4x4. Each of the four 2x2 quadrants holds one
//! key/value [`PairBlock`]: the left column carries the key color, the
//! right column the value color. An image is drawn from a single
//! [`Pattern`], so its key -> value mapping is constant across quadrants.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::numerics::{Prng, Tensor};

pub const CHANNELS: usize = 3;
pub const SIDE: usize = 4;
pub const IMAGE_LEN: usize = CHANNELS * SIDE * SIDE;
/// Row/column origin of each quadrant.
pub const QUADRANTS: [(usize, usize); 4] = [(0, 0), (0, 2), (2, 0), (2, 2)];

const DATASET_MAGIC: &[u8; 4] = b"MOSD";
const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Yellow,
    Blue,
}

impl Color {
    /// Tie-break order for classification.
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Yellow, Color::Blue];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Yellow => "yellow",
            Color::Blue => "blue",
        }
    }
}

/// A key/value color pair rendered as a 2x2 block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairBlock {
    pub key: Color,
    pub value: Color,
}

impl PairBlock {
    pub const fn new(key: Color, value: Color) -> Self {
        Self { key, value }
    }
}

/// One of the three disjoint pairings of the four colors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pattern {
    pub id: u8,
    pub pairs: [PairBlock; 2],
}

use Color::{Blue, Green, Red, Yellow};

pub const PATTERNS: [Pattern; 3] = [
    Pattern {
        id: 1,
        pairs: [PairBlock::new(Red, Green), PairBlock::new(Yellow, Blue)],
    },
    Pattern {
        id: 2,
        pairs: [PairBlock::new(Red, Yellow), PairBlock::new(Green, Blue)],
    },
    Pattern {
        id: 3,
        pairs: [PairBlock::new(Red, Blue), PairBlock::new(Green, Yellow)],
    },
];

/// The six pair blocks realizable in the dataset, pattern by pattern.
pub fn canonical_pairs() -> [PairBlock; 6] {
    let mut out = [PairBlock::new(Red, Green); 6];
    for (i, p) in PATTERNS.iter().enumerate() {
        out[2 * i] = p.pairs[0];
        out[2 * i + 1] = p.pairs[1];
    }
    out
}

impl Pattern {
    pub fn contains(&self, pair: PairBlock) -> bool {
        self.pairs.contains(&pair)
    }
}

/// A 3x4x4 image, channel-major.
///
/// Values live in `[0, 1]`; [`ImageSample::to_diffusion`] maps them to
/// `[-1, 1]` for the forward process.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageSample {
    pub pixels: [f32; IMAGE_LEN],
}

impl Default for ImageSample {
    fn default() -> Self {
        Self {
            pixels: [0.0; IMAGE_LEN],
        }
    }
}

impl ImageSample {
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let at = |c: usize| self.pixels[c * SIDE * SIDE + row * SIDE + col];
        [at(0), at(1), at(2)]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.pixels[c * SIDE * SIDE + row * SIDE + col] = v;
        }
    }

    /// Renders four pair blocks into the quadrants in [`QUADRANTS`] order.
    pub fn render(blocks: [PairBlock; 4]) -> Self {
        let mut img = Self::default();
        for (block, &(r0, c0)) in blocks.iter().zip(&QUADRANTS) {
            img.paint_block(r0, c0, *block);
        }
        img
    }

    fn paint_block(&mut self, r0: usize, c0: usize, block: PairBlock) {
        for dr in 0..2 {
            self.set_pixel(r0 + dr, c0, block.key.rgb());
            self.set_pixel(r0 + dr, c0 + 1, block.value.rgb());
        }
    }

    /// `[3,4,4]` tensor in `[-1, 1]`.
    pub fn to_diffusion(&self) -> Tensor<f32> {
        let data = self.pixels.iter().map(|&v| 2.0 * v - 1.0).collect();
        Tensor::new(&[CHANNELS, SIDE, SIDE], data).expect("image shape")
    }

    /// Clamps a `[-1, 1]`-domain slice of 48 values and maps it to `[0, 1]`.
    pub fn from_diffusion(values: &[f32]) -> Result<Self> {
        ensure!(
            values.len() == IMAGE_LEN,
            "expected {IMAGE_LEN} values, got {}",
            values.len()
        );
        let mut img = Self::default();
        for (dst, &v) in img.pixels.iter_mut().zip(values) {
            *dst = (v.clamp(-1.0, 1.0) + 1.0) / 2.0;
        }
        Ok(img)
    }

    pub fn from_unit(values: &[f32]) -> Result<Self> {
        ensure!(
            values.len() == IMAGE_LEN,
            "expected {IMAGE_LEN} values, got {}",
            values.len()
        );
        let mut img = Self::default();
        img.pixels.copy_from_slice(values);
        Ok(img)
    }

    /// 2x2 patch of quadrant `q` flattened channel-major to 12 values.
    pub fn quadrant_patch(&self, q: usize) -> [f32; 12] {
        let (r0, c0) = QUADRANTS[q];
        let mut out = [0.0; 12];
        for c in 0..CHANNELS {
            for dr in 0..2 {
                for dc in 0..2 {
                    out[c * 4 + dr * 2 + dc] = self.pixels[c * SIDE * SIDE + (r0 + dr) * SIDE + c0 + dc];
                }
            }
        }
        out
    }
}

/// Nearest anchor color by squared distance; ties resolve in
/// [`Color::ALL`] order.
pub fn classify_pixel(rgb: [f32; 3]) -> Color {
    let mut best = Color::ALL[0];
    let mut best_d = f32::INFINITY;
    for color in Color::ALL {
        let a = color.rgb();
        let d: f32 = (0..3).map(|i| (rgb[i] - a[i]) * (rgb[i] - a[i])).sum();
        if d < best_d {
            best = color;
            best_d = d;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quadrant {
    WellFormed(PairBlock),
    Malformed,
}

/// Decodes each quadrant into a pair block, if its columns are uniform
/// and carry two different colors.
pub fn quadrant_mapping(image: &ImageSample) -> [Quadrant; 4] {
    QUADRANTS.map(|(r0, c0)| {
        let key = classify_pixel(image.pixel(r0, c0));
        let value = classify_pixel(image.pixel(r0, c0 + 1));
        let uniform =
            classify_pixel(image.pixel(r0 + 1, c0)) == key && classify_pixel(image.pixel(r0 + 1, c0 + 1)) == value;
        if uniform && key != value {
            Quadrant::WellFormed(PairBlock::new(key, value))
        } else {
            Quadrant::Malformed
        }
    })
}

/// True iff every quadrant is well formed and all pairs belong to one
/// pattern.
pub fn is_consistent(image: &ImageSample) -> bool {
    let quads = quadrant_mapping(image);
    let mut pairs = [PairBlock::new(Red, Green); 4];
    for (slot, q) in pairs.iter_mut().zip(quads) {
        match q {
            Quadrant::WellFormed(p) => *slot = p,
            Quadrant::Malformed => return false,
        }
    }
    blocks_consistent(&pairs)
}

/// Single-pattern rule on already decoded blocks.
pub fn blocks_consistent(pairs: &[PairBlock]) -> bool {
    PATTERNS.iter().any(|p| pairs.iter().all(|&pair| p.contains(pair)))
}

/// One training image: a uniformly chosen pattern, then an independent
/// uniform choice between its two blocks for every quadrant.
pub fn sample_image(rng: &mut Prng) -> (ImageSample, usize) {
    let pattern = rng.below(PATTERNS.len());
    let blocks = [(); 4].map(|_| PATTERNS[pattern].pairs[rng.below(2)]);
    (ImageSample::render(blocks), pattern)
}

pub fn generate_dataset(n: usize, seed: u64) -> Result<Vec<ImageSample>> {
    ensure!(n >= 1, "dataset size must be at least 1");
    let mut rng = Prng::new(seed);
    Ok((0..n).map(|_| sample_image(&mut rng).0).collect())
}

/// Consistency statistics over independent runs.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyReport {
    pub samples_per_run: usize,
    pub runs: usize,
    pub per_run_consistent: Vec<usize>,
    pub per_run_fraction: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across runs (0 for a single run).
    pub std: f64,
}

impl ConsistencyReport {
    pub fn from_counts(samples_per_run: usize, counts: Vec<usize>) -> Self {
        let fractions: Vec<f64> = counts.iter().map(|&c| c as f64 / samples_per_run as f64).collect();
        let runs = counts.len();
        let mean = fractions.iter().sum::<f64>() / runs as f64;
        let std = if runs > 1 {
            (fractions.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (runs - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            samples_per_run,
            runs,
            per_run_consistent: counts,
            per_run_fraction: fractions,
            mean,
            std,
        }
    }

    /// Pooled fraction over every sample of every run.
    pub fn pooled(&self) -> (usize, usize) {
        (self.per_run_consistent.iter().sum(), self.samples_per_run * self.runs)
    }

    /// CSV with header `run,samples,consistent,fraction`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,samples,consistent,fraction\n");
        for (run, (&c, f)) in self.per_run_consistent.iter().zip(&self.per_run_fraction).enumerate() {
            out.push_str(&format!("{run},{},{c},{f}\n", self.samples_per_run));
        }
        out
    }
}

/// Monte-Carlo random baseline: four blocks drawn with replacement from
/// the six canonical pairs, rendered, then scored.
pub fn baseline_consistency(samples_per_run: usize, runs: usize, seed: u64) -> Result<ConsistencyReport> {
    ensure!(samples_per_run >= 1 && runs >= 1, "baseline counts must be positive");
    let pairs = canonical_pairs();
    let counts: Vec<usize> = (0..runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = Prng::child(seed, run as u64);
            (0..samples_per_run)
                .filter(|_| {
                    let blocks = [(); 4].map(|_| pairs[rng.below(pairs.len())]);
                    is_consistent(&ImageSample::render(blocks))
                })
                .count()
        })
        .collect();
    Ok(ConsistencyReport::from_counts(samples_per_run, counts))
}

/// Exact consistency probability of the random baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExactProbability {
    pub consistent: u64,
    pub total: u64,
}

impl ExactProbability {
    pub fn value(&self) -> f64 {
        self.consistent as f64 / self.total as f64
    }
}

/// Enumerates all `6^4` quadrant assignments of the canonical pairs.
pub fn exact_baseline_probability() -> ExactProbability {
    let pairs = canonical_pairs();
    let n = pairs.len();
    let mut consistent = 0;
    let mut total = 0;
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                for d in 0..n {
                    total += 1;
                    let img = ImageSample::render([pairs[a], pairs[b], pairs[c], pairs[d]]);
                    if is_consistent(&img) {
                        consistent += 1;
                    }
                }
            }
        }
    }
    ExactProbability { consistent, total }
}

/// Writes the `MOSD` binary format: magic, version, image count, values
/// per image (48), then little-endian f32 pixels per image.
pub fn write_dataset(path: impl AsRef<Path>, images: &[ImageSample]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(DATASET_MAGIC)?;
    write(&DATASET_VERSION.to_le_bytes())?;
    write(&(images.len() as u32).to_le_bytes())?;
    write(&(IMAGE_LEN as u32).to_le_bytes())?;
    for img in images {
        for v in img.pixels {
            write(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<ImageSample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<ImageSample>> {
    if bytes.len() < 16 || &bytes[..4] != DATASET_MAGIC {
        return Err(Error::Format("missing MOSD header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if word(4) != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {}", word(4))));
    }
    let count = word(8) as usize;
    if word(12) as usize != IMAGE_LEN {
        return Err(Error::Format(format!(
            "expected {IMAGE_LEN} values per image, header says {}",
            word(12)
        )));
    }
    let body = &bytes[16..];
    if body.len() != count * IMAGE_LEN * 4 {
        return Err(Error::Format(format!(
            "{count} images need {} payload bytes, found {}",
            count * IMAGE_LEN * 4,
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(IMAGE_LEN * 4)
        .map(|chunk| {
            let mut img = ImageSample::default();
            for (dst, b) in img.pixels.iter_mut().zip(chunk.chunks_exact(4)) {
                *dst = f32::from_le_bytes(b.try_into().unwrap());
            }
            img
        })
        .collect())
}

/// Stacks images as a `[B,3,4,4]` batch in the `[-1, 1]` domain.
pub fn to_batch(images: &[ImageSample]) -> Tensor<f32> {
    let mut data = Vec::with_capacity(images.len() * IMAGE_LEN);
    for img in images {
        data.extend(img.pixels.iter().map(|&v| 2.0 * v - 1.0));
    }
    Tensor::new(&[images.len(), CHANNELS, SIDE, SIDE], data).expect("batch shape")
}
