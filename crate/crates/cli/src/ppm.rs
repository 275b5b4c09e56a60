//! Binary PPM (P6) grids of mosaic images.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use mosaic_core::dataset::{ImageSample, SIDE};

/// Separator and empty-cell gray level.
const SEPARATOR: f32 = 0.5;

/// `rows x cols` images upscaled by `scale`, with 1-pixel separators
/// (including an outer border) when `separators` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrid {
    pub images: Vec<ImageSample>,
    pub rows: usize,
    pub cols: usize,
    pub scale: usize,
    pub separators: bool,
}

/// Row-major RGB raster with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f32>,
}

impl SampleGrid {
    /// Grid with default 16x scale and separators; images fill row-major.
    pub fn new(images: Vec<ImageSample>, rows: usize, cols: usize) -> Self {
        Self {
            images,
            rows,
            cols,
            scale: 16,
            separators: true,
        }
    }

    /// Near-square layout for `images`.
    pub fn auto(images: Vec<ImageSample>) -> Self {
        let cols = (images.len() as f64).sqrt().ceil().max(1.0) as usize;
        let rows = images.len().div_ceil(cols).max(1);
        Self::new(images, rows, cols)
    }

    fn gap(&self) -> usize {
        self.separators as usize
    }

    pub fn width(&self) -> usize {
        self.cols * (SIDE * self.scale + self.gap()) + self.gap()
    }

    pub fn height(&self) -> usize {
        self.rows * (SIDE * self.scale + self.gap()) + self.gap()
    }

    pub fn render(&self) -> Result<Raster> {
        ensure!(self.scale >= 1, "grid scale must be positive");
        ensure!(
            self.images.len() <= self.rows * self.cols,
            "{} images do not fit a {}x{} grid",
            self.images.len(),
            self.rows,
            self.cols
        );
        let (w, h) = (self.width(), self.height());
        let mut rgb = vec![SEPARATOR; w * h * 3];
        let cell = SIDE * self.scale + self.gap();
        for (i, img) in self.images.iter().enumerate() {
            ensure!(
                img.pixels.iter().all(|v| (0.0..=1.0).contains(v)),
                "image {i} has pixels outside [0, 1]"
            );
            let (top, left) = ((i / self.cols) * cell + self.gap(), (i % self.cols) * cell + self.gap());
            for y in 0..SIDE * self.scale {
                for x in 0..SIDE * self.scale {
                    let px = img.pixel(y / self.scale, x / self.scale);
                    let at = ((top + y) * w + left + x) * 3;
                    rgb[at..at + 3].copy_from_slice(&px);
                }
            }
        }
        Ok(Raster {
            width: w,
            height: h,
            rgb,
        })
    }
}

fn quantize(v: f32) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

pub fn encode_ppm(raster: &Raster) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.extend(raster.rgb.iter().map(|&v| quantize(v)));
    out
}

pub fn write_ppm(grid: &SampleGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_ppm(&grid.render()?);
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Parses the exact header layout written by [`encode_ppm`].
pub fn decode_ppm(bytes: &[u8]) -> Result<Raster> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        let end = bytes[pos..]
            .iter()
            .position(|b| b.is_ascii_whitespace())
            .map(|e| pos + e)
            .context("truncated PPM header")?;
        fields.push(std::str::from_utf8(&bytes[pos..end])?.to_string());
        pos = end + 1;
    }
    if fields[0] != "P6" || fields[3] != "255" {
        bail!("not an 8-bit P6 file");
    }
    let width: usize = fields[1].parse()?;
    let height: usize = fields[2].parse()?;
    let payload = &bytes[pos..];
    ensure!(
        payload.len() == width * height * 3,
        "PPM payload has {} bytes",
        payload.len()
    );
    Ok(Raster {
        width,
        height,
        rgb: payload.iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    decode_ppm(&fs::read(path).with_context(|| format!("reading {}", path.display()))?)
}

/// Cuts the images back out of a rendered grid.
pub fn split_grid(raster: &Raster, grid: &SampleGrid) -> Result<Vec<ImageSample>> {
    ensure!(
        raster.width == grid.width() && raster.height == grid.height(),
        "raster is {}x{}, grid expects {}x{}",
        raster.width,
        raster.height,
        grid.width(),
        grid.height()
    );
    let cell = SIDE * grid.scale + grid.gap();
    Ok((0..grid.rows * grid.cols)
        .map(|i| {
            let (top, left) = ((i / grid.cols) * cell + grid.gap(), (i % grid.cols) * cell + grid.gap());
            let mut img = ImageSample::default();
            for r in 0..SIDE {
                for c in 0..SIDE {
                    let at = ((top + r * grid.scale) * raster.width + left + c * grid.scale) * 3;
                    img.set_pixel(r, c, [raster.rgb[at], raster.rgb[at + 1], raster.rgb[at + 2]]);
                }
            }
            img
        })
        .collect())
}
