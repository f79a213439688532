use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layout::{layout_cells, Layout};
use super::{ProcgenError, Result};
use crate::grammar::GrammarTree;

/// Side length of a patch in pixels.
pub const PATCH_PIXELS: usize = 64;

const PIXELS: usize = PATCH_PIXELS * PATCH_PIXELS;

/// 64×64 RGB image, interleaved row-major, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PatchImage {
    pixels: Vec<f32>,
}

impl PatchImage {
    pub fn new(pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != PIXELS * 3 {
            return Err(ProcgenError::Image(format!("expected {} values, got {}", PIXELS * 3, pixels.len())));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ProcgenError::Image(format!("value {v} outside [0, 1]")));
        }
        Ok(Self { pixels })
    }

    pub fn filled(rgb: [f32; 3]) -> Self {
        Self {
            pixels: rgb.iter().copied().cycle().take(PIXELS * 3).collect(),
        }
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * PATCH_PIXELS + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Planar copy, channel-major, for the recognizer input.
    pub fn to_planar(&self) -> Vec<f32> {
        let mut out = vec![0.0; PIXELS * 3];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * PIXELS + i] = px[c];
            }
        }
        out
    }

    /// Inverse of [`PatchImage::to_planar`]; values are clamped to [0, 1].
    pub fn from_planar(planar: &[f32]) -> Result<Self> {
        if planar.len() != PIXELS * 3 {
            return Err(ProcgenError::Image(format!("expected {} values, got {}", PIXELS * 3, planar.len())));
        }
        let mut pixels = vec![0.0; PIXELS * 3];
        for i in 0..PIXELS {
            for c in 0..3 {
                pixels[3 * i + c] = planar[c * PIXELS + i].clamp(0.0, 1.0);
            }
        }
        Ok(Self { pixels })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self.pixels.iter().map(|v| (v * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(PATCH_PIXELS as u32, PATCH_PIXELS as u32, raw).expect("sized buffer")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Result<Self> {
        if img.dimensions() != (PATCH_PIXELS as u32, PATCH_PIXELS as u32) {
            return Err(ProcgenError::Image(format!("expected 64x64, got {:?}", img.dimensions())));
        }
        Ok(Self {
            pixels: img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| ProcgenError::Image(format!("{}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| ProcgenError::Image(format!("{}: {e}", path.display())))?;
        Self::from_rgb8(&img.to_rgb8())
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, image::ImageFormat::Png).expect("in-memory PNG encode");
        buf.into_inner()
    }
}

/// Colors and line settings for rasterizing a grammar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub wall_color: [f64; 3],
    pub frame_color: [f64; 3],
    pub glass_color: [f64; 3],
    /// Standard deviation of additive per-channel Gaussian noise.
    pub noise: f64,
    /// Width in pixels of the mullions between cells.
    pub line_thickness: f64,
}

impl Default for StyleParams {
    fn default() -> Self {
        Self {
            wall_color: [0.76, 0.66, 0.54],
            frame_color: [0.94, 0.94, 0.91],
            glass_color: [0.20, 0.27, 0.35],
            noise: 0.0,
            line_thickness: 2.0,
        }
    }
}

/// Ranges for randomizing a style. Hue is a rotation about the gray axis in
/// radians, brightness a multiplicative factor around 1, line thickness a
/// relative change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleJitter {
    pub hue: f64,
    pub brightness: f64,
    pub line_thickness: f64,
}

impl Default for StyleJitter {
    fn default() -> Self {
        Self {
            hue: 0.35,
            brightness: 0.2,
            line_thickness: 0.2,
        }
    }
}

impl StyleParams {
    /// Independently jitters each of the three colors and the mullion width.
    pub fn jittered<R: Rng + ?Sized>(&self, jitter: &StyleJitter, rng: &mut R) -> StyleParams {
        let mut color = |c: [f64; 3]| {
            let angle = if jitter.hue > 0.0 { rng.random_range(-jitter.hue..=jitter.hue) } else { 0.0 };
            let gain = if jitter.brightness > 0.0 {
                1.0 + rng.random_range(-jitter.brightness..=jitter.brightness)
            } else {
                1.0
            };
            rotate_hue(c, angle).map(|v| (v * gain).clamp(0.0, 1.0))
        };
        let wall_color = color(self.wall_color);
        let frame_color = color(self.frame_color);
        let glass_color = color(self.glass_color);
        let scale = if jitter.line_thickness > 0.0 {
            1.0 + rng.random_range(-jitter.line_thickness..=jitter.line_thickness)
        } else {
            1.0
        };
        StyleParams {
            wall_color,
            frame_color,
            glass_color,
            noise: self.noise,
            line_thickness: self.line_thickness * scale,
        }
    }
}

fn rotate_hue(c: [f64; 3], angle: f64) -> [f64; 3] {
    // Rodrigues rotation about (1, 1, 1)/sqrt(3).
    let (s, co) = angle.sin_cos();
    let k = 1.0 / 3f64.sqrt();
    let dot = k * (c[0] + c[1] + c[2]);
    let cross = [k * (c[2] - c[1]), k * (c[0] - c[2]), k * (c[1] - c[0])];
    std::array::from_fn(|i| c[i] * co + cross[i] * s + k * dot * (1.0 - co))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelClass {
    Wall,
    Frame,
    Glass,
}

/// Class of the point `(x, y)`. Inside the frame, points within half the
/// line thickness of an edge shared by two cells belong to the frame.
pub fn classify_pixel(layout: &Layout, line_thickness: f64, x: f64, y: f64) -> PixelClass {
    if !layout.window.contains(x, y) {
        return PixelClass::Wall;
    }
    if !layout.frame.contains(x, y) {
        return PixelClass::Frame;
    }
    let half = 0.5 * line_thickness;
    let f = &layout.frame;
    for c in &layout.cells {
        if !c.contains(x, y) {
            continue;
        }
        let near = |d: f64, on_frame_edge: bool| !on_frame_edge && d < half;
        let mullion = near(x - c.x0, c.x0 <= f.x0)
            || near(c.x1 - x, c.x1 >= f.x1)
            || near(y - c.y0, c.y0 <= f.y0)
            || near(c.y1 - y, c.y1 >= f.y1);
        return if mullion { PixelClass::Frame } else { PixelClass::Glass };
    }
    PixelClass::Glass
}

/// Renders a grammar by sampling each pixel center, then adds seeded noise.
pub fn rasterize_patch(tree: &GrammarTree, style: &StyleParams, seed: u64) -> Result<PatchImage> {
    let layout = layout_cells(tree)?;
    let mut pixels = Vec::with_capacity(PIXELS * 3);
    for y in 0..PATCH_PIXELS {
        for x in 0..PATCH_PIXELS {
            let color = match classify_pixel(&layout, style.line_thickness, x as f64 + 0.5, y as f64 + 0.5) {
                PixelClass::Wall => style.wall_color,
                PixelClass::Frame => style.frame_color,
                PixelClass::Glass => style.glass_color,
            };
            pixels.extend(color.iter().map(|&v| v as f32));
        }
    }
    if style.noise > 0.0 {
        let normal = Normal::new(0.0, style.noise).map_err(|e| ProcgenError::Image(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in pixels.iter_mut() {
            *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    } else {
        pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Ok(PatchImage { pixels })
}
