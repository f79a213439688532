use serde::{Deserialize, Serialize};

use super::voc::WindowBox;
use super::{DatasetError, Result};
use crate::grammar::GrammarParams;
use crate::procgen::{PatchImage, Rect, PATCH_PIXELS};

pub const DEFAULT_DILATION: f64 = 0.1;

/// Maps patch pixels back to image pixels: `image = origin + patch·scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchScale {
    pub origin: (f64, f64),
    pub scale: (f64, f64),
}

impl PatchScale {
    pub fn to_image(&self, px: f64, py: f64) -> (f64, f64) {
        (self.origin.0 + px * self.scale.0, self.origin.1 + py * self.scale.1)
    }

    pub fn to_patch(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.origin.0) / self.scale.0, (y - self.origin.1) / self.scale.1)
    }

    /// Window rectangle of `params` in image pixels.
    pub fn window_in_image(&self, params: &GrammarParams) -> Rect {
        let (x0, y0) = self.to_image(params.p_u.x, params.p_u.y);
        let (x1, y1) = self.to_image(params.p_b.x, params.p_b.y);
        Rect::new(x0, y0, x1, y1)
    }
}

/// The box grown by `dilation` of its size on every side, clamped to the image.
pub fn dilated_box(b: &WindowBox, dilation: f64, width: u32, height: u32) -> Rect {
    let (dx, dy) = (dilation * b.width(), dilation * b.height());
    Rect::new(
        (b.xmin - dx).max(0.0),
        (b.ymin - dy).max(0.0),
        (b.xmax + dx).min(width as f64),
        (b.ymax + dy).min(height as f64),
    )
}

/// Crops the dilated box and resamples it bilinearly to 64×64, sampling
/// each patch pixel center.
pub fn extract_patch(img: &image::RgbImage, b: &WindowBox, dilation: f64) -> Result<(PatchImage, PatchScale)> {
    let (w, h) = img.dimensions();
    let bounds = |message: String| DatasetError::Bounds { box_id: b.id, message };
    if !(b.xmin >= 0.0 && b.ymin >= 0.0 && b.xmax <= w as f64 && b.ymax <= h as f64 && b.xmin < b.xmax && b.ymin < b.ymax) {
        return Err(bounds(format!("box outside the {w}x{h} image or empty")));
    }
    if !(dilation >= 0.0 && dilation.is_finite()) {
        return Err(bounds(format!("dilation {dilation} must be non-negative")));
    }
    let r = dilated_box(b, dilation, w, h);
    let n = PATCH_PIXELS as f64;
    let scale = PatchScale {
        origin: (r.x0, r.y0),
        scale: (r.width() / n, r.height() / n),
    };
    let raw = img.as_raw();
    let texel = |x: usize, y: usize, c: usize| raw[3 * (y * w as usize + x) + c] as f64 / 255.0;
    let mut pixels = Vec::with_capacity(PATCH_PIXELS * PATCH_PIXELS * 3);
    for j in 0..PATCH_PIXELS {
        let (_, sy) = scale.to_image(0.0, j as f64 + 0.5);
        let v = (sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = v.floor() as usize;
        let y1 = (y0 + 1).min(h as usize - 1);
        let fy = v - y0 as f64;
        for i in 0..PATCH_PIXELS {
            let (sx, _) = scale.to_image(i as f64 + 0.5, 0.0);
            let u = (sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = u.floor() as usize;
            let x1 = (x0 + 1).min(w as usize - 1);
            let fx = u - x0 as f64;
            for c in 0..3 {
                let top = texel(x0, y0, c) * (1.0 - fx) + texel(x1, y0, c) * fx;
                let bottom = texel(x0, y1, c) * (1.0 - fx) + texel(x1, y1, c) * fx;
                pixels.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0) as f32);
            }
        }
    }
    let patch = PatchImage::new(pixels).map_err(|e| DatasetError::Image(e.to_string()))?;
    Ok((patch, scale))
}
