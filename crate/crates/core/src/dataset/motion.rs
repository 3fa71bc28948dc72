//! Simulated camera and foreground motion with closed-form flow.
//!
//! Pixel coordinates index pixel centres: pixel `(x, y)` sits at `(x, y)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::frame::{Frame, Mask};

/// Axis-aligned crop rectangle in continuous pixel-edge coordinates: the
/// full image of width `W` is `{x: 0, width: W}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl Rect {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            width: width as f64,
            height: height as f64,
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::Validation(format!(
                "degenerate crop rectangle {self:?}"
            )));
        }
        let tol = 1e-9;
        if self.x < -tol
            || self.y < -tol
            || self.x + self.width > width as f64 + tol
            || self.y + self.height > height as f64 + tol
        {
            return Err(Error::Validation(format!(
                "crop rectangle {self:?} leaves the {width}x{height} background"
            )));
        }
        Ok(())
    }

    /// Source position in the background for output pixel `(px, py)` of a
    /// crop resized to `out_w x out_h`.
    fn output_to_background(&self, px: f64, py: f64, out_w: usize, out_h: usize) -> (f64, f64) {
        (
            self.x + (px + 0.5) * self.width / out_w as f64 - 0.5,
            self.y + (py + 0.5) * self.height / out_h as f64 - 0.5,
        )
    }

    fn background_to_output(&self, sx: f64, sy: f64, out_w: usize, out_h: usize) -> (f64, f64) {
        (
            (sx + 0.5 - self.x) * out_w as f64 / self.width - 0.5,
            (sy + 0.5 - self.y) * out_h as f64 / self.height - 0.5,
        )
    }

    /// A random crop covering `scale` of each dimension, placed uniformly.
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        width: usize,
        height: usize,
        min_scale: f64,
    ) -> Self {
        let scale = if min_scale >= 1.0 {
            1.0
        } else {
            rng.random_range(min_scale..=1.0)
        };
        let (w, h) = (width as f64 * scale, height as f64 * scale);
        let x = if width as f64 > w {
            rng.random_range(0.0..=width as f64 - w)
        } else {
            0.0
        };
        let y = if height as f64 > h {
            rng.random_range(0.0..=height as f64 - h)
        } else {
            0.0
        };
        Self {
            x,
            y,
            width: w,
            height: h,
        }
    }
}

/// Crop two views of `background`, resize both back to full size, and
/// return them with the backward flow from view 2 into view 1.
pub fn simulate_background_motion(
    background: &Frame,
    crop_1: Rect,
    crop_2: Rect,
) -> Result<(Frame, Frame, FlowField)> {
    let (w, h) = background.dims();
    crop_1.validate(w, h)?;
    crop_2.validate(w, h)?;
    let render = |crop: Rect| {
        Frame::from_fn(w, h, |x, y| {
            let (sx, sy) = crop.output_to_background(x as f64, y as f64, w, h);
            background.sample(sx, sy)
        })
    };
    let flow = FlowField::from_fn(w, h, |x, y| {
        let (sx, sy) = crop_2.output_to_background(x as f64, y as f64, w, h);
        let (qx, qy) = crop_1.background_to_output(sx, sy, w, h);
        ((qx - x as f64) as f32, (qy - y as f64) as f32)
    });
    Ok((render(crop_1), render(crop_2), flow))
}

/// Bounds for random foreground motion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineRanges {
    /// Maximum translation per axis as a fraction of `min(W, H)`.
    pub translation_frac: f64,
    pub rotation_deg: f64,
    pub scale: (f64, f64),
    pub shear_deg: f64,
    /// Draws moving any image corner further than this fraction of
    /// `min(W, H)` are rejected and redrawn.
    pub max_corner_displacement_frac: f64,
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self {
            translation_frac: 0.05,
            rotation_deg: 5.0,
            scale: (0.95, 1.05),
            shear_deg: 2.0,
            max_corner_displacement_frac: 0.1,
        }
    }
}

impl AffineRanges {
    pub fn identity() -> Self {
        Self {
            translation_frac: 0.0,
            rotation_deg: 0.0,
            scale: (1.0, 1.0),
            shear_deg: 0.0,
            max_corner_displacement_frac: 0.1,
        }
    }
}

/// Foreground affine map from frame-1 to frame-2 pixel coordinates, plus
/// the two background crops.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMotion {
    pub matrix: [[f64; 3]; 2],
    pub crop_rect_1: Rect,
    pub crop_rect_2: Rect,
}

impl AffineMotion {
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            crop_rect_1: Rect::full(width, height),
            crop_rect_2: Rect::full(width, height),
        }
    }

    pub fn translation(width: usize, height: usize, dx: f64, dy: f64) -> Self {
        Self {
            matrix: [[1.0, 0.0, dx], [0.0, 1.0, dy]],
            ..Self::identity(width, height)
        }
    }

    pub fn determinant(&self) -> f64 {
        self.matrix[0][0] * self.matrix[1][1] - self.matrix[0][1] * self.matrix[1][0]
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.matrix;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn inverse(&self) -> Result<[[f64; 3]; 2]> {
        let det = self.determinant();
        if det.abs() <= 1e-6 {
            return Err(Error::Validation(format!(
                "affine matrix is not invertible (det {det})"
            )));
        }
        let m = &self.matrix;
        let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        Ok([
            [a, b, -(a * m[0][2] + b * m[1][2])],
            [c, d, -(c * m[0][2] + d * m[1][2])],
        ])
    }

    /// Largest displacement of the four image corners.
    pub fn max_corner_displacement(&self, width: usize, height: usize) -> f64 {
        let (w, h) = ((width - 1) as f64, (height - 1) as f64);
        [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)]
            .iter()
            .map(|&(x, y)| {
                let (ax, ay) = self.apply(x, y);
                ((ax - x).powi(2) + (ay - y).powi(2)).sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Backward flow of the foreground layer: `A^-1(p) - p` at every pixel.
    pub fn layer_flow(&self, width: usize, height: usize) -> Result<FlowField> {
        let inv = self.inverse()?;
        Ok(FlowField::from_fn(width, height, |x, y| {
            let (fx, fy) = (x as f64, y as f64);
            let qx = inv[0][0] * fx + inv[0][1] * fy + inv[0][2];
            let qy = inv[1][0] * fx + inv[1][1] * fy + inv[1][2];
            ((qx - fx) as f32, (qy - fy) as f32)
        }))
    }

    /// Move a binary mask with the foreground map (nearest sampling).
    pub fn transform_mask(&self, mask: &Mask) -> Result<Mask> {
        let (w, h) = mask.dims();
        let flow = self.layer_flow(w, h)?;
        Ok(Mask::from_fn(w, h, |x, y| {
            let (u, v) = flow.get(x, y);
            let qx = (x as f32 + u).round();
            let qy = (y as f32 + v).round();
            if qx < 0.0 || qy < 0.0 || qx >= w as f32 || qy >= h as f32 {
                0.0
            } else {
                mask.get(qx as usize, qy as usize)
            }
        }))
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, half_width: f64) -> f64 {
    if half_width == 0.0 {
        0.0
    } else {
        rng.random_range(-half_width..=half_width)
    }
}

/// Draw a small random affine map about the image centre. Both crops are
/// set to the full frame; the caller chooses background crops separately.
pub fn sample_affine<R: Rng + ?Sized>(
    rng: &mut R,
    width: usize,
    height: usize,
    ranges: &AffineRanges,
) -> AffineMotion {
    let min_dim = width.min(height) as f64;
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let limit = ranges.max_corner_displacement_frac * min_dim;
    loop {
        let tx = symmetric(rng, ranges.translation_frac * min_dim);
        let ty = symmetric(rng, ranges.translation_frac * min_dim);
        let theta = symmetric(rng, ranges.rotation_deg).to_radians();
        let shear = symmetric(rng, ranges.shear_deg).to_radians().tan();
        let s = if ranges.scale.0 == ranges.scale.1 {
            ranges.scale.0
        } else {
            rng.random_range(ranges.scale.0..=ranges.scale.1)
        };
        let (sin, cos) = theta.sin_cos();
        // L = R(theta) * Shear * s
        let l = [
            [cos * s, (cos * shear - sin) * s],
            [sin * s, (sin * shear + cos) * s],
        ];
        let matrix = [
            [l[0][0], l[0][1], cx + tx - (l[0][0] * cx + l[0][1] * cy)],
            [l[1][0], l[1][1], cy + ty - (l[1][0] * cx + l[1][1] * cy)],
        ];
        let motion = AffineMotion {
            matrix,
            ..AffineMotion::identity(width, height)
        };
        if motion.determinant().abs() > 1e-6
            && motion.max_corner_displacement(width, height) <= limit
        {
            return motion;
        }
    }
}

/// Combine foreground and background motion into the frame-2 backward flow.
///
/// Inside `mask_2` the flow follows the inverse foreground map; elsewhere it
/// is `bg_flow`. Also returns `valid_2`: foreground pixels of frame 2 whose
/// bilinear source taps all lie in the frame-1 foreground.
pub fn affine_to_flow(
    motion: &AffineMotion,
    mask_1: &Mask,
    mask_2: &Mask,
    bg_flow: &FlowField,
) -> Result<(FlowField, Mask)> {
    let (w, h) = mask_2.dims();
    if mask_1.dims() != (w, h) || bg_flow.dims() != (w, h) {
        return Err(Error::Dimension(
            "affine_to_flow: masks and background flow differ in size".into(),
        ));
    }
    let layer = motion.layer_flow(w, h)?;
    let mut flow = bg_flow.clone();
    let mut valid = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            if mask_2.get(x, y) < 0.5 {
                continue;
            }
            let (u, v) = layer.get(x, y);
            flow.set(x, y, (u, v));
            let sx = x as f32 + u;
            let sy = y as f32 + v;
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f32 || sy > (h - 1) as f32 {
                continue;
            }
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
            let taps = [
                (x0, y0, true),
                (x0 + 1, y0, fx > 0.0),
                (x0, y0 + 1, fy > 0.0),
                (x0 + 1, y0 + 1, fx > 0.0 && fy > 0.0),
            ];
            let ok = taps
                .iter()
                .all(|&(tx, ty, used)| !used || (tx < w && ty < h && mask_1.get(tx, ty) == 1.0));
            if ok {
                valid.set(x, y, 1.0);
            }
        }
    }
    Ok((flow, valid))
}
