//! Background hole filling.
//!
//! `Exemplar` is priority-ordered patch copying in the style of Criminisi,
//! Perez and Toyama: fill-front pixels are ranked by confidence times the
//! strength of the isophote hitting the front, and the best-matching fully
//! known patch is copied into the hole. `Diffusion` is a fast membrane fill
//! (onion-peel initialization followed by Jacobi smoothing).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Frame, Mask};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InpaintMethod {
    #[default]
    Exemplar,
    Diffusion,
}

const PATCH_RADIUS: usize = 4;
const DIFFUSION_ITERS: usize = 300;

/// Fill the pixels where `mask == 1`. Known pixels are returned unchanged.
pub fn inpaint_background(image: &Frame, mask: &Mask, method: InpaintMethod) -> Result<Frame> {
    image.ensure_same_dims(
        &Frame::new(mask.width(), mask.height()),
        "inpaint image/mask",
    )?;
    if !mask.is_binary() {
        return Err(Error::Validation("inpaint mask must be binary".into()));
    }
    let hole: Vec<bool> = mask.data().iter().map(|&v| v == 1.0).collect();
    if hole.iter().all(|&h| h) {
        return Err(Error::Validation(
            "inpaint mask covers the whole image; no source pixels".into(),
        ));
    }
    if !hole.iter().any(|&h| h) {
        return Ok(image.clone());
    }
    let filled = match method {
        InpaintMethod::Exemplar => exemplar_fill(image, &hole),
        InpaintMethod::Diffusion => diffusion_fill(image, &hole),
    };
    let mut out = filled.clamp01();
    // Known pixels are copied back so clamping never touches them.
    for c in 0..3 {
        let src = image.plane(c);
        for (i, o) in out.plane_mut(c).iter_mut().enumerate() {
            if !hole[i] {
                *o = src[i];
            }
        }
    }
    Ok(out)
}

struct Grid {
    width: usize,
    height: usize,
}

impl Grid {
    fn patch(&self, cx: usize, cy: usize, r: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let x0 = cx.saturating_sub(r);
        let y0 = cy.saturating_sub(r);
        let x1 = (cx + r).min(self.width - 1);
        let y1 = (cy + r).min(self.height - 1);
        (y0..=y1).flat_map(move |y| (x0..=x1).map(move |x| (x, y)))
    }
}

fn exemplar_fill(image: &Frame, hole: &[bool]) -> Frame {
    let (w, h) = image.dims();
    let grid = Grid {
        width: w,
        height: h,
    };
    let mut out = image.clone();
    let mut known: Vec<bool> = hole.iter().map(|&v| !v).collect();
    let mut confidence: Vec<f64> = known.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();

    // Source patches must lie fully inside the image and fully outside the
    // original hole. Shrink the patch until at least one exists.
    let mut radius = PATCH_RADIUS;
    let sources = loop {
        let mut list = Vec::new();
        if w > 2 * radius && h > 2 * radius {
            for cy in radius..h - radius {
                for cx in radius..w - radius {
                    if grid.patch(cx, cy, radius).all(|(x, y)| known[y * w + x]) {
                        list.push((cx, cy));
                    }
                }
            }
        }
        if !list.is_empty() || radius == 0 {
            break list;
        }
        radius -= 1;
    };

    let gray: Vec<f64> = (0..w * h)
        .map(|i| (image.plane(0)[i] + image.plane(1)[i] + image.plane(2)[i]) as f64 / 3.0)
        .collect();
    let mut gray = gray;

    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if known[i] || !has_known_neighbour(&known, w, h, x, y) {
                    continue;
                }
                let priority = priority(&grid, &known, &confidence, &gray, x, y, radius);
                if best.is_none_or(|(_, _, p)| priority > p) {
                    best = Some((x, y, priority));
                }
            }
        }
        let Some((px, py, _)) = best else { break };

        let mut best_src = sources[0];
        let mut best_ssd = f64::INFINITY;
        for &(sx, sy) in &sources {
            let mut ssd = 0.0;
            for (x, y) in grid.patch(px, py, radius) {
                if !known[y * w + x] {
                    continue;
                }
                let qx = sx as isize + x as isize - px as isize;
                let qy = sy as isize + y as isize - py as isize;
                let (qx, qy) = (qx as usize, qy as usize);
                let a = out.get(x, y);
                let b = out.get(qx, qy);
                for c in 0..3 {
                    let d = (a[c] - b[c]) as f64;
                    ssd += d * d;
                }
                if ssd >= best_ssd {
                    break;
                }
            }
            if ssd < best_ssd {
                best_ssd = ssd;
                best_src = (sx, sy);
            }
        }

        let c_p = patch_confidence(&grid, &known, &confidence, px, py, radius);
        let targets: Vec<(usize, usize)> = grid
            .patch(px, py, radius)
            .filter(|&(x, y)| !known[y * w + x])
            .collect();
        for (x, y) in targets {
            let qx = (best_src.0 as isize + x as isize - px as isize) as usize;
            let qy = (best_src.1 as isize + y as isize - py as isize) as usize;
            let v = out.get(qx, qy);
            out.set(x, y, v);
            let i = y * w + x;
            known[i] = true;
            confidence[i] = c_p;
            gray[i] = (v[0] + v[1] + v[2]) as f64 / 3.0;
        }
    }
    out
}

fn has_known_neighbour(known: &[bool], w: usize, h: usize, x: usize, y: usize) -> bool {
    (x > 0 && known[y * w + x - 1])
        || (x + 1 < w && known[y * w + x + 1])
        || (y > 0 && known[(y - 1) * w + x])
        || (y + 1 < h && known[(y + 1) * w + x])
}

fn patch_confidence(
    grid: &Grid,
    known: &[bool],
    confidence: &[f64],
    x: usize,
    y: usize,
    r: usize,
) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for (qx, qy) in grid.patch(x, y, r) {
        let i = qy * grid.width + qx;
        if known[i] {
            sum += confidence[i];
        }
        count += 1;
    }
    sum / count as f64
}

fn priority(
    grid: &Grid,
    known: &[bool],
    confidence: &[f64],
    gray: &[f64],
    x: usize,
    y: usize,
    r: usize,
) -> f64 {
    let w = grid.width;
    let c = patch_confidence(grid, known, confidence, x, y, r);

    // Front normal from the gradient of the known-region indicator.
    let ind = |xx: isize, yy: isize| -> f64 {
        if xx < 0 || yy < 0 || xx >= w as isize || yy >= grid.height as isize {
            0.0
        } else if known[yy as usize * w + xx as usize] {
            1.0
        } else {
            0.0
        }
    };
    let (xi, yi) = (x as isize, y as isize);
    let nx = ind(xi + 1, yi) - ind(xi - 1, yi);
    let ny = ind(xi, yi + 1) - ind(xi, yi - 1);
    let norm = (nx * nx + ny * ny).sqrt();

    // Strongest isophote among known pixels of the patch with a full
    // central-difference stencil.
    let (mut gx_best, mut gy_best, mut mag_best) = (0.0, 0.0, 0.0);
    for (qx, qy) in grid.patch(x, y, r) {
        if qx == 0 || qy == 0 || qx + 1 >= w || qy + 1 >= grid.height {
            continue;
        }
        let ok = |a: usize, b: usize| known[b * w + a];
        if !(ok(qx, qy) && ok(qx - 1, qy) && ok(qx + 1, qy) && ok(qx, qy - 1) && ok(qx, qy + 1)) {
            continue;
        }
        let gx = (gray[qy * w + qx + 1] - gray[qy * w + qx - 1]) * 0.5;
        let gy = (gray[(qy + 1) * w + qx] - gray[(qy - 1) * w + qx]) * 0.5;
        let mag = gx * gx + gy * gy;
        if mag > mag_best {
            (gx_best, gy_best, mag_best) = (gx, gy, mag);
        }
    }
    let data = if norm > 0.0 {
        ((-gy_best) * nx + gx_best * ny).abs() / norm
    } else {
        0.0
    };
    // Small floor so confidence still orders the front in flat regions.
    c * (data + 1e-3)
}

fn diffusion_fill(image: &Frame, hole: &[bool]) -> Frame {
    let (w, h) = image.dims();
    let mut out = image.clone();
    let mut known: Vec<bool> = hole.iter().map(|&v| !v).collect();

    // Onion peel: fill each front layer with the mean of known 8-neighbours.
    loop {
        let mut layer = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if known[y * w + x] {
                    continue;
                }
                let mut acc = [0.0f64; 3];
                let mut n = 0usize;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (qx, qy) = (x as isize + dx, y as isize + dy);
                        if (dx, dy) == (0, 0)
                            || qx < 0
                            || qy < 0
                            || qx >= w as isize
                            || qy >= h as isize
                        {
                            continue;
                        }
                        let (qx, qy) = (qx as usize, qy as usize);
                        if known[qy * w + qx] {
                            let v = out.get(qx, qy);
                            for c in 0..3 {
                                acc[c] += v[c] as f64;
                            }
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    layer.push((x, y, acc.map(|a| (a / n as f64) as f32)));
                }
            }
        }
        if layer.is_empty() {
            break;
        }
        for (x, y, v) in layer {
            out.set(x, y, v);
            known[y * w + x] = true;
        }
    }

    // Jacobi relaxation of the Laplace equation inside the hole.
    let hole_pixels: Vec<usize> = (0..w * h).filter(|&i| hole[i]).collect();
    for _ in 0..DIFFUSION_ITERS {
        let prev = out.clone();
        let mut max_change = 0.0f32;
        for &i in &hole_pixels {
            let (x, y) = (i % w, i / w);
            let mut acc = [0.0f64; 3];
            let mut n = 0usize;
            for (qx, qy) in [
                (x.wrapping_sub(1), y),
                (x + 1, y),
                (x, y.wrapping_sub(1)),
                (x, y + 1),
            ] {
                if qx >= w || qy >= h {
                    continue;
                }
                let v = prev.get(qx, qy);
                for c in 0..3 {
                    acc[c] += v[c] as f64;
                }
                n += 1;
            }
            let v = acc.map(|a| (a / n as f64) as f32);
            let old = prev.get(x, y);
            for c in 0..3 {
                max_change = max_change.max((v[c] - old[c]).abs());
            }
            out.set(x, y, v);
        }
        if max_change < 1e-6 {
            break;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(w: usize, h: usize) -> Frame {
        Frame::from_fn(w, h, |x, y| {
            let (fx, fy) = (x as f32, y as f32);
            [
                0.5 + 0.3 * (fx * 0.4).sin(),
                0.5 + 0.25 * (fy * 0.3).cos(),
                0.4 + 0.2 * ((fx + fy) * 0.2).sin(),
            ]
        })
    }

    fn square_hole(w: usize, h: usize, x0: usize, y0: usize, size: usize) -> Mask {
        Mask::from_fn(w, h, |x, y| {
            if (x0..x0 + size).contains(&x) && (y0..y0 + size).contains(&y) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Mean absolute difference across every hole/known 4-neighbour edge.
    fn seam_energy(img: &Frame, hole: &Mask) -> f64 {
        let (w, h) = img.dims();
        let (mut sum, mut n) = (0.0, 0usize);
        for y in 0..h {
            for x in 0..w {
                for (qx, qy) in [(x + 1, y), (x, y + 1)] {
                    if qx >= w || qy >= h || hole.get(x, y) == hole.get(qx, qy) {
                        continue;
                    }
                    let (a, b) = (img.get(x, y), img.get(qx, qy));
                    sum += (0..3).map(|c| (a[c] - b[c]).abs() as f64).sum::<f64>() / 3.0;
                    n += 1;
                }
            }
        }
        sum / n as f64
    }

    #[test]
    fn empty_hole_is_identity() {
        let img = texture(16, 16);
        for m in [InpaintMethod::Exemplar, InpaintMethod::Diffusion] {
            assert_eq!(
                inpaint_background(&img, &Mask::new(16, 16), m).unwrap(),
                img
            );
        }
    }

    #[test]
    fn full_hole_is_rejected() {
        let err = inpaint_background(
            &texture(8, 8),
            &Mask::filled(8, 8, 1.0),
            InpaintMethod::Diffusion,
        );
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Frame::filled(24, 20, [0.1, 0.6, 0.35]);
        let hole = square_hole(24, 20, 5, 4, 9);
        for m in [InpaintMethod::Exemplar, InpaintMethod::Diffusion] {
            let out = inpaint_background(&img, &hole, m).unwrap();
            for (a, b) in out.data().iter().zip(img.data()) {
                assert!((a - b).abs() < 1e-6, "{m:?}");
            }
        }
    }

    #[test]
    fn known_pixels_are_untouched_and_hole_is_filled() {
        let img = texture(32, 32);
        let hole = square_hole(32, 32, 12, 10, 8);
        for m in [InpaintMethod::Exemplar, InpaintMethod::Diffusion] {
            let out = inpaint_background(&img, &hole, m).unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    if hole.get(x, y) == 0.0 {
                        assert_eq!(out.get(x, y), img.get(x, y));
                    }
                }
            }
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn exemplar_seam_is_smoother_than_zero_fill() {
        let img = texture(32, 32);
        let hole = square_hole(32, 32, 12, 12, 8);
        let exemplar = inpaint_background(&img, &hole, InpaintMethod::Exemplar).unwrap();
        let mut zero = img.clone();
        for y in 0..32 {
            for x in 0..32 {
                if hole.get(x, y) == 1.0 {
                    zero.set(x, y, [0.0; 3]);
                }
            }
        }
        let (e, z) = (seam_energy(&exemplar, &hole), seam_energy(&zero, &hole));
        assert!(e < z, "exemplar seam {e} vs zero-fill seam {z}");
    }

    #[test]
    fn hole_touching_the_border_is_filled() {
        let img = texture(20, 20);
        let hole = square_hole(20, 20, 0, 0, 7);
        let out = inpaint_background(&img, &hole, InpaintMethod::Exemplar).unwrap();
        assert!(out.all_finite());
    }
}
