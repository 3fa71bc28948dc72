//! A procedural stand-in for a photo corpus: smooth textured backgrounds
//! with a single "person"-shaped foreground (head and torso ellipses).
//!
//! Useful for tests and quick experiments where no segmented photos are at
//! hand.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SourceItem;
use crate::error::{Error, Result};
use crate::frame::{Frame, Mask};

/// One entry of a source corpus index; paths are relative to the index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub id: String,
    pub image: String,
    pub mask: String,
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f32; 3] {
    [
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
    ]
}

fn inside_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
    dx * dx + dy * dy <= 1.0
}

/// Draw one source image with a foreground covering roughly 10-40% of it.
pub fn procedural_source<R: Rng + ?Sized>(
    rng: &mut R,
    id: &str,
    width: usize,
    height: usize,
) -> SourceItem {
    let (wf, hf) = (width as f64, height as f64);
    let bg_a = random_color(rng);
    let bg_b = random_color(rng);
    let freq = rng.random_range(0.5..2.5) * std::f64::consts::TAU / wf.max(hf);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);

    let fg_base = random_color(rng);
    let fg_accent = random_color(rng);
    let cx = wf * rng.random_range(0.35..0.65);
    let torso_rx = wf * rng.random_range(0.14..0.22);
    let torso_ry = hf * rng.random_range(0.22..0.30);
    let torso_cy = hf * rng.random_range(0.55..0.65);
    let head_r = torso_rx * rng.random_range(0.55..0.75);
    let head_cy = torso_cy - torso_ry - head_r * 0.8;

    let in_fg = |x: f64, y: f64| {
        inside_ellipse(x, y, cx, torso_cy, torso_rx, torso_ry)
            || inside_ellipse(x, y, cx, head_cy, head_r, head_r * 1.15)
    };
    let mask = Mask::from_fn(width, height, |x, y| {
        if in_fg(x as f64, y as f64) {
            1.0
        } else {
            0.0
        }
    });
    let image = Frame::from_fn(width, height, |x, y| {
        let (fx, fy) = (x as f64, y as f64);
        if in_fg(fx, fy) {
            // Vertical shading plus a stripe so the foreground has structure.
            let t = ((fy - head_cy) / (torso_cy + torso_ry - head_cy)).clamp(0.0, 1.0) as f32;
            let stripe = if (fy * 0.35).sin() > 0.6 { 0.6 } else { 0.0 };
            let mut px = [0.0; 3];
            for c in 0..3 {
                let base = fg_base[c] * (1.0 - t) + fg_accent[c] * t;
                px[c] = (base * (1.0 - stripe) + fg_accent[c] * stripe * 0.5).clamp(0.0, 1.0);
            }
            px
        } else {
            let t = (0.5 + 0.5 * (freq * (fx + 0.6 * fy) + phase).sin()) as f32;
            let g = (fy / hf) as f32;
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = (bg_a[c] * (1.0 - t) + bg_b[c] * t) * (0.8 + 0.2 * g);
            }
            px
        }
    });
    SourceItem::new(id, image, mask).expect("procedural mask is binary and sized to the image")
}

/// Write `count` procedural sources as PNG pairs plus an `index.json`
/// into `dir`, returning the items as they will read back (8-bit).
pub fn write_procedural_corpus(
    dir: &Path,
    count: usize,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<Vec<SourceItem>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(count);
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("src{i:05}");
        let item = procedural_source(&mut rng, &id, width, height);
        let image = format!("{id}.png");
        let mask = format!("{id}_mask.png");
        item.image.save_png(&dir.join(&image))?;
        item.mask.save_png(&dir.join(&mask))?;
        items.push(SourceItem::new(
            id.clone(),
            item.image.quantized(),
            item.mask.clone(),
        )?);
        records.push(SourceRecord { id, image, mask });
    }
    let index = dir.join("index.json");
    let json = serde_json::to_string_pretty(&records).map_err(|e| Error::json(&index, e))?;
    fs::write(&index, json).map_err(|e| Error::io(&index, e))?;
    Ok(items)
}
