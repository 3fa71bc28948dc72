//! Frame directories and inference at network-compatible sizes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use harmonizer_core::{Frame, Mask};

use crate::UsageError;

/// PNG files in `dir`, sorted by filename.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(UsageError(format!("frame directory {} does not exist", dir.display())).into());
    }
    let mut frames: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    frames.sort();
    if frames.is_empty() {
        return Err(UsageError(format!("no PNG frames in {}", dir.display())).into());
    }
    Ok(frames)
}

/// Nearest multiple of `2^depth` to `n`, at least one multiple.
pub fn nearest_valid(n: usize, depth: usize) -> usize {
    let m = 1usize << depth;
    ((n as f64 / m as f64).round() as usize).max(1) * m
}

/// Target size for a frame, or `None` when it can be used as is.
pub fn working_size(frame: &Frame, depth: usize) -> Option<(usize, usize)> {
    let (w, h) = frame.dims();
    let target = (nearest_valid(w, depth), nearest_valid(h, depth));
    (target != (w, h)).then_some(target)
}

/// Run `f` on the frame and its mask at a size the networks accept and
/// bring the result back. Pixels where the full-size mask is zero are
/// copied from the input so the background survives the round trip.
pub fn harmonize_at_valid_size(
    frame: &Frame,
    mask: &Mask,
    depth: usize,
    f: impl FnOnce(&Frame, &Mask) -> harmonizer_core::Result<Frame>,
) -> harmonizer_core::Result<Frame> {
    let Some((w, h)) = working_size(frame, depth) else {
        return f(frame, mask);
    };
    log::info!("resizing {:?} to {w}x{h} for inference", frame.dims());
    let small = f(&frame.resize_bilinear(w, h), &mask.resize_bilinear(w, h))?;
    let (fw, fh) = frame.dims();
    let up = small.resize_bilinear(fw, fh);
    Ok(Frame::from_fn(fw, fh, |x, y| {
        if mask.get(x, y) == 0.0 {
            frame.get(x, y)
        } else {
            up.get(x, y)
        }
    }))
}
