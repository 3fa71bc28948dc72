use rand::Rng;
use serde::{Deserialize, Serialize};

use super::color::{adjust_foreground_color, sample_adjustment, AdjustMode, AdjustmentRanges};
use super::inpaint::{inpaint_background, InpaintMethod};
use super::motion::{
    affine_to_flow, sample_affine, simulate_background_motion, AffineRanges, Rect,
};
use super::{SampleMeta, SamplePair, SourceItem};
use crate::error::{Error, Result};
use crate::flow::warp;
use crate::frame::{Frame, Mask};

/// How the second background crop is chosen. Frame 1 always shows the full
/// inpainted background.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CropPolicy {
    /// Both frames share the full background; no camera motion.
    None,
    /// A fresh random crop per sample covering at least `min_scale` of
    /// each dimension.
    PerSample { min_scale: f64 },
    /// One crop, in fractions of the image size, shared by every sample.
    PerDataset { x: f64, y: f64, scale: f64 },
}

impl Default for CropPolicy {
    fn default() -> Self {
        CropPolicy::PerSample { min_scale: 0.9 }
    }
}

impl CropPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            CropPolicy::None => true,
            CropPolicy::PerSample { min_scale } => min_scale > 0.0 && min_scale <= 1.0,
            CropPolicy::PerDataset { x, y, scale } => {
                scale > 0.0
                    && scale <= 1.0
                    && x >= 0.0
                    && y >= 0.0
                    && x + scale <= 1.0
                    && y + scale <= 1.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid crop policy {self:?}")))
        }
    }

    fn second_crop<R: Rng + ?Sized>(&self, rng: &mut R, width: usize, height: usize) -> Rect {
        match *self {
            CropPolicy::None => Rect::full(width, height),
            CropPolicy::PerSample { min_scale } => Rect::sample(rng, width, height, min_scale),
            CropPolicy::PerDataset { x, y, scale } => Rect {
                x: x * width as f64,
                y: y * height as f64,
                width: scale * width as f64,
                height: scale * height as f64,
            },
        }
    }
}

/// Knobs for a single synthesized pair.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub inpaint: InpaintMethod,
    pub crop: CropPolicy,
    pub color: AdjustmentRanges,
    /// Force one adjustment mode; `None` draws either with equal odds.
    pub mode: Option<AdjustMode>,
    pub affine: AffineRanges,
}

impl SynthParams {
    /// Everything switched off: the composites equal the ground truth and
    /// the two frames are identical.
    pub fn neutral() -> Self {
        Self {
            inpaint: InpaintMethod::Diffusion,
            crop: CropPolicy::None,
            color: AdjustmentRanges {
                exposure_ev: 0.0,
                hue_deg: 0.0,
                saturation: (1.0, 1.0),
                temperature: 0.0,
                contrast: (1.0, 1.0),
                tone_jitter: 0.0,
            },
            mode: Some(AdjustMode::Parametric),
            affine: AffineRanges::identity(),
        }
    }
}

fn paste(fg: &Frame, mask: &Mask, bg: &Frame) -> Frame {
    Frame::from_fn(bg.width(), bg.height(), |x, y| {
        if mask.get(x, y) > 0.5 {
            fg.get(x, y)
        } else {
            bg.get(x, y)
        }
    })
}

/// Run the full pipeline on one source: inpaint, crop the background
/// twice, recolor the foreground, move it, and paste.
///
/// Transfer-mode references are drawn uniformly from the items of
/// `reference_pool` other than `src`. With no such item the parametric
/// adjustment is used instead.
pub fn synthesize_sample<R: Rng + ?Sized>(
    src: &SourceItem,
    reference_pool: &[SourceItem],
    params: &SynthParams,
    rng: &mut R,
) -> Result<SamplePair> {
    params.crop.validate()?;
    let (w, h) = src.image.dims();
    if src.mask.dims() != (w, h) {
        return Err(Error::Dimension(format!(
            "source {}: image and mask differ in size",
            src.id
        )));
    }
    let background = inpaint_background(&src.image, &src.mask, params.inpaint)?;
    let crop_1 = Rect::full(w, h);
    let crop_2 = params.crop.second_crop(rng, w, h);
    let (bg_1, bg_2, bg_flow) = simulate_background_motion(&background, crop_1, crop_2)?;

    let mut adjustment = sample_adjustment(rng, &params.color);
    if let Some(mode) = params.mode {
        adjustment.mode = mode;
    }
    let others: Vec<&SourceItem> = reference_pool.iter().filter(|r| r.id != src.id).collect();
    // Transferring a source's statistics onto itself changes nothing.
    if others.is_empty() {
        adjustment.mode = AdjustMode::Parametric;
    }
    let reference = match adjustment.mode {
        AdjustMode::ReinhardTransfer => {
            let chosen = others[rng.random_range(0..others.len())];
            adjustment.reference_id = Some(chosen.id.clone());
            Some(chosen)
        }
        AdjustMode::Parametric => None,
    };
    let recolored = adjust_foreground_color(
        &src.image,
        &src.mask,
        &adjustment,
        reference.map(|r| (&r.image, &r.mask)),
    )?;

    let mut motion = sample_affine(rng, w, h, &params.affine);
    motion.crop_rect_1 = crop_1;
    motion.crop_rect_2 = crop_2;
    let layer_flow = motion.layer_flow(w, h)?;
    let mask_1 = src.mask.clone();
    let mask_2 = motion.transform_mask(&mask_1)?;
    let (flow_2_to_1, valid_2) = affine_to_flow(&motion, &mask_1, &mask_2, &bg_flow)?;

    let (moved_src, _) = warp(&src.image, &layer_flow)?;
    let (moved_recolored, _) = warp(&recolored.frame, &layer_flow)?;

    let pair = SamplePair {
        gt_1: paste(&src.image, &mask_1, &bg_1),
        gt_2: paste(&moved_src, &mask_2, &bg_2),
        comp_1: paste(&recolored.frame, &mask_1, &bg_1),
        comp_2: paste(&moved_recolored, &mask_2, &bg_2),
        mask_1,
        mask_2,
        flow_2_to_1,
        valid_2,
        meta: SampleMeta {
            source_id: src.id.clone(),
            adjustment,
            motion,
            transfer_fallback: recolored.fallback,
        },
    };
    if !pair.flow_2_to_1.all_finite() {
        return Err(Error::Numeric(format!(
            "source {}: non-finite flow",
            src.id
        )));
    }
    Ok(pair)
}
