//! Synthetic two-frame training data with exact foreground masks and flow.
//!
//! Each source image with a person mask yields two "consecutive" frames: the
//! background is inpainted and re-cropped to simulate camera motion, the
//! foreground moves by a small random affine transform, and a color-perturbed
//! copy of the foreground produces the composite inputs.

mod color;
mod inpaint;
mod motion;
pub mod procedural;
mod store;
mod synth;

use serde::{Deserialize, Serialize};

pub use color::{
    adjust_foreground_color, sample_adjustment, AdjustMode, AdjustmentRanges, ColorAdjustment,
    ColorOutcome, ToneCurve,
};
pub use inpaint::{inpaint_background, InpaintMethod};
pub use motion::{
    affine_to_flow, sample_affine, simulate_background_motion, AffineMotion, AffineRanges, Rect,
};
pub use store::{
    build_dataset, build_dataset_from, load_manifest, load_sample, load_source_corpus, sample_seed,
    save_sample, DatasetManifest, ManifestEntry, Split, SplitSizes, SynthConfig,
};
pub use synth::{synthesize_sample, CropPolicy, SynthParams};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::frame::{Frame, Mask};

/// A source image and its binary foreground mask.
#[derive(Clone, Debug)]
pub struct SourceItem {
    pub id: String,
    pub image: Frame,
    pub mask: Mask,
    pub foreground_area_fraction: f64,
}

impl SourceItem {
    /// Validates the mask and computes the area fraction.
    pub fn new(id: impl Into<String>, image: Frame, mask: Mask) -> Result<Self> {
        let id = id.into();
        if image.dims() != mask.dims() {
            return Err(Error::Dimension(format!(
                "source {id}: image {:?} vs mask {:?}",
                image.dims(),
                mask.dims()
            )));
        }
        if !mask.is_binary() {
            return Err(Error::Validation(format!(
                "source {id}: mask is not binary"
            )));
        }
        let foreground_area_fraction = mask.area_fraction();
        Ok(Self {
            id,
            image,
            mask,
            foreground_area_fraction,
        })
    }
}

/// Provenance recorded next to every synthesized pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub source_id: String,
    pub adjustment: ColorAdjustment,
    pub motion: AffineMotion,
    /// Channels where the color transfer fell back to a mean shift because
    /// a standard deviation was zero.
    #[serde(default)]
    pub transfer_fallback: [bool; 3],
}

/// Two ground-truth frames, their composites, masks and the exact flow.
#[derive(Clone, Debug)]
pub struct SamplePair {
    pub gt_1: Frame,
    pub gt_2: Frame,
    pub comp_1: Frame,
    pub comp_2: Frame,
    pub mask_1: Mask,
    pub mask_2: Mask,
    /// Backward flow on frame-2 pixels pointing into frame 1.
    pub flow_2_to_1: FlowField,
    /// Frame-2 foreground pixels whose flow source lies in frame-1 foreground.
    pub valid_2: Mask,
    pub meta: SampleMeta,
}

impl SamplePair {
    pub fn dims(&self) -> (usize, usize) {
        self.gt_1.dims()
    }

    /// Round every frame to 8-bit levels, as stored on disk.
    pub fn quantized(&self) -> Self {
        Self {
            gt_1: self.gt_1.quantized(),
            gt_2: self.gt_2.quantized(),
            comp_1: self.comp_1.quantized(),
            comp_2: self.comp_2.quantized(),
            ..self.clone()
        }
    }
}

/// Keep the items whose foreground covers at least `min_area` of the image.
pub fn select_sources(manifest: &[SourceItem], min_area: f64) -> Result<Vec<SourceItem>> {
    if manifest.is_empty() {
        return Err(Error::Validation("source manifest is empty".into()));
    }
    if !(0.0..1.0).contains(&min_area) {
        return Err(Error::Validation(format!(
            "min_area must lie in [0, 1), got {min_area}"
        )));
    }
    let mut kept = Vec::new();
    for item in manifest {
        if !item.mask.is_binary() {
            return Err(Error::Validation(format!(
                "source {}: mask is not binary",
                item.id
            )));
        }
        if item.foreground_area_fraction >= min_area {
            kept.push(item.clone());
        }
    }
    Ok(kept)
}
