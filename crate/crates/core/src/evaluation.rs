//! Quality and temporal-consistency metrics, the mask-free inference path,
//! and whole-split evaluation reports.
//!
//! All metrics are computed on `[0, 1]` colors with peak value 1.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Serialize, Serializer};

use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::flow::{read_flow, warp, FlowField};
use crate::frame::{Frame, Mask};
use crate::losses::regional_temporal;
use crate::networks::{discriminate, generate, Discriminator, Generator};
use crate::training::resize_pair;

pub fn mse(a: &Frame, b: &Frame) -> Result<f64> {
    a.ensure_same_dims(b, "mse")?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `10 log10(1 / mse)`; identical frames give `f64::INFINITY`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    mse(a, b).map(psnr_from_mse)
}

/// Mean regional temporal loss over consecutive output pairs.
///
/// `flows[i]` and `valids[i]` belong to the step from frame `i` to frame
/// `i + 1`: the flow maps frame `i + 1` pixels into frame `i`, and the
/// validity mask lives on frame `i + 1`. Warp in-bounds masks are applied on
/// top of `valids`.
pub fn temporal_error(
    outputs: &[Frame],
    masks: &[Mask],
    flows: &[FlowField],
    valids: &[Mask],
) -> Result<f64> {
    if outputs.len() < 2 {
        return Err(Error::Validation(
            "temporal_error needs at least two frames".into(),
        ));
    }
    let steps = outputs.len() - 1;
    if masks.len() != outputs.len() || flows.len() != steps || valids.len() != steps {
        return Err(Error::Validation(format!(
            "temporal_error: {} frames need {} masks, {steps} flows and {steps} validity masks; got {}, {} and {}",
            outputs.len(),
            outputs.len(),
            masks.len(),
            flows.len(),
            valids.len()
        )));
    }
    let mut total = 0.0;
    for t in 1..outputs.len() {
        let (warped, inside) = warp(&outputs[t - 1], &flows[t - 1])?;
        if valids[t - 1].dims() != inside.dims() || masks[t].dims() != inside.dims() {
            return Err(Error::Dimension(
                "temporal_error: mask sizes differ from frames".into(),
            ));
        }
        let valid = valids[t - 1].intersect(&inside);
        let value = regional_temporal(
            outputs[t].data(),
            warped.data(),
            masks[t].data(),
            valid.data(),
            1,
            3,
        )?;
        total += value.loss as f64;
    }
    Ok(total / steps as f64)
}

/// Discriminator scores clamped to `[0, 1]`, used as a soft mask.
pub fn predict_mask(disc: &Discriminator, frame: &Frame) -> Result<Mask> {
    Ok(discriminate(disc, frame)?.to_mask())
}

pub fn harmonize_without_mask(
    gen: &Generator,
    disc: &Discriminator,
    frame: &Frame,
) -> Result<Frame> {
    let mask = predict_mask(disc, frame)?;
    generate(gen, frame, &mask)
}

/// Anything that maps a composite and its mask to a harmonized frame.
pub trait HarmonizeModel {
    fn harmonize(&self, frame: &Frame, mask: &Mask) -> Result<Frame>;
}

/// The cut-and-paste baseline: returns the composite unchanged.
pub struct IdentityModel;

impl HarmonizeModel for IdentityModel {
    fn harmonize(&self, frame: &Frame, _mask: &Mask) -> Result<Frame> {
        Ok(frame.clone())
    }
}

impl HarmonizeModel for Generator {
    fn harmonize(&self, frame: &Frame, mask: &Mask) -> Result<Frame> {
        generate(self, frame, mask)
    }
}

/// Ignores the given mask and uses the discriminator's prediction instead.
pub struct MaskFreeModel<'a> {
    pub generator: &'a Generator,
    pub discriminator: &'a Discriminator,
}

impl HarmonizeModel for MaskFreeModel<'_> {
    fn harmonize(&self, frame: &Frame, _mask: &Mask) -> Result<Frame> {
        harmonize_without_mask(self.generator, self.discriminator, frame)
    }
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Resize samples to `size x size` before evaluation.
    pub resolution: Option<usize>,
    /// Directory of `<sample id>.flo` files with estimated frame-2 to
    /// frame-1 flow; enables `lt2`.
    pub estimated_flows: Option<PathBuf>,
}

fn inf_as_string<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleMetrics {
    pub id: String,
    #[serde(serialize_with = "inf_as_string")]
    pub psnr_1: f64,
    #[serde(serialize_with = "inf_as_string")]
    pub psnr_2: f64,
    pub mse: f64,
    pub lt1: f64,
    pub lt2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub method: String,
    pub split: Split,
    pub samples: usize,
    /// Mean per-frame PSNR over frames that differ from the ground truth;
    /// infinite only when every frame matches exactly.
    #[serde(serialize_with = "inf_as_string")]
    pub psnr: f64,
    pub mse: f64,
    pub lt1: f64,
    pub lt2: Option<f64>,
    pub per_sample: Vec<SampleMetrics>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

fn fmt_metric(v: Option<f64>, precision: usize) -> String {
    match v {
        Some(v) if v.is_infinite() => "inf".to_string(),
        Some(v) => format!("{v:.precision$}"),
        None => "-".to_string(),
    }
}

/// Fixed-width table with one row per report.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let width = reports
        .iter()
        .map(|r| r.method.len())
        .max()
        .unwrap_or(0)
        .max(6);
    let _ = writeln!(
        out,
        "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}",
        "Method", "PSNR", "MSE", "L_T1", "L_T2"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}",
            r.method,
            fmt_metric(Some(r.psnr), 2),
            fmt_metric(Some(r.mse), 4),
            fmt_metric(Some(r.lt1), 4),
            fmt_metric(r.lt2, 4)
        );
    }
    out
}

/// Run `model` on both composites of every pair in `split` and aggregate
/// PSNR, MSE and temporal error.
pub fn evaluate_split(
    model: &dyn HarmonizeModel,
    manifest: &DatasetManifest,
    split: Split,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let entries: Vec<_> = manifest.split(split).collect();
    if entries.is_empty() {
        return Err(Error::Validation(format!("split '{split}' has no samples")));
    }
    let mut per_sample = Vec::with_capacity(entries.len());
    for entry in entries {
        let mut pair = manifest.load(entry)?;
        let mut estimated = match &options.estimated_flows {
            Some(dir) => Some(read_flow(&dir.join(format!("{}.flo", entry.id)))?),
            None => None,
        };
        if let Some(size) = options.resolution {
            pair = resize_pair(&pair, size);
        }
        if let Some(flow) = &mut estimated {
            let (w, h) = pair.dims();
            if flow.dims() != (w, h) {
                *flow = flow.resize(w, h);
            }
        }
        let o1 = model.harmonize(&pair.comp_1, &pair.mask_1)?;
        let o2 = model.harmonize(&pair.comp_2, &pair.mask_2)?;
        let (mse_1, mse_2) = (mse(&o1, &pair.gt_1)?, mse(&o2, &pair.gt_2)?);
        let outputs = [o1, o2];
        let masks = [pair.mask_1.clone(), pair.mask_2.clone()];
        let lt1 = temporal_error(
            &outputs,
            &masks,
            &[pair.flow_2_to_1.clone()],
            &[pair.valid_2.clone()],
        )?;
        let lt2 = match estimated {
            Some(flow) => Some(temporal_error(
                &outputs,
                &masks,
                &[flow],
                &[pair.mask_2.clone()],
            )?),
            None => None,
        };
        per_sample.push(SampleMetrics {
            id: entry.id.clone(),
            psnr_1: psnr_from_mse(mse_1),
            psnr_2: psnr_from_mse(mse_2),
            mse: 0.5 * (mse_1 + mse_2),
            lt1,
            lt2,
        });
    }
    let n = per_sample.len() as f64;
    let finite: Vec<f64> = per_sample
        .iter()
        .flat_map(|s| [s.psnr_1, s.psnr_2])
        .filter(|p| p.is_finite())
        .collect();
    let psnr = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    let lt2 = per_sample
        .iter()
        .map(|s| s.lt2)
        .sum::<Option<f64>>()
        .map(|total| total / n);
    Ok(EvalReport {
        method: String::new(),
        split,
        samples: per_sample.len(),
        psnr,
        mse: per_sample.iter().map(|s| s.mse).sum::<f64>() / n,
        lt1: per_sample.iter().map(|s| s.lt1).sum::<f64>() / n,
        lt2,
        per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Frame {
        Frame::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Frame::filled(4, 4, [0.2, 0.4, 0.6]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-8);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert!(mse(&a, &Frame::new(4, 5)).is_err());
    }

    #[test]
    fn static_video_has_zero_temporal_error() {
        let f = Frame::filled(8, 8, [0.3, 0.3, 0.3]);
        let m = Mask::filled(8, 8, 1.0);
        let e = temporal_error(
            &[f.clone(), f.clone(), f],
            &[m.clone(), m.clone(), m.clone()],
            &[FlowField::zeros(8, 8), FlowField::zeros(8, 8)],
            &[m.clone(), m],
        )
        .unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn two_frame_error_is_the_regional_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = (random_frame(&mut rng, 8, 8), random_frame(&mut rng, 8, 8));
        let mask = Mask::from_fn(8, 8, |_, _| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        let valid = Mask::from_fn(8, 8, |_, _| if rng.random_bool(0.8) { 1.0 } else { 0.0 });
        let flow = FlowField::constant(8, 8, 1.0, 0.0);
        let e = temporal_error(
            &[a.clone(), b.clone()],
            &[Mask::new(8, 8), mask.clone()],
            std::slice::from_ref(&flow),
            std::slice::from_ref(&valid),
        )
        .unwrap();
        let (warped, inside) = warp(&a, &flow).unwrap();
        let combined = valid.intersect(&inside);
        let direct =
            regional_temporal(b.data(), warped.data(), mask.data(), combined.data(), 1, 3).unwrap();
        assert_eq!(e, direct.loss as f64);
    }

    #[test]
    fn length_mismatches_are_errors() {
        let f = Frame::new(4, 4);
        let m = Mask::new(4, 4);
        assert!(
            temporal_error(std::slice::from_ref(&f), std::slice::from_ref(&m), &[], &[]).is_err()
        );
        assert!(temporal_error(
            &[f.clone(), f],
            std::slice::from_ref(&m),
            &[FlowField::zeros(4, 4)],
            std::slice::from_ref(&m)
        )
        .is_err());
    }

    #[test]
    fn table_lists_every_report() {
        let report = EvalReport {
            method: "cut-and-paste".into(),
            split: Split::Test,
            samples: 1,
            psnr: f64::INFINITY,
            mse: 0.0,
            lt1: 0.0006,
            lt2: None,
            per_sample: Vec::new(),
        };
        let table = format_table(std::slice::from_ref(&report));
        assert!(table.contains("cut-and-paste"));
        assert!(table.contains("inf"));
        assert!(report.to_json().contains("\"inf\""));
    }
}
