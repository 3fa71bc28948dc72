//! Foreground color perturbation: Reinhard statistics transfer in lαβ space
//! and parametric exposure/temperature/hue/saturation/contrast/tone edits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Frame, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjustMode {
    ReinhardTransfer,
    Parametric,
}

/// Monotone tone curve through fixed endpoints `(0, 0)` and `(1, 1)`,
/// interpolated with a monotone cubic (Fritsch-Carlson) spline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToneCurve {
    points: Vec<(f64, f64)>,
}

impl Default for ToneCurve {
    fn default() -> Self {
        Self::identity()
    }
}

impl ToneCurve {
    pub fn identity() -> Self {
        Self {
            points: vec![(0.0, 0.0), (1.0, 1.0)],
        }
    }

    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        let curve = Self { points };
        curve.validate()?;
        Ok(curve)
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.points;
        if p.len() < 2 || p[0] != (0.0, 0.0) || p[p.len() - 1] != (1.0, 1.0) {
            return Err(Error::Validation(
                "tone curve must start at (0,0) and end at (1,1)".into(),
            ));
        }
        for pair in p.windows(2) {
            if pair[1].0 <= pair[0].0 || pair[1].1 < pair[0].1 {
                return Err(Error::Validation(format!(
                    "tone curve is not monotone: {p:?}"
                )));
            }
        }
        if p.iter().any(|&(_, y)| !(0.0..=1.0).contains(&y)) {
            return Err(Error::Validation(
                "tone curve values must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.points.iter().all(|&(x, y)| x == y)
    }

    fn tangents(&self) -> Vec<f64> {
        let p = &self.points;
        let n = p.len();
        let secants: Vec<f64> = p
            .windows(2)
            .map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0))
            .collect();
        let mut m = vec![0.0; n];
        m[0] = secants[0];
        m[n - 1] = secants[n - 2];
        for k in 1..n - 1 {
            m[k] = if secants[k - 1] * secants[k] <= 0.0 {
                0.0
            } else {
                (secants[k - 1] + secants[k]) / 2.0
            };
        }
        for k in 0..n - 1 {
            if secants[k] == 0.0 {
                m[k] = 0.0;
                m[k + 1] = 0.0;
                continue;
            }
            let a = m[k] / secants[k];
            let b = m[k + 1] / secants[k];
            let s = a * a + b * b;
            if s > 9.0 {
                let t = 3.0 / s.sqrt();
                m[k] = t * a * secants[k];
                m[k + 1] = t * b * secants[k];
            }
        }
        m
    }

    /// Evaluate at `x`, clamped to `[0, 1]`.
    pub fn eval(&self, x: f64) -> f64 {
        self.eval_with(&self.tangents(), x)
    }

    fn eval_with(&self, m: &[f64], x: f64) -> f64 {
        let x = x.clamp(0.0, 1.0);
        let p = &self.points;
        let k = p
            .windows(2)
            .position(|w| x <= w[1].0)
            .unwrap_or(p.len() - 2);
        let (x0, y0) = p[k];
        let (x1, y1) = p[k + 1];
        let h = x1 - x0;
        let t = (x - x0) / h;
        let (t2, t3) = (t * t, t * t * t);
        let v = (2.0 * t3 - 3.0 * t2 + 1.0) * y0
            + (t3 - 2.0 * t2 + t) * h * m[k]
            + (-2.0 * t3 + 3.0 * t2) * y1
            + (t3 - t2) * h * m[k + 1];
        v.clamp(0.0, 1.0)
    }
}

/// How a foreground is recolored. Parametric fields are only consulted in
/// parametric mode; `reference_id` only in transfer mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorAdjustment {
    pub mode: AdjustMode,
    pub reference_id: Option<String>,
    pub exposure_ev: f64,
    pub hue_shift_deg: f64,
    pub saturation_scale: f64,
    pub temperature_shift: f64,
    pub contrast_scale: f64,
    pub tone_curve: ToneCurve,
}

impl ColorAdjustment {
    pub fn neutral() -> Self {
        Self {
            mode: AdjustMode::Parametric,
            reference_id: None,
            exposure_ev: 0.0,
            hue_shift_deg: 0.0,
            saturation_scale: 1.0,
            temperature_shift: 0.0,
            contrast_scale: 1.0,
            tone_curve: ToneCurve::identity(),
        }
    }

    pub fn reinhard(reference_id: impl Into<String>) -> Self {
        Self {
            mode: AdjustMode::ReinhardTransfer,
            reference_id: Some(reference_id.into()),
            ..Self::neutral()
        }
    }
}

/// Sampling ranges for parametric adjustments (symmetric unless a pair).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjustmentRanges {
    pub exposure_ev: f64,
    pub hue_deg: f64,
    pub saturation: (f64, f64),
    pub temperature: f64,
    pub contrast: (f64, f64),
    pub tone_jitter: f64,
}

impl Default for AdjustmentRanges {
    fn default() -> Self {
        Self {
            exposure_ev: 0.7,
            hue_deg: 20.0,
            saturation: (0.6, 1.4),
            temperature: 0.15,
            contrast: (0.7, 1.3),
            tone_jitter: 0.15,
        }
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, half_width: f64) -> f64 {
    if half_width == 0.0 {
        0.0
    } else {
        rng.random_range(-half_width..=half_width)
    }
}

fn interval<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draw a mode uniformly, then parametric values from `ranges`. The caller
/// fills in `reference_id` for transfer mode.
pub fn sample_adjustment<R: Rng + ?Sized>(
    rng: &mut R,
    ranges: &AdjustmentRanges,
) -> ColorAdjustment {
    let mode = if rng.random_bool(0.5) {
        AdjustMode::ReinhardTransfer
    } else {
        AdjustMode::Parametric
    };
    let exposure_ev = symmetric(rng, ranges.exposure_ev);
    let hue_shift_deg = symmetric(rng, ranges.hue_deg);
    let saturation_scale = interval(rng, ranges.saturation);
    let temperature_shift = symmetric(rng, ranges.temperature);
    let contrast_scale = interval(rng, ranges.contrast);
    let mut ys: Vec<f64> = [0.25, 0.5, 0.75]
        .iter()
        .map(|&x| (x + symmetric(rng, ranges.tone_jitter)).clamp(0.0, 1.0))
        .collect();
    ys.sort_by(f64::total_cmp);
    let points = vec![
        (0.0, 0.0),
        (0.25, ys[0]),
        (0.5, ys[1]),
        (0.75, ys[2]),
        (1.0, 1.0),
    ];
    ColorAdjustment {
        mode,
        reference_id: None,
        exposure_ev,
        hue_shift_deg,
        saturation_scale,
        temperature_shift,
        contrast_scale,
        tone_curve: ToneCurve { points },
    }
}

pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.003_130_8 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / d).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn apply_parametric(rgb: [f64; 3], adj: &ColorAdjustment, tangents: &[f64]) -> [f64; 3] {
    let mut px = rgb;
    if adj.exposure_ev != 0.0 {
        let gain = 2f64.powf(adj.exposure_ev);
        px = px.map(|v| linear_to_srgb(srgb_to_linear(v) * gain));
    }
    if adj.temperature_shift != 0.0 {
        px[0] += adj.temperature_shift;
        px[2] -= adj.temperature_shift;
    }
    if adj.hue_shift_deg != 0.0 || adj.saturation_scale != 1.0 {
        let [h, s, v] = rgb_to_hsv(px.map(|c| c.clamp(0.0, 1.0)));
        px = hsv_to_rgb([
            h + adj.hue_shift_deg,
            (s * adj.saturation_scale).clamp(0.0, 1.0),
            v,
        ]);
    }
    if adj.contrast_scale != 1.0 {
        px = px.map(|v| (v - 0.5) * adj.contrast_scale + 0.5);
    }
    if !adj.tone_curve.is_identity() {
        px = px.map(|v| adj.tone_curve.eval_with(tangents, v));
    }
    px
}

const RGB_TO_LMS: [[f64; 3]; 3] = [
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
];
const LMS_FLOOR: f64 = 1e-6;

fn mat_mul(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    [0, 1, 2].map(|r| {
        [0, 1, 2].map(|c| {
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det
        })
    })
}

fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lms = mat_mul(&RGB_TO_LMS, rgb).map(|v| v.max(LMS_FLOOR).log10());
    let s3 = 3f64.sqrt();
    let s6 = 6f64.sqrt();
    let s2 = 2f64.sqrt();
    [
        (lms[0] + lms[1] + lms[2]) / s3,
        (lms[0] + lms[1] - 2.0 * lms[2]) / s6,
        (lms[0] - lms[1]) / s2,
    ]
}

fn lab_to_rgb(lab: [f64; 3], lms_to_rgb: &[[f64; 3]; 3]) -> [f64; 3] {
    let a = lab[0] / 3f64.sqrt();
    let b = lab[1] / 6f64.sqrt();
    let c = lab[2] / 2f64.sqrt();
    let log_lms = [a + b + c, a + b - c, a - 2.0 * b];
    mat_mul(lms_to_rgb, log_lms.map(|v| 10f64.powf(v)))
}

fn lab_stats(frame: &Frame, mask: &Mask) -> Option<([f64; 3], [f64; 3])> {
    let mut values = Vec::new();
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            if mask.get(x, y) > 0.5 {
                values.push(rgb_to_lab(frame.get(x, y).map(f64::from)));
            }
        }
    }
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mut mean = [0.0; 3];
    for v in &values {
        for c in 0..3 {
            mean[c] += v[c] / n;
        }
    }
    let mut var = [0.0; 3];
    for v in &values {
        for c in 0..3 {
            var[c] += (v[c] - mean[c]).powi(2) / n;
        }
    }
    Some((mean, var.map(f64::sqrt)))
}

/// Recolored frame plus per-channel transfer fallback flags.
#[derive(Clone, Debug)]
pub struct ColorOutcome {
    pub frame: Frame,
    pub fallback: [bool; 3],
}

/// Recolor the pixels of `fg` where `mask > 0.5`; others are copied
/// unchanged. `reference` (frame and its foreground mask) is required in
/// transfer mode.
pub fn adjust_foreground_color(
    fg: &Frame,
    mask: &Mask,
    adj: &ColorAdjustment,
    reference: Option<(&Frame, &Mask)>,
) -> Result<ColorOutcome> {
    if fg.dims() != mask.dims() {
        return Err(Error::Dimension(
            "adjust_foreground_color: frame and mask differ".into(),
        ));
    }
    let mut out = fg.clone();
    let mut fallback = [false; 3];
    match adj.mode {
        AdjustMode::Parametric => {
            adj.tone_curve.validate()?;
            let tangents = adj.tone_curve.tangents();
            for y in 0..fg.height() {
                for x in 0..fg.width() {
                    if mask.get(x, y) > 0.5 {
                        let px = apply_parametric(fg.get(x, y).map(f64::from), adj, &tangents);
                        out.set(x, y, px.map(|v| v.clamp(0.0, 1.0) as f32));
                    }
                }
            }
        }
        AdjustMode::ReinhardTransfer => {
            let (ref_frame, ref_mask) = reference.ok_or_else(|| {
                Error::Validation("reinhard transfer requires a reference foreground".into())
            })?;
            let (src_mean, src_std) = lab_stats(fg, mask).unwrap_or(([0.0; 3], [0.0; 3]));
            let (ref_mean, ref_std) = lab_stats(ref_frame, ref_mask)
                .ok_or_else(|| Error::Validation("reference foreground is empty".into()))?;
            let mut gain = [1.0; 3];
            for c in 0..3 {
                if src_std[c] < 1e-8 || ref_std[c] < 1e-8 {
                    fallback[c] = true;
                } else {
                    gain[c] = ref_std[c] / src_std[c];
                }
            }
            let lms_to_rgb = invert3(&RGB_TO_LMS);
            for y in 0..fg.height() {
                for x in 0..fg.width() {
                    if mask.get(x, y) > 0.5 {
                        let lab = rgb_to_lab(fg.get(x, y).map(f64::from));
                        let moved =
                            [0, 1, 2].map(|c| (lab[c] - src_mean[c]) * gain[c] + ref_mean[c]);
                        let rgb = lab_to_rgb(moved, &lms_to_rgb);
                        out.set(x, y, rgb.map(|v| v.clamp(0.0, 1.0) as f32));
                    }
                }
            }
        }
    }
    Ok(ColorOutcome {
        frame: out,
        fallback,
    })
}
