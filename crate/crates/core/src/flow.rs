//! Backward optical flow fields, differentiable bilinear warping and
//! Middlebury `.flo` I/O.
//!
//! Flow convention: `warped(p) = source(p + F(p))`. Samples that fall
//! outside the source contribute zero and are flagged in the in-bounds mask.

use std::fs;
use std::io::Write;
use std::path::Path;

use harmonizer_nn::{Function, Graph, Tensor, Var};
use num_traits::Float;

use crate::error::{Error, Result};
use crate::frame::{Frame, Mask};

const FLO_MAGIC: f32 = 202_021.25;
/// Guards against reading garbage headers as enormous allocations.
const FLO_MAX_DIM: i32 = 1 << 15;

/// Per-pixel displacement in pixels, stored as separate `u` and `v` planes.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, u: f32, v: f32) -> Self {
        Self {
            width,
            height,
            u: vec![u; width * height],
            v: vec![v; width * height],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> (f32, f32),
    ) -> Self {
        let mut flow = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                flow.set(x, y, f(x, y));
            }
        }
        flow
    }

    pub fn from_planes(width: usize, height: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if u.len() != width * height || v.len() != width * height {
            return Err(Error::Dimension(format!(
                "flow planes do not match {width}x{height}"
            )));
        }
        Ok(Self {
            width,
            height,
            u,
            v,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn u(&self) -> &[f32] {
        &self.u
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    pub fn get(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn set(&mut self, x: usize, y: usize, (u, v): (f32, f32)) {
        let i = y * self.width + x;
        self.u[i] = u;
        self.v[i] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|v| v.is_finite())
    }

    pub fn max_magnitude(&self) -> f32 {
        self.u
            .iter()
            .zip(&self.v)
            .map(|(u, v)| (u * u + v * v).sqrt())
            .fold(0.0, f32::max)
    }

    /// Resample to a new resolution. Displacements are bilinearly
    /// interpolated and rescaled by the per-axis resize ratio.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if (width, height) == self.dims() {
            return self.clone();
        }
        let rx = width as f32 / self.width as f32;
        let ry = height as f32 / self.height as f32;
        let u = Mask::from_vec(self.width, self.height, self.u.clone())
            .expect("flow plane")
            .resize_bilinear(width, height);
        let v = Mask::from_vec(self.width, self.height, self.v.clone())
            .expect("flow plane")
            .resize_bilinear(width, height);
        Self {
            width,
            height,
            u: u.data().iter().map(|d| d * rx).collect(),
            v: v.data().iter().map(|d| d * ry).collect(),
        }
    }
}

/// Bilinear taps for one sample position: `(x, y, weight)` for the four
/// neighbours, plus the fractional offsets.
#[inline]
fn taps<T: Float>(sx: T, sy: T) -> (isize, isize, T, T) {
    let x0 = sx.floor();
    let y0 = sy.floor();
    (
        x0.to_isize().unwrap_or(isize::MIN / 2),
        y0.to_isize().unwrap_or(isize::MIN / 2),
        sx - x0,
        sy - y0,
    )
}

#[inline]
fn in_bounds<T: Float>(sx: T, sy: T, width: usize, height: usize) -> bool {
    sx >= T::zero()
        && sy >= T::zero()
        && sx <= T::from(width - 1).unwrap()
        && sy <= T::from(height - 1).unwrap()
}

/// Forward warp of `channels` planes of `width x height`.
///
/// Writes the warped planes into `out` and 1/0 in-bounds flags into
/// `inside`. Taps with zero weight are skipped, so a zero flow reproduces the
/// source bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn warp_planes<T: Float>(
    src: &[T],
    channels: usize,
    width: usize,
    height: usize,
    flow_u: &[T],
    flow_v: &[T],
    out: &mut [T],
    inside: &mut [T],
) {
    let n = width * height;
    debug_assert!(src.len() == channels * n && out.len() == channels * n && inside.len() == n);
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let sx = T::from(x).unwrap() + flow_u[p];
            let sy = T::from(y).unwrap() + flow_v[p];
            inside[p] = if in_bounds(sx, sy, width, height) {
                T::one()
            } else {
                T::zero()
            };
            let (x0, y0, fx, fy) = taps(sx, sy);
            let weights = [
                (x0, y0, (T::one() - fx) * (T::one() - fy)),
                (x0 + 1, y0, fx * (T::one() - fy)),
                (x0, y0 + 1, (T::one() - fx) * fy),
                (x0 + 1, y0 + 1, fx * fy),
            ];
            for c in 0..channels {
                let plane = &src[c * n..(c + 1) * n];
                let mut acc = T::zero();
                for &(tx, ty, w) in &weights {
                    if w == T::zero()
                        || tx < 0
                        || ty < 0
                        || tx >= width as isize
                        || ty >= height as isize
                    {
                        continue;
                    }
                    acc = acc + w * plane[ty as usize * width + tx as usize];
                }
                out[c * n + p] = acc;
            }
        }
    }
}

/// Gradient of the warp with respect to the source planes (scatter of the
/// bilinear weights).
pub fn warp_grad_source<T: Float>(
    grad_out: &[T],
    channels: usize,
    width: usize,
    height: usize,
    flow_u: &[T],
    flow_v: &[T],
    grad_src: &mut [T],
) {
    let n = width * height;
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let (x0, y0, fx, fy) = taps(
                T::from(x).unwrap() + flow_u[p],
                T::from(y).unwrap() + flow_v[p],
            );
            let weights = [
                (x0, y0, (T::one() - fx) * (T::one() - fy)),
                (x0 + 1, y0, fx * (T::one() - fy)),
                (x0, y0 + 1, (T::one() - fx) * fy),
                (x0 + 1, y0 + 1, fx * fy),
            ];
            for &(tx, ty, w) in &weights {
                if w == T::zero()
                    || tx < 0
                    || ty < 0
                    || tx >= width as isize
                    || ty >= height as isize
                {
                    continue;
                }
                let q = ty as usize * width + tx as usize;
                for c in 0..channels {
                    grad_src[c * n + q] = grad_src[c * n + q] + w * grad_out[c * n + p];
                }
            }
        }
    }
}

/// Gradient of the warp with respect to the flow components. Defined almost
/// everywhere (the bilinear surface has creases at integer positions).
#[allow(clippy::too_many_arguments)]
pub fn warp_grad_flow<T: Float>(
    src: &[T],
    grad_out: &[T],
    channels: usize,
    width: usize,
    height: usize,
    flow_u: &[T],
    flow_v: &[T],
    grad_u: &mut [T],
    grad_v: &mut [T],
) {
    let n = width * height;
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let (x0, y0, fx, fy) = taps(
                T::from(x).unwrap() + flow_u[p],
                T::from(y).unwrap() + flow_v[p],
            );
            let mut gu = T::zero();
            let mut gv = T::zero();
            for c in 0..channels {
                let plane = &src[c * n..(c + 1) * n];
                let at = |tx: isize, ty: isize| {
                    if tx < 0 || ty < 0 || tx >= width as isize || ty >= height as isize {
                        T::zero()
                    } else {
                        plane[ty as usize * width + tx as usize]
                    }
                };
                let (v00, v10, v01, v11) = (
                    at(x0, y0),
                    at(x0 + 1, y0),
                    at(x0, y0 + 1),
                    at(x0 + 1, y0 + 1),
                );
                let g = grad_out[c * n + p];
                gu = gu + g * ((T::one() - fy) * (v10 - v00) + fy * (v11 - v01));
                gv = gv + g * ((T::one() - fx) * (v01 - v00) + fx * (v11 - v10));
            }
            grad_u[p] = grad_u[p] + gu;
            grad_v[p] = grad_v[p] + gv;
        }
    }
}

/// Warp a frame by a backward flow. Returns the warped frame and the
/// in-bounds mask.
pub fn warp(frame: &Frame, flow: &FlowField) -> Result<(Frame, Mask)> {
    if frame.dims() != flow.dims() {
        return Err(Error::Dimension(format!(
            "warp: frame {:?} vs flow {:?}",
            frame.dims(),
            flow.dims()
        )));
    }
    let (w, h) = frame.dims();
    let mut out = vec![0.0f32; 3 * w * h];
    let mut inside = vec![0.0f32; w * h];
    warp_planes(
        frame.data(),
        3,
        w,
        h,
        flow.u(),
        flow.v(),
        &mut out,
        &mut inside,
    );
    Ok((
        Frame::from_planar(w, h, out)?,
        Mask::from_vec(w, h, inside)?,
    ))
}

/// Warp a single-channel map (no in-bounds mask returned).
pub fn warp_mask(mask: &Mask, flow: &FlowField) -> Result<Mask> {
    if mask.dims() != flow.dims() {
        return Err(Error::Dimension("warp_mask: dims differ".into()));
    }
    let (w, h) = mask.dims();
    let mut out = vec![0.0f32; w * h];
    let mut inside = vec![0.0f32; w * h];
    warp_planes(
        mask.data(),
        1,
        w,
        h,
        flow.u(),
        flow.v(),
        &mut out,
        &mut inside,
    );
    Mask::from_vec(w, h, out)
}

/// Graph node for warping a `[N, C, H, W]` tensor, one fixed flow per
/// batch item.
struct WarpFunction {
    flows: Vec<FlowField>,
}

impl Function for WarpFunction {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _: &Tensor) -> Vec<Option<Tensor>> {
        let [_, c, h, w] = inputs[0].shape();
        let len = c * h * w;
        let mut grad = Tensor::zeros(inputs[0].shape());
        for (b, flow) in self.flows.iter().enumerate() {
            warp_grad_source(
                &grad_out.data()[b * len..(b + 1) * len],
                c,
                w,
                h,
                flow.u(),
                flow.v(),
                &mut grad.data_mut()[b * len..(b + 1) * len],
            );
        }
        vec![Some(grad)]
    }
}

/// Differentiable warp inside a [`Graph`], with `flows[b]` applied to batch
/// item `b`. Gradients flow to `x` only; flows are constants. Also returns
/// the in-bounds mask of every item.
pub fn warp_var(graph: &mut Graph, x: Var, flows: &[FlowField]) -> Result<(Var, Vec<Mask>)> {
    let t = graph.value(x);
    let [n, c, h, w] = t.shape();
    if flows.len() != n {
        return Err(Error::Dimension(format!(
            "warp: {} flows for a batch of {n}",
            flows.len()
        )));
    }
    if let Some(flow) = flows.iter().find(|f| f.dims() != (w, h)) {
        return Err(Error::Dimension(format!(
            "warp: tensor {:?} vs flow {:?}",
            t.shape(),
            flow.dims()
        )));
    }
    let len = c * h * w;
    let mut out = Tensor::zeros(t.shape());
    let mut masks = Vec::with_capacity(n);
    for (b, flow) in flows.iter().enumerate() {
        let mut inside = vec![0.0f32; w * h];
        warp_planes(
            &t.data()[b * len..(b + 1) * len],
            c,
            w,
            h,
            flow.u(),
            flow.v(),
            &mut out.data_mut()[b * len..(b + 1) * len],
            &mut inside,
        );
        masks.push(Mask::from_vec(w, h, inside)?);
    }
    let f = WarpFunction {
        flows: flows.to_vec(),
    };
    let var = graph.apply(Box::new(f), &[x], out);
    Ok((var, masks))
}

pub fn write_flow(path: &Path, flow: &FlowField) -> Result<()> {
    if flow.width == 0 || flow.height == 0 {
        return Err(Error::Validation("cannot write an empty flow field".into()));
    }
    let mut buf = Vec::with_capacity(12 + 8 * flow.width * flow.height);
    buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(flow.width as i32).to_le_bytes());
    buf.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for (u, v) in flow.u.iter().zip(&flow.v) {
        buf.extend_from_slice(&u.to_le_bytes());
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_flow(&bytes).map_err(|m| Error::format(path, m))
}

fn parse_flow(bytes: &[u8]) -> std::result::Result<FlowField, String> {
    let word = |i: usize| -> [u8; 4] { bytes[4 * i..4 * i + 4].try_into().unwrap() };
    if bytes.len() < 12 {
        return Err("truncated header".into());
    }
    if f32::from_le_bytes(word(0)) != FLO_MAGIC {
        return Err("bad magic number".into());
    }
    let w = i32::from_le_bytes(word(1));
    let h = i32::from_le_bytes(word(2));
    if w <= 0 || h <= 0 || w > FLO_MAX_DIM || h > FLO_MAX_DIM {
        return Err(format!("invalid dimensions {w}x{h}"));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = 12 + 8 * w * h;
    if bytes.len() < expected {
        return Err(format!(
            "truncated data: {} of {expected} bytes",
            bytes.len()
        ));
    }
    let mut flow = FlowField::zeros(w, h);
    for i in 0..w * h {
        flow.u[i] = f32::from_le_bytes(word(3 + 2 * i));
        flow.v[i] = f32::from_le_bytes(word(4 + 2 * i));
    }
    Ok(flow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scalar gather loop written independently of `warp_planes`.
    fn brute_force(src: &Frame, flow: &FlowField) -> Frame {
        let (w, h) = src.dims();
        let fetch = |c: usize, x: i64, y: i64| -> f64 {
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                0.0
            } else {
                src.plane(c)[y as usize * w + x as usize] as f64
            }
        };
        let mut out = Frame::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = flow.get(x, y);
                let sx = x as f64 + u as f64;
                let sy = y as f64 + v as f64;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (ax, ay) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as i64, y0 as i64);
                let mut rgb = [0.0f32; 3];
                for (c, o) in rgb.iter_mut().enumerate() {
                    *o = ((1.0 - ax) * (1.0 - ay) * fetch(c, x0, y0)
                        + ax * (1.0 - ay) * fetch(c, x0 + 1, y0)
                        + (1.0 - ax) * ay * fetch(c, x0, y0 + 1)
                        + ax * ay * fetch(c, x0 + 1, y0 + 1)) as f32;
                }
                out.set(x, y, rgb);
            }
        }
        out
    }

    fn random_frame(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Frame {
        Frame::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn zero_flow_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_frame(&mut rng, 13, 9);
        let (out, inside) = warp(&f, &FlowField::zeros(13, 9)).unwrap();
        assert_eq!(out, f);
        assert!(inside.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn constant_flow_shifts_step_edge_right() {
        let f = Frame::from_fn(8, 4, |x, _| if x >= 4 { [1.0; 3] } else { [0.0; 3] });
        let (out, inside) = warp(&f, &FlowField::constant(8, 4, -1.0, 0.0)).unwrap();
        for y in 0..4 {
            for x in 0..8 {
                let expected = if x >= 5 { 1.0 } else { 0.0 };
                assert_eq!(out.get(x, y)[0], expected, "x={x}");
                assert_eq!(inside.get(x, y), if x == 0 { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn matches_brute_force_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let f = random_frame(&mut rng, 16, 16);
            let flow = FlowField::from_fn(16, 16, |_, _| {
                (rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0))
            });
            let (out, _) = warp(&f, &flow).unwrap();
            let expected = brute_force(&f, &flow);
            for (a, b) in out.data().iter().zip(expected.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn far_outside_samples_are_zero_and_flagged() {
        let f = Frame::filled(4, 4, [0.7; 3]);
        let (out, inside) = warp(&f, &FlowField::constant(4, 4, 10.0, 0.0)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(inside.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(matches!(
            warp(&Frame::new(4, 4), &FlowField::zeros(4, 5)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn flow_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h, c) = (8usize, 8usize, 2usize);
        let src: Vec<f64> = (0..c * w * h).map(|_| rng.random()).collect();
        let weights: Vec<f64> = (0..c * w * h)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        // Keep sample positions away from integer creases.
        let u: Vec<f64> = (0..w * h)
            .map(|_| rng.random_range(-2.0..2.0) + 0.31)
            .collect();
        let v: Vec<f64> = (0..w * h)
            .map(|_| rng.random_range(-2.0..2.0) + 0.27)
            .collect();
        let objective = |u: &[f64], v: &[f64]| {
            let mut out = vec![0.0; c * w * h];
            let mut inside = vec![0.0; w * h];
            warp_planes(&src, c, w, h, u, v, &mut out, &mut inside);
            out.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut gu = vec![0.0; w * h];
        let mut gv = vec![0.0; w * h];
        warp_grad_flow(&src, &weights, c, w, h, &u, &v, &mut gu, &mut gv);
        let eps = 1e-6;
        for p in 0..w * h {
            let (fx0, fy0) = (u[p].floor(), v[p].floor());
            if (u[p] - fx0).min(fx0 + 1.0 - u[p]) < 1e-3
                || (v[p] - fy0).min(fy0 + 1.0 - v[p]) < 1e-3
            {
                continue;
            }
            let mut up = u.clone();
            up[p] += eps;
            let mut um = u.clone();
            um[p] -= eps;
            let fd = (objective(&up, &v) - objective(&um, &v)) / (2.0 * eps);
            assert!(
                (fd - gu[p]).abs() <= 1e-3 * fd.abs().max(1e-3),
                "u at {p}: {fd} vs {}",
                gu[p]
            );
            let mut vp = v.clone();
            vp[p] += eps;
            let mut vm = v.clone();
            vm[p] -= eps;
            let fd = (objective(&u, &vp) - objective(&u, &vm)) / (2.0 * eps);
            assert!(
                (fd - gv[p]).abs() <= 1e-3 * fd.abs().max(1e-3),
                "v at {p}: {fd} vs {}",
                gv[p]
            );
        }
    }

    #[test]
    fn flo_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let flow = FlowField::from_fn(8, 8, |_, _| {
            (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0))
        });
        let path = dir.path().join("a.flo");
        write_flow(&path, &flow).unwrap();
        let back = read_flow(&path).unwrap();
        assert_eq!(
            back.u().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            flow.u().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            back.v().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            flow.v().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn flo_rejects_bad_magic_truncation_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.flo");
        let mut bytes = 1.5f32.to_le_bytes().to_vec();
        bytes.extend_from_slice(&2i32.to_le_bytes());
        bytes.extend_from_slice(&2i32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 32]);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_flow(&path), Err(Error::Format { .. })));

        let good = dir.path().join("good.flo");
        write_flow(&good, &FlowField::zeros(4, 4)).unwrap();
        let full = fs::read(&good).unwrap();
        fs::write(&path, &full[..full.len() - 5]).unwrap();
        assert!(matches!(read_flow(&path), Err(Error::Format { .. })));

        assert!(write_flow(&path, &FlowField::zeros(0, 0)).is_err());
        let mut header = FLO_MAGIC.to_le_bytes().to_vec();
        header.extend_from_slice(&0i32.to_le_bytes());
        header.extend_from_slice(&0i32.to_le_bytes());
        fs::write(&path, &header).unwrap();
        assert!(matches!(read_flow(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn resize_scales_displacements() {
        let flow = FlowField::constant(8, 8, 4.0, -2.0);
        let half = flow.resize(4, 4);
        assert!(half.u().iter().all(|&u| u == 2.0));
        assert!(half.v().iter().all(|&v| v == -1.0));
    }
}
