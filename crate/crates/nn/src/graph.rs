//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass. Nodes
//! are appended in evaluation order, so walking the tape backwards visits
//! each node after all of its consumers.

use crate::conv::{conv_backward, conv_forward, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside this crate.
///
/// `backward` receives the upstream gradient, the forward inputs and the
/// forward output, and returns one optional gradient per input. Gradients for
/// inputs that do not require them may be `None`.
pub trait Function {
    fn backward(
        &self,
        grad_out: &Tensor,
        inputs: &[&Tensor],
        output: &Tensor,
    ) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Conv2d(ConvGeometry),
    Add,
    Scale(f32),
    LeakyRelu(f32),
    Tanh,
    Normalize { per_sample: bool, inv_std: Vec<f32> },
    Concat,
    Upsample2x,
    Composite,
    Custom(Box<dyn Function>),
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, inputs: Vec<Var>, op: Op) -> Var {
        let requires_grad = match op {
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            inputs,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), Op::Leaf)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Vec::new(), Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        v
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Square-kernel convolution. `weight` is `[out, in, k, k]`, `bias` is
    /// `[1, out, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape();
        let ws = self.value(weight).shape();
        assert_eq!(
            xs[1], ws[1],
            "conv2d: input has {} channels, weight expects {}",
            xs[1], ws[1]
        );
        assert_eq!(ws[2], ws[3], "conv2d: only square kernels are supported");
        let geometry = ConvGeometry {
            in_channels: xs[1],
            out_channels: ws[0],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            pad,
        };
        let mut out = Tensor::zeros([xs[0], ws[0], geometry.out_height(), geometry.out_width()]);
        let in_len = xs[1] * xs[2] * xs[3];
        let out_len = ws[0] * geometry.out_plane();
        {
            let xv = self.nodes[x.0].value.data();
            let wv = self.nodes[weight.0].value.data();
            let bv = self.nodes[bias.0].value.data();
            for n in 0..xs[0] {
                conv_forward(
                    &xv[n * in_len..(n + 1) * in_len],
                    wv,
                    bv,
                    &geometry,
                    &mut out.data_mut()[n * out_len..(n + 1) * out_len],
                );
            }
        }
        self.push(out, vec![x, weight, bias], Op::Conv2d(geometry))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "add: shape mismatch"
        );
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, vec![a, b], Op::Add)
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, vec![x], Op::Scale(factor))
    }

    /// `sum_i weight_i * x_i` for scalar or same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Var {
        assert!(!terms.is_empty());
        let mut acc = self.scale(terms[0].0, terms[0].1);
        for &(v, w) in &terms[1..] {
            let scaled = self.scale(v, w);
            acc = self.add(acc, scaled);
        }
        acc
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { v * slope });
        self.push(out, vec![x], Op::LeakyRelu(slope))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f32::tanh);
        self.push(out, vec![x], Op::Tanh)
    }

    /// Zero-mean, unit-variance normalization without affine parameters.
    ///
    /// With `per_sample` the statistics are taken per `(batch, channel)`
    /// plane (instance norm); otherwise per channel across the batch
    /// (batch norm using batch statistics).
    pub fn normalize(&mut self, x: Var, per_sample: bool, eps: f32) -> Var {
        let t = self.value(x);
        let [n, c, _, _] = t.shape();
        let plane = t.plane();
        let mut out = Tensor::zeros(t.shape());
        let groups = if per_sample { n * c } else { c };
        let mut inv_std = vec![0.0f32; groups];
        let src = t.data();
        let planes_of = |g: usize| -> Vec<usize> {
            if per_sample {
                vec![g]
            } else {
                (0..n).map(|b| b * c + g).collect()
            }
        };
        for (g, inv) in inv_std.iter_mut().enumerate() {
            let planes = planes_of(g);
            let count = (planes.len() * plane) as f64;
            let mean: f64 = planes
                .iter()
                .flat_map(|&p| &src[p * plane..(p + 1) * plane])
                .map(|&v| v as f64)
                .sum::<f64>()
                / count;
            let var: f64 = planes
                .iter()
                .flat_map(|&p| &src[p * plane..(p + 1) * plane])
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / count;
            let is = 1.0 / (var + eps as f64).sqrt();
            *inv = is as f32;
            for &p in &planes {
                for (o, &v) in out.data_mut()[p * plane..(p + 1) * plane]
                    .iter_mut()
                    .zip(&src[p * plane..(p + 1) * plane])
                {
                    *o = ((v as f64 - mean) * is) as f32;
                }
            }
        }
        self.push(
            out,
            vec![x],
            Op::Normalize {
                per_sample,
                inv_std,
            },
        )
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert!(
            sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3],
            "concat: {sa:?} vs {sb:?}"
        );
        let mut out = Tensor::zeros([sa[0], sa[1] + sb[1], sa[2], sa[3]]);
        let (la, lb) = (sa[1] * sa[2] * sa[3], sb[1] * sb[2] * sb[3]);
        for n in 0..sa[0] {
            let dst = &mut out.data_mut()[n * (la + lb)..(n + 1) * (la + lb)];
            dst[..la].copy_from_slice(&self.nodes[a.0].value.data()[n * la..(n + 1) * la]);
            dst[la..].copy_from_slice(&self.nodes[b.0].value.data()[n * lb..(n + 1) * lb]);
        }
        self.push(out, vec![a, b], Op::Concat)
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        let src = t.data();
        let dst = out.data_mut();
        for p in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(out, vec![x], Op::Upsample2x)
    }

    /// `mask * fg + (1 - mask) * bg`, with a single-channel `mask` broadcast
    /// over the channels of `fg` and `bg`.
    ///
    /// Where the mask is exactly 0 the result equals `bg` bitwise, and where
    /// it is exactly 1 it equals `fg` bitwise.
    pub fn composite(&mut self, mask: Var, fg: Var, bg: Var) -> Var {
        let (sm, sf, sb) = (
            self.value(mask).shape(),
            self.value(fg).shape(),
            self.value(bg).shape(),
        );
        assert_eq!(sf, sb, "composite: fg/bg shape mismatch");
        assert!(sm[1] == 1 && sm[0] == sf[0] && sm[2] == sf[2] && sm[3] == sf[3]);
        let plane = sf[2] * sf[3];
        let mut out = Tensor::zeros(sf);
        {
            let (m, f, b) = (
                self.value(mask).data(),
                self.value(fg).data(),
                self.value(bg).data(),
            );
            let o = out.data_mut();
            for n in 0..sf[0] {
                for c in 0..sf[1] {
                    let base = (n * sf[1] + c) * plane;
                    for i in 0..plane {
                        let mv = m[n * plane + i];
                        o[base + i] = mv * f[base + i] + (1.0 - mv) * b[base + i];
                    }
                }
            }
        }
        self.push(out, vec![mask, fg, bg], Op::Composite)
    }

    /// Record the result of an externally computed operation.
    pub fn apply(&mut self, function: Box<dyn Function>, inputs: &[Var], output: Tensor) -> Var {
        self.push(output, inputs.to_vec(), Op::Custom(function))
    }

    /// Back-propagate from a one-element `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let input_grads = self.node_backward(node, &grad);
            grads[i] = Some(grad);
            for (var, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn node_backward(&self, node: &Node, grad: &Tensor) -> Vec<Option<Tensor>> {
        let input = |k: usize| &self.nodes[node.inputs[k].0].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add => vec![Some(grad.clone()), Some(grad.clone())],
            Op::Scale(f) => vec![Some(grad.map(|g| g * f))],
            Op::LeakyRelu(slope) => {
                let x = input(0);
                let data = grad
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &v)| if v > 0.0 { g } else { g * slope })
                    .collect();
                vec![Some(Tensor::from_vec(x.shape(), data))]
            }
            Op::Tanh => {
                let y = &node.value;
                let data = grad
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &v)| g * (1.0 - v * v))
                    .collect();
                vec![Some(Tensor::from_vec(y.shape(), data))]
            }
            Op::Normalize {
                per_sample,
                inv_std,
            } => {
                let y = &node.value;
                let [n, c, _, _] = y.shape();
                let plane = y.plane();
                let mut dx = Tensor::zeros(y.shape());
                for (g, &is) in inv_std.iter().enumerate() {
                    let planes: Vec<usize> = if *per_sample {
                        vec![g]
                    } else {
                        (0..n).map(|b| b * c + g).collect()
                    };
                    let count = (planes.len() * plane) as f64;
                    let (mut mean_dy, mut mean_dy_y) = (0.0f64, 0.0f64);
                    for &p in &planes {
                        for k in p * plane..(p + 1) * plane {
                            mean_dy += grad.data()[k] as f64;
                            mean_dy_y += (grad.data()[k] * y.data()[k]) as f64;
                        }
                    }
                    mean_dy /= count;
                    mean_dy_y /= count;
                    for &p in &planes {
                        for k in p * plane..(p + 1) * plane {
                            let v =
                                grad.data()[k] as f64 - mean_dy - y.data()[k] as f64 * mean_dy_y;
                            dx.data_mut()[k] = (is as f64 * v) as f32;
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::Concat => {
                let (sa, sb) = (input(0).shape(), input(1).shape());
                let (la, lb) = (sa[1] * sa[2] * sa[3], sb[1] * sb[2] * sb[3]);
                let mut ga = Tensor::zeros(sa);
                let mut gb = Tensor::zeros(sb);
                for n in 0..sa[0] {
                    let src = &grad.data()[n * (la + lb)..(n + 1) * (la + lb)];
                    ga.data_mut()[n * la..(n + 1) * la].copy_from_slice(&src[..la]);
                    gb.data_mut()[n * lb..(n + 1) * lb].copy_from_slice(&src[la..]);
                }
                vec![Some(ga), Some(gb)]
            }
            Op::Upsample2x => {
                let s = input(0).shape();
                let [n, c, h, w] = s;
                let mut gx = Tensor::zeros(s);
                let g = grad.data();
                let dst = gx.data_mut();
                for p in 0..n * c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                vec![Some(gx)]
            }
            Op::Composite => {
                let (m, f, b) = (input(0), input(1), input(2));
                let s = f.shape();
                let plane = s[2] * s[3];
                let mut gm = Tensor::zeros(m.shape());
                let mut gf = Tensor::zeros(s);
                let mut gb = Tensor::zeros(s);
                for n in 0..s[0] {
                    for c in 0..s[1] {
                        let base = (n * s[1] + c) * plane;
                        for i in 0..plane {
                            let g = grad.data()[base + i];
                            let mv = m.data()[n * plane + i];
                            gf.data_mut()[base + i] = mv * g;
                            gb.data_mut()[base + i] = (1.0 - mv) * g;
                            gm.data_mut()[n * plane + i] +=
                                (f.data()[base + i] - b.data()[base + i]) * g;
                        }
                    }
                }
                vec![Some(gm), Some(gf), Some(gb)]
            }
            Op::Conv2d(geometry) => {
                let (x, w) = (input(0), input(1));
                let [n, _, _, _] = x.shape();
                let in_len = x.len() / n;
                let out_len = grad.len() / n;
                let mut gx = self.wants(node.inputs[0]).then(|| Tensor::zeros(x.shape()));
                let mut gw = self.wants(node.inputs[1]).then(|| Tensor::zeros(w.shape()));
                let mut gb = self
                    .wants(node.inputs[2])
                    .then(|| Tensor::zeros(input(2).shape()));
                for b in 0..n {
                    conv_backward(
                        &x.data()[b * in_len..(b + 1) * in_len],
                        w.data(),
                        &grad.data()[b * out_len..(b + 1) * out_len],
                        geometry,
                        gx.as_mut()
                            .map(|t| &mut t.data_mut()[b * in_len..(b + 1) * in_len]),
                        gw.as_mut().map(|t| t.data_mut()),
                        gb.as_mut().map(|t| t.data_mut()),
                    );
                }
                vec![gx, gw, gb]
            }
            Op::Custom(f) => {
                let inputs: Vec<&Tensor> =
                    node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                f.backward(grad, &inputs, &node.value)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: [usize; 4], scale: f32, offset: usize) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n)
                .map(|i| (((i + offset) * 53 % 97) as f32 / 97.0 - 0.45) * scale)
                .collect(),
        )
    }

    /// Builds a small network touching every op, returning a scalar.
    fn forward(
        g: &mut Graph,
        x: &Tensor,
        w1: &Tensor,
        w2: &Tensor,
        trainable: bool,
    ) -> (Var, [Var; 3]) {
        let bind = |g: &mut Graph, t: &Tensor| {
            if trainable {
                g.variable(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let xv = g.variable(x.clone());
        let w1v = bind(g, w1);
        let b1 = bind(g, &seq([1, 4, 1, 1], 0.1, 3));
        let w2v = bind(g, w2);
        let b2 = bind(g, &seq([1, 2, 1, 1], 0.1, 7));
        let h = g.conv2d(xv, w1v, b1, 2, 1);
        let h = g.normalize(h, true, 1e-5);
        let h = g.leaky_relu(h, 0.2);
        let h = g.upsample2x(h);
        let h = g.concat(h, xv);
        let h = g.conv2d(h, w2v, b2, 1, 1);
        let r = g.tanh(h);
        let mask = g.constant(seq([1, 1, 4, 4], 1.0, 1).map(|v| (v + 0.5).clamp(0.0, 1.0)));
        let xs = g.constant(seq([1, 2, 4, 4], 1.0, 11));
        let o = g.composite(mask, r, xs);
        let sq = g.apply(
            Box::new(SumSquares),
            &[o],
            Tensor::scalar(g.value(o).data().iter().map(|v| v * v).sum()),
        );
        let doubled = g.scale(sq, 0.5);
        let total = g.weighted_sum(&[(doubled, 1.0), (sq, 0.25)]);
        (total, [xv, w1v, w2v])
    }

    struct SumSquares;
    impl Function for SumSquares {
        fn backward(
            &self,
            grad_out: &Tensor,
            inputs: &[&Tensor],
            _: &Tensor,
        ) -> Vec<Option<Tensor>> {
            let g = grad_out.item();
            vec![Some(inputs[0].map(|v| 2.0 * v * g))]
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = seq([1, 2, 4, 4], 1.0, 0);
        let w1 = seq([4, 2, 3, 3], 0.6, 5);
        let w2 = seq([2, 6, 3, 3], 0.5, 9);
        let mut g = Graph::new();
        let (root, [xv, w1v, w2v]) = forward(&mut g, &x, &w1, &w2, true);
        let grads = g.backward(root);
        let eval = |x: &Tensor, w1: &Tensor, w2: &Tensor| {
            let mut g = Graph::new();
            let (r, _) = forward(&mut g, x, w1, w2, true);
            g.value(r).item() as f64
        };
        let h = 1e-2f32;
        let check = |analytic: &Tensor, perturb: &dyn Fn(usize, f32) -> f64| {
            for i in (0..analytic.len()).step_by(3) {
                let fd = (perturb(i, h) - perturb(i, -h)) / (2.0 * h as f64);
                let a = analytic.data()[i] as f64;
                assert!(
                    (fd - a).abs() <= 2e-2 * fd.abs().max(a.abs()).max(1e-1),
                    "index {i}: fd {fd} analytic {a}"
                );
            }
        };
        check(grads.get(xv).unwrap(), &|i, d| {
            let mut t = x.clone();
            t.data_mut()[i] += d;
            eval(&t, &w1, &w2)
        });
        check(grads.get(w1v).unwrap(), &|i, d| {
            let mut t = w1.clone();
            t.data_mut()[i] += d;
            eval(&x, &t, &w2)
        });
        check(grads.get(w2v).unwrap(), &|i, d| {
            let mut t = w2.clone();
            t.data_mut()[i] += d;
            eval(&x, &w1, &t)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let (root, [xv, w1v, _]) = forward(
            &mut g,
            &seq([1, 2, 4, 4], 1.0, 0),
            &seq([4, 2, 3, 3], 0.6, 5),
            &seq([2, 6, 3, 3], 0.5, 9),
            false,
        );
        let grads = g.backward(root);
        assert!(grads.get(w1v).is_none());
        assert!(grads.get(xv).is_some());
    }

    #[test]
    fn composite_is_exact_at_mask_extremes() {
        let mut g = Graph::new();
        let mask = g.constant(Tensor::from_vec([1, 1, 1, 2], vec![0.0, 1.0]));
        let fg = g.constant(Tensor::from_vec(
            [1, 1, 1, 2],
            vec![0.123_456_7, -0.987_654_3],
        ));
        let bg = g.constant(Tensor::from_vec(
            [1, 1, 1, 2],
            vec![0.333_333_3, 0.777_777_7],
        ));
        let o = g.composite(mask, fg, bg);
        assert_eq!(g.value(o).data(), &[0.333_333_3, -0.987_654_3]);
    }

    #[test]
    fn batch_norm_matches_instance_norm_for_single_item() {
        let x = seq([1, 3, 4, 4], 2.0, 4);
        let mut g = Graph::new();
        let v = g.constant(x);
        let a = g.normalize(v, true, 1e-5);
        let b = g.normalize(v, false, 1e-5);
        assert_eq!(g.value(a), g.value(b));
    }
}
