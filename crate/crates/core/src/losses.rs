//! Training objectives.
//!
//! Every loss has a generic scalar kernel (usable in `f64` for verification)
//! and a graph wrapper that records it on a [`Graph`] for training.
//!
//! Layout conventions: frames are `batch * channels * plane` values, maps
//! and masks are `batch * plane`. `N` counts per-channel elements for
//! frames and pixels for single-channel maps.

use harmonizer_nn::{Function, Graph, Tensor, Var};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights of the temporal and adversarial terms of the generator loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 2e-2,
            lambda2: 1e-2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Scalar loss values for one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub reconstruction: f64,
    pub regional_temporal: f64,
    pub adversarial_g: f64,
    pub total_g: f64,
    pub d_fake_out: f64,
    pub d_fake_in: f64,
    pub d_real: f64,
    /// Set when the temporal term had no foreground pixels to average over.
    #[serde(default)]
    pub degenerate_foreground: bool,
}

pub fn generator_total(
    reconstruction: f64,
    regional_temporal: f64,
    adversarial_g: f64,
    weights: LossWeights,
) -> f64 {
    reconstruction + weights.lambda1 * regional_temporal + weights.lambda2 * adversarial_g
}

/// Value of a masked temporal loss together with its normalizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemporalValue<T> {
    pub loss: T,
    /// Sum over samples of `channels * sum(mask * valid)`.
    pub normalizer: T,
    /// True when at least one sample had a zero normalizer.
    pub degenerate: bool,
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{what}: {a} vs {b} elements")));
    }
    Ok(())
}

fn mean_sq<T: Float>(it: impl Iterator<Item = T>, n: usize) -> T {
    it.fold(T::zero(), |acc, v| acc + v * v) / T::from(n).unwrap()
}

/// `(1/N) * ||o - x||^2`.
pub fn reconstruction<T: Float>(o: &[T], x: &[T]) -> Result<T> {
    check_len(o.len(), x.len(), "reconstruction")?;
    Ok(mean_sq(o.iter().zip(x).map(|(&a, &b)| a - b), o.len()))
}

/// Adds `scale * d/do` and `scale * d/dx` of [`reconstruction`].
pub fn reconstruction_grad<T: Float>(
    o: &[T],
    x: &[T],
    scale: T,
    grad_o: &mut [T],
    grad_x: &mut [T],
) {
    let k = scale * T::from(2.0).unwrap() / T::from(o.len()).unwrap();
    for i in 0..o.len() {
        let d = k * (o[i] - x[i]);
        grad_o[i] = grad_o[i] + d;
        grad_x[i] = grad_x[i] - d;
    }
}

/// Per-sample weights `mask * valid` (the Hadamard weight applied to the
/// frame difference) and normalizers.
fn temporal_weights<T: Float>(
    mask: &[T],
    valid: &[T],
    batch: usize,
    channels: usize,
) -> (Vec<T>, Vec<T>) {
    let plane = mask.len() / batch;
    let weights: Vec<T> = mask.iter().zip(valid).map(|(&m, &v)| m * v).collect();
    let norms = (0..batch)
        .map(|b| {
            let s = weights[b * plane..(b + 1) * plane]
                .iter()
                .fold(T::zero(), |a, &w| a + w);
            s * T::from(channels).unwrap()
        })
        .collect();
    (weights, norms)
}

/// Regional temporal loss `(1/N_F) * ||M ∘ V ∘ (o - warped)||^2`, averaged
/// over the batch, with `N_F = channels * sum(M ∘ V)` per sample. A sample
/// with `N_F = 0` contributes 0 and sets the degenerate flag.
pub fn regional_temporal<T: Float>(
    o: &[T],
    warped: &[T],
    mask: &[T],
    valid: &[T],
    batch: usize,
    channels: usize,
) -> Result<TemporalValue<T>> {
    check_len(o.len(), warped.len(), "regional temporal frames")?;
    check_len(mask.len(), valid.len(), "regional temporal masks")?;
    check_len(
        o.len(),
        mask.len() * channels,
        "regional temporal frame/mask",
    )?;
    let plane = mask.len() / batch;
    let (weights, norms) = temporal_weights(mask, valid, batch, channels);
    let mut total = T::zero();
    let mut degenerate = false;
    for b in 0..batch {
        if norms[b] == T::zero() {
            degenerate = true;
            continue;
        }
        let mut acc = T::zero();
        for c in 0..channels {
            let base = (b * channels + c) * plane;
            for p in 0..plane {
                let d = weights[b * plane + p] * (o[base + p] - warped[base + p]);
                acc = acc + d * d;
            }
        }
        total = total + acc / norms[b];
    }
    let normalizer = norms.iter().fold(T::zero(), |a, &n| a + n);
    Ok(TemporalValue {
        loss: total / T::from(batch).unwrap(),
        normalizer,
        degenerate,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn regional_temporal_grad<T: Float>(
    o: &[T],
    warped: &[T],
    mask: &[T],
    valid: &[T],
    batch: usize,
    channels: usize,
    scale: T,
    grad_o: &mut [T],
    grad_warped: &mut [T],
) {
    let plane = mask.len() / batch;
    let (weights, norms) = temporal_weights(mask, valid, batch, channels);
    let two = T::from(2.0).unwrap();
    for b in 0..batch {
        if norms[b] == T::zero() {
            continue;
        }
        let k = scale * two / (norms[b] * T::from(batch).unwrap());
        for c in 0..channels {
            let base = (b * channels + c) * plane;
            for p in 0..plane {
                let w = weights[b * plane + p];
                let d = k * w * w * (o[base + p] - warped[base + p]);
                grad_o[base + p] = grad_o[base + p] + d;
                grad_warped[base + p] = grad_warped[base + p] - d;
            }
        }
    }
}

/// Global temporal loss: the regional loss with an all-ones foreground
/// mask, so it still honours the warp validity mask.
pub fn global_temporal<T: Float>(
    o: &[T],
    warped: &[T],
    valid: &[T],
    batch: usize,
    channels: usize,
) -> Result<TemporalValue<T>> {
    let ones = vec![T::one(); valid.len()];
    regional_temporal(o, warped, &ones, valid, batch, channels)
}

/// `(1/N) * ||d||^2`; the caller applies the adversarial weight.
pub fn adversarial_generator<T: Float>(d_fake: &[T]) -> T {
    mean_sq(d_fake.iter().copied(), d_fake.len())
}

pub fn adversarial_generator_grad<T: Float>(d_fake: &[T], scale: T, grad: &mut [T]) {
    let k = scale * T::from(2.0).unwrap() / T::from(d_fake.len()).unwrap();
    for (g, &d) in grad.iter_mut().zip(d_fake) {
        *g = *g + k * d;
    }
}

/// The three discriminator terms `(1/2N)||D(O) - M||^2`,
/// `(1/2N)||D(I) - M||^2` and `(1/N)||D(X)||^2`.
pub fn discriminator_terms<T: Float>(
    d_out: &[T],
    d_in: &[T],
    d_real: &[T],
    mask: &[T],
) -> Result<[T; 3]> {
    check_len(d_out.len(), mask.len(), "discriminator D(O)")?;
    check_len(d_in.len(), mask.len(), "discriminator D(I)")?;
    check_len(d_real.len(), mask.len(), "discriminator D(X)")?;
    let n = mask.len();
    let half = T::from(0.5).unwrap();
    Ok([
        half * mean_sq(d_out.iter().zip(mask).map(|(&d, &m)| d - m), n),
        half * mean_sq(d_in.iter().zip(mask).map(|(&d, &m)| d - m), n),
        mean_sq(d_real.iter().copied(), n),
    ])
}

pub fn discriminator_loss<T: Float>(
    d_out: &[T],
    d_in: &[T],
    d_real: &[T],
    mask: &[T],
) -> Result<T> {
    let [a, b, c] = discriminator_terms(d_out, d_in, d_real, mask)?;
    Ok(a + b + c)
}

/// Adds the gradients of [`discriminator_loss`] with respect to the three maps.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_loss_grad<T: Float>(
    d_out: &[T],
    d_in: &[T],
    d_real: &[T],
    mask: &[T],
    scale: T,
    grad_out: &mut [T],
    grad_in: &mut [T],
    grad_real: &mut [T],
) {
    let n = T::from(mask.len()).unwrap();
    let two = T::from(2.0).unwrap();
    for i in 0..mask.len() {
        grad_out[i] = grad_out[i] + scale * (d_out[i] - mask[i]) / n;
        grad_in[i] = grad_in[i] + scale * (d_in[i] - mask[i]) / n;
        grad_real[i] = grad_real[i] + scale * two * d_real[i] / n;
    }
}

enum LossKind {
    Reconstruction,
    Temporal { mask: Vec<f32>, valid: Vec<f32> },
    Adversarial,
    Discriminator { mask: Vec<f32> },
}

struct LossFunction {
    kind: LossKind,
}

impl Function for LossFunction {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _: &Tensor) -> Vec<Option<Tensor>> {
        let scale = grad_out.item();
        let zeros = |k: usize| Tensor::zeros(inputs[k].shape());
        match &self.kind {
            LossKind::Reconstruction => {
                let (mut go, mut gx) = (zeros(0), zeros(1));
                reconstruction_grad(
                    inputs[0].data(),
                    inputs[1].data(),
                    scale,
                    go.data_mut(),
                    gx.data_mut(),
                );
                vec![Some(go), Some(gx)]
            }
            LossKind::Temporal { mask, valid } => {
                let [n, c, _, _] = inputs[0].shape();
                let (mut go, mut gw) = (zeros(0), zeros(1));
                regional_temporal_grad(
                    inputs[0].data(),
                    inputs[1].data(),
                    mask,
                    valid,
                    n,
                    c,
                    scale,
                    go.data_mut(),
                    gw.data_mut(),
                );
                vec![Some(go), Some(gw)]
            }
            LossKind::Adversarial => {
                let mut g = zeros(0);
                adversarial_generator_grad(inputs[0].data(), scale, g.data_mut());
                vec![Some(g)]
            }
            LossKind::Discriminator { mask } => {
                let (mut a, mut b, mut c) = (zeros(0), zeros(1), zeros(2));
                discriminator_loss_grad(
                    inputs[0].data(),
                    inputs[1].data(),
                    inputs[2].data(),
                    mask,
                    scale,
                    a.data_mut(),
                    b.data_mut(),
                    c.data_mut(),
                );
                vec![Some(a), Some(b), Some(c)]
            }
        }
    }
}

fn record(graph: &mut Graph, kind: LossKind, inputs: &[Var], value: f32) -> Var {
    graph.apply(
        Box::new(LossFunction { kind }),
        inputs,
        Tensor::scalar(value),
    )
}

pub fn reconstruction_var(graph: &mut Graph, o: Var, x: Var) -> Result<Var> {
    let value = reconstruction(graph.value(o).data(), graph.value(x).data())?;
    Ok(record(graph, LossKind::Reconstruction, &[o, x], value))
}

/// Returns the loss node and whether the foreground was degenerate.
pub fn regional_temporal_var(
    graph: &mut Graph,
    o: Var,
    warped: Var,
    mask: &Tensor,
    valid: &Tensor,
) -> Result<(Var, bool)> {
    let [n, c, _, _] = graph.value(o).shape();
    let value = regional_temporal(
        graph.value(o).data(),
        graph.value(warped).data(),
        mask.data(),
        valid.data(),
        n,
        c,
    )?;
    let kind = LossKind::Temporal {
        mask: mask.data().to_vec(),
        valid: valid.data().to_vec(),
    };
    Ok((
        record(graph, kind, &[o, warped], value.loss),
        value.degenerate,
    ))
}

pub fn global_temporal_var(
    graph: &mut Graph,
    o: Var,
    warped: Var,
    valid: &Tensor,
) -> Result<(Var, bool)> {
    let ones = Tensor::full(valid.shape(), 1.0);
    regional_temporal_var(graph, o, warped, &ones, valid)
}

pub fn adversarial_generator_var(graph: &mut Graph, d_fake: Var) -> Var {
    let value = adversarial_generator(graph.value(d_fake).data());
    record(graph, LossKind::Adversarial, &[d_fake], value)
}

/// Discriminator loss node plus its three terms as plain numbers.
pub fn discriminator_loss_var(
    graph: &mut Graph,
    d_out: Var,
    d_in: Var,
    d_real: Var,
    mask: &Tensor,
) -> Result<(Var, [f32; 3])> {
    let terms = discriminator_terms(
        graph.value(d_out).data(),
        graph.value(d_in).data(),
        graph.value(d_real).data(),
        mask.data(),
    )?;
    let kind = LossKind::Discriminator {
        mask: mask.data().to_vec(),
    };
    let var = record(graph, kind, &[d_out, d_in, d_real], terms.iter().sum());
    Ok((var, terms))
}
