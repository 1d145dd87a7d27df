//! Dense vector math and a small feed-forward network with exact analytic
//! gradients.
//!
//! Every learned component in the crate (task model, context selector,
//! insufficient-context detector) is an [`MlpParams`] evaluated with
//! [`mlp_forward`] and differentiated with [`mlp_backward`]. All arithmetic is
//! `f64`.

use std::ops::Index;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Denominator floor used by [`relative_error`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// A fixed-length real vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(values: Vec<f64>) -> Self {
        Vector(values)
    }

    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        check_len(self.len(), other.len(), "dot")?;
        Ok(dot(&self.0, &other.0))
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    /// Cosine similarity, or `None` when either side has zero norm.
    pub fn cosine(&self, other: &Vector) -> Result<Option<f64>> {
        check_len(self.len(), other.len(), "cosine")?;
        Ok(cosine(&self.0, &other.0))
    }

    pub fn scaled(&self, factor: f64) -> Vector {
        Vector(self.0.iter().map(|v| v * factor).collect())
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        check_len(self.len(), other.len(), "add")?;
        Ok(Vector(
            self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect(),
        ))
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> Option<usize> {
        argmax(&self.0)
    }
}

impl Index<usize> for Vector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

fn check_len(a: usize, b: usize, op: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{op}: length {a} vs {b}")));
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::shape("softmax of an empty vector"));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `-ln probs[gold]`, with the probability floored at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f64], gold: usize) -> Result<f64> {
    let p = *probs
        .get(gold)
        .ok_or_else(|| Error::shape(format!("gold {gold} out of range {}", probs.len())))?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Gradient of `cross_entropy(softmax(z), gold)` with respect to `z`.
pub fn softmax_cross_entropy_grad(probs: &[f64], gold: usize) -> Vec<f64> {
    let mut g = probs.to_vec();
    g[gold] -= 1.0;
    g
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Identity,
    Sigmoid,
}

/// One affine layer. Weights are row-major, `out_dim x in_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Layer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn affine(&self, input: &[f64]) -> Vec<f64> {
        if self.in_dim == 0 {
            return self.bias.clone();
        }
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, input) + b)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    /// One entry per hidden layer, i.e. `layers.len() - 1` entries.
    pub activations: Vec<Activation>,
    pub head: Head,
}

impl MlpParams {
    /// All-zero network with the given layer widths `[in, h1, ..., out]`.
    pub fn zeros(dims: &[usize], head: Head) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::config(
                "an MLP needs at least input and output widths",
            ));
        }
        let layers: Vec<Layer> = dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        let activations = vec![Activation::Relu; layers.len() - 1];
        Ok(MlpParams {
            layers,
            activations,
            head,
        })
    }

    /// Fan-scaled uniform init in `[-s, s]`, `s = sqrt(6 / (in + out))`.
    /// Biases start at zero.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], head: Head, rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(dims, head)?;
        for layer in &mut params.layers {
            let fan = (layer.in_dim + layer.out_dim).max(1) as f64;
            let s = (6.0 / fan).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-s..=s);
            }
        }
        Ok(params)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.in_dim()];
        d.extend(self.layers.iter().map(|l| l.out_dim));
        d
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Checks that adjacent layers chain and that buffers have the declared sizes.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::shape("network has no layers"));
        }
        if self.activations.len() + 1 != self.layers.len() {
            return Err(Error::shape("one activation per hidden layer expected"));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::shape(format!(
                    "layer {k} buffers do not match its dims"
                )));
            }
            if k + 1 < self.layers.len() && l.out_dim != self.layers[k + 1].in_dim {
                return Err(Error::shape(format!(
                    "layer {k} does not chain into layer {}",
                    k + 1
                )));
            }
            if !l.weights.iter().chain(&l.bias).all(|v| v.is_finite()) {
                return Err(Error::shape(format!("layer {k} holds non-finite values")));
            }
        }
        Ok(())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(format!(
                "flat parameter length {} vs {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    /// Plain gradient step `theta -= lr * grad`.
    pub fn sgd_step(&mut self, grad: &GradBundle, lr: f64) -> Result<()> {
        grad.check_congruent(self)?;
        for (l, g) in self.layers.iter_mut().zip(&grad.layers) {
            for (w, gw) in l.weights.iter_mut().zip(&g.weights) {
                *w -= lr * gw;
            }
            for (b, gb) in l.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients shaped like an [`MlpParams`], plus the gradient with respect to
/// the network input.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBundle {
    pub layers: Vec<LayerGrad>,
    pub input: Vec<f64>,
}

impl GradBundle {
    pub fn zeros_like(params: &MlpParams) -> Self {
        GradBundle {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            input: vec![0.0; params.in_dim()],
        }
    }

    pub fn check_congruent(&self, params: &MlpParams) -> Result<()> {
        let ok =
            self.layers.len() == params.layers.len()
                && self.layers.iter().zip(&params.layers).all(|(g, l)| {
                    g.weights.len() == l.weights.len() && g.bias.len() == l.bias.len()
                });
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                "gradient bundle is not congruent with the parameters",
            ))
        }
    }

    /// `self += factor * other` over parameter entries (the input gradient is
    /// accumulated too).
    pub fn add_scaled(&mut self, other: &GradBundle, factor: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += factor * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += factor * y;
            }
        }
        for (x, y) in self.input.iter_mut().zip(&other.input) {
            *x += factor * y;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|v| *v *= factor);
            l.bias.iter_mut().for_each(|v| *v *= factor);
        }
        self.input.iter_mut().for_each(|v| *v *= factor);
    }

    /// Parameter gradients in the same order as [`MlpParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.to_flat().iter().chain(&self.input).all(|v| *v == 0.0)
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct Activations {
    /// Input to each layer (`inputs[0]` is the network input).
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pub pre: Vec<Vec<f64>>,
    pub output: Vector,
}

impl Activations {
    /// Output of the last affine layer, before the head.
    pub fn logits(&self) -> &[f64] {
        &self.pre[self.pre.len() - 1]
    }

    /// Smallest |pre-activation| over hidden units; distance to the nearest
    /// rectifier kink.
    pub fn kink_margin(&self) -> f64 {
        self.pre[..self.pre.len() - 1]
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

pub fn mlp_forward(params: &MlpParams, input: &[f64]) -> Result<Activations> {
    if input.len() != params.in_dim() {
        return Err(Error::shape(format!(
            "network expects input of length {}, got {}",
            params.in_dim(),
            input.len()
        )));
    }
    let n = params.layers.len();
    let mut inputs = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n);
    let mut current = input.to_vec();
    for (k, layer) in params.layers.iter().enumerate() {
        let z = layer.affine(&current);
        inputs.push(current);
        current = if k + 1 < n {
            match params.activations[k] {
                Activation::Relu => z.iter().map(|v| v.max(0.0)).collect(),
            }
        } else {
            match params.head {
                Head::Identity => z.clone(),
                Head::Sigmoid => z.iter().map(|&v| sigmoid(v)).collect(),
            }
        };
        pre.push(z);
    }
    Ok(Activations {
        inputs,
        pre,
        output: Vector(current),
    })
}

/// Gradients of `output . upstream` with respect to every parameter and the
/// input.
pub fn mlp_backward(
    params: &MlpParams,
    acts: &Activations,
    upstream: &[f64],
) -> Result<GradBundle> {
    if upstream.len() != params.out_dim() || acts.output.len() != params.out_dim() {
        return Err(Error::shape(format!(
            "upstream gradient length {} vs output {}",
            upstream.len(),
            params.out_dim()
        )));
    }
    let grad_pre: Vec<f64> = match params.head {
        Head::Identity => upstream.to_vec(),
        Head::Sigmoid => upstream
            .iter()
            .zip(acts.output.as_slice())
            .map(|(g, s)| g * s * (1.0 - s))
            .collect(),
    };
    backward_from_logits(params, acts, &grad_pre)
}

/// Backward pass seeded with the gradient at the last pre-activation (before
/// the head). Losses defined on logits use this to avoid dividing by
/// saturated sigmoid derivatives.
pub fn backward_from_logits(
    params: &MlpParams,
    acts: &Activations,
    grad_logits: &[f64],
) -> Result<GradBundle> {
    let n = params.layers.len();
    if acts.inputs.len() != n || acts.pre.len() != n {
        return Err(Error::shape("activations do not come from this network"));
    }
    if grad_logits.len() != params.out_dim() {
        return Err(Error::shape("logit gradient has the wrong length"));
    }
    let mut grads: Vec<LayerGrad> = Vec::with_capacity(n);
    let mut delta = grad_logits.to_vec();
    for k in (0..n).rev() {
        let layer = &params.layers[k];
        let x = &acts.inputs[k];
        if x.len() != layer.in_dim {
            return Err(Error::shape(format!(
                "cached input of layer {k} has the wrong length"
            )));
        }
        let mut gw = vec![0.0; layer.weights.len()];
        for (o, d) in delta.iter().enumerate() {
            if *d != 0.0 {
                let row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g = d * xi;
                }
            }
        }
        let mut gx = vec![0.0; layer.in_dim];
        for (o, d) in delta.iter().enumerate() {
            if *d != 0.0 {
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (g, w) in gx.iter_mut().zip(row) {
                    *g += d * w;
                }
            }
        }
        grads.push(LayerGrad {
            weights: gw,
            bias: delta.clone(),
        });
        if k > 0 {
            let below = &acts.pre[k - 1];
            delta = match params.activations[k - 1] {
                Activation::Relu => gx
                    .iter()
                    .zip(below)
                    .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
                    .collect(),
            };
        } else {
            delta = gx;
        }
    }
    grads.reverse();
    Ok(GradBundle {
        layers: grads,
        input: delta,
    })
}

/// `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Central finite differences of `loss` around `theta`, compared entrywise
/// against `analytic`. Returns the largest [`relative_error`].
pub fn grad_check_flat<F>(theta: &[f64], analytic: &[f64], mut loss: F, epsilon: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::config(format!(
            "finite-difference step {epsilon} outside (0, 1e-2]"
        )));
    }
    if theta.len() != analytic.len() {
        return Err(Error::shape(
            "analytic gradient length differs from parameter length",
        ));
    }
    let mut probe = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        probe[i] = theta[i] + epsilon;
        let up = loss(&probe);
        probe[i] = theta[i] - epsilon;
        let down = loss(&probe);
        probe[i] = theta[i];
        let numeric = (up - down) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Finite-difference check of a scalar loss over one network's parameters.
/// `loss_and_grad` returns the loss and its analytic gradient.
pub fn grad_check<F>(params: &MlpParams, loss_and_grad: F, epsilon: f64) -> Result<f64>
where
    F: Fn(&MlpParams) -> Result<(f64, GradBundle)>,
{
    let (_, grad) = loss_and_grad(params)?;
    grad.check_congruent(params)?;
    let theta = params.to_flat();
    let mut probe = params.clone();
    let mut failure = None;
    let worst = grad_check_flat(
        &theta,
        &grad.to_flat(),
        |flat| {
            probe.set_flat(flat).expect("length checked above");
            match loss_and_grad(&probe) {
                Ok((l, _)) => l,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        epsilon,
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok(worst),
    }
}
