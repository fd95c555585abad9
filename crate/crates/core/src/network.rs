//! The regression CNN: a stack of SAME convolutions, each followed by a ReLU
//! except the last, mapping a 1-channel luminance image to a 1-channel
//! detection map of the same size.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ops::{conv2d_same, conv2d_same_backward, conv2d_same_backward_params, relu, relu_backward};
use crate::{Error, Result, Tensor};

/// Shape of one convolutional layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub relu: bool,
}

impl LayerSpec {
    pub fn new(out_channels: usize, in_channels: usize, kernel: usize, relu: bool) -> Self {
        LayerSpec {
            out_channels,
            in_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            relu,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * self.fan_in() + self.out_channels
    }
}

/// The default architecture: 5×5×1→64, four 3×3×64→64 layers, all with
/// ReLU, then a linear 3×3×64→1 output layer.
pub fn default_architecture() -> Vec<LayerSpec> {
    architecture(6, 64, 5, 3)
}

/// A `depth`-layer stack with `width` hidden channels, a `first_kernel`
/// input layer and `kernel`-sized hidden/output layers. `depth == 1` gives a
/// single linear 1→1 convolution.
pub fn architecture(depth: usize, width: usize, first_kernel: usize, kernel: usize) -> Vec<LayerSpec> {
    assert!(depth >= 1);
    (0..depth)
        .map(|i| {
            let last = i + 1 == depth;
            let inc = if i == 0 { 1 } else { width };
            let outc = if last { 1 } else { width };
            let k = if i == 0 { first_kernel } else { kernel };
            LayerSpec::new(outc, inc, k, !last)
        })
        .collect()
}

pub fn validate_architecture(specs: &[LayerSpec]) -> Result<()> {
    let first = specs
        .first()
        .ok_or_else(|| Error::invalid("network needs at least one layer"))?;
    if first.in_channels != 1 {
        return Err(Error::invalid(format!(
            "first layer must take 1 input channel, got {}",
            first.in_channels
        )));
    }
    for (i, pair) in specs.windows(2).enumerate() {
        if pair[0].out_channels != pair[1].in_channels {
            return Err(Error::invalid(format!(
                "layer {} outputs {} channels but layer {} expects {}",
                i + 1,
                pair[0].out_channels,
                i + 2,
                pair[1].in_channels
            )));
        }
    }
    let last = specs.last().unwrap();
    if last.out_channels != 1 {
        return Err(Error::invalid(format!(
            "final layer must output 1 channel, got {}",
            last.out_channels
        )));
    }
    if specs.iter().any(|s| s.kernel_h == 0 || s.kernel_w == 0) {
        return Err(Error::invalid("kernel extents must be >= 1"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

/// All learnable weights and biases, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
}

impl ModelParams {
    pub fn zeros(specs: &[LayerSpec]) -> Result<Self> {
        validate_architecture(specs)?;
        Ok(ModelParams {
            layers: specs
                .iter()
                .map(|s| Layer {
                    spec: *s,
                    weight: Tensor::zeros(s.weight_shape()),
                    bias: vec![0.0; s.out_channels],
                })
                .collect(),
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.spec.num_params()).sum()
    }

    /// Flat parameter vector: per layer, weights then biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`ModelParams::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "flat parameter length {} != {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.data_mut().copy_from_slice(&flat[k..k + nw]);
            k += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[k..k + nb]);
            k += nb;
        }
        Ok(())
    }

    /// Rounds every parameter to the nearest `f32`, so that the value held
    /// in memory is exactly what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for l in &mut self.layers {
            for v in l.weight.data_mut().iter_mut().chain(l.bias.iter_mut()) {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Hash of the architecture and every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for l in &self.layers {
            l.spec.hash(&mut h);
            for v in l.weight.data().iter().chain(&l.bias) {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

impl Hash for LayerSpec {
    fn hash<H: Hasher>(&self, state: &mut H) {
        (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w, self.relu).hash(state);
    }
}

/// He-scaled uniform weights (std √(2/fan_in)) on every layer, zero biases.
/// Values are drawn as `f32` so the parameters are checkpoint-exact.
pub fn he_uniform(specs: &[LayerSpec], seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(specs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in &mut params.layers {
        let bound = (6.0 / l.spec.fan_in() as f64).sqrt() as f32;
        for w in l.weight.data_mut() {
            *w = rng.random_range(-bound..bound) as f64;
        }
    }
    Ok(params)
}

/// Training initialisation: [`he_uniform`] with the output layer zeroed, so
/// the untrained network predicts 0 everywhere instead of an O(1) response
/// on every pixel of the summed squared-error loss.
pub fn init_params(specs: &[LayerSpec], seed: u64) -> Result<ModelParams> {
    let mut params = he_uniform(specs, seed)?;
    if let Some(last) = params.layers.last_mut() {
        last.weight.data_mut().fill(0.0);
    }
    Ok(params)
}

/// Intermediate values retained by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Tensor>,
    preacts: Vec<Tensor>,
    fingerprint: u64,
}

impl ForwardCache {
    /// Pre-activation of every layer, in order.
    pub fn preactivations(&self) -> &[Tensor] {
        &self.preacts
    }
}

/// Runs the network on an N×1×H×W input, returning the N×1×H×W output.
pub fn forward(params: &ModelParams, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
    if x.channels() != 1 {
        return Err(Error::invalid(format!(
            "network input must have 1 channel, got {}",
            x.channels()
        )));
    }
    let mut inputs = Vec::with_capacity(params.depth());
    let mut preacts = Vec::with_capacity(params.depth());
    let mut cur = x.clone();
    for l in &params.layers {
        let z = conv2d_same(&cur, &l.weight, &l.bias)?;
        let next = if l.spec.relu { relu(&z) } else { z.clone() };
        inputs.push(cur);
        preacts.push(z);
        cur = next;
    }
    Ok((
        cur,
        ForwardCache {
            inputs,
            preacts,
            fingerprint: params.fingerprint(),
        },
    ))
}

/// Forward pass without retaining intermediates.
pub fn predict(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    if x.channels() != 1 {
        return Err(Error::invalid(format!(
            "network input must have 1 channel, got {}",
            x.channels()
        )));
    }
    let mut cur = x.clone();
    for l in &params.layers {
        let z = conv2d_same(&cur, &l.weight, &l.bias)?;
        cur = if l.spec.relu { relu(&z) } else { z };
    }
    Ok(cur)
}

/// Per-layer (weight, bias) gradients, parallel to [`ModelParams::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<(Tensor, Vec<f64>)>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        ParamGrads {
            layers: params
                .layers
                .iter()
                .map(|l| (Tensor::zeros(l.weight.shape()), vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            for (a, x) in w.data_mut().iter_mut().zip(ow.data()) {
                *a += x;
            }
            for (a, x) in b.iter_mut().zip(ob) {
                *a += x;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            w.data_mut().iter_mut().for_each(|v| *v *= s);
            b.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.layers.iter().fold(0.0, |m, (w, b)| {
            b.iter().fold(m.max(w.max_abs()), |m, v| m.max(v.abs()))
        })
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.all_finite() && b.iter().all(|v| v.is_finite()))
    }
}

/// Back-propagates `d_output` (gradient of a scalar loss w.r.t. the network
/// output) to every weight and bias.
pub fn backward(params: &ModelParams, cache: &ForwardCache, d_output: &Tensor) -> Result<ParamGrads> {
    if cache.inputs.len() != params.depth() || cache.fingerprint != params.fingerprint() {
        return Err(Error::InvalidState(
            "forward cache was produced by different parameters".into(),
        ));
    }
    let out_shape = cache.preacts.last().map(|t| t.shape());
    if out_shape != Some(d_output.shape()) {
        return Err(Error::InvalidState(format!(
            "output gradient shape {:?} does not match cached forward output {:?}",
            d_output.shape(),
            out_shape
        )));
    }
    let mut layers = Vec::with_capacity(params.depth());
    let mut upstream = d_output.clone();
    for (i, l) in params.layers.iter().enumerate().rev() {
        if l.spec.relu {
            upstream = relu_backward(&cache.preacts[i], &upstream)?;
        }
        let g = if i == 0 {
            conv2d_same_backward_params(&cache.inputs[i], &l.weight, &upstream)?
        } else {
            conv2d_same_backward(&cache.inputs[i], &l.weight, &upstream)?
        };
        layers.push((g.kernel, g.bias));
        upstream = g.input;
    }
    layers.reverse();
    Ok(ParamGrads { layers })
}
