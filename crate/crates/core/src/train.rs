//! The training objective and loop.
//!
//! Per batch of `B` tuples `(x, x̂, y)` with `ŷ = f(x; Θ)`:
//!
//! ```text
//! fidelity = (1/B) Σ ‖ŷ − y‖²
//! prior    = (1/B) Σ Σ_i ‖(maxpool_p(threshold(ŷ)) ⊙ x̂) ⋆ S_i‖²
//! total    = fidelity − λ · prior
//! ```
//!
//! The prior enters with a negative sign: correlation with the nucleus
//! templates is rewarded. Weight decay adds `wd · W` to weight gradients
//! (biases excluded) and its penalty `wd/2 · ‖W‖²` is reported on its own.
//! Optimisation is mini-batch SGD with momentum, with the learning rate
//! multiplied by `lr_decay` every `lr_decay_every` epochs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedImage, TrainingTuple};
use crate::detect::{aggregate, detect, evaluate, Averaging, DEFAULT_GOLDEN_RADIUS, DEFAULT_NMS_RADIUS};
use crate::edge::CannyParams;
use crate::network::{architecture, backward, forward, init_params, predict, LayerSpec, ModelParams, ParamGrads};
use crate::shape_prior::{prior_term, ShapeSet};
use crate::{Error, Image, Result, Tensor};

/// Hyper-parameters of a training run. Serialised field names are the
/// on-disk config format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the shape-prior reward.
    pub lambda: f64,
    /// Window of the max-pool applied to the thresholded output (odd).
    #[serde(alias = "p")]
    pub pool_window: usize,
    /// Values of the output below this are ignored by the prior.
    #[serde(alias = "t_p")]
    pub prior_threshold: f64,
    pub weight_decay: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// The learning rate ramps linearly from `lr / warmup_steps` to `lr`
    /// over this many optimiser steps at the start of a run.
    pub warmup_steps: usize,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Abort when the gradient ∞-norm exceeds this.
    pub grad_ceiling: f64,
    /// Detection threshold used for the per-epoch validation F1.
    pub val_threshold: f64,
    pub network: NetworkConfig,
    pub shapes: ShapeConfig,
    pub patch: usize,
    pub stride: usize,
    pub canny: CannyParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub depth: usize,
    pub width: usize,
    pub first_kernel: usize,
    pub kernel: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            depth: 6,
            width: 64,
            first_kernel: 5,
            kernel: 3,
        }
    }
}

impl NetworkConfig {
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        architecture(self.depth, self.width, self.first_kernel, self.kernel)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        ShapeConfig {
            count: 64,
            size: 20,
            seed: 0,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 5e-7,
            pool_window: 11,
            prior_threshold: 0.2,
            weight_decay: 1e-5,
            lr: 2e-6,
            lr_decay: 0.75,
            lr_decay_every: 5,
            warmup_steps: 0,
            momentum: 0.9,
            batch_size: 32,
            epochs: 50,
            seed: 0,
            grad_ceiling: 1e5,
            val_threshold: 0.3,
            network: NetworkConfig::default(),
            shapes: ShapeConfig::default(),
            patch: 40,
            stride: 20,
            canny: CannyParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.pool_window.is_multiple_of(2) {
            return bad(format!("pool window must be odd, got {}", self.pool_window));
        }
        if !(0.0..=1.0).contains(&self.prior_threshold) {
            return bad(format!("prior threshold must lie in [0, 1], got {}", self.prior_threshold));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) || self.lr_decay_every == 0 {
            return bad("lr, lr_decay and lr_decay_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must lie in [0, 1) and weight decay be >= 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.grad_ceiling > 0.0) {
            return bad("gradient ceiling must be positive".into());
        }
        if self.network.depth == 0 || self.network.width == 0 {
            return bad("network depth and width must be positive".into());
        }
        self.canny.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Learning rate in effect during (0-based) `epoch`, before warmup.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }

    /// Warmup factor for the (0-based) optimiser step.
    pub fn warmup_factor(&self, step: usize) -> f64 {
        if step >= self.warmup_steps {
            1.0
        } else {
            (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

/// Loss components of one evaluation, each averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fidelity: f64,
    pub prior: f64,
    /// `fidelity − λ · prior`.
    pub total: f64,
    pub weight_decay_penalty: f64,
}

impl LossBreakdown {
    pub fn new(fidelity: f64, prior: f64, lambda: f64, weight_decay_penalty: f64) -> Self {
        LossBreakdown {
            fidelity,
            prior,
            total: fidelity - lambda * prior,
            weight_decay_penalty,
        }
    }
}

pub fn weight_decay_penalty(params: &ModelParams, wd: f64) -> f64 {
    0.5 * wd
        * params
            .layers
            .iter()
            .map(|l| crate::ops::sq_norm(&l.weight))
            .sum::<f64>()
}

struct SampleResult {
    fidelity: f64,
    prior: f64,
    grads: ParamGrads,
}

fn sample_loss_and_grad(
    params: &ModelParams,
    tuple: &TrainingTuple,
    shapes: &ShapeSet,
    cfg: &TrainConfig,
    scale: f64,
    flip_prior_grad: bool,
) -> Result<SampleResult> {
    let x = Tensor::from_image(&tuple.x);
    let (yhat, cache) = forward(params, &x)?;
    let y = &tuple.y;
    if (y.height, y.width) != (yhat.height(), yhat.width()) {
        return Err(Error::invalid("label patch size differs from input patch size"));
    }
    let mut fidelity = 0.0;
    let mut d_out = Tensor::zeros(yhat.shape());
    for ((d, &p), &t) in d_out.data_mut().iter_mut().zip(yhat.data()).zip(&y.data) {
        let r = p - t;
        fidelity += r * r;
        *d = 2.0 * scale * r;
    }
    let edges = Tensor::from_image(&tuple.edges);
    let pr = prior_term(&yhat, &edges, shapes, cfg.pool_window, cfg.prior_threshold)?;
    if cfg.lambda != 0.0 {
        let coeff = if flip_prior_grad { 1.0 } else { -1.0 } * cfg.lambda * scale;
        for (d, g) in d_out.data_mut().iter_mut().zip(pr.grad.data()) {
            *d += coeff * g;
        }
    }
    let grads = backward(params, &cache, &d_out)?;
    Ok(SampleResult {
        fidelity,
        prior: pr.value,
        grads,
    })
}

/// Objective and parameter gradient for one batch. Samples may be processed
/// in parallel; the reduction runs in sample order so results do not depend
/// on the thread count.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &[&TrainingTuple],
    shapes: &ShapeSet,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, ParamGrads)> {
    loss_and_grad_impl(params, batch, shapes, cfg, false)
}

pub(crate) fn loss_and_grad_impl(
    params: &ModelParams,
    batch: &[&TrainingTuple],
    shapes: &ShapeSet,
    cfg: &TrainConfig,
    flip_prior_grad: bool,
) -> Result<(LossBreakdown, ParamGrads)> {
    let first = batch.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let size = (first.x.height, first.x.width);
    if batch.iter().any(|t| (t.x.height, t.x.width) != size) {
        return Err(Error::invalid("all tuples in a batch must share one patch size"));
    }
    let scale = 1.0 / batch.len() as f64;
    let results: Vec<Result<SampleResult>> = batch
        .par_iter()
        .map(|t| sample_loss_and_grad(params, t, shapes, cfg, scale, flip_prior_grad))
        .collect();
    let mut grads = ParamGrads::zeros_like(params);
    let (mut fid, mut prior) = (0.0, 0.0);
    for r in results {
        let r = r?;
        fid += r.fidelity;
        prior += r.prior;
        grads.add_assign(&r.grads);
    }
    for (l, (gw, _)) in params.layers.iter().zip(grads.layers.iter_mut()) {
        for (g, w) in gw.data_mut().iter_mut().zip(l.weight.data()) {
            *g += cfg.weight_decay * w;
        }
    }
    let loss = LossBreakdown::new(
        fid * scale,
        prior * scale,
        cfg.lambda,
        weight_decay_penalty(params, cfg.weight_decay),
    );
    let finite = [loss.fidelity, loss.prior, loss.total, loss.weight_decay_penalty]
        .iter()
        .all(|v| v.is_finite());
    if !finite || !grads.all_finite() {
        return Err(Error::Numeric {
            batch_index: 0,
            detail: format!("non-finite loss or gradient: {loss:?}"),
        });
    }
    Ok((loss, grads))
}

/// SGD with classical momentum: `v ← μv + g`, `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub momentum: f64,
    velocity: ParamGrads,
}

impl SgdMomentum {
    pub fn new(params: &ModelParams, momentum: f64) -> Self {
        SgdMomentum {
            momentum,
            velocity: ParamGrads::zeros_like(params),
        }
    }

    /// Applies one update, then rounds the parameters to `f32` so the
    /// in-memory model always equals its checkpoint.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ParamGrads, lr: f64) {
        for ((layer, (vw, vb)), (gw, gb)) in params
            .layers
            .iter_mut()
            .zip(self.velocity.layers.iter_mut())
            .zip(&grads.layers)
        {
            for ((w, v), g) in layer.weight.data_mut().iter_mut().zip(vw.data_mut()).zip(gw.data()) {
                *v = self.momentum * *v + g;
                *w -= lr * *v;
            }
            for ((b, v), g) in layer.bias.iter_mut().zip(vb.iter_mut()).zip(gb) {
                *v = self.momentum * *v + g;
                *b -= lr * *v;
            }
        }
        params.round_to_f32();
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub fidelity: f64,
    pub prior: f64,
    pub total: f64,
    pub lr: f64,
    pub val_f1: Option<f64>,
}

pub const HISTORY_HEADER: &str = "epoch,fidelity,prior,total,lr,val_f1";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        let val = r.val_f1.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{},{}", r.epoch, r.fidelity, r.prior, r.total, r.lr, val);
    }
    s
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(Error::format(path, "unexpected history header"));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::format(path, format!("line {}: malformed history row", n + 2));
        if f.len() != 6 {
            return Err(bad());
        }
        out.push(EpochRecord {
            epoch: f[0].parse().map_err(|_| bad())?,
            fidelity: f[1].parse().map_err(|_| bad())?,
            prior: f[2].parse().map_err(|_| bad())?,
            total: f[3].parse().map_err(|_| bad())?,
            lr: f[4].parse().map_err(|_| bad())?,
            val_f1: if f[5].is_empty() { None } else { Some(f[5].parse().map_err(|_| bad())?) },
        });
    }
    Ok(out)
}

/// Full-image detection maps for a set of images.
pub fn predict_maps(params: &ModelParams, images: &[AnnotatedImage]) -> Result<Vec<Image>> {
    images
        .par_iter()
        .map(|a| Ok(predict(params, &Tensor::from_image(&a.image))?.to_image(0, 0)))
        .collect()
}

/// Micro-averaged F1 of detections at `threshold` against ground truth.
pub fn validation_f1(params: &ModelParams, images: &[AnnotatedImage], threshold: f64) -> Result<f64> {
    let maps = predict_maps(params, images)?;
    let mut reports = Vec::with_capacity(images.len());
    for (m, a) in maps.iter().zip(images) {
        let dets = detect(m, threshold, DEFAULT_NMS_RADIUS);
        reports.push(evaluate(&dets, &a.centers, DEFAULT_GOLDEN_RADIUS, threshold)?);
    }
    Ok(aggregate(threshold, &reports, Averaging::Micro).f1)
}

/// Where a run starts: fresh initialisation or a resumed model.
#[derive(Debug, Clone)]
pub enum Start {
    Fresh,
    /// Resume from parameters after `epochs_done` completed epochs.
    /// Momentum restarts from zero.
    Resume { params: ModelParams, epochs_done: usize },
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
}

/// Trains until `cfg.epochs` epochs have completed. `on_epoch` runs after
/// every epoch with the new history row and parameters (the CLI writes its
/// checkpoint there, so the last good one survives a numeric failure).
pub fn train(
    tuples: &[TrainingTuple],
    validation: Option<&[AnnotatedImage]>,
    shapes: &ShapeSet,
    cfg: &TrainConfig,
    start: Start,
    mut on_epoch: impl FnMut(&EpochRecord, &ModelParams) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if tuples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let (mut params, first_epoch) = match start {
        Start::Fresh => (init_params(&cfg.network.layer_specs(), cfg.seed)?, 0),
        Start::Resume { params, epochs_done } => (params, epochs_done),
    };
    let mut opt = SgdMomentum::new(&params, cfg.momentum);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..tuples.len()).collect();
    let batches_per_epoch = tuples.len().div_ceil(cfg.batch_size);
    let mut batch_counter = first_epoch * batches_per_epoch;
    for epoch in first_epoch..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut fid, mut prior, mut seen) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainingTuple> = chunk.iter().map(|&k| &tuples[k]).collect();
            let (loss, grads) = loss_and_grad(&params, &batch, shapes, cfg).map_err(|e| match e {
                Error::Numeric { detail, .. } => Error::Numeric {
                    batch_index: batch_counter,
                    detail,
                },
                other => other,
            })?;
            let gmax = grads.max_abs();
            if gmax > cfg.grad_ceiling {
                return Err(Error::Numeric {
                    batch_index: batch_counter,
                    detail: format!(
                        "gradient inf-norm {gmax:.3e} exceeds ceiling {:.3e} (fidelity {:.4e}, prior {:.4e})",
                        cfg.grad_ceiling, loss.fidelity, loss.prior
                    ),
                });
            }
            opt.step(&mut params, &grads, lr * cfg.warmup_factor(batch_counter));
            fid += loss.fidelity * batch.len() as f64;
            prior += loss.prior * batch.len() as f64;
            seen += batch.len();
            batch_counter += 1;
        }
        let n = seen as f64;
        let lb = LossBreakdown::new(fid / n, prior / n, cfg.lambda, 0.0);
        let val_f1 = match validation {
            Some(v) if !v.is_empty() => Some(validation_f1(&params, v, cfg.val_threshold)?),
            _ => None,
        };
        let rec = EpochRecord {
            epoch: epoch + 1,
            fidelity: lb.fidelity,
            prior: lb.prior,
            total: lb.total,
            lr,
            val_f1,
        };
        log::info!(
            "epoch {:>3}  fidelity {:.5}  prior {:.4e}  total {:.5}  lr {:.2e}{}",
            rec.epoch,
            rec.fidelity,
            rec.prior,
            rec.total,
            rec.lr,
            rec.val_f1.map(|f| format!("  val_f1 {f:.4}")).unwrap_or_default()
        );
        on_epoch(&rec, &params)?;
        history.push(rec);
    }
    Ok(TrainOutput { params, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_values() {
        let c = TrainConfig::default();
        assert_eq!(c.lambda, 5e-7);
        assert_eq!(c.pool_window, 11);
        assert_eq!(c.prior_threshold, 0.2);
        assert_eq!(c.weight_decay, 1e-5);
        assert_eq!(c.lr_decay, 0.75);
        assert_eq!(c.patch, 40);
        assert_eq!(c.shapes.count, 64);
        assert_eq!(c.shapes.size, 20);
        assert_eq!(c.network.layer_specs(), crate::network::default_architecture());
        c.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.lambda = -1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.pool_window = 10;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.prior_threshold = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_accepts_short_names() {
        let c: TrainConfig = serde_json::from_str(r#"{"lambda": 0.0, "p": 7, "t_p": 0.3, "epochs": 2}"#).unwrap();
        assert_eq!((c.lambda, c.pool_window, c.prior_threshold, c.epochs), (0.0, 7, 0.3, 2));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lamda": 1}"#).is_err());
        let round: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(round, c);
    }

    #[test]
    fn lr_schedule_steps_every_interval() {
        let c = TrainConfig { lr: 1e-3, ..TrainConfig::default() };
        assert_eq!(c.lr_at(0), 1e-3);
        assert_eq!(c.lr_at(4), 1e-3);
        assert_eq!(c.lr_at(5), 1e-3 * 0.75);
        assert_eq!(c.lr_at(12), 1e-3 * 0.75 * 0.75);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let mut c = TrainConfig::default();
        assert_eq!(c.warmup_factor(0), 1.0);
        c.warmup_steps = 4;
        let f: Vec<f64> = (0..6).map(|s| c.warmup_factor(s)).collect();
        assert_eq!(f, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn history_csv_round_trip() {
        let h = vec![
            EpochRecord { epoch: 1, fidelity: 1.5, prior: 2.25e3, total: 1.49, lr: 1e-3, val_f1: None },
            EpochRecord { epoch: 2, fidelity: 0.1, prior: 0.0, total: 0.1, lr: 7.5e-4, val_f1: Some(0.8125) },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        fs::write(&p, history_csv(&h)).unwrap();
        assert_eq!(read_history_csv(&p).unwrap(), h);
        assert!(history_csv(&h).starts_with("epoch,fidelity,prior,total,lr,val_f1\n"));
    }
}
