//! Finite-difference verification of every analytic gradient.
//!
//! Each component is reduced to a scalar (a random linear functional of its
//! output, or the loss itself) and every input entry is probed with central
//! differences. Probes where a non-differentiable decision flips between the
//! base point and `±ε` (ReLU sign, max-pool argmax, prior threshold gate) are
//! skipped and counted.
//!
//! The error of one entry is `|a − n| / max(|a|, |n|, floor)` where the floor
//! is `floor_fraction` times the largest analytic magnitude in that
//! component, so entries that are numerically zero are judged on the scale
//! of the component instead of on round-off.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::TrainingTuple;
use crate::network::{architecture, backward, forward, he_uniform, ModelParams};
use crate::ops::{
    conv2d_same, conv2d_same_backward, hadamard, maxpool_backward, maxpool_same_stride1, relu, relu_backward,
};
use crate::shape_prior::{generate_shape_set, prior_term, threshold_mask, ShapeSet};
use crate::train::{loss_and_grad_impl, weight_decay_penalty, TrainConfig};
use crate::{Image, Result, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub seeds: Vec<u64>,
    pub eps: f64,
    pub tolerance: f64,
    pub floor_fraction: f64,
    /// A component fails when more than this fraction of probes is skipped.
    pub max_skip_fraction: f64,
    /// Prior weight used for the total-loss check. Zero skips the prior rows.
    pub lambda: f64,
    /// Negates the analytic prior gradient; used to confirm the check bites.
    pub flip_prior_sign: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seeds: (0..20).collect(),
            eps: 1e-5,
            tolerance: 1e-4,
            floor_fraction: 1e-6,
            max_skip_fraction: 0.1,
            lambda: 1e-3,
            flip_prior_sign: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub seeds: usize,
    pub components: Vec<ComponentReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.status != Status::Fail)
    }

    pub fn component(&self, name: &str) -> Option<&ComponentReport> {
        self.components.iter().find(|c| c.name == name)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<16} {:>12} {:>8} {:>8}  status\n", "component", "max_rel_err", "checked", "skipped");
        for c in &self.components {
            let st = match c.status {
                Status::Pass => "PASS",
                Status::Fail => "FAIL",
                Status::Skipped => "SKIPPED",
            };
            s.push_str(&format!(
                "{:<16} {:>12.3e} {:>8} {:>8}  {st}\n",
                c.name, c.max_rel_error, c.checked, c.skipped
            ));
        }
        s
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Stats {
    max_err: f64,
    checked: usize,
    skipped: usize,
}

impl Stats {
    fn merge(&mut self, o: Stats) {
        self.max_err = self.max_err.max(o.max_err);
        self.checked += o.checked;
        self.skipped += o.skipped;
    }
}

/// Scalar value of a probe plus a fingerprint of its discrete decisions.
struct Probe {
    value: f64,
    pattern: u64,
}

fn fingerprint<T: Hash>(items: impl IntoIterator<Item = T>) -> u64 {
    let mut h = DefaultHasher::new();
    for it in items {
        it.hash(&mut h);
    }
    h.finish()
}

fn fd_compare(
    x0: &[f64],
    analytic: &[f64],
    eps: f64,
    floor_fraction: f64,
    f: impl Fn(&[f64]) -> Result<Probe>,
) -> Result<Stats> {
    assert_eq!(x0.len(), analytic.len());
    let base = f(x0)?.pattern;
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (floor_fraction * scale).max(f64::MIN_POSITIVE);
    let mut st = Stats::default();
    let mut x = x0.to_vec();
    for i in 0..x.len() {
        x[i] = x0[i] + eps;
        let p = f(&x)?;
        x[i] = x0[i] - eps;
        let m = f(&x)?;
        x[i] = x0[i];
        if p.pattern != base || m.pattern != base {
            st.skipped += 1;
            continue;
        }
        let n = (p.value - m.value) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        st.max_err = st.max_err.max(err);
        st.checked += 1;
    }
    Ok(st)
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn with_data(shape: [usize; 4], v: &[f64]) -> Tensor {
    Tensor::from_vec(shape, v.to_vec()).expect("shape matches")
}

fn check_conv(rng: &mut ChaCha8Rng, c: &GradCheckConfig) -> Result<Stats> {
    let mut st = Stats::default();
    for kshape in [[4, 3, 3, 5], [2, 3, 4, 4]] {
        let x = uniform_tensor(rng, [2, 3, 7, 6], -1.0, 1.0);
        let k = uniform_tensor(rng, kshape, -1.0, 1.0);
        let b: Vec<f64> = (0..kshape[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = uniform_tensor(rng, [2, kshape[0], 7, 6], -1.0, 1.0);
        let g = conv2d_same_backward(&x, &k, &r)?;
        let probe = |xv: &Tensor, kv: &Tensor, bv: &[f64]| -> Result<Probe> {
            Ok(Probe {
                value: dot(&conv2d_same(xv, kv, bv)?, &r),
                pattern: 0,
            })
        };
        st.merge(fd_compare(x.data(), g.input.data(), c.eps, c.floor_fraction, |v| {
            probe(&with_data(x.shape(), v), &k, &b)
        })?);
        st.merge(fd_compare(k.data(), g.kernel.data(), c.eps, c.floor_fraction, |v| {
            probe(&x, &with_data(k.shape(), v), &b)
        })?);
        st.merge(fd_compare(&b, &g.bias, c.eps, c.floor_fraction, |v| probe(&x, &k, v))?);
    }
    Ok(st)
}

fn check_relu(rng: &mut ChaCha8Rng, c: &GradCheckConfig) -> Result<Stats> {
    let shape = [2, 3, 5, 5];
    let x = uniform_tensor(rng, shape, -1.0, 1.0);
    let r = uniform_tensor(rng, shape, -1.0, 1.0);
    let g = relu_backward(&x, &r)?;
    fd_compare(x.data(), g.data(), c.eps, c.floor_fraction, |v| {
        let t = with_data(shape, v);
        Ok(Probe {
            value: dot(&relu(&t), &r),
            pattern: fingerprint(v.iter().map(|&z| z > 0.0)),
        })
    })
}

fn check_maxpool(rng: &mut ChaCha8Rng, c: &GradCheckConfig) -> Result<Stats> {
    let mut st = Stats::default();
    for window in [3, 5] {
        let shape = [2, 2, 9, 8];
        let x = uniform_tensor(rng, shape, -1.0, 1.0);
        let r = uniform_tensor(rng, shape, -1.0, 1.0);
        let (_, am) = maxpool_same_stride1(&x, window)?;
        let g = maxpool_backward(&am, &r)?;
        st.merge(fd_compare(x.data(), g.data(), c.eps, c.floor_fraction, |v| {
            let (y, am) = maxpool_same_stride1(&with_data(shape, v), window)?;
            Ok(Probe {
                value: dot(&y, &r),
                pattern: fingerprint(am.indices()),
            })
        })?);
    }
    Ok(st)
}

fn check_hadamard(rng: &mut ChaCha8Rng, c: &GradCheckConfig) -> Result<Stats> {
    let shape = [2, 2, 6, 7];
    let a = uniform_tensor(rng, shape, -1.0, 1.0);
    let b = uniform_tensor(rng, shape, -1.0, 1.0);
    let r = uniform_tensor(rng, shape, -1.0, 1.0);
    let ga = hadamard(&r, &b)?;
    let gb = hadamard(&r, &a)?;
    let mut st = fd_compare(a.data(), ga.data(), c.eps, c.floor_fraction, |v| {
        Ok(Probe {
            value: dot(&hadamard(&with_data(shape, v), &b)?, &r),
            pattern: 0,
        })
    })?;
    st.merge(fd_compare(b.data(), gb.data(), c.eps, c.floor_fraction, |v| {
        Ok(Probe {
            value: dot(&hadamard(&a, &with_data(shape, v))?, &r),
            pattern: 0,
        })
    })?);
    Ok(st)
}

fn relu_pattern(params: &ModelParams, x: &Tensor) -> Result<(Tensor, u64)> {
    let (y, cache) = forward(params, x)?;
    let pattern = fingerprint(
        cache
            .preactivations()
            .iter()
            .zip(&params.layers)
            .filter(|(_, l)| l.spec.relu)
            .flat_map(|(z, _)| z.data().iter().map(|&v| v > 0.0)),
    );
    Ok((y, pattern))
}

fn check_network(rng: &mut ChaCha8Rng, c: &GradCheckConfig) -> Result<Stats> {
    let specs = architecture(6, 4, 5, 3);
    let params = he_uniform(&specs, rng.random())?;
    let x = uniform_tensor(rng, [2, 1, 8, 8], 0.0, 1.0);
    let r = uniform_tensor(rng, [2, 1, 8, 8], -1.0, 1.0);
    let (_, cache) = forward(&params, &x)?;
    let g = backward(&params, &cache, &r)?;
    fd_compare(&params.flatten(), &g.flatten(), c.eps, c.floor_fraction, |v| {
        let mut p = params.clone();
        p.assign_flat(v)?;
        let (y, pattern) = relu_pattern(&p, &x)?;
        Ok(Probe {
            value: dot(&y, &r),
            pattern,
        })
    })
}

/// Prior pattern: threshold gate plus the argmax of the pooled masked map.
fn prior_pattern(yhat: &Tensor, window: usize, threshold: f64) -> Result<u64> {
    let (_, am) = maxpool_same_stride1(&threshold_mask(yhat, threshold), window)?;
    let gate = yhat.data().iter().map(|&v| v >= threshold);
    Ok(fingerprint(gate).wrapping_mul(31) ^ fingerprint(am.indices()))
}

fn random_edges(rng: &mut ChaCha8Rng, shape: [usize; 4], p: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect())
        .expect("shape matches")
}

const PRIOR_WINDOW: usize = 5;
const PRIOR_THRESHOLD: f64 = 0.2;

fn small_shapes(seed: u64) -> Result<ShapeSet> {
    generate_shape_set(seed, 4, 8)
}

fn check_prior(rng: &mut ChaCha8Rng, c: &GradCheckConfig) -> Result<Stats> {
    let shape = [2, 1, 16, 16];
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(0.0..1.0);
            if (v - PRIOR_THRESHOLD).abs() > 1e-3 {
                break v;
            }
        })
        .collect();
    let yhat = with_data(shape, &data);
    let edges = random_edges(rng, shape, 0.35);
    let shapes = small_shapes(rng.random())?;
    let res = prior_term(&yhat, &edges, &shapes, PRIOR_WINDOW, PRIOR_THRESHOLD)?;
    let sign = if c.flip_prior_sign { -1.0 } else { 1.0 };
    let analytic: Vec<f64> = res.grad.data().iter().map(|g| sign * g).collect();
    fd_compare(&data, &analytic, c.eps, c.floor_fraction, |v| {
        let y = with_data(shape, v);
        Ok(Probe {
            value: prior_term(&y, &edges, &shapes, PRIOR_WINDOW, PRIOR_THRESHOLD)?.value,
            pattern: prior_pattern(&y, PRIOR_WINDOW, PRIOR_THRESHOLD)?,
        })
    })
}

fn check_total(rng: &mut ChaCha8Rng, c: &GradCheckConfig) -> Result<Stats> {
    let specs = architecture(2, 3, 5, 3);
    let mut params = he_uniform(&specs, rng.random())?;
    if let Some(last) = params.layers.last_mut() {
        last.bias.iter_mut().for_each(|b| *b = 0.25);
    }
    let shapes = small_shapes(rng.random())?;
    let size = 12;
    let tuples: Vec<TrainingTuple> = (0..2)
        .map(|_| {
            let x = random_image(rng, size);
            let y = random_image(rng, size);
            let e = random_edges(rng, [1, 1, size, size], 0.35).to_image(0, 0);
            TrainingTuple {
                x,
                edges: e,
                y,
                origin: (0, 0),
            }
        })
        .collect();
    let batch: Vec<&TrainingTuple> = tuples.iter().collect();
    let cfg = TrainConfig {
        lambda: c.lambda,
        pool_window: PRIOR_WINDOW,
        prior_threshold: PRIOR_THRESHOLD,
        weight_decay: 1e-5,
        ..TrainConfig::default()
    };
    let (_, g) = loss_and_grad_impl(&params, &batch, &shapes, &cfg, c.flip_prior_sign)?;
    let inputs: Vec<Tensor> = tuples.iter().map(|t| Tensor::from_image(&t.x)).collect();
    fd_compare(&params.flatten(), &g.flatten(), c.eps, c.floor_fraction, |v| {
        let mut p = params.clone();
        p.assign_flat(v)?;
        let (loss, _) = loss_and_grad_impl(&p, &batch, &shapes, &cfg, false)?;
        let mut pattern = 0u64;
        for x in &inputs {
            let (y, rp) = relu_pattern(&p, x)?;
            pattern = pattern.wrapping_mul(1_000_003) ^ rp ^ prior_pattern(&y, PRIOR_WINDOW, PRIOR_THRESHOLD)?;
        }
        Ok(Probe {
            value: loss.total + weight_decay_penalty(&p, cfg.weight_decay),
            pattern,
        })
    })
}

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let data = (0..size * size).map(|_| rng.random_range(0.0..1.0)).collect();
    Image::from_vec(size, size, data).expect("size matches")
}

type Checker = fn(&mut ChaCha8Rng, &GradCheckConfig) -> Result<Stats>;

/// Runs every component on every seed and reports the worst error of each.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let prior_on = cfg.lambda != 0.0;
    let checks: [(&str, Checker, bool); 7] = [
        ("conv2d", check_conv, true),
        ("relu", check_relu, true),
        ("maxpool", check_maxpool, true),
        ("hadamard", check_hadamard, true),
        ("network", check_network, true),
        ("prior_term", check_prior, prior_on),
        ("total_loss", check_total, true),
    ];
    let mut components = Vec::new();
    for (k, (name, check, enabled)) in checks.into_iter().enumerate() {
        if !enabled {
            components.push(ComponentReport {
                name: name.to_string(),
                max_rel_error: 0.0,
                checked: 0,
                skipped: 0,
                status: Status::Skipped,
            });
            continue;
        }
        let mut st = Stats::default();
        for &seed in &cfg.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            st.merge(check(&mut rng, cfg)?);
        }
        let total = st.checked + st.skipped;
        let too_many_skips = total > 0 && st.skipped as f64 > cfg.max_skip_fraction * total as f64;
        let status = if st.checked == 0 || too_many_skips || !(st.max_err <= cfg.tolerance) {
            Status::Fail
        } else {
            Status::Pass
        };
        log::debug!("{name}: max err {:.3e}, {} checked, {} skipped", st.max_err, st.checked, st.skipped);
        components.push(ComponentReport {
            name: name.to_string(),
            max_rel_error: st.max_err,
            checked: st.checked,
            skipped: st.skipped,
            status,
        });
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        seeds: cfg.seeds.len(),
        components,
    })
}
