//! Nucleus shape templates and the shape-prior reward.
//!
//! For a detection map `ŷ`, a binary edge map `x̂` and templates `S_i` the
//! reward is
//!
//! ```text
//! Σ_i ‖ (maxpool_p(threshold_Tp(ŷ)) ⊙ x̂) ⋆ S_i ‖²
//! ```
//!
//! The threshold keeps values `≥ T_p` unchanged and zeroes the rest, the
//! pool is a stride-1 SAME window max, and `⋆` is SAME cross-correlation.
//! The reward is large when confident detections are surrounded by edges
//! that look like nucleus boundaries.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ops::{conv2d_same, conv2d_same_backward, hadamard, maxpool_backward, maxpool_same_stride1, same_pad_before, sq_norm};
use crate::pgm::{read_pgm, write_pgm, Gray8};
use crate::{Error, Result, Tensor};

/// A square binary template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    size: usize,
    pixels: Vec<u8>,
    ones: Vec<(usize, usize)>,
}

impl Template {
    pub fn from_pixels(size: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != size * size {
            return Err(Error::invalid(format!(
                "template of size {size} needs {} pixels, got {}",
                size * size,
                pixels.len()
            )));
        }
        if pixels.iter().any(|&v| v > 1) {
            return Err(Error::invalid("template pixels must be 0 or 1"));
        }
        let ones = (0..size * size)
            .filter(|&k| pixels[k] == 1)
            .map(|k| (k / size, k % size))
            .collect();
        Ok(Template { size, pixels, ones })
    }

    fn from_coords(size: usize, coords: &[(usize, usize)]) -> Self {
        let mut pixels = vec![0u8; size * size];
        for &(i, j) in coords {
            pixels[i * size + j] = 1;
        }
        Template::from_pixels(size, pixels).expect("coords inside template")
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Coordinates of the 1-pixels in raster order.
    pub fn ones(&self) -> &[(usize, usize)] {
        &self.ones
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.pixels[i * self.size + j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Synthetic { seed: u64 },
    Loaded,
}

/// The set of nucleus boundary templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeSet {
    templates: Vec<Template>,
    size: usize,
    provenance: Provenance,
}

impl ShapeSet {
    pub fn new(templates: Vec<Template>, provenance: Provenance) -> Result<Self> {
        let size = templates
            .first()
            .ok_or_else(|| Error::invalid("shape set needs at least one template"))?
            .size;
        if templates.iter().any(|t| t.size != size) {
            return Err(Error::invalid("all templates must share one size"));
        }
        Ok(ShapeSet {
            templates,
            size,
            provenance,
        })
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Templates stacked as an n×1×s×s correlation kernel.
    pub fn as_kernel(&self) -> Tensor {
        let s = self.size;
        let data = self
            .templates
            .iter()
            .flat_map(|t| t.pixels.iter().map(|&v| v as f64))
            .collect();
        Tensor::from_vec([self.len(), 1, s, s], data).expect("consistent template sizes")
    }

    /// The first `n` templates.
    pub fn truncated(&self, n: usize) -> Result<ShapeSet> {
        ShapeSet::new(self.templates[..n.min(self.len())].to_vec(), self.provenance)
    }
}

/// Ellipse centre, semi-axes and rotation angle in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center_row: f64,
    pub center_col: f64,
    pub semi_a: f64,
    pub semi_b: f64,
    pub angle: f64,
}

impl Ellipse {
    /// Implicit value: ≤ 1 inside, 1 on the curve.
    pub fn implicit(&self, row: f64, col: f64) -> f64 {
        let dy = row - self.center_row;
        let dx = col - self.center_col;
        if self.semi_a == self.semi_b {
            // exact mirror symmetry for circles
            return (dx * dx + dy * dy) / (self.semi_a * self.semi_a);
        }
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.semi_a).powi(2) + (v / self.semi_b).powi(2)
    }

    pub fn contains(&self, row: f64, col: f64) -> bool {
        self.implicit(row, col) <= 1.0
    }

    /// Point on the curve at parameter `t`.
    pub fn point(&self, t: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (self.semi_a * t.cos(), self.semi_b * t.sin());
        (self.center_row + u * s + v * c, self.center_col + u * c - v * s)
    }

    /// Approximate Euclidean distance from a point to the curve.
    pub fn distance_to_curve(&self, row: f64, col: f64) -> f64 {
        const SAMPLES: usize = 4096;
        (0..SAMPLES)
            .map(|k| {
                let (r, c) = self.point(k as f64 * std::f64::consts::TAU / SAMPLES as f64);
                ((r - row).powi(2) + (c - col).powi(2)).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Inner boundary of the digitised ellipse within an `height`×`width`
    /// grid: pixels inside the ellipse with at least one 4-neighbour outside,
    /// thinned so that no pixel is a redundant corner of the 8-connected
    /// curve. Returned in raster order.
    pub fn boundary_pixels(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        let ext = self.semi_a.max(self.semi_b) + 2.0;
        let r0 = (self.center_row - ext).floor().max(0.0) as usize;
        let c0 = (self.center_col - ext).floor().max(0.0) as usize;
        let r1 = ((self.center_row + ext).ceil() as usize).min(height.saturating_sub(1));
        let c1 = ((self.center_col + ext).ceil() as usize).min(width.saturating_sub(1));
        if r0 > r1 || c0 > c1 {
            return Vec::new();
        }
        let (bh, bw) = (r1 - r0 + 1, c1 - c0 + 1);
        let inside = |i: isize, j: isize| -> bool {
            i >= 0
                && j >= 0
                && (i as usize) < bh
                && (j as usize) < bw
                && self.contains((i as usize + r0) as f64, (j as usize + c0) as f64)
        };
        let mut on = vec![false; bh * bw];
        for i in 0..bh as isize {
            for j in 0..bw as isize {
                if inside(i, j)
                    && (!inside(i - 1, j) || !inside(i + 1, j) || !inside(i, j - 1) || !inside(i, j + 1))
                {
                    on[i as usize * bw + j as usize] = true;
                }
            }
        }
        thin_corners(&mut on, bh, bw);
        let mut out = Vec::new();
        for i in 0..bh {
            for j in 0..bw {
                if on[i * bw + j] {
                    out.push((i + r0, j + c0));
                }
            }
        }
        out
    }
}

fn neighbours8(on: &[bool], h: usize, w: usize, i: usize, j: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    (-1isize..=1)
        .flat_map(|di| (-1isize..=1).map(move |dj| (di, dj)))
        .filter(|&d| d != (0, 0))
        .filter_map(move |(di, dj)| {
            let (ni, nj) = (i as isize + di, j as isize + dj);
            (ni >= 0 && nj >= 0 && (ni as usize) < h && (nj as usize) < w && on[ni as usize * w + nj as usize])
                .then_some((ni as usize, nj as usize))
        })
}

/// Removes pixels whose only two neighbours are a horizontal and a vertical
/// 4-neighbour (those two already touch diagonally).
fn thin_corners(on: &mut [bool], h: usize, w: usize) {
    loop {
        let mut changed = false;
        for i in 0..h {
            for j in 0..w {
                if !on[i * w + j] {
                    continue;
                }
                let nb: Vec<_> = neighbours8(on, h, w, i, j).collect();
                if nb.len() != 2 {
                    continue;
                }
                let (a, b) = (nb[0], nb[1]);
                let four = |p: (usize, usize)| p.0 == i || p.1 == j;
                let perpendicular = four(a) && four(b) && (a.0 == i) != (b.0 == i);
                let a_has_third = neighbours8(on, h, w, a.0, a.1).count() > 2;
                let b_has_third = neighbours8(on, h, w, b.0, b.1).count() > 2;
                if perpendicular && a_has_third && b_has_third {
                    on[i * w + j] = false;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

/// True when the 1-pixels form a single closed curve in which every pixel has
/// exactly two 8-connected neighbours.
pub fn is_closed_curve(pixels: &[u8], height: usize, width: usize) -> bool {
    let on: Vec<bool> = pixels.iter().map(|&v| v != 0).collect();
    let total = on.iter().filter(|&&v| v).count();
    if total < 4 {
        return false;
    }
    for i in 0..height {
        for j in 0..width {
            if on[i * width + j] && neighbours8(&on, height, width, i, j).count() != 2 {
                return false;
            }
        }
    }
    // single component
    let start = on.iter().position(|&v| v).unwrap();
    let mut seen = vec![false; on.len()];
    let mut stack = vec![(start / width, start % width)];
    seen[start] = true;
    let mut count = 0;
    while let Some((i, j)) = stack.pop() {
        count += 1;
        for (ni, nj) in neighbours8(&on, height, width, i, j) {
            if !seen[ni * width + nj] {
                seen[ni * width + nj] = true;
                stack.push((ni, nj));
            }
        }
    }
    count == total
}

/// Boundary template of an ellipse centred in an `size`×`size` patch.
pub fn ellipse_template(size: usize, semi_a: f64, semi_b: f64, angle: f64) -> Template {
    let c = (size as f64 - 1.0) / 2.0;
    let e = Ellipse {
        center_row: c,
        center_col: c,
        semi_a,
        semi_b,
        angle,
    };
    Template::from_coords(size, &e.boundary_pixels(size, size))
}

/// `n` synthetic nucleus boundaries: ellipses with semi-axes drawn from
/// [0.25·s, 0.45·s] and rotation from [0, π), centred in `s`×`s` patches.
/// Draws whose rasterisation is not a clean closed curve are redrawn.
pub fn generate_shape_set(seed: u64, n: usize, size: usize) -> Result<ShapeSet> {
    if size < 8 {
        return Err(Error::invalid(format!("template size must be >= 8, got {size}")));
    }
    if n == 0 {
        return Err(Error::invalid("shape set needs at least one template"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (0.25 * size as f64, 0.45 * size as f64);
    let mut templates = Vec::with_capacity(n);
    while templates.len() < n {
        let a = rng.random_range(lo..=hi);
        let b = rng.random_range(lo..=hi);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let t = ellipse_template(size, a, b, angle);
        if is_closed_curve(&t.pixels, size, size) {
            templates.push(t);
        }
    }
    ShapeSet::new(templates, Provenance::Synthetic { seed })
}

/// Loads every `*.pgm` in `dir` (sorted by file name) as a template; levels
/// 0 and 255 map to 0 and 1, anything else is rejected.
pub fn load_shape_set(dir: &Path) -> Result<ShapeSet> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::format(dir, "no .pgm templates found"));
    }
    let mut templates = Vec::with_capacity(paths.len());
    for p in &paths {
        let g = read_pgm(p)?;
        if g.height != g.width {
            return Err(Error::format(p, format!("template must be square, got {}x{}", g.height, g.width)));
        }
        let mut pixels = Vec::with_capacity(g.data.len());
        for &v in &g.data {
            pixels.push(match v {
                0 => 0,
                255 => 1,
                other => return Err(Error::format(p, format!("template level {other} is not 0 or 255"))),
            });
        }
        templates.push(Template::from_pixels(g.height, pixels)?);
    }
    ShapeSet::new(templates, Provenance::Loaded).map_err(|e| Error::format(dir, e.to_string()))
}

pub fn save_shape_set(dir: &Path, set: &ShapeSet) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, t) in set.templates.iter().enumerate() {
        let g = Gray8 {
            height: t.size,
            width: t.size,
            data: t.pixels.iter().map(|&v| v * 255).collect(),
        };
        write_pgm(&dir.join(format!("shape_{k:03}.pgm")), &g)?;
    }
    Ok(())
}

/// Keeps values `≥ threshold` and zeroes the rest.
pub fn threshold_mask(yhat: &Tensor, threshold: f64) -> Tensor {
    yhat.map(|v| if v >= threshold { v } else { 0.0 })
}

/// Reward value and its gradient with respect to the detection map.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorTermResult {
    pub value: f64,
    pub grad: Tensor,
}

fn check_prior_inputs(yhat: &Tensor, edges: &Tensor, window: usize) -> Result<()> {
    yhat.ensure_same_shape(edges, "shape prior: detection map vs edge map")?;
    if yhat.channels() != 1 {
        return Err(Error::invalid(format!(
            "shape prior expects 1-channel maps, got {}",
            yhat.channels()
        )));
    }
    if window.is_multiple_of(2) {
        return Err(Error::invalid(format!("pool window must be odd, got {window}")));
    }
    Ok(())
}

/// The shape-prior reward summed over the batch, with its exact gradient.
///
/// The correlation is evaluated sparsely: only pixels where the masked edge
/// map is non-zero contribute to the forward pass, and only edge pixels can
/// receive gradient on the way back.
pub fn prior_term(
    yhat: &Tensor,
    edges: &Tensor,
    shapes: &ShapeSet,
    window: usize,
    threshold: f64,
) -> Result<PriorTermResult> {
    check_prior_inputs(yhat, edges, window)?;
    let [batch, _, h, w] = yhat.shape();
    let hw = h * w;
    let pad = same_pad_before(shapes.size) as isize;

    let thresholded = threshold_mask(yhat, threshold);
    let (pooled, argmax) = maxpool_same_stride1(&thresholded, window)?;
    let masked = hadamard(&pooled, edges)?;

    let mut value = 0.0;
    let mut d_pooled = Tensor::zeros(yhat.shape());
    let mut z = vec![0.0; hw];
    for n in 0..batch {
        let m = masked.plane(n, 0);
        let e = edges.plane(n, 0);
        let nonzero: Vec<usize> = (0..hw).filter(|&k| m[k] != 0.0).collect();
        if nonzero.is_empty() {
            continue;
        }
        let edge_px: Vec<usize> = (0..hw).filter(|&k| e[k] != 0.0).collect();
        let dp = d_pooled.plane_mut(n, 0);
        for t in shapes.templates() {
            z.iter_mut().for_each(|v| *v = 0.0);
            // z[p] = Σ_(u,v) m[p + (u,v) - pad]  over template ones
            for &q in &nonzero {
                let (qi, qj) = ((q / w) as isize, (q % w) as isize);
                let mv = m[q];
                for &(u, v) in t.ones() {
                    let pi = qi - u as isize + pad;
                    let pj = qj - v as isize + pad;
                    if pi >= 0 && pj >= 0 && (pi as usize) < h && (pj as usize) < w {
                        z[pi as usize * w + pj as usize] += mv;
                    }
                }
            }
            value += z.iter().map(|v| v * v).sum::<f64>();
            // d m[q] = Σ_(u,v) 2 z[q - (u,v) + pad], needed only where x̂ ≠ 0
            for &q in &edge_px {
                let (qi, qj) = ((q / w) as isize, (q % w) as isize);
                let mut acc = 0.0;
                for &(u, v) in t.ones() {
                    let pi = qi - u as isize + pad;
                    let pj = qj - v as isize + pad;
                    if pi >= 0 && pj >= 0 && (pi as usize) < h && (pj as usize) < w {
                        acc += z[pi as usize * w + pj as usize];
                    }
                }
                dp[q] += 2.0 * acc * e[q];
            }
        }
    }
    let d_thresholded = maxpool_backward(&argmax, &d_pooled)?;
    let grad = gate(&d_thresholded, yhat, threshold);
    Ok(PriorTermResult { value, grad })
}

/// Same quantity as [`prior_term`], composed directly from the dense tensor
/// primitives. Slower; used as an independent cross-check.
pub fn prior_term_dense(
    yhat: &Tensor,
    edges: &Tensor,
    shapes: &ShapeSet,
    window: usize,
    threshold: f64,
) -> Result<PriorTermResult> {
    check_prior_inputs(yhat, edges, window)?;
    let kernel = shapes.as_kernel();
    let zero_bias = vec![0.0; shapes.len()];
    let thresholded = threshold_mask(yhat, threshold);
    let (pooled, argmax) = maxpool_same_stride1(&thresholded, window)?;
    let masked = hadamard(&pooled, edges)?;
    let z = conv2d_same(&masked, &kernel, &zero_bias)?;
    let value = sq_norm(&z);
    let upstream = z.map(|v| 2.0 * v);
    let d_masked = conv2d_same_backward(&masked, &kernel, &upstream)?.input;
    let d_pooled = hadamard(&d_masked, edges)?;
    let d_thresholded = maxpool_backward(&argmax, &d_pooled)?;
    Ok(PriorTermResult {
        value,
        grad: gate(&d_thresholded, yhat, threshold),
    })
}

/// Multiplies by the indicator `ŷ ≥ threshold`.
fn gate(grad: &Tensor, yhat: &Tensor, threshold: f64) -> Tensor {
    let data = grad
        .data()
        .iter()
        .zip(yhat.data())
        .map(|(&g, &y)| if y >= threshold { g } else { 0.0 })
        .collect();
    Tensor::from_vec(grad.shape(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_set_is_deterministic_and_closed() {
        let a = generate_shape_set(11, 64, 20).unwrap();
        let b = generate_shape_set(11, 64, 20).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        assert_eq!(a.size(), 20);
        assert_ne!(a, generate_shape_set(12, 64, 20).unwrap());
        for t in a.templates() {
            assert!(is_closed_curve(t.pixels(), 20, 20));
            assert!(t.ones().len() >= 20);
        }
    }

    #[test]
    fn rejects_small_templates() {
        assert!(generate_shape_set(1, 4, 7).is_err());
        assert!(generate_shape_set(1, 0, 20).is_err());
    }

    #[test]
    fn circle_template_has_fourfold_symmetry() {
        for r in [5.0, 6.5, 7.0, 8.0, 9.0] {
            let t = ellipse_template(20, r, r, 0.3);
            let s = 20;
            for i in 0..s {
                for j in 0..s {
                    let v = t.get(i, j);
                    assert_eq!(v, t.get(s - 1 - i, j), "r={r} row flip at ({i},{j})");
                    assert_eq!(v, t.get(i, s - 1 - j), "r={r} col flip");
                    assert_eq!(v, t.get(j, i), "r={r} transpose");
                }
            }
            assert!(is_closed_curve(t.pixels(), s, s), "circle r={r} not closed");
        }
    }

    #[test]
    fn closed_curve_audit_rejects_open_and_thick_sets() {
        // a straight segment is open
        let mut px = vec![0u8; 100];
        for j in 2..8 {
            px[5 * 10 + j] = 1;
        }
        assert!(!is_closed_curve(&px, 10, 10));
        // a filled 3x3 block is not a thin curve
        let mut px = vec![0u8; 100];
        for i in 3..6 {
            for j in 3..6 {
                px[i * 10 + j] = 1;
            }
        }
        assert!(!is_closed_curve(&px, 10, 10));
        // a diamond is a closed 8-curve
        let mut px = vec![0u8; 100];
        for &(i, j) in &[(2, 5), (3, 4), (4, 3), (5, 4), (6, 5), (5, 6), (4, 7), (3, 6)] {
            px[i * 10 + j] = 1;
        }
        assert!(is_closed_curve(&px, 10, 10));
    }

    #[test]
    fn threshold_mask_examples() {
        let y = Tensor::from_vec([1, 1, 1, 4], vec![0.1, 0.2, 0.5, -0.3]).unwrap();
        assert_eq!(threshold_mask(&y, 0.2).data(), &[0.0, 0.2, 0.5, 0.0]);
        assert_eq!(threshold_mask(&y, 0.9).max_abs(), 0.0);
        assert_eq!(threshold_mask(&y, -1.0), y);
    }

    #[test]
    fn prior_vanishes_without_detections_or_edges() {
        let shapes = generate_shape_set(1, 4, 20).unwrap();
        let edges = Tensor::filled([1, 1, 24, 24], 1.0);
        let r = prior_term(&Tensor::zeros([1, 1, 24, 24]), &edges, &shapes, 11, 0.2).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.grad.max_abs(), 0.0);
        let y = Tensor::filled([1, 1, 24, 24], 0.8);
        let r = prior_term(&y, &Tensor::zeros([1, 1, 24, 24]), &shapes, 11, 0.2).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.grad.max_abs(), 0.0);
    }

    #[test]
    fn prior_rejects_bad_inputs() {
        let shapes = generate_shape_set(1, 2, 20).unwrap();
        let y = Tensor::zeros([1, 1, 10, 10]);
        assert!(prior_term(&y, &Tensor::zeros([1, 1, 10, 9]), &shapes, 11, 0.2).is_err());
        assert!(prior_term(&y, &y, &shapes, 10, 0.2).is_err());
    }

    #[test]
    fn template_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = generate_shape_set(3, 5, 20).unwrap();
        save_shape_set(dir.path(), &set).unwrap();
        let loaded = load_shape_set(dir.path()).unwrap();
        assert_eq!(loaded.provenance(), Provenance::Loaded);
        assert_eq!(loaded.templates(), set.templates());
        assert!(load_shape_set(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn loader_rejects_grey_levels() {
        let dir = tempfile::tempdir().unwrap();
        let g = Gray8 {
            height: 8,
            width: 8,
            data: vec![128; 64],
        };
        write_pgm(&dir.path().join("bad.pgm"), &g).unwrap();
        let err = load_shape_set(dir.path()).unwrap_err();
        assert!(err.to_string().contains("bad.pgm"), "{err}");
    }
}
