//! Canny edge detection producing the binary raw edge map.
//!
//! Stages: Gaussian smoothing (kernel truncated at ⌈3σ⌉, replicated
//! borders), 3×3 Sobel gradients, non-maximum suppression along the gradient
//! direction quantised to 0°/45°/90°/135°, and hysteresis with
//! 8-connectivity.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::{Error, Image, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Thresholds are fractions of the largest gradient magnitude.
    Relative,
    /// Thresholds are gradient magnitudes.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CannyParams {
    pub sigma: f64,
    pub low: f64,
    pub high: f64,
    pub mode: ThresholdMode,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams {
            sigma: 1.4,
            low: 0.1,
            high: 0.2,
            mode: ThresholdMode::Relative,
        }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::invalid(format!("canny sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.low > 0.0 && self.low < self.high) {
            return Err(Error::invalid(format!(
                "canny thresholds need 0 < low < high, got low={} high={}",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

/// Binary edge image: 1 on edges, 0 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap(Image);

impl EdgeMap {
    pub fn from_image(img: Image) -> Result<Self> {
        if img.data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("edge map values must be 0 or 1"));
        }
        Ok(EdgeMap(img))
    }

    pub fn image(&self) -> &Image {
        &self.0
    }

    pub fn into_image(self) -> Image {
        self.0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_image(&self.0)
    }

    pub fn count(&self) -> usize {
        self.0.data.iter().filter(|&&v| v != 0.0).count()
    }

    #[inline]
    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        self.0.get(i, j) != 0.0
    }
}

/// Quantised gradient direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Deg0,
    Deg45,
    Deg90,
    Deg135,
}

impl Direction {
    fn quantize(gx: f64, gy: f64) -> Self {
        let mut deg = gy.atan2(gx).to_degrees();
        if deg < 0.0 {
            deg += 180.0;
        }
        if !(22.5..157.5).contains(&deg) {
            Direction::Deg0
        } else if deg < 67.5 {
            Direction::Deg45
        } else if deg < 112.5 {
            Direction::Deg90
        } else {
            Direction::Deg135
        }
    }

    /// Row/column step towards the neighbour in the positive gradient direction
    /// (rows grow downwards).
    pub fn step(self) -> (isize, isize) {
        match self {
            Direction::Deg0 => (0, 1),
            Direction::Deg45 => (1, 1),
            Direction::Deg90 => (1, 0),
            Direction::Deg135 => (1, -1),
        }
    }
}

/// Everything computed on the way to the edge map.
#[derive(Debug, Clone)]
pub struct CannyStages {
    pub smoothed: Image,
    pub magnitude: Image,
    pub direction: Vec<Direction>,
    /// Magnitude after non-maximum suppression (0 where suppressed).
    pub suppressed: Image,
    pub low: f64,
    pub high: f64,
    pub edges: EdgeMap,
}

pub fn canny(img: &Image, params: &CannyParams) -> Result<EdgeMap> {
    Ok(canny_stages(img, params)?.edges)
}

pub fn canny_stages(img: &Image, params: &CannyParams) -> Result<CannyStages> {
    params.validate()?;
    if img.height == 0 || img.width == 0 {
        return Err(Error::invalid("canny: empty image"));
    }
    let smoothed = gaussian_blur(img, params.sigma);
    let (magnitude, direction) = sobel(&smoothed);
    let suppressed = non_max_suppression(&magnitude, &direction);
    let (low, high) = match params.mode {
        ThresholdMode::Relative => {
            let m = magnitude.max();
            (params.low * m, params.high * m)
        }
        ThresholdMode::Absolute => (params.low, params.high),
    };
    let edges = hysteresis(&suppressed, low, high);
    Ok(CannyStages {
        smoothed,
        magnitude,
        direction,
        suppressed,
        low,
        high,
        edges,
    })
}

/// Normalised 1-D Gaussian truncated at radius ⌈3σ⌉.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (img.height, img.width);
    let mut tmp = Image::new(h, w);
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * img.get_clamped(i as isize, j as isize + t as isize - r);
            }
            tmp.set(i, j, acc);
        }
    }
    let mut out = Image::new(h, w);
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * tmp.get_clamped(i as isize + t as isize - r, j as isize);
            }
            out.set(i, j, acc);
        }
    }
    out
}

fn sobel(img: &Image) -> (Image, Vec<Direction>) {
    let (h, w) = (img.height, img.width);
    let mut mag = Image::new(h, w);
    let mut dir = Vec::with_capacity(h * w);
    for i in 0..h as isize {
        for j in 0..w as isize {
            let p = |di: isize, dj: isize| img.get_clamped(i + di, j + dj);
            let gx = (p(-1, 1) - p(-1, -1)) + 2.0 * (p(0, 1) - p(0, -1)) + (p(1, 1) - p(1, -1));
            let gy = (p(1, -1) - p(-1, -1)) + 2.0 * (p(1, 0) - p(-1, 0)) + (p(1, 1) - p(-1, 1));
            mag.set(i as usize, j as usize, gx.hypot(gy));
            dir.push(Direction::quantize(gx, gy));
        }
    }
    (mag, dir)
}

/// Keeps a pixel when its magnitude is positive, strictly above the
/// neighbour behind it and at least the neighbour ahead of it along the
/// gradient direction. The asymmetric comparison leaves exactly one pixel
/// on two-pixel plateaus.
fn non_max_suppression(mag: &Image, dir: &[Direction]) -> Image {
    let (h, w) = (mag.height, mag.width);
    let at = |i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            mag.get(i as usize, j as usize)
        }
    };
    let mut out = Image::new(h, w);
    for i in 0..h {
        for j in 0..w {
            let m = mag.get(i, j);
            if m <= 0.0 {
                continue;
            }
            let (di, dj) = dir[i * w + j].step();
            let (ii, jj) = (i as isize, j as isize);
            let ahead = at(ii + di, jj + dj);
            let behind = at(ii - di, jj - dj);
            if m > behind && m >= ahead {
                out.set(i, j, m);
            }
        }
    }
    out
}

fn hysteresis(suppressed: &Image, low: f64, high: f64) -> EdgeMap {
    let (h, w) = (suppressed.height, suppressed.width);
    let mut out = Image::new(h, w);
    let mut queue = VecDeque::new();
    for k in 0..h * w {
        let v = suppressed.data[k];
        if v > 0.0 && v >= high {
            out.data[k] = 1.0;
            queue.push_back(k);
        }
    }
    while let Some(k) = queue.pop_front() {
        let (i, j) = ((k / w) as isize, (k % w) as isize);
        for di in -1..=1 {
            for dj in -1..=1 {
                let (ni, nj) = (i + di, j + dj);
                if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                    continue;
                }
                let nk = ni as usize * w + nj as usize;
                let v = suppressed.data[nk];
                if out.data[nk] == 0.0 && v > 0.0 && v >= low {
                    out.data[nk] = 1.0;
                    queue.push_back(nk);
                }
            }
        }
    }
    EdgeMap(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_no_edges() {
        let img = Image::from_fn(20, 20, |_, _| 0.37);
        assert_eq!(canny(&img, &CannyParams::default()).unwrap().count(), 0);
    }

    #[test]
    fn vertical_step_gives_one_line() {
        let img = Image::from_fn(24, 24, |_, j| if j < 12 { 0.0 } else { 1.0 });
        let e = canny(&img, &CannyParams::default()).unwrap();
        let cols: std::collections::BTreeSet<usize> = (0..24)
            .flat_map(|i| (0..24).map(move |j| (i, j)))
            .filter(|&(i, j)| e.is_edge(i, j))
            .map(|(_, j)| j)
            .collect();
        assert_eq!(cols.len(), 1, "edge columns {cols:?}");
        let c = *cols.iter().next().unwrap();
        assert!(c == 11 || c == 12);
        for i in 0..24 {
            assert!(e.is_edge(i, c), "row {i} missing");
        }
    }

    #[test]
    fn rejects_bad_thresholds() {
        let img = Image::new(8, 8);
        let p = CannyParams {
            low: 0.3,
            high: 0.2,
            ..CannyParams::default()
        };
        assert!(canny(&img, &p).is_err());
        let p = CannyParams {
            sigma: 0.0,
            ..CannyParams::default()
        };
        assert!(canny(&img, &p).is_err());
    }

    #[test]
    fn gaussian_kernel_is_normalised() {
        let k = gaussian_kernel(1.4);
        assert_eq!(k.len(), 11);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[10]);
    }

    #[test]
    fn direction_quantisation() {
        assert_eq!(Direction::quantize(1.0, 0.0), Direction::Deg0);
        assert_eq!(Direction::quantize(-1.0, 0.1), Direction::Deg0);
        assert_eq!(Direction::quantize(1.0, 1.0), Direction::Deg45);
        assert_eq!(Direction::quantize(0.0, -1.0), Direction::Deg90);
        assert_eq!(Direction::quantize(-1.0, 1.0), Direction::Deg135);
    }
}
