//! From detection maps to scored detections: thresholded local maxima,
//! golden-region matching against ground-truth centres, precision / recall /
//! F1, and threshold sweeps that trace a precision-recall curve.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Image, Result};

pub const DEFAULT_NMS_RADIUS: usize = 3;
pub const DEFAULT_GOLDEN_RADIUS: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

/// Pixels with `map ≥ threshold` that are the maximum of their
/// (2r+1)×(2r+1) neighbourhood. On plateaus only the pixel with the smallest
/// flat index within the window is kept. Output is in raster order.
pub fn detect(map: &Image, threshold: f64, nms_radius: usize) -> Vec<Detection> {
    let (h, w) = (map.height, map.width);
    let r = nms_radius.max(1);
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let v = map.get(i, j);
            if !(v >= threshold) {
                continue;
            }
            let mut is_max = true;
            'win: for ii in i.saturating_sub(r)..=(i + r).min(h - 1) {
                for jj in j.saturating_sub(r)..=(j + r).min(w - 1) {
                    let u = map.get(ii, jj);
                    let earlier = ii * w + jj < i * w + j;
                    if u > v || (u == v && earlier) {
                        is_max = false;
                        break 'win;
                    }
                }
            }
            if is_max {
                out.push(Detection { row: i, col: j, score: v });
            }
        }
    }
    out
}

/// Outcome of matching one image's detections to its ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching {
    pub tp: usize,
    pub fp: usize,
    pub false_negatives: usize,
    /// Accepted (detection index, ground-truth index) pairs.
    pub pairs: Vec<(usize, usize)>,
}

fn dist(a: (usize, usize), b: (usize, usize)) -> f64 {
    let (dr, dc) = (a.0 as f64 - b.0 as f64, a.1 as f64 - b.1 as f64);
    (dr * dr + dc * dc).sqrt()
}

/// Greedy one-to-one matching: candidate pairs within `radius` (inclusive)
/// are accepted in order of increasing distance when both ends are free.
/// Distance ties are broken by detection index, then ground-truth index.
pub fn match_golden(detections: &[(usize, usize)], gt: &[(usize, usize)], radius: f64) -> Result<Matching> {
    if !(radius > 0.0) {
        return Err(Error::invalid(format!("golden radius must be > 0, got {radius}")));
    }
    let mut cand = Vec::new();
    for (di, &d) in detections.iter().enumerate() {
        for (gi, &g) in gt.iter().enumerate() {
            let dd = dist(d, g);
            if dd <= radius {
                cand.push((dd, di, gi));
            }
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut det_used = vec![false; detections.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (_, di, gi) in cand {
        if !det_used[di] && !gt_used[gi] {
            det_used[di] = true;
            gt_used[gi] = true;
            pairs.push((di, gi));
        }
    }
    let tp = pairs.len();
    Ok(Matching {
        tp,
        fp: detections.len() - tp,
        false_negatives: gt.len() - tp,
        pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and their harmonic mean, each 0 when undefined.
pub fn prf(tp: usize, fp: usize, false_negatives: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + false_negatives == 0 {
        0.0
    } else {
        tp as f64 / (tp + false_negatives) as f64
    };
    // 2TP / (2TP + FP + FN): the harmonic mean of P and R with one rounding
    let f1 = if tp == 0 {
        0.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + false_negatives) as f64
    };
    (p, r, f1)
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

impl EvalReport {
    pub fn from_counts(threshold: f64, tp: usize, fp: usize, false_negatives: usize) -> Self {
        let (precision, recall, f1) = prf(tp, fp, false_negatives);
        EvalReport {
            threshold,
            tp,
            fp,
            false_negatives,
            precision,
            recall,
            f1,
        }
    }
}

pub fn evaluate(detections: &[Detection], gt: &[(usize, usize)], radius: f64, threshold: f64) -> Result<EvalReport> {
    let pts: Vec<_> = detections.iter().map(|d| (d.row, d.col)).collect();
    let m = match_golden(&pts, gt, radius)?;
    Ok(EvalReport::from_counts(threshold, m.tp, m.fp, m.false_negatives))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Pool TP/FP/FN over all images, then compute P/R/F1.
    #[default]
    Micro,
    /// Mean of per-image P/R; F1 from the averaged P and R.
    Macro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub rows: Vec<EvalReport>,
}

impl PrCurve {
    /// Row with the highest F1 (first one on ties).
    pub fn best(&self) -> Option<&EvalReport> {
        self.rows
            .iter()
            .fold(None, |best: Option<&EvalReport>, r| match best {
                Some(b) if b.f1 >= r.f1 => Some(b),
                _ => Some(r),
            })
    }

    pub fn best_f1(&self) -> f64 {
        self.best().map_or(0.0, |r| r.f1)
    }
}

/// Options shared by sweeps and evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub nms_radius: usize,
    pub golden_radius: f64,
    pub averaging: Averaging,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            nms_radius: DEFAULT_NMS_RADIUS,
            golden_radius: DEFAULT_GOLDEN_RADIUS,
            averaging: Averaging::Micro,
        }
    }
}

/// Evaluates every threshold of an ascending grid over a set of maps with
/// their ground-truth centres.
pub fn pr_sweep(maps: &[Image], gt: &[Vec<(usize, usize)>], grid: &[f64], opts: &SweepOptions) -> Result<PrCurve> {
    if maps.is_empty() {
        return Err(Error::invalid("pr sweep needs at least one image"));
    }
    if maps.len() != gt.len() {
        return Err(Error::invalid(format!(
            "{} maps but {} ground-truth lists",
            maps.len(),
            gt.len()
        )));
    }
    if grid.is_empty() || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("threshold grid must be non-empty and strictly ascending"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &t in grid {
        let mut per_image = Vec::with_capacity(maps.len());
        for (map, g) in maps.iter().zip(gt) {
            per_image.push(evaluate(&detect(map, t, opts.nms_radius), g, opts.golden_radius, t)?);
        }
        rows.push(aggregate(t, &per_image, opts.averaging));
    }
    Ok(PrCurve { rows })
}

pub fn aggregate(threshold: f64, reports: &[EvalReport], averaging: Averaging) -> EvalReport {
    let tp = reports.iter().map(|r| r.tp).sum();
    let fp = reports.iter().map(|r| r.fp).sum();
    let fneg = reports.iter().map(|r| r.false_negatives).sum();
    match averaging {
        Averaging::Micro => EvalReport::from_counts(threshold, tp, fp, fneg),
        Averaging::Macro => {
            let n = reports.len().max(1) as f64;
            let p = reports.iter().map(|r| r.precision).sum::<f64>() / n;
            let r = reports.iter().map(|r| r.recall).sum::<f64>() / n;
            EvalReport {
                threshold,
                tp,
                fp,
                false_negatives: fneg,
                precision: p,
                recall: r,
                f1: f1_score(p, r),
            }
        }
    }
}

/// Evenly spaced grid `start, start+step, …` up to and including `stop`.
pub fn threshold_grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    (0..=n).map(|k| start + k as f64 * step).collect()
}

pub fn write_detections_csv(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut s = String::from("row,col,score\n");
    for d in dets {
        s.push_str(&format!("{},{},{}\n", d.row, d.col, d.score));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_detections_csv(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("row,col,score") {
        return Err(Error::format(path, "expected header \"row,col,score\""));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::format(path, format!("line {}: malformed detection", n + 2));
        if f.len() != 3 {
            return Err(bad());
        }
        out.push(Detection {
            row: f[0].parse().map_err(|_| bad())?,
            col: f[1].parse().map_err(|_| bad())?,
            score: f[2].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

pub fn write_pr_csv(path: &Path, curve: &PrCurve) -> Result<()> {
    let mut s = String::from("threshold,precision,recall,f1\n");
    for r in &curve.rows {
        s.push_str(&format!("{},{},{},{}\n", r.threshold, r.precision, r.recall, r.f1));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
