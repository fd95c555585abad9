//! Ground-truth soft labels, training patch extraction, the synthetic
//! microscopy generator and on-disk dataset layout.
//!
//! Dataset directory layout:
//!
//! ```text
//! manifest.json              {version, image_count, seed, synthetic}
//! images/img_0000.pgm        8-bit P5 luminance
//! centers/img_0000.csv       header "row,col", one nucleus centre per line
//! boundaries/img_0000.csv    optional, synthetic only:
//!                            "center_row,center_col,semi_a,semi_b,angle"
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::edge::{canny, CannyParams, EdgeMap};
use crate::pgm::{read_pgm, write_pgm, Gray8};
use crate::shape_prior::Ellipse;
use crate::{Error, Image, Result};

pub const LABEL_KERNEL: usize = 7;
pub const LABEL_SIGMA: f64 = 2.0;

/// A luminance image with its annotated nucleus centres.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub image: Image,
    pub centers: Vec<(usize, usize)>,
    /// Analytic nucleus outlines, known only for synthetic images.
    pub nuclei: Option<Vec<Ellipse>>,
}

impl AnnotatedImage {
    pub fn validate(&self) -> Result<()> {
        for &(r, c) in &self.centers {
            if r >= self.image.height || c >= self.image.width {
                return Err(Error::invalid(format!(
                    "centre ({r},{c}) outside {}x{} image",
                    self.image.height, self.image.width
                )));
            }
        }
        Ok(())
    }
}

/// Aligned luminance, edge and label crops taken at `origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTuple {
    pub x: Image,
    pub edges: Image,
    pub y: Image,
    pub origin: (usize, usize),
}

/// 7×7 Gaussian (σ = 2) stamp with peak value 1.
pub fn label_stamp() -> [[f64; LABEL_KERNEL]; LABEL_KERNEL] {
    let r = (LABEL_KERNEL / 2) as isize;
    let mut k = [[0.0; LABEL_KERNEL]; LABEL_KERNEL];
    for (a, row) in k.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            let (di, dj) = (a as isize - r, b as isize - r);
            *v = (-((di * di + dj * dj) as f64) / (2.0 * LABEL_SIGMA * LABEL_SIGMA)).exp();
        }
    }
    k
}

/// Soft label map: a peak-normalised Gaussian stamp at every centre, with
/// overlapping stamps combined by maximum so labels stay within [0, 1].
pub fn make_soft_labels(centers: &[(usize, usize)], height: usize, width: usize) -> Result<Image> {
    let stamp = label_stamp();
    let r = (LABEL_KERNEL / 2) as isize;
    let mut y = Image::new(height, width);
    for &(ci, cj) in centers {
        if ci >= height || cj >= width {
            return Err(Error::invalid(format!(
                "centre ({ci},{cj}) outside {height}x{width} label map"
            )));
        }
        for (a, row) in stamp.iter().enumerate() {
            for (b, &v) in row.iter().enumerate() {
                let (i, j) = (ci as isize + a as isize - r, cj as isize + b as isize - r);
                if i >= 0 && j >= 0 && (i as usize) < height && (j as usize) < width {
                    let (i, j) = (i as usize, j as usize);
                    if v > y.get(i, j) {
                        y.set(i, j, v);
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Grid of top-left patch corners along one axis.
fn grid(extent: usize, patch: usize, stride: usize) -> impl Iterator<Item = usize> {
    (0..=extent - patch).step_by(stride)
}

/// Number of patches on the regular grid before empty-patch elimination.
pub fn grid_patch_count(height: usize, width: usize, patch: usize, stride: usize) -> usize {
    if height < patch || width < patch || stride == 0 {
        return 0;
    }
    grid(height, patch, stride).count() * grid(width, patch, stride).count()
}

/// Crops aligned (x, x̂, y) patches on a regular grid and drops every patch
/// whose label crop is identically zero.
pub fn extract_patches(
    image: &Image,
    edges: &EdgeMap,
    labels: &Image,
    patch: usize,
    stride: usize,
) -> Result<Vec<TrainingTuple>> {
    let (h, w) = (image.height, image.width);
    if patch == 0 || stride == 0 {
        return Err(Error::invalid("patch size and stride must be positive"));
    }
    if h < patch || w < patch {
        return Err(Error::invalid(format!(
            "image {h}x{w} is smaller than the {patch}x{patch} patch"
        )));
    }
    let e = edges.image();
    if (e.height, e.width) != (h, w) || (labels.height, labels.width) != (h, w) {
        return Err(Error::invalid("image, edge map and labels must share one size"));
    }
    let mut out = Vec::new();
    for top in grid(h, patch, stride) {
        for left in grid(w, patch, stride) {
            let y = labels.crop(top, left, patch, patch);
            if y.data.iter().all(|&v| v == 0.0) {
                continue;
            }
            out.push(TrainingTuple {
                x: image.crop(top, left, patch, patch),
                edges: e.crop(top, left, patch, patch),
                y,
                origin: (top, left),
            });
        }
    }
    Ok(out)
}

/// Full preparation of training tuples from annotated images: Canny on the
/// whole image, soft labels, then patch extraction.
pub fn prepare_tuples(
    images: &[AnnotatedImage],
    canny_params: &CannyParams,
    patch: usize,
    stride: usize,
) -> Result<Vec<TrainingTuple>> {
    let mut out = Vec::new();
    for a in images {
        a.validate()?;
        let edges = canny(&a.image, canny_params)?;
        let labels = make_soft_labels(&a.centers, a.image.height, a.image.width)?;
        out.extend(extract_patches(&a.image, &edges, &labels, patch, stride)?);
    }
    Ok(out)
}

/// Parameters of the synthetic microscopy generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub nuclei_per_image: usize,
    pub min_semi_axis: f64,
    pub max_semi_axis: f64,
    pub background: f64,
    pub nucleus_intensity: f64,
    pub boundary_intensity: f64,
    pub noise_std: f64,
    /// Blurred dark smudges without sharp outlines.
    pub smudges_per_image: usize,
}

impl SyntheticConfig {
    pub fn new(image_size: usize, nuclei_per_image: usize) -> Self {
        SyntheticConfig {
            image_size,
            nuclei_per_image,
            min_semi_axis: 4.5,
            max_semi_axis: 7.5,
            background: 0.78,
            nucleus_intensity: 0.42,
            boundary_intensity: 0.25,
            noise_std: 0.05,
            smudges_per_image: 4,
        }
    }

    /// Minimum distance between nucleus centres: 1.2 × the largest diameter.
    pub fn min_center_distance(&self) -> f64 {
        1.2 * 2.0 * self.max_semi_axis
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

/// `count` synthetic images. Image `k` draws from its own ChaCha stream
/// (`seed`, stream `k`), so each image is independent of the others.
pub fn gen_synthetic(seed: u64, count: usize, cfg: &SyntheticConfig) -> Vec<AnnotatedImage> {
    (0..count).map(|k| gen_synthetic_image(seed, k, cfg)).collect()
}

pub fn gen_synthetic_image(seed: u64, index: usize, cfg: &SyntheticConfig) -> AnnotatedImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let n = cfg.image_size;
    let margin = cfg.max_semi_axis.ceil() as usize + 1;

    // centres by rejection sampling
    let min_d2 = cfg.min_center_distance().powi(2);
    let mut centers: Vec<(usize, usize)> = Vec::new();
    if n > 2 * margin {
        'outer: while centers.len() < cfg.nuclei_per_image {
            for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                let c = (rng.random_range(margin..n - margin), rng.random_range(margin..n - margin));
                let clear = centers.iter().all(|&(r, q)| {
                    let (dr, dc) = (r as f64 - c.0 as f64, q as f64 - c.1 as f64);
                    dr * dr + dc * dc >= min_d2
                });
                if clear {
                    centers.push(c);
                    continue 'outer;
                }
            }
            log::warn!(
                "image {index}: placed {} of {} nuclei after {MAX_PLACEMENT_ATTEMPTS} attempts",
                centers.len(),
                cfg.nuclei_per_image
            );
            break;
        }
    }
    let nuclei: Vec<Ellipse> = centers
        .iter()
        .map(|&(r, c)| Ellipse {
            center_row: r as f64,
            center_col: c as f64,
            semi_a: rng.random_range(cfg.min_semi_axis..=cfg.max_semi_axis),
            semi_b: rng.random_range(cfg.min_semi_axis..=cfg.max_semi_axis),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        })
        .collect();

    // textured background: a few low-frequency waves
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.01..0.03),
                rng.random_range(0.02..0.12),
                rng.random_range(0.0..std::f64::consts::PI),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let smudges: Vec<(f64, f64, f64, f64)> = (0..cfg.smudges_per_image)
        .map(|_| {
            (
                rng.random_range(0.0..n as f64),
                rng.random_range(0.0..n as f64),
                rng.random_range(2.5..4.5),
                rng.random_range(0.12..0.22),
            )
        })
        .collect();
    let mut img = Image::from_fn(n, n, |i, j| {
        let (y, x) = (i as f64, j as f64);
        let mut v = cfg.background;
        for &(amp, freq, dir, phase) in &waves {
            v += amp * (freq * (x * dir.cos() + y * dir.sin()) + phase).sin();
        }
        for &(sr, sc, s, amp) in &smudges {
            let d2 = (y - sr).powi(2) + (x - sc).powi(2);
            v -= amp * (-d2 / (2.0 * s * s)).exp();
        }
        v
    });

    for e in &nuclei {
        let level = cfg.nucleus_intensity + rng.random_range(-0.05..0.05);
        let ext = e.semi_a.max(e.semi_b).ceil() as isize + 1;
        let (cr, cc) = (e.center_row as isize, e.center_col as isize);
        for i in (cr - ext).max(0)..=(cr + ext).min(n as isize - 1) {
            for j in (cc - ext).max(0)..=(cc + ext).min(n as isize - 1) {
                if e.contains(i as f64, j as f64) {
                    img.set(i as usize, j as usize, level);
                }
            }
        }
        for (i, j) in e.boundary_pixels(n, n) {
            img.set(i, j, cfg.boundary_intensity);
        }
    }

    let noise = Normal::new(0.0, cfg.noise_std).expect("valid noise std");
    for v in &mut img.data {
        let q = crate::pgm::quantize(*v + noise.sample(&mut rng));
        *v = q as f64 / 255.0;
    }

    AnnotatedImage {
        image: img,
        centers,
        nuclei: Some(nuclei),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub image_count: usize,
    pub seed: Option<u64>,
    pub synthetic: bool,
}

pub const DATASET_VERSION: u32 = 1;

fn image_name(k: usize) -> String {
    format!("img_{k:04}")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes images as 8-bit PGM (values are quantised), centres as CSV and
/// the manifest.
pub fn save_dataset(dir: &Path, images: &[AnnotatedImage], seed: Option<u64>) -> Result<DatasetManifest> {
    for sub in ["images", "centers", "boundaries"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for (k, a) in images.iter().enumerate() {
        let name = image_name(k);
        write_pgm(&dir.join("images").join(format!("{name}.pgm")), &Gray8::from_image(&a.image))?;
        let mut csv = String::from("row,col\n");
        for (r, c) in &a.centers {
            csv.push_str(&format!("{r},{c}\n"));
        }
        write_text(&dir.join("centers").join(format!("{name}.csv")), &csv)?;
        if let Some(nuclei) = &a.nuclei {
            let mut csv = String::from("center_row,center_col,semi_a,semi_b,angle\n");
            for e in nuclei {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    e.center_row, e.center_col, e.semi_a, e.semi_b, e.angle
                ));
            }
            write_text(&dir.join("boundaries").join(format!("{name}.csv")), &csv)?;
        }
    }
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        image_count: images.len(),
        seed,
        synthetic: images.iter().any(|a| a.nuclei.is_some()),
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    write_text(&path, &json)?;
    Ok(manifest)
}

fn parse_csv_rows(path: &Path, header: &str) -> Result<Vec<Vec<String>>> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == header => {}
        other => {
            return Err(Error::format(
                path,
                format!("expected header {header:?}, found {:?}", other.unwrap_or("")),
            ))
        }
    }
    let cols = header.split(',').count();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|f| f.trim().to_string()).collect();
        if fields.len() != cols {
            return Err(Error::format(path, format!("line {}: expected {cols} fields", n + 2)));
        }
        rows.push(fields);
    }
    Ok(rows)
}

fn parse_field<T: std::str::FromStr>(path: &Path, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::format(path, format!("cannot parse {s:?}")))
}

/// Reads a centres CSV (`row,col`).
pub fn read_centers(path: &Path) -> Result<Vec<(usize, usize)>> {
    parse_csv_rows(path, "row,col")?
        .iter()
        .map(|r| Ok((parse_field(path, &r[0])?, parse_field(path, &r[1])?)))
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<AnnotatedImage>)> {
    let mpath = dir.join("manifest.json");
    let manifest: DatasetManifest = serde_json::from_str(&read_text(&mpath)?)
        .map_err(|e| Error::format(&mpath, e.to_string()))?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::format(&mpath, format!("unsupported dataset version {}", manifest.version)));
    }
    let mut images = Vec::with_capacity(manifest.image_count);
    for k in 0..manifest.image_count {
        let name = image_name(k);
        let image = read_pgm(&dir.join("images").join(format!("{name}.pgm")))?.to_image();
        let cpath = dir.join("centers").join(format!("{name}.csv"));
        let centers = read_centers(&cpath)?;
        let bpath: PathBuf = dir.join("boundaries").join(format!("{name}.csv"));
        let nuclei = if bpath.exists() {
            let rows = parse_csv_rows(&bpath, "center_row,center_col,semi_a,semi_b,angle")?;
            let mut v = Vec::with_capacity(rows.len());
            for r in rows {
                v.push(Ellipse {
                    center_row: parse_field(&bpath, &r[0])?,
                    center_col: parse_field(&bpath, &r[1])?,
                    semi_a: parse_field(&bpath, &r[2])?,
                    semi_b: parse_field(&bpath, &r[3])?,
                    angle: parse_field(&bpath, &r[4])?,
                });
            }
            Some(v)
        } else {
            None
        };
        let a = AnnotatedImage {
            image,
            centers,
            nuclei,
        };
        a.validate().map_err(|e| Error::format(&cpath, e.to_string()))?;
        images.push(a);
    }
    Ok((manifest, images))
}

/// Splits into (first half, second half); the first half gets the extra
/// image when the count is odd.
pub fn split_half<T: Clone>(items: &[T]) -> (Vec<T>, Vec<T>) {
    let mid = items.len().div_ceil(2);
    (items[..mid].to_vec(), items[mid..].to_vec())
}
