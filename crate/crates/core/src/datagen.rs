//! Procedural two-domain toy dataset.
//!
//! The "synthetic" domain is flat-shaded sprites with exact control maps and
//! four views that are literal 90-degree array rotations of view 0, so
//! cross-view correspondence is known analytically. The "real" domain is
//! textured, shaded sprites with null control and four independent instances
//! per grid.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::DomainId;
use crate::ppm;
use crate::util::{derive_seed, ordered_map, rng_from};

pub const SHAPE_CLASSES: [&str; 8] = [
    "circle", "square", "triangle", "star", "pentagon", "hexagon", "diamond", "cross",
];

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("ppm: {0}")]
    Ppm(#[from] ppm::PpmError),
    #[error("manifest: {0}")]
    Manifest(String),
}

/// One 2x2 grid sample. Planar [3, full, full] floats in [0,1];
/// full = 2 * view_side.
#[derive(Debug, Clone)]
pub struct ToyGridSample {
    pub id: String,
    pub domain: DomainId,
    pub prompt_id: usize,
    pub seed: u64,
    pub view_side: usize,
    pub image: Vec<f32>,
    pub control: Option<Vec<f32>>,
}

impl ToyGridSample {
    pub fn full_side(&self) -> usize {
        self.view_side * 2
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub domain: DomainId,
    pub prompt_id: usize,
    pub seed: u64,
    pub path: String,
}

/// Rotate one planar [3, s, s] image clockwise by k quarter turns.
pub fn rotate_quarters(img: &[f32], s: usize, k: usize) -> Vec<f32> {
    let plane = s * s;
    let mut cur = img.to_vec();
    for _ in 0..(k % 4) {
        let mut next = vec![0.0f32; 3 * plane];
        for c in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    // clockwise: (y, x) <- (s-1-x, y)
                    next[c * plane + y * s + x] = cur[c * plane + (s - 1 - x) * s + y];
                }
            }
        }
        cur = next;
    }
    cur
}

fn inside(class: usize, x: f64, y: f64, theta: f64) -> bool {
    // Coordinates are sprite-local in [-1, 1], `theta` spins the sprite.
    let (c, s) = (theta.cos(), theta.sin());
    let (rx, ry) = (x * c + y * s, -x * s + y * c);
    let r = (rx * rx + ry * ry).sqrt();
    match class {
        0 => r <= 1.0,                                   // circle
        1 => rx.abs() <= 0.85 && ry.abs() <= 0.85,       // square
        2 => {
            // upward triangle
            let yy = (ry + 0.9) / 1.8;
            yy >= 0.0 && yy <= 1.0 && rx.abs() <= (1.0 - yy) * 0.95
        }
        3 => {
            // 5-point star via angular radius modulation
            let ang = ry.atan2(rx);
            let lobe = ((ang * 5.0).cos() + 1.0) / 2.0;
            r <= 0.45 + 0.55 * lobe
        }
        4 => regular_polygon(rx, ry, 5),
        5 => regular_polygon(rx, ry, 6),
        6 => rx.abs() + ry.abs() <= 1.0,                 // diamond
        7 => rx.abs() <= 0.32 || ry.abs() <= 0.32,       // cross (clipped by r below)
        _ => unreachable!("class out of range"),
    }
}

fn regular_polygon(x: f64, y: f64, n: usize) -> bool {
    let ang = y.atan2(x);
    let r = (x * x + y * y).sqrt();
    let sector = std::f64::consts::PI / n as f64;
    let a = ((ang % (2.0 * sector)) + 2.0 * sector) % (2.0 * sector) - sector;
    r * a.cos() <= 0.88
}

struct SpriteParams {
    class: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    theta: f64,
    color: [f64; 3],
    texture_seed: u64,
}

fn draw_params(class: usize, rng: &mut impl Rng) -> SpriteParams {
    let hue: f64 = rng.gen_range(0.0..1.0);
    let color = hue_to_rgb(hue);
    SpriteParams {
        class,
        cx: rng.gen_range(-0.08..0.08),
        cy: rng.gen_range(-0.08..0.08),
        radius: rng.gen_range(0.30..0.40),
        theta: rng.gen_range(0.0..std::f64::consts::TAU),
        color,
        texture_seed: rng.gen(),
    }
}

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - k.min(4.0 - k).clamp(0.0, 1.0) * 0.85
    };
    [f(5.0), f(3.0), f(1.0)]
}

fn sprite_mask(p: &SpriteParams, s: usize) -> Vec<bool> {
    let mut mask = vec![false; s * s];
    for y in 0..s {
        for x in 0..s {
            // pixel center in [-1, 1] view coordinates
            let px = (x as f64 + 0.5) / s as f64 * 2.0 - 1.0;
            let py = (y as f64 + 0.5) / s as f64 * 2.0 - 1.0;
            let lx = (px - p.cx) / p.radius;
            let ly = (py - p.cy) / p.radius;
            if lx * lx + ly * ly <= 1.0 / (p.radius * p.radius) * 4.0
                && inside(p.class, lx, ly, p.theta)
                && (p.class != 7 || lx * lx + ly * ly <= 1.0)
            {
                mask[y * s + x] = true;
            }
        }
    }
    mask
}

/// Flat-shaded view: constant fill inside the mask, white outside.
fn render_flat_view(p: &SpriteParams, s: usize) -> (Vec<f32>, Vec<bool>) {
    let mask = sprite_mask(p, s);
    let plane = s * s;
    let mut img = vec![1.0f32; 3 * plane];
    for i in 0..plane {
        if mask[i] {
            for c in 0..3 {
                img[c * plane + i] = p.color[c] as f32;
            }
        }
    }
    (img, mask)
}

/// Smooth value noise from a seeded lattice, bilinear interpolation.
fn value_noise(seed: u64, s: usize, cells: usize) -> Vec<f64> {
    let mut rng = rng_from(seed);
    let n = cells + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = vec![0.0f64; s * s];
    for y in 0..s {
        for x in 0..s {
            let fy = y as f64 / s as f64 * cells as f64;
            let fx = x as f64 / s as f64 * cells as f64;
            let (iy, ix) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let v00 = lattice[iy * n + ix];
            let v01 = lattice[iy * n + ix + 1];
            let v10 = lattice[(iy + 1) * n + ix];
            let v11 = lattice[(iy + 1) * n + ix + 1];
            out[y * s + x] = v00 * (1.0 - ty) * (1.0 - tx)
                + v01 * (1.0 - ty) * tx
                + v10 * ty * (1.0 - tx)
                + v11 * ty * tx;
        }
    }
    out
}

/// Textured, shaded view: value-noise texture, vertical gradient, per-pixel
/// grain. Visually distinct statistics from the flat synthetic domain.
fn render_textured_view(p: &SpriteParams, s: usize) -> Vec<f32> {
    let mask = sprite_mask(p, s);
    let coarse = value_noise(p.texture_seed, s, 4);
    let fine = value_noise(p.texture_seed ^ 0xabcdef, s, 8.min(s / 2).max(2));
    let mut grain = rng_from(p.texture_seed ^ 0x5eed);
    let plane = s * s;
    let mut img = vec![1.0f32; 3 * plane];
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            if !mask[i] {
                continue;
            }
            let shade = 0.75 + 0.35 * (1.0 - y as f64 / s as f64);
            let tex = 1.0 + 0.45 * coarse[i] + 0.25 * fine[i];
            let g: f64 = grain.gen_range(-0.08..0.08);
            for c in 0..3 {
                let v = (p.color[c] * shade * tex + g).clamp(0.0, 1.0);
                img[c * plane + i] = v as f32;
            }
        }
    }
    img
}

/// RGB edge+orientation control map: boundary pixels encode the local
/// outline orientation in R/G, interior is mid-gray, background is zero.
fn control_map(mask: &[bool], s: usize) -> Vec<f32> {
    let plane = s * s;
    let mut ctrl = vec![0.0f32; 3 * plane];
    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= s as isize || y >= s as isize {
            0.0
        } else if mask[y as usize * s + x as usize] {
            1.0
        } else {
            0.0
        }
    };
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            if !mask[i] {
                continue;
            }
            let (xi, yi) = (x as isize, y as isize);
            let on_edge = at(xi - 1, yi) == 0.0
                || at(xi + 1, yi) == 0.0
                || at(xi, yi - 1) == 0.0
                || at(xi, yi + 1) == 0.0;
            if on_edge {
                let gx = at(xi + 1, yi) - at(xi - 1, yi);
                let gy = at(xi, yi + 1) - at(xi, yi - 1);
                let theta = gy.atan2(gx);
                ctrl[i] = ((theta.cos() + 1.0) / 2.0) as f32;
                ctrl[plane + i] = ((theta.sin() + 1.0) / 2.0) as f32;
                ctrl[2 * plane + i] = 1.0;
            } else {
                ctrl[i] = 0.5;
                ctrl[plane + i] = 0.5;
                ctrl[2 * plane + i] = 0.5;
            }
        }
    }
    ctrl
}

fn compose_grid(views: &[Vec<f32>; 4], s: usize) -> Vec<f32> {
    let full = 2 * s;
    let plane_v = s * s;
    let plane = full * full;
    let mut grid = vec![0.0f32; 3 * plane];
    for (v, view) in views.iter().enumerate() {
        let (vr, vc) = (v / 2, v % 2);
        for c in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    grid[c * plane + (vr * s + y) * full + vc * s + x] =
                        view[c * plane_v + y * s + x];
                }
            }
        }
    }
    grid
}

/// Synthetic sample: flat fill, exact control maps, views are exact
/// rotations (0/90/180/270 degrees) of one instance.
pub fn render_synthetic(class: usize, seed: u64, view_side: usize) -> ToyGridSample {
    assert!(class < SHAPE_CLASSES.len(), "unknown shape class");
    let mut rng = rng_from(seed);
    let p = draw_params(class, &mut rng);
    let (view0, mask) = render_flat_view(&p, view_side);
    let ctrl0 = control_map(&mask, view_side);
    let views: [Vec<f32>; 4] = std::array::from_fn(|k| rotate_quarters(&view0, view_side, k));
    let ctrls: [Vec<f32>; 4] = std::array::from_fn(|k| rotate_quarters(&ctrl0, view_side, k));
    ToyGridSample {
        id: format!("syn-{}-{:016x}", SHAPE_CLASSES[class], seed),
        domain: DomainId::Syn,
        prompt_id: class,
        seed,
        view_side,
        image: compose_grid(&views, view_side),
        control: Some(compose_grid(&ctrls, view_side)),
    }
}

/// Real sample: textured/shaded instances, null control, four independent
/// instances of the same class.
pub fn render_real(class: usize, seed: u64, view_side: usize) -> ToyGridSample {
    assert!(class < SHAPE_CLASSES.len(), "unknown shape class");
    let views: [Vec<f32>; 4] = std::array::from_fn(|k| {
        let mut rng = rng_from(derive_seed(seed, "real-view", k as u64));
        let p = draw_params(class, &mut rng);
        render_textured_view(&p, view_side)
    });
    ToyGridSample {
        id: format!("real-{}-{:016x}", SHAPE_CLASSES[class], seed),
        domain: DomainId::Real,
        prompt_id: class,
        seed,
        view_side,
        image: compose_grid(&views, view_side),
        control: None,
    }
}

fn render_indexed(domain: DomainId, stream: &str, global_seed: u64, index: usize, view_side: usize) -> ToyGridSample {
    let class = index % SHAPE_CLASSES.len();
    let seed = derive_seed(global_seed, stream, index as u64);
    match domain {
        DomainId::Syn => render_synthetic(class, seed, view_side),
        DomainId::Real => render_real(class, seed, view_side),
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train_syn: Vec<ToyGridSample>,
    pub train_real: Vec<ToyGridSample>,
    pub eval_syn: Vec<ToyGridSample>,
    pub eval_real: Vec<ToyGridSample>,
}

/// Generate matched-size train sets and held-out eval sets. Seed streams are
/// disjoint per (split, domain), so train and eval never share an instance.
pub fn make_split(n_train: usize, n_eval: usize, seed: u64, view_side: usize) -> DatasetSplit {
    let gen = |domain: DomainId, stream: &'static str, n: usize| -> Vec<ToyGridSample> {
        ordered_map((0..n).collect(), move |i| {
            render_indexed(domain, stream, seed, i, view_side)
        })
    };
    DatasetSplit {
        train_syn: gen(DomainId::Syn, "train-syn", n_train),
        train_real: gen(DomainId::Real, "train-real", n_train),
        eval_syn: gen(DomainId::Syn, "eval-syn", n_eval),
        eval_real: gen(DomainId::Real, "eval-real", n_eval),
    }
}

fn ctrl_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}_ctrl.ppm"))
}

/// Write samples as PPM files plus a JSON-lines manifest.
pub fn write_dataset(dir: &Path, name: &str, samples: &[ToyGridSample]) -> Result<PathBuf, DataError> {
    std::fs::create_dir_all(dir)?;
    let manifest_path = dir.join(format!("{name}.jsonl"));
    let mut lines = String::new();
    for s in samples {
        let full = s.full_side();
        let rel = format!("{}.ppm", s.id);
        let img_path = dir.join(&rel);
        ppm::write_ppm(&img_path, full, full, &s.image)?;
        if let Some(c) = &s.control {
            ppm::write_ppm(&ctrl_path(&img_path), full, full, c)?;
        }
        let rec = ManifestRecord {
            id: s.id.clone(),
            domain: s.domain,
            prompt_id: s.prompt_id,
            seed: s.seed,
            path: rel,
        };
        lines.push_str(&serde_json::to_string(&rec).map_err(|e| DataError::Manifest(e.to_string()))?);
        lines.push('\n');
    }
    std::fs::write(&manifest_path, lines)?;
    Ok(manifest_path)
}

/// Load a manifest and its images back into memory.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<ToyGridSample>, DataError> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(manifest_path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: ManifestRecord =
            serde_json::from_str(line).map_err(|e| DataError::Manifest(e.to_string()))?;
        let img_path = dir.join(&rec.path);
        let (w, h, image) = ppm::read_ppm(&img_path)?;
        if w != h || w % 2 != 0 {
            return Err(DataError::Manifest(format!("bad grid dimensions {}x{}", w, h)));
        }
        let cp = ctrl_path(&img_path);
        let control = if cp.exists() {
            Some(ppm::read_ppm(&cp)?.2)
        } else {
            None
        };
        if rec.domain == DomainId::Syn && control.is_none() {
            return Err(DataError::Manifest(format!("synthetic sample {} lacks control", rec.id)));
        }
        out.push(ToyGridSample {
            id: rec.id,
            domain: rec.domain,
            prompt_id: rec.prompt_id,
            seed: rec.seed,
            view_side: w / 2,
            image,
            control,
        });
    }
    Ok(out)
}

/// Foreground mask of a grid or view image: anything meaningfully darker
/// than the white background.
pub fn silhouette(image: &[f32], plane: usize) -> Vec<bool> {
    (0..plane)
        .map(|i| {
            let lum = (image[i] + image[plane + i] + image[2 * plane + i]) / 3.0;
            lum < 0.9
        })
        .collect()
}

/// Extract view k (row-major in the 2x2 grid) as planar [3, s, s].
pub fn extract_view(grid: &[f32], view_side: usize, k: usize) -> Vec<f32> {
    let s = view_side;
    let full = 2 * s;
    let plane = full * full;
    let plane_v = s * s;
    let (vr, vc) = (k / 2, k % 2);
    let mut out = vec![0.0f32; 3 * plane_v];
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                out[c * plane_v + y * s + x] = grid[c * plane + (vr * s + y) * full + vc * s + x];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_views_are_exact_rotations() {
        let s = render_synthetic(3, 42, 16);
        let v0 = extract_view(&s.image, 16, 0);
        for k in 1..4 {
            let vk = extract_view(&s.image, 16, k);
            assert_eq!(rotate_quarters(&v0, 16, k), vk, "view {k} must be rot{}(view0)", k * 90);
        }
    }

    #[test]
    fn control_map_supported_on_sprite_only() {
        let s = render_synthetic(0, 7, 16);
        let ctrl = s.control.as_ref().unwrap();
        let plane = 32 * 32;
        let sil = silhouette(&s.image, plane);
        for i in 0..plane {
            let nonzero = ctrl[i] != 0.0 || ctrl[plane + i] != 0.0 || ctrl[2 * plane + i] != 0.0;
            if nonzero {
                assert!(sil[i], "control nonzero off the sprite at {i}");
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render_synthetic(5, 99, 16);
        let b = render_synthetic(5, 99, 16);
        assert_eq!(a.image, b.image);
        assert_eq!(a.control, b.control);
        let a = render_real(5, 99, 16);
        let b = render_real(5, 99, 16);
        assert_eq!(a.image, b.image);
        assert!(a.control.is_none());
    }

    #[test]
    fn real_domain_has_higher_inner_variance() {
        // Mean within-sprite luminance variance: measures texture, not the
        // cross-sample color spread both domains share.
        let var = |samples: &[ToyGridSample]| -> f64 {
            let mut acc = 0.0;
            for s in samples {
                let plane = s.full_side() * s.full_side();
                let sil = silhouette(&s.image, plane);
                let vals: Vec<f64> = (0..plane)
                    .filter(|&i| sil[i])
                    .map(|i| ((s.image[i] + s.image[plane + i] + s.image[2 * plane + i]) / 3.0) as f64)
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                acc += vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            }
            acc / samples.len() as f64
        };
        let split = make_split(50, 0, 3, 16);
        let v_syn = var(&split.train_syn);
        let v_real = var(&split.train_real);
        assert!(
            v_real >= 5.0 * v_syn.max(1e-6),
            "domain gap too small: syn {v_syn} real {v_real}"
        );
    }

    #[test]
    fn split_is_disjoint_and_matched() {
        let split = make_split(16, 8, 11, 8);
        assert_eq!(split.train_syn.len(), split.train_real.len());
        let mut ids: Vec<&str> = split
            .train_syn
            .iter()
            .chain(&split.train_real)
            .chain(&split.eval_syn)
            .chain(&split.eval_real)
            .map(|s| s.id.as_str())
            .collect();
        let n = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), n, "instance ids must be unique across splits");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let split = make_split(4, 2, 5, 8);
        let path = write_dataset(dir.path(), "train_syn", &split.train_syn).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.len(), split.train_syn.len());
        for (a, b) in split.train_syn.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.prompt_id, b.prompt_id);
            assert_eq!(a.domain, b.domain);
            // loaded pixels are the quantized originals
            for (x, y) in a.image.iter().zip(&b.image) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
            }
            assert!(b.control.is_some());
        }
    }
}
