//! Toy metric suite: Fréchet/kernel distances over fixed random features,
//! control adherence, cross-view consistency, and a linear domain probe.

use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;

use crate::adapters::DomainId;
use crate::backbone::{AttentionMode, Backbone, ForwardCtx};
use crate::datagen::{extract_view, rotate_quarters, silhouette, ToyGridSample};
use crate::numerics::{no_grad, Scalar, Tensor};
use crate::util::{derive_seed, rng_from};

pub const FEATURE_DIM: usize = 64;
pub const PSNR_CAP_DB: f64 = 60.0;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("metric contract violated in {op}: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("numerics: {0}")]
    Numerics(#[from] crate::numerics::NumericsError),
}

type Result<T> = std::result::Result<T, MetricError>;

/// One evaluated checkpoint. `*_b` metrics are measured against base-model
/// samples (prior preservation); `*_i` against held-out real images.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub checkpoint: String,
    pub fid_toy_b: f64,
    pub kid_toy_b: f64,
    pub fid_toy_i: f64,
    pub kid_toy_i: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub iou: f64,
    pub probe_acc: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "checkpoint,fid_toy_B,kid_toy_B,fid_toy_I,kid_toy_I,psnr,ssim,iou,probe_acc";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.4},{:.6},{:.6},{:.4}",
            self.checkpoint,
            self.fid_toy_b,
            self.kid_toy_b,
            self.fid_toy_i,
            self.kid_toy_i,
            self.psnr,
            self.ssim,
            self.iou,
            self.probe_acc
        )
    }
}

// ---- fixed random feature embedder -------------------------------------

/// Untrained, seeded convolutional features. Two strided 3x3 conv stages
/// with tanh nonlinearity, then global mean+max pooling into 64 dims.
/// Purely a fixed measurement device; never trained.
pub struct FeatureEmbedder {
    w1: Vec<f64>, // [8, 3, 3, 3]
    b1: Vec<f64>,
    w2: Vec<f64>, // [32, 8, 3, 3]
    b2: Vec<f64>,
}

const C1_CH: usize = 8;
const C2_CH: usize = 24;

impl FeatureEmbedder {
    pub fn new(seed: u64) -> Self {
        let mut rng = rng_from(derive_seed(seed, "feature-embedder", 0));
        let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
            let std = (2.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-std..std)).collect()
        };
        FeatureEmbedder {
            w1: draw(C1_CH * 3 * 3 * 3, 27),
            b1: draw(C1_CH, 27),
            w2: draw(C2_CH * C1_CH * 3 * 3, C1_CH * 9),
            b2: draw(C2_CH, C1_CH * 9),
        }
    }

    /// Embed one planar [3, side, side] image into a 64-d feature vector.
    pub fn embed(&self, image: &[f32], side: usize) -> Result<Vec<f64>> {
        if image.len() != 3 * side * side || side < 8 {
            return Err(MetricError::Contract {
                op: "FeatureEmbedder::embed",
                msg: format!("expected [3,{side},{side}] with side >= 8, got {} values", image.len()),
            });
        }
        let x: Vec<f64> = image.iter().map(|&v| v as f64).collect();
        let h1 = conv_tanh(&x, 3, side, &self.w1, &self.b1, C1_CH, 1);
        let h2 = conv_tanh(&h1, C1_CH, side, &self.w2, &self.b2, C2_CH, 2);
        // Pooling is restricted to foreground pixels: the images are mostly
        // white background, which would otherwise swamp the statistics that
        // carry appearance information. Blank images fall back to full-frame
        // pooling.
        let plane = side * side;
        let sil = silhouette(image, plane);
        let fg1 = if sil.iter().any(|&m| m) {
            sil.clone()
        } else {
            vec![true; plane]
        };
        let half = side / 2;
        let fg2: Vec<bool> = (0..half * half)
            .map(|i| {
                let (y, x) = (i / half * 2, i % half * 2);
                fg1[y * side + x] || fg1[y * side + x + 1] || fg1[(y + 1) * side + x] || fg1[(y + 1) * side + x + 1]
            })
            .collect();
        // Mean+std pooling of both stages; the full-resolution first stage
        // retains the high-frequency texture that distinguishes the domains.
        let mut out = Vec::with_capacity(FEATURE_DIM);
        pool_mean_std(&h1, C1_CH, &fg1, &mut out);
        pool_mean_std(&h2, C2_CH, &fg2, &mut out);
        debug_assert_eq!(out.len(), FEATURE_DIM);
        Ok(out)
    }

    pub fn embed_set(&self, samples: &[ToyGridSample]) -> Result<Vec<Vec<f64>>> {
        samples
            .iter()
            .map(|s| self.embed(&s.image, s.full_side()))
            .collect()
    }
}

fn pool_mean_std(h: &[f64], channels: usize, fg: &[bool], out: &mut Vec<f64>) {
    let plane = fg.len();
    let n = fg.iter().filter(|&&m| m).count().max(1) as f64;
    for c in 0..channels {
        let ch = &h[c * plane..(c + 1) * plane];
        let picked = || ch.iter().zip(fg).filter(|(_, &m)| m).map(|(v, _)| *v);
        let m = picked().sum::<f64>() / n;
        let var = picked().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        out.push(m);
        out.push(var.sqrt());
    }
}

/// Stride-`st` 3x3 same-padding convolution followed by tanh.
fn conv_tanh(x: &[f64], c_in: usize, side: usize, w: &[f64], b: &[f64], c_out: usize, st: usize) -> Vec<f64> {
    let so = side / st;
    let mut out = vec![0.0; c_out * so * so];
    for co in 0..c_out {
        for oy in 0..so {
            for ox in 0..so {
                let mut acc = b[co];
                for ci in 0..c_in {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let y = (oy * st + ky) as isize - 1;
                            let xx = (ox * st + kx) as isize - 1;
                            if y < 0 || xx < 0 || y >= side as isize || xx >= side as isize {
                                continue;
                            }
                            acc += w[((co * c_in + ci) * 3 + ky) * 3 + kx]
                                * x[ci * side * side + y as usize * side + xx as usize];
                        }
                    }
                }
                out[co * so * so + oy * so + ox] = acc.tanh();
            }
        }
    }
    out
}

// ---- Fréchet / kernel distances -----------------------------------------

fn mean_cov(feats: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let n = feats.len();
    let d = feats[0].len();
    let mut mu = vec![0.0; d];
    for f in feats {
        for j in 0..d {
            mu[j] += f[j];
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut cov = DMatrix::zeros(d, d);
    for f in feats {
        for i in 0..d {
            let di = f[i] - mu[i];
            for j in i..d {
                cov[(i, j)] += di * (f[j] - mu[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[(i, j)] /= denom;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    (mu, cov)
}

/// Symmetric PSD square root via eigendecomposition, clamping negative
/// eigenvalues to zero.
fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let q = eig.eigenvectors;
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &q * DMatrix::from_diagonal(&vals) * q.transpose()
}

/// Fréchet distance between two feature sets:
/// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).
/// Covariances are regularized with +1e-6 I against rank deficiency.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = a.first().map_or(0, |f| f.len());
    for (name, set) in [("a", a), ("b", b)] {
        if set.len() < d + 1 {
            return Err(MetricError::Contract {
                op: "frechet_distance",
                msg: format!("set {name} has {} samples, need >= dim+1 = {}", set.len(), d + 1),
            });
        }
    }
    let (mu_a, mut sa) = mean_cov(a);
    let (mu_b, mut sb) = mean_cov(b);
    for i in 0..d {
        sa[(i, i)] += 1e-6;
        sb[(i, i)] += 1e-6;
    }
    // Tr((Sa Sb)^(1/2)) = Tr((Sb^(1/2) Sa Sb^(1/2))^(1/2)), which keeps the
    // argument symmetric PSD so a real eigendecomposition suffices.
    let rb = sym_sqrt(&sb);
    let inner = &rb * &sa * &rb;
    let tr_sqrt = sym_sqrt(&inner).trace();
    let mean_sq: f64 = mu_a
        .iter()
        .zip(&mu_b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(mean_sq + sa.trace() + sb.trace() - 2.0 * tr_sqrt)
}

fn poly3(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let k = dot / d + 1.0;
    k * k * k
}

/// Unbiased MMD^2 with the degree-3 polynomial kernel (xTy/dim + 1)^3.
/// May be slightly negative by construction of the unbiased estimator.
pub fn kernel_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(MetricError::Contract {
            op: "kernel_distance",
            msg: format!("need >= 2 samples per set, got {} and {}", a.len(), b.len()),
        });
    }
    // Canonicalize the argument order so the estimator is bit-exactly
    // symmetric despite floating-point summation order.
    let swap = match a.len().cmp(&b.len()) {
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Equal => a
            .iter()
            .flatten()
            .zip(b.iter().flatten())
            .find_map(|(x, y)| match x.partial_cmp(y) {
                Some(std::cmp::Ordering::Equal) | None => None,
                Some(o) => Some(o == std::cmp::Ordering::Greater),
            })
            .unwrap_or(false),
    };
    let (a, b) = if swap { (b, a) } else { (a, b) };
    let (m, n) = (a.len(), b.len());
    let mut kxx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kxx += poly3(&a[i], &a[j]);
            }
        }
    }
    kxx /= (m * (m - 1)) as f64;
    let mut kyy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kyy += poly3(&b[i], &b[j]);
            }
        }
    }
    kyy /= (n * (n - 1)) as f64;
    let mut kxy = 0.0;
    for x in a {
        for y in b {
            kxy += poly3(x, y);
        }
    }
    kxy /= (m * n) as f64;
    Ok(kxx + kyy - 2.0 * kxy)
}

// ---- control adherence ----------------------------------------------------

pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn psnr(a: &[f32], b: &[f32], mask: Option<&[bool]>) -> f64 {
    let mut se = 0.0f64;
    let mut n = 0usize;
    for i in 0..a.len() {
        if let Some(m) = mask {
            if !m[i % m.len()] {
                continue;
            }
        }
        let d = (a[i] - b[i]) as f64;
        se += d * d;
        n += 1;
    }
    if n == 0 {
        return PSNR_CAP_DB;
    }
    let mse = se / n as f64;
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP_DB)
    }
}

/// Global SSIM over (optionally masked) pixels, standard constants for
/// data in [0,1]. Symmetric in its two inputs.
pub fn ssim(a: &[f32], b: &[f32], mask: Option<&[bool]>) -> f64 {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..a.len() {
        if let Some(m) = mask {
            if !m[i % m.len()] {
                continue;
            }
        }
        xs.push(a[i] as f64);
        ys.push(b[i] as f64);
    }
    if xs.is_empty() {
        return 1.0;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cxy = 0.0;
    for i in 0..xs.len() {
        vx += (xs[i] - mx) * (xs[i] - mx);
        vy += (ys[i] - my) * (ys[i] - my);
        cxy += (xs[i] - mx) * (ys[i] - my);
    }
    vx /= n;
    vy /= n;
    cxy /= n;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Support mask of a control map: pixels where any channel is nonzero.
pub fn control_support(ctrl: &[f32], plane: usize) -> Vec<bool> {
    (0..plane)
        .map(|i| ctrl[i] != 0.0 || ctrl[plane + i] != 0.0 || ctrl[2 * plane + i] != 0.0)
        .collect()
}

fn boundary(mask: &[bool], side: usize) -> Vec<f32> {
    let at = |x: isize, y: isize| -> bool {
        x >= 0 && y >= 0 && x < side as isize && y < side as isize && mask[y as usize * side + x as usize]
    };
    let mut out = vec![0.0f32; side * side];
    for y in 0..side {
        for x in 0..side {
            if !mask[y * side + x] {
                continue;
            }
            let (xi, yi) = (x as isize, y as isize);
            if !at(xi - 1, yi) || !at(xi + 1, yi) || !at(xi, yi - 1) || !at(xi, yi + 1) {
                out[y * side + x] = 1.0;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ControlAdherence {
    pub iou: f64,
    pub psnr_edges: f64,
}

/// Compare a generated grid's silhouette against the control map support.
/// Both inputs are full-grid planar [3, side, side].
pub fn control_adherence(generated: &[f32], control: &[f32], side: usize) -> Result<ControlAdherence> {
    let plane = side * side;
    if generated.len() != 3 * plane || control.len() != 3 * plane {
        return Err(MetricError::Contract {
            op: "control_adherence",
            msg: format!("expected two [3,{side},{side}] images"),
        });
    }
    let gen_mask = silhouette(generated, plane);
    let ctrl_mask = control_support(control, plane);
    let ge = boundary(&gen_mask, side);
    let ce = boundary(&ctrl_mask, side);
    Ok(ControlAdherence {
        iou: iou(&gen_mask, &ctrl_mask),
        psnr_edges: psnr(&ge, &ce, None),
    })
}

// ---- cross-view consistency -------------------------------------------

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ViewConsistency {
    pub psnr: f64,
    pub ssim: f64,
}

/// Mean over views 1..3 of PSNR/SSIM between rotate_k(view 0) and view k,
/// masked to the union of both foregrounds. Exploits the dataset's known
/// per-view rotations.
pub fn cross_view_consistency(grid: &[f32], view_side: usize) -> Result<ViewConsistency> {
    let full = 2 * view_side;
    if grid.len() != 3 * full * full {
        return Err(MetricError::Contract {
            op: "cross_view_consistency",
            msg: format!("expected a [3,{full},{full}] grid"),
        });
    }
    let v0 = extract_view(grid, view_side, 0);
    let plane = view_side * view_side;
    let mut p_acc = 0.0;
    let mut s_acc = 0.0;
    for k in 1..4 {
        let expect = rotate_quarters(&v0, view_side, k);
        let got = extract_view(grid, view_side, k);
        let ma = silhouette(&expect, plane);
        let mb = silhouette(&got, plane);
        let mask: Vec<bool> = ma.iter().zip(&mb).map(|(&x, &y)| x || y).collect();
        p_acc += psnr(&expect, &got, Some(&mask));
        s_acc += ssim(&expect, &got, Some(&mask));
    }
    Ok(ViewConsistency {
        psnr: p_acc / 3.0,
        ssim: s_acc / 3.0,
    })
}

// ---- domain probe --------------------------------------------------------

/// Train logistic regression on the first half of (features, labels), report
/// held-out accuracy on the second half. Features are standardized with
/// train-split statistics.
pub fn logistic_probe(features: &[Vec<f64>], labels: &[bool]) -> Result<f64> {
    let n = features.len();
    if n < 4 || n != labels.len() {
        return Err(MetricError::Contract {
            op: "logistic_probe",
            msg: format!("need >= 4 labelled samples, got {n}"),
        });
    }
    let d = features[0].len();
    let half = n / 2;
    let (train_x, test_x) = features.split_at(half);
    let (train_y, test_y) = labels.split_at(half);

    let mut mu = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for f in train_x {
        for j in 0..d {
            mu[j] += f[j];
        }
    }
    for m in &mut mu {
        *m /= half as f64;
    }
    for f in train_x {
        for j in 0..d {
            sd[j] += (f[j] - mu[j]) * (f[j] - mu[j]);
        }
    }
    for s in &mut sd {
        *s = (*s / half as f64).sqrt().max(1e-8);
    }
    let norm = |f: &[f64]| -> Vec<f64> {
        (0..d).map(|j| (f[j] - mu[j]) / sd[j]).collect()
    };

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let lr = 0.5;
    for _ in 0..300 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (f, &y) in train_x.iter().zip(train_y.iter()) {
            let x = norm(f);
            let z: f64 = w.iter().zip(&x).map(|(a, c)| a * c).sum::<f64>() + b;
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - if y { 1.0 } else { 0.0 };
            for j in 0..d {
                gw[j] += err * x[j];
            }
            gb += err;
        }
        for j in 0..d {
            w[j] -= lr * (gw[j] / half as f64 + 1e-4 * w[j]);
        }
        b -= lr * gb / half as f64;
    }

    let mut correct = 0usize;
    for (f, &y) in test_x.iter().zip(test_y.iter()) {
        let x = norm(f);
        let z: f64 = w.iter().zip(&x).map(|(a, c)| a * c).sum::<f64>() + b;
        if (z > 0.0) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_y.len() as f64)
}

/// Paired mid-block activation probe. Each grid is run twice, once under an
/// all-REAL and once under an all-SYN plan; the tokens entering block N_B/2
/// are mean-pooled and centered within the pair, so per-image content cancels
/// and only the shifter pathway separates the classes. A linear probe is fit
/// on the first half of the pairs and scored on the rest. With zeroed
/// shifters both variants are identical, the centered features vanish, and
/// accuracy sits at chance.
pub fn domain_probe<F: Scalar>(
    model: &Backbone<F>,
    samples: &[ToyGridSample],
    t: usize,
) -> Result<f64> {
    let mid = model.cfg.n_blocks / 2;
    let mut feats: Vec<Vec<f64>> = Vec::with_capacity(2 * samples.len());
    let mut labels = Vec::with_capacity(2 * samples.len());
    no_grad(|| -> Result<()> {
        for s in samples {
            let full = s.full_side();
            let mut input = s.image.iter().map(|&v| F::from_f64(v as f64)).collect::<Vec<_>>();
            match &s.control {
                Some(c) => input.extend(c.iter().map(|&v| F::from_f64(v as f64))),
                None => input.extend(std::iter::repeat(F::zero()).take(s.image.len())),
            }
            let x = Tensor::from_vec(&[model.cfg.in_channels(), full, full], input)?;
            let mut pair: Vec<Vec<f64>> = Vec::with_capacity(2);
            for dom in [DomainId::Real, DomainId::Syn] {
                let plan = vec![dom; model.cfg.n_blocks];
                let mut pooled: Option<Vec<f64>> = None;
                {
                    let mut tap = |b: usize, feat: &Tensor<F>| {
                        if b == mid {
                            let data = feat.data();
                            let d = model.cfg.d_model;
                            let rows = data.len() / d;
                            let mut m = vec![0.0f64; d];
                            for r in 0..rows {
                                for j in 0..d {
                                    m[j] += data[r * d + j].to_f64();
                                }
                            }
                            for v in &mut m {
                                *v /= rows as f64;
                            }
                            pooled = Some(m);
                        }
                    };
                    let mut ctx =
                        ForwardCtx::new(t, Some(s.prompt_id), AttentionMode::GridFull, Some(&plan));
                    ctx.tap = Some(&mut tap);
                    model.forward(&x, &mut ctx)?;
                }
                pair.push(pooled.expect("mid block tap must fire"));
            }
            let d = pair[0].len();
            let center: Vec<f64> = (0..d).map(|j| 0.5 * (pair[0][j] + pair[1][j])).collect();
            for (k, dom) in [DomainId::Real, DomainId::Syn].into_iter().enumerate() {
                feats.push((0..d).map(|j| pair[k][j] - center[j]).collect());
                labels.push(dom == DomainId::Real);
            }
        }
        Ok(())
    })?;
    logistic_probe(&feats, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss_set(n: usize, d: usize, mu: f64, sigma: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_from(seed);
        (0..n)
            .map(|_| {
                (0..d)
                    .map(|_| {
                        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                        let u2: f64 = rng.gen_range(0.0..1.0);
                        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                        mu + sigma * z
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn fid_identical_sets_is_zero() {
        let a = gauss_set(40, 8, 0.3, 1.0, 1);
        let f = frechet_distance(&a, &a).unwrap();
        assert!(f.abs() < 1e-6, "FID(a,a) = {f}");
    }

    #[test]
    fn fid_matches_gaussian_closed_form() {
        // Equal isotropic covariances cancel; FID -> |mu_a - mu_b|^2 = d * delta^2.
        let d = 8;
        let delta = 0.7;
        let a = gauss_set(4000, d, 0.0, 0.5, 2);
        let b = gauss_set(4000, d, delta, 0.5, 3);
        let expect = d as f64 * delta * delta;
        let f = frechet_distance(&a, &b).unwrap();
        assert!(
            (f - expect).abs() / expect < 0.05,
            "FID {f} vs closed form {expect}"
        );
    }

    #[test]
    fn fid_not_affine_invariant() {
        let a = gauss_set(100, 4, 0.0, 1.0, 4);
        let b = gauss_set(100, 4, 0.5, 1.0, 5);
        let scale = |s: &[Vec<f64>]| -> Vec<Vec<f64>> {
            s.iter().map(|f| f.iter().map(|v| v * 3.0).collect()).collect()
        };
        let f1 = frechet_distance(&a, &b).unwrap();
        let f2 = frechet_distance(&scale(&a), &scale(&b)).unwrap();
        assert!((f1 - f2).abs() > 1e-3, "scaling must change the value");
    }

    #[test]
    fn fid_rejects_small_sets() {
        let a = gauss_set(4, 8, 0.0, 1.0, 6);
        assert!(frechet_distance(&a, &a).is_err());
    }

    #[test]
    fn kid_near_zero_on_identical_distribution() {
        let a = gauss_set(500, FEATURE_DIM, 0.0, 0.3, 7);
        let b = gauss_set(500, FEATURE_DIM, 0.0, 0.3, 8);
        let k = kernel_distance(&a, &b).unwrap();
        assert!(k.abs() < 1e-3, "KID on matched Gaussians = {k}");
    }

    #[test]
    fn kid_constant_sets_closed_form() {
        // x = 0, y = c (constant): k(0,0)=1, k(c,c)=(|c|^2/d+1)^3, k(0,c)=1
        // MMD^2 = 1 + (c^2/d*d + 1)^3 - 2.
        let d = 4;
        let c = 0.5;
        let a = vec![vec![0.0; d]; 6];
        let b = vec![vec![c; d]; 6];
        let kcc = (c * c * d as f64 / d as f64 + 1.0).powi(3);
        let expect = 1.0 + kcc - 2.0;
        let k = kernel_distance(&a, &b).unwrap();
        assert!((k - expect).abs() < 1e-12, "KID {k} vs {expect}");
    }

    #[test]
    fn kid_is_symmetric() {
        let a = gauss_set(30, 6, 0.0, 1.0, 9);
        let b = gauss_set(40, 6, 0.4, 1.2, 10);
        assert_eq!(
            kernel_distance(&a, &b).unwrap(),
            kernel_distance(&b, &a).unwrap()
        );
    }

    #[test]
    fn iou_hand_cases() {
        let ones = vec![true; 16];
        let zeros = vec![false; 16];
        assert_eq!(iou(&ones, &ones), 1.0);
        assert_eq!(iou(&ones, &zeros), 0.0);
        // Half-overlapping unit squares offset by 0.5: |A ∩ B| = 8 of 16
        // cells, |A ∪ B| = 24 -> 1/3.
        let a: Vec<bool> = (0..24).map(|i| i < 16).collect();
        let b: Vec<bool> = (0..24).map(|i| i >= 8).collect();
        assert_eq!(iou(&a, &b), 1.0 / 3.0);
    }

    #[test]
    fn psnr_cap_and_noise_monotonic() {
        let a = vec![0.5f32; 100];
        assert_eq!(psnr(&a, &a, None), PSNR_CAP_DB);
        let mut rng = rng_from(11);
        let mut noisy = |amp: f32| -> Vec<f32> {
            a.iter().map(|v| v + rng.gen_range(-amp..amp)).collect()
        };
        let p1 = psnr(&a, &noisy(0.05), None);
        let p2 = psnr(&a, &noisy(0.2), None);
        assert!(p1 > p2, "more noise must lower PSNR: {p1} vs {p2}");
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let mut rng = rng_from(12);
        let a: Vec<f32> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f32> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        assert!((ssim(&a, &a, None) - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&a, &b, None), ssim(&b, &a, None));
    }

    #[test]
    fn consistency_perfect_on_synthetic_sample() {
        let s = crate::datagen::render_synthetic(2, 21, 16);
        let v = cross_view_consistency(&s.image, 16).unwrap();
        assert_eq!(v.psnr, PSNR_CAP_DB);
        assert!((v.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn consistency_detects_noise_view() {
        let s = crate::datagen::render_synthetic(2, 21, 16);
        let mut img = s.image.clone();
        // Replace view 3 with uniform noise.
        let full = 32;
        let plane = full * full;
        let mut rng = rng_from(13);
        for c in 0..3 {
            for y in 16..32 {
                for x in 16..32 {
                    img[c * plane + y * full + x] = rng.gen_range(0.0..1.0);
                }
            }
        }
        let v = cross_view_consistency(&img, 16).unwrap();
        // Two views still perfect (60 dB), one near the noise floor (<12 dB).
        assert!(v.psnr < (2.0 * PSNR_CAP_DB + 12.0) / 3.0);
    }

    #[test]
    fn control_adherence_ground_truth_iou_one() {
        let s = crate::datagen::render_synthetic(1, 33, 16);
        let c = control_adherence(&s.image, s.control.as_ref().unwrap(), 32).unwrap();
        assert_eq!(c.iou, 1.0);
        assert_eq!(c.psnr_edges, PSNR_CAP_DB);
    }

    #[test]
    fn probe_separable_and_shuffled() {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        let mut rng = rng_from(14);
        for i in 0..120 {
            let y = i % 2 == 0;
            let base = if y { 1.0 } else { -1.0 };
            feats.push((0..6).map(|_| base + rng.gen_range(-0.3..0.3)).collect());
            labels.push(y);
        }
        let acc = logistic_probe(&feats, &labels).unwrap();
        assert!(acc >= 0.95, "separable data must probe high: {acc}");
        // Label-shuffled control: features carry no class signal.
        let noise: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let ls: Vec<bool> = (0..200).map(|i| i % 2 == 0).collect();
        let acc = logistic_probe(&noise, &ls).unwrap();
        assert!(acc < 0.75, "no-signal probe should hover near chance: {acc}");
    }

    #[test]
    fn embedder_is_deterministic_and_separates_domains() {
        let e1 = FeatureEmbedder::new(17);
        let e2 = FeatureEmbedder::new(17);
        let split = crate::datagen::make_split(100, 0, 18, 16);
        let fa = e1.embed_set(&split.train_syn).unwrap();
        let fb = e2.embed_set(&split.train_syn).unwrap();
        assert_eq!(fa, fb, "same seed must embed identically");
        let fr = e1.embed_set(&split.train_real).unwrap();
        // Fewer than dim+1 samples violates the FID precondition.
        assert!(frechet_distance(&fa[..40].to_vec(), &fr[..40].to_vec()).is_err());
        // With enough samples the domains sit far apart in feature space.
        let fid = frechet_distance(&fa, &fr).unwrap();
        assert!(fid > 0.1, "cross-domain FID suspiciously small: {fid}");
        // The embedding must make the two toy domains linearly separable.
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..fa.len() {
            feats.push(fa[i].clone());
            labels.push(false);
            feats.push(fr[i].clone());
            labels.push(true);
        }
        let acc = logistic_probe(&feats, &labels).unwrap();
        assert!(acc >= 0.9, "embedder must separate domains: acc {acc}");
    }
}

