//! Feature capture at (timestep, block) taps, PCA visualization of the
//! captured token features, and the layer-selective fine-tuning case study.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::DMatrix;

use crate::adapters::DomainId;
use crate::backbone::{AttentionMode, Backbone, BackboneConfig, ForwardCtx, ParamSelector};
use crate::checkpoint::{load_state_dict, state_dict};
use crate::datagen::ToyGridSample;
use crate::diffusion::{sample, NoiseSchedule, SamplerConfig};
use crate::eval::{frechet_distance, FeatureEmbedder};
use crate::numerics::{NumericsError, Scalar, Tensor};
use crate::ppm::write_ppm;
use crate::training::{train, DataPools, TrainRecipe};
use crate::util::{derive_seed, rng_from};

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("probe contract violated in {op}: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Train(#[from] crate::training::TrainError),
    #[error(transparent)]
    Metric(#[from] crate::eval::MetricError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error(transparent)]
    Ppm(#[from] crate::ppm::PpmError),
}

type Result<T> = std::result::Result<T, ProbeError>;

/// Cartesian tap grid: every listed timestep crossed with every listed block.
#[derive(Debug, Clone)]
pub struct TapSpec {
    pub timesteps: Vec<usize>,
    pub blocks: Vec<usize>,
}

impl TapSpec {
    /// Reference taps: t in {800, 700, 500, 200} and a begin/middle/end
    /// block triple. Timesteps are rescaled proportionally when the
    /// schedule horizon differs from 1000.
    pub fn default_for(n_blocks: usize, horizon: usize) -> Self {
        let timesteps = [800usize, 700, 500, 200]
            .iter()
            .map(|&t| t * horizon / 1000)
            .collect();
        TapSpec {
            timesteps,
            blocks: vec![0, n_blocks / 2, n_blocks - 1],
        }
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.timesteps.len() * self.blocks.len());
        for &t in &self.timesteps {
            for &b in &self.blocks {
                out.push((t, b));
            }
        }
        out
    }

    fn validate(&self, horizon: usize, n_blocks: usize) -> Result<()> {
        for &t in &self.timesteps {
            if t >= horizon {
                return Err(ProbeError::Contract {
                    op: "TapSpec",
                    msg: format!("tap timestep {t} outside [0,{horizon})"),
                });
            }
        }
        for &b in &self.blocks {
            if b >= n_blocks {
                return Err(ProbeError::Contract {
                    op: "TapSpec",
                    msg: format!("tap block {b} outside [0,{n_blocks})"),
                });
            }
        }
        if self.timesteps.is_empty() || self.blocks.is_empty() {
            return Err(ProbeError::Contract {
                op: "TapSpec",
                msg: "empty tap set".into(),
            });
        }
        Ok(())
    }
}

/// Block-input token features captured pre-shifter, keyed by (t, block).
/// Each entry is a row-major [n_tokens, d] matrix.
pub struct FeatureCapture {
    pub n_tokens: usize,
    pub d: usize,
    pub features: BTreeMap<(usize, usize), Vec<f32>>,
}

/// Run one noised forward per tap timestep, recording the block-input
/// tokens at every requested block. The tap is read-only: the forward
/// output is bit-identical with and without it.
pub fn capture<F: Scalar>(
    model: &Backbone<F>,
    schedule: &NoiseSchedule,
    sample_in: &ToyGridSample,
    plan: Option<&[DomainId]>,
    mode: AttentionMode,
    spec: &TapSpec,
    seed: u64,
) -> Result<FeatureCapture> {
    let cfg = &model.cfg;
    spec.validate(schedule.horizon, cfg.n_blocks)?;
    let full = cfg.full_side();
    if sample_in.full_side() != full {
        return Err(ProbeError::Contract {
            op: "capture",
            msg: format!("sample side {} vs model side {full}", sample_in.full_side()),
        });
    }
    let plane = full * full;
    let wanted: BTreeSet<usize> = spec.blocks.iter().copied().collect();
    let mut features = BTreeMap::new();

    for &t in &spec.timesteps {
        let image: Vec<F> = sample_in.image.iter().map(|&v| F::from_f64(v as f64)).collect();
        let mut rng = rng_from(derive_seed(seed, "capture", t as u64));
        let eps = Tensor::<F>::randn(&[cfg.channels_image, full, full], 1.0, &mut rng).data();
        let mut input = schedule.q_sample(&image, t, &eps)?;
        match &sample_in.control {
            Some(c) if sample_in.domain == DomainId::Syn => {
                input.extend(c.iter().map(|&v| F::from_f64(v as f64)));
            }
            _ => input.extend(std::iter::repeat(F::zero()).take(cfg.channels_control * plane)),
        }
        let x = Tensor::from_vec(&[cfg.in_channels(), full, full], input)?;

        let mut grabbed: BTreeMap<usize, Vec<f32>> = BTreeMap::new();
        {
            let mut tap = |b: usize, tokens: &Tensor<F>| {
                if wanted.contains(&b) {
                    let row: Vec<f32> =
                        tokens.data().into_iter().map(|v| Scalar::to_f64(v) as f32).collect();
                    grabbed.insert(b, row);
                }
            };
            let mut ctx = ForwardCtx::new(t, Some(sample_in.prompt_id), mode, plan);
            ctx.tap = Some(&mut tap);
            model.forward(&x, &mut ctx)?;
        }
        for (b, row) in grabbed {
            features.insert((t, b), row);
        }
    }

    Ok(FeatureCapture {
        n_tokens: cfg.n_tokens(),
        d: cfg.d_model,
        features,
    })
}

/// Principal components of a [n, d] token matrix via covariance
/// eigendecomposition. Returns (eigenvalues descending, projections),
/// where projections is row-major [n, k].
pub fn pca_components(features: &[f32], n: usize, d: usize, k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n < 3 || features.len() != n * d || k == 0 || k > d {
        return Err(ProbeError::Contract {
            op: "pca_components",
            msg: format!("need >=3 tokens and k in [1,{d}], got n={n}, k={k}"),
        });
    }
    let mut mean = vec![0.0f64; d];
    for row in features.chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = DMatrix::from_fn(n, d, |i, j| features[i * d + j] as f64 - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let eigvals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let mut proj = vec![0.0f64; n * k];
    for (c, &i) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(i);
        for row in 0..n {
            let mut acc = 0.0;
            for j in 0..d {
                acc += centered[(row, j)] * v[j];
            }
            proj[row * k + c] = acc;
        }
    }
    Ok((eigvals, proj))
}

/// Map the top-3 principal components of one tap to an RGB image laid out
/// on the token grid (one pixel per patch, views in their grid positions).
/// Each channel is min-max normalized to [0,1]; a zero-variance component
/// renders as a constant 0.5 channel.
pub fn pca_rgb(features: &[f32], cfg: &BackboneConfig) -> Result<Vec<f32>> {
    let n = cfg.n_tokens();
    let d = cfg.d_model;
    let (_, proj) = pca_components(features, n, d, 3.min(d))?;
    let k = 3.min(d);
    let q = cfg.patches_per_view_side();
    let side = cfg.grid * q;
    let plane = side * side;
    let mut img = vec![0.5f32; 3 * plane];
    for c in 0..k {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for row in 0..n {
            let v = proj[row * k + c];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = hi - lo;
        for tok in 0..n {
            let view = tok / (q * q);
            let within = tok % (q * q);
            let (vr, vc) = (view / cfg.grid, view % cfg.grid);
            let (py, px) = (within / q, within % q);
            let y = vr * q + py;
            let x = vc * q + px;
            let val = if span < 1e-12 {
                0.5
            } else {
                (proj[tok * k + c] - lo) / span
            };
            img[c * plane + y * side + x] = val as f32;
        }
    }
    Ok(img)
}

/// Scale a planar [3, s, s] image up by an integer factor (nearest).
fn upscale(img: &[f32], s: usize, f: usize) -> Vec<f32> {
    let out_s = s * f;
    let mut out = vec![0.0f32; 3 * out_s * out_s];
    for c in 0..3 {
        for y in 0..out_s {
            for x in 0..out_s {
                out[c * out_s * out_s + y * out_s + x] = img[c * s * s + (y / f) * s + x / f];
            }
        }
    }
    out
}

/// Write one `feat_t{t}_b{block}.ppm` per tap plus a per-timestep montage
/// with the block maps side by side. Returns the written paths.
pub fn emit_feature_maps(
    dir: &Path,
    cap: &FeatureCapture,
    cfg: &BackboneConfig,
    spec: &TapSpec,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| ProbeError::Contract {
        op: "emit_feature_maps",
        msg: e.to_string(),
    })?;
    let q = cfg.patches_per_view_side();
    let side = cfg.grid * q;
    // Upscale by the patch size so the maps overlay the pixel grids.
    let f = cfg.patch_size;
    let out_s = side * f;
    let mut written = Vec::new();
    for &t in &spec.timesteps {
        let mut strip = vec![0.0f32; 3 * out_s * out_s * spec.blocks.len()];
        let strip_w = out_s * spec.blocks.len();
        for (bi, &b) in spec.blocks.iter().enumerate() {
            let feats = cap.features.get(&(t, b)).ok_or_else(|| ProbeError::Contract {
                op: "emit_feature_maps",
                msg: format!("no capture for tap (t={t}, block={b})"),
            })?;
            let rgb = upscale(&pca_rgb(feats, cfg)?, side, f);
            let path = dir.join(format!("feat_t{t}_b{b}.ppm"));
            write_ppm(&path, out_s, out_s, &rgb)?;
            written.push(path);
            for c in 0..3 {
                for y in 0..out_s {
                    for x in 0..out_s {
                        strip[c * out_s * strip_w + y * strip_w + bi * out_s + x] =
                            rgb[c * out_s * out_s + y * out_s + x];
                    }
                }
            }
        }
        let path = dir.join(format!("feat_t{t}_montage.ppm"));
        write_ppm(&path, strip_w, out_s, &strip)?;
        written.push(path);
    }
    Ok(written)
}

/// Build a structural copy of `base` (same config, no adapters) holding the
/// same weights.
fn clone_backbone<F: Scalar>(base: &Backbone<F>) -> Result<Backbone<F>> {
    let copy = Backbone::new(base.cfg.clone(), &mut rng_from(0))?;
    load_state_dict(&copy, &state_dict(base)?, false)?;
    Ok(copy)
}

/// Fine-tune recipe pair for the case study. The split run trains blocks
/// [0, n/2) on SYN batches and [n/2, n) on REAL batches; the control run
/// trains everything on SYN only. Both consume identical step seeds.
pub fn case_study_recipes(steps: usize, batch_size: usize, n_blocks: usize) -> (TrainRecipe, TrainRecipe) {
    let mut full_syn = TrainRecipe::base("case-full-syn", ParamSelector::All, steps, batch_size);
    full_syn.real_fraction = 0.0;

    let half = n_blocks / 2;
    let mut split = TrainRecipe::base(
        "case-layer-split",
        ParamSelector::BlocksInRange(0, half - 1),
        steps,
        batch_size,
    );
    split.selector_real = Some(ParamSelector::BlocksInRange(half, n_blocks - 1));
    split.real_fraction = 0.5;
    split.mode_real = AttentionMode::SingleImage;
    (full_syn, split)
}

pub struct CaseStudyConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Grids sampled per run for the realism comparison.
    pub n_samples: usize,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

pub struct CaseStudyOutcome {
    pub fid_full_syn: f64,
    pub fid_layer_split: f64,
    /// Sampled grids, clamped to [0,1], planar [3, full, full].
    pub samples_full_syn: Vec<Vec<f32>>,
    pub samples_layer_split: Vec<Vec<f32>>,
}

fn sample_grids<F: Scalar>(
    model: &Backbone<F>,
    schedule: &NoiseSchedule,
    cs: &CaseStudyConfig,
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(cs.n_samples);
    for i in 0..cs.n_samples {
        let prompt = i % model.cfg.n_prompts;
        let x = sample(
            model,
            schedule,
            &cs.sampler,
            Some(prompt),
            None,
            None,
            derive_seed(cs.seed, "case-sample", i as u64),
        )?;
        out.push(
            x.into_iter()
                .map(|v| (Scalar::to_f64(v) as f32).clamp(0.0, 1.0))
                .collect(),
        );
    }
    Ok(out)
}

/// Fine-tune the pretrained base twice — full model on SYN vs a 50/50
/// layer split across SYN/REAL — then compare realism of samples from each
/// against the provided REAL reference embeddings.
pub fn layer_selective_case_study<F: Scalar>(
    base: &Backbone<F>,
    schedule: &NoiseSchedule,
    data: &DataPools,
    real_reference: &[Vec<f64>],
    embedder: &FeatureEmbedder,
    cs: &CaseStudyConfig,
) -> Result<CaseStudyOutcome> {
    let (full_syn, split) = case_study_recipes(cs.steps, cs.batch_size, base.cfg.n_blocks);
    let full = base.cfg.full_side();

    let run = |recipe: &TrainRecipe| -> Result<(f64, Vec<Vec<f32>>)> {
        let mut model = clone_backbone(base)?;
        let mut sink = |_: &crate::training::StepRecord| {};
        train(&mut model, schedule, recipe, data, cs.seed, &mut sink)?;
        let grids = sample_grids(&model, schedule, cs)?;
        let feats: Vec<Vec<f64>> = grids
            .iter()
            .map(|g| embedder.embed(g, full))
            .collect::<std::result::Result<_, _>>()?;
        let fid = frechet_distance(&feats, real_reference)?;
        Ok((fid, grids))
    };

    let (fid_full_syn, samples_full_syn) = run(&full_syn)?;
    let (fid_layer_split, samples_layer_split) = run(&split)?;
    Ok(CaseStudyOutcome {
        fid_full_syn,
        fid_layer_split,
        samples_full_syn,
        samples_layer_split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::resolve_plan;
    use crate::datagen::render_synthetic;
    use crate::util::hash_f32s;

    fn tiny() -> (Backbone<f32>, NoiseSchedule) {
        let cfg = BackboneConfig {
            image_side: 8,
            d_model: 16,
            n_heads: 2,
            n_blocks: 4,
            mlp_ratio: 1,
            n_prompts: 4,
            ..BackboneConfig::default()
        };
        let model = Backbone::new(cfg, &mut rng_from(7)).unwrap();
        // The head is zero-initialized; give it signal so non-intrusion is
        // checked against a non-constant output.
        let mut rng = rng_from(8);
        for (name, p) in model.param_groups(&ParamSelector::All).unwrap() {
            if name.starts_with("head.") {
                let n = p.data().len();
                p.set_data(&Tensor::<f32>::randn(&[n], 0.05, &mut rng).data());
            }
        }
        (model, NoiseSchedule::new_linear(1000))
    }

    fn sample_syn(view_side: usize) -> ToyGridSample {
        render_synthetic(1, 42, view_side)
    }

    #[test]
    fn default_taps_match_reference() {
        let spec = TapSpec::default_for(8, 1000);
        assert_eq!(spec.timesteps, vec![800, 700, 500, 200]);
        assert_eq!(spec.blocks, vec![0, 4, 7]);
        assert_eq!(spec.pairs().len(), 12);
    }

    #[test]
    fn capture_non_intrusion_bit_exact() {
        let (mut model, schedule) = tiny();
        model.attach_shifters(4, &mut rng_from(9)).unwrap();
        let s = sample_syn(model.cfg.image_side);
        let spec = TapSpec::default_for(model.cfg.n_blocks, schedule.horizon);
        let plan = resolve_plan(DomainId::Syn, Some(1), model.cfg.n_blocks).unwrap();

        for (mode, use_plan) in [
            (AttentionMode::GridFull, false),
            (AttentionMode::GridFull, true),
            (AttentionMode::SingleImage, true),
        ] {
            let p = use_plan.then_some(plan.as_slice());
            let t = spec.timesteps[0];
            let full = model.cfg.full_side();
            let image: Vec<f32> = s.image.clone();
            let mut rng = rng_from(derive_seed(3, "capture", t as u64));
            let eps = Tensor::<f32>::randn(&[3, full, full], 1.0, &mut rng).data();
            let mut input = schedule.q_sample(&image, t, &eps).unwrap();
            input.extend(s.control.clone().unwrap());
            let x = Tensor::from_vec(&[model.cfg.in_channels(), full, full], input).unwrap();

            let mut ctx = ForwardCtx::new(t, Some(s.prompt_id), mode, p);
            let plain = model.forward(&x, &mut ctx).unwrap().data();

            let mut hits = 0usize;
            let mut tap = |_b: usize, _tok: &Tensor<f32>| hits += 1;
            let mut ctx = ForwardCtx::new(t, Some(s.prompt_id), mode, p);
            ctx.tap = Some(&mut tap);
            let tapped = model.forward(&x, &mut ctx).unwrap().data();

            assert_eq!(hits, model.cfg.n_blocks);
            assert_eq!(plain, tapped, "tap altered the forward output");
        }
    }

    #[test]
    fn capture_yields_all_taps() {
        let (model, schedule) = tiny();
        let s = sample_syn(model.cfg.image_side);
        let spec = TapSpec::default_for(model.cfg.n_blocks, schedule.horizon);
        let cap = capture(&model, &schedule, &s, None, AttentionMode::GridFull, &spec, 5).unwrap();
        assert_eq!(cap.features.len(), spec.pairs().len());
        for (_, feats) in &cap.features {
            assert_eq!(feats.len(), cap.n_tokens * cap.d);
        }
        // Out-of-range taps are contract errors.
        let bad = TapSpec { timesteps: vec![1000], blocks: vec![0] };
        assert!(capture(&model, &schedule, &s, None, AttentionMode::GridFull, &bad, 5).is_err());
    }

    #[test]
    fn pca_constant_features_mid_gray() {
        let (model, _) = tiny();
        let cfg = &model.cfg;
        let feats = vec![1.25f32; cfg.n_tokens() * cfg.d_model];
        let img = pca_rgb(&feats, cfg).unwrap();
        assert!(img.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn pca_rank_one_spectrum() {
        let (model, _) = tiny();
        let cfg = &model.cfg;
        let (n, d) = (cfg.n_tokens(), cfg.d_model);
        // Rank-1: every token is a scalar multiple of one direction.
        let mut feats = vec![0.0f32; n * d];
        for tok in 0..n {
            let a = tok as f32 / n as f32;
            for j in 0..d {
                feats[tok * d + j] = a * (j as f32 + 1.0);
            }
        }
        let (eigvals, _) = pca_components(&feats, n, d, 3).unwrap();
        let total: f64 = eigvals.iter().sum();
        assert!(eigvals[0] / total > 0.999999, "first component should carry all variance");
        let img = pca_rgb(&feats, cfg).unwrap();
        let plane = img.len() / 3;
        assert!(img[plane..].iter().all(|&v| v == 0.5), "channels 2,3 must be mid-gray");
        let c0_span = img[..plane].iter().cloned().fold(f32::NEG_INFINITY, f32::max)
            - img[..plane].iter().cloned().fold(f32::INFINITY, f32::min);
        assert!((c0_span - 1.0).abs() < 1e-6, "first channel spans [0,1]");
    }

    #[test]
    fn pca_reconstruction_error_non_increasing() {
        let (n, d) = (40usize, 8usize);
        let mut rng = rng_from(11);
        let feats = Tensor::<f32>::randn(&[n, d], 1.0, &mut rng).data();
        let mut prev = f64::INFINITY;
        for k in 1..=d {
            let (eigvals, _) = pca_components(&feats, n, d, k).unwrap();
            // Residual variance = sum of eigenvalues beyond the first k.
            let resid: f64 = eigvals.iter().skip(k).sum();
            assert!(resid <= prev + 1e-9, "residual grew at k={k}");
            prev = resid;
        }
        assert!(prev.abs() < 1e-6, "full-rank reconstruction should be exact");
    }

    #[test]
    fn pca_rotation_invariant_spectrum() {
        let (n, d) = (30usize, 6usize);
        let mut rng = rng_from(13);
        let feats = Tensor::<f32>::randn(&[n, d], 1.0, &mut rng).data();
        let raw = Tensor::<f32>::randn(&[d, d], 1.0, &mut rng).data();
        let m = DMatrix::from_fn(d, d, |i, j| raw[i * d + j] as f64);
        let qr = m.qr();
        let q = qr.q();
        let mut rotated = vec![0.0f32; n * d];
        for row in 0..n {
            for j in 0..d {
                let mut acc = 0.0f64;
                for i in 0..d {
                    acc += feats[row * d + i] as f64 * q[(i, j)];
                }
                rotated[row * d + j] = acc as f32;
            }
        }
        let (a, _) = pca_components(&feats, n, d, d).unwrap();
        let (b, _) = pca_components(&rotated, n, d, d).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-4, "spectrum changed under rotation: {x} vs {y}");
        }
    }

    #[test]
    fn emit_writes_ppm_per_tap_and_montage() {
        let (model, schedule) = tiny();
        let s = sample_syn(model.cfg.image_side);
        let spec = TapSpec {
            timesteps: vec![500, 200],
            blocks: vec![0, 3],
        };
        let cap = capture(&model, &schedule, &s, None, AttentionMode::GridFull, &spec, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let written = emit_feature_maps(dir.path(), &cap, &model.cfg, &spec).unwrap();
        assert_eq!(written.len(), 2 * (2 + 1));
        assert!(dir.path().join("feat_t500_b0.ppm").exists());
        assert!(dir.path().join("feat_t200_b3.ppm").exists());
        assert!(dir.path().join("feat_t500_montage.ppm").exists());
    }

    #[test]
    fn layer_split_recipe_updates_disjoint_blocks() {
        let (model, schedule) = tiny();
        let mut model = model;
        let syn: Vec<ToyGridSample> = (0..4).map(|i| render_synthetic(i % 4, i as u64, 8)).collect();
        let real: Vec<ToyGridSample> = (0..4)
            .map(|i| crate::datagen::render_real(i % 4, 100 + i as u64, 8))
            .collect();
        let data = DataPools { syn: &syn, real: &real };
        let (_, split) = case_study_recipes(3, 2, model.cfg.n_blocks);

        let block_hash = |m: &Backbone<f32>, lo: usize, hi: usize| {
            let mut acc = Vec::new();
            for (name, p) in m.param_groups(&ParamSelector::All).unwrap() {
                if crate::training::block_index(&name).is_some_and(|b| b >= lo && b <= hi) {
                    acc.extend(p.data());
                }
            }
            hash_f32s(&acc)
        };

        // All-SYN variant touches only the low half.
        let mut syn_only = split.clone();
        syn_only.real_fraction = 0.0;
        let (lo0, hi0) = (block_hash(&model, 0, 1), block_hash(&model, 2, 3));
        train(&mut model, &schedule, &syn_only, &data, 21, &mut |_| {}).unwrap();
        assert_ne!(block_hash(&model, 0, 1), lo0, "low blocks should move on SYN");
        assert_eq!(block_hash(&model, 2, 3), hi0, "high blocks must not move on SYN");

        // All-REAL variant touches only the high half.
        let mut real_only = split.clone();
        real_only.real_fraction = 1.0;
        let (lo1, hi1) = (block_hash(&model, 0, 1), block_hash(&model, 2, 3));
        train(&mut model, &schedule, &real_only, &data, 22, &mut |_| {}).unwrap();
        assert_eq!(block_hash(&model, 0, 1), lo1, "low blocks must not move on REAL");
        assert_ne!(block_hash(&model, 2, 3), hi1, "high blocks should move on REAL");
    }
}
