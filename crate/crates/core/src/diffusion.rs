//! Noise schedule, forward noising, the diffusion MSE, and the DDIM sampler
//! with classifier-free guidance and inference-time domain shifting.


use serde::{Deserialize, Serialize};

use crate::adapters::DomainId;
use crate::backbone::{AttentionMode, Backbone, ForwardCtx};
use crate::numerics::{no_grad, NumericsError, Result, Scalar, Tensor};
use crate::util::rng_from;

/// Linear-beta schedule. `alpha_bar` uses the exclusive-product convention:
/// `alpha_bar[0] = 1` (clean data) and `alpha_bar[T]` is near zero, so a DDIM
/// step landing on t_prev = 0 returns the clean estimate exactly.
pub struct NoiseSchedule {
    pub horizon: usize,
    pub betas: Vec<f64>,
    alpha_bar: Vec<f64>, // len horizon + 1
}

impl NoiseSchedule {
    pub fn new_linear(horizon: usize) -> Self {
        let (b0, b1) = (1e-4, 2e-2);
        let betas: Vec<f64> = (0..horizon)
            .map(|t| b0 + (b1 - b0) * t as f64 / (horizon - 1) as f64)
            .collect();
        let mut alpha_bar = Vec::with_capacity(horizon + 1);
        let mut acc = 1.0;
        alpha_bar.push(acc);
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        NoiseSchedule {
            horizon,
            betas,
            alpha_bar,
        }
    }

    /// Cumulative signal fraction at timestep t in [0, T].
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_t(&self, t: usize, op: &'static str) -> Result<()> {
        if t > self.horizon {
            return Err(NumericsError::Contract {
                op,
                msg: format!("timestep {} out of range 0..={}", t, self.horizon),
            });
        }
        Ok(())
    }

    /// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
    pub fn q_sample<F: Scalar>(&self, x0: &[F], t: usize, eps: &[F]) -> Result<Vec<F>> {
        self.check_t(t, "q_sample")?;
        if x0.len() != eps.len() {
            return Err(NumericsError::Contract {
                op: "q_sample",
                msg: format!("x0 has {} values, eps has {}", x0.len(), eps.len()),
            });
        }
        let ab = self.alpha_bar(t);
        let (sa, sb) = (F::from_f64(ab.sqrt()), F::from_f64((1.0 - ab).sqrt()));
        Ok(x0.iter().zip(eps).map(|(&x, &e)| sa * x + sb * e).collect())
    }

    /// Deterministic (eta = 0) DDIM update from t to t_prev.
    pub fn ddim_step<F: Scalar>(&self, x_t: &[F], eps_hat: &[F], t: usize, t_prev: usize) -> Result<Vec<F>> {
        self.check_t(t, "ddim_step")?;
        if t <= t_prev {
            return Err(NumericsError::Contract {
                op: "ddim_step",
                msg: format!("need t > t_prev, got {} <= {}", t, t_prev),
            });
        }
        let ab_t = self.alpha_bar(t);
        let ab_p = self.alpha_bar(t_prev);
        let (sa_t, sb_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
        let (sa_p, sb_p) = (ab_p.sqrt(), (1.0 - ab_p).sqrt());
        Ok(x_t
            .iter()
            .zip(eps_hat)
            .map(|(&x, &e)| {
                let x0_hat = (x.to_f64() - sb_t * e.to_f64()) / sa_t;
                F::from_f64(sa_p * x0_hat + sb_p * e.to_f64())
            })
            .collect())
    }
}

/// eps_uncond + s (eps_cond - eps_uncond).
pub fn cfg_combine<F: Scalar>(eps_uncond: &[F], eps_cond: &[F], s: F) -> Result<Vec<F>> {
    if eps_uncond.len() != eps_cond.len() {
        return Err(NumericsError::Contract {
            op: "cfg_combine",
            msg: format!("length mismatch {} vs {}", eps_uncond.len(), eps_cond.len()),
        });
    }
    Ok(eps_uncond
        .iter()
        .zip(eps_cond)
        .map(|(&u, &c)| u + s * (c - u))
        .collect())
}

/// Inference-time domain-shifting rule: a block runs synthetic when
/// `B <= b_max` (all timesteps) or `t >= t_max` (all blocks).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ShiftSchedule {
    pub b_max: Option<usize>,
    pub t_max: Option<usize>,
}

impl ShiftSchedule {
    pub fn none() -> Self {
        ShiftSchedule::default()
    }

    pub fn plan(&self, base: DomainId, t: usize, n_blocks: usize) -> Vec<DomainId> {
        let time_shift = self.t_max.map(|tm| t >= tm).unwrap_or(false);
        (0..n_blocks)
            .map(|b| {
                let layer_shift = self.b_max.map(|bm| b <= bm).unwrap_or(false);
                if time_shift || layer_shift {
                    DomainId::Syn
                } else {
                    base
                }
            })
            .collect()
    }

    fn validate(&self, horizon: usize, n_blocks: usize) -> Result<()> {
        if let Some(b) = self.b_max {
            if b >= n_blocks {
                return Err(NumericsError::Contract {
                    op: "ShiftSchedule",
                    msg: format!("b_max {} out of {} blocks", b, n_blocks),
                });
            }
        }
        if let Some(t) = self.t_max {
            if t > horizon {
                return Err(NumericsError::Contract {
                    op: "ShiftSchedule",
                    msg: format!("t_max {} out of horizon {}", t, horizon),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SamplerConfig {
    pub ddim_steps: usize,
    pub cfg_scale: f64,
    pub shift: ShiftSchedule,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            ddim_steps: 50,
            cfg_scale: 3.0,
            shift: ShiftSchedule::none(),
        }
    }
}

/// Diffusion MSE for one sample under a given plan and attention mode.
/// Real-domain batches never carry control (the data asymmetry): violating
/// that is a contract error at this boundary.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss<F: Scalar>(
    model: &Backbone<F>,
    schedule: &NoiseSchedule,
    image: &[F],
    control: Option<&[F]>,
    domain: DomainId,
    plan: Option<&[DomainId]>,
    t: usize,
    eps: &[F],
    prompt: Option<usize>,
    mode: AttentionMode,
    switcher_domain: Option<DomainId>,
) -> Result<Tensor<F>> {
    if domain == DomainId::Real && control.is_some() {
        return Err(NumericsError::Contract {
            op: "diffusion_loss",
            msg: "real batch paired with non-null control".into(),
        });
    }
    let cfg = &model.cfg;
    let full = cfg.full_side();
    let plane = full * full;
    if image.len() != cfg.channels_image * plane || eps.len() != image.len() {
        return Err(NumericsError::Contract {
            op: "diffusion_loss",
            msg: "image/eps size mismatch with model config".into(),
        });
    }
    let x_t = schedule.q_sample(image, t, eps)?;
    let mut input = x_t;
    match control {
        Some(c) => {
            if c.len() != cfg.channels_control * plane {
                return Err(NumericsError::Contract {
                    op: "diffusion_loss",
                    msg: "control size mismatch".into(),
                });
            }
            input.extend_from_slice(c);
        }
        None => input.extend(std::iter::repeat(F::zero()).take(cfg.channels_control * plane)),
    }
    let x = Tensor::from_vec(&[cfg.in_channels(), full, full], input)?;
    let mut ctx = ForwardCtx::new(t, prompt, mode, plan);
    ctx.switcher_domain = switcher_domain;
    let eps_hat = model.forward(&x, &mut ctx)?;
    let target = Tensor::from_vec(&[cfg.channels_image, full, full], eps.to_vec())?;
    eps_hat.mse(&target)
}

/// Full DDIM-50 style sampling loop with CFG on the prompt only and the
/// inference-time domain-shifting rule resolved per (t, block).
/// Deterministic given the seed.
pub fn sample<F: Scalar>(
    model: &Backbone<F>,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    prompt: Option<usize>,
    control: Option<&[F]>,
    base_domain: Option<DomainId>,
    seed: u64,
) -> Result<Vec<F>> {
    let cfg = &model.cfg;
    sampler.shift.validate(schedule.horizon, cfg.n_blocks)?;
    let full = cfg.full_side();
    let plane = full * full;
    let mut rng = rng_from(seed);
    let init = Tensor::<F>::randn(&[cfg.channels_image, full, full], 1.0, &mut rng);
    let mut x = init.data();

    let steps = sampler.ddim_steps;
    let ts: Vec<usize> = (0..=steps)
        .map(|k| schedule.horizon * (steps - k) / steps)
        .collect();

    let ctrl: Vec<F> = match control {
        Some(c) => c.to_vec(),
        None => vec![F::zero(); cfg.channels_control * plane],
    };

    no_grad(|| {
        for k in 0..steps {
            let (t, t_prev) = (ts[k], ts[k + 1]);
            let t_model = t.min(schedule.horizon - 1);
            let plan: Option<Vec<DomainId>> = match (base_domain, &model.shifters) {
                (Some(base), Some(_)) => Some(sampler.shift.plan(base, t, cfg.n_blocks)),
                _ => None,
            };
            let mut input = x.clone();
            input.extend_from_slice(&ctrl);
            let xin = Tensor::from_vec(&[cfg.in_channels(), full, full], input)?;

            let run = |p: Option<usize>| -> Result<Vec<F>> {
                let mut ctx = ForwardCtx::new(t_model, p, AttentionMode::GridFull, plan.as_deref());
                ctx.switcher_domain = base_domain;
                Ok(model.forward(&xin, &mut ctx)?.data())
            };
            let eps_cond = run(prompt)?;
            let eps = if (sampler.cfg_scale - 1.0).abs() < 1e-12 || prompt.is_none() {
                eps_cond
            } else {
                // The unconditional pass keeps the domain plan (see module docs).
                let eps_uncond = run(None)?;
                cfg_combine(&eps_uncond, &eps_cond, F::from_f64(sampler.cfg_scale))?
            };
            x = schedule.ddim_step(&x, &eps, t, t_prev)?;
        }
        Ok(())
    })?;
    Ok(x)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SdEditConfig {
    pub t_inject: usize,
    pub shared_noise_per_grid: bool,
}

impl Default for SdEditConfig {
    fn default() -> Self {
        SdEditConfig {
            t_inject: 500,
            shared_noise_per_grid: true,
        }
    }
}

/// SDEdit refinement: noise an existing grid to `t_inject` (one shared draw
/// per grid, tiled across views) and denoise each view independently with
/// the given model in single-image mode.
pub fn sdedit<F: Scalar>(
    grid: &[F],
    model: &Backbone<F>,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    sdedit_cfg: &SdEditConfig,
    prompt: Option<usize>,
    seed: u64,
) -> Result<Vec<F>> {
    let cfg = &model.cfg;
    let full = cfg.full_side();
    let plane = full * full;
    let s = cfg.image_side;
    if grid.len() != cfg.channels_image * plane {
        return Err(NumericsError::Contract {
            op: "sdedit",
            msg: "grid size mismatch".into(),
        });
    }
    let t_inject = sdedit_cfg.t_inject;
    if t_inject > schedule.horizon {
        return Err(NumericsError::Contract {
            op: "sdedit",
            msg: format!("t_inject {} out of range", t_inject),
        });
    }
    if t_inject == 0 {
        return Ok(grid.to_vec());
    }
    let mut rng = rng_from(seed);
    let noise: Vec<F> = if sdedit_cfg.shared_noise_per_grid {
        // One view-sized draw, tiled to every view position.
        let per_view = Tensor::<F>::randn(&[cfg.channels_image, s, s], 1.0, &mut rng).data();
        let mut out = vec![F::zero(); cfg.channels_image * plane];
        for c in 0..cfg.channels_image {
            for vr in 0..cfg.grid {
                for vc in 0..cfg.grid {
                    for y in 0..s {
                        for xx in 0..s {
                            out[c * plane + (vr * s + y) * full + vc * s + xx] =
                                per_view[c * s * s + y * s + xx];
                        }
                    }
                }
            }
        }
        out
    } else {
        Tensor::<F>::randn(&[cfg.channels_image, full, full], 1.0, &mut rng).data()
    };
    let mut x = schedule.q_sample(grid, t_inject, &noise)?;

    // DDIM sub-schedule over [t_inject, 0] at the configured step density.
    let spacing = (schedule.horizon / sampler.ddim_steps).max(1);
    let mut ts: Vec<usize> = Vec::new();
    let mut t = t_inject;
    loop {
        ts.push(t);
        if t == 0 {
            break;
        }
        t = t.saturating_sub(spacing);
    }
    let ctrl = vec![F::zero(); cfg.channels_control * plane];
    no_grad(|| {
        for k in 0..ts.len() - 1 {
            let (t, t_prev) = (ts[k], ts[k + 1]);
            let t_model = t.min(schedule.horizon - 1);
            let mut input = x.clone();
            input.extend_from_slice(&ctrl);
            let xin = Tensor::from_vec(&[cfg.in_channels(), full, full], input)?;
            let mut ctx = ForwardCtx::new(t_model, prompt, AttentionMode::SingleImage, None);
            let eps = model.forward(&xin, &mut ctx)?.data();
            x = schedule.ddim_step(&x, &eps, t, t_prev)?;
        }
        Ok(())
    })?;
    Ok(x)
}
