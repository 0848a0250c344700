//! Study configuration: one INI-style file covering every module knob,
//! strict about unknown keys, echoed verbatim next to produced artifacts.

use std::fmt::Write as _;

use crate::backbone::BackboneConfig;
use crate::diffusion::{SamplerConfig, ShiftSchedule};
use crate::training::BindingParams;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key {section}.{key}")]
    UnknownKey { section: String, key: String },
    #[error("config line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("config value {section}.{key}={value}: {msg}")]
    BadValue {
        section: String,
        key: String,
        value: String,
        msg: String,
    },
    #[error("bad --set override {0}: expected section.key=value")]
    BadOverride(String),
}

type Result<T> = std::result::Result<T, ConfigError>;

/// Everything a study run needs, with defaults matching the reference
/// hyperparameters (rank 8, tau_B 0.4, p_B 0.1, B_max 30%, t_max 950,
/// lr 5e-5, DDIM-50) at the desk-scale model size.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    // [study]
    pub seed: u64,
    pub out_dir: String,

    // [model]
    pub image_side: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub mlp_ratio: usize,
    pub horizon: usize,

    // [data]
    pub n_train: usize,
    pub n_eval: usize,

    // [shifter]
    pub shifter_rank: usize,

    // [training]
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs for the pretraining pass; 0 means "same as epochs". The
    /// realism prior usually needs far more optimization than the
    /// adaptation stages, so it gets its own budget.
    pub pretrain_epochs: usize,
    /// Learning rate for the pretraining pass; 0 means "same as lr".
    pub pretrain_lr: f64,
    pub warmup_real_steps: usize,
    pub p_uncond: f64,
    pub tau_b: f64,
    pub p_b: f64,
    pub adapter_rank: usize,

    // [sampler]
    pub ddim_steps: usize,
    pub cfg_scale: f64,
    /// B_max as a fraction of n_blocks; negative disables block shifting.
    pub b_max_frac: f64,
    /// t >= t_max shifts all blocks; values above the horizon disable it.
    pub t_max: usize,
    pub sdedit_t_inject: usize,

    // [eval]
    pub n_gen_samples: usize,
    pub probe_n: usize,

    // [case_study]
    pub case_epochs: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            seed: 0,
            out_dir: "out".into(),
            image_side: 32,
            patch_size: 4,
            d_model: 128,
            n_heads: 4,
            n_blocks: 12,
            mlp_ratio: 4,
            horizon: 1000,
            n_train: 256,
            n_eval: 64,
            shifter_rank: 8,
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 16,
            epochs: 10,
            warmup_real_steps: 100,
            p_uncond: 0.1,
            tau_b: 0.4,
            p_b: 0.1,
            adapter_rank: 8,
            ddim_steps: 50,
            cfg_scale: 3.0,
            b_max_frac: 0.3,
            t_max: 950,
            sdedit_t_inject: 500,
            n_gen_samples: 80,
            probe_n: 128,
            case_epochs: 10,
        }
    }
}

impl StudyConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            image_side: self.image_side,
            patch_size: self.patch_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_blocks: self.n_blocks,
            mlp_ratio: self.mlp_ratio,
            horizon: self.horizon,
            n_prompts: crate::datagen::SHAPE_CLASSES.len(),
            ..BackboneConfig::default()
        }
    }

    pub fn binding(&self) -> BindingParams {
        BindingParams {
            tau_b: self.tau_b,
            p_b: self.p_b,
        }
    }

    /// Shift schedule from the fraction/threshold pair. `b_max_frac < 0`
    /// turns block shifting off (B_max = -inf in the rule).
    pub fn shift_schedule(&self) -> ShiftSchedule {
        let b_max = if self.b_max_frac < 0.0 {
            None
        } else {
            Some((self.b_max_frac * self.n_blocks as f64).floor() as usize)
        };
        ShiftSchedule {
            b_max,
            t_max: Some(self.t_max),
        }
    }

    pub fn sampler(&self, with_shift: bool) -> SamplerConfig {
        SamplerConfig {
            ddim_steps: self.ddim_steps,
            cfg_scale: self.cfg_scale,
            shift: if with_shift {
                self.shift_schedule()
            } else {
                ShiftSchedule::none()
            },
        }
    }

    /// Optimization steps for an `epochs`-epoch pass over a pool of
    /// `pool_size` samples.
    pub fn steps_for(&self, epochs: usize, pool_size: usize) -> usize {
        (epochs * pool_size).div_ceil(self.batch_size).max(1)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        macro_rules! parse {
            ($field:expr) => {
                $field = value.parse().map_err(|e| ConfigError::BadValue {
                    section: section.into(),
                    key: key.into(),
                    value: value.into(),
                    msg: format!("{e}"),
                })?
            };
        }
        match (section, key) {
            ("study", "seed") => parse!(self.seed),
            ("study", "out_dir") => self.out_dir = value.to_string(),
            ("model", "image_side") => parse!(self.image_side),
            ("model", "patch_size") => parse!(self.patch_size),
            ("model", "d_model") => parse!(self.d_model),
            ("model", "n_heads") => parse!(self.n_heads),
            ("model", "n_blocks") => parse!(self.n_blocks),
            ("model", "mlp_ratio") => parse!(self.mlp_ratio),
            ("model", "horizon") => parse!(self.horizon),
            ("data", "n_train") => parse!(self.n_train),
            ("data", "n_eval") => parse!(self.n_eval),
            ("shifter", "rank") => parse!(self.shifter_rank),
            ("training", "lr") => parse!(self.lr),
            ("training", "beta1") => parse!(self.beta1),
            ("training", "beta2") => parse!(self.beta2),
            ("training", "batch_size") => parse!(self.batch_size),
            ("training", "epochs") => parse!(self.epochs),
            ("training", "warmup_real_steps") => parse!(self.warmup_real_steps),
            ("training", "p_uncond") => parse!(self.p_uncond),
            ("training", "tau_b") => parse!(self.tau_b),
            ("training", "p_b") => parse!(self.p_b),
            ("training", "adapter_rank") => parse!(self.adapter_rank),
            ("sampler", "ddim_steps") => parse!(self.ddim_steps),
            ("sampler", "cfg_scale") => parse!(self.cfg_scale),
            ("sampler", "b_max_frac") => parse!(self.b_max_frac),
            ("sampler", "t_max") => parse!(self.t_max),
            ("sampler", "sdedit_t_inject") => parse!(self.sdedit_t_inject),
            ("eval", "n_gen_samples") => parse!(self.n_gen_samples),
            ("eval", "probe_n") => parse!(self.probe_n),
            ("case_study", "epochs") => parse!(self.case_epochs),
            _ => {
                return Err(ConfigError::UnknownKey {
                    section: section.into(),
                    key: key.into(),
                })
            }
        }
        Ok(())
    }

    /// Parse an INI-style document on top of the defaults. `#` and `;`
    /// start comments; keys must live under a `[section]` header.
    pub fn from_ini(text: &str) -> Result<Self> {
        let mut cfg = StudyConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find(['#', ';']) {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(stripped) = line.strip_prefix('[') {
                let name = stripped.strip_suffix(']').ok_or(ConfigError::Syntax {
                    line: i + 1,
                    msg: "unterminated section header".into(),
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax {
                line: i + 1,
                msg: "expected key = value".into(),
            })?;
            if section.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: "key before any [section] header".into(),
                });
            }
            cfg.set(&section, key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Apply one `--set section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| ConfigError::BadOverride(spec.into()))?;
        let (section, key) = path
            .split_once('.')
            .ok_or_else(|| ConfigError::BadOverride(spec.into()))?;
        self.set(section.trim(), key.trim(), value.trim())
    }

    /// Full config echo: every key, current values. Parsing the echo
    /// reproduces the config exactly.
    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "[study]\nseed = {}\nout_dir = {}\n\n\
             [model]\nimage_side = {}\npatch_size = {}\nd_model = {}\nn_heads = {}\n\
             n_blocks = {}\nmlp_ratio = {}\nhorizon = {}\n\n\
             [data]\nn_train = {}\nn_eval = {}\n\n\
             [shifter]\nrank = {}\n\n\
             [training]\nlr = {}\nbeta1 = {}\nbeta2 = {}\nbatch_size = {}\nepochs = {}\n\
             warmup_real_steps = {}\np_uncond = {}\ntau_b = {}\np_b = {}\nadapter_rank = {}\n\n\
             [sampler]\nddim_steps = {}\ncfg_scale = {}\nb_max_frac = {}\nt_max = {}\n\
             sdedit_t_inject = {}\n\n\
             [eval]\nn_gen_samples = {}\nprobe_n = {}\n\n\
             [case_study]\nepochs = {}\n",
            self.seed,
            self.out_dir,
            self.image_side,
            self.patch_size,
            self.d_model,
            self.n_heads,
            self.n_blocks,
            self.mlp_ratio,
            self.horizon,
            self.n_train,
            self.n_eval,
            self.shifter_rank,
            self.lr,
            self.beta1,
            self.beta2,
            self.batch_size,
            self.epochs,
            self.warmup_real_steps,
            self.p_uncond,
            self.tau_b,
            self.p_b,
            self.adapter_rank,
            self.ddim_steps,
            self.cfg_scale,
            self.b_max_frac,
            self.t_max,
            self.sdedit_t_inject,
            self.n_gen_samples,
            self.probe_n,
            self.case_epochs,
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_values() {
        let c = StudyConfig::default();
        assert_eq!(c.shifter_rank, 8);
        assert_eq!(c.tau_b, 0.4);
        assert_eq!(c.p_b, 0.1);
        assert_eq!(c.b_max_frac, 0.3);
        assert_eq!(c.t_max, 950);
        assert_eq!(c.lr, 5e-5);
        assert_eq!(c.ddim_steps, 50);
        assert_eq!(c.epochs, 10);
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.n_blocks, 12);
        // B_max = 30% of 12 blocks -> blocks 0..=3 shift.
        assert_eq!(c.shift_schedule().b_max, Some(3));
    }

    #[test]
    fn parses_sections_comments_and_overrides() {
        let text = "
# study-wide
[study]
seed = 7          ; inline comment
out_dir = runs/a

[model]
d_model = 32
n_blocks = 4

[training]
lr = 1e-4
";
        let mut c = StudyConfig::from_ini(text).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.out_dir, "runs/a");
        assert_eq!(c.d_model, 32);
        assert_eq!(c.n_blocks, 4);
        assert_eq!(c.lr, 1e-4);
        // Untouched keys keep defaults.
        assert_eq!(c.patch_size, 4);

        c.apply_override("sampler.cfg_scale=1.5").unwrap();
        assert_eq!(c.cfg_scale, 1.5);
        assert!(c.apply_override("sampler.cfg_scale").is_err());
        assert!(c.apply_override("nosuch.key=1").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = StudyConfig::from_ini("[study]\nseeed = 1\n").unwrap_err();
        assert_eq!(
            err,
            ConfigError::UnknownKey {
                section: "study".into(),
                key: "seeed".into()
            }
        );
        assert!(matches!(
            StudyConfig::from_ini("[nope]\nseed = 1\n"),
            Err(ConfigError::UnknownKey { .. })
        ));
        assert!(matches!(
            StudyConfig::from_ini("seed = 1\n"),
            Err(ConfigError::Syntax { .. })
        ));
        assert!(matches!(
            StudyConfig::from_ini("[model]\nd_model = blue\n"),
            Err(ConfigError::BadValue { .. })
        ));
    }

    #[test]
    fn echo_round_trips() {
        let mut c = StudyConfig::default();
        c.apply_override("study.seed=99").unwrap();
        c.apply_override("model.d_model=64").unwrap();
        c.apply_override("training.p_b=0.2").unwrap();
        let echo = c.to_ini();
        let back = StudyConfig::from_ini(&echo).unwrap();
        assert_eq!(back, c);
    }
}
