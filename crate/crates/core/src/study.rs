//! Study orchestration: wires datagen, training, sampling, evaluation and
//! probing into the artifact pipeline behind the CLI subcommands. Every
//! artifact lands under the configured output directory and is a pure
//! function of (config echo, seed).

use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::adapters::{AdapterKind, DomainId};
use crate::backbone::Backbone;
use crate::checkpoint;
use crate::config::StudyConfig;
use crate::datagen::{make_split, write_dataset, DatasetSplit, ToyGridSample};
use crate::diffusion::{sample, sdedit, NoiseSchedule, SamplerConfig, SdEditConfig};
use crate::eval::{
    control_adherence, cross_view_consistency, domain_probe, frechet_distance, kernel_distance,
    FeatureEmbedder, MetricsReport, FEATURE_DIM,
};
use crate::numerics::Scalar;
use crate::ppm::write_ppm;
use crate::probe::{capture, emit_feature_maps, layer_selective_case_study, CaseStudyConfig, TapSpec};
use crate::training::{
    pretrain_recipe, stage1_recipe, stage2_recipe, train, train_baseline, BaselineKind, DataPools,
    StepRecord, TrainRecipe,
};
use crate::util::{derive_seed, rng_from};
use crate::backbone::{AttentionMode, ParamSelector};

#[derive(Debug, thiserror::Error)]
pub enum StudyError {
    #[error("study contract violated in {op}: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Data(#[from] crate::datagen::DataError),
    #[error(transparent)]
    Train(#[from] crate::training::TrainError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error(transparent)]
    Metric(#[from] crate::eval::MetricError),
    #[error(transparent)]
    Probe(#[from] crate::probe::ProbeError),
    #[error(transparent)]
    Ppm(#[from] crate::ppm::PpmError),
}

type Result<T> = std::result::Result<T, StudyError>;

/// Checkpoint base names produced by the pipeline.
pub const CKPT_BASE: &str = "base";
pub const CKPT_STAGE1: &str = "stage1";
pub const CKPT_STAGE2: &str = "realiz3d";

pub struct Study {
    pub cfg: StudyConfig,
}

impl Study {
    pub fn new(cfg: StudyConfig) -> Self {
        Study { cfg }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.cfg.out_dir)
    }

    pub fn ckpt_path(&self, name: &str) -> PathBuf {
        self.out_dir().join("checkpoints").join(format!("{name}.rz3d"))
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::new_linear(self.cfg.horizon)
    }

    /// Write the config echo next to the artifacts; every subcommand calls
    /// this so each output tree is self-describing.
    pub fn write_echo(&self) -> Result<PathBuf> {
        let dir = self.out_dir();
        std::fs::create_dir_all(&dir)?;
        let path = dir.join("config_echo.ini");
        std::fs::write(&path, self.cfg.to_ini())?;
        Ok(path)
    }

    /// The full dataset, regenerated in memory. Training and evaluation
    /// always consume this form (not the PPM files) so results are exact
    /// functions of the seed rather than of 8-bit quantization.
    pub fn dataset(&self) -> DatasetSplit {
        make_split(
            self.cfg.n_train,
            self.cfg.n_eval,
            derive_seed(self.cfg.seed, "data", 0),
            self.cfg.image_side,
        )
    }

    /// `gen-data`: materialize the dataset under out/data with manifests.
    pub fn gen_data(&self) -> Result<Vec<PathBuf>> {
        self.write_echo()?;
        let split = self.dataset();
        let dir = self.out_dir().join("data");
        let mut out = Vec::new();
        for (name, samples) in [
            ("train_syn", &split.train_syn),
            ("train_real", &split.train_real),
            ("eval_syn", &split.eval_syn),
            ("eval_real", &split.eval_real),
        ] {
            out.push(write_dataset(&dir, name, samples)?);
        }
        Ok(out)
    }

    fn fresh_model(&self) -> Result<Backbone<f32>> {
        let mut rng = rng_from(derive_seed(self.cfg.seed, "model-init", 0));
        Ok(Backbone::new(self.cfg.backbone(), &mut rng)?)
    }

    /// Rebuild a model for a checkpoint: adapters are inferred from the
    /// tensor names stored in the file, then the load is strict.
    pub fn load_model(&self, path: &Path) -> Result<Backbone<f32>> {
        let dict = checkpoint::load(path)?;
        let mut model = self.fresh_model()?;
        let mut rng = rng_from(derive_seed(self.cfg.seed, "adapter-init", 0));
        let has = |marker: &str| dict.keys().any(|k| k.contains(marker));
        if has(".shifter.") {
            model.attach_shifters(self.cfg.shifter_rank, &mut rng)?;
        }
        if has(".lora.") {
            model.attach_adapter(AdapterKind::Lora, self.cfg.adapter_rank, &mut rng)?;
        }
        if has(".linadapt.") {
            model.attach_adapter(AdapterKind::LinearAdapter, self.cfg.adapter_rank, &mut rng)?;
        }
        if has(".spatadapt.") {
            model.attach_adapter(AdapterKind::SpatialAdapter, self.cfg.adapter_rank, &mut rng)?;
        }
        if has("switcher.") {
            model.attach_adapter(AdapterKind::DomainSwitcher, self.cfg.adapter_rank, &mut rng)?;
        }
        checkpoint::load_state_dict(&model, &dict, false)?;
        Ok(model)
    }

    fn apply_cfg(&self, r: &mut TrainRecipe) {
        r.lr = self.cfg.lr;
        r.betas = (self.cfg.beta1, self.cfg.beta2);
        r.p_uncond = self.cfg.p_uncond;
    }

    /// JSONL step-log sink under out/logs.
    fn log_sink(&self, name: &str) -> Result<impl FnMut(&StepRecord)> {
        let dir = self.out_dir().join("logs");
        std::fs::create_dir_all(&dir)?;
        let mut file = std::fs::File::create(dir.join(format!("{name}.jsonl")))?;
        Ok(move |rec: &StepRecord| {
            let line = serde_json::to_string(rec).expect("step record serializes");
            let _ = writeln!(file, "{line}");
        })
    }

    fn save(&self, name: &str, model: &Backbone<f32>) -> Result<PathBuf> {
        let path = self.ckpt_path(name);
        checkpoint::save_model(&path, model)?;
        Ok(path)
    }

    /// `pretrain`: realistic prior on REAL data only.
    pub fn pretrain(&self) -> Result<PathBuf> {
        self.write_echo()?;
        let split = self.dataset();
        let data = DataPools {
            syn: &split.train_syn,
            real: &split.train_real,
        };
        let steps = self.cfg.steps_for(self.cfg.epochs, split.train_real.len());
        let mut recipe = pretrain_recipe(steps, self.cfg.batch_size);
        self.apply_cfg(&mut recipe);
        let mut model = self.fresh_model()?;
        let mut sink = self.log_sink("pretrain")?;
        train(&mut model, &self.schedule(), &recipe, &data, derive_seed(self.cfg.seed, "pretrain", 0), &mut sink)?;
        self.save(CKPT_BASE, &model)
    }

    /// `stage1`: attach shifters to the base model and bind the domains.
    pub fn stage1(&self) -> Result<PathBuf> {
        self.write_echo()?;
        let split = self.dataset();
        let data = DataPools {
            syn: &split.train_syn,
            real: &split.train_real,
        };
        let mut model = self.load_model(&self.ckpt_path(CKPT_BASE))?;
        let mut rng = rng_from(derive_seed(self.cfg.seed, "shifter-init", 0));
        model.attach_shifters(self.cfg.shifter_rank, &mut rng)?;
        let steps = self.cfg.steps_for(self.cfg.epochs, split.train_syn.len() + split.train_real.len());
        let mut recipe = stage1_recipe(steps, self.cfg.batch_size);
        self.apply_cfg(&mut recipe);
        let mut sink = self.log_sink("stage1")?;
        train(&mut model, &self.schedule(), &recipe, &data, derive_seed(self.cfg.seed, "stage1", 0), &mut sink)?;
        self.save(CKPT_STAGE1, &model)
    }

    /// `stage2`: backbone fine-tuning with the binding policies. The
    /// toggles exist for the ablation table; defaults are both on.
    pub fn stage2_variant(&self, name: &str, la: bool, reassign: bool) -> Result<PathBuf> {
        self.write_echo()?;
        let split = self.dataset();
        let data = DataPools {
            syn: &split.train_syn,
            real: &split.train_real,
        };
        let mut model = self.load_model(&self.ckpt_path(CKPT_STAGE1))?;
        let steps = self.cfg.steps_for(self.cfg.epochs, split.train_syn.len() + split.train_real.len());
        let mut recipe = stage2_recipe(steps, self.cfg.batch_size, self.cfg.warmup_real_steps, self.cfg.binding());
        recipe.la_training = la;
        recipe.reassignment = reassign;
        recipe.name = name.to_string();
        self.apply_cfg(&mut recipe);
        let mut sink = self.log_sink(name)?;
        train(&mut model, &self.schedule(), &recipe, &data, derive_seed(self.cfg.seed, "stage2", 0), &mut sink)?;
        self.save(name, &model)
    }

    pub fn stage2(&self) -> Result<PathBuf> {
        self.stage2_variant(CKPT_STAGE2, true, true)
    }

    /// `train-baseline`: one of the eight comparison recipes, from the base
    /// checkpoint, saved under the baseline's name.
    pub fn baseline(&self, kind: BaselineKind) -> Result<PathBuf> {
        self.write_echo()?;
        let split = self.dataset();
        let data = DataPools {
            syn: &split.train_syn,
            real: &split.train_real,
        };
        let mut model = self.load_model(&self.ckpt_path(CKPT_BASE))?;
        let steps = self.cfg.steps_for(self.cfg.epochs, split.train_syn.len() + split.train_real.len());
        let mut sink = self.log_sink(kind.name())?;
        train_baseline(
            &mut model,
            &self.schedule(),
            kind,
            steps,
            self.cfg.batch_size,
            self.cfg.adapter_rank,
            &data,
            derive_seed(self.cfg.seed, "baseline", kind as u64),
            &mut sink,
        )?;
        if kind == BaselineKind::DomainAdapter {
            // AnimateDiff-style adapters are removed at inference.
            model.detach_adapter(AdapterKind::Lora)?;
        }
        self.save(kind.name(), &model)
    }

    /// Joint (single-stage) shifter training: shifters and backbone update
    /// together. Used by the ablation table's "joint vs 2-stage" row.
    pub fn shifter_joint(&self) -> Result<PathBuf> {
        self.write_echo()?;
        let split = self.dataset();
        let data = DataPools {
            syn: &split.train_syn,
            real: &split.train_real,
        };
        let mut model = self.load_model(&self.ckpt_path(CKPT_BASE))?;
        let mut rng = rng_from(derive_seed(self.cfg.seed, "shifter-init", 0));
        model.attach_shifters(self.cfg.shifter_rank, &mut rng)?;
        let steps = self.cfg.steps_for(self.cfg.epochs, split.train_syn.len() + split.train_real.len());
        let mut recipe = TrainRecipe::base("shifter_joint", ParamSelector::All, steps, self.cfg.batch_size);
        recipe.real_fraction = 0.5;
        recipe.mode_real = AttentionMode::SingleImage;
        recipe.use_plan = true;
        self.apply_cfg(&mut recipe);
        let mut sink = self.log_sink("shifter_joint")?;
        train(&mut model, &self.schedule(), &recipe, &data, derive_seed(self.cfg.seed, "stage2", 0), &mut sink)?;
        self.save("shifter_joint", &model)
    }

    // ---- sampling ---------------------------------------------------------

    fn base_domain_for(&self, model: &Backbone<f32>) -> Option<DomainId> {
        if model.shifters.is_some() || model.switcher.is_some() {
            Some(DomainId::Real)
        } else {
            None
        }
    }

    /// Generate `n` grids conditioned on held-out controls, clamped to
    /// [0,1]. Returns (grid, prompt, control) triples.
    pub fn generate(
        &self,
        model: &Backbone<f32>,
        split: &DatasetSplit,
        n: usize,
        with_shift: bool,
    ) -> Result<Vec<(Vec<f32>, usize, Vec<f32>)>> {
        let _schedule = self.schedule();
        let sampler = self.cfg.sampler(with_shift);
        self.generate_with(model, split, n, &sampler)
    }

    fn generate_with(
        &self,
        model: &Backbone<f32>,
        split: &DatasetSplit,
        n: usize,
        sampler: &SamplerConfig,
    ) -> Result<Vec<(Vec<f32>, usize, Vec<f32>)>> {
        if split.eval_syn.is_empty() {
            return Err(StudyError::Contract {
                op: "generate",
                msg: "empty eval pool".into(),
            });
        }
        let schedule = self.schedule();
        let base_domain = self.base_domain_for(model);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let cond = &split.eval_syn[i % split.eval_syn.len()];
            let control: Vec<f32> = cond.control.clone().ok_or(StudyError::Contract {
                op: "generate",
                msg: "eval SYN sample lacks control".into(),
            })?;
            let ctrl_f: Vec<f32> = control.clone();
            let grid = sample(
                model,
                &schedule,
                sampler,
                Some(cond.prompt_id),
                Some(&ctrl_f),
                base_domain,
                derive_seed(self.cfg.seed, "sample", i as u64),
            )?;
            let grid: Vec<f32> = grid.into_iter().map(|v| Scalar::to_f64(v).clamp(0.0, 1.0) as f32).collect();
            out.push((grid, cond.prompt_id, control));
        }
        Ok(out)
    }

    /// `sample`: write `n` generated grids (and optional SDEdit refinements
    /// against the base model) as PPM files.
    pub fn sample_cmd(&self, ckpt: &str, n: usize, with_shift: bool, with_sdedit: bool) -> Result<Vec<PathBuf>> {
        self.write_echo()?;
        let split = self.dataset();
        let model = self.load_model(&self.ckpt_path(ckpt))?;
        let dir = self.out_dir().join("samples").join(ckpt);
        std::fs::create_dir_all(&dir)?;
        let full = model.cfg.full_side();
        let grids = self.generate(&model, &split, n, with_shift)?;
        let mut written = Vec::new();
        let refiner = if with_sdedit {
            Some(self.load_model(&self.ckpt_path(CKPT_BASE))?)
        } else {
            None
        };
        for (i, (grid, prompt, _)) in grids.iter().enumerate() {
            let path = dir.join(format!("sample_{i:03}.ppm"));
            write_ppm(&path, full, full, grid)?;
            written.push(path);
            if let Some(base) = &refiner {
                let refined = sdedit(
                    grid,
                    base,
                    &self.schedule(),
                    &self.cfg.sampler(false),
                    &SdEditConfig {
                        t_inject: self.cfg.sdedit_t_inject,
                        shared_noise_per_grid: true,
                    },
                    Some(*prompt),
                    derive_seed(self.cfg.seed, "sdedit", i as u64),
                )?;
                let refined: Vec<f32> = refined.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
                let path = dir.join(format!("sample_{i:03}_sdedit.ppm"));
                write_ppm(&path, full, full, &refined)?;
                written.push(path);
            }
        }
        Ok(written)
    }

    // ---- evaluation ---------------------------------------------------------

    fn embedder(&self) -> FeatureEmbedder {
        FeatureEmbedder::new(derive_seed(self.cfg.seed, "embedder", 0))
    }

    /// Probe inputs: held-out SYN images with controls stripped. Each is fed
    /// twice by the paired probe (REAL and SYN plan), so only the shifter
    /// pathway differs between the two labels and a separable probe
    /// demonstrates domain binding.
    pub fn probe_images(&self, split: &DatasetSplit) -> Vec<ToyGridSample> {
        split
            .eval_syn
            .iter()
            .take(self.cfg.probe_n / 2)
            .map(|s| {
                let mut bare = s.clone();
                bare.control = None;
                bare
            })
            .collect()
    }

    /// Full metric row for one checkpoint. Realism references: FID_B/KID_B
    /// against the base model's REAL training data; FID_I/KID_I against the
    /// held-out REAL eval set.
    pub fn evaluate(&self, ckpt: &str, with_shift: bool) -> Result<MetricsReport> {
        self.write_echo()?;
        let n = self.cfg.n_gen_samples;
        if n < FEATURE_DIM + 1 {
            return Err(StudyError::Contract {
                op: "evaluate",
                msg: format!("n_gen_samples {n} below the FID minimum {}", FEATURE_DIM + 1),
            });
        }
        let split = self.dataset();
        let model = self.load_model(&self.ckpt_path(ckpt))?;
        let grids = self.generate(&model, &split, n, with_shift)?;
        let emb = self.embedder();
        let full = model.cfg.full_side();

        let gen_feats: Vec<Vec<f64>> = grids
            .iter()
            .map(|(g, _, _)| emb.embed(g, full))
            .collect::<std::result::Result<_, _>>()?;
        let ref_b = emb.embed_set(&split.train_real)?;
        let ref_i = emb.embed_set(&split.eval_real)?;

        let mut iou_acc = 0.0;
        let mut psnr_acc = 0.0;
        let mut ssim_acc = 0.0;
        for (g, _, c) in &grids {
            let ca = control_adherence(g, c, full)?;
            iou_acc += ca.iou;
            let vc = cross_view_consistency(g, self.cfg.image_side)?;
            psnr_acc += vc.psnr;
            ssim_acc += vc.ssim;
        }
        // The linear probe separates REAL-plan from SYN-plan features, which
        // only exists as a pathway when shifters are attached. Without them
        // both labels see identical features, so chance level is reported.
        let probe_acc = if model.shifters.is_some() {
            domain_probe(&model, &self.probe_images(&split), self.cfg.horizon / 2)?
        } else {
            0.5
        };

        let report = MetricsReport {
            checkpoint: if with_shift {
                format!("{ckpt}+shift")
            } else {
                ckpt.to_string()
            },
            fid_toy_b: frechet_distance(&gen_feats, &ref_b)?,
            kid_toy_b: kernel_distance(&gen_feats, &ref_b)?,
            fid_toy_i: frechet_distance(&gen_feats, &ref_i)?,
            kid_toy_i: kernel_distance(&gen_feats, &ref_i)?,
            psnr: psnr_acc / n as f64,
            ssim: ssim_acc / n as f64,
            iou: iou_acc / n as f64,
            probe_acc,
        };
        self.append_metrics(&report)?;
        Ok(report)
    }

    /// Persist a metrics row as JSON and as a line of the shared CSV table.
    pub fn append_metrics(&self, report: &MetricsReport) -> Result<()> {
        let dir = self.out_dir().join("metrics");
        std::fs::create_dir_all(&dir)?;
        let json = serde_json::to_string_pretty(report).expect("report serializes");
        std::fs::write(dir.join(format!("{}.json", report.checkpoint.replace('+', "_"))), json)?;
        let csv = dir.join("metrics.csv");
        let mut text = if csv.exists() {
            std::fs::read_to_string(&csv)?
        } else {
            format!("{}\n", MetricsReport::CSV_HEADER)
        };
        text.push_str(&report.csv_row());
        text.push('\n');
        std::fs::write(csv, text)?;
        Ok(())
    }

    // ---- probe --------------------------------------------------------------

    /// `probe`: capture features for one held-out sample at the default
    /// taps and emit the PCA maps.
    pub fn probe_cmd(&self, ckpt: &str) -> Result<Vec<PathBuf>> {
        self.write_echo()?;
        let split = self.dataset();
        let model = self.load_model(&self.ckpt_path(ckpt))?;
        let spec = TapSpec::default_for(model.cfg.n_blocks, self.cfg.horizon);
        let subject = split.eval_syn.first().ok_or(StudyError::Contract {
            op: "probe",
            msg: "empty eval pool".into(),
        })?;
        let plan = model
            .shifters
            .as_ref()
            .map(|_| vec![DomainId::Real; model.cfg.n_blocks]);
        let cap = capture(
            &model,
            &self.schedule(),
            subject,
            plan.as_deref(),
            AttentionMode::GridFull,
            &spec,
            derive_seed(self.cfg.seed, "probe", 0),
        )?;
        let dir = self.out_dir().join("probe").join(ckpt);
        Ok(emit_feature_maps(&dir, &cap, &model.cfg, &spec)?)
    }

    /// App-style layer-selective case study from the base checkpoint;
    /// writes fid rows and sample montages.
    pub fn case_study(&self) -> Result<(f64, f64)> {
        self.write_echo()?;
        let split = self.dataset();
        let base = self.load_model(&self.ckpt_path(CKPT_BASE))?;
        let data = DataPools {
            syn: &split.train_syn,
            real: &split.train_real,
        };
        let emb = self.embedder();
        let reference = emb.embed_set(&split.train_real)?;
        let steps = self
            .cfg
            .steps_for(self.cfg.case_epochs, split.train_syn.len() + split.train_real.len());
        let outcome = layer_selective_case_study(
            &base,
            &self.schedule(),
            &data,
            &reference,
            &emb,
            &CaseStudyConfig {
                steps,
                batch_size: self.cfg.batch_size,
                n_samples: self.cfg.n_gen_samples,
                sampler: self.cfg.sampler(false),
                seed: derive_seed(self.cfg.seed, "case-study", 0),
            },
        )?;
        let dir = self.out_dir().join("case_study");
        std::fs::create_dir_all(&dir)?;
        let full = base.cfg.full_side();
        for (name, grids) in [
            ("full_syn", &outcome.samples_full_syn),
            ("layer_split", &outcome.samples_layer_split),
        ] {
            for (i, g) in grids.iter().take(8).enumerate() {
                write_ppm(&dir.join(format!("{name}_{i:02}.ppm")), full, full, g)?;
            }
        }
        let summary = format!(
            "{{\n  \"fid_full_syn\": {},\n  \"fid_layer_split\": {}\n}}\n",
            outcome.fid_full_syn, outcome.fid_layer_split
        );
        std::fs::write(dir.join("case_study.json"), summary)?;
        Ok((outcome.fid_full_syn, outcome.fid_layer_split))
    }

    // ---- ablation ------------------------------------------------------------

    /// `ablate`: the 8-row comparison table. Rows reuse pipeline
    /// checkpoints where the configuration matches; +shift rows re-evaluate
    /// an existing checkpoint with inference shifting enabled.
    pub fn ablate(&self) -> Result<Vec<MetricsReport>> {
        self.write_echo()?;
        // Row definitions: (checkpoint, builder, eval-with-shift).
        self.baseline(BaselineKind::SynOnlyFull)?;
        self.baseline(BaselineKind::SynRealFull)?;
        self.shifter_joint()?;
        self.stage2_variant("two_stage", false, false)?;
        self.stage2_variant("two_stage_reassign", false, true)?;
        self.stage2_variant(CKPT_STAGE2, true, true)?;

        let rows: Vec<(&str, bool)> = vec![
            (CKPT_BASE, false),
            (BaselineKind::SynOnlyFull.name(), false),
            (BaselineKind::SynRealFull.name(), false),
            ("shifter_joint", false),
            ("two_stage", false),
            ("two_stage_reassign", false),
            (CKPT_STAGE2, false),
            (CKPT_STAGE2, true),
        ];
        let mut table = Vec::with_capacity(rows.len());
        for (ckpt, with_shift) in rows {
            table.push(self.evaluate(ckpt, with_shift)?);
        }

        let dir = self.out_dir().join("metrics");
        std::fs::create_dir_all(&dir)?;
        let mut text = format!("{}\n", MetricsReport::CSV_HEADER);
        for r in &table {
            text.push_str(&r.csv_row());
            text.push('\n');
        }
        std::fs::write(dir.join("ablation.csv"), text)?;
        Ok(table)
    }

    // ---- shift tuning ----------------------------------------------------------

    /// `tune-shift`: grid search over B_max (fractions of n_blocks) and
    /// t_max, following the two-phase procedure: first pick B_max at the
    /// default t_max, then fix it and pick t_max. Selection maximizes
    /// control adherence subject to a realism-drop bound (KID on a small
    /// validation slice, since FID needs >= 65 samples).
    pub fn tune_shift(&self, ckpt: &str) -> Result<(f64, usize)> {
        self.write_echo()?;
        let split = self.dataset();
        let model = self.load_model(&self.ckpt_path(ckpt))?;
        if model.shifters.is_none() {
            return Err(StudyError::Contract {
                op: "tune-shift",
                msg: "checkpoint has no shifters to schedule".into(),
            });
        }
        let emb = self.embedder();
        let reference = emb.embed_set(&split.eval_real)?;
        let full = model.cfg.full_side();
        let n_val = 20.min(self.cfg.n_eval.max(1));

        let score = |b_frac: f64, t_max: usize| -> Result<(f64, f64)> {
            let mut cfg = self.cfg.clone();
            cfg.b_max_frac = b_frac;
            cfg.t_max = t_max;
            let sampler = cfg.sampler(true);
            let grids = self.generate_with(&model, &split, n_val, &sampler)?;
            let feats: Vec<Vec<f64>> = grids
                .iter()
                .map(|(g, _, _)| emb.embed(g, full))
                .collect::<std::result::Result<_, _>>()?;
            let kid = kernel_distance(&feats, &reference)?;
            let mut iou_acc = 0.0;
            for (g, _, c) in &grids {
                iou_acc += control_adherence(g, c, full)?.iou;
            }
            Ok((iou_acc / n_val as f64, kid))
        };

        let b_grid = [0.0, 0.1, 0.2, 0.3, 0.4];
        let t_grid = [800usize, 850, 900, 950, 1000];
        let mut rows = String::from("b_max_frac,t_max,iou,kid\n");

        // Phase 1: sweep B_max at the default t_max.
        let mut phase1 = Vec::new();
        for &b in &b_grid {
            let (iou, kid) = score(b, self.cfg.t_max)?;
            rows.push_str(&format!("{b},{},{iou:.6},{kid:.6}\n", self.cfg.t_max));
            phase1.push((b, iou, kid));
        }
        let kid_floor = phase1.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
        let bound = kid_floor.abs() * 1.5 + 1e-4;
        let best_b = phase1
            .iter()
            .filter(|r| r.2 <= kid_floor + bound)
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .map(|r| r.0)
            .unwrap_or(0.0);

        // Phase 2: fix B_max, sweep t_max.
        let mut phase2 = Vec::new();
        for &t in &t_grid {
            let (iou, kid) = score(best_b, t)?;
            rows.push_str(&format!("{best_b},{t},{iou:.6},{kid:.6}\n"));
            phase2.push((t, iou, kid));
        }
        let kid_floor2 = phase2.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
        let bound2 = kid_floor2.abs() * 1.5 + 1e-4;
        let best_t = phase2
            .iter()
            .filter(|r| r.2 <= kid_floor2 + bound2)
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .map(|r| r.0)
            .unwrap_or(self.cfg.t_max);

        let dir = self.out_dir().join("metrics");
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("tune_shift.csv"), rows)?;
        std::fs::write(
            dir.join("tune_shift.json"),
            format!("{{\n  \"b_max_frac\": {best_b},\n  \"t_max\": {best_t}\n}}\n"),
        )?;
        Ok((best_b, best_t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_cfg(dir: &Path) -> StudyConfig {
        let mut c = StudyConfig::default();
        c.out_dir = dir.to_string_lossy().into_owned();
        c.seed = 5;
        c.image_side = 8;
        c.patch_size = 4;
        c.d_model = 16;
        c.n_heads = 2;
        c.n_blocks = 4;
        c.mlp_ratio = 1;
        c.horizon = 100;
        c.n_train = 6;
        c.n_eval = 4;
        c.batch_size = 2;
        c.epochs = 1;
        c.warmup_real_steps = 2;
        c.ddim_steps = 5;
        c.t_max = 95;
        c.sdedit_t_inject = 50;
        c.n_gen_samples = 66;
        c.probe_n = 8;
        c.case_epochs = 1;
        c.shifter_rank = 4;
        c.adapter_rank = 4;
        c
    }

    #[test]
    fn pipeline_smoke_and_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let study = Study::new(micro_cfg(tmp.path()));

        let files = study.gen_data().unwrap();
        assert_eq!(files.len(), 4);
        assert!(tmp.path().join("config_echo.ini").exists());

        let base = study.pretrain().unwrap();
        assert!(base.exists());
        let s1 = study.stage1().unwrap();
        let s2 = study.stage2().unwrap();
        assert!(s1.exists() && s2.exists());

        // Checkpoint reload picks the right attachments.
        let m = study.load_model(&s2).unwrap();
        assert!(m.shifters.is_some());
        let m0 = study.load_model(&base).unwrap();
        assert!(m0.shifters.is_none());

        let samples = study.sample_cmd(CKPT_STAGE2, 2, true, true).unwrap();
        assert_eq!(samples.len(), 4, "2 grids + 2 SDEdit refinements");
        let maps = study.probe_cmd(CKPT_STAGE2).unwrap();
        assert!(!maps.is_empty());
        assert!(tmp.path().join("logs").join(format!("{CKPT_STAGE2}.jsonl")).exists());
    }

    #[test]
    fn pretrain_is_deterministic_across_runs() {
        let t1 = tempfile::tempdir().unwrap();
        let t2 = tempfile::tempdir().unwrap();
        let mut c1 = micro_cfg(t1.path());
        let mut c2 = micro_cfg(t2.path());
        c1.epochs = 1;
        c2.epochs = 1;
        let p1 = Study::new(c1).pretrain().unwrap();
        let p2 = Study::new(c2).pretrain().unwrap();
        assert_eq!(
            std::fs::read(p1).unwrap(),
            std::fs::read(p2).unwrap(),
            "same seed must give byte-identical checkpoints"
        );
    }

    #[test]
    fn evaluate_rejects_undersized_sample_budget() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = micro_cfg(tmp.path());
        cfg.n_gen_samples = 10;
        let study = Study::new(cfg);
        match study.evaluate(CKPT_BASE, false) {
            Err(StudyError::Contract { op, .. }) => assert_eq!(op, "evaluate"),
            other => panic!("expected contract error, got {:?}", other.map(|r| r.checkpoint)),
        }
    }
}
