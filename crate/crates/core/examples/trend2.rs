use mvlab::checkpoint::save_model;
use mvlab::config::StudyConfig;
use mvlab::study::{Study, CKPT_STAGE2};
use mvlab::training::{pretrain_recipe, train, BaselineKind, DataPools};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let pre_steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5400);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(100);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(5e-4);
    let pre_lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let tmp = std::env::temp_dir().join(format!("trend2_{pre_steps}_{lr}"));
    let mut c = StudyConfig::default();
    c.out_dir = tmp.to_string_lossy().into_owned();
    c.seed = 11;
    c.image_side = 8;
    c.patch_size = 2;
    c.d_model = 32;
    c.n_heads = 2;
    c.n_blocks = 4;
    c.mlp_ratio = 2;
    c.horizon = 1000;
    c.n_train = 72;
    c.n_eval = 66;
    c.batch_size = 8;
    c.epochs = epochs;
    c.lr = lr;
    c.warmup_real_steps = 20;
    c.ddim_steps = 20;
    c.t_max = 950;
    c.sdedit_t_inject = 500;
    c.shifter_rank = 4;
    c.adapter_rank = 4;
    c.n_gen_samples = 66;
    c.probe_n = 64;
    let study = Study::new(c.clone());
    let split = study.dataset();

    let t0 = Instant::now();
    // Long pretrain, then the standard pipeline from the saved base.
    if !study.ckpt_path("base").exists() {
        let mut recipe = pretrain_recipe(pre_steps, c.batch_size);
        recipe.lr = pre_lr;
        let mut model = mvlab::backbone::Backbone::<f32>::new(
            c.backbone(),
            &mut mvlab::util::rng_from(mvlab::util::derive_seed(c.seed, "model-init", 0)),
        )
        .unwrap();
        let pools = DataPools { syn: &split.train_syn, real: &split.train_real };
        train(&mut model, &study.schedule(), &recipe, &pools, 99, &mut |_| {}).unwrap();
        std::fs::create_dir_all(study.ckpt_path("base").parent().unwrap()).unwrap();
        save_model(&study.ckpt_path("base"), &model).unwrap();
    }
    println!("pretrain {pre_steps} done {:?}", t0.elapsed());
    if !study.ckpt_path("stage1").exists() {
        study.stage1().unwrap();
    }
    println!("stage1 done {:?}", t0.elapsed());
    study.stage2_variant("two_stage", false, false).unwrap();
    study.stage2_variant("two_stage_reassign", false, true).unwrap();
    study.stage2_variant(CKPT_STAGE2, true, true).unwrap();
    study.baseline(BaselineKind::SynOnlyFull).unwrap();
    println!("training done {:?}", t0.elapsed());

    for (name, shift) in [
        ("base", false),
        ("syn_only_full", false),
        ("two_stage", false),
        ("two_stage_reassign", false),
        (CKPT_STAGE2, false),
        (CKPT_STAGE2, true),
    ] {
        let r = study.evaluate(name, shift).unwrap();
        println!(
            "{:24} fid_B={:9.4} kid_B={:8.5} iou={:.4} psnr={:6.2} probe={:.3}",
            r.checkpoint, r.fid_toy_b, r.kid_toy_b, r.iou, r.psnr, r.probe_acc
        );
    }
    println!("total {:?}", t0.elapsed());
}
