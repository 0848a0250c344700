use mvlab::config::StudyConfig;
use mvlab::study::{Study, CKPT_STAGE2};
use mvlab::training::BaselineKind;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let tmp = std::env::temp_dir().join(format!("trend_{epochs}_{lr}"));
    let _ = std::fs::remove_dir_all(&tmp);
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
    c.shifter_rank = 4;
    c.adapter_rank = 4;
    c.n_gen_samples = 66;
    c.probe_n = 64;
    c.sdedit_t_inject = 500;
    let study = Study::new(c);

    let t0 = Instant::now();
    study.pretrain().unwrap();
    println!("pretrain done {:?}", t0.elapsed());
    study.stage1().unwrap();
    println!("stage1 done {:?}", t0.elapsed());
    study.stage2_variant("two_stage", false, false).unwrap();
    study.stage2_variant("two_stage_reassign", false, true).unwrap();
    study.stage2_variant(CKPT_STAGE2, true, true).unwrap();
    println!("stage2 variants done {:?}", t0.elapsed());
    study.baseline(BaselineKind::SynOnlyFull).unwrap();
    println!("syn_only done {:?}", t0.elapsed());

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
