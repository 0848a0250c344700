use mvlab::backbone::*;
use mvlab::training::*;
use mvlab::diffusion::*;
use mvlab::datagen::*;
use mvlab::util::*;
use std::time::Instant;

fn main() {
    let cfg = BackboneConfig {
        image_side: 8, patch_size: 4, d_model: 32, n_heads: 2, n_blocks: 4,
        mlp_ratio: 2, horizon: 200, n_prompts: 8, ..BackboneConfig::default()
    };
    let mut model: Backbone<f32> = Backbone::new(cfg, &mut rng_from(1)).unwrap();
    let schedule = NoiseSchedule::new_linear(200);
    let split = make_split(32, 16, 3, 8);
    let data = DataPools { syn: &split.train_syn, real: &split.train_real };

    let t0 = Instant::now();
    let mut r = pretrain_recipe(20, 8);
    r.lr = 5e-5;
    train(&mut model, &schedule, &r, &data, 1, &mut |_| {}).unwrap();
    println!("20 pretrain steps (batch 8): {:?}", t0.elapsed());

    let t1 = Instant::now();
    let s = SamplerConfig { ddim_steps: 10, cfg_scale: 3.0, shift: ShiftSchedule::none() };
    for i in 0..5 {
        sample(&model, &schedule, &s, Some(0), None, None, i).unwrap();
    }
    println!("5 samples (DDIM-10, CFG): {:?}", t1.elapsed());
}
