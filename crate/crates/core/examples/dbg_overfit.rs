use mvlab::backbone::{Backbone, BackboneConfig, ParamSelector};
use mvlab::datagen::make_split;
use mvlab::diffusion::{sample, NoiseSchedule, SamplerConfig, ShiftSchedule};
use mvlab::training::{pretrain_recipe, train, DataPools};
use mvlab::util::rng_from;

fn ascii(img: &[f32], side: usize, label: &str) {
    println!("--- {label}");
    let ramp = [' ', '.', ':', 'o', 'O', '#'];
    for y in 0..side {
        let mut line = String::new();
        for x in 0..side {
            let mut l = 0.0f32;
            for c in 0..3 {
                l += img[c * side * side + y * side + x];
            }
            let v = (l / 3.0).clamp(0.0, 1.0);
            line.push(ramp[((1.0 - v) * (ramp.len() - 1) as f32).round() as usize]);
        }
        println!("|{line}|");
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let ddim: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(20);
    let cfgs: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1.0);

    let patch: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(2);
    let d: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(32);
    let cfg = BackboneConfig {
        image_side: 8,
        patch_size: patch,
        d_model: d,
        n_heads: 2,
        n_blocks: 4,
        mlp_ratio: 2,
        horizon: 1000,
        n_prompts: 8,
        ..Default::default()
    };
    let mut model: Backbone<f32> = Backbone::new(cfg.clone(), &mut rng_from(1)).unwrap();
    let split = make_split(4, 2, 7, 8);
    let schedule = NoiseSchedule::new_linear(1000);
    let mut recipe = pretrain_recipe(steps, 4);
    recipe.lr = lr;
    let pools = DataPools { syn: &split.train_syn, real: &split.train_real };
    let mut losses = Vec::new();
    train(&mut model, &schedule, &recipe, &pools, 3, &mut |r| losses.push(r.loss)).unwrap();
    let k = losses.len() / 10;
    println!(
        "loss first10% {:.4} last10% {:.4}",
        losses[..k].iter().sum::<f64>() / k as f64,
        losses[losses.len() - k..].iter().sum::<f64>() / k as f64
    );
    ascii(&split.train_real[0].image, 16, "train real 0");
    let sampler = SamplerConfig { ddim_steps: ddim, cfg_scale: cfgs, shift: ShiftSchedule::none() };
    for i in 0..2 {
        let g = sample(&model, &schedule, &sampler, Some(split.train_real[0].prompt_id), None, None, 100 + i).unwrap();
        ascii(&g, 16, &format!("gen {i}"));
    }
    let _ = model.param_groups(&ParamSelector::All);
}
