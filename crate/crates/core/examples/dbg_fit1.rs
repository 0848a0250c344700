use mvlab::adapters::DomainId;
use mvlab::backbone::{AttentionMode, Backbone, BackboneConfig, ParamSelector};
use mvlab::datagen::make_split;
use mvlab::diffusion::{diffusion_loss, NoiseSchedule};
use mvlab::training::Adam;
use mvlab::util::rng_from;
use rand::Rng;

fn main() {
    let cfg = BackboneConfig {
        image_side: 8,
        d_model: 32,
        n_heads: 2,
        n_blocks: 4,
        mlp_ratio: 2,
        horizon: 1000,
        n_prompts: 8,
        ..Default::default()
    };
    let model: Backbone<f32> = Backbone::new(cfg, &mut rng_from(1)).unwrap();
    let split = make_split(4, 2, 7, 8);
    let image: Vec<f32> = split.train_real[0].image.clone();
    let schedule = NoiseSchedule::new_linear(1000);
    let params = model.param_groups(&ParamSelector::All).unwrap();
    let mut opt = Adam::<f32>::new(1e-3, (0.9, 0.999));
    let mut rng = rng_from(5);
    let t: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(999);
    for step in 0..800 {
        let mut eps = vec![0.0f32; image.len()];
        for e in &mut eps {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            *e = ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32;
        }
        let loss = diffusion_loss(
            &model, &schedule, &image, None, DomainId::Real, None, t, &eps,
            Some(0), AttentionMode::GridFull, None,
        )
        .unwrap();
        let lv = loss.data()[0];
        loss.backward().unwrap();
        opt.step(&params);
        for (_, p) in &params {
            p.zero_grad();
        }
        if step % 100 == 0 || step == 799 {
            println!("step {step} loss {lv:.5}");
        }
    }
}
