use mvlab::config::StudyConfig;
use mvlab::study::Study;

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
    let mut c = StudyConfig::default();
    c.out_dir = "/tmp/trend_100_0.001".into();
    c.seed = 11;
    c.image_side = 8;
    c.d_model = 32;
    c.n_heads = 2;
    c.n_blocks = 4;
    c.mlp_ratio = 2;
    c.horizon = 200;
    c.n_train = 72;
    c.n_eval = 66;
    c.batch_size = 8;
    c.ddim_steps = 10;
    c.probe_n = 64;
    c.shifter_rank = 4;
    c.adapter_rank = 4;
    let study = Study::new(c);
    let split = study.dataset();
    ascii(&split.train_real[0].image, 16, "real train sample");
    ascii(&split.train_syn[0].image, 16, "syn train sample");
    let model = study
        .load_model(std::path::Path::new("/tmp/trend_100_0.001/checkpoints/base.rz3d"))
        .unwrap();
    let grids = study.generate(&model, &split, 3, false).unwrap();
    for (i, (g, _, _)) in grids.iter().enumerate() {
        ascii(g, 16, &format!("base gen {i}"));
        let mn = g.iter().cloned().fold(f32::MAX, f32::min);
        let mx = g.iter().cloned().fold(f32::MIN, f32::max);
        let mean: f32 = g.iter().sum::<f32>() / g.len() as f32;
        println!("min {mn:.3} max {mx:.3} mean {mean:.3}");
    }
}
