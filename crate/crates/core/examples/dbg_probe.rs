
use mvlab::backbone::{AttentionMode, ForwardCtx, ParamSelector};
use mvlab::config::StudyConfig;
use mvlab::numerics::{no_grad, Tensor};
use mvlab::study::Study;

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
    c.probe_n = 64;
    c.shifter_rank = 4;
    c.adapter_rank = 4;
    let study = Study::new(c.clone());
    let split = study.dataset();
    let model = study.load_model(std::path::Path::new("/tmp/trend_100_0.001/checkpoints/stage1.rz3d")).unwrap();
    // shifter residual magnitude
    for (name, p) in model.param_groups(&ParamSelector::ShiftersOnly).unwrap() {
        if name.contains("w_right") {
            let d = p.data();
            let n2: f32 = d.iter().map(|v| v * v).sum();
            println!("{name} l2={:.4}", n2.sqrt());
        }
    }
    let pairs = study.probe_pairs(&split);
    let mid = model.cfg.n_blocks / 2;
    let mut feats: Vec<Vec<f64>> = Vec::new();
    no_grad(|| {
        for (s, dom) in &pairs {
            let full = s.full_side();
            let mut input: Vec<f32> = s.image.clone();
            input.extend(std::iter::repeat(0.0f32).take(s.image.len()));
            let x = Tensor::from_vec(&[model.cfg.in_channels(), full, full], input).unwrap();
            let plan = vec![*dom; model.cfg.n_blocks];
            let mut pooled = vec![0.0f64; model.cfg.d_model];
            {
                let mut tap = |b: usize, feat: &Tensor<f32>| {
                    if b == mid {
                        let data = feat.data();
                        let d = model.cfg.d_model;
                        let rows = data.len() / d;
                        for r in 0..rows {
                            for j in 0..d {
                                pooled[j] += data[r * d + j] as f64 / rows as f64;
                            }
                        }
                    }
                };
                let mut ctx = ForwardCtx::new(100, Some(s.prompt_id), AttentionMode::GridFull, Some(&plan));
                ctx.tap = Some(&mut tap);
                model.forward(&x, &mut ctx).unwrap();
            }
            feats.push(pooled);
        }
    });
    // per-pair delta norm (Real at even indices, Syn at odd)
    for i in (0..pairs.len()).step_by(2) {
        let d: f64 = feats[i].iter().zip(&feats[i + 1]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let n: f64 = feats[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        if i < 12 || i >= pairs.len() - 4 {
            println!("pair {:2} |real-syn|={:.6e} |feat|={:.3e}", i / 2, d, n);
        }
    }

    // cosine between pair deltas
    let delta = |i: usize| -> Vec<f64> {
        feats[2 * i].iter().zip(&feats[2 * i + 1]).map(|(a, b)| a - b).collect()
    };
    let d0 = delta(0);
    for i in [1, 5, 10, 20, 31] {
        let di = delta(i);
        let dot: f64 = d0.iter().zip(&di).map(|(a, b)| a * b).sum();
        let n0: f64 = d0.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ni: f64 = di.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("cos(d0,d{i}) = {:.4}", dot / (n0 * ni));
    }
    // replicate logistic probe with z printing
    let n = feats.len();
    let d = feats[0].len();
    let labels: Vec<bool> = pairs.iter().map(|(_, dm)| format!("{:?}", dm) == "Real").collect();
    let half = n / 2;
    let (mut mu, mut sd) = (vec![0.0f64; d], vec![0.0f64; d]);
    for f in &feats[..half] { for j in 0..d { mu[j] += f[j]; } }
    for m in &mut mu { *m /= half as f64; }
    for f in &feats[..half] { for j in 0..d { sd[j] += (f[j]-mu[j]).powi(2); } }
    for s in &mut sd { *s = (*s / half as f64).sqrt().max(1e-8); }
    let norm = |f: &Vec<f64>| -> Vec<f64> { (0..d).map(|j| (f[j]-mu[j])/sd[j]).collect() };
    let (mut w, mut b) = (vec![0.0f64; d], 0.0f64);
    for it in 0..300 {
        let (mut gw, mut gb) = (vec![0.0f64; d], 0.0f64);
        for (f, &y) in feats[..half].iter().zip(&labels[..half]) {
            let x = norm(f);
            let z: f64 = w.iter().zip(&x).map(|(a, c)| a * c).sum::<f64>() + b;
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - if y { 1.0 } else { 0.0 };
            for j in 0..d { gw[j] += err * x[j]; }
            gb += err;
        }
        for j in 0..d { w[j] -= 0.5 * (gw[j] / half as f64 + 1e-4 * w[j]); }
        b -= 0.5 * gb / half as f64;
        if it % 100 == 99 {
            let acc = |lo: usize, hi: usize| -> f64 {
                let mut c = 0;
                for (f, &y) in feats[lo..hi].iter().zip(&labels[lo..hi]) {
                    let x = norm(f);
                    let z: f64 = w.iter().zip(&x).map(|(a, cc)| a * cc).sum::<f64>() + b;
                    if (z > 0.0) == y { c += 1; }
                }
                c as f64 / (hi - lo) as f64
            };
            println!("iter {it}: train acc {:.3} test acc {:.3}", acc(0, half), acc(half, n));
        }
    }
    for (f, &y) in feats[half..half+8].iter().zip(&labels[half..half+8]) {
        let x = norm(f);
        let z: f64 = w.iter().zip(&x).map(|(a, c)| a * c).sum::<f64>() + b;
        println!("test y={y} z={z:.4}");
    }
}
