// Scratch: full training-dynamics probe. Reimplements the loop with
// per-epoch prints of part positions, raw coordinates, and gradient norms.

use flickerlens_core::model::{Detector, GradStore, ModelConfig};
use flickerlens_core::synth::{make_dataset, SynthSpec};
use flickerlens_core::train::{batch_step, Sgd, TrainConfig};
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr_main: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.03);
    let lr_head: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.003);

    let template = SynthSpec::default_toy(0);
    let data = make_dataset(40, 40, &template, 7).unwrap();
    let dataset: Vec<_> = data.iter().map(|d| (d.clip.clone(), d.truth.label)).collect();
    let cfg = TrainConfig {
        epochs: 10,
        lr_main,
        lr_head,
        ..TrainConfig::toy(7)
    };
    let mut model = Detector::new(ModelConfig::toy(7)).unwrap();
    let mut sgd = Sgd::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    // Probe: two fake clips with known centers.
    let probes: Vec<usize> = data
        .iter()
        .enumerate()
        .filter(|(_, d)| d.truth.label == 1)
        .map(|(i, _)| i)
        .take(2)
        .collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut grad_report: Vec<(String, f64)> = Vec::new();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<_> = chunk.iter().map(|&i| (&dataset[i].0, dataset[i].1)).collect();
            let (loss, grads) = batch_step(&model, &batch, epoch, &cfg).unwrap();
            if bi == 0 {
                for name in ["reg.w", "reg.b", "phi_p.w", "ste.wv", "head.w", "w_freq", "tap1.bn0.w2"] {
                    if let Some(g) = grads.get(name) {
                        let n: f64 = g.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                        grad_report.push((name.to_string(), n));
                    }
                }
            }
            sgd.step(&mut model, &grads, &cfg);
            loss_sum += loss;
        }
        // Probe part positions.
        let mut pos = String::new();
        for &pi in &probes {
            let d = &data[pi];
            let f = d.truth.flicker.as_ref().unwrap();
            let t = model.forward(&d.clip).unwrap();
            let best = t
                .parts
                .parts
                .iter()
                .map(|p| {
                    let dx = p.a - f.center_x as f64;
                    let dy = p.b - f.center_y as f64;
                    (dx * dx + dy * dy).sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            let coords: Vec<(i32, i32)> = t
                .parts
                .parts
                .iter()
                .map(|p| (p.a.round() as i32, p.b.round() as i32))
                .collect();
            pos += &format!(
                " | truth ({},{}) best {:.1}px parts {:?}",
                f.center_x, f.center_y, best, coords
            );
        }
        println!(
            "epoch {epoch}: loss {:.3}{pos}",
            loss_sum / (dataset.len() as f64 / cfg.batch_size as f64)
        );
        println!("   grads: {:?}", grad_report.iter().map(|(n, v)| format!("{n}={v:.2e}")).collect::<Vec<_>>());
        let mut wnorms = Vec::new();
        model.visit_params_mut(|name, _, d| {
            if ["reg.w", "phi_p.w", "head.w", "ste.wv"].contains(&name) {
                let n: f64 = d.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                wnorms.push(format!("{name}={n:.2e}"));
            }
        });
        println!("   weights: {wnorms:?}");
    }
}
