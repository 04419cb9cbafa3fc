// Scratch harness for tuning the toy training setup end to end.

use std::time::Instant;

use flickerlens_core::model::ModelConfig;
use flickerlens_core::synth::{make_dataset, SynthSpec};
use flickerlens_core::train::{evaluate, roc_metrics, train_toy, video_level_scores, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr_main: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.02);
    let lr_head: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10);
    let batch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(8);

    let t0 = Instant::now();
    let template = SynthSpec::default_toy(0);
    let train_set: Vec<_> = make_dataset(40, 40, &template, 7)
        .unwrap()
        .into_iter()
        .map(|d| (d.clip, d.truth.label))
        .collect();
    let test_raw = make_dataset(20, 20, &template, 1007).unwrap();
    println!("synth: {:.1}s", t0.elapsed().as_secs_f64());

    let cfg = TrainConfig {
        epochs,
        lr_main,
        lr_head,
        batch_size: batch,
        ..TrainConfig::toy(7)
    };
    let t1 = Instant::now();
    let (model, trace) = train_toy(&train_set, &cfg, ModelConfig::toy(7)).unwrap();
    println!("train: {:.1}s, loss trace: {:?}", t1.elapsed().as_secs_f64(),
        trace.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>());

    let test_set: Vec<_> = test_raw.iter().map(|d| (d.clip.clone(), d.truth.label)).collect();
    let t2 = Instant::now();
    let scored = evaluate(&model, &test_set).unwrap();
    println!("eval: {:.1}s", t2.elapsed().as_secs_f64());
    let clip_scores: Vec<(String, f64)> = scored.iter().map(|(id, p, _)| (id.clone(), *p)).collect();
    let video = video_level_scores(&clip_scores);
    let labels: Vec<u8> = video
        .iter()
        .map(|(id, _)| scored.iter().find(|(i, _, _)| i == id).unwrap().2)
        .collect();
    let scores: Vec<f64> = video.iter().map(|(_, s)| *s).collect();
    let report = roc_metrics(&scores, &labels).unwrap();
    println!("AUC {:.4}  EER {:.4}", report.auc, report.eer);

    // Localization: fraction of fake test clips with a part near the truth.
    let mut hits = 0usize;
    let mut total = 0usize;
    for d in test_raw.iter().filter(|d| d.truth.label == 1) {
        total += 1;
        let f = d.truth.flicker.as_ref().unwrap();
        let trace = model.forward(&d.clip).unwrap();
        let best = trace
            .parts
            .parts
            .iter()
            .map(|p| {
                let dx = p.a - f.center_x as f64;
                let dy = p.b - f.center_y as f64;
                (dx * dx + dy * dy).sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        if best <= 8.0 {
            hits += 1;
        }
    }
    println!(
        "localization: {hits}/{total} within 8 px; total {:.1}s",
        t0.elapsed().as_secs_f64()
    );
}
