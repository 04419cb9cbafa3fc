// Scratch: after a short training run, does the split displacement point
// toward the planted flicker as a function of window offset?

use flickerlens_core::model::{GradStore, ModelConfig};
use flickerlens_core::synth::{make_dataset, SynthSpec};
use flickerlens_core::train::{train_toy, TrainConfig};

fn main() {
    let template = SynthSpec::default_toy(0);
    let data = make_dataset(40, 40, &template, 7).unwrap();
    let dataset: Vec<_> = data.iter().map(|d| (d.clip.clone(), d.truth.label)).collect();
    let cfg = TrainConfig {
        epochs: 4,
        lr_main: 0.01,
        lr_head: 0.002,
        batch_size: 4,
        ..TrainConfig::toy(7)
    };
    let (model, _) = train_toy(&dataset, &cfg, ModelConfig::toy(7)).unwrap();

    // For fake clips, plant a single part at a given offset from the truth
    // and measure the displacement the backward proposes for it.
    let mut by_offset: Vec<(f64, f64, usize)> = vec![(0.0, 0.0, 0); 4];
    let offsets = [4.0f64, 8.0, 12.0, 20.0];
    for d in data.iter().filter(|d| d.truth.label == 1).take(12) {
        let f = d.truth.flicker.as_ref().unwrap();
        for (oi, &off) in offsets.iter().enumerate() {
            // Window to the left of the truth: correct pull is +x.
            let ax = (f.center_x as f64 - off).clamp(16.0, 48.0);
            let ay = f.center_y as f64;
            let mut probe = model.clone();
            // Zero regressor weights, bias set so part 0 lands at (ax, ay).
            probe.regressor.weights.data_mut().fill(0.0);
            let logit = |c: f64, lo: f64, hi: f64| (((c - lo) / (hi - lo)) / (1.0 - (c - lo) / (hi - lo))).ln();
            for p in 0..probe.cfg.parts {
                probe.regressor.bias[2 * p] = logit(ax, 16.0, 48.0) as f32;
                probe.regressor.bias[2 * p + 1] = logit(ay, 16.0, 48.0) as f32;
            }
            let trace = probe.forward(&d.clip).unwrap();
            let mut store = GradStore::default();
            probe.backward(&trace, 1, 1.0, &mut store).unwrap();
            // Part-0 raw-a gradient: descent direction is -g; correct is +x.
            let g = store.get("reg.b").unwrap()[0] as f64;
            by_offset[oi].0 += -g;
            if -g > 0.0 {
                by_offset[oi].1 += 1.0;
            }
            by_offset[oi].2 += 1;
        }
    }
    for (oi, &off) in offsets.iter().enumerate() {
        let (sum, correct, n) = by_offset[oi];
        println!(
            "offset {off:>4}: mean pull {:+.4} (want > 0), sign-correct {}/{}",
            sum / n as f64,
            correct as usize,
            n
        );
    }
}
