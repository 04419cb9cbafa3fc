// Scratch: vector field of the steering pull at a grid of window positions,
// for a mid-training model on one fake clip.

use flickerlens_core::model::{Detector, GradStore, ModelConfig};
use flickerlens_core::synth::{make_dataset, SynthSpec};
use flickerlens_core::train::{train_toy, TrainConfig};

fn pull_at(model: &Detector, clip: &flickerlens_core::ingest::Clip, ax: f64, ay: f64) -> (f64, f64) {
    let mut probe = model.clone();
    probe.regressor.weights.data_mut().fill(0.0);
    let logit = |c: f64| (((c - 16.0) / 32.0) / (1.0 - (c - 16.0) / 32.0)).ln();
    for p in 0..probe.cfg.parts {
        probe.regressor.bias[2 * p] = logit(ax) as f32;
        probe.regressor.bias[2 * p + 1] = logit(ay) as f32;
    }
    let trace = probe.forward(clip).unwrap();
    let mut store = GradStore::default();
    probe.backward(&trace, 1, 1.0, &mut store).unwrap();
    let g = store.get("reg.b").unwrap();
    // Descent displacement of (a, b) for part 0, undoing the squash slope.
    (-g[0] as f64, -g[1] as f64)
}

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let template = SynthSpec::default_toy(0);
    let data = make_dataset(40, 40, &template, 7).unwrap();
    let dataset: Vec<_> = data.iter().map(|d| (d.clip.clone(), d.truth.label)).collect();
    let cfg = TrainConfig {
        epochs,
        lr_main: 0.02,
        lr_head: 0.002,
        batch_size: 4,
        ..TrainConfig::toy(7)
    };
    let (model, _) = train_toy(&dataset, &cfg, ModelConfig::toy(7)).unwrap();

    for d in data.iter().filter(|d| d.truth.label == 1).take(3) {
        let f = d.truth.flicker.as_ref().unwrap();
        println!("fake clip, flicker at (x={}, y={}):", f.center_x, f.center_y);
        for ay in [20.0, 28.0, 36.0, 44.0] {
            let mut line = String::new();
            for ax in [20.0, 28.0, 36.0, 44.0] {
                let (px, py) = pull_at(&model, &d.clip, ax, ay);
                let arrow = match (px.abs() > py.abs(), px > 0.0, py > 0.0) {
                    (true, true, _) => ">",
                    (true, false, _) => "<",
                    (false, _, true) => "v",
                    (false, _, false) => "^",
                };
                line += &format!("  ({ax:>2},{ay:>2}) {arrow} ({px:+.3},{py:+.3})");
            }
            println!("{line}");
        }
    }
}
