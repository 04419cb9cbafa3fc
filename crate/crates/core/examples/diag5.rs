// Scratch: measure raw left/right split displacements on a flicker-free
// clip. Systematic nonzero values reveal structural bias.

use flickerlens_core::apm::{
    apm_coordinate_gradient, crop_grad_to_masked, mask_crop_trace, SoftMaskParams,
};
use flickerlens_core::model::{Detector, ModelConfig};
use flickerlens_core::preprocess::residual_clip;
use flickerlens_core::spectrum::{extract_spectrum, SpectrumMode};
use flickerlens_core::synth::{generate, FlickerSpec, Motion, SynthSpec};
use flickerlens_core::tensor::FeatureTensor;

fn main() {
    let model = Detector::new(ModelConfig::toy(7)).unwrap();
    // Average displacement over many clean clips: systematic bias isolator.
    let mut avg = (0.0f64, 0.0f64);
    let n = 24;
    for seed in 0..n {
        let mode: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
        let spec = SynthSpec {
            motion: if mode == 1 { Motion::Static } else { Motion::Drift },
            flicker: None,
            ..SynthSpec::default_toy(seed)
        };
        let (clip, _) = generate(&spec).unwrap();
        let res = residual_clip(&clip, &model.cfg.residual).unwrap();
        let vol = extract_spectrum(&res, SpectrumMode::Magnitude).unwrap();
        let p = SoftMaskParams::new(32.0, 32.0, 16.0, 10.0).unwrap();
        let trace = mask_crop_trace(&vol.data, &p, 32).unwrap();
        let stages = model.freq_stack.forward(&trace.window).unwrap();
        let mut stage_grads: Vec<Option<FeatureTensor>> = vec![None; 5];
        let s4 = &stages[4];
        let dims: Vec<(&str, usize)> = vec![
            ("channel", s4.extent(0)),
            ("height", s4.extent(1)),
            ("width", s4.extent(2)),
        ];
        stage_grads[4] = Some(FeatureTensor::from_vec(&dims, vec![1.0; s4.len()]).unwrap());
        let d_window = model.freq_stack.backward_input(&trace.window, &stages, &stage_grads).unwrap();
        let d_masked = crop_grad_to_masked(&trace, &d_window, 64, 64);
        let (da, db) = apm_coordinate_gradient(&d_masked, &p).unwrap();
        avg.0 += da / n as f64;
        avg.1 += db / n as f64;
    }
    println!("mean clean disp over {n} clips: ({:+.4}, {:+.4})", avg.0, avg.1);
    for (name, flicker) in [
        ("clean", None),
        (
            "flicker@(44,22)",
            Some(FlickerSpec {
                center_y: 22,
                center_x: 44,
                radius: 8,
                bins: vec![3, 5],
                amplitude: 0.08,
            }),
        ),
    ] {
        let spec = SynthSpec {
            motion: Motion::Drift,
            flicker,
            ..SynthSpec::default_toy(3)
        };
        let (clip, _) = generate(&spec).unwrap();
        let res = residual_clip(&clip, &model.cfg.residual).unwrap();
        let vol = extract_spectrum(&res, SpectrumMode::Magnitude).unwrap();
        println!("== {name}");
        for (cx, cy) in [(26.0, 26.0), (32.0, 32.0), (38.0, 26.0), (38.0, 38.0), (44.0, 22.0)] {
            let p = SoftMaskParams::new(cx, cy, 16.0, 10.0).unwrap();
            let trace = mask_crop_trace(&vol.data, &p, 32).unwrap();
            let stages = model.freq_stack.forward(&trace.window).unwrap();
            // Upstream gradient mimicking a positive head pull on all the
            // pooled features: d stage = uniform on stage 4 + argmax spikes.
            let mut stage_grads: Vec<Option<FeatureTensor>> = vec![None; 5];
            let s4 = &stages[4];
            let dims: Vec<(&str, usize)> = vec![
                ("channel", s4.extent(0)),
                ("height", s4.extent(1)),
                ("width", s4.extent(2)),
            ];
            stage_grads[4] =
                Some(FeatureTensor::from_vec(&dims, vec![1.0; s4.len()]).unwrap());
            let d_window = model
                .freq_stack
                .backward_input(&trace.window, &stages, &stage_grads)
                .unwrap();
            let d_masked = crop_grad_to_masked(&trace, &d_window, 64, 64);
            let (da, db) = apm_coordinate_gradient(&d_masked, &p).unwrap();
            println!("  window @({cx},{cy}): disp ({da:+.4}, {db:+.4})");
        }
    }
}
