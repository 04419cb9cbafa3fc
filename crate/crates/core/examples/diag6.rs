// Scratch: bisect the x-axis displacement bias layer by layer.

use flickerlens_core::apm::{
    apm_coordinate_gradient, crop_grad_to_masked, mask_crop_trace, SoftMaskParams,
};
use flickerlens_core::model::{Detector, ModelConfig};
use flickerlens_core::preprocess::residual_clip;
use flickerlens_core::spectrum::{extract_spectrum, SpectrumMode};
use flickerlens_core::synth::{generate, Motion, SynthSpec};
use flickerlens_core::tensor::FeatureTensor;

fn tensor3(c: usize, h: usize, w: usize, v: f32) -> FeatureTensor {
    FeatureTensor::from_vec(&[("channel", c), ("height", h), ("width", w)], vec![v; c * h * w])
        .unwrap()
}

fn main() {
    let model = Detector::new(ModelConfig::toy(7)).unwrap();
    let p = SoftMaskParams::new(32.0, 32.0, 16.0, 10.0).unwrap();

    // Level 0: ones d_window through scatter + split only, on a uniform
    // volume (trace only used for sample positions).
    let vol = tensor3(16, 64, 64, 1.0);
    let trace = mask_crop_trace(&vol, &p, 32).unwrap();
    let ones = tensor3(16, 32, 32, 1.0);
    let d_masked = crop_grad_to_masked(&trace, &ones, 64, 64);
    let (da, db) = apm_coordinate_gradient(&d_masked, &p).unwrap();
    println!("L0 scatter+split only: ({da:+.5}, {db:+.5})");

    // Level 1: add the stack backward (ones at stage 4) on a NOISE window.
    let mut avg = [(0.0f64, 0.0f64); 4];
    let n = 24;
    for seed in 0..n {
        let spec = SynthSpec {
            motion: Motion::Static,
            flicker: None,
            ..SynthSpec::default_toy(seed)
        };
        let (clip, _) = generate(&spec).unwrap();
        let res = residual_clip(&clip, &model.cfg.residual).unwrap();
        let volr = extract_spectrum(&res, SpectrumMode::Magnitude).unwrap();
        let tr = mask_crop_trace(&volr.data, &p, 32).unwrap();
        let stages = model.freq_stack.forward(&tr.window).unwrap();

        // 1a: ones directly as d_window (no stack).
        let dm = crop_grad_to_masked(&tr, &ones, 64, 64);
        let (da, db) = apm_coordinate_gradient(&dm, &p).unwrap();
        avg[0].0 += da / n as f64;
        avg[0].1 += db / n as f64;

        // 1b: stack backward from stage-1 ones.
        for (slot, stage_idx) in [(1usize, 1usize), (2, 3), (3, 4)] {
            let s = &stages[stage_idx];
            let mut grads: Vec<Option<FeatureTensor>> = vec![None; 5];
            grads[stage_idx] = Some(tensor3(s.extent(0), s.extent(1), s.extent(2), 1.0));
            let dw = model
                .freq_stack
                .backward_input(&tr.window, &stages, &grads)
                .unwrap();
            let dm = crop_grad_to_masked(&tr, &dw, 64, 64);
            let (da, db) = apm_coordinate_gradient(&dm, &p).unwrap();
            avg[slot].0 += da / n as f64;
            avg[slot].1 += db / n as f64;
        }
    }
    println!("L1a ones d_window on noise volumes: ({:+.5}, {:+.5})", avg[0].0, avg[0].1);
    println!("L1b via stage1 backward:            ({:+.5}, {:+.5})", avg[1].0, avg[1].1);
    println!("L1c via stage3 backward:            ({:+.5}, {:+.5})", avg[2].0, avg[2].1);
    println!("L1d via stage4 backward:            ({:+.5}, {:+.5})", avg[3].0, avg[3].1);
}
