// Scratch: which pooled feature sets generalize for a logistic head.

use flickerlens_core::model::{Detector, ModelConfig};
use flickerlens_core::stacks::global_avg_pool;
use flickerlens_core::synth::{make_dataset, DatasetClip, SynthSpec};
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn max_pool(x: &flickerlens_core::FeatureTensor) -> Vec<f32> {
    let c = x.extent(0);
    let inner = x.len() / c;
    (0..c)
        .map(|ch| {
            x.data()[ch * inner..(ch + 1) * inner]
                .iter()
                .cloned()
                .fold(f32::MIN, f32::max)
        })
        .collect()
}

fn fit(train: &[(Vec<f64>, u8)], test: &[(Vec<f64>, u8)], lr: f64, batch: usize) -> (f64, f64) {
    let dim = train[0].0.len();
    let mut w = vec![0.0f64; dim];
    let mut b = 0.0f64;
    let mut vw = vec![0.0f64; dim];
    let mut vb = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..10 {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut gw = vec![0.0f64; dim];
            let mut gb = 0.0f64;
            for &i in chunk {
                let (x, y) = &train[i];
                let logit: f64 = b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
                let d = 1.0 / (1.0 + (-logit).exp()) - *y as f64;
                for (g, v) in gw.iter_mut().zip(x) {
                    *g += d * v / chunk.len() as f64;
                }
                gb += d / chunk.len() as f64;
            }
            for i in 0..dim {
                vw[i] = 0.9 * vw[i] + gw[i];
                w[i] -= lr * vw[i];
            }
            vb = 0.9 * vb + gb;
            b -= lr * vb;
        }
    }
    let score = |set: &[(Vec<f64>, u8)]| -> f64 {
        let s: Vec<f64> = set
            .iter()
            .map(|(x, _)| b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect();
        let l: Vec<u8> = set.iter().map(|(_, y)| *y).collect();
        auc(&s, &l)
    };
    (score(train), score(test))
}

fn main() {
    let template = SynthSpec::default_toy(0);
    let train = make_dataset(40, 40, &template, 7).unwrap();
    let test = make_dataset(20, 20, &template, 1007).unwrap();
    let model = Detector::new(ModelConfig::toy(7)).unwrap();

    type FeatFn<'a> = Box<dyn Fn(&DatasetClip) -> Vec<f64> + 'a>;
    let variants: Vec<(&str, FeatFn)> = vec![
        (
            "gap4",
            Box::new(|d: &DatasetClip| {
                let t = model.forward(&d.clip).unwrap();
                t.z0_pool.iter().map(|&v| v as f64).collect()
            }),
        ),
        (
            "gap4+max4",
            Box::new(|d: &DatasetClip| {
                let t = model.forward(&d.clip).unwrap();
                let mut f: Vec<f64> = t.z0_pool.iter().map(|&v| v as f64).collect();
                f.extend(max_pool(&t.z0_stages[4]).iter().map(|&v| v as f64));
                f
            }),
        ),
        (
            "max-all-stages",
            Box::new(|d: &DatasetClip| {
                let t = model.forward(&d.clip).unwrap();
                let mut f = Vec::new();
                for s in &t.z0_stages {
                    f.extend(max_pool(s).iter().map(|&v| v as f64));
                }
                f
            }),
        ),
        (
            "gap-all+max-all",
            Box::new(|d: &DatasetClip| {
                let t = model.forward(&d.clip).unwrap();
                let mut f = Vec::new();
                for s in &t.z0_stages {
                    f.extend(global_avg_pool(s).iter().map(|&v| v as f64));
                    f.extend(max_pool(s).iter().map(|&v| v as f64));
                }
                f
            }),
        ),
    ];

    for (name, feat) in variants {
        let train_f: Vec<_> = train.iter().map(|d| (feat(d), d.truth.label)).collect();
        let test_f: Vec<_> = test.iter().map(|d| (feat(d), d.truth.label)).collect();
        for (lr, batch) in [(0.5, 4usize), (1.0, 4), (0.5, 8)] {
            let (tr, te) = fit(&train_f, &test_f, lr, batch);
            println!("{name:>16} lr {lr:>4} batch {batch}: train {tr:.3} test {te:.3}");
        }
    }
}
