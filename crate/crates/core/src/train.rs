//! Two-phase training and evaluation: the composite loss with its warmup
//! schedule, mini-batch SGD with momentum over two parameter groups, the
//! desk-scale trainer, and ROC-based metrics with clip-to-video score
//! aggregation.

use std::collections::HashMap;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Clip;
use crate::model::{Detector, ForwardTrace, GradStore, ModelConfig, ParamGroup};
use crate::par;

/// Numerically stable binary cross-entropy from a logit.
pub fn bce_loss(logit: f64, label: u8) -> f64 {
    let y = label as f64;
    logit.max(0.0) - logit * y + (1.0 + (-logit.abs()).exp()).ln()
}

/// d bce / d logit = sigmoid(logit) - label.
pub fn bce_grad(logit: f64, label: u8) -> f64 {
    1.0 / (1.0 + (-logit).exp()) - label as f64
}

/// Trainer settings. The warmup keeps the final-classifier term out of the
/// loss for the first `lambda_warmup_epochs` epochs.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lambda_warmup_epochs: usize,
    pub lambda_value: f64,
    pub lr_main: f64,
    pub lr_head: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults: 10 epochs, 2 warmup.
    pub fn toy(seed: u64) -> Self {
        Self {
            epochs: 10,
            lambda_warmup_epochs: 2,
            lambda_value: 1.0,
            lr_main: 0.02,
            lr_head: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            seed,
        }
    }

    /// The full-scale schedule: 40 epochs with a 4-epoch warmup.
    pub fn with_paper_schedule(mut self) -> Self {
        self.epochs = 40;
        self.lambda_warmup_epochs = 4;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.lambda_warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup {} exceeds epochs {}",
                self.lambda_warmup_epochs, self.epochs
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Final-term weight at the given epoch: zero through the warmup, then the
/// configured value.
pub fn lambda_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.lambda_warmup_epochs {
        0.0
    } else {
        cfg.lambda_value
    }
}

/// Composite loss: the weighted final term plus the three auxiliary terms.
pub fn total_loss(
    aux_logits: (f64, f64, f64),
    final_logit: f64,
    label: u8,
    epoch: usize,
    cfg: &TrainConfig,
) -> f64 {
    let (g, p, sp) = aux_logits;
    lambda_at(epoch, cfg) * bce_loss(final_logit, label)
        + bce_loss(g, label)
        + bce_loss(p, label)
        + bce_loss(sp, label)
}

/// SGD with momentum on the main group; the head group updates without
/// momentum. Weight decay applies to both groups.
#[derive(Debug, Default)]
pub struct Sgd {
    velocity: HashMap<String, Vec<f32>>,
}

impl Sgd {
    /// Updates one parameter slice in place.
    pub fn update_one(
        &mut self,
        name: &str,
        group: ParamGroup,
        param: &mut [f32],
        grad: &[f32],
        cfg: &TrainConfig,
    ) {
        debug_assert_eq!(param.len(), grad.len(), "grad shape for {name}");
        match group {
            ParamGroup::Main => {
                let v = self
                    .velocity
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; param.len()]);
                for i in 0..param.len() {
                    let g = grad[i] as f64 + cfg.weight_decay * param[i] as f64;
                    let vel = cfg.momentum * v[i] as f64 + g;
                    v[i] = vel as f32;
                    param[i] = (param[i] as f64 - cfg.lr_main * vel) as f32;
                }
            }
            ParamGroup::Head => {
                for i in 0..param.len() {
                    let g = grad[i] as f64 + cfg.weight_decay * param[i] as f64;
                    param[i] = (param[i] as f64 - cfg.lr_head * g) as f32;
                }
            }
        }
    }

    /// Applies accumulated gradients to every trainable parameter.
    pub fn step(&mut self, model: &mut Detector, grads: &GradStore, cfg: &TrainConfig) {
        let mut updates: Vec<(String, ParamGroup)> = Vec::new();
        model.visit_params_mut(|name, group, _| updates.push((name.to_string(), group)));
        // Second pass with lookups so the borrow of the model is short.
        model.visit_params_mut(|name, group, param| {
            if let Some(g) = grads.get(name) {
                // Split borrow: self is captured mutably once.
                let _ = &updates;
                Self::update_slice(&mut self.velocity, name, group, param, g, cfg);
            }
        });
    }

    fn update_slice(
        velocity: &mut HashMap<String, Vec<f32>>,
        name: &str,
        group: ParamGroup,
        param: &mut [f32],
        grad: &[f32],
        cfg: &TrainConfig,
    ) {
        match group {
            ParamGroup::Main => {
                let v = velocity
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; param.len()]);
                for i in 0..param.len() {
                    let g = grad[i] as f64 + cfg.weight_decay * param[i] as f64;
                    let vel = cfg.momentum * v[i] as f64 + g;
                    v[i] = vel as f32;
                    param[i] = (param[i] as f64 - cfg.lr_main * vel) as f32;
                }
            }
            ParamGroup::Head => {
                for i in 0..param.len() {
                    let g = grad[i] as f64 + cfg.weight_decay * param[i] as f64;
                    param[i] = (param[i] as f64 - cfg.lr_head * g) as f32;
                }
            }
        }
    }
}

/// Computes a batch's mean loss and summed gradients. Items are evaluated
/// independently (possibly in parallel) and merged in index order, so the
/// result is identical for any worker count.
pub fn batch_step(
    model: &Detector,
    batch: &[(&Clip, u8)],
    epoch: usize,
    cfg: &TrainConfig,
) -> Result<(f64, GradStore)> {
    let lambda = lambda_at(epoch, cfg);
    let results: Vec<Result<(f64, GradStore)>> = par::map_indexed(batch.len(), |i| {
        let (clip, label) = batch[i];
        let trace = model.forward(clip)?;
        let loss = total_loss(
            (trace.logit_g, trace.logit_p, trace.logit_sp),
            trace.logit_final,
            *&label,
            epoch,
            cfg,
        );
        let mut store = GradStore::default();
        model.backward(&trace, label, lambda, &mut store)?;
        Ok((loss, store))
    });
    let mut total = 0.0;
    let mut merged = GradStore::default();
    for r in results {
        let (loss, store) = r?;
        total += loss;
        merged.merge(&store);
    }
    merged.scale(1.0 / batch.len() as f32);
    Ok((total / batch.len() as f64, merged))
}

/// Trains a fresh detector on labeled clips. Returns the model and the
/// per-epoch mean loss trace. Deterministic for a fixed seed.
pub fn train_toy(
    dataset: &[(Clip, u8)],
    cfg: &TrainConfig,
    model_cfg: ModelConfig,
) -> Result<(Detector, Vec<f64>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let has_pos = dataset.iter().any(|(_, l)| *l == 1);
    let has_neg = dataset.iter().any(|(_, l)| *l == 0);
    if !has_pos || !has_neg {
        return Err(Error::Input("dataset must contain both labels".into()));
    }
    let mut model = Detector::new(model_cfg)?;
    let mut sgd = Sgd::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&Clip, u8)> =
                chunk.iter().map(|&i| (&dataset[i].0, dataset[i].1)).collect();
            let (loss, grads) = batch_step(&model, &batch, epoch, cfg)?;
            sgd.step(&mut model, &grads, cfg);
            epoch_loss += loss;
            batches += 1;
        }
        trace.push(epoch_loss / batches as f64);
    }
    Ok((model, trace))
}

/// Scores clips with a trained model; returns (source_id, probability).
/// Evaluation fans out across workers but the output order is the input
/// order.
pub fn evaluate(model: &Detector, clips: &[(Clip, u8)]) -> Result<Vec<(String, f64, u8)>> {
    let results: Vec<Result<(String, f64, u8)>> = par::map_indexed(clips.len(), |i| {
        let trace: ForwardTrace = model.forward(&clips[i].0)?;
        Ok((clips[i].0.source_id.clone(), trace.probability(), clips[i].1))
    });
    results.into_iter().collect()
}

/// ROC summary: trapezoidal AUC (equal to the pairwise rank statistic) and
/// the interpolated equal-error rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocReport {
    pub auc: f64,
    pub eer: f64,
    /// (false-positive rate, true-positive rate) at descending thresholds.
    pub points: Vec<(f64, f64)>,
}

/// Computes AUC and EER. AUC uses average ranks, so ties count one half;
/// this equals the brute-force pairwise comparison exactly.
pub fn roc_metrics(scores: &[f64], labels: &[u8]) -> Result<RocReport> {
    if scores.len() != labels.len() {
        return Err(Error::Input("scores and labels differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Input("need both classes for ROC metrics".into()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Input(format!("non-finite score {s}")));
    }

    // Average ranks (1-based) over ascending scores.
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    let auc = u / (n_pos as f64 * n_neg as f64);

    // ROC sweep at descending thresholds.
    let mut desc = idx.clone();
    desc.reverse();
    let mut points = vec![(0.0f64, 0.0f64)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < desc.len() {
        let mut j = i;
        while j + 1 < desc.len() && scores[desc[j + 1]] == scores[desc[i]] {
            j += 1;
        }
        for &k in &desc[i..=j] {
            if labels[k] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        i = j + 1;
    }

    // EER: the crossing of fpr and fnr = 1 - tpr along the curve.
    let mut eer = 0.5;
    for w in points.windows(2) {
        let (f1, t1) = w[0];
        let (f2, t2) = w[1];
        let d1 = f1 - (1.0 - t1);
        let d2 = f2 - (1.0 - t2);
        if d1 <= 0.0 && d2 >= 0.0 {
            if (d2 - d1).abs() < 1e-300 {
                eer = f1;
            } else {
                let t = -d1 / (d2 - d1);
                eer = f1 + t * (f2 - f1);
            }
            break;
        }
    }
    Ok(RocReport { auc, eer, points })
}

/// Averages clip probabilities per video; output keeps first-appearance
/// order of the video ids.
pub fn video_level_scores(clip_scores: &[(String, f64)]) -> Vec<(String, f64)> {
    let mut order: Vec<String> = Vec::new();
    let mut sums: HashMap<String, (f64, usize)> = HashMap::new();
    for (id, s) in clip_scores {
        let e = sums.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            (0.0, 0)
        });
        e.0 += s;
        e.1 += 1;
    }
    order
        .into_iter()
        .map(|id| {
            let (sum, n) = sums[&id];
            (id, sum / n as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_dataset, SynthSpec};
    use rand::Rng;

    #[test]
    fn bce_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((bce_loss(0.0, 0) - ln2).abs() < 1e-12);
        assert!((bce_loss(0.0, 1) - ln2).abs() < 1e-12);
        assert!(bce_loss(20.0, 1) <= 1e-8);
        assert!(bce_loss(-20.0, 0) <= 1e-8);
        // Gradient vs finite differences.
        for (logit, label) in [(0.3, 1u8), (-1.7, 0u8), (4.0, 0u8)] {
            let h = 1e-6;
            let fd = (bce_loss(logit + h, label) - bce_loss(logit - h, label)) / (2.0 * h);
            assert!((bce_grad(logit, label) - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn total_loss_schedule() {
        let cfg = TrainConfig {
            lambda_warmup_epochs: 4,
            ..TrainConfig::toy(0)
        };
        let ln2 = std::f64::consts::LN_2;
        // Warmup: the final term contributes nothing, whatever its logit.
        let l0 = total_loss((0.0, 0.0, 0.0), 123.0, 1, 0, &cfg);
        assert!((l0 - 3.0 * ln2).abs() < 1e-12);
        // Past warmup the weight is 1.
        let l4 = total_loss((0.0, 0.0, 0.0), 0.0, 1, 4, &cfg);
        assert!((l4 - 4.0 * ln2).abs() < 1e-12);
        assert_eq!(lambda_at(3, &cfg), 0.0);
        assert_eq!(lambda_at(4, &cfg), 1.0);
    }

    #[test]
    fn momentum_zero_equals_vanilla_descent_on_quadratic() {
        // Minimize 0.5 * w^2 per coordinate: gradient is w itself.
        let cfg = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            lr_main: 0.1,
            ..TrainConfig::toy(0)
        };
        let mut sgd = Sgd::default();
        let mut w = vec![1.0f32, -2.0, 0.5];
        let mut w_ref = w.clone();
        for _ in 0..5 {
            let g: Vec<f32> = w.to_vec();
            sgd.update_one("w", ParamGroup::Main, &mut w, &g, &cfg);
            for v in w_ref.iter_mut() {
                *v -= 0.1 * *v;
            }
            for (a, b) in w.iter().zip(&w_ref) {
                assert!((a - b).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let cfg = TrainConfig {
            momentum: 0.9,
            weight_decay: 0.0,
            lr_main: 0.1,
            ..TrainConfig::toy(0)
        };
        let mut sgd = Sgd::default();
        let mut w = vec![0.0f32];
        // Constant gradient 1: updates are lr * (1, 1.9, 2.71, ...).
        sgd.update_one("w", ParamGroup::Main, &mut w, &[1.0], &cfg);
        assert!((w[0] + 0.1).abs() < 1e-7);
        sgd.update_one("w", ParamGroup::Main, &mut w, &[1.0], &cfg);
        assert!((w[0] + 0.1 + 0.19).abs() < 1e-6);
    }

    #[test]
    fn roc_examples_and_pairwise_oracle() {
        let r = roc_metrics(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.eer, 0.0);

        let r = roc_metrics(&[0.5; 6], &[1, 0, 1, 0, 1, 0]).unwrap();
        assert_eq!(r.auc, 0.5);

        let r = roc_metrics(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert_eq!(r.auc, 0.75);

        assert!(roc_metrics(&[0.1, 0.2], &[1, 1]).is_err());

        // Random integer-rank score sets: exact agreement with the O(n^2)
        // pairwise count.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..50 {
            let n = rng.gen_range(5..80);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..12) as f64).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            if labels.iter().all(|&l| l == 0) || labels.iter().all(|&l| l == 1) {
                continue;
            }
            let fast = roc_metrics(&scores, &labels).unwrap().auc;
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] == 1 && labels[j] == 0 {
                        den += 1.0;
                        if scores[i] > scores[j] {
                            num += 1.0;
                        } else if scores[i] == scores[j] {
                            num += 0.5;
                        }
                    }
                }
            }
            assert_eq!(fast, num / den);
        }
    }

    #[test]
    fn video_scores_group_and_average() {
        let one = video_level_scores(&[("a".into(), 0.3)]);
        assert_eq!(one, vec![("a".to_string(), 0.3)]);

        let avg = video_level_scores(&[("v".into(), 0.2), ("v".into(), 0.8)]);
        assert_eq!(avg, vec![("v".to_string(), 0.5)]);

        // Random grouping vs a brute-force oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ids = ["a", "b", "c", "d"];
        let data: Vec<(String, f64)> = (0..40)
            .map(|_| {
                (
                    ids[rng.gen_range(0..ids.len())].to_string(),
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect();
        let fast = video_level_scores(&data);
        for (id, mean) in &fast {
            let vals: Vec<f64> = data
                .iter()
                .filter(|(i, _)| i == id)
                .map(|(_, s)| *s)
                .collect();
            let expect = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((mean - expect).abs() < 1e-12);
        }
    }

    fn tiny_dataset() -> Vec<(Clip, u8)> {
        let template = SynthSpec {
            height: 48,
            width: 48,
            ..SynthSpec::default_toy(0)
        };
        make_dataset(3, 3, &template, 21)
            .unwrap()
            .into_iter()
            .map(|d| (d.clip, d.truth.label))
            .collect()
    }

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            height: 48,
            width: 48,
            theta: 12.0,
            ..ModelConfig::toy(5)
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let data = tiny_dataset();
        let cfg = TrainConfig {
            epochs: 1,
            lambda_warmup_epochs: 0,
            lr_main: 0.0,
            lr_head: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::toy(3)
        };
        let (mut trained, _) = train_toy(&data, &cfg, tiny_model_cfg()).unwrap();
        let mut fresh = Detector::new(tiny_model_cfg()).unwrap();
        let mut a = Vec::new();
        trained.visit_params_mut(|_, _, d| a.extend(d.iter().map(|v| v.to_bits())));
        let mut b = Vec::new();
        fresh.visit_params_mut(|_, _, d| b.extend(d.iter().map(|v| v.to_bits())));
        assert_eq!(a, b);
    }

    #[test]
    fn training_is_deterministic_for_fixed_seed() {
        let data = tiny_dataset();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            ..TrainConfig::toy(3)
        };
        let (_, trace1) = train_toy(&data, &cfg, tiny_model_cfg()).unwrap();
        let (_, trace2) = train_toy(&data, &cfg, tiny_model_cfg()).unwrap();
        let bits = |t: &[f64]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&trace1), bits(&trace2));
    }

    #[test]
    fn single_class_dataset_is_input_error() {
        let data: Vec<(Clip, u8)> = tiny_dataset()
            .into_iter()
            .map(|(c, _)| (c, 1u8))
            .collect();
        assert!(matches!(
            train_toy(&data, &TrainConfig::toy(0), tiny_model_cfg()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn context_stack_is_frozen_through_training() {
        let data = tiny_dataset();
        let cfg = TrainConfig {
            epochs: 1,
            lambda_warmup_epochs: 1,
            ..TrainConfig::toy(3)
        };
        let fresh = Detector::new(tiny_model_cfg()).unwrap();
        let before = fresh.context.weights_bytes();
        let (trained, _) = train_toy(&data, &cfg, tiny_model_cfg()).unwrap();
        assert_eq!(before, trained.context.weights_bytes());
        let before2 = trained.freq_stack.convs[0].weight.clone();
        assert_eq!(
            before2,
            Detector::new(tiny_model_cfg()).unwrap().freq_stack.convs[0].weight
        );
    }

    #[test]
    fn warmup_blocks_final_head_gradients() {
        let data = tiny_dataset();
        let model = Detector::new(tiny_model_cfg()).unwrap();
        let cfg = TrainConfig {
            lambda_warmup_epochs: 2,
            ..TrainConfig::toy(0)
        };
        let batch: Vec<(&Clip, u8)> = data.iter().map(|(c, l)| (c, *l)).collect();
        let (_, g_warm) = batch_step(&model, &batch, 0, &cfg).unwrap();
        let (_, g_live) = batch_step(&model, &batch, 2, &cfg).unwrap();
        for name in ["head.w", "head.wb", "head.b", "tte.wv", "w_tp", "w_tp_freq"] {
            let warm = g_warm.get(name).unwrap();
            assert!(
                warm.iter().all(|&v| v == 0.0),
                "{name} has nonzero warmup gradient"
            );
            let live = g_live.get(name).unwrap();
            assert!(
                live.iter().any(|&v| v != 0.0),
                "{name} has no gradient after warmup"
            );
        }
    }
}
