//! SGD training on in-batch objectives.
//!
//! Each epoch shuffles the examples, cuts them into batches of `K` (dropping
//! the final partial batch), and for every batch takes one plain SGD step on
//! `J(x, y) + sum_i J(x^i, y)`.

mod config;
mod grad;
mod gradcheck;
mod loss;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::numeric::Real;

pub use config::{parse_key_values, TrainFile, ENCODER_KEYS};
pub use grad::{BatchLoss, Trainable};
pub use gradcheck::{check_gradients, relative_error, GradCheckReport, RELATIVE_FLOOR};
pub use loss::{
    multiple_negatives_loss, multiple_negatives_loss_grad, sigmoid_classifier_loss, sigmoid_matrix_loss_grad,
    total_multiloss, LossKind, ScoreMatrix,
};

/// Step-decay learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_step: usize,
    pub decayed: f64,
}

impl LrSchedule {
    /// 0.01 for the first 10,000 steps, then 0.001.
    pub fn desk() -> Self {
        LrSchedule {
            initial: 0.01,
            decay_step: 10_000,
            decayed: 0.001,
        }
    }

    /// 0.01 for the first 40 million batches, then 0.001.
    pub fn full_scale() -> Self {
        LrSchedule {
            initial: 0.01,
            decay_step: 40_000_000,
            decayed: 0.001,
        }
    }

    pub fn rate(&self, step: usize) -> f64 {
        if step < self.decay_step {
            self.initial
        } else {
            self.decayed
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.decayed > 0.0 && self.initial.is_finite() && self.decayed.is_finite()) {
            return Err(Error::Config("learning rates must be positive and finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub schedule: LrSchedule,
    pub step: usize,
    pub seed: u64,
}

impl OptimizerState {
    pub fn lr(&self) -> f64 {
        self.schedule.rate(self.step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 10,
            schedule: LrSchedule::desk(),
            seed: 0,
            loss: LossKind::MultipleNegatives,
        }
    }
}

/// One optimizer step's worth of diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub epoch: usize,
    /// Loss of the final score.
    pub loss: f64,
    pub per_feature: Vec<f64>,
    pub total: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Trains `model` in place and returns one report per step.
pub fn train<T: Real, M: Trainable<T>>(model: &mut M, data: &[Example], cfg: &TrainConfig) -> Result<Vec<LossReport>> {
    train_with(model, data, cfg, |_| {})
}

/// Like [`train`], calling `on_step` after every update.
pub fn train_with<T: Real, M: Trainable<T>>(
    model: &mut M,
    data: &[Example],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossReport),
) -> Result<Vec<LossReport>> {
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if cfg.epochs > 0 && data.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} training examples",
            cfg.batch_size,
            data.len()
        )));
    }
    cfg.schedule.validate()?;
    let mut state = OptimizerState {
        schedule: cfg.schedule,
        step: 0,
        seed: cfg.seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let lr = state.lr();
            let (loss, grads) = model.compute_gradients(&batch, cfg.loss).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged {
                    step: state.step,
                    loss: f64::NAN,
                },
                other => other,
            })?;
            model.apply_gradients(&grads, T::lit(lr));
            let report = LossReport {
                step: state.step,
                epoch,
                loss: loss.final_loss.as_f64(),
                per_feature: loss.per_feature.iter().map(|l| l.as_f64()).collect(),
                total: loss.total().as_f64(),
                grad_norm: M::grad_squared_norm(&grads).sqrt(),
                lr,
            };
            on_step(&report);
            curve.push(report);
            state.step += 1;
        }
    }
    Ok(curve)
}

/// Mean final-score loss of the reports belonging to `epoch`.
pub fn epoch_mean_loss(curve: &[LossReport], epoch: usize) -> Option<f64> {
    let xs: Vec<f64> = curve.iter().filter(|r| r.epoch == epoch).map(|r| r.loss).collect();
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Writes the loss curve as CSV: `step,loss,per_feature_losses,lr`, with the
/// per-feature losses joined by `;`.
pub fn write_loss_curve(mut w: impl Write, curve: &[LossReport]) -> Result<()> {
    writeln!(w, "step,loss,per_feature_losses,lr")?;
    for r in curve {
        let per: Vec<String> = r.per_feature.iter().map(|l| format!("{l}")).collect();
        writeln!(w, "{},{},{},{}", r.step, r.loss, per.join(";"), r.lr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{DotConfig, DotProductEncoder, JointConfig, JointScorer};
    use crate::text::{FeatureBag, Field};

    fn bag(ids: &[u32], field: Field) -> FeatureBag {
        FeatureBag::from_ids(ids.iter().copied(), field)
    }

    fn example(x: &[&[u32]], y: &[u32]) -> Example {
        Example {
            input: x
                .iter()
                .enumerate()
                .map(|(i, ids)| bag(ids, if i == 0 { Field::Body } else { Field::Subject }))
                .collect(),
            response: bag(y, Field::Response),
            response_text: String::new(),
        }
    }

    fn toy_dot(vocab: usize, d: usize, features: usize, seed: u64) -> DotProductEncoder<f64> {
        let cfg = DotConfig {
            vocab_size: vocab,
            embedding_dim: d,
            features,
            tower: vec![d],
            fusion: vec![d],
        };
        DotProductEncoder::new(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn toy_batch() -> Vec<Example> {
        vec![
            example(&[&[0, 1, 1], &[2]], &[3, 4]),
            example(&[&[2, 5], &[1, 6]], &[7]),
            example(&[&[8], &[]], &[0, 9, 9]),
        ]
    }

    #[test]
    fn lr_schedule_steps_down() {
        let s = LrSchedule {
            initial: 0.01,
            decay_step: 3,
            decayed: 0.001,
        };
        assert_eq!(s.rate(0), 0.01);
        assert_eq!(s.rate(2), 0.01);
        assert_eq!(s.rate(3), 0.001);
        assert_eq!(LrSchedule::full_scale().rate(39_999_999), 0.01);
        assert!(LrSchedule { initial: 0.0, ..s }.validate().is_err());
    }

    #[test]
    fn single_example_batch_has_zero_gradients() {
        let m = toy_dot(10, 4, 2, 1);
        let batch = toy_batch();
        let (loss, grads) = m.compute_gradients(&[&batch[0]], LossKind::MultipleNegatives).unwrap();
        assert_eq!(loss.total(), 0.0);
        assert_eq!(DotProductEncoder::grad_squared_norm(&grads), 0.0);
    }

    #[test]
    fn untouched_embedding_rows_have_zero_gradient() {
        let mut m = toy_dot(12, 4, 1, 2);
        m.for_each_param_mut(&mut |_, s| s.iter_mut().for_each(|v| *v = 0.0));
        let batch = [example(&[&[1, 2]], &[3]), example(&[&[1, 2]], &[3])];
        let refs: Vec<&Example> = batch.iter().collect();
        let (_, grads) = m.compute_gradients(&refs, LossKind::MultipleNegatives).unwrap();
        for id in [0u32, 4, 5, 11] {
            assert!(grads.input_embeddings.row(id).iter().all(|&g| g == 0.0));
            assert!(grads.response_embeddings.row(id).iter().all(|&g| g == 0.0));
        }
        assert!(grads.input_embeddings.touched().all(|(id, _)| id == 1 || id == 2));
    }

    #[test]
    fn dot_gradients_match_finite_differences() {
        let m = toy_dot(10, 4, 2, 5);
        let batch = toy_batch();
        let refs: Vec<&Example> = batch.iter().collect();
        for kind in [LossKind::MultipleNegatives, LossKind::Sigmoid] {
            let report = check_gradients(&m, &refs, kind, 1e-3, 1e-3).unwrap();
            assert!(report.passed(), "{kind:?}: {report:?}");
            assert!(report.checked > 100);
        }
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        let cfg = JointConfig {
            vocab_size: 10,
            embedding_dim: 4,
            features: 2,
            tower: vec![4],
            final_layers: vec![3],
        };
        let m = JointScorer::<f64>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let batch = toy_batch();
        let refs: Vec<&Example> = batch.iter().collect();
        for kind in [LossKind::MultipleNegatives, LossKind::Sigmoid] {
            let report = check_gradients(&m, &refs, kind, 1e-3, 1e-3).unwrap();
            assert!(report.passed(), "{kind:?}: {report:?}");
        }
    }

    #[test]
    fn multiloss_total_is_sum_of_independent_terms() {
        let m = toy_dot(10, 4, 1, 3);
        let batch = [example(&[&[0, 1]], &[3]), example(&[&[2, 5]], &[7]), example(&[&[8]], &[9])];
        let refs: Vec<&Example> = batch.iter().collect();
        let loss = m.batch_loss(&refs, LossKind::MultipleNegatives).unwrap();
        let xs: Vec<_> = batch.iter().map(|e| m.encode_input(&e.input).unwrap()).collect();
        let ys: Vec<_> = batch.iter().map(|e| m.encode_response(&e.response).unwrap()).collect();
        let fin: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| ys.iter().map(|y| crate::numeric::dot(&x.h, &y.h)).collect())
            .collect();
        let feat: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| ys.iter().map(|y| crate::numeric::dot(&x.per_feature[0], &y.per_feature[0])).collect())
            .collect();
        let j = multiple_negatives_loss(&ScoreMatrix::from_rows(&fin).unwrap());
        let j1 = multiple_negatives_loss(&ScoreMatrix::from_rows(&feat).unwrap());
        assert!((loss.total() - (j + j1)).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let mut m = toy_dot(10, 4, 2, 4);
        let before = m.clone();
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 2,
            ..Default::default()
        };
        let curve = train(&mut m, &toy_batch(), &cfg).unwrap();
        assert!(curve.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn duplicated_pair_loss_stays_log_two() {
        let mut m = toy_dot(10, 4, 1, 6).cast::<f32>();
        let e = example(&[&[1, 2]], &[3]);
        let data = vec![e.clone(), e];
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 2,
            schedule: LrSchedule {
                initial: 0.5,
                decay_step: 100,
                decayed: 0.1,
            },
            ..Default::default()
        };
        let curve = train(&mut m, &data, &cfg).unwrap();
        assert_eq!(curve.len(), 20);
        for r in &curve {
            assert!((r.loss - 2f64.ln()).abs() < 1e-6, "{}", r.loss);
        }
    }

    #[test]
    fn separable_echo_data_is_learned() {
        // Each response repeats the input's ids, so pairs are separable.
        let data: Vec<Example> = (0..64u32).map(|i| example(&[&[i]], &[i])).collect();
        let cfg = DotConfig {
            vocab_size: 64,
            embedding_dim: 32,
            features: 1,
            tower: vec![32],
            fusion: vec![32],
        };
        let mut m = DotProductEncoder::<f32>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let k = 8;
        let tcfg = TrainConfig {
            batch_size: k,
            epochs: 10,
            schedule: LrSchedule {
                initial: 0.5,
                decay_step: usize::MAX,
                decayed: 0.5,
            },
            seed: 3,
            loss: LossKind::MultipleNegatives,
        };
        let curve = train(&mut m, &data, &tcfg).unwrap();
        let last = epoch_mean_loss(&curve, 9).unwrap();
        assert!(last < 0.1 * (k as f64).ln(), "final epoch loss {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_batch();
        let run = || {
            let mut m = toy_dot(10, 4, 2, 8).cast::<f32>();
            let cfg = TrainConfig {
                epochs: 5,
                batch_size: 2,
                seed: 11,
                ..Default::default()
            };
            let curve = train(&mut m, &data, &cfg).unwrap();
            (curve, m)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn divergence_aborts() {
        let mut m = toy_dot(10, 4, 1, 8);
        m.input_embeddings.data_mut()[0] = f64::NAN;
        let data = vec![example(&[&[0]], &[1]), example(&[&[2]], &[3])];
        let cfg = TrainConfig {
            batch_size: 2,
            epochs: 1,
            ..Default::default()
        };
        assert!(matches!(train(&mut m, &data, &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut m = toy_dot(10, 4, 1, 8);
        let data = vec![example(&[&[0]], &[1])];
        let cfg = TrainConfig {
            batch_size: 2,
            ..Default::default()
        };
        assert!(train(&mut m, &data, &cfg).is_err());
        assert!(train(&mut m, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn loss_curve_csv_format() {
        let curve = vec![LossReport {
            step: 0,
            epoch: 0,
            loss: 1.5,
            per_feature: vec![0.5, 0.25],
            total: 2.25,
            grad_norm: 1.0,
            lr: 0.01,
        }];
        let mut out = Vec::new();
        write_loss_curve(&mut out, &curve).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "step,loss,per_feature_losses,lr\n0,1.5,0.5;0.25,0.01\n");
    }
}
