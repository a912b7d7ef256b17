//! Training loop and evaluation pass.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Binding, Graph, ParamStore, Real, Tensor};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{Model, Prediction};
use crate::optim::{Sgd, SgdConfig};
use crate::rng::Rng;
use crate::synth::TwoFieldSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 16,
            epochs: 30,
            seed: 1,
            flip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite())
            || !(0.0..1.0).contains(&self.momentum)
            || self.weight_decay < 0.0
        {
            return Err(Error::Config(format!(
                "need lr >= 0, momentum in [0, 1), weight decay >= 0 (got {}, {}, {})",
                self.lr, self.momentum, self.weight_decay
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch size and epochs must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub log: Vec<EpochLog>,
    pub velocities: Vec<Tensor<T>>,
    pub steps: usize,
}

/// Mini-batch SGD over `data`. Mutates `store` in place.
pub fn train<T: Real>(
    model: &Model,
    store: &mut ParamStore<T>,
    data: &[TwoFieldSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Undefined("empty training set".into()));
    }
    let mut rng = Rng::new(cfg.seed).fork();
    let mut opt = Sgd::new(cfg.sgd(), store);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let mut g = Graph::new();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            g.reset();
            let b = Binding::bind(&mut g, store, true);
            let mut sum = None;
            for &i in batch {
                let s = &data[i];
                let flipped;
                let pair = if cfg.flip && rng.bernoulli(0.5) {
                    flipped = s.pair.flipped();
                    &flipped
                } else {
                    &s.pair
                };
                let l = model.loss(&mut g, &b, pair, s.grade)?;
                sum = Some(match sum {
                    None => l,
                    Some(acc) => g.add(acc, l)?,
                });
            }
            let sum = sum.expect("non-empty batch");
            let loss = g.scale(sum, 1.0 / batch.len() as f64);
            let value = g.value(loss).data()[0].to_f64();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: value,
                });
            }
            g.backward(loss)?;
            let grads: Vec<Option<Vec<T>>> = b
                .vars()
                .iter()
                .map(|&v| g.grad(v).map(<[T]>::to_vec))
                .collect();
            opt.step(store, &grads)?;
            total += value * batch.len() as f64;
            step += 1;
        }
        let entry = EpochLog {
            epoch,
            mean_loss: total / data.len() as f64,
            steps: step,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome {
        log,
        velocities: opt.velocities,
        steps: step,
    })
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<Prediction>,
    /// Accuracy on split-evidence eyes; `None` if there are none.
    pub split_evidence_accuracy: Option<f64>,
    pub split_evidence_count: usize,
}

pub fn evaluate<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    data: &[TwoFieldSample],
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Undefined("empty evaluation set".into()));
    }
    let predictions = data
        .iter()
        .map(|s| model.predict(store, &s.pair))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = data.iter().map(|s| s.grade).collect();
    let preds: Vec<usize> = predictions.iter().map(|p| p.grade).collect();
    let probs: Vec<Vec<f64>> = predictions
        .iter()
        .map(|p| p.probabilities.clone())
        .collect();
    let report = MetricsReport::compute(&labels, &preds, &probs, model.cfg.classes)?;
    let split: Vec<bool> = data
        .iter()
        .zip(&preds)
        .filter(|(s, _)| s.split_evidence)
        .map(|(s, &p)| s.grade == p)
        .collect();
    let split_evidence_accuracy = (!split.is_empty())
        .then(|| split.iter().filter(|&&c| c).count() as f64 / split.len() as f64);
    Ok(Evaluation {
        report,
        predictions,
        split_evidence_accuracy,
        split_evidence_count: split.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::CfaConfig;
    use crate::encoder::EncoderConfig;
    use crate::geometry::PeMode;
    use crate::model::{CrossFiTConfig, Strategy};
    use crate::synth::{generate_dataset, SynthConfig};

    fn tiny_model_cfg(strategy: Strategy) -> CrossFiTConfig {
        CrossFiTConfig {
            encoder: EncoderConfig {
                stage_channels: vec![4, 8],
                stride: 2,
                kernel: 3,
                input_size: 16,
            },
            cfa: CfaConfig {
                layers: 1,
                heads: 2,
                d_t: 8,
                mlp_ratio: 2,
                threshold: 0.06,
                zero_init: false,
            },
            strategy,
            pe_mode: PeMode::Aligned,
            mask: true,
            classes: 5,
        }
    }

    fn tiny_data(n: usize) -> Vec<TwoFieldSample> {
        let cfg = SynthConfig {
            size: 16,
            ..SynthConfig::default()
        };
        generate_dataset(7, 0, n, &cfg).unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let data = tiny_data(6);
        let cfg = tiny_model_cfg(Strategy::CrossFit);
        let mut store = ParamStore::<f32>::new();
        let model = Model::new(&cfg, &mut store, &mut Rng::new(1)).unwrap();
        let before = store.clone();
        let tc = TrainConfig {
            lr: 0.0,
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let out = train(&model, &mut store, &data, &tc, |_| {}).unwrap();
        assert_eq!(out.log.len(), 3);
        assert_eq!(out.steps, 6);
        for ((_, a), (_, b)) in store.iter().zip(before.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn same_seed_same_curve() {
        let data = tiny_data(8);
        let run = || {
            let cfg = tiny_model_cfg(Strategy::CrossFit);
            let mut store = ParamStore::<f32>::new();
            let model = Model::new(&cfg, &mut store, &mut Rng::new(3)).unwrap();
            let tc = TrainConfig {
                epochs: 3,
                batch_size: 4,
                ..TrainConfig::default()
            };
            let log = train(&model, &mut store, &data, &tc, |_| {}).unwrap().log;
            (log.iter().map(|e| e.mean_loss).collect::<Vec<_>>(), store)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        for ((_, x), (_, y)) in sa.iter().zip(sb.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn single_pair_overfits() {
        let data: Vec<TwoFieldSample> = tiny_data(10)
            .into_iter()
            .filter(|s| s.grade > 0)
            .take(1)
            .collect();
        for strategy in [Strategy::CrossFit, Strategy::FeatMax, Strategy::PredAvg] {
            let cfg = tiny_model_cfg(strategy);
            let mut store = ParamStore::<f64>::new();
            let model = Model::new(&cfg, &mut store, &mut Rng::new(5)).unwrap();
            let tc = TrainConfig {
                lr: 0.05,
                epochs: 200,
                batch_size: 1,
                flip: false,
                ..TrainConfig::default()
            };
            let log = train(&model, &mut store, &data, &tc, |_| {}).unwrap().log;
            let last = log.last().unwrap().mean_loss;
            assert!(last < 0.05, "{strategy}: final loss {last}");
            assert_eq!(
                model.predict(&store, &data[0].pair).unwrap().grade,
                data[0].grade
            );
        }
    }

    #[test]
    fn divergence_aborts() {
        let data = tiny_data(4);
        let cfg = tiny_model_cfg(Strategy::FeatAvg);
        let mut store = ParamStore::<f32>::new();
        let model = Model::new(&cfg, &mut store, &mut Rng::new(6)).unwrap();
        let tc = TrainConfig {
            lr: 1e30,
            epochs: 20,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let err = train(&model, &mut store, &data, &tc, |_| {}).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    #[test]
    fn evaluation_counts_split_subset() {
        let data = tiny_data(20);
        let cfg = tiny_model_cfg(Strategy::FeatMax);
        let mut store = ParamStore::<f32>::new();
        let model = Model::new(&cfg, &mut store, &mut Rng::new(8)).unwrap();
        let ev = evaluate(&model, &store, &data).unwrap();
        assert_eq!(ev.report.n_samples, 20);
        assert_eq!(ev.predictions.len(), 20);
        assert_eq!(
            ev.split_evidence_count,
            data.iter().filter(|s| s.split_evidence).count()
        );
        assert!(evaluate(&model, &store, &[]).is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }
}
