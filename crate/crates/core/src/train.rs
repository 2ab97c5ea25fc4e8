//! Mini-batch training loop shared by the backbone, sequence head and detector.

use std::collections::BTreeMap;

use gunsight_autograd::{Adam, AdamConfig, Params, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            early_stop_patience: 5,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be positive"));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::validation("early_stop_patience must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: Option<f64>,
    pub val_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Patience counter over validation loss. Only a strict decrease counts as an
/// improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best_loss: f64,
    best_epoch: usize,
    since_best: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            StopDecision {
                improved: true,
                stop: false,
            }
        } else {
            self.since_best += 1;
            StopDecision {
                improved: false,
                stop: self.since_best >= self.patience,
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }
}

/// Loss, correct-prediction count and gradients of one mini-batch.
pub(crate) struct BatchOutcome {
    pub loss: f64,
    pub correct: Option<usize>,
    pub grads: BTreeMap<String, Tensor>,
}

pub(crate) struct EvalOutcome {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

pub(crate) struct TrainOutcome {
    pub params: Params,
    pub history: TrainingHistory,
    /// Sum of every update applied up to the restored epoch.
    pub delta: Params,
}

pub(crate) fn run_training(
    mut params: Params,
    trainable: impl Fn(&str) -> bool,
    n_train: usize,
    cfg: &TrainConfig,
    mut batch_step: impl FnMut(&Params, &[usize], u64) -> Result<BatchOutcome>,
    mut evaluate: impl FnMut(&Params) -> Result<EvalOutcome>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::validation("training set is empty"));
    }
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.learning_rate,
        ..Default::default()
    });
    let mut delta: Params = params
        .iter()
        .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
        .collect();
    let mut best = (params.clone(), delta.clone());
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut history = TrainingHistory::default();
    let mut order: Vec<usize> = (0..n_train).collect();

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct_sum: Option<usize> = Some(0);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let batch_seed = cfg
                .seed
                .wrapping_add((epoch as u64) << 32)
                .wrapping_add(b as u64);
            let out = batch_step(&params, batch, batch_seed)?;
            if !out.loss.is_finite() || out.grads.values().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    reason: format!("non-finite training loss {}", out.loss),
                });
            }
            loss_sum += out.loss * batch.len() as f64;
            correct_sum = match (correct_sum, out.correct) {
                (Some(a), Some(b)) => Some(a + b),
                _ => None,
            };
            let grads: BTreeMap<String, Tensor> = out
                .grads
                .into_iter()
                .filter(|(name, _)| trainable(name))
                .collect();
            for (name, d) in adam.step(&mut params, &grads) {
                delta
                    .get_mut(&name)
                    .expect("update for unknown parameter")
                    .add_assign(&d);
            }
        }

        let eval = evaluate(&params)?;
        if !eval.loss.is_finite() {
            return Err(Error::Training {
                epoch,
                reason: format!("non-finite validation loss {}", eval.loss),
            });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n_train as f64,
            train_accuracy: correct_sum.map(|c| c as f64 / n_train as f64),
            val_loss: eval.loss,
            val_accuracy: eval.accuracy,
        });
        let decision = stopper.observe(epoch, eval.loss);
        if decision.improved {
            best = (params.clone(), delta.clone());
        }
        if decision.stop {
            history.stopped_early = true;
            break;
        }
    }
    history.best_epoch = stopper.best_epoch();
    history.best_val_loss = stopper.best_loss();
    Ok(TrainOutcome {
        params: best.0,
        history,
        delta: best.1,
    })
}

/// Inverted-dropout keep mask scaled by `1 / (1 - rate)`.
pub(crate) fn dropout_mask(shape: &[usize], rate: f64, seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 - rate;
    let data = (0..shape.iter().product::<usize>())
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Replays the stopping rule on a fixed loss sequence.
    fn simulate(losses: &[f64], patience: usize) -> (usize, usize) {
        let mut s = EarlyStopping::new(patience);
        for (i, &l) in losses.iter().enumerate() {
            if s.observe(i + 1, l).stop {
                return (i + 1, s.best_epoch());
            }
        }
        (losses.len(), s.best_epoch())
    }

    #[test]
    fn stops_after_patience_without_improvement() {
        let losses = [1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.95];
        assert_eq!(simulate(&losses, 5), (7, 2));
    }

    #[test]
    fn equal_loss_is_not_an_improvement() {
        assert_eq!(simulate(&[1.0, 1.0, 1.0], 2), (3, 1));
    }

    #[test]
    fn zero_epochs_rejected() {
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn loop_restores_best_parameters_and_tracks_delta() {
        // scripted validation losses; each step adds 1.0 to "w"
        let mut params = Params::new();
        params.insert("w", Tensor::zeros(&[1]));
        let script = [1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.95, 0.5];
        let mut calls = 0;
        let cfg = TrainConfig {
            epochs: 8,
            early_stop_patience: 5,
            batch_size: 1,
            learning_rate: 0.5,
            seed: 1,
        };
        let out = run_training(
            params.clone(),
            |_| true,
            1,
            &cfg,
            |_, _, _| {
                let mut grads = BTreeMap::new();
                grads.insert("w".to_string(), Tensor::scalar(-1.0));
                Ok(BatchOutcome {
                    loss: 1.0,
                    correct: Some(1),
                    grads,
                })
            },
            |_| {
                calls += 1;
                Ok(EvalOutcome {
                    loss: script[calls - 1],
                    accuracy: None,
                })
            },
        )
        .unwrap();
        assert_eq!(out.history.epochs.len(), 7);
        assert!(out.history.stopped_early);
        assert_eq!(out.history.best_epoch, 2);
        let w = out.params.get("w").unwrap().item();
        assert!((w - out.delta.get("w").unwrap().item()).abs() < 1e-12);
        assert!((w - 1.0).abs() < 1e-6, "two Adam steps of lr 0.5: {w}");
    }

    #[test]
    fn patience_beyond_budget_runs_every_epoch() {
        let mut evals = [3.0, 1.0, 2.0].into_iter();
        let cfg = TrainConfig {
            epochs: 3,
            early_stop_patience: 10,
            batch_size: 4,
            learning_rate: 0.1,
            seed: 0,
        };
        let mut params = Params::new();
        params.insert("w", Tensor::zeros(&[1]));
        let out = run_training(
            params,
            |_| true,
            2,
            &cfg,
            |_, _, _| {
                Ok(BatchOutcome {
                    loss: 0.0,
                    correct: None,
                    grads: BTreeMap::new(),
                })
            },
            |_| {
                Ok(EvalOutcome {
                    loss: evals.next().unwrap(),
                    accuracy: None,
                })
            },
        )
        .unwrap();
        assert_eq!(out.history.epochs.len(), 3);
        assert!(!out.history.stopped_early);
        assert_eq!(out.history.best_epoch, 2);
    }

    #[test]
    fn nan_loss_reports_epoch() {
        let cfg = TrainConfig {
            epochs: 3,
            ..Default::default()
        };
        let mut params = Params::new();
        params.insert("w", Tensor::zeros(&[1]));
        let err = run_training(
            params,
            |_| true,
            1,
            &cfg,
            |_, _, _| {
                Ok(BatchOutcome {
                    loss: f64::NAN,
                    correct: None,
                    grads: BTreeMap::new(),
                })
            },
            |_| unreachable!(),
        )
        .err()
        .unwrap();
        assert!(matches!(err, Error::Training { epoch: 1, .. }));
    }
}
