//! Shared minibatch training loop with best-validation checkpointing.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::numkit::{seeded_rng, Adam, NumError, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dim: usize,
    /// Share of the input held out for checkpoint selection.
    pub valid_fraction: f64,
}

impl TrainConfig {
    /// Elimination classifier: lr 1e-5, node embeddings of size 50.
    pub fn classifier() -> Self {
        TrainConfig {
            lr: 1e-5,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            dim: 50,
            valid_fraction: 0.1,
        }
    }

    /// Location labeler: lr 2e-5, embeddings of size 100.
    pub fn labeler() -> Self {
        TrainConfig {
            lr: 2e-5,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            dim: 100,
            valid_fraction: 0.1,
        }
    }

    pub fn scorer() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 40,
            batch_size: 64,
            seed: 0,
            dim: 50,
            valid_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

/// Splits `0..n` into (train, valid) index sets with a seeded shuffle.
pub fn holdout(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(seed ^ 0x005e_ed0f_7a11));
    let n_valid = if n < 2 {
        0
    } else {
        ((n as f64 * fraction) as usize).min(n - 1)
    };
    let valid = idx.split_off(n - n_valid);
    (idx, valid)
}

/// Runs Adam over shuffled minibatches. `grad` adds one sample's gradient into
/// the buffer and returns its loss; `metric` scores a parameter set on the
/// validation samples (higher is better). The parameters of the best epoch are
/// restored on return. Without validation samples the last epoch wins.
pub fn fit<S, G, M>(
    params: &mut [Tensor],
    train: &[S],
    valid: &[S],
    cfg: &TrainConfig,
    mut grad: G,
    mut metric: M,
) -> Result<TrainLog, NumError>
where
    G: FnMut(&[Tensor], &S, &mut [Tensor]) -> f64,
    M: FnMut(&[Tensor], &[S]) -> f64,
{
    if train.is_empty() {
        return Err(NumError::Empty);
    }
    let mut adam = Adam::new(params, cfg.lr);
    let mut rng = seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grads: Vec<Tensor> = params.iter().map(Tensor::zeros_like).collect();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut log = Vec::new();
    let batch = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            for g in grads.iter_mut() {
                g.fill(0.0);
            }
            for &i in chunk {
                total += grad(params, &train[i], &mut grads);
            }
            let inv = 1.0 / chunk.len() as f64;
            for g in grads.iter_mut() {
                g.scale(inv);
            }
            adam.step(params, &grads)?;
        }
        let m = if valid.is_empty() {
            -total
        } else {
            metric(params, valid)
        };
        log.push(EpochLog {
            epoch,
            train_loss: total / train.len() as f64,
            valid_metric: m,
        });
        let improved = best
            .as_ref()
            .is_none_or(|(b, _, _)| m > *b || valid.is_empty());
        if improved {
            best = Some((m, epoch, params.to_vec()));
        }
    }
    let (best_metric, best_epoch) = match best {
        Some((m, e, p)) => {
            params.clone_from_slice(&p);
            (m, e)
        }
        None => (f64::NAN, 0),
    };
    Ok(TrainLog {
        epochs: log,
        best_epoch,
        best_metric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn holdout_partitions() {
        let (t, v) = holdout(100, 0.1, 3);
        assert_eq!(t.len(), 90);
        assert_eq!(v.len(), 10);
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(holdout(100, 0.1, 3), (t, v));
    }

    #[test]
    fn fit_recovers_mean() {
        // minimize sum of (w - x)^2 over samples; optimum is the sample mean
        let samples = vec![1.0, 2.0, 3.0, 6.0];
        let mut params = vec![Tensor::scalar(0.0)];
        let cfg = TrainConfig {
            lr: 0.1,
            epochs: 300,
            batch_size: 4,
            seed: 1,
            dim: 1,
            valid_fraction: 0.0,
        };
        fit(
            &mut params,
            &samples,
            &[],
            &cfg,
            |p, x, g| {
                let d = p[0].data()[0] - x;
                g[0].data_mut()[0] += 2.0 * d;
                d * d
            },
            |_, _| 0.0,
        )
        .unwrap();
        assert!((params[0].data()[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn fit_restores_best_epoch() {
        let samples = vec![0.0];
        let mut params = vec![Tensor::scalar(5.0)];
        let cfg = TrainConfig {
            lr: 1.0,
            epochs: 5,
            batch_size: 1,
            seed: 0,
            dim: 1,
            valid_fraction: 0.0,
        };
        // the validation metric prefers the earliest (largest) parameter value
        let log = fit(
            &mut params,
            &samples,
            &samples,
            &cfg,
            |p, _, g| {
                g[0].data_mut()[0] += 1.0;
                p[0].data()[0]
            },
            |p, _| p[0].data()[0],
        )
        .unwrap();
        assert_eq!(log.best_epoch, 0);
        assert!((params[0].data()[0] - 4.0).abs() < 1e-6);
    }
}
