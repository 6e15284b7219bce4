use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::loss_and_feature_grad;
use super::{Probe, ProbeType, DEFAULT_HIDDEN, DEFAULT_RANK};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::treebank::TreeMetrics;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeTrainConfig {
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rank: usize,
    /// Hidden width of the MLP probes.
    pub hidden: usize,
    pub seed: u64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        ProbeTrainConfig {
            max_epochs: 30,
            patience: 3,
            batch_size: 32,
            learning_rate: 1e-3,
            rank: DEFAULT_RANK,
            hidden: DEFAULT_HIDDEN,
            seed: 0,
        }
    }
}

impl ProbeTrainConfig {
    /// `max_epochs` may be 0; everything else must be positive.
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0
            || self.batch_size == 0
            || self.rank == 0
            || self.hidden == 0
            || !(self.learning_rate > 0.0 && self.learning_rate.is_finite())
        {
            return Err(Error::invalid("probe training config values must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainedProbe {
    pub probe: Probe,
    pub best_dev_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// `(mean train loss, dev loss)` per epoch.
    pub history: Vec<(f64, f64)>,
}

fn dataset_loss(probe: &Probe, data: &[(Array2<f64>, TreeMetrics)]) -> f64 {
    let total: f64 = data
        .iter()
        .map(|(x, gold)| {
            let feats = probe.features(x.view());
            loss_and_feature_grad(probe.kind(), &feats, gold).0
        })
        .sum();
    total / data.len() as f64
}

/// One optimizer step on a minibatch. Returns the mean batch loss.
fn batch_step(
    probe: &mut Probe,
    adam: &mut Adam,
    batch: &[&(Array2<f64>, TreeMetrics)],
) -> f64 {
    let views: Vec<ArrayView2<f64>> = batch.iter().map(|(x, _)| x.view()).collect();
    let stacked = concatenate(Axis(0), &views).expect("consistent widths");
    let (feats, trace) = probe.forward(stacked.view());
    let scale = 1.0 / batch.len() as f64;
    let mut d_feats = Array2::zeros(feats.raw_dim());
    let mut offset = 0;
    let mut total = 0.0;
    for (x, gold) in batch {
        let n = x.nrows();
        let rows = feats.slice(ndarray::s![offset..offset + n, ..]).to_owned();
        let (loss, g) = loss_and_feature_grad(probe.kind(), &rows, gold);
        total += loss;
        d_feats
            .slice_mut(ndarray::s![offset..offset + n, ..])
            .assign(&(g * scale));
        offset += n;
    }
    let (_, grads) = probe.backward(&trace, d_feats, true);
    let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    adam.step(&mut probe.param_buffers_mut(), &grad_refs);
    total * scale
}

/// Trains a fresh probe of type `ty` with minibatch Adam and dev-loss early
/// stopping, returning the best dev snapshot (the initialization included).
pub fn train_probe(
    ty: ProbeType,
    train: &[(Array2<f64>, TreeMetrics)],
    dev: &[(Array2<f64>, TreeMetrics)],
    config: &ProbeTrainConfig,
) -> Result<TrainedProbe> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::invalid("probe training needs non-empty train and dev sets"));
    }
    let dim = train[0].0.ncols();
    for (i, (x, gold)) in train.iter().chain(dev).enumerate() {
        if x.ncols() != dim {
            return Err(Error::Element {
                index: i,
                source: Box::new(Error::Dimension {
                    expected: dim,
                    actual: x.ncols(),
                }),
            });
        }
        if x.nrows() != gold.len() {
            return Err(Error::Element {
                index: i,
                source: Box::new(Error::Dimension {
                    expected: gold.len(),
                    actual: x.nrows(),
                }),
            });
        }
    }
    config.validate()?;

    let mut probe = Probe::new(ty, dim, config.rank, config.hidden, config.seed);
    let mut adam = Adam::new(AdamConfig::with_learning_rate(config.learning_rate), &probe.param_sizes());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_cafe);

    let mut best = probe.clone();
    let mut best_dev_loss = dataset_loss(&probe, dev);
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = batch_step(&mut probe, &mut adam, &batch);
            if !loss.is_finite() || !probe.is_finite() {
                return Err(Error::NonFinite {
                    step: adam.steps() as usize,
                    what: format!("probe training loss in epoch {epoch}"),
                });
            }
            epoch_loss += loss;
            batches += 1;
        }
        let dev_loss = dataset_loss(&probe, dev);
        if !dev_loss.is_finite() {
            return Err(Error::NonFinite {
                step: adam.steps() as usize,
                what: format!("dev loss after epoch {epoch}"),
            });
        }
        history.push((epoch_loss / batches as f64, dev_loss));
        if dev_loss < best_dev_loss {
            best_dev_loss = dev_loss;
            best = probe.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    Ok(TrainedProbe {
        probe: best,
        best_dev_loss,
        best_epoch,
        epochs_run: history.len(),
        history,
    })
}
