//! Counterfactual embeddings: starting from a model's embedding, run Adam on
//! the probe loss against a target parse, updating the embedding while the
//! probe stays fixed, until the loss stops improving.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::probes::{EmbeddingMatrix, Probe};
use crate::tensor_file::TensorFile;
use crate::treebank::TreeMetrics;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CfConfig {
    pub learning_rate: f64,
    /// Consecutive steps without a new best loss before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Record the loss every this many steps; 0 disables the trace.
    pub trace_every: usize,
}

impl Default for CfConfig {
    fn default() -> Self {
        CfConfig {
            learning_rate: 1e-4,
            patience: 5000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_steps: Some(200_000),
            seed: 0,
            trace_every: 0,
        }
    }
}

impl CfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("counterfactual learning rate must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("counterfactual patience must be at least 1"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualResult {
    /// Best-loss iterate.
    pub z_prime: EmbeddingMatrix,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps_taken: usize,
    /// Step at which `z_prime` was reached (0 = the initial embedding).
    pub best_step: usize,
    pub loss_trace: Vec<(usize, f64)>,
    pub config: CfConfig,
}

/// Identifiers stored alongside a persisted counterfactual.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CfProvenance {
    pub probe_id: String,
    pub target_parse_id: String,
}

impl CounterfactualResult {
    pub fn to_tensor_file(&self, provenance: &CfProvenance) -> TensorFile {
        self.z_prime.to_tensor_file(json!({
            "probe_id": provenance.probe_id,
            "target_parse_id": provenance.target_parse_id,
            "config": self.config,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "steps_taken": self.steps_taken,
            "best_step": self.best_step,
        }))
    }
}

pub fn generate_counterfactual(
    probe: &Probe,
    z_k: &EmbeddingMatrix,
    target: &TreeMetrics,
    config: &CfConfig,
) -> Result<CounterfactualResult> {
    config.validate()?;
    if z_k.dim() != probe.input_dim() {
        return Err(Error::Dimension {
            expected: probe.input_dim(),
            actual: z_k.dim(),
        });
    }
    if target.len() != z_k.len() {
        return Err(Error::Dimension {
            expected: z_k.len(),
            actual: target.len(),
        });
    }

    let mut z = z_k.vectors.clone();
    let (initial_loss, mut grad) = probe.grad_wrt_embeddings(&z, target)?;
    if !initial_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            step: 0,
            what: "initial probe loss or gradient".into(),
        });
    }
    let mut adam = Adam::new(config.adam(), &[z.len()]);
    let mut best_loss = initial_loss;
    let mut best_z = z.clone();
    let mut best_step = 0;
    let mut stale = 0;
    let mut steps = 0;
    let mut trace = Vec::new();
    if config.trace_every > 0 {
        trace.push((0, initial_loss));
    }
    let max_steps = config.max_steps.unwrap_or(usize::MAX);

    while stale < config.patience && steps < max_steps {
        adam.step(
            &mut [z.as_slice_mut().expect("standard layout")],
            &[grad.as_slice().expect("standard layout")],
        );
        steps += 1;
        let (loss, g) = probe.grad_wrt_embeddings(&z, target)?;
        if !loss.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                step: steps,
                what: "probe loss or gradient during counterfactual search".into(),
            });
        }
        grad = g;
        if config.trace_every > 0 && steps % config.trace_every == 0 {
            trace.push((steps, loss));
        }
        if loss < best_loss {
            best_loss = loss;
            best_z.assign(&z);
            best_step = steps;
            stale = 0;
        } else {
            stale += 1;
        }
    }

    Ok(CounterfactualResult {
        z_prime: EmbeddingMatrix {
            layer: z_k.layer,
            vectors: best_z,
            word_forms: z_k.word_forms.clone(),
        },
        initial_loss,
        final_loss: best_loss,
        steps_taken: steps,
        best_step,
        loss_trace: trace,
        config: config.clone(),
    })
}

/// Element-wise [`generate_counterfactual`], run in parallel.
pub fn generate_batch(
    probe: &Probe,
    batch: &[(EmbeddingMatrix, TreeMetrics)],
    config: &CfConfig,
) -> Result<Vec<CounterfactualResult>> {
    if let Some(first) = batch.first() {
        if let Some(i) = batch.iter().position(|(z, _)| z.dim() != first.0.dim()) {
            return Err(Error::Element {
                index: i,
                source: Box::new(Error::Dimension {
                    expected: first.0.dim(),
                    actual: batch[i].0.dim(),
                }),
            });
        }
    }
    batch
        .par_iter()
        .enumerate()
        .map(|(i, (z, target))| {
            generate_counterfactual(probe, z, target, config).map_err(|e| Error::Element {
                index: i,
                source: Box::new(e),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probes::{path_indicator_embedding, LinearProbe, ProbeKind};
    use crate::treebank::{random_tree, tree_metrics, DepParse};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn emb(parse: &DepParse, dim: usize) -> EmbeddingMatrix {
        EmbeddingMatrix::new(0, path_indicator_embedding(parse, dim), parse.forms()).unwrap()
    }

    #[test]
    fn stationary_start_is_returned_unchanged() {
        let parse = DepParse::from_heads(&["a", "b", "c"], &[2, 0, 2]).unwrap();
        let probe = Probe::Linear(LinearProbe::identity(ProbeKind::Distance, 3));
        let z = emb(&parse, 3);
        let config = CfConfig {
            patience: 25,
            ..Default::default()
        };
        let r = generate_counterfactual(&probe, &z, &tree_metrics(&parse), &config).unwrap();
        assert_eq!(r.z_prime, z);
        assert_eq!(r.steps_taken, 25);
        assert_eq!(r.final_loss, r.initial_loss);
        assert_eq!(r.final_loss, 0.0);
        assert_eq!(r.config.learning_rate, 1e-4);
        assert_eq!(r.config.patience, 25);
    }

    #[test]
    fn default_config_matches_recorded_values() {
        let c = CfConfig::default();
        assert_eq!(c.learning_rate, 0.0001);
        assert_eq!(c.patience, 5000);
        assert_eq!(c.max_steps, Some(200_000));
    }

    #[test]
    fn reaches_an_alternative_tree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let source = random_tree(7, 10, &mut rng);
        let target = random_tree(7, 10, &mut rng);
        let probe = Probe::Linear(LinearProbe::identity(ProbeKind::Distance, 7));
        let config = CfConfig {
            learning_rate: 1e-2,
            patience: 200,
            trace_every: 10,
            ..Default::default()
        };
        let r = generate_counterfactual(&probe, &emb(&source, 7), &tree_metrics(&target), &config).unwrap();
        assert!(r.final_loss < 0.01 * r.initial_loss, "{} vs {}", r.final_loss, r.initial_loss);
        let again = probe.loss(&r.z_prime.vectors, &tree_metrics(&target)).unwrap();
        assert!((again - r.final_loss).abs() < 1e-9);
        assert!(!r.loss_trace.is_empty());
    }

    #[test]
    fn batch_matches_single_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let probe = Probe::Linear(LinearProbe::init(ProbeKind::Distance, 6, 6, 1));
        let config = CfConfig {
            learning_rate: 1e-2,
            patience: 30,
            ..Default::default()
        };
        let batch: Vec<_> = (0..5)
            .map(|_| {
                let a = random_tree(6, 10, &mut rng);
                let b = random_tree(6, 10, &mut rng);
                (emb(&a, 6), tree_metrics(&b))
            })
            .collect();
        let out = generate_batch(&probe, &batch, &config).unwrap();
        for ((z, t), r) in batch.iter().zip(&out) {
            assert_eq!(&generate_counterfactual(&probe, z, t, &config).unwrap(), r);
        }
        assert!(generate_batch(&probe, &[], &config).unwrap().is_empty());
    }

    #[test]
    fn invalid_inputs() {
        let parse = DepParse::from_heads(&["a", "b"], &[0, 1]).unwrap();
        let probe = Probe::Linear(LinearProbe::identity(ProbeKind::Distance, 3));
        let bad_lr = CfConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(generate_counterfactual(&probe, &emb(&parse, 3), &tree_metrics(&parse), &bad_lr).is_err());
        assert!(matches!(
            generate_counterfactual(&probe, &emb(&parse, 2), &tree_metrics(&parse), &CfConfig::default()),
            Err(Error::Dimension { .. })
        ));
        let mut z = emb(&parse, 3);
        z.vectors[[0, 0]] = f64::NAN;
        assert!(matches!(
            generate_counterfactual(&probe, &z, &tree_metrics(&parse), &CfConfig::default()),
            Err(Error::NonFinite { step: 0, .. })
        ));
    }
}
