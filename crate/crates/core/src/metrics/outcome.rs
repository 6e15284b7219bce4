use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpora::Reading;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    Mask,
    QaStart,
    QaEnd,
}

/// A model output over a finite support: candidate words for the masked slot,
/// or sentence tokens for QA start and end positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputDistribution {
    pub kind: DistributionKind,
    pub support: Vec<String>,
    pub probs: Vec<f64>,
}

impl OutputDistribution {
    pub fn new(kind: DistributionKind, support: Vec<String>, probs: Vec<f64>) -> Result<Self> {
        if support.len() != probs.len() {
            return Err(Error::Dimension {
                expected: support.len(),
                actual: probs.len(),
            });
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("probabilities must be finite and non-negative"));
        }
        Ok(OutputDistribution { kind, support, probs })
    }

    /// Restricts a full-vocabulary masked-word distribution to `candidates`
    /// and renormalizes over them.
    pub fn mask_over_candidates(vocab: &[String], probs: &[f64], candidates: &[String]) -> Result<Self> {
        let index: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
        let mut picked = Vec::with_capacity(candidates.len());
        for c in candidates {
            let &i = index
                .get(c.as_str())
                .ok_or_else(|| Error::invalid(format!("candidate {c:?} is not in the vocabulary")))?;
            picked.push(probs[i]);
        }
        let total: f64 = picked.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::invalid("candidate probabilities sum to zero"));
        }
        OutputDistribution::new(
            DistributionKind::Mask,
            candidates.to_vec(),
            picked.into_iter().map(|p| p / total).collect(),
        )
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Support entries ordered by decreasing probability, ties by word.
    pub fn ranked(&self) -> Vec<(&str, f64)> {
        let mut items: Vec<(&str, f64)> = self
            .support
            .iter()
            .map(String::as_str)
            .zip(self.probs.iter().copied())
            .collect();
        items.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        items
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMembers {
    Words(BTreeSet<String>),
    /// 0-based token positions.
    Positions(BTreeSet<usize>),
}

/// A set of outputs whose summed probability indicates one reading.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub name: String,
    pub reading: Reading,
    pub members: PartitionMembers,
}

impl Partition {
    pub fn words<I, S>(name: &str, reading: Reading, words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Partition {
            name: name.to_string(),
            reading,
            members: PartitionMembers::Words(words.into_iter().map(Into::into).collect()),
        }
    }

    pub fn positions<I: IntoIterator<Item = usize>>(name: &str, reading: Reading, positions: I) -> Self {
        Partition {
            name: name.to_string(),
            reading,
            members: PartitionMembers::Positions(positions.into_iter().collect()),
        }
    }

    pub fn len(&self) -> usize {
        match &self.members {
            PartitionMembers::Words(w) => w.len(),
            PartitionMembers::Positions(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Summed probability of the partition's members. Mask distributions are
/// expected to be normalized over their candidates already; QA distributions
/// are used as given.
pub fn partition_probability(dist: &OutputDistribution, partition: &Partition) -> Result<f64> {
    match (&partition.members, dist.kind) {
        (PartitionMembers::Words(words), _) => {
            let mut total = 0.0;
            for w in words {
                let i = dist
                    .support
                    .iter()
                    .position(|s| s == w)
                    .ok_or_else(|| Error::invalid(format!("partition word {w:?} outside the support")))?;
                total += dist.probs[i];
            }
            Ok(total)
        }
        (PartitionMembers::Positions(_), DistributionKind::Mask) => Err(Error::invalid(
            "position partitions apply to QA distributions only",
        )),
        (PartitionMembers::Positions(positions), _) => {
            let mut total = 0.0;
            for &p in positions {
                total += *dist
                    .probs
                    .get(p)
                    .ok_or_else(|| Error::invalid(format!("partition position {p} outside the support")))?;
            }
            Ok(total)
        }
    }
}

/// Union of the `k` most likely words of every distribution, in first-seen
/// order.
pub fn build_candidate_set(distributions: &[OutputDistribution], k: usize) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for d in distributions {
        for (w, _) in d.ranked().into_iter().take(k) {
            if seen.insert(w.to_string()) {
                out.push(w.to_string());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(words: &[&str]) -> OutputDistribution {
        let p = 1.0 / words.len() as f64;
        OutputDistribution::new(
            DistributionKind::Mask,
            words.iter().map(|s| s.to_string()).collect(),
            vec![p; words.len()],
        )
        .unwrap()
    }

    #[test]
    fn uniform_partition_mass() {
        let d = uniform(&["was", "is", "were", "are", "as"]);
        let plural = Partition::words("plural", Reading::Plur, ["were", "are"]);
        assert!((partition_probability(&d, &plural).unwrap() - 0.4).abs() < 1e-15);
        let empty = Partition::words("none", Reading::Plur, Vec::<String>::new());
        assert_eq!(partition_probability(&d, &empty).unwrap(), 0.0);
        let outside = Partition::words("x", Reading::Sing, ["had"]);
        assert!(partition_probability(&d, &outside).is_err());
    }

    #[test]
    fn qa_positions_are_not_renormalized() {
        let d = OutputDistribution::new(
            DistributionKind::QaStart,
            vec!["The".into(), "smart".into(), "women".into()],
            vec![0.2, 0.1, 0.05],
        )
        .unwrap();
        let np1 = Partition::positions("NP1", Reading::Conj, [0, 1, 2]);
        assert!((partition_probability(&d, &np1).unwrap() - 0.35).abs() < 1e-15);
        let bad = Partition::positions("NP1", Reading::Conj, [7]);
        assert!(partition_probability(&d, &bad).is_err());
    }

    #[test]
    fn candidate_restriction_normalizes() {
        let vocab: Vec<String> = ["a", "was", "were", "b"].iter().map(|s| s.to_string()).collect();
        let d = OutputDistribution::mask_over_candidates(&vocab, &[0.5, 0.1, 0.3, 0.1], &["was".into(), "were".into()])
            .unwrap();
        assert!((d.total() - 1.0).abs() < 1e-12);
        assert!((d.probs[1] - 0.75).abs() < 1e-12);
        assert!(OutputDistribution::mask_over_candidates(&vocab, &[0.5, 0.1, 0.3, 0.1], &["zzz".into()]).is_err());
    }

    #[test]
    fn top_one_of_single_distribution() {
        let d = OutputDistribution::new(
            DistributionKind::Mask,
            vec!["it".into(), "suddenly".into(), "they".into()],
            vec![0.2, 0.5, 0.3],
        )
        .unwrap();
        assert_eq!(build_candidate_set(&[d], 1), vec!["suddenly".to_string()]);
    }
}
