//! Probe-quality metrics, tree decoding, output-distribution bookkeeping and
//! significance testing.

mod mst;
mod outcome;
mod report;
mod wilcoxon;

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

pub use self::mst::{mst_decode, tree_weight};
pub use self::outcome::{
    build_candidate_set, partition_probability, DistributionKind, OutputDistribution, Partition, PartitionMembers,
};
pub use self::report::{ComparisonFamily, InterventionOutcome, InterventionReport, ReportSummary, SummaryComparison};
pub use self::wilcoxon::{
    signed_ranks, wilcoxon_exact, wilcoxon_normal, wilcoxon_one_sided, WilcoxonMethod, WilcoxonResult, EXACT_MAX_N,
};

use crate::error::{Error, Result};
use crate::probes::{pairwise_squared_distances, squared_norms, Probe, ProbeKind};
use crate::treebank::{tree_metrics, DepParse, TreeMetrics};

/// Fraction of gold edges recovered by the minimum spanning tree of `pred_dist`.
pub fn uuas(pred_dist: &Array2<f64>, gold: &DepParse) -> Result<f64> {
    let n = gold.len();
    if n < 2 {
        return Err(Error::UndefinedMetric("UUAS needs at least two words".into()));
    }
    if pred_dist.nrows() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: pred_dist.nrows(),
        });
    }
    let predicted: BTreeSet<(usize, usize)> = mst_decode(pred_dist)?.into_iter().collect();
    let hits = gold.edges().intersection(&predicted).count();
    Ok(hits as f64 / (n - 1) as f64)
}

/// Whether the shallowest predicted word is the gold root; ties go to the
/// lowest index.
pub fn root_accuracy(pred_depths: &Array1<f64>, gold: &DepParse) -> Result<bool> {
    if pred_depths.len() != gold.len() {
        return Err(Error::Dimension {
            expected: gold.len(),
            actual: pred_depths.len(),
        });
    }
    let mut best = 0;
    for (i, &d) in pred_depths.iter().enumerate() {
        if d < pred_depths[best] {
            best = i;
        }
    }
    Ok(best == gold.root())
}

/// 1-based average ranks.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation with average-rank ties; zero when either side has no
/// variance.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Mean over words of the Spearman correlation between each word's predicted
/// and gold distance rows (the full row, the word itself included).
pub fn spearman_distance(pred_dist: &Array2<f64>, gold: &TreeMetrics) -> Result<f64> {
    let n = gold.len();
    if n < 2 {
        return Err(Error::UndefinedMetric("Spearman needs at least two words".into()));
    }
    if pred_dist.dim() != (n, n) {
        return Err(Error::Dimension {
            expected: n,
            actual: pred_dist.nrows(),
        });
    }
    let total: f64 = (0..n)
        .map(|i| {
            let p: Vec<f64> = pred_dist.row(i).to_vec();
            let g: Vec<f64> = gold.dist.row(i).iter().map(|&x| x as f64).collect();
            spearman(&p, &g)
        })
        .sum();
    Ok(total / n as f64)
}

/// Corpus-level probe quality.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeScores {
    pub sentences: usize,
    pub uuas: Option<f64>,
    pub spearman: Option<f64>,
    pub root_accuracy: Option<f64>,
    pub loss: f64,
}

/// Scores `probe` on embedded sentences with gold parses. Distance probes get
/// UUAS and Spearman (one-word sentences skipped), depth probes root accuracy.
pub fn score_probe(probe: &Probe, data: &[(Array2<f64>, DepParse)]) -> Result<ProbeScores> {
    let mut uuas_sum = 0.0;
    let mut spearman_sum = 0.0;
    let mut multi = 0;
    let mut roots = 0;
    let mut loss = 0.0;
    for (x, parse) in data {
        if x.ncols() != probe.input_dim() {
            return Err(Error::Dimension {
                expected: probe.input_dim(),
                actual: x.ncols(),
            });
        }
        let gold = tree_metrics(parse);
        loss += probe.loss(x, &gold)?;
        let feats = probe.features(x.view());
        match probe.kind() {
            ProbeKind::Distance => {
                if parse.len() < 2 {
                    continue;
                }
                let pred = pairwise_squared_distances(&feats);
                uuas_sum += uuas(&pred, parse)?;
                spearman_sum += spearman_distance(&pred, &gold)?;
                multi += 1;
            }
            ProbeKind::Depth => {
                roots += usize::from(root_accuracy(&squared_norms(&feats), parse)?);
            }
        }
    }
    let n = data.len();
    let avg = |total: f64, count: usize| (count > 0).then(|| total / count as f64);
    Ok(match probe.kind() {
        ProbeKind::Distance => ProbeScores {
            sentences: n,
            uuas: avg(uuas_sum, multi),
            spearman: avg(spearman_sum, multi),
            root_accuracy: None,
            loss: loss / n.max(1) as f64,
        },
        ProbeKind::Depth => ProbeScores {
            sentences: n,
            uuas: None,
            spearman: None,
            root_accuracy: avg(roots as f64, n),
            loss: loss / n.max(1) as f64,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treebank::tree_metrics;
    use ndarray::array;

    fn to_f64(m: &TreeMetrics) -> Array2<f64> {
        m.dist.mapv(|x| x as f64)
    }

    #[test]
    fn perfect_metric_gives_full_uuas() {
        let p = DepParse::from_heads(&["a", "b", "c", "d"], &[2, 0, 2, 3]).unwrap();
        assert_eq!(uuas(&to_f64(&tree_metrics(&p)), &p).unwrap(), 1.0);
    }

    #[test]
    fn uuas_needs_two_words() {
        let p = DepParse::from_heads(&["a"], &[0]).unwrap();
        assert!(matches!(uuas(&array![[0.0]], &p), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn adversarial_matrix_scores_zero() {
        // Gold is the path 0-1-2-3; the predicted metric makes all gold
        // edges the heaviest so the MST is the star around... the complement.
        let gold = DepParse::from_heads(&["a", "b", "c", "d"], &[0, 1, 2, 3]).unwrap();
        let mut d = Array2::from_elem((4, 4), 1.0);
        for (a, b) in gold.edges() {
            d[[a, b]] = 10.0;
            d[[b, a]] = 10.0;
        }
        for i in 0..4 {
            d[[i, i]] = 0.0;
        }
        assert_eq!(uuas(&d, &gold).unwrap(), 0.0);
    }

    #[test]
    fn root_accuracy_cases() {
        let p = DepParse::from_heads(&["a", "b", "c"], &[2, 0, 2]).unwrap();
        assert!(root_accuracy(&array![1.0, 0.0, 1.0], &p).unwrap());
        assert!(!root_accuracy(&array![0.5, 0.5, 0.5], &p).unwrap());
        let first = DepParse::from_heads(&["a", "b", "c"], &[0, 1, 1]).unwrap();
        assert!(root_accuracy(&array![0.5, 0.5, 0.5], &first).unwrap());
    }

    #[test]
    fn spearman_extremes() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }
}
