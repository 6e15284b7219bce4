use ndarray::{Array1, Array2};

use super::{pairwise_squared_distances, squared_norms, ProbeKind};
use crate::treebank::TreeMetrics;

/// Output of a probe on one sentence.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Depths(Array1<f64>),
    Distances(Array2<f64>),
}

/// `Σ_{i<j} |pred(i,j) - dist(i,j)| · 2 / n²`.
pub fn distance_loss(pred: &Array2<f64>, gold: &TreeMetrics) -> f64 {
    let n = gold.len();
    assert_eq!(pred.dim(), (n, n), "prediction shape");
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += (pred[[i, j]] - gold.dist[[i, j]] as f64).abs();
        }
    }
    total * 2.0 / (n * n) as f64
}

/// `Σ_i |pred(i) - depth(i)| / n`.
pub fn depth_loss(pred: &Array1<f64>, gold: &TreeMetrics) -> f64 {
    let n = gold.len();
    assert_eq!(pred.len(), n, "prediction length");
    pred.iter()
        .zip(&gold.depth)
        .map(|(p, &g)| (p - g as f64).abs())
        .sum::<f64>()
        / n as f64
}

pub fn probe_loss(pred: &Prediction, gold: &TreeMetrics) -> f64 {
    match pred {
        Prediction::Depths(d) => depth_loss(d, gold),
        Prediction::Distances(d) => distance_loss(d, gold),
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss and its gradient with respect to the probe features `feats` (`n × r`).
/// The subgradient of `|x|` at zero is taken as zero.
pub(crate) fn loss_and_feature_grad(kind: ProbeKind, feats: &Array2<f64>, gold: &TreeMetrics) -> (f64, Array2<f64>) {
    let n = feats.nrows();
    let mut grad = Array2::zeros(feats.raw_dim());
    match kind {
        ProbeKind::Distance => {
            let pred = pairwise_squared_distances(feats);
            let loss = distance_loss(&pred, gold);
            let scale = 2.0 / (n * n) as f64;
            for i in 0..n {
                for j in (i + 1)..n {
                    let g = scale * sign(pred[[i, j]] - gold.dist[[i, j]] as f64);
                    if g == 0.0 {
                        continue;
                    }
                    for k in 0..feats.ncols() {
                        let diff = 2.0 * g * (feats[[i, k]] - feats[[j, k]]);
                        grad[[i, k]] += diff;
                        grad[[j, k]] -= diff;
                    }
                }
            }
            (loss, grad)
        }
        ProbeKind::Depth => {
            let pred = squared_norms(feats);
            let loss = depth_loss(&pred, gold);
            for i in 0..n {
                let g = sign(pred[i] - gold.depth[i] as f64) / n as f64;
                for k in 0..feats.ncols() {
                    grad[[i, k]] = 2.0 * g * feats[[i, k]];
                }
            }
            (loss, grad)
        }
    }
}
