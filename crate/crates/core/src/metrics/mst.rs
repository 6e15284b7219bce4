use std::cmp::Reverse;
use std::collections::BinaryHeap;

use ndarray::Array2;
use ordered_float::OrderedFloat;

use crate::error::{Error, Result};

/// Minimum spanning tree of a symmetric distance matrix (Prim with a binary
/// heap). Equal weights are resolved by the lexicographic order of the
/// `(low, high)` edge, which makes the output deterministic.
///
/// Returns 0-based `(low, high)` edges, sorted.
pub fn mst_decode(dist: &Array2<f64>) -> Result<Vec<(usize, usize)>> {
    let n = dist.nrows();
    if dist.ncols() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: dist.ncols(),
        });
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (dist[[i, j]], dist[[j, i]]);
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::invalid(format!("non-finite distance at ({i}, {j})")));
            }
            if (a - b).abs() > 1e-9 * a.abs().max(b.abs()).max(1.0) {
                return Err(Error::invalid(format!(
                    "distance matrix is not symmetric at ({i}, {j}): {a} vs {b}"
                )));
            }
        }
    }
    if n <= 1 {
        return Ok(Vec::new());
    }

    let mut in_tree = vec![false; n];
    let mut heap = BinaryHeap::new();
    let mut edges = Vec::with_capacity(n - 1);
    let push_from = |v: usize, in_tree: &[bool], heap: &mut BinaryHeap<_>| {
        for u in 0..n {
            if !in_tree[u] {
                let (lo, hi) = (u.min(v), u.max(v));
                heap.push(Reverse((OrderedFloat(dist[[lo, hi]]), lo, hi, u)));
            }
        }
    };
    in_tree[0] = true;
    push_from(0, &in_tree, &mut heap);
    while let Some(Reverse((_, lo, hi, u))) = heap.pop() {
        if in_tree[u] {
            continue;
        }
        in_tree[u] = true;
        edges.push((lo, hi));
        if edges.len() == n - 1 {
            break;
        }
        push_from(u, &in_tree, &mut heap);
    }
    edges.sort_unstable();
    Ok(edges)
}

/// Total weight of an edge set under `dist`.
pub fn tree_weight(dist: &Array2<f64>, edges: &[(usize, usize)]) -> f64 {
    edges.iter().map(|&(a, b)| dist[[a, b]]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn two_nodes() {
        assert_eq!(mst_decode(&array![[0.0, 5.0], [5.0, 0.0]]).unwrap(), vec![(0, 1)]);
    }

    #[test]
    fn trivial_sizes() {
        assert!(mst_decode(&Array2::zeros((1, 1))).unwrap().is_empty());
        assert!(mst_decode(&Array2::zeros((0, 0))).unwrap().is_empty());
    }

    #[test]
    fn ties_are_deterministic() {
        let d = Array2::from_elem((4, 4), 1.0);
        assert_eq!(mst_decode(&d).unwrap(), vec![(0, 1), (0, 2), (0, 3)]);
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let d = array![[0.0, 1.0], [2.0, 0.0]];
        assert!(matches!(mst_decode(&d), Err(Error::Invalid(_))));
    }
}
