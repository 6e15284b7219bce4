//! Independent reference implementations used by the property and
//! acceptance tests.
#![allow(dead_code)]

use std::collections::VecDeque;

use ndarray::Array2;
use syntx::probes::{Dense, Probe};
use syntx::treebank::{DepParse, TreeMetrics};

/// Pairwise path lengths and root distances by breadth-first search over the
/// undirected head graph. `heads` is 1-based with 0 marking the root.
pub fn bfs_metrics(heads: &[usize]) -> (Vec<Vec<usize>>, Vec<usize>) {
    let n = heads.len();
    let mut adj = vec![Vec::new(); n];
    for (i, &h) in heads.iter().enumerate() {
        if h != 0 {
            adj[i].push(h - 1);
            adj[h - 1].push(i);
        }
    }
    let dist: Vec<Vec<usize>> = (0..n)
        .map(|s| {
            let mut d = vec![usize::MAX; n];
            d[s] = 0;
            let mut q = VecDeque::from([s]);
            while let Some(u) = q.pop_front() {
                for &v in &adj[u] {
                    if d[v] == usize::MAX {
                        d[v] = d[u] + 1;
                        q.push_back(v);
                    }
                }
            }
            d
        })
        .collect();
    let root = heads.iter().position(|&h| h == 0).expect("rooted");
    let depth = (0..n).map(|i| dist[root][i]).collect();
    (dist, depth)
}

pub fn matches_bfs(parse: &DepParse, m: &TreeMetrics) -> bool {
    let (dist, depth) = bfs_metrics(&parse.heads());
    let n = parse.len();
    m.depth == depth && (0..n).all(|i| (0..n).all(|j| m.dist[[i, j]] == dist[i][j]))
}

/// Edge list of the labelled tree encoded by a Prüfer sequence over `n` nodes.
fn prufer_edges(seq: &[usize], n: usize) -> Vec<(usize, usize)> {
    let mut degree = vec![1usize; n];
    for &s in seq {
        degree[s] += 1;
    }
    let mut edges = Vec::with_capacity(n - 1);
    for &s in seq {
        let leaf = (0..n).find(|&v| degree[v] == 1).expect("a leaf exists");
        edges.push((leaf, s));
        degree[leaf] -= 1;
        degree[s] -= 1;
    }
    let rest: Vec<usize> = (0..n).filter(|&v| degree[v] == 1).collect();
    edges.push((rest[0], rest[1]));
    edges
}

/// Minimum spanning-tree weight by enumerating all `n^(n-2)` labelled trees.
pub fn cayley_min(w: &Array2<f64>) -> f64 {
    let n = w.nrows();
    match n {
        0 | 1 => return 0.0,
        2 => return w[[0, 1]],
        _ => {}
    }
    let len = n - 2;
    let mut seq = vec![0usize; len];
    let mut best = f64::INFINITY;
    loop {
        let total: f64 = prufer_edges(&seq, n).iter().map(|&(a, b)| w[[a, b]]).sum();
        best = best.min(total);
        let mut i = 0;
        while i < len {
            seq[i] += 1;
            if seq[i] < n {
                break;
            }
            seq[i] = 0;
            i += 1;
        }
        if i == len {
            return best;
        }
    }
}

/// `P(W+ >= observed)` by enumerating every sign assignment of the non-zero
/// differences, with ranks from pairwise comparisons (ties share the mean).
pub fn wilcoxon_enumeration(diffs: &[f64]) -> f64 {
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nz.len();
    let ranks: Vec<f64> = nz
        .iter()
        .map(|d| {
            let below = nz.iter().filter(|e| e.abs() < d.abs()).count() as f64;
            let tied = nz.iter().filter(|e| e.abs() == d.abs()).count() as f64;
            below + (tied + 1.0) / 2.0
        })
        .collect();
    let observed: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let hits = (0u32..1 << n)
        .filter(|mask| {
            let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            w >= observed - 1e-9
        })
        .count();
    hits as f64 / (1u64 << n) as f64
}

/// Central finite-difference gradient of `f` at `x`.
pub fn central_difference(x: &Array2<f64>, h: f64, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = xp[[r, c]];
        xp[[r, c]] = orig + h;
        let up = f(&xp);
        xp[[r, c]] = orig - h;
        let down = f(&xp);
        xp[[r, c]] = orig;
        g[[r, c]] = (up - down) / (2.0 * h);
    }
    g
}

pub fn relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|x| x * x).sum().sqrt();
    let scale = a.mapv(|x| x * x).sum().sqrt().max(b.mapv(|x| x * x).sum().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Smallest distance of any hidden ReLU pre-activation from zero.
pub fn relu_margin(probe: &Probe, x: &Array2<f64>) -> f64 {
    let Probe::Mlp(mlp) = probe else {
        return f64::INFINITY;
    };
    let mut h = x.clone();
    let mut margin = f64::INFINITY;
    let hidden = mlp.layers.len() - 1;
    for Dense { weight, bias } in &mlp.layers[..hidden] {
        let pre = h.dot(&weight.t()) + bias;
        margin = pre.iter().fold(margin, |m, v| m.min(v.abs()));
        h = pre.mapv(|v| v.max(0.0));
    }
    margin
}
