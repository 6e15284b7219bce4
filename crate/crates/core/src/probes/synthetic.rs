use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::treebank::DepParse;

/// Embeds a tree so that squared Euclidean distances are tree distances.
///
/// Coordinate `c` of word `i` is 1 iff word `c` lies on the path from `i` up
/// to (but excluding) the root, so `|h_i - h_j|²` counts the symmetric
/// difference of the two root paths and `|h_i|²` is the depth.
pub fn path_indicator_embedding(parse: &DepParse, dim: usize) -> Array2<f64> {
    let n = parse.len();
    assert!(dim >= n, "need one coordinate per word ({dim} < {n})");
    let heads = parse.heads();
    let mut out = Array2::zeros((n, dim));
    for i in 0..n {
        let mut cur = i + 1;
        while heads[cur - 1] != 0 {
            out[[i, cur - 1]] = 1.0;
            cur = heads[cur - 1];
        }
    }
    out
}

pub fn path_indicator_embeddings(parses: &[DepParse], dim: usize) -> Vec<Array2<f64>> {
    parses.iter().map(|p| path_indicator_embedding(p, dim)).collect()
}

/// Adds i.i.d. Gaussian noise with standard deviation `sigma`.
pub fn noisy<R: Rng + ?Sized>(m: &Array2<f64>, sigma: f64, rng: &mut R) -> Array2<f64> {
    if sigma == 0.0 {
        return m.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    m.mapv(|x| x + normal.sample(rng))
}

/// A random well-conditioned `dim × dim` matrix: an orthogonal matrix with
/// columns rescaled into `[0.5, 2]`.
pub fn random_invertible_map(dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while q.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        for _ in 0..2 {
            for u in &q {
                let c: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(u) {
                    *x -= c * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let scales: Vec<f64> = (0..dim).map(|_| rng.random_range(0.5..=2.0)).collect();
    Array2::from_shape_fn((dim, dim), |(r, c)| q[r][c] * scales[c])
}
