//! Structural probes over per-word embeddings.
//!
//! A probe maps each word vector `h` to a feature vector `f(h)`. Depth probes
//! predict `|f(h_i)|²`; distance probes predict `|f(h_i) - f(h_j)|²`. The
//! linear probes use `f(h) = B h`; the deep distance probes replace `B` with a
//! ReLU network of the same input and output widths.

mod loss;
mod synthetic;
mod train;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use self::loss::{depth_loss, distance_loss, probe_loss, Prediction};
pub use self::synthetic::{noisy, path_indicator_embedding, path_indicator_embeddings, random_invertible_map};
pub use self::train::{train_probe, ProbeTrainConfig, TrainedProbe};

use crate::error::{Error, Result};
use crate::tensor_file::{DType, TensorFile};
use crate::treebank::TreeMetrics;

pub const DEFAULT_RANK: usize = 128;
pub const DEFAULT_HIDDEN: usize = 1024;

/// Word vectors of one sentence at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub layer: usize,
    pub vectors: Array2<f64>,
    pub word_forms: Vec<String>,
}

impl EmbeddingMatrix {
    pub fn new(layer: usize, vectors: Array2<f64>, word_forms: Vec<String>) -> Result<Self> {
        if vectors.nrows() == 0 {
            return Err(Error::invalid("embedding matrix needs at least one word"));
        }
        if word_forms.len() != vectors.nrows() {
            return Err(Error::Dimension {
                expected: vectors.nrows(),
                actual: word_forms.len(),
            });
        }
        if !vectors.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("embedding contains non-finite entries"));
        }
        Ok(EmbeddingMatrix {
            layer,
            vectors,
            word_forms,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn to_tensor_file(&self, meta: serde_json::Value) -> TensorFile {
        let mut meta = match meta {
            serde_json::Value::Object(obj) => obj,
            _ => serde_json::Map::new(),
        };
        meta.insert("layer".into(), json!(self.layer));
        meta.insert("word_forms".into(), json!(self.word_forms));
        let meta = serde_json::Value::Object(meta);
        let mut f = TensorFile::new(DType::F64, meta);
        f.push(
            "vectors",
            vec![self.len(), self.dim()],
            self.vectors.iter().copied().collect(),
        );
        f
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let t = file.get("vectors")?;
        let [n, d] = t.shape[..] else {
            return Err(Error::format("vectors tensor must be 2-dimensional"));
        };
        let layer = file.meta["layer"]
            .as_u64()
            .ok_or_else(|| Error::format("missing layer in header"))? as usize;
        let word_forms = match file.meta.get("word_forms") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => (1..=n).map(|i| format!("w{i}")).collect(),
        };
        let vectors = Array2::from_shape_vec((n, d), t.data.clone())
            .map_err(|e| Error::format(e.to_string()))?;
        EmbeddingMatrix::new(layer, vectors, word_forms)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Depth,
    Distance,
}

/// The four probe families used in experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeType {
    Depth,
    Dist,
    Dist2,
    Dist3,
}

impl ProbeType {
    pub const ALL: [ProbeType; 4] = [ProbeType::Depth, ProbeType::Dist, ProbeType::Dist2, ProbeType::Dist3];

    pub fn kind(self) -> ProbeKind {
        match self {
            ProbeType::Depth => ProbeKind::Depth,
            _ => ProbeKind::Distance,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProbeType::Depth => "depth",
            ProbeType::Dist => "dist",
            ProbeType::Dist2 => "dist2",
            ProbeType::Dist3 => "dist3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(ProbeType::Depth),
            "dist" => Ok(ProbeType::Dist),
            "dist2" => Ok(ProbeType::Dist2),
            "dist3" => Ok(ProbeType::Dist3),
            other => Err(Error::invalid(format!(
                "unknown probe type {other:?} (expected depth, dist, dist2 or dist3)"
            ))),
        }
    }
}

impl std::fmt::Display for ProbeType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub kind: ProbeKind,
    /// `r × d` projection.
    pub proj: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `out × in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// ReLU network used as the feature map of a deep distance probe.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpProbe {
    pub layers: Vec<Dense>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Probe {
    Linear(LinearProbe),
    Mlp(MlpProbe),
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

impl LinearProbe {
    pub fn init(kind: ProbeKind, dim: usize, rank: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LinearProbe {
            kind,
            proj: uniform_matrix(&mut rng, rank, dim),
        }
    }

    pub fn identity(kind: ProbeKind, dim: usize) -> Self {
        LinearProbe {
            kind,
            proj: Array2::eye(dim),
        }
    }
}

impl MlpProbe {
    /// `depth` counts weight layers: 2 gives `d → hidden → r`, 3 gives
    /// `d → hidden → hidden → r`.
    pub fn init(dim: usize, hidden: usize, depth: usize, rank: usize, seed: u64) -> Self {
        assert!(depth >= 2, "an MLP probe has at least two layers");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![dim];
        widths.extend(std::iter::repeat_n(hidden, depth - 1));
        widths.push(rank);
        let layers = widths
            .windows(2)
            .map(|w| {
                let weight = uniform_matrix(&mut rng, w[1], w[0]);
                let bound = 1.0 / (w[0] as f64).sqrt();
                let bias = Array1::from_shape_simple_fn(w[1], || rng.random_range(-bound..=bound));
                Dense { weight, bias }
            })
            .collect();
        MlpProbe { layers }
    }
}

/// Intermediate values kept from a forward pass for backpropagation.
pub(crate) struct Trace {
    /// Input to each weight layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of every hidden layer.
    pre: Vec<Array2<f64>>,
}

impl Probe {
    pub fn new(ty: ProbeType, dim: usize, rank: usize, hidden: usize, seed: u64) -> Self {
        match ty {
            ProbeType::Depth => Probe::Linear(LinearProbe::init(ProbeKind::Depth, dim, rank, seed)),
            ProbeType::Dist => Probe::Linear(LinearProbe::init(ProbeKind::Distance, dim, rank, seed)),
            ProbeType::Dist2 => Probe::Mlp(MlpProbe::init(dim, hidden, 2, rank, seed)),
            ProbeType::Dist3 => Probe::Mlp(MlpProbe::init(dim, hidden, 3, rank, seed)),
        }
    }

    pub fn kind(&self) -> ProbeKind {
        match self {
            Probe::Linear(p) => p.kind,
            Probe::Mlp(_) => ProbeKind::Distance,
        }
    }

    pub fn probe_type(&self) -> ProbeType {
        match self {
            Probe::Linear(p) if p.kind == ProbeKind::Depth => ProbeType::Depth,
            Probe::Linear(_) => ProbeType::Dist,
            Probe::Mlp(m) if m.layers.len() == 2 => ProbeType::Dist2,
            Probe::Mlp(_) => ProbeType::Dist3,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Probe::Linear(p) => p.proj.ncols(),
            Probe::Mlp(m) => m.layers[0].weight.ncols(),
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            Probe::Linear(p) => p.proj.nrows(),
            Probe::Mlp(m) => m.layers.last().expect("non-empty").weight.nrows(),
        }
    }

    pub fn hidden(&self) -> Option<usize> {
        match self {
            Probe::Linear(_) => None,
            Probe::Mlp(m) => Some(m.layers[0].weight.nrows()),
        }
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if dim != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                actual: dim,
            });
        }
        Ok(())
    }

    /// Feature map applied row-wise.
    pub fn features(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.forward(x).0
    }

    pub(crate) fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, Trace) {
        match self {
            Probe::Linear(p) => (
                x.dot(&p.proj.t()),
                Trace {
                    inputs: vec![x.to_owned()],
                    pre: Vec::new(),
                },
            ),
            Probe::Mlp(m) => {
                let mut trace = Trace {
                    inputs: Vec::with_capacity(m.layers.len()),
                    pre: Vec::with_capacity(m.layers.len() - 1),
                };
                let mut a = x.to_owned();
                let last = m.layers.len() - 1;
                for (l, layer) in m.layers.iter().enumerate() {
                    let z = a.dot(&layer.weight.t()) + &layer.bias;
                    trace.inputs.push(a);
                    if l == last {
                        return (z, trace);
                    }
                    a = z.mapv(|v| v.max(0.0));
                    trace.pre.push(z);
                }
                unreachable!("loop returns on the last layer")
            }
        }
    }

    /// Backpropagates `d_out` through the feature map. Returns the input
    /// gradient and, when requested, parameter gradients in
    /// [`Probe::param_buffers_mut`] order.
    pub(crate) fn backward(
        &self,
        trace: &Trace,
        d_out: Array2<f64>,
        want_params: bool,
    ) -> (Array2<f64>, Vec<Vec<f64>>) {
        match self {
            Probe::Linear(p) => {
                let mut grads = Vec::new();
                if want_params {
                    grads.push(d_out.t().dot(&trace.inputs[0]).iter().copied().collect());
                }
                (d_out.dot(&p.proj), grads)
            }
            Probe::Mlp(m) => {
                let mut grads: Vec<Vec<f64>> = Vec::new();
                let mut dz = d_out;
                for l in (0..m.layers.len()).rev() {
                    let layer = &m.layers[l];
                    if want_params {
                        let db: Vec<f64> = dz.sum_axis(Axis(0)).to_vec();
                        let dw: Vec<f64> = dz.t().dot(&trace.inputs[l]).iter().copied().collect();
                        grads.push(db);
                        grads.push(dw);
                    }
                    let da = dz.dot(&layer.weight);
                    if l == 0 {
                        grads.reverse();
                        return (da, grads);
                    }
                    let pre = &trace.pre[l - 1];
                    dz = da;
                    ndarray::Zip::from(&mut dz).and(pre).for_each(|g, &z| {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    });
                }
                unreachable!("loop returns at layer 0")
            }
        }
    }

    /// Parameter buffers in a fixed order: `[B]` or `[W0, b0, W1, b1, ...]`.
    pub fn param_buffers_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Probe::Linear(p) => vec![p.proj.as_slice_mut().expect("standard layout")],
            Probe::Mlp(m) => m
                .layers
                .iter_mut()
                .flat_map(|l| {
                    [
                        l.weight.as_slice_mut().expect("standard layout"),
                        l.bias.as_slice_mut().expect("standard layout"),
                    ]
                })
                .collect(),
        }
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        match self {
            Probe::Linear(p) => vec![p.proj.len()],
            Probe::Mlp(m) => m
                .layers
                .iter()
                .flat_map(|l| [l.weight.len(), l.bias.len()])
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Probe::Linear(p) => p.proj.iter().all(|x| x.is_finite()),
            Probe::Mlp(m) => m
                .layers
                .iter()
                .all(|l| l.weight.iter().chain(l.bias.iter()).all(|x| x.is_finite())),
        }
    }

    pub fn predict(&self, emb: &EmbeddingMatrix) -> Result<Prediction> {
        self.check_dim(emb.dim())?;
        let feats = self.features(emb.vectors.view());
        Ok(match self.kind() {
            ProbeKind::Depth => Prediction::Depths(squared_norms(&feats)),
            ProbeKind::Distance => Prediction::Distances(pairwise_squared_distances(&feats)),
        })
    }

    /// Loss of this probe against `gold` and its exact gradient with respect
    /// to every entry of `emb`. Probe parameters are left untouched.
    pub fn grad_wrt_embeddings(&self, emb: &Array2<f64>, gold: &TreeMetrics) -> Result<(f64, Array2<f64>)> {
        self.check_dim(emb.ncols())?;
        if emb.nrows() != gold.len() {
            return Err(Error::Dimension {
                expected: gold.len(),
                actual: emb.nrows(),
            });
        }
        let (feats, trace) = self.forward(emb.view());
        let (loss, d_feats) = loss::loss_and_feature_grad(self.kind(), &feats, gold);
        let (d_emb, _) = self.backward(&trace, d_feats, false);
        Ok((loss, d_emb))
    }

    pub fn loss(&self, emb: &Array2<f64>, gold: &TreeMetrics) -> Result<f64> {
        self.check_dim(emb.ncols())?;
        let feats = self.features(emb.view());
        Ok(loss::loss_and_feature_grad(self.kind(), &feats, gold).0)
    }

    pub fn to_tensor_file(&self, layer: usize, seed: u64) -> TensorFile {
        let meta = json!({
            "kind": self.kind(),
            "type": self.probe_type(),
            "dims": self.input_dim(),
            "rank": self.rank(),
            "hidden": self.hidden(),
            "layer": layer,
            "seed": seed,
        });
        let mut f = TensorFile::new(DType::F64, meta);
        match self {
            Probe::Linear(p) => f.push("proj", p.proj.shape().to_vec(), p.proj.iter().copied().collect()),
            Probe::Mlp(m) => {
                for (i, l) in m.layers.iter().enumerate() {
                    f.push(format!("w{i}"), l.weight.shape().to_vec(), l.weight.iter().copied().collect());
                    f.push(format!("b{i}"), vec![l.bias.len()], l.bias.to_vec());
                }
            }
        }
        f
    }

    /// Restores a probe and the layer it was trained on.
    pub fn from_tensor_file(file: &TensorFile) -> Result<(Self, usize)> {
        let ty: ProbeType = serde_json::from_value(file.meta["type"].clone())
            .map_err(|e| Error::format(format!("probe type: {e}")))?;
        let layer = file.meta["layer"]
            .as_u64()
            .ok_or_else(|| Error::format("missing layer in probe header"))? as usize;
        let matrix = |name: &str| -> Result<Array2<f64>> {
            let t = file.get(name)?;
            let [r, c] = t.shape[..] else {
                return Err(Error::format(format!("{name} must be 2-dimensional")));
            };
            Array2::from_shape_vec((r, c), t.data.clone()).map_err(|e| Error::format(e.to_string()))
        };
        let probe = match ty {
            ProbeType::Depth | ProbeType::Dist => Probe::Linear(LinearProbe {
                kind: ty.kind(),
                proj: matrix("proj")?,
            }),
            ProbeType::Dist2 | ProbeType::Dist3 => {
                let depth = if ty == ProbeType::Dist2 { 2 } else { 3 };
                let mut layers = Vec::with_capacity(depth);
                for i in 0..depth {
                    let weight = matrix(&format!("w{i}"))?;
                    let bias = Array1::from(file.get(&format!("b{i}"))?.data.clone());
                    if bias.len() != weight.nrows() {
                        return Err(Error::format(format!("layer {i} bias width mismatch")));
                    }
                    if i > 0 && weight.ncols() != layers.last().map(|l: &Dense| l.weight.nrows()).unwrap_or(0) {
                        return Err(Error::format(format!("layer {i} does not chain")));
                    }
                    layers.push(Dense { weight, bias });
                }
                Probe::Mlp(MlpProbe { layers })
            }
        };
        Ok((probe, layer))
    }
}

/// Depth predictions; fails for distance probes.
pub fn predict_depths(probe: &Probe, emb: &EmbeddingMatrix) -> Result<Array1<f64>> {
    if probe.kind() != ProbeKind::Depth {
        return Err(Error::Unsupported("depth prediction with a distance probe".into()));
    }
    match probe.predict(emb)? {
        Prediction::Depths(d) => Ok(d),
        Prediction::Distances(_) => unreachable!(),
    }
}

/// Pairwise distance predictions; fails for depth probes.
pub fn predict_distances(probe: &Probe, emb: &EmbeddingMatrix) -> Result<Array2<f64>> {
    if probe.kind() != ProbeKind::Distance {
        return Err(Error::Unsupported("distance prediction with a depth probe".into()));
    }
    match probe.predict(emb)? {
        Prediction::Distances(d) => Ok(d),
        Prediction::Depths(_) => unreachable!(),
    }
}

pub fn grad_wrt_embeddings(probe: &Probe, emb: &EmbeddingMatrix, gold: &TreeMetrics) -> Result<Array2<f64>> {
    Ok(probe.grad_wrt_embeddings(&emb.vectors, gold)?.1)
}

/// Orthogonal projection of every word vector onto the row space of a
/// linear probe.
pub fn probe_projection(probe: &Probe, emb: &EmbeddingMatrix) -> Result<Array2<f64>> {
    let Probe::Linear(p) = probe else {
        return Err(Error::Unsupported("projection requires a linear probe".into()));
    };
    if emb.dim() != p.proj.ncols() {
        return Err(Error::Dimension {
            expected: p.proj.ncols(),
            actual: emb.dim(),
        });
    }
    let basis = row_space_basis(&p.proj);
    if basis.nrows() == 0 {
        return Ok(Array2::zeros(emb.vectors.raw_dim()));
    }
    let coords = emb.vectors.dot(&basis.t());
    Ok(coords.dot(&basis))
}

/// Orthonormal basis (as rows) of the span of `m`'s rows, by two-pass
/// modified Gram-Schmidt.
fn row_space_basis(m: &Array2<f64>) -> Array2<f64> {
    let scale = m.iter().fold(0.0f64, |a, &x| a.max(x.abs())).max(f64::MIN_POSITIVE);
    let tol = 1e-10 * scale;
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for row in m.rows() {
        let mut v = row.to_owned();
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v.scaled_add(-c, q);
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm > tol {
            basis.push(v / norm);
        }
        if basis.len() == m.ncols() {
            break;
        }
    }
    let d = m.ncols();
    let mut out = Array2::zeros((basis.len(), d));
    for (i, q) in basis.iter().enumerate() {
        out.row_mut(i).assign(q);
    }
    out
}

pub(crate) fn squared_norms(feats: &Array2<f64>) -> Array1<f64> {
    feats.rows().into_iter().map(|r| r.dot(&r)).collect()
}

pub(crate) fn pairwise_squared_distances(feats: &Array2<f64>) -> Array2<f64> {
    let n = feats.nrows();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = feats
                .row(i)
                .iter()
                .zip(feats.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out[[i, j]] = d;
            out[[j, i]] = d;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treebank::{tree_metrics, DepParse};
    use ndarray::array;

    fn emb(v: Array2<f64>) -> EmbeddingMatrix {
        let n = v.nrows();
        EmbeddingMatrix::new(0, v, (0..n).map(|i| format!("w{i}")).collect()).unwrap()
    }

    #[test]
    fn identity_depths() {
        let p = Probe::Linear(LinearProbe::identity(ProbeKind::Depth, 3));
        let e = emb(array![[0.0, 0.0, 0.0], [0.6, 0.8, 0.0]]);
        let d = predict_depths(&p, &e).unwrap();
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn depth_matches_quadratic_form() {
        let p = LinearProbe::init(ProbeKind::Depth, 4, 3, 7);
        let e = emb(array![[0.3, -1.2, 0.5, 2.0], [1.0, 0.0, -0.5, 0.25]]);
        let got = predict_depths(&Probe::Linear(p.clone()), &e).unwrap();
        // h^T (B^T B) h computed entry by entry.
        let gram = p.proj.t().dot(&p.proj);
        for (i, h) in e.vectors.rows().into_iter().enumerate() {
            let mut q = 0.0;
            for a in 0..4 {
                for b in 0..4 {
                    q += h[a] * gram[[a, b]] * h[b];
                }
            }
            assert!((got[i] - q).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_inputs_have_zero_distance() {
        let p = Probe::new(ProbeType::Dist3, 3, 4, 16, 1);
        let e = emb(array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]);
        let d = predict_distances(&p, &e).unwrap();
        assert_eq!(d[[0, 1]], 0.0);
    }

    #[test]
    fn path_indicators_recover_tree_distances() {
        let parse = DepParse::from_heads(&["a", "b", "c", "d", "e"], &[2, 0, 2, 3, 4]).unwrap();
        let gold = tree_metrics(&parse);
        let e = emb(path_indicator_embedding(&parse, 6));
        let d = predict_distances(&Probe::Linear(LinearProbe::identity(ProbeKind::Distance, 6)), &e).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(d[[i, j]], gold.dist[[i, j]] as f64);
            }
        }
    }

    #[test]
    fn zero_final_layer_predicts_zero() {
        let mut m = MlpProbe::init(3, 8, 3, 4, 2);
        let last = m.layers.last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        let d = predict_distances(&Probe::Mlp(m), &emb(array![[1.0, 0.0, 2.0], [0.0, 1.0, -1.0], [3.0, 3.0, 3.0]])).unwrap();
        assert!(d.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn kind_and_dimension_errors() {
        let depth = Probe::Linear(LinearProbe::identity(ProbeKind::Depth, 2));
        let e = emb(array![[1.0, 2.0]]);
        assert!(matches!(predict_distances(&depth, &e), Err(Error::Unsupported(_))));
        let e3 = emb(array![[1.0, 2.0, 3.0]]);
        assert!(matches!(predict_depths(&depth, &e3), Err(Error::Dimension { .. })));
    }

    #[test]
    fn projection_cases() {
        let full = Probe::Linear(LinearProbe::init(ProbeKind::Distance, 3, 3, 5));
        let e = emb(array![[1.0, -2.0, 0.5], [0.1, 0.2, 0.3]]);
        let p = probe_projection(&full, &e).unwrap();
        assert!((&p - &e.vectors).iter().all(|x| x.abs() < 1e-12));

        let b = array![[1.0, 2.0, 0.0]];
        let rank1 = Probe::Linear(LinearProbe {
            kind: ProbeKind::Distance,
            proj: b.clone(),
        });
        let h = array![[3.0, -1.0, 4.0]];
        let p = probe_projection(&rank1, &emb(h.clone())).unwrap();
        let coef = (3.0 - 2.0) / 5.0;
        for k in 0..3 {
            assert!((p[[0, k]] - coef * b[[0, k]]).abs() < 1e-12);
        }
        let orth = emb(array![[-2.0, 1.0, 0.0]]);
        let p = probe_projection(&rank1, &orth).unwrap();
        assert!(p.iter().all(|x| x.abs() < 1e-12));

        let mlp = Probe::new(ProbeType::Dist2, 3, 2, 4, 0);
        assert!(matches!(probe_projection(&mlp, &e), Err(Error::Unsupported(_))));
    }

    #[test]
    fn persistence_round_trip() {
        for ty in ProbeType::ALL {
            let p = Probe::new(ty, 5, 3, 7, 11);
            let bytes = p.to_tensor_file(4, 11).to_bytes().unwrap();
            let (back, layer) = Probe::from_tensor_file(&TensorFile::from_bytes(&bytes).unwrap()).unwrap();
            assert_eq!(back, p);
            assert_eq!(layer, 4);
        }
    }
}
