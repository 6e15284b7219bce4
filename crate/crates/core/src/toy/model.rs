//! Pre-norm transformer encoder with learned positions and a weight-tied
//! masked-word head, split at any layer boundary.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::autodiff::{softmax_rows, Tape, Var};
use super::grammar::{GrammarSentence, SyntheticGrammar};
use crate::corpora::MASK;
use crate::error::{Error, Result};
use crate::metrics::{DistributionKind, OutputDistribution};
use crate::optim::{Adam, AdamConfig};
use crate::probes::EmbeddingMatrix;
use crate::tensor_file::{DType, TensorFile};

const PER_BLOCK: usize = 16;
/// Sentences per gradient shard; shards run in parallel and are summed in
/// order so training stays deterministic.
const SHARD: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub vocab: Vec<String>,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl ToyModelConfig {
    pub fn new(vocab: Vec<String>, max_len: usize, seed: u64) -> Self {
        ToyModelConfig {
            vocab,
            dim: 64,
            layers: 4,
            heads: 4,
            ff: 256,
            max_len,
            seed,
        }
    }

    pub fn for_grammar(grammar: &SyntheticGrammar, seed: u64) -> Self {
        Self::new(grammar.vocabulary(), grammar.max_len(), seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab.is_empty() || !self.vocab.iter().any(|w| w == MASK) {
            return Err(Error::invalid("vocabulary must contain [MASK]"));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.layers < 2 {
            return Err(Error::invalid("toy model needs at least two layers"));
        }
        if self.ff == 0 || self.max_len == 0 {
            return Err(Error::invalid("feed-forward width and max length must be positive"));
        }
        Ok(())
    }

    fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let (v, d, f) = (self.vocab.len(), self.dim, self.ff);
        let mut out = vec![
            ("tok_emb".to_string(), (v, d)),
            ("pos_emb".to_string(), (self.max_len, d)),
        ];
        for b in 0..self.layers {
            let p = |n: &str| format!("block{b}.{n}");
            out.extend([
                (p("ln1_g"), (1, d)),
                (p("ln1_b"), (1, d)),
                (p("wq"), (d, d)),
                (p("bq"), (1, d)),
                (p("wk"), (d, d)),
                (p("bk"), (1, d)),
                (p("wv"), (d, d)),
                (p("bv"), (1, d)),
                (p("wo"), (d, d)),
                (p("bo"), (1, d)),
                (p("ln2_g"), (1, d)),
                (p("ln2_b"), (1, d)),
                (p("w1"), (d, f)),
                (p("b1"), (1, f)),
                (p("w2"), (f, d)),
                (p("b2"), (1, d)),
            ]);
        }
        out.extend([
            ("lnf_g".to_string(), (1, d)),
            ("lnf_b".to_string(), (1, d)),
            ("out_bias".to_string(), (1, v)),
        ]);
        out
    }
}

/// A toy masked-word model whose forward pass can be cut after any block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSplitModel {
    config: ToyModelConfig,
    params: Vec<Array2<f64>>,
}

struct Leaves(Vec<Var>);

impl Leaves {
    fn block(&self, b: usize, i: usize) -> Var {
        self.0[2 + b * PER_BLOCK + i]
    }

    fn tail(&self, i: usize) -> Var {
        self.0[self.0.len() - 3 + i]
    }
}

/// Token ids of one encoded sentence plus its mask position.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub mask: Option<usize>,
}

impl LayerSplitModel {
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let blocks = 2.0 * config.layers as f64;
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let short = name.rsplit('.').next().unwrap_or(&name);
                let std = match short {
                    "tok_emb" | "pos_emb" => 0.1,
                    "wq" | "wk" | "wv" | "w1" => 1.0 / (shape.0 as f64).sqrt(),
                    "wo" | "w2" => 1.0 / (shape.0 as f64 * blocks).sqrt(),
                    _ => 0.0,
                };
                if short.ends_with("_g") {
                    Array2::ones(shape)
                } else if std == 0.0 {
                    Array2::zeros(shape)
                } else {
                    let normal = Normal::new(0.0, std).expect("positive std");
                    Array2::from_shape_simple_fn(shape, || normal.sample(&mut rng))
                }
            })
            .collect();
        Ok(LayerSplitModel { config, params })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn vocab(&self) -> &[String] {
        &self.config.vocab
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Maps words to ids, lowercasing everything except `[MASK]`.
    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Encoded> {
        if words.is_empty() {
            return Err(Error::invalid("empty sentence"));
        }
        if words.len() > self.config.max_len {
            return Err(Error::invalid(format!(
                "sentence of {} words exceeds the model's maximum length {}",
                words.len(),
                self.config.max_len
            )));
        }
        let mut ids = Vec::with_capacity(words.len());
        for w in words {
            let w = w.as_ref();
            let key = if w == MASK { w.to_string() } else { w.to_lowercase() };
            let id = self
                .config
                .vocab
                .iter()
                .position(|v| *v == key)
                .ok_or_else(|| Error::invalid(format!("out-of-vocabulary token {w:?}")))?;
            ids.push(id);
        }
        let mask = words.iter().position(|w| w.as_ref() == MASK);
        Ok(Encoded { ids, mask })
    }

    fn leaves(&self, tape: &mut Tape) -> Leaves {
        Leaves(self.params.iter().map(|p| tape.leaf(p.clone())).collect())
    }

    fn embed(&self, tape: &mut Tape, l: &Leaves, batch: &[&[usize]]) -> Var {
        let ids: Vec<usize> = batch.iter().flat_map(|s| s.iter().copied()).collect();
        let pos: Vec<usize> = batch.iter().flat_map(|s| 0..s.len()).collect();
        let tok = tape.gather(l.0[0], &ids);
        let p = tape.gather(l.0[1], &pos);
        tape.add(tok, p)
    }

    fn block(&self, tape: &mut Tape, l: &Leaves, b: usize, x: Var, seq_lens: &[usize]) -> Var {
        let w = |i| l.block(b, i);
        let h = tape.layer_norm(x, w(0), w(1));
        let q = tape.affine(h, w(2), w(3));
        let k = tape.affine(h, w(4), w(5));
        let v = tape.affine(h, w(6), w(7));
        let a = tape.attention(q, k, v, seq_lens, self.config.heads);
        let o = tape.affine(a, w(8), w(9));
        let x = tape.add(x, o);
        let h = tape.layer_norm(x, w(10), w(11));
        let f = tape.affine(h, w(12), w(13));
        let f = tape.gelu(f);
        let f = tape.affine(f, w(14), w(15));
        tape.add(x, f)
    }

    fn head(&self, tape: &mut Tape, l: &Leaves, x: Var, rows: &[usize]) -> Var {
        let sel = tape.select_rows(x, rows);
        let h = tape.layer_norm(sel, l.tail(0), l.tail(1));
        let logits = tape.matmul_t(h, l.0[0]);
        tape.add_row(logits, l.tail(2))
    }

    fn check_layer(&self, k: usize) -> Result<()> {
        if k > self.config.layers {
            return Err(Error::invalid(format!(
                "layer {k} out of range 0..={}",
                self.config.layers
            )));
        }
        Ok(())
    }

    fn mask_distribution(&self, logits: &Array2<f64>) -> Result<OutputDistribution> {
        let probs = softmax_rows(logits);
        OutputDistribution::new(DistributionKind::Mask, self.config.vocab.clone(), probs.row(0).to_vec())
    }

    /// Residual stream after the first `k` blocks; `k = 0` is the token plus
    /// position embedding.
    pub fn embed_to_layer<S: AsRef<str>>(&self, words: &[S], k: usize) -> Result<EmbeddingMatrix> {
        self.check_layer(k)?;
        let enc = self.encode(words)?;
        let mut tape = Tape::new();
        let l = self.leaves(&mut tape);
        let mut x = self.embed(&mut tape, &l, &[&enc.ids]);
        for b in 0..k {
            x = self.block(&mut tape, &l, b, x, &[enc.ids.len()]);
        }
        let forms = words.iter().map(|w| w.as_ref().to_string()).collect();
        EmbeddingMatrix::new(k, tape.into_value(x), forms)
    }

    /// Runs blocks `k+1..=L` on `z` and returns the full-vocabulary
    /// distribution at the `[MASK]` position.
    pub fn continue_from_layer(&self, z: &EmbeddingMatrix, k: usize) -> Result<OutputDistribution> {
        self.check_layer(k)?;
        if z.layer != k {
            return Err(Error::invalid(format!(
                "embedding comes from layer {} but was injected at layer {k}",
                z.layer
            )));
        }
        if z.dim() != self.config.dim {
            return Err(Error::Dimension {
                expected: self.config.dim,
                actual: z.dim(),
            });
        }
        let mask = z
            .word_forms
            .iter()
            .position(|w| w == MASK)
            .ok_or_else(|| Error::invalid("sentence has no [MASK] token"))?;
        let mut tape = Tape::new();
        let l = self.leaves(&mut tape);
        let mut x = tape.leaf(z.vectors.clone());
        for b in k..self.config.layers {
            x = self.block(&mut tape, &l, b, x, &[z.len()]);
        }
        let logits = self.head(&mut tape, &l, x, &[mask]);
        self.mask_distribution(tape.value(logits))
    }

    /// The undecomposed forward pass.
    pub fn predict<S: AsRef<str>>(&self, words: &[S]) -> Result<OutputDistribution> {
        let enc = self.encode(words)?;
        let mask = enc.mask.ok_or_else(|| Error::invalid("sentence has no [MASK] token"))?;
        let mut tape = Tape::new();
        let l = self.leaves(&mut tape);
        let mut x = self.embed(&mut tape, &l, &[&enc.ids]);
        for b in 0..self.config.layers {
            x = self.block(&mut tape, &l, b, x, &[enc.ids.len()]);
        }
        let logits = self.head(&mut tape, &l, x, &[mask]);
        self.mask_distribution(tape.value(logits))
    }

    pub fn predict_batch(&self, sentences: &[Vec<String>]) -> Result<Vec<OutputDistribution>> {
        sentences
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                self.predict(s).map_err(|e| Error::Element {
                    index: i,
                    source: Box::new(e),
                })
            })
            .collect()
    }

    /// Mean masked-word cross-entropy of a batch and its parameter gradients.
    fn loss_and_grads(&self, batch: &[(Encoded, usize)]) -> (f64, Vec<Array2<f64>>) {
        let mut tape = Tape::new();
        let l = self.leaves(&mut tape);
        let ids: Vec<&[usize]> = batch.iter().map(|(e, _)| e.ids.as_slice()).collect();
        let seq_lens: Vec<usize> = ids.iter().map(|s| s.len()).collect();
        let mut x = self.embed(&mut tape, &l, &ids);
        for b in 0..self.config.layers {
            x = self.block(&mut tape, &l, b, x, &seq_lens);
        }
        let mut rows = Vec::with_capacity(batch.len());
        let mut offset = 0;
        for (e, _) in batch {
            rows.push(offset + e.mask.expect("training sentences have a mask"));
            offset += e.ids.len();
        }
        let targets: Vec<usize> = batch.iter().map(|(_, t)| *t).collect();
        let logits = self.head(&mut tape, &l, x, &rows);
        let loss = tape.cross_entropy(logits, &targets);
        let mut grads = tape.backward(loss);
        let g = l
            .0
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| grads[v].take().unwrap_or_else(|| Array2::zeros(p.raw_dim())))
            .collect();
        (tape.value(loss)[[0, 0]], g)
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = TensorFile::new(DType::F64, json!({ "kind": "toy-model", "config": self.config }));
        for ((name, _), p) in self.config.param_shapes().into_iter().zip(&self.params) {
            f.push(name, p.shape().to_vec(), p.iter().copied().collect());
        }
        f
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        if file.meta.get("kind").and_then(|k| k.as_str()) != Some("toy-model") {
            return Err(Error::format("not a toy model checkpoint"));
        }
        let config: ToyModelConfig = serde_json::from_value(file.meta["config"].clone())?;
        config.validate()?;
        let mut params = Vec::new();
        for (name, shape) in config.param_shapes() {
            let t = file.get(&name)?;
            if t.shape != [shape.0, shape.1] {
                return Err(Error::format(format!("tensor {name} has shape {:?}", t.shape)));
            }
            params.push(Array2::from_shape_vec(shape, t.data.clone()).map_err(|e| Error::format(e.to_string()))?);
        }
        Ok(LayerSplitModel { config, params })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_tensor_file().write(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::read(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTrainConfig {
    pub epochs: usize,
    pub sentences: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Decoupled weight decay applied after every Adam step.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        ToyTrainConfig {
            epochs: 6,
            sentences: 5000,
            batch_size: 32,
            learning_rate: 2e-3,
            weight_decay: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedToy {
    pub model: LayerSplitModel,
    /// Mean training loss before training and after every epoch.
    pub losses: Vec<f64>,
}

fn encode_targets(model: &LayerSplitModel, data: &[GrammarSentence]) -> Result<Vec<(Encoded, usize)>> {
    data.iter()
        .map(|s| {
            let e = model.encode(&s.tokens)?;
            let t = model.encode(&[s.filler.as_str()])?.ids[0];
            Ok((e, t))
        })
        .collect()
}

fn mean_loss(model: &LayerSplitModel, data: &[(Encoded, usize)]) -> f64 {
    let parts: Vec<(f64, usize)> = data
        .par_chunks(64)
        .map(|c| (model.loss_and_grads(c).0 * c.len() as f64, c.len()))
        .collect();
    let (sum, n) = parts.iter().fold((0.0, 0), |(s, n), (l, c)| (s + l, n + c));
    sum / n as f64
}

/// Trains on sentences sampled from `grammar`, minimizing masked-word
/// cross-entropy with Adam.
pub fn train_toy(model: LayerSplitModel, grammar: &SyntheticGrammar, config: &ToyTrainConfig) -> Result<TrainedToy> {
    grammar.validate()?;
    if config.batch_size == 0 || config.sentences == 0 {
        return Err(Error::invalid("batch size and sentence count must be positive"));
    }
    let mut model = model;
    let data = encode_targets(&model, &grammar.sample_many(config.sentences, config.seed))?;
    let mut losses = vec![mean_loss(&model, &data)];
    if config.epochs == 0 {
        return Ok(TrainedToy { model, losses });
    }
    let sizes: Vec<usize> = model.params.iter().map(|p| p.len()).collect();
    let mut adam = Adam::new(AdamConfig::with_learning_rate(config.learning_rate), &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x70e_5eed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for batch in order.chunks(config.batch_size) {
            let items: Vec<(Encoded, usize)> = batch.iter().map(|&i| data[i].clone()).collect();
            let shards: Vec<(f64, Vec<Array2<f64>>)> = items
                .par_chunks(SHARD)
                .map(|c| {
                    let (loss, mut g) = model.loss_and_grads(c);
                    let w = c.len() as f64 / items.len() as f64;
                    g.iter_mut().for_each(|x| *x *= w);
                    (loss * w, g)
                })
                .collect();
            let mut iter = shards.into_iter();
            let (mut loss, mut grads) = iter.next().expect("non-empty batch");
            for (l, g) in iter {
                loss += l;
                for (a, b) in grads.iter_mut().zip(g) {
                    *a += &b;
                }
            }
            if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFinite {
                    step: epoch,
                    what: "toy model training loss".into(),
                });
            }
            let mut params: Vec<&mut [f64]> = model
                .params
                .iter_mut()
                .map(|p| p.as_slice_mut().expect("standard layout"))
                .collect();
            let grads: Vec<&[f64]> = grads.iter().map(|g| g.as_slice().expect("standard layout")).collect();
            adam.step(&mut params, &grads);
            if config.weight_decay > 0.0 {
                let keep = 1.0 - config.learning_rate * config.weight_decay;
                model.params.iter_mut().for_each(|p| *p *= keep);
            }
        }
        let loss = mean_loss(&model, &data);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step: epoch,
                what: "toy model training loss".into(),
            });
        }
        losses.push(loss);
    }
    Ok(TrainedToy { model, losses })
}

/// Fraction of unambiguous sentences whose most probable vocabulary word is
/// a filler licensed by the sentence's reading.
pub fn control_accuracy(model: &LayerSplitModel, grammar: &SyntheticGrammar, count: usize, seed: u64) -> Result<f64> {
    let data = grammar.sample_unambiguous(count, seed);
    if data.is_empty() {
        return Err(Error::UndefinedMetric("grammar has no unambiguous templates".into()));
    }
    let sentences: Vec<Vec<String>> = data.iter().map(|s| s.tokens.clone()).collect();
    let dists = model.predict_batch(&sentences)?;
    let correct = data
        .iter()
        .zip(&dists)
        .filter(|(s, d)| {
            let best = d.ranked()[0].0;
            grammar.fillers_for(s.reading).iter().any(|f| f == best)
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (SyntheticGrammar, LayerSplitModel) {
        let g = SyntheticGrammar::coordination();
        let mut c = ToyModelConfig::for_grammar(&g, 7);
        c.dim = 16;
        c.heads = 2;
        c.ff = 32;
        c.layers = 3;
        (g, LayerSplitModel::new(c).unwrap())
    }

    fn sentence() -> Vec<&'static str> {
        "The man saw the boy and the dog [MASK] tall .".split(' ').collect()
    }

    #[test]
    fn split_matches_the_full_forward_pass() {
        let (_, m) = small();
        let full = m.predict(&sentence()).unwrap();
        for k in 0..=m.layers() {
            let z = m.embed_to_layer(&sentence(), k).unwrap();
            let split = m.continue_from_layer(&z, k).unwrap();
            for (a, b) in full.probs.iter().zip(&split.probs) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert!((full.total() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_zero_is_the_input_embedding() {
        let (_, m) = small();
        let z = m.embed_to_layer(&sentence(), 0).unwrap();
        let enc = m.encode(&sentence()).unwrap();
        for (i, &id) in enc.ids.iter().enumerate() {
            let expect = &m.params[0].row(id) + &m.params[1].row(i);
            assert_eq!(z.vectors.row(i), expect);
        }
    }

    #[test]
    fn zero_embedding_gives_a_distribution() {
        let (_, m) = small();
        let mut z = m.embed_to_layer(&sentence(), 2).unwrap();
        z.vectors.fill(0.0);
        let d = m.continue_from_layer(&z, 2).unwrap();
        assert!((d.total() - 1.0).abs() < 1e-9);
        assert!(d.probs.iter().all(|p| p.is_finite() && *p >= 0.0));
    }

    #[test]
    fn errors() {
        let (_, m) = small();
        assert!(m.embed_to_layer(&["the", "zebra", "[MASK]"], 1).is_err());
        assert!(m.embed_to_layer(&sentence(), 4).is_err());
        let z = m.embed_to_layer(&sentence(), 1).unwrap();
        assert!(m.continue_from_layer(&z, 2).is_err());
        assert!(m.predict(&["the", "man"]).is_err());
        let mut c = m.config().clone();
        c.heads = 3;
        assert!(LayerSplitModel::new(c.clone()).is_err());
        c.heads = 2;
        c.layers = 1;
        assert!(LayerSplitModel::new(c).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (_, m) = small();
        let bytes = m.to_tensor_file().to_bytes().unwrap();
        let back = LayerSplitModel::from_tensor_file(&TensorFile::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn zero_epochs_returns_the_initialization() {
        let (g, m) = small();
        let cfg = ToyTrainConfig {
            epochs: 0,
            sentences: 20,
            ..Default::default()
        };
        let t = train_toy(m.clone(), &g, &cfg).unwrap();
        assert_eq!(t.model, m);
        assert_eq!(t.losses.len(), 1);
    }

    #[test]
    fn training_reduces_loss_deterministically() {
        let (g, m) = small();
        let cfg = ToyTrainConfig {
            epochs: 2,
            sentences: 200,
            batch_size: 16,
            learning_rate: 5e-3,
            weight_decay: 0.0,
            seed: 1,
        };
        let a = train_toy(m.clone(), &g, &cfg).unwrap();
        let b = train_toy(m, &g, &cfg).unwrap();
        assert!(a.losses[2] < a.losses[0], "{:?}", a.losses);
        assert_eq!(a.model, b.model);
    }
}
