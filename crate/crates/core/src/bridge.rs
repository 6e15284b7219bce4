//! File protocol for driving an external model process.
//!
//! Every request lives in its own directory. The requester writes
//! `request.json` (plus `counterfactual.bin` and `alignment.json` for
//! injections); the model process answers in the same directory with
//! `meta.json` echoing the request hash and either `embeddings.bin` plus
//! `alignment.json` (export) or `dist_mask.bin` / `dist_start.bin` and
//! `dist_end.bin` (inject). Tensors use the shared header format with 32-bit
//! payloads. Mask distributions index the model vocabulary listed one word
//! per line in `vocab.txt` at the bridge root.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{DistributionKind, OutputDistribution};
use crate::probes::EmbeddingMatrix;
use crate::tensor_file::{write_atomic, DType, TensorFile};

pub const REQUEST_FILE: &str = "request.json";
pub const META_FILE: &str = "meta.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const ALIGNMENT_FILE: &str = "alignment.json";
pub const COUNTERFACTUAL_FILE: &str = "counterfactual.bin";
pub const DIST_MASK_FILE: &str = "dist_mask.bin";
pub const DIST_START_FILE: &str = "dist_start.bin";
pub const DIST_END_FILE: &str = "dist_end.bin";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BridgeMode {
    Export,
    Inject,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BridgeModel {
    #[serde(rename = "mask-large")]
    MaskLarge,
    #[serde(rename = "qa-squad")]
    QaSquad,
}

impl BridgeModel {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mask-large" => Ok(BridgeModel::MaskLarge),
            "qa-squad" => Ok(BridgeModel::QaSquad),
            _ => Err(Error::invalid(format!("unknown bridge model {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeRequest {
    pub mode: BridgeMode,
    pub model: BridgeModel,
    pub text: String,
    /// Sentence words in order; probe trees and alignments index these.
    pub words: Vec<String>,
    pub question: Option<String>,
    pub layer: usize,
    /// Word-level embedding to inject, relative to the request directory.
    pub embedding_file: Option<String>,
    /// Alignment from the export, relative to the request directory.
    pub alignment: Option<String>,
}

impl BridgeRequest {
    pub fn export(model: BridgeModel, words: &[String], text: &str, question: Option<&str>, layer: usize) -> Self {
        BridgeRequest {
            mode: BridgeMode::Export,
            model,
            text: text.to_string(),
            words: words.to_vec(),
            question: question.map(str::to_string),
            layer,
            embedding_file: None,
            alignment: None,
        }
    }

    /// The injection counterpart of an export request.
    pub fn inject_from(export: &BridgeRequest) -> Self {
        BridgeRequest {
            mode: BridgeMode::Inject,
            embedding_file: Some(COUNTERFACTUAL_FILE.to_string()),
            alignment: Some(ALIGNMENT_FILE.to_string()),
            ..export.clone()
        }
    }

    /// Hex SHA-256 of the request's canonical JSON.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn validate(&self) -> Result<()> {
        if self.words.is_empty() {
            return Err(Error::invalid("bridge request has no words"));
        }
        if self.mode == BridgeMode::Inject && (self.embedding_file.is_none() || self.alignment.is_none()) {
            return Err(Error::invalid("inject request needs an embedding file and an alignment"));
        }
        Ok(())
    }
}

/// Which subtoken positions make up each word. Subtokens outside every word
/// (special tokens, question tokens) are frozen during injection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub subtokens: Vec<String>,
    pub words: Vec<Vec<usize>>,
    pub frozen: Vec<usize>,
}

impl Alignment {
    /// Words and frozen positions must partition `0..subtokens.len()`, and no
    /// word may be empty.
    pub fn validate(&self, word_forms: &[String]) -> Result<()> {
        if self.words.len() != word_forms.len() {
            return Err(Error::Dimension {
                expected: word_forms.len(),
                actual: self.words.len(),
            });
        }
        let m = self.subtokens.len();
        let mut owner = vec![false; m];
        let mut claim = |i: usize, what: &str| -> Result<()> {
            match owner.get_mut(i) {
                None => Err(Error::invalid(format!("{what}: subtoken {i} out of range ({m} subtokens)"))),
                Some(true) => Err(Error::invalid(format!("{what}: subtoken {i} assigned twice"))),
                Some(slot) => {
                    *slot = true;
                    Ok(())
                }
            }
        };
        for (w, subs) in self.words.iter().enumerate() {
            if subs.is_empty() {
                return Err(Error::invalid(format!("word {:?} has no subtokens", word_forms[w])));
            }
            for &i in subs {
                claim(i, &format!("word {:?}", word_forms[w]))?;
            }
        }
        for &i in &self.frozen {
            claim(i, "frozen")?;
        }
        if let Some(i) = owner.iter().position(|o| !o) {
            return Err(Error::invalid(format!("subtoken {i} belongs to no word")));
        }
        Ok(())
    }

    /// Word vectors as the mean of their subtoken rows.
    pub fn mean_pool(&self, sub: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_rows(sub)?;
        let mut out = Array2::zeros((self.words.len(), sub.ncols()));
        for (w, subs) in self.words.iter().enumerate() {
            let mut row = out.row_mut(w);
            for &i in subs {
                row += &sub.row(i);
            }
            row /= subs.len() as f64;
        }
        Ok(out)
    }

    /// Copies each word vector onto all of its subtoken rows of `base`,
    /// leaving frozen rows untouched.
    pub fn broadcast(&self, words: &Array2<f64>, base: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_rows(base)?;
        if words.nrows() != self.words.len() || words.ncols() != base.ncols() {
            return Err(Error::Dimension {
                expected: self.words.len(),
                actual: words.nrows(),
            });
        }
        let mut out = base.clone();
        for (w, subs) in self.words.iter().enumerate() {
            for &i in subs {
                out.row_mut(i).assign(&words.row(w));
            }
        }
        Ok(out)
    }

    fn check_rows(&self, sub: &Array2<f64>) -> Result<()> {
        if sub.nrows() != self.subtokens.len() {
            return Err(Error::Dimension {
                expected: self.subtokens.len(),
                actual: sub.nrows(),
            });
        }
        Ok(())
    }
}

/// Writes `request.json`, and for injections the counterfactual and the
/// alignment it was exported with.
pub fn write_request(
    dir: &Path,
    request: &BridgeRequest,
    injection: Option<(&EmbeddingMatrix, &Alignment)>,
) -> Result<()> {
    request.validate()?;
    fs::create_dir_all(dir)?;
    if request.mode == BridgeMode::Inject {
        let (emb, alignment) =
            injection.ok_or_else(|| Error::invalid("inject request written without an embedding"))?;
        alignment.validate(&request.words)?;
        if emb.len() != request.words.len() || emb.layer != request.layer {
            return Err(Error::invalid(format!(
                "injected embedding has {} rows at layer {}, request has {} words at layer {}",
                emb.len(),
                emb.layer,
                request.words.len(),
                request.layer
            )));
        }
        let mut file = emb.to_tensor_file(json!({ "request_hash": request.hash() }));
        file.dtype = DType::F32;
        file.write(&dir.join(COUNTERFACTUAL_FILE))?;
        write_atomic(&dir.join(ALIGNMENT_FILE), &serde_json::to_vec_pretty(alignment)?)?;
    }
    write_atomic(&dir.join(REQUEST_FILE), &serde_json::to_vec_pretty(request)?)
}

pub fn read_request(dir: &Path) -> Result<BridgeRequest> {
    let req: BridgeRequest = serde_json::from_slice(&fs::read(dir.join(REQUEST_FILE))?)?;
    req.validate()?;
    Ok(req)
}

/// Whether the model process has answered the request in `dir`.
pub fn is_answered(dir: &Path) -> bool {
    dir.join(META_FILE).is_file()
}

fn check_meta(dir: &Path, request: &BridgeRequest) -> Result<Value> {
    let meta: Value = serde_json::from_slice(&fs::read(dir.join(META_FILE))?)?;
    let got = meta.get("request_hash").and_then(Value::as_str).unwrap_or_default();
    let want = request.hash();
    if got != want {
        return Err(Error::format(format!(
            "{}: response answers request {got:?}, expected {want:?}",
            dir.display()
        )));
    }
    if let Some(err) = meta.get("error").and_then(Value::as_str) {
        return Err(Error::invalid(format!("{}: bridge reported: {err}", dir.display())));
    }
    Ok(meta)
}

fn single_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let file = TensorFile::read(path)?;
    match file.tensors.as_slice() {
        [t] => Ok((t.shape.clone(), t.data.clone())),
        _ => Err(Error::format(format!("{}: expected exactly one tensor", path.display()))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Export {
    pub embedding: EmbeddingMatrix,
    pub alignment: Alignment,
}

/// Reads an answered export request.
pub fn read_export(dir: &Path, request: &BridgeRequest) -> Result<Export> {
    check_meta(dir, request)?;
    let alignment: Alignment = serde_json::from_slice(&fs::read(dir.join(ALIGNMENT_FILE))?)?;
    alignment.validate(&request.words)?;
    let (shape, data) = single_tensor(&dir.join(EMBEDDINGS_FILE))?;
    let [n, d] = shape[..] else {
        return Err(Error::format(format!("embeddings must be a matrix, got shape {shape:?}")));
    };
    if n != request.words.len() {
        return Err(Error::Dimension {
            expected: request.words.len(),
            actual: n,
        });
    }
    let vectors = Array2::from_shape_vec((n, d), data).map_err(|e| Error::format(e.to_string()))?;
    Ok(Export {
        embedding: EmbeddingMatrix::new(request.layer, vectors, request.words.clone())?,
        alignment,
    })
}

pub fn read_vocab(root: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(root.join(VOCAB_FILE))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Full-vocabulary masked-word probabilities from an answered inject request.
pub fn read_mask_response(dir: &Path, request: &BridgeRequest, vocab: &[String]) -> Result<Vec<f64>> {
    check_meta(dir, request)?;
    let (shape, probs) = single_tensor(&dir.join(DIST_MASK_FILE))?;
    if shape != [vocab.len()] {
        return Err(Error::format(format!(
            "mask distribution has shape {shape:?}, vocabulary has {} words",
            vocab.len()
        )));
    }
    Ok(probs)
}

/// Start and end distributions from an answered QA inject request, mapped to
/// sentence words through the first subtoken of each word. Left unnormalized.
pub fn read_qa_response(
    dir: &Path,
    request: &BridgeRequest,
    alignment: &Alignment,
) -> Result<(OutputDistribution, OutputDistribution)> {
    check_meta(dir, request)?;
    let support: Vec<String> = (0..alignment.words.len()).map(|i| i.to_string()).collect();
    let read = |file: &str, kind: DistributionKind| -> Result<OutputDistribution> {
        let (shape, probs) = single_tensor(&dir.join(file))?;
        if shape != [alignment.subtokens.len()] {
            return Err(Error::format(format!(
                "{file} has shape {shape:?}, alignment has {} subtokens",
                alignment.subtokens.len()
            )));
        }
        let words = alignment.words.iter().map(|subs| probs[subs[0]]).collect();
        OutputDistribution::new(kind, support.clone(), words)
    };
    Ok((read(DIST_START_FILE, DistributionKind::QaStart)?, read(DIST_END_FILE, DistributionKind::QaEnd)?))
}

/// Writes a response the way the model process does. Used by tests and by
/// in-process stand-ins for the bridge.
pub fn write_response(dir: &Path, request: &BridgeRequest, files: &[(&str, TensorFile)], extra: Value) -> Result<()> {
    for (name, file) in files {
        file.write(&dir.join(name))?;
    }
    let mut meta = json!({ "request_hash": request.hash() });
    if let (Value::Object(m), Value::Object(e)) = (&mut meta, extra) {
        m.extend(e);
    }
    write_atomic(&dir.join(META_FILE), &serde_json::to_vec_pretty(&meta)?)
}

/// A one-tensor f32 file.
pub fn f32_tensor(name: &str, shape: Vec<usize>, data: Vec<f64>) -> TensorFile {
    let mut f = TensorFile::new(DType::F32, Value::Null);
    f.push(name, shape, data);
    f
}

/// Directory for a request about one sentence at one layer. The model
/// process serves every `requests/*/*/request.json` lacking a `meta.json`.
pub fn request_dir(root: &Path, stage: &str, item: usize, layer: usize, tag: &str) -> PathBuf {
    root.join("requests").join(stage).join(format!("item{item:05}_L{layer:02}_{tag}"))
}
