//! Experiment orchestration: configuration, corpus export, probe training per
//! layer, interventions over a corpus, tree decoding and the run directory
//! they write to.
//!
//! A run directory holds `probes/`, `counterfactuals/`, `reports/` and
//! `manifest.json`. With a bridge model source, commands that need model
//! outputs write requests under the bridge directory and report them as
//! pending; rerunning the command after the model process has answered
//! picks up where it stopped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::bridge::{self, Alignment, BridgeModel, BridgeRequest};
use crate::corpora::{self, npz_partitions, AmbiguousItem, CorpusId, Reading};
use crate::counterfactual::{generate_counterfactual, CfConfig, CfProvenance, CounterfactualResult};
use crate::error::{Error, Result};
use crate::metrics::{
    build_candidate_set, mst_decode, partition_probability, score_probe, uuas, DistributionKind, InterventionOutcome,
    InterventionReport, OutputDistribution, Partition, ProbeScores, ReportSummary,
};
use crate::probes::{predict_distances, train_probe, EmbeddingMatrix, Probe, ProbeKind, ProbeTrainConfig, ProbeType};
use crate::tensor_file::{write_atomic, TensorFile};
use crate::toy::{control_accuracy, train_toy, LayerSplitModel, SyntheticGrammar, ToyModelConfig, ToyTrainConfig};
use crate::treebank::{parse_conll, tree_metrics, DepParse};

pub const ENV_PREFIX: &str = "SYNTX_";
pub const TOY_CORPUS: &str = "toy";

/// Where embeddings and output distributions come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum ModelSource {
    Toy {
        checkpoint: PathBuf,
        /// Grammar the checkpoint was trained on; the built-in coordination
        /// grammar when absent.
        #[serde(default)]
        grammar: Option<PathBuf>,
    },
    Bridge {
        dir: PathBuf,
        model: BridgeModel,
        #[serde(default = "default_bridge_layers")]
        layers: usize,
    },
}

fn default_bridge_layers() -> usize {
    24
}

/// Sentences with gold trees for probe training. CoNLL files when given;
/// otherwise, for toy models, grammar samples with the mask replaced by the
/// agreeing verb and parsed by the reading that verb selects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeData {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub grammar_train: usize,
    pub grammar_dev: usize,
    pub grammar_train_seed: u64,
    pub grammar_dev_seed: u64,
}

impl Default for ProbeData {
    fn default() -> Self {
        ProbeData {
            train: None,
            dev: None,
            test: None,
            grammar_train: 600,
            grammar_dev: 150,
            grammar_train_seed: 11,
            grammar_dev_seed: 12,
        }
    }
}

/// Intervention items and candidate handling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ItemsConfig {
    /// Number of ambiguous grammar sentences for the `toy` corpus.
    pub toy_count: usize,
    pub toy_seed: u64,
    /// Words taken from each distribution when a candidate set is built from
    /// model predictions.
    pub candidate_top_k: usize,
    /// Use only the first this many items of the corpus.
    pub limit: Option<usize>,
}

impl Default for ItemsConfig {
    fn default() -> Self {
        ItemsConfig {
            toy_count: 40,
            toy_seed: 5,
            candidate_top_k: 5,
            limit: None,
        }
    }
}

/// One experiment. `seed` drives probe initialization (offset by the layer
/// index) and the counterfactual search; the nested `seed` fields are
/// overwritten by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelSource,
    #[serde(default = "default_probe")]
    pub probe: ProbeType,
    #[serde(default)]
    pub layers: Vec<usize>,
    /// A corpus name (`coordination`, `npz`, `rc`, `npvp`) or `toy`.
    #[serde(default = "default_corpus")]
    pub corpus: String,
    #[serde(default)]
    pub npz_extra: Option<PathBuf>,
    #[serde(default)]
    pub items: ItemsConfig,
    #[serde(default)]
    pub probe_data: ProbeData,
    #[serde(default)]
    pub probe_training: ProbeTrainConfig,
    #[serde(default)]
    pub counterfactual: CfConfig,
}

fn default_probe() -> ProbeType {
    ProbeType::Dist3
}

fn default_corpus() -> String {
    "coordination".into()
}

/// Builds an [`ExperimentConfig`] from TOML, environment variables and
/// explicit settings, later sources winning.
///
/// Keys are dotted paths into the TOML table. An environment variable
/// `SYNTX_A__B` sets `a.b`; its value is read as a TOML value when it parses
/// as one and as a string otherwise.
#[derive(Clone, Debug, Default)]
pub struct ConfigBuilder {
    table: toml::Table,
}

fn parse_toml_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ConfigBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn file(mut self, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("config {}: {e}", path.display())))?;
        let table: toml::Table =
            toml::from_str(&text).map_err(|e| Error::invalid(format!("config {}: {e}", path.display())))?;
        merge(&mut self.table, table);
        Ok(self)
    }

    pub fn toml(mut self, text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        merge(&mut self.table, table);
        Ok(self)
    }

    pub fn env<I, K, V>(mut self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut sorted: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                let key = k.as_ref().strip_prefix(ENV_PREFIX)?;
                Some((key.to_lowercase().replace("__", "."), v.as_ref().to_string()))
            })
            .collect();
        sorted.sort();
        for (key, raw) in sorted {
            self.set(&key, parse_toml_value(&raw))?;
        }
        Ok(self)
    }

    /// Sets a dotted key, creating intermediate tables.
    pub fn set(&mut self, key: &str, value: toml::Value) -> Result<()> {
        let parts: Vec<&str> = key.split('.').collect();
        let (last, path) = parts.split_last().expect("split yields at least one part");
        let mut table = &mut self.table;
        for p in path {
            let entry = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| Error::invalid(format!("config key {key:?}: {p:?} is not a table")))?;
        }
        table.insert(last.to_string(), value);
        Ok(())
    }

    pub fn set_str(&mut self, key: &str, value: &str) -> Result<()> {
        self.set(key, toml::Value::String(value.to_string()))
    }

    /// Sets a dotted key from `raw` read as a TOML value, or as a string when
    /// it does not parse as one.
    pub fn set_raw(&mut self, key: &str, raw: &str) -> Result<()> {
        self.set(key, parse_toml_value(raw))
    }

    pub fn build(self) -> Result<ExperimentConfig> {
        let mut config: ExperimentConfig = toml::Value::Table(self.table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::invalid(format!("config: {}", e.message())))?;
        config.probe_training.seed = config.seed;
        config.counterfactual.seed = config.seed;
        Ok(config)
    }
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

impl ExperimentConfig {
    /// Hex SHA-256 of the config's JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn probes_dir(&self) -> PathBuf {
        self.output_dir.join("probes")
    }

    pub fn counterfactuals_dir(&self) -> PathBuf {
        self.output_dir.join("counterfactuals")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.output_dir.join("reports")
    }

    pub fn probe_path(&self, layer: usize) -> PathBuf {
        self.probes_dir().join(format!("{}_L{layer:02}.bin", self.probe))
    }

    pub fn probe_metrics_path(&self, layer: usize) -> PathBuf {
        self.probes_dir().join(format!("{}_L{layer:02}.metrics.json", self.probe))
    }

    /// Checks everything that does not need the model loaded.
    pub fn validate(&self) -> Result<()> {
        self.probe_training.validate()?;
        self.counterfactual.validate()?;
        corpus_choice(&self.corpus)?;
        let must_exist = |p: &Path, what: &str| -> Result<()> {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{what} {} does not exist", p.display())))
            }
        };
        match &self.model {
            ModelSource::Toy { checkpoint, grammar } => {
                must_exist(checkpoint, "toy checkpoint")?;
                if let Some(g) = grammar {
                    must_exist(g, "grammar")?;
                }
            }
            ModelSource::Bridge { dir, .. } => must_exist(dir, "bridge directory")?,
        }
        for (p, what) in [
            (&self.probe_data.train, "training treebank"),
            (&self.probe_data.dev, "dev treebank"),
            (&self.probe_data.test, "test treebank"),
            (&self.npz_extra, "curated NP/Z file"),
        ] {
            if let Some(p) = p {
                must_exist(p, what)?;
            }
        }
        Ok(())
    }

    fn check_layers(&self, max: usize) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("layer list is empty"));
        }
        if let Some(&k) = self.layers.iter().find(|&&k| k > max) {
            return Err(Error::invalid(format!("layer {k} out of range 0..={max}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusChoice {
    Corpus(CorpusId),
    Toy,
}

pub fn corpus_choice(name: &str) -> Result<CorpusChoice> {
    if name.eq_ignore_ascii_case(TOY_CORPUS) {
        Ok(CorpusChoice::Toy)
    } else {
        CorpusId::parse(name).map(CorpusChoice::Corpus)
    }
}

/// Result of a command that may be waiting on the model process.
#[derive(Clone, Debug, PartialEq)]
pub enum Progress<T> {
    Done(T),
    /// `written` requests were just written and `waiting` earlier ones are
    /// still unanswered.
    Pending { written: usize, waiting: usize },
}

impl<T> Progress<T> {
    pub fn done(self) -> Option<T> {
        match self {
            Progress::Done(t) => Some(t),
            Progress::Pending { .. } => None,
        }
    }
}

/// A loaded model source.
pub enum Backend {
    Toy {
        model: LayerSplitModel,
        grammar: SyntheticGrammar,
    },
    Bridge {
        root: PathBuf,
        model: BridgeModel,
        layers: usize,
    },
}

impl Backend {
    pub fn load(source: &ModelSource) -> Result<Self> {
        match source {
            ModelSource::Toy { checkpoint, grammar } => {
                let model = LayerSplitModel::load(checkpoint)?;
                let grammar = match grammar {
                    Some(p) => SyntheticGrammar::read(p)?,
                    None => SyntheticGrammar::coordination(),
                };
                Ok(Backend::Toy { model, grammar })
            }
            ModelSource::Bridge { dir, model, layers } => Ok(Backend::Bridge {
                root: dir.clone(),
                model: *model,
                layers: *layers,
            }),
        }
    }

    pub fn max_layer(&self) -> usize {
        match self {
            Backend::Toy { model, .. } => model.layers(),
            Backend::Bridge { layers, .. } => *layers,
        }
    }
}

/// Bridge embeddings for a list of sentences at one layer, writing export
/// requests for the ones not yet answered.
struct Exporter<'a> {
    root: &'a Path,
    model: BridgeModel,
    written: usize,
    waiting: usize,
}

impl<'a> Exporter<'a> {
    fn new(root: &'a Path, model: BridgeModel) -> Self {
        Exporter {
            root,
            model,
            written: 0,
            waiting: 0,
        }
    }

    fn export(
        &mut self,
        stage: &str,
        id: usize,
        words: &[String],
        question: Option<&str>,
        layer: usize,
    ) -> Result<Option<(BridgeRequest, bridge::Export)>> {
        let dir = bridge::request_dir(self.root, stage, id, layer, "export");
        let req = BridgeRequest::export(self.model, words, &render(words), question, layer);
        self.fetch(&dir, req, None)?
            .map(|req| bridge::read_export(&dir, &req).map(|e| (req, e)))
            .transpose()
    }

    /// Returns the request once it is answered, writing it first if needed.
    fn fetch(
        &mut self,
        dir: &Path,
        req: BridgeRequest,
        injection: Option<(&EmbeddingMatrix, &Alignment)>,
    ) -> Result<Option<BridgeRequest>> {
        if !dir.join(bridge::REQUEST_FILE).is_file() {
            bridge::write_request(dir, &req, injection)?;
            self.written += 1;
            return Ok(None);
        }
        let on_disk = bridge::read_request(dir)?;
        if on_disk != req {
            return Err(Error::invalid(format!(
                "{} holds a different request; remove it to regenerate",
                dir.display()
            )));
        }
        if !bridge::is_answered(dir) {
            self.waiting += 1;
            return Ok(None);
        }
        Ok(Some(req))
    }

    fn progress<T>(&self) -> Progress<T> {
        Progress::Pending {
            written: self.written,
            waiting: self.waiting,
        }
    }

    fn idle(&self) -> bool {
        self.written == 0 && self.waiting == 0
    }
}

fn render(words: &[String]) -> String {
    words.join(" ")
}

fn read_treebank(path: &Path) -> Result<Vec<DepParse>> {
    parse_conll(&fs::read_to_string(path)?)
}

/// Train, dev and test sentences for probe training.
pub fn probe_sentences(config: &ExperimentConfig, backend: &Backend) -> Result<[Vec<DepParse>; 3]> {
    let data = &config.probe_data;
    let test = data.test.as_deref().map(read_treebank).transpose()?.unwrap_or_default();
    match (&data.train, &data.dev, backend) {
        (Some(train), Some(dev), _) => Ok([read_treebank(train)?, read_treebank(dev)?, test]),
        (None, None, Backend::Toy { grammar, .. }) => {
            let sample = |count, seed| -> Result<Vec<DepParse>> {
                let mut out = Vec::new();
                for s in grammar.sample_many(count, seed) {
                    let parse = &s.parses.iter().find(|p| p.reading == s.reading).expect("sampled reading").parse;
                    let mut forms = s.tokens.clone();
                    forms[s.mask_position()] = s.filler.clone();
                    out.push(DepParse::from_heads(&forms, &parse.heads())?);
                }
                Ok(out)
            };
            Ok([
                sample(data.grammar_train, data.grammar_train_seed)?,
                sample(data.grammar_dev, data.grammar_dev_seed)?,
                test,
            ])
        }
        _ => Err(Error::invalid(
            "probe training needs both train and dev treebanks (grammar samples only exist for toy models)",
        )),
    }
}

/// Embeds every sentence at `layer`. Toy embeddings are computed in place;
/// bridge embeddings come from answered export requests.
fn embed_sentences(
    backend: &Backend,
    exporter: &mut Option<Exporter<'_>>,
    stage: &str,
    parses: &[DepParse],
    layer: usize,
) -> Result<Option<Vec<(Array2<f64>, DepParse)>>> {
    match backend {
        Backend::Toy { model, .. } => parses
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                model
                    .embed_to_layer(&p.forms(), layer)
                    .map(|e| (e.vectors, p.clone()))
                    .map_err(|e| Error::Element {
                        index: i,
                        source: Box::new(e),
                    })
            })
            .collect::<Result<Vec<_>>>()
            .map(Some),
        Backend::Bridge { .. } => {
            let ex = exporter.as_mut().expect("bridge backends come with an exporter");
            let mut out = Vec::with_capacity(parses.len());
            for (i, p) in parses.iter().enumerate() {
                if let Some((_, e)) = ex.export(stage, i, &p.forms(), None, layer)? {
                    out.push((e.embedding.vectors, p.clone()));
                }
            }
            Ok((out.len() == parses.len()).then_some(out))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRun {
    pub probe: ProbeType,
    pub layer: usize,
    pub path: PathBuf,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_dev_loss: f64,
    pub dev: ProbeScores,
    pub test: Option<ProbeScores>,
}

/// Trains and saves one probe per configured layer, with dev (and test)
/// scores next to each.
pub fn cmd_train_probe(config: &ExperimentConfig) -> Result<Progress<Vec<ProbeRun>>> {
    config.validate()?;
    let backend = Backend::load(&config.model)?;
    config.check_layers(backend.max_layer())?;
    let [train, dev, test] = probe_sentences(config, &backend)?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::invalid("probe training needs non-empty train and dev sets"));
    }
    let mut exporter = match &backend {
        Backend::Bridge { root, model, .. } => Some(Exporter::new(root, *model)),
        Backend::Toy { .. } => None,
    };

    let mut embedded = Vec::new();
    for &layer in &config.layers {
        let tr = embed_sentences(&backend, &mut exporter, "treebank-train", &train, layer)?;
        let dv = embed_sentences(&backend, &mut exporter, "treebank-dev", &dev, layer)?;
        let te = embed_sentences(&backend, &mut exporter, "treebank-test", &test, layer)?;
        embedded.push((layer, tr, dv, te));
    }
    if let Some(ex) = &exporter {
        if !ex.idle() {
            return Ok(ex.progress());
        }
    }

    let mut runs = Vec::new();
    for (layer, tr, dv, te) in embedded {
        let (tr, dv, te) = (tr.expect("complete"), dv.expect("complete"), te.expect("complete"));
        let metrics_of = |d: &[(Array2<f64>, DepParse)]| -> Vec<(Array2<f64>, crate::treebank::TreeMetrics)> {
            d.iter().map(|(x, p)| (x.clone(), tree_metrics(p))).collect()
        };
        let mut tc = config.probe_training.clone();
        tc.seed = config.seed.wrapping_add(layer as u64);
        let trained = train_probe(config.probe, &metrics_of(&tr), &metrics_of(&dv), &tc)?;
        let dev_scores = score_probe(&trained.probe, &dv)?;
        let test_scores = (!te.is_empty()).then(|| score_probe(&trained.probe, &te)).transpose()?;
        let path = config.probe_path(layer);
        trained.probe.to_tensor_file(layer, tc.seed).write(&path)?;
        let run = ProbeRun {
            probe: config.probe,
            layer,
            path,
            best_epoch: trained.best_epoch,
            epochs_run: trained.epochs_run,
            best_dev_loss: trained.best_dev_loss,
            dev: dev_scores,
            test: test_scores,
        };
        let mut report = serde_json::to_value(&run)?;
        report["history"] = json!(trained.history);
        write_atomic(&config.probe_metrics_path(layer), &serde_json::to_vec_pretty(&report)?)?;
        runs.push(run);
    }
    write_manifest(config, "train-probe")?;
    Ok(Progress::Done(runs))
}

pub fn load_probe(config: &ExperimentConfig, layer: usize) -> Result<Probe> {
    let path = config.probe_path(layer);
    if !path.is_file() {
        return Err(Error::invalid(format!(
            "no {} probe for layer {layer} at {}; run train-probe first",
            config.probe,
            path.display()
        )));
    }
    let (probe, trained_layer) = Probe::from_tensor_file(&TensorFile::read(&path)?)?;
    if trained_layer != layer {
        return Err(Error::invalid(format!(
            "{} was trained on layer {trained_layer}, not {layer}",
            path.display()
        )));
    }
    Ok(probe)
}

/// Intervention items for the configured corpus.
pub fn corpus_items(config: &ExperimentConfig, backend: &Backend) -> Result<Vec<AmbiguousItem>> {
    let mut items = match corpus_choice(&config.corpus)? {
        CorpusChoice::Corpus(id) => corpora::generate(id, config.npz_extra.as_deref())?,
        CorpusChoice::Toy => match backend {
            Backend::Toy { grammar, .. } => grammar.ambiguous_items(config.items.toy_count, config.items.toy_seed),
            Backend::Bridge { .. } => return Err(Error::invalid("the toy corpus needs a toy model")),
        },
    };
    if let Some(limit) = config.items.limit {
        items.truncate(limit);
    }
    if items.is_empty() {
        return Err(Error::invalid("the corpus has no items"));
    }
    Ok(items)
}

/// Per-counterfactual diagnostics written next to the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualStats {
    pub sentence_id: usize,
    pub layer: usize,
    pub reading: Reading,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps_taken: usize,
    pub best_step: usize,
    /// UUAS of the decoded counterfactual tree against the target parse;
    /// absent for depth probes.
    pub target_uuas: Option<f64>,
    /// Same, for the embedding before the search.
    pub initial_target_uuas: Option<f64>,
}

/// Model outputs for one sentence at one layer: under the original embedding
/// and under each reading's counterfactual.
#[derive(Clone, Debug)]
struct Observed {
    item: usize,
    layer: usize,
    baseline: OutputDistribution,
    counterfactual: Vec<(Reading, OutputDistribution)>,
}

#[derive(Clone, Debug)]
pub struct InterventionRun {
    pub report: InterventionReport,
    pub summary: ReportSummary,
    pub counterfactuals: Vec<CounterfactualStats>,
    /// Candidate words per item for masked-word corpora.
    pub candidates: Vec<String>,
    pub csv_path: PathBuf,
    pub summary_path: PathBuf,
}

fn search(
    probe: &Probe,
    z: &EmbeddingMatrix,
    item: &AmbiguousItem,
    reading: Reading,
    config: &ExperimentConfig,
) -> Result<(CounterfactualResult, CounterfactualStats)> {
    let parse = item.parse_for(reading).expect("item carries both readings");
    let target = tree_metrics(parse);
    let cf = generate_counterfactual(probe, z, &target, &config.counterfactual)?;
    let target_uuas = |e: &EmbeddingMatrix| -> Result<Option<f64>> {
        if probe.kind() != ProbeKind::Distance || parse.len() < 2 {
            return Ok(None);
        }
        uuas(&predict_distances(probe, e)?, parse).map(Some)
    };
    let stats = CounterfactualStats {
        sentence_id: item.id,
        layer: z.layer,
        reading,
        initial_loss: cf.initial_loss,
        final_loss: cf.final_loss,
        steps_taken: cf.steps_taken,
        best_step: cf.best_step,
        target_uuas: target_uuas(&cf.z_prime)?,
        initial_target_uuas: target_uuas(z)?,
    };
    let provenance = CfProvenance {
        probe_id: format!("{}_L{:02}", config.probe, z.layer),
        target_parse_id: format!("{}:{}:{}", item.corpus.name(), item.id, reading),
    };
    let mut file = cf.to_tensor_file(&provenance);
    file.meta["stats"] = serde_json::to_value(&stats)?;
    file.write(&counterfactual_path(config, item.id, z.layer, reading))?;
    Ok((cf, stats))
}

fn counterfactual_path(config: &ExperimentConfig, item: usize, layer: usize, reading: Reading) -> PathBuf {
    config
        .counterfactuals_dir()
        .join(format!("item{item:05}_L{layer:02}_{reading}.bin"))
}

/// A counterfactual saved by an earlier run of the same command.
fn saved_search(config: &ExperimentConfig, item: usize, layer: usize, reading: Reading) -> Result<CounterfactualStats> {
    let file = TensorFile::read(&counterfactual_path(config, item, layer, reading))?;
    Ok(serde_json::from_value(file.meta["stats"].clone())?)
}

fn toy_observe(
    model: &LayerSplitModel,
    probe: &Probe,
    item: &AmbiguousItem,
    layer: usize,
    config: &ExperimentConfig,
) -> Result<(Observed, Vec<CounterfactualStats>)> {
    let z = model.embed_to_layer(&item.sentence, layer)?;
    let baseline = model.continue_from_layer(&z, layer)?;
    let mut counterfactual = Vec::new();
    let mut stats = Vec::new();
    for rp in &item.parses {
        let (cf, st) = search(probe, &z, item, rp.reading, config)?;
        counterfactual.push((rp.reading, model.continue_from_layer(&cf.z_prime, layer)?));
        stats.push(st);
    }
    Ok((
        Observed {
            item: item.id,
            layer,
            baseline,
            counterfactual,
        },
        stats,
    ))
}

fn bridge_observe(
    ex: &mut Exporter<'_>,
    vocab: Option<&[String]>,
    probe: &Probe,
    item: &AmbiguousItem,
    layer: usize,
    config: &ExperimentConfig,
) -> Result<Option<(Observed, Vec<CounterfactualStats>)>> {
    let question = item.question_text();
    let Some((export_req, export)) = ex.export("corpus", item.id, &item.sentence, question.as_deref(), layer)? else {
        return Ok(None);
    };
    let inject = BridgeRequest::inject_from(&export_req);
    let model = ex.model;
    let root = ex.root;
    let read = |dir: &Path| -> Result<OutputDistribution> {
        match model {
            BridgeModel::MaskLarge => {
                let vocab = vocab.ok_or_else(|| Error::invalid("bridge directory has no vocab.txt"))?;
                let probs = bridge::read_mask_response(dir, &inject, vocab)?;
                OutputDistribution::new(DistributionKind::Mask, vocab.to_vec(), probs)
            }
            BridgeModel::QaSquad => Ok(bridge::read_qa_response(dir, &inject, &export.alignment)?.0),
        }
    };

    let base_dir = bridge::request_dir(root, "corpus", item.id, layer, "baseline");
    let baseline = ex
        .fetch(&base_dir, inject.clone(), Some((&export.embedding, &export.alignment)))?
        .map(|_| read(&base_dir))
        .transpose()?;
    let mut counterfactual = Vec::new();
    let mut stats = Vec::new();
    for rp in &item.parses {
        let dir = bridge::request_dir(root, "corpus", item.id, layer, rp.reading.name());
        // A written request already carries its counterfactual.
        let answered = if dir.join(bridge::REQUEST_FILE).is_file() {
            stats.push(saved_search(config, item.id, layer, rp.reading)?);
            ex.fetch(&dir, inject.clone(), None)?
        } else {
            let (cf, st) = search(probe, &export.embedding, item, rp.reading, config)?;
            stats.push(st);
            ex.fetch(&dir, inject.clone(), Some((&cf.z_prime, &export.alignment)))?
        };
        if answered.is_some() {
            counterfactual.push((rp.reading, read(&dir)?));
        }
    }
    Ok(match baseline {
        Some(baseline) if counterfactual.len() == item.parses.len() => Some((
            Observed {
                item: item.id,
                layer,
                baseline,
                counterfactual,
            },
            stats,
        )),
        _ => None,
    })
}

/// Turns observed distributions into partition outcomes. Masked-word items
/// without fixed candidates share one candidate set built from every
/// observed distribution.
fn outcomes(
    items: &[AmbiguousItem],
    observed: &[Observed],
    probe: ProbeType,
    top_k: usize,
) -> Result<(Vec<InterventionOutcome>, Vec<String>)> {
    let by_id: BTreeMap<usize, &AmbiguousItem> = items.iter().map(|i| (i.id, i)).collect();
    let dynamic: Vec<OutputDistribution> = observed
        .iter()
        .filter(|o| by_id[&o.item].candidates.is_none() && o.baseline.kind == DistributionKind::Mask)
        .flat_map(|o| std::iter::once(o.baseline.clone()).chain(o.counterfactual.iter().map(|(_, d)| d.clone())))
        .collect();
    let shared = build_candidate_set(&dynamic, top_k);
    let mut used_candidates = Vec::new();
    let mut rows = Vec::new();
    for o in observed {
        let item = by_id[&o.item];
        let (candidates, partitions): (Option<Vec<String>>, Vec<Partition>) = match (&item.candidates, o.baseline.kind) {
            (_, DistributionKind::QaStart | DistributionKind::QaEnd) => (None, item.partitions.clone()),
            (Some(c), _) => (Some(c.clone()), item.partitions.clone()),
            (None, _) => (Some(shared.clone()), npz_partitions(&shared)),
        };
        let restrict = |d: &OutputDistribution| -> Result<OutputDistribution> {
            match &candidates {
                Some(c) => OutputDistribution::mask_over_candidates(&d.support, &d.probs, c),
                None => Ok(d.clone()),
            }
        };
        if let Some(c) = &candidates {
            if used_candidates.is_empty() {
                used_candidates = c.clone();
            }
        }
        let base = restrict(&o.baseline)?;
        for (reading, dist) in &o.counterfactual {
            let cf = restrict(dist)?;
            for part in &partitions {
                rows.push(InterventionOutcome {
                    sentence_id: o.item,
                    layer: o.layer,
                    probe: probe.name().to_string(),
                    reading: *reading,
                    partition: part.name.clone(),
                    partition_reading: part.reading,
                    baseline: partition_probability(&base, part)?,
                    counterfactual: partition_probability(&cf, part)?,
                });
            }
        }
    }
    Ok((rows, used_candidates))
}

/// Runs counterfactual interventions for every item, layer and reading and
/// writes `reports/intervention.csv`, `reports/summary.json` and
/// `reports/counterfactuals.csv`.
pub fn cmd_run_intervention(config: &ExperimentConfig) -> Result<Progress<InterventionRun>> {
    config.validate()?;
    let backend = Backend::load(&config.model)?;
    config.check_layers(backend.max_layer())?;
    let items = corpus_items(config, &backend)?;
    let probes: Vec<(usize, Probe)> = config
        .layers
        .iter()
        .map(|&k| load_probe(config, k).map(|p| (k, p)))
        .collect::<Result<_>>()?;
    let jobs: Vec<(&AmbiguousItem, usize, &Probe)> = probes
        .iter()
        .flat_map(|(k, p)| items.iter().map(move |it| (it, *k, p)))
        .collect();

    let results: Vec<(Observed, Vec<CounterfactualStats>)> = match &backend {
        Backend::Toy { model, .. } => jobs
            .par_iter()
            .map(|(it, k, p)| {
                toy_observe(model, p, it, *k, config).map_err(|e| Error::Element {
                    index: it.id,
                    source: Box::new(e),
                })
            })
            .collect::<Result<_>>()?,
        Backend::Bridge { root, model, .. } => {
            let vocab = match model {
                BridgeModel::MaskLarge if root.join(bridge::VOCAB_FILE).is_file() => Some(bridge::read_vocab(root)?),
                _ => None,
            };
            let mut ex = Exporter::new(root, *model);
            let mut done = Vec::new();
            for (it, k, p) in &jobs {
                let r = bridge_observe(&mut ex, vocab.as_deref(), p, it, *k, config).map_err(|e| Error::Element {
                    index: it.id,
                    source: Box::new(e),
                })?;
                done.extend(r);
            }
            if !ex.idle() {
                return Ok(ex.progress());
            }
            done
        }
    };

    let (observed, stats): (Vec<Observed>, Vec<Vec<CounterfactualStats>>) = results.into_iter().unzip();
    let stats: Vec<CounterfactualStats> = stats.into_iter().flatten().collect();
    let (rows, candidates) = outcomes(&items, &observed, config.probe, config.items.candidate_top_k)?;
    let report = InterventionReport::new(rows);
    let summary = report.summary();
    let reports = config.reports_dir();
    let csv_path = reports.join("intervention.csv");
    let summary_path = reports.join("summary.json");
    report.write_csv(&csv_path)?;
    write_summary(&summary_path, &summary, &candidates)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in &stats {
        w.serialize(s)?;
    }
    write_atomic(
        &reports.join("counterfactuals.csv"),
        &w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?,
    )?;
    write_manifest(config, "intervene")?;
    Ok(Progress::Done(InterventionRun {
        report,
        summary,
        counterfactuals: stats,
        candidates,
        csv_path,
        summary_path,
    }))
}

fn write_summary(path: &Path, summary: &ReportSummary, candidates: &[String]) -> Result<()> {
    let mut v = serde_json::to_value(summary)?;
    v["candidates"] = json!(candidates);
    write_atomic(path, &serde_json::to_vec_pretty(&v)?)
}

/// Recomputes the summary of an existing intervention report.
pub fn cmd_report(output_dir: &Path) -> Result<ReportSummary> {
    let csv_path = output_dir.join("reports").join("intervention.csv");
    if !csv_path.is_file() {
        return Err(Error::invalid(format!("no report at {}; run intervene first", csv_path.display())));
    }
    let summary = InterventionReport::read_csv(&csv_path)?.summary();
    let summary_path = output_dir.join("reports").join("summary.json");
    let candidates: Vec<String> = fs::read(&summary_path)
        .ok()
        .and_then(|b| serde_json::from_slice::<Value>(&b).ok())
        .and_then(|v| serde_json::from_value(v["candidates"].clone()).ok())
        .unwrap_or_default();
    write_summary(&summary_path, &summary, &candidates)?;
    Ok(summary)
}

/// Plain-text table of a summary, one comparison per line.
pub fn format_summary(summary: &ReportSummary) -> String {
    let p = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.3e}"));
    let mut out = format!(
        "{:<28} {:>5} {:<10} {:<12} {:>4} {:>9} {:>9} {:>10} {:>10}\n",
        "comparison", "layer", "partition", "readings", "n", "mean_a", "mean_b", "p_greater", "p_less"
    );
    for c in &summary.comparisons {
        let family = serde_json::to_value(c.family).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let readings = match c.reading_b {
            Some(b) => format!("{}-{}", c.reading_a, b),
            None => format!("{}-orig", c.reading_a),
        };
        out.push_str(&format!(
            "{:<28} {:>5} {:<10} {:<12} {:>4} {:>9.4} {:>9.4} {:>10} {:>10}\n",
            family,
            c.layer,
            c.partition,
            readings,
            c.n,
            c.mean_a,
            c.mean_b,
            p(c.p_greater),
            p(c.p_less)
        ));
    }
    out
}

/// Minimum-spanning-tree edges of a distance probe's predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedTree {
    pub forms: Vec<String>,
    /// 0-based undirected edges, each ordered `(low, high)`.
    pub edges: Vec<(usize, usize)>,
}

impl DecodedTree {
    /// One line per edge: 1-based indices and forms, tab-separated.
    pub fn to_listing(&self) -> String {
        let mut out = String::new();
        for &(a, b) in &self.edges {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", a + 1, self.forms[a], b + 1, self.forms[b]));
        }
        out
    }
}

pub fn cmd_decode_tree(embedding: &Path, probe: &Path) -> Result<DecodedTree> {
    let emb = EmbeddingMatrix::from_tensor_file(&TensorFile::read(embedding)?)?;
    let (probe, layer) = Probe::from_tensor_file(&TensorFile::read(probe)?)?;
    if probe.kind() != ProbeKind::Distance {
        return Err(Error::invalid("tree decoding needs a distance probe"));
    }
    if layer != emb.layer {
        return Err(Error::invalid(format!(
            "probe was trained on layer {layer}, embedding comes from layer {}",
            emb.layer
        )));
    }
    let dist = predict_distances(&probe, &emb)?;
    let edges = if emb.len() < 2 { Vec::new() } else { mst_decode(&dist)? };
    Ok(DecodedTree {
        forms: emb.word_forms,
        edges,
    })
}

/// Writes the corpus as CoNLL (both readings per item) plus a JSON sidecar.
/// Returns the two paths.
pub fn cmd_gen_corpus(
    corpus: &str,
    out_dir: &Path,
    npz_extra: Option<&Path>,
    grammar: Option<&SyntheticGrammar>,
    toy: &ItemsConfig,
) -> Result<(PathBuf, PathBuf)> {
    let (name, items) = match corpus_choice(corpus)? {
        CorpusChoice::Corpus(id) => (id.name().to_string(), corpora::generate(id, npz_extra)?),
        CorpusChoice::Toy => {
            let g = grammar.cloned().unwrap_or_else(SyntheticGrammar::coordination);
            (TOY_CORPUS.to_string(), g.ambiguous_items(toy.toy_count, toy.toy_seed))
        }
    };
    let id = items.first().map_or(CorpusId::Coordination, |i| i.corpus);
    let conll = out_dir.join(format!("{name}.conll"));
    let sidecar = out_dir.join(format!("{name}.json"));
    write_atomic(&conll, corpora::export_conll(&items).as_bytes())?;
    write_atomic(&sidecar, &serde_json::to_vec_pretty(&corpora::export_sidecar(id, &items))?)?;
    Ok((conll, sidecar))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyRun {
    pub checkpoint: PathBuf,
    pub losses: Vec<f64>,
    pub control_accuracy: f64,
    pub params: usize,
}

/// Trains a toy model on `grammar` and saves the checkpoint.
pub fn cmd_train_toy(
    grammar: &SyntheticGrammar,
    model_seed: u64,
    train: &ToyTrainConfig,
    checkpoint: &Path,
) -> Result<ToyRun> {
    grammar.validate()?;
    let model = LayerSplitModel::new(ToyModelConfig::for_grammar(grammar, model_seed))?;
    let trained = train_toy(model, grammar, train)?;
    let accuracy = control_accuracy(&trained.model, grammar, 500, train.seed ^ 0xc0)?;
    trained.model.save(checkpoint)?;
    Ok(ToyRun {
        checkpoint: checkpoint.to_path_buf(),
        losses: trained.losses,
        control_accuracy: accuracy,
        params: trained.model.param_count(),
    })
}

/// `git describe` of the working directory, when available.
pub fn git_describe() -> Option<String> {
    let out = Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

/// Records the command's provenance in `manifest.json`, keyed by command.
pub fn write_manifest(config: &ExperimentConfig, command: &str) -> Result<()> {
    let path = config.output_dir.join("manifest.json");
    let mut manifest: serde_json::Map<String, Value> = fs::read(&path)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or_default();
    manifest.insert(
        command.to_string(),
        json!({
            "git_describe": git_describe(),
            "seeds": {
                "experiment": config.seed,
                "probe_layers": config.layers.iter().map(|&k| config.seed.wrapping_add(k as u64)).collect::<Vec<_>>(),
                "counterfactual": config.counterfactual.seed,
            },
            "config_hash": config.hash(),
            "config": config,
        }),
    );
    write_atomic(&path, &serde_json::to_vec_pretty(&Value::Object(manifest))?)
}
