use std::fs;
use std::path::Path;

use syntx::experiment::{
    cmd_decode_tree, cmd_gen_corpus, cmd_report, cmd_run_intervention, cmd_train_probe, ConfigBuilder,
    ExperimentConfig, ItemsConfig,
};
use syntx::metrics::ComparisonFamily;
use syntx::toy::{train_toy, LayerSplitModel, SyntheticGrammar, ToyModelConfig, ToyTrainConfig};
use syntx::treebank::parse_conll;

fn small_toy(path: &Path) {
    let g = SyntheticGrammar::coordination();
    let mut cfg = ToyModelConfig::for_grammar(&g, 3);
    cfg.dim = 16;
    cfg.heads = 2;
    cfg.ff = 32;
    cfg.layers = 2;
    let train = ToyTrainConfig {
        epochs: 1,
        sentences: 200,
        ..ToyTrainConfig::default()
    };
    let trained = train_toy(LayerSplitModel::new(cfg).unwrap(), &g, &train).unwrap();
    trained.model.save(path).unwrap();
}

fn config(dir: &Path) -> ExperimentConfig {
    ConfigBuilder::new()
        .toml(&format!(
            r#"
output_dir = "{out}"
layers = [1, 2]
probe = "dist"
corpus = "toy"

[model]
source = "toy"
checkpoint = "{ckpt}"

[items]
toy_count = 5

[probe_data]
grammar_train = 40
grammar_dev = 15

[probe_training]
rank = 8
max_epochs = 5

[counterfactual]
learning_rate = 0.01
patience = 10
max_steps = 100
"#,
            out = dir.join("run").display(),
            ckpt = dir.join("toy.bin").display(),
        ))
        .unwrap()
        .build()
        .unwrap()
}

#[test]
fn toy_pipeline_writes_probes_counterfactuals_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    small_toy(&dir.path().join("toy.bin"));
    let c = config(dir.path());

    let runs = cmd_train_probe(&c).unwrap().done().unwrap();
    assert_eq!(runs.len(), 2);
    for r in &runs {
        assert!(r.path.is_file());
        let metrics: serde_json::Value = serde_json::from_slice(&fs::read(c.probe_metrics_path(r.layer)).unwrap()).unwrap();
        for key in ["uuas", "spearman", "root_accuracy"] {
            assert!(metrics["dev"].get(key).is_some(), "{key}");
        }
        assert!(metrics["dev"]["uuas"].as_f64().unwrap() > 0.0);
    }
    let probe_bytes = fs::read(c.probe_path(2)).unwrap();
    cmd_train_probe(&c).unwrap();
    assert_eq!(fs::read(c.probe_path(2)).unwrap(), probe_bytes, "retraining is bitwise reproducible");

    let run = cmd_run_intervention(&c).unwrap().done().unwrap();
    // 5 sentences x 2 layers x 2 readings x 2 partitions
    assert_eq!(run.report.outcomes.len(), 5 * 2 * 2 * 2);
    assert_eq!(run.counterfactuals.len(), 5 * 2 * 2);
    assert!(run.counterfactuals.iter().all(|s| s.final_loss <= s.initial_loss));
    for family in [ComparisonFamily::CounterfactualVsOriginal, ComparisonFamily::ReadingVsReading] {
        assert!(run.summary.comparisons.iter().any(|c| c.family == family));
    }
    for comp in &run.summary.comparisons {
        for p in [comp.p_greater, comp.p_less].into_iter().flatten() {
            assert!((0.0..=1.0).contains(&p));
        }
    }
    let csv = fs::read(&run.csv_path).unwrap();
    let summary = fs::read(&run.summary_path).unwrap();
    cmd_run_intervention(&c).unwrap();
    assert_eq!(fs::read(&run.csv_path).unwrap(), csv, "intervention is bitwise reproducible");
    assert_eq!(cmd_report(&c.output_dir).unwrap(), run.summary);
    assert_eq!(fs::read(&run.summary_path).unwrap(), summary);

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(c.output_dir.join("manifest.json")).unwrap()).unwrap();
    for cmd in ["train-probe", "intervene"] {
        assert_eq!(manifest[cmd]["config_hash"], c.hash());
        assert!(manifest[cmd].get("git_describe").is_some());
        assert_eq!(manifest[cmd]["seeds"]["experiment"], 0);
    }

    let cf = c.counterfactuals_dir().join("item00000_L02_Plur.bin");
    let tree = cmd_decode_tree(&cf, &c.probe_path(2)).unwrap();
    assert_eq!(tree.edges.len(), tree.forms.len() - 1);
    assert!(cmd_decode_tree(&cf, &c.probe_path(1)).unwrap_err().is_validation());
}

#[test]
fn intervention_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    small_toy(&dir.path().join("toy.bin"));
    let mut c = config(dir.path());
    c.layers.clear();
    let e = cmd_run_intervention(&c).unwrap_err();
    assert!(e.is_validation() && e.to_string().contains("empty"), "{e}");
    let c = config(dir.path());
    let e = cmd_run_intervention(&c).unwrap_err();
    assert!(e.is_validation() && e.to_string().contains("train-probe"), "{e}");
    let mut c = config(dir.path());
    c.layers = vec![3];
    assert!(cmd_train_probe(&c).unwrap_err().to_string().contains("out of range"));
    let c = config(dir.path());
    let mut rc = c.clone();
    rc.corpus = "rc".into();
    rc.layers = vec![1];
    cmd_train_probe(&rc).unwrap();
    // RC words are outside the toy vocabulary.
    assert!(cmd_run_intervention(&rc).unwrap_err().is_validation());
}

#[test]
fn coordination_corpus_runs_on_the_toy_model() {
    let dir = tempfile::tempdir().unwrap();
    small_toy(&dir.path().join("toy.bin"));
    let mut c = config(dir.path());
    c.corpus = "coordination".into();
    c.items.limit = Some(3);
    c.layers = vec![1];
    cmd_train_probe(&c).unwrap();
    let run = cmd_run_intervention(&c).unwrap().done().unwrap();
    assert_eq!(run.report.outcomes.len(), 3 * 2 * 2);
    assert_eq!(run.candidates, ["was", "is", "were", "are", "as"]);
}

#[test]
fn corpus_export_round_trips_through_conll() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["coordination", "npz", "rc", "npvp", "toy"] {
        let (conll, sidecar) = cmd_gen_corpus(name, dir.path(), None, None, &ItemsConfig::default()).unwrap();
        let parses = parse_conll(&fs::read_to_string(conll).unwrap()).unwrap();
        let side: serde_json::Value = serde_json::from_slice(&fs::read(sidecar).unwrap()).unwrap();
        let items = side["items"].as_array().unwrap().len();
        assert_eq!(parses.len(), 2 * items, "{name}");
    }
    assert!(cmd_gen_corpus("ptb", dir.path(), None, None, &ItemsConfig::default()).unwrap_err().is_validation());
}
