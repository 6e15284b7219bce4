use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::wilcoxon::wilcoxon_one_sided;
use crate::corpora::Reading;
use crate::error::Result;
use crate::tensor_file::write_atomic;

/// Partition probability for one sentence, layer and counterfactual reading,
/// next to the same partition's probability under the original embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionOutcome {
    pub sentence_id: usize,
    pub layer: usize,
    pub probe: String,
    /// Reading whose parse generated the counterfactual.
    pub reading: Reading,
    pub partition: String,
    /// Reading the partition's words indicate.
    pub partition_reading: Reading,
    pub baseline: f64,
    pub counterfactual: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InterventionReport {
    pub outcomes: Vec<InterventionOutcome>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparisonFamily {
    /// Counterfactual minus original, per reading.
    CounterfactualVsOriginal,
    /// Counterfactual of the partition's own reading minus that of another.
    ReadingVsReading,
}

/// One paired comparison of the summary. `mean_a - mean_b` is the mean paired
/// difference; `p_greater` tests `a > b`, `p_less` tests `a < b`. A p-value is
/// absent when every paired difference is zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryComparison {
    pub family: ComparisonFamily,
    pub layer: usize,
    pub partition: String,
    pub reading_a: Reading,
    /// `None` for the original embedding.
    pub reading_b: Option<Reading>,
    pub n: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub p_greater: Option<f64>,
    pub p_less: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub probe: Vec<String>,
    pub layers: Vec<usize>,
    pub sentences: usize,
    pub comparisons: Vec<SummaryComparison>,
}

impl ReportSummary {
    pub fn find(
        &self,
        family: ComparisonFamily,
        layer: usize,
        partition: &str,
        reading_a: Reading,
        reading_b: Option<Reading>,
    ) -> Option<&SummaryComparison> {
        self.comparisons.iter().find(|c| {
            c.family == family
                && c.layer == layer
                && c.partition == partition
                && c.reading_a == reading_a
                && c.reading_b == reading_b
        })
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn paired(a: &[f64], b: &[f64]) -> (Option<f64>, Option<f64>) {
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let neg: Vec<f64> = diffs.iter().map(|d| -d).collect();
    (
        wilcoxon_one_sided(&diffs).ok().map(|r| r.p_value),
        wilcoxon_one_sided(&neg).ok().map(|r| r.p_value),
    )
}

impl InterventionReport {
    pub fn new(outcomes: Vec<InterventionOutcome>) -> Self {
        InterventionReport { outcomes }
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for o in &self.outcomes {
            w.serialize(o)?;
        }
        Ok(w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?)
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        let outcomes = r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(InterventionReport { outcomes })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read(path)?)
    }

    /// Per-layer means and both comparison families, Wilcoxon-tested.
    pub fn summary(&self) -> ReportSummary {
        // (layer, partition) -> reading -> sentence -> (baseline, counterfactual)
        type Cell = BTreeMap<Reading, BTreeMap<usize, (f64, f64)>>;
        let mut cells: BTreeMap<(usize, String), (Reading, Cell)> = BTreeMap::new();
        let mut probes: Vec<String> = Vec::new();
        let mut sentences = std::collections::BTreeSet::new();
        for o in &self.outcomes {
            if !probes.contains(&o.probe) {
                probes.push(o.probe.clone());
            }
            sentences.insert(o.sentence_id);
            cells
                .entry((o.layer, o.partition.clone()))
                .or_insert_with(|| (o.partition_reading, BTreeMap::new()))
                .1
                .entry(o.reading)
                .or_default()
                .insert(o.sentence_id, (o.baseline, o.counterfactual));
        }

        let mut comparisons = Vec::new();
        let mut layers: Vec<usize> = cells.keys().map(|(l, _)| *l).collect();
        layers.dedup();
        for ((layer, partition), (own_reading, by_reading)) in &cells {
            for (&reading, rows) in by_reading {
                let cf: Vec<f64> = rows.values().map(|r| r.1).collect();
                let base: Vec<f64> = rows.values().map(|r| r.0).collect();
                let (p_greater, p_less) = paired(&cf, &base);
                comparisons.push(SummaryComparison {
                    family: ComparisonFamily::CounterfactualVsOriginal,
                    layer: *layer,
                    partition: partition.clone(),
                    reading_a: reading,
                    reading_b: None,
                    n: cf.len(),
                    mean_a: mean(&cf),
                    mean_b: mean(&base),
                    p_greater,
                    p_less,
                });
            }
            let Some(own) = by_reading.get(own_reading) else {
                continue;
            };
            for (&other, other_rows) in by_reading {
                if other == *own_reading {
                    continue;
                }
                let (a, b): (Vec<f64>, Vec<f64>) = own
                    .iter()
                    .filter_map(|(s, r)| other_rows.get(s).map(|o| (r.1, o.1)))
                    .unzip();
                let (p_greater, p_less) = paired(&a, &b);
                comparisons.push(SummaryComparison {
                    family: ComparisonFamily::ReadingVsReading,
                    layer: *layer,
                    partition: partition.clone(),
                    reading_a: *own_reading,
                    reading_b: Some(other),
                    n: a.len(),
                    mean_a: mean(&a),
                    mean_b: mean(&b),
                    p_greater,
                    p_less,
                });
            }
        }
        ReportSummary {
            probe: probes,
            layers,
            sentences: sentences.len(),
            comparisons,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(s: usize, reading: Reading, partition: &str, own: Reading, base: f64, cf: f64) -> InterventionOutcome {
        InterventionOutcome {
            sentence_id: s,
            layer: 2,
            probe: "dist3".into(),
            reading,
            partition: partition.into(),
            partition_reading: own,
            baseline: base,
            counterfactual: cf,
        }
    }

    fn report() -> InterventionReport {
        let mut rows = Vec::new();
        for s in 0..8 {
            let base = 0.4 + 0.01 * s as f64;
            rows.push(outcome(s, Reading::Plur, "plural", Reading::Plur, base, base + 0.1 + 0.01 * s as f64));
            rows.push(outcome(s, Reading::Sing, "plural", Reading::Plur, base, base - 0.05 - 0.01 * s as f64));
        }
        InterventionReport::new(rows)
    }

    #[test]
    fn csv_round_trip() {
        let r = report();
        let back = InterventionReport::from_csv(&r.to_csv().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn summary_contains_both_families() {
        let s = report().summary();
        let up = s
            .find(ComparisonFamily::CounterfactualVsOriginal, 2, "plural", Reading::Plur, None)
            .unwrap();
        assert_eq!(up.n, 8);
        assert_eq!(up.p_greater, Some(1.0 / 256.0));
        let contrast = s
            .find(ComparisonFamily::ReadingVsReading, 2, "plural", Reading::Plur, Some(Reading::Sing))
            .unwrap();
        assert_eq!(contrast.p_greater, Some(1.0 / 256.0));
        assert!(s.comparisons.iter().all(|c| c.p_greater.is_none_or(|p| (0.0..=1.0).contains(&p))));
        assert_eq!(s.layers, vec![2]);
        assert_eq!(s.sentences, 8);
    }
}
