//! Template grammar for masked number-agreement sentences.
//!
//! Template tokens naming a lexicon category are filled with a random word of
//! that category; everything else is copied literally. Each template carries
//! one gold parse per admissible reading, and each reading licenses its own
//! set of mask fillers.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpora::{AmbiguousItem, CorpusId, Reading, ReadingParse, COORD_PLUR, COORD_SING, MASK};
use crate::error::{Error, Result};
use crate::metrics::Partition;
use crate::treebank::DepParse;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateReading {
    pub reading: Reading,
    /// 1-based heads, 0 for the root.
    pub heads: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrammarTemplate {
    pub name: String,
    pub tokens: Vec<String>,
    pub readings: Vec<TemplateReading>,
    pub weight: f64,
}

impl GrammarTemplate {
    pub fn is_ambiguous(&self) -> bool {
        self.readings.len() > 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FillerSet {
    pub reading: Reading,
    pub words: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGrammar {
    pub lexicon: BTreeMap<String, Vec<String>>,
    pub templates: Vec<GrammarTemplate>,
    pub fillers: Vec<FillerSet>,
    /// Words scored at the mask when measuring partition probabilities.
    pub candidates: Vec<String>,
    pub partitions: Vec<Partition>,
}

/// One sampled sentence. `filler` is the training target, drawn from the
/// fillers of `reading`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrammarSentence {
    pub template: String,
    pub tokens: Vec<String>,
    pub parses: Vec<ReadingParse>,
    pub reading: Reading,
    pub filler: String,
}

impl GrammarSentence {
    pub fn is_ambiguous(&self) -> bool {
        self.parses.len() > 1
    }

    pub fn mask_position(&self) -> usize {
        self.tokens.iter().position(|t| t == MASK).expect("validated template has a mask")
    }
}

fn strings(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|s| s.to_string()).collect()
}

fn template(name: &str, tokens: &str, readings: &[(Reading, &[usize])], weight: f64) -> GrammarTemplate {
    GrammarTemplate {
        name: name.into(),
        tokens: tokens.split(' ').map(String::from).collect(),
        readings: readings
            .iter()
            .map(|(r, h)| TemplateReading {
                reading: *r,
                heads: h.to_vec(),
            })
            .collect(),
        weight,
    }
}

impl SyntheticGrammar {
    /// Coordination-shaped sentences. The `and` template is ambiguous between
    /// a plural (coordinated subject) and a singular (coordinated clause)
    /// reading; a trailing `CP` or `CS` adverb fixes the same sentence to one
    /// reading, and shorter templates teach plain agreement.
    pub fn coordination() -> Self {
        use Reading::{Plur, Sing};
        let lexicon = BTreeMap::from([
            (
                "N".to_string(),
                strings(&[
                    "man", "woman", "child", "boy", "building", "cat", "dog", "girl", "truck", "bird", "horse", "car",
                ]),
            ),
            ("V".to_string(), strings(&["saw", "feared", "heard", "liked", "found"])),
            ("CP".to_string(), strings(&["together", "jointly", "both", "collectively"])),
            ("CS".to_string(), strings(&["alone", "solo", "itself", "singly"])),
            (
                "A".to_string(),
                strings(&["tall", "falling", "orange", "small", "red", "happy"]),
            ),
        ]);
        let templates = vec![
            template(
                "ambiguous",
                "the N V the N and the N [MASK] A .",
                &[(Plur, &COORD_PLUR), (Sing, &COORD_SING)],
                0.3,
            ),
            template(
                "joint",
                "the N V the N and the N [MASK] A CP .",
                &[(Plur, &[2, 3, 0, 5, 9, 8, 8, 5, 3, 9, 9, 3])],
                0.2,
            ),
            template(
                "separate",
                "the N V the N and the N [MASK] A CS .",
                &[(Sing, &[2, 3, 0, 5, 3, 9, 8, 9, 3, 9, 9, 3])],
                0.2,
            ),
            template("pair", "the N and the N [MASK] A .", &[(Plur, &[2, 6, 5, 5, 2, 0, 6, 6])], 0.1),
            template("single", "the N [MASK] A .", &[(Sing, &[2, 3, 0, 3, 3])], 0.1),
            template(
                "embedded",
                "the N V that the N [MASK] A .",
                &[(Sing, &[2, 3, 0, 7, 6, 7, 3, 7, 3])],
                0.1,
            ),
        ];
        SyntheticGrammar {
            lexicon,
            templates,
            fillers: vec![
                FillerSet {
                    reading: Plur,
                    words: strings(&["were", "are"]),
                },
                FillerSet {
                    reading: Sing,
                    words: strings(&["was", "is"]),
                },
            ],
            candidates: strings(&crate::corpora::COORDINATION_CANDIDATES),
            partitions: crate::corpora::coordination_partitions(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: SyntheticGrammar = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn fillers_for(&self, reading: Reading) -> &[String] {
        self.fillers
            .iter()
            .find(|f| f.reading == reading)
            .map(|f| f.words.as_slice())
            .unwrap_or(&[])
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::invalid("grammar has no templates"));
        }
        for (cat, words) in &self.lexicon {
            if words.is_empty() {
                return Err(Error::invalid(format!("lexicon category {cat} is empty")));
            }
        }
        let candidates: BTreeSet<&String> = self.candidates.iter().collect();
        for f in &self.fillers {
            if f.words.is_empty() {
                return Err(Error::invalid(format!("no fillers for reading {}", f.reading)));
            }
            if let Some(w) = f.words.iter().find(|w| !candidates.contains(w)) {
                return Err(Error::invalid(format!("filler {w:?} is not a candidate")));
            }
        }
        for p in &self.partitions {
            if let crate::metrics::PartitionMembers::Words(ws) = &p.members {
                if let Some(w) = ws.iter().find(|w| !candidates.contains(w)) {
                    return Err(Error::invalid(format!("partition word {w:?} is not a candidate")));
                }
            } else {
                return Err(Error::invalid("grammar partitions must list words"));
            }
        }
        for t in &self.templates {
            let ctx = |m: &str| Error::invalid(format!("template {}: {m}", t.name));
            if !(t.weight > 0.0) || !t.weight.is_finite() {
                return Err(ctx("weight must be positive"));
            }
            if t.tokens.iter().filter(|w| *w == MASK).count() != 1 {
                return Err(ctx("needs exactly one [MASK]"));
            }
            if t.readings.is_empty() || t.readings.len() > 2 {
                return Err(ctx("needs one or two readings"));
            }
            for r in &t.readings {
                if r.heads.len() != t.tokens.len() {
                    return Err(ctx("head table length differs from the token count"));
                }
                DepParse::from_heads(&t.tokens, &r.heads).map_err(|e| ctx(&e.to_string()))?;
                if self.fillers_for(r.reading).is_empty() {
                    return Err(ctx(&format!("reading {} has no fillers", r.reading)));
                }
            }
            if let [a, b] = t.readings.as_slice() {
                if a.reading == b.reading {
                    return Err(ctx("ambiguous readings must differ"));
                }
                let fa: BTreeSet<_> = self.fillers_for(a.reading).iter().collect();
                if self.fillers_for(b.reading).iter().any(|w| fa.contains(w)) {
                    return Err(ctx("readings share a filler"));
                }
            }
        }
        Ok(())
    }

    /// Every word the grammar can produce, `[MASK]` first, the rest sorted.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut words: BTreeSet<String> = BTreeSet::new();
        for t in &self.templates {
            for tok in &t.tokens {
                if !self.lexicon.contains_key(tok) && tok != MASK {
                    words.insert(tok.clone());
                }
            }
        }
        words.extend(self.lexicon.values().flatten().cloned());
        words.extend(self.fillers.iter().flat_map(|f| f.words.iter().cloned()));
        words.extend(self.candidates.iter().cloned());
        std::iter::once(MASK.to_string()).chain(words).collect()
    }

    pub fn max_len(&self) -> usize {
        self.templates.iter().map(|t| t.tokens.len()).max().unwrap_or(0)
    }

    fn instantiate<R: Rng + ?Sized>(&self, t: &GrammarTemplate, rng: &mut R) -> GrammarSentence {
        let tokens: Vec<String> = t
            .tokens
            .iter()
            .map(|tok| match self.lexicon.get(tok) {
                Some(words) => words.choose(rng).expect("non-empty category").clone(),
                None => tok.clone(),
            })
            .collect();
        let parses: Vec<ReadingParse> = t
            .readings
            .iter()
            .map(|r| ReadingParse {
                reading: r.reading,
                parse: DepParse::from_heads(&tokens, &r.heads).expect("validated head table"),
            })
            .collect();
        let reading = parses.choose(rng).expect("at least one reading").reading;
        let filler = self.fillers_for(reading).choose(rng).expect("validated fillers").clone();
        GrammarSentence {
            template: t.name.clone(),
            tokens,
            parses,
            reading,
            filler,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> GrammarSentence {
        let total: f64 = self.templates.iter().map(|t| t.weight).sum();
        let mut u = rng.random::<f64>() * total;
        let mut chosen = self.templates.last().expect("non-empty grammar");
        for t in &self.templates {
            if u < t.weight {
                chosen = t;
                break;
            }
            u -= t.weight;
        }
        self.instantiate(chosen, rng)
    }

    pub fn sample_many(&self, count: usize, seed: u64) -> Vec<GrammarSentence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.sample(&mut rng)).collect()
    }

    /// Sentences from single-reading templates only.
    pub fn sample_unambiguous(&self, count: usize, seed: u64) -> Vec<GrammarSentence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool: Vec<&GrammarTemplate> = self.templates.iter().filter(|t| !t.is_ambiguous()).collect();
        if pool.is_empty() {
            return Vec::new();
        }
        (0..count)
            .map(|_| {
                let t = pool.choose_weighted(&mut rng, |t| t.weight).expect("positive weights");
                self.instantiate(t, &mut rng)
            })
            .collect()
    }

    /// Up to `count` distinct sentences from the ambiguous templates, as
    /// intervention items.
    pub fn ambiguous_items(&self, count: usize, seed: u64) -> Vec<AmbiguousItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool: Vec<&GrammarTemplate> = self.templates.iter().filter(|t| t.is_ambiguous()).collect();
        if pool.is_empty() {
            return Vec::new();
        }
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(count);
        let mut attempts = 0;
        while out.len() < count && attempts < count * 50 {
            attempts += 1;
            let t = pool.choose_weighted(&mut rng, |t| t.weight).expect("positive weights");
            let s = self.instantiate(t, &mut rng);
            if !seen.insert(s.tokens.clone()) {
                continue;
            }
            let parses: [ReadingParse; 2] = s.parses.try_into().expect("ambiguous template has two readings");
            let mask_position = s.tokens.iter().position(|w| w == MASK);
            out.push(AmbiguousItem {
                id: out.len(),
                corpus: CorpusId::Coordination,
                sentence: s.tokens,
                question: None,
                parses,
                partitions: self.partitions.clone(),
                candidates: Some(self.candidates.clone()),
                mask_position,
                curated: false,
            });
        }
        out
    }
}
