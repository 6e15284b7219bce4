//! The four ambiguous-sentence evaluation corpora, each sentence carrying a
//! gold parse per reading and the output partitions that indicate a reading.
//!
//! Gold parses come from fixed head tables per template. Determiners and
//! adjectives attach to their noun, subjects and objects to their verb, and
//! the two readings of a template differ only in the ambiguous attachment.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::metrics::Partition;
use crate::treebank::{parse_conll_annotated, write_conll_sentence, DepParse};

pub const MASK: &str = "[MASK]";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Reading {
    Plur,
    Sing,
    Adv,
    Noun,
    Conj,
    NP2,
    VP,
}

impl Reading {
    pub fn name(self) -> &'static str {
        match self {
            Reading::Plur => "Plur",
            Reading::Sing => "Sing",
            Reading::Adv => "Adv",
            Reading::Noun => "Noun",
            Reading::Conj => "Conj",
            Reading::NP2 => "NP2",
            Reading::VP => "VP",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            Reading::Plur,
            Reading::Sing,
            Reading::Adv,
            Reading::Noun,
            Reading::Conj,
            Reading::NP2,
            Reading::VP,
        ]
        .into_iter()
        .find(|r| r.name().eq_ignore_ascii_case(s))
        .ok_or_else(|| Error::invalid(format!("unknown reading {s:?}")))
    }
}

impl std::fmt::Display for Reading {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusId {
    Coordination,
    Npz,
    Rc,
    Npvp,
}

impl CorpusId {
    pub const ALL: [CorpusId; 4] = [CorpusId::Coordination, CorpusId::Npz, CorpusId::Rc, CorpusId::Npvp];

    pub fn name(self) -> &'static str {
        match self {
            CorpusId::Coordination => "coordination",
            CorpusId::Npz => "npz",
            CorpusId::Rc => "rc",
            CorpusId::Npvp => "npvp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        CorpusId::ALL
            .into_iter()
            .find(|c| c.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown corpus {s:?} (expected coordination, npz, rc or npvp)")))
    }

    /// Whether the corpus targets a masked-word model (otherwise QA).
    pub fn is_mask(self) -> bool {
        matches!(self, CorpusId::Coordination | CorpusId::Npz)
    }

    pub fn readings(self) -> [Reading; 2] {
        match self {
            CorpusId::Coordination => [Reading::Plur, Reading::Sing],
            CorpusId::Npz => [Reading::Adv, Reading::Noun],
            CorpusId::Rc => [Reading::Conj, Reading::NP2],
            CorpusId::Npvp => [Reading::VP, Reading::NP2],
        }
    }
}

/// Slot fillers and exclusion rules of a generation template.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub id: CorpusId,
    pub template: String,
    pub slots: Vec<(String, Vec<String>)>,
    pub exclusions: Vec<String>,
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|s| s.to_string()).collect()
}

impl CorpusSpec {
    pub fn for_corpus(id: CorpusId) -> Self {
        let (template, slots, exclusions): (&str, Vec<(&str, &[&str])>, Vec<&str>) = match id {
            CorpusId::Coordination => (
                "The NN1 VERB the NN2 and the NN3 [MASK] ADJ.",
                vec![
                    ("NN1", &["man", "woman", "child"]),
                    ("VERB", &["saw", "feared", "heard"]),
                    ("NN2", &["boy", "building", "cat"]),
                    ("NN3", &["dog", "girl", "truck"]),
                    ("ADJ", &["tall", "falling", "orange"]),
                ],
                vec![],
            ),
            CorpusId::Npz => (
                "When the NN1 VERB1 the NN2 [MASK] VERB2.",
                vec![
                    ("NN1", &["dog", "child"]),
                    ("NN2", &["vet", "boy", "girl"]),
                    ("VERB1", &["scratched", "bit"]),
                    ("VERB2", &["ran", "screamed", "smiled"]),
                ],
                vec![],
            ),
            CorpusId::Rc => (
                "The ADJ1 NN1 and ADJ2 NN2 who were ADJ3 VERB the NN3. Who was ADJ3?",
                vec![
                    ("ADJ1", &["smart", "rich", "tall", "poor"]),
                    ("NN1", &["men", "women"]),
                    ("ADJ2", &["smart", "rich", "tall", "poor"]),
                    ("NN2", &["men", "women"]),
                    ("ADJ3", &["corrupt", "desperate"]),
                    ("VERB", &["bribed", "paid"]),
                    ("NN3", &["politician", "judge"]),
                ],
                vec!["NN1 = NN2", "ADJ1 = ADJ2"],
            ),
            CorpusId::Npvp => (
                "The NN1 VERB the NN2 with the NN3. Who had the NN3?",
                vec![
                    ("NN1", &["man", "woman", "child"]),
                    ("NN2", &["man", "woman", "boy", "girl", "stranger", "dog"]),
                    (
                        "VERB-NN3",
                        &[
                            "saw-telescope",
                            "poked-stick",
                            "thanked-letter",
                            "fought-knife",
                            "dressed-hat",
                            "indicated-ruler",
                            "kicked-shoe",
                            "welcomed-gift",
                            "buried-shovel",
                        ],
                    ),
                ],
                vec!["NN1 = NN2"],
            ),
        };
        CorpusSpec {
            id,
            template: template.to_string(),
            slots: slots.into_iter().map(|(k, v)| (k.to_string(), words(v))).collect(),
            exclusions: exclusions.into_iter().map(String::from).collect(),
        }
    }

    pub fn slot(&self, name: &str) -> &[String] {
        self.slots
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_slice())
            .unwrap_or(&[])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadingParse {
    pub reading: Reading,
    pub parse: DepParse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmbiguousItem {
    pub id: usize,
    pub corpus: CorpusId,
    pub sentence: Vec<String>,
    pub question: Option<Vec<String>>,
    pub parses: [ReadingParse; 2],
    pub partitions: Vec<Partition>,
    /// Fixed candidate words for masked-word corpora; `None` when the set is
    /// built from model predictions.
    pub candidates: Option<Vec<String>>,
    pub mask_position: Option<usize>,
    /// Set for items read from a user-supplied file.
    #[serde(default)]
    pub curated: bool,
}

impl AmbiguousItem {
    pub fn parse_for(&self, reading: Reading) -> Option<&DepParse> {
        self.parses.iter().find(|p| p.reading == reading).map(|p| &p.parse)
    }

    pub fn text(&self) -> String {
        render(&self.sentence)
    }

    pub fn question_text(&self) -> Option<String> {
        self.question.as_deref().map(render)
    }
}

fn render(tokens: &[String]) -> String {
    let mut out = String::new();
    for t in tokens {
        if !out.is_empty() && !matches!(t.as_str(), "." | "?" | ",") {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

fn item(
    id: usize,
    corpus: CorpusId,
    sentence: Vec<String>,
    question: Option<Vec<String>>,
    heads: [&[usize]; 2],
    partitions: Vec<Partition>,
    candidates: Option<Vec<String>>,
) -> AmbiguousItem {
    let [ra, rb] = corpus.readings();
    let parse = |h: &[usize]| DepParse::from_heads(&sentence, h).expect("template head table is a tree");
    let parses = [
        ReadingParse {
            reading: ra,
            parse: parse(heads[0]),
        },
        ReadingParse {
            reading: rb,
            parse: parse(heads[1]),
        },
    ];
    let mask_position = sentence.iter().position(|w| w == MASK);
    AmbiguousItem {
        id,
        corpus,
        sentence,
        question,
        parses,
        partitions,
        candidates,
        mask_position,
        curated: false,
    }
}

pub const COORDINATION_CANDIDATES: [&str; 5] = ["was", "is", "were", "are", "as"];

/// Plural and singular verb partitions; `as` stays in the candidate set but
/// indicates neither reading.
pub fn coordination_partitions() -> Vec<Partition> {
    vec![
        Partition::words("plural", Reading::Plur, ["were", "are"]),
        Partition::words("singular", Reading::Sing, ["was", "is"]),
    ]
}

// The NN1 VERB the NN2 and the NN3 [MASK] ADJ .
pub const COORD_PLUR: [usize; 11] = [2, 3, 0, 5, 9, 8, 8, 5, 3, 9, 3];
pub const COORD_SING: [usize; 11] = [2, 3, 0, 5, 3, 9, 8, 9, 3, 9, 3];

pub fn gen_coordination() -> Vec<AmbiguousItem> {
    let spec = CorpusSpec::for_corpus(CorpusId::Coordination);
    let mut out = Vec::with_capacity(243);
    for nn1 in spec.slot("NN1") {
        for verb in spec.slot("VERB") {
            for nn2 in spec.slot("NN2") {
                for nn3 in spec.slot("NN3") {
                    for adj in spec.slot("ADJ") {
                        let sentence = words(&[
                            "The", nn1, verb, "the", nn2, "and", "the", nn3, MASK, adj, ".",
                        ]);
                        out.push(item(
                            out.len(),
                            CorpusId::Coordination,
                            sentence,
                            None,
                            [&COORD_PLUR, &COORD_SING],
                            coordination_partitions(),
                            Some(words(&COORDINATION_CANDIDATES)),
                        ));
                    }
                }
            }
        }
    }
    out
}

// When the NN1 VERB1 the NN2 [MASK] VERB2 .
pub const NPZ_ADV: [usize; 9] = [4, 3, 4, 8, 6, 8, 8, 0, 8];
pub const NPZ_NOUN: [usize; 9] = [4, 3, 4, 8, 6, 4, 8, 0, 8];

/// Adverbs recognised when partitioning NP/Z candidates; any word ending in
/// `-ly` also counts as an adverb.
pub const ADVERB_LEXICON: [&str; 12] = [
    "then", "soon", "again", "away", "back", "later", "too", "also", "still", "once", "now", "instead",
];

/// Splits a dynamically built NP/Z candidate set into adverb and noun sides.
pub fn npz_partitions(candidates: &[String]) -> Vec<Partition> {
    let is_adverb = |w: &str| {
        let lower = w.to_lowercase();
        lower.ends_with("ly") || ADVERB_LEXICON.contains(&lower.as_str())
    };
    let (adv, noun): (Vec<&String>, Vec<&String>) = candidates.iter().partition(|w| is_adverb(w));
    vec![
        Partition::words("adverb", Reading::Adv, adv.into_iter().cloned()),
        Partition::words("noun", Reading::Noun, noun.into_iter().cloned()),
    ]
}

/// The 36 generated NP/Z items, followed by curated items from `extra_file`
/// when given.
pub fn gen_npz(extra_file: Option<&Path>) -> Result<Vec<AmbiguousItem>> {
    let spec = CorpusSpec::for_corpus(CorpusId::Npz);
    let mut out = Vec::new();
    for nn1 in spec.slot("NN1") {
        for nn2 in spec.slot("NN2") {
            for verb1 in spec.slot("VERB1") {
                for verb2 in spec.slot("VERB2") {
                    let sentence = words(&["When", "the", nn1, verb1, "the", nn2, MASK, verb2, "."]);
                    out.push(item(
                        out.len(),
                        CorpusId::Npz,
                        sentence,
                        None,
                        [&NPZ_ADV, &NPZ_NOUN],
                        Vec::new(),
                        None,
                    ));
                }
            }
        }
    }
    if let Some(path) = extra_file {
        let text = std::fs::read_to_string(path)?;
        let first_id = out.len();
        out.extend(read_curated_npz(&text, first_id)?);
    }
    Ok(out)
}

/// Reads curated NP/Z items: CoNLL blocks annotated with `# item = <key>` and
/// `# reading = Adv|Noun`, two blocks per item over identical tokens.
pub fn read_curated_npz(text: &str, first_id: usize) -> Result<Vec<AmbiguousItem>> {
    let blocks = parse_conll_annotated(text)?;
    let mut groups: BTreeMap<String, Vec<(Reading, DepParse)>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for (i, block) in blocks.into_iter().enumerate() {
        let key = block
            .attribute("item")
            .map(str::to_string)
            .unwrap_or_else(|| (i / 2).to_string());
        let reading = block
            .attribute("reading")
            .ok_or_else(|| Error::format(format!("curated sentence {} lacks a '# reading =' line", i + 1)))
            .and_then(|r| Reading::parse(r).map_err(|e| Error::format(format!("curated sentence {}: {e}", i + 1))))?;
        if !matches!(reading, Reading::Adv | Reading::Noun) {
            return Err(Error::format(format!(
                "curated sentence {}: NP/Z readings are Adv and Noun, found {reading}",
                i + 1
            )));
        }
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push((reading, block.parse));
    }
    let mut out = Vec::with_capacity(order.len());
    for key in order {
        let mut group = groups.remove(&key).expect("key recorded");
        group.sort_by_key(|(r, _)| *r);
        let [(Reading::Adv, adv), (Reading::Noun, noun)] = <[(Reading, DepParse); 2]>::try_from(group)
            .map_err(|g| Error::format(format!("curated item {key}: expected 2 parses, found {}", g.len())))?
        else {
            return Err(Error::format(format!("curated item {key}: needs one Adv and one Noun parse")));
        };
        if adv.forms() != noun.forms() {
            return Err(Error::format(format!("curated item {key}: readings cover different tokens")));
        }
        let sentence = adv.forms();
        let mask_position = sentence.iter().position(|w| w == MASK);
        out.push(AmbiguousItem {
            id: first_id + out.len(),
            corpus: CorpusId::Npz,
            sentence,
            question: None,
            parses: [
                ReadingParse {
                    reading: Reading::Adv,
                    parse: adv,
                },
                ReadingParse {
                    reading: Reading::Noun,
                    parse: noun,
                },
            ],
            partitions: Vec::new(),
            candidates: None,
            mask_position,
            curated: true,
        });
    }
    Ok(out)
}

// The ADJ1 NN1 and ADJ2 NN2 who were ADJ3 VERB the NN3 .
const RC_CONJ: [usize; 13] = [3, 3, 10, 6, 6, 3, 9, 9, 3, 0, 12, 10, 10];
const RC_NP2: [usize; 13] = [3, 3, 10, 6, 6, 3, 9, 9, 6, 0, 12, 10, 10];

pub fn gen_rc() -> Vec<AmbiguousItem> {
    let spec = CorpusSpec::for_corpus(CorpusId::Rc);
    let mut out = Vec::with_capacity(192);
    for adj1 in spec.slot("ADJ1") {
        for nn1 in spec.slot("NN1") {
            for adj2 in spec.slot("ADJ2") {
                for nn2 in spec.slot("NN2") {
                    if nn1 == nn2 || adj1 == adj2 {
                        continue;
                    }
                    for adj3 in spec.slot("ADJ3") {
                        for verb in spec.slot("VERB") {
                            for nn3 in spec.slot("NN3") {
                                let sentence = words(&[
                                    "The", adj1, nn1, "and", adj2, nn2, "who", "were", adj3, verb, "the", nn3, ".",
                                ]);
                                let question = words(&["Who", "was", adj3, "?"]);
                                out.push(item(
                                    out.len(),
                                    CorpusId::Rc,
                                    sentence,
                                    Some(question),
                                    [&RC_CONJ, &RC_NP2],
                                    vec![
                                        Partition::positions("NP1", Reading::Conj, [0, 1, 2]),
                                        Partition::positions("NP2", Reading::NP2, [4, 5]),
                                    ],
                                    None,
                                ));
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

// The NN1 VERB the NN2 with the NN3 .
const NPVP_VP: [usize; 9] = [2, 3, 0, 5, 3, 3, 8, 6, 3];
const NPVP_NP2: [usize; 9] = [2, 3, 0, 5, 3, 5, 8, 6, 3];

pub fn gen_npvp() -> Vec<AmbiguousItem> {
    let spec = CorpusSpec::for_corpus(CorpusId::Npvp);
    let mut out = Vec::with_capacity(144);
    for nn1 in spec.slot("NN1") {
        for nn2 in spec.slot("NN2") {
            if nn1 == nn2 {
                continue;
            }
            for pair in spec.slot("VERB-NN3") {
                let (verb, nn3) = pair.split_once('-').expect("VERB-NN3 pair");
                let sentence = words(&["The", nn1, verb, "the", nn2, "with", "the", nn3, "."]);
                let question = words(&["Who", "had", "the", nn3, "?"]);
                out.push(item(
                    out.len(),
                    CorpusId::Npvp,
                    sentence,
                    Some(question),
                    [&NPVP_VP, &NPVP_NP2],
                    vec![
                        Partition::positions("NP1", Reading::VP, [0, 1]),
                        Partition::positions("NP2", Reading::NP2, [3, 4]),
                    ],
                    None,
                ));
            }
        }
    }
    out
}

pub fn generate(id: CorpusId, npz_extra: Option<&Path>) -> Result<Vec<AmbiguousItem>> {
    Ok(match id {
        CorpusId::Coordination => gen_coordination(),
        CorpusId::Npz => gen_npz(npz_extra)?,
        CorpusId::Rc => gen_rc(),
        CorpusId::Npvp => gen_npvp(),
    })
}

/// CoNLL text with every reading of every item, tagged by `# item`,
/// `# reading` and `# text` comments.
pub fn export_conll(items: &[AmbiguousItem]) -> String {
    let mut out = String::new();
    for it in items {
        for rp in &it.parses {
            out.push_str(&format!("# item = {}\n# reading = {}\n# text = {}\n", it.id, rp.reading, it.text()));
            write_conll_sentence(&mut out, &rp.parse);
        }
    }
    out
}

/// JSON sidecar with readings, partitions and questions per item.
pub fn export_sidecar(corpus: CorpusId, items: &[AmbiguousItem]) -> serde_json::Value {
    let entries: Vec<serde_json::Value> = items
        .iter()
        .map(|it| {
            json!({
                "id": it.id,
                "text": it.text(),
                "tokens": it.sentence,
                "question": it.question_text(),
                "question_tokens": it.question,
                "readings": it.parses.iter().map(|p| p.reading).collect::<Vec<_>>(),
                "partitions": it.partitions,
                "candidates": it.candidates,
                "mask_position": it.mask_position,
                "curated": it.curated,
            })
        })
        .collect();
    json!({
        "corpus": corpus,
        "spec": CorpusSpec::for_corpus(corpus),
        "items": entries,
    })
}
