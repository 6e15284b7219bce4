//! Dependency trees, CoNLL ingestion and the tree metrics probes are trained on.
//!
//! Token indices are 1-based as in CoNLL files, with head 0 marking the root.
//! Everything that leaves this module as a matrix or edge list uses 0-based
//! word positions instead.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub index: usize,
    pub form: String,
    pub head: usize,
}

/// A validated dependency tree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepParse {
    tokens: Vec<Token>,
}

/// Pairwise tree distances and per-word depths of one parse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeMetrics {
    pub dist: Array2<usize>,
    pub depth: Vec<usize>,
}

impl TreeMetrics {
    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    /// Position of the word with depth zero.
    pub fn root(&self) -> usize {
        self.depth.iter().position(|&d| d == 0).unwrap_or(0)
    }
}

impl DepParse {
    /// Builds a parse, checking that the heads form a single rooted tree.
    ///
    /// `sentence` is only used to label structural errors.
    pub fn new(tokens: Vec<Token>, sentence: usize) -> Result<Self> {
        let structure = |message: String| Error::Structure { sentence, message };
        let n = tokens.len();
        if n == 0 {
            return Err(structure("empty sentence".into()));
        }
        for (pos, tok) in tokens.iter().enumerate() {
            if tok.index != pos + 1 {
                return Err(structure(format!(
                    "token {} found at position {}",
                    tok.index,
                    pos + 1
                )));
            }
            if tok.head > n {
                return Err(structure(format!(
                    "token {} has head {} beyond sentence length {}",
                    tok.index, tok.head, n
                )));
            }
            if tok.head == tok.index {
                return Err(structure(format!("token {} is its own head", tok.index)));
            }
        }
        let roots: Vec<usize> = tokens
            .iter()
            .filter(|t| t.head == 0)
            .map(|t| t.index)
            .collect();
        if roots.len() != 1 {
            return Err(structure(format!(
                "expected exactly one root, found {} ({:?})",
                roots.len(),
                roots
            )));
        }
        // Every head chain must reach the root within n steps.
        for tok in &tokens {
            let mut cur = tok.index;
            let mut steps = 0;
            while cur != 0 {
                cur = tokens[cur - 1].head;
                steps += 1;
                if steps > n {
                    return Err(structure(format!(
                        "cycle through token {} in head assignment",
                        tok.index
                    )));
                }
            }
        }
        Ok(DepParse { tokens })
    }

    /// Builds a parse from word forms and 1-based heads (0 = root).
    pub fn from_heads<S: AsRef<str>>(forms: &[S], heads: &[usize]) -> Result<Self> {
        if forms.len() != heads.len() {
            return Err(Error::Dimension {
                expected: forms.len(),
                actual: heads.len(),
            });
        }
        let tokens = forms
            .iter()
            .zip(heads)
            .enumerate()
            .map(|(i, (form, &head))| Token {
                index: i + 1,
                form: form.as_ref().to_string(),
                head,
            })
            .collect();
        DepParse::new(tokens, 1)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn forms(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.form.clone()).collect()
    }

    /// 1-based heads, 0 for the root.
    pub fn heads(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.head).collect()
    }

    /// 0-based position of the root word.
    pub fn root(&self) -> usize {
        self.tokens
            .iter()
            .position(|t| t.head == 0)
            .expect("validated parse has a root")
    }

    /// Undirected edges as 0-based `(low, high)` pairs.
    pub fn edges(&self) -> BTreeSet<(usize, usize)> {
        self.tokens
            .iter()
            .filter(|t| t.head != 0)
            .map(|t| {
                let (a, b) = (t.index - 1, t.head - 1);
                (a.min(b), a.max(b))
            })
            .collect()
    }
}

/// Computes pairwise path lengths and depths.
///
/// Distances go through the lowest common ancestor:
/// `dist(i, j) = depth(i) + depth(j) - 2 depth(lca(i, j))`.
pub fn tree_metrics(parse: &DepParse) -> TreeMetrics {
    let n = parse.len();
    let heads = parse.heads();
    // ancestors[i] lists i, head(i), ..., root as 0-based positions.
    let ancestors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut chain = vec![i];
            let mut cur = heads[i];
            while cur != 0 {
                chain.push(cur - 1);
                cur = heads[cur - 1];
            }
            chain
        })
        .collect();
    let depth: Vec<usize> = ancestors.iter().map(|c| c.len() - 1).collect();

    let mut dist = Array2::<usize>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let (ci, cj) = (&ancestors[i], &ancestors[j]);
            // Walk both chains from the root end while they agree.
            let common = ci
                .iter()
                .rev()
                .zip(cj.iter().rev())
                .take_while(|(a, b)| a == b)
                .count();
            let lca_depth = common - 1;
            let d = depth[i] + depth[j] - 2 * lca_depth;
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }
    TreeMetrics { dist, depth }
}

/// A parse together with the `#` comment lines that preceded it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotatedParse {
    pub comments: Vec<String>,
    pub parse: DepParse,
}

impl AnnotatedParse {
    /// Looks up a `# key = value` comment.
    pub fn attribute(&self, key: &str) -> Option<&str> {
        self.comments.iter().find_map(|c| {
            let (k, v) = c.split_once('=')?;
            (k.trim() == key).then(|| v.trim())
        })
    }
}

/// Reads CoNLL-X text: index, form and head in columns 1, 2 and 7.
pub fn parse_conll(text: &str) -> Result<Vec<DepParse>> {
    Ok(parse_conll_annotated(text)?
        .into_iter()
        .map(|a| a.parse)
        .collect())
}

/// Like [`parse_conll`], but keeps `#` comments attached to each sentence.
pub fn parse_conll_annotated(text: &str) -> Result<Vec<AnnotatedParse>> {
    let mut out = Vec::new();
    let mut tokens: Vec<Token> = Vec::new();
    let mut comments: Vec<String> = Vec::new();

    let flush = |tokens: &mut Vec<Token>, comments: &mut Vec<String>, out: &mut Vec<AnnotatedParse>| {
        if tokens.is_empty() {
            comments.clear();
            return Ok(());
        }
        let parse = DepParse::new(std::mem::take(tokens), out.len() + 1)?;
        out.push(AnnotatedParse {
            comments: std::mem::take(comments),
            parse,
        });
        Ok::<(), Error>(())
    };

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut tokens, &mut comments, &mut out)?;
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            comments.push(comment.trim().to_string());
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let parse_err = |message: String| Error::Parse {
            line: lineno + 1,
            message,
        };
        if cols.len() < 7 {
            return Err(parse_err(format!(
                "expected at least 7 tab-separated columns, found {}",
                cols.len()
            )));
        }
        // CoNLL-U multiword ranges and empty nodes carry no head.
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let index: usize = cols[0]
            .parse()
            .map_err(|_| parse_err(format!("bad token index {:?}", cols[0])))?;
        let head: usize = cols[6]
            .parse()
            .map_err(|_| parse_err(format!("bad head {:?}", cols[6])))?;
        if index != tokens.len() + 1 {
            return Err(parse_err(format!(
                "token index {} out of sequence (expected {})",
                index,
                tokens.len() + 1
            )));
        }
        if cols[1].is_empty() {
            return Err(parse_err("empty word form".into()));
        }
        tokens.push(Token {
            index,
            form: cols[1].to_string(),
            head,
        });
    }
    flush(&mut tokens, &mut comments, &mut out)?;
    Ok(out)
}

/// Writes one sentence as a CoNLL-X block, terminated by a blank line.
pub fn write_conll_sentence(out: &mut String, parse: &DepParse) {
    for t in parse.tokens() {
        let _ = writeln!(out, "{}\t{}\t_\t_\t_\t_\t{}\t_\t_\t_", t.index, t.form, t.head);
    }
    out.push('\n');
}

/// Serializes parses in the layout [`parse_conll`] reads.
pub fn serialize_conll(parses: &[DepParse]) -> String {
    let mut out = String::new();
    for p in parses {
        write_conll_sentence(&mut out, p);
    }
    out
}

/// Random labelled trees for tests and desk-scale probe training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticTreebank {
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticTreebank {
    fn default() -> Self {
        SyntheticTreebank {
            vocab_size: 100,
            min_len: 2,
            max_len: 12,
            seed: 0,
        }
    }
}

impl SyntheticTreebank {
    pub fn generate(&self, count: usize) -> Vec<DepParse> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..count)
            .map(|_| {
                let n = rng.random_range(self.min_len.max(1)..=self.max_len.max(self.min_len.max(1)));
                random_tree(n, self.vocab_size.max(1), &mut rng)
            })
            .collect()
    }
}

/// Uniformly random labelled tree on `n` words (Prüfer decoding) with a
/// uniformly chosen root.
pub fn random_tree<R: Rng + ?Sized>(n: usize, vocab_size: usize, rng: &mut R) -> DepParse {
    assert!(n >= 1);
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    if n == 2 {
        adj[0].push(1);
        adj[1].push(0);
    } else if n > 2 {
        let prufer: Vec<usize> = (0..n - 2).map(|_| rng.random_range(0..n)).collect();
        let mut degree = vec![1usize; n];
        for &p in &prufer {
            degree[p] += 1;
        }
        for &p in &prufer {
            let leaf = (0..n).find(|&v| degree[v] == 1).expect("leaf exists");
            adj[leaf].push(p);
            adj[p].push(leaf);
            degree[leaf] -= 1;
            degree[p] -= 1;
        }
        let rest: Vec<usize> = (0..n).filter(|&v| degree[v] == 1).collect();
        adj[rest[0]].push(rest[1]);
        adj[rest[1]].push(rest[0]);
    }
    let root = rng.random_range(0..n);
    let mut heads = vec![0usize; n];
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([root]);
    seen[root] = true;
    while let Some(v) = queue.pop_front() {
        let mut next = adj[v].clone();
        next.shuffle(rng);
        for u in next {
            if !seen[u] {
                seen[u] = true;
                heads[u] = v + 1;
                queue.push_back(u);
            }
        }
    }
    let forms: Vec<String> = (0..n)
        .map(|_| format!("w{}", rng.random_range(0..vocab_size)))
        .collect();
    DepParse::from_heads(&forms, &heads).expect("generated tree is valid")
}
