//! Vocabulary, sentences, padded batches and the synthetic tree corpus.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Lowercased whitespace tokens.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(|w| w.to_lowercase()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocab {
    /// Frequency-ranked vocabulary of at most `cap` entries, reserved ids
    /// included. Ties are broken lexicographically.
    pub fn build<S: AsRef<str>>(lines: &[S], cap: usize) -> Result<Vocab> {
        if lines.is_empty() {
            return Err(invalid("cannot build a vocabulary from empty input"));
        }
        if cap < RESERVED.len() {
            return Err(invalid(format!("vocabulary cap must be at least {}", RESERVED.len())));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for line in lines {
            for w in tokenize(line.as_ref()) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> =
            counts.into_iter().filter(|(w, _)| !RESERVED.contains(&w.as_str())).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().take(cap - RESERVED.len()).map(|(w, _)| w));
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its id-ordered token list (reserved tokens
    /// first).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(invalid("token list must start with the reserved tokens"));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(invalid(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    /// `<s> w₁ … wₙ </s>`; fails on a line without tokens.
    pub fn encode(&self, line: &str) -> Result<Sentence> {
        let words = tokenize(line);
        if words.is_empty() {
            return Err(invalid("empty sentence"));
        }
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(BOS);
        ids.extend(words.iter().map(|w| self.id(w)));
        ids.push(EOS);
        Sentence::new(ids, None)
    }

    /// Space-joined tokens, skipping padding and sentence markers.
    pub fn decode(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect();
        words.join(" ")
    }
}

/// Token ids from `<s>` to `</s>`, optionally labelled with a tree depth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    ids: Vec<u32>,
    depth: Option<u32>,
}

impl Sentence {
    pub fn new(ids: Vec<u32>, depth: Option<u32>) -> Result<Self> {
        if ids.len() < 3 {
            return Err(invalid("a sentence needs at least one token between the markers"));
        }
        if ids[0] != BOS || ids[ids.len() - 1] != EOS {
            return Err(invalid("a sentence must start with <s> and end with </s>"));
        }
        if ids[1..ids.len() - 1].iter().any(|&i| i == PAD || i == BOS || i == EOS) {
            return Err(invalid("markers inside a sentence"));
        }
        Ok(Sentence { ids, depth })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn depth(&self) -> Option<u32> {
        self.depth
    }

    /// Number of predicted tokens (everything after `<s>`).
    pub fn predicted_tokens(&self) -> usize {
        self.ids.len() - 1
    }
}

/// Right-padded token matrix, one sentence per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    ids: Vec<u32>,
    lengths: Vec<usize>,
    max_len: usize,
}

impl Batch {
    pub fn new(sentences: &[&Sentence]) -> Self {
        Self::from_ids(&sentences.iter().map(|s| s.ids()).collect::<Vec<_>>(), 0)
    }

    /// Pads to the longest row, or to `pad_to` if that is longer.
    pub fn from_ids(rows: &[&[u32]], pad_to: usize) -> Self {
        let max_len = rows.iter().map(|r| r.len()).max().unwrap_or(0).max(pad_to);
        let mut ids = vec![PAD; rows.len() * max_len];
        for (i, r) in rows.iter().enumerate() {
            ids[i * max_len..i * max_len + r.len()].copy_from_slice(r);
        }
        Batch { ids, lengths: rows.iter().map(|r| r.len()).collect(), max_len }
    }

    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    #[inline]
    pub fn token(&self, row: usize, t: usize) -> u32 {
        self.ids[row * self.max_len + t]
    }

    pub fn row(&self, row: usize) -> &[u32] {
        &self.ids[row * self.max_len..row * self.max_len + self.lengths[row]]
    }
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Sentence order for one epoch: a seeded shuffle of `0..n`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rng(seed, epoch));
    order
}

/// Padded batches of one shuffled epoch. The last batch may be short.
pub fn batch_iter<'a>(
    corpus: &'a [Sentence],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Batch> + 'a> {
    if batch_size == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    let order = epoch_order(corpus.len(), seed, epoch);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    Ok(chunks.into_iter().map(move |idx| {
        let rows: Vec<&Sentence> = idx.iter().map(|&i| &corpus[i]).collect();
        Batch::new(&rows)
    }))
}

/// Shape and inventories of the synthetic phrase tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeCorpusConfig {
    pub branching: usize,
    pub max_depth: usize,
    pub base_phrases: Vec<String>,
    pub modifier_phrases: Vec<String>,
    pub sentences_per_node: usize,
    pub seed: u64,
}

impl Default for TreeCorpusConfig {
    fn default() -> Self {
        let base = [
            "the cat sleeps",
            "a dog barks",
            "the bird sings",
            "a child laughs",
            "the man walks",
            "a woman reads",
            "the horse runs",
            "a fish swims",
            "the baby cries",
            "a farmer works",
            "the teacher speaks",
            "a student writes",
            "the king rules",
            "a cook bakes",
            "the girl dances",
            "a boy jumps",
        ];
        let modifiers = [
            "in the garden",
            "near the river",
            "at night",
            "with a friend",
            "on the hill",
            "under the old tree",
            "after the rain",
            "by the small house",
            "during the long winter",
            "without any fear",
            "in the morning",
            "beside the quiet lake",
        ];
        TreeCorpusConfig {
            branching: 3,
            max_depth: 4,
            base_phrases: base.iter().map(|s| s.to_string()).collect(),
            modifier_phrases: modifiers.iter().map(|s| s.to_string()).collect(),
            sentences_per_node: 16,
            seed: 7,
        }
    }
}

/// One generated sentence with the depth of its tree node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeSentence {
    pub text: String,
    pub depth: u32,
}

/// Builds the phrase tree breadth-first. Sentence slot `s` of every node
/// shares one base phrase, and each child appends one modifier to its
/// parent's sentence, so length grows strictly with depth.
pub fn gen_tree_corpus(cfg: &TreeCorpusConfig) -> Result<Vec<TreeSentence>> {
    if cfg.max_depth < 1 || cfg.branching < 1 || cfg.sentences_per_node < 1 {
        return Err(invalid("tree corpus needs depth, branching and sentences per node of at least 1"));
    }
    let clean =
        |v: &[String]| -> Vec<String> { v.iter().map(|p| tokenize(p).join(" ")).filter(|p| !p.is_empty()).collect() };
    let bases = clean(&cfg.base_phrases);
    let mods = clean(&cfg.modifier_phrases);
    if bases.is_empty() || mods.is_empty() {
        return Err(invalid("phrase inventories must be nonempty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut base_order: Vec<usize> = (0..bases.len()).collect();
    base_order.shuffle(&mut rng);
    let slots: Vec<&str> = (0..cfg.sentences_per_node).map(|s| bases[base_order[s % bases.len()]].as_str()).collect();

    // Each node is the list of modifier indices on its root path.
    let mut level: Vec<Vec<usize>> = vec![Vec::new()];
    let mut out = Vec::new();
    for depth in 0..=cfg.max_depth {
        for path in &level {
            let suffix: Vec<&str> = path.iter().map(|&m| mods[m].as_str()).collect();
            for base in &slots {
                let mut text = String::from(*base);
                for s in &suffix {
                    text.push(' ');
                    text.push_str(s);
                }
                out.push(TreeSentence { text, depth: depth as u32 });
            }
        }
        if depth == cfg.max_depth {
            break;
        }
        let mut next = Vec::with_capacity(level.len() * cfg.branching);
        for path in &level {
            let mut fresh: Vec<usize> = (0..mods.len()).filter(|m| !path.contains(m)).collect();
            if fresh.len() < cfg.branching {
                fresh = (0..mods.len()).collect();
            }
            fresh.shuffle(&mut rng);
            for i in 0..cfg.branching {
                let mut child = path.clone();
                child.push(fresh[i % fresh.len()]);
                next.push(child);
            }
        }
        level = next;
    }
    Ok(out)
}
