//! Synthetic corpora with a known, learnable utterance → tree mapping.
//!
//! Each non-terminal label has a fixed arity and a trigger word, so utterances
//! are Polish-notation renderings of their trees and decode uniquely. Leaves
//! are either vocabulary terminals (rendered through a surface word that
//! differs from the symbol) or entity names that appear verbatim in the
//! utterance and can only be produced by copying. Filler words may be mixed
//! in anywhere. The SLU style instead emits intent/slot trees.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::KvFile;
use crate::data::{convert_slu, Example, Tree};
use crate::error::{Error, Result};

const LABELS: &[&str] = &[
    "find", "filter", "count", "near", "sort", "union", "within", "argmax", "exclude", "group",
];
const SURFACES: &[&str] = &[
    "red", "blue", "green", "small", "large", "old", "new", "cheap", "north", "south", "east",
    "west", "river", "park", "school", "bank", "cafe", "hotel", "museum", "bridge", "tower",
    "market", "garden", "station",
];
const FILLERS: &[&str] = &["please", "the", "a", "me", "all", "of", "which", "some"];
const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ru", "te", "zan", "vor", "pel", "qui", "dro", "sha", "nek", "bil", "gu",
    "fex", "yo",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Style {
    /// Nested Polish-notation trees.
    Qa,
    /// Intent root with `(Slot word)` children.
    Slu,
}

impl FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qa" => Ok(Style::Qa),
            "slu" => Ok(Style::Slu),
            other => Err(Error::Unknown {
                kind: "synthetic style",
                name: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Style::Qa => "qa",
            Style::Slu => "slu",
        })
    }
}

/// Which half of the entity-name pool to draw from; the halves are disjoint,
/// so test entities never occur in training data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntityPool {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub sentences: usize,
    pub nonterminals: usize,
    pub terminals: usize,
    /// Maximum tree depth, counting the leaf level.
    pub max_depth: usize,
    /// Probability that a leaf is an entity name rather than a terminal.
    pub entity_rate: f64,
    pub entity_pool: EntityPool,
    /// Names available per pool half.
    pub entity_pool_size: usize,
    /// Probability of inserting a filler word before each token.
    pub filler_rate: f64,
    pub style: Style,
    /// Fixes labels, arities and surface words; tasks sharing it share
    /// non-terminal structure.
    pub grammar_seed: u64,
    /// Prefix of terminal symbols, e.g. `en` gives `en.red`.
    pub namespace: String,
    /// Offset into the surface-word list for this task's terminals.
    pub surface_offset: usize,
    pub task_id: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sentences: 50,
            nonterminals: 5,
            terminals: 12,
            max_depth: 3,
            entity_rate: 0.0,
            entity_pool: EntityPool::Train,
            entity_pool_size: 200,
            filler_rate: 0.0,
            style: Style::Qa,
            grammar_seed: 0,
            namespace: "en".into(),
            surface_offset: 0,
            task_id: "synth".into(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Reads `synth.*` keys (the prefix is optional).
    pub fn apply_kv(&mut self, kv: &KvFile) -> Result<()> {
        for (key, value) in kv.entries() {
            let k = key.strip_prefix("synth.").unwrap_or(key);
            let bad = |e: &dyn fmt::Display| Error::Config(format!("`{key} = {value}`: {e}"));
            match k {
                "sentences" => self.sentences = value.parse().map_err(|e| bad(&e))?,
                "nonterminals" => self.nonterminals = value.parse().map_err(|e| bad(&e))?,
                "terminals" => self.terminals = value.parse().map_err(|e| bad(&e))?,
                "max_depth" => self.max_depth = value.parse().map_err(|e| bad(&e))?,
                "entity_rate" => self.entity_rate = value.parse().map_err(|e| bad(&e))?,
                "entity_pool_size" => self.entity_pool_size = value.parse().map_err(|e| bad(&e))?,
                "filler_rate" => self.filler_rate = value.parse().map_err(|e| bad(&e))?,
                "grammar_seed" => self.grammar_seed = value.parse().map_err(|e| bad(&e))?,
                "surface_offset" => self.surface_offset = value.parse().map_err(|e| bad(&e))?,
                "seed" => self.seed = value.parse().map_err(|e| bad(&e))?,
                "namespace" => self.namespace = value.to_string(),
                "task" | "task_id" => self.task_id = value.to_string(),
                "style" => self.style = value.parse()?,
                "entity_pool" => {
                    self.entity_pool = match value {
                        "train" => EntityPool::Train,
                        "test" => EntityPool::Test,
                        other => return Err(bad(&format!("unknown pool `{other}`"))),
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.nonterminals == 0 || self.nonterminals > LABELS.len() {
            return Err(Error::Config(format!(
                "nonterminals must be in 1..={}",
                LABELS.len()
            )));
        }
        if self.terminals == 0 || self.surface_offset + self.terminals > SURFACES.len() {
            return Err(Error::Config(format!(
                "terminals + surface_offset must be in 1..={}",
                SURFACES.len()
            )));
        }
        if self.max_depth < 2 {
            return Err(Error::Config("max_depth must be at least 2".into()));
        }
        for (name, p) in [
            ("entity_rate", self.entity_rate),
            ("filler_rate", self.filler_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} not in [0, 1]")));
            }
        }
        if self.entity_rate > 0.0 && self.entity_pool_size == 0 {
            return Err(Error::Config("entity_pool_size must be positive".into()));
        }
        Ok(())
    }
}

/// The grammar implied by a config: labels with arities, and terminal
/// symbols with their surface words.
#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    pub labels: Vec<(String, usize)>,
    pub terminals: Vec<(String, String)>,
}

impl Grammar {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.grammar_seed);
        let mut names: Vec<&str> = LABELS.to_vec();
        names.shuffle(&mut rng);
        let labels = names[..cfg.nonterminals]
            .iter()
            .enumerate()
            // alternate binary and unary labels so every depth is reachable
            .map(|(i, l)| (l.to_string(), if i % 2 == 0 { 2 } else { 1 }))
            .collect();
        let terminals = SURFACES[cfg.surface_offset..cfg.surface_offset + cfg.terminals]
            .iter()
            .map(|w| (format!("{}.{w}", cfg.namespace), w.to_string()))
            .collect();
        Ok(Grammar { labels, terminals })
    }
}

/// `2 * size` distinct pronounceable names; the first half is the training
/// pool, the second the test pool.
pub fn entity_names(size: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_7a3e);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(2 * size);
    while out.len() < 2 * size {
        let n = rng.gen_range(2..=3);
        let name: String = (0..n)
            .map(|_| *SYLLABLES.choose(&mut rng).expect("non-empty"))
            .collect();
        if seen.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    grammar: &'a Grammar,
    entities: &'a [String],
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn leaf(&mut self, words: &mut Vec<String>) -> Tree {
        if self.rng.gen_bool(self.cfg.entity_rate) {
            let name = self.entities.choose(&mut self.rng).expect("pool").clone();
            words.push(name.clone());
            Tree::leaf(name)
        } else {
            let (sym, surface) = self
                .grammar
                .terminals
                .choose(&mut self.rng)
                .expect("terminals");
            words.push(surface.clone());
            Tree::leaf(sym.clone())
        }
    }

    /// A node whose subtree has depth at most `budget` (leaf level included).
    fn node(&mut self, budget: usize, words: &mut Vec<String>) -> Tree {
        let (label, arity) = self
            .grammar
            .labels
            .choose(&mut self.rng)
            .expect("labels")
            .clone();
        words.push(label.clone());
        let children = (0..arity)
            .map(|_| {
                if budget > 2 && self.rng.gen_bool(0.4) {
                    self.node(budget - 1, words)
                } else {
                    self.leaf(words)
                }
            })
            .collect();
        Tree::node(label, children)
    }

    fn with_fillers(&mut self, words: Vec<String>) -> Vec<String> {
        let mut out = Vec::with_capacity(words.len() * 2);
        for w in words {
            if self.cfg.filler_rate > 0.0 && self.rng.gen_bool(self.cfg.filler_rate) {
                out.push(FILLERS.choose(&mut self.rng).expect("fillers").to_string());
            }
            out.push(w);
        }
        out
    }

    fn qa(&mut self) -> Result<Example> {
        let mut words = Vec::new();
        let tree = self.node(self.cfg.max_depth, &mut words);
        let tokens = self.with_fillers(words);
        let raw = format!("{}\t{}", tokens.join(" "), tree.linearize());
        Example::new(tokens, tree, self.cfg.task_id.clone(), raw)
    }

    fn slu(&mut self) -> Result<Example> {
        let intent = self
            .grammar
            .labels
            .choose(&mut self.rng)
            .expect("labels")
            .0
            .clone();
        let slots: Vec<String> = self
            .grammar
            .labels
            .iter()
            .map(|(l, _)| format!("{l}_slot"))
            .collect();
        let mut tagged: Vec<(String, Option<String>)> = vec![(intent.clone(), None)];
        for _ in 0..self.rng.gen_range(1..=3) {
            if self.rng.gen_bool(0.5) {
                let f = FILLERS.choose(&mut self.rng).expect("fillers");
                tagged.push((f.to_string(), None));
            }
            let slot = slots.choose(&mut self.rng).expect("slots").clone();
            let word = if self.rng.gen_bool(self.cfg.entity_rate) {
                self.entities.choose(&mut self.rng).expect("pool").clone()
            } else {
                self.grammar
                    .terminals
                    .choose(&mut self.rng)
                    .expect("terminals")
                    .1
                    .clone()
            };
            tagged.push((word, Some(slot)));
        }
        let tree = convert_slu(&intent, &tagged)?;
        let tokens: Vec<String> = tagged.into_iter().map(|(w, _)| w).collect();
        let raw = format!("{}\t{}", tokens.join(" "), tree.linearize());
        Example::new(tokens, tree, self.cfg.task_id.clone(), raw)
    }
}

/// Generates `cfg.sentences` examples. Deterministic in `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<Example>> {
    let grammar = Grammar::new(cfg)?;
    let names = if cfg.entity_rate > 0.0 {
        entity_names(cfg.entity_pool_size)
    } else {
        Vec::new()
    };
    let entities = match cfg.entity_pool {
        EntityPool::Train => &names[..names.len() / 2],
        EntityPool::Test => &names[names.len() / 2..],
    };
    let mut g = Generator {
        cfg,
        grammar: &grammar,
        entities,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    (0..cfg.sentences)
        .map(|_| match cfg.style {
            Style::Qa => g.qa(),
            Style::Slu => g.slu(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_vocab;

    #[test]
    fn default_corpus_matches_requested_shape() {
        let exs = generate(&SynthConfig::default()).unwrap();
        assert_eq!(exs.len(), 50);
        let v = build_vocab(&exs, 1);
        assert!(v.output.nonterminals.len() <= 5);
        assert!(v.output.terminals.len() <= 12);
        assert!(exs.iter().all(|e| e.gold.depth() <= 3));
        assert_eq!(exs, generate(&SynthConfig::default()).unwrap());
    }

    #[test]
    fn entity_pools_are_disjoint_and_copyable() {
        let base = SynthConfig {
            entity_rate: 0.5,
            sentences: 100,
            ..SynthConfig::default()
        };
        let train = generate(&base).unwrap();
        let test = generate(&SynthConfig {
            entity_pool: EntityPool::Test,
            seed: 1,
            ..base
        })
        .unwrap();
        let train_leaves: BTreeSet<&str> = train.iter().flat_map(|e| e.gold.leaves()).collect();
        for e in &test {
            for l in e.gold.leaves() {
                if !l.starts_with("en.") {
                    assert!(!train_leaves.contains(l), "{l} leaked");
                    assert!(e.tokens.iter().any(|t| t == l));
                }
            }
        }
    }

    #[test]
    fn slu_style_trees_are_shallow() {
        let exs = generate(&SynthConfig {
            style: Style::Slu,
            ..SynthConfig::default()
        })
        .unwrap();
        for e in &exs {
            assert!(e.gold.depth() <= 3);
            assert!(e
                .gold
                .leaves()
                .iter()
                .all(|l| e.tokens.iter().any(|t| t == l)));
        }
    }

    #[test]
    fn same_grammar_seed_shares_labels() {
        let a = Grammar::new(&SynthConfig::default()).unwrap();
        let b = Grammar::new(&SynthConfig {
            namespace: "xx".into(),
            surface_offset: 12,
            ..SynthConfig::default()
        })
        .unwrap();
        assert_eq!(a.labels, b.labels);
        assert_ne!(a.terminals, b.terminals);
    }
}
