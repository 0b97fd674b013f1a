use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Example;

pub const UNK: &str = "<unk>";

/// Dense symbol <-> index map. Index order is insertion order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
    has_unk: bool,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// A vocabulary whose index 0 is the reserved unknown symbol.
    pub fn with_unk() -> Self {
        let mut v = Vocab::new();
        v.insert(UNK);
        v.has_unk = true;
        v
    }

    pub fn from_symbols<I, S>(symbols: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocab::new();
        for s in symbols {
            v.insert(s.as_ref());
        }
        v
    }

    pub fn insert(&mut self, symbol: &str) -> usize {
        if let Some(&i) = self.index.get(symbol) {
            return i;
        }
        let i = self.symbols.len();
        self.symbols.push(symbol.to_string());
        self.index.insert(symbol.to_string(), i);
        i
    }

    pub fn get(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    /// Index of `symbol`, falling back to the unknown symbol when present.
    pub fn get_or_unk(&self, symbol: &str) -> Option<usize> {
        self.get(symbol).or_else(|| self.unk())
    }

    pub fn unk(&self) -> Option<usize> {
        self.has_unk.then_some(0)
    }

    pub fn contains(&self, symbol: &str) -> bool {
        self.index.contains_key(symbol)
    }

    pub fn symbol(&self, i: usize) -> &str {
        &self.symbols[i]
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.symbols {
            h.update((s.len() as u64).to_le_bytes());
            h.update(s.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

impl From<Vec<String>> for Vocab {
    fn from(symbols: Vec<String>) -> Self {
        let has_unk = symbols.first().map(|s| s == UNK).unwrap_or(false);
        let mut v = Vocab::from_symbols(symbols);
        v.has_unk = has_unk;
        v
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.symbols
    }
}

/// Input-side vocabularies shared by the encoder trunk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputVocab {
    pub words: Vocab,
    pub chars: Vocab,
}

/// Output-side vocabularies owned by one task's heads.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputVocab {
    pub terminals: Vocab,
    pub nonterminals: Vocab,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSet {
    pub input: InputVocab,
    pub output: OutputVocab,
}

/// Word vocabulary with a frequency cutoff and the character vocabulary of
/// the surviving words. Ties keep first-occurrence order.
pub fn build_input_vocab<'a, I>(utterances: I, min_count: usize) -> InputVocab
where
    I: IntoIterator<Item = &'a [String]>,
{
    let min_count = min_count.max(1);
    let mut order: Vec<&str> = Vec::new();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for toks in utterances {
        for t in toks {
            let c = counts.entry(t.as_str()).or_insert(0);
            if *c == 0 {
                order.push(t);
            }
            *c += 1;
        }
    }
    let mut words = Vocab::with_unk();
    let mut chars = Vocab::with_unk();
    for w in order {
        if counts[w] >= min_count {
            words.insert(w);
            for ch in w.chars() {
                chars.insert(ch.encode_utf8(&mut [0u8; 4]));
            }
        }
    }
    InputVocab { words, chars }
}

/// Terminal and non-terminal vocabularies collected from gold trees, no cutoff.
pub fn build_output_vocab<'a, I>(examples: I) -> OutputVocab
where
    I: IntoIterator<Item = &'a Example>,
{
    let mut out = OutputVocab::default();
    for ex in examples {
        for l in ex.gold.labels() {
            out.nonterminals.insert(l);
        }
        for t in ex.gold.leaves() {
            out.terminals.insert(t);
        }
    }
    out
}

pub fn build_vocab(examples: &[Example], min_count: usize) -> VocabSet {
    VocabSet {
        input: build_input_vocab(examples.iter().map(|e| e.tokens.as_slice()), min_count),
        output: build_output_vocab(examples),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_logical_form, Example};

    fn ex(utt: &str, lf: &str) -> Example {
        Example::new(
            utt.split_whitespace().map(str::to_string).collect(),
            parse_logical_form(lf).unwrap(),
            "t",
            utt,
        )
        .unwrap()
    }

    #[test]
    fn min_count_maps_rare_words_to_unk() {
        let v = build_vocab(&[ex("a a b", "(f a)")], 2);
        assert_eq!(v.input.words.symbols(), &[UNK.to_string(), "a".into()]);
        assert_eq!(v.input.words.get_or_unk("b"), Some(0));
        assert!(!v.input.chars.contains("b"));
    }

    #[test]
    fn min_count_one_keeps_everything() {
        let v = build_vocab(&[ex("a a b", "(f a)")], 1);
        assert!(v.input.words.contains("a") && v.input.words.contains("b"));
    }

    #[test]
    fn output_vocab_has_no_unk() {
        let v = build_vocab(
            &[ex(
                "which cinemas screen Star Wars tonight",
                "(FindCinema (Title Star) (Title Wars) (Time tonight))",
            )],
            1,
        );
        for nt in ["FindCinema", "Title", "Time"] {
            assert!(v.output.nonterminals.contains(nt));
        }
        for t in ["Star", "Wars", "tonight"] {
            assert!(v.output.terminals.contains(t));
        }
        assert_eq!(v.output.terminals.unk(), None);
        assert!(!v.output.terminals.contains(UNK));
    }

    #[test]
    fn serde_round_trip_keeps_unk_flag() {
        let mut v = Vocab::with_unk();
        v.insert("x");
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.get_or_unk("zzz"), Some(0));
    }
}
