//! State encoders: character-augmented word vectors, the bidirectional
//! buffer, the Stack-LSTM spine and the action-history LSTM.

use rand::Rng;

use crate::data::InputVocab;
use crate::error::{Error, Result};
use crate::numerics::{
    lstm_step, AffineParams, Graph, LstmParams, NodeId, ParamId, ParamStore, Tensor,
};

/// Uniform bound used for embedding tables and learned initial states.
pub const EMBED_INIT: f64 = 0.1;

/// Word embedding table plus a character LSTM whose last state is appended
/// to the word vector.
#[derive(Clone, Copy, Debug)]
pub struct WordEncoder {
    pub words: ParamId,
    pub chars: ParamId,
    pub char_lstm: LstmParams,
    pub word_dim: usize,
}

impl WordEncoder {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        vocab: &InputVocab,
        word_dim: usize,
        char_dim: usize,
        char_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let words = store.add(
            format!("{prefix}.word_emb"),
            Tensor::uniform(&[vocab.words.len(), word_dim], EMBED_INIT, rng),
        )?;
        let chars = store.add(
            format!("{prefix}.char_emb"),
            Tensor::uniform(&[vocab.chars.len(), char_dim], EMBED_INIT, rng),
        )?;
        let char_lstm = LstmParams::register(
            store,
            &format!("{prefix}.char_lstm"),
            char_dim,
            char_hidden,
            rng,
        )?;
        Ok(WordEncoder {
            words,
            chars,
            char_lstm,
            word_dim,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.word_dim + self.char_lstm.hidden
    }

    /// `[e_w ; h_c]`. Unknown words use the UNK row but keep their own
    /// spelling; unknown characters use the character UNK row.
    pub fn encode(&self, g: &mut Graph<'_>, vocab: &InputVocab, word: &str) -> Result<NodeId> {
        if word.is_empty() {
            return Err(Error::Empty("word"));
        }
        let row = vocab
            .words
            .get_or_unk(word)
            .ok_or_else(|| Error::Invalid("word vocabulary lacks an UNK entry".into()))?;
        let e = g.lookup(self.words, row)?;
        let hd = self.char_lstm.hidden;
        let mut h = g.input(Tensor::zeros(&[hd]));
        let mut c = g.input(Tensor::zeros(&[hd]));
        let mut buf = [0u8; 4];
        for ch in word.chars() {
            let ci = vocab
                .chars
                .get_or_unk(ch.encode_utf8(&mut buf))
                .ok_or_else(|| Error::Invalid("char vocabulary lacks an UNK entry".into()))?;
            let x = g.lookup(self.chars, ci)?;
            (h, c) = lstm_step(g, &self.char_lstm, x, h, c)?;
        }
        g.concat(&[e, h])
    }
}

/// Bidirectional LSTM over word encodings.
#[derive(Clone, Copy, Debug)]
pub struct BufferEncoder {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

impl BufferEncoder {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(BufferEncoder {
            fwd: LstmParams::register(store, &format!("{prefix}.fwd"), input, hidden, rng)?,
            bwd: LstmParams::register(store, &format!("{prefix}.bwd"), input, hidden, rng)?,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.fwd.hidden + self.bwd.hidden
    }

    /// Position `i` holds `[fwd(0..=i) ; bwd(n-1..=i)]`.
    pub fn encode(&self, g: &mut Graph<'_>, inputs: &[NodeId]) -> Result<Vec<NodeId>> {
        if inputs.is_empty() {
            return Err(Error::Empty("sentence"));
        }
        let fwd = run_lstm(g, &self.fwd, inputs.iter().copied())?;
        let mut bwd = run_lstm(g, &self.bwd, inputs.iter().rev().copied())?;
        bwd.reverse();
        fwd.into_iter()
            .zip(bwd)
            .map(|(f, b)| g.concat(&[f, b]))
            .collect()
    }
}

fn run_lstm(
    g: &mut Graph<'_>,
    p: &LstmParams,
    xs: impl Iterator<Item = NodeId>,
) -> Result<Vec<NodeId>> {
    let mut h = g.input(Tensor::zeros(&[p.hidden]));
    let mut c = g.input(Tensor::zeros(&[p.hidden]));
    let mut out = Vec::new();
    for x in xs {
        (h, c) = lstm_step(g, p, x, h, c)?;
        out.push(h);
    }
    Ok(out)
}

/// An LSTM with learned initial `(h, c)`.
#[derive(Clone, Copy, Debug)]
pub struct SeededLstm {
    pub cell: LstmParams,
    pub h0: ParamId,
    pub c0: ParamId,
}

impl SeededLstm {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let cell = LstmParams::register(store, prefix, input, hidden, rng)?;
        let h0 = store.add(
            format!("{prefix}.h0"),
            Tensor::uniform(&[hidden], EMBED_INIT, rng),
        )?;
        let c0 = store.add(
            format!("{prefix}.c0"),
            Tensor::uniform(&[hidden], EMBED_INIT, rng),
        )?;
        Ok(SeededLstm { cell, h0, c0 })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.cell.w, self.cell.b, self.h0, self.c0]
    }

    fn initial(&self, g: &mut Graph<'_>) -> (NodeId, NodeId) {
        (g.param(self.h0), g.param(self.c0))
    }
}

/// Stack-LSTM spine. Entry 0 is the learned empty-stack state; every push
/// adds one LSTM step on top of the current summary and every pop discards
/// it, so earlier summaries are restored exactly.
#[derive(Clone, Debug)]
pub struct StackLstm {
    lstm: SeededLstm,
    spine: Vec<(NodeId, NodeId)>,
}

impl StackLstm {
    pub fn new(g: &mut Graph<'_>, lstm: SeededLstm) -> Self {
        let init = lstm.initial(g);
        StackLstm {
            lstm,
            spine: vec![init],
        }
    }

    /// Number of pushed items (the initial state is not counted).
    pub fn depth(&self) -> usize {
        self.spine.len() - 1
    }

    pub fn summary(&self) -> NodeId {
        self.spine.last().expect("spine never empty").0
    }

    pub fn push(&mut self, g: &mut Graph<'_>, x: NodeId) -> Result<()> {
        let (h, c) = *self.spine.last().expect("spine never empty");
        let next = lstm_step(g, &self.lstm.cell, x, h, c)?;
        self.spine.push(next);
        Ok(())
    }

    pub fn pop(&mut self) -> Result<()> {
        if self.spine.len() == 1 {
            return Err(Error::Invalid("pop on an empty stack".into()));
        }
        self.spine.pop();
        Ok(())
    }
}

/// LSTM over the embeddings of the actions taken so far.
#[derive(Clone, Debug)]
pub struct HistoryLstm {
    lstm: SeededLstm,
    state: (NodeId, NodeId),
}

impl HistoryLstm {
    pub fn new(g: &mut Graph<'_>, lstm: SeededLstm) -> Self {
        let state = lstm.initial(g);
        HistoryLstm { lstm, state }
    }

    pub fn summary(&self) -> NodeId {
        self.state.0
    }

    pub fn step(&mut self, g: &mut Graph<'_>, action_embedding: NodeId) -> Result<()> {
        let (h, c) = self.state;
        self.state = lstm_step(g, &self.lstm.cell, action_embedding, h, c)?;
        Ok(())
    }
}

/// Re-entry vector of a closed subtree:
/// `tanh(W [label ; mean(children)] + b)`.
pub fn compose(
    g: &mut Graph<'_>,
    affine: &AffineParams,
    label: NodeId,
    children: &[NodeId],
) -> Result<NodeId> {
    let m = g.mean(children)?;
    let x = g.concat(&[label, m])?;
    let y = affine.apply(g, x)?;
    Ok(g.tanh(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_input_vocab;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> InputVocab {
        let sents: Vec<Vec<String>> = vec!["show red cars".split(' ').map(String::from).collect()];
        build_input_vocab(sents.iter().map(|s| s.as_slice()), 1)
    }

    fn setup() -> (
        ParamStore,
        WordEncoder,
        BufferEncoder,
        SeededLstm,
        InputVocab,
    ) {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let w = WordEncoder::register(&mut store, "t", &v, 5, 4, 3, &mut rng).unwrap();
        let b = BufferEncoder::register(&mut store, "t.buf", 8, 6, &mut rng).unwrap();
        let s = SeededLstm::register(&mut store, "t.stack", 4, 5, &mut rng).unwrap();
        (store, w, b, s, v)
    }

    #[test]
    fn word_encoding_has_concatenated_dim() {
        let (store, w, _, _, v) = setup();
        let mut g = Graph::new(&store);
        for word in ["red", "zxqv"] {
            let x = w.encode(&mut g, &v, word).unwrap();
            assert_eq!(g.value(x).len(), 8);
        }
        assert!(w.encode(&mut g, &v, "").is_err());
    }

    #[test]
    fn oov_spellings_break_unk_collision() {
        let (store, w, _, _, v) = setup();
        let mut g = Graph::new(&store);
        let a = w.encode(&mut g, &v, "sore").unwrap();
        let b = w.encode(&mut g, &v, "crow").unwrap();
        assert_eq!(g.values(a)[..5], g.values(b)[..5]);
        assert_ne!(g.values(a), g.values(b));
    }

    #[test]
    fn single_token_buffer() {
        let (store, w, b, _, v) = setup();
        let mut g = Graph::new(&store);
        let x = w.encode(&mut g, &v, "red").unwrap();
        let out = b.encode(&mut g, &[x]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(g.value(out[0]).len(), 12);
        assert!(b.encode(&mut g, &[]).is_err());
    }

    #[test]
    fn reversal_swaps_directions_under_swapped_params() {
        let (store, w, b, _, v) = setup();
        let swapped = BufferEncoder {
            fwd: b.bwd,
            bwd: b.fwd,
        };
        let mut g = Graph::new(&store);
        let xs: Vec<NodeId> = ["show", "red", "cars"]
            .iter()
            .map(|t| w.encode(&mut g, &v, t).unwrap())
            .collect();
        let rev: Vec<NodeId> = xs.iter().rev().copied().collect();
        let orig = b.encode(&mut g, &xs).unwrap();
        let other = swapped.encode(&mut g, &rev).unwrap();
        for i in 0..3 {
            let o = g.values(orig[i]);
            let r = g.values(other[2 - i]);
            assert_eq!(&o[..6], &r[6..]);
            assert_eq!(&o[6..], &r[..6]);
        }
    }

    #[test]
    fn stack_pop_restores_and_push_order_matters() {
        let (store, _, _, s, _) = setup();
        let mut g = Graph::new(&store);
        let mut st = StackLstm::new(&mut g, s);
        let empty = g.values(st.summary()).to_vec();
        assert_eq!(empty, store.get(s.h0).data());
        let a = g.input(Tensor::vector(vec![0.3, -0.2, 0.5, 0.1]));
        let b = g.input(Tensor::vector(vec![-0.4, 0.9, 0.0, 0.2]));
        st.push(&mut g, a).unwrap();
        let after_a = g.values(st.summary()).to_vec();
        st.push(&mut g, b).unwrap();
        let ab = g.values(st.summary()).to_vec();
        st.pop().unwrap();
        assert_eq!(g.values(st.summary()), after_a.as_slice());
        st.pop().unwrap();
        assert_eq!(g.values(st.summary()), empty.as_slice());
        assert!(st.pop().is_err());
        st.push(&mut g, b).unwrap();
        st.push(&mut g, a).unwrap();
        assert_ne!(g.values(st.summary()), ab.as_slice());
    }

    #[test]
    fn history_distinguishes_labels() {
        let (mut store, _, _, s, _) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let table = store
            .add("nt", Tensor::uniform(&[2, 4], 0.5, &mut rng))
            .unwrap();
        let mut g = Graph::new(&store);
        let run = |g: &mut Graph<'_>, row| {
            let mut h = HistoryLstm::new(g, s);
            let e = g.lookup(table, row).unwrap();
            h.step(g, e).unwrap();
            g.values(h.summary()).to_vec()
        };
        let f = run(&mut g, 0);
        assert_eq!(f, run(&mut g, 0));
        assert_ne!(f, run(&mut g, 1));
    }
}
