use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ModelParams, NtHead, TerHead, KIND_EMB_REDUCE, KIND_EMB_TER};
use crate::attention_copy::{attend, ter_log_distribution, ter_nll, TerDistribution};
use crate::data::Tree;
use crate::encoders::{compose, HistoryLstm, StackLstm};
use crate::error::{Error, Result};
use crate::numerics::{softmax_values, Graph, NodeId};
use crate::transition::{Action, ActionKind, LegalActions, SymbolicState, TerPayload};

/// Feed-forward features of one parser state.
#[derive(Clone, Copy, Debug)]
struct Features {
    hidden: NodeId,
    copy_scores: Option<NodeId>,
}

/// Neural and symbolic state of one sentence being parsed.
///
/// The buffer is encoded once on construction; every applied action updates
/// the Stack-LSTM, the history LSTM and the symbolic state together.
pub struct Session<'m> {
    model: &'m ModelParams,
    ter: &'m TerHead,
    nt: &'m NtHead,
    pub graph: Graph<'m>,
    state: SymbolicState,
    words: Vec<NodeId>,
    buffer: Vec<NodeId>,
    keys: Vec<NodeId>,
    copy_inputs: Vec<Option<NodeId>>,
    stack: StackLstm,
    stack_inputs: Vec<NodeId>,
    history: HistoryLstm,
    dropout: Option<ChaCha8Rng>,
    copy: bool,
}

/// Probabilities at one state, for inspection and tests.
#[derive(Clone, Debug)]
pub struct StepDistributions {
    /// Softmax over `[TER, NT, REDUCE]` before masking.
    pub kind: [f64; 3],
    /// Renormalised over legal kinds; illegal kinds are exactly 0.
    pub kind_masked: [f64; 3],
    pub nt: Vec<f64>,
    /// `None` when the task can produce no terminal at all.
    pub ter: Option<TerDistribution>,
}

/// Result of a greedy decode.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    /// Completed tree, or `None` if the action budget ran out.
    pub tree: Option<Tree>,
    pub partial: Option<Tree>,
    pub actions: Vec<Action>,
    /// Log-probability of each emitted action (kind plus payload).
    pub log_probs: Vec<f64>,
}

impl DecodeResult {
    pub fn is_complete(&self) -> bool {
        self.tree.is_some()
    }

    /// Linearisation used for scoring; incomplete parses use the partial tree.
    pub fn linearize(&self) -> String {
        self.tree
            .as_ref()
            .or(self.partial.as_ref())
            .map(Tree::linearize)
            .unwrap_or_default()
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl<'m> Session<'m> {
    pub fn new(
        model: &'m ModelParams,
        task: &str,
        tokens: &[String],
        dropout: Option<ChaCha8Rng>,
    ) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("sentence"));
        }
        let heads = model.task(task)?;
        let nt = model.nt_head(&heads.nt_key)?;
        let trunk = &model.trunk;
        let mut g = Graph::new(&model.store);
        let words = tokens
            .iter()
            .map(|t| trunk.word.encode(&mut g, &model.input, t))
            .collect::<Result<Vec<_>>>()?;
        let buffer = trunk.buffer.encode(&mut g, &words)?;
        let keys = match &trunk.attention {
            Some(att) => att.keys(&mut g, &buffer)?,
            None => Vec::new(),
        };
        let stack = StackLstm::new(&mut g, trunk.stack);
        let history = HistoryLstm::new(&mut g, trunk.history);
        let sentence: Arc<[String]> = tokens.to_vec().into();
        Ok(Session {
            model,
            ter: &heads.ter,
            nt,
            state: SymbolicState::new(sentence, model.config.max_actions(tokens.len())),
            copy_inputs: vec![None; tokens.len()],
            words,
            buffer,
            keys,
            stack,
            stack_inputs: Vec::new(),
            history,
            dropout: dropout.filter(|_| model.config.dropout > 0.0),
            copy: model.config.copy_active(),
            graph: g,
        })
    }

    pub fn state(&self) -> &SymbolicState {
        &self.state
    }

    pub fn stack_depth(&self) -> usize {
        self.stack.depth()
    }

    pub fn stack_summary(&self) -> &[f64] {
        self.graph.values(self.stack.summary())
    }

    pub fn buffer_states(&self) -> Vec<Vec<f64>> {
        self.buffer
            .iter()
            .map(|&b| self.graph.values(b).to_vec())
            .collect()
    }

    /// Symbolic legality, further restricted to what the heads can emit.
    pub fn legal(&self) -> Result<LegalActions> {
        let mut l = self.state.legal_actions()?;
        l.ter &= self.copy || !self.ter.terminals.is_empty();
        Ok(l)
    }

    fn features(&mut self) -> Result<Features> {
        let trunk = &self.model.trunk;
        let g = &mut self.graph;
        let s = self.stack.summary();
        let mut parts = vec![s, self.history.summary()];
        let mut copy_scores = None;
        if let Some(att) = &trunk.attention {
            let a = attend(g, att, s, &self.keys, &self.buffer)?;
            parts.push(a.context);
            if self.copy {
                copy_scores = Some(a.scores);
            }
        }
        let mut x = g.concat(&parts)?;
        if let Some(rng) = self.dropout.as_mut() {
            let rate = self.model.config.dropout;
            let keep = 1.0 / (1.0 - rate);
            let mask = (0..g.value(x).len())
                .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                .collect();
            x = g.dropout(x, mask)?;
        }
        let h = trunk.ff.apply(g, x)?;
        Ok(Features {
            hidden: g.tanh(h),
            copy_scores,
        })
    }

    fn kind_logits(&mut self, f: &Features) -> Result<NodeId> {
        self.model.trunk.kind_head.apply(&mut self.graph, f.hidden)
    }

    fn nt_log_probs(&mut self, f: &Features) -> Result<NodeId> {
        let z = self.nt.out.apply(&mut self.graph, f.hidden)?;
        self.graph.log_softmax(z)
    }

    fn ter_log_probs(&mut self, f: &Features) -> Result<NodeId> {
        let z = self.ter.gen.apply(&mut self.graph, f.hidden)?;
        ter_log_distribution(&mut self.graph, z, f.copy_scores)
    }

    pub fn step_distributions(&mut self) -> Result<StepDistributions> {
        let legal = self.legal()?;
        let f = self.features()?;
        let kl = self.kind_logits(&f)?;
        let logits = self.graph.values(kl).to_vec();
        let all = softmax_values(&logits)?;
        let idx: Vec<usize> = legal.kinds().iter().map(|k| k.index()).collect();
        let mut kind_masked = [0.0; 3];
        if !idx.is_empty() {
            let sel: Vec<f64> = idx.iter().map(|&i| logits[i]).collect();
            for (p, &i) in softmax_values(&sel)?.into_iter().zip(&idx) {
                kind_masked[i] = p;
            }
        }
        let nl = self.nt_log_probs(&f)?;
        let nt = self.graph.values(nl).iter().map(|l| l.exp()).collect();
        let ter = if self.copy || !self.ter.terminals.is_empty() {
            let tl = self.ter_log_probs(&f)?;
            Some(TerDistribution::from_log(
                self.graph.values(tl),
                self.ter.terminals.len(),
                self.words.len(),
            )?)
        } else {
            None
        };
        Ok(StepDistributions {
            kind: [all[0], all[1], all[2]],
            kind_masked,
            nt,
            ter,
        })
    }

    fn copy_input(&mut self, i: usize) -> Result<NodeId> {
        if let Some(n) = self.copy_inputs[i] {
            return Ok(n);
        }
        let n = self
            .model
            .trunk
            .copy_proj
            .apply(&mut self.graph, self.words[i])?;
        self.copy_inputs[i] = Some(n);
        Ok(n)
    }

    fn nt_index(&self, label: &str) -> Result<usize> {
        self.nt.labels.get(label).ok_or_else(|| Error::Unknown {
            kind: "non-terminal",
            name: label.to_string(),
        })
    }

    /// Applies `action` to both the symbolic and the neural state.
    pub fn apply(&mut self, action: &Action) -> Result<()> {
        let legal = self.legal()?;
        if !legal.allows(action.kind()) {
            return Err(Error::IllegalAction {
                action: action.to_string(),
                state: self.state.summary(),
            });
        }
        // resolve embeddings before mutating anything
        let reduce_info = match action {
            Action::Reduce => Some((
                self.state.top_open_children(),
                self.nt_index(self.state.top_open_label().unwrap_or_default())?,
            )),
            _ => None,
        };
        let (stack_in, hist_in) = match action {
            Action::Nt(label) => {
                let e = self.graph.lookup(self.nt.emb, self.nt_index(label)?)?;
                (Some(e), e)
            }
            Action::Ter(payload) => {
                let e = match payload {
                    TerPayload::Gen(tok) => {
                        let i = self.ter.terminals.get(tok).ok_or_else(|| Error::Unknown {
                            kind: "terminal",
                            name: tok.clone(),
                        })?;
                        self.graph.lookup(self.ter.emb, i)?
                    }
                    TerPayload::Copy(i) if *i < self.words.len() => self.copy_input(*i)?,
                    TerPayload::Copy(_) => {
                        return Err(Error::IllegalAction {
                            action: action.to_string(),
                            state: self.state.summary(),
                        })
                    }
                };
                let k = self.graph.lookup(self.model.trunk.kind_emb, KIND_EMB_TER)?;
                (Some(e), k)
            }
            Action::Reduce => (
                None,
                self.graph
                    .lookup(self.model.trunk.kind_emb, KIND_EMB_REDUCE)?,
            ),
        };
        self.state.apply(action)?;

        let g = &mut self.graph;
        match (stack_in, reduce_info) {
            (Some(x), _) => {
                self.stack.push(g, x)?;
                self.stack_inputs.push(x);
            }
            (None, Some((k, label))) => {
                let children = self.stack_inputs.split_off(self.stack_inputs.len() - k);
                self.stack_inputs.pop();
                for _ in 0..=k {
                    self.stack.pop()?;
                }
                let label = g.lookup(self.nt.emb, label)?;
                let x = compose(g, &self.model.trunk.compose, label, &children)?;
                self.stack.push(g, x)?;
                self.stack_inputs.push(x);
            }
            (None, None) => unreachable!("only REDUCE has no stack input"),
        }
        self.history.step(g, hist_in)?;
        debug_assert_eq!(self.stack.depth(), self.state.stack_depth());
        Ok(())
    }
}

/// Sum over `actions` of the negative log-probability of each kind (among
/// the legal kinds), each NT label and each terminal (marginalised over
/// generation and copy). Returns the scalar loss node on `session.graph`.
pub fn teacher_forced_loss(session: &mut Session<'_>, actions: &[Action]) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(actions.len() * 2);
    for action in actions {
        let legal = session.legal()?;
        let kinds: Vec<usize> = legal.kinds().iter().map(|k| k.index()).collect();
        let pos = kinds
            .iter()
            .position(|&k| k == action.kind().index())
            .ok_or_else(|| Error::IllegalAction {
                action: action.to_string(),
                state: session.state.summary(),
            })?;
        // a forced REDUCE needs no features at all
        let needs_features = kinds.len() > 1 || action.kind() != ActionKind::Reduce;
        if needs_features {
            let f = session.features()?;
            if kinds.len() > 1 {
                let kl = session.kind_logits(&f)?;
                let lp = session.graph.log_softmax_subset(kl, &kinds)?;
                let p = session.graph.pick(lp, pos)?;
                terms.push(session.graph.scale(p, -1.0));
            }
            match action {
                Action::Nt(label) => {
                    let i = session.nt_index(label)?;
                    let lp = session.nt_log_probs(&f)?;
                    let p = session.graph.pick(lp, i)?;
                    terms.push(session.graph.scale(p, -1.0));
                }
                Action::Ter(payload) => {
                    let leaf =
                        session
                            .state
                            .ter_token(payload)
                            .ok_or_else(|| Error::IllegalAction {
                                action: action.to_string(),
                                state: session.state.summary(),
                            })?;
                    let lp = session.ter_log_probs(&f)?;
                    let n_ter = session.ter.terminals.len();
                    let ti = session.ter.terminals.get(&leaf);
                    let sentence = session.state.sentence().to_vec();
                    terms.push(ter_nll(
                        &mut session.graph,
                        lp,
                        &leaf,
                        ti,
                        n_ter,
                        &sentence,
                    )?);
                }
                Action::Reduce => {}
            }
        }
        session.apply(action)?;
    }
    if terms.is_empty() {
        return Ok(session.graph.input(crate::numerics::Tensor::scalar(0.0)));
    }
    session.graph.sum_scalars(&terms)
}

/// Greedy decode: most probable legal kind, then most probable payload;
/// ties go to the lowest index.
pub fn parse_greedy(model: &ModelParams, task: &str, tokens: &[String]) -> Result<DecodeResult> {
    let mut s = Session::new(model, task, tokens, None)?;
    let mut actions = Vec::new();
    let mut log_probs = Vec::new();
    while !s.state.is_terminal() && !s.state.budget_exhausted() {
        let legal = s.legal()?;
        let kinds: Vec<usize> = legal.kinds().iter().map(|k| k.index()).collect();
        if kinds.is_empty() {
            break;
        }
        let f = s.features()?;
        let (kind, kind_lp) = if kinds.len() == 1 {
            (kinds[0], 0.0)
        } else {
            let kl = s.kind_logits(&f)?;
            let lp = s.graph.log_softmax_subset(kl, &kinds)?;
            let v = s.graph.values(lp);
            let best = argmax(v);
            (kinds[best], v[best])
        };
        let (action, payload_lp) = match ActionKind::ALL[kind] {
            ActionKind::Nt => {
                let lp = s.nt_log_probs(&f)?;
                let v = s.graph.values(lp);
                let i = argmax(v);
                (Action::nt(s.nt.labels.symbol(i)), v[i])
            }
            ActionKind::Ter => {
                let lp = s.ter_log_probs(&f)?;
                let v = s.graph.values(lp);
                let i = argmax(v);
                let n_ter = s.ter.terminals.len();
                let a = if i < n_ter {
                    Action::gen(s.ter.terminals.symbol(i))
                } else {
                    Action::copy(i - n_ter)
                };
                (a, v[i])
            }
            ActionKind::Reduce => (Action::Reduce, 0.0),
        };
        s.apply(&action)?;
        actions.push(action);
        log_probs.push(kind_lp + payload_lp);
    }
    Ok(DecodeResult {
        tree: s.state.completed().cloned(),
        partial: s.state.partial_tree(),
        actions,
        log_probs,
    })
}
