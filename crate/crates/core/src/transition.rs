//! Symbolic transition system over `{TER, NT, REDUCE}`.
//!
//! The sentence is never consumed: it is only read by `TER copy:i` actions.
//! `NT` opens a labelled node, `TER` attaches a leaf to the topmost open node
//! and `REDUCE` closes it. Empty non-terminals cannot be built.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::data::{Tree, Vocab};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum TerPayload {
    Gen(String),
    Copy(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Ter(TerPayload),
    Nt(String),
    Reduce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActionKind {
    Ter = 0,
    Nt = 1,
    Reduce = 2,
}

impl ActionKind {
    pub const ALL: [ActionKind; 3] = [ActionKind::Ter, ActionKind::Nt, ActionKind::Reduce];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Ter(_) => ActionKind::Ter,
            Action::Nt(_) => ActionKind::Nt,
            Action::Reduce => ActionKind::Reduce,
        }
    }

    pub fn gen(tok: impl Into<String>) -> Self {
        Action::Ter(TerPayload::Gen(tok.into()))
    }

    pub fn copy(pos: usize) -> Self {
        Action::Ter(TerPayload::Copy(pos))
    }

    pub fn nt(label: impl Into<String>) -> Self {
        Action::Nt(label.into())
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Nt(l) => write!(f, "NT {l}"),
            Action::Ter(TerPayload::Gen(t)) => write!(f, "TER gen:{t}"),
            Action::Ter(TerPayload::Copy(i)) => write!(f, "TER copy:{i}"),
            Action::Reduce => f.write_str("RED"),
        }
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Invalid(format!("cannot parse action `{s}`"));
        if s == "RED" {
            return Ok(Action::Reduce);
        }
        if let Some(label) = s.strip_prefix("NT ") {
            return if label.is_empty() {
                Err(bad())
            } else {
                Ok(Action::nt(label))
            };
        }
        if let Some(rest) = s.strip_prefix("TER ") {
            if let Some(t) = rest.strip_prefix("gen:") {
                return Ok(Action::gen(t));
            }
            if let Some(i) = rest.strip_prefix("copy:") {
                return i.parse().map(Action::copy).map_err(|_| bad());
            }
        }
        Err(bad())
    }
}

/// Renders one action per line, the `--dump-oracle` format.
pub fn format_actions(actions: &[Action]) -> String {
    actions.iter().map(|a| format!("{a}\n")).collect()
}

/// Which action kinds may be taken next.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LegalActions {
    pub ter: bool,
    pub nt: bool,
    pub reduce: bool,
}

impl LegalActions {
    pub fn allows(&self, kind: ActionKind) -> bool {
        match kind {
            ActionKind::Ter => self.ter,
            ActionKind::Nt => self.nt,
            ActionKind::Reduce => self.reduce,
        }
    }

    pub fn kinds(&self) -> Vec<ActionKind> {
        ActionKind::ALL
            .into_iter()
            .filter(|k| self.allows(*k))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        !(self.ter || self.nt || self.reduce)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum StackItem {
    Open(String),
    Done(Tree),
}

/// Default action budget for a sentence of `n` tokens.
pub fn default_max_actions(n: usize) -> usize {
    10 + 8 * n
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolicState {
    sentence: Arc<[String]>,
    stack: Vec<StackItem>,
    open: usize,
    actions: usize,
    max_actions: usize,
    completed: Option<Tree>,
}

impl SymbolicState {
    pub fn new(sentence: Arc<[String]>, max_actions: usize) -> Self {
        SymbolicState {
            sentence,
            stack: Vec::new(),
            open: 0,
            actions: 0,
            max_actions,
            completed: None,
        }
    }

    pub fn with_default_budget(sentence: Arc<[String]>) -> Self {
        let n = sentence.len();
        SymbolicState::new(sentence, default_max_actions(n))
    }

    /// A state without an action budget, for replaying known-good sequences.
    pub fn unbounded(sentence: Arc<[String]>) -> Self {
        SymbolicState::new(sentence, usize::MAX)
    }

    pub fn sentence(&self) -> &[String] {
        &self.sentence
    }

    pub fn open_count(&self) -> usize {
        self.open
    }

    pub fn action_count(&self) -> usize {
        self.actions
    }

    pub fn max_actions(&self) -> usize {
        self.max_actions
    }

    pub fn stack_depth(&self) -> usize {
        self.stack.len()
    }

    pub fn completed(&self) -> Option<&Tree> {
        self.completed.as_ref()
    }

    pub fn is_terminal(&self) -> bool {
        self.completed.is_some()
    }

    pub fn budget_exhausted(&self) -> bool {
        !self.is_terminal() && self.actions >= self.max_actions
    }

    /// Label of the topmost open non-terminal.
    pub fn top_open_label(&self) -> Option<&str> {
        self.stack.iter().rev().find_map(|it| match it {
            StackItem::Open(l) => Some(l.as_str()),
            StackItem::Done(_) => None,
        })
    }

    /// Number of stack items above the topmost open non-terminal.
    pub fn top_open_children(&self) -> usize {
        self.stack
            .iter()
            .rev()
            .take_while(|it| matches!(it, StackItem::Done(_)))
            .count()
    }

    fn top_is_childless_open(&self) -> bool {
        matches!(self.stack.last(), Some(StackItem::Open(_)))
    }

    fn fits(&self, extra_actions: usize, needed_after: usize) -> bool {
        self.actions
            .saturating_add(extra_actions)
            .saturating_add(needed_after)
            <= self.max_actions
    }

    pub fn legal_actions(&self) -> Result<LegalActions> {
        if self.is_terminal() {
            return Err(Error::IllegalAction {
                action: "<any>".into(),
                state: self.summary(),
            });
        }
        if self.actions == 0 {
            return Ok(LegalActions {
                nt: self.fits(1, 2),
                ..LegalActions::default()
            });
        }
        if self.open == 0 {
            return Ok(LegalActions::default());
        }
        // cheapest way to finish: one TER if the top node is empty, then one
        // REDUCE per open node
        Ok(LegalActions {
            nt: self.fits(1, self.open + 2),
            ter: self.fits(1, self.open),
            reduce: !self.top_is_childless_open(),
        })
    }

    pub fn summary(&self) -> String {
        let items: Vec<String> = self
            .stack
            .iter()
            .map(|it| match it {
                StackItem::Open(l) => format!("({l}"),
                StackItem::Done(t) => t.linearize(),
            })
            .collect();
        format!(
            "actions={} open={} stack=[{}]{}",
            self.actions,
            self.open,
            items.join(" "),
            if self.is_terminal() { " terminal" } else { "" }
        )
    }

    fn illegal(&self, action: &Action) -> Error {
        Error::IllegalAction {
            action: action.to_string(),
            state: self.summary(),
        }
    }

    /// Resolves a TER payload to its surface token.
    pub fn ter_token(&self, payload: &TerPayload) -> Option<String> {
        match payload {
            TerPayload::Gen(t) => Some(t.clone()),
            TerPayload::Copy(i) => self.sentence.get(*i).cloned(),
        }
    }

    pub fn apply(&mut self, action: &Action) -> Result<()> {
        let legal = self.legal_actions().map_err(|_| self.illegal(action))?;
        if !legal.allows(action.kind()) {
            return Err(self.illegal(action));
        }
        match action {
            Action::Nt(label) => {
                if label.is_empty() {
                    return Err(self.illegal(action));
                }
                self.stack.push(StackItem::Open(label.clone()));
                self.open += 1;
            }
            Action::Ter(payload) => {
                let tok = self
                    .ter_token(payload)
                    .ok_or_else(|| self.illegal(action))?;
                self.stack.push(StackItem::Done(Tree::Leaf(tok)));
            }
            Action::Reduce => {
                let k = self.top_open_children();
                let children: Vec<Tree> = self
                    .stack
                    .drain(self.stack.len() - k..)
                    .map(|it| match it {
                        StackItem::Done(t) => t,
                        StackItem::Open(_) => unreachable!("only closed items above top open"),
                    })
                    .collect();
                let label = match self.stack.pop() {
                    Some(StackItem::Open(l)) => l,
                    _ => unreachable!("open count >= 1"),
                };
                self.open -= 1;
                let node = Tree::Node { label, children };
                if self.open == 0 {
                    self.completed = Some(node.clone());
                }
                self.stack.push(StackItem::Done(node));
            }
        }
        self.actions += 1;
        Ok(())
    }

    /// Best-effort tree for an unfinished parse: open nodes are closed and
    /// empty ones dropped.
    pub fn partial_tree(&self) -> Option<Tree> {
        if let Some(t) = &self.completed {
            return Some(t.clone());
        }
        let mut frames: Vec<(String, Vec<Tree>)> = Vec::new();
        let mut loose: Vec<Tree> = Vec::new();
        for it in &self.stack {
            match it {
                StackItem::Open(l) => frames.push((l.clone(), Vec::new())),
                StackItem::Done(t) => match frames.last_mut() {
                    Some((_, ch)) => ch.push(t.clone()),
                    None => loose.push(t.clone()),
                },
            }
        }
        let mut carry: Option<Tree> = None;
        while let Some((label, mut children)) = frames.pop() {
            if let Some(c) = carry.take() {
                children.push(c);
            }
            if !children.is_empty() {
                carry = Some(Tree::Node { label, children });
            }
        }
        carry.or_else(|| loose.pop())
    }
}

pub fn apply_action(state: &SymbolicState, action: &Action) -> Result<SymbolicState> {
    let mut next = state.clone();
    next.apply(action)?;
    Ok(next)
}

/// Pre-order action sequence rebuilding `tree`.
///
/// Leaves present in the sentence are copied (first occurrence) when `copy`
/// is on; otherwise they are generated and must be in `terminals`.
pub fn oracle_actions(
    tree: &Tree,
    sentence: &[String],
    terminals: &Vocab,
    copy: bool,
) -> Result<Vec<Action>> {
    if tree.is_leaf() {
        return Err(Error::Invalid(format!(
            "root must be a non-terminal, got leaf `{}`",
            tree.label()
        )));
    }
    let mut out = Vec::with_capacity(tree.node_count() + tree.internal_count());
    oracle_walk(tree, sentence, terminals, copy, &mut out)?;
    Ok(out)
}

fn oracle_walk(
    tree: &Tree,
    sentence: &[String],
    terminals: &Vocab,
    copy: bool,
    out: &mut Vec<Action>,
) -> Result<()> {
    match tree {
        Tree::Leaf(tok) => {
            let pos = if copy {
                sentence.iter().position(|w| w == tok)
            } else {
                None
            };
            let action = match pos {
                Some(i) => Action::copy(i),
                None if terminals.contains(tok) => Action::gen(tok.clone()),
                None => return Err(Error::Uncopyable(tok.clone())),
            };
            out.push(action);
        }
        Tree::Node { label, children } => {
            if children.is_empty() {
                return Err(Error::EmptyNonTerminal(label.clone()));
            }
            out.push(Action::nt(label.clone()));
            for c in children {
                oracle_walk(c, sentence, terminals, copy, out)?;
            }
            out.push(Action::Reduce);
        }
    }
    Ok(())
}

/// Replays `actions` from a fresh state and returns the completed tree.
pub fn execute(actions: &[Action], sentence: &[String]) -> Result<Tree> {
    let mut st = SymbolicState::unbounded(sentence.to_vec().into());
    for (index, a) in actions.iter().enumerate() {
        st.apply(a).map_err(|e| Error::IllegalStep {
            index,
            source: Box::new(e),
        })?;
    }
    st.completed().cloned().ok_or(Error::Incomplete {
        actions: actions.len(),
    })
}
