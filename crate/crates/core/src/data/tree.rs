use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered logical-form tree.
///
/// `Node` carries a non-terminal label; `Leaf` carries a terminal token.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tree {
    Node { label: String, children: Vec<Tree> },
    Leaf(String),
}

impl Tree {
    pub fn node(label: impl Into<String>, children: Vec<Tree>) -> Self {
        Tree::Node {
            label: label.into(),
            children,
        }
    }

    pub fn leaf(token: impl Into<String>) -> Self {
        Tree::Leaf(token.into())
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Tree::Leaf(_))
    }

    pub fn label(&self) -> &str {
        match self {
            Tree::Node { label, .. } => label,
            Tree::Leaf(t) => t,
        }
    }

    pub fn children(&self) -> &[Tree] {
        match self {
            Tree::Node { children, .. } => children,
            Tree::Leaf(_) => &[],
        }
    }

    pub fn node_count(&self) -> usize {
        1 + self.children().iter().map(Tree::node_count).sum::<usize>()
    }

    pub fn internal_count(&self) -> usize {
        match self {
            Tree::Leaf(_) => 0,
            Tree::Node { children, .. } => {
                1 + children.iter().map(Tree::internal_count).sum::<usize>()
            }
        }
    }

    pub fn depth(&self) -> usize {
        1 + self.children().iter().map(Tree::depth).max().unwrap_or(0)
    }

    /// Terminal tokens in left-to-right order.
    pub fn leaves(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Tree::Leaf(t) => out.push(t),
            Tree::Node { children, .. } => children.iter().for_each(|c| c.collect_leaves(out)),
        }
    }

    /// Non-terminal labels in pre-order.
    pub fn labels(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_labels(&mut out);
        out
    }

    fn collect_labels<'a>(&'a self, out: &mut Vec<&'a str>) {
        if let Tree::Node { label, children } = self {
            out.push(label);
            children.iter().for_each(|c| c.collect_labels(out));
        }
    }

    /// First non-terminal without children, if any.
    pub fn find_empty_node(&self) -> Option<&str> {
        match self {
            Tree::Leaf(_) => None,
            Tree::Node { label, children } if children.is_empty() => Some(label),
            Tree::Node { children, .. } => children.iter().find_map(Tree::find_empty_node),
        }
    }

    /// Canonical single-space parenthesised form.
    pub fn linearize(&self) -> String {
        let mut s = String::new();
        self.write_to(&mut s);
        s
    }

    fn write_to(&self, s: &mut String) {
        match self {
            Tree::Leaf(t) => s.push_str(t),
            Tree::Node { label, children } => {
                s.push('(');
                s.push_str(label);
                for c in children {
                    s.push(' ');
                    c.write_to(s);
                }
                s.push(')');
            }
        }
    }

    /// Tokens of the linearisation, parentheses excluded.
    pub fn symbols(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_symbols(&mut out);
        out
    }

    fn collect_symbols<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Tree::Leaf(t) => out.push(t),
            Tree::Node { label, children } => {
                out.push(label);
                children.iter().for_each(|c| c.collect_symbols(out));
            }
        }
    }
}

impl fmt::Display for Tree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.linearize())
    }
}

impl std::str::FromStr for Tree {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_logical_form(s)
    }
}

fn is_symbol_char(c: char) -> bool {
    !c.is_whitespace() && c != '(' && c != ')'
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn peek(&self) -> Option<char> {
        self.text[self.pos..].chars().next()
    }

    fn symbol(&mut self) -> Option<&'a str> {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if !is_symbol_char(c) {
                break;
            }
            self.pos += c.len_utf8();
        }
        (self.pos > start).then(|| &self.text[start..self.pos])
    }

    fn err(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::LogicalForm {
            offset,
            message: message.into(),
        }
    }

    fn node(&mut self) -> Result<Tree> {
        let open = self.pos;
        debug_assert_eq!(self.peek(), Some('('));
        self.pos += 1;
        self.skip_ws();
        let head_at = self.pos;
        let label = match self.symbol() {
            Some(l) => l.to_string(),
            None => {
                return Err(match self.peek() {
                    Some(')') => self.err(open, "empty node"),
                    Some(_) => self.err(head_at, "missing head symbol"),
                    None => self.err(open, "unbalanced parentheses: unclosed '('"),
                })
            }
        };
        let mut children = Vec::new();
        loop {
            self.skip_ws();
            match self.peek() {
                None => return Err(self.err(open, "unbalanced parentheses: unclosed '('")),
                Some(')') => {
                    self.pos += 1;
                    return Ok(Tree::Node { label, children });
                }
                Some('(') => children.push(self.node()?),
                Some(_) => {
                    let sym = self.symbol().expect("symbol char");
                    children.push(Tree::Leaf(sym.to_string()));
                }
            }
        }
    }
}

/// Parses a parenthesised logical form such as `(count (houses))`.
///
/// The symbol after each `(` is the node label; bare symbols in argument
/// position become terminals. Whitespace is insignificant.
pub fn parse_logical_form(text: &str) -> Result<Tree> {
    let mut cur = Cursor { text, pos: 0 };
    cur.skip_ws();
    match cur.peek() {
        None => return Err(cur.err(0, "empty logical form")),
        Some('(') => {}
        Some(')') => return Err(cur.err(cur.pos, "unbalanced parentheses: unexpected ')'")),
        Some(_) => return Err(cur.err(cur.pos, "expected '(' at the root")),
    }
    let tree = cur.node()?;
    cur.skip_ws();
    if let Some(c) = cur.peek() {
        let msg = if c == ')' {
            "unbalanced parentheses: unexpected ')'"
        } else {
            "trailing input after the root node"
        };
        return Err(cur.err(cur.pos, msg));
    }
    Ok(tree)
}

/// Builds the shallow intent/slot tree: the intent is the root, every tagged
/// word becomes `(Slot word)` in utterance order. Adjacent words with the same
/// slot stay separate nodes.
pub fn convert_slu(intent: &str, tagged: &[(String, Option<String>)]) -> Result<Tree> {
    if tagged.is_empty() {
        return Err(Error::Empty("convert_slu utterance"));
    }
    if intent.is_empty() || !intent.chars().all(is_symbol_char) {
        return Err(Error::Invalid(format!("invalid intent name `{intent}`")));
    }
    let children = tagged
        .iter()
        .filter_map(|(word, slot)| {
            slot.as_ref()
                .map(|s| Tree::node(s.clone(), vec![Tree::leaf(word.clone())]))
        })
        .collect();
    Ok(Tree::node(intent, children))
}
