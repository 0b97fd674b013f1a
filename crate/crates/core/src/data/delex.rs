//! Gazetteer-based delexicalisation.
//!
//! Phrases found by greedy longest match are replaced by `@TAG` tokens, both
//! in the utterance and across consecutive leaves of the gold tree. The
//! returned [`Alignment`] records every edit so that a predicted tree can be
//! re-lexicalised before scoring.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Example, Tree};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct Gazetteer {
    phrases: HashMap<Vec<String>, String>,
    tags: BTreeSet<String>,
    max_len: usize,
}

fn valid_tag(tag: &str) -> bool {
    !tag.is_empty() && !tag.contains(|c: char| c.is_whitespace() || c == '(' || c == ')')
}

impl Gazetteer {
    /// Builds a gazetteer. When `tagset` is given every tag must belong to it.
    pub fn new<I>(entries: I, tagset: Option<&[&str]>) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut g = Gazetteer::default();
        for (phrase, tag) in entries {
            let toks: Vec<String> = phrase.split_whitespace().map(str::to_string).collect();
            if toks.is_empty() {
                return Err(Error::Invalid("gazetteer phrase is empty".into()));
            }
            if !valid_tag(&tag) {
                return Err(Error::Invalid(format!("invalid gazetteer tag `{tag}`")));
            }
            if let Some(set) = tagset {
                if !set.contains(&tag.as_str()) {
                    return Err(Error::Invalid(format!(
                        "tag `{tag}` not in the declared tag set"
                    )));
                }
            }
            g.max_len = g.max_len.max(toks.len());
            g.tags.insert(tag.clone());
            g.phrases.insert(toks, tag);
        }
        Ok(g)
    }

    /// `surface phrase<TAB>TAG` per line; `#` comments allowed.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (phrase, tag) = line.split_once('\t').ok_or_else(|| {
                Error::Invalid(format!(
                    "gazetteer line {}: expected `phrase<TAB>TAG`",
                    i + 1
                ))
            })?;
            entries.push((phrase.to_string(), tag.trim().to_string()));
        }
        Gazetteer::new(entries, None)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Gazetteer::parse(&text)
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.tags.iter().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    /// Longest phrase starting at `tokens[0]`: `(length, tag)`.
    fn longest_match<S: AsRef<str>>(&self, tokens: &[S]) -> Option<(usize, &str)> {
        let upper = self.max_len.min(tokens.len());
        let mut key: Vec<String> = tokens[..upper]
            .iter()
            .map(|t| t.as_ref().to_string())
            .collect();
        for len in (1..=upper).rev() {
            key.truncate(len);
            if let Some(tag) = self.phrases.get(&key) {
                return Some((len, tag.as_str()));
            }
        }
        None
    }
}

pub fn tag_token(tag: &str) -> String {
    format!("@{tag}")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceEdit {
    /// Index of the `@TAG` token in the delexicalised utterance.
    pub position: usize,
    pub tag: String,
    pub surface: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Removal {
    pub parent: Vec<usize>,
    pub index: usize,
    pub subtree: Tree,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeEdit {
    /// Path of the `@TAG` leaf right after this edit.
    pub leaf: Vec<usize>,
    pub tag: String,
    pub surface: Vec<String>,
    /// Subtrees pruned for the 2nd..kth leaves of the span, in removal order.
    pub removals: Vec<Removal>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub utterance: Vec<UtteranceEdit>,
    pub tree: Vec<TreeEdit>,
}

impl Alignment {
    pub fn is_empty(&self) -> bool {
        self.utterance.is_empty() && self.tree.is_empty()
    }

    /// `(@TAG, surface)` pairs from the utterance side.
    pub fn mapping(&self) -> Vec<(String, String)> {
        self.utterance
            .iter()
            .map(|e| (tag_token(&e.tag), e.surface.join(" ")))
            .collect()
    }
}

fn leaf_paths(tree: &Tree) -> Vec<Vec<usize>> {
    fn walk(t: &Tree, path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        match t {
            Tree::Leaf(_) => out.push(path.clone()),
            Tree::Node { children, .. } => {
                for (i, c) in children.iter().enumerate() {
                    path.push(i);
                    walk(c, path, out);
                    path.pop();
                }
            }
        }
    }
    let mut out = Vec::new();
    walk(tree, &mut Vec::new(), &mut out);
    out
}

fn at<'a>(tree: &'a Tree, path: &[usize]) -> Option<&'a Tree> {
    path.iter().try_fold(tree, |t, &i| t.children().get(i))
}

fn at_mut<'a>(tree: &'a mut Tree, path: &[usize]) -> Option<&'a mut Tree> {
    let mut t = tree;
    for &i in path {
        t = match t {
            Tree::Node { children, .. } => children.get_mut(i)?,
            Tree::Leaf(_) => return None,
        };
    }
    Some(t)
}

fn children_mut<'a>(tree: &'a mut Tree, path: &[usize]) -> Option<&'a mut Vec<Tree>> {
    match at_mut(tree, path)? {
        Tree::Node { children, .. } => Some(children),
        Tree::Leaf(_) => None,
    }
}

fn delex_tokens(tokens: &[String], gaz: &Gazetteer) -> (Vec<String>, Vec<UtteranceEdit>) {
    let mut out = Vec::with_capacity(tokens.len());
    let mut edits = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        match gaz.longest_match(&tokens[i..]) {
            Some((len, tag)) => {
                edits.push(UtteranceEdit {
                    position: out.len(),
                    tag: tag.to_string(),
                    surface: tokens[i..i + len].to_vec(),
                });
                out.push(tag_token(tag));
                i += len;
            }
            None => {
                out.push(tokens[i].clone());
                i += 1;
            }
        }
    }
    (out, edits)
}

fn delex_tree(tree: &Tree, gaz: &Gazetteer) -> (Tree, Vec<TreeEdit>) {
    let mut tree = tree.clone();
    let mut edits = Vec::new();
    let mut p = 0;
    loop {
        let paths = leaf_paths(&tree);
        if p >= paths.len() {
            break;
        }
        let tokens: Vec<&str> = paths
            .iter()
            .map(|path| at(&tree, path).map(Tree::label).unwrap_or(""))
            .collect();
        let Some((len, tag)) = gaz.longest_match(&tokens[p..]) else {
            p += 1;
            continue;
        };
        let tag = tag.to_string();
        let surface: Vec<String> = tokens[p..p + len].iter().map(|s| s.to_string()).collect();
        let leaf = paths[p].clone();
        *at_mut(&mut tree, &leaf).expect("leaf path") = Tree::Leaf(tag_token(&tag));
        let mut removals = Vec::new();
        for _ in 1..len {
            let paths = leaf_paths(&tree);
            let mut path = paths[p + 1].clone();
            // climb through single-child ancestors, which hold only this leaf
            while path.len() > 1 {
                let parent = &path[..path.len() - 1];
                if at(&tree, parent).map(|n| n.children().len()) == Some(1) {
                    path.pop();
                } else {
                    break;
                }
            }
            let index = path.pop().expect("non-root leaf");
            let subtree = children_mut(&mut tree, &path)
                .expect("parent node")
                .remove(index);
            removals.push(Removal {
                parent: path,
                index,
                subtree,
            });
        }
        edits.push(TreeEdit {
            leaf,
            tag,
            surface,
            removals,
        });
        p += 1;
    }
    (tree, edits)
}

/// Replaces gazetteer phrases in the utterance and gold tree by `@TAG`.
pub fn delexicalize(example: &Example, gaz: &Gazetteer) -> (Example, Alignment) {
    let (tokens, utterance) = delex_tokens(&example.tokens, gaz);
    let (gold, tree) = delex_tree(&example.gold, gaz);
    let ex = Example {
        tokens,
        gold,
        task_id: example.task_id.clone(),
        raw: example.raw.clone(),
    };
    (ex, Alignment { utterance, tree })
}

/// Applies the delexicalisation of an utterance only (used at parse time).
pub fn delexicalize_tokens(tokens: &[String], gaz: &Gazetteer) -> (Vec<String>, Alignment) {
    let (tokens, utterance) = delex_tokens(tokens, gaz);
    (
        tokens,
        Alignment {
            utterance,
            tree: Vec::new(),
        },
    )
}

fn undo_edit(tree: &mut Tree, edit: &TreeEdit) -> bool {
    let tag = tag_token(&edit.tag);
    if at(tree, &edit.leaf) != Some(&Tree::Leaf(tag)) {
        return false;
    }
    // validate every insertion point before mutating
    let mut probe = tree.clone();
    for r in edit.removals.iter().rev() {
        match children_mut(&mut probe, &r.parent) {
            Some(ch) if r.index <= ch.len() => ch.insert(r.index, r.subtree.clone()),
            _ => return false,
        }
    }
    *at_mut(&mut probe, &edit.leaf).expect("validated") = Tree::Leaf(edit.surface[0].clone());
    *tree = probe;
    true
}

fn replace_tag_leaves(tree: &mut Tree, pending: &mut Vec<(String, Vec<String>)>) {
    if let Tree::Node { children, .. } = tree {
        let mut out = Vec::with_capacity(children.len());
        for mut c in std::mem::take(children) {
            match &c {
                Tree::Leaf(tok) => match pending.iter().position(|(t, _)| t == tok) {
                    Some(k) => {
                        let (_, surface) = pending.remove(k);
                        out.extend(surface.into_iter().map(Tree::Leaf));
                    }
                    None => out.push(c),
                },
                Tree::Node { .. } => {
                    replace_tag_leaves(&mut c, pending);
                    out.push(c);
                }
            }
        }
        *children = out;
    }
}

/// Restores surfaces in a (possibly predicted) delexicalised tree.
///
/// Recorded tree edits are undone exactly when the tree still has the
/// recorded shape; any remaining `@TAG` leaves take the utterance surfaces of
/// that tag in order, as sibling leaves.
pub fn relexicalize_tree(tree: &Tree, alignment: &Alignment) -> Tree {
    let mut out = tree.clone();
    let mut pending: Vec<(String, Vec<String>)> = Vec::new();
    for edit in alignment.tree.iter().rev() {
        if !undo_edit(&mut out, edit) {
            pending.push((tag_token(&edit.tag), edit.surface.clone()));
        }
    }
    pending.reverse();
    if alignment.tree.is_empty() {
        pending = alignment
            .utterance
            .iter()
            .map(|e| (tag_token(&e.tag), e.surface.clone()))
            .collect();
    }
    if !pending.is_empty() {
        replace_tag_leaves(&mut out, &mut pending);
    }
    out
}

pub fn relexicalize_tokens(tokens: &[String], alignment: &Alignment) -> Vec<String> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut edits = alignment.utterance.iter().peekable();
    for (i, t) in tokens.iter().enumerate() {
        match edits.peek() {
            Some(e) if e.position == i => {
                out.extend(e.surface.iter().cloned());
                edits.next();
            }
            _ => out.push(t.clone()),
        }
    }
    out
}

pub fn relexicalize(example: &Example, alignment: &Alignment) -> Example {
    Example {
        tokens: relexicalize_tokens(&example.tokens, alignment),
        gold: relexicalize_tree(&example.gold, alignment),
        task_id: example.task_id.clone(),
        raw: example.raw.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_logical_form;

    fn example(utt: &str, lf: &str) -> Example {
        Example::new(
            utt.split_whitespace().map(str::to_string).collect(),
            parse_logical_form(lf).unwrap(),
            "t",
            utt,
        )
        .unwrap()
    }

    fn gaz(entries: &[(&str, &str)]) -> Gazetteer {
        Gazetteer::new(
            entries.iter().map(|(p, t)| (p.to_string(), t.to_string())),
            None,
        )
        .unwrap()
    }

    #[test]
    fn replaces_phrase_in_utterance_and_tree() {
        let e = example(
            "screen Star Wars tonight",
            "(FindCinema (Title Star Wars) (Time tonight))",
        );
        let (d, al) = delexicalize(&e, &gaz(&[("Star Wars", "TITLE")]));
        assert_eq!(d.tokens.join(" "), "screen @TITLE tonight");
        assert_eq!(
            d.gold.linearize(),
            "(FindCinema (Title @TITLE) (Time tonight))"
        );
        assert_eq!(
            al.mapping(),
            vec![("@TITLE".to_string(), "Star Wars".to_string())]
        );
        assert_eq!(relexicalize(&d, &al), e);
    }

    #[test]
    fn span_across_separate_nodes_is_restored() {
        let e = example(
            "which cinemas screen Star Wars tonight",
            "(FindCinema (Title Star) (Title Wars) (Time tonight))",
        );
        let (d, al) = delexicalize(&e, &gaz(&[("Star Wars", "TITLE")]));
        assert_eq!(
            d.gold.linearize(),
            "(FindCinema (Title @TITLE) (Time tonight))"
        );
        assert_eq!(relexicalize(&d, &al), e);
    }

    #[test]
    fn longest_match_wins() {
        let g = gaz(&[("New", "X"), ("New York", "CITY")]);
        let (toks, _) = delex_tokens(&["to", "New", "York", "New"].map(str::to_string), &g);
        assert_eq!(toks, vec!["to", "@CITY", "@X"]);
    }

    #[test]
    fn empty_gazetteer_is_identity() {
        let e = example("a b", "(f a (g b))");
        let (d, al) = delexicalize(&e, &Gazetteer::default());
        assert_eq!(d, e);
        assert!(al.is_empty());
    }

    #[test]
    fn wrong_shape_prediction_still_relexicalises_leaves() {
        let e = example("see Star Wars", "(f (Title Star) (Title Wars))");
        let (_, al) = delexicalize(&e, &gaz(&[("Star Wars", "TITLE")]));
        let pred = parse_logical_form("(g x @TITLE)").unwrap();
        assert_eq!(relexicalize_tree(&pred, &al).linearize(), "(g x Star Wars)");
    }

    #[test]
    fn undeclared_tag_rejected() {
        let r = Gazetteer::new(vec![("a".to_string(), "B".to_string())], Some(&["A"]));
        assert!(r.is_err());
        assert!(Gazetteer::parse("no tab here").is_err());
    }
}
