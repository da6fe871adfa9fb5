//! Bracketed constituency trees: reading, cleanup rules, and writing.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

pub type NodeId = usize;

/// Penn Treebank part-of-speech tags (preterminal labels).
pub const POS_TAGS: &[&str] = &[
    "CC", "CD", "DT", "EX", "FW", "IN", "JJ", "JJR", "JJS", "LS", "MD", "NN", "NNS", "NNP", "NNPS",
    "PDT", "POS", "PRP", "PRP$", "RB", "RBR", "RBS", "RP", "SYM", "TO", "UH", "VB", "VBD", "VBG",
    "VBN", "VBP", "VBZ", "WDT", "WP", "WP$", "WRB", ".", ",", ":", "``", "''", "-LRB-", "-RRB-",
    "#", "$",
];

pub const PUNCTUATION: &[&str] = &[".", "?", "!", ",", ";", ":"];

pub fn is_pos_tag(label: &str) -> bool {
    POS_TAGS.contains(&label)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeKind {
    Internal(String),
    Leaf(String),
}

#[derive(Debug, Clone)]
pub struct Node {
    pub kind: NodeKind,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    detached: bool,
}

/// Ordered rooted tree. Nodes live in an arena; ids stay valid after edits
/// (removed nodes are detached, never reused).
#[derive(Debug, Clone)]
pub struct SyntaxTree {
    nodes: Vec<Node>,
    root: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SyntaxError {
    #[error("unexpected end of input at offset {0}")]
    UnexpectedEnd(usize),
    #[error("unexpected `{found}` at offset {offset}")]
    Unexpected { offset: usize, found: char },
    #[error("constituent without children at offset {0}")]
    EmptyConstituent(usize),
    #[error("trailing input at offset {0}")]
    Trailing(usize),
    #[error("empty input")]
    Empty,
    #[error("node {0} cannot be eliminated: {1}")]
    NotEliminable(NodeId, &'static str),
}

impl SyntaxTree {
    fn push(&mut self, kind: NodeKind, parent: Option<NodeId>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            kind,
            parent,
            children: Vec::new(),
            detached: false,
        });
        if let Some(p) = parent {
            self.nodes[p].children.push(id);
        }
        id
    }

    /// A tree consisting of a single internal node.
    pub fn with_root(label: &str) -> Self {
        let mut t = SyntaxTree {
            nodes: Vec::new(),
            root: 0,
        };
        t.push(NodeKind::Internal(label.to_string()), None);
        t
    }

    pub fn add_internal(&mut self, parent: NodeId, label: &str) -> NodeId {
        self.push(NodeKind::Internal(label.to_string()), Some(parent))
    }

    pub fn add_leaf(&mut self, parent: NodeId, token: &str) -> NodeId {
        self.push(NodeKind::Leaf(token.to_string()), Some(parent))
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id].children
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id].parent
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id].kind, NodeKind::Leaf(_))
    }

    pub fn is_attached(&self, id: NodeId) -> bool {
        !self.nodes[id].detached
    }

    /// Syntax label of an internal node; `None` for leaves.
    pub fn label(&self, id: NodeId) -> Option<&str> {
        match &self.nodes[id].kind {
            NodeKind::Internal(l) => Some(l),
            NodeKind::Leaf(_) => None,
        }
    }

    pub fn token(&self, id: NodeId) -> Option<&str> {
        match &self.nodes[id].kind {
            NodeKind::Leaf(t) => Some(t),
            NodeKind::Internal(_) => None,
        }
    }

    pub fn has_leaf_child(&self, id: NodeId) -> bool {
        self.nodes[id].children.iter().any(|&c| self.is_leaf(c))
    }

    /// Reachable nodes in breadth-first, left-to-right order.
    pub fn bfs(&self) -> Vec<NodeId> {
        let mut order = alloc::vec![self.root];
        let mut i = 0;
        while i < order.len() {
            let n = order[i];
            order.extend_from_slice(&self.nodes[n].children);
            i += 1;
        }
        order
    }

    /// Reachable leaves in left-to-right order.
    pub fn leaves(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = alloc::vec![self.root];
        while let Some(n) = stack.pop() {
            if self.is_leaf(n) {
                out.push(n);
            } else {
                stack.extend(self.nodes[n].children.iter().rev());
            }
        }
        out
    }

    pub fn leaf_tokens(&self) -> Vec<&str> {
        self.leaves()
            .into_iter()
            .filter_map(|l| self.token(l))
            .collect()
    }

    /// Leaf tokens joined by single spaces.
    pub fn text(&self) -> String {
        self.leaf_tokens().join(" ")
    }

    /// Leaves dominated by `id`, in order.
    pub fn yield_of(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = alloc::vec![id];
        while let Some(n) = stack.pop() {
            if self.is_leaf(n) {
                out.push(n);
            } else {
                stack.extend(self.nodes[n].children.iter().rev());
            }
        }
        out
    }

    fn detach(&mut self, id: NodeId) {
        self.nodes[id].detached = true;
        self.nodes[id].parent = None;
        self.nodes[id].children.clear();
    }

    /// Removes internal, non-root `v` and splices its children into its parent at
    /// `v`'s position.
    pub fn eliminate(&mut self, v: NodeId) -> Result<(), SyntaxError> {
        if v == self.root {
            return Err(SyntaxError::NotEliminable(v, "root"));
        }
        if self.is_leaf(v) {
            return Err(SyntaxError::NotEliminable(v, "leaf"));
        }
        let parent = self.nodes[v]
            .parent
            .ok_or(SyntaxError::NotEliminable(v, "detached"))?;
        let kids = core::mem::take(&mut self.nodes[v].children);
        for &k in &kids {
            self.nodes[k].parent = Some(parent);
        }
        let siblings = &mut self.nodes[parent].children;
        let pos = siblings.iter().position(|&c| c == v).expect("child link");
        siblings.splice(pos..=pos, kids);
        self.detach(v);
        Ok(())
    }

    /// Removes a subtree entirely.
    fn remove_subtree(&mut self, v: NodeId) {
        if let Some(p) = self.nodes[v].parent {
            self.nodes[p].children.retain(|&c| c != v);
        }
        for n in self.yield_nodes(v) {
            self.detach(n);
        }
    }

    fn yield_nodes(&self, v: NodeId) -> Vec<NodeId> {
        let mut out = alloc::vec![v];
        let mut i = 0;
        while i < out.len() {
            out.extend_from_slice(&self.nodes[out[i]].children);
            i += 1;
        }
        out
    }

    /// Post-order over reachable nodes.
    fn post_order(&self) -> Vec<NodeId> {
        let mut out = self.bfs();
        // Reverse BFS visits every child before its parent.
        out.reverse();
        out
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        self.write_node(self.root, &mut s);
        s
    }

    fn write_node(&self, id: NodeId, out: &mut String) {
        match &self.nodes[id].kind {
            NodeKind::Leaf(t) => escape_into(t, out),
            NodeKind::Internal(l) => {
                out.push('(');
                out.push_str(l);
                for &c in &self.nodes[id].children {
                    out.push(' ');
                    self.write_node(c, out);
                }
                out.push(')');
            }
        }
    }

    /// Copy with only reachable nodes, renumbered in pre-order.
    pub fn compact(&self) -> SyntaxTree {
        let mut t = SyntaxTree {
            nodes: Vec::new(),
            root: 0,
        };
        let mut stack = alloc::vec![(self.root, None)];
        while let Some((n, parent)) = stack.pop() {
            let id = t.push(self.nodes[n].kind.clone(), parent);
            for &c in self.nodes[n].children.iter().rev() {
                stack.push((c, Some(id)));
            }
        }
        t
    }

    fn same_shape(&self, a: NodeId, other: &SyntaxTree, b: NodeId) -> bool {
        self.nodes[a].kind == other.nodes[b].kind
            && self.nodes[a].children.len() == other.nodes[b].children.len()
            && self.nodes[a]
                .children
                .iter()
                .zip(&other.nodes[b].children)
                .all(|(&x, &y)| self.same_shape(x, other, y))
    }
}

impl PartialEq for SyntaxTree {
    fn eq(&self, other: &Self) -> bool {
        self.same_shape(self.root, other, other.root)
    }
}

impl Eq for SyntaxTree {}

impl fmt::Display for SyntaxTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

fn escape_into(token: &str, out: &mut String) {
    for ch in token.chars() {
        if matches!(ch, ' ' | '(' | ')' | '\\') {
            out.push('\\');
        }
        out.push(ch);
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

#[derive(Debug)]
enum Raw {
    Tree(String, Vec<Raw>),
    Atom(String),
}

impl Parser<'_> {
    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn atom(&mut self) -> Result<String, SyntaxError> {
        let mut s = String::new();
        while let Some(c) = self.peek() {
            if c.is_whitespace() || c == '(' || c == ')' {
                break;
            }
            self.pos += c.len_utf8();
            if c == '\\' {
                let next = self.peek().ok_or(SyntaxError::UnexpectedEnd(self.pos))?;
                self.pos += next.len_utf8();
                s.push(next);
            } else {
                s.push(c);
            }
        }
        Ok(s)
    }

    fn tree(&mut self) -> Result<Raw, SyntaxError> {
        let open = self.pos;
        match self.peek() {
            Some('(') => self.pos += 1,
            Some(c) => {
                return Err(SyntaxError::Unexpected {
                    offset: self.pos,
                    found: c,
                })
            }
            None => return Err(SyntaxError::UnexpectedEnd(self.pos)),
        }
        self.skip_ws();
        let label = match self.peek() {
            Some('(') => String::new(),
            Some(')') => return Err(SyntaxError::EmptyConstituent(open)),
            Some(_) => self.atom()?,
            None => return Err(SyntaxError::UnexpectedEnd(self.pos)),
        };
        let mut children = Vec::new();
        loop {
            self.skip_ws();
            match self.peek() {
                None => return Err(SyntaxError::UnexpectedEnd(self.pos)),
                Some(')') => {
                    self.pos += 1;
                    break;
                }
                Some('(') => children.push(self.tree()?),
                Some(_) => children.push(Raw::Atom(self.atom()?)),
            }
        }
        if children.is_empty() {
            return Err(SyntaxError::EmptyConstituent(open));
        }
        Ok(Raw::Tree(label, children))
    }
}

/// Reads one bracketed parse. An unlabeled outer bracket with a single child is
/// unwrapped (`((S ...))` reads as `(S ...)`); with several children it becomes `ROOT`.
pub fn parse_bracketed(text: &str) -> Result<SyntaxTree, SyntaxError> {
    let mut p = Parser { src: text, pos: 0 };
    p.skip_ws();
    if p.peek().is_none() {
        return Err(SyntaxError::Empty);
    }
    let mut raw = p.tree()?;
    p.skip_ws();
    if p.pos < text.len() {
        return Err(SyntaxError::Trailing(p.pos));
    }
    loop {
        match raw {
            Raw::Tree(ref l, ref mut kids) if l.is_empty() => {
                if kids.len() == 1 && matches!(kids[0], Raw::Tree(..)) {
                    raw = kids.pop().expect("one child");
                } else {
                    raw = Raw::Tree("ROOT".to_string(), core::mem::take(kids));
                }
            }
            _ => break,
        }
    }
    let Raw::Tree(label, kids) = raw else {
        unreachable!("parser always returns a tree")
    };
    let mut t = SyntaxTree::with_root(&label);
    let mut stack: Vec<(NodeId, Vec<Raw>)> = alloc::vec![(t.root, kids)];
    while let Some((parent, kids)) = stack.pop() {
        for k in kids {
            match k {
                Raw::Atom(tok) => {
                    t.add_leaf(parent, &tok);
                }
                Raw::Tree(l, sub) => {
                    let id = t.add_internal(parent, if l.is_empty() { "ROOT" } else { &l });
                    stack.push((id, sub));
                }
            }
        }
    }
    Ok(t)
}

/// Cleanup applied before fact-tree construction:
///
/// 1. punctuation leaves are pruned together with their (then empty) parents;
/// 2. an `NP` whose children are all part-of-speech nodes over leaves, with more
///    than one grandchild, absorbs them into one leaf (`the NBA championship`);
/// 3. a node with a single child that has a single leaf child takes the leaf
///    directly (`WHNP -> WP -> who` becomes `WHNP -> who`).
///
/// Rules 2 and 3 run bottom-up and are repeated until nothing changes, which
/// makes the whole transformation idempotent.
pub fn preprocess(tree: &SyntaxTree) -> SyntaxTree {
    let mut t = tree.clone();
    prune_punctuation(&mut t);
    loop {
        let merged = merge_noun_phrases(&mut t);
        let collapsed = collapse_chains(&mut t);
        if !merged && !collapsed {
            break;
        }
    }
    t.compact()
}

fn prune_punctuation(t: &mut SyntaxTree) {
    for leaf in t.leaves() {
        let is_punct = t.token(leaf).is_some_and(|tok| PUNCTUATION.contains(&tok));
        if !is_punct {
            continue;
        }
        let mut node = leaf;
        loop {
            let parent = t.parent(node);
            t.remove_subtree(node);
            match parent {
                Some(p) if p != t.root && t.children(p).is_empty() => node = p,
                _ => break,
            }
        }
    }
}

fn merge_noun_phrases(t: &mut SyntaxTree) -> bool {
    let mut changed = false;
    for n in t.post_order() {
        if t.label(n) != Some("NP") {
            continue;
        }
        let kids = t.children(n).to_vec();
        let all_pos = kids.iter().all(|&k| {
            t.label(k).is_some_and(is_pos_tag)
                && !t.children(k).is_empty()
                && t.children(k).iter().all(|&g| t.is_leaf(g))
        });
        let grandchildren: usize = kids.iter().map(|&k| t.children(k).len()).sum();
        if kids.is_empty() || !all_pos || grandchildren < 2 {
            continue;
        }
        let words: Vec<String> = kids
            .iter()
            .flat_map(|&k| t.children(k).iter().filter_map(|&g| t.token(g)))
            .map(ToString::to_string)
            .collect();
        for k in kids {
            t.remove_subtree(k);
        }
        t.add_leaf(n, &words.join(" "));
        changed = true;
    }
    changed
}

fn collapse_chains(t: &mut SyntaxTree) -> bool {
    let mut changed = false;
    for n in t.post_order() {
        if t.is_leaf(n) || !t.is_attached(n) {
            continue;
        }
        let kids = t.children(n);
        if kids.len() != 1 || t.is_leaf(kids[0]) {
            continue;
        }
        let only = kids[0];
        let grand = t.children(only);
        if grand.len() == 1 && t.is_leaf(grand[0]) {
            t.eliminate(only).expect("non-root internal node");
            changed = true;
        }
    }
    changed
}
