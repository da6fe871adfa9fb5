//! Natural-language and KG fact trees.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::kg::{EntityId, KnowledgeGraph, NAryFact, RelationId};

/// Syntax symbol carried by every placeholder item.
pub const PLH: &str = "PLH";

/// Location role of an item inside a fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Loc {
    S,
    P,
    O,
    A,
    V,
}

impl Loc {
    pub const ALL: [Loc; 5] = [Loc::S, Loc::P, Loc::O, Loc::A, Loc::V];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Loc {
        Loc::ALL[i]
    }

    pub fn parse(s: &str) -> Option<Loc> {
        Some(match s {
            "S" => Loc::S,
            "P" => Loc::P,
            "O" => Loc::O,
            "A" => Loc::A,
            "V" => Loc::V,
            _ => return None,
        })
    }
}

impl fmt::Display for Loc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Loc::S => "S",
            Loc::P => "P",
            Loc::O => "O",
            Loc::A => "A",
            Loc::V => "V",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ItemKind {
    Token(String),
    /// The slot holding the question's answer.
    Answer,
    /// Bound to the output of `children[i]`.
    Child(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NlItem {
    pub kind: ItemKind,
    /// Parent syntax label of the leaf, or [`PLH`].
    pub syn: String,
    /// Gold location label when known.
    pub loc: Option<Loc>,
}

impl NlItem {
    pub fn token(text: &str, syn: &str) -> Self {
        NlItem {
            kind: ItemKind::Token(text.into()),
            syn: syn.into(),
            loc: None,
        }
    }

    pub fn placeholder(kind: ItemKind) -> Self {
        NlItem {
            kind,
            syn: PLH.into(),
            loc: None,
        }
    }

    pub fn with_loc(mut self, loc: Loc) -> Self {
        self.loc = Some(loc);
        self
    }

    pub fn is_placeholder(&self) -> bool {
        !matches!(self.kind, ItemKind::Token(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NlFact {
    pub items: Vec<NlItem>,
    pub children: Vec<NlFact>,
}

impl NlFact {
    /// Same items and shape, ignoring location labels.
    pub fn same_shape(&self, other: &NlFact) -> bool {
        self.items.len() == other.items.len()
            && self.children.len() == other.children.len()
            && self
                .items
                .iter()
                .zip(&other.items)
                .all(|(a, b)| a.kind == b.kind && a.syn == b.syn)
            && self
                .children
                .iter()
                .zip(&other.children)
                .all(|(a, b)| a.same_shape(b))
    }

    pub fn count_facts(&self) -> usize {
        1 + self.children.iter().map(NlFact::count_facts).sum::<usize>()
    }

    pub fn count_placeholders(&self) -> usize {
        self.items.iter().filter(|i| i.is_placeholder()).count()
            + self
                .children
                .iter()
                .map(NlFact::count_placeholders)
                .sum::<usize>()
    }

    pub fn count_answers(&self) -> usize {
        self.items
            .iter()
            .filter(|i| i.kind == ItemKind::Answer)
            .count()
            + self
                .children
                .iter()
                .map(NlFact::count_answers)
                .sum::<usize>()
    }

    /// Text of the fact with placeholders shown as `□`.
    pub fn surface(&self) -> String {
        let parts: Vec<&str> = self
            .items
            .iter()
            .map(|i| match &i.kind {
                ItemKind::Token(t) => t.as_str(),
                _ => "□",
            })
            .collect();
        parts.join(" ")
    }

    /// Question tokens covered by this fact and its descendants, in order.
    /// Child placeholders expand in place; the answer slot stays as `None`.
    pub fn flatten(&self) -> Vec<Option<&str>> {
        let mut out = Vec::new();
        for item in &self.items {
            match &item.kind {
                ItemKind::Token(t) => out.push(Some(t.as_str())),
                ItemKind::Answer => out.push(None),
                ItemKind::Child(i) => {
                    if let Some(c) = self.children.get(*i) {
                        out.extend(c.flatten());
                    }
                }
            }
        }
        out
    }

    /// Checks that each child is bound exactly once and indices are in range.
    pub fn bindings_valid(&self) -> bool {
        let mut seen = alloc::vec![0usize; self.children.len()];
        for item in &self.items {
            if let ItemKind::Child(i) = item.kind {
                match seen.get_mut(i) {
                    Some(n) => *n += 1,
                    None => return false,
                }
            }
        }
        seen.iter().all(|&n| n == 1) && self.children.iter().all(NlFact::bindings_valid)
    }
}

/// Tree of natural-language facts; the root holds the answer slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NlFactTree {
    pub root: NlFact,
}

impl NlFactTree {
    pub fn well_formed(&self) -> bool {
        self.root.count_answers() == 1 && self.root.bindings_valid()
    }

    pub fn n_facts(&self) -> usize {
        self.root.count_facts()
    }
}

/// A position in a grounded fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Term {
    Entity(EntityId),
    /// The question's answer (root fact only).
    Answer,
    /// The entity this non-root fact passes to its parent.
    Out,
    /// Filled by the output of `children[i]`.
    Child(usize),
}

impl Term {
    pub fn is_placeholder(self) -> bool {
        !matches!(self, Term::Entity(_))
    }

    pub fn entity(self) -> Option<EntityId> {
        match self {
            Term::Entity(e) => Some(e),
            _ => None,
        }
    }
}

/// Where a term sits inside a fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    Subject,
    Object,
    Value(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KgFact {
    pub s: Term,
    pub p: RelationId,
    pub o: Term,
    pub attrs: Vec<(RelationId, Term)>,
}

impl KgFact {
    pub fn terms(&self) -> impl Iterator<Item = (Position, Term)> + '_ {
        [(Position::Subject, self.s), (Position::Object, self.o)]
            .into_iter()
            .chain(
                self.attrs
                    .iter()
                    .enumerate()
                    .map(|(i, &(_, v))| (Position::Value(i), v)),
            )
    }

    pub fn term(&self, pos: Position) -> Term {
        match pos {
            Position::Subject => self.s,
            Position::Object => self.o,
            Position::Value(i) => self.attrs[i].1,
        }
    }

    pub fn set(&mut self, pos: Position, t: Term) {
        match pos {
            Position::Subject => self.s = t,
            Position::Object => self.o = t,
            Position::Value(i) => self.attrs[i].1 = t,
        }
    }

    pub fn placeholders(&self) -> Vec<(Position, Term)> {
        self.terms().filter(|(_, t)| t.is_placeholder()).collect()
    }

    pub fn find(&self, t: Term) -> Option<Position> {
        self.terms().find(|&(_, x)| x == t).map(|(p, _)| p)
    }

    /// The relation adjacent to `pos`: the attribute for a value slot, the
    /// predicate otherwise.
    pub fn relation_at(&self, pos: Position) -> RelationId {
        match pos {
            Position::Value(i) => self.attrs[i].0,
            _ => self.p,
        }
    }

    /// The stored-fact form once every term is an entity.
    pub fn ground(&self) -> Option<NAryFact> {
        Some(NAryFact {
            s: self.s.entity()?,
            p: self.p,
            o: self.o.entity()?,
            attrs: self
                .attrs
                .iter()
                .map(|&(a, v)| v.entity().map(|e| (a, e)))
                .collect::<Option<Vec<_>>>()?,
        })
    }

    pub fn display(&self, kg: &KnowledgeGraph) -> String {
        let t = |t: Term| -> String {
            match t {
                Term::Entity(e) => kg.entity_name(e).into(),
                Term::Answer => "?ans".into(),
                Term::Out => "?out".into(),
                Term::Child(i) => alloc::format!("?c{i}"),
            }
        };
        let mut s = alloc::format!(
            "({}, {}, {})",
            t(self.s),
            kg.relation_name(self.p),
            t(self.o)
        );
        for &(a, v) in &self.attrs {
            s.push_str(&alloc::format!(" {}:{}", kg.relation_name(a), t(v)));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KgFactNode {
    pub fact: KgFact,
    pub children: Vec<KgFactNode>,
    /// Gold entity for this fact's placeholder, when known.
    pub gold: Option<EntityId>,
}

impl KgFactNode {
    pub fn count_facts(&self) -> usize {
        1 + self
            .children
            .iter()
            .map(KgFactNode::count_facts)
            .sum::<usize>()
    }

    pub fn count_placeholders(&self) -> usize {
        self.fact.placeholders().len()
            + self
                .children
                .iter()
                .map(KgFactNode::count_placeholders)
                .sum::<usize>()
    }

    /// Same shape as another node (children counts match recursively).
    pub fn isomorphic(&self, other: &KgFactNode) -> bool {
        self.children.len() == other.children.len()
            && self
                .children
                .iter()
                .zip(&other.children)
                .all(|(a, b)| a.isomorphic(b))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KgFactTree {
    pub root: KgFactNode,
}

impl KgFactTree {
    pub fn n_facts(&self) -> usize {
        self.root.count_facts()
    }

    /// Root holds exactly one answer slot; every non-root fact exactly one `Out`;
    /// every child is bound exactly once by its parent; no fact holds an `Answer`
    /// below the root.
    pub fn well_formed(&self) -> bool {
        fn check(n: &KgFactNode, is_root: bool) -> bool {
            let count = |t: Term| n.fact.terms().filter(|&(_, x)| x == t).count();
            let own_ok = if is_root {
                count(Term::Answer) == 1 && count(Term::Out) == 0
            } else {
                count(Term::Out) == 1 && count(Term::Answer) == 0
            };
            let bind_ok = (0..n.children.len()).all(|i| count(Term::Child(i)) == 1)
                && n.fact.terms().all(|(_, t)| match t {
                    Term::Child(i) => i < n.children.len(),
                    _ => true,
                });
            own_ok && bind_ok && n.children.iter().all(|c| check(c, false))
        }
        check(&self.root, true)
    }
}
