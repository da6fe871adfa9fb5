//! Immutable, indexed store of n-ary facts.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KgError {
    #[error("unknown entity id {0}")]
    UnknownEntity(u32),
    #[error("unknown relation id {0}")]
    UnknownRelation(u32),
    #[error("unknown entity `{0}`")]
    UnknownEntityName(String),
    #[error("unknown relation `{0}`")]
    UnknownRelationName(String),
    #[error("duplicate attribute pair ({0}, {1}) within one fact")]
    DuplicateAttribute(String, String),
    #[error("empty name in fact record")]
    EmptyName,
    #[error("pattern must contain exactly one hole, found {0}")]
    HoleCount(usize),
}

/// Bijection between dense ids and canonical strings.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Interner {
    names: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Interner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names(names: Vec<String>) -> Self {
        let mut index = BTreeMap::new();
        for (i, n) in names.iter().enumerate() {
            index.insert(n.clone(), i as u32);
        }
        Interner { names, index }
    }

    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// `(s, p, o), {a1: v1, ..., am: vm}`. Attribute order is kept for display but
/// ignored by equality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NAryFact {
    pub s: EntityId,
    pub p: RelationId,
    pub o: EntityId,
    pub attrs: Vec<(RelationId, EntityId)>,
}

impl NAryFact {
    pub fn binary(s: EntityId, p: RelationId, o: EntityId) -> Self {
        NAryFact {
            s,
            p,
            o,
            attrs: Vec::new(),
        }
    }

    pub fn is_binary(&self) -> bool {
        self.attrs.is_empty()
    }

    pub fn key(&self) -> FactKey {
        let mut attrs = self.attrs.clone();
        attrs.sort_unstable();
        FactKey {
            s: self.s,
            p: self.p,
            o: self.o,
            attrs,
        }
    }

    /// Every entity in the fact, in role order `s, o, v...`.
    pub fn entities(&self) -> impl Iterator<Item = EntityId> + '_ {
        [self.s, self.o]
            .into_iter()
            .chain(self.attrs.iter().map(|&(_, v)| v))
    }

    /// The predicate followed by every attribute.
    pub fn relations(&self) -> impl Iterator<Item = RelationId> + '_ {
        core::iter::once(self.p).chain(self.attrs.iter().map(|&(a, _)| a))
    }
}

impl PartialEq for NAryFact {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for NAryFact {}

/// Canonical (attribute-sorted) form of a fact; used for dedup and membership.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FactKey {
    pub s: EntityId,
    pub p: RelationId,
    pub o: EntityId,
    pub attrs: Vec<(RelationId, EntityId)>,
}

/// A fact record over names, as stored in KG files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactRecord {
    pub s: String,
    pub p: String,
    pub o: String,
    #[serde(default)]
    pub attrs: Vec<(String, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Known(EntityId),
    Hole,
}

/// A fact with exactly one entity position replaced by a hole.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactPattern {
    pub s: Slot,
    pub p: RelationId,
    pub o: Slot,
    pub attrs: Vec<(RelationId, Slot)>,
}

impl FactPattern {
    fn holes(&self) -> usize {
        [self.s, self.o]
            .iter()
            .chain(self.attrs.iter().map(|(_, v)| v))
            .filter(|s| matches!(s, Slot::Hole))
            .count()
    }
}

/// How query attributes are compared against stored attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AttrMatch {
    /// Multisets must be equal.
    #[default]
    Exact,
    /// Stored multiset must contain the query multiset.
    Contains,
}

#[derive(Debug, Default)]
pub struct KgBuilder {
    entities: Interner,
    relations: Interner,
    facts: Vec<NAryFact>,
    seen: BTreeSet<FactKey>,
}

impl KgBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Start from an existing symbol table (ids are preserved).
    pub fn with_symbols(entities: Interner, relations: Interner) -> Self {
        KgBuilder {
            entities,
            relations,
            ..Default::default()
        }
    }

    pub fn entity(&mut self, name: &str) -> EntityId {
        EntityId(self.entities.intern(name))
    }

    pub fn relation(&mut self, name: &str) -> RelationId {
        RelationId(self.relations.intern(name))
    }

    /// Adds a record; returns `false` when the fact was already present.
    pub fn add_record(&mut self, rec: &FactRecord) -> Result<bool, KgError> {
        let names = [&rec.s, &rec.p, &rec.o]
            .into_iter()
            .chain(rec.attrs.iter().flat_map(|(a, v)| [a, v]));
        if names.into_iter().any(|n| n.is_empty()) {
            return Err(KgError::EmptyName);
        }
        let mut pairs = BTreeSet::new();
        for (a, v) in &rec.attrs {
            if !pairs.insert((a, v)) {
                return Err(KgError::DuplicateAttribute(a.clone(), v.clone()));
            }
        }
        let s = self.entity(&rec.s);
        let p = self.relation(&rec.p);
        let o = self.entity(&rec.o);
        let attrs = rec
            .attrs
            .iter()
            .map(|(a, v)| (self.relation(a), self.entity(v)))
            .collect();
        Ok(self.add_fact(NAryFact { s, p, o, attrs }))
    }

    /// Adds a fact over ids already interned in this builder.
    pub fn add_fact(&mut self, fact: NAryFact) -> bool {
        if self.seen.insert(fact.key()) {
            self.facts.push(fact);
            true
        } else {
            false
        }
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn build(self) -> KnowledgeGraph {
        KnowledgeGraph::from_parts(self.entities, self.relations, self.facts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgStats {
    pub n_facts: usize,
    pub n_entities: usize,
    pub n_binary_relations: usize,
    pub n_nary_relations: usize,
}

#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    entities: Interner,
    relations: Interner,
    facts: Vec<NAryFact>,
    keys: BTreeSet<FactKey>,
    by_subject: Vec<Vec<u32>>,
    by_object: Vec<Vec<u32>>,
    by_value: Vec<Vec<u32>>,
    by_predicate: Vec<Vec<u32>>,
    by_attribute: Vec<Vec<u32>>,
    incident: Vec<Vec<RelationId>>,
    predicates: BTreeSet<RelationId>,
    attributes: BTreeSet<RelationId>,
    stats: KgStats,
}

impl KnowledgeGraph {
    /// Index a fact list. Duplicates (under attribute-order-insensitive equality)
    /// are dropped; ids must resolve in the given symbol tables.
    pub fn from_parts(entities: Interner, relations: Interner, facts: Vec<NAryFact>) -> Self {
        let ne = entities.len();
        let nr = relations.len();
        let mut kg = KnowledgeGraph {
            by_subject: alloc::vec![Vec::new(); ne],
            by_object: alloc::vec![Vec::new(); ne],
            by_value: alloc::vec![Vec::new(); ne],
            by_predicate: alloc::vec![Vec::new(); nr],
            by_attribute: alloc::vec![Vec::new(); nr],
            incident: alloc::vec![Vec::new(); ne],
            entities,
            relations,
            facts: Vec::with_capacity(facts.len()),
            keys: BTreeSet::new(),
            predicates: BTreeSet::new(),
            attributes: BTreeSet::new(),
            stats: KgStats {
                n_facts: 0,
                n_entities: ne,
                n_binary_relations: 0,
                n_nary_relations: 0,
            },
        };
        let mut nary = BTreeSet::new();
        for fact in facts {
            assert!(
                fact.entities().all(|e| e.index() < ne),
                "entity id out of range"
            );
            assert!(
                fact.relations().all(|r| r.index() < nr),
                "relation id out of range"
            );
            if !kg.keys.insert(fact.key()) {
                continue;
            }
            let idx = kg.facts.len() as u32;
            kg.by_subject[fact.s.index()].push(idx);
            kg.by_object[fact.o.index()].push(idx);
            kg.by_predicate[fact.p.index()].push(idx);
            kg.predicates.insert(fact.p);
            if !fact.attrs.is_empty() {
                nary.insert(fact.p);
            }
            for &(a, v) in &fact.attrs {
                kg.by_value[v.index()].push(idx);
                kg.by_attribute[a.index()].push(idx);
                kg.attributes.insert(a);
            }
            for e in fact.entities() {
                for r in fact.relations() {
                    kg.incident[e.index()].push(r);
                }
            }
            kg.facts.push(fact);
        }
        for rels in kg.incident.iter_mut() {
            rels.sort_unstable();
            rels.dedup();
        }
        for list in kg.by_value.iter_mut().chain(kg.by_attribute.iter_mut()) {
            list.dedup();
        }
        kg.stats.n_facts = kg.facts.len();
        kg.stats.n_nary_relations = nary.len();
        kg.stats.n_binary_relations = kg.predicates.len() - nary.len();
        kg
    }

    pub fn stats(&self) -> KgStats {
        self.stats
    }

    pub fn facts(&self) -> &[NAryFact] {
        &self.facts
    }

    pub fn fact(&self, idx: u32) -> &NAryFact {
        &self.facts[idx as usize]
    }

    pub fn entities(&self) -> &Interner {
        &self.entities
    }

    pub fn relations(&self) -> &Interner {
        &self.relations
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entities.get(name).map(EntityId)
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relations.get(name).map(RelationId)
    }

    pub fn entity_name(&self, e: EntityId) -> &str {
        self.entities.name(e.0).unwrap_or("<unknown>")
    }

    pub fn relation_name(&self, r: RelationId) -> &str {
        self.relations.name(r.0).unwrap_or("<unknown>")
    }

    /// Relations used as a predicate in at least one fact.
    pub fn predicates(&self) -> &BTreeSet<RelationId> {
        &self.predicates
    }

    /// Relations used as an attribute in at least one fact.
    pub fn attributes(&self) -> &BTreeSet<RelationId> {
        &self.attributes
    }

    pub fn with_subject(&self, e: EntityId) -> &[u32] {
        self.by_subject.get(e.index()).map_or(&[], Vec::as_slice)
    }

    pub fn with_object(&self, e: EntityId) -> &[u32] {
        self.by_object.get(e.index()).map_or(&[], Vec::as_slice)
    }

    pub fn with_value(&self, e: EntityId) -> &[u32] {
        self.by_value.get(e.index()).map_or(&[], Vec::as_slice)
    }

    pub fn with_predicate(&self, r: RelationId) -> &[u32] {
        self.by_predicate.get(r.index()).map_or(&[], Vec::as_slice)
    }

    pub fn with_attribute(&self, r: RelationId) -> &[u32] {
        self.by_attribute.get(r.index()).map_or(&[], Vec::as_slice)
    }

    pub fn contains(&self, fact: &NAryFact) -> bool {
        self.keys.contains(&fact.key())
    }

    fn check_entity(&self, e: EntityId) -> Result<(), KgError> {
        if e.index() < self.entities.len() {
            Ok(())
        } else {
            Err(KgError::UnknownEntity(e.0))
        }
    }

    fn check_relation(&self, r: RelationId) -> Result<(), KgError> {
        if r.index() < self.relations.len() {
            Ok(())
        } else {
            Err(KgError::UnknownRelation(r.0))
        }
    }

    /// True iff some stored fact holds `e` in any entity role and `r` as its
    /// predicate or one of its attributes.
    pub fn entity_has_relation(&self, e: EntityId, r: RelationId) -> Result<bool, KgError> {
        self.check_entity(e)?;
        self.check_relation(r)?;
        Ok(self.incident[e.index()].binary_search(&r).is_ok())
    }

    /// Entities that complete `pattern` into a stored fact (exact attribute multisets).
    pub fn match_fact(&self, pattern: &FactPattern) -> Result<BTreeSet<EntityId>, KgError> {
        self.match_fact_with(pattern, AttrMatch::Exact)
    }

    pub fn match_fact_with(
        &self,
        pattern: &FactPattern,
        mode: AttrMatch,
    ) -> Result<BTreeSet<EntityId>, KgError> {
        let holes = pattern.holes();
        if holes != 1 {
            return Err(KgError::HoleCount(holes));
        }
        self.check_relation(pattern.p)?;
        let slots = [pattern.s, pattern.o]
            .into_iter()
            .chain(pattern.attrs.iter().map(|&(_, v)| v));
        for slot in slots {
            if let Slot::Known(e) = slot {
                self.check_entity(e)?;
            }
        }
        for &(a, _) in &pattern.attrs {
            self.check_relation(a)?;
        }
        // Narrowest available index.
        let candidates: &[u32] = match (pattern.s, pattern.o) {
            (Slot::Known(s), _) => self.with_subject(s),
            (_, Slot::Known(o)) => self.with_object(o),
            _ => self.with_predicate(pattern.p),
        };
        let mut out = BTreeSet::new();
        for &idx in candidates {
            if let Some(e) = match_one(self.fact(idx), pattern, mode) {
                out.insert(e);
            }
        }
        Ok(out)
    }

    /// Symbol-preserving copy restricted to the facts for which `keep` is true.
    pub fn retain<F: FnMut(usize, &NAryFact) -> bool>(&self, mut keep: F) -> KnowledgeGraph {
        let facts = self
            .facts
            .iter()
            .enumerate()
            .filter(|(i, f)| keep(*i, f))
            .map(|(_, f)| f.clone())
            .collect();
        KnowledgeGraph::from_parts(self.entities.clone(), self.relations.clone(), facts)
    }

    pub fn record(&self, fact: &NAryFact) -> FactRecord {
        FactRecord {
            s: self.entity_name(fact.s).to_string(),
            p: self.relation_name(fact.p).to_string(),
            o: self.entity_name(fact.o).to_string(),
            attrs: fact
                .attrs
                .iter()
                .map(|&(a, v)| {
                    (
                        self.relation_name(a).to_string(),
                        self.entity_name(v).to_string(),
                    )
                })
                .collect(),
        }
    }

    pub fn records(&self) -> impl Iterator<Item = FactRecord> + '_ {
        self.facts.iter().map(|f| self.record(f))
    }

    /// Fact multiset over names, for comparing stores with different id assignments.
    pub fn canonical_records(&self) -> BTreeSet<FactRecord> {
        self.records()
            .map(|mut r| {
                r.attrs.sort();
                r
            })
            .collect()
    }
}

impl PartialOrd for FactRecord {
    fn partial_cmp(&self, other: &Self) -> Option<core::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for FactRecord {
    fn cmp(&self, other: &Self) -> core::cmp::Ordering {
        (&self.s, &self.p, &self.o, &self.attrs).cmp(&(&other.s, &other.p, &other.o, &other.attrs))
    }
}

/// Attempts to fill the single hole of `pattern` from `fact`.
fn match_one(fact: &NAryFact, pattern: &FactPattern, mode: AttrMatch) -> Option<EntityId> {
    if fact.p != pattern.p {
        return None;
    }
    let mut filled = None;
    for (slot, actual) in [(pattern.s, fact.s), (pattern.o, fact.o)] {
        match slot {
            Slot::Known(e) if e != actual => return None,
            Slot::Known(_) => {}
            Slot::Hole => filled = Some(actual),
        }
    }
    match mode {
        AttrMatch::Exact if fact.attrs.len() != pattern.attrs.len() => return None,
        AttrMatch::Contains if fact.attrs.len() < pattern.attrs.len() => return None,
        _ => {}
    }
    // Remove concrete pairs from the stored multiset, then place the hole.
    let mut remaining: Vec<(RelationId, EntityId)> = fact.attrs.clone();
    let mut hole_attr = None;
    for &(a, slot) in &pattern.attrs {
        match slot {
            Slot::Known(v) => {
                let pos = remaining.iter().position(|&pair| pair == (a, v))?;
                remaining.swap_remove(pos);
            }
            Slot::Hole => hole_attr = Some(a),
        }
    }
    if let Some(a) = hole_attr {
        // Under exact matching exactly one pair is left; under containment any
        // remaining pair with the right attribute works, so take the smallest
        // value to stay deterministic (callers wanting all values use the
        // brute-force enumerator).
        let mut vs = remaining.iter().filter(|(ra, _)| *ra == a).map(|&(_, v)| v);
        filled = vs.next().map(|first| vs.fold(first, core::cmp::min));
        filled?;
    }
    filled
}

impl fmt::Display for KgStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} facts, {} entities, {} binary relations, {} n-ary relations",
            self.n_facts, self.n_entities, self.n_binary_relations, self.n_nary_relations
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn rec(s: &str, p: &str, o: &str, attrs: &[(&str, &str)]) -> FactRecord {
        FactRecord {
            s: s.into(),
            p: p.into(),
            o: o.into(),
            attrs: attrs
                .iter()
                .map(|(a, v)| ((*a).into(), (*v).into()))
                .collect(),
        }
    }

    fn lebron() -> KnowledgeGraph {
        let mut b = KgBuilder::new();
        b.add_record(&rec(
            "LeBron James",
            "join",
            "LA Lakers",
            &[("time", "2018")],
        ))
        .unwrap();
        b.build()
    }

    #[test]
    fn empty_store() {
        let kg = KgBuilder::new().build();
        assert_eq!(kg.stats().n_facts, 0);
        assert_eq!(kg.stats().n_entities, 0);
    }

    #[test]
    fn dedup_and_counts() {
        let mut b = KgBuilder::new();
        assert!(b
            .add_record(&rec("a", "r", "b", &[("t", "1"), ("u", "2")]))
            .unwrap());
        assert!(!b
            .add_record(&rec("a", "r", "b", &[("u", "2"), ("t", "1")]))
            .unwrap());
        assert!(b.add_record(&rec("a", "q", "c", &[])).unwrap());
        assert!(b.add_record(&rec("c", "q", "b", &[])).unwrap());
        let kg = b.build();
        let st = kg.stats();
        assert_eq!(st.n_facts, 3);
        assert_eq!(st.n_entities, 5);
        assert_eq!(st.n_nary_relations, 1);
        assert_eq!(st.n_binary_relations, 1);
    }

    #[test]
    fn duplicate_attribute_pair_rejected() {
        let mut b = KgBuilder::new();
        let err = b
            .add_record(&rec("a", "r", "b", &[("t", "1"), ("t", "1")]))
            .unwrap_err();
        assert!(matches!(err, KgError::DuplicateAttribute(..)));
    }

    #[test]
    fn has_relation_examples() {
        let mut b = KgBuilder::new();
        b.add_record(&rec(
            "LeBron James",
            "join",
            "LA Lakers",
            &[("time", "2018")],
        ))
        .unwrap();
        b.add_record(&rec(
            "Warriors",
            "win",
            "NBA championship",
            &[("time", "2018")],
        ))
        .unwrap();
        let kg = b.build();
        let e = |n| kg.entity_id(n).unwrap();
        let r = |n| kg.relation_id(n).unwrap();
        assert!(kg.entity_has_relation(e("LA Lakers"), r("join")).unwrap());
        assert!(kg.entity_has_relation(e("2018"), r("time")).unwrap());
        assert!(!kg.entity_has_relation(e("LeBron James"), r("win")).unwrap());
        assert_eq!(
            kg.entity_has_relation(EntityId(99), r("join")),
            Err(KgError::UnknownEntity(99))
        );
    }

    #[test]
    fn match_fact_examples() {
        let kg = lebron();
        let e = |n| kg.entity_id(n).unwrap();
        let r = |n| kg.relation_id(n).unwrap();
        let subject_hole = FactPattern {
            s: Slot::Hole,
            p: r("join"),
            o: Slot::Known(e("LA Lakers")),
            attrs: vec![(r("time"), Slot::Known(e("2018")))],
        };
        assert_eq!(
            kg.match_fact(&subject_hole).unwrap(),
            [e("LeBron James")].into_iter().collect()
        );
        let value_hole = FactPattern {
            s: Slot::Known(e("LeBron James")),
            p: r("join"),
            o: Slot::Known(e("LA Lakers")),
            attrs: vec![(r("time"), Slot::Hole)],
        };
        assert_eq!(
            kg.match_fact(&value_hole).unwrap(),
            [e("2018")].into_iter().collect()
        );
        // "time" is never a predicate
        let absent = FactPattern {
            s: Slot::Hole,
            p: r("time"),
            o: Slot::Known(e("LA Lakers")),
            attrs: vec![],
        };
        assert!(kg.match_fact(&absent).unwrap().is_empty());
        let two = FactPattern {
            s: Slot::Hole,
            p: r("join"),
            o: Slot::Hole,
            attrs: vec![],
        };
        assert_eq!(kg.match_fact(&two), Err(KgError::HoleCount(2)));
        let none = FactPattern {
            s: Slot::Known(e("LeBron James")),
            p: r("join"),
            o: Slot::Known(e("LA Lakers")),
            attrs: vec![],
        };
        assert_eq!(kg.match_fact(&none), Err(KgError::HoleCount(0)));
    }

    #[test]
    fn containment_mode_allows_extra_attrs() {
        let kg = lebron();
        let e = |n| kg.entity_id(n).unwrap();
        let r = |n| kg.relation_id(n).unwrap();
        let p = FactPattern {
            s: Slot::Hole,
            p: r("join"),
            o: Slot::Known(e("LA Lakers")),
            attrs: vec![],
        };
        assert!(kg.match_fact(&p).unwrap().is_empty());
        assert_eq!(
            kg.match_fact_with(&p, AttrMatch::Contains).unwrap(),
            [e("LeBron James")].into_iter().collect()
        );
    }

    // Random small KGs over a tiny vocabulary so patterns actually hit.
    fn arb_records() -> impl Strategy<Value = Vec<FactRecord>> {
        let ent = 0u8..12;
        let rel = 0u8..4;
        let attr = (0u8..3, 0u8..12);
        prop::collection::vec(
            (ent.clone(), rel, ent, prop::collection::vec(attr, 0..3)),
            0..200,
        )
        .prop_map(|raw| {
            raw.into_iter()
                .map(|(s, p, o, attrs)| {
                    let mut seen = BTreeSet::new();
                    let attrs = attrs
                        .into_iter()
                        .filter(|pair| seen.insert(*pair))
                        .map(|(a, v)| (alloc::format!("a{a}"), alloc::format!("e{v}")))
                        .collect();
                    FactRecord {
                        s: alloc::format!("e{s}"),
                        p: alloc::format!("p{p}"),
                        o: alloc::format!("e{o}"),
                        attrs,
                    }
                })
                .collect()
        })
    }

    fn naive(kg: &KnowledgeGraph, pat: &FactPattern) -> BTreeSet<EntityId> {
        let mut out = BTreeSet::new();
        for f in kg.facts() {
            for e in 0..kg.n_entities() as u32 {
                let sub = |slot: Slot| match slot {
                    Slot::Known(x) => x,
                    Slot::Hole => EntityId(e),
                };
                let cand = NAryFact {
                    s: sub(pat.s),
                    p: pat.p,
                    o: sub(pat.o),
                    attrs: pat.attrs.iter().map(|&(a, v)| (a, sub(v))).collect(),
                };
                if cand == *f {
                    out.insert(EntityId(e));
                }
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn match_fact_equals_scan(records in arb_records(), picks in prop::collection::vec((0usize..1000, 0usize..5), 100)) {
            let mut b = KgBuilder::new();
            for r in &records { b.add_record(r).unwrap(); }
            // make sure a fixed vocabulary exists even for empty stores
            for i in 0..12 { b.entity(&alloc::format!("e{i}")); }
            for i in 0..4 { b.relation(&alloc::format!("p{i}")); }
            for i in 0..3 { b.relation(&alloc::format!("a{i}")); }
            let kg = b.build();
            for (fi, hole) in picks {
                // pattern from a stored fact (hit) or perturbed (likely miss)
                let base = if kg.facts().is_empty() {
                    NAryFact::binary(EntityId(0), kg.relation_id("p0").unwrap(), EntityId(1))
                } else {
                    kg.facts()[fi % kg.facts().len()].clone()
                };
                let mut pat = FactPattern {
                    s: Slot::Known(base.s),
                    p: base.p,
                    o: Slot::Known(base.o),
                    attrs: base.attrs.iter().map(|&(a, v)| (a, Slot::Known(v))).collect(),
                };
                match hole % (2 + pat.attrs.len()) {
                    0 => pat.s = Slot::Hole,
                    1 => pat.o = Slot::Hole,
                    k => pat.attrs[k - 2].1 = Slot::Hole,
                }
                if fi % 3 == 0 {
                    pat.p = RelationId((pat.p.0 + 1) % kg.n_relations() as u32);
                }
                prop_assert_eq!(kg.match_fact(&pat).unwrap(), naive(&kg, &pat));
            }
        }

        #[test]
        fn has_relation_equals_scan(records in arb_records()) {
            let mut b = KgBuilder::new();
            for r in &records { b.add_record(r).unwrap(); }
            let kg = b.build();
            for e in 0..kg.n_entities() as u32 {
                for r in 0..kg.n_relations() as u32 {
                    let scan = kg.facts().iter().any(|f| {
                        f.entities().any(|x| x == EntityId(e)) && f.relations().any(|x| x == RelationId(r))
                    });
                    prop_assert_eq!(kg.entity_has_relation(EntityId(e), RelationId(r)).unwrap(), scan);
                }
            }
        }
    }
}
