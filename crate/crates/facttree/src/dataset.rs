//! Dataset directories: `items.jsonl`, one id list per split and a manifest.
//!
//! Trees are stored by name so a dataset survives re-interning of the KG.
//! NL facts use `{"items":[token | {"ph": i | "answer"}], "syn":[...],
//! "locs":[...], "children":[...]}`; KG facts use `{"s","p","o","attrs",
//! "gold","children"}` where a term is an entity name or
//! `{"ph": i | "answer" | "out"}`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use facttree_core::datagen::{Dataset, QaItem, Splits};
use facttree_core::kg::{KgBuilder, KnowledgeGraph};
use facttree_core::tree::{
    ItemKind, KgFact, KgFactNode, KgFactTree, Loc, NlFact, NlFactTree, NlItem, Term, PLH,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kgio::{open, read_kg_into, write_atomic};

pub const ITEMS_FILE: &str = "items.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PhRef {
    Child(usize),
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NlItemJson {
    Token(String),
    Ph { ph: PhRef },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NlNodeJson {
    pub items: Vec<NlItemJson>,
    /// Parent syntax label per item. Missing labels read as unknown.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub syn: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub locs: Vec<Option<Loc>>,
    #[serde(default)]
    pub children: Vec<NlNodeJson>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TermJson {
    Entity(String),
    Ph { ph: PhRef },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgNodeJson {
    pub s: TermJson,
    pub p: String,
    pub o: TermJson,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attrs: Vec<(String, TermJson)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
    #[serde(default)]
    pub children: Vec<KgNodeJson>,
}

/// One dataset line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: String,
    pub question: String,
    pub tree: String,
    pub gold_nl_tree: NlNodeJson,
    pub gold_kg_tree: KgNodeJson,
    pub links: BTreeMap<String, String>,
    pub answer: String,
    pub n_facts: usize,
    #[serde(default)]
    pub template: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub substitutions: Vec<(String, String)>,
}

pub fn nl_to_json(f: &NlFact) -> NlNodeJson {
    let items = f
        .items
        .iter()
        .map(|it| match &it.kind {
            ItemKind::Token(t) => NlItemJson::Token(t.clone()),
            ItemKind::Answer => NlItemJson::Ph {
                ph: PhRef::Named("answer".into()),
            },
            ItemKind::Child(i) => NlItemJson::Ph {
                ph: PhRef::Child(*i),
            },
        })
        .collect();
    let locs: Vec<Option<Loc>> = f.items.iter().map(|it| it.loc).collect();
    NlNodeJson {
        items,
        syn: f.items.iter().map(|it| it.syn.clone()).collect(),
        locs: if locs.iter().any(Option::is_some) {
            locs
        } else {
            Vec::new()
        },
        children: f.children.iter().map(nl_to_json).collect(),
    }
}

pub fn nl_from_json(n: &NlNodeJson) -> Result<NlFact, String> {
    let len = n.items.len();
    if !n.syn.is_empty() && n.syn.len() != len {
        return Err(format!("{} syn labels for {len} items", n.syn.len()));
    }
    if !n.locs.is_empty() && n.locs.len() != len {
        return Err(format!("{} locs for {len} items", n.locs.len()));
    }
    let mut items = Vec::with_capacity(len);
    for (i, it) in n.items.iter().enumerate() {
        let kind = match it {
            NlItemJson::Token(t) => ItemKind::Token(t.clone()),
            NlItemJson::Ph {
                ph: PhRef::Child(c),
            } => ItemKind::Child(*c),
            NlItemJson::Ph {
                ph: PhRef::Named(s),
            } if s == "answer" => ItemKind::Answer,
            NlItemJson::Ph { ph } => return Err(format!("bad placeholder {ph:?}")),
        };
        let syn = match n.syn.get(i) {
            Some(s) => s.clone(),
            None if matches!(kind, ItemKind::Token(_)) => facttree_core::locate::UNK.into(),
            None => PLH.into(),
        };
        items.push(NlItem {
            kind,
            syn,
            loc: n.locs.get(i).copied().flatten(),
        });
    }
    let children = n
        .children
        .iter()
        .map(nl_from_json)
        .collect::<Result<_, _>>()?;
    Ok(NlFact { items, children })
}

fn term_to_json(t: Term, kg: &KnowledgeGraph) -> TermJson {
    let ph = |p| TermJson::Ph { ph: p };
    match t {
        Term::Entity(e) => TermJson::Entity(kg.entity_name(e).to_string()),
        Term::Answer => ph(PhRef::Named("answer".into())),
        Term::Out => ph(PhRef::Named("out".into())),
        Term::Child(i) => ph(PhRef::Child(i)),
    }
}

fn term_from_json(t: &TermJson, kg: &KnowledgeGraph) -> Result<Term, String> {
    Ok(match t {
        TermJson::Entity(name) => Term::Entity(
            kg.entity_id(name)
                .ok_or_else(|| format!("unknown entity `{name}`"))?,
        ),
        TermJson::Ph {
            ph: PhRef::Child(i),
        } => Term::Child(*i),
        TermJson::Ph {
            ph: PhRef::Named(s),
        } => match s.as_str() {
            "answer" => Term::Answer,
            "out" => Term::Out,
            _ => return Err(format!("bad placeholder `{s}`")),
        },
    })
}

pub fn kg_to_json(n: &KgFactNode, kg: &KnowledgeGraph) -> KgNodeJson {
    let f = &n.fact;
    KgNodeJson {
        s: term_to_json(f.s, kg),
        p: kg.relation_name(f.p).to_string(),
        o: term_to_json(f.o, kg),
        attrs: f
            .attrs
            .iter()
            .map(|&(a, v)| (kg.relation_name(a).to_string(), term_to_json(v, kg)))
            .collect(),
        gold: n.gold.map(|e| kg.entity_name(e).to_string()),
        children: n.children.iter().map(|c| kg_to_json(c, kg)).collect(),
    }
}

pub fn kg_from_json(n: &KgNodeJson, kg: &KnowledgeGraph) -> Result<KgFactNode, String> {
    let rel = |name: &str| {
        kg.relation_id(name)
            .ok_or_else(|| format!("unknown relation `{name}`"))
    };
    let fact = KgFact {
        s: term_from_json(&n.s, kg)?,
        p: rel(&n.p)?,
        o: term_from_json(&n.o, kg)?,
        attrs: n
            .attrs
            .iter()
            .map(|(a, v)| Ok((rel(a)?, term_from_json(v, kg)?)))
            .collect::<Result<_, String>>()?,
    };
    let gold = match &n.gold {
        Some(g) => Some(
            kg.entity_id(g)
                .ok_or_else(|| format!("unknown entity `{g}`"))?,
        ),
        None => None,
    };
    let children = n
        .children
        .iter()
        .map(|c| kg_from_json(c, kg))
        .collect::<Result<_, _>>()?;
    Ok(KgFactNode {
        fact,
        children,
        gold,
    })
}

impl ItemRecord {
    pub fn from_item(it: &QaItem, kg: &KnowledgeGraph) -> Self {
        ItemRecord {
            id: it.id.clone(),
            question: it.question.clone(),
            tree: it.tree.clone(),
            gold_nl_tree: nl_to_json(&it.gold_nl_tree.root),
            gold_kg_tree: kg_to_json(&it.gold_kg_tree.root, kg),
            links: it
                .links
                .iter()
                .map(|(m, &e)| (m.clone(), kg.entity_name(e).to_string()))
                .collect(),
            answer: kg.entity_name(it.answer).to_string(),
            n_facts: it.n_facts,
            template: it.template,
            substitutions: it.substitutions.clone(),
        }
    }

    /// Resolves names against `kg` and checks the trees are well formed.
    pub fn to_item(&self, kg: &KnowledgeGraph) -> Result<QaItem, String> {
        let ent = |name: &str| {
            kg.entity_id(name)
                .ok_or_else(|| format!("unknown entity `{name}`"))
        };
        let nl = NlFactTree {
            root: nl_from_json(&self.gold_nl_tree)?,
        };
        let kt = KgFactTree {
            root: kg_from_json(&self.gold_kg_tree, kg)?,
        };
        if !nl.well_formed() {
            return Err("gold NL tree is not well formed".into());
        }
        if !kt.well_formed() {
            return Err("gold KG tree is not well formed".into());
        }
        if nl.n_facts() != self.n_facts || kt.n_facts() != self.n_facts {
            return Err(format!(
                "n_facts {} disagrees with the trees ({} NL, {} KG)",
                self.n_facts,
                nl.n_facts(),
                kt.n_facts()
            ));
        }
        Ok(QaItem {
            id: self.id.clone(),
            template: self.template,
            question: self.question.clone(),
            tree: self.tree.clone(),
            gold_nl_tree: nl,
            gold_kg_tree: kt,
            links: self
                .links
                .iter()
                .map(|(m, e)| Ok((m.clone(), ent(e)?)))
                .collect::<Result<_, String>>()?,
            answer: ent(&self.answer)?,
            n_facts: self.n_facts,
            substitutions: self.substitutions.clone(),
        })
    }

    /// Interns every entity and relation name the item mentions.
    pub fn intern_into(&self, b: &mut KgBuilder) {
        fn term(t: &TermJson, b: &mut KgBuilder) {
            if let TermJson::Entity(e) = t {
                b.entity(e);
            }
        }
        fn node(n: &KgNodeJson, b: &mut KgBuilder) {
            term(&n.s, b);
            b.relation(&n.p);
            term(&n.o, b);
            for (a, v) in &n.attrs {
                b.relation(a);
                term(v, b);
            }
            if let Some(g) = &n.gold {
                b.entity(g);
            }
            n.children.iter().for_each(|c| node(c, b));
        }
        node(&self.gold_kg_tree, b);
        for e in self.links.values() {
            b.entity(e);
        }
        b.entity(&self.answer);
    }
}

/// Generation settings recorded next to a dataset. Paths are left out so
/// that two runs with the same inputs produce identical directories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenManifest {
    pub format_version: u32,
    pub seed: u64,
    pub n_items: usize,
    pub synonym_rate: f64,
    pub templates: usize,
    pub splits: BTreeMap<String, usize>,
    pub by_facts: BTreeMap<String, usize>,
}

impl GenManifest {
    pub fn describe(ds: &Dataset, seed: u64, synonym_rate: f64, templates: usize) -> Self {
        let mut by_facts = BTreeMap::new();
        for it in &ds.items {
            *by_facts.entry(format!("{}F", it.n_facts)).or_insert(0) += 1;
        }
        GenManifest {
            format_version: 1,
            seed,
            n_items: ds.items.len(),
            synonym_rate,
            templates,
            splits: [
                ("train".to_string(), ds.splits.train.len()),
                ("valid".to_string(), ds.splits.valid.len()),
                ("test".to_string(), ds.splits.test.len()),
            ]
            .into(),
            by_facts,
        }
    }
}

fn split_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.txt"))
}

pub fn write_items_to(
    items: &[QaItem],
    kg: &KnowledgeGraph,
    w: &mut dyn Write,
) -> std::io::Result<()> {
    for it in items {
        serde_json::to_writer(&mut *w, &ItemRecord::from_item(it, kg))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(
    ds: &Dataset,
    kg: &KnowledgeGraph,
    manifest: &GenManifest,
    dir: &Path,
) -> Result<()> {
    write_atomic(&dir.join(ITEMS_FILE), |w| write_items_to(&ds.items, kg, w))?;
    for (name, ids) in [
        ("train", &ds.splits.train),
        ("valid", &ds.splits.valid),
        ("test", &ds.splits.test),
    ] {
        write_atomic(&split_file(dir, name), |w| {
            ids.iter().try_for_each(|id| writeln!(w, "{id}"))
        })?;
    }
    write_atomic(&dir.join(MANIFEST_FILE), |w| {
        serde_json::to_writer_pretty(&mut *w, manifest)?;
        w.write_all(b"\n")
    })
}

/// A dataset directory before its names are resolved against a KG.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub records: Vec<ItemRecord>,
    pub splits: Splits,
}

impl RawDataset {
    pub fn resolve(&self, kg: &KnowledgeGraph) -> Result<Dataset> {
        let items = self
            .records
            .iter()
            .map(|r| {
                r.to_item(kg)
                    .map_err(|e| Error::data(format!("item {}: {e}", r.id)))
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            items,
            splits: self.splits.clone(),
        })
    }
}

fn read_ids(path: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for line in open(path)?.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let id = line.trim();
        if !id.is_empty() {
            ids.push(id.to_string());
        }
    }
    Ok(ids)
}

/// Reads items and split lists; every split id must name exactly one item
/// and no id may appear in two splits.
pub fn read_dataset(dir: &Path) -> Result<RawDataset> {
    let path = dir.join(ITEMS_FILE);
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in open(&path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ItemRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(&path, i + 1, e))?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::parse(
                &path,
                i + 1,
                format!("duplicate id {}", rec.id),
            ));
        }
        records.push(rec);
    }
    let mut splits = Splits::default();
    let mut assigned = BTreeSet::new();
    for name in SPLITS {
        let p = split_file(dir, name);
        let ids = read_ids(&p)?;
        for id in &ids {
            if !seen.contains(id) {
                return Err(Error::data(format!("{}: unknown id {id}", p.display())));
            }
            if !assigned.insert(id.clone()) {
                return Err(Error::data(format!(
                    "{}: id {id} is in two splits",
                    p.display()
                )));
            }
        }
        match name {
            "train" => splits.train = ids,
            "valid" => splits.valid = ids,
            _ => splits.test = ids,
        }
    }
    Ok(RawDataset { records, splits })
}

/// Builds the KG in a fixed id order: `symbols` first (a scorer's
/// vocabulary), then the KG file, then names only the dataset mentions.
pub fn load_kg_for(
    kg_path: &Path,
    symbols: Option<(Vec<String>, Vec<String>)>,
    data: Option<&RawDataset>,
) -> Result<KnowledgeGraph> {
    let mut b = match symbols {
        Some((ents, rels)) => KgBuilder::with_symbols(
            facttree_core::kg::Interner::from_names(ents),
            facttree_core::kg::Interner::from_names(rels),
        ),
        None => KgBuilder::new(),
    };
    read_kg_into(open(kg_path)?, kg_path, &mut b)?;
    if let Some(d) = data {
        d.records.iter().for_each(|r| r.intern_into(&mut b));
    }
    Ok(b.build())
}
