//! Synthetic n-ary KG and question generation: a typed people-centred KG,
//! template instantiation with gold syntax and fact trees, answerability
//! checks, stratified splits, and KG corruption.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::construct::{eliminate_with, fact_tree_from, is_eligible, replay_labels, ContextRange};
use crate::kg::{EntityId, FactKey, KgBuilder, KnowledgeGraph, NAryFact, RelationId};
use crate::locate::Links;
use crate::numkit::{seeded_rng, SeededRng};
use crate::reason::brute_force_answer;
use crate::syntax::{parse_bracketed, preprocess, NodeId, SyntaxTree};
use crate::tree::{ItemKind, KgFact, KgFactNode, KgFactTree, Loc, NlFact, NlFactTree, Term};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataGenError {
    #[error("infeasible configuration: {0}")]
    Infeasible(String),
    #[error("template {id}: {msg}")]
    Template { id: u32, msg: String },
    #[error("template {id} needs `{name}`, which the KG lacks")]
    RoleMismatch { id: u32, name: String },
    #[error("no template can be instantiated on this KG")]
    NoTemplates,
    #[error("only {got} of {wanted} items after {attempts} attempts")]
    Exhausted {
        got: usize,
        wanted: usize,
        attempts: usize,
    },
    #[error("corruption fraction must lie in [0, 1), got {0}")]
    BadFraction(f64),
    #[error("template file: {0}")]
    Parse(String),
}

// ---------------------------------------------------------------- KG schema

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ty {
    Person,
    Place,
    Country,
    Profession,
    Party,
    School,
    Field,
    Award,
    Team,
    Title,
    Year,
    Gender,
    Misc,
}

struct RelSpec {
    name: &'static str,
    subj: Ty,
    obj: Ty,
    /// The first attribute is always present on n-ary relations.
    attrs: &'static [(&'static str, Ty)],
    functional: bool,
    weight: f64,
}

const fn rel(name: &'static str, subj: Ty, obj: Ty, functional: bool, weight: f64) -> RelSpec {
    RelSpec {
        name,
        subj,
        obj,
        attrs: &[],
        functional,
        weight,
    }
}

const fn nrel(
    name: &'static str,
    subj: Ty,
    obj: Ty,
    attrs: &'static [(&'static str, Ty)],
    weight: f64,
) -> RelSpec {
    RelSpec {
        name,
        subj,
        obj,
        attrs,
        functional: false,
        weight,
    }
}

/// Binary relations the templates use, most important first.
const CORE_BINARY: &[RelSpec] = &[
    rel("father", Ty::Person, Ty::Person, true, 0.08),
    rel("mother", Ty::Person, Ty::Person, true, 0.08),
    rel("place_of_birth", Ty::Person, Ty::Place, true, 0.10),
    rel(
        "country_of_citizenship",
        Ty::Person,
        Ty::Country,
        true,
        0.10,
    ),
    rel("occupation", Ty::Person, Ty::Profession, true, 0.08),
    rel("spouse", Ty::Person, Ty::Person, true, 0.05),
    rel("sibling", Ty::Person, Ty::Person, true, 0.05),
    rel("child", Ty::Person, Ty::Person, true, 0.05),
    rel("place_of_death", Ty::Person, Ty::Place, true, 0.05),
    rel("date_of_death", Ty::Person, Ty::Year, true, 0.05),
    rel(
        "member_of_political_party",
        Ty::Person,
        Ty::Party,
        true,
        0.05,
    ),
    rel("sex_or_gender", Ty::Person, Ty::Gender, true, 0.06),
    rel("field_of_work", Ty::Person, Ty::Field, true, 0.05),
    rel("work_location", Ty::Person, Ty::Place, true, 0.03),
    rel("located_in", Ty::Team, Ty::Place, true, 0.02),
];

const CORE_NARY: &[RelSpec] = &[
    nrel(
        "award_received",
        Ty::Person,
        Ty::Award,
        &[("point_in_time", Ty::Year), ("together_with", Ty::Person)],
        0.08,
    ),
    nrel(
        "educated_at",
        Ty::Person,
        Ty::School,
        &[("end_time", Ty::Year), ("academic_degree", Ty::Misc)],
        0.08,
    ),
    nrel(
        "member_of_sports_team",
        Ty::Person,
        Ty::Team,
        &[("point_in_time", Ty::Year), ("position_played", Ty::Misc)],
        0.05,
    ),
    nrel(
        "nominated_for",
        Ty::Person,
        Ty::Award,
        &[("point_in_time", Ty::Year), ("for_work", Ty::Misc)],
        0.04,
    ),
    nrel(
        "win",
        Ty::Team,
        Ty::Title,
        &[("point_in_time", Ty::Year), ("opponent", Ty::Team)],
        0.03,
    ),
];

const FILLER_BINARY: &[&str] = &[
    "influenced_by",
    "student_of",
    "residence",
    "religion",
    "ethnic_group",
    "native_language",
    "notable_work",
    "member_of",
    "participant_in",
    "military_branch",
    "genre",
    "instrument",
    "record_label",
    "employer",
    "position_held",
    "movement",
    "doctoral_advisor",
    "sport",
    "allegiance",
    "noble_title",
    "languages_spoken",
    "owner_of",
    "founded",
    "affiliation",
    "cause_of_death",
    "manner_of_death",
    "medical_condition",
    "convicted_of",
    "candidacy",
    "academic_thesis",
    "patron_of",
    "writing_language",
    "honorific",
    "lifestyle",
    "hobby",
];

const FILLER_NARY: &[&str] = &[
    "held_position",
    "participated_in",
    "received_grant",
    "performed_at",
    "served_in",
    "competed_in",
    "represented",
    "coached",
    "chaired",
    "exhibited_at",
];

const FIRST: &[&str] = &[
    "Ada", "Bruno", "Clara", "Dmitri", "Elena", "Felix", "Greta", "Hugo", "Ines", "Jonas", "Karin",
    "Lorenz", "Marta", "Nils", "Olga", "Pavel", "Quinn", "Rosa", "Stefan", "Tilda", "Umar", "Vera",
    "Walter", "Xenia", "Yusuf", "Zora", "Anton", "Bianca", "Carlo", "Dora", "Emil", "Frida",
    "Gustav", "Hanna", "Igor", "Julia", "Kasimir", "Lena", "Milan", "Nora",
];

const LAST: &[&str] = &[
    "Albers",
    "Brandt",
    "Castell",
    "Dorn",
    "Eckert",
    "Falk",
    "Gruber",
    "Hollis",
    "Ivers",
    "Jaeger",
    "Kessler",
    "Lindqvist",
    "Moreau",
    "Novak",
    "Ortega",
    "Petrov",
    "Quist",
    "Richter",
    "Santos",
    "Thorne",
    "Ulrich",
    "Varga",
    "Weber",
    "Xavier",
    "Yilmaz",
    "Zeller",
    "Arden",
    "Bishop",
    "Corvin",
    "Delacroix",
    "Ellery",
    "Fontaine",
    "Garrow",
    "Hale",
    "Ibarra",
    "Jansen",
    "Kowal",
    "Lestrade",
    "Marlow",
    "Nakamura",
];

const ROOTS: &[&str] = &[
    "Ash", "Bel", "Cor", "Dun", "Elm", "Fen", "Glen", "Har", "Iver", "Kel", "Lin", "Mar", "Nor",
    "Oak", "Pel", "Quar", "Ros", "Sel", "Tam", "Ul", "Ven", "Wil", "Yar", "Zan",
];

const ENDS: &[&str] = &[
    "ford", "wick", "vale", "ton", "mouth", "bury", "holm", "stead", "port", "haven",
];

const PROFESSIONS: &[&str] = &[
    "physicist",
    "chemist",
    "painter",
    "composer",
    "novelist",
    "architect",
    "surgeon",
    "lawyer",
    "engineer",
    "diplomat",
    "journalist",
    "sculptor",
    "economist",
    "astronomer",
    "botanist",
    "philosopher",
    "pianist",
    "actor",
    "politician",
    "mathematician",
    "historian",
    "linguist",
    "photographer",
    "biologist",
    "geologist",
    "poet",
    "banker",
    "film director",
    "violinist",
    "athlete",
];

const FIELDS: &[&str] = &[
    "physics",
    "chemistry",
    "medicine",
    "literature",
    "painting",
    "music",
    "law",
    "economics",
    "astronomy",
    "botany",
    "philosophy",
    "mathematics",
    "history",
    "linguistics",
    "biology",
    "geology",
    "architecture",
    "sculpture",
    "journalism",
    "engineering",
    "politics",
    "sport",
    "photography",
    "film",
    "poetry",
];

const MASCOTS: &[&str] = &[
    "Hawks", "Wolves", "Comets", "Giants", "Rangers", "Falcons", "Bears", "Pilots",
];

const TITLES: &[&str] = &[
    "NBA championship",
    "league cup",
    "continental trophy",
    "national shield",
    "super cup",
];

/// Exponent of the rank-popularity law used when drawing entities.
const ZIPF: f64 = 1.1;

/// Sizes of a generated KG.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KgGenConfig {
    pub n_entities: usize,
    pub n_binary_rel: usize,
    pub n_nary_rel: usize,
    pub n_facts: usize,
    pub max_attrs: usize,
    pub seed: u64,
}

impl KgGenConfig {
    /// About 2,000 facts over 50 relations.
    pub fn desk() -> Self {
        KgGenConfig {
            n_entities: 1000,
            n_binary_rel: 40,
            n_nary_rel: 10,
            n_facts: 2000,
            max_attrs: 2,
            seed: 7,
        }
    }
}

fn pool_sizes(n: usize) -> Result<BTreeMap<Ty, usize>, DataGenError> {
    let frac = |f: f64, min: usize| ((n as f64 * f) as usize).max(min);
    let mut m = BTreeMap::new();
    m.insert(Ty::Year, frac(0.025, 3).min(70));
    m.insert(Ty::Gender, 2);
    m.insert(Ty::Title, frac(0.005, 1).min(TITLES.len()));
    m.insert(Ty::Country, frac(0.04, 2));
    m.insert(Ty::Profession, frac(0.02, 2).min(PROFESSIONS.len()));
    m.insert(Ty::Party, frac(0.01, 2));
    m.insert(Ty::Field, frac(0.02, 2).min(FIELDS.len()));
    m.insert(Ty::School, frac(0.03, 2));
    m.insert(Ty::Award, frac(0.04, 2));
    m.insert(Ty::Team, frac(0.025, 2));
    m.insert(Ty::Place, frac(0.06, 3));
    m.insert(Ty::Misc, frac(0.055, 1));
    let used: usize = m.values().sum();
    if n < used + 4 {
        return Err(DataGenError::Infeasible(format!(
            "{n} entities cannot fill the typed pools ({} needed)",
            used + 4
        )));
    }
    m.insert(Ty::Person, n - used);
    Ok(m)
}

fn combos<'a>(a: &'a [&'a str], b: &'a [&'a str]) -> impl Iterator<Item = String> + 'a {
    a.iter()
        .flat_map(move |x| b.iter().map(move |y| format!("{x}{y}")))
}

/// Distinct names per type; `taken` guards against collisions across types.
fn make_names(ty: Ty, n: usize, rng: &mut SeededRng, taken: &mut BTreeSet<String>) -> Vec<String> {
    let mut base: Vec<String> = match ty {
        Ty::Person => FIRST
            .iter()
            .flat_map(|f| LAST.iter().map(move |l| format!("{f} {l}")))
            .collect(),
        Ty::Place => combos(ROOTS, ENDS).collect(),
        Ty::Country => ROOTS
            .iter()
            .map(|r| format!("{r}aria"))
            .chain(ROOTS.iter().map(|r| format!("{r}land")))
            .collect(),
        Ty::Profession => PROFESSIONS.iter().map(|s| s.to_string()).collect(),
        Ty::Party => [
            "Green", "Liberal", "Labour", "Unity", "Reform", "Civic", "Progress", "Heritage",
            "Farmers", "Pirate",
        ]
        .iter()
        .map(|s| format!("{s} Party"))
        .chain(ROOTS.iter().map(|r| format!("{r} People's Party")))
        .collect(),
        Ty::Field => FIELDS.iter().map(|s| s.to_string()).collect(),
        Ty::School => combos(ROOTS, ENDS)
            .map(|p| format!("University of {p}"))
            .collect(),
        Ty::Award => LAST
            .iter()
            .flat_map(|l| {
                ["Prize", "Medal", "Award"]
                    .iter()
                    .map(move |k| format!("{l} {k}"))
            })
            .collect(),
        Ty::Team => combos(ROOTS, ENDS)
            .zip(MASCOTS.iter().cycle())
            .map(|(p, m)| format!("{p} {m}"))
            .collect(),
        Ty::Title => TITLES.iter().map(|s| s.to_string()).collect(),
        Ty::Year => (0..n).map(|i| format!("{}", 1950 + i)).collect(),
        Ty::Gender => alloc::vec!["male".into(), "female".into()],
        Ty::Misc => combos(ROOTS, &["ex", "ium", "ora", "ant", "ello"])
            .map(|s| format!("{s} concept"))
            .collect(),
    };
    // keep fixed lists in order so that well-known constants stay present
    let shuffle = !matches!(ty, Ty::Title | Ty::Year | Ty::Gender);
    if shuffle {
        base.shuffle(rng);
    }
    let mut out = Vec::with_capacity(n);
    let mut round = 1;
    while out.len() < n {
        for b in &base {
            if out.len() == n {
                break;
            }
            let name = if round == 1 {
                b.clone()
            } else {
                format!("{b} {}", roman(round))
            };
            if taken.insert(name.clone()) {
                out.push(name);
            }
        }
        round += 1;
    }
    out
}

fn roman(n: usize) -> String {
    const R: &[(usize, &str)] = &[(10, "X"), (9, "IX"), (5, "V"), (4, "IV"), (1, "I")];
    let mut n = n;
    let mut s = String::new();
    for &(v, r) in R {
        while n >= v {
            s.push_str(r);
            n -= v;
        }
    }
    s
}

struct GenRel {
    name: String,
    subj: Ty,
    obj: Ty,
    attrs: Vec<(String, Ty)>,
    functional: bool,
    weight: f64,
}

fn choose_relations(cfg: &KgGenConfig, rng: &mut SeededRng) -> Vec<GenRel> {
    let mut out = Vec::new();
    let conv = |r: &RelSpec| GenRel {
        name: r.name.into(),
        subj: r.subj,
        obj: r.obj,
        attrs: r.attrs.iter().map(|&(a, t)| (a.into(), t)).collect(),
        functional: r.functional,
        weight: r.weight,
    };
    out.extend(CORE_BINARY.iter().take(cfg.n_binary_rel).map(conv));
    let name_at = |list: &[&str], i: usize, prefix: &str| {
        list.get(i)
            .map(|s| s.to_string())
            .unwrap_or_else(|| format!("{prefix}_{i}"))
    };
    let subj_of = |rng: &mut SeededRng| {
        if rng.gen_bool(0.7) {
            Ty::Person
        } else {
            Ty::Misc
        }
    };
    let obj_of =
        |rng: &mut SeededRng| [Ty::Misc, Ty::Place, Ty::Person, Ty::Misc][rng.gen_range(0..4)];
    for i in 0..cfg.n_binary_rel.saturating_sub(CORE_BINARY.len()) {
        out.push(GenRel {
            name: name_at(FILLER_BINARY, i, "related_to"),
            subj: subj_of(rng),
            obj: obj_of(rng),
            attrs: Vec::new(),
            functional: false,
            weight: 0.01,
        });
    }
    out.extend(CORE_NARY.iter().take(cfg.n_nary_rel).map(conv));
    for i in 0..cfg.n_nary_rel.saturating_sub(CORE_NARY.len()) {
        out.push(GenRel {
            name: name_at(FILLER_NARY, i, "event"),
            subj: Ty::Person,
            obj: obj_of(rng),
            attrs: alloc::vec![("start_time".into(), Ty::Year), ("role".into(), Ty::Misc)],
            functional: false,
            weight: 0.01,
        });
    }
    out
}

/// Seeded synthetic KG with typed entity pools, functional person relations
/// and time-stamped n-ary events. Entity, relation-kind and fact counts are
/// exactly as configured.
pub fn generate_kg(cfg: &KgGenConfig) -> Result<KnowledgeGraph, DataGenError> {
    let n_rel = cfg.n_binary_rel + cfg.n_nary_rel;
    if cfg.n_entities == 0 || cfg.n_facts == 0 || n_rel == 0 {
        return Err(DataGenError::Infeasible("sizes must be positive".into()));
    }
    if cfg.n_nary_rel > 0 && cfg.max_attrs == 0 {
        return Err(DataGenError::Infeasible(
            "n-ary relations need max_attrs >= 1".into(),
        ));
    }
    if cfg.n_facts < n_rel {
        return Err(DataGenError::Infeasible(format!(
            "{} facts cannot cover {n_rel} relations",
            cfg.n_facts
        )));
    }
    let mut rng = seeded_rng(cfg.seed);
    let sizes = pool_sizes(cfg.n_entities)?;
    let rels = choose_relations(cfg, &mut rng);
    let mut b = KgBuilder::new();
    let mut taken = BTreeSet::new();
    let mut pools: BTreeMap<Ty, Vec<EntityId>> = BTreeMap::new();
    for (&ty, &n) in &sizes {
        let names = make_names(ty, n, &mut rng, &mut taken);
        pools.insert(ty, names.iter().map(|s| b.entity(s)).collect());
    }
    let rel_ids: Vec<RelationId> = rels.iter().map(|r| b.relation(&r.name)).collect();
    let attr_ids: Vec<Vec<RelationId>> = rels
        .iter()
        .map(|r| r.attrs.iter().map(|(a, _)| b.relation(a)).collect())
        .collect();

    // Pools are already shuffled, so rank order is a random popularity order.
    // Popular entities gather facts and form chains; the tail supplies objects
    // that occur only once.
    let popularity: BTreeMap<Ty, WeightedIndex<f64>> = pools
        .iter()
        .map(|(&ty, v)| {
            let w = (0..v.len()).map(|r| libm::pow(r as f64 + 1.0, -ZIPF));
            (ty, WeightedIndex::new(w).expect("non-empty pool"))
        })
        .collect();
    let pick = |ty: Ty, rng: &mut SeededRng| -> EntityId {
        let pool = &pools[&ty];
        if matches!(ty, Ty::Year | Ty::Gender) {
            pool[rng.gen_range(0..pool.len())]
        } else {
            pool[popularity[&ty].sample(rng)]
        }
    };
    // per functional relation, the subjects still free; popular ones pop first
    let mut free: Vec<Vec<EntityId>> = rels
        .iter()
        .map(|r| {
            if !r.functional {
                return Vec::new();
            }
            let pool = &pools[&r.subj];
            let mut keyed: Vec<(f64, EntityId)> = pool
                .iter()
                .enumerate()
                .map(|(i, &e)| {
                    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    (libm::pow(u, libm::pow(i as f64 + 1.0, ZIPF)), e)
                })
                .collect();
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
            keyed.into_iter().map(|(_, e)| e).collect()
        })
        .collect();
    let mut keys: BTreeSet<FactKey> = BTreeSet::new();
    let mut facts = Vec::with_capacity(cfg.n_facts);

    let mut draw =
        |ri: usize, rng: &mut SeededRng, free: &mut Vec<Vec<EntityId>>| -> Option<NAryFact> {
            let r = &rels[ri];
            let s = if r.functional {
                *free[ri].last()?
            } else {
                pick(r.subj, rng)
            };
            let o = pick(r.obj, rng);
            if s == o {
                return None;
            }
            let mut attrs = Vec::new();
            if !r.attrs.is_empty() {
                let k = if cfg.max_attrs >= 2 && r.attrs.len() >= 2 && rng.gen_bool(0.3) {
                    2
                } else {
                    1
                };
                for (j, (_, ty)) in r.attrs.iter().enumerate().take(k) {
                    let v = pick(*ty, rng);
                    attrs.push((attr_ids[ri][j], v));
                }
            }
            let f = NAryFact {
                s,
                p: rel_ids[ri],
                o,
                attrs,
            };
            if !keys.insert(f.key()) {
                return None;
            }
            if r.functional {
                free[ri].pop();
            }
            Some(f)
        };

    for ri in 0..rels.len() {
        let f = (0..200).find_map(|_| draw(ri, &mut rng, &mut free));
        match f {
            Some(f) => facts.push(f),
            None => {
                return Err(DataGenError::Infeasible(format!(
                    "cannot place a fact for `{}`",
                    rels[ri].name
                )))
            }
        }
    }
    let mut saturated = alloc::vec![false; rels.len()];
    let mut misses = alloc::vec![0usize; rels.len()];
    while facts.len() < cfg.n_facts {
        let live: Vec<usize> = (0..rels.len()).filter(|&i| !saturated[i]).collect();
        if live.is_empty() {
            return Err(DataGenError::Infeasible(format!(
                "only {} distinct facts fit the pools",
                facts.len()
            )));
        }
        let total: f64 = live.iter().map(|&i| rels[i].weight).sum();
        let mut x = rng.gen_range(0.0..total);
        let mut ri = live[live.len() - 1];
        for &i in &live {
            if x < rels[i].weight {
                ri = i;
                break;
            }
            x -= rels[i].weight;
        }
        match draw(ri, &mut rng, &mut free) {
            Some(f) => {
                misses[ri] = 0;
                facts.push(f);
            }
            None => {
                misses[ri] += 1;
                if misses[ri] > 200 || (rels[ri].functional && free[ri].is_empty()) {
                    saturated[ri] = true;
                }
            }
        }
    }
    for f in facts {
        b.add_fact(f);
    }
    Ok(b.build())
}

/// Removes `floor(fraction * n_facts)` facts chosen uniformly at random.
/// Symbol tables are kept, so ids and embeddings stay valid.
pub fn corrupt_kg(
    kg: &KnowledgeGraph,
    fraction: f64,
    seed: u64,
) -> Result<KnowledgeGraph, DataGenError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(DataGenError::BadFraction(fraction));
    }
    let n = kg.facts().len();
    let k = libm::floor(fraction * n as f64) as usize;
    let mut rng = seeded_rng(seed);
    let drop: BTreeSet<usize> = rand::seq::index::sample(&mut rng, n, k)
        .into_iter()
        .collect();
    Ok(kg.retain(|i, _| !drop.contains(&i)))
}

// ---------------------------------------------------------------- templates

/// One fact of a template. Terms are `?` (the fact's own unknown: the answer
/// at the root, the output elsewhere), `#i` (output of child `i`), `{k}`
/// (slot `k`) or a constant entity name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactSkeleton {
    /// Gold role of every item of the NL fact, space separated.
    pub locs: String,
    pub s: String,
    pub p: String,
    pub o: String,
    #[serde(default)]
    pub attrs: Vec<(String, String)>,
    #[serde(default)]
    pub children: Vec<FactSkeleton>,
}

impl FactSkeleton {
    fn count(&self) -> usize {
        1 + self.children.iter().map(FactSkeleton::count).sum::<usize>()
    }

    fn depth(&self) -> usize {
        1 + self
            .children
            .iter()
            .map(FactSkeleton::depth)
            .max()
            .unwrap_or(0)
    }

    fn terms(&self) -> impl Iterator<Item = &str> {
        [self.s.as_str(), self.o.as_str()]
            .into_iter()
            .chain(self.attrs.iter().map(|(_, v)| v.as_str()))
    }
}

/// A question template: a bracketed syntax tree whose kept constituents carry
/// a trailing `*`, slot leaves `{k}`, and the gold fact skeletons.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionTemplate {
    pub id: u32,
    pub mode: u8,
    pub pattern: String,
    pub tree: String,
    /// Fixed mentions and the entities they denote.
    #[serde(default)]
    pub links: BTreeMap<String, String>,
    pub fact: FactSkeleton,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    /// Word → alternatives used for surface perturbation. A key `word/TAG`
    /// applies only under that part-of-speech tag and wins over a bare `word`.
    #[serde(default)]
    pub synonyms: BTreeMap<String, Vec<String>>,
    pub templates: Vec<QuestionTemplate>,
}

const BUILTIN: &str = include_str!("../data/templates.json");

pub fn parse_templates(json: &str) -> Result<TemplateSet, DataGenError> {
    serde_json::from_str(json).map_err(|e| DataGenError::Parse(e.to_string()))
}

/// The 34 shipped templates.
pub fn builtin_templates() -> TemplateSet {
    parse_templates(BUILTIN).expect("shipped templates parse")
}

pub fn builtin_templates_json() -> &'static str {
    BUILTIN
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tm<'a> {
    Own,
    Child(usize),
    Slot(usize),
    Const(&'a str),
}

fn parse_term(s: &str) -> Tm<'_> {
    if s == "?" {
        Tm::Own
    } else if let Some(i) = s.strip_prefix('#').and_then(|d| d.parse().ok()) {
        Tm::Child(i)
    } else if let Some(k) = s
        .strip_prefix('{')
        .and_then(|d| d.strip_suffix('}'))
        .and_then(|d| d.parse().ok())
    {
        Tm::Slot(k)
    } else {
        Tm::Const(s)
    }
}

fn slot_of(token: &str) -> Option<usize> {
    token.strip_prefix('{')?.strip_suffix('}')?.parse().ok()
}

/// Rebuilds `t` with relabelled internal nodes and rewritten leaves.
fn map_tree<L, W>(t: &SyntaxTree, mut label: L, mut leaf: W) -> SyntaxTree
where
    L: FnMut(&str) -> String,
    W: FnMut(&str, &str) -> String,
{
    let root = t.root();
    let mut out = SyntaxTree::with_root(&label(t.label(root).unwrap_or("ROOT")));
    let mut stack: Vec<(NodeId, NodeId)> = alloc::vec![(root, out.root())];
    // children are pushed in reverse so that pre-order is preserved
    while let Some((src, dst)) = stack.pop() {
        let mut pending = Vec::new();
        for &c in t.children(src) {
            if let Some(tok) = t.token(c) {
                out.add_leaf(dst, &leaf(t.label(src).unwrap_or(""), tok));
            } else {
                let id = out.add_internal(dst, &label(t.label(c).unwrap_or("")));
                pending.push((c, id));
            }
        }
        stack.extend(pending.into_iter().rev());
    }
    out.compact()
}

fn strip_mark(l: &str) -> String {
    l.strip_suffix('*').unwrap_or(l).to_string()
}

/// Gold structures derived from a surface tree.
struct Derived {
    raw: SyntaxTree,
    gold: NlFactTree,
}

fn template_err(id: u32, msg: impl Into<String>) -> DataGenError {
    DataGenError::Template {
        id,
        msg: msg.into(),
    }
}

/// Derives the gold NL fact tree of a filled template tree (marks intact).
fn derive(t: &QuestionTemplate, marked: &SyntaxTree) -> Result<Derived, DataGenError> {
    let id = t.id;
    let raw = map_tree(marked, strip_mark, |_, w| w.to_string());
    let pre_marked = preprocess(marked);
    let pre = preprocess(&raw);
    if map_tree(&pre_marked, strip_mark, |_, w| w.to_string()) != pre {
        return Err(template_err(id, "marks change preprocessing"));
    }
    let keep: BTreeSet<NodeId> = pre_marked
        .bfs()
        .into_iter()
        .filter(|&n| pre_marked.label(n).is_some_and(|l| l.ends_with('*')))
        .collect();
    for &k in &keep {
        if !is_eligible(&pre, k) {
            return Err(template_err(
                id,
                format!("kept node {} is not eligible", pre.label(k).unwrap_or("")),
            ));
        }
    }
    let (reduced, _) = eliminate_with(&pre, ContextRange::default(), |ctx| {
        Ok((!keep.contains(&ctx.center), None))
    })
    .map_err(|e| template_err(id, e.to_string()))?;
    let mut gold = fact_tree_from(&reduced).map_err(|e| template_err(id, e.to_string()))?;
    assign_locs(id, &mut gold.root, &t.fact)?;
    replay_labels(&pre, &gold, ContextRange::default())
        .map_err(|e| template_err(id, format!("replay: {e}")))?;
    Ok(Derived { raw, gold })
}

fn assign_locs(id: u32, f: &mut NlFact, sk: &FactSkeleton) -> Result<(), DataGenError> {
    let locs: Vec<Loc> = sk
        .locs
        .split_whitespace()
        .map(|s| Loc::parse(s).ok_or_else(|| template_err(id, format!("bad role `{s}`"))))
        .collect::<Result<_, _>>()?;
    if locs.len() != f.items.len() {
        return Err(template_err(
            id,
            format!(
                "{} roles for {} items in `{}`",
                locs.len(),
                f.items.len(),
                f.surface()
            ),
        ));
    }
    if f.children.len() != sk.children.len() {
        return Err(template_err(
            id,
            format!(
                "fact `{}` has {} children, skeleton {}",
                f.surface(),
                f.children.len(),
                sk.children.len()
            ),
        ));
    }
    for (item, loc) in f.items.iter_mut().zip(locs) {
        item.loc = Some(loc);
        // placeholders must sit where the skeleton puts them
        let want = match item.kind {
            ItemKind::Answer => Some("?".to_string()),
            ItemKind::Child(i) => Some(format!("#{i}")),
            ItemKind::Token(_) => None,
        };
        if let Some(w) = want {
            let ok = match loc {
                Loc::S => sk.s == w,
                Loc::O => sk.o == w,
                Loc::V => sk.attrs.iter().any(|(_, v)| *v == w),
                _ => false,
            };
            if !ok {
                return Err(template_err(
                    id,
                    format!("placeholder {w} labelled {loc} disagrees with skeleton"),
                ));
            }
        }
    }
    for (c, s) in f.children.iter_mut().zip(&sk.children) {
        assign_locs(id, c, s)?;
    }
    Ok(())
}

/// Structural checks of a template, independent of any KG.
pub fn validate_template(t: &QuestionTemplate) -> Result<(), DataGenError> {
    let id = t.id;
    let expected = match t.mode {
        1 => (1, 1),
        2 => (2, 2),
        3 => (3, 3),
        4 => (3, 2),
        m => return Err(template_err(id, format!("unknown mode {m}"))),
    };
    if (t.fact.count(), t.fact.depth()) != expected {
        return Err(template_err(
            id,
            format!(
                "mode {} needs {} facts at depth {}",
                t.mode, expected.0, expected.1
            ),
        ));
    }
    // every slot in exactly one fact, every fact with exactly one own unknown
    fn check(
        sk: &FactSkeleton,
        seen: &mut BTreeMap<usize, usize>,
        id: u32,
    ) -> Result<(), DataGenError> {
        let own = sk.terms().filter(|s| parse_term(s) == Tm::Own).count();
        if own != 1 {
            return Err(template_err(
                id,
                format!("fact `{}` has {own} unknowns", sk.p),
            ));
        }
        for (i, _) in sk.children.iter().enumerate() {
            let n = sk.terms().filter(|s| parse_term(s) == Tm::Child(i)).count();
            if n != 1 {
                return Err(template_err(
                    id,
                    format!("child {i} of `{}` bound {n} times", sk.p),
                ));
            }
        }
        for s in sk.terms() {
            if let Tm::Slot(k) = parse_term(s) {
                *seen.entry(k).or_default() += 1;
            }
        }
        sk.children.iter().try_for_each(|c| check(c, seen, id))
    }
    let mut seen = BTreeMap::new();
    check(&t.fact, &mut seen, id)?;
    if seen.values().any(|&n| n != 1) || seen.keys().copied().ne(0..seen.len()) {
        return Err(template_err(id, "slots must be 0..k, each used once"));
    }
    let marked = parse_bracketed(&t.tree).map_err(|e| template_err(id, e.to_string()))?;
    let filled = map_tree(
        &marked,
        |l| l.to_string(),
        |_, w| match slot_of(w) {
            Some(k) => format!("Slot Entity {k}"),
            None => w.to_string(),
        },
    );
    derive(t, &filled).map(|_| ())
}

/// Relation and constant names a template needs from the KG.
pub fn template_requirements(t: &QuestionTemplate) -> Vec<String> {
    fn walk(sk: &FactSkeleton, out: &mut Vec<String>) {
        out.push(sk.p.clone());
        for (a, _) in &sk.attrs {
            out.push(a.clone());
        }
        for s in sk.terms() {
            if let Tm::Const(c) = parse_term(s) {
                out.push(c.to_string());
            }
        }
        sk.children.iter().for_each(|c| walk(c, out));
    }
    let mut out = Vec::new();
    walk(&t.fact, &mut out);
    out.extend(t.links.values().cloned());
    out
}

fn check_requirements(t: &QuestionTemplate, kg: &KnowledgeGraph) -> Result<(), DataGenError> {
    fn walk(sk: &FactSkeleton, kg: &KnowledgeGraph, id: u32) -> Result<(), DataGenError> {
        let miss = |name: &str| DataGenError::RoleMismatch {
            id,
            name: name.into(),
        };
        if kg.relation_id(&sk.p).is_none() {
            return Err(miss(&sk.p));
        }
        for (a, _) in &sk.attrs {
            kg.relation_id(a).ok_or_else(|| miss(a))?;
        }
        for s in sk.terms() {
            if let Tm::Const(c) = parse_term(s) {
                kg.entity_id(c).ok_or_else(|| miss(c))?;
            }
        }
        sk.children.iter().try_for_each(|c| walk(c, kg, id))
    }
    walk(&t.fact, kg, t.id)?;
    for e in t.links.values() {
        kg.entity_id(e).ok_or_else(|| DataGenError::RoleMismatch {
            id: t.id,
            name: e.clone(),
        })?;
    }
    Ok(())
}

/// A generated question with its gold annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct QaItem {
    pub id: String,
    pub template: u32,
    pub question: String,
    /// Bracketed syntax tree before preprocessing.
    pub tree: String,
    pub gold_nl_tree: NlFactTree,
    pub gold_kg_tree: KgFactTree,
    pub links: Links,
    pub answer: EntityId,
    pub n_facts: usize,
    /// Synonym substitutions applied to the surface, in order.
    pub substitutions: Vec<(String, String)>,
}

/// Samples a fact matching `sk` whose own unknown equals `own` (when given),
/// then recursively the children. Slot values are recorded in `slots`.
fn sample_fact(
    kg: &KnowledgeGraph,
    sk: &FactSkeleton,
    own: Option<EntityId>,
    is_root: bool,
    slots: &mut BTreeMap<usize, EntityId>,
    rng: &mut SeededRng,
) -> Option<KgFactNode> {
    let p = kg.relation_id(&sk.p)?;
    let attr_ids: Vec<RelationId> = sk
        .attrs
        .iter()
        .map(|(a, _)| kg.relation_id(a))
        .collect::<Option<_>>()?;
    // value of each skeleton term in a stored fact
    let values = |f: &NAryFact| -> Option<Vec<EntityId>> {
        let mut v = alloc::vec![f.s, f.o];
        for a in &attr_ids {
            v.push(f.attrs.iter().find(|(b, _)| b == a)?.1);
        }
        Some(v)
    };
    let terms: Vec<Tm<'_>> = sk.terms().map(parse_term).collect();
    let mut cands: Vec<(u32, Vec<EntityId>)> = kg
        .with_predicate(p)
        .iter()
        .filter_map(|&i| {
            let vals = values(kg.fact(i))?;
            let ok = terms.iter().zip(&vals).all(|(t, &e)| match *t {
                Tm::Own => own.is_none_or(|o| o == e),
                Tm::Const(c) => kg.entity_id(c) == Some(e),
                Tm::Slot(k) => slots.get(&k).is_none_or(|&b| b == e),
                Tm::Child(_) => true,
            });
            ok.then_some((i, vals))
        })
        .collect();
    cands.shuffle(rng);
    for (_, vals) in cands {
        let mut local = slots.clone();
        let mut children = Vec::with_capacity(sk.children.len());
        let mut ok = true;
        for (ci, csk) in sk.children.iter().enumerate() {
            let at = terms.iter().position(|t| *t == Tm::Child(ci))?;
            match sample_fact(kg, csk, Some(vals[at]), false, &mut local, rng) {
                Some(n) => children.push(n),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        let mut own_val = None;
        let mut mk = |i: usize, t: Tm<'_>| -> Term {
            match t {
                Tm::Own => {
                    own_val = Some(vals[i]);
                    if is_root {
                        Term::Answer
                    } else {
                        Term::Out
                    }
                }
                Tm::Child(c) => Term::Child(c),
                Tm::Slot(k) => {
                    local.insert(k, vals[i]);
                    Term::Entity(vals[i])
                }
                Tm::Const(_) => Term::Entity(vals[i]),
            }
        };
        let s = mk(0, terms[0]);
        let o = mk(1, terms[1]);
        let attrs = attr_ids
            .iter()
            .enumerate()
            .map(|(j, &a)| (a, mk(2 + j, terms[2 + j])))
            .collect();
        let node = KgFactNode {
            fact: KgFact { s, p, o, attrs },
            children,
            gold: own_val,
        };
        if !determined(kg, &node) {
            continue;
        }
        *slots = local;
        return Some(node);
    }
    None
}

/// The fact, read with its children's gold values filled in, has its gold
/// value as the only solution. Checked at every level, this keeps each step
/// of a chain well posed.
fn determined(kg: &KnowledgeGraph, n: &KgFactNode) -> bool {
    let Some(gold) = n.gold else { return false };
    let mut f = n.fact.clone();
    for (i, c) in n.children.iter().enumerate() {
        let (Some(pos), Some(v)) = (f.find(Term::Child(i)), c.gold) else {
            return false;
        };
        f.set(pos, Term::Entity(v));
    }
    if let Some(pos) = f.find(Term::Out) {
        f.set(pos, Term::Answer);
    }
    let single = KgFactTree {
        root: KgFactNode {
            fact: f,
            children: Vec::new(),
            gold: None,
        },
    };
    let sols = brute_force_answer(kg, &single);
    sols.len() == 1 && sols.contains(&gold)
}

/// Fills a template from the KG. Returns `None` when no matching fact
/// combination is found or the answer is not unique.
pub fn instantiate_template(
    t: &QuestionTemplate,
    synonyms: &BTreeMap<String, Vec<String>>,
    synonym_rate: f64,
    kg: &KnowledgeGraph,
    rng: &mut SeededRng,
) -> Result<Option<QaItem>, DataGenError> {
    check_requirements(t, kg)?;
    let mut slots = BTreeMap::new();
    let Some(root) = sample_fact(kg, &t.fact, None, true, &mut slots, rng) else {
        return Ok(None);
    };
    let Some(answer) = root.gold else {
        return Ok(None);
    };
    let gold_kg_tree = KgFactTree { root };
    let marked = parse_bracketed(&t.tree).map_err(|e| template_err(t.id, e.to_string()))?;
    let mut subs = Vec::new();
    let mut links = Links::new();
    let filled = map_tree(
        &marked,
        |l| l.to_string(),
        |tag, w| {
            if let Some(k) = slot_of(w) {
                let e = slots[&k];
                let name = kg.entity_name(e).to_string();
                links.insert(name.clone(), e);
                return name;
            }
            let alts = synonyms
                .get(&format!("{w}/{tag}"))
                .or_else(|| synonyms.get(w));
            if let Some(alts) = alts {
                if !alts.is_empty() && rng.gen_bool(synonym_rate) {
                    let alt = alts[rng.gen_range(0..alts.len())].clone();
                    subs.push((w.to_string(), alt.clone()));
                    return alt;
                }
            }
            w.to_string()
        },
    );
    for (mention, name) in &t.links {
        let e = kg
            .entity_id(name)
            .ok_or_else(|| DataGenError::RoleMismatch {
                id: t.id,
                name: name.clone(),
            })?;
        links.insert(mention.clone(), e);
    }
    let d = derive(t, &filled)?;
    let n_facts = gold_kg_tree.n_facts();
    Ok(Some(QaItem {
        id: String::new(),
        template: t.id,
        question: d.raw.text(),
        tree: d.raw.serialize(),
        gold_nl_tree: d.gold,
        gold_kg_tree,
        links,
        answer,
        n_facts,
        substitutions: subs,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_items: usize,
    pub seed: u64,
    /// Chance of replacing each substitutable word.
    pub synonym_rate: f64,
    /// Attempts allowed per requested item.
    pub attempts_per_item: usize,
}

impl DatasetConfig {
    pub fn new(n_items: usize, seed: u64) -> Self {
        DatasetConfig {
            n_items,
            seed,
            synonym_rate: 0.3,
            attempts_per_item: 200,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<QaItem>,
    pub splits: Splits,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<Vec<&QaItem>> {
        let ids = match name {
            "train" => &self.splits.train,
            "valid" => &self.splits.valid,
            "test" => &self.splits.test,
            _ => return None,
        };
        let by_id: BTreeMap<&str, &QaItem> =
            self.items.iter().map(|i| (i.id.as_str(), i)).collect();
        Some(
            ids.iter()
                .filter_map(|id| by_id.get(id.as_str()).copied())
                .collect(),
        )
    }
}

/// Generates `n_items` verified questions. Templates are drawn uniformly
/// among those the KG supports; a template that keeps failing is retired.
/// Questions are unique by text.
pub fn generate_dataset(
    kg: &KnowledgeGraph,
    set: &TemplateSet,
    cfg: &DatasetConfig,
) -> Result<Dataset, DataGenError> {
    for t in &set.templates {
        validate_template(t)?;
    }
    let mut live: Vec<&QuestionTemplate> = set
        .templates
        .iter()
        .filter(|t| check_requirements(t, kg).is_ok())
        .collect();
    if live.is_empty() {
        return Err(DataGenError::NoTemplates);
    }
    let mut rng = seeded_rng(cfg.seed);
    let mut items: Vec<QaItem> = Vec::with_capacity(cfg.n_items);
    let mut seen = BTreeSet::new();
    let mut fails: BTreeMap<u32, usize> = BTreeMap::new();
    let budget = cfg.attempts_per_item.max(1) * cfg.n_items.max(1);
    let mut attempts = 0;
    while items.len() < cfg.n_items {
        if attempts >= budget || live.is_empty() {
            return Err(DataGenError::Exhausted {
                got: items.len(),
                wanted: cfg.n_items,
                attempts,
            });
        }
        attempts += 1;
        let ti = rng.gen_range(0..live.len());
        let t = live[ti];
        match instantiate_template(t, &set.synonyms, cfg.synonym_rate, kg, &mut rng)? {
            Some(mut item) if seen.insert(item.question.clone()) => {
                fails.insert(t.id, 0);
                item.id = format!("q{:05}", items.len());
                items.push(item);
            }
            _ => {
                let f = fails.entry(t.id).or_default();
                *f += 1;
                if *f >= 30 {
                    live.remove(ti);
                }
            }
        }
    }
    let splits = stratified_split(&items, cfg.seed);
    Ok(Dataset { items, splits })
}

/// Largest-remainder apportionment of `total` over `sizes`.
fn apportion(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return alloc::vec![0; sizes.len()];
    }
    let mut out: Vec<usize> = sizes.iter().map(|&s| s * total / n).collect();
    let mut rest: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .map(|(i, &s)| ((s * total) % n, i))
        .collect();
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = total - out.iter().sum::<usize>();
    for &(_, i) in rest.iter().take(short) {
        out[i] += 1;
    }
    out
}

/// 8:1:1 split stratified by fact count. Valid and test each get
/// `floor(n / 10)` items overall.
pub fn stratified_split(items: &[QaItem], seed: u64) -> Splits {
    let mut strata: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for it in items {
        strata.entry(it.n_facts).or_default().push(&it.id);
    }
    let sizes: Vec<usize> = strata.values().map(Vec::len).collect();
    let n = items.len();
    let n_valid = apportion(&sizes, n / 10);
    let n_test = apportion(&sizes, n / 10);
    let mut rng = seeded_rng(seed ^ 0x5917);
    let mut out = Splits::default();
    for (k, ids) in strata.values_mut().enumerate() {
        ids.shuffle(&mut rng);
        let (v, t) = (n_valid[k], n_test[k]);
        out.valid.extend(ids[..v].iter().map(|s| s.to_string()));
        out.test.extend(ids[v..v + t].iter().map(|s| s.to_string()));
        out.train.extend(ids[v + t..].iter().map(|s| s.to_string()));
    }
    out.train.sort();
    out.valid.sort();
    out.test.sort();
    out
}

/// Fact-level role sequences that occur with more than one labelling across
/// templates: the labeler cannot resolve these from syntax alone.
pub fn role_conflicts(set: &TemplateSet) -> Vec<(Vec<String>, Vec<Vec<Loc>>)> {
    let mut seen: BTreeMap<Vec<String>, BTreeSet<Vec<Loc>>> = BTreeMap::new();
    for t in &set.templates {
        let Ok(marked) = parse_bracketed(&t.tree) else {
            continue;
        };
        let filled = map_tree(&marked, |l| l.to_string(), |_, w| w.to_string());
        let Ok(d) = derive(t, &filled) else { continue };
        for (syn, locs) in crate::locate::label_pairs(&d.gold) {
            seen.entry(syn).or_default().insert(locs);
        }
    }
    seen.into_iter()
        .filter(|(_, l)| l.len() > 1)
        .map(|(s, l)| (s, l.into_iter().collect()))
        .collect()
}
