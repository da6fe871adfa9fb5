//! Fact reasoning: a trainable n-ary fact scorer completes one missing entity
//! per fact, and completed entities flow bottom-up through the fact tree.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::kg::{
    AttrMatch, EntityId, FactPattern, KgError, KnowledgeGraph, NAryFact, RelationId, Slot,
};
use crate::numkit::{bce_with_logit, seeded_rng, sigmoid, SeededRng, Tensor};
use crate::train::{fit, TrainConfig, TrainLog};
use crate::tree::{KgFact, KgFactNode, KgFactTree, Position, Term};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReasonError {
    #[error("fact needs exactly one unresolved placeholder, found {0}")]
    PlaceholderCount(usize),
    #[error("fact {0} is under-constrained: {1} unresolved placeholders")]
    UnderConstrained(usize, usize),
    #[error("no candidate entities")]
    NoCandidates,
    #[error("entity or relation id {0} has no embedding")]
    UnknownId(u32),
    #[error("knowledge graph has {facts} facts, fewer than the batch size {batch}")]
    KgTooSmall { facts: usize, batch: usize },
    #[error("amplification factor must be at least 1, got {0}")]
    BadLambda(f64),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Num(#[from] crate::numkit::NumError),
}

/// Parameter indices.
mod slot {
    pub const ENT: usize = 0;
    pub const REL: usize = 1;
    /// Validity network: hidden weights, hidden bias, output weights, output bias.
    pub const VAL: usize = 2;
    /// Compatibility network, same layout.
    pub const COMP: usize = 6;
}

/// Entity and relation contributions to the first layer of both networks,
/// precomputed so that ranking all candidates costs one vector add each.
#[derive(Debug, Clone, PartialEq, Default)]
struct Projections {
    /// Per block of the input (`s, p, o` for validity; `s, p, o, a, v` for
    /// compatibility), rows indexed by entity or relation id.
    val: [Vec<Vec<f64>>; 3],
    comp: [Vec<Vec<f64>>; 5],
}

/// Plausibility of n-ary facts: `w · validity(s,p,o) + (1 − w) · minᵢ
/// compatibility(s,p,o,aᵢ,vᵢ)`, or validity alone for binary facts. Each network
/// is one ReLU hidden layer of width `2d` with a sigmoid output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactScorer {
    pub dim: usize,
    pub mix: f64,
    pub params: Vec<Tensor>,
    #[serde(skip)]
    proj: Option<Projections>,
}

struct Mlp {
    hpre: Vec<f64>,
    logit: f64,
}

fn mlp_forward(params: &[Tensor], base: usize, x: &[f64]) -> Mlp {
    let mut hpre = params[base + 1].data().to_vec();
    params[base].vec_mat_acc(x, &mut hpre);
    Mlp {
        logit: mlp_head(params, base, &hpre),
        hpre,
    }
}

fn mlp_head(params: &[Tensor], base: usize, hpre: &[f64]) -> f64 {
    let w = params[base + 2].data();
    let mut z = params[base + 3].data()[0];
    for (h, wi) in hpre.iter().zip(w) {
        if *h > 0.0 {
            z += h * wi;
        }
    }
    z
}

/// Adds the gradient of `dlogit · logit` and returns the input gradient.
fn mlp_backward(
    params: &[Tensor],
    base: usize,
    x: &[f64],
    m: &Mlp,
    dlogit: f64,
    grads: &mut [Tensor],
) -> Vec<f64> {
    let h: Vec<f64> = m.hpre.iter().map(|&v| v.max(0.0)).collect();
    grads[base + 2].outer_acc(&h, &[dlogit]);
    grads[base + 3].data_mut()[0] += dlogit;
    let w2 = params[base + 2].data();
    let dpre: Vec<f64> = m
        .hpre
        .iter()
        .zip(w2)
        .map(|(&hp, &w)| if hp > 0.0 { w * dlogit } else { 0.0 })
        .collect();
    grads[base].outer_acc(x, &dpre);
    for (g, d) in grads[base + 1].data_mut().iter_mut().zip(&dpre) {
        *g += d;
    }
    let mut dx = alloc::vec![0.0; x.len()];
    params[base].mat_vec_acc(&dpre, &mut dx);
    dx
}

fn concat(parts: &[&[f64]]) -> Vec<f64> {
    let mut v = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        v.extend_from_slice(p);
    }
    v
}

impl FactScorer {
    pub fn new(n_entities: usize, n_relations: usize, dim: usize, mix: f64, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let h = 2 * dim;
        let mut params = alloc::vec![
            Tensor::uniform(n_entities, dim, 0.1, &mut rng),
            Tensor::uniform(n_relations, dim, 0.1, &mut rng),
        ];
        for inputs in [3, 5] {
            params.push(Tensor::glorot(inputs * dim, h, &mut rng));
            params.push(Tensor::zeros(1, h));
            params.push(Tensor::glorot(h, 1, &mut rng));
            params.push(Tensor::zeros(1, 1));
        }
        FactScorer {
            dim,
            mix,
            params,
            proj: None,
        }
    }

    pub fn from_params(dim: usize, mix: f64, params: Vec<Tensor>) -> Self {
        let mut sc = FactScorer {
            dim,
            mix,
            params,
            proj: None,
        };
        sc.prepare();
        sc
    }

    pub fn n_entities(&self) -> usize {
        self.params[slot::ENT].rows()
    }

    pub fn n_relations(&self) -> usize {
        self.params[slot::REL].rows()
    }

    fn ent(&self, e: EntityId) -> Result<&[f64], ReasonError> {
        if e.index() < self.n_entities() {
            Ok(self.params[slot::ENT].row(e.index()))
        } else {
            Err(ReasonError::UnknownId(e.0))
        }
    }

    fn rel(&self, r: RelationId) -> Result<&[f64], ReasonError> {
        if r.index() < self.n_relations() {
            Ok(self.params[slot::REL].row(r.index()))
        } else {
            Err(ReasonError::UnknownId(r.0))
        }
    }

    /// Precomputes per-id first-layer contributions used by [`infer_missing`].
    pub fn prepare(&mut self) {
        let d = self.dim;
        let block = |w: &Tensor, k: usize, table: &Tensor| -> Vec<Vec<f64>> {
            let sub = Tensor::from_vec(
                d,
                w.cols(),
                w.data()[k * d * w.cols()..(k + 1) * d * w.cols()].to_vec(),
            )
            .expect("block shape");
            (0..table.rows())
                .map(|i| {
                    let mut out = alloc::vec![0.0; w.cols()];
                    sub.vec_mat_acc(table.row(i), &mut out);
                    out
                })
                .collect()
        };
        let (ent, rel) = (&self.params[slot::ENT], &self.params[slot::REL]);
        let v = &self.params[slot::VAL];
        let c = &self.params[slot::COMP];
        self.proj = Some(Projections {
            val: [block(v, 0, ent), block(v, 1, rel), block(v, 2, ent)],
            comp: [
                block(c, 0, ent),
                block(c, 1, rel),
                block(c, 2, ent),
                block(c, 3, rel),
                block(c, 4, ent),
            ],
        });
    }

    pub fn validity(&self, s: EntityId, p: RelationId, o: EntityId) -> Result<f64, ReasonError> {
        let x = concat(&[self.ent(s)?, self.rel(p)?, self.ent(o)?]);
        Ok(sigmoid(mlp_forward(&self.params, slot::VAL, &x).logit))
    }

    pub fn compatibility(
        &self,
        s: EntityId,
        p: RelationId,
        o: EntityId,
        a: RelationId,
        v: EntityId,
    ) -> Result<f64, ReasonError> {
        let x = concat(&[
            self.ent(s)?,
            self.rel(p)?,
            self.ent(o)?,
            self.rel(a)?,
            self.ent(v)?,
        ]);
        Ok(sigmoid(mlp_forward(&self.params, slot::COMP, &x).logit))
    }

    /// Plausibility of a ground fact, in (0, 1).
    pub fn score_fact(&self, f: &NAryFact) -> Result<f64, ReasonError> {
        let val = self.validity(f.s, f.p, f.o)?;
        if f.attrs.is_empty() {
            return Ok(val);
        }
        let mut worst = f64::INFINITY;
        for &(a, v) in &f.attrs {
            worst = worst.min(self.compatibility(f.s, f.p, f.o, a, v)?);
        }
        Ok(self.mix * val + (1.0 - self.mix) * worst)
    }

    /// Scores every candidate for the single placeholder of `f`.
    fn score_candidates(
        &self,
        f: &KgFact,
        pos: Position,
        cands: &[EntityId],
    ) -> Result<Vec<f64>, ReasonError> {
        let Some(proj) = &self.proj else {
            // slow path: materialise each fact
            return cands
                .iter()
                .map(|&e| {
                    let mut g = f.clone();
                    g.set(pos, Term::Entity(e));
                    self.score_fact(&g.ground().ok_or(ReasonError::PlaceholderCount(2))?)
                })
                .collect();
        };
        let known = |t: Term| t.entity();
        let check_e = |e: EntityId| {
            if e.index() < self.n_entities() {
                Ok(e.index())
            } else {
                Err(ReasonError::UnknownId(e.0))
            }
        };
        let check_r = |r: RelationId| {
            if r.index() < self.n_relations() {
                Ok(r.index())
            } else {
                Err(ReasonError::UnknownId(r.0))
            }
        };
        let p = check_r(f.p)?;
        for &c in cands {
            check_e(c)?;
        }
        let sum_into =
            |acc: &mut Vec<f64>, row: &[f64]| acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        // validity: fixed part plus the candidate's block when it sits in s or o
        let mut val_base = self.params[slot::VAL + 1].data().to_vec();
        sum_into(&mut val_base, &proj.val[1][p]);
        let val_slot = match pos {
            Position::Subject => Some(0),
            Position::Object => Some(2),
            Position::Value(_) => None,
        };
        if let Some(s) = known(f.s) {
            sum_into(&mut val_base, &proj.val[0][check_e(s)?]);
        }
        if let Some(o) = known(f.o) {
            sum_into(&mut val_base, &proj.val[2][check_e(o)?]);
        }
        let fixed_val = if val_slot.is_none() {
            Some(sigmoid(mlp_head(&self.params, slot::VAL, &val_base)))
        } else {
            None
        };
        // compatibility: one base per attribute
        let mut comp_bases = Vec::with_capacity(f.attrs.len());
        for (i, &(a, v)) in f.attrs.iter().enumerate() {
            let mut b = self.params[slot::COMP + 1].data().to_vec();
            sum_into(&mut b, &proj.comp[1][p]);
            sum_into(&mut b, &proj.comp[3][check_r(a)?]);
            if let Some(s) = known(f.s) {
                sum_into(&mut b, &proj.comp[0][check_e(s)?]);
            }
            if let Some(o) = known(f.o) {
                sum_into(&mut b, &proj.comp[2][check_e(o)?]);
            }
            let own = pos == Position::Value(i);
            if let Some(v) = known(v) {
                sum_into(&mut b, &proj.comp[4][check_e(v)?]);
            } else if !own {
                return Err(ReasonError::PlaceholderCount(2));
            }
            comp_bases.push(b);
        }
        let mut out = Vec::with_capacity(cands.len());
        let mut buf = alloc::vec![0.0; val_base.len()];
        for &c in cands {
            let ci = c.index();
            let val = match (fixed_val, val_slot) {
                (Some(v), _) => v,
                (None, Some(k)) => {
                    buf.copy_from_slice(&val_base);
                    sum_into(&mut buf, &proj.val[k][ci]);
                    sigmoid(mlp_head(&self.params, slot::VAL, &buf))
                }
                (None, None) => unreachable!(),
            };
            if f.attrs.is_empty() {
                out.push(val);
                continue;
            }
            let mut worst = f64::INFINITY;
            for (i, base) in comp_bases.iter().enumerate() {
                buf.resize(base.len(), 0.0);
                buf.copy_from_slice(base);
                let block = match pos {
                    Position::Subject => 0,
                    Position::Object => 2,
                    Position::Value(j) if j == i => 4,
                    Position::Value(_) => usize::MAX,
                };
                if block != usize::MAX {
                    sum_into(&mut buf, &proj.comp[block][ci]);
                }
                worst = worst.min(sigmoid(mlp_head(&self.params, slot::COMP, &buf)));
            }
            out.push(self.mix * val + (1.0 - self.mix) * worst);
        }
        Ok(out)
    }
}

/// Loss of one labelled (possibly corrupted) fact; adds gradients into `grads`.
/// `val_label` is the truth of `(s,p,o)`, `comp_labels[i]` that of `(s,p,o,aᵢ,vᵢ)`.
pub fn scorer_loss_grad(
    params: &[Tensor],
    f: &NAryFact,
    val_label: bool,
    comp_labels: &[bool],
    grads: &mut [Tensor],
) -> f64 {
    let d = params[slot::ENT].cols();
    let row = |t: usize, i: usize| params[t].row(i);
    let (s, p, o) = (f.s.index(), f.p.index(), f.o.index());
    let x = concat(&[row(slot::ENT, s), row(slot::REL, p), row(slot::ENT, o)]);
    let m = mlp_forward(params, slot::VAL, &x);
    let (mut loss, dl) = bce_with_logit(m.logit, if val_label { 1.0 } else { 0.0 });
    let dx = mlp_backward(params, slot::VAL, &x, &m, dl, grads);
    let mut pending: Vec<(usize, usize, Vec<f64>)> = alloc::vec![
        (slot::ENT, s, dx[..d].to_vec()),
        (slot::REL, p, dx[d..2 * d].to_vec()),
        (slot::ENT, o, dx[2 * d..].to_vec()),
    ];
    for (&(a, v), &y) in f.attrs.iter().zip(comp_labels) {
        let (a, v) = (a.index(), v.index());
        let x = concat(&[
            row(slot::ENT, s),
            row(slot::REL, p),
            row(slot::ENT, o),
            row(slot::REL, a),
            row(slot::ENT, v),
        ]);
        let m = mlp_forward(params, slot::COMP, &x);
        let (l, dl) = bce_with_logit(m.logit, if y { 1.0 } else { 0.0 });
        loss += l;
        let dx = mlp_backward(params, slot::COMP, &x, &m, dl, grads);
        for (k, (t, i)) in [
            (slot::ENT, s),
            (slot::REL, p),
            (slot::ENT, o),
            (slot::REL, a),
            (slot::ENT, v),
        ]
        .into_iter()
        .enumerate()
        {
            pending.push((t, i, dx[k * d..(k + 1) * d].to_vec()));
        }
    }
    for (t, i, g) in pending {
        grads[t]
            .row_mut(i)
            .iter_mut()
            .zip(&g)
            .for_each(|(a, b)| *a += b);
    }
    loss
}

/// Truth tables for the sub-tuples the scorer is trained on.
struct Truth {
    triples: BTreeSet<(EntityId, RelationId, EntityId)>,
    pairs: BTreeSet<(EntityId, RelationId, EntityId, RelationId, EntityId)>,
}

impl Truth {
    fn new(facts: &[NAryFact]) -> Self {
        let mut triples = BTreeSet::new();
        let mut pairs = BTreeSet::new();
        for f in facts {
            triples.insert((f.s, f.p, f.o));
            for &(a, v) in &f.attrs {
                pairs.insert((f.s, f.p, f.o, a, v));
            }
        }
        Truth { triples, pairs }
    }

    fn labels(&self, f: &NAryFact) -> (bool, Vec<bool>) {
        (
            self.triples.contains(&(f.s, f.p, f.o)),
            f.attrs
                .iter()
                .map(|&(a, v)| self.pairs.contains(&(f.s, f.p, f.o, a, v)))
                .collect(),
        )
    }
}

/// Replaces the subject, the object or one value (chosen uniformly) with a
/// uniformly drawn entity. Predicates and attributes are never touched.
pub fn corrupt(f: &NAryFact, n_entities: usize, rng: &mut SeededRng) -> NAryFact {
    let mut g = f.clone();
    let e = EntityId(rng.gen_range(0..n_entities) as u32);
    match rng.gen_range(0..2 + f.attrs.len()) {
        0 => g.s = e,
        1 => g.o = e,
        k => g.attrs[k - 2].1 = e,
    }
    g
}

#[derive(Debug, Clone)]
pub struct ScorerTraining {
    pub model: FactScorer,
    pub log: TrainLog,
    /// Facts held out from training (for completion metrics).
    pub held_out: Vec<NAryFact>,
}

/// Fraction of (true, corrupted) pairs ordered correctly.
pub fn pairwise_accuracy(sc: &FactScorer, facts: &[NAryFact], n_entities: usize, seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let mut hits = 0;
    let mut total = 0;
    for f in facts {
        let g = corrupt(f, n_entities, &mut rng);
        if g == *f {
            continue;
        }
        let (Ok(a), Ok(b)) = (sc.score_fact(f), sc.score_fact(&g)) else {
            continue;
        };
        total += 1;
        if a > b {
            hits += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Entities seen in each role of each relation, used to draw corruptions that
/// share the type of the entity they replace.
struct RolePools {
    subj: BTreeMap<RelationId, Vec<EntityId>>,
    obj: BTreeMap<RelationId, Vec<EntityId>>,
    val: BTreeMap<(RelationId, RelationId), Vec<EntityId>>,
}

impl RolePools {
    fn new(facts: &[NAryFact]) -> Self {
        let mut subj: BTreeMap<RelationId, BTreeSet<EntityId>> = BTreeMap::new();
        let mut obj: BTreeMap<RelationId, BTreeSet<EntityId>> = BTreeMap::new();
        let mut val: BTreeMap<(RelationId, RelationId), BTreeSet<EntityId>> = BTreeMap::new();
        for f in facts {
            subj.entry(f.p).or_default().insert(f.s);
            obj.entry(f.p).or_default().insert(f.o);
            for &(a, v) in &f.attrs {
                val.entry((f.p, a)).or_default().insert(v);
            }
        }
        fn flat<K: Ord>(m: BTreeMap<K, BTreeSet<EntityId>>) -> BTreeMap<K, Vec<EntityId>> {
            m.into_iter()
                .map(|(k, v)| (k, v.into_iter().collect()))
                .collect()
        }
        RolePools {
            subj: flat(subj),
            obj: flat(obj),
            val: flat(val),
        }
    }

    /// Like [`corrupt`], but the replacement comes from the entities seen in
    /// the same role.
    fn corrupt(&self, f: &NAryFact, rng: &mut SeededRng) -> NAryFact {
        let mut g = f.clone();
        let k = rng.gen_range(0..2 + f.attrs.len());
        let pool = match k {
            0 => &self.subj[&f.p],
            1 => &self.obj[&f.p],
            k => &self.val[&(f.p, f.attrs[k - 2].0)],
        };
        let e = pool[rng.gen_range(0..pool.len())];
        match k {
            0 => g.s = e,
            1 => g.o = e,
            k => g.attrs[k - 2].1 = e,
        }
        g
    }
}

/// How corrupted facts are drawn during scorer training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NegativeSampling {
    /// Corruptions per stored fact and epoch.
    pub ratio: usize,
    /// Share of corruptions drawn from the entities seen in the replaced role
    /// instead of uniformly from all entities.
    pub role_aware: f64,
}

impl NegativeSampling {
    pub fn uniform(ratio: usize) -> Self {
        NegativeSampling {
            ratio,
            role_aware: 0.0,
        }
    }
}

/// Trains the scorer with binary cross-entropy on stored facts and `negatives`
/// fresh uniform corruptions per fact and epoch. Labels of every sub-tuple
/// come from the KG, so an accidental true corruption is labelled true.
pub fn train_scorer(
    kg: &KnowledgeGraph,
    negatives: usize,
    mix: f64,
    cfg: &TrainConfig,
) -> Result<ScorerTraining, ReasonError> {
    train_scorer_with(kg, NegativeSampling::uniform(negatives), mix, cfg)
}

pub fn train_scorer_with(
    kg: &KnowledgeGraph,
    sampling: NegativeSampling,
    mix: f64,
    cfg: &TrainConfig,
) -> Result<ScorerTraining, ReasonError> {
    let facts = kg.facts();
    if facts.len() < cfg.batch_size.max(1) {
        return Err(ReasonError::KgTooSmall {
            facts: facts.len(),
            batch: cfg.batch_size,
        });
    }
    let (tr, va) = crate::train::holdout(facts.len(), cfg.valid_fraction, cfg.seed);
    let train: Vec<NAryFact> = tr.iter().map(|&i| facts[i].clone()).collect();
    let held_out: Vec<NAryFact> = va.iter().map(|&i| facts[i].clone()).collect();
    let truth = Truth::new(&train);
    let pools = RolePools::new(&train);
    let n_ent = kg.n_entities();
    let mut model = FactScorer::new(n_ent, kg.n_relations(), cfg.dim, mix, cfg.seed);
    let mut rng = seeded_rng(cfg.seed.wrapping_add(1));
    let mut params = model.params.clone();
    let log = fit(
        &mut params,
        &train,
        &held_out,
        cfg,
        |p, f, g| {
            let mut loss = scorer_loss_grad(p, f, true, &alloc::vec![true; f.attrs.len()], g);
            for _ in 0..sampling.ratio {
                let c = if sampling.role_aware > 0.0 && rng.gen_bool(sampling.role_aware.min(1.0)) {
                    pools.corrupt(f, &mut rng)
                } else {
                    corrupt(f, n_ent, &mut rng)
                };
                let (v, cl) = truth.labels(&c);
                loss += scorer_loss_grad(p, &c, v, &cl, g);
            }
            loss
        },
        |p, vs| {
            let sc = FactScorer::from_params(cfg.dim, mix, p.to_vec());
            pairwise_accuracy(&sc, vs, n_ent, cfg.seed)
        },
    )?;
    model.params = params;
    model.prepare();
    Ok(ScorerTraining {
        model,
        log,
        held_out,
    })
}

/// Which entities are ranked for a placeholder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CandidateScope {
    #[default]
    All,
    /// Only entities seen in the same role of the same predicate (or attribute).
    RoleRestricted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonerConfig {
    pub lambda: f64,
    pub scope: CandidateScope,
    /// Amplification is applied to this many best raw candidates.
    pub top_n: usize,
    /// Candidates kept per step in traces.
    pub trace_k: usize,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        ReasonerConfig {
            lambda: 1.5,
            scope: CandidateScope::All,
            top_n: 512,
            trace_k: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub entity: EntityId,
    pub raw: f64,
    pub amplified: f64,
}

/// Source of raw completion scores.
pub trait Completer {
    fn scores(
        &self,
        kg: &KnowledgeGraph,
        f: &KgFact,
        pos: Position,
        cands: &[EntityId],
    ) -> Result<Vec<f64>, ReasonError>;
}

impl Completer for FactScorer {
    fn scores(
        &self,
        _kg: &KnowledgeGraph,
        f: &KgFact,
        pos: Position,
        cands: &[EntityId],
    ) -> Result<Vec<f64>, ReasonError> {
        self.score_candidates(f, pos, cands)
    }
}

/// Perfect completion: 1 for candidates that make a stored fact, else 0.
#[derive(Debug, Clone, Copy, Default)]
pub struct KgTruth;

fn pattern_of(f: &KgFact) -> FactPattern {
    let slot = |t: Term| match t {
        Term::Entity(e) => Slot::Known(e),
        _ => Slot::Hole,
    };
    FactPattern {
        s: slot(f.s),
        p: f.p,
        o: slot(f.o),
        attrs: f.attrs.iter().map(|&(a, v)| (a, slot(v))).collect(),
    }
}

impl Completer for KgTruth {
    fn scores(
        &self,
        kg: &KnowledgeGraph,
        f: &KgFact,
        _pos: Position,
        cands: &[EntityId],
    ) -> Result<Vec<f64>, ReasonError> {
        let hits = kg.match_fact_with(&pattern_of(f), AttrMatch::Contains)?;
        Ok(cands
            .iter()
            .map(|e| if hits.contains(e) { 1.0 } else { 0.0 })
            .collect())
    }
}

fn candidates(
    kg: &KnowledgeGraph,
    f: &KgFact,
    pos: Position,
    scope: CandidateScope,
) -> Vec<EntityId> {
    let all = || {
        (0..kg.n_entities() as u32)
            .map(EntityId)
            .collect::<Vec<_>>()
    };
    if scope == CandidateScope::All {
        return all();
    }
    let mut set = BTreeSet::new();
    for &idx in kg.with_predicate(f.p) {
        let g = kg.fact(idx);
        match pos {
            Position::Subject => {
                set.insert(g.s);
            }
            Position::Object => {
                set.insert(g.o);
            }
            Position::Value(i) => {
                let a = f.attrs[i].0;
                set.extend(g.attrs.iter().filter(|(b, _)| *b == a).map(|&(_, v)| v));
            }
        }
    }
    if set.is_empty() {
        all()
    } else {
        set.into_iter().collect()
    }
}

fn rank(kg: &KnowledgeGraph, cands: &mut [Candidate], by_amplified: bool) {
    cands.sort_by(|a, b| {
        let (x, y) = if by_amplified {
            (a.amplified, b.amplified)
        } else {
            (a.raw, b.raw)
        };
        y.total_cmp(&x)
            .then_with(|| kg.entity_name(a.entity).cmp(kg.entity_name(b.entity)))
    });
}

/// Ranks completions of the single placeholder of `f`. The best `top_n` raw
/// candidates are multiplied by `lambda` when they already take part in some
/// fact with `upper_rel`; the result is sorted by amplified score with ties
/// going to the smaller entity name.
pub fn infer_missing<C: Completer + ?Sized>(
    completer: &C,
    kg: &KnowledgeGraph,
    f: &KgFact,
    upper_rel: Option<RelationId>,
    cfg: &ReasonerConfig,
) -> Result<Vec<Candidate>, ReasonError> {
    if cfg.lambda < 1.0 || cfg.lambda.is_nan() {
        return Err(ReasonError::BadLambda(cfg.lambda));
    }
    let holes = f.placeholders();
    if holes.len() != 1 {
        return Err(ReasonError::PlaceholderCount(holes.len()));
    }
    let pos = holes[0].0;
    let cands = candidates(kg, f, pos, cfg.scope);
    if cands.is_empty() {
        return Err(ReasonError::NoCandidates);
    }
    let raw = completer.scores(kg, f, pos, &cands)?;
    let mut ranked: Vec<Candidate> = cands
        .into_iter()
        .zip(raw)
        .map(|(entity, raw)| Candidate {
            entity,
            raw,
            amplified: raw,
        })
        .collect();
    rank(kg, &mut ranked, false);
    ranked.truncate(cfg.top_n.max(1));
    if let Some(r) = upper_rel {
        for c in ranked.iter_mut() {
            if kg.entity_has_relation(c.entity, r)? {
                c.amplified = c.raw * cfg.lambda;
            }
        }
    }
    rank(kg, &mut ranked, true);
    Ok(ranked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TraceStep {
    /// Completion of fact `fact` (pre-order index).
    Intra {
        fact: usize,
        upper_rel: Option<RelationId>,
        chosen: Candidate,
        top: Vec<Candidate>,
    },
    /// Entity written into the parent's placeholder for child `child`.
    Transfer {
        child: usize,
        parent: usize,
        entity: EntityId,
        from_gold: bool,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub steps: Vec<TraceStep>,
}

/// Options of one reasoning run.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReasonOptions {
    /// Transfer each child's gold entity instead of its inferred one.
    pub gold_transfer: bool,
}

fn preorder_ids(n: &KgFactNode, next: &mut usize, out: &mut Vec<usize>) {
    out.push(*next);
    *next += 1;
    for c in &n.children {
        preorder_ids(c, next, out);
    }
}

/// Bottom-up reasoning: children are completed first, their top entity is
/// written into the parent, and the root's completion is the answer.
pub fn reason_with<C: Completer + ?Sized>(
    tree: &KgFactTree,
    completer: &C,
    kg: &KnowledgeGraph,
    cfg: &ReasonerConfig,
    opts: ReasonOptions,
) -> Result<(EntityId, ReasoningTrace), ReasonError> {
    struct Ctx<'a, C: ?Sized> {
        completer: &'a C,
        kg: &'a KnowledgeGraph,
        cfg: &'a ReasonerConfig,
        opts: ReasonOptions,
        trace: ReasoningTrace,
        next_id: usize,
    }

    fn visit<C: Completer + ?Sized>(
        cx: &mut Ctx<'_, C>,
        n: &KgFactNode,
        upper: Option<RelationId>,
    ) -> Result<EntityId, ReasonError> {
        let id = cx.next_id;
        cx.next_id += 1;
        let mut fact = n.fact.clone();
        for (i, child) in n.children.iter().enumerate() {
            let pos = n.fact.find(Term::Child(i));
            let rel = pos.map(|p| n.fact.relation_at(p));
            let child_id = cx.next_id;
            let inferred = visit(cx, child, rel)?;
            let (entity, from_gold) = match (cx.opts.gold_transfer, child.gold) {
                (true, Some(g)) => (g, true),
                _ => (inferred, false),
            };
            if let Some(p) = pos {
                fact.set(p, Term::Entity(entity));
            }
            cx.trace.steps.push(TraceStep::Transfer {
                child: child_id,
                parent: id,
                entity,
                from_gold,
            });
        }
        let open = fact.placeholders().len();
        if open != 1 {
            return Err(ReasonError::UnderConstrained(id, open));
        }
        let ranked = infer_missing(cx.completer, cx.kg, &fact, upper, cx.cfg)?;
        let chosen = *ranked.first().ok_or(ReasonError::NoCandidates)?;
        cx.trace.steps.push(TraceStep::Intra {
            fact: id,
            upper_rel: upper,
            chosen,
            top: ranked.iter().take(cx.cfg.trace_k).copied().collect(),
        });
        Ok(chosen.entity)
    }

    let mut cx = Ctx {
        completer,
        kg,
        cfg,
        opts,
        trace: ReasoningTrace::default(),
        next_id: 0,
    };
    let answer = visit(&mut cx, &tree.root, None)?;
    Ok((answer, cx.trace))
}

pub fn reason(
    tree: &KgFactTree,
    sc: &FactScorer,
    kg: &KnowledgeGraph,
    cfg: &ReasonerConfig,
) -> Result<(EntityId, ReasoningTrace), ReasonError> {
    reason_with(tree, sc, kg, cfg, ReasonOptions::default())
}

/// Checks that intra steps follow a post-order of the tree and that each child
/// is transferred exactly once, right after its own completion.
pub fn trace_is_post_order(tree: &KgFactTree, trace: &ReasoningTrace) -> bool {
    fn expected(n: &KgFactNode, next: &mut usize, out: &mut Vec<usize>) -> usize {
        let id = *next;
        *next += 1;
        for c in &n.children {
            expected(c, next, out);
        }
        out.push(id);
        id
    }
    let mut order = Vec::new();
    expected(&tree.root, &mut 0, &mut order);
    let intra: Vec<usize> = trace
        .steps
        .iter()
        .filter_map(|s| match s {
            TraceStep::Intra { fact, .. } => Some(*fact),
            _ => None,
        })
        .collect();
    if intra != order {
        return false;
    }
    let mut ids = Vec::new();
    preorder_ids(&tree.root, &mut 0, &mut ids);
    let mut transferred = BTreeSet::new();
    let mut done = BTreeSet::new();
    for s in &trace.steps {
        match s {
            TraceStep::Intra { fact, .. } => {
                done.insert(*fact);
            }
            TraceStep::Transfer { child, parent, .. } => {
                if !done.contains(child) || done.contains(parent) || !transferred.insert(*child) {
                    return false;
                }
            }
        }
    }
    transferred.len() + 1 == ids.len()
}

/// Every entity the answer slot can take such that each fact, after
/// substitution, is stored in the KG (stored facts may carry extra attributes).
pub fn brute_force_answer(kg: &KnowledgeGraph, tree: &KgFactTree) -> BTreeSet<EntityId> {
    fn outputs(kg: &KnowledgeGraph, n: &KgFactNode) -> BTreeSet<EntityId> {
        let child_sets: Vec<BTreeSet<EntityId>> =
            n.children.iter().map(|c| outputs(kg, c)).collect();
        let mut out = BTreeSet::new();
        if child_sets.iter().any(BTreeSet::is_empty) {
            return out;
        }
        if n.fact.p.index() >= kg.n_relations() {
            return out;
        }
        let fits = |t: Term, e: EntityId, own: &mut Option<EntityId>| -> bool {
            match t {
                Term::Entity(x) => x == e,
                Term::Child(i) => child_sets.get(i).is_some_and(|s| s.contains(&e)),
                Term::Answer | Term::Out => match own {
                    Some(x) => *x == e,
                    None => {
                        *own = Some(e);
                        true
                    }
                },
            }
        };
        for &idx in kg.with_predicate(n.fact.p) {
            let g = kg.fact(idx);
            let mut own = None;
            if !fits(n.fact.s, g.s, &mut own) || !fits(n.fact.o, g.o, &mut own) {
                continue;
            }
            // attributes: find an injective assignment of query pairs to stored pairs
            let mut used = alloc::vec![false; g.attrs.len()];
            if assign(&n.fact.attrs, 0, &g.attrs, &mut used, own, &fits) {
                for e in assigned_outputs(&n.fact.attrs, &g.attrs, own, &fits) {
                    out.insert(e);
                }
            }
        }
        out
    }

    fn assign<F>(
        q: &[(RelationId, Term)],
        k: usize,
        stored: &[(RelationId, EntityId)],
        used: &mut [bool],
        own: Option<EntityId>,
        fits: &F,
    ) -> bool
    where
        F: Fn(Term, EntityId, &mut Option<EntityId>) -> bool,
    {
        if k == q.len() {
            return true;
        }
        for j in 0..stored.len() {
            if used[j] || stored[j].0 != q[k].0 {
                continue;
            }
            let mut o = own;
            if fits(q[k].1, stored[j].1, &mut o) {
                used[j] = true;
                if assign(q, k + 1, stored, used, o, fits) {
                    used[j] = false;
                    return true;
                }
                used[j] = false;
            }
        }
        false
    }

    /// Every value of the fact's own placeholder admitted by some assignment.
    fn assigned_outputs<F>(
        q: &[(RelationId, Term)],
        stored: &[(RelationId, EntityId)],
        own: Option<EntityId>,
        fits: &F,
    ) -> Vec<EntityId>
    where
        F: Fn(Term, EntityId, &mut Option<EntityId>) -> bool,
    {
        if let Some(e) = own {
            return alloc::vec![e];
        }
        // the placeholder sits in a value slot: try each stored pair for it
        let Some(k) = q
            .iter()
            .position(|&(_, t)| matches!(t, Term::Answer | Term::Out))
        else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for j in 0..stored.len() {
            if stored[j].0 != q[k].0 {
                continue;
            }
            let mut used = alloc::vec![false; stored.len()];
            used[j] = true;
            let rest: Vec<(RelationId, Term)> = q
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != k)
                .map(|(_, &p)| p)
                .collect();
            let e = stored[j].1;
            if assign(&rest, 0, stored, &mut used, Some(e), fits) {
                out.push(e);
            }
        }
        out
    }

    outputs(kg, &tree.root)
}

/// Filtered hits@1 of single-hole completion: for each fact and each entity
/// position, the true entity must outrank every candidate that does not also
/// complete a stored fact.
pub fn hits_at_1(
    sc: &FactScorer,
    kg: &KnowledgeGraph,
    facts: &[NAryFact],
    scope: CandidateScope,
) -> Result<f64, ReasonError> {
    let cfg = ReasonerConfig {
        lambda: 1.0,
        scope,
        top_n: usize::MAX,
        trace_k: 0,
    };
    let mut hits = 0usize;
    let mut total = 0usize;
    for f in facts {
        let kf = KgFact {
            s: Term::Entity(f.s),
            p: f.p,
            o: Term::Entity(f.o),
            attrs: f.attrs.iter().map(|&(a, v)| (a, Term::Entity(v))).collect(),
        };
        let positions: Vec<Position> = kf.terms().map(|(p, _)| p).collect();
        for pos in positions {
            let truth = kf.term(pos).entity().expect("ground fact");
            let mut q = kf.clone();
            q.set(pos, Term::Out);
            let others = kg.match_fact_with(&pattern_of(&q), AttrMatch::Contains)?;
            let ranked = infer_missing(sc, kg, &q, None, &cfg)?;
            let top = ranked
                .iter()
                .find(|c| c.entity == truth || !others.contains(&c.entity));
            total += 1;
            if top.is_some_and(|c| c.entity == truth) {
                hits += 1;
            }
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    })
}

/// Display form of a trace step with names.
pub fn describe_step(kg: &KnowledgeGraph, s: &TraceStep) -> String {
    match s {
        TraceStep::Intra {
            fact,
            chosen,
            upper_rel,
            ..
        } => alloc::format!(
            "fact {fact}: {} raw {:.4} amplified {:.4}{}",
            kg.entity_name(chosen.entity),
            chosen.raw,
            chosen.amplified,
            upper_rel
                .map(|r| alloc::format!(" (upper {})", kg.relation_name(r)))
                .unwrap_or_default()
        ),
        TraceStep::Transfer {
            child,
            parent,
            entity,
            from_gold,
        } => alloc::format!(
            "transfer {} from fact {child} to fact {parent}{}",
            kg.entity_name(*entity),
            if *from_gold { " (gold)" } else { "" }
        ),
    }
}
