//! Fact location: a BiLSTM-CRF assigns each fact item a role in {S,P,O,A,V},
//! relation phrases are matched by cosine similarity, and entity mentions are
//! resolved through the question's links.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use libm::tanh;
use serde::{Deserialize, Serialize};

use crate::kg::{EntityId, KnowledgeGraph, RelationId};
use crate::numkit::{dot, logsumexp, norm, seeded_rng, sigmoid, NumError, Tensor};
use crate::train::{fit, holdout, TrainConfig, TrainLog};
use crate::tree::{
    ItemKind, KgFact, KgFactNode, KgFactTree, Loc, NlFact, NlFactTree, Position, Term, PLH,
};

pub const N_LABELS: usize = 5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LocateError {
    #[error("empty label sequence")]
    EmptySequence,
    #[error("label sequence length {labels} does not match input length {inputs}")]
    LengthMismatch { labels: usize, inputs: usize },
    #[error("phrase `{0}` has no known tokens in the embedding table")]
    UnknownPhrase(String),
    #[error("no relation candidates")]
    NoCandidates,
    #[error("cannot link `{0}` to an entity")]
    Unlinkable(String),
    #[error("fact `{0}` has no predicate span")]
    NoPredicate(String),
    #[error("fact `{0}` has multiple predicates")]
    MultiplePredicates(String),
    #[error("fact `{fact}` has several {role} spans")]
    DuplicateRole { fact: String, role: Loc },
    #[error("fact `{fact}` is missing its {role} span")]
    MissingRole { fact: String, role: Loc },
    #[error("fact `{0}` has unpaired attribute and value spans")]
    UnpairedAttributes(String),
    #[error("span in `{0}` holds more than one placeholder")]
    CrowdedSpan(String),
    #[error("placeholder labelled as a relation in `{0}`")]
    PlaceholderRelation(String),
    #[error("child fact `{0}` has no placeholder and its parent offers no attribute to copy")]
    NotCopyable(String),
    #[error("child {0} is never bound in its parent fact")]
    UnboundChild(usize),
    #[error("embedding table: {0}")]
    Table(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Emission and transition scores of a linear-chain CRF.
pub fn path_score(em: &[[f64; N_LABELS]], trans: &Tensor, path: &[usize]) -> f64 {
    let mut s = 0.0;
    for (t, &y) in path.iter().enumerate() {
        s += em[t][y];
        if t > 0 {
            s += trans.get(path[t - 1], y);
        }
    }
    s
}

/// Highest-scoring label path. Ties resolve to the lowest label index.
pub fn viterbi(em: &[[f64; N_LABELS]], trans: &Tensor) -> Vec<usize> {
    if em.is_empty() {
        return Vec::new();
    }
    let l = em.len();
    let mut delta = em[0];
    let mut back = alloc::vec![[0usize; N_LABELS]; l];
    for t in 1..l {
        let mut next = [0.0; N_LABELS];
        for k in 0..N_LABELS {
            let mut best = (f64::NEG_INFINITY, 0);
            for j in 0..N_LABELS {
                let v = delta[j] + trans.get(j, k);
                if v > best.0 {
                    best = (v, j);
                }
            }
            next[k] = best.0 + em[t][k];
            back[t][k] = best.1;
        }
        delta = next;
    }
    let mut last = 0;
    for k in 1..N_LABELS {
        if delta[k] > delta[last] {
            last = k;
        }
    }
    let mut path = alloc::vec![last; l];
    for t in (1..l).rev() {
        path[t - 1] = back[t][path[t]];
    }
    path
}

fn forward(em: &[[f64; N_LABELS]], trans: &Tensor) -> Result<Vec<[f64; N_LABELS]>, NumError> {
    let mut alpha = alloc::vec![em[0]];
    for t in 1..em.len() {
        let prev = alpha[t - 1];
        let mut a = [0.0; N_LABELS];
        for k in 0..N_LABELS {
            let terms: Vec<f64> = (0..N_LABELS).map(|j| prev[j] + trans.get(j, k)).collect();
            a[k] = em[t][k] + logsumexp(&terms)?;
        }
        alpha.push(a);
    }
    Ok(alpha)
}

/// Log of the sum of `exp(path_score)` over every label path.
pub fn log_partition(em: &[[f64; N_LABELS]], trans: &Tensor) -> Result<f64, NumError> {
    if em.is_empty() {
        return Err(NumError::Empty);
    }
    let alpha = forward(em, trans)?;
    logsumexp(&alpha[em.len() - 1])
}

/// Negative log-likelihood of `gold` with gradients for emissions and transitions.
pub fn crf_nll_grad(
    em: &[[f64; N_LABELS]],
    trans: &Tensor,
    gold: &[usize],
    dtrans: &mut Tensor,
) -> Result<(f64, Vec<[f64; N_LABELS]>), NumError> {
    let l = em.len();
    if l == 0 {
        return Err(NumError::Empty);
    }
    let alpha = forward(em, trans)?;
    let log_z = logsumexp(&alpha[l - 1])?;
    let mut beta = alloc::vec![[0.0; N_LABELS]; l];
    for t in (0..l - 1).rev() {
        for j in 0..N_LABELS {
            let terms: Vec<f64> = (0..N_LABELS)
                .map(|k| trans.get(j, k) + em[t + 1][k] + beta[t + 1][k])
                .collect();
            beta[t][j] = logsumexp(&terms)?;
        }
    }
    let mut dem = alloc::vec![[0.0; N_LABELS]; l];
    for t in 0..l {
        for k in 0..N_LABELS {
            dem[t][k] = libm::exp(alpha[t][k] + beta[t][k] - log_z);
        }
        dem[t][gold[t]] -= 1.0;
        if t > 0 {
            for j in 0..N_LABELS {
                for k in 0..N_LABELS {
                    let p = libm::exp(
                        alpha[t - 1][j] + trans.get(j, k) + em[t][k] + beta[t][k] - log_z,
                    );
                    dtrans.data_mut()[j * N_LABELS + k] += p;
                }
            }
            dtrans.data_mut()[gold[t - 1] * N_LABELS + gold[t]] -= 1.0;
        }
    }
    Ok((log_z - path_score(em, trans, gold), dem))
}

/// Indices into the labeler's parameter list.
mod slot {
    pub const EMB: usize = 0;
    /// Forward LSTM: W, U, b; the backward one follows at `+ 3`.
    pub const FWD: usize = 1;
    pub const BWD: usize = 4;
    pub const OUT_W: usize = 7;
    pub const OUT_B: usize = 8;
    pub const TRANS: usize = 9;
}

/// Per-step LSTM state kept for backpropagation.
struct LstmStep {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

fn lstm_run(params: &[Tensor], base: usize, xs: &[Vec<f64>]) -> Vec<LstmStep> {
    let (w, u, b) = (&params[base], &params[base + 1], &params[base + 2]);
    let hd = u.rows();
    let mut h = alloc::vec![0.0; hd];
    let mut c = alloc::vec![0.0; hd];
    let mut out = Vec::with_capacity(xs.len());
    for x in xs {
        let mut z = b.data().to_vec();
        w.vec_mat_acc(x, &mut z);
        u.vec_mat_acc(&h, &mut z);
        let mut gates = alloc::vec![0.0; 4 * hd];
        let mut c_new = alloc::vec![0.0; hd];
        for k in 0..hd {
            let i = sigmoid(z[k]);
            let f = sigmoid(z[hd + k]);
            let o = sigmoid(z[2 * hd + k]);
            let g = tanh(z[3 * hd + k]);
            gates[k] = i;
            gates[hd + k] = f;
            gates[2 * hd + k] = o;
            gates[3 * hd + k] = g;
            c_new[k] = f * c[k] + i * g;
        }
        let tanh_c: Vec<f64> = c_new.iter().map(|&v| tanh(v)).collect();
        let h_new: Vec<f64> = (0..hd).map(|k| gates[2 * hd + k] * tanh_c[k]).collect();
        out.push(LstmStep {
            x: x.clone(),
            h_prev: h,
            c_prev: c,
            gates,
            tanh_c,
            h: h_new.clone(),
        });
        h = h_new;
        c = c_new;
    }
    out
}

/// Backpropagation through time; returns the gradient for each input vector.
fn lstm_back(
    params: &[Tensor],
    base: usize,
    steps: &[LstmStep],
    dh_out: &[Vec<f64>],
    grads: &mut [Tensor],
) -> Vec<Vec<f64>> {
    let (w, u) = (&params[base], &params[base + 1]);
    let hd = u.rows();
    let mut dh_rec = alloc::vec![0.0; hd];
    let mut dc_rec = alloc::vec![0.0; hd];
    let mut dxs = alloc::vec![alloc::vec![0.0; w.rows()]; steps.len()];
    for t in (0..steps.len()).rev() {
        let s = &steps[t];
        let mut dz = alloc::vec![0.0; 4 * hd];
        for k in 0..hd {
            let (i, f, o, g) = (
                s.gates[k],
                s.gates[hd + k],
                s.gates[2 * hd + k],
                s.gates[3 * hd + k],
            );
            let dh = dh_out[t][k] + dh_rec[k];
            let tc = s.tanh_c[k];
            let dc = dh * o * (1.0 - tc * tc) + dc_rec[k];
            dz[k] = dc * g * i * (1.0 - i);
            dz[hd + k] = dc * s.c_prev[k] * f * (1.0 - f);
            dz[2 * hd + k] = dh * tc * o * (1.0 - o);
            dz[3 * hd + k] = dc * i * (1.0 - g * g);
            dc_rec[k] = dc * f;
        }
        grads[base].outer_acc(&s.x, &dz);
        grads[base + 1].outer_acc(&s.h_prev, &dz);
        for (gb, d) in grads[base + 2].data_mut().iter_mut().zip(&dz) {
            *gb += d;
        }
        w.mat_vec_acc(&dz, &mut dxs[t]);
        dh_rec.fill(0.0);
        u.mat_vec_acc(&dz, &mut dh_rec);
    }
    dxs
}

struct Encoded {
    fwd: Vec<LstmStep>,
    bwd: Vec<LstmStep>,
    em: Vec<[f64; N_LABELS]>,
}

fn encode(params: &[Tensor], feats: &[usize]) -> Encoded {
    let xs: Vec<Vec<f64>> = feats
        .iter()
        .map(|&f| params[slot::EMB].row(f).to_vec())
        .collect();
    let fwd = lstm_run(params, slot::FWD, &xs);
    let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
    let bwd = lstm_run(params, slot::BWD, &rev);
    let l = feats.len();
    let em = (0..l)
        .map(|t| {
            let mut hcat = fwd[t].h.clone();
            hcat.extend_from_slice(&bwd[l - 1 - t].h);
            let mut e = params[slot::OUT_B].data().to_vec();
            params[slot::OUT_W].vec_mat_acc(&hcat, &mut e);
            [e[0], e[1], e[2], e[3], e[4]]
        })
        .collect();
    Encoded { fwd, bwd, em }
}

/// Per-sequence negative log-likelihood; adds the gradient into `grads`.
pub fn labeler_loss_grad(
    params: &[Tensor],
    feats: &[usize],
    gold: &[usize],
    grads: &mut [Tensor],
) -> f64 {
    let enc = encode(params, feats);
    let l = feats.len();
    let Ok((nll, dem)) = crf_nll_grad(&enc.em, &params[slot::TRANS], gold, &mut grads[slot::TRANS])
    else {
        return f64::NAN;
    };
    let hd = params[slot::FWD + 1].rows();
    let mut dh_f = alloc::vec![alloc::vec![0.0; hd]; l];
    let mut dh_b = alloc::vec![alloc::vec![0.0; hd]; l];
    for t in 0..l {
        let mut hcat = enc.fwd[t].h.clone();
        hcat.extend_from_slice(&enc.bwd[l - 1 - t].h);
        grads[slot::OUT_W].outer_acc(&hcat, &dem[t]);
        for (gb, d) in grads[slot::OUT_B].data_mut().iter_mut().zip(&dem[t]) {
            *gb += d;
        }
        let mut dh = alloc::vec![0.0; 2 * hd];
        params[slot::OUT_W].mat_vec_acc(&dem[t], &mut dh);
        dh_f[t].copy_from_slice(&dh[..hd]);
        dh_b[l - 1 - t].copy_from_slice(&dh[hd..]);
    }
    let dx_f = lstm_back(params, slot::FWD, &enc.fwd, &dh_f, grads);
    let dx_b = lstm_back(params, slot::BWD, &enc.bwd, &dh_b, grads);
    for t in 0..l {
        let row = grads[slot::EMB].row_mut(feats[t]);
        for k in 0..row.len() {
            row[k] += dx_f[t][k] + dx_b[l - 1 - t][k];
        }
    }
    nll
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrfLabeler {
    pub vocab: Vec<String>,
    pub dim: usize,
    pub hidden: usize,
    /// `[embedding, W/U/b forward, W/U/b backward, emission W, emission b, transitions]`.
    pub params: Vec<Tensor>,
}

pub const UNK: &str = "<unk>";

impl CrfLabeler {
    pub fn new<'a, I>(labels: I, dim: usize, hidden: usize, seed: u64) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut vocab: Vec<String> = alloc::vec![UNK.to_string(), PLH.to_string()];
        let mut rest: Vec<&str> = labels.into_iter().collect();
        rest.sort_unstable();
        rest.dedup();
        for l in rest {
            if !vocab.iter().any(|v| v == l) {
                vocab.push(l.to_string());
            }
        }
        let mut rng = seeded_rng(seed);
        let mut params = alloc::vec![Tensor::uniform(vocab.len(), dim, 0.5, &mut rng)];
        for _ in 0..2 {
            params.push(Tensor::glorot(dim, 4 * hidden, &mut rng));
            params.push(Tensor::glorot(hidden, 4 * hidden, &mut rng));
            let mut b = Tensor::zeros(1, 4 * hidden);
            // open forget gates at the start
            for k in hidden..2 * hidden {
                b.set(0, k, 1.0);
            }
            params.push(b);
        }
        params.push(Tensor::glorot(2 * hidden, N_LABELS, &mut rng));
        params.push(Tensor::zeros(1, N_LABELS));
        params.push(Tensor::uniform(N_LABELS, N_LABELS, 0.1, &mut rng));
        CrfLabeler {
            vocab,
            dim,
            hidden,
            params,
        }
    }

    pub fn feature(&self, syn: &str) -> usize {
        self.vocab.iter().position(|v| v == syn).unwrap_or(0)
    }

    pub fn features<S: AsRef<str>>(&self, syns: &[S]) -> Vec<usize> {
        syns.iter().map(|s| self.feature(s.as_ref())).collect()
    }

    pub fn transitions(&self) -> &Tensor {
        &self.params[slot::TRANS]
    }

    pub fn emissions<S: AsRef<str>>(&self, syns: &[S]) -> Vec<[f64; N_LABELS]> {
        encode(&self.params, &self.features(syns)).em
    }

    pub fn label_sequence<S: AsRef<str>>(&self, syns: &[S]) -> Result<Vec<Loc>, LocateError> {
        if syns.is_empty() {
            return Err(LocateError::EmptySequence);
        }
        let em = self.emissions(syns);
        Ok(viterbi(&em, self.transitions())
            .into_iter()
            .map(Loc::from_index)
            .collect())
    }

    pub fn log_likelihood<S: AsRef<str>>(
        &self,
        syns: &[S],
        gold: &[Loc],
    ) -> Result<f64, LocateError> {
        if syns.is_empty() {
            return Err(LocateError::EmptySequence);
        }
        if syns.len() != gold.len() {
            return Err(LocateError::LengthMismatch {
                labels: gold.len(),
                inputs: syns.len(),
            });
        }
        let em = self.emissions(syns);
        let path: Vec<usize> = gold.iter().map(|l| l.index()).collect();
        Ok(path_score(&em, self.transitions(), &path) - log_partition(&em, self.transitions())?)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }
}

/// One training sequence: syntax symbols and their gold roles.
pub type LabelPair = (Vec<String>, Vec<Loc>);

/// Syntax-symbol/role sequences of every fact in a gold tree. Facts whose items
/// lack gold roles are skipped.
pub fn label_pairs(tree: &NlFactTree) -> Vec<LabelPair> {
    fn walk(f: &NlFact, out: &mut Vec<LabelPair>) {
        let locs: Option<Vec<Loc>> = f.items.iter().map(|i| i.loc).collect();
        if let Some(locs) = locs {
            out.push((f.items.iter().map(|i| i.syn.clone()).collect(), locs));
        }
        for c in &f.children {
            walk(c, out);
        }
    }
    let mut out = Vec::new();
    walk(&tree.root, &mut out);
    out
}

/// (phrase, relation name) pairs read off aligned gold trees: the predicate
/// span of each fact against its relation, and the i-th attribute span against
/// the i-th attribute. Facts without gold roles or with a different shape
/// contribute nothing.
pub fn relation_observations(
    nl: &NlFactTree,
    gold: &KgFactTree,
    kg: &KnowledgeGraph,
) -> Vec<(String, String)> {
    fn walk(f: &NlFact, g: &KgFactNode, kg: &KnowledgeGraph, out: &mut Vec<(String, String)>) {
        let labels: Option<Vec<Loc>> = f.items.iter().map(|i| i.loc).collect();
        if let Some(sp) = labels.and_then(|l| spans(f, &l).ok()) {
            for s in sp.iter().filter(|s| s.loc == Loc::P) {
                out.push((s.text.clone(), kg.relation_name(g.fact.p).to_string()));
            }
            for (s, (a, _)) in sp.iter().filter(|s| s.loc == Loc::A).zip(&g.fact.attrs) {
                out.push((s.text.clone(), kg.relation_name(*a).to_string()));
            }
        }
        for (c, d) in f.children.iter().zip(&g.children) {
            walk(c, d, kg, out);
        }
    }
    let mut out = Vec::new();
    walk(&nl.root, &gold.root, kg, &mut out);
    out
}

#[derive(Debug, Clone)]
pub struct LabelerTraining {
    pub model: CrfLabeler,
    pub log: TrainLog,
}

/// Share of sequences decoded exactly right.
pub fn sequence_accuracy(m: &CrfLabeler, pairs: &[LabelPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs
        .iter()
        .filter(|(x, y)| m.label_sequence(x).is_ok_and(|p| &p == y))
        .count();
    hits as f64 / pairs.len() as f64
}

/// Maximum-likelihood training with best-validation selection on exact
/// sequence accuracy.
pub fn train_labeler(
    pairs: &[LabelPair],
    hidden: usize,
    cfg: &TrainConfig,
) -> Result<LabelerTraining, LocateError> {
    if pairs.is_empty() {
        return Err(LocateError::EmptySequence);
    }
    for (x, y) in pairs {
        if x.is_empty() {
            return Err(LocateError::EmptySequence);
        }
        if x.len() != y.len() {
            return Err(LocateError::LengthMismatch {
                labels: y.len(),
                inputs: x.len(),
            });
        }
    }
    let (tr, va) = holdout(pairs.len(), cfg.valid_fraction, cfg.seed);
    let symbols = tr
        .iter()
        .flat_map(|&i| pairs[i].0.iter().map(String::as_str));
    let mut model = CrfLabeler::new(symbols, cfg.dim, hidden, cfg.seed);
    type Sample = (Vec<usize>, Vec<usize>);
    let enc = |idx: &[usize]| -> Vec<Sample> {
        idx.iter()
            .map(|&i| {
                let (x, y) = &pairs[i];
                (model.features(x), y.iter().map(|l| l.index()).collect())
            })
            .collect()
    };
    let train = enc(&tr);
    let valid = enc(&va);
    let mut params = model.params.clone();
    let log = fit(
        &mut params,
        &train,
        &valid,
        cfg,
        |p, (x, y), g| labeler_loss_grad(p, x, y, g),
        |p, vs| {
            let hits = vs
                .iter()
                .filter(|(x, y)| &viterbi(&encode(p, x).em, &p[slot::TRANS]) == y)
                .count();
            hits as f64 / vs.len() as f64
        },
    )?;
    model.params = params;
    Ok(LabelerTraining { model, log })
}

/// Name-to-vector table in a shared space for relations and question phrases.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub rows: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, v: Vec<f64>) -> Result<(), LocateError> {
        if v.len() != self.dim {
            return Err(LocateError::Table(alloc::format!(
                "row `{name}` has {} values, expected {}",
                v.len(),
                self.dim
            )));
        }
        if self.rows.contains_key(name) {
            return Err(LocateError::Table(alloc::format!("duplicate row `{name}`")));
        }
        self.rows.insert(name.to_string(), v);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.rows.get(name).map(Vec::as_slice)
    }
}

/// Lower-cased, whitespace-normalised form used as a table key.
pub fn normalize_phrase(s: &str) -> String {
    let words: Vec<String> = s.split_whitespace().map(|w| w.to_lowercase()).collect();
    words.join(" ")
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        (dot(a, b) / d).clamp(-1.0, 1.0)
    }
}

/// Scores relation names against phrases with cosine similarity.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelationMatcher {
    pub table: EmbeddingTable,
}

impl RelationMatcher {
    pub fn new(table: EmbeddingTable) -> Self {
        RelationMatcher { table }
    }

    /// Vector of a phrase: its own row if present, otherwise the mean of the
    /// rows of its known tokens.
    pub fn embed(&self, phrase: &str) -> Result<Vec<f64>, LocateError> {
        let key = normalize_phrase(phrase);
        if let Some(v) = self.table.get(&key) {
            return Ok(v.to_vec());
        }
        let mut acc = alloc::vec![0.0; self.table.dim];
        let mut n = 0;
        for w in key.split([' ', '_']) {
            if let Some(v) = self.table.get(w) {
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += x;
                }
                n += 1;
            }
        }
        if n == 0 || norm(&acc) == 0.0 {
            return Err(LocateError::UnknownPhrase(phrase.to_string()));
        }
        Ok(acc.into_iter().map(|x| x / n as f64).collect())
    }

    /// Best-scoring candidate for `phrase`; ties go to the smaller name.
    /// Candidates that cannot be embedded are ignored.
    pub fn match_relation<'a, I>(
        &self,
        phrase: &str,
        candidates: I,
    ) -> Result<(RelationId, f64), LocateError>
    where
        I: IntoIterator<Item = (RelationId, &'a str)>,
    {
        let w = self.embed(phrase)?;
        self.best(&w, candidates)
    }

    pub fn best<'a, I>(&self, w: &[f64], candidates: I) -> Result<(RelationId, f64), LocateError>
    where
        I: IntoIterator<Item = (RelationId, &'a str)>,
    {
        let mut best: Option<(f64, &str, RelationId)> = None;
        for (id, name) in candidates {
            let Ok(r) = self.embed(name) else { continue };
            let s = cosine(&r, w);
            let better = match best {
                None => true,
                Some((bs, bn, _)) => s > bs || (s == bs && name < bn),
            };
            if better {
                best = Some((s, name, id));
            }
        }
        best.map(|(s, _, id)| (id, s))
            .ok_or(LocateError::NoCandidates)
    }

    /// Builds a table from (phrase, relation) observations: each relation gets
    /// a seeded random unit vector, each phrase and each of its tokens the
    /// count-weighted, normalised mix of the relations it was seen with. A key
    /// seen as a whole phrase ignores what its token occurrences say.
    pub fn fit<'a, I>(relations: &[&str], observations: I, dim: usize, seed: u64) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut rng = seeded_rng(seed);
        let mut names: Vec<&str> = relations.to_vec();
        names.sort_unstable();
        names.dedup();
        let mut table = EmbeddingTable::new(dim);
        for r in &names {
            let mut v = Tensor::uniform(1, dim, 1.0, &mut rng).data().to_vec();
            let n = norm(&v);
            v.iter_mut().for_each(|x| *x /= n);
            table.rows.insert(r.to_string(), v);
        }
        // whole-phrase observations take precedence over token co-occurrence
        let mut phrases: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        let mut tokens: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for (phrase, rel) in observations {
            let key = normalize_phrase(phrase);
            if key.is_empty() || !table.rows.contains_key(rel) {
                continue;
            }
            for w in key.split(' ') {
                *tokens
                    .entry(w.to_string())
                    .or_default()
                    .entry(rel.to_string())
                    .or_default() += 1.0;
            }
            *phrases
                .entry(key)
                .or_default()
                .entry(rel.to_string())
                .or_default() += 1.0;
        }
        let mut counts = tokens;
        counts.extend(phrases);
        for (k, per_rel) in counts {
            if table.rows.contains_key(&k) {
                continue;
            }
            let mut v = alloc::vec![0.0; dim];
            for (r, c) in per_rel {
                for (a, x) in v.iter_mut().zip(&table.rows[&r]) {
                    *a += c * x;
                }
            }
            let n = norm(&v);
            if n > 0.0 {
                v.iter_mut().for_each(|x| *x /= n);
                table.rows.insert(k, v);
            }
        }
        RelationMatcher { table }
    }
}

/// Mention text → entity, as provided with each question.
pub type Links = BTreeMap<String, EntityId>;

struct Span {
    loc: Loc,
    text: String,
    placeholder: Option<Term>,
}

fn item_term(kind: &ItemKind) -> Option<Term> {
    match kind {
        ItemKind::Token(_) => None,
        ItemKind::Answer => Some(Term::Answer),
        ItemKind::Child(i) => Some(Term::Child(*i)),
    }
}

fn spans(fact: &NlFact, labels: &[Loc]) -> Result<Vec<Span>, LocateError> {
    let mut out: Vec<Span> = Vec::new();
    for (item, &loc) in fact.items.iter().zip(labels) {
        let ph = item_term(&item.kind);
        let tok = match &item.kind {
            ItemKind::Token(t) => Some(t.as_str()),
            _ => None,
        };
        match out.last_mut() {
            Some(s) if s.loc == loc => {
                if let Some(t) = tok {
                    if !s.text.is_empty() {
                        s.text.push(' ');
                    }
                    s.text.push_str(t);
                }
                if ph.is_some() {
                    if s.placeholder.is_some() {
                        return Err(LocateError::CrowdedSpan(fact.surface()));
                    }
                    s.placeholder = ph;
                }
            }
            _ => out.push(Span {
                loc,
                text: tok.unwrap_or("").to_string(),
                placeholder: ph,
            }),
        }
    }
    Ok(out)
}

/// Everything needed to ground NL facts.
pub struct Grounding<'a> {
    pub kg: &'a KnowledgeGraph,
    pub matcher: &'a RelationMatcher,
    pub links: &'a Links,
}

impl Grounding<'_> {
    fn entity(&self, text: &str) -> Option<EntityId> {
        self.links
            .get(text)
            .copied()
            .or_else(|| self.kg.entity_id(text))
    }

    fn relation<'b>(
        &self,
        phrase: &str,
        pool: impl Iterator<Item = &'b RelationId>,
    ) -> Result<RelationId, LocateError> {
        let cands: Vec<(RelationId, &str)> = pool.map(|&r| (r, self.kg.relation_name(r))).collect();
        self.matcher.match_relation(phrase, cands).map(|(r, _)| r)
    }

    /// Grounds one fact from its role labels. Unlinkable subject, object or
    /// value spans of a non-root fact become that fact's output slot.
    pub fn locate_fact(
        &self,
        fact: &NlFact,
        labels: &[Loc],
        is_root: bool,
    ) -> Result<KgFact, LocateError> {
        if labels.len() != fact.items.len() {
            return Err(LocateError::LengthMismatch {
                labels: labels.len(),
                inputs: fact.items.len(),
            });
        }
        let spans = spans(fact, labels)?;
        let surface = || fact.surface();
        let mut has_out = false;
        let mut resolve = |s: &Span| -> Result<Term, LocateError> {
            if let Some(t) = s.placeholder {
                return Ok(t);
            }
            if let Some(e) = self.entity(&s.text) {
                return Ok(Term::Entity(e));
            }
            if !is_root && !has_out {
                has_out = true;
                return Ok(Term::Out);
            }
            Err(LocateError::Unlinkable(s.text.clone()))
        };
        let single = |role: Loc| -> Result<&Span, LocateError> {
            let mut it = spans.iter().filter(|s| s.loc == role);
            let first = it.next().ok_or(LocateError::MissingRole {
                fact: surface(),
                role,
            })?;
            if it.next().is_some() {
                return Err(LocateError::DuplicateRole {
                    fact: surface(),
                    role,
                });
            }
            Ok(first)
        };
        let preds: Vec<&Span> = spans.iter().filter(|s| s.loc == Loc::P).collect();
        let p_span = match preds.len() {
            0 => return Err(LocateError::NoPredicate(surface())),
            1 => preds[0],
            _ => return Err(LocateError::MultiplePredicates(surface())),
        };
        if p_span.placeholder.is_some()
            || spans
                .iter()
                .any(|s| s.loc == Loc::A && s.placeholder.is_some())
        {
            return Err(LocateError::PlaceholderRelation(surface()));
        }
        let s = resolve(single(Loc::S)?)?;
        let o = resolve(single(Loc::O)?)?;
        let p = self.relation(&p_span.text, self.kg.predicates().iter())?;
        let a_spans: Vec<&Span> = spans.iter().filter(|s| s.loc == Loc::A).collect();
        let v_spans: Vec<&Span> = spans.iter().filter(|s| s.loc == Loc::V).collect();
        if a_spans.len() != v_spans.len() {
            return Err(LocateError::UnpairedAttributes(surface()));
        }
        let mut attrs = Vec::new();
        for (a, v) in a_spans.into_iter().zip(v_spans) {
            let rel = self.relation(&a.text, self.kg.attributes().iter())?;
            attrs.push((rel, resolve(v)?));
        }
        Ok(KgFact { s, p, o, attrs })
    }

    /// Grounds a whole tree with a labelling function, then applies the copy
    /// rule: a child left without an output slot inherits the attribute under
    /// which its parent binds it.
    pub fn locate_tree_with<F>(
        &self,
        nlt: &NlFactTree,
        mut label: F,
    ) -> Result<KgFactTree, LocateError>
    where
        F: FnMut(&NlFact) -> Result<Vec<Loc>, LocateError>,
    {
        fn go<F>(
            g: &Grounding<'_>,
            f: &NlFact,
            is_root: bool,
            label: &mut F,
        ) -> Result<KgFactNode, LocateError>
        where
            F: FnMut(&NlFact) -> Result<Vec<Loc>, LocateError>,
        {
            let labels = label(f)?;
            let fact = g.locate_fact(f, &labels, is_root)?;
            let mut children = Vec::with_capacity(f.children.len());
            for (i, c) in f.children.iter().enumerate() {
                let mut node = go(g, c, false, label)?;
                if node.fact.find(Term::Out).is_none() {
                    let pos = fact
                        .find(Term::Child(i))
                        .ok_or(LocateError::UnboundChild(i))?;
                    match pos {
                        Position::Value(j) => node.fact.attrs.push((fact.attrs[j].0, Term::Out)),
                        _ => return Err(LocateError::NotCopyable(c.surface())),
                    }
                }
                children.push(node);
            }
            if let Some(i) = (0..children.len()).find(|&i| fact.find(Term::Child(i)).is_none()) {
                return Err(LocateError::UnboundChild(i));
            }
            Ok(KgFactNode {
                fact,
                children,
                gold: None,
            })
        }
        Ok(KgFactTree {
            root: go(self, &nlt.root, true, &mut label)?,
        })
    }

    pub fn locate_tree(
        &self,
        nlt: &NlFactTree,
        labeler: &CrfLabeler,
    ) -> Result<KgFactTree, LocateError> {
        self.locate_tree_with(nlt, |f| {
            let syns: Vec<&str> = f.items.iter().map(|i| i.syn.as_str()).collect();
            labeler.label_sequence(&syns)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{FactRecord, KgBuilder};
    use crate::numkit::grad_check;
    use crate::tree::NlItem;
    use alloc::vec;
    use proptest::prelude::*;

    fn enumerate_paths(l: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..l {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..N_LABELS).map(move |k| {
                        let mut q = p.clone();
                        q.push(k);
                        q
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn uniform_scores_give_uniform_likelihood() {
        let em = vec![[0.0; N_LABELS]; 2];
        let t = Tensor::zeros(N_LABELS, N_LABELS);
        let ll = path_score(&em, &t, &[0, 3]) - log_partition(&em, &t).unwrap();
        assert!((ll + 2.0 * libm::log(5.0)).abs() < 1e-12);
    }

    #[test]
    fn single_position_takes_best_emission() {
        let em = vec![[0.1, 0.7, -0.2, 0.69, 0.0]];
        let mut t = Tensor::zeros(N_LABELS, N_LABELS);
        t.fill(9.0);
        assert_eq!(viterbi(&em, &t), vec![1]);
    }

    #[test]
    fn labeler_gradient_matches_finite_differences() {
        for seed in 0..4u64 {
            let m = CrfLabeler::new(["NP", "VBD", "IN"], 4, 3, seed);
            let feats = vec![2, 1, 3, 4, 2][..(2 + seed as usize)].to_vec();
            let gold: Vec<usize> = feats
                .iter()
                .map(|f| (f + seed as usize) % N_LABELS)
                .collect();
            let mut g: Vec<Tensor> = m.params.iter().map(Tensor::zeros_like).collect();
            labeler_loss_grad(&m.params, &feats, &gold, &mut g);
            let err = grad_check(
                |p| {
                    let mut s: Vec<Tensor> = p.iter().map(Tensor::zeros_like).collect();
                    labeler_loss_grad(p, &feats, &gold, &mut s)
                },
                &m.params,
                &g,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn labeler_rejects_empty_and_mismatched_input() {
        let m = CrfLabeler::new(["NP"], 4, 2, 0);
        let empty: [&str; 0] = [];
        assert_eq!(m.label_sequence(&empty), Err(LocateError::EmptySequence));
        assert!(m.log_likelihood(&["NP"], &[Loc::S, Loc::P]).is_err());
    }

    #[test]
    fn labeler_learns_structure_matching() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let pairs: Vec<LabelPair> = vec![
            (s(&["NP", "VBD", "NP"]), vec![Loc::S, Loc::P, Loc::O]),
            (
                s(&["PLH", "VBD", "PLH", "IN", "NP", "PLH"]),
                vec![Loc::S, Loc::P, Loc::O, Loc::A, Loc::A, Loc::V],
            ),
            (s(&["NP", "IN", "NP"]), vec![Loc::S, Loc::P, Loc::O]),
        ];
        let cfg = TrainConfig {
            lr: 0.02,
            epochs: 80,
            batch_size: 3,
            seed: 4,
            dim: 8,
            valid_fraction: 0.0,
        };
        let out = train_labeler(&pairs, 8, &cfg).unwrap();
        assert_eq!(sequence_accuracy(&out.model, &pairs), 1.0);
        assert_eq!(
            out.model.label_sequence(&["NP", "VBD", "NP"]).unwrap(),
            vec![Loc::S, Loc::P, Loc::O]
        );
    }

    fn matcher() -> RelationMatcher {
        let mut t = EmbeddingTable::new(3);
        t.insert("win", vec![1.0, 0.0, 0.0]).unwrap();
        t.insert("join", vec![0.0, 1.0, 0.0]).unwrap();
        t.insert("sibling", vec![0.0, 0.0, 1.0]).unwrap();
        t.insert("time", vec![0.5, 0.5, 0.0]).unwrap();
        t.insert("won", vec![0.9, 0.1, 0.0]).unwrap();
        t.insert("year", vec![0.4, 0.4, 0.1]).unwrap();
        RelationMatcher::new(t)
    }

    fn ids<'a>(names: &'a [&'a str]) -> Vec<(RelationId, &'a str)> {
        names
            .iter()
            .enumerate()
            .map(|(i, n)| (RelationId(i as u32), *n))
            .collect()
    }

    #[test]
    fn relation_matching_examples() {
        let m = matcher();
        let cands = ["win", "join", "sibling"];
        let (r, s) = m.match_relation("join", ids(&cands)).unwrap();
        assert_eq!((r, s), (RelationId(1), 1.0));
        assert_eq!(
            m.match_relation("won", ids(&cands)).unwrap().0,
            RelationId(0)
        );
        // mean-of-tokens fallback
        assert_eq!(
            m.match_relation("in the year", ids(&["time", "sibling"]))
                .unwrap()
                .0,
            RelationId(0)
        );
        assert!(matches!(
            m.match_relation("zzz", ids(&cands)),
            Err(LocateError::UnknownPhrase(_))
        ));
        assert!(matches!(
            m.match_relation("won", Vec::new()),
            Err(LocateError::NoCandidates)
        ));
    }

    #[test]
    fn relation_ties_prefer_smaller_name() {
        let mut t = EmbeddingTable::new(2);
        t.insert("b", vec![1.0, 0.0]).unwrap();
        t.insert("a", vec![2.0, 0.0]).unwrap();
        let m = RelationMatcher::new(t);
        let (r, _) = m
            .best(
                &[1.0, 0.0],
                vec![(RelationId(0), "b"), (RelationId(1), "a")],
            )
            .unwrap();
        assert_eq!(r, RelationId(1));
    }

    #[test]
    fn duplicate_table_rows_rejected() {
        let mut t = EmbeddingTable::new(1);
        t.insert("x", vec![1.0]).unwrap();
        assert!(t.insert("x", vec![2.0]).is_err());
        assert!(t.insert("y", vec![2.0, 1.0]).is_err());
    }

    #[test]
    fn fitted_matcher_separates_relations() {
        let rels = ["win", "join", "sibling", "time"];
        let obs = [
            ("won", "win"),
            ("won", "win"),
            ("joined", "join"),
            ("is the sibling of", "sibling"),
            ("in the year", "time"),
        ];
        let m = RelationMatcher::fit(&rels, obs, 16, 1);
        let preds = ["win", "join", "sibling"];
        assert_eq!(
            m.match_relation("won", ids(&preds)).unwrap().0,
            RelationId(0)
        );
        assert_eq!(
            m.match_relation("joined", ids(&preds)).unwrap().0,
            RelationId(1)
        );
        assert_eq!(
            m.match_relation("the sibling", ids(&preds)).unwrap().0,
            RelationId(2)
        );
    }

    fn figure_kg() -> KnowledgeGraph {
        let mut b = KgBuilder::new();
        let rec = |s: &str, p: &str, o: &str, attrs: &[(&str, &str)]| FactRecord {
            s: s.into(),
            p: p.into(),
            o: o.into(),
            attrs: attrs
                .iter()
                .map(|(a, v)| (a.to_string(), v.to_string()))
                .collect(),
        };
        b.add_record(&rec(
            "LeBron James",
            "join",
            "Los Angeles Lakers",
            &[("time", "2018")],
        ))
        .unwrap();
        b.add_record(&rec(
            "Golden State Warriors",
            "win",
            "NBA championship",
            &[("time", "2018")],
        ))
        .unwrap();
        b.add_record(&rec("Los Angeles Lakers", "located_in", "Los Angeles", &[]))
            .unwrap();
        b.add_record(&rec("Ann", "sibling", "Bob", &[])).unwrap();
        b.build()
    }

    fn tok(w: &str, syn: &str, loc: Loc) -> NlItem {
        NlItem::token(w, syn).with_loc(loc)
    }

    fn ph(k: ItemKind, loc: Loc) -> NlItem {
        NlItem::placeholder(k).with_loc(loc)
    }

    fn figure_tree() -> NlFactTree {
        let team = NlFact {
            items: vec![
                tok("an NBA team", "NP", Loc::S),
                tok("in", "IN", Loc::P),
                tok("Los Angeles", "NP", Loc::O),
            ],
            children: vec![],
        };
        let champ = NlFact {
            items: vec![
                tok("the Warriors", "NP", Loc::S),
                tok("won", "VBD", Loc::P),
                tok("the NBA championship", "NP", Loc::O),
            ],
            children: vec![],
        };
        NlFactTree {
            root: NlFact {
                items: vec![
                    ph(ItemKind::Answer, Loc::S),
                    tok("joined", "VBD", Loc::P),
                    ph(ItemKind::Child(0), Loc::O),
                    tok("in", "IN", Loc::A),
                    tok("the year", "NP", Loc::A),
                    ph(ItemKind::Child(1), Loc::V),
                ],
                children: vec![team, champ],
            },
        }
    }

    fn figure_matcher() -> RelationMatcher {
        let rels = ["win", "join", "located_in", "sibling", "time"];
        let obs = [
            ("won", "win"),
            ("joined", "join"),
            ("in", "located_in"),
            ("in the year", "time"),
        ];
        RelationMatcher::fit(&rels, obs, 16, 3)
    }

    fn gold_labels(f: &NlFact) -> Result<Vec<Loc>, LocateError> {
        Ok(f.items.iter().map(|i| i.loc.unwrap()).collect())
    }

    #[test]
    fn figure_tree_grounds_with_copy_rule() {
        let kg = figure_kg();
        let m = figure_matcher();
        let mut links = Links::new();
        links.insert(
            "the Warriors".into(),
            kg.entity_id("Golden State Warriors").unwrap(),
        );
        links.insert(
            "the NBA championship".into(),
            kg.entity_id("NBA championship").unwrap(),
        );
        let g = Grounding {
            kg: &kg,
            matcher: &m,
            links: &links,
        };
        let nlt = figure_tree();
        let t = g.locate_tree_with(&nlt, gold_labels).unwrap();
        assert!(t.well_formed());
        assert_eq!(t.root.fact.display(&kg), "(?ans, join, ?c0) time:?c1");
        assert_eq!(
            t.root.children[0].fact.display(&kg),
            "(?out, located_in, Los Angeles)"
        );
        assert_eq!(
            t.root.children[1].fact.display(&kg),
            "(Golden State Warriors, win, NBA championship) time:?out"
        );
        // one copied slot and one output slot beyond the NL placeholders
        assert_eq!(
            t.root.count_placeholders(),
            nlt.root.count_placeholders() + 2
        );
        assert_eq!(t.n_facts(), nlt.n_facts());
    }

    #[test]
    fn two_predicates_rejected() {
        let kg = figure_kg();
        let m = figure_matcher();
        let links = Links::new();
        let g = Grounding {
            kg: &kg,
            matcher: &m,
            links: &links,
        };
        let f = NlFact {
            items: vec![
                ph(ItemKind::Answer, Loc::S),
                tok("joined", "VBD", Loc::P),
                tok("x", "NP", Loc::O),
                tok("won", "VBD", Loc::P),
            ],
            children: vec![],
        };
        let labels = gold_labels(&f).unwrap();
        assert!(matches!(
            g.locate_fact(&f, &labels, true),
            Err(LocateError::MultiplePredicates(_))
        ));
    }

    #[test]
    fn unlinkable_root_span_is_an_error() {
        let kg = figure_kg();
        let m = figure_matcher();
        let links = Links::new();
        let g = Grounding {
            kg: &kg,
            matcher: &m,
            links: &links,
        };
        let f = NlFact {
            items: vec![
                ph(ItemKind::Answer, Loc::S),
                tok("joined", "VBD", Loc::P),
                tok("nobody", "NP", Loc::O),
            ],
            children: vec![],
        };
        let labels = gold_labels(&f).unwrap();
        assert_eq!(
            g.locate_fact(&f, &labels, true),
            Err(LocateError::Unlinkable("nobody".into()))
        );
    }

    #[test]
    fn child_bound_at_subject_without_slot_cannot_copy() {
        let kg = figure_kg();
        let m = figure_matcher();
        let links = Links::new();
        let g = Grounding {
            kg: &kg,
            matcher: &m,
            links: &links,
        };
        let child = NlFact {
            items: vec![
                tok("Ann", "NP", Loc::S),
                tok("sibling", "NN", Loc::P),
                tok("Bob", "NP", Loc::O),
            ],
            children: vec![],
        };
        let nlt = NlFactTree {
            root: NlFact {
                items: vec![
                    ph(ItemKind::Child(0), Loc::S),
                    tok("joined", "VBD", Loc::P),
                    ph(ItemKind::Answer, Loc::O),
                ],
                children: vec![child],
            },
        };
        assert!(matches!(
            g.locate_tree_with(&nlt, gold_labels),
            Err(LocateError::NotCopyable(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn viterbi_and_partition_match_enumeration(seed in 0u64..10_000, len in 1usize..=6) {
            let m = CrfLabeler::new(["NP", "VBD", "IN", "PLH"], 6, 4, seed);
            let mut rng = seeded_rng(seed);
            let syms = ["NP", "VBD", "IN", "PLH", "XX"];
            let noise = Tensor::uniform(1, len, 1.0, &mut rng);
            let x: Vec<&str> = noise.data().iter().map(|v| syms[((v + 1.0) * 2.499) as usize]).collect();
            let em = m.emissions(&x);
            let paths = enumerate_paths(len);
            let scores: Vec<f64> = paths.iter().map(|p| path_score(&em, m.transitions(), p)).collect();
            let mut best = 0;
            for i in 1..scores.len() {
                if scores[i] > scores[best] {
                    best = i;
                }
            }
            prop_assert_eq!(&viterbi(&em, m.transitions()), &paths[best]);
            let z = log_partition(&em, m.transitions()).unwrap();
            prop_assert!((z - logsumexp(&scores).unwrap()).abs() < 1e-8);
        }

        #[test]
        fn cosine_is_scale_invariant(a in prop::collection::vec(-3.0f64..3.0, 4), alpha in 0.01f64..100.0) {
            prop_assume!(norm(&a) > 1e-3);
            let mut t = EmbeddingTable::new(4);
            t.insert("r1", vec![1.0, 0.2, -0.3, 0.0]).unwrap();
            t.insert("r2", vec![-0.5, 1.0, 0.0, 0.7]).unwrap();
            let m = RelationMatcher::new(t);
            let cands = [(RelationId(0), "r1"), (RelationId(1), "r2")];
            let scaled: Vec<f64> = a.iter().map(|x| x * alpha).collect();
            let (r1, s1) = m.best(&a, cands).unwrap();
            let (r2, s2) = m.best(&scaled, cands).unwrap();
            prop_assert_eq!(r1, r2);
            prop_assert!((s1 - s2).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&s1));
        }
    }
}
