//! Fact-tree construction: GCN-guided node elimination over a syntax tree, then
//! grouping of the surviving structure into natural-language facts.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::numkit::{bce_with_logit, dot, seeded_rng, sigmoid, NumError, Tensor};
use crate::syntax::{NodeId, SyntaxTree};
use crate::train::{fit, holdout, TrainConfig, TrainLog};
use crate::tree::{ItemKind, NlFact, NlFactTree, NlItem};

/// Interrogative words that become the answer slot.
pub const WH_WORDS: &[&str] = &["who", "what", "when", "where", "which", "whom"];

pub fn is_wh_word(token: &str) -> bool {
    WH_WORDS.iter().any(|w| w.eq_ignore_ascii_case(token))
}

/// Which neighbours of the central node the classifier sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub enum ContextRange {
    #[serde(rename = "O")]
    O,
    #[serde(rename = "O+F")]
    OF,
    #[serde(rename = "O+C")]
    OC,
    #[default]
    #[serde(rename = "O+F+C")]
    OFC,
    #[serde(rename = "O+F+C+S")]
    OFCS,
}

impl ContextRange {
    pub const ALL: [ContextRange; 5] = [
        ContextRange::O,
        ContextRange::OF,
        ContextRange::OC,
        ContextRange::OFC,
        ContextRange::OFCS,
    ];

    fn father(self) -> bool {
        matches!(
            self,
            ContextRange::OF | ContextRange::OFC | ContextRange::OFCS
        )
    }

    fn children(self) -> bool {
        matches!(
            self,
            ContextRange::OC | ContextRange::OFC | ContextRange::OFCS
        )
    }

    fn siblings(self) -> bool {
        self == ContextRange::OFCS
    }
}

impl fmt::Display for ContextRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextRange::O => "O",
            ContextRange::OF => "O+F",
            ContextRange::OC => "O+C",
            ContextRange::OFC => "O+F+C",
            ContextRange::OFCS => "O+F+C+S",
        })
    }
}

impl FromStr for ContextRange {
    type Err = ConstructError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ContextRange::ALL
            .into_iter()
            .find(|r| r.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| ConstructError::BadRange(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConstructError {
    #[error("node {0} is not eligible for elimination ({1})")]
    NotEligible(NodeId, &'static str),
    #[error("unknown context range `{0}`")]
    BadRange(String),
    #[error("empty context")]
    EmptyContext,
    #[error("construction produced no facts")]
    NoFacts,
    #[error("no interrogative word found for the answer slot")]
    NoAnswer,
    #[error("answer slot ended up outside the root fact")]
    AnswerOutsideRoot,
    #[error("gold tree does not cover the question tokens: {0}")]
    GoldMismatch(String),
    #[error("no syntax node spans gold fact `{0}`")]
    NoSpanningNode(String),
    #[error("replayed eliminations do not reproduce the gold tree")]
    ReplayDiverged,
    #[error(transparent)]
    Num(#[from] NumError),
}

/// The central node plus its selected neighbours, as a small graph. Index 0 is
/// always the central node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EliminationContext {
    pub center: NodeId,
    pub nodes: Vec<NodeId>,
    /// Syntax label per node; leaves use [`TOK`].
    pub symbols: Vec<String>,
    pub edges: Vec<(usize, usize)>,
}

pub const UNK: &str = "<unk>";
pub const TOK: &str = "<tok>";

/// Internal, non-root, and not directly above a leaf.
pub fn is_eligible(t: &SyntaxTree, v: NodeId) -> bool {
    v != t.root() && !t.is_leaf(v) && !t.has_leaf_child(v) && t.is_attached(v)
}

/// Candidate nodes in elimination order: breadth-first order reversed, so
/// deeper levels go first and each level runs right to left.
pub fn visit_order(t: &SyntaxTree) -> Vec<NodeId> {
    let mut order: Vec<NodeId> = t.bfs().into_iter().filter(|&v| is_eligible(t, v)).collect();
    order.reverse();
    order
}

pub fn extract_context(
    t: &SyntaxTree,
    v: NodeId,
    range: ContextRange,
) -> Result<EliminationContext, ConstructError> {
    if v == t.root() {
        return Err(ConstructError::NotEligible(v, "root"));
    }
    if t.is_leaf(v) {
        return Err(ConstructError::NotEligible(v, "leaf"));
    }
    if t.has_leaf_child(v) {
        return Err(ConstructError::NotEligible(v, "parent of a leaf"));
    }
    let symbol = |n: NodeId| t.label(n).unwrap_or(TOK).to_string();
    let mut nodes = alloc::vec![v];
    let mut edges = Vec::new();
    let parent = t
        .parent(v)
        .ok_or(ConstructError::NotEligible(v, "detached"))?;
    if range.father() {
        nodes.push(parent);
        edges.push((0, 1));
    }
    if range.children() {
        for &c in t.children(v) {
            nodes.push(c);
            edges.push((0, nodes.len() - 1));
        }
    }
    if range.siblings() {
        for &s in t.children(parent) {
            if s != v {
                nodes.push(s);
                edges.push((1, nodes.len() - 1));
            }
        }
    }
    let symbols = nodes.iter().map(|&n| symbol(n)).collect();
    Ok(EliminationContext {
        center: v,
        nodes,
        symbols,
        edges,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Eliminate,
    Retain,
}

/// Context graph with vocabulary indices, ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedContext {
    pub feats: Vec<usize>,
    pub adj: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnClassifier {
    pub vocab: Vec<String>,
    pub dim: usize,
    pub layers: usize,
    /// `[embedding, (W0, W1) per layer, fc, bias]`.
    pub params: Vec<Tensor>,
}

impl GcnClassifier {
    /// Fresh model over the given syntax labels. `<unk>`, `PLH` and `<tok>`
    /// rows are always present.
    pub fn new<'a, I>(labels: I, dim: usize, layers: usize, seed: u64) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut vocab: Vec<String> = [UNK, crate::tree::PLH, TOK]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rest: BTreeSet<&str> = labels.into_iter().collect();
        for l in rest {
            if !vocab.iter().any(|v| v == l) {
                vocab.push(l.to_string());
            }
        }
        let mut rng = seeded_rng(seed);
        let mut params = alloc::vec![Tensor::uniform(vocab.len(), dim, 0.5, &mut rng)];
        for _ in 0..layers {
            params.push(Tensor::glorot(dim, dim, &mut rng));
            params.push(Tensor::glorot(dim, dim, &mut rng));
        }
        params.push(Tensor::glorot(dim, 1, &mut rng));
        params.push(Tensor::zeros(1, 1));
        GcnClassifier {
            vocab,
            dim,
            layers,
            params,
        }
    }

    pub fn symbol_index(&self, s: &str) -> usize {
        self.vocab.iter().position(|v| v == s).unwrap_or(0)
    }

    pub fn encode(&self, ctx: &EliminationContext) -> EncodedContext {
        let feats = ctx.symbols.iter().map(|s| self.symbol_index(s)).collect();
        let mut adj = alloc::vec![Vec::new(); ctx.nodes.len()];
        for &(a, b) in &ctx.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        EncodedContext { feats, adj }
    }

    pub fn logit(&self, ctx: &EliminationContext) -> Result<f64, ConstructError> {
        if ctx.nodes.is_empty() {
            return Err(ConstructError::EmptyContext);
        }
        Ok(gcn_logit(&self.params, self.layers, &self.encode(ctx)))
    }

    pub fn classify(&self, ctx: &EliminationContext) -> Result<(Decision, f64), ConstructError> {
        let p = sigmoid(self.logit(ctx)?);
        let d = if p > 0.5 {
            Decision::Eliminate
        } else {
            Decision::Retain
        };
        Ok((d, p))
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }
}

struct Activations {
    /// `h[l][i]`: node `i` entering layer `l` (index `layers` is the output).
    h: Vec<Vec<Vec<f64>>>,
    /// Pre-activation per layer and node.
    z: Vec<Vec<Vec<f64>>>,
}

fn gcn_forward(params: &[Tensor], layers: usize, x: &EncodedContext) -> Activations {
    let emb = &params[0];
    let d = emb.cols();
    let n = x.feats.len();
    let mut h = alloc::vec![x
        .feats
        .iter()
        .map(|&f| emb.row(f).to_vec())
        .collect::<Vec<_>>()];
    let mut z = Vec::with_capacity(layers);
    for l in 0..layers {
        let (w0, w1) = (&params[1 + 2 * l], &params[2 + 2 * l]);
        let cur = &h[l];
        let mut zl = alloc::vec![alloc::vec![0.0; d]; n];
        for i in 0..n {
            w0.vec_mat_acc(&cur[i], &mut zl[i]);
            for &j in &x.adj[i] {
                w1.vec_mat_acc(&cur[j], &mut zl[i]);
            }
        }
        let next = zl
            .iter()
            .map(|r| r.iter().map(|&v| v.max(0.0)).collect())
            .collect();
        z.push(zl);
        h.push(next);
    }
    Activations { h, z }
}

fn gcn_logit(params: &[Tensor], layers: usize, x: &EncodedContext) -> f64 {
    let acts = gcn_forward(params, layers, x);
    let fc = &params[1 + 2 * layers];
    let b = params[2 + 2 * layers].data()[0];
    dot(&acts.h[layers][0], fc.data()) + b
}

/// Binary cross-entropy of one labelled context; adds the gradient into `grads`.
pub fn gcn_loss_grad(
    params: &[Tensor],
    layers: usize,
    x: &EncodedContext,
    eliminate: bool,
    grads: &mut [Tensor],
) -> f64 {
    let acts = gcn_forward(params, layers, x);
    let d = params[0].cols();
    let n = x.feats.len();
    let fc_i = 1 + 2 * layers;
    let logit = dot(&acts.h[layers][0], params[fc_i].data()) + params[fc_i + 1].data()[0];
    let (loss, dlogit) = bce_with_logit(logit, if eliminate { 1.0 } else { 0.0 });
    grads[fc_i].outer_acc(&acts.h[layers][0], &[dlogit]);
    grads[fc_i + 1].data_mut()[0] += dlogit;
    let mut dh = alloc::vec![alloc::vec![0.0; d]; n];
    params[fc_i].mat_vec_acc(&[dlogit], &mut dh[0]);
    for l in (0..layers).rev() {
        let (w0, w1) = (&params[1 + 2 * l], &params[2 + 2 * l]);
        let cur = &acts.h[l];
        let mut dprev = alloc::vec![alloc::vec![0.0; d]; n];
        for i in 0..n {
            let dz: Vec<f64> = dh[i]
                .iter()
                .zip(&acts.z[l][i])
                .map(|(&g, &zv)| if zv > 0.0 { g } else { 0.0 })
                .collect();
            if dz.iter().all(|&v| v == 0.0) {
                continue;
            }
            grads[1 + 2 * l].outer_acc(&cur[i], &dz);
            w0.mat_vec_acc(&dz, &mut dprev[i]);
            for &j in &x.adj[i] {
                grads[2 + 2 * l].outer_acc(&cur[j], &dz);
                w1.mat_vec_acc(&dz, &mut dprev[j]);
            }
        }
        dh = dprev;
    }
    for (i, &f) in x.feats.iter().enumerate() {
        for (g, v) in grads[0].row_mut(f).iter_mut().zip(&dh[i]) {
            *g += v;
        }
    }
    loss
}

/// One visited node and the decision taken for it.
#[derive(Debug, Clone, PartialEq)]
pub struct EliminationStep {
    pub context: EliminationContext,
    pub eliminated: bool,
    pub prob: Option<f64>,
}

/// Runs the elimination loop with an arbitrary decision source and returns the
/// reduced tree plus the steps taken. Contexts are read from the tree as it
/// stands when each node is visited.
pub fn eliminate_with<F>(
    t: &SyntaxTree,
    range: ContextRange,
    mut decide: F,
) -> Result<(SyntaxTree, Vec<EliminationStep>), ConstructError>
where
    F: FnMut(&EliminationContext) -> Result<(bool, Option<f64>), ConstructError>,
{
    let mut ft = t.clone();
    let mut steps = Vec::new();
    for v in visit_order(t) {
        if !is_eligible(&ft, v) {
            continue;
        }
        let ctx = extract_context(&ft, v, range)?;
        let (eliminated, prob) = decide(&ctx)?;
        if eliminated {
            ft.eliminate(v)
                .map_err(|_| ConstructError::NotEligible(v, "root"))?;
        }
        steps.push(EliminationStep {
            context: ctx,
            eliminated,
            prob,
        });
    }
    Ok((ft, steps))
}

/// Removes `v` from `t`, splicing its children into its parent.
pub fn eliminate_node(t: &SyntaxTree, v: NodeId) -> Result<SyntaxTree, ConstructError> {
    let mut out = t.clone();
    out.eliminate(v)
        .map_err(|_| ConstructError::NotEligible(v, "root or leaf"))?;
    Ok(out)
}

fn is_fact_node(t: &SyntaxTree, n: NodeId) -> bool {
    n == t.root()
        || (!t.is_leaf(n)
            && !t.has_leaf_child(n)
            && t.children(n).iter().any(|&c| t.has_leaf_child(c)))
}

/// Groups a reduced tree into facts: every structural node that directly holds
/// a word-bearing child becomes a fact, nested facts become children bound by a
/// placeholder at their attachment point, and the first interrogative word
/// becomes the answer slot.
pub fn fact_tree_from(t: &SyntaxTree) -> Result<NlFactTree, ConstructError> {
    let answer_leaf = t
        .leaves()
        .into_iter()
        .find(|&l| t.token(l).is_some_and(is_wh_word))
        .ok_or(ConstructError::NoAnswer)?;

    fn collect(t: &SyntaxTree, n: NodeId, answer: NodeId, fact: &mut NlFact) {
        for &c in t.children(n) {
            if let Some(tok) = t.token(c) {
                let item = if c == answer {
                    NlItem::placeholder(ItemKind::Answer)
                } else {
                    NlItem::token(tok, t.label(n).unwrap_or(TOK))
                };
                fact.items.push(item);
            } else if is_fact_node(t, c) {
                let mut child = NlFact {
                    items: Vec::new(),
                    children: Vec::new(),
                };
                collect(t, c, answer, &mut child);
                fact.items
                    .push(NlItem::placeholder(ItemKind::Child(fact.children.len())));
                fact.children.push(child);
            } else {
                collect(t, c, answer, fact);
            }
        }
    }

    let mut root = NlFact {
        items: Vec::new(),
        children: Vec::new(),
    };
    collect(t, t.root(), answer_leaf, &mut root);
    if root.items.is_empty() {
        return Err(ConstructError::NoFacts);
    }
    if !root.items.iter().any(|i| i.kind == ItemKind::Answer) {
        return Err(ConstructError::AnswerOutsideRoot);
    }
    Ok(NlFactTree { root })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Construction {
    pub tree: NlFactTree,
    pub steps: Vec<EliminationStep>,
}

/// Algorithm 1 followed by fact grouping. Expects a preprocessed tree.
pub fn construct_fact_tree(
    t: &SyntaxTree,
    c: &GcnClassifier,
    range: ContextRange,
) -> Result<Construction, ConstructError> {
    let (reduced, steps) = eliminate_with(t, range, |ctx| {
        let (d, p) = c.classify(ctx)?;
        Ok((d == Decision::Eliminate, Some(p)))
    })?;
    Ok(Construction {
        tree: fact_tree_from(&reduced)?,
        steps,
    })
}

/// Leaf-index span per gold fact, in pre-order (root first).
fn gold_spans(gold: &NlFactTree, tokens: &[&str]) -> Result<Vec<(usize, usize)>, ConstructError> {
    let flat = gold.root.flatten();
    if flat.len() != tokens.len() {
        return Err(ConstructError::GoldMismatch(alloc::format!(
            "{} gold items vs {} leaves",
            flat.len(),
            tokens.len()
        )));
    }
    for (i, (g, t)) in flat.iter().zip(tokens).enumerate() {
        match g {
            Some(g) if g != t => {
                return Err(ConstructError::GoldMismatch(alloc::format!(
                    "position {i}: `{g}` vs `{t}`"
                )))
            }
            None if !is_wh_word(t) => {
                return Err(ConstructError::GoldMismatch(alloc::format!(
                    "answer slot over `{t}`"
                )))
            }
            _ => {}
        }
    }
    fn walk(f: &NlFact, start: usize, out: &mut Vec<(usize, usize)>) -> usize {
        let slot = out.len();
        out.push((start, start));
        let mut pos = start;
        for item in &f.items {
            match item.kind {
                ItemKind::Child(i) => pos = walk(&f.children[i], pos, out),
                _ => pos += 1,
            }
        }
        out[slot] = (start, pos);
        pos
    }
    let mut spans = Vec::new();
    walk(&gold.root, 0, &mut spans);
    Ok(spans)
}

/// Reconstructs the elimination decisions that turn `t` into `gold`. A node is
/// kept iff it is the highest eligible node spanning exactly the words of some
/// non-root gold fact. The result is verified by replaying it.
pub fn replay_labels(
    t: &SyntaxTree,
    gold: &NlFactTree,
    range: ContextRange,
) -> Result<Vec<EliminationStep>, ConstructError> {
    let leaves = t.leaves();
    let tokens: Vec<&str> = leaves.iter().filter_map(|&l| t.token(l)).collect();
    let spans = gold_spans(gold, &tokens)?;
    let leaf_pos: BTreeMap<NodeId, usize> =
        leaves.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let mut keep = BTreeSet::new();
    for &(a, b) in spans.iter().skip(1) {
        // bfs order means the first match is the highest
        let hit = t.bfs().into_iter().find(|&n| {
            is_eligible(t, n) && {
                let y = t.yield_of(n);
                y.first().map(|l| leaf_pos[l]) == Some(a)
                    && y.last().map(|l| leaf_pos[l] + 1) == Some(b)
            }
        });
        match hit {
            Some(n) => {
                keep.insert(n);
            }
            None => {
                let words = tokens[a..b].join(" ");
                return Err(ConstructError::NoSpanningNode(words));
            }
        }
    }
    let (reduced, steps) = eliminate_with(t, range, |ctx| Ok((!keep.contains(&ctx.center), None)))?;
    let built = fact_tree_from(&reduced)?;
    if !built.root.same_shape(&gold.root) {
        return Err(ConstructError::ReplayDiverged);
    }
    Ok(steps)
}

/// Labelled contexts gathered from (syntax tree, gold tree) pairs.
#[derive(Debug, Clone, Default)]
pub struct LabelledContexts {
    pub samples: Vec<(EliminationContext, bool)>,
    /// Indices of pairs that could not be replayed, with the reason.
    pub skipped: Vec<(usize, ConstructError)>,
}

pub fn collect_contexts(
    pairs: &[(SyntaxTree, NlFactTree)],
    range: ContextRange,
) -> LabelledContexts {
    let mut out = LabelledContexts::default();
    for (i, (t, g)) in pairs.iter().enumerate() {
        match replay_labels(t, g, range) {
            Ok(steps) => out
                .samples
                .extend(steps.into_iter().map(|s| (s.context, s.eliminated))),
            Err(e) => out.skipped.push((i, e)),
        }
    }
    out
}

/// Share of contexts whose predicted decision matches the label.
pub fn node_accuracy(c: &GcnClassifier, samples: &[(EliminationContext, bool)]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = samples
        .iter()
        .filter(|(ctx, y)| {
            c.classify(ctx)
                .map(|(d, _)| (d == Decision::Eliminate) == *y)
                .unwrap_or(false)
        })
        .count();
    hits as f64 / samples.len() as f64
}

#[derive(Debug, Clone)]
pub struct ClassifierTraining {
    pub model: GcnClassifier,
    pub log: TrainLog,
    pub skipped: Vec<(usize, ConstructError)>,
}

/// Trains the elimination classifier on labels replayed from gold trees. Pairs
/// are split into train and validation sets before replay so that validation
/// measures unseen trees. Non-replayable pairs are skipped and reported.
pub fn train_classifier(
    pairs: &[(SyntaxTree, NlFactTree)],
    range: ContextRange,
    layers: usize,
    cfg: &TrainConfig,
) -> Result<ClassifierTraining, ConstructError> {
    let (tr_idx, va_idx) = holdout(pairs.len(), cfg.valid_fraction, cfg.seed);
    let pick = |idx: &[usize]| -> Vec<(SyntaxTree, NlFactTree)> {
        idx.iter().map(|&i| pairs[i].clone()).collect()
    };
    let train = collect_contexts(&pick(&tr_idx), range);
    let valid = collect_contexts(&pick(&va_idx), range);
    let mut skipped: Vec<(usize, ConstructError)> = train
        .skipped
        .into_iter()
        .map(|(i, e)| (tr_idx[i], e))
        .chain(valid.skipped.into_iter().map(|(i, e)| (va_idx[i], e)))
        .collect();
    skipped.sort_by_key(|(i, _)| *i);
    let labels = train
        .samples
        .iter()
        .flat_map(|(c, _)| c.symbols.iter().map(String::as_str));
    let mut model = GcnClassifier::new(labels, cfg.dim, layers, cfg.seed);
    let enc = |s: &[(EliminationContext, bool)]| -> Vec<(EncodedContext, bool)> {
        s.iter().map(|(c, y)| (model.encode(c), *y)).collect()
    };
    let train_enc = enc(&train.samples);
    let valid_enc = enc(&valid.samples);
    let mut params = model.params.clone();
    let log = fit(
        &mut params,
        &train_enc,
        &valid_enc,
        cfg,
        |p, (x, y), g| gcn_loss_grad(p, layers, x, *y, g),
        |p, vs| {
            let hits = vs
                .iter()
                .filter(|(x, y)| (gcn_logit(p, layers, x) > 0.0) == *y)
                .count();
            hits as f64 / vs.len() as f64
        },
    )?;
    model.params = params;
    Ok(ClassifierTraining {
        model,
        log,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::grad_check;
    use crate::syntax::{parse_bracketed, preprocess};
    use crate::tree::Loc;
    use alloc::vec;
    use proptest::prelude::*;

    /// Preprocessed running example with SBAR directly above its clause.
    const FIG8: &str = "(ROOT (SBARQ (WHNP Who) (SQ (VP (VBD joined) (NP (NP an\\ NBA\\ team) (PP (IN in) (NP Los\\ Angeles))) (PP (IN in) (NP (NP the\\ year) (SBAR (NP the\\ Warriors) (VP (VBD won) (NP the\\ NBA\\ championship)))))))))";

    fn fig8() -> SyntaxTree {
        parse_bracketed(FIG8).unwrap()
    }

    fn label_of(t: &SyntaxTree, v: NodeId) -> &str {
        t.label(v).unwrap()
    }

    fn fig8_gold() -> NlFactTree {
        let tok = |w: &str, s: &str| NlItem::token(w, s);
        let team = NlFact {
            items: vec![
                tok("an NBA team", "NP"),
                tok("in", "IN"),
                tok("Los Angeles", "NP"),
            ],
            children: vec![],
        };
        let champ = NlFact {
            items: vec![
                tok("the Warriors", "NP"),
                tok("won", "VBD"),
                tok("the NBA championship", "NP"),
            ],
            children: vec![],
        };
        NlFactTree {
            root: NlFact {
                items: vec![
                    NlItem::placeholder(ItemKind::Answer),
                    tok("joined", "VBD"),
                    NlItem::placeholder(ItemKind::Child(0)),
                    tok("in", "IN"),
                    tok("the year", "NP"),
                    NlItem::placeholder(ItemKind::Child(1)),
                ],
                children: vec![team, champ],
            },
        }
    }

    #[test]
    fn figure8_visit_order() {
        let t = fig8();
        let labels: Vec<&str> = visit_order(&t)
            .into_iter()
            .map(|v| label_of(&t, v))
            .collect();
        assert_eq!(
            labels,
            vec!["VP", "SBAR", "NP", "PP", "PP", "NP", "VP", "SQ", "SBARQ"]
        );
    }

    #[test]
    fn figure8_replay() {
        let t = fig8();
        let steps = replay_labels(&t, &fig8_gold(), ContextRange::OFC).unwrap();
        let got: Vec<(&str, bool)> = steps
            .iter()
            .map(|s| (label_of(&t, s.context.center), s.eliminated))
            .collect();
        assert_eq!(
            got,
            vec![
                ("VP", true),
                ("SBAR", false),
                ("NP", true),
                ("PP", true),
                ("PP", true),
                ("NP", false),
                ("VP", true),
                ("SQ", true),
                ("SBARQ", true)
            ]
        );
        // replaying the decisions by hand gives the three-fact tree
        let keep: BTreeSet<NodeId> = steps
            .iter()
            .filter(|s| !s.eliminated)
            .map(|s| s.context.center)
            .collect();
        let (reduced, _) = eliminate_with(&t, ContextRange::OFC, |c| {
            Ok((!keep.contains(&c.center), None))
        })
        .unwrap();
        let ft = fact_tree_from(&reduced).unwrap();
        assert_eq!(ft.n_facts(), 3);
        assert_eq!(ft.root.surface(), "□ joined □ in the year □");
        assert_eq!(ft.root.children[0].surface(), "an NBA team in Los Angeles");
        assert_eq!(
            ft.root.children[1].surface(),
            "the Warriors won the NBA championship"
        );
        assert!(ft.well_formed());
    }

    #[test]
    fn single_fact_question() {
        let t = preprocess(&parse_bracketed("(ROOT (SBARQ (WHADVP (WRB where)) (SQ (VBD was) (NP (NNP Ann) (NNP Lee)) (VP (VBN born) (PP (IN in)))) (. ?)))").unwrap());
        // keep nothing: all eligible nodes eliminated
        let (reduced, _) = eliminate_with(&t, ContextRange::OFC, |_| Ok((true, None))).unwrap();
        let ft = fact_tree_from(&reduced).unwrap();
        assert_eq!(ft.n_facts(), 1);
        assert_eq!(ft.root.surface(), "□ was Ann Lee born in");
        assert_eq!(ft.root.count_answers(), 1);
    }

    #[test]
    fn context_ranges() {
        let t = fig8();
        // the VP under SQ has children VBD, NP, PP and parent SQ and no siblings
        let vp = visit_order(&t)[6];
        assert_eq!(label_of(&t, vp), "VP");
        assert_eq!(
            extract_context(&t, vp, ContextRange::O).unwrap().nodes,
            vec![vp]
        );
        assert_eq!(
            extract_context(&t, vp, ContextRange::OF)
                .unwrap()
                .nodes
                .len(),
            2
        );
        assert_eq!(
            extract_context(&t, vp, ContextRange::OC)
                .unwrap()
                .nodes
                .len(),
            4
        );
        assert_eq!(
            extract_context(&t, vp, ContextRange::OFC)
                .unwrap()
                .nodes
                .len(),
            5
        );
        let sq = t.parent(vp).unwrap();
        let s = extract_context(&t, sq, ContextRange::OFCS).unwrap();
        // SQ: parent SBARQ, child VP, sibling WHNP (a leaf parent)
        assert_eq!(s.symbols, vec!["SQ", "SBARQ", "VP", "WHNP"]);
        assert_eq!(s.edges, vec![(0, 1), (0, 2), (1, 3)]);
        assert!(extract_context(&t, t.root(), ContextRange::O).is_err());
        let leaf = t.leaves()[0];
        assert!(extract_context(&t, leaf, ContextRange::O).is_err());
        assert!(extract_context(&t, t.parent(leaf).unwrap(), ContextRange::O).is_err());
    }

    #[test]
    fn zero_readout_gives_half_and_retains() {
        let t = fig8();
        let mut c = GcnClassifier::new(["VP", "SQ"], 8, 3, 1);
        let fc = 1 + 2 * 3;
        c.params[fc].fill(0.0);
        let ctx = extract_context(&t, visit_order(&t)[0], ContextRange::OFC).unwrap();
        let (d, p) = c.classify(&ctx).unwrap();
        assert_eq!(p, 0.5);
        assert_eq!(d, Decision::Retain);
    }

    #[test]
    fn empty_context_rejected() {
        let c = GcnClassifier::new(["VP"], 4, 3, 1);
        let ctx = EliminationContext {
            center: 0,
            nodes: vec![],
            symbols: vec![],
            edges: vec![],
        };
        assert_eq!(c.classify(&ctx), Err(ConstructError::EmptyContext));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let t = fig8();
        for (k, v) in visit_order(&t).into_iter().enumerate() {
            let range = ContextRange::ALL[k % 5];
            let c = GcnClassifier::new(
                ["VP", "SQ", "NP", "PP", "SBAR", "SBARQ", "VBD"],
                6,
                3,
                k as u64,
            );
            let x = c.encode(&extract_context(&t, v, range).unwrap());
            let y = k % 2 == 0;
            let mut grads: Vec<Tensor> = c.params.iter().map(Tensor::zeros_like).collect();
            gcn_loss_grad(&c.params, 3, &x, y, &mut grads);
            let err = grad_check(
                |p| {
                    let mut scratch: Vec<Tensor> = p.iter().map(Tensor::zeros_like).collect();
                    gcn_loss_grad(p, 3, &x, y, &mut scratch)
                },
                &c.params,
                &grads,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn learns_figure8_decisions() {
        let pairs = vec![(fig8(), fig8_gold()); 4];
        let cfg = TrainConfig {
            lr: 0.01,
            epochs: 60,
            batch_size: 4,
            seed: 2,
            dim: 16,
            valid_fraction: 0.0,
        };
        let out = train_classifier(&pairs, ContextRange::OFC, 3, &cfg).unwrap();
        assert!(out.skipped.is_empty());
        let t = fig8();
        let order = visit_order(&t);
        let first = extract_context(&t, order[0], ContextRange::OFC).unwrap();
        assert_eq!(out.model.classify(&first).unwrap().0, Decision::Eliminate);
        let built = construct_fact_tree(&t, &out.model, ContextRange::OFC).unwrap();
        assert!(built.tree.root.same_shape(&fig8_gold().root));
        let sbar = built
            .steps
            .iter()
            .find(|s| label_of(&t, s.context.center) == "SBAR")
            .unwrap();
        assert!(!sbar.eliminated);
    }

    #[test]
    fn replay_rejects_mismatched_gold() {
        let mut gold = fig8_gold();
        gold.root.items[1] = NlItem::token("left", "VBD");
        assert!(matches!(
            replay_labels(&fig8(), &gold, ContextRange::OFC),
            Err(ConstructError::GoldMismatch(_))
        ));
    }

    #[test]
    fn gold_locations_are_ignored_by_shape() {
        let g = fig8_gold();
        let mut h = g.clone();
        h.root.items[1].loc = Some(Loc::P);
        assert!(g.root.same_shape(&h.root));
    }

    #[test]
    fn range_names_round_trip() {
        for r in ContextRange::ALL {
            assert_eq!(r.to_string().parse::<ContextRange>().unwrap(), r);
        }
        assert!("X".parse::<ContextRange>().is_err());
    }

    proptest! {
        #[test]
        fn any_elimination_sequence_preserves_leaves(bits in prop::collection::vec(any::<bool>(), 9)) {
            let t = fig8();
            let before: Vec<String> = t.leaf_tokens().iter().map(|s| s.to_string()).collect();
            let mut k = 0;
            let (reduced, steps) = eliminate_with(&t, ContextRange::OFC, |_| {
                let b = bits[k % bits.len()];
                k += 1;
                Ok((b, None))
            }).unwrap();
            prop_assert_eq!(steps.len(), 9);
            let after: Vec<String> = reduced.leaf_tokens().iter().map(|s| s.to_string()).collect();
            prop_assert_eq!(before, after);
            if let Ok(ft) = fact_tree_from(&reduced) {
                prop_assert!(ft.well_formed());
                let flat: Vec<Option<&str>> = ft.root.flatten();
                prop_assert_eq!(flat.len(), t.leaves().len());
            }
        }

        #[test]
        fn monotone_logit_transform_keeps_decisions(scale in 0.01f64..50.0, seed in 0u64..50) {
            let t = fig8();
            let c = GcnClassifier::new(["VP", "SQ", "NP", "PP"], 8, 3, seed);
            let mut scaled = c.clone();
            let fc = 1 + 2 * 3;
            scaled.params[fc].scale(scale);
            scaled.params[fc + 1].scale(scale);
            for v in visit_order(&t) {
                let ctx = extract_context(&t, v, ContextRange::OFC).unwrap();
                prop_assert_eq!(c.classify(&ctx).unwrap().0, scaled.classify(&ctx).unwrap().0);
            }
        }
    }
}
