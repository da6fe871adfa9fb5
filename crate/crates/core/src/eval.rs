//! End-to-end answering with per-stage oracle substitution, accuracy reports
//! with failure attribution, and the helpers that train a full model set.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::construct::{
    collect_contexts, construct_fact_tree, node_accuracy, train_classifier, ContextRange,
    GcnClassifier,
};
use crate::datagen::QaItem;
use crate::kg::{EntityId, KnowledgeGraph};
use crate::locate::{
    label_pairs, relation_observations, train_labeler, CrfLabeler, Grounding, RelationMatcher,
};
use crate::reason::{
    brute_force_answer, describe_step, reason_with, train_scorer_with, CandidateScope, FactScorer,
    KgTruth, NegativeSampling, ReasonOptions, ReasonerConfig, ReasoningTrace, TraceStep,
};
use crate::syntax::{parse_bracketed, preprocess, SyntaxTree};
use crate::train::{TrainConfig, TrainLog};
use crate::tree::{KgFactNode, KgFactTree, NlFactTree, Term};

/// Stages of the pipeline, in the order failures are attributed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Construction,
    Location,
    Intra,
    Inter,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Construction => "construction",
            Stage::Location => "location",
            Stage::Intra => "intra",
            Stage::Inter => "inter",
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("the {} stage needs a {model} model", stage.name())]
    MissingModel { stage: Stage, model: &'static str },
    #[error("{} stage failed: {msg}", stage.name())]
    StageFailed { stage: Stage, msg: String },
    #[error("nothing to evaluate")]
    EmptySplit,
    #[error("training {what}: {msg}")]
    Training { what: &'static str, msg: String },
}

/// Which stages are replaced by ground truth.
///
/// `gold_location` replaces the output of fact location, i.e. the KG fact
/// tree, and so subsumes `gold_fact_tree`. `gold_intra` answers each fact from
/// the KG itself instead of the scorer; the fact still sees whatever entities
/// were transferred into it. `gold_inter` transfers the gold entity of every
/// child.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleFlags {
    pub gold_fact_tree: bool,
    pub gold_location: bool,
    pub gold_intra: bool,
    pub gold_inter: bool,
}

impl OracleFlags {
    pub fn all() -> Self {
        OracleFlags {
            gold_fact_tree: true,
            gold_location: true,
            gold_intra: true,
            gold_inter: true,
        }
    }

    /// Parses a comma-separated list of `tree`, `fl`, `intra`, `inter`.
    pub fn parse(s: &str) -> Result<Self, String> {
        let mut f = OracleFlags::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "tree" => f.gold_fact_tree = true,
                "fl" => f.gold_location = true,
                "intra" => f.gold_intra = true,
                "inter" => f.gold_inter = true,
                other => {
                    return Err(format!(
                        "unknown oracle `{other}` (expected tree, fl, intra, inter)"
                    ))
                }
            }
        }
        Ok(f)
    }

    /// The staircase (none), FL*, FL*+intra*, FL*+intra*+inter*.
    pub fn staircase() -> [OracleFlags; 4] {
        let fl = OracleFlags {
            gold_location: true,
            ..Default::default()
        };
        let intra = OracleFlags {
            gold_intra: true,
            ..fl
        };
        let inter = OracleFlags {
            gold_inter: true,
            ..intra
        };
        [OracleFlags::default(), fl, intra, inter]
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.gold_fact_tree {
            parts.push("tree");
        }
        if self.gold_location {
            parts.push("fl");
        }
        if self.gold_intra {
            parts.push("intra");
        }
        if self.gold_inter {
            parts.push("inter");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join(",")
        }
    }
}

/// Trained components. Any of them may be absent when the matching stage is
/// replaced by an oracle.
#[derive(Debug, Clone, Default)]
pub struct Models {
    pub classifier: Option<GcnClassifier>,
    pub range: ContextRange,
    pub labeler: Option<CrfLabeler>,
    pub matcher: Option<RelationMatcher>,
    pub scorer: Option<FactScorer>,
}

/// Result of answering one question.
#[derive(Debug, Clone, PartialEq)]
pub struct Answer {
    pub prediction: EntityId,
    pub trace: ReasoningTrace,
    pub nl_tree: Option<NlFactTree>,
    pub kg_tree: KgFactTree,
}

fn stage_err(stage: Stage, e: impl core::fmt::Display) -> EvalError {
    EvalError::StageFailed {
        stage,
        msg: e.to_string(),
    }
}

fn strip_gold(n: &KgFactNode) -> KgFactNode {
    KgFactNode {
        fact: n.fact.clone(),
        children: n.children.iter().map(strip_gold).collect(),
        gold: None,
    }
}

/// Copies gold child values onto a predicted tree of the same shape, so that
/// gold transfer works on a predicted tree.
fn transplant_gold(pred: &mut KgFactNode, gold: &KgFactNode) {
    if pred.isomorphic(gold) {
        pred.gold = gold.gold;
        for (p, g) in pred.children.iter_mut().zip(&gold.children) {
            transplant_gold(p, g);
        }
    }
}

fn check_models(models: &Models, flags: OracleFlags) -> Result<(), EvalError> {
    let missing = |stage, model| Err(EvalError::MissingModel { stage, model });
    if !flags.gold_location {
        if !flags.gold_fact_tree && models.classifier.is_none() {
            return missing(Stage::Construction, "classifier");
        }
        if models.labeler.is_none() {
            return missing(Stage::Location, "labeler");
        }
        if models.matcher.is_none() {
            return missing(Stage::Location, "relation matcher");
        }
    }
    if !flags.gold_intra && models.scorer.is_none() {
        return missing(Stage::Intra, "scorer");
    }
    Ok(())
}

/// Runs construct, locate and reason on one item with oracle substitutions.
pub fn answer(
    item: &QaItem,
    models: &Models,
    kg: &KnowledgeGraph,
    flags: OracleFlags,
    cfg: &ReasonerConfig,
) -> Result<Answer, EvalError> {
    check_models(models, flags)?;
    let (nl_tree, mut kg_tree) = if flags.gold_location {
        (None, item.gold_kg_tree.clone())
    } else {
        let nlt = if flags.gold_fact_tree {
            item.gold_nl_tree.clone()
        } else {
            let classifier = models.classifier.as_ref().expect("checked");
            let raw = parse_bracketed(&item.tree).map_err(|e| stage_err(Stage::Construction, e))?;
            construct_fact_tree(&preprocess(&raw), classifier, models.range)
                .map_err(|e| stage_err(Stage::Construction, e))?
                .tree
        };
        let labeler = models.labeler.as_ref().expect("checked");
        let g = Grounding {
            kg,
            matcher: models.matcher.as_ref().expect("checked"),
            links: &item.links,
        };
        let mut kt = g
            .locate_tree_with(&nlt, |f| {
                let syns: Vec<&str> = f.items.iter().map(|i| i.syn.as_str()).collect();
                labeler.label_sequence(&syns)
            })
            .map_err(|e| stage_err(Stage::Location, e))?;
        transplant_gold(&mut kt.root, &item.gold_kg_tree.root);
        (Some(nlt), kt)
    };
    if !flags.gold_inter {
        clear_gold(&mut kg_tree.root);
    }
    let opts = ReasonOptions {
        gold_transfer: flags.gold_inter,
    };
    let (prediction, trace) = if flags.gold_intra {
        reason_with(&kg_tree, &KgTruth, kg, cfg, opts)
    } else {
        reason_with(
            &kg_tree,
            models.scorer.as_ref().expect("checked"),
            kg,
            cfg,
            opts,
        )
    }
    .map_err(|e| stage_err(Stage::Intra, e))?;
    Ok(Answer {
        prediction,
        trace,
        nl_tree,
        kg_tree,
    })
}

fn clear_gold(n: &mut KgFactNode) {
    n.gold = None;
    n.children.iter_mut().for_each(clear_gold);
}

/// Earliest stage responsible for a wrong answer. Construction and location
/// are judged against the gold trees. Within reasoning, the first fact (in
/// visiting order) whose output differs from gold is an inter-fact failure
/// when that output is itself a true completion in the KG (a valid but
/// unhelpful choice), and an intra-fact failure otherwise.
pub fn attribute_failure(item: &QaItem, ans: &Answer, kg: &KnowledgeGraph) -> Stage {
    if let Some(nlt) = &ans.nl_tree {
        if !nlt.root.same_shape(&item.gold_nl_tree.root) {
            return Stage::Construction;
        }
    }
    if strip_gold(&ans.kg_tree.root) != strip_gold(&item.gold_kg_tree.root) {
        return Stage::Location;
    }
    let mut golds = Vec::new();
    gold_preorder(&item.gold_kg_tree.root, &mut golds);
    let mut facts = Vec::new();
    fact_preorder(&ans.kg_tree.root, &mut facts);
    // entities transferred so far, by child fact id
    let mut transferred: BTreeMap<usize, EntityId> = BTreeMap::new();
    let children = child_ids(&ans.kg_tree.root);
    for step in &ans.trace.steps {
        match step {
            TraceStep::Transfer { child, entity, .. } => {
                transferred.insert(*child, *entity);
            }
            TraceStep::Intra { fact, chosen, .. } => {
                if golds.get(*fact).copied().flatten() == Some(chosen.entity) {
                    continue;
                }
                if *fact == 0 {
                    return Stage::Intra;
                }
                let mut f = facts[*fact].clone();
                for (i, &cid) in children[*fact].iter().enumerate() {
                    if let (Some(pos), Some(&e)) = (f.find(Term::Child(i)), transferred.get(&cid)) {
                        f.set(pos, Term::Entity(e));
                    }
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
                let valid = brute_force_answer(kg, &single).contains(&chosen.entity);
                return if valid { Stage::Inter } else { Stage::Intra };
            }
        }
    }
    Stage::Intra
}

fn gold_preorder(n: &KgFactNode, out: &mut Vec<Option<EntityId>>) {
    out.push(n.gold);
    n.children.iter().for_each(|c| gold_preorder(c, out));
}

fn fact_preorder(n: &KgFactNode, out: &mut Vec<crate::tree::KgFact>) {
    out.push(n.fact.clone());
    n.children.iter().for_each(|c| fact_preorder(c, out));
}

/// Pre-order ids of the children of every fact, indexed by pre-order id.
fn child_ids(root: &KgFactNode) -> Vec<Vec<usize>> {
    fn go(n: &KgFactNode, next: &mut usize, out: &mut Vec<Vec<usize>>) {
        let me = *next;
        *next += 1;
        out.push(Vec::new());
        for c in &n.children {
            out[me].push(*next);
            go(c, next, out);
        }
    }
    let mut out = Vec::new();
    go(root, &mut 0, &mut out);
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetStats {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl SubsetStats {
    fn add(&mut self, ok: bool) {
        self.n += 1;
        self.correct += ok as usize;
        self.accuracy = self.correct as f64 / self.n as f64;
    }
}

/// Settings echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub seed: u64,
    pub lambda: f64,
    pub range: ContextRange,
    pub oracle: OracleFlags,
    pub top_n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemTrace {
    pub id: String,
    pub question: String,
    pub gold: String,
    pub prediction: Option<String>,
    pub correct: bool,
    pub failure: Option<Stage>,
    pub error: Option<String>,
    pub steps: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_items: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    /// Keyed `1F`, `2F`, `3F`.
    pub subsets: BTreeMap<String, SubsetStats>,
    pub by_template: BTreeMap<u32, SubsetStats>,
    /// Wrong items per responsible stage.
    pub failures: BTreeMap<Stage, usize>,
    /// Items on which some stage raised an error (a subset of the failures).
    pub errored: usize,
    pub config: ReportConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traces: Option<Vec<ItemTrace>>,
}

impl EvalReport {
    pub fn subset(&self, key: &str) -> SubsetStats {
        self.subsets.get(key).copied().unwrap_or_default()
    }

    /// Accuracy over several subsets together.
    pub fn pooled(&self, keys: &[&str]) -> f64 {
        let (n, c) = keys
            .iter()
            .map(|k| self.subset(k))
            .fold((0, 0), |(n, c), s| (n + s.n, c + s.correct));
        if n == 0 {
            0.0
        } else {
            c as f64 / n as f64
        }
    }
}

/// Hits@1 over `items`. Stage errors count as wrong answers and are
/// attributed; only a missing model aborts.
pub fn evaluate(
    items: &[&QaItem],
    models: &Models,
    kg: &KnowledgeGraph,
    flags: OracleFlags,
    cfg: &ReasonerConfig,
    seed: u64,
    keep_traces: bool,
) -> Result<EvalReport, EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    check_models(models, flags)?;
    let mut subsets: BTreeMap<String, SubsetStats> = BTreeMap::new();
    let mut by_template: BTreeMap<u32, SubsetStats> = BTreeMap::new();
    let mut failures: BTreeMap<Stage, usize> = BTreeMap::new();
    let mut errored = 0;
    let mut n_correct = 0;
    let mut traces = Vec::new();
    for item in items {
        let res = answer(item, models, kg, flags, cfg);
        let (ok, failure, error, pred, steps) = match &res {
            Ok(a) => {
                let ok = a.prediction == item.answer;
                let failure = (!ok).then(|| attribute_failure(item, a, kg));
                let steps = if keep_traces {
                    a.trace.steps.iter().map(|s| describe_step(kg, s)).collect()
                } else {
                    Vec::new()
                };
                (ok, failure, None, Some(a.prediction), steps)
            }
            Err(EvalError::StageFailed { stage, msg }) => {
                errored += 1;
                (false, Some(*stage), Some(msg.clone()), None, Vec::new())
            }
            Err(e) => return Err(e.clone()),
        };
        n_correct += ok as usize;
        subsets
            .entry(format!("{}F", item.n_facts))
            .or_default()
            .add(ok);
        by_template.entry(item.template).or_default().add(ok);
        if let Some(s) = failure {
            *failures.entry(s).or_default() += 1;
        }
        if keep_traces {
            traces.push(ItemTrace {
                id: item.id.clone(),
                question: item.question.clone(),
                gold: kg.entity_name(item.answer).to_string(),
                prediction: pred.map(|p| kg.entity_name(p).to_string()),
                correct: ok,
                failure,
                error,
                steps,
            });
        }
    }
    traces.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(EvalReport {
        n_items: items.len(),
        n_correct,
        accuracy: n_correct as f64 / items.len() as f64,
        subsets,
        by_template,
        failures,
        errored,
        config: ReportConfig {
            seed,
            lambda: cfg.lambda,
            range: models.range,
            oracle: flags,
            top_n: cfg.top_n,
        },
        traces: keep_traces.then_some(traces),
    })
}

// ------------------------------------------------------------------ training

/// Hyper-parameters of a full training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub classifier: TrainConfig,
    pub gcn_layers: usize,
    pub range: ContextRange,
    pub labeler: TrainConfig,
    pub labeler_hidden: usize,
    pub scorer: TrainConfig,
    pub sampling: NegativeSampling,
    pub mix: f64,
    pub matcher_dim: usize,
    pub reasoner: ReasonerConfig,
}

impl PipelineConfig {
    /// Settings that fit the desk-scale run in a few minutes on one core. The
    /// small synthetic corpora need larger steps than full-scale training.
    /// Questions are asked over the same KG the scorer learns, so no facts
    /// are held out from it, and half of its negatives share the type of the
    /// entity they replace.
    pub fn desk(seed: u64) -> Self {
        PipelineConfig {
            classifier: TrainConfig {
                lr: 1e-2,
                epochs: 15,
                seed,
                ..TrainConfig::classifier()
            },
            gcn_layers: 3,
            range: ContextRange::OFC,
            labeler: TrainConfig {
                lr: 5e-2,
                epochs: 15,
                seed,
                ..TrainConfig::labeler()
            },
            labeler_hidden: 32,
            scorer: TrainConfig {
                lr: 1e-2,
                epochs: 100,
                valid_fraction: 0.0,
                seed,
                ..TrainConfig::scorer()
            },
            sampling: NegativeSampling {
                ratio: 5,
                role_aware: 0.5,
            },
            mix: 0.5,
            matcher_dim: 32,
            reasoner: ReasonerConfig {
                scope: CandidateScope::RoleRestricted,
                ..ReasonerConfig::default()
            },
        }
    }
}

pub fn syntax_pairs(items: &[&QaItem]) -> Vec<(SyntaxTree, NlFactTree)> {
    items
        .iter()
        .filter_map(|it| {
            parse_bracketed(&it.tree)
                .ok()
                .map(|t| (preprocess(&t), it.gold_nl_tree.clone()))
        })
        .collect()
}

pub fn train_classifier_on(
    items: &[&QaItem],
    cfg: &PipelineConfig,
) -> Result<(GcnClassifier, TrainLog), EvalError> {
    let tr = train_classifier(
        &syntax_pairs(items),
        cfg.range,
        cfg.gcn_layers,
        &cfg.classifier,
    )
    .map_err(|e| EvalError::Training {
        what: "classifier",
        msg: e.to_string(),
    })?;
    Ok((tr.model, tr.log))
}

pub fn train_labeler_on(
    items: &[&QaItem],
    cfg: &PipelineConfig,
) -> Result<(CrfLabeler, TrainLog), EvalError> {
    let pairs: Vec<_> = items
        .iter()
        .flat_map(|it| label_pairs(&it.gold_nl_tree))
        .collect();
    let tr = train_labeler(&pairs, cfg.labeler_hidden, &cfg.labeler).map_err(|e| {
        EvalError::Training {
            what: "labeler",
            msg: e.to_string(),
        }
    })?;
    Ok((tr.model, tr.log))
}

/// Relation matcher fitted on the predicate and attribute phrases of the
/// training questions.
pub fn fit_matcher(
    items: &[&QaItem],
    kg: &KnowledgeGraph,
    dim: usize,
    seed: u64,
) -> RelationMatcher {
    let obs: Vec<(String, String)> = items
        .iter()
        .flat_map(|it| relation_observations(&it.gold_nl_tree, &it.gold_kg_tree, kg))
        .collect();
    let names: Vec<&str> = kg.relations().names().iter().map(String::as_str).collect();
    RelationMatcher::fit(
        &names,
        obs.iter().map(|(p, r)| (p.as_str(), r.as_str())),
        dim,
        seed,
    )
}

pub fn train_scorer_on(
    kg: &KnowledgeGraph,
    cfg: &PipelineConfig,
) -> Result<(FactScorer, TrainLog), EvalError> {
    let tr = train_scorer_with(kg, cfg.sampling, cfg.mix, &cfg.scorer).map_err(|e| {
        EvalError::Training {
            what: "scorer",
            msg: e.to_string(),
        }
    })?;
    Ok((tr.model, tr.log))
}

/// Trains every component on the training items and the KG.
pub fn train_models(
    items: &[&QaItem],
    kg: &KnowledgeGraph,
    cfg: &PipelineConfig,
) -> Result<Models, EvalError> {
    let (classifier, _) = train_classifier_on(items, cfg)?;
    let (labeler, _) = train_labeler_on(items, cfg)?;
    let matcher = fit_matcher(items, kg, cfg.matcher_dim, cfg.classifier.seed);
    let (scorer, _) = train_scorer_on(kg, cfg)?;
    Ok(Models {
        classifier: Some(classifier),
        range: cfg.range,
        labeler: Some(labeler),
        matcher: Some(matcher),
        scorer: Some(scorer),
    })
}

/// Node-decision accuracy of a classifier trained with each context range,
/// measured on the contexts replayed from `test`.
pub fn context_sweep(
    train: &[&QaItem],
    test: &[&QaItem],
    ranges: &[ContextRange],
    cfg: &PipelineConfig,
) -> Result<Vec<(ContextRange, f64)>, EvalError> {
    let test_pairs = syntax_pairs(test);
    let mut out = Vec::with_capacity(ranges.len());
    for &range in ranges {
        let c = PipelineConfig {
            range,
            ..cfg.clone()
        };
        let (model, _) = train_classifier_on(train, &c)?;
        let samples = collect_contexts(&test_pairs, range).samples;
        out.push((range, node_accuracy(&model, &samples)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{
        builtin_templates, generate_dataset, generate_kg, Dataset, DatasetConfig, KgGenConfig,
    };

    fn fixture() -> (KnowledgeGraph, Dataset) {
        let kg = generate_kg(&KgGenConfig {
            n_entities: 400,
            n_binary_rel: 20,
            n_nary_rel: 6,
            n_facts: 900,
            max_attrs: 2,
            seed: 21,
        })
        .unwrap();
        let ds = generate_dataset(&kg, &builtin_templates(), &DatasetConfig::new(150, 4)).unwrap();
        (kg, ds)
    }

    #[test]
    fn all_oracles_answer_everything() {
        let (kg, ds) = fixture();
        let items: Vec<&QaItem> = ds.items.iter().collect();
        let r = evaluate(
            &items,
            &Models::default(),
            &kg,
            OracleFlags::all(),
            &ReasonerConfig::default(),
            0,
            false,
        )
        .unwrap();
        assert_eq!(r.accuracy, 1.0, "{:?}", r.failures);
        assert!(r.failures.is_empty());
    }

    #[test]
    fn missing_models_name_their_stage() {
        let (kg, ds) = fixture();
        let items: Vec<&QaItem> = ds.items.iter().take(3).collect();
        let fl = OracleFlags {
            gold_location: true,
            ..Default::default()
        };
        let e = evaluate(
            &items,
            &Models::default(),
            &kg,
            fl,
            &ReasonerConfig::default(),
            0,
            false,
        )
        .unwrap_err();
        assert_eq!(
            e,
            EvalError::MissingModel {
                stage: Stage::Intra,
                model: "scorer"
            }
        );
        let e = answer(
            items[0],
            &Models::default(),
            &kg,
            OracleFlags::default(),
            &ReasonerConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(
            e,
            EvalError::MissingModel {
                stage: Stage::Construction,
                ..
            }
        ));
        assert!(evaluate(
            &[],
            &Models::default(),
            &kg,
            OracleFlags::all(),
            &ReasonerConfig::default(),
            0,
            false
        )
        .is_err());
    }

    #[test]
    fn gold_trees_with_truth_need_only_the_matcher() {
        let (kg, ds) = fixture();
        let items: Vec<&QaItem> = ds.items.iter().collect();
        let (labeler, _) = train_labeler_on(&items, &PipelineConfig::desk(0)).unwrap();
        let models = Models {
            labeler: Some(labeler),
            matcher: Some(fit_matcher(&items, &kg, 16, 0)),
            ..Default::default()
        };
        let flags = OracleFlags {
            gold_fact_tree: true,
            gold_intra: true,
            gold_inter: true,
            ..Default::default()
        };
        let r = evaluate(
            &items,
            &models,
            &kg,
            flags,
            &ReasonerConfig::default(),
            0,
            true,
        )
        .unwrap();
        assert!(r.accuracy > 0.9, "{:?}", r.failures);
        let sizes: usize = r.subsets.values().map(|s| s.n).sum();
        assert_eq!(sizes, r.n_items);
        let traces = r.traces.unwrap();
        assert_eq!(traces.len(), items.len());
        assert!(traces.iter().all(|t| t.correct != t.failure.is_some()));
    }

    #[test]
    fn oracle_flags_parse_and_label() {
        let f = OracleFlags::parse("fl, intra,inter").unwrap();
        assert_eq!(f, OracleFlags::staircase()[3]);
        assert_eq!(f.label(), "fl,intra,inter");
        assert_eq!(OracleFlags::parse("").unwrap().label(), "none");
        assert!(OracleFlags::parse("beam").is_err());
    }

    #[test]
    fn child_ids_follow_preorder() {
        let (_, ds) = fixture();
        let it = ds.items.iter().find(|i| i.n_facts == 3).unwrap();
        let ids = child_ids(&it.gold_kg_tree.root);
        assert_eq!(ids.len(), 3);
        assert_eq!(ids[0][0], 1);
    }
}
