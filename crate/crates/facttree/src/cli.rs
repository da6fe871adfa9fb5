//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use facttree_core::construct::ContextRange;
use facttree_core::datagen::{
    builtin_templates, corrupt_kg, generate_dataset, generate_kg, parse_templates, DatasetConfig,
    KgGenConfig, QaItem, TemplateSet,
};
use facttree_core::eval::{
    answer, attribute_failure, evaluate, fit_matcher, train_classifier_on, train_labeler_on,
    train_scorer_on, EvalError, Models, OracleFlags, PipelineConfig,
};
use facttree_core::kg::KnowledgeGraph;
use facttree_core::reason::{CandidateScope, ReasonerConfig, TraceStep};
use serde::Serialize;

use crate::ckpt::{self, Checkpoint, ModelDir};
use crate::dataset::{
    kg_to_json, load_kg_for, nl_to_json, read_dataset, save_dataset, GenManifest,
};
use crate::error::{Error, Result};
use crate::kgio::{load_kg, save_kg, write_atomic};

#[derive(Debug, Parser)]
#[command(
    name = "facttree",
    version,
    about = "Fact-tree question answering over n-ary knowledge graphs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic KG from a JSON config (missing keys take desk defaults).
    GenKg {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a question dataset with 8:1:1 splits.
    GenData {
        #[arg(long)]
        kg: PathBuf,
        /// Template set; the shipped set when omitted.
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.3)]
        synonym_rate: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drop a seeded random fraction of the facts.
    CorruptKg {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one component, or all of them into a models directory.
    Train(TrainArgs),
    /// Answer one item and print the result as JSON.
    Answer {
        #[arg(long)]
        item: String,
        #[command(flatten)]
        run: RunArgs,
        /// Include the reasoning steps with their scores.
        #[arg(long)]
        trace: bool,
    },
    /// Evaluate a split and write a JSON report.
    Eval {
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        run: RunArgs,
        /// Report destination; `-` for standard output.
        #[arg(long)]
        report: Option<String>,
        /// Keep per-item traces in the report.
        #[arg(long)]
        traces: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Target {
    Classifier,
    Labeler,
    Scorer,
    Matcher,
    All,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub target: Target,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub kg: PathBuf,
    /// Checkpoint path, or a directory for `all`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = parse_range)]
    pub range: Option<ContextRange>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    All,
    Role,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long)]
    pub kg: PathBuf,
    /// Dataset directory; defaults to the one recorded by `train`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Stages to replace by gold: any of tree, fl, intra, inter.
    #[arg(long, value_parser = parse_oracle, default_value = "")]
    pub oracle: OracleFlags,
    #[arg(long, default_value_t = 1.5)]
    pub lambda: f64,
    /// Candidate entities ranked per placeholder.
    #[arg(long, value_enum, default_value_t = Scope::Role)]
    pub scope: Scope,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_range(s: &str) -> Result<ContextRange, String> {
    s.parse()
        .map_err(|e: facttree_core::construct::ConstructError| e.to_string())
}

fn parse_oracle(s: &str) -> Result<OracleFlags, String> {
    if s.trim().is_empty() {
        Ok(OracleFlags::default())
    } else {
        OracleFlags::parse(s)
    }
}

/// Prints to standard output; a reader that hung up early is not an error.
fn emit(s: &str) -> Result<()> {
    use std::io::Write as _;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{s}").and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
            Err(Error::io(Path::new("<stdout>"), e))
        }
        _ => Ok(()),
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn eval_err(e: EvalError) -> Error {
    match e {
        EvalError::MissingModel { .. } | EvalError::EmptySplit => Error::config(e),
        _ => Error::data(e),
    }
}

/// Desk defaults with missing keys filled in.
pub fn kg_config_from_json(s: &str) -> Result<KgGenConfig> {
    let mut base = serde_json::to_value(KgGenConfig::desk()).expect("config serializes");
    let over: serde_json::Value = serde_json::from_str(s).map_err(Error::config)?;
    let (Some(b), Some(o)) = (base.as_object_mut(), over.as_object()) else {
        return Err(Error::config("KG config must be a JSON object"));
    };
    for (k, v) in o {
        if !b.contains_key(k) {
            return Err(Error::config(format!("unknown KG config key `{k}`")));
        }
        b.insert(k.clone(), v.clone());
    }
    serde_json::from_value(base).map_err(Error::config)
}

fn load_templates(path: Option<&Path>) -> Result<TemplateSet> {
    match path {
        Some(p) => parse_templates(&read_to_string(p)?).map_err(Error::config),
        None => Ok(builtin_templates()),
    }
}

fn pipeline_config(a: &TrainArgs) -> PipelineConfig {
    let mut cfg = PipelineConfig::desk(a.seed);
    if let Some(r) = a.range {
        cfg.range = r;
    }
    for t in [&mut cfg.classifier, &mut cfg.labeler, &mut cfg.scorer] {
        if let Some(lr) = a.lr {
            t.lr = lr;
        }
        if let Some(d) = a.dim {
            t.dim = d;
        }
        if let Some(e) = a.epochs {
            t.epochs = e;
        }
    }
    if let Some(d) = a.dim {
        cfg.matcher_dim = d;
    }
    cfg
}

fn check_train(a: &TrainArgs) -> Result<()> {
    if a.lr.is_some_and(|lr| !(lr.is_finite() && lr > 0.0)) {
        return Err(Error::config("--lr must be positive"));
    }
    if a.dim == Some(0) || a.epochs == Some(0) {
        return Err(Error::config("--dim and --epochs must be positive"));
    }
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    check_train(a)?;
    let cfg = pipeline_config(a);
    let raw = read_dataset(&a.data)?;
    let kg = load_kg_for(&a.kg, None, Some(&raw))?;
    let ds = raw.resolve(&kg)?;
    let items = ds
        .split("train")
        .filter(|v| !v.is_empty())
        .ok_or_else(|| Error::data("the train split is empty"))?;
    let targets: &[Target] = match a.target {
        Target::All => &[
            Target::Classifier,
            Target::Labeler,
            Target::Matcher,
            Target::Scorer,
        ],
        ref t => std::slice::from_ref(t),
    };
    let dir_mode = a.target == Target::All;
    let path_for = |file: &str| -> PathBuf {
        if dir_mode {
            a.out.join(file)
        } else {
            a.out.clone()
        }
    };
    for t in targets {
        let out = match t {
            Target::Classifier => {
                let (model, log) = train_classifier_on(&items, &cfg).map_err(eval_err)?;
                eprintln!(
                    "classifier: best epoch {} node accuracy {:.4}",
                    log.best_epoch, log.best_metric
                );
                let p = path_for(ckpt::CLASSIFIER_FILE);
                ckpt::save(
                    &Checkpoint::Classifier {
                        range: cfg.range,
                        train: cfg.classifier.clone(),
                        model,
                    },
                    &p,
                )?;
                p
            }
            Target::Labeler => {
                let (model, log) = train_labeler_on(&items, &cfg).map_err(eval_err)?;
                eprintln!(
                    "labeler: best epoch {} sequence accuracy {:.4}",
                    log.best_epoch, log.best_metric
                );
                let p = path_for(ckpt::LABELER_FILE);
                ckpt::save(
                    &Checkpoint::Labeler {
                        train: cfg.labeler.clone(),
                        model,
                    },
                    &p,
                )?;
                p
            }
            Target::Matcher => {
                let m = fit_matcher(&items, &kg, cfg.matcher_dim, a.seed);
                eprintln!("matcher: {} rows", m.table.rows.len());
                let p = path_for(ckpt::MATCHER_FILE);
                ckpt::save_matcher(&m, &p)?;
                p
            }
            Target::Scorer => {
                let (model, log) = train_scorer_on(&kg, &cfg).map_err(eval_err)?;
                eprintln!(
                    "scorer: best epoch {} metric {:.4}",
                    log.best_epoch, log.best_metric
                );
                let p = path_for(ckpt::SCORER_FILE);
                ckpt::save(
                    &Checkpoint::Scorer {
                        train: cfg.scorer.clone(),
                        entities: kg.entities().names().to_vec(),
                        relations: kg.relations().names().to_vec(),
                        model,
                    },
                    &p,
                )?;
                p
            }
            Target::All => unreachable!("expanded above"),
        };
        eprintln!("wrote {}", out.display());
    }
    let dir = if dir_mode {
        a.out.as_path()
    } else {
        a.out.parent().unwrap_or(Path::new("."))
    };
    let data = std::fs::canonicalize(&a.data).map_err(|e| Error::io(&a.data, e))?;
    write_atomic(&dir.join(ckpt::DATA_POINTER_FILE), |w| {
        writeln!(w, "{}", data.display())
    })
}

/// KG, models and items loaded consistently for `answer` and `eval`.
struct Session {
    kg: KnowledgeGraph,
    models: Models,
    items: facttree_core::datagen::Dataset,
    cfg: ReasonerConfig,
}

fn open_session(r: &RunArgs) -> Result<Session> {
    if !(r.lambda.is_finite() && r.lambda >= 1.0) {
        return Err(Error::config("--lambda must be at least 1"));
    }
    let ModelDir { models, symbols } = ckpt::load_models(&r.models)?;
    let data = match &r.data {
        Some(d) => d.clone(),
        None => {
            let p = r.models.join(ckpt::DATA_POINTER_FILE);
            let s = std::fs::read_to_string(&p).map_err(|_| {
                Error::config("no --data given and the models directory records no dataset")
            })?;
            PathBuf::from(s.trim())
        }
    };
    let raw = read_dataset(&data)?;
    let n_sym = symbols.as_ref().map(|(e, r)| (e.len(), r.len()));
    let kg = load_kg_for(&r.kg, symbols, Some(&raw))?;
    if let Some((ne, nr)) = n_sym {
        let covered = kg
            .facts()
            .iter()
            .all(|f| f.entities().all(|e| e.index() < ne) && f.relations().all(|p| p.index() < nr));
        if !covered && !r.oracle.gold_intra {
            return Err(Error::config(
                "the scorer was trained on a KG that does not cover this one",
            ));
        }
    }
    let items = raw.resolve(&kg)?;
    let cfg = ReasonerConfig {
        lambda: r.lambda,
        scope: match r.scope {
            Scope::All => CandidateScope::All,
            Scope::Role => CandidateScope::RoleRestricted,
        },
        ..ReasonerConfig::default()
    };
    Ok(Session {
        kg,
        models,
        items,
        cfg,
    })
}

#[derive(Serialize)]
struct CandidateOut {
    entity: String,
    raw: f64,
    amplified: f64,
}

#[derive(Serialize)]
#[serde(tag = "step", rename_all = "lowercase")]
enum StepOut {
    Intra {
        fact: usize,
        upper_relation: Option<String>,
        chosen: CandidateOut,
        top: Vec<CandidateOut>,
    },
    Transfer {
        child: usize,
        parent: usize,
        entity: String,
        from_gold: bool,
    },
}

fn step_out(kg: &KnowledgeGraph, s: &TraceStep) -> StepOut {
    let cand = |c: &facttree_core::reason::Candidate| CandidateOut {
        entity: kg.entity_name(c.entity).to_string(),
        raw: c.raw,
        amplified: c.amplified,
    };
    match s {
        TraceStep::Intra {
            fact,
            upper_rel,
            chosen,
            top,
        } => StepOut::Intra {
            fact: *fact,
            upper_relation: upper_rel.map(|r| kg.relation_name(r).to_string()),
            chosen: cand(chosen),
            top: top.iter().map(cand).collect(),
        },
        TraceStep::Transfer {
            child,
            parent,
            entity,
            from_gold,
        } => StepOut::Transfer {
            child: *child,
            parent: *parent,
            entity: kg.entity_name(*entity).to_string(),
            from_gold: *from_gold,
        },
    }
}

#[derive(Serialize)]
struct AnswerOut {
    id: String,
    question: String,
    oracle: String,
    gold: String,
    prediction: Option<String>,
    correct: bool,
    failure: Option<facttree_core::eval::Stage>,
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nl_tree: Option<crate::dataset::NlNodeJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kg_tree: Option<crate::dataset::KgNodeJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<Vec<StepOut>>,
}

fn answer_one(id: &str, r: &RunArgs, trace: bool) -> Result<()> {
    let s = open_session(r)?;
    let item: &QaItem = s
        .items
        .items
        .iter()
        .find(|it| it.id == id)
        .ok_or_else(|| Error::config(format!("no item with id {id}")))?;
    let res = answer(item, &s.models, &s.kg, r.oracle, &s.cfg);
    let gold = s.kg.entity_name(item.answer).to_string();
    let base = AnswerOut {
        id: item.id.clone(),
        question: item.question.clone(),
        oracle: r.oracle.label(),
        gold,
        prediction: None,
        correct: false,
        failure: None,
        error: None,
        nl_tree: None,
        kg_tree: None,
        trace: None,
    };
    let (out, failed) = match res {
        Ok(a) => {
            let correct = a.prediction == item.answer;
            let out = AnswerOut {
                prediction: Some(s.kg.entity_name(a.prediction).to_string()),
                correct,
                failure: (!correct).then(|| attribute_failure(item, &a, &s.kg)),
                nl_tree: trace
                    .then(|| a.nl_tree.as_ref().map(|t| nl_to_json(&t.root)))
                    .flatten(),
                kg_tree: trace.then(|| kg_to_json(&a.kg_tree.root, &s.kg)),
                trace: trace.then(|| a.trace.steps.iter().map(|st| step_out(&s.kg, st)).collect()),
                ..base
            };
            (out, false)
        }
        Err(EvalError::StageFailed { stage, msg }) => (
            AnswerOut {
                failure: Some(stage),
                error: Some(msg),
                ..base
            },
            true,
        ),
        Err(e) => return Err(eval_err(e)),
    };
    emit(&serde_json::to_string_pretty(&out).expect("answer serializes"))?;
    if failed {
        return Err(Error::data(format!("item {id} could not be answered")));
    }
    Ok(())
}

fn eval_split(split: &str, r: &RunArgs, report: Option<&str>, traces: bool) -> Result<()> {
    let s = open_session(r)?;
    let items = s
        .items
        .split(split)
        .ok_or_else(|| Error::config(format!("unknown split `{split}`")))?;
    let rep =
        evaluate(&items, &s.models, &s.kg, r.oracle, &s.cfg, r.seed, traces).map_err(eval_err)?;
    let json = serde_json::to_string_pretty(&rep).expect("report serializes");
    match report {
        Some("-") => emit(&json)?,
        Some(p) => {
            write_atomic(Path::new(p), |w| writeln!(w, "{json}"))?;
        }
        None => {}
    }
    let subsets: Vec<String> = rep
        .subsets
        .iter()
        .map(|(k, v)| format!("{k} {:.4} ({})", v.accuracy, v.n))
        .collect();
    eprintln!(
        "{split} [{}]: accuracy {:.4} over {} items; {}; {} errored",
        r.oracle.label(),
        rep.accuracy,
        rep.n_items,
        subsets.join(", "),
        rep.errored
    );
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenKg { config, out } => {
            let cfg = match config {
                Some(p) => kg_config_from_json(&read_to_string(&p)?)?,
                None => KgGenConfig::desk(),
            };
            let kg = generate_kg(&cfg).map_err(Error::config)?;
            save_kg(&kg, &out)?;
            eprintln!("{}", kg.stats());
            Ok(())
        }
        Command::GenData {
            kg,
            templates,
            n,
            seed,
            synonym_rate,
            out,
        } => {
            if n == 0 {
                return Err(Error::config("--n must be positive"));
            }
            if !(0.0..=1.0).contains(&synonym_rate) {
                return Err(Error::config("--synonym-rate must lie in [0, 1]"));
            }
            let set = load_templates(templates.as_deref())?;
            let g = load_kg(&kg)?;
            let cfg = DatasetConfig {
                synonym_rate,
                ..DatasetConfig::new(n, seed)
            };
            let ds = generate_dataset(&g, &set, &cfg).map_err(|e| match e {
                facttree_core::datagen::DataGenError::Template { .. }
                | facttree_core::datagen::DataGenError::NoTemplates
                | facttree_core::datagen::DataGenError::RoleMismatch { .. } => Error::config(e),
                _ => Error::data(e),
            })?;
            let m = GenManifest::describe(&ds, seed, synonym_rate, set.templates.len());
            save_dataset(&ds, &g, &m, &out)?;
            eprintln!(
                "wrote {} items (train {}, valid {}, test {}) to {}",
                ds.items.len(),
                ds.splits.train.len(),
                ds.splits.valid.len(),
                ds.splits.test.len(),
                out.display()
            );
            Ok(())
        }
        Command::CorruptKg {
            kg,
            fraction,
            seed,
            out,
        } => {
            if !(0.0..1.0).contains(&fraction) {
                return Err(Error::config("--fraction must lie in [0, 1)"));
            }
            let g = load_kg(&kg)?;
            let c = corrupt_kg(&g, fraction, seed).map_err(Error::config)?;
            save_kg(&c, &out)?;
            eprintln!("kept {} of {} facts", c.facts().len(), g.facts().len());
            Ok(())
        }
        Command::Train(a) => train(&a),
        Command::Answer { item, run, trace } => answer_one(&item, &run, trace),
        Command::Eval {
            split,
            run,
            report,
            traces,
        } => eval_split(&split, &run, report.as_deref(), traces),
    }
}
