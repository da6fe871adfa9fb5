//! Versioned JSON checkpoints and the models directory.

use std::path::Path;

use facttree_core::construct::{ContextRange, GcnClassifier};
use facttree_core::eval::Models;
use facttree_core::locate::{CrfLabeler, RelationMatcher};
use facttree_core::numkit::Tensor;
use facttree_core::reason::FactScorer;
use facttree_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kgio::{load_table, open, save_table, write_atomic};

pub const FORMAT_VERSION: u32 = 1;

pub const CLASSIFIER_FILE: &str = "classifier.json";
pub const LABELER_FILE: &str = "labeler.json";
pub const SCORER_FILE: &str = "scorer.json";
pub const MATCHER_FILE: &str = "matcher.tsv";
/// Written by `train` so later commands can find the dataset.
pub const DATA_POINTER_FILE: &str = "dataset.txt";

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Checkpoint {
    Classifier {
        range: ContextRange,
        train: TrainConfig,
        model: GcnClassifier,
    },
    Labeler {
        train: TrainConfig,
        model: CrfLabeler,
    },
    /// Entity and relation names fix the id order the embeddings were
    /// trained under.
    Scorer {
        train: TrainConfig,
        entities: Vec<String>,
        relations: Vec<String>,
        model: FactScorer,
    },
}

impl Checkpoint {
    pub fn kind(&self) -> &'static str {
        match self {
            Checkpoint::Classifier { .. } => "classifier",
            Checkpoint::Labeler { .. } => "labeler",
            Checkpoint::Scorer { .. } => "scorer",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format_version: u32,
    #[serde(flatten)]
    body: Checkpoint,
}

fn same_shapes(got: &[Tensor], want: &[Tensor]) -> bool {
    got.len() == want.len() && got.iter().zip(want).all(|(a, b)| a.shape() == b.shape())
}

fn unique(names: &[String]) -> bool {
    let mut s: Vec<&String> = names.iter().collect();
    s.sort();
    s.windows(2).all(|w| w[0] != w[1])
}

/// Structural checks a deserialized model must pass before use.
pub fn validate(c: Checkpoint) -> Result<Checkpoint, String> {
    match c {
        Checkpoint::Classifier {
            range,
            train,
            model,
        } => {
            let fresh = GcnClassifier::new(
                model.vocab.iter().map(String::as_str),
                model.dim,
                model.layers,
                0,
            );
            if fresh.vocab != model.vocab || !same_shapes(&model.params, &fresh.params) {
                return Err("classifier parameters do not match its vocabulary and sizes".into());
            }
            if !model.is_finite() {
                return Err("classifier has non-finite parameters".into());
            }
            Ok(Checkpoint::Classifier {
                range,
                train,
                model,
            })
        }
        Checkpoint::Labeler { train, model } => {
            let fresh = CrfLabeler::new(
                model.vocab.iter().map(String::as_str),
                model.dim,
                model.hidden,
                0,
            );
            if fresh.vocab != model.vocab || !same_shapes(&model.params, &fresh.params) {
                return Err("labeler parameters do not match its vocabulary and sizes".into());
            }
            if !model.is_finite() {
                return Err("labeler has non-finite parameters".into());
            }
            Ok(Checkpoint::Labeler { train, model })
        }
        Checkpoint::Scorer {
            train,
            entities,
            relations,
            model,
        } => {
            if !unique(&entities) || !unique(&relations) {
                return Err("scorer vocabulary has duplicate names".into());
            }
            if !(0.0..=1.0).contains(&model.mix) {
                return Err(format!("scorer mix {} outside [0, 1]", model.mix));
            }
            let fresh = FactScorer::new(entities.len(), relations.len(), model.dim, model.mix, 0);
            if !same_shapes(&model.params, &fresh.params) {
                return Err("scorer parameters do not match its vocabulary and sizes".into());
            }
            if !model.params.iter().all(Tensor::is_finite) {
                return Err("scorer has non-finite parameters".into());
            }
            let model = FactScorer::from_params(model.dim, model.mix, model.params);
            Ok(Checkpoint::Scorer {
                train,
                entities,
                relations,
                model,
            })
        }
    }
}

pub fn to_json(c: &Checkpoint) -> String {
    let env = Envelope {
        format_version: FORMAT_VERSION,
        body: c.clone(),
    };
    serde_json::to_string(&env).expect("checkpoints serialize")
}

pub fn from_json(s: &str) -> Result<Checkpoint, String> {
    #[derive(Deserialize)]
    struct Version {
        format_version: u32,
    }
    let v: Version = serde_json::from_str(s).map_err(|e| e.to_string())?;
    if v.format_version != FORMAT_VERSION {
        return Err(format!(
            "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
            v.format_version
        ));
    }
    let env: Envelope = serde_json::from_str(s).map_err(|e| e.to_string())?;
    validate(env.body)
}

pub fn save(c: &Checkpoint, path: &Path) -> Result<()> {
    let s = to_json(c);
    write_atomic(path, |w| w.write_all(s.as_bytes()))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut s = String::new();
    std::io::Read::read_to_string(&mut open(path)?, &mut s).map_err(|e| Error::io(path, e))?;
    from_json(&s).map_err(|e| Error::parse(path, 1, e))
}

fn load_kind(path: &Path, kind: &str) -> Result<Option<Checkpoint>> {
    if !path.exists() {
        return Ok(None);
    }
    let c = load(path)?;
    if c.kind() != kind {
        return Err(Error::data(format!(
            "{}: holds a {} checkpoint, expected {kind}",
            path.display(),
            c.kind()
        )));
    }
    Ok(Some(c))
}

/// Everything found in a models directory. Absent files stay `None` so that
/// oracle runs need only the models they use.
#[derive(Debug, Clone, Default)]
pub struct ModelDir {
    pub models: Models,
    /// Entity and relation order of the scorer, when there is one.
    pub symbols: Option<(Vec<String>, Vec<String>)>,
}

pub fn load_models(dir: &Path) -> Result<ModelDir> {
    if !dir.is_dir() {
        return Err(Error::config(format!(
            "models directory {} does not exist",
            dir.display()
        )));
    }
    let mut out = ModelDir::default();
    if let Some(Checkpoint::Classifier { range, model, .. }) =
        load_kind(&dir.join(CLASSIFIER_FILE), "classifier")?
    {
        out.models.range = range;
        out.models.classifier = Some(model);
    }
    if let Some(Checkpoint::Labeler { model, .. }) = load_kind(&dir.join(LABELER_FILE), "labeler")?
    {
        out.models.labeler = Some(model);
    }
    if let Some(Checkpoint::Scorer {
        entities,
        relations,
        model,
        ..
    }) = load_kind(&dir.join(SCORER_FILE), "scorer")?
    {
        out.models.scorer = Some(model);
        out.symbols = Some((entities, relations));
    }
    let m = dir.join(MATCHER_FILE);
    if m.exists() {
        out.models.matcher = Some(RelationMatcher::new(load_table(&m)?));
    }
    Ok(out)
}

pub fn save_matcher(m: &RelationMatcher, path: &Path) -> Result<()> {
    save_table(&m.table, path)
}
