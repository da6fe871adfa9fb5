use std::io::Cursor;
use std::path::Path;

use facttree::ckpt::{self, Checkpoint};
use facttree::dataset::{load_kg_for, read_dataset, save_dataset, GenManifest, ItemRecord};
use facttree::kgio::{load_kg, read_kg_into, read_table, save_kg, write_kg_to, write_table_to};
use facttree::Error;
use facttree_core::construct::{ContextRange, GcnClassifier};
use facttree_core::datagen::{
    builtin_templates, generate_dataset, generate_kg, Dataset, DatasetConfig, KgGenConfig,
};
use facttree_core::kg::{KgBuilder, KnowledgeGraph};
use facttree_core::locate::{CrfLabeler, EmbeddingTable};
use facttree_core::reason::FactScorer;
use facttree_core::train::TrainConfig;
use proptest::prelude::*;

fn small_kg() -> KnowledgeGraph {
    generate_kg(&KgGenConfig {
        n_entities: 300,
        n_binary_rel: 15,
        n_nary_rel: 5,
        n_facts: 600,
        max_attrs: 2,
        seed: 5,
    })
    .unwrap()
}

fn small_dataset(kg: &KnowledgeGraph) -> Dataset {
    generate_dataset(kg, &builtin_templates(), &DatasetConfig::new(60, 9)).unwrap()
}

#[test]
fn kg_lines_keep_key_order_and_omit_empty_attrs() {
    let kg = small_kg();
    let mut buf = Vec::new();
    write_kg_to(&kg, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut saw_binary = false;
    let mut saw_nary = false;
    for line in text.lines() {
        assert!(line.starts_with("{\"s\":"), "{line}");
        let (ip, io) = (line.find("\"p\":").unwrap(), line.find("\"o\":").unwrap());
        assert!(ip < io);
        match line.find("\"attrs\":") {
            Some(ia) => {
                assert!(io < ia);
                saw_nary = true;
            }
            None => saw_binary = true,
        }
    }
    assert!(saw_binary && saw_nary);
}

#[test]
fn kg_file_round_trips() {
    let kg = small_kg();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("kg.jsonl");
    save_kg(&kg, &p).unwrap();
    let back = load_kg(&p).unwrap();
    assert_eq!(back.canonical_records(), kg.canonical_records());
}

#[test]
fn kg_errors_carry_line_numbers() {
    let text = "{\"s\":\"a\",\"p\":\"r\",\"o\":\"b\"}\n\n{\"s\":\"a\",\"p\":\"r\"}\n";
    let mut b = KgBuilder::new();
    let err = read_kg_into(Cursor::new(text), Path::new("x.jsonl"), &mut b).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    assert_eq!(err.exit_code(), 2);

    let dup = "{\"s\":\"a\",\"p\":\"r\",\"o\":\"b\",\"attrs\":[[\"t\",\"x\"],[\"t\",\"x\"]]}\n";
    let err = read_kg_into(Cursor::new(dup), Path::new("x"), &mut KgBuilder::new()).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }));
}

#[test]
fn table_rejects_duplicates_and_bad_rows() {
    let cases = [
        ("dim 2\na\t1 2\na\t3 4\n", 3),
        ("dim 2\na\t1 2 3\n", 2),
        ("dim 2\na 1 2\n", 2),
        ("dim 2\na\t1 nan\n", 2),
        ("dims 2\n", 1),
        ("dim 0\n", 1),
    ];
    for (text, line) in cases {
        let err = read_table(Cursor::new(text), Path::new("t.tsv")).unwrap_err();
        assert!(
            matches!(err, Error::Parse { line: l, .. } if l == line),
            "{text:?}: {err}"
        );
    }
    let t = read_table(
        Cursor::new("dim 3\nplace of birth\t0.5 -1 2e-3\n"),
        Path::new("t"),
    )
    .unwrap();
    assert_eq!(t.get("place of birth").unwrap(), &[0.5, -1.0, 2e-3]);
}

proptest! {
    #[test]
    fn table_round_trips_exactly(
        rows in prop::collection::btree_map("[a-z][a-z _]{0,12}", prop::collection::vec(-1e3f64..1e3, 4), 1..20)
    ) {
        let mut t = EmbeddingTable::new(4);
        for (k, v) in &rows {
            t.insert(k, v.clone()).unwrap();
        }
        let mut buf = Vec::new();
        write_table_to(&t, &mut buf).unwrap();
        let back = read_table(Cursor::new(buf), Path::new("t")).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn kg_lines_round_trip(
        facts in prop::collection::vec(
            ("[A-Z][a-z]{1,6}", "[a-z_]{1,8}", "[A-Z][a-z]{1,6}",
             prop::collection::btree_map("[a-z_]{1,6}", "[A-Z0-9][a-z0-9]{0,5}", 0..3)),
            1..30)
    ) {
        let mut b = KgBuilder::new();
        for (s, p, o, attrs) in &facts {
            let rec = facttree_core::kg::FactRecord {
                s: s.clone(), p: p.clone(), o: o.clone(),
                attrs: attrs.iter().map(|(a, v)| (a.clone(), v.clone())).collect(),
            };
            b.add_record(&rec).unwrap();
        }
        let kg = b.build();
        let mut buf = Vec::new();
        write_kg_to(&kg, &mut buf).unwrap();
        let mut b2 = KgBuilder::new();
        read_kg_into(Cursor::new(buf), Path::new("k"), &mut b2).unwrap();
        prop_assert_eq!(b2.build().canonical_records(), kg.canonical_records());
    }
}

#[test]
fn dataset_directory_round_trips_by_name() {
    let kg = small_kg();
    let ds = small_dataset(&kg);
    let dir = tempfile::tempdir().unwrap();
    let kg_path = dir.path().join("kg.jsonl");
    save_kg(&kg, &kg_path).unwrap();
    let m = GenManifest::describe(&ds, 9, 0.3, 34);
    save_dataset(&ds, &kg, &m, &dir.path().join("data")).unwrap();

    let raw = read_dataset(&dir.path().join("data")).unwrap();
    let kg2 = load_kg_for(&kg_path, None, Some(&raw)).unwrap();
    let back = raw.resolve(&kg2).unwrap();
    assert_eq!(back.splits, ds.splits);
    assert_eq!(back.items.len(), ds.items.len());
    for (a, b) in ds.items.iter().zip(&back.items) {
        assert_eq!(
            ItemRecord::from_item(a, &kg),
            ItemRecord::from_item(b, &kg2)
        );
        assert_eq!(a.gold_nl_tree, b.gold_nl_tree);
    }
}

#[test]
fn dataset_rejects_unknown_and_shared_split_ids() {
    let kg = small_kg();
    let ds = small_dataset(&kg);
    let dir = tempfile::tempdir().unwrap();
    let m = GenManifest::describe(&ds, 9, 0.3, 34);
    save_dataset(&ds, &kg, &m, dir.path()).unwrap();

    let test = dir.path().join("test.txt");
    let orig = std::fs::read_to_string(&test).unwrap();
    std::fs::write(&test, format!("{orig}q99999\n")).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Data(_))));

    let first_train = ds.splits.train[0].clone();
    std::fs::write(&test, format!("{orig}{first_train}\n")).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Data(_))));
}

#[test]
fn unresolvable_names_are_data_errors() {
    let kg = small_kg();
    let ds = small_dataset(&kg);
    let mut rec = ItemRecord::from_item(&ds.items[0], &kg);
    rec.answer = "Nobody At All".into();
    assert!(rec.to_item(&kg).unwrap_err().contains("Nobody At All"));
    let mut rec = ItemRecord::from_item(&ds.items[0], &kg);
    rec.n_facts += 1;
    assert!(rec.to_item(&kg).is_err());
}

fn checkpoints() -> Vec<Checkpoint> {
    let labels = ["NP", "VP", "IN"];
    vec![
        Checkpoint::Classifier {
            range: ContextRange::OFC,
            train: TrainConfig::classifier(),
            model: GcnClassifier::new(labels, 8, 3, 1),
        },
        Checkpoint::Labeler {
            train: TrainConfig::labeler(),
            model: CrfLabeler::new(labels, 6, 4, 2),
        },
        Checkpoint::Scorer {
            train: TrainConfig::scorer(),
            entities: vec!["a".into(), "b".into(), "c".into()],
            relations: vec!["r".into()],
            model: FactScorer::new(3, 1, 4, 0.5, 3),
        },
    ]
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    for c in checkpoints() {
        let back = ckpt::from_json(&ckpt::to_json(&c)).unwrap();
        assert_eq!(ckpt::to_json(&back), ckpt::to_json(&c), "{}", c.kind());
        let v: serde_json::Value = serde_json::from_str(&ckpt::to_json(&c)).unwrap();
        assert_eq!(v["format_version"], 1);
        assert_eq!(v["kind"], c.kind());
        assert!(v["model"]["params"][0]["shape"].is_array());
    }
}

#[test]
fn checkpoints_are_validated_on_load() {
    for c in checkpoints() {
        let mut v: serde_json::Value = serde_json::from_str(&ckpt::to_json(&c)).unwrap();
        let mut wrong_version = v.clone();
        wrong_version["format_version"] = 2.into();
        assert!(ckpt::from_json(&wrong_version.to_string())
            .unwrap_err()
            .contains("version"));

        // a tensor whose data no longer matches its declared shape
        let data = v["model"]["params"][1]["data"].as_array_mut().unwrap();
        data.pop();
        assert!(ckpt::from_json(&v.to_string()).is_err(), "{}", c.kind());
    }
    // consistent tensors that do not fit the declared sizes
    let Checkpoint::Classifier {
        range,
        train,
        mut model,
    } = checkpoints().remove(0)
    else {
        unreachable!()
    };
    model.layers = 2;
    let bad = Checkpoint::Classifier {
        range,
        train,
        model,
    };
    assert!(ckpt::from_json(&ckpt::to_json(&bad)).is_err());

    let Checkpoint::Scorer { train, model, .. } = checkpoints().remove(2) else {
        unreachable!()
    };
    let dup = Checkpoint::Scorer {
        train,
        entities: vec!["a".into(), "a".into(), "c".into()],
        relations: vec!["r".into()],
        model,
    };
    assert!(ckpt::from_json(&ckpt::to_json(&dup))
        .unwrap_err()
        .contains("duplicate"));
}

#[test]
fn models_directory_checks_checkpoint_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let cs = checkpoints();
    ckpt::save(&cs[1], &dir.path().join(ckpt::CLASSIFIER_FILE)).unwrap();
    let err = ckpt::load_models(dir.path()).unwrap_err();
    assert!(err.to_string().contains("expected classifier"));

    std::fs::remove_file(dir.path().join(ckpt::CLASSIFIER_FILE)).unwrap();
    ckpt::save(&cs[2], &dir.path().join(ckpt::SCORER_FILE)).unwrap();
    let md = ckpt::load_models(dir.path()).unwrap();
    assert!(md.models.scorer.is_some() && md.models.classifier.is_none());
    assert_eq!(md.symbols.unwrap().0, vec!["a", "b", "c"]);
}

#[test]
fn scorer_symbols_fix_ids_after_facts_are_dropped() {
    let kg = small_kg();
    let dir = tempfile::tempdir().unwrap();
    let corrupted = facttree_core::datagen::corrupt_kg(&kg, 0.5, 1).unwrap();
    let p = dir.path().join("c.jsonl");
    save_kg(&corrupted, &p).unwrap();
    let symbols = (
        kg.entities().names().to_vec(),
        kg.relations().names().to_vec(),
    );
    let back = load_kg_for(&p, Some(symbols), None).unwrap();
    assert_eq!(back.n_entities(), kg.n_entities());
    for name in kg.entities().names() {
        assert_eq!(back.entity_id(name), kg.entity_id(name));
    }
    assert_eq!(back.canonical_records(), corrupted.canonical_records());
}
