use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mgrb_core::data::generate_synthetic;
use mgrb_core::experiment::{
    discover_runs, load_run, per_class_diff, render_grid, render_run, run, run_and_write, CsvSource, DatasetSource,
    ExperimentConfig,
};
use mgrb_core::hierarchy::{build_semantic_hierarchy, EmbeddingTable, HierarchySource};
use mgrb_core::memory::ExemplarMemory;
use mgrb_core::network::Checkpoint;
use mgrb_core::trainer::AblationFlags;
use mgrb_core::{ClassId, Rng};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn quick(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.train.epochs = 6;
    c.train.lr_decay_epochs = vec![4];
    c.output_dir = dir.to_path_buf();
    c
}

#[test]
fn reference_run_writes_phase_records() {
    let tmp = tempfile::tempdir().unwrap();
    let config = ExperimentConfig { output_dir: tmp.path().to_path_buf(), ..Default::default() };
    let start = Instant::now();
    let artifacts = run_and_write(&config).unwrap();
    assert!(start.elapsed() < Duration::from_secs(300));
    assert_eq!(artifacts.reports.len(), 3);
    let records = std::fs::read_to_string(tmp.path().join("phase_records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 3);
    for f in ["phase_metrics.csv", "confusion_phase0.csv", "confusion_phase2.csv", "summary.json", "resolved_config.toml"] {
        assert!(tmp.path().join(f).is_file(), "{f} missing");
    }
    let metrics = std::fs::read_to_string(tmp.path().join("phase_metrics.csv")).unwrap();
    assert!(metrics.contains("# seed = 1993"));
    let loaded = load_run(tmp.path()).unwrap();
    let mean = loaded.reports.iter().map(|r| r.accuracy()).sum::<f64>() / 3.0;
    assert!((mean - loaded.summary.average_incremental_accuracy).abs() <= 1e-9);
}

#[test]
fn confusion_rows_match_test_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run(&quick(tmp.path())).unwrap();
    for r in &a.reports {
        assert!(r.evaluation.test_counts().iter().all(|&n| n == 100));
        assert_eq!(r.evaluation.confusion.len(), r.n_old + r.n_new);
    }
}

#[test]
fn checkpoints_reload() {
    let tmp = tempfile::tempdir().unwrap();
    run_and_write(&quick(tmp.path())).unwrap();
    let cp = Checkpoint::load(&tmp.path().join("checkpoints/phase2.json")).unwrap();
    assert_eq!(cp.num_classes, 12);
    assert_eq!(cp.class_order.len(), 12);
    let mem = ExemplarMemory::load(&tmp.path().join("checkpoints/memory_phase2.json")).unwrap();
    assert_eq!(mem.classes().len(), 12);
    assert_eq!(mem.total(), 12 * 20);
}

#[test]
fn reports_and_diffs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = quick(&tmp.path().join("a"));
    let mut b = a.clone();
    b.output_dir = tmp.path().join("b");
    run_and_write(&a).unwrap();
    run_and_write(&b).unwrap();
    let (ra, rb) = (load_run(&a.output_dir).unwrap(), load_run(&b.output_dir).unwrap());

    let table = render_run(&ra);
    assert_eq!(table.lines().filter(|l| l.starts_with("Avg")).count(), 1);
    assert_eq!(table.lines().count(), 2 + 3 + 1 + 1);

    let diff = per_class_diff(&ra, &rb).unwrap();
    let deltas: Vec<f64> = diff.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(deltas.len(), 6 + 9 + 12);
    assert!(deltas.iter().all(|&d| d == 0.0));

    let mut other = quick(&tmp.path().join("c"));
    other.seed = 7;
    run_and_write(&other).unwrap();
    let rc = load_run(&other.output_dir).unwrap();
    assert!(per_class_diff(&ra, &rc).is_err());

    let runs = discover_runs(tmp.path()).unwrap();
    assert_eq!(runs.len(), 3);
    let grid = render_grid(&runs.iter().map(|r| r.summary.clone()).collect::<Vec<_>>()).unwrap();
    let header = grid.lines().next().unwrap();
    for col in ["Variation", "CE", "CB", "KD", "MG", "Decoupling", "init", "9", "12", "Avg acc"] {
        assert!(header.contains(col), "{header}");
    }
}

#[test]
fn tampered_summary_is_detected() {
    let tmp = tempfile::tempdir().unwrap();
    run_and_write(&quick(tmp.path())).unwrap();
    let path = tmp.path().join("summary.json");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut json: serde_json::Value = serde_json::from_str(&text).unwrap();
    json["average_incremental_accuracy"] = serde_json::json!(0.123);
    std::fs::write(&path, json.to_string()).unwrap();
    assert!(load_run(tmp.path()).is_err());
}

#[test]
fn csv_source_runs_every_hierarchy_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let base = ExperimentConfig::default();
    let DatasetSource::Synthetic(spec) = &base.dataset else { unreachable!() };
    let data = generate_synthetic(spec).unwrap().dataset;
    data.write_csv(&tmp.path().join("data.csv")).unwrap();
    std::fs::write(tmp.path().join("ontology.txt"), data.ontology.as_ref().unwrap().to_text()).unwrap();
    std::fs::write(tmp.path().join("embeddings.txt"), data.embeddings.as_ref().unwrap().to_text()).unwrap();
    std::fs::write(tmp.path().join("schema.toml"), "label_column = \"label\"\nsplit_column = \"split\"\n").unwrap();
    for mode in [HierarchySource::Ontology, HierarchySource::Semantic, HierarchySource::Visual] {
        let mut c = quick(&tmp.path().join(mode.to_string()));
        c.dataset = DatasetSource::Csv(CsvSource {
            train: tmp.path().join("data.csv"),
            test: None,
            schema: tmp.path().join("schema.toml"),
            ontology: Some(tmp.path().join("ontology.txt")),
            embeddings: Some(tmp.path().join("embeddings.txt")),
        });
        c.ablation = AblationFlags::variant("MGRB", mode).unwrap();
        let a = run(&c).unwrap();
        assert_eq!(a.reports.len(), 3);
        assert!(a.reports.iter().all(|r| r.hierarchy_groups.is_some()));
    }
}

#[test]
fn missing_ontology_is_a_phase_error() {
    let tmp = tempfile::tempdir().unwrap();
    let base = quick(tmp.path());
    let DatasetSource::Synthetic(spec) = &base.dataset else { unreachable!() };
    let data = generate_synthetic(spec).unwrap().dataset;
    data.write_csv(&tmp.path().join("data.csv")).unwrap();
    std::fs::write(tmp.path().join("schema.toml"), "label_column = \"label\"\nsplit_column = \"split\"\n").unwrap();
    let mut c = base.clone();
    c.dataset = DatasetSource::Csv(CsvSource {
        train: tmp.path().join("data.csv"),
        test: None,
        schema: tmp.path().join("schema.toml"),
        ontology: None,
        embeddings: None,
    });
    let err = run(&c).unwrap_err().to_string();
    assert!(err.starts_with("phase 0:") && err.contains("ontology"), "{err}");
}

#[test]
fn toy_embeddings_split_animals_from_vehicles() {
    let table = EmbeddingTable::load(&fixture("cifar10_toy.vec")).unwrap();
    let names = ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"];
    let labels: Vec<(ClassId, String)> = names.iter().enumerate().map(|(i, n)| (ClassId(i), n.to_string())).collect();
    for seed in 0..10 {
        let h = build_semantic_hierarchy(&labels, &table, 2, &mut Rng::new(seed)).unwrap();
        let vehicles = [0, 1, 8, 9];
        for i in 0..10 {
            for j in 0..10 {
                let same = vehicles.contains(&i) == vehicles.contains(&j);
                let d = h.lcs_distance(ClassId(i), ClassId(j)).unwrap();
                let expected = if i == j { 0.0 } else if same { 0.5 } else { 1.0 };
                assert_eq!(d, expected, "{} vs {}", names[i], names[j]);
            }
        }
    }
}
