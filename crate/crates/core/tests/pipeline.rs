use fedsem_core::config::ExperimentConfig;
use fedsem_core::{io, pipeline};

fn cfg(dataset: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{
            "seed": 17,
            "dataset": {dataset},
            "clustering": {{"n_clusters": 4}},
            "partition": {{"strategy": {{"kind": "dirichlet", "alpha": [1.0]}}, "n_clients": 8}},
            "federation": {{"clients_per_round": 4, "total_rounds": 3}},
            "aggregator": {{"kind": "fedavgm", "beta": 0.9}}
        }}"#
    ))
    .unwrap()
}

const GENERATED: &str =
    r#"{"source": "generator", "n_true_clusters": 4, "samples_per_cluster": 80, "separation": 0.05}"#;

#[test]
fn generated_clusters_are_recovered() {
    let cfg = cfg(GENERATED);
    let data = pipeline::prepare_data(&cfg).unwrap();
    let clustering = pipeline::cluster(&cfg, &data).unwrap();
    let summary = clustering.summary(data.truth.as_ref()).unwrap();
    assert!(summary.ari.unwrap() > 0.95, "{summary:?}");
    assert_eq!(summary.sizes.iter().sum::<usize>(), data.train.len());
}

#[test]
fn artifacts_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cfg(GENERATED);
    let data = pipeline::prepare_data(&cfg).unwrap();
    let clustering = pipeline::cluster(&cfg, &data).unwrap();
    let (_, plan) = pipeline::partition(&cfg, &clustering.assignment).unwrap();
    let outcome = pipeline::simulate(&cfg, &data, &plan, false).unwrap();

    let p = |name: &str| dir.path().join(name);
    io::write_assignment(&p("assignment.jsonl"), &clustering.assignment).unwrap();
    io::write_plan(&p("plan.json"), &plan).unwrap();
    io::write_history(&p("history.jsonl"), &outcome.history).unwrap();
    io::write_params(&p("params.bin"), &outcome.state.global).unwrap();
    assert_eq!(io::load_assignment(&p("assignment.jsonl"), Some(4)).unwrap(), clustering.assignment);
    assert_eq!(io::load_plan(&p("plan.json")).unwrap(), plan);
    assert_eq!(io::load_history(&p("history.jsonl")).unwrap(), outcome.history);
    assert_eq!(io::load_params(&p("params.bin")).unwrap(), outcome.state.global);
}

#[test]
fn annotation_files_feed_the_same_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = pipeline::prepare_data(&cfg(GENERATED)).unwrap();
    let (train, test) = (dir.path().join("train.jsonl"), dir.path().join("test.jsonl"));
    io::write_annotations(&train, &data.train).unwrap();
    io::write_annotations(&test, &data.test).unwrap();

    let files = cfg(&format!(
        r#"{{"source": "files", "annotations": "{}", "test_annotations": "{}", "dims": [13, 13, 7]}}"#,
        train.display(),
        test.display()
    ));
    let loaded = pipeline::prepare_data(&files).unwrap();
    assert_eq!(loaded.train, data.train);
    assert_eq!(loaded.test, data.test);
    let clustering = pipeline::cluster(&files, &loaded).unwrap();
    let (_, plan) = pipeline::partition(&files, &clustering.assignment).unwrap();
    let outcome = pipeline::simulate(&files, &loaded, &plan, false).unwrap();
    assert_eq!(outcome.history.records.len(), 3);
}
