//! Runs every example through its `run_example` entry point.

#[allow(dead_code)]
#[path = "../examples/ablation.rs"]
mod ablation;
#[allow(dead_code)]
#[path = "../examples/augment_preview.rs"]
mod augment_preview;
#[allow(dead_code)]
#[path = "../examples/http_service.rs"]
mod http_service;
#[allow(dead_code)]
#[path = "../examples/mc_uncertainty.rs"]
mod mc_uncertainty;
#[allow(dead_code)]
#[path = "../examples/metrics.rs"]
mod metrics;
#[allow(dead_code)]
#[path = "../examples/synthetic_corpus.rs"]
mod synthetic_corpus;
#[allow(dead_code)]
#[path = "../examples/train_small.rs"]
mod train_small;

#[test]
fn synthetic_corpus_example() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synthetic_corpus::run_example(dir.path()).unwrap();
    assert_eq!(manifest.num_classes(), 3);
    assert_eq!(manifest.positive_test_items.len(), 9);
    assert_eq!(manifest.negative_test_items.len(), 4);
}

#[test]
fn augment_preview_example() {
    let dir = tempfile::tempdir().unwrap();
    let written = augment_preview::run_example(dir.path()).unwrap();
    assert_eq!(written.len(), 12);
    assert!(written.iter().all(|p| p.is_file()));
}

#[test]
fn train_small_example() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = train_small::run_example(dir.path()).unwrap();
    assert_eq!(outcome.trace.len(), 40);
    assert!(outcome.trace.iter().all(|r| r.loss.is_finite()));
    assert!(dir.path().join("small.ckpt").is_file());
    assert!(dir.path().join("trace.csv").is_file());
}

#[test]
fn mc_uncertainty_example() {
    let (hand, result) = mc_uncertainty::run_example().unwrap();
    assert_eq!(hand.variance_diag, vec![0.25, 0.25]);
    assert_eq!(result.samples_used, 30);
    assert!(result.uncertainty > 0.0);
    assert!((result.mean.iter().sum::<f64>() - 1.0).abs() < 1e-6);
}

#[test]
fn metrics_example() {
    let report = metrics::run_example().unwrap();
    assert_eq!(report.accuracy, 0.75);
    assert_eq!(report.f1_macro, 11.0 / 15.0);
}

#[test]
fn ablation_example() {
    let dir = tempfile::tempdir().unwrap();
    let rows = ablation::run_example(dir.path()).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(names, ["None", "P/R"]);
}

#[test]
fn http_service_example() {
    let dir = tempfile::tempdir().unwrap();
    let (health, response, garbage) = http_service::run_example(dir.path()).unwrap();
    assert_eq!(health["status"], "ok");
    assert_eq!(health["model_id"], response.model_id.as_str());
    assert_eq!(response.mc_samples, 50);
    assert_eq!(garbage, 400);
}
