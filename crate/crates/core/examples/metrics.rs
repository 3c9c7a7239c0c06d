//! Accuracy, macro F1, one-vs-rest AUC and the confusion CSV on small
//! hand-checkable inputs.
//!
//! `cargo run --example metrics`

use capture_oneshot::eval::{confusion_to_csv, roc_auc, EvalReport};
use capture_oneshot::Result;

pub fn run_example() -> Result<EvalReport> {
    let classes = vec!["a".to_string(), "b".to_string()];
    let labels = [0, 0, 1, 1];
    let probs = vec![vec![0.8, 0.2], vec![0.4, 0.6], vec![0.3, 0.7], vec![0.1, 0.9]];
    let report = EvalReport::from_probabilities(&classes, &labels, &probs)?;
    println!("{}", report.to_json()?);
    println!("{}", confusion_to_csv(&report));
    println!("auc of {{0.9, 0.4}} over {{0.8, 0.1}}: {:?}", roc_auc(&[0.9, 0.4], &[0.8, 0.1]));
    Ok(report)
}

fn main() -> Result<()> {
    run_example()?;
    Ok(())
}
