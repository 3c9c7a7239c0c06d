//! Runs a two-row augmentation ablation with a reduced network and prints
//! the `method,accuracy,f1,auc` table.
//!
//! `cargo run --release --example ablation -- [OUT_DIR]`

use std::path::{Path, PathBuf};

use capture_oneshot::augment::{AugmentConfig, Technique};
use capture_oneshot::dataset::{generate_synthetic_corpus, SynthOptions};
use capture_oneshot::eval::{ablation_to_csv, run_ablation, AblationRow, AblationSpec};
use capture_oneshot::model::{DropoutMode, ModelConfig};
use capture_oneshot::train::TrainConfig;
use capture_oneshot::Result;

pub fn run_example(out: &Path) -> Result<Vec<AblationRow>> {
    let opts = SynthOptions {
        clean_side: 96,
        shot_side: 32,
        shots_per_class: 2,
        negatives: Some(2),
        ..SynthOptions::with_classes(3)
    };
    let manifest = generate_synthetic_corpus(&opts, out, 4)?;
    let model_cfg = ModelConfig {
        input_side: 32,
        blocks: vec![vec![8], vec![8]],
        ..ModelConfig::new(3, DropoutMode::None)
    };
    let train_cfg = TrainConfig {
        steps: 20,
        batch_size: 4,
        learning_rate: 1e-3,
        seed: 8,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let spec = AblationSpec::new([
        ("None".to_string(), vec![]),
        ("P/R".to_string(), vec![Technique::Perspective, Technique::Rotation]),
    ]);
    let rows = run_ablation(&manifest, &model_cfg, &train_cfg, &AugmentConfig::default(), &spec)?;
    print!("{}", ablation_to_csv(&rows));
    Ok(rows)
}

fn main() -> Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("capture_oneshot_ablation"));
    run_example(&out)?;
    Ok(())
}
