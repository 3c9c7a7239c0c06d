//! Trains a reduced network with concrete dropout on a three-class corpus,
//! then saves the checkpoint and the loss trace.
//!
//! `cargo run --release --example train_small -- [OUT_DIR]`

use std::path::{Path, PathBuf};

use capture_oneshot::augment::AugmentConfig;
use capture_oneshot::dataset::{generate_synthetic_corpus, SynthOptions};
use capture_oneshot::model::{concrete_keep_probability, load_checkpoint, save_checkpoint, DropoutMode, ModelConfig};
use capture_oneshot::train::{train, write_trace_csv, TrainConfig, TrainOutcome};
use capture_oneshot::Result;

pub fn run_example(out: &Path) -> Result<TrainOutcome> {
    let opts = SynthOptions {
        clean_side: 96,
        shot_side: 32,
        shots_per_class: 2,
        negatives: Some(2),
        ..SynthOptions::with_classes(3)
    };
    let manifest = generate_synthetic_corpus(&opts, out.join("corpus"), 3)?;
    let model_cfg = ModelConfig {
        input_side: 32,
        blocks: vec![vec![8], vec![8]],
        ..ModelConfig::new(3, DropoutMode::concrete())
    };
    let train_cfg = TrainConfig {
        steps: 40,
        batch_size: 4,
        learning_rate: 1e-3,
        seed: 5,
        eval_every: 10,
        ..TrainConfig::default()
    };
    let outcome = train(&manifest, &model_cfg, &train_cfg, &AugmentConfig::default())?;
    let ckpt_path = out.join("small.ckpt");
    save_checkpoint(&outcome.checkpoint, &ckpt_path)?;
    write_trace_csv(&outcome.trace, out.join("trace.csv"))?;
    let (_, model_id) = load_checkpoint(&ckpt_path)?;
    let first = outcome.trace.first().map_or(f64::NAN, |r| r.loss);
    let last = outcome.trace.last().map_or(f64::NAN, |r| r.loss);
    println!("loss {first:.4} -> {last:.4}, checkpoint {model_id}");
    for i in 0..model_cfg.num_convs() {
        let logit = outcome.checkpoint.params.dropout_param(&model_cfg, i).unwrap_or(f32::NAN);
        println!("site {i}: drop probability {:.4}", 1.0 - concrete_keep_probability(logit));
    }
    Ok(outcome)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("capture_oneshot_train"));
    run_example(&out)?;
    Ok(())
}
