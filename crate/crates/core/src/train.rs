//! Optimization loop: class-weighted cross-entropy on freshly augmented
//! batches, Adam, optional global-norm clipping, periodic checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::dataset::{CorpusManifest, TrainingSet};
use crate::error::{Error, Result};
use crate::model::{backward, init_model, save_checkpoint, Checkpoint, DropoutMode, MaskRecord, ModelConfig, Parameters};
use crate::rng::{derive_seed, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub seed: u64,
    /// Write `step_NNNNNN.ckpt` every this many steps (0 disables).
    pub checkpoint_every: u64,
    /// Log a running summary every this many steps (0 disables).
    pub eval_every: u64,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_norm: Option<f32>,
    /// Directory for periodic checkpoints and `trace.csv`.
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5_000,
            batch_size: 32,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            checkpoint_every: 0,
            eval_every: 100,
            clip_norm: Some(10.0),
            output_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail(format!("learning rate must be > 0, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.epsilon > 0.0) {
            return fail("epsilon must be > 0".into());
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return fail("clip norm must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub loss: f64,
    pub train_acc: f64,
}

/// Parameters, Adam moments and step counter of one run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: Parameters,
    pub first_moment: Parameters,
    pub second_moment: Parameters,
    pub step: u64,
    pub seed: u64,
    pub history: Vec<TraceRow>,
}

impl TrainState {
    pub fn new(params: Parameters, seed: u64) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            params,
            step: 0,
            seed,
            history: Vec::new(),
        }
    }
}

/// One bias-corrected Adam update of every tensor, including dropout
/// parameters. Non-finite gradients abort with the offending tensor's name.
pub fn adam_step(state: &mut TrainState, grads: &Parameters, cfg: &TrainConfig) -> Result<()> {
    if let Some(layer) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient {
            layer: layer.to_string(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1 as f64, cfg.beta2 as f64);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = cfg.learning_rate as f64;
    let eps = cfg.epsilon as f64;
    let tensors = state
        .params
        .tensors
        .iter_mut()
        .zip(&mut state.first_moment.tensors)
        .zip(&mut state.second_moment.tensors)
        .zip(&grads.tensors);
    for (((p, m), v), g) in tensors {
        for (((w, m), v), &g) in p.data.iter_mut().zip(&mut m.data).zip(&mut v.data).zip(&g.data) {
            let g = g as f64;
            let mn = b1 * *m as f64 + (1.0 - b1) * g;
            let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Keeps learned dropout parameters inside their valid range.
pub fn project_dropout_params(params: &mut Parameters, cfg: &ModelConfig) {
    let (lo, hi) = match cfg.dropout {
        DropoutMode::Concrete { .. } => (-CONCRETE_LOGIT_LIMIT, CONCRETE_LOGIT_LIMIT),
        DropoutMode::Variational { alpha_max, .. } => (f32::MIN, alpha_max.ln()),
        _ => return,
    };
    for site in 0..cfg.num_convs() {
        if let Some(v) = params.dropout_param_mut(cfg, site) {
            *v = v.clamp(lo, hi);
        }
    }
}

/// Concrete logits are kept within ±15 so `p` stays strictly inside (0, 1)
/// at 32-bit precision.
pub const CONCRETE_LOGIT_LIMIT: f32 = 15.0;

fn batch_accuracy(logits: &[f32], k: usize, labels: &[usize]) -> f64 {
    let correct = logits
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    correct as f64 / labels.len() as f64
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
}

/// Called after every step with the state and the row just recorded.
pub type StepHook<'a> = dyn FnMut(&TrainState, &TraceRow) + 'a;

/// Trains a fresh model on the manifest's training split.
pub fn train(
    manifest: &CorpusManifest,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    augment_cfg: &AugmentConfig,
) -> Result<TrainOutcome> {
    if manifest.num_classes() < 2 {
        return Err(Error::Config(format!(
            "training needs at least 2 classes, corpus has {}",
            manifest.num_classes()
        )));
    }
    let set = TrainingSet::load(manifest)?;
    train_on_set(&set, &manifest.classes, model_cfg, train_cfg, augment_cfg, None)
}

/// Training loop over an already loaded set.
pub fn train_on_set(
    set: &TrainingSet,
    classes: &[String],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    augment_cfg: &AugmentConfig,
    mut hook: Option<&mut StepHook>,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    augment_cfg.validate()?;
    if set.num_classes() < 2 || model_cfg.num_classes != set.num_classes() || classes.len() != set.num_classes() {
        return Err(Error::Config(format!(
            "model has {} classes, training set {} ({} names); need matching counts of at least 2",
            model_cfg.num_classes,
            set.num_classes(),
            classes.len()
        )));
    }
    let params = init_model(model_cfg, train_cfg.seed)?;
    let mut state = TrainState::new(params, train_cfg.seed);
    if let Some(dir) = &train_cfg.output_dir {
        fs::create_dir_all(dir)?;
    }
    let side = model_cfg.input_side;
    while state.step < train_cfg.steps {
        let step = state.step;
        let batch = set.make_batch(augment_cfg, side, train_cfg.seed, step, train_cfg.batch_size)?;
        let noise_seed = derive_seed(train_cfg.seed, stream::TRAIN_NOISE, step);
        let record = MaskRecord::new(&batch.images, true, noise_seed);
        let (loss, logits, mut grads) = backward(
            &state.params,
            model_cfg,
            &batch.images,
            &batch.labels,
            &batch.weights,
            &record,
        )?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        if let Some(limit) = train_cfg.clip_norm {
            let norm = grads.global_norm();
            if norm > limit as f64 {
                grads.scale((limit as f64 / norm) as f32);
            }
        }
        adam_step(&mut state, &grads, train_cfg)?;
        project_dropout_params(&mut state.params, model_cfg);
        let row = TraceRow {
            step: state.step,
            loss,
            train_acc: batch_accuracy(&logits, model_cfg.num_classes, &batch.labels),
        };
        state.history.push(row.clone());
        if let Some(h) = hook.as_deref_mut() {
            h(&state, &row);
        }
        if train_cfg.eval_every > 0 && state.step % train_cfg.eval_every == 0 {
            let window = &state.history[state.history.len().saturating_sub(train_cfg.eval_every as usize)..];
            let n = window.len() as f64;
            info!(
                "step {}/{}: loss {:.4}, batch accuracy {:.3}",
                state.step,
                train_cfg.steps,
                window.iter().map(|r| r.loss).sum::<f64>() / n,
                window.iter().map(|r| r.train_acc).sum::<f64>() / n
            );
        }
        if let Some(dir) = &train_cfg.output_dir {
            if train_cfg.checkpoint_every > 0 && state.step % train_cfg.checkpoint_every == 0 {
                let ckpt = Checkpoint::new(model_cfg.clone(), classes.to_vec(), state.step, state.params.clone())?;
                save_checkpoint(&ckpt, dir.join(format!("step_{:06}.ckpt", state.step)))?;
            }
        }
    }
    if let Some(dir) = &train_cfg.output_dir {
        write_trace_csv(&state.history, dir.join("trace.csv"))?;
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(model_cfg.clone(), classes.to_vec(), state.step, state.params)?,
        trace: state.history,
    })
}

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("step,loss,train_acc\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.step, r.loss, r.train_acc);
    }
    out
}

pub fn write_trace_csv(rows: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, trace_to_csv(rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Tensor;

    fn scalar(v: f32) -> Parameters {
        Parameters {
            tensors: vec![Tensor {
                name: "w".into(),
                shape: vec![1],
                data: vec![v],
            }],
        }
    }

    #[test]
    fn adam_hand_cases() {
        let cfg = TrainConfig::default();
        let mut state = TrainState::new(scalar(0.0), 0);
        adam_step(&mut state, &scalar(0.0), &cfg).unwrap();
        assert_eq!(state.params.tensors[0].data[0], 0.0);
        assert_eq!(state.first_moment.tensors[0].data[0], 0.0);
        assert_eq!(state.second_moment.tensors[0].data[0], 0.0);
        assert_eq!(state.step, 1);

        let mut state = TrainState::new(scalar(0.0), 0);
        adam_step(&mut state, &scalar(1.0), &cfg).unwrap();
        assert!((state.params.tensors[0].data[0] + 0.0002).abs() < 1e-9);
        // constant gradients keep the bias-corrected step at lr
        adam_step(&mut state, &scalar(1.0), &cfg).unwrap();
        assert!((state.params.tensors[0].data[0] + 0.0004).abs() < 1e-8);
    }

    #[test]
    fn non_finite_gradient_names_layer() {
        let cfg = TrainConfig::default();
        let mut state = TrainState::new(scalar(0.0), 0);
        let err = adam_step(&mut state, &scalar(f32::NAN), &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref layer } if layer == "w"));
        assert_eq!(state.step, 0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { steps: 0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { beta1: 1.0, ..Default::default() },
            TrainConfig { beta2: -0.1, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }

    #[test]
    fn projection_bounds() {
        let cfg = ModelConfig {
            input_side: 8,
            blocks: vec![vec![2]],
            num_classes: 2,
            leaky_slope: 0.2,
            dropout: DropoutMode::variational(),
        };
        let mut p = init_model(&cfg, 0).unwrap();
        *p.dropout_param_mut(&cfg, 0).unwrap() = 3.0;
        project_dropout_params(&mut p, &cfg);
        assert_eq!(p.dropout_param(&cfg, 0), Some(0.0));
    }

    #[test]
    fn trace_csv_layout() {
        let rows = vec![TraceRow {
            step: 1,
            loss: 0.5,
            train_acc: 1.0,
        }];
        assert_eq!(trace_to_csv(&rows), "step,loss,train_acc\n1,0.5,1\n");
    }
}
