//! Accuracy, macro F1, macro one-vs-rest AUC, confusion matrices, and the
//! augmentation ablation harness.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, Technique};
use crate::bayes::{mc_predict_seeded, McConfig};
use crate::dataset::{CorpusManifest, Split, TestSample, TrainingSet};
use crate::error::{Error, Result};
use crate::model::{forward_with_seed, softmax, Checkpoint, DropoutMode, ModelConfig};
use crate::rng::{derive_seed, stream};
use crate::train::{argmax, train_on_set, TrainConfig};

/// Exact sum of fractions; falls back to floating point on overflow.
struct FractionSum {
    exact: Option<(u128, u128)>,
    approx: f64,
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl FractionSum {
    fn new() -> Self {
        Self {
            exact: Some((0, 1)),
            approx: 0.0,
        }
    }

    fn add(&mut self, num: u128, den: u128) {
        self.approx += num as f64 / den as f64;
        self.exact = self.exact.and_then(|(n, d)| {
            let g = gcd(d, den);
            let l = (d / g).checked_mul(den)?;
            let n = n.checked_mul(l / d)?.checked_add(num.checked_mul(l / den)?)?;
            let r = gcd(n, l).max(1);
            Some((n / r, l / r))
        });
    }

    /// The sum divided by `count`.
    fn mean(&self, count: u128) -> f64 {
        match self.exact {
            Some((n, d)) => match d.checked_mul(count) {
                Some(dc) => {
                    let r = gcd(n, dc).max(1);
                    (n / r) as f64 / (dc / r) as f64
                }
                None => self.approx / count as f64,
            },
            None => self.approx / count as f64,
        }
    }
}

/// Rows are true classes, columns predicted classes.
pub fn confusion_matrix(truth: &[usize], predicted: &[usize], num_classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        m[t][p] += 1;
    }
    m
}

pub fn accuracy(confusion: &[Vec<u64>]) -> f64 {
    let total: u64 = confusion.iter().flatten().sum();
    let correct: u64 = (0..confusion.len()).map(|i| confusion[i][i]).sum();
    correct as f64 / total as f64
}

/// Unweighted mean of per-class `2TP / (2TP + FP + FN)`; classes that are
/// never seen nor predicted contribute 0.
pub fn macro_f1(confusion: &[Vec<u64>]) -> f64 {
    let k = confusion.len();
    let mut sum = FractionSum::new();
    for c in 0..k {
        let tp = confusion[c][c] as u128;
        let fn_: u128 = confusion[c].iter().map(|&v| v as u128).sum::<u128>() - tp;
        let fp: u128 = (0..k).map(|r| confusion[r][c] as u128).sum::<u128>() - tp;
        let den = 2 * tp + fp + fn_;
        if den > 0 {
            sum.add(2 * tp, den);
        }
    }
    sum.mean(k as u128)
}

/// Doubled Mann-Whitney count with ties as ½, and the pair count:
/// `AUC = u2 / (2 · pairs)`.
fn auc_counts(positives: &[f64], negatives: &[f64]) -> (u128, u128) {
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // doubled midranks are integers
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        rank2_sum += mid2 * all[i..=j].iter().filter(|e| e.1).count() as u128;
        i = j + 1;
    }
    let np = positives.len() as u128;
    let nn = negatives.len() as u128;
    (rank2_sum - np * (np + 1), np * nn)
}

/// ROC AUC of scores that should rank `positives` above `negatives`.
pub fn roc_auc(positives: &[f64], negatives: &[f64]) -> Option<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return None;
    }
    let (u2, pairs) = auc_counts(positives, negatives);
    let g = gcd(u2, 2 * pairs).max(1);
    Some((u2 / g) as f64 / (2 * pairs / g) as f64)
}

/// Unweighted mean of one-vs-rest AUCs over classes that have both
/// positive and negative items.
pub fn macro_auc(probs: &[Vec<f64>], labels: &[usize], num_classes: usize) -> f64 {
    let mut sum = FractionSum::new();
    let mut counted = 0u128;
    for c in 0..num_classes {
        let pos: Vec<f64> = probs.iter().zip(labels).filter(|(_, &l)| l == c).map(|(p, _)| p[c]).collect();
        let neg: Vec<f64> = probs.iter().zip(labels).filter(|(_, &l)| l != c).map(|(p, _)| p[c]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let (u2, pairs) = auc_counts(&pos, &neg);
        sum.add(u2, 2 * pairs);
        counted += 1;
    }
    if counted == 0 {
        return 0.0;
    }
    sum.mean(counted)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    pub accuracy: f64,
    pub f1_macro: f64,
    pub auc_macro_ovr: f64,
    pub confusion: Vec<Vec<u64>>,
    pub n_items: usize,
}

impl EvalReport {
    /// Metrics of class-probability rows against true labels.
    pub fn from_probabilities(classes: &[String], labels: &[usize], probs: &[Vec<f64>]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptySplit("evaluation"));
        }
        let k = classes.len();
        if probs.len() != labels.len() || probs.iter().any(|p| p.len() != k) || labels.iter().any(|&l| l >= k) {
            return Err(Error::Shape(format!(
                "{} probability rows for {} labels over {k} classes",
                probs.len(),
                labels.len()
            )));
        }
        let predicted: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        let confusion = confusion_matrix(labels, &predicted, k);
        Ok(Self {
            classes: classes.to_vec(),
            accuracy: accuracy(&confusion),
            f1_macro: macro_f1(&confusion),
            auc_macro_ovr: macro_auc(probs, labels, k),
            confusion,
            n_items: labels.len(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Header of class names, then one row of counts per true class. No
/// trailing newline.
pub fn confusion_to_csv(report: &EvalReport) -> String {
    let mut out = String::from("class");
    for name in &report.classes {
        out.push(',');
        out.push_str(name);
    }
    for (name, row) in report.classes.iter().zip(&report.confusion) {
        out.push('\n');
        out.push_str(name);
        for v in row {
            let _ = write!(out, ",{v}");
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Inference {
    /// One pass with every dropout site disabled.
    Deterministic,
    /// Predictive mean over Monte Carlo passes.
    MonteCarlo { mc: McConfig, seed: u64 },
}

/// Class probabilities for each prepared sample.
pub fn predict_probabilities(ckpt: &Checkpoint, samples: &[TestSample], inference: &Inference) -> Result<Vec<Vec<f64>>> {
    match inference {
        Inference::Deterministic => {
            let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
            let mut rows = Vec::with_capacity(images.len());
            for chunk in images.chunks(16) {
                let out = forward_with_seed(&ckpt.params, &ckpt.config, chunk, false, 0)?;
                rows.extend(
                    out.logits
                        .chunks_exact(ckpt.config.num_classes)
                        .map(|l| softmax(l).into_iter().map(f64::from).collect()),
                );
            }
            Ok(rows)
        }
        Inference::MonteCarlo { mc, seed } => samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let item_seed = derive_seed(*seed, stream::MC, i as u64);
                Ok(mc_predict_seeded(&ckpt.params, &ckpt.config, &s.image, mc, item_seed)?.mean)
            })
            .collect(),
    }
}

/// Evaluates a checkpoint on the labelled positive split.
pub fn evaluate(ckpt: &Checkpoint, manifest: &CorpusManifest, split: Split, inference: &Inference) -> Result<EvalReport> {
    if split != Split::Positive {
        return Err(Error::Config(format!("split {} has no labels to evaluate against", split.name())));
    }
    if manifest.classes != ckpt.classes {
        return Err(Error::Config("checkpoint classes differ from the corpus classes".into()));
    }
    let samples = manifest.test_samples(split, ckpt.config.input_side)?;
    evaluate_samples(ckpt, &samples, inference)
}

pub fn evaluate_samples(ckpt: &Checkpoint, samples: &[TestSample], inference: &Inference) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptySplit("test_pos"));
    }
    let labels = samples
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::Config("unlabelled sample in evaluation".into())))
        .collect::<Result<Vec<_>>>()?;
    let probs = predict_probabilities(ckpt, samples, inference)?;
    EvalReport::from_probabilities(&ckpt.classes, &labels, &probs)
}

/// One named subset of augmentation techniques.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub name: String,
    /// Technique codes or names, e.g. `["P", "R"]`.
    pub techniques: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub subsets: Vec<AblationEntry>,
}

impl AblationSpec {
    pub fn new(entries: impl IntoIterator<Item = (String, Vec<Technique>)>) -> Self {
        Self {
            subsets: entries
                .into_iter()
                .map(|(name, t)| AblationEntry {
                    name,
                    techniques: t.iter().map(|t| t.code().to_string()).collect(),
                })
                .collect(),
        }
    }

    /// No augmentation, each technique alone, and all of them.
    pub fn single_techniques() -> Self {
        let mut entries = vec![("None".to_string(), vec![])];
        entries.extend(Technique::ALL.iter().map(|&t| (t.label().to_string(), vec![t])));
        entries.push(("All Augmentations".to_string(), Technique::ALL.to_vec()));
        Self::new(entries)
    }

    /// Nested prefixes of `P/R/B/C/N/O/M/CP/D/G`, longest first.
    pub fn nested_combinations() -> Self {
        let order = NESTED_ORDER;
        Self::new((1..=order.len()).rev().map(|n| {
            let subset = order[..n].to_vec();
            (subset.iter().map(|t| t.code()).collect::<Vec<_>>().join("/"), subset)
        }))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.resolve()?;
        Ok(spec)
    }

    /// Validated `(name, techniques)` pairs.
    pub fn resolve(&self) -> Result<Vec<(String, Vec<Technique>)>> {
        if self.subsets.is_empty() {
            return Err(Error::Config("ablation spec has no subsets".into()));
        }
        let mut seen = BTreeSet::new();
        self.subsets
            .iter()
            .map(|e| {
                if e.name.trim().is_empty() {
                    return Err(Error::Config("ablation subset with empty name".into()));
                }
                if !seen.insert(e.name.as_str()) {
                    return Err(Error::Config(format!("duplicate ablation subset name `{}`", e.name)));
                }
                let techniques = e
                    .techniques
                    .iter()
                    .map(|t| t.parse::<Technique>())
                    .collect::<Result<BTreeSet<_>>>()?;
                Ok((e.name.clone(), techniques.into_iter().collect()))
            })
            .collect()
    }
}

/// Order in which combined-augmentation subsets grow.
pub const NESTED_ORDER: [Technique; 10] = [
    Technique::Perspective,
    Technique::Rotation,
    Technique::Brightness,
    Technique::Contrast,
    Technique::Noise,
    Technique::Occlusion,
    Technique::MotionBlur,
    Technique::Color,
    Technique::DefocusBlur,
    Technique::GaussianBlur,
];

/// `base` with exactly `techniques` enabled.
pub fn subset_config(base: &AugmentConfig, techniques: &[Technique]) -> AugmentConfig {
    let mut cfg = base.clone();
    for t in Technique::ALL {
        cfg.techniques.entry(t).or_default().enabled = techniques.contains(&t);
    }
    cfg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub report: EvalReport,
}

/// Trains a fresh no-dropout model per subset (same seeds throughout) and
/// evaluates each on the positive split.
pub fn run_ablation(
    manifest: &CorpusManifest,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    base_augment: &AugmentConfig,
    spec: &AblationSpec,
) -> Result<Vec<AblationRow>> {
    let subsets = spec.resolve()?;
    let set = TrainingSet::load(manifest)?;
    let samples = manifest.test_samples(Split::Positive, model_cfg.input_side)?;
    let model_cfg = ModelConfig {
        dropout: DropoutMode::None,
        ..model_cfg.clone()
    };
    subsets
        .into_iter()
        .map(|(name, techniques)| {
            let aug = subset_config(base_augment, &techniques);
            let outcome = train_on_set(&set, &manifest.classes, &model_cfg, train_cfg, &aug, None)?;
            let report = evaluate_samples(&outcome.checkpoint, &samples, &Inference::Deterministic)?;
            info!("ablation {name}: accuracy {:.3}", report.accuracy);
            Ok(AblationRow { method: name, report })
        })
        .collect()
}

/// `method,accuracy,f1,auc` with one row per subset.
pub fn ablation_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("method,accuracy,f1,auc\n");
    for r in rows {
        let method = if r.method.contains([',', '"']) {
            format!("\"{}\"", r.method.replace('"', "\"\""))
        } else {
            r.method.clone()
        };
        let _ = writeln!(
            out,
            "{method},{:.4},{:.4},{:.4}",
            r.report.accuracy, r.report.f1_macro, r.report.auc_macro_ovr
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| ((b'a' + i as u8) as char).to_string()).collect()
    }

    #[test]
    fn hand_confusion_metrics_are_exact() {
        let conf = confusion_matrix(&[0, 0, 1, 1], &[0, 1, 1, 1], 2);
        assert_eq!(conf, vec![vec![1, 1], vec![0, 2]]);
        assert_eq!(accuracy(&conf), 0.75);
        assert_eq!(macro_f1(&conf), 11.0 / 15.0);
    }

    #[test]
    fn hand_auc_is_exact() {
        assert_eq!(roc_auc(&[0.9, 0.4], &[0.8, 0.1]), Some(0.75));
        assert_eq!(roc_auc(&[0.5], &[0.5]), Some(0.5));
        assert_eq!(roc_auc(&[], &[0.5]), None);
    }

    #[test]
    fn perfect_predictor() {
        let probs = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.7, 0.3]];
        let r = EvalReport::from_probabilities(&names(2), &[0, 1, 0], &probs).unwrap();
        assert_eq!((r.accuracy, r.f1_macro, r.auc_macro_ovr), (1.0, 1.0, 1.0));
        assert_eq!(r.confusion, vec![vec![2, 0], vec![0, 1]]);
        assert!(matches!(
            EvalReport::from_probabilities(&names(2), &[], &[]),
            Err(Error::EmptySplit(_))
        ));
    }

    #[test]
    fn classes_without_support_count_zero_in_f1() {
        let conf = confusion_matrix(&[0, 0], &[0, 0], 3);
        assert_eq!(macro_f1(&conf), 1.0 / 3.0);
    }

    #[test]
    fn confusion_csv() {
        let probs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let r = EvalReport::from_probabilities(&names(2), &[0, 1], &probs).unwrap();
        assert_eq!(confusion_to_csv(&r), "class,a,b\na,1,0\nb,0,1");
    }

    #[test]
    fn ablation_specs() {
        let nested = AblationSpec::nested_combinations();
        let names: Vec<_> = nested.subsets.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names[0], "P/R/B/C/N/O/M/CP/D/G");
        assert_eq!(names[8], "P/R");
        assert_eq!(names[9], "P");
        let single = AblationSpec::single_techniques();
        assert_eq!(single.subsets.len(), 12);
        assert_eq!(single.resolve().unwrap()[11].1.len(), 10);
        let dup = r#"{"subsets":[{"name":"x","techniques":["P"]},{"name":"x","techniques":[]}]}"#;
        assert!(AblationSpec::from_json(dup).is_err());
        let unknown = r#"{"subsets":[{"name":"x","techniques":["Q"]}]}"#;
        assert!(AblationSpec::from_json(unknown).is_err());
        let ok = r#"{"subsets":[{"name":"pr","techniques":["P","rotation"]}]}"#;
        let spec = AblationSpec::from_json(ok).unwrap();
        assert_eq!(spec.resolve().unwrap()[0].1, vec![Technique::Perspective, Technique::Rotation]);
    }

    #[test]
    fn subset_config_toggles_exactly() {
        let cfg = subset_config(&AugmentConfig::default(), &[Technique::Noise]);
        assert_eq!(cfg.enabled(), vec![Technique::Noise]);
    }

    #[test]
    fn ablation_csv_layout() {
        let probs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let report = EvalReport::from_probabilities(&names(2), &[0, 1], &probs).unwrap();
        let rows = vec![AblationRow {
            method: "None".into(),
            report,
        }];
        assert_eq!(ablation_to_csv(&rows), "method,accuracy,f1,auc\nNone,1.0000,1.0000,1.0000\n");
    }
}
