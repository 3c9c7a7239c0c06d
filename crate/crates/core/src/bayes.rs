//! Monte Carlo dropout inference: predictive mean and covariance over `N`
//! stochastic passes, a scalar uncertainty, and the rejection gate.

use std::fmt::Write as _;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;
use crate::model::{forward_with_seed, ModelConfig, Parameters};
use crate::rng::{derive_seed, stream};
use crate::train::argmax;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyReduction {
    /// Mean of the variance diagonal.
    #[default]
    MeanDiagonal,
    TraceSum,
    MaxDiagonal,
}

impl UncertaintyReduction {
    pub fn apply(self, diag: &[f64]) -> f64 {
        match self {
            Self::MeanDiagonal => diag.iter().sum::<f64>() / diag.len() as f64,
            Self::TraceSum => diag.iter().sum(),
            Self::MaxDiagonal => diag.iter().copied().fold(0.0, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub samples: usize,
    pub reduction: UncertaintyReduction,
    pub reject_threshold: f64,
    /// Also keep the full K×K covariance.
    pub full_covariance: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            samples: 50,
            reduction: UncertaintyReduction::MeanDiagonal,
            reject_threshold: 0.12,
            full_covariance: false,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("need at least one Monte Carlo sample".into()));
        }
        if !(self.reject_threshold >= 0.0) {
            return Err(Error::Config(format!(
                "rejection threshold must be >= 0, got {}",
                self.reject_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub mean: Vec<f64>,
    pub variance_diag: Vec<f64>,
    pub variance_full: Option<Vec<Vec<f64>>>,
    pub uncertainty: f64,
    pub samples_used: usize,
    /// The `N × K` softmax rows the statistics were reduced from.
    #[serde(skip)]
    pub samples: Vec<Vec<f32>>,
}

/// Reduces softmax rows `Y'_1..Y'_N` to `E(Y) = (1/N) Σ Y'_n` and
/// `Var(Y) = (1/N) Σ Y'_nᵀ Y'_n − E(Y)ᵀ E(Y)`, accumulated in 64-bit.
/// Diagonal entries are clamped at zero.
pub fn mc_reduce(samples: &[Vec<f32>], cfg: &McConfig) -> Result<McResult> {
    let n = samples.len();
    let k = samples.first().map(Vec::len).unwrap_or(0);
    if n == 0 || k == 0 || samples.iter().any(|s| s.len() != k) {
        return Err(Error::Shape(format!("{n} sample rows of inconsistent or zero width")));
    }
    let inv = 1.0 / n as f64;
    let mut mean = vec![0.0f64; k];
    for row in samples {
        for (m, &y) in mean.iter_mut().zip(row) {
            *m += y as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv);
    let second = |i: usize, j: usize| samples.iter().map(|r| r[i] as f64 * r[j] as f64).sum::<f64>() * inv;
    let variance_diag: Vec<f64> = (0..k).map(|i| (second(i, i) - mean[i] * mean[i]).max(0.0)).collect();
    let variance_full = cfg.full_covariance.then(|| {
        (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| {
                        if i == j {
                            variance_diag[i]
                        } else {
                            second(i, j) - mean[i] * mean[j]
                        }
                    })
                    .collect()
            })
            .collect()
    });
    Ok(McResult {
        uncertainty: cfg.reduction.apply(&variance_diag),
        mean,
        variance_diag,
        variance_full,
        samples_used: n,
        samples: samples.to_vec(),
    })
}

/// `N` stochastic passes of one preprocessed image. Pass `i` draws its
/// noise from `derive_seed(seed, TRAIN_NOISE, i)` where `seed` is taken from `rng`.
pub fn mc_predict(
    params: &Parameters,
    cfg: &ModelConfig,
    image: &ImageBuffer,
    mc: &McConfig,
    rng: &mut impl Rng,
) -> Result<McResult> {
    mc_predict_seeded(params, cfg, image, mc, rng.random())
}

pub fn mc_predict_seeded(
    params: &Parameters,
    cfg: &ModelConfig,
    image: &ImageBuffer,
    mc: &McConfig,
    seed: u64,
) -> Result<McResult> {
    mc.validate()?;
    if !cfg.dropout.is_stochastic() {
        if mc.samples > 1 {
            warn!("model has no dropout: Monte Carlo passes are identical, variance is zero");
        }
        let out = forward_with_seed(params, cfg, std::slice::from_ref(image), false, seed)?;
        return mc_reduce(&out.probabilities(), mc);
    }
    let copies = vec![image.clone(); mc.samples];
    let out = forward_with_seed(params, cfg, &copies, true, seed)?;
    mc_reduce(&out.probabilities(), mc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class_index: usize,
    pub class_name: String,
    pub confidence: f64,
    pub uncertainty: f64,
    pub rejected: bool,
}

/// Argmax of the predictive mean (lowest index on ties); rejected when the
/// uncertainty exceeds `threshold`.
pub fn classify_with_rejection(mc: &McResult, names: &[String], threshold: f64) -> Result<Prediction> {
    if !(threshold >= 0.0) {
        return Err(Error::Config(format!("threshold must be >= 0, got {threshold}")));
    }
    let class_index = argmax(&mc.mean);
    Ok(Prediction {
        class_index,
        class_name: names.get(class_index).cloned().unwrap_or_else(|| class_index.to_string()),
        confidence: mc.mean[class_index],
        uncertainty: mc.uncertainty,
        rejected: mc.uncertainty > threshold,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub item: String,
    pub predicted: String,
    pub confidence: f64,
    pub uncertainty: f64,
    pub rejected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub n: usize,
    pub confidence_mean: f64,
    pub confidence_std: f64,
    pub uncertainty_mean: f64,
    pub uncertainty_std: f64,
    pub rejection_rate: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyProfile {
    pub rows: Vec<ProfileRow>,
    pub summary: ProfileSummary,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl UncertaintyProfile {
    pub fn from_rows(rows: Vec<ProfileRow>, threshold: f64) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptySplit("uncertainty profile"));
        }
        let (confidence_mean, confidence_std) = mean_std(rows.iter().map(|r| r.confidence));
        let (uncertainty_mean, uncertainty_std) = mean_std(rows.iter().map(|r| r.uncertainty));
        let rejected = rows.iter().filter(|r| r.uncertainty > threshold).count();
        Ok(Self {
            summary: ProfileSummary {
                n: rows.len(),
                confidence_mean,
                confidence_std,
                uncertainty_mean,
                uncertainty_std,
                rejection_rate: rejected as f64 / rows.len() as f64,
                threshold,
            },
            rows,
        })
    }

    /// Same rows with `rejected` recomputed at another threshold.
    pub fn with_threshold(&self, threshold: f64) -> Self {
        let rows = self
            .rows
            .iter()
            .map(|r| ProfileRow {
                rejected: r.uncertainty > threshold,
                ..r.clone()
            })
            .collect();
        Self::from_rows(rows, threshold).expect("rows are nonempty")
    }

    /// `item,predicted,confidence,uncertainty,rejected`, one row per item.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("item,predicted,confidence,uncertainty,rejected\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                csv_field(&r.item),
                csv_field(&r.predicted),
                r.confidence,
                r.uncertainty,
                r.rejected
            );
        }
        out
    }

    /// Mean ± standard deviation, as in a results table.
    pub fn confidence_summary(&self) -> String {
        format!("{:.2} ± {:.2}", self.summary.confidence_mean, self.summary.confidence_std)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// MC statistics for every item. Every item is evaluated with the noise
/// stream derived from `seed` alone, so identical images get identical rows.
pub fn uncertainty_profile(
    params: &Parameters,
    cfg: &ModelConfig,
    names: &[String],
    items: &[(String, ImageBuffer)],
    mc: &McConfig,
    seed: u64,
) -> Result<UncertaintyProfile> {
    if items.is_empty() {
        return Err(Error::EmptySplit("uncertainty profile"));
    }
    let item_seed = derive_seed(seed, stream::MC, 0);
    let rows = items
        .iter()
        .map(|(item, image)| {
            let result = mc_predict_seeded(params, cfg, image, mc, item_seed)?;
            let p = classify_with_rejection(&result, names, mc.reject_threshold)?;
            Ok(ProfileRow {
                item: item.clone(),
                predicted: p.class_name,
                confidence: p.confidence,
                uncertainty: p.uncertainty,
                rejected: p.rejected,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    UncertaintyProfile::from_rows(rows, mc.reject_threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, DropoutMode};
    use crate::rng::rng_from_seed;

    #[test]
    fn two_sample_hand_case() {
        let r = mc_reduce(&[vec![1.0, 0.0], vec![0.0, 1.0]], &McConfig::default()).unwrap();
        assert_eq!(r.mean, vec![0.5, 0.5]);
        assert_eq!(r.variance_diag, vec![0.25, 0.25]);
        assert_eq!(r.uncertainty, 0.25);
        let full = mc_reduce(
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &McConfig {
                full_covariance: true,
                ..McConfig::default()
            },
        )
        .unwrap();
        assert_eq!(full.variance_full.unwrap(), vec![vec![0.25, -0.25], vec![-0.25, 0.25]]);
    }

    #[test]
    fn reductions() {
        let d = [0.1, 0.3];
        assert!((UncertaintyReduction::MeanDiagonal.apply(&d) - 0.2).abs() < 1e-12);
        assert!((UncertaintyReduction::TraceSum.apply(&d) - 0.4).abs() < 1e-12);
        assert_eq!(UncertaintyReduction::MaxDiagonal.apply(&d), 0.3);
    }

    #[test]
    fn rejection_gate() {
        let names = vec!["a".to_string(), "b".to_string()];
        let mut mc = mc_reduce(&[vec![0.9, 0.1]], &McConfig::default()).unwrap();
        mc.uncertainty = 0.01;
        let p = classify_with_rejection(&mc, &names, 0.12).unwrap();
        assert_eq!((p.class_index, p.rejected), (0, false));
        assert!((p.confidence - 0.9).abs() < 1e-6);
        mc.uncertainty = 0.33;
        assert!(classify_with_rejection(&mc, &names, 0.12).unwrap().rejected);
        let tie = mc_reduce(&[vec![0.5, 0.5]], &McConfig::default()).unwrap();
        assert_eq!(classify_with_rejection(&tie, &names, 0.12).unwrap().class_index, 0);
        assert!(classify_with_rejection(&tie, &names, -1.0).is_err());
    }

    fn tiny(dropout: DropoutMode) -> ModelConfig {
        ModelConfig {
            input_side: 16,
            blocks: vec![vec![4], vec![4]],
            num_classes: 3,
            leaky_slope: 0.2,
            dropout,
        }
    }

    #[test]
    fn no_dropout_means_zero_variance() {
        let cfg = tiny(DropoutMode::None);
        let params = init_model(&cfg, 1).unwrap();
        let img = ImageBuffer::from_fn(16, 16, |x, y| [x as f32 / 15.0, 0.2, y as f32 / 15.0]);
        let r = mc_predict(&params, &cfg, &img, &McConfig::default(), &mut rng_from_seed(0)).unwrap();
        assert!(r.variance_diag.iter().all(|&v| v == 0.0));
        assert_eq!(r.uncertainty, 0.0);
        assert!((r.mean.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn stochastic_passes_are_seeded() {
        let cfg = tiny(DropoutMode::Fixed { p: 0.3 });
        let params = init_model(&cfg, 1).unwrap();
        let img = ImageBuffer::from_fn(16, 16, |x, y| [x as f32 / 15.0, 0.2, y as f32 / 15.0]);
        let mc = McConfig {
            samples: 20,
            ..McConfig::default()
        };
        let a = mc_predict_seeded(&params, &cfg, &img, &mc, 4).unwrap();
        let b = mc_predict_seeded(&params, &cfg, &img, &mc, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.uncertainty > 0.0);
        assert!(a.variance_diag.iter().all(|&v| (0.0..=0.25).contains(&v)));
        let mut reversed = a.samples.clone();
        reversed.reverse();
        let c = mc_reduce(&reversed, &mc).unwrap();
        assert!((c.uncertainty - a.uncertainty).abs() < 1e-12);
    }

    #[test]
    fn profile_rows_and_summary() {
        let cfg = tiny(DropoutMode::Fixed { p: 0.2 });
        let params = init_model(&cfg, 2).unwrap();
        let img = ImageBuffer::from_fn(16, 16, |x, _| [x as f32 / 15.0, 0.5, 0.1]);
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let items = vec![("one".to_string(), img.clone()), ("two".to_string(), img)];
        let mc = McConfig {
            samples: 8,
            ..McConfig::default()
        };
        let prof = uncertainty_profile(&params, &cfg, &names, &items, &mc, 9).unwrap();
        assert_eq!(prof.rows[0].confidence, prof.rows[1].confidence);
        assert_eq!(prof.rows[0].uncertainty, prof.rows[1].uncertainty);
        assert_eq!(prof.summary.uncertainty_std, 0.0);
        assert!(prof.to_csv().starts_with("item,predicted,confidence,uncertainty,rejected\none,"));
        assert!(prof.confidence_summary().contains(" ± "));
        assert!(matches!(
            uncertainty_profile(&params, &cfg, &names, &[], &mc, 9),
            Err(Error::EmptySplit(_))
        ));
    }
}
