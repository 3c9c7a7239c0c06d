//! Per-site noise, masks, their derivatives, and the mode regularizers.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{DropoutMode, ModelConfig, Parameters};
use crate::rng::stream_rng;

/// Polynomial coefficients of the negative-KL approximation.
pub const KL_C1: f64 = 1.16145124;
pub const KL_C2: f64 = -1.50204118;
pub const KL_C3: f64 = 0.58629921;

const U_EPS: f32 = 1e-7;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Keep probability `1 - p` for a concrete logit `θ = log p - log(1-p)`.
pub fn concrete_keep_probability(logit: f32) -> f32 {
    (1.0 - sigmoid(logit as f64)) as f32
}

/// `alpha = min(exp(log_alpha), alpha_max)`.
pub fn variational_alpha(log_alpha: f32, alpha_max: f32) -> f32 {
    (log_alpha as f64).exp().min(alpha_max as f64) as f32
}

/// Noise driving one site for one image. Uniform draws in
/// `[1e-7, 1 - 1e-7]` for Fixed and Concrete, standard normals for
/// Variational.
pub(crate) fn site_noise(mode: &DropoutMode, seed: u64, site: usize, len: usize) -> Vec<f32> {
    let mut rng = stream_rng(seed, 0x5173 + site as u64, 0);
    match mode {
        DropoutMode::Variational { .. } => (0..len).map(|_| rng.sample(StandardNormal)).collect(),
        _ => (0..len)
            .map(|_| rng.random::<f32>().clamp(U_EPS, 1.0 - U_EPS))
            .collect(),
    }
}

/// The `len` multipliers site `site` applies to an image whose noise seed
/// is `seed`; `None` when the mode has no dropout.
pub fn site_masks(params: &Parameters, cfg: &ModelConfig, site: usize, seed: u64, len: usize) -> Option<Vec<f32>> {
    let rule = SiteRule::new(params, cfg, site)?;
    Some(rule.masks(&site_noise(&cfg.dropout, seed, site, len)))
}

/// Multiplier applied at one site, with its derivative with respect to the
/// site's learned scalar.
#[derive(Clone, Copy, Debug)]
pub(crate) enum SiteRule {
    Fixed { p: f32 },
    Concrete { logit: f64, temperature: f64 },
    Variational { alpha: f64, clamped: bool },
}

impl SiteRule {
    pub fn new(params: &Parameters, cfg: &ModelConfig, site: usize) -> Option<Self> {
        match cfg.dropout {
            DropoutMode::None => None,
            DropoutMode::Fixed { p } => Some(Self::Fixed { p }),
            DropoutMode::Concrete { temperature, .. } => Some(Self::Concrete {
                logit: params.dropout_param(cfg, site)? as f64,
                temperature: temperature as f64,
            }),
            DropoutMode::Variational { alpha_max, .. } => {
                let log_alpha = params.dropout_param(cfg, site)? as f64;
                Some(Self::Variational {
                    alpha: log_alpha.exp().min(alpha_max as f64),
                    clamped: log_alpha.exp() > alpha_max as f64,
                })
            }
        }
    }

    pub fn masks(&self, noise: &[f32]) -> Vec<f32> {
        match *self {
            Self::Fixed { p } => {
                let scale = 1.0 / (1.0 - p);
                noise.iter().map(|&u| if u < p { 0.0 } else { scale }).collect()
            }
            Self::Concrete { logit, temperature } => {
                let keep = 1.0 - sigmoid(logit);
                noise
                    .iter()
                    .map(|&u| {
                        let u = u as f64;
                        let s = (logit + u.ln() - (1.0 - u).ln()) / temperature;
                        ((1.0 - sigmoid(s)) / keep) as f32
                    })
                    .collect()
            }
            Self::Variational { alpha, .. } => {
                let sd = alpha.sqrt() as f32;
                noise.iter().map(|&e| 1.0 + sd * e).collect()
            }
        }
    }

    /// `Σ_e upstream_e · input_e · ∂mask_e/∂param`.
    pub fn param_grad(&self, noise: &[f32], input: &[f32], upstream: &[f32]) -> f64 {
        match *self {
            Self::Fixed { .. } => 0.0,
            Self::Concrete { logit, temperature } => {
                let p = sigmoid(logit);
                let keep = 1.0 - p;
                let mut total = 0.0;
                for ((&u, &x), &g) in noise.iter().zip(input).zip(upstream) {
                    if x == 0.0 || g == 0.0 {
                        continue;
                    }
                    let u = u as f64;
                    let sig = sigmoid((logit + u.ln() - (1.0 - u).ln()) / temperature);
                    let mask = (1.0 - sig) / keep;
                    let dm = -sig * (1.0 - sig) / (temperature * keep) + mask * p;
                    total += g as f64 * x as f64 * dm;
                }
                total
            }
            Self::Variational { alpha, clamped } => {
                if clamped {
                    return 0.0;
                }
                let half_sd = 0.5 * alpha.sqrt();
                noise
                    .iter()
                    .zip(input)
                    .zip(upstream)
                    .map(|((&e, &x), &g)| g as f64 * x as f64 * half_sd * e as f64)
                    .sum()
            }
        }
    }
}

/// Regularizer value; when `grads` is given its gradient is accumulated there.
pub(crate) fn regularizer(params: &Parameters, cfg: &ModelConfig, mut grads: Option<&mut Parameters>) -> f64 {
    let mut total = 0.0;
    match cfg.dropout {
        DropoutMode::None | DropoutMode::Fixed { .. } => {}
        DropoutMode::Concrete {
            weight_reg,
            dropout_reg,
            ..
        } => {
            let (wr, dr) = (weight_reg as f64, dropout_reg as f64);
            for site in 0..cfg.num_convs() {
                let theta = params.dropout_param(cfg, site).expect("learnable site") as f64;
                let p = sigmoid(theta);
                let keep = 1.0 - p;
                let w = params.consumer_weight(cfg, site);
                let sq: f64 = w.data.iter().map(|&v| (v as f64).powi(2)).sum();
                let d = cfg.site_consumer_dim(site) as f64;
                let entropy = -p * p.ln() - keep * keep.ln();
                total += wr * sq / keep - dr * d * entropy;
                if let Some(g) = grads.as_deref_mut() {
                    *g.dropout_param_mut(cfg, site).expect("learnable site") +=
                        (wr * sq * p / keep + dr * d * theta * p * keep) as f32;
                    let idx = params.consumer_weight_index(cfg, site);
                    let scale = (2.0 * wr / keep) as f32;
                    for (gw, &v) in g.tensors[idx].data.iter_mut().zip(&w.data) {
                        *gw += scale * v;
                    }
                }
            }
        }
        DropoutMode::Variational {
            alpha_max, kl_reg, ..
        } => {
            for site in 0..cfg.num_convs() {
                let log_alpha = params.dropout_param(cfg, site).expect("learnable site") as f64;
                let clamped = log_alpha.exp() > alpha_max as f64;
                let alpha = log_alpha.exp().min(alpha_max as f64);
                let scale = kl_reg as f64 * cfg.site_consumer_dim(site) as f64;
                let neg_kl = 0.5 * alpha.ln() + KL_C1 * alpha + KL_C2 * alpha.powi(2) + KL_C3 * alpha.powi(3);
                total -= scale * neg_kl;
                if let Some(g) = grads.as_deref_mut() {
                    if !clamped {
                        let d = 0.5 + KL_C1 * alpha + 2.0 * KL_C2 * alpha.powi(2) + 3.0 * KL_C3 * alpha.powi(3);
                        *g.dropout_param_mut(cfg, site).expect("learnable site") -= (scale * d) as f32;
                    }
                }
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    #[test]
    fn fixed_masks_are_inverted_dropout() {
        let rule = SiteRule::Fixed { p: 0.25 };
        let masks = rule.masks(&[0.1, 0.3, 0.9]);
        assert_eq!(masks, vec![0.0, 1.0 / 0.75, 1.0 / 0.75]);
    }

    #[test]
    fn concrete_mask_is_bounded_and_centred() {
        let rule = SiteRule::Concrete {
            logit: (0.2f64 / 0.8).ln(),
            temperature: 0.1,
        };
        let noise = site_noise(&DropoutMode::concrete(), 5, 0, 20_000);
        let masks = rule.masks(&noise);
        assert!(masks.iter().all(|&m| (0.0..=1.0 / 0.8 + 1e-5).contains(&m)));
        let mean = masks.iter().map(|&m| m as f64).sum::<f64>() / masks.len() as f64;
        assert!((mean - 1.0).abs() < 0.03, "mean {mean}");
    }

    #[test]
    fn probabilities_stay_open_for_extreme_logits() {
        for logit in [-80.0f32, -10.0, 0.0, 10.0, 30.0] {
            let keep = concrete_keep_probability(logit);
            let p = sigmoid(logit as f64);
            assert!(p > 0.0 && p < 1.0, "{logit}");
            assert!((0.0..=1.0).contains(&keep));
        }
        assert_eq!(variational_alpha(3.0, 1.0), 1.0);
        assert!(variational_alpha(-50.0, 1.0) > 0.0);
    }

    #[test]
    fn concrete_regularizer_gradient_matches_differences() {
        let cfg = ModelConfig {
            input_side: 8,
            blocks: vec![vec![2, 3]],
            num_classes: 2,
            leaky_slope: 0.2,
            dropout: DropoutMode::Concrete {
                init_p: 0.3,
                temperature: 0.1,
                weight_reg: 0.05,
                dropout_reg: 0.01,
            },
        };
        check_regularizer_grad(&cfg);
        let cfg = ModelConfig {
            dropout: DropoutMode::Variational {
                init_log_alpha: -1.5,
                alpha_max: 1.0,
                kl_reg: 0.01,
            },
            ..cfg
        };
        check_regularizer_grad(&cfg);
    }

    fn check_regularizer_grad(cfg: &ModelConfig) {
        let params = init_model(cfg, 2).unwrap();
        let mut grads = params.zeros_like();
        regularizer(&params, cfg, Some(&mut grads));
        for (ti, t) in params.tensors.iter().enumerate() {
            for j in [0, t.len() / 2, t.len() - 1] {
                let eps = 1e-3f64;
                let mut plus = params.clone();
                plus.tensors[ti].data[j] += eps as f32;
                let mut minus = params.clone();
                minus.tensors[ti].data[j] -= eps as f32;
                let fd = (regularizer(&plus, cfg, None) - regularizer(&minus, cfg, None)) / (2.0 * eps);
                let an = grads.tensors[ti].data[j] as f64;
                assert!((fd - an).abs() <= 1e-3 * fd.abs().max(1e-3), "{} [{j}]: fd {fd} vs {an}", t.name);
            }
        }
    }
}
