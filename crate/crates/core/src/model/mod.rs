//! Convolutional classifier with per-layer dropout in four modes.

mod checkpoint;
mod dropout;
mod net;
mod ops;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use dropout::{concrete_keep_probability, site_masks, variational_alpha, KL_C1, KL_C2, KL_C3};
pub use net::{backward, forward, forward_replay, forward_with_seed, ForwardOutput, MaskRecord};

/// Default per-layer dropout rate for the fixed mode.
pub const DEFAULT_DROPOUT_P: f32 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DropoutMode {
    None,
    /// Bernoulli drop with probability `p`, survivors scaled by `1/(1-p)`.
    Fixed { p: f32 },
    /// Relaxed Bernoulli mask with a learned per-layer logit of `p`.
    Concrete {
        init_p: f32,
        temperature: f32,
        weight_reg: f32,
        dropout_reg: f32,
    },
    /// Multiplicative `N(1, alpha)` noise with a learned per-layer `log alpha`.
    Variational {
        init_log_alpha: f32,
        alpha_max: f32,
        kl_reg: f32,
    },
}

impl DropoutMode {
    pub fn fixed() -> Self {
        Self::Fixed { p: DEFAULT_DROPOUT_P }
    }

    pub fn concrete() -> Self {
        Self::Concrete {
            init_p: DEFAULT_DROPOUT_P,
            temperature: 0.1,
            weight_reg: 1e-6,
            dropout_reg: 1e-5,
        }
    }

    pub fn variational() -> Self {
        let p = DEFAULT_DROPOUT_P;
        Self::Variational {
            init_log_alpha: (p / (1.0 - p)).ln(),
            alpha_max: 1.0,
            kl_reg: 1e-5,
        }
    }

    /// Parses `none|fixed|concrete|variational` into the mode's defaults.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(Self::None),
            "fixed" => Ok(Self::fixed()),
            "concrete" => Ok(Self::concrete()),
            "variational" => Ok(Self::variational()),
            other => Err(Error::Config(format!(
                "unknown dropout mode {other:?} (expected none, fixed, concrete or variational)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Fixed { .. } => "fixed",
            Self::Concrete { .. } => "concrete",
            Self::Variational { .. } => "variational",
        }
    }

    pub fn is_stochastic(&self) -> bool {
        !matches!(self, Self::None)
    }

    pub fn is_learnable(&self) -> bool {
        matches!(self, Self::Concrete { .. } | Self::Variational { .. })
    }

    fn validate(&self) -> Result<()> {
        let open_unit = |what: &str, v: f32| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must lie in (0, 1), got {v}")))
            }
        };
        match *self {
            Self::None => Ok(()),
            Self::Fixed { p } => open_unit("dropout p", p),
            Self::Concrete {
                init_p,
                temperature,
                weight_reg,
                dropout_reg,
            } => {
                open_unit("concrete init_p", init_p)?;
                if !(temperature > 0.0) || !(weight_reg >= 0.0) || !(dropout_reg >= 0.0) {
                    return Err(Error::Config(
                        "concrete temperature must be > 0 and regularizers >= 0".into(),
                    ));
                }
                Ok(())
            }
            Self::Variational {
                init_log_alpha,
                alpha_max,
                kl_reg,
            } => {
                if !(alpha_max > 0.0) || !init_log_alpha.is_finite() || !(kl_reg >= 0.0) {
                    return Err(Error::Config(
                        "variational alpha_max must be > 0, init_log_alpha finite, kl_reg >= 0".into(),
                    ));
                }
                if init_log_alpha.exp() > alpha_max {
                    return Err(Error::Config(format!(
                        "initial alpha {} exceeds alpha_max {alpha_max}",
                        init_log_alpha.exp()
                    )));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_side: usize,
    /// Conv output widths, grouped into blocks; every block ends in a 2×2 max pool.
    pub blocks: Vec<Vec<usize>>,
    pub num_classes: usize,
    pub leaky_slope: f32,
    pub dropout: DropoutMode,
}

/// Static description of one 3×3 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Spatial side of input and output.
    pub side: usize,
    /// Whether a 2×2 pool follows.
    pub pooled: bool,
}

impl ModelConfig {
    pub const DEFAULT_WIDTHS: [[usize; 2]; 3] = [[32, 32], [64, 64], [64, 16]];

    /// 128-px input, six convolutions in three pooled blocks, 4096 features.
    pub fn new(num_classes: usize, dropout: DropoutMode) -> Self {
        Self {
            input_side: 128,
            blocks: Self::DEFAULT_WIDTHS.iter().map(|b| b.to_vec()).collect(),
            num_classes,
            leaky_slope: 0.2,
            dropout,
        }
    }

    pub fn with_side(mut self, side: usize) -> Self {
        self.input_side = side;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.blocks.is_empty() || self.blocks.iter().any(|b| b.is_empty() || b.contains(&0)) {
            return Err(Error::Config("every block needs at least one conv of nonzero width".into()));
        }
        let shrink = 1usize << self.blocks.len();
        if self.input_side < shrink || self.input_side % shrink != 0 {
            return Err(Error::Config(format!(
                "input side {} is not divisible by {shrink} ({} pooled blocks)",
                self.input_side,
                self.blocks.len()
            )));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("leaky slope {} outside [0, 1)", self.leaky_slope)));
        }
        self.dropout.validate()
    }

    pub fn convs(&self) -> Vec<ConvShape> {
        let mut shapes = Vec::new();
        let mut side = self.input_side;
        let mut channels = 3;
        for block in &self.blocks {
            for (i, &width) in block.iter().enumerate() {
                shapes.push(ConvShape {
                    in_channels: channels,
                    out_channels: width,
                    side,
                    pooled: i + 1 == block.len(),
                });
                channels = width;
            }
            side /= 2;
        }
        shapes
    }

    pub fn num_convs(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    /// Flattened feature length entering the classifier.
    pub fn feature_dim(&self) -> usize {
        let side = self.input_side >> self.blocks.len();
        side * side * self.blocks.last().and_then(|b| b.last()).copied().unwrap_or(0)
    }

    /// One dropout site after every conv (after its pool when it ends a
    /// block), each feeding the next weight layer.
    pub fn num_dropout_sites(&self) -> usize {
        if self.dropout.is_stochastic() {
            self.num_convs()
        } else {
            0
        }
    }

    /// Input dimension of the layer consuming site `i`: channels for a conv,
    /// features for the classifier.
    pub fn site_consumer_dim(&self, site: usize) -> usize {
        let convs = self.convs();
        if site + 1 < convs.len() {
            convs[site + 1].in_channels
        } else {
            self.feature_dim()
        }
    }

    pub fn param_count(&self) -> usize {
        let conv: usize = self
            .convs()
            .iter()
            .map(|c| c.out_channels * c.in_channels * 9 + c.out_channels)
            .sum();
        let dense = self.feature_dim() * self.num_classes + self.num_classes;
        let dropout = if self.dropout.is_learnable() { self.num_convs() } else { 0 };
        conv + dense + dropout
    }
}

/// Named row-major tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// All learnable values, ordered: per conv `weight`, `bias`; classifier
/// `weight` (features × classes), `bias`; then one scalar per dropout site
/// when the mode learns its rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub tensors: Vec<Tensor>,
}

impl Parameters {
    /// Zero-filled tensors with the layout `cfg` implies.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let mut tensors = Vec::new();
        for (i, c) in cfg.convs().iter().enumerate() {
            tensors.push(Tensor::zeros(
                format!("conv{}.weight", i + 1),
                vec![c.out_channels, c.in_channels, 3, 3],
            ));
            tensors.push(Tensor::zeros(format!("conv{}.bias", i + 1), vec![c.out_channels]));
        }
        tensors.push(Tensor::zeros("dense.weight", vec![cfg.feature_dim(), cfg.num_classes]));
        tensors.push(Tensor::zeros("dense.bias", vec![cfg.num_classes]));
        let suffix = match cfg.dropout {
            DropoutMode::Concrete { .. } => Some("logit"),
            DropoutMode::Variational { .. } => Some("log_alpha"),
            _ => None,
        };
        if let Some(suffix) = suffix {
            for i in 0..cfg.num_convs() {
                tensors.push(Tensor::zeros(format!("dropout{}.{suffix}", i + 1), vec![1]));
            }
        }
        Self { tensors }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn conv_weight(&self, i: usize) -> &Tensor {
        &self.tensors[2 * i]
    }

    pub fn conv_bias(&self, i: usize) -> &Tensor {
        &self.tensors[2 * i + 1]
    }

    fn dense_index(&self, cfg: &ModelConfig) -> usize {
        2 * cfg.num_convs()
    }

    pub fn dense_weight(&self, cfg: &ModelConfig) -> &Tensor {
        &self.tensors[self.dense_index(cfg)]
    }

    pub fn dense_bias(&self, cfg: &ModelConfig) -> &Tensor {
        &self.tensors[self.dense_index(cfg) + 1]
    }

    /// Learned dropout scalar of site `i` (logit of p, or log alpha).
    pub fn dropout_param(&self, cfg: &ModelConfig, site: usize) -> Option<f32> {
        if !cfg.dropout.is_learnable() {
            return None;
        }
        self.tensors.get(self.dense_index(cfg) + 2 + site).map(|t| t.data[0])
    }

    pub fn dropout_param_mut(&mut self, cfg: &ModelConfig, site: usize) -> Option<&mut f32> {
        if !cfg.dropout.is_learnable() {
            return None;
        }
        let idx = self.dense_index(cfg) + 2 + site;
        self.tensors.get_mut(idx).map(|t| &mut t.data[0])
    }

    /// Kernel of the weight layer that consumes dropout site `site`.
    pub fn consumer_weight(&self, cfg: &ModelConfig, site: usize) -> &Tensor {
        if site + 1 < cfg.num_convs() {
            self.conv_weight(site + 1)
        } else {
            self.dense_weight(cfg)
        }
    }

    pub fn consumer_weight_index(&self, cfg: &ModelConfig, site: usize) -> usize {
        if site + 1 < cfg.num_convs() {
            2 * (site + 1)
        } else {
            self.dense_index(cfg)
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|t| t.data.iter().any(|v| !v.is_finite()))
            .map(|t| t.name.as_str())
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expect = Self::zeros(cfg);
        if expect.tensors.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, found {}",
                expect.tensors.len(),
                self.tensors.len()
            )));
        }
        for (e, t) in expect.tensors.iter().zip(&self.tensors) {
            if e.name != t.name || e.shape != t.shape || t.data.len() != e.data.len() {
                return Err(Error::Config(format!(
                    "tensor {} has shape {:?}, expected {} {:?}",
                    t.name, t.shape, e.name, e.shape
                )));
            }
        }
        Ok(())
    }
}

/// Fan-in-scaled uniform weights (leaky-ReLU gain for convolutions), zero
/// biases, dropout parameters at their configured initial values.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<Parameters> {
    cfg.validate()?;
    let mut params = Parameters::zeros(cfg);
    let mut rng = stream_rng(seed, stream::INIT, 0);
    let slope = cfg.leaky_slope as f64;
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();
    let n_conv = cfg.num_convs();
    for (i, c) in cfg.convs().iter().enumerate() {
        let fan_in = (c.in_channels * 9) as f64;
        let bound = (gain * (3.0 / fan_in).sqrt()) as f32;
        for w in &mut params.tensors[2 * i].data {
            *w = rng.random_range(-bound..bound);
        }
    }
    let bound = (3.0 / cfg.feature_dim() as f64).sqrt() as f32;
    for w in &mut params.tensors[2 * n_conv].data {
        *w = rng.random_range(-bound..bound);
    }
    let init = match cfg.dropout {
        DropoutMode::Concrete { init_p, .. } => Some((init_p / (1.0 - init_p)).ln()),
        DropoutMode::Variational { init_log_alpha, .. } => Some(init_log_alpha),
        _ => None,
    };
    if let Some(v) = init {
        for site in 0..n_conv {
            *params.dropout_param_mut(cfg, site).expect("learnable site") = v;
        }
    }
    Ok(params)
}

/// Max-subtracted softmax of one row of logits.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&l| ((l - max) as f64).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / total) as f32).collect()
}

fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = logits.iter().map(|&l| (l as f64 - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&l| l as f64 - lse).collect()
}

/// `(1/B) Σ w_i · CE_i` over a row-major `(B, K)` logit matrix.
pub fn weighted_cross_entropy(logits: &[f32], num_classes: usize, labels: &[usize], weights: &[f32]) -> Result<f64> {
    let batch = labels.len();
    if batch == 0 || logits.len() != batch * num_classes || weights.len() != batch {
        return Err(Error::Shape(format!(
            "{} logits, {} labels, {} weights for {num_classes} classes",
            logits.len(),
            batch,
            weights.len()
        )));
    }
    let mut total = 0.0;
    for (i, (&label, &w)) in labels.iter().zip(weights).enumerate() {
        if label >= num_classes {
            return Err(Error::Shape(format!("label {label} outside 0..{num_classes}")));
        }
        let row = &logits[i * num_classes..(i + 1) * num_classes];
        total -= w as f64 * log_softmax(row)[label];
    }
    Ok(total / batch as f64)
}

/// Mode-specific penalty on the parameters; zero for `None` and `Fixed`.
pub fn regularizer(params: &Parameters, cfg: &ModelConfig) -> f64 {
    dropout::regularizer(params, cfg, None)
}

/// Training objective: weighted cross-entropy plus the dropout regularizer.
pub fn loss(
    logits: &[f32],
    labels: &[usize],
    weights: &[f32],
    params: &Parameters,
    cfg: &ModelConfig,
) -> Result<f64> {
    Ok(weighted_cross_entropy(logits, cfg.num_classes, labels, weights)? + regularizer(params, cfg))
}
