//! Batched forward and backward passes. Each image draws its noise from its
//! own stream `derive_seed(record.seed, TRAIN_NOISE, i)`, so a
//! [`MaskRecord`] replays every mask exactly.

use rand::Rng;
use rayon::prelude::*;

use super::dropout::{regularizer, site_noise, SiteRule};
use super::ops::{conv_backward, conv_forward, gemm, max_pool, max_pool_backward};
use super::{softmax, weighted_cross_entropy, ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;
use crate::rng::{derive_seed, stream};

/// Everything needed to regenerate the noise of one stochastic pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskRecord {
    pub stochastic: bool,
    pub seed: u64,
    pub batch_len: usize,
    /// Content hash of the batch the masks were drawn for.
    pub fingerprint: u64,
}

impl MaskRecord {
    pub fn new(images: &[ImageBuffer], stochastic: bool, seed: u64) -> Self {
        Self {
            stochastic,
            seed,
            batch_len: images.len(),
            fingerprint: fingerprint(images),
        }
    }

    fn check(&self, images: &[ImageBuffer]) -> Result<()> {
        if self.batch_len != images.len() || self.fingerprint != fingerprint(images) {
            return Err(Error::StaleMask(format!(
                "record drawn for {} images does not match this batch of {}",
                self.batch_len,
                images.len()
            )));
        }
        Ok(())
    }

    fn image_seed(&self, i: usize) -> u64 {
        derive_seed(self.seed, stream::TRAIN_NOISE, i as u64)
    }
}

fn fingerprint(images: &[ImageBuffer]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for img in images {
        for v in [img.width() as u32, img.height() as u32]
            .into_iter()
            .chain(img.data().iter().map(|v| v.to_bits()))
        {
            h ^= v as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Row-major `(batch, num_classes)`.
    pub logits: Vec<f32>,
    pub num_classes: usize,
    pub record: MaskRecord,
}

impl ForwardOutput {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.logits[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn probabilities(&self) -> Vec<Vec<f32>> {
        self.logits.chunks_exact(self.num_classes).map(softmax).collect()
    }
}

/// Activations kept for the backward pass.
struct Trace {
    conv_in: Vec<Vec<f32>>,
    conv_out: Vec<Vec<f32>>,
    pool_idx: Vec<Option<Vec<u32>>>,
    site_in: Vec<Vec<f32>>,
    site_noise: Vec<Vec<f32>>,
    site_mask: Vec<Vec<f32>>,
    feature: Vec<f32>,
    logits: Vec<f32>,
}

fn check_image(cfg: &ModelConfig, img: &ImageBuffer) -> Result<()> {
    if img.width() != cfg.input_side || img.height() != cfg.input_side {
        return Err(Error::Shape(format!(
            "expected {0}×{0} input, got {1}×{2}",
            cfg.input_side,
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

/// One image through the network. `noise_seed` is `None` for the
/// deterministic pass.
fn run_image(params: &Parameters, cfg: &ModelConfig, img: &ImageBuffer, noise_seed: Option<u64>, keep: bool) -> Trace {
    let convs = cfg.convs();
    let rules: Vec<Option<SiteRule>> = (0..convs.len())
        .map(|s| noise_seed.and_then(|_| SiteRule::new(params, cfg, s)))
        .collect();
    let mut trace = Trace {
        conv_in: Vec::new(),
        conv_out: Vec::new(),
        pool_idx: Vec::new(),
        site_in: Vec::new(),
        site_noise: Vec::new(),
        site_mask: Vec::new(),
        feature: Vec::new(),
        logits: Vec::new(),
    };
    let mut col = Vec::new();
    let mut x = img.to_chw();
    for (i, c) in convs.iter().enumerate() {
        let out = conv_forward(
            &x,
            c.in_channels,
            c.out_channels,
            c.side,
            &params.conv_weight(i).data,
            &params.conv_bias(i).data,
            cfg.leaky_slope,
            &mut col,
        );
        let (pooled, idx) = if c.pooled {
            let (p, idx) = max_pool(&out, c.out_channels, c.side);
            (p, Some(idx))
        } else {
            (out.clone(), None)
        };
        let next = match (&rules[i], noise_seed) {
            (Some(rule), Some(seed)) => {
                let noise = site_noise(&cfg.dropout, seed, i, pooled.len());
                let mask = rule.masks(&noise);
                let next: Vec<f32> = pooled.iter().zip(&mask).map(|(a, m)| a * m).collect();
                if keep {
                    trace.site_noise.push(noise);
                    trace.site_mask.push(mask);
                    trace.site_in.push(pooled);
                }
                next
            }
            _ => {
                if keep {
                    trace.site_noise.push(Vec::new());
                    trace.site_mask.push(Vec::new());
                    trace.site_in.push(Vec::new());
                }
                pooled
            }
        };
        if keep {
            trace.conv_in.push(x);
            trace.conv_out.push(out);
            trace.pool_idx.push(idx);
        }
        x = next;
    }
    let k = cfg.num_classes;
    let mut logits = params.dense_bias(cfg).data.clone();
    gemm(1, x.len(), k, &x, false, &params.dense_weight(cfg).data, false, 1.0, &mut logits);
    trace.logits = logits;
    trace.feature = x;
    trace
}

fn forward_impl(
    params: &Parameters,
    cfg: &ModelConfig,
    images: &[ImageBuffer],
    record: MaskRecord,
) -> Result<ForwardOutput> {
    images.iter().try_for_each(|img| check_image(cfg, img))?;
    let stochastic = record.stochastic && cfg.dropout.is_stochastic();
    let rows: Vec<Vec<f32>> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| run_image(params, cfg, img, stochastic.then(|| record.image_seed(i)), false).logits)
        .collect();
    Ok(ForwardOutput {
        logits: rows.concat(),
        num_classes: cfg.num_classes,
        record,
    })
}

/// Forward pass. With `stochastic` one noise realization per site and image
/// is sampled; without it every site is the identity.
pub fn forward(
    params: &Parameters,
    cfg: &ModelConfig,
    images: &[ImageBuffer],
    stochastic: bool,
    rng: &mut impl Rng,
) -> Result<ForwardOutput> {
    let seed = rng.random();
    forward_with_seed(params, cfg, images, stochastic, seed)
}

pub fn forward_with_seed(
    params: &Parameters,
    cfg: &ModelConfig,
    images: &[ImageBuffer],
    stochastic: bool,
    seed: u64,
) -> Result<ForwardOutput> {
    forward_impl(params, cfg, images, MaskRecord::new(images, stochastic, seed))
}

/// Re-runs the pass described by `record` (same noise, current parameters).
pub fn forward_replay(
    params: &Parameters,
    cfg: &ModelConfig,
    images: &[ImageBuffer],
    record: &MaskRecord,
) -> Result<ForwardOutput> {
    record.check(images)?;
    forward_impl(params, cfg, images, record.clone())
}

/// Gradient of one image's `scale · CE` term.
fn image_grad(
    params: &Parameters,
    cfg: &ModelConfig,
    img: &ImageBuffer,
    label: usize,
    scale: f32,
    noise_seed: Option<u64>,
) -> (f64, Vec<f32>, Parameters) {
    let trace = run_image(params, cfg, img, noise_seed, true);
    let k = cfg.num_classes;
    let probs = softmax(&trace.logits);
    let max = trace.logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = trace.logits.iter().map(|&l| (l as f64 - max).exp()).sum::<f64>().ln() + max;
    let ce = lse - trace.logits[label] as f64;
    let mut grads = params.zeros_like();
    if scale == 0.0 {
        return (ce * scale as f64, trace.logits, grads);
    }
    let dlogits: Vec<f32> = probs
        .iter()
        .enumerate()
        .map(|(c, &p)| scale * (p - if c == label { 1.0 } else { 0.0 }))
        .collect();
    let n_conv = cfg.num_convs();
    let dense_w = 2 * n_conv;
    // dense layer: logits = feature · W + b
    gemm(trace.feature.len(), 1, k, &trace.feature, false, &dlogits, false, 1.0, &mut grads.tensors[dense_w].data);
    for (g, d) in grads.tensors[dense_w + 1].data.iter_mut().zip(&dlogits) {
        *g += d;
    }
    let mut upstream = vec![0.0f32; trace.feature.len()];
    gemm(trace.feature.len(), k, 1, &params.tensors[dense_w].data, false, &dlogits, false, 0.0, &mut upstream);

    let convs = cfg.convs();
    let mut col = Vec::new();
    for i in (0..n_conv).rev() {
        let c = convs[i];
        // `upstream` is the gradient w.r.t. the site output feeding layer i+1
        if !trace.site_mask[i].is_empty() {
            let rule = SiteRule::new(params, cfg, i).expect("site rule exists when masks were drawn");
            let dparam = rule.param_grad(&trace.site_noise[i], &trace.site_in[i], &upstream);
            if let Some(g) = grads.dropout_param_mut(cfg, i) {
                *g += dparam as f32;
            }
            for (u, m) in upstream.iter_mut().zip(&trace.site_mask[i]) {
                *u *= m;
            }
        }
        let mut grad_out = match &trace.pool_idx[i] {
            Some(idx) => max_pool_backward(&upstream, idx, trace.conv_out[i].len()),
            None => upstream,
        };
        let (gw, rest) = grads.tensors.split_at_mut(2 * i + 1);
        let grad_in = conv_backward(
            &trace.conv_in[i],
            &trace.conv_out[i],
            &mut grad_out,
            c.in_channels,
            c.out_channels,
            c.side,
            &params.conv_weight(i).data,
            cfg.leaky_slope,
            &mut gw[2 * i].data,
            &mut rest[0].data,
            i > 0,
            &mut col,
        );
        upstream = grad_in.unwrap_or_default();
    }
    (ce * scale as f64, trace.logits, grads)
}

/// Loss and exact gradients for the pass described by `record`, with the
/// sampled noise held fixed. Returns `(loss, logits, gradients)`.
pub fn backward(
    params: &Parameters,
    cfg: &ModelConfig,
    images: &[ImageBuffer],
    labels: &[usize],
    weights: &[f32],
    record: &MaskRecord,
) -> Result<(f64, Vec<f32>, Parameters)> {
    record.check(images)?;
    images.iter().try_for_each(|img| check_image(cfg, img))?;
    let b = images.len();
    if b == 0 || labels.len() != b || weights.len() != b {
        return Err(Error::Shape(format!(
            "{} images, {} labels, {} weights",
            b,
            labels.len(),
            weights.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cfg.num_classes) {
        return Err(Error::Shape(format!("label {bad} outside 0..{}", cfg.num_classes)));
    }
    let stochastic = record.stochastic && cfg.dropout.is_stochastic();
    let per_image: Vec<(f64, Vec<f32>, Parameters)> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let scale = weights[i] / b as f32;
            image_grad(params, cfg, img, labels[i], scale, stochastic.then(|| record.image_seed(i)))
        })
        .collect();
    let mut grads = params.zeros_like();
    let mut logits = Vec::with_capacity(b * cfg.num_classes);
    for (_, l, g) in &per_image {
        grads.add_assign(g);
        logits.extend_from_slice(l);
    }
    let reg = regularizer(params, cfg, Some(&mut grads));
    let ce = weighted_cross_entropy(&logits, cfg.num_classes, labels, weights)?;
    Ok((ce + reg, logits, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, loss, DropoutMode};
    use crate::rng::rng_from_seed;

    fn tiny(dropout: DropoutMode) -> ModelConfig {
        ModelConfig {
            input_side: 8,
            blocks: vec![vec![4], vec![3]],
            num_classes: 2,
            leaky_slope: 0.2,
            dropout,
        }
    }

    fn images(n: usize, side: usize, seed: u64) -> Vec<ImageBuffer> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| ImageBuffer::from_fn(side, side, |_, _| std::array::from_fn(|_| rng.random())))
            .collect()
    }

    #[test]
    fn none_mode_ignores_stochastic_flag() {
        let cfg = tiny(DropoutMode::None);
        let params = init_model(&cfg, 1).unwrap();
        let imgs = images(3, 8, 2);
        let a = forward(&params, &cfg, &imgs, true, &mut rng_from_seed(1)).unwrap();
        let b = forward(&params, &cfg, &imgs, false, &mut rng_from_seed(2)).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn tiny_fixed_rate_matches_deterministic_pass() {
        let cfg = tiny(DropoutMode::Fixed { p: 1e-9 });
        let params = init_model(&cfg, 1).unwrap();
        let imgs = images(2, 8, 3);
        let a = forward(&params, &cfg, &imgs, true, &mut rng_from_seed(1)).unwrap();
        let b = forward(&params, &cfg, &imgs, false, &mut rng_from_seed(1)).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn replay_is_exact_and_stale_records_fail() {
        let cfg = tiny(DropoutMode::fixed());
        let params = init_model(&cfg, 1).unwrap();
        let imgs = images(3, 8, 4);
        let out = forward(&params, &cfg, &imgs, true, &mut rng_from_seed(9)).unwrap();
        let again = forward_replay(&params, &cfg, &imgs, &out.record).unwrap();
        assert_eq!(out.logits, again.logits);
        let other = images(3, 8, 5);
        assert!(matches!(forward_replay(&params, &cfg, &other, &out.record), Err(Error::StaleMask(_))));
        assert!(matches!(
            backward(&params, &cfg, &other, &[0, 1, 0], &[1.0; 3], &out.record),
            Err(Error::StaleMask(_))
        ));
        let (_, logits, _) = backward(&params, &cfg, &imgs, &[0, 1, 0], &[1.0; 3], &out.record).unwrap();
        assert_eq!(logits, out.logits);
    }

    #[test]
    fn wrong_input_size_is_a_shape_error() {
        let cfg = tiny(DropoutMode::None);
        let params = init_model(&cfg, 1).unwrap();
        let imgs = images(1, 10, 1);
        assert!(matches!(
            forward(&params, &cfg, &imgs, false, &mut rng_from_seed(0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_weights_give_zero_gradients() {
        let cfg = tiny(DropoutMode::fixed());
        let params = init_model(&cfg, 1).unwrap();
        let imgs = images(2, 8, 6);
        let rec = MaskRecord::new(&imgs, true, 3);
        let (l, _, g) = backward(&params, &cfg, &imgs, &[0, 1], &[0.0, 0.0], &rec).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.tensors.iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_loss_matches_loss_of_forward() {
        let cfg = tiny(DropoutMode::concrete());
        let params = init_model(&cfg, 8).unwrap();
        let imgs = images(3, 8, 7);
        let out = forward(&params, &cfg, &imgs, true, &mut rng_from_seed(4)).unwrap();
        let expect = loss(&out.logits, &[0, 1, 1], &[1.0, 0.5, 2.0], &params, &cfg).unwrap();
        let (got, _, _) = backward(&params, &cfg, &imgs, &[0, 1, 1], &[1.0, 0.5, 2.0], &out.record).unwrap();
        assert!((got - expect).abs() < 1e-9);
    }

    /// Central differences of the replayed loss against `backward`.
    fn gradient_error(cfg: &ModelConfig) -> f64 {
        let params = init_model(cfg, 11).unwrap();
        let imgs = images(3, 8, 12);
        let (labels, weights) = ([0, 1, 1], [1.0, 0.7, 1.3]);
        let rec = MaskRecord::new(&imgs, true, 21);
        let (_, _, grads) = backward(&params, cfg, &imgs, &labels, &weights, &rec).unwrap();
        let eval = |p: &Parameters| {
            let out = forward_replay(p, cfg, &imgs, &rec).unwrap();
            loss(&out.logits, &labels, &weights, p, cfg).unwrap()
        };
        let (mut diff, mut norm_a, mut norm_f) = (0.0, 0.0, 0.0);
        for (ti, t) in params.tensors.iter().enumerate() {
            for j in 0..t.len() {
                let h = 1e-3f32;
                let mut plus = params.clone();
                plus.tensors[ti].data[j] += h;
                let mut minus = params.clone();
                minus.tensors[ti].data[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h as f64);
                let an = grads.tensors[ti].data[j] as f64;
                diff += (fd - an).powi(2);
                norm_a += an * an;
                norm_f += fd * fd;
            }
        }
        diff.sqrt() / norm_a.sqrt().max(norm_f.sqrt())
    }

    #[test]
    fn gradients_match_finite_differences() {
        for mode in [
            DropoutMode::None,
            DropoutMode::fixed(),
            DropoutMode::concrete(),
            DropoutMode::variational(),
        ] {
            let err = gradient_error(&tiny(mode));
            assert!(err <= 1e-2, "{mode:?}: relative error {err}");
        }
    }
}
