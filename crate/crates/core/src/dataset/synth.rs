//! Synthetic stand-in corpus: procedurally drawn splash screens, simulated
//! captures of them, and unrelated negative images.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{scan_corpus, CorpusManifest, Split};
use crate::augment::{apply_plan, hsv_to_rgb, AugmentConfig, AugmentPlan};
use crate::error::{Error, Result};
use crate::imaging::{resize_bilinear, save_image, ImageBuffer};
use crate::rng::{derive_seed, stream, stream_rng, StreamRng};

const GLYPH_CELLS: usize = 5;
const MIN_PAIR_DIFFERENCE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthOptions {
    pub num_classes: usize,
    /// Side of the clean splash screens.
    pub clean_side: usize,
    /// Side of the simulated captures and negatives.
    pub shot_side: usize,
    pub shots_per_class: usize,
    /// Defaults to `max(20, num_classes)` when `None`.
    pub negatives: Option<usize>,
    /// The first `extra_variants` classes get a second splash screen.
    pub extra_variants: usize,
    /// Capture simulation applied to positives and negatives.
    pub augment: AugmentConfig,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            num_classes: 10,
            clean_side: 512,
            shot_side: 128,
            shots_per_class: 10,
            negatives: None,
            extra_variants: 0,
            augment: AugmentConfig::capture(),
        }
    }
}

impl SynthOptions {
    pub fn with_classes(num_classes: usize) -> Self {
        Self {
            num_classes,
            ..Self::default()
        }
    }

    pub fn negative_count(&self) -> usize {
        self.negatives.unwrap_or(self.num_classes.max(20))
    }
}

/// Visual identity shared by every splash screen of one class.
#[derive(Clone, Debug)]
struct ClassStyle {
    background: [f32; 3],
    glyph: [[bool; GLYPH_CELLS]; GLYPH_CELLS],
    glyph_colour: [f32; 3],
    glyph_origin: (f64, f64),
    glyph_scale: f64,
}

fn random_colour(rng: &mut impl Rng, sat: (f32, f32), val: (f32, f32)) -> [f32; 3] {
    hsv_to_rgb([
        rng.random_range(0.0..1.0),
        rng.random_range(sat.0..=sat.1),
        rng.random_range(val.0..=val.1),
    ])
}

fn luminance(c: [f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn class_style(rng: &mut impl Rng) -> ClassStyle {
    let background = random_colour(rng, (0.35, 0.95), (0.25, 0.9));
    let mut glyph = [[false; GLYPH_CELLS]; GLYPH_CELLS];
    loop {
        for row in glyph.iter_mut() {
            for cell in row.iter_mut() {
                *cell = rng.random_bool(0.5);
            }
        }
        let on = glyph.iter().flatten().filter(|&&c| c).count();
        if (8..=17).contains(&on) {
            break;
        }
    }
    let glyph_colour = if luminance(background) > 0.5 {
        random_colour(rng, (0.6, 1.0), (0.05, 0.35))
    } else {
        random_colour(rng, (0.0, 0.5), (0.85, 1.0))
    };
    ClassStyle {
        background,
        glyph,
        glyph_colour,
        glyph_origin: (rng.random_range(0.05..0.45), rng.random_range(0.05..0.45)),
        glyph_scale: rng.random_range(0.4..0.5),
    }
}

fn fill_rect(img: &mut ImageBuffer, x0: f64, y0: f64, x1: f64, y1: f64, colour: [f32; 3]) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let xa = (x0 * w).round().clamp(0.0, w) as usize;
    let xb = (x1 * w).round().clamp(0.0, w) as usize;
    let ya = (y0 * h).round().clamp(0.0, h) as usize;
    let yb = (y1 * h).round().clamp(0.0, h) as usize;
    for y in ya..yb {
        for x in xa..xb {
            img.set_pixel(x, y, colour);
        }
    }
}

/// One clean splash screen: background, panels, text-like bars and the
/// class glyph block on top.
fn render_with_style(style: &ClassStyle, side: usize, layout: &mut impl Rng) -> ImageBuffer {
    let mut img = ImageBuffer::filled(side, side, style.background);
    for _ in 0..layout.random_range(2..=6) {
        let colour = random_colour(layout, (0.2, 1.0), (0.15, 1.0));
        let (x, y) = (layout.random_range(0.0..0.8), layout.random_range(0.0..0.8));
        let (w, h) = (layout.random_range(0.1..0.4), layout.random_range(0.1..0.4));
        fill_rect(&mut img, x, y, x + w, y + h, colour);
    }
    let text = if luminance(style.background) > 0.5 {
        [0.05, 0.05, 0.05]
    } else {
        [0.95, 0.95, 0.95]
    };
    let top = layout.random_range(0.55..0.7);
    let lines = layout.random_range(4..=7);
    for line in 0..lines {
        let y = top + line as f64 * 0.045;
        let mut x = 0.06;
        while x < 0.92 {
            let word = layout.random_range(0.03..0.12);
            fill_rect(&mut img, x, y, (x + word).min(0.94), y + 0.022, text);
            x += word + 0.02;
        }
    }
    let cell = style.glyph_scale / GLYPH_CELLS as f64;
    let (gx, gy) = style.glyph_origin;
    for (r, row) in style.glyph.iter().enumerate() {
        for (c, &on) in row.iter().enumerate() {
            if on {
                let x = gx + c as f64 * cell;
                let y = gy + r as f64 * cell;
                fill_rect(&mut img, x, y, x + cell, y + cell, style.glyph_colour);
            }
        }
    }
    img
}

/// Clean splash screen `variant` of class `class` under corpus `seed`.
pub fn render_splash(seed: u64, class: usize, variant: usize, side: usize) -> ImageBuffer {
    render_splash_attempt(seed, class, variant, side, 0)
}

fn render_splash_attempt(seed: u64, class: usize, variant: usize, side: usize, attempt: u64) -> ImageBuffer {
    let style_seed = derive_seed(seed, stream::SYNTH, (class as u64) << 8 | attempt);
    let style = class_style(&mut stream_rng(style_seed, 1, 0));
    let mut layout = stream_rng(style_seed, 2, variant as u64);
    render_with_style(&style, side, &mut layout)
}

fn value_noise(rng: &mut StreamRng, side: usize) -> Vec<f32> {
    let mut field = vec![0.0f32; side * side];
    let mut amplitude = 1.0f32;
    let mut total = 0.0f32;
    for cells in [3usize, 6, 12, 24, 48] {
        let grid: Vec<f32> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random()).collect();
        for y in 0..side {
            let gy = y as f32 / side as f32 * cells as f32;
            let (y0, fy) = (gy.floor() as usize, gy.fract());
            for x in 0..side {
                let gx = x as f32 / side as f32 * cells as f32;
                let (x0, fx) = (gx.floor() as usize, gx.fract());
                let at = |i: usize, j: usize| grid[j * (cells + 1) + i];
                let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
                let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
                field[y * side + x] += amplitude * (top * (1.0 - fy) + bottom * fy);
            }
        }
        total += amplitude;
        amplitude *= 0.55;
    }
    field.iter_mut().for_each(|v| *v /= total);
    field
}

/// Unrelated image: even indices are natural-noise textures, odd indices are
/// gradient layouts with circles and stripes (no panels, text or glyphs).
pub fn render_negative(seed: u64, index: usize, side: usize) -> ImageBuffer {
    let mut rng = stream_rng(seed, stream::SYNTH ^ 0xdead_beef, index as u64);
    let a = random_colour(&mut rng, (0.0, 1.0), (0.0, 1.0));
    let b = random_colour(&mut rng, (0.0, 1.0), (0.0, 1.0));
    if index % 2 == 0 {
        let field = value_noise(&mut rng, side);
        let contrast = rng.random_range(1.0..2.5f32);
        return ImageBuffer::from_fn(side, side, |x, y| {
            let t = ((field[y * side + x] - 0.5) * contrast + 0.5).clamp(0.0, 1.0);
            std::array::from_fn(|c| a[c] * (1.0 - t) + b[c] * t)
        });
    }
    let angle = rng.random_range(0.0..std::f32::consts::TAU);
    let (sin, cos) = angle.sin_cos();
    let mut img = ImageBuffer::from_fn(side, side, |x, y| {
        let u = (x as f32 / side as f32 - 0.5) * cos + (y as f32 / side as f32 - 0.5) * sin + 0.5;
        let t = u.clamp(0.0, 1.0);
        std::array::from_fn(|c| a[c] * (1.0 - t) + b[c] * t)
    });
    let stripe = random_colour(&mut rng, (0.0, 1.0), (0.0, 1.0));
    let period = rng.random_range(0.05..0.2f32);
    let stripe_angle = rng.random_range(0.0..std::f32::consts::PI);
    let (ss, sc) = stripe_angle.sin_cos();
    let band = (rng.random_range(0.0..0.6f32), rng.random_range(0.0..1.0f32));
    for y in 0..side {
        for x in 0..side {
            let (u, v) = (x as f32 / side as f32, y as f32 / side as f32);
            let s = (u * sc + v * ss) / period;
            if v > band.0 && v < band.0 + 0.4 && s.fract() < 0.4 {
                img.set_pixel(x, y, stripe);
            }
        }
    }
    for _ in 0..rng.random_range(3..=9) {
        let colour = random_colour(&mut rng, (0.0, 1.0), (0.0, 1.0));
        let (cx, cy) = (rng.random_range(0.0..1.0f32), rng.random_range(0.0..1.0f32));
        let r = rng.random_range(0.04..0.2f32);
        for y in 0..side {
            for x in 0..side {
                let (u, v) = (x as f32 / side as f32 - cx, y as f32 / side as f32 - cy);
                if u * u + v * v <= r * r {
                    img.set_pixel(x, y, colour);
                }
            }
        }
    }
    img
}

fn differing_fraction(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let differ = a
        .data()
        .chunks_exact(3)
        .zip(b.data().chunks_exact(3))
        .filter(|(p, q)| p.iter().zip(q.iter()).any(|(x, y)| (x - y).abs() > 1.0 / 255.0))
        .count();
    differ as f64 / (a.width() * a.height()) as f64
}

fn class_name(index: usize, total: usize) -> String {
    let width = total.saturating_sub(1).to_string().len().max(2);
    format!("class_{index:0width$}")
}

/// Writes the synthetic corpus under `out` and returns its manifest.
pub fn generate_synthetic_corpus(opts: &SynthOptions, out: impl AsRef<Path>, seed: u64) -> Result<CorpusManifest> {
    let out = out.as_ref();
    if opts.num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", opts.num_classes)));
    }
    if opts.extra_variants > opts.num_classes {
        return Err(Error::Config("more extra variants than classes".into()));
    }
    opts.augment.validate()?;

    // pick a style attempt per class so that every pair of clean screens
    // differs in enough pixels
    let mut cleans: Vec<ImageBuffer> = Vec::with_capacity(opts.num_classes);
    let mut attempts = Vec::with_capacity(opts.num_classes);
    for class in 0..opts.num_classes {
        let mut attempt = 0;
        let img = loop {
            let img = render_splash_attempt(seed, class, 0, opts.clean_side, attempt);
            let ok = cleans
                .par_iter()
                .all(|other| differing_fraction(&img, other) >= MIN_PAIR_DIFFERENCE);
            if ok || attempt >= 64 {
                break img;
            }
            attempt += 1;
        };
        cleans.push(img);
        attempts.push(attempt);
    }

    let names: Vec<String> = (0..opts.num_classes).map(|i| class_name(i, opts.num_classes)).collect();
    let mut plans = BTreeMap::new();
    for (class, name) in names.iter().enumerate() {
        let dir = out.join(Split::Train.name()).join(name);
        fs::create_dir_all(&dir)?;
        save_image(&cleans[class], dir.join("splash_0.png"))?;
        if class < opts.extra_variants {
            let variant = render_splash_attempt(seed, class, 1, opts.clean_side, attempts[class]);
            save_image(&variant, dir.join("splash_1.png"))?;
        }
    }

    let shots: Vec<(String, ImageBuffer, AugmentPlan)> = (0..opts.num_classes * opts.shots_per_class)
        .into_par_iter()
        .map(|i| {
            let (class, shot) = (i / opts.shots_per_class, i % opts.shots_per_class);
            let base = resize_bilinear(&cleans[class], opts.shot_side, opts.shot_side)?;
            let plan = AugmentPlan::from_seed(&opts.augment, derive_seed(seed, stream::SYNTH ^ 0x5054, i as u64))?;
            let rel = format!("{}/{}/shot_{shot:02}.png", Split::Positive.name(), names[class]);
            Ok((rel, apply_plan(&base, &plan)?, plan))
        })
        .collect::<Result<_>>()?;

    let negatives: Vec<(String, ImageBuffer, AugmentPlan)> = (0..opts.negative_count())
        .into_par_iter()
        .map(|i| {
            let clean = render_negative(seed, i, opts.clean_side);
            let base = resize_bilinear(&clean, opts.shot_side, opts.shot_side)?;
            let plan = AugmentPlan::from_seed(&opts.augment, derive_seed(seed, stream::SYNTH ^ 0x4e47, i as u64))?;
            let rel = format!("{}/neg_{i:03}.png", Split::Negative.name());
            Ok((rel, apply_plan(&base, &plan)?, plan))
        })
        .collect::<Result<_>>()?;

    for (rel, img, plan) in shots.into_iter().chain(negatives) {
        let path = out.join(&rel);
        fs::create_dir_all(path.parent().expect("relative path has a parent"))?;
        save_image(&img, &path)?;
        plans.insert(rel, plan);
    }
    fs::write(out.join("plans.json"), serde_json::to_string_pretty(&plans)?)?;

    let manifest = scan_corpus(out)?;
    fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest.to_provenance_json()?)?,
    )?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(num_classes: usize) -> SynthOptions {
        SynthOptions {
            num_classes,
            clean_side: 96,
            shot_side: 32,
            shots_per_class: 3,
            negatives: Some(4),
            ..SynthOptions::default()
        }
    }

    #[test]
    fn corpus_is_byte_identical_per_seed() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_synthetic_corpus(&small(2), a.path(), 7).unwrap();
        let mb = generate_synthetic_corpus(&small(2), b.path(), 7).unwrap();
        assert_eq!(ma.classes, mb.classes);
        let pa = ma.to_provenance_json().unwrap();
        let pb = mb.to_provenance_json().unwrap();
        assert_eq!(pa, pb);
        assert_eq!(
            fs::read(a.path().join("plans.json")).unwrap(),
            fs::read(b.path().join("plans.json")).unwrap()
        );
    }

    #[test]
    fn layout_scans_back() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions {
            extra_variants: 1,
            ..small(3)
        };
        let m = generate_synthetic_corpus(&opts, dir.path(), 1).unwrap();
        assert_eq!(m.classes, vec!["class_00", "class_01", "class_02"]);
        assert_eq!(m.train_counts(), vec![2, 1, 1]);
        assert_eq!(m.positive_test_items.len(), 9);
        assert_eq!(m.negative_test_items.len(), 4);
        assert!(generate_synthetic_corpus(&small(1), dir.path(), 1).is_err());
    }

    #[test]
    fn clean_screens_differ_pairwise() {
        for seed in 0..3 {
            let imgs: Vec<_> = (0..6).map(|c| render_splash(seed, c, 0, 128)).collect();
            for i in 0..imgs.len() {
                for j in 0..i {
                    let f = differing_fraction(&imgs[i], &imgs[j]);
                    assert!(f >= MIN_PAIR_DIFFERENCE, "seed {seed} classes {i},{j}: {f}");
                }
            }
        }
    }

    #[test]
    fn default_negative_count() {
        assert_eq!(SynthOptions::with_classes(10).negative_count(), 20);
        assert_eq!(SynthOptions::with_classes(50).negative_count(), 50);
    }
}
