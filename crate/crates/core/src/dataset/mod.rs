//! Corpus layout, manifests, class weighting and sample construction.
//!
//! On disk a corpus looks like
//!
//! ```text
//! root/
//!   train/<class>/*.png      one or more clean splash screens per class
//!   test_pos/<class>/*.png   captured screenshots of known classes
//!   test_neg/*.png           unrelated images (no label)
//! ```
//!
//! Class indices are the lexicographic rank of the class folder names.

mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{apply_plan, sample_plan, AugmentConfig};
use crate::error::{Error, Result};
use crate::imaging::{crop_square, load_image, resize_bilinear, CropMode, ImageBuffer};
use crate::rng::{self, stream_rng};

pub use synth::{generate_synthetic_corpus, render_negative, render_splash, SynthOptions};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledItem {
    pub class: usize,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub train_items: Vec<LabeledItem>,
    pub positive_test_items: Vec<LabeledItem>,
    pub negative_test_items: Vec<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Positive,
    Negative,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Positive => "test_pos",
            Split::Negative => "test_neg",
        }
    }
}

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn dir_name(path: &Path) -> Result<String> {
    path.file_name()
        .and_then(|n| n.to_str())
        .map(str::to_owned)
        .ok_or_else(|| Error::Config(format!("non UTF-8 folder name {}", path.display())))
}

fn images_in(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?.into_iter().filter(|p| is_image(p)).collect())
}

pub fn scan_corpus(root: impl AsRef<Path>) -> Result<CorpusManifest> {
    let root = root.as_ref();
    let train_dir = root.join(Split::Train.name());
    if !train_dir.is_dir() {
        return Err(Error::NotFound(train_dir));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(&train_dir)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    let mut classes = Vec::with_capacity(class_dirs.len());
    let mut train_items = Vec::new();
    for (class, dir) in class_dirs.iter().enumerate() {
        let name = dir_name(dir)?;
        let images = images_in(dir)?;
        if images.is_empty() {
            return Err(Error::EmptyClass(name));
        }
        train_items.extend(images.into_iter().map(|path| LabeledItem { class, path }));
        classes.push(name);
    }

    let mut positive_test_items = Vec::new();
    let pos_dir = root.join(Split::Positive.name());
    if pos_dir.is_dir() {
        for dir in sorted_entries(&pos_dir)?.into_iter().filter(|p| p.is_dir()) {
            let name = dir_name(&dir)?;
            let class = classes
                .iter()
                .position(|c| *c == name)
                .ok_or_else(|| Error::UnknownTestClass(name.clone()))?;
            positive_test_items.extend(images_in(&dir)?.into_iter().map(|path| LabeledItem { class, path }));
        }
    }

    let neg_dir = root.join(Split::Negative.name());
    let negative_test_items = if neg_dir.is_dir() {
        images_in(&neg_dir)?
    } else {
        Vec::new()
    };

    Ok(CorpusManifest {
        root: root.to_path_buf(),
        classes,
        train_items,
        positive_test_items,
        negative_test_items,
    })
}

impl CorpusManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn train_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for item in &self.train_items {
            counts[item.class] += 1;
        }
        counts
    }

    /// Provenance record: every file with its split, class and SHA-256.
    pub fn to_provenance_json(&self) -> Result<serde_json::Value> {
        let rel = |p: &Path| -> String {
            p.strip_prefix(&self.root)
                .unwrap_or(p)
                .to_string_lossy()
                .replace('\\', "/")
        };
        let mut items = Vec::new();
        let mut push = |split: Split, class: Option<&str>, path: &Path| -> Result<()> {
            items.push(serde_json::json!({
                "split": split.name(),
                "class": class,
                "path": rel(path),
                "sha256": sha256_hex(&fs::read(path)?),
            }));
            Ok(())
        };
        for item in &self.train_items {
            push(Split::Train, Some(&self.classes[item.class]), &item.path)?;
        }
        for item in &self.positive_test_items {
            push(Split::Positive, Some(&self.classes[item.class]), &item.path)?;
        }
        for path in &self.negative_test_items {
            push(Split::Negative, None, path)?;
        }
        Ok(serde_json::json!({ "classes": self.classes, "items": items }))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-class loss weights `total / (K · count_c)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
}

impl ClassWeights {
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if counts.is_empty() || counts.contains(&0) {
            return Err(Error::Config(format!("class counts must all be positive: {counts:?}")));
        }
        let total: usize = counts.iter().sum();
        let k = counts.len() as f64;
        Ok(Self {
            weights: counts.iter().map(|&c| total as f64 / (k * c as f64)).collect(),
        })
    }

    pub fn get(&self, class: usize) -> f64 {
        self.weights[class]
    }
}

pub fn compute_class_weights(manifest: &CorpusManifest) -> Result<ClassWeights> {
    ClassWeights::from_counts(&manifest.train_counts())
}

#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub image: ImageBuffer,
    pub label: usize,
    pub weight: f32,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Vec<ImageBuffer>,
    pub labels: Vec<usize>,
    pub weights: Vec<f32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Training images decoded once, ready for on-the-fly augmentation.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    items: Vec<(ImageBuffer, usize)>,
    weights: ClassWeights,
    num_classes: usize,
}

impl TrainingSet {
    pub fn load(manifest: &CorpusManifest) -> Result<Self> {
        let items = manifest
            .train_items
            .iter()
            .map(|item| Ok((load_image(&item.path)?, item.class)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            items,
            weights: compute_class_weights(manifest)?,
            num_classes: manifest.num_classes(),
        })
    }

    pub fn from_images(items: Vec<(ImageBuffer, usize)>, num_classes: usize) -> Result<Self> {
        let mut counts = vec![0; num_classes];
        for (_, c) in &items {
            if *c >= num_classes {
                return Err(Error::Config(format!("label {c} outside {num_classes} classes")));
            }
            counts[*c] += 1;
        }
        Ok(Self {
            items,
            weights: ClassWeights::from_counts(&counts)?,
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn weights(&self) -> &ClassWeights {
        &self.weights
    }

    /// Index of the item the next sample would draw (exposed for tests of
    /// the sampling distribution).
    pub fn pick_item(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(0..self.items.len())
    }

    /// Uniform item, random square crop, resize, freshly sampled plan.
    pub fn make_training_sample(
        &self,
        cfg: &AugmentConfig,
        side: usize,
        rng: &mut impl Rng,
    ) -> Result<TrainingSample> {
        let idx = self.pick_item(rng);
        let (src, label) = &self.items[idx];
        let square = crop_square(src, CropMode::RandomSquare, rng);
        let resized = resize_bilinear(&square, side, side)?;
        let plan = sample_plan(cfg, rng)?;
        Ok(TrainingSample {
            image: apply_plan(&resized, &plan)?,
            label: *label,
            weight: self.weights.get(*label) as f32,
        })
    }

    /// Batch `step` of a run seeded with `seed`; sample `i` always comes from
    /// its own stream, so the batch is independent of worker count.
    pub fn make_batch(
        &self,
        cfg: &AugmentConfig,
        side: usize,
        seed: u64,
        step: u64,
        batch_size: usize,
    ) -> Result<Batch> {
        let samples = (0..batch_size)
            .into_par_iter()
            .map(|i| {
                let index = step * batch_size as u64 + i as u64;
                let mut rng = stream_rng(seed, rng::stream::TRAIN_SAMPLE, index);
                self.make_training_sample(cfg, side, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut batch = Batch {
            images: Vec::with_capacity(batch_size),
            labels: Vec::with_capacity(batch_size),
            weights: Vec::with_capacity(batch_size),
        };
        for s in samples {
            batch.images.push(s.image);
            batch.labels.push(s.label);
            batch.weights.push(s.weight);
        }
        Ok(batch)
    }
}

/// Centre square crop and resize, no augmentation.
pub fn prepare_test_image(img: &ImageBuffer, side: usize) -> Result<ImageBuffer> {
    let square = crop_square(img, CropMode::CenterSquare, &mut rng::rng_from_seed(0));
    resize_bilinear(&square, side, side)
}

#[derive(Clone, Debug)]
pub struct TestSample {
    pub image: ImageBuffer,
    pub label: Option<usize>,
}

pub fn make_test_sample(path: impl AsRef<Path>, label: Option<usize>, side: usize) -> Result<TestSample> {
    Ok(TestSample {
        image: prepare_test_image(&load_image(path)?, side)?,
        label,
    })
}

impl CorpusManifest {
    /// Preprocessed items of a test split; negatives carry no label.
    pub fn test_samples(&self, split: Split, side: usize) -> Result<Vec<TestSample>> {
        match split {
            Split::Positive => self
                .positive_test_items
                .par_iter()
                .map(|item| make_test_sample(&item.path, Some(item.class), side))
                .collect(),
            Split::Negative => self
                .negative_test_items
                .par_iter()
                .map(|path| make_test_sample(path, None, side))
                .collect(),
            Split::Train => self
                .train_items
                .par_iter()
                .map(|item| make_test_sample(&item.path, Some(item.class), side))
                .collect(),
        }
    }

    pub fn split_paths(&self, split: Split) -> Vec<PathBuf> {
        match split {
            Split::Train => self.train_items.iter().map(|i| i.path.clone()).collect(),
            Split::Positive => self.positive_test_items.iter().map(|i| i.path.clone()).collect(),
            Split::Negative => self.negative_test_items.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::save_image;
    use crate::rng::rng_from_seed;

    fn write(path: &Path, img: &ImageBuffer) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        save_image(img, path).unwrap();
    }

    fn tiny_corpus(dir: &Path) {
        let px = ImageBuffer::filled(4, 4, [0.5; 3]);
        write(&dir.join("train/b/1.png"), &px);
        write(&dir.join("train/b/2.png"), &px);
        write(&dir.join("train/a/1.png"), &px);
        write(&dir.join("test_pos/b/x.png"), &px);
        write(&dir.join("test_neg/n.png"), &px);
        fs::write(dir.join("train/a/notes.txt"), "ignored").unwrap();
    }

    #[test]
    fn scan_orders_classes_lexicographically() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path());
        let m = scan_corpus(dir.path()).unwrap();
        assert_eq!(m.classes, vec!["a", "b"]);
        assert_eq!(m.train_counts(), vec![1, 2]);
        assert_eq!(m.positive_test_items.len(), 1);
        assert_eq!(m.positive_test_items[0].class, 1);
        assert_eq!(m.negative_test_items.len(), 1);
        assert_eq!(scan_corpus(dir.path()).unwrap(), m);
    }

    #[test]
    fn scan_errors() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path());
        fs::create_dir_all(dir.path().join("train/c")).unwrap();
        assert!(matches!(scan_corpus(dir.path()), Err(Error::EmptyClass(c)) if c == "c"));
        fs::remove_dir(dir.path().join("train/c")).unwrap();
        write(&dir.path().join("test_pos/zz/1.png"), &ImageBuffer::filled(2, 2, [0.0; 3]));
        assert!(matches!(scan_corpus(dir.path()), Err(Error::UnknownTestClass(c)) if c == "zz"));
        assert!(matches!(scan_corpus(dir.path().join("missing")), Err(Error::NotFound(_))));
    }

    #[test]
    fn class_weight_hand_cases() {
        assert_eq!(ClassWeights::from_counts(&[3, 3, 3]).unwrap().weights, vec![1.0; 3]);
        assert_eq!(ClassWeights::from_counts(&[1, 2]).unwrap().weights, vec![1.5, 0.75]);
        let w = ClassWeights::from_counts(&[1, 1, 2]).unwrap().weights;
        for (got, want) in w.iter().zip([4.0 / 3.0, 4.0 / 3.0, 2.0 / 3.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(ClassWeights::from_counts(&[1, 0]).is_err());
    }

    #[test]
    fn provenance_lists_every_file() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path());
        let m = scan_corpus(dir.path()).unwrap();
        let json = m.to_provenance_json().unwrap();
        let items = json["items"].as_array().unwrap();
        assert_eq!(items.len(), 5);
        assert_eq!(items[0]["path"], "train/a/1.png");
        assert_eq!(items[0]["sha256"].as_str().unwrap().len(), 64);
        assert!(items[4]["class"].is_null());
    }

    #[test]
    fn disabled_augmentation_returns_resized_source() {
        let src = ImageBuffer::from_fn(64, 64, |x, y| [x as f32 / 63.0, y as f32 / 63.0, 0.5]);
        let set = TrainingSet::from_images(vec![(src.clone(), 0), (src.clone(), 1)], 2).unwrap();
        let s = set
            .make_training_sample(&AugmentConfig::disabled(), 32, &mut rng_from_seed(1))
            .unwrap();
        assert_eq!(s.image, resize_bilinear(&src, 32, 32).unwrap());
        assert_eq!(s.weight, 1.0);
    }

    #[test]
    fn batches_are_reproducible() {
        let src = ImageBuffer::from_fn(40, 30, |x, y| [x as f32 / 39.0, y as f32 / 29.0, 0.2]);
        let set = TrainingSet::from_images(vec![(src.clone(), 0), (src, 1)], 2).unwrap();
        let cfg = AugmentConfig::default();
        let a = set.make_batch(&cfg, 16, 5, 3, 4).unwrap();
        let b = set.make_batch(&cfg, 16, 5, 3, 4).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        let c = set.make_batch(&cfg, 16, 5, 4, 4).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn items_are_drawn_uniformly() {
        let px = ImageBuffer::filled(2, 2, [0.0; 3]);
        let set = TrainingSet::from_images(vec![(px.clone(), 0), (px.clone(), 1), (px, 1)], 2).unwrap();
        let mut rng = rng_from_seed(77);
        let mut hits = [0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            hits[set.pick_item(&mut rng)] += 1;
        }
        for h in hits {
            assert!((h as f64 / n as f64 - 1.0 / 3.0).abs() <= 0.02, "{hits:?}");
        }
    }

    #[test]
    fn test_samples_center_crop() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuffer::from_fn(200, 100, |x, _| [x as f32 / 199.0, 0.0, 0.0]);
        let path = dir.path().join("wide.png");
        save_image(&img, &path).unwrap();
        let s = make_test_sample(&path, None, 100).unwrap();
        assert!(s.label.is_none());
        assert!((s.image.pixel(0, 0)[0] - 50.0 / 199.0).abs() <= 1.0 / 510.0 + 1e-6);
        assert!((s.image.pixel(99, 0)[0] - 149.0 / 199.0).abs() <= 1.0 / 510.0 + 1e-6);
    }
}
