//! Capture-simulation augmentations and the random policy that composes them.
//!
//! A sampled [`AugmentPlan`] is a complete record of one simulated capture:
//! every technique that fired, with its concrete parameters, in canonical
//! order. Plans serialize to JSON so any augmented sample can be rebuilt
//! bit-exactly from `(source image, plan)`.

mod blur;
mod geometry;
mod occlusion;
mod photometric;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;
use crate::rng::rng_from_seed;

pub use blur::{blur, blur_kernel, Blur, Kernel};
pub use geometry::{
    apply_homography, corner_quad, homography_from_corners, invert_homography, is_convex_quad,
    rotate, warp_perspective,
};
pub use occlusion::occlude;
pub use photometric::{
    add_noise, adjust_brightness, adjust_contrast, hsv_to_rgb, perturb_color, rgb_to_hsv,
};

/// The ten techniques, declared in canonical application order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Technique {
    Perspective,
    Rotation,
    Contrast,
    Brightness,
    Color,
    GaussianBlur,
    MotionBlur,
    DefocusBlur,
    Noise,
    Occlusion,
}

impl Technique {
    pub const ALL: [Technique; 10] = [
        Technique::Perspective,
        Technique::Rotation,
        Technique::Contrast,
        Technique::Brightness,
        Technique::Color,
        Technique::GaussianBlur,
        Technique::MotionBlur,
        Technique::DefocusBlur,
        Technique::Noise,
        Technique::Occlusion,
    ];

    /// Short code used in ablation tables (`P/R/B/C/N/O/M/CP/D/G`).
    pub fn code(self) -> &'static str {
        match self {
            Technique::Perspective => "P",
            Technique::Rotation => "R",
            Technique::Contrast => "C",
            Technique::Brightness => "B",
            Technique::Color => "CP",
            Technique::GaussianBlur => "G",
            Technique::MotionBlur => "M",
            Technique::DefocusBlur => "D",
            Technique::Noise => "N",
            Technique::Occlusion => "O",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Technique::Perspective => "Perspective",
            Technique::Rotation => "Rotation",
            Technique::Contrast => "Contrast",
            Technique::Brightness => "Brightness",
            Technique::Color => "Colour Perturbations",
            Technique::GaussianBlur => "Gaussian Blur",
            Technique::MotionBlur => "Motion Blur",
            Technique::DefocusBlur => "Defocus Blur",
            Technique::Noise => "Random Noise",
            Technique::Occlusion => "Random Occlusion",
        }
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Technique {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        Technique::ALL
            .into_iter()
            .find(|tech| {
                tech.code().eq_ignore_ascii_case(t)
                    || tech.label().eq_ignore_ascii_case(t)
                    || serde_json::to_value(tech).ok().and_then(|v| v.as_str().map(|n| n == t)) == Some(true)
            })
            .ok_or_else(|| Error::Config(format!("unknown augmentation technique `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TechniqueSetting {
    pub enabled: bool,
    pub apply_probability: f64,
}

impl Default for TechniqueSetting {
    fn default() -> Self {
        Self {
            enabled: true,
            apply_probability: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub techniques: BTreeMap<Technique, TechniqueSetting>,
    pub rotation_deg_max: f64,
    pub contrast_factor_max: f64,
    pub brightness_factor_max: f64,
    pub occlusion_area_max: f64,
    pub gaussian_sigma_max: f64,
    pub motion_length_max: f64,
    pub defocus_kernel_max: u32,
    pub noise_sigma_max: f64,
    pub hue_shift_max: f64,
    pub saturation_factor_max: f64,
    pub perspective_displacement_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            techniques: Technique::ALL
                .into_iter()
                .map(|t| (t, TechniqueSetting::default()))
                .collect(),
            rotation_deg_max: 90.0,
            contrast_factor_max: 2.0,
            brightness_factor_max: 3.0,
            occlusion_area_max: 0.25,
            gaussian_sigma_max: 5.0,
            motion_length_max: 9.0,
            defocus_kernel_max: 9,
            noise_sigma_max: 0.2,
            hue_shift_max: 0.05,
            saturation_factor_max: 2.0,
            perspective_displacement_max: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Every technique disabled; sampling always yields an empty plan.
    pub fn disabled() -> Self {
        Self::only(&[])
    }

    /// Default ranges with only the listed techniques enabled.
    pub fn only(enabled: &[Technique]) -> Self {
        let mut cfg = Self::default();
        for (tech, setting) in cfg.techniques.iter_mut() {
            setting.enabled = enabled.contains(tech);
        }
        cfg
    }

    /// A phone photo of a screen: perspective, exposure and sensor noise
    /// always fire, the other techniques at the default probability.
    pub fn capture() -> Self {
        let mut cfg = Self::default();
        for tech in [
            Technique::Perspective,
            Technique::Brightness,
            Technique::Contrast,
            Technique::Noise,
        ] {
            cfg.techniques.insert(
                tech,
                TechniqueSetting {
                    enabled: true,
                    apply_probability: 1.0,
                },
            );
        }
        cfg
    }

    pub fn with_probability(mut self, p: f64) -> Self {
        for setting in self.techniques.values_mut() {
            setting.apply_probability = p;
        }
        self
    }

    pub fn setting(&self, tech: Technique) -> TechniqueSetting {
        self.techniques.get(&tech).copied().unwrap_or(TechniqueSetting {
            enabled: false,
            apply_probability: 0.0,
        })
    }

    pub fn enabled(&self) -> Vec<Technique> {
        Technique::ALL
            .into_iter()
            .filter(|&t| self.setting(t).enabled)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (tech, s) in &self.techniques {
            if !(0.0..=1.0).contains(&s.apply_probability) {
                return Err(Error::Config(format!(
                    "apply_probability of {tech} must lie in [0, 1], got {}",
                    s.apply_probability
                )));
            }
        }
        let maxima = [
            ("rotation_deg_max", self.rotation_deg_max),
            ("contrast_factor_max", self.contrast_factor_max),
            ("brightness_factor_max", self.brightness_factor_max),
            ("occlusion_area_max", self.occlusion_area_max),
            ("gaussian_sigma_max", self.gaussian_sigma_max),
            ("motion_length_max", self.motion_length_max),
            ("defocus_kernel_max", self.defocus_kernel_max as f64),
            ("noise_sigma_max", self.noise_sigma_max),
            ("hue_shift_max", self.hue_shift_max),
            ("saturation_factor_max", self.saturation_factor_max),
            ("perspective_displacement_max", self.perspective_displacement_max),
        ];
        for (name, v) in maxima {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be strictly positive, got {v}")));
            }
        }
        if self.defocus_kernel_max % 2 == 0 {
            return Err(Error::EvenKernel(self.defocus_kernel_max));
        }
        for (name, v) in [
            ("contrast_factor_max", self.contrast_factor_max),
            ("brightness_factor_max", self.brightness_factor_max),
            ("saturation_factor_max", self.saturation_factor_max),
            ("motion_length_max", self.motion_length_max),
        ] {
            if v < 1.0 {
                return Err(Error::Config(format!("{name} must be at least 1, got {v}")));
            }
        }
        Ok(())
    }
}

/// One transform with concrete parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "technique", rename_all = "snake_case")]
pub enum AugmentStep {
    /// Corner displacements as fractions of width/height, ordered
    /// top-left, top-right, bottom-right, bottom-left.
    Perspective { corners: [[f32; 2]; 4] },
    Rotation { degrees: f32 },
    Contrast { factor: f32 },
    Brightness { factor: f32 },
    Color { hue_shift: f32, saturation: f32 },
    GaussianBlur { sigma: f32 },
    MotionBlur { length: f32, direction_deg: f32 },
    DefocusBlur { kernel: u32 },
    Noise { sigma: f32, seed: u64 },
    Occlusion { max_area: f32, seed: u64 },
}

impl AugmentStep {
    pub fn technique(&self) -> Technique {
        match self {
            AugmentStep::Perspective { .. } => Technique::Perspective,
            AugmentStep::Rotation { .. } => Technique::Rotation,
            AugmentStep::Contrast { .. } => Technique::Contrast,
            AugmentStep::Brightness { .. } => Technique::Brightness,
            AugmentStep::Color { .. } => Technique::Color,
            AugmentStep::GaussianBlur { .. } => Technique::GaussianBlur,
            AugmentStep::MotionBlur { .. } => Technique::MotionBlur,
            AugmentStep::DefocusBlur { .. } => Technique::DefocusBlur,
            AugmentStep::Noise { .. } => Technique::Noise,
            AugmentStep::Occlusion { .. } => Technique::Occlusion,
        }
    }

    pub fn apply(&self, img: &ImageBuffer) -> Result<ImageBuffer> {
        match *self {
            AugmentStep::Perspective { corners } => {
                let (w, h) = (img.width() as f32, img.height() as f32);
                let px = corners.map(|[fx, fy]| [fx * w, fy * h]);
                warp_perspective(img, px)
            }
            AugmentStep::Rotation { degrees } => rotate(img, degrees),
            AugmentStep::Contrast { factor } => adjust_contrast(img, factor),
            AugmentStep::Brightness { factor } => adjust_brightness(img, factor),
            AugmentStep::Color {
                hue_shift,
                saturation,
            } => perturb_color(img, hue_shift, saturation),
            AugmentStep::GaussianBlur { sigma } => blur(img, Blur::Gaussian { sigma }),
            AugmentStep::MotionBlur {
                length,
                direction_deg,
            } => blur(
                img,
                Blur::Motion {
                    length,
                    direction_deg,
                },
            ),
            AugmentStep::DefocusBlur { kernel } => blur(img, Blur::Defocus { kernel }),
            AugmentStep::Noise { sigma, seed } => add_noise(img, sigma, &mut rng_from_seed(seed)),
            AugmentStep::Occlusion { max_area, seed } => {
                occlude(img, &mut rng_from_seed(seed), max_area)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub seed: u64,
    pub steps: Vec<AugmentStep>,
}

impl AugmentPlan {
    pub fn empty() -> Self {
        Self {
            seed: 0,
            steps: Vec::new(),
        }
    }

    pub fn techniques(&self) -> Vec<Technique> {
        self.steps.iter().map(AugmentStep::technique).collect()
    }

    /// Regenerates the plan that [`sample_plan`] recorded under `seed`.
    pub fn from_seed(cfg: &AugmentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut steps = Vec::new();
        for tech in Technique::ALL {
            let setting = cfg.setting(tech);
            // the coin is always drawn so disabling one technique leaves the
            // other techniques' draws untouched
            let fire = rng.random::<f64>() < setting.apply_probability;
            let step = sample_step(tech, cfg, &mut rng);
            if setting.enabled && fire {
                steps.push(step);
            }
        }
        Ok(Self { seed, steps })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn log_uniform(rng: &mut impl Rng, max: f64) -> f32 {
    let l = max.ln();
    let f = rng.random_range(-l..=l).exp();
    f.clamp(1.0 / max, max) as f32
}

fn sample_step(tech: Technique, cfg: &AugmentConfig, rng: &mut impl Rng) -> AugmentStep {
    match tech {
        Technique::Perspective => AugmentStep::Perspective {
            corners: sample_corners(rng, cfg.perspective_displacement_max.min(0.5)),
        },
        Technique::Rotation => AugmentStep::Rotation {
            degrees: rng.random_range(-cfg.rotation_deg_max..=cfg.rotation_deg_max) as f32,
        },
        Technique::Contrast => AugmentStep::Contrast {
            factor: log_uniform(rng, cfg.contrast_factor_max),
        },
        Technique::Brightness => AugmentStep::Brightness {
            factor: log_uniform(rng, cfg.brightness_factor_max),
        },
        Technique::Color => AugmentStep::Color {
            hue_shift: rng.random_range(-cfg.hue_shift_max..=cfg.hue_shift_max) as f32,
            saturation: log_uniform(rng, cfg.saturation_factor_max),
        },
        Technique::GaussianBlur => AugmentStep::GaussianBlur {
            sigma: rng.random_range(0.0..=cfg.gaussian_sigma_max) as f32,
        },
        Technique::MotionBlur => AugmentStep::MotionBlur {
            length: rng.random_range(1..=cfg.motion_length_max.floor() as u32) as f32,
            direction_deg: rng.random_range(0.0..360.0) as f32,
        },
        Technique::DefocusBlur => AugmentStep::DefocusBlur {
            kernel: 2 * rng.random_range(0..=cfg.defocus_kernel_max / 2) + 1,
        },
        Technique::Noise => AugmentStep::Noise {
            sigma: rng.random_range(0.0..=cfg.noise_sigma_max) as f32,
            seed: rng.random(),
        },
        Technique::Occlusion => {
            // the open lower end keeps the area strictly positive
            let area = cfg.occlusion_area_max * (1.0 - rng.random::<f64>());
            AugmentStep::Occlusion {
                max_area: area as f32,
                seed: rng.random(),
            }
        }
    }
}

/// Per-corner fractional displacements within a uniformly drawn severity,
/// resampled until the displaced quad is convex.
fn sample_corners(rng: &mut impl Rng, max: f64) -> [[f32; 2]; 4] {
    let severity = rng.random_range(0.0..=max);
    for _ in 0..256 {
        let mut corners = [[0.0f32; 2]; 4];
        for c in &mut corners {
            for v in c.iter_mut() {
                *v = if severity > 0.0 {
                    rng.random_range(-severity..=severity) as f32
                } else {
                    0.0
                };
            }
        }
        let quad = corner_quad(1.0, 1.0, &corners.map(|c| c.map(f64::from)));
        if is_convex_quad(&quad) {
            return corners;
        }
    }
    [[0.0; 2]; 4]
}

/// Draws a fresh plan; its seed is taken from `rng` and recorded.
pub fn sample_plan(cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<AugmentPlan> {
    AugmentPlan::from_seed(cfg, rng.random())
}

pub fn apply_plan(img: &ImageBuffer, plan: &AugmentPlan) -> Result<ImageBuffer> {
    let mut out = img.clone();
    for step in &plan.steps {
        out = step.apply(&out)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn textured(w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, |x, y| {
            [
                ((x * 7 + y * 3) % 17) as f32 / 16.0,
                ((x * x + y) % 11) as f32 / 10.0,
                if (x / 4 + y / 4) % 2 == 0 { 0.9 } else { 0.2 },
            ]
        })
    }

    #[test]
    fn probability_extremes() {
        let mut rng = rng_from_seed(1);
        let none = AugmentConfig::default().with_probability(0.0);
        assert!(sample_plan(&none, &mut rng).unwrap().steps.is_empty());
        let all = AugmentConfig::default().with_probability(1.0);
        let plan = sample_plan(&all, &mut rng).unwrap();
        assert_eq!(plan.techniques(), Technique::ALL.to_vec());
    }

    #[test]
    fn inclusion_frequency_is_binomial() {
        let cfg = AugmentConfig::default();
        let mut rng = rng_from_seed(2024);
        let mut counts = BTreeMap::new();
        let draws = 10_000;
        for _ in 0..draws {
            for t in sample_plan(&cfg, &mut rng).unwrap().techniques() {
                *counts.entry(t).or_insert(0usize) += 1;
            }
        }
        for t in Technique::ALL {
            let f = counts[&t] as f64 / draws as f64;
            assert!((0.47..=0.53).contains(&f), "{t}: {f}");
        }
    }

    #[test]
    fn sampled_parameters_stay_in_range() {
        let cfg = AugmentConfig::default().with_probability(1.0);
        let mut rng = rng_from_seed(5);
        for _ in 0..500 {
            for step in sample_plan(&cfg, &mut rng).unwrap().steps {
                match step {
                    AugmentStep::Perspective { corners } => {
                        assert!(corners.iter().flatten().all(|v| v.abs() <= 0.5));
                        let q = corner_quad(1.0, 1.0, &corners.map(|c| c.map(f64::from)));
                        assert!(is_convex_quad(&q));
                    }
                    AugmentStep::Rotation { degrees } => assert!(degrees.abs() <= 90.0),
                    AugmentStep::Contrast { factor } => assert!((0.5..=2.0).contains(&factor)),
                    AugmentStep::Brightness { factor } => {
                        assert!((1.0 / 3.0..=3.0).contains(&factor))
                    }
                    AugmentStep::Color {
                        hue_shift,
                        saturation,
                    } => {
                        assert!(hue_shift.abs() <= 0.05);
                        assert!((0.5..=2.0).contains(&saturation));
                    }
                    AugmentStep::GaussianBlur { sigma } => assert!((0.0..=5.0).contains(&sigma)),
                    AugmentStep::MotionBlur { length, direction_deg } => {
                        assert!((1.0..=9.0).contains(&length));
                        assert!((0.0..360.0).contains(&direction_deg));
                    }
                    AugmentStep::DefocusBlur { kernel } => {
                        assert!(kernel % 2 == 1 && kernel <= 9)
                    }
                    AugmentStep::Noise { sigma, .. } => assert!((0.0..=0.2).contains(&sigma)),
                    AugmentStep::Occlusion { max_area, .. } => {
                        assert!(max_area > 0.0 && max_area <= 0.25)
                    }
                }
            }
        }
    }

    #[test]
    fn plan_json_round_trip_reapplies_bit_exactly() {
        let cfg = AugmentConfig::default().with_probability(1.0);
        let plan = AugmentPlan::from_seed(&cfg, 99).unwrap();
        let back = AugmentPlan::from_json(&plan.to_json()).unwrap();
        assert_eq!(plan, back);
        let img = textured(48, 48);
        assert_eq!(apply_plan(&img, &plan).unwrap(), apply_plan(&img, &back).unwrap());
        assert_eq!(AugmentPlan::from_seed(&cfg, 99).unwrap(), plan);
    }

    #[test]
    fn identity_chains() {
        let img = textured(32, 24);
        assert_eq!(apply_plan(&img, &AugmentPlan::empty()).unwrap(), img);
        let plan = AugmentPlan {
            seed: 0,
            steps: vec![
                AugmentStep::Brightness { factor: 1.0 },
                AugmentStep::Contrast { factor: 1.0 },
                AugmentStep::Rotation { degrees: 0.0 },
            ],
        };
        assert_eq!(apply_plan(&img, &plan).unwrap(), img);
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let cfg = AugmentConfig {
            defocus_kernel_max: 8,
            ..AugmentConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::EvenKernel(8))));
        let cfg = AugmentConfig {
            noise_sigma_max: 0.0,
            ..AugmentConfig::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = AugmentConfig::default();
        cfg.techniques.get_mut(&Technique::Noise).unwrap().apply_probability = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn technique_names_parse() {
        for t in Technique::ALL {
            assert_eq!(t.code().parse::<Technique>().unwrap(), t);
            assert_eq!(t.label().parse::<Technique>().unwrap(), t);
        }
        assert_eq!("motion_blur".parse::<Technique>().unwrap(), Technique::MotionBlur);
        assert!("flip".parse::<Technique>().is_err());
    }

    #[test]
    fn partial_config_json_uses_defaults() {
        let cfg: AugmentConfig = serde_json::from_str(r#"{"noise_sigma_max": 0.1}"#).unwrap();
        assert_eq!(cfg.noise_sigma_max, 0.1);
        assert_eq!(cfg.rotation_deg_max, 90.0);
        assert_eq!(cfg.enabled().len(), 10);
    }
}
