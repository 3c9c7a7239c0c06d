use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_range, Result};
use crate::imaging::ImageBuffer;

fn map_values(img: &ImageBuffer, f: impl Fn(f32) -> f32) -> ImageBuffer {
    let data = img.data().iter().map(|&v| f(v)).collect();
    ImageBuffer::from_clamped(img.width(), img.height(), data)
}

/// Scales deviations from the mean intensity (taken over all channels).
pub fn adjust_contrast(img: &ImageBuffer, factor: f32) -> Result<ImageBuffer> {
    check_range("contrast factor", factor as f64, 0.5, 2.0)?;
    if factor == 1.0 {
        return Ok(img.clone());
    }
    let mean = img.mean_intensity() as f32;
    Ok(map_values(img, |v| (v - mean) * factor + mean))
}

pub fn adjust_brightness(img: &ImageBuffer, factor: f32) -> Result<ImageBuffer> {
    check_range("brightness factor", factor as f64, 1.0 / 3.0 - 1e-6, 3.0)?;
    if factor == 1.0 {
        return Ok(img.clone());
    }
    Ok(map_values(img, |v| v * factor))
}

/// Adds i.i.d. zero-mean Gaussian noise with standard deviation `sigma`.
pub fn add_noise(img: &ImageBuffer, sigma: f32, rng: &mut impl Rng) -> Result<ImageBuffer> {
    check_range("noise sigma", sigma as f64, 0.0, 0.2)?;
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let data = img
        .data()
        .iter()
        .map(|&v| {
            let n: f32 = rng.sample(StandardNormal);
            v + sigma * n
        })
        .collect();
    Ok(ImageBuffer::from_clamped(img.width(), img.height(), data))
}

pub fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return [0.0, s, max];
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    [h / 6.0, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    if s == 0.0 {
        return [v, v, v];
    }
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Hue rotation and saturation scaling without range checks.
pub(crate) fn shift_hsv(img: &ImageBuffer, hue_shift: f32, sat_factor: f32) -> ImageBuffer {
    let mut data = Vec::with_capacity(img.data().len());
    for px in img.data().chunks_exact(3) {
        let [h, s, v] = rgb_to_hsv([px[0], px[1], px[2]]);
        let out = if s == 0.0 {
            [px[0], px[1], px[2]]
        } else {
            hsv_to_rgb([(h + hue_shift).rem_euclid(1.0), (s * sat_factor).clamp(0.0, 1.0), v])
        };
        data.extend_from_slice(&out);
    }
    ImageBuffer::from_clamped(img.width(), img.height(), data)
}

pub fn perturb_color(img: &ImageBuffer, hue_shift: f32, sat_factor: f32) -> Result<ImageBuffer> {
    check_range("hue shift", hue_shift as f64, -0.05, 0.05)?;
    check_range("saturation factor", sat_factor as f64, 0.5, 2.0)?;
    if hue_shift == 0.0 && sat_factor == 1.0 {
        return Ok(img.clone());
    }
    Ok(shift_hsv(img, hue_shift, sat_factor))
}
