//! Gaussian, motion and defocus blur as normalised kernels convolved with
//! edge-replicate padding.

use serde::{Deserialize, Serialize};

use crate::error::{check_range, Error, Result};
use crate::imaging::ImageBuffer;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Blur {
    /// Standard deviation in pixels, `[0, 5]`.
    Gaussian { sigma: f32 },
    /// Line of `length` pixels (`[1, 9]`) at `direction_deg`.
    Motion { length: f32, direction_deg: f32 },
    /// Disk of odd diameter `kernel` (`1..=9`).
    Defocus { kernel: u32 },
}

/// Square kernel of odd side `size`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub size: usize,
    pub weights: Vec<f32>,
}

impl Kernel {
    fn delta() -> Self {
        Self {
            size: 1,
            weights: vec![1.0],
        }
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().map(|&w| w as f64).sum()
    }

    fn normalized(size: usize, weights: Vec<f64>) -> Self {
        let total: f64 = weights.iter().sum();
        Self {
            size,
            weights: weights.iter().map(|w| (w / total) as f32).collect(),
        }
    }
}

fn validate(kind: Blur) -> Result<()> {
    match kind {
        Blur::Gaussian { sigma } => check_range("gaussian sigma", sigma as f64, 0.0, 5.0),
        Blur::Motion {
            length,
            direction_deg,
        } => {
            check_range("motion length", length as f64, 1.0, 9.0)?;
            check_range("motion direction", direction_deg as f64, 0.0, 360.0)
        }
        Blur::Defocus { kernel } => {
            if kernel % 2 == 0 {
                return Err(Error::EvenKernel(kernel));
            }
            check_range("defocus kernel", kernel as f64, 1.0, 9.0)
        }
    }
}

fn gaussian_taps(sigma: f32) -> Vec<f32> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let radius = (2.0 * sigma as f64).ceil() as i64;
    let s2 = 2.0 * (sigma as f64).powi(2);
    let raw: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / s2).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| (w / total) as f32).collect()
}

/// The 2-D kernel a blur convolves with (the Gaussian one is the outer
/// product of its separable taps).
pub fn blur_kernel(kind: Blur) -> Result<Kernel> {
    validate(kind)?;
    Ok(match kind {
        Blur::Gaussian { sigma } => {
            let taps = gaussian_taps(sigma);
            let size = taps.len();
            let weights = taps
                .iter()
                .flat_map(|&a| taps.iter().map(move |&b| a as f64 * b as f64))
                .collect();
            Kernel::normalized(size, weights)
        }
        Blur::Motion {
            length,
            direction_deg,
        } => motion_kernel(length, direction_deg),
        Blur::Defocus { kernel } => {
            let size = kernel as usize;
            let r = (size / 2) as i64;
            let limit = (kernel as f64 / 2.0).powi(2);
            let weights = (-r..=r)
                .flat_map(|y| (-r..=r).map(move |x| if (x * x + y * y) as f64 <= limit { 1.0 } else { 0.0 }))
                .collect();
            Kernel::normalized(size, weights)
        }
    })
}

/// Samples points one pixel apart along the segment and splats each
/// bilinearly onto the grid.
fn motion_kernel(length: f32, direction_deg: f32) -> Kernel {
    let length = length as f64;
    if length <= 1.0 {
        return Kernel::delta();
    }
    let n = length.ceil() as usize;
    let span = length - 1.0;
    let step = span / (n - 1) as f64;
    let radius = (span / 2.0).ceil() as usize + 1;
    let size = 2 * radius + 1;
    let mut weights = vec![0.0f64; size * size];
    let (sin, cos) = (direction_deg as f64).to_radians().sin_cos();
    let per_point = 1.0 / n as f64;
    for i in 0..n {
        let t = -span / 2.0 + i as f64 * step;
        let x = t * cos + radius as f64;
        let y = -t * sin + radius as f64;
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for (dx, dy, w) in [
            (0, 0, (1.0 - fx) * (1.0 - fy)),
            (1, 0, fx * (1.0 - fy)),
            (0, 1, (1.0 - fx) * fy),
            (1, 1, fx * fy),
        ] {
            if w > 0.0 {
                let xi = x0 as usize + dx;
                let yi = y0 as usize + dy;
                weights[yi * size + xi] += w * per_point;
            }
        }
    }
    Kernel::normalized(size, weights)
}

fn convolve_separable(img: &ImageBuffer, taps: &[f32]) -> ImageBuffer {
    let (w, h) = (img.width(), img.height());
    let r = (taps.len() / 2) as i64;
    let src = img.data();
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (k, &t) in taps.iter().enumerate() {
                let sx = (x as i64 + k as i64 - r).clamp(0, w as i64 - 1) as usize;
                let i = (y * w + sx) * 3;
                for c in 0..3 {
                    acc[c] += t * src[i + c];
                }
            }
            tmp[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&acc);
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (k, &t) in taps.iter().enumerate() {
                let sy = (y as i64 + k as i64 - r).clamp(0, h as i64 - 1) as usize;
                let i = (sy * w + x) * 3;
                for c in 0..3 {
                    acc[c] += t * tmp[i + c];
                }
            }
            out[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&acc);
        }
    }
    ImageBuffer::from_clamped(w, h, out)
}

fn convolve(img: &ImageBuffer, kernel: &Kernel) -> ImageBuffer {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let r = (kernel.size / 2) as i64;
    let taps: Vec<(i64, i64, f32)> = kernel
        .weights
        .iter()
        .enumerate()
        .filter(|(_, &wt)| wt != 0.0)
        .map(|(i, &wt)| ((i % kernel.size) as i64 - r, (i / kernel.size) as i64 - r, wt))
        .collect();
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for &(dx, dy, wt) in &taps {
                let sx = (x + dx).clamp(0, w - 1);
                let sy = (y + dy).clamp(0, h - 1);
                let i = ((sy * w + sx) * 3) as usize;
                for c in 0..3 {
                    acc[c] += wt * src[i + c];
                }
            }
            out.extend_from_slice(&acc);
        }
    }
    ImageBuffer::from_clamped(img.width(), img.height(), out)
}

pub fn blur(img: &ImageBuffer, kind: Blur) -> Result<ImageBuffer> {
    validate(kind)?;
    let identity = match kind {
        Blur::Gaussian { sigma } => sigma == 0.0,
        Blur::Motion { length, .. } => length == 1.0,
        Blur::Defocus { kernel } => kernel == 1,
    };
    if identity {
        return Ok(img.clone());
    }
    Ok(match kind {
        Blur::Gaussian { sigma } => convolve_separable(img, &gaussian_taps(sigma)),
        _ => convolve(img, &blur_kernel(kind)?),
    })
}
