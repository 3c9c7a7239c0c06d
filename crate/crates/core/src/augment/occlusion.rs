use std::f64::consts::PI;

use rand::Rng;

use crate::error::{check_range, Result};
use crate::imaging::ImageBuffer;

/// Paints one to four bright filled ellipses (glare, reflections). The union
/// of painted pixels never exceeds `max_area` of the frame; an ellipse that
/// would overshoot the budget is skipped.
pub fn occlude(img: &ImageBuffer, rng: &mut impl Rng, max_area: f32) -> Result<ImageBuffer> {
    check_range("occlusion area", max_area as f64, 0.0, 0.25)?;
    let (w, h) = (img.width(), img.height());
    let frame = (w * h) as f64;
    let budget = (max_area as f64 * frame).floor() as usize;
    let count = rng.random_range(1..=4usize);
    let mut painted = vec![false; w * h];
    let mut used = 0usize;
    let mut out = img.clone();
    for _ in 0..count {
        let colour: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.7..=1.0));
        let target = max_area as f64 * frame * rng.random_range(0.25..=1.0) / count as f64;
        let aspect = rng.random_range(0.3..=1.0);
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let angle = rng.random_range(0.0..PI);
        let a = (target / (PI * aspect)).sqrt();
        let b = a * aspect;
        if a < 0.5 || b < 0.5 {
            continue;
        }
        let (sin, cos) = angle.sin_cos();
        let reach = a.ceil() as i64 + 1;
        let mut fresh = Vec::new();
        let mut cells = Vec::new();
        let y_lo = (cy as i64 - reach).max(0);
        let y_hi = (cy as i64 + reach).min(h as i64 - 1);
        let x_lo = (cx as i64 - reach).max(0);
        let x_hi = (cx as i64 + reach).min(w as i64 - 1);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                    let idx = y as usize * w + x as usize;
                    cells.push(idx);
                    if !painted[idx] {
                        fresh.push(idx);
                    }
                }
            }
        }
        if used + fresh.len() > budget {
            continue;
        }
        used += fresh.len();
        for idx in cells {
            painted[idx] = true;
            out.set_pixel(idx % w, idx / w, colour);
        }
    }
    Ok(out)
}
