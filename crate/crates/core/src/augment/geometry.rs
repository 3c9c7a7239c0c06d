//! Rotation and projective warps. Both render by inverse mapping with
//! bilinear sampling; anything that maps outside the source is black.

use crate::error::{check_range, Error, Result};
use crate::imaging::{sample_bilinear_black, ImageBuffer};

/// Rotates counter-clockwise (as displayed) about the image centre.
pub fn rotate(img: &ImageBuffer, degrees: f32) -> Result<ImageBuffer> {
    check_range("rotation angle", degrees as f64, -90.0, 90.0)?;
    let (w, h) = (img.width(), img.height());
    if degrees == 0.0 {
        return Ok(img.clone());
    }
    if w == h && degrees.abs() == 90.0 {
        let n = w - 1;
        return Ok(if degrees > 0.0 {
            ImageBuffer::from_fn(w, h, |x, y| img.pixel(n - y, x))
        } else {
            ImageBuffer::from_fn(w, h, |x, y| img.pixel(y, n - x))
        });
    }
    let theta = (degrees as f64).to_radians();
    let (sin, cos) = theta.sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    Ok(ImageBuffer::from_fn(w, h, |x, y| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        sample_bilinear_black(img, cx + dx * cos - dy * sin, cy + dx * sin + dy * cos)
    }))
}

/// Displaced corners in pixel coordinates (top-left, top-right,
/// bottom-right, bottom-left) of a `w × h` frame.
pub fn corner_quad(w: f64, h: f64, offsets: &[[f64; 2]; 4]) -> [[f64; 2]; 4] {
    let base = [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]];
    let mut out = base;
    for i in 0..4 {
        out[i] = [base[i][0] + offsets[i][0], base[i][1] + offsets[i][1]];
    }
    out
}

/// Strictly convex with consistent winding and no near-zero turns.
pub fn is_convex_quad(q: &[[f64; 2]; 4]) -> bool {
    let scale = q
        .iter()
        .flat_map(|p| p.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0);
    let eps = 1e-9 * scale * scale;
    let mut sign = 0.0;
    for i in 0..4 {
        let a = q[i];
        let b = q[(i + 1) % 4];
        let c = q[(i + 2) % 4];
        let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
        if cross.abs() <= eps {
            return false;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

/// Solves for the row-major 3×3 homography `H` with `H · src[i] ∝ dst[i]`
/// (normalised so `H[8] = 1`).
pub fn homography_from_corners(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> Option<[f64; 9]> {
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let [x, y] = src[i];
        let [u, v] = dst[i];
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    // Gauss-Jordan with partial pivoting on the augmented 8×9 system
    for col in 0..8 {
        let pivot = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        let p = a[col][col];
        for v in a[col].iter_mut() {
            *v /= p;
        }
        for row in 0..8 {
            if row != col {
                let f = a[row][col];
                if f != 0.0 {
                    for k in col..9 {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
    }
    let mut h = [0.0; 9];
    for i in 0..8 {
        h[i] = a[i][8];
    }
    h[8] = 1.0;
    Some(h)
}

pub fn invert_homography(m: &[f64; 9]) -> Option<[f64; 9]> {
    let det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6]);
    if !det.is_finite() || det.abs() < 1e-15 {
        return None;
    }
    let inv = [
        m[4] * m[8] - m[5] * m[7],
        m[2] * m[7] - m[1] * m[8],
        m[1] * m[5] - m[2] * m[4],
        m[5] * m[6] - m[3] * m[8],
        m[0] * m[8] - m[2] * m[6],
        m[2] * m[3] - m[0] * m[5],
        m[3] * m[7] - m[4] * m[6],
        m[1] * m[6] - m[0] * m[7],
        m[0] * m[4] - m[1] * m[3],
    ];
    Some(inv.map(|v| v / det))
}

pub fn apply_homography(m: &[f64; 9], p: [f64; 2]) -> [f64; 2] {
    let w = m[6] * p[0] + m[7] * p[1] + m[8];
    [
        (m[0] * p[0] + m[1] * p[1] + m[2]) / w,
        (m[3] * p[0] + m[4] * p[1] + m[5]) / w,
    ]
}

/// Maps the image rectangle onto the rectangle displaced by `corners`
/// (pixel offsets, top-left / top-right / bottom-right / bottom-left).
pub fn warp_perspective(img: &ImageBuffer, corners: [[f32; 2]; 4]) -> Result<ImageBuffer> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    for [dx, dy] in corners {
        check_range("perspective x offset", dx as f64, -0.5 * w, 0.5 * w)?;
        check_range("perspective y offset", dy as f64, -0.5 * h, 0.5 * h)?;
    }
    if corners.iter().flatten().all(|&v| v == 0.0) {
        return Ok(img.clone());
    }
    let offsets = corners.map(|c| c.map(f64::from));
    let src = corner_quad(w, h, &[[0.0; 2]; 4]);
    let dst = corner_quad(w, h, &offsets);
    if !is_convex_quad(&dst) {
        return Err(Error::DegenerateQuad);
    }
    let forward = homography_from_corners(&src, &dst).ok_or(Error::DegenerateQuad)?;
    let inverse = invert_homography(&forward).ok_or(Error::DegenerateQuad)?;
    Ok(ImageBuffer::from_fn(img.width(), img.height(), |x, y| {
        let [sx, sy] = apply_homography(&inverse, [x as f64, y as f64]);
        if sx.is_finite() && sy.is_finite() {
            sample_bilinear_black(img, sx, sy)
        } else {
            [0.0; 3]
        }
    }))
}
