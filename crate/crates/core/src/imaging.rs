//! Float RGB images, codecs, square cropping and bilinear resampling.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major interleaved RGB image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::out_of_range("intensity", *v as f64, 0.0, 1.0));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image from values that are clamped into `[0, 1]`.
    pub(crate) fn from_clamped(width: usize, height: usize, mut data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), width * height * 3);
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self::from_clamped(width, height, data)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::from_clamped(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    pub fn mean_intensity(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Planar copy (`channel × row × column`), the layout the network consumes.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * 3];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            out[p] = px[0];
            out[plane + p] = px[1];
            out[2 * plane + p] = px[2];
        }
        out
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Self {
            width: w as usize,
            height: h as usize,
            data,
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    /// Encodes as an RGB8 PNG.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Decode(e.to_string()))?;
        Ok(out.into_inner())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CropMode {
    RandomSquare,
    CenterSquare,
}

/// Decodes PNG or JPEG bytes.
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer> {
    let format = image::guess_format(bytes).map_err(|e| Error::Decode(e.to_string()))?;
    if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Jpeg) {
        return Err(Error::Decode(format!("unsupported format {format:?}")));
    }
    let img = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| Error::Decode(e.to_string()))?;
    Ok(ImageBuffer::from_rgb8(&img.to_rgb8()))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::NotFound(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    decode_image(&bytes)
}

pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, img.to_png_bytes()?)?;
    Ok(())
}

fn square_offsets(img: &ImageBuffer, mode: CropMode, rng: &mut impl Rng) -> (usize, usize, usize) {
    let side = img.width.min(img.height);
    let (dx, dy) = (img.width - side, img.height - side);
    match mode {
        CropMode::CenterSquare => (dx / 2, dy / 2, side),
        CropMode::RandomSquare => {
            let x0 = if dx > 0 { rng.random_range(0..=dx) } else { 0 };
            let y0 = if dy > 0 { rng.random_range(0..=dy) } else { 0 };
            (x0, y0, side)
        }
    }
}

/// Crops the largest square; square inputs come back unchanged and the
/// random stream is not advanced for them.
pub fn crop_square(img: &ImageBuffer, mode: CropMode, rng: &mut impl Rng) -> ImageBuffer {
    let (x0, y0, side) = square_offsets(img, mode, rng);
    crop(img, x0, y0, side, side)
}

pub fn crop(img: &ImageBuffer, x0: usize, y0: usize, w: usize, h: usize) -> ImageBuffer {
    assert!(x0 + w <= img.width && y0 + h <= img.height, "crop outside image");
    let mut data = Vec::with_capacity(w * h * 3);
    for y in y0..y0 + h {
        let start = (y * img.width + x0) * 3;
        data.extend_from_slice(&img.data[start..start + w * 3]);
    }
    ImageBuffer {
        width: w,
        height: h,
        data,
    }
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &ImageBuffer, out_w: usize, out_h: usize) -> Result<ImageBuffer> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Shape(format!("cannot resize to {out_w}x{out_h}")));
    }
    if out_w == img.width && out_h == img.height {
        return Ok(img.clone());
    }
    let taps = |out: usize, src: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f64 / out as f64;
        (0..out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = taps(out_w, img.width);
    let ys = taps(out_h, img.height);
    let mut data = Vec::with_capacity(out_w * out_h * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let p00 = img.pixel(x0, y0);
            let p10 = img.pixel(x1, y0);
            let p01 = img.pixel(x0, y1);
            let p11 = img.pixel(x1, y1);
            for c in 0..3 {
                let top = p00[c] + (p10[c] - p00[c]) * fx;
                let bottom = p01[c] + (p11[c] - p01[c]) * fx;
                data.push(top + (bottom - top) * fy);
            }
        }
    }
    Ok(ImageBuffer::from_clamped(out_w, out_h, data))
}

/// Bilinear sample at continuous pixel coordinates, treating everything
/// outside the image as black.
pub(crate) fn sample_bilinear_black(img: &ImageBuffer, x: f64, y: f64) -> [f32; 3] {
    let w = img.width as i64;
    let h = img.height as i64;
    if !(x > -1.0 && y > -1.0 && x < w as f64 && y < h as f64) {
        return [0.0; 3];
    }
    let x0 = x.floor() as i64;
    let y0 = y.floor() as i64;
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    let fetch = |xi: i64, yi: i64| -> [f32; 3] {
        if xi < 0 || yi < 0 || xi >= w || yi >= h {
            [0.0; 3]
        } else {
            img.pixel(xi as usize, yi as usize)
        }
    };
    let p00 = fetch(x0, y0);
    let p10 = fetch(x0 + 1, y0);
    let p01 = fetch(x0, y0 + 1);
    let p11 = fetch(x0 + 1, y0 + 1);
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        let top = p00[c] * (1.0 - fx) + p10[c] * fx;
        let bottom = p01[c] * (1.0 - fx) + p11[c] * fx;
        out[c] = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn gradient(w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, |x, y| {
            [x as f32 / w as f32, y as f32 / h as f32, ((x + y) % 7) as f32 / 7.0]
        })
    }

    #[test]
    fn rejects_out_of_range_values() {
        assert!(ImageBuffer::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(ImageBuffer::new(1, 1, vec![0.0, 0.5]).is_err());
        assert!(ImageBuffer::new(1, 1, vec![0.0, 0.5, 1.0]).is_ok());
    }

    #[test]
    fn png_codec_maps_by_255() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("px.png");
        let mut raw = image::RgbImage::new(2, 2);
        raw.put_pixel(0, 0, image::Rgb([128, 64, 32]));
        raw.save(&path).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.data()[0], 128.0 / 255.0);
        assert_eq!(img.data()[1], 64.0 / 255.0);
        assert_eq!(img.data()[2], 32.0 / 255.0);

        for (value, expect) in [(255u8, 1.0f32), (0, 0.0)] {
            let p = dir.path().join(format!("{value}.png"));
            image::RgbImage::from_pixel(1, 1, image::Rgb([value; 3])).save(&p).unwrap();
            assert_eq!(load_image(&p).unwrap().data(), &[expect; 3]);
        }
    }

    #[test]
    fn save_load_round_trip_is_within_half_step() {
        let dir = tempfile::tempdir().unwrap();
        for (name, v) in [("zeros", 0.0f32), ("ones", 1.0), ("mid", 0.4)] {
            let img = ImageBuffer::filled(4, 4, [v; 3]);
            let path = dir.path().join(format!("{name}.png"));
            save_image(&img, &path).unwrap();
            let back = load_image(&path).unwrap();
            for (a, b) in img.data().iter().zip(back.data()) {
                assert!((a - b).abs() <= 1.0 / 510.0 + 1e-7, "{a} vs {b}");
            }
            if v == 0.0 || v == 1.0 {
                assert_eq!(back, img);
            }
        }
    }

    #[test]
    fn missing_and_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_image(dir.path().join("nope.png")), Err(Error::NotFound(_))));
        let bad = dir.path().join("bad.png");
        std::fs::write(&bad, b"\x89PNG garbage").unwrap();
        assert!(matches!(load_image(&bad), Err(Error::Decode(_))));
        assert!(matches!(decode_image(&[1, 2, 3]), Err(Error::Decode(_))));
    }

    #[test]
    fn center_crop_keeps_middle_columns() {
        let img = gradient(200, 100);
        let out = crop_square(&img, CropMode::CenterSquare, &mut rng_from_seed(0));
        assert_eq!((out.width(), out.height()), (100, 100));
        for y in [0, 50, 99] {
            assert_eq!(out.pixel(0, y), img.pixel(50, y));
            assert_eq!(out.pixel(99, y), img.pixel(149, y));
        }
    }

    #[test]
    fn random_crop_replays_seeded_offset() {
        let img = gradient(100, 300);
        let out = crop_square(&img, CropMode::RandomSquare, &mut rng_from_seed(11));
        let r: usize = rng_from_seed(11).random_range(0..=200);
        assert_eq!(out, crop(&img, 0, r, 100, 100));
        assert_eq!(out, crop_square(&img, CropMode::RandomSquare, &mut rng_from_seed(11)));
    }

    #[test]
    fn square_inputs_are_untouched() {
        let img = gradient(128, 128);
        for mode in [CropMode::RandomSquare, CropMode::CenterSquare] {
            let out = crop_square(&img, mode, &mut rng_from_seed(3));
            assert_eq!(out, img);
            assert_eq!(crop_square(&out, mode, &mut rng_from_seed(4)), out);
        }
    }

    #[test]
    fn resize_identity_and_constants() {
        let img = gradient(17, 17);
        assert_eq!(resize_bilinear(&img, 17, 17).unwrap(), img);
        let flat = ImageBuffer::filled(13, 7, [0.3, 0.6, 0.9]);
        let out = resize_bilinear(&flat, 40, 21).unwrap();
        for px in out.data().chunks(3) {
            assert!((px[0] - 0.3).abs() < 1e-6 && (px[1] - 0.6).abs() < 1e-6 && (px[2] - 0.9).abs() < 1e-6);
        }
        assert!((out.mean_intensity() - flat.mean_intensity()).abs() < 1e-6);
        assert!(resize_bilinear(&img, 0, 3).is_err());
    }

    #[test]
    fn upsampled_ramp_matches_bilinear_formula() {
        let img = ImageBuffer::new(2, 1, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let out = resize_bilinear(&img, 4, 1).unwrap();
        // half-pixel centres: source x = (i + 0.5) / 2 - 0.5, clamped to [0, 1]
        let expect = [0.0, 0.25, 0.75, 1.0];
        for (i, e) in expect.iter().enumerate() {
            assert!((out.pixel(i, 0)[0] - e).abs() < 1e-6);
        }
        assert!(expect.windows(2).all(|w| w[0] <= w[1]));
    }
}
