//! RGB images in `[0, 1]`: PNG I/O, luma, bicubic resampling, PSNR,
//! dihedral transforms and LR/HR training crops.

use std::path::Path;

use rand::{Rng, RngExt};

use crate::grid;
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("png decode: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("png encode: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("unsupported png format: {0}")]
    Unsupported(String),
    #[error("image must have 3 channels, got shape {0:?}")]
    Channels(Vec<usize>),
    #[error("output size {0}x{1} is empty")]
    EmptyOutput(usize, usize),
    #[error("image {h}x{w} too small: {msg}")]
    TooSmall { h: usize, w: usize, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// `[H, W, 3]` RGB tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(Tensor<f32>);

impl Image {
    pub fn new(tensor: Tensor<f32>) -> Result<Self, ImageError> {
        match tensor.shape() {
            [_, _, 3] => Ok(Self(tensor)),
            s => Err(ImageError::Channels(s.to_vec())),
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        Self(Tensor::from_fn(&[h, w, 3], |i| f(i / 3 / w, (i / 3) % w, i % 3)))
    }

    pub fn filled(h: usize, w: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(h, w, |_, _, c| rgb[c])
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.0.data()[(y * self.width() + x) * 3 + c]
    }

    pub fn clamped(&self) -> Self {
        Self(self.0.map(|v| v.clamp(0.0, 1.0)))
    }

    /// Rectangular window `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self, ImageError> {
        if y0 + h > self.height() || x0 + w > self.width() {
            return Err(ImageError::TooSmall {
                h: self.height(),
                w: self.width(),
                msg: format!("crop {h}x{w} at ({y0},{x0}) out of bounds"),
            });
        }
        Ok(crop_hwc(&self.0, y0, x0, h, w).map(Self)?)
    }
}

fn crop_hwc<T: Scalar>(t: &Tensor<T>, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor<T>, TensorError> {
    let (_, tw, c) = t.dims3()?;
    let mut out = Vec::with_capacity(h * w * c);
    for y in y0..y0 + h {
        let s = (y * tw + x0) * c;
        out.extend_from_slice(&t.data()[s..s + w * c]);
    }
    Tensor::new(vec![h, w, c], out)
}

// ---------------------------------------------------------------------------
// PNG

/// Decodes an 8-bit RGB or RGBA PNG (alpha dropped), mapping byte `p` to `p/255`.
pub fn decode_png(bytes: &[u8]) -> Result<Image, ImageError> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let info = reader.info();
    let (w, h) = (info.width as usize, info.height as usize);
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ImageError::Unsupported(format!("bit depth {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(ImageError::Unsupported(format!("color type {other:?}"))),
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ImageError::Unsupported("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf)?;
    let stride = frame.line_size;
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        let row = &buf[y * stride..y * stride + w * channels];
        for px in row.chunks_exact(channels) {
            data.extend(px[..3].iter().map(|&b| b as f32 / 255.0));
        }
    }
    Image::new(Tensor::new(vec![h, w, 3], data)?)
}

pub fn load_png(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_png(&bytes)
}

/// 8-bit RGB PNG; values are clamped to `[0, 1]` and rounded.
pub fn encode_png(image: &Image) -> Result<Vec<u8>, ImageError> {
    let (h, w) = (image.height(), image.width());
    if h == 0 || w == 0 {
        return Err(ImageError::EmptyOutput(h, w));
    }
    let bytes: Vec<u8> = image
        .tensor()
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&bytes)?;
    }
    Ok(out)
}

pub fn save_png(image: &Image, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let bytes = encode_png(image)?;
    std::fs::write(path, bytes).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })
}

// ---------------------------------------------------------------------------
// color

/// BT.601 studio-swing luma, `(65.481 R + 128.553 G + 24.966 B + 16) / 255`.
pub fn rgb_to_y(image: &Image) -> Tensor<f32> {
    let (h, w) = (image.height(), image.width());
    let data = image
        .tensor()
        .data()
        .chunks_exact(3)
        .map(|p| {
            let y = 65.481 * p[0] as f64 + 128.553 * p[1] as f64 + 24.966 * p[2] as f64 + 16.0;
            (y / 255.0) as f32
        })
        .collect();
    Tensor::new(vec![h, w, 1], data).expect("shape matches")
}

// ---------------------------------------------------------------------------
// bicubic

const CUBIC_A: f64 = -0.5;

/// Cubic convolution kernel with `a = -0.5` (Catmull-Rom).
pub fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Normalized 1D resampling taps for one output sample.
#[derive(Clone, Debug)]
pub(crate) struct Taps {
    pub(crate) indices: Vec<usize>,
    pub(crate) weights: Vec<f64>,
}

/// Taps for every output sample of an axis. `in_per_out` is the input
/// distance between consecutive output samples (`1/scale`). When it exceeds
/// one, the kernel is stretched by that factor to antialias.
pub(crate) fn axis_taps(in_len: usize, out_len: usize, in_per_out: f64) -> Vec<Taps> {
    let stretch = in_per_out.max(1.0);
    let support = 2.0 * stretch;
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) * in_per_out - 0.5;
            let first = (center - support).floor() as isize;
            let last = (center + support).ceil() as isize;
            let mut indices = Vec::new();
            let mut weights = Vec::new();
            for i in first..=last {
                let wgt = cubic((center - i as f64) / stretch);
                if wgt == 0.0 {
                    continue;
                }
                indices.push(i.clamp(0, in_len as isize - 1) as usize);
                weights.push(wgt);
            }
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            Taps { indices, weights }
        })
        .collect()
}

fn resample(image: &Image, out_h: usize, out_w: usize, in_per_out_h: f64, in_per_out_w: f64) -> Result<Image, ImageError> {
    if out_h == 0 || out_w == 0 {
        return Err(ImageError::EmptyOutput(out_h, out_w));
    }
    let (h, w) = (image.height(), image.width());
    let src = image.tensor().data();
    let cols = axis_taps(w, out_w, in_per_out_w);
    let rows = axis_taps(h, out_h, in_per_out_h);
    // Horizontal pass into f64 scratch, then vertical.
    let mut mid = vec![0.0f64; h * out_w * 3];
    for y in 0..h {
        for (x, t) in cols.iter().enumerate() {
            for c in 0..3 {
                mid[(y * out_w + x) * 3 + c] = t
                    .indices
                    .iter()
                    .zip(&t.weights)
                    .map(|(&i, &wt)| wt * src[(y * w + i) * 3 + c] as f64)
                    .sum();
            }
        }
    }
    let mut out = vec![0.0f32; out_h * out_w * 3];
    for (y, t) in rows.iter().enumerate() {
        for x in 0..out_w {
            for c in 0..3 {
                let v: f64 = t
                    .indices
                    .iter()
                    .zip(&t.weights)
                    .map(|(&i, &wt)| wt * mid[(i * out_w + x) * 3 + c])
                    .sum();
                out[(y * out_w + x) * 3 + c] = v as f32;
            }
        }
    }
    Image::new(Tensor::new(vec![out_h, out_w, 3], out)?)
}

/// Separable bicubic resize to `⌊s_h·H⌋ × ⌊s_w·W⌋`, edge-clamped, with
/// antialiasing when downscaling.
pub fn bicubic_resize(image: &Image, s_h: f64, s_w: f64) -> Result<Image, ImageError> {
    if !(s_h > 0.0 && s_w > 0.0 && s_h.is_finite() && s_w.is_finite()) {
        return Err(ImageError::EmptyOutput(0, 0));
    }
    let out_h = grid::scaled_len(image.height(), s_h);
    let out_w = grid::scaled_len(image.width(), s_w);
    resample(image, out_h, out_w, 1.0 / s_h, 1.0 / s_w)
}

/// Bicubic downscale by `s` (equivalent to `bicubic_resize(image, 1/s, 1/s)`
/// without the reciprocal round trip).
pub fn bicubic_downscale(image: &Image, s: f64) -> Result<Image, ImageError> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(ImageError::EmptyOutput(0, 0));
    }
    let out_h = grid::scaled_len(image.height(), 1.0 / s);
    let out_w = grid::scaled_len(image.width(), 1.0 / s);
    resample(image, out_h, out_w, s, s)
}

// ---------------------------------------------------------------------------
// PSNR

/// `10·log10(1/MSE)` over all elements of two `[0,1]` tensors, ignoring a
/// `border`-pixel frame. Identical inputs give `+inf`.
pub fn psnr_cropped(a: &Tensor<f32>, b: &Tensor<f32>, border: usize) -> Result<f64, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "psnr",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (h, w, c) = a.dims3()?;
    if 2 * border >= h || 2 * border >= w {
        return Err(TensorError::InvalidArgument {
            op: "psnr",
            msg: format!("border {border} leaves no pixels of {h}x{w}"),
        });
    }
    let mut se = 0.0f64;
    let mut n = 0usize;
    for y in border..h - border {
        for x in border..w - border {
            for ch in 0..c {
                let i = (y * w + x) * c + ch;
                let d = a.data()[i] as f64 - b.data()[i] as f64;
                se += d * d;
                n += 1;
            }
        }
    }
    let mse = se / n as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64, TensorError> {
    psnr_cropped(a, b, 0)
}

/// CSV rendering of a PSNR value (`inf` for identical inputs).
pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

// ---------------------------------------------------------------------------
// dihedral group

/// One of the 8 symmetries of the square: `index = rotations + 4·flipped`,
/// where the transform first mirrors horizontally (if flipped) and then
/// rotates by `rotations × 90°` clockwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DihedralTransform(u8);

impl DihedralTransform {
    pub const IDENTITY: Self = Self(0);
    pub const ROT180: Self = Self(2);

    pub fn new(index: u8) -> Option<Self> {
        (index < 8).then_some(Self(index))
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (0..8).map(Self)
    }

    pub fn index(self) -> u8 {
        self.0
    }

    fn rotations(self) -> u8 {
        self.0 % 4
    }

    fn flipped(self) -> bool {
        self.0 >= 4
    }

    /// Signed permutation acting on centred coordinates `(row, col)`.
    fn matrix(self) -> [[i8; 2]; 2] {
        let mut m = if self.flipped() { [[1, 0], [0, -1]] } else { [[1, 0], [0, 1]] };
        for _ in 0..self.rotations() {
            // Clockwise quarter turn: (r, c) -> (c, -r).
            m = [[m[1][0], m[1][1]], [-m[0][0], -m[0][1]]];
        }
        m
    }

    fn from_matrix(m: [[i8; 2]; 2]) -> Self {
        Self::all().find(|t| t.matrix() == m).expect("closed group")
    }

    /// The transform equivalent to applying `self` and then `next`.
    pub fn then(self, next: Self) -> Self {
        let (a, b) = (self.matrix(), next.matrix());
        let mut m = [[0i8; 2]; 2];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = b[i][0] * a[0][j] + b[i][1] * a[1][j];
            }
        }
        Self::from_matrix(m)
    }

    pub fn inverse(self) -> Self {
        Self::all().find(|t| self.then(*t) == Self::IDENTITY).expect("group inverse")
    }
}

fn transform_hwc<T: Scalar>(x: &Tensor<T>, t: DihedralTransform) -> Result<Tensor<T>, TensorError> {
    let (h, w, c) = x.dims3()?;
    let m = t.matrix();
    let swapped = m[0][0] == 0;
    let (oh, ow) = if swapped { (w, h) } else { (h, w) };
    let mut out = vec![T::zero(); x.len()];
    // Doubled centred coordinates keep everything integral.
    for y in 0..h {
        for xx in 0..w {
            let r = 2 * y as i64 - (h as i64 - 1);
            let col = 2 * xx as i64 - (w as i64 - 1);
            let nr = m[0][0] as i64 * r + m[0][1] as i64 * col;
            let nc = m[1][0] as i64 * r + m[1][1] as i64 * col;
            let oy = ((nr + oh as i64 - 1) / 2) as usize;
            let ox = ((nc + ow as i64 - 1) / 2) as usize;
            let src = (y * w + xx) * c;
            let dst = (oy * ow + ox) * c;
            out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

/// Applies a dihedral transform to any `[H, W, C]` tensor.
pub fn apply_dihedral_tensor<T: Scalar>(x: &Tensor<T>, t: DihedralTransform) -> Result<Tensor<T>, TensorError> {
    transform_hwc(x, t)
}

pub fn apply_dihedral(image: &Image, t: DihedralTransform) -> Image {
    Image(transform_hwc(image.tensor(), t).expect("image is rank 3"))
}

pub fn invert_dihedral(image: &Image, t: DihedralTransform) -> Image {
    apply_dihedral(image, t.inverse())
}

// ---------------------------------------------------------------------------
// training crops

/// LR/HR patch pair with the HR patch's position in the LR patch's
/// target grid.
#[derive(Clone, Debug)]
pub struct CropPair {
    pub lr: Image,
    pub hr: Image,
    /// Target-grid coordinate `(y, x)` of the HR patch's top-left pixel,
    /// i.e. its HR position minus `s ×` the LR patch origin. HR pixel
    /// `(i, j)` of the patch sits at `origin + (i, j)`.
    pub origin: (f64, f64),
    pub scale: f64,
}

impl CropPair {
    /// Target coordinates of every HR patch pixel in row-major order.
    pub fn target_coords(&self) -> Vec<(f64, f64)> {
        let (h, w) = (self.hr.height(), self.hr.width());
        let mut out = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                out.push((self.origin.0 + i as f64, self.origin.1 + j as f64));
            }
        }
        out
    }
}

fn crop_axis(hr_len: usize, lr_len: usize, s: f64, crop: usize, rng: &mut impl Rng) -> Option<(usize, usize)> {
    // Candidate LR offsets whose HR region [o·s, (o+crop)·s) fits a crop-sized
    // integer window inside the HR image.
    let valid = |o: usize| -> Option<(usize, usize)> {
        let start = (o as f64 * s - 1e-9).ceil() as usize;
        let end = (((o + crop) as f64 * s + 1e-9).floor() as usize).min(hr_len);
        (end >= start + crop).then_some((start, end))
    };
    let max_o = lr_len.checked_sub(crop)?;
    let candidates: Vec<usize> = (0..=max_o).filter(|&o| valid(o).is_some()).collect();
    if candidates.is_empty() {
        return None;
    }
    let o = candidates[rng.random_range(0..candidates.len())];
    let (start, end) = valid(o).unwrap();
    let hr_start = start + rng.random_range(0..=end - start - crop);
    Some((o, hr_start))
}

/// Samples an LR patch of `bicubic_downscale(hr, s)` and an HR patch of the
/// same size lying inside the LR patch's HR footprint.
pub fn random_crop_pair(hr: &Image, s: f64, crop: usize, rng: &mut impl Rng) -> Result<CropPair, ImageError> {
    let lr_full = bicubic_downscale(hr, s)?;
    let too_small = || ImageError::TooSmall {
        h: hr.height(),
        w: hr.width(),
        msg: format!("no {crop}x{crop} crop pair at scale {s}"),
    };
    let (oy, hy) = crop_axis(hr.height(), lr_full.height(), s, crop, rng).ok_or_else(too_small)?;
    let (ox, hx) = crop_axis(hr.width(), lr_full.width(), s, crop, rng).ok_or_else(too_small)?;
    Ok(CropPair {
        lr: lr_full.crop(oy, ox, crop, crop)?,
        hr: hr.crop(hy, hx, crop, crop)?,
        origin: (hy as f64 - oy as f64 * s, hx as f64 - ox as f64 * s),
        scale: s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn rand_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let data: Vec<f32> = (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        Image::new(Tensor::new(vec![h, w, 3], data).unwrap()).unwrap()
    }

    #[test]
    fn png_round_trip_within_half_step() {
        let img = rand_image(5, 7, 1);
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        assert!(img.tensor().max_abs_diff(back.tensor()).unwrap() <= 1.0 / 510.0 + 1e-7);
    }

    #[test]
    fn png_black_and_direct_scaling() {
        let black = Image::filled(3, 2, [0.0; 3]);
        let back = decode_png(&encode_png(&black).unwrap()).unwrap();
        assert!(back.tensor().data().iter().all(|&v| v == 0.0));

        let two = Image::new(Tensor::new(vec![1, 2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap()).unwrap();
        let back = decode_png(&encode_png(&two).unwrap()).unwrap();
        assert_eq!(back.tensor().data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn png_rgba_drops_alpha_and_rejects_16_bit() {
        let mut bytes = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut bytes, 1, 1);
            enc.set_color(png::ColorType::Rgba);
            enc.set_depth(png::BitDepth::Eight);
            enc.write_header().unwrap().write_image_data(&[51, 102, 255, 7]).unwrap();
        }
        let img = decode_png(&bytes).unwrap();
        assert_eq!(img.tensor().data(), &[0.2, 0.4, 1.0]);

        let mut bytes = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut bytes, 1, 1);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Sixteen);
            enc.write_header().unwrap().write_image_data(&[0; 6]).unwrap();
        }
        assert!(matches!(decode_png(&bytes), Err(ImageError::Unsupported(_))));
        assert!(decode_png(b"not a png").is_err());
    }

    #[test]
    fn luma_formula() {
        let black = rgb_to_y(&Image::filled(1, 1, [0.0; 3]));
        assert!((black.data()[0] - 16.0 / 255.0).abs() < 1e-7);
        let white = rgb_to_y(&Image::filled(1, 1, [1.0; 3]));
        assert!((white.data()[0] - 235.0 / 255.0).abs() < 1e-6);
        let (r, g, b) = (0.3f32, 0.7f32, 0.1f32);
        let y = rgb_to_y(&Image::filled(1, 1, [r, g, b])).data()[0] as f64;
        let expect = (65.481 * r as f64 + 128.553 * g as f64 + 24.966 * b as f64 + 16.0) / 255.0;
        assert!((y - expect).abs() < 1e-7);
    }

    #[test]
    fn bicubic_constant_and_identity() {
        let c = Image::filled(9, 7, [0.25, 0.5, 0.75]);
        for &s in &[0.5, 1.0 / 3.0, 1.0, 1.7, 2.0, 4.0] {
            let out = bicubic_resize(&c, s, s).unwrap();
            for (i, &v) in out.tensor().data().iter().enumerate() {
                assert!((v - [0.25, 0.5, 0.75][i % 3]).abs() < 1e-6, "s={s}");
            }
        }
        let img = rand_image(6, 5, 2);
        let same = bicubic_resize(&img, 1.0, 1.0).unwrap();
        assert!(img.tensor().max_abs_diff(same.tensor()).unwrap() < 1e-6);
        assert!(bicubic_resize(&img, 0.01, 0.01).is_err());
    }

    #[test]
    fn bicubic_downscale_matches_direct_convolution() {
        let ramp = Image::from_fn(8, 8, |y, x, c| (y as f32 * 8.0 + x as f32) / 64.0 + 0.01 * c as f32);
        let out = bicubic_resize(&ramp, 0.5, 0.5).unwrap();
        assert_eq!((out.height(), out.width()), (4, 4));
        // Direct 2D evaluation of the antialiased Catmull-Rom kernel.
        let k = |x: f64| {
            let x = x.abs();
            if x <= 1.0 {
                1.5 * x.powi(3) - 2.5 * x.powi(2) + 1.0
            } else if x < 2.0 {
                -0.5 * x.powi(3) + 2.5 * x.powi(2) - 4.0 * x + 2.0
            } else {
                0.0
            }
        };
        for oy in 0..4 {
            for ox in 0..4 {
                let (cy, cx) = (oy as f64 * 2.0 + 0.5, ox as f64 * 2.0 + 0.5);
                for c in 0..3 {
                    let (mut num, mut den) = (0.0, 0.0);
                    for iy in -6i64..14 {
                        for ix in -6i64..14 {
                            let wgt = k((cy - iy as f64) / 2.0) * k((cx - ix as f64) / 2.0);
                            let (sy, sx) = (iy.clamp(0, 7) as usize, ix.clamp(0, 7) as usize);
                            num += wgt * ramp.get(sy, sx, c) as f64;
                            den += wgt;
                        }
                    }
                    assert!((out.get(oy, ox, c) as f64 - num / den).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn bicubic_weights_partition_unity() {
        for &(n, m, r) in &[(10, 20, 0.5), (10, 25, 0.4), (20, 10, 2.0), (21, 7, 3.0), (9, 9, 1.0)] {
            for t in axis_taps(n, m, r) {
                assert!((t.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn psnr_examples() {
        let a = rand_image(6, 6, 3);
        assert_eq!(psnr(a.tensor(), a.tensor()).unwrap(), f64::INFINITY);
        let z = Image::filled(4, 4, [0.2; 3]);
        let o = Image::filled(4, 4, [0.3; 3]);
        assert!((psnr(z.tensor(), o.tensor()).unwrap() - 20.0).abs() < 1e-4);
        let b = rand_image(6, 6, 4);
        let mut se = 0.0f64;
        for (x, y) in a.tensor().data().iter().zip(b.tensor().data()) {
            se += (*x as f64 - *y as f64).powi(2);
        }
        let expect = 10.0 * (1.0 / (se / 108.0)).log10();
        assert!((psnr(a.tensor(), b.tensor()).unwrap() - expect).abs() < 1e-9);
        assert_eq!(psnr(a.tensor(), b.tensor()).unwrap(), psnr(b.tensor(), a.tensor()).unwrap());
        assert!(psnr(a.tensor(), rand_image(5, 6, 0).tensor()).is_err());
        assert_eq!(format_psnr(f64::INFINITY), "inf");
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let a = rand_image(8, 8, 5);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(6);
        let noise: Vec<f32> = (0..a.tensor().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for amp in [0.01f32, 0.02, 0.05, 0.1, 0.2] {
            let noisy = Tensor::new(
                vec![8, 8, 3],
                a.tensor().data().iter().zip(&noise).map(|(v, n)| v + amp * n).collect(),
            )
            .unwrap();
            let p = psnr(a.tensor(), &noisy).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn dihedral_examples() {
        let img = rand_image(3, 5, 7);
        assert_eq!(apply_dihedral(&img, DihedralTransform::IDENTITY), img);
        let r = DihedralTransform::ROT180;
        assert_eq!(apply_dihedral(&apply_dihedral(&img, r), r), img);
        let all: Vec<Image> = DihedralTransform::all().map(|t| apply_dihedral(&img, t)).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(all[i], all[j]);
            }
        }
        for t in DihedralTransform::all() {
            assert_eq!(invert_dihedral(&apply_dihedral(&img, t), t), img);
        }
        // Clockwise quarter turn of a 2x3 index grid.
        let grid = Tensor::new(vec![2, 3, 1], vec![0.0f32, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let rot = apply_dihedral_tensor(&grid, DihedralTransform::new(1).unwrap()).unwrap();
        assert_eq!(rot.shape(), &[3, 2, 1]);
        assert_eq!(rot.data(), &[3.0, 0.0, 4.0, 1.0, 5.0, 2.0]);
        assert!(DihedralTransform::new(8).is_none());
    }

    #[test]
    fn dihedral_composition_table_is_exhaustively_consistent() {
        let img = rand_image(4, 6, 8);
        for a in DihedralTransform::all() {
            for b in DihedralTransform::all() {
                let seq = apply_dihedral(&apply_dihedral(&img, a), b);
                assert_eq!(seq, apply_dihedral(&img, a.then(b)));
            }
            assert_eq!(a.then(a.inverse()), DihedralTransform::IDENTITY);
        }
        // Closure and group order.
        let mut seen = std::collections::HashSet::new();
        for a in DihedralTransform::all() {
            for b in DihedralTransform::all() {
                seen.insert(a.then(b));
            }
        }
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn crop_pair_scale_one_is_same_crop() {
        let hr = rand_image(20, 20, 9);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(10);
        let pair = random_crop_pair(&hr, 1.0, 6, &mut rng).unwrap();
        assert_eq!(pair.origin, (0.0, 0.0));
        assert!(pair.lr.tensor().max_abs_diff(pair.hr.tensor()).unwrap() < 1e-6);
    }

    #[test]
    fn crop_pair_scale_two_containment_and_index_map() {
        let hr = rand_image(32, 32, 11);
        let lr_full = bicubic_downscale(&hr, 2.0).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(12);
        for _ in 0..50 {
            let pair = random_crop_pair(&hr, 2.0, 4, &mut rng).unwrap();
            let (oy, ox) = pair.origin;
            assert!(oy >= 0.0 && ox >= 0.0 && oy + 4.0 <= 8.0 && ox + 4.0 <= 8.0);
            assert_eq!(oy.fract(), 0.0);
            // Locate the LR crop in the full LR image and check the HR crop
            // against explicit index arithmetic.
            let mut found = false;
            for ly in 0..=lr_full.height() - 4 {
                for lx in 0..=lr_full.width() - 4 {
                    if lr_full.crop(ly, lx, 4, 4).unwrap() == pair.lr {
                        let (hy, hx) = (2 * ly + oy as usize, 2 * lx + ox as usize);
                        assert_eq!(hr.crop(hy, hx, 4, 4).unwrap(), pair.hr);
                        if (oy, ox) == (0.0, 0.0) {
                            assert_eq!(hr.crop(2 * ly, 2 * lx, 4, 4).unwrap(), pair.hr);
                        }
                        found = true;
                    }
                }
            }
            assert!(found);
        }
    }

    #[test]
    fn crop_pair_too_small() {
        let hr = rand_image(8, 8, 13);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
        assert!(matches!(
            random_crop_pair(&hr, 3.0, 4, &mut rng),
            Err(ImageError::TooSmall { .. })
        ));
    }

    proptest! {
        #[test]
        fn crop_pair_offsets_lie_in_unit_interval(s in 1.0f64..4.0, seed in any::<u64>()) {
            let hr = rand_image(48, 48, seed);
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            let pair = random_crop_pair(&hr, s, 8, &mut rng).unwrap();
            for (y, x) in pair.target_coords() {
                for (v, lim) in [(y, 8usize), (x, 8usize)] {
                    let (src, d) = grid::source_and_offset(v, s);
                    prop_assert!((0.0..1.0).contains(&d));
                    prop_assert!(src < lim);
                }
            }
        }
    }
}
