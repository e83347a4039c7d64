//! Strong augmentation policy (random resized crop, colour jitter, Gaussian
//! blur, random grayscale) and the light crop-and-flip policy used for
//! supervised epochs.
//!
//! Transforms run on floating-point pixels in [0, 1]; quantization to 8 bits
//! happens only when an [`Image`] is produced.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, ImageRef, ImageShape};

/// Interleaved floating-point image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub shape: ImageShape,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn from_u8(img: ImageRef<'_>) -> Self {
        Self {
            shape: img.shape,
            data: img.data.iter().map(|&p| p as f64 / 255.0).collect(),
        }
    }

    pub fn quantize(&self) -> Image {
        let data = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Image::new(self.shape, data)
    }

    #[inline]
    fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.shape.width + x) * self.shape.channels + c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    /// Fraction of the source area kept by the crop.
    pub crop_scale_range: (f64, f64),
    /// Aspect ratio (width / height) range of the crop.
    pub crop_ratio_range: (f64, f64),
    /// Maximum brightness, contrast, saturation and hue deltas.
    pub jitter_strengths: [f64; 4],
    pub jitter_prob: f64,
    pub blur_sigma_range: (f64, f64),
    pub blur_apply_prob: f64,
    pub grayscale_prob: f64,
    /// Output (height, width); `None` keeps the source resolution.
    pub output_size: Option<(usize, usize)>,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self::simclr(None)
    }
}

impl AugmentationPolicy {
    /// The contrastive-learning settings: crop scale (0.2, 1), jitter
    /// (0.4, 0.4, 0.4, 0.1) applied with probability 0.8, blur sigma
    /// (0.1, 2.0) with probability 0.5, grayscale with probability 0.2.
    pub fn simclr(output_size: impl Into<Option<(usize, usize)>>) -> Self {
        Self {
            crop_scale_range: (0.2, 1.0),
            crop_ratio_range: (3.0 / 4.0, 4.0 / 3.0),
            jitter_strengths: [0.4, 0.4, 0.4, 0.1],
            jitter_prob: 0.8,
            blur_sigma_range: (0.1, 2.0),
            blur_apply_prob: 0.5,
            grayscale_prob: 0.2,
            output_size: output_size.into(),
        }
    }

    pub fn identity(output_size: impl Into<Option<(usize, usize)>>) -> Self {
        Self {
            crop_scale_range: (1.0, 1.0),
            crop_ratio_range: (1.0, 1.0),
            jitter_strengths: [0.0; 4],
            jitter_prob: 0.0,
            blur_sigma_range: (0.1, 2.0),
            blur_apply_prob: 0.0,
            grayscale_prob: 0.0,
            output_size: output_size.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::config(format!("augment.{name}"), "probability must lie in [0, 1]"))
            }
        };
        prob("jitter_prob", self.jitter_prob)?;
        prob("blur_apply_prob", self.blur_apply_prob)?;
        prob("grayscale_prob", self.grayscale_prob)?;
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config("augment.crop_scale_range", "need 0 < min <= max <= 1"));
        }
        let (lo, hi) = self.crop_ratio_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config("augment.crop_ratio_range", "need 0 < min <= max"));
        }
        if self.jitter_strengths.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::config("augment.jitter_strengths", "must be finite and non-negative"));
        }
        if self.jitter_strengths[3] > 0.5 {
            return Err(Error::config("augment.jitter_strengths", "hue delta must not exceed 0.5"));
        }
        let (lo, hi) = self.blur_sigma_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config("augment.blur_sigma_range", "need 0 < min <= max"));
        }
        if self.output_size.is_some_and(|(h, w)| h == 0 || w == 0) {
            return Err(Error::config("augment.output_size", "must be non-zero"));
        }
        Ok(())
    }

    fn full_frame(&self) -> bool {
        self.crop_scale_range == (1.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Window {
    top: usize,
    left: usize,
    height: usize,
    width: usize,
}

fn crop_window<R: Rng>(shape: ImageShape, policy: &AugmentationPolicy, rng: &mut R) -> Result<Window> {
    let (h, w) = (shape.height, shape.width);
    if h == 0 || w == 0 {
        return Err(Error::Augmentation(format!("cannot crop an empty {shape} image")));
    }
    if policy.full_frame() {
        return Ok(Window {
            top: 0,
            left: 0,
            height: h,
            width: w,
        });
    }
    let area = (h * w) as f64;
    let (s0, s1) = policy.crop_scale_range;
    let (r0, r1) = policy.crop_ratio_range;
    for _ in 0..10 {
        let target = area * rng.random_range(s0..=s1);
        let ratio = rng.random_range(r0.ln()..=r1.ln()).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            return Ok(Window {
                top: rng.random_range(0..=h - ch),
                left: rng.random_range(0..=w - cw),
                height: ch,
                width: cw,
            });
        }
    }
    // Centre crop at the nearest admissible aspect ratio.
    let in_ratio = w as f64 / h as f64;
    let (cw, ch) = if in_ratio < r0 {
        (w, (w as f64 / r0).round() as usize)
    } else if in_ratio > r1 {
        ((h as f64 * r1).round() as usize, h)
    } else {
        (w, h)
    };
    if cw == 0 || ch == 0 {
        return Err(Error::Augmentation(format!(
            "degenerate {ch}x{cw} crop window on a {shape} image"
        )));
    }
    Ok(Window {
        top: (h - ch) / 2,
        left: (w - cw) / 2,
        height: ch,
        width: cw,
    })
}

/// Bilinear resample of `window` to `out`, half-pixel centres.
fn resized_crop(src: &FloatImage, window: Window, out: (usize, usize)) -> FloatImage {
    let c = src.shape.channels;
    let (oh, ow) = out;
    let shape = ImageShape::new(oh, ow, c);
    let mut data = vec![0.0; shape.len()];
    let sy = window.height as f64 / oh as f64;
    let sx = window.width as f64 / ow as f64;
    let axis = |d: usize, scale: f64, len: usize| {
        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f64)
    };
    for y in 0..oh {
        let (y0, y1, fy) = axis(y, sy, window.height);
        for x in 0..ow {
            let (x0, x1, fx) = axis(x, sx, window.width);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src.data[src.idx(window.top + yy, window.left + xx, ch)];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                data[(y * ow + x) * c + ch] = if fy == 0.0 { top } else { top * (1.0 - fy) + bottom * fy };
            }
        }
    }
    FloatImage { shape, data }
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn is_rgb(img: &FloatImage) -> bool {
    img.shape.channels == 3
}

fn brightness(img: &mut FloatImage, factor: f64) {
    for v in &mut img.data {
        *v = (*v * factor).clamp(0.0, 1.0);
    }
}

fn contrast(img: &mut FloatImage, factor: f64) {
    let mean = if is_rgb(img) {
        let px = img.data.len() / 3;
        img.data.chunks_exact(3).map(|p| luma(p[0], p[1], p[2])).sum::<f64>() / px as f64
    } else {
        img.data.iter().sum::<f64>() / img.data.len() as f64
    };
    for v in &mut img.data {
        *v = ((*v - mean) * factor + mean).clamp(0.0, 1.0);
    }
}

fn saturation(img: &mut FloatImage, factor: f64) {
    if !is_rgb(img) {
        return;
    }
    for p in img.data.chunks_exact_mut(3) {
        let g = luma(p[0], p[1], p[2]);
        for v in p {
            *v = ((*v - g) * factor + g).clamp(0.0, 1.0);
        }
    }
}

fn hue(img: &mut FloatImage, shift: f64) {
    if !is_rgb(img) {
        return;
    }
    for p in img.data.chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv(p[0], p[1], p[2]);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        p[0] = r.clamp(0.0, 1.0);
        p[1] = g.clamp(0.0, 1.0);
        p[2] = b.clamp(0.0, 1.0);
    }
}

fn grayscale(img: &mut FloatImage) {
    if !is_rgb(img) {
        return;
    }
    for p in img.data.chunks_exact_mut(3) {
        let g = luma(p[0], p[1], p[2]).clamp(0.0, 1.0);
        p.fill(g);
    }
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(img: &mut FloatImage, sigma: f64) {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|t| (-((t * t) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let ImageShape {
        height: h,
        width: w,
        channels: c,
    } = img.shape;
    let mut tmp = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, t) in kernel.iter().zip(-radius..=radius) {
                    let xx = (x as isize + t).clamp(0, w as isize - 1) as usize;
                    acc += k * img.data[(y * w + xx) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, t) in kernel.iter().zip(-radius..=radius) {
                    let yy = (y as isize + t).clamp(0, h as isize - 1) as usize;
                    acc += k * tmp[(yy * w + x) * c + ch];
                }
                img.data[(y * w + x) * c + ch] = acc.clamp(0.0, 1.0);
            }
        }
    }
}

/// Applies `policy` once, returning floating-point pixels.
pub fn apply_policy_float<R: Rng>(
    image: ImageRef<'_>,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<FloatImage> {
    policy.validate()?;
    let window = crop_window(image.shape, policy, rng)?;
    let src = FloatImage::from_u8(image);
    let size = policy.output_size.unwrap_or((image.shape.height, image.shape.width));
    let mut out = resized_crop(&src, window, size);

    let [sb, sc, ss, sh] = policy.jitter_strengths;
    if policy.jitter_prob > 0.0 && rng.random_bool(policy.jitter_prob) {
        let factor = |rng: &mut R, s: f64| {
            if s == 0.0 {
                1.0
            } else {
                rng.random_range((1.0 - s).max(0.0)..=1.0 + s)
            }
        };
        let b = factor(rng, sb);
        let c = factor(rng, sc);
        let s = factor(rng, ss);
        let h = if sh == 0.0 { 0.0 } else { rng.random_range(-sh..=sh) };
        if b != 1.0 {
            brightness(&mut out, b);
        }
        if c != 1.0 {
            contrast(&mut out, c);
        }
        if s != 1.0 {
            saturation(&mut out, s);
        }
        if h != 0.0 {
            hue(&mut out, h);
        }
    }
    if policy.grayscale_prob > 0.0 && rng.random_bool(policy.grayscale_prob) {
        grayscale(&mut out);
    }
    if policy.blur_apply_prob > 0.0 && rng.random_bool(policy.blur_apply_prob) {
        let (lo, hi) = policy.blur_sigma_range;
        let sigma = rng.random_range(lo..=hi);
        gaussian_blur(&mut out, sigma);
    }
    Ok(out)
}

pub fn apply_policy<R: Rng>(image: ImageRef<'_>, policy: &AugmentationPolicy, rng: &mut R) -> Result<Image> {
    apply_policy_float(image, policy, rng).map(|f| f.quantize())
}

/// Two independent draws of the policy on the same image.
pub fn make_view_pair<R: Rng>(
    image: ImageRef<'_>,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<(Image, Image)> {
    let a = apply_policy(image, policy, rng)?;
    let b = apply_policy(image, policy, rng)?;
    Ok((a, b))
}

/// Random crop after zero padding, then horizontal flip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LightAugment {
    pub pad: usize,
    pub flip_prob: f64,
}

impl Default for LightAugment {
    fn default() -> Self {
        Self {
            pad: 1,
            flip_prob: 0.5,
        }
    }
}

impl LightAugment {
    pub fn none() -> Self {
        Self {
            pad: 0,
            flip_prob: 0.0,
        }
    }

    pub fn apply<R: Rng>(&self, image: ImageRef<'_>, rng: &mut R) -> FloatImage {
        let src = FloatImage::from_u8(image);
        let ImageShape {
            height: h,
            width: w,
            channels: c,
        } = src.shape;
        let dy = if self.pad > 0 { rng.random_range(0..=2 * self.pad) } else { 0 } as isize - self.pad as isize;
        let dx = if self.pad > 0 { rng.random_range(0..=2 * self.pad) } else { 0 } as isize - self.pad as isize;
        let flip = self.flip_prob > 0.0 && rng.random_bool(self.flip_prob);
        if dy == 0 && dx == 0 && !flip {
            return src;
        }
        let mut data = vec![0.0; src.data.len()];
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let ox = if flip { w - 1 - x } else { x };
                let sx = ox as isize + dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let s = (sy as usize * w + sx as usize) * c;
                let d = (y * w + x) * c;
                data[d..d + c].copy_from_slice(&src.data[s..s + c]);
            }
        }
        FloatImage { shape: src.shape, data }
    }
}
