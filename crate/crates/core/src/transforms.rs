//! Neuromimetic image views: foveation, additive noise, low resolution and mosaic.
//!
//! Every function here is pure in its inputs and seed, so identical calls give
//! bit-identical images.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::seeded_rng;
use crate::scalar::Scalar;
use num_rational::Ratio;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// The four views, in the fixed order they are stacked and encoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Foveated,
    Noise,
    LowRes,
    Mosaic,
}

impl View {
    pub const ALL: [View; 4] = [View::Foveated, View::Noise, View::LowRes, View::Mosaic];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            View::Foveated => "foveated",
            View::Noise => "noise",
            View::LowRes => "low_res",
            View::Mosaic => "mosaic",
        }
    }
}

/// Exact resampling factor in `(0, 1]`, written `"num/den"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Scale(Ratio<u32>);

impl Scale {
    pub fn new(numer: u32, denom: u32) -> Result<Self> {
        if numer == 0 || denom == 0 || numer > denom {
            return Err(Error::Config(format!("scale {numer}/{denom} must lie in (0, 1]")));
        }
        Ok(Self(Ratio::new(numer, denom)))
    }

    pub fn one() -> Self {
        Self(Ratio::from_integer(1))
    }

    pub fn is_one(&self) -> bool {
        *self.0.numer() == *self.0.denom()
    }

    /// `⌊n · scale⌋`, the downsampled extent of a dimension of length `n`.
    pub fn apply(&self, n: usize) -> usize {
        n * *self.0.numer() as usize / *self.0.denom() as usize
    }

    pub fn as_f64(&self) -> f64 {
        *self.0.numer() as f64 / *self.0.denom() as f64
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.0.numer(), self.0.denom())
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse scale {s:?}, expected \"num/den\""));
        let (n, d) = match s.split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (s.trim(), "1"),
        };
        Scale::new(n.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?)
    }
}

impl TryFrom<String> for Scale {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Scale> for String {
    fn from(s: Scale) -> String {
        s.to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoveationParams<T> {
    /// `(row, col)`; `None` means the geometric centre of the image.
    pub center: Option<(T, T)>,
    pub gamma: T,
    pub kernel_size: u32,
    pub perturbation: u32,
}

impl<T: Scalar> FoveationParams<T> {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if !(self.gamma > T::zero()) {
            return Err(Error::Config(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        check_kernel_size(self.kernel_size)?;
        if self.perturbation == 0 || !self.perturbation.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "perturbation must be even and positive, got {}",
                self.perturbation
            )));
        }
        let (r, c) = self.center_for(height, width);
        let inside = |v: T, n: usize| v >= T::zero() && v <= T::from_usize(n - 1).unwrap();
        if !(inside(r, height) && inside(c, width)) {
            return Err(Error::Config(format!(
                "foveation centre ({r}, {c}) outside {height}x{width} image"
            )));
        }
        Ok(())
    }

    pub fn center_for(&self, height: usize, width: usize) -> (T, T) {
        self.center.unwrap_or_else(|| geometric_center(height, width))
    }

    pub fn with_kernel(&self, kernel_size: u32) -> Self {
        Self {
            kernel_size,
            ..self.clone()
        }
    }
}

fn geometric_center<T: Scalar>(height: usize, width: usize) -> (T, T) {
    let half = T::lit(0.5);
    (
        T::from_usize(height - 1).unwrap() * half,
        T::from_usize(width - 1).unwrap() * half,
    )
}

pub(crate) fn check_kernel_size(k: u32) -> Result<()> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "kernel size must be odd and positive, got {k}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewParams<T> {
    /// Standard deviation on the 0–255 pixel scale.
    pub noise_sigma: T,
    pub scale_low: Scale,
    pub scale_mosaic: Scale,
    pub noise_seed: u64,
}

impl<T: Scalar> ViewParams<T> {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if !(self.noise_sigma >= T::zero()) {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        for s in [self.scale_low, self.scale_mosaic] {
            if s.apply(height) == 0 || s.apply(width) == 0 {
                return Err(Error::Config(format!(
                    "scale {s} shrinks a {height}x{width} image below one pixel"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoveationMask<T> {
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> FoveationMask<T> {
    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.values[r * self.width + c]
    }
}

/// `M(i,j) = exp(-γ · d(i,j) / D)` with `D` the largest centre-to-pixel distance.
///
/// A 1×1 grid has `D = 0`; its mask is all ones.
pub fn foveation_mask<T: Scalar>(height: usize, width: usize, center: (T, T), gamma: T) -> FoveationMask<T> {
    let (cr, cc) = center;
    let dist = |r: usize, c: usize| {
        let dr = T::from_usize(r).unwrap() - cr;
        let dc = T::from_usize(c).unwrap() - cc;
        (dr * dr + dc * dc).sqrt()
    };
    let max_dist = [(0, 0), (0, width - 1), (height - 1, 0), (height - 1, width - 1)]
        .into_iter()
        .map(|(r, c)| dist(r, c))
        .fold(T::zero(), T::max);
    let mut values = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let v = if max_dist > T::zero() {
                (-gamma * dist(r, c) / max_dist).exp()
            } else {
                T::one()
            };
            values.push(v);
        }
    }
    FoveationMask {
        height,
        width,
        values,
    }
}

/// Gaussian width for a kernel of `k` taps: `0.3·((k−1)/2 − 1) + 0.8`.
pub fn blur_sigma(kernel_size: u32) -> f64 {
    0.3 * ((kernel_size as f64 - 1.0) * 0.5 - 1.0) + 0.8
}

/// Normalized 1-D Gaussian taps, centre at index `k/2`.
pub fn gaussian_kernel<T: Scalar>(kernel_size: u32) -> Vec<T> {
    if kernel_size == 1 {
        return vec![T::one()];
    }
    let sigma = blur_sigma(kernel_size);
    let radius = (kernel_size / 2) as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|t| (-((t * t) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| T::lit(w / total)).collect()
}

/// Reflect-101 border index (`dcb|abcd|cba`), valid for any offset.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Separable Gaussian blur with reflect-101 padding. `k = 1` is the identity.
pub fn gaussian_blur<T: Scalar>(image: &Image<T>, kernel_size: u32) -> Result<Image<T>> {
    check_kernel_size(kernel_size)?;
    if kernel_size == 1 {
        return Ok(image.clone());
    }
    let taps = gaussian_kernel::<T>(kernel_size);
    let radius = (kernel_size / 2) as isize;
    let (h, w) = (image.height(), image.width());
    let col_index: Vec<Vec<usize>> = (0..w as isize)
        .map(|x| (-radius..=radius).map(|t| reflect_index(x + t, w)).collect())
        .collect();
    let row_index: Vec<Vec<usize>> = (0..h as isize)
        .map(|y| (-radius..=radius).map(|t| reflect_index(y + t, h)).collect())
        .collect();

    let mut out = image.clone();
    let mut tmp = vec![T::zero(); h * w];
    for c in 0..image.channels() {
        let src = image.plane(c);
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for x in 0..w {
                tmp[y * w + x] = taps
                    .iter()
                    .zip(&col_index[x])
                    .fold(T::zero(), |acc, (&wt, &i)| acc + wt * row[i]);
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = taps
                    .iter()
                    .zip(&row_index[y])
                    .fold(T::zero(), |acc, (&wt, &i)| acc + wt * tmp[i * w + x]);
            }
        }
    }
    out.clamp_unit();
    Ok(out)
}

/// `I_fov = M ⊙ I + (1 − M) ⊙ blur_k(I)`, mask broadcast over channels.
pub fn foveate<T: Scalar>(image: &Image<T>, params: &FoveationParams<T>) -> Result<Image<T>> {
    let (h, w) = (image.height(), image.width());
    params.validate(h, w)?;
    if params.kernel_size == 1 {
        return Ok(image.clone());
    }
    let blurred = gaussian_blur(image, params.kernel_size)?;
    let mask = foveation_mask(h, w, params.center_for(h, w), params.gamma);
    let mut out = image.clone();
    for c in 0..image.channels() {
        let sharp = image.plane(c);
        let soft = blurred.plane(c);
        for (i, v) in out.plane_mut(c).iter_mut().enumerate() {
            let m = mask.values[i];
            *v = m * sharp[i] + (T::one() - m) * soft[i];
        }
    }
    out.clamp_unit();
    Ok(out)
}

/// Adds `N(0, σ²)/255` per sample, then clamps to `[0, 1]`.
///
/// Noise comes from a ChaCha8 stream seeded with `seed`; normal deviates use
/// `rand_distr::StandardNormal` (ziggurat).
pub fn add_noise<T: Scalar>(image: &Image<T>, sigma: T, seed: u64) -> Image<T> {
    if sigma == T::zero() {
        return image.clone();
    }
    let mut rng = seeded_rng(seed);
    let scale = sigma / T::lit(255.0);
    let mut out = image.clone();
    for v in out.as_mut_slice() {
        let n: f64 = rng.sample(StandardNormal);
        *v += T::lit(n) * scale;
    }
    out.clamp_unit();
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Bilinear,
    Nearest,
}

/// Resizes to `out_h × out_w`.
///
/// Pixel centres sit at half-integer positions on a grid aligned at the
/// top-left corner: output pixel `o` maps to source position
/// `(o + ½)·in/out − ½`. Nearest picks the source pixel containing the mapped
/// centre, `⌊(2o + 1)·in / (2·out)⌋`, computed exactly in integers.
pub fn resize<T: Scalar>(image: &Image<T>, out_h: usize, out_w: usize, mode: Interpolation) -> Image<T> {
    let (h, w) = (image.height(), image.width());
    if out_h == h && out_w == w {
        return image.clone();
    }
    match mode {
        Interpolation::Nearest => {
            let src_row: Vec<usize> = (0..out_h).map(|o| nearest_source(o, h, out_h)).collect();
            let src_col: Vec<usize> = (0..out_w).map(|o| nearest_source(o, w, out_w)).collect();
            Image::from_fn(image.channels(), out_h, out_w, |c, r, x| {
                image.get(c, src_row[r], src_col[x])
            })
        }
        Interpolation::Bilinear => {
            let rows: Vec<(usize, usize, T)> = (0..out_h).map(|o| bilinear_source(o, h, out_h)).collect();
            let cols: Vec<(usize, usize, T)> = (0..out_w).map(|o| bilinear_source(o, w, out_w)).collect();
            Image::from_fn(image.channels(), out_h, out_w, |c, r, x| {
                let (r0, r1, fr) = rows[r];
                let (c0, c1, fc) = cols[x];
                let top = image.get(c, r0, c0) * (T::one() - fc) + image.get(c, r0, c1) * fc;
                let bottom = image.get(c, r1, c0) * (T::one() - fc) + image.get(c, r1, c1) * fc;
                top * (T::one() - fr) + bottom * fr
            })
        }
    }
}

fn nearest_source(o: usize, n_in: usize, n_out: usize) -> usize {
    ((2 * o + 1) * n_in / (2 * n_out)).min(n_in - 1)
}

fn bilinear_source<T: Scalar>(o: usize, n_in: usize, n_out: usize) -> (usize, usize, T) {
    let pos = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
    let pos = pos.clamp(0.0, (n_in - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, T::lit(pos - i0 as f64))
}

/// Downsamples by `scale`; with `restore` the result is resized back to the
/// original extent with the same interpolation.
pub fn resample<T: Scalar>(
    image: &Image<T>,
    scale: Scale,
    mode: Interpolation,
    restore: bool,
) -> Result<Image<T>> {
    let (h, w) = (image.height(), image.width());
    let (sh, sw) = (scale.apply(h), scale.apply(w));
    if sh == 0 || sw == 0 {
        return Err(Error::Config(format!(
            "scale {scale} shrinks a {h}x{w} image below one pixel"
        )));
    }
    let mut small = resize(image, sh, sw, mode);
    if restore {
        small = resize(&small, h, w, mode);
    }
    small.clamp_unit();
    Ok(small)
}

/// The four views in [`View::ALL`] order, each at the source resolution.
pub fn build_view_stack<T: Scalar>(
    image: &Image<T>,
    fov: &FoveationParams<T>,
    vp: &ViewParams<T>,
) -> Result<[Image<T>; 4]> {
    vp.validate(image.height(), image.width())?;
    Ok([
        foveate(image, fov)?,
        add_noise(image, vp.noise_sigma, vp.noise_seed),
        resample(image, vp.scale_low, Interpolation::Bilinear, true)?,
        resample(image, vp.scale_mosaic, Interpolation::Nearest, true)?,
    ])
}

/// Builds only the requested views, in the order given.
pub fn build_views<T: Scalar>(
    image: &Image<T>,
    views: &[View],
    fov: &FoveationParams<T>,
    vp: &ViewParams<T>,
) -> Result<Vec<Image<T>>> {
    vp.validate(image.height(), image.width())?;
    views
        .iter()
        .map(|v| match v {
            View::Foveated => foveate(image, fov),
            View::Noise => Ok(add_noise(image, vp.noise_sigma, vp.noise_seed)),
            View::LowRes => resample(image, vp.scale_low, Interpolation::Bilinear, true),
            View::Mosaic => resample(image, vp.scale_mosaic, Interpolation::Nearest, true),
        })
        .collect()
}
