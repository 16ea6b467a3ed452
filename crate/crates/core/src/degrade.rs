//! Scanner artifacts and training augmentations for (image, mask) pairs.
//!
//! Stages run in a fixed order: capillary background, flow projection,
//! bias field, motion, geometric, photometric, erasing. Each stage draws
//! from its own stream of the sample seed, so switching one stage off
//! leaves the draws of the others untouched.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::raster::{BinaryMask, GrayImage};
use crate::rng;

/// Closed interval `[lo, hi]`; serialised as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(T, T)", into = "(T, T)")]
pub struct Span<T: Copy> {
    pub lo: T,
    pub hi: T,
}

impl<T: Copy> From<(T, T)> for Span<T> {
    fn from((lo, hi): (T, T)) -> Self {
        Self { lo, hi }
    }
}

impl<T: Copy> From<Span<T>> for (T, T) {
    fn from(s: Span<T>) -> Self {
        (s.lo, s.hi)
    }
}

impl<T: Copy> Span<T> {
    pub const fn new(lo: T, hi: T) -> Self {
        Self { lo, hi }
    }
}

impl Span<f64> {
    fn draw(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    fn check(&self, key: &str, min: f64, max: f64) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo > self.hi {
            return Err(Error::validation(
                key,
                format!("range {}..{} must be ordered", self.lo, self.hi),
            ));
        }
        if self.lo < min || self.hi > max {
            return Err(Error::validation(
                key,
                format!("range {}..{} must lie within [{min}, {max}]", self.lo, self.hi),
            ));
        }
        Ok(())
    }
}

impl Span<i64> {
    fn draw(&self, rng: &mut impl Rng) -> i64 {
        rng.random_range(self.lo..=self.hi)
    }

    fn check(&self, key: &str, min: i64) -> Result<()> {
        if self.lo > self.hi || self.lo < min {
            return Err(Error::validation(
                key,
                format!("range {}..{} must be ordered and >= {min}", self.lo, self.hi),
            ));
        }
        Ok(())
    }
}

fn check_probability(key: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::validation(key, format!("probability {p} outside [0, 1]")));
    }
    Ok(())
}

fn check_positive(key: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::validation(key, format!("must be > 0, got {v}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackgroundConfig {
    pub enabled: bool,
    pub probability: f64,
    /// Bernoulli probability per pixel.
    pub p: f64,
    pub sigma_px: f64,
    pub gain: Span<f64>,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            probability: 1.0,
            p: 0.1,
            sigma_px: 1.5,
            gain: Span::new(0.6, 1.6),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasConfig {
    pub enabled: bool,
    pub probability: f64,
    pub count: Span<i64>,
    pub radius_px: Span<f64>,
    pub strength: Span<f64>,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            probability: 0.5,
            count: Span::new(1, 3),
            radius_px: Span::new(50.0, 250.0),
            strength: Span::new(0.2, 0.7),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionConfig {
    pub enabled: bool,
    pub probability: f64,
    pub bands: Span<i64>,
    pub max_shift_px: i64,
    pub brightness: Span<f64>,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            probability: 0.3,
            bands: Span::new(1, 4),
            max_shift_px: 8,
            brightness: Span::new(0.7, 1.3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub enabled: bool,
    pub probability: f64,
    /// Per-axis ghost offset.
    pub offset_px: Span<i64>,
    pub attenuation: Span<f64>,
    pub sigma_px: f64,
    /// Segments with a larger radius cast a projection ghost.
    pub radius_cutoff_mm: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            probability: 0.5,
            offset_px: Span::new(-4, 4),
            attenuation: Span::new(0.05, 0.25),
            sigma_px: 2.0,
            radius_cutoff_mm: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    /// k·90° plus a uniform jitter of at most `jitter_deg`.
    Lattice,
    /// Uniform angle in [0°, 360°).
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometricConfig {
    pub enabled: bool,
    /// Applied independently to the horizontal and the vertical flip.
    pub flip_probability: f64,
    pub rotation_probability: f64,
    pub rotation_mode: RotationMode,
    pub jitter_deg: f64,
    pub scale_probability: f64,
    pub scale: Span<f64>,
    pub elastic_probability: f64,
    /// Largest displacement of the elastic field.
    pub elastic_alpha_px: f64,
    pub elastic_sigma_px: f64,
}

impl Default for GeometricConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            flip_probability: 0.5,
            rotation_probability: 0.5,
            rotation_mode: RotationMode::Lattice,
            jitter_deg: 10.0,
            scale_probability: 0.3,
            scale: Span::new(0.9, 1.1),
            elastic_probability: 0.3,
            elastic_alpha_px: 4.0,
            elastic_sigma_px: 16.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhotometricConfig {
    pub enabled: bool,
    pub probability: f64,
    /// Additive offset.
    pub brightness: Span<f64>,
    /// Multiplier about mid-gray.
    pub contrast: Span<f64>,
    pub gamma: Span<f64>,
    pub smoothing_probability: f64,
    pub smoothing_sigma_px: Span<f64>,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            probability: 0.5,
            brightness: Span::new(-0.1, 0.1),
            contrast: Span::new(0.8, 1.2),
            gamma: Span::new(0.8, 1.25),
            smoothing_probability: 0.2,
            smoothing_sigma_px: Span::new(0.5, 1.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErasingConfig {
    pub enabled: bool,
    pub probability: f64,
    pub count: Span<i64>,
    /// Rectangle area as a fraction of the image.
    pub area_fraction: Span<f64>,
}

impl Default for ErasingConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            probability: 0.5,
            count: Span::new(1, 3),
            area_fraction: Span::new(0.01, 0.05),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradeConfig {
    pub background: BackgroundConfig,
    pub flow: FlowConfig,
    pub bias: BiasConfig,
    pub motion: MotionConfig,
    pub geometric: GeometricConfig,
    pub photometric: PhotometricConfig,
    pub erasing: ErasingConfig,
}

impl DegradeConfig {
    /// Every stage switched off.
    pub fn disabled() -> Self {
        let mut c = Self::default();
        c.background.enabled = false;
        c.flow.enabled = false;
        c.bias.enabled = false;
        c.motion.enabled = false;
        c.geometric.enabled = false;
        c.photometric.enabled = false;
        c.erasing.enabled = false;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.background;
        check_probability("background.probability", b.probability)?;
        check_probability("background.p", b.p)?;
        check_positive("background.sigma_px", b.sigma_px)?;
        b.gain.check("background.gain", 0.0, f64::INFINITY)?;

        let f = &self.flow;
        check_probability("flow.probability", f.probability)?;
        f.offset_px.check("flow.offset_px", i64::MIN)?;
        f.attenuation.check("flow.attenuation", 0.0, 1.0)?;
        check_positive("flow.sigma_px", f.sigma_px)?;
        if !(f.radius_cutoff_mm >= 0.0 && f.radius_cutoff_mm.is_finite()) {
            return Err(Error::validation("flow.radius_cutoff_mm", "must be >= 0"));
        }

        let bi = &self.bias;
        check_probability("bias.probability", bi.probability)?;
        bi.count.check("bias.count", 0)?;
        bi.radius_px.check("bias.radius_px", f64::MIN_POSITIVE, f64::INFINITY)?;
        bi.strength.check("bias.strength", 0.0, 1.0)?;

        let m = &self.motion;
        check_probability("motion.probability", m.probability)?;
        m.bands.check("motion.bands", 0)?;
        if m.max_shift_px < 0 {
            return Err(Error::validation("motion.max_shift_px", "must be >= 0"));
        }
        m.brightness.check("motion.brightness", 0.0, f64::INFINITY)?;

        let g = &self.geometric;
        check_probability("geometric.flip_probability", g.flip_probability)?;
        check_probability("geometric.rotation_probability", g.rotation_probability)?;
        check_probability("geometric.scale_probability", g.scale_probability)?;
        check_probability("geometric.elastic_probability", g.elastic_probability)?;
        if !(g.jitter_deg >= 0.0 && g.jitter_deg <= 45.0) {
            return Err(Error::validation("geometric.jitter_deg", "must lie in [0, 45]"));
        }
        g.scale.check("geometric.scale", f64::MIN_POSITIVE, f64::INFINITY)?;
        if !(g.elastic_alpha_px >= 0.0 && g.elastic_alpha_px.is_finite()) {
            return Err(Error::validation("geometric.elastic_alpha_px", "must be >= 0"));
        }
        check_positive("geometric.elastic_sigma_px", g.elastic_sigma_px)?;

        let p = &self.photometric;
        check_probability("photometric.probability", p.probability)?;
        p.brightness.check("photometric.brightness", -1.0, 1.0)?;
        p.contrast.check("photometric.contrast", 0.0, f64::INFINITY)?;
        p.gamma.check("photometric.gamma", f64::MIN_POSITIVE, f64::INFINITY)?;
        check_probability("photometric.smoothing_probability", p.smoothing_probability)?;
        p.smoothing_sigma_px
            .check("photometric.smoothing_sigma_px", f64::MIN_POSITIVE, f64::INFINITY)?;

        let e = &self.erasing;
        check_probability("erasing.probability", e.probability)?;
        e.count.check("erasing.count", 0)?;
        e.area_fraction.check("erasing.area_fraction", 0.0, 1.0)?;
        Ok(())
    }
}

fn clamp01(v: f64) -> f32 {
    v.clamp(0.0, 1.0) as f32
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur of a row-major field, replicating edge pixels.
pub fn gaussian_blur(data: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; data.len()];
    for row in 0..height {
        let line = &data[row * width..(row + 1) * width];
        for col in 0..width {
            let mut acc = 0.0;
            for (j, w) in k.iter().enumerate() {
                let c = (col as i64 + j as i64 - r).clamp(0, width as i64 - 1) as usize;
                acc += w * line[c];
            }
            tmp[row * width + col] = acc;
        }
    }
    let mut out = vec![0.0; data.len()];
    for row in 0..height {
        for (j, w) in k.iter().enumerate() {
            let src = (row as i64 + j as i64 - r).clamp(0, height as i64 - 1) as usize;
            let (dst_line, src_line) = (row * width, src * width);
            for col in 0..width {
                out[dst_line + col] += w * tmp[src_line + col];
            }
        }
    }
    out
}

pub fn blur_image(img: &GrayImage, sigma: f64) -> GrayImage {
    let data: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
    let blurred = gaussian_blur(&data, img.width, img.height, sigma);
    GrayImage {
        width: img.width,
        height: img.height,
        data: blurred.into_iter().map(clamp01).collect(),
    }
}

/// Add `gain · blur(Bernoulli(p), σ)` and clamp.
pub fn capillary_background(
    img: &GrayImage,
    p: f64,
    sigma_px: f64,
    gain: f64,
    rng: &mut impl Rng,
) -> Result<GrayImage> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("binomial p {p} outside [0, 1]")));
    }
    if !(sigma_px > 0.0) || !(gain >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need sigma > 0 and gain >= 0, got {sigma_px} and {gain}"
        )));
    }
    let noise: Vec<f64> = (0..img.data.len())
        .map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 })
        .collect();
    let field = gaussian_blur(&noise, img.width, img.height, sigma_px);
    Ok(GrayImage {
        width: img.width,
        height: img.height,
        data: img
            .data
            .iter()
            .zip(&field)
            .map(|(&v, &f)| clamp01(v as f64 + gain * f))
            .collect(),
    })
}

/// One multiplicative dark spot of a bias field, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasSpot {
    pub center: Vec2,
    pub radius_px: f64,
    pub strength: f64,
}

/// Multiply by `Π (1 − s·exp(−|x − c|²/(2ρ²)))`, evaluated at pixel centres.
pub fn apply_bias_spots(img: &GrayImage, spots: &[BiasSpot]) -> GrayImage {
    let mut out = img.clone();
    for row in 0..img.height {
        for col in 0..img.width {
            let x = Vec2::new(col as f64 + 0.5, row as f64 + 0.5);
            let factor: f64 = spots
                .iter()
                .map(|s| {
                    let d2 = (x - s.center).norm_sq();
                    1.0 - s.strength * (-d2 / (2.0 * s.radius_px * s.radius_px)).exp()
                })
                .product();
            let i = row * img.width + col;
            out.data[i] = clamp01(img.data[i] as f64 * factor);
        }
    }
    out
}

/// Draw `count` spots centred anywhere in the image and apply them.
pub fn bias_field(
    img: &GrayImage,
    count: usize,
    radius_px: Span<f64>,
    strength: Span<f64>,
    rng: &mut impl Rng,
) -> (GrayImage, Vec<BiasSpot>) {
    let spots: Vec<BiasSpot> = (0..count)
        .map(|_| BiasSpot {
            center: Vec2::new(
                rng.random_range(0.0..img.width as f64),
                rng.random_range(0.0..img.height as f64),
            ),
            radius_px: radius_px.draw(rng),
            strength: strength.draw(rng),
        })
        .collect();
    (apply_bias_spots(img, &spots), spots)
}

/// A horizontally displaced band of rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionBand {
    pub row: usize,
    pub height: usize,
    pub shift: i64,
    pub brightness: f64,
}

/// Shift each band's rows by `shift` pixels (edge pixels replicated) and
/// scale them by `brightness`.
pub fn apply_motion_bands(img: &GrayImage, bands: &[MotionBand]) -> GrayImage {
    let mut out = img.clone();
    let w = img.width as i64;
    for b in bands {
        for row in b.row..(b.row + b.height).min(img.height) {
            let src = &img.data[row * img.width..(row + 1) * img.width];
            let dst = &mut out.data[row * img.width..(row + 1) * img.width];
            for (col, d) in dst.iter_mut().enumerate() {
                let c = (col as i64 - b.shift).clamp(0, w - 1) as usize;
                *d = clamp01(src[c] as f64 * b.brightness);
            }
        }
    }
    out
}

/// Eye-motion bands: random rows, 1–4 px high, integer shifts in
/// `[−max_shift, max_shift]`.
pub fn motion_artifact(
    img: &GrayImage,
    bands: usize,
    max_shift_px: i64,
    brightness: Span<f64>,
    rng: &mut impl Rng,
) -> (GrayImage, Vec<MotionBand>) {
    let drawn: Vec<MotionBand> = (0..bands)
        .map(|_| MotionBand {
            row: rng.random_range(0..img.height),
            height: rng.random_range(1..=4),
            shift: rng.random_range(-max_shift_px..=max_shift_px),
            brightness: brightness.draw(rng),
        })
        .collect();
    (apply_motion_bands(img, &drawn), drawn)
}

/// Add `attenuation · blur(shift(mask, dx, dy), σ)` and clamp.
pub fn flow_projection(
    img: &GrayImage,
    large_vessels: &BinaryMask,
    offset: (i64, i64),
    attenuation: f64,
    sigma_px: f64,
) -> Result<GrayImage> {
    if (img.width, img.height) != (large_vessels.width, large_vessels.height) {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs mask {}x{}",
            img.width, img.height, large_vessels.width, large_vessels.height
        )));
    }
    if attenuation == 0.0 || large_vessels.count() == 0 {
        return Ok(img.clone());
    }
    let (w, h) = (img.width as i64, img.height as i64);
    let mut shifted = vec![0.0; img.data.len()];
    for row in 0..h {
        for col in 0..w {
            let (sr, sc) = (row - offset.1, col - offset.0);
            if (0..h).contains(&sr) && (0..w).contains(&sc) && large_vessels.get(sr as usize, sc as usize)
            {
                shifted[(row * w + col) as usize] = 1.0;
            }
        }
    }
    let ghost = gaussian_blur(&shifted, img.width, img.height, sigma_px);
    Ok(GrayImage {
        width: img.width,
        height: img.height,
        data: img
            .data
            .iter()
            .zip(&ghost)
            .map(|(&v, &g)| clamp01(v as f64 + attenuation * g))
            .collect(),
    })
}

/// Per-pixel displacement in pixels, row-major, sized like the image.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub width: usize,
    pub height: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl DisplacementField {
    /// Smoothed uniform noise rescaled so the longest displacement is `alpha`.
    pub fn random(width: usize, height: usize, alpha: f64, sigma: f64, rng: &mut impl Rng) -> Self {
        let mut noise = || -> Vec<f64> {
            let raw: Vec<f64> = (0..width * height)
                .map(|_| rng.random_range(-1.0..=1.0))
                .collect();
            gaussian_blur(&raw, width, height, sigma)
        };
        let mut dx = noise();
        let mut dy = noise();
        let peak = dx
            .iter()
            .zip(&dy)
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max);
        if peak > 0.0 {
            let s = alpha / peak;
            dx.iter_mut().for_each(|v| *v *= s);
            dy.iter_mut().for_each(|v| *v *= s);
        }
        Self { width, height, dx, dy }
    }
}

/// A fully specified spatial transform. Lattice operations (flips, quarter
/// turns) are applied first and are exact pixel permutations; the
/// continuous part is an inverse mapping about the image centre.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SpatialTransform {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// Counter-clockwise quarter turns.
    pub quarter_turns: u8,
    pub angle_deg: f64,
    pub scale: f64,
    pub elastic: Option<DisplacementField>,
}

impl SpatialTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            ..Self::default()
        }
    }

    fn is_continuous(&self) -> bool {
        self.angle_deg != 0.0 || self.scale != 1.0 || self.elastic.is_some()
    }
}

/// Row-major buffer ops shared by images and masks.
fn flip_h<T: Copy>(data: &[T], w: usize, h: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in 0..h {
        out.extend(data[row * w..(row + 1) * w].iter().rev());
    }
    out
}

fn flip_v<T: Copy>(data: &[T], w: usize, h: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in (0..h).rev() {
        out.extend_from_slice(&data[row * w..(row + 1) * w]);
    }
    out
}

/// Counter-clockwise quarter turn; the result is `h` wide and `w` high.
fn rot90<T: Copy>(data: &[T], w: usize, h: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for r in 0..w {
        for c in 0..h {
            out.push(data[c * w + (w - 1 - r)]);
        }
    }
    out
}

fn lattice<T: Copy>(data: Vec<T>, w: usize, h: usize, t: &SpatialTransform) -> (Vec<T>, usize, usize) {
    let (mut data, mut w, mut h) = (data, w, h);
    if t.flip_horizontal {
        data = flip_h(&data, w, h);
    }
    if t.flip_vertical {
        data = flip_v(&data, w, h);
    }
    for _ in 0..t.quarter_turns % 4 {
        data = rot90(&data, w, h);
        std::mem::swap(&mut w, &mut h);
    }
    (data, w, h)
}

fn bilinear(img: &GrayImage, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x - 0.5, y - 0.5);
    let (x0, y0) = (fx.floor(), fy.floor());
    let (tx, ty) = (fx - x0, fy - y0);
    let at = |c: f64, r: f64| -> f64 {
        if c < 0.0 || r < 0.0 || c >= img.width as f64 || r >= img.height as f64 {
            0.0
        } else {
            img.get(r as usize, c as usize) as f64
        }
    };
    let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1.0, y0) * tx;
    let bottom = at(x0, y0 + 1.0) * (1.0 - tx) + at(x0 + 1.0, y0 + 1.0) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Apply the same spatial transform to image (bilinear) and mask (nearest
/// neighbour). Pixels mapped from outside the frame read 0.
pub fn apply_spatial(
    img: &GrayImage,
    mask: &BinaryMask,
    t: &SpatialTransform,
) -> Result<(GrayImage, BinaryMask)> {
    if (img.width, img.height) != (mask.width, mask.height) {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs mask {}x{}",
            img.width, img.height, mask.width, mask.height
        )));
    }
    if !(t.scale > 0.0 && t.scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("scale must be > 0, got {}", t.scale)));
    }
    let (idata, w, h) = lattice(img.data.clone(), img.width, img.height, t);
    let (mdata, _, _) = lattice(mask.data.clone(), mask.width, mask.height, t);
    let img = GrayImage::from_data(w, h, idata)?;
    let mask = BinaryMask::from_data(w, h, mdata)?;
    if !t.is_continuous() {
        return Ok((img, mask));
    }
    if let Some(e) = &t.elastic {
        if (e.width, e.height) != (w, h) {
            return Err(Error::ShapeMismatch("elastic field does not match the image".into()));
        }
    }

    let center = Vec2::new(w as f64 / 2.0, h as f64 / 2.0);
    let inverse_angle = -t.angle_deg.to_radians();
    let mut out_img = GrayImage::new(w, h);
    let mut out_mask = BinaryMask::new(w, h);
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            let mut q = Vec2::new(col as f64 + 0.5, row as f64 + 0.5);
            if let Some(e) = &t.elastic {
                q = q + Vec2::new(e.dx[i], e.dy[i]);
            }
            let src = center + (q - center).rotated(inverse_angle) * (1.0 / t.scale);
            out_img.data[i] = clamp01(bilinear(&img, src.x, src.y));
            let (c, r) = (src.x.floor(), src.y.floor());
            if c >= 0.0 && r >= 0.0 && c < w as f64 && r < h as f64 {
                out_mask.data[i] = mask.data[r as usize * w + c as usize];
            }
        }
    }
    Ok((out_img, out_mask))
}

/// Draw a spatial transform from the configuration.
pub fn draw_spatial(
    config: &GeometricConfig,
    width: usize,
    height: usize,
    rng: &mut impl Rng,
) -> SpatialTransform {
    let mut t = SpatialTransform::identity();
    t.flip_horizontal = rng.random_bool(config.flip_probability);
    t.flip_vertical = rng.random_bool(config.flip_probability);
    if rng.random_bool(config.rotation_probability) {
        match config.rotation_mode {
            RotationMode::Lattice => {
                t.quarter_turns = rng.random_range(0..4u8);
                if config.jitter_deg > 0.0 {
                    t.angle_deg = rng.random_range(-config.jitter_deg..=config.jitter_deg);
                }
            }
            RotationMode::Free => t.angle_deg = rng.random_range(0.0..360.0),
        }
    }
    if rng.random_bool(config.scale_probability) {
        t.scale = config.scale.draw(rng);
    }
    if rng.random_bool(config.elastic_probability) && config.elastic_alpha_px > 0.0 {
        // quarter turns swap the frame for non-square inputs
        let (w, h) = if t.quarter_turns % 2 == 1 {
            (height, width)
        } else {
            (width, height)
        };
        t.elastic = Some(DisplacementField::random(
            w,
            h,
            config.elastic_alpha_px,
            config.elastic_sigma_px,
            rng,
        ));
    }
    t
}

/// Draw and apply a geometric augmentation; also returns its log entry.
pub fn geometric_augment(
    img: &GrayImage,
    mask: &BinaryMask,
    config: &GeometricConfig,
    rng: &mut impl Rng,
) -> Result<(GrayImage, BinaryMask, String)> {
    let t = draw_spatial(config, img.width, img.height, rng);
    let (i, m) = apply_spatial(img, mask, &t)?;
    let log = format!(
        "geometric flip_h={} flip_v={} quarter_turns={} angle_deg={:.4} scale={:.4} elastic={}",
        t.flip_horizontal,
        t.flip_vertical,
        t.quarter_turns,
        t.angle_deg,
        t.scale,
        t.elastic.is_some()
    );
    Ok((i, m, log))
}

/// Contrast about mid-gray, additive brightness, gamma; each step clamped.
pub fn photometric(img: &GrayImage, brightness: f64, contrast: f64, gamma: f64) -> GrayImage {
    GrayImage {
        width: img.width,
        height: img.height,
        data: img
            .data
            .iter()
            .map(|&v| {
                let v = ((v as f64 - 0.5) * contrast + 0.5).clamp(0.0, 1.0);
                let v = (v + brightness).clamp(0.0, 1.0);
                clamp01(v.powf(gamma))
            })
            .collect(),
    }
}

/// Axis-aligned rectangle `[row, row+height) × [col, col+width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

pub fn erase(img: &GrayImage, rects: &[Rect]) -> GrayImage {
    let mut out = img.clone();
    for r in rects {
        for row in r.row..(r.row + r.height).min(img.height) {
            for col in r.col..(r.col + r.width).min(img.width) {
                out.set(row, col, 0.0);
            }
        }
    }
    out
}

fn draw_rects(img: &GrayImage, count: usize, area: Span<f64>, rng: &mut impl Rng) -> Vec<Rect> {
    let total = (img.width * img.height) as f64;
    (0..count)
        .map(|_| {
            let a = area.draw(rng) * total;
            let aspect: f64 = rng.random_range(0.3..=3.3);
            let height = ((a * aspect).sqrt().round() as usize).clamp(1, img.height);
            let width = ((a / aspect).sqrt().round() as usize).clamp(1, img.width);
            Rect {
                row: rng.random_range(0..=img.height - height),
                col: rng.random_range(0..=img.width - width),
                height,
                width,
            }
        })
        .collect()
}

/// Stream ids of the pipeline stages.
const STAGES: [&str; 7] = [
    "background",
    "flow",
    "bias",
    "motion",
    "geometric",
    "photometric",
    "erasing",
];

fn stage_rng(seed: u64, stage: &str) -> ChaCha8Rng {
    let id = STAGES.iter().position(|s| *s == stage).expect("known stage") as u64;
    rng::stream(seed, id)
}

/// Run every enabled stage in the fixed order. Each applied stage appends a
/// comma-free entry to the sample's transform log. Flow projection uses the
/// sample's large-vessel mask, falling back to the full mask when absent.
pub fn apply_pipeline(sample: &ImageSample, config: &DegradeConfig, seed: u64) -> Result<ImageSample> {
    config.validate()?;
    if (sample.image.width, sample.image.height) != (sample.mask.width, sample.mask.height) {
        return Err(Error::ShapeMismatch("image and mask differ in shape".into()));
    }
    let mut img = sample.image.clone();
    let mut mask = sample.mask.clone();
    let mut log = sample.meta.transform_log.clone();

    let c = &config.background;
    if c.enabled {
        let mut rng = stage_rng(seed, "background");
        if rng.random_bool(c.probability) {
            let gain = c.gain.draw(&mut rng);
            img = capillary_background(&img, c.p, c.sigma_px, gain, &mut rng)?;
            log.push(format!(
                "background p={} sigma_px={} gain={gain:.4}",
                c.p, c.sigma_px
            ));
        }
    }

    let c = &config.flow;
    if c.enabled {
        let mut rng = stage_rng(seed, "flow");
        if rng.random_bool(c.probability) {
            let offset = (c.offset_px.draw(&mut rng), c.offset_px.draw(&mut rng));
            let attenuation = c.attenuation.draw(&mut rng);
            let source = sample.large_vessels.as_ref().unwrap_or(&sample.mask);
            img = flow_projection(&img, source, offset, attenuation, c.sigma_px)?;
            log.push(format!(
                "flow dx={} dy={} attenuation={attenuation:.4} sigma_px={}",
                offset.0, offset.1, c.sigma_px
            ));
        }
    }

    let c = &config.bias;
    if c.enabled {
        let mut rng = stage_rng(seed, "bias");
        if rng.random_bool(c.probability) {
            let count = c.count.draw(&mut rng) as usize;
            let (out, spots) = bias_field(&img, count, c.radius_px, c.strength, &mut rng);
            img = out;
            log.push(format!("bias spots={}", spots.len()));
        }
    }

    let c = &config.motion;
    if c.enabled {
        let mut rng = stage_rng(seed, "motion");
        if rng.random_bool(c.probability) {
            let bands = c.bands.draw(&mut rng) as usize;
            let (out, drawn) = motion_artifact(&img, bands, c.max_shift_px, c.brightness, &mut rng);
            img = out;
            let shifts: Vec<String> = drawn.iter().map(|b| format!("{}@{}", b.shift, b.row)).collect();
            log.push(format!("motion bands={} shifts={}", drawn.len(), shifts.join(";")));
        }
    }

    let c = &config.geometric;
    if c.enabled {
        let mut rng = stage_rng(seed, "geometric");
        let (i, m, entry) = geometric_augment(&img, &mask, c, &mut rng)?;
        img = i;
        mask = m;
        log.push(entry);
    }

    let c = &config.photometric;
    if c.enabled {
        let mut rng = stage_rng(seed, "photometric");
        if rng.random_bool(c.probability) {
            let b = c.brightness.draw(&mut rng);
            let k = c.contrast.draw(&mut rng);
            let g = c.gamma.draw(&mut rng);
            img = photometric(&img, b, k, g);
            let mut entry = format!("photometric brightness={b:.4} contrast={k:.4} gamma={g:.4}");
            if rng.random_bool(c.smoothing_probability) {
                let s = c.smoothing_sigma_px.draw(&mut rng);
                img = blur_image(&img, s);
                entry.push_str(&format!(" smoothing_sigma_px={s:.4}"));
            }
            log.push(entry);
        }
    }

    let c = &config.erasing;
    if c.enabled {
        let mut rng = stage_rng(seed, "erasing");
        if rng.random_bool(c.probability) {
            let count = c.count.draw(&mut rng) as usize;
            let rects = draw_rects(&img, count, c.area_fraction, &mut rng);
            img = erase(&img, &rects);
            log.push(format!("erasing rects={}", rects.len()));
        }
    }

    let mut meta = sample.meta.clone();
    meta.transform_log = log;
    Ok(ImageSample {
        image: img,
        mask,
        large_vessels: None,
        meta,
    })
}
