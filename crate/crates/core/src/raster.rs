//! Orthographic rendering of vessel forests into an anti-aliased grayscale
//! angiogram and a hard ground-truth mask.
//!
//! Every segment is a capsule around the parent-child line whose half-width
//! is the child's radius. Coordinates are converted to pixel units once, with
//! pixel `(row, col)` centred at `(col + 0.5, row + 0.5)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{segment_distance_sq, Vec2};
use crate::growth::VesselForest;
use crate::layout::RetinaLayout;

/// Output raster geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub width: usize,
    pub height: usize,
    pub mm_per_pixel: f64,
}

impl ImageSpec {
    /// Square image covering `extent_mm`.
    pub fn square(size: usize, extent_mm: f64) -> Result<Self> {
        let spec = Self {
            width: size,
            height: size,
            mm_per_pixel: extent_mm / size as f64,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("image resolution must be positive".into()));
        }
        if !(self.mm_per_pixel > 0.0 && self.mm_per_pixel.is_finite()) {
            return Err(Error::InvalidArgument("mm_per_pixel must be positive".into()));
        }
        Ok(())
    }
}

/// Grayscale image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.data[row * self.width + col] = v;
    }

    pub fn same_shape<T: Shape>(&self, other: &T) -> bool {
        (self.width, self.height) == other.shape()
    }
}

/// Binary mask, one byte per pixel holding 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    /// Build from arbitrary bytes; any non-zero value becomes 1.
    pub fn from_data(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height} mask",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data: data.into_iter().map(|v| u8::from(v != 0)).collect(),
        })
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = u8::from(v);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

pub trait Shape {
    fn shape(&self) -> (usize, usize);
}

impl Shape for GrayImage {
    fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

impl Shape for BinaryMask {
    fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Relative brightness of a vessel of radius `r` among vessels up to `r_max`.
pub fn vessel_brightness(r: f64, r_max: f64) -> f64 {
    (0.6 + 0.4 * (r / r_max)).clamp(0.0, 1.0)
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// A segment in pixel units.
#[derive(Debug, Clone, Copy)]
struct Capsule {
    a: Vec2,
    b: Vec2,
    half_width: f64,
    radius_mm: f64,
}

fn capsules<'a>(
    forests: &'a [VesselForest],
    spec: &'a ImageSpec,
) -> impl Iterator<Item = Capsule> + 'a {
    let s = spec.mm_per_pixel;
    forests.iter().flat_map(move |f| {
        f.segments().map(move |(p, c)| {
            let pa = f.node(p).position;
            let pb = f.node(c).position;
            let r = f.node(c).radius_mm;
            Capsule {
                a: Vec2::new(pa.x / s, pa.y / s),
                b: Vec2::new(pb.x / s, pb.y / s),
                half_width: r / s,
                radius_mm: r,
            }
        })
    })
}

/// Visit every pixel whose centre lies within `half_width + margin` of the
/// capsule's bounding box, passing `(row, col, distance)`.
fn for_each_pixel_near(
    cap: &Capsule,
    margin: f64,
    width: usize,
    height: usize,
    mut f: impl FnMut(usize, usize, f64),
) {
    let reach = cap.half_width + margin;
    let x0 = (cap.a.x.min(cap.b.x) - reach - 0.5).floor().max(0.0);
    let x1 = (cap.a.x.max(cap.b.x) + reach - 0.5).ceil().min(width as f64 - 1.0);
    let y0 = (cap.a.y.min(cap.b.y) - reach - 0.5).floor().max(0.0);
    let y1 = (cap.a.y.max(cap.b.y) + reach - 0.5).ceil().min(height as f64 - 1.0);
    if x1 < x0 || y1 < y0 {
        return;
    }
    for row in y0 as usize..=y1 as usize {
        for col in x0 as usize..=x1 as usize {
            let center = Vec2::new(col as f64 + 0.5, row as f64 + 0.5);
            let d = segment_distance_sq(center, cap.a, cap.b).sqrt();
            f(row, col, d);
        }
    }
}

fn check_inputs(forests: &[VesselForest], spec: &ImageSpec) -> Result<()> {
    spec.validate()?;
    if forests.iter().all(|f| f.segment_count() == 0) {
        return Err(Error::EmptyForest);
    }
    Ok(())
}

/// Anti-aliased rendering. Coverage is `1 − smoothstep(−½, ½, d − w)` for a
/// pixel at distance `d` from a capsule of half-width `w`; each capsule adds
/// `coverage · brightness(r)` and overlaps composite by maximum, so layers
/// and crossings never exceed 1.
pub fn draw_forest(forests: &[VesselForest], spec: &ImageSpec) -> Result<GrayImage> {
    check_inputs(forests, spec)?;
    let r_max = forests.iter().map(|f| f.max_radius()).fold(0.0, f64::max);
    let mut img = GrayImage::new(spec.width, spec.height);
    for cap in capsules(forests, spec) {
        let brightness = vessel_brightness(cap.radius_mm, r_max);
        let w = cap.half_width;
        let width = img.width;
        for_each_pixel_near(&cap, 1.0, spec.width, spec.height, |row, col, d| {
            let coverage = 1.0 - smoothstep(-0.5, 0.5, d - w);
            let v = (coverage * brightness) as f32;
            let px = &mut img.data[row * width + col];
            if v > *px {
                *px = v;
            }
        });
    }
    Ok(img)
}

/// Hard mask: a pixel is vessel iff its centre lies inside any capsule.
pub fn ground_truth(forests: &[VesselForest], spec: &ImageSpec) -> Result<BinaryMask> {
    ground_truth_where(forests, spec, |_| true)
}

/// [`ground_truth`] restricted to segments whose radius passes `keep`.
pub fn ground_truth_where(
    forests: &[VesselForest],
    spec: &ImageSpec,
    keep: impl Fn(f64) -> bool,
) -> Result<BinaryMask> {
    check_inputs(forests, spec)?;
    let mut mask = BinaryMask::new(spec.width, spec.height);
    for cap in capsules(forests, spec).filter(|c| keep(c.radius_mm)) {
        let w = cap.half_width;
        let width = mask.width;
        for_each_pixel_near(&cap, 0.0, spec.width, spec.height, |row, col, d| {
            if d <= w {
                mask.data[row * width + col] = 1;
            }
        });
    }
    Ok(mask)
}

/// Pixels whose centre lies inside the field of view.
pub fn fov_mask(layout: &RetinaLayout, spec: &ImageSpec) -> BinaryMask {
    let mut mask = BinaryMask::new(spec.width, spec.height);
    for row in 0..spec.height {
        for col in 0..spec.width {
            let p = Vec2::new(
                (col as f64 + 0.5) * spec.mm_per_pixel,
                (row as f64 + 0.5) * spec.mm_per_pixel,
            );
            mask.set(row, col, layout.in_fov(p));
        }
    }
    mask
}

/// Fraction of FOV pixels marked in `mask`.
pub fn vessel_fraction(mask: &BinaryMask, fov: &BinaryMask) -> f64 {
    let (mut inside, mut vessel) = (0usize, 0usize);
    for (&m, &f) in mask.data.iter().zip(&fov.data) {
        if f != 0 {
            inside += 1;
            if m != 0 {
                vessel += 1;
            }
        }
    }
    if inside == 0 {
        0.0
    } else {
        vessel as f64 / inside as f64
    }
}
