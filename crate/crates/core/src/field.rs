//! Regular scalar grids over the simulation domain.
//!
//! Cell `(row, col)` covers `[col·h, (col+1)·h) × [row·h, (row+1)·h)` in
//! millimetres, so `x` grows with the column index and `y` with the row.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub cell_size_mm: f64,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, cell_size_mm: f64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid shape must be at least 1x1, got {rows}x{cols}"
            )));
        }
        if !(cell_size_mm > 0.0 && cell_size_mm.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "cell size must be positive, got {cell_size_mm}"
            )));
        }
        Ok(Self {
            rows,
            cols,
            cell_size_mm,
        })
    }

    /// Square grid of `cells × cells` spanning `extent_mm` on each side.
    pub fn square(extent_mm: f64, cells: usize) -> Result<Self> {
        Self::new(cells, cells, extent_mm / cells as f64)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width_mm(&self) -> f64 {
        self.cols as f64 * self.cell_size_mm
    }

    pub fn height_mm(&self) -> f64 {
        self.rows as f64 * self.cell_size_mm
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Vec2 {
        Vec2::new(
            (col as f64 + 0.5) * self.cell_size_mm,
            (row as f64 + 0.5) * self.cell_size_mm,
        )
    }

    /// Cell containing `p`, if it lies on the grid.
    pub fn cell_of(&self, p: Vec2) -> Option<(usize, usize)> {
        let c = (p.x / self.cell_size_mm).floor();
        let r = (p.y / self.cell_size_mm).floor();
        if c < 0.0 || r < 0.0 || c >= self.cols as f64 || r >= self.rows as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField2D {
    spec: GridSpec,
    values: Vec<f64>,
}

impl ScalarField2D {
    pub fn filled(spec: GridSpec, value: f64) -> Self {
        Self {
            spec,
            values: vec![value; spec.len()],
        }
    }

    pub fn from_values(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for a {}x{} grid",
                values.len(),
                spec.rows,
                spec.cols
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite field value {bad}")));
        }
        Ok(Self { spec, values })
    }

    /// Evaluate `f` at every cell centre.
    pub fn from_fn(spec: GridSpec, mut f: impl FnMut(Vec2) -> f64) -> Self {
        let mut values = Vec::with_capacity(spec.len());
        for r in 0..spec.rows {
            for c in 0..spec.cols {
                values.push(f(spec.cell_center(r, c)));
            }
        }
        Self { spec, values }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.spec.cols + col]
    }

    /// Value of the cell containing `p`; zero off the grid.
    pub fn at(&self, p: Vec2) -> f64 {
        match self.spec.cell_of(p) {
            Some((r, c)) => self.get(r, c),
            None => 0.0,
        }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn same_grid(&self, other: &ScalarField2D) -> bool {
        self.spec == other.spec
    }

    /// Bilinear interpolation between cell centres. Off-grid samples read as
    /// zero, which matches the suppression outside the field of view.
    pub fn sample(&self, p: Vec2) -> f64 {
        let h = self.spec.cell_size_mm;
        if p.x < 0.0 || p.y < 0.0 || p.x > self.spec.width_mm() || p.y > self.spec.height_mm() {
            return 0.0;
        }
        let u = (p.x / h - 0.5).clamp(0.0, (self.spec.cols - 1) as f64);
        let v = (p.y / h - 0.5).clamp(0.0, (self.spec.rows - 1) as f64);
        let c0 = u.floor() as usize;
        let r0 = v.floor() as usize;
        let c1 = (c0 + 1).min(self.spec.cols - 1);
        let r1 = (r0 + 1).min(self.spec.rows - 1);
        let fu = u - c0 as f64;
        let fv = v - r0 as f64;
        let top = self.get(r0, c0) * (1.0 - fu) + self.get(r0, c1) * fu;
        let bottom = self.get(r1, c0) * (1.0 - fu) + self.get(r1, c1) * fu;
        top * (1.0 - fv) + bottom * fv
    }

    /// Central-difference gradient of the interpolated field, one cell apart.
    pub fn gradient(&self, p: Vec2) -> Vec2 {
        let h = self.spec.cell_size_mm;
        let dx = (self.sample(p + Vec2::new(h, 0.0)) - self.sample(p - Vec2::new(h, 0.0))) / (2.0 * h);
        let dy = (self.sample(p + Vec2::new(0.0, h)) - self.sample(p - Vec2::new(0.0, h))) / (2.0 * h);
        Vec2::new(dx, dy)
    }
}
