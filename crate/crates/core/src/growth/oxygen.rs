//! Oxygen supplied by the vessels and the VEGF released by the hypoxic
//! tissue that remains.

use crate::error::{Error, Result};
use crate::field::{GridSpec, ScalarField2D};
use crate::geometry::{segment_distance_sq, Vec2};

use super::forest::VesselForest;

/// Kernel contributions further than this many supply radii from a segment
/// are dropped (each would be below `exp(-12.5) ≈ 3.7e-6`).
pub const OXYGEN_CUTOFF_SIGMAS: f64 = 5.0;

/// Running, unclamped oxygen sum. Segments are splatted in ascending child
/// id, so syncing after every growth step yields exactly the same field as
/// recomputing from scratch.
#[derive(Debug, Clone)]
pub struct OxygenAccumulator {
    raw: ScalarField2D,
    sigma_mm: f64,
    next_node: usize,
}

impl OxygenAccumulator {
    pub fn new(grid: GridSpec, sigma_mm: f64) -> Self {
        Self {
            raw: ScalarField2D::filled(grid, 0.0),
            sigma_mm,
            next_node: 0,
        }
    }

    /// Splat every segment whose child was added since the last sync.
    pub fn sync(&mut self, forest: &VesselForest) {
        let nodes = forest.nodes();
        for node in &nodes[self.next_node.min(nodes.len())..] {
            if let Some(p) = node.parent {
                self.splat(nodes[p].position.xy(), node.position.xy());
            }
        }
        self.next_node = nodes.len();
    }

    fn splat(&mut self, a: Vec2, b: Vec2) {
        let spec = *self.raw.spec();
        let h = spec.cell_size_mm;
        let reach = OXYGEN_CUTOFF_SIGMAS * self.sigma_mm;
        let reach_sq = reach * reach;
        let inv_two_var = 1.0 / (2.0 * self.sigma_mm * self.sigma_mm);

        let col_range = cell_range(a.x.min(b.x) - reach, a.x.max(b.x) + reach, h, spec.cols);
        let row_range = cell_range(a.y.min(b.y) - reach, a.y.max(b.y) + reach, h, spec.rows);
        let (Some((c0, c1)), Some((r0, r1))) = (col_range, row_range) else {
            return;
        };
        let values = self.raw.values_mut();
        for r in r0..=r1 {
            for c in c0..=c1 {
                let p = spec.cell_center(r, c);
                let d2 = segment_distance_sq(p, a, b);
                if d2 <= reach_sq {
                    values[r * spec.cols + c] += (-d2 * inv_two_var).exp();
                }
            }
        }
    }

    /// Oxygen concentration, clamped to `[0, 1]`.
    pub fn field(&self) -> ScalarField2D {
        let mut out = self.raw.clone();
        for v in out.values_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        out
    }
}

fn cell_range(lo: f64, hi: f64, h: f64, n: usize) -> Option<(usize, usize)> {
    let lo = (lo / h - 0.5).ceil().max(0.0);
    let hi = (hi / h - 0.5).floor().min(n as f64 - 1.0);
    if hi < lo {
        None
    } else {
        Some((lo as usize, hi as usize))
    }
}

/// Oxygen per cell: `clamp(Σ_segments exp(-d²/(2σ²)), 0, 1)` with `d` the
/// distance from the cell centre to the segment's planar projection.
pub fn update_oxygen(forest: &VesselForest, grid: &GridSpec, sigma_mm: f64) -> ScalarField2D {
    let mut acc = OxygenAccumulator::new(*grid, sigma_mm);
    acc.sync(forest);
    acc.field()
}

/// `vegf = max(0, 1 - oxygen) · suppression`, cell by cell.
pub fn update_vegf(oxygen: &ScalarField2D, suppression: &ScalarField2D) -> Result<ScalarField2D> {
    if !oxygen.same_grid(suppression) {
        return Err(Error::GridMismatch(format!(
            "oxygen grid {:?} vs suppression grid {:?}",
            oxygen.spec(),
            suppression.spec()
        )));
    }
    let values = oxygen
        .values()
        .iter()
        .zip(suppression.values())
        .map(|(&o, &s)| (1.0 - o).max(0.0) * s)
        .collect();
    ScalarField2D::from_values(*oxygen.spec(), values)
}
