//! Geometry of an ultra-wide retinal scan: field of view, foveal avascular
//! zone (FAZ) and optic disc, and the VEGF suppression mask derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{GridSpec, ScalarField2D};
use crate::geometry::Vec2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FovShape {
    Disc,
    RoundedSquare,
}

/// User-facing layout parameters. Positions are derived from these by
/// [`build_layout`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutConfig {
    /// Side length of the square simulation domain.
    pub extent_mm: f64,
    pub fov_shape: FovShape,
    /// Corner radius when `fov_shape` is a rounded square.
    pub corner_radius_mm: f64,
    pub faz_radius_mm: f64,
    /// FAZ position relative to the domain centre.
    pub faz_offset_x_mm: f64,
    pub faz_offset_y_mm: f64,
    /// Nasal disc offset along +x, as a fraction of the extent.
    pub disc_offset_fraction: f64,
    pub disc_radius_mm: f64,
    /// Width of the linear ramp at the FAZ and FOV boundaries.
    pub ramp_mm: f64,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            extent_mm: 12.0,
            fov_shape: FovShape::Disc,
            corner_radius_mm: 2.0,
            faz_radius_mm: 0.3,
            faz_offset_x_mm: 0.0,
            faz_offset_y_mm: 0.0,
            disc_offset_fraction: 0.38,
            disc_radius_mm: 0.75,
            ramp_mm: 0.25,
        }
    }
}

impl LayoutConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::validation(key, format!("must be positive, got {v}")))
            }
        };
        positive("layout.extent_mm", self.extent_mm)?;
        positive("layout.faz_radius_mm", self.faz_radius_mm)?;
        positive("layout.disc_radius_mm", self.disc_radius_mm)?;
        if !(self.ramp_mm >= 0.0 && self.ramp_mm.is_finite()) {
            return Err(Error::validation("layout.ramp_mm", "must be non-negative"));
        }
        if self.fov_shape == FovShape::RoundedSquare
            && !(self.corner_radius_mm >= 0.0 && self.corner_radius_mm <= self.extent_mm / 2.0)
        {
            return Err(Error::validation(
                "layout.corner_radius_mm",
                "must lie in [0, extent/2]",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetinaLayout {
    pub fov_extent_mm: f64,
    pub fov_shape: FovShape,
    pub corner_radius_mm: f64,
    pub faz_center: Vec2,
    pub faz_radius_mm: f64,
    pub disc_center: Vec2,
    pub disc_radius_mm: f64,
    pub ramp_mm: f64,
}

/// Place the FAZ and the optic disc inside the field of view.
pub fn build_layout(config: &LayoutConfig) -> Result<RetinaLayout> {
    config
        .validate()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let extent = config.extent_mm;
    let center = Vec2::new(extent / 2.0, extent / 2.0);
    let faz_center = center + Vec2::new(config.faz_offset_x_mm, config.faz_offset_y_mm);
    let disc_center = center + Vec2::new(config.disc_offset_fraction * extent, 0.0);
    let layout = RetinaLayout {
        fov_extent_mm: extent,
        fov_shape: config.fov_shape,
        corner_radius_mm: config.corner_radius_mm,
        faz_center,
        faz_radius_mm: config.faz_radius_mm,
        disc_center,
        disc_radius_mm: config.disc_radius_mm,
        ramp_mm: config.ramp_mm,
    };

    if layout.faz_radius_mm >= extent / 4.0 {
        return Err(Error::InvalidConfig(format!(
            "FAZ radius {} mm must be below a quarter of the extent ({} mm)",
            layout.faz_radius_mm,
            extent / 4.0
        )));
    }
    if layout.fov_signed_distance(faz_center) < layout.faz_radius_mm {
        return Err(Error::InvalidConfig("FAZ does not fit inside the FOV".into()));
    }
    if layout.fov_signed_distance(disc_center) < layout.disc_radius_mm {
        return Err(Error::InvalidConfig(format!(
            "optic disc (radius {} mm at {:.3}, {:.3}) exits the FOV",
            layout.disc_radius_mm, disc_center.x, disc_center.y
        )));
    }
    if disc_center.distance(faz_center) < layout.disc_radius_mm + layout.faz_radius_mm {
        return Err(Error::InvalidConfig("optic disc overlaps the FAZ".into()));
    }
    Ok(layout)
}

fn ramp(distance: f64, width: f64) -> f64 {
    if distance <= 0.0 {
        0.0
    } else if distance >= width {
        1.0
    } else {
        distance / width
    }
}

impl RetinaLayout {
    pub fn domain_center(&self) -> Vec2 {
        Vec2::new(self.fov_extent_mm / 2.0, self.fov_extent_mm / 2.0)
    }

    /// Distance from `p` to the FOV boundary, positive inside.
    pub fn fov_signed_distance(&self, p: Vec2) -> f64 {
        let c = self.domain_center();
        let half = self.fov_extent_mm / 2.0;
        match self.fov_shape {
            FovShape::Disc => half - p.distance(c),
            FovShape::RoundedSquare => {
                let rc = self.corner_radius_mm;
                let qx = (p.x - c.x).abs() - (half - rc);
                let qy = (p.y - c.y).abs() - (half - rc);
                let outside = Vec2::new(qx.max(0.0), qy.max(0.0)).norm();
                let inside = qx.max(qy).min(0.0);
                -(outside + inside - rc)
            }
        }
    }

    pub fn in_fov(&self, p: Vec2) -> bool {
        self.fov_signed_distance(p) > 0.0
    }

    pub fn in_faz(&self, p: Vec2) -> bool {
        p.distance(self.faz_center) <= self.faz_radius_mm
    }

    pub fn in_disc(&self, p: Vec2) -> bool {
        p.distance(self.disc_center) <= self.disc_radius_mm
    }

    /// VEGF multiplier at `p`: zero inside the FAZ and outside the FOV,
    /// one in the interior, linear over `ramp_mm` at both boundaries.
    pub fn suppression_at(&self, p: Vec2) -> f64 {
        let fov = ramp(self.fov_signed_distance(p), self.ramp_mm);
        if fov == 0.0 {
            return 0.0;
        }
        let faz = ramp(p.distance(self.faz_center) - self.faz_radius_mm, self.ramp_mm);
        fov * faz
    }
}

/// Suppression multiplier sampled at every cell centre of `grid`.
pub fn vegf_suppression(layout: &RetinaLayout, grid: &GridSpec) -> Result<ScalarField2D> {
    let tol = 1e-9 * layout.fov_extent_mm;
    if grid.width_mm() + tol < layout.fov_extent_mm || grid.height_mm() + tol < layout.fov_extent_mm {
        return Err(Error::InvalidArgument(format!(
            "grid covers {:.3}x{:.3} mm but the FOV spans {} mm",
            grid.width_mm(),
            grid.height_mm(),
            layout.fov_extent_mm
        )));
    }
    Ok(ScalarField2D::from_fn(*grid, |p| layout.suppression_at(p)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_layout() -> RetinaLayout {
        build_layout(&LayoutConfig::default()).unwrap()
    }

    #[test]
    fn default_positions() {
        let l = default_layout();
        assert_eq!(l.faz_center, Vec2::new(6.0, 6.0));
        assert!((l.disc_center.x - 10.56).abs() < 1e-12);
        assert_eq!(l.disc_center.y, 6.0);
    }

    #[test]
    fn zero_faz_radius_is_rejected() {
        let cfg = LayoutConfig {
            faz_radius_mm: 0.0,
            ..Default::default()
        };
        assert!(matches!(build_layout(&cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn disc_leaving_fov_is_rejected() {
        let cfg = LayoutConfig {
            disc_radius_mm: 8.0,
            ..Default::default()
        };
        assert!(matches!(build_layout(&cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn overlap_and_oversized_faz_are_rejected() {
        let cfg = LayoutConfig {
            disc_offset_fraction: 0.05,
            ..Default::default()
        };
        assert!(build_layout(&cfg).is_err());
        let cfg = LayoutConfig {
            faz_radius_mm: 3.0,
            ..Default::default()
        };
        assert!(build_layout(&cfg).is_err());
    }

    #[test]
    fn suppression_fixtures() {
        let l = default_layout();
        let grid = GridSpec::square(12.0, 120).unwrap();
        let s = vegf_suppression(&l, &grid).unwrap();
        // cell (60, 60) has its centre 0.05 mm from the FAZ centre
        assert_eq!(s.get(60, 60), 0.0);
        assert_eq!(s.get(0, 0), 0.0);
        assert_eq!(s.get(119, 119), 0.0);
        // midway between FAZ edge (x = 5.7) and FOV edge (x = 0)
        assert_eq!(l.suppression_at(Vec2::new(2.85, 6.0)), 1.0);
        // halfway up the FAZ ramp
        let p = Vec2::new(6.0 + 0.3 + 0.125, 6.0);
        assert!((l.suppression_at(p) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rounded_square_contains_corners_but_not_domain_corner() {
        let cfg = LayoutConfig {
            fov_shape: FovShape::RoundedSquare,
            ..Default::default()
        };
        let l = build_layout(&cfg).unwrap();
        assert!(l.in_fov(Vec2::new(0.5, 6.0)));
        assert!(!l.in_fov(Vec2::new(0.05, 0.05)));
        assert!(l.in_fov(Vec2::new(1.0, 1.0)));
        assert!((l.fov_signed_distance(Vec2::new(0.5, 6.0)) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn grid_must_cover_fov() {
        let l = default_layout();
        let grid = GridSpec::square(6.0, 60).unwrap();
        assert!(vegf_suppression(&l, &grid).is_err());
    }
}
