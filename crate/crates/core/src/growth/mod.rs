//! Vascular forest growth on coupled oxygen and VEGF fields.
//!
//! Each layer starts from a handful of roots in the optic disc. Every
//! iteration recomputes the oxygen delivered by the existing segments, turns
//! the remaining deficit into VEGF (masked by the FAZ/FOV suppression), and
//! lets each active terminal extend, split or stop. Radii are assigned at the
//! end with Murray's law.

mod forest;
mod oxygen;
mod step;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::GridSpec;
use crate::geometry::Vec2;
use crate::layout::{vegf_suppression, RetinaLayout};
use crate::rng;

pub use forest::{Layer, NodeId, Point3, VesselForest, VesselNode};
pub use oxygen::{update_oxygen, update_vegf, OxygenAccumulator, OXYGEN_CUTOFF_SIGMAS};
pub use step::{assign_radii, bifurcation_angles, grow_step, StepReport};

use rand::Rng;

/// Growth parameters for one vascular layer.
///
/// The defaults are hand-tuned guesses that give an ultra-wide scan a
/// plausible vessel density; nothing here is a measured value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayerParams {
    pub terminal_radius_mm: f64,
    /// Radius given to nodes while growing, before Murray assignment.
    pub root_radius_mm: f64,
    pub step_length_mm: f64,
    /// σ of the Gaussian oxygen kernel around each segment.
    pub oxygen_radius_mm: f64,
    /// How far ahead of a tip VEGF is sensed.
    pub sense_distance_mm: f64,
    /// Minimum sensed VEGF for a bifurcation.
    pub vegf_threshold: f64,
    /// Terminals stop below this sensed VEGF.
    pub deactivation_threshold: f64,
    pub branch_probability: f64,
    /// Extension steps required between two bifurcations on a path.
    pub min_branch_spacing: usize,
    pub persistence_weight: f64,
    pub gradient_weight: f64,
    pub repulsion_weight: f64,
    pub target_terminal_count: usize,
    pub depth_mm: f64,
}

impl Default for LayerParams {
    fn default() -> Self {
        Self::svc_default()
    }
}

impl LayerParams {
    pub fn svc_default() -> Self {
        Self {
            terminal_radius_mm: 0.008,
            root_radius_mm: 0.05,
            step_length_mm: 0.1,
            oxygen_radius_mm: 0.3,
            sense_distance_mm: 0.6,
            vegf_threshold: 0.6,
            deactivation_threshold: 0.3,
            branch_probability: 0.3,
            min_branch_spacing: 3,
            persistence_weight: 1.0,
            gradient_weight: 0.1,
            repulsion_weight: 0.5,
            target_terminal_count: 200,
            depth_mm: 0.0,
        }
    }

    /// Deep plexus: about 0.4x the terminal radius and 3x the terminal
    /// density of the superficial one.
    pub fn dvc_default() -> Self {
        Self {
            terminal_radius_mm: 0.0032,
            root_radius_mm: 0.02,
            step_length_mm: 0.05,
            oxygen_radius_mm: 0.15,
            sense_distance_mm: 0.3,
            vegf_threshold: 0.6,
            deactivation_threshold: 0.3,
            branch_probability: 0.3,
            min_branch_spacing: 3,
            persistence_weight: 1.0,
            gradient_weight: 0.05,
            repulsion_weight: 0.5,
            target_terminal_count: 600,
            depth_mm: 0.06,
        }
    }

    fn validate(&self, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}.{k}");
        let positive = |k: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::validation(&key(k), format!("must be positive, got {v}")))
            }
        };
        let unit = |k: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::validation(&key(k), format!("must lie in [0, 1], got {v}")))
            }
        };
        positive("terminal_radius_mm", self.terminal_radius_mm)?;
        positive("root_radius_mm", self.root_radius_mm)?;
        positive("step_length_mm", self.step_length_mm)?;
        positive("oxygen_radius_mm", self.oxygen_radius_mm)?;
        if !(self.sense_distance_mm >= 0.0 && self.sense_distance_mm.is_finite()) {
            return Err(Error::validation(&key("sense_distance_mm"), "must be non-negative"));
        }
        unit("vegf_threshold", self.vegf_threshold)?;
        unit("deactivation_threshold", self.deactivation_threshold)?;
        unit("branch_probability", self.branch_probability)?;
        let weights = [
            ("persistence_weight", self.persistence_weight),
            ("gradient_weight", self.gradient_weight),
            ("repulsion_weight", self.repulsion_weight),
        ];
        for (k, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::validation(&key(k), format!("must be >= 0, got {w}")));
            }
        }
        if weights.iter().all(|(_, w)| *w == 0.0) {
            return Err(Error::validation(
                &key("persistence_weight"),
                "direction weights must not all be zero",
            ));
        }
        if self.target_terminal_count == 0 {
            return Err(Error::validation(&key("target_terminal_count"), "must be >= 1"));
        }
        if !self.depth_mm.is_finite() {
            return Err(Error::validation(&key("depth_mm"), "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Oxygen/VEGF grid cells per side.
    pub grid_cells: usize,
    pub max_iterations: usize,
    /// γ in `r_p^γ = r_l^γ + r_r^γ`.
    pub murray_exponent: f64,
    /// Total opening angle of a symmetric bifurcation.
    pub bifurcation_angle_deg: f64,
    /// Lower bound of the child radius ratio drawn at each split.
    pub bifurcation_ratio_min: f64,
    /// Initial headings deviate from the disc-to-FAZ direction by up to this.
    pub initial_spread_deg: f64,
    pub trees_per_layer: usize,
    pub svc: LayerParams,
    pub dvc: LayerParams,
    /// Set per sample; not part of the config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            grid_cells: 240,
            max_iterations: 400,
            murray_exponent: 3.0,
            bifurcation_angle_deg: 75.0,
            bifurcation_ratio_min: 0.5,
            initial_spread_deg: 80.0,
            trees_per_layer: 6,
            svc: LayerParams::svc_default(),
            dvc: LayerParams::dvc_default(),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn layer(&self, layer: Layer) -> &LayerParams {
        match layer {
            Layer::Svc => &self.svc,
            Layer::Dvc => &self.dvc,
        }
    }

    pub fn layer_mut(&mut self, layer: Layer) -> &mut LayerParams {
        match layer {
            Layer::Svc => &mut self.svc,
            Layer::Dvc => &mut self.dvc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.murray_exponent >= 1.0 && self.murray_exponent.is_finite()) {
            return Err(Error::validation(
                "murray_exponent",
                format!("must be >= 1, got {}", self.murray_exponent),
            ));
        }
        if self.grid_cells < 2 {
            return Err(Error::validation("grid_cells", "must be >= 2"));
        }
        if !(self.bifurcation_angle_deg > 0.0 && self.bifurcation_angle_deg < 180.0) {
            return Err(Error::validation("bifurcation_angle_deg", "must lie in (0, 180)"));
        }
        if !(self.bifurcation_ratio_min > 0.0 && self.bifurcation_ratio_min <= 1.0) {
            return Err(Error::validation("bifurcation_ratio_min", "must lie in (0, 1]"));
        }
        if !(self.initial_spread_deg >= 0.0 && self.initial_spread_deg <= 180.0) {
            return Err(Error::validation("initial_spread_deg", "must lie in [0, 180]"));
        }
        if self.trees_per_layer == 0 {
            return Err(Error::validation("trees_per_layer", "must be >= 1"));
        }
        self.svc.validate("svc")?;
        self.dvc.validate("dvc")?;
        Ok(())
    }
}

/// One row of the growth diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub terminal_count: usize,
    pub active_count: usize,
    /// ∫ VEGF dA over the grid (mm²) seen by this iteration.
    pub vegf_mass: f64,
    pub segments_added: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthTrace {
    pub layer: Layer,
    pub records: Vec<TraceRecord>,
}

/// Place `trees_per_layer` roots uniformly in the optic disc, each with one
/// segment heading towards the FAZ side.
pub fn init_forest(
    config: &SimConfig,
    layer: Layer,
    layout: &RetinaLayout,
    seed: u64,
) -> Result<VesselForest> {
    if config.trees_per_layer == 0 {
        return Err(Error::InvalidConfig("trees_per_layer must be >= 1".into()));
    }
    let params = config.layer(layer);
    let mut rng = rng::stream(seed, 0);
    let mut forest = VesselForest::new(layer, seed);
    let spread = config.initial_spread_deg.to_radians();
    for _ in 0..config.trees_per_layer {
        let r = layout.disc_radius_mm * rng.random::<f64>().sqrt();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let root = layout.disc_center + Vec2::new(r * phi.cos(), r * phi.sin());
        let towards = (layout.faz_center - root)
            .normalized()
            .unwrap_or(Vec2::new(-1.0, 0.0));
        let jitter = if spread > 0.0 {
            rng.random_range(-spread..=spread)
        } else {
            0.0
        };
        let tip = root + towards.rotated(jitter) * params.step_length_mm;
        let z = params.depth_mm;
        let root_id = forest.add_root(Point3::new(root.x, root.y, z), params.root_radius_mm);
        let child = forest.add_child(root_id, Point3::new(tip.x, tip.y, z), params.root_radius_mm)?;
        forest.activate(child);
    }
    Ok(forest)
}

/// Grow one layer to completion and assign its radii.
pub fn simulate_layer(
    config: &SimConfig,
    layout: &RetinaLayout,
    layer: Layer,
) -> Result<(VesselForest, GrowthTrace)> {
    config.validate().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let params = config.layer(layer);
    let seed = rng::derive_seed(config.seed, layer.index());
    let grid = GridSpec::square(layout.fov_extent_mm, config.grid_cells)?;
    let suppression = vegf_suppression(layout, &grid)?;
    let cell_area = grid.cell_size_mm * grid.cell_size_mm;

    let mut forest = init_forest(config, layer, layout, seed)?;
    let mut rng = rng::stream(seed, 1);
    let mut oxygen = OxygenAccumulator::new(grid, params.oxygen_radius_mm);
    let mut trace = GrowthTrace {
        layer,
        records: Vec::new(),
    };

    for iteration in 0..config.max_iterations {
        if forest.active_count() == 0 || forest.terminal_count() >= params.target_terminal_count {
            break;
        }
        oxygen.sync(&forest);
        let vegf = update_vegf(&oxygen.field(), &suppression)?;
        let report = grow_step(&mut forest, &vegf, layout, config, &mut rng);
        trace.records.push(TraceRecord {
            iteration,
            terminal_count: forest.terminal_count(),
            active_count: forest.active_count(),
            vegf_mass: vegf.sum() * cell_area,
            segments_added: report.nodes_added,
        });
    }
    log::debug!(
        "{} layer: {} nodes, {} terminals after {} iterations",
        layer.name(),
        forest.node_count(),
        forest.terminal_count(),
        trace.records.len()
    );

    assign_radii(&mut forest, params.terminal_radius_mm, config.murray_exponent);
    Ok((forest, trace))
}

/// Both layers, grown independently.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub forests: Vec<VesselForest>,
    pub traces: Vec<GrowthTrace>,
}

/// Simulate the SVC and DVC for `config.seed`. A pure function of
/// `(config, layout)`.
pub fn simulate(config: &SimConfig, layout: &RetinaLayout) -> Result<Simulation> {
    let mut forests = Vec::with_capacity(2);
    let mut traces = Vec::with_capacity(2);
    for layer in Layer::ALL {
        let (f, t) = simulate_layer(config, layout, layer)?;
        forests.push(f);
        traces.push(t);
    }
    Ok(Simulation { forests, traces })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{build_layout, LayoutConfig};

    fn layout() -> RetinaLayout {
        build_layout(&LayoutConfig::default()).unwrap()
    }

    #[test]
    fn init_places_roots_in_disc() {
        let config = SimConfig {
            trees_per_layer: 4,
            ..Default::default()
        };
        let l = layout();
        let f = init_forest(&config, Layer::Svc, &l, 11).unwrap();
        assert_eq!(f.roots().len(), 4);
        for &r in f.roots() {
            assert!(l.in_disc(f.node(r).position.xy()));
        }
        assert_eq!(f.active_count(), 4);
        let g = init_forest(&config, Layer::Svc, &l, 11).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn init_rejects_zero_trees() {
        let config = SimConfig {
            trees_per_layer: 0,
            ..Default::default()
        };
        assert!(matches!(
            init_forest(&config, Layer::Svc, &layout(), 1),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn validation_names_the_key() {
        let mut c = SimConfig::default();
        c.murray_exponent = 0.5;
        match c.validate() {
            Err(Error::Validation { key, .. }) => assert_eq!(key, "murray_exponent"),
            other => panic!("{other:?}"),
        }
        let mut c = SimConfig::default();
        c.dvc.persistence_weight = 0.0;
        c.dvc.gradient_weight = 0.0;
        c.dvc.repulsion_weight = 0.0;
        assert!(c.validate().is_err());
        let mut c = SimConfig::default();
        c.svc.step_length_mm = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_iterations_returns_initial_forest() {
        let config = SimConfig {
            max_iterations: 0,
            seed: 5,
            ..Default::default()
        };
        let l = layout();
        let (f, trace) = simulate_layer(&config, &l, Layer::Svc).unwrap();
        let init = init_forest(&config, Layer::Svc, &l, rng::derive_seed(5, 0)).unwrap();
        assert!(trace.records.is_empty());
        assert_eq!(f.node_count(), init.node_count());
        for (a, b) in f.nodes().iter().zip(init.nodes()) {
            assert_eq!(a.position, b.position);
            assert_eq!(a.parent, b.parent);
            assert_eq!(a.radius_mm, config.svc.terminal_radius_mm);
        }
    }
}
