//! Terminal advance, bifurcation and Murray radius assignment.

use std::collections::HashMap;

use rand::Rng;

use crate::field::ScalarField2D;
use crate::geometry::{closest_point_on_segment, Vec2};
use crate::layout::RetinaLayout;

use super::forest::{NodeId, Point3, VesselForest};
use super::{LayerParams, SimConfig};

/// Opening angles `(θ_large, θ_small)` in radians between the parent axis
/// and each child for a split with child radius ratio `ratio = r_small /
/// r_large ∈ (0, 1]`.
///
/// The shape comes from the volume-minimising junction rule
/// `cos θ₁ = (r₀⁴ + r₁⁴ − r₂⁴) / (2 r₀² r₁²)` with `r₀` fixed by the
/// generalised Murray law `r₀^γ = r₁^γ + r₂^γ`; the angles are then scaled so
/// that a symmetric split opens exactly `symmetric_total` radians.
pub fn bifurcation_angles(ratio: f64, gamma: f64, symmetric_total: f64) -> (f64, f64) {
    let ratio = ratio.clamp(1e-6, 1.0);
    let junction = |r1: f64, r2: f64| {
        let r0 = (r1.powf(gamma) + r2.powf(gamma)).powf(1.0 / gamma);
        let cos_angle = |ra: f64, rb: f64| {
            ((r0.powi(4) + ra.powi(4) - rb.powi(4)) / (2.0 * r0 * r0 * ra * ra))
                .clamp(-1.0, 1.0)
                .acos()
        };
        (cos_angle(r1, r2), cos_angle(r2, r1))
    };
    let (sym, _) = junction(1.0, 1.0);
    let half = symmetric_total / 2.0;
    if sym < 1e-9 {
        // γ close to 1 collapses the optimum to a straight junction
        return (half, half);
    }
    if ratio == 1.0 {
        return (half, half);
    }
    let (large, small) = junction(1.0, ratio);
    let scale = half / sym;
    (large * scale, small * scale)
}

/// Outcome counts of one [`grow_step`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepReport {
    pub extended: usize,
    pub bifurcated: usize,
    pub deactivated: usize,
    pub nodes_added: usize,
}

/// Uniform bucket grid over segment ids for nearest-segment queries.
struct SegmentIndex {
    bucket_mm: f64,
    buckets: HashMap<(i64, i64), Vec<NodeId>>,
}

impl SegmentIndex {
    fn build(forest: &VesselForest, bucket_mm: f64) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<NodeId>> = HashMap::new();
        for (p, c) in forest.segments() {
            let a = forest.node(p).position.xy();
            let b = forest.node(c).position.xy();
            let x0 = (a.x.min(b.x) / bucket_mm).floor() as i64;
            let x1 = (a.x.max(b.x) / bucket_mm).floor() as i64;
            let y0 = (a.y.min(b.y) / bucket_mm).floor() as i64;
            let y1 = (a.y.max(b.y) / bucket_mm).floor() as i64;
            for bx in x0..=x1 {
                for by in y0..=y1 {
                    buckets.entry((bx, by)).or_default().push(c);
                }
            }
        }
        Self { bucket_mm, buckets }
    }

    /// Closest point on any segment within `radius` of `p`, skipping
    /// segments for which `skip(parent, child)` holds. Ties go to the
    /// smaller child id.
    fn nearest(
        &self,
        forest: &VesselForest,
        p: Vec2,
        radius: f64,
        skip: impl Fn(NodeId, NodeId) -> bool,
    ) -> Option<(f64, Vec2)> {
        let bx = (p.x / self.bucket_mm).floor() as i64;
        let by = (p.y / self.bucket_mm).floor() as i64;
        let reach = (radius / self.bucket_mm).ceil() as i64;
        let mut best: Option<(f64, NodeId, Vec2)> = None;
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                let Some(ids) = self.buckets.get(&(bx + dx, by + dy)) else {
                    continue;
                };
                for &c in ids {
                    let parent = forest.node(c).parent.expect("segment child has a parent");
                    if skip(parent, c) {
                        continue;
                    }
                    let a = forest.node(parent).position.xy();
                    let b = forest.node(c).position.xy();
                    let q = closest_point_on_segment(p, a, b);
                    let d = p.distance(q);
                    if d > radius {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((bd, bid, _)) => d < bd || (d == bd && c < bid),
                    };
                    if better {
                        best = Some((d, c, q));
                    }
                }
            }
        }
        best.map(|(d, _, q)| (d, q))
    }
}

fn steps_since_branch(forest: &VesselForest, mut id: NodeId, limit: usize) -> usize {
    let mut steps = 0;
    while steps < limit {
        match forest.node(id).parent {
            None => break,
            Some(p) => {
                steps += 1;
                if forest.node(p).children.len() == 2 {
                    break;
                }
                id = p;
            }
        }
    }
    steps
}

/// The terminal itself and up to three ancestors; segments touching these
/// are the terminal's own trunk and its immediate siblings.
fn own_neighbourhood(forest: &VesselForest, id: NodeId) -> [Option<NodeId>; 4] {
    let mut out = [Some(id), None, None, None];
    let mut cur = id;
    for slot in out.iter_mut().skip(1) {
        match forest.node(cur).parent {
            Some(p) => {
                *slot = Some(p);
                cur = p;
            }
            None => break,
        }
    }
    out
}

fn heading(forest: &VesselForest, id: NodeId) -> Vec2 {
    let node = forest.node(id);
    node.parent
        .and_then(|p| (node.position.xy() - forest.node(p).position.xy()).normalized())
        .unwrap_or(Vec2::new(1.0, 0.0))
}

/// Advance every active terminal once, in ascending node id.
///
/// A terminal senses VEGF at a look-ahead point `sense_distance_mm` along
/// its heading. It stops when that value falls below the deactivation
/// threshold or when its next node would leave the perfusable region
/// (outside the FOV or inside the FAZ). Otherwise it bifurcates when VEGF
/// is above `vegf_threshold`, enough steps have passed since the last split
/// and a Bernoulli draw succeeds; failing that it extends one step along
/// `normalize(w_p·d_prev + w_g·∇VEGF + w_r·repulsion)`.
pub fn grow_step<R: Rng + ?Sized>(
    forest: &mut VesselForest,
    vegf: &ScalarField2D,
    layout: &RetinaLayout,
    config: &SimConfig,
    rng: &mut R,
) -> StepReport {
    let params: &LayerParams = config.layer(forest.layer);
    let step = params.step_length_mm;
    let repel_radius = 2.0 * step;
    let index = SegmentIndex::build(forest, repel_radius);
    let terminals: Vec<NodeId> = forest.active_terminals().collect();
    let mut report = StepReport::default();
    let total_angle = config.bifurcation_angle_deg.to_radians();

    let perfusable = |p: Vec2| layout.suppression_at(p) > 0.0;

    for t in terminals {
        let tip = forest.node(t).position;
        let p = tip.xy();
        let d_prev = heading(forest, t);
        let probe = p + d_prev * params.sense_distance_mm;
        let local = vegf.sample(probe);
        if local < params.deactivation_threshold {
            forest.deactivate(t);
            report.deactivated += 1;
            continue;
        }

        let grad = vegf.gradient(probe);
        let own = own_neighbourhood(forest, t);
        let is_own = |n: NodeId| own.contains(&Some(n));
        let repulsion = index
            .nearest(forest, p, repel_radius, |a, b| is_own(a) || is_own(b))
            .and_then(|(d, q)| (p - q).normalized().map(|u| u * (step / d.max(1e-12))))
            .unwrap_or(Vec2::ZERO);
        let dir = (d_prev * params.persistence_weight
            + grad * params.gradient_weight
            + repulsion * params.repulsion_weight)
            .normalized()
            .unwrap_or(d_prev);

        let z = tip.z;
        let placeholder = params.root_radius_mm;
        let can_branch = local >= params.vegf_threshold
            && steps_since_branch(forest, t, params.min_branch_spacing) >= params.min_branch_spacing;
        if can_branch && rng.random_bool(params.branch_probability) {
            let ratio = rng.random_range(config.bifurcation_ratio_min..=1.0);
            let (theta_large, theta_small) =
                bifurcation_angles(ratio, config.murray_exponent, total_angle);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let a = p + dir.rotated(side * theta_large) * step;
            let b = p + dir.rotated(-side * theta_small) * step;
            if perfusable(a) && perfusable(b) {
                let ca = forest
                    .add_child(t, Point3::new(a.x, a.y, z), placeholder)
                    .expect("active terminal is a leaf");
                let cb = forest
                    .add_child(t, Point3::new(b.x, b.y, z), placeholder)
                    .expect("active terminal is a leaf");
                forest.deactivate(t);
                forest.activate(ca);
                forest.activate(cb);
                report.bifurcated += 1;
                report.nodes_added += 2;
                continue;
            }
        }

        let next = p + dir * step;
        if perfusable(next) {
            let c = forest
                .add_child(t, Point3::new(next.x, next.y, z), placeholder)
                .expect("active terminal is a leaf");
            forest.deactivate(t);
            forest.activate(c);
            report.extended += 1;
            report.nodes_added += 1;
        } else {
            forest.deactivate(t);
            report.deactivated += 1;
        }
    }
    report
}

/// Murray radii: leaves get `terminal_radius_mm`, a two-child node gets
/// `(r_l^γ + r_r^γ)^(1/γ)`, a pass-through node inherits its child's radius.
pub fn assign_radii(forest: &mut VesselForest, terminal_radius_mm: f64, gamma: f64) {
    let n = forest.node_count();
    let nodes = forest.nodes_mut();
    // children always carry larger ids than their parent
    for i in (0..n).rev() {
        let r = match nodes[i].children.as_slice() {
            [] => terminal_radius_mm,
            [c] => nodes[*c].radius_mm,
            [l, r] => {
                let (rl, rr) = (nodes[*l].radius_mm, nodes[*r].radius_mm);
                let combined = if gamma == 3.0 {
                    (rl * rl * rl + rr * rr * rr).cbrt()
                } else {
                    (rl.powf(gamma) + rr.powf(gamma)).powf(1.0 / gamma)
                };
                combined.max(rl).max(rr)
            }
            _ => unreachable!("binary trees only"),
        };
        nodes[i].radius_mm = r;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridSpec;
    use crate::growth::forest::Layer;
    use crate::layout::{build_layout, LayoutConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symmetric_split_opens_configured_angle() {
        let (a, b) = bifurcation_angles(1.0, 3.0, 75f64.to_radians());
        assert!((a - 37.5f64.to_radians()).abs() < 1e-9);
        assert!((b - 37.5f64.to_radians()).abs() < 1e-9);
    }

    #[test]
    fn unscaled_murray_optimum_is_close_to_75_degrees() {
        // cos θ = 2^(-1/3) for the symmetric cube-law junction
        let theta = (2f64.powf(-1.0 / 3.0)).acos().to_degrees();
        assert!((2.0 * theta - 74.93).abs() < 0.01, "{theta}");
    }

    #[test]
    fn thinner_child_deviates_more() {
        let (large, small) = bifurcation_angles(0.5, 3.0, 75f64.to_radians());
        assert!(small > large, "{large} {small}");
        assert!(large > 0.0);
    }

    fn chain(n: usize) -> VesselForest {
        let mut f = VesselForest::new(Layer::Svc, 0);
        let mut last = f.add_root(Point3::default(), 0.5);
        for i in 1..n {
            last = f.add_child(last, Point3::new(i as f64, 0.0, 0.0), 0.5).unwrap();
        }
        f
    }

    #[test]
    fn murray_symmetric_pair() {
        let mut f = VesselForest::new(Layer::Svc, 0);
        let r = f.add_root(Point3::default(), 0.5);
        f.add_child(r, Point3::new(1.0, 1.0, 0.0), 0.5).unwrap();
        f.add_child(r, Point3::new(1.0, -1.0, 0.0), 0.5).unwrap();
        assign_radii(&mut f, 1.0, 3.0);
        assert!((f.node(0).radius_mm - 1.259921).abs() < 1e-6);
    }

    #[test]
    fn murray_fixture_one_and_two() {
        // leaf radius 1 everywhere, then a parent over a radius-2 subtree:
        // eight unit leaves give 8^(1/3) = 2 exactly in the cube law
        let mut f = VesselForest::new(Layer::Svc, 0);
        let r = f.add_root(Point3::default(), 0.5);
        f.add_child(r, Point3::new(1.0, 1.0, 0.0), 0.5).unwrap();
        let mut frontier = vec![f.add_child(r, Point3::new(1.0, -1.0, 0.0), 0.5).unwrap()];
        for _ in 0..3 {
            let mut next = Vec::new();
            for n in frontier {
                next.push(f.add_child(n, Point3::new(2.0, 0.0, 0.0), 0.5).unwrap());
                next.push(f.add_child(n, Point3::new(2.0, 1.0, 0.0), 0.5).unwrap());
            }
            frontier = next;
        }
        assign_radii(&mut f, 1.0, 3.0);
        assert!((f.node(2).radius_mm - 2.0).abs() < 1e-12);
        assert!((f.node(0).radius_mm - 2.080084).abs() < 1e-6);
        assert!((f.node(0).radius_mm - 9f64.cbrt()).abs() < 1e-12);
    }

    #[test]
    fn chain_keeps_terminal_radius() {
        let mut f = chain(6);
        assign_radii(&mut f, 0.7, 3.0);
        assert!(f.nodes().iter().all(|n| n.radius_mm == 0.7));
    }

    fn test_setup() -> (RetinaLayout, SimConfig, GridSpec) {
        let layout = build_layout(&LayoutConfig::default()).unwrap();
        let config = SimConfig::default();
        let grid = GridSpec::square(12.0, 120).unwrap();
        (layout, config, grid)
    }

    fn straight_terminal(start: Vec2, dir: Vec2) -> VesselForest {
        let mut f = VesselForest::new(Layer::Svc, 0);
        let r = f.add_root(Point3::new(start.x, start.y, 0.0), 0.05);
        let tip = start + dir * 0.1;
        let c = f.add_child(r, Point3::new(tip.x, tip.y, 0.0), 0.05).unwrap();
        f.activate(c);
        f
    }

    #[test]
    fn starved_terminal_deactivates() {
        let (layout, config, grid) = test_setup();
        let vegf = ScalarField2D::filled(grid, 0.0);
        let mut f = straight_terminal(Vec2::new(3.0, 3.0), Vec2::new(1.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let report = grow_step(&mut f, &vegf, &layout, &config, &mut rng);
        assert_eq!(report.deactivated, 1);
        assert_eq!(report.nodes_added, 0);
        assert_eq!(f.node_count(), 2);
        assert_eq!(f.active_count(), 0);
    }

    #[test]
    fn pure_persistence_keeps_heading() {
        let (layout, mut config, grid) = test_setup();
        config.svc.gradient_weight = 0.0;
        config.svc.repulsion_weight = 0.0;
        config.svc.branch_probability = 0.0;
        // a VEGF ramp that would otherwise bend the path
        let vegf = ScalarField2D::from_fn(grid, |p| (0.5 + 0.04 * p.y).min(1.0));
        let dir = Vec2::new(0.6, 0.8);
        let mut f = straight_terminal(Vec2::new(3.0, 3.0), dir);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            grow_step(&mut f, &vegf, &layout, &config, &mut rng);
        }
        assert_eq!(f.node_count(), 7);
        for (p, c) in f.segments() {
            let d = (f.node(c).position.xy() - f.node(p).position.xy()).normalized().unwrap();
            assert!((d.x - dir.x).abs() < 1e-12 && (d.y - dir.y).abs() < 1e-12);
        }
    }

    #[test]
    fn forced_bifurcation_is_symmetric_about_heading() {
        let (layout, mut config, grid) = test_setup();
        config.svc.branch_probability = 1.0;
        config.svc.min_branch_spacing = 0;
        config.svc.gradient_weight = 0.0;
        config.svc.repulsion_weight = 0.0;
        config.bifurcation_ratio_min = 1.0;
        let vegf = ScalarField2D::filled(grid, 1.0);
        let heading = Vec2::new(1.0, 0.0);
        let mut f = straight_terminal(Vec2::new(3.0, 3.0), heading);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let report = grow_step(&mut f, &vegf, &layout, &config, &mut rng);
        assert_eq!(report.bifurcated, 1);
        let tip = f.node(1).position.xy();
        let angles: Vec<f64> = f.node(1)
            .children
            .iter()
            .map(|&c| {
                let d = f.node(c).position.xy() - tip;
                d.y.atan2(d.x)
            })
            .collect();
        let target = 37.5f64.to_radians();
        assert!((angles[0].abs() - target).abs() < 1e-9, "{angles:?}");
        assert!((angles[1].abs() - target).abs() < 1e-9, "{angles:?}");
        assert!(angles[0] * angles[1] < 0.0);
        assert_eq!(f.active_count(), 2);
    }

    #[test]
    fn growth_stops_at_fov_edge() {
        let (layout, mut config, grid) = test_setup();
        config.svc.gradient_weight = 0.0;
        config.svc.repulsion_weight = 0.0;
        config.svc.branch_probability = 0.0;
        config.svc.sense_distance_mm = 0.0;
        let vegf = ScalarField2D::filled(grid, 1.0);
        let mut f = straight_terminal(Vec2::new(1.0, 6.0), Vec2::new(-1.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..30 {
            grow_step(&mut f, &vegf, &layout, &config, &mut rng);
        }
        assert_eq!(f.active_count(), 0);
        assert!(f.nodes().iter().all(|n| layout.in_fov(n.position.xy())));
    }
}
