use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;

pub type NodeId = usize;

/// Retinal capillary plexus a forest belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    /// Superficial vascular complex.
    Svc,
    /// Deep vascular complex.
    Dvc,
}

impl Layer {
    pub const ALL: [Layer; 2] = [Layer::Svc, Layer::Dvc];

    pub fn name(self) -> &'static str {
        match self {
            Layer::Svc => "svc",
            Layer::Dvc => "dvc",
        }
    }

    pub fn index(self) -> u64 {
        match self {
            Layer::Svc => 0,
            Layer::Dvc => 1,
        }
    }
}

impl std::str::FromStr for Layer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "svc" => Ok(Layer::Svc),
            "dvc" => Ok(Layer::Dvc),
            other => Err(Error::InvalidArgument(format!("unknown layer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    /// Layer depth.
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn xy(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselNode {
    pub id: NodeId,
    pub position: Point3,
    pub radius_mm: f64,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
}

/// A set of rooted binary trees. Node ids are indices into `nodes` and
/// every child has a larger id than its parent.
#[derive(Debug, Clone, PartialEq)]
pub struct VesselForest {
    pub layer: Layer,
    pub rng_seed: u64,
    nodes: Vec<VesselNode>,
    roots: Vec<NodeId>,
    active: BTreeSet<NodeId>,
}

impl VesselForest {
    pub fn new(layer: Layer, rng_seed: u64) -> Self {
        Self {
            layer,
            rng_seed,
            nodes: Vec::new(),
            roots: Vec::new(),
            active: BTreeSet::new(),
        }
    }

    pub fn add_root(&mut self, position: Point3, radius_mm: f64) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(VesselNode {
            id,
            position,
            radius_mm,
            parent: None,
            children: Vec::new(),
        });
        self.roots.push(id);
        id
    }

    /// Append a child below `parent`. Fails if `parent` already has two.
    pub fn add_child(&mut self, parent: NodeId, position: Point3, radius_mm: f64) -> Result<NodeId> {
        let id = self.nodes.len();
        let p = self
            .nodes
            .get_mut(parent)
            .ok_or_else(|| Error::InvalidArgument(format!("no node {parent}")))?;
        if p.children.len() >= 2 {
            return Err(Error::InvalidArgument(format!(
                "node {parent} already has two children"
            )));
        }
        p.children.push(id);
        self.nodes.push(VesselNode {
            id,
            position,
            radius_mm,
            parent: Some(parent),
            children: Vec::new(),
        });
        Ok(id)
    }

    pub fn nodes(&self) -> &[VesselNode] {
        &self.nodes
    }

    pub(crate) fn nodes_mut(&mut self) -> &mut [VesselNode] {
        &mut self.nodes
    }

    pub fn node(&self, id: NodeId) -> &VesselNode {
        &self.nodes[id]
    }

    pub fn roots(&self) -> &[NodeId] {
        &self.roots
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn segment_count(&self) -> usize {
        self.nodes.len() - self.roots.len()
    }

    /// `(parent, child)` pairs in ascending child id.
    pub fn segments(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.nodes
            .iter()
            .filter_map(|n| n.parent.map(|p| (p, n.id)))
    }

    /// Number of leaves, active or not.
    pub fn terminal_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.children.is_empty() && n.parent.is_some())
            .count()
    }

    pub fn active_terminals(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.active.iter().copied()
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    pub fn is_active(&self, id: NodeId) -> bool {
        self.active.contains(&id)
    }

    pub(crate) fn activate(&mut self, id: NodeId) {
        self.active.insert(id);
    }

    pub(crate) fn deactivate(&mut self, id: NodeId) {
        self.active.remove(&id);
    }

    pub fn max_radius(&self) -> f64 {
        self.nodes.iter().map(|n| n.radius_mm).fold(0.0, f64::max)
    }

    /// Shift every node in the plane.
    pub fn translate(&mut self, offset: Vec2) {
        for n in &mut self.nodes {
            n.position.x += offset.x;
            n.position.y += offset.y;
        }
    }

    /// Apply `f` to every node position, e.g. to snap coordinates.
    pub fn map_positions(&mut self, mut f: impl FnMut(Point3) -> Point3) {
        for n in &mut self.nodes {
            n.position = f(n.position);
        }
    }

    /// Apply `f` to every node radius.
    pub fn map_radii(&mut self, mut f: impl FnMut(f64) -> f64) {
        for n in &mut self.nodes {
            n.radius_mm = f(n.radius_mm);
        }
    }

    /// Check the structural invariants: binary, acyclic, consistent links,
    /// positive finite radii.
    pub fn check_structure(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        let mut root_count = 0;
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return bad(format!("node at index {i} carries id {}", n.id));
            }
            if !(n.radius_mm > 0.0 && n.radius_mm.is_finite()) {
                return bad(format!("node {i} has radius {}", n.radius_mm));
            }
            if n.children.len() > 2 {
                return bad(format!("node {i} has {} children", n.children.len()));
            }
            match n.parent {
                None => root_count += 1,
                Some(p) => {
                    if p >= i {
                        return bad(format!("node {i} has parent {p} with a larger id"));
                    }
                    if !self.nodes[p].children.contains(&i) {
                        return bad(format!("parent {p} does not list child {i}"));
                    }
                }
            }
            for &c in &n.children {
                if c >= self.nodes.len() || self.nodes[c].parent != Some(i) {
                    return bad(format!("child link {i} -> {c} is not mirrored"));
                }
            }
        }
        if root_count != self.roots.len() {
            return bad(format!(
                "{} parentless nodes but {} roots",
                root_count,
                self.roots.len()
            ));
        }
        Ok(())
    }

    /// Line-based dump: one node per line, `id parent x y z radius`, with
    /// `-1` as the parent of a root. Lines starting with `#` are comments.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# layer={} seed={}", self.layer.name(), self.rng_seed)?;
        writeln!(w, "# id parent x y z radius")?;
        for n in &self.nodes {
            let parent = n.parent.map_or(-1, |p| p as i64);
            writeln!(
                w,
                "{} {} {} {} {} {}",
                n.id, parent, n.position.x, n.position.y, n.position.z, n.radius_mm
            )?;
        }
        Ok(())
    }

    pub fn read_dump<R: BufRead>(r: R, layer: Layer, rng_seed: u64) -> Result<Self> {
        let mut forest = VesselForest::new(layer, rng_seed);
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| Error::Parse {
                line: lineno + 1,
                msg: msg.to_string(),
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(err("expected `id parent x y z radius`"));
            }
            let id: usize = fields[0].parse().map_err(|_| err("bad id"))?;
            let parent: i64 = fields[1].parse().map_err(|_| err("bad parent"))?;
            let mut nums = [0.0f64; 4];
            for (slot, f) in nums.iter_mut().zip(&fields[2..]) {
                *slot = f.parse().map_err(|_| err("bad number"))?;
            }
            if id != forest.node_count() {
                return Err(err("node ids must be consecutive from 0"));
            }
            let pos = Point3::new(nums[0], nums[1], nums[2]);
            if parent < 0 {
                forest.add_root(pos, nums[3]);
            } else {
                let p = parent as usize;
                if p >= id {
                    return Err(err("parent must precede its child"));
                }
                forest
                    .add_child(p, pos, nums[3])
                    .map_err(|e| err(&e.to_string()))?;
            }
        }
        forest.check_structure()?;
        Ok(forest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn little_tree() -> VesselForest {
        let mut f = VesselForest::new(Layer::Svc, 1);
        let r = f.add_root(Point3::new(0.0, 0.0, 0.0), 1.0);
        let a = f.add_child(r, Point3::new(1.0, 0.0, 0.0), 1.0).unwrap();
        f.add_child(a, Point3::new(2.0, 1.0, 0.0), 1.0).unwrap();
        f.add_child(a, Point3::new(2.0, -1.0, 0.0), 1.0).unwrap();
        f
    }

    #[test]
    fn third_child_is_rejected() {
        let mut f = little_tree();
        assert!(f.add_child(1, Point3::default(), 1.0).is_err());
    }

    #[test]
    fn counts() {
        let f = little_tree();
        assert_eq!(f.node_count(), 4);
        assert_eq!(f.segment_count(), 3);
        assert_eq!(f.terminal_count(), 2);
        assert_eq!(f.segments().collect::<Vec<_>>(), vec![(0, 1), (1, 2), (1, 3)]);
        f.check_structure().unwrap();
    }

    #[test]
    fn dump_round_trip() {
        let f = little_tree();
        let mut buf = Vec::new();
        f.write_dump(&mut buf).unwrap();
        let g = VesselForest::read_dump(&buf[..], Layer::Svc, 1).unwrap();
        assert_eq!(f.nodes(), g.nodes());
        assert_eq!(f.roots(), g.roots());
    }

    #[test]
    fn dump_rejects_forward_parent() {
        let text = "0 -1 0 0 0 1\n1 2 0 0 0 1\n";
        assert!(VesselForest::read_dump(text.as_bytes(), Layer::Svc, 0).is_err());
    }
}
