//! Node placement, geometry and neighbor/favorable-forwarder sets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Planar position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64) -> Self {
        Position { x, y }
    }
}

/// Euclidean distance in meters.
pub fn dist(a: Position, b: Position) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Rectangular deployment field anchored at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub width: f64,
    pub height: f64,
}

impl Field {
    pub fn contains(&self, p: Position) -> bool {
        (0.0..=self.width).contains(&p.x) && (0.0..=self.height).contains(&p.y)
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }
}

/// Axis-aligned rectangle used for source placement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub min: Position,
    pub max: Position,
}

impl Region {
    pub fn centered(center: Position, half_side: f64) -> Self {
        Region {
            min: Position::new(center.x - half_side, center.y - half_side),
            max: Position::new(center.x + half_side, center.y + half_side),
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> Position {
        Position::new(
            sample_span(rng, self.min.x, self.max.x),
            sample_span(rng, self.min.y, self.max.y),
        )
    }
}

fn sample_span(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("field must have positive area, got {width} x {height}")]
    ZeroAreaField { width: f64, height: f64 },
    #[error("a topology needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("destination {0} is not a member node")]
    UnknownDestination(NodeId),
    #[error("radio range must be positive, got {0}")]
    NonPositiveRange(f64),
    #[error("node {id} at ({x}, {y}) lies outside the field")]
    OutOfField { id: NodeId, x: f64, y: f64 },
    #[error("source region does not fit inside the field")]
    RegionOutsideField,
}

/// Immutable deployment: node positions, field, uniform radio range and the
/// sink every packet is routed to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    nodes: BTreeMap<NodeId, Position>,
    field: Field,
    radio_range: f64,
    destination: NodeId,
}

impl Topology {
    pub fn new(
        nodes: impl IntoIterator<Item = (NodeId, Position)>,
        field: Field,
        radio_range: f64,
        destination: NodeId,
    ) -> Result<Self, TopologyError> {
        if !(field.width > 0.0 && field.height > 0.0) {
            return Err(TopologyError::ZeroAreaField {
                width: field.width,
                height: field.height,
            });
        }
        if !(radio_range > 0.0) {
            return Err(TopologyError::NonPositiveRange(radio_range));
        }
        let mut map = BTreeMap::new();
        for (id, p) in nodes {
            if !field.contains(p) {
                return Err(TopologyError::OutOfField { id, x: p.x, y: p.y });
            }
            if map.insert(id, p).is_some() {
                return Err(TopologyError::DuplicateNode(id));
            }
        }
        if map.len() < 2 {
            return Err(TopologyError::TooFewNodes(map.len()));
        }
        if !map.contains_key(&destination) {
            return Err(TopologyError::UnknownDestination(destination));
        }
        Ok(Topology {
            nodes: map,
            field,
            radio_range,
            destination,
        })
    }

    pub fn field(&self) -> Field {
        self.field
    }

    pub fn radio_range(&self) -> f64 {
        self.radio_range
    }

    pub fn destination(&self) -> NodeId {
        self.destination
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn position(&self, id: NodeId) -> Option<Position> {
        self.nodes.get(&id).copied()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, Position)> + '_ {
        self.nodes.iter().map(|(id, p)| (*id, *p))
    }

    /// Distance between two member nodes. Panics on unknown ids.
    pub fn distance(&self, a: NodeId, b: NodeId) -> f64 {
        dist(self.nodes[&a], self.nodes[&b])
    }

    pub fn distance_to_destination(&self, id: NodeId) -> f64 {
        self.distance(id, self.destination)
    }

    pub fn in_range(&self, a: NodeId, b: NodeId) -> bool {
        a != b && self.distance(a, b) <= self.radio_range
    }
}

/// Uniformly places `count` nodes in `field` (a binomial point process).
/// Node 0 is the destination.
pub fn place_nodes(
    seed: u64,
    count: usize,
    field: Field,
    radio_range: f64,
) -> Result<Topology, TopologyError> {
    if !(field.width > 0.0 && field.height > 0.0) {
        return Err(TopologyError::ZeroAreaField {
            width: field.width,
            height: field.height,
        });
    }
    if count < 2 {
        return Err(TopologyError::TooFewNodes(count));
    }
    let whole = Region {
        min: Position::new(0.0, 0.0),
        max: Position::new(field.width, field.height),
    };
    let nodes = (0..count as u32).map(|i| {
        let mut rng = node_stream(seed, i);
        (NodeId(i), whole.sample(&mut rng))
    });
    Topology::new(nodes, field, radio_range, NodeId(0))
}

/// Layout used by scenarios: sink at a fixed position, sources inside a
/// region, every other node uniform over the field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Layout {
    pub count: usize,
    pub field: Field,
    pub radio_range: f64,
    pub sink: Position,
    pub source_region: Region,
    pub sources: usize,
}

/// Ids: sink is 0, sources are `1..=sources`, relays follow. Each node draws
/// from its own stream so a node's position does not depend on how many
/// other nodes exist.
pub fn place_scenario(seed: u64, layout: &Layout) -> Result<Topology, TopologyError> {
    let field = layout.field;
    if !(field.width > 0.0 && field.height > 0.0) {
        return Err(TopologyError::ZeroAreaField {
            width: field.width,
            height: field.height,
        });
    }
    if layout.count < layout.sources + 1 || layout.count < 2 {
        return Err(TopologyError::TooFewNodes(layout.count));
    }
    if !field.contains(layout.source_region.min) || !field.contains(layout.source_region.max) {
        return Err(TopologyError::RegionOutsideField);
    }
    let whole = Region {
        min: Position::new(0.0, 0.0),
        max: Position::new(field.width, field.height),
    };
    let mut nodes = Vec::with_capacity(layout.count);
    nodes.push((NodeId(0), layout.sink));
    for i in 1..layout.count as u32 {
        let mut rng = node_stream(seed, i);
        let region = if (i as usize) <= layout.sources {
            &layout.source_region
        } else {
            &whole
        };
        nodes.push((NodeId(i), region.sample(&mut rng)));
    }
    Topology::new(nodes, field, layout.radio_range, NodeId(0))
}

fn node_stream(seed: u64, index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x70_0000_0000 | index as u64);
    rng
}

/// One-hop and two-hop neighborhoods of every node.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeighborTables {
    pub n1: BTreeMap<NodeId, BTreeSet<NodeId>>,
    pub n2: BTreeMap<NodeId, BTreeSet<NodeId>>,
}

impl NeighborTables {
    pub fn one_hop(&self, x: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.n1.get(&x).into_iter().flatten().copied()
    }

    pub fn two_hop(&self, x: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.n2.get(&x).into_iter().flatten().copied()
    }
}

pub fn build_neighbor_tables(t: &Topology) -> NeighborTables {
    let ids: Vec<NodeId> = t.node_ids().collect();
    let mut n1: BTreeMap<NodeId, BTreeSet<NodeId>> =
        ids.iter().map(|&id| (id, BTreeSet::new())).collect();
    for (i, &a) in ids.iter().enumerate() {
        for &b in &ids[i + 1..] {
            if t.in_range(a, b) {
                n1.get_mut(&a).unwrap().insert(b);
                n1.get_mut(&b).unwrap().insert(a);
            }
        }
    }
    let n2 = ids
        .iter()
        .map(|&x| {
            let set: BTreeSet<NodeId> = n1[&x]
                .iter()
                .flat_map(|y| n1[y].iter().copied())
                .filter(|&z| z != x)
                .collect();
            (x, set)
        })
        .collect();
    NeighborTables { n1, n2 }
}

/// Neighbors of `x` strictly closer to the destination than `x`.
pub fn favorable_one_hop(x: NodeId, tables: &NeighborTables, t: &Topology) -> BTreeSet<NodeId> {
    let dx = t.distance_to_destination(x);
    tables
        .one_hop(x)
        .filter(|&y| dx - t.distance_to_destination(y) > 0.0)
        .collect()
}

/// Pairs `(y, z)` with `y` a favorable forwarder of `x` and `z` a neighbor of
/// `y` strictly closer to the destination than `y`. The destination itself
/// qualifies as `z` whenever it neighbors `y`.
pub fn favorable_two_hop(
    x: NodeId,
    tables: &NeighborTables,
    t: &Topology,
) -> BTreeSet<(NodeId, NodeId)> {
    let mut pairs = BTreeSet::new();
    for y in favorable_one_hop(x, tables, t) {
        let dy = t.distance_to_destination(y);
        for z in tables.one_hop(y) {
            if z != x && dy - t.distance_to_destination(z) > 0.0 {
                pairs.insert((y, z));
            }
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(w: f64, h: f64) -> Field {
        Field {
            width: w,
            height: h,
        }
    }

    fn line_topology() -> Topology {
        // A - B - C with only adjacent pairs in range; C is the destination.
        Topology::new(
            [
                (NodeId(1), Position::new(0.0, 0.0)),
                (NodeId(2), Position::new(30.0, 0.0)),
                (NodeId(3), Position::new(60.0, 0.0)),
            ],
            field(100.0, 10.0),
            40.0,
            NodeId(3),
        )
        .unwrap()
    }

    #[test]
    fn distance_identity_and_pythagorean_triple() {
        let a = Position::new(0.0, 0.0);
        assert_eq!(dist(a, a), 0.0);
        assert_eq!(dist(a, Position::new(3.0, 4.0)), 5.0);
    }

    #[test]
    fn placement_is_deterministic_and_in_field() {
        let f = field(200.0, 200.0);
        let a = place_nodes(7, 200, f, 40.0).unwrap();
        let b = place_nodes(7, 200, f, 40.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 200);
        assert!(a.nodes().all(|(_, p)| f.contains(p)));
        let c = place_nodes(8, 200, f, 40.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn minimum_topology_has_two_distinct_ids() {
        let t = place_nodes(1, 2, field(10.0, 10.0), 5.0).unwrap();
        let ids: BTreeSet<_> = t.node_ids().collect();
        assert_eq!(ids.len(), 2);
    }

    #[test]
    fn desk_density_matches_target() {
        let f = field(100.0, 100.0);
        let t = place_nodes(3, 50, f, 40.0).unwrap();
        assert!((t.len() as f64 / f.area() - 0.005).abs() < 1e-12);
    }

    #[test]
    fn configuration_errors() {
        assert_eq!(
            place_nodes(1, 10, field(0.0, 10.0), 40.0),
            Err(TopologyError::ZeroAreaField {
                width: 0.0,
                height: 10.0
            })
        );
        assert_eq!(
            place_nodes(1, 1, field(10.0, 10.0), 40.0),
            Err(TopologyError::TooFewNodes(1))
        );
        let err = Topology::new(
            [
                (NodeId(1), Position::new(0.0, 0.0)),
                (NodeId(1), Position::new(1.0, 0.0)),
            ],
            field(10.0, 10.0),
            5.0,
            NodeId(1),
        );
        assert_eq!(err, Err(TopologyError::DuplicateNode(NodeId(1))));
        let err = Topology::new(
            [
                (NodeId(1), Position::new(0.0, 0.0)),
                (NodeId(2), Position::new(1.0, 0.0)),
            ],
            field(10.0, 10.0),
            5.0,
            NodeId(9),
        );
        assert_eq!(err, Err(TopologyError::UnknownDestination(NodeId(9))));
    }

    #[test]
    fn two_nodes_in_range_have_no_two_hop_neighbors() {
        let t = Topology::new(
            [
                (NodeId(0), Position::new(0.0, 0.0)),
                (NodeId(1), Position::new(10.0, 0.0)),
            ],
            field(20.0, 20.0),
            40.0,
            NodeId(0),
        )
        .unwrap();
        let tables = build_neighbor_tables(&t);
        assert_eq!(tables.n1[&NodeId(0)], BTreeSet::from([NodeId(1)]));
        assert_eq!(tables.n1[&NodeId(1)], BTreeSet::from([NodeId(0)]));
        assert!(tables.n2[&NodeId(0)].is_empty());
        assert!(tables.n2[&NodeId(1)].is_empty());
    }

    #[test]
    fn collinear_chain_two_hop() {
        let t = line_topology();
        let tables = build_neighbor_tables(&t);
        assert_eq!(tables.n2[&NodeId(1)], BTreeSet::from([NodeId(3)]));
        assert_eq!(
            favorable_one_hop(NodeId(1), &tables, &t),
            BTreeSet::from([NodeId(2)])
        );
        // destination is reachable through the relay
        assert_eq!(
            favorable_two_hop(NodeId(1), &tables, &t),
            BTreeSet::from([(NodeId(2), NodeId(3))])
        );
    }

    #[test]
    fn destination_has_no_favorable_forwarders() {
        let t = line_topology();
        let tables = build_neighbor_tables(&t);
        assert!(favorable_one_hop(NodeId(3), &tables, &t).is_empty());
        assert!(favorable_two_hop(NodeId(3), &tables, &t).is_empty());
    }

    #[test]
    fn scenario_layout_places_roles() {
        let layout = Layout {
            count: 50,
            field: field(100.0, 100.0),
            radio_range: 40.0,
            sink: Position::new(100.0, 100.0),
            source_region: Region::centered(Position::new(20.0, 20.0), 10.0),
            sources: 10,
        };
        let t = place_scenario(5, &layout).unwrap();
        assert_eq!(t.position(NodeId(0)), Some(Position::new(100.0, 100.0)));
        for i in 1..=10 {
            let p = t.position(NodeId(i)).unwrap();
            assert!((10.0..=30.0).contains(&p.x) && (10.0..=30.0).contains(&p.y));
        }
        // relay positions do not depend on the number of sources
        let fewer = place_scenario(
            5,
            &Layout {
                sources: 6,
                ..layout
            },
        )
        .unwrap();
        assert_eq!(t.position(NodeId(20)), fewer.position(NodeId(20)));
    }
}
