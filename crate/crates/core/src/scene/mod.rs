//! Scene-graph domain types and graph utilities.
//!
//! A [`SceneGraph`] holds typed object nodes (category, attributes, normalized
//! box) and directed predicate edges between them. Everything here is
//! immutable after construction and safe to share between threads.

mod io;
mod raster;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use io::{
    parse_scene_graph_stream, read_scene_graph_file, write_scene_graph_stream, ParseError,
    SceneRecord,
};
pub use raster::{ImageRef, RasterError, RgbImage};

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", from = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox { x0: v[0], y0: v[1], x1: v[2], y1: v[3] }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub const FULL: BBox = BBox { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 };

    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        (self.x1 - self.x0).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    /// True when ordering holds and every coordinate lies in `[0, 1]`.
    pub fn is_valid(&self) -> bool {
        self.is_ordered() && self.in_unit_frame()
    }

    pub fn is_ordered(&self) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1
    }

    pub fn in_unit_frame(&self) -> bool {
        [self.x0, self.y0, self.x1, self.y1]
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Smallest box containing both.
    pub fn hull(&self, other: &BBox) -> BBox {
        BBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    /// Re-express this box in the frame of `frame`, clamped to `[0, 1]`.
    pub fn reframe(&self, frame: &BBox) -> BBox {
        let fw = frame.x1 - frame.x0;
        let fh = frame.y1 - frame.y0;
        let sx = |v: f64| if fw > 0.0 { ((v - frame.x0) / fw).clamp(0.0, 1.0) } else { 0.0 };
        let sy = |v: f64| if fh > 0.0 { ((v - frame.y0) / fh).clamp(0.0, 1.0) } else { 0.0 };
        BBox { x0: sx(self.x0), y0: sy(self.y0), x1: sx(self.x1), y1: sy(self.y1) }
    }
}

/// Minimal box containing every input box.
pub fn union_box(boxes: &[BBox]) -> Result<BBox, GraphError> {
    let (first, rest) = boxes.split_first().ok_or(GraphError::EmptyBoxList)?;
    Ok(rest.iter().fold(*first, |acc, b| acc.hull(b)))
}

/// Attribute category tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrTag {
    Color,
    Material,
    Size,
    State,
}

impl AttrTag {
    pub const ALL: [AttrTag; 4] = [AttrTag::Color, AttrTag::Material, AttrTag::Size, AttrTag::State];

    pub fn as_str(&self) -> &'static str {
        match self {
            AttrTag::Color => "color",
            AttrTag::Material => "material",
            AttrTag::Size => "size",
            AttrTag::State => "state",
        }
    }

    pub fn parse(s: &str) -> Option<AttrTag> {
        AttrTag::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for AttrTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Attribute {
    pub tag: AttrTag,
    pub value: String,
}

impl Attribute {
    pub fn new(tag: AttrTag, value: impl Into<String>) -> Self {
        Attribute { tag, value: value.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectNode {
    pub id: i64,
    pub category: String,
    pub attributes: Vec<Attribute>,
    pub bbox: BBox,
}

impl ObjectNode {
    pub fn new(id: i64, category: impl Into<String>, bbox: BBox) -> Self {
        ObjectNode { id, category: category.into(), attributes: Vec::new(), bbox }
    }

    pub fn with_attr(mut self, tag: AttrTag, value: impl Into<String>) -> Self {
        self.attributes.push(Attribute::new(tag, value));
        self
    }

    /// Attributes prepended to the category in stored order: "black dog".
    pub fn phrase(&self) -> String {
        let mut out = String::new();
        for a in &self.attributes {
            out.push_str(&a.value);
            out.push(' ');
        }
        out.push_str(&self.category);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RelationEdge {
    pub subject_id: i64,
    pub predicate: String,
    pub object_id: i64,
}

impl RelationEdge {
    pub fn new(subject_id: i64, predicate: impl Into<String>, object_id: i64) -> Self {
        RelationEdge { subject_id, predicate: predicate.into(), object_id }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneGraph {
    pub image_id: String,
    pub nodes: Vec<ObjectNode>,
    pub edges: Vec<RelationEdge>,
}

/// One invariant violation found by [`validate_graph`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DuplicateNodeId { id: i64 },
    EmptyCategory { node: i64 },
    EmptyAttributeValue { node: i64 },
    BoxOrdering { node: i64 },
    BoxOutOfRange { node: i64 },
    DanglingSubject { edge: usize, id: i64 },
    DanglingObject { edge: usize, id: i64 },
    SelfLoop { edge: usize, id: i64 },
    EmptyPredicate { edge: usize },
    DuplicateEdge { edge: usize },
}

impl Violation {
    /// Name of the offending field, as reported in parse errors.
    pub fn field(&self) -> &'static str {
        match self {
            Violation::DuplicateNodeId { .. } => "id",
            Violation::EmptyCategory { .. } => "category",
            Violation::EmptyAttributeValue { .. } => "attributes.value",
            Violation::BoxOrdering { .. } | Violation::BoxOutOfRange { .. } => "box",
            Violation::DanglingSubject { .. } => "subject_id",
            Violation::DanglingObject { .. } => "object_id",
            Violation::SelfLoop { .. } => "object_id",
            Violation::EmptyPredicate { .. } => "predicate",
            Violation::DuplicateEdge { .. } => "edges",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateNodeId { id } => write!(f, "duplicate node id {id}"),
            Violation::EmptyCategory { node } => write!(f, "empty category on node {node}"),
            Violation::EmptyAttributeValue { node } => {
                write!(f, "empty attribute value on node {node}")
            }
            Violation::BoxOrdering { node } => {
                write!(f, "BBox ordering violated on node {node} (need x0<=x1, y0<=y1)")
            }
            Violation::BoxOutOfRange { node } => {
                write!(f, "box of node {node} outside the normalized [0,1] frame")
            }
            Violation::DanglingSubject { id, .. } => write!(f, "dangling subject_id {id}"),
            Violation::DanglingObject { id, .. } => write!(f, "dangling object_id {id}"),
            Violation::SelfLoop { edge, id } => write!(f, "edge {edge} is a self loop on node {id}"),
            Violation::EmptyPredicate { edge } => write!(f, "empty predicate on edge {edge}"),
            Violation::DuplicateEdge { edge } => write!(f, "edge {edge} duplicates an earlier triple"),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GraphError {
    #[error("union_box needs at least one box")]
    EmptyBoxList,
    #[error("invalid scene graph: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// Every invariant violation of `g`; empty means the graph is valid.
pub fn validate_graph(g: &SceneGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for n in &g.nodes {
        if !ids.insert(n.id) {
            out.push(Violation::DuplicateNodeId { id: n.id });
        }
        if n.category.trim().is_empty() {
            out.push(Violation::EmptyCategory { node: n.id });
        }
        if n.attributes.iter().any(|a| a.value.trim().is_empty()) {
            out.push(Violation::EmptyAttributeValue { node: n.id });
        }
        if !n.bbox.is_ordered() {
            out.push(Violation::BoxOrdering { node: n.id });
        }
        if !n.bbox.in_unit_frame() {
            out.push(Violation::BoxOutOfRange { node: n.id });
        }
    }
    let mut triples = HashSet::new();
    for (i, e) in g.edges.iter().enumerate() {
        if !ids.contains(&e.subject_id) {
            out.push(Violation::DanglingSubject { edge: i, id: e.subject_id });
        }
        if !ids.contains(&e.object_id) {
            out.push(Violation::DanglingObject { edge: i, id: e.object_id });
        }
        if e.subject_id == e.object_id {
            out.push(Violation::SelfLoop { edge: i, id: e.subject_id });
        }
        if e.predicate.trim().is_empty() {
            out.push(Violation::EmptyPredicate { edge: i });
        }
        if !triples.insert((e.subject_id, e.predicate.as_str(), e.object_id)) {
            out.push(Violation::DuplicateEdge { edge: i });
        }
    }
    out
}

impl SceneGraph {
    pub fn new(image_id: impl Into<String>) -> Self {
        SceneGraph { image_id: image_id.into(), nodes: Vec::new(), edges: Vec::new() }
    }

    pub fn validated(self) -> Result<Self, GraphError> {
        let v = validate_graph(&self);
        if v.is_empty() {
            Ok(self)
        } else {
            Err(GraphError::Invalid(v))
        }
    }

    pub fn node(&self, id: i64) -> Option<&ObjectNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: i64) -> Option<&mut ObjectNode> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    /// Map from node id to its position in `nodes`.
    pub fn index_of_ids(&self) -> HashMap<i64, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect()
    }

    pub fn out_degree(&self, id: i64) -> usize {
        self.edges.iter().filter(|e| e.subject_id == id).count()
    }

    pub fn in_degree(&self, id: i64) -> usize {
        self.edges.iter().filter(|e| e.object_id == id).count()
    }

    /// Phrase for a relation edge: "<subject phrase> <predicate> <object phrase>".
    pub fn relation_phrase(&self, e: &RelationEdge) -> Option<String> {
        let s = self.node(e.subject_id)?;
        let o = self.node(e.object_id)?;
        Some(format!("{} {} {}", s.phrase(), e.predicate, o.phrase()))
    }

    /// Union box of the two endpoints of a relation edge.
    pub fn relation_box(&self, e: &RelationEdge) -> Option<BBox> {
        let s = self.node(e.subject_id)?;
        let o = self.node(e.object_id)?;
        Some(s.bbox.hull(&o.bbox))
    }
}

/// Weakly connected components in order of first node appearance.
///
/// Node and edge order inside each component follows the input graph.
pub fn connected_components(g: &SceneGraph) -> Vec<SceneGraph> {
    let index = g.index_of_ids();
    let mut parent: Vec<usize> = (0..g.nodes.len()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for e in &g.edges {
        if let (Some(&a), Some(&b)) = (index.get(&e.subject_id), index.get(&e.object_id)) {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let mut comp_of_root: BTreeMap<usize, usize> = BTreeMap::new();
    let mut comps: Vec<SceneGraph> = Vec::new();
    let mut comp_of_node = vec![0usize; g.nodes.len()];
    for (i, n) in g.nodes.iter().enumerate() {
        let r = find(&mut parent, i);
        let c = *comp_of_root.entry(r).or_insert_with(|| {
            comps.push(SceneGraph::new(g.image_id.clone()));
            comps.len() - 1
        });
        comp_of_node[i] = c;
        comps[c].nodes.push(n.clone());
    }
    for e in &g.edges {
        if let Some(&a) = index.get(&e.subject_id) {
            comps[comp_of_node[a]].edges.push(e.clone());
        }
    }
    comps
}

/// An image paired with its scene graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSgPair {
    pub image: ImageRef,
    pub graph: SceneGraph,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTextPair {
    pub image: RgbImage,
    pub caption: String,
}

impl ImageTextPair {
    pub fn new(image: RgbImage, caption: impl Into<String>) -> Result<Self, crate::Error> {
        let caption = caption.into();
        if caption.trim().is_empty() {
            return Err(crate::Error::Invalid("caption must be non-empty".into()));
        }
        Ok(ImageTextPair { image, caption })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1)
    }

    fn two_node() -> SceneGraph {
        let mut g = SceneGraph::new("img");
        g.nodes.push(ObjectNode::new(1, "cup", b(0.1, 0.1, 0.3, 0.3)));
        g.nodes.push(ObjectNode::new(2, "table", b(0.0, 0.3, 1.0, 1.0)));
        g.edges.push(RelationEdge::new(1, "on", 2));
        g
    }

    #[test]
    fn valid_graph_has_no_violations() {
        assert!(validate_graph(&two_node()).is_empty());
    }

    #[test]
    fn dangling_subject_is_named() {
        let mut g = two_node();
        g.edges.push(RelationEdge::new(7, "on", 2));
        let v = validate_graph(&g);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].to_string(), "dangling subject_id 7");
        assert_eq!(v[0].field(), "subject_id");
    }

    #[test]
    fn reversed_box_reports_ordering() {
        let mut g = two_node();
        g.nodes[0].bbox = b(0.5, 0.1, 0.2, 0.3);
        let v = validate_graph(&g);
        assert!(matches!(v[0], Violation::BoxOrdering { node: 1 }));
        assert!(v[0].to_string().contains("BBox ordering"));
    }

    #[test]
    fn duplicate_triple_and_self_loop() {
        let mut g = two_node();
        g.edges.push(RelationEdge::new(1, "on", 2));
        g.edges.push(RelationEdge::new(2, "near", 2));
        let v = validate_graph(&g);
        assert!(v.contains(&Violation::DuplicateEdge { edge: 1 }));
        assert!(v.contains(&Violation::SelfLoop { edge: 2, id: 2 }));
    }

    #[test]
    fn components_edge_and_isolated() {
        let mut g = SceneGraph::new("x");
        for (id, c) in [(1, "a"), (2, "b"), (3, "c")] {
            g.nodes.push(ObjectNode::new(id, c, BBox::FULL));
        }
        g.edges.push(RelationEdge::new(1, "r", 2));
        let comps = connected_components(&g);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].nodes.iter().map(|n| n.id).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(comps[0].edges.len(), 1);
        assert_eq!(comps[1].nodes[0].id, 3);
        assert!(comps[1].edges.is_empty());
    }

    #[test]
    fn components_of_empty_graph() {
        assert!(connected_components(&SceneGraph::new("e")).is_empty());
    }

    #[test]
    fn components_two_chains() {
        // Two 3-node chains, interleaved in storage; edge direction mixed.
        let mut g = SceneGraph::new("x");
        for id in 0..6 {
            g.nodes.push(ObjectNode::new(id, "n", BBox::FULL));
        }
        g.edges.push(RelationEdge::new(0, "r", 2));
        g.edges.push(RelationEdge::new(3, "r", 1));
        g.edges.push(RelationEdge::new(4, "r", 2));
        g.edges.push(RelationEdge::new(5, "r", 3));
        let comps = connected_components(&g);
        assert_eq!(comps.len(), 2);
        let ids: Vec<Vec<i64>> =
            comps.iter().map(|c| c.nodes.iter().map(|n| n.id).collect()).collect();
        assert_eq!(ids, vec![vec![0, 2, 4], vec![1, 3, 5]]);
        assert!(comps.iter().all(|c| c.edges.len() == 2));
    }

    #[test]
    fn union_box_cases() {
        let x = b(0.1, 0.2, 0.3, 0.4);
        assert_eq!(union_box(&[x, x]).unwrap(), x);
        assert_eq!(
            union_box(&[b(0.0, 0.0, 0.5, 0.5), b(0.5, 0.5, 1.0, 1.0)]).unwrap(),
            BBox::FULL
        );
        assert_eq!(union_box(&[]), Err(GraphError::EmptyBoxList));
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(a, b2, c, d)| {
            BBox::new(a.min(c), b2.min(d), a.max(c), b2.max(d))
        })
    }

    proptest! {
        #[test]
        fn union_box_matches_pairwise_fold(bs in prop::collection::vec(arb_box(), 1..6)) {
            let u = union_box(&bs).unwrap();
            let mut acc = bs[0];
            for x in &bs[1..] {
                acc = BBox::new(acc.x0.min(x.x0), acc.y0.min(x.y0), acc.x1.max(x.x1), acc.y1.max(x.y1));
            }
            prop_assert_eq!(u, acc);
            let mut rev = bs.clone();
            rev.reverse();
            prop_assert_eq!(union_box(&rev).unwrap(), u);
            let mut doubled = bs.clone();
            doubled.extend(bs.iter().copied());
            prop_assert_eq!(union_box(&doubled).unwrap(), u);
            prop_assert!(bs.iter().all(|x| u.contains(x)));
        }

        #[test]
        fn components_partition_nodes_and_edges(
            n in 1usize..8,
            raw in prop::collection::vec((0usize..8, 0usize..8), 0..12),
        ) {
            let mut g = SceneGraph::new("p");
            for id in 0..n {
                g.nodes.push(ObjectNode::new(id as i64, "n", BBox::FULL));
            }
            let mut seen = HashSet::new();
            for (s, o) in raw {
                let (s, o) = (s % n, o % n);
                if s != o && seen.insert((s, o)) {
                    g.edges.push(RelationEdge::new(s as i64, "r", o as i64));
                }
            }
            let comps = connected_components(&g);
            let mut node_ids: Vec<i64> = comps.iter().flat_map(|c| c.nodes.iter().map(|x| x.id)).collect();
            node_ids.sort();
            prop_assert_eq!(node_ids, (0..n as i64).collect::<Vec<_>>());
            let edge_count: usize = comps.iter().map(|c| c.edges.len()).sum();
            prop_assert_eq!(edge_count, g.edges.len());
            for c in &comps {
                let ids: HashSet<i64> = c.nodes.iter().map(|x| x.id).collect();
                prop_assert!(c.edges.iter().all(|e| ids.contains(&e.subject_id) && ids.contains(&e.object_id)));
            }
        }
    }
}
