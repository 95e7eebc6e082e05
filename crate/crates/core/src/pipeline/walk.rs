//! Subgraph extraction: random walk, crop-to-union, densify, size filter.

use std::collections::HashSet;

use rand::Rng;

use super::RuleConfig;
use crate::scene::{union_box, ImageRef, ImageSgPair, SceneGraph};
use crate::{Error, Result};

/// Walk a random directed path through `g`.
///
/// The walk starts at a uniformly drawn edge (`random_range(0..m)`), then
/// repeatedly draws one of the current head's outgoing edges uniformly
/// (`random_range(0..out_degree)`, candidates in edge-list order). It stops at
/// a sink, or before stepping onto a node already visited.
pub fn extract_subgraph_random_walk<R: Rng + ?Sized>(g: &SceneGraph, rng: &mut R) -> Result<SceneGraph> {
    if g.edges.is_empty() {
        return Err(Error::Invalid(format!("graph {} has no edges to walk", g.image_id)));
    }
    let start = rng.random_range(0..g.edges.len());
    let first = &g.edges[start];
    let mut visited = vec![first.subject_id, first.object_id];
    let mut taken = vec![start];
    let mut head = first.object_id;
    loop {
        let outgoing: Vec<usize> =
            g.edges.iter().enumerate().filter(|(_, e)| e.subject_id == head).map(|(i, _)| i).collect();
        if outgoing.is_empty() {
            break;
        }
        let next = outgoing[rng.random_range(0..outgoing.len())];
        let target = g.edges[next].object_id;
        if visited.contains(&target) {
            break;
        }
        visited.push(target);
        taken.push(next);
        head = target;
    }
    let mut out = SceneGraph::new(g.image_id.clone());
    for id in &visited {
        if let Some(n) = g.node(*id) {
            out.nodes.push(n.clone());
        }
    }
    out.edges = taken.iter().map(|&i| g.edges[i].clone()).collect();
    Ok(out)
}

/// Crop the image to the union of `g1`'s boxes and densify from the residual graph.
///
/// Residual nodes are re-added when their box lies fully inside the crop.
/// Residual edges between present nodes are re-added only while every
/// component stays a directed simple path.
pub fn crop_and_densify(pair: &ImageSgPair, g1: &SceneGraph) -> Result<ImageSgPair> {
    let image = pair.image.load()?;
    if g1.nodes.is_empty() {
        return Ok(ImageSgPair { image: ImageRef::Inline(image), graph: g1.clone() });
    }
    let boxes: Vec<_> = g1.nodes.iter().map(|n| n.bbox).collect();
    let region = union_box(&boxes)?;
    let (cropped, frame) = image.crop(&region);

    let mut out = SceneGraph::new(g1.image_id.clone());
    let present: HashSet<i64> = g1.nodes.iter().map(|n| n.id).collect();
    for n in &g1.nodes {
        let mut n = n.clone();
        n.bbox = n.bbox.reframe(&frame);
        out.nodes.push(n);
    }
    for n in &pair.graph.nodes {
        if !present.contains(&n.id) && frame.contains(&n.bbox) {
            let mut n = n.clone();
            n.bbox = n.bbox.reframe(&frame);
            out.nodes.push(n);
        }
    }
    out.edges = g1.edges.clone();
    let taken: HashSet<_> = g1.edges.iter().collect();
    for e in &pair.graph.edges {
        if taken.contains(e) || out.node(e.subject_id).is_none() || out.node(e.object_id).is_none() {
            continue;
        }
        if keeps_paths(&out, e.subject_id, e.object_id) {
            out.edges.push(e.clone());
        }
    }
    Ok(ImageSgPair { image: ImageRef::Inline(cropped), graph: out })
}

fn keeps_paths(g: &SceneGraph, subject: i64, object: i64) -> bool {
    if g.out_degree(subject) > 0 || g.in_degree(object) > 0 {
        return false;
    }
    // Walking forward from `object` must not reach `subject`.
    let mut cur = object;
    loop {
        if cur == subject {
            return false;
        }
        match g.edges.iter().find(|e| e.subject_id == cur) {
            Some(e) => cur = e.object_id,
            None => return true,
        }
    }
}

/// Size filter applied to both node and edge counts.
pub fn accept_subgraph(g1: &SceneGraph, cfg: &RuleConfig) -> bool {
    g1.nodes.len() <= cfg.max_objects && g1.edges.len() <= cfg.max_objects
}

/// Walk, crop, densify and filter one pair; `None` when the result is rejected.
pub fn preprocess_pair<R: Rng + ?Sized>(pair: &ImageSgPair, cfg: &RuleConfig, rng: &mut R) -> Result<Option<ImageSgPair>> {
    let g1 = extract_subgraph_random_walk(&pair.graph, rng)?;
    let dense = crop_and_densify(pair, &g1)?;
    Ok(accept_subgraph(&dense.graph, cfg).then_some(dense))
}
