//! Scene-graph to caption grammar.
//!
//! Each weakly connected component is a directed path; its edges are emitted
//! in path order as "<subject phrase> <predicate> <object phrase>" joined by
//! single spaces. Isolated nodes emit their phrase alone. Components are
//! joined by ". " and the caption ends with a period.

use crate::scene::{connected_components, SceneGraph};
use crate::{Error, Result};

/// Edge indices (into `g.edges`) of each component in path order, plus the
/// node id of any isolated component.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum ComponentOrder {
    Isolated(i64),
    Path(Vec<usize>),
}

pub(crate) fn path_orders(g: &SceneGraph) -> Result<Vec<ComponentOrder>> {
    let mut out = Vec::new();
    for comp in connected_components(g) {
        if comp.edges.is_empty() {
            out.push(ComponentOrder::Isolated(comp.nodes[0].id));
            continue;
        }
        let not_path = || Error::Invalid(format!("component of graph {} is not a directed path", g.image_id));
        if comp.edges.len() + 1 != comp.nodes.len() {
            return Err(not_path());
        }
        let mut starts = comp.nodes.iter().filter(|n| comp.in_degree(n.id) == 0);
        let start = starts.next().ok_or_else(not_path)?;
        if starts.next().is_some() || comp.nodes.iter().any(|n| comp.out_degree(n.id) > 1) {
            return Err(not_path());
        }
        let mut order = Vec::with_capacity(comp.edges.len());
        let mut cur = start.id;
        while let Some(e) = comp.edges.iter().find(|e| e.subject_id == cur) {
            let idx = g.edges.iter().position(|x| x == e).expect("component edge comes from g");
            order.push(idx);
            cur = e.object_id;
        }
        if order.len() != comp.edges.len() {
            return Err(not_path());
        }
        out.push(ComponentOrder::Path(order));
    }
    Ok(out)
}

/// Render `g` following component orders computed on a graph with the same
/// node ids and edge positions.
pub(crate) fn render(g: &SceneGraph, orders: &[ComponentOrder]) -> Result<String> {
    let phrase = |id: i64| {
        g.node(id)
            .map(|n| n.phrase())
            .ok_or_else(|| Error::Invalid(format!("caption references missing node {id}")))
    };
    let mut parts = Vec::with_capacity(orders.len());
    for c in orders {
        match c {
            ComponentOrder::Isolated(id) => parts.push(phrase(*id)?),
            ComponentOrder::Path(edges) => {
                let mut txt = Vec::with_capacity(edges.len());
                for &i in edges {
                    let e = &g.edges[i];
                    txt.push(format!("{} {} {}", phrase(e.subject_id)?, e.predicate, phrase(e.object_id)?));
                }
                parts.push(txt.join(" "));
            }
        }
    }
    let mut s = parts.join(". ");
    s.push('.');
    Ok(s)
}

/// Caption for a graph whose components are directed paths.
pub fn graph_to_caption(g: &SceneGraph) -> Result<String> {
    if g.nodes.is_empty() {
        return Err(Error::Invalid(format!("graph {} has no nodes to caption", g.image_id)));
    }
    render(g, &path_orders(g)?)
}

/// Plain "bag of objects" caption used for ordinary image-text pairs:
/// node phrases joined by " and ".
pub fn objects_caption(g: &SceneGraph, order: &[usize]) -> String {
    let mut s = order.iter().map(|&i| g.nodes[i].phrase()).collect::<Vec<_>>().join(" and ");
    s.push('.');
    s
}
