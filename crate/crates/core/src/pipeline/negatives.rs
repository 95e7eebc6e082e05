//! Graph-based negative rules.
//!
//! Each rule enumerates its candidate sites first; when none exist the rule
//! is not applicable and no randomness is consumed. Otherwise one site is
//! drawn with `random_range(0..sites)`, followed (for the falsification
//! rules) by a uniform draw of the replacement value.

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::caption::{path_orders, render};
use super::RuleConfig;
use crate::scene::SceneGraph;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeRule {
    AsymmetricSwap,
    RelationFalsify,
    AttributeFalsify,
    AttributeSwap,
}

impl NegativeRule {
    pub const ALL: [NegativeRule; 4] = [
        NegativeRule::AsymmetricSwap,
        NegativeRule::RelationFalsify,
        NegativeRule::AttributeFalsify,
        NegativeRule::AttributeSwap,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            NegativeRule::AsymmetricSwap => "asymmetric_swap",
            NegativeRule::RelationFalsify => "relation_falsify",
            NegativeRule::AttributeFalsify => "attribute_falsify",
            NegativeRule::AttributeSwap => "attribute_swap",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl fmt::Display for NegativeRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Positive and negative caption derived from one graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub positive: String,
    pub negative: String,
    pub rule: NegativeRule,
}

fn triple_set(g: &SceneGraph) -> HashSet<(i64, &str, i64)> {
    g.edges.iter().map(|e| (e.subject_id, e.predicate.as_str(), e.object_id)).collect()
}

/// Apply one mutation of kind `rule`; `None` when no candidate site exists.
pub fn apply_negative_rule<R: Rng + ?Sized>(
    g: &SceneGraph,
    rule: NegativeRule,
    cfg: &RuleConfig,
    rng: &mut R,
) -> Option<SceneGraph> {
    match rule {
        NegativeRule::AsymmetricSwap => {
            let triples = triple_set(g);
            let sites: Vec<usize> = g
                .edges
                .iter()
                .enumerate()
                .filter(|(_, e)| {
                    cfg.asymmetric_predicates.contains(&e.predicate)
                        && !triples.contains(&(e.object_id, e.predicate.as_str(), e.subject_id))
                        && phrase_of(g, e.subject_id) != phrase_of(g, e.object_id)
                })
                .map(|(i, _)| i)
                .collect();
            if sites.is_empty() {
                return None;
            }
            let i = sites[rng.random_range(0..sites.len())];
            let mut out = g.clone();
            let e = &mut out.edges[i];
            std::mem::swap(&mut e.subject_id, &mut e.object_id);
            Some(out)
        }
        NegativeRule::RelationFalsify => {
            let triples = triple_set(g);
            let sites: Vec<(usize, Vec<&String>)> = g
                .edges
                .iter()
                .enumerate()
                .filter_map(|(i, e)| {
                    let reps: Vec<&String> = cfg
                        .predicate_replacements
                        .get(&e.predicate)?
                        .iter()
                        .filter(|p| !triples.contains(&(e.subject_id, p.as_str(), e.object_id)))
                        .collect();
                    (!reps.is_empty()).then_some((i, reps))
                })
                .collect();
            if sites.is_empty() {
                return None;
            }
            let (i, reps) = &sites[rng.random_range(0..sites.len())];
            let p = reps[rng.random_range(0..reps.len())].clone();
            let mut out = g.clone();
            out.edges[*i].predicate = p;
            Some(out)
        }
        NegativeRule::AttributeFalsify => {
            let mut sites: Vec<(usize, usize, Vec<&String>)> = Vec::new();
            for (ni, n) in g.nodes.iter().enumerate() {
                for (ai, a) in n.attributes.iter().enumerate() {
                    if let Some(pool) = cfg.attribute_pools.get(&a.tag) {
                        let alts: Vec<&String> = pool.iter().filter(|v| **v != a.value).collect();
                        if !alts.is_empty() {
                            sites.push((ni, ai, alts));
                        }
                    }
                }
            }
            if sites.is_empty() {
                return None;
            }
            let (ni, ai, alts) = &sites[rng.random_range(0..sites.len())];
            let v = alts[rng.random_range(0..alts.len())].clone();
            let mut out = g.clone();
            out.nodes[*ni].attributes[*ai].value = v;
            Some(out)
        }
        NegativeRule::AttributeSwap => {
            let mut sites = Vec::new();
            for (na, a) in g.nodes.iter().enumerate() {
                for (nb, b) in g.nodes.iter().enumerate().skip(na + 1) {
                    for (ia, x) in a.attributes.iter().enumerate() {
                        for (ib, y) in b.attributes.iter().enumerate() {
                            if x.tag == y.tag && x.value != y.value && a.phrase() != b.phrase() {
                                sites.push((na, ia, nb, ib));
                            }
                        }
                    }
                }
            }
            if sites.is_empty() {
                return None;
            }
            let (na, ia, nb, ib) = sites[rng.random_range(0..sites.len())];
            let mut out = g.clone();
            let va = out.nodes[na].attributes[ia].value.clone();
            let vb = std::mem::replace(&mut out.nodes[nb].attributes[ib].value, va);
            out.nodes[na].attributes[ia].value = vb;
            Some(out)
        }
    }
}

fn phrase_of(g: &SceneGraph, id: i64) -> Option<String> {
    g.node(id).map(|n| n.phrase())
}

/// Caption of `mutated`, emitted in the component order of `original`.
///
/// A swapped edge can break the path structure of its component, so the
/// negative keeps the positive's emission order edge for edge.
pub fn negative_caption(original: &SceneGraph, mutated: &SceneGraph) -> Result<String> {
    render(mutated, &path_orders(original)?)
}

/// Draw rules uniformly without replacement (one `shuffle` of
/// [`NegativeRule::ALL`]) until one yields a textually different negative.
pub fn sample_caption_pair<R: Rng + ?Sized>(g: &SceneGraph, cfg: &RuleConfig, rng: &mut R) -> Result<CaptionPair> {
    let orders = path_orders(g)?;
    let positive = render(g, &orders)?;
    let mut rules = NegativeRule::ALL;
    rules.shuffle(rng);
    for rule in rules {
        if let Some(neg) = apply_negative_rule(g, rule, cfg, rng) {
            let negative = render(&neg, &orders)?;
            if negative != positive {
                return Ok(CaptionPair { positive, negative, rule });
            }
        }
    }
    Err(Error::NoNegative(g.image_id.clone()))
}
