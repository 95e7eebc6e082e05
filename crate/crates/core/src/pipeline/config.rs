use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::scene::AttrTag;
use crate::Error;

fn default_max_objects() -> usize {
    10
}

/// Rule pools for graph-based negatives plus the subgraph size cap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleConfig {
    #[serde(default)]
    pub asymmetric_predicates: BTreeSet<String>,
    #[serde(default)]
    pub predicate_replacements: BTreeMap<String, BTreeSet<String>>,
    #[serde(default)]
    pub attribute_pools: BTreeMap<AttrTag, BTreeSet<String>>,
    #[serde(default = "default_max_objects")]
    pub max_objects: usize,
}

impl Default for RuleConfig {
    fn default() -> Self {
        RuleConfig {
            asymmetric_predicates: BTreeSet::new(),
            predicate_replacements: BTreeMap::new(),
            attribute_pools: BTreeMap::new(),
            max_objects: default_max_objects(),
        }
    }
}

impl RuleConfig {
    pub fn validate(&self) -> Result<(), Error> {
        for (p, reps) in &self.predicate_replacements {
            if reps.contains(p) {
                return Err(Error::Config {
                    key: format!("predicate_replacements.{p}"),
                    message: "replacement set contains its own key".into(),
                });
            }
        }
        for (tag, pool) in &self.attribute_pools {
            if pool.len() < 2 {
                return Err(Error::Config {
                    key: format!("attribute_pools.{tag}"),
                    message: "pool needs at least two values".into(),
                });
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, Error> {
        let cfg: RuleConfig = crate::model::parse_config(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Rules matching the spatial vocabulary of the synthetic generator.
    pub fn spatial(colors: &[&str], sizes: &[&str]) -> Self {
        let preds = ["left of", "right of", "above", "below"];
        let opposite = |p: &str| match p {
            "left of" => "right of",
            "right of" => "left of",
            "above" => "below",
            _ => "above",
        };
        let mut cfg = RuleConfig {
            asymmetric_predicates: preds.iter().map(|s| s.to_string()).collect(),
            ..RuleConfig::default()
        };
        for p in preds {
            cfg.predicate_replacements
                .insert(p.to_string(), [opposite(p).to_string()].into_iter().collect());
        }
        if colors.len() >= 2 {
            cfg.attribute_pools.insert(AttrTag::Color, colors.iter().map(|s| s.to_string()).collect());
        }
        if sizes.len() >= 2 {
            cfg.attribute_pools.insert(AttrTag::Size, sizes.iter().map(|s| s.to_string()).collect());
        }
        cfg
    }
}
