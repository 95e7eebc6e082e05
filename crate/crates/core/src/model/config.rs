use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dimensions of both encoders and the scene-graph token bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_size: usize,
    pub n_obj_tokens: usize,
    pub n_rel_tokens: usize,
    pub r_p: usize,
    pub r_sg: usize,
    /// Tokenizer file; when absent the vocabulary of the synthetic world is
    /// used.
    #[serde(default)]
    pub vocab_path: Option<String>,
    pub max_length: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub init: InitGains,
}

/// Standard deviations of the random initialisation, as multiples of
/// `1/sqrt(fan_in)` unless noted otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitGains {
    /// Query and key projections.
    pub attn: f64,
    /// Extra factor on the attention output and MLP output projections,
    /// on top of `1/sqrt(2 * layers)`.
    pub residual: f64,
    /// First MLP layer.
    pub mlp: f64,
    /// Patch embedding.
    pub patch: f64,
    /// Absolute standard deviation of token, position and CLS embeddings.
    pub embed: f64,
    /// Starting attention-logit offset of scene-graph keys.
    pub sg_key_bias: f64,
}

impl Default for InitGains {
    fn default() -> Self {
        InitGains { attn: 1.0, residual: 1.0, mlp: 1.0, patch: 1.0, embed: 1.0, sg_key_bias: -4.0 }
    }
}

fn default_mlp_ratio() -> usize {
    4
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            layers: 4,
            heads: 4,
            patch: 8,
            image_size: 32,
            n_obj_tokens: 12,
            n_rel_tokens: 12,
            r_p: 4,
            r_sg: 8,
            vocab_path: None,
            max_length: 32,
            mlp_ratio: 4,
            init: InitGains::default(),
        }
    }
}

fn bad(key: &str, message: impl Into<String>) -> Error {
    Error::Config { key: key.to_string(), message: message.into() }
}

impl ModelConfig {
    /// Smallest useful configuration, sized for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            d: 8,
            layers: 1,
            heads: 2,
            patch: 4,
            image_size: 8,
            n_obj_tokens: 3,
            n_rel_tokens: 2,
            r_p: 2,
            r_sg: 2,
            vocab_path: None,
            max_length: 12,
            mlp_ratio: 2,
            init: InitGains { attn: 1.0, residual: 1.0, mlp: 1.0, patch: 1.0, embed: 1.0, sg_key_bias: -1.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("layers", self.layers),
            ("heads", self.heads),
            ("patch", self.patch),
            ("image_size", self.image_size),
            ("n_obj_tokens", self.n_obj_tokens),
            ("n_rel_tokens", self.n_rel_tokens),
            ("r_p", self.r_p),
            ("r_sg", self.r_sg),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(bad(k, "must be positive"));
            }
        }
        if self.d % self.heads != 0 {
            return Err(bad("heads", format!("{} does not divide d = {}", self.heads, self.d)));
        }
        if self.image_size % self.patch != 0 {
            return Err(bad("image_size", format!("must be a multiple of patch = {}", self.patch)));
        }
        let g = &self.init;
        for (k, v) in [("init.attn", g.attn), ("init.residual", g.residual), ("init.mlp", g.mlp), ("init.patch", g.patch), ("init.embed", g.embed)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad(k, "must be a positive finite number"));
            }
        }
        if !g.sg_key_bias.is_finite() {
            return Err(bad("init.sg_key_bias", "must be finite"));
        }
        if self.max_length < 2 {
            return Err(bad("max_length", "must leave room for CLS and one word"));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: ModelConfig = parse_config(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn named_field(msg: &str) -> Option<&str> {
    ["unknown field `", "missing field `", "duplicate field `"].into_iter().find_map(|marker| {
        let i = msg.find(marker)?;
        msg[i + marker.len()..].split('`').next()
    })
}

/// Deserializes a JSON config; errors carry the dotted path of the offending key.
pub(crate) fn parse_config<T: DeserializeOwned>(s: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(s);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let message = e.inner().to_string();
        let key = match (path.as_str(), named_field(&message)) {
            (".", None) => "<document>".to_string(),
            (".", Some(k)) => k.to_string(),
            (p, None) => p.to_string(),
            (p, Some(k)) if p == k || p.ends_with(&format!(".{k}")) => p.to_string(),
            (p, Some(k)) => format!("{p}.{k}"),
        };
        Error::Config { key, message }
    })?;
    de.end().map_err(|e| Error::Config { key: "<document>".into(), message: e.to_string() })?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::default().n_patches(), 16);
    }

    #[test]
    fn errors_name_the_key() {
        let mut c = ModelConfig::default();
        c.heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "heads"));
        let json = serde_json::to_string(&ModelConfig::default()).unwrap().replace("\"d\":64", "\"dim\":64");
        match ModelConfig::from_json(&json) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "dim"),
            other => panic!("{other:?}"),
        }
        match ModelConfig::from_json(r#"{"layers": "four"}"#) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "layers"),
            other => panic!("{other:?}"),
        }
        match ModelConfig::from_json(r#"{"init": {"attn": 1.0, "gain": 2.0}}"#) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "init.gain"),
            other => panic!("{other:?}"),
        }
        assert!(ModelConfig::from_json(r#"{"layers": 2} trailing"#).is_err());
    }
}
