//! Newline-delimited JSON records of image / scene-graph pairs.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    validate_graph, AttrTag, Attribute, BBox, ImageRef, ImageSgPair, ObjectNode, RelationEdge,
    SceneGraph,
};

#[derive(Debug, thiserror::Error)]
pub enum ParseError {
    #[error("line {line} (record {record}): malformed JSON: {message}")]
    Json { line: usize, record: usize, message: String },
    #[error("line {line} (record {record}): invalid field `{field}`: {message}")]
    Invalid { line: usize, record: usize, field: String, message: String },
    #[error("read error: {0}")]
    Io(#[from] std::io::Error),
}

impl ParseError {
    pub fn record(&self) -> Option<usize> {
        match self {
            ParseError::Json { record, .. } | ParseError::Invalid { record, .. } => Some(*record),
            ParseError::Io(_) => None,
        }
    }

    pub fn field(&self) -> Option<&str> {
        match self {
            ParseError::Invalid { field, .. } => Some(field),
            _ => None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AttrRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tag: Option<String>,
    value: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeRecord {
    id: i64,
    category: String,
    #[serde(default)]
    attributes: Vec<AttrRecord>,
    #[serde(rename = "box")]
    bbox: BBox,
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeRecord {
    subject: i64,
    predicate: String,
    object: i64,
}

/// Wire form of one JSONL line.
#[derive(Debug, Serialize, Deserialize)]
pub struct SceneRecord {
    image_id: String,
    image: String,
    nodes: Vec<NodeRecord>,
    #[serde(default)]
    edges: Vec<EdgeRecord>,
}

impl SceneRecord {
    pub fn from_pair(pair: &ImageSgPair) -> Self {
        let g = &pair.graph;
        SceneRecord {
            image_id: g.image_id.clone(),
            image: pair.image.to_field(),
            nodes: g
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    id: n.id,
                    category: n.category.clone(),
                    attributes: n
                        .attributes
                        .iter()
                        .map(|a| AttrRecord { tag: Some(a.tag.as_str().into()), value: a.value.clone() })
                        .collect(),
                    bbox: n.bbox,
                })
                .collect(),
            edges: g
                .edges
                .iter()
                .map(|e| EdgeRecord {
                    subject: e.subject_id,
                    predicate: e.predicate.clone(),
                    object: e.object_id,
                })
                .collect(),
        }
    }

    fn into_pair(self) -> Result<ImageSgPair, (String, String)> {
        let image = ImageRef::parse(&self.image).map_err(|e| ("image".to_string(), e.to_string()))?;
        let mut g = SceneGraph::new(self.image_id);
        for n in self.nodes {
            let mut attributes = Vec::with_capacity(n.attributes.len());
            for a in n.attributes {
                let tag = match a.tag.as_deref() {
                    None => {
                        log::warn!("node {}: untagged attribute {:?} admitted as state", n.id, a.value);
                        AttrTag::State
                    }
                    Some(t) => AttrTag::parse(t).ok_or_else(|| {
                        ("attributes.tag".to_string(), format!("unknown attribute tag {t:?}"))
                    })?,
                };
                attributes.push(Attribute { tag, value: a.value });
            }
            g.nodes.push(ObjectNode { id: n.id, category: n.category, attributes, bbox: n.bbox });
        }
        for e in self.edges {
            g.edges.push(RelationEdge { subject_id: e.subject, predicate: e.predicate, object_id: e.object });
        }
        let violations = validate_graph(&g);
        if let Some(v) = violations.first() {
            return Err((v.field().to_string(), v.to_string()));
        }
        Ok(ImageSgPair { image, graph: g })
    }
}

/// Parse a JSONL stream into validated pairs, preserving order. Blank lines
/// are skipped; line and record numbers in errors are 1-based.
pub fn parse_scene_graph_stream<R: BufRead>(reader: R) -> Result<Vec<ImageSgPair>, ParseError> {
    let mut out = Vec::new();
    let mut record = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        record += 1;
        let rec: SceneRecord = serde_json::from_str(&line).map_err(|e| ParseError::Json {
            line: i + 1,
            record,
            message: e.to_string(),
        })?;
        let pair = rec.into_pair().map_err(|(field, message)| ParseError::Invalid {
            line: i + 1,
            record,
            field,
            message,
        })?;
        out.push(pair);
    }
    Ok(out)
}

pub fn read_scene_graph_file(path: &Path) -> Result<Vec<ImageSgPair>, ParseError> {
    let f = std::fs::File::open(path)?;
    parse_scene_graph_stream(std::io::BufReader::new(f))
}

/// Serialize pairs one record per line. Output is byte-stable for a given input.
pub fn write_scene_graph_stream<W: Write>(mut w: W, pairs: &[ImageSgPair]) -> std::io::Result<()> {
    for p in pairs {
        let rec = SceneRecord::from_pair(p);
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
