use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sgvl_core::synth::{SwapKind, WinogroundSample};
use sgvl_core::{ImageRef, ImageTextPair, NegativeRule, SceneGraph};

/// One image-caption line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextRecord {
    pub image: String,
    pub caption: String,
}

impl TextRecord {
    pub fn from_pair(p: &ImageTextPair) -> Self {
        TextRecord { image: p.image.to_inline(), caption: p.caption.clone() }
    }

    pub fn into_pair(self) -> Result<ImageTextPair> {
        let image = ImageRef::parse(&self.image)?.load()?;
        Ok(ImageTextPair::new(image, self.caption)?)
    }
}

/// One swap pair. Graphs are not carried; evaluation needs only pixels and words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WinoRecord {
    pub kind: SwapKind,
    pub image0: String,
    pub caption0: String,
    pub image1: String,
    pub caption1: String,
}

impl WinoRecord {
    pub fn from_sample(s: &WinogroundSample) -> Self {
        WinoRecord {
            kind: s.kind,
            image0: s.image0.to_inline(),
            caption0: s.caption0.clone(),
            image1: s.image1.to_inline(),
            caption1: s.caption1.clone(),
        }
    }

    pub fn into_sample(self) -> Result<WinogroundSample> {
        Ok(WinogroundSample {
            kind: self.kind,
            image0: ImageRef::parse(&self.image0)?.load()?,
            caption0: self.caption0,
            graph0: SceneGraph::new("image0"),
            image1: ImageRef::parse(&self.image1)?.load()?,
            caption1: self.caption1,
            graph1: SceneGraph::new("image1"),
        })
    }
}

/// One positive / negative caption line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub image_id: String,
    pub positive: String,
    pub negative: String,
    pub rule: NegativeRule,
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
        out.push(rec);
    }
    if out.is_empty() {
        bail!("{} holds no records", path.display());
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<usize> {
    let mut w = create(path)?;
    let mut n = 0;
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
        n += 1;
    }
    w.flush()?;
    Ok(n)
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}
