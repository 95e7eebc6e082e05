//! Flat-colour shape scenes with exact scene graphs, and swapped
//! image/caption pairs for Winoground-style evaluation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::pipeline::{graph_to_caption, objects_caption, RuleConfig};
use crate::scene::{AttrTag, BBox, ImageRef, ImageSgPair, ImageTextPair, ObjectNode, RelationEdge, RgbImage, SceneGraph};
use crate::{Error, Result};

pub const PREDICATES: [&str; 4] = ["left of", "right of", "above", "below"];

/// Layout grid: scenes place at most one shape per cell.
const GRID: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub shapes: Vec<String>,
    pub colors: Vec<String>,
    pub sizes: Vec<String>,
    pub predicates: Vec<String>,
    pub asymmetric_predicates: Vec<String>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub image_size: usize,
    /// Mean grey level of the background.
    pub background_level: u8,
    /// Background pixels are uniform within `background_noise / 2` of the
    /// level, independently per pixel and channel.
    pub background_noise: u8,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        SyntheticConfig {
            shapes: own(&["circle", "square", "triangle", "diamond"]),
            colors: own(&["red", "green", "blue", "yellow"]),
            sizes: own(&["small", "large"]),
            predicates: own(&PREDICATES),
            asymmetric_predicates: own(&PREDICATES),
            min_objects: 2,
            max_objects: 5,
            image_size: 32,
            background_level: 128,
            background_noise: 128,
            seed: 0,
        }
    }
}

fn color_rgb(name: &str) -> [u8; 3] {
    match name {
        "red" => [220, 40, 40],
        "green" => [40, 190, 60],
        "blue" => [50, 90, 230],
        "yellow" => [230, 210, 40],
        "white" => [235, 235, 235],
        "purple" => [150, 60, 200],
        "orange" => [240, 140, 30],
        "cyan" => [40, 210, 220],
        // Unknown names still render deterministically.
        other => {
            let h = other.bytes().fold(2166136261u32, |h, b| (h ^ b as u32).wrapping_mul(16777619));
            [(h >> 16) as u8 | 64, (h >> 8) as u8 | 64, h as u8 | 64]
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Err(Error::Config { key: key.into(), message: message.into() });
        if self.shapes.len() < 2 {
            return bad("shapes", "need at least two shapes");
        }
        if self.colors.len() < 2 {
            return bad("colors", "need at least two colours");
        }
        if self.sizes.is_empty() || self.sizes.len() > 2 {
            return bad("sizes", "one or two sizes (small, large) are supported");
        }
        if let Some(p) = self.predicates.iter().find(|p| !PREDICATES.contains(&p.as_str())) {
            return bad("predicates", &format!("unsupported predicate {p:?}; the generator only knows spatial ones"));
        }
        if self.min_objects < 2 || self.min_objects > self.max_objects {
            return bad("min_objects", "need 2 <= min_objects <= max_objects");
        }
        if self.max_objects > GRID * GRID {
            return bad("max_objects", &format!("at most {} shapes fit the layout grid", GRID * GRID));
        }
        if self.image_size < 3 * GRID * 2 {
            return bad("image_size", "image is too small for the layout grid");
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: SyntheticConfig = crate::model::parse_config(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Every phrase the generator can emit, for building a tokenizer.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut v: Vec<String> = Vec::new();
        v.extend(self.shapes.iter().cloned());
        v.extend(self.colors.iter().cloned());
        v.extend(self.sizes.iter().cloned());
        v.extend(self.predicates.iter().cloned());
        v.push("and .".into());
        v
    }

    /// Negative-rule config matching this vocabulary.
    pub fn rule_config(&self) -> RuleConfig {
        let colors: Vec<&str> = self.colors.iter().map(String::as_str).collect();
        let sizes: Vec<&str> = self.sizes.iter().map(String::as_str).collect();
        let mut cfg = RuleConfig::spatial(&colors, &sizes);
        cfg.asymmetric_predicates = self.asymmetric_predicates.iter().cloned().collect();
        cfg
    }

    fn side(&self, size: &str) -> usize {
        let big = self.sizes.len() == 2 && size == self.sizes[1];
        let s = self.image_size as f64 * if big { 0.3125 } else { 0.1875 };
        (s.round() as usize).max(2)
    }

    fn cell(&self) -> f64 {
        self.image_size as f64 / GRID as f64
    }
}

/// One shape before rendering: grid cell plus where inside the cell it sits.
#[derive(Debug, Clone, PartialEq)]
struct Placed {
    shape: String,
    color: String,
    size: String,
    cell: (usize, usize),
    jitter: (f64, f64),
}

fn paint(img: &mut RgbImage, cfg: &SyntheticConfig, p: &Placed) -> BBox {
    let side = cfg.side(&p.size);
    let cell = cfg.cell();
    let slack = (cell - side as f64).max(0.0);
    let x0 = (p.cell.0 as f64 * cell + p.jitter.0 * slack).floor() as usize;
    let y0 = (p.cell.1 as f64 * cell + p.jitter.1 * slack).floor() as usize;
    let x0 = x0.min(cfg.image_size - side);
    let y0 = y0.min(cfg.image_size - side);
    let rgb = color_rgb(&p.color);
    let half = side as f64 / 2.0;
    let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..side {
        for x in 0..side {
            let (u, v) = (x as f64 + 0.5 - half, y as f64 + 0.5 - half);
            let inside = match p.shape.as_str() {
                "circle" => u * u + v * v <= half * half,
                "triangle" => u.abs() <= (y as f64 + 1.0) / 2.0,
                "diamond" => u.abs() + v.abs() <= half,
                _ => true,
            };
            if inside {
                img.put(x0 + x, y0 + y, rgb);
                lo_x = lo_x.min(x0 + x);
                lo_y = lo_y.min(y0 + y);
                hi_x = hi_x.max(x0 + x + 1);
                hi_y = hi_y.max(y0 + y + 1);
            }
        }
    }
    let s = cfg.image_size as f64;
    BBox::new(lo_x as f64 / s, lo_y as f64 / s, hi_x as f64 / s, hi_y as f64 / s)
}

/// The predicate that holds for `a` relative to `b` along the axis with the
/// larger center offset.
pub fn spatial_predicate(a: &BBox, b: &BBox) -> &'static str {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    let (dx, dy) = (bx - ax, by - ay);
    if dx.abs() >= dy.abs() {
        if dx > 0.0 {
            "left of"
        } else {
            "right of"
        }
    } else if dy > 0.0 {
        "above"
    } else {
        "below"
    }
}

/// Checks a predicate against box centers.
pub fn predicate_holds(predicate: &str, a: &BBox, b: &BBox) -> bool {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    match predicate {
        "left of" => ax < bx,
        "right of" => ax > bx,
        "above" => ay < by,
        "below" => ay > by,
        _ => false,
    }
}

fn render<R: Rng + ?Sized>(
    cfg: &SyntheticConfig,
    rng: &mut R,
    image_id: &str,
    placed: &[Placed],
    edges: &[(usize, usize)],
) -> (RgbImage, SceneGraph) {
    let mut img = RgbImage::new(cfg.image_size, cfg.image_size);
    let lo = cfg.background_level.saturating_sub(cfg.background_noise / 2);
    let hi = cfg.background_level.saturating_add(cfg.background_noise / 2);
    for y in 0..cfg.image_size {
        for x in 0..cfg.image_size {
            let mut px = [0u8; 3];
            for c in &mut px {
                *c = rng.random_range(lo..=hi);
            }
            img.put(x, y, px);
        }
    }
    let mut g = SceneGraph::new(image_id);
    for (i, p) in placed.iter().enumerate() {
        let b = paint(&mut img, cfg, p);
        let mut n = ObjectNode::new(i as i64, p.shape.clone(), b);
        if cfg.sizes.len() > 1 {
            n = n.with_attr(AttrTag::Size, p.size.clone());
        }
        g.nodes.push(n.with_attr(AttrTag::Color, p.color.clone()));
    }
    for &(s, o) in edges {
        let pred = spatial_predicate(&g.nodes[s].bbox, &g.nodes[o].bbox);
        g.edges.push(RelationEdge::new(s as i64, pred, o as i64));
    }
    (img, g)
}

fn pick<'a, R: Rng + ?Sized>(rng: &mut R, v: &'a [String]) -> &'a String {
    &v[rng.random_range(0..v.len())]
}

fn random_object<R: Rng + ?Sized>(cfg: &SyntheticConfig, rng: &mut R, cell: (usize, usize)) -> Placed {
    Placed {
        shape: pick(rng, &cfg.shapes).clone(),
        color: pick(rng, &cfg.colors).clone(),
        size: pick(rng, &cfg.sizes).clone(),
        cell,
        jitter: (rng.random::<f64>(), rng.random::<f64>()),
    }
}

/// Renders 2 to `max_objects` shapes in distinct grid cells and returns the
/// exact graph: one edge per shape pair (lower index as subject) carrying the
/// spatial predicate that holds between their boxes.
pub fn gen_synthetic_scene<R: Rng + ?Sized>(cfg: &SyntheticConfig, rng: &mut R, image_id: &str) -> ImageSgPair {
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut cells: Vec<(usize, usize)> = (0..GRID * GRID).map(|c| (c % GRID, c / GRID)).collect();
    cells.shuffle(rng);
    let placed: Vec<Placed> = cells[..n].iter().map(|&c| random_object(cfg, rng, c)).collect();
    let edges: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let (img, graph) = render(cfg, rng, image_id, &placed, &edges);
    ImageSgPair { image: ImageRef::Inline(img), graph }
}

/// A scene image with a plain caption listing its objects in random order.
pub fn gen_image_text_pair<R: Rng + ?Sized>(cfg: &SyntheticConfig, rng: &mut R) -> ImageTextPair {
    let pair = gen_synthetic_scene(cfg, rng, "it");
    let mut order: Vec<usize> = (0..pair.graph.nodes.len()).collect();
    order.shuffle(rng);
    let caption = objects_caption(&pair.graph, &order);
    match pair.image {
        ImageRef::Inline(image) => ImageTextPair { image, caption },
        ImageRef::File(_) => unreachable!("generator renders inline images"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapKind {
    Relation,
    Attribute,
}

impl SwapKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SwapKind::Relation => "relation",
            SwapKind::Attribute => "attribute",
        }
    }
}

/// Two image-caption pairs with the same words where `caption0` describes
/// `image0` but not `image1`, and vice versa.
#[derive(Debug, Clone, PartialEq)]
pub struct WinogroundSample {
    pub kind: SwapKind,
    pub image0: RgbImage,
    pub caption0: String,
    pub graph0: SceneGraph,
    pub image1: RgbImage,
    pub caption1: String,
    pub graph1: SceneGraph,
}

/// Two shapes in cells aligned along the axis of a random predicate.
fn aligned_pair<R: Rng + ?Sized>(cfg: &SyntheticConfig, rng: &mut R) -> (Placed, Placed) {
    let pred = pick(rng, &cfg.predicates).as_str();
    let line = rng.random_range(0..GRID);
    let mut ends = [rng.random_range(0..GRID), 0];
    ends[1] = (ends[0] + rng.random_range(1..GRID)) % GRID;
    ends.sort_unstable();
    // (first, second) along the axis; "left of"/"above" put the subject first.
    let (sa, sb) = match pred {
        "left of" | "above" => (ends[0], ends[1]),
        _ => (ends[1], ends[0]),
    };
    let cell = |k: usize| if matches!(pred, "left of" | "right of") { (k, line) } else { (line, k) };
    (random_object(cfg, rng, cell(sa)), random_object(cfg, rng, cell(sb)))
}

fn phrase(p: &Placed) -> (String, String, String) {
    (p.size.clone(), p.color.clone(), p.shape.clone())
}

/// Alternates relation swaps (the two shapes trade places; captions trade
/// subject and object) and attribute swaps (the two shapes trade colours).
pub fn gen_winoground_set<R: Rng + ?Sized>(cfg: &SyntheticConfig, rng: &mut R, count: usize) -> Result<Vec<WinogroundSample>> {
    if count == 0 {
        return Err(Error::Invalid("winoground set needs count >= 1".into()));
    }
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let kind = if k % 2 == 0 { SwapKind::Relation } else { SwapKind::Attribute };
        let (a, b) = loop {
            let (a, b) = aligned_pair(cfg, rng);
            let ok = match kind {
                SwapKind::Relation => phrase(&a) != phrase(&b),
                SwapKind::Attribute => a.color != b.color && (a.shape != b.shape || a.size != b.size),
            };
            if ok {
                break (a, b);
            }
        };
        let id = format!("wino{k}");
        let (image0, graph0) = render(cfg, rng, &format!("{id}a"), &[a.clone(), b.clone()], &[(0, 1)]);
        let (image1, graph1) = match kind {
            SwapKind::Relation => {
                let (mut a1, mut b1) = (a.clone(), b.clone());
                std::mem::swap(&mut a1.cell, &mut b1.cell);
                render(cfg, rng, &format!("{id}b"), &[a1, b1], &[(1, 0)])
            }
            SwapKind::Attribute => {
                let (mut a1, mut b1) = (a.clone(), b.clone());
                std::mem::swap(&mut a1.color, &mut b1.color);
                render(cfg, rng, &format!("{id}b"), &[a1, b1], &[(0, 1)])
            }
        };
        let caption0 = graph_to_caption(&graph0)?;
        let caption1 = graph_to_caption(&graph1)?;
        out.push(WinogroundSample { kind, image0, caption0, graph0, image1, caption1, graph1 });
    }
    Ok(out)
}
