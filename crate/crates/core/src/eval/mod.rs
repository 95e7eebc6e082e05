//! Winoground-style scores, scene-graph detection mAP and plain retrieval.

mod map;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::SgvlModel;
use crate::scene::{ImageTextPair, RgbImage};
use crate::synth::WinogroundSample;
use crate::tensor::Tape;
use crate::{Error, Result};

pub use map::{average_precision, eval_sg_map, mean_ap, Detection, GroundTruth, MapReport};

/// Images or texts encoded per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

/// Anything that maps images and captions into one unit-norm space.
pub trait DualEncoder {
    fn embed_images(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f64>>>;
    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>>;
}

impl DualEncoder for SgvlModel {
    fn embed_images(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_CHUNK) {
            let tape = Tape::no_grad();
            let cls = self.encode_images(&tape, chunk, self.has_sg_tokens())?.cls.value();
            out.extend((0..cls.rows()).map(|r| cls.row(r).to_vec()));
        }
        Ok(out)
    }

    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(EVAL_CHUNK) {
            let tape = Tape::no_grad();
            let e = self.encode_texts(&tape, chunk)?.value();
            out.extend((0..e.rows()).map(|r| e.row(r).to_vec()));
        }
        Ok(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub text_score: f64,
    pub image_score: f64,
    pub group_score: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub text_score: f64,
    pub image_score: f64,
    pub group_score: f64,
    pub n: usize,
    pub per_category: BTreeMap<String, Scores>,
}

#[derive(Default)]
struct Tally {
    text: usize,
    image: usize,
    group: usize,
    n: usize,
}

impl Tally {
    fn add(&mut self, text: bool, image: bool) {
        self.text += text as usize;
        self.image += image as usize;
        self.group += (text && image) as usize;
        self.n += 1;
    }

    fn scores(&self) -> Scores {
        let n = self.n.max(1) as f64;
        Scores { text_score: self.text as f64 / n, image_score: self.image as f64 / n, group_score: self.group as f64 / n, n: self.n }
    }
}

/// The three binary outcomes of one sample from its four similarities
/// `s[i][c]` between image `i` and caption `c`. Ties count as errors.
pub fn sample_outcome(s: [[f64; 2]; 2]) -> (bool, bool) {
    let text = s[0][0] > s[0][1] && s[1][1] > s[1][0];
    let image = s[0][0] > s[1][0] && s[1][1] > s[0][1];
    (text, image)
}

pub fn eval_winoground(model: &impl DualEncoder, samples: &[WinogroundSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Invalid("no samples to evaluate".into()));
    }
    let images: Vec<&RgbImage> = samples.iter().flat_map(|s| [&s.image0, &s.image1]).collect();
    let texts: Vec<&str> = samples.iter().flat_map(|s| [s.caption0.as_str(), s.caption1.as_str()]).collect();
    let ie = model.embed_images(&images)?;
    let te = model.embed_texts(&texts)?;
    let mut all = Tally::default();
    let mut per: BTreeMap<String, Tally> = BTreeMap::new();
    for (k, s) in samples.iter().enumerate() {
        let (i0, i1, c0, c1) = (&ie[2 * k], &ie[2 * k + 1], &te[2 * k], &te[2 * k + 1]);
        let (text, image) = sample_outcome([[dot(i0, c0), dot(i0, c1)], [dot(i1, c0), dot(i1, c1)]]);
        all.add(text, image);
        per.entry(s.kind.as_str().to_string()).or_default().add(text, image);
    }
    let s = all.scores();
    Ok(EvalReport {
        text_score: s.text_score,
        image_score: s.image_score,
        group_score: s.group_score,
        n: s.n,
        per_category: per.into_iter().map(|(k, t)| (k, t.scores())).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub image_to_text: f64,
    pub text_to_image: f64,
    pub mean: f64,
    pub n: usize,
    /// Candidates per query.
    pub pool: usize,
}

/// Top-1 retrieval inside consecutive pools of `pool` pairs. A retrieved
/// item counts as correct when its caption equals the query's caption.
pub fn retrieval_accuracy(model: &impl DualEncoder, pairs: &[ImageTextPair], pool: usize) -> Result<RetrievalReport> {
    if pairs.is_empty() || pool == 0 {
        return Err(Error::Invalid("retrieval needs at least one pair and a positive pool size".into()));
    }
    let images: Vec<&RgbImage> = pairs.iter().map(|p| &p.image).collect();
    let texts: Vec<&str> = pairs.iter().map(|p| p.caption.as_str()).collect();
    let ie = model.embed_images(&images)?;
    let te = model.embed_texts(&texts)?;
    let argmax = |scores: &mut dyn Iterator<Item = f64>| {
        scores.enumerate().fold((0, f64::NEG_INFINITY), |best, (i, s)| if s > best.1 { (i, s) } else { best }).0
    };
    let (mut i2t, mut t2i) = (0usize, 0usize);
    for start in (0..pairs.len()).step_by(pool) {
        let end = (start + pool).min(pairs.len());
        for q in start..end {
            let t = start + argmax(&mut (start..end).map(|c| dot(&ie[q], &te[c])));
            i2t += (texts[t] == texts[q]) as usize;
            let i = start + argmax(&mut (start..end).map(|c| dot(&te[q], &ie[c])));
            t2i += (texts[i] == texts[q]) as usize;
        }
    }
    let n = pairs.len() as f64;
    let (a, b) = (i2t as f64 / n, t2i as f64 / n);
    Ok(RetrievalReport { image_to_text: a, text_to_image: b, mean: 0.5 * (a + b), n: pairs.len(), pool })
}
