use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::EVAL_CHUNK;
use crate::matching::class_probs_rows;
use crate::model::{LabelKind, SgvlModel};
use crate::scene::{BBox, ImageSgPair, RgbImage};
use crate::tensor::Tape;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub class: String,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image: usize,
    pub class: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    pub iou_threshold: f64,
    pub per_class: BTreeMap<String, f64>,
}

/// All-point interpolated AP of one class. Detections are visited by
/// decreasing score and each claims the unclaimed ground-truth box of the
/// same image with the highest IoU, if that IoU reaches `iou_threshold`.
pub fn average_precision(dets: &[&Detection], gts: &[&GroundTruth], iou_threshold: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut claimed = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(order.len());
    for (k, &d) in order.iter().enumerate() {
        let det = dets[d];
        let best = gts
            .iter()
            .enumerate()
            .filter(|(g, gt)| !claimed[*g] && gt.image == det.image)
            .map(|(g, gt)| (g, gt.bbox.iou(&det.bbox)))
            .fold(None, |acc: Option<(usize, f64)>, (g, iou)| match acc {
                Some((_, b)) if b >= iou => acc,
                _ => Some((g, iou)),
            });
        if let Some((g, iou)) = best {
            if iou >= iou_threshold {
                claimed[g] = true;
                tp += 1;
            }
        }
        curve.push((tp as f64 / gts.len() as f64, tp as f64 / (k + 1) as f64));
    }
    // Precision envelope from the right, then area under the step curve.
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut envelope = vec![0.0; curve.len()];
    let mut m: f64 = 0.0;
    for i in (0..curve.len()).rev() {
        m = m.max(curve[i].1);
        envelope[i] = m;
    }
    for (i, &(recall, _)) in curve.iter().enumerate() {
        ap += (recall - prev_recall) * envelope[i];
        prev_recall = recall;
    }
    ap
}

/// Mean of per-class AP over the classes present in `gts`. Detections with
/// non-positive score are ignored.
pub fn mean_ap(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> Result<MapReport> {
    if gts.is_empty() {
        return Err(Error::Invalid("no ground-truth instances".into()));
    }
    let classes: BTreeSet<&str> = gts.iter().map(|g| g.class.as_str()).collect();
    let per_class: BTreeMap<String, f64> = classes
        .into_iter()
        .map(|c| {
            let d: Vec<&Detection> = dets.iter().filter(|d| d.class == c && d.score > 0.0).collect();
            let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == c).collect();
            (c.to_string(), average_precision(&d, &g, iou_threshold))
        })
        .collect();
    let map = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(MapReport { map, iou_threshold, per_class })
}

/// Object-token detections scored against the node boxes of each graph.
/// Classes are the node phrases occurring in `data`; confidence is one minus
/// the empty-class probability.
pub fn eval_sg_map(model: &SgvlModel, data: &[ImageSgPair], iou_threshold: f64) -> Result<MapReport> {
    if !model.has_sg_tokens() {
        return Err(Error::Invalid("model has no scene-graph tokens".into()));
    }
    let gts: Vec<GroundTruth> = data
        .iter()
        .enumerate()
        .flat_map(|(i, p)| p.graph.nodes.iter().map(move |n| GroundTruth { image: i, class: n.phrase(), bbox: n.bbox }))
        .collect();
    if gts.is_empty() {
        return Err(Error::Invalid("no ground-truth instances".into()));
    }
    let classes: Vec<String> = gts.iter().map(|g| g.class.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let images: Vec<RgbImage> = data.iter().map(|p| p.image.load()).collect::<Result<_, _>>()?;
    let k = model.cfg.n_obj_tokens;
    let tape = Tape::no_grad();
    let labels = model.embed_label_set(&tape, &classes, LabelKind::Object)?;
    let null = classes.len();
    let mut dets = Vec::new();
    for (c, chunk) in images.chunks(EVAL_CHUNK).enumerate() {
        let tape = Tape::no_grad();
        let refs: Vec<&RgbImage> = chunk.iter().collect();
        let states = model.encode_images(&tape, &refs, true)?;
        let (boxes, embeds) = model.predict(&tape, states.objects.expect("scene-graph states"), LabelKind::Object)?;
        let probs = class_probs_rows(embeds, tape.constant(labels.value()))?.value();
        let boxes = boxes.value();
        for r in 0..probs.rows() {
            let p = probs.row(r);
            let (best, _) = p[..null].iter().enumerate().fold((0, f64::NEG_INFINITY), |a, (j, &v)| if v > a.1 { (j, v) } else { a });
            let b = boxes.row(r);
            dets.push(Detection {
                image: c * EVAL_CHUNK + r / k,
                class: classes[best].clone(),
                score: 1.0 - p[null],
                bbox: BBox::new(b[0], b[1], b[2], b[3]),
            });
        }
    }
    mean_ap(&dets, &gts, iou_threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(image: usize, class: &str, b: BBox) -> GroundTruth {
        GroundTruth { image, class: class.into(), bbox: b }
    }

    fn det(image: usize, class: &str, score: f64, b: BBox) -> Detection {
        Detection { image, class: class.into(), score, bbox: b }
    }

    #[test]
    fn duplicate_detection_is_a_false_positive() {
        let b = BBox::new(0.1, 0.1, 0.4, 0.4);
        let gts = [gt(0, "a", b)];
        let r = mean_ap(&[det(0, "a", 0.9, b), det(0, "a", 0.8, b)], &gts, 0.5).unwrap();
        assert_eq!(r.map, 1.0);
        let r = mean_ap(&[det(0, "a", 0.8, b), det(0, "a", 0.9, BBox::new(0.6, 0.6, 0.9, 0.9))], &gts, 0.5).unwrap();
        assert!((r.map - 0.5).abs() < 1e-12);
    }

    #[test]
    fn missing_class_scores_zero() {
        let b = BBox::new(0.1, 0.1, 0.4, 0.4);
        let r = mean_ap(&[det(0, "a", 0.9, b)], &[gt(0, "a", b), gt(0, "b", b)], 0.5).unwrap();
        assert_eq!(r.per_class["b"], 0.0);
        assert!((r.map - 0.5).abs() < 1e-12);
        assert!(mean_ap(&[], &[], 0.5).is_err());
    }
}
