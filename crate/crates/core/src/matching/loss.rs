use serde::{Deserialize, Serialize};

use super::giou::{giou, giou_rows, l1_rows};
use super::hungarian::hungarian;
use super::{MatchError, MatchResult};
use crate::scene::BBox;
use crate::tensor::{Tensor, Var};
use crate::Result;

/// Lower bound applied to matched probabilities inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Ground truth for one image: real entries followed implicitly by
/// "no object" slots up to the token count.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotTargets {
    /// Label-matrix row of each real entry.
    pub labels: Vec<usize>,
    pub boxes: Vec<BBox>,
    /// Label-matrix row of the empty class.
    pub null_label: usize,
}

impl SlotTargets {
    /// Entry `i` is labelled by row `i`; the empty class is the row after
    /// the last entry.
    pub fn new(boxes: Vec<BBox>) -> Self {
        let n = boxes.len();
        SlotTargets { labels: (0..n).collect(), boxes, null_label: n }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    fn slot_label(&self, slot: usize) -> usize {
        if slot < self.len() {
            self.labels[slot]
        } else {
            self.null_label
        }
    }
}

/// Softmax over cosine similarities between `e` and each (unit) label row.
pub fn class_probs(e: &[f64], labels: &Tensor) -> Result<Vec<f64>> {
    let tape = crate::tensor::Tape::no_grad();
    let ev = tape.constant(Tensor::matrix(1, e.len(), e.to_vec())?);
    Ok(class_probs_rows(ev, tape.constant(labels.clone()))?.value().into_data())
}

/// Row-wise [`class_probs`] for a `k x d` block of class embeddings.
pub fn class_probs_rows<'t>(e: Var<'t>, labels: Var<'t>) -> Result<Var<'t>> {
    let ev = e.value();
    if (0..ev.rows()).any(|r| ev.row(r).iter().all(|&x| x == 0.0)) {
        return Err(MatchError::ZeroEmbedding.into());
    }
    Ok(e.l2_normalize()?.matmul(labels.transpose()?)?.softmax(1)?)
}

/// `k x k` cost of assigning prediction `j` (row) to slot `i` (column).
pub fn matching_cost(probs: &Tensor, boxes: &[BBox], targets: &SlotTargets) -> Result<Vec<f64>> {
    let k = boxes.len();
    let n = targets.len();
    if n > k {
        return Err(MatchError::TooManyTargets { kind: "entries", n, k }.into());
    }
    if probs.rows() != k {
        return Err(MatchError::Shape(format!("{} probability rows for {k} boxes", probs.rows())).into());
    }
    let mut cost = vec![0.0; k * k];
    for j in 0..k {
        for i in 0..n {
            let gt = &targets.boxes[i];
            let b = &boxes[j];
            let l1 = (gt.x0 - b.x0).abs() + (gt.y0 - b.y0).abs() + (gt.x1 - b.x1).abs() + (gt.y1 - b.y1).abs();
            cost[j * k + i] = -probs.at(j, targets.labels[i]) + (1.0 - giou(gt, b)) + l1;
        }
    }
    Ok(cost)
}

fn boxes_of(t: &Tensor) -> Vec<BBox> {
    (0..t.rows()).map(|i| BBox::new(t.at(i, 0), t.at(i, 1), t.at(i, 2), t.at(i, 3))).collect()
}

/// Optimal assignment for the current predictions.
pub fn match_slots(probs: &Tensor, boxes: &Tensor, targets: &SlotTargets) -> Result<MatchResult> {
    let b = boxes_of(boxes);
    let cost = matching_cost(probs, &b, targets)?;
    Ok(hungarian(&cost, b.len())?)
}

/// Set-prediction loss at a fixed assignment: negative log-probability of
/// every matched slot (empty slots included) plus `1 - GIoU` and L1 box
/// terms on real slots.
pub fn set_loss<'t>(probs: Var<'t>, boxes: Var<'t>, targets: &SlotTargets, m: &MatchResult) -> Result<Var<'t>> {
    let pv = probs.value();
    let l = pv.cols();
    let picks: Vec<usize> = m.perm.iter().enumerate().map(|(j, &s)| j * l + targets.slot_label(s)).collect();
    let mut q = probs.pick(&picks)?;
    if picks.iter().any(|&i| pv.data()[i] < PROB_FLOOR) {
        log::warn!("matched probability below {PROB_FLOOR:e}; clamping");
        q = q.maximum(probs.tape().constant(Tensor::full(&[picks.len()], PROB_FLOOR)))?;
    }
    let mut loss = q.log()?.sum()?.neg()?;
    let real: Vec<usize> = (0..m.perm.len()).filter(|&j| m.perm[j] < targets.len()).collect();
    if !real.is_empty() {
        let gt: Vec<BBox> = real.iter().map(|&j| targets.boxes[m.perm[j]]).collect();
        let pb = boxes.gather_rows(&real)?;
        let g = giou_rows(pb, &gt)?;
        let box_term = g.neg()?.add_const(1.0)?.add(l1_rows(pb, &gt)?)?.sum()?;
        loss = loss.add(box_term)?;
    }
    Ok(loss)
}

/// Symmetric InfoNCE over the `B x B` matrix of scaled cosines between unit
/// rows of `img` and `txt`.
pub fn contrastive_loss<'t>(img: Var<'t>, txt: Var<'t>, scale: Var<'t>) -> Result<Var<'t>> {
    let b = img.value().rows();
    if b == 0 {
        return Err(MatchError::EmptyBatch.into());
    }
    if scale.item() <= 0.0 {
        return Err(MatchError::Shape(format!("logit scale must be positive, got {}", scale.item())).into());
    }
    let logits = img.matmul(txt.transpose()?)?.mul_scalar(scale)?;
    let diag: Vec<usize> = (0..b).collect();
    let i2t = logits.cross_entropy(&diag)?;
    let t2i = logits.transpose()?.cross_entropy(&diag)?;
    Ok(i2t.add(t2i)?.scale(0.5)?)
}

/// Binary softmax preferring the positive caption over its negative,
/// summed over rows.
pub fn gn_loss<'t>(img: Var<'t>, pos: Var<'t>, neg: Var<'t>) -> Result<Var<'t>> {
    let cp = img.cosine_rows(pos)?;
    let cn = img.cosine_rows(neg)?;
    let g = cp.value().numel();
    let pair = Var::concat_cols(&[cp.reshape(&[g, 1])?, cn.reshape(&[g, 1])?])?;
    Ok(pair.cross_entropy(&vec![0; g])?.scale(g as f64)?)
}

/// Scalar values of every objective component for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_cont: f64,
    pub l_gn: f64,
    pub l_obj: f64,
    pub l_rel: f64,
    pub l_sg: f64,
    pub l_it: f64,
    pub l_total: f64,
}

/// Tape values of the components; absent terms count as zero.
pub struct LossTerms<'t> {
    pub cont: Var<'t>,
    pub gn: Option<Var<'t>>,
    pub obj: Option<Var<'t>>,
    pub rel: Option<Var<'t>>,
}

/// `L_IT = L_Cont + lambda_gn L_GN` and `L_Total = L_IT + lambda_sg (L_Obj + L_Rel)`.
pub fn total_loss<'t>(terms: &LossTerms<'t>, lambda_gn: f64, lambda_sg: f64) -> Result<(Var<'t>, LossBundle)> {
    for (name, value) in [("lambda_gn", lambda_gn), ("lambda_sg", lambda_sg)] {
        if !(value >= 0.0) {
            return Err(MatchError::NegativeWeight { name, value }.into());
        }
    }
    let val = |v: Option<Var<'t>>| v.map_or(0.0, |v| v.item());
    let mut it = terms.cont;
    if let Some(gn) = terms.gn {
        it = it.add(gn.scale(lambda_gn)?)?;
    }
    let sg = match (terms.obj, terms.rel) {
        (Some(o), Some(r)) => Some(o.add(r)?),
        (o, r) => o.or(r),
    };
    let mut total = it;
    if let Some(sg) = sg {
        total = total.add(sg.scale(lambda_sg)?)?;
    }
    let bundle = LossBundle {
        l_cont: terms.cont.item(),
        l_gn: val(terms.gn),
        l_obj: val(terms.obj),
        l_rel: val(terms.rel),
        l_sg: val(sg),
        l_it: it.item(),
        l_total: total.item(),
    };
    Ok((total, bundle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn class_prob_fixtures() {
        let labels = rows(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]]);
        let q = class_probs(&[2.0, 0.0], &labels).unwrap();
        let expect = [0.665_240_955_774_821_9, 0.244_728_471_054_797_64, 0.090_030_573_170_380_46];
        for (a, b) in q.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let same = rows(&[&[0.6, 0.8], &[0.6, 0.8], &[0.6, 0.8]]);
        let u = class_probs(&[0.3, -1.0], &same).unwrap();
        assert!(u.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        assert!(class_probs(&[0.0, 0.0], &same).is_err());
    }

    #[test]
    fn perfect_prediction_costs_minus_one() {
        let b = BBox::new(0.1, 0.1, 0.5, 0.5);
        let t = SlotTargets::new(vec![b]);
        let probs = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let c = matching_cost(&probs, &[b, BBox::new(0.5, 0.5, 0.9, 0.9)], &t).unwrap();
        assert_eq!(c[0], -1.0);
        assert_eq!(c[1], 0.0);
        assert_eq!(c[3], 0.0);
    }

    #[test]
    fn all_empty_ground_truth_gives_zero_cost() {
        let probs = rows(&[&[1.0], &[1.0], &[1.0]]);
        let b = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(matching_cost(&probs, &[b; 3], &SlotTargets::new(vec![])).unwrap(), vec![0.0; 9]);
    }

    #[test]
    fn too_many_targets() {
        let b = BBox::new(0.0, 0.0, 1.0, 1.0);
        let probs = rows(&[&[0.5, 0.2, 0.3]]);
        let err = matching_cost(&probs, &[b], &SlotTargets::new(vec![b, b])).unwrap_err();
        assert!(err.to_string().contains("more GT"));
    }

    #[test]
    fn uniform_probabilities_on_empty_targets() {
        let tape = Tape::new();
        let k = 4;
        let l = 3;
        let q = tape.leaf(Tensor::full(&[k, l], 1.0 / l as f64));
        let bx = tape.leaf(Tensor::full(&[k, 4], 0.5));
        let t = SlotTargets { labels: vec![], boxes: vec![], null_label: l - 1 };
        let m = match_slots(&q.value(), &bx.value(), &t).unwrap();
        let loss = set_loss(q, bx, &t, &m).unwrap().item();
        assert!((loss - k as f64 * (l as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn contrastive_fixtures() {
        let tape = Tape::new();
        let one = tape.constant(Tensor::scalar(1.0));
        let a = tape.leaf(Tensor::matrix(1, 2, vec![0.6, 0.8]).unwrap());
        assert_eq!(contrastive_loss(a, a, one).unwrap().item(), 0.0);
        let eye = tape.leaf(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let l = contrastive_loss(eye, eye, one).unwrap().item();
        let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l - expect).abs() < 1e-15 && (l - 0.3133).abs() < 1e-4);
        let big = tape.constant(Tensor::scalar(200.0));
        assert!(contrastive_loss(eye, eye, big).unwrap().item() < 1e-80);
    }

    #[test]
    fn gn_fixtures() {
        let tape = Tape::new();
        let i = tape.leaf(rows(&[&[1.0, 0.0]]));
        let p = tape.leaf(rows(&[&[0.0, 1.0]]));
        assert!((gn_loss(i, p, p).unwrap().item() - std::f64::consts::LN_2).abs() < 1e-12);
        let n = tape.leaf(rows(&[&[-1.0, 0.0]]));
        let l = gn_loss(i, i, n).unwrap().item();
        assert!((l + (1f64.exp() / (1f64.exp() + (-1f64).exp())).ln()).abs() < 1e-15);
        assert!((l - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn total_loss_weighting() {
        let tape = Tape::new();
        let one = || tape.leaf(Tensor::scalar(1.0).with_grad(true));
        let terms = LossTerms { cont: one(), gn: Some(one()), obj: Some(one()), rel: Some(one()) };
        let (_, b) = total_loss(&terms, 1.0, 1.0).unwrap();
        assert_eq!(b.l_total, 4.0);
        let (t, b) = total_loss(&terms, 0.0, 0.0).unwrap();
        assert_eq!(b.l_total, b.l_cont);
        let g = tape.backward(t).unwrap();
        assert_eq!(g.wrt(terms.obj.unwrap()).unwrap(), &[0.0]);
        assert!(total_loss(&terms, -1.0, 0.0).is_err());
    }
}
