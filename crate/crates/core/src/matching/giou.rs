use crate::scene::BBox;
use crate::tensor::{TResult, Tensor, Var};

/// Generalized IoU. A zero-area hull has no meaningful value and scores 0.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let hull = a.hull(b).area();
    if hull <= 0.0 {
        log::warn!("giou of two degenerate boxes {a:?} and {b:?}; using 0");
        return 0.0;
    }
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    iou - (hull - union) / hull
}

fn targets_tensor(t: &[BBox]) -> Tensor {
    Tensor::from_fn(&[t.len(), 4], |i| <[f64; 4]>::from(t[i / 4])[i % 4])
}

/// Row-wise GIoU between predicted corner boxes (`k x 4`) and fixed targets.
///
/// Rows whose value is undefined (degenerate hull or zero union) are
/// recorded as constants.
pub fn giou_rows<'t>(pred: Var<'t>, target: &[BBox]) -> TResult<Var<'t>> {
    let tape = pred.tape();
    let pv = pred.value();
    let k = target.len();
    let pboxes: Vec<BBox> = (0..k).map(|i| BBox::new(pv.at(i, 0), pv.at(i, 1), pv.at(i, 2), pv.at(i, 3))).collect();
    let good: Vec<usize> = (0..k)
        .filter(|&i| {
            let (p, t) = (&pboxes[i], &target[i]);
            let inter = p.intersection_area(t);
            p.hull(t).area() > 0.0 && p.area() + t.area() - inter > 0.0
        })
        .collect();
    if good.len() < k {
        let values = Tensor::from_fn(&[k], |i| giou(&pboxes[i], &target[i]));
        if good.is_empty() {
            return Ok(tape.constant(values));
        }
        let sub: Vec<BBox> = good.iter().map(|&i| target[i]).collect();
        let g = giou_rows(pred.gather_rows(&good)?, &sub)?.reshape(&[good.len(), 1])?;
        // Stitch the differentiable rows back in place of their constants.
        let merged = Var::concat_rows(&[g, tape.constant(values.reshape(&[k, 1])?)])?;
        let order: Vec<usize> =
            (0..k).map(|i| good.iter().position(|&j| j == i).unwrap_or(good.len() + i)).collect();
        return merged.gather_rows(&order)?.reshape(&[k]);
    }
    let t = tape.constant(targets_tensor(target));
    let col = |v: Var<'t>, c: usize| v.slice_cols(c, c + 1);
    let (px0, py0, px1, py1) = (col(pred, 0)?, col(pred, 1)?, col(pred, 2)?, col(pred, 3)?);
    let (tx0, ty0, tx1, ty1) = (col(t, 0)?, col(t, 1)?, col(t, 2)?, col(t, 3)?);
    let iw = px1.minimum(tx1)?.sub(px0.maximum(tx0)?)?.relu()?;
    let ih = py1.minimum(ty1)?.sub(py0.maximum(ty0)?)?.relu()?;
    let inter = iw.mul(ih)?;
    let pa = px1.sub(px0)?.mul(py1.sub(py0)?)?;
    let ta = tx1.sub(tx0)?.mul(ty1.sub(ty0)?)?;
    let union = pa.add(ta)?.sub(inter)?;
    let hw = px1.maximum(tx1)?.sub(px0.minimum(tx0)?)?;
    let hh = py1.maximum(ty1)?.sub(py0.minimum(ty0)?)?;
    let hull = hw.mul(hh)?;
    let g = inter.div(union)?.sub(hull.sub(union)?.div(hull)?)?;
    g.reshape(&[k])
}

/// Row-wise L1 distance between predicted and target corner boxes.
pub fn l1_rows<'t>(pred: Var<'t>, target: &[BBox]) -> TResult<Var<'t>> {
    let t = pred.tape().constant(targets_tensor(target));
    pred.sub(t)?.abs()?.sum_rows()
}
