use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgvl_core::matching::{
    assignment_cost, brute_force_assignment, class_probs, contrastive_loss, gn_loss, hungarian, match_slots,
    matching_cost, set_loss, total_loss, LossTerms, MatchResult, SlotTargets,
};
use sgvl_core::tensor::{check_gradients, Tape, Tensor, Var};
use sgvl_core::BBox;

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn hungarian_matches_exhaustive_search_on_random_6x6() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let all = permutations(6);
    assert_eq!(all.len(), 720);
    for _ in 0..100 {
        let cost: Vec<f64> = (0..36).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = hungarian(&cost, 6).unwrap();
        let b = brute_force_assignment(&cost, 6).unwrap();
        assert_eq!(h.perm, b.perm);
        assert_eq!(h.total, b.total);
        for p in &all {
            assert!(h.total <= assignment_cost(&cost, 6, p) + 1e-12);
        }
    }
}

#[test]
fn two_by_two_cost_fixture() {
    let probs = Tensor::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.1, 0.6, 0.3]]).unwrap();
    let pred = [BBox::new(0.0, 0.0, 0.5, 0.5), BBox::new(0.5, 0.5, 1.0, 1.0)];
    let targets = SlotTargets::new(vec![BBox::new(0.0, 0.0, 0.5, 0.5), BBox::new(0.25, 0.25, 0.75, 0.75)]);
    let c = matching_cost(&probs, &pred, &targets).unwrap();
    // Quarter-overlapping 0.5 boxes: IoU 1/7, hull 9/16, GIoU = 1/7 - 2/9 = -5/63.
    let g = -5.0 / 63.0;
    let want = [-0.7, -0.2 + (1.0 - g) + 1.0, -0.1 + 1.5 + 2.0, -0.6 + (1.0 - g) + 1.0];
    for (a, b) in c.iter().zip(want) {
        assert!((a - b).abs() < 1e-12, "{c:?}");
    }
    assert_eq!(hungarian(&c, 2).unwrap().perm, vec![0, 1]);
}

fn const_loss(probs: &Tensor, boxes: &Tensor, targets: &SlotTargets, m: &MatchResult) -> f64 {
    let tape = Tape::no_grad();
    set_loss(tape.constant(probs.clone()), tape.constant(boxes.clone()), targets, m).unwrap().item()
}

#[test]
fn set_loss_fixtures() {
    let g = -5.0 / 63.0;
    let probs = Tensor::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.1, 0.6, 0.3], vec![0.2, 0.2, 0.6]]).unwrap();
    let boxes = Tensor::from_rows(&[vec![0.0, 0.0, 0.5, 0.5], vec![0.5, 0.5, 1.0, 1.0], vec![0.1, 0.1, 0.2, 0.2]]).unwrap();
    let targets = SlotTargets::new(vec![BBox::new(0.0, 0.0, 0.5, 0.5), BBox::new(0.25, 0.25, 0.75, 0.75)]);
    let m = match_slots(&probs, &boxes, &targets).unwrap();
    assert_eq!(m.perm, vec![0, 1, 2]);
    let want = -(0.7f64.ln()) - 0.6f64.ln() - 0.6f64.ln() + (1.0 - g) + 1.0;
    assert!((const_loss(&probs, &boxes, &targets, &m) - want).abs() < 1e-9);

    let perfect = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    let exact = Tensor::from_rows(&[vec![0.0, 0.0, 0.5, 0.5], vec![0.25, 0.25, 0.75, 0.75], vec![0.3, 0.3, 0.4, 0.4]]).unwrap();
    let m = match_slots(&perfect, &exact, &targets).unwrap();
    assert_eq!(const_loss(&perfect, &exact, &targets, &m), 0.0);

    let empty = SlotTargets::new(vec![]);
    let uniform = Tensor::full(&[4, 1], 1.0);
    let m = match_slots(&uniform, &Tensor::full(&[4, 4], 0.5), &empty).unwrap();
    assert_eq!(const_loss(&uniform, &Tensor::full(&[4, 4], 0.5), &empty, &m), 0.0);
    let k_plus_one = Tensor::full(&[4, 3], 1.0 / 3.0);
    let t2 = SlotTargets { labels: vec![], boxes: vec![], null_label: 2 };
    let m = match_slots(&k_plus_one, &Tensor::full(&[4, 4], 0.5), &t2).unwrap();
    assert!((const_loss(&k_plus_one, &Tensor::full(&[4, 4], 0.5), &t2, &m) - 4.0 * 3f64.ln()).abs() < 1e-12);
}

#[test]
fn loss_unit_fixtures() {
    let tape = Tape::no_grad();
    let row = |v: Vec<f64>| tape.constant(Tensor::from_rows(&[v]).unwrap());
    let g = gn_loss(row(vec![1.0, 0.0]), row(vec![0.6, 0.8]), row(vec![0.6, -0.8])).unwrap();
    assert!((g.item() - 2f64.ln()).abs() < 1e-12);
    let s = tape.constant(Tensor::scalar(3.0));
    assert!(contrastive_loss(row(vec![0.0, 1.0]), row(vec![1.0, 0.0]), s).unwrap().item().abs() < 1e-15);
    let eye = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let c = contrastive_loss(eye, eye, tape.constant(Tensor::scalar(1.0))).unwrap().item();
    let e = std::f64::consts::E;
    assert!((c + (e / (e + 1.0)).ln()).abs() < 1e-12);
}

#[test]
fn total_loss_is_the_weighted_sum_of_components() {
    let tape = Tape::no_grad();
    let v = |x: f64| tape.constant(Tensor::scalar(x));
    let terms = LossTerms { cont: v(1.25), gn: Some(v(0.5)), obj: Some(v(2.0)), rel: Some(v(0.75)) };
    let (t, b) = total_loss(&terms, 0.3, 0.7).unwrap();
    let want = 1.25 + 0.3 * 0.5 + 0.7 * (2.0 + 0.75);
    assert!((t.item() - want).abs() < 1e-12);
    assert!((b.l_it - (1.25 + 0.3 * 0.5)).abs() < 1e-12);
    let (t, _) = total_loss(&terms, 0.0, 0.0).unwrap();
    assert_eq!(t.item(), 1.25);
    assert!(total_loss(&terms, -1.0, 0.0).is_err());
}

#[test]
fn set_loss_gradient_at_fixed_assignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (k, l, d) = (4, 3, 5);
    let boxes = SlotTargets::new(vec![BBox::new(0.1, 0.1, 0.4, 0.5), BBox::new(0.5, 0.2, 0.9, 0.7)]);
    let labels = Tensor::from_fn(&[l, d], |_| rng.random_range(-1.0..1.0));
    let labels = {
        let tape = Tape::no_grad();
        tape.constant(labels).l2_normalize().unwrap().value()
    };
    let x = Tensor::from_fn(&[k * (d + 4)], |_| rng.random_range(-1.0..1.0));
    let m = {
        let tape = Tape::no_grad();
        let (p, b) = split_pred(&tape, tape.constant(x.clone()), k, d, &labels);
        match_slots(&p.value(), &b.value(), &boxes).unwrap()
    };
    let r = check_gradients(
        |tape, v| {
            let (p, b) = split_pred(tape, v, k, d, &labels);
            Ok(set_loss(p, b, &boxes, &m).unwrap())
        },
        &x,
        1e-6,
        1e-6,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

/// Class probabilities and boxes from a flat `k x (d + 4)` parameter vector.
fn split_pred<'t>(tape: &'t Tape, v: Var<'t>, k: usize, d: usize, labels: &Tensor) -> (Var<'t>, Var<'t>) {
    let m = v.reshape(&[k, d + 4]).unwrap();
    let e = m.slice_cols(0, d).unwrap();
    let raw = m.slice_cols(d, d + 4).unwrap().sigmoid().unwrap();
    let lo = raw.slice_cols(0, 2).unwrap().scale(0.5).unwrap();
    let hi = raw.slice_cols(2, 4).unwrap().scale(0.5).unwrap().add_const(0.5).unwrap();
    let b = Var::concat_cols(&[lo, hi]).unwrap();
    let p = e.l2_normalize().unwrap().matmul(tape.constant(labels.clone()).transpose().unwrap()).unwrap().softmax(1).unwrap();
    (p, b)
}

fn unit_box() -> impl Strategy<Value = BBox> {
    (0.0..0.8f64, 0.0..0.8f64, 0.05..0.2f64, 0.05..0.2f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn set_loss_ignores_ground_truth_order(
        seed in any::<u64>(),
        gt in prop::collection::vec(unit_box(), 1..4),
        shuffle_seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 4;
        let n = gt.len();
        let l = n + 1;
        let probs = Tensor::from_fn(&[k, l], |_| rng.random_range(0.01..1.0));
        let probs = {
            let tape = Tape::no_grad();
            tape.constant(probs).softmax(1).unwrap().value()
        };
        let boxes = Tensor::from_fn(&[k, 4], |i| {
            let b = gt[(i / 4) % n];
            let c = [b.x0, b.y0, b.x1, b.y1][i % 4];
            c
        });
        let boxes = Tensor::from_fn(&[k, 4], |i| (boxes.data()[i] + rng.random_range(-0.05..0.05f64)).clamp(0.0, 1.0));
        let boxes = Tensor::from_fn(&[k, 4], |i| if i % 4 >= 2 { boxes.data()[i].max(boxes.data()[i - 2]) } else { boxes.data()[i] });
        let a = SlotTargets::new(gt.clone());
        let mut order: Vec<usize> = (0..n).collect();
        let mut srng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        for i in (1..n).rev() {
            order.swap(i, srng.random_range(0..=i));
        }
        let b = SlotTargets { labels: order.clone(), boxes: order.iter().map(|&i| gt[i]).collect(), null_label: n };
        let ma = match_slots(&probs, &boxes, &a).unwrap();
        let mb = match_slots(&probs, &boxes, &b).unwrap();
        let la = const_loss(&probs, &boxes, &a, &ma);
        let lb = const_loss(&probs, &boxes, &b, &mb);
        prop_assert!((la - lb).abs() < 1e-12, "{la} {lb}");
        for j in 0..k {
            let ea = (ma.perm[j] < n).then(|| ma.perm[j]);
            let eb = (mb.perm[j] < n).then(|| order[mb.perm[j]]);
            prop_assert_eq!(ea, eb);
        }
    }

    #[test]
    fn class_probs_sum_to_one_and_ignore_scale(
        e in prop::collection::vec(-1.0..1.0f64, 4),
        rows in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 4), 2..5),
        c in 0.01..100.0f64,
    ) {
        prop_assume!(e.iter().any(|x| x.abs() > 1e-3));
        prop_assume!(rows.iter().all(|r| r.iter().any(|x| x.abs() > 1e-3)));
        let labels = {
            let tape = Tape::no_grad();
            tape.constant(Tensor::from_rows(&rows).unwrap()).l2_normalize().unwrap().value()
        };
        let p = class_probs(&e, &labels).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let scaled: Vec<f64> = e.iter().map(|x| x * c).collect();
        let q = class_probs(&scaled, &labels).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn contrastive_loss_is_non_negative(
        a in prop::collection::vec(-1.0..1.0f64, 12),
        b in prop::collection::vec(-1.0..1.0f64, 12),
        s in 0.1..50.0f64,
    ) {
        let tape = Tape::no_grad();
        let img = tape.constant(Tensor::new(vec![3, 4], a).unwrap()).l2_normalize().unwrap();
        let txt = tape.constant(Tensor::new(vec![3, 4], b).unwrap()).l2_normalize().unwrap();
        let l = contrastive_loss(img, txt, tape.constant(Tensor::scalar(s))).unwrap().item();
        prop_assert!(l >= 0.0);
    }

    #[test]
    fn gn_loss_decreases_as_the_positive_gets_closer(t in 0.0..1.5f64, dt in 0.01..0.5f64) {
        let tape = Tape::no_grad();
        let row = |v: Vec<f64>| tape.constant(Tensor::from_rows(&[v]).unwrap());
        let at = |a: f64| gn_loss(row(vec![1.0, 0.0]), row(vec![a.cos(), a.sin()]), row(vec![0.0, 1.0])).unwrap().item();
        prop_assert!(at(t + dt) > at(t));
    }
}
