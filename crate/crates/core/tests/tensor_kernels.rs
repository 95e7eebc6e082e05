use proptest::prelude::*;
use sgvl_core::tensor::{check_gradients, check_param_gradients, TResult};
use sgvl_core::{ParamStore, Tape, Tensor, Var};

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-5;

/// Fixed pseudo-random weights so every output coordinate matters.
fn weights(n: usize, salt: usize) -> Tensor {
    Tensor::from_fn(&[n], |i| (((i + 1) * 7919 + salt * 104_729) % 1000) as f64 / 500.0 - 1.0)
}

fn wsum<'t>(tape: &'t Tape, v: Var<'t>, salt: usize) -> TResult<Var<'t>> {
    let n = v.value().numel();
    let flat = v.reshape(&[n])?;
    flat.mul(tape.constant(weights(n, salt)))?.sum()
}

fn mat(r: usize, c: usize, data: &[f64]) -> Tensor {
    Tensor::matrix(r, c, data.to_vec()).unwrap()
}

fn assert_ok(report: TResult<sgvl_core::tensor::GradReport>) {
    let r = report.unwrap();
    assert!(r.passed && r.max_rel_error < TOL, "max rel error {} at {:?}", r.max_rel_error, r.worst);
}

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, n)
}

fn positive(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.3..3.0f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matmul_both_sides(a in vals(6), b in vals(12)) {
        let bt = mat(3, 4, &b);
        let at = mat(2, 3, &a);
        assert_ok(check_gradients(|t, x| wsum(t, x.matmul(t.constant(bt.clone()))?, 1), &at, EPS, TOL));
        assert_ok(check_gradients(|t, x| wsum(t, t.constant(at.clone()).matmul(x)?, 2), &bt, EPS, TOL));
    }

    #[test]
    fn transpose_and_reshape(a in vals(6)) {
        assert_ok(check_gradients(|t, x| wsum(t, x.transpose()?, 3), &mat(2, 3, &a), EPS, TOL));
        assert_ok(check_gradients(|t, x| wsum(t, x.reshape(&[3, 2])?, 4), &mat(2, 3, &a), EPS, TOL));
    }

    #[test]
    fn elementwise_binary(a in vals(6), b in vals(6), d in positive(6)) {
        let (a, b, d) = (mat(2, 3, &a), mat(2, 3, &b), mat(2, 3, &d));
        for (salt, which) in ["add", "sub", "mul", "min", "max"].iter().enumerate() {
            let bb = b.clone();
            assert_ok(check_gradients(
                |t, x| {
                    let y = t.leaf(bb.clone().with_grad(true));
                    let out = match *which {
                        "add" => x.add(y)?,
                        "sub" => x.sub(y)?.sub(x.mul(y)?)?,
                        "mul" => x.mul(y)?.mul(x)?,
                        "min" => x.minimum(y)?,
                        _ => y.maximum(x)?,
                    };
                    wsum(t, out, salt)
                },
                &a,
                EPS,
                TOL,
            ));
        }
        let dd = d.clone();
        assert_ok(check_gradients(|t, x| wsum(t, x.div(t.constant(dd.clone()))?, 9), &a, EPS, TOL));
        let aa = a.clone();
        assert_ok(check_gradients(|t, x| wsum(t, t.constant(aa.clone()).div(x)?, 10), &d, EPS, TOL));
    }

    #[test]
    fn broadcasting_kernels(a in vals(6), r in vals(3), s in -2.0..2.0f64) {
        let (am, rv) = (mat(2, 3, &a), Tensor::new(vec![3], r.clone()).unwrap());
        let rc = rv.clone();
        assert_ok(check_gradients(|t, x| wsum(t, x.add_row(t.constant(rc.clone()))?, 11), &am, EPS, TOL));
        let ac = am.clone();
        assert_ok(check_gradients(|t, x| wsum(t, t.constant(ac.clone()).add_row(x)?, 12), &rv, EPS, TOL));
        let sc = Tensor::scalar(s);
        assert_ok(check_gradients(|t, x| wsum(t, x.mul_scalar(t.constant(sc.clone()))?, 13), &am, EPS, TOL));
        let ac = am.clone();
        assert_ok(check_gradients(|t, x| wsum(t, t.constant(ac.clone()).mul_scalar(x)?, 14), &sc, EPS, TOL));
        assert_ok(check_gradients(|t, x| wsum(t, x.scale(-1.7)?.add_const(0.3)?, 15), &am, EPS, TOL));
    }

    #[test]
    fn unary_maps(a in vals(8), p in positive(8)) {
        let a = mat(2, 4, &a);
        let p = mat(2, 4, &p);
        type Map = for<'t> fn(Var<'t>) -> TResult<Var<'t>>;
        let cases: [(&str, Map, &Tensor); 9] = [
            ("exp", |x| x.exp(), &a),
            ("log", |x| x.log(), &p),
            ("sqrt", |x| x.sqrt(), &p),
            ("abs", |x| x.abs(), &a),
            ("sigmoid", |x| x.sigmoid(), &a),
            ("tanh", |x| x.tanh(), &a),
            ("gelu", |x| x.gelu(), &a),
            ("relu", |x| x.relu(), &a),
            ("neg", |x| x.neg(), &a),
        ];
        for (salt, (name, f, input)) in cases.into_iter().enumerate() {
            let r = check_gradients(|t, x| wsum(t, f(x)?, salt), input, EPS, TOL).unwrap();
            prop_assert!(r.passed, "{}: {}", name, r.max_rel_error);
        }
    }

    #[test]
    fn reductions(a in vals(6)) {
        let a = mat(2, 3, &a);
        assert_ok(check_gradients(|_, x| x.mul(x)?.sum(), &a, EPS, TOL));
        assert_ok(check_gradients(|_, x| x.mul(x)?.mean(), &a, EPS, TOL));
        assert_ok(check_gradients(|t, x| wsum(t, x.mul(x)?.sum_rows()?, 16), &a, EPS, TOL));
    }

    #[test]
    fn copy_kernels(a in vals(12), b in vals(6)) {
        let a = mat(4, 3, &a);
        let bm = mat(2, 3, &b);
        let bc = bm.clone();
        assert_ok(check_gradients(|t, x| wsum(t, Var::concat_rows(&[x, t.constant(bc.clone()), x])?, 17), &a, EPS, TOL));
        let bc = mat(4, 1, &b[..4]);
        assert_ok(check_gradients(|t, x| wsum(t, Var::concat_cols(&[t.constant(bc.clone()), x, x])?, 18), &a, EPS, TOL));
        assert_ok(check_gradients(|t, x| wsum(t, x.slice_cols(1, 3)?, 19), &a, EPS, TOL));
        assert_ok(check_gradients(|t, x| wsum(t, x.gather_rows(&[3, 0, 3, 2])?, 20), &a, EPS, TOL));
        assert_ok(check_gradients(|t, x| wsum(t, x.pick(&[11, 0, 5, 5])?, 21), &a, EPS, TOL));
    }

    #[test]
    fn layer_norm_all_inputs(x in vals(12), g in vals(4), b in vals(4)) {
        let (x, g, b) = (mat(3, 4, &x), Tensor::new(vec![4], g).unwrap(), Tensor::new(vec![4], b).unwrap());
        let (gc, bc, xc) = (g.clone(), b.clone(), x.clone());
        assert_ok(check_gradients(|t, v| wsum(t, v.layer_norm(t.constant(gc.clone()), t.constant(bc.clone()))?, 22), &x, EPS, TOL));
        let bc2 = b.clone();
        assert_ok(check_gradients(|t, v| wsum(t, t.constant(xc.clone()).layer_norm(v, t.constant(bc2.clone()))?, 23), &g, EPS, TOL));
        let xc = x.clone();
        assert_ok(check_gradients(|t, v| wsum(t, t.constant(xc.clone()).layer_norm(t.constant(g.clone()), v)?, 24), &b, EPS, TOL));
    }

    #[test]
    fn softmax_family(a in vals(12), targets in prop::collection::vec(0usize..4, 3)) {
        let a = mat(3, 4, &a);
        assert_ok(check_gradients(|t, x| wsum(t, x.softmax(1)?, 25), &a, EPS, TOL));
        assert_ok(check_gradients(|t, x| wsum(t, x.softmax(0)?, 26), &a, EPS, TOL));
        assert_ok(check_gradients(|t, x| wsum(t, x.log_softmax()?, 27), &a, EPS, TOL));
        assert_ok(check_gradients(|_, x| x.cross_entropy(&targets), &a, EPS, TOL));
    }

    #[test]
    fn normalization_kernels(a in vals(9), b in vals(9)) {
        let (a, b) = (mat(3, 3, &a), mat(3, 3, &b));
        assert_ok(check_gradients(|t, x| wsum(t, x.l2_normalize()?, 28), &a, EPS, TOL));
        let bc = b.clone();
        assert_ok(check_gradients(|t, x| wsum(t, x.cosine_rows(t.constant(bc.clone()))?, 29), &a, EPS, TOL));
        assert_ok(check_gradients(|t, x| wsum(t, t.constant(a.clone()).cosine_rows(x)?, 30), &b, EPS, TOL));
    }

    #[test]
    fn attention_all_inputs(q in vals(16), k in vals(16), v in vals(16)) {
        // two sequences of length 2, model width 4, two heads
        let (q, k, v) = (mat(4, 4, &q), mat(4, 4, &k), mat(4, 4, &v));
        let mask = [true, true, true, false];
        let (kc, vc) = (k.clone(), v.clone());
        assert_ok(check_gradients(|t, x| wsum(t, x.attention(t.constant(kc.clone()), t.constant(vc.clone()), 2, 2, Some(&mask))?, 31), &q, EPS, TOL));
        let (qc, vc) = (q.clone(), v.clone());
        assert_ok(check_gradients(|t, x| wsum(t, t.constant(qc.clone()).attention(x, t.constant(vc.clone()), 2, 2, None)?, 32), &k, EPS, TOL));
        assert_ok(check_gradients(|t, x| wsum(t, t.constant(q.clone()).attention(t.constant(k.clone()), x, 2, 2, Some(&mask))?, 33), &v, EPS, TOL));
        // self-attention feeds one tensor to all three operands
        assert_ok(check_gradients(|t, x| wsum(t, x.attention(x, x, 4, 1, None)?, 34), &mat(4, 4, &[0.1; 16]), EPS, TOL));
    }

    #[test]
    fn attention_key_bias(q in vals(16), k in vals(16), v in vals(16), b in vals(4)) {
        let (q, k, v, b) = (mat(4, 4, &q), mat(4, 4, &k), mat(4, 4, &v), mat(4, 1, &b));
        let (qc, kc, vc) = (q.clone(), k.clone(), v.clone());
        assert_ok(check_gradients(
            |t, x| wsum(t, t.constant(qc.clone()).attention_biased(t.constant(kc.clone()), t.constant(vc.clone()), x, 2, 2)?, 35),
            &b,
            EPS,
            TOL,
        ));
        let bc = b.clone();
        assert_ok(check_gradients(|t, x| wsum(t, x.attention_biased(x, x, t.constant(bc.clone()), 4, 2)?, 36), &q, EPS, TOL));
        let t = Tape::new();
        let zero = t.constant(mat(4, 1, &[0.0; 4]));
        let plain = t.constant(q.clone()).attention(t.constant(k.clone()), t.constant(v.clone()), 2, 2, None).unwrap().value();
        let unbiased = t.constant(q.clone()).attention_biased(t.constant(k.clone()), t.constant(v.clone()), zero, 2, 2).unwrap().value();
        prop_assert_eq!(plain.data(), unbiased.data());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(a in prop::collection::vec(-30.0..30.0f64, 12), c in -50.0..50.0f64) {
        let tape = Tape::new();
        let x = tape.leaf(mat(3, 4, &a));
        let y = x.softmax(1).unwrap().value();
        for r in 0..3 {
            prop_assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let ys = x.add_const(c).unwrap().softmax(1).unwrap().value();
        for (p, q) in y.data().iter().zip(ys.data()) {
            prop_assert!((p - q).abs() <= 1e-9);
        }
    }

    #[test]
    fn cosine_gradient_is_orthogonal_to_input(u in vals(5), v in vals(5)) {
        prop_assume!(u.iter().map(|x| x * x).sum::<f64>() > 1e-4);
        let tape = Tape::new();
        let uv = tape.leaf(mat(1, 5, &u).with_grad(true));
        let vv = tape.constant(mat(1, 5, &v));
        let c = uv.cosine_rows(vv).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c.item()));
        let g = tape.backward(c.sum().unwrap()).unwrap();
        let dot: f64 = g.wrt(uv).unwrap().iter().zip(&u).map(|(a, b)| a * b).sum();
        prop_assert!(dot.abs() <= 1e-9, "{}", dot);
    }
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let tape = Tape::new();
    let y = tape.leaf(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()).softmax(0).unwrap().value();
    assert_eq!(y.data(), &[0.5, 0.5]);
}

#[test]
fn cosine_of_vector_with_itself_is_one() {
    let tape = Tape::new();
    let v = tape.leaf(mat(1, 4, &[0.3, -1.2, 5.0, 0.01]));
    assert!((v.cosine_rows(v).unwrap().item() - 1.0).abs() < 1e-15);
}

#[test]
fn linear_loss_gradient_is_broadcast_input() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::from_fn(&[2, 3], |i| i as f64), true).unwrap();
    let unused = store.add("unused", Tensor::zeros(&[2]), true).unwrap();
    let tape = Tape::new();
    let x = tape.constant(mat(3, 1, &[1.0, -2.0, 0.5]));
    let _ = tape.param(&store, unused);
    let loss = tape.param(&store, w).matmul(x).unwrap().sum().unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.param(w).unwrap(), &[1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);
    assert!(g.param(unused).is_none());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]).with_grad(true));
    assert!(tape.backward(x).is_err());
}

#[test]
fn shape_errors_name_both_shapes() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[3, 3]));
    let msg = a.add(b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[3, 3]"), "{msg}");
}

fn mlp_store() -> ParamStore {
    let mut s = ParamStore::new();
    let mut k = 0usize;
    let mut next = || {
        k += 1;
        ((k * 2_654_435_761) % 2001) as f64 / 1000.0 - 1.0
    };
    for (i, (r, c)) in [(4usize, 5usize), (5, 5), (5, 2)].into_iter().enumerate() {
        s.add(format!("l{i}.w"), Tensor::from_fn(&[r, c], |_| next() * 0.7), true).unwrap();
        s.add(format!("l{i}.b"), Tensor::from_fn(&[c], |_| next() * 0.1), true).unwrap();
    }
    s
}

fn mlp_loss<'t>(t: &'t Tape, s: &ParamStore) -> TResult<Var<'t>> {
    let mut h = t.constant(Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin()));
    for i in 0..3 {
        let w = t.param(s, s.id(&format!("l{i}.w"))?);
        let b = t.param(s, s.id(&format!("l{i}.b"))?);
        h = h.matmul(w)?.add_row(b)?;
        if i < 2 {
            h = h.gelu()?;
        }
    }
    h.cross_entropy(&[0, 1, 1])
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let s = mlp_store();
    let ids = s.trainable_ids();
    let r = check_param_gradients(&s, &ids, mlp_loss, EPS, TOL, 1).unwrap();
    assert!(r.passed, "{r:?}");
    assert_eq!(r.groups.len(), 6);
}

#[test]
fn backward_is_bitwise_deterministic() {
    let s = mlp_store();
    let run = || {
        let t = Tape::new();
        let l = mlp_loss(&t, &s).unwrap();
        let g = t.backward(l).unwrap();
        g.params().into_iter().map(|(id, g)| (id, g.to_vec())).collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    for ((ia, ga), (ib, gb)) in a.iter().zip(&b) {
        assert_eq!(ia, ib);
        assert!(ga.iter().zip(gb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn layer_norm_sum_on_random_four_vector() {
    let x = Tensor::matrix(1, 4, vec![0.81, -1.3, 2.2, 0.05]).unwrap();
    let r = check_gradients(
        |t, v| v.layer_norm(t.constant(Tensor::full(&[4], 1.0)), t.constant(Tensor::zeros(&[4])))?.sum(),
        &x,
        EPS,
        1e-6,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}
