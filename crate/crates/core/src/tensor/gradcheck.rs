use super::{ParamId, ParamStore, TResult, Tape, Tensor, TensorError, Var};

/// Gradients smaller than this are compared on an absolute scale:
/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Group and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
    /// Worst error per checked group, in check order.
    pub groups: Vec<(String, f64)>,
}

impl GradReport {
    fn new(tol: f64) -> Self {
        GradReport { max_rel_error: 0.0, worst: None, checked: 0, tol, passed: true, groups: Vec::new() }
    }

    fn record(&mut self, group: &str, coord: usize, analytic: f64, numeric: f64) {
        let err = rel_error(analytic, numeric);
        self.checked += 1;
        match self.groups.last_mut() {
            Some((g, e)) if g == group => *e = e.max(err),
            _ => self.groups.push((group.to_string(), err)),
        }
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((group.to_string(), coord));
        }
        self.passed = self.max_rel_error < self.tol;
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR)
}

fn check_eps(eps: f64) -> TResult<()> {
    if eps > 0.0 && eps <= 1e-2 {
        Ok(())
    } else {
        Err(TensorError::Invalid { op: "check_gradients", message: format!("eps {eps} outside (0, 1e-2]") })
    }
}

fn probe(v: TResult<f64>) -> TResult<f64> {
    match v {
        Ok(x) if x.is_finite() => Ok(x),
        Ok(_) => Err(TensorError::NonFinite { op: "check_gradients" }),
        Err(e) => Err(e),
    }
}

/// Compares the tape gradient of scalar `f` at `x` with central differences.
pub fn check_gradients<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> TResult<GradReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> TResult<Var<'t>>,
{
    check_eps(eps)?;
    let tape = Tape::new();
    let xv = tape.leaf(x.clone().with_grad(true));
    let loss = f(&tape, xv)?;
    probe(Ok(loss.item()))?;
    let grads = tape.backward(loss)?;
    let analytic = grads.wrt(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);
    let eval = |t: Tensor| -> TResult<f64> {
        let tape = Tape::no_grad();
        let v = tape.leaf(t);
        probe(f(&tape, v).map(|l| l.item()))
    };
    let mut report = GradReport::new(tol);
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        report.record("x", i, analytic[i], numeric);
    }
    Ok(report)
}

/// Central-difference check of `f` with respect to stored parameters.
///
/// `stride` thins the coordinates probed in each parameter (1 probes all).
pub fn check_param_gradients<F>(
    store: &ParamStore,
    ids: &[ParamId],
    f: F,
    eps: f64,
    tol: f64,
    stride: usize,
) -> TResult<GradReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> TResult<Var<'t>>,
{
    check_eps(eps)?;
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    probe(Ok(loss.item()))?;
    let grads = tape.backward(loss)?;
    let mut work = store.clone();
    let eval = |work: &ParamStore| -> TResult<f64> {
        let tape = Tape::no_grad();
        probe(f(&tape, work).map(|l| l.item()))
    };
    let mut report = GradReport::new(tol);
    for &id in ids {
        let name = store.get(id).name.clone();
        let n = store.value(id).numel();
        let analytic = grads.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for i in (0..n).step_by(stride.max(1)) {
            let orig = store.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + eps;
            let fp = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig - eps;
            let fm = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            report.record(&name, i, analytic[i], (fp - fm) / (2.0 * eps));
        }
    }
    Ok(report)
}
