use super::tape::{Node, Var};
use super::{matmul_into, TResult, Tensor, TensorError};

pub(crate) const LN_EPS: f64 = 1e-5;
pub(crate) const NORM_EPS: f64 = 1e-8;

pub(crate) enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Min { a: usize, b: usize },
    Max { a: usize, b: usize },
    AddRow { a: usize, bias: usize },
    MulScalar { a: usize, s: usize },
    Scale { a: usize, k: f64 },
    Identity { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Sqrt { a: usize },
    Abs { a: usize },
    Sigmoid { a: usize },
    Tanh { a: usize },
    Gelu { a: usize },
    Relu { a: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    SumRows { a: usize },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    SliceCols { a: usize, start: usize },
    GatherRows { a: usize, idx: Vec<usize> },
    Pick { a: usize, idx: Vec<usize> },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { a: usize, axis: usize },
    LogSoftmax { a: usize },
    CrossEntropy { a: usize, targets: Vec<usize>, probs: Vec<f64> },
    L2Normalize { a: usize, norms: Vec<f64> },
    CosineRows { a: usize, b: usize, na: Vec<f64>, nb: Vec<f64> },
    Attention { q: usize, k: usize, v: usize, bias: Option<usize>, seq: usize, heads: usize, probs: Vec<f64> },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b } | Add { a, b } | Sub { a, b } | Mul { a, b } | Div { a, b } | Min { a, b } | Max { a, b } => {
                vec![*a, *b]
            }
            AddRow { a, bias } => vec![*a, *bias],
            MulScalar { a, s } => vec![*a, *s],
            CosineRows { a, b, .. } => vec![*a, *b],
            Transpose { a }
            | Scale { a, .. }
            | Identity { a }
            | Exp { a }
            | Log { a }
            | Sqrt { a }
            | Abs { a }
            | Sigmoid { a }
            | Tanh { a }
            | Gelu { a }
            | Relu { a }
            | SumAll { a }
            | MeanAll { a }
            | SumRows { a }
            | SliceCols { a, .. }
            | GatherRows { a, .. }
            | Pick { a, .. }
            | Softmax { a, .. }
            | LogSoftmax { a }
            | CrossEntropy { a, .. }
            | L2Normalize { a, .. } => vec![*a],
            ConcatRows { parts } | ConcatCols { parts } => parts.clone(),
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Attention { q, k, v, bias, .. } => [*q, *k, *v].into_iter().chain(*bias).collect(),
        }
    }

    pub(crate) fn backward(&self, g: &[f64], out: &Tensor, nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
        use Op::*;
        let val = |i: usize| nodes[i].value.data();
        match self {
            Leaf => {}
            MatMul { a, b } => {
                let (m, k, n) = (nodes[*a].value.rows(), nodes[*a].value.cols(), nodes[*b].value.cols());
                if let Some(ga) = slot(grads, nodes, *a) {
                    let bt = nodes[*b].value.transpose();
                    matmul_into(g, bt.data(), ga, m, n, k);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    let at = nodes[*a].value.transpose();
                    matmul_into(at.data(), g, gb, k, m, n);
                }
            }
            Transpose { a } => {
                let (r, c) = (nodes[*a].value.rows(), nodes[*a].value.cols());
                if let Some(ga) = slot(grads, nodes, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Add { a, b } => {
                accumulate(grads, nodes, *a, |_| 1.0, g);
                accumulate(grads, nodes, *b, |_| 1.0, g);
            }
            Sub { a, b } => {
                accumulate(grads, nodes, *a, |_| 1.0, g);
                accumulate(grads, nodes, *b, |_| -1.0, g);
            }
            Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                accumulate(grads, nodes, *a, |i| bv[i], g);
                accumulate(grads, nodes, *b, |i| av[i], g);
            }
            Div { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                accumulate(grads, nodes, *a, |i| 1.0 / bv[i], g);
                accumulate(grads, nodes, *b, |i| -av[i] / (bv[i] * bv[i]), g);
            }
            Min { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                accumulate(grads, nodes, *a, |i| if av[i] <= bv[i] { 1.0 } else { 0.0 }, g);
                accumulate(grads, nodes, *b, |i| if av[i] <= bv[i] { 0.0 } else { 1.0 }, g);
            }
            Max { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                accumulate(grads, nodes, *a, |i| if av[i] >= bv[i] { 1.0 } else { 0.0 }, g);
                accumulate(grads, nodes, *b, |i| if av[i] >= bv[i] { 0.0 } else { 1.0 }, g);
            }
            AddRow { a, bias } => {
                accumulate(grads, nodes, *a, |_| 1.0, g);
                if let Some(gb) = slot(grads, nodes, *bias) {
                    let c = gb.len();
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % c] += gv;
                    }
                }
            }
            MulScalar { a, s } => {
                let sv = val(*s)[0];
                accumulate(grads, nodes, *a, |_| sv, g);
                if let Some(gs) = slot(grads, nodes, *s) {
                    gs[0] += g.iter().zip(val(*a)).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            Scale { a, k } => accumulate(grads, nodes, *a, |_| *k, g),
            Identity { a } => accumulate(grads, nodes, *a, |_| 1.0, g),
            Exp { a } => {
                let y = out.data();
                accumulate(grads, nodes, *a, |i| y[i], g);
            }
            Log { a } => {
                let x = val(*a);
                accumulate(grads, nodes, *a, |i| 1.0 / x[i], g);
            }
            Sqrt { a } => {
                let y = out.data();
                accumulate(grads, nodes, *a, |i| if y[i] > 0.0 { 0.5 / y[i] } else { 0.0 }, g);
            }
            Abs { a } => {
                let x = val(*a);
                accumulate(grads, nodes, *a, |i| if x[i] > 0.0 { 1.0 } else if x[i] < 0.0 { -1.0 } else { 0.0 }, g);
            }
            Sigmoid { a } => {
                let y = out.data();
                accumulate(grads, nodes, *a, |i| y[i] * (1.0 - y[i]), g);
            }
            Tanh { a } => {
                let y = out.data();
                accumulate(grads, nodes, *a, |i| 1.0 - y[i] * y[i], g);
            }
            Gelu { a } => {
                let x = val(*a);
                accumulate(grads, nodes, *a, |i| gelu_grad(x[i]), g);
            }
            Relu { a } => {
                let x = val(*a);
                accumulate(grads, nodes, *a, |i| if x[i] > 0.0 { 1.0 } else { 0.0 }, g);
            }
            SumAll { a } => accumulate(grads, nodes, *a, |_| g[0], &[]),
            MeanAll { a } => {
                let n = nodes[*a].value.numel() as f64;
                accumulate(grads, nodes, *a, |_| g[0] / n, &[]);
            }
            SumRows { a } => {
                let c = nodes[*a].value.cols();
                if let Some(ga) = slot(grads, nodes, *a) {
                    for (i, v) in ga.iter_mut().enumerate() {
                        *v += g[i / c];
                    }
                }
            }
            ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p].value.numel();
                    if let Some(gp) = slot(grads, nodes, p) {
                        for (x, y) in gp.iter_mut().zip(&g[off..off + n]) {
                            *x += y;
                        }
                    }
                    off += n;
                }
            }
            ConcatCols { parts } => {
                let total = out.cols();
                let mut off = 0;
                for &p in parts {
                    let (r, c) = (nodes[p].value.rows(), nodes[p].value.cols());
                    if let Some(gp) = slot(grads, nodes, p) {
                        for i in 0..r {
                            for j in 0..c {
                                gp[i * c + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            SliceCols { a, start } => {
                let c = nodes[*a].value.cols();
                let (r, w) = (out.rows(), out.cols());
                if let Some(ga) = slot(grads, nodes, *a) {
                    for i in 0..r {
                        for j in 0..w {
                            ga[i * c + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            GatherRows { a, idx } => {
                let c = nodes[*a].value.cols();
                if let Some(ga) = slot(grads, nodes, *a) {
                    for (j, &src) in idx.iter().enumerate() {
                        for t in 0..c {
                            ga[src * c + t] += g[j * c + t];
                        }
                    }
                }
            }
            Pick { a, idx } => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    for (j, &src) in idx.iter().enumerate() {
                        ga[src] += g[j];
                    }
                }
            }
            LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = nodes[*x].value.cols();
                let r = xhat.len() / c;
                let gam = val(*gamma);
                if let Some(gx) = slot(grads, nodes, *x) {
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let d = g[i * c + j] * gam[j];
                            m1 += d;
                            m2 += d * xhat[i * c + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for (j, gxv) in gx[row].iter_mut().enumerate() {
                            let d = g[i * c + j] * gam[j];
                            *gxv += rstd[i] * (d - m1 - xhat[i * c + j] * m2);
                        }
                    }
                }
                if let Some(gg) = slot(grads, nodes, *gamma) {
                    for (i, gv) in g.iter().enumerate() {
                        gg[i % c] += gv * xhat[i];
                    }
                }
                if let Some(gb) = slot(grads, nodes, *beta) {
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % c] += gv;
                    }
                }
            }
            Softmax { a, axis } => {
                let y = out.data();
                let lanes = softmax_lanes(out.shape(), *axis);
                if let Some(ga) = slot(grads, nodes, *a) {
                    for (off, len, stride) in lanes {
                        let dot: f64 = (0..len).map(|t| y[off + t * stride] * g[off + t * stride]).sum();
                        for t in 0..len {
                            let i = off + t * stride;
                            ga[i] += y[i] * (g[i] - dot);
                        }
                    }
                }
            }
            LogSoftmax { a } => {
                let y = out.data();
                let c = out.cols();
                if let Some(ga) = slot(grads, nodes, *a) {
                    for i in 0..out.rows() {
                        let s: f64 = g[i * c..(i + 1) * c].iter().sum();
                        for j in 0..c {
                            ga[i * c + j] += g[i * c + j] - y[i * c + j].exp() * s;
                        }
                    }
                }
            }
            CrossEntropy { a, targets, probs } => {
                let c = nodes[*a].value.cols();
                let r = targets.len() as f64;
                if let Some(ga) = slot(grads, nodes, *a) {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            ga[i * c + j] += g[0] / r * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
            L2Normalize { a, norms } => {
                let y = out.data();
                let c = out.cols();
                if let Some(ga) = slot(grads, nodes, *a) {
                    for (i, &n) in norms.iter().enumerate() {
                        let s = i * c..(i + 1) * c;
                        let denom = n.max(NORM_EPS);
                        let dot: f64 = if n > NORM_EPS { y[s.clone()].iter().zip(&g[s.clone()]).map(|(p, q)| p * q).sum() } else { 0.0 };
                        for j in s {
                            ga[j] += (g[j] - y[j] * dot) / denom;
                        }
                    }
                }
            }
            CosineRows { a, b, na, nb } => {
                let c = nodes[*a].value.cols();
                let (av, bv) = (val(*a), val(*b));
                let cs = out.data();
                for (x, y, nx, ny) in [(*a, bv, na, nb), (*b, av, nb, na)] {
                    let xv = val(x);
                    if let Some(gx) = slot(grads, nodes, x) {
                        for i in 0..na.len() {
                            let (dx, dy) = (nx[i].max(NORM_EPS), ny[i].max(NORM_EPS));
                            let radial = if nx[i] > NORM_EPS { cs[i] / (dx * nx[i]) } else { 0.0 };
                            for j in i * c..(i + 1) * c {
                                gx[j] += g[i] * (y[j] / (dx * dy) - radial * xv[j]);
                            }
                        }
                    }
                }
            }
            Attention { q, k, v, bias, seq, heads, probs } => {
                attention_backward(g, nodes, grads, (*q, *k, *v, *bias), *seq, *heads, probs)
            }
        }
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], i: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[i].requires_grad {
        return None;
    }
    Some(grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.numel()]))
}

/// `grad[i] += g[i] * d(i)`; an empty `g` means the upstream gradient is
/// folded into `d` already.
fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], i: usize, d: impl Fn(usize) -> f64, g: &[f64]) {
    if let Some(gi) = slot(grads, nodes, i) {
        if g.is_empty() {
            for (j, v) in gi.iter_mut().enumerate() {
                *v += d(j);
            }
        } else {
            for (j, v) in gi.iter_mut().enumerate() {
                *v += g[j] * d(j);
            }
        }
    }
}

const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (s * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let t = (s * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * s * (1.0 + 3.0 * GELU_C * x * x)
}

/// (offset, length, stride) of every lane a softmax normalizes over.
fn softmax_lanes(shape: &[usize], axis: usize) -> Vec<(usize, usize, usize)> {
    if shape.len() == 1 {
        return vec![(0, shape[0], 1)];
    }
    let (r, c) = (shape[0], shape[1]);
    if axis == 1 {
        (0..r).map(|i| (i * c, c, 1)).collect()
    } else {
        (0..c).map(|j| (j, r, c)).collect()
    }
}

fn raw(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor { shape, data, requires_grad: false }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}

fn invalid(op: &'static str, message: impl Into<String>) -> TensorError {
    TensorError::Invalid { op, message: message.into() }
}

fn need_matrix(op: &'static str, t: &Tensor) -> TResult<()> {
    if t.shape().len() == 2 {
        Ok(())
    } else {
        Err(invalid(op, format!("expected a matrix, got shape {:?}", t.shape())))
    }
}

impl<'t> Var<'t> {
    fn same_tape(&self, other: &Var<'t>, op: &'static str) -> TResult<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(invalid(op, "operands recorded on different tapes"))
        }
    }

    fn unary(self, name: &'static str, f: impl FnOnce(&Tensor) -> TResult<(Tensor, Op)>) -> TResult<Var<'t>> {
        let (t, op) = self.tape.with_values(|n| f(&n[self.idx].value))?;
        self.tape.push(name, t, op)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl FnOnce(&Tensor, &Tensor) -> TResult<(Tensor, Op)>,
    ) -> TResult<Var<'t>> {
        self.same_tape(&other, name)?;
        let (t, op) = self.tape.with_values(|n| f(&n[self.idx].value, &n[other.idx].value))?;
        self.tape.push(name, t, op)
    }

    fn map(self, name: &'static str, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> TResult<Var<'t>> {
        let a = self.idx;
        self.unary(name, |x| Ok((raw(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()), op(a))))
    }

    fn zip(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> TResult<Var<'t>> {
        let (a, b) = (self.idx, other.idx);
        self.binary(other, name, |x, y| {
            if x.shape() != y.shape() {
                return Err(mismatch(name, x, y));
            }
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
            Ok((raw(x.shape().to_vec(), data), op(a, b)))
        })
    }

    pub fn matmul(self, other: Var<'t>) -> TResult<Var<'t>> {
        let (a, b) = (self.idx, other.idx);
        self.binary(other, "matmul", |x, y| Ok((x.matmul(y)?, Op::MatMul { a, b })))
    }

    pub fn transpose(self) -> TResult<Var<'t>> {
        let a = self.idx;
        self.unary("transpose", |x| {
            need_matrix("transpose", x)?;
            Ok((x.transpose(), Op::Transpose { a }))
        })
    }

    pub fn add(self, other: Var<'t>) -> TResult<Var<'t>> {
        self.zip(other, "add", |p, q| p + q, |a, b| Op::Add { a, b })
    }

    pub fn sub(self, other: Var<'t>) -> TResult<Var<'t>> {
        self.zip(other, "sub", |p, q| p - q, |a, b| Op::Sub { a, b })
    }

    pub fn mul(self, other: Var<'t>) -> TResult<Var<'t>> {
        self.zip(other, "mul", |p, q| p * q, |a, b| Op::Mul { a, b })
    }

    pub fn div(self, other: Var<'t>) -> TResult<Var<'t>> {
        self.zip(other, "div", |p, q| p / q, |a, b| Op::Div { a, b })
    }

    pub fn minimum(self, other: Var<'t>) -> TResult<Var<'t>> {
        self.zip(other, "minimum", |p, q| if p <= q { p } else { q }, |a, b| Op::Min { a, b })
    }

    pub fn maximum(self, other: Var<'t>) -> TResult<Var<'t>> {
        self.zip(other, "maximum", |p, q| if p >= q { p } else { q }, |a, b| Op::Max { a, b })
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(self, bias: Var<'t>) -> TResult<Var<'t>> {
        let (a, b) = (self.idx, bias.idx);
        self.binary(bias, "add_row", |x, y| {
            if y.numel() != x.cols() {
                return Err(mismatch("add_row", x, y));
            }
            let c = x.cols();
            let data = x.data().iter().enumerate().map(|(i, v)| v + y.data()[i % c]).collect();
            Ok((raw(x.shape().to_vec(), data), Op::AddRow { a, bias: b }))
        })
    }

    /// Multiplies by a one-element variable.
    pub fn mul_scalar(self, s: Var<'t>) -> TResult<Var<'t>> {
        let (a, b) = (self.idx, s.idx);
        self.binary(s, "mul_scalar", |x, y| {
            if y.numel() != 1 {
                return Err(mismatch("mul_scalar", x, y));
            }
            let k = y.data()[0];
            Ok((raw(x.shape().to_vec(), x.data().iter().map(|v| v * k).collect()), Op::MulScalar { a, s: b }))
        })
    }

    pub fn scale(self, k: f64) -> TResult<Var<'t>> {
        self.map("scale", |v| v * k, |a| Op::Scale { a, k })
    }

    pub fn neg(self) -> TResult<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_const(self, c: f64) -> TResult<Var<'t>> {
        self.map("add_const", |v| v + c, |a| Op::Identity { a })
    }

    pub fn reshape(self, shape: &[usize]) -> TResult<Var<'t>> {
        let a = self.idx;
        self.unary("reshape", |x| Ok((x.clone().with_grad(false).reshape(shape)?, Op::Identity { a })))
    }

    pub fn exp(self) -> TResult<Var<'t>> {
        self.map("exp", f64::exp, |a| Op::Exp { a })
    }

    pub fn log(self) -> TResult<Var<'t>> {
        self.map("log", f64::ln, |a| Op::Log { a })
    }

    pub fn sqrt(self) -> TResult<Var<'t>> {
        self.map("sqrt", f64::sqrt, |a| Op::Sqrt { a })
    }

    pub fn abs(self) -> TResult<Var<'t>> {
        self.map("abs", f64::abs, |a| Op::Abs { a })
    }

    pub fn sigmoid(self) -> TResult<Var<'t>> {
        self.map("sigmoid", |v| 1.0 / (1.0 + (-v).exp()), |a| Op::Sigmoid { a })
    }

    pub fn tanh(self) -> TResult<Var<'t>> {
        self.map("tanh", f64::tanh, |a| Op::Tanh { a })
    }

    /// Tanh approximation of GELU.
    pub fn gelu(self) -> TResult<Var<'t>> {
        self.map("gelu", gelu, |a| Op::Gelu { a })
    }

    pub fn relu(self) -> TResult<Var<'t>> {
        self.map("relu", |v| v.max(0.0), |a| Op::Relu { a })
    }

    pub fn sum(self) -> TResult<Var<'t>> {
        let a = self.idx;
        self.unary("sum", |x| Ok((raw(vec![1], vec![x.data().iter().sum()]), Op::SumAll { a })))
    }

    pub fn mean(self) -> TResult<Var<'t>> {
        let a = self.idx;
        self.unary("mean", |x| {
            let m = x.data().iter().sum::<f64>() / x.numel() as f64;
            Ok((raw(vec![1], vec![m]), Op::MeanAll { a }))
        })
    }

    /// Sum over columns, one value per row.
    pub fn sum_rows(self) -> TResult<Var<'t>> {
        let a = self.idx;
        self.unary("sum_rows", |x| {
            let data = (0..x.rows()).map(|i| x.row(i).iter().sum()).collect();
            Ok((raw(vec![x.rows()], data), Op::SumRows { a }))
        })
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> TResult<Var<'t>> {
        let first = *parts.first().ok_or_else(|| invalid("concat_rows", "no inputs"))?;
        for p in parts {
            first.same_tape(p, "concat_rows")?;
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        let t = first.tape.with_values(|n| {
            let c = n[idx[0]].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for &i in &idx {
                let v = &n[i].value;
                if v.cols() != c {
                    return Err(mismatch("concat_rows", &n[idx[0]].value, v));
                }
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            Ok(raw(vec![rows, c], data))
        })?;
        first.tape.push("concat_rows", t, Op::ConcatRows { parts: idx })
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> TResult<Var<'t>> {
        let first = *parts.first().ok_or_else(|| invalid("concat_cols", "no inputs"))?;
        for p in parts {
            first.same_tape(p, "concat_cols")?;
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        let t = first.tape.with_values(|n| {
            let r = n[idx[0]].value.rows();
            let mut total = 0;
            for &i in &idx {
                if n[i].value.rows() != r {
                    return Err(mismatch("concat_cols", &n[idx[0]].value, &n[i].value));
                }
                total += n[i].value.cols();
            }
            let mut data = Vec::with_capacity(r * total);
            for row in 0..r {
                for &i in &idx {
                    data.extend_from_slice(n[i].value.row(row));
                }
            }
            Ok(raw(vec![r, total], data))
        })?;
        first.tape.push("concat_cols", t, Op::ConcatCols { parts: idx })
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(self, start: usize, end: usize) -> TResult<Var<'t>> {
        let a = self.idx;
        self.unary("slice_cols", |x| {
            if start >= end || end > x.cols() {
                return Err(invalid("slice_cols", format!("range {start}..{end} outside {} columns", x.cols())));
            }
            let mut data = Vec::with_capacity(x.rows() * (end - start));
            for i in 0..x.rows() {
                data.extend_from_slice(&x.row(i)[start..end]);
            }
            Ok((raw(vec![x.rows(), end - start], data), Op::SliceCols { a, start }))
        })
    }

    /// Rows `idx[0], idx[1], ...`; indices may repeat.
    pub fn gather_rows(self, idx: &[usize]) -> TResult<Var<'t>> {
        let a = self.idx;
        self.unary("gather_rows", |x| {
            if idx.is_empty() || idx.iter().any(|&i| i >= x.rows()) {
                return Err(invalid("gather_rows", format!("indices out of range for {} rows", x.rows())));
            }
            let mut data = Vec::with_capacity(idx.len() * x.cols());
            for &i in idx {
                data.extend_from_slice(x.row(i));
            }
            Ok((raw(vec![idx.len(), x.cols()], data), Op::GatherRows { a, idx: idx.to_vec() }))
        })
    }

    /// Elements at flat positions `idx`, as a vector.
    pub fn pick(self, idx: &[usize]) -> TResult<Var<'t>> {
        let a = self.idx;
        self.unary("pick", |x| {
            if idx.is_empty() || idx.iter().any(|&i| i >= x.numel()) {
                return Err(invalid("pick", "indices out of range"));
            }
            Ok((raw(vec![idx.len()], idx.iter().map(|&i| x.data()[i]).collect()), Op::Pick { a, idx: idx.to_vec() }))
        })
    }

    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>) -> TResult<Var<'t>> {
        self.same_tape(&gamma, "layer_norm")?;
        self.same_tape(&beta, "layer_norm")?;
        let (x, gi, bi) = (self.idx, gamma.idx, beta.idx);
        let (t, op) = self.tape.with_values(|n| {
            let (xv, gv, bv) = (&n[x].value, &n[gi].value, &n[bi].value);
            let c = xv.cols();
            if gv.numel() != c || bv.numel() != c {
                return Err(mismatch("layer_norm", xv, gv));
            }
            let mut xhat = vec![0.0; xv.numel()];
            let mut rstd = Vec::with_capacity(xv.rows());
            let mut out = vec![0.0; xv.numel()];
            for i in 0..xv.rows() {
                let row = xv.row(i);
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let rs = 1.0 / (var + LN_EPS).sqrt();
                rstd.push(rs);
                for j in 0..c {
                    let h = (row[j] - mean) * rs;
                    xhat[i * c + j] = h;
                    out[i * c + j] = h * gv.data()[j] + bv.data()[j];
                }
            }
            Ok((raw(xv.shape().to_vec(), out), Op::LayerNorm { x, gamma: gi, beta: bi, xhat, rstd }))
        })?;
        self.tape.push("layer_norm", t, op)
    }

    /// Softmax along `axis` (0 or 1 for matrices, 0 for vectors).
    pub fn softmax(self, axis: usize) -> TResult<Var<'t>> {
        let a = self.idx;
        self.unary("softmax", |x| {
            if axis >= x.shape().len() || x.shape().len() > 2 {
                return Err(invalid("softmax", format!("axis {axis} for shape {:?}", x.shape())));
            }
            let mut out = vec![0.0; x.numel()];
            for (off, len, stride) in softmax_lanes(x.shape(), axis) {
                let m = (0..len).map(|t| x.data()[off + t * stride]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for t in 0..len {
                    let e = (x.data()[off + t * stride] - m).exp();
                    out[off + t * stride] = e;
                    s += e;
                }
                for t in 0..len {
                    out[off + t * stride] /= s;
                }
            }
            Ok((raw(x.shape().to_vec(), out), Op::Softmax { a, axis }))
        })
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(self) -> TResult<Var<'t>> {
        let a = self.idx;
        self.unary("log_softmax", |x| {
            let c = x.cols();
            let mut out = vec![0.0; x.numel()];
            for i in 0..x.rows() {
                let lse = logsumexp(x.row(i));
                for j in 0..c {
                    out[i * c + j] = x.data()[i * c + j] - lse;
                }
            }
            Ok((raw(x.shape().to_vec(), out), Op::LogSoftmax { a }))
        })
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy(self, targets: &[usize]) -> TResult<Var<'t>> {
        let a = self.idx;
        self.unary("cross_entropy", |x| {
            let c = x.cols();
            if targets.len() != x.rows() || targets.iter().any(|&t| t >= c) {
                return Err(invalid("cross_entropy", format!("{} targets for {} rows", targets.len(), x.rows())));
            }
            let mut probs = vec![0.0; x.numel()];
            let mut loss = 0.0;
            for (i, &t) in targets.iter().enumerate() {
                let lse = logsumexp(x.row(i));
                for j in 0..c {
                    probs[i * c + j] = (x.data()[i * c + j] - lse).exp();
                }
                loss += lse - x.data()[i * c + t];
            }
            let v = loss / targets.len() as f64;
            Ok((raw(vec![1], vec![v]), Op::CrossEntropy { a, targets: targets.to_vec(), probs }))
        })
    }

    /// Divides each row by `max(||row||, 1e-8)`.
    pub fn l2_normalize(self) -> TResult<Var<'t>> {
        let a = self.idx;
        self.unary("l2_normalize", |x| {
            let c = x.cols();
            let norms: Vec<f64> = (0..x.rows()).map(|i| norm(x.row(i))).collect();
            let data = x.data().iter().enumerate().map(|(i, v)| v / norms[i / c].max(NORM_EPS)).collect();
            Ok((raw(x.shape().to_vec(), data), Op::L2Normalize { a, norms }))
        })
    }

    /// Cosine similarity of matching rows, `a.b / (max(|a|, eps) max(|b|, eps))`.
    pub fn cosine_rows(self, other: Var<'t>) -> TResult<Var<'t>> {
        let (a, b) = (self.idx, other.idx);
        self.binary(other, "cosine_rows", |x, y| {
            if x.shape() != y.shape() {
                return Err(mismatch("cosine_rows", x, y));
            }
            let na: Vec<f64> = (0..x.rows()).map(|i| norm(x.row(i))).collect();
            let nb: Vec<f64> = (0..y.rows()).map(|i| norm(y.row(i))).collect();
            let data = (0..x.rows())
                .map(|i| dot(x.row(i), y.row(i)) / (na[i].max(NORM_EPS) * nb[i].max(NORM_EPS)))
                .collect();
            Ok((raw(vec![x.rows()], data), Op::CosineRows { a, b, na, nb }))
        })
    }

    /// Multi-head scaled dot-product attention over `rows / seq` independent
    /// sequences. `key_mask[r]` is false for padded positions, which receive
    /// zero attention weight.
    pub fn attention(
        self,
        k: Var<'t>,
        v: Var<'t>,
        seq: usize,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> TResult<Var<'t>> {
        self.attend(k, v, None, seq, heads, key_mask)
    }

    /// Attention whose logits gain `key_bias[r]` for every query looking at
    /// key row `r`. The bias holds one entry per row and is differentiable.
    pub fn attention_biased(self, k: Var<'t>, v: Var<'t>, key_bias: Var<'t>, seq: usize, heads: usize) -> TResult<Var<'t>> {
        self.same_tape(&key_bias, "attention")?;
        self.attend(k, v, Some(key_bias), seq, heads, None)
    }

    fn attend(
        self,
        k: Var<'t>,
        v: Var<'t>,
        key_bias: Option<Var<'t>>,
        seq: usize,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> TResult<Var<'t>> {
        self.same_tape(&k, "attention")?;
        self.same_tape(&v, "attention")?;
        let (qi, ki, vi, bi) = (self.idx, k.idx, v.idx, key_bias.map(|b| b.idx));
        let (t, op) = self.tape.with_values(|n| {
            let (qv, kv, vv) = (&n[qi].value, &n[ki].value, &n[vi].value);
            if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
                return Err(mismatch("attention", qv, kv));
            }
            need_matrix("attention", qv)?;
            let (rows, d) = (qv.rows(), qv.cols());
            if seq == 0 || rows % seq != 0 || heads == 0 || d % heads != 0 {
                return Err(invalid("attention", format!("{rows}x{d} with seq {seq} and {heads} heads")));
            }
            if key_mask.is_some_and(|m| m.len() != rows) {
                return Err(invalid("attention", "mask length differs from row count"));
            }
            let bias = bi.map(|i| n[i].value.data());
            if bias.is_some_and(|b| b.len() != rows) {
                return Err(invalid("attention", "key bias length differs from row count"));
            }
            let (q, kd, vd) = (qv.data(), kv.data(), vv.data());
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let batches = rows / seq;
            let mut probs = vec![0.0; batches * heads * seq * seq];
            let mut out = vec![0.0; rows * d];
            let mut logits = vec![0.0; seq];
            for b in 0..batches {
                let base = b * seq;
                if let Some(m) = key_mask {
                    if !m[base..base + seq].iter().any(|&x| x) {
                        return Err(invalid("attention", "every key of a sequence is masked"));
                    }
                }
                for h in 0..heads {
                    let c0 = h * dh;
                    for i in 0..seq {
                        let qrow = &q[(base + i) * d + c0..(base + i) * d + c0 + dh];
                        let mut mx = f64::NEG_INFINITY;
                        for j in 0..seq {
                            if key_mask.is_some_and(|m| !m[base + j]) {
                                logits[j] = f64::NEG_INFINITY;
                                continue;
                            }
                            let s = dot(qrow, &kd[(base + j) * d + c0..(base + j) * d + c0 + dh]) * scale
                                + bias.map_or(0.0, |b| b[base + j]);
                            logits[j] = s;
                            mx = mx.max(s);
                        }
                        let p = &mut probs[((b * heads + h) * seq + i) * seq..((b * heads + h) * seq + i + 1) * seq];
                        let mut z = 0.0;
                        for j in 0..seq {
                            p[j] = if logits[j] == f64::NEG_INFINITY { 0.0 } else { (logits[j] - mx).exp() };
                            z += p[j];
                        }
                        let orow = &mut out[(base + i) * d + c0..(base + i) * d + c0 + dh];
                        for j in 0..seq {
                            p[j] /= z;
                            if p[j] == 0.0 {
                                continue;
                            }
                            let vrow = &vd[(base + j) * d + c0..(base + j) * d + c0 + dh];
                            for (o, x) in orow.iter_mut().zip(vrow) {
                                *o += p[j] * x;
                            }
                        }
                    }
                }
            }
            Ok((raw(vec![rows, d], out), Op::Attention { q: qi, k: ki, v: vi, bias: bi, seq, heads, probs }))
        })?;
        self.tape.push("attention", t, op)
    }
}

fn attention_backward(
    g: &[f64],
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    (qi, ki, vi, bi): (usize, usize, usize, Option<usize>),
    seq: usize,
    heads: usize,
    probs: &[f64],
) {
    let (rows, d) = (nodes[qi].value.rows(), nodes[qi].value.cols());
    let (q, k, v) = (nodes[qi].value.data(), nodes[ki].value.data(), nodes[vi].value.data());
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; rows * d];
    let mut dk = vec![0.0; rows * d];
    let mut dv = vec![0.0; rows * d];
    let mut db = vec![0.0; rows];
    let mut dp = vec![0.0; seq];
    for b in 0..rows / seq {
        let base = b * seq;
        for h in 0..heads {
            let c0 = h * dh;
            let span = |r: usize| (base + r) * d + c0..(base + r) * d + c0 + dh;
            for i in 0..seq {
                let p = &probs[((b * heads + h) * seq + i) * seq..((b * heads + h) * seq + i + 1) * seq];
                let go = &g[span(i)];
                let mut acc = 0.0;
                for j in 0..seq {
                    dp[j] = dot(go, &v[span(j)]);
                    acc += dp[j] * p[j];
                    if p[j] != 0.0 {
                        for (x, y) in dv[span(j)].iter_mut().zip(go) {
                            *x += p[j] * y;
                        }
                    }
                }
                for j in 0..seq {
                    let dl = p[j] * (dp[j] - acc);
                    if dl == 0.0 {
                        continue;
                    }
                    db[base + j] += dl;
                    let ds = dl * scale;
                    for t in 0..dh {
                        dq[(base + i) * d + c0 + t] += ds * k[(base + j) * d + c0 + t];
                        dk[(base + j) * d + c0 + t] += ds * q[(base + i) * d + c0 + t];
                    }
                }
            }
        }
    }
    for (idx, src) in [(qi, dq), (ki, dk), (vi, dv)].into_iter().chain(bi.map(|b| (b, db))) {
        if let Some(gx) = slot(grads, nodes, idx) {
            for (x, y) in gx.iter_mut().zip(src) {
                *x += y;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_rows_hand_values() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 3, vec![0.0, 1.0, 2.0]).unwrap());
        let y = x.softmax(1).unwrap().value();
        // e^0, e^1, e^2 over their sum 11.107337927389695
        assert!(close(y.data(), &[0.09003057317038046, 0.24472847105479764, 0.6652409557748219], 1e-15));
    }

    #[test]
    fn layer_norm_hand_values() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap());
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = x.layer_norm(g, b).unwrap().value();
        // variance 1, so (x - 2) / sqrt(1 + 1e-5)
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!(close(y.data(), &[-s, s], 1e-15));
    }

    #[test]
    fn product_rule_on_shared_input() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![3.0, -2.0]).unwrap().with_grad(true));
        let loss = x.mul(x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[6.0, -4.0]);
    }

    #[test]
    fn frozen_and_constant_inputs_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0).with_grad(true));
        let c = tape.constant(Tensor::scalar(5.0));
        let loss = x.mul(c).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[5.0]);
        assert!(g.wrt(c).is_none());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-1.0));
        assert!(matches!(x.log(), Err(TensorError::NonFinite { op: "log" })));
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let tape = Tape::new();
        let q = tape.leaf(Tensor::from_fn(&[3, 2], |i| i as f64 * 0.3));
        let v = tape.leaf(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 100.0, 100.0]).unwrap());
        let out = q.attention(q, v, 3, 1, Some(&[true, true, false])).unwrap().value();
        for r in 0..3 {
            assert!(out.row(r).iter().all(|&x| x < 5.0));
        }
    }

    #[test]
    fn cosine_of_parallel_rows_is_one() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(1, 3, vec![1.0, 2.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::matrix(1, 3, vec![2.0, 4.0, 4.0]).unwrap());
        assert!((a.cosine_rows(b).unwrap().item() - 1.0).abs() < 1e-15);
    }
}
