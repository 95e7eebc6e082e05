use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::InitGains;
use crate::tensor::{ParamId, ParamStore, TResult, Tape, Tensor, Var};

pub(crate) fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// `x W + b` with `W = W0 + A B` once a low-rank adapter is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w0: ParamId,
    pub bias: Option<ParamId>,
    pub lora: Option<(ParamId, ParamId)>,
    pub name: String,
}

impl Linear {
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        (fan_in, fan_out): (usize, usize),
        bias: bool,
        gain: f64,
    ) -> TResult<Self> {
        let w0 = store.add(format!("{name}.w0"), normal(rng, &[fan_in, fan_out], gain / (fan_in as f64).sqrt()), true)?;
        let bias = if bias { Some(store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), true)?) } else { None };
        Ok(Linear { w0, bias, lora: None, name: name.to_string() })
    }

    pub fn shape(&self, store: &ParamStore) -> (usize, usize) {
        let s = store.value(self.w0).shape();
        (s[0], s[1])
    }

    /// Attaches `A` (`u x r`, normal with variance `1/u`) and a zero `B`.
    pub(crate) fn attach_lora(&mut self, store: &mut ParamStore, rng: &mut impl Rng, rank: usize) -> TResult<()> {
        let (u, v) = self.shape(store);
        let a = store.add(format!("{}.lora_a", self.name), normal(rng, &[u, rank], 1.0 / (u as f64).sqrt()), true)?;
        let b = store.add(format!("{}.lora_b", self.name), Tensor::zeros(&[rank, v]), true)?;
        self.lora = Some((a, b));
        Ok(())
    }

    /// Frozen copy of the base weight and bias under a new name.
    pub(crate) fn copy_frozen(&self, store: &mut ParamStore, name: &str) -> TResult<Linear> {
        let w = store.value(self.w0).clone();
        let w0 = store.add(format!("{name}.w0"), w, false)?;
        let bias = match self.bias {
            Some(b) => {
                let t = store.value(b).clone();
                Some(store.add(format!("{name}.bias"), t, false)?)
            }
            None => None,
        };
        Ok(Linear { w0, bias, lora: None, name: name.to_string() })
    }

    pub fn weight<'t>(&self, tape: &'t Tape, store: &ParamStore) -> TResult<Var<'t>> {
        let w0 = tape.param(store, self.w0);
        match self.lora {
            Some((a, b)) => w0.add(tape.param(store, a).matmul(tape.param(store, b))?),
            None => Ok(w0),
        }
    }

    /// Effective weight as a plain tensor.
    pub fn effective_weight(&self, store: &ParamStore) -> TResult<Tensor> {
        let tape = Tape::no_grad();
        Ok(self.weight(&tape, store)?.value())
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> TResult<Var<'t>> {
        let y = x.matmul(self.weight(tape, store)?)?;
        match self.bias {
            Some(b) => y.add_row(tape.param(store, b)),
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.w0];
        v.extend(self.bias);
        if let Some((a, b)) = self.lora {
            v.extend([a, b]);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl Norm {
    pub(crate) fn new(store: &mut ParamStore, name: &str, d: usize) -> TResult<Self> {
        Ok(Norm {
            gain: store.add(format!("{name}.g"), Tensor::full(&[d], 1.0), true)?,
            shift: store.add(format!("{name}.b"), Tensor::zeros(&[d]), true)?,
        })
    }

    pub(crate) fn copy_frozen(&self, store: &mut ParamStore, name: &str) -> TResult<Self> {
        let (g, b) = (store.value(self.gain).clone(), store.value(self.shift).clone());
        Ok(Norm { gain: store.add(format!("{name}.g"), g, false)?, shift: store.add(format!("{name}.b"), b, false)? })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> TResult<Var<'t>> {
        x.layer_norm(tape.param(store, self.gain), tape.param(store, self.shift))
    }
}

/// Matrices and norms of one pre-norm transformer layer (one track).
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        hidden: usize,
        layers: usize,
        g: &InitGains,
    ) -> TResult<Self> {
        let out_gain = g.residual / (2.0 * layers as f64).sqrt();
        Ok(Block {
            ln1: Norm::new(store, &format!("{name}.ln1"), d)?,
            q: Linear::new(store, rng, &format!("{name}.q"), (d, d), true, g.attn)?,
            k: Linear::new(store, rng, &format!("{name}.k"), (d, d), true, g.attn)?,
            v: Linear::new(store, rng, &format!("{name}.v"), (d, d), true, 1.0)?,
            o: Linear::new(store, rng, &format!("{name}.o"), (d, d), true, out_gain)?,
            ln2: Norm::new(store, &format!("{name}.ln2"), d)?,
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), (d, hidden), true, g.mlp)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), (hidden, d), true, out_gain)?,
        })
    }

    pub(crate) fn linears_mut(&mut self) -> [&mut Linear; 6] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o, &mut self.fc1, &mut self.fc2]
    }

    pub fn linears(&self) -> [&Linear; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.fc1, &self.fc2]
    }

    pub(crate) fn copy_frozen(&self, store: &mut ParamStore, name: &str) -> TResult<Block> {
        Ok(Block {
            ln1: self.ln1.copy_frozen(store, &format!("{name}.ln1"))?,
            q: self.q.copy_frozen(store, &format!("{name}.q"))?,
            k: self.k.copy_frozen(store, &format!("{name}.k"))?,
            v: self.v.copy_frozen(store, &format!("{name}.v"))?,
            o: self.o.copy_frozen(store, &format!("{name}.o"))?,
            ln2: self.ln2.copy_frozen(store, &format!("{name}.ln2"))?,
            fc1: self.fc1.copy_frozen(store, &format!("{name}.fc1"))?,
            fc2: self.fc2.copy_frozen(store, &format!("{name}.fc2"))?,
        })
    }

    pub(crate) fn attach_lora(&mut self, store: &mut ParamStore, rng: &mut impl Rng, rank: usize) -> TResult<()> {
        for l in self.linears_mut() {
            l.attach_lora(store, rng, rank)?;
        }
        Ok(())
    }

    pub(crate) fn qkv<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> TResult<[Var<'t>; 3]> {
        let h = self.ln1.forward(tape, store, x)?;
        Ok([self.q.forward(tape, store, h)?, self.k.forward(tape, store, h)?, self.v.forward(tape, store, h)?])
    }

    /// Residual update from the attention output, then the MLP residual.
    pub(crate) fn finish<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>, attn: Var<'t>) -> TResult<Var<'t>> {
        let x = x.add(self.o.forward(tape, store, attn)?)?;
        let h = self.ln2.forward(tape, store, x)?;
        let m = self.fc2.forward(tape, store, self.fc1.forward(tape, store, h)?.gelu()?)?;
        x.add(m)
    }

    pub(crate) fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        seq: usize,
        heads: usize,
        mask: Option<&[bool]>,
    ) -> TResult<Var<'t>> {
        let [q, k, v] = self.qkv(tape, store, x)?;
        let a = q.attention(k, v, seq, heads, mask)?;
        self.finish(tape, store, x, a)
    }
}

/// Two-hidden-layer ReLU MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffn {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

impl Ffn {
    pub(crate) fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, out: usize) -> TResult<Self> {
        Ok(Ffn {
            l1: Linear::new(store, rng, &format!("{name}.l1"), (d, d), true, 2f64.sqrt())?,
            l2: Linear::new(store, rng, &format!("{name}.l2"), (d, d), true, 2f64.sqrt())?,
            l3: Linear::new(store, rng, &format!("{name}.l3"), (d, out), true, 1.0)?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> TResult<Var<'t>> {
        let h = self.l1.forward(tape, store, x)?.relu()?;
        let h = self.l2.forward(tape, store, h)?.relu()?;
        self.l3.forward(tape, store, h)
    }
}
