use rand::Rng;

use super::layers::{normal, Block, Linear, Norm};
use super::tokenizer::{Tokenizer, PAD};
use super::ModelConfig;
use crate::tensor::{ParamId, ParamStore, TResult, Tape, Var};

/// Transformer over word tokens whose final CLS state, projected and
/// normalized, is the text embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub tok: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: Norm,
    pub proj: Linear,
}

impl TextEncoder {
    pub(crate) fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig, vocab: usize) -> TResult<Self> {
        let d = cfg.d;
        let tok = store.add("text.tok", normal(rng, &[vocab, d], cfg.init.embed), true)?;
        let pos = store.add("text.pos", normal(rng, &[cfg.max_length, d], cfg.init.embed), true)?;
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(store, rng, &format!("text.l{i}"), d, d * cfg.mlp_ratio, cfg.layers, &cfg.init))
            .collect::<TResult<Vec<_>>>()?;
        let ln_f = Norm::new(store, "text.ln_f", d)?;
        let proj = Linear::new(store, rng, "text.proj", (d, d), false, 1.0)?;
        Ok(TextEncoder { tok, pos, blocks, ln_f, proj })
    }

    /// Unit embeddings, one row per text.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        cfg: &ModelConfig,
        tokenizer: &Tokenizer,
        texts: &[&str],
    ) -> TResult<Var<'t>> {
        let encoded: Vec<Vec<usize>> = texts.iter().map(|t| tokenizer.encode(t)).collect();
        let t = encoded.iter().map(Vec::len).max().unwrap_or(1);
        let mut ids = Vec::with_capacity(texts.len() * t);
        let mut mask = Vec::with_capacity(texts.len() * t);
        for e in &encoded {
            for j in 0..t {
                ids.push(e.get(j).copied().unwrap_or(PAD));
                mask.push(j < e.len());
            }
        }
        let positions: Vec<usize> = (0..texts.len()).flat_map(|_| 0..t).collect();
        let mut x = tape.param(store, self.tok).gather_rows(&ids)?.add(tape.param(store, self.pos).gather_rows(&positions)?)?;
        for b in &self.blocks {
            x = b.forward(tape, store, x, t, cfg.heads, Some(&mask))?;
        }
        let cls: Vec<usize> = (0..texts.len()).map(|i| i * t).collect();
        let h = self.ln_f.forward(tape, store, x.gather_rows(&cls)?)?;
        self.proj.forward(tape, store, h)?.l2_normalize()
    }
}
