use rand::Rng;

use super::layers::Ffn;
use crate::tensor::{ParamStore, TResult, Tape, Var};

/// Box and class-embedding networks applied to one kind of scene-graph
/// token.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionHead {
    pub bbox: Ffn,
    pub embed: Ffn,
}

impl PredictionHead {
    pub(crate) fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize) -> TResult<Self> {
        Ok(PredictionHead { bbox: Ffn::new(store, rng, &format!("{name}.bb"), d, 4)?, embed: Ffn::new(store, rng, &format!("{name}.e"), d, d)? })
    }

    /// Corner boxes (`k x 4`, inside the unit frame) and class embeddings.
    ///
    /// The box network emits sigmoid `(cx, cy, w, h)`; half-extents are
    /// `w * min(cx, 1 - cx)` so the box never leaves the frame.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> TResult<(Var<'t>, Var<'t>)> {
        let raw = self.bbox.forward(tape, store, x)?.sigmoid()?;
        let col = |c: usize| raw.slice_cols(c, c + 1);
        let (cx, cy, w, h) = (col(0)?, col(1)?, col(2)?, col(3)?);
        let half = |c: Var<'t>, s: Var<'t>| -> TResult<Var<'t>> { s.mul(c.minimum(c.neg()?.add_const(1.0)?)?) };
        let hx = half(cx, w)?;
        let hy = half(cy, h)?;
        let boxes = Var::concat_cols(&[cx.sub(hx)?, cy.sub(hy)?, cx.add(hx)?, cy.add(hy)?])?;
        Ok((boxes, self.embed.forward(tape, store, x)?))
    }
}
