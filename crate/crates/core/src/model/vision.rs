use rand::Rng;

use super::layers::{normal, Block, Linear, Norm};
use super::ModelConfig;
use crate::scene::RgbImage;
use crate::tensor::{ParamId, ParamStore, TResult, Tape, Tensor, Var};
use crate::{Error, Result};

/// One vision layer: the patch track, plus the scene-graph track once the
/// model has been prepared for finetuning.
#[derive(Debug, Clone, PartialEq)]
pub struct DualLayer {
    pub patch: Block,
    pub sg: Option<Block>,
}

/// Learned scene-graph prompts and the final norm of their track.
#[derive(Debug, Clone, PartialEq)]
pub struct SgTokens {
    pub obj: ParamId,
    pub rel: ParamId,
    pub ln_f: Norm,
    /// `layers x 1` attention-logit offsets added whenever a query looks at
    /// a scene-graph token.
    pub key_bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoder {
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub layers: Vec<DualLayer>,
    pub ln_f: Norm,
    pub proj: Linear,
    pub sg: Option<SgTokens>,
}

/// Final states of a batch of images, rows grouped by image.
pub struct VisionStates<'t> {
    /// Unit image embeddings, `B x d`.
    pub cls: Var<'t>,
    /// `B * N x d`.
    pub patches: Var<'t>,
    /// `B * n_obj x d`, after the scene-graph track's final norm.
    pub objects: Option<Var<'t>>,
    /// `B * n_rel x d`.
    pub relations: Option<Var<'t>>,
}

/// Flattened `B * N x patch_dim` pixel blocks scaled to `[-0.5, 0.5]`.
pub fn patchify(cfg: &ModelConfig, images: &[&RgbImage]) -> Result<Tensor> {
    let p = cfg.patch;
    let g = cfg.image_size / p;
    let mut data = Vec::with_capacity(images.len() * cfg.n_patches() * cfg.patch_dim());
    for img in images {
        if img.width() % p != 0 || img.height() % p != 0 {
            return Err(Error::Invalid(format!(
                "image is {}x{}; both sides must be a multiple of the patch size {p}",
                img.width(), img.height()
            )));
        }
        let resized;
        let img = if img.width() != cfg.image_size || img.height() != cfg.image_size {
            resized = img.resize_nearest(cfg.image_size, cfg.image_size);
            &resized
        } else {
            img
        };
        for gy in 0..g {
            for gx in 0..g {
                for y in 0..p {
                    for x in 0..p {
                        let px = img.get(gx * p + x, gy * p + y);
                        data.extend(px.iter().map(|&c| c as f64 / 255.0 - 0.5));
                    }
                }
            }
        }
    }
    Ok(Tensor::matrix(images.len() * cfg.n_patches(), cfg.patch_dim(), data)?)
}

impl VisionEncoder {
    pub(crate) fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> TResult<Self> {
        let d = cfg.d;
        let patch_embed = Linear::new(store, rng, "vision.patch", (cfg.patch_dim(), d), true, cfg.init.patch)?;
        let cls = store.add("vision.cls", normal(rng, &[1, d], cfg.init.embed), true)?;
        let pos = store.add("vision.pos", normal(rng, &[1 + cfg.n_patches(), d], cfg.init.embed), true)?;
        let layers = (0..cfg.layers)
            .map(|i| {
                Ok(DualLayer { patch: Block::new(store, rng, &format!("vision.l{i}.patch"), d, d * cfg.mlp_ratio, cfg.layers, &cfg.init)?, sg: None })
            })
            .collect::<TResult<Vec<_>>>()?;
        let ln_f = Norm::new(store, "vision.ln_f", d)?;
        let proj = Linear::new(store, rng, "vision.proj", (d, d), false, 1.0)?;
        Ok(VisionEncoder { patch_embed, cls, pos, layers, ln_f, proj, sg: None })
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        cfg: &ModelConfig,
        images: &[&RgbImage],
        with_sg: bool,
    ) -> Result<VisionStates<'t>> {
        let b = images.len();
        if b == 0 {
            return Err(Error::Invalid("no images to encode".into()));
        }
        let sg = match (with_sg, &self.sg) {
            (true, Some(sg)) => Some(sg),
            (true, None) => return Err(Error::Invalid("model has no scene-graph tokens".into())),
            (false, _) => None,
        };
        let n = cfg.n_patches();
        let np = n + 1;
        let pe = self.patch_embed.forward(tape, store, tape.constant(patchify(cfg, images)?))?;
        let cls = tape.param(store, self.cls).gather_rows(&vec![0; b])?;
        // [cls_0..cls_B, patches of image 0, patches of image 1, ...] -> per-image order
        let order: Vec<usize> = (0..b).flat_map(|i| std::iter::once(i).chain((0..n).map(move |j| b + i * n + j))).collect();
        let pos_rows: Vec<usize> = (0..b).flat_map(|_| 0..np).collect();
        let mut xp = Var::concat_rows(&[cls, pe])?.gather_rows(&order)?.add(tape.param(store, self.pos).gather_rows(&pos_rows)?)?;
        let s = cfg.n_obj_tokens + cfg.n_rel_tokens;
        let mut xs = match sg {
            Some(sg) => {
                let bank = Var::concat_rows(&[tape.param(store, sg.obj), tape.param(store, sg.rel)])?;
                Some(bank.gather_rows(&(0..b).flat_map(|_| 0..s).collect::<Vec<_>>())?)
            }
            None => None,
        };
        let seq = np + s;
        let merge: Vec<usize> = (0..b)
            .flat_map(|i| (0..np).map(move |j| i * np + j).chain((0..s).map(move |j| b * np + i * s + j)))
            .collect();
        let p_rows: Vec<usize> = (0..b).flat_map(|i| (0..np).map(move |j| i * seq + j)).collect();
        let s_rows: Vec<usize> = (0..b).flat_map(|i| (0..s).map(move |j| i * seq + np + j)).collect();
        let zeros = tape.constant(Tensor::zeros(&[b * np, 1]));
        for (l, layer) in self.layers.iter().enumerate() {
            match (xs, &layer.sg, sg) {
                (Some(x_s), Some(sg_block), Some(sg)) => {
                    let [qp, kp, vp] = layer.patch.qkv(tape, store, xp)?;
                    let [qs, ks, vs] = sg_block.qkv(tape, store, x_s)?;
                    let join = |p: Var<'t>, q: Var<'t>| Var::concat_rows(&[p, q])?.gather_rows(&merge);
                    let bias = join(zeros, tape.param(store, sg.key_bias).gather_rows(&vec![l; b * s])?)?;
                    let a = join(qp, qs)?.attention_biased(join(kp, ks)?, join(vp, vs)?, bias, seq, cfg.heads)?;
                    xp = layer.patch.finish(tape, store, xp, a.gather_rows(&p_rows)?)?;
                    xs = Some(sg_block.finish(tape, store, x_s, a.gather_rows(&s_rows)?)?);
                }
                (None, ..) => xp = layer.patch.forward(tape, store, xp, np, cfg.heads, None)?,
                (Some(_), ..) => return Err(Error::Invalid("scene-graph track missing in a layer".into())),
            }
        }
        let cls_rows: Vec<usize> = (0..b).map(|i| i * np).collect();
        let h = self.ln_f.forward(tape, store, xp.gather_rows(&cls_rows)?)?;
        let cls = self.proj.forward(tape, store, h)?.l2_normalize()?;
        let patch_rows: Vec<usize> = (0..b).flat_map(|i| (1..np).map(move |j| i * np + j)).collect();
        let patches = xp.gather_rows(&patch_rows)?;
        let (objects, relations) = match (xs, sg) {
            (Some(x_s), Some(sg)) => {
                let h = sg.ln_f.forward(tape, store, x_s)?;
                let (no, nr) = (cfg.n_obj_tokens, cfg.n_rel_tokens);
                let o: Vec<usize> = (0..b).flat_map(|i| (0..no).map(move |j| i * s + j)).collect();
                let r: Vec<usize> = (0..b).flat_map(|i| (0..nr).map(move |j| i * s + no + j)).collect();
                (Some(h.gather_rows(&o)?), Some(h.gather_rows(&r)?))
            }
            _ => (None, None),
        };
        Ok(VisionStates { cls, patches, objects, relations })
    }
}
