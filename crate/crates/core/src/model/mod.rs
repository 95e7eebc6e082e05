//! Dual-encoder model: a text transformer and a vision transformer whose
//! scene-graph tokens run on a separate, LoRA-adapted parameter track.

mod config;
mod heads;
mod layers;
mod text;
mod tokenizer;
mod vision;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::{InitGains, ModelConfig};
pub(crate) use config::parse_config;
pub use heads::PredictionHead;
pub use layers::{Block, Ffn, Linear, Norm};
pub use text::TextEncoder;
pub use tokenizer::{split_words, Tokenizer, CLS, PAD, UNK};
pub use vision::{patchify, DualLayer, SgTokens, VisionEncoder, VisionStates};

use crate::scene::RgbImage;
use crate::tensor::{Checkpoint, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Initial value of the trainable log logit scale, `ln(1 / 0.07)`.
pub const LOGIT_SCALE_INIT: f64 = 2.659_260_036_932_778_6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Every parameter trainable, no scene-graph machinery.
    Base,
    /// Base frozen; adapters, prompts, heads and the ∅ embeddings train.
    Finetune,
}

/// Which learned "no match" embedding closes a label set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    Object,
    Relation,
}

/// Finetuning-only parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SgParts {
    pub obj_head: PredictionHead,
    pub rel_head: PredictionHead,
    pub null_obj: ParamId,
    pub null_rel: ParamId,
}

/// Single-image view of [`VisionStates`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub cls_embedding: Vec<f64>,
    pub object_states: Option<Tensor>,
    pub relation_states: Option<Tensor>,
    pub patch_states: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgvlModel {
    pub cfg: ModelConfig,
    pub tokenizer: Tokenizer,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub vision: VisionEncoder,
    pub logit_scale: ParamId,
    pub sg: Option<SgParts>,
    pub stage: Stage,
}

/// Tokenizer named by the config, or the synthetic-world vocabulary.
pub fn tokenizer_for(cfg: &ModelConfig) -> Result<Tokenizer> {
    match &cfg.vocab_path {
        Some(p) => {
            let mut t = Tokenizer::load(Path::new(p))?;
            t.max_length = cfg.max_length;
            Ok(t)
        }
        None => {
            let corpus = crate::synth::SyntheticConfig::default().vocabulary();
            Ok(Tokenizer::build(corpus.iter().map(String::as_str), cfg.max_length))
        }
    }
}

impl SgvlModel {
    /// Randomly initialised stage-0 model.
    pub fn new_base(cfg: ModelConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let text = TextEncoder::new(&mut store, &mut rng, &cfg, tokenizer.vocab_size())?;
        let vision = VisionEncoder::new(&mut store, &mut rng, &cfg)?;
        let logit_scale = store.add("logit_scale", Tensor::scalar(LOGIT_SCALE_INIT), true)?;
        Ok(SgvlModel { cfg, tokenizer, store, text, vision, logit_scale, sg: None, stage: Stage::Base })
    }

    /// Freezes the base and attaches LoRA factors to every text and vision
    /// matrix. With `sg_tokens` it also adds a scene-graph track copied from
    /// the patch track, the prompt bank, the heads and the ∅ embeddings. The
    /// logit scale stays trainable.
    pub fn into_finetune(mut self, seed: u64, sg_tokens: bool) -> Result<Self> {
        if self.stage == Stage::Finetune {
            return Err(Error::Invalid("model is already prepared for finetuning".into()));
        }
        let cfg = self.cfg.clone();
        let d = cfg.d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5347_564c);
        let store = &mut self.store;
        store.freeze_all();
        for b in &mut self.text.blocks {
            b.attach_lora(store, &mut rng, cfg.r_p)?;
        }
        for (i, layer) in self.vision.layers.iter_mut().enumerate() {
            if sg_tokens {
                let mut sg = layer.patch.copy_frozen(store, &format!("vision.l{i}.sg"))?;
                sg.attach_lora(store, &mut rng, cfg.r_sg)?;
                layer.sg = Some(sg);
            }
            layer.patch.attach_lora(store, &mut rng, cfg.r_p)?;
        }
        store.set_trainable(self.logit_scale, true);
        self.stage = Stage::Finetune;
        if !sg_tokens {
            return Ok(self);
        }
        let ln_f = self.vision.ln_f.copy_frozen(store, "vision.sg_ln_f")?;
        let obj = store.add("sg.obj_prompts", layers::normal(&mut rng, &[cfg.n_obj_tokens, d], 1.0), true)?;
        let rel = store.add("sg.rel_prompts", layers::normal(&mut rng, &[cfg.n_rel_tokens, d], 1.0), true)?;
        let key_bias = store.add("sg.key_bias", Tensor::full(&[cfg.layers, 1], cfg.init.sg_key_bias), true)?;
        self.vision.sg = Some(SgTokens { obj, rel, ln_f, key_bias });
        let obj_head = PredictionHead::new(store, &mut rng, "head.obj", d)?;
        let rel_head = PredictionHead::new(store, &mut rng, "head.rel", d)?;
        let null_obj = store.add("sg.null_obj", layers::normal(&mut rng, &[1, d], 1.0), true)?;
        let null_rel = store.add("sg.null_rel", layers::normal(&mut rng, &[1, d], 1.0), true)?;
        self.sg = Some(SgParts { obj_head, rel_head, null_obj, null_rel });
        Ok(self)
    }

    pub fn has_sg_tokens(&self) -> bool {
        self.vision.sg.is_some()
    }

    pub fn encode_texts<'t>(&self, tape: &'t Tape, texts: &[&str]) -> Result<Var<'t>> {
        self.texts_in(&self.store, tape, texts)
    }

    pub fn encode_images<'t>(&self, tape: &'t Tape, images: &[&RgbImage], with_sg: bool) -> Result<VisionStates<'t>> {
        self.images_in(&self.store, tape, images, with_sg)
    }

    /// Unit embeddings of `phrases` followed by the unit ∅ embedding.
    pub fn embed_label_set<'t>(&self, tape: &'t Tape, phrases: &[String], kind: LabelKind) -> Result<Var<'t>> {
        self.label_set_in(&self.store, tape, phrases, kind)
    }

    /// Boxes and class embeddings for object (or relation) token states.
    pub fn predict<'t>(&self, tape: &'t Tape, states: Var<'t>, kind: LabelKind) -> Result<(Var<'t>, Var<'t>)> {
        self.predict_in(&self.store, tape, states, kind)
    }

    /// `exp` of the stored log scale.
    pub fn logit_scale<'t>(&self, tape: &'t Tape) -> Result<Var<'t>> {
        self.logit_scale_in(&self.store, tape)
    }

    // The `*_in` variants read parameters from `store`, which must share this
    // model's layout; finite-difference checks pass perturbed copies.

    pub(crate) fn texts_in<'t>(&self, store: &ParamStore, tape: &'t Tape, texts: &[&str]) -> Result<Var<'t>> {
        if texts.is_empty() {
            return Err(Error::Invalid("no texts to encode".into()));
        }
        Ok(self.text.forward(tape, store, &self.cfg, &self.tokenizer, texts)?)
    }

    pub(crate) fn images_in<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        images: &[&RgbImage],
        with_sg: bool,
    ) -> Result<VisionStates<'t>> {
        self.vision.forward(tape, store, &self.cfg, images, with_sg)
    }

    pub(crate) fn label_set_in<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        phrases: &[String],
        kind: LabelKind,
    ) -> Result<Var<'t>> {
        let sg = self.sg.as_ref().ok_or_else(|| Error::Invalid("model has no empty-class embeddings".into()))?;
        if let Some(p) = phrases.iter().find(|p| p.trim().is_empty()) {
            return Err(Error::Invalid(format!("empty label phrase {p:?}")));
        }
        let null = match kind {
            LabelKind::Object => sg.null_obj,
            LabelKind::Relation => sg.null_rel,
        };
        let null = tape.param(store, null).l2_normalize()?;
        if phrases.is_empty() {
            return Ok(null);
        }
        let refs: Vec<&str> = phrases.iter().map(String::as_str).collect();
        Ok(Var::concat_rows(&[self.texts_in(store, tape, &refs)?, null])?)
    }

    pub(crate) fn predict_in<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        states: Var<'t>,
        kind: LabelKind,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let sg = self.sg.as_ref().ok_or_else(|| Error::Invalid("model has no prediction heads".into()))?;
        let head = match kind {
            LabelKind::Object => &sg.obj_head,
            LabelKind::Relation => &sg.rel_head,
        };
        Ok(head.forward(tape, store, states)?)
    }

    pub(crate) fn logit_scale_in<'t>(&self, store: &ParamStore, tape: &'t Tape) -> Result<Var<'t>> {
        Ok(tape.param(store, self.logit_scale).exp()?)
    }

    pub fn encode_text(&self, caption: &str) -> Result<Vec<f64>> {
        let tape = Tape::no_grad();
        Ok(self.encode_texts(&tape, &[caption])?.value().into_data())
    }

    pub fn encode_image(&self, image: &RgbImage) -> Result<EncoderOutput> {
        let tape = Tape::no_grad();
        let s = self.encode_images(&tape, &[image], self.has_sg_tokens())?;
        Ok(EncoderOutput {
            cls_embedding: s.cls.value().into_data(),
            object_states: s.objects.map(|v| v.value()),
            relation_states: s.relations.map(|v| v.value()),
            patch_states: s.patches.value(),
        })
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.store.trainable_fraction()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let config = serde_json::to_value(&self.cfg).expect("config serializes");
        let meta = json!({
            "stage": self.stage,
            "sg_tokens": self.has_sg_tokens(),
            "tokenizer": serde_json::to_value(&self.tokenizer).expect("tokenizer serializes"),
        });
        Checkpoint::new(config, meta, self.store.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: ModelConfig = parse_config(&ck.header.config.to_string())?;
        let stage: Stage = serde_json::from_value(ck.header.meta["stage"].clone())
            .map_err(|e| Error::Checkpoint(format!("meta.stage: {e}")))?;
        let sg_tokens = ck.header.meta["sg_tokens"].as_bool().unwrap_or(false);
        let tokenizer = Tokenizer::from_json(&ck.header.meta["tokenizer"].to_string())?;
        let mut model = SgvlModel::new_base(cfg, tokenizer, 0)?;
        if stage == Stage::Finetune {
            model = model.into_finetune(0, sg_tokens)?;
        }
        let want: Vec<(&str, &[usize])> = model.store.iter().map(|(_, p)| (p.name.as_str(), p.tensor.shape())).collect();
        let got: Vec<(&str, &[usize])> = ck.store.iter().map(|(_, p)| (p.name.as_str(), p.tensor.shape())).collect();
        if want != got {
            let first = want.iter().zip(&got).position(|(a, b)| a != b).unwrap_or(want.len().min(got.len()));
            return Err(Error::Checkpoint(format!(
                "parameter layout differs from the config at entry {first} ({} expected, {} stored)",
                want.len(),
                got.len()
            )));
        }
        model.store = ck.store.clone();
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
