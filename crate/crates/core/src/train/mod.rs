//! Mixed image-text / image-scene-graph training.

mod gradcheck;

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::matching::{
    class_probs_rows, contrastive_loss, gn_loss, match_slots, set_loss, total_loss, LossBundle, LossTerms, MatchResult,
    SlotTargets,
};
use crate::model::{parse_config, LabelKind, ModelConfig, SgvlModel};
use crate::pipeline::{graph_to_caption, preprocess_pair, sample_caption_pair, RuleConfig};
use crate::scene::{ImageSgPair, ImageTextPair, RgbImage, SceneGraph};
use crate::synth::{gen_image_text_pair, gen_synthetic_scene, SyntheticConfig};
use crate::tensor::{cosine_lr, AdamW, AdamWConfig, ParamStore, Tape, TensorError, Var};
use crate::{Error, Result};

pub use gradcheck::{check_fixture, grad_check_model, LossTerm, ModelGradReport};

/// Walks tried per scene-graph pair before it is dropped from a batch.
const WALK_ATTEMPTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_gn: f64,
    pub lambda_sg: f64,
    /// Image-text pairs per step.
    pub it_per_step: usize,
    /// Image-scene-graph pairs per step.
    pub sg_per_step: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub warmup_steps: usize,
    pub steps: usize,
    pub seed: u64,
    /// Add scene-graph images with their graph captions to the contrastive batch.
    pub use_graph_text: bool,
    /// Add the graph-negative term.
    pub use_graph_negatives: bool,
    /// Train the scene-graph tokens with the set-prediction loss.
    pub use_sg_tokens: bool,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_gn: 1.0,
            lambda_sg: 0.1,
            it_per_step: 32,
            sg_per_step: 8,
            lr: 1e-3,
            schedule: Schedule::Cosine,
            warmup_steps: 10,
            steps: 200,
            seed: 0,
            use_graph_text: true,
            use_graph_negatives: true,
            use_sg_tokens: true,
            optimizer: AdamWConfig { max_grad_norm: Some(1.0), ..AdamWConfig::default() },
        }
    }
}

fn bad(key: &str, message: impl Into<String>) -> Error {
    Error::Config { key: key.to_string(), message: message.into() }
}

impl TrainConfig {
    /// Plain contrastive training on image-text pairs only.
    pub fn pretrain() -> Self {
        TrainConfig { lambda_gn: 0.0, lambda_sg: 0.0, sg_per_step: 0, steps: 400, ..TrainConfig::default() }.with_ablation(&[])
    }

    pub fn with_ablation(mut self, parts: &[Ablation]) -> Self {
        self.use_graph_text = parts.contains(&Ablation::GraphText);
        self.use_graph_negatives = parts.contains(&Ablation::GraphNegatives);
        self.use_sg_tokens = parts.contains(&Ablation::SgTokens);
        self
    }

    pub fn uses_sg_pairs(&self) -> bool {
        self.use_graph_text || self.use_graph_negatives || self.use_sg_tokens
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("lambda_gn", self.lambda_gn), ("lambda_sg", self.lambda_sg)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad(k, format!("must be a finite non-negative number, got {v}")));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(bad("lr", "must be positive"));
        }
        if self.it_per_step == 0 {
            return Err(bad("it_per_step", "must be positive"));
        }
        if self.uses_sg_pairs() && self.sg_per_step == 0 {
            return Err(bad("sg_per_step", "must be positive when scene-graph pairs are used"));
        }
        if self.steps == 0 {
            return Err(bad("steps", "must be positive"));
        }
        AdamW::new(self.optimizer).map_err(|e| bad("optimizer", e.to_string()))?;
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: TrainConfig = parse_config(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Cosine => cosine_lr(self.lr, step, self.steps, self.warmup_steps),
            Schedule::Constant => self.lr,
        }
    }
}

/// Components that can be switched on for an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    GraphText,
    GraphNegatives,
    SgTokens,
}

impl Ablation {
    /// Parses a comma list of `gt`, `gn` and `sg`; the empty string is the baseline.
    pub fn parse_list(s: &str) -> Result<Vec<Ablation>> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| match p {
                "gt" => Ok(Ablation::GraphText),
                "gn" => Ok(Ablation::GraphNegatives),
                "sg" => Ok(Ablation::SgTokens),
                other => Err(bad("ablation", format!("unknown component {other:?}; expected gt, gn or sg"))),
            })
            .collect()
    }
}

/// Training corpus.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub image_text: Vec<ImageTextPair>,
    pub image_sg: Vec<ImageSgPair>,
    pub rules: RuleConfig,
}

impl TrainData {
    pub fn synthetic(cfg: &SyntheticConfig, n_image_text: usize, n_image_sg: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let image_text = (0..n_image_text).map(|_| gen_image_text_pair(cfg, &mut rng)).collect();
        let image_sg = (0..n_image_sg)
            .map(|i| gen_synthetic_scene(cfg, &mut rng, &format!("sg-{i}")))
            .collect();
        Ok(TrainData { image_text, image_sg, rules: cfg.rule_config() })
    }
}

/// One preprocessed scene-graph example.
#[derive(Debug, Clone, PartialEq)]
pub struct SgExample {
    pub image: RgbImage,
    pub graph: SceneGraph,
    pub positive: String,
    pub negative: Option<String>,
}

impl SgExample {
    fn node_phrases(&self) -> Vec<String> {
        self.graph.nodes.iter().map(|n| n.phrase()).collect()
    }

    fn relation_phrases(&self) -> Vec<String> {
        self.graph.edges.iter().filter_map(|e| self.graph.relation_phrase(e)).collect()
    }

    fn targets(&self, kind: LabelKind) -> SlotTargets {
        let g = &self.graph;
        match kind {
            LabelKind::Object => SlotTargets::new(g.nodes.iter().map(|n| n.bbox).collect()),
            LabelKind::Relation => SlotTargets::new(g.edges.iter().filter_map(|e| g.relation_box(e)).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub image_text: Vec<ImageTextPair>,
    pub sg: Vec<SgExample>,
}

/// Walk, crop, densify and caption one pair.
pub fn prepare_sg_example<R: Rng + ?Sized>(
    pair: &ImageSgPair,
    rules: &RuleConfig,
    model_cfg: &ModelConfig,
    rng: &mut R,
) -> Result<Option<SgExample>> {
    for _ in 0..WALK_ATTEMPTS {
        let Some(dense) = preprocess_pair(pair, rules, rng)? else { continue };
        let image = dense.image.load()?.resize_nearest(model_cfg.image_size, model_cfg.image_size);
        let (positive, negative) = match sample_caption_pair(&dense.graph, rules, rng) {
            Ok(cp) => (cp.positive, Some(cp.negative)),
            Err(Error::NoNegative(_)) => (graph_to_caption(&dense.graph)?, None),
            Err(e) => return Err(e),
        };
        return Ok(Some(SgExample { image, graph: dense.graph, positive, negative }));
    }
    Ok(None)
}

/// Draws one mixed batch without replacement inside each part.
pub fn make_batch<R: Rng + ?Sized>(data: &TrainData, cfg: &TrainConfig, model_cfg: &ModelConfig, rng: &mut R) -> Result<Batch> {
    let n_it = cfg.it_per_step.min(data.image_text.len());
    let image_text = sample(rng, data.image_text.len(), n_it).into_iter().map(|i| data.image_text[i].clone()).collect();
    let mut sg = Vec::new();
    if cfg.uses_sg_pairs() {
        let n_sg = cfg.sg_per_step.min(data.image_sg.len());
        for i in sample(rng, data.image_sg.len(), n_sg) {
            if let Some(ex) = prepare_sg_example(&data.image_sg[i], &data.rules, model_cfg, rng)? {
                sg.push(ex);
            }
        }
    }
    Ok(Batch { image_text, sg })
}

/// Assignments of one batch, per scene-graph example.
#[derive(Debug, Clone, PartialEq)]
pub struct SgMatches {
    pub objects: Vec<MatchResult>,
    pub relations: Vec<MatchResult>,
}

/// Component losses of `batch` under the parameters in `store`.
///
/// When `fixed` is given the set losses reuse those assignments instead of
/// re-matching. Returns the assignments used.
pub fn batch_loss<'t>(
    model: &SgvlModel,
    store: &ParamStore,
    tape: &'t Tape,
    batch: &Batch,
    cfg: &TrainConfig,
    fixed: Option<&SgMatches>,
) -> Result<(LossTerms<'t>, Option<SgMatches>)> {
    if cfg.use_sg_tokens && !model.has_sg_tokens() {
        return Err(bad("use_sg_tokens", "model has no scene-graph tokens"));
    }
    if batch.image_text.is_empty() {
        return Err(Error::Invalid("batch has no image-text pairs".into()));
    }
    let sg_used = cfg.uses_sg_pairs() && !batch.sg.is_empty();
    let n_it = batch.image_text.len();
    let n_sg = if sg_used { batch.sg.len() } else { 0 };

    let mut images: Vec<&RgbImage> = batch.image_text.iter().map(|p| &p.image).collect();
    images.extend(batch.sg[..n_sg].iter().map(|e| &e.image));
    let vis = model.images_in(store, tape, &images, model.has_sg_tokens())?;

    let want_pos = sg_used && (cfg.use_graph_text || cfg.use_graph_negatives);
    let with_neg: Vec<usize> = if sg_used && cfg.use_graph_negatives {
        (0..n_sg).filter(|&i| batch.sg[i].negative.is_some()).collect()
    } else {
        Vec::new()
    };
    let mut texts: Vec<&str> = batch.image_text.iter().map(|p| p.caption.as_str()).collect();
    if want_pos {
        texts.extend(batch.sg.iter().map(|e| e.positive.as_str()));
    }
    texts.extend(with_neg.iter().filter_map(|&i| batch.sg[i].negative.as_deref()));
    let txt = model.texts_in(store, tape, &texts)?;

    let n_cont = if sg_used && cfg.use_graph_text { n_it + n_sg } else { n_it };
    let rows: Vec<usize> = (0..n_cont).collect();
    let cont = contrastive_loss(vis.cls.gather_rows(&rows)?, txt.gather_rows(&rows)?, model.logit_scale_in(store, tape)?)?;

    let gn = if with_neg.is_empty() {
        None
    } else {
        let img_rows: Vec<usize> = with_neg.iter().map(|&i| n_it + i).collect();
        let neg_rows: Vec<usize> = (0..with_neg.len()).map(|k| n_it + n_sg + k).collect();
        Some(gn_loss(vis.cls.gather_rows(&img_rows)?, txt.gather_rows(&img_rows)?, txt.gather_rows(&neg_rows)?)?)
    };

    let (mut obj, mut rel, mut matches) = (None, None, None);
    if sg_used && cfg.use_sg_tokens {
        let examples = &batch.sg[..n_sg];
        let (lo, mo) = set_term(
            model,
            store,
            tape,
            examples,
            vis.objects.expect("scene-graph states"),
            LabelKind::Object,
            fixed.map(|f| &f.objects[..]),
        )?;
        let (lr, mr) = set_term(
            model,
            store,
            tape,
            examples,
            vis.relations.expect("scene-graph states"),
            LabelKind::Relation,
            fixed.map(|f| &f.relations[..]),
        )?;
        obj = Some(lo);
        rel = Some(lr);
        matches = Some(SgMatches { objects: mo, relations: mr });
    }
    Ok((LossTerms { cont, gn, obj, rel }, matches))
}

/// Set-prediction loss of one token kind, averaged over examples.
fn set_term<'t>(
    model: &SgvlModel,
    store: &ParamStore,
    tape: &'t Tape,
    examples: &[SgExample],
    states: Var<'t>,
    kind: LabelKind,
    fixed: Option<&[MatchResult]>,
) -> Result<(Var<'t>, Vec<MatchResult>)> {
    let k = match kind {
        LabelKind::Object => model.cfg.n_obj_tokens,
        LabelKind::Relation => model.cfg.n_rel_tokens,
    };
    let per_example: Vec<Vec<String>> = examples
        .iter()
        .map(|e| match kind {
            LabelKind::Object => e.node_phrases(),
            LabelKind::Relation => e.relation_phrases(),
        })
        .collect();
    if let Some((i, p)) = per_example.iter().enumerate().find(|(_, p)| p.len() > k) {
        return Err(Error::Invalid(format!(
            "scene graph {} has {} {kind:?} entries but the model has {k} tokens",
            examples[i].graph.image_id,
            p.len()
        )));
    }
    let mut phrases: Vec<String> = per_example.iter().flatten().cloned().collect();
    phrases.sort();
    phrases.dedup();
    // The last row of `bank` is the empty class.
    let bank = model.label_set_in(store, tape, &phrases, kind)?;
    let null_row = phrases.len();
    let (boxes, embeds) = model.predict_in(store, tape, states, kind)?;
    let mut total: Option<Var<'t>> = None;
    let mut used = Vec::with_capacity(examples.len());
    for (i, (ex, own)) in examples.iter().zip(&per_example).enumerate() {
        let mut rows: Vec<usize> = own.iter().map(|p| phrases.binary_search(p).expect("phrase in bank")).collect();
        rows.push(null_row);
        let labels = bank.gather_rows(&rows)?;
        let slots: Vec<usize> = (i * k..(i + 1) * k).collect();
        let probs = class_probs_rows(embeds.gather_rows(&slots)?, labels)?;
        let pb = boxes.gather_rows(&slots)?;
        let targets = ex.targets(kind);
        let m = match fixed {
            Some(f) => f.get(i).cloned().ok_or_else(|| Error::Invalid("fewer fixed assignments than examples".into()))?,
            None => match_slots(&probs.value(), &pb.value(), &targets)?,
        };
        let l = set_loss(probs, pb, &targets, &m)?;
        total = Some(match total {
            Some(t) => t.add(l)?,
            None => l,
        });
        used.push(m);
    }
    let total = total.ok_or_else(|| Error::Invalid("no scene-graph examples".into()))?;
    Ok((total.scale(1.0 / examples.len() as f64)?, used))
}

/// Values printed or logged after each optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossBundle,
}

pub struct TrainOutcome {
    /// Final parameters, or the last finite ones when training diverged.
    pub model: SgvlModel,
    pub log: Vec<StepLog>,
    pub diverged_at: Option<usize>,
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Tensor(TensorError::NonFinite { .. }))
}

/// Runs `cfg.steps` AdamW steps on `model`'s trainable parameters.
pub fn train(mut model: SgvlModel, cfg: &TrainConfig, data: &TrainData, mut on_step: impl FnMut(&StepLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.image_text.is_empty() {
        return Err(Error::Invalid("training data has no image-text pairs".into()));
    }
    if cfg.uses_sg_pairs() && data.image_sg.is_empty() {
        return Err(Error::Invalid("training data has no image-scene-graph pairs".into()));
    }
    if cfg.use_sg_tokens && !model.has_sg_tokens() {
        return Err(bad("use_sg_tokens", "model has no scene-graph tokens"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer)?;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = make_batch(data, cfg, &model.cfg, &mut rng)?;
        let tape = Tape::new();
        let attempt = batch_loss(&model, &model.store, &tape, &batch, cfg, None)
            .and_then(|(terms, _)| total_loss(&terms, cfg.lambda_gn, cfg.lambda_sg));
        let (loss, losses) = match attempt {
            Ok(v) => v,
            Err(e) if is_divergence(&e) => return Ok(diverged(model, log, step)),
            Err(e) => return Err(e),
        };
        if !losses.l_total.is_finite() {
            return Ok(diverged(model, log, step));
        }
        let grads = match tape.backward(loss) {
            Ok(g) => g,
            Err(TensorError::NonFinite { .. }) => return Ok(diverged(model, log, step)),
            Err(e) => return Err(e.into()),
        };
        let lr = cfg.lr_at(step);
        let backup = model.store.clone();
        opt.step(&mut model.store, &grads, lr)?;
        if model.store.iter().any(|(_, p)| !p.tensor.is_finite()) {
            model.store = backup;
            return Ok(diverged(model, log, step));
        }
        let entry = StepLog { step, lr, losses };
        on_step(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model, log, diverged_at: None })
}

fn diverged(model: SgvlModel, log: Vec<StepLog>, step: usize) -> TrainOutcome {
    log::warn!("non-finite values at step {step}; keeping the last finite parameters");
    TrainOutcome { model, log, diverged_at: Some(step) }
}

/// Stage 0: a fresh base model trained contrastively.
pub fn pretrain_base(
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData,
    on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    if cfg.uses_sg_pairs() {
        return Err(bad("use_graph_text", "stage-0 training uses image-text pairs only"));
    }
    let tokenizer = crate::model::tokenizer_for(&model_cfg)?;
    let model = SgvlModel::new_base(model_cfg, tokenizer, cfg.seed)?;
    train(model, cfg, data, on_step)
}

/// Adapter finetuning of a stage-0 model; scene-graph tokens are added when
/// the configuration trains them.
pub fn finetune(base: SgvlModel, cfg: &TrainConfig, data: &TrainData, on_step: impl FnMut(&StepLog)) -> Result<TrainOutcome> {
    let model = base.into_finetune(cfg.seed, cfg.use_sg_tokens)?;
    train(model, cfg, data, on_step)
}
