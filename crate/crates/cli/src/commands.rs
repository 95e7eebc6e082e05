use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use sgvl_core::eval::{eval_sg_map, eval_winoground};
use sgvl_core::pipeline::{apply_negative_rule, preprocess_pair, sample_caption_pair};
use sgvl_core::scene::{read_scene_graph_file, write_scene_graph_stream};
use sgvl_core::synth::{gen_image_text_pair, gen_synthetic_scene, gen_winoground_set, SyntheticConfig};
use sgvl_core::tensor::Checkpoint;
use sgvl_core::train::{
    check_fixture, finetune, grad_check_model, pretrain_base, Ablation, LossTerm, StepLog, TrainData,
    TrainOutcome,
};
use sgvl_core::{
    Error, ImageSgPair, ImageTextPair, ModelConfig, NegativeRule, RgbImage, RuleConfig, SgvlModel,
    TrainConfig,
};

use crate::records::{create, read_jsonl, write_jsonl, CaptionRecord, TextRecord, WinoRecord};
use crate::{
    Command, GradcheckArgs, InspectArgs, MapArgs, PretrainArgs, RulesArgs, SynthArgs, SynthKind, TrainArgs,
    WinogroundArgs,
};

/// Why a command did not succeed; both exit with status 1.
pub enum Failure {
    /// Bad input, configuration or numerics.
    Domain(anyhow::Error),
    /// The command ran but its check did not pass.
    Check(String),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Domain(e.into())
    }
}

type Outcome = Result<(), Failure>;

pub fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::SynthData(a) => synth_data(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Captions(a) => captions(a),
        Command::Negatives(a) => negatives(a),
        Command::PretrainBase(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::EvalWinoground(a) => winoground(a),
        Command::EvalMap(a) => map(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn synth_config(path: Option<&Path>) -> anyhow::Result<SyntheticConfig> {
    let cfg = match path {
        Some(p) => SyntheticConfig::load(p).with_context(|| format!("synthetic config {}", p.display()))?,
        None => SyntheticConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn rule_config(path: Option<&Path>) -> anyhow::Result<RuleConfig> {
    match path {
        Some(p) => RuleConfig::load(p).with_context(|| format!("rule config {}", p.display())),
        None => Ok(SyntheticConfig::default().rule_config()),
    }
}

fn train_config(path: Option<&Path>, fallback: TrainConfig) -> anyhow::Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("training config {}", p.display())),
        None => Ok(fallback),
    }
}

fn model_config(path: Option<&Path>, fallback: ModelConfig) -> anyhow::Result<ModelConfig> {
    match path {
        Some(p) => ModelConfig::load(p).with_context(|| format!("model config {}", p.display())),
        None => Ok(fallback),
    }
}

fn read_graphs(path: &Path) -> anyhow::Result<Vec<ImageSgPair>> {
    let pairs = read_scene_graph_file(path).with_context(|| format!("reading {}", path.display()))?;
    if pairs.is_empty() {
        bail!("{} holds no scene graphs", path.display());
    }
    Ok(pairs)
}

fn fit(image: RgbImage, size: usize) -> RgbImage {
    if image.width() == size && image.height() == size {
        image
    } else {
        image.resize_nearest(size, size)
    }
}

fn read_text_pairs(path: &Path, size: usize) -> anyhow::Result<Vec<ImageTextPair>> {
    read_jsonl::<TextRecord>(path)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut p = r.into_pair().with_context(|| format!("{} record {}", path.display(), i + 1))?;
            p.image = fit(p.image, size);
            Ok(p)
        })
        .collect()
}

fn write_graphs(path: &Path, pairs: &[ImageSgPair]) -> anyhow::Result<()> {
    let mut w = create(path)?;
    write_scene_graph_stream(&mut w, pairs)?;
    w.flush()?;
    Ok(())
}

/// Pretty JSON on stdout and, when asked, the same text in a file.
fn report<T: Serialize>(value: &T, out: Option<&PathBuf>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    println!("{text}");
    if let Some(p) = out {
        let mut w = create(p)?;
        writeln!(w, "{text}")?;
        w.flush()?;
    }
    Ok(())
}

fn synth_data(a: SynthArgs) -> Outcome {
    let cfg = synth_config(a.config.as_deref())?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let n = match a.kind {
        SynthKind::Sg => {
            let pairs: Vec<ImageSgPair> =
                (0..a.n).map(|i| gen_synthetic_scene(&cfg, &mut rng, &format!("sg-{i}"))).collect();
            write_graphs(&a.out, &pairs)?;
            pairs.len()
        }
        SynthKind::Text => {
            let pairs = (0..a.n).map(|_| gen_image_text_pair(&cfg, &mut rng));
            write_jsonl(&a.out, pairs.map(|p| TextRecord::from_pair(&p)))?
        }
        SynthKind::Winoground => {
            let samples = gen_winoground_set(&cfg, &mut rng, a.n)?;
            write_jsonl(&a.out, samples.iter().map(WinoRecord::from_sample))?
        }
    };
    log::info!("wrote {n} records to {}", a.out.display());
    Ok(())
}

fn preprocess(a: RulesArgs) -> Outcome {
    let rules = rule_config(a.rules.as_deref())?;
    let pairs = read_graphs(&a.input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut kept = Vec::with_capacity(pairs.len());
    for p in &pairs {
        if let Some(q) = preprocess_pair(p, &rules, &mut rng)? {
            kept.push(q);
        }
    }
    log::info!("kept {} of {} subgraphs", kept.len(), pairs.len());
    write_graphs(&a.out, &kept)?;
    Ok(())
}

fn captions(a: RulesArgs) -> Outcome {
    let rules = rule_config(a.rules.as_deref())?;
    let pairs = read_graphs(&a.input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut records = Vec::with_capacity(pairs.len());
    for p in &pairs {
        match sample_caption_pair(&p.graph, &rules, &mut rng) {
            Ok(c) => records.push(CaptionRecord {
                image_id: p.graph.image_id.clone(),
                positive: c.positive,
                negative: c.negative,
                rule: c.rule,
            }),
            Err(Error::NoNegative(id)) => log::warn!("graph {id}: no negative derivable, skipped"),
            Err(e) => return Err(e.into()),
        }
    }
    let n = write_jsonl(&a.out, &records)?;
    log::info!("wrote {n} caption pairs for {} graphs", pairs.len());
    Ok(())
}

fn negatives(a: RulesArgs) -> Outcome {
    let rules = rule_config(a.rules.as_deref())?;
    let pairs = read_graphs(&a.input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut out = Vec::new();
    for p in &pairs {
        for rule in NegativeRule::ALL {
            if let Some(mut g) = apply_negative_rule(&p.graph, rule, &rules, &mut rng) {
                g.image_id = format!("{}#{}", p.graph.image_id, rule.as_str());
                out.push(ImageSgPair { image: p.image.clone(), graph: g });
            }
        }
    }
    log::info!("wrote {} mutated graphs for {} inputs", out.len(), pairs.len());
    write_graphs(&a.out, &out)?;
    Ok(())
}

/// Streams step logs as JSONL when a path is given.
fn step_logger(path: Option<&Path>) -> anyhow::Result<impl FnMut(&StepLog)> {
    let mut w = path.map(create).transpose()?;
    Ok(move |s: &StepLog| {
        if s.step % 10 == 0 {
            log::info!("step {} lr {:.2e} loss {:.4}", s.step, s.lr, s.losses.l_total);
        }
        if let Some(w) = w.as_mut() {
            let ok = serde_json::to_writer(&mut *w, s).is_ok() && w.write_all(b"\n").is_ok() && w.flush().is_ok();
            if !ok {
                log::warn!("could not write the step log");
            }
        }
    })
}

fn finish(outcome: TrainOutcome, out: &Path) -> Outcome {
    outcome.model.save(out).with_context(|| format!("writing {}", out.display()))?;
    match outcome.diverged_at {
        None => {
            log::info!("saved {}", out.display());
            Ok(())
        }
        Some(step) => Err(Failure::Domain(anyhow!(
            "training diverged at step {step}; the last finite parameters were saved to {}",
            out.display()
        ))),
    }
}

fn pretrain(a: PretrainArgs) -> Outcome {
    let model_cfg = model_config(a.model.as_deref(), ModelConfig::default())?;
    let mut cfg = train_config(a.config.as_deref(), TrainConfig::pretrain())?;
    cfg.seed = a.seed;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    cfg.validate()?;
    let data = TrainData {
        image_text: read_text_pairs(&a.input, model_cfg.image_size)?,
        image_sg: Vec::new(),
        rules: SyntheticConfig::default().rule_config(),
    };
    let outcome = pretrain_base(model_cfg, &cfg, &data, step_logger(a.log.as_deref())?)?;
    finish(outcome, &a.out)
}

fn train(a: TrainArgs) -> Outcome {
    let base = SgvlModel::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let parts = Ablation::parse_list(&a.ablation)?;
    let mut cfg = train_config(a.config.as_deref(), TrainConfig::default())?.with_ablation(&parts);
    cfg.seed = a.seed;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    cfg.validate()?;
    let size = base.cfg.image_size;
    let data = TrainData {
        image_text: read_text_pairs(&a.input, size)?,
        image_sg: read_graphs(&a.sg)?,
        rules: rule_config(a.rules.as_deref())?,
    };
    let outcome = finetune(base, &cfg, &data, step_logger(a.log.as_deref())?)?;
    finish(outcome, &a.out)
}

fn winoground(a: WinogroundArgs) -> Outcome {
    let model = SgvlModel::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let size = model.cfg.image_size;
    let mut samples = match &a.input {
        Some(p) => read_jsonl::<WinoRecord>(p)?
            .into_iter()
            .map(WinoRecord::into_sample)
            .collect::<anyhow::Result<Vec<_>>>()?,
        None => {
            let cfg = synth_config(a.config.as_deref())?;
            gen_winoground_set(&cfg, &mut ChaCha8Rng::seed_from_u64(a.seed), a.n)?
        }
    };
    for s in &mut samples {
        s.image0 = fit(std::mem::replace(&mut s.image0, RgbImage::new(0, 0)), size);
        s.image1 = fit(std::mem::replace(&mut s.image1, RgbImage::new(0, 0)), size);
    }
    let r = eval_winoground(&model, &samples)?;
    report(&r, a.out.as_ref())?;
    Ok(())
}

fn map(a: MapArgs) -> Outcome {
    if !(a.iou > 0.0 && a.iou <= 1.0) {
        return Err(Failure::Domain(anyhow!("--iou must lie in (0, 1], got {}", a.iou)));
    }
    let model = SgvlModel::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let data = read_graphs(&a.input)?;
    let r = eval_sg_map(&model, &data, a.iou)?;
    report(&r, a.out.as_ref())?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Outcome {
    if !(a.eps > 0.0 && a.tol > 0.0) {
        return Err(Failure::Domain(anyhow!("--eps and --tol must be positive")));
    }
    let model_cfg = model_config(a.model.as_deref(), ModelConfig::tiny())?;
    let (model, batch, cfg) = check_fixture(&model_cfg, a.seed)?;
    let mut reports = Vec::with_capacity(LossTerm::ALL.len());
    for term in LossTerm::ALL {
        let r = grad_check_model(&model, &batch, &cfg, term, a.eps, a.tol)?;
        log::info!("{:?}: max relative error {:.3e} over {} entries", term, r.max_rel_error, r.checked);
        reports.push(r);
    }
    let passed = reports.iter().all(|r| r.passed);
    report(&json!({ "passed": passed, "eps": a.eps, "tol": a.tol, "terms": reports }), a.out.as_ref())?;
    if passed {
        Ok(())
    } else {
        let failed: Vec<String> = reports.iter().filter(|r| !r.passed).map(|r| format!("{:?}", r.term)).collect();
        Err(Failure::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}

/// Artifact kinds `inspect` recognises.
enum Artifact {
    Checkpoint(Checkpoint),
    SceneGraphs(Vec<ImageSgPair>),
    Text(Vec<TextRecord>),
    Winoground(Vec<WinoRecord>),
    Captions(Vec<CaptionRecord>),
}

fn detect(path: &Path) -> anyhow::Result<Artifact> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(ck) = Checkpoint::from_bytes(&bytes) {
        return Ok(Artifact::Checkpoint(ck));
    }
    let text = std::str::from_utf8(&bytes).map_err(|_| anyhow!("{} is neither a checkpoint nor JSONL", path.display()))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).ok_or_else(|| anyhow!("{} is empty", path.display()))?;
    let v: Value = serde_json::from_str(first).with_context(|| format!("{} line 1", path.display()))?;
    let has = |k: &str| v.get(k).is_some();
    if has("nodes") {
        Ok(Artifact::SceneGraphs(read_graphs(path)?))
    } else if has("image0") {
        Ok(Artifact::Winoground(read_jsonl(path)?))
    } else if has("positive") {
        Ok(Artifact::Captions(read_jsonl(path)?))
    } else if has("caption") {
        Ok(Artifact::Text(read_jsonl(path)?))
    } else {
        bail!("{}: unrecognised record layout", path.display())
    }
}

fn inspect(a: InspectArgs) -> Outcome {
    let summary = match detect(&a.input)? {
        Artifact::Checkpoint(ck) => {
            let model = SgvlModel::from_checkpoint(&ck)?;
            let s = json!({
                "kind": "checkpoint",
                "format": ck.header.format,
                "config_hash": ck.header.config_hash,
                "stage": ck.header.meta["stage"],
                "sg_tokens": model.has_sg_tokens(),
                "params": ck.store.count(false),
                "trainable": ck.store.count(true),
                "trainable_fraction": model.trainable_fraction(),
            });
            if let Some(out) = &a.out {
                ck.save(out)?;
            }
            s
        }
        Artifact::SceneGraphs(pairs) => {
            let nodes: usize = pairs.iter().map(|p| p.graph.nodes.len()).sum();
            let edges: usize = pairs.iter().map(|p| p.graph.edges.len()).sum();
            if let Some(out) = &a.out {
                write_graphs(out, &pairs)?;
            }
            json!({ "kind": "scene_graphs", "records": pairs.len(), "nodes": nodes, "edges": edges })
        }
        Artifact::Text(recs) => {
            if let Some(out) = &a.out {
                write_jsonl(out, &recs)?;
            }
            json!({ "kind": "image_text", "records": recs.len() })
        }
        Artifact::Winoground(recs) => {
            let relation = recs.iter().filter(|r| r.kind.as_str() == "relation").count();
            if let Some(out) = &a.out {
                write_jsonl(out, &recs)?;
            }
            json!({ "kind": "winoground", "records": recs.len(), "relation": relation, "attribute": recs.len() - relation })
        }
        Artifact::Captions(recs) => {
            let mut per_rule = serde_json::Map::new();
            for r in NegativeRule::ALL {
                per_rule.insert(r.as_str().into(), json!(recs.iter().filter(|c| c.rule == r).count()));
            }
            if let Some(out) = &a.out {
                write_jsonl(out, &recs)?;
            }
            json!({ "kind": "captions", "records": recs.len(), "per_rule": per_rule })
        }
    };
    report(&summary, None)?;
    Ok(())
}
