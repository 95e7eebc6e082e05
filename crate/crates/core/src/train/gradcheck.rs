use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::{batch_loss, make_batch, Batch, SgMatches, TrainConfig, TrainData};
use crate::matching::total_loss;
use crate::model::{tokenizer_for, ModelConfig, SgvlModel};
use crate::synth::SyntheticConfig;
use crate::tensor::{check_param_gradients, GradReport, ParamStore, Tape, TensorError, Var};
use crate::{Error, Result};

/// Objective component whose gradient is checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Cont,
    Gn,
    Obj,
    Rel,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [LossTerm::Cont, LossTerm::Gn, LossTerm::Obj, LossTerm::Rel, LossTerm::Total];
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelGradReport {
    pub term: LossTerm,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub passed: bool,
    /// Worst error per trainable parameter.
    pub groups: Vec<(String, f64)>,
    /// Frozen parameters that nevertheless received a gradient.
    pub frozen_with_grad: Vec<String>,
    /// Trainable parameters whose analytic gradient is exactly zero.
    pub zero_grad: Vec<String>,
}

fn to_tensor_error(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::Invalid { op: "batch_loss", message: other.to_string() },
    }
}

fn select<'t>(
    model: &SgvlModel,
    store: &ParamStore,
    tape: &'t Tape,
    batch: &Batch,
    cfg: &TrainConfig,
    matches: Option<&SgMatches>,
    term: LossTerm,
) -> Result<Var<'t>> {
    let (terms, _) = batch_loss(model, store, tape, batch, cfg, matches)?;
    let missing = |name: &str| Error::Invalid(format!("batch produces no {name} term under this configuration"));
    match term {
        LossTerm::Cont => Ok(terms.cont),
        LossTerm::Gn => terms.gn.ok_or_else(|| missing("graph-negative")),
        LossTerm::Obj => terms.obj.ok_or_else(|| missing("object")),
        LossTerm::Rel => terms.rel.ok_or_else(|| missing("relation")),
        LossTerm::Total => Ok(total_loss(&terms, cfg.lambda_gn, cfg.lambda_sg)?.0),
    }
}

/// Central-difference check of one loss term over every trainable parameter,
/// with the matching of the unperturbed model held fixed.
pub fn grad_check_model(
    model: &SgvlModel,
    batch: &Batch,
    cfg: &TrainConfig,
    term: LossTerm,
    eps: f64,
    tol: f64,
) -> Result<ModelGradReport> {
    let matches = {
        let tape = Tape::no_grad();
        batch_loss(model, &model.store, &tape, batch, cfg, None)?.1
    };
    let matches = matches.as_ref();

    let tape = Tape::new();
    let loss = select(model, &model.store, &tape, batch, cfg, matches, term)?;
    let grads = tape.backward(loss)?;
    let mut frozen_with_grad = Vec::new();
    let mut zero_grad = Vec::new();
    for (id, p) in model.store.iter() {
        match (p.trainable, grads.param(id)) {
            (false, Some(_)) => frozen_with_grad.push(p.name.clone()),
            (true, None) => zero_grad.push(p.name.clone()),
            (true, Some(g)) if g.iter().all(|&x| x == 0.0) => zero_grad.push(p.name.clone()),
            _ => {}
        }
    }

    let ids = model.store.trainable_ids();
    let r: GradReport = check_param_gradients(
        &model.store,
        &ids,
        |tape, store| select(model, store, tape, batch, cfg, matches, term).map_err(to_tensor_error),
        eps,
        tol,
        1,
    )?;
    Ok(ModelGradReport {
        term,
        max_rel_error: r.max_rel_error,
        worst: r.worst,
        checked: r.checked,
        passed: r.passed && frozen_with_grad.is_empty(),
        groups: r.groups,
        frozen_with_grad,
        zero_grad,
    })
}

/// A finetuning model, a two-pair batch of two-object scenes and the
/// default objective, small enough for finite differences on `cfg`.
///
/// The adapter `B` factors are drawn at random so that every `A` factor sits
/// on a live gradient path.
pub fn check_fixture(cfg: &ModelConfig, seed: u64) -> Result<(SgvlModel, Batch, TrainConfig)> {
    let mut model = SgvlModel::new_base(cfg.clone(), tokenizer_for(cfg)?, seed)?.into_finetune(seed.wrapping_add(1), true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let dist = Normal::new(0.0, 0.3).expect("finite std");
    let ids: Vec<_> = model.store.iter().filter(|(_, p)| p.name.ends_with("lora_b")).map(|(id, _)| id).collect();
    for id in ids {
        for x in model.store.value_mut(id).data_mut() {
            *x = dist.sample(&mut rng);
        }
    }
    let syn = SyntheticConfig { min_objects: 2, max_objects: 2, seed, ..SyntheticConfig::default() };
    let data = TrainData::synthetic(&syn, 4, 4)?;
    let tc = TrainConfig { it_per_step: 2, sg_per_step: 2, ..TrainConfig::default() };
    let batch = make_batch(&data, &tc, cfg, &mut rng)?;
    Ok((model, batch, tc))
}
