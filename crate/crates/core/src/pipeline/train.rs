//! Instruction-tuning loop over cached scene embeddings.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Model, SceneContext};
use crate::datagen::{Dataset, TrainingSample};
use crate::error::{Error, Result};
use crate::geometry::box_iou_3d;
use crate::lm::{GenerationConfig, Strategy};
use crate::numerics::{cosine_lr, AdamWConfig, Graph, OptimizerState, ParamId};
use crate::textio::{parse_spatial, SpatialToken, TokenSequence};

/// Scene embeddings keyed by scene id, computed once with the frozen encoder.
pub fn scene_contexts(model: &Model, dataset: &Dataset) -> Result<HashMap<String, SceneContext>> {
    dataset
        .scenes
        .iter()
        .map(|s| Ok((s.id.clone(), model.scene_context(s)?)))
        .collect()
}

fn context<'a>(contexts: &'a HashMap<String, SceneContext>, sample: &TrainingSample) -> Result<&'a SceneContext> {
    contexts
        .get(&sample.scene_id)
        .ok_or_else(|| Error::Invalid(format!("sample refers to unknown scene {:?}", sample.scene_id)))
}

/// Values of every frozen parameter, for bit-exact mutation checks.
#[derive(Clone, Debug)]
pub struct FrozenSnapshot(Vec<(ParamId, Vec<u64>)>);

impl FrozenSnapshot {
    pub fn take(model: &Model) -> Self {
        Self(
            model
                .store
                .iter()
                .filter(|(_, p)| p.frozen)
                .map(|(id, p)| (id, p.tensor.data().iter().map(|v| v.to_bits()).collect()))
                .collect(),
        )
    }

    pub fn verify(&self, model: &Model) -> Result<()> {
        for (id, bits) in &self.0 {
            let p = model.store.get(*id);
            if !p.frozen || p.tensor.data().iter().map(|v| v.to_bits()).ne(bits.iter().copied()) {
                return Err(Error::FrozenMutated(p.name.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(step, mean batch loss)` for every step run.
    pub losses: Vec<(usize, f64)>,
    /// `(step, teacher-forced accuracy)` at each periodic evaluation.
    pub evals: Vec<(usize, f64)>,
    pub final_step: usize,
}

/// Optimizer and step counter of an instruction-tuning run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub optimizer: OptimizerState,
    pub step: usize,
}

impl TrainState {
    pub fn new(model: &Model) -> Self {
        Self {
            optimizer: OptimizerState::new(
                AdamWConfig {
                    weight_decay: model.config.train.weight_decay,
                    ..AdamWConfig::default()
                },
                &model.store,
            ),
            step: 0,
        }
    }
}

/// Index of the sample at global position `pos`: each epoch is a fresh
/// seeded shuffle, so resuming at any step reproduces the same order.
fn sample_at(seed: u64, n: usize, pos: usize) -> usize {
    let epoch = pos / n;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
    order.shuffle(&mut rng);
    order[pos % n]
}

/// Runs steps until `state.step == until`. `on_step` sees the model after
/// every step and may stop early by returning `false`.
pub fn train(
    model: &mut Model,
    state: &mut TrainState,
    dataset: &Dataset,
    until: usize,
    mut on_step: impl FnMut(&Model, usize, f64) -> Result<bool>,
) -> Result<TrainReport> {
    if dataset.samples.is_empty() {
        return Err(Error::Invalid("no training samples".into()));
    }
    if let Some((_, p)) = model
        .store
        .iter()
        .find(|(_, p)| p.frozen == Model::is_trainable_name(&p.name))
    {
        return Err(Error::Contract(format!(
            "parameter `{}` has the wrong frozen flag for instruction tuning",
            p.name
        )));
    }
    let contexts = scene_contexts(model, dataset)?;
    let sequences: Vec<TokenSequence> = dataset.samples.iter().map(|s| s.sequence(&model.vocab)).collect();
    let frozen = FrozenSnapshot::take(model);
    let cfg = model.config.train.clone();
    let n = dataset.samples.len();
    let mut report = TrainReport::default();
    while state.step < until {
        model.store.zero_grad();
        let mut total = 0.0;
        for i in 0..cfg.batch {
            let k = sample_at(model.config.seed, n, state.step * cfg.batch + i);
            let sample = &dataset.samples[k];
            let ctx = context(&contexts, sample)?;
            let mut g = Graph::new();
            let loss = model.sample_loss(&mut g, ctx, &sample.prompts, &sequences[k])?;
            let l = g.scalar(loss);
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {}", state.step)));
            }
            total += l;
            g.backward(loss)?;
            g.accumulate_into(&mut model.store)?;
        }
        model.store.scale_grads(1.0 / cfg.batch as f64);
        let lr = cosine_lr(state.step as u64, cfg.total_steps as u64, cfg.lr_max, cfg.lr_min);
        state.optimizer.step(&mut model.store, lr)?;
        state.step += 1;
        if cfg.check_frozen {
            frozen.verify(model)?;
        }
        let mean = total / cfg.batch as f64;
        report.losses.push((state.step, mean));
        if state.step % 100 == 0 {
            log::info!("step {}: loss {mean:.4} lr {lr:.2e}", state.step);
        }
        if cfg.eval_every > 0 && state.step % cfg.eval_every == 0 {
            let acc = teacher_forced_accuracy(model, dataset)?;
            log::info!("step {}: teacher-forced accuracy {acc:.4}", state.step);
            report.evals.push((state.step, acc));
        }
        if !on_step(model, state.step, mean)? {
            break;
        }
    }
    frozen.verify(model)?;
    report.final_step = state.step;
    Ok(report)
}

/// Mean loss over every sample (no parameter change).
pub fn dataset_loss(model: &Model, dataset: &Dataset) -> Result<f64> {
    let contexts = scene_contexts(model, dataset)?;
    let mut total = 0.0;
    for s in &dataset.samples {
        let mut g = Graph::inference();
        let loss = model.sample_loss(&mut g, context(&contexts, s)?, &s.prompts, &s.sequence(&model.vocab))?;
        total += g.scalar(loss);
    }
    Ok(total / dataset.samples.len().max(1) as f64)
}

/// Fraction of response tokens (end token included) whose teacher-forced
/// argmax is correct, pooled over the dataset.
pub fn teacher_forced_accuracy(model: &Model, dataset: &Dataset) -> Result<f64> {
    let contexts = scene_contexts(model, dataset)?;
    let (mut hits, mut total) = (0, 0);
    for s in &dataset.samples {
        let (h, t) = model.teacher_forced_hits(context(&contexts, s)?, &s.prompts, &s.sequence(&model.vocab))?;
        hits += h;
        total += t;
    }
    Ok(hits as f64 / total.max(1) as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalizeReport {
    pub samples: usize,
    /// Samples whose response held a parseable box.
    pub parsed: usize,
    /// Mean IoU over all localize samples; unparsed responses count as 0.
    pub mean_iou: f64,
}

/// Greedy generation on every localize-variant densecap sample, comparing
/// the first parsed box with the ground truth.
pub fn localize_iou(model: &Model, dataset: &Dataset) -> Result<LocalizeReport> {
    let contexts = scene_contexts(model, dataset)?;
    let gen = GenerationConfig {
        strategy: Strategy::Greedy,
        ..model.config.generation.clone()
    };
    let mut report = LocalizeReport::default();
    let mut total = 0.0;
    for s in dataset.samples.iter().filter(|s| s.localize && s.task == crate::datagen::Task::Densecap) {
        let Some(gt) = s.target_box else { continue };
        let ctx = context(&contexts, s)?;
        let (text, _) = model.respond(ctx, &s.prompts, &s.instruction, &gen)?;
        report.samples += 1;
        let parsed = parse_spatial(&text);
        if let Some(b) = parsed.tokens.iter().find_map(|t| match t {
            SpatialToken::Box(_) => t.to_box(&ctx.bounds),
            _ => None,
        }) {
            report.parsed += 1;
            total += box_iou_3d(&b, &gt);
        }
    }
    report.mean_iou = total / report.samples.max(1) as f64;
    Ok(report)
}
