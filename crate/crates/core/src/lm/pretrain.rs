//! Next-token pre-training of the stand-in language model.
//!
//! Half of the training sequences (by default) see a prefix built from the
//! response itself, slot by slot, so the model learns to read its prefix
//! before it is frozen and driven by the interactor.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LanguageModel, LM_PREFIX};
use crate::error::{Error, Result};
use crate::numerics::{cosine_lr, AdamWConfig, Graph, OptimizerState, ParamStore};
use crate::textio::{TokenId, TokenSequence, ASSISTANT, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub max_steps: usize,
    pub batch: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// Probability that a sequence is trained with the response hint prefix.
    pub hint_prob: f64,
    pub prefix_len: usize,
    /// Training stops once the running perplexity drops below this.
    pub ppl_threshold: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 1500,
            batch: 16,
            lr_max: 3e-3,
            lr_min: 1e-4,
            weight_decay: 0.0,
            hint_prob: 0.5,
            prefix_len: 32,
            ppl_threshold: 1.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub converged: bool,
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
    pub final_train_loss: f64,
}

/// Hint slots for a response: token `j` and the token before it
/// (the assistant identifier for `j = 0`), padded to `n` slots.
pub fn hint_ids(response: &[TokenId], n: usize) -> (Vec<TokenId>, Vec<TokenId>) {
    let mut hint = vec![PAD; n];
    let mut prev = vec![PAD; n];
    for (j, &t) in response.iter().take(n).enumerate() {
        hint[j] = t;
        prev[j] = if j == 0 { ASSISTANT } else { response[j - 1] };
    }
    (hint, prev)
}

fn response_of(seq: &TokenSequence) -> &[TokenId] {
    let start = seq.loss_mask.iter().position(|&m| m).unwrap_or(seq.len());
    &seq.ids[start..]
}

/// Mean next-token loss over the whole sequence.
fn sequence_loss(lm: &LanguageModel, store: &ParamStore, g: &mut Graph, seq: &TokenSequence, hint: bool, n_prefix: usize) -> Result<crate::numerics::Var> {
    let prefix = if hint {
        let (h, p) = hint_ids(response_of(seq), n_prefix);
        lm.hint_prefix(g, store, &h, &p)?
    } else {
        lm.blank_prefix(g, store, n_prefix)?
    };
    let logits = lm.forward(g, store, Some(prefix), &seq.ids)?;
    let t = seq.len();
    let targets: Vec<usize> = seq.ids[1..].iter().map(|&i| i as usize).chain([0]).collect();
    let mut mask = vec![true; t];
    mask[t - 1] = false;
    g.cross_entropy(logits, &targets, &mask)
}

/// Mean loss over `corpus` with blank prefixes.
pub fn heldout_loss(lm: &LanguageModel, store: &ParamStore, corpus: &[TokenSequence], n_prefix: usize) -> Result<f64> {
    let mut total = 0.0;
    for seq in corpus {
        let mut g = Graph::inference();
        let l = sequence_loss(lm, store, &mut g, seq, false, n_prefix)?;
        total += g.scalar(l);
    }
    Ok(total / corpus.len().max(1) as f64)
}

/// Trains every `lm.` parameter, then freezes them.
pub fn pretrain_lm(lm: &LanguageModel, store: &mut ParamStore, train: &[TokenSequence], heldout: &[TokenSequence], cfg: &PretrainConfig) -> Result<PretrainReport> {
    if train.is_empty() {
        return Err(Error::Invalid("empty pre-training corpus".into()));
    }
    if let Some(i) = train.iter().chain(heldout).position(|s| s.len() < 2) {
        return Err(Error::Invalid(format!("pre-training sequence {i} has fewer than two tokens")));
    }
    store.set_frozen_prefix(LM_PREFIX, false);
    let others = store.isolate(LM_PREFIX);
    let initial_heldout_loss = heldout_loss(lm, store, heldout, cfg.prefix_len)?;
    let mut opt = OptimizerState::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut ema: Option<f64> = None;
    let target = cfg.ppl_threshold.ln();
    let mut steps = 0;
    let mut converged = false;
    while steps < cfg.max_steps {
        store.zero_grad();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let seq = &train[order[cursor]];
            cursor += 1;
            let hint = rng.random::<f64>() < cfg.hint_prob;
            let mut g = Graph::new();
            let loss = sequence_loss(lm, store, &mut g, seq, hint, cfg.prefix_len)?;
            batch_loss += g.scalar(loss);
            g.backward(loss)?;
            g.accumulate_into(store)?;
        }
        store.scale_grads(1.0 / cfg.batch as f64);
        let lr = cosine_lr(steps as u64, cfg.max_steps as u64, cfg.lr_max, cfg.lr_min);
        opt.step(store, lr)?;
        steps += 1;
        let l = batch_loss / cfg.batch as f64;
        let e = ema.map_or(l, |e| 0.9 * e + 0.1 * l);
        ema = Some(e);
        if steps % 100 == 0 {
            log::info!("lm pretrain step {steps}: loss {l:.4} (running {e:.4})");
        }
        if steps >= 20 && e < target {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("lm pre-training reached {steps} steps above perplexity {}", cfg.ppl_threshold);
    }
    store.set_frozen_prefix(LM_PREFIX, true);
    store.release(&others);
    Ok(PretrainReport {
        steps,
        converged,
        initial_heldout_loss,
        final_heldout_loss: heldout_loss(lm, store, heldout, cfg.prefix_len)?,
        final_train_loss: ema.unwrap_or(f64::NAN),
    })
}
