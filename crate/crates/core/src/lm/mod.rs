//! Small causal language model, its pre-training, and decoding strategies.

mod decode;
mod pretrain;

pub use decode::{
    beam_search, greedy, ngram_block_filter, nucleus, sample_top_k_top_p, sample_traced, GenerationConfig,
    generate, Generation, LmScorer, StepScorer, Strategy, TableScorer,
};
pub use pretrain::{heldout_loss, hint_ids, pretrain_lm, PretrainConfig, PretrainReport};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Block, LayerNorm};
use crate::numerics::{causal_mask, Graph, ParamId, ParamStore, Tensor, Var};
use crate::textio::{TokenId, PAD};

pub const LM_PREFIX: &str = "lm.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_lm: usize,
    pub hidden: usize,
    pub vocab: usize,
    pub max_positions: usize,
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_lm % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "lm width {} not divisible by {} heads",
                self.d_lm, self.heads
            )));
        }
        if self.vocab == 0 || self.max_positions == 0 {
            return Err(Error::Invalid("lm vocab and positions must be positive".into()));
        }
        Ok(())
    }
}

/// Decoder-only transformer with learned positions and tied input/output
/// embeddings. `hint_prev` is only used to build pre-training prefixes.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub cfg: LmConfig,
    pub tok_emb: ParamId,
    pub hint_prev: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

impl LanguageModel {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: LmConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let p = LM_PREFIX;
        let d = cfg.d_lm;
        let tok_emb = store.add(format!("{p}tok_emb"), Tensor::randn(&[cfg.vocab, d], 1.0, rng));
        let hint_prev = store.add(format!("{p}hint_prev"), Tensor::randn(&[cfg.vocab, d], 1.0, rng));
        let pos_emb = store.add(format!("{p}pos_emb"), Tensor::randn(&[cfg.max_positions, d], 0.1, rng));
        let blocks = (0..cfg.layers)
            .map(|l| Block::new(store, &format!("{p}block{l}"), d, cfg.heads, cfg.hidden, rng))
            .collect();
        let ln_f = LayerNorm::new(store, &format!("{p}ln_f"), d);
        Ok(Self {
            cfg,
            tok_emb,
            hint_prev,
            pos_emb,
            blocks,
            ln_f,
        })
    }

    /// Logits for every token position (`T x V`); the prefix rows only
    /// provide context.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, prefix: Option<Var>, ids: &[TokenId]) -> Result<Var> {
        self.forward_from(g, store, prefix, ids, 0)
    }

    /// Logits for token positions `from..T` only.
    pub fn forward_from(&self, g: &mut Graph, store: &ParamStore, prefix: Option<Var>, ids: &[TokenId], from: usize) -> Result<Var> {
        let d = self.cfg.d_lm;
        let n_prefix = match prefix {
            Some(p) => {
                let (r, c) = g.dims(p);
                if c != d {
                    return Err(Error::shape("lm_forward", format!("prefix width {c} vs {d}")));
                }
                r
            }
            None => 0,
        };
        let total = n_prefix + ids.len();
        if total > self.cfg.max_positions {
            return Err(Error::Invalid(format!(
                "{total} positions exceed the lm maximum of {}",
                self.cfg.max_positions
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.cfg.vocab) {
            return Err(Error::Invalid(format!("token id {bad} outside vocabulary")));
        }
        if from >= ids.len() {
            return g.constant(0, self.cfg.vocab, Vec::new());
        }
        let emb = g.param(store, self.tok_emb);
        let mut parts: Vec<Var> = prefix.into_iter().collect();
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        parts.push(g.gather_rows(emb, &idx)?);
        let x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let pos_table = g.param(store, self.pos_emb);
        let pos = g.slice_rows(pos_table, 0, total)?;
        let mut x = g.add(x, pos)?;
        let mask = causal_mask(total);
        for block in &self.blocks {
            x = block.forward(g, store, x, Some(&mask))?;
        }
        let start = n_prefix + from;
        let x = g.slice_rows(x, start, total - start)?;
        let x = self.ln_f.forward(g, store, x)?;
        g.matmul_t(x, emb)
    }

    /// Pre-training prefix: slot `j` holds the embedding of hint token `j`
    /// plus the `hint_prev` embedding of the token before it.
    pub fn hint_prefix(&self, g: &mut Graph, store: &ParamStore, hint: &[TokenId], prev: &[TokenId]) -> Result<Var> {
        let emb = g.param(store, self.tok_emb);
        let pe = g.param(store, self.hint_prev);
        let a: Vec<usize> = hint.iter().map(|&t| t as usize).collect();
        let b: Vec<usize> = prev.iter().map(|&t| t as usize).collect();
        let x = g.gather_rows(emb, &a)?;
        let y = g.gather_rows(pe, &b)?;
        g.add(x, y)
    }

    /// `n` rows of the padding embedding.
    pub fn blank_prefix(&self, g: &mut Graph, store: &ParamStore, n: usize) -> Result<Var> {
        let emb = g.param(store, self.tok_emb);
        g.gather_rows(emb, &vec![PAD as usize; n])
    }
}

/// Numerically stable `log softmax` of one row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![f64::NEG_INFINITY; logits.len()];
    }
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny(seed: u64) -> (ParamStore, LanguageModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = LmConfig {
            layers: 2,
            heads: 2,
            d_lm: 8,
            hidden: 16,
            vocab: 12,
            max_positions: 24,
        };
        let lm = LanguageModel::new(&mut store, cfg, &mut rng).unwrap();
        (store, lm)
    }

    #[test]
    fn causality_under_token_perturbation() {
        let (store, lm) = tiny(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let prefix = Tensor::randn(&[4, 8], 1.0, &mut rng);
            let ids: Vec<TokenId> = (0..10).map(|_| rng.random_range(0..12)).collect();
            let run = |ids: &[TokenId]| {
                let mut g = Graph::inference();
                let p = g.tensor(&prefix);
                let y = lm.forward(&mut g, &store, Some(p), ids).unwrap();
                g.value(y).to_vec()
            };
            let base = run(&ids);
            for t in 0..ids.len() {
                let mut other = ids.clone();
                other[t] = (other[t] + 1) % 12;
                let pert = run(&other);
                assert_eq!(&base[..t * 12], &pert[..t * 12], "position {t}");
                assert_ne!(&base[t * 12..], &pert[t * 12..]);
            }
        }
    }

    #[test]
    fn empty_tokens_give_empty_logits() {
        let (store, lm) = tiny(3);
        let mut g = Graph::inference();
        let p = g.constant(4, 8, vec![0.5; 32]).unwrap();
        let y = lm.forward(&mut g, &store, Some(p), &[]).unwrap();
        assert_eq!(g.dims(y), (0, 12));
    }

    #[test]
    fn too_many_positions_is_an_error() {
        let (store, lm) = tiny(4);
        let mut g = Graph::inference();
        let p = g.constant(20, 8, vec![0.0; 160]).unwrap();
        assert!(lm.forward(&mut g, &store, Some(p), &[1, 2, 3, 4]).is_ok());
        assert!(lm.forward(&mut g, &store, Some(p), &[1, 2, 3, 4, 5]).is_err());
    }

    #[test]
    fn forward_from_matches_full_rows() {
        let (store, lm) = tiny(5);
        let ids = [1, 5, 7, 2, 9];
        let mut g = Graph::inference();
        let full = lm.forward(&mut g, &store, None, &ids).unwrap();
        let last = lm.forward_from(&mut g, &store, None, &ids, 3).unwrap();
        assert_eq!(&g.value(full)[36..], g.value(last));
    }

    #[test]
    fn prefix_gradient_through_frozen_lm() {
        let (mut store, lm) = tiny(6);
        store.set_frozen_prefix(LM_PREFIX, true);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let prefix = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let ids = [1, 4, 6, 2];
        let err = finite_difference_check(
            |g, p| {
                let logits = lm.forward(g, &store, Some(p), &ids)?;
                g.cross_entropy(logits, &[4, 6, 2, 0], &[true, true, true, false])
            },
            &prefix,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
        let mut g = Graph::new();
        let p = g.tensor(&prefix.clone().with_grad());
        let logits = lm.forward(&mut g, &store, Some(p), &ids).unwrap();
        let loss = g.cross_entropy(logits, &[4, 6, 2, 0], &[true; 4]).unwrap();
        g.backward(loss).unwrap();
        assert!(g.param_grads().is_empty());
        assert!(g.grad(p).unwrap().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn log_softmax_normalizes() {
        let l = log_softmax(&[1.0, 2.0, f64::NEG_INFINITY, 0.5]);
        let s: f64 = l.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(l[2], f64::NEG_INFINITY);
    }
}
