//! Multi-modal transformer over learnable querying tokens, and the linear
//! projector into the language model's embedding space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::SceneEmbedding;
use crate::error::{Error, Result};
use crate::nn::{Attention, LayerNorm, Linear, Mlp};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::textio::TokenId;

pub const MMT_PREFIX: &str = "mmt.";
pub const PROJECTOR_PREFIX: &str = "projector.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Prompts join the queries in self-attention and cross-attention.
    Early,
    /// Prompts are appended to the scene tokens as extra keys/values.
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MmtConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_mmt: usize,
    pub hidden: usize,
    pub n_queries: usize,
    /// Longest instruction the position table covers.
    pub max_positions: usize,
    pub fusion: Fusion,
}

impl Default for MmtConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            heads: 4,
            d_mmt: 64,
            hidden: 128,
            n_queries: 32,
            max_positions: 256,
            fusion: Fusion::Early,
        }
    }
}

impl MmtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_mmt % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "mmt width {} not divisible by {} heads",
                self.d_mmt, self.heads
            )));
        }
        if self.n_queries == 0 {
            return Err(Error::Invalid("mmt needs at least one query".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct MmtLayer {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    kv_proj: Linear,
    cross_attn: Attention,
    ln_ff: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct Interactor {
    pub cfg: MmtConfig,
    pub queries: ParamId,
    word_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<MmtLayer>,
    ln_out: LayerNorm,
}

impl Interactor {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: MmtConfig, d_enc: usize, vocab: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let p = MMT_PREFIX;
        let d = cfg.d_mmt;
        let queries = store.add(format!("{p}queries"), Tensor::randn(&[cfg.n_queries, d], 1.0, rng));
        let word_emb = store.add(format!("{p}word_emb"), Tensor::randn(&[vocab, d], 1.0, rng));
        let pos_emb = store.add(format!("{p}pos_emb"), Tensor::randn(&[cfg.max_positions, d], 0.1, rng));
        let layers = (0..cfg.layers)
            .map(|l| {
                let n = format!("{p}layer{l}");
                MmtLayer {
                    ln_self: LayerNorm::new(store, &format!("{n}.ln_self"), d),
                    self_attn: Attention::new(store, &format!("{n}.self_attn"), d, d, cfg.heads, rng),
                    ln_cross: LayerNorm::new(store, &format!("{n}.ln_cross"), d),
                    kv_proj: Linear::new(store, &format!("{n}.kv_proj"), d_enc, d, rng),
                    cross_attn: Attention::new(store, &format!("{n}.cross_attn"), d, d, cfg.heads, rng),
                    ln_ff: LayerNorm::new(store, &format!("{n}.ln_ff"), d),
                    mlp: Mlp::new(store, &format!("{n}.mlp"), d, cfg.hidden, d, rng),
                }
            })
            .collect();
        let ln_out = LayerNorm::new(store, &format!("{p}ln_out"), d);
        Ok(Self {
            cfg,
            queries,
            word_emb,
            pos_emb,
            layers,
            ln_out,
        })
    }

    /// Returns the `n_queries x d_mmt` output query rows.
    ///
    /// `prompts` holds `8·P` rows (or `None`), `instruction` the token ids of
    /// the instruction, which may be empty.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, prompts: Option<Var>, instruction: &[TokenId], scene: &SceneEmbedding) -> Result<Var> {
        if scene.is_empty() {
            return Err(Error::Invalid("mmt needs a nonempty scene".into()));
        }
        let d = self.cfg.d_mmt;
        if let Some(p) = prompts {
            if g.dims(p).1 != d {
                return Err(Error::shape("mmt_forward", format!("prompt width {} vs {d}", g.dims(p).1)));
            }
        }
        if instruction.len() > self.cfg.max_positions {
            return Err(Error::Invalid(format!(
                "instruction of {} tokens exceeds {} mmt positions",
                instruction.len(),
                self.cfg.max_positions
            )));
        }
        let nq = self.cfg.n_queries;
        let n_prompt = prompts.map_or(0, |p| g.dims(p).0);
        let mut parts = vec![g.param(store, self.queries)];
        if self.cfg.fusion == Fusion::Early {
            parts.extend(prompts);
        }
        if !instruction.is_empty() {
            let ids: Vec<usize> = instruction.iter().map(|&t| t as usize).collect();
            let we = g.param(store, self.word_emb);
            let pe = g.param(store, self.pos_emb);
            let w = g.gather_rows(we, &ids)?;
            let p = g.slice_rows(pe, 0, ids.len())?;
            parts.push(g.add(w, p)?);
        }
        let mut x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let n_cross = match self.cfg.fusion {
            Fusion::Early => nq + n_prompt,
            Fusion::Direct => nq,
        };
        let scene_tokens = g.tensor(&scene.tokens);
        for layer in &self.layers {
            let h = layer.ln_self.forward(g, store, x)?;
            let a = layer.self_attn.forward(g, store, h, h, None)?;
            x = g.add(x, a)?;

            let mut kv = layer.kv_proj.forward(g, store, scene_tokens)?;
            if let (Fusion::Direct, Some(p)) = (self.cfg.fusion, prompts) {
                kv = g.concat_rows(&[kv, p])?;
            }
            let total = g.dims(x).0;
            let top = if total == n_cross { x } else { g.slice_rows(x, 0, n_cross)? };
            let h = layer.ln_cross.forward(g, store, top)?;
            let c = layer.cross_attn.forward(g, store, h, kv, None)?;
            let top = g.add(top, c)?;
            x = if total == n_cross {
                top
            } else {
                let rest = g.slice_rows(x, n_cross, total - n_cross)?;
                g.concat_rows(&[top, rest])?
            };

            let h = layer.ln_ff.forward(g, store, x)?;
            let m = layer.mlp.forward(g, store, h)?;
            x = g.add(x, m)?;
        }
        let q = g.slice_rows(x, 0, nq)?;
        self.ln_out.forward(g, store, q)
    }
}

/// Single linear map from query width to the language model width.
#[derive(Clone, Debug)]
pub struct Projector {
    pub linear: Linear,
}

impl Projector {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d_mmt: usize, d_lm: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::new(store, &format!("{PROJECTOR_PREFIX}linear"), d_mmt, d_lm, rng),
        }
    }

    pub fn project_prefix(&self, g: &mut Graph, store: &ParamStore, q: Var) -> Result<Var> {
        self.linear.forward(g, store, q)
    }
}
