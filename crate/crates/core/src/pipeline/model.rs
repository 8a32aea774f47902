//! The assembled model: frozen scene encoder and language model around the
//! trainable prompt encoder, querying transformer and projector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use crate::datagen::{Dataset, SceneRecord};
use crate::encoders::{Prompt, PromptEncoder, SceneEmbedding, SceneEncoder, PROMPT_PREFIX, SCENE_PREFIX};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, SceneBounds};
use crate::interactor::{Interactor, Projector, MMT_PREFIX, PROJECTOR_PREFIX};
use crate::lm::{
    generate, pretrain_lm, Generation, GenerationConfig, LanguageModel, LmScorer, PretrainReport, LM_PREFIX,
};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::textio::{TokenId, TokenSequence, Vocabulary};

/// Parameter name prefixes updated by instruction tuning.
pub const TRAINABLE_PREFIXES: [&str; 3] = [PROMPT_PREFIX, MMT_PREFIX, PROJECTOR_PREFIX];
/// Parameter name prefixes that stay frozen during instruction tuning.
pub const FROZEN_PREFIXES: [&str; 2] = [SCENE_PREFIX, LM_PREFIX];

/// Frozen scene embedding plus the bounds used to normalize prompts.
#[derive(Clone, Debug)]
pub struct SceneContext {
    pub embedding: SceneEmbedding,
    pub bounds: SceneBounds,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub encoder: SceneEncoder,
    pub prompt_encoder: PromptEncoder,
    pub interactor: Interactor,
    pub projector: Projector,
    pub lm: LanguageModel,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PrepareReport {
    pub encoder_warmup_mse: f64,
    pub lm: PretrainReport,
}

impl Model {
    /// Fresh parameters, deterministic in `config.seed`.
    pub fn new(config: RunConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d_enc = config.encoder.d_enc;
        let d_mmt = config.mmt.d_mmt;
        let encoder = SceneEncoder::new(&mut store, config.encoder.clone(), PointCloud::XYZ_RGB_FEATURES, &mut rng)?;
        let prompt_encoder = PromptEncoder::new(&mut store, d_enc, config.prompt.d_pe, config.prompt.hidden, d_mmt, &mut rng)?;
        let interactor = Interactor::new(&mut store, config.mmt.clone(), d_enc, vocab.len(), &mut rng)?;
        let projector = Projector::new(&mut store, d_mmt, config.lm.d_lm, &mut rng);
        let lm = LanguageModel::new(&mut store, config.lm.with_vocab(vocab.len()), &mut rng)?;
        Ok(Self {
            config,
            vocab,
            store,
            encoder,
            prompt_encoder,
            interactor,
            projector,
            lm,
        })
    }

    /// Warms up and freezes the scene encoder, then pre-trains and freezes
    /// the language model on the dataset's sequences.
    pub fn prepare(&mut self, dataset: &Dataset, heldout: &Dataset) -> Result<PrepareReport> {
        let clouds = dataset
            .scenes
            .iter()
            .map(SceneRecord::point_cloud)
            .collect::<Result<Vec<_>>>()?;
        let t = &self.config.train;
        let mse = if t.encoder_warmup_steps > 0 && !clouds.is_empty() {
            self.encoder.warm_up(&mut self.store, &clouds, t.encoder_warmup_steps, t.encoder_warmup_lr)?
        } else {
            f64::NAN
        };
        self.store.set_frozen_prefix(SCENE_PREFIX, true);
        let train: Vec<TokenSequence> = dataset.samples.iter().map(|s| s.sequence(&self.vocab)).collect();
        let held: Vec<TokenSequence> = heldout.samples.iter().map(|s| s.sequence(&self.vocab)).collect();
        let lm = pretrain_lm(&self.lm, &mut self.store, &train, &held, &self.config.pretrain)?;
        self.freeze_base();
        Ok(PrepareReport {
            encoder_warmup_mse: mse,
            lm,
        })
    }

    pub fn freeze_base(&mut self) {
        for p in FROZEN_PREFIXES {
            self.store.set_frozen_prefix(p, true);
        }
    }

    pub fn is_trainable_name(name: &str) -> bool {
        TRAINABLE_PREFIXES.iter().any(|p| name.starts_with(p))
    }

    pub fn scene_context(&self, scene: &SceneRecord) -> Result<SceneContext> {
        let pc = scene.point_cloud()?;
        Ok(SceneContext {
            embedding: self.encoder.encode_scene(&self.store, &pc)?,
            bounds: SceneBounds::of_points(&pc),
        })
    }

    /// Output query rows of the interactor (`n_queries x d_mmt`).
    pub fn queries(&self, g: &mut Graph, ctx: &SceneContext, prompts: &[Prompt], instruction: &[TokenId]) -> Result<Var> {
        let p = self
            .prompt_encoder
            .encode_visual_prompts(g, &self.store, prompts, &ctx.embedding, &ctx.bounds)?;
        self.interactor.forward(g, &self.store, p.tokens, instruction, &ctx.embedding)
    }

    /// Prefix rows fed to the language model (`n_queries x d_lm`).
    pub fn prefix(&self, g: &mut Graph, ctx: &SceneContext, prompts: &[Prompt], instruction: &[TokenId]) -> Result<Var> {
        let q = self.queries(g, ctx, prompts, instruction)?;
        self.projector.project_prefix(g, &self.store, q)
    }

    pub fn prefix_tensor(&self, ctx: &SceneContext, prompts: &[Prompt], instruction: &[TokenId]) -> Result<Tensor> {
        let mut g = Graph::inference();
        let p = self.prefix(&mut g, ctx, prompts, instruction)?;
        let t = g.to_tensor(p);
        if !t.is_finite() {
            return Err(Error::NonFinite("prefix embeddings".into()));
        }
        Ok(t)
    }

    pub fn query_tensor(&self, ctx: &SceneContext, prompts: &[Prompt], instruction: &[TokenId]) -> Result<Tensor> {
        let mut g = Graph::inference();
        let q = self.queries(&mut g, ctx, prompts, instruction)?;
        Ok(g.to_tensor(q))
    }

    /// Logits predicting each response token (and the end token) under
    /// teacher forcing, with the matching targets.
    pub fn response_logits(&self, g: &mut Graph, ctx: &SceneContext, prompts: &[Prompt], seq: &TokenSequence) -> Result<(Var, Vec<usize>)> {
        let start = seq
            .response_start()
            .ok_or_else(|| Error::Invalid("sequence has no response tokens".into()))?;
        if start == 0 {
            return Err(Error::Invalid("sequence has no instruction tokens".into()));
        }
        let instruction = &seq.ids[..start];
        let prefix = self.prefix(g, ctx, prompts, instruction)?;
        let t = seq.len();
        let logits = self.lm.forward_from(g, &self.store, Some(prefix), &seq.ids[..t - 1], start - 1)?;
        let targets = seq.ids[start..].iter().map(|&i| i as usize).collect();
        Ok((logits, targets))
    }

    /// Mean cross-entropy over the response and end token.
    pub fn sample_loss(&self, g: &mut Graph, ctx: &SceneContext, prompts: &[Prompt], seq: &TokenSequence) -> Result<Var> {
        let (logits, targets) = self.response_logits(g, ctx, prompts, seq)?;
        let mask = vec![true; targets.len()];
        g.cross_entropy(logits, &targets, &mask)
    }

    /// Teacher-forced argmax hits and target count for one sequence.
    pub fn teacher_forced_hits(&self, ctx: &SceneContext, prompts: &[Prompt], seq: &TokenSequence) -> Result<(usize, usize)> {
        let mut g = Graph::inference();
        let (logits, targets) = self.response_logits(&mut g, ctx, prompts, seq)?;
        let v = self.vocab.len();
        let hits = g
            .value(logits)
            .chunks(v)
            .zip(&targets)
            .filter(|(row, &t)| {
                let best = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i);
                best == Some(t)
            })
            .count();
        Ok((hits, targets.len()))
    }

    pub fn generate_ids(&self, ctx: &SceneContext, prompts: &[Prompt], instruction: &[TokenId], gen: &GenerationConfig) -> Result<Generation> {
        let prefix = self.prefix_tensor(ctx, prompts, instruction)?;
        // The step producing token i reads prefix + instruction + i positions.
        let used = prefix.dims2().0 + instruction.len();
        let room = (self.lm.cfg.max_positions + 1).saturating_sub(used);
        if room == 0 {
            return Err(Error::Invalid(format!(
                "instruction needs {used} positions, more than the lm maximum of {}",
                self.lm.cfg.max_positions
            )));
        }
        let capped;
        let gen = if gen.max_new_tokens > room {
            log::debug!("capping generation at {room} tokens by the lm context length");
            capped = GenerationConfig {
                max_new_tokens: room,
                ..gen.clone()
            };
            &capped
        } else {
            gen
        };
        let mut scorer = LmScorer {
            lm: &self.lm,
            store: &self.store,
            prefix: Some(prefix),
            context: instruction.to_vec(),
        };
        generate(&mut scorer, gen)
    }

    /// Response text for an instruction (which must end with the assistant
    /// identifier).
    pub fn respond(&self, ctx: &SceneContext, prompts: &[Prompt], instruction: &str, gen: &GenerationConfig) -> Result<(String, Generation)> {
        let ids = self.vocab.encode(instruction);
        let out = self.generate_ids(ctx, prompts, &ids, gen)?;
        Ok((self.vocab.decode(&out.tokens), out))
    }
}
