//! Greedy, beam and top-k/top-p decoding over any next-token scorer.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{log_softmax, LanguageModel};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::textio::{TokenId, EOS};

/// Supplies next-token logits given the tokens generated so far.
pub trait StepScorer {
    fn next_logits(&mut self, generated: &[TokenId]) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam,
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub strategy: Strategy,
    pub beam: usize,
    pub top_k: usize,
    pub top_p: f64,
    pub ngram_block: usize,
    /// Whether the repeated n-gram filter is applied. Unset means on for
    /// sampling and off otherwise.
    pub ngram_filter: Option<bool>,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub eos: TokenId,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Beam,
            beam: 4,
            top_k: 50,
            top_p: 0.95,
            ngram_block: 4,
            ngram_filter: None,
            max_new_tokens: 128,
            seed: 0,
            eos: EOS,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("generation config: {m}")));
        if self.beam == 0 {
            return bad("beam must be at least 1");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must lie in (0, 1]");
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1");
        }
        if self.ngram_block == 0 {
            return bad("ngram_block must be at least 1");
        }
        Ok(())
    }

    pub fn filter_on(&self) -> bool {
        self.ngram_filter.unwrap_or(self.strategy == Strategy::Sample)
    }
}

/// Generated tokens (without the end token) and their summed log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    /// Whether decoding stopped on the end token.
    pub finished: bool,
}

/// Tokens that would complete an `n`-gram already present in `history`.
pub fn ngram_block_filter(history: &[TokenId], n: usize) -> BTreeSet<TokenId> {
    let mut banned = BTreeSet::new();
    if n == 0 || history.len() < n.saturating_sub(1) || history.is_empty() {
        return banned;
    }
    let ctx = &history[history.len() + 1 - n..];
    for w in history.windows(n) {
        if &w[..n - 1] == ctx {
            banned.insert(w[n - 1]);
        }
    }
    banned
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<TokenId>,
    score: f64,
}

fn better(a: &Hyp, b: &Hyp) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search on raw summed log-probabilities. Ties go to the
/// lexicographically smaller token sequence. With `beam > 1` the greedy
/// rollout is also scored and kept if it beats every beam.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &mut S, gen: &GenerationConfig) -> Result<Generation> {
    gen.validate()?;
    let best = run_beam(scorer, gen, gen.beam)?;
    if gen.beam == 1 {
        return Ok(best);
    }
    let greedy = run_beam(scorer, gen, 1)?;
    if greedy.log_prob > best.log_prob {
        log::debug!("greedy rollout beat beam search ({} > {})", greedy.log_prob, best.log_prob);
        return Ok(greedy);
    }
    Ok(best)
}

pub fn greedy<S: StepScorer + ?Sized>(scorer: &mut S, gen: &GenerationConfig) -> Result<Generation> {
    gen.validate()?;
    run_beam(scorer, gen, 1)
}

fn run_beam<S: StepScorer + ?Sized>(scorer: &mut S, gen: &GenerationConfig, width: usize) -> Result<Generation> {
    let filter = gen.filter_on();
    let mut alive = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    for _ in 0..gen.max_new_tokens {
        let mut cands = Vec::new();
        for h in &alive {
            let lp = log_softmax(&scorer.next_logits(&h.tokens)?);
            let banned = if filter {
                ngram_block_filter(&h.tokens, gen.ngram_block)
            } else {
                BTreeSet::new()
            };
            let before = cands.len();
            for (v, &l) in lp.iter().enumerate() {
                let v = v as TokenId;
                if l.is_finite() && !banned.contains(&v) {
                    let mut tokens = h.tokens.clone();
                    tokens.push(v);
                    cands.push(Hyp {
                        tokens,
                        score: h.score + l,
                    });
                }
            }
            if cands.len() == before {
                // Nothing may follow: the hypothesis ends where it is.
                let mut tokens = h.tokens.clone();
                tokens.push(gen.eos);
                finished.push(Hyp { tokens, score: h.score });
            }
        }
        cands.sort_by(better);
        cands.truncate(width);
        alive.clear();
        for c in cands {
            if c.tokens.last() == Some(&gen.eos) {
                finished.push(c);
            } else {
                alive.push(c);
            }
        }
        if alive.is_empty() {
            break;
        }
        // Extensions only lower scores, so a finished leader cannot be beaten.
        if let Some(f) = finished.iter().min_by(|a, b| better(a, b)) {
            if f.score > alive[0].score {
                break;
            }
        }
    }
    let mut all: Vec<(Hyp, bool)> = finished.into_iter().map(|h| (h, true)).collect();
    all.extend(alive.into_iter().map(|h| (h, false)));
    let (mut best, done) = all
        .into_iter()
        .min_by(|a, b| better(&a.0, &b.0))
        .expect("at least one hypothesis");
    if done {
        best.tokens.pop();
    }
    Ok(Generation {
        tokens: best.tokens,
        log_prob: best.score,
        finished: done,
    })
}

/// Top-k truncation by logit (ties to the lower id), then the smallest
/// prefix whose renormalized mass reaches `p`. Returns the renormalized set.
pub fn nucleus(logits: &[f64], k: usize, p: f64) -> Vec<(TokenId, f64)> {
    let mut order: Vec<usize> = (0..logits.len()).filter(|&i| logits[i] > f64::NEG_INFINITY).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    if order.is_empty() {
        return Vec::new();
    }
    let max = logits[order[0]];
    let w: Vec<f64> = order.iter().map(|&i| (logits[i] - max).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut keep = order.len();
    let mut cum = 0.0;
    for (j, wi) in w.iter().enumerate() {
        cum += wi / z;
        if cum >= p {
            keep = j + 1;
            break;
        }
    }
    let z2: f64 = w[..keep].iter().sum();
    order[..keep]
        .iter()
        .zip(&w)
        .map(|(&i, wi)| (i as TokenId, wi / z2))
        .collect()
}

pub fn sample_top_k_top_p<S: StepScorer + ?Sized>(scorer: &mut S, gen: &GenerationConfig) -> Result<Generation> {
    sample_traced(scorer, gen).map(|(g, _)| g)
}

/// Sampling that also returns the nucleus set used at every step.
pub fn sample_traced<S: StepScorer + ?Sized>(scorer: &mut S, gen: &GenerationConfig) -> Result<(Generation, Vec<Vec<(TokenId, f64)>>)> {
    gen.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(gen.seed);
    let filter = gen.filter_on();
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let mut trace = Vec::new();
    let mut finished = false;
    for _ in 0..gen.max_new_tokens {
        let mut logits = scorer.next_logits(&tokens)?;
        let lp = log_softmax(&logits);
        if filter {
            for v in ngram_block_filter(&tokens, gen.ngram_block) {
                logits[v as usize] = f64::NEG_INFINITY;
            }
        }
        let set = nucleus(&logits, gen.top_k, gen.top_p);
        let next = if set.is_empty() {
            gen.eos
        } else {
            let u: f64 = rng.random();
            let mut cum = 0.0;
            let mut pick = set[set.len() - 1].0;
            for &(t, q) in &set {
                cum += q;
                if u < cum {
                    pick = t;
                    break;
                }
            }
            pick
        };
        trace.push(set);
        log_prob += lp.get(next as usize).copied().unwrap_or(f64::NEG_INFINITY);
        if next == gen.eos {
            finished = true;
            break;
        }
        tokens.push(next);
    }
    Ok((
        Generation {
            tokens,
            log_prob,
            finished,
        },
        trace,
    ))
}

/// Dispatches on the configured strategy.
pub fn generate<S: StepScorer + ?Sized>(scorer: &mut S, gen: &GenerationConfig) -> Result<Generation> {
    match gen.strategy {
        Strategy::Greedy => greedy(scorer, gen),
        Strategy::Beam => beam_search(scorer, gen),
        Strategy::Sample => sample_top_k_top_p(scorer, gen),
    }
}

/// Scores continuations of a fixed prefix and context with the language model.
pub struct LmScorer<'a> {
    pub lm: &'a LanguageModel,
    pub store: &'a ParamStore,
    pub prefix: Option<Tensor>,
    pub context: Vec<TokenId>,
}

impl StepScorer for LmScorer<'_> {
    fn next_logits(&mut self, generated: &[TokenId]) -> Result<Vec<f64>> {
        let mut ids = self.context.clone();
        ids.extend_from_slice(generated);
        if ids.is_empty() {
            return Err(Error::Invalid("generation needs at least one context token".into()));
        }
        let mut g = Graph::inference();
        let prefix = self.prefix.as_ref().map(|p| g.tensor(p));
        let last = ids.len() - 1;
        let logits = self.lm.forward_from(&mut g, self.store, prefix, &ids, last)?;
        Ok(g.value(logits).to_vec())
    }
}

/// Deterministic pseudo-random logit tables keyed on the history; used as
/// an oracle-friendly stand-in for a model.
#[derive(Clone, Debug)]
pub struct TableScorer {
    pub vocab: usize,
    pub seed: u64,
    pub scale: f64,
}

impl TableScorer {
    pub fn logits_for(&self, history: &[TokenId]) -> Vec<f64> {
        let key = history.iter().fold(self.seed ^ 0xcbf2_9ce4_8422_2325, |h, &t| {
            (h ^ (t as u64 + 1)).wrapping_mul(0x0000_0100_0000_01b3)
        });
        let mut rng = ChaCha8Rng::seed_from_u64(key ^ history.len() as u64);
        (0..self.vocab).map(|_| self.scale * rng.random_range(-1.0..1.0)).collect()
    }
}

impl StepScorer for TableScorer {
    fn next_logits(&mut self, generated: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.logits_for(generated))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<f64>);

    impl StepScorer for Fixed {
        fn next_logits(&mut self, _: &[TokenId]) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    fn cfg(strategy: Strategy, eos: TokenId, max_new: usize) -> GenerationConfig {
        GenerationConfig {
            strategy,
            max_new_tokens: max_new,
            eos,
            ..GenerationConfig::default()
        }
    }

    /// Best `(score, tokens)` over every sequence of at most `len` tokens,
    /// where the end token terminates a sequence early.
    pub(crate) fn exhaustive(t: &TableScorer, eos: TokenId, len: usize) -> (f64, Vec<TokenId>) {
        fn walk(t: &TableScorer, eos: TokenId, left: usize, hist: &mut Vec<TokenId>, score: f64, best: &mut (f64, Vec<TokenId>)) {
            if left == 0 {
                consider(best, score, hist.clone());
                return;
            }
            let lp = log_softmax(&t.logits_for(hist));
            for v in 0..t.vocab as TokenId {
                let s = score + lp[v as usize];
                if v == eos {
                    consider(best, s, hist.clone());
                } else {
                    hist.push(v);
                    walk(t, eos, left - 1, hist, s, best);
                    hist.pop();
                }
            }
        }
        fn consider(best: &mut (f64, Vec<TokenId>), s: f64, toks: Vec<TokenId>) {
            if s > best.0 || (s == best.0 && toks < best.1) {
                *best = (s, toks);
            }
        }
        let mut best = (f64::NEG_INFINITY, Vec::new());
        walk(t, eos, len, &mut Vec::new(), 0.0, &mut best);
        best
    }

    #[test]
    fn two_token_vocab_picks_larger_logit() {
        let mut s = Fixed(vec![1.0, 0.2]);
        let g = beam_search(&mut s, &cfg(Strategy::Beam, 9, 1)).unwrap();
        assert_eq!(g.tokens, vec![0]);
    }

    #[test]
    fn exhaustive_beam_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..40 {
            let vocab = rng.random_range(2..=5);
            let len = rng.random_range(1..=4);
            let eos = rng.random_range(0..vocab as TokenId);
            let mut t = TableScorer {
                vocab,
                seed: case,
                scale: 3.0,
            };
            let mut gen = cfg(Strategy::Beam, eos, len);
            gen.beam = vocab.pow(len as u32);
            let got = beam_search(&mut t, &gen).unwrap();
            let (score, toks) = exhaustive(&t, eos, len);
            assert_eq!(got.tokens, toks, "case {case}");
            assert!((got.log_prob - score).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_never_loses_to_greedy() {
        for seed in 0..50 {
            let mut t = TableScorer {
                vocab: 7,
                seed,
                scale: 2.0,
            };
            let g = greedy(&mut t, &cfg(Strategy::Greedy, 0, 6)).unwrap();
            let b = beam_search(&mut t, &cfg(Strategy::Beam, 0, 6)).unwrap();
            assert!(b.log_prob >= g.log_prob);
        }
    }

    #[test]
    fn beam_of_one_is_greedy_with_low_id_ties() {
        let mut s = Fixed(vec![0.5, 2.0, 2.0, 1.0]);
        let mut gen = cfg(Strategy::Beam, 3, 3);
        gen.beam = 1;
        assert_eq!(beam_search(&mut s, &gen).unwrap().tokens, vec![1, 1, 1]);
    }

    #[test]
    fn ngram_examples() {
        assert!(ngram_block_filter(&[], 2).is_empty());
        assert_eq!(ngram_block_filter(&[3, 1, 3], 1), BTreeSet::from([1, 3]));
        // history "a b a", after "a" the token "b" would repeat "a b"
        assert_eq!(ngram_block_filter(&[0, 1, 0], 2), BTreeSet::from([1]));
        assert!(ngram_block_filter(&[0, 1, 2], 2).is_empty());
        assert_eq!(ngram_block_filter(&[5, 6, 7, 5, 6], 3), BTreeSet::from([7]));
    }

    #[test]
    fn top_k_one_is_greedy() {
        for seed in 0..10 {
            let mut t = TableScorer {
                vocab: 9,
                seed,
                scale: 2.0,
            };
            let mut gen = cfg(Strategy::Sample, 0, 8);
            gen.top_k = 1;
            gen.seed = seed;
            let s = sample_top_k_top_p(&mut t, &gen).unwrap();
            let g = greedy(&mut t, &gen).unwrap();
            assert_eq!(s.tokens, g.tokens);
        }
    }

    #[test]
    fn sampled_tokens_stay_in_nucleus() {
        let mut t = TableScorer {
            vocab: 20,
            seed: 3,
            scale: 4.0,
        };
        for seed in 0..20 {
            let mut gen = cfg(Strategy::Sample, 0, 16);
            gen.top_k = 6;
            gen.top_p = 0.7;
            gen.seed = seed;
            let (g, trace) = sample_traced(&mut t, &gen).unwrap();
            let mut emitted = g.tokens.clone();
            if g.finished {
                emitted.push(0);
            }
            assert_eq!(emitted.len(), trace.len());
            for (tok, set) in emitted.iter().zip(&trace) {
                assert!(set.len() <= 6);
                assert!(set.iter().any(|(s, _)| s == tok));
            }
        }
    }

    #[test]
    fn nucleus_examples() {
        let set = nucleus(&[0.0, (3.0f64).ln(), f64::NEG_INFINITY, (6.0f64).ln()], 50, 0.95);
        let ids: Vec<TokenId> = set.iter().map(|s| s.0).collect();
        assert_eq!(ids, vec![3, 1, 0]);
        let set = nucleus(&[0.0, (3.0f64).ln(), 0.0, (6.0f64).ln()], 50, 0.8);
        // masses 0.6, 0.3, then 0.9 ≥ 0.8 stops
        assert_eq!(set.len(), 2);
        assert!((set[0].1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(nucleus(&[1.0, 1.0, 1.0], 2, 1.0).iter().map(|s| s.0).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn all_banned_emits_end() {
        let mut s = Fixed(vec![0.0, 0.0]);
        let mut gen = cfg(Strategy::Sample, 5, 10);
        gen.ngram_block = 1;
        let g = sample_top_k_top_p(&mut s, &gen).unwrap();
        assert_eq!(g.tokens.len(), 2);
        assert!(g.finished);
    }

    #[test]
    fn sampling_is_seeded() {
        let mut t = TableScorer {
            vocab: 12,
            seed: 8,
            scale: 1.0,
        };
        let mut gen = cfg(Strategy::Sample, 0, 12);
        gen.seed = 7;
        let a = sample_top_k_top_p(&mut t, &gen).unwrap();
        let b = sample_top_k_top_p(&mut t, &gen).unwrap();
        assert_eq!(a, b);
    }
}
