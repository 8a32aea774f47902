//! Frozen scene encoder and the click/box visual prompt encoder.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    farthest_point_sampling, k_nearest, normalize_point, squared_distance, Box3D, Point3, PointCloud,
    SceneBounds,
};
use crate::nn::{Block, LayerNorm, Linear, Mlp};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

pub const SCENE_PREFIX: &str = "scene_encoder.";
pub const PROMPT_PREFIX: &str = "prompt_encoder.";
pub const TOKENS_PER_PROMPT: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Set-abstraction tokens before the down-sampling stage.
    pub n_tokens: usize,
    /// Tokens after the down-sampling stage.
    pub out_tokens: usize,
    pub k_nn: usize,
    pub d_enc: usize,
    pub heads: usize,
    pub hidden: usize,
    /// One attention block per radius, as fractions of the scene diagonal.
    pub radii: Vec<f64>,
    /// Number of blocks run before the FPS down-sampling stage.
    pub downsample_after: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_tokens: 64,
            out_tokens: 32,
            k_nn: 16,
            d_enc: 32,
            heads: 4,
            hidden: 64,
            radii: vec![0.16, 0.64, 1.44],
            downsample_after: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("encoder config: {m}")));
        if self.out_tokens == 0 || self.out_tokens > self.n_tokens {
            return bad("out_tokens must be in 1..=n_tokens");
        }
        if self.k_nn == 0 {
            return bad("k_nn must be positive");
        }
        if self.heads == 0 || self.d_enc % self.heads != 0 || self.d_enc % 2 != 0 {
            return bad("d_enc must be even and divisible by heads");
        }
        if self.downsample_after > self.radii.len() {
            return bad("downsample_after exceeds the number of blocks");
        }
        if self.radii.iter().any(|r| r.is_nan() || *r < 0.0) {
            return bad("radii must be non-negative");
        }
        Ok(())
    }
}

/// `M` scene tokens of width `d_enc` with their centroid positions.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneEmbedding {
    pub tokens: Tensor,
    pub positions: Vec<Point3>,
}

impl SceneEmbedding {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn width(&self) -> usize {
        self.tokens.dims2().1
    }

    pub fn token(&self, i: usize) -> &[f64] {
        let d = self.width();
        &self.tokens.data()[i * d..(i + 1) * d]
    }
}

/// `concat(sin(2π p·B), cos(2π p·B))` evaluated directly.
pub fn fourier_pe(p: &Point3, b: &Tensor) -> Vec<f64> {
    let (r, half) = b.dims2();
    debug_assert_eq!(r, 3);
    let proj: Vec<f64> = (0..half)
        .map(|j| 2.0 * PI * (0..3).map(|a| p[a] * b.data()[a * half + j]).sum::<f64>())
        .collect();
    proj.iter().map(|x| x.sin()).chain(proj.iter().map(|x| x.cos())).collect()
}

/// Differentiable Fourier features for `n x 3` rows of normalized points.
pub fn fourier_pe_graph(g: &mut Graph, points: Var, b: Var) -> Result<Var> {
    let proj = g.matmul(points, b)?;
    let proj = g.scale(proj, 2.0 * PI);
    let s = g.sin(proj);
    let c = g.cos(proj);
    g.concat_cols(&[s, c])
}

/// `true` where token `j` lies within `radius` of token `i`.
pub fn radius_mask(positions: &[Point3], radius: f64) -> Vec<bool> {
    let r2 = radius * radius;
    positions
        .iter()
        .flat_map(|a| positions.iter().map(move |b| squared_distance(a, b) <= r2))
        .collect()
}

#[derive(Clone, Debug)]
pub struct SceneEncoder {
    pub cfg: EncoderConfig,
    point_ffn: Mlp,
    pe_b: ParamId,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    warmup_head: Linear,
}

impl SceneEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: EncoderConfig, feature_dim: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let p = SCENE_PREFIX;
        let d = cfg.d_enc;
        let point_ffn = Mlp::new(store, &format!("{p}point_ffn"), feature_dim + 3, cfg.hidden, d, rng);
        let pe_b = store.add(format!("{p}pe_b"), Tensor::randn(&[3, d / 2], 1.0, rng));
        let blocks = (0..cfg.radii.len())
            .map(|i| Block::new(store, &format!("{p}block{i}"), d, cfg.heads, cfg.hidden, rng))
            .collect();
        let ln_out = LayerNorm::new(store, &format!("{p}ln_out"), d);
        let warmup_head = Linear::new(store, &format!("{p}warmup_head"), d, 3, rng);
        Ok(Self {
            cfg,
            point_ffn,
            pe_b,
            blocks,
            ln_out,
            warmup_head,
        })
    }

    /// Set abstraction: FPS centroids, then a max-pool over the shared
    /// pointwise FFN applied to each centroid's `k_nn` nearest points.
    /// Point inputs are the point features followed by the offset from the
    /// centroid in units of the scene diagonal.
    pub fn tokenize_points(&self, g: &mut Graph, store: &ParamStore, pc: &PointCloud, n_tokens: usize) -> Result<(Vec<usize>, Var)> {
        let n = pc.len();
        if n_tokens > n {
            return Err(Error::Invalid(format!("{n_tokens} tokens requested from {n} points")));
        }
        if pc.features().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point features".into()));
        }
        let diag = SceneBounds::of_points(pc).diagonal().max(f64::MIN_POSITIVE);
        let centroids = farthest_point_sampling(pc.coords(), n_tokens)?;
        let f = pc.feature_dim();
        let width = f + 3;
        let k = self.cfg.k_nn.min(n);
        let mut rows = Vec::with_capacity(n_tokens * k * width);
        let mut groups = Vec::with_capacity(n_tokens);
        for (t, &c) in centroids.iter().enumerate() {
            let center = pc.coords()[c];
            for &i in &k_nearest(pc.coords(), &center, k) {
                rows.extend_from_slice(pc.feature(i));
                let p = pc.coords()[i];
                rows.extend((0..3).map(|a| (p[a] - center[a]) / diag));
            }
            groups.push((t * k..(t + 1) * k).collect::<Vec<_>>());
        }
        let x = g.constant(n_tokens * k, width, rows)?;
        let h = self.point_ffn.forward(g, store, x)?;
        let pooled = g.max_pool(h, &groups)?;
        Ok((centroids, pooled))
    }

    /// Full encoder as graph nodes: token features and centroid positions.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pc: &PointCloud) -> Result<(Var, Vec<Point3>)> {
        let cfg = &self.cfg;
        if pc.len() < cfg.n_tokens {
            return Err(Error::Invalid(format!(
                "scene has {} points, encoder needs at least {}",
                pc.len(),
                cfg.n_tokens
            )));
        }
        let bounds = SceneBounds::of_points(pc);
        let diag = bounds.diagonal();
        let (centroids, mut x) = self.tokenize_points(g, store, pc, cfg.n_tokens)?;
        let mut positions: Vec<Point3> = centroids.iter().map(|&i| pc.coords()[i]).collect();
        let normalized = positions
            .iter()
            .map(|p| normalize_point(p, &bounds))
            .collect::<Result<Vec<_>>>()?;
        let pts = g.constant(positions.len(), 3, normalized.into_iter().flatten().collect())?;
        let b = g.param(store, self.pe_b);
        let pe = fourier_pe_graph(g, pts, b)?;
        x = g.add(x, pe)?;
        for (l, block) in self.blocks.iter().enumerate() {
            if l == cfg.downsample_after && cfg.out_tokens < positions.len() {
                let keep = farthest_point_sampling(&positions, cfg.out_tokens)?;
                x = g.gather_rows(x, &keep)?;
                positions = keep.iter().map(|&i| positions[i]).collect();
            }
            let mask = radius_mask(&positions, cfg.radii[l] * diag);
            x = block.forward(g, store, x, Some(&mask))?;
        }
        if cfg.downsample_after == self.blocks.len() && cfg.out_tokens < positions.len() {
            let keep = farthest_point_sampling(&positions, cfg.out_tokens)?;
            x = g.gather_rows(x, &keep)?;
            positions = keep.iter().map(|&i| positions[i]).collect();
        }
        let x = self.ln_out.forward(g, store, x)?;
        Ok((x, positions))
    }

    pub fn encode_scene(&self, store: &ParamStore, pc: &PointCloud) -> Result<SceneEmbedding> {
        let mut g = Graph::inference();
        let (x, positions) = self.forward(&mut g, store, pc)?;
        let tokens = g.to_tensor(x);
        if !tokens.is_finite() {
            return Err(Error::NonFinite("scene embedding".into()));
        }
        Ok(SceneEmbedding { tokens, positions })
    }

    /// Self-supervised warm-up: every output token regresses its own
    /// normalized centroid. Only scene-encoder parameters move. Returns the
    /// final mean squared error.
    pub fn warm_up(&self, store: &mut ParamStore, clouds: &[PointCloud], steps: usize, lr: f64) -> Result<f64> {
        let others = store.isolate(SCENE_PREFIX);
        let out = self.warm_up_inner(store, clouds, steps, lr);
        store.release(&others);
        out
    }

    fn warm_up_inner(&self, store: &mut ParamStore, clouds: &[PointCloud], steps: usize, lr: f64) -> Result<f64> {
        use crate::numerics::{AdamWConfig, OptimizerState};
        let mut opt = OptimizerState::new(AdamWConfig::default(), store);
        let mut last = f64::NAN;
        for step in 0..steps {
            let pc = &clouds[step % clouds.len()];
            let bounds = SceneBounds::of_points(pc);
            store.zero_grad();
            let mut g = Graph::new();
            let (x, positions) = self.forward(&mut g, store, pc)?;
            let pred = self.warmup_head.forward(&mut g, store, x)?;
            let target: Vec<f64> = positions
                .iter()
                .map(|p| normalize_point(p, &bounds))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect();
            let t = g.constant(positions.len(), 3, target)?;
            let diff = g.sub(pred, t)?;
            let sq = g.mul(diff, diff)?;
            let total = g.sum(sq);
            let loss = g.scale(total, 1.0 / (3 * positions.len()) as f64);
            last = g.scalar(loss);
            g.backward(loss)?;
            g.accumulate_into(store)?;
            opt.step(store, lr)?;
        }
        Ok(last)
    }
}

/// A single visual prompt.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prompt {
    Click(Point3),
    Box(Box3D),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Click,
    Box,
}

impl Prompt {
    pub fn kind(&self) -> PromptKind {
        match self {
            Prompt::Click(_) => PromptKind::Click,
            Prompt::Box(_) => PromptKind::Box,
        }
    }
}

/// `8·P` prompt token rows (absent when `P = 0`) and the kind of each prompt.
#[derive(Clone, Debug)]
pub struct PromptTokens {
    pub tokens: Option<Var>,
    pub kinds: Vec<PromptKind>,
    /// Boxes that contained no scene token and used the nearest one instead.
    pub fallbacks: usize,
}

impl PromptTokens {
    pub fn rows(&self) -> usize {
        TOKENS_PER_PROMPT * self.kinds.len()
    }
}

#[derive(Clone, Debug)]
pub struct PromptEncoder {
    pub d_mmt: usize,
    pub fourier_b: ParamId,
    click_ffn: Mlp,
    box_ffn: Mlp,
}

impl PromptEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d_enc: usize, d_pe: usize, hidden: usize, d_mmt: usize, rng: &mut R) -> Result<Self> {
        if d_pe == 0 || d_pe % 2 != 0 {
            return Err(Error::Invalid("prompt Fourier width must be even and positive".into()));
        }
        let p = PROMPT_PREFIX;
        let out = TOKENS_PER_PROMPT * d_mmt;
        Ok(Self {
            d_mmt,
            fourier_b: store.add(format!("{p}fourier_b"), Tensor::randn(&[3, d_pe / 2], 1.0, rng)),
            click_ffn: Mlp::new(store, &format!("{p}click_ffn"), d_pe, hidden, out, rng),
            box_ffn: Mlp::new(store, &format!("{p}box_ffn"), d_enc + 6, hidden, out, rng),
        })
    }

    pub fn encode_prompt(&self, g: &mut Graph, store: &ParamStore, prompt: &Prompt, scene: &SceneEmbedding, bounds: &SceneBounds) -> Result<(Var, bool)> {
        let (flat, fallback) = match prompt {
            Prompt::Click(p) => {
                if !bounds.contains(p) {
                    return Err(Error::Invalid(format!("click {p:?} lies outside the scene bounds")));
                }
                let u = normalize_point(p, bounds)?;
                let x = g.constant(1, 3, u.to_vec())?;
                let b = g.param(store, self.fourier_b);
                let pe = fourier_pe_graph(g, x, b)?;
                (self.click_ffn.forward(g, store, pe)?, false)
            }
            Prompt::Box(bx) => {
                let (lo, hi) = (bx.min_corner(), bx.max_corner());
                if (0..3).any(|a| hi[a] < bounds.min[a] || lo[a] > bounds.max[a]) {
                    return Err(Error::Invalid("box prompt does not intersect the scene".into()));
                }
                let inside: Vec<usize> = (0..scene.len()).filter(|&i| bx.contains(&scene.positions[i])).collect();
                let (members, fallback) = if inside.is_empty() {
                    let nearest = k_nearest(&scene.positions, &bx.center, 1);
                    (nearest, true)
                } else {
                    (inside, false)
                };
                let d = scene.width();
                let mut roi = vec![0.0; d];
                for &i in &members {
                    for (r, v) in roi.iter_mut().zip(scene.token(i)) {
                        *r += v;
                    }
                }
                let inv = 1.0 / members.len() as f64;
                roi.iter_mut().for_each(|r| *r *= inv);
                let c = normalize_point(&bx.center, bounds)?;
                let ext = bounds.extent();
                roi.extend_from_slice(&c);
                roi.extend((0..3).map(|a| bx.size[a] / ext[a]));
                let x = g.constant(1, d + 6, roi)?;
                (self.box_ffn.forward(g, store, x)?, fallback)
            }
        };
        Ok((g.reshape(flat, TOKENS_PER_PROMPT, self.d_mmt)?, fallback))
    }

    /// Token blocks for every prompt, concatenated in input order.
    pub fn encode_visual_prompts(&self, g: &mut Graph, store: &ParamStore, prompts: &[Prompt], scene: &SceneEmbedding, bounds: &SceneBounds) -> Result<PromptTokens> {
        let mut parts = Vec::with_capacity(prompts.len());
        let mut fallbacks = 0;
        for p in prompts {
            let (v, fb) = self.encode_prompt(g, store, p, scene, bounds)?;
            fallbacks += fb as usize;
            parts.push(v);
        }
        let tokens = match parts.len() {
            0 => None,
            1 => Some(parts[0]),
            _ => Some(g.concat_rows(&parts)?),
        };
        Ok(PromptTokens {
            tokens,
            kinds: prompts.iter().map(Prompt::kind).collect(),
            fallbacks,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_check;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
        let pts: Vec<[f64; 6]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(0.0..4.0),
                    rng.random_range(0.0..3.0),
                    rng.random_range(0.0..1.5),
                    rng.random(),
                    rng.random(),
                    rng.random(),
                ]
            })
            .collect();
        PointCloud::from_xyz_rgb(&pts).unwrap()
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            n_tokens: 16,
            out_tokens: 8,
            k_nn: 4,
            d_enc: 8,
            heads: 2,
            hidden: 16,
            radii: vec![0.3, 0.6, 1.2],
            downsample_after: 1,
        }
    }

    #[test]
    fn default_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = SceneEncoder::new(&mut store, EncoderConfig::default(), 4, &mut rng).unwrap();
        let pc = random_cloud(1024, &mut rng);
        let mut g = Graph::inference();
        let (c, _) = enc.tokenize_points(&mut g, &store, &pc, 64).unwrap();
        assert_eq!(c.len(), 64);
        let emb = enc.encode_scene(&store, &pc).unwrap();
        assert_eq!(emb.tokens.dims2(), (32, 32));
        assert_eq!(emb.positions.len(), 32);
    }

    #[test]
    fn single_neighbor_tokens_are_pointwise_ffn() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig { k_nn: 1, ..small_cfg() };
        let enc = SceneEncoder::new(&mut store, cfg, 4, &mut rng).unwrap();
        let pc = random_cloud(10, &mut rng);
        let mut g = Graph::inference();
        let (c, pooled) = enc.tokenize_points(&mut g, &store, &pc, 10).unwrap();
        for (t, &i) in c.iter().enumerate() {
            let mut row = pc.feature(i).to_vec();
            row.extend([0.0; 3]);
            let x = g.constant(1, 7, row).unwrap();
            let y = enc.point_ffn.forward(&mut g, &store, x).unwrap();
            assert_eq!(g.value(y), &g.value(pooled)[t * 8..(t + 1) * 8]);
        }
    }

    #[test]
    fn too_many_tokens_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = SceneEncoder::new(&mut store, small_cfg(), 4, &mut rng).unwrap();
        let pc = random_cloud(5, &mut rng);
        let mut g = Graph::inference();
        assert!(enc.tokenize_points(&mut g, &store, &pc, 6).is_err());
        assert!(enc.encode_scene(&store, &pc).is_err());
    }

    #[test]
    fn neighborhood_pooling_ignores_member_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::inference();
        let vals: Vec<f64> = (0..6 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = g.constant(6, 5, vals).unwrap();
        let a = g.max_pool(x, &[vec![0, 2, 3, 5]]).unwrap();
        let b = g.max_pool(x, &[vec![5, 3, 0, 2]]).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn encoder_is_point_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = SceneEncoder::new(&mut store, small_cfg(), 4, &mut rng).unwrap();
        let pc = random_cloud(200, &mut rng);
        let a = enc.encode_scene(&store, &pc).unwrap();
        let mut order: Vec<usize> = (0..pc.len()).collect();
        order.shuffle(&mut rng);
        let b = enc.encode_scene(&store, &pc.permuted(&order)).unwrap();
        let key = |e: &SceneEmbedding| {
            let mut v: Vec<(Point3, Vec<f64>)> = (0..e.len()).map(|i| (e.positions[i], e.token(i).to_vec())).collect();
            v.sort_by(|x, y| crate::geometry::lex_cmp(&x.0, &y.0));
            v
        };
        for ((pa, ta), (pb, tb)) in key(&a).iter().zip(key(&b).iter()) {
            assert_eq!(pa, pb);
            for (x, y) in ta.iter().zip(tb) {
                assert!((x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0));
            }
        }
    }

    #[test]
    fn infinite_radius_is_unmasked() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pos: Vec<Point3> = (0..7).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        assert!(radius_mask(&pos, f64::INFINITY).iter().all(|&m| m));
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, "b", 8, 2, 16, &mut rng);
        let mut g = Graph::inference();
        let x = g.tensor(&Tensor::randn(&[7, 8], 1.0, &mut rng));
        let mask = radius_mask(&pos, f64::INFINITY);
        let a = block.forward(&mut g, &store, x, Some(&mask)).unwrap();
        let b = block.forward(&mut g, &store, x, None).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn fourier_examples() {
        let zero_b = Tensor::zeros(&[3, 4]);
        let expect: Vec<f64> = [0.0; 4].into_iter().chain([1.0; 4]).collect();
        assert_eq!(fourier_pe(&[0.3, 0.6, 0.9], &zero_b), expect);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = Tensor::randn(&[3, 4], 1.0, &mut rng);
        assert_eq!(fourier_pe(&[0.0; 3], &b), expect);
        for _ in 0..20 {
            let p: Point3 = [rng.random(), rng.random(), rng.random()];
            let direct = fourier_pe(&p, &b);
            let mut g = Graph::inference();
            let x = g.constant(1, 3, p.to_vec()).unwrap();
            let bv = g.tensor(&b);
            let y = fourier_pe_graph(&mut g, x, bv).unwrap();
            for (j, (u, v)) in direct.iter().zip(g.value(y)).enumerate() {
                let half = 4;
                let arg: f64 = 2.0 * PI * (0..3).map(|a| p[a] * b.data()[a * half + j % half]).sum::<f64>();
                let oracle = if j < half { arg.sin() } else { arg.cos() };
                assert!((u - oracle).abs() < 1e-12 && (v - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fourier_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = Tensor::randn(&[3, 5], 0.7, &mut rng);
        let pts = Tensor::matrix(4, 3, (0..12).map(|_| rng.random()).collect()).unwrap();
        let err = finite_difference_check(
            |g, bv| {
                let x = g.tensor(&pts);
                let y = fourier_pe_graph(g, x, bv)?;
                let sq = g.mul(y, y)?;
                let w = g.add(sq, y)?;
                Ok(g.sum(w))
            },
            &b,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    fn prompt_setup() -> (ParamStore, PromptEncoder, SceneEmbedding, SceneBounds) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let enc = SceneEncoder::new(&mut store, small_cfg(), 4, &mut rng).unwrap();
        let pc = random_cloud(100, &mut rng);
        let scene = enc.encode_scene(&store, &pc).unwrap();
        let pe = PromptEncoder::new(&mut store, 8, 8, 16, 12, &mut rng).unwrap();
        (store, pe, scene, SceneBounds::of_points(&pc))
    }

    #[test]
    fn prompts_emit_eight_tokens_each() {
        let (store, pe, scene, bounds) = prompt_setup();
        let mut g = Graph::inference();
        let click = Prompt::Click([1.0, 1.0, 0.5]);
        let one = pe.encode_visual_prompts(&mut g, &store, &[click], &scene, &bounds).unwrap();
        assert_eq!(g.dims(one.tokens.unwrap()), (8, 12));
        let none = pe.encode_visual_prompts(&mut g, &store, &[], &scene, &bounds).unwrap();
        assert!(none.tokens.is_none());
        assert_eq!(none.rows(), 0);
        let bx = Prompt::Box(Box3D::new([2.0, 1.5, 0.7], [1.0, 1.0, 1.0]).unwrap());
        let three = pe.encode_visual_prompts(&mut g, &store, &[click, bx, click], &scene, &bounds).unwrap();
        let v = three.tokens.unwrap();
        assert_eq!(g.dims(v), (24, 12));
        assert_eq!(three.rows(), 24);
        let vals = g.value(v);
        assert_eq!(&vals[..96], &vals[192..]);
    }

    #[test]
    fn empty_box_falls_back_and_click_outside_fails() {
        let (store, pe, scene, bounds) = prompt_setup();
        let mut g = Graph::inference();
        let tiny = Prompt::Box(Box3D::new(scene.positions[0].map(|v| v + 1e-4), [1e-6; 3]).unwrap());
        let out = pe.encode_visual_prompts(&mut g, &store, &[tiny], &scene, &bounds).unwrap();
        assert_eq!(out.fallbacks, 1);
        let far = Prompt::Click([100.0, 0.0, 0.0]);
        assert!(pe.encode_visual_prompts(&mut g, &store, &[far], &scene, &bounds).is_err());
    }

    #[test]
    fn warm_up_reduces_centroid_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let enc = SceneEncoder::new(&mut store, small_cfg(), 4, &mut rng).unwrap();
        let clouds: Vec<PointCloud> = (0..3).map(|_| random_cloud(64, &mut rng)).collect();
        let before = enc.warm_up(&mut store.clone(), &clouds, 1, 1e-12).unwrap();
        let after = enc.warm_up(&mut store, &clouds, 60, 3e-3).unwrap();
        assert!(after < before, "{after} >= {before}");
    }
}
