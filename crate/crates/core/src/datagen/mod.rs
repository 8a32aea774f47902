//! Synthetic scenes, training-sample assembly and multi-turn decomposition.

mod io;
mod scene;

pub use io::{read_scene, scene_from_json, scene_to_json, write_scene};
pub use scene::{color_rgb, generate_scene, nearest_other, SceneConfig, CATEGORIES, COLORS};

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::Prompt;
use crate::error::{Error, Result};
use crate::geometry::{Box3D, PointCloud, SceneBounds};
use crate::textio::{
    dialogue_text, instruction_text, normalize, render_spatial, SpatialToken, Template, TokenSequence, Vocabulary,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub bbox: Box3D,
    pub category: String,
    pub attributes: BTreeMap<String, String>,
    pub captions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    pub related: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Human,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub goal: String,
    pub steps: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    /// `[x, y, z, r, g, b]` per point.
    pub points: Vec<[f64; 6]>,
    pub instances: Vec<Instance>,
    pub qa: Vec<QaPair>,
    pub dialogues: Vec<Vec<Turn>>,
    pub plans: Vec<Plan>,
}

fn scene_color(inst: &Instance) -> Result<[f64; 3]> {
    let name = inst
        .attributes
        .get("color")
        .ok_or_else(|| Error::Schema {
            field: "instances.attributes.color".into(),
            detail: "missing".into(),
        })?;
    color_rgb(name).ok_or_else(|| Error::Schema {
        field: "instances.attributes.color".into(),
        detail: format!("unknown color `{name}`"),
    })
}

impl SceneRecord {
    pub fn point_cloud(&self) -> Result<PointCloud> {
        PointCloud::from_xyz_rgb(&self.points)
    }

    pub fn bounds(&self) -> SceneBounds {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        SceneBounds { min, max }
    }

    /// Checks instance references and that boxes lie inside the point bounds.
    pub fn validate(&self) -> Result<()> {
        let schema = |field: String, detail: String| Err(Error::Schema { field, detail });
        if self.points.is_empty() {
            return schema("points".into(), "no points".into());
        }
        let b = self.bounds();
        for (i, inst) in self.instances.iter().enumerate() {
            let (lo, hi) = (inst.bbox.min_corner(), inst.bbox.max_corner());
            if !(b.contains(&lo) && b.contains(&hi)) {
                return schema(format!("instances[{i}].box"), "box leaves the scene bounds".into());
            }
        }
        for (q, pair) in self.qa.iter().enumerate() {
            if let Some(r) = pair.related.iter().find(|&&r| r >= self.instances.len()) {
                return schema(format!("qa[{q}].related"), format!("instance {r} does not exist"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Densecap,
    Qa,
    SceneDescription,
    Dialogue,
    Planning,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Densecap, Task::Qa, Task::SceneDescription, Task::Dialogue, Task::Planning];

    pub fn name(self) -> &'static str {
        match self {
            Task::Densecap => "densecap",
            Task::Qa => "qa",
            Task::SceneDescription => "scene_description",
            Task::Dialogue => "dialogue",
            Task::Planning => "planning",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown task `{s}`")))
    }
}

/// One `(scene, prompts, instruction, response)` example in text form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub scene_id: String,
    pub task: Task,
    pub prompts: Vec<Prompt>,
    /// Full instruction text ending in the assistant identifier.
    pub instruction: String,
    pub response: String,
    /// Whether the response carries the ground-truth box.
    pub localize: bool,
    /// Instance the sample is about, if any.
    pub instance: Option<usize>,
    /// Ground-truth box of that instance.
    pub target_box: Option<Box3D>,
    /// Reference texts for caption metrics.
    pub references: Vec<String>,
}

impl TrainingSample {
    /// Instruction tokens (not trained on) followed by the response and the
    /// end token.
    pub fn sequence(&self, vocab: &Vocabulary) -> TokenSequence {
        TokenSequence::with_response(&vocab.encode(&self.instruction), &vocab.encode(&self.response))
    }

    pub fn instruction_ids(&self, vocab: &Vocabulary) -> Vec<crate::textio::TokenId> {
        vocab.encode(&self.instruction)
    }
}

fn fields(pairs: &[(&'static str, &str)]) -> BTreeMap<&'static str, String> {
    pairs.iter().map(|(k, v)| (*k, v.to_string())).collect()
}

fn box_text(b: &Box3D, bounds: &SceneBounds) -> Result<String> {
    Ok(render_spatial(&SpatialToken::quantize_box(b, bounds)?))
}

/// Uniform point inside the box.
pub fn click_in_box<R: Rng + ?Sized>(b: &Box3D, rng: &mut R) -> [f64; 3] {
    let lo = b.min_corner();
    std::array::from_fn(|a| lo[a] + rng.random_range(0.0..=1.0) * b.size[a])
}

pub fn scene_description(scene: &SceneRecord) -> String {
    let items: Vec<String> = scene
        .instances
        .iter()
        .map(|i| format!("a {} {}", i.attributes.get("color").map_or("", String::as_str), i.category))
        .collect();
    let list = match items.len() {
        0 => "nothing".to_string(),
        1 => items[0].clone(),
        n => format!("{} and {}", items[..n - 1].join(", "), items[n - 1]),
    };
    normalize(&format!("the room has {list}."))
}

/// Samples for one task. Densecap and QA pick the prompt type and the
/// instruction variant uniformly at random.
pub fn assemble_samples<R: Rng + ?Sized>(scene: &SceneRecord, task: Task, rng: &mut R) -> Result<Vec<TrainingSample>> {
    let bounds = scene.bounds();
    let base = |prompts, instruction: String, response: String| TrainingSample {
        scene_id: scene.id.clone(),
        task,
        prompts,
        instruction: normalize(&instruction),
        response: normalize(&response),
        localize: false,
        instance: None,
        target_box: None,
        references: Vec::new(),
    };
    let mut out = Vec::new();
    match task {
        Task::Densecap => {
            for (i, inst) in scene.instances.iter().enumerate() {
                let Some(caption) = inst.captions.choose(rng) else { continue };
                let prompt = if rng.random_bool(0.5) {
                    Prompt::Click(click_in_box(&inst.bbox, rng))
                } else {
                    Prompt::Box(inst.bbox)
                };
                let localize = rng.random_bool(0.5);
                let (template, response) = if localize {
                    let b = box_text(&inst.bbox, &bounds)?;
                    (Template::DenseCaptionLocalize, format!("the object is localized at {b}, {caption}"))
                } else {
                    (Template::DenseCaption, caption.clone())
                };
                let mut s = base(vec![prompt], instruction_text(template, &BTreeMap::new())?, response);
                s.localize = localize;
                s.instance = Some(i);
                s.target_box = Some(inst.bbox);
                s.references = inst.captions.iter().map(|c| normalize(c)).collect();
                out.push(s);
            }
        }
        Task::Qa => {
            for pair in &scene.qa {
                let related: Vec<&Instance> = pair.related.iter().map(|&r| &scene.instances[r]).collect();
                let prompts = if rng.random_bool(0.5) {
                    related.iter().map(|inst| Prompt::Click(click_in_box(&inst.bbox, rng))).collect()
                } else {
                    Vec::new()
                };
                let localize = !related.is_empty() && rng.random_bool(0.5);
                let f = fields(&[("Question", &pair.question)]);
                let (template, response) = if localize {
                    let boxes = related
                        .iter()
                        .map(|inst| box_text(&inst.bbox, &bounds))
                        .collect::<Result<Vec<_>>>()?
                        .join(" ");
                    (
                        Template::QaLocalize,
                        format!("the related objects are localized at {boxes}. the answer is: {}.", pair.answer),
                    )
                } else {
                    (Template::Qa, format!("{}.", pair.answer))
                };
                let mut s = base(prompts, instruction_text(template, &f)?, response);
                s.localize = localize;
                s.instance = pair.related.first().copied();
                s.target_box = related.first().map(|i| i.bbox);
                s.references = vec![normalize(&format!("{}.", pair.answer))];
                out.push(s);
            }
        }
        Task::SceneDescription => {
            if !scene.instances.is_empty() {
                let text = scene_description(scene);
                let mut s = base(
                    Vec::new(),
                    instruction_text(Template::SceneDescription, &BTreeMap::new())?,
                    text.clone(),
                );
                s.references = vec![text];
                out.push(s);
            }
        }
        Task::Dialogue => {
            for d in &scene.dialogues {
                for (instruction, response) in decompose_dialogue(d)? {
                    let mut s = base(Vec::new(), instruction, response.clone());
                    s.references = vec![normalize(&response)];
                    out.push(s);
                }
            }
        }
        Task::Planning => {
            for p in &scene.plans {
                for (instruction, response) in decompose_planning(&p.goal, &p.steps)? {
                    let mut s = base(Vec::new(), instruction, response.clone());
                    s.references = vec![normalize(&response)];
                    out.push(s);
                }
            }
        }
    }
    Ok(out)
}

/// An `n`-turn dialogue (alternating human/assistant, `2n` turns) becomes
/// `n` `(instruction, response)` pairs; instruction `i` carries every
/// earlier exchange verbatim.
pub fn decompose_dialogue(turns: &[Turn]) -> Result<Vec<(String, String)>> {
    if turns.is_empty() || turns.len() % 2 != 0 {
        return Err(Error::Invalid(format!("dialogue needs human/assistant pairs, got {} turns", turns.len())));
    }
    let mut history: Vec<(String, String)> = Vec::new();
    let mut out = Vec::new();
    for (i, pair) in turns.chunks(2).enumerate() {
        if pair[0].role != Role::Human || pair[1].role != Role::Assistant {
            return Err(Error::Invalid(format!("dialogue turn pair {i} is not human then assistant")));
        }
        out.push((dialogue_text(&history, &pair[0].text), pair[1].text.clone()));
        history.push((pair[0].text.clone(), pair[1].text.clone()));
    }
    Ok(out)
}

fn enumerate_steps(steps: &[String], sep: &str, period: bool) -> String {
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {s}{}", i + 1, if period { "." } else { "" }))
        .collect::<Vec<_>>()
        .join(sep)
}

pub const PLAN_DONE: &str = "all tasks are done.";

/// An `n`-step plan becomes `n + 1` pairs: the full enumerated plan, then
/// "what next" after each completed prefix of steps, ending with a
/// completion acknowledgment.
pub fn decompose_planning(goal: &str, steps: &[String]) -> Result<Vec<(String, String)>> {
    if steps.is_empty() {
        return Err(Error::Invalid("plan has no steps".into()));
    }
    let mut out = vec![(
        instruction_text(Template::PlanFull, &fields(&[("Goal", goal)]))?,
        enumerate_steps(steps, "\n", false),
    )];
    for i in 1..=steps.len() {
        let done = enumerate_steps(&steps[..i], " ", true);
        let target = steps.get(i).cloned().unwrap_or_else(|| PLAN_DONE.to_string());
        out.push((
            instruction_text(Template::PlanNext, &fields(&[("Goal", goal), ("Done", &done)]))?,
            target,
        ));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub scenes: usize,
    pub seed: u64,
    pub densecap_per_scene: usize,
    pub qa_per_scene: usize,
    pub dialogue_turns: usize,
    pub plan_steps: usize,
    pub scene: SceneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scenes: 32,
            seed: 0,
            densecap_per_scene: 2,
            qa_per_scene: 1,
            dialogue_turns: 2,
            plan_steps: 2,
            scene: SceneConfig {
                max_instances: 5,
                ..SceneConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<SceneRecord>,
    pub samples: Vec<TrainingSample>,
}

pub fn scene_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64)
}

fn take<R: Rng + ?Sized>(v: Vec<TrainingSample>, n: usize, rng: &mut R) -> Vec<TrainingSample> {
    if v.len() <= n {
        return v;
    }
    let mut keep = rand::seq::index::sample(rng, v.len(), n).into_vec();
    keep.sort_unstable();
    keep.into_iter().map(|k| v[k].clone()).collect()
}

/// Fixture dataset: per scene a few dense captions, questions and one scene
/// description; even scenes add a dialogue and odd scenes a plan.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    let scenes = (0..cfg.scenes)
        .map(|i| generate_scene(scene_seed(cfg.seed, i), &cfg.scene))
        .collect::<Result<Vec<_>>>()?;
    dataset_from_scenes(scenes, cfg)
}

/// Samples for already generated (or loaded) scenes, in scene order.
pub fn dataset_from_scenes(mut scenes: Vec<SceneRecord>, cfg: &DatasetConfig) -> Result<Dataset> {
    let mut samples = Vec::new();
    for (i, scene) in scenes.iter_mut().enumerate() {
        let seed = scene_seed(cfg.seed, i);
        for d in &mut scene.dialogues {
            d.truncate(2 * cfg.dialogue_turns.max(1));
        }
        for p in &mut scene.plans {
            p.steps.truncate(cfg.plan_steps.max(1));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a_5a5a);
        let dense = assemble_samples(scene, Task::Densecap, &mut rng)?;
        samples.extend(take(dense, cfg.densecap_per_scene, &mut rng));
        let qa = assemble_samples(scene, Task::Qa, &mut rng)?;
        samples.extend(take(qa, cfg.qa_per_scene, &mut rng));
        samples.extend(assemble_samples(scene, Task::SceneDescription, &mut rng)?);
        let extra = if i % 2 == 0 { Task::Dialogue } else { Task::Planning };
        samples.extend(assemble_samples(scene, extra, &mut rng)?);
    }
    Ok(Dataset { scenes, samples })
}

/// Reads every `*.json` scene in `dir`, sorted by file name.
pub fn read_scene_dir(dir: &std::path::Path) -> Result<Vec<SceneRecord>> {
    let mut paths: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_scene(p)).collect()
}

impl Dataset {
    /// Texts the vocabulary is built from: instructions, responses and
    /// references of every sample.
    pub fn corpus(&self) -> Vec<String> {
        let mut out: Vec<String> = Template::ALL.iter().map(|t| t.body().to_string()).collect();
        for s in &self.samples {
            out.push(s.instruction.clone());
            out.push(s.response.clone());
            out.extend(s.references.iter().cloned());
        }
        out
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::build(&self.corpus())
    }

    pub fn scene(&self, id: &str) -> Option<&SceneRecord> {
        self.scenes.iter().find(|s| s.id == id)
    }
}

#[cfg(test)]
mod tests;
