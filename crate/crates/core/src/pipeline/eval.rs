//! Task evaluation, detection through captioning, and the fusion ablation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::model::{Model, SceneContext};
use super::train::{dataset_loss, localize_iou, teacher_forced_accuracy, train, TrainState};
use crate::datagen::{Dataset, SceneRecord, Task, CATEGORIES};
use crate::encoders::Prompt;
use crate::error::{Error, Result};
use crate::evalkit::{
    caption_report, detection_pr, detection_report, report_csv, report_json, CaptionEval, CaptionMetric, Detection,
    DetectionEval, GroundTruth, MetricRecord, SceneDetections,
};
use crate::geometry::{box_iou_3d, farthest_point_sampling, Box3D};
use crate::interactor::Fusion;
use crate::lm::GenerationConfig;
use crate::textio::{instruction_text, normalize, parse_spatial, SpatialToken, Template};

pub const IOU_THRESHOLDS: [f64; 2] = [0.25, 0.5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTask {
    Densecap,
    Qa,
    SceneDescription,
    Dialogue,
    Planning,
    Detect,
}

impl EvalTask {
    pub const ALL: [EvalTask; 6] = [
        EvalTask::Densecap,
        EvalTask::Qa,
        EvalTask::SceneDescription,
        EvalTask::Dialogue,
        EvalTask::Planning,
        EvalTask::Detect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvalTask::Densecap => "densecap",
            EvalTask::Qa => "qa",
            EvalTask::SceneDescription => "scene_description",
            EvalTask::Dialogue => "dialogue",
            EvalTask::Planning => "planning",
            EvalTask::Detect => "detect",
        }
    }
}

impl fmt::Display for EvalTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown task `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub task: EvalTask,
    pub generation: GenerationConfig,
    /// Question answering: add a click at the center of every related object.
    pub click_related: bool,
    /// Dense captioning: proposal boxes per scene id instead of ground truth.
    pub proposals: Option<HashMap<String, Vec<Box3D>>>,
    /// Detection: number of simulated clicks per scene.
    pub detect_clicks: usize,
}

impl EvalOptions {
    pub fn new(task: EvalTask, generation: GenerationConfig) -> Self {
        Self {
            task,
            generation,
            click_related: false,
            proposals: None,
            detect_clicks: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub key: String,
    pub instruction: String,
    pub response: String,
    pub references: Vec<String>,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: EvalTask,
    pub metrics: Vec<MetricRecord>,
    pub items: Vec<EvalItem>,
}

impl EvalReport {
    /// Writes `<stem>.json` (metrics and items) and `<stem>.csv` (metrics).
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, report_csv(&self.metrics)).map_err(|e| Error::io(&csv, e))
    }

    pub fn metric(&self, name: &str, threshold: Option<f64>) -> Option<f64> {
        self.metrics
            .iter()
            .find(|r| r.metric == name && r.threshold == threshold)
            .map(|r| r.value)
    }
}

/// First parsed box of a response, in scene coordinates.
pub fn first_box(text: &str, ctx: &SceneContext) -> Option<Box3D> {
    parse_spatial(text).tokens.iter().find_map(|t| match t {
        SpatialToken::Box(_) => t.to_box(&ctx.bounds),
        SpatialToken::Point(_) => None,
    })
}

/// The caption part of a localized response: whatever follows the last
/// spatial span.
pub fn strip_localization(text: &str) -> String {
    let tail = ["</obj>", "</loc>"]
        .iter()
        .filter_map(|t| text.rfind(t).map(|i| i + t.len()))
        .max()
        .map_or(text, |i| &text[i..]);
    tail.trim_start_matches([',', ' ']).to_string()
}

/// First category name mentioned as a whole word.
pub fn category_of(text: &str) -> Option<&'static str> {
    let words: Vec<&str> = text.split(|c: char| !c.is_ascii_alphanumeric()).collect();
    words
        .iter()
        .find_map(|w| CATEGORIES.iter().map(|c| c.0).find(|c| c == w))
}

fn contexts(model: &Model, scenes: &[SceneRecord]) -> Result<HashMap<String, SceneContext>> {
    scenes.iter().map(|s| Ok((s.id.clone(), model.scene_context(s)?))).collect()
}

fn plain_eval(items: &[EvalItem]) -> CaptionEval {
    let unit = Box3D::new([0.0; 3], [1.0; 3]).expect("unit box");
    let mut e = CaptionEval::default();
    for it in items {
        e.predictions.insert(it.key.clone(), (it.response.clone(), unit));
        e.references.insert(it.key.clone(), (it.references.clone(), unit));
    }
    e
}

fn corpus_records(items: &[EvalItem]) -> Result<Vec<MetricRecord>> {
    let e = plain_eval(items);
    CaptionMetric::ALL
        .into_iter()
        .map(|m| {
            Ok(MetricRecord {
                metric: m.name().into(),
                threshold: None,
                value: e.corpus_score(m)?,
                n_items: items.len(),
            })
        })
        .collect()
}

/// Runs one evaluation protocol over the dataset's scenes. The model is
/// only read.
pub fn evaluate(model: &Model, dataset: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    opts.generation.validate()?;
    let ctxs = contexts(model, &dataset.scenes)?;
    let gen = &opts.generation;
    let mut items = Vec::new();
    let metrics = match opts.task {
        EvalTask::Densecap => {
            let instruction = instruction_text(Template::DenseCaptionLocalize, &BTreeMap::new())?;
            let mut eval = CaptionEval::default();
            for scene in &dataset.scenes {
                let ctx = &ctxs[&scene.id];
                for (i, inst) in scene.instances.iter().enumerate() {
                    let key = format!("{}/{i}", scene.id);
                    let refs: Vec<String> = inst.captions.iter().map(|c| normalize(c)).collect();
                    eval.references.insert(key.clone(), (refs.clone(), inst.bbox));
                    let proposal = match &opts.proposals {
                        None => Some(inst.bbox),
                        Some(p) => p.get(&scene.id).and_then(|bs| {
                            bs.iter().copied().max_by(|a, b| box_iou_3d(a, &inst.bbox).total_cmp(&box_iou_3d(b, &inst.bbox)))
                        }),
                    };
                    let Some(proposal) = proposal else { continue };
                    let (text, _) = model.respond(ctx, &[Prompt::Box(proposal)], &instruction, gen)?;
                    let b = first_box(&text, ctx).unwrap_or(proposal);
                    let iou = box_iou_3d(&b, &inst.bbox);
                    eval.predictions.insert(key.clone(), (strip_localization(&text), b));
                    items.push(EvalItem {
                        key,
                        instruction: instruction.clone(),
                        response: text,
                        references: refs,
                        iou: Some(iou),
                    });
                }
            }
            if eval.references.is_empty() {
                return Err(Error::Invalid("dataset has no instances to caption".into()));
            }
            caption_report(&eval, &IOU_THRESHOLDS)?
        }
        EvalTask::Qa => {
            let mut hits = 0;
            for scene in &dataset.scenes {
                let ctx = &ctxs[&scene.id];
                for (q, pair) in scene.qa.iter().enumerate() {
                    let mut f = BTreeMap::new();
                    f.insert("Question", pair.question.clone());
                    let instruction = instruction_text(Template::Qa, &f)?;
                    let prompts: Vec<Prompt> = if opts.click_related {
                        pair.related.iter().map(|&r| Prompt::Click(scene.instances[r].bbox.center)).collect()
                    } else {
                        Vec::new()
                    };
                    let (text, _) = model.respond(ctx, &prompts, &instruction, gen)?;
                    let reference = normalize(&format!("{}.", pair.answer));
                    hits += (normalize(&text) == reference) as usize;
                    items.push(EvalItem {
                        key: format!("{}/qa{q}", scene.id),
                        instruction,
                        response: text,
                        references: vec![reference],
                        iou: None,
                    });
                }
            }
            if items.is_empty() {
                return Err(Error::Invalid("dataset has no questions".into()));
            }
            let mut m = corpus_records(&items)?;
            m.push(MetricRecord {
                metric: "exact_match".into(),
                threshold: None,
                value: hits as f64 / items.len() as f64,
                n_items: items.len(),
            });
            m
        }
        EvalTask::SceneDescription | EvalTask::Dialogue | EvalTask::Planning => {
            let task = match opts.task {
                EvalTask::SceneDescription => Task::SceneDescription,
                EvalTask::Dialogue => Task::Dialogue,
                _ => Task::Planning,
            };
            for (k, s) in dataset.samples.iter().enumerate().filter(|(_, s)| s.task == task) {
                let ctx = ctxs
                    .get(&s.scene_id)
                    .ok_or_else(|| Error::Invalid(format!("sample refers to unknown scene {:?}", s.scene_id)))?;
                let (text, _) = model.respond(ctx, &s.prompts, &s.instruction, gen)?;
                items.push(EvalItem {
                    key: format!("{}/{k}", s.scene_id),
                    instruction: s.instruction.clone(),
                    response: text,
                    references: s.references.clone(),
                    iou: None,
                });
            }
            if items.is_empty() {
                return Err(Error::Invalid(format!("dataset has no {} samples", opts.task)));
            }
            corpus_records(&items)?
        }
        EvalTask::Detect => {
            let det = detect(model, dataset, &ctxs, opts, &mut items)?;
            detection_report(&detection_pr(&det, &IOU_THRESHOLDS))
        }
    };
    Ok(EvalReport {
        task: opts.task,
        metrics,
        items,
    })
}

/// Clicks at farthest-point centroids of each scene; every localized
/// caption with a known category becomes a detection scored by its mean
/// token probability. Same-category detections overlapping a stronger one
/// by IoU above 0.25 are suppressed.
fn detect(
    model: &Model,
    dataset: &Dataset,
    ctxs: &HashMap<String, SceneContext>,
    opts: &EvalOptions,
    items: &mut Vec<EvalItem>,
) -> Result<DetectionEval> {
    let instruction = instruction_text(Template::DenseCaptionLocalize, &BTreeMap::new())?;
    let mut out = DetectionEval::default();
    for scene in &dataset.scenes {
        let ctx = &ctxs[&scene.id];
        let pc = scene.point_cloud()?;
        let k = opts.detect_clicks.min(pc.len());
        let mut found: Vec<Detection> = Vec::new();
        for (c, &i) in farthest_point_sampling(pc.coords(), k)?.iter().enumerate() {
            let (text, g) = model.respond(ctx, &[Prompt::Click(pc.coords()[i])], &instruction, &opts.generation)?;
            let b = first_box(&text, ctx);
            let cat = category_of(&strip_localization(&text));
            items.push(EvalItem {
                key: format!("{}/click{c}", scene.id),
                instruction: instruction.clone(),
                response: text.clone(),
                references: Vec::new(),
                iou: None,
            });
            if let (Some(bbox), Some(category)) = (b, cat) {
                let n = (g.tokens.len() + g.finished as usize).max(1);
                found.push(Detection {
                    category: category.into(),
                    bbox,
                    confidence: (g.log_prob / n as f64).exp(),
                });
            }
        }
        found.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let mut kept: Vec<Detection> = Vec::new();
        for d in found {
            if !kept.iter().any(|k| k.category == d.category && box_iou_3d(&k.bbox, &d.bbox) > 0.25) {
                kept.push(d);
            }
        }
        out.scenes.push(SceneDetections {
            predictions: kept,
            ground_truth: scene
                .instances
                .iter()
                .map(|i| GroundTruth {
                    category: i.category.clone(),
                    bbox: i.bbox,
                })
                .collect(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub fusion: Fusion,
    pub steps: usize,
    pub final_loss: f64,
    pub teacher_forced_accuracy: f64,
    pub localize_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn records(&self) -> Vec<MetricRecord> {
        self.rows
            .iter()
            .flat_map(|r| {
                let f = match r.fusion {
                    Fusion::Early => "early",
                    Fusion::Direct => "direct",
                };
                [
                    ("loss", r.final_loss),
                    ("teacher_forced_accuracy", r.teacher_forced_accuracy),
                    ("localize_iou", r.localize_iou),
                ]
                .map(|(m, value)| MetricRecord {
                    metric: format!("{f}/{m}"),
                    threshold: None,
                    value,
                    n_items: r.steps,
                })
            })
            .collect()
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, report_json(&self.records())?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, report_csv(&self.records())).map_err(|e| Error::io(&csv, e))
    }
}

/// Trains a copy of `base` (prepared, untuned) under each fusion mode with
/// identical initial weights and data order, then measures both.
pub fn fusion_ablation(base: &Model, dataset: &Dataset, steps: usize) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for fusion in [Fusion::Early, Fusion::Direct] {
        let mut model = base.clone();
        model.config.mmt.fusion = fusion;
        model.interactor.cfg.fusion = fusion;
        model.config.train.total_steps = steps;
        let mut state = TrainState::new(&model);
        train(&mut model, &mut state, dataset, steps, |_, _, _| Ok(true))?;
        rows.push(AblationRow {
            fusion,
            steps,
            final_loss: dataset_loss(&model, dataset)?,
            teacher_forced_accuracy: teacher_forced_accuracy(&model, dataset)?,
            localize_iou: localize_iou(&model, dataset)?.mean_iou,
        });
    }
    Ok(AblationReport { rows })
}
