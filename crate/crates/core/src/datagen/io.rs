//! Scene documents as JSON with every real stored as a 17-digit decimal string.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Instance, Plan, QaPair, SceneRecord, Turn};
use crate::error::{Error, Result};
use crate::geometry::Box3D;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInstance {
    #[serde(rename = "box")]
    bbox: [String; 6],
    category: String,
    attributes: BTreeMap<String, String>,
    captions: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScene {
    id: String,
    points: Vec<[String; 6]>,
    instances: Vec<RawInstance>,
    qa: Vec<QaPair>,
    dialogues: Vec<Vec<Turn>>,
    plans: Vec<Plan>,
}

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_real(s: &str, field: impl FnOnce() -> String) -> Result<f64> {
    match s.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Schema {
            field: field(),
            detail: format!("`{s}` is not a finite decimal"),
        }),
    }
}

pub fn scene_to_json(scene: &SceneRecord) -> Result<String> {
    let raw = RawScene {
        id: scene.id.clone(),
        points: scene.points.iter().map(|p| p.map(real)).collect(),
        instances: scene
            .instances
            .iter()
            .map(|i| RawInstance {
                bbox: i.bbox.to_array().map(real),
                category: i.category.clone(),
                attributes: i.attributes.clone(),
                captions: i.captions.clone(),
            })
            .collect(),
        qa: scene.qa.clone(),
        dialogues: scene.dialogues.clone(),
        plans: scene.plans.clone(),
    };
    Ok(serde_json::to_string_pretty(&raw)?)
}

/// Parses and validates a scene document. Errors name the offending field.
pub fn scene_from_json(text: &str) -> Result<SceneRecord> {
    let raw: RawScene = serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        let field = msg
            .split('`')
            .nth(1)
            .filter(|_| msg.contains("field"))
            .unwrap_or("document")
            .to_string();
        Error::Schema { field, detail: msg }
    })?;
    let mut points = Vec::with_capacity(raw.points.len());
    for (i, p) in raw.points.iter().enumerate() {
        let mut v = [0.0; 6];
        for (j, s) in p.iter().enumerate() {
            v[j] = parse_real(s, || format!("points[{i}][{j}]"))?;
        }
        points.push(v);
    }
    let mut instances = Vec::with_capacity(raw.instances.len());
    for (i, r) in raw.instances.into_iter().enumerate() {
        let mut v = [0.0; 6];
        for (j, s) in r.bbox.iter().enumerate() {
            v[j] = parse_real(s, || format!("instances[{i}].box[{j}]"))?;
        }
        let bbox = Box3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]]).map_err(|e| Error::Schema {
            field: format!("instances[{i}].box"),
            detail: e.to_string(),
        })?;
        instances.push(Instance {
            bbox,
            category: r.category,
            attributes: r.attributes,
            captions: r.captions,
        });
    }
    let scene = SceneRecord {
        id: raw.id,
        points,
        instances,
        qa: raw.qa,
        dialogues: raw.dialogues,
        plans: raw.plans,
    };
    scene.validate()?;
    Ok(scene)
}

pub fn write_scene(path: &Path, scene: &SceneRecord) -> Result<()> {
    std::fs::write(path, scene_to_json(scene)?).map_err(|e| Error::io(path, e))
}

pub fn read_scene(path: &Path) -> Result<SceneRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    scene_from_json(&text)
}
