//! Procedural rooms: non-overlapping furniture boxes, surface point
//! sampling, and the attribute grammar behind captions, questions,
//! dialogues and plans.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Instance, Plan, QaPair, Role, SceneRecord, Turn};
use crate::error::{Error, Result};
use crate::geometry::{squared_distance, Box3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub min_instances: usize,
    pub max_instances: usize,
    pub n_points: usize,
    /// Room footprint ranges in meters.
    pub room_x: (f64, f64),
    pub room_y: (f64, f64),
    pub floor_fraction: f64,
    /// Clearance kept between footprints.
    pub gap: f64,
    pub max_retries: usize,
    pub color_noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_instances: 3,
            max_instances: 8,
            n_points: 1024,
            room_x: (5.0, 7.0),
            room_y: (4.0, 6.0),
            floor_fraction: 0.25,
            gap: 0.1,
            max_retries: 500,
            color_noise: 0.03,
        }
    }
}

pub const COLORS: [(&str, [f64; 3]); 7] = [
    ("red", [0.8, 0.1, 0.1]),
    ("blue", [0.1, 0.2, 0.8]),
    ("green", [0.1, 0.6, 0.2]),
    ("yellow", [0.9, 0.8, 0.1]),
    ("white", [0.95, 0.95, 0.95]),
    ("black", [0.08, 0.08, 0.08]),
    ("brown", [0.5, 0.3, 0.1]),
];

const FLOOR_RGB: [f64; 3] = [0.5, 0.5, 0.5];

/// Category name with (x, y, z) size ranges in meters.
pub const CATEGORIES: [(&str, [(f64, f64); 3]); 8] = [
    ("chair", [(0.4, 0.6), (0.4, 0.6), (0.8, 1.0)]),
    ("table", [(1.0, 1.6), (0.6, 1.0), (0.7, 0.8)]),
    ("desk", [(1.0, 1.4), (0.5, 0.7), (0.7, 0.8)]),
    ("bed", [(1.4, 2.0), (0.9, 1.6), (0.4, 0.6)]),
    ("sofa", [(1.6, 2.2), (0.8, 1.0), (0.7, 0.9)]),
    ("cabinet", [(0.6, 1.0), (0.4, 0.6), (0.8, 1.4)]),
    ("shelf", [(0.8, 1.2), (0.3, 0.4), (1.2, 1.8)]),
    ("lamp", [(0.2, 0.4), (0.2, 0.4), (1.2, 1.6)]),
];

const GOALS: [&str; 4] = [
    "i want to tidy up the room.",
    "i want to get ready for work.",
    "i want to rest for a while.",
    "i want to rearrange the furniture.",
];

const VERBS: [&str; 4] = ["walk to", "clean", "check", "move"];

pub fn color_rgb(name: &str) -> Option<[f64; 3]> {
    COLORS.iter().find(|c| c.0 == name).map(|c| c.1)
}

/// Index of the instance whose center is nearest to instance `i` (ties to
/// the lower index).
pub fn nearest_other(instances: &[Instance], i: usize) -> Option<usize> {
    let c = instances[i].bbox.center;
    (0..instances.len())
        .filter(|&j| j != i)
        .min_by(|&a, &b| {
            squared_distance(&instances[a].bbox.center, &c)
                .total_cmp(&squared_distance(&instances[b].bbox.center, &c))
                .then(a.cmp(&b))
        })
}

fn place_instances(cfg: &SceneConfig, rng: &mut ChaCha8Rng, room: [f64; 2]) -> Result<Vec<(usize, Box3D)>> {
    let count = rng.random_range(cfg.min_instances..=cfg.max_instances);
    let mut placed: Vec<(usize, Box3D)> = Vec::with_capacity(count);
    let mut tries = 0;
    while placed.len() < count {
        tries += 1;
        if tries > cfg.max_retries {
            return Err(Error::Invalid(format!(
                "could not place {count} instances without overlap after {} attempts",
                cfg.max_retries
            )));
        }
        let cat = rng.random_range(0..CATEGORIES.len());
        let ranges = CATEGORIES[cat].1;
        let size: [f64; 3] = std::array::from_fn(|a| rng.random_range(ranges[a].0..ranges[a].1));
        let (hx, hy) = (size[0] / 2.0, size[1] / 2.0);
        if 2.0 * hx + 2.0 * cfg.gap > room[0] || 2.0 * hy + 2.0 * cfg.gap > room[1] {
            continue;
        }
        let cx = rng.random_range(hx + cfg.gap..room[0] - hx - cfg.gap);
        let cy = rng.random_range(hy + cfg.gap..room[1] - hy - cfg.gap);
        let candidate = Box3D::new([cx, cy, size[2] / 2.0], size)?;
        let clear = placed.iter().all(|(_, b)| {
            (b.center[0] - cx).abs() >= (b.size[0] / 2.0 + hx + cfg.gap)
                || (b.center[1] - cy).abs() >= (b.size[1] / 2.0 + hy + cfg.gap)
        });
        if clear {
            placed.push((cat, candidate));
        }
    }
    Ok(placed)
}

fn jitter(rng: &mut ChaCha8Rng, rgb: [f64; 3], noise: f64) -> [f64; 3] {
    rgb.map(|c| (c + rng.random_range(-noise..=noise)).clamp(0.0, 1.0))
}

/// Uniform sample on the surface of a box (faces weighted by area).
fn surface_point(rng: &mut ChaCha8Rng, b: &Box3D) -> [f64; 3] {
    let s = b.size;
    let areas = [s[1] * s[2], s[0] * s[2], s[0] * s[1]];
    let total = 2.0 * (areas[0] + areas[1] + areas[2]);
    let mut u = rng.random_range(0.0..total);
    let mut axis = 2;
    for (a, area) in areas.iter().enumerate() {
        if u < 2.0 * area {
            axis = a;
            break;
        }
        u -= 2.0 * area;
    }
    let lo = b.min_corner();
    let mut p: [f64; 3] = std::array::from_fn(|a| lo[a] + rng.random_range(0.0..1.0) * s[a]);
    p[axis] = if rng.random_bool(0.5) { lo[axis] } else { lo[axis] + s[axis] };
    p
}

fn corners(b: &Box3D) -> Vec<[f64; 3]> {
    let (lo, hi) = (b.min_corner(), b.max_corner());
    (0..8)
        .map(|m| std::array::from_fn(|a| if m >> a & 1 == 0 { lo[a] } else { hi[a] }))
        .collect()
}

pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<SceneRecord> {
    if cfg.min_instances < 2 || cfg.min_instances > cfg.max_instances {
        return Err(Error::Invalid("scene config needs 2 <= min_instances <= max_instances".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let room = [
        rng.random_range(cfg.room_x.0..=cfg.room_x.1),
        rng.random_range(cfg.room_y.0..=cfg.room_y.1),
    ];
    let placed = place_instances(cfg, &mut rng, room)?;

    let mut instances: Vec<Instance> = placed
        .iter()
        .map(|(cat, b)| {
            let (name, ranges) = CATEGORIES[*cat];
            let color = COLORS.choose(&mut rng).expect("colors").0;
            let mid: f64 = ranges.iter().map(|r| (r.0 + r.1) / 2.0).product();
            let size_class = if b.volume() >= mid { "large" } else { "small" };
            Instance {
                bbox: *b,
                category: name.to_string(),
                attributes: BTreeMap::from([
                    ("color".to_string(), color.to_string()),
                    ("size".to_string(), size_class.to_string()),
                ]),
                captions: Vec::new(),
            }
        })
        .collect();
    for i in 0..instances.len() {
        let near = nearest_other(&instances, i).expect("at least two instances");
        let inst = &instances[i];
        let (color, size) = (&inst.attributes["color"], &inst.attributes["size"]);
        let caps = vec![
            format!("the {color} {} is next to the {}.", inst.category, instances[near].category),
            format!("this is a {size} {color} {}.", inst.category),
        ];
        instances[i].captions = caps;
    }

    let points = sample_points(cfg, &mut rng, room, &instances)?;
    let qa = make_qa(&instances);
    let dialogues = vec![make_dialogue(&mut rng, &instances)];
    let plans = vec![make_plan(&mut rng, &instances)];
    Ok(SceneRecord {
        id: format!("scene{seed:05}"),
        points,
        instances,
        qa,
        dialogues,
        plans,
    })
}

fn sample_points(cfg: &SceneConfig, rng: &mut ChaCha8Rng, room: [f64; 2], instances: &[Instance]) -> Result<Vec<[f64; 6]>> {
    let fixed = 8 * instances.len();
    if cfg.n_points < fixed + 4 {
        return Err(Error::Invalid(format!("{} points cannot cover {} instances", cfg.n_points, instances.len())));
    }
    let free = cfg.n_points - fixed;
    let n_floor = ((free as f64) * cfg.floor_fraction).round() as usize;
    let n_surf = free - n_floor;
    let areas: Vec<f64> = instances
        .iter()
        .map(|inst| {
            let s = inst.bbox.size;
            2.0 * (s[0] * s[1] + s[1] * s[2] + s[0] * s[2])
        })
        .collect();
    let total: f64 = areas.iter().sum();
    let mut points = Vec::with_capacity(cfg.n_points);
    for inst in instances {
        let rgb = super::scene_color(inst)?;
        for c in corners(&inst.bbox) {
            let col = jitter(rng, rgb, cfg.color_noise);
            points.push([c[0], c[1], c[2], col[0], col[1], col[2]]);
        }
    }
    for _ in 0..n_surf {
        let mut u = rng.random_range(0.0..total);
        let mut k = instances.len() - 1;
        for (i, a) in areas.iter().enumerate() {
            if u < *a {
                k = i;
                break;
            }
            u -= a;
        }
        let p = surface_point(rng, &instances[k].bbox);
        let col = jitter(rng, super::scene_color(&instances[k])?, cfg.color_noise);
        points.push([p[0], p[1], p[2], col[0], col[1], col[2]]);
    }
    for _ in 0..n_floor {
        let col = jitter(rng, FLOOR_RGB, cfg.color_noise);
        points.push([rng.random_range(0.0..room[0]), rng.random_range(0.0..room[1]), 0.0, col[0], col[1], col[2]]);
    }
    points.shuffle(rng);
    Ok(points)
}

fn unique_by<F: Fn(&Instance) -> String>(instances: &[Instance], i: usize, key: F) -> bool {
    let k = key(&instances[i]);
    instances.iter().filter(|x| key(x) == k).count() == 1
}

fn make_qa(instances: &[Instance]) -> Vec<QaPair> {
    let mut qa = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        let color = &inst.attributes["color"];
        if unique_by(instances, i, |x| x.category.clone()) {
            qa.push(QaPair {
                question: format!("what color is the {}?", inst.category),
                answer: color.clone(),
                related: vec![i],
            });
        }
        if unique_by(instances, i, |x| format!("{} {}", x.attributes["color"], x.category)) {
            let near = nearest_other(instances, i).expect("two instances");
            qa.push(QaPair {
                question: format!("what is next to the {color} {}?", inst.category),
                answer: instances[near].category.clone(),
                related: vec![i],
            });
        }
    }
    qa
}

fn make_dialogue(rng: &mut ChaCha8Rng, instances: &[Instance]) -> Vec<Turn> {
    let i = rng.random_range(0..instances.len());
    let inst = &instances[i];
    let near = nearest_other(instances, i).expect("two instances");
    let turn = |role, text: String| Turn { role, text };
    vec![
        turn(Role::Human, format!("is there a {} in this room?", inst.category)),
        turn(Role::Assistant, format!("yes, there is a {} {}.", inst.attributes["color"], inst.category)),
        turn(Role::Human, "what is next to it?".to_string()),
        turn(Role::Assistant, format!("the {}.", instances[near].category)),
    ]
}

fn make_plan(rng: &mut ChaCha8Rng, instances: &[Instance]) -> Plan {
    let goal = GOALS.choose(rng).expect("goals").to_string();
    let n = rng.random_range(2..=3usize).min(instances.len());
    let mut picks: Vec<usize> = (0..instances.len()).collect();
    picks.shuffle(rng);
    let steps = picks[..n]
        .iter()
        .map(|&i| {
            let verb = VERBS.choose(rng).expect("verbs");
            let inst = &instances[i];
            format!("{verb} the {} {}", inst.attributes["color"], inst.category)
        })
        .collect();
    Plan { goal, steps }
}
