use super::*;
use crate::geometry::box_iou_3d;
use crate::textio::{parse_spatial, ASSISTANT, HUMAN_TAG};

fn small_cfg() -> SceneConfig {
    SceneConfig {
        n_points: 256,
        ..SceneConfig::default()
    }
}

#[test]
fn same_seed_same_scene() {
    let a = generate_scene(7, &small_cfg()).unwrap();
    let b = generate_scene(7, &small_cfg()).unwrap();
    assert_eq!(a, b);
    assert_eq!(scene_to_json(&a).unwrap(), scene_to_json(&b).unwrap());
    assert_ne!(a, generate_scene(8, &small_cfg()).unwrap());
}

#[test]
fn scenes_are_valid_and_non_overlapping() {
    for seed in 0..30 {
        let s = generate_scene(seed, &SceneConfig::default()).unwrap();
        s.validate().unwrap();
        assert!((3..=8).contains(&s.instances.len()));
        assert_eq!(s.points.len(), 1024);
        for i in 0..s.instances.len() {
            for j in 0..i {
                assert_eq!(box_iou_3d(&s.instances[i].bbox, &s.instances[j].bbox), 0.0);
            }
        }
    }
}

#[test]
fn placement_failure_is_an_error() {
    let cfg = SceneConfig {
        min_instances: 8,
        max_instances: 8,
        room_x: (2.0, 2.0),
        room_y: (2.0, 2.0),
        max_retries: 50,
        ..small_cfg()
    };
    assert!(generate_scene(1, &cfg).is_err());
}

#[test]
fn caption_boxes_match_instances() {
    let s = generate_scene(3, &small_cfg()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for sample in assemble_samples(&s, Task::Densecap, &mut rng).unwrap() {
        let inst = &s.instances[sample.instance.unwrap()];
        assert_eq!(box_iou_3d(&sample.target_box.unwrap(), &inst.bbox), 1.0);
    }
}

/// Answers questions straight from the attribute maps and box centers.
fn interpret(scene: &SceneRecord, question: &str) -> Option<String> {
    let body = question.strip_suffix('?')?;
    if let Some(cat) = body.strip_prefix("what color is the ") {
        let hits: Vec<&Instance> = scene.instances.iter().filter(|i| i.category == cat).collect();
        return (hits.len() == 1).then(|| hits[0].attributes["color"].clone());
    }
    let rest = body.strip_prefix("what is next to the ")?;
    let (color, cat) = rest.split_once(' ')?;
    let idx: Vec<usize> = (0..scene.instances.len())
        .filter(|&i| scene.instances[i].category == cat && scene.instances[i].attributes["color"] == color)
        .collect();
    if idx.len() != 1 {
        return None;
    }
    let c = scene.instances[idx[0]].bbox.center;
    let mut best: Option<(f64, usize)> = None;
    for (j, other) in scene.instances.iter().enumerate() {
        if j == idx[0] {
            continue;
        }
        let d: f64 = (0..3).map(|a| (other.bbox.center[a] - c[a]).powi(2)).sum();
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, j));
        }
    }
    best.map(|(_, j)| scene.instances[j].category.clone())
}

#[test]
fn answers_follow_from_attributes() {
    let mut checked = 0;
    for seed in 0..40 {
        let s = generate_scene(seed, &small_cfg()).unwrap();
        for pair in &s.qa {
            assert_eq!(interpret(&s, &pair.question).as_deref(), Some(pair.answer.as_str()), "{}", pair.question);
            checked += 1;
        }
    }
    assert!(checked > 40);
}

#[test]
fn sample_shapes_per_task() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut saw_localize = false;
    for seed in 0..10 {
        let s = generate_scene(seed, &small_cfg()).unwrap();
        for sample in assemble_samples(&s, Task::Densecap, &mut rng).unwrap() {
            assert_eq!(sample.prompts.len(), 1);
            if sample.localize {
                saw_localize = true;
                assert!(sample.response.starts_with("the object is localized at <obj>"));
                let parsed = parse_spatial(&sample.response);
                assert_eq!(parsed.tokens.len(), 1);
            }
            if let Prompt::Click(p) = sample.prompts[0] {
                assert!(s.instances[sample.instance.unwrap()].bbox.contains(&p));
            }
        }
        let desc = assemble_samples(&s, Task::SceneDescription, &mut rng).unwrap();
        assert_eq!(desc.len(), 1);
        assert!(desc[0].prompts.is_empty());
        assert!(desc[0].instruction.contains("describe this 3d scene"));
        for sample in assemble_samples(&s, Task::Qa, &mut rng).unwrap() {
            for p in &sample.prompts {
                let Prompt::Click(c) = p else { panic!("qa prompts are clicks") };
                assert!(s.instances[sample.instance.unwrap()].bbox.contains(c));
            }
            if sample.localize {
                assert!(sample.response.starts_with("the related objects are localized at <obj>"));
                assert!(sample.response.contains(". the answer is: "));
            }
        }
    }
    assert!(saw_localize);
}

fn dialogue(n: usize) -> Vec<Turn> {
    (0..n)
        .flat_map(|i| {
            [
                Turn {
                    role: Role::Human,
                    text: format!("question {i}?"),
                },
                Turn {
                    role: Role::Assistant,
                    text: format!("answer {i}."),
                },
            ]
        })
        .collect()
}

#[test]
fn dialogue_decomposition() {
    assert_eq!(decompose_dialogue(&dialogue(1)).unwrap().len(), 1);
    let three = decompose_dialogue(&dialogue(3)).unwrap();
    assert_eq!(three.len(), 3);
    assert_eq!(three[2].0.matches(HUMAN_TAG).count(), 3);
    for w in three.windows(2) {
        assert!(w[1].0.starts_with(&w[0].0) && w[1].0.len() > w[0].0.len());
    }
    assert_eq!(three[1].1, "answer 1.");
    let mut bad = dialogue(2);
    bad.swap(0, 1);
    assert!(decompose_dialogue(&bad).is_err());
    assert!(decompose_dialogue(&dialogue(2)[..3]).is_err());
    assert!(decompose_dialogue(&[]).is_err());
}

#[test]
fn planning_decomposition() {
    let steps = vec!["place a desk against the wall".to_string(), "position a chair at the desk".to_string()];
    let out = decompose_planning("i want to set up a home office workspace.", &steps).unwrap();
    assert_eq!(out.len(), 3);
    assert_eq!(out[0].1, "1. place a desk against the wall\n2. position a chair at the desk");
    assert_eq!(
        out[0].0,
        "### human: i want to set up a home office workspace. what should i do? ### assistant:"
    );
    assert_eq!(out[1].1, steps[1]);
    assert!(out[1].0.contains("i have done these things: 1. place a desk against the wall. what should i do next?"));
    assert_eq!(out[2].1, PLAN_DONE);
    assert!(decompose_planning("goal.", &[]).is_err());
}

#[test]
fn scene_json_round_trip() {
    let s = generate_scene(11, &small_cfg()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    write_scene(&path, &s).unwrap();
    assert_eq!(read_scene(&path).unwrap(), s);
}

#[test]
fn many_scenes_round_trip_bit_exactly() {
    for seed in 0..100 {
        let s = generate_scene(seed, &small_cfg()).unwrap();
        let back = scene_from_json(&scene_to_json(&s).unwrap()).unwrap();
        for (a, b) in s.points.iter().zip(&back.points) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(s, back);
    }
}

#[test]
fn schema_errors_name_the_field() {
    let s = generate_scene(12, &small_cfg()).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&scene_to_json(&s).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("instances");
    match scene_from_json(&v.to_string()) {
        Err(Error::Schema { field, .. }) => assert_eq!(field, "instances"),
        other => panic!("{other:?}"),
    }
    let mut v: serde_json::Value = serde_json::from_str(&scene_to_json(&s).unwrap()).unwrap();
    v["points"][2][1] = serde_json::Value::String("abc".into());
    match scene_from_json(&v.to_string()) {
        Err(Error::Schema { field, .. }) => assert_eq!(field, "points[2][1]"),
        other => panic!("{other:?}"),
    }
    let mut v: serde_json::Value = serde_json::from_str(&scene_to_json(&s).unwrap()).unwrap();
    v["qa"][0]["related"] = serde_json::json!([99]);
    match scene_from_json(&v.to_string()) {
        Err(Error::Schema { field, .. }) => assert_eq!(field, "qa[0].related"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn fixture_dataset_shape_and_masks() {
    let cfg = DatasetConfig {
        scene: SceneConfig {
            n_points: 256,
            ..DatasetConfig::default().scene
        },
        ..DatasetConfig::default()
    };
    let a = build_dataset(&cfg).unwrap();
    assert_eq!(a.scenes.len(), 32);
    assert!((180..=230).contains(&a.samples.len()), "{}", a.samples.len());
    let vocab = a.vocabulary();
    for s in &a.samples {
        let seq = s.sequence(&vocab);
        let last_assistant = seq.ids.iter().rposition(|&t| t == ASSISTANT).unwrap();
        for (i, &m) in seq.loss_mask.iter().enumerate() {
            assert_eq!(m, i > last_assistant);
        }
        assert_eq!(vocab.decode(&vocab.encode(&s.response)), s.response);
    }
    let b = build_dataset(&cfg).unwrap();
    assert_eq!(a, b);
    for (x, y) in a.scenes.iter().zip(&b.scenes) {
        assert_eq!(scene_to_json(x).unwrap(), scene_to_json(y).unwrap());
    }
}
