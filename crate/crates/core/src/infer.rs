//! Turning final-layer decoder output into scored point-level instances.

use crate::config::InferConfig;
use crate::decoder::LayerPrediction;
use crate::error::Result;
use crate::eval::dump::{mask_to_indices, DUMP_FORMAT, DUMP_VERSION};
use crate::eval::{evaluate, EvalReport, InstanceDump, LabeledMask, LayerDump, PredictionDump, QueryDump, SceneEval, ScoredInstance};
use crate::model::{Model, PreparedScene};
use crate::pointcloud::{broadcast_rows, PointCloud};
use crate::smq::QuerySource;
use crate::tensor::{ParamStore, Tape, Tensor};

/// One post-processed instance.
#[derive(Clone, Debug, PartialEq)]
pub struct InstancePrediction {
    pub query: usize,
    pub class: usize,
    pub score: f64,
    pub superpoints: Vec<bool>,
    pub points: Vec<bool>,
}

impl InstancePrediction {
    pub fn scored(&self) -> ScoredInstance {
        ScoredInstance {
            mask: self.points.clone(),
            class: self.class,
            score: self.score,
        }
    }
}

/// Best object class of a probability row (the last column is background).
fn best_object_class(probs: &[f64]) -> (usize, f64) {
    let objects = &probs[..probs.len() - 1];
    let mut best = 0;
    for (k, &p) in objects.iter().enumerate() {
        if p > objects[best] {
            best = k;
        }
    }
    (best, objects[best])
}

type QueryMask = (Vec<bool>, Vec<bool>);

/// Binary superpoint masks and their point broadcasts.
fn query_masks(soft: &Tensor, threshold: f64, scene: &PreparedScene) -> Result<Vec<QueryMask>> {
    (0..soft.rows())
        .map(|i| {
            let sp: Vec<bool> = soft.row(i).iter().map(|&v| v > threshold).collect();
            let points = broadcast_rows(&sp, &scene.partition, &scene.grid)?;
            Ok((sp, points))
        })
        .collect()
}

/// Scores every query as `p_class × mean soft score over its binary mask`,
/// drops masks under `min_points` points and keeps the `top_k` best.
pub fn postprocess(
    class_probs: &Tensor,
    soft_masks: &Tensor,
    threshold: f64,
    scene: &PreparedScene,
    cfg: &InferConfig,
) -> Result<Vec<InstancePrediction>> {
    let masks = query_masks(soft_masks, threshold, scene)?;
    let mut out = Vec::new();
    for (i, (sp, points)) in masks.into_iter().enumerate() {
        let size = points.iter().filter(|&&b| b).count();
        if size == 0 || size < cfg.min_points {
            continue;
        }
        let (class, p) = best_object_class(class_probs.row(i));
        let soft = soft_masks.row(i);
        let (sum, n) = sp
            .iter()
            .zip(soft)
            .filter(|(&b, _)| b)
            .fold((0.0, 0usize), |(s, n), (_, &v)| (s + v, n + 1));
        out.push(InstancePrediction {
            query: i,
            class,
            score: p * sum / n as f64,
            superpoints: sp,
            points,
        });
    }
    // Stable: equal scores keep query order.
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(cfg.top_k);
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SceneInference {
    pub instances: Vec<InstancePrediction>,
    pub dump: PredictionDump,
}

fn layer_dump(
    tape: &Tape,
    pred: &LayerPrediction,
    sources: &[QuerySource],
    scene: &PreparedScene,
    threshold: f64,
) -> Result<LayerDump> {
    let probs = tape.value(pred.class_probs);
    let masks = query_masks(tape.value(pred.soft_masks), threshold, scene)?;
    let queries = masks
        .iter()
        .enumerate()
        .map(|(i, (sp, points))| {
            let (class, class_score) = best_object_class(probs.row(i));
            QueryDump {
                query: i,
                source: match sources[i] {
                    QuerySource::Scene => "scene".into(),
                    QuerySource::Learnable => "learnable".into(),
                },
                class,
                class_score,
                background_score: *probs.row(i).last().expect("background column"),
                superpoints: mask_to_indices(sp),
                points: mask_to_indices(points),
            }
        })
        .collect();
    Ok(LayerDump { layer: pred.layer, queries })
}

/// Runs the network on one scene and post-processes its last layer.
pub fn infer_scene(
    model: &Model,
    store: &ParamStore,
    scene: &PreparedScene,
    name: &str,
    cfg: &InferConfig,
) -> Result<SceneInference> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, store, scene)?;
    let tau = model.config.mask_threshold;
    let last = out.decode.predictions.last().expect("at least one prediction");
    let instances = postprocess(tape.value(last.class_probs), tape.value(last.soft_masks), tau, scene, cfg)?;
    let layers = out
        .decode
        .predictions
        .iter()
        .map(|p| layer_dump(&tape, p, &out.queries.sources, scene, tau))
        .collect::<Result<_>>()?;
    let dump = PredictionDump {
        format: DUMP_FORMAT.into(),
        version: DUMP_VERSION,
        scene: name.into(),
        num_points: scene.cloud.len(),
        num_superpoints: scene.partition.len(),
        num_classes: model.num_classes,
        layers,
        instances: instances
            .iter()
            .map(|inst| InstanceDump {
                query: inst.query,
                class: inst.class,
                score: inst.score,
                points: mask_to_indices(&inst.points),
            })
            .collect(),
    };
    Ok(SceneInference { instances, dump })
}

/// Per-point instance ids from ranked masks: a point takes `1 + rank` of the
/// best-ranked mask covering it, 0 if none does.
pub fn instance_labels<'a>(masks: impl IntoIterator<Item = &'a [bool]>, n: usize) -> Result<Vec<u32>> {
    let mut labels = vec![0u32; n];
    for (rank, mask) in masks.into_iter().enumerate() {
        if mask.len() != n {
            return Err(crate::error::Error::invalid(
                "instance_labels",
                format!("mask of length {} for {n} points", mask.len()),
            ));
        }
        for (l, &b) in labels.iter_mut().zip(mask) {
            if b && *l == 0 {
                *l = rank as u32 + 1;
            }
        }
    }
    Ok(labels)
}

/// Point-level ground-truth instances of a labeled cloud.
pub fn point_ground_truth(pc: &PointCloud) -> Vec<LabeledMask> {
    let (Some(sem), Some(inst)) = (&pc.semantic, &pc.instance) else {
        return Vec::new();
    };
    pc.instance_ids()
        .into_iter()
        .map(|id| {
            let mask: Vec<bool> = inst.iter().map(|&i| i == id).collect();
            let first = mask.iter().position(|&b| b).expect("id occurs");
            LabeledMask { mask, class: sem[first] }
        })
        .collect()
}

/// Post-processed predictions of each scene, computed on worker threads and
/// returned in input order.
pub fn predict_scenes(
    model: &Model,
    store: &ParamStore,
    scenes: &[PreparedScene],
    cfg: &InferConfig,
) -> Result<Vec<Vec<InstancePrediction>>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).clamp(1, scenes.len().max(1));
    let mut slots: Vec<Option<Result<Vec<InstancePrediction>>>> = (0..scenes.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunk = scenes.len().div_ceil(workers).max(1);
        for (part, out) in scenes.chunks(chunk).zip(slots.chunks_mut(chunk)) {
            s.spawn(move || {
                for (scene, slot) in part.iter().zip(out) {
                    *slot = Some(infer_scene(model, store, scene, "", cfg).map(|r| r.instances));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every scene visited")).collect()
}

/// Evaluates the model on labeled scenes.
pub fn evaluate_model(
    model: &Model,
    store: &ParamStore,
    scenes: &[PreparedScene],
    cfg: &InferConfig,
) -> Result<EvalReport> {
    let predictions = predict_scenes(model, store, scenes, cfg)?;
    let evals: Vec<SceneEval> = scenes
        .iter()
        .zip(predictions)
        .map(|(scene, preds)| SceneEval {
            predictions: preds.iter().map(InstancePrediction::scored).collect(),
            ground_truth: point_ground_truth(&scene.cloud),
        })
        .collect();
    evaluate(&evals, model.num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{tiny_config, tiny_scene, TINY_CLASSES};

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn postprocess_scores_and_orders() {
        let scene = tiny_scene(&tiny_config()).unwrap();
        // Three queries over six superpoints, four class columns.
        let probs = rows(&[&[0.7, 0.1, 0.1, 0.1], &[0.1, 0.6, 0.2, 0.1], &[0.1, 0.1, 0.1, 0.7]]);
        let soft = rows(&[
            &[0.9, 0.7, 0.1, 0.1, 0.1, 0.1],
            &[0.1, 0.1, 0.8, 0.8, 0.1, 0.1],
            &[0.1, 0.1, 0.1, 0.1, 0.1, 0.1],
        ]);
        let out = postprocess(&probs, &soft, 0.5, &scene, &InferConfig::default()).unwrap();
        // The empty third mask is dropped.
        assert_eq!(out.len(), 2);
        assert_eq!((out[0].query, out[0].class), (0, 0));
        assert!((out[0].score - 0.7 * 0.8).abs() < 1e-12);
        assert!((out[1].score - 0.6 * 0.8).abs() < 1e-12);
        assert_eq!(out[0].points.iter().filter(|&&b| b).count(), 10);
        assert_eq!(out[1].superpoints, vec![false, false, true, true, false, false]);

        let top1 = postprocess(&probs, &soft, 0.5, &scene, &InferConfig { top_k: 1, min_points: 1 }).unwrap();
        assert_eq!(top1.len(), 1);
        let big = postprocess(&probs, &soft, 0.5, &scene, &InferConfig { top_k: 100, min_points: 11 }).unwrap();
        assert!(big.is_empty());
    }

    #[test]
    fn labels_prefer_higher_ranked_masks() {
        let a = [true, true, false, false];
        let b = [false, true, true, false];
        let labels = instance_labels([&a[..], &b[..]], 4).unwrap();
        assert_eq!(labels, vec![1, 1, 2, 0]);
        assert!(instance_labels([&a[..3]], 4).is_err());
    }

    #[test]
    fn background_scene_has_no_instances() {
        let cfg = tiny_config();
        let mut scene = tiny_scene(&cfg).unwrap();
        let n = scene.cloud.len();
        scene.cloud.semantic = Some(vec![TINY_CLASSES; n]);
        scene.cloud.instance = Some(vec![0; n]);
        let probs = Tensor::from_fn(2, 4, |_, j| if j == 3 { 0.9 } else { 0.1 / 3.0 });
        let soft = Tensor::from_fn(2, 6, |_, _| 0.2);
        assert!(postprocess(&probs, &soft, 0.5, &scene, &InferConfig::default()).unwrap().is_empty());
        assert!(point_ground_truth(&scene.cloud).is_empty());
    }

    #[test]
    fn dump_round_trips_through_reader() {
        let cfg = tiny_config();
        let (model, store) = Model::new(&cfg, TINY_CLASSES, 4).unwrap();
        let scene = tiny_scene(&cfg).unwrap();
        let low = InferConfig { top_k: 100, min_points: 1 };
        let res = infer_scene(&model, &store, &scene, "tiny", &low).unwrap();
        assert_eq!(res.dump.layers.len(), cfg.layers + 1);
        assert_eq!(res.dump.layers[0].queries.len(), 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.json");
        res.dump.write(&path).unwrap();
        let back = PredictionDump::read(&path).unwrap();
        assert_eq!(back, res.dump);
        let scored = back.scored_instances().unwrap();
        let direct: Vec<ScoredInstance> = res.instances.iter().map(InstancePrediction::scored).collect();
        assert_eq!(scored, direct);
    }

    #[test]
    fn dump_reader_rejects_bad_documents() {
        assert!(PredictionDump::from_json("{}").is_err());
        let doc = PredictionDump {
            format: DUMP_FORMAT.into(),
            version: DUMP_VERSION,
            scene: "x".into(),
            num_points: 3,
            num_superpoints: 1,
            num_classes: 2,
            layers: vec![],
            instances: vec![InstanceDump { query: 0, class: 0, score: 0.5, points: vec![5] }],
        };
        assert!(doc.scored_instances().is_err());
        let wrong = PredictionDump { version: 9, ..doc.clone() };
        assert!(PredictionDump::from_json(&wrong.to_json().unwrap()).is_err());
    }

    #[test]
    fn parallel_prediction_matches_serial() {
        let cfg = tiny_config();
        let (model, store) = Model::new(&cfg, TINY_CLASSES, 5).unwrap();
        let scenes: Vec<PreparedScene> = (0..5).map(|_| tiny_scene(&cfg).unwrap()).collect();
        let par = predict_scenes(&model, &store, &scenes, &InferConfig::default()).unwrap();
        for (scene, p) in scenes.iter().zip(&par) {
            let serial = infer_scene(&model, &store, scene, "", &InferConfig::default()).unwrap();
            assert_eq!(&serial.instances, p);
        }
        let a = evaluate_model(&model, &store, &scenes, &InferConfig::default()).unwrap();
        let b = evaluate_model(&model, &store, &scenes, &InferConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}
