//! Instance-segmentation average precision.
//!
//! Predictions of one class are ranked across all scenes by score (larger
//! mask first on equal scores, then input order). Each claims the unmatched
//! same-class ground truth of its scene with the highest IoU, provided that
//! IoU reaches the threshold. AP is the area under the precision-recall
//! curve after making precision non-increasing from the right.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod dump;
pub use dump::{InstanceDump, LayerDump, PredictionDump, QueryDump};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredInstance {
    /// Point-level mask.
    pub mask: Vec<bool>,
    /// Zero-based foreground class.
    pub class: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledMask {
    pub mask: Vec<bool>,
    pub class: usize,
}

/// Predictions and ground truth of one scene.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneEval {
    pub predictions: Vec<ScoredInstance>,
    pub ground_truth: Vec<LabeledMask>,
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("mask_iou", format!("lengths {} and {}", a.len(), b.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// IoU thresholds averaged into mAP: 0.50, 0.55, …, 0.95.
pub fn map_thresholds() -> Vec<f64> {
    (0..10).map(|k| 0.5 + 0.05 * k as f64).collect()
}

/// Greedy matching outcome of one ranked prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Ranked {
    scene: usize,
    index: usize,
}

fn ranked(scenes: &[SceneEval], class: usize) -> Vec<Ranked> {
    let mut out: Vec<(f64, usize, Ranked)> = Vec::new();
    for (s, scene) in scenes.iter().enumerate() {
        for (i, p) in scene.predictions.iter().enumerate() {
            if p.class == class {
                let size = p.mask.iter().filter(|&&b| b).count();
                out.push((p.score, size, Ranked { scene: s, index: i }));
            }
        }
    }
    // Stable sort keeps scene-then-insertion order for full ties.
    out.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
    out.into_iter().map(|(_, _, r)| r).collect()
}

/// TP flags in ranking order plus the number of ground truths of `class`.
fn match_class(scenes: &[SceneEval], class: usize, threshold: f64) -> Result<(Vec<bool>, usize)> {
    let mut taken: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.ground_truth.len()]).collect();
    let total_gt = scenes
        .iter()
        .flat_map(|s| &s.ground_truth)
        .filter(|g| g.class == class)
        .count();
    let mut flags = Vec::new();
    for r in ranked(scenes, class) {
        let scene = &scenes[r.scene];
        let pred = &scene.predictions[r.index];
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in scene.ground_truth.iter().enumerate() {
            if gt.class != class || taken[r.scene][g] {
                continue;
            }
            let iou = mask_iou(&pred.mask, &gt.mask)?;
            if iou >= threshold && best.map_or(true, |(b, _)| iou > b) {
                best = Some((iou, g));
            }
        }
        if let Some((_, g)) = best {
            taken[r.scene][g] = true;
        }
        flags.push(best.is_some());
    }
    Ok((flags, total_gt))
}

fn integrate(flags: &[bool], total_gt: usize) -> f64 {
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for &f in flags {
        if f {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / total_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut area = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        area += (r - prev) * p;
        prev = *r;
    }
    area
}

/// AP of one class pooled over scenes; `None` when no scene has a ground
/// truth of that class.
pub fn average_precision_pooled(scenes: &[SceneEval], class: usize, threshold: f64) -> Result<Option<f64>> {
    for s in scenes {
        let n = s.ground_truth.first().map(|g| g.mask.len());
        let lens = s.predictions.iter().map(|p| p.mask.len()).chain(s.ground_truth.iter().map(|g| g.mask.len()));
        if let Some(n) = n.or_else(|| s.predictions.first().map(|p| p.mask.len())) {
            if lens.clone().any(|l| l != n) {
                return Err(Error::invalid("average_precision", "inconsistent point counts in a scene"));
            }
        }
        if s.predictions.iter().any(|p| !p.score.is_finite()) {
            return Err(Error::invalid("average_precision", "non-finite score"));
        }
    }
    let (flags, total_gt) = match_class(scenes, class, threshold)?;
    if total_gt == 0 {
        return Ok(None);
    }
    Ok(Some(integrate(&flags, total_gt)))
}

/// AP of one class within a single scene.
pub fn average_precision(
    predictions: &[ScoredInstance],
    ground_truth: &[LabeledMask],
    class: usize,
    threshold: f64,
) -> Result<Option<f64>> {
    let scene = SceneEval {
        predictions: predictions.to_vec(),
        ground_truth: ground_truth.to_vec(),
    };
    average_precision_pooled(std::slice::from_ref(&scene), class, threshold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    /// AP at each of [`map_thresholds`].
    pub ladder: Vec<f64>,
    pub ap50: f64,
    pub ap25: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub ap50: f64,
    pub ap25: f64,
    /// Classes that have at least one ground truth.
    pub classes: Vec<ClassAp>,
    /// Matching counts per scene at IoU 0.5.
    pub scenes: Vec<SceneCounts>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn evaluate(scenes: &[SceneEval], num_classes: usize) -> Result<EvalReport> {
    let ladder = map_thresholds();
    let mut classes = Vec::new();
    for c in 0..num_classes {
        let Some(ap25) = average_precision_pooled(scenes, c, 0.25)? else {
            continue;
        };
        let ladder_ap = ladder
            .iter()
            .map(|&t| average_precision_pooled(scenes, c, t).map(|a| a.unwrap_or(0.0)))
            .collect::<Result<Vec<_>>>()?;
        classes.push(ClassAp {
            class: c,
            ap50: ladder_ap[0],
            ladder: ladder_ap,
            ap25,
        });
    }
    let map = mean((0..ladder.len()).map(|t| mean(classes.iter().map(|c| c.ladder[t]))));
    let counts = scenes
        .iter()
        .map(|s| {
            let one = std::slice::from_ref(s);
            let mut counts = SceneCounts::default();
            for c in 0..num_classes {
                let (flags, total) = match_class(one, c, 0.5)?;
                let tp = flags.iter().filter(|&&f| f).count();
                counts.tp += tp;
                counts.fp += flags.len() - tp;
                counts.fn_ += total - tp;
            }
            Ok(counts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        map,
        ap50: mean(classes.iter().map(|c| c.ap50)),
        ap25: mean(classes.iter().map(|c| c.ap25)),
        classes,
        scenes: counts,
    })
}

impl EvalReport {
    /// Human-readable table, one row per class.
    pub fn table(&self, class_names: &[String]) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<14} {:>7} {:>7} {:>7}", "class", "AP", "AP50", "AP25");
        for c in &self.classes {
            let name = class_names.get(c.class).cloned().unwrap_or_else(|| format!("class{}", c.class));
            let ap = mean(c.ladder.iter().copied());
            let _ = writeln!(out, "{:<14} {:>7.4} {:>7.4} {:>7.4}", name, ap, c.ap50, c.ap25);
        }
        let _ = writeln!(out, "{:<14} {:>7.4} {:>7.4} {:>7.4}", "average", self.map, self.ap50, self.ap25);
        let (tp, fp, fn_) = self
            .scenes
            .iter()
            .fold((0, 0, 0), |(a, b, c), s| (a + s.tp, b + s.fp, c + s.fn_));
        let _ = writeln!(out, "scenes {}  tp {tp}  fp {fp}  fn {fn_}  (IoU 0.5)", self.scenes.len());
        out
    }

    /// `key=value` lines for scripts.
    pub fn key_values(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mAP={}", self.map);
        let _ = writeln!(out, "AP50={}", self.ap50);
        let _ = writeln!(out, "AP25={}", self.ap25);
        for c in &self.classes {
            let _ = writeln!(out, "class{}.AP={}", c.class, mean(c.ladder.iter().copied()));
            let _ = writeln!(out, "class{}.AP50={}", c.class, c.ap50);
            let _ = writeln!(out, "class{}.AP25={}", c.class, c.ap25);
        }
        for (i, s) in self.scenes.iter().enumerate() {
            let _ = writeln!(out, "scene{i}.tp={}", s.tp);
            let _ = writeln!(out, "scene{i}.fp={}", s.fp);
            let _ = writeln!(out, "scene{i}.fn={}", s.fn_);
        }
        out
    }

    /// Writes `<stem>.txt` (table) and `<stem>.kv` (key-value).
    pub fn write(&self, dir: &Path, stem: &str, class_names: &[String]) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.txt")), self.table(class_names))?;
        std::fs::write(dir.join(format!("{stem}.kv")), self.key_values())?;
        Ok(())
    }
}
