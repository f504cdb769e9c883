//! Bipartite matching between predicted and ground-truth masks, and the
//! training objective built on it.

use crate::backbone::{geometric_loss, semantic_loss};
use crate::decoder::LayerPrediction;
use crate::error::{Error, Result};
use crate::pointcloud::{PointCloud, SuperpointPartition, VoxelGrid};
use crate::tensor::{Tape, Tensor, Var};

/// Dice smoothing constant.
pub const DICE_EPS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthInstance {
    pub id: u32,
    /// Zero-based foreground class.
    pub class: usize,
    /// Superpoint-level mask.
    pub mask: Vec<bool>,
    /// Point-level mask.
    pub points: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 0.8,
            bce: 1.0,
            dice: 1.0,
            aux: 0.4,
        }
    }
}

/// Ground-truth instances at superpoint resolution.
///
/// Each superpoint goes to the instance (or background) owning most of its
/// points, ties to the lower id. Instances left without a superpoint are
/// dropped since no prediction could cover them.
pub fn ground_truth_instances(
    pc: &PointCloud,
    grid: &VoxelGrid,
    part: &SuperpointPartition,
) -> Result<Vec<GroundTruthInstance>> {
    let (Some(semantic), Some(instance)) = (&pc.semantic, &pc.instance) else {
        return Err(Error::Dataset("scene has no labels".into()));
    };
    let ids = pc.instance_ids();
    let slot = |id: u32| ids.binary_search(&id).map_or(0, |k| k + 1);
    let point_sp = part.point_to_superpoint(grid);
    let mut counts = vec![vec![0usize; ids.len() + 1]; part.len()];
    for (p, &s) in point_sp.iter().enumerate() {
        counts[s][slot(instance[p])] += 1;
    }
    let owner: Vec<usize> = counts
        .iter()
        .map(|c| {
            let best = *c.iter().max().expect("at least background slot");
            c.iter().position(|&v| v == best).expect("max is present")
        })
        .collect();
    let mut out = Vec::new();
    for (k, &id) in ids.iter().enumerate() {
        let mask: Vec<bool> = owner.iter().map(|&o| o == k + 1).collect();
        if !mask.iter().any(|&b| b) {
            continue;
        }
        let points: Vec<bool> = instance.iter().map(|&i| i == id).collect();
        let first = points.iter().position(|&b| b).expect("instance has points");
        out.push(GroundTruthInstance {
            id,
            class: semantic[first],
            mask,
            points,
        });
    }
    Ok(out)
}

fn bce_from_logit(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Dice loss of one soft mask against a binary target, on plain values.
pub fn dice_value(soft: &[f64], gt: &[bool]) -> f64 {
    let (mut inter, mut s, mut g) = (0.0, 0.0, 0.0);
    for (&p, &t) in soft.iter().zip(gt) {
        s += p;
        if t {
            inter += p;
            g += 1.0;
        }
    }
    1.0 - (2.0 * inter + DICE_EPS) / (s + g + DICE_EPS)
}

/// Mean dice loss over rows of `soft` (`k x n_s`) against `targets`.
pub fn dice_loss(tape: &mut Tape, soft: Var, targets: &Tensor) -> Result<Var> {
    let t = tape.constant(targets.clone());
    let inter = tape.mul(soft, t)?;
    let inter = tape.sum_rows(inter)?;
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, DICE_EPS);
    let s = tape.sum_rows(soft)?;
    let g = tape.sum_rows(t)?;
    let den = tape.add(s, g)?;
    let den = tape.add_scalar(den, DICE_EPS);
    let ratio = tape.div(num, den)?;
    let ratio = tape.mean(ratio);
    let neg = tape.scale(ratio, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Matching cost `q x n_gt` from class probabilities and mask logits.
pub fn pair_cost(
    class_probs: &Tensor,
    mask_logits: &Tensor,
    gts: &[GroundTruthInstance],
    w: &LossWeights,
) -> Result<Tensor> {
    let (q, n_s) = (mask_logits.rows(), mask_logits.cols());
    if class_probs.rows() != q {
        return Err(Error::shape("pair_cost", class_probs.shape(), mask_logits.shape()));
    }
    for gt in gts {
        if gt.mask.len() != n_s || gt.class + 1 >= class_probs.cols() {
            return Err(Error::invalid("pair_cost", "ground truth does not fit the prediction"));
        }
    }
    let soft: Vec<f64> = mask_logits.data().iter().map(|&x| sigmoid(x)).collect();
    Ok(Tensor::from_fn(q, gts.len(), |i, j| {
        let gt = &gts[j];
        let logits = mask_logits.row(i);
        let bce = logits
            .iter()
            .zip(&gt.mask)
            .map(|(&x, &y)| bce_from_logit(x, if y { 1.0 } else { 0.0 }))
            .sum::<f64>()
            / n_s as f64;
        let dice = dice_value(&soft[i * n_s..(i + 1) * n_s], &gt.mask);
        -w.cls * class_probs.get(i, gt.class) + w.bce * bce + w.dice * dice
    }))
}

/// One-to-one assignment of ground truths to predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Prediction matched to each ground truth; `None` only when there are
    /// more ground truths than predictions.
    pub pred_for_gt: Vec<Option<usize>>,
    /// Sum of matched costs, accumulated in ground-truth order.
    pub cost: f64,
}

impl Assignment {
    /// `(gt, pred)` pairs in ground-truth order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pred_for_gt.iter().enumerate().filter_map(|(j, p)| p.map(|i| (j, i)))
    }
}

fn canonical_cost(cost: &Tensor, pred_for_gt: &[Option<usize>]) -> f64 {
    pred_for_gt
        .iter()
        .enumerate()
        .filter_map(|(j, p)| p.map(|i| cost.get(i, j)))
        .sum()
}

/// Shortest-augmenting-path assignment for an `n x m` matrix with `n ≤ m`;
/// returns the column of every row.
fn solve_rows(a: &[Vec<f64>]) -> Vec<usize> {
    let n = a.len();
    if n == 0 {
        return Vec::new();
    }
    let m = a[0].len();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of_row[p[j] - 1] = j - 1;
        }
    }
    col_of_row
}

/// Optimal assignment of the ground truths in `free_gts` to predictions not
/// in `taken`, as `(gt, pred)` pairs.
fn solve_subproblem(cost: &Tensor, free_gts: &[usize], taken: &[bool]) -> Vec<(usize, Option<usize>)> {
    let preds: Vec<usize> = (0..cost.rows()).filter(|&i| !taken[i]).collect();
    // Dummy zero-cost predictions absorb ground truths that cannot be matched.
    let width = preds.len().max(free_gts.len());
    let rows: Vec<Vec<f64>> = free_gts
        .iter()
        .map(|&j| (0..width).map(|c| preds.get(c).map_or(0.0, |&i| cost.get(i, j))).collect())
        .collect();
    solve_rows(&rows)
        .into_iter()
        .zip(free_gts)
        .map(|(c, &j)| (j, preds.get(c).copied()))
        .collect()
}

/// Minimum-cost injective assignment of ground truths (columns) to
/// predictions (rows). Among optimal assignments the lexicographically
/// smallest `pred_for_gt` is returned.
pub fn hungarian(cost: &Tensor) -> Result<Assignment> {
    let (q, n) = (cost.rows(), cost.cols());
    for i in 0..q {
        for j in 0..n {
            let c = cost.get(i, j);
            if c.is_nan() {
                return Err(Error::NanCost { row: i, col: j });
            }
            if c.is_infinite() {
                return Err(Error::invalid("hungarian", format!("infinite cost at ({i}, {j})")));
            }
        }
    }
    let all: Vec<usize> = (0..n).collect();
    let mut pred_for_gt = vec![None; n];
    for (j, p) in solve_subproblem(cost, &all, &vec![false; q]) {
        pred_for_gt[j] = p;
    }
    let mut best = canonical_cost(cost, &pred_for_gt);

    // Fix ground truths one at a time to the smallest prediction that still
    // admits an optimal completion.
    let mut taken = vec![false; q];
    for j in 0..n {
        let rest: Vec<usize> = (j + 1..n).collect();
        let mut fixed = false;
        for i in 0..q {
            if taken[i] {
                continue;
            }
            if pred_for_gt[j] == Some(i) {
                fixed = true;
                break;
            }
            taken[i] = true;
            let mut trial = pred_for_gt.clone();
            trial[j] = Some(i);
            for (jj, p) in solve_subproblem(cost, &rest, &taken) {
                trial[jj] = p;
            }
            let c = canonical_cost(cost, &trial);
            if c <= best {
                best = c;
                pred_for_gt = trial;
                fixed = true;
                break;
            }
            taken[i] = false;
        }
        match pred_for_gt[j] {
            Some(i) if fixed => taken[i] = true,
            _ => {}
        }
    }
    Ok(Assignment {
        cost: canonical_cost(cost, &pred_for_gt),
        pred_for_gt,
    })
}

/// Loss terms of one decoder layer (unweighted).
#[derive(Clone, Copy, Debug)]
pub struct LayerLoss {
    pub cls: Var,
    pub bce: Option<Var>,
    pub dice: Option<Var>,
}

/// Classification over all queries (unmatched ones toward background) and
/// mask terms over matched pairs.
pub fn layer_loss(
    tape: &mut Tape,
    pred: &LayerPrediction,
    gts: &[GroundTruthInstance],
    assignment: &Assignment,
) -> Result<LayerLoss> {
    let logits = tape.value(pred.class_logits);
    let (q, background) = (logits.rows(), logits.cols() - 1);
    let mut targets = vec![background; q];
    let pairs: Vec<(usize, usize)> = assignment.pairs().collect();
    for &(j, i) in &pairs {
        targets[i] = gts[j].class;
    }
    let cls = tape.cross_entropy(pred.class_logits, &targets)?;
    if pairs.is_empty() {
        return Ok(LayerLoss {
            cls,
            bce: None,
            dice: None,
        });
    }
    let n_s = tape.value(pred.mask_logits).cols();
    let preds: Vec<usize> = pairs.iter().map(|&(_, i)| i).collect();
    let target = Tensor::from_fn(pairs.len(), n_s, |k, s| if gts[pairs[k].0].mask[s] { 1.0 } else { 0.0 });
    let logits = tape.gather_rows(pred.mask_logits, &preds)?;
    let bce = tape.bce_with_logits(logits, &target)?;
    let soft = tape.gather_rows(pred.soft_masks, &preds)?;
    let dice = dice_loss(tape, soft, &target)?;
    Ok(LayerLoss {
        cls,
        bce: Some(bce),
        dice: Some(dice),
    })
}

/// Auxiliary voxel-level supervision.
#[derive(Clone, Copy, Debug)]
pub struct AuxInputs<'a> {
    pub semantic_logits: Var,
    pub semantic_labels: &'a [usize],
    pub bias: Option<Var>,
    pub coords: &'a [[f64; 3]],
    pub centers: &'a [Option<[f64; 3]>],
}

#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub semantic: Var,
    pub geometric: Option<Var>,
    pub layers: Vec<LayerLoss>,
    pub assignments: Vec<Assignment>,
}

/// Composite objective: weighted auxiliary terms plus the matched set loss
/// at every decoder layer, each layer matched independently.
pub fn total_loss(
    tape: &mut Tape,
    predictions: &[LayerPrediction],
    gts: &[GroundTruthInstance],
    aux: &AuxInputs<'_>,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let semantic = semantic_loss(tape, aux.semantic_logits, aux.semantic_labels)?;
    let geometric = match aux.bias {
        Some(b) => Some(geometric_loss(tape, b, aux.coords, aux.centers)?),
        None => None,
    };
    let aux_sum = match geometric {
        Some(g) => tape.add(semantic, g)?,
        None => semantic,
    };
    let mut total = tape.scale(aux_sum, w.aux);
    let mut layers = Vec::with_capacity(predictions.len());
    let mut assignments = Vec::with_capacity(predictions.len());
    for pred in predictions {
        let assignment = if gts.is_empty() {
            Assignment {
                pred_for_gt: Vec::new(),
                cost: 0.0,
            }
        } else {
            let cost = pair_cost(
                tape.value(pred.class_probs),
                tape.value(pred.mask_logits),
                gts,
                w,
            )?;
            hungarian(&cost)?
        };
        let l = layer_loss(tape, pred, gts, &assignment)?;
        let mut terms = vec![tape.scale(l.cls, w.cls)];
        if let (Some(b), Some(d)) = (l.bce, l.dice) {
            terms.push(tape.scale(b, w.bce));
            terms.push(tape.scale(d, w.dice));
        }
        for t in terms {
            total = tape.add(total, t)?;
        }
        layers.push(l);
        assignments.push(assignment);
    }
    Ok(LossBreakdown {
        total,
        semantic,
        geometric,
        layers,
        assignments,
    })
}
