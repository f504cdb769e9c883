//! Semantic-guided query initialization.
//!
//! Voxels the semantic head is most confident are foreground get selected;
//! each scene query is then a softmax-weighted sum of the projected features
//! of those voxels, with weights produced by a small ReLU layer. Scene
//! queries are stacked on top of the learnable ones.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::nn::normal_init;
use crate::tensor::{Linear, ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Selected voxel indices, best score first.
    pub idx: Vec<usize>,
    /// Foreground confidence of each selected voxel, non-increasing.
    pub scores: Vec<f64>,
    pub alpha: f64,
}

/// Number of voxels kept for ratio `alpha`: `⌈alpha·m⌉`, at least one.
///
/// A small slack keeps products such as `0.7 · 10` from rounding up past
/// the intended integer.
pub fn selection_count(m: usize, alpha: f64) -> usize {
    ((alpha * m as f64 - 1e-9).ceil() as usize).clamp(1, m.max(1))
}

/// Per-voxel confidence: highest softmax probability among the foreground
/// classes (the last logit column is background and only normalizes).
pub fn foreground_scores(logits: &Tensor) -> Vec<f64> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let best = row[..row.len() - 1].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (best - max).exp() / z
        })
        .collect()
}

/// Keeps the `⌈alpha·m⌉` most confident voxels; equal scores go to the
/// lower voxel index.
pub fn select_voxels(logits: &Tensor, alpha: f64) -> Result<Selection> {
    let m = logits.rows();
    if m == 0 {
        return Err(Error::EmptyCloud);
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid("select_voxels", format!("alpha {alpha} outside (0, 1]")));
    }
    if logits.cols() < 2 {
        return Err(Error::invalid("select_voxels", "need at least one foreground class"));
    }
    let scores = foreground_scores(logits);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(selection_count(m, alpha));
    Ok(Selection {
        scores: order.iter().map(|&i| scores[i]).collect(),
        idx: order,
        alpha,
    })
}

#[derive(Clone, Debug)]
pub struct SceneQueryInit {
    /// Projection of voxel features to the query width.
    pub project: Linear,
    /// Maps each selected feature to one logit per scene query.
    pub weight: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct SceneQueries {
    /// `q_s x d`.
    pub queries: Var,
    /// Normalized aggregation weights, `q_s x |selection|`.
    pub weights: Var,
}

impl SceneQueryInit {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        feature_dim: usize,
        dim: usize,
        num_queries: usize,
    ) -> Result<Self> {
        let g = ParamGroup::Base;
        Ok(Self {
            project: Linear::new(store, rng, "scene_queries.project", feature_dim, dim, g)?,
            weight: Linear::new(store, rng, "scene_queries.weight", dim, num_queries, g)?,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.weight.out_dim
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        sel: &Selection,
    ) -> Result<SceneQueries> {
        if sel.idx.is_empty() {
            return Err(Error::invalid("init_scene_queries", "empty selection"));
        }
        // The projection is row-wise, so projecting after the gather equals
        // gathering projected rows.
        let picked = tape.gather_rows(features, &sel.idx)?;
        let f = self.project.forward(tape, store, picked)?;
        let logits = self.weight.forward(tape, store, f)?;
        let logits = tape.relu(logits);
        let logits = tape.transpose(logits)?;
        let weights = tape.softmax_rows(logits, None)?;
        let queries = tape.matmul(weights, f)?;
        Ok(SceneQueries { queries, weights })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuerySource {
    Scene,
    Learnable,
}

#[derive(Clone, Debug)]
pub struct QuerySet {
    /// `q x d`, scene queries first.
    pub queries: Var,
    pub sources: Vec<QuerySource>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn num_scene(&self) -> usize {
        self.sources.iter().filter(|s| **s == QuerySource::Scene).count()
    }
}

/// Learnable queries drawn from normal(0, 0.02).
pub fn learnable_queries(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    count: usize,
    dim: usize,
) -> Result<ParamId> {
    store.add("queries.learnable", ParamGroup::Base, normal_init(rng, &[count, dim], 0.02))
}

/// Stacks scene queries above learnable ones.
pub fn mix_queries(tape: &mut Tape, scene: Option<Var>, learnable: Option<Var>) -> Result<QuerySet> {
    let rows = |tape: &Tape, v: Option<Var>| v.map_or(0, |v| tape.value(v).rows());
    let sources: Vec<QuerySource> = std::iter::repeat(QuerySource::Scene)
        .take(rows(tape, scene))
        .chain(std::iter::repeat(QuerySource::Learnable).take(rows(tape, learnable)))
        .collect();
    let queries = match (scene, learnable) {
        (Some(s), Some(l)) => {
            if tape.value(s).cols() != tape.value(l).cols() {
                return Err(Error::shape("mix_queries", tape.shape(s), tape.shape(l)));
            }
            tape.concat_rows(&[s, l])?
        }
        (Some(v), None) | (None, Some(v)) => v,
        (None, None) => return Err(Error::invalid("mix_queries", "no queries")),
    };
    Ok(QuerySet { queries, sources })
}
