//! Interleaving transformer decoder.
//!
//! Every layer first refines the queries (masked cross-attention onto
//! superpoint features plus position embeddings, self-attention, FFN) and
//! then lets the superpoints attend back to the refined queries. All blocks
//! are pre-norm residual. Mask and class heads are shared across layers and
//! also applied to the initial queries.

use rand::Rng;

use crate::error::{Error, Result};
use crate::pointcloud::SuperpointPartition;
use crate::tensor::{
    AttentionOutput, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamGroup, ParamStore, Tape,
    Tensor, Var,
};

#[derive(Clone, Debug)]
pub struct DecoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    /// Mask threshold τ.
    pub mask_threshold: f64,
    pub fourier_bands: usize,
    /// Add Fourier position embeddings of superpoint centers to the keys.
    pub use_position: bool,
    /// Run the superpoint update block after each query refinement but the last.
    pub use_scene_update: bool,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 {
            return bad("decoder needs at least one layer".into());
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return bad(format!("mask threshold {} outside (0, 1)", self.mask_threshold));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("width {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.use_position && self.fourier_bands == 0 {
            return bad("position embeddings need at least one Fourier band".into());
        }
        Ok(())
    }
}

/// Per-axis `[0, 1]` normalization frame for superpoint centers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Frame {
    pub fn unit() -> Self {
        Self {
            lo: [0.0; 3],
            hi: [1.0; 3],
        }
    }

    pub fn of(coords: &[[f64; 3]]) -> Self {
        let (lo, hi) = crate::pointcloud::cloud::bounds(coords);
        Self { lo, hi }
    }
}

/// Sinusoidal features of coordinates normalized by `frame`.
///
/// Output columns are grouped by band: for band `b` the six columns are
/// `sin(2^b π x), sin(2^b π y), sin(2^b π z)` then the matching cosines.
/// Axes where the frame is degenerate are pinned to 0.5.
pub fn fourier_features(tape: &mut Tape, coords: Var, frame: &Frame, bands: usize) -> Result<Var> {
    let shape = tape.shape(coords).to_vec();
    if shape.len() != 2 || shape[1] != 3 {
        return Err(Error::shape("fourier_features", &shape, &[shape.first().copied().unwrap_or(0), 3]));
    }
    if !tape.value(coords).is_finite() {
        return Err(Error::invalid("fourier_features", "non-finite coordinates"));
    }
    let n = shape[0];
    let mut scale = [0.0; 3];
    let mut offset = [0.5; 3];
    for a in 0..3 {
        let range = frame.hi[a] - frame.lo[a];
        if range > 1e-12 {
            scale[a] = 1.0 / range;
            offset[a] = -frame.lo[a] / range;
        }
    }
    let scale = tape.constant(Tensor::from_fn(n, 3, |_, a| scale[a]));
    let offset = tape.constant(Tensor::from_fn(n, 3, |_, a| offset[a]));
    let norm = tape.mul(coords, scale)?;
    let norm = tape.add(norm, offset)?;
    let mut parts = Vec::with_capacity(2 * bands);
    for b in 0..bands {
        let x = tape.scale(norm, (1u64 << b) as f64 * std::f64::consts::PI);
        parts.push(tape.sin(x));
        parts.push(tape.cos(x));
    }
    tape.concat_cols(&parts)
}

/// Additive attention mask: −∞ where the previous soft mask is below `τ`.
/// Rows that would mask every key are cleared so the query attends freely.
pub fn attention_mask(prev_soft: &Tensor, threshold: f64) -> Tensor {
    let (q, n) = (prev_soft.rows(), prev_soft.cols());
    let mut data: Vec<f64> = prev_soft
        .data()
        .iter()
        .map(|&s| if s < threshold { f64::NEG_INFINITY } else { 0.0 })
        .collect();
    for row in data.chunks_mut(n.max(1)) {
        if row.iter().all(|v| *v == f64::NEG_INFINITY) {
            row.fill(0.0);
        }
    }
    Tensor::new(&[q, n], data).expect("mask keeps input shape")
}

/// Two-layer feed-forward block with a pre-norm.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl FeedForward {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim, ParamGroup::Base)?,
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), &[dim, hidden, dim], ParamGroup::Base)?,
        })
    }

    /// `x + mlp(norm(x))`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm.forward(tape, store, x)?;
        let h = self.mlp.forward(tape, store, h)?;
        tape.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct QueryRefineBlock {
    pub cross_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct SceneUpdateBlock {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub refine: QueryRefineBlock,
    pub update: Option<SceneUpdateBlock>,
}

/// Refined queries and the per-head cross-attention weights.
#[derive(Clone, Debug)]
pub struct RefineOutput {
    pub queries: Var,
    pub cross_weights: Vec<Var>,
}

impl QueryRefineBlock {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &DecoderConfig) -> Result<Self> {
        let g = ParamGroup::Base;
        Ok(Self {
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), cfg.dim, g)?,
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross_attn"), cfg.dim, cfg.heads)?,
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), cfg.dim, g)?,
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), cfg.dim, cfg.heads)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), cfg.dim, cfg.ffn_dim)?,
        })
    }

    /// `memory` is the superpoint features, with position embeddings already
    /// added when they are in use; it serves as both keys and values.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        memory: Var,
        mask: &Tensor,
    ) -> Result<RefineOutput> {
        let h = self.cross_norm.forward(tape, store, queries)?;
        let AttentionOutput { output, weights } =
            self.cross_attn.forward(tape, store, h, memory, memory, Some(mask))?;
        let q = tape.add(queries, output)?;
        let h = self.self_norm.forward(tape, store, q)?;
        let s = self.self_attn.forward(tape, store, h, h, h, None)?;
        let q = tape.add(q, s.output)?;
        let q = self.ffn.forward(tape, store, q)?;
        Ok(RefineOutput {
            queries: q,
            cross_weights: weights,
        })
    }
}

impl SceneUpdateBlock {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &DecoderConfig) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.dim, ParamGroup::Base)?,
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), cfg.dim, cfg.heads)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), cfg.dim, cfg.ffn_dim)?,
        })
    }

    /// Superpoints (plus position embeddings) attend to the refined queries
    /// without masking.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        position: Option<Var>,
        queries: Var,
    ) -> Result<Var> {
        let x = match position {
            Some(e) => tape.add(features, e)?,
            None => features,
        };
        let h = self.norm.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, h, queries, queries, None)?;
        let f = tape.add(features, a.output)?;
        self.ffn.forward(tape, store, f)
    }
}

/// Superpoint-level inputs to the decoder.
#[derive(Clone, Copy, Debug)]
pub struct SceneState {
    /// `n_s x d`.
    pub features: Var,
    /// Pooled (refined) voxel coordinates, `n_s x 3`.
    pub centers: Var,
    /// Position embeddings, `n_s x d`, when enabled.
    pub position: Option<Var>,
    /// Static mask features, `n_s x d`.
    pub mask_features: Var,
}

/// Builds [`SceneState`] from voxel features and refined voxel coordinates.
#[derive(Clone, Debug)]
pub struct SceneEncoder {
    pub feature_proj: Mlp,
    pub mask_proj: Linear,
}

impl SceneEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, feature_dim: usize, dim: usize) -> Result<Self> {
        let g = ParamGroup::Base;
        Ok(Self {
            feature_proj: Mlp::new(store, rng, "scene.feature_proj", &[feature_dim, dim, dim], g)?,
            mask_proj: Linear::new(store, rng, "scene.mask_proj", dim, dim, g)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct PositionEncoding {
    pub bands: usize,
    pub proj: Linear,
}

impl PositionEncoding {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, bands: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            bands,
            proj: Linear::new(store, rng, "position.proj", 6 * bands, dim, ParamGroup::Base)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, centers: Var, frame: &Frame) -> Result<Var> {
        let f = fourier_features(tape, centers, frame, self.bands)?;
        self.proj.forward(tape, store, f)
    }
}

#[derive(Clone, Debug)]
pub struct MaskHead {
    pub norm: LayerNorm,
    pub proj: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerPrediction {
    pub layer: usize,
    /// `q x n_s` logits of the soft masks.
    pub mask_logits: Var,
    /// `q x n_s`, in (0, 1).
    pub soft_masks: Var,
    /// `q x (c + 1)`; the last class is background.
    pub class_logits: Var,
    pub class_probs: Var,
}

impl LayerPrediction {
    /// `soft > τ` per entry, one row per query.
    pub fn binary_masks(&self, tape: &Tape, threshold: f64) -> Vec<Vec<bool>> {
        let soft = tape.value(self.soft_masks);
        (0..soft.rows())
            .map(|i| soft.row(i).iter().map(|&s| s > threshold).collect())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct DecodeOutput {
    /// `L + 1` predictions; index 0 comes from the initial queries.
    pub predictions: Vec<LayerPrediction>,
    /// Attention mask used by each layer.
    pub masks: Vec<Tensor>,
    /// Per-layer, per-head cross-attention weights.
    pub cross_weights: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub encoder: SceneEncoder,
    pub position: Option<PositionEncoding>,
    pub layers: Vec<DecoderLayer>,
    pub mask_head: MaskHead,
    pub class_head: Mlp,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, feature_dim: usize, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let g = ParamGroup::Base;
        let encoder = SceneEncoder::new(store, rng, feature_dim, d)?;
        let position = if cfg.use_position {
            Some(PositionEncoding::new(store, rng, cfg.fourier_bands, d)?)
        } else {
            None
        };
        let layers = (0..cfg.layers)
            .map(|l| {
                let name = format!("decoder.layer{l}");
                Ok(DecoderLayer {
                    refine: QueryRefineBlock::new(store, rng, &format!("{name}.refine"), cfg)?,
                    // The final update would feed no later layer.
                    update: if cfg.use_scene_update && l + 1 < cfg.layers {
                        Some(SceneUpdateBlock::new(store, rng, &format!("{name}.update"), cfg)?)
                    } else {
                        None
                    },
                })
            })
            .collect::<Result<_>>()?;
        let mask_head = MaskHead {
            norm: LayerNorm::new(store, "mask_head.norm", d, g)?,
            proj: Linear::new(store, rng, "mask_head.proj", d, d, g)?,
        };
        let class_head = Mlp::new(store, rng, "class_head", &[d, d, cfg.num_classes + 1], g)?;
        Ok(Self {
            config: cfg.clone(),
            encoder,
            position,
            layers,
            mask_head,
            class_head,
        })
    }

    /// Pools voxel features and refined coordinates to superpoints and
    /// derives the position embeddings and mask features.
    pub fn scene_state(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        voxel_features: Var,
        refined_coords: Var,
        part: &SuperpointPartition,
        frame: &Frame,
    ) -> Result<SceneState> {
        use crate::pointcloud::pool_to_superpoints;
        let projected = self.encoder.feature_proj.forward(tape, store, voxel_features)?;
        let features = pool_to_superpoints(tape, projected, part)?;
        let centers = pool_to_superpoints(tape, refined_coords, part)?;
        let position = match &self.position {
            Some(pe) => Some(pe.forward(tape, store, centers, frame)?),
            None => None,
        };
        let mask_features = self.encoder.mask_proj.forward(tape, store, features)?;
        Ok(SceneState {
            features,
            centers,
            position,
            mask_features,
        })
    }

    /// Mask and class predictions for a query set.
    pub fn predict(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: usize,
        queries: Var,
        mask_features: Var,
    ) -> Result<LayerPrediction> {
        let h = self.mask_head.norm.forward(tape, store, queries)?;
        let h = self.mask_head.proj.forward(tape, store, h)?;
        let mask_logits = tape.matmul_nt(h, mask_features)?;
        let soft_masks = tape.sigmoid(mask_logits);
        let class_logits = self.class_head.forward(tape, store, queries)?;
        let class_probs = tape.softmax_rows(class_logits, None)?;
        Ok(LayerPrediction {
            layer,
            mask_logits,
            soft_masks,
            class_logits,
            class_probs,
        })
    }

    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        state: &SceneState,
    ) -> Result<DecodeOutput> {
        let d = self.config.dim;
        if tape.value(queries).cols() != d || tape.value(state.features).cols() != d {
            return Err(Error::shape("decode", tape.shape(queries), tape.shape(state.features)));
        }
        let mut q = queries;
        let mut features = state.features;
        let mut predictions = vec![self.predict(tape, store, 0, q, state.mask_features)?];
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut cross_weights = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let prev = predictions.last().expect("layer-0 prediction exists").soft_masks;
            let mask = attention_mask(tape.value(prev), self.config.mask_threshold);
            let memory = match state.position {
                Some(e) => tape.add(features, e)?,
                None => features,
            };
            let refined = layer.refine.forward(tape, store, q, memory, &mask)?;
            q = refined.queries;
            if let Some(update) = &layer.update {
                features = update.forward(tape, store, features, state.position, q)?;
            }
            predictions.push(self.predict(tape, store, l + 1, q, state.mask_features)?);
            masks.push(mask);
            cross_weights.push(refined.cross_weights);
        }
        Ok(DecodeOutput {
            predictions,
            masks,
            cross_weights,
        })
    }
}
