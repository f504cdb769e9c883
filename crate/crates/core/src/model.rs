//! The full network and the per-scene preprocessing it consumes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{backbone_input, neighborhoods, refine_coords, Backbone, BackboneConfig, BackboneOutput};
use crate::config::ModelConfig;
use crate::decoder::{DecodeOutput, Decoder, Frame, SceneState};
use crate::error::{Error, Result};
use crate::matching::{ground_truth_instances, total_loss, AuxInputs, GroundTruthInstance, LossBreakdown, LossWeights};
use crate::pointcloud::{segment_superpoints, voxelize, Connectivity, PointCloud, SuperpointPartition, VoxelGrid};
use crate::smq::{learnable_queries, mix_queries, select_voxels, QuerySet, SceneQueryInit, Selection};
use crate::tensor::gradcheck::{check_params, GradCheckReport, Tolerance};
use crate::tensor::{Checkpoint, Groups, ParamId, ParamStore, Tape, Tensor};

/// A scene voxelized, over-segmented and paired with its ground truth.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub cloud: PointCloud,
    pub grid: VoxelGrid,
    /// Backbone input rows, `m x 6`.
    pub input: Tensor,
    pub neighborhoods: Groups,
    pub partition: SuperpointPartition,
    pub frame: Frame,
    /// Empty for unlabeled scenes.
    pub ground_truth: Vec<GroundTruthInstance>,
}

impl PreparedScene {
    pub fn new(cloud: PointCloud, voxel_size: f64, cfg: &ModelConfig) -> Result<Self> {
        let grid = voxelize(&cloud, voxel_size)?;
        let partition = segment_superpoints(&grid, cfg.superpoint_k, cfg.superpoint_threshold)?;
        Self::assemble(cloud, grid, partition, cfg.connectivity)
    }

    /// Uses a given over-segmentation instead of computing one.
    pub fn with_partition(
        cloud: PointCloud,
        voxel_size: f64,
        connectivity: Connectivity,
        partition: SuperpointPartition,
    ) -> Result<Self> {
        let grid = voxelize(&cloud, voxel_size)?;
        if partition.num_voxels() != grid.len() || !partition.is_partition() {
            return Err(Error::invalid(
                "prepare scene",
                format!("partition covers {} of {} voxels", partition.num_voxels(), grid.len()),
            ));
        }
        Self::assemble(cloud, grid, partition, connectivity)
    }

    fn assemble(
        cloud: PointCloud,
        grid: VoxelGrid,
        partition: SuperpointPartition,
        connectivity: Connectivity,
    ) -> Result<Self> {
        let ground_truth = if cloud.has_labels() {
            ground_truth_instances(&cloud, &grid, &partition)?
        } else {
            Vec::new()
        };
        Ok(Self {
            input: backbone_input(&grid),
            neighborhoods: neighborhoods(&grid, connectivity),
            frame: Frame::of(&grid.coords),
            cloud,
            grid,
            partition,
            ground_truth,
        })
    }

    pub fn has_labels(&self) -> bool {
        self.cloud.has_labels()
    }
}

/// Module handles; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub num_classes: usize,
    pub backbone: Backbone,
    pub scene_init: Option<SceneQueryInit>,
    pub learnable: Option<ParamId>,
    pub decoder: Decoder,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub backbone: BackboneOutput,
    pub selection: Option<Selection>,
    pub queries: QuerySet,
    pub state: SceneState,
    pub decode: DecodeOutput,
}

impl Model {
    /// Builds the network with parameters drawn from `seed`.
    pub fn new(cfg: &ModelConfig, num_classes: usize, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate(num_classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(
            &mut store,
            &mut rng,
            &BackboneConfig {
                width: cfg.feature_dim,
                rounds: cfg.backbone_rounds,
                connectivity: cfg.connectivity,
                num_classes,
                with_bias: cfg.use_bias_refinement,
            },
        )?;
        let scene_init = if cfg.scene_queries > 0 {
            Some(SceneQueryInit::new(&mut store, &mut rng, cfg.feature_dim, cfg.dim, cfg.scene_queries)?)
        } else {
            None
        };
        let learnable = if cfg.learnable_queries > 0 {
            Some(learnable_queries(&mut store, &mut rng, cfg.learnable_queries, cfg.dim)?)
        } else {
            None
        };
        let decoder = Decoder::new(&mut store, &mut rng, cfg.feature_dim, &cfg.decoder(num_classes))?;
        let model = Self {
            config: cfg.clone(),
            num_classes,
            backbone,
            scene_init,
            learnable,
            decoder,
        };
        Ok((model, store))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, scene: &PreparedScene) -> Result<ModelOutput> {
        let input = tape.constant(scene.input.clone());
        let backbone = self.backbone.forward(tape, store, input, &scene.neighborhoods)?;

        let (selection, scene_queries) = match &self.scene_init {
            Some(init) => {
                let sel = select_voxels(tape.value(backbone.semantic), self.config.alpha)?;
                let sq = init.forward(tape, store, backbone.features, &sel)?;
                (Some(sel), Some(sq.queries))
            }
            None => (None, None),
        };
        let learnable = self.learnable.map(|id| tape.param(store, id));
        let queries = mix_queries(tape, scene_queries, learnable)?;

        let coords = match backbone.bias {
            Some(bias) => refine_coords(tape, &scene.grid.coords, bias)?,
            None => tape.constant(coords_tensor(&scene.grid.coords)),
        };
        let state = self
            .decoder
            .scene_state(tape, store, backbone.features, coords, &scene.partition, &scene.frame)?;
        let decode = self.decoder.decode(tape, store, queries.queries, &state)?;
        Ok(ModelOutput {
            backbone,
            selection,
            queries,
            state,
            decode,
        })
    }

    /// Forward pass plus the composite training objective.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        scene: &PreparedScene,
        weights: &LossWeights,
    ) -> Result<(ModelOutput, LossBreakdown)> {
        let (Some(labels), Some(centers)) = (&scene.grid.semantic, &scene.grid.centers) else {
            return Err(Error::Dataset("training needs a labeled scene".into()));
        };
        let out = self.forward(tape, store, scene)?;
        let aux = AuxInputs {
            semantic_logits: out.backbone.semantic,
            semantic_labels: labels,
            bias: out.backbone.bias,
            coords: &scene.grid.coords,
            centers,
        };
        let breakdown = total_loss(tape, &out.decode.predictions, &scene.ground_truth, &aux, weights)?;
        Ok((out, breakdown))
    }
}

fn coords_tensor(coords: &[[f64; 3]]) -> Tensor {
    Tensor::from_fn(coords.len(), 3, |i, j| coords[i][j])
}

pub const PARAM_PREFIX: &str = "param/";

/// Parameter arrays under `param/<name>`.
pub fn param_arrays(store: &ParamStore) -> Vec<(String, Tensor)> {
    store
        .iter()
        .map(|(_, name, t)| (format!("{PARAM_PREFIX}{name}"), t.clone()))
        .collect()
}

/// Copies every parameter from a checkpoint, which must hold exactly the
/// store's parameters with matching shapes.
pub fn load_params(store: &mut ParamStore, ckpt: &Checkpoint) -> Result<()> {
    let stored = ckpt.arrays.iter().filter(|(n, _)| n.starts_with(PARAM_PREFIX)).count();
    if stored != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {stored} parameters, model has {}",
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let key = format!("{PARAM_PREFIX}{}", store.name(id));
        let t = ckpt
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?
            .clone();
        if t.shape() != store.get(id).shape() {
            return Err(Error::Checkpoint(format!("{key} has shape {:?}", t.shape())));
        }
        store.set(id, t)?;
    }
    Ok(())
}

/// Tiny configuration used by the finite-difference check: 30 voxels in six
/// superpoints, two instances, three classes, four queries of width 8 and
/// two decoder layers.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 8,
        backbone_rounds: 1,
        dim: 8,
        heads: 2,
        ffn_dim: 16,
        layers: 2,
        scene_queries: 2,
        learnable_queries: 2,
        fourier_bands: 2,
        ..ModelConfig::default()
    }
}

pub const TINY_CLASSES: usize = 3;

/// Six clusters of five voxels in a row; clusters 0-1 form instance 1
/// (class 0), 2-3 instance 2 (class 1), 4-5 are background.
pub fn tiny_scene(cfg: &ModelConfig) -> Result<PreparedScene> {
    let voxel = 0.02;
    let offsets = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]];
    let mut coords = Vec::new();
    let mut colors = Vec::new();
    let mut semantic = Vec::new();
    let mut instance = Vec::new();
    for cluster in 0..6 {
        for (k, o) in offsets.iter().enumerate() {
            let base = cluster as f64 * 4.0;
            coords.push([(base + o[0] + 0.5) * voxel, (o[1] + 0.5) * voxel, (o[2] + 0.5 + 0.3 * cluster as f64) * voxel]);
            let t = (cluster * 5 + k) as f64 / 30.0;
            colors.push([t, 1.0 - t, 0.5 * (cluster % 2) as f64 + 0.1 * (k % 3) as f64]);
            let (s, i) = match cluster {
                0 | 1 => (0, 1),
                2 | 3 => (1, 2),
                _ => (TINY_CLASSES, 0),
            };
            semantic.push(s);
            instance.push(i);
        }
    }
    let cloud = PointCloud::new(coords, colors, TINY_CLASSES)?.with_labels(semantic, instance)?;
    let grid = voxelize(&cloud, voxel)?;
    // Voxels sort by key, which orders them cluster by cluster.
    let labels: Vec<usize> = grid.coords.iter().map(|c| (c[0] / (4.0 * voxel)).floor() as usize).collect();
    let partition = SuperpointPartition::from_labels(&labels);
    PreparedScene::with_partition(cloud, voxel, cfg.connectivity, partition)
}

/// Finite-difference check of the total loss, all terms active, against
/// every parameter of the tiny model.
pub fn tiny_gradient_check(seed: u64, tol: Tolerance) -> Result<GradCheckReport> {
    let cfg = tiny_config();
    let (model, store) = Model::new(&cfg, TINY_CLASSES, seed)?;
    let scene = tiny_scene(&cfg)?;
    let weights = LossWeights::default();
    check_params(&store, tol, |tape, store| {
        let (_, b) = model.loss(tape, store, &scene, &weights)?;
        Ok(b.total)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamGroup;

    #[test]
    fn tiny_scene_shape() {
        let scene = tiny_scene(&tiny_config()).unwrap();
        assert_eq!(scene.grid.len(), 30);
        assert_eq!(scene.partition.len(), 6);
        assert!(scene.partition.groups().iter().all(|g| g.len() == 5));
        assert_eq!(scene.ground_truth.len(), 2);
        let masks: Vec<Vec<bool>> = scene.ground_truth.iter().map(|g| g.mask.clone()).collect();
        assert_eq!(masks[0], vec![true, true, false, false, false, false]);
        assert_eq!(masks[1], vec![false, false, true, true, false, false]);
    }

    #[test]
    fn forward_shapes() {
        let cfg = tiny_config();
        let (model, store) = Model::new(&cfg, TINY_CLASSES, 1).unwrap();
        let scene = tiny_scene(&cfg).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &store, &scene).unwrap();
        assert_eq!(out.queries.len(), 4);
        assert_eq!(out.queries.num_scene(), 2);
        // ceil(0.4 * 30) voxels feed the scene queries.
        assert_eq!(out.selection.unwrap().idx.len(), 12);
        assert_eq!(out.decode.predictions.len(), 3);
        for p in &out.decode.predictions {
            assert_eq!(tape.shape(p.soft_masks), &[4, 6]);
            assert_eq!(tape.shape(p.class_logits), &[4, 4]);
        }
    }

    #[test]
    fn parameter_count_is_a_function_of_config() {
        let cfg = tiny_config();
        let (_, a) = Model::new(&cfg, 3, 1).unwrap();
        let (_, b) = Model::new(&cfg, 3, 2).unwrap();
        assert_eq!(a.num_scalars(), b.num_scalars());
        let names = |s: &ParamStore| s.iter().map(|(_, n, _)| n.to_string()).collect::<Vec<_>>();
        assert_eq!(names(&a), names(&b));
        let (_, wider) = Model::new(&ModelConfig { dim: 16, ..cfg.clone() }, 3, 1).unwrap();
        assert!(wider.num_scalars() > a.num_scalars());
    }

    #[test]
    fn ablations_drop_their_parameters() {
        let cfg = tiny_config();
        let has = |c: &ModelConfig, prefix: &str| {
            let (_, s) = Model::new(c, 3, 0).unwrap();
            let found = s.iter().any(|(_, n, _)| n.starts_with(prefix));
            found
        };
        assert!(has(&cfg, "bias_head") && has(&cfg, "position") && has(&cfg, "scene_queries"));
        let no_geo = ModelConfig { use_position: false, use_bias_refinement: false, ..cfg.clone() };
        assert!(!has(&no_geo, "bias_head") && !has(&no_geo, "position"));
        let learnable_only = ModelConfig { scene_queries: 0, learnable_queries: 4, ..cfg.clone() };
        assert!(!has(&learnable_only, "scene_queries"));
        let scene_only = ModelConfig { scene_queries: 4, learnable_queries: 0, ..cfg.clone() };
        assert!(!has(&scene_only, "queries.learnable"));
        let vanilla = ModelConfig { use_position: false, use_scene_update: false, ..cfg };
        assert!(!has(&vanilla, "decoder.layer0.update"));
    }

    #[test]
    fn every_ablation_trains_a_step() {
        let base = tiny_config();
        for cfg in [
            ModelConfig { use_position: false, use_bias_refinement: false, ..base.clone() },
            ModelConfig { scene_queries: 0, learnable_queries: 4, ..base.clone() },
            ModelConfig { scene_queries: 4, learnable_queries: 0, ..base.clone() },
            ModelConfig { use_position: false, use_scene_update: false, ..base.clone() },
        ] {
            let (model, store) = Model::new(&cfg, TINY_CLASSES, 0).unwrap();
            let scene = tiny_scene(&cfg).unwrap();
            let mut tape = Tape::new();
            let (_, b) = model.loss(&mut tape, &store, &scene, &LossWeights::default()).unwrap();
            let grads = tape.backward(b.total).unwrap().for_params(&store);
            let missing: Vec<&str> = store
                .ids()
                .filter(|id| grads[id.index()].is_none())
                .map(|id| store.name(id))
                .collect();
            assert!(missing.is_empty(), "{missing:?} in {cfg:?}");
        }
    }

    #[test]
    fn voxel_heads_use_their_own_group() {
        let (_, store) = Model::new(&tiny_config(), 3, 0).unwrap();
        for (id, name, _) in store.iter() {
            let head = name.starts_with("semantic_head") || name.starts_with("bias_head");
            assert_eq!(store.group(id) == ParamGroup::VoxelHead, head, "{name}");
        }
    }

    #[test]
    fn params_round_trip_through_checkpoint() {
        let (_, a) = Model::new(&tiny_config(), 3, 1).unwrap();
        let (_, mut b) = Model::new(&tiny_config(), 3, 2).unwrap();
        let ckpt = Checkpoint {
            config_hash: 0,
            step: 0,
            metadata: String::new(),
            arrays: param_arrays(&a),
        };
        load_params(&mut b, &ckpt).unwrap();
        for ((_, _, x), (_, _, y)) in a.iter().zip(b.iter()) {
            assert_eq!(x, y);
        }
        let (_, mut wide) = Model::new(&ModelConfig { dim: 16, ..tiny_config() }, 3, 0).unwrap();
        assert!(load_params(&mut wide, &ckpt).is_err());
    }

    #[test]
    fn unlabeled_scene_cannot_train() {
        let cfg = tiny_config();
        let labeled = tiny_scene(&cfg).unwrap();
        let mut cloud = labeled.cloud.clone();
        cloud.semantic = None;
        cloud.instance = None;
        let scene = PreparedScene::with_partition(cloud, 0.02, cfg.connectivity, labeled.partition.clone()).unwrap();
        assert!(scene.ground_truth.is_empty());
        let (model, store) = Model::new(&cfg, TINY_CLASSES, 0).unwrap();
        let mut tape = Tape::new();
        assert!(model.loss(&mut tape, &store, &scene, &LossWeights::default()).is_err());
        assert!(model.forward(&mut tape, &store, &scene).is_ok());
    }

    #[test]
    fn tiny_total_loss_gradients() {
        let start = std::time::Instant::now();
        let report = tiny_gradient_check(0, Tolerance::default()).unwrap();
        assert!(report.passed(), "{:?}", &report.mismatches[..report.mismatches.len().min(5)]);
        eprintln!("checked {} scalars in {:?}, max abs error {:e}", report.checked, start.elapsed(), report.max_abs_error);
    }
}
