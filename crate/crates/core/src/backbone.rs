//! Voxel feature extractor with semantic and center-offset heads.
//!
//! This is a small stand-in for a sparse convolutional U-Net: a pointwise
//! MLP on `[normalized coords, colors]`, then a few residual rounds that mix
//! each voxel with the mean of its occupied grid neighborhood.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::pointcloud::{Connectivity, VoxelGrid};
use crate::tensor::{Groups, Linear, Mlp, ParamGroup, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct BackboneConfig {
    pub width: usize,
    pub rounds: usize,
    pub connectivity: Connectivity,
    pub num_classes: usize,
    /// Build the center-offset head.
    pub with_bias: bool,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub input: Mlp,
    pub rounds: Vec<Linear>,
    pub semantic_head: Mlp,
    pub bias_head: Option<Mlp>,
}

#[derive(Clone, Copy, Debug)]
pub struct BackboneOutput {
    /// Voxel features, `m x width`.
    pub features: Var,
    /// Semantic logits, `m x (c + 1)`; the last column is background.
    pub semantic: Var,
    /// Predicted offset from each voxel to its instance center, `m x 3`.
    pub bias: Option<Var>,
}

/// Per-voxel input rows `[normalized xyz, rgb]`.
pub fn backbone_input(grid: &VoxelGrid) -> Tensor {
    let norm = grid.normalized_coords();
    Tensor::from_fn(grid.len(), 6, |i, j| {
        if j < 3 {
            norm[i][j]
        } else {
            grid.colors[i][j - 3]
        }
    })
}

/// Each voxel's occupied neighborhood including itself, for mean aggregation.
pub fn neighborhoods(grid: &VoxelGrid, connectivity: Connectivity) -> Groups {
    let groups = grid
        .neighbors(connectivity)
        .into_iter()
        .enumerate()
        .map(|(i, mut ns)| {
            let at = ns.partition_point(|&j| j < i);
            ns.insert(at, i);
            ns
        })
        .collect();
    Arc::new(groups)
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &BackboneConfig) -> Result<Self> {
        let w = cfg.width;
        let base = ParamGroup::Base;
        let head = ParamGroup::VoxelHead;
        let input = Mlp::new(store, rng, "backbone.input", &[6, w, w], base)?;
        let rounds = (0..cfg.rounds)
            .map(|r| Linear::new(store, rng, &format!("backbone.round{r}"), w, w, base))
            .collect::<Result<_>>()?;
        let semantic_head = Mlp::new(store, rng, "semantic_head", &[w, w, cfg.num_classes + 1], head)?;
        let bias_head = if cfg.with_bias {
            Some(Mlp::new(store, rng, "bias_head", &[w, w, 3], head)?)
        } else {
            None
        };
        Ok(Self {
            input,
            rounds,
            semantic_head,
            bias_head,
        })
    }

    /// Voxel features from `input` rows (see [`backbone_input`]).
    pub fn extract_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: Var,
        neighborhoods: &Groups,
    ) -> Result<Var> {
        let m = tape.value(input).rows();
        if m == 0 {
            return Err(Error::EmptyCloud);
        }
        if neighborhoods.len() != m {
            return Err(Error::shape("extract_features", tape.shape(input), &[neighborhoods.len()]));
        }
        let mut h = self.input.forward(tape, store, input)?;
        for round in &self.rounds {
            let pooled = tape.segment_mean(h, neighborhoods)?;
            let mixed = round.forward(tape, store, pooled)?;
            let mixed = tape.relu(mixed);
            h = tape.add(h, mixed)?;
        }
        Ok(h)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: Var,
        neighborhoods: &Groups,
    ) -> Result<BackboneOutput> {
        let features = self.extract_features(tape, store, input, neighborhoods)?;
        let semantic = self.semantic_head.forward(tape, store, features)?;
        let bias = match &self.bias_head {
            Some(head) => Some(head.forward(tape, store, features)?),
            None => None,
        };
        Ok(BackboneOutput {
            features,
            semantic,
            bias,
        })
    }
}

/// Mean cross-entropy of voxel logits against zero-based labels
/// (`c` is background).
pub fn semantic_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Mean ℓ1 error between predicted offsets and `center - coord` over voxels
/// that belong to an instance. Exactly zero when there are none.
pub fn geometric_loss(
    tape: &mut Tape,
    bias: Var,
    coords: &[[f64; 3]],
    centers: &[Option<[f64; 3]>],
) -> Result<Var> {
    let m = coords.len();
    if tape.shape(bias) != [m, 3] || centers.len() != m {
        return Err(Error::shape("geometric_loss", tape.shape(bias), &[m, 3]));
    }
    let valid = centers.iter().filter(|c| c.is_some()).count();
    if valid == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let target = Tensor::from_fn(m, 3, |i, a| centers[i].map_or(0.0, |c| c[a] - coords[i][a]));
    let mask = Tensor::from_fn(m, 3, |i, _| if centers[i].is_some() { 1.0 } else { 0.0 });
    let target = tape.constant(target);
    let mask = tape.constant(mask);
    let diff = tape.sub(bias, target)?;
    let diff = tape.abs(diff);
    let diff = tape.mul(diff, mask)?;
    let total = tape.sum(diff);
    Ok(tape.scale(total, 1.0 / valid as f64))
}

/// Voxel coordinates shifted by the predicted offsets.
pub fn refine_coords(tape: &mut Tape, coords: &[[f64; 3]], bias: Var) -> Result<Var> {
    let c = Tensor::from_fn(coords.len(), 3, |i, a| coords[i][a]);
    let c = tape.constant(c);
    tape.add(c, bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{voxelize, PointCloud};
    use crate::tensor::gradcheck::{check_params, Tolerance};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(rounds: usize) -> BackboneConfig {
        BackboneConfig {
            width: 4,
            rounds,
            connectivity: Connectivity::Corners,
            num_classes: 2,
            with_bias: true,
        }
    }

    fn build(rounds: usize, seed: u64) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = Backbone::new(&mut store, &mut rng, &config(rounds)).unwrap();
        (store, bb)
    }

    fn features(store: &ParamStore, bb: &Backbone, input: &Tensor, groups: &Groups) -> Tensor {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let f = bb.extract_features(&mut tape, store, x, groups).unwrap();
        tape.value(f).clone()
    }

    fn dense(store: &ParamStore, layer: &Linear, x: &[f64]) -> Vec<f64> {
        let w = store.get(layer.weight);
        let b = store.get(layer.bias);
        (0..layer.out_dim)
            .map(|o| b.data()[o] + (0..layer.in_dim).map(|i| x[i] * w.get(i, o)).sum::<f64>())
            .collect()
    }

    fn relu(v: Vec<f64>) -> Vec<f64> {
        v.into_iter().map(|x| x.max(0.0)).collect()
    }

    #[test]
    fn one_round_line_matches_hand_composition() {
        let (store, bb) = build(1, 3);
        let pts = vec![[0.01, 0.01, 0.01], [0.03, 0.01, 0.01], [0.05, 0.01, 0.01]];
        let colors = vec![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6], [0.9, 0.8, 0.7]];
        let grid = voxelize(&PointCloud::new(pts, colors.clone(), 2).unwrap(), 0.02).unwrap();
        let groups = neighborhoods(&grid, Connectivity::Corners);
        assert_eq!(*groups, vec![vec![0, 1], vec![0, 1, 2], vec![1, 2]]);
        let input = backbone_input(&grid);
        let got = features(&store, &bb, &input, &groups);

        let xs = [0.0, 0.5, 1.0];
        let h0: Vec<Vec<f64>> = (0..3)
            .map(|i| {
                let row = [xs[i], 0.5, 0.5, colors[i][0], colors[i][1], colors[i][2]];
                let a = relu(dense(&store, &bb.input.layers[0], &row));
                dense(&store, &bb.input.layers[1], &a)
            })
            .collect();
        for (i, members) in groups.iter().enumerate() {
            let mean: Vec<f64> = (0..4)
                .map(|j| members.iter().map(|&v| h0[v][j]).sum::<f64>() / members.len() as f64)
                .collect();
            let mixed = relu(dense(&store, &bb.rounds[0], &mean));
            for j in 0..4 {
                assert!((got.get(i, j) - (h0[i][j] + mixed[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn no_rounds_is_pointwise_and_equivariant() {
        let (store, bb) = build(0, 1);
        let input = Tensor::from_fn(4, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 / 5.0);
        let groups: Groups = Arc::new(vec![vec![0, 1, 2, 3]; 4]);
        let a = features(&store, &bb, &input, &groups);
        let perm = [2, 0, 3, 1];
        let permuted = Tensor::from_fn(4, 6, |i, j| input.get(perm[i], j));
        let b = features(&store, &bb, &permuted, &groups);
        for i in 0..4 {
            assert_eq!(b.row(i), a.row(perm[i]));
        }
    }

    #[test]
    fn identical_inputs_and_neighborhoods_give_identical_features() {
        let (store, bb) = build(3, 2);
        let input = Tensor::from_fn(3, 6, |i, j| if i == 1 { 0.9 } else { 0.1 * j as f64 });
        let groups: Groups = Arc::new(vec![vec![0, 1], vec![1], vec![1, 2]]);
        let f = features(&store, &bb, &input, &groups);
        assert_eq!(f.row(0), f.row(2));
    }

    fn scalar_ce(logits: &[f64], y: usize) -> f64 {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        -((logits[y] - max).exp() / z).ln()
    }

    #[test]
    fn semantic_loss_fixtures() {
        let mut tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(&[5, 4]));
        let l = semantic_loss(&mut tape, uniform, &[0, 1, 2, 3, 3]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let confident = tape.constant(Tensor::from_fn(2, 3, |i, j| if i == j { 800.0 } else { -800.0 }));
        let l = semantic_loss(&mut tape, confident, &[0, 1]).unwrap();
        assert!(tape.value(l).item() < 1e-300);

        let rows = [[1.0, -0.5, 0.25], [0.0, 2.0, -1.0], [-0.3, 0.3, 0.9]];
        let y = [2, 1, 0];
        let t = tape.constant(Tensor::from_rows(&rows.map(|r| r.to_vec())).unwrap());
        let l = semantic_loss(&mut tape, t, &y).unwrap();
        let oracle = (0..3).map(|i| scalar_ce(&rows[i], y[i])).sum::<f64>() / 3.0;
        assert!((tape.value(l).item() - oracle).abs() < 1e-10);

        assert!(semantic_loss(&mut tape, t, &[0, 1, 3]).is_err());
    }

    #[test]
    fn geometric_loss_fixtures() {
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::zeros(&[1, 3]));
        let l = geometric_loss(&mut tape, zero, &[[0.0; 3]], &[Some([1.0, -2.0, 0.5])]).unwrap();
        assert_eq!(tape.value(l).item(), 3.5);

        let bias = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap());
        let l = geometric_loss(&mut tape, bias, &[[0.0; 3]], &[Some([1.0, -2.0, 0.5])]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let b = tape.leaf(Tensor::ones(&[2, 3]));
        let l = geometric_loss(&mut tape, b, &[[0.0; 3]; 2], &[None, None]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn refine_coords_adds_offsets() {
        let mut tape = Tape::new();
        let coords = [[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]];
        let d = Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![-0.5, 0.25, 2.0]]).unwrap();
        let dv = tape.leaf(d.clone());
        let r = refine_coords(&mut tape, &coords, dv).unwrap();
        for i in 0..2 {
            for a in 0..3 {
                assert_eq!(tape.value(r).get(i, a), coords[i][a] + d.get(i, a));
            }
        }
        // Offsets that point at the center collapse the instance.
        let center = [0.5, 0.5, 0.5];
        let to_center = Tensor::from_fn(2, 3, |i, a| center[a] - coords[i][a]);
        let dv = tape.constant(to_center);
        let r = refine_coords(&mut tape, &coords, dv).unwrap();
        assert!(tape.value(r).data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        let (store, bb) = build(2, 5);
        let input = Tensor::from_fn(5, 6, |i, j| ((i * 5 + j * 3) % 7) as f64 / 7.0);
        let groups: Groups = Arc::new(vec![vec![0, 1], vec![0, 1, 2], vec![1, 2, 3], vec![2, 3, 4], vec![3, 4]]);
        let labels = [0, 1, 2, 2, 1];
        let coords = [[0.0, 0.1, 0.2], [0.3, 0.1, 0.0], [0.5, 0.5, 0.5], [0.9, 0.1, 0.2], [0.7, 0.7, 0.0]];
        let centers = [Some([0.1, 0.1, 0.1]), None, Some([0.6, 0.4, 0.5]), Some([0.8, 0.2, 0.2]), None];
        let report = check_params(&store, Tolerance::default(), |tape, store| {
            let x = tape.constant(input.clone());
            let out = bb.forward(tape, store, x, &groups)?;
            let sem = semantic_loss(tape, out.semantic, &labels)?;
            let geo = geometric_loss(tape, out.bias.unwrap(), &coords, &centers)?;
            tape.add(sem, geo)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    proptest! {
        #[test]
        fn semantic_loss_matches_scalar_oracle(
            m in 1usize..50,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = Tensor::from_fn(m, 4, |_, _| rng.gen_range(-5.0..5.0));
            let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..4)).collect();
            let mut tape = Tape::new();
            let l = tape.constant(logits.clone());
            let loss = semantic_loss(&mut tape, l, &labels).unwrap();
            let oracle = (0..m).map(|i| scalar_ce(logits.row(i), labels[i])).sum::<f64>() / m as f64;
            prop_assert!((tape.value(loss).item() - oracle).abs() < 1e-10);
        }

        #[test]
        fn geometric_loss_invariances(
            seed in any::<u64>(),
            shift in prop::array::uniform3(-10.0f64..10.0),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = 6;
            let coords: Vec<[f64; 3]> = (0..m).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
            let centers: Vec<Option<[f64; 3]>> = (0..m)
                .map(|_| rng.gen_bool(0.7).then(|| [rng.gen(), rng.gen(), rng.gen()]))
                .collect();
            let bias = Tensor::from_fn(m, 3, |_, _| rng.gen_range(-1.0..1.0));
            let eval = |coords: &[[f64; 3]], centers: &[Option<[f64; 3]>], bias: &Tensor| {
                let mut tape = Tape::new();
                let b = tape.constant(bias.clone());
                let l = geometric_loss(&mut tape, b, coords, centers).unwrap();
                tape.value(l).item()
            };
            let base = eval(&coords, &centers, &bias);

            let moved: Vec<[f64; 3]> = coords.iter().map(|c| [c[0] + shift[0], c[1] + shift[1], c[2] + shift[2]]).collect();
            let moved_centers: Vec<_> = centers.iter().map(|c| c.map(|c| [c[0] + shift[0], c[1] + shift[1], c[2] + shift[2]])).collect();
            prop_assert!((eval(&moved, &moved_centers, &bias) - base).abs() < 1e-9);

            let perm = [3, 5, 0, 1, 4, 2];
            let pc: Vec<_> = perm.iter().map(|&i| coords[i]).collect();
            let pcen: Vec<_> = perm.iter().map(|&i| centers[i]).collect();
            let pb = Tensor::from_fn(m, 3, |i, a| bias.get(perm[i], a));
            prop_assert!((eval(&pc, &pcen, &pb) - base).abs() < 1e-12);
        }

        #[test]
        fn features_are_permutation_equivariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<[f64; 3]> = (0..30)
                .map(|_| [rng.gen_range(0.0..0.1), rng.gen_range(0.0..0.1), rng.gen_range(0.0..0.04)])
                .collect();
            let colors: Vec<[f64; 3]> = (0..30).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
            let mut order: Vec<usize> = (0..30).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            let g1 = voxelize(&PointCloud::new(pts.clone(), colors.clone(), 2).unwrap(), 0.02).unwrap();
            let g2 = voxelize(
                &PointCloud::new(order.iter().map(|&i| pts[i]).collect(), order.iter().map(|&i| colors[i]).collect(), 2).unwrap(),
                0.02,
            )
            .unwrap();
            let (store, bb) = build(3, seed);
            let f1 = features(&store, &bb, &backbone_input(&g1), &neighborhoods(&g1, Connectivity::Corners));
            let f2 = features(&store, &bb, &backbone_input(&g2), &neighborhoods(&g2, Connectivity::Corners));
            prop_assert_eq!(g1.keys, g2.keys);
            prop_assert!(f1.max_abs_diff(&f2) < 1e-12);
        }
    }
}
