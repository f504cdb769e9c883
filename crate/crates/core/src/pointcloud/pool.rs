use super::{SuperpointPartition, VoxelGrid};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Mean of member voxel rows for every superpoint (`m x k` to `n_s x k`).
pub fn pool_to_superpoints(tape: &mut Tape, values: Var, part: &SuperpointPartition) -> Result<Var> {
    let rows = tape.value(values).rows();
    if rows != part.num_voxels() {
        return Err(Error::shape(
            "pool_to_superpoints",
            tape.shape(values),
            &[part.num_voxels()],
        ));
    }
    tape.segment_mean(values, &part.groups())
}

/// Copies each superpoint row to every point of that superpoint.
pub fn broadcast_to_points(
    tape: &mut Tape,
    values: Var,
    part: &SuperpointPartition,
    grid: &VoxelGrid,
) -> Result<Var> {
    check_broadcast(tape.value(values).rows(), part, grid)?;
    tape.gather_rows(values, &part.point_to_superpoint(grid))
}

/// Untracked variant of [`broadcast_to_points`] for plain values.
pub fn broadcast_rows<T: Clone>(
    values: &[T],
    part: &SuperpointPartition,
    grid: &VoxelGrid,
) -> Result<Vec<T>> {
    check_broadcast(values.len(), part, grid)?;
    Ok(part
        .point_to_superpoint(grid)
        .into_iter()
        .map(|s| values[s].clone())
        .collect())
}

/// Untracked mean pooling of a plain matrix.
pub fn pool_rows(values: &Tensor, part: &SuperpointPartition) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(values.clone());
    let out = pool_to_superpoints(&mut tape, v, part)?;
    Ok(tape.value(out).clone())
}

fn check_broadcast(rows: usize, part: &SuperpointPartition, grid: &VoxelGrid) -> Result<()> {
    if rows != part.len() || part.num_voxels() != grid.len() {
        return Err(Error::invalid(
            "broadcast_to_points",
            format!(
                "{rows} rows for {} superpoints over {} of {} voxels",
                part.len(),
                part.num_voxels(),
                grid.len()
            ),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{voxelize, PointCloud};
    use crate::tensor::gradcheck::{check_params, Tolerance};
    use crate::tensor::{ParamGroup, ParamStore};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_partition(rng: &mut impl Rng, m: usize, parts: usize) -> SuperpointPartition {
        // Ensure every label appears at least once.
        let mut labels: Vec<usize> = (0..m).map(|i| if i < parts { i } else { rng.gen_range(0..parts) }).collect();
        use rand::seq::SliceRandom;
        labels.shuffle(rng);
        SuperpointPartition::from_labels(&labels)
    }

    fn line_grid(n: usize) -> VoxelGrid {
        let pts: Vec<[f64; 3]> = (0..n).map(|i| [i as f64 * 0.02 + 0.001, 0.0, 0.0]).collect();
        voxelize(&PointCloud::new(pts, vec![[0.0; 3]; n], 2).unwrap(), 0.02).unwrap()
    }

    #[test]
    fn singleton_superpoints_are_identity() {
        let vals = Tensor::from_fn(5, 3, |i, j| (i * 3 + j) as f64 * 0.7 - 2.0);
        let out = pool_rows(&vals, &SuperpointPartition::identity(5)).unwrap();
        assert_eq!(out, vals);
    }

    #[test]
    fn single_group_mean() {
        let vals = Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap();
        let out = pool_rows(&vals, &SuperpointPartition::from_labels(&[0, 0])).unwrap();
        assert_eq!(out.data(), &[2.0]);
    }

    #[test]
    fn pooling_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let vals = Tensor::from_fn(10, 4, |_, _| rng.gen_range(-1.0..1.0));
            let part = random_partition(&mut rng, 10, 4);
            let out = pool_rows(&vals, &part).unwrap();
            for s in 0..part.len() {
                for c in 0..4 {
                    let (mut sum, mut cnt) = (0.0, 0);
                    for v in 0..10 {
                        if part.voxel_to_superpoint[v] == s {
                            sum += vals.get(v, c);
                            cnt += 1;
                        }
                    }
                    assert!((out.get(s, c) - sum / cnt as f64).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn pooling_gradient_splits_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let part = random_partition(&mut rng, 10, 3);
        let mut store = ParamStore::new();
        let id = store
            .add("v", ParamGroup::Base, Tensor::from_fn(10, 2, |_, _| rng.gen_range(-1.0..1.0)))
            .unwrap();
        let report = check_params(&store, Tolerance::default(), |tape, store| {
            let v = tape.param(store, id);
            let p = pool_to_superpoints(tape, v, &part)?;
            let sq = tape.mul(p, p)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.passed());
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(pool_to_superpoints(&mut tape, v, &SuperpointPartition::identity(5)).is_err());
    }

    #[test]
    fn broadcast_single_superpoint() {
        let grid = line_grid(6);
        let part = SuperpointPartition::from_labels(&[0; 6]);
        let out = broadcast_rows(&[7.5], &part, &grid).unwrap();
        assert_eq!(out, vec![7.5; 6]);
    }

    #[test]
    fn broadcast_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = line_grid(12);
        let part = random_partition(&mut rng, 12, 5);
        let mut tape = Tape::new();
        let vals = tape.constant(Tensor::from_fn(5, 3, |_, _| rng.gen_range(-1.0..1.0)));
        let out = broadcast_to_points(&mut tape, vals, &part, &grid).unwrap();
        let (o, v) = (tape.value(out), tape.value(vals));
        for p in 0..grid.num_points() {
            let s = part.voxel_to_superpoint[grid.point_to_voxel[p]];
            assert_eq!(o.row(p), v.row(s));
        }
    }

    proptest! {
        #[test]
        fn pool_preserves_constants_and_inverts_broadcast(
            labels in prop::collection::vec(0usize..4, 1..12),
            c in -5.0f64..5.0,
        ) {
            let part = SuperpointPartition::from_labels(&labels);
            let m = labels.len();
            let out = pool_rows(&Tensor::full(&[m, 2], c), &part).unwrap();
            prop_assert!(out.data().iter().all(|&v| (v - c).abs() < 1e-12));

            // Piecewise-constant voxel values pool back to the superpoint values.
            let sp_vals: Vec<f64> = (0..part.len()).map(|s| s as f64 * 1.5 - c).collect();
            let voxel_vals = Tensor::from_fn(m, 1, |v, _| sp_vals[part.voxel_to_superpoint[v]]);
            let back = pool_rows(&voxel_vals, &part).unwrap();
            for s in 0..part.len() {
                prop_assert!((back.get(s, 0) - sp_vals[s]).abs() < 1e-12);
            }
        }
    }
}
